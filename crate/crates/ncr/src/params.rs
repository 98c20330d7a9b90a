use crate::tensor::{Scalar, Tensor};

pub type ParamId = usize;

/// Owns every learnable tensor plus frozen constants (the truth anchor).
/// Declared order is the checkpoint order.
#[derive(Clone, Debug)]
pub struct ParamStore<S: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
    trainable: Vec<bool>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new(), trainable: Vec::new() }
    }

    pub fn add(&mut self, name: &str, tensor: Tensor<S>, trainable: bool) -> ParamId {
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        self.trainable.push(trainable);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.tensors[id]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        0..self.tensors.len()
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            trainable: self.trainable.clone(),
        }
    }
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-parameter gradients produced by one backward pass. `None` means no
/// path from that parameter to the loss (treated as zero).
#[derive(Debug)]
pub struct Gradients<S: Scalar> {
    pub by_param: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn zeros_like(store: &ParamStore<S>) -> Self {
        Gradients { by_param: (0..store.len()).map(|_| None).collect() }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.by_param[id].as_ref()
    }
}
