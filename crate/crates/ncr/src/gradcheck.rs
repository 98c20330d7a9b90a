//! Central-difference gradient verification at f64.

use crate::error::{NcrError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{BufId, Tape};

pub const FD_STEP: f64 = 1e-5;

#[derive(Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Debug)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.per_param.iter().all(|p| p.pass)
    }

    pub fn worst(&self) -> f64 {
        self.per_param.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }
}

/// Compare analytic gradients against central finite differences for every
/// element of every trainable parameter. The builder must be deterministic
/// (dropout off); this is verified by running the forward pass twice.
pub fn check_gradient<F>(params: &ParamStore<f64>, build: F, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_, f64>) -> Result<BufId>,
{
    let mut store = params.clone();

    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new(store);
        let loss = build(&mut tape)?;
        let (r, c) = tape.shape(loss);
        if (r, c) != (1, 1) {
            return Err(NcrError::NonScalarLoss(r, c));
        }
        Ok(tape.value(loss).data[0])
    };

    let base1 = eval(&store)?;
    let base2 = eval(&store)?;
    if base1.to_bits() != base2.to_bits() {
        return Err(NcrError::NonDeterministic);
    }

    let mut analytic = {
        let mut tape = Tape::new(&store);
        let loss = build(&mut tape)?;
        tape.backward(loss)?
    };

    let ids: Vec<ParamId> = (0..store.len()).filter(|&id| store.is_trainable(id)).collect();
    let mut per_param = Vec::with_capacity(ids.len());
    for id in ids {
        let len = store.get(id).data.len();
        let ga = analytic.by_param[id]
            .take()
            .map(|t| t.data)
            .unwrap_or_else(|| vec![0.0; len]);
        let mut max_rel = 0.0f64;
        for i in 0..len {
            let orig = store.get(id).data[i];
            store.get_mut(id).data[i] = orig + FD_STEP;
            let up = eval(&store)?;
            store.get_mut(id).data[i] = orig - FD_STEP;
            let down = eval(&store)?;
            store.get_mut(id).data[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            max_rel = max_rel.max(rel_err(ga[i], numeric));
        }
        per_param.push(ParamCheck {
            name: store.name(id).to_string(),
            max_rel_err: max_rel,
            pass: max_rel < tolerance,
        });
    }
    Ok(GradCheckReport { per_param, tolerance })
}

fn rel_err(a: f64, n: f64) -> f64 {
    let denom = a.abs().max(n.abs());
    if denom < 1e-10 {
        (a - n).abs()
    } else {
        (a - n).abs() / denom
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn simple_quadratic_passes() {
        let mut p = ParamStore::<f64>::new();
        let x = p.add("x", Tensor::row_vector(vec![0.3, -0.8, 1.2]), true);
        let report = check_gradient(&p, |tape| {
            let xb = tape.param(x);
            let sq = tape.mul(xb, xb)?;
            Ok(tape.sum_all(sq))
        }, 1e-4).unwrap();
        assert!(report.pass(), "worst rel err {}", report.worst());
    }

    #[test]
    fn non_deterministic_builder_is_rejected() {
        use std::cell::Cell;
        let mut p = ParamStore::<f64>::new();
        let x = p.add("x", Tensor::scalar(1.0), true);
        let flip = Cell::new(false);
        let err = check_gradient(&p, |tape| {
            let xb = tape.param(x);
            let c = if flip.get() { 2.0 } else { 3.0 };
            flip.set(!flip.get());
            Ok(tape.scale(xb, c))
        }, 1e-4).unwrap_err();
        assert!(matches!(err, NcrError::NonDeterministic));
    }
}
