//! The learnable pieces: user/item embedding tables, the user-item event
//! encoder, the NOT/AND/OR modules, and the frozen truth anchor.
//!
//! Every module is a two-layer network `out = W2 * relu(W1 * x + b1) + b2`
//! with hidden width equal to the event dimension. The truth anchor is a
//! random vector frozen at init; the false anchor is NOT(anchor) under the
//! current NOT parameters.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tape::{BufId, Tape};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_DIM: usize = 64;
pub const INIT_STD: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TwoLayerIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Parameter ids for one model, in checkpoint order.
#[derive(Clone, Copy, Debug)]
pub struct ModelIds {
    pub user_table: ParamId,
    pub item_table: ParamId,
    pub encoder: TwoLayerIds,
    pub not_gate: TwoLayerIds,
    pub and_gate: TwoLayerIds,
    pub or_gate: TwoLayerIds,
    pub anchor: ParamId,
    pub dim: usize,
}

fn normal_tensor<S: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor<S> {
    // Box-Muller on uniform draws keeps us independent of distribution crates.
    let mut data = Vec::with_capacity(rows * cols);
    while data.len() < rows * cols {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        data.push(S::from_f64(r * theta.cos() * std));
        if data.len() < rows * cols {
            data.push(S::from_f64(r * theta.sin() * std));
        }
    }
    Tensor::from_vec(rows, cols, data)
}

fn init_two_layer<S: Scalar>(
    store: &mut ParamStore<S>,
    rng: &mut ChaCha8Rng,
    name: &str,
    input_dim: usize,
    dim: usize,
) -> TwoLayerIds {
    TwoLayerIds {
        w1: store.add(&format!("{name}.w1"), normal_tensor(rng, input_dim, dim, INIT_STD), true),
        b1: store.add(&format!("{name}.b1"), normal_tensor(rng, 1, dim, INIT_STD), true),
        w2: store.add(&format!("{name}.w2"), normal_tensor(rng, dim, dim, INIT_STD), true),
        b2: store.add(&format!("{name}.b2"), normal_tensor(rng, 1, dim, INIT_STD), true),
    }
}

impl ModelIds {
    /// Fresh model with every tensor drawn from normal(0, 0.01); the anchor
    /// is drawn once and frozen.
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        user_count: usize,
        item_count: usize,
        dim: usize,
    ) -> ModelIds {
        let user_table = store.add("user_table", normal_tensor(rng, user_count, dim, INIT_STD), true);
        let item_table = store.add("item_table", normal_tensor(rng, item_count, dim, INIT_STD), true);
        let encoder = init_two_layer(store, rng, "encoder", 2 * dim, dim);
        let not_gate = init_two_layer(store, rng, "not", dim, dim);
        let and_gate = init_two_layer(store, rng, "and", 2 * dim, dim);
        let or_gate = init_two_layer(store, rng, "or", 2 * dim, dim);
        let anchor = store.add("anchor", normal_tensor(rng, 1, dim, INIT_STD), false);
        ModelIds { user_table, item_table, encoder, not_gate, and_gate, or_gate, anchor, dim }
    }
}

/// Dropout policy for one forward pass. Evaluation paths use `off`.
pub struct DropoutCtx<'r> {
    pub rate: f64,
    pub rng: Option<&'r mut ChaCha8Rng>,
}

impl<'r> DropoutCtx<'r> {
    pub fn off() -> DropoutCtx<'static> {
        DropoutCtx { rate: 0.0, rng: None }
    }

    pub fn new(rate: f64, rng: &'r mut ChaCha8Rng) -> DropoutCtx<'r> {
        DropoutCtx { rate, rng: Some(rng) }
    }

    fn active(&self) -> bool {
        self.rate > 0.0 && self.rng.is_some()
    }
}

#[derive(Clone, Copy, Debug)]
struct BoundTwoLayer {
    w1: BufId,
    b1: BufId,
    w2: BufId,
    b2: BufId,
}

/// Model parameters snapshotted onto one tape. Binding once per tape keeps
/// each weight buffer (and its gradient accumulator) unique.
pub struct BoundModel {
    pub ids: ModelIds,
    encoder: BoundTwoLayer,
    not_gate: BoundTwoLayer,
    and_gate: BoundTwoLayer,
    or_gate: BoundTwoLayer,
    anchor: BufId,
}

impl BoundModel {
    pub fn bind<S: Scalar>(tape: &mut Tape<'_, S>, ids: &ModelIds) -> BoundModel {
        let bind2 = |tape: &mut Tape<'_, S>, t: &TwoLayerIds| BoundTwoLayer {
            w1: tape.param(t.w1),
            b1: tape.param(t.b1),
            w2: tape.param(t.w2),
            b2: tape.param(t.b2),
        };
        BoundModel {
            ids: *ids,
            encoder: bind2(tape, &ids.encoder),
            not_gate: bind2(tape, &ids.not_gate),
            and_gate: bind2(tape, &ids.and_gate),
            or_gate: bind2(tape, &ids.or_gate),
            anchor: tape.param(ids.anchor),
        }
    }

    pub fn anchor_buf(&self) -> BufId {
        self.anchor
    }

    fn two_layer<S: Scalar>(
        &self,
        tape: &mut Tape<'_, S>,
        layer: &BoundTwoLayer,
        input: BufId,
        dropout: &mut DropoutCtx,
    ) -> Result<BufId> {
        let lin1 = tape.matmul(input, layer.w1)?;
        let lin1 = tape.add_row(lin1, layer.b1)?;
        self.finish_gate(tape, layer, lin1, dropout)
    }

    /// Encode (user, item) pairs into event vectors, one row per pair.
    pub fn encode_events<S: Scalar>(
        &self,
        tape: &mut Tape<'_, S>,
        users: &[u32],
        items: &[u32],
        dropout: &mut DropoutCtx,
    ) -> Result<BufId> {
        let u = tape.gather(self.ids.user_table, users)?;
        let v = tape.gather(self.ids.item_table, items)?;
        let uv = tape.concat_cols(&[u, v])?;
        self.two_layer(tape, &self.encoder, uv, dropout)
    }

    pub fn apply_not<S: Scalar>(
        &self,
        tape: &mut Tape<'_, S>,
        e: BufId,
        dropout: &mut DropoutCtx,
    ) -> Result<BufId> {
        self.two_layer(tape, &self.not_gate, e, dropout)
    }

    pub fn apply_and<S: Scalar>(
        &self,
        tape: &mut Tape<'_, S>,
        a: BufId,
        b: BufId,
        dropout: &mut DropoutCtx,
    ) -> Result<BufId> {
        let ab = tape.concat_cols(&[a, b])?;
        self.two_layer(tape, &self.and_gate, ab, dropout)
    }

    pub fn apply_or<S: Scalar>(
        &self,
        tape: &mut Tape<'_, S>,
        a: BufId,
        b: BufId,
        dropout: &mut DropoutCtx,
    ) -> Result<BufId> {
        let ab = tape.concat_cols(&[a, b])?;
        self.two_layer(tape, &self.or_gate, ab, dropout)
    }

    /// AND(x, row) with a single broadcast right operand. Splits W1 into its
    /// x and y halves so the y contribution is one row; algebraically equal
    /// to `apply_and(x, repeat_row(row))`.
    pub fn apply_and_broadcast<S: Scalar>(
        &self,
        tape: &mut Tape<'_, S>,
        x: BufId,
        row: BufId,
        dropout: &mut DropoutCtx,
    ) -> Result<BufId> {
        self.gate_broadcast(tape, &self.and_gate, x, row, dropout)
    }

    /// OR(x, row) with a single broadcast right operand.
    pub fn apply_or_broadcast<S: Scalar>(
        &self,
        tape: &mut Tape<'_, S>,
        x: BufId,
        row: BufId,
        dropout: &mut DropoutCtx,
    ) -> Result<BufId> {
        self.gate_broadcast(tape, &self.or_gate, x, row, dropout)
    }

    /// AND(x, x): concat[x,x] @ W1 == x @ (W1_top + W1_bottom).
    pub fn apply_and_self<S: Scalar>(
        &self,
        tape: &mut Tape<'_, S>,
        x: BufId,
        dropout: &mut DropoutCtx,
    ) -> Result<BufId> {
        self.gate_self(tape, &self.and_gate, x, dropout)
    }

    /// OR(x, x) through the folded-weight route.
    pub fn apply_or_self<S: Scalar>(
        &self,
        tape: &mut Tape<'_, S>,
        x: BufId,
        dropout: &mut DropoutCtx,
    ) -> Result<BufId> {
        self.gate_self(tape, &self.or_gate, x, dropout)
    }

    fn gate_broadcast<S: Scalar>(
        &self,
        tape: &mut Tape<'_, S>,
        layer: &BoundTwoLayer,
        x: BufId,
        row: BufId,
        dropout: &mut DropoutCtx,
    ) -> Result<BufId> {
        let n = self.ids.dim;
        let top: Vec<u32> = (0..n as u32).collect();
        let bottom: Vec<u32> = (n as u32..2 * n as u32).collect();
        let w_top = tape.select_rows(layer.w1, &top)?;
        let w_bottom = tape.select_rows(layer.w1, &bottom)?;
        let lin = tape.matmul(x, w_top)?;
        let row_contrib = tape.matmul(row, w_bottom)?;
        let lin = tape.add_row(lin, row_contrib)?;
        let lin = tape.add_row(lin, layer.b1)?;
        self.finish_gate(tape, layer, lin, dropout)
    }

    fn gate_self<S: Scalar>(
        &self,
        tape: &mut Tape<'_, S>,
        layer: &BoundTwoLayer,
        x: BufId,
        dropout: &mut DropoutCtx,
    ) -> Result<BufId> {
        let n = self.ids.dim;
        let top: Vec<u32> = (0..n as u32).collect();
        let bottom: Vec<u32> = (n as u32..2 * n as u32).collect();
        let w_top = tape.select_rows(layer.w1, &top)?;
        let w_bottom = tape.select_rows(layer.w1, &bottom)?;
        let w_sum = tape.add(w_top, w_bottom)?;
        let lin = tape.matmul(x, w_sum)?;
        let lin = tape.add_row(lin, layer.b1)?;
        self.finish_gate(tape, layer, lin, dropout)
    }

    fn finish_gate<S: Scalar>(
        &self,
        tape: &mut Tape<'_, S>,
        layer: &BoundTwoLayer,
        lin: BufId,
        dropout: &mut DropoutCtx,
    ) -> Result<BufId> {
        let mut hidden = tape.relu(lin);
        if dropout.active() {
            let (r, c) = tape.shape(hidden);
            let rate = dropout.rate;
            let rng = dropout.rng.as_mut().unwrap();
            let mask: Vec<u8> = (0..r * c).map(|_| u8::from(rng.gen::<f64>() >= rate)).collect();
            hidden = tape.dropout(hidden, mask, rate)?;
        }
        let lin2 = tape.matmul(hidden, layer.w2)?;
        tape.add_row(lin2, layer.b2)
    }

    /// Cosine of each row against the truth anchor, in [-1, 1].
    pub fn truth_similarity<S: Scalar>(&self, tape: &mut Tape<'_, S>, exp: BufId) -> Result<BufId> {
        tape.row_cosine(exp, self.anchor)
    }

    /// The false anchor under current NOT parameters. Never sees dropout:
    /// a noisy anchor would corrupt every law that references it.
    pub fn false_anchor<S: Scalar>(&self, tape: &mut Tape<'_, S>) -> Result<BufId> {
        self.apply_not(tape, self.anchor, &mut DropoutCtx::off())
    }

    /// Sum of squares of every module weight and bias (embedding rows are
    /// decayed per gathered row, the anchor is frozen and excluded).
    pub fn weight_l2<S: Scalar>(&self, tape: &mut Tape<'_, S>) -> Result<BufId> {
        let mut total: Option<BufId> = None;
        for layer in [&self.encoder, &self.not_gate, &self.and_gate, &self.or_gate] {
            for buf in [layer.w1, layer.b1, layer.w2, layer.b2] {
                let sq = tape.mul(buf, buf)?;
                let s = tape.sum_all(sq);
                total = Some(match total {
                    None => s,
                    Some(acc) => tape.add(acc, s)?,
                });
            }
        }
        Ok(total.expect("modules always present"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny_model(dim: usize) -> (ParamStore<f64>, ModelIds) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ids = ModelIds::init(&mut store, &mut rng, 4, 6, dim);
        (store, ids)
    }

    #[test]
    fn encoder_with_zero_weights_returns_bias() {
        let (mut store, ids) = tiny_model(3);
        for pid in 0..store.len() {
            for v in store.get_mut(pid).data.iter_mut() {
                *v = 0.0;
            }
        }
        store.get_mut(ids.encoder.b2).data.copy_from_slice(&[0.5, -0.25, 1.0]);
        let mut tape = Tape::new(&store);
        let bound = BoundModel::bind(&mut tape, &ids);
        let e = bound.encode_events(&mut tape, &[1, 3], &[0, 5], &mut DropoutCtx::off()).unwrap();
        assert_eq!(tape.value(e).row(0), &[0.5, -0.25, 1.0]);
        assert_eq!(tape.value(e).row(1), &[0.5, -0.25, 1.0]);
    }

    #[test]
    fn untrained_module_outputs_are_finite_with_event_dim() {
        let (store, ids) = tiny_model(5);
        let mut tape = Tape::new(&store);
        let bound = BoundModel::bind(&mut tape, &ids);
        let e = bound.encode_events(&mut tape, &[0, 1, 2], &[3, 4, 5], &mut DropoutCtx::off()).unwrap();
        let n = bound.apply_not(&mut tape, e, &mut DropoutCtx::off()).unwrap();
        let o = bound.apply_or(&mut tape, e, n, &mut DropoutCtx::off()).unwrap();
        let a = bound.apply_and(&mut tape, n, o, &mut DropoutCtx::off()).unwrap();
        for id in [e, n, o, a] {
            assert_eq!(tape.shape(id), (3, 5));
            assert!(tape.value(id).all_finite());
        }
    }

    #[test]
    fn unknown_id_is_rejected() {
        let (store, ids) = tiny_model(3);
        let mut tape = Tape::new(&store);
        let bound = BoundModel::bind(&mut tape, &ids);
        let err = bound
            .encode_events(&mut tape, &[99], &[0], &mut DropoutCtx::off())
            .unwrap_err();
        assert!(matches!(err, crate::NcrError::UnknownId { .. }));
    }

    #[test]
    fn truth_similarity_of_anchor_is_one() {
        let (store, ids) = tiny_model(4);
        let mut tape = Tape::new(&store);
        let bound = BoundModel::bind(&mut tape, &ids);
        let anchor = bound.anchor_buf();
        let sim = bound.truth_similarity(&mut tape, anchor).unwrap();
        assert!((tape.value(sim).data[0] - 1.0).abs() < 1e-12);
        let neg = tape.scale(anchor, -1.0);
        let sim_neg = bound.truth_similarity(&mut tape, neg).unwrap();
        assert!((tape.value(sim_neg).data[0] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn truth_similarity_is_scale_invariant() {
        let (store, ids) = tiny_model(4);
        let mut tape = Tape::new(&store);
        let bound = BoundModel::bind(&mut tape, &ids);
        let x = tape.constant(Tensor::row_vector(vec![0.4, -0.2, 0.9, 0.1]));
        let s1 = bound.truth_similarity(&mut tape, x).unwrap();
        let scaled = tape.scale(x, 37.5);
        let s2 = bound.truth_similarity(&mut tape, scaled).unwrap();
        assert!((tape.value(s1).data[0] - tape.value(s2).data[0]).abs() < 1e-6);
    }

    #[test]
    fn false_anchor_is_pure_and_tracks_not_params() {
        let (mut store, ids) = tiny_model(4);
        let f1 = {
            let mut tape = Tape::new(&store);
            let bound = BoundModel::bind(&mut tape, &ids);
            let f = bound.false_anchor(&mut tape).unwrap();
            tape.value(f).data.clone()
        };
        let f2 = {
            let mut tape = Tape::new(&store);
            let bound = BoundModel::bind(&mut tape, &ids);
            let f = bound.false_anchor(&mut tape).unwrap();
            tape.value(f).data.clone()
        };
        assert_eq!(f1, f2);

        store.get_mut(ids.not_gate.b2).data[0] += 0.125;
        let f3 = {
            let mut tape = Tape::new(&store);
            let bound = BoundModel::bind(&mut tape, &ids);
            let f = bound.false_anchor(&mut tape).unwrap();
            tape.value(f).data.clone()
        };
        assert_ne!(f1, f3);
        assert_eq!(f3.len(), 4);
        assert!(f3.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn broadcast_and_self_gates_match_the_general_route() {
        let (store, ids) = tiny_model(6);
        let mut tape = Tape::new(&store);
        let bound = BoundModel::bind(&mut tape, &ids);
        let mut off = DropoutCtx::off();
        let x = bound.encode_events(&mut tape, &[0, 1, 2], &[0, 2, 4], &mut off).unwrap();
        let anchor = bound.anchor_buf();
        let anchor_rep = tape.repeat_row(anchor, 3).unwrap();

        let general = bound.apply_or(&mut tape, x, anchor_rep, &mut off).unwrap();
        let fast = bound.apply_or_broadcast(&mut tape, x, anchor, &mut off).unwrap();
        for (g, f) in tape.value(general).data.iter().zip(&tape.value(fast).data) {
            assert!((g - f).abs() < 1e-12);
        }

        let general = bound.apply_and(&mut tape, x, x, &mut off).unwrap();
        let fast = bound.apply_and_self(&mut tape, x, &mut off).unwrap();
        for (g, f) in tape.value(general).data.iter().zip(&tape.value(fast).data) {
            assert!((g - f).abs() < 1e-12);
        }

        let general = bound.apply_and(&mut tape, x, anchor_rep, &mut off).unwrap();
        let fast = bound.apply_and_broadcast(&mut tape, x, anchor, &mut off).unwrap();
        for (g, f) in tape.value(general).data.iter().zip(&tape.value(fast).data) {
            assert!((g - f).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_masks_differ_between_calls_but_eval_is_deterministic() {
        let (store, ids) = tiny_model(8);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new(&store);
        let bound = BoundModel::bind(&mut tape, &ids);
        let mut ctx = DropoutCtx::new(0.5, &mut rng);
        let e1 = bound.encode_events(&mut tape, &[0], &[0], &mut ctx).unwrap();
        let e2 = bound.encode_events(&mut tape, &[0], &[0], &mut ctx).unwrap();
        assert_ne!(tape.value(e1).data, tape.value(e2).data);

        let d1 = bound.encode_events(&mut tape, &[0], &[0], &mut DropoutCtx::off()).unwrap();
        let d2 = bound.encode_events(&mut tape, &[0], &[0], &mut DropoutCtx::off()).unwrap();
        assert_eq!(tape.value(d1).data, tape.value(d2).data);
    }
}
