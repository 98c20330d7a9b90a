//! Reverse-mode gradient tape.
//!
//! Forward calls record one node per primitive into a linear tape; `backward`
//! replays the nodes in reverse, accumulating vector-Jacobian products into
//! buffer adjoints and finally into per-parameter gradients. One tape per
//! training step, confined to a single thread.

use crate::error::{NcrError, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Scalar, Tensor};

pub type BufId = usize;

/// Row norms below this are treated as degenerate by cosine similarity:
/// the similarity is 0 and no gradient propagates through that row.
pub const COSINE_NORM_EPS: f64 = 1e-12;

#[derive(Debug)]
enum Node<S: Scalar> {
    Constant { out: BufId },
    Param { pid: ParamId, out: BufId },
    Gather { pid: ParamId, rows: Vec<u32>, out: BufId },
    MatMul { a: BufId, b: BufId, out: BufId },
    Add { a: BufId, b: BufId, out: BufId },
    Sub { a: BufId, b: BufId, out: BufId },
    Mul { a: BufId, b: BufId, out: BufId },
    AddRow { a: BufId, row: BufId, out: BufId },
    Scale { a: BufId, c: S, out: BufId },
    Relu { a: BufId, out: BufId },
    Sigmoid { a: BufId, out: BufId },
    Log { a: BufId, out: BufId },
    Softplus { a: BufId, out: BufId },
    ConcatCols { parts: Vec<BufId>, out: BufId },
    ConcatRows { parts: Vec<BufId>, out: BufId },
    SelectRows { a: BufId, rows: Vec<u32>, out: BufId },
    PickRows { slots: Vec<BufId>, pick: Vec<u32>, out: BufId },
    RepeatRow { a: BufId, out: BufId },
    SumAll { a: BufId, out: BufId },
    RowCosine { a: BufId, b: BufId, out: BufId },
    MseSum { a: BufId, b: BufId, out: BufId },
    Dropout { a: BufId, mask: Vec<u8>, scale: S, out: BufId },
}

pub struct Tape<'p, S: Scalar> {
    params: &'p ParamStore<S>,
    bufs: Vec<Tensor<S>>,
    nodes: Vec<Node<S>>,
    consumed: bool,
}

impl<'p, S: Scalar> Tape<'p, S> {
    pub fn new(params: &'p ParamStore<S>) -> Self {
        Tape { params, bufs: Vec::new(), nodes: Vec::new(), consumed: false }
    }

    pub fn value(&self, id: BufId) -> &Tensor<S> {
        &self.bufs[id]
    }

    pub fn shape(&self, id: BufId) -> (usize, usize) {
        (self.bufs[id].rows, self.bufs[id].cols)
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, value: Tensor<S>, node: impl FnOnce(BufId) -> Node<S>) -> BufId {
        let out = self.bufs.len();
        self.bufs.push(value);
        self.nodes.push(node(out));
        out
    }

    fn mismatch(primitive: &'static str, details: String) -> NcrError {
        NcrError::ShapeMismatch { primitive, details }
    }

    // ── Leaves ───────────────────────────────────────────────────────

    /// A value with no gradient of its own (masks, anchors used as targets).
    pub fn constant(&mut self, value: Tensor<S>) -> BufId {
        self.push(value, |out| Node::Constant { out })
    }

    /// Snapshot a parameter tensor onto the tape.
    pub fn param(&mut self, pid: ParamId) -> BufId {
        let value = self.params.get(pid).clone();
        self.push(value, |out| Node::Param { pid, out })
    }

    /// Gather rows of an embedding table; backward scatter-adds per row.
    pub fn gather(&mut self, pid: ParamId, rows: &[u32]) -> Result<BufId> {
        let table = self.params.get(pid);
        let cols = table.cols;
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r as usize >= table.rows {
                return Err(NcrError::UnknownId { kind: "embedding row", id: r.to_string() });
            }
            data.extend_from_slice(table.row(r as usize));
        }
        let value = Tensor::from_vec(rows.len(), cols, data);
        let rows = rows.to_vec();
        Ok(self.push(value, |out| Node::Gather { pid, rows, out }))
    }

    // ── Primitives ───────────────────────────────────────────────────

    pub fn matmul(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        let (m, ka) = self.shape(a);
        let (kb, n) = self.shape(b);
        if ka != kb {
            return Err(Self::mismatch("matmul", format!("{m}x{ka} * {kb}x{n}")));
        }
        let mut out = Tensor::zeros(m, n);
        gemm_nn(m, ka, n, &self.bufs[a].data, &self.bufs[b].data, &mut out.data);
        Ok(self.push(out, |out| Node::MatMul { a, b, out }))
    }

    pub fn add(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        if self.shape(a) != self.shape(b) {
            return Err(Self::mismatch("add", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let (r, c) = self.shape(a);
        let data = self.bufs[a].data.iter().zip(&self.bufs[b].data).map(|(&x, &y)| x + y).collect();
        Ok(self.push(Tensor::from_vec(r, c, data), |out| Node::Add { a, b, out }))
    }

    pub fn sub(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        if self.shape(a) != self.shape(b) {
            return Err(Self::mismatch("sub", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let (r, c) = self.shape(a);
        let data = self.bufs[a].data.iter().zip(&self.bufs[b].data).map(|(&x, &y)| x - y).collect();
        Ok(self.push(Tensor::from_vec(r, c, data), |out| Node::Sub { a, b, out }))
    }

    pub fn mul(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        if self.shape(a) != self.shape(b) {
            return Err(Self::mismatch("mul", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let (r, c) = self.shape(a);
        let data = self.bufs[a].data.iter().zip(&self.bufs[b].data).map(|(&x, &y)| x * y).collect();
        Ok(self.push(Tensor::from_vec(r, c, data), |out| Node::Mul { a, b, out }))
    }

    /// Broadcast-add a 1xN row (bias) to every row of a.
    pub fn add_row(&mut self, a: BufId, row: BufId) -> Result<BufId> {
        let (m, n) = self.shape(a);
        let (rr, rc) = self.shape(row);
        if rr != 1 || rc != n {
            return Err(Self::mismatch("add_row", format!("{m}x{n} + {rr}x{rc}")));
        }
        let mut out = self.bufs[a].clone();
        for r in 0..m {
            for (o, &b) in out.row_mut(r).iter_mut().zip(&self.bufs[row].data) {
                *o += b;
            }
        }
        Ok(self.push(out, |out| Node::AddRow { a, row, out }))
    }

    pub fn scale(&mut self, a: BufId, c: S) -> BufId {
        let (r, cl) = self.shape(a);
        let data = self.bufs[a].data.iter().map(|&x| x * c).collect();
        self.push(Tensor::from_vec(r, cl, data), |out| Node::Scale { a, c, out })
    }

    pub fn relu(&mut self, a: BufId) -> BufId {
        let (r, c) = self.shape(a);
        let data = self.bufs[a].data.iter().map(|&x| if x > S::ZERO { x } else { S::ZERO }).collect();
        self.push(Tensor::from_vec(r, c, data), |out| Node::Relu { a, out })
    }

    pub fn sigmoid(&mut self, a: BufId) -> BufId {
        let (r, c) = self.shape(a);
        let data = self.bufs[a].data.iter().map(|&x| sigmoid(x)).collect();
        self.push(Tensor::from_vec(r, c, data), |out| Node::Sigmoid { a, out })
    }

    pub fn log(&mut self, a: BufId) -> BufId {
        let (r, c) = self.shape(a);
        let data = self.bufs[a].data.iter().map(|&x| x.ln()).collect();
        self.push(Tensor::from_vec(r, c, data), |out| Node::Log { a, out })
    }

    /// ln(1 + e^x), the numerically stable route to -ln sigma(-x).
    pub fn softplus(&mut self, a: BufId) -> BufId {
        let (r, c) = self.shape(a);
        let data = self.bufs[a].data.iter().map(|&x| softplus(x)).collect();
        self.push(Tensor::from_vec(r, c, data), |out| Node::Softplus { a, out })
    }

    pub fn concat_cols(&mut self, parts: &[BufId]) -> Result<BufId> {
        let m = self.shape(parts[0]).0;
        let mut n = 0;
        for &p in parts {
            let (pm, pn) = self.shape(p);
            if pm != m {
                return Err(Self::mismatch("concat", format!("row counts differ: {m} vs {pm}")));
            }
            n += pn;
        }
        let mut out = Tensor::zeros(m, n);
        for r in 0..m {
            let dst = out.row_mut(r);
            let mut off = 0;
            for &p in parts {
                let src = self.bufs[p].row(r);
                dst[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let parts = parts.to_vec();
        Ok(self.push(out, |out| Node::ConcatCols { parts, out }))
    }

    pub fn concat_rows(&mut self, parts: &[BufId]) -> Result<BufId> {
        let n = self.shape(parts[0]).1;
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = self.shape(p);
            if pn != n {
                return Err(Self::mismatch("concat", format!("col counts differ: {n} vs {pn}")));
            }
            m += pm;
        }
        let mut data = Vec::with_capacity(m * n);
        for &p in parts {
            data.extend_from_slice(&self.bufs[p].data);
        }
        let parts = parts.to_vec();
        Ok(self.push(Tensor::from_vec(m, n, data), |out| Node::ConcatRows { parts, out }))
    }

    /// Gather a subset of rows from one buffer.
    pub fn select_rows(&mut self, a: BufId, rows: &[u32]) -> Result<BufId> {
        let (m, n) = self.shape(a);
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r as usize >= m {
                return Err(Self::mismatch("select_rows", format!("row {r} out of {m}")));
            }
            data.extend_from_slice(self.bufs[a].row(r as usize));
        }
        let rows = rows.to_vec();
        Ok(self.push(Tensor::from_vec(rows.len(), n, data), |out| Node::SelectRows { a, rows, out }))
    }

    /// Row i of the output is row i of `slots[pick[i]]`. All slots share one
    /// shape. This is how per-row operand shuffles stay inside one batched
    /// graph.
    pub fn pick_rows(&mut self, slots: &[BufId], pick: &[u32]) -> Result<BufId> {
        let (m, n) = self.shape(slots[0]);
        for &s in slots {
            if self.shape(s) != (m, n) {
                return Err(Self::mismatch("pick_rows", "slot shapes differ".into()));
            }
        }
        if pick.len() != m {
            return Err(Self::mismatch("pick_rows", format!("{} picks for {m} rows", pick.len())));
        }
        let mut out = Tensor::zeros(m, n);
        for (i, &s) in pick.iter().enumerate() {
            if s as usize >= slots.len() {
                return Err(Self::mismatch("pick_rows", format!("pick {s} out of {} slots", slots.len())));
            }
            out.row_mut(i).copy_from_slice(self.bufs[slots[s as usize]].row(i));
        }
        let slots = slots.to_vec();
        let pick = pick.to_vec();
        Ok(self.push(out, |out| Node::PickRows { slots, pick, out }))
    }

    /// Broadcast a 1xN row to M rows.
    pub fn repeat_row(&mut self, a: BufId, m: usize) -> Result<BufId> {
        let (ar, n) = self.shape(a);
        if ar != 1 {
            return Err(Self::mismatch("repeat_row", format!("expected 1x{n}, got {ar}x{n}")));
        }
        let mut data = Vec::with_capacity(m * n);
        for _ in 0..m {
            data.extend_from_slice(&self.bufs[a].data);
        }
        Ok(self.push(Tensor::from_vec(m, n, data), |out| Node::RepeatRow { a, out }))
    }

    pub fn sum_all(&mut self, a: BufId) -> BufId {
        let s: S = self.bufs[a].data.iter().copied().sum();
        self.push(Tensor::scalar(s), |out| Node::SumAll { a, out })
    }

    /// Mean over all entries, composed from sum and scale.
    pub fn mean_all(&mut self, a: BufId) -> BufId {
        let len = self.bufs[a].len();
        let s = self.sum_all(a);
        self.scale(s, S::from_f64(1.0 / len as f64))
    }

    /// Row-wise cosine similarity -> Mx1. `b` has matching rows or a single
    /// broadcast row. Rows with a degenerate norm yield 0 with zero gradient.
    pub fn row_cosine(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        let (m, n) = self.shape(a);
        let (bm, bn) = self.shape(b);
        if bn != n || (bm != m && bm != 1) {
            return Err(Self::mismatch("cosine_similarity", format!("{m}x{n} vs {bm}x{bn}")));
        }
        let mut out = Tensor::zeros(m, 1);
        for i in 0..m {
            let ra = self.bufs[a].row(i);
            let rb = self.bufs[b].row(if bm == 1 { 0 } else { i });
            out.data[i] = cosine_row(ra, rb);
        }
        Ok(self.push(out, |out| Node::RowCosine { a, b, out }))
    }

    /// sum over rows of mean-squared-error per row -> 1x1.
    /// `b` has matching rows or a single broadcast row.
    pub fn mse_sum(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        let (m, n) = self.shape(a);
        let (bm, bn) = self.shape(b);
        if bn != n || (bm != m && bm != 1) {
            return Err(Self::mismatch("mse", format!("{m}x{n} vs {bm}x{bn}")));
        }
        let inv_n = S::from_f64(1.0 / n as f64);
        let mut acc = S::ZERO;
        for i in 0..m {
            let ra = self.bufs[a].row(i);
            let rb = self.bufs[b].row(if bm == 1 { 0 } else { i });
            let mut row_acc = S::ZERO;
            for (&x, &y) in ra.iter().zip(rb) {
                let d = x - y;
                row_acc += d * d;
            }
            acc += row_acc * inv_n;
        }
        Ok(self.push(Tensor::scalar(acc), |out| Node::MseSum { a, b, out }))
    }

    /// Inverted dropout: zero each entry with probability p, scale kept
    /// entries by 1/(1-p). The mask is sampled by the caller so evaluation
    /// paths never touch an RNG.
    pub fn dropout(&mut self, a: BufId, mask: Vec<u8>, p: f64) -> Result<BufId> {
        let (r, c) = self.shape(a);
        if mask.len() != r * c {
            return Err(Self::mismatch("dropout_mask_apply", format!("mask {} for {r}x{c}", mask.len())));
        }
        let scale = S::from_f64(1.0 / (1.0 - p));
        let data = self.bufs[a].data.iter().zip(&mask)
            .map(|(&x, &k)| if k != 0 { x * scale } else { S::ZERO })
            .collect();
        Ok(self.push(Tensor::from_vec(r, c, data), |out| Node::Dropout { a, mask, scale, out }))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Replay the tape in reverse from a scalar loss. Returns per-parameter
    /// gradients; parameters with no path to the loss get `None`.
    pub fn backward(&mut self, loss: BufId) -> Result<Gradients<S>> {
        if self.consumed {
            return Err(NcrError::TapeConsumed);
        }
        let (lr, lc) = self.shape(loss);
        if (lr, lc) != (1, 1) {
            return Err(NcrError::NonScalarLoss(lr, lc));
        }
        self.consumed = true;

        let mut adj: Vec<Option<Tensor<S>>> = (0..self.bufs.len()).map(|_| None).collect();
        adj[loss] = Some(Tensor::scalar(S::ONE));
        let mut grads = Gradients::zeros_like(self.params);

        for idx in (0..self.nodes.len()).rev() {
            // Take the output adjoint; nodes after this one no longer need it.
            let out_id = self.node_out(idx);
            let d_out = match adj[out_id].take() {
                Some(d) => d,
                None => continue,
            };
            self.backprop_node(idx, &d_out, &mut adj, &mut grads);
        }
        Ok(grads)
    }

    fn node_out(&self, idx: usize) -> BufId {
        match &self.nodes[idx] {
            Node::Constant { out } | Node::Param { out, .. } | Node::Gather { out, .. }
            | Node::MatMul { out, .. } | Node::Add { out, .. } | Node::Sub { out, .. }
            | Node::Mul { out, .. } | Node::AddRow { out, .. } | Node::Scale { out, .. }
            | Node::Relu { out, .. } | Node::Sigmoid { out, .. } | Node::Log { out, .. }
            | Node::Softplus { out, .. } | Node::ConcatCols { out, .. }
            | Node::ConcatRows { out, .. } | Node::SelectRows { out, .. }
            | Node::PickRows { out, .. } | Node::RepeatRow { out, .. } | Node::SumAll { out, .. }
            | Node::RowCosine { out, .. } | Node::MseSum { out, .. } | Node::Dropout { out, .. } => *out,
        }
    }

    fn accum(adj: &mut [Option<Tensor<S>>], id: BufId, shape: (usize, usize), add: impl FnOnce(&mut Tensor<S>)) {
        let slot = adj[id].get_or_insert_with(|| Tensor::zeros(shape.0, shape.1));
        add(slot);
    }

    fn backprop_node(
        &self,
        idx: usize,
        d_out: &Tensor<S>,
        adj: &mut Vec<Option<Tensor<S>>>,
        grads: &mut Gradients<S>,
    ) {
        match &self.nodes[idx] {
            Node::Constant { .. } => {}

            Node::Param { pid, .. } => {
                let t = self.params.get(*pid);
                let g = grads.by_param[*pid].get_or_insert_with(|| Tensor::zeros(t.rows, t.cols));
                for (gi, &di) in g.data.iter_mut().zip(&d_out.data) {
                    *gi += di;
                }
            }

            Node::Gather { pid, rows, .. } => {
                let t = self.params.get(*pid);
                let g = grads.by_param[*pid].get_or_insert_with(|| Tensor::zeros(t.rows, t.cols));
                for (i, &r) in rows.iter().enumerate() {
                    for (gv, &dv) in g.row_mut(r as usize).iter_mut().zip(d_out.row(i)) {
                        *gv += dv;
                    }
                }
            }

            Node::MatMul { a, b, .. } => {
                let (m, k) = self.shape(*a);
                let n = self.shape(*b).1;
                // dA += dC * B^T
                Self::accum(adj, *a, (m, k), |da| {
                    gemm_nt(m, n, k, &d_out.data, &self.bufs[*b].data, &mut da.data);
                });
                // dB += A^T * dC
                Self::accum(adj, *b, (k, n), |db| {
                    gemm_tn(k, m, n, &self.bufs[*a].data, &d_out.data, &mut db.data);
                });
            }

            Node::Add { a, b, .. } => {
                for &id in [a, b] {
                    Self::accum(adj, id, self.shape(id), |d| {
                        for (x, &y) in d.data.iter_mut().zip(&d_out.data) {
                            *x += y;
                        }
                    });
                }
            }

            Node::Sub { a, b, .. } => {
                Self::accum(adj, *a, self.shape(*a), |d| {
                    for (x, &y) in d.data.iter_mut().zip(&d_out.data) {
                        *x += y;
                    }
                });
                Self::accum(adj, *b, self.shape(*b), |d| {
                    for (x, &y) in d.data.iter_mut().zip(&d_out.data) {
                        *x += -y;
                    }
                });
            }

            Node::Mul { a, b, .. } => {
                Self::accum(adj, *a, self.shape(*a), |d| {
                    for ((x, &y), &bv) in d.data.iter_mut().zip(&d_out.data).zip(&self.bufs[*b].data) {
                        *x += y * bv;
                    }
                });
                Self::accum(adj, *b, self.shape(*b), |d| {
                    for ((x, &y), &av) in d.data.iter_mut().zip(&d_out.data).zip(&self.bufs[*a].data) {
                        *x += y * av;
                    }
                });
            }

            Node::AddRow { a, row, .. } => {
                let (m, n) = self.shape(*a);
                Self::accum(adj, *a, (m, n), |d| {
                    for (x, &y) in d.data.iter_mut().zip(&d_out.data) {
                        *x += y;
                    }
                });
                Self::accum(adj, *row, (1, n), |d| {
                    for r in 0..m {
                        for (x, &y) in d.data.iter_mut().zip(d_out.row(r)) {
                            *x += y;
                        }
                    }
                });
            }

            Node::Scale { a, c, .. } => {
                Self::accum(adj, *a, self.shape(*a), |d| {
                    for (x, &y) in d.data.iter_mut().zip(&d_out.data) {
                        *x += y * *c;
                    }
                });
            }

            Node::Relu { a, .. } => {
                // Subgradient 0 at exactly 0.
                Self::accum(adj, *a, self.shape(*a), |d| {
                    for ((x, &y), &v) in d.data.iter_mut().zip(&d_out.data).zip(&self.bufs[*a].data) {
                        if v > S::ZERO {
                            *x += y;
                        }
                    }
                });
            }

            Node::Sigmoid { a, out } => {
                Self::accum(adj, *a, self.shape(*a), |d| {
                    for ((x, &y), &s) in d.data.iter_mut().zip(&d_out.data).zip(&self.bufs[*out].data) {
                        *x += y * s * (S::ONE - s);
                    }
                });
            }

            Node::Log { a, .. } => {
                Self::accum(adj, *a, self.shape(*a), |d| {
                    for ((x, &y), &v) in d.data.iter_mut().zip(&d_out.data).zip(&self.bufs[*a].data) {
                        *x += y / v;
                    }
                });
            }

            Node::Softplus { a, .. } => {
                Self::accum(adj, *a, self.shape(*a), |d| {
                    for ((x, &y), &v) in d.data.iter_mut().zip(&d_out.data).zip(&self.bufs[*a].data) {
                        *x += y * sigmoid(v);
                    }
                });
            }

            Node::ConcatCols { parts, .. } => {
                let m = self.shape(parts[0]).0;
                let mut off = 0;
                for &p in parts {
                    let n = self.shape(p).1;
                    Self::accum(adj, p, (m, n), |d| {
                        for r in 0..m {
                            let src = &d_out.row(r)[off..off + n];
                            for (x, &y) in d.row_mut(r).iter_mut().zip(src) {
                                *x += y;
                            }
                        }
                    });
                    off += n;
                }
            }

            Node::ConcatRows { parts, .. } => {
                let mut off = 0;
                for &p in parts {
                    let (pm, pn) = self.shape(p);
                    Self::accum(adj, p, (pm, pn), |d| {
                        for r in 0..pm {
                            for (x, &y) in d.row_mut(r).iter_mut().zip(d_out.row(off + r)) {
                                *x += y;
                            }
                        }
                    });
                    off += pm;
                }
            }

            Node::SelectRows { a, rows, .. } => {
                Self::accum(adj, *a, self.shape(*a), |d| {
                    for (i, &r) in rows.iter().enumerate() {
                        for (x, &y) in d.row_mut(r as usize).iter_mut().zip(d_out.row(i)) {
                            *x += y;
                        }
                    }
                });
            }

            Node::PickRows { slots, pick, .. } => {
                for (i, &s) in pick.iter().enumerate() {
                    let slot = slots[s as usize];
                    Self::accum(adj, slot, self.shape(slot), |d| {
                        for (x, &y) in d.row_mut(i).iter_mut().zip(d_out.row(i)) {
                            *x += y;
                        }
                    });
                }
            }

            Node::RepeatRow { a, .. } => {
                let n = self.shape(*a).1;
                Self::accum(adj, *a, (1, n), |d| {
                    for r in 0..d_out.rows {
                        for (x, &y) in d.data.iter_mut().zip(d_out.row(r)) {
                            *x += y;
                        }
                    }
                });
            }

            Node::SumAll { a, .. } => {
                let g = d_out.data[0];
                Self::accum(adj, *a, self.shape(*a), |d| {
                    for x in d.data.iter_mut() {
                        *x += g;
                    }
                });
            }

            Node::RowCosine { a, b, out } => {
                let (m, n) = self.shape(*a);
                let bm = self.shape(*b).0;
                let eps = S::from_f64(COSINE_NORM_EPS);
                for i in 0..m {
                    let g = d_out.data[i];
                    let ra = self.bufs[*a].row(i);
                    let rb = self.bufs[*b].row(if bm == 1 { 0 } else { i });
                    let na = norm(ra);
                    let nb = norm(rb);
                    if na < eps || nb < eps {
                        continue; // degenerate row: zero gradient by contract
                    }
                    let cos = self.bufs[*out].data[i];
                    Self::accum(adj, *a, (m, n), |d| {
                        let dr = d.row_mut(i);
                        for j in 0..n {
                            dr[j] += g * (rb[j] / (na * nb) - ra[j] * cos / (na * na));
                        }
                    });
                    let brow = if bm == 1 { 0 } else { i };
                    Self::accum(adj, *b, (bm, n), |d| {
                        let dr = d.row_mut(brow);
                        for j in 0..n {
                            dr[j] += g * (ra[j] / (na * nb) - rb[j] * cos / (nb * nb));
                        }
                    });
                }
            }

            Node::MseSum { a, b, .. } => {
                let (m, n) = self.shape(*a);
                let bm = self.shape(*b).0;
                let g = d_out.data[0];
                let two_over_n = S::from_f64(2.0 / n as f64);
                Self::accum(adj, *a, (m, n), |d| {
                    for i in 0..m {
                        let rb = self.bufs[*b].row(if bm == 1 { 0 } else { i });
                        let ra = self.bufs[*a].row(i);
                        for (j, x) in d.row_mut(i).iter_mut().enumerate() {
                            *x += g * two_over_n * (ra[j] - rb[j]);
                        }
                    }
                });
                Self::accum(adj, *b, (bm, n), |d| {
                    for i in 0..m {
                        let brow = if bm == 1 { 0 } else { i };
                        let ra = self.bufs[*a].row(i);
                        let rb = self.bufs[*b].row(brow);
                        for (j, x) in d.row_mut(brow).iter_mut().enumerate() {
                            *x += -(g * two_over_n * (ra[j] - rb[j]));
                        }
                    }
                });
            }

            Node::Dropout { a, mask, scale, .. } => {
                Self::accum(adj, *a, self.shape(*a), |d| {
                    for ((x, &y), &k) in d.data.iter_mut().zip(&d_out.data).zip(mask) {
                        if k != 0 {
                            *x += y * *scale;
                        }
                    }
                });
            }
        }
    }
}

pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::ZERO {
        S::ONE / (S::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::ONE + e)
    }
}

pub fn softplus<S: Scalar>(x: S) -> S {
    if x > S::ZERO {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn norm<S: Scalar>(v: &[S]) -> S {
    v.iter().map(|&x| x * x).sum::<S>().sqrt()
}

fn cosine_row<S: Scalar>(a: &[S], b: &[S]) -> S {
    let na = norm(a);
    let nb = norm(b);
    let eps = S::from_f64(COSINE_NORM_EPS);
    if na < eps || nb < eps {
        return S::ZERO;
    }
    let dot: S = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    dot / (na * nb)
}
