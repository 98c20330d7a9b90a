//! Batched expression evaluation.
//!
//! Statements that share a history length share one graph shape, so a whole
//! mini-batch evaluates as matrix ops. Feedback signs vary per row and are
//! handled by per-row slot picks; operand shuffles are per-row permutations
//! applied the same way. Equivalence with the per-expression recursive
//! evaluator is covered by tests.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::error::{NcrError, Result};
use crate::expr::{EventSink, FeedbackMode, Sign, Variant};
use crate::modules::{BoundModel, DropoutCtx};
use crate::tape::{BufId, Tape};
use crate::tensor::Scalar;

/// A group of same-length statements evaluated as one graph.
#[derive(Clone, Debug)]
pub struct StatementBatch {
    pub users: Vec<u32>,
    pub targets: Vec<u32>,
    /// history items, one row per statement, all rows the same length,
    /// most recent first
    pub history: Vec<Vec<(u32, Sign)>>,
}

impl StatementBatch {
    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    pub fn history_len(&self) -> usize {
        self.history.first().map_or(0, |h| h.len())
    }

    fn validate(&self) -> Result<()> {
        let l = self.history_len();
        if l == 0 {
            return Err(NcrError::EmptyHistory);
        }
        if self.users.len() != self.targets.len() || self.users.len() != self.history.len() {
            return Err(NcrError::ShapeMismatch {
                primitive: "statement_batch",
                details: "users/targets/history lengths differ".into(),
            });
        }
        for (h, &t) in self.history.iter().zip(&self.targets) {
            if h.len() != l {
                return Err(NcrError::ShapeMismatch {
                    primitive: "statement_batch",
                    details: format!("history lengths differ: {} vs {l}", h.len()),
                });
            }
            if h.iter().any(|&(item, _)| item == t) {
                return Err(NcrError::DuplicateTarget(t.to_string()));
            }
        }
        Ok(())
    }
}

/// Per-row operand orders for one batch. `outer` permutes the top-level
/// disjunction, `inner` the conjunction inside the eq/cmp variants.
#[derive(Clone, Debug)]
pub struct BatchShuffle {
    pub outer: Vec<Vec<u32>>,
    pub inner: Vec<Vec<u32>>,
}

impl BatchShuffle {
    /// Identity orders: evaluation-time behavior.
    pub fn identity(variant: Variant, rows: usize, history_len: usize) -> BatchShuffle {
        let (outer_len, inner_len) = group_sizes(variant, history_len);
        BatchShuffle {
            outer: vec![(0..outer_len as u32).collect(); rows],
            inner: vec![(0..inner_len as u32).collect(); rows],
        }
    }

    /// Fresh uniform per-row permutations for one training iteration.
    pub fn sample(
        variant: Variant,
        rows: usize,
        history_len: usize,
        include_target: bool,
        rng: &mut ChaCha8Rng,
    ) -> BatchShuffle {
        let (outer_len, inner_len) = group_sizes(variant, history_len);
        let target_slot = target_slot(variant);
        let mut outer = Vec::with_capacity(rows);
        let mut inner = Vec::with_capacity(rows);
        for _ in 0..rows {
            let mut o: Vec<u32> = (0..outer_len as u32).collect();
            if include_target {
                o.shuffle(rng);
            } else if let Some(fixed) = target_slot {
                let mut movable: Vec<u32> = o.iter().copied().filter(|&s| s != fixed as u32).collect();
                movable.shuffle(rng);
                let mut it = movable.into_iter();
                for (pos, slot) in o.iter_mut().enumerate() {
                    if pos != fixed {
                        *slot = it.next().unwrap();
                    } else {
                        *slot = fixed as u32;
                    }
                }
            }
            outer.push(o);
            let mut i: Vec<u32> = (0..inner_len as u32).collect();
            i.shuffle(rng);
            inner.push(i);
        }
        BatchShuffle { outer, inner }
    }
}

/// (outer group size, inner group size) for one variant.
fn group_sizes(variant: Variant, history_len: usize) -> (usize, usize) {
    match variant {
        Variant::Ncr => (history_len + 1, 0),
        Variant::EqModel | Variant::CmpModel => (2, history_len),
    }
}

/// Index of the operand containing the target inside the outer group, in
/// pre-shuffle order. The base variant lists it last, the comparative
/// variant negates it first.
fn target_slot(variant: Variant) -> Option<usize> {
    match variant {
        Variant::Ncr => None, // handled as slot outer_len-1 by construction
        Variant::EqModel => Some(1),
        Variant::CmpModel => Some(0),
    }
}

pub struct BatchOutput {
    /// truth score per statement, Bx1
    pub scores: BufId,
    /// final expression vectors, Bxn
    pub final_exp: BufId,
    /// encoder outputs for the target literals, Bxn (the boolean-variant
    /// event loss needs them)
    pub target_events: BufId,
    /// encoder outputs per history slot, Bxn each
    pub history_events: Vec<BufId>,
}

/// Evaluate a batch of same-shape statements. Every produced event vector is
/// recorded into `sink` exactly as the per-expression evaluator would.
pub fn evaluate_statement_batch<S: Scalar>(
    tape: &mut Tape<'_, S>,
    bound: &BoundModel,
    variant: Variant,
    mode: FeedbackMode,
    batch: &StatementBatch,
    shuffle: &BatchShuffle,
    dropout: &mut DropoutCtx,
    sink: &mut EventSink,
) -> Result<BatchOutput> {
    batch.validate()?;
    let hist_len = batch.history_len();

    // encode all history slots and the targets
    let mut slot_events = Vec::with_capacity(hist_len);
    for j in 0..hist_len {
        let items: Vec<u32> = batch.history.iter().map(|h| h[j].0).collect();
        let e = bound.encode_events(tape, &batch.users, &items, dropout)?;
        sink.push(e);
        slot_events.push(e);
    }
    let target_events = bound.encode_events(tape, &batch.users, &batch.targets, dropout)?;
    sink.push(target_events);

    // rows whose event at slot j carries negative feedback (explicit mode)
    let neg_rows = |batch: &StatementBatch, j: usize| -> Vec<u32> {
        if mode == FeedbackMode::Implicit {
            return Vec::new();
        }
        batch.history.iter().enumerate()
            .filter(|(_, h)| h[j].1 == Sign::Negative)
            .map(|(i, _)| i as u32)
            .collect()
    };

    let final_exp = match variant {
        Variant::Ncr => {
            // operand_j = !e for liked events, !!e for disliked ones
            let mut operands = Vec::with_capacity(hist_len + 1);
            for (j, &e) in slot_events.iter().enumerate() {
                let n1 = bound.apply_not(tape, e, dropout)?;
                sink.push(n1);
                let negs = neg_rows(batch, j);
                if negs.is_empty() {
                    operands.push(n1);
                } else {
                    let n2 = bound.apply_not(tape, n1, dropout)?;
                    // only the double-negated rows are real expression nodes
                    let n2_events = tape.select_rows(n2, &negs)?;
                    sink.push(n2_events);
                    let pick: Vec<u32> = batch.history.iter()
                        .map(|h| u8::from(h[j].1 == Sign::Negative) as u32)
                        .collect();
                    operands.push(tape.pick_rows(&[n1, n2], &pick)?);
                }
            }
            operands.push(target_events);
            fold_group(tape, bound, GroupKind::Or, &operands, &shuffle.outer, dropout, sink)?
        }
        Variant::EqModel => {
            let conj = conjunction(tape, bound, mode, batch, &slot_events, &shuffle.inner, dropout, sink, neg_rows)?;
            let not_conj = bound.apply_not(tape, conj, dropout)?;
            sink.push(not_conj);
            fold_group(tape, bound, GroupKind::Or, &[not_conj, target_events], &shuffle.outer, dropout, sink)?
        }
        Variant::CmpModel => {
            let not_target = bound.apply_not(tape, target_events, dropout)?;
            sink.push(not_target);
            let conj = conjunction(tape, bound, mode, batch, &slot_events, &shuffle.inner, dropout, sink, neg_rows)?;
            fold_group(tape, bound, GroupKind::Or, &[not_target, conj], &shuffle.outer, dropout, sink)?
        }
    };

    let scores = bound.truth_similarity(tape, final_exp)?;
    Ok(BatchOutput { scores, final_exp, target_events, history_events: slot_events })
}

#[derive(Clone, Copy, PartialEq)]
enum GroupKind {
    Or,
    And,
}

/// Signed conjunction operands for the eq/cmp variants, folded with AND.
#[allow(clippy::too_many_arguments)]
fn conjunction<S: Scalar>(
    tape: &mut Tape<'_, S>,
    bound: &BoundModel,
    mode: FeedbackMode,
    batch: &StatementBatch,
    slot_events: &[BufId],
    inner_orders: &[Vec<u32>],
    dropout: &mut DropoutCtx,
    sink: &mut EventSink,
    neg_rows: impl Fn(&StatementBatch, usize) -> Vec<u32>,
) -> Result<BufId> {
    let _ = mode;
    let mut operands = Vec::with_capacity(slot_events.len());
    for (j, &e) in slot_events.iter().enumerate() {
        let negs = neg_rows(batch, j);
        if negs.is_empty() {
            operands.push(e);
        } else {
            let n1 = bound.apply_not(tape, e, dropout)?;
            let n1_events = tape.select_rows(n1, &negs)?;
            sink.push(n1_events);
            let pick: Vec<u32> = batch.history.iter()
                .map(|h| u8::from(h[j].1 == Sign::Negative) as u32)
                .collect();
            operands.push(tape.pick_rows(&[e, n1], &pick)?);
        }
    }
    fold_group(tape, bound, GroupKind::And, &operands, inner_orders, dropout, sink)
}

/// Fold a commutative operand group pairwise in per-row order. A group of
/// one passes through without applying any module.
fn fold_group<S: Scalar>(
    tape: &mut Tape<'_, S>,
    bound: &BoundModel,
    kind: GroupKind,
    slots: &[BufId],
    orders: &[Vec<u32>],
    dropout: &mut DropoutCtx,
    sink: &mut EventSink,
) -> Result<BufId> {
    if slots.len() == 1 {
        return Ok(slots[0]);
    }
    let steps = slots.len();
    let pick_at = |orders: &[Vec<u32>], k: usize| -> Vec<u32> {
        orders.iter().map(|o| o[k]).collect()
    };
    let mut acc = tape.pick_rows(slots, &pick_at(orders, 0))?;
    for k in 1..steps {
        let rhs = tape.pick_rows(slots, &pick_at(orders, k))?;
        acc = match kind {
            GroupKind::Or => bound.apply_or(tape, acc, rhs, dropout)?,
            GroupKind::And => bound.apply_and(tape, acc, rhs, dropout)?,
        };
        sink.push(acc);
    }
    Ok(acc)
}
