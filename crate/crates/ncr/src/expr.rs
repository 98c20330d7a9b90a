//! Compiles a user's interaction history plus a candidate item into a logical
//! expression, and evaluates that expression through the neural modules.
//!
//! Three structural variants share one AST:
//!   base:        (!e1 v !e2 v ... v !er) v ex
//!   equivalent:  !(e1 ^ ... ^ er) v ex
//!   comparative: !ex v (e1 ^ ... ^ er)
//! With explicit feedback, disliked history events keep their double
//! negation (!!e) in the base variant and a single negation inside the
//! conjunctive variants.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::error::{NcrError, Result};
use crate::modules::{BoundModel, DropoutCtx};
use crate::tape::{BufId, Tape};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Sign {
    Positive,
    Negative,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Ncr,
    EqModel,
    CmpModel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeedbackMode {
    Implicit,
    Explicit,
}

impl Variant {
    pub fn parse(s: &str) -> Result<(Variant, FeedbackMode)> {
        match s {
            "ncr-i" => Ok((Variant::Ncr, FeedbackMode::Implicit)),
            "ncr-e" => Ok((Variant::Ncr, FeedbackMode::Explicit)),
            "eq" => Ok((Variant::EqModel, FeedbackMode::Explicit)),
            "cmp" => Ok((Variant::CmpModel, FeedbackMode::Explicit)),
            other => Err(NcrError::UnknownVariant(other.to_string())),
        }
    }

    pub fn code(self, mode: FeedbackMode) -> &'static str {
        match (self, mode) {
            (Variant::Ncr, FeedbackMode::Implicit) => "ncr-i",
            (Variant::Ncr, FeedbackMode::Explicit) => "ncr-e",
            (Variant::EqModel, _) => "eq",
            (Variant::CmpModel, _) => "cmp",
        }
    }
}

/// One statement's expression. Commutative operands stay as flat groups
/// until evaluation folds them pairwise in list order.
#[derive(Clone, Debug, PartialEq)]
pub enum LogicExpr {
    Literal { item: u32, target: bool },
    Not(Box<LogicExpr>),
    OrGroup(Vec<LogicExpr>),
    AndGroup(Vec<LogicExpr>),
}

impl LogicExpr {
    pub fn contains_target(&self) -> bool {
        match self {
            LogicExpr::Literal { target, .. } => *target,
            LogicExpr::Not(c) => c.contains_target(),
            LogicExpr::OrGroup(v) | LogicExpr::AndGroup(v) => v.iter().any(|e| e.contains_target()),
        }
    }

    pub fn leaf_count(&self) -> usize {
        match self {
            LogicExpr::Literal { .. } => 1,
            LogicExpr::Not(c) => c.leaf_count(),
            LogicExpr::OrGroup(v) | LogicExpr::AndGroup(v) => v.iter().map(|e| e.leaf_count()).sum(),
        }
    }

    pub fn leaf_items(&self) -> Vec<u32> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves(&self, out: &mut Vec<u32>) {
        match self {
            LogicExpr::Literal { item, .. } => out.push(*item),
            LogicExpr::Not(c) => c.collect_leaves(out),
            LogicExpr::OrGroup(v) | LogicExpr::AndGroup(v) => {
                for e in v {
                    e.collect_leaves(out);
                }
            }
        }
    }

    fn uses_and(&self) -> bool {
        match self {
            LogicExpr::Literal { .. } => false,
            LogicExpr::Not(c) => c.uses_and(),
            // a group of one is passed through, no module applied
            LogicExpr::AndGroup(v) => v.len() > 1 || v.iter().any(|e| e.uses_and()),
            LogicExpr::OrGroup(v) => v.iter().any(|e| e.uses_and()),
        }
    }

    /// Render as a logic string, e.g. `(¬e[u,12] ∨ ¬¬e[u,40] ∨ e[u,7])`.
    pub fn render(&self, user: &str) -> String {
        match self {
            LogicExpr::Literal { item, .. } => format!("e[{user},{item}]"),
            LogicExpr::Not(c) => format!("¬{}", c.render(user)),
            LogicExpr::OrGroup(v) => render_group(v, user, " ∨ "),
            LogicExpr::AndGroup(v) => render_group(v, user, " ∧ "),
        }
    }
}

fn render_group(v: &[LogicExpr], user: &str, sep: &str) -> String {
    if v.len() == 1 {
        return v[0].render(user);
    }
    let inner: Vec<String> = v.iter().map(|e| e.render(user)).collect();
    format!("({})", inner.join(sep))
}

fn signed_literal(item: u32, sign: Sign, mode: FeedbackMode) -> LogicExpr {
    let lit = LogicExpr::Literal { item, target: false };
    match (mode, sign) {
        (FeedbackMode::Implicit, _) | (_, Sign::Positive) => lit,
        (FeedbackMode::Explicit, Sign::Negative) => LogicExpr::Not(Box::new(lit)),
    }
}

/// Compile one statement. History is (item, feedback sign) pairs; in
/// implicit mode the signs are ignored.
pub fn build_expression(
    history: &[(u32, Sign)],
    target: u32,
    variant: Variant,
    mode: FeedbackMode,
) -> Result<LogicExpr> {
    if history.is_empty() {
        return Err(NcrError::EmptyHistory);
    }
    if history.iter().any(|&(item, _)| item == target) {
        return Err(NcrError::DuplicateTarget(target.to_string()));
    }
    let target_lit = LogicExpr::Literal { item: target, target: true };
    let expr = match variant {
        Variant::Ncr => {
            // every premise is negated; disliked events keep the double negation
            let mut operands: Vec<LogicExpr> = history
                .iter()
                .map(|&(item, sign)| LogicExpr::Not(Box::new(signed_literal(item, sign, mode))))
                .collect();
            operands.push(target_lit);
            LogicExpr::OrGroup(operands)
        }
        Variant::EqModel => {
            let conj: Vec<LogicExpr> = history
                .iter()
                .map(|&(item, sign)| signed_literal(item, sign, mode))
                .collect();
            LogicExpr::OrGroup(vec![
                LogicExpr::Not(Box::new(LogicExpr::AndGroup(conj))),
                target_lit,
            ])
        }
        Variant::CmpModel => {
            let conj: Vec<LogicExpr> = history
                .iter()
                .map(|&(item, sign)| signed_literal(item, sign, mode))
                .collect();
            LogicExpr::OrGroup(vec![
                LogicExpr::Not(Box::new(target_lit)),
                LogicExpr::AndGroup(conj),
            ])
        }
    };
    debug_assert_eq!(expr.leaf_count(), history.len() + 1);
    debug_assert!(variant != Variant::Ncr || !expr.uses_and());
    Ok(expr)
}

/// Permute every commutative operand group in place, independently and
/// uniformly. When `include_target` is false the operand containing the
/// target keeps its position and only the rest move.
pub fn shuffle_operands(expr: &mut LogicExpr, rng: &mut ChaCha8Rng, include_target: bool) {
    match expr {
        LogicExpr::Literal { .. } => {}
        LogicExpr::Not(c) => shuffle_operands(c, rng, include_target),
        LogicExpr::OrGroup(v) | LogicExpr::AndGroup(v) => {
            if include_target {
                v.shuffle(rng);
            } else {
                let movable: Vec<usize> = (0..v.len()).filter(|&i| !v[i].contains_target()).collect();
                let mut order = movable.clone();
                order.shuffle(rng);
                let moved: Vec<LogicExpr> = order.iter().map(|&i| v[i].clone()).collect();
                for (slot, e) in movable.into_iter().zip(moved) {
                    v[slot] = e;
                }
            }
            for e in v.iter_mut() {
                shuffle_operands(e, rng, include_target);
            }
        }
    }
}

/// Every event vector produced while evaluating a batch: encoder outputs,
/// every module output including intermediate fold steps, and final
/// expression vectors. Buffers may hold many rows; the row total is the
/// event count the regularizers average over.
#[derive(Default)]
pub struct EventSink {
    pub bufs: Vec<BufId>,
}

impl EventSink {
    pub fn new() -> Self {
        EventSink { bufs: Vec::new() }
    }

    pub fn push(&mut self, id: BufId) {
        self.bufs.push(id);
    }

    pub fn event_rows<S: Scalar>(&self, tape: &Tape<'_, S>) -> usize {
        self.bufs.iter().map(|&b| tape.shape(b).0).sum()
    }
}

/// Evaluate one expression through the modules, recording every produced
/// vector into the sink. Returns the final expression vector (1 x n).
pub fn evaluate_expression<S: Scalar>(
    tape: &mut Tape<'_, S>,
    bound: &BoundModel,
    user: u32,
    expr: &LogicExpr,
    dropout: &mut DropoutCtx,
    sink: &mut EventSink,
) -> Result<BufId> {
    match expr {
        LogicExpr::Literal { item, .. } => {
            let e = bound.encode_events(tape, &[user], &[*item], dropout)?;
            sink.push(e);
            Ok(e)
        }
        LogicExpr::Not(c) => {
            let inner = evaluate_expression(tape, bound, user, c, dropout, sink)?;
            let out = bound.apply_not(tape, inner, dropout)?;
            sink.push(out);
            Ok(out)
        }
        LogicExpr::OrGroup(v) | LogicExpr::AndGroup(v) => {
            let is_or = matches!(expr, LogicExpr::OrGroup(_));
            let mut acc = evaluate_expression(tape, bound, user, &v[0], dropout, sink)?;
            for operand in &v[1..] {
                let rhs = evaluate_expression(tape, bound, user, operand, dropout, sink)?;
                acc = if is_or {
                    bound.apply_or(tape, acc, rhs, dropout)?
                } else {
                    bound.apply_and(tape, acc, rhs, dropout)?
                };
                sink.push(acc);
            }
            Ok(acc)
        }
    }
}

/// Truth score of one statement: cosine of its final vector to the anchor.
pub fn score_statement<S: Scalar>(
    tape: &mut Tape<'_, S>,
    bound: &BoundModel,
    user: u32,
    expr: &LogicExpr,
    dropout: &mut DropoutCtx,
    sink: &mut EventSink,
) -> Result<BufId> {
    let exp = evaluate_expression(tape, bound, user, expr, dropout, sink)?;
    bound.truth_similarity(tape, exp)
}
