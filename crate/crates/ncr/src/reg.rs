//! Logical-law regularizers.
//!
//! Each law becomes a penalty of the form mean(1 - Sim(module(x,...), want))
//! over every event vector the batch produced; the negation law uses
//! 1 + Sim(NOT(x), x) because negation should move vectors away from
//! themselves. Associativity and commutativity are handled by operand
//! shuffling, not by penalties.

use crate::error::{NcrError, Result};
use crate::expr::Variant;
use crate::modules::{BoundModel, DropoutCtx};
use crate::tape::{BufId, Tape};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Law {
    NotContrast,      // r1: 1 + Sim(NOT(x), x)
    DoubleNegation,   // r2: 1 - Sim(NOT(NOT(x)), x)
    AndIdentity,      // r3: 1 - Sim(AND(x, T), x)
    AndAnnihilator,   // r4: 1 - Sim(AND(x, F), F)
    AndIdempotence,   // r5: 1 - Sim(AND(x, x), x)
    AndComplement,    // r6: 1 - Sim(AND(x, NOT(x)), F)
    OrIdentity,       // r7: 1 - Sim(OR(x, F), x)
    OrAnnihilator,    // r8: 1 - Sim(OR(x, T), T)
    OrIdempotence,    // r9: 1 - Sim(OR(x, x), x)
    OrComplement,     // r10: 1 - Sim(OR(x, NOT(x)), T)
}

pub const ALL_LAWS: [Law; 10] = [
    Law::NotContrast,
    Law::DoubleNegation,
    Law::AndIdentity,
    Law::AndAnnihilator,
    Law::AndIdempotence,
    Law::AndComplement,
    Law::OrIdentity,
    Law::OrAnnihilator,
    Law::OrIdempotence,
    Law::OrComplement,
];

impl Law {
    pub fn index(self) -> usize {
        ALL_LAWS.iter().position(|&l| l == self).unwrap()
    }

    pub fn label(self) -> &'static str {
        match self {
            Law::NotContrast => "r1_negation",
            Law::DoubleNegation => "r2_double_negation",
            Law::AndIdentity => "r3_and_identity",
            Law::AndAnnihilator => "r4_and_annihilator",
            Law::AndIdempotence => "r5_and_idempotence",
            Law::AndComplement => "r6_and_complement",
            Law::OrIdentity => "r7_or_identity",
            Law::OrAnnihilator => "r8_or_annihilator",
            Law::OrIdempotence => "r9_or_idempotence",
            Law::OrComplement => "r10_or_complement",
        }
    }
}

/// The base variant trains only NOT and OR, so the AND laws stay inactive.
/// The alternative structures use all three modules.
pub fn active_laws(variant: Variant) -> &'static [Law] {
    match variant {
        Variant::Ncr => &[
            Law::NotContrast,
            Law::DoubleNegation,
            Law::OrIdentity,
            Law::OrAnnihilator,
            Law::OrIdempotence,
            Law::OrComplement,
        ],
        Variant::EqModel | Variant::CmpModel => &ALL_LAWS,
    }
}

/// Per-law values plus their sum for one batch.
#[derive(Clone, Debug)]
pub struct RegularizerReport {
    pub values: Vec<(Law, f64)>,
    pub sum: f64,
    pub event_count: usize,
}

impl RegularizerReport {
    pub fn value(&self, law: Law) -> Option<f64> {
        self.values.iter().find(|(l, _)| *l == law).map(|&(_, v)| v)
    }
}

pub struct RegularizerOutput {
    /// differentiable sum of the active law penalties, 1x1
    pub sum: BufId,
    pub report: RegularizerReport,
}

/// Build the active law penalties over the batch's event vectors. The false
/// anchor is recomputed from the current NOT parameters so its gradient
/// reaches the NOT module.
pub fn compute_regularizers<S: Scalar>(
    tape: &mut Tape<'_, S>,
    bound: &BoundModel,
    events: &[BufId],
    laws: &[Law],
    dropout: &mut DropoutCtx,
) -> Result<RegularizerOutput> {
    if events.is_empty() {
        return Err(NcrError::EmptyEventSet);
    }
    let x = tape.concat_rows(events)?;
    let rows = tape.shape(x).0;
    if rows == 0 {
        return Err(NcrError::EmptyEventSet);
    }

    let anchor = bound.anchor_buf();
    let needs_not = laws.iter().any(|l| {
        matches!(l, Law::NotContrast | Law::DoubleNegation | Law::AndComplement | Law::OrComplement)
    });
    let not_x = if needs_not { Some(bound.apply_not(tape, x, dropout)?) } else { None };
    let needs_false = laws.iter().any(|l| {
        matches!(l, Law::AndAnnihilator | Law::AndComplement | Law::OrIdentity)
    });
    let false_anchor = if needs_false { Some(bound.false_anchor(tape)?) } else { None };

    let mut values = Vec::with_capacity(laws.len());
    let mut sum: Option<BufId> = None;
    for &law in laws {
        let penalty = match law {
            Law::NotContrast => {
                let cos = tape.row_cosine(not_x.unwrap(), x)?;
                mean_one_plus(tape, cos, true)
            }
            Law::DoubleNegation => {
                let nn = bound.apply_not(tape, not_x.unwrap(), dropout)?;
                let cos = tape.row_cosine(nn, x)?;
                mean_one_plus(tape, cos, false)
            }
            Law::AndIdentity => {
                let out = bound.apply_and_broadcast(tape, x, anchor, dropout)?;
                let cos = tape.row_cosine(out, x)?;
                mean_one_plus(tape, cos, false)
            }
            Law::AndAnnihilator => {
                let f = false_anchor.unwrap();
                let out = bound.apply_and_broadcast(tape, x, f, dropout)?;
                let cos = tape.row_cosine(out, f)?;
                mean_one_plus(tape, cos, false)
            }
            Law::AndIdempotence => {
                let out = bound.apply_and_self(tape, x, dropout)?;
                let cos = tape.row_cosine(out, x)?;
                mean_one_plus(tape, cos, false)
            }
            Law::AndComplement => {
                let out = bound.apply_and(tape, x, not_x.unwrap(), dropout)?;
                let cos = tape.row_cosine(out, false_anchor.unwrap())?;
                mean_one_plus(tape, cos, false)
            }
            Law::OrIdentity => {
                let f = false_anchor.unwrap();
                let out = bound.apply_or_broadcast(tape, x, f, dropout)?;
                let cos = tape.row_cosine(out, x)?;
                mean_one_plus(tape, cos, false)
            }
            Law::OrAnnihilator => {
                let out = bound.apply_or_broadcast(tape, x, anchor, dropout)?;
                let cos = tape.row_cosine(out, anchor)?;
                mean_one_plus(tape, cos, false)
            }
            Law::OrIdempotence => {
                let out = bound.apply_or_self(tape, x, dropout)?;
                let cos = tape.row_cosine(out, x)?;
                mean_one_plus(tape, cos, false)
            }
            Law::OrComplement => {
                let out = bound.apply_or(tape, x, not_x.unwrap(), dropout)?;
                let cos = tape.row_cosine(out, anchor)?;
                mean_one_plus(tape, cos, false)
            }
        }?;
        values.push((law, tape.value(penalty).data[0].to_f64()));
        sum = Some(match sum {
            None => penalty,
            Some(acc) => tape.add(acc, penalty)?,
        });
    }
    let sum = sum.expect("at least one law");
    let report = RegularizerReport {
        values,
        sum: tape.value(sum).data[0].to_f64(),
        event_count: rows,
    };
    Ok(RegularizerOutput { sum, report })
}

/// mean(1 + cos) when `plus`, else mean(1 - cos); both stay in [0, 2].
fn mean_one_plus<S: Scalar>(tape: &mut Tape<'_, S>, cos: BufId, plus: bool) -> Result<BufId> {
    let mean = tape.mean_all(cos);
    let signed = if plus { mean } else { tape.scale(mean, -S::ONE) };
    let one = tape.constant(crate::tensor::Tensor::scalar(S::ONE));
    tape.add(one, signed)
}
