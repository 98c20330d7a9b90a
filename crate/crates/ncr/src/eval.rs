//! Ranking evaluation: each held-out statement's true target is ranked
//! against 100 items the user never interacted with; NDCG@K and HR@K are
//! averaged over statements. Candidate sets are a pure function of
//! (eval seed, user, target), so every epoch and every model variant sees
//! the same sets.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::batch::{evaluate_statement_batch, BatchShuffle, StatementBatch};
use crate::data::{Dataset, Split, Statement};
use crate::error::{NcrError, Result};
use crate::expr::{EventSink, FeedbackMode, Variant};
use crate::modules::{BoundModel, DropoutCtx, ModelIds};
use crate::params::ParamStore;
use crate::tape::Tape;

pub const DEFAULT_EVAL_NEGATIVES: usize = 100;

/// Closed form for a single relevant item: 1/log2(rank+1) inside the
/// cutoff, 0 outside.
pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    assert!(rank >= 1, "ranks are 1-based");
    if rank <= k {
        1.0 / ((rank as f64) + 1.0).log2()
    } else {
        0.0
    }
}

pub fn hr_at_k(rank: usize, k: usize) -> f64 {
    assert!(rank >= 1, "ranks are 1-based");
    if rank <= k { 1.0 } else { 0.0 }
}

/// N distinct items the user never interacted with, frozen per
/// (seed, user, target). The true target is appended by the caller.
pub fn sample_candidates(
    user: u32,
    user_token: &str,
    target: u32,
    interactions: &[u32],
    item_count: usize,
    n: usize,
    eval_seed: u64,
) -> Result<Vec<u32>> {
    let pool = item_count - interactions.len();
    if pool < n {
        return Err(NcrError::InsufficientPool { user: user_token.to_string(), need: n, have: pool });
    }
    // one stream per (seed, user, target): stable across epochs and variants
    let mix = eval_seed
        ^ (user as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (target as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    let mut rng = ChaCha8Rng::seed_from_u64(mix);
    let mut chosen = Vec::with_capacity(n);
    let mut seen: std::collections::HashSet<u32> = interactions.iter().copied().collect();
    while chosen.len() < n {
        let cand = rng.gen_range(0..item_count as u32);
        if seen.insert(cand) {
            chosen.push(cand);
        }
    }
    Ok(chosen)
}

/// Per-statement ranks plus the metric aggregates.
#[derive(Clone, Debug)]
pub struct RankingReport {
    pub split: Split,
    pub ks: Vec<usize>,
    pub ranks: Vec<usize>,
    pub candidates_per_case: usize,
    /// (K, mean NDCG@K, mean HR@K), one row per requested K
    pub metrics: Vec<(usize, f64, f64)>,
}

impl RankingReport {
    pub fn ndcg(&self, k: usize) -> Option<f64> {
        self.metrics.iter().find(|&&(mk, _, _)| mk == k).map(|&(_, n, _)| n)
    }

    pub fn hr(&self, k: usize) -> Option<f64> {
        self.metrics.iter().find(|&&(mk, _, _)| mk == k).map(|&(_, _, h)| h)
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("split: {}\n", self.split.label()));
        out.push_str(&format!("cases: {}\n", self.ranks.len()));
        out.push_str(&format!("candidates_per_case: {}\n", self.candidates_per_case));
        for &(k, n, h) in &self.metrics {
            out.push_str(&format!("ndcg@{k}: {n:.4}\n"));
            out.push_str(&format!("hr@{k}: {h:.4}\n"));
        }
        out
    }

    /// One CSV row per metric: seed,variant,split,metric,value
    pub fn render_csv(&self, seed: u64, variant: &str) -> String {
        let mut out = String::from("seed,variant,split,metric,value\n");
        for &(k, n, h) in &self.metrics {
            out.push_str(&format!("{seed},{variant},{},ndcg@{k},{n:.6}\n", self.split.label()));
            out.push_str(&format!("{seed},{variant},{},hr@{k},{h:.6}\n", self.split.label()));
        }
        out
    }
}

fn aggregate(ranks: &[usize], ks: &[usize], split: Split, candidates: usize) -> RankingReport {
    let metrics = ks.iter().map(|&k| {
        let n = ranks.iter().map(|&r| ndcg_at_k(r, k)).sum::<f64>() / ranks.len().max(1) as f64;
        let h = ranks.iter().map(|&r| hr_at_k(r, k)).sum::<f64>() / ranks.len().max(1) as f64;
        (k, n, h)
    }).collect();
    RankingReport {
        split,
        ks: ks.to_vec(),
        ranks: ranks.to_vec(),
        candidates_per_case: candidates,
        metrics,
    }
}

/// Rank the target among its candidates for every statement of a split.
/// Scoring shares the history fold across a statement's candidates; dropout
/// and operand shuffling are off. Ties break by ascending item id.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_model(
    store: &ParamStore<f32>,
    ids: &ModelIds,
    variant: Variant,
    mode: FeedbackMode,
    dataset: &Dataset,
    split: Split,
    ks: &[usize],
    eval_negatives: usize,
    eval_seed: u64,
    threads: usize,
) -> Result<RankingReport> {
    let statements: Vec<&Statement> = dataset.statements_for(split).collect();
    if statements.is_empty() {
        return Err(NcrError::Config(format!("split `{}` has no statements", split.label())));
    }
    let mut ranks = vec![0usize; statements.len()];
    let threads = threads.max(1).min(statements.len());

    if threads == 1 {
        for (slot, stmt) in statements.iter().enumerate() {
            ranks[slot] = rank_one(store, ids, variant, mode, dataset, stmt, eval_negatives, eval_seed)?;
        }
    } else {
        // chunked scoped threads against the read-only snapshot; results land
        // in fixed slots so aggregation order never depends on scheduling
        let chunk = statements.len().div_ceil(threads);
        let errors = std::sync::Mutex::new(Vec::<NcrError>::new());
        std::thread::scope(|scope| {
            for (t, (stmts, out)) in statements.chunks(chunk).zip(ranks.chunks_mut(chunk)).enumerate() {
                let errors = &errors;
                let _ = t;
                scope.spawn(move || {
                    for (slot, stmt) in stmts.iter().enumerate() {
                        match rank_one(store, ids, variant, mode, dataset, stmt, eval_negatives, eval_seed) {
                            Ok(r) => out[slot] = r,
                            Err(e) => {
                                errors.lock().unwrap().push(e);
                                return;
                            }
                        }
                    }
                });
            }
        });
        if let Some(e) = errors.into_inner().unwrap().into_iter().next() {
            return Err(e);
        }
    }
    Ok(aggregate(&ranks, ks, split, eval_negatives + 1))
}

fn rank_one(
    store: &ParamStore<f32>,
    ids: &ModelIds,
    variant: Variant,
    mode: FeedbackMode,
    dataset: &Dataset,
    stmt: &Statement,
    eval_negatives: usize,
    eval_seed: u64,
) -> Result<usize> {
    let user_token = &dataset.user_tokens[stmt.user as usize];
    let negatives = sample_candidates(
        stmt.user,
        user_token,
        stmt.target,
        &dataset.interactions[stmt.user as usize],
        dataset.item_count(),
        eval_negatives,
        eval_seed,
    )?;
    let mut candidates = Vec::with_capacity(negatives.len() + 1);
    candidates.push(stmt.target);
    candidates.extend_from_slice(&negatives);

    let rows = candidates.len();
    let batch = StatementBatch {
        users: vec![stmt.user; rows],
        targets: candidates.clone(),
        history: vec![stmt.history.clone(); rows],
    };
    let mut tape = Tape::new(store);
    let bound = BoundModel::bind(&mut tape, ids);
    let shuffle = BatchShuffle::identity(variant, rows, stmt.history.len());
    let mut sink = EventSink::new();
    let out = evaluate_statement_batch(
        &mut tape, &bound, variant, mode, &batch, &shuffle, &mut DropoutCtx::off(), &mut sink,
    )?;
    let scores = &tape.value(out.scores).data;

    let target_score = scores[0];
    let mut rank = 1usize;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > target_score || (s == target_score && candidates[i] < stmt.target) {
            rank += 1;
        }
    }
    Ok(rank)
}

/// Outcome of a two-sided paired Student t-test.
#[derive(Clone, Copy, Debug)]
pub struct PairedTTest {
    pub t: f64,
    pub p: f64,
    /// set when the differences have zero variance; p is then 1 for equal
    /// means and 0 otherwise
    pub degenerate: bool,
}

pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<PairedTTest> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(NcrError::Config(format!(
            "paired t-test needs two equal series of length >= 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        return Ok(PairedTTest {
            t: if mean == 0.0 { 0.0 } else { f64::INFINITY * mean.signum() },
            p: if mean == 0.0 { 1.0 } else { 0.0 },
            degenerate: true,
        });
    }
    let t = mean / (var / n).sqrt();
    let dist = StudentsT::new(0.0, 1.0, n - 1.0)
        .map_err(|e| NcrError::Config(format!("t distribution: {e}")))?;
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok(PairedTTest { t, p, degenerate: false })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ndcg_closed_form() {
        assert_eq!(ndcg_at_k(1, 10), 1.0);
        assert!((ndcg_at_k(3, 10) - 0.5).abs() < 1e-12); // 1/log2(4)
        assert_eq!(ndcg_at_k(11, 10), 0.0);
        assert_eq!(hr_at_k(1, 10), 1.0);
        assert_eq!(hr_at_k(11, 10), 0.0);
        assert_eq!(hr_at_k(10, 10), 1.0);
    }

    #[test]
    fn hr_monotone_in_k() {
        for rank in 1..30 {
            for k in 1..20 {
                assert!(hr_at_k(rank, k + 1) >= hr_at_k(rank, k));
            }
        }
    }

    #[test]
    fn candidates_are_disjoint_from_interactions_and_deterministic() {
        let interactions = vec![3, 7, 11, 42];
        let a = sample_candidates(5, "u5", 99, &interactions, 500, 100, 2021).unwrap();
        let b = sample_candidates(5, "u5", 99, &interactions, 500, 100, 2021).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 100);
        let mut uniq = a.clone();
        uniq.sort_unstable();
        uniq.dedup();
        assert_eq!(uniq.len(), 100);
        for c in &a {
            assert!(!interactions.contains(c));
        }
        let other_seed = sample_candidates(5, "u5", 99, &interactions, 500, 100, 7).unwrap();
        assert_ne!(a, other_seed);
    }

    #[test]
    fn insufficient_pool_is_an_error() {
        let interactions: Vec<u32> = (0..90).collect();
        let err = sample_candidates(0, "u", 99, &interactions, 100, 100, 1).unwrap_err();
        assert!(matches!(err, NcrError::InsufficientPool { .. }));
    }

    #[test]
    fn paired_t_on_identical_series_is_degenerate_p1() {
        let r = paired_t_test(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.p, 1.0);
        assert_eq!(r.t, 0.0);
    }

    #[test]
    fn paired_t_constant_shift_is_degenerate_p0() {
        let r = paired_t_test(&[1.0, 2.0, 3.0], &[0.0, 1.0, 2.0]).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.p, 0.0);
    }

    #[test]
    fn paired_t_matches_reference_values() {
        // frozen from scipy.stats.ttest_rel
        let a = [0.37, 0.38, 0.36];
        let b = [0.35, 0.35, 0.36];
        let r = paired_t_test(&a, &b).unwrap();
        assert!(!r.degenerate);
        assert!((r.t - 1.8898223650461359).abs() < 1e-9, "t = {}", r.t);
        assert!((r.p - 0.19935923097456432).abs() < 1e-7, "p = {}", r.p);

        let a = [0.4240, 0.4251, 0.4233, 0.4247, 0.4239];
        let b = [0.4144, 0.4150, 0.4139, 0.4160, 0.4141];
        let r = paired_t_test(&a, &b).unwrap();
        assert!((r.t - 40.446604280632364).abs() < 1e-6, "t = {}", r.t);
        assert!((r.p - 2.2328278335311516e-06).abs() < 1e-10, "p = {}", r.p);
    }

    #[test]
    fn t_test_rejects_short_series() {
        assert!(paired_t_test(&[1.0], &[2.0]).is_err());
        assert!(paired_t_test(&[1.0, 2.0], &[2.0]).is_err());
    }
}
