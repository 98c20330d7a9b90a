//! Training: pairwise ranking loss over sampled negatives, logical-law
//! regularization, the optional boolean event loss, structure-homogeneous
//! mini-batches, per-iteration operand shuffles, and early stopping on
//! validation NDCG@5.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adam::AdamState;
use crate::batch::{evaluate_statement_batch, BatchShuffle, StatementBatch};
use crate::checkpoint::Checkpoint;
use crate::data::{Dataset, Split};
use crate::error::{NcrError, Result};
use crate::eval::evaluate_model;
use crate::expr::{EventSink, FeedbackMode, Sign, Variant};
use crate::modules::{BoundModel, DropoutCtx, ModelIds, DEFAULT_DIM};
use crate::params::ParamStore;
use crate::reg::{active_laws, compute_regularizers, Law, RegularizerReport};
use crate::tape::{BufId, Tape};
use crate::tensor::Scalar;

/// Candidate sampling is deliberately decoupled from the training seed so
/// one evaluation set serves every variant in a comparison.
pub const DEFAULT_EVAL_SEED: u64 = 20212021;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub variant: Variant,
    pub mode: FeedbackMode,
    pub dim: usize,
    pub alpha: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub lambda_theta: f64,
    pub lambda_r: f64,
    pub lambda_e: f64,
    pub dropout: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub negatives: usize,
    pub seed: u64,
    pub eval_seed: u64,
    pub eval_negatives: usize,
    pub shuffle_target: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Ncr,
            mode: FeedbackMode::Explicit,
            dim: DEFAULT_DIM,
            alpha: 10.0,
            lr: 0.001,
            batch_size: 128,
            lambda_theta: 1e-4,
            lambda_r: 0.1,
            lambda_e: 0.0,
            dropout: 0.2,
            max_epochs: 100,
            patience: 10,
            negatives: 1,
            seed: 2021,
            eval_seed: DEFAULT_EVAL_SEED,
            eval_negatives: crate::eval::DEFAULT_EVAL_NEGATIVES,
            shuffle_target: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("alpha", self.alpha),
            ("lr", self.lr),
            ("lambda-theta", self.lambda_theta),
            ("lambda-r", self.lambda_r),
            ("lambda-e", self.lambda_e),
            ("dropout", self.dropout),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) {
                return Err(NcrError::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.dropout >= 1.0 {
            return Err(NcrError::Config(format!("dropout must be < 1, got {}", self.dropout)));
        }
        if self.batch_size == 0 || self.dim == 0 || self.negatives == 0 {
            return Err(NcrError::Config("batch-size, embed-dim and negatives must be >= 1".into()));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("variant".into(), self.variant.code(self.mode).into()),
            ("dim".into(), self.dim.to_string()),
            ("alpha".into(), format!("{:?}", self.alpha)),
            ("lr".into(), format!("{:?}", self.lr)),
            ("batch_size".into(), self.batch_size.to_string()),
            ("lambda_theta".into(), format!("{:?}", self.lambda_theta)),
            ("lambda_r".into(), format!("{:?}", self.lambda_r)),
            ("lambda_e".into(), format!("{:?}", self.lambda_e)),
            ("dropout".into(), format!("{:?}", self.dropout)),
            ("max_epochs".into(), self.max_epochs.to_string()),
            ("patience".into(), self.patience.to_string()),
            ("negatives".into(), self.negatives.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("eval_seed".into(), self.eval_seed.to_string()),
            ("eval_negatives".into(), self.eval_negatives.to_string()),
            ("shuffle_target".into(), self.shuffle_target.to_string()),
        ]
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        for (k, v) in pairs {
            let bad = |what: &str| NcrError::Config(format!("bad {what} `{v}`"));
            match k.as_str() {
                "variant" => {
                    let (variant, mode) = Variant::parse(v)?;
                    cfg.variant = variant;
                    cfg.mode = mode;
                }
                "dim" => cfg.dim = v.parse().map_err(|_| bad("dim"))?,
                "alpha" => cfg.alpha = v.parse().map_err(|_| bad("alpha"))?,
                "lr" => cfg.lr = v.parse().map_err(|_| bad("lr"))?,
                "batch_size" => cfg.batch_size = v.parse().map_err(|_| bad("batch_size"))?,
                "lambda_theta" => cfg.lambda_theta = v.parse().map_err(|_| bad("lambda_theta"))?,
                "lambda_r" => cfg.lambda_r = v.parse().map_err(|_| bad("lambda_r"))?,
                "lambda_e" => cfg.lambda_e = v.parse().map_err(|_| bad("lambda_e"))?,
                "dropout" => cfg.dropout = v.parse().map_err(|_| bad("dropout"))?,
                "max_epochs" => cfg.max_epochs = v.parse().map_err(|_| bad("max_epochs"))?,
                "patience" => cfg.patience = v.parse().map_err(|_| bad("patience"))?,
                "negatives" => cfg.negatives = v.parse().map_err(|_| bad("negatives"))?,
                "seed" => cfg.seed = v.parse().map_err(|_| bad("seed"))?,
                "eval_seed" => cfg.eval_seed = v.parse().map_err(|_| bad("eval_seed"))?,
                "eval_negatives" => cfg.eval_negatives = v.parse().map_err(|_| bad("eval_negatives"))?,
                "shuffle_target" => cfg.shuffle_target = v.parse().map_err(|_| bad("shuffle_target"))?,
                other => return Err(NcrError::Config(format!("unknown config key `{other}`"))),
            }
        }
        Ok(cfg)
    }
}

/// Uniform draw from the items the user never interacted with.
/// `interactions` must be sorted ascending.
pub fn sample_negative(
    interactions: &[u32],
    item_count: usize,
    user_token: &str,
    rng: &mut ChaCha8Rng,
) -> Result<u32> {
    if interactions.len() >= item_count {
        return Err(NcrError::ExhaustedUniverse { user: user_token.to_string() });
    }
    loop {
        let cand = rng.gen_range(0..item_count as u32);
        if interactions.binary_search(&cand).is_err() {
            return Ok(cand);
        }
    }
}

/// Sum over pairs of -ln sigma(alpha * (s_pos - s_neg)), computed through
/// the softplus for stability. Inputs are Bx1 score columns.
pub fn pairwise_loss<S: Scalar>(
    tape: &mut Tape<'_, S>,
    s_pos: BufId,
    s_neg: BufId,
    alpha: f64,
) -> Result<BufId> {
    let diff = tape.sub(s_pos, s_neg)?;
    let neg_scaled = tape.scale(diff, S::from_f64(-alpha));
    let per_pair = tape.softplus(neg_scaled);
    Ok(tape.sum_all(per_pair))
}

/// Event-grounding loss for the boolean variant: each observed event vector
/// is pulled to the truth anchor (liked) or the false anchor (disliked) by
/// per-row mean squared error, summed over events.
pub fn boolean_event_loss<S: Scalar>(
    tape: &mut Tape<'_, S>,
    bound: &BoundModel,
    events: &[(BufId, Vec<Sign>)],
) -> Result<BufId> {
    let false_anchor = bound.false_anchor(tape)?;
    let anchor = bound.anchor_buf();
    let mut total: Option<BufId> = None;
    for (buf, signs) in events {
        let pos_rows: Vec<u32> = signs.iter().enumerate()
            .filter(|&(_, &s)| s == Sign::Positive)
            .map(|(i, _)| i as u32)
            .collect();
        let neg_rows: Vec<u32> = signs.iter().enumerate()
            .filter(|&(_, &s)| s == Sign::Negative)
            .map(|(i, _)| i as u32)
            .collect();
        for (rows, target) in [(pos_rows, anchor), (neg_rows, false_anchor)] {
            if rows.is_empty() {
                continue;
            }
            let picked = tape.select_rows(*buf, &rows)?;
            let mse = tape.mse_sum(picked, target)?;
            total = Some(match total {
                None => mse,
                Some(acc) => tape.add(acc, mse)?,
            });
        }
    }
    Ok(match total {
        Some(t) => t,
        None => tape.constant(crate::tensor::Tensor::scalar(S::ZERO)),
    })
}

/// One epoch row of the training log.
#[derive(Clone, Debug)]
pub struct EpochLog {
    pub epoch: usize,
    pub ncr_loss: f64,
    pub reg_values: Vec<(Law, f64)>,
    pub event_loss: f64,
    pub valid_ndcg5: f64,
    pub valid_hr5: f64,
    pub seconds: f64,
}

impl EpochLog {
    pub fn csv_header() -> String {
        let law_cols: Vec<&str> = crate::reg::ALL_LAWS.iter().map(|l| l.label()).collect();
        format!("epoch,ncr_loss,{},event_loss,valid_ndcg5,valid_hr5,seconds", law_cols.join(","))
    }

    pub fn csv_row(&self) -> String {
        let mut law_cells = vec![String::new(); crate::reg::ALL_LAWS.len()];
        for &(law, v) in &self.reg_values {
            law_cells[law.index()] = format!("{v:.6}");
        }
        format!(
            "{},{:.6},{},{:.6},{:.6},{:.6},{:.1}",
            self.epoch,
            self.ncr_loss,
            law_cells.join(","),
            self.event_loss,
            self.valid_ndcg5,
            self.valid_hr5,
            self.seconds
        )
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    pub epochs_run: usize,
    /// law values over fixed probe batches before any update
    pub initial_reg: Option<RegularizerReport>,
    /// same probe batches under the best parameters
    pub final_reg: Option<RegularizerReport>,
    /// set when training stopped on a non-finite loss; the checkpoint holds
    /// the last good parameters
    pub aborted: Option<String>,
}

struct TrainBatch {
    batch: StatementBatch,
    /// statement indices backing each row (negatives repeat them)
    rows: Vec<usize>,
}

/// Group same-shape statements (history length, disliked-count multiset key)
/// into batches of at most `batch_size`, in the order of `order`.
fn group_batches(dataset: &Dataset, order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for &idx in order {
        let s = &dataset.statements[idx];
        let negs = s.history.iter().filter(|&&(_, sign)| sign == Sign::Negative).count();
        groups.entry((s.history.len(), negs)).or_default().push(idx);
    }
    let mut batches = Vec::new();
    for (_, members) in groups {
        for chunk in members.chunks(batch_size) {
            batches.push(chunk.to_vec());
        }
    }
    batches
}

fn to_statement_batch(dataset: &Dataset, members: &[usize]) -> TrainBatch {
    let mut users = Vec::with_capacity(members.len());
    let mut targets = Vec::with_capacity(members.len());
    let mut history = Vec::with_capacity(members.len());
    for &idx in members {
        let s = &dataset.statements[idx];
        users.push(s.user);
        targets.push(s.target);
        history.push(s.history.clone());
    }
    TrainBatch {
        batch: StatementBatch { users, targets, history },
        rows: members.to_vec(),
    }
}

/// Deterministic derived stream: one RNG per (seed, purpose, epoch).
fn stream(seed: u64, purpose: u64, epoch: u64) -> ChaCha8Rng {
    let mut x = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(purpose.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(epoch.wrapping_mul(0x94D0_49BB_1331_11EB));
    x ^= x >> 31;
    ChaCha8Rng::seed_from_u64(x)
}

struct LossBreakdown {
    total: BufId,
    ncr: f64,
    reg: Vec<(Law, f64)>,
    event: f64,
}

/// Assemble the full loss for one batch on one tape.
#[allow(clippy::too_many_arguments)]
fn build_batch_loss(
    tape: &mut Tape<'_, f32>,
    ids: &ModelIds,
    config: &TrainConfig,
    dataset: &Dataset,
    tb: &TrainBatch,
    neg_rng: &mut ChaCha8Rng,
    shuffle_rng: &mut ChaCha8Rng,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<LossBreakdown> {
    let bound = BoundModel::bind(tape, ids);
    let rows = tb.batch.len();
    let hist_len = tb.batch.history_len();
    let mut dropout_rng = dropout_rng;
    let mut sink = EventSink::new();

    // positive expressions
    let pos_shuffle = BatchShuffle::sample(config.variant, rows, hist_len, config.shuffle_target, shuffle_rng);
    let pos_out = {
        let mut ctx = match dropout_rng.as_deref_mut() {
            Some(rng) => DropoutCtx::new(config.dropout, rng),
            None => DropoutCtx::off(),
        };
        evaluate_statement_batch(
            tape, &bound, config.variant, config.mode, &tb.batch, &pos_shuffle, &mut ctx, &mut sink,
        )?
    };

    // negative expressions share user and history, swap the target
    let mut neg_users = Vec::with_capacity(rows * config.negatives);
    let mut neg_targets = Vec::with_capacity(rows * config.negatives);
    let mut neg_history = Vec::with_capacity(rows * config.negatives);
    let mut pos_row_of_neg = Vec::with_capacity(rows * config.negatives);
    for (row, &stmt_idx) in tb.rows.iter().enumerate() {
        let s = &dataset.statements[stmt_idx];
        let token = &dataset.user_tokens[s.user as usize];
        for _ in 0..config.negatives {
            let neg = sample_negative(
                &dataset.interactions[s.user as usize],
                dataset.item_count(),
                token,
                neg_rng,
            )?;
            neg_users.push(s.user);
            neg_targets.push(neg);
            neg_history.push(s.history.clone());
            pos_row_of_neg.push(row as u32);
        }
    }
    let neg_batch = StatementBatch { users: neg_users, targets: neg_targets, history: neg_history };
    let neg_shuffle = BatchShuffle::sample(
        config.variant, neg_batch.len(), hist_len, config.shuffle_target, shuffle_rng,
    );
    let neg_out = {
        let mut ctx = match dropout_rng.as_deref_mut() {
            Some(rng) => DropoutCtx::new(config.dropout, rng),
            None => DropoutCtx::off(),
        };
        evaluate_statement_batch(
            tape, &bound, config.variant, config.mode, &neg_batch, &neg_shuffle, &mut ctx, &mut sink,
        )?
    };

    // ranking loss over aligned (positive, negative) score pairs
    let pos_scores = if config.negatives == 1 {
        pos_out.scores
    } else {
        tape.select_rows(pos_out.scores, &pos_row_of_neg)?
    };
    let main = pairwise_loss(tape, pos_scores, neg_out.scores, config.alpha)?;

    // l2 over the parameters this batch actually touches
    let l2 = touched_l2(tape, &bound, ids, &tb.batch, &neg_batch)?;
    let l2_scaled = tape.scale(l2, config.lambda_theta as f32);
    let mut total = tape.add(main, l2_scaled)?;
    let ncr_value = tape.value(total).data[0] as f64;

    // logical-law regularizers over every event vector of the batch; the
    // law probes are identity checks, not part of the predictive network,
    // so they always run clean of dropout noise
    let mut reg_values = Vec::new();
    if config.lambda_r > 0.0 {
        let mut ctx = DropoutCtx::off();
        let reg = compute_regularizers(tape, &bound, &sink.bufs, active_laws(config.variant), &mut ctx)?;
        reg_values = reg.report.values.clone();
        let scaled = tape.scale(reg.sum, config.lambda_r as f32);
        total = tape.add(total, scaled)?;
    }

    // boolean-variant event grounding
    let mut event_value = 0.0;
    if config.lambda_e > 0.0 {
        let mut events: Vec<(BufId, Vec<Sign>)> = Vec::new();
        for (j, &buf) in pos_out.history_events.iter().enumerate() {
            let signs: Vec<Sign> = tb.batch.history.iter().map(|h| h[j].1).collect();
            events.push((buf, signs));
        }
        events.push((pos_out.target_events, vec![Sign::Positive; rows]));
        let ev = boolean_event_loss(tape, &bound, &events)?;
        event_value = tape.value(ev).data[0] as f64;
        let scaled = tape.scale(ev, config.lambda_e as f32);
        total = tape.add(total, scaled)?;
    }

    Ok(LossBreakdown { total, ncr: ncr_value, reg: reg_values, event: event_value })
}

/// Sum of squares of the module weights plus the embedding rows gathered by
/// this batch (deduplicated).
fn touched_l2(
    tape: &mut Tape<'_, f32>,
    bound: &BoundModel,
    ids: &ModelIds,
    pos: &StatementBatch,
    neg: &StatementBatch,
) -> Result<BufId> {
    let mut users: Vec<u32> = pos.users.clone();
    users.extend_from_slice(&neg.users);
    users.sort_unstable();
    users.dedup();
    let mut items: Vec<u32> = pos.targets.clone();
    items.extend_from_slice(&neg.targets);
    for h in pos.history.iter().chain(neg.history.iter()) {
        items.extend(h.iter().map(|&(i, _)| i));
    }
    items.sort_unstable();
    items.dedup();

    let u_rows = tape.gather(ids.user_table, &users)?;
    let u_sq = tape.mul(u_rows, u_rows)?;
    let mut total = tape.sum_all(u_sq);
    let i_rows = tape.gather(ids.item_table, &items)?;
    let i_sq = tape.mul(i_rows, i_rows)?;
    let i_sum = tape.sum_all(i_sq);
    total = tape.add(total, i_sum)?;
    let w = bound.weight_l2(tape)?;
    tape.add(total, w)
}

/// First few structure-homogeneous batches of the train split, used as a
/// fixed probe set for law measurement.
pub fn build_probe_batches(dataset: &Dataset, batch_size: usize, n: usize) -> Vec<StatementBatch> {
    let train_indices: Vec<usize> = dataset
        .statements
        .iter()
        .enumerate()
        .filter(|(_, s)| s.split == Split::Train)
        .map(|(i, _)| i)
        .collect();
    group_batches(dataset, &train_indices, batch_size)
        .into_iter()
        .take(n)
        .map(|members| to_statement_batch(dataset, &members).batch)
        .collect()
}

/// Law values for a model over the dataset's probe batches (forward only,
/// no dropout, identity operand order). Used by `inspect --laws`.
pub fn measure_law_report(
    store: &ParamStore<f32>,
    ids: &ModelIds,
    config: &TrainConfig,
    dataset: &Dataset,
    probes: usize,
) -> Result<RegularizerReport> {
    let train_indices: Vec<usize> = dataset
        .statements
        .iter()
        .enumerate()
        .filter(|(_, s)| s.split == Split::Train)
        .map(|(i, _)| i)
        .collect();
    let probe_batches: Vec<TrainBatch> = group_batches(dataset, &train_indices, config.batch_size)
        .into_iter()
        .take(probes)
        .map(|members| to_statement_batch(dataset, &members))
        .collect();
    measure_laws(store, ids, config, dataset, &probe_batches)
}

/// Forward-only law measurement over fixed probe batches; used before the
/// first update and again under the best parameters so the two reports are
/// comparable.
fn measure_laws(
    store: &ParamStore<f32>,
    ids: &ModelIds,
    config: &TrainConfig,
    dataset: &Dataset,
    probes: &[TrainBatch],
) -> Result<RegularizerReport> {
    let laws = active_laws(config.variant);
    let mut sums: Vec<f64> = vec![0.0; laws.len()];
    let mut count = 0usize;
    let mut events_total = 0usize;
    for tb in probes {
        let mut tape = Tape::new(store);
        let bound = BoundModel::bind(&mut tape, ids);
        let rows = tb.batch.len();
        let mut neg_rng = stream(config.seed, 0xF1BE, 0);
        let mut sink = EventSink::new();
        let shuffle = BatchShuffle::identity(config.variant, rows, tb.batch.history_len());
        evaluate_statement_batch(
            &mut tape, &bound, config.variant, config.mode, &tb.batch, &shuffle,
            &mut DropoutCtx::off(), &mut sink,
        )?;
        // a matching negative expression set, deterministic across calls
        let mut neg_targets = Vec::with_capacity(rows);
        for &idx in &tb.rows {
            let s = &dataset.statements[idx];
            neg_targets.push(sample_negative(
                &dataset.interactions[s.user as usize],
                dataset.item_count(),
                &dataset.user_tokens[s.user as usize],
                &mut neg_rng,
            )?);
        }
        let neg_batch = StatementBatch {
            users: tb.batch.users.clone(),
            targets: neg_targets,
            history: tb.batch.history.clone(),
        };
        evaluate_statement_batch(
            &mut tape, &bound, config.variant, config.mode, &neg_batch, &shuffle,
            &mut DropoutCtx::off(), &mut sink,
        )?;
        let reg = compute_regularizers(&mut tape, &bound, &sink.bufs, laws, &mut DropoutCtx::off())?;
        for (slot, &(_, v)) in reg.report.values.iter().enumerate() {
            sums[slot] += v;
        }
        events_total += reg.report.event_count;
        count += 1;
    }
    let values: Vec<(Law, f64)> = laws.iter().zip(&sums).map(|(&l, &s)| (l, s / count.max(1) as f64)).collect();
    let sum = values.iter().map(|&(_, v)| v).sum();
    Ok(RegularizerReport { values, sum, event_count: events_total })
}

/// Train a model on the dataset's train split, validating each epoch on the
/// valid split, keeping the best-by-NDCG@5 parameters.
pub fn train(
    config: &TrainConfig,
    dataset: &Dataset,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    let train_indices: Vec<usize> = dataset
        .statements
        .iter()
        .enumerate()
        .filter(|(_, s)| s.split == Split::Train)
        .map(|(i, _)| i)
        .collect();
    if train_indices.is_empty() {
        return Err(NcrError::Config("no training statements".into()));
    }

    let mut init_rng = stream(config.seed, 0x1217, 0);
    let mut store: ParamStore<f32> = ParamStore::new();
    let ids = ModelIds::init(
        &mut store,
        &mut init_rng,
        dataset.user_count(),
        dataset.item_count(),
        config.dim,
    );
    let mut adam = AdamState::new(&store, config.lr);

    // fixed probe batches for the before/after law measurement
    let probe_batches: Vec<TrainBatch> = group_batches(dataset, &train_indices, config.batch_size)
        .into_iter()
        .take(8)
        .map(|members| to_statement_batch(dataset, &members))
        .collect();
    let initial_reg = if config.lambda_r > 0.0 {
        Some(measure_laws(&store, &ids, config, dataset, &probe_batches)?)
    } else {
        None
    };

    let mut log: Vec<EpochLog> = Vec::new();
    let mut best: Option<(f64, usize, ParamStore<f32>)> = None;
    let mut aborted = None;

    'epochs: for epoch in 0..config.max_epochs {
        let t0 = Instant::now();
        let mut order_rng = stream(config.seed, 0x0D0E, epoch as u64);
        let mut neg_rng = stream(config.seed, 0x7E6A, epoch as u64);
        let mut shuffle_rng = stream(config.seed, 0x54AF, epoch as u64);
        let mut dropout_rng = stream(config.seed, 0xD180, epoch as u64);

        let mut order = train_indices.clone();
        order.shuffle(&mut order_rng);
        let mut batches = group_batches(dataset, &order, config.batch_size);
        batches.shuffle(&mut order_rng);

        let mut ncr_sum = 0.0;
        let mut law_sums: Vec<f64> = vec![0.0; active_laws(config.variant).len()];
        let mut event_sum = 0.0;
        let mut batch_count = 0usize;

        for members in &batches {
            let tb = to_statement_batch(dataset, members);
            let mut tape = Tape::new(&store);
            let breakdown = build_batch_loss(
                &mut tape,
                &ids,
                config,
                dataset,
                &tb,
                &mut neg_rng,
                &mut shuffle_rng,
                if config.dropout > 0.0 { Some(&mut dropout_rng) } else { None },
            )?;
            let total_value = tape.value(breakdown.total).data[0];
            if !total_value.is_finite() {
                aborted = Some(format!("non-finite loss in epoch {epoch}"));
                break 'epochs;
            }
            let grads = tape.backward(breakdown.total)?;
            match adam.update(&mut store, &grads) {
                Ok(()) => {}
                Err(NcrError::NanGradient(name)) => {
                    aborted = Some(format!("NaN gradient in `{name}` at epoch {epoch}"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
            ncr_sum += breakdown.ncr;
            for (slot, &(_, v)) in breakdown.reg.iter().enumerate() {
                law_sums[slot] += v;
            }
            event_sum += breakdown.event;
            batch_count += 1;
        }

        let valid = evaluate_model(
            &store, &ids, config.variant, config.mode, dataset, Split::Valid,
            &[5], config.eval_negatives, config.eval_seed, 1,
        );
        let (ndcg5, hr5) = match valid {
            Ok(report) => (report.ndcg(5).unwrap_or(0.0), report.hr(5).unwrap_or(0.0)),
            Err(NcrError::Config(_)) => (f64::NAN, f64::NAN), // no validation split
            Err(e) => return Err(e),
        };

        let entry = EpochLog {
            epoch,
            ncr_loss: ncr_sum / batch_count.max(1) as f64,
            reg_values: active_laws(config.variant)
                .iter()
                .zip(&law_sums)
                .map(|(&l, &s)| (l, s / batch_count.max(1) as f64))
                .collect(),
            event_loss: event_sum / batch_count.max(1) as f64,
            valid_ndcg5: ndcg5,
            valid_hr5: hr5,
            seconds: t0.elapsed().as_secs_f64(),
        };
        on_epoch(&entry);
        log.push(entry);

        let improved = match &best {
            None => true,
            Some((best_score, _, _)) => ndcg5 > *best_score,
        };
        if improved && ndcg5.is_finite() {
            best = Some((ndcg5, epoch, store.clone()));
        }
        if let Some(&(_, best_epoch, _)) = best.as_ref() {
            if epoch - best_epoch >= config.patience {
                break;
            }
        }
    }

    let (best_score, best_epoch, best_store) = match best {
        Some(b) => b,
        None => (f64::NAN, 0, store.clone()), // aborted before any full epoch
    };
    let final_reg = if config.lambda_r > 0.0 && aborted.is_none() {
        Some(measure_laws(&best_store, &ids, config, dataset, &probe_batches)?)
    } else {
        None
    };

    let epochs_run = log.len();
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            config: config.clone(),
            user_tokens: dataset.user_tokens.clone(),
            item_tokens: dataset.item_tokens.clone(),
            store: best_store,
            ids,
            best_valid_ndcg5: best_score,
            best_epoch,
        },
        log,
        epochs_run,
        initial_reg,
        final_reg,
        aborted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_statements, InteractionRecord};

    fn toy_dataset(users: usize, items_per_user: usize) -> Dataset {
        let mut records = Vec::new();
        let mut line = 1;
        for u in 0..users {
            for k in 0..items_per_user {
                let item = (u * 3 + k * 7) % (items_per_user * 2);
                records.push(InteractionRecord {
                    user: format!("u{u}"),
                    item: format!("i{item}"),
                    rating: Some(if (u + k) % 3 == 0 { 2 } else { 5 }),
                    timestamp: 1000 + k as i64,
                    line,
                });
                line += 1;
            }
        }
        build_statements(&records, 5)
    }

    #[test]
    fn config_pairs_round_trip() {
        let cfg = TrainConfig {
            lambda_r: 0.125,
            lambda_e: 0.5,
            seed: 42,
            shuffle_target: false,
            ..TrainConfig::default()
        };
        let pairs = cfg.to_pairs();
        let back = TrainConfig::from_pairs(&pairs).unwrap();
        assert_eq!(format!("{cfg:?}"), format!("{back:?}"));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = TrainConfig { lambda_r: -0.1, ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig { dropout: 1.0, ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig { batch_size: 0, ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn negative_sampling_avoids_interactions() {
        let interactions = vec![0, 1];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let s = sample_negative(&interactions, 3, "u", &mut rng).unwrap();
            assert_eq!(s, 2);
        }
    }

    #[test]
    fn negative_sampling_is_roughly_uniform() {
        let interactions = vec![1, 3];
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut counts = [0usize; 4];
        let draws = 10_000;
        for _ in 0..draws {
            let s = sample_negative(&interactions, 4, "u", &mut rng).unwrap();
            counts[s as usize] += 1;
        }
        assert_eq!(counts[1] + counts[3], 0);
        for &c in &[counts[0], counts[2]] {
            let freq = c as f64 / draws as f64;
            assert!((freq - 0.5).abs() < 0.02, "freq = {freq}");
        }
    }

    #[test]
    fn exhausted_universe_is_an_error() {
        let interactions = vec![0, 1, 2];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        assert!(matches!(
            sample_negative(&interactions, 3, "u", &mut rng),
            Err(NcrError::ExhaustedUniverse { .. })
        ));
    }

    #[test]
    fn pairwise_loss_known_values() {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let eq = tape.constant(crate::tensor::Tensor::scalar(0.3));
        let loss_equal = pairwise_loss(&mut tape, eq, eq, 10.0).unwrap();
        assert!((tape.value(loss_equal).data[0] - std::f64::consts::LN_2).abs() < 1e-12);

        let pos = tape.constant(crate::tensor::Tensor::scalar(1.0));
        let neg = tape.constant(crate::tensor::Tensor::scalar(-1.0));
        let loss_wide = pairwise_loss(&mut tape, pos, neg, 10.0).unwrap();
        assert!((tape.value(loss_wide).data[0] - 2.0611536181902037e-9).abs() < 1e-15);
    }

    #[test]
    fn pairwise_loss_decreases_in_margin() {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let mut last = f64::INFINITY;
        for margin in [-0.5, -0.1, 0.0, 0.1, 0.5, 1.0] {
            let p = tape.constant(crate::tensor::Tensor::scalar(margin));
            let z = tape.constant(crate::tensor::Tensor::scalar(0.0));
            let l = pairwise_loss(&mut tape, p, z, 10.0).unwrap();
            let v = tape.value(l).data[0];
            assert!(v < last);
            last = v;
        }
    }

    #[test]
    fn boolean_event_loss_values() {
        use crate::tensor::Tensor;
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ids = ModelIds::init(&mut store, &mut rng, 2, 2, 2);
        // anchor [0,0] and a NOT that maps anything to [0,0] via zero weights
        for pid in [ids.not_gate.w1, ids.not_gate.b1, ids.not_gate.w2, ids.not_gate.b2] {
            for v in store.get_mut(pid).data.iter_mut() {
                *v = 0.0;
            }
        }
        let anchor_zero = store.add("anchor_zero", Tensor::row_vector(vec![0.0, 0.0]), false);
        ids.anchor = anchor_zero;

        let mut tape = Tape::new(&store);
        let bound = BoundModel::bind(&mut tape, &ids);
        // event equal to its ground truth -> zero loss
        let e_match = tape.constant(Tensor::row_vector(vec![0.0, 0.0]));
        let l = boolean_event_loss(&mut tape, &bound, &[(e_match, vec![Sign::Positive])]).unwrap();
        assert_eq!(tape.value(l).data[0], 0.0);
        // e=[1,0], G=[0,0]: mean squared error 0.5
        let e = tape.constant(Tensor::row_vector(vec![1.0, 0.0]));
        let l = boolean_event_loss(&mut tape, &bound, &[(e, vec![Sign::Positive])]).unwrap();
        assert!((tape.value(l).data[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn one_step_decreases_single_statement_loss() {
        let dataset = toy_dataset(3, 8);
        let config = TrainConfig {
            dim: 8,
            lr: 1e-4,
            batch_size: 1,
            dropout: 0.0,
            lambda_r: 0.1,
            seed: 3,
            ..TrainConfig::default()
        };
        let idx = dataset.statements.iter().position(|s| s.split == Split::Train).unwrap();
        let tb = to_statement_batch(&dataset, &[idx]);

        let mut store: ParamStore<f32> = ParamStore::new();
        let mut rng = stream(config.seed, 0x1217, 0);
        let ids = ModelIds::init(&mut store, &mut rng, dataset.user_count(), dataset.item_count(), config.dim);
        let mut adam = AdamState::new(&store, config.lr);

        let loss_at = |store: &ParamStore<f32>| -> f64 {
            let mut tape = Tape::new(store);
            let mut neg_rng = stream(9, 9, 9);
            let mut shuf_rng = stream(8, 8, 8);
            let b = build_batch_loss(&mut tape, &ids, &config, &dataset, &tb, &mut neg_rng, &mut shuf_rng, None).unwrap();
            tape.value(b.total).data[0] as f64
        };

        let before = loss_at(&store);
        {
            let mut tape = Tape::new(&store);
            let mut neg_rng = stream(9, 9, 9);
            let mut shuf_rng = stream(8, 8, 8);
            let b = build_batch_loss(&mut tape, &ids, &config, &dataset, &tb, &mut neg_rng, &mut shuf_rng, None).unwrap();
            let grads = tape.backward(b.total).unwrap();
            adam.update(&mut store, &grads).unwrap();
        }
        let after = loss_at(&store);
        assert!(after < before, "loss {before} -> {after}");
    }

    #[test]
    fn lambda_r_zero_reduces_to_plain_pairwise_objective() {
        let dataset = toy_dataset(3, 12);
        let config = TrainConfig { dim: 4, lambda_r: 0.0, dropout: 0.0, seed: 1, ..TrainConfig::default() };
        let idx: Vec<usize> = (0..dataset.statements.len())
            .filter(|&i| {
                let s = &dataset.statements[i];
                s.split == Split::Train && s.history.len() == 5
            })
            .take(4)
            .collect();
        let tb = to_statement_batch(&dataset, &idx);
        let mut store: ParamStore<f32> = ParamStore::new();
        let mut rng = stream(1, 0x1217, 0);
        let ids = ModelIds::init(&mut store, &mut rng, dataset.user_count(), dataset.item_count(), 4);

        let run = |cfg: &TrainConfig| -> (f64, f64) {
            let mut tape = Tape::new(&store);
            let mut neg_rng = stream(2, 2, 2);
            let mut shuf_rng = stream(3, 3, 3);
            let b = build_batch_loss(&mut tape, &ids, cfg, &dataset, &tb, &mut neg_rng, &mut shuf_rng, None).unwrap();
            (tape.value(b.total).data[0] as f64, b.ncr)
        };
        let (total, ncr) = run(&config);
        assert_eq!(total, ncr, "with no regularizers the total is the ranking objective alone");

        let with_reg = TrainConfig { lambda_r: 0.1, ..config };
        let (total_reg, ncr_reg) = run(&with_reg);
        assert_eq!(ncr, ncr_reg);
        assert!(total_reg > total);
    }

    #[test]
    fn two_epoch_training_is_deterministic_and_keeps_best() {
        let dataset = toy_dataset(12, 10);
        let config = TrainConfig {
            dim: 8,
            max_epochs: 2,
            patience: 5,
            batch_size: 16,
            seed: 11,
            eval_negatives: 8,
            ..TrainConfig::default()
        };
        let run = || {
            let out = train(&config, &dataset, |_| {}).unwrap();
            let bits: Vec<u32> = out
                .checkpoint
                .store
                .ids()
                .flat_map(|id| out.checkpoint.store.get(id).data.iter().map(|v| v.to_bits()).collect::<Vec<_>>())
                .collect();
            (bits, out.log.iter().map(|l| l.valid_ndcg5).collect::<Vec<_>>())
        };
        let (bits_a, curve_a) = run();
        let (bits_b, curve_b) = run();
        assert_eq!(bits_a, bits_b, "fixed-seed training must be bitwise reproducible");
        assert_eq!(curve_a, curve_b);

        let out = train(&config, &dataset, |_| {}).unwrap();
        let best_from_log = out.log.iter().map(|l| l.valid_ndcg5).fold(f64::MIN, f64::max);
        assert!(out.checkpoint.best_valid_ndcg5 >= best_from_log - 1e-12);
        // the anchor never moves during training
        let anchor_id = out.checkpoint.ids.anchor;
        assert!(!out.checkpoint.store.is_trainable(anchor_id));
    }
}
