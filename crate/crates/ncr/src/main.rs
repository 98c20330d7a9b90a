use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use ncr::checkpoint::Checkpoint;
use ncr::data::{self, Split};
use ncr::eval::{evaluate_model, paired_t_test};
use ncr::expr::{build_expression, Variant};
use ncr::manifest::{parse_config_file, RunManifest};
use ncr::train::{self, EpochLog, TrainConfig};

#[derive(Parser)]
#[command(
    name = "ncr",
    version,
    about = "Train and evaluate recommenders that reason over user histories with learned logic modules"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse raw interactions and build the train/valid/test statements file
    Preprocess {
        /// raw interaction log, `user<TAB>item<TAB>rating<TAB>timestamp`
        #[arg(long)]
        data: PathBuf,
        /// input layout; `ml4col` is the four-column layout above
        #[arg(long, default_value = "ml4col", value_parser = ["ml4col"])]
        format: String,
        /// output statements file
        #[arg(long)]
        out: PathBuf,
        /// history events per statement (default: 5)
        #[arg(long, default_value_t = data::DEFAULT_HISTORY_LEN)]
        history_len: usize,
    },
    /// Train a model on a statements file
    Train(Box<TrainArgs>),
    /// Rank held-out targets against sampled candidates
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        statements: PathBuf,
        #[arg(long, default_value = "test", value_parser = ["valid", "test"])]
        split: String,
        /// comma-separated cutoffs (default: 5,10)
        #[arg(long, default_value = "5,10")]
        topk: String,
        /// sampled never-interacted candidates per case (default: 100)
        #[arg(long, default_value_t = 100)]
        eval_negatives: usize,
        /// candidate sampling seed, separate from training seeds (default: 20212021)
        #[arg(long, default_value_t = train::DEFAULT_EVAL_SEED)]
        eval_seed: u64,
        /// also write machine-readable rows to this CSV
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Print a law report or a compiled logic string from a checkpoint
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        statements: PathBuf,
        /// print regularizer values over a sampled batch
        #[arg(long, conflicts_with = "expr")]
        laws: bool,
        /// print the compiled next-item expression for this user
        #[arg(long)]
        expr: Option<String>,
    },
    /// Train and evaluate across a coefficient grid and seed list
    Sweep {
        /// coefficient to sweep
        #[arg(long, value_parser = ["lambda-r", "lambda-e"])]
        param: String,
        /// comma-separated coefficient values
        #[arg(long)]
        values: String,
        /// comma-separated training seeds
        #[arg(long)]
        seeds: String,
        #[arg(long)]
        statements: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        overrides: TrainFlags,
    },
}

#[derive(Parser)]
struct TrainArgs {
    #[arg(long)]
    statements: PathBuf,
    /// output checkpoint path
    #[arg(long)]
    out: PathBuf,
    /// per-epoch loss/metric log CSV (default: <out>.log.csv)
    #[arg(long)]
    log: Option<PathBuf>,
    /// `key = value` config file; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    flags: TrainFlags,
}

/// Tunables shared by train and sweep. Flags override the config file,
/// which overrides the built-in defaults.
#[derive(Parser, Clone)]
struct TrainFlags {
    /// model structure and feedback mode (default: ncr-e)
    #[arg(long, value_parser = ["ncr-i", "ncr-e", "eq", "cmp"])]
    variant: Option<String>,
    /// logical-law coefficient (default: 0.1)
    #[arg(long)]
    lambda_r: Option<f64>,
    /// l2 coefficient (default: 0.0001)
    #[arg(long)]
    lambda_theta: Option<f64>,
    /// event-grounding coefficient for the boolean variant (default: 0)
    #[arg(long)]
    lambda_e: Option<f64>,
    /// score-gap amplification (default: 10)
    #[arg(long)]
    alpha: Option<f64>,
    /// learning rate (default: 0.001)
    #[arg(long)]
    lr: Option<f64>,
    /// statements per mini-batch (default: 128)
    #[arg(long)]
    batch_size: Option<usize>,
    /// embedding and event dimension (default: 64)
    #[arg(long)]
    embed_dim: Option<usize>,
    /// hidden-activation dropout rate during training (default: 0.2)
    #[arg(long)]
    dropout: Option<f64>,
    /// epoch cap (default: 100)
    #[arg(long)]
    max_epochs: Option<usize>,
    /// early-stopping patience on validation NDCG@5 (default: 10)
    #[arg(long)]
    patience: Option<usize>,
    /// sampled negatives per positive statement (default: 1)
    #[arg(long)]
    negatives: Option<usize>,
    /// training seed (default: 2021)
    #[arg(long)]
    seed: Option<u64>,
    /// candidate sampling seed (default: 20212021)
    #[arg(long)]
    eval_seed: Option<u64>,
    /// sampled candidates per validation case (default: 100)
    #[arg(long)]
    eval_negatives: Option<usize>,
    /// also shuffle the target operand inside its group (default: true)
    #[arg(long)]
    shuffle_target: Option<bool>,
}

impl TrainFlags {
    /// flag > config file > built-in default
    fn resolve(&self, config_file: Option<&Path>) -> anyhow::Result<TrainConfig> {
        let mut cfg = match config_file {
            Some(path) => {
                let pairs = parse_config_file(path)?;
                TrainConfig::from_pairs(&pairs)?
            }
            None => TrainConfig::default(),
        };
        if let Some(v) = &self.variant {
            let (variant, mode) = Variant::parse(v)?;
            cfg.variant = variant;
            cfg.mode = mode;
        }
        macro_rules! take {
            ($field:ident, $cfg_field:ident) => {
                if let Some(v) = self.$field {
                    cfg.$cfg_field = v;
                }
            };
        }
        take!(lambda_r, lambda_r);
        take!(lambda_theta, lambda_theta);
        take!(lambda_e, lambda_e);
        take!(alpha, alpha);
        take!(lr, lr);
        take!(batch_size, batch_size);
        take!(embed_dim, dim);
        take!(dropout, dropout);
        take!(max_epochs, max_epochs);
        take!(patience, patience);
        take!(negatives, negatives);
        take!(seed, seed);
        take!(eval_seed, eval_seed);
        take!(eval_negatives, eval_negatives);
        take!(shuffle_target, shuffle_target);
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Preprocess { data, format, out, history_len } => {
            cmd_preprocess(&data, &format, &out, history_len)
        }
        Command::Train(args) => cmd_train(&args),
        Command::Evaluate { checkpoint, statements, split, topk, eval_negatives, eval_seed, csv } => {
            cmd_evaluate(&checkpoint, &statements, &split, &topk, eval_negatives, eval_seed, csv.as_deref())
        }
        Command::Inspect { checkpoint, statements, laws, expr } => {
            cmd_inspect(&checkpoint, &statements, laws, expr.as_deref())
        }
        Command::Sweep { param, values, seeds, statements, out_dir, overrides } => {
            cmd_sweep(&param, &values, &seeds, &statements, &out_dir, &overrides)
        }
    }
}

fn cmd_preprocess(data: &Path, format: &str, out: &Path, history_len: usize) -> anyhow::Result<()> {
    let started = Instant::now();
    let (records, issues) = data::parse_interactions(data)
        .with_context(|| format!("reading {}", data.display()))?;
    for issue in &issues {
        eprintln!("{}: skipped {issue}", data.display());
    }
    let dataset = data::build_statements(&records, history_len);
    data::write_statements(&dataset, out)?;
    let summary = data::split_summary(&dataset);
    println!("{summary}");

    let mut manifest = RunManifest::new("preprocess");
    manifest
        .add("input.data", data.display())
        .add("config.format", format)
        .add("config.history_len", history_len)
        .add("output.statements", out.display())
        .add("result.users", summary.users)
        .add("result.items", summary.items)
        .add("result.skipped_lines", issues.len())
        .add("wall_seconds", format!("{:.1}", started.elapsed().as_secs_f64()));
    manifest.write(&manifest_path(out))?;
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    let cfg = args.flags.resolve(args.config.as_deref())?;
    let dataset = data::read_statements(&args.statements)?;
    let log_path = args
        .log
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.log.csv", args.out.display())));

    let mut log_lines = vec![EpochLog::csv_header()];
    let outcome = train::train(&cfg, &dataset, |entry| {
        println!(
            "epoch {:>3}  loss {:>10.4}  valid ndcg@5 {:.4} hr@5 {:.4}  [{:.1}s]",
            entry.epoch, entry.ncr_loss, entry.valid_ndcg5, entry.valid_hr5, entry.seconds
        );
        log_lines.push(entry.csv_row());
    })?;
    std::fs::write(&log_path, log_lines.join("\n") + "\n")?;
    outcome.checkpoint.save(&args.out)?;

    if let Some(reason) = &outcome.aborted {
        eprintln!("training aborted: {reason}; kept the last good checkpoint");
    }
    println!(
        "best validation ndcg@5 {:.4} at epoch {} ({} epochs run)",
        outcome.checkpoint.best_valid_ndcg5, outcome.checkpoint.best_epoch, outcome.epochs_run
    );
    if let (Some(init), Some(fin)) = (&outcome.initial_reg, &outcome.final_reg) {
        for ((law, before), (_, after)) in init.values.iter().zip(&fin.values) {
            println!("{}: {before:.4} -> {after:.4}", law.label());
        }
    }

    let mut manifest = RunManifest::new("train");
    manifest
        .add("input.statements", args.statements.display())
        .add("output.checkpoint", args.out.display())
        .add("output.log", log_path.display());
    manifest.add_config(&cfg.to_pairs());
    manifest
        .add("result.best_valid_ndcg5", format!("{:.6}", outcome.checkpoint.best_valid_ndcg5))
        .add("result.best_epoch", outcome.checkpoint.best_epoch)
        .add("result.epochs_run", outcome.epochs_run)
        .add("wall_seconds", format!("{:.1}", started.elapsed().as_secs_f64()));
    manifest.write(&manifest_path(&args.out))?;
    Ok(())
}

fn cmd_evaluate(
    checkpoint: &Path,
    statements: &Path,
    split: &str,
    topk: &str,
    eval_negatives: usize,
    eval_seed: u64,
    csv: Option<&Path>,
) -> anyhow::Result<()> {
    let started = Instant::now();
    let ck = Checkpoint::load(checkpoint)?;
    let dataset = data::read_statements(statements)?;
    check_vocabulary(&ck, &dataset)?;

    let ks: Vec<usize> = topk
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .context("parsing --topk")?;
    if ks.is_empty() {
        bail!("--topk needs at least one cutoff");
    }
    let split = Split::parse(split)?;
    let threads: usize = std::env::var("NCR_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(1);

    let report = evaluate_model(
        &ck.store, &ck.ids, ck.config.variant, ck.config.mode,
        &dataset, split, &ks, eval_negatives, eval_seed, threads,
    )?;
    print!("{}", report.render_text());

    if let Some(csv_path) = csv {
        let variant = ck.config.variant.code(ck.config.mode);
        std::fs::write(csv_path, report.render_csv(ck.config.seed, variant))?;
        let mut manifest = RunManifest::new("evaluate");
        manifest
            .add("input.checkpoint", checkpoint.display())
            .add("input.statements", statements.display())
            .add("config.split", split.label())
            .add("config.topk", topk)
            .add("config.eval_negatives", eval_negatives)
            .add("config.eval_seed", eval_seed)
            .add("output.csv", csv_path.display())
            .add("wall_seconds", format!("{:.1}", started.elapsed().as_secs_f64()));
        manifest.write(&manifest_path(csv_path))?;
    }
    Ok(())
}

fn cmd_inspect(checkpoint: &Path, statements: &Path, laws: bool, expr_user: Option<&str>) -> anyhow::Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let dataset = data::read_statements(statements)?;
    check_vocabulary(&ck, &dataset)?;

    if laws {
        let report = train::measure_law_report(&ck.store, &ck.ids, &ck.config, &dataset, 8)?;
        println!("events: {}", report.event_count);
        for &(law, v) in &report.values {
            println!("{}: {v:.4}", law.label());
        }
        println!("sum: {:.4}", report.sum);
        return Ok(());
    }

    let user_token = expr_user.ok_or_else(|| anyhow::anyhow!("pass --laws or --expr USER"))?;
    let user = dataset
        .user_id(user_token)
        .ok_or(ncr::NcrError::UnknownId { kind: "user", id: user_token.to_string() })?;
    // the user's next-item statement: the test one when present, else valid
    let stmt = dataset
        .statements_for(Split::Test)
        .find(|s| s.user == user)
        .or_else(|| dataset.statements_for(Split::Valid).find(|s| s.user == user))
        .ok_or_else(|| anyhow::anyhow!("user `{user_token}` has no held-out statement"))?;
    let expr = build_expression(&stmt.history, stmt.target, ck.config.variant, ck.config.mode)?;
    println!("{}", expr.render(user_token));
    Ok(())
}

fn cmd_sweep(
    param: &str,
    values: &str,
    seeds: &str,
    statements: &Path,
    out_dir: &Path,
    overrides: &TrainFlags,
) -> anyhow::Result<()> {
    let started = Instant::now();
    let values: Vec<f64> = values
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .context("parsing --values")?;
    let seeds: Vec<u64> = seeds
        .split(',')
        .map(|s| s.trim().parse::<u64>())
        .collect::<Result<_, _>>()
        .context("parsing --seeds")?;
    if values.is_empty() || seeds.is_empty() {
        bail!("--values and --seeds must be non-empty");
    }
    std::fs::create_dir_all(out_dir)?;
    let dataset = data::read_statements(statements)?;
    let base = overrides.resolve(None)?;

    let mut rows = vec!["param,value,seed,split,metric,value_out".to_string()];
    // seed-aligned test ndcg@10 per configuration, for the t-test matrix
    let mut series: Vec<Vec<f64>> = vec![Vec::new(); values.len()];
    for (vi, &value) in values.iter().enumerate() {
        for &seed in &seeds {
            let mut cfg = base.clone();
            cfg.seed = seed;
            match param {
                "lambda-r" => cfg.lambda_r = value,
                "lambda-e" => cfg.lambda_e = value,
                other => bail!("unknown sweep param `{other}`"),
            }
            let tag = format!("{param}_{value}_s{seed}");
            println!("== {tag} ==");
            let outcome = train::train(&cfg, &dataset, |entry| {
                println!(
                    "  epoch {:>3} loss {:>10.4} valid ndcg@5 {:.4}",
                    entry.epoch, entry.ncr_loss, entry.valid_ndcg5
                );
            })?;
            let ck_path = out_dir.join(format!("{tag}.ckpt"));
            outcome.checkpoint.save(&ck_path)?;
            let report = evaluate_model(
                &outcome.checkpoint.store, &outcome.checkpoint.ids, cfg.variant, cfg.mode,
                &dataset, Split::Test, &[5, 10], cfg.eval_negatives, cfg.eval_seed, 1,
            )?;
            for &(k, n, h) in &report.metrics {
                rows.push(format!("{param},{value},{seed},test,ndcg@{k},{n:.6}"));
                rows.push(format!("{param},{value},{seed},test,hr@{k},{h:.6}"));
            }
            series[vi].push(report.ndcg(10).unwrap_or(0.0));
        }
    }
    std::fs::write(out_dir.join("sweep.csv"), rows.join("\n") + "\n")?;

    // paired t-tests between configurations over the seed-aligned series
    let mut tt = vec!["value_a,value_b,metric,t,p,degenerate".to_string()];
    if seeds.len() >= 2 {
        for i in 0..values.len() {
            for j in i + 1..values.len() {
                let r = paired_t_test(&series[i], &series[j])?;
                tt.push(format!(
                    "{},{},ndcg@10,{:.6},{:.6},{}",
                    values[i], values[j], r.t, r.p, r.degenerate
                ));
            }
        }
    }
    std::fs::write(out_dir.join("ttests.csv"), tt.join("\n") + "\n")?;

    let mut manifest = RunManifest::new("sweep");
    manifest
        .add("input.statements", statements.display())
        .add("config.param", param)
        .add("config.values", values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","))
        .add("config.seeds", seeds.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","));
    manifest.add_config(&base.to_pairs());
    manifest
        .add("output.dir", out_dir.display())
        .add("wall_seconds", format!("{:.1}", started.elapsed().as_secs_f64()));
    manifest.write(&out_dir.join("sweep.manifest"))?;
    Ok(())
}

fn check_vocabulary(ck: &Checkpoint, dataset: &data::Dataset) -> anyhow::Result<()> {
    let unknown_users: Vec<&String> = dataset
        .user_tokens
        .iter()
        .filter(|t| !ck.user_tokens.contains(t))
        .take(3)
        .collect();
    let unknown_items: Vec<&String> = dataset
        .item_tokens
        .iter()
        .filter(|t| !ck.item_tokens.contains(t))
        .take(3)
        .collect();
    if !unknown_users.is_empty() || !unknown_items.is_empty() {
        bail!(
            "checkpoint/statements vocabulary mismatch; unknown users {unknown_users:?}, unknown items {unknown_items:?}"
        );
    }
    // dense ids must line up too, or scores would silently permute
    if dataset.user_tokens != ck.user_tokens || dataset.item_tokens != ck.item_tokens {
        bail!("checkpoint and statements vocabularies are ordered differently; re-run preprocess");
    }
    Ok(())
}

fn manifest_path(out: &Path) -> PathBuf {
    PathBuf::from(format!("{}.manifest", out.display()))
}
