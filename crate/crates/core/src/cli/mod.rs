//! Subcommands of the `mamex` binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};

use crate::data::{
    data_hash, generate_synthetic, load_dataset, save_dataset, write_split_files, Dataset, Partition, SplitRatios,
    SyntheticSpec,
};
use crate::evaluation::{evaluate_with, RankingResult, DEFAULT_KS};
use crate::training::{load_checkpoint, save_checkpoint, train, Checkpoint, ModelConfig, TrainOutcome, Variant};
use crate::{Error, Exec, Result};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const EPOCH_LOG_FILE: &str = "epoch_log.tsv";
pub const REPORT_FILE: &str = "report.tsv";
pub const RUN_MANIFEST_FILE: &str = "run_manifest.txt";

/// Variants compared in the ablation table.
pub const ABLATION_ROWS: [Variant; 4] = [Variant::Full, Variant::NoMoe, Variant::NoAlign, Variant::NoMmf];
/// Variants compared in the router table.
pub const ROUTER_ROWS: [Variant; 3] = [Variant::JointRouter, Variant::ModSpecificRouter, Variant::Full];

#[derive(Debug, Parser)]
#[command(
    name = "mamex",
    version,
    about = "Multimodal mixture-of-experts cold-start recommender"
)]
pub struct Cli {
    /// Run every fan-out on the calling thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    Synth(SynthArgs),
    /// Write the cold-start item partition of a dataset.
    Split(SplitArgs),
    /// Train one model and report on the test-cold items.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a cold partition.
    Eval(EvalArgs),
    /// Train every variant over several seeds and tabulate.
    Ablate(AblateArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub users: usize,
    #[arg(long, default_value_t = 500)]
    pub items: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 1.0)]
    pub text_signal: f64,
    #[arg(long, default_value_t = 0.0)]
    pub image_signal: f64,
    #[arg(long, default_value_t = 10)]
    pub interactions_per_user: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub data_dir: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// `key = value` config file; defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data_dir: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data_dir: PathBuf,
    /// `valid` or `test`.
    #[arg(long, default_value = "test")]
    pub partition: Partition,
    /// Expected config; architecture differences are refused.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Also write the report (and per-user metrics) here.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data_dir: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Number of seeds, starting at the config seed.
    #[arg(long, default_value_t = 5)]
    pub seeds: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Restrict to these variants (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub variant: Vec<Variant>,
    #[arg(long)]
    pub force: bool,
}

pub fn run(cli: Cli) -> Result<()> {
    let exec = if cli.sequential {
        Exec::Sequential
    } else {
        Exec::default()
    };
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Split(a) => cmd_split(&a),
        Command::Train(a) => cmd_train(&a, exec).map(|_| ()),
        Command::Eval(a) => {
            let report = cmd_eval(&a, exec)?;
            print!("{}", report.to_tsv());
            Ok(())
        }
        Command::Ablate(a) => {
            let table = cmd_ablate(&a, exec)?;
            print!("{table}");
            Ok(())
        }
    }
}

fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let mut entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        if entries.next().is_some() && !force {
            return Err(Error::DirectoryNotEmpty(dir.to_owned()));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

pub fn load_config(path: Option<&Path>) -> Result<ModelConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            ModelConfig::parse(&text)
        }
        None => Ok(ModelConfig::default()),
    }
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let spec = SyntheticSpec {
        n_users: args.users,
        n_items: args.items,
        dim: args.dim,
        text_signal: args.text_signal,
        image_signal: args.image_signal,
        interactions_per_user: args.interactions_per_user,
        seed: args.seed,
    };
    let (set, table) = generate_synthetic(&spec)?;
    prepare_out_dir(&args.out_dir, args.force)?;
    save_dataset(&args.out_dir, &set, &table)?;
    log::info!(
        "wrote {} records over {} users and {} items to {}",
        set.records().len(),
        set.num_users(),
        set.num_items(),
        args.out_dir.display()
    );
    Ok(())
}

pub fn cmd_split(args: &SplitArgs) -> Result<()> {
    let ds = load_dataset(&args.data_dir)?.with_split(SplitRatios::default(), args.seed)?;
    fs::create_dir_all(&args.out_dir).map_err(|e| Error::io(&args.out_dir, e))?;
    write_split_files(&ds.interactions, &args.out_dir)
}

fn load_split(data_dir: &Path, seed: u64) -> Result<Dataset> {
    load_dataset(data_dir)?.with_split(SplitRatios::default(), seed)
}

/// Resolved config echo as comment lines followed by the metrics table.
pub fn render_report(config: &ModelConfig, result: &RankingResult) -> String {
    let mut out = String::new();
    for line in config.render().lines() {
        let _ = writeln!(out, "# {line}");
    }
    out.push_str(&result.to_tsv());
    out
}

fn run_manifest(config: &ModelConfig, hash: &str, data_dir: &Path, out_dir: &Path, started: u64) -> String {
    let finished = unix_now();
    let mut m = format!(
        "engine = mamex {}\ndata_dir = {}\ndata_hash = {hash}\nseed = {}\nstarted = {started}\nfinished = {finished}\n",
        env!("CARGO_PKG_VERSION"),
        data_dir.display(),
        config.seed
    );
    for f in [CHECKPOINT_FILE, EPOCH_LOG_FILE, REPORT_FILE] {
        let _ = writeln!(m, "output = {}", out_dir.join(f).display());
    }
    m.push_str("[config]\n");
    m.push_str(&config.render());
    m
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn train_config(path: Option<&Path>, seed: Option<u64>, variant: Option<Variant>) -> Result<ModelConfig> {
    let mut config = load_config(path)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    if let Some(v) = variant {
        config.variant = v;
    }
    config.resolved()
}

/// Split, train, evaluate on test-cold, and write checkpoint, epoch log,
/// report and run manifest into `out_dir`.
pub fn cmd_train(args: &TrainArgs, exec: Exec) -> Result<TrainOutcome> {
    let started = unix_now();
    let config = train_config(args.config.as_deref(), args.seed, args.variant)?;
    let hash = data_hash(&args.data_dir)?;
    let ds = load_split(&args.data_dir, config.seed)?;
    prepare_out_dir(&args.out_dir, args.force)?;
    let outcome = train(&config, &ds, exec)?;
    let ck = Checkpoint::from_model(&outcome.model, &hash, outcome.steps);
    save_checkpoint(&ck, args.out_dir.join(CHECKPOINT_FILE))?;
    write(&args.out_dir.join(EPOCH_LOG_FILE), &outcome.log_tsv())?;
    write(&args.out_dir.join(REPORT_FILE), &render_report(&config, &outcome.test))?;
    write(
        &args.out_dir.join(RUN_MANIFEST_FILE),
        &run_manifest(&config, &hash, &args.data_dir, &args.out_dir, started),
    )?;
    log::info!(
        "best epoch {} of {}; test Rec@20 {:.4}",
        outcome.best_epoch,
        config.epochs,
        outcome.test.recall_at(20).unwrap_or(f64::NAN)
    );
    Ok(outcome)
}

/// Evaluates a checkpoint after checking it was trained on this data.
pub fn cmd_eval(args: &EvalArgs, exec: Exec) -> Result<RankingResult> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let hash = data_hash(&args.data_dir)?;
    if ck.data_hash != hash {
        return Err(Error::Mismatch(format!(
            "dataset differs from the one the checkpoint was trained on:\n  data_hash: checkpoint={} expected={hash}",
            ck.data_hash
        )));
    }
    let expected = args.config.as_deref().map(|p| load_config(Some(p))).transpose()?;
    let seed = ck.config.seed;
    let config = ck.config.clone();
    let model = ck.into_model(expected.as_ref())?;
    let ds = load_split(&args.data_dir, seed)?;
    let result = evaluate_with(exec, &model, &ds, args.partition, &DEFAULT_KS)?;
    if let Some(dir) = &args.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let name = format!("eval_{}.tsv", args.partition.label());
        write(&dir.join(name), &render_report(&config, &result))?;
        let users = format!("eval_{}_users.tsv", args.partition.label());
        write(&dir.join(users), &result.per_user_tsv(&ds))?;
    }
    Ok(result)
}

/// Test-cold metrics of one ablation run.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRun {
    pub variant: Variant,
    pub seed: u64,
    pub recall10: f64,
    pub recall20: f64,
    pub ndcg10: f64,
    pub ndcg20: f64,
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Trains `variants × seeds` runs (in parallel under `exec`) on one dataset.
pub fn run_ablation(
    base: &ModelConfig,
    data_dir: &Path,
    variants: &[Variant],
    seeds: &[u64],
    exec: Exec,
) -> Result<Vec<AblationRun>> {
    let jobs: Vec<(Variant, u64)> = variants
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let mut splits = Vec::new();
    for &s in seeds {
        splits.push((s, load_split(data_dir, s)?));
    }
    exec.map(&jobs, |&(variant, seed)| -> Result<AblationRun> {
        let config = ModelConfig {
            seed,
            variant,
            ..base.clone()
        };
        let ds = &splits.iter().find(|(s, _)| *s == seed).expect("split per seed").1;
        let out = train(&config, ds, Exec::Sequential)?;
        log::info!("{variant} seed {seed}: test Rec@20 {:.4}", out.test.recall[1]);
        Ok(AblationRun {
            variant,
            seed,
            recall10: out.test.recall[0],
            recall20: out.test.recall[1],
            ndcg10: out.test.ndcg[0],
            ndcg20: out.test.ndcg[1],
        })
    })
    .into_iter()
    .collect()
}

/// `variant  Rec@20  NDCG@20` rows as `mean ± std`.
pub fn ablation_table(title: &str, rows: &[Variant], runs: &[AblationRun]) -> String {
    let mut out = format!("# {title}\nvariant\tRec@20\tNDCG@20\n");
    for &v in rows {
        let mine: Vec<&AblationRun> = runs.iter().filter(|r| r.variant == v).collect();
        if mine.is_empty() {
            continue;
        }
        let (rm, rs) = mean_std(&mine.iter().map(|r| r.recall20).collect::<Vec<_>>());
        let (nm, ns) = mean_std(&mine.iter().map(|r| r.ndcg20).collect::<Vec<_>>());
        let _ = writeln!(out, "{v}\t{rm:.4} ± {rs:.4}\t{nm:.4} ± {ns:.4}");
    }
    out
}

pub fn cmd_ablate(args: &AblateArgs, exec: Exec) -> Result<String> {
    let base = train_config(args.config.as_deref(), args.seed, None)?;
    if args.seeds == 0 {
        return Err(Error::Config("--seeds must be at least 1".into()));
    }
    if args.seeds < 5 {
        log::warn!(
            "{} seed(s) requested; mean ± std is reported over at least 5 by convention",
            args.seeds
        );
    }
    let seeds: Vec<u64> = (0..args.seeds as u64).map(|i| base.seed + i).collect();
    let variants: Vec<Variant> = if args.variant.is_empty() {
        Variant::ALL.to_vec()
    } else {
        let mut v = Vec::new();
        for x in &args.variant {
            if !v.contains(x) {
                v.push(*x);
            }
        }
        v
    };
    prepare_out_dir(&args.out_dir, args.force)?;
    let runs = run_ablation(&base, &args.data_dir, &variants, &seeds, exec)?;

    let mut per_run = String::from("variant\tseed\tRec@10\tRec@20\tNDCG@10\tNDCG@20\n");
    for r in &runs {
        let _ = writeln!(
            per_run,
            "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            r.variant, r.seed, r.recall10, r.recall20, r.ndcg10, r.ndcg20
        );
    }
    write(&args.out_dir.join("runs.tsv"), &per_run)?;

    let pick = |rows: &[Variant]| -> Vec<Variant> { rows.iter().copied().filter(|v| variants.contains(v)).collect() };
    let mut table = String::new();
    let ablation = pick(&ABLATION_ROWS);
    if !ablation.is_empty() {
        table.push_str(&ablation_table("ablation", &ablation, &runs));
    }
    let routers = pick(&ROUTER_ROWS);
    if !routers.is_empty() {
        if !table.is_empty() {
            table.push('\n');
        }
        table.push_str(&ablation_table("moe variants", &routers, &runs));
    }
    write(&args.out_dir.join("ablation.tsv"), &table)?;
    Ok(table)
}
