//! Command-line front end.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;
use sira_core::engine::{BoundaryConfig, Clock, NoClock};
use sira_core::synth::{Decoder, Example, TrainConfig, Vocab};
use sira_core::{init_model, ToyModel};

use crate::accept;
use crate::analyze::analyze;
use crate::clock::StdClock;
use crate::config::{RunConfig, SEED_ENV};
use crate::dataset::{read_examples, write_examples};
use crate::demo::{self, DemoRecipe, TrainSummary};
use crate::error::CliError;
use crate::experiments::{default_k_list, metrics_from_runs, paired_traces, sweep, DecodeSettings};
use crate::format::{load_model, save_model};
use crate::report::{write_drift_csv, write_sweep_csv, CostDoc, MetricsDoc};
use crate::trace::{read_runs, write_runs};

#[derive(Debug, Parser)]
#[command(name = "sira", version, about = "Split internal-reference contrastive decoding on a toy transformer")]
pub struct Cli {
    /// Flat TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Post-boundary depth.
    #[arg(long = "K", global = true)]
    pub k: Option<usize>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub alpha: Option<f32>,
    /// Maximum generated tokens.
    #[arg(long = "T", global = true)]
    pub max_tokens: Option<usize>,
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Omit wall-clock fields so outputs are byte-reproducible.
    #[arg(long, global = true)]
    pub no_timing: bool,
    /// Only use the first N examples.
    #[arg(long, global = true)]
    pub limit: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the demo dataset and train the demo model.
    InitDemo {
        /// Override the recipe's training steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train a model on a dataset file.
    Train {
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f32>,
    },
    /// Decode every example with SIRA and the baseline, writing traces.
    Decode {
        /// Record per-layer hidden states in the SIRA trace.
        #[arg(long)]
        states: bool,
    },
    /// Metrics over a grid of (K, alpha).
    Sweep {
        #[arg(long = "k-list", value_delimiter = ',')]
        k_list: Vec<usize>,
        #[arg(long = "alpha-list", value_delimiter = ',', allow_negative_numbers = true)]
        alpha_list: Vec<f32>,
    },
    /// Drift, KL and cost reports from saved traces.
    Analyze {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        against: Option<PathBuf>,
    },
    /// Layer-eval and wall-clock cost of SIRA against the baseline.
    Bench {
        #[arg(long, default_value_t = 28)]
        layers: usize,
    },
    /// Run the acceptance suite.
    Accept {
        /// Directory caching the trained demo model.
        #[arg(long)]
        cache: Option<PathBuf>,
    },
}

/// Resolves the effective configuration: flags over `SIRA_SEED` over the
/// file over defaults.
pub fn resolve(cli: &Cli, env_seed: Option<&str>) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_env(env_seed)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cli.k.is_some() {
        cfg.k = cli.k;
    }
    if let Some(a) = cli.alpha {
        cfg.alpha = a;
    }
    if let Some(t) = cli.max_tokens {
        cfg.max_tokens = t;
    }
    if cli.model.is_some() {
        cfg.model = cli.model.clone();
    }
    if cli.dataset.is_some() {
        cfg.dataset = cli.dataset.clone();
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    if let Some(l) = cli.limit {
        cfg.limit = l;
    }
    Ok(cfg)
}

/// Parses the process arguments, runs the command and returns the exit
/// code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let env_seed = std::env::var(SEED_ENV).ok();
    match resolve(&cli, env_seed.as_deref()).and_then(|cfg| run(&cli, &cfg, &mut std::io::stdout())) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli, cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    match &cli.command {
        Command::InitDemo { steps } => cmd_init_demo(cfg, *steps, out),
        Command::Train { steps, lr } => cmd_train(cfg, *steps, *lr, out),
        Command::Decode { states } => cmd_decode(cfg, *states, !cli.no_timing, out),
        Command::Sweep { k_list, alpha_list } => cmd_sweep(cfg, k_list, alpha_list, out),
        Command::Analyze { trace, against } => cmd_analyze(cfg, trace, against.as_deref(), out),
        Command::Bench { layers } => cmd_bench(cfg, *layers, !cli.no_timing, out),
        Command::Accept { cache } => cmd_accept(cfg, cache.as_deref(), !cli.no_timing, out),
    }
}

fn demo_vocab() -> Vocab {
    DemoRecipe::default().spec.vocab()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn out_dir(cfg: &RunConfig) -> Result<&Path, CliError> {
    fs::create_dir_all(&cfg.out_dir)?;
    Ok(&cfg.out_dir)
}

fn load_examples(cfg: &RunConfig) -> Result<Vec<Example>, CliError> {
    let mut ex = read_examples(BufReader::new(File::open(cfg.require_dataset()?)?))?;
    if cfg.limit > 0 {
        ex.truncate(cfg.limit);
    }
    if ex.is_empty() {
        return Err(CliError::Config("dataset is empty".into()));
    }
    Ok(ex)
}

fn load_checked_model(cfg: &RunConfig, vocab: &Vocab) -> Result<ToyModel, CliError> {
    let model = load_model(cfg.require_model()?)?;
    if model.config().vocab_size != vocab.size() {
        return Err(CliError::Config(format!(
            "model vocabulary {} does not match the dataset vocabulary {}",
            model.config().vocab_size,
            vocab.size()
        )));
    }
    Ok(model)
}

fn cmd_init_demo(cfg: &RunConfig, steps: Option<usize>, out: &mut dyn Write) -> Result<(), CliError> {
    let mut recipe = DemoRecipe::seeded(cfg.seed);
    if let Some(s) = steps {
        recipe.train.steps = s;
    }
    let dir = out_dir(cfg)?;
    let demo = demo::build(&recipe, &mut |s, l| {
        if s % 500 == 0 {
            eprintln!("step {s:>5} loss {l:.4}");
        }
    })?;
    let model_path = dir.join("model.bin");
    let train_path = dir.join("train.jsonl");
    let test_path = dir.join("test.jsonl");
    save_model(&demo.model, &model_path)?;
    write_examples(BufWriter::new(File::create(&train_path)?), &demo.dataset.train)?;
    write_examples(BufWriter::new(File::create(&test_path)?), &demo.dataset.test)?;
    write_json(&dir.join("train.json"), &demo.summary)?;
    // paths relative to the config file itself
    let run_cfg = RunConfig {
        model: Some("model.bin".into()),
        dataset: Some("test.jsonl".into()),
        out_dir: ".".into(),
        seed: cfg.seed,
        train_steps: recipe.train.steps,
        ..RunConfig::default()
    };
    fs::write(dir.join("config.toml"), run_cfg.to_toml())?;
    writeln!(
        out,
        "demo model {:016x}: loss {:.4} -> {:.4} in {} steps; wrote {}",
        demo.model.checksum(),
        demo.summary.initial_loss,
        demo.summary.final_loss,
        demo.summary.steps,
        dir.display()
    )?;
    Ok(())
}

fn cmd_train(cfg: &RunConfig, steps: Option<usize>, lr: Option<f32>, out: &mut dyn Write) -> Result<(), CliError> {
    let vocab = demo_vocab();
    let examples: Vec<Example> = load_examples(cfg)?;
    let mut model = match &cfg.model {
        Some(_) => load_checked_model(cfg, &vocab)?,
        None => init_model(cfg.init_config(vocab.size())?, cfg.seed)?,
    };
    let tc = TrainConfig {
        steps: steps.unwrap_or(cfg.train_steps),
        lr: lr.unwrap_or(cfg.lr),
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        ..TrainConfig::default()
    };
    let report = sira_core::synth::train_toy_with(&mut model, &examples, &tc, &mut |s, l| {
        if s % 500 == 0 {
            eprintln!("step {s:>5} loss {l:.4}");
        }
    })?;
    let dir = out_dir(cfg)?;
    save_model(&model, &dir.join("model.bin"))?;
    let summary = TrainSummary {
        steps: tc.steps,
        initial_loss: report.initial_loss,
        final_loss: report.final_loss,
        losses: report.losses,
    };
    write_json(&dir.join("train.json"), &summary)?;
    writeln!(out, "loss {:.4} -> {:.4}", summary.initial_loss, summary.final_loss)?;
    Ok(())
}

fn cmd_decode(cfg: &RunConfig, states: bool, timing: bool, out: &mut dyn Write) -> Result<(), CliError> {
    let vocab = demo_vocab();
    let model = load_checked_model(cfg, &vocab)?;
    let settings = DecodeSettings {
        boundary: cfg.boundary(model.config().num_layers)?,
        contrast: cfg.contrast()?,
        seed: cfg.seed,
        timing,
        states,
    };
    let examples = load_examples(cfg)?;
    let clock: Box<dyn Clock> = if timing { Box::new(StdClock::new()) } else { Box::new(NoClock) };
    let (sira, base) = paired_traces(&model, &examples, &vocab, &settings, clock.as_ref())?;
    let dir = out_dir(cfg)?;
    write_runs(BufWriter::new(File::create(dir.join("sira.jsonl"))?), &sira)?;
    write_runs(BufWriter::new(File::create(dir.join("baseline.jsonl"))?), &base)?;
    let decoder = Decoder::Sira {
        alpha: settings.contrast.alpha,
        k: settings.boundary.k,
    };
    let ms = metrics_from_runs(&examples, &sira, &vocab);
    let mb = metrics_from_runs(&examples, &base, &vocab);
    write_json(&dir.join("metrics_sira.json"), &MetricsDoc::new(model.checksum(), decoder, &ms))?;
    write_json(&dir.join("metrics_baseline.json"), &MetricsDoc::new(model.checksum(), Decoder::Baseline, &mb))?;
    writeln!(
        out,
        "{} prompts: halluc {:.3} (baseline {:.3}), recall {:.3} (baseline {:.3})",
        examples.len(),
        ms.halluc_rate,
        mb.halluc_rate,
        ms.grounded_recall,
        mb.grounded_recall
    )?;
    Ok(())
}

fn cmd_sweep(cfg: &RunConfig, k_list: &[usize], alpha_list: &[f32], out: &mut dyn Write) -> Result<(), CliError> {
    let vocab = demo_vocab();
    let model = load_checked_model(cfg, &vocab)?;
    let l = model.config().num_layers;
    let pick = |flag: &[usize], file: &[usize]| {
        if !flag.is_empty() {
            flag.to_vec()
        } else if !file.is_empty() {
            file.to_vec()
        } else {
            default_k_list(l)
        }
    };
    let ks = pick(k_list, &cfg.k_list);
    let alphas = if alpha_list.is_empty() { cfg.alpha_list.clone() } else { alpha_list.to_vec() };
    let examples = load_examples(cfg)?;
    let rows = sweep(&model, &examples, &vocab, &ks, &alphas)?;
    let dir = out_dir(cfg)?;
    write_sweep_csv(File::create(dir.join("sweep.csv"))?, &rows)?;
    write_json(&dir.join("sweep.json"), &rows)?;
    for r in &rows {
        writeln!(
            out,
            "{:<8} K={:<2} alpha={:<4} acc={:.3} halluc={:.3} recall={:.3}",
            r.decoder, r.k, r.alpha, r.accuracy, r.halluc_rate, r.grounded_recall
        )?;
    }
    Ok(())
}

fn cmd_analyze(cfg: &RunConfig, trace: &Path, against: Option<&Path>, out: &mut dyn Write) -> Result<(), CliError> {
    let open = |p: &Path| -> Result<_, CliError> {
        let f = File::open(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
        read_runs(BufReader::new(f))
    };
    let a = open(trace)?;
    let b = against.map(open).transpose()?;
    let doc = analyze(&a, b.as_deref())?;
    let dir = out_dir(cfg)?;
    write_json(&dir.join("analysis.json"), &doc)?;
    if let Some(d) = &doc.mean_drift {
        write_drift_csv(File::create(dir.join("drift.csv"))?, d)?;
    }
    writeln!(out, "median KL(full||cf) {:.6}", doc.median_branch_kl)?;
    if let Some(k) = doc.median_against_kl {
        writeln!(out, "median KL(full||against) {k:.6}")?;
    }
    if let Some(c) = &doc.cost {
        writeln!(out, "layer-eval ratio {}", c.layer_eval_ratio)?;
    }
    Ok(())
}

fn cmd_bench(cfg: &RunConfig, layers: usize, timing: bool, out: &mut dyn Write) -> Result<(), CliError> {
    let k = cfg.k.unwrap_or(layers / 2);
    BoundaryConfig::new(k)
        .validate(layers)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let clock: Box<dyn Clock> = if timing { Box::new(StdClock::new()) } else { Box::new(NoClock) };
    let doc = CostDoc::from(&accept::cost_case(layers, k, clock.as_ref())?);
    write_json(&out_dir(cfg)?.join("bench.json"), &doc)?;
    writeln!(
        out,
        "L={layers} K={k}: layer-eval ratio {} (predicted {}), wall-clock {}",
        doc.layer_eval_ratio,
        doc.predicted_ratio,
        doc.wallclock_ratio.map_or("n/a".into(), |w| format!("{w:.3}"))
    )?;
    Ok(())
}

fn cmd_accept(cfg: &RunConfig, cache: Option<&Path>, timing: bool, out: &mut dyn Write) -> Result<(), CliError> {
    let recipe = DemoRecipe::default();
    let l = recipe.model.num_layers;
    cfg.boundary(l)?;
    cfg.contrast()?;
    let cache = cache.map_or_else(|| cfg.out_dir.join("cache"), Path::to_path_buf);
    let demo = demo::load_or_build(&recipe, &cache, &mut |s, _| {
        if s % 500 == 0 {
            eprintln!("training demo model: step {s}");
        }
    })?;
    let clock: Box<dyn Clock> = if timing { Box::new(StdClock::new()) } else { Box::new(NoClock) };
    let results = accept::run_all(&demo, clock.as_ref())?;
    for r in &results {
        writeln!(out, "{}", r.line())?;
    }
    let failed: Vec<String> = results.iter().filter(|r| !r.passed).map(|r| r.id.to_string()).collect();
    if failed.is_empty() {
        writeln!(out, "all {} criteria passed", results.len())?;
        Ok(())
    } else {
        Err(CliError::AcceptFailed(format!("criteria {}", failed.join(", "))))
    }
}
