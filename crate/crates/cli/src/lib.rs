//! Command implementations behind the `locattn` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use locattn::analysis::{
    self, bias_curves, corpus_gammas, head_bias_scores, report, BiasOptions, Measure, CURVE_THRESHOLDS,
    HEADMAP_THRESHOLD,
};
use locattn::attention::{head_attention_with_mode, millions_truncated};
use locattn::checkpoint;
use locattn::config::PRESET_NAMES;
use locattn::optim::AdamConfig;
use locattn::task::{make_synthetic_task, TaskKind, TaskSpec};
use locattn::train::{train, EpochMetrics, Tagger, TrainConfig};
use locattn::{
    banded_attention, count_attention_params, head_attention, make_mask, seeded_uniform_init, Error, HeadParams, MaskKind,
    MaskMode, Matrix, ModelConfig, Rng,
};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INCOMPATIBLE: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "locattn", version, about = "Local-attention transformer laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the attention parameter count of a preset or config file.
    CountParams(CountParamsArgs),
    /// Train a tagger on a synthetic task.
    Train(TrainArgs),
    /// Sensitivity and attention-bias reports for a checkpoint over a corpus.
    Analyze(AnalyzeArgs),
    /// Time dense masked attention against the banded kernel.
    Bench(BenchArgs),
    /// Write a synthetic dataset as JSON lines.
    GenData(GenDataArgs),
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Named preset (see `count-params --preset help`).
    #[arg(long, conflicts_with = "config")]
    pub preset: Option<String>,
    /// JSON or key-value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl ModelArgs {
    fn resolve(&self) -> locattn::Result<ModelConfig> {
        match (&self.preset, &self.config) {
            (Some(name), _) => locattn::resolve_preset(name),
            (None, Some(path)) => ModelConfig::load(path),
            (None, None) => Err(Error::Config("one of --preset or --config is required".into())),
        }
    }
}

#[derive(Debug, Args)]
pub struct CountParamsArgs {
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, default_value = "local_parity")]
    pub task: String,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long = "T", default_value_t = 16)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 2)]
    pub vocab: usize,
    #[arg(long, default_value_t = 1000)]
    pub n_train: usize,
    #[arg(long, default_value_t = 500)]
    pub n_test: usize,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Overrides the config's mask mode.
    #[arg(long)]
    pub mask_mode: Option<MaskModeArg>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum MaskModeArg {
    PostSoftmax,
    Renormalized,
}

impl From<MaskModeArg> for MaskMode {
    fn from(m: MaskModeArg) -> Self {
        match m {
            MaskModeArg::PostSoftmax => MaskMode::PostSoftmax,
            MaskModeArg::Renormalized => MaskMode::Renormalized,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Which {
    Sensitivity,
    Bias,
    Both,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum MeasureArg {
    Pre,
    Post,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// JSON-lines corpus with `tokens` and `edges`.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_enum, default_value = "both")]
    pub which: Which,
    #[arg(long)]
    pub out: PathBuf,
    /// Require the checkpoint to match this model.
    #[command(flatten)]
    pub model: ModelArgs,
    /// Take sensitivities of `X + Y` instead of `Y`.
    #[arg(long, value_enum, default_value = "pre")]
    pub measure: MeasureArg,
    #[arg(long, default_value_t = analysis::DEFAULT_WINDOW)]
    pub window: usize,
    /// Leave token i out of its own local subset in bias numerators.
    #[arg(long)]
    pub exclude_self: bool,
    /// Score masked heads on the raw softmax.
    #[arg(long)]
    pub raw_alpha: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long = "T", value_delimiter = ',', default_value = "256,1024,2048")]
    pub seq_lens: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "2")]
    pub k: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    #[arg(long, default_value_t = 64)]
    pub d_v: usize,
    #[arg(long, default_value_t = 64)]
    pub d_l: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value = "local_parity")]
    pub task: String,
    #[arg(long = "T", default_value_t = 16)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 2)]
    pub vocab: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random dependency edges to attach to each sentence.
    #[arg(long, default_value_t = 0)]
    pub edges: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// A failed command and the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub error: anyhow::Error,
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::UnknownPreset { .. } | Error::UnknownMask(_) | Error::Task(_) | Error::Corpus { .. } => {
            EXIT_USAGE
        }
        Error::Checkpoint(_) => EXIT_INCOMPATIBLE,
        Error::Divergence { .. } => EXIT_DIVERGED,
        _ => 1,
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure { code: exit_code(&e), error: e.into() }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = error.downcast_ref::<Error>().map_or(1, exit_code);
        Failure { code, error }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure { code: 1, error: e.into() }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure { code: EXIT_USAGE, error: anyhow!(msg.into()) }
}

pub type CmdResult<T = ()> = Result<T, Failure>;

#[derive(Debug, Serialize)]
struct Manifest {
    command: &'static str,
    args: serde_json::Value,
    config: Option<ModelConfig>,
    seed: Option<u64>,
    tool_version: &'static str,
    started_at: String,
    finished_at: String,
    outputs: Vec<String>,
    status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

struct Run {
    command: &'static str,
    args: serde_json::Value,
    started: String,
    dir: PathBuf,
    outputs: Vec<String>,
}

impl Run {
    fn start(command: &'static str, args: serde_json::Value, dir: &Path) -> CmdResult<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Run { command, args, started: now(), dir: dir.to_path_buf(), outputs: Vec::new() })
    }

    fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> CmdResult {
        let path = self.dir.join(name);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    fn finish(self, config: Option<ModelConfig>, seed: Option<u64>, error: Option<String>) -> CmdResult {
        let manifest = Manifest {
            command: self.command,
            args: self.args,
            config,
            seed,
            tool_version: env!("CARGO_PKG_VERSION"),
            started_at: self.started,
            finished_at: now(),
            outputs: self.outputs,
            status: if error.is_some() { "failed".into() } else { "ok".into() },
            error,
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(anyhow::Error::from)?;
        fs::write(self.dir.join("manifest.json"), text)?;
        Ok(())
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

pub fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::CountParams(a) => cmd_count_params(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Analyze(a) => cmd_analyze(&a),
        Command::Bench(a) => cmd_bench(&a),
        Command::GenData(a) => cmd_gen_data(&a),
    }
}

/// JSON line printed by `count-params`.
pub fn count_params_json(cfg: &ModelConfig) -> serde_json::Value {
    let n = count_attention_params(cfg);
    json!({
        "preset": cfg.preset.clone().unwrap_or_else(|| "custom".into()),
        "attention_params": n,
        "paper_rounded": millions_truncated(n),
    })
}

pub fn cmd_count_params(a: &CountParamsArgs) -> CmdResult {
    if a.model.preset.as_deref() == Some("help") {
        println!("{}", PRESET_NAMES.join("\n"));
        return Ok(());
    }
    let cfg = a.model.resolve()?;
    cfg.validate()?;
    println!("{}", count_params_json(&cfg));
    Ok(())
}

fn parse_task(name: &str) -> CmdResult<TaskKind> {
    Ok(name.parse::<TaskKind>()?)
}

fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,train_acc,test_acc,loss\n");
    for m in rows {
        out += &format!("{},{},{},{}\n", m.epoch, m.train_acc, m.test_acc, m.loss);
    }
    out
}

/// Seeds for the data draw, weight init and shuffling, all derived from `--seed`.
pub fn seed_streams(seed: u64) -> (u64, u64, u64) {
    (seed, seed.wrapping_add(0x9e37_79b9), seed.wrapping_add(0x7f4a_7c15))
}

pub fn cmd_train(a: &TrainArgs) -> CmdResult {
    let kind = parse_task(&a.task)?;
    let mut cfg = a.model.resolve()?;
    if let Some(mode) = a.mask_mode {
        cfg.mask_mode = mode.into();
    }
    cfg.validate()?;
    let (data_seed, init_seed, shuffle_seed) = seed_streams(a.seed);
    let spec = TaskSpec::new(kind, a.seq_len, a.vocab, a.n_train, a.n_test, data_seed);
    let data = make_synthetic_task(&spec)?;
    let mut tagger: Tagger<f64> = Tagger::init(cfg.clone(), spec.vocab, spec.classes(), &mut Rng::new(init_seed))?;
    let tc = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        adam: AdamConfig { lr: a.lr, ..AdamConfig::default() },
        seed: shuffle_seed,
    };
    let args = json!({
        "task": spec, "preset": a.model.preset, "config": a.model.config, "epochs": a.epochs,
        "batch_size": a.batch_size, "lr": a.lr, "mask_mode": cfg.mask_mode.to_string(),
    });
    let mut run = Run::start("train", args, &a.out)?;
    let mut history = Vec::new();
    let outcome = train(&mut tagger, &data, &tc, |m| history.push(*m));
    run.write("metrics.csv", metrics_csv(&history))?;
    match outcome {
        Ok(_) => {
            run.write("checkpoint.json", checkpoint::to_json(&tagger, Some(&spec))?)?;
            if let Some(last) = history.last() {
                println!("{}", json!({"epochs": last.epoch, "train_acc": last.train_acc, "test_acc": last.test_acc, "loss": last.loss}));
            }
            run.finish(Some(cfg), Some(a.seed), None)
        }
        Err(e) => {
            let msg = format!("{e}; metrics.csv is partial and no checkpoint was written");
            run.finish(Some(cfg), Some(a.seed), Some(msg))?;
            Err(e.into())
        }
    }
}

pub fn cmd_analyze(a: &AnalyzeArgs) -> CmdResult {
    let ck = match (&a.model.preset, &a.model.config) {
        (None, None) => checkpoint::load::<f64>(&a.checkpoint)?,
        _ => {
            let mut expected = a.model.resolve()?;
            let stored = checkpoint::load::<f64>(&a.checkpoint)?;
            // presets carry no training-time mode override; compare the rest
            expected.mask_mode = stored.tagger.config().mask_mode;
            checkpoint::load_for(&a.checkpoint, &expected)?
        }
    };
    let corpus = analysis::load_corpus(&a.corpus)?;
    let tagger = &ck.tagger;
    let opts = BiasOptions { window: a.window, include_self: !a.exclude_self, raw_alpha: a.raw_alpha };
    let measure = match a.measure {
        MeasureArg::Pre => Measure::PreResidual,
        MeasureArg::Post => Measure::PostResidual,
    };
    let args = json!({
        "checkpoint": a.checkpoint, "corpus": a.corpus, "which": format!("{:?}", a.which).to_lowercase(),
        "measure": measure, "bias": opts,
    });
    let mut run = Run::start("analyze", args, &a.out)?;
    let mut full = serde_json::Map::new();
    full.insert("sentences".into(), json!(corpus.len()));
    if matches!(a.which, Which::Sensitivity | Which::Both) {
        let gammas = corpus_gammas(tagger, &corpus, measure, a.window)?;
        run.write("gamma.csv", report::gamma_csv(&gammas))?;
        full.insert("gamma".into(), serde_json::to_value(&gammas).map_err(anyhow::Error::from)?);
    }
    if matches!(a.which, Which::Bias | Which::Both) {
        let scores = head_bias_scores(tagger, &corpus, &opts)?;
        let curve = bias_curves(&scores, &CURVE_THRESHOLDS);
        run.write("bias.csv", report::bias_csv(&scores))?;
        run.write("curve.csv", report::curve_csv(&curve))?;
        run.write("headmap.json", report::headmap_json(&scores, HEADMAP_THRESHOLD))?;
        full.insert("heads".into(), serde_json::to_value(&scores).map_err(anyhow::Error::from)?);
        full.insert("curve".into(), serde_json::to_value(&curve).map_err(anyhow::Error::from)?);
    }
    run.write("report.json", serde_json::to_string_pretty(&full).map_err(anyhow::Error::from)?)?;
    run.finish(Some(tagger.config().clone()), None, None)
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub seq_len: usize,
    pub k: usize,
    pub dense_median_s: f64,
    pub banded_median_s: f64,
    /// Largest |banded − dense renormalized| over context entries.
    pub max_deviation: f64,
}

/// Times one `(T, k)` cell single-threaded.
pub fn bench_cell(seq_len: usize, k: usize, d_v: usize, d_l: usize, reps: usize, seed: u64) -> locattn::Result<BenchRow> {
    let mut rng = Rng::new(seed);
    let x: Matrix<f64> = seeded_uniform_init(seq_len, d_v, 1.0, &mut rng);
    let w: Vec<Matrix<f64>> = (0..3).map(|_| seeded_uniform_init(d_v, d_l, 0.2, &mut rng)).collect();
    let p = HeadParams { w_q: &w[0], w_k: &w[1], w_v: &w[2] };
    let mask = make_mask(MaskKind::Band(k), seq_len)?;
    let mut dense = Vec::with_capacity(reps);
    let mut banded = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t0 = Instant::now();
        let out = head_attention(&x, p, Some(&mask), d_l)?;
        dense.push(t0.elapsed().as_secs_f64());
        std::hint::black_box(out);
        let t0 = Instant::now();
        let out = banded_attention(&x, p, k, d_l)?;
        banded.push(t0.elapsed().as_secs_f64());
        std::hint::black_box(out);
    }
    let (reference, _) = head_attention_with_mode(&x, p, Some(&mask), d_l, MaskMode::Renormalized)?;
    let (fast, _) = banded_attention(&x, p, k, d_l)?;
    Ok(BenchRow {
        seq_len,
        k,
        dense_median_s: median(&mut dense),
        banded_median_s: median(&mut banded),
        max_deviation: reference.max_abs_diff(&fast),
    })
}

pub fn cmd_bench(a: &BenchArgs) -> CmdResult {
    if a.reps < 3 {
        return Err(usage(format!("--reps must be at least 3 to take a median, got {}", a.reps)));
    }
    if a.k.contains(&0) || a.seq_lens.contains(&0) {
        return Err(usage("--T and --k values must be positive"));
    }
    let args = json!({"T": a.seq_lens, "k": a.k, "reps": a.reps, "d_v": a.d_v, "d_l": a.d_l});
    let mut run = Run::start("bench", args, &a.out)?;
    let mut csv = String::from("T,k,dense_median_s,banded_median_s,speedup,max_deviation\n");
    for &t in &a.seq_lens {
        for &k in &a.k {
            let row = bench_cell(t, k, a.d_v, a.d_l, a.reps, a.seed)?;
            log::info!("T={t} k={k}: dense {:.4}s banded {:.6}s", row.dense_median_s, row.banded_median_s);
            csv += &format!(
                "{},{},{},{},{},{}\n",
                row.seq_len,
                row.k,
                row.dense_median_s,
                row.banded_median_s,
                row.dense_median_s / row.banded_median_s,
                row.max_deviation
            );
        }
    }
    run.write("bench.csv", csv)?;
    run.finish(None, Some(a.seed), None)
}

/// `n` distinct random non-self pairs (fewer if the sentence is too short).
fn random_edges(t: usize, n: usize, rng: &mut Rng) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    let max = t * t.saturating_sub(1) / 2;
    while edges.len() < n.min(max) {
        let (a, b) = (rng.below(t), rng.below(t));
        let e = (a.min(b), a.max(b));
        if a != b && !edges.contains(&e) {
            edges.push(e);
        }
    }
    edges
}

pub fn cmd_gen_data(a: &GenDataArgs) -> CmdResult {
    let kind = parse_task(&a.task)?;
    let spec = TaskSpec::new(kind, a.seq_len, a.vocab, a.n, 0, a.seed);
    let data = make_synthetic_task(&spec)?;
    let mut rng = Rng::new(a.seed.wrapping_add(1));
    let mut text = String::new();
    for ex in &data.train {
        let line = json!({
            "tokens": ex.tokens.iter().map(|t| t.to_string()).collect::<Vec<_>>(),
            "edges": random_edges(a.seq_len, a.edges, &mut rng),
            "labels": ex.labels,
        });
        text += &line.to_string();
        text.push('\n');
    }
    let mut run = Run::start("gen-data", json!({"task": spec, "edges": a.edges}), &a.out)?;
    run.write("data.jsonl", text)?;
    run.finish(None, Some(a.seed), None)
}
