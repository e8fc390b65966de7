//! Command-line driver: `count`, `train`, `eval`, `generate`, `ngram` and
//! `bench`.
//!
//! Every option can also come from a JSON file passed with `--config`;
//! flags given on the command line win. Each run writes `run.json` into the
//! output directory with the resolved options, which can be fed back
//! through `--config` to repeat the run.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::bench::{self, BenchOptions, Workload};
use crate::corpus::{self, synth, Corpus, Vocabulary};
use crate::diffcore::{DType, Real};
use crate::evalgen::{self, GenSpec};
use crate::model::{self, Family, InitOptions, Model, ModelConfig};
use crate::reservoir::DriveMode;
use crate::trainer::{self, LogRecord, ShardEval, StateSource, TrainObserver, TrainPlan};
use crate::{Error, Result};

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "RESLM_OUT";

/// Expected trainable-parameter counts at a 59-symbol vocabulary.
pub const TABLE1: [(Family, [usize; 5]); 3] = [
    (Family::Transformer, [15067, 30299, 45083, 105275, 155803]),
    (Family::Reservoir, [14809, 29559, 44309, 103309, 153459]),
    (Family::Aerc, [15464, 31124, 45259, 102809, 155459]),
];

#[derive(Debug, Parser)]
#[command(
    name = "reslm",
    version,
    about = "Reservoir and transformer character language models"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct GlobalArgs {
    /// Output directory (default: $RESLM_OUT, else ./runs)
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// JSON file with options; command-line flags override it
    #[arg(long, global = true)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Worker threads for parallel sections
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Fixed reduction order and wall-clock-free logs
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Base seed for every random stream
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Trainable-parameter counts
    Count(CountArgs),
    /// Train a model on a corpus
    Train(TrainArgs),
    /// Mean test-shard cross-entropy of a checkpoint
    Eval(EvalArgs),
    /// Closed-loop text generation
    Generate(GenerateArgs),
    /// N-gram overlap of generated text against a reference
    Ngram(NgramArgs),
    /// Time training and inference across model sizes
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyArg {
    Reservoir,
    Aerc,
    Transformer,
}

impl From<FamilyArg> for Family {
    fn from(f: FamilyArg) -> Self {
        match f {
            FamilyArg::Reservoir => Family::Reservoir,
            FamilyArg::Aerc => Family::Aerc,
            FamilyArg::Transformer => Family::Transformer,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// Fills every `None` field of `$dst` from `$src`.
macro_rules! fill {
    ($dst:expr, $src:expr; $($f:ident),* $(,)?) => {
        $( if $dst.$f.is_none() { $dst.$f = $src.$f.clone(); } )*
    };
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelArgs {
    #[arg(long, value_enum)]
    pub family: Option<FamilyArg>,
    /// Reservoir size N
    #[arg(long)]
    pub n: Option<usize>,
    /// AERC hidden width H
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Transformer feed-forward width
    #[arg(long = "dh")]
    pub dh: Option<usize>,
    /// Transformer attention heads
    #[arg(long)]
    pub heads: Option<usize>,
    /// Transformer layers
    #[arg(long)]
    pub layers: Option<usize>,
}

impl ModelArgs {
    fn merge(mut self, file: &ModelArgs) -> Self {
        fill!(self, file; family, n, hidden, dh, heads, layers);
        self
    }

    pub fn resolve(&self) -> Result<ModelConfig> {
        let family = self
            .family
            .ok_or_else(|| Error::Config("--family is required".into()))?;
        let need = |v: Option<usize>, flag: &str| {
            v.ok_or_else(|| Error::Config(format!("--{flag} is required for family {family:?}")))
        };
        let cfg = match family {
            FamilyArg::Reservoir => ModelConfig::Reservoir {
                n: need(self.n, "n")?,
            },
            FamilyArg::Aerc => ModelConfig::Aerc {
                n: need(self.n, "n")?,
                hidden: need(self.hidden, "hidden")?,
            },
            FamilyArg::Transformer => ModelConfig::Transformer {
                d_ff: need(self.dh, "dh")?,
                heads: need(self.heads, "heads")?,
                layers: need(self.layers, "layers")?,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct CountArgs {
    /// Check all fifteen reference configurations
    #[arg(long)]
    pub table1: bool,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    /// Vocabulary size
    #[arg(long, default_value_t = 59)]
    pub vocab: usize,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusArgs {
    /// UTF-8 corpus file
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Index of the held-out shard (0-5)
    #[arg(long)]
    pub test_shard: Option<usize>,
}

impl CorpusArgs {
    fn merge(mut self, file: &CorpusArgs) -> Self {
        fill!(self, file; corpus, test_shard);
        self
    }

    fn load(&self) -> Result<Corpus> {
        let path = self
            .corpus
            .as_ref()
            .ok_or_else(|| Error::Config("--corpus is required".into()))?;
        Corpus::load(path, self.test_shard.unwrap_or(corpus::DEFAULT_TEST_SHARD))
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub corpus: CorpusArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub shard_epochs: Option<usize>,
    #[arg(long)]
    pub passes: Option<usize>,
    /// Steps between test probes (0 disables)
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub probe_windows: Option<usize>,
    /// Distance between training window starts
    #[arg(long)]
    pub stride: Option<usize>,
    /// Largest singular value of the recurrent matrix
    #[arg(long)]
    pub rho: Option<f64>,
    /// Drive each shard continuously, dropping windows before this offset
    /// (32 when given without a value)
    #[arg(long, num_args = 0..=1, default_missing_value = "32")]
    pub washout: Option<usize>,
    /// Recompute reservoir states for every batch instead of a bank
    #[arg(long)]
    pub on_the_fly: bool,
    /// Memory cap for one state bank, in MiB
    #[arg(long)]
    pub memory_cap_mib: Option<usize>,
    #[arg(long, value_enum)]
    pub precision: Option<Precision>,
    /// Write a checkpoint after every K shards (0: final only)
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub corpus: CorpusArgs,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct GenArgs {
    #[arg(long)]
    pub seed_text: Option<String>,
    #[arg(long)]
    pub length: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub rng_seed: Option<u64>,
    /// Argmax decoding
    #[arg(long)]
    pub greedy: bool,
    /// Keep one running reservoir state
    #[arg(long)]
    pub continuous_state: bool,
}

impl GenArgs {
    fn merge(mut self, file: &GenArgs) -> Self {
        fill!(self, file; seed_text, length, temperature, rng_seed);
        self.greedy |= file.greedy;
        self.continuous_state |= file.continuous_state;
        self
    }

    fn spec(&self, seed: u64) -> GenSpec {
        let d = GenSpec::default();
        GenSpec {
            seed_text: self.seed_text.clone().unwrap_or(d.seed_text),
            length: self.length.unwrap_or(d.length),
            temperature: self.temperature.unwrap_or(d.temperature),
            rng_seed: self.rng_seed.unwrap_or(seed),
            greedy: self.greedy,
            continuous_state: self.continuous_state,
        }
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub gen: GenArgs,
    /// Also write the text to this file
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct NgramArgs {
    /// N-gram orders (repeatable)
    #[arg(long = "n")]
    pub n: Vec<usize>,
    /// Score this text file instead of generating
    #[arg(long)]
    pub generated: Option<PathBuf>,
    /// Reference text file (default: the corpus test shard)
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long)]
    pub gen_length: Option<usize>,
    #[arg(long)]
    pub rng_seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchArgs {
    /// Text to draw windows from (default: built-in sample text)
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Families to time (repeatable; default all)
    #[arg(long = "family", value_enum)]
    pub families: Vec<FamilyArg>,
    #[arg(long)]
    pub train_batches: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub infer_chars: Option<usize>,
    #[arg(long)]
    pub repetitions: Option<usize>,
    /// Also report an affine fit with intercept
    #[arg(long)]
    pub affine: bool,
}

/// Everything a run resolved to, written as `run.json`.
#[derive(Debug, Serialize)]
struct RunRecord<'a, A: Serialize> {
    subcommand: &'a str,
    version: &'a str,
    #[serde(flatten)]
    global: &'a GlobalArgs,
    #[serde(flatten)]
    args: &'a A,
    resolved: serde_json::Value,
}

struct Ctx<'w> {
    global: GlobalArgs,
    file: serde_json::Value,
    stdout: &'w mut dyn Write,
}

impl Ctx<'_> {
    fn file_section<A: for<'de> Deserialize<'de> + Default>(&self) -> Result<A> {
        if self.file.is_null() {
            return Ok(A::default());
        }
        serde_json::from_value(self.file.clone())
            .map_err(|e| Error::Config(format!("config file: {e}")))
    }

    fn seed(&self) -> u64 {
        self.global.seed.unwrap_or(0)
    }

    fn out_dir(&self) -> Result<PathBuf> {
        let dir = self
            .global
            .out
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(dir)
    }

    fn say(&mut self, line: impl AsRef<str>) -> Result<()> {
        writeln!(self.stdout, "{}", line.as_ref()).map_err(|e| Error::io("<stdout>", e))
    }

    fn write_record<A: Serialize>(
        &self,
        dir: &Path,
        subcommand: &str,
        args: &A,
        resolved: serde_json::Value,
    ) -> Result<()> {
        let rec = RunRecord {
            subcommand,
            version: env!("CARGO_PKG_VERSION"),
            global: &self.global,
            args,
            resolved,
        };
        write_file(
            &dir.join("run.json"),
            serde_json::to_string_pretty(&rec).expect("serializes"),
        )
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    corpus::load_and_normalize(path)
}

/// Parses `args` and runs the command, writing human output to `stdout`.
pub fn run_from<I, S>(args: I, stdout: &mut dyn Write) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::Usage(e.to_string()))?;
    run(cli, stdout)
}

pub fn run(cli: Cli, stdout: &mut dyn Write) -> Result<()> {
    let file = match &cli.global.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => serde_json::Value::Null,
    };
    let mut global = cli.global;
    if !file.is_null() {
        let g: GlobalArgs = serde_json::from_value(file.clone())
            .map_err(|e| Error::Config(format!("config file: {e}")))?;
        fill!(global, g; out, threads, seed);
        global.deterministic |= g.deterministic;
    }
    if let Some(t) = global.threads {
        if t == 0 {
            return Err(Error::Config("--threads must be >= 1".into()));
        }
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global();
    }
    let mut ctx = Ctx {
        global,
        file,
        stdout,
    };
    match cli.command {
        Command::Count(a) => cmd_count(&mut ctx, a),
        Command::Train(a) => cmd_train(&mut ctx, a),
        Command::Eval(a) => cmd_eval(&mut ctx, a),
        Command::Generate(a) => cmd_generate(&mut ctx, a),
        Command::Ngram(a) => cmd_ngram(&mut ctx, a),
        Command::Bench(a) => cmd_bench(&mut ctx, a),
    }
}

/// Process entry point; returns the exit status.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let mut out = std::io::stdout().lock();
    match run(cli, &mut out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Rows of the reference table as `(config, expected, actual)`.
pub fn table1_rows(vocab: usize) -> Result<Vec<(ModelConfig, usize, usize)>> {
    let mut rows = Vec::new();
    for (family, counts) in TABLE1 {
        for (cfg, want) in ModelConfig::table(family).into_iter().zip(counts) {
            rows.push((cfg, want, cfg.count_parameters(vocab)?));
        }
    }
    Ok(rows)
}

fn cmd_count(ctx: &mut Ctx, args: CountArgs) -> Result<()> {
    if args.table1 {
        let mut failures = 0;
        for (cfg, want, got) in table1_rows(args.vocab)? {
            let verdict = if want == got { "PASS" } else { "FAIL" };
            failures += usize::from(want != got);
            ctx.say(format!(
                "{:<36} {:>7} expected {:>7} {verdict}",
                cfg.describe(),
                got,
                want
            ))?;
        }
        if failures > 0 {
            return Err(Error::Config(format!(
                "{failures} parameter counts differ from the table"
            )));
        }
        return Ok(());
    }
    let file: CountArgs = ctx.file_section()?;
    let cfg = args.model.merge(&file.model).resolve()?;
    let count = cfg.count_parameters(args.vocab)?;
    ctx.say(count.to_string())
}

struct CsvObserver {
    file: fs::File,
    path: PathBuf,
    dir: PathBuf,
    every: usize,
    shards_done: usize,
}

impl<T: Real> TrainObserver<T> for CsvObserver {
    fn record(&mut self, r: &LogRecord) -> Result<()> {
        writeln!(self.file, "{}", r.csv_line()).map_err(|e| Error::io(&self.path, e))
    }

    fn shard_done(&mut self, eval: Option<&ShardEval>, model: &Model<T>) -> Result<()> {
        self.shards_done += 1;
        self.file.flush().map_err(|e| Error::io(&self.path, e))?;
        if self.every > 0 && self.shards_done.is_multiple_of(self.every) {
            let name = match eval {
                Some(e) => format!("checkpoint-pass{}-shard{}.rblm", e.pass, e.shard),
                None => format!("checkpoint-{}.rblm", self.shards_done),
            };
            model.save(self.dir.join(name))?;
        }
        Ok(())
    }
}

fn cmd_train(ctx: &mut Ctx, args: TrainArgs) -> Result<()> {
    let file: TrainArgs = ctx.file_section()?;
    let mut a = args;
    a.corpus = a.corpus.merge(&file.corpus);
    a.model = a.model.merge(&file.model);
    fill!(a, file; batch_size, lr, shard_epochs, passes, eval_every, probe_windows, stride,
        rho, washout, memory_cap_mib, precision, checkpoint_every);
    a.on_the_fly |= file.on_the_fly;
    match a.precision.unwrap_or(Precision::F32) {
        Precision::F32 => train_typed::<f32>(ctx, a),
        Precision::F64 => train_typed::<f64>(ctx, a),
    }
}

fn train_typed<T: Real>(ctx: &mut Ctx, a: TrainArgs) -> Result<()> {
    let config = a.model.resolve()?;
    let corpus = a.corpus.load()?;
    let d = TrainPlan::default();
    let plan = TrainPlan {
        batch_size: a.batch_size.unwrap_or(d.batch_size),
        lr: a.lr.unwrap_or(d.lr),
        shard_epochs: a.shard_epochs.unwrap_or(d.shard_epochs),
        full_passes: a.passes.unwrap_or(d.full_passes),
        seed: ctx.seed(),
        eval_every: a.eval_every.unwrap_or(d.eval_every),
        probe_windows: a.probe_windows.unwrap_or(d.probe_windows),
        eval_at_shard_end: true,
        deterministic: ctx.global.deterministic,
        stride: a.stride.unwrap_or(d.stride),
        state_source: if a.on_the_fly {
            StateSource::OnTheFly
        } else {
            StateSource::Bank
        },
        memory_cap: a.memory_cap_mib.map(|m| m << 20).unwrap_or(d.memory_cap),
    };
    plan.validate()?;
    let init = InitOptions {
        seed: ctx.seed(),
        rho: a.rho.unwrap_or(InitOptions::default().rho),
        drive_mode: match a.washout {
            Some(washout) => DriveMode::Continuous { washout },
            None => DriveMode::ZeroReset,
        },
    };
    let mut model = Model::<T>::new(config, corpus.vocab.clone(), init)?;
    let dir = ctx.out_dir()?;
    ctx.write_record(
        &dir,
        "train",
        &a,
        serde_json::json!({
            "model": config,
            "init": init,
            "plan": plan,
            "precision": T::DTYPE,
            "trainable_parameters": model.trainable_parameters(),
            "decisions": decision_flags(),
        }),
    )?;
    let csv_path = dir.join("runlog.csv");
    let mut csv = fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    writeln!(csv, "{}", trainer::CSV_HEADER).map_err(|e| Error::io(&csv_path, e))?;
    let mut obs = CsvObserver {
        file: csv,
        path: csv_path,
        dir: dir.clone(),
        every: a.checkpoint_every.unwrap_or(0),
        shards_done: 0,
    };
    ctx.say(format!(
        "training {} ({} trainable parameters) on {} symbols",
        config.describe(),
        model.trainable_parameters(),
        corpus.vocab.len()
    ))?;
    let log = match trainer::train_observed(&mut model, &corpus, &plan, &mut obs) {
        Ok(log) => log,
        Err(Error::Diverged {
            step,
            loss,
            last_good,
        }) => {
            if let Some(bytes) = &last_good {
                write_file(&dir.join("last_good.rblm"), bytes)?;
            }
            return Err(Error::Diverged {
                step,
                loss,
                last_good,
            });
        }
        Err(e) => return Err(e),
    };
    model.save(dir.join("model.rblm"))?;
    let mut sidecar = log.meta.clone();
    sidecar["shard_evals"] = serde_json::to_value(&log.shard_evals).expect("serializes");
    sidecar["decisions"] = decision_flags();
    if !plan.deterministic {
        sidecar["wall_seconds"] = log.wall_seconds.into();
    }
    write_file(
        &dir.join("runlog.json"),
        serde_json::to_string_pretty(&sidecar).expect("serializes"),
    )?;
    if let Some(ce) = log.final_test_ce() {
        ctx.say(format!("final test cross-entropy {ce:.6}"))?;
    }
    ctx.say(format!("wrote {}", dir.display()))
}

fn decision_flags() -> serde_json::Value {
    serde_json::json!({
        "positional_encoding": "sinusoidal",
        "transformer_norm": "pre-norm, no final layer norm",
        "transformer_loss": "last position only",
        "reservoir_drive_default": "zero state per window",
        "batch_order": "uniform shuffle per shard epoch",
        "test_probe": "fixed random subsample; full test shard at shard end",
        "divergence_guard": "loss > 3 ln V or non-finite",
        "unigram_baseline": "add-one smoothing on training shards",
    })
}

fn checkpoint_path(p: &Option<PathBuf>) -> Result<&Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config("--checkpoint is required".into()))
}

/// Loads a checkpoint at its stored precision and runs `f` on it.
macro_rules! with_model {
    ($path:expr, |$m:ident| $body:expr) => {
        match model::checkpoint_precision($path)? {
            DType::F64 => {
                let $m = Model::<f64>::load($path)?;
                $body
            }
            _ => {
                let $m = Model::<f32>::load($path)?;
                $body
            }
        }
    };
}

fn cmd_eval(ctx: &mut Ctx, args: EvalArgs) -> Result<()> {
    let file: EvalArgs = ctx.file_section()?;
    let mut a = args;
    fill!(a, file; checkpoint);
    a.corpus = a.corpus.merge(&file.corpus);
    let path = checkpoint_path(&a.checkpoint)?.to_path_buf();
    let corpus = a.corpus.load()?;
    let ce = with_model!(&path, |m| trainer::evaluate(&m, &corpus)?);
    let dir = ctx.out_dir()?;
    ctx.write_record(&dir, "eval", &a, serde_json::json!({ "test_ce": ce }))?;
    ctx.say(format!("{ce}"))
}

fn cmd_generate(ctx: &mut Ctx, args: GenerateArgs) -> Result<()> {
    let file: GenerateArgs = ctx.file_section()?;
    let mut a = args;
    fill!(a, file; checkpoint, output);
    a.gen = a.gen.merge(&file.gen);
    let path = checkpoint_path(&a.checkpoint)?.to_path_buf();
    let spec = a.gen.spec(ctx.seed());
    let text = with_model!(&path, |m| evalgen::generate(&m, &spec)?);
    let dir = ctx.out_dir()?;
    let target = a
        .output
        .clone()
        .unwrap_or_else(|| dir.join("generated.txt"));
    write_file(&target, &text)?;
    ctx.write_record(
        &dir,
        "generate",
        &a,
        serde_json::to_value(&spec).expect("serializes"),
    )?;
    ctx.say(text)
}

fn cmd_ngram(ctx: &mut Ctx, args: NgramArgs) -> Result<()> {
    let file: NgramArgs = ctx.file_section()?;
    let mut a = args;
    if a.n.is_empty() {
        a.n = file.n.clone();
    }
    if a.n.is_empty() {
        a.n = vec![7, 8];
    }
    fill!(a, file; generated, reference, checkpoint, gen_length, rng_seed);
    a.corpus = a.corpus.merge(&file.corpus);
    let reference = match &a.reference {
        Some(p) => read_text(p)?,
        None => {
            let c = a.corpus.load().map_err(|e| match e {
                Error::Config(_) => Error::Config("--reference or --corpus is required".into()),
                other => other,
            })?;
            c.vocab.decode(c.sharded.test_shard())
        }
    };
    let reports = match &a.generated {
        Some(p) => {
            let generated = read_text(p)?;
            a.n.iter()
                .map(|&n| evalgen::ngram_overlap(&generated, &reference, n))
                .collect::<Result<Vec<_>>>()?
        }
        None => {
            let path = checkpoint_path(&a.checkpoint)?.to_path_buf();
            let len = a.gen_length.unwrap_or(evalgen::DEFAULT_GEN_LENGTH);
            let seed = a.rng_seed.unwrap_or(ctx.seed());
            with_model!(&path, |m| evalgen::overlap_sweep(
                &m, &reference, &a.n, len, seed
            )?)
        }
    };
    let dir = ctx.out_dir()?;
    write_file(
        &dir.join("ngram.json"),
        serde_json::to_string_pretty(&reports).expect("serializes"),
    )?;
    ctx.write_record(
        &dir,
        "ngram",
        &a,
        serde_json::to_value(&reports).expect("serializes"),
    )?;
    for r in &reports {
        ctx.say(serde_json::to_string(r).expect("serializes"))?;
    }
    Ok(())
}

fn cmd_bench(ctx: &mut Ctx, args: BenchArgs) -> Result<()> {
    let file: BenchArgs = ctx.file_section()?;
    let mut a = args;
    fill!(a, file; corpus, train_batches, batch_size, infer_chars, repetitions);
    if a.families.is_empty() {
        a.families = file.families.clone();
    }
    a.affine |= file.affine;
    let text = match &a.corpus {
        Some(p) => read_text(p)?,
        None => corpus::normalize(&synth::shakespeare_like(200_000, ctx.seed())),
    };
    let vocab = Vocabulary::build(&text)?;
    let tokens = vocab.encode(&text)?;
    let d = Workload::default();
    let workload = Workload {
        train_batches: a.train_batches.unwrap_or(d.train_batches),
        batch_size: a.batch_size.unwrap_or(d.batch_size),
        infer_chars: a.infer_chars.unwrap_or(d.infer_chars),
    };
    let opts = BenchOptions {
        repetitions: a.repetitions.unwrap_or(3),
        threads: ctx.global.threads.unwrap_or(1),
        seed: ctx.seed(),
        ..BenchOptions::default()
    };
    let families: Vec<Family> = if a.families.is_empty() {
        Family::ALL.to_vec()
    } else {
        a.families.iter().map(|&f| f.into()).collect()
    };
    let configs: Vec<ModelConfig> = families
        .iter()
        .flat_map(|&f| ModelConfig::table(f))
        .collect();
    let dir = ctx.out_dir()?;
    let mut lines = Vec::new();
    let report = bench::sweep::<f32>(&configs, &vocab, &tokens, &workload, &opts, a.affine, |s| {
        eprintln!("{}", s.csv_line());
        lines.push(s.csv_line());
    })?;
    for l in lines {
        ctx.say(l)?;
    }
    write_file(&dir.join("bench.csv"), report.to_csv())?;
    write_file(
        &dir.join("alpha.json"),
        serde_json::to_string_pretty(&report.alpha_json()).expect("serializes"),
    )?;
    ctx.write_record(
        &dir,
        "bench",
        &a,
        serde_json::json!({ "workload": workload, "options": opts, "fits": report.alpha_json() }),
    )?;
    for f in &report.fits {
        ctx.say(format!(
            "alpha {} {} = {:.6}",
            f.family,
            f.phase.name(),
            f.alpha
        ))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> (Result<()>, String) {
        let mut out = Vec::new();
        let r = run_from(
            std::iter::once("reslm").chain(args.iter().copied()),
            &mut out,
        );
        (r, String::from_utf8(out).unwrap())
    }

    #[test]
    fn table1_all_pass() {
        let (r, out) = run_args(&["count", "--table1"]);
        r.unwrap();
        assert_eq!(out.lines().count(), 15);
        assert_eq!(out.matches("PASS").count(), 15);
    }

    #[test]
    fn single_counts() {
        let (r, out) = run_args(&[
            "count",
            "--family",
            "transformer",
            "--dh",
            "72",
            "--heads",
            "8",
            "--layers",
            "8",
        ]);
        r.unwrap();
        assert_eq!(out.trim(), "30299");
        let (r, out) = run_args(&["count", "--family", "aerc", "--n", "75", "--hidden", "19"]);
        r.unwrap();
        assert_eq!(out.trim(), "31124");
    }

    #[test]
    fn invalid_hyperparameters_are_config_errors() {
        let (r, _) = run_args(&[
            "count",
            "--family",
            "transformer",
            "--dh",
            "8",
            "--heads",
            "3",
            "--layers",
            "1",
        ]);
        assert_eq!(r.unwrap_err().exit_code(), 2);
        let (r, _) = run_args(&["count", "--family", "aerc", "--n", "75"]);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn unknown_flags_are_rejected() {
        let (r, _) = run_args(&["count", "--table1", "--bogus"]);
        assert!(matches!(r, Err(Error::Usage(_))));
    }

    #[test]
    fn config_file_is_overridden_by_flags() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.json");
        fs::write(&cfg, r#"{"family":"aerc","n":75,"hidden":13}"#).unwrap();
        let c = cfg.to_str().unwrap();
        let (r, out) = run_args(&["count", "--config", c]);
        r.unwrap();
        assert_eq!(out.trim(), "15464");
        let (r, out) = run_args(&["count", "--config", c, "--hidden", "19"]);
        r.unwrap();
        assert_eq!(out.trim(), "31124");
    }

    #[test]
    fn missing_checkpoint_is_io() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        let (r, _) = run_args(&[
            "generate",
            "--checkpoint",
            "/nonexistent/x.rblm",
            "--out",
            out,
        ]);
        assert_eq!(r.unwrap_err().exit_code(), 3);
    }
}
