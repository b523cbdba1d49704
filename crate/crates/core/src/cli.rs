//! Command-line front end. `run` returns the process exit code so tests can
//! drive it in-process.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{Map, Value};

use crate::bmin::AttentionDump;
use crate::config::{Ablation, Protocol, TrainConfig};
use crate::corpus::{generate_synthetic, load_dialogs, DialogSet, LabelSource, SyntheticSpec};
use crate::error::{BmimError, Result};
use crate::evaluation::{ablate, evaluate, AverageMode, EvalOptions};
use crate::heads::export_label_embeddings;
use crate::io::write_atomic;
use crate::training::{gradcheck, load_checkpoint, save_checkpoint, small_batch, train};

/// Exit code for a gradient check above its threshold.
pub const EXIT_GRADCHECK: i32 = 4;

/// Environment variable consulted when no seed is given anywhere else.
pub const SEED_ENV: &str = "BMIM_SEED";

#[derive(Debug, Parser)]
#[command(name = "bmim", version, about = "Joint dialog sentiment and act classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic corpus with a known sentiment/act dependency as JSONL.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint directory.
    Train(TrainArgs),
    /// Score a checkpoint on a corpus and emit a metrics report.
    Eval(EvalArgs),
    /// Train ablated variants and compare them on a test corpus.
    Ablate(AblateArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Write the learned label embeddings as TSV.
    ExportEmbeddings(ExportArgs),
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Flat JSON config with dotted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set model.d=64`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    dialogs: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Probability that an utterance carries its cue tokens.
    #[arg(long, default_value_t = 1.0)]
    cue_strength: f64,
    /// Leave out sentiment cue tokens; sentiment is then only inferable via the act.
    #[arg(long)]
    no_sentiment_cues: bool,
    /// Full generator recipe as JSON; overrides the flags above except the seed.
    #[arg(long)]
    spec: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    train: PathBuf,
    /// Selection corpus; the training corpus is used when omitted.
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Checkpoint directory to create.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct MetricArgs {
    /// Preset for both tasks; individual flags below take precedence.
    #[arg(long)]
    protocol: Option<Protocol>,
    /// Averaging for both tasks.
    #[arg(long)]
    mode: Option<AverageMode>,
    #[arg(long)]
    exclude_neutral: bool,
    /// Remove neutral-gold utterances before scoring sentiment.
    #[arg(long)]
    drop_neutral_utterances: bool,
}

impl MetricArgs {
    fn options(&self, fallback: Protocol) -> EvalOptions {
        let mut opts = match (self.protocol, self.mode) {
            (_, Some(mode)) => EvalOptions::uniform(mode, false),
            (Some(p), None) => EvalOptions::protocol(p),
            (None, None) => EvalOptions::protocol(fallback),
        };
        opts.exclude_neutral |= self.exclude_neutral;
        opts.drop_neutral_utterances |= self.drop_neutral_utterances;
        opts
    }
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    metrics: MetricArgs,
    /// Write the report JSON here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write per-dialog attention weights (per hop and direction) as JSON.
    #[arg(long)]
    attention_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    test: PathBuf,
    /// Comma-separated variants; each is `full` or flags joined by `+`.
    #[arg(long, default_value = "full,no_bmin,no_cl_dl,no_fsn", value_delimiter = ',')]
    variants: Vec<String>,
    #[command(flatten)]
    metrics: MetricArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Corpus to draw the batch from; a synthetic one is generated otherwise.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Bound on the relative error of resolvable coordinates.
    #[arg(long, default_value_t = 1e-4)]
    threshold: f64,
    /// Bound on the absolute error of coordinates with tiny gradients.
    #[arg(long, default_value_t = 1e-9)]
    abs_threshold: f64,
    /// Seed for initialisation and coordinate sampling; defaults to `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::ExportEmbeddings(a) => export_cmd(a),
    }
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| BmimError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

/// File config, then `--set` overrides; `BMIM_SEED` fills `train.seed` only
/// when neither mentions it.
fn resolve_config(args: &ConfigArgs) -> Result<TrainConfig> {
    let mut flat = Map::new();
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).map_err(|e| BmimError::io(path, e))?;
        match serde_json::from_str::<Value>(&text) {
            Ok(Value::Object(map)) => flat = map,
            Ok(_) => return Err(BmimError::Config(format!("{}: config must be a JSON object", path.display()))),
            Err(e) => return Err(BmimError::Config(format!("{}: {e}", path.display()))),
        }
    }
    let seed_given =
        flat.contains_key("train.seed") || args.overrides.iter().any(|o| o.trim_start().starts_with("train.seed="));
    if !seed_given {
        if let Some(seed) = env_seed()? {
            flat.insert("train.seed".into(), Value::from(seed));
        }
    }
    TrainConfig::from_flat(&flat)?.with_overrides(&args.overrides)
}

fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match path {
        Some(p) => write_atomic(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_train_dev(train_path: &Path, dev_path: Option<&PathBuf>) -> Result<(DialogSet, DialogSet)> {
    let train_set = load_dialogs(train_path, &LabelSource::Infer)?;
    let dev = match dev_path {
        Some(p) => load_dialogs(p, &LabelSource::Fixed(train_set.label_space.clone()))?,
        None => train_set.clone(),
    };
    Ok((train_set, dev))
}

fn synth(a: SynthArgs) -> Result<i32> {
    let seed = a.seed.or(env_seed()?).unwrap_or(0);
    let spec = match &a.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| BmimError::io(path, e))?;
            serde_json::from_str(&text).map_err(|e| BmimError::Config(format!("{}: {e}", path.display())))?
        }
        None => SyntheticSpec {
            cue_strength: a.cue_strength,
            sentiment_cues: !a.no_sentiment_cues,
            ..SyntheticSpec::high_signal(a.dialogs)
        },
    };
    let ds = generate_synthetic(&spec, seed)?;
    write_atomic(&a.out, ds.to_jsonl()?.as_bytes())?;
    eprintln!("wrote {} dialogs ({} utterances) to {}", ds.len(), ds.num_utterances(), a.out.display());
    Ok(0)
}

fn train_cmd(a: TrainArgs) -> Result<i32> {
    let cfg = resolve_config(&a.config)?;
    let (train_set, dev) = load_train_dev(&a.train, a.dev.as_ref())?;
    let ckpt = train(&cfg, &train_set, &dev)?;
    save_checkpoint(&ckpt, &a.out)?;
    if let Some(best) = ckpt.history.best() {
        eprintln!(
            "best epoch {} of {}: DSC F1 {:.4}, DAR F1 {:.4}",
            best.epoch + 1,
            ckpt.history.epochs.len(),
            best.dev.dsc_f1,
            best.dev.dar_f1
        );
    }
    eprintln!("checkpoint written to {}", a.out.display());
    Ok(0)
}

#[derive(Serialize)]
struct DialogAttention {
    dialog_id: String,
    #[serde(flatten)]
    attention: AttentionDump,
}

fn eval_cmd(a: EvalArgs) -> Result<i32> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let model = &ckpt.model;
    let data = load_dialogs(&a.data, &LabelSource::Fixed(model.labels.clone()))?;
    let opts = a.metrics.options(model.config.train.protocol);
    let report = evaluate(model, &data, &opts)?;
    eprint!("{}", report.to_text());
    write_json(a.out.as_deref(), &report)?;
    if let Some(path) = &a.attention_out {
        let dumps = data
            .dialogs
            .iter()
            .map(|d| {
                Ok(DialogAttention {
                    dialog_id: d.id.clone(),
                    attention: model.attention(d)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        write_json(Some(path), &dumps)?;
    }
    Ok(0)
}

fn ablate_cmd(a: AblateArgs) -> Result<i32> {
    let cfg = resolve_config(&a.config)?;
    let variants = a
        .variants
        .iter()
        .map(|v| v.parse::<Ablation>())
        .collect::<Result<Vec<_>>>()?;
    let (train_set, dev) = load_train_dev(&a.train, a.dev.as_ref())?;
    let test = load_dialogs(&a.test, &LabelSource::Fixed(train_set.label_space.clone()))?;
    let opts = a.metrics.options(cfg.train.protocol);
    let table = ablate(&cfg, &variants, &train_set, &dev, &test, &opts)?;
    print!("{}", table.to_text());
    if let Some(path) = &a.out {
        write_json(Some(path), &table)?;
    }
    Ok(0)
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<i32> {
    let cfg = resolve_config(&a.config)?;
    let seed = a.seed.unwrap_or(cfg.train.seed);
    let source = match &a.data {
        Some(p) => load_dialogs(p, &LabelSource::Infer)?,
        None => generate_synthetic(&SyntheticSpec::high_signal(2), seed)?,
    };
    let batch = small_batch(&source);
    let report = gradcheck(&cfg, &batch, a.step, seed)?;
    write_json(a.out.as_deref(), &report)?;
    let ok = report.max_rel_err < a.threshold && report.max_abs_err_small < a.abs_threshold;
    eprintln!(
        "gradcheck arch {}: max relative error {:.3e} at {}[{}]; max absolute error {:.3e} on {} small-gradient coordinates; {} kinks skipped ({})",
        cfg.arch,
        report.max_rel_err,
        report.worst_parameter_name,
        report.worst_coordinate,
        report.max_abs_err_small,
        report.small_gradient_coordinates,
        report.kinks_skipped,
        if ok { "ok" } else { "above threshold" }
    );
    Ok(if ok { 0 } else { EXIT_GRADCHECK })
}

fn export_cmd(a: ExportArgs) -> Result<i32> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let tsv = export_label_embeddings(ckpt.model.label_embeddings(), &ckpt.model.labels);
    write_atomic(&a.out, tsv.as_bytes())?;
    Ok(0)
}
