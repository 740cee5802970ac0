//! The `alrp` command line.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::composite::Composite;
use crate::error::{Error, Result};
use crate::eval::{self, Explained, Mode, Source};
use crate::explain::{self, ExplainOptions, InitMode, Method};
use crate::latent;
use crate::model::checkpoint::Checkpoint;
use crate::model::tasks::{Task, TaskKind};
use crate::model::train::{train_toy, TrainConfig};
use crate::model::{Arch, Model, ModelInput, NeuronEdit};
use crate::tape::ActivationEdit;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NON_FINITE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "alrp", version, about = "Relevance propagation for toy transformers")]
pub struct Cli {
    /// Worker threads for parallel commands.
    #[arg(long, global = true, env = "ALRP_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a toy model and write a checkpoint.
    Train(TrainArgs),
    /// Attribute one prediction.
    Attribute(AttributeArgs),
    /// Perturbation faithfulness and plausibility over test samples, one CSV row per (method, sample).
    Evaluate(EvaluateArgs),
    /// Side-by-side ΔA table.
    Compare(EvaluateArgs),
    /// Vocabulary projection and reference samples of an FFN neuron.
    InspectNeuron(InspectArgs),
    /// Forward pass with neuron overrides.
    Steer(SteerArgs),
    /// Conservation report of a relevance pass.
    Audit(AuditArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// decoder, encoder-classifier or vit (defaults to the task's architecture).
    #[arg(long)]
    pub arch: Option<String>,
    /// planted_answer, majority_class or patch_shape.
    #[arg(long, default_value = "planted_answer")]
    pub task: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 3e-3)]
    pub lr: f64,
    #[arg(long)]
    pub d_ff: Option<usize>,
    /// Replace dense FFNs by a mixture of this many experts.
    #[arg(long)]
    pub experts: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub top_k: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Write the training metrics here as well as to stdout.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InputArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Whitespace-separated token names or ids.
    #[arg(long, conflicts_with = "sample")]
    pub input: Option<String>,
    /// Index into the checkpoint task's test set.
    #[arg(long)]
    pub sample: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AttributeArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, default_value = "attnlrp")]
    pub method: String,
    /// Preset name or composite file; replaces the method's default composite.
    #[arg(long)]
    pub composite: Option<String>,
    /// Class to explain (defaults to the arg-max logit).
    #[arg(long)]
    pub target: Option<usize>,
    /// logit or one.
    #[arg(long, default_value = "logit")]
    pub init: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write a heatmap image (red positive, blue negative).
    #[arg(long)]
    pub ppm: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Comma-separated methods; `oracle` scores the ground-truth mask.
    #[arg(long, default_value = "attnlrp,cplrp,ixg,random")]
    pub methods: String,
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    /// flip or insert.
    #[arg(long, default_value = "flip")]
    pub mode: String,
    /// Test-set seed (defaults to the checkpoint's training seed).
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write the full report, summary included, as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Neuron as layer:index; when absent, the most relevant neuron for --input/--sample.
    #[arg(long)]
    pub neuron: Option<String>,
    #[arg(long, conflicts_with = "sample")]
    pub input: Option<String>,
    #[arg(long)]
    pub sample: Option<usize>,
    #[arg(long, default_value_t = 5)]
    pub top_n: usize,
    /// Test samples scanned for reference inputs.
    #[arg(long, default_value_t = 200)]
    pub corpus: usize,
    #[arg(long, default_value = "attnlrp")]
    pub composite: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SteerArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// layer:neuron:zero, layer:neuron:set:value or layer:neuron:scale:value; repeatable.
    #[arg(long = "edit")]
    pub edits: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, default_value = "attnlrp")]
    pub composite: String,
    #[arg(long)]
    pub target: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Exit code for an error: 2 for bad invocations, 3 for non-finite values, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) | Error::Config(_) | Error::Input(_) => EXIT_USAGE,
        Error::NonFinite { .. } | Error::Training { .. } => EXIT_NON_FINITE,
        _ => 1,
    }
}

pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    if let Some(n) = cli.threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Train(a) => train(a),
        Command::Attribute(a) => attribute(a),
        Command::Evaluate(a) => evaluate(a, false),
        Command::Compare(a) => evaluate(a, true),
        Command::InspectNeuron(a) => inspect(a),
        Command::Steer(a) => steer(a),
        Command::Audit(a) => audit(a),
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn write_json(path: Option<&Path>, value: &impl serde::Serialize) -> Result<()> {
    let mut out = output(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn parse_arch(s: &str) -> Result<Arch> {
    serde_json::from_value(Value::String(s.to_string()))
        .map_err(|_| Error::InvalidArgument(format!("unknown architecture {s} (decoder, encoder-classifier, vit)")))
}

fn train(a: TrainArgs) -> Result<()> {
    let task = Task::from_kind(TaskKind::parse(&a.task)?);
    let mut config = task.default_model();
    if let Some(arch) = &a.arch {
        let arch = parse_arch(arch)?;
        if arch != config.arch {
            return Err(Error::InvalidArgument(format!(
                "task {} needs a {} model",
                task.kind.name(),
                serde_json::to_value(config.arch)?.as_str().unwrap_or_default()
            )));
        }
    }
    if let Some(d_ff) = a.d_ff {
        config.d_ff = d_ff;
    }
    if let Some(n) = a.experts {
        config = config.with_moe(n, a.top_k);
    }
    config.validate()?;
    let tc = TrainConfig {
        seed: a.seed,
        steps: a.steps,
        batch_size: a.batch_size,
        lr: a.lr,
        ..TrainConfig::default()
    };
    let (model, report) = train_toy(config, &task, &tc)?;
    let meta = json!({ "task": task.kind.name(), "seed": a.seed, "train": report });
    Checkpoint::new(model, meta).save(&a.out)?;
    write_json(None, &report)?;
    if let Some(p) = &a.metrics {
        write_json(Some(p), &report)?;
    }
    Ok(())
}

struct Loaded {
    model: Model,
    task: Task,
    seed: u64,
}

fn load(path: &Path) -> Result<Loaded> {
    let ckpt = Checkpoint::load(path)?;
    let kind = match ckpt.meta.get("task").and_then(Value::as_str) {
        Some(name) => TaskKind::parse(name)?,
        None => match ckpt.model.config.arch {
            Arch::Decoder => TaskKind::PlantedAnswer,
            Arch::EncoderClassifier => TaskKind::MajorityClass,
            Arch::Vit => TaskKind::PatchShape,
        },
    };
    Ok(Loaded {
        seed: ckpt.meta.get("seed").and_then(Value::as_u64).unwrap_or(0),
        model: ckpt.model,
        task: Task::from_kind(kind),
    })
}

fn resolve_input(l: &Loaded, input: Option<&str>, sample: Option<usize>) -> Result<ModelInput> {
    match (input, sample) {
        (Some(text), _) => {
            if l.model.config.arch == Arch::Vit {
                return Err(Error::InvalidArgument("image models take --sample".into()));
            }
            Ok(ModelInput::Tokens(l.task.parse_tokens(text)?))
        }
        (None, Some(i)) => Ok(l.task.test_set(l.seed, i + 1).swap_remove(i).input),
        (None, None) => Err(Error::InvalidArgument("pass --input or --sample".into())),
    }
}

fn target_class(model: &Model, logits: &crate::tensor::Tensor, target: Option<usize>) -> Result<usize> {
    match target {
        Some(t) if t >= logits.last_dim() => Err(Error::InvalidArgument(format!(
            "target {t} outside {} classes",
            logits.last_dim()
        ))),
        Some(t) => Ok(t),
        None => Ok(model.predict(logits)),
    }
}

fn parse_init(s: &str) -> Result<InitMode> {
    match s {
        "logit" => Ok(InitMode::Logit),
        "one" => Ok(InitMode::One),
        other => Err(Error::InvalidArgument(format!("unknown init {other} (logit, one)"))),
    }
}

fn attribute(a: AttributeArgs) -> Result<()> {
    let method = Method::parse(&a.method)?;
    let composite = a.composite.as_deref().map(Composite::resolve).transpose()?;
    let init = parse_init(&a.init)?;
    let l = load(&a.input.ckpt)?;
    let input = resolve_input(&l, a.input.input.as_deref(), a.input.sample)?;
    let emb = l.model.embed(&input)?;
    let logits = l.model.forward(&input)?;
    let class = target_class(&l.model, &logits, a.target)?;
    let target = l.model.target_index(&logits, class);
    let opts = ExplainOptions {
        composite,
        init,
        seed: a.seed,
        ..ExplainOptions::default()
    };
    let attribution = explain::attribute(&l.model, &emb, method, target, &opts)?;
    if let Some(p) = &a.ppm {
        let scores = attribution.scores();
        let grid = match l.model.config.arch {
            Arch::Vit => {
                let side = l.model.config.image_size / l.model.config.patch_size;
                (side, side)
            }
            _ => (1, scores.len()),
        };
        write_ppm(p, &scores, grid, 16)?;
    }
    write_json(a.out.as_deref(), &attribution)
}

fn evaluate(a: EvaluateArgs, table: bool) -> Result<()> {
    let mode = Mode::parse(&a.mode)?;
    let sources = a
        .methods
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| match s {
            "oracle" => Ok(Source::Oracle),
            other => Method::parse(other).map(|m| Source::Method(m, ExplainOptions::default())),
        })
        .collect::<Result<Vec<_>>>()?;
    if sources.is_empty() {
        return Err(Error::InvalidArgument("no methods given".into()));
    }
    let l = load(&a.ckpt)?;
    let samples = l.task.test_set(a.seed.unwrap_or(l.seed), a.samples);
    let report = eval::evaluate(&l.model, &samples, &sources, mode, Explained::Prediction)?;
    if let Some(p) = &a.json {
        std::fs::write(p, report.to_json()?)?;
    }
    let mut out = output(a.out.as_deref())?;
    if table {
        writeln!(
            out,
            "{:<20} {:>18} {:>10} {:>10} {:>7} {:>7}",
            "method", "ΔA (± SEM)", "A_MoRF", "A_LeRF", "top1", "IoU"
        )?;
        for s in &report.summary {
            writeln!(
                out,
                "{:<20} {:>9.4} ± {:<6.4} {:>10.4} {:>10.4} {:>7.3} {:>7.3}",
                s.method, s.delta.mean, s.delta.sem, s.a_morf.mean, s.a_lerf.mean, s.top1, s.iou
            )?;
        }
    } else {
        report.write_csv(&mut out)?;
        for s in &report.summary {
            eprintln!(
                "{}: ΔA {:.4} ± {:.4}, top1 {:.3}, IoU {:.3} (n={})",
                s.method, s.delta.mean, s.delta.sem, s.top1, s.iou, s.n
            );
        }
    }
    Ok(())
}

fn parse_neuron(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::InvalidArgument(format!("neuron must be layer:index, got {s}"));
    let (l, n) = s.split_once(':').ok_or_else(bad)?;
    Ok((l.parse().map_err(|_| bad())?, n.parse().map_err(|_| bad())?))
}

fn inspect(a: InspectArgs) -> Result<()> {
    let composite = Composite::resolve(&a.composite)?;
    let l = load(&a.ckpt)?;
    let (layer, neuron) = match &a.neuron {
        Some(s) => parse_neuron(s)?,
        None => {
            let input = resolve_input(&l, a.input.as_deref(), a.sample)?;
            let emb = l.model.embed(&input)?;
            let logits = l.model.forward(&input)?;
            let target = l.model.target_index(&logits, l.model.predict(&logits));
            let opts = ExplainOptions {
                composite: Some(composite.clone()),
                ..ExplainOptions::default()
            };
            let store = explain::relevance_pass(&l.model, &emb, Method::AttnLrp, target, &opts)?;
            let top = latent::rank_latent_relevance(&l.model, &store, None, 1)?;
            let top = top.first().ok_or_else(|| Error::InvalidArgument("model has no FFN neurons".into()))?;
            (top.layer, top.neuron)
        }
    };
    let top_tokens = match l.model.config.arch {
        Arch::Decoder => latent::top_tokens(&latent::project_to_vocab(&l.model, layer, neuron)?, a.top_n, |t| {
            l.task.token_name(t)
        }),
        _ => Vec::new(),
    };
    let corpus: Vec<ModelInput> = l.task.test_set(l.seed, a.corpus).into_iter().map(|s| s.input).collect();
    let refs = latent::actmax_collect(&l.model, &corpus, layer, neuron, a.top_n, &composite)?;
    let references: Vec<Value> = refs
        .iter()
        .map(|r| {
            let text = match &r.tokens {
                Some(t) => t.iter().map(|&x| l.task.token_name(x)).collect::<Vec<_>>().join(" "),
                None => format!("image {}", r.index),
            };
            json!({ "text": text, "activation": r.activation, "position": r.position, "heatmap": r.heatmap })
        })
        .collect();
    write_json(
        a.out.as_deref(),
        &json!({ "neuron": { "layer": layer, "index": neuron }, "top_tokens": top_tokens, "references": references }),
    )
}

fn parse_edit(s: &str) -> Result<NeuronEdit> {
    let bad = || Error::InvalidArgument(format!("edit must be layer:neuron:zero|set:v|scale:v, got {s}"));
    let parts: Vec<&str> = s.split(':').collect();
    let num = |i: usize| -> Result<f64> { parts.get(i).ok_or_else(bad)?.parse().map_err(|_| bad()) };
    if parts.len() < 3 {
        return Err(bad());
    }
    let edit = match (parts[2], parts.len()) {
        ("zero", 3) => ActivationEdit::Zero,
        ("set", 4) => ActivationEdit::Set(num(3)?),
        ("scale", 4) => ActivationEdit::Scale(num(3)?),
        _ => return Err(bad()),
    };
    Ok(NeuronEdit {
        layer: parts[0].parse().map_err(|_| bad())?,
        neuron: parts[1].parse().map_err(|_| bad())?,
        edit,
    })
}

fn steer(a: SteerArgs) -> Result<()> {
    let edits = a.edits.iter().map(|s| parse_edit(s)).collect::<Result<Vec<_>>>()?;
    let l = load(&a.input.ckpt)?;
    let input = resolve_input(&l, a.input.input.as_deref(), a.input.sample)?;
    let before = l.model.forward(&input)?;
    let after = latent::steer(&l.model, &input, &edits)?;
    let last = |t: &crate::tensor::Tensor| t.row(t.n_rows() - 1).to_vec();
    let name = |c: usize| match l.model.config.arch {
        Arch::Decoder => l.task.token_name(c),
        _ => c.to_string(),
    };
    let (p0, p1) = (l.model.predict(&before), l.model.predict(&after));
    write_json(
        a.out.as_deref(),
        &json!({
            "edits": edits,
            "prediction_before": { "class": p0, "name": name(p0) },
            "prediction_after": { "class": p1, "name": name(p1) },
            "logits_before": last(&before),
            "logits_after": last(&after),
        }),
    )
}

fn audit(a: AuditArgs) -> Result<()> {
    let composite = Composite::resolve(&a.composite)?;
    let l = load(&a.input.ckpt)?;
    let input = resolve_input(&l, a.input.input.as_deref(), a.input.sample)?;
    let emb = l.model.embed(&input)?;
    let logits = l.model.forward(&input)?;
    let class = target_class(&l.model, &logits, a.target)?;
    let opts = ExplainOptions {
        composite: Some(composite),
        ..ExplainOptions::default()
    };
    let store = explain::relevance_pass(&l.model, &emb, Method::AttnLrp, l.model.target_index(&logits, class), &opts)?;
    write_json(a.out.as_deref(), &store.conservation_audit())
}

/// Colour of a relevance value after symmetric normalization to `[-1, 1]`.
pub fn heat_color(v: f64) -> [u8; 3] {
    let v = v.clamp(-1.0, 1.0);
    let fade = |x: f64| (255.0 * (1.0 - x.abs())).round() as u8;
    if v >= 0.0 {
        [255, fade(v), fade(v)]
    } else {
        [fade(v), fade(v), 255]
    }
}

/// Binary PPM of `scores` laid out on a `rows × cols` grid of `cell`-pixel squares.
pub fn write_ppm(path: &Path, scores: &[f64], (rows, cols): (usize, usize), cell: usize) -> Result<()> {
    if rows * cols != scores.len() || cell == 0 {
        return Err(Error::InvalidArgument(format!(
            "{} scores do not fill a {rows}×{cols} grid",
            scores.len()
        )));
    }
    let max = scores.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let norm = if max > 0.0 { max } else { 1.0 };
    let (w, h) = (cols * cell, rows * cell);
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P6\n{w} {h}\n255\n")?;
    for y in 0..h {
        for x in 0..w {
            out.write_all(&heat_color(scores[(y / cell) * cols + x / cell] / norm))?;
        }
    }
    out.flush()?;
    Ok(())
}
