use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use depnet_core::cfe::feature_dims;
use depnet_core::config::Ablations;
use depnet_core::datapipe::{
    build_distance_adjacency, load_manifest, read_adjacency_csv, synth_dataset, tenfold_split, write_atomic,
    AdjacencyRule, ElectrodeLayout, SynthSpec, WindowedSample,
};
use depnet_core::trainer::{
    history_csv, metrics_of, predict_labeled, run_cv, run_fold, CvReport, Dataset, LabeledSample, SubjectResult,
    Trainer,
};
use depnet_core::{Ablation, DomainFeature, ErrorKind, TrainConfig};
use depnet_engine::Tensor;
use log::info;
use serde_json::{json, Map, Value};

#[derive(Parser)]
#[command(name = "depnet", version, about = "EEG depression detection with a domain-adversarial spatio-temporal graph network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset plus a run config pointing at it.
    Synth(SynthArgs),
    /// Print the feature dimensions a config implies.
    Dims(DimsArgs),
    /// Train and evaluate a single cross-validation fold.
    Train(TrainArgs),
    /// Ten-fold cross-subject evaluation with pooled metrics.
    Cv(CvArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Ten-fold evaluation with sectors removed.
    Ablate(CvArgs),
    /// Dump f_SpS, f_TeS, A_FC and A of a checkpoint as CSV.
    ExportFeatures(ExportArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    subjects: usize,
    #[arg(long, default_value_t = 8)]
    channels: usize,
    #[arg(long, default_value_t = 128.0)]
    sample_rate: f64,
    #[arg(long, default_value_t = 32.0)]
    duration: f64,
    #[arg(long, default_value_t = 2.0)]
    separation: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Flags shared by every command that reads a run config.
#[derive(Args, Clone)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides the config's output_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated sectors to remove: tis, lambda_mask, tes, lstm, gtn.
    #[arg(long)]
    ablate: Option<String>,
    #[arg(long)]
    domain_feature: Option<DomainFeature>,
}

#[derive(Args)]
struct DimsArgs {
    #[command(flatten)]
    common: Common,
    /// Window length; read from the dataset when omitted.
    #[arg(long)]
    len: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 0)]
    fold: usize,
}

#[derive(Args)]
struct CvArgs {
    #[command(flatten)]
    common: Common,
    /// Folds trained concurrently.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Score only this fold's test group instead of every subject.
    #[arg(long)]
    fold: Option<usize>,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Export one subject only.
    #[arg(long)]
    subject: Option<String>,
}

/// A malformed or inconsistent run config (exit code 2).
#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

const PATH_KEYS: [&str; 6] = ["dataset", "adjacency", "layout", "adjacency_k", "adjacency_threshold", "output_dir"];

enum AdjacencySource {
    File(PathBuf),
    Layout(PathBuf, AdjacencyRule),
}

struct RunSpec {
    hyper: TrainConfig,
    dataset: Option<PathBuf>,
    adjacency: Option<AdjacencySource>,
    out: Option<PathBuf>,
    /// Config as written to the run directory.
    resolved: Value,
}

fn load_spec(common: &Common) -> Result<RunSpec> {
    let path = &common.config;
    let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    let raw: Value = serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    let Value::Object(mut map) = raw else {
        return Err(config_err(format!("{}: config must be a JSON object", path.display())));
    };
    let base = path.parent().unwrap_or(Path::new("."));
    let mut paths = Map::new();
    for key in PATH_KEYS {
        if let Some(v) = map.remove(key) {
            paths.insert(key.to_string(), v);
        }
    }
    let hyper: TrainConfig = serde_path_to_error::deserialize(Value::Object(map))
        .map_err(|e| config_err(format!("{}: at `{}`: {}", path.display(), e.path(), e.inner())))?;
    let mut hyper = hyper;
    if let Some(seed) = common.seed {
        hyper.seed = seed;
    }
    if let Some(list) = &common.ablate {
        hyper.ablations = Ablations::parse_list(list)?.iter().collect();
    }
    if let Some(df) = common.domain_feature {
        hyper.domain_feature = df;
    }
    hyper.validate()?;

    let get_path = |key: &str| -> Result<Option<PathBuf>> {
        match paths.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(Value::String(s)) => Ok(Some(base.join(s))),
            Some(other) => Err(config_err(format!("{}: `{key}` must be a path string, got {other}", path.display()))),
        }
    };
    let dataset = get_path("dataset")?;
    let adjacency = match (get_path("adjacency")?, get_path("layout")?) {
        (Some(a), None) => Some(AdjacencySource::File(a)),
        (None, Some(layout)) => {
            let rule = match (paths.get("adjacency_k"), paths.get("adjacency_threshold")) {
                (Some(k), None) => AdjacencyRule::KNearest(
                    k.as_u64().ok_or_else(|| config_err("`adjacency_k` must be a positive integer"))? as usize,
                ),
                (None, Some(t)) => AdjacencyRule::Threshold(
                    t.as_f64().ok_or_else(|| config_err("`adjacency_threshold` must be a number"))?,
                ),
                _ => return Err(config_err("`layout` needs exactly one of `adjacency_k` or `adjacency_threshold`")),
            };
            Some(AdjacencySource::Layout(layout, rule))
        }
        (None, None) => None,
        (Some(_), Some(_)) => return Err(config_err("give either `adjacency` or `layout`, not both")),
    };
    let out = common.out.clone().or(get_path("output_dir")?);

    let mut resolved = serde_json::to_value(&hyper)?;
    let obj = resolved.as_object_mut().expect("config serializes to an object");
    for (k, v) in &paths {
        let v = match v {
            Value::String(s) if k != "adjacency_k" => Value::String(base.join(s).display().to_string()),
            v => v.clone(),
        };
        obj.insert(k.clone(), v);
    }
    Ok(RunSpec { hyper, dataset, adjacency, out, resolved })
}

impl RunSpec {
    fn out_dir(&self) -> Result<&Path> {
        self.out.as_deref().ok_or_else(|| config_err("no output directory: pass --out or set `output_dir`"))
    }

    fn dataset(&self) -> Result<Dataset> {
        self.dataset_with(&self.hyper)
    }

    /// Windows the dataset with `hyper` (a checkpoint's own settings, say).
    fn dataset_with(&self, hyper: &TrainConfig) -> Result<Dataset> {
        let manifest = self.dataset.as_ref().ok_or_else(|| config_err("config has no `dataset`"))?;
        let recordings = load_manifest(manifest)?;
        let adjacency = match &self.adjacency {
            Some(AdjacencySource::File(p)) => read_adjacency_csv(p)?,
            Some(AdjacencySource::Layout(p, rule)) => build_distance_adjacency(&ElectrodeLayout::read_csv(p)?, rule)?,
            None => return Err(config_err("config needs `adjacency` or `layout`")),
        };
        info!("loaded {} subjects from {}", recordings.len(), manifest.display());
        Ok(Dataset::prepare(&recordings, adjacency, hyper)?)
    }

    /// Config echo and provenance common to every run directory.
    fn write_provenance(&self, dir: &Path, command: &str) -> Result<()> {
        write_json(&dir.join("config.json"), &self.resolved)?;
        let run = json!({
            "command": command,
            "seed": self.hyper.seed,
            "code_version": env!("CARGO_PKG_VERSION"),
        });
        write_json(&dir.join("run.json"), &run)
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(write_atomic(path, &bytes)?)
}

fn predictions_csv(results: &[SubjectResult]) -> String {
    let mut out = String::from("subject,truth,predicted,p_control,p_depressed\n");
    for r in results {
        writeln!(out, "{},{},{},{},{}", r.id, r.truth.as_str(), r.predicted.as_str(), r.probs[0], r.probs[1]).unwrap();
    }
    out
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        n_subjects: a.subjects,
        channels: a.channels,
        sample_rate_hz: a.sample_rate,
        duration_s: a.duration,
        class_separation: a.separation,
        seed: a.seed,
    };
    let written = synth_dataset(&spec, &a.out)?;
    write_json(&a.out.join("synth.json"), &spec)?;
    let config = json!({ "dataset": "manifest.json", "adjacency": "adjacency.csv", "output_dir": "runs" });
    write_json(&a.out.join("config.json"), &config)?;
    info!("wrote {} subjects to {}", a.subjects, written.manifest.display());
    Ok(())
}

fn cmd_dims(a: &DimsArgs) -> Result<()> {
    let spec = load_spec(&a.common)?;
    let len = match a.len {
        Some(l) => l,
        None => spec.dataset()?.window_len(),
    };
    let with_tis = !spec.hyper.ablation_set()?.contains(Ablation::Tis);
    let dims = feature_dims(len, &spec.hyper.dwcs(), spec.hyper.ts, with_tis)?;
    println!("{}", serde_json::to_string(&json!({ "window_len": len, "fl": dims.fl, "depth": dims.depth, "interval": dims.interval, "fe": dims.fe }))?);
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let spec = load_spec(&a.common)?;
    let out = spec.out_dir()?;
    let data = spec.dataset()?;
    if a.fold >= depnet_core::datapipe::N_FOLDS {
        bail!(config_err(format!("--fold must be below 10, got {}", a.fold)));
    }
    let plan = tenfold_split(&data.ids(), spec.hyper.seed)?;
    let (report, trainer) = run_fold(&spec.hyper, &data, &plan, a.fold)?;
    spec.write_provenance(out, "train")?;
    trainer.save(&out.join("checkpoint.bin"))?;
    write_atomic(&out.join("history.csv"), history_csv(&trainer.history).as_bytes())?;
    write_atomic(&out.join("predictions.csv"), predictions_csv(&report.predictions).as_bytes())?;
    write_json(&out.join("metrics.json"), &metrics_of(&report.predictions)?)?;
    info!("fold {} done; results in {}", a.fold, out.display());
    Ok(())
}

fn write_cv(out: &Path, report: &CvReport) -> Result<()> {
    let mut combined = String::from("fold,epoch,loss_c,loss_d,train_acc\n");
    for f in &report.folds {
        let dir = out.join(format!("fold_{}", f.fold));
        write_atomic(&dir.join("history.csv"), history_csv(&f.history).as_bytes())?;
        write_atomic(&dir.join("predictions.csv"), predictions_csv(&f.predictions).as_bytes())?;
        for r in &f.history {
            writeln!(combined, "{},{},{},{},{}", f.fold, r.epoch, r.loss_c, r.loss_d, r.train_acc).unwrap();
        }
    }
    write_atomic(&out.join("history.csv"), combined.as_bytes())?;
    write_atomic(&out.join("predictions.csv"), predictions_csv(&report.pooled).as_bytes())?;
    write_json(&out.join("metrics.json"), &report.metrics)
}

fn cmd_cv(a: &CvArgs, ablate: bool) -> Result<()> {
    let spec = load_spec(&a.common)?;
    if ablate && spec.hyper.ablations.is_empty() {
        bail!(config_err("ablate needs a non-empty --ablate list (or `ablations` in the config)"));
    }
    let mut out = spec.out_dir()?.to_path_buf();
    if ablate {
        let names: Vec<&str> = spec.hyper.ablation_set()?.iter().map(Ablation::as_str).collect();
        out = out.join(format!("ablate-{}", names.join("+")));
    }
    let data = spec.dataset()?;
    let report = run_cv(&spec.hyper, &data, a.parallel)?;
    spec.write_provenance(&out, if ablate { "ablate" } else { "cv" })?;
    write_cv(&out, &report)?;
    let m = &report.metrics;
    info!("pooled: acc {:.4} f1 {:.4} auc {:.4} pam {:.4}; results in {}", m.acc, m.f1, m.auc, m.pam, out.display());
    Ok(())
}

fn eval_subjects<'d>(data: &'d Dataset, trainer: &Trainer, fold: Option<usize>) -> Result<Vec<&'d LabeledSample>> {
    match fold {
        None => Ok(data.subjects.iter().collect()),
        Some(k) => {
            let plan = tenfold_split(&data.ids(), trainer.model.config.hyper.seed)?;
            if k >= plan.groups.len() {
                bail!(config_err(format!("--fold must be below 10, got {k}")));
            }
            Ok(data.select(&plan.fold(k).1)?)
        }
    }
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let spec = load_spec(&a.common)?;
    let out = spec.out_dir()?;
    let trainer = Trainer::load(&a.checkpoint)?;
    let data = spec.dataset_with(&trainer.model.config.hyper)?;
    let subjects = eval_subjects(&data, &trainer, a.fold)?;
    let results = predict_labeled(&trainer.model, &subjects)?;
    spec.write_provenance(out, "eval")?;
    write_atomic(&out.join("predictions.csv"), predictions_csv(&results).as_bytes())?;
    write_json(&out.join("metrics.json"), &metrics_of(&results)?)?;
    Ok(())
}

fn tensor_csv(t: &Tensor<f32>, leading: &[&str]) -> String {
    let shape = t.shape();
    let lead = leading.len();
    let width: usize = shape[lead..].iter().product();
    let mut out = leading.join(",");
    for j in 0..width {
        write!(out, ",x{j}").unwrap();
    }
    out.push('\n');
    for (row, chunk) in t.data().chunks(width).enumerate() {
        let mut idx = Vec::with_capacity(lead);
        let mut r = row;
        for d in (0..lead).rev() {
            idx.push(r % shape[d]);
            r /= shape[d];
        }
        idx.reverse();
        let cells: Vec<String> = idx.iter().map(usize::to_string).chain(chunk.iter().map(f32::to_string)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

fn cmd_export(a: &ExportArgs) -> Result<()> {
    let spec = load_spec(&a.common)?;
    let out = spec.out_dir()?;
    let trainer = Trainer::load(&a.checkpoint)?;
    let data = spec.dataset_with(&trainer.model.config.hyper)?;
    let chosen: Vec<&LabeledSample> = match &a.subject {
        Some(id) => data.select(std::slice::from_ref(id))?,
        None => data.subjects.iter().collect(),
    };
    let mut shapes = Map::new();
    for s in chosen {
        let f = trainer.model.features(&s.sample as &WindowedSample)?;
        let dir = out.join(&s.id);
        let tensors: [(&str, &Tensor<f32>, &[&str]); 4] = [
            ("f_sps", &f.f_sps, &["window", "node"]),
            ("f_tes", &f.f_tes, &["node"]),
            ("a_fc", &f.a_fc, &["window", "row"]),
            ("a", &f.a, &["window", "row"]),
        ];
        let mut entry = Map::new();
        for (name, t, lead) in tensors {
            write_atomic(&dir.join(format!("{name}.csv")), tensor_csv(t, lead).as_bytes())?;
            entry.insert(name.to_string(), json!(t.shape()));
        }
        entry.insert("label".into(), json!(s.label.as_str()));
        shapes.insert(s.id.clone(), Value::Object(entry));
    }
    spec.write_provenance(out, "export-features")?;
    write_json(&out.join("shapes.json"), &Value::Object(shapes))
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Dims(a) => cmd_dims(a),
        Command::Train(a) => cmd_train(a),
        Command::Cv(a) => cmd_cv(a, false),
        Command::Ablate(a) => cmd_cv(a, true),
        Command::Eval(a) => cmd_eval(a),
        Command::ExportFeatures(a) => cmd_export(a),
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<ConfigError>() {
            return 2;
        }
        if let Some(err) = cause.downcast_ref::<depnet_core::Error>() {
            return match err.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Data => 3,
                ErrorKind::Numeric => 4,
                ErrorKind::Invariant => 5,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli).with_context(|| "depnet failed") {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
