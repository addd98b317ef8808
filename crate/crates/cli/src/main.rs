//! `tvg`: generate data, train, evaluate and inspect grounding models.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use tvg_core::feature_store::{load_manifest, read_feature_file, write_dataset, MANIFEST_FILE};
use tvg_core::harness::CheckpointMeta;
use tvg_core::metrics::QueryMetrics;
use tvg_core::synthetic::{generate_corpus, GenerationConfig};
use tvg_core::{evaluate, load_checkpoint, predict, train, Dataset, Error, TrainConfig, TrainOptions};

#[derive(Parser, Debug)]
#[command(name = "tvg", version, about = "Moment retrieval and highlight detection toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// JSON config; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. `--set optimizer.lr=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Overrides the `seed` key.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes a synthetic dataset directory.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains a model; writes log.jsonl, best/ and last/ under --out.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Evaluation data; defaults to the training data.
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluates a checkpoint and prints its metrics report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory; defaults to the one recorded at training time.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Writes the report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Writes per-query metrics as CSV.
        #[arg(long)]
        per_query: Option<PathBuf>,
    },
    /// Ranked moments and clip scores for one query, as a JSON line.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        qid: String,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output file; defaults to standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-clip score curves of every positive query as CSV.
    ExportCurves {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Prints the shape and value range of a feature file.
    Inspect {
        #[arg(long)]
        features: PathBuf,
    },
}

/// Failure class that decides the exit code.
#[derive(Debug)]
enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        let validation = e.chain().any(|c| {
            c.downcast_ref::<Error>().is_some_and(Error::is_validation) || c.downcast_ref::<serde_json::Error>().is_some()
        });
        if validation {
            Failure::Validation(e)
        } else {
            Failure::Runtime(e)
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

type CliResult<T> = Result<T, Failure>;

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Validation(anyhow::anyhow!(msg.into()))
}

/// Sets `path` (dot separated) inside `root`, creating objects as needed.
fn set_path(root: &mut Value, path: &str, value: Value) -> CliResult<()> {
    let mut node = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        if key.is_empty() {
            return Err(invalid(format!("malformed override key {path:?}")));
        }
        let obj = node
            .as_object_mut()
            .ok_or_else(|| invalid(format!("override {path:?}: {} is not an object", keys[..i].join("."))))?;
        if i + 1 == keys.len() {
            obj.insert((*key).to_string(), value);
            return Ok(());
        }
        node = obj.entry((*key).to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split yields at least one key")
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Defaults, then the config file, then `--seed`, then `--set` overrides.
fn load_config<T: Serialize + DeserializeOwned + Default>(args: &ConfigArgs) -> CliResult<T> {
    let mut value = serde_json::to_value(T::default()).map_err(anyhow::Error::from)?;
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display())).map_err(Failure::Validation)?;
        let file: Value = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))
            .map_err(Failure::Validation)?;
        if !file.is_object() {
            return Err(invalid(format!("config {} must be a JSON object", path.display())));
        }
        merge(&mut value, file);
    }
    if let Some(seed) = args.seed {
        set_path(&mut value, "seed", Value::from(seed))?;
    }
    for o in &args.overrides {
        let (key, raw) = o.split_once('=').ok_or_else(|| invalid(format!("override {o:?} is not KEY=VALUE")))?;
        let v = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        set_path(&mut value, key.trim(), v)?;
    }
    serde_json::from_value(value).context("invalid configuration").map_err(Failure::Validation)
}

fn load_data(dir: &Path) -> CliResult<Dataset> {
    if !dir.is_dir() {
        return Err(invalid(format!("data directory {} does not exist", dir.display())));
    }
    Ok(load_manifest(dir.join(MANIFEST_FILE))?)
}

fn data_for(meta: &CheckpointMeta, data: Option<&Path>) -> CliResult<Dataset> {
    match data.or(meta.data_dir.as_deref()) {
        Some(dir) => load_data(dir),
        None => Err(invalid("no --data given and the checkpoint records no data directory")),
    }
}

fn create_parent(path: &Path) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(())
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    create_parent(path)?;
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData { cfg, out } => {
            let cfg: GenerationConfig = load_config(&cfg)?;
            let corpus = generate_corpus(&cfg)?;
            write_dataset(&out, &corpus.dataset)?;
            write_file(&out.join("generation.json"), &serde_json::to_string_pretty(&cfg).map_err(anyhow::Error::from)?)?;
            println!(
                "wrote {} videos and {} queries to {}",
                corpus.dataset.videos.len(),
                corpus.dataset.annotations.len(),
                out.display()
            );
        }
        Command::Train { cfg, data, eval_data, out } => {
            let cfg: TrainConfig = load_config(&cfg)?;
            cfg.validate()?;
            let dataset = load_data(&data)?;
            let eval = eval_data.as_deref().map(load_data).transpose()?;
            let data_dir = fs::canonicalize(&data).unwrap_or(data);
            let outcome = train(
                &cfg,
                &dataset,
                &TrainOptions {
                    out_dir: Some(&out),
                    data_dir: Some(&data_dir),
                    eval_data: eval.as_ref(),
                },
            )?;
            if let Some(last) = outcome.log.last() {
                println!("{} steps, final loss {:.6}", outcome.log.len(), last.losses.total);
            }
            if let Some((epoch, report)) = &outcome.best {
                println!("best map_avg {:.4} at epoch {epoch}", report.map_avg);
            }
        }
        Command::Eval { ckpt, data, report, per_query } => {
            let (model, meta) = load_checkpoint(&ckpt)?;
            let dataset = data_for(&meta, data.as_deref())?;
            let evaluation = evaluate(&model, &dataset)?;
            let json = serde_json::to_string_pretty(&evaluation.report).map_err(anyhow::Error::from)?;
            println!("{json}");
            if let Some(path) = report {
                write_file(&path, &json)?;
            }
            if let Some(path) = per_query {
                let mut csv = format!("{}\n", QueryMetrics::CSV_HEADER);
                for q in &evaluation.per_query {
                    csv.push_str(&q.csv_row());
                    csv.push('\n');
                }
                write_file(&path, &csv)?;
            }
        }
        Command::Predict { ckpt, qid, data, out } => {
            let (model, meta) = load_checkpoint(&ckpt)?;
            let dataset = data_for(&meta, data.as_deref())?;
            let record = dataset
                .annotations
                .iter()
                .find(|a| a.qid == qid)
                .ok_or_else(|| invalid(format!("query {qid} not found")))?;
            let video = dataset
                .video(&record.vid)
                .ok_or_else(|| invalid(format!("video {} not found", record.vid)))?;
            let p = predict(&model, video, &record.qid, &record.text)?;
            let moments: Vec<[f64; 3]> = p
                .ranked
                .moments
                .iter()
                .map(|(m, score)| {
                    let (s, e) = m.to_seconds(video.duration_s);
                    [s, e, *score]
                })
                .collect();
            let line = serde_json::json!({
                "qid": record.qid,
                "vid": record.vid,
                "pred_relevant_windows": moments,
                "pred_saliency_scores": p.clip_scores,
            });
            match out {
                Some(path) => write_file(&path, &format!("{line}\n"))?,
                None => println!("{line}"),
            }
        }
        Command::ExportCurves { ckpt, data, out } => {
            let (model, meta) = load_checkpoint(&ckpt)?;
            let dataset = data_for(&meta, data.as_deref())?;
            let mut csv = String::from("qid,clip_index,raw_score,sigmoid_score\n");
            for a in dataset.positives() {
                let video = dataset.video(&a.vid).ok_or_else(|| invalid(format!("video {} not found", a.vid)))?;
                let p = predict(&model, video, &a.qid, &a.text)?;
                for (i, s) in p.clip_scores.iter().enumerate() {
                    csv.push_str(&format!("{},{i},{s},{}\n", a.qid, 1.0 / (1.0 + (-s).exp())));
                }
            }
            write_file(&out, &csv)?;
        }
        Command::Inspect { features } => {
            let m = read_feature_file(&features)?;
            let (lo, hi) = m.data().iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            let mean = m.data().iter().map(|&v| v as f64).sum::<f64>() / m.data().len().max(1) as f64;
            let mut stdout = std::io::stdout().lock();
            writeln!(stdout, "rows {}", m.rows()).context("writing to stdout")?;
            writeln!(stdout, "cols {}", m.cols()).context("writing to stdout")?;
            if !m.data().is_empty() {
                writeln!(stdout, "min {lo}\nmax {hi}\nmean {mean}").context("writing to stdout")?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
