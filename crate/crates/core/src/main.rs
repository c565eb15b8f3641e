use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use stale_lab::datamodel::SplitSpec;
use stale_lab::eval::{table_csv, AggregateReport, EvalReport};
use stale_lab::experiment::{
    detection_file, protocol_splits, run_setting, setting_label, setting_order, ExperimentConfig, TrialResult, Variant,
};
use stale_lab::formats::{self, read_corpus, read_json, write_corpus, write_json, TOOL_VERSION};
use stale_lab::synthdata::{gen_corpus, Corpus, SynthConfig};
use stale_lab::tensor::{DType, Real};
use stale_lab::trainer::{
    detect_videos, evaluate_checkpoint, evaluation_videos, evaluation_vocabulary, load_checkpoint, save_checkpoint,
    train, write_history_csv, Checkpoint, SetMode,
};

/// Zero-shot temporal action detection lab.
#[derive(Debug, Parser)]
#[command(name = "stale-lab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic feature corpus.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write seen/unseen class splits.
    Split {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the seen classes of one split.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write detections for the evaluation videos of a split.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output JSON file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on the evaluation side of a split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory for report.json and report.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate every report.json under a directory into a table.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the whole protocol: corpus, splits, every trial and the table.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config (JSON with synth/train/inference/eval/protocol sections).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<SetMode>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn experiment(&self) -> anyhow::Result<ExperimentConfig> {
        let mut exp = match &self.config {
            Some(p) => read_experiment(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(m) = self.mode {
            exp.protocol.mode = m;
        }
        if let Some(t) = self.trials {
            exp.protocol.trials = t;
        }
        if let Some(s) = self.seed {
            exp.protocol.seed = s;
        }
        exp.validate()?;
        Ok(exp)
    }
}

const SECTIONS: [&str; 5] = ["synth", "train", "inference", "eval", "protocol"];

fn read_value(path: &Path) -> anyhow::Result<Value> {
    Ok(read_json::<Value>(path)?)
}

fn read_experiment(path: &Path) -> anyhow::Result<ExperimentConfig> {
    let v = read_value(path)?;
    let exp: ExperimentConfig =
        serde_json::from_value(v).map_err(|e| stale_lab::Error::Config(format!("{}: {e}", path.display())))?;
    Ok(exp)
}

/// A bare synthetic-data config or the `synth` section of an experiment config.
fn read_synth(path: &Path) -> anyhow::Result<SynthConfig> {
    let v = read_value(path)?;
    let is_experiment = v
        .as_object()
        .is_some_and(|o| SECTIONS.iter().any(|s| o.contains_key(*s)));
    let synth = if is_experiment {
        read_experiment(path)?.synth
    } else {
        serde_json::from_value(v).map_err(|e| stale_lab::Error::Config(format!("{}: {e}", path.display())))?
    };
    synth.validate()?;
    Ok(synth)
}

fn precision() -> anyhow::Result<DType> {
    match std::env::var("STALE_LAB_PRECISION").as_deref() {
        Err(_) | Ok("f64") => Ok(DType::F64),
        Ok("f32") => Ok(DType::F32),
        Ok(other) => {
            Err(stale_lab::Error::Config(format!("STALE_LAB_PRECISION must be f32 or f64, got {other:?}")).into())
        }
    }
}

macro_rules! with_precision {
    ($f:ident($($arg:expr),*)) => {
        match precision()? {
            DType::F32 => $f::<f32>($($arg),*),
            DType::F64 => $f::<f64>($($arg),*),
        }
    };
}

fn slug(setting: &str) -> String {
    setting.replace('/', "-").replace(' ', "_")
}

fn cmd_gen(config: &Path, out: &Path) -> anyhow::Result<()> {
    let synth = read_synth(config)?;
    let corpus = gen_corpus(&synth)?;
    let manifest = write_corpus(out, &corpus, Some(&synth))?;
    println!(
        "{} videos, {} classes -> {}",
        corpus.videos.len(),
        corpus.classes.len(),
        manifest.display()
    );
    println!("sha256 {}", formats::sha256_file(&manifest)?);
    Ok(())
}

fn write_splits(out: &Path, corpus: &Corpus, exp: &ExperimentConfig) -> anyhow::Result<Vec<Vec<(PathBuf, SplitSpec)>>> {
    let mut all = Vec::new();
    for splits in protocol_splits(corpus, &exp.protocol)? {
        let mut written = Vec::new();
        for s in splits {
            let dir = out.join(slug(&setting_label(&s, exp.protocol.mode)));
            let path = dir.join(format!("trial_{:02}.json", s.trial));
            write_json(&path, &s)?;
            written.push((path, s));
        }
        all.push(written);
    }
    Ok(all)
}

fn cmd_split(common: &Common, corpus: &Path, out: &Path) -> anyhow::Result<()> {
    let exp = common.experiment()?;
    let corpus = read_corpus(corpus)?;
    for group in write_splits(out, &corpus, &exp)? {
        for (path, s) in group {
            println!("trial {} seed {} -> {}", s.trial, s.seed, path.display());
        }
    }
    Ok(())
}

fn save_run<T: Real>(dir: &Path, corpus: &Corpus, r: &TrialResult<T>) -> stale_lab::Result<()> {
    save_checkpoint(&dir.join("checkpoint.json"), &r.outcome, &r.train_config)?;
    write_history_csv(&dir.join("loss.csv"), &r.outcome.history)?;
    write_json(&dir.join("split.json"), &r.split)?;
    write_json(&dir.join("detections.json"), &detection_file(corpus, &r.detections))?;
    write_report(dir, &r.report)
}

fn write_report(dir: &Path, report: &EvalReport) -> stale_lab::Result<()> {
    write_json(&dir.join("report.json"), report)?;
    formats::write_bytes(&dir.join("report.csv"), report.to_csv().as_bytes())?;
    Ok(())
}

fn cmd_train<T: Real>(common: &Common, corpus: &Path, split: &Path, out: &Path) -> anyhow::Result<()> {
    let exp = common.experiment()?;
    let corpus = read_corpus(corpus)?;
    let split: SplitSpec = read_json(split)?;
    let run = train::<T>(&corpus, &split, exp.protocol.mode, &exp.train)?;
    let ckpt = out.join("checkpoint.json");
    save_checkpoint(&ckpt, &run, &exp.train)?;
    write_history_csv(&out.join("loss.csv"), &run.history)?;
    if let (Some(first), Some(last)) = (run.history.first(), run.history.last()) {
        println!("loss {:.6} -> {:.6} over {} steps", first.total, last.total, last.step);
    }
    println!("checkpoint -> {}", ckpt.display());
    Ok(())
}

fn load_for<T: Real>(common: &Common, path: &Path) -> anyhow::Result<(Checkpoint<T>, ExperimentConfig)> {
    let exp = common.experiment()?;
    let ckpt = load_checkpoint::<T>(path)?;
    if common.config.is_some() {
        ckpt.expect_config(&exp.train)?;
    }
    Ok((ckpt, exp))
}

fn cmd_infer<T: Real>(
    common: &Common,
    corpus: &Path,
    split: &Path,
    checkpoint: &Path,
    out: &Path,
) -> anyhow::Result<()> {
    let (ckpt, exp) = load_for::<T>(common, checkpoint)?;
    let corpus = read_corpus(corpus)?;
    let split: SplitSpec = read_json(split)?;
    let mode = exp.protocol.mode;
    let vocab = evaluation_vocabulary(&corpus, &split, mode, exp.eval.vocabulary);
    let videos = evaluation_videos(&corpus, &split, mode);
    let t_len = ckpt.manifest.config.t_len;
    let dets = detect_videos(&ckpt.model, &corpus, &videos, &vocab, t_len, &exp.inference)?;
    write_json(out, &detection_file(&corpus, &dets))?;
    println!(
        "{} detections on {} videos -> {}",
        dets.len(),
        videos.len(),
        out.display()
    );
    Ok(())
}

fn cmd_eval<T: Real>(
    common: &Common,
    corpus: &Path,
    split: &Path,
    checkpoint: &Path,
    out: &Path,
) -> anyhow::Result<()> {
    let (ckpt, exp) = load_for::<T>(common, checkpoint)?;
    let corpus = read_corpus(corpus)?;
    let split: SplitSpec = read_json(split)?;
    let mode = exp.protocol.mode;
    let t_len = ckpt.manifest.config.t_len;
    let (mut report, dets) = evaluate_checkpoint(&ckpt.model, t_len, &corpus, &split, mode, &exp.eval, &exp.inference)?;
    report.setting = setting_label(&split, mode);
    write_report(out, &report)?;
    write_json(&out.join("detections.json"), &detection_file(&corpus, &dets))?;
    print!("{}", report.to_csv());
    Ok(())
}

fn find_reports(dir: &Path, out: &mut Vec<PathBuf>) -> anyhow::Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            find_reports(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == "report.json") {
            out.push(p);
        }
    }
    Ok(())
}

/// Groups trial reports by setting; a report's trial index comes from the
/// `split.json` beside it when present.
fn aggregate_dir(dir: &Path) -> anyhow::Result<Vec<AggregateReport>> {
    let mut paths = Vec::new();
    find_reports(dir, &mut paths)?;
    if paths.is_empty() {
        return Err(stale_lab::Error::InvalidInput(format!("no report.json under {}", dir.display())).into());
    }
    let mut groups: Vec<(String, Vec<(usize, EvalReport)>)> = Vec::new();
    for (i, p) in paths.iter().enumerate() {
        let report: EvalReport = read_json(p)?;
        let split_path = p.with_file_name("split.json");
        let trial = if split_path.exists() {
            read_json::<SplitSpec>(&split_path)?.trial
        } else {
            i
        };
        match groups.iter_mut().find(|(s, _)| *s == report.setting) {
            Some((_, g)) => g.push((trial, report)),
            None => groups.push((report.setting.clone(), vec![(trial, report)])),
        }
    }
    groups.sort_by(|a, b| setting_order(&a.0, &b.0));
    groups
        .into_iter()
        .map(|(setting, mut trials)| {
            trials.sort_by_key(|(t, _)| *t);
            Ok(AggregateReport::from_trials(&setting, trials, Vec::new())?)
        })
        .collect()
}

fn cmd_report(out: &Path) -> anyhow::Result<()> {
    let rows = aggregate_dir(out)?;
    let table = table_csv(&rows)?;
    formats::write_bytes(&out.join("table.csv"), table.as_bytes())?;
    write_json(&out.join("aggregate.json"), &rows)?;
    print!("{table}");
    Ok(())
}

#[derive(serde::Serialize)]
struct ExperimentManifest {
    tool_version: &'static str,
    config: ExperimentConfig,
    corpus_manifest: PathBuf,
    splits: Vec<PathBuf>,
    checkpoints: Vec<PathBuf>,
    reports: Vec<PathBuf>,
    table: PathBuf,
}

fn cmd_run<T: Real>(common: &Common, out: &Path) -> anyhow::Result<()> {
    let exp = common.experiment()?;
    let corpus_manifest = write_corpus(&out.join("corpus"), &gen_corpus(&exp.synth)?, Some(&exp.synth))?;
    let corpus = read_corpus(&corpus_manifest)?;
    let groups = write_splits(&out.join("splits"), &corpus, &exp)?;
    let variants: &[Variant] = if exp.protocol.controls {
        &Variant::ALL
    } else {
        &[Variant::Full]
    };
    let mut checkpoints = Vec::new();
    let mut reports = Vec::new();
    let mut rows = Vec::new();
    for group in &groups {
        let splits: Vec<SplitSpec> = group.iter().map(|(_, s)| s.clone()).collect();
        for &variant in variants {
            let agg = run_setting::<T>(&corpus, &splits, &exp, variant, |r| {
                let dir = out
                    .join("runs")
                    .join(slug(&r.report.setting))
                    .join(format!("trial_{:02}", r.split.trial));
                save_run(&dir, &corpus, r)?;
                checkpoints.push(dir.join("checkpoint.json"));
                reports.push(dir.join("report.json"));
                Ok(())
            })?;
            for f in &agg.failed {
                log::warn!("{}: trial {} failed: {}", agg.setting, f.trial, f.reason);
            }
            rows.push(agg);
        }
    }
    rows.sort_by(|a, b| setting_order(&a.setting, &b.setting));
    let table = out.join("table.csv");
    formats::write_bytes(&table, table_csv(&rows)?.as_bytes())?;
    write_json(&out.join("aggregate.json"), &rows)?;
    write_json(
        &out.join("experiment.json"),
        &ExperimentManifest {
            tool_version: TOOL_VERSION,
            config: exp,
            corpus_manifest,
            splits: groups.iter().flatten().map(|(p, _)| p.clone()).collect(),
            checkpoints,
            reports,
            table: table.clone(),
        },
    )?;
    print!("{}", fs::read_to_string(&table)?);
    Ok(())
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Gen { config, out } => cmd_gen(config, out),
        Command::Split { common, corpus, out } => cmd_split(common, corpus, out),
        Command::Train {
            common,
            corpus,
            split,
            out,
        } => with_precision!(cmd_train(common, corpus, split, out)),
        Command::Infer {
            common,
            corpus,
            split,
            checkpoint,
            out,
        } => with_precision!(cmd_infer(common, corpus, split, checkpoint, out)),
        Command::Eval {
            common,
            corpus,
            split,
            checkpoint,
            out,
        } => with_precision!(cmd_eval(common, corpus, split, checkpoint, out)),
        Command::Report { out } => cmd_report(out),
        Command::Run { common, out } => with_precision!(cmd_run(common, out)),
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    e.downcast_ref::<stale_lab::Error>()
        .map_or(2, |err| err.exit_code() as u8)
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
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
