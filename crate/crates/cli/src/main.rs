use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use gu_core::corpus::{write_jsonl, Tokenizer};
use gu_core::evalsuite::MetricReport;
use gu_core::experiment::{
    desk_experiment, evaluate_checkpoint, forget_em, prepare, run_unlearn, sweep, synthesize, train_base,
    train_retrain, DataSource, ExperimentConfig, Prepared, SweepAxis, SWEEP_HEADER, TOOL_VERSION,
};
use gu_core::model::Checkpoint;
use gu_core::trainer::Method;

#[derive(Parser)]
#[command(name = "gu", version, about = "Geometric unlearning desk lab")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Global {
    /// JSON config; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true, env = "GU_SEED")]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the synthetic corpus, its splits and the tokenizer.
    GenCorpus,
    /// Train the base model to memorization.
    TrainBase {
        /// Also train the retain-only reference used for PrivLeak.
        #[arg(long)]
        retrain: bool,
    },
    /// Unlearn from the base checkpoint.
    Unlearn {
        #[arg(long, default_value = "gu")]
        method: Method,
        /// Profile name to forget; defaults to the forget split.
        #[arg(long)]
        anchor: Option<String>,
        #[arg(long, default_value = "synthetic")]
        data: DataSource,
    },
    /// Write one metric report per checkpoint.
    Evaluate {
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        /// Retain-only reference; defaults to base/retrain.ckpt when present.
        #[arg(long)]
        retrain: Option<PathBuf>,
        /// Also append one CSV row per checkpoint to reports/reports.csv.
        #[arg(long)]
        csv: bool,
    },
    /// GU over one ablation axis.
    Sweep {
        #[arg(long)]
        axis: SweepAxis,
    },
    /// The full base / GU / baselines / relearn comparison.
    Desk,
}

/// Bad input from the command line rather than a library failure.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

/// An artifact body with the provenance every output carries.
#[derive(Serialize)]
struct Stamped<T: Serialize> {
    seed: u64,
    config_hash: String,
    tool_version: &'static str,
    #[serde(flatten)]
    body: T,
}

fn stamp<T: Serialize>(cfg: &ExperimentConfig, body: T) -> Stamped<T> {
    Stamped {
        seed: cfg.seed,
        config_hash: cfg.config_hash(),
        tool_version: TOOL_VERSION,
        body,
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

struct Paths {
    root: PathBuf,
}

impl Paths {
    fn corpus(&self) -> PathBuf {
        self.root.join("corpus")
    }
    fn base(&self) -> PathBuf {
        self.root.join("base")
    }
    fn base_ckpt(&self) -> PathBuf {
        self.base().join("base.ckpt")
    }
    fn retrain_ckpt(&self) -> PathBuf {
        self.base().join("retrain.ckpt")
    }
    fn unlearn(&self, method: Method, data: DataSource) -> PathBuf {
        let data = match data {
            DataSource::Synthetic => "synthetic",
            DataSource::Original => "original",
        };
        self.root.join("unlearn").join(format!("{method}-{data}"))
    }
    fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
}

fn load_config(g: &Global) -> Result<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(o) = &g.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn gen_corpus(cfg: &ExperimentConfig, paths: &Paths) -> Result<()> {
    let prep = prepare(cfg)?;
    let dir = paths.corpus();
    ensure_dir(&dir)?;
    write_jsonl(&dir.join("corpus.jsonl"), &prep.corpus.qa)?;
    write_jsonl(&dir.join("forget.jsonl"), &prep.splits.forget)?;
    write_jsonl(&dir.join("retain.jsonl"), &prep.splits.retain)?;
    write_jsonl(&dir.join("holdout.jsonl"), &prep.splits.holdout)?;
    write_jsonl(&dir.join("abstain.jsonl"), &prep.abstain)?;
    write_json(&dir.join("profiles.json"), &stamp(cfg, serde_json::json!({ "profiles": prep.corpus.profiles })))?;
    write_json(&dir.join("manifest.json"), &stamp(cfg, prep.splits.manifest()))?;
    prep.tokenizer.save(&dir.join("tokenizer.json"))?;
    log::info!(
        "wrote {} QA over {} profiles to {}",
        prep.corpus.qa.len(),
        prep.corpus.profiles.len(),
        dir.display()
    );
    Ok(())
}

/// Rebuilds the corpus from the config and checks it against what
/// gen-corpus wrote.
fn load_prepared(cfg: &ExperimentConfig, paths: &Paths) -> Result<Prepared> {
    let dir = paths.corpus();
    let tok_path = dir.join("tokenizer.json");
    let manifest_path = dir.join("manifest.json");
    for p in [&tok_path, &manifest_path] {
        if !p.exists() {
            return Err(usage(format!("missing corpus file {} (run gen-corpus first)", p.display())));
        }
    }
    let prep = prepare(cfg)?;
    let saved = Tokenizer::load(&tok_path)?;
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
    let expected = serde_json::to_value(prep.splits.manifest())?;
    let same_splits = ["forget", "retain", "holdout"].iter().all(|k| manifest.get(*k) == expected.get(*k));
    if saved.fingerprint() != prep.tokenizer.fingerprint() || !same_splits {
        return Err(usage(format!(
            "corpus in {} was generated from a different config; rerun gen-corpus",
            dir.display()
        )));
    }
    Ok(prep)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(usage(format!("missing checkpoint {}", path.display())));
    }
    Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

#[derive(Serialize)]
struct BaseHistory {
    epochs: usize,
    epoch_loss: Vec<f64>,
    forget_em: f64,
    memorized: bool,
    checkpoint: String,
}

fn cmd_train_base(cfg: &ExperimentConfig, paths: &Paths, with_retrain: bool) -> Result<()> {
    let prep = load_prepared(cfg, paths)?;
    ensure_dir(&paths.base())?;
    let (ck, hist) = train_base(cfg, &prep)?;
    let em = forget_em(&ck, &prep)?;
    ck.save(&paths.base_ckpt())?;
    let memorized = em >= cfg.min_base_em;
    write_json(
        &paths.base().join("history.json"),
        &stamp(
            cfg,
            BaseHistory {
                epochs: hist.epoch_loss.len(),
                epoch_loss: hist.epoch_loss.clone(),
                forget_em: em,
                memorized,
                checkpoint: ck.digest(),
            },
        ),
    )?;
    if !memorized {
        bail!(
            "base model did not memorize the forget split: EM {em:.3} < {:.3} after {} epochs (final loss {:.4})",
            cfg.min_base_em,
            hist.epoch_loss.len(),
            hist.epoch_loss.last().copied().unwrap_or(f64::NAN)
        );
    }
    log::info!("base forget EM {em:.3}; saved {}", paths.base_ckpt().display());
    if with_retrain {
        let r = train_retrain(cfg, &prep)?;
        r.save(&paths.retrain_ckpt())?;
        log::info!("saved retain-only reference {}", paths.retrain_ckpt().display());
    }
    Ok(())
}

fn cmd_unlearn(
    cfg: &ExperimentConfig,
    paths: &Paths,
    method: Method,
    anchor: Option<String>,
    data: DataSource,
) -> Result<()> {
    let prep = load_prepared(cfg, paths)?;
    let anchors = match anchor {
        Some(a) => {
            prep.check_anchor(&a)?;
            if data == DataSource::Original && !prep.anchors().contains(&a) {
                return Err(usage(format!(
                    "{a:?} is not in the forget split, so there is no original forget data for it"
                )));
            }
            vec![a]
        }
        None => prep.anchors(),
    };
    let base = load_checkpoint(&paths.base_ckpt())?;
    let pools = synthesize(cfg, &anchors)?;
    let out = run_unlearn(cfg, &prep, &base, &pools, method, data)?;
    let dir = paths.unlearn(method, data);
    ensure_dir(&dir)?;
    out.checkpoint.save(&dir.join("model.ckpt"))?;
    write_json(&dir.join("history.json"), &stamp(cfg, &out.history))?;
    if let Some(g) = &out.geometry {
        g.save(&dir.join("geometry.bin"))?;
    }
    if data == DataSource::Synthetic {
        write_json(&dir.join("pools.json"), &stamp(cfg, &pools))?;
    }
    log::info!(
        "{method}: {} epochs, converged at {:?}; wrote {}",
        out.history.epochs.len(),
        out.history.converged_at,
        dir.display()
    );
    Ok(())
}

const REPORT_CSV_HEADER: &str = "checkpoint,em,es,fr,af,privleak,mu,seed,config_hash,tool_version";

fn csv_row(name: &str, r: &MetricReport) -> String {
    format!(
        "{name},{:.6},{:.6},{:.6},{:.6},{},{:.6},{},{},{}",
        r.em,
        r.es,
        r.fr,
        r.af,
        r.privleak.map_or(String::new(), |p| format!("{p:.6}")),
        r.mu,
        r.meta.seed,
        r.meta.config_hash,
        r.meta.tool_version
    )
}

fn report_name(path: &Path) -> String {
    // unlearn/<run>/model.ckpt is more useful as "<run>" than "model"
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    match path.parent().and_then(|p| p.file_name()).and_then(|s| s.to_str()) {
        Some(parent) if stem == "model" => parent.to_string(),
        _ => stem.to_string(),
    }
}

fn cmd_evaluate(
    cfg: &ExperimentConfig,
    paths: &Paths,
    ckpt_paths: &[PathBuf],
    retrain: Option<PathBuf>,
    csv: bool,
) -> Result<()> {
    let prep = load_prepared(cfg, paths)?;
    let ckpts: Vec<Checkpoint> = ckpt_paths.iter().map(|p| load_checkpoint(p)).collect::<Result<_>>()?;
    let fps: Vec<&Option<String>> = ckpts.iter().map(|c| &c.tokenizer).collect();
    if fps.windows(2).any(|w| w[0] != w[1]) {
        return Err(gu_core::Error::TokenizerMismatch("checkpoints were trained with different tokenizers".into()).into());
    }
    let retrain = match retrain {
        Some(p) => Some(load_checkpoint(&p)?),
        None if paths.retrain_ckpt().exists() => Some(load_checkpoint(&paths.retrain_ckpt())?),
        None => None,
    };
    let dir = paths.reports();
    ensure_dir(&dir)?;
    let mut rows = Vec::new();
    for (path, ck) in ckpt_paths.iter().zip(&ckpts) {
        let report = evaluate_checkpoint(cfg, &prep, ck, retrain.as_ref())?;
        let name = report_name(path);
        let out = dir.join(format!("{name}.json"));
        write_json(&out, &report)?;
        log::info!("{name}: ES {:.3} FR {:.3} MU {:.3}; wrote {}", report.es, report.fr, report.mu, out.display());
        rows.push(csv_row(&name, &report));
    }
    if csv {
        let path = dir.join("reports.csv");
        let fresh = !path.exists();
        let mut f = fs::OpenOptions::new().create(true).append(true).open(&path)?;
        if fresh {
            writeln!(f, "{REPORT_CSV_HEADER}")?;
        }
        for r in rows {
            writeln!(f, "{r}")?;
        }
    }
    Ok(())
}

fn cmd_sweep(cfg: &ExperimentConfig, paths: &Paths, axis: SweepAxis) -> Result<()> {
    let prep = load_prepared(cfg, paths)?;
    let base = load_checkpoint(&paths.base_ckpt())?;
    let rows = sweep(cfg, &prep, &base, axis)?;
    let dir = paths.root.join("sweep");
    ensure_dir(&dir)?;
    let name = serde_json::to_value(axis)?.as_str().unwrap_or("axis").to_string();
    let mut text = format!("{SWEEP_HEADER}\n");
    for r in &rows {
        text.push_str(&r.csv());
        text.push('\n');
    }
    fs::write(dir.join(format!("{name}.csv")), text)?;
    write_json(&dir.join(format!("{name}.json")), &stamp(cfg, serde_json::json!({ "rows": rows })))?;
    log::info!("{} settings written to {}", rows.len(), dir.display());
    Ok(())
}

fn cmd_desk(cfg: &ExperimentConfig, paths: &Paths) -> Result<()> {
    let report = desk_experiment(cfg)?;
    ensure_dir(&paths.root)?;
    let out = paths.root.join("desk_report.json");
    write_json(&out, &stamp(cfg, &report))?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.global)?;
    let paths = Paths {
        root: cfg.out_dir.clone(),
    };
    match cli.cmd {
        Cmd::GenCorpus => gen_corpus(&cfg, &paths),
        Cmd::TrainBase { retrain } => cmd_train_base(&cfg, &paths, retrain),
        Cmd::Unlearn { method, anchor, data } => cmd_unlearn(&cfg, &paths, method, anchor, data),
        Cmd::Evaluate {
            checkpoints,
            retrain,
            csv,
        } => cmd_evaluate(&cfg, &paths, &checkpoints, retrain, csv),
        Cmd::Sweep { axis } => cmd_sweep(&cfg, &paths, axis),
        Cmd::Desk => cmd_desk(&cfg, &paths),
    }
}

/// 1 for bad input or configuration, 2 for failures while running.
fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    match e.downcast_ref::<gu_core::Error>() {
        Some(err) if err.is_validation() => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
