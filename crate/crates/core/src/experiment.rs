//! End-to-end pipeline: corpus, base model, synthetic pools, geometry,
//! unlearning, evaluation and ablation sweeps, driven by one flat config.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{
    generate_abstain_qa, generate_corpus, split_forget_retain, validate_fraction, Corpus, CorpusSplits, EncodedQa,
    QAPair, Tokenizer,
};
use crate::error::{Error, Result};
use crate::evalsuite::{evaluate, exact_memorization, AttackKind, EvalConfig, EvalItem, EvalSet, MetricReport, ReportMeta};
use crate::geometry::{build_safe_geometry, make_hits, SafeGeometry, WindowConfig};
use crate::model::{train_lm, Checkpoint, ModelConfig, TrainConfig, TrainHistory};
use crate::objectives::LossWeights;
use crate::promptsynth::{
    gen_retain_pool, gen_safe_references, gen_virtual_prompts, lexicon, lexicon_for_anchors, make_confusables,
    make_unrelated, RetainPrompt, SafeReferencePrompt, VirtualPrompt,
};
use crate::trainer::{
    default_lr, relearn, retrain_reference, unlearn, Convergence, HitPrompt, Method, Probes, RelearnDelta, RunHistory,
    UnlearnConfig, UnlearnData, UtilityProbe,
};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Every knob of a run, as one flat JSON object. Missing keys take the
/// desk defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,

    pub n_profiles: usize,
    pub qa_per_profile: usize,
    pub forget_fraction: f64,
    pub n_abstain: usize,

    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_ctx: usize,

    pub base_epochs: usize,
    pub base_lr: f64,
    pub base_batch: usize,
    pub min_base_em: f64,

    pub n_virtual: usize,
    pub n_retain: usize,
    pub n_safe_refs: usize,
    pub n_confusable: usize,
    pub n_unrelated: usize,

    /// Defaults to the forget-fraction convention when absent.
    pub unlearn_lr: Option<f64>,
    pub max_epochs: usize,
    pub batch: usize,
    pub w_cent: f64,
    pub w_fold: f64,
    pub eps: f64,
    pub w_pre: usize,
    pub w_post: usize,
    /// Defaults to the last two layers when absent.
    pub layers: Option<Vec<usize>>,
    pub rank: usize,
    pub conv_threshold: f64,
    pub conv_patience: usize,
    pub probe_retain: usize,

    pub min_k_percent: f64,
    pub gen_slack: usize,
    pub privleak_attack: AttackKind,

    pub relearn_epochs: usize,
    pub relearn_lr: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 7,
            out_dir: PathBuf::from("runs"),
            n_profiles: 20,
            qa_per_profile: 10,
            forget_fraction: 0.01,
            n_abstain: 24,
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            d_ff: 512,
            max_ctx: 128,
            base_epochs: 20,
            base_lr: 1e-3,
            base_batch: 8,
            min_base_em: 0.9,
            n_virtual: 30,
            n_retain: 30,
            n_safe_refs: 10,
            n_confusable: 6,
            n_unrelated: 6,
            unlearn_lr: None,
            max_epochs: 40,
            batch: 8,
            w_cent: 0.5,
            w_fold: 0.5,
            eps: 1e-8,
            w_pre: 4,
            w_post: 4,
            layers: None,
            rank: 4,
            conv_threshold: 0.1,
            conv_patience: 2,
            probe_retain: 16,
            min_k_percent: 40.0,
            gen_slack: 8,
            privleak_attack: AttackKind::MinK,
            relearn_epochs: 5,
            relearn_lr: 1e-4,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::invalid(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        validate_fraction(self.forget_fraction)?;
        if self.n_profiles < 10 || self.qa_per_profile < 5 {
            return Err(Error::invalid("need at least 10 profiles and 5 QA per profile"));
        }
        if self.n_virtual < 8 {
            return Err(Error::invalid("need at least 8 virtual prompts"));
        }
        if self.n_retain < 2 || self.n_safe_refs < 2 {
            return Err(Error::invalid("need at least 2 retain prompts and 2 safe references"));
        }
        if self.base_batch == 0 {
            return Err(Error::invalid("base batch must be positive"));
        }
        if self.relearn_epochs == 0 {
            return Err(Error::invalid("relearn_epochs must be at least 1"));
        }
        self.model_config(16).validate()?;
        self.unlearn_config(Method::Gu).validate()
    }

    /// Hash of every setting that influences numeric output.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            vocab_size,
            max_ctx: self.max_ctx,
            seed: self.seed,
        }
    }

    pub fn base_train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.base_epochs,
            lr: self.base_lr,
            batch: self.base_batch,
            seed: self.seed,
        }
    }

    pub fn layer_set(&self) -> Vec<usize> {
        self.layers
            .clone()
            .unwrap_or_else(|| (self.n_layers.saturating_sub(2)..self.n_layers).collect())
    }

    pub fn unlearn_config(&self, method: Method) -> UnlearnConfig {
        UnlearnConfig {
            method,
            lr: self.unlearn_lr.unwrap_or_else(|| default_lr(self.forget_fraction)),
            max_epochs: self.max_epochs,
            batch: self.batch,
            weights: LossWeights {
                w_cent: self.w_cent,
                w_fold: self.w_fold,
                eps: self.eps,
            },
            window: WindowConfig {
                w_pre: self.w_pre,
                w_post: self.w_post,
            },
            layers: self.layer_set(),
            rank: self.rank,
            seed: self.seed,
            convergence: Convergence {
                threshold: self.conv_threshold,
                patience: self.conv_patience,
            },
            probe_slack: self.gen_slack,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            min_k_percent: self.min_k_percent,
            gen_slack: self.gen_slack,
            privleak_attack: self.privleak_attack,
            ..EvalConfig::default()
        }
    }

    pub fn relearn_train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.relearn_epochs,
            lr: self.relearn_lr,
            batch: self.batch,
            seed: self.seed,
        }
    }

    pub fn meta(&self, ckpt: &Checkpoint) -> ReportMeta {
        ReportMeta {
            seed: self.seed,
            config_hash: self.config_hash(),
            tool_version: TOOL_VERSION.to_string(),
            checkpoint: ckpt.digest(),
        }
    }
}

/// Corpus, splits, abstention QA and the tokenizer covering all of them
/// plus every word the prompt synthesizers can emit.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub corpus: Corpus,
    pub splits: CorpusSplits,
    pub abstain: Vec<QAPair>,
    pub tokenizer: Tokenizer,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let corpus = generate_corpus(cfg.seed, cfg.n_profiles, cfg.qa_per_profile)?;
    let splits = split_forget_retain(&corpus, cfg.forget_fraction, cfg.seed)?;
    let abstain = generate_abstain_qa(cfg.seed, cfg.n_abstain);
    let lex = lexicon();
    let anchor_lex = lexicon_for_anchors(corpus.profiles.iter().map(|p| p.name.as_str()));
    let tokenizer = Tokenizer::build(
        corpus
            .qa
            .iter()
            .chain(&abstain)
            .flat_map(|p| [p.question.as_str(), p.answer.as_str()])
            .chain(lex.iter().map(String::as_str))
            .chain(anchor_lex.iter().map(String::as_str)),
    )?;
    Ok(Prepared {
        corpus,
        splits,
        abstain,
        tokenizer,
    })
}

impl Prepared {
    fn encode(&self, pairs: &[QAPair]) -> Vec<EncodedQa> {
        pairs.iter().map(|p| self.tokenizer.encode_qa(p)).collect()
    }

    /// Forget, retain and abstention QA: everything the base model sees.
    pub fn base_training_set(&self) -> Vec<EncodedQa> {
        let mut v = self.encode(&self.splits.forget);
        v.extend(self.encode(&self.splits.retain));
        v.extend(self.encode(&self.abstain));
        v
    }

    /// The base training set minus the forget split.
    pub fn retrain_set(&self) -> Vec<EncodedQa> {
        let mut v = self.encode(&self.splits.retain);
        v.extend(self.encode(&self.abstain));
        v
    }

    pub fn anchors(&self) -> Vec<String> {
        self.splits.forget_profiles.iter().map(|p| p.name.clone()).collect()
    }

    pub fn check_anchor(&self, anchor: &str) -> Result<()> {
        match self.corpus.find_profile(anchor) {
            Some(_) => Ok(()),
            None => Err(Error::UnknownAnchor(anchor.to_string())),
        }
    }

    fn items(&self, pairs: &[QAPair]) -> Vec<EvalItem> {
        pairs.iter().map(|p| EvalItem::new(&self.tokenizer, p)).collect()
    }

    pub fn eval_set(&self) -> EvalSet {
        let retain_names: HashSet<&str> = self.splits.retain_profiles.iter().map(String::as_str).collect();
        let holdout_utility: Vec<QAPair> = self
            .splits
            .holdout
            .iter()
            .zip(&self.splits.holdout_index)
            .filter(|(_, (name, _))| retain_names.contains(name.as_str()))
            .map(|(p, _)| p.clone())
            .collect();
        EvalSet {
            forget: self.items(&self.splits.forget),
            retain: self.items(&self.splits.retain),
            holdout: self.items(&self.splits.holdout),
            holdout_utility: self.items(&holdout_utility),
        }
    }

    /// Forget QA plus an evenly spaced retain subset of size `n_retain`.
    pub fn probes(&self, n_retain: usize) -> Probes {
        let retain = &self.splits.retain;
        let n = n_retain.min(retain.len());
        let picked: Vec<QAPair> = (0..n).map(|i| retain[i * retain.len() / n.max(1)].clone()).collect();
        Probes {
            forget: self.items(&self.splits.forget),
            retain: self.items(&picked),
        }
    }

    pub fn utility_probe(&self, n_retain: usize) -> UtilityProbe {
        let set = self.eval_set();
        let p = self.probes(n_retain);
        UtilityProbe {
            retain: p.retain,
            holdout: set.holdout_utility,
        }
    }
}

/// Mean teacher-forced EM over the forget split.
pub fn forget_em(ckpt: &Checkpoint, prep: &Prepared) -> Result<f64> {
    let items = prep.base_forget_encoded();
    let mut total = 0.0;
    for q in &items {
        total += exact_memorization(ckpt, q)?;
    }
    Ok(total / items.len() as f64)
}

impl Prepared {
    fn base_forget_encoded(&self) -> Vec<EncodedQa> {
        self.encode(&self.splits.forget)
    }
}

/// Trains the base model on forget + retain + abstention QA.
pub fn train_base(cfg: &ExperimentConfig, prep: &Prepared) -> Result<(Checkpoint, TrainHistory)> {
    let init = Checkpoint::init(cfg.model_config(prep.tokenizer.vocab_size()))?;
    let (mut ck, hist) = train_lm(&init, &prep.base_training_set(), &cfg.base_train())?;
    ck.tokenizer = Some(prep.tokenizer.fingerprint());
    Ok((ck, hist))
}

/// Same recipe as [`train_base`] without the forget split.
pub fn train_retrain(cfg: &ExperimentConfig, prep: &Prepared) -> Result<Checkpoint> {
    let mut ck = retrain_reference(
        &cfg.model_config(prep.tokenizer.vocab_size()),
        &prep.retrain_set(),
        &cfg.base_train(),
    )?;
    ck.tokenizer = Some(prep.tokenizer.fingerprint());
    Ok(ck)
}

/// The three synthetic pools for a set of anchors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticPools {
    pub anchors: Vec<String>,
    pub safe_refs: Vec<SafeReferencePrompt>,
    pub virtual_prompts: Vec<VirtualPrompt>,
    pub retain_prompts: Vec<RetainPrompt>,
}

pub fn synthesize(cfg: &ExperimentConfig, anchors: &[String]) -> Result<SyntheticPools> {
    if anchors.is_empty() {
        return Err(Error::EmptyInput("anchors"));
    }
    let mut pools = SyntheticPools {
        anchors: anchors.to_vec(),
        safe_refs: gen_safe_references(cfg.seed, cfg.n_safe_refs)?,
        virtual_prompts: Vec::new(),
        retain_prompts: Vec::new(),
    };
    for (i, a) in anchors.iter().enumerate() {
        let seed = cfg.seed.wrapping_add(i as u64);
        pools.virtual_prompts.extend(gen_virtual_prompts(a, cfg.n_virtual, seed)?);
        let conf = make_confusables(a, cfg.n_confusable, seed)?;
        let unrel = make_unrelated(a, cfg.n_unrelated, seed)?;
        pools.retain_prompts.extend(gen_retain_pool(a, &conf, &unrel, cfg.n_retain, seed)?);
    }
    Ok(pools)
}

pub fn build_geometry(cfg: &ExperimentConfig, base: &Checkpoint, tok: &Tokenizer, pools: &SyntheticPools) -> Result<SafeGeometry> {
    let refs: Vec<Vec<u32>> = pools.safe_refs.iter().map(|r| tok.encode_prompt(&r.text)).collect();
    build_safe_geometry(base, &refs, &cfg.layer_set(), cfg.rank)
}

/// Where the likelihood baselines get their training pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Original,
}

impl std::str::FromStr for DataSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(DataSource::Synthetic),
            "original" => Ok(DataSource::Original),
            other => Err(Error::invalid(format!("unknown data source {other:?}"))),
        }
    }
}

pub fn unlearn_data(
    method: Method,
    source: DataSource,
    prep: &Prepared,
    pools: &SyntheticPools,
    cfg: &ExperimentConfig,
) -> Result<UnlearnData> {
    let tok = &prep.tokenizer;
    match (method, source) {
        (Method::Gu, DataSource::Original) => Err(Error::invalid(
            "geometric unlearning is source-free and cannot train on the original forget data",
        )),
        (Method::Gu, DataSource::Synthetic) => {
            let window = cfg.unlearn_config(method).window;
            let mut prompts = Vec::new();
            for vp in &pools.virtual_prompts {
                let tokens = tok.encode_prompt(&vp.text);
                let mut hits = Vec::new();
                for a in &pools.anchors {
                    hits.extend(make_hits(&tokens, &tok.tokenize(a), window)?);
                }
                if !hits.is_empty() {
                    prompts.push(HitPrompt { tokens, hits });
                }
            }
            let retain = pools.retain_prompts.iter().map(|r| tok.encode_prompt(&r.text)).collect();
            Ok(UnlearnData::Geometric { prompts, retain })
        }
        (_, DataSource::Original) => Ok(UnlearnData::Likelihood {
            forget: prep.encode(&prep.splits.forget),
            retain: prep.encode(&prep.splits.retain),
        }),
        (_, DataSource::Synthetic) => Ok(UnlearnData::Likelihood {
            forget: pools.virtual_prompts.iter().map(|v| tok.encode_qa(&v.to_qa())).collect(),
            retain: pools.retain_prompts.iter().map(|r| tok.encode_qa(&r.to_qa())).collect(),
        }),
    }
}

/// One finished unlearning job.
#[derive(Clone, Debug)]
pub struct UnlearnOutcome {
    pub checkpoint: Checkpoint,
    pub history: RunHistory,
    pub geometry: Option<SafeGeometry>,
}

pub fn run_unlearn(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    base: &Checkpoint,
    pools: &SyntheticPools,
    method: Method,
    source: DataSource,
) -> Result<UnlearnOutcome> {
    for a in &pools.anchors {
        prep.check_anchor(a)?;
    }
    let data = unlearn_data(method, source, prep, pools, cfg)?;
    let geometry = match method {
        Method::Gu => Some(build_geometry(cfg, base, &prep.tokenizer, pools)?),
        _ => None,
    };
    let (mut checkpoint, history) = unlearn(
        base,
        geometry.as_ref(),
        &data,
        &prep.probes(cfg.probe_retain),
        &prep.tokenizer,
        &cfg.unlearn_config(method),
    )?;
    checkpoint.tokenizer = base.tokenizer.clone();
    Ok(UnlearnOutcome {
        checkpoint,
        history,
        geometry,
    })
}

pub fn evaluate_checkpoint(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    ckpt: &Checkpoint,
    retrain: Option<&Checkpoint>,
) -> Result<MetricReport> {
    if let Some(fp) = &ckpt.tokenizer {
        if *fp != prep.tokenizer.fingerprint() {
            return Err(Error::TokenizerMismatch("checkpoint was trained with a different tokenizer".into()));
        }
    }
    evaluate(ckpt, retrain, &prep.tokenizer, &prep.eval_set(), &cfg.eval_config(), cfg.meta(ckpt))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: Method,
    pub source: DataSource,
    pub report: MetricReport,
    pub epochs_run: usize,
    pub converged_at: Option<usize>,
}

/// Everything the desk experiment measures. Wall-clock time is kept out so
/// that equal seeds give byte-identical JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeskReport {
    pub base_forget_em: f64,
    pub base: MetricReport,
    pub gu: MethodResult,
    pub ga_synthetic: MethodResult,
    pub graddiff_synthetic: MethodResult,
    pub graddiff_original: MethodResult,
    pub relearn_gu: RelearnDelta,
    pub relearn_graddiff: RelearnDelta,
}

/// Base, retrain reference, GU, the three baselines and the relearning
/// diagnostic on one seed.
pub fn desk_experiment(cfg: &ExperimentConfig) -> Result<DeskReport> {
    let t0 = Instant::now();
    let prep = prepare(cfg)?;
    let (base, _) = train_base(cfg, &prep)?;
    let base_forget_em = forget_em(&base, &prep)?;
    log::info!("base forget EM {base_forget_em:.3} ({:.0?})", t0.elapsed());
    let retrain = train_retrain(cfg, &prep)?;
    let pools = synthesize(cfg, &prep.anchors())?;
    let base_report = evaluate_checkpoint(cfg, &prep, &base, Some(&retrain))?;

    let run = |method, source| -> Result<(MethodResult, Checkpoint)> {
        let out = run_unlearn(cfg, &prep, &base, &pools, method, source)?;
        let report = evaluate_checkpoint(cfg, &prep, &out.checkpoint, Some(&retrain))?;
        log::info!("{method} ({source:?}) done after {} epochs ({:.0?})", out.history.epochs.len(), t0.elapsed());
        Ok((
            MethodResult {
                method,
                source,
                report,
                epochs_run: out.history.epochs.len(),
                converged_at: out.history.converged_at,
            },
            out.checkpoint,
        ))
    };
    let (gu, gu_ck) = run(Method::Gu, DataSource::Synthetic)?;
    let (ga_synthetic, _) = run(Method::Ga, DataSource::Synthetic)?;
    let (graddiff_synthetic, _) = run(Method::GradDiff, DataSource::Synthetic)?;
    let (graddiff_original, gd_ck) = run(Method::GradDiff, DataSource::Original)?;

    let set = prep.eval_set();
    let util = prep.utility_probe(cfg.probe_retain);
    let rl = cfg.relearn_train();
    let (_, relearn_gu) = relearn(&gu_ck, &set.forget, &util, &prep.tokenizer, &rl)?;
    let (_, relearn_graddiff) = relearn(&gd_ck, &set.forget, &util, &prep.tokenizer, &rl)?;
    log::info!("desk experiment finished in {:.0?}", t0.elapsed());
    Ok(DeskReport {
        base_forget_em,
        base: base_report,
        gu,
        ga_synthetic,
        graddiff_synthetic,
        graddiff_original,
        relearn_gu,
        relearn_graddiff,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Rank,
    Layers,
    Budget,
    SafeRefs,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rank" => Ok(SweepAxis::Rank),
            "layers" => Ok(SweepAxis::Layers),
            "budget" => Ok(SweepAxis::Budget),
            "safe_refs" | "safe-refs" => Ok(SweepAxis::SafeRefs),
            other => Err(Error::invalid(format!("unknown sweep axis {other:?}"))),
        }
    }
}

/// Named layer presets for an `n`-layer model.
pub fn layer_presets(n: usize) -> Vec<(String, Vec<usize>)> {
    let last = n - 1;
    let mut out = vec![
        ("first".to_string(), vec![0]),
        ("middle".to_string(), vec![n / 2]),
        ("last".to_string(), vec![last]),
        ("last_two".to_string(), (n.saturating_sub(2)..n).collect()),
    ];
    if n >= 5 {
        out.push(("last_five".to_string(), (n - 5..n).collect()));
    }
    out.push(("all".to_string(), (0..n).collect()));
    out
}

/// The settings a sweep visits, each as a label and a modified config.
pub fn sweep_settings(cfg: &ExperimentConfig, axis: SweepAxis) -> Vec<(String, ExperimentConfig)> {
    let with = |f: &dyn Fn(&mut ExperimentConfig)| {
        let mut c = cfg.clone();
        f(&mut c);
        c
    };
    match axis {
        SweepAxis::Rank => [2, 4, 8, 16]
            .into_iter()
            .map(|k| (k.to_string(), with(&|c| c.rank = k)))
            .collect(),
        SweepAxis::Layers => layer_presets(cfg.n_layers)
            .into_iter()
            .map(|(name, ls)| (name, with(&|c| c.layers = Some(ls.clone()))))
            .collect(),
        SweepAxis::Budget => [10, 20, 30, 40]
            .into_iter()
            .map(|n| {
                (
                    n.to_string(),
                    with(&|c| {
                        c.n_virtual = n;
                        c.n_retain = n;
                    }),
                )
            })
            .collect(),
        SweepAxis::SafeRefs => [2, 5, 10, 20]
            .into_iter()
            .map(|n| (n.to_string(), with(&|c| c.n_safe_refs = n)))
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub setting: String,
    pub es: f64,
    pub fr: f64,
    pub mu: f64,
    pub epochs_to_convergence: Option<usize>,
    pub wall_clock_s: f64,
}

pub const SWEEP_HEADER: &str = "axis,setting,es,fr,mu,epochs_to_convergence,wall_clock_s";

impl SweepRow {
    pub fn csv(&self) -> String {
        let axis = serde_json::to_value(self.axis).expect("axis serializes");
        format!(
            "{},{},{:.6},{:.6},{:.6},{},{:.3}",
            axis.as_str().unwrap_or_default(),
            self.setting,
            self.es,
            self.fr,
            self.mu,
            self.epochs_to_convergence.map_or(String::new(), |e| e.to_string()),
            self.wall_clock_s
        )
    }
}

/// GU runs over one ablation axis sharing a single base model. The clock
/// covers synthesis, geometry and unlearning of each setting.
pub fn sweep(cfg: &ExperimentConfig, prep: &Prepared, base: &Checkpoint, axis: SweepAxis) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for (setting, c) in sweep_settings(cfg, axis) {
        c.validate()?;
        let t = Instant::now();
        let pools = synthesize(&c, &prep.anchors())?;
        let out = run_unlearn(&c, prep, base, &pools, Method::Gu, DataSource::Synthetic)?;
        let wall = t.elapsed().as_secs_f64();
        let report = evaluate_checkpoint(&c, prep, &out.checkpoint, None)?;
        rows.push(SweepRow {
            axis,
            setting,
            es: report.es,
            fr: report.fr,
            mu: report.mu,
            epochs_to_convergence: out.history.converged_at,
            wall_clock_s: wall,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip_and_hash() {
        let c = ExperimentConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c);
        let partial: ExperimentConfig = serde_json::from_str(r#"{"seed": 9}"#).unwrap();
        assert_eq!(partial.seed, 9);
        assert_ne!(partial.config_hash(), c.config_hash());
        let mut moved = c.clone();
        moved.out_dir = "elsewhere".into();
        assert_eq!(moved.config_hash(), c.config_hash());
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn fraction_is_validated() {
        let c = ExperimentConfig {
            forget_fraction: 0.03,
            ..Default::default()
        };
        assert!(c.validate().unwrap_err().is_validation());
    }

    #[test]
    fn tokenizer_covers_synthetic_pools() {
        let cfg = ExperimentConfig::default();
        let prep = prepare(&cfg).unwrap();
        let pools = synthesize(&cfg, &prep.anchors()).unwrap();
        let tok = &prep.tokenizer;
        let texts = pools
            .virtual_prompts
            .iter()
            .map(|v| v.text.clone())
            .chain(pools.retain_prompts.iter().flat_map(|r| [r.text.clone(), r.answer.clone()]))
            .chain(pools.safe_refs.iter().map(|s| s.text.clone()));
        for t in texts {
            assert!(!tok.tokenize(&t).contains(&crate::corpus::UNK_ID), "{t}");
        }
    }

    #[test]
    fn eval_set_shapes() {
        let cfg = ExperimentConfig::default();
        let prep = prepare(&cfg).unwrap();
        let set = prep.eval_set();
        assert_eq!(set.forget.len(), 8);
        assert_eq!(set.holdout.len(), 40);
        assert_eq!(set.holdout_utility.len(), 38);
        assert_eq!(prep.probes(16).retain.len(), 16);
    }

    #[test]
    fn sweep_axes() {
        let cfg = ExperimentConfig::default();
        assert_eq!(sweep_settings(&cfg, SweepAxis::Rank).len(), 4);
        let names: Vec<String> = sweep_settings(&cfg, SweepAxis::Layers).into_iter().map(|s| s.0).collect();
        for n in ["first", "middle", "last"] {
            assert!(names.iter().any(|x| x == n));
        }
    }

    #[test]
    fn gu_rejects_original_data() {
        let cfg = ExperimentConfig::default();
        let prep = prepare(&cfg).unwrap();
        let pools = synthesize(&cfg, &prep.anchors()).unwrap();
        let err = unlearn_data(Method::Gu, DataSource::Original, &prep, &pools, &cfg).unwrap_err();
        assert!(err.is_validation());
    }
}
