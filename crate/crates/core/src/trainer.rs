//! Unlearning runs (geometric and likelihood baselines), convergence,
//! the retrained reference model, and the relearning diagnostic.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{EncodedQa, Tokenizer};
use crate::error::{Error, Result};
use crate::evalsuite::{model_utility, probe_rouge, EvalItem};
use crate::geometry::{background_mask, AnchorHit, SafeGeometry, WindowConfig};
use crate::model::{snapshot_teacher, Adam, Checkpoint, ForwardTrace, ModelConfig, TrainConfig, Upstream};
use crate::objectives::{
    loss_ga, loss_graddiff, total_loss, HitInput, LossBreakdown, LossWeights, RetainInput, TeacherDist,
};
use crate::seeded_rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Gu,
    Ga,
    GradDiff,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gu" => Ok(Method::Gu),
            "ga" => Ok(Method::Ga),
            "graddiff" | "grad_diff" => Ok(Method::GradDiff),
            other => Err(Error::invalid(format!("unknown method {other:?}"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Gu => "gu",
            Method::Ga => "ga",
            Method::GradDiff => "graddiff",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub threshold: f64,
    pub patience: usize,
}

impl Default for Convergence {
    fn default() -> Self {
        Convergence {
            threshold: 0.1,
            patience: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnlearnConfig {
    pub method: Method,
    pub lr: f64,
    pub max_epochs: usize,
    /// Examples per step; half forget-side, half retain-side.
    pub batch: usize,
    pub weights: LossWeights,
    pub window: WindowConfig,
    pub layers: Vec<usize>,
    pub rank: usize,
    pub seed: u64,
    pub convergence: Convergence,
    /// Generation slack for the ROUGE probes.
    pub probe_slack: usize,
}

impl UnlearnConfig {
    /// Desk defaults for a model with `n_layers` layers: the last two layers,
    /// rank 4, learning rate by forget fraction.
    pub fn desk_default(method: Method, n_layers: usize, fraction: f64, seed: u64) -> Self {
        UnlearnConfig {
            method,
            lr: default_lr(fraction),
            max_epochs: 40,
            batch: 8,
            weights: LossWeights::default(),
            window: WindowConfig::default(),
            layers: (n_layers.saturating_sub(2)..n_layers).collect(),
            rank: 4,
            seed,
            convergence: Convergence::default(),
            probe_slack: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 {
            return Err(Error::invalid("max_epochs must be at least 1"));
        }
        if self.batch < 2 || self.batch % 2 != 0 {
            return Err(Error::invalid(format!("batch {} must be even and at least 2", self.batch)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.convergence.patience == 0 {
            return Err(Error::invalid("convergence patience must be at least 1"));
        }
        self.weights.validate()?;
        if self.method == Method::Gu {
            if self.layers.is_empty() {
                return Err(Error::EmptyInput("layer set"));
            }
            if self.rank == 0 {
                return Err(Error::invalid("rank must be positive"));
            }
        }
        Ok(())
    }
}

/// 1e-4 for the smallest forget fraction, 1e-5 otherwise.
pub fn default_lr(fraction: f64) -> f64 {
    if fraction <= 0.01 + 1e-12 {
        1e-4
    } else {
        1e-5
    }
}

/// A synthesized prompt with every anchor hit it contains.
#[derive(Clone, Debug, PartialEq)]
pub struct HitPrompt {
    pub tokens: Vec<u32>,
    pub hits: Vec<AnchorHit>,
}

impl HitPrompt {
    pub fn mask(&self) -> Vec<bool> {
        let windows: Vec<Vec<usize>> = self.hits.iter().map(|h| h.window.clone()).collect();
        background_mask(self.tokens.len(), &windows)
    }
}

/// Training inputs. GU consumes `Geometric`; the likelihood baselines
/// consume `Likelihood`, built either from the original splits or from the
/// same synthetic pools GU sees.
#[derive(Clone, Debug, PartialEq)]
pub enum UnlearnData {
    Geometric { prompts: Vec<HitPrompt>, retain: Vec<Vec<u32>> },
    Likelihood { forget: Vec<EncodedQa>, retain: Vec<EncodedQa> },
}

/// Evaluation-only probe sets; never trained on.
#[derive(Clone, Debug, PartialEq)]
pub struct Probes {
    pub forget: Vec<EvalItem>,
    pub retain: Vec<EvalItem>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub forget_rouge: f64,
    pub retain_rouge: f64,
    pub forget_seen: usize,
    pub retain_seen: usize,
    pub bg_excluded: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub method: Method,
    pub epochs: Vec<EpochRecord>,
    pub converged_at: Option<usize>,
}

impl RunHistory {
    pub fn forget_probe(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.forget_rouge).collect()
    }
}

/// First 1-based epoch ending a run of `patience` consecutive probe values
/// below `threshold`.
pub fn check_convergence(probe: &[f64], threshold: f64, patience: usize) -> Option<usize> {
    let mut run = 0;
    for (i, &v) in probe.iter().enumerate() {
        if v < threshold {
            run += 1;
            if run >= patience.max(1) {
                return Some(i + 1);
            }
        } else {
            run = 0;
        }
    }
    None
}

/// `n` indices drawn by cycling seeded shuffles of `0..len`.
fn cycled(len: usize, n: usize, seed: u64, tag: &str) -> Vec<usize> {
    let mut out = Vec::with_capacity(n);
    let mut round = 0;
    while out.len() < n {
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut seeded_rng(seed, &format!("{tag}/{round}")));
        out.extend(order.into_iter().take(n - out.len()));
        round += 1;
    }
    out
}

/// Pairs of sampled forget-side and retain-side indices per step. One epoch
/// is a shuffled pass over the forget side; the retain side is cycled to
/// the same length.
fn epoch_plan(n_forget: usize, n_retain: usize, half: usize, seed: u64, epoch: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
    let f = cycled(n_forget, n_forget, seed, &format!("unlearn/forget/{epoch}"));
    let r = cycled(n_retain, n_forget, seed, &format!("unlearn/retain/{epoch}"));
    f.chunks(half).zip(r.chunks(half)).map(|(a, b)| (a.to_vec(), b.to_vec())).collect()
}

struct GuState<'a> {
    geom: &'a SafeGeometry,
    hits: Vec<(usize, usize)>,
    prompts: &'a [HitPrompt],
    masks: Vec<Vec<bool>>,
    hit_teacher: Vec<TeacherDist>,
    retain: &'a [Vec<u32>],
    retain_teacher: Vec<TeacherDist>,
}

fn gu_step(
    model: &Checkpoint,
    st: &GuState<'_>,
    fidx: &[usize],
    ridx: &[usize],
    w: &LossWeights,
    grad: &mut [f64],
) -> Result<(LossBreakdown, usize)> {
    let f_traces: Vec<ForwardTrace> = fidx
        .iter()
        .map(|&i| model.forward(&st.prompts[st.hits[i].0].tokens))
        .collect::<Result<_>>()?;
    let r_traces: Vec<ForwardTrace> = ridx.iter().map(|&i| model.forward(&st.retain[i])).collect::<Result<_>>()?;
    let hit_inputs: Vec<HitInput<'_>> = fidx
        .iter()
        .zip(&f_traces)
        .map(|(&i, tr)| {
            let (p, h) = st.hits[i];
            HitInput {
                hit: &st.prompts[p].hits[h],
                trace: tr,
                teacher: &st.hit_teacher[p],
                mask: &st.masks[p],
            }
        })
        .collect();
    let ret_inputs: Vec<RetainInput<'_>> = ridx
        .iter()
        .zip(&r_traces)
        .map(|(&i, tr)| RetainInput {
            trace: tr,
            teacher: &st.retain_teacher[i],
        })
        .collect();
    let tl = total_loss(&hit_inputs, &ret_inputs, st.geom, w)?;
    for (tr, up) in f_traces.iter().zip(&tl.hit_upstream) {
        model.backward_into(tr.tokens(), tr, up, grad)?;
    }
    for (tr, up) in r_traces.iter().zip(&tl.retain_upstream) {
        model.backward_into(tr.tokens(), tr, up, grad)?;
    }
    Ok((tl.breakdown, tl.bg_excluded))
}

fn likelihood_step(
    model: &Checkpoint,
    method: Method,
    forget: &[EncodedQa],
    retain: &[EncodedQa],
    fidx: &[usize],
    ridx: &[usize],
    grad: &mut [f64],
) -> Result<LossBreakdown> {
    let ft: Vec<ForwardTrace> = fidx.iter().map(|&i| model.forward(&forget[i].tokens)).collect::<Result<_>>()?;
    let fb: Vec<(&ForwardTrace, &EncodedQa)> = ft.iter().zip(fidx.iter().map(|&i| &forget[i])).collect();
    let apply = |traces: &[ForwardTrace], ups: &[Upstream], grad: &mut [f64]| -> Result<()> {
        for (tr, up) in traces.iter().zip(ups) {
            model.backward_into(tr.tokens(), tr, up, grad)?;
        }
        Ok(())
    };
    match method {
        Method::Ga => {
            let (v, ups) = loss_ga(&fb)?;
            apply(&ft, &ups, grad)?;
            Ok(LossBreakdown {
                core: v,
                total: v,
                ..Default::default()
            })
        }
        Method::GradDiff => {
            let rt: Vec<ForwardTrace> =
                ridx.iter().map(|&i| model.forward(&retain[i].tokens)).collect::<Result<_>>()?;
            let rb: Vec<(&ForwardTrace, &EncodedQa)> = rt.iter().zip(ridx.iter().map(|&i| &retain[i])).collect();
            let (v, f_up, r_up) = loss_graddiff(&fb, &rb)?;
            apply(&ft, &f_up, grad)?;
            apply(&rt, &r_up, grad)?;
            let ga: f64 = -fb_mean_nll(&fb);
            Ok(LossBreakdown {
                core: ga,
                retain: v - ga,
                total: v,
                ..Default::default()
            })
        }
        Method::Gu => unreachable!("geometric runs use gu_step"),
    }
}

fn fb_mean_nll(batch: &[(&ForwardTrace, &EncodedQa)]) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for (tr, qa) in batch {
        let (v, n, _) = crate::model::answer_nll(tr, qa);
        total += v;
        count += n;
    }
    total / count.max(1) as f64
}

/// Runs one unlearning job. The base checkpoint doubles as the frozen
/// teacher; likelihood baselines ignore `geometry`, and GA also ignores the
/// retain side of `data`.
pub fn unlearn(
    base: &Checkpoint,
    geometry: Option<&SafeGeometry>,
    data: &UnlearnData,
    probes: &Probes,
    tok: &Tokenizer,
    cfg: &UnlearnConfig,
) -> Result<(Checkpoint, RunHistory)> {
    cfg.validate()?;
    if probes.forget.is_empty() {
        return Err(Error::EmptyInput("forget probe"));
    }
    let teacher = snapshot_teacher(base);
    let mut model = base.clone();
    let half = cfg.batch / 2;

    let gu = match (cfg.method, data) {
        (Method::Gu, UnlearnData::Geometric { prompts, retain }) => {
            let geom = geometry.ok_or_else(|| Error::invalid("geometric unlearning needs a safe geometry"))?;
            if geom.layers() != cfg.layers.as_slice() {
                return Err(Error::invalid(format!(
                    "geometry layers {:?} differ from configured {:?}",
                    geom.layers(),
                    cfg.layers
                )));
            }
            if retain.is_empty() {
                return Err(Error::EmptyInput("retain prompts"));
            }
            let hits: Vec<(usize, usize)> = prompts
                .iter()
                .enumerate()
                .flat_map(|(p, hp)| (0..hp.hits.len()).map(move |h| (p, h)))
                .collect();
            if hits.is_empty() {
                return Err(Error::EmptyInput("anchor hits"));
            }
            Some(GuState {
                geom,
                hits,
                prompts,
                masks: prompts.iter().map(HitPrompt::mask).collect(),
                hit_teacher: prompts
                    .iter()
                    .map(|p| TeacherDist::new(&teacher, &p.tokens))
                    .collect::<Result<_>>()?,
                retain,
                retain_teacher: retain.iter().map(|r| TeacherDist::new(&teacher, r)).collect::<Result<_>>()?,
            })
        }
        (Method::Gu, _) => return Err(Error::invalid("geometric unlearning trains on synthesized prompts only")),
        (_, UnlearnData::Geometric { .. }) => {
            return Err(Error::invalid("likelihood baselines need QA pairs"));
        }
        (_, UnlearnData::Likelihood { forget, retain }) => {
            if forget.is_empty() {
                return Err(Error::EmptyInput("forget QA"));
            }
            if cfg.method == Method::GradDiff && retain.is_empty() {
                return Err(Error::EmptyInput("retain QA"));
            }
            for q in forget.iter().chain(retain) {
                model.check_tokens(&q.tokens)?;
            }
            None
        }
    };
    let (n_forget, n_retain) = match (&gu, data) {
        (Some(st), _) => (st.hits.len(), st.retain.len()),
        (None, UnlearnData::Likelihood { forget, retain }) => (forget.len(), retain.len().max(1)),
        _ => unreachable!(),
    };

    let mut opt = Adam::new(model.n_params(), cfg.lr);
    let mut grad = vec![0.0; model.n_params()];
    let mut history = RunHistory {
        method: cfg.method,
        epochs: Vec::new(),
        converged_at: None,
    };
    for epoch in 0..cfg.max_epochs {
        let plan = epoch_plan(n_forget, n_retain, half, cfg.seed, epoch);
        let mut sum = LossBreakdown::default();
        let mut forget_seen = 0;
        let mut retain_seen = 0;
        let mut bg_excluded = 0;
        for (step, (fidx, ridx)) in plan.iter().enumerate() {
            grad.fill(0.0);
            let bd = match (&gu, data) {
                (Some(st), _) => {
                    let (bd, ex) = gu_step(&model, st, fidx, ridx, &cfg.weights, &mut grad)?;
                    bg_excluded += ex;
                    bd
                }
                (None, UnlearnData::Likelihood { forget, retain }) => {
                    likelihood_step(&model, cfg.method, forget, retain, fidx, ridx, &mut grad)?
                }
                _ => unreachable!(),
            };
            let finite = bd.total.is_finite() && grad.iter().all(|g| g.is_finite());
            if !finite {
                log::error!("non-finite loss at epoch {} step {step}", epoch + 1);
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    step,
                    last: Box::new(model),
                });
            }
            let before = model.params().to_vec();
            opt.step(model.params_mut(), &grad);
            if model.params().iter().any(|x| !x.is_finite()) {
                model.params_mut().copy_from_slice(&before);
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    step,
                    last: Box::new(model),
                });
            }
            model.step += 1;
            add_scaled(&mut sum, &bd, fidx.len() as f64);
            forget_seen += fidx.len();
            if cfg.method != Method::Ga {
                retain_seen += ridx.len();
            }
        }
        scale(&mut sum, 1.0 / forget_seen.max(1) as f64);
        let forget_rouge = probe_rouge(&model, tok, &probes.forget, cfg.probe_slack)?;
        let retain_rouge = if probes.retain.is_empty() {
            0.0
        } else {
            probe_rouge(&model, tok, &probes.retain, cfg.probe_slack)?
        };
        log::info!(
            "{} epoch {}: loss {:.5} forget rouge {forget_rouge:.3} retain rouge {retain_rouge:.3}",
            cfg.method,
            epoch + 1,
            sum.total
        );
        history.epochs.push(EpochRecord {
            epoch: epoch + 1,
            loss: sum,
            forget_rouge,
            retain_rouge,
            forget_seen,
            retain_seen,
            bg_excluded,
        });
        if let Some(e) = check_convergence(&history.forget_probe(), cfg.convergence.threshold, cfg.convergence.patience)
        {
            history.converged_at = Some(e);
            break;
        }
    }
    debug_assert_eq!(teacher.digest(), base.digest());
    Ok((model, history))
}

fn add_scaled(acc: &mut LossBreakdown, x: &LossBreakdown, w: f64) {
    acc.cent += w * x.cent;
    acc.fold += w * x.fold;
    acc.bg += w * x.bg;
    acc.ret += w * x.ret;
    acc.core += w * x.core;
    acc.retain += w * x.retain;
    acc.total += w * x.total;
}

fn scale(acc: &mut LossBreakdown, w: f64) {
    add_scaled(acc, &acc.clone(), w - 1.0);
}

/// A fresh model trained exactly like the base run on data that excludes
/// the forget split.
pub fn retrain_reference(model_cfg: &ModelConfig, retain_only: &[EncodedQa], train: &TrainConfig) -> Result<Checkpoint> {
    if retain_only.is_empty() {
        return Err(Error::EmptyInput("retain split"));
    }
    let init = Checkpoint::init(model_cfg.clone())?;
    Ok(crate::model::train_lm(&init, retain_only, train)?.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelearnDelta {
    pub fr_before: f64,
    pub fr_after: f64,
    pub mu_before: f64,
    pub mu_after: f64,
    pub delta_fr: f64,
    pub delta_mu: f64,
}

/// Items for the utility term of a relearning diagnostic.
#[derive(Clone, Debug, PartialEq)]
pub struct UtilityProbe {
    pub retain: Vec<EvalItem>,
    pub holdout: Vec<EvalItem>,
}

fn quick_utility(ckpt: &Checkpoint, tok: &Tokenizer, u: &UtilityProbe, slack: usize) -> Result<f64> {
    let r = probe_rouge(ckpt, tok, &u.retain, slack)?;
    let h = probe_rouge(ckpt, tok, &u.holdout, slack)?;
    let mut p = 0.0;
    for it in &u.retain {
        p += crate::evalsuite::answer_probability(ckpt, &it.qa)?;
    }
    Ok(model_utility(&[r, p / u.retain.len() as f64, h]))
}

/// Plain fine-tuning on the forget QA; reports how much forget ROUGE-L and
/// utility move relative to the unlearned checkpoint.
pub fn relearn(
    unlearned: &Checkpoint,
    forget: &[EvalItem],
    utility: &UtilityProbe,
    tok: &Tokenizer,
    train: &TrainConfig,
) -> Result<(Checkpoint, RelearnDelta)> {
    if train.epochs == 0 {
        return Err(Error::invalid("relearning needs at least one epoch"));
    }
    if forget.is_empty() || utility.retain.is_empty() || utility.holdout.is_empty() {
        return Err(Error::EmptyInput("relearning probe"));
    }
    let slack = 8;
    let fr_before = probe_rouge(unlearned, tok, forget, slack)?;
    let mu_before = quick_utility(unlearned, tok, utility, slack)?;
    let data: Vec<EncodedQa> = forget.iter().map(|i| i.qa.clone()).collect();
    let (ck, _) = crate::model::train_lm(unlearned, &data, train)?;
    let fr_after = probe_rouge(&ck, tok, forget, slack)?;
    let mu_after = quick_utility(&ck, tok, utility, slack)?;
    Ok((
        ck,
        RelearnDelta {
            fr_before,
            fr_after,
            mu_before,
            mu_after,
            delta_fr: fr_after - fr_before,
            delta_mu: mu_after - mu_before,
        },
    ))
}
