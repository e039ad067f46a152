#![allow(dead_code)]

use gu_core::geometry::{background_mask, make_hits, AnchorHit, SafeGeometry, WindowConfig};
use gu_core::model::{Checkpoint, ForwardTrace, ModelConfig, Upstream};
use gu_core::numkit::{grad_check_coords, Basis, GradCheckReport};
use gu_core::objectives::{
    loss_bg, loss_cent, loss_fold, loss_ga, loss_graddiff, loss_ret, total_loss, HitInput, LossWeights,
    RetainInput, TeacherDist,
};
use gu_core::corpus::EncodedQa;
use gu_core::seeded_rng;
use rand::Rng;
use rand_distr::StandardNormal;

pub const STEP: f64 = 1e-5;

pub fn tiny_config(seed: u64) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        vocab_size: 30,
        max_ctx: 16,
        seed,
    }
}

fn jitter(ck: &Checkpoint, scale: f64, tag: &str) -> Checkpoint {
    let mut rng = seeded_rng(ck.config().seed, tag);
    let params = ck
        .params()
        .iter()
        .map(|x| x + scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Checkpoint::from_params(ck.config().clone(), params).unwrap()
}

/// Student, frozen teacher and toy data for the loss gradient checks.
pub struct Fixture {
    pub student: Checkpoint,
    pub prompts: Vec<Vec<u32>>,
    pub hits: Vec<(usize, AnchorHit)>,
    pub masks: Vec<Vec<bool>>,
    pub hit_teacher: Vec<TeacherDist>,
    pub retain: Vec<Vec<u32>>,
    pub retain_teacher: Vec<TeacherDist>,
    pub forget_qa: Vec<EncodedQa>,
    pub retain_qa: Vec<EncodedQa>,
    pub geom: SafeGeometry,
    pub weights: LossWeights,
}

impl Fixture {
    pub fn new(seed: u64) -> Self {
        let base = Checkpoint::init(tiny_config(seed)).unwrap();
        let student = jitter(&base, 0.3, "student");
        let teacher = jitter(&student, 0.05, "teacher");
        let anchor = [20u32, 21];
        let prompts = vec![
            vec![2, 5, 20, 21, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17],
            vec![2, 6, 20, 21, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 20, 21],
        ];
        let cfg = WindowConfig::default();
        let mut hits = Vec::new();
        let mut masks = Vec::new();
        for (p, toks) in prompts.iter().enumerate() {
            let hs = make_hits(toks, &anchor, cfg).unwrap();
            let windows: Vec<Vec<usize>> = hs.iter().map(|h| h.window.clone()).collect();
            masks.push(background_mask(toks.len(), &windows));
            hits.extend(hs.into_iter().map(|h| (p, h)));
        }
        let retain = vec![vec![2, 22, 23, 24, 25, 26, 27, 3], vec![2, 28, 29, 5, 6, 7, 22, 23, 24, 3]];
        let hit_teacher = prompts.iter().map(|p| TeacherDist::new(&teacher, p).unwrap()).collect();
        let retain_teacher = retain.iter().map(|p| TeacherDist::new(&teacher, p).unwrap()).collect();
        let forget_qa = vec![
            EncodedQa { tokens: vec![2, 20, 21, 9, 4, 10, 11, 12, 3], answer_start: 5 },
            EncodedQa { tokens: vec![2, 13, 20, 21, 4, 14, 15, 3], answer_start: 5 },
        ];
        let retain_qa = vec![
            EncodedQa { tokens: vec![2, 22, 23, 4, 24, 25, 3], answer_start: 4 },
            EncodedQa { tokens: vec![2, 26, 27, 28, 4, 29, 5, 6, 3], answer_start: 5 },
        ];
        let mut rng = seeded_rng(seed, "geometry");
        let dim = student.config().d_model;
        let layers = vec![0, 1];
        let means = layers
            .iter()
            .map(|_| (0..dim).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let bases = layers.iter().map(|_| Basis::random(dim, 4, &mut rng).unwrap()).collect();
        let geom = SafeGeometry::from_parts(layers, means, bases).unwrap();
        Fixture {
            student,
            prompts,
            hits,
            masks,
            hit_teacher,
            retain,
            retain_teacher,
            forget_qa,
            retain_qa,
            geom,
            weights: LossWeights::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Cent,
    Fold,
    Bg,
    Ret,
    Total,
    Ga,
    GradDiff,
}

impl LossKind {
    pub const ALL: [LossKind; 7] = [
        LossKind::Cent,
        LossKind::Fold,
        LossKind::Bg,
        LossKind::Ret,
        LossKind::Total,
        LossKind::Ga,
        LossKind::GradDiff,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Cent => "cent",
            LossKind::Fold => "fold",
            LossKind::Bg => "bg",
            LossKind::Ret => "ret",
            LossKind::Total => "total",
            LossKind::Ga => "ga",
            LossKind::GradDiff => "graddiff",
        }
    }
}

struct Traces {
    hit: Vec<ForwardTrace>,
    retain: Vec<ForwardTrace>,
    forget_qa: Vec<ForwardTrace>,
    retain_qa: Vec<ForwardTrace>,
}

fn traces(fx: &Fixture, model: &Checkpoint) -> Traces {
    let fwd = |seqs: &mut dyn Iterator<Item = &Vec<u32>>| -> Vec<ForwardTrace> {
        seqs.map(|s| model.forward(s).unwrap()).collect()
    };
    Traces {
        hit: fwd(&mut fx.hits.iter().map(|(p, _)| &fx.prompts[*p])),
        retain: fwd(&mut fx.retain.iter()),
        forget_qa: fwd(&mut fx.forget_qa.iter().map(|q| &q.tokens)),
        retain_qa: fwd(&mut fx.retain_qa.iter().map(|q| &q.tokens)),
    }
}

/// Loss value plus the (trace, upstream) pairs needed to backpropagate it.
fn evaluate<'t>(fx: &Fixture, kind: LossKind, tr: &'t Traces) -> (f64, Vec<(&'t ForwardTrace, Upstream)>) {
    let hits: Vec<HitInput<'_>> = fx
        .hits
        .iter()
        .zip(&tr.hit)
        .map(|((p, h), t)| HitInput {
            hit: h,
            trace: t,
            teacher: &fx.hit_teacher[*p],
            mask: &fx.masks[*p],
        })
        .collect();
    let retain: Vec<RetainInput<'_>> = tr
        .retain
        .iter()
        .zip(&fx.retain_teacher)
        .map(|(t, teacher)| RetainInput { trace: t, teacher })
        .collect();
    let fq: Vec<(&ForwardTrace, &EncodedQa)> = tr.forget_qa.iter().zip(&fx.forget_qa).collect();
    let rq: Vec<(&ForwardTrace, &EncodedQa)> = tr.retain_qa.iter().zip(&fx.retain_qa).collect();
    fn pair(ts: &[ForwardTrace], ups: Vec<Upstream>) -> Vec<(&ForwardTrace, Upstream)> {
        ts.iter().zip(ups).collect()
    }
    match kind {
        LossKind::Cent => {
            let (v, u) = loss_cent(&hits, &fx.geom).unwrap();
            (v, pair(&tr.hit, u))
        }
        LossKind::Fold => {
            let (v, u) = loss_fold(&hits, &fx.geom, fx.weights.eps).unwrap();
            (v, pair(&tr.hit, u))
        }
        LossKind::Bg => {
            let (v, u, excluded) = loss_bg(&hits).unwrap();
            assert_eq!(excluded, 0);
            (v, pair(&tr.hit, u))
        }
        LossKind::Ret => {
            let (v, u) = loss_ret(&retain).unwrap();
            (v, pair(&tr.retain, u))
        }
        LossKind::Total => {
            let t = total_loss(&hits, &retain, &fx.geom, &fx.weights).unwrap();
            let mut out = pair(&tr.hit, t.hit_upstream);
            out.extend(pair(&tr.retain, t.retain_upstream));
            (t.breakdown.total, out)
        }
        LossKind::Ga => {
            let (v, u) = loss_ga(&fq).unwrap();
            (v, pair(&tr.forget_qa, u))
        }
        LossKind::GradDiff => {
            let (v, fu, ru) = loss_graddiff(&fq, &rq).unwrap();
            let mut out = pair(&tr.forget_qa, fu);
            out.extend(pair(&tr.retain_qa, ru));
            (v, out)
        }
    }
}

pub fn loss_value(fx: &Fixture, kind: LossKind, model: &Checkpoint) -> f64 {
    evaluate(fx, kind, &traces(fx, model)).0
}

pub fn analytic_grad(fx: &Fixture, kind: LossKind) -> Vec<f64> {
    let tr = traces(fx, &fx.student);
    let (_, parts) = evaluate(fx, kind, &tr);
    let mut g = vec![0.0; fx.student.n_params()];
    for (tr, up) in &parts {
        fx.student.backward_into(tr.tokens(), tr, up, &mut g).unwrap();
    }
    g
}

/// Central-difference check of `kind` over every parameter coordinate.
pub fn check_loss(fx: &Fixture, kind: LossKind) -> GradCheckReport {
    let g = analytic_grad(fx, kind);
    let cfg = fx.student.config().clone();
    let loss = |theta: &[f64]| {
        let c = Checkpoint::from_params(cfg.clone(), theta.to_vec()).unwrap();
        loss_value(fx, kind, &c)
    };
    let coords: Vec<usize> = (0..fx.student.n_params()).collect();
    grad_check_coords(loss, &g, fx.student.params(), STEP, &coords).unwrap()
}
