//! Differentiable objectives. Each loss returns its value together with one
//! [`Upstream`] per input trace, ready for [`Checkpoint::backward`].
//!
//! [`Checkpoint::backward`]: crate::model::Checkpoint::backward

use serde::{Deserialize, Serialize};

use crate::corpus::EncodedQa;
use crate::error::{Error, Result};
use crate::geometry::{pooled_state, AnchorHit, SafeGeometry};
use crate::model::{answer_nll, Checkpoint, ForwardTrace, HiddenGrad, Upstream};
use crate::numkit::{dot, log_softmax, norm, reflect, stabilized_cosine, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_cent: f64,
    pub w_fold: f64,
    pub eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_cent: 0.5,
            w_fold: 0.5,
            eps: 1e-8,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_cent >= 0.0 && self.w_fold >= 0.0) {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid("eps must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cent: f64,
    pub fold: f64,
    pub bg: f64,
    pub ret: f64,
    pub core: f64,
    pub retain: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(cent: f64, fold: f64, bg: f64, ret: f64, w: &LossWeights) -> Self {
        let core = w.w_cent * cent + w.w_fold * fold;
        let retain = bg + ret;
        LossBreakdown {
            cent,
            fold,
            bg,
            ret,
            core,
            retain,
            total: core + retain,
        }
    }
}

/// Log-probabilities of a frozen model over one prompt, one row per position.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherDist {
    tokens: Vec<u32>,
    logp: Matrix,
}

impl TeacherDist {
    pub fn new(teacher: &Checkpoint, tokens: &[u32]) -> Result<Self> {
        let tr = teacher.forward(tokens)?;
        Ok(Self::from_trace(&tr))
    }

    pub fn from_trace(trace: &ForwardTrace) -> Self {
        let (t, v) = (trace.logits.rows(), trace.logits.cols());
        let mut logp = Matrix::zeros(t, v);
        for u in 0..t {
            logp.row_mut(u).copy_from_slice(&log_softmax(trace.logits_at(u)));
        }
        TeacherDist {
            tokens: trace.tokens().to_vec(),
            logp,
        }
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }
}

/// `Σ_u w_u KL(teacher_u ‖ student_u)` and its gradient on the student logits.
/// KL is taken in log space from the student logits, so no probability floor
/// is needed.
fn weighted_kl(student: &ForwardTrace, teacher: &TeacherDist, weights: &[(usize, f64)]) -> Result<(f64, Matrix)> {
    if student.tokens() != teacher.tokens() {
        return Err(Error::MismatchedTrace);
    }
    let (t, v) = (student.logits.rows(), student.logits.cols());
    let mut grad = Matrix::zeros(t, v);
    let mut total = 0.0;
    for &(u, w) in weights {
        let lq = log_softmax(student.logits_at(u));
        let lp = teacher.logp.row(u);
        let mut kl = 0.0;
        let g = grad.row_mut(u);
        for i in 0..v {
            let p = lp[i].exp();
            if p > 0.0 {
                kl += p * (lp[i] - lq[i]);
            }
            g[i] = w * (lq[i].exp() - p);
        }
        total += w * kl;
    }
    Ok((total, grad))
}

/// Masked teacher-student KL on one prompt, normalized by the mask count.
/// `None` when every position is masked out.
pub fn masked_kl(student: &ForwardTrace, teacher: &TeacherDist, mask: &[bool]) -> Result<Option<(f64, Matrix)>> {
    if mask.len() + 1 != student.len() {
        return Err(Error::DimensionMismatch {
            expected: student.len().saturating_sub(1),
            found: mask.len(),
        });
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Ok(None);
    }
    let w = 1.0 / count as f64;
    let weights: Vec<(usize, f64)> = mask.iter().enumerate().filter(|(_, &m)| m).map(|(u, _)| (u, w)).collect();
    weighted_kl(student, teacher, &weights).map(Some)
}

/// Mean teacher-student KL over every position of one prompt.
pub fn sequence_kl(student: &ForwardTrace, teacher: &TeacherDist) -> Result<(f64, Matrix)> {
    let t = student.len();
    let w = 1.0 / t as f64;
    let weights: Vec<(usize, f64)> = (0..t).map(|u| (u, w)).collect();
    weighted_kl(student, teacher, &weights)
}

/// One anchor hit paired with the student trace of its prompt, the teacher
/// distribution of that prompt and the prompt's background mask.
pub struct HitInput<'a> {
    pub hit: &'a AnchorHit,
    pub trace: &'a ForwardTrace,
    pub teacher: &'a TeacherDist,
    pub mask: &'a [bool],
}

pub struct RetainInput<'a> {
    pub trace: &'a ForwardTrace,
    pub teacher: &'a TeacherDist,
}

fn spread(layer: usize, window: &[usize], g: &[f64], scale: f64) -> Vec<HiddenGrad> {
    let per = scale / window.len() as f64;
    window
        .iter()
        .map(|&u| HiddenGrad {
            layer,
            position: u,
            grad: g.iter().map(|x| x * per).collect(),
        })
        .collect()
}

fn shifted(trace: &ForwardTrace, hit: &AnchorHit, layer: usize, mean: &[f64]) -> Result<Vec<f64>> {
    if trace.tokens() != hit.prompt.as_slice() {
        return Err(Error::MismatchedTrace);
    }
    let mut z = pooled_state(trace, &hit.window, layer)?;
    if z.len() != mean.len() {
        return Err(Error::DimensionMismatch {
            expected: mean.len(),
            found: z.len(),
        });
    }
    for (a, m) in z.iter_mut().zip(mean) {
        *a -= m;
    }
    Ok(z)
}

/// `(1/|L|) Σ_ℓ ‖z̃_ℓ‖²` for one hit and its hidden-state gradients.
pub fn cent_for_hit(trace: &ForwardTrace, hit: &AnchorHit, geom: &SafeGeometry) -> Result<(f64, Vec<HiddenGrad>)> {
    let inv_l = 1.0 / geom.layers().len() as f64;
    let mut value = 0.0;
    let mut grads = Vec::new();
    for (layer, mean, _) in geom.iter() {
        let z = shifted(trace, hit, layer, mean)?;
        value += inv_l * dot(&z, &z);
        grads.extend(spread(layer, &hit.window, &z, 2.0 * inv_l));
    }
    Ok((value, grads))
}

/// `d cos_ε(a, Ra) / da` for symmetric orthogonal `R`.
fn fold_cos_grad(a: &[f64], ra: &[f64], rra: &[f64], eps: f64) -> Vec<f64> {
    let na = norm(a);
    let nb = norm(ra);
    let num = dot(a, ra);
    let den = (na + eps) * (nb + eps);
    let da = if na > 0.0 { 1.0 / na } else { 0.0 };
    let db = if nb > 0.0 { 1.0 / nb } else { 0.0 };
    (0..a.len())
        .map(|i| {
            // d num = 2 Ra (R symmetric); d‖a‖ = a/‖a‖; d‖Ra‖ = Rᵀ Ra / ‖Ra‖
            let dnum = 2.0 * ra[i];
            let dden = (nb + eps) * a[i] * da + (na + eps) * rra[i] * db;
            dnum / den - num * dden / (den * den)
        })
        .collect()
}

/// `(1/|L|) Σ_ℓ (1 − cos_ε(z̃_ℓ, R_ℓ z̃_ℓ))` for one hit and its gradients.
pub fn fold_for_hit(
    trace: &ForwardTrace,
    hit: &AnchorHit,
    geom: &SafeGeometry,
    eps: f64,
) -> Result<(f64, Vec<HiddenGrad>)> {
    let inv_l = 1.0 / geom.layers().len() as f64;
    let mut value = 0.0;
    let mut grads = Vec::new();
    for (layer, mean, basis) in geom.iter() {
        let z = shifted(trace, hit, layer, mean)?;
        let rz = reflect(&z, basis)?;
        value += inv_l * (1.0 - stabilized_cosine(&z, &rz, eps)?);
        let rrz = reflect(&rz, basis)?;
        let g = fold_cos_grad(&z, &rz, &rrz, eps);
        grads.extend(spread(layer, &hit.window, &g, -inv_l));
    }
    Ok((value, grads))
}

fn hidden_only(grads: Vec<HiddenGrad>, scale: f64) -> Upstream {
    Upstream {
        logits: None,
        hidden: grads
            .into_iter()
            .map(|mut g| {
                g.grad.iter_mut().for_each(|x| *x *= scale);
                g
            })
            .collect(),
    }
}

fn scale_matrix(mut m: Matrix, s: f64) -> Matrix {
    m.data_mut().iter_mut().for_each(|x| *x *= s);
    m
}

/// Batch mean of the centroid loss; one upstream per hit.
pub fn loss_cent(hits: &[HitInput<'_>], geom: &SafeGeometry) -> Result<(f64, Vec<Upstream>)> {
    if hits.is_empty() {
        return Err(Error::EmptyInput("hit batch"));
    }
    let inv = 1.0 / hits.len() as f64;
    let mut total = 0.0;
    let mut ups = Vec::with_capacity(hits.len());
    for h in hits {
        let (v, g) = cent_for_hit(h.trace, h.hit, geom)?;
        total += v;
        ups.push(hidden_only(g, inv));
    }
    Ok((total * inv, ups))
}

/// Batch mean of the fold-back loss; one upstream per hit.
pub fn loss_fold(hits: &[HitInput<'_>], geom: &SafeGeometry, eps: f64) -> Result<(f64, Vec<Upstream>)> {
    if hits.is_empty() {
        return Err(Error::EmptyInput("hit batch"));
    }
    let inv = 1.0 / hits.len() as f64;
    let mut total = 0.0;
    let mut ups = Vec::with_capacity(hits.len());
    for h in hits {
        let (v, g) = fold_for_hit(h.trace, h.hit, geom, eps)?;
        total += v;
        ups.push(hidden_only(g, inv));
    }
    Ok((total * inv, ups))
}

/// Background keep loss: mean over hits whose prompt has at least one
/// unmasked position. Also returns how many hits were excluded.
pub fn loss_bg(hits: &[HitInput<'_>]) -> Result<(f64, Vec<Upstream>, usize)> {
    let mut parts = Vec::with_capacity(hits.len());
    for h in hits {
        parts.push(masked_kl(h.trace, h.teacher, h.mask)?);
    }
    let used = parts.iter().filter(|p| p.is_some()).count();
    let excluded = hits.len() - used;
    if used == 0 {
        return Ok((0.0, vec![Upstream::default(); hits.len()], excluded));
    }
    let inv = 1.0 / used as f64;
    let mut total = 0.0;
    let ups = parts
        .into_iter()
        .map(|p| match p {
            Some((v, g)) => {
                total += v;
                Upstream {
                    logits: Some(scale_matrix(g, inv)),
                    hidden: Vec::new(),
                }
            }
            None => Upstream::default(),
        })
        .collect();
    Ok((total * inv, ups, excluded))
}

/// Retain distillation: batch mean of per-prompt sequence KL. An empty batch
/// contributes zero.
pub fn loss_ret(retain: &[RetainInput<'_>]) -> Result<(f64, Vec<Upstream>)> {
    if retain.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let inv = 1.0 / retain.len() as f64;
    let mut total = 0.0;
    let mut ups = Vec::with_capacity(retain.len());
    for r in retain {
        let (v, g) = sequence_kl(r.trace, r.teacher)?;
        total += v;
        ups.push(Upstream {
            logits: Some(scale_matrix(g, inv)),
            hidden: Vec::new(),
        });
    }
    Ok((total * inv, ups))
}

pub struct TotalLoss {
    pub breakdown: LossBreakdown,
    /// One upstream per hit, then one per retain prompt.
    pub hit_upstream: Vec<Upstream>,
    pub retain_upstream: Vec<Upstream>,
    pub bg_excluded: usize,
}

/// `w_cent·cent + w_fold·fold + bg + ret` with combined gradients.
pub fn total_loss(
    hits: &[HitInput<'_>],
    retain: &[RetainInput<'_>],
    geom: &SafeGeometry,
    w: &LossWeights,
) -> Result<TotalLoss> {
    w.validate()?;
    let (cent, cent_up) = loss_cent(hits, geom)?;
    let (fold, fold_up) = loss_fold(hits, geom, w.eps)?;
    let (bg, bg_up, bg_excluded) = loss_bg(hits)?;
    let (ret, ret_up) = loss_ret(retain)?;
    let breakdown = LossBreakdown::combine(cent, fold, bg, ret, w);
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite("total loss".into()));
    }
    let hit_upstream = cent_up
        .into_iter()
        .zip(fold_up)
        .zip(bg_up)
        .map(|((c, f), b)| {
            let mut u = hidden_only(c.hidden, w.w_cent);
            u.merge(hidden_only(f.hidden, w.w_fold));
            u.merge(b);
            u
        })
        .collect();
    Ok(TotalLoss {
        breakdown,
        hit_upstream,
        retain_upstream: ret_up,
        bg_excluded,
    })
}

/// Negative mean answer NLL over a batch (gradient ascent on likelihood).
/// Each trace must be the forward pass of the matching example.
pub fn loss_ga(forget: &[(&ForwardTrace, &EncodedQa)]) -> Result<(f64, Vec<Upstream>)> {
    let (nll, ups) = mean_answer_nll(forget)?;
    let ups = ups
        .into_iter()
        .map(|u| Upstream {
            logits: u.logits.map(|m| scale_matrix(m, -1.0)),
            hidden: Vec::new(),
        })
        .collect();
    Ok((-nll, ups))
}

/// `loss_ga(forget) + mean NLL(retain)`.
pub fn loss_graddiff(
    forget: &[(&ForwardTrace, &EncodedQa)],
    retain: &[(&ForwardTrace, &EncodedQa)],
) -> Result<(f64, Vec<Upstream>, Vec<Upstream>)> {
    if retain.is_empty() {
        return Err(Error::EmptyInput("retain batch"));
    }
    let (ga, f_up) = loss_ga(forget)?;
    let (nll, r_up) = mean_answer_nll(retain)?;
    Ok((ga + nll, f_up, r_up))
}

/// Token-weighted mean answer NLL and per-example gradients.
pub fn mean_answer_nll(batch: &[(&ForwardTrace, &EncodedQa)]) -> Result<(f64, Vec<Upstream>)> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("QA batch"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    let mut grads = Vec::with_capacity(batch.len());
    for (tr, qa) in batch {
        if tr.tokens() != qa.tokens.as_slice() {
            return Err(Error::MismatchedTrace);
        }
        let (v, n, g) = answer_nll(tr, qa);
        total += v;
        count += n;
        grads.push(g);
    }
    let inv = 1.0 / count.max(1) as f64;
    let ups = grads
        .into_iter()
        .map(|g| Upstream {
            logits: Some(scale_matrix(g, inv)),
            hidden: Vec::new(),
        })
        .collect();
    Ok((total * inv, ups))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{background_mask, make_hits, WindowConfig};
    use crate::model::ModelConfig;
    use crate::numkit::{decompose, Basis};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn mk_hit(prompt: Vec<u32>, t: usize, window: Vec<usize>) -> AnchorHit {
        AnchorHit { prompt, t, window }
    }

    fn geometry_with(mean: Vec<f64>, cols: Vec<Vec<f64>>) -> SafeGeometry {
        let dim = mean.len();
        SafeGeometry::from_parts(vec![0], vec![mean], vec![Basis::new(dim, cols).unwrap()]).unwrap()
    }

    fn unit(dim: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        v
    }

    fn tiny(seed: u64) -> Checkpoint {
        Checkpoint::init(ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            vocab_size: 30,
            max_ctx: 16,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn cent_examples() {
        let ck = tiny(1);
        let tr = ck.forward(&[2, 5, 6]).unwrap();
        let hit = mk_hit(vec![2, 5, 6], 1, vec![1]);
        let h = tr.hidden_at(0, 1).to_vec();
        let g = geometry_with(h.clone(), vec![unit(16, 0)]);
        assert_eq!(cent_for_hit(&tr, &hit, &g).unwrap().0, 0.0);

        let mut mu = h.clone();
        mu[0] -= 3.0;
        mu[1] -= 4.0;
        let g = geometry_with(mu, vec![unit(16, 0)]);
        assert!((cent_for_hit(&tr, &hit, &g).unwrap().0 - 25.0).abs() < 1e-12);
    }

    #[test]
    fn cent_batch_mean() {
        let ck = tiny(1);
        let tr = ck.forward(&[2, 5, 6]).unwrap();
        let teacher = TeacherDist::from_trace(&tr);
        let mask = vec![true; 2];
        let hit_a = mk_hit(vec![2, 5, 6], 1, vec![1]);
        let hit_b = mk_hit(vec![2, 5, 6], 2, vec![2]);
        // μ sits √2 from one state along a direction orthogonal to both
        // states' offset, so the other state's loss is 2 + ‖h_b − h_a‖².
        let ha = tr.hidden_at(0, 1).to_vec();
        let hb = tr.hidden_at(0, 2).to_vec();
        let d: Vec<f64> = hb.iter().zip(&ha).map(|(b, a)| b - a).collect();
        let mut e = unit(16, 3);
        let c = dot(&e, &d) / dot(&d, &d);
        e.iter_mut().zip(&d).for_each(|(x, y)| *x -= c * y);
        let en = norm(&e);
        let mu: Vec<f64> = ha.iter().zip(&e).map(|(a, x)| a + 2f64.sqrt() * x / en).collect();
        let g = geometry_with(mu, vec![unit(16, 0)]);
        let (va, _) = cent_for_hit(&tr, &hit_a, &g).unwrap();
        let (vb, _) = cent_for_hit(&tr, &hit_b, &g).unwrap();
        assert!((va - 2.0).abs() < 1e-12);
        assert!((vb - (2.0 + dot(&d, &d))).abs() < 1e-10);
        let hits = [
            HitInput { hit: &hit_a, trace: &tr, teacher: &teacher, mask: &mask },
            HitInput { hit: &hit_b, trace: &tr, teacher: &teacher, mask: &mask },
        ];
        let (v, ups) = loss_cent(&hits, &g).unwrap();
        assert!((v - (va + vb) / 2.0).abs() < 1e-12);
        assert_eq!(ups.len(), 2);
        assert!(loss_cent(&[], &g).is_err());
    }

    #[test]
    fn fold_examples() {
        let ck = tiny(2);
        let tr = ck.forward(&[2, 5, 6]).unwrap();
        let hit = mk_hit(vec![2, 5, 6], 1, vec![1]);
        let h = tr.hidden_at(0, 1).to_vec();
        let zero = vec![0.0; 16];

        // z̃ = h lies in the span of its own direction
        let g_in = geometry_with(zero.clone(), vec![h.iter().map(|x| x / norm(&h)).collect()]);
        assert!(fold_for_hit(&tr, &hit, &g_in, 1e-8).unwrap().0.abs() < 1e-6);

        // a basis orthogonal to h
        let mut o = unit(16, 0);
        let hn: Vec<f64> = h.iter().map(|x| x / norm(&h)).collect();
        let c = dot(&o, &hn);
        o.iter_mut().zip(&hn).for_each(|(a, b)| *a -= c * b);
        let on = norm(&o);
        o.iter_mut().for_each(|x| *x /= on);
        let g_out = geometry_with(zero.clone(), vec![o.clone()]);
        assert!((fold_for_hit(&tr, &hit, &g_out, 1e-8).unwrap().0 - 2.0).abs() < 1e-6);

        // equal energy in and out: μ chosen so that z̃ = (1, 1, 0, …)
        let mut mu = h.clone();
        mu[0] -= 1.0;
        mu[1] -= 1.0;
        let g_eq = geometry_with(mu, vec![unit(16, 0)]);
        let v = fold_for_hit(&tr, &hit, &g_eq, 1e-8).unwrap().0;
        assert!((v - 1.0).abs() < 1e-6);
        let z = [1.0, 1.0];
        let (_, out) = decompose(&[1.0, 1.0], &Basis::new(2, vec![vec![1.0, 0.0]]).unwrap()).unwrap();
        assert!((v - 2.0 * dot(&out, &out) / dot(&z, &z)).abs() < 1e-6);
    }

    #[test]
    fn fold_identity_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let h = 8;
            let k = 3;
            let basis = Basis::random(h, k, &mut rng).unwrap();
            let z: Vec<f64> = (0..h).map(|_| StandardNormal.sample(&mut rng)).collect();
            let rz = reflect(&z, &basis).unwrap();
            let lhs = 1.0 - stabilized_cosine(&z, &rz, 1e-300).unwrap();
            let (_, out) = decompose(&z, &basis).unwrap();
            let rhs = 2.0 * dot(&out, &out) / dot(&z, &z);
            assert!((lhs - rhs).abs() <= 1e-9);
        }
    }

    #[test]
    fn kl_examples_and_direction() {
        let ck = tiny(3);
        let toks = [2u32, 7, 8];
        let tr = ck.forward(&toks).unwrap();
        let same = TeacherDist::from_trace(&tr);
        let (v, g) = masked_kl(&tr, &same, &[true, true]).unwrap().unwrap();
        assert!(v.abs() < 1e-14);
        assert!(g.data().iter().all(|x| x.abs() < 1e-14));
        assert!(masked_kl(&tr, &same, &[false, false]).unwrap().is_none());
        assert!(sequence_kl(&tr, &same).unwrap().0.abs() < 1e-14);

        // single unmasked position with a two-token vocabulary
        let tiny2 = Checkpoint::init(ModelConfig {
            n_layers: 1,
            d_model: 4,
            n_heads: 1,
            d_ff: 4,
            vocab_size: 6,
            max_ctx: 4,
            seed: 1,
        })
        .unwrap();
        let mut student = tiny2.clone();
        let head = student.layout().range("lm_head").unwrap();
        student.params_mut()[head].fill(0.0);
        let s_tr = student.forward(&[2, 3]).unwrap();
        let mut teacher = TeacherDist::from_trace(&s_tr);
        let row = teacher.logp.row_mut(0);
        row.fill(f64::NEG_INFINITY);
        row[0] = 0.0;
        let (v, _) = masked_kl(&s_tr, &teacher, &[true]).unwrap().unwrap();
        assert!((v - 6f64.ln()).abs() < 1e-9);

        // swapping the roles changes a non-trivial value
        let other = tiny(9);
        let tr_b = other.forward(&toks).unwrap();
        let t_a = TeacherDist::from_trace(&tr);
        let t_b = TeacherDist::from_trace(&tr_b);
        let ab = sequence_kl(&tr_b, &t_a).unwrap().0;
        let ba = sequence_kl(&tr, &t_b).unwrap().0;
        assert!(ab > 0.0 && ba > 0.0 && (ab - ba).abs() > 1e-12);
    }

    #[test]
    fn ret_concatenation_recomputes_directly() {
        let mut st = tiny(5);
        st.params_mut()[0] += 0.5;
        let te = tiny(6);
        let x = vec![2u32, 9, 10, 11];
        let xx: Vec<u32> = x.iter().chain(&x).copied().collect();
        let (v1, _) = sequence_kl(&st.forward(&x).unwrap(), &TeacherDist::new(&te, &x).unwrap()).unwrap();
        let s2 = st.forward(&xx).unwrap();
        let t2 = TeacherDist::new(&te, &xx).unwrap();
        let (v2, _) = sequence_kl(&s2, &t2).unwrap();
        // first half is causal-identical to the single prompt
        let (tail_sum, _) = weighted_kl(&s2, &t2, &(4..8).map(|u| (u, 1.0)).collect::<Vec<_>>()).unwrap();
        assert!((v2 * 8.0 - (v1 * 4.0 + tail_sum)).abs() < 1e-10);
    }

    #[test]
    fn breakdown_arithmetic() {
        let b = LossBreakdown::combine(2.0, 1.0, 0.1, 0.2, &LossWeights::default());
        assert!((b.core - 1.5).abs() < 1e-15);
        assert!((b.retain - 0.3).abs() < 1e-15);
        assert!((b.total - 1.8).abs() < 1e-15);
        let z = LossBreakdown::combine(0.0, 0.0, 0.0, 0.0, &LossWeights::default());
        assert_eq!(z.total, 0.0);
    }

    #[test]
    fn ga_examples() {
        let mut ck = tiny(1);
        let head = ck.layout().range("lm_head").unwrap();
        ck.params_mut()[head].fill(0.0);
        let qa = EncodedQa {
            tokens: vec![2, 5, 4, 6, 7, 3],
            answer_start: 3,
        };
        let tr = ck.forward(&qa.tokens).unwrap();
        let (v, ga_up) = loss_ga(&[(&tr, &qa)]).unwrap();
        assert!((v + 30f64.ln()).abs() < 1e-9);
        let (nll, nll_up) = mean_answer_nll(&[(&tr, &qa)]).unwrap();
        assert_eq!(v, -nll);
        let a = ga_up[0].logits.as_ref().unwrap().data();
        let b = nll_up[0].logits.as_ref().unwrap().data();
        assert!(a.iter().zip(b).all(|(x, y)| *x == -*y));
        let (gd, _, _) = loss_graddiff(&[(&tr, &qa)], &[(&tr, &qa)]).unwrap();
        assert!(gd.abs() < 1e-12);
        assert!(loss_ga(&[]).is_err());
    }

    #[test]
    fn zero_gradient_fixed_point() {
        let ck = tiny(8);
        let prompt = vec![2u32, 10, 11, 12, 13, 4];
        let tr = ck.forward(&prompt).unwrap();
        let teacher = TeacherDist::from_trace(&tr);
        let hits = make_hits(&prompt, &[11, 12], WindowConfig { w_pre: 1, w_post: 1 }).unwrap();
        let hit = &hits[0];
        let mask = background_mask(prompt.len(), &[hit.window.clone()]);
        let mean: Vec<Vec<f64>> = [0usize, 1]
            .iter()
            .map(|&l| pooled_state(&tr, &hit.window, l).unwrap())
            .collect();
        let bases = vec![Basis::new(16, vec![unit(16, 0)]).unwrap(); 2];
        let geom = SafeGeometry::from_parts(vec![0, 1], mean, bases).unwrap();
        let hi = [HitInput { hit, trace: &tr, teacher: &teacher, mask: &mask }];
        let ri = [RetainInput { trace: &tr, teacher: &teacher }];
        let out = total_loss(&hi, &ri, &geom, &LossWeights::default()).unwrap();
        let mut grad = vec![0.0; ck.n_params()];
        ck.backward_into(&prompt, &tr, &out.hit_upstream[0], &mut grad).unwrap();
        ck.backward_into(&prompt, &tr, &out.retain_upstream[0], &mut grad).unwrap();
        assert!(grad.iter().all(|g| g.abs() < 1e-10));
    }
}
