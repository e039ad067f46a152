//! A small pre-LayerNorm decoder-only transformer with a hand-written
//! backward pass.
//!
//! Every block computes `x ← x + Attn(LN₁(x))`, `x ← x + MLP(LN₂(x))` and the
//! post-block residual stream is exposed as the layer's hidden state. The
//! backward pass accepts upstream gradients on the logits and on any
//! `(layer, position)` hidden state at the same time.

use std::ops::Deref;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::blobfile::{self, Tensor};
use crate::corpus::EncodedQa;
use crate::error::{Error, Result};
use crate::numkit::{gemm, Matrix};
use crate::seeded_rng;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_ctx: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// 4 layers, width 128, 4 heads, MLP 512, context 128.
    pub fn desk_default(vocab_size: usize, seed: u64) -> Self {
        ModelConfig {
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            d_ff: 512,
            vocab_size,
            max_ctx: 128,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < 6 || self.max_ctx == 0 {
            return Err(Error::invalid("vocab_size and max_ctx too small"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Clone, Copy, Debug)]
struct LayerOffsets {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

/// Named parameter tensors and their positions in the flat parameter vector.
#[derive(Clone, Debug)]
pub struct ParamLayout {
    entries: Vec<(String, Vec<usize>, usize)>,
    len: usize,
    tok_emb: usize,
    pos_emb: usize,
    layers: Vec<LayerOffsets>,
    lnf_g: usize,
    lnf_b: usize,
    head: usize,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (d, ff, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
        let mut entries = Vec::new();
        let mut len = 0usize;
        let mut add = |name: String, shape: Vec<usize>| {
            let off = len;
            len += shape.iter().product::<usize>();
            entries.push((name, shape, off));
            off
        };
        let tok_emb = add("tok_emb".into(), vec![v, d]);
        let pos_emb = add("pos_emb".into(), vec![cfg.max_ctx, d]);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = |s: &str| format!("blocks.{l}.{s}");
            layers.push(LayerOffsets {
                ln1_g: add(p("ln1.gain"), vec![d]),
                ln1_b: add(p("ln1.bias"), vec![d]),
                wq: add(p("attn.wq"), vec![d, d]),
                wk: add(p("attn.wk"), vec![d, d]),
                wv: add(p("attn.wv"), vec![d, d]),
                wo: add(p("attn.wo"), vec![d, d]),
                ln2_g: add(p("ln2.gain"), vec![d]),
                ln2_b: add(p("ln2.bias"), vec![d]),
                w1: add(p("mlp.w1"), vec![d, ff]),
                b1: add(p("mlp.b1"), vec![ff]),
                w2: add(p("mlp.w2"), vec![ff, d]),
                b2: add(p("mlp.b2"), vec![d]),
            });
        }
        let lnf_g = add("ln_f.gain".into(), vec![d]);
        let lnf_b = add("ln_f.bias".into(), vec![d]);
        let head = add("lm_head".into(), vec![d, v]);
        ParamLayout {
            entries,
            len,
            tok_emb,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
            head,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// `(name, shape, offset)` for every tensor, in storage order.
    pub fn entries(&self) -> &[(String, Vec<usize>, usize)] {
        &self.entries
    }

    pub fn range(&self, name: &str) -> Option<std::ops::Range<usize>> {
        self.entries
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, s, o)| *o..*o + s.iter().product::<usize>())
    }
}

/// Model parameters plus the configuration that shaped them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    config: ModelConfig,
    params: Vec<f64>,
    pub step: u64,
    /// Fingerprint of the tokenizer this model was trained with.
    pub tokenizer: Option<String>,
}

impl Checkpoint {
    /// Fresh random initialization from `config.seed`.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let mut params = vec![0.0; layout.len()];
        let mut rng = seeded_rng(config.seed, "model/init");
        let resid_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        for (name, shape, off) in layout.entries() {
            let n: usize = shape.iter().product();
            let slot = &mut params[*off..*off + n];
            if name.ends_with(".gain") {
                slot.fill(1.0);
            } else if name.ends_with(".bias") || name.ends_with(".b1") || name.ends_with(".b2") {
                slot.fill(0.0);
            } else {
                let std = if name.ends_with("attn.wo") || name.ends_with("mlp.w2") {
                    INIT_STD * resid_scale
                } else {
                    INIT_STD
                };
                for x in slot.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *x = z * std;
                }
            }
        }
        Ok(Checkpoint {
            config,
            params,
            step: 0,
            tokenizer: None,
        })
    }

    pub fn from_params(config: ModelConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        if params.len() != layout.len() {
            return Err(Error::DimensionMismatch {
                expected: layout.len(),
                found: params.len(),
            });
        }
        if params.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("checkpoint parameters".into()));
        }
        Ok(Checkpoint {
            config,
            params,
            step: 0,
            tokenizer: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(&self.config)
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// SHA-256 over the config and the exact parameter bytes.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).unwrap_or_default());
        for x in &self.params {
            h.update(x.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let layout = self.layout();
        let tensors: Vec<Tensor<'_>> = layout
            .entries()
            .iter()
            .map(|(name, shape, off)| Tensor {
                name: name.clone(),
                shape: shape.clone(),
                data: &self.params[*off..*off + shape.iter().product::<usize>()],
            })
            .collect();
        let meta = json!({
            "format": "gu-checkpoint",
            "version": 1,
            "config": self.config,
            "step": self.step,
            "tokenizer": self.tokenizer,
        });
        blobfile::write(path, meta, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut loaded = blobfile::read(path)?;
        if loaded.meta.get("format").and_then(|v| v.as_str()) != Some("gu-checkpoint") {
            return Err(Error::Format(format!("{} is not a checkpoint", path.display())));
        }
        let config: ModelConfig = serde_json::from_value(loaded.meta["config"].clone())?;
        config.validate()?;
        let step = loaded.meta["step"].as_u64().unwrap_or(0);
        let tokenizer = loaded.meta["tokenizer"].as_str().map(str::to_string);
        let layout = ParamLayout::new(&config);
        let mut params = vec![0.0; layout.len()];
        for (name, shape, off) in layout.entries() {
            let (s, data) = loaded.take(name)?;
            if &s != shape {
                return Err(Error::Format(format!("tensor {name} has shape {s:?}, want {shape:?}")));
            }
            params[*off..*off + data.len()].copy_from_slice(&data);
        }
        let mut ck = Checkpoint::from_params(config, params)?;
        ck.step = step;
        ck.tokenizer = tokenizer;
        Ok(ck)
    }
}

/// A deep-copied checkpoint that can only be read.
#[derive(Clone, Debug)]
pub struct FrozenCheckpoint(Arc<Checkpoint>);

impl Deref for FrozenCheckpoint {
    type Target = Checkpoint;

    fn deref(&self) -> &Checkpoint {
        &self.0
    }
}

pub fn snapshot_teacher(ckpt: &Checkpoint) -> FrozenCheckpoint {
    FrozenCheckpoint(Arc::new(ckpt.clone()))
}

struct LayerCache {
    ln1_xhat: Vec<f64>,
    ln1_rstd: Vec<f64>,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `n_heads × T × T`, row `i` holds the causal softmax over `j ≤ i`.
    probs: Vec<f64>,
    o: Vec<f64>,
    ln2_xhat: Vec<f64>,
    ln2_rstd: Vec<f64>,
    b: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
}

/// Logits and per-layer hidden states for one token sequence.
pub struct ForwardTrace {
    tokens: Vec<u32>,
    config: ModelConfig,
    /// `T × vocab`.
    pub logits: Matrix,
    /// One `T × d_model` matrix per layer (post-block residual stream).
    pub hidden: Vec<Matrix>,
    layers: Vec<LayerCache>,
    lnf_xhat: Vec<f64>,
    lnf_rstd: Vec<f64>,
    lnf_out: Vec<f64>,
}

impl ForwardTrace {
    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn logits_at(&self, pos: usize) -> &[f64] {
        self.logits.row(pos)
    }

    pub fn hidden_at(&self, layer: usize, pos: usize) -> &[f64] {
        self.hidden[layer].row(pos)
    }
}

fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], t: usize, d: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut xhat = vec![0.0; t * d];
    let mut rstd = vec![0.0; t];
    let mut out = vec![0.0; t * d];
    for r in 0..t {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for c in 0..d {
            let xh = (row[c] - mean) * rs;
            xhat[r * d + c] = xh;
            out[r * d + c] = xh * gain[c] + bias[c];
        }
    }
    (xhat, rstd, out)
}

/// Accumulates gain/bias gradients and returns the gradient w.r.t. the input.
fn layer_norm_backward(
    dy: &[f64],
    xhat: &[f64],
    rstd: &[f64],
    gain: &[f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
    t: usize,
    d: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; t * d];
    let mut dxhat = vec![0.0; d];
    for r in 0..t {
        let dyr = &dy[r * d..(r + 1) * d];
        let xr = &xhat[r * d..(r + 1) * d];
        let mut sum = 0.0;
        let mut sum_x = 0.0;
        for c in 0..d {
            dgain[c] += dyr[c] * xr[c];
            dbias[c] += dyr[c];
            dxhat[c] = dyr[c] * gain[c];
            sum += dxhat[c];
            sum_x += dxhat[c] * xr[c];
        }
        let scale = rstd[r] / d as f64;
        for c in 0..d {
            dx[r * d + c] = scale * (d as f64 * dxhat[c] - sum - xr[c] * sum_x);
        }
    }
    dx
}

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let th = (GELU_C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

/// Upstream gradient on one hidden state.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenGrad {
    pub layer: usize,
    pub position: usize,
    pub grad: Vec<f64>,
}

/// Upstream gradients attached to a forward trace.
#[derive(Clone, Debug, Default)]
pub struct Upstream {
    /// `T × vocab` gradient on the logits.
    pub logits: Option<Matrix>,
    pub hidden: Vec<HiddenGrad>,
}

impl Upstream {
    pub fn is_empty(&self) -> bool {
        self.logits.is_none() && self.hidden.is_empty()
    }

    /// Adds `other` into `self`.
    pub fn merge(&mut self, other: Upstream) {
        match (&mut self.logits, other.logits) {
            (Some(a), Some(b)) => {
                for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                    *x += y;
                }
            }
            (slot @ None, Some(b)) => *slot = Some(b),
            _ => {}
        }
        self.hidden.extend(other.hidden);
    }
}

impl Checkpoint {
    pub fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput("token sequence"));
        }
        if tokens.len() > self.config.max_ctx {
            return Err(Error::ContextOverflow {
                len: tokens.len(),
                max_ctx: self.config.max_ctx,
            });
        }
        if let Some(&id) = tokens.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::OutOfVocab {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    pub fn forward(&self, tokens: &[u32]) -> Result<ForwardTrace> {
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        let lay = ParamLayout::new(cfg);
        let p = &self.params;
        let (t, d, ff, v, nh) = (tokens.len(), cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.n_heads);
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let mut x = vec![0.0; t * d];
        for (r, &id) in tokens.iter().enumerate() {
            let te = &p[lay.tok_emb + id as usize * d..][..d];
            let pe = &p[lay.pos_emb + r * d..][..d];
            for c in 0..d {
                x[r * d + c] = te[c] + pe[c];
            }
        }

        let mut hidden = Vec::with_capacity(cfg.n_layers);
        let mut caches = Vec::with_capacity(cfg.n_layers);
        for lo in &lay.layers {
            let (ln1_xhat, ln1_rstd, a) =
                layer_norm(&x, &p[lo.ln1_g..][..d], &p[lo.ln1_b..][..d], t, d);
            let mut q = vec![0.0; t * d];
            let mut k = vec![0.0; t * d];
            let mut vv = vec![0.0; t * d];
            gemm(t, d, d, &a, false, &p[lo.wq..][..d * d], false, &mut q, false);
            gemm(t, d, d, &a, false, &p[lo.wk..][..d * d], false, &mut k, false);
            gemm(t, d, d, &a, false, &p[lo.wv..][..d * d], false, &mut vv, false);

            let mut probs = vec![0.0; nh * t * t];
            let mut o = vec![0.0; t * d];
            for h in 0..nh {
                let hc = h * dh;
                for i in 0..t {
                    let qi = &q[i * d + hc..][..dh];
                    let row = &mut probs[(h * t + i) * t..][..t];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let kj = &k[j * d + hc..][..dh];
                        let s = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                        row[j] = s;
                        max = max.max(s);
                    }
                    let mut sum = 0.0;
                    for r in row.iter_mut().take(i + 1) {
                        *r = (*r - max).exp();
                        sum += *r;
                    }
                    for r in row.iter_mut().take(i + 1) {
                        *r /= sum;
                    }
                    let oi = &mut o[i * d + hc..][..dh];
                    for j in 0..=i {
                        let pij = row[j];
                        let vj = &vv[j * d + hc..][..dh];
                        for c in 0..dh {
                            oi[c] += pij * vj[c];
                        }
                    }
                }
            }
            let mut x1 = x.clone();
            gemm(t, d, d, &o, false, &p[lo.wo..][..d * d], false, &mut x1, true);

            let (ln2_xhat, ln2_rstd, b) =
                layer_norm(&x1, &p[lo.ln2_g..][..d], &p[lo.ln2_b..][..d], t, d);
            let mut u = vec![0.0; t * ff];
            for r in 0..t {
                u[r * ff..(r + 1) * ff].copy_from_slice(&p[lo.b1..][..ff]);
            }
            gemm(t, d, ff, &b, false, &p[lo.w1..][..d * ff], false, &mut u, true);
            let g: Vec<f64> = u.iter().map(|&z| gelu(z)).collect();
            let mut x2 = x1;
            for r in 0..t {
                for c in 0..d {
                    x2[r * d + c] += p[lo.b2 + c];
                }
            }
            gemm(t, ff, d, &g, false, &p[lo.w2..][..ff * d], false, &mut x2, true);

            hidden.push(Matrix::from_vec(t, d, x2.clone()).map_err(|_| {
                Error::NonFinite("hidden state".into())
            })?);
            caches.push(LayerCache {
                ln1_xhat,
                ln1_rstd,
                a,
                q,
                k,
                v: vv,
                probs,
                o,
                ln2_xhat,
                ln2_rstd,
                b,
                u,
                g,
            });
            x = x2;
        }

        let (lnf_xhat, lnf_rstd, lnf_out) =
            layer_norm(&x, &p[lay.lnf_g..][..d], &p[lay.lnf_b..][..d], t, d);
        let mut logits = vec![0.0; t * v];
        gemm(t, d, v, &lnf_out, false, &p[lay.head..][..d * v], false, &mut logits, false);
        let logits =
            Matrix::from_vec(t, v, logits).map_err(|_| Error::NonFinite("logits".into()))?;

        Ok(ForwardTrace {
            tokens: tokens.to_vec(),
            config: cfg.clone(),
            logits,
            hidden,
            layers: caches,
            lnf_xhat,
            lnf_rstd,
            lnf_out,
        })
    }

    /// Parameter gradients for the given upstream signals.
    pub fn backward(&self, tokens: &[u32], trace: &ForwardTrace, upstream: &Upstream) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; self.params.len()];
        self.backward_into(tokens, trace, upstream, &mut grad)?;
        Ok(grad)
    }

    /// Like [`Checkpoint::backward`] but accumulates into `grad`.
    pub fn backward_into(
        &self,
        tokens: &[u32],
        trace: &ForwardTrace,
        upstream: &Upstream,
        grad: &mut [f64],
    ) -> Result<()> {
        let cfg = &self.config;
        if trace.config != *cfg || trace.tokens != tokens || grad.len() != self.params.len() {
            return Err(Error::MismatchedTrace);
        }
        let lay = ParamLayout::new(cfg);
        let p = &self.params;
        let (t, d, ff, v, nh) = (tokens.len(), cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.n_heads);
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        if let Some(dl) = &upstream.logits {
            if dl.rows() != t || dl.cols() != v {
                return Err(Error::DimensionMismatch {
                    expected: t * v,
                    found: dl.rows() * dl.cols(),
                });
            }
        }
        let mut hidden_up: Vec<Vec<&HiddenGrad>> = vec![Vec::new(); cfg.n_layers];
        for hg in &upstream.hidden {
            if hg.layer >= cfg.n_layers || hg.position >= t || hg.grad.len() != d {
                return Err(Error::invalid(format!(
                    "hidden gradient at layer {} position {} out of range",
                    hg.layer, hg.position
                )));
            }
            hidden_up[hg.layer].push(hg);
        }

        // gradient w.r.t. the final residual stream
        let mut dx = vec![0.0; t * d];
        if let Some(dl) = &upstream.logits {
            gemm(d, t, v, &trace.lnf_out, true, dl.data(), false, &mut grad[lay.head..][..d * v], true);
            let mut df = vec![0.0; t * d];
            gemm(t, v, d, dl.data(), false, &p[lay.head..][..d * v], true, &mut df, false);
            let (dg, db) = split_pair(grad, lay.lnf_g, lay.lnf_b, d);
            dx = layer_norm_backward(&df, &trace.lnf_xhat, &trace.lnf_rstd, &p[lay.lnf_g..][..d], dg, db, t, d);
        }

        for l in (0..cfg.n_layers).rev() {
            for hg in &hidden_up[l] {
                for c in 0..d {
                    dx[hg.position * d + c] += hg.grad[c];
                }
            }
            let lo = lay.layers[l];
            let c = &trace.layers[l];

            // MLP: x2 = x1 + g W2 + b2
            for r in 0..t {
                for col in 0..d {
                    grad[lo.b2 + col] += dx[r * d + col];
                }
            }
            gemm(ff, t, d, &c.g, true, &dx, false, &mut grad[lo.w2..][..ff * d], true);
            let mut du = vec![0.0; t * ff];
            gemm(t, d, ff, &dx, false, &p[lo.w2..][..ff * d], true, &mut du, false);
            for (dz, &z) in du.iter_mut().zip(&c.u) {
                *dz *= gelu_grad(z);
            }
            for r in 0..t {
                for col in 0..ff {
                    grad[lo.b1 + col] += du[r * ff + col];
                }
            }
            gemm(d, t, ff, &c.b, true, &du, false, &mut grad[lo.w1..][..d * ff], true);
            let mut dbn = vec![0.0; t * d];
            gemm(t, ff, d, &du, false, &p[lo.w1..][..d * ff], true, &mut dbn, false);
            let (dg, db) = split_pair(grad, lo.ln2_g, lo.ln2_b, d);
            let dx1_ln = layer_norm_backward(&dbn, &c.ln2_xhat, &c.ln2_rstd, &p[lo.ln2_g..][..d], dg, db, t, d);
            let mut dx1 = dx;
            for (a, b) in dx1.iter_mut().zip(&dx1_ln) {
                *a += b;
            }

            // attention: x1 = x + o Wo
            gemm(d, t, d, &c.o, true, &dx1, false, &mut grad[lo.wo..][..d * d], true);
            let mut do_ = vec![0.0; t * d];
            gemm(t, d, d, &dx1, false, &p[lo.wo..][..d * d], true, &mut do_, false);
            let mut dq = vec![0.0; t * d];
            let mut dk = vec![0.0; t * d];
            let mut dv = vec![0.0; t * d];
            let mut dp = vec![0.0; t];
            for h in 0..nh {
                let hc = h * dh;
                for i in 0..t {
                    let row = &c.probs[(h * t + i) * t..][..t];
                    let doi = &do_[i * d + hc..][..dh];
                    let mut dot_pd = 0.0;
                    for j in 0..=i {
                        let vj = &c.v[j * d + hc..][..dh];
                        let g = doi.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>();
                        dp[j] = g;
                        dot_pd += row[j] * g;
                        let dvj = &mut dv[j * d + hc..][..dh];
                        for cc in 0..dh {
                            dvj[cc] += row[j] * doi[cc];
                        }
                    }
                    let qi = &c.q[i * d + hc..][..dh];
                    for j in 0..=i {
                        let ds = row[j] * (dp[j] - dot_pd) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = &c.k[j * d + hc..][..dh];
                        let dqi = &mut dq[i * d + hc..][..dh];
                        for cc in 0..dh {
                            dqi[cc] += ds * kj[cc];
                        }
                        let dkj = &mut dk[j * d + hc..][..dh];
                        for cc in 0..dh {
                            dkj[cc] += ds * qi[cc];
                        }
                    }
                }
            }
            gemm(d, t, d, &c.a, true, &dq, false, &mut grad[lo.wq..][..d * d], true);
            gemm(d, t, d, &c.a, true, &dk, false, &mut grad[lo.wk..][..d * d], true);
            gemm(d, t, d, &c.a, true, &dv, false, &mut grad[lo.wv..][..d * d], true);
            let mut da = vec![0.0; t * d];
            gemm(t, d, d, &dq, false, &p[lo.wq..][..d * d], true, &mut da, false);
            gemm(t, d, d, &dk, false, &p[lo.wk..][..d * d], true, &mut da, true);
            gemm(t, d, d, &dv, false, &p[lo.wv..][..d * d], true, &mut da, true);
            let (dg, db) = split_pair(grad, lo.ln1_g, lo.ln1_b, d);
            let dx_ln = layer_norm_backward(&da, &c.ln1_xhat, &c.ln1_rstd, &p[lo.ln1_g..][..d], dg, db, t, d);
            dx = dx1;
            for (a, b) in dx.iter_mut().zip(&dx_ln) {
                *a += b;
            }
        }

        for (r, &id) in tokens.iter().enumerate() {
            let row = &dx[r * d..(r + 1) * d];
            for c in 0..d {
                grad[lay.tok_emb + id as usize * d + c] += row[c];
                grad[lay.pos_emb + r * d + c] += row[c];
            }
        }
        Ok(())
    }

    /// `−log p(x_{u+1} | x_{≤u})` for `u = 0..T−1`.
    pub fn sequence_nll(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        if tokens.len() < 2 {
            return Err(Error::invalid("sequence_nll needs at least 2 tokens"));
        }
        let trace = self.forward(tokens)?;
        Ok(token_nll(&trace, 0))
    }

    /// Argmax decoding; stops after `max_new` tokens, at eos (not included) or
    /// when the context is full. Ties go to the lowest id.
    pub fn greedy_generate(&self, prompt: &[u32], max_new: usize, eos: u32) -> Result<Vec<u32>> {
        self.check_tokens(prompt)?;
        let mut seq = prompt.to_vec();
        let mut out = Vec::new();
        while out.len() < max_new && seq.len() < self.config.max_ctx {
            let trace = self.forward(&seq)?;
            let next = argmax(trace.logits_at(seq.len() - 1));
            if next == eos {
                break;
            }
            out.push(next);
            seq.push(next);
        }
        Ok(out)
    }
}

fn split_pair(grad: &mut [f64], a: usize, b: usize, d: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a + d <= b);
    let (lo, hi) = grad.split_at_mut(b);
    (&mut lo[a..a + d], &mut hi[..d])
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(xs: &[f64]) -> u32 {
    let mut best = 0usize;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best as u32
}

/// Per-position next-token NLL from position `from` onward.
pub fn token_nll(trace: &ForwardTrace, from: usize) -> Vec<f64> {
    let toks = trace.tokens();
    (from..toks.len() - 1)
        .map(|u| {
            let row = trace.logits_at(u);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            lse - row[toks[u + 1] as usize]
        })
        .collect()
}

/// Sum of next-token NLL over the answer of `qa` and `d(sum)/d(logits)`.
pub fn answer_nll(trace: &ForwardTrace, qa: &EncodedQa) -> (f64, usize, Matrix) {
    let toks = trace.tokens();
    let v = trace.logits.cols();
    let mut dl = Matrix::zeros(toks.len(), v);
    let mut total = 0.0;
    let mut count = 0;
    for u in (qa.answer_start - 1)..(toks.len() - 1) {
        let row = trace.logits_at(u);
        let probs = crate::numkit::softmax(row);
        let target = toks[u + 1] as usize;
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        total += lse - row[target];
        let drow = dl.row_mut(u);
        drow.copy_from_slice(&probs);
        drow[target] -= 1.0;
        count += 1;
    }
    (total, count, dl)
}

/// Adam with optional global-norm gradient clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        let mut scale = 1.0;
        if let Some(c) = self.clip_norm {
            let n = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if n > c {
                scale = c / n;
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i] * scale;
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epoch_loss: Vec<f64>,
}

/// Next-token NLL on answer tokens, Adam, seeded shuffling per epoch.
pub fn train_lm(ckpt: &Checkpoint, data: &[EncodedQa], cfg: &TrainConfig) -> Result<(Checkpoint, TrainHistory)> {
    let mut model = ckpt.clone();
    let mut history = TrainHistory::default();
    if cfg.epochs == 0 {
        return Ok((model, history));
    }
    if data.is_empty() {
        return Err(Error::EmptyInput("training data"));
    }
    if cfg.batch == 0 {
        return Err(Error::invalid("batch must be positive"));
    }
    for ex in data {
        model.check_tokens(&ex.tokens)?;
    }
    let mut opt = Adam::new(model.n_params(), cfg.lr);
    let mut grad = vec![0.0; model.n_params()];
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut seeded_rng(cfg.seed, &format!("train/epoch/{epoch}")));
        let mut epoch_total = 0.0;
        let mut epoch_count = 0usize;
        for (step, chunk) in order.chunks(cfg.batch).enumerate() {
            grad.fill(0.0);
            let mut batch_total = 0.0;
            let mut batch_count = 0usize;
            let mut pending = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let ex = &data[i];
                let trace = model.forward(&ex.tokens)?;
                let (nll, n, dl) = answer_nll(&trace, ex);
                batch_total += nll;
                batch_count += n;
                pending.push((i, trace, dl));
            }
            if !batch_total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    last: Box::new(model),
                });
            }
            let inv = 1.0 / batch_count.max(1) as f64;
            for (i, trace, mut dl) in pending {
                dl.data_mut().iter_mut().for_each(|x| *x *= inv);
                let up = Upstream {
                    logits: Some(dl),
                    hidden: Vec::new(),
                };
                model.backward_into(&data[i].tokens, &trace, &up, &mut grad)?;
            }
            let before = model.params.clone();
            opt.step(&mut model.params, &grad);
            if model.params.iter().any(|x| !x.is_finite()) {
                model.params = before;
                return Err(Error::Diverged {
                    epoch,
                    step,
                    last: Box::new(model),
                });
            }
            model.step += 1;
            epoch_total += batch_total;
            epoch_count += batch_count;
        }
        let mean = epoch_total / epoch_count.max(1) as f64;
        log::debug!("train epoch {epoch}: mean answer nll {mean:.5}");
        history.epoch_loss.push(mean);
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::grad_check_coords;
    use rand::SeedableRng;

    fn tiny(seed: u64) -> Checkpoint {
        Checkpoint::init(ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            vocab_size: 23,
            max_ctx: 12,
            seed,
        })
        .unwrap()
    }

    /// Pushes the weights away from the tiny init so gradients are not degenerate.
    fn roughen(ck: &mut Checkpoint, seed: u64) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        for x in ck.params_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *x += 0.3 * z;
        }
    }

    fn sample_coords(n: usize, k: usize, seed: u64) -> Vec<usize> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut c: Vec<usize> = (0..k).map(|_| rng.random_range(0..n)).collect();
        c.sort_unstable();
        c.dedup();
        c
    }

    #[test]
    fn shapes_for_single_token() {
        let ck = tiny(1);
        let tr = ck.forward(&[2]).unwrap();
        assert_eq!(tr.logits.rows(), 1);
        assert_eq!(tr.logits.cols(), 23);
        assert_eq!(tr.hidden.len(), 2);
        assert_eq!((tr.hidden[0].rows(), tr.hidden[0].cols()), (1, 16));
    }

    #[test]
    fn forward_errors() {
        let ck = tiny(1);
        assert!(matches!(ck.forward(&[]), Err(Error::EmptyInput(_))));
        assert!(matches!(ck.forward(&[1; 13]), Err(Error::ContextOverflow { .. })));
        assert!(matches!(ck.forward(&[1, 99]), Err(Error::OutOfVocab { id: 99, .. })));
    }

    #[test]
    fn causal_prefix_property() {
        let mut ck = tiny(3);
        roughen(&mut ck, 4);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let len = rng.random_range(1..=12);
            let toks: Vec<u32> = (0..len).map(|_| rng.random_range(0..23)).collect();
            let full = ck.forward(&toks).unwrap();
            for u in 0..len {
                let pre = ck.forward(&toks[..=u]).unwrap();
                let (a, b) = (full.logits_at(u), pre.logits_at(u));
                let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                assert!(diff < 1e-12, "position {u}: {diff}");
            }
        }
    }

    #[test]
    fn fresh_model_is_near_uniform() {
        let ck = Checkpoint::init(ModelConfig::desk_default(400, 5)).unwrap();
        let tr = ck.forward(&[2, 10, 11, 12, 4]).unwrap();
        let mut ent = 0.0;
        for u in 0..5 {
            let p = crate::numkit::softmax(tr.logits_at(u));
            ent -= p.iter().map(|x| x * x.ln()).sum::<f64>();
        }
        ent /= 5.0;
        let target = (400f64).ln();
        assert!((ent - target).abs() < 0.1 * target, "{ent} vs {target}");
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let ck = tiny(2);
        let toks = [2, 5, 6, 7];
        let tr = ck.forward(&toks).unwrap();
        let g = ck.backward(&toks, &tr, &Upstream::default()).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn mismatched_trace_is_rejected() {
        let ck = tiny(2);
        let tr = ck.forward(&[2, 5, 6]).unwrap();
        assert!(matches!(
            ck.backward(&[2, 5, 7], &tr, &Upstream::default()),
            Err(Error::MismatchedTrace)
        ));
        let other = Checkpoint::init(ModelConfig::desk_default(23, 1)).unwrap();
        assert!(matches!(
            other.backward(&[2, 5, 6], &tr, &Upstream::default()),
            Err(Error::MismatchedTrace)
        ));
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        let mut ck = tiny(7);
        roughen(&mut ck, 8);
        let qa = EncodedQa {
            tokens: vec![2, 8, 9, 10, 4, 11, 12, 3],
            answer_start: 5,
        };
        let tr = ck.forward(&qa.tokens).unwrap();
        let (_, _, dl) = answer_nll(&tr, &qa);
        let up = Upstream {
            logits: Some(dl),
            hidden: vec![],
        };
        let g = ck.backward(&qa.tokens, &tr, &up).unwrap();
        let cfg = ck.config().clone();
        let loss = |theta: &[f64]| {
            let c = Checkpoint::from_params(cfg.clone(), theta.to_vec()).unwrap();
            let tr = c.forward(&qa.tokens).unwrap();
            answer_nll(&tr, &qa).0
        };
        let coords: Vec<usize> = (0..ck.n_params()).collect();
        let rep = grad_check_coords(loss, &g, ck.params(), 1e-5, &coords).unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }

    #[test]
    fn hidden_state_gradient_matches_finite_differences() {
        let mut ck = tiny(11);
        roughen(&mut ck, 12);
        let toks = vec![2u32, 14, 15, 16, 17];
        let last = toks.len() - 1;
        let tr = ck.forward(&toks).unwrap();
        let h = tr.hidden_at(1, last).to_vec();
        let up = Upstream {
            logits: None,
            hidden: vec![HiddenGrad {
                layer: 1,
                position: last,
                grad: h.iter().map(|x| 2.0 * x).collect(),
            }],
        };
        let g = ck.backward(&toks, &tr, &up).unwrap();
        let cfg = ck.config().clone();
        let loss = |theta: &[f64]| {
            let c = Checkpoint::from_params(cfg.clone(), theta.to_vec()).unwrap();
            let tr = c.forward(&toks).unwrap();
            tr.hidden_at(1, last).iter().map(|x| x * x).sum::<f64>()
        };
        let coords = sample_coords(ck.n_params(), 3000, 1);
        let rep = grad_check_coords(loss, &g, ck.params(), 1e-5, &coords).unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }

    #[test]
    fn sequence_nll_for_uniform_model() {
        let mut ck = tiny(1);
        let head = ck.layout().range("lm_head").unwrap();
        ck.params_mut()[head].fill(0.0);
        let nll = ck.sequence_nll(&[2, 5, 6, 7, 3]).unwrap();
        assert_eq!(nll.len(), 4);
        for x in nll {
            assert!((x - 23f64.ln()).abs() < 1e-6);
        }
        assert!(ck.sequence_nll(&[2]).is_err());
    }

    #[test]
    fn greedy_generate_contract() {
        let mut ck = tiny(5);
        roughen(&mut ck, 6);
        assert!(ck.greedy_generate(&[2, 5], 0, 3).unwrap().is_empty());
        let a = ck.greedy_generate(&[2, 5], 6, 3).unwrap();
        let b = ck.greedy_generate(&[2, 5], 6, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 6);
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 0.0]), 1);
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let ck = tiny(21);
        let data: Vec<EncodedQa> = (0..6)
            .map(|i| EncodedQa {
                tokens: vec![2, 5 + i, 6, 4, 10 + i, 11 + i, 3],
                answer_start: 4,
            })
            .collect();
        let cfg = TrainConfig {
            epochs: 5,
            lr: 3e-3,
            batch: 2,
            seed: 1,
        };
        let (a, ha) = train_lm(&ck, &data, &cfg).unwrap();
        let (b, hb) = train_lm(&ck, &data, &cfg).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_eq!(ha, hb);
        assert!(ha.epoch_loss[0] > ha.epoch_loss[1] && ha.epoch_loss[1] > ha.epoch_loss[2]);

        let (same, h0) = train_lm(&ck, &data, &TrainConfig { epochs: 0, ..cfg }).unwrap();
        assert_eq!(same, ck);
        assert!(h0.epoch_loss.is_empty());
    }

    #[test]
    fn teacher_snapshot_is_isolated() {
        let mut student = tiny(4);
        let teacher = snapshot_teacher(&student);
        let before = teacher.digest();
        let toks = [2, 5, 6];
        assert_eq!(
            student.forward(&toks).unwrap().logits,
            teacher.forward(&toks).unwrap().logits
        );
        student.params_mut()[0] += 1.0;
        assert_eq!(teacher.digest(), before);
    }

    #[test]
    fn checkpoint_file_round_trip_is_bit_exact() {
        let mut ck = tiny(9);
        roughen(&mut ck, 10);
        ck.step = 42;
        ck.tokenizer = Some("abc".into());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert!(back.params().iter().zip(ck.params()).all(|(a, b)| a.to_bits() == b.to_bits()));
        std::fs::write(&path, b"garbage").unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
