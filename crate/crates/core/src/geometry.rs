//! Frozen safe-behavior geometry and anchor windowing.
//!
//! Positions are 0-based throughout: a prompt of length `T` has positions
//! `0..T`, and the background mask covers the `T − 1` positions whose
//! logits predict another prompt token.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::blobfile::{self, Tensor};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, ForwardTrace};
use crate::numkit::{pca_basis, Basis, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WindowConfig {
    pub w_pre: usize,
    pub w_post: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig { w_pre: 4, w_post: 4 }
    }
}

/// One anchor occurrence inside a prompt.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorHit {
    pub prompt: Vec<u32>,
    /// Position of the last anchor token.
    pub t: usize,
    pub window: Vec<usize>,
}

/// Per-layer safe-reference mean and PCA basis. Built once, never mutated.
#[derive(Clone, Debug, PartialEq)]
pub struct SafeGeometry {
    layers: Vec<usize>,
    rank: usize,
    dim: usize,
    means: Vec<Vec<f64>>,
    bases: Vec<Basis>,
    explained: Vec<Vec<f64>>,
    rank_deficient: bool,
}

impl SafeGeometry {
    pub fn from_parts(layers: Vec<usize>, means: Vec<Vec<f64>>, bases: Vec<Basis>) -> Result<Self> {
        if layers.is_empty() || layers.len() != means.len() || layers.len() != bases.len() {
            return Err(Error::invalid("geometry needs one mean and basis per layer"));
        }
        let dim = bases[0].dim();
        let rank = bases[0].rank();
        for (m, b) in means.iter().zip(&bases) {
            if m.len() != dim || b.dim() != dim || b.rank() != rank {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: m.len(),
                });
            }
        }
        let explained = vec![Vec::new(); layers.len()];
        Ok(SafeGeometry {
            layers,
            rank,
            dim,
            means,
            bases,
            explained,
            rank_deficient: false,
        })
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `(layer, μ_ref, V)` triples in layer order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &[f64], &Basis)> {
        self.layers
            .iter()
            .zip(&self.means)
            .zip(&self.bases)
            .map(|((&l, m), b)| (l, m.as_slice(), b))
    }

    pub fn mean(&self, i: usize) -> &[f64] {
        &self.means[i]
    }

    pub fn basis(&self, i: usize) -> &Basis {
        &self.bases[i]
    }

    /// Explained-variance fractions per layer (empty when loaded from parts).
    pub fn explained_variance(&self) -> &[Vec<f64>] {
        &self.explained
    }

    pub fn rank_deficient(&self) -> bool {
        self.rank_deficient
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (l, m, b) in self.iter() {
            h.update((l as u64).to_le_bytes());
            for x in m {
                h.update(x.to_le_bytes());
            }
            for c in b.columns() {
                for x in c {
                    h.update(x.to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = Vec::new();
        let flat: Vec<Vec<f64>> = self.bases.iter().map(|b| b.columns().concat()).collect();
        for (i, &l) in self.layers.iter().enumerate() {
            tensors.push(Tensor {
                name: format!("layer.{l}.mean"),
                shape: vec![self.dim],
                data: &self.means[i],
            });
            tensors.push(Tensor {
                name: format!("layer.{l}.basis"),
                shape: vec![self.rank, self.dim],
                data: &flat[i],
            });
        }
        let meta = json!({
            "format": "gu-geometry",
            "version": 1,
            "layers": self.layers,
            "k": self.rank,
            "H": self.dim,
            "explained_variance": self.explained,
            "rank_deficient": self.rank_deficient,
        });
        blobfile::write(path, meta, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut loaded = blobfile::read(path)?;
        if loaded.meta.get("format").and_then(|v| v.as_str()) != Some("gu-geometry") {
            return Err(Error::Format(format!("{} is not a geometry file", path.display())));
        }
        let layers: Vec<usize> = serde_json::from_value(loaded.meta["layers"].clone())?;
        let rank = loaded.meta["k"].as_u64().ok_or_else(|| Error::Format("missing k".into()))? as usize;
        let dim = loaded.meta["H"].as_u64().ok_or_else(|| Error::Format("missing H".into()))? as usize;
        let mut means = Vec::new();
        let mut bases = Vec::new();
        for &l in &layers {
            let (_, m) = loaded.take(&format!("layer.{l}.mean"))?;
            let (shape, v) = loaded.take(&format!("layer.{l}.basis"))?;
            if shape != [rank, dim] {
                return Err(Error::Format(format!("basis for layer {l} has shape {shape:?}")));
            }
            means.push(m);
            bases.push(Basis::new(dim, v.chunks(dim).map(<[f64]>::to_vec).collect())?);
        }
        let mut g = SafeGeometry::from_parts(layers, means, bases)?;
        g.explained = serde_json::from_value(loaded.meta["explained_variance"].clone())
            .unwrap_or_else(|_| vec![Vec::new(); g.layers.len()]);
        g.rank_deficient = loaded.meta["rank_deficient"].as_bool().unwrap_or(false);
        Ok(g)
    }
}

/// Mean and PCA basis of the final-token hidden state of each reference
/// prompt, for every layer in `layers`.
pub fn build_safe_geometry(
    ckpt: &Checkpoint,
    refs: &[Vec<u32>],
    layers: &[usize],
    rank: usize,
) -> Result<SafeGeometry> {
    if refs.is_empty() {
        return Err(Error::EmptyInput("safe references"));
    }
    if refs.len() < 2 {
        return Err(Error::invalid("need at least 2 safe references"));
    }
    if layers.is_empty() {
        return Err(Error::EmptyInput("layer set"));
    }
    let n_layers = ckpt.config().n_layers;
    if let Some(&bad) = layers.iter().find(|&&l| l >= n_layers) {
        return Err(Error::invalid(format!("layer {bad} out of range for {n_layers} layers")));
    }
    let h = ckpt.config().d_model;
    let mut samples: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(refs.len()); layers.len()];
    for r in refs {
        let trace = ckpt.forward(r)?;
        let last = r.len() - 1;
        for (i, &l) in layers.iter().enumerate() {
            samples[i].push(trace.hidden_at(l, last).to_vec());
        }
    }
    let mut means = Vec::new();
    let mut bases = Vec::new();
    let mut explained = Vec::new();
    let mut deficient = false;
    for (i, &l) in layers.iter().enumerate() {
        let m = Matrix::from_rows(&samples[i])?;
        let pca = pca_basis(&m, rank)?;
        if pca.rank_deficient {
            log::warn!("safe references span fewer than {rank} directions at layer {l}");
        }
        deficient |= pca.rank_deficient;
        debug_assert_eq!(pca.mean.len(), h);
        means.push(pca.mean);
        bases.push(pca.basis);
        explained.push(pca.explained_variance);
    }
    let mut g = SafeGeometry::from_parts(layers.to_vec(), means, bases)?;
    g.explained = explained;
    g.rank_deficient = deficient;
    Ok(g)
}

/// Positions of the last token of every contiguous occurrence of `anchor`,
/// overlapping occurrences included.
pub fn find_anchor_hits(prompt: &[u32], anchor: &[u32]) -> Result<Vec<usize>> {
    if anchor.is_empty() {
        return Err(Error::EmptyInput("anchor"));
    }
    if prompt.len() < anchor.len() {
        return Ok(Vec::new());
    }
    Ok((0..=prompt.len() - anchor.len())
        .filter(|&i| prompt[i..i + anchor.len()] == *anchor)
        .map(|i| i + anchor.len() - 1)
        .collect())
}

/// `{t − w_pre, …, t + w_post}` clipped to `0..len`.
pub fn window(t: usize, len: usize, cfg: WindowConfig) -> Result<Vec<usize>> {
    if t >= len {
        return Err(Error::invalid(format!("hit position {t} outside prompt of length {len}")));
    }
    let lo = t.saturating_sub(cfg.w_pre);
    let hi = (t + cfg.w_post).min(len - 1);
    Ok((lo..=hi).collect())
}

/// Every anchor hit of `prompt` with its window.
pub fn make_hits(prompt: &[u32], anchor: &[u32], cfg: WindowConfig) -> Result<Vec<AnchorHit>> {
    find_anchor_hits(prompt, anchor)?
        .into_iter()
        .map(|t| {
            Ok(AnchorHit {
                prompt: prompt.to_vec(),
                t,
                window: window(t, prompt.len(), cfg)?,
            })
        })
        .collect()
}

/// Mean of the layer-`layer` hidden states over `window`.
pub fn pooled_state(trace: &ForwardTrace, window: &[usize], layer: usize) -> Result<Vec<f64>> {
    if window.is_empty() {
        return Err(Error::EmptyInput("window"));
    }
    if layer >= trace.hidden.len() {
        return Err(Error::invalid(format!("layer {layer} not in trace")));
    }
    let h = trace.hidden[layer].cols();
    let mut out = vec![0.0; h];
    for &u in window {
        if u >= trace.len() {
            return Err(Error::invalid(format!("window position {u} outside trace")));
        }
        for (o, x) in out.iter_mut().zip(trace.hidden_at(layer, u)) {
            *o += x;
        }
    }
    let inv = 1.0 / window.len() as f64;
    out.iter_mut().for_each(|x| *x *= inv);
    Ok(out)
}

/// `true` at positions `0..len−1` that lie outside every window.
pub fn background_mask(len: usize, windows: &[Vec<usize>]) -> Vec<bool> {
    let mut mask = vec![true; len.saturating_sub(1)];
    for w in windows {
        for &u in w {
            if u < mask.len() {
                mask[u] = false;
            }
        }
    }
    mask
}
