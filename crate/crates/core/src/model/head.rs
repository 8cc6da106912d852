//! Mask-level head: pooled semantics `S`, spatial encoding `M = proj([G; S])`,
//! the mask feature enhancer `M̂` and cosine classification.

use super::layers::{attention, layer_norm, linear, sincos_grid, Graph};
use super::roi::roi_pool_weights;
use super::{FeatureMap, HeadVars, ModelConfig, SealModel};
use crate::autograd::Var;
use crate::guidance::TextEncoder;
use crate::mask::{area_resample, BinaryMask};
use crate::tensor::{cosine, norm, Mat};
use crate::{Error, Result};

pub const CANONICAL_PHRASES: [&str; 4] = ["object", "things", "stuff", "texture"];

/// Row-major `masks × cells` allow matrix: a cell is visible to a mask when
/// the mask covers any part of it. A mask covering nothing sees every cell.
pub fn mfe_allow(masks: &[BinaryMask], h2: usize, w2: usize) -> Vec<bool> {
    let n = h2 * w2;
    let mut allow = Vec::with_capacity(masks.len() * n);
    for m in masks {
        let row: Vec<bool> = area_resample(m, h2, w2).into_iter().map(|f| f > 0.0).collect();
        if row.iter().any(|&b| b) {
            allow.extend(row);
        } else {
            allow.extend(std::iter::repeat(true).take(n));
        }
    }
    allow
}

/// Stacks pooling coefficients into a `K × N` matrix.
pub fn pool_matrix(masks: &[BinaryMask], h2: usize, w2: usize) -> Result<(Mat, Vec<bool>)> {
    let mut m = Mat::zeros(masks.len(), h2 * w2);
    let mut dead = Vec::with_capacity(masks.len());
    for (k, mask) in masks.iter().enumerate() {
        let w = roi_pool_weights(mask, h2, w2)?;
        m.row_mut(k).copy_from_slice(&w.coeffs);
        dead.push(w.dead);
    }
    Ok((m, dead))
}

pub(crate) fn forward(g: &mut Graph, fused: Var, tokens: Var, masks: &[BinaryMask], cfg: &ModelConfig) -> Result<HeadVars> {
    let (h2, w2) = cfg.grid();
    let (coeffs, dead) = pool_matrix(masks, h2, w2)?;
    let coeffs = g.constant(coeffs);
    let pooled = g.tape.matmul(coeffs, fused);
    let s = linear(g, pooled, "pool.proj");
    let m = if cfg.toggles.se {
        let cat = g.tape.concat_cols(&[tokens, s]);
        linear(g, cat, "se.proj")
    } else {
        s
    };
    let m_hat = if cfg.toggles.mfe {
        let pe = g.constant(sincos_grid(h2, w2, cfg.d2));
        let kv = g.tape.add(fused, pe);
        let allow = mfe_allow(masks, h2, w2);
        let a = attention(g, m, kv, kv, "mfe.attn", cfg.heads, Some(&allow));
        let r = g.tape.add(m, a);
        layer_norm(g, r, "mfe.norm")
    } else {
        m
    };
    Ok(HeadVars { s, m, m_hat, dead })
}

/// `weight · [G; S] + bias` with `weight` of shape `2D × D`.
pub fn spatial_encode(g: &[f64], s: &[f64], weight: &Mat, bias: &[f64]) -> Result<Vec<f64>> {
    if g.len() != s.len() || weight.rows != g.len() + s.len() || weight.cols != bias.len() {
        return Err(Error::Validation(format!(
            "spatial encoding dims: G {}, S {}, weight {:?}, bias {}",
            g.len(),
            s.len(),
            weight.shape(),
            bias.len()
        )));
    }
    let cat: Vec<f64> = g.iter().chain(s).copied().collect();
    let mut out = Mat::row_vector(cat).matmul(weight).data;
    for (o, b) in out.iter_mut().zip(bias) {
        *o += b;
    }
    Ok(out)
}

/// One masked cross-attention step from `m` to the fused map plus positional
/// codes, followed by the residual and layer norm.
pub fn mask_feature_enhance(model: &SealModel, m: &[f64], fused: &FeatureMap, attn_mask: &BinaryMask) -> Vec<f64> {
    let cfg = &model.config;
    let mut g = Graph::new(&model.params);
    let q = g.constant(Mat::row_vector(m.to_vec()));
    let f = g.constant(fused.data.clone());
    let pe = g.constant(sincos_grid(fused.height, fused.width, cfg.d2));
    let kv = g.tape.add(f, pe);
    let allow = mfe_allow(std::slice::from_ref(attn_mask), fused.height, fused.width);
    let a = attention(&mut g, q, kv, kv, "mfe.attn", cfg.heads, Some(&allow));
    let r = g.tape.add(q, a);
    let out = layer_norm(&mut g, r, "mfe.norm");
    g.value(out).data.clone()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub label: String,
    pub score: f64,
}

/// Ranks labels by cosine similarity to `m_hat`, highest first; equal scores
/// keep input order. With `canonical`, the canonical phrases encoded by that
/// encoder are appended as extra candidates.
pub fn classify(
    m_hat: &[f64],
    queries: &[(String, Vec<f64>)],
    canonical: Option<&dyn TextEncoder>,
) -> Result<Vec<Classification>> {
    if queries.is_empty() {
        return Err(Error::Validation("classification needs at least one query".into()));
    }
    let mut all: Vec<(String, Vec<f64>)> = queries.to_vec();
    if let Some(enc) = canonical {
        for p in CANONICAL_PHRASES {
            all.push((p.to_string(), enc.encode(p)));
        }
    }
    let mut ranked = Vec::with_capacity(all.len());
    for (label, q) in &all {
        if q.len() != m_hat.len() {
            return Err(Error::Validation(format!(
                "query '{label}' has {} dims, feature has {}",
                q.len(),
                m_hat.len()
            )));
        }
        if norm(q) == 0.0 {
            return Err(Error::Validation(format!("query '{label}' has zero norm")));
        }
        ranked.push(Classification {
            label: label.clone(),
            score: cosine(m_hat, q).clamp(-1.0, 1.0),
        });
    }
    ranked.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal));
    Ok(ranked)
}
