//! Building blocks evaluated on a [`Tape`]: parameter binding, linear layers,
//! layer norm, multi-head attention, feed-forward blocks and positional codes.

use std::collections::HashMap;

use super::params::{Init, ParamSpec, ParamStore};
use crate::autograd::{Grads, Tape, Var};
use crate::tensor::Mat;

/// A tape plus the parameters bound into it. Parameters whose names start with
/// one of the trainable prefixes become gradient-requiring leaves.
pub struct Graph<'p> {
    pub tape: Tape,
    params: &'p ParamStore,
    trainable: Vec<String>,
    bound: HashMap<String, Var>,
}

impl<'p> Graph<'p> {
    /// Inference graph: no parameter requires gradients.
    pub fn new(params: &'p ParamStore) -> Self {
        Self::with_trainable(params, &[])
    }

    pub fn with_trainable(params: &'p ParamStore, prefixes: &[&str]) -> Self {
        Self {
            tape: Tape::new(),
            params,
            trainable: prefixes.iter().map(|s| s.to_string()).collect(),
            bound: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable.iter().any(|p| name.starts_with(p.as_str()))
    }

    pub fn param(&mut self, name: &str) -> Var {
        if let Some(v) = self.bound.get(name) {
            return *v;
        }
        let value = self.params.expect(name).clone();
        let ng = self.is_trainable(name);
        let v = self.tape.leaf(value, ng);
        self.bound.insert(name.to_string(), v);
        v
    }

    pub fn constant(&mut self, m: Mat) -> Var {
        self.tape.constant(m)
    }

    pub fn value(&self, v: Var) -> &Mat {
        self.tape.value(v)
    }

    /// Runs the backward sweep and returns gradients of the bound trainable parameters.
    pub fn param_grads(&self, seeds: &[(Var, Mat)]) -> HashMap<String, Mat> {
        let mut grads: Grads = self.tape.backward(seeds);
        let mut out = HashMap::new();
        for (name, &v) in &self.bound {
            if self.tape.needs_grad(v) {
                if let Some(g) = grads.take(v) {
                    out.insert(name.clone(), g);
                }
            }
        }
        out
    }
}

pub fn linear_specs(out: &mut Vec<ParamSpec>, prefix: &str, din: usize, dout: usize, bias: bool) {
    out.push(ParamSpec::new(
        format!("{prefix}.weight"),
        din,
        dout,
        Init::Normal(1.0 / (din as f64).sqrt()),
    ));
    if bias {
        out.push(ParamSpec::new(format!("{prefix}.bias"), 1, dout, Init::Zeros));
    }
}

pub fn norm_specs(out: &mut Vec<ParamSpec>, prefix: &str, dim: usize) {
    out.push(ParamSpec::new(format!("{prefix}.gamma"), 1, dim, Init::Ones));
    out.push(ParamSpec::new(format!("{prefix}.beta"), 1, dim, Init::Zeros));
}

/// Query/key/value/output projections. Queries come from `dq`-dim rows, keys
/// and values from `dkv`-dim rows; attention runs in `dm` dims and the output
/// is projected to `dout`.
pub fn attention_specs(out: &mut Vec<ParamSpec>, prefix: &str, dq: usize, dkv: usize, dm: usize, dout: usize) {
    linear_specs(out, &format!("{prefix}.q"), dq, dm, true);
    linear_specs(out, &format!("{prefix}.k"), dkv, dm, true);
    linear_specs(out, &format!("{prefix}.v"), dkv, dm, true);
    linear_specs(out, &format!("{prefix}.o"), dm, dout, true);
}

pub fn mlp_specs(out: &mut Vec<ParamSpec>, prefix: &str, din: usize, hidden: usize, dout: usize) {
    linear_specs(out, &format!("{prefix}.fc1"), din, hidden, true);
    linear_specs(out, &format!("{prefix}.fc2"), hidden, dout, true);
}

/// `x · W (+ b)`; the bias is used when `{prefix}.bias` exists.
pub fn linear(g: &mut Graph, x: Var, prefix: &str) -> Var {
    let w = g.param(&format!("{prefix}.weight"));
    let y = g.tape.matmul(x, w);
    let bias = format!("{prefix}.bias");
    if g.params().get(&bias).is_some() {
        let b = g.param(&bias);
        g.tape.add_row(y, b)
    } else {
        y
    }
}

pub fn layer_norm(g: &mut Graph, x: Var, prefix: &str) -> Var {
    let gamma = g.param(&format!("{prefix}.gamma"));
    let beta = g.param(&format!("{prefix}.beta"));
    g.tape.layer_norm(x, gamma, beta)
}

pub fn mlp(g: &mut Graph, x: Var, prefix: &str) -> Var {
    let h = linear(g, x, &format!("{prefix}.fc1"));
    let h = g.tape.gelu(h);
    linear(g, h, &format!("{prefix}.fc2"))
}

/// Multi-head attention. `allow`, when given, is a row-major `rows(q) × rows(k)`
/// boolean mask; disallowed keys get `-inf` logits.
pub fn attention(g: &mut Graph, q_in: Var, k_in: Var, v_in: Var, prefix: &str, heads: usize, allow: Option<&[bool]>) -> Var {
    let q = linear(g, q_in, &format!("{prefix}.q"));
    let k = linear(g, k_in, &format!("{prefix}.k"));
    let v = linear(g, v_in, &format!("{prefix}.v"));
    let dm = g.value(q).cols;
    assert_eq!(dm % heads, 0, "attention width {dm} not divisible by {heads} heads");
    let dh = dm / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.tape.slice_cols(q, h * dh, dh),
                g.tape.slice_cols(k, h * dh, dh),
                g.tape.slice_cols(v, h * dh, dh),
            )
        };
        let logits = g.tape.matmul_t(qh, kh);
        let logits = g.tape.scale(logits, scale);
        let att = g.tape.softmax_rows(logits, allow);
        outs.push(g.tape.matmul(att, vh));
    }
    let merged = if heads == 1 { outs[0] } else { g.tape.concat_cols(&outs) };
    linear(g, merged, &format!("{prefix}.o"))
}

/// Allow mask restricting attention to tokens inside the same `window × window`
/// block of an `h × w` grid. Equivalent to padding the grid to a multiple of the
/// window, attending within each block and cropping, with padded cells masked out.
pub fn window_allow(h: usize, w: usize, window: usize) -> Vec<bool> {
    let n = h * w;
    let window = window.max(1);
    let block = |i: usize| ((i / w) / window, (i % w) / window);
    let mut allow = vec![false; n * n];
    for i in 0..n {
        let bi = block(i);
        for j in 0..n {
            allow[i * n + j] = block(j) == bi;
        }
    }
    allow
}

/// Sinusoidal code of a point given in feature-grid cell units.
/// The first half of the channels encodes `y`, the second half `x`.
pub fn sincos_point(y: f64, x: f64, h: usize, w: usize, dim: usize) -> Vec<f64> {
    assert_eq!(dim % 4, 0, "positional code width must be divisible by 4");
    let pairs = dim / 4;
    let mut out = Vec::with_capacity(dim);
    for (coord, extent) in [(y, h), (x, w)] {
        let u = (coord + 0.5) / extent as f64;
        for i in 0..pairs {
            let a = std::f64::consts::PI * (i + 1) as f64 * u;
            out.push(a.sin());
            out.push(a.cos());
        }
    }
    out
}

/// Fixed 2D sinusoidal codes for every cell of an `h × w` grid, one row per cell.
pub fn sincos_grid(h: usize, w: usize, dim: usize) -> Mat {
    let mut m = Mat::zeros(h * w, dim);
    for y in 0..h {
        for x in 0..w {
            m.row_mut(y * w + x)
                .copy_from_slice(&sincos_point(y as f64, x as f64, h, w, dim));
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_allow_blocks() {
        let a = window_allow(3, 3, 2);
        // cell (0,0) sees (0,1),(1,0),(1,1) but not (0,2) or (2,0)
        assert!(a[0 * 9 + 1] && a[0 * 9 + 3] && a[0 * 9 + 4]);
        assert!(!a[0 * 9 + 2] && !a[0 * 9 + 6]);
        // padded corner window holds only (2,2)
        assert_eq!((0..9).filter(|&j| a[8 * 9 + j]).count(), 1);
        assert!(window_allow(3, 3, 3).iter().all(|&b| b));
    }

    #[test]
    fn grid_codes_distinct() {
        let pe = sincos_grid(4, 4, 8);
        for i in 0..16 {
            for j in i + 1..16 {
                let d: f64 = pe.row(i).iter().zip(pe.row(j)).map(|(a, b)| (a - b).abs()).sum();
                assert!(d > 1e-3, "cells {i} and {j} share a code");
            }
        }
    }
}
