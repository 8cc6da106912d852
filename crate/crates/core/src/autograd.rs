//! Reverse-mode differentiation over [`Mat`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] with seed gradients on any set of nodes propagates them
//! back to the leaves. Nodes that do not depend on a gradient-requiring leaf
//! are skipped during the backward sweep.

use crate::tensor::{dot, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by node, as returned by [`Tape::backward`].
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads[v.0].take()
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn leaf(&mut self, value: Mat, needs_grad: bool) -> Var {
        self.push(value, Op::Leaf, needs_grad)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_t(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(value, Op::MatMulT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(value, Op::Add(a, b), ng)
    }

    /// Adds the `1 × cols` row `r` to every row of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Var {
        let row = self.value(r);
        assert_eq!(row.rows, 1, "add_row expects a single row");
        assert_eq!(row.cols, self.value(a).cols, "add_row width mismatch");
        let mut value = self.value(a).clone();
        let cols = value.cols;
        for i in 0..value.rows {
            for (v, b) in value.data[i * cols..(i + 1) * cols].iter_mut().zip(&row.data) {
                *v += b;
            }
        }
        let ng = self.ng(&[a, r]);
        self.push(value, Op::AddRow(a, r), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "mul shape mismatch");
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p * q).collect();
        let value = Mat::from_vec(x.rows, x.cols, data);
        let ng = self.ng(&[a, b]);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scaled(s);
        let ng = self.ng(&[a]);
        self.push(value, Op::Scale(a, s), ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = x
            .data
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()))
            .collect();
        let value = Mat::from_vec(x.rows, x.cols, data);
        let ng = self.ng(&[a]);
        self.push(value, Op::Gelu(a), ng)
    }

    /// Row-wise softmax. With `allow`, disallowed entries get `-inf` logits;
    /// a row with nothing allowed falls back to attending everywhere.
    pub fn softmax_rows(&mut self, a: Var, allow: Option<&[bool]>) -> Var {
        let x = self.value(a);
        let (rows, cols) = x.shape();
        if let Some(al) = allow {
            assert_eq!(al.len(), rows * cols, "allow mask shape mismatch");
        }
        let mut value = Mat::zeros(rows, cols);
        for i in 0..rows {
            let row = x.row(i);
            let mut ok: Vec<bool> = match allow {
                Some(al) => al[i * cols..(i + 1) * cols].to_vec(),
                None => vec![true; cols],
            };
            if !ok.iter().any(|&b| b) {
                log::debug!("softmax row {i} has no allowed entries; attending to all");
                ok.iter_mut().for_each(|b| *b = true);
            }
            let m = row
                .iter()
                .zip(&ok)
                .filter(|(_, &k)| k)
                .fold(f64::NEG_INFINITY, |m, (&v, _)| m.max(v));
            let out = value.row_mut(i);
            let mut sum = 0.0;
            for j in 0..cols {
                if ok[j] {
                    let e = (row[j] - m).exp();
                    out[j] = e;
                    sum += e;
                }
            }
            for v in out.iter_mut() {
                *v /= sum;
            }
        }
        let ng = self.ng(&[a]);
        self.push(value, Op::Softmax(a), ng)
    }

    /// Row-wise layer normalization with `1 × cols` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut xhat = Mat::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        let mut value = Mat::zeros(rows, cols);
        for i in 0..rows {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for j in 0..cols {
                let h = (row[j] - mean) * is;
                xhat[(i, j)] = h;
                value[(i, j)] = h * g.data[j] + b.data[j];
            }
        }
        let ng = self.ng(&[x, gamma, beta]);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut value = Mat::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let m = self.value(*p);
            assert_eq!(m.rows, rows, "concat_cols row mismatch");
            for i in 0..rows {
                value.data[i * cols + off..i * cols + off + m.cols].copy_from_slice(m.row(i));
            }
            off += m.cols;
        }
        let ng = self.ng(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let m = self.value(*p);
            assert_eq!(m.cols, cols, "concat_rows col mismatch");
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        let ng = self.ng(parts);
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let m = self.value(a);
        assert!(start + len <= m.cols, "slice_cols out of range");
        let mut value = Mat::zeros(m.rows, len);
        for i in 0..m.rows {
            value.row_mut(i).copy_from_slice(&m.row(i)[start..start + len]);
        }
        let ng = self.ng(&[a]);
        self.push(value, Op::SliceCols(a, start), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let m = self.value(a);
        assert!(start + len <= m.rows, "slice_rows out of range");
        let value = Mat::from_vec(len, m.cols, m.data[start * m.cols..(start + len) * m.cols].to_vec());
        let ng = self.ng(&[a]);
        self.push(value, Op::SliceRows(a, start), ng)
    }

    /// Propagates the seed gradients back through the tape.
    pub fn backward(&self, seeds: &[(Var, Mat)]) -> Grads {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            assert_eq!(self.value(*v).shape(), g.shape(), "seed gradient shape mismatch");
            accumulate(&mut grads, *v, g.clone());
        }
        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    fn backprop_node(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        let want = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if want(*a) {
                    accumulate(grads, *a, g.matmul_t(self.value(*b)));
                }
                if want(*b) {
                    accumulate(grads, *b, self.value(*a).t_matmul(g));
                }
            }
            Op::MatMulT(a, b) => {
                // out = a bᵀ ⇒ da = g b, db = gᵀ a
                if want(*a) {
                    accumulate(grads, *a, g.matmul(self.value(*b)));
                }
                if want(*b) {
                    accumulate(grads, *b, g.t_matmul(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                if want(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if want(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::AddRow(a, r) => {
                if want(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if want(*r) {
                    let mut s = Mat::zeros(1, g.cols);
                    for i in 0..g.rows {
                        for (acc, v) in s.data.iter_mut().zip(g.row(i)) {
                            *acc += v;
                        }
                    }
                    accumulate(grads, *r, s);
                }
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                if want(*a) {
                    let d = g.data.iter().zip(&y.data).map(|(p, q)| p * q).collect();
                    accumulate(grads, *a, Mat::from_vec(g.rows, g.cols, d));
                }
                if want(*b) {
                    let d = g.data.iter().zip(&x.data).map(|(p, q)| p * q).collect();
                    accumulate(grads, *b, Mat::from_vec(g.rows, g.cols, d));
                }
            }
            Op::Scale(a, s) => {
                if want(*a) {
                    accumulate(grads, *a, g.scaled(*s));
                }
            }
            Op::Gelu(a) => {
                if want(*a) {
                    let x = self.value(*a);
                    let d = x
                        .data
                        .iter()
                        .zip(&g.data)
                        .map(|(&v, &gv)| {
                            let u = GELU_C * (v + 0.044715 * v * v * v);
                            let th = u.tanh();
                            let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                            gv * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du)
                        })
                        .collect();
                    accumulate(grads, *a, Mat::from_vec(x.rows, x.cols, d));
                }
            }
            Op::Softmax(a) => {
                if want(*a) {
                    let y = &node.value;
                    let mut d = Mat::zeros(y.rows, y.cols);
                    for i in 0..y.rows {
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let s = dot(yr, gr);
                        for (j, out) in d.row_mut(i).iter_mut().enumerate() {
                            *out = yr[j] * (gr[j] - s);
                        }
                    }
                    accumulate(grads, *a, d);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = self.value(*gamma);
                let (rows, cols) = xhat.shape();
                if want(*gamma) {
                    let mut dg = Mat::zeros(1, cols);
                    for i in 0..rows {
                        for j in 0..cols {
                            dg.data[j] += g[(i, j)] * xhat[(i, j)];
                        }
                    }
                    accumulate(grads, *gamma, dg);
                }
                if want(*beta) {
                    let mut db = Mat::zeros(1, cols);
                    for i in 0..rows {
                        for j in 0..cols {
                            db.data[j] += g[(i, j)];
                        }
                    }
                    accumulate(grads, *beta, db);
                }
                if want(*x) {
                    let mut dx = Mat::zeros(rows, cols);
                    let n = cols as f64;
                    for i in 0..rows {
                        let dxhat: Vec<f64> = (0..cols).map(|j| g[(i, j)] * gam.data[j]).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / n;
                        let mean_dx = dxhat.iter().zip(xhat.row(i)).map(|(a, b)| a * b).sum::<f64>() / n;
                        for j in 0..cols {
                            dx[(i, j)] = inv_std[i] * (dxhat[j] - mean_d - xhat[(i, j)] * mean_dx);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let c = self.value(*p).cols;
                    if want(*p) {
                        let mut d = Mat::zeros(g.rows, c);
                        for i in 0..g.rows {
                            d.row_mut(i).copy_from_slice(&g.row(i)[off..off + c]);
                        }
                        accumulate(grads, *p, d);
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let r = self.value(*p).rows;
                    if want(*p) {
                        let d = Mat::from_vec(r, g.cols, g.data[off * g.cols..(off + r) * g.cols].to_vec());
                        accumulate(grads, *p, d);
                    }
                    off += r;
                }
            }
            Op::SliceCols(a, start) => {
                if want(*a) {
                    let src = self.value(*a);
                    let mut d = Mat::zeros(src.rows, src.cols);
                    for i in 0..g.rows {
                        d.row_mut(i)[*start..*start + g.cols].copy_from_slice(g.row(i));
                    }
                    accumulate(grads, *a, d);
                }
            }
            Op::SliceRows(a, start) => {
                if want(*a) {
                    let src = self.value(*a);
                    let mut d = Mat::zeros(src.rows, src.cols);
                    d.data[start * src.cols..(start + g.rows) * src.cols].copy_from_slice(&g.data);
                    accumulate(grads, *a, d);
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
