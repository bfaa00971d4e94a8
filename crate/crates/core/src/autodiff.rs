//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding
//! its value and enough structure to propagate gradients backwards.
//! [`Var`] is a cheap handle into the tape. Nodes created from
//! [`Tape::param`] (and anything computed from them) carry a `needs`
//! flag; [`Tape::backward`] only materializes gradients along paths that
//! reach such leaves, which is also how detached sub-graphs work: feed a
//! value through [`Tape::constant`] and no gradient will ever flow into
//! or below it.
//!
//! The op set is exactly what the models in this crate need. Attention
//! is a fused op so the `n x n` score matrices are transient: they are
//! recomputed during the backward pass instead of being stored.

#![allow(clippy::needless_range_loop)] // index loops mirror the math

use crate::resample::{bilinear_backward, bilinear_value};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Neg(Var),
    MatMul(Var, Var),
    /// `[n, d] + [d]` broadcast over rows.
    AddRow(Var, Var),
    /// `[n, d] * [d]` broadcast over rows.
    MulRow(Var, Var),
    SoftmaxRows(Var),
    /// Per-row `(x - mean) / sqrt(var + eps)` with biased variance.
    RowNorm(Var, f64),
    Gelu(Var),
    Softplus(Var),
    /// Fused scaled-dot-product attention over `heads` column groups.
    Attention { q: Var, k: Var, v: Var, heads: usize },
    SliceCols(Var, usize, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize, usize),
    /// `[h, w, c]` image to `[n, k*k*c]` non-overlapping patch rows.
    ImageToPatches(Var, usize),
    /// Inverse of `ImageToPatches` for the given geometry.
    PatchesToImage(Var, usize, usize, usize),
    /// Bilinear resample of `[h, w, c]` to `[oh, ow, c]`.
    Bilinear(Var),
    Clamp01(Var),
    /// `[h, w, c1]` ++ `[h, w, c2]` along the channel axis.
    ConcatChannels(Var, Var),
    Sum(Var),
    Mean(Var),
    /// Sum of absolute values (entrywise L1 norm), scalar output.
    AbsSum(Var),
    /// Euclidean norm of the flattened tensor, scalar output.
    EuclidNorm(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by tape position, produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    fn push(&mut self, value: Tensor, op: Op, needs: bool) -> Var {
        self.nodes.push(Node { value, op, needs });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that participates in backward (parameters, probed inputs).
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add(self.value(b));
        self.push(value, Op::Add(a, b), self.needs(a) || self.needs(b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).sub(self.value(b));
        self.push(value, Op::Sub(a, b), self.needs(a) || self.needs(b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip(self.value(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b), self.needs(a) || self.needs(b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        self.push(value, Op::Scale(a, c), self.needs(a))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v + c);
        self.push(value, Op::AddScalar(a), self.needs(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = self.value(a).scale(-1.0);
        self.push(value, Op::Neg(a), self.needs(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b), self.needs(a) || self.needs(b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (m, d) = (self.value(a).rows(), self.value(a).cols());
        assert_eq!(self.value(row).shape(), &[d], "add_row dim mismatch");
        let mut value = self.value(a).clone();
        {
            let rdata: Vec<f64> = self.value(row).data().to_vec();
            let vdata = value.data_mut();
            for i in 0..m {
                for j in 0..d {
                    vdata[i * d + j] += rdata[j];
                }
            }
        }
        self.push(value, Op::AddRow(a, row), self.needs(a) || self.needs(row))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (m, d) = (self.value(a).rows(), self.value(a).cols());
        assert_eq!(self.value(row).shape(), &[d], "mul_row dim mismatch");
        let mut value = self.value(a).clone();
        {
            let rdata: Vec<f64> = self.value(row).data().to_vec();
            let vdata = value.data_mut();
            for i in 0..m {
                for j in 0..d {
                    vdata[i * d + j] *= rdata[j];
                }
            }
        }
        self.push(value, Op::MulRow(a, row), self.needs(a) || self.needs(row))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows_value(self.value(a));
        self.push(value, Op::SoftmaxRows(a), self.needs(a))
    }

    pub fn row_norm(&mut self, a: Var, eps: f64) -> Var {
        let value = row_norm_value(self.value(a), eps);
        self.push(value, Op::RowNorm(a, eps), self.needs(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu_value);
        self.push(value, Op::Gelu(a), self.needs(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(softplus_value);
        self.push(value, Op::Softplus(a), self.needs(a))
    }

    /// Multi-head scaled dot-product attention. `q`, `k`, `v` are
    /// `[n, d]` with `d` divisible by `heads`; per head the scores are
    /// `Q K^T / sqrt(d/heads)`, softmax-normalized over rows.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let value = attention_value(self.value(q), self.value(k), self.value(v), heads);
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(value, Op::Attention { q, k, v, heads }, needs)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let src = self.value(a);
        let (m, d) = (src.rows(), src.cols());
        assert!(start + len <= d, "slice_cols out of range");
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&src.data()[i * d + start..i * d + start + len]);
        }
        let value = Tensor::new(vec![m, len], data);
        self.push(value, Op::SliceCols(a, start, len), self.needs(a))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let d = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            assert_eq!(self.value(p).cols(), d, "concat_rows col mismatch");
            rows += self.value(p).rows();
            data.extend_from_slice(self.value(p).data());
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(
            Tensor::new(vec![rows, d], data),
            Op::ConcatRows(parts.to_vec()),
            needs,
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let src = self.value(a);
        let (m, d) = (src.rows(), src.cols());
        assert!(start + len <= m, "slice_rows out of range");
        let data = src.data()[start * d..(start + len) * d].to_vec();
        let value = Tensor::new(vec![len, d], data);
        self.push(value, Op::SliceRows(a, start, len), self.needs(a))
    }

    pub fn image_to_patches(&mut self, a: Var, k: usize) -> Var {
        let value = image_to_patches_value(self.value(a), k);
        self.push(value, Op::ImageToPatches(a, k), self.needs(a))
    }

    pub fn patches_to_image(&mut self, a: Var, h: usize, w: usize, k: usize) -> Var {
        let value = patches_to_image_value(self.value(a), h, w, k);
        self.push(value, Op::PatchesToImage(a, h, w, k), self.needs(a))
    }

    pub fn bilinear(&mut self, a: Var, out_h: usize, out_w: usize) -> Var {
        let value = bilinear_value(self.value(a), out_h, out_w);
        self.push(value, Op::Bilinear(a), self.needs(a))
    }

    pub fn clamp01(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.clamp(0.0, 1.0));
        self.push(value, Op::Clamp01(a), self.needs(a))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape().len(), 3);
        assert_eq!(tb.shape().len(), 3);
        let (h, w, ca) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        let cb = tb.shape()[2];
        assert_eq!(&tb.shape()[..2], &[h, w], "concat_channels extent mismatch");
        let mut data = Vec::with_capacity(h * w * (ca + cb));
        for p in 0..h * w {
            data.extend_from_slice(&ta.data()[p * ca..(p + 1) * ca]);
            data.extend_from_slice(&tb.data()[p * cb..(p + 1) * cb]);
        }
        let value = Tensor::new(vec![h, w, ca + cb], data);
        self.push(
            value,
            Op::ConcatChannels(a, b),
            self.needs(a) || self.needs(b),
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a), self.needs(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let value = Tensor::scalar(self.value(a).sum() / n);
        self.push(value, Op::Mean(a), self.needs(a))
    }

    pub fn abs_sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data().iter().map(|v| v.abs()).sum());
        self.push(value, Op::AbsSum(a), self.needs(a))
    }

    pub fn euclid_norm(&mut self, a: Var) -> Var {
        let sq: f64 = self.value(a).data().iter().map(|v| v * v).sum();
        let value = Tensor::scalar(sq.sqrt());
        self.push(value, Op::EuclidNorm(a), self.needs(a))
    }

    /// Mean of a list of scalar vars.
    pub fn mean_scalars(&mut self, items: &[Var]) -> Var {
        assert!(!items.is_empty());
        let mut acc = items[0];
        for &v in &items[1..] {
            acc = self.add(acc, v);
        }
        self.scale(acc, 1.0 / items.len() as f64)
    }

    /// Reverse-mode sweep from a scalar root. Gradients are accumulated
    /// only into nodes on a path to a `param` leaf.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(
            self.value(root).numel(),
            1,
            "backward root must be scalar, got {:?}",
            self.value(root).shape()
        );
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.distribute(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], target: Var, delta: Tensor) {
        if !self.needs(target) {
            return;
        }
        match &mut grads[target.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn distribute(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.zip(self.value(*b), |x, y| x * y));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.zip(self.value(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.scale(*c)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Neg(a) => self.accumulate(grads, *a, g.scale(-1.0)),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.rows(), ta.cols());
                let n = tb.cols();
                if self.needs(*a) {
                    // dA = G . B^T
                    let mut da = Tensor::zeros(&[m, k]);
                    gemm(m, n, k, g.data(), false, tb.data(), true, da.data_mut());
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    // dB = A^T . G
                    let mut db = Tensor::zeros(&[k, n]);
                    gemm(k, m, n, ta.data(), true, g.data(), false, db.data_mut());
                    self.accumulate(grads, *b, db);
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.needs(*row) {
                    let (m, d) = (g.rows(), g.cols());
                    let mut dr = Tensor::zeros(&[d]);
                    for i in 0..m {
                        for j in 0..d {
                            dr.data_mut()[j] += g.data()[i * d + j];
                        }
                    }
                    self.accumulate(grads, *row, dr);
                }
            }
            Op::MulRow(a, row) => {
                let (m, d) = (g.rows(), g.cols());
                if self.needs(*a) {
                    let rdata = self.value(*row).data();
                    let mut da = g.clone();
                    for i in 0..m {
                        for j in 0..d {
                            da.data_mut()[i * d + j] *= rdata[j];
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*row) {
                    let adata = self.value(*a).data();
                    let mut dr = Tensor::zeros(&[d]);
                    for i in 0..m {
                        for j in 0..d {
                            dr.data_mut()[j] += g.data()[i * d + j] * adata[i * d + j];
                        }
                    }
                    self.accumulate(grads, *row, dr);
                }
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[idx].value;
                self.accumulate(grads, *a, softmax_rows_backward(y, g));
            }
            Op::RowNorm(a, eps) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, row_norm_backward(x, g, *eps));
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, g.zip(x, |gi, xi| gi * gelu_derivative(xi)));
            }
            Op::Softplus(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, g.zip(x, |gi, xi| gi * sigmoid_value(xi)));
            }
            Op::Attention { q, k, v, heads } => {
                let (dq, dk, dv) = attention_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    *heads,
                    g,
                );
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dv);
            }
            Op::SliceCols(a, start, len) => {
                let src = self.value(*a);
                let (m, d) = (src.rows(), src.cols());
                let mut da = Tensor::zeros(&[m, d]);
                for i in 0..m {
                    for j in 0..*len {
                        da.data_mut()[i * d + start + j] = g.data()[i * len + j];
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::ConcatRows(parts) => {
                let d = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.needs(p) {
                        let data = g.data()[offset * d..(offset + rows) * d].to_vec();
                        self.accumulate(grads, p, Tensor::new(vec![rows, d], data));
                    }
                    offset += rows;
                }
            }
            Op::SliceRows(a, start, len) => {
                let src = self.value(*a);
                let (m, d) = (src.rows(), src.cols());
                let mut da = Tensor::zeros(&[m, d]);
                da.data_mut()[start * d..(start + len) * d].copy_from_slice(g.data());
                self.accumulate(grads, *a, da);
            }
            Op::ImageToPatches(a, k) => {
                let img_shape = self.value(*a).shape().to_vec();
                let mut da = Tensor::zeros(&img_shape);
                scatter_patches_to_image(g, &mut da, *k);
                self.accumulate(grads, *a, da);
            }
            Op::PatchesToImage(a, h, w, k) => {
                let da = image_to_patches_value_into(g, *h, *w, *k, self.value(*a).shape());
                self.accumulate(grads, *a, da);
            }
            Op::Bilinear(a) => {
                let in_shape = self.value(*a).shape();
                self.accumulate(grads, *a, bilinear_backward(g, in_shape));
            }
            Op::Clamp01(a) => {
                let x = self.value(*a);
                self.accumulate(
                    grads,
                    *a,
                    g.zip(x, |gi, xi| if (0.0..=1.0).contains(&xi) { gi } else { 0.0 }),
                );
            }
            Op::ConcatChannels(a, b) => {
                let (ca, cb) = (self.value(*a).shape()[2], self.value(*b).shape()[2]);
                let (h, w) = (g.shape()[0], g.shape()[1]);
                let c = ca + cb;
                if self.needs(*a) {
                    let mut da = Tensor::zeros(self.value(*a).shape());
                    for p in 0..h * w {
                        da.data_mut()[p * ca..(p + 1) * ca]
                            .copy_from_slice(&g.data()[p * c..p * c + ca]);
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = Tensor::zeros(self.value(*b).shape());
                    for p in 0..h * w {
                        db.data_mut()[p * cb..(p + 1) * cb]
                            .copy_from_slice(&g.data()[p * c + ca..(p + 1) * c]);
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Sum(a) => {
                let gs = g.item();
                self.accumulate(grads, *a, Tensor::full(self.value(*a).shape(), gs));
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel() as f64;
                let gs = g.item() / n;
                self.accumulate(grads, *a, Tensor::full(self.value(*a).shape(), gs));
            }
            Op::AbsSum(a) => {
                let gs = g.item();
                let x = self.value(*a);
                self.accumulate(grads, *a, x.map(|xi| gs * sign_subgradient(xi)));
            }
            Op::EuclidNorm(a) => {
                let norm = self.nodes[idx].value.item();
                let gs = g.item();
                let x = self.value(*a);
                let da = if norm > 0.0 {
                    x.map(|xi| gs * xi / norm)
                } else {
                    Tensor::zeros(x.shape())
                };
                self.accumulate(grads, *a, da);
            }
        }
    }
}

fn sign_subgradient(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn sigmoid_value(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus_value(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Exact GELU: x * Phi(x) with the Gaussian CDF.
pub(crate) fn gelu_value(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_derivative(x: f64) -> f64 {
    let phi_cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let phi_pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    phi_cdf + x * phi_pdf
}

pub(crate) fn softmax_rows_value(x: &Tensor) -> Tensor {
    let (m, d) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(&[m, d]);
    for i in 0..m {
        let row = &x.data()[i * d..(i + 1) * d];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for j in 0..d {
            let e = (row[j] - max).exp();
            out.data_mut()[i * d + j] = e;
            denom += e;
        }
        for j in 0..d {
            out.data_mut()[i * d + j] /= denom;
        }
    }
    out
}

fn softmax_rows_backward(y: &Tensor, g: &Tensor) -> Tensor {
    let (m, d) = (y.rows(), y.cols());
    let mut out = Tensor::zeros(&[m, d]);
    for i in 0..m {
        let yr = &y.data()[i * d..(i + 1) * d];
        let gr = &g.data()[i * d..(i + 1) * d];
        let dot: f64 = yr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
        for j in 0..d {
            out.data_mut()[i * d + j] = yr[j] * (gr[j] - dot);
        }
    }
    out
}

fn row_norm_value(x: &Tensor, eps: f64) -> Tensor {
    let (m, d) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(&[m, d]);
    for i in 0..m {
        let row = &x.data()[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv_std = 1.0 / (var + eps).sqrt();
        for j in 0..d {
            out.data_mut()[i * d + j] = (row[j] - mean) * inv_std;
        }
    }
    out
}

fn row_norm_backward(x: &Tensor, g: &Tensor, eps: f64) -> Tensor {
    let (m, d) = (x.rows(), x.cols());
    let n = d as f64;
    let mut out = Tensor::zeros(&[m, d]);
    for i in 0..m {
        let row = &x.data()[i * d..(i + 1) * d];
        let gr = &g.data()[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv_std = 1.0 / (var + eps).sqrt();
        let g_mean = gr.iter().sum::<f64>() / n;
        let mut gy_dot = 0.0;
        for j in 0..d {
            gy_dot += gr[j] * (row[j] - mean) * inv_std;
        }
        let gy_mean = gy_dot / n;
        for j in 0..d {
            let y = (row[j] - mean) * inv_std;
            out.data_mut()[i * d + j] = inv_std * (gr[j] - g_mean - y * gy_mean);
        }
    }
    out
}

fn attention_value(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Tensor {
    let (n, d) = (q.rows(), q.cols());
    assert_eq!(k.shape(), &[n, d]);
    assert_eq!(v.shape(), &[n, d]);
    assert_eq!(d % heads, 0, "dims {} not divisible by {} heads", d, heads);
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Tensor::zeros(&[n, d]);
    for h in 0..heads {
        let qh = slice_cols_value(q, h * dh, dh);
        let kh = slice_cols_value(k, h * dh, dh);
        let vh = slice_cols_value(v, h * dh, dh);
        let mut scores = Tensor::zeros(&[n, n]);
        gemm(n, dh, n, qh.data(), false, kh.data(), true, scores.data_mut());
        let probs = softmax_rows_value(&scores.scale(scale));
        let oh = probs.matmul(&vh);
        for i in 0..n {
            for j in 0..dh {
                out.data_mut()[i * d + h * dh + j] = oh.data()[i * dh + j];
            }
        }
    }
    out
}

/// Per-head attention probability matrices, for inspection and tests.
pub fn attention_probs(q: &Tensor, k: &Tensor, heads: usize) -> Vec<Tensor> {
    let (n, d) = (q.rows(), q.cols());
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    (0..heads)
        .map(|h| {
            let qh = slice_cols_value(q, h * dh, dh);
            let kh = slice_cols_value(k, h * dh, dh);
            let mut scores = Tensor::zeros(&[n, n]);
            gemm(n, dh, n, qh.data(), false, kh.data(), true, scores.data_mut());
            softmax_rows_value(&scores.scale(scale))
        })
        .collect()
}

fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    g: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (n, d) = (q.rows(), q.cols());
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Tensor::zeros(&[n, d]);
    let mut dk = Tensor::zeros(&[n, d]);
    let mut dv = Tensor::zeros(&[n, d]);
    for h in 0..heads {
        let qh = slice_cols_value(q, h * dh, dh);
        let kh = slice_cols_value(k, h * dh, dh);
        let vh = slice_cols_value(v, h * dh, dh);
        let gh = slice_cols_value(g, h * dh, dh);
        // Recompute the probabilities for this head.
        let mut scores = Tensor::zeros(&[n, n]);
        gemm(n, dh, n, qh.data(), false, kh.data(), true, scores.data_mut());
        let probs = softmax_rows_value(&scores.scale(scale));
        // dV_h = P^T . G_h
        let mut dvh = Tensor::zeros(&[n, dh]);
        gemm(n, n, dh, probs.data(), true, gh.data(), false, dvh.data_mut());
        // dP = G_h . V_h^T, then back through the softmax.
        let mut dp = Tensor::zeros(&[n, n]);
        gemm(n, dh, n, gh.data(), false, vh.data(), true, dp.data_mut());
        let ds = softmax_rows_backward(&probs, &dp).scale(scale);
        // dQ_h = dS . K_h ; dK_h = dS^T . Q_h
        let mut dqh = Tensor::zeros(&[n, dh]);
        gemm(n, n, dh, ds.data(), false, kh.data(), false, dqh.data_mut());
        let mut dkh = Tensor::zeros(&[n, dh]);
        gemm(n, n, dh, ds.data(), true, qh.data(), false, dkh.data_mut());
        for i in 0..n {
            for j in 0..dh {
                dq.data_mut()[i * d + h * dh + j] = dqh.data()[i * dh + j];
                dk.data_mut()[i * d + h * dh + j] = dkh.data()[i * dh + j];
                dv.data_mut()[i * d + h * dh + j] = dvh.data()[i * dh + j];
            }
        }
    }
    (dq, dk, dv)
}

fn slice_cols_value(x: &Tensor, start: usize, len: usize) -> Tensor {
    let (m, d) = (x.rows(), x.cols());
    let mut data = Vec::with_capacity(m * len);
    for i in 0..m {
        data.extend_from_slice(&x.data()[i * d + start..i * d + start + len]);
    }
    Tensor::new(vec![m, len], data)
}

pub(crate) fn image_to_patches_value(img: &Tensor, k: usize) -> Tensor {
    assert_eq!(img.shape().len(), 3, "expected [h, w, c] image");
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    assert_eq!(h % k, 0, "height {} not divisible by {}", h, k);
    assert_eq!(w % k, 0, "width {} not divisible by {}", w, k);
    let (gr, gc) = (h / k, w / k);
    let (n, d) = (gr * gc, k * k * c);
    let mut out = Tensor::zeros(&[n, d]);
    for py in 0..gr {
        for px in 0..gc {
            let p = py * gc + px;
            for dy in 0..k {
                for dx in 0..k {
                    for ch in 0..c {
                        let src = ((py * k + dy) * w + px * k + dx) * c + ch;
                        let dst = p * d + (dy * k + dx) * c + ch;
                        out.data_mut()[dst] = img.data()[src];
                    }
                }
            }
        }
    }
    out
}

fn image_to_patches_value_into(g: &Tensor, h: usize, w: usize, k: usize, patch_shape: &[usize]) -> Tensor {
    // Backward of PatchesToImage is exactly the forward patch split of g.
    let _ = (h, w);
    let patches = image_to_patches_value(g, k);
    assert_eq!(patches.shape(), patch_shape);
    patches
}

pub(crate) fn patches_to_image_value(patches: &Tensor, h: usize, w: usize, k: usize) -> Tensor {
    assert_eq!(patches.shape().len(), 2);
    let (n, d) = (patches.rows(), patches.cols());
    assert_eq!(d % (k * k), 0, "patch dim {} not divisible by k*k", d);
    let c = d / (k * k);
    let (gr, gc) = (h / k, w / k);
    assert_eq!(n, gr * gc, "patch count {} does not fill {}x{}", n, h, w);
    let mut out = Tensor::zeros(&[h, w, c]);
    scatter_patches_to_image(patches, &mut out, k);
    out
}

fn scatter_patches_to_image(patches: &Tensor, img: &mut Tensor, k: usize) {
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let (gr, gc) = (h / k, w / k);
    let d = k * k * c;
    for py in 0..gr {
        for px in 0..gc {
            let p = py * gc + px;
            for dy in 0..k {
                for dx in 0..k {
                    for ch in 0..c {
                        let dst = ((py * k + dy) * w + px * k + dx) * c + ch;
                        let src = p * d + (dy * k + dx) * c + ch;
                        img.data_mut()[dst] += patches.data()[src];
                    }
                }
            }
        }
    }
}
