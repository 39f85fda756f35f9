//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied during one forward pass.
//! [`Graph::backward`] walks the tape in reverse and returns [`Gradients`]
//! for every node that depends on a parameter or a gradient-tracked leaf.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_STORE_TAG: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named trainable tensors owned by one network.
#[derive(Debug, Serialize, Deserialize)]
pub struct ParamStore {
    #[serde(skip, default = "fresh_tag")]
    tag: u64,
    names: Vec<String>,
    values: Vec<Tensor>,
}

fn fresh_tag() -> u64 {
    NEXT_STORE_TAG.fetch_add(1, Ordering::Relaxed)
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        ParamStore {
            tag: fresh_tag(),
            names: self.names.clone(),
            values: self.values.clone(),
        }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            tag: fresh_tag(),
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Replaces all values, checking names and shapes line up.
    pub fn load(&mut self, names: &[String], values: Vec<Tensor>) -> Result<()> {
        if names != self.names.as_slice() || values.len() != self.values.len() {
            return Err(Error::shape("parameter names do not match network layout"));
        }
        for (dst, src) in self.values.iter().zip(&values) {
            if dst.shape() != src.shape() {
                return Err(Error::shape(format!(
                    "parameter shape {:?} does not match {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
        }
        self.values = values;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        s: f64,
    },
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    Tanh {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    InstanceNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    MulConst {
        x: Var,
        mask: Tensor,
    },
    GlobalAvgPool {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    SoftmaxCe {
        logits: Var,
        targets: Vec<usize>,
        probs: Tensor,
    },
    L1 {
        a: Var,
        b: Var,
    },
    Bce {
        p: Var,
        target: f64,
        eps: f64,
    },
    Mse {
        x: Var,
        target: f64,
    },
    Mean {
        x: Var,
    },
    PadReflect {
        x: Var,
        pad: usize,
    },
    Crop {
        x: Var,
        top: usize,
        left: usize,
    },
    Select {
        x: Var,
        index: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded forward computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<(u64, usize), Var>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<(u64, usize), Var>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for every parameter of `store`, zeros for those the loss
    /// does not depend on.
    pub fn for_store(&self, store: &ParamStore) -> Vec<Tensor> {
        store
            .values
            .iter()
            .enumerate()
            .map(|(i, v)| {
                self.params
                    .get(&(store.tag, i))
                    .and_then(|var| self.grads[var.0].clone())
                    .unwrap_or_else(|| Tensor::zeros(v.shape()))
            })
            .collect()
    }
}

/// Output index range `[start, end)` whose input coordinate
/// `o * stride + k - pad` falls inside `[0, in_len)`.
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

/// Unfolds one `[C, H, W]` sample into a `[C*kh*kw, oh*ow]` patch matrix.
fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let p = g.oh * g.ow;
    for ci in 0..g.c {
        let xp = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (y0, y1) = valid_range(g.oh, g.h, ki, g.pad, g.stride);
            for kj in 0..g.kw {
                let row = &mut cols[((ci * g.kh + ki) * g.kw + kj) * p..][..p];
                row.fill(0.0);
                let (x0, x1) = valid_range(g.ow, g.w, kj, g.pad, g.stride);
                for y in y0..y1 {
                    let iy = y * g.stride + ki - g.pad;
                    let src = &xp[iy * g.w..(iy + 1) * g.w];
                    let dst = &mut row[y * g.ow..(y + 1) * g.ow];
                    for xx in x0..x1 {
                        dst[xx] = src[xx * g.stride + kj - g.pad];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the sample.
fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let p = g.oh * g.ow;
    for ci in 0..g.c {
        let dp = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (y0, y1) = valid_range(g.oh, g.h, ki, g.pad, g.stride);
            for kj in 0..g.kw {
                let row = &cols[((ci * g.kh + ki) * g.kw + kj) * p..][..p];
                let (x0, x1) = valid_range(g.ow, g.w, kj, g.pad, g.stride);
                for y in y0..y1 {
                    let iy = y * g.stride + ki - g.pad;
                    let src = &row[y * g.ow..(y + 1) * g.ow];
                    let dst = &mut dp[iy * g.w..(iy + 1) * g.w];
                    for xx in x0..x1 {
                        dst[xx * g.stride + kj - g.pad] += src[xx];
                    }
                }
            }
        }
    }
}

/// `c = a * b + beta * c` for row-major operands, optionally transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], beta: f64) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: every operand slice covers the full strided extent implied by
    // (m, k, n) and the chosen strides; `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), rsa, csa,
            b.as_ptr(), rsb, csb,
            beta, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

fn valid_range(out_len: usize, in_len: usize, k: usize, pad: usize, stride: usize) -> (usize, usize) {
    let start = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let limit = in_len + pad;
    let end = if limit <= k { 0 } else { (limit - k).div_ceil(stride) };
    (start.min(out_len), end.min(out_len))
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut j = i;
    if j < 0 {
        j = -j;
    }
    if j >= n {
        j = 2 * (n - 1) - j;
    }
    j as usize
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Input that is not differentiated.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is tracked.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Parameter `id` of `store`; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.tag, id.0);
        if let Some(v) = self.params.get(&key) {
            return *v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, true);
        self.params.insert(key, v);
        v
    }

    /// Parameter treated as a constant (e.g. the discriminator during a
    /// generator step).
    pub fn frozen_param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.constant(store.get(id).clone())
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (o, c2, kh, kw) = self.value(w).dims4()?;
        if c != c2 {
            return Err(Error::shape(format!(
                "conv2d: input has {c} channels, kernel expects {c2}"
            )));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape(format!(
                "conv2d: {h}x{wd} input too small for {kh}x{kw} kernel"
            )));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let geo = ConvGeom { c, h, w: wd, kh, kw, stride, pad, oh, ow };
        let kk = c * kh * kw;
        let p = oh * ow;
        let mut out = vec![0.0; n * o * p];
        {
            let xs = self.value(x).data();
            let ws = self.value(w).data();
            let bs = b.map(|b| self.value(b).data());
            let mut cols = vec![0.0; kk * p];
            for ni in 0..n {
                im2col(&xs[ni * c * h * wd..(ni + 1) * c * h * wd], &geo, &mut cols);
                let dst = &mut out[ni * o * p..(ni + 1) * o * p];
                if let Some(bs) = bs {
                    for (oi, plane) in dst.chunks_mut(p).enumerate() {
                        plane.fill(bs[oi]);
                    }
                }
                gemm(o, kk, p, ws, false, &cols, false, dst, 1.0);
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let t = Tensor::from_vec(&[n, o, oh, ow], out)?;
        Ok(self.push(
            t,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            rg,
        ))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let (oh, ow) = (h * factor, w * factor);
        let xs = self.value(x).data();
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[(p * oh + y) * ow + xx] = xs[(p * h + y / factor) * w + xx / factor];
                }
            }
        }
        let t = Tensor::from_vec(&[n, c, oh, ow], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Upsample { x, factor }, rg))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = self.value(a).dims4()?;
        let (n2, cb, h2, w2) = self.value(b).dims4()?;
        if (n, h, w) != (n2, h2, w2) {
            return Err(Error::shape("concat: batch or spatial size differs"));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let plane = h * w;
        let mut out = Vec::with_capacity(n * (ca + cb) * plane);
        for ni in 0..n {
            out.extend_from_slice(&ad[ni * ca * plane..(ni + 1) * ca * plane]);
            out.extend_from_slice(&bd[ni * cb * plane..(ni + 1) * cb * plane]);
        }
        let t = Tensor::from_vec(&[n, ca + cb, h, w], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Concat { a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "add: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut t = self.value(a).clone();
        t.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(t, Op::Scale { x, s }, rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let t = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        let rg = self.rg(x);
        self.push(t, Op::LeakyRelu { x, slope }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::tanh);
        let rg = self.rg(x);
        self.push(t, Op::Tanh { x }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        let rg = self.rg(x);
        self.push(t, Op::Sigmoid { x }, rg)
    }

    /// Per-sample, per-channel normalisation without affine parameters.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let plane = h * w;
        let xs = self.value(x).data();
        let mut out = vec![0.0; xs.len()];
        let mut inv_std = Vec::with_capacity(n * c);
        for p in 0..n * c {
            let src = &xs[p * plane..(p + 1) * plane];
            let mean = src.iter().sum::<f64>() / plane as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / plane as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (o, v) in out[p * plane..(p + 1) * plane].iter_mut().zip(src) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let t = Tensor::from_vec(&[n, c, h, w], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::InstanceNorm { x, inv_std }, rg))
    }

    /// Elementwise product with a constant tensor (dropout masks).
    pub fn mul_const(&mut self, x: Var, mask: Tensor) -> Result<Var> {
        if mask.shape() != self.value(x).shape() {
            return Err(Error::shape("mul_const: mask shape differs"));
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(mask.data())
            .map(|(a, b)| a * b)
            .collect();
        let t = Tensor::from_vec(self.value(x).shape(), data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::MulConst { x, mask }, rg))
    }

    /// NCHW -> NC spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let plane = (h * w) as f64;
        let out = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().sum::<f64>() / plane)
            .collect();
        let t = Tensor::from_vec(&[n, c], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::GlobalAvgPool { x }, rg))
    }

    /// `x [n, d] · wᵀ [d, o] + b [o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.value(x), self.value(w), self.value(b));
        let (n, d) = match xs.shape() {
            [n, d] => (*n, *d),
            s => return Err(Error::shape(format!("linear: input shape {s:?}"))),
        };
        let o = match ws.shape() {
            [o, d2] if *d2 == d => *o,
            s => return Err(Error::shape(format!("linear: weight shape {s:?} for input dim {d}"))),
        };
        if bs.len() != o {
            return Err(Error::shape("linear: bias length"));
        }
        let mut out = vec![0.0; n * o];
        for i in 0..n {
            let row = &xs.data()[i * d..(i + 1) * d];
            for j in 0..o {
                let wr = &ws.data()[j * d..(j + 1) * d];
                out[i * o + j] = bs.data()[j] + row.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let t = Tensor::from_vec(&[n, o], out)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(t, Op::Linear { x, w, b }, rg))
    }

    /// Mean softmax cross-entropy of `logits [n, c]` against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let l = self.value(logits);
        let (n, c) = match l.shape() {
            [n, c] => (*n, *c),
            s => return Err(Error::shape(format!("cross entropy: logits shape {s:?}"))),
        };
        if targets.len() != n || targets.iter().any(|&t| t >= c) {
            return Err(Error::invalid("cross entropy: bad targets"));
        }
        let probs = softmax_rows(l.data(), c);
        let loss = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -probs[i * c + t].max(1e-300).ln())
            .sum::<f64>()
            / n as f64;
        let probs = Tensor::from_vec(&[n, c], probs)?;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean absolute difference.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape("l1: shapes differ"));
        }
        let v = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / self.value(a).len() as f64;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(v), Op::L1 { a, b }, rg))
    }

    /// Mean binary cross-entropy of probabilities against a constant target,
    /// with probabilities clamped to `[eps, 1 - eps]`.
    pub fn bce(&mut self, p: Var, target: f64, eps: f64) -> Var {
        let v = self
            .value(p)
            .data()
            .iter()
            .map(|&q| {
                let q = q.clamp(eps, 1.0 - eps);
                -(target * q.ln() + (1.0 - target) * (1.0 - q).ln())
            })
            .sum::<f64>()
            / self.value(p).len() as f64;
        let rg = self.rg(p);
        self.push(Tensor::scalar(v), Op::Bce { p, target, eps }, rg)
    }

    /// Mean squared distance to a constant target.
    pub fn mse(&mut self, x: Var, target: f64) -> Var {
        let v = self.value(x).data().iter().map(|q| (q - target).powi(2)).sum::<f64>()
            / self.value(x).len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(v), Op::Mse { x, target }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x).mean();
        let rg = self.rg(x);
        self.push(Tensor::scalar(v), Op::Mean { x }, rg)
    }

    /// Reflection padding on both spatial axes.
    pub fn pad_reflect(&mut self, x: Var, pad: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if pad >= h || pad >= w {
            return Err(Error::shape(format!("reflect pad {pad} too large for {h}x{w}")));
        }
        let (oh, ow) = (h + 2 * pad, w + 2 * pad);
        let xs = self.value(x).data();
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            for y in 0..oh {
                let sy = reflect(y as isize - pad as isize, h);
                for xx in 0..ow {
                    let sx = reflect(xx as isize - pad as isize, w);
                    out[(p * oh + y) * ow + xx] = xs[(p * h + sy) * w + sx];
                }
            }
        }
        let t = Tensor::from_vec(&[n, c, oh, ow], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::PadReflect { x, pad }, rg))
    }

    pub fn crop(&mut self, x: Var, top: usize, left: usize, height: usize, width: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if top + height > h || left + width > w {
            return Err(Error::shape("crop window exceeds input"));
        }
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * height * width);
        for p in 0..n * c {
            for y in 0..height {
                let start = (p * h + top + y) * w + left;
                out.extend_from_slice(&xs[start..start + width]);
            }
        }
        let t = Tensor::from_vec(&[n, c, height, width], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Crop { x, top, left }, rg))
    }

    /// Scalar at flat `index`.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let v = *self
            .value(x)
            .data()
            .get(index)
            .ok_or_else(|| Error::invalid("select: index out of range"))?;
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(v), Op::Select { x, index }, rg))
    }

    /// Differentiates the scalar `loss` with respect to every tracked node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            self.backprop_node(node, &gout, &mut grads)?;
            grads[i] = Some(gout);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node, gout: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let go = gout.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (stride, pad) = (*stride, *pad);
                let xt = self.value(*x);
                let wt = self.value(*w);
                let (n, c, h, wd) = xt.dims4()?;
                let (o, _, kh, kw) = wt.dims4()?;
                let (_, _, oh, ow) = node.value.dims4()?;
                let xs = xt.data();
                let ws = wt.data();
                let need_x = self.rg(*x);
                let need_w = self.rg(*w);
                let geo = ConvGeom { c, h, w: wd, kh, kw, stride, pad, oh, ow };
                let kk = c * kh * kw;
                let p = oh * ow;
                let mut dx = vec![0.0; if need_x { xs.len() } else { 0 }];
                let mut dw = vec![0.0; if need_w { ws.len() } else { 0 }];
                let mut cols = vec![0.0; kk * p];
                for ni in 0..n {
                    let gp = &go[ni * o * p..(ni + 1) * o * p];
                    if need_w {
                        im2col(&xs[ni * c * h * wd..(ni + 1) * c * h * wd], &geo, &mut cols);
                        // dW += G * cols^T
                        gemm(o, p, kk, gp, false, &cols, true, &mut dw, 1.0);
                    }
                    if need_x {
                        // dcols = W^T * G
                        cols.fill(0.0);
                        gemm(kk, o, p, ws, true, gp, false, &mut cols, 0.0);
                        col2im(&cols, &geo, &mut dx[ni * c * h * wd..(ni + 1) * c * h * wd]);
                    }
                }
                if need_x {
                    self.accumulate(grads, *x, Tensor::from_vec(xt.shape(), dx)?);
                }
                if need_w {
                    self.accumulate(grads, *w, Tensor::from_vec(wt.shape(), dw)?);
                }
                if let Some(b) = b {
                    let mut db = vec![0.0; o];
                    for ni in 0..n {
                        for (oi, d) in db.iter_mut().enumerate() {
                            *d += go[(ni * o + oi) * oh * ow..(ni * o + oi + 1) * oh * ow]
                                .iter()
                                .sum::<f64>();
                        }
                    }
                    self.accumulate(grads, *b, Tensor::from_vec(&[o], db)?);
                }
            }
            Op::Upsample { x, factor } => {
                let xt = self.value(*x);
                let (n, c, h, w) = xt.dims4()?;
                let (oh, ow) = (h * factor, w * factor);
                let mut dx = vec![0.0; xt.len()];
                for p in 0..n * c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            dx[(p * h + y / factor) * w + xx / factor] += go[(p * oh + y) * ow + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(xt.shape(), dx)?);
            }
            Op::Concat { a, b } => {
                let (n, ca, h, w) = self.value(*a).dims4()?;
                let (_, cb, _, _) = self.value(*b).dims4()?;
                let plane = h * w;
                let mut da = Vec::with_capacity(n * ca * plane);
                let mut db = Vec::with_capacity(n * cb * plane);
                for ni in 0..n {
                    let base = ni * (ca + cb) * plane;
                    da.extend_from_slice(&go[base..base + ca * plane]);
                    db.extend_from_slice(&go[base + ca * plane..base + (ca + cb) * plane]);
                }
                self.accumulate(grads, *a, Tensor::from_vec(&[n, ca, h, w], da)?);
                self.accumulate(grads, *b, Tensor::from_vec(&[n, cb, h, w], db)?);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, gout.clone());
                self.accumulate(grads, *b, gout.clone());
            }
            Op::Scale { x, s } => {
                let s = *s;
                self.accumulate(grads, *x, gout.map(|g| g * s));
            }
            Op::LeakyRelu { x, slope } => {
                let xs = self.value(*x).data();
                let d = go
                    .iter()
                    .zip(xs)
                    .map(|(g, v)| if *v > 0.0 { *g } else { g * slope })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(gout.shape(), d)?);
            }
            Op::Tanh { x } => {
                let d = go
                    .iter()
                    .zip(node.value.data())
                    .map(|(g, y)| g * (1.0 - y * y))
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(gout.shape(), d)?);
            }
            Op::Sigmoid { x } => {
                let d = go
                    .iter()
                    .zip(node.value.data())
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(gout.shape(), d)?);
            }
            Op::InstanceNorm { x, inv_std } => {
                let (n, c, h, w) = node.value.dims4()?;
                let plane = h * w;
                let m = plane as f64;
                let ys = node.value.data();
                let mut dx = vec![0.0; ys.len()];
                for p in 0..n * c {
                    let g = &go[p * plane..(p + 1) * plane];
                    let y = &ys[p * plane..(p + 1) * plane];
                    let sum_g: f64 = g.iter().sum();
                    let sum_gy: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                    let is = inv_std[p];
                    for k in 0..plane {
                        dx[p * plane + k] = is * (g[k] - sum_g / m - y[k] * sum_gy / m);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(node.value.shape(), dx)?);
            }
            Op::MulConst { x, mask } => {
                let d = go.iter().zip(mask.data()).map(|(g, m)| g * m).collect();
                self.accumulate(grads, *x, Tensor::from_vec(gout.shape(), d)?);
            }
            Op::GlobalAvgPool { x } => {
                let xt = self.value(*x);
                let (n, c, h, w) = xt.dims4()?;
                let plane = h * w;
                let mut dx = vec![0.0; xt.len()];
                for p in 0..n * c {
                    let g = go[p] / plane as f64;
                    dx[p * plane..(p + 1) * plane].fill(g);
                }
                self.accumulate(grads, *x, Tensor::from_vec(xt.shape(), dx)?);
            }
            Op::Linear { x, w, b } => {
                let (xt, wt) = (self.value(*x), self.value(*w));
                let (n, d) = (xt.shape()[0], xt.shape()[1]);
                let o = wt.shape()[0];
                let mut dx = vec![0.0; n * d];
                let mut dw = vec![0.0; o * d];
                let mut db = vec![0.0; o];
                for i in 0..n {
                    for j in 0..o {
                        let g = go[i * o + j];
                        db[j] += g;
                        for k in 0..d {
                            dx[i * d + k] += g * wt.data()[j * d + k];
                            dw[j * d + k] += g * xt.data()[i * d + k];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(&[n, d], dx)?);
                self.accumulate(grads, *w, Tensor::from_vec(&[o, d], dw)?);
                self.accumulate(grads, *b, Tensor::from_vec(&[o], db)?);
            }
            Op::SoftmaxCe {
                logits,
                targets,
                probs,
            } => {
                let (n, c) = (probs.shape()[0], probs.shape()[1]);
                let g = go[0] / n as f64;
                let mut d = probs.data().to_vec();
                for (i, &t) in targets.iter().enumerate() {
                    d[i * c + t] -= 1.0;
                }
                d.iter_mut().for_each(|v| *v *= g);
                self.accumulate(grads, *logits, Tensor::from_vec(&[n, c], d)?);
            }
            Op::L1 { a, b } => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let scale = go[0] / at.len() as f64;
                let da: Vec<f64> = at
                    .data()
                    .iter()
                    .zip(bt.data())
                    .map(|(x, y)| {
                        let diff = x - y;
                        if diff > 0.0 {
                            scale
                        } else if diff < 0.0 {
                            -scale
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let db: Vec<f64> = da.iter().map(|v| -v).collect();
                self.accumulate(grads, *a, Tensor::from_vec(at.shape(), da)?);
                self.accumulate(grads, *b, Tensor::from_vec(bt.shape(), db)?);
            }
            Op::Bce { p, target, eps } => {
                let pt = self.value(*p);
                let scale = go[0] / pt.len() as f64;
                let d = pt
                    .data()
                    .iter()
                    .map(|&q| {
                        if q < *eps || q > 1.0 - eps {
                            0.0
                        } else {
                            scale * (-target / q + (1.0 - target) / (1.0 - q))
                        }
                    })
                    .collect();
                self.accumulate(grads, *p, Tensor::from_vec(pt.shape(), d)?);
            }
            Op::Mse { x, target } => {
                let xt = self.value(*x);
                let scale = go[0] / xt.len() as f64;
                let d = xt.data().iter().map(|q| 2.0 * scale * (q - target)).collect();
                self.accumulate(grads, *x, Tensor::from_vec(xt.shape(), d)?);
            }
            Op::Mean { x } => {
                let xt = self.value(*x);
                let g = go[0] / xt.len() as f64;
                self.accumulate(grads, *x, Tensor::full(xt.shape(), g));
            }
            Op::PadReflect { x, pad } => {
                let xt = self.value(*x);
                let (n, c, h, w) = xt.dims4()?;
                let (oh, ow) = (h + 2 * pad, w + 2 * pad);
                let mut dx = vec![0.0; xt.len()];
                for p in 0..n * c {
                    for y in 0..oh {
                        let sy = reflect(y as isize - *pad as isize, h);
                        for xx in 0..ow {
                            let sx = reflect(xx as isize - *pad as isize, w);
                            dx[(p * h + sy) * w + sx] += go[(p * oh + y) * ow + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(xt.shape(), dx)?);
            }
            Op::Crop { x, top, left } => {
                let xt = self.value(*x);
                let (n, c, h, w) = xt.dims4()?;
                let (_, _, ch, cw) = node.value.dims4()?;
                let mut dx = vec![0.0; xt.len()];
                for p in 0..n * c {
                    for y in 0..ch {
                        let dst = (p * h + top + y) * w + left;
                        let src = (p * ch + y) * cw;
                        dx[dst..dst + cw].copy_from_slice(&go[src..src + cw]);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(xt.shape(), dx)?);
            }
            Op::Select { x, index } => {
                let xt = self.value(*x);
                let mut d = Tensor::zeros(xt.shape());
                d.data_mut()[*index] = go[0];
                self.accumulate(grads, *x, d);
            }
        }
        Ok(())
    }
}

/// Row-wise numerically stable softmax of a flat `[n, c]` buffer.
pub fn softmax_rows(logits: &[f64], c: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(c) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / s));
    }
    out
}
