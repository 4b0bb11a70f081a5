use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;

use super::conv::{self, ConvGeom};
use super::tensor::{ParameterSet, Tensor};
use crate::error::{contract_err, domain_err, shape_err, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Batch-norm behaviour for one forward call.
#[derive(Clone, Debug)]
pub enum BnMode<'a> {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with stored running statistics.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel statistics of a training-mode batch-norm call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Square(Var),
    Softplus(Var),
    Sigmoid(Var),
    Clamp(Var, f64, f64),
    Prelu(Var, Var),
    Softmax(Var),
    LogSoftmax(Var),
    MatMul(Var, Var),
    Linear(Var, Var, Option<Var>),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, training: bool },
    Reshape(Var),
    Sum(Var),
    SumRows(Var),
    Gather(Var, Vec<usize>),
    Concat(Var, Var),
    Reparam(Var, Var, Vec<f64>),
}

#[derive(Clone, Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Gradients of one scalar with respect to every recorded value.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Records a forward computation for reverse-mode differentiation.
///
/// A tape is built fresh for every forward pass. Parameters are pulled in by
/// name through [`Tape::param`]; [`Tape::backward`] pushes the resulting
/// gradients back into the [`ParameterSet`].
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bindings: HashMap<String, Var>,
}

fn same_shape(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return shape_err(format!("{what}: operand shapes {a:?} and {b:?} differ"));
    }
    Ok(())
}

#[inline]
pub(crate) fn softplus_f(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub(crate) fn sigmoid_f(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

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

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { shape, data, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Copies a recorded value out as a plain tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("node shape is consistent")
    }

    /// Value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].data[0]
    }

    /// Records a value that never receives gradients.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    /// Records a leaf whose gradient can be queried with [`Tape::gradients`].
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    /// Records the current value of a named parameter. Repeated lookups of the
    /// same name return the same handle.
    pub fn param(&mut self, params: &ParameterSet, name: &str) -> Result<Var> {
        if let Some(&v) = self.bindings.get(name) {
            return Ok(v);
        }
        let t = params.get(name)?;
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true);
        self.bindings.insert(name.to_string(), v);
        Ok(v)
    }

    /// A gradient-free copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = &self.nodes[v.0];
        let (shape, data) = (n.shape.clone(), n.data.clone());
        self.push(shape, data, Op::Leaf, false)
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<(Vec<usize>, Vec<f64>)> {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        same_shape(&na.shape, &nb.shape, what)?;
        let data = na.data.iter().zip(&nb.data).map(|(&x, &y)| f(x, y)).collect();
        Ok((na.shape.clone(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, d) = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(s, d, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, d) = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(s, d, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, d) = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(s, d, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, d) = self.binary(a, b, "div", |x, y| x / y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(s, d, Op::Div(a, b), rg))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let n = &self.nodes[a.0];
        let (shape, data) = (n.shape.clone(), n.data.iter().map(|&x| f(x)).collect());
        let rg = n.requires_grad;
        self.push(shape, data, op, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Offset(a), |x| x + c)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), f64::ln)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Elementwise `log(1 + exp(x))`, overflow safe.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus_f)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid_f)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    /// `x` where non-negative, `slope·x` otherwise. `slope` has one element or
    /// one per channel (axis 1).
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let (nx, ns) = (&self.nodes[x.0], &self.nodes[slope.0]);
        let channels = if ns.data.len() == 1 {
            1
        } else {
            if nx.shape.len() < 2 || nx.shape[1] != ns.data.len() {
                return shape_err(format!("prelu slope {:?} does not match input {:?}", ns.shape, nx.shape));
            }
            ns.data.len()
        };
        let inner: usize = nx.shape.iter().skip(2).product();
        let data = nx
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = if channels == 1 { 0 } else { (i / inner) % channels };
                if v >= 0.0 { v } else { ns.data[c] * v }
            })
            .collect();
        let shape = nx.shape.clone();
        let rg = self.rg(x) || self.rg(slope);
        Ok(self.push(shape, data, Op::Prelu(x, slope), rg))
    }

    fn rows(&self, a: Var, what: &str) -> Result<(usize, usize)> {
        match self.nodes[a.0].shape.as_slice() {
            &[n, k] if k >= 1 => Ok((n, k)),
            s => shape_err(format!("{what} expects a non-empty [N, K] matrix, got {s:?}")),
        }
    }

    /// Row-wise softmax of an `[N, K]` matrix.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (n, k) = self.rows(a, "softmax")?;
        let mut out = self.nodes[a.0].data.clone();
        for row in out.chunks_mut(k).take(n) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let rg = self.rg(a);
        Ok(self.push(vec![n, k], out, Op::Softmax(a), rg))
    }

    /// Row-wise log-softmax of an `[N, K]` matrix.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (n, k) = self.rows(a, "log_softmax")?;
        let mut out = self.nodes[a.0].data.clone();
        for row in out.chunks_mut(k).take(n) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let rg = self.rg(a);
        Ok(self.push(vec![n, k], out, Op::LogSoftmax(a), rg))
    }

    /// `[N, K] × [K, M]` matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let (n, k, m) = match (sa.as_slice(), sb.as_slice()) {
            (&[n, k], &[k2, m]) if k == k2 => (n, k, m),
            _ => return shape_err(format!("matmul of {sa:?} and {sb:?}")),
        };
        let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for p in 0..k {
                let av = da[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let orow = &mut out[i * m..(i + 1) * m];
                orow.iter_mut().zip(&db[p * m..(p + 1) * m]).for_each(|(o, bv)| *o += av * bv);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![n, m], out, Op::MatMul(a, b), rg))
    }

    /// `out[n, j] = Σ_i weight[j, i]·input[n, i] + bias[j]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (sx, sw) = (&self.nodes[x.0].shape, &self.nodes[weight.0].shape);
        let (n, din, dout) = match (sx.as_slice(), sw.as_slice()) {
            (&[n, din], &[dout, din2]) if din == din2 => (n, din, dout),
            _ => return shape_err(format!("linear: input {sx:?} against weight {sw:?}")),
        };
        if let Some(b) = bias {
            if self.nodes[b.0].shape != [dout] {
                return shape_err(format!("linear: bias {:?} for {dout} outputs", self.nodes[b.0].shape));
            }
        }
        let (dx, dw) = (&self.nodes[x.0].data, &self.nodes[weight.0].data);
        let mut out = vec![0.0; n * dout];
        for i in 0..n {
            let xr = &dx[i * din..(i + 1) * din];
            for j in 0..dout {
                let wr = &dw[j * din..(j + 1) * din];
                out[i * dout + j] = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
            }
        }
        if let Some(b) = bias {
            let db = &self.nodes[b.0].data;
            out.chunks_mut(dout).for_each(|r| r.iter_mut().zip(db).for_each(|(o, bv)| *o += bv));
        }
        let rg = self.rg(x) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(vec![n, dout], out, Op::Linear(x, weight, bias), rg))
    }

    fn conv_bias_check(&self, b: Option<Var>, ch: usize) -> Result<()> {
        if let Some(b) = b {
            if self.nodes[b.0].shape != [ch] {
                return shape_err(format!("conv bias {:?} for {ch} channels", self.nodes[b.0].shape));
            }
        }
        Ok(())
    }

    /// Cross-correlation of `[N,C,H,W]` input with `[F,C,kh,kw]` weight.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.nodes[x.0].shape.clone(), self.nodes[w.0].shape.clone());
        let (&[n, c, h, wd], &[f, c2, kh, kw]) = (sx.as_slice(), sw.as_slice()) else {
            return shape_err(format!("conv2d expects 4-D input and weight, got {sx:?} and {sw:?}"));
        };
        if c != c2 {
            return shape_err(format!("conv2d: input has {c} channels, weight expects {c2}"));
        }
        if stride == 0 {
            return shape_err("conv2d: stride must be at least 1");
        }
        if kh > h + 2 * padding || kw > wd + 2 * padding {
            return shape_err(format!("conv2d: kernel {kh}x{kw} exceeds padded input {h}x{wd} (padding {padding})"));
        }
        self.conv_bias_check(b, f)?;
        let geom = ConvGeom {
            batch: n,
            in_ch: c,
            out_ch: f,
            in_h: h,
            in_w: wd,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (wd + 2 * padding - kw) / stride + 1,
            kh,
            kw,
            stride,
            padding,
        };
        let mut out = conv::correlate(&geom, &self.nodes[x.0].data, &self.nodes[w.0].data);
        if let Some(b) = b {
            conv::add_channel_bias(&mut out, &self.nodes[b.0].data, n, geom.out_h * geom.out_w);
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(vec![n, f, geom.out_h, geom.out_w], out, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// Transposed convolution: the linear adjoint of [`Tape::conv2d`] with the
    /// same `[F,C,kh,kw]` weight, mapping `[N,F,H,W]` to `[N,C,H',W']` with
    /// `H' = (H−1)·stride − 2·padding + kh + output_padding`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.nodes[x.0].shape.clone(), self.nodes[w.0].shape.clone());
        let (&[n, f, h, wd], &[f2, c, kh, kw]) = (sx.as_slice(), sw.as_slice()) else {
            return shape_err(format!("conv_transpose2d expects 4-D input and weight, got {sx:?} and {sw:?}"));
        };
        if f != f2 {
            return shape_err(format!("conv_transpose2d: input has {f} channels, weight expects {f2}"));
        }
        if stride == 0 || output_padding >= stride {
            return shape_err("conv_transpose2d: need stride ≥ 1 and output_padding < stride");
        }
        let full_h = (h - 1) * stride + kh + output_padding;
        let full_w = (wd - 1) * stride + kw + output_padding;
        if h == 0 || wd == 0 || full_h <= 2 * padding || full_w <= 2 * padding {
            return shape_err(format!("conv_transpose2d: padding {padding} consumes the whole {full_h}x{full_w} output"));
        }
        self.conv_bias_check(b, c)?;
        let geom = ConvGeom {
            batch: n,
            in_ch: c,
            out_ch: f,
            in_h: full_h - 2 * padding,
            in_w: full_w - 2 * padding,
            out_h: h,
            out_w: wd,
            kh,
            kw,
            stride,
            padding,
        };
        let mut out = conv::correlate_adjoint(&geom, &self.nodes[x.0].data, &self.nodes[w.0].data);
        if let Some(b) = b {
            conv::add_channel_bias(&mut out, &self.nodes[b.0].data, n, geom.in_h * geom.in_w);
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(vec![n, c, geom.in_h, geom.in_w], out, Op::ConvTranspose2d { x, w, b, geom }, rg))
    }

    /// Per-channel (axis 1) normalization followed by the affine `gamma`, `beta`.
    /// In training mode the batch statistics are returned so the caller can
    /// fold them into running statistics.
    pub fn batchnorm(&mut self, x: Var, gamma: Var, beta: Var, mode: BnMode<'_>) -> Result<(Var, Option<BatchStats>)> {
        let shape = self.nodes[x.0].shape.clone();
        if shape.len() < 2 {
            return shape_err(format!("batchnorm expects [N, C, ...], got {shape:?}"));
        }
        let (n, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        for p in [gamma, beta] {
            if self.nodes[p.0].shape != [c] {
                return shape_err(format!("batchnorm affine {:?} for {c} channels", self.nodes[p.0].shape));
            }
        }
        let xd = &self.nodes[x.0].data;
        let count = (n * inner) as f64;
        let (mean, var, training) = match mode {
            BnMode::Train => {
                if n < 2 {
                    return Err(crate::Error::DegenerateBatch(format!(
                        "training-mode batchnorm needs at least 2 samples, got {n}"
                    )));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for i in 0..n {
                    for (ch, m) in mean.iter_mut().enumerate() {
                        let base = (i * c + ch) * inner;
                        *m += xd[base..base + inner].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * inner;
                        var[ch] += xd[base..base + inner].iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count);
                (mean, var, true)
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return shape_err(format!("batchnorm running stats sized {} for {c} channels", mean.len()));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (gd, bd) = (&self.nodes[gamma.0].data, &self.nodes[beta.0].data);
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * inner;
                for k in base..base + inner {
                    xhat[k] = (xd[k] - mean[ch]) * inv_std[ch];
                    out[k] = gd[ch] * xhat[k] + bd[ch];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(shape, out, Op::BatchNorm { x, gamma, beta, xhat, inv_std, training }, rg);
        Ok((v, training.then_some(BatchStats { mean, var })))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n = &self.nodes[x.0];
        if shape.iter().product::<usize>() != n.data.len() {
            return shape_err(format!("cannot reshape {:?} to {shape:?}", n.shape));
        }
        let (data, rg) = (n.data.clone(), n.requires_grad);
        Ok(self.push(shape.to_vec(), data, Op::Reshape(x), rg))
    }

    /// `[N, ...]` to `[N, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        if shape.is_empty() {
            return shape_err("cannot flatten a scalar");
        }
        let rest: usize = shape[1..].iter().product();
        self.reshape(x, &[shape[0], rest])
    }

    /// Inverse of [`Tape::flatten`].
    pub fn unflatten(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.reshape(x, shape)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let n = &self.nodes[x.0];
        let (s, rg) = (n.data.iter().sum(), n.requires_grad);
        self.push(Vec::new(), vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let len = self.nodes[x.0].data.len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / len)
    }

    /// Sums everything but the leading axis: `[N, ...]` to `[N]`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let node = &self.nodes[x.0];
        if node.shape.is_empty() {
            return shape_err("sum_rows on a scalar");
        }
        let n = node.shape[0];
        let stride = node.data.len().checked_div(n).unwrap_or(0);
        let out = (0..n).map(|i| node.data[i * stride..(i + 1) * stride].iter().sum()).collect();
        let rg = node.requires_grad;
        Ok(self.push(vec![n], out, Op::SumRows(x), rg))
    }

    /// Picks `x[n, idx[n]]` from an `[N, K]` matrix.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, k) = self.rows(x, "gather")?;
        if idx.len() != n {
            return shape_err(format!("gather: {} indices for {n} rows", idx.len()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= k) {
            return shape_err(format!("gather: index {bad} out of range for {k} columns"));
        }
        let d = &self.nodes[x.0].data;
        let out = idx.iter().enumerate().map(|(i, &j)| d[i * k + j]).collect();
        let rg = self.rg(x);
        Ok(self.push(vec![n], out, Op::Gather(x, idx.to_vec()), rg))
    }

    /// Concatenates `[N, P]` and `[N, Q]` into `[N, P+Q]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, p) = self.rows(a, "concat")?;
        let (nb, q) = self.rows(b, "concat")?;
        if na != nb {
            return shape_err(format!("concat of {na} and {nb} rows"));
        }
        let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        let mut out = Vec::with_capacity(na * (p + q));
        for i in 0..na {
            out.extend_from_slice(&da[i * p..(i + 1) * p]);
            out.extend_from_slice(&db[i * q..(i + 1) * q]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![na, p + q], out, Op::Concat(a, b), rg))
    }

    /// `mu + sqrt(var) ⊙ eps` with `eps ~ N(0, I)` drawn from `rng`. Gradients
    /// reach `mu` and `var` only.
    pub fn reparameterize<R: Rng + ?Sized>(&mut self, mu: Var, var: Var, rng: &mut R) -> Result<Var> {
        let len = self.nodes[mu.0].data.len();
        let eps: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
        self.reparameterize_with(mu, var, eps)
    }

    /// [`Tape::reparameterize`] with caller-supplied noise.
    pub fn reparameterize_with(&mut self, mu: Var, var: Var, eps: Vec<f64>) -> Result<Var> {
        let (nm, nv) = (&self.nodes[mu.0], &self.nodes[var.0]);
        same_shape(&nm.shape, &nv.shape, "reparameterize")?;
        if eps.len() != nm.data.len() {
            return shape_err("reparameterize: noise length differs from mean");
        }
        if let Some(v) = nv.data.iter().find(|v| !(**v >= 0.0)) {
            return domain_err(format!("reparameterize: negative variance {v}"));
        }
        let out = nm.data.iter().zip(&nv.data).zip(&eps).map(|((m, v), e)| m + v.sqrt() * e).collect();
        let shape = nm.shape.clone();
        let rg = self.rg(mu) || self.rg(var);
        Ok(self.push(shape, out, Op::Reparam(mu, var, eps), rg))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].data.len() != 1 {
            return contract_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backprop_node(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Accumulates `∂loss/∂p` into every parameter bound on this tape.
    /// Calling it twice without zeroing doubles the gradients.
    pub fn backward(&self, loss: Var, params: &mut ParameterSet) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (name, &v) in &self.bindings {
            if let Some(g) = grads.get(v) {
                params.get_mut(name)?.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.data;
        let mut send = |v: Var, gv: Vec<f64>| {
            if self.nodes[v.0].requires_grad {
                add_into(&mut grads[v.0], &gv);
            }
        };
        let val = |v: Var| self.nodes[v.0].data.as_slice();
        let map1 = |v: Var, f: &dyn Fn(usize) -> f64| -> Vec<f64> { (0..val(v).len()).map(f).collect() };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (da, db) = (val(*a), val(*b));
                send(*a, map1(*a, &|k| g[k] * db[k]));
                send(*b, map1(*b, &|k| g[k] * da[k]));
            }
            Op::Div(a, b) => {
                let (da, db) = (val(*a), val(*b));
                send(*a, map1(*a, &|k| g[k] / db[k]));
                send(*b, map1(*b, &|k| -g[k] * da[k] / (db[k] * db[k])));
            }
            Op::Scale(a, c) => send(*a, g.iter().map(|x| c * x).collect()),
            Op::Offset(a) | Op::Reshape(a) => send(*a, g.to_vec()),
            Op::Exp(a) => send(*a, map1(*a, &|k| g[k] * out[k])),
            Op::Ln(a) => {
                let da = val(*a);
                send(*a, map1(*a, &|k| g[k] / da[k]));
            }
            Op::Sqrt(a) => send(*a, map1(*a, &|k| if out[k] > 0.0 { g[k] * 0.5 / out[k] } else { 0.0 })),
            Op::Square(a) => {
                let da = val(*a);
                send(*a, map1(*a, &|k| 2.0 * da[k] * g[k]));
            }
            Op::Softplus(a) => {
                let da = val(*a);
                send(*a, map1(*a, &|k| g[k] * sigmoid_f(da[k])));
            }
            Op::Sigmoid(a) => send(*a, map1(*a, &|k| g[k] * out[k] * (1.0 - out[k]))),
            Op::Clamp(a, lo, hi) => {
                let da = val(*a);
                send(*a, map1(*a, &|k| if da[k] > *lo && da[k] < *hi { g[k] } else { 0.0 }));
            }
            Op::Prelu(x, slope) => {
                let (dx, ds) = (val(*x), val(*slope));
                let shape = &self.nodes[x.0].shape;
                let channels = ds.len();
                let inner: usize = shape.iter().skip(2).product();
                let chan = |k: usize| if channels == 1 { 0 } else { (k / inner) % channels };
                send(*x, map1(*x, &|k| if dx[k] >= 0.0 { g[k] } else { ds[chan(k)] * g[k] }));
                let mut gs = vec![0.0; channels];
                for k in 0..dx.len() {
                    if dx[k] < 0.0 {
                        gs[chan(k)] += g[k] * dx[k];
                    }
                }
                send(*slope, gs);
            }
            Op::Softmax(a) => {
                let k = node.shape[1];
                let mut ga = vec![0.0; out.len()];
                for ((gr, sr), dst) in g.chunks(k).zip(out.chunks(k)).zip(ga.chunks_mut(k)) {
                    let dot: f64 = gr.iter().zip(sr).map(|(x, y)| x * y).sum();
                    for j in 0..k {
                        dst[j] = sr[j] * (gr[j] - dot);
                    }
                }
                send(*a, ga);
            }
            Op::LogSoftmax(a) => {
                let k = node.shape[1];
                let mut ga = vec![0.0; out.len()];
                for ((gr, lr), dst) in g.chunks(k).zip(out.chunks(k)).zip(ga.chunks_mut(k)) {
                    let total: f64 = gr.iter().sum();
                    for j in 0..k {
                        dst[j] = gr[j] - lr[j].exp() * total;
                    }
                }
                send(*a, ga);
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                let (n, kk, m) = (sa[0], sa[1], sb[1]);
                let (da, db) = (val(*a), val(*b));
                if self.rg(*a) {
                    let mut ga = vec![0.0; n * kk];
                    for i in 0..n {
                        for p in 0..kk {
                            ga[i * kk + p] = (0..m).map(|j| g[i * m + j] * db[p * m + j]).sum();
                        }
                    }
                    send(*a, ga);
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; kk * m];
                    for i in 0..n {
                        for p in 0..kk {
                            let av = da[i * kk + p];
                            for j in 0..m {
                                gb[p * m + j] += av * g[i * m + j];
                            }
                        }
                    }
                    send(*b, gb);
                }
            }
            Op::Linear(x, w, b) => {
                let (n, din) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let dout = self.nodes[w.0].shape[0];
                let (dx, dw) = (val(*x), val(*w));
                if self.rg(*x) {
                    let mut gx = vec![0.0; n * din];
                    for i in 0..n {
                        let gxr = &mut gx[i * din..(i + 1) * din];
                        for j in 0..dout {
                            let gv = g[i * dout + j];
                            gxr.iter_mut().zip(&dw[j * din..(j + 1) * din]).for_each(|(a, wv)| *a += gv * wv);
                        }
                    }
                    send(*x, gx);
                }
                if self.rg(*w) {
                    let mut gw = vec![0.0; dout * din];
                    for i in 0..n {
                        let xr = &dx[i * din..(i + 1) * din];
                        for j in 0..dout {
                            let gv = g[i * dout + j];
                            gw[j * din..(j + 1) * din].iter_mut().zip(xr).for_each(|(a, xv)| *a += gv * xv);
                        }
                    }
                    send(*w, gw);
                }
                if let Some(b) = b {
                    let mut gb = vec![0.0; dout];
                    g.chunks(dout).for_each(|r| gb.iter_mut().zip(r).for_each(|(a, v)| *a += v));
                    send(*b, gb);
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                if self.rg(*x) {
                    send(*x, conv::correlate_adjoint(geom, g, val(*w)));
                }
                if self.rg(*w) {
                    send(*w, conv::correlate_kernel_grad(geom, g, val(*x)));
                }
                if let Some(b) = b {
                    send(*b, conv::channel_sums(g, geom.batch, geom.out_ch, geom.out_h * geom.out_w));
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                if self.rg(*x) {
                    send(*x, conv::correlate(geom, g, val(*w)));
                }
                if self.rg(*w) {
                    send(*w, conv::correlate_kernel_grad(geom, val(*x), g));
                }
                if let Some(b) = b {
                    send(*b, conv::channel_sums(g, geom.batch, geom.in_ch, geom.in_h * geom.in_w));
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, training } => {
                let shape = &self.nodes[x.0].shape;
                let (n, c) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let gd = val(*gamma);
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * inner;
                        for k in base..base + inner {
                            sum_g[ch] += g[k];
                            sum_gx[ch] += g[k] * xhat[k];
                        }
                    }
                }
                if self.rg(*x) {
                    let m = (n * inner) as f64;
                    let mut gx = vec![0.0; g.len()];
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * inner;
                            let scale = gd[ch] * inv_std[ch];
                            for k in base..base + inner {
                                gx[k] = if *training {
                                    scale * (g[k] - sum_g[ch] / m - xhat[k] * sum_gx[ch] / m)
                                } else {
                                    scale * g[k]
                                };
                            }
                        }
                    }
                    send(*x, gx);
                }
                send(*gamma, sum_gx);
                send(*beta, sum_g);
            }
            Op::Sum(a) => send(*a, vec![g[0]; val(*a).len()]),
            Op::SumRows(a) => {
                let len = val(*a).len();
                let stride = len / g.len().max(1);
                send(*a, (0..len).map(|k| g[k / stride]).collect());
            }
            Op::Gather(a, idx) => {
                let k = self.nodes[a.0].shape[1];
                let mut ga = vec![0.0; val(*a).len()];
                for (i, &j) in idx.iter().enumerate() {
                    ga[i * k + j] += g[i];
                }
                send(*a, ga);
            }
            Op::Concat(a, b) => {
                let (p, q) = (self.nodes[a.0].shape[1], self.nodes[b.0].shape[1]);
                let mut ga = Vec::with_capacity(val(*a).len());
                let mut gb = Vec::with_capacity(val(*b).len());
                for row in g.chunks(p + q) {
                    ga.extend_from_slice(&row[..p]);
                    gb.extend_from_slice(&row[p..]);
                }
                send(*a, ga);
                send(*b, gb);
            }
            Op::Reparam(mu, var, eps) => {
                let dv = val(*var);
                send(*mu, g.to_vec());
                send(
                    *var,
                    map1(*var, &|k| if dv[k] > 0.0 { g[k] * eps[k] * 0.5 / dv[k].sqrt() } else { 0.0 }),
                );
            }
        }
    }
}
