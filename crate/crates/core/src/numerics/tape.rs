use std::collections::BTreeMap;
use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};
use crate::kanhash::SplineGrid;

const BN_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Sigmoid,
    Tanh,
    Log,
    Exp,
    Abs,
}

/// How a normalization node obtains its statistics.
#[derive(Clone, Debug)]
pub enum NormMode {
    /// Per-batch statistics; the node records them for running-stat updates.
    Batch,
    /// Fixed statistics (inference, or a frozen layer).
    Running { mean: Vec<f64>, var: Vec<f64> },
}

enum Op {
    Const,
    Param(String),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Unary(Var, Unary),
    Clamp(Var, f64, f64),
    SignSte(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    MatMulNt(Var, Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    GlobalMaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Crop {
        x: Var,
        y0: usize,
        x0: usize,
    },
    Rows {
        x: Var,
        start: usize,
    },
    Norm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch: bool,
        stats: Option<(Vec<f64>, Vec<f64>)>,
    },
    Kan {
        x: Var,
        coeffs: Var,
        basis: Vec<f64>,
        dbasis: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Const => "const",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::Unary(_, u) => match u {
                Unary::Relu => "relu",
                Unary::Sigmoid => "sigmoid",
                Unary::Tanh => "tanh",
                Unary::Log => "log",
                Unary::Exp => "exp",
                Unary::Abs => "abs",
            },
            Op::Clamp(..) => "clamp",
            Op::SignSte(_) => "sign_ste",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::RowSum(_) => "row_sum",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Reshape(_) => "reshape",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2d { .. } => "maxpool2d",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::GlobalMaxPool { .. } => "global_max_pool",
            Op::Crop { .. } => "crop",
            Op::Rows { .. } => "rows",
            Op::Norm { .. } => "batch_stats_norm",
            Op::Kan { .. } => "kan",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients keyed by parameter name.
pub type Gradients = BTreeMap<String, Tensor>;

/// Records a forward computation over a fixed op set and differentiates it in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return shape_err(format!("cannot broadcast {a:?} with {b:?}"));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => shape_err(format!("cannot broadcast {a:?} with {b:?}")),
        })
        .collect()
}

/// For each flat output index, the flat index into an operand of shape `src`.
fn broadcast_map(out: &[usize], src: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        strides[d] = if src[d] == 1 { 0 } else { acc };
        acc *= src[d];
    }
    let numel: usize = out.iter().product();
    let mut idx = vec![0usize; rank];
    let mut map = Vec::with_capacity(numel);
    let mut cur = 0usize;
    for _ in 0..numel {
        map.push(cur);
        for d in (0..rank).rev() {
            idx[d] += 1;
            cur += strides[d];
            if idx[d] < out[d] {
                break;
            }
            cur -= strides[d] * out[d];
            idx[d] = 0;
        }
    }
    map
}

fn accumulate(slot: &mut Option<Tensor>, shape: &[usize], delta: Vec<f64>) {
    match slot {
        Some(t) => t
            .data_mut()
            .iter_mut()
            .zip(delta)
            .for_each(|(a, d)| *a += d),
        None => *slot = Some(Tensor::new(shape.to_vec(), delta).expect("gradient shape")),
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = match &op {
            Op::Param(_) => true,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Const, &[])
    }

    pub fn param(&mut self, name: &str, value: Tensor) -> Var {
        self.push(value, Op::Param(name.to_string()), &[])
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, Vec<usize>)> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(ta.shape(), tb.shape())?;
        let data = if ta.shape() == tb.shape() {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = broadcast_map(&shape, ta.shape());
            let mb = broadcast_map(&shape, tb.shape());
            ma.iter()
                .zip(&mb)
                .map(|(&i, &j)| f(ta.data()[i], tb.data()[j]))
                .collect()
        };
        Ok((Tensor::new(shape.clone(), data)?, shape))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary(a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary(a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary(a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let t = self.value(a).map(|x| x * k);
        self.push(t, Op::Scale(a, k), &[a])
    }

    pub fn shift(&mut self, a: Var, k: f64) -> Var {
        let t = self.value(a).map(|x| x + k);
        self.push(t, Op::Shift(a), &[a])
    }

    pub fn unary(&mut self, a: Var, u: Unary) -> Var {
        let f: fn(f64) -> f64 = match u {
            Unary::Relu => |x| x.max(0.0),
            Unary::Sigmoid => |x| 1.0 / (1.0 + (-x).exp()),
            Unary::Tanh => f64::tanh,
            Unary::Log => f64::ln,
            Unary::Exp => f64::exp,
            Unary::Abs => f64::abs,
        };
        let t = self.value(a).map(f);
        self.push(t, Op::Unary(a, u), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Abs)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let t = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(t, Op::Clamp(a, lo, hi), &[a])
    }

    /// Sign with `sign(0) = +1`; the backward pass is the identity.
    pub fn sign_ste(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| if x >= 0.0 { 1.0 } else { -1.0 });
        self.push(t, Op::SignSte(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        self.push(t, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let t = Tensor::scalar(v.sum() / v.numel() as f64);
        self.push(t, Op::Mean(a), &[a])
    }

    /// Sum over the last axis of a rank-2 tensor: `[N, D] -> [N]`.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.rank() != 2 {
            return shape_err(format!("row_sum expects rank 2, got {:?}", v.shape()));
        }
        let d = v.shape()[1];
        let data: Vec<f64> = v.data().chunks(d).map(|r| r.iter().sum()).collect();
        let t = Tensor::from_vec(data);
        Ok(self.push(t, Op::RowSum(a), &[a]))
    }

    /// `a · bᵀ` for `a: [M, K]`, `b: [N, K]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[1] {
            return shape_err(format!(
                "matmul_nt mismatch {:?} x {:?}ᵀ",
                ta.shape(),
                tb.shape()
            ));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ra = &ta.data()[i * k..(i + 1) * k];
            for j in 0..n {
                let rb = &tb.data()[j * k..(j + 1) * k];
                out[i * n + j] = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMulNt(a, b), &[a, b]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    /// Fully connected layer: `x: [N, in]`, `w: [out, in]`, `b: [out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul_nt(x, w)?;
        let out = self.shape(w)[0];
        if self.shape(b) != [out] {
            return shape_err(format!(
                "dense bias {:?} does not match weight {:?}",
                self.shape(b),
                self.shape(w)
            ));
        }
        let b2 = self.reshape(b, &[1, out])?;
        self.add(y, b2)
    }

    /// 2-D convolution, NCHW input and OIHW kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.rank() != 4 || tw.rank() != 4 || tx.shape()[1] != tw.shape()[1] {
            return shape_err(format!(
                "conv2d input {:?} incompatible with kernel {:?}",
                tx.shape(),
                tw.shape()
            ));
        }
        if stride == 0 {
            return shape_err("conv2d stride must be positive");
        }
        let s = tx.shape();
        let k = tw.shape();
        if s[2] + 2 * pad < k[2] || s[3] + 2 * pad < k[3] {
            return shape_err(format!("conv2d kernel {k:?} larger than padded input {s:?}"));
        }
        let geom = ConvGeom {
            n: s[0],
            c: s[1],
            h: s[2],
            w: s[3],
            o: k[0],
            kh: k[2],
            kw: k[3],
            stride,
            pad,
        };
        let bias = match b {
            Some(bv) => {
                if self.shape(bv) != [geom.o] {
                    return shape_err(format!(
                        "conv2d bias {:?} does not match kernel {k:?}",
                        self.shape(bv)
                    ));
                }
                Some(self.value(bv).data())
            }
            None => None,
        };
        let out = kernels::conv2d_forward(&geom, tx.data(), tw.data(), bias);
        let t = Tensor::new(vec![geom.n, geom.o, geom.out_h(), geom.out_w()], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }, &inputs))
    }

    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 || s[2] < k || s[3] < k {
            return shape_err(format!("maxpool2d window {k} does not fit {s:?}"));
        }
        let (out, argmax) = kernels::maxpool2d_forward(self.value(x).data(), (s[0], s[1], s[2], s[3]), k, stride);
        let t = Tensor::new(vec![s[0], s[1], (s[2] - k) / stride + 1, (s[3] - k) / stride + 1], out)?;
        Ok(self.push(t, Op::MaxPool2d { x, argmax }, &[x]))
    }

    fn check_nchw(&self, x: Var, op: &str) -> Result<[usize; 4]> {
        let s = self.shape(x);
        if s.len() != 4 {
            return shape_err(format!("{op} expects NCHW, got {s:?}"));
        }
        Ok([s[0], s[1], s[2], s[3]])
    }

    /// Mean over the full spatial extent: `[N, C, H, W] -> [N, C, 1, 1]`.
    ///
    /// Values are summed in sorted order, so any spatial permutation of the input
    /// pools to the bitwise-identical result.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.check_nchw(x, "global_avg_pool")?;
        let hw = h * w;
        let mut scratch = vec![0.0; hw];
        let data: Vec<f64> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| {
                scratch.copy_from_slice(p);
                scratch.sort_unstable_by(f64::total_cmp);
                scratch.iter().sum::<f64>() / hw as f64
            })
            .collect();
        let t = Tensor::new(vec![n, c, 1, 1], data)?;
        Ok(self.push(t, Op::GlobalAvgPool(x), &[x]))
    }

    /// Max over the full spatial extent; ties resolve to the first position in row-major order.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.check_nchw(x, "global_max_pool")?;
        let hw = h * w;
        let mut data = Vec::with_capacity(n * c);
        let mut argmax = Vec::with_capacity(n * c);
        for (p, plane) in self.value(x).data().chunks(hw).enumerate() {
            let mut best = 0;
            for (i, &v) in plane.iter().enumerate() {
                if v > plane[best] {
                    best = i;
                }
            }
            data.push(plane[best]);
            argmax.push(p * hw + best);
        }
        let t = Tensor::new(vec![n, c, 1, 1], data)?;
        Ok(self.push(t, Op::GlobalMaxPool { x, argmax }, &[x]))
    }

    /// Spatial window `[y0, y0+h) × [x0, x0+w)` of an NCHW tensor.
    pub fn crop(&mut self, x: Var, y0: usize, x0: usize, h: usize, w: usize) -> Result<Var> {
        let [n, c, hh, ww] = self.check_nchw(x, "crop")?;
        if h == 0 || w == 0 || y0 + h > hh || x0 + w > ww {
            return Err(Error::Domain(format!(
                "window rows {y0}..{} cols {x0}..{} outside {hh}x{ww} map",
                y0 + h,
                x0 + w
            )));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * c * h * w);
        for p in 0..n * c {
            for y in y0..y0 + h {
                let row = p * hh * ww + y * ww;
                data.extend_from_slice(&src[row + x0..row + x0 + w]);
            }
        }
        let t = Tensor::new(vec![n, c, h, w], data)?;
        Ok(self.push(t, Op::Crop { x, y0, x0 }, &[x]))
    }

    /// Leading-axis slice `x[start..end]` of a tensor of any rank ≥ 1.
    pub fn rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() == 0 || start >= end || end > t.shape()[0] {
            return shape_err(format!("row range {start}..{end} invalid for {:?}", t.shape()));
        }
        let out = t.slice0(start, end)?;
        Ok(self.push(out, Op::Rows { x, start }, &[x]))
    }

    /// Per-channel normalization of `[N, C]` or `[N, C, H, W]` with optional affine terms.
    pub fn batch_norm(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>, mode: NormMode) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.shape().to_vec();
        if s.len() != 2 && s.len() != 4 {
            return shape_err(format!("batch_stats_norm expects [N,C] or NCHW, got {s:?}"));
        }
        let (n, c) = (s[0], s[1]);
        let hw: usize = s[2..].iter().product();
        for p in [gamma, beta].into_iter().flatten() {
            if self.shape(p) != [c] {
                return shape_err(format!(
                    "norm affine {:?} does not match {c} channels",
                    self.shape(p)
                ));
            }
        }
        let tx = self.value(x);
        let m = (n * hw) as f64;
        let (mean, var, batch) = match &mode {
            NormMode::Batch => {
                if n * hw < 2 {
                    return shape_err(format!("batch statistics need ≥2 values per channel, got {s:?}"));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let p = &tx.data()[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                        mean[ci] += p.iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m);
                for ni in 0..n {
                    for ci in 0..c {
                        let p = &tx.data()[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                        var[ci] += p.iter().map(|v| (v - mean[ci]).powi(2)).sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= m);
                (mean, var, true)
            }
            NormMode::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return shape_err(format!("running stats of length {} for {c} channels", mean.len()));
                }
                (mean.clone(), var.clone(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = Vec::with_capacity(tx.numel());
        for ni in 0..n {
            for ci in 0..c {
                let p = &tx.data()[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                xhat.extend(p.iter().map(|v| (v - mean[ci]) * inv_std[ci]));
            }
        }
        let g = gamma.map(|v| self.value(v).data().to_vec());
        let b = beta.map(|v| self.value(v).data().to_vec());
        let mut out = xhat.clone();
        for (i, o) in out.iter_mut().enumerate() {
            let ci = (i / hw) % c;
            if let Some(g) = &g {
                *o *= g[ci];
            }
            if let Some(b) = &b {
                *o += b[ci];
            }
        }
        let t = Tensor::new(s, out)?;
        let stats = batch.then(|| {
            let unbiased = m / (m - 1.0);
            (mean, var.iter().map(|v| v * unbiased).collect())
        });
        let mut inputs = vec![x];
        inputs.extend(gamma);
        inputs.extend(beta);
        Ok(self.push(
            t,
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch,
                stats,
            },
            &inputs,
        ))
    }

    /// Batch statistics (mean, unbiased variance) recorded by a batch-mode norm node.
    pub fn norm_stats(&self, v: Var) -> Option<(&[f64], &[f64])> {
        match &self.nodes[v.0].op {
            Op::Norm {
                stats: Some((m, s)),
                ..
            } => Some((m, s)),
            _ => None,
        }
    }

    /// Spline sum `out[n][o] = Σ_i Σ_j coeffs[o][i][j] · B_j(x[n][i])` (no squashing).
    pub fn kan(&mut self, x: Var, coeffs: Var, grid: &Arc<SplineGrid>) -> Result<Var> {
        let (tx, tc) = (self.value(x), self.value(coeffs));
        let nb = grid.num_basis();
        if tx.rank() != 2 || tc.rank() != 3 || tc.shape()[1] != tx.shape()[1] || tc.shape()[2] != nb {
            return shape_err(format!(
                "kan input {:?} incompatible with coefficients {:?} ({nb} basis functions)",
                tx.shape(),
                tc.shape()
            ));
        }
        let (n, din, dout) = (tx.shape()[0], tx.shape()[1], tc.shape()[0]);
        let mut basis = vec![0.0; n * din * nb];
        let mut dbasis = vec![0.0; n * din * nb];
        for (k, &xv) in tx.data().iter().enumerate() {
            grid.eval_into(xv, &mut basis[k * nb..(k + 1) * nb], &mut dbasis[k * nb..(k + 1) * nb]);
        }
        let cd = tc.data();
        let mut out = vec![0.0; n * dout];
        for ni in 0..n {
            for o in 0..dout {
                let mut acc = 0.0;
                for i in 0..din {
                    let b = &basis[(ni * din + i) * nb..(ni * din + i + 1) * nb];
                    let c = &cd[(o * din + i) * nb..(o * din + i + 1) * nb];
                    acc += b.iter().zip(c).map(|(p, q)| p * q).sum::<f64>();
                }
                out[ni * dout + o] = acc;
            }
        }
        let t = Tensor::new(vec![n, dout], out)?;
        Ok(self.push(t, Op::Kan { x, coeffs, basis, dbasis }, &[x, coeffs]))
    }

    /// Mean softmax cross-entropy of `[N, C]` logits against class ids.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tz = self.value(logits);
        if tz.rank() != 2 || tz.shape()[0] != labels.len() {
            return shape_err(format!(
                "cross_entropy logits {:?} vs {} labels",
                tz.shape(),
                labels.len()
            ));
        }
        let c = tz.shape()[1];
        if c < 2 {
            return shape_err("cross_entropy needs at least two classes");
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Domain(format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = Vec::with_capacity(tz.numel());
        let mut loss = 0.0;
        for (row, &label) in tz.data().chunks(c).zip(labels) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|z| (z - mx).exp()).sum::<f64>().ln();
            loss += lse - row[label];
            probs.extend(row.iter().map(|z| (z - lse).exp()));
        }
        let t = Tensor::scalar(loss / labels.len() as f64);
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Name of the first op whose output holds a non-finite value.
    pub fn first_nonfinite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .map(|(i, n)| (i, n.op.name()))
    }

    /// Reverse pass from a scalar root. Returns gradients for every parameter leaf
    /// that the root depends on; leaves registered twice under one name are summed.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return shape_err(format!("backward root must be scalar, got {:?}", rv.shape()));
        }
        if !rv.is_finite() {
            let (idx, name) = self.first_nonfinite().unwrap_or((root.0, "root"));
            return Err(Error::Numeric(format!(
                "non-finite loss; first offending op is `{name}` (node {idx})"
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::new(rv.shape().to_vec(), vec![1.0])?);
        let mut out = Gradients::new();

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let gd = g.data();
            let needs = |v: Var| self.nodes[v.0].needs_grad;
            let shape_of = |v: Var| self.nodes[v.0].value.shape().to_vec();
            match &node.op {
                Op::Const => {}
                Op::Param(name) => match out.get_mut(name) {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(gd)
                        .for_each(|(a, d)| *a += d),
                    None => {
                        out.insert(name.clone(), g.clone());
                    }
                },
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    for (v, s) in [(*a, 1.0), (*b, sign)] {
                        if needs(v) {
                            let delta = reduce_broadcast(gd, node.value.shape(), self.value(v).shape(), |_, x| s * x);
                            accumulate(&mut grads[v.0], &shape_of(v), delta);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    for (v, other) in [(*a, *b), (*b, *a)] {
                        if needs(v) {
                            let ov = self.value(other);
                            let om = broadcast_map(node.value.shape(), ov.shape());
                            let od = ov.data();
                            let delta = reduce_broadcast(gd, node.value.shape(), self.value(v).shape(), |k, x| x * od[om[k]]);
                            accumulate(&mut grads[v.0], &shape_of(v), delta);
                        }
                    }
                }
                Op::Scale(a, k) => {
                    accumulate(&mut grads[a.0], &shape_of(*a), gd.iter().map(|x| x * k).collect());
                }
                Op::Shift(a) | Op::SignSte(a) | Op::Reshape(a) => {
                    accumulate(&mut grads[a.0], &shape_of(*a), gd.to_vec());
                }
                Op::Unary(a, u) => {
                    let xs = self.value(*a).data();
                    let ys = node.value.data();
                    let delta = gd
                        .iter()
                        .zip(xs.iter().zip(ys))
                        .map(|(g, (&x, &y))| {
                            g * match u {
                                Unary::Relu => {
                                    if x > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                Unary::Sigmoid => y * (1.0 - y),
                                Unary::Tanh => 1.0 - y * y,
                                Unary::Log => 1.0 / x,
                                Unary::Exp => y,
                                Unary::Abs => {
                                    if x > 0.0 {
                                        1.0
                                    } else if x < 0.0 {
                                        -1.0
                                    } else {
                                        0.0
                                    }
                                }
                            }
                        })
                        .collect();
                    accumulate(&mut grads[a.0], &shape_of(*a), delta);
                }
                Op::Clamp(a, lo, hi) => {
                    let xs = self.value(*a).data();
                    let delta = gd
                        .iter()
                        .zip(xs)
                        .map(|(g, &x)| if x >= *lo && x <= *hi { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads[a.0], &shape_of(*a), delta);
                }
                Op::Sum(a) => {
                    let n = self.value(*a).numel();
                    accumulate(&mut grads[a.0], &shape_of(*a), vec![gd[0]; n]);
                }
                Op::Mean(a) => {
                    let n = self.value(*a).numel();
                    accumulate(&mut grads[a.0], &shape_of(*a), vec![gd[0] / n as f64; n]);
                }
                Op::RowSum(a) => {
                    let s = shape_of(*a);
                    let d = s[1];
                    let delta = (0..s[0] * d).map(|k| gd[k / d]).collect();
                    accumulate(&mut grads[a.0], &s, delta);
                }
                Op::MatMulNt(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
                    if needs(*a) {
                        let mut ga = vec![0.0; m * k];
                        for i in 0..m {
                            for j in 0..n {
                                let gv = gd[i * n + j];
                                if gv == 0.0 {
                                    continue;
                                }
                                let rb = &tb.data()[j * k..(j + 1) * k];
                                for (dst, &bv) in ga[i * k..(i + 1) * k].iter_mut().zip(rb) {
                                    *dst += gv * bv;
                                }
                            }
                        }
                        accumulate(&mut grads[a.0], &[m, k], ga);
                    }
                    if needs(*b) {
                        let mut gb = vec![0.0; n * k];
                        for i in 0..m {
                            let ra = &ta.data()[i * k..(i + 1) * k];
                            for j in 0..n {
                                let gv = gd[i * n + j];
                                if gv == 0.0 {
                                    continue;
                                }
                                for (dst, &av) in gb[j * k..(j + 1) * k].iter_mut().zip(ra) {
                                    *dst += gv * av;
                                }
                            }
                        }
                        accumulate(&mut grads[b.0], &[n, k], gb);
                    }
                }
                Op::Conv2d { x, w, b, geom } => {
                    let (gx, gw, gb) = kernels::conv2d_backward(
                        geom,
                        self.value(*x).data(),
                        self.value(*w).data(),
                        gd,
                        needs(*x),
                    );
                    if needs(*x) {
                        accumulate(&mut grads[x.0], &shape_of(*x), gx);
                    }
                    if needs(*w) {
                        accumulate(&mut grads[w.0], &shape_of(*w), gw);
                    }
                    if let Some(b) = b {
                        if needs(*b) {
                            accumulate(&mut grads[b.0], &shape_of(*b), gb);
                        }
                    }
                }
                Op::MaxPool2d { x, argmax } | Op::GlobalMaxPool { x, argmax } => {
                    let mut delta = vec![0.0; self.value(*x).numel()];
                    for (&i, &gv) in argmax.iter().zip(gd) {
                        delta[i] += gv;
                    }
                    accumulate(&mut grads[x.0], &shape_of(*x), delta);
                }
                Op::GlobalAvgPool(x) => {
                    let s = shape_of(*x);
                    let hw = s[2] * s[3];
                    let delta = (0..self.value(*x).numel()).map(|k| gd[k / hw] / hw as f64).collect();
                    accumulate(&mut grads[x.0], &s, delta);
                }
                Op::Crop { x, y0, x0 } => {
                    let s = shape_of(*x);
                    let (hh, ww) = (s[2], s[3]);
                    let os = node.value.shape();
                    let (h, w) = (os[2], os[3]);
                    let mut delta = vec![0.0; self.value(*x).numel()];
                    for p in 0..s[0] * s[1] {
                        for y in 0..h {
                            let dst = p * hh * ww + (y0 + y) * ww + x0;
                            let src = (p * h + y) * w;
                            for (d, &gv) in delta[dst..dst + w].iter_mut().zip(&gd[src..src + w]) {
                                *d += gv;
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], &s, delta);
                }
                Op::Rows { x, start } => {
                    let s = shape_of(*x);
                    let row: usize = s[1..].iter().product();
                    let mut delta = vec![0.0; self.value(*x).numel()];
                    delta[start * row..start * row + gd.len()].copy_from_slice(gd);
                    accumulate(&mut grads[x.0], &s, delta);
                }
                Op::Norm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch,
                    ..
                } => {
                    let s = shape_of(*x);
                    let (n, c) = (s[0], s[1]);
                    let hw: usize = s[2..].iter().product();
                    let m = (n * hw) as f64;
                    let gam = gamma.map(|v| self.value(v).data().to_vec());
                    let mut sum_g = vec![0.0; c];
                    let mut sum_gx = vec![0.0; c];
                    for (k, (&gv, &xh)) in gd.iter().zip(xhat).enumerate() {
                        let ci = (k / hw) % c;
                        sum_g[ci] += gv;
                        sum_gx[ci] += gv * xh;
                    }
                    if let Some(gv) = gamma {
                        if needs(*gv) {
                            accumulate(&mut grads[gv.0], &[c], sum_gx.clone());
                        }
                    }
                    if let Some(bv) = beta {
                        if needs(*bv) {
                            accumulate(&mut grads[bv.0], &[c], sum_g.clone());
                        }
                    }
                    if needs(*x) {
                        let scale = |ci: usize| gam.as_ref().map_or(1.0, |g| g[ci]);
                        let delta = gd
                            .iter()
                            .zip(xhat)
                            .enumerate()
                            .map(|(k, (&gv, &xh))| {
                                let ci = (k / hw) % c;
                                let sc = scale(ci) * inv_std[ci];
                                if *batch {
                                    sc * (gv - sum_g[ci] / m - xh * sum_gx[ci] / m)
                                } else {
                                    sc * gv
                                }
                            })
                            .collect();
                        accumulate(&mut grads[x.0], &s, delta);
                    }
                }
                Op::Kan {
                    x,
                    coeffs,
                    basis,
                    dbasis,
                } => {
                    let tc = self.value(*coeffs);
                    let (dout, din, nb) = (tc.shape()[0], tc.shape()[1], tc.shape()[2]);
                    let n = node.value.shape()[0];
                    if needs(*coeffs) {
                        let mut gc = vec![0.0; tc.numel()];
                        for ni in 0..n {
                            for o in 0..dout {
                                let gv = gd[ni * dout + o];
                                for i in 0..din {
                                    let b = &basis[(ni * din + i) * nb..(ni * din + i + 1) * nb];
                                    let dst = &mut gc[(o * din + i) * nb..(o * din + i + 1) * nb];
                                    for (d, &bv) in dst.iter_mut().zip(b) {
                                        *d += gv * bv;
                                    }
                                }
                            }
                        }
                        accumulate(&mut grads[coeffs.0], &[dout, din, nb], gc);
                    }
                    if needs(*x) {
                        let cd = tc.data();
                        let mut gx = vec![0.0; n * din];
                        for ni in 0..n {
                            for i in 0..din {
                                let db = &dbasis[(ni * din + i) * nb..(ni * din + i + 1) * nb];
                                let mut acc = 0.0;
                                for o in 0..dout {
                                    let c = &cd[(o * din + i) * nb..(o * din + i + 1) * nb];
                                    acc += gd[ni * dout + o] * db.iter().zip(c).map(|(p, q)| p * q).sum::<f64>();
                                }
                                gx[ni * din + i] = acc;
                            }
                        }
                        accumulate(&mut grads[x.0], &[n, din], gx);
                    }
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let c = self.value(*logits).shape()[1];
                    let nrows = labels.len() as f64;
                    let mut delta: Vec<f64> = probs.iter().map(|p| p * gd[0] / nrows).collect();
                    for (r, &l) in labels.iter().enumerate() {
                        delta[r * c + l] -= gd[0] / nrows;
                    }
                    accumulate(&mut grads[logits.0], &shape_of(*logits), delta);
                }
            }
        }
        Ok(out)
    }
}

/// Sum `f(k, grad[k])` from the broadcast output shape back onto the operand shape.
fn reduce_broadcast(grad: &[f64], out_shape: &[usize], src_shape: &[usize], f: impl Fn(usize, f64) -> f64) -> Vec<f64> {
    let numel: usize = src_shape.iter().product();
    if out_shape == src_shape {
        return grad.iter().enumerate().map(|(k, &g)| f(k, g)).collect();
    }
    let map = broadcast_map(out_shape, src_shape);
    let mut delta = vec![0.0; numel];
    for (k, (&g, &i)) in grad.iter().zip(&map).enumerate() {
        delta[i] += f(k, g);
    }
    delta
}
