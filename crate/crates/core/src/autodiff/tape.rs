//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Every operation appends a node holding its forward value and enough
//! saved state to apply its backward rule. Nodes are only ever appended, so
//! the tape is always in topological order and [`Tape::backward`] is a single
//! reverse sweep.

use super::kernels::{col2im, gemm, im2col, ConvGeom};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel statistics of one training-mode batch-norm call.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as used for running estimates.
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Reshape(Var),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { x: Var, rows: usize, cols: usize },
    BatchMatMulNT { a: Var, b: Var, batch: usize, n: usize, m: usize, d: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    ScaleBy { x: Var, s: Var },
    ShiftBy { x: Var, s: Var },
    AddRowBias { x: Var, bias: Var },
    AddChannelBias { x: Var, bias: Var, channels: usize, spatial: usize },
    Relu(Var),
    Sqrt(Var),
    Square(Var),
    Recip(Var),
    Sum(Var),
    Mean(Var),
    L2NormalizeRows { x: Var, norms: Vec<f64>, dim: usize },
    PairwiseDistance { a: Var, b: Var, n: usize, m: usize, d: usize },
    RowDistance { a: Var, b: Var, n: usize, d: usize },
    Unfold { x: Var, batch: usize, frames: usize, dim: usize, context: usize },
    GatherRows { x: Var, idx: Vec<usize>, cols: usize },
    Conv2d { x: Var, w: Var, geom: ConvGeom, cols: Vec<f64> },
    BatchNormTrain { x: Var, gamma: Var, beta: Var, shape: BnShape, inv_std: Vec<f64>, xhat: Vec<f64> },
    BatchNormEval { x: Var, gamma: Var, beta: Var, shape: BnShape, mean: Vec<f64>, inv_std: Vec<f64> },
    Softmax { x: Var, cols: usize },
    CrossEntropy { logits: Var, targets: Vec<usize>, cols: usize, probs: Vec<f64> },
}

#[derive(Clone, Copy, Debug)]
struct BnShape {
    batch: usize,
    channels: usize,
    spatial: usize,
}

impl BnShape {
    fn of(shape: &[usize]) -> Result<Self> {
        if shape.len() < 2 {
            return Err(Error::Dimension(format!("batch norm needs [B, C, ...], got {shape:?}")));
        }
        Ok(Self { batch: shape[0], channels: shape[1], spatial: shape[2..].iter().product() })
    }

    fn index(&self, b: usize, c: usize, s: usize) -> usize {
        (b * self.channels + c) * self.spatial + s
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Raw gradient of `v`, or `None` if `v` is not on a path to the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v` as a tensor; zero when `v` does not reach the loss.
    pub fn tensor(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match self.get(v) {
            Some(g) => Tensor::new(shape.clone(), g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Records operations for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
    match &mut grads[v.0] {
        Some(g) => g.iter_mut().zip(contrib).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(contrib),
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
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::Dimension(format!("matmul inner dims {k} vs {k2}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), false, &mut out, 0.0);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        let src = self.data(x);
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = src[i * cols + j];
            }
        }
        let value = Tensor::new(vec![cols, rows], out)?;
        Ok(self.push(value, Op::Transpose { x, rows, cols }, &[x]))
    }

    /// Batched `a[b] * b[b]^T`: `[B, N, D] x [B, M, D] -> [B, N, M]`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (batch, n, d) = match self.shape(a) {
            &[bb, n, d] => (bb, n, d),
            s => return Err(Error::Dimension(format!("bmm_nt expects rank 3, got {s:?}"))),
        };
        let (m, d2) = match self.shape(b) {
            &[bb, m, d2] if bb == batch => (m, d2),
            s => return Err(Error::Dimension(format!("bmm_nt batch mismatch: {s:?}"))),
        };
        if d != d2 {
            return Err(Error::Dimension(format!("bmm_nt feature dims {d} vs {d2}")));
        }
        let mut out = vec![0.0; batch * n * m];
        let (ad, bd) = (self.data(a), self.data(b));
        for i in 0..batch {
            gemm(
                n,
                d,
                m,
                &ad[i * n * d..(i + 1) * n * d],
                false,
                &bd[i * m * d..(i + 1) * m * d],
                true,
                &mut out[i * n * m..(i + 1) * n * m],
                0.0,
            );
        }
        let value = Tensor::new(vec![batch, n, m], out)?;
        Ok(self.push(value, Op::BatchMatMulNT { a, b, batch, n, m, d }, &[a, b]))
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        same_shape(self.value(a), self.value(b), what)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(value, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.map(x, |v| -v, Op::Neg(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| v + c, Op::AddScalar(x))
    }

    fn scalar_of(&self, s: Var) -> Result<f64> {
        match self.data(s) {
            [v] => Ok(*v),
            d => Err(Error::Dimension(format!("expected a scalar, got {} values", d.len()))),
        }
    }

    /// Multiplies every element of `x` by the scalar node `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let c = self.scalar_of(s)?;
        let data = self.data(x).iter().map(|v| v * c).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(value, Op::ScaleBy { x, s }, &[x, s]))
    }

    /// Adds the scalar node `s` to every element of `x`.
    pub fn shift_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let c = self.scalar_of(s)?;
        let data = self.data(x).iter().map(|v| v + c).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(value, Op::ShiftBy { x, s }, &[x, s]))
    }

    /// `x[.., P] + bias[P]`, broadcast over all leading dimensions.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let p = self.value(bias).numel();
        let xs = self.shape(x);
        if xs.last() != Some(&p) {
            return Err(Error::Dimension(format!("row bias of {p} for shape {xs:?}")));
        }
        let bd = self.data(bias).to_vec();
        let mut data = self.data(x).to_vec();
        for row in data.chunks_mut(p) {
            row.iter_mut().zip(&bd).for_each(|(v, b)| *v += b);
        }
        let value = Tensor::new(xs.to_vec(), data)?;
        Ok(self.push(value, Op::AddRowBias { x, bias }, &[x, bias]))
    }

    /// `x[B, C, ...] + bias[C]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let bn = BnShape::of(self.shape(x))?;
        if self.value(bias).numel() != bn.channels {
            return Err(Error::Dimension("channel bias length".into()));
        }
        let bd = self.data(bias).to_vec();
        let mut data = self.data(x).to_vec();
        for (i, chunk) in data.chunks_mut(bn.spatial).enumerate() {
            let c = i % bn.channels;
            chunk.iter_mut().for_each(|v| *v += bd[c]);
        }
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let (channels, spatial) = (bn.channels, bn.spatial);
        Ok(self.push(value, Op::AddChannelBias { x, bias, channels, spatial }, &[x, bias]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.data(x).iter().any(|&v| v < 0.0) {
            return Err(Error::Numeric("sqrt of a negative value".into()));
        }
        Ok(self.map(x, f64::sqrt, Op::Sqrt(x)))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map(x, |v| v * v, Op::Square(x))
    }

    pub fn recip(&mut self, x: Var) -> Result<Var> {
        if self.data(x).iter().any(|&v| v == 0.0) {
            return Err(Error::Numeric("reciprocal of zero".into()));
        }
        Ok(self.map(x, |v| 1.0 / v, Op::Recip(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Scales every row (last dimension) of `x` to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let dim = *self.shape(x).last().ok_or_else(|| Error::Dimension("rank 0".into()))?;
        let mut data = self.data(x).to_vec();
        let mut norms = Vec::with_capacity(data.len() / dim.max(1));
        for row in data.chunks_mut(dim) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::Degenerate("cannot normalize a zero vector".into()));
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(value, Op::L2NormalizeRows { x, norms, dim }, &[x]))
    }

    /// Euclidean distances between every row of `a[N, D]` and every row of `b[M, D]`.
    pub fn pairwise_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, d) = self.value(a).dims2()?;
        let (m, d2) = self.value(b).dims2()?;
        if d != d2 {
            return Err(Error::Dimension(format!("pairwise distance dims {d} vs {d2}")));
        }
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] = ad[i * d..(i + 1) * d]
                    .iter()
                    .zip(&bd[j * d..(j + 1) * d])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(value, Op::PairwiseDistance { a, b, n, m, d }, &[a, b]))
    }

    /// Euclidean distance between matching rows of `a[N, D]` and `b[N, D]`.
    pub fn row_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "row distance")?;
        let (n, d) = self.value(a).dims2()?;
        let (ad, bd) = (self.data(a), self.data(b));
        let out = (0..n)
            .map(|i| {
                ad[i * d..(i + 1) * d]
                    .iter()
                    .zip(&bd[i * d..(i + 1) * d])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let value = Tensor::new(vec![n], out)?;
        Ok(self.push(value, Op::RowDistance { a, b, n, d }, &[a, b]))
    }

    /// Sliding temporal windows: `[B, T, R] -> [B * (T - c + 1), c * R]`,
    /// stride 1. A rank-2 input is treated as a batch of one.
    pub fn unfold_time(&mut self, x: Var, context: usize) -> Result<Var> {
        let (batch, frames, dim) = match self.shape(x) {
            &[t, r] => (1, t, r),
            &[b, t, r] => (b, t, r),
            s => return Err(Error::Dimension(format!("unfold expects [B, T, R], got {s:?}"))),
        };
        if context == 0 {
            return Err(Error::Argument("context must be at least 1".into()));
        }
        if frames < context {
            return Err(Error::InsufficientFrames { need: context, got: frames });
        }
        let n = frames - context + 1;
        let width = context * dim;
        let src = self.data(x);
        let mut out = Vec::with_capacity(batch * n * width);
        for b in 0..batch {
            for t in 0..n {
                let start = (b * frames + t) * dim;
                out.extend_from_slice(&src[start..start + width]);
            }
        }
        let value = Tensor::new(vec![batch * n, width], out)?;
        Ok(self.push(value, Op::Unfold { x, batch, frames, dim, context }, &[x]))
    }

    /// Selects rows of a matrix (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Argument(format!("row {bad} out of {rows}")));
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let value = Tensor::new(vec![idx.len(), cols], out)?;
        Ok(self.push(value, Op::GatherRows { x, idx: idx.to_vec(), cols }, &[x]))
    }

    /// Stride-1 convolution of `x[B, C_in, H, W]` (or `[C_in, H, W]`) with
    /// `w[C_out, C_in, kh, kw]` and symmetric zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, padding: usize) -> Result<Var> {
        let (batch, c_in, h, wd, unbatched) = match self.shape(x) {
            &[c, h, w] => (1, c, h, w, true),
            &[b, c, h, w] => (b, c, h, w, false),
            s => return Err(Error::Dimension(format!("conv2d input must be rank 3 or 4, got {s:?}"))),
        };
        let (c_out, kc, kh, kw) = match self.shape(w) {
            &[o, c, kh, kw] => (o, c, kh, kw),
            s => return Err(Error::Dimension(format!("conv2d kernel must be rank 4, got {s:?}"))),
        };
        if kc != c_in {
            return Err(Error::Dimension(format!("conv2d channels {c_in} vs kernel {kc}")));
        }
        if kh > h + 2 * padding || kw > wd + 2 * padding || kh == 0 || kw == 0 {
            return Err(Error::Dimension(format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding,
                wd + 2 * padding
            )));
        }
        let geom = ConvGeom { batch, c_in, h, w: wd, c_out, kh, kw, pad: padding };
        let cols = im2col(self.data(x), &geom);
        let (k, ncols) = (geom.patch(), geom.cols());
        let mut tmp = vec![0.0; c_out * ncols];
        gemm(c_out, k, ncols, self.data(w), false, &cols, false, &mut tmp, 0.0);
        let spatial = geom.out_h() * geom.out_w();
        let mut out = vec![0.0; batch * c_out * spatial];
        for o in 0..c_out {
            for b in 0..batch {
                let src = &tmp[o * ncols + b * spatial..o * ncols + (b + 1) * spatial];
                out[(b * c_out + o) * spatial..(b * c_out + o + 1) * spatial].copy_from_slice(src);
            }
        }
        let shape = if unbatched {
            vec![c_out, geom.out_h(), geom.out_w()]
        } else {
            vec![batch, c_out, geom.out_h(), geom.out_w()]
        };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Conv2d { x, w, geom, cols }, &[x, w]))
    }

    /// Training-mode batch normalisation over `x[B, C, ...]` using the batch
    /// statistics of each channel.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let shape = BnShape::of(self.shape(x))?;
        if shape.batch < 2 {
            return Err(Error::Argument("training-mode batch norm needs a batch of at least 2".into()));
        }
        self.check_affine(gamma, beta, shape.channels)?;
        let count = (shape.batch * shape.spatial) as f64;
        let xd = self.data(x);
        let (gd, bd) = (self.data(gamma), self.data(beta));
        let mut mean = vec![0.0; shape.channels];
        let mut var = vec![0.0; shape.channels];
        let mut inv_std = vec![0.0; shape.channels];
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for c in 0..shape.channels {
            let mut s = 0.0;
            for b in 0..shape.batch {
                for p in 0..shape.spatial {
                    s += xd[shape.index(b, c, p)];
                }
            }
            let mu = s / count;
            let mut ss = 0.0;
            for b in 0..shape.batch {
                for p in 0..shape.spatial {
                    let dv = xd[shape.index(b, c, p)] - mu;
                    ss += dv * dv;
                }
            }
            let biased = ss / count;
            let istd = 1.0 / (biased + eps).sqrt();
            for b in 0..shape.batch {
                for p in 0..shape.spatial {
                    let i = shape.index(b, c, p);
                    xhat[i] = (xd[i] - mu) * istd;
                    out[i] = gd[c] * xhat[i] + bd[c];
                }
            }
            mean[c] = mu;
            var[c] = ss / (count - 1.0);
            inv_std[c] = istd;
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let v = self.push(value, Op::BatchNormTrain { x, gamma, beta, shape, inv_std, xhat }, &[x, gamma, beta]);
        Ok((v, BatchStats { mean, var }))
    }

    /// Inference-mode batch normalisation with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let shape = BnShape::of(self.shape(x))?;
        self.check_affine(gamma, beta, shape.channels)?;
        if mean.len() != shape.channels || var.len() != shape.channels {
            return Err(Error::Dimension("running statistics length".into()));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (xd, gd, bd) = (self.data(x), self.data(gamma), self.data(beta));
        let mut out = vec![0.0; xd.len()];
        for b in 0..shape.batch {
            for c in 0..shape.channels {
                for p in 0..shape.spatial {
                    let i = shape.index(b, c, p);
                    out[i] = gd[c] * (xd[i] - mean[c]) * inv_std[c] + bd[c];
                }
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let op = Op::BatchNormEval { x, gamma, beta, shape, mean: mean.to_vec(), inv_std };
        Ok(self.push(value, op, &[x, gamma, beta]))
    }

    fn check_affine(&self, gamma: Var, beta: Var, channels: usize) -> Result<()> {
        if self.value(gamma).numel() != channels || self.value(beta).numel() != channels {
            return Err(Error::Dimension(format!("batch norm affine params must have {channels} entries")));
        }
        Ok(())
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let cols = *self.shape(x).last().ok_or_else(|| Error::Dimension("rank 0".into()))?;
        let mut data = self.data(x).to_vec();
        for row in data.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(value, Op::Softmax { x, cols }, &[x]))
    }

    /// Mean cross-entropy of row-wise softmax of `logits[R, K]` (or `[K]`)
    /// against one target class per row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let cols = *self.shape(logits).last().ok_or_else(|| Error::Dimension("rank 0".into()))?;
        let rows = self.value(logits).numel() / cols.max(1);
        if rows != targets.len() {
            return Err(Error::Dimension(format!("{rows} rows of logits, {} targets", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::Argument(format!("class {bad} out of range [0, {cols})")));
        }
        let mut probs = self.data(logits).to_vec();
        let mut loss = 0.0;
        for (row, &t) in probs.chunks_mut(cols).zip(targets) {
            let lse = log_sum_exp(row);
            loss += lse - row[t];
            softmax_in_place(row);
        }
        loss /= rows as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric("non-finite cross-entropy".into()));
        }
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), cols, probs };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Dimension("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Reshape(x) => accumulate(grads, *x, g.to_vec()),
            &Op::MatMul { a, b, m, k, n } => {
                if self.needs(a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, false, self.data(b), true, &mut da, 0.0);
                    accumulate(grads, a, da);
                }
                if self.needs(b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, self.data(a), true, g, false, &mut db, 0.0);
                    accumulate(grads, b, db);
                }
            }
            &Op::Transpose { x, rows, cols } => {
                let mut dx = vec![0.0; rows * cols];
                for i in 0..rows {
                    for j in 0..cols {
                        dx[i * cols + j] = g[j * rows + i];
                    }
                }
                accumulate(grads, x, dx);
            }
            &Op::BatchMatMulNT { a, b, batch, n, m, d } => {
                let (ad, bd) = (self.data(a), self.data(b));
                if self.needs(a) {
                    let mut da = vec![0.0; batch * n * d];
                    for i in 0..batch {
                        gemm(
                            n,
                            m,
                            d,
                            &g[i * n * m..(i + 1) * n * m],
                            false,
                            &bd[i * m * d..(i + 1) * m * d],
                            false,
                            &mut da[i * n * d..(i + 1) * n * d],
                            0.0,
                        );
                    }
                    accumulate(grads, a, da);
                }
                if self.needs(b) {
                    let mut db = vec![0.0; batch * m * d];
                    for i in 0..batch {
                        gemm(
                            m,
                            n,
                            d,
                            &g[i * n * m..(i + 1) * n * m],
                            true,
                            &ad[i * n * d..(i + 1) * n * d],
                            false,
                            &mut db[i * m * d..(i + 1) * m * d],
                            0.0,
                        );
                    }
                    accumulate(grads, b, db);
                }
            }
            &Op::Add(a, b) => {
                if self.needs(a) {
                    accumulate(grads, a, g.to_vec());
                }
                if self.needs(b) {
                    accumulate(grads, b, g.to_vec());
                }
            }
            &Op::Sub(a, b) => {
                if self.needs(a) {
                    accumulate(grads, a, g.to_vec());
                }
                if self.needs(b) {
                    accumulate(grads, b, g.iter().map(|v| -v).collect());
                }
            }
            &Op::Mul(a, b) => {
                if self.needs(a) {
                    accumulate(grads, a, g.iter().zip(self.data(b)).map(|(x, y)| x * y).collect());
                }
                if self.needs(b) {
                    accumulate(grads, b, g.iter().zip(self.data(a)).map(|(x, y)| x * y).collect());
                }
            }
            &Op::Neg(x) => accumulate(grads, x, g.iter().map(|v| -v).collect()),
            &Op::Scale(x, c) => accumulate(grads, x, g.iter().map(|v| v * c).collect()),
            &Op::AddScalar(x) => accumulate(grads, x, g.to_vec()),
            &Op::ScaleBy { x, s } => {
                let c = self.data(s)[0];
                if self.needs(x) {
                    accumulate(grads, x, g.iter().map(|v| v * c).collect());
                }
                if self.needs(s) {
                    let ds = g.iter().zip(self.data(x)).map(|(a, b)| a * b).sum();
                    accumulate(grads, s, vec![ds]);
                }
            }
            &Op::ShiftBy { x, s } => {
                if self.needs(x) {
                    accumulate(grads, x, g.to_vec());
                }
                if self.needs(s) {
                    accumulate(grads, s, vec![g.iter().sum()]);
                }
            }
            &Op::AddRowBias { x, bias } => {
                if self.needs(x) {
                    accumulate(grads, x, g.to_vec());
                }
                if self.needs(bias) {
                    let p = self.value(bias).numel();
                    let mut db = vec![0.0; p];
                    for row in g.chunks(p) {
                        db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    accumulate(grads, bias, db);
                }
            }
            &Op::AddChannelBias { x, bias, channels, spatial } => {
                if self.needs(x) {
                    accumulate(grads, x, g.to_vec());
                }
                if self.needs(bias) {
                    let mut db = vec![0.0; channels];
                    for (i, chunk) in g.chunks(spatial).enumerate() {
                        db[i % channels] += chunk.iter().sum::<f64>();
                    }
                    accumulate(grads, bias, db);
                }
            }
            &Op::Relu(x) => {
                accumulate(grads, x, g.iter().zip(out).map(|(d, &y)| if y > 0.0 { *d } else { 0.0 }).collect())
            }
            &Op::Sqrt(x) => {
                accumulate(grads, x, g.iter().zip(out).map(|(d, &y)| if y > 0.0 { d * 0.5 / y } else { 0.0 }).collect())
            }
            &Op::Square(x) => accumulate(grads, x, g.iter().zip(self.data(x)).map(|(d, v)| 2.0 * v * d).collect()),
            &Op::Recip(x) => accumulate(grads, x, g.iter().zip(out).map(|(d, y)| -d * y * y).collect()),
            &Op::Sum(x) => accumulate(grads, x, vec![g[0]; self.value(x).numel()]),
            &Op::Mean(x) => {
                let n = self.value(x).numel();
                accumulate(grads, x, vec![g[0] / n as f64; n]);
            }
            Op::L2NormalizeRows { x, norms, dim } => {
                let mut dx = vec![0.0; g.len()];
                for (r, &nrm) in norms.iter().enumerate() {
                    let y = &out[r * dim..(r + 1) * dim];
                    let gy = &g[r * dim..(r + 1) * dim];
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for k in 0..*dim {
                        dx[r * dim + k] = (gy[k] - y[k] * dot) / nrm;
                    }
                }
                accumulate(grads, *x, dx);
            }
            &Op::PairwiseDistance { a, b, n, m, d } => {
                let (ad, bd) = (self.data(a), self.data(b));
                let mut da = vec![0.0; n * d];
                let mut db = vec![0.0; m * d];
                for i in 0..n {
                    for j in 0..m {
                        let dist = out[i * m + j];
                        if dist == 0.0 {
                            continue;
                        }
                        let c = g[i * m + j] / dist;
                        for k in 0..d {
                            let diff = (ad[i * d + k] - bd[j * d + k]) * c;
                            da[i * d + k] += diff;
                            db[j * d + k] -= diff;
                        }
                    }
                }
                if self.needs(a) {
                    accumulate(grads, a, da);
                }
                if self.needs(b) {
                    accumulate(grads, b, db);
                }
            }
            &Op::RowDistance { a, b, n, d } => {
                let (ad, bd) = (self.data(a), self.data(b));
                let mut da = vec![0.0; n * d];
                for i in 0..n {
                    if out[i] == 0.0 {
                        continue;
                    }
                    let c = g[i] / out[i];
                    for k in 0..d {
                        da[i * d + k] = (ad[i * d + k] - bd[i * d + k]) * c;
                    }
                }
                if self.needs(b) {
                    accumulate(grads, b, da.iter().map(|v| -v).collect());
                }
                if self.needs(a) {
                    accumulate(grads, a, da);
                }
            }
            &Op::Unfold { x, batch, frames, dim, context } => {
                let n = frames - context + 1;
                let width = context * dim;
                let mut dx = vec![0.0; batch * frames * dim];
                for b in 0..batch {
                    for t in 0..n {
                        let src = &g[(b * n + t) * width..(b * n + t + 1) * width];
                        let start = (b * frames + t) * dim;
                        dx[start..start + width].iter_mut().zip(src).for_each(|(a, v)| *a += v);
                    }
                }
                accumulate(grads, x, dx);
            }
            Op::GatherRows { x, idx, cols } => {
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (r, &i) in idx.iter().enumerate() {
                    dx[i * cols..(i + 1) * cols]
                        .iter_mut()
                        .zip(&g[r * cols..(r + 1) * cols])
                        .for_each(|(a, v)| *a += v);
                }
                accumulate(grads, *x, dx);
            }
            Op::Conv2d { x, w, geom, cols } => {
                let (k, ncols) = (geom.patch(), geom.cols());
                let spatial = geom.out_h() * geom.out_w();
                let mut gt = vec![0.0; geom.c_out * ncols];
                for o in 0..geom.c_out {
                    for b in 0..geom.batch {
                        let src = &g[(b * geom.c_out + o) * spatial..(b * geom.c_out + o + 1) * spatial];
                        gt[o * ncols + b * spatial..o * ncols + (b + 1) * spatial].copy_from_slice(src);
                    }
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; geom.c_out * k];
                    gemm(geom.c_out, ncols, k, &gt, false, cols, true, &mut dw, 0.0);
                    accumulate(grads, *w, dw);
                }
                if self.needs(*x) {
                    let mut dcols = vec![0.0; k * ncols];
                    gemm(k, geom.c_out, ncols, self.data(*w), true, &gt, false, &mut dcols, 0.0);
                    let mut dx = vec![0.0; self.value(*x).numel()];
                    col2im(&dcols, geom, &mut dx);
                    accumulate(grads, *x, dx);
                }
            }
            Op::BatchNormTrain { x, gamma, beta, shape, inv_std, xhat } => {
                let gd = self.data(*gamma);
                let count = (shape.batch * shape.spatial) as f64;
                let mut dgamma = vec![0.0; shape.channels];
                let mut dbeta = vec![0.0; shape.channels];
                for b in 0..shape.batch {
                    for c in 0..shape.channels {
                        for p in 0..shape.spatial {
                            let i = shape.index(b, c, p);
                            dgamma[c] += g[i] * xhat[i];
                            dbeta[c] += g[i];
                        }
                    }
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for b in 0..shape.batch {
                        for c in 0..shape.channels {
                            let scale = gd[c] * inv_std[c] / count;
                            for p in 0..shape.spatial {
                                let i = shape.index(b, c, p);
                                dx[i] = scale * (count * g[i] - dbeta[c] - xhat[i] * dgamma[c]);
                            }
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                if self.needs(*gamma) {
                    accumulate(grads, *gamma, dgamma);
                }
                if self.needs(*beta) {
                    accumulate(grads, *beta, dbeta);
                }
            }
            Op::BatchNormEval { x, gamma, beta, shape, mean, inv_std } => {
                let (xd, gd) = (self.data(*x), self.data(*gamma));
                let mut dx = vec![0.0; g.len()];
                let mut dgamma = vec![0.0; shape.channels];
                let mut dbeta = vec![0.0; shape.channels];
                for b in 0..shape.batch {
                    for c in 0..shape.channels {
                        for p in 0..shape.spatial {
                            let i = shape.index(b, c, p);
                            dx[i] = g[i] * gd[c] * inv_std[c];
                            dgamma[c] += g[i] * (xd[i] - mean[c]) * inv_std[c];
                            dbeta[c] += g[i];
                        }
                    }
                }
                if self.needs(*x) {
                    accumulate(grads, *x, dx);
                }
                if self.needs(*gamma) {
                    accumulate(grads, *gamma, dgamma);
                }
                if self.needs(*beta) {
                    accumulate(grads, *beta, dbeta);
                }
            }
            &Op::Softmax { x, cols } => {
                let mut dx = vec![0.0; g.len()];
                for ((dr, yr), gr) in dx.chunks_mut(cols).zip(out.chunks(cols)).zip(g.chunks(cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for k in 0..cols {
                        dr[k] = yr[k] * (gr[k] - dot);
                    }
                }
                accumulate(grads, x, dx);
            }
            Op::CrossEntropy { logits, targets, cols, probs } => {
                let scale = g[0] / targets.len() as f64;
                let mut dx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    dx[r * cols + t] -= scale;
                }
                accumulate(grads, *logits, dx);
            }
        }
    }
}

/// Numerically stable `ln(sum(exp(x)))`.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    x.iter_mut().for_each(|v| *v /= total);
}

/// Softmax of a plain slice.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let mut out = x.to_vec();
    softmax_in_place(&mut out);
    out
}
