use std::collections::HashMap;

use super::kernels::{self, ConvGeom};
use super::params::conv_output_size;
use super::{ConvSpec, LinearSpec, ParamId, ParamStore, Tensor};
use crate::error::{dim_err, Error, Result};

/// Epsilon shared by every normalization.
pub const NORM_EPS: f32 = 1e-5;

/// Momentum of batch-norm running statistics.
const BN_MOMENTUM: f32 = 0.1;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f32),
    ScaleBy(usize, usize),
    Sum(usize),
    Mean(usize),
    Exp(usize),
    Log(usize),
    Sigmoid(usize),
    Tanh(usize),
    Softplus(usize),
    LeakyRelu(usize, f32),
    Abs(usize),
    Square(usize),
    Sqrt(usize),
    Reshape(usize),
    Concat(Vec<usize>),
    Narrow(usize, usize),
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Transpose(usize),
    AddRow(usize, usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    MeanAxis(usize, usize),
    Conv2d { input: usize, weight: usize, bias: usize, geom: ConvGeom },
    Upsample2x(usize),
    AvgPool2x(usize),
    Norm { x: usize, inv_std: Vec<f32>, groups: usize, per_group: usize, batch: usize, fixed: bool },
    Glu(usize),
    Gather(usize, Vec<usize>),
    ChannelScale(usize, usize),
    TileSpatial(usize),
    SpatialMax(usize, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of recorded operations.
///
/// A graph is built, consumed by one [`backward`](Graph::backward) call and
/// dropped. Parameters enter through [`param`](Graph::param); whether they
/// receive gradients is decided by the graph's trainable prefixes and the
/// store's frozen flags.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    trainable: Vec<String>,
    grads: Vec<Option<Vec<f32>>>,
    bn_updates: Vec<(ParamId, Tensor)>,
    training: bool,
}

impl Graph {
    /// Graph in which no parameter receives gradients.
    pub fn new() -> Self {
        Self::default()
    }

    /// Graph whose parameters under any of `prefixes` receive gradients.
    /// Batch normalization uses batch statistics in such a graph.
    pub fn with_trainable(prefixes: &[&str]) -> Self {
        Self {
            trainable: prefixes.iter().map(|s| s.to_string()).collect(),
            training: true,
            ..Self::default()
        }
    }

    /// Switches batch normalization between batch and running statistics.
    pub fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Input that receives a gradient.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let name = store.name(id);
        let trainable = !store.is_frozen(id)
            && !store.is_buffer(id)
            && self.trainable.iter().any(|p| name.starts_with(p.as_str()));
        let v = self.push(store.get(id).clone(), Op::Param, trainable);
        self.params.insert(id, v);
        v
    }

    /// Pending running-statistic updates collected from training-mode
    /// batch normalization.
    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut self.bn_updates)
    }

    // ---- elementwise -------------------------------------------------

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!(
                "{what}: shape mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f32, f32) -> f32, op: Op) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let value = self.value(a).zip_map(self.value(b), f)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a.0, b.0))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(&[x.0]);
        self.push(value, op, rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f32) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x.0))
    }

    pub fn mul_scalar(&mut self, x: Var, c: f32) -> Var {
        self.unary(x, |v| v * c, Op::MulScalar(x.0, c))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.mul_scalar(x, -1.0)
    }

    /// `c - x`.
    pub fn rsub_scalar(&mut self, c: f32, x: Var) -> Var {
        let n = self.neg(x);
        self.add_scalar(n, c)
    }

    /// Multiplies every element of `x` by the one-element `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(dim_err!("scale_by expects a scalar, got {:?}", self.shape(s)));
        }
        let c = self.value(s).item();
        let value = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x.0, s.0]);
        Ok(self.push(value, Op::ScaleBy(x.0, s.0), rg))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f32::exp, Op::Exp(x.0))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f32::ln, Op::Log(x.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x.0))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f32::tanh, Op::Tanh(x.0))
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x.0))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { slope * v }, Op::LeakyRelu(x.0, slope))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f32::abs, Op::Abs(x.0))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x.0))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, f32::sqrt, Op::Sqrt(x.0))
    }

    // ---- reductions & shape ------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum() as f32;
        let rg = self.rg(&[x.0]);
        self.push(Tensor::scalar(s), Op::Sum(x.0), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let s = self.value(x).mean() as f32;
        let rg = self.rg(&[x.0]);
        self.push(Tensor::scalar(s), Op::Mean(x.0), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x.0]);
        Ok(self.push(value, Op::Reshape(x.0), rg))
    }

    /// Concatenation along axis 0.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| dim_err!("concat of nothing"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &x in xs {
            let s = self.shape(x);
            if s[1..] != tail[..] {
                return Err(dim_err!("concat: trailing dims {:?} vs {:?}", &s[1..], tail));
            }
            lead += s[0];
            data.extend_from_slice(self.value(x).data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let ids: Vec<usize> = xs.iter().map(|v| v.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Concat(ids), rg))
    }

    /// Rows `start..start + len` along axis 0.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if len == 0 || start + len > s[0] {
            return Err(dim_err!("narrow {start}+{len} out of range for {s:?}"));
        }
        let per: usize = s[1..].iter().product();
        let data = self.value(x).data()[start * per..(start + len) * per].to_vec();
        let mut shape = s.clone();
        shape[0] = len;
        let rg = self.rg(&[x.0]);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Narrow(x.0, start), rg))
    }

    fn as_matrix(&self, x: Var, what: &str) -> Result<(usize, usize)> {
        match self.shape(x) {
            [r, c] => Ok((*r, *c)),
            s => Err(dim_err!("{what}: expected a matrix, got {s:?}")),
        }
    }

    /// `op(a) * op(b)` for matrices, with optional transposition of either.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = self.as_matrix(a, "matmul")?;
        let (br, bc) = self.as_matrix(b, "matmul")?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(dim_err!("matmul inner dims {k} vs {k2}"));
        }
        let mut out = vec![0.0f32; m * n];
        kernels::gemm(m, k, n, self.value(a).data(), ta, self.value(b).data(), tb, &mut out, 0.0);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a: a.0, b: b.0, ta, tb }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.as_matrix(x, "transpose")?;
        let src = self.value(x).data();
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(&[x.0]);
        Ok(self.push(Tensor::new(&[c, r], out)?, Op::Transpose(x.0), rg))
    }

    /// `x [R, K] + row [K]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (r, k) = self.as_matrix(x, "add_row")?;
        if self.value(row).numel() != k {
            return Err(dim_err!("add_row: row of {} for width {k}", self.value(row).numel()));
        }
        let b = self.value(row).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for chunk in out.chunks_mut(k) {
            for (o, &bv) in chunk.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        let rg = self.rg(&[x.0, row.0]);
        Ok(self.push(Tensor::new(&[r, k], out)?, Op::AddRow(x.0, row.0), rg))
    }

    pub fn linear(&mut self, store: &ParamStore, spec: &LinearSpec, x: Var) -> Result<Var> {
        let w = self.param(store, spec.weight);
        let b = self.param(store, spec.bias);
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, k) = self.as_matrix(x, "softmax")?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(k) {
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut z = 0.0f64;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v as f64;
            }
            let inv = (1.0 / z) as f32;
            row.iter_mut().for_each(|v| *v *= inv);
        }
        let rg = self.rg(&[x.0]);
        Ok(self.push(Tensor::new(&[r, k], out)?, Op::SoftmaxRows(x.0), rg))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, k) = self.as_matrix(x, "log_softmax")?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(k) {
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let z: f64 = row.iter().map(|&v| ((v - m) as f64).exp()).sum();
            let lse = m + z.ln() as f32;
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let rg = self.rg(&[x.0]);
        Ok(self.push(Tensor::new(&[r, k], out)?, Op::LogSoftmaxRows(x.0), rg))
    }

    /// Mean of a matrix along `axis` (0: over rows, giving `[K]`; 1: over
    /// columns, giving `[R]`).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (r, k) = self.as_matrix(x, "mean_axis")?;
        let src = self.value(x).data();
        let out: Vec<f32> = match axis {
            0 => (0..k)
                .map(|j| ((0..r).map(|i| src[i * k + j] as f64).sum::<f64>() / r as f64) as f32)
                .collect(),
            1 => src
                .chunks(k)
                .map(|row| (row.iter().map(|&v| v as f64).sum::<f64>() / k as f64) as f32)
                .collect(),
            _ => return Err(dim_err!("mean_axis: axis {axis} on a matrix")),
        };
        let n = out.len();
        let rg = self.rg(&[x.0]);
        Ok(self.push(Tensor::new(&[n], out)?, Op::MeanAxis(x.0, axis), rg))
    }

    /// Rows of `table [V, d]` selected by `indices`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (v, d) = self.as_matrix(table, "gather")?;
        if indices.is_empty() {
            return Err(dim_err!("gather with no indices"));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= v {
                return Err(Error::Encoding(format!("index {i} out of range for table of {v}")));
            }
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table.0]);
        Ok(self.push(
            Tensor::new(&[indices.len(), d], out)?,
            Op::Gather(table.0, indices.to_vec()),
            rg,
        ))
    }

    // ---- image ops ---------------------------------------------------

    fn as_chw(&self, x: Var, what: &str) -> Result<(usize, usize, usize)> {
        match self.shape(x) {
            [c, h, w] => Ok((*c, *h, *w)),
            s => Err(dim_err!("{what}: expected C x H x W, got {s:?}")),
        }
    }

    /// Raw convolution with explicit weight `[O, C, k, k]` and bias `[O]`.
    pub fn conv2d_raw(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let (c_in, h, w) = self.as_chw(input, "conv2d")?;
        let (c_out, wc, k) = match self.shape(weight) {
            [o, c, k1, k2] if k1 == k2 => (*o, *c, *k1),
            s => return Err(dim_err!("conv2d: bad weight shape {s:?}")),
        };
        if wc != c_in {
            return Err(dim_err!("conv2d: input has {c_in} channels, weights expect {wc}"));
        }
        if self.shape(bias) != [c_out] {
            return Err(dim_err!("conv2d: bias shape {:?} for {c_out} outputs", self.shape(bias)));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d: zero stride".into()));
        }
        let (h_out, w_out) = conv_output_size(h, w, k, stride, pad)?;
        let geom = ConvGeom {
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad,
            h_out,
            w_out,
        };
        let out = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            Some(self.value(bias).data()),
            &geom,
        );
        let rg = self.rg(&[input.0, weight.0, bias.0]);
        Ok(self.push(
            Tensor::new(&[c_out, h_out, w_out], out)?,
            Op::Conv2d {
                input: input.0,
                weight: weight.0,
                bias: bias.0,
                geom,
            },
            rg,
        ))
    }

    pub fn conv2d(&mut self, store: &ParamStore, spec: &ConvSpec, input: Var) -> Result<Var> {
        let c_in = self.as_chw(input, "conv2d")?.0;
        if c_in != spec.in_channels {
            return Err(dim_err!(
                "conv2d: input has {c_in} channels, spec expects {}",
                spec.in_channels
            ));
        }
        let w = self.param(store, spec.weight);
        let b = self.param(store, spec.bias);
        self.conv2d_raw(input, w, b, spec.stride, spec.padding)
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.as_chw(x, "upsample2x")?;
        let out = kernels::upsample2x(self.value(x).data(), c, h, w);
        let rg = self.rg(&[x.0]);
        Ok(self.push(Tensor::new(&[c, 2 * h, 2 * w], out)?, Op::Upsample2x(x.0), rg))
    }

    /// 2x2 average pooling with stride 2.
    pub fn avg_pool2x(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.as_chw(x, "avg_pool2x")?;
        if h % 2 != 0 || w % 2 != 0 || h < 2 || w < 2 {
            return Err(dim_err!("avg_pool2x needs even extents, got {h}x{w}"));
        }
        let out = kernels::avg_pool2x(self.value(x).data(), c, h, w);
        let rg = self.rg(&[x.0]);
        Ok(self.push(Tensor::new(&[c, h / 2, w / 2], out)?, Op::AvgPool2x(x.0), rg))
    }

    /// Per-channel normalization over the spatial extent, no affine terms.
    pub fn instance_norm(&mut self, x: Var, eps: f32) -> Result<Var> {
        let (c, h, w) = self.as_chw(x, "instance_norm")?;
        let per = h * w;
        let mut out = self.value(x).data().to_vec();
        let mut inv_std = Vec::with_capacity(c);
        for chunk in out.chunks_mut(per) {
            let (m, v) = kernels::moments(chunk);
            let inv = 1.0 / (v + eps as f64).sqrt();
            for o in chunk.iter_mut() {
                *o = ((*o as f64 - m) * inv) as f32;
            }
            inv_std.push(inv as f32);
        }
        let rg = self.rg(&[x.0]);
        Ok(self.push(
            Tensor::new(&[c, h, w], out)?,
            Op::Norm {
                x: x.0,
                inv_std,
                groups: c,
                per_group: per,
                batch: 1,
                fixed: false,
            },
            rg,
        ))
    }

    /// Batch normalization over a list of same-shaped `C x H x W` samples.
    ///
    /// In training graphs statistics come from the batch and running
    /// estimates are queued for [`take_buffer_updates`](Self::take_buffer_updates);
    /// otherwise the stored running statistics are applied.
    pub fn batch_norm(
        &mut self,
        store: &ParamStore,
        xs: &[Var],
        running_mean: ParamId,
        running_var: ParamId,
    ) -> Result<Vec<Var>> {
        let (c, h, w) = self.as_chw(xs[0], "batch_norm")?;
        for &x in xs {
            if self.shape(x) != [c, h, w] {
                return Err(dim_err!("batch_norm: mixed sample shapes"));
            }
        }
        if store.get(running_mean).numel() != c || store.get(running_var).numel() != c {
            return Err(dim_err!("batch_norm: running statistics sized for another width"));
        }
        let n = xs.len();
        let per = h * w;
        let stacked = self.concat(xs)?;
        let src = self.value(stacked).data();
        let mut out = src.to_vec();
        let mut inv_std = vec![0.0f32; c];
        let fixed = !self.training;
        let mut means = vec![0.0f32; c];
        let mut vars = vec![0.0f32; c];
        for ch in 0..c {
            let (m, v) = if fixed {
                (
                    store.get(running_mean).data()[ch] as f64,
                    store.get(running_var).data()[ch] as f64,
                )
            } else {
                let mut s = 0.0f64;
                let mut s2 = 0.0f64;
                for i in 0..n {
                    for &val in &src[(i * c + ch) * per..(i * c + ch + 1) * per] {
                        s += val as f64;
                        s2 += (val as f64) * (val as f64);
                    }
                }
                let cnt = (n * per) as f64;
                let m = s / cnt;
                (m, (s2 / cnt - m * m).max(0.0))
            };
            means[ch] = m as f32;
            vars[ch] = v as f32;
            let inv = 1.0 / (v + NORM_EPS as f64).sqrt();
            inv_std[ch] = inv as f32;
            for i in 0..n {
                for o in &mut out[(i * c + ch) * per..(i * c + ch + 1) * per] {
                    *o = ((*o as f64 - m) * inv) as f32;
                }
            }
        }
        if !fixed {
            let cnt = (n * per) as f32;
            let unbias = if cnt > 1.0 { cnt / (cnt - 1.0) } else { 1.0 };
            let rm = store.get(running_mean).data();
            let rv = store.get(running_var).data();
            let new_m: Vec<f32> = (0..c).map(|i| (1.0 - BN_MOMENTUM) * rm[i] + BN_MOMENTUM * means[i]).collect();
            let new_v: Vec<f32> = (0..c)
                .map(|i| (1.0 - BN_MOMENTUM) * rv[i] + BN_MOMENTUM * vars[i] * unbias)
                .collect();
            self.bn_updates.push((running_mean, Tensor::new(&[c], new_m)?));
            self.bn_updates.push((running_var, Tensor::new(&[c], new_v)?));
        }
        let rg = self.rg(&[stacked.0]);
        let normed = self.push(
            Tensor::new(&[n * c, h, w], out)?,
            Op::Norm {
                x: stacked.0,
                inv_std,
                groups: c,
                per_group: per,
                batch: n,
                fixed,
            },
            rg,
        );
        (0..n)
            .map(|i| self.narrow(normed, i * c, c))
            .collect::<Result<Vec<_>>>()
    }

    /// Gated linear unit over the channel axis: `a * sigmoid(b)`.
    pub fn glu(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || !s[0].is_multiple_of(2) {
            return Err(dim_err!("glu needs an even leading dimension, got {s:?}"));
        }
        let half = self.value(x).numel() / 2;
        let src = self.value(x).data();
        let out: Vec<f32> = (0..half).map(|i| src[i] * sigmoid(src[half + i])).collect();
        let mut shape = s;
        shape[0] /= 2;
        let rg = self.rg(&[x.0]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Glu(x.0), rg))
    }

    /// Multiplies channel `k` of `x [C, ...]` by `s[k]`.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let c = self.shape(x)[0];
        if self.value(s).numel() != c {
            return Err(dim_err!("channel_scale: {} scales for {c} channels", self.value(s).numel()));
        }
        let per = self.value(x).numel() / c;
        let scales = self.value(s).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for (k, chunk) in out.chunks_mut(per).enumerate() {
            chunk.iter_mut().for_each(|v| *v *= scales[k]);
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x.0, s.0]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::ChannelScale(x.0, s.0), rg))
    }

    /// Broadcasts a vector `[d]` to `[d, h, w]`.
    pub fn tile_spatial(&mut self, v: Var, h: usize, w: usize) -> Result<Var> {
        let d = self.value(v).numel();
        let src = self.value(v).data();
        let mut out = Vec::with_capacity(d * h * w);
        for &x in src {
            out.extend(std::iter::repeat_n(x, h * w));
        }
        let rg = self.rg(&[v.0]);
        Ok(self.push(Tensor::new(&[d, h, w], out)?, Op::TileSpatial(v.0), rg))
    }

    // ---- composites --------------------------------------------------

    /// Cosine similarity of two same-sized tensors, as a one-element var.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let a = self.reshape_flat(a)?;
        let b = self.reshape_flat(b)?;
        let ab = self.mul(a, b)?;
        let dot = self.sum(ab);
        let aa = self.square(a);
        let na = self.sum(aa);
        let bb = self.square(b);
        let nb = self.sum(bb);
        let prod = self.mul(na, nb)?;
        let denom = self.sqrt(prod);
        if self.value(denom).item() == 0.0 {
            return Err(Error::Numeric("cosine of a zero-norm vector".into()));
        }
        self.div(dot, denom)
    }

    /// Per-channel spatial mean of `[C, H, W]`, giving `[C]`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.as_chw(x, "spatial_mean")?;
        let m = self.reshape(x, &[c, h * w])?;
        self.mean_axis(m, 1)
    }

    /// Per-channel spatial maximum of `[C, H, W]`, giving `[C]`.
    pub fn spatial_max(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.as_chw(x, "spatial_max")?;
        let xv = self.value(x).data();
        let per = h * w;
        let mut arg = Vec::with_capacity(c);
        let mut out = Vec::with_capacity(c);
        for k in 0..c {
            let row = &xv[k * per..(k + 1) * per];
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            arg.push(k * per + best);
            out.push(row[best]);
        }
        let rg = self.rg(&[x.0]);
        Ok(self.push(Tensor::new(&[c], out)?, Op::SpatialMax(x.0, arg), rg))
    }

    /// `times` nearest-neighbour 2x upsamplings.
    pub fn upsample_n(&mut self, x: Var, times: usize) -> Result<Var> {
        let mut y = x;
        for _ in 0..times {
            y = self.upsample2x(y)?;
        }
        Ok(y)
    }

    /// Scales a vector to unit Euclidean norm.
    pub fn normalize(&mut self, x: Var) -> Result<Var> {
        let sq = self.square(x);
        let ss = self.sum(sq);
        let n = self.sqrt(ss);
        if self.value(n).item() == 0.0 {
            return Err(Error::Numeric("normalizing a zero-norm vector".into()));
        }
        let one = self.constant(Tensor::scalar(1.0));
        let inv = self.div(one, n)?;
        self.scale_by(x, inv)
    }

    pub fn reshape_flat(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if self.shape(x) == [n] {
            return Ok(x);
        }
        self.reshape(x, &[n])
    }

    // ---- backward ----------------------------------------------------

    /// Propagates gradients from a one-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(dim_err!("backward from non-scalar {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf | Op::Param) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last `backward` w.r.t. `v`, if it received one.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(self.shape(v), g.clone()).ok()
    }

    /// Gradients of every trainable parameter touched by the last backward.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = self
            .params
            .iter()
            .filter(|(_, v)| self.nodes[v.0].requires_grad)
            .filter_map(|(&id, &v)| self.grad(v).map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    fn backprop_node(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let nodes = &self.nodes;
        let y = nodes[i].value.data();
        let mut acc = |j: usize, f: &mut dyn FnMut(&mut [f32])| {
            if !nodes[j].requires_grad {
                return;
            }
            let buf = grads[j].get_or_insert_with(|| vec![0.0; nodes[j].value.numel()]);
            f(buf);
        };
        let val = |j: usize| nodes[j].value.data();
        match &nodes[i].op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * bv[k];
                    }
                });
                acc(*b, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * av[k];
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] / bv[k];
                    }
                });
                acc(*b, &mut |d| {
                    for k in 0..d.len() {
                        d[k] -= g[k] * av[k] / (bv[k] * bv[k]);
                    }
                });
            }
            Op::AddScalar(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::MulScalar(x, c) => acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * c)),
            Op::ScaleBy(x, s) => {
                let c = val(*s)[0];
                let xv = val(*x);
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * c));
                acc(*s, &mut |d| {
                    d[0] += xv.iter().zip(g).map(|(&x, &g)| (x * g) as f64).sum::<f64>() as f32
                });
            }
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => {
                let n = nodes[*x].value.numel() as f32;
                acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::Exp(x) => acc(*x, &mut |d| {
                for k in 0..d.len() {
                    d[k] += g[k] * y[k];
                }
            }),
            Op::Log(x) => {
                let xv = val(*x);
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] / xv[k];
                    }
                })
            }
            Op::Sigmoid(x) => acc(*x, &mut |d| {
                for k in 0..d.len() {
                    d[k] += g[k] * y[k] * (1.0 - y[k]);
                }
            }),
            Op::Tanh(x) => acc(*x, &mut |d| {
                for k in 0..d.len() {
                    d[k] += g[k] * (1.0 - y[k] * y[k]);
                }
            }),
            Op::Softplus(x) => {
                let xv = val(*x);
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * sigmoid(xv[k]);
                    }
                })
            }
            Op::LeakyRelu(x, slope) => {
                let xv = val(*x);
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += if xv[k] > 0.0 { g[k] } else { g[k] * slope };
                    }
                })
            }
            Op::Abs(x) => {
                let xv = val(*x);
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * sign(xv[k]);
                    }
                })
            }
            Op::Square(x) => {
                let xv = val(*x);
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += 2.0 * g[k] * xv[k];
                    }
                })
            }
            Op::Sqrt(x) => acc(*x, &mut |d| {
                for k in 0..d.len() {
                    d[k] += 0.5 * g[k] / y[k];
                }
            }),
            Op::Reshape(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = nodes[p].value.numel();
                    acc(p, &mut |d| add_into(d, &g[off..off + n]));
                    off += n;
                }
            }
            Op::Narrow(x, start) => {
                let s = nodes[*x].value.shape();
                let per: usize = s[1..].iter().product();
                let off = start * per;
                acc(*x, &mut |d| add_into(&mut d[off..off + g.len()], g));
            }
            Op::MatMul { a, b, ta, tb } => {
                let (ta, tb) = (*ta, *tb);
                let (av, bv) = (val(*a), val(*b));
                let out_shape = nodes[i].value.shape();
                let (m, n) = (out_shape[0], out_shape[1]);
                let k = av.len() / m;
                acc(*a, &mut |d| {
                    if ta {
                        kernels::gemm(k, n, m, bv, tb, g, true, d, 1.0);
                    } else {
                        kernels::gemm(m, n, k, g, false, bv, !tb, d, 1.0);
                    }
                });
                acc(*b, &mut |d| {
                    if tb {
                        kernels::gemm(n, m, k, g, true, av, ta, d, 1.0);
                    } else {
                        kernels::gemm(k, m, n, av, !ta, g, false, d, 1.0);
                    }
                });
            }
            Op::Transpose(x) => {
                let s = nodes[i].value.shape();
                let (r, c) = (s[0], s[1]);
                acc(*x, &mut |d| {
                    for p in 0..r {
                        for q in 0..c {
                            d[q * r + p] += g[p * c + q];
                        }
                    }
                });
            }
            Op::AddRow(x, row) => {
                acc(*x, &mut |d| add_into(d, g));
                let k = nodes[*row].value.numel();
                acc(*row, &mut |d| {
                    for chunk in g.chunks(k) {
                        add_into(d, chunk);
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let k = nodes[i].value.shape()[1];
                acc(*x, &mut |d| {
                    for ((dr, gr), yr) in d.chunks_mut(k).zip(g.chunks(k)).zip(y.chunks(k)) {
                        let dot: f32 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..k {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(x) => {
                let k = nodes[i].value.shape()[1];
                acc(*x, &mut |d| {
                    for ((dr, gr), yr) in d.chunks_mut(k).zip(g.chunks(k)).zip(y.chunks(k)) {
                        let s: f32 = gr.iter().sum();
                        for j in 0..k {
                            dr[j] += gr[j] - yr[j].exp() * s;
                        }
                    }
                });
            }
            Op::MeanAxis(x, axis) => {
                let s = nodes[*x].value.shape();
                let (r, k) = (s[0], s[1]);
                let axis = *axis;
                acc(*x, &mut |d| {
                    for p in 0..r {
                        for q in 0..k {
                            d[p * k + q] += if axis == 0 { g[q] / r as f32 } else { g[p] / k as f32 };
                        }
                    }
                });
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let (iv, wv) = (val(*input), val(*weight));
                acc(*bias, &mut |d| kernels::conv2d_backward(iv, wv, g, geom, None, None, Some(d)));
                acc(*weight, &mut |d| kernels::conv2d_backward(iv, wv, g, geom, None, Some(d), None));
                acc(*input, &mut |d| kernels::conv2d_backward(iv, wv, g, geom, Some(d), None, None));
            }
            Op::Upsample2x(x) => {
                let s = nodes[*x].value.shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                acc(*x, &mut |d| kernels::upsample2x_backward(g, c, h, w, d));
            }
            Op::AvgPool2x(x) => {
                let s = nodes[*x].value.shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                acc(*x, &mut |d| kernels::avg_pool2x_backward(g, c, h, w, d));
            }
            Op::Norm {
                x,
                inv_std,
                groups,
                per_group,
                batch,
                fixed,
            } => {
                let (c, per, n) = (*groups, *per_group, *batch);
                acc(*x, &mut |d| {
                    for ch in 0..c {
                        let inv = inv_std[ch];
                        let idx = |s: usize| (s * c + ch) * per..(s * c + ch + 1) * per;
                        if *fixed {
                            for s in 0..n {
                                let r = idx(s);
                                for (dv, &gv) in d[r.clone()].iter_mut().zip(&g[r]) {
                                    *dv += gv * inv;
                                }
                            }
                            continue;
                        }
                        let cnt = (n * per) as f64;
                        let mut mg = 0.0f64;
                        let mut mgy = 0.0f64;
                        for s in 0..n {
                            let r = idx(s);
                            for (&gv, &yv) in g[r.clone()].iter().zip(&y[r]) {
                                mg += gv as f64;
                                mgy += (gv * yv) as f64;
                            }
                        }
                        let (mg, mgy) = ((mg / cnt) as f32, (mgy / cnt) as f32);
                        for s in 0..n {
                            let r = idx(s);
                            for k in r {
                                d[k] += inv * (g[k] - mg - y[k] * mgy);
                            }
                        }
                    }
                });
            }
            Op::Glu(x) => {
                let xv = val(*x);
                let half = xv.len() / 2;
                acc(*x, &mut |d| {
                    for k in 0..half {
                        let s = sigmoid(xv[half + k]);
                        d[k] += g[k] * s;
                        d[half + k] += g[k] * xv[k] * s * (1.0 - s);
                    }
                });
            }
            Op::SpatialMax(x, arg) => {
                acc(*x, &mut |d| {
                    for (k, &p) in arg.iter().enumerate() {
                        d[p] += g[k];
                    }
                });
            }
            Op::Gather(table, idx) => {
                let dcols = nodes[*table].value.shape()[1];
                acc(*table, &mut |d| {
                    for (r, &t) in idx.iter().enumerate() {
                        add_into(&mut d[t * dcols..(t + 1) * dcols], &g[r * dcols..(r + 1) * dcols]);
                    }
                });
            }
            Op::ChannelScale(x, s) => {
                let (xv, sv) = (val(*x), val(*s));
                let c = sv.len();
                let per = xv.len() / c;
                acc(*x, &mut |d| {
                    for k in 0..c {
                        for p in k * per..(k + 1) * per {
                            d[p] += g[p] * sv[k];
                        }
                    }
                });
                acc(*s, &mut |d| {
                    for k in 0..c {
                        let r = k * per..(k + 1) * per;
                        d[k] += g[r.clone()]
                            .iter()
                            .zip(&xv[r])
                            .map(|(&a, &b)| (a * b) as f64)
                            .sum::<f64>() as f32;
                    }
                });
            }
            Op::TileSpatial(v) => {
                let dlen = nodes[*v].value.numel();
                let per = g.len() / dlen;
                acc(*v, &mut |d| {
                    for k in 0..dlen {
                        d[k] += g[k * per..(k + 1) * per].iter().map(|&x| x as f64).sum::<f64>() as f32;
                    }
                });
            }
        }
    }
}

fn add_into(d: &mut [f32], g: &[f32]) {
    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f32) -> f32 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
