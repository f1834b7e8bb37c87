use super::kernels::{self, ConvGeom};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Reshape(Var),
    Permute { input: Var, perm: Vec<usize> },
    Sum { input: Var, axis: Option<usize> },
    Mean { input: Var, axis: Option<usize> },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softmax { input: Var, axis: usize },
    Conv1d { input: Var, weight: Var, bias: Var, geom: ConvGeom },
    MaxPool { input: Var, argmax: Vec<usize> },
    BatchNorm(Box<BatchNormCache>),
}

#[derive(Debug)]
struct BatchNormCache {
    input: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    batch: usize,
    channels: usize,
    inner: usize,
    batch_stats: bool,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Per-channel statistics observed by a train-mode batch-norm call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Dynamic reverse-mode tape.
///
/// Every operation appends a node whose inputs precede it, so node order is
/// already a topological order. A fresh tape is built for each forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
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

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.nodes[v.0].requires_grad)
    }

    // ---- elementwise -------------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = kernels::broadcast_shape(sa, sb).ok_or_else(|| Error::shape(name, sa, sb))?;
        let (da, db) = (self.data(a), self.data(b));
        let data: Vec<f64> = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ia = kernels::broadcast_index(&out_shape, sa);
            let ib = kernels::broadcast_index(&out_shape, sb);
            ia.iter().zip(&ib).map(|(&i, &j)| f(da[i], db[j])).collect()
        };
        Ok((Tensor::from_parts(out_shape, data), self.any_grad(&[a, b])))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, rg, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "div", |x, y| x / y)?;
        Ok(self.push(t, rg, Op::Div(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let src = self.value(a);
        let data = src.data().iter().map(|x| x * factor).collect();
        let t = Tensor::from_parts(src.shape().to_vec(), data);
        let rg = self.requires_grad(a);
        self.push(t, rg, Op::Scale(a, factor))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = self.value(a);
        let data = src.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::from_parts(src.shape().to_vec(), data);
        let rg = self.requires_grad(a);
        self.push(t, rg, op)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), kernels::sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    // ---- linear algebra ----------------------------------------------------

    /// `(m×k) · (k×n) → (m×n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.data(a), false, self.data(b), false, &mut out, false);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), rg, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("transpose", s, &[0, 0]));
        }
        let (r, c) = (s[0], s[1]);
        let d = self.data(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let rg = self.requires_grad(a);
        Ok(self.push(Tensor::from_parts(vec![c, r], out), rg, Op::Transpose(a)))
    }

    // ---- shape manipulation ------------------------------------------------

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::Usage("concat of an empty list".into()))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        let mut extent = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            extent += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = extent;
        let (outer, _, inner) = kernels::split_axis(&out_shape, axis);
        let mut out = Vec::with_capacity(outer * extent * inner);
        for o in 0..outer {
            for &v in inputs {
                let w = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.data(v)[o * w..(o + 1) * w]);
            }
        }
        let rg = self.any_grad(inputs);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            rg,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Keeps indices `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(Error::shape("slice", &s, &[axis, start, end]));
        }
        let (outer, extent, inner) = kernels::split_axis(&s, axis);
        let d = self.data(a);
        let width = end - start;
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = o * extent * inner;
            out.extend_from_slice(&d[base + start * inner..base + end * inner]);
        }
        let mut out_shape = s;
        out_shape[axis] = width;
        let rg = self.requires_grad(a);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            rg,
            Op::Slice {
                input: a,
                axis,
                start,
            },
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src = self.value(a);
        let t = Tensor::new(shape.to_vec(), src.data().to_vec())
            .map_err(|_| Error::shape("reshape", src.shape(), shape))?;
        let rg = self.requires_grad(a);
        Ok(self.push(t, rg, Op::Reshape(a)))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let mut seen = vec![false; s.len()];
        let valid = perm.len() == s.len()
            && perm.iter().all(|&p| p < s.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(Error::shape("permute", &s, perm));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let out = permute_data(self.data(a), &s, perm);
        let rg = self.requires_grad(a);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            rg,
            Op::Permute {
                input: a,
                perm: perm.to_vec(),
            },
        ))
    }

    // ---- reductions --------------------------------------------------------

    fn reduce(&mut self, a: Var, axis: Option<usize>, mean: bool) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let d = self.data(a);
        let (shape, data) = match axis {
            None => {
                let total: f64 = d.iter().sum();
                let v = if mean { total / d.len() as f64 } else { total };
                (Vec::new(), vec![v])
            }
            Some(ax) => {
                if ax >= s.len() {
                    return Err(Error::shape("reduce", &s, &[ax]));
                }
                let (outer, extent, inner) = kernels::split_axis(&s, ax);
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for e in 0..extent {
                        let src = &d[(o * extent + e) * inner..(o * extent + e + 1) * inner];
                        for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *acc += v;
                        }
                    }
                }
                if mean {
                    out.iter_mut().for_each(|v| *v /= extent as f64);
                }
                let mut shape = s;
                shape.remove(ax);
                (shape, out)
            }
        };
        let rg = self.requires_grad(a);
        let op = if mean {
            Op::Mean { input: a, axis }
        } else {
            Op::Sum { input: a, axis }
        };
        Ok(self.push(Tensor::from_parts(shape, data), rg, op))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.reduce(a, None, false).expect("full reduction is total")
    }

    pub fn mean(&mut self, a: Var) -> Var {
        self.reduce(a, None, true).expect("full reduction is total")
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(a, Some(axis), false)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(a, Some(axis), true)
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(Error::shape("softmax", &s, &[axis]));
        }
        let (outer, extent, inner) = kernels::split_axis(&s, axis);
        let d = self.data(a);
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |e: usize| (o * extent + e) * inner + i;
                let max = (0..extent).map(|e| d[at(e)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for e in 0..extent {
                    let v = (d[at(e)] - max).exp();
                    out[at(e)] = v;
                    total += v;
                }
                for e in 0..extent {
                    out[at(e)] /= total;
                }
            }
        }
        let rg = self.requires_grad(a);
        Ok(self.push(Tensor::from_parts(s, out), rg, Op::Softmax { input: a, axis }))
    }

    // ---- neural-network primitives -----------------------------------------

    /// Same-padded 1-D cross-correlation.
    ///
    /// `x: (batch, in_ch, len)`, `weight: (out_ch, in_ch, kernel)`,
    /// `bias: (out_ch)` → `(batch, out_ch, ceil(len / stride))`.
    pub fn conv1d(&mut self, x: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(weight), self.shape(bias));
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] {
            return Err(Error::shape("conv1d", sx, sw));
        }
        if sb != [sw[0]] {
            return Err(Error::shape("conv1d bias", sb, &sw[..1]));
        }
        if stride == 0 {
            return Err(Error::Domain("conv1d stride must be ≥ 1".into()));
        }
        let (out_len, pad_left) = kernels::same_padding(sx[2], sw[2], stride);
        let geom = ConvGeom {
            batch: sx[0],
            in_ch: sx[1],
            out_ch: sw[0],
            len: sx[2],
            kernel: sw[2],
            stride,
            out_len,
            pad_left,
        };
        let out = kernels::conv1d_forward(&geom, self.data(x), self.data(weight), self.data(bias));
        let rg = self.any_grad(&[x, weight, bias]);
        Ok(self.push(
            Tensor::from_parts(vec![geom.batch, geom.out_ch, out_len], out),
            rg,
            Op::Conv1d {
                input: x,
                weight,
                bias,
                geom,
            },
        ))
    }

    /// Same-padded max pooling along the last axis (padding acts as −∞).
    pub fn max_pool1d(&mut self, x: Var, size: usize, stride: usize) -> Result<Var> {
        if size == 0 || stride == 0 {
            return Err(Error::Domain("pool size and stride must be ≥ 1".into()));
        }
        let s = self.shape(x).to_vec();
        let len = *s.last().ok_or_else(|| Error::shape("max_pool1d", &s, &[]))?;
        let rows = s[..s.len() - 1].iter().product();
        let (out, argmax, out_len) = kernels::max_pool_forward(self.data(x), rows, len, size, stride);
        let mut shape = s;
        *shape.last_mut().unwrap() = out_len;
        let rg = self.requires_grad(x);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            rg,
            Op::MaxPool { input: x, argmax },
        ))
    }

    /// Per-channel normalization of `x: (batch, channels[, len])`.
    ///
    /// With `running = None` the batch's own mean and biased variance are
    /// used and returned; otherwise the supplied `(mean, var)` pair is used.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || s.len() > 3 {
            return Err(Error::shape("batch_norm", &s, &[0, 0, 0]));
        }
        let (batch, channels) = (s[0], s[1]);
        let inner = s.get(2).copied().unwrap_or(1);
        for p in [gamma, beta] {
            if self.shape(p) != [channels] {
                return Err(Error::shape("batch_norm params", self.shape(p), &[channels]));
            }
        }
        let (mean, var, stats) = match running {
            Some((m, v)) => {
                if m.len() != channels || v.len() != channels {
                    return Err(Error::shape("batch_norm running stats", &[m.len(), v.len()], &[channels]));
                }
                (m.to_vec(), v.to_vec(), None)
            }
            None => {
                if batch * inner < 2 {
                    return Err(Error::Domain(format!(
                        "train-mode batch norm needs at least 2 values per channel, got batch {batch}"
                    )));
                }
                let (m, v) = kernels::channel_moments(self.data(x), batch, channels, inner);
                let stats = BatchStats {
                    mean: m.clone(),
                    var: v.clone(),
                };
                (m, v, Some(stats))
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (d, g, b) = (self.data(x), self.data(gamma), self.data(beta));
        let mut xhat = vec![0.0; d.len()];
        let mut out = vec![0.0; d.len()];
        for bi in 0..batch {
            for c in 0..channels {
                let base = (bi * channels + c) * inner;
                for i in base..base + inner {
                    xhat[i] = (d[i] - mean[c]) * inv_std[c];
                    out[i] = g[c] * xhat[i] + b[c];
                }
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        let cache = BatchNormCache {
            input: x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch,
            channels,
            inner,
            batch_stats: stats.is_some(),
        };
        let v = self.push(Tensor::from_parts(s, out), rg, Op::BatchNorm(Box::new(cache)));
        Ok((v, stats))
    }

    // ---- reverse pass ------------------------------------------------------

    /// Propagates d`loss`/d(node) back to every reachable leaf that requires
    /// a gradient. Leaf gradients accumulate across calls until
    /// [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut local: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        local[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = local[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Op::Leaf = node.op {
                if node.requires_grad {
                    match &mut self.grads[idx] {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        slot => *slot = Some(g),
                    }
                }
                continue;
            }
            self.backprop_node(idx, &g, &mut local);
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[f64], local: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                self.accumulate_broadcast(local, *a, out_shape, |i| g[i]);
                self.accumulate_broadcast(local, *b, out_shape, |i| sign * g[i]);
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (da, db) = (self.data(*a), self.data(*b));
                let same = sa == sb;
                let ia = if same { None } else { Some(kernels::broadcast_index(out_shape, sa)) };
                let ib = if same { None } else { Some(kernels::broadcast_index(out_shape, sb)) };
                let at_a = |i: usize| ia.as_ref().map_or(i, |v| v[i]);
                let at_b = |i: usize| ib.as_ref().map_or(i, |v| v[i]);
                let div = matches!(node.op, Op::Div(..));
                if self.requires_grad(*a) {
                    let buf = slot(local, *a, da.len());
                    for i in 0..g.len() {
                        let y = db[at_b(i)];
                        buf[at_a(i)] += if div { g[i] / y } else { g[i] * y };
                    }
                }
                if self.requires_grad(*b) {
                    let buf = slot(local, *b, db.len());
                    for i in 0..g.len() {
                        let (x, y) = (da[at_a(i)], db[at_b(i)]);
                        buf[at_b(i)] += if div { -g[i] * x / (y * y) } else { g[i] * x };
                    }
                }
            }
            Op::Scale(a, f) => self.accumulate(local, *a, |i| g[i] * f),
            Op::Sigmoid(a) => self.accumulate(local, *a, |i| g[i] * out[i] * (1.0 - out[i])),
            Op::Tanh(a) => self.accumulate(local, *a, |i| g[i] * (1.0 - out[i] * out[i])),
            Op::Relu(a) => {
                let x = self.data(*a);
                self.accumulate(local, *a, |i| if x[i] > 0.0 { g[i] } else { 0.0 })
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.requires_grad(*a) {
                    let buf = slot(local, *a, m * k);
                    kernels::gemm(m, n, k, g, false, self.data(*b), true, buf, true);
                }
                if self.requires_grad(*b) {
                    let buf = slot(local, *b, k * n);
                    kernels::gemm(k, m, n, self.data(*a), true, g, false, buf, true);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                self.accumulate(local, *a, |i| g[(i % c) * r + i / c]);
            }
            Op::Concat { inputs, axis } => {
                let (outer, extent, inner) = kernels::split_axis(out_shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let w = self.shape(v)[*axis];
                    if self.requires_grad(v) {
                        let buf = slot(local, v, outer * w * inner);
                        for o in 0..outer {
                            let src = &g[(o * extent + offset) * inner..(o * extent + offset + w) * inner];
                            let dst = &mut buf[o * w * inner..(o + 1) * w * inner];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                        }
                    }
                    offset += w;
                }
            }
            Op::Slice { input, axis, start } => {
                let (outer, extent, inner) = kernels::split_axis(self.shape(*input), *axis);
                let width = out_shape[*axis];
                let buf = slot(local, *input, outer * extent * inner);
                for o in 0..outer {
                    let dst = &mut buf[(o * extent + start) * inner..(o * extent + start + width) * inner];
                    let src = &g[o * width * inner..(o + 1) * width * inner];
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                }
            }
            Op::Reshape(a) => self.accumulate(local, *a, |i| g[i]),
            Op::Permute { input, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let back = permute_data(g, out_shape, &inverse);
                self.accumulate(local, *input, |i| back[i]);
            }
            Op::Sum { input, axis } | Op::Mean { input, axis } => {
                let mean = matches!(node.op, Op::Mean { .. });
                let s = self.shape(*input);
                match axis {
                    None => {
                        let v = if mean { g[0] / self.value(*input).len() as f64 } else { g[0] };
                        self.accumulate(local, *input, |_| v);
                    }
                    Some(ax) => {
                        let (_, extent, inner) = kernels::split_axis(s, *ax);
                        let f = if mean { 1.0 / extent as f64 } else { 1.0 };
                        self.accumulate(local, *input, |i| {
                            let o = i / (extent * inner);
                            g[o * inner + i % inner] * f
                        });
                    }
                }
            }
            Op::Softmax { input, axis } => {
                let (outer, extent, inner) = kernels::split_axis(out_shape, *axis);
                let mut dx = vec![0.0; out.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |e: usize| (o * extent + e) * inner + i;
                        let dot: f64 = (0..extent).map(|e| g[at(e)] * out[at(e)]).sum();
                        for e in 0..extent {
                            dx[at(e)] = out[at(e)] * (g[at(e)] - dot);
                        }
                    }
                }
                self.accumulate(local, *input, |i| dx[i]);
            }
            Op::Conv1d {
                input,
                weight,
                bias,
                geom,
            } => {
                let x = self.data(*input);
                let w = self.data(*weight);
                let mut dx = self.requires_grad(*input).then(|| vec![0.0; x.len()]);
                let mut dw = self.requires_grad(*weight).then(|| vec![0.0; w.len()]);
                let mut db = self.requires_grad(*bias).then(|| vec![0.0; geom.out_ch]);
                kernels::conv1d_backward(geom, x, w, g, dx.as_deref_mut(), dw.as_deref_mut(), db.as_deref_mut());
                for (v, d) in [(*input, dx), (*weight, dw), (*bias, db)] {
                    if let Some(d) = d {
                        self.accumulate(local, v, |i| d[i]);
                    }
                }
            }
            Op::MaxPool { input, argmax } => {
                if self.requires_grad(*input) {
                    let buf = slot(local, *input, self.value(*input).len());
                    for (i, &src) in argmax.iter().enumerate() {
                        buf[src] += g[i];
                    }
                }
            }
            Op::BatchNorm(c) => self.backprop_batch_norm(c, g, local),
        }
    }

    fn backprop_batch_norm(&self, c: &BatchNormCache, g: &[f64], local: &mut [Option<Vec<f64>>]) {
        let gamma = self.data(c.gamma);
        let n = (c.batch * c.inner) as f64;
        let mut sum_g = vec![0.0; c.channels];
        let mut sum_gx = vec![0.0; c.channels];
        for b in 0..c.batch {
            for ch in 0..c.channels {
                let base = (b * c.channels + ch) * c.inner;
                for i in base..base + c.inner {
                    sum_g[ch] += g[i];
                    sum_gx[ch] += g[i] * c.xhat[i];
                }
            }
        }
        if self.requires_grad(c.gamma) {
            self.accumulate(local, c.gamma, |ch| sum_gx[ch]);
        }
        if self.requires_grad(c.beta) {
            self.accumulate(local, c.beta, |ch| sum_g[ch]);
        }
        if self.requires_grad(c.input) {
            let channel = |i: usize| (i / c.inner) % c.channels;
            if c.batch_stats {
                self.accumulate(local, c.input, |i| {
                    let ch = channel(i);
                    gamma[ch] * c.inv_std[ch] * (g[i] - sum_g[ch] / n - c.xhat[i] * sum_gx[ch] / n)
                });
            } else {
                self.accumulate(local, c.input, |i| {
                    let ch = channel(i);
                    g[i] * gamma[ch] * c.inv_std[ch]
                });
            }
        }
    }

    fn accumulate(&self, local: &mut [Option<Vec<f64>>], v: Var, f: impl Fn(usize) -> f64) {
        if !self.requires_grad(v) {
            return;
        }
        let buf = slot(local, v, self.value(v).len());
        buf.iter_mut().enumerate().for_each(|(i, d)| *d += f(i));
    }

    /// Accumulates a gradient defined over `out_shape` into `v`, summing over
    /// broadcast axes.
    fn accumulate_broadcast(&self, local: &mut [Option<Vec<f64>>], v: Var, out_shape: &[usize], f: impl Fn(usize) -> f64) {
        if !self.requires_grad(v) {
            return;
        }
        let s = self.shape(v);
        if s == out_shape {
            return self.accumulate(local, v, f);
        }
        let index = kernels::broadcast_index(out_shape, s);
        let buf = slot(local, v, self.value(v).len());
        for (i, &src) in index.iter().enumerate() {
            buf[src] += f(i);
        }
    }
}

fn slot(local: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    local[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn permute_data(d: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let mut out = Vec::with_capacity(d.len());
    let mut counter = vec![0usize; rank];
    let mut pos = 0usize;
    for _ in 0..d.len() {
        out.push(d[pos]);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            pos += src_strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            pos -= src_strides[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    out
}
