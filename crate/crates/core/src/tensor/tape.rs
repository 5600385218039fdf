use super::kernels::{gemm_acc, ConvGeometry};
use super::{split_axis, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
    Scale(Var, f64),
    MatMul { a: Var, b: Var, trans_b: bool },
    Conv2d { x: Var, w: Var, geo: ConvGeometry },
    AddChannel { x: Var, v: Var, axis: usize },
    MulChannel { x: Var, v: Var, axis: usize },
    Relu(Var),
    Gelu(Var),
    Softmax { x: Var, axis: usize, temperature: f64 },
    LayerNorm { x: Var, normalized: Vec<f64>, inv_std: Vec<f64> },
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, axis: usize, probs: Vec<f64> },
    KlDiv { target: Var, input: Var, axis: usize, temperature: f64, p: Vec<f64>, q: Vec<f64> },
    AvgPool2d { x: Var, k: usize },
    GlobalAvgPool(Var),
    Upsample2d { x: Var, k: usize },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Concat { xs: Vec<Var>, axis: usize },
    L2Normalize { x: Var, norms: Vec<f64> },
    IndexSelect { x: Var, rows: Vec<usize> },
    BroadcastBatch { x: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Records primitive operations for reverse-mode differentiation.
///
/// Leaves created with `requires_grad = true` accumulate gradients across
/// repeated [`Tape::backward`] calls until [`Tape::zero_grads`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    macs: u64,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

fn arg_err(op: &'static str, detail: String) -> TensorError {
    TensorError::InvalidArgument { op, detail }
}

fn log_softmax_slices(x: &[f64], shape: &[usize], axis: usize, temperature: f64) -> Vec<f64> {
    let (outer, dim, inner) = split_axis(shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |c: usize| (o * dim + c) * inner + i;
            let max = (0..dim).map(|c| x[idx(c)] / temperature).fold(f64::NEG_INFINITY, f64::max);
            let lse = (0..dim).map(|c| (x[idx(c)] / temperature - max).exp()).sum::<f64>().ln() + max;
            for c in 0..dim {
                out[idx(c)] = x[idx(c)] / temperature - lse;
            }
        }
    }
    out
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let rank = shape.len();
    let new_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        let src: usize = (0..rank).map(|d| idx[d] * in_strides[perm[d]]).sum();
        out.push(data[src]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < new_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (new_shape, out)
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

    /// Multiply-accumulates performed by matmul and conv2d so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(TensorError::UnknownVar(v.0))
        }
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        self.check(x)?;
        let rank = self.value(x).rank();
        if axis >= rank {
            return Err(arg_err(op, format!("axis {axis} out of range for rank {rank}")));
        }
        Ok(())
    }

    fn elementwise2(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor { shape: va.shape().to_vec(), data }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.elementwise2(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.elementwise2(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.elementwise2(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.check(x)?;
        let value = self.value(x).map(|v| v * factor);
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Scale(x, factor), rg))
    }

    /// Batched matrix product over the last two axes.
    ///
    /// `a` is `[..., n, k]`; `b` is `[..., k, m]` (or `[..., m, k]` when
    /// `trans_b`). `b` may also be rank 2, in which case it is shared by
    /// every batch entry of `a`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", format!("operands need rank >= 2, got {sa:?} and {sb:?}")));
        }
        let (n, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, m) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(shape_err("matmul", format!("contracted dims differ: {sa:?} x {sb:?} (trans_b={trans_b})")));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let b_shared = sb.len() == 2;
        if !b_shared && sb[..sb.len() - 2] != sa[..sa.len() - 2] {
            return Err(shape_err("matmul", format!("batch dims differ: {sa:?} x {sb:?}")));
        }
        let mut out = vec![0.0; batch * n * m];
        {
            let (va, vb) = (self.value(a).data(), self.value(b).data());
            for p in 0..batch {
                let boff = if b_shared { 0 } else { p * k * m };
                gemm_acc(
                    &va[p * n * k..(p + 1) * n * k],
                    &vb[boff..boff + k * m],
                    &mut out[p * n * m..(p + 1) * n * m],
                    n,
                    k,
                    m,
                    false,
                    trans_b,
                );
            }
        }
        self.macs += (batch * n * k * m) as u64;
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([n, m]);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor { shape, data: out }, Op::MatMul { a, b, trans_b }, rg))
    }

    /// 2-D convolution of `[b, cin, h, w]` with `[cout, cin/groups, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize, groups: usize) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        let (sx, sw) = (self.value(x).shape().to_vec(), self.value(w).shape().to_vec());
        if sx.len() != 4 || sw.len() != 4 {
            return Err(shape_err("conv2d", format!("expected rank-4 input and weight, got {sx:?}, {sw:?}")));
        }
        if groups == 0 || stride == 0 {
            return Err(arg_err("conv2d", "groups and stride must be positive".into()));
        }
        if sx[1] % groups != 0 || sw[0] % groups != 0 || sw[1] * groups != sx[1] {
            return Err(shape_err(
                "conv2d",
                format!("input {sx:?} and weight {sw:?} incompatible with groups={groups}"),
            ));
        }
        if sx[2] + 2 * padding < sw[2] || sx[3] + 2 * padding < sw[3] {
            return Err(shape_err("conv2d", format!("kernel {sw:?} larger than padded input {sx:?}")));
        }
        let geo = ConvGeometry {
            batch: sx[0],
            in_channels: sx[1],
            height: sx[2],
            width: sx[3],
            out_channels: sw[0],
            kernel_h: sw[2],
            kernel_w: sw[3],
            stride,
            padding,
            groups,
        };
        let (oh, ow) = geo.out_hw();
        let mut out = vec![0.0; geo.batch * geo.out_channels * oh * ow];
        geo.forward(self.value(x).data(), self.value(w).data(), &mut out);
        self.macs += geo.macs();
        let rg = self.rg(&[x, w]);
        let value = Tensor { shape: vec![geo.batch, geo.out_channels, oh, ow], data: out };
        Ok(self.push(value, Op::Conv2d { x, w, geo }, rg))
    }

    fn channel_vec(&self, op: &'static str, x: Var, v: Var, axis: usize) -> Result<()> {
        self.check_axis(op, x, axis)?;
        self.check(v)?;
        let c = self.value(x).shape()[axis];
        if self.value(v).shape() != [c] {
            return Err(shape_err(op, format!("vector {:?} does not match axis {axis} of {:?}", self.value(v).shape(), self.value(x).shape())));
        }
        Ok(())
    }

    /// Adds a per-channel vector broadcast along `axis`.
    pub fn add_channel(&mut self, x: Var, v: Var, axis: usize) -> Result<Var> {
        self.channel_vec("add_channel", x, v, axis)?;
        let xv = self.value(x);
        let (outer, dim, inner) = split_axis(xv.shape(), axis);
        let vv = self.value(v).data();
        let mut data = xv.data().to_vec();
        for o in 0..outer {
            for c in 0..dim {
                for val in &mut data[(o * dim + c) * inner..(o * dim + c + 1) * inner] {
                    *val += vv[c];
                }
            }
        }
        let value = Tensor { shape: xv.shape().to_vec(), data };
        let rg = self.rg(&[x, v]);
        Ok(self.push(value, Op::AddChannel { x, v, axis }, rg))
    }

    /// Multiplies by a per-channel vector broadcast along `axis`.
    pub fn mul_channel(&mut self, x: Var, v: Var, axis: usize) -> Result<Var> {
        self.channel_vec("mul_channel", x, v, axis)?;
        let xv = self.value(x);
        let (outer, dim, inner) = split_axis(xv.shape(), axis);
        let vv = self.value(v).data();
        let mut data = xv.data().to_vec();
        for o in 0..outer {
            for c in 0..dim {
                for val in &mut data[(o * dim + c) * inner..(o * dim + c + 1) * inner] {
                    *val *= vv[c];
                }
            }
        }
        let value = Tensor { shape: xv.shape().to_vec(), data };
        let rg = self.rg(&[x, v]);
        Ok(self.push(value, Op::MulChannel { x, v, axis }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Relu(x), rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let value = self
            .value(x)
            .map(|v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()));
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Gelu(x), rg))
    }

    /// `softmax(x / temperature)` along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize, temperature: f64) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        if !(temperature > 0.0) {
            return Err(arg_err("softmax", format!("temperature must be positive, got {temperature}")));
        }
        let xv = self.value(x);
        let data = log_softmax_slices(xv.data(), xv.shape(), axis, temperature)
            .into_iter()
            .map(f64::exp)
            .collect();
        let value = Tensor { shape: xv.shape().to_vec(), data };
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Softmax { x, axis, temperature }, rg))
    }

    /// Normalizes each slice along the last axis to zero mean, unit variance.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        if xv.rank() == 0 {
            return Err(arg_err("layer_norm", "scalar input".into()));
        }
        let d = *xv.shape().last().unwrap();
        let rows = xv.numel() / d;
        let mut normalized = vec![0.0; xv.numel()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let s = &xv.data()[r * d..(r + 1) * d];
            let mean = s.iter().sum::<f64>() / d as f64;
            let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, v) in normalized[r * d..(r + 1) * d].iter_mut().zip(s) {
                *o = (v - mean) * is;
            }
        }
        let value = Tensor { shape: xv.shape().to_vec(), data: normalized.clone() };
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::LayerNorm { x, normalized, inv_std }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        let value = Tensor::scalar(xv.data().iter().sum::<f64>() / xv.numel() as f64);
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Mean(x), rg))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)` along
    /// `axis`. Labels enumerate the non-axis positions in row-major order.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], axis: usize) -> Result<Var> {
        self.check_axis("cross_entropy", logits, axis)?;
        let lv = self.value(logits);
        let (outer, dim, inner) = split_axis(lv.shape(), axis);
        if labels.len() != outer * inner {
            return Err(shape_err("cross_entropy", format!("{} labels for {} positions", labels.len(), outer * inner)));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= dim) {
            return Err(arg_err("cross_entropy", format!("label {bad} out of range for {dim} classes")));
        }
        let logp = log_softmax_slices(lv.data(), lv.shape(), axis, 1.0);
        let mut loss = 0.0;
        for o in 0..outer {
            for i in 0..inner {
                loss -= logp[(o * dim + labels[o * inner + i]) * inner + i];
            }
        }
        loss /= labels.len() as f64;
        let probs = logp.into_iter().map(f64::exp).collect();
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, labels: labels.to_vec(), axis, probs },
            rg,
        ))
    }

    /// Summed `KL(softmax(target/T) || softmax(input/T))` over every slice
    /// along `axis`.
    pub fn kl_divergence(&mut self, target: Var, input: Var, axis: usize, temperature: f64) -> Result<Var> {
        self.same_shape("kl_divergence", target, input)?;
        self.check_axis("kl_divergence", input, axis)?;
        if !(temperature > 0.0) {
            return Err(arg_err("kl_divergence", format!("temperature must be positive, got {temperature}")));
        }
        let shape = self.value(input).shape().to_vec();
        let logp = log_softmax_slices(self.value(target).data(), &shape, axis, temperature);
        let logq = log_softmax_slices(self.value(input).data(), &shape, axis, temperature);
        let loss: f64 = logp.iter().zip(&logq).map(|(lp, lq)| lp.exp() * (lp - lq)).sum();
        let p = logp.into_iter().map(f64::exp).collect();
        let q = logq.into_iter().map(f64::exp).collect();
        let rg = self.rg(&[target, input]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::KlDiv { target, input, axis, temperature, p, q },
            rg,
        ))
    }

    fn image_dims(&self, op: &'static str, x: Var) -> Result<[usize; 4]> {
        self.check(x)?;
        let s = self.value(x).shape();
        if s.len() != 4 {
            return Err(shape_err(op, format!("expected [b, c, h, w], got {s:?}")));
        }
        Ok([s[0], s[1], s[2], s[3]])
    }

    /// Non-overlapping `k × k` average pooling.
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let [b, c, h, w] = self.image_dims("avg_pool2d", x)?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(arg_err("avg_pool2d", format!("window {k} does not tile {h}x{w}")));
        }
        let (oh, ow) = (h / k, w / k);
        let xv = self.value(x).data();
        let mut data = vec![0.0; b * c * oh * ow];
        let norm = 1.0 / (k * k) as f64;
        for bc in 0..b * c {
            for y in 0..h {
                for xx in 0..w {
                    data[(bc * oh + y / k) * ow + xx / k] += xv[(bc * h + y) * w + xx] * norm;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor { shape: vec![b, c, oh, ow], data }, Op::AvgPool2d { x, k }, rg))
    }

    /// `[b, c, h, w] -> [b, c]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.image_dims("global_avg_pool", x)?;
        let xv = self.value(x).data();
        let hw = h * w;
        let data = (0..b * c)
            .map(|bc| xv[bc * hw..(bc + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor { shape: vec![b, c], data }, Op::GlobalAvgPool(x), rg))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let [b, c, h, w] = self.image_dims("upsample2d", x)?;
        if k == 0 {
            return Err(arg_err("upsample2d", "factor must be positive".into()));
        }
        let (oh, ow) = (h * k, w * k);
        let xv = self.value(x).data();
        let mut data = vec![0.0; b * c * oh * ow];
        for bc in 0..b * c {
            for y in 0..oh {
                for xx in 0..ow {
                    data[(bc * oh + y) * ow + xx] = xv[(bc * h + y / k) * w + xx / k];
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor { shape: vec![b, c, oh, ow], data }, Op::Upsample2d { x, k }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        let rank = xv.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(arg_err("permute", format!("{perm:?} is not a permutation of rank {rank}")));
        }
        let (shape, data) = permute_data(xv.data(), xv.shape(), perm);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor { shape, data }, Op::Permute { x, perm: perm.to_vec() }, rg))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| arg_err("concat", "no inputs".into()))?;
        self.check_axis("concat", first, axis)?;
        let base = self.value(first).shape().to_vec();
        for &v in xs {
            self.check(v)?;
            let s = self.value(v).shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", format!("{s:?} vs {base:?} along axis {axis}")));
            }
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let total: usize = xs.iter().map(|&v| self.value(v).shape()[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let d = self.value(v).shape()[axis];
                data.extend_from_slice(&self.value(v).data()[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(xs);
        Ok(self.push(Tensor { shape, data }, Op::Concat { xs: xs.to_vec(), axis }, rg))
    }

    /// Scales each slice along the last axis to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        if xv.rank() == 0 {
            return Err(arg_err("l2_normalize", "scalar input".into()));
        }
        let d = *xv.shape().last().unwrap();
        let mut data = xv.data().to_vec();
        let mut norms = Vec::with_capacity(xv.numel() / d);
        for row in data.chunks_mut(d) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let value = Tensor { shape: xv.shape().to_vec(), data };
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::L2Normalize { x, norms }, rg))
    }

    /// Gathers rows (indices along axis 0).
    pub fn index_select(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        self.check(x)?;
        let value = self.value(x).select(0, rows)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::IndexSelect { x, rows: rows.to_vec() }, rg))
    }

    /// Repeats `x` along a new leading batch axis.
    pub fn broadcast_batch(&mut self, x: Var, batch: usize) -> Result<Var> {
        self.check(x)?;
        if batch == 0 {
            return Err(arg_err("broadcast_batch", "batch must be positive".into()));
        }
        let xv = self.value(x);
        let mut shape = vec![batch];
        shape.extend_from_slice(xv.shape());
        let data = xv.data().repeat(batch);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor { shape, data }, Op::BroadcastBatch { x }, rg))
    }

    /// Back-propagates from a scalar `loss`, accumulating into leaf grads.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(&shape));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                match &mut self.nodes[i].grad {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            for (v, contrib) in self.input_grads(i, &g) {
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    fn input_grads(&self, i: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[i];
        let want = |v: Var| self.nodes[v.0].requires_grad;
        let like = |v: Var, data: Vec<f64>| Tensor { shape: self.value(v).shape().to_vec(), data };
        let gd = g.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if want(v) {
                        out.push((v, g.clone()));
                    }
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    out.push((*a, g.clone()));
                }
                if want(*b) {
                    out.push((*b, g.map(|x| -x)));
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    let d = gd.iter().zip(self.value(*b).data()).map(|(x, y)| x * y).collect();
                    out.push((*a, like(*a, d)));
                }
                if want(*b) {
                    let d = gd.iter().zip(self.value(*a).data()).map(|(x, y)| x * y).collect();
                    out.push((*b, like(*b, d)));
                }
            }
            Op::Scale(x, f) => {
                if want(*x) {
                    out.push((*x, g.map(|v| v * f)));
                }
            }
            Op::MatMul { a, b, trans_b } => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                let (n, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let m = g.shape()[g.rank() - 1];
                let batch: usize = sa[..sa.len() - 2].iter().product();
                let b_shared = sb.len() == 2;
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if want(*a) {
                    // dA = dC · op(B)^T
                    let mut da = vec![0.0; va.len()];
                    for p in 0..batch {
                        let boff = if b_shared { 0 } else { p * k * m };
                        gemm_acc(
                            &gd[p * n * m..(p + 1) * n * m],
                            &vb[boff..boff + k * m],
                            &mut da[p * n * k..(p + 1) * n * k],
                            n,
                            m,
                            k,
                            false,
                            !trans_b,
                        );
                    }
                    out.push((*a, like(*a, da)));
                }
                if want(*b) {
                    let mut db = vec![0.0; vb.len()];
                    for p in 0..batch {
                        let boff = if b_shared { 0 } else { p * k * m };
                        let ap = &va[p * n * k..(p + 1) * n * k];
                        let gp = &gd[p * n * m..(p + 1) * n * m];
                        if *trans_b {
                            // B stored m×k: dB = dC^T · A
                            gemm_acc(gp, ap, &mut db[boff..boff + k * m], m, n, k, true, false);
                        } else {
                            // dB = A^T · dC
                            gemm_acc(ap, gp, &mut db[boff..boff + k * m], k, n, m, true, false);
                        }
                    }
                    out.push((*b, like(*b, db)));
                }
            }
            Op::Conv2d { x, w, geo } => {
                if want(*x) {
                    let mut dx = vec![0.0; self.value(*x).numel()];
                    geo.backward_input(gd, self.value(*w).data(), &mut dx);
                    out.push((*x, like(*x, dx)));
                }
                if want(*w) {
                    let mut dw = vec![0.0; self.value(*w).numel()];
                    geo.backward_weight(gd, self.value(*x).data(), &mut dw);
                    out.push((*w, like(*w, dw)));
                }
            }
            Op::AddChannel { x, v, axis } => {
                if want(*x) {
                    out.push((*x, g.clone()));
                }
                if want(*v) {
                    let (outer, dim, inner) = split_axis(g.shape(), *axis);
                    let mut dv = vec![0.0; dim];
                    for o in 0..outer {
                        for (c, acc) in dv.iter_mut().enumerate() {
                            *acc += gd[(o * dim + c) * inner..(o * dim + c + 1) * inner].iter().sum::<f64>();
                        }
                    }
                    out.push((*v, like(*v, dv)));
                }
            }
            Op::MulChannel { x, v, axis } => {
                let (outer, dim, inner) = split_axis(g.shape(), *axis);
                let vv = self.value(*v).data();
                if want(*x) {
                    let mut dx = gd.to_vec();
                    for o in 0..outer {
                        for c in 0..dim {
                            for val in &mut dx[(o * dim + c) * inner..(o * dim + c + 1) * inner] {
                                *val *= vv[c];
                            }
                        }
                    }
                    out.push((*x, like(*x, dx)));
                }
                if want(*v) {
                    let xv = self.value(*x).data();
                    let mut dv = vec![0.0; dim];
                    for o in 0..outer {
                        for (c, acc) in dv.iter_mut().enumerate() {
                            let r = (o * dim + c) * inner..(o * dim + c + 1) * inner;
                            *acc += gd[r.clone()].iter().zip(&xv[r]).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                    out.push((*v, like(*v, dv)));
                }
            }
            Op::Relu(x) => {
                if want(*x) {
                    let d = gd
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect();
                    out.push((*x, like(*x, d)));
                }
            }
            Op::Gelu(x) => {
                if want(*x) {
                    let d = gd
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(g, &v)| {
                            let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                            let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                            g * (0.5 * (1.0 + t) + 0.5 * v * dt)
                        })
                        .collect();
                    out.push((*x, like(*x, d)));
                }
            }
            Op::Softmax { x, axis, temperature } => {
                if want(*x) {
                    let y = node.value.data();
                    let (outer, dim, inner) = split_axis(g.shape(), *axis);
                    let mut d = vec![0.0; y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |c: usize| (o * dim + c) * inner + i;
                            let dot: f64 = (0..dim).map(|c| gd[idx(c)] * y[idx(c)]).sum();
                            for c in 0..dim {
                                d[idx(c)] = y[idx(c)] * (gd[idx(c)] - dot) / temperature;
                            }
                        }
                    }
                    out.push((*x, like(*x, d)));
                }
            }
            Op::LayerNorm { x, normalized, inv_std } => {
                if want(*x) {
                    let d = *g.shape().last().unwrap();
                    let mut dx = vec![0.0; gd.len()];
                    for (r, is) in inv_std.iter().enumerate() {
                        let gs = &gd[r * d..(r + 1) * d];
                        let ys = &normalized[r * d..(r + 1) * d];
                        let mg = gs.iter().sum::<f64>() / d as f64;
                        let mgy = gs.iter().zip(ys).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dx[r * d + j] = is * (gs[j] - mg - ys[j] * mgy);
                        }
                    }
                    out.push((*x, like(*x, dx)));
                }
            }
            Op::Sum(x) => {
                if want(*x) {
                    let s = self.value(*x).shape();
                    out.push((*x, Tensor::full(s, gd[0])));
                }
            }
            Op::Mean(x) => {
                if want(*x) {
                    let xv = self.value(*x);
                    out.push((*x, Tensor::full(xv.shape(), gd[0] / xv.numel() as f64)));
                }
            }
            Op::CrossEntropy { logits, labels, axis, probs } => {
                if want(*logits) {
                    let (outer, dim, inner) = split_axis(self.value(*logits).shape(), *axis);
                    let scale = gd[0] / labels.len() as f64;
                    let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for o in 0..outer {
                        for i in 0..inner {
                            d[(o * dim + labels[o * inner + i]) * inner + i] -= scale;
                        }
                    }
                    out.push((*logits, like(*logits, d)));
                }
            }
            Op::KlDiv { target, input, axis, temperature, p, q } => {
                let t = *temperature;
                if want(*input) {
                    let d = p.iter().zip(q).map(|(pv, qv)| gd[0] * (qv - pv) / t).collect();
                    out.push((*input, like(*input, d)));
                }
                if want(*target) {
                    let (outer, dim, inner) = split_axis(self.value(*input).shape(), *axis);
                    let mut d = vec![0.0; p.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |c: usize| (o * dim + c) * inner + i;
                            let terms: Vec<f64> = (0..dim)
                                .map(|c| if p[idx(c)] > 0.0 { p[idx(c)].ln() - q[idx(c)].ln() } else { 0.0 })
                                .collect();
                            let kl: f64 = (0..dim).map(|c| p[idx(c)] * terms[c]).sum();
                            for c in 0..dim {
                                d[idx(c)] = gd[0] * p[idx(c)] * (terms[c] - kl) / t;
                            }
                        }
                    }
                    out.push((*target, like(*target, d)));
                }
            }
            Op::AvgPool2d { x, k } => {
                if want(*x) {
                    let s = self.value(*x).shape();
                    let (h, w) = (s[2], s[3]);
                    let (oh, ow) = (h / k, w / k);
                    let norm = 1.0 / (k * k) as f64;
                    let mut d = vec![0.0; self.value(*x).numel()];
                    for bc in 0..s[0] * s[1] {
                        for y in 0..h {
                            for xx in 0..w {
                                d[(bc * h + y) * w + xx] = gd[(bc * oh + y / k) * ow + xx / k] * norm;
                            }
                        }
                    }
                    out.push((*x, like(*x, d)));
                }
            }
            Op::GlobalAvgPool(x) => {
                if want(*x) {
                    let s = self.value(*x).shape();
                    let hw = s[2] * s[3];
                    let d = (0..self.value(*x).numel()).map(|idx| gd[idx / hw] / hw as f64).collect();
                    out.push((*x, like(*x, d)));
                }
            }
            Op::Upsample2d { x, k } => {
                if want(*x) {
                    let s = self.value(*x).shape();
                    let (h, w) = (s[2], s[3]);
                    let (oh, ow) = (h * k, w * k);
                    let mut d = vec![0.0; self.value(*x).numel()];
                    for bc in 0..s[0] * s[1] {
                        for y in 0..oh {
                            for xx in 0..ow {
                                d[(bc * h + y / k) * w + xx / k] += gd[(bc * oh + y) * ow + xx];
                            }
                        }
                    }
                    out.push((*x, like(*x, d)));
                }
            }
            Op::Reshape(x) => {
                if want(*x) {
                    out.push((*x, like(*x, gd.to_vec())));
                }
            }
            Op::Permute { x, perm } => {
                if want(*x) {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let (_, d) = permute_data(gd, g.shape(), &inv);
                    out.push((*x, like(*x, d)));
                }
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(g.shape(), *axis);
                let mut offset = 0;
                for &v in xs {
                    let d = self.value(v).shape()[*axis];
                    if want(v) {
                        let mut dv = Vec::with_capacity(outer * d * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            dv.extend_from_slice(&gd[start..start + d * inner]);
                        }
                        out.push((v, like(v, dv)));
                    }
                    offset += d;
                }
            }
            Op::L2Normalize { x, norms } => {
                if want(*x) {
                    let y = node.value.data();
                    let d = *g.shape().last().unwrap();
                    let mut dx = vec![0.0; gd.len()];
                    for (r, n) in norms.iter().enumerate() {
                        let gs = &gd[r * d..(r + 1) * d];
                        let ys = &y[r * d..(r + 1) * d];
                        let dot: f64 = gs.iter().zip(ys).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dx[r * d + j] = (gs[j] - ys[j] * dot) / n;
                        }
                    }
                    out.push((*x, like(*x, dx)));
                }
            }
            Op::IndexSelect { x, rows } => {
                if want(*x) {
                    let s = self.value(*x).shape();
                    let row = s[1..].iter().product::<usize>();
                    let mut d = vec![0.0; self.value(*x).numel()];
                    for (j, &r) in rows.iter().enumerate() {
                        for c in 0..row {
                            d[r * row + c] += gd[j * row + c];
                        }
                    }
                    out.push((*x, like(*x, d)));
                }
            }
            Op::BroadcastBatch { x } => {
                if want(*x) {
                    let n = self.value(*x).numel();
                    let mut d = vec![0.0; n];
                    for chunk in gd.chunks(n) {
                        for (a, b) in d.iter_mut().zip(chunk) {
                            *a += b;
                        }
                    }
                    out.push((*x, like(*x, d)));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_gradient_is_step() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.5, -0.5]).unwrap(), true);
        let y = tape.relu(x).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn sum_and_half_square_gradients() {
        let w0 = Tensor::new(vec![3], vec![0.5, -2.0, 3.0]).unwrap();
        let mut tape = Tape::new();
        let w = tape.leaf(w0.clone(), true);
        let s = tape.sum(w).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let w = tape.leaf(w0.clone(), true);
        let sq = tape.mul(w, w).unwrap();
        let s = tape.sum(sq).unwrap();
        let half = tape.scale(s, 0.5).unwrap();
        tape.backward(half).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &w0);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::ones(&[2]), true);
        let s = tape.sum(w).unwrap();
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[2.0, 2.0]);
        tape.zero_grads();
        assert!(tape.grad(w).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign_vars() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::ones(&[2]), true);
        assert!(matches!(tape.backward(w), Err(TensorError::NonScalarLoss(_))));
        assert!(matches!(tape.backward(Var(99)), Err(TensorError::UnknownVar(99))));
    }

    #[test]
    fn kl_of_identical_logits_is_zero() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![2, 3], vec![0.1, 2.0, -1.0, 3.0, 3.0, 0.0]).unwrap());
        let kl = tape.kl_divergence(a, a, 1, 1.0).unwrap();
        assert_eq!(tape.value(kl).item(), 0.0);
    }

    #[test]
    fn softmax_rejects_nonpositive_temperature() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::ones(&[3]));
        assert!(tape.softmax(a, 0, 0.0).is_err());
        assert!(tape.softmax(a, 0, -1.0).is_err());
    }

    #[test]
    fn softmax_slices_are_distributions() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_fn(&[2, 4, 3], |i| (i as f64 * 0.7).sin() * 5.0));
        let s = tape.softmax(a, 1, 0.5).unwrap();
        let v = tape.value(s);
        for o in 0..2 {
            for i in 0..3 {
                let total: f64 = (0..4).map(|c| v.data()[(o * 4 + c) * 3 + i]).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
        assert!(v.data().iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn permute_round_trips() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let p = tape.permute(a, &[2, 0, 1]).unwrap();
        assert_eq!(tape.value(p).shape(), &[4, 2, 3]);
        let back = tape.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(tape.value(back), tape.value(a));
    }

    #[test]
    fn matmul_counts_macs() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::ones(&[2, 3, 4]));
        let b = tape.constant(Tensor::ones(&[5, 4]));
        let c = tape.matmul(a, b, true).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 3, 5]);
        assert_eq!(tape.value(c).data()[0], 4.0);
        assert_eq!(tape.macs(), 2 * 3 * 4 * 5);
    }
}
