//! Tape-based reverse-mode differentiation.
//!
//! Every primitive appends a node holding its forward value and the recipe
//! for its vector-Jacobian product. Nodes are appended in evaluation order,
//! so walking the tape backwards is a valid reverse topological order.

use super::kernels;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Silu(Var),
    ChannelNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddChannelBias {
        x: Var,
        bias: Var,
    },
    ScaleInChannels {
        w: Var,
        m: Var,
    },
    Concat(Var, Var),
    Upsample2x(Var),
    AvgPool2x(Var),
    Reshape(Var),
    Sum(Var),
    Mse(Var, Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Ordered record of primitive applications.
#[derive(Debug)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    differentiated: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            differentiated: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register an input. Its `requires_grad` flag decides whether a
    /// gradient is accumulated for it.
    pub fn leaf(&mut self, mut value: Tensor<T>) -> Var {
        value.grad = None;
        let needs_grad = value.requires_grad;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value.with_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward pass, if the node is a leaf that
    /// requires one.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros([0]))
    }

    /// Drop gradient slots so `backward` may run again.
    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.grad = None;
        }
        self.differentiated = false;
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// 2-D convolution over `[N, C, H, W]` with kernel `[O, C, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || stride == 0 {
            return Err(shape_err("conv2d", &xs, &ws));
        }
        if xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[3] {
            return Err(shape_err("conv2d", &xs, &ws));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(shape_err("conv2d", &ws, self.shape(b)));
            }
        }
        let geom = kernels::ConvGeom::new(&xs, &ws, stride, pad);
        let bias = b.map(|b| self.value(b).data());
        let out = kernels::conv2d_forward(&geom, self.value(x).data(), self.value(w).data(), bias);
        let value = Tensor::new(geom.out_shape(), out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("conv2d", value, Op::Conv2d { x, w, b, stride, pad }, &inputs)
    }

    /// `x W^T + b` with `x: [N, in]`, `W: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(shape_err("linear", &xs, &ws));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(shape_err("linear", &ws, self.shape(b)));
            }
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let mut y = vec![T::zero(); n * dout];
        T::gemm(
            n,
            din,
            dout,
            self.value(x).data(),
            (din as isize, 1),
            self.value(w).data(),
            (1, din as isize),
            T::zero(),
            &mut y,
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in y.chunks_mut(dout) {
                for (v, &bb) in row.iter_mut().zip(bias) {
                    *v = *v + bb;
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("linear", Tensor::new([n, dout], y)?, Op::Linear { x, w, b }, &inputs)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v * kernels::sigmoid(v)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("silu", value, Op::Silu(x), &[x])
    }

    /// Per-sample, per-channel normalisation over the spatial extent with a
    /// learned affine (`gamma`, `beta` of shape `[C]`).
    pub fn channel_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(shape_err("channel_norm", &xs, self.shape(gamma)));
        }
        let c = xs[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err("channel_norm", &xs, self.shape(gamma)));
        }
        let hw = xs[2] * xs[3];
        let (xhat, inv_std) = kernels::norm_forward(self.value(x).data(), hw);
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut y = xhat.clone();
        for (i, plane) in y.chunks_mut(hw).enumerate() {
            let ch = i % c;
            for v in plane {
                *v = *v * g[ch] + bt[ch];
            }
        }
        let value = Tensor::new(xs, y)?;
        self.push(
            "channel_norm",
            value,
            Op::ChannelNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    fn zip_same(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(name, av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("add", a, b, |p, q| p + q)?;
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("sub", a, b, |p, q| p - q)?;
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("mul", a, b, |p, q| p * q)?;
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        let k = T::of(k);
        let xv = self.value(x);
        let v = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&p| p * k).collect())?;
        self.push("scale", v, Op::Scale(x, k), &[x])
    }

    /// `x[n, c, :, :] + bias[n, c]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 4 || bs != [xs[0], xs[1]] {
            return Err(shape_err("add_channel_bias", &xs, &bs));
        }
        let hw = xs[2] * xs[3];
        let bias_v = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for (plane, &bb) in data.chunks_mut(hw).zip(bias_v) {
            for v in plane {
                *v = *v + bb;
            }
        }
        let value = Tensor::new(xs, data)?;
        self.push("add_channel_bias", value, Op::AddChannelBias { x, bias }, &[x, bias])
    }

    /// Kernel `[O, I, kh, kw]` with every input-channel slice `i` scaled by `m[i]`.
    pub fn scale_in_channels(&mut self, w: Var, m: Var) -> Result<Var> {
        let ws = self.shape(w).to_vec();
        let ms = self.shape(m).to_vec();
        if ws.len() != 4 || ms != [ws[1]] {
            return Err(shape_err("scale_in_channels", &ws, &ms));
        }
        let k = ws[2] * ws[3];
        let mv = self.value(m).data();
        let mut data = self.value(w).data().to_vec();
        for (j, slice) in data.chunks_mut(k).enumerate() {
            let s = mv[j % ws[1]];
            for v in slice {
                *v = *v * s;
            }
        }
        let value = Tensor::new(ws, data)?;
        self.push("scale_in_channels", value, Op::ScaleInChannels { w, m }, &[w, m])
    }

    /// Channel concatenation of two `[N, C, H, W]` tensors.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        if as_.len() != 4 || bs.len() != 4 || as_[0] != bs[0] || as_[2..] != bs[2..] {
            return Err(shape_err("concat", &as_, &bs));
        }
        let hw = as_[2] * as_[3];
        let (ca, cb) = (as_[1] * hw, bs[1] * hw);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for n in 0..as_[0] {
            data.extend_from_slice(&av[n * ca..(n + 1) * ca]);
            data.extend_from_slice(&bv[n * cb..(n + 1) * cb]);
        }
        let value = Tensor::new([as_[0], as_[1] + bs[1], as_[2], as_[3]], data)?;
        self.push("concat", value, Op::Concat(a, b), &[a, b])
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(shape_err("upsample_nearest2x", &xs, &[]));
        }
        let (h, w) = (xs[2], xs[3]);
        let src = self.value(x).data();
        let mut data = vec![T::zero(); src.len() * 4];
        for (p, plane) in src.chunks(h * w).enumerate() {
            let dst = &mut data[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = plane[(y / 2) * w + xx / 2];
                }
            }
        }
        let value = Tensor::new([xs[0], xs[1], 2 * h, 2 * w], data)?;
        self.push("upsample_nearest2x", value, Op::Upsample2x(x), &[x])
    }

    pub fn avgpool2x(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[2] % 2 != 0 || xs[3] % 2 != 0 {
            return Err(shape_err("avgpool2x", &xs, &[]));
        }
        let (h, w) = (xs[2], xs[3]);
        let (ho, wo) = (h / 2, w / 2);
        let quarter = T::of(0.25);
        let src = self.value(x).data();
        let mut data = vec![T::zero(); src.len() / 4];
        for (p, plane) in src.chunks(h * w).enumerate() {
            let dst = &mut data[p * ho * wo..(p + 1) * ho * wo];
            for y in 0..ho {
                for xx in 0..wo {
                    let s = plane[2 * y * w + 2 * xx]
                        + plane[2 * y * w + 2 * xx + 1]
                        + plane[(2 * y + 1) * w + 2 * xx]
                        + plane[(2 * y + 1) * w + 2 * xx + 1];
                    dst[y * wo + xx] = s * quarter;
                }
            }
        }
        let value = Tensor::new([xs[0], xs[1], ho, wo], data)?;
        self.push("avgpool2x", value, Op::AvgPool2x(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().with_grad(false).reshape(shape.to_vec())?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Mean squared error, a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() || av.numel() == 0 {
            return Err(shape_err("mse", av.shape(), bv.shape()));
        }
        let n = T::of(av.numel() as f64);
        let s: T = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&p, &q)| (p - q) * (p - q))
            .sum();
        self.push("mse", Tensor::scalar(s / n), Op::Mse(a, b), &[a, b])
    }

    /// Reverse accumulation from a scalar `loss`. Leaves that require a
    /// gradient but are not reachable from `loss` get an all-zero gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.differentiated {
            return Err(Error::BackwardTwice);
        }
        let ls = self.value(loss).shape().to_vec();
        if self.value(loss).numel() != 1 {
            return Err(Error::NotScalar(ls));
        }
        self.differentiated = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.vjp(i, &g, &mut grads);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad {
                node.value.grad = Some(g.unwrap_or_else(|| vec![T::zero(); node.value.numel()]));
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn vjp(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        macro_rules! slot {
            ($v:expr) => {{
                let v: Var = $v;
                let n = self.nodes[v.0].value.numel();
                grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let geom = kernels::ConvGeom::new(self.shape(*x), self.shape(*w), *stride, *pad);
                if let Some(b) = b {
                    if self.wants(*b) {
                        kernels::conv2d_bias_grad(&geom, g, slot!(*b));
                    }
                }
                if self.wants(*w) {
                    kernels::conv2d_weight_grad(&geom, val(*x), g, slot!(*w));
                }
                if self.wants(*x) {
                    kernels::conv2d_input_grad(&geom, val(*w), g, slot!(*x));
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let (n, din) = (xs[0], xs[1]);
                let dout = self.shape(*w)[0];
                if let Some(b) = b {
                    if self.wants(*b) {
                        let db = slot!(*b);
                        for row in g.chunks(dout) {
                            for (d, &gv) in db.iter_mut().zip(row) {
                                *d = *d + gv;
                            }
                        }
                    }
                }
                if self.wants(*w) {
                    let dw = slot!(*w);
                    T::gemm(dout, n, din, g, (1, dout as isize), val(*x), (din as isize, 1), T::one(), dw);
                }
                if self.wants(*x) {
                    let dx = slot!(*x);
                    T::gemm(n, dout, din, g, (dout as isize, 1), val(*w), (din as isize, 1), T::one(), dx);
                }
            }
            Op::Silu(x) => {
                let dx = slot!(*x);
                for ((d, &xv), &gv) in dx.iter_mut().zip(val(*x)).zip(g) {
                    let s = kernels::sigmoid(xv);
                    *d = *d + gv * s * (T::one() + xv * (T::one() - s));
                }
            }
            Op::ChannelNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let xs = self.shape(*x);
                let c = xs[1];
                let hw = xs[2] * xs[3];
                let gm = val(*gamma);
                if self.wants(*gamma) {
                    let dg = slot!(*gamma);
                    for (p, (gp, xp)) in g.chunks(hw).zip(xhat.chunks(hw)).enumerate() {
                        let s: T = gp.iter().zip(xp).map(|(&a, &b)| a * b).sum();
                        dg[p % c] = dg[p % c] + s;
                    }
                }
                if self.wants(*beta) {
                    let db = slot!(*beta);
                    for (p, gp) in g.chunks(hw).enumerate() {
                        let s: T = gp.iter().copied().sum();
                        db[p % c] = db[p % c] + s;
                    }
                }
                if self.wants(*x) {
                    let dx = slot!(*x);
                    kernels::norm_input_grad(g, xhat, inv_std, gm, c, hw, dx);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        let d = slot!(v);
                        for (dd, &gv) in d.iter_mut().zip(g) {
                            *dd = *dd + gv;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    let d = slot!(*a);
                    for (dd, &gv) in d.iter_mut().zip(g) {
                        *dd = *dd + gv;
                    }
                }
                if self.wants(*b) {
                    let d = slot!(*b);
                    for (dd, &gv) in d.iter_mut().zip(g) {
                        *dd = *dd - gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let other = val(*b);
                    let d = slot!(*a);
                    for ((dd, &gv), &o) in d.iter_mut().zip(g).zip(other) {
                        *dd = *dd + gv * o;
                    }
                }
                if self.wants(*b) {
                    let other = val(*a);
                    let d = slot!(*b);
                    for ((dd, &gv), &o) in d.iter_mut().zip(g).zip(other) {
                        *dd = *dd + gv * o;
                    }
                }
            }
            Op::Scale(x, k) => {
                let d = slot!(*x);
                for (dd, &gv) in d.iter_mut().zip(g) {
                    *dd = *dd + gv * *k;
                }
            }
            Op::AddChannelBias { x, bias } => {
                let hw: usize = self.shape(*x)[2..].iter().product();
                if self.wants(*x) {
                    let d = slot!(*x);
                    for (dd, &gv) in d.iter_mut().zip(g) {
                        *dd = *dd + gv;
                    }
                }
                if self.wants(*bias) {
                    let d = slot!(*bias);
                    for (p, gp) in g.chunks(hw).enumerate() {
                        let s: T = gp.iter().copied().sum();
                        d[p] = d[p] + s;
                    }
                }
            }
            Op::ScaleInChannels { w, m } => {
                let ws = self.shape(*w);
                let (cin, k) = (ws[1], ws[2] * ws[3]);
                let mv = val(*m);
                if self.wants(*w) {
                    let d = slot!(*w);
                    for (j, (dd, gg)) in d.chunks_mut(k).zip(g.chunks(k)).enumerate() {
                        let s = mv[j % cin];
                        for (a, &b) in dd.iter_mut().zip(gg) {
                            *a = *a + b * s;
                        }
                    }
                }
                if self.wants(*m) {
                    let wv = val(*w);
                    let d = slot!(*m);
                    for (j, (wc, gg)) in wv.chunks(k).zip(g.chunks(k)).enumerate() {
                        let s: T = wc.iter().zip(gg).map(|(&a, &b)| a * b).sum();
                        d[j % cin] = d[j % cin] + s;
                    }
                }
            }
            Op::Concat(a, b) => {
                let as_ = self.shape(*a);
                let bs = self.shape(*b);
                let hw = as_[2] * as_[3];
                let (ca, cb) = (as_[1] * hw, bs[1] * hw);
                if self.wants(*a) {
                    let d = slot!(*a);
                    for n in 0..as_[0] {
                        let src = &g[n * (ca + cb)..n * (ca + cb) + ca];
                        for (dd, &gv) in d[n * ca..(n + 1) * ca].iter_mut().zip(src) {
                            *dd = *dd + gv;
                        }
                    }
                }
                if self.wants(*b) {
                    let d = slot!(*b);
                    for n in 0..as_[0] {
                        let src = &g[n * (ca + cb) + ca..(n + 1) * (ca + cb)];
                        for (dd, &gv) in d[n * cb..(n + 1) * cb].iter_mut().zip(src) {
                            *dd = *dd + gv;
                        }
                    }
                }
            }
            Op::Upsample2x(x) => {
                let xs = self.shape(*x);
                let (h, w) = (xs[2], xs[3]);
                let d = slot!(*x);
                for (p, plane) in d.chunks_mut(h * w).enumerate() {
                    let src = &g[p * 4 * h * w..(p + 1) * 4 * h * w];
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            let t = &mut plane[(y / 2) * w + xx / 2];
                            *t = *t + src[y * 2 * w + xx];
                        }
                    }
                }
            }
            Op::AvgPool2x(x) => {
                let xs = self.shape(*x);
                let (h, w) = (xs[2], xs[3]);
                let (ho, wo) = (h / 2, w / 2);
                let quarter = T::of(0.25);
                let d = slot!(*x);
                for (p, plane) in d.chunks_mut(h * w).enumerate() {
                    let src = &g[p * ho * wo..(p + 1) * ho * wo];
                    for y in 0..h {
                        for xx in 0..w {
                            let t = &mut plane[y * w + xx];
                            *t = *t + src[(y / 2) * wo + xx / 2] * quarter;
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                let d = slot!(*x);
                for (dd, &gv) in d.iter_mut().zip(g) {
                    *dd = *dd + gv;
                }
            }
            Op::Sum(x) => {
                let d = slot!(*x);
                for dd in d.iter_mut() {
                    *dd = *dd + g[0];
                }
            }
            Op::Mse(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let k = g[0] * T::of(2.0 / av.len() as f64);
                if self.wants(*a) {
                    let d = slot!(*a);
                    for ((dd, &p), &q) in d.iter_mut().zip(av).zip(bv) {
                        *dd = *dd + k * (p - q);
                    }
                }
                if self.wants(*b) {
                    let d = slot!(*b);
                    for ((dd, &p), &q) in d.iter_mut().zip(av).zip(bv) {
                        *dd = *dd - k * (p - q);
                    }
                }
            }
        }
    }
}
