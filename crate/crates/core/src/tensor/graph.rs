use super::kernels::{self, ConvGeometry};
use super::{Real, Shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Option<Var>, geom: ConvGeometry },
    AvgPool { input: Var, k: usize, stride: usize },
    Upsample { input: Var },
    Concat(Vec<Var>),
    Slice { input: Var, start: usize },
    Reshape(Var),
    RepeatChannels(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Abs(Var),
    ClampMin(Var, T),
    Blend { x: Var, y: Var, w: Var },
    Unblend { z: Var, y: Var, w: Var, floor: T },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// A tape of tensor operations, in the order they were applied.
///
/// Nodes are appended as operations run, so every node's inputs precede it
/// and a single reverse sweep visits each node once.
#[derive(Debug)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    div_eps: T,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Output shape of a pointwise binary op, allowing one scalar operand.
fn broadcast_shape(op: &'static str, a: Shape, b: Shape) -> Result<Shape> {
    if a == b || b.is_scalar() {
        Ok(a)
    } else if a.is_scalar() {
        Ok(b)
    } else {
        Err(Error::shape(op, format!("{a} vs {b}")))
    }
}

fn zip_broadcast<T: Real>(a: &Tensor<T>, b: &Tensor<T>, shape: Shape, f: impl Fn(T, T) -> T) -> Vec<T> {
    let (ad, bd) = (a.data(), b.data());
    (0..shape.len())
        .map(|i| {
            let x = if ad.len() == 1 { ad[0] } else { ad[i] };
            let y = if bd.len() == 1 { bd[0] } else { bd[i] };
            f(x, y)
        })
        .collect()
}

/// Flat index into a blend weight that is either full-size or one channel.
fn weight_index(s: Shape, wc: usize, i: usize) -> usize {
    if wc == s.c {
        i
    } else {
        let plane = s.plane();
        (i / (s.c * plane)) * plane + i % plane
    }
}

/// Reduce a full-size gradient onto an operand that may have been a broadcast scalar.
fn unbroadcast<T: Real>(grad: Vec<T>, target: Shape) -> Tensor<T> {
    if target.is_scalar() && grad.len() != 1 {
        Tensor::scalar(grad.iter().copied().sum())
    } else {
        Tensor::from_vec(target, grad).expect("gradient shape")
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), div_eps: T::of(1e-12) }
    }

    /// Denominators with magnitude below `eps` make [`Graph::div`] fail.
    pub fn with_div_eps(mut self, eps: T) -> Self {
        self.div_eps = eps;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a leaf. Leaves with `requires_grad` receive gradients on [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`Graph::backward`] loss with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = self.value(x).map(f);
        self.push(value, op, &[x])
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<Var> {
        let s = self.shape(input);
        let ws = self.shape(weight);
        if ws.h != ws.w || ws.h == 0 {
            return Err(Error::shape("conv2d", format!("kernel must be square and non-empty, got {ws}")));
        }
        if ws.c != s.c {
            return Err(Error::shape("conv2d", format!("weight {ws} expects {} input channels, got {s}", ws.c)));
        }
        if stride == 0 || dilation == 0 {
            return Err(Error::InvalidArgument(format!("conv2d stride {stride} / dilation {dilation} must be ≥ 1")));
        }
        if let Some(b) = bias {
            let bs = self.shape(b);
            if bs.len() != ws.n {
                return Err(Error::shape("conv2d", format!("bias {bs} for {} output channels", ws.n)));
            }
        }
        let k = ws.h;
        let (h_out, w_out) = match (
            ConvGeometry::out_extent(s.h, k, stride, padding, dilation),
            ConvGeometry::out_extent(s.w, k, stride, padding, dilation),
        ) {
            (Some(h), Some(w)) => (h, w),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("non-positive output size for input {s}, kernel {k}, padding {padding}, dilation {dilation}"),
                ))
            }
        };
        let geom = ConvGeometry { c_in: s.c, h: s.h, w: s.w, c_out: ws.n, k, stride, padding, dilation, h_out, w_out };
        let data = kernels::conv2d_forward(
            &geom,
            s.n,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let value = Tensor::from_vec([s.n, ws.n, h_out, w_out], data)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(value, Op::Conv2d { input, weight, bias, geom }, &inputs))
    }

    pub fn avg_pool2d(&mut self, input: Var, k: usize, stride: usize) -> Result<Var> {
        let s = self.shape(input);
        if k == 0 || stride == 0 {
            return Err(Error::InvalidArgument(format!("avg_pool2d k {k} / stride {stride} must be ≥ 1")));
        }
        if s.h < k || s.w < k {
            return Err(Error::shape("avg_pool2d", format!("window {k} larger than input {s}")));
        }
        let (h_out, w_out) = ((s.h - k) / stride + 1, (s.w - k) / stride + 1);
        let data = kernels::avg_pool_forward(s, k, stride, h_out, w_out, self.value(input).data());
        let value = Tensor::from_vec([s.n, s.c, h_out, w_out], data)?;
        Ok(self.push(value, Op::AvgPool { input, k, stride }, &[input]))
    }

    /// Bilinear resampling with half-pixel centers (align-corners = false).
    pub fn upsample_bilinear(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(input);
        if out_h == 0 || out_w == 0 || s.h == 0 || s.w == 0 {
            return Err(Error::shape("upsample_bilinear", format!("{s} to {out_h}×{out_w}")));
        }
        let data = kernels::upsample_forward(s, out_h, out_w, self.value(input).data());
        let value = Tensor::from_vec([s.n, s.c, out_h, out_w], data)?;
        Ok(self.push(value, Op::Upsample { input }, &[input]))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let s0 = self.shape(first);
        let mut c = 0;
        for &p in parts {
            let s = self.shape(p);
            if (s.n, s.h, s.w) != (s0.n, s0.h, s0.w) {
                return Err(Error::shape("concat_channels", format!("{s} vs {s0}")));
            }
            c += s.c;
        }
        let plane = s0.plane();
        let mut data = Vec::with_capacity(s0.n * c * plane);
        for n in 0..s0.n {
            for &p in parts {
                let v = self.value(p);
                let per = v.shape().c * plane;
                data.extend_from_slice(&v.data()[n * per..(n + 1) * per]);
            }
        }
        let value = Tensor::from_vec([s0.n, c, s0.h, s0.w], data)?;
        Ok(self.push(value, Op::Concat(parts.to_vec()), parts))
    }

    /// Channels `start..start + len` of `input`.
    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(input);
        if start + len > s.c {
            return Err(Error::shape("slice_channels", format!("{start}..{} of {s}", start + len)));
        }
        let plane = s.plane();
        let src = self.value(input).data();
        let mut data = Vec::with_capacity(s.n * len * plane);
        for n in 0..s.n {
            let base = (n * s.c + start) * plane;
            data.extend_from_slice(&src[base..base + len * plane]);
        }
        let value = Tensor::from_vec([s.n, len, s.h, s.w], data)?;
        Ok(self.push(value, Op::Slice { input, start }, &[input]))
    }

    pub fn reshape(&mut self, input: Var, shape: impl Into<Shape>) -> Result<Var> {
        let value = self.value(input).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(input), &[input]))
    }

    /// Tile a tensor `times` along the channel axis, e.g. a 1-channel map to 3 channels.
    pub fn repeat_channels(&mut self, input: Var, times: usize) -> Result<Var> {
        if times == 0 {
            return Err(Error::InvalidArgument("repeat_channels by zero".into()));
        }
        let s = self.shape(input);
        let per = s.c * s.plane();
        let src = self.value(input).data();
        let mut data = Vec::with_capacity(s.len() * times);
        for n in 0..s.n {
            for _ in 0..times {
                data.extend_from_slice(&src[n * per..(n + 1) * per]);
            }
        }
        let value = Tensor::from_vec([s.n, s.c * times, s.h, s.w], data)?;
        Ok(self.push(value, Op::RepeatChannels(input), &[input]))
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, node: Op<T>) -> Result<Var> {
        let shape = broadcast_shape(op, self.shape(a), self.shape(b))?;
        let data = zip_broadcast(self.value(a), self.value(b), shape, f);
        let value = Tensor::from_vec(shape, data)?;
        Ok(self.push(value, node, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let eps = self.div_eps;
        if let Some(&bad) = self.value(b).data().iter().find(|v| v.abs() < eps) {
            return Err(Error::DivisionByZero { op: "div", value: bad.as_f64(), eps: eps.as_f64() });
        }
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + s)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.unary(x, Op::Scale(x, s), |v| v * s)
    }

    /// `1 − x`, elementwise.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let neg = self.scale(x, -T::one());
        self.add_scalar(neg, T::one())
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), |v| T::one() / (T::one() + (-v).exp()))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), |v| v.exp())
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), |v| v.abs())
    }

    /// `max(x, floor)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, x: Var, floor: T) -> Var {
        self.unary(x, Op::ClampMin(x, floor), |v| if v < floor { floor } else { v })
    }

    /// Shapes for the fused blend ops: `x`/`y` equal, `w` equal or one channel.
    fn blend_shapes(&self, op: &'static str, x: Var, y: Var, w: Var) -> Result<(Shape, usize)> {
        let (xs, ys, ws) = (self.shape(x), self.shape(y), self.shape(w));
        if xs != ys {
            return Err(Error::shape(op, format!("{xs} vs {ys}")));
        }
        if ws != xs && !(ws.c == 1 && (ws.n, ws.h, ws.w) == (xs.n, xs.h, xs.w)) {
            return Err(Error::shape(op, format!("weight {ws} for {xs}")));
        }
        Ok((xs, ws.c))
    }

    /// `x·w + y·(1 − w)`, with a one-channel `w` shared by all channels.
    /// Each element is evaluated in `f64` and rounded once.
    pub fn blend(&mut self, x: Var, y: Var, w: Var) -> Result<Var> {
        let (s, wc) = self.blend_shapes("blend", x, y, w)?;
        let (xv, yv, wv) = (self.value(x).data(), self.value(y).data(), self.value(w).data());
        let data = (0..s.len())
            .map(|i| {
                let wi = wv[weight_index(s, wc, i)].as_f64();
                T::of(xv[i].as_f64() * wi + yv[i].as_f64() * (1.0 - wi))
            })
            .collect();
        let value = Tensor::from_vec(s, data)?;
        Ok(self.push(value, Op::Blend { x, y, w }, &[x, y, w]))
    }

    /// Inverse of [`Graph::blend`] in `x`: `(z − y) / max(w, floor) + y`,
    /// evaluated per element in `f64`.
    pub fn unblend(&mut self, z: Var, y: Var, w: Var, floor: T) -> Result<Var> {
        if floor <= T::zero() {
            return Err(Error::InvalidArgument(format!("unblend floor {floor} must be positive")));
        }
        let (s, wc) = self.blend_shapes("unblend", z, y, w)?;
        let (zv, yv, wv) = (self.value(z).data(), self.value(y).data(), self.value(w).data());
        let f = floor.as_f64();
        let data = (0..s.len())
            .map(|i| {
                let wi = wv[weight_index(s, wc, i)].as_f64().max(f);
                let yi = yv[i].as_f64();
                T::of((zv[i].as_f64() - yi) / wi + yi)
            })
            .collect();
        let value = Tensor::from_vec(s, data)?;
        Ok(self.push(value, Op::Unblend { z, y, w, floor }, &[z, y, w]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).mean());
        self.push(value, Op::Mean(x), &[x])
    }

    /// Fingerprint of which side of every kink (ReLU, abs, clamps) each
    /// element sits on. Two evaluations with equal fingerprints lie in the
    /// same smooth piece of the function.
    pub fn regime_signature(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut feed = |bit: bool| h = (h ^ bit as u64).wrapping_mul(0x0000_0100_0000_01b3);
        for node in &self.nodes {
            match node.op {
                Op::Relu(x) => self.value(x).data().iter().for_each(|&v| feed(v > T::zero())),
                Op::Abs(x) => self.value(x).data().iter().for_each(|&v| feed(v >= T::zero())),
                Op::ClampMin(x, floor) => self.value(x).data().iter().for_each(|&v| feed(v < floor)),
                Op::Unblend { w, floor, .. } => self.value(w).data().iter().for_each(|&v| feed(v < floor)),
                _ => {}
            }
        }
        h
    }

    /// Back-propagate from a scalar. Afterwards every `requires_grad` leaf
    /// holds its gradient (accumulated over repeated uses); intermediate
    /// gradients are released.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let s = self.shape(loss);
        if !s.is_scalar() {
            return Err(Error::shape("backward", format!("loss must be 1×1×1×1, got {s}")));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].grad = Some(grad);
                continue;
            }
            for (target, g) in self.backward_node(i, grad) {
                let node = &mut self.nodes[target.0];
                match &mut node.grad {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += *b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient contributions of node `i` to its inputs.
    fn backward_node(&self, i: usize, grad: Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut res = Vec::new();
        let pointwise = |x: Var, f: &dyn Fn(T, T, T) -> T| -> Tensor<T> {
            // f(grad, input value, output value)
            let xv = self.value(x);
            let data = grad
                .data()
                .iter()
                .zip(xv.data())
                .zip(out.data())
                .map(|((&g, &xi), &yi)| f(g, xi, yi))
                .collect();
            Tensor::from_vec(xv.shape(), data).expect("gradient shape")
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, geom } => {
                let x = self.value(*input);
                let n = x.shape().n;
                let mut gx = self.wants(*input).then(|| vec![T::zero(); x.len()]);
                let mut gw = self.wants(*weight).then(|| vec![T::zero(); self.value(*weight).len()]);
                let mut gb = bias.filter(|b| self.wants(*b)).map(|b| vec![T::zero(); self.value(b).len()]);
                kernels::conv2d_backward(
                    geom,
                    n,
                    x.data(),
                    self.value(*weight).data(),
                    grad.data(),
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                if let Some(g) = gx {
                    res.push((*input, Tensor::from_vec(x.shape(), g).expect("gradient shape")));
                }
                if let Some(g) = gw {
                    res.push((*weight, Tensor::from_vec(self.shape(*weight), g).expect("gradient shape")));
                }
                if let (Some(b), Some(g)) = (bias, gb) {
                    res.push((*b, Tensor::from_vec(self.shape(*b), g).expect("gradient shape")));
                }
            }
            Op::AvgPool { input, k, stride } => {
                let s = self.shape(*input);
                let os = out.shape();
                let mut g = vec![T::zero(); s.len()];
                kernels::avg_pool_backward(s, *k, *stride, os.h, os.w, grad.data(), &mut g);
                res.push((*input, Tensor::from_vec(s, g).expect("gradient shape")));
            }
            Op::Upsample { input } => {
                let s = self.shape(*input);
                let os = out.shape();
                let mut g = vec![T::zero(); s.len()];
                kernels::upsample_backward(s, os.h, os.w, grad.data(), &mut g);
                res.push((*input, Tensor::from_vec(s, g).expect("gradient shape")));
            }
            Op::Concat(parts) => {
                let os = out.shape();
                let plane = os.plane();
                let mut offset = 0;
                for &p in parts {
                    let ps = self.shape(p);
                    if self.wants(p) {
                        let mut g = Vec::with_capacity(ps.len());
                        for n in 0..os.n {
                            let base = (n * os.c + offset) * plane;
                            g.extend_from_slice(&grad.data()[base..base + ps.c * plane]);
                        }
                        res.push((p, Tensor::from_vec(ps, g).expect("gradient shape")));
                    }
                    offset += ps.c;
                }
            }
            Op::Slice { input, start } => {
                let s = self.shape(*input);
                let len = out.shape().c;
                let plane = s.plane();
                let mut g = vec![T::zero(); s.len()];
                for n in 0..s.n {
                    let base = (n * s.c + start) * plane;
                    g[base..base + len * plane].copy_from_slice(&grad.data()[n * len * plane..(n + 1) * len * plane]);
                }
                res.push((*input, Tensor::from_vec(s, g).expect("gradient shape")));
            }
            Op::Reshape(x) => {
                res.push((*x, grad.reshape(self.shape(*x)).expect("gradient shape")));
            }
            Op::RepeatChannels(x) => {
                let s = self.shape(*x);
                let per = s.c * s.plane();
                let times = out.shape().c / s.c;
                let mut g = vec![T::zero(); s.len()];
                for n in 0..s.n {
                    for r in 0..times {
                        let src = &grad.data()[(n * times + r) * per..(n * times + r + 1) * per];
                        for (d, &v) in g[n * per..(n + 1) * per].iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                }
                res.push((*x, Tensor::from_vec(s, g).expect("gradient shape")));
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                if self.wants(*a) {
                    res.push((*a, unbroadcast(grad.data().to_vec(), self.shape(*a))));
                }
                if self.wants(*b) {
                    res.push((*b, unbroadcast(grad.data().iter().map(|&g| g * sign).collect(), self.shape(*b))));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let g = zip_broadcast(&grad, bv, out.shape(), |g, y| g * y);
                    res.push((*a, unbroadcast(g, av.shape())));
                }
                if self.wants(*b) {
                    let g = zip_broadcast(&grad, av, out.shape(), |g, x| g * x);
                    res.push((*b, unbroadcast(g, bv.shape())));
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let g = zip_broadcast(&grad, bv, out.shape(), |g, y| g / y);
                    res.push((*a, unbroadcast(g, av.shape())));
                }
                if self.wants(*b) {
                    // d(a/b)/db = −(a/b)/b
                    let q = zip_broadcast(out, bv, out.shape(), |z, y| z / y);
                    let g = grad.data().iter().zip(&q).map(|(&g, &q)| -g * q).collect();
                    res.push((*b, unbroadcast(g, bv.shape())));
                }
            }
            Op::AddScalar(x) => res.push((*x, grad)),
            Op::Scale(x, s) => {
                let s = *s;
                res.push((*x, grad.map(|g| g * s)));
            }
            Op::Relu(x) => res.push((*x, pointwise(*x, &|g, xi, _| if xi > T::zero() { g } else { T::zero() }))),
            Op::Sigmoid(x) => res.push((*x, pointwise(*x, &|g, _, y| g * y * (T::one() - y)))),
            Op::Exp(x) => res.push((*x, pointwise(*x, &|g, _, y| g * y))),
            Op::Abs(x) => res.push((
                *x,
                pointwise(*x, &|g, xi, _| {
                    if xi > T::zero() {
                        g
                    } else if xi < T::zero() {
                        -g
                    } else {
                        T::zero()
                    }
                }),
            )),
            Op::ClampMin(x, floor) => {
                let floor = *floor;
                res.push((*x, pointwise(*x, &|g, xi, _| if xi < floor { T::zero() } else { g })));
            }
            Op::Blend { x, y, w } => {
                let s = out.shape();
                let (xv, yv, wv) = (self.value(*x), self.value(*y), self.value(*w));
                let wc = wv.shape().c;
                let gd = grad.data();
                let wi = |i: usize| wv.data()[weight_index(s, wc, i)];
                if self.wants(*x) {
                    let g = (0..s.len()).map(|i| gd[i] * wi(i)).collect();
                    res.push((*x, Tensor::from_vec(s, g).expect("gradient shape")));
                }
                if self.wants(*y) {
                    let g = (0..s.len()).map(|i| gd[i] * (T::one() - wi(i))).collect();
                    res.push((*y, Tensor::from_vec(s, g).expect("gradient shape")));
                }
                if self.wants(*w) {
                    let mut g = vec![T::zero(); wv.len()];
                    for i in 0..s.len() {
                        g[weight_index(s, wc, i)] += gd[i] * (xv.data()[i] - yv.data()[i]);
                    }
                    res.push((*w, Tensor::from_vec(wv.shape(), g).expect("gradient shape")));
                }
            }
            Op::Unblend { z, y, w, floor } => {
                let s = out.shape();
                let (zv, yv, wv) = (self.value(*z), self.value(*y), self.value(*w));
                let wc = wv.shape().c;
                let gd = grad.data();
                let floor = *floor;
                let denom = |i: usize| wv.data()[weight_index(s, wc, i)].max(floor);
                if self.wants(*z) {
                    let g = (0..s.len()).map(|i| gd[i] / denom(i)).collect();
                    res.push((*z, Tensor::from_vec(s, g).expect("gradient shape")));
                }
                if self.wants(*y) {
                    let g = (0..s.len()).map(|i| gd[i] * (T::one() - T::one() / denom(i))).collect();
                    res.push((*y, Tensor::from_vec(s, g).expect("gradient shape")));
                }
                if self.wants(*w) {
                    let mut g = vec![T::zero(); wv.len()];
                    for (i, &gi) in gd.iter().enumerate() {
                        let k = weight_index(s, wc, i);
                        if wv.data()[k] >= floor {
                            let d = wv.data()[k];
                            g[k] -= gi * (zv.data()[i] - yv.data()[i]) / (d * d);
                        }
                    }
                    res.push((*w, Tensor::from_vec(wv.shape(), g).expect("gradient shape")));
                }
            }
            Op::Sum(x) => {
                let g = grad.item();
                res.push((*x, Tensor::full(self.shape(*x), g)));
            }
            Op::Mean(x) => {
                let s = self.shape(*x);
                let g = grad.item() / T::of(s.len() as f64);
                res.push((*x, Tensor::full(s, g)));
            }
        }
        res.retain(|(v, _)| self.wants(*v));
        res
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: [usize; 4], v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    /// Six nested loops: the textbook definition of a zero-padded convolution.
    fn conv_oracle(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        b: &[f64],
        stride: usize,
        pad: usize,
        dil: usize,
    ) -> Tensor<f64> {
        let (s, ws) = (x.shape(), w.shape());
        let k = ws.h;
        let ho = (s.h + 2 * pad - dil * (k - 1) - 1) / stride + 1;
        let wo = (s.w + 2 * pad - dil * (k - 1) - 1) / stride + 1;
        Tensor::from_fn([s.n, ws.n, ho, wo], |n, co, oy, ox| {
            let mut acc = b[co];
            for ci in 0..s.c {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * stride + ky * dil) as isize - pad as isize;
                        let ix = (ox * stride + kx * dil) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < s.h && (ix as usize) < s.w {
                            acc += w.at(co, ci, ky, kx) * x.at(n, ci, iy as usize, ix as usize);
                        }
                    }
                }
            }
            acc
        })
    }

    fn random(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut rng = crate::rng::SplitMix64::new(seed);
        Tensor::from_fn(shape, |_, _, _, _| rng.uniform(-1.0, 1.0))
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t([1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
        let w = g.constant(t([1, 1, 1, 1], &[1.0]));
        let b = g.constant(t([1, 1, 1, 1], &[0.0]));
        let y = g.conv2d(x, w, Some(b), 1, 0, 1).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn conv_dilated_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full([1, 1, 5, 5], 1.0));
        let w = g.constant(Tensor::full([1, 1, 3, 3], 1.0));
        let y = g.conv2d(x, w, None, 1, 0, 2).unwrap();
        assert_eq!(g.shape(y), Shape::new(1, 1, 1, 1));
        assert_eq!(g.value(y).item(), 9.0);
    }

    #[test]
    fn conv_matches_loop_oracle() {
        let x = random([2, 3, 8, 8], 1);
        let w = random([4, 3, 3, 3], 2);
        let b = [0.1, -0.2, 0.3, 0.0];
        for (stride, pad, dil) in [(1, 1, 1), (2, 1, 1), (1, 2, 2), (1, 0, 3), (2, 3, 2)] {
            let want = conv_oracle(&x, &w, &b, stride, pad, dil);
            let mut g = Graph::<f64>::new();
            let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
            let bv = g.constant(t([4, 1, 1, 1], &b));
            let y = g.conv2d(xv, wv, Some(bv), stride, pad, dil).unwrap();
            let got = g.value(y);
            assert_eq!(got.shape(), want.shape());
            for (a, e) in got.data().iter().zip(want.data()) {
                assert!((a - e).abs() <= 1e-5 * e.abs().max(1.0), "{a} vs {e}");
            }
        }
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros([1, 2, 4, 4]));
        let w = g.constant(Tensor::zeros([1, 3, 3, 3]));
        assert!(matches!(g.conv2d(x, w, None, 1, 1, 1), Err(Error::Shape { .. })));
        let w = g.constant(Tensor::zeros([1, 2, 3, 3]));
        assert!(g.conv2d(x, w, None, 1, 0, 3).is_err());
        assert!(g.conv2d(x, w, None, 0, 1, 1).is_err());
    }

    #[test]
    fn avg_pool_mean_and_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t([1, 1, 2, 2], &[1., 2., 3., 4.]));
        let y = g.avg_pool2d(x, 2, 2).unwrap();
        assert_eq!(g.value(y).data(), &[2.5]);
        assert!(g.avg_pool2d(x, 3, 3).is_err());
        let c = g.constant(Tensor::full([1, 2, 8, 8], 0.375));
        let y = g.avg_pool2d(c, 4, 4).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.375));
    }

    #[test]
    fn avg_pool_matches_loop_oracle() {
        let x = random([1, 2, 8, 8], 5);
        let mut g = Graph::<f64>::new();
        let xv = g.constant(x.clone());
        let y = g.avg_pool2d(xv, 4, 4).unwrap();
        let want = Tensor::from_fn([1, 2, 2, 2], |n, c, oy, ox| {
            let mut s = 0.0;
            for dy in 0..4 {
                for dx in 0..4 {
                    s += x.at(n, c, oy * 4 + dy, ox * 4 + dx);
                }
            }
            s / 16.0
        });
        assert!(g.value(y).max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn upsample_cases() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(random([1, 2, 5, 3], 4));
        let same = g.upsample_bilinear(x, 5, 3).unwrap();
        assert_eq!(g.value(same), g.value(x));

        let v = g.constant(t([1, 1, 1, 1], &[0.7]));
        let up = g.upsample_bilinear(v, 4, 4).unwrap();
        assert!(g.value(up).data().iter().all(|&a| a == 0.7));

        // Half-pixel centres: output coordinate o maps to source (o + 0.5)·2/3 − 0.5,
        // i.e. −1/6 (clamped to 0), 1/2, 7/6 (clamped to the last column).
        let x = g.constant(t([1, 1, 2, 2], &[0., 1., 0., 1.]));
        let y = g.upsample_bilinear(x, 3, 3).unwrap();
        assert_eq!(g.value(y).data(), &[0., 0.5, 1., 0., 0.5, 1., 0., 0.5, 1.]);
    }

    #[test]
    fn concat_shapes_and_gradient_routing() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(random([1, 2, 4, 4], 1), true);
        let b = g.leaf(random([1, 3, 4, 4], 2), true);
        let c = g.concat_channels(&[a, b]).unwrap();
        assert_eq!(g.shape(c), Shape::new(1, 5, 4, 4));
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert!(g.grad(a).unwrap().data().iter().all(|&v| v == 1.0));
        assert!(g.grad(b).unwrap().data().iter().all(|&v| v == 1.0));

        let empty = g.constant(Tensor::zeros([1, 0, 4, 4]));
        let same = g.concat_channels(&[a, empty]).unwrap();
        assert_eq!(g.value(same), g.value(a));

        let bad = g.constant(Tensor::zeros([1, 1, 3, 4]));
        assert!(g.concat_channels(&[a, bad]).is_err());
    }

    #[test]
    fn pointwise_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t([1, 1, 1, 3], &[-1.0, 0.0, 2.0]));
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let s = g.sigmoid(x);
        assert_eq!(g.value(s).data()[1], 0.5);
    }

    #[test]
    fn binary_ops_reject_mismatch_but_broadcast_scalars() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::full([1, 2, 2, 2], 2.0));
        let b = g.constant(Tensor::full([1, 1, 2, 2], 1.0));
        assert!(g.add(a, b).is_err());
        let s = g.constant(Tensor::scalar(3.0));
        let y = g.mul(a, s).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 6.0));
        let y = g.sub(s, a).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn div_rejects_tiny_denominator() {
        let mut g = Graph::<f64>::new().with_div_eps(1e-6);
        let a = g.constant(Tensor::full([1, 1, 1, 2], 1.0));
        let b = g.constant(t([1, 1, 1, 2], &[1.0, 1e-9]));
        assert!(matches!(g.div(a, b), Err(Error::DivisionByZero { .. })));
    }

    #[test]
    fn backward_sum_and_square() {
        let mut g = Graph::<f64>::new();
        let xv = random([1, 2, 3, 3], 8);
        let x = g.leaf(xv.clone(), true);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));

        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        let want = xv.map(|v| 2.0 * v);
        assert!(g.grad(x).unwrap().max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros([1, 1, 2, 2]), true);
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn gradients_accumulate_over_reuse() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full([1, 1, 2, 2], 1.5), true);
        let y = g.add(x, x).unwrap();
        let y = g.add(y, x).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn slice_undoes_concat() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(random([2, 2, 3, 3], 1));
        let b = g.constant(random([2, 3, 3, 3], 2));
        let c = g.concat_channels(&[a, b]).unwrap();
        let a2 = g.slice_channels(c, 0, 2).unwrap();
        let b2 = g.slice_channels(c, 2, 3).unwrap();
        assert_eq!(g.value(a2), g.value(a));
        assert_eq!(g.value(b2), g.value(b));
    }

    #[test]
    fn blend_gradients() {
        use crate::tensor::grad_check;
        let mut rng = crate::rng::SplitMix64::new(3);
        let w = Tensor::from_fn([2, 1, 3, 3], |_, _, _, _| rng.uniform(0.02, 1.0));
        let inputs = [random([2, 3, 3, 3], 1), random([2, 3, 3, 3], 2), w];
        let r = grad_check(
            |g, v| {
                let z = g.blend(v[0], v[1], v[2])?;
                let z = g.mul(z, z)?;
                Ok(g.sum(z))
            },
            &inputs,
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        // Weighted sum keeps the loss linear in z and y, so only the 1/w
        // curvature contributes truncation error.
        let weights = random([2, 3, 3, 3], 9);
        let r = grad_check(
            |g, v| {
                let z = g.unblend(v[0], v[1], v[2], 0.05)?;
                let c = g.constant(weights.clone());
                let z = g.mul(z, c)?;
                Ok(g.sum(z))
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn blend_rejects_mismatched_weight() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros([1, 3, 2, 2]));
        let w = g.constant(Tensor::zeros([1, 2, 2, 2]));
        assert!(g.blend(x, x, w).is_err());
        assert!(g.unblend(x, x, w, 0.1).is_err());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::full([1, 1, 2, 2], 2.0));
        let x = g.leaf(Tensor::full([1, 1, 2, 2], 3.0), true);
        let y = g.mul(c, x).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 2.0));
    }
}
