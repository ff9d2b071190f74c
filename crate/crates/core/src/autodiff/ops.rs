use rand::Rng;

use super::{Backward, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{c, strides, Real, Tensor};

// ---------------------------------------------------------------------------
// Broadcasting helpers

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every linear index of `out`, the linear index of the broadcast source.
pub(crate) fn index_map(src: &[usize], out: &[usize]) -> Vec<usize> {
    let pad = out.len() - src.len();
    let src_strides = strides(src);
    let eff: Vec<usize> = (0..out.len())
        .map(|i| {
            if i < pad || src[i - pad] == 1 {
                0
            } else {
                src_strides[i - pad]
            }
        })
        .collect();
    let n: usize = out.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; out.len()];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for d in (0..out.len()).rev() {
            idx[d] += 1;
            off += eff[d];
            if idx[d] < out[d] {
                break;
            }
            off -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

fn reduce_into<T: Real>(shape: &[usize], values: impl Iterator<Item = (usize, T)>) -> Tensor<T> {
    let mut t = Tensor::zeros(shape);
    let d = t.data_mut();
    for (i, v) in values {
        d[i] += v;
    }
    t
}

// ---------------------------------------------------------------------------
// Elementwise binary ops

#[derive(Clone, Copy, Debug)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

struct Binary {
    kind: BinKind,
    maps: Option<(Vec<usize>, Vec<usize>)>,
}

impl<T: Real> Backward<T> for Binary {
    fn name(&self) -> &'static str {
        match self.kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
            BinKind::Div => "div",
        }
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let g = grad.data();
        let n = g.len();
        let ia = |i: usize| self.maps.as_ref().map_or(i, |m| m.0[i]);
        let ib = |i: usize| self.maps.as_ref().map_or(i, |m| m.1[i]);
        let (ad, bd) = (a.data(), b.data());
        let (ga, gb) = match self.kind {
            BinKind::Add => (
                reduce_into(a.shape(), (0..n).map(|i| (ia(i), g[i]))),
                reduce_into(b.shape(), (0..n).map(|i| (ib(i), g[i]))),
            ),
            BinKind::Sub => (
                reduce_into(a.shape(), (0..n).map(|i| (ia(i), g[i]))),
                reduce_into(b.shape(), (0..n).map(|i| (ib(i), -g[i]))),
            ),
            BinKind::Mul => (
                reduce_into(a.shape(), (0..n).map(|i| (ia(i), g[i] * bd[ib(i)]))),
                reduce_into(b.shape(), (0..n).map(|i| (ib(i), g[i] * ad[ia(i)]))),
            ),
            BinKind::Div => (
                reduce_into(a.shape(), (0..n).map(|i| (ia(i), g[i] / bd[ib(i)]))),
                reduce_into(
                    b.shape(),
                    (0..n).map(|i| {
                        let bv = bd[ib(i)];
                        (ib(i), -g[i] * ad[ia(i)] / (bv * bv))
                    }),
                ),
            ),
        };
        Ok(vec![Some(ga), Some(gb)])
    }
}

// ---------------------------------------------------------------------------
// Elementwise unary ops

#[derive(Clone, Copy, Debug)]
enum UnaryKind<T> {
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Softplus,
    LeakyRelu(T),
    Clip(T, T),
    Scale(T),
    Offset(T),
    Square,
}

pub(crate) fn softplus<T: Real>(x: T) -> T {
    if x > c(20.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Real> UnaryKind<T> {
    fn eval(self, x: T) -> T {
        match self {
            UnaryKind::Exp => x.exp(),
            UnaryKind::Log => x.ln(),
            UnaryKind::Tanh => x.tanh(),
            UnaryKind::Sigmoid => sigmoid(x),
            UnaryKind::Softplus => softplus(x),
            UnaryKind::LeakyRelu(a) => {
                if x >= T::zero() {
                    x
                } else {
                    a * x
                }
            }
            UnaryKind::Clip(lo, hi) => x.max(lo).min(hi),
            UnaryKind::Scale(k) => k * x,
            UnaryKind::Offset(k) => x + k,
            UnaryKind::Square => x * x,
        }
    }

    fn deriv(self, x: T, y: T) -> T {
        match self {
            UnaryKind::Exp => y,
            UnaryKind::Log => T::one() / x,
            UnaryKind::Tanh => T::one() - y * y,
            UnaryKind::Sigmoid => y * (T::one() - y),
            UnaryKind::Softplus => sigmoid(x),
            UnaryKind::LeakyRelu(a) => {
                if x >= T::zero() {
                    T::one()
                } else {
                    a
                }
            }
            UnaryKind::Clip(lo, hi) => {
                if x >= lo && x <= hi {
                    T::one()
                } else {
                    T::zero()
                }
            }
            UnaryKind::Scale(k) => k,
            UnaryKind::Offset(_) => T::one(),
            UnaryKind::Square => c::<T>(2.0) * x,
        }
    }
}

struct Unary<T> {
    kind: UnaryKind<T>,
}

impl<T: Real> Backward<T> for Unary<T> {
    fn name(&self) -> &'static str {
        match self.kind {
            UnaryKind::Exp => "exp",
            UnaryKind::Log => "log",
            UnaryKind::Tanh => "tanh",
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::Softplus => "softplus",
            UnaryKind::LeakyRelu(_) => "leaky_relu",
            UnaryKind::Clip(..) => "clip",
            UnaryKind::Scale(_) => "scale",
            UnaryKind::Offset(_) => "offset",
            UnaryKind::Square => "square",
        }
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let x = inputs[0].data();
        let y = output.data();
        let data = grad
            .data()
            .iter()
            .enumerate()
            .map(|(i, &g)| g * self.kind.deriv(x[i], y[i]))
            .collect();
        Ok(vec![Some(Tensor::new(grad.shape(), data)?)])
    }
}

// ---------------------------------------------------------------------------
// Structural ops

struct Reshape;

impl<T: Real> Backward<T> for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(grad.clone().reshape(inputs[0].shape())?)])
    }
}

/// Splits `shape` around `axis` into (outer, axis extent, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

struct Narrow {
    axis: usize,
    start: usize,
}

impl<T: Real> Backward<T> for Narrow {
    fn name(&self) -> &'static str {
        "narrow"
    }
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (outer, extent, inner) = split_axis(inputs[0].shape(), self.axis);
        let len = output.shape()[self.axis];
        let mut gin = Tensor::zeros(inputs[0].shape());
        let gd = gin.data_mut();
        let g = grad.data();
        for o in 0..outer {
            let src = o * len * inner;
            let dst = (o * extent + self.start) * inner;
            gd[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
        }
        Ok(vec![Some(gin)])
    }
}

struct Concat {
    axis: usize,
}

impl<T: Real> Backward<T> for Concat {
    fn name(&self) -> &'static str {
        "concat"
    }
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (outer, total, inner) = split_axis(output.shape(), self.axis);
        let g = grad.data();
        let mut offset = 0;
        let mut grads = Vec::with_capacity(inputs.len());
        for t in inputs {
            let len = t.shape()[self.axis];
            let mut d = Vec::with_capacity(t.len());
            for o in 0..outer {
                let src = (o * total + offset) * inner;
                d.extend_from_slice(&g[src..src + len * inner]);
            }
            grads.push(Some(Tensor::new(t.shape(), d)?));
            offset += len;
        }
        Ok(grads)
    }
}

// ---------------------------------------------------------------------------
// Reductions and losses

struct SumAll {
    scale: f64,
}

impl<T: Real> Backward<T> for SumAll {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let g = grad.data()[0] * c(self.scale);
        Ok(vec![Some(Tensor::full(inputs[0].shape(), g))])
    }
}

struct Mse;

impl<T: Real> Backward<T> for Mse {
    fn name(&self) -> &'static str {
        "mse"
    }
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let k = grad.data()[0] * c(2.0 / a.len() as f64);
        let ga: Vec<T> = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| k * (x - y))
            .collect();
        let gb = ga.iter().map(|&v| -v).collect();
        Ok(vec![
            Some(Tensor::new(a.shape(), ga)?),
            Some(Tensor::new(b.shape(), gb)?),
        ])
    }
}

struct Softmax {
    axis: usize,
}

impl<T: Real> Backward<T> for Softmax {
    fn name(&self) -> &'static str {
        "softmax"
    }
    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (outer, extent, inner) = split_axis(output.shape(), self.axis);
        let y = output.data();
        let g = grad.data();
        let mut gin = vec![T::zero(); y.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * extent + k) * inner + i;
                let dot: T = (0..extent).map(|k| g[at(k)] * y[at(k)]).sum();
                for k in 0..extent {
                    gin[at(k)] = y[at(k)] * (g[at(k)] - dot);
                }
            }
        }
        Ok(vec![Some(Tensor::new(output.shape(), gin)?)])
    }
}

struct Dropout<T> {
    mask: Vec<T>,
}

impl<T: Real> Backward<T> for Dropout<T> {
    fn name(&self) -> &'static str {
        "dropout"
    }
    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let d = grad
            .data()
            .iter()
            .zip(&self.mask)
            .map(|(&g, &m)| g * m)
            .collect();
        Ok(vec![Some(Tensor::new(grad.shape(), d)?)])
    }
}

struct Matmul;

impl<T: Real> Backward<T> for Matmul {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        // dA = G·Bᵀ, dB = Aᵀ·G
        let mut ga = vec![T::zero(); m * k];
        super::conv::gemm_nt(grad.data(), b.data(), &mut ga, m, n, k);
        let mut gb = vec![T::zero(); k * n];
        super::conv::gemm_tn(a.data(), grad.data(), &mut gb, m, k, n);
        Ok(vec![
            Some(Tensor::new(a.shape(), ga)?),
            Some(Tensor::new(b.shape(), gb)?),
        ])
    }
}

/// `y = x·Wᵀ + b` with x (batch, in), W (out, in), b (out).
struct Linear;

impl<T: Real> Backward<T> for Linear {
    fn name(&self) -> &'static str {
        "linear"
    }
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (batch, fan_in) = (x.shape()[0], x.shape()[1]);
        let fan_out = w.shape()[0];
        let g = grad.data();
        // dX = G·W  (batch×out · out×in)
        let mut gx = vec![T::zero(); batch * fan_in];
        super::conv::gemm_nn(g, w.data(), &mut gx, batch, fan_out, fan_in);
        // dW = Gᵀ·X  (out×batch · batch×in)
        let mut gw = vec![T::zero(); fan_out * fan_in];
        super::conv::gemm_tn(g, x.data(), &mut gw, batch, fan_out, fan_in);
        let mut gb = vec![T::zero(); fan_out];
        for row in g.chunks(fan_out) {
            for (acc, &v) in gb.iter_mut().zip(row) {
                *acc += v;
            }
        }
        Ok(vec![
            Some(Tensor::new(x.shape(), gx)?),
            Some(Tensor::new(w.shape(), gw)?),
            Some(Tensor::new(&[fan_out], gb)?),
        ])
    }
}

struct Upsample {
    factor: usize,
}

impl<T: Real> Backward<T> for Upsample {
    fn name(&self) -> &'static str {
        "upsample_nearest"
    }
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let s = inputs[0].shape();
        let (h, w) = (s[2], s[3]);
        let (oh, ow) = (output.shape()[2], output.shape()[3]);
        let f = self.factor;
        let mut gin = Tensor::zeros(s);
        let gd = gin.data_mut();
        let g = grad.data();
        for plane in 0..s[0] * s[1] {
            for y in 0..oh {
                for x in 0..ow {
                    gd[plane * h * w + (y / f) * w + x / f] += g[plane * oh * ow + y * ow + x];
                }
            }
        }
        Ok(vec![Some(gin)])
    }
}

fn pool_bins(extent: usize, target: usize) -> Vec<(usize, usize)> {
    (0..target)
        .map(|i| {
            let start = i * extent / target;
            let end = ((i + 1) * extent).div_ceil(target);
            (start, end)
        })
        .collect()
}

struct AdaptiveAvgPool {
    rows: Vec<(usize, usize)>,
    cols: Vec<(usize, usize)>,
}

impl<T: Real> Backward<T> for AdaptiveAvgPool {
    fn name(&self) -> &'static str {
        "adaptive_avg_pool2d"
    }
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let s = inputs[0].shape();
        let (h, w) = (s[2], s[3]);
        let (oh, ow) = (self.rows.len(), self.cols.len());
        let mut gin = Tensor::zeros(s);
        let gd = gin.data_mut();
        let g = grad.data();
        for plane in 0..s[0] * s[1] {
            for (i, &(r0, r1)) in self.rows.iter().enumerate() {
                for (j, &(c0, c1)) in self.cols.iter().enumerate() {
                    let share = g[plane * oh * ow + i * ow + j] / c(((r1 - r0) * (c1 - c0)) as f64);
                    for y in r0..r1 {
                        for x in c0..c1 {
                            gd[plane * h * w + y * w + x] += share;
                        }
                    }
                }
            }
        }
        Ok(vec![Some(gin)])
    }
}

// ---------------------------------------------------------------------------
// Graph API

fn expect_rank(op: &'static str, shape: &[usize], rank: usize) -> Result<()> {
    if shape.len() != rank {
        return Err(Error::shape(
            op,
            format!("expected a rank-{rank} operand, got shape {shape:?}"),
        ));
    }
    Ok(())
}

impl<T: Real> Graph<T> {
    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| {
            Error::shape(
                "broadcast",
                format!("operands {sa:?} and {sb:?} are not broadcast-compatible"),
            )
        })?;
        let maps = (sa != out_shape || sb != out_shape)
            .then(|| (index_map(&sa, &out_shape), index_map(&sb, &out_shape)));
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let n: usize = out_shape.iter().product();
        let f = |x: T, y: T| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
            BinKind::Div => x / y,
        };
        let data = match &maps {
            None => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            Some((ma, mb)) => (0..n).map(|i| f(ad[ma[i]], bd[mb[i]])).collect(),
        };
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.push(value, &[a, b], Box::new(Binary { kind, maps })))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Div, a, b)
    }

    fn unary(&mut self, kind: UnaryKind<T>, x: Var) -> Var {
        let value = self.value(x).map(|&v| kind.eval(v));
        self.push(value, &[x], Box::new(Unary { kind }))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Log, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, x)
    }

    /// `ln(1 + eˣ)`, the positivity map used for scales and deviations.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Softplus, x)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(UnaryKind::LeakyRelu(c(slope)), x)
    }

    /// Clamps to `[lo, hi]`; the gradient passes unchanged inside the
    /// interval and is zero outside.
    pub fn clip(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(UnaryKind::Clip(c(lo), c(hi)), x)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        self.unary(UnaryKind::Scale(c(k)), x)
    }

    pub fn offset(&mut self, x: Var, k: f64) -> Var {
        self.unary(UnaryKind::Offset(c(k)), x)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Square, x)
    }

    /// Elementwise floor. The result is detached from the tape.
    pub fn floor(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.floor());
        self.constant(value)
    }

    /// Copy of `x` with no gradient path back to it.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, &[x], Box::new(Reshape)))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!("cannot take [{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * extent + start) * inner;
            data.extend_from_slice(&src[from..from + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.push(value, &[x], Box::new(Narrow { axis, start })))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::shape("concat", "no operands"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape(
                    "concat",
                    format!("operand {s:?} does not match {base:?} off axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let len = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let mut out_shape = base;
        out_shape[axis] = total;
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.push(value, xs, Box::new(Concat { axis })))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, &[x], Box::new(SumAll { scale: 1.0 }))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let value = Tensor::scalar(self.value(x).mean());
        self.push(value, &[x], Box::new(SumAll { scale: 1.0 / n }))
    }

    /// Mean squared error between equally shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "mse",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let s: T = ad.iter().zip(bd).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let value = Tensor::scalar(s / c(ad.len() as f64));
        Ok(self.push(value, &[a, b], Box::new(Mse)))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * extent + k) * inner + i;
                let m = (0..extent)
                    .map(|k| src[at(k)])
                    .fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for k in 0..extent {
                    let e = (src[at(k)] - m).exp();
                    out[at(k)] = e;
                    z += e;
                }
                for k in 0..extent {
                    out[at(k)] /= z;
                }
            }
        }
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, &[x], Box::new(Softmax { axis })))
    }

    /// Inverted dropout: kept activations are scaled by `1/(1-p)` in training,
    /// identity in evaluation.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Param(format!("dropout probability {p} outside [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let keep = c::<T>(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| {
                if rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let value = Tensor::new(
            self.shape(x),
            self.value(x)
                .data()
                .iter()
                .zip(&mask)
                .map(|(&v, &m)| v * m)
                .collect(),
        )?;
        Ok(self.push(value, &[x], Box::new(Dropout { mask })))
    }

    /// (m, k) · (k, n) matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} · {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        super::conv::gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, &[a, b], Box::new(Matmul)))
    }

    /// Fully connected layer `x·Wᵀ + b`; x (batch, in), W (out, in), b (out).
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (
            self.shape(x).to_vec(),
            self.shape(w).to_vec(),
            self.shape(b).to_vec(),
        );
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] || sb != [sw[0]] {
            return Err(Error::shape(
                "linear",
                format!("input {sx:?}, weight {sw:?}, bias {sb:?}"),
            ));
        }
        let (batch, fan_in, fan_out) = (sx[0], sx[1], sw[0]);
        let mut out = vec![T::zero(); batch * fan_out];
        super::conv::gemm_nt(
            self.value(x).data(),
            self.value(w).data(),
            &mut out,
            batch,
            fan_in,
            fan_out,
        );
        let bias = self.value(b).data();
        for row in out.chunks_mut(fan_out) {
            for (v, &bv) in row.iter_mut().zip(bias) {
                *v += bv;
            }
        }
        let value = Tensor::new(&[batch, fan_out], out)?;
        Ok(self.push(value, &[x, w, b], Box::new(Linear)))
    }

    /// Nearest-neighbour upsampling of an NCHW tensor by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        expect_rank("upsample_nearest", &s, 4)?;
        if factor == 0 {
            return Err(Error::Param("upsample factor must be positive".into()));
        }
        let (h, w) = (s[2], s[3]);
        let (oh, ow) = (h * factor, w * factor);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(s[0] * s[1] * oh * ow);
        for plane in 0..s[0] * s[1] {
            for y in 0..oh {
                let row = &src[plane * h * w + (y / factor) * w..][..w];
                for xx in 0..ow {
                    out.push(row[xx / factor]);
                }
            }
        }
        let value = Tensor::new(&[s[0], s[1], oh, ow], out)?;
        Ok(self.push(value, &[x], Box::new(Upsample { factor })))
    }

    /// Average pooling of an NCHW tensor onto a fixed `(oh, ow)` grid,
    /// whatever the input resolution.
    pub fn adaptive_avg_pool2d(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        expect_rank("adaptive_avg_pool2d", &s, 4)?;
        if oh == 0 || ow == 0 {
            return Err(Error::Param("pool target must be positive".into()));
        }
        let (h, w) = (s[2], s[3]);
        let rows = pool_bins(h, oh);
        let cols = pool_bins(w, ow);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(s[0] * s[1] * oh * ow);
        for plane in 0..s[0] * s[1] {
            for &(r0, r1) in &rows {
                for &(c0, c1) in &cols {
                    let mut acc = T::zero();
                    for y in r0..r1 {
                        for xx in c0..c1 {
                            acc += src[plane * h * w + y * w + xx];
                        }
                    }
                    out.push(acc / c(((r1 - r0) * (c1 - c0)) as f64));
                }
            }
        }
        let value = Tensor::new(&[s[0], s[1], oh, ow], out)?;
        Ok(self.push(value, &[x], Box::new(AdaptiveAvgPool { rows, cols })))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[2]), None);
        assert_eq!(index_map(&[3], &[2, 3]), vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(index_map(&[2, 1], &[2, 3]), vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn mismatched_shapes_are_reported() {
        let mut g = Graph::<f32>::new();
        let a = g.leaf(Tensor::zeros(&[2, 3]), true);
        let b = g.leaf(Tensor::zeros(&[4]), true);
        let err = g.add(a, b).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }), "{err}");
        assert!(g.matmul(a, a).is_err());
        assert!(g.mse(a, b).is_err());
    }

    #[test]
    fn dropout_rejects_bad_probability() {
        let mut g = Graph::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = g.leaf(Tensor::ones(&[4]), true);
        assert!(matches!(g.dropout(x, 1.0, true, &mut rng), Err(Error::Param(_))));
        assert!(matches!(g.dropout(x, -0.1, true, &mut rng), Err(Error::Param(_))));
        // evaluation is the identity
        assert_eq!(g.dropout(x, 0.2, false, &mut rng).unwrap(), x);
    }

    #[test]
    fn dropout_keeps_expectation() {
        let mut g = Graph::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = g.leaf(Tensor::ones(&[20_000]), true);
        let y = g.dropout(x, 0.2, true, &mut rng).unwrap();
        let m = g.value(y).mean();
        assert!((m - 1.0).abs() < 0.02, "mean {m}");
        let zeros = g.value(y).data().iter().filter(|&&v| v == 0.0).count();
        assert!((zeros as f64 / 20_000.0 - 0.2).abs() < 0.02);
    }

    #[test]
    fn adaptive_pool_of_constant_is_constant() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::full(&[1, 1, 10, 10], 0.37), false);
        let y = g.adaptive_avg_pool2d(x, 5, 5).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 5, 5]);
        assert!(g.value(y).data().iter().all(|&v| (v - 0.37).abs() < 1e-6));
    }

    #[test]
    fn adaptive_pool_bins_cover_odd_extents() {
        let bins = pool_bins(17, 5);
        assert_eq!(bins.first().unwrap().0, 0);
        assert_eq!(bins.last().unwrap().1, 17);
        for w in bins.windows(2) {
            assert!(w[1].0 <= w[0].1);
        }
    }

    #[test]
    fn clip_gradient_is_zero_outside() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64(&[3], &[-2.0, 0.5, 2.0]).unwrap(), true);
        let y = g.clip(x, -1.0, 1.0);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.value(y).data(), &[-1.0, 0.5, 1.0]);
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn floor_is_detached() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64(&[2], &[1.7, -0.2]).unwrap(), true);
        let f = g.floor(x);
        assert!(!g.requires_grad(f));
        assert_eq!(g.value(f).data(), &[1.0, -1.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(
            Tensor::from_f64(&[2, 3], &[1.0, 2.0, 3.0, 0.0, 0.0, 0.0]).unwrap(),
            false,
        );
        let y = g.softmax(x, 1).unwrap();
        let d = g.value(y).data();
        assert!((d[..3].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(d[3..].iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn narrow_and_concat_invert_each_other() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = g.leaf(Tensor::from_f64(&[2, 3, 4], &data).unwrap(), true);
        let a = g.narrow(x, 1, 0, 1).unwrap();
        let b = g.narrow(x, 1, 1, 2).unwrap();
        let y = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(y), g.value(x));
        assert!(g.narrow(x, 1, 2, 2).is_err());
    }
}
