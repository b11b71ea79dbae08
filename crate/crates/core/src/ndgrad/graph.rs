//! Define-by-run computation graph with reverse-mode accumulation.
//!
//! Every builder method evaluates its primitive eagerly and appends a node;
//! node ids therefore form a topological order and [`Graph::backward`] walks
//! them in exact reverse construction order.

use std::sync::Arc;

use super::array::{DenseArray, Real};
use super::conv;
use super::resample::ResamplePlan;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone)]
enum Op<T> {
    Input,
    Param,
    Detach,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Square(Var),
    Sum(Var),
    Relu(Var),
    Log { x: Var, floor: T },
    Conv2d { input: Var, kernel: Var, bias: Var, padding: usize },
    GlobalAvgPool(Var),
    Softmax(Var),
    ChannelSoftmax(Var),
    SliceChannels { x: Var, start: usize },
    Resample { x: Var, plan: Arc<ResamplePlan> },
    MaxNormalize { x: Var, eps: T },
    L2Normalize { x: Var, eps: T },
}

struct Node<T> {
    op: Op<T>,
    value: DenseArray<T>,
    tracked: bool,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<T: Real>(op: &'static str, a: &DenseArray<T>, b: &DenseArray<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &DenseArray<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.value(v).item()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, op: Op<T>, value: DenseArray<T>, tracked: bool) -> Var {
        self.nodes.push(Node { op, value, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// Constant leaf; never receives a gradient.
    pub fn input(&mut self, value: DenseArray<T>) -> Var {
        self.push(Op::Input, value, false)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: DenseArray<T>) -> Var {
        self.push(Op::Param, value, true)
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(Op::Detach, value, false)
    }

    fn zip_with(&self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<DenseArray<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(op, va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        DenseArray::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with("add", a, b, |x, y| x + y)?;
        let t = self.tracked_any(&[a, b]);
        Ok(self.push(Op::Add(a, b), v, t))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with("sub", a, b, |x, y| x - y)?;
        let t = self.tracked_any(&[a, b]);
        Ok(self.push(Op::Sub(a, b), v, t))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with("mul", a, b, |x, y| x * y)?;
        let t = self.tracked_any(&[a, b]);
        Ok(self.push(Op::Mul(a, b), v, t))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with("div", a, b, |x, y| x / y)?;
        let t = self.tracked_any(&[a, b]);
        Ok(self.push(Op::Div(a, b), v, t))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let v = self.value(x).map(|e| e * s);
        let t = self.tracked_any(&[x]);
        self.push(Op::Scale(x, s), v, t)
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        let v = self.value(x).map(|e| e + s);
        let t = self.tracked_any(&[x]);
        self.push(Op::AddScalar(x), v, t)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e * e);
        let t = self.tracked_any(&[x]);
        self.push(Op::Square(x), v, t)
    }

    /// Sum of all elements, as a one-element array.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let t = self.tracked_any(&[x]);
        self.push(Op::Sum(x), DenseArray::scalar(s), t)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::from_f64(self.value(x).len() as f64);
        let s = self.sum(x);
        self.scale(s, T::one() / n)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| if e > T::zero() { e } else { T::zero() });
        let t = self.tracked_any(&[x]);
        self.push(Op::Relu(x), v, t)
    }

    /// `ln(max(x, floor))`.
    pub fn log_clamped(&mut self, x: Var, floor: T) -> Var {
        let v = self.value(x).map(|e| e.max(floor).ln());
        let t = self.tracked_any(&[x]);
        self.push(Op::Log { x, floor }, v, t)
    }

    /// Cross-correlation with zero padding. `kernel` is `[Cout, Cin, kh, kw]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, padding: usize) -> Result<Var> {
        let v = conv::forward(self.value(input), self.value(kernel), self.value(bias), padding)?;
        let t = self.tracked_any(&[input, kernel, bias]);
        Ok(self.push(Op::Conv2d { input, kernel, bias, padding }, v, t))
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_average_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let hw = h * w;
        let inv = T::one() / T::from_f64(hw as f64);
        let src = self.value(x).data();
        let data = (0..n * c)
            .map(|i| src[i * hw..(i + 1) * hw].iter().copied().sum::<T>() * inv)
            .collect();
        let v = DenseArray::new(vec![n, c], data)?;
        let t = self.tracked_any(&[x]);
        Ok(self.push(Op::GlobalAvgPool(x), v, t))
    }

    /// Row-wise softmax of `[N, C]` logits.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let [n, c] = self.value(x).dims2()?;
        if c < 2 {
            return Err(Error::invalid("softmax needs at least two classes"));
        }
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        debug_assert_eq!(out.len(), n * c);
        let t = self.tracked_any(&[x]);
        Ok(self.push(Op::Softmax(x), out, t))
    }

    /// Softmax over axis 1 of `[N, C, H, W]`, independently per pixel.
    pub fn channel_softmax(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if c < 2 {
            return Err(Error::invalid("channel softmax needs at least two channels"));
        }
        let hw = h * w;
        let mut out = self.value(x).clone();
        let data = out.data_mut();
        let mut buf = vec![T::zero(); c];
        for b in 0..n {
            for p in 0..hw {
                for (ch, slot) in buf.iter_mut().enumerate() {
                    *slot = data[(b * c + ch) * hw + p];
                }
                softmax_in_place(&mut buf);
                for (ch, &val) in buf.iter().enumerate() {
                    data[(b * c + ch) * hw + p] = val;
                }
            }
        }
        let t = self.tracked_any(&[x]);
        Ok(self.push(Op::ChannelSoftmax(x), out, t))
    }

    /// Channels `start..start+len` of a `[N, C, H, W]` array.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if len == 0 || start + len > c {
            return Err(Error::invalid(format!(
                "channel slice {start}..{} out of range for {c} channels",
                start + len
            )));
        }
        let hw = h * w;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * len * hw);
        for b in 0..n {
            let off = (b * c + start) * hw;
            data.extend_from_slice(&src[off..off + len * hw]);
        }
        let v = DenseArray::new(vec![n, len, h, w], data)?;
        let t = self.tracked_any(&[x]);
        Ok(self.push(Op::SliceChannels { x, start }, v, t))
    }

    /// Applies a spatial linear map to every `[H, W]` plane of `x`.
    pub fn resample(&mut self, x: Var, plan: Arc<ResamplePlan>) -> Result<Var> {
        let v = plan.apply(self.value(x))?;
        let t = self.tracked_any(&[x]);
        Ok(self.push(Op::Resample { x, plan }, v, t))
    }

    /// Per-plane `clamp(x / max(max(x), eps), 0, 1)`.
    pub fn max_normalize(&mut self, x: Var, eps: T) -> Result<Var> {
        let (h, w) = self.value(x).spatial()?;
        let hw = h * w;
        let mut out = self.value(x).clone();
        for plane in out.data_mut().chunks_mut(hw) {
            let (_, m) = plane_max(plane);
            let d = m.max(eps);
            for e in plane.iter_mut() {
                *e = (*e / d).max(T::zero()).min(T::one());
            }
        }
        let t = self.tracked_any(&[x]);
        Ok(self.push(Op::MaxNormalize { x, eps }, out, t))
    }

    /// Per-plane `x / max(||x||_2, eps)`.
    pub fn l2_normalize(&mut self, x: Var, eps: T) -> Result<Var> {
        let (h, w) = self.value(x).spatial()?;
        let hw = h * w;
        let mut out = self.value(x).clone();
        for plane in out.data_mut().chunks_mut(hw) {
            let norm = plane.iter().map(|&e| e * e).sum::<T>().sqrt();
            let d = norm.max(eps);
            for e in plane.iter_mut() {
                *e /= d;
            }
        }
        let t = self.tracked_any(&[x]);
        Ok(self.push(Op::L2Normalize { x, eps }, out, t))
    }

    /// Reverse-mode accumulation from a scalar `loss`.
    ///
    /// Every parameter node gets an entry; parameters the loss does not
    /// reach get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Param) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
        }

        let grads = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, node)| match node.op {
                Op::Param => {
                    let shape = node.value.shape().to_vec();
                    let data = grads
                        .get_mut(i)
                        .and_then(Option::take)
                        .unwrap_or_else(|| vec![T::zero(); node.value.len()]);
                    Some(DenseArray::new(shape, data).expect("gradient shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, delta: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].tracked {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
        delta(slot);
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        match node.op {
            Op::Input | Op::Param | Op::Detach => {}
            Op::Add(a, b) => {
                self.accumulate(grads, a, |s| add_into(s, g));
                self.accumulate(grads, b, |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, |s| add_into(s, g));
                self.accumulate(grads, b, |s| {
                    s.iter_mut().zip(g).for_each(|(s, &g)| *s -= g);
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                self.accumulate(grads, a, |s| {
                    for ((s, &g), &y) in s.iter_mut().zip(g).zip(vb) {
                        *s += g * y;
                    }
                });
                self.accumulate(grads, b, |s| {
                    for ((s, &g), &x) in s.iter_mut().zip(g).zip(va) {
                        *s += g * x;
                    }
                });
            }
            Op::Div(a, b) => {
                let (vb, q) = (self.value(b).data(), node.value.data());
                self.accumulate(grads, a, |s| {
                    for ((s, &g), &y) in s.iter_mut().zip(g).zip(vb) {
                        *s += g / y;
                    }
                });
                self.accumulate(grads, b, |s| {
                    for (((s, &g), &y), &q) in s.iter_mut().zip(g).zip(vb).zip(q) {
                        *s -= g * q / y;
                    }
                });
            }
            Op::Scale(x, k) => {
                self.accumulate(grads, x, |s| {
                    s.iter_mut().zip(g).for_each(|(s, &g)| *s += g * k);
                });
            }
            Op::AddScalar(x) => self.accumulate(grads, x, |s| add_into(s, g)),
            Op::Square(x) => {
                let vx = self.value(x).data();
                let two = T::from_f64(2.0);
                self.accumulate(grads, x, |s| {
                    for ((s, &g), &x) in s.iter_mut().zip(g).zip(vx) {
                        *s += two * x * g;
                    }
                });
            }
            Op::Sum(x) => {
                let g0 = g[0];
                self.accumulate(grads, x, |s| s.iter_mut().for_each(|s| *s += g0));
            }
            Op::Relu(x) => {
                let vx = self.value(x).data();
                self.accumulate(grads, x, |s| {
                    for ((s, &g), &x) in s.iter_mut().zip(g).zip(vx) {
                        if x > T::zero() {
                            *s += g;
                        }
                    }
                });
            }
            Op::Log { x, floor } => {
                let vx = self.value(x).data();
                self.accumulate(grads, x, |s| {
                    for ((s, &g), &x) in s.iter_mut().zip(g).zip(vx) {
                        if x > floor {
                            *s += g / x;
                        }
                    }
                });
            }
            Op::Conv2d { input, kernel, bias, padding } => {
                let need_input = self.nodes[input.0].tracked;
                let back = conv::backward(
                    self.value(input),
                    self.value(kernel),
                    g,
                    padding,
                    need_input,
                )?;
                if let Some(gi) = back.input {
                    self.accumulate(grads, input, |s| add_into(s, &gi));
                }
                self.accumulate(grads, kernel, |s| add_into(s, &back.kernel));
                self.accumulate(grads, bias, |s| add_into(s, &back.bias));
            }
            Op::GlobalAvgPool(x) => {
                let [_, _, h, w] = self.value(x).dims4()?;
                let hw = h * w;
                let inv = T::one() / T::from_f64(hw as f64);
                self.accumulate(grads, x, |s| {
                    for (plane, &g) in s.chunks_mut(hw).zip(g) {
                        plane.iter_mut().for_each(|e| *e += g * inv);
                    }
                });
            }
            Op::Softmax(x) => {
                let c = self.value(x).shape()[1];
                let y = node.value.data();
                self.accumulate(grads, x, |s| {
                    for ((s, g), y) in s.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let dot: T = g.iter().zip(y).map(|(&g, &y)| g * y).sum();
                        for ((s, &g), &y) in s.iter_mut().zip(g).zip(y) {
                            *s += y * (g - dot);
                        }
                    }
                });
            }
            Op::ChannelSoftmax(x) => {
                let [n, c, h, w] = self.value(x).dims4()?;
                let hw = h * w;
                let y = node.value.data();
                self.accumulate(grads, x, |s| {
                    for b in 0..n {
                        for p in 0..hw {
                            let idx = |ch: usize| (b * c + ch) * hw + p;
                            let dot: T = (0..c).map(|ch| g[idx(ch)] * y[idx(ch)]).sum();
                            for ch in 0..c {
                                s[idx(ch)] += y[idx(ch)] * (g[idx(ch)] - dot);
                            }
                        }
                    }
                });
            }
            Op::SliceChannels { x, start } => {
                let [n, c, h, w] = self.value(x).dims4()?;
                let len = node.value.shape()[1];
                let hw = h * w;
                self.accumulate(grads, x, |s| {
                    for b in 0..n {
                        let dst = (b * c + start) * hw;
                        let src = b * len * hw;
                        add_into(&mut s[dst..dst + len * hw], &g[src..src + len * hw]);
                    }
                });
            }
            Op::Resample { x, ref plan } => {
                self.accumulate(grads, x, |s| plan.transpose_accumulate(g, s));
            }
            Op::MaxNormalize { x, eps } => {
                let (h, w) = self.value(x).spatial()?;
                let hw = h * w;
                let vx = self.value(x).data();
                self.accumulate(grads, x, |s| {
                    for ((s, g), xs) in s.chunks_mut(hw).zip(g.chunks(hw)).zip(vx.chunks(hw)) {
                        let (arg, m) = plane_max(xs);
                        let d = m.max(eps);
                        let mut weighted = T::zero();
                        for ((s, &g), &x) in s.iter_mut().zip(g).zip(xs) {
                            let y = x / d;
                            // clamped entries pass no gradient
                            if y >= T::zero() && y <= T::one() {
                                *s += g / d;
                                weighted += g * x;
                            }
                        }
                        if m > eps {
                            s[arg] -= weighted / (d * d);
                        }
                    }
                });
            }
            Op::L2Normalize { x, eps } => {
                let (h, w) = self.value(x).spatial()?;
                let hw = h * w;
                let vx = self.value(x).data();
                let y = node.value.data();
                self.accumulate(grads, x, |s| {
                    for (((s, g), xs), ys) in s
                        .chunks_mut(hw)
                        .zip(g.chunks(hw))
                        .zip(vx.chunks(hw))
                        .zip(y.chunks(hw))
                    {
                        let norm = xs.iter().map(|&e| e * e).sum::<T>().sqrt();
                        if norm > eps {
                            let dot: T = ys.iter().zip(g).map(|(&y, &g)| y * g).sum();
                            for ((s, &g), &y) in s.iter_mut().zip(g).zip(ys) {
                                *s += (g - y * dot) / norm;
                            }
                        } else {
                            for (s, &g) in s.iter_mut().zip(g) {
                                *s += g / eps;
                            }
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    let m = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

/// First index of the maximum and the maximum itself.
fn plane_max<T: Real>(plane: &[T]) -> (usize, T) {
    let mut best = (0, plane[0]);
    for (i, &x) in plane.iter().enumerate().skip(1) {
        if x > best.1 {
            best = (i, x);
        }
    }
    best
}

/// Gradients of one scalar loss with respect to every parameter node.
pub struct Gradients<T> {
    grads: Vec<Option<DenseArray<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a parameter node. `None` for non-parameter nodes.
    pub fn get(&self, v: Var) -> Option<&DenseArray<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<DenseArray<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn arr(shape: &[usize], data: &[f64]) -> DenseArray<f64> {
        DenseArray::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_values_and_subgradient() {
        let mut g = Graph::new();
        let x = g.param(arr(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);

        let mut g = Graph::new();
        let x = g.param(arr(&[2], &[3.0, -3.0]));
        let y = g.relu(x);
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0]);

        let mut g = Graph::new();
        let x = g.param(arr(&[1], &[0.0]));
        let y = g.relu(x);
        let l = g.sum(y);
        assert_eq!(g.backward(l).unwrap().get(x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn all_negative_relu_is_zero() {
        let mut g = Graph::new();
        let x = g.input(arr(&[2, 2], &[-1.0, -0.5, -3.0, -1e-9]));
        let y = g.relu(x);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_closed_forms() {
        let mut g = Graph::new();
        let x = g.input(arr(&[2, 2], &[0.0, 0.0, 2f64.ln(), 0.0]));
        let p = g.softmax(x).unwrap();
        let v = g.value(p).data();
        assert_abs_diff_eq!(v[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(v[1], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(v[2], 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v[3], 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let mut g = Graph::<f32>::new();
        let x = g.input(DenseArray::new(vec![1, 2], vec![1000.0, 0.0]).unwrap());
        let p = g.softmax(x).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 0.0]);
    }

    #[test]
    fn gap_means() {
        let mut g = Graph::new();
        let x = g.input(arr(&[1, 1, 2, 2], &[1.0, 3.0, 5.0, 7.0]));
        let p = g.global_average_pool(x).unwrap();
        assert_eq!(g.value(p).data(), &[4.0]);
        let c = g.input(DenseArray::full(&[1, 1, 3, 3], 2.5));
        let p = g.global_average_pool(c).unwrap();
        assert_eq!(g.value(p).data(), &[2.5]);
    }

    #[test]
    fn backward_of_sum_and_quadratic() {
        let mut g = Graph::new();
        let x = g.param(arr(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
        let l = g.sum(x);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));

        let mut g = Graph::new();
        let vals = [1.0, -2.0, 3.5];
        let x = g.param(arr(&[3], &vals));
        let sq = g.square(x);
        let s = g.sum(sq);
        let l = g.scale(s, 0.5);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &vals);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(arr(&[2], &[1.0, 2.0]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn unreachable_params_get_zero_and_detach_blocks() {
        let mut g = Graph::new();
        let a = g.param(arr(&[2], &[1.0, 2.0]));
        let b = g.param(arr(&[2], &[3.0, 4.0]));
        let bd = g.detach(b);
        let prod = g.mul(a, bd).unwrap();
        let l = g.sum(prod);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[3.0, 4.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn max_normalize_closed_form() {
        let mut g = Graph::new();
        let x = g.input(arr(&[1, 1, 1, 3], &[-1.0, 0.5, 2.0]));
        let r = g.relu(x);
        let m = g.max_normalize(r, 1e-8).unwrap();
        assert_eq!(g.value(m).data(), &[0.0, 0.25, 1.0]);
    }

    #[test]
    fn elementwise_shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.input(arr(&[2], &[1.0, 2.0]));
        let b = g.input(arr(&[3], &[1.0, 2.0, 3.0]));
        let msg = g.add(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2]") && msg.contains("[3]"), "{msg}");
    }
}
