use super::conv::{self, ConvGeom};
use super::gemm::{gemm, MatRef};
use super::{Scalar, Tensor, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of a user-defined node: receives the parent
/// values, the node's own value and the upstream gradient, and returns one
/// optional gradient per parent.
pub type BackwardFn<T> =
    Box<dyn Fn(&[&Tensor<T>], &Tensor<T>, &[T]) -> Vec<Option<Vec<T>>> + Send>;

/// What `div` does when a denominator is smaller in magnitude than the
/// dtype epsilon.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DivGuard {
    /// Replace the denominator by `±epsilon` and treat it as constant.
    #[default]
    Saturate,
    /// Fail the operation.
    Error,
}

/// How a smaller operand broadcasts against a larger one. The smaller
/// operand must match a leading prefix of the larger shape and be 1 on every
/// remaining axis; `inner` is the number of larger-operand elements that
/// share one smaller-operand element.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Rhs { inner: usize },
    Lhs { inner: usize },
}

#[derive(Clone, Debug)]
struct ReducePlan {
    in_shape: Vec<usize>,
    axes: Vec<usize>,
    /// Set when the reduced axes form a trailing block of the input.
    trailing_inner: Option<usize>,
    count: usize,
    out_len: usize,
}

impl ReducePlan {
    fn new(op: &'static str, shape: &[usize], axes: &[usize]) -> Result<(Self, Vec<usize>), TensorError> {
        if axes.is_empty() {
            return Err(TensorError::EmptyReduction { op });
        }
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != axes.len() || sorted.iter().any(|&a| a >= shape.len()) {
            return Err(TensorError::InvalidAxes {
                op,
                axes: axes.to_vec(),
                rank: shape.len(),
            });
        }
        let count: usize = sorted.iter().map(|&a| shape[a]).product();
        if count == 0 {
            return Err(TensorError::EmptyReduction { op });
        }
        let out_shape: Vec<usize> = (0..shape.len())
            .filter(|a| !sorted.contains(a))
            .map(|a| shape[a])
            .collect();
        let first = sorted[0];
        let trailing = sorted.iter().enumerate().all(|(i, &a)| a == first + i) && *sorted.last().unwrap() == shape.len() - 1;
        let out_len = out_shape.iter().product();
        Ok((
            Self {
                in_shape: shape.to_vec(),
                axes: sorted,
                trailing_inner: trailing.then_some(count),
                count,
                out_len,
            },
            out_shape,
        ))
    }

    /// Output index of every input element, visiting inputs in flat order.
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let n: usize = self.in_shape.iter().product();
        if let Some(inner) = self.trailing_inner {
            for o in 0..n / inner {
                for i in o * inner..(o + 1) * inner {
                    f(i, o);
                }
            }
            return;
        }
        let rank = self.in_shape.len();
        let mut coords = vec![0usize; rank];
        for i in 0..n {
            let mut o = 0;
            for a in 0..rank {
                if !self.axes.contains(&a) {
                    o = o * self.in_shape[a] + coords[a];
                }
            }
            f(i, o);
            for a in (0..rank).rev() {
                coords[a] += 1;
                if coords[a] < self.in_shape[a] {
                    break;
                }
                coords[a] = 0;
            }
        }
    }
}

enum Op<T> {
    Leaf,
    Conv2d { input: Var, weight: Var, geom: ConvGeom },
    Relu(Var),
    Neg(Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Div(Var, Var, Bcast),
    Sqrt(Var),
    Log(Var),
    Clamp { input: Var, lo: T, hi: T },
    AddScalar(Var),
    MulScalar(Var, T),
    Reshape(Var),
    Sum { input: Var, plan: ReducePlan },
    Mean { input: Var, plan: ReducePlan },
    Variance { input: Var, plan: ReducePlan, mean: Vec<T> },
    Linear { input: Var, weight: Var },
    L2Normalize { input: Var, norms: Vec<T> },
    Custom { parents: Vec<Var>, backward: BackwardFn<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, so every node's parents precede it.
/// [`Graph::backward`] walks that order in reverse once; a second call is
/// rejected.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
    div_guard: DivGuard,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn bcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Bcast, Vec<usize>), TensorError> {
    if a == b {
        return Ok((Bcast::Same, a.to_vec()));
    }
    let mismatch = || {
        let axes = if a.len() == b.len() {
            (0..a.len()).filter(|&i| a[i] != b[i]).collect()
        } else {
            (0..a.len().max(b.len())).collect()
        };
        TensorError::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
            axes,
        }
    };
    if a.len() != b.len() {
        return Err(mismatch());
    }
    let fits = |small: &[usize], big: &[usize]| -> Option<usize> {
        let r = small.iter().zip(big).position(|(s, b)| s != b)?;
        small[r..]
            .iter()
            .all(|&d| d == 1)
            .then(|| big[r..].iter().product())
    };
    if let Some(inner) = fits(b, a) {
        Ok((Bcast::Rhs { inner }, a.to_vec()))
    } else if let Some(inner) = fits(a, b) {
        Ok((Bcast::Lhs { inner }, b.to_vec()))
    } else {
        Err(mismatch())
    }
}

fn zip_bcast<T: Scalar>(a: &[T], b: &[T], bc: Bcast, f: impl Fn(T, T) -> T) -> Vec<T> {
    match bc {
        Bcast::Same => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
        Bcast::Rhs { inner } => a
            .chunks(inner)
            .zip(b)
            .flat_map(|(xs, &y)| xs.iter().map(move |&x| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect(),
        Bcast::Lhs { inner } => b
            .chunks(inner)
            .zip(a)
            .flat_map(|(ys, &x)| ys.iter().map(move |&y| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect(),
    }
}

/// Denominators below the dtype epsilon in magnitude saturate to `±epsilon`.
fn guard_denominator<T: Scalar>(d: T) -> T {
    let eps = T::epsilon();
    if d.abs() >= eps {
        d
    } else if d < T::zero() {
        -eps
    } else {
        eps
    }
}

/// Sums a full-size gradient down onto the smaller operand.
fn reduce_to_small<T: Scalar>(full: Vec<T>, inner: usize) -> Vec<T> {
    full.chunks(inner).map(|c| c.iter().fold(T::zero(), |s, &v| s + v)).collect()
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
            div_guard: DivGuard::default(),
        }
    }

    pub fn with_div_guard(div_guard: DivGuard) -> Self {
        Self {
            div_guard,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an input. Gradients are collected only for leaves created with
    /// `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copies `v`'s value into a new constant, blocking gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last backward pass with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.nodes[v.0].grad.clone()?;
        Tensor::new(self.shape(v).to_vec(), g).ok()
    }

    // ----- primitives -------------------------------------------------------

    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, pad: usize) -> Result<Var, TensorError> {
        let geom = ConvGeom::new(self.shape(input), self.shape(weight), stride, pad)?;
        let out = conv::forward(self.value(input).data(), self.value(weight).data(), &geom);
        let value = Tensor::new(geom.out_shape(), out)?;
        let rg = self.rg(input) || self.rg(weight);
        Ok(self.push(value, Op::Conv2d { input, weight, geom }, rg))
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let src = self.value(a);
        let value = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|&x| f(x)).collect(),
        };
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > T::zero() || x.is_nan() { x } else { T::zero() })
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    /// Square root. The derivative at an exact zero is taken as 0.
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), |x| x.sqrt())
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), |x| x.ln())
    }

    /// Clamps into `[lo, hi]`; gradient passes only inside the interval.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        self.unary(a, Op::Clamp { input: a, lo, hi }, |x| x.max(lo).min(hi))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn mul_scalar(&mut self, a: Var, c: T) -> Var {
        self.unary(a, Op::MulScalar(a, c), |x| x * c)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        make: impl Fn(Var, Var, Bcast) -> Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var, TensorError> {
        let (bc, shape) = bcast(name, self.shape(a), self.shape(b))?;
        let data = zip_bcast(self.value(a).data(), self.value(b).data(), bc, f);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data }, make(a, b, bc), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, Op::Mul, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.div_guard == DivGuard::Error {
            let eps = T::epsilon();
            if let Some((index, v)) = self.value(b).data().iter().enumerate().find(|(_, v)| v.abs() < eps) {
                return Err(TensorError::DivisionByZero {
                    index,
                    value: v.as_f64(),
                });
            }
        }
        self.binary("div", a, b, Op::Div, |x, y| x / guard_denominator(y))
    }

    /// Elementwise `1 / a` under the graph's division guard.
    pub fn recip(&mut self, a: Var) -> Result<Var, TensorError> {
        let ones = self.constant(Tensor::full(self.shape(a).to_vec(), T::one()));
        self.div(ones, a)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    fn reduce_sum(&self, a: Var, plan: &ReducePlan) -> Vec<T> {
        let src = self.value(a).data();
        let mut out = vec![T::zero(); plan.out_len];
        plan.for_each(|i, o| out[o] += src[i]);
        out
    }

    pub fn sum(&mut self, a: Var, axes: &[usize]) -> Result<Var, TensorError> {
        let (plan, shape) = ReducePlan::new("sum", self.shape(a), axes)?;
        let data = self.reduce_sum(a, &plan);
        let rg = self.rg(a);
        Ok(self.push(Tensor { shape, data }, Op::Sum { input: a, plan }, rg))
    }

    pub fn mean(&mut self, a: Var, axes: &[usize]) -> Result<Var, TensorError> {
        let (plan, shape) = ReducePlan::new("mean", self.shape(a), axes)?;
        let n = T::from_f64(plan.count as f64);
        let data = self.reduce_sum(a, &plan).into_iter().map(|s| s / n).collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor { shape, data }, Op::Mean { input: a, plan }, rg))
    }

    /// Population variance (divides by the element count), two-pass.
    pub fn var(&mut self, a: Var, axes: &[usize]) -> Result<Var, TensorError> {
        let (plan, shape) = ReducePlan::new("var", self.shape(a), axes)?;
        let n = T::from_f64(plan.count as f64);
        let mean: Vec<T> = self.reduce_sum(a, &plan).into_iter().map(|s| s / n).collect();
        let src = self.value(a).data();
        let mut acc = vec![T::zero(); plan.out_len];
        plan.for_each(|i, o| {
            let d = src[i] - mean[o];
            acc[o] += d * d;
        });
        let data = acc.into_iter().map(|s| s / n).collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor { shape, data }, Op::Variance { input: a, plan, mean }, rg))
    }

    /// Mean over every element, returning a rank-0 tensor.
    pub fn mean_all(&mut self, a: Var) -> Result<Var, TensorError> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        if axes.is_empty() {
            return Ok(a);
        }
        self.mean(a, &axes)
    }

    /// `input [B, n] x weight[m, n]^T -> [B, m]`.
    pub fn linear(&mut self, input: Var, weight: Var) -> Result<Var, TensorError> {
        let (xs, ws) = (self.shape(input), self.shape(weight));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
                axes: vec![1],
            });
        }
        let (b, n, m) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); b * m];
        gemm(
            MatRef::new(self.value(input).data(), b, n),
            MatRef::new(self.value(weight).data(), m, n).t(),
            &mut out,
            false,
        );
        let rg = self.rg(input) || self.rg(weight);
        Ok(self.push(Tensor::new(vec![b, m], out)?, Op::Linear { input, weight }, rg))
    }

    /// Scales every row of a `[B, n]` tensor to unit Euclidean norm. Rows
    /// with norm at or below `eps_norm` are rejected.
    pub fn l2_normalize(&mut self, input: Var, eps_norm: T) -> Result<Var, TensorError> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::Invalid {
                op: "l2_normalize",
                msg: format!("expected rank-2 input, got {shape:?}"),
            });
        }
        let n = shape[1];
        let src = self.value(input).data();
        let mut norms = Vec::with_capacity(shape[0]);
        let mut out = Vec::with_capacity(src.len());
        for (row, chunk) in src.chunks(n).enumerate() {
            let norm = chunk.iter().fold(T::zero(), |s, &v| s + v * v).sqrt();
            if !(norm > eps_norm) {
                return Err(TensorError::ZeroNormRow {
                    row,
                    norm: norm.as_f64(),
                });
            }
            norms.push(norm);
            out.extend(chunk.iter().map(|&v| v / norm));
        }
        let rg = self.rg(input);
        Ok(self.push(Tensor::new(shape, out)?, Op::L2Normalize { input, norms }, rg))
    }

    /// Records a node whose forward value was computed by the caller.
    pub fn custom(&mut self, parents: &[Var], value: Tensor<T>, backward: BackwardFn<T>) -> Var {
        let rg = parents.iter().any(|&p| self.rg(p));
        self.push(
            value,
            Op::Custom {
                parents: parents.to_vec(),
                backward,
            },
            rg,
        )
    }

    // ----- reverse pass -----------------------------------------------------

    /// Propagates gradients from a single-element `loss` to every node that
    /// requires them. May run once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.backward_done = true;
        if !self.rg(loss) {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contribs = self.vjp(i, &g);
            self.nodes[i].grad = Some(g);
            for (p, c) in contribs {
                self.accumulate(p, c);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contrib: Vec<T>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match node.grad.as_mut() {
            None => node.grad = Some(contrib),
            Some(g) => g.iter_mut().zip(contrib).for_each(|(a, b)| *a += b),
        }
    }

    fn vjp(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        let mut push = |v: Var, f: &dyn Fn() -> Vec<T>| {
            if self.rg(v) {
                out.push((v, f()));
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, geom } => {
                let (dx, dw) = conv::backward(
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    g,
                    geom,
                    self.rg(*input),
                    self.rg(*weight),
                );
                if let Some(dx) = dx {
                    out.push((*input, dx));
                }
                if let Some(dw) = dw {
                    out.push((*weight, dw));
                }
            }
            Op::Relu(a) => push(*a, &|| {
                let x = self.value(*a).data();
                g.iter().zip(x).map(|(&g, &x)| if x > T::zero() { g } else { T::zero() }).collect()
            }),
            Op::Neg(a) => push(*a, &|| g.iter().map(|&v| -v).collect()),
            Op::AddScalar(a) | Op::Reshape(a) => push(*a, &|| g.to_vec()),
            Op::MulScalar(a, c) => push(*a, &|| g.iter().map(|&v| v * *c).collect()),
            Op::Sqrt(a) => push(*a, &|| {
                let two = T::from_f64(2.0);
                g.iter()
                    .zip(node.value.data())
                    .map(|(&g, &y)| if y > T::zero() { g / (two * y) } else { T::zero() })
                    .collect()
            }),
            Op::Log(a) => push(*a, &|| {
                g.iter().zip(self.value(*a).data()).map(|(&g, &x)| g / x).collect()
            }),
            Op::Clamp { input, lo, hi } => push(*input, &|| {
                g.iter()
                    .zip(self.value(*input).data())
                    .map(|(&g, &x)| if x >= *lo && x <= *hi { g } else { T::zero() })
                    .collect()
            }),
            Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                self.bcast_grads(*a, *b, *bc, g, &mut out, |_, _, g| g, |_, _, g| sign * g);
            }
            Op::Mul(a, b, bc) => {
                self.bcast_grads(*a, *b, *bc, g, &mut out, |_, y, g| g * y, |x, _, g| g * x);
            }
            Op::Div(a, b, bc) => {
                let eps = T::epsilon();
                self.bcast_grads(
                    *a,
                    *b,
                    *bc,
                    g,
                    &mut out,
                    |_, y, g| g / guard_denominator(y),
                    |x, y, g| if y.abs() < eps { T::zero() } else { -g * x / (y * y) },
                );
            }
            Op::Sum { input, plan } => push(*input, &|| {
                let mut d = vec![T::zero(); self.value(*input).numel()];
                plan.for_each(|i, o| d[i] = g[o]);
                d
            }),
            Op::Mean { input, plan } => push(*input, &|| {
                let n = T::from_f64(plan.count as f64);
                let mut d = vec![T::zero(); self.value(*input).numel()];
                plan.for_each(|i, o| d[i] = g[o] / n);
                d
            }),
            Op::Variance { input, plan, mean } => push(*input, &|| {
                let scale = T::from_f64(2.0 / plan.count as f64);
                let x = self.value(*input).data();
                let mut d = vec![T::zero(); x.len()];
                plan.for_each(|i, o| d[i] = g[o] * scale * (x[i] - mean[o]));
                d
            }),
            Op::Linear { input, weight } => {
                let (xs, ws) = (self.shape(*input), self.shape(*weight));
                let (b, n, m) = (xs[0], xs[1], ws[0]);
                let gm = MatRef::new(g, b, m);
                push(*input, &|| {
                    let mut d = vec![T::zero(); b * n];
                    gemm(gm, MatRef::new(self.value(*weight).data(), m, n), &mut d, false);
                    d
                });
                push(*weight, &|| {
                    let mut d = vec![T::zero(); m * n];
                    gemm(gm.t(), MatRef::new(self.value(*input).data(), b, n), &mut d, false);
                    d
                });
            }
            Op::L2Normalize { input, norms } => push(*input, &|| {
                let n = self.shape(*input)[1];
                let y = node.value.data();
                let mut d = Vec::with_capacity(y.len());
                for (r, (yr, gr)) in y.chunks(n).zip(g.chunks(n)).enumerate() {
                    let dot = yr.iter().zip(gr).fold(T::zero(), |s, (&a, &b)| s + a * b);
                    d.extend(yr.iter().zip(gr).map(|(&yv, &gv)| (gv - yv * dot) / norms[r]));
                }
                d
            }),
            Op::Custom { parents, backward } => {
                let values: Vec<&Tensor<T>> = parents.iter().map(|&p| self.value(p)).collect();
                let grads = backward(&values, &node.value, g);
                for (&p, pg) in parents.iter().zip(grads) {
                    if let Some(pg) = pg {
                        if self.rg(p) {
                            out.push((p, pg));
                        }
                    }
                }
            }
        }
        out
    }

    /// Gradient for both sides of a broadcast binary op. `da(x, y, g)` and
    /// `db(x, y, g)` give the per-element partials at the full output size.
    #[allow(clippy::too_many_arguments)]
    fn bcast_grads(
        &self,
        a: Var,
        b: Var,
        bc: Bcast,
        g: &[T],
        out: &mut Vec<(Var, Vec<T>)>,
        da: impl Fn(T, T, T) -> T,
        db: impl Fn(T, T, T) -> T,
    ) {
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let n = g.len();
        // expand the smaller operand once so the partials run over flat slices
        let expand = |small: &[T], inner: usize| -> Vec<T> {
            small.iter().flat_map(|&v| std::iter::repeat_n(v, inner)).collect()
        };
        let (xs, ys);
        let (xf, yf): (&[T], &[T]) = match bc {
            Bcast::Same => (x, y),
            Bcast::Rhs { inner } => {
                ys = expand(y, inner);
                (x, &ys)
            }
            Bcast::Lhs { inner } => {
                xs = expand(x, inner);
                (&xs, y)
            }
        };
        debug_assert_eq!((xf.len(), yf.len()), (n, n));
        if self.rg(a) {
            let full: Vec<T> = (0..n).map(|i| da(xf[i], yf[i], g[i])).collect();
            let d = match bc {
                Bcast::Lhs { inner } => reduce_to_small(full, inner),
                _ => full,
            };
            out.push((a, d));
        }
        if self.rg(b) {
            let full: Vec<T> = (0..n).map(|i| db(xf[i], yf[i], g[i])).collect();
            let d = match bc {
                Bcast::Rhs { inner } => reduce_to_small(full, inner),
                _ => full,
            };
            out.push((b, d));
        }
    }
}
