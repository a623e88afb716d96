use std::cell::{Ref, RefCell};
use std::fmt;

use super::{numel, Real, Result, Tensor, TensorError};

pub(crate) enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Gelu(usize),
    Powf(usize, T),
    Scale(usize, T),
    Shift(usize),
    MatMul(usize, usize),
    Sum(usize),
    SumAxis {
        a: usize,
        axis: usize,
    },
    Mean(usize),
    Softmax {
        a: usize,
        axis: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        axis: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Reshape(usize),
    Permute {
        a: usize,
        axes: Vec<usize>,
    },
    Reverse {
        a: usize,
        axis: usize,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Slice {
        a: usize,
        axis: usize,
        start: usize,
    },
    GatherRows {
        table: usize,
        rows: Vec<usize>,
    },
    BroadcastTo(usize),
}

pub(crate) struct Node<T> {
    pub value: Vec<T>,
    pub shape: Vec<usize>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

/// Append-only operation tape.
pub struct Graph<T: Real> {
    pub(crate) nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> fmt::Debug for Graph<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.len()).finish()
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Real> {
    pub(crate) id: usize,
    pub(crate) graph: &'g Graph<T>,
}

impl<T: Real> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a copy of `tensor`; `tensor.requires_grad` decides whether
    /// gradients flow to it.
    pub fn leaf(&self, tensor: &Tensor<T>) -> Var<'_, T> {
        self.push(
            tensor.data().to_vec(),
            tensor.shape().to_vec(),
            Op::Leaf,
            tensor.requires_grad,
        )
    }

    pub fn constant(&self, shape: Vec<usize>, data: Vec<T>) -> Result<Var<'_, T>> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn variable(&self, shape: Vec<usize>, data: Vec<T>) -> Result<Var<'_, T>> {
        let t = Tensor::new(shape, data)?.with_grad();
        Ok(self.leaf(&t))
    }

    pub fn scalar(&self, v: T) -> Var<'_, T> {
        self.leaf(&Tensor::scalar(v))
    }

    pub fn zeros(&self, shape: Vec<usize>) -> Result<Var<'_, T>> {
        let n = numel(&shape);
        self.constant(shape, vec![T::zero(); n])
    }

    pub(crate) fn push(&self, value: Vec<T>, shape: Vec<usize>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        debug_assert_eq!(value.len(), numel(&shape));
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
        });
        Var {
            id: nodes.len() - 1,
            graph: self,
        }
    }

    fn node(&self, id: usize) -> Ref<'_, Node<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[id])
    }

    fn grad_flag(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Concatenates `parts` along `axis`; all other extents must agree.
    pub fn concat<'g>(&'g self, parts: &[Var<'g, T>], axis: usize) -> Result<Var<'g, T>> {
        let first = parts.first().ok_or(TensorError::InvalidArgument {
            op: "concat",
            detail: "no operands".into(),
        })?;
        for p in parts {
            self.check_owner(p)?;
        }
        let shape0 = first.shape();
        check_axis("concat", &shape0, axis)?;
        let mut total = 0;
        for p in parts {
            let s = p.shape();
            let compatible =
                s.len() == shape0.len() && s.iter().zip(&shape0).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: shape0.clone(),
                    rhs: s,
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&shape0, axis);
        let mut out_shape = shape0.clone();
        out_shape[axis] = total;
        let mut out = Vec::with_capacity(numel(&out_shape));
        {
            let nodes = self.nodes.borrow();
            for o in 0..outer {
                for p in parts {
                    let n = &nodes[p.id];
                    let len = n.shape[axis];
                    out.extend_from_slice(&n.value[o * len * inner..(o + 1) * len * inner]);
                }
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = self.grad_flag(&ids);
        Ok(self.push(out, out_shape, Op::Concat { parts: ids, axis }, rg))
    }

    fn check_owner(&self, v: &Var<'_, T>) -> Result<()> {
        if std::ptr::eq(self, v.graph) {
            Ok(())
        } else {
            Err(TensorError::ForeignVar)
        }
    }
}

pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(TensorError::InvalidArgument {
            op,
            detail: format!("axis {axis} out of range for shape {shape:?}"),
        });
    }
    Ok(())
}

fn scalar_shape(mut shape: Vec<usize>) -> Vec<usize> {
    if shape.is_empty() {
        shape.push(1);
    }
    shape
}

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shapes(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            _ if da == db => da,
            (1, _) => db,
            (_, 1) => da,
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// How an operand of shape `input` maps onto a broadcast result `out`.
pub(crate) enum Spread {
    /// Same number of elements in the same order.
    Direct,
    /// Operand equals a trailing block of `out`; index is `i % len`.
    Tail(usize),
    General(Vec<usize>),
}

impl Spread {
    pub(crate) fn new(out: &[usize], input: &[usize]) -> Self {
        let n_in = numel(input);
        if n_in == numel(out) {
            return Spread::Direct;
        }
        let mut stripped = input;
        while stripped.len() > 1 && stripped[0] == 1 {
            stripped = &stripped[1..];
        }
        if n_in == 1 || (stripped.len() <= out.len() && out.ends_with(stripped)) {
            return Spread::Tail(n_in);
        }
        Spread::General(index_map(out, input))
    }

    #[inline]
    pub(crate) fn index(&self, i: usize) -> usize {
        match self {
            Spread::Direct => i,
            Spread::Tail(n) => i % n,
            Spread::General(map) => map[i],
        }
    }
}

fn index_map(out: &[usize], input: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let offset = rank - input.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..input.len()).rev() {
        if input[d] != 1 {
            strides[d + offset] = acc;
        }
        acc *= input[d];
    }
    let n = numel(out);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..n {
        map.push(flat);
        for d in (0..rank).rev() {
            idx[d] += 1;
            flat += strides[d];
            if idx[d] < out[d] {
                break;
            }
            flat -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

pub(crate) fn permute_data<T: Copy>(data: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..n {
        out.push(data[flat]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            flat += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            flat -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    out
}

/// Shapes of a (possibly batched) matrix product.
pub(crate) struct MatMulDims {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// `true` when `b` is a single matrix shared by every batch entry.
    pub shared_rhs: bool,
    pub out_shape: Vec<usize>,
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatMulDims> {
    let mismatch = || TensorError::ShapeMismatch {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(mismatch());
    }
    let k = a[a.len() - 1];
    if b[b.len() - 2] != k {
        return Err(mismatch());
    }
    let n = b[b.len() - 1];
    let mut out_shape = a[..a.len() - 1].to_vec();
    out_shape.push(n);
    if b.len() == 2 {
        let m = numel(a) / k;
        return Ok(MatMulDims {
            batch: 1,
            m,
            k,
            n,
            shared_rhs: true,
            out_shape,
        });
    }
    if a.len() != b.len() || a[..a.len() - 2] != b[..b.len() - 2] {
        return Err(mismatch());
    }
    Ok(MatMulDims {
        batch: a[..a.len() - 2].iter().product(),
        m: a[a.len() - 2],
        k,
        n,
        shared_rhs: false,
        out_shape,
    })
}

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub(crate) const GELU_A: f64 = 0.044_715;

impl<'g, T: Real> Var<'g, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.node(self.id).shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.graph.node(self.id).value.len()
    }

    pub fn value(&self) -> Vec<T> {
        self.graph.node(self.id).value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&[T]) -> R) -> R {
        f(&self.graph.node(self.id).value)
    }

    /// First element; intended for scalars.
    pub fn item(&self) -> T {
        self.graph.node(self.id).value[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.node(self.id).requires_grad
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        let n = self.graph.node(self.id);
        Tensor::new(n.shape.clone(), n.value.clone()).unwrap()
    }

    fn binary(
        self,
        other: Var<'g, T>,
        op: &'static str,
        f: impl Fn(T, T) -> T,
        make: fn(usize, usize) -> Op<T>,
    ) -> Result<Var<'g, T>> {
        self.graph.check_owner(&other)?;
        let (value, shape) = {
            let nodes = self.graph.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let shape = broadcast_shapes(op, &a.shape, &b.shape)?;
            let n = numel(&shape);
            let value = if a.shape == b.shape {
                a.value.iter().zip(&b.value).map(|(&x, &y)| f(x, y)).collect()
            } else {
                let sa = Spread::new(&shape, &a.shape);
                let sb = Spread::new(&shape, &b.shape);
                match (&sa, &sb) {
                    (Spread::Direct, Spread::Tail(_)) => {
                        let mut v = Vec::with_capacity(n);
                        for row in a.value.chunks_exact(b.value.len()) {
                            v.extend(row.iter().zip(&b.value).map(|(&x, &y)| f(x, y)));
                        }
                        v
                    }
                    (Spread::Tail(_), Spread::Direct) => {
                        let mut v = Vec::with_capacity(n);
                        for row in b.value.chunks_exact(a.value.len()) {
                            v.extend(a.value.iter().zip(row).map(|(&x, &y)| f(x, y)));
                        }
                        v
                    }
                    _ => (0..n).map(|i| f(a.value[sa.index(i)], b.value[sb.index(i)])).collect(),
                }
            };
            (value, shape)
        };
        let rg = self.graph.grad_flag(&[self.id, other.id]);
        Ok(self.graph.push(value, shape, make(self.id, other.id), rg))
    }

    fn unary(self, f: impl Fn(T) -> T, op: Op<T>) -> Var<'g, T> {
        let (value, shape, rg) = {
            let n = self.graph.node(self.id);
            (
                n.value.iter().map(|&x| f(x)).collect(),
                n.shape.clone(),
                n.requires_grad,
            )
        };
        self.graph.push(value, shape, op, rg)
    }

    pub fn add(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn div(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        if other.with_value(|v| v.iter().any(|x| *x == T::zero())) {
            return Err(TensorError::Domain {
                op: "div",
                detail: "zero divisor".into(),
            });
        }
        self.binary(other, "div", |a, b| a / b, Op::Div)
    }

    pub fn neg(self) -> Var<'g, T> {
        self.unary(|x| -x, Op::Neg(self.id))
    }

    pub fn exp(self) -> Var<'g, T> {
        self.unary(|x| x.exp(), Op::Exp(self.id))
    }

    pub fn log(self) -> Result<Var<'g, T>> {
        if let Some(bad) = self.with_value(|v| v.iter().copied().find(|x| *x <= T::zero())) {
            return Err(TensorError::Domain {
                op: "log",
                detail: format!("non-positive operand {bad}"),
            });
        }
        Ok(self.unary(|x| x.ln(), Op::Log(self.id)))
    }

    pub fn tanh(self) -> Var<'g, T> {
        self.unary(|x| x.tanh(), Op::Tanh(self.id))
    }

    /// Tanh approximation of the Gaussian error linear unit.
    pub fn gelu(self) -> Var<'g, T> {
        let c = T::lit(GELU_C);
        let a = T::lit(GELU_A);
        let half = T::lit(0.5);
        self.unary(
            |x| half * x * (T::one() + (c * (x + a * x * x * x)).tanh()),
            Op::Gelu(self.id),
        )
    }

    pub fn powf(self, p: T) -> Result<Var<'g, T>> {
        let integral = p.fract() == T::zero();
        let bad = self.with_value(|v| {
            v.iter()
                .copied()
                .find(|&x| (x < T::zero() && !integral) || (x == T::zero() && p < T::zero()))
        });
        if let Some(x) = bad {
            return Err(TensorError::Domain {
                op: "powf",
                detail: format!("{x} raised to {p}"),
            });
        }
        Ok(self.unary(|x| x.powf(p), Op::Powf(self.id, p)))
    }

    pub fn scale(self, c: T) -> Var<'g, T> {
        self.unary(|x| x * c, Op::Scale(self.id, c))
    }

    pub fn add_scalar(self, c: T) -> Var<'g, T> {
        self.unary(|x| x + c, Op::Shift(self.id))
    }

    /// Matrix product over the last two axes. `other` is either a single
    /// matrix (applied to every leading index of `self`) or a batch with the
    /// same leading extents.
    pub fn matmul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.graph.check_owner(&other)?;
        let (value, shape) = {
            let nodes = self.graph.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let dims = matmul_dims(&a.shape, &b.shape)?;
            let MatMulDims { batch, m, k, n, .. } = dims;
            let mut out = vec![T::zero(); numel(&dims.out_shape)];
            for bi in 0..batch {
                let bs = if dims.shared_rhs { 0 } else { bi * k * n };
                T::gemm(
                    m,
                    k,
                    n,
                    &a.value[bi * m * k..],
                    k as isize,
                    1,
                    &b.value[bs..],
                    n as isize,
                    1,
                    &mut out[bi * m * n..],
                    false,
                );
            }
            (out, dims.out_shape)
        };
        let rg = self.graph.grad_flag(&[self.id, other.id]);
        Ok(self.graph.push(value, shape, Op::MatMul(self.id, other.id), rg))
    }

    pub fn sum(self) -> Var<'g, T> {
        let (value, rg) = {
            let n = self.graph.node(self.id);
            let mut s = T::zero();
            for &v in &n.value {
                s += v;
            }
            (vec![s], n.requires_grad)
        };
        self.graph.push(value, vec![1], Op::Sum(self.id), rg)
    }

    pub fn mean(self) -> Var<'g, T> {
        let (value, rg) = {
            let n = self.graph.node(self.id);
            let mut s = T::zero();
            for &v in &n.value {
                s += v;
            }
            (vec![s / T::lit(n.value.len() as f64)], n.requires_grad)
        };
        self.graph.push(value, vec![1], Op::Mean(self.id), rg)
    }

    /// Sums out `axis`; the axis is removed from the shape.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'g, T>> {
        let (value, shape, rg) = {
            let n = self.graph.node(self.id);
            check_axis("sum_axis", &n.shape, axis)?;
            let (outer, len, inner) = split_axis(&n.shape, axis);
            let mut out = vec![T::zero(); outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    let row = &n.value[(o * len + l) * inner..(o * len + l + 1) * inner];
                    for (dst, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                        *dst += v;
                    }
                }
            }
            let mut shape = n.shape.clone();
            shape.remove(axis);
            (out, scalar_shape(shape), n.requires_grad)
        };
        Ok(self.graph.push(value, shape, Op::SumAxis { a: self.id, axis }, rg))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'g, T>> {
        let len = self.shape().get(axis).copied().ok_or(TensorError::InvalidArgument {
            op: "mean_axis",
            detail: format!("axis {axis} out of range"),
        })?;
        Ok(self.sum_axis(axis)?.scale(T::one() / T::lit(len as f64)))
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'g, T>> {
        let (value, shape, rg) = {
            let n = self.graph.node(self.id);
            check_axis("softmax", &n.shape, axis)?;
            let (outer, len, inner) = split_axis(&n.shape, axis);
            let mut out = vec![T::zero(); n.value.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let mut max = T::neg_infinity();
                    for l in 0..len {
                        max = max.max(n.value[at(l)]);
                    }
                    let mut total = T::zero();
                    for l in 0..len {
                        let e = (n.value[at(l)] - max).exp();
                        out[at(l)] = e;
                        total += e;
                    }
                    for l in 0..len {
                        out[at(l)] = out[at(l)] / total;
                    }
                }
            }
            (out, n.shape.clone(), n.requires_grad)
        };
        Ok(self.graph.push(value, shape, Op::Softmax { a: self.id, axis }, rg))
    }

    /// Normalizes along `axis`, then applies the learned per-feature
    /// `gamma` scale and `beta` shift (both of shape `[len(axis)]`).
    pub fn layer_norm(self, gamma: Var<'g, T>, beta: Var<'g, T>, axis: usize, eps: T) -> Result<Var<'g, T>> {
        self.graph.check_owner(&gamma)?;
        self.graph.check_owner(&beta)?;
        let (value, shape, xhat, rstd) = {
            let nodes = self.graph.nodes.borrow();
            let (x, g, b) = (&nodes[self.id], &nodes[gamma.id], &nodes[beta.id]);
            check_axis("layer_norm", &x.shape, axis)?;
            let (outer, len, inner) = split_axis(&x.shape, axis);
            for p in [g, b] {
                if p.shape != [len] {
                    return Err(TensorError::ShapeMismatch {
                        op: "layer_norm",
                        lhs: x.shape.clone(),
                        rhs: p.shape.clone(),
                    });
                }
            }
            let inv_len = T::one() / T::lit(len as f64);
            let mut out = vec![T::zero(); x.value.len()];
            let mut xhat = vec![T::zero(); x.value.len()];
            let mut rstd = vec![T::zero(); outer * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let mut mean = T::zero();
                    for l in 0..len {
                        mean += x.value[at(l)];
                    }
                    mean *= inv_len;
                    let mut var = T::zero();
                    for l in 0..len {
                        let d = x.value[at(l)] - mean;
                        var += d * d;
                    }
                    var *= inv_len;
                    let r = T::one() / (var + eps).sqrt();
                    rstd[o * inner + i] = r;
                    for l in 0..len {
                        let h = (x.value[at(l)] - mean) * r;
                        xhat[at(l)] = h;
                        out[at(l)] = h * g.value[l] + b.value[l];
                    }
                }
            }
            (out, x.shape.clone(), xhat, rstd)
        };
        let rg = self.graph.grad_flag(&[self.id, gamma.id, beta.id]);
        Ok(self.graph.push(
            value,
            shape,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                axis,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Var<'g, T>> {
        let (value, rg) = {
            let n = self.graph.node(self.id);
            if numel(&shape) != n.value.len() || shape.contains(&0) {
                return Err(TensorError::ShapeMismatch {
                    op: "reshape",
                    lhs: n.shape.clone(),
                    rhs: shape,
                });
            }
            (n.value.clone(), n.requires_grad)
        };
        Ok(self.graph.push(value, shape, Op::Reshape(self.id), rg))
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'g, T>> {
        let (value, shape, rg) = {
            let n = self.graph.node(self.id);
            let mut seen = vec![false; n.shape.len()];
            let valid = axes.len() == n.shape.len()
                && axes
                    .iter()
                    .all(|&a| a < seen.len() && !std::mem::replace(&mut seen[a], true));
            if !valid {
                return Err(TensorError::InvalidArgument {
                    op: "permute",
                    detail: format!("{axes:?} is not a permutation of the axes of {:?}", n.shape),
                });
            }
            let shape = axes.iter().map(|&a| n.shape[a]).collect();
            (permute_data(&n.value, &n.shape, axes), shape, n.requires_grad)
        };
        Ok(self.graph.push(
            value,
            shape,
            Op::Permute {
                a: self.id,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'g, T>> {
        let rank = self.shape().len();
        if rank < 2 {
            return Err(TensorError::InvalidArgument {
                op: "transpose",
                detail: "needs rank >= 2".into(),
            });
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(&axes)
    }

    /// Reverses the order of entries along `axis`.
    pub fn reverse(self, axis: usize) -> Result<Var<'g, T>> {
        let (value, shape, rg) = {
            let n = self.graph.node(self.id);
            check_axis("reverse", &n.shape, axis)?;
            let (outer, len, inner) = split_axis(&n.shape, axis);
            let mut out = Vec::with_capacity(n.value.len());
            for o in 0..outer {
                for l in (0..len).rev() {
                    let s = (o * len + l) * inner;
                    out.extend_from_slice(&n.value[s..s + inner]);
                }
            }
            (out, n.shape.clone(), n.requires_grad)
        };
        Ok(self.graph.push(value, shape, Op::Reverse { a: self.id, axis }, rg))
    }

    /// Entries `start..end` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'g, T>> {
        let (value, shape, rg) = {
            let n = self.graph.node(self.id);
            check_axis("slice", &n.shape, axis)?;
            if start >= end || end > n.shape[axis] {
                return Err(TensorError::InvalidArgument {
                    op: "slice",
                    detail: format!("range {start}..{end} invalid for extent {}", n.shape[axis]),
                });
            }
            let (outer, len, inner) = split_axis(&n.shape, axis);
            let mut out = Vec::with_capacity(outer * (end - start) * inner);
            for o in 0..outer {
                out.extend_from_slice(&n.value[(o * len + start) * inner..(o * len + end) * inner]);
            }
            let mut shape = n.shape.clone();
            shape[axis] = end - start;
            (out, shape, n.requires_grad)
        };
        Ok(self.graph.push(
            value,
            shape,
            Op::Slice {
                a: self.id,
                axis,
                start,
            },
            rg,
        ))
    }

    /// Selects rows of a rank-2 table, e.g. an embedding lookup.
    pub fn gather_rows(self, rows: &[usize]) -> Result<Var<'g, T>> {
        let (value, shape, rg) = {
            let n = self.graph.node(self.id);
            if n.shape.len() != 2 {
                return Err(TensorError::InvalidArgument {
                    op: "gather_rows",
                    detail: format!("table must be rank 2, got {:?}", n.shape),
                });
            }
            let (count, width) = (n.shape[0], n.shape[1]);
            if let Some(&r) = rows.iter().find(|&&r| r >= count) {
                return Err(TensorError::InvalidArgument {
                    op: "gather_rows",
                    detail: format!("row {r} out of range for {count} rows"),
                });
            }
            if rows.is_empty() {
                return Err(TensorError::InvalidArgument {
                    op: "gather_rows",
                    detail: "no rows requested".into(),
                });
            }
            let mut out = Vec::with_capacity(rows.len() * width);
            for &r in rows {
                out.extend_from_slice(&n.value[r * width..(r + 1) * width]);
            }
            (out, vec![rows.len(), width], n.requires_grad)
        };
        Ok(self.graph.push(
            value,
            shape,
            Op::GatherRows {
                table: self.id,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    pub fn broadcast_to(self, shape: Vec<usize>) -> Result<Var<'g, T>> {
        let (value, rg) = {
            let n = self.graph.node(self.id);
            let out = broadcast_shapes("broadcast_to", &n.shape, &shape)?;
            if out != shape {
                return Err(TensorError::ShapeMismatch {
                    op: "broadcast_to",
                    lhs: n.shape.clone(),
                    rhs: shape,
                });
            }
            let spread = Spread::new(&shape, &n.shape);
            (
                (0..numel(&shape)).map(|i| n.value[spread.index(i)]).collect(),
                n.requires_grad,
            )
        };
        Ok(self.graph.push(value, shape, Op::BroadcastTo(self.id), rg))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_shape_rule() {
        let g = Graph::<f32>::new();
        let a = g.constant(vec![2, 3], vec![1.0; 6]).unwrap();
        let b = g.constant(vec![3, 4], vec![1.0; 12]).unwrap();
        let c = a.matmul(b).unwrap();
        assert_eq!(c.shape(), vec![2, 4]);
        assert!(c.value().iter().all(|&v| v == 3.0));
        let bad = g.constant(vec![2, 4], vec![1.0; 8]).unwrap();
        let err = a.matmul(bad).unwrap_err();
        assert!(err.to_string().contains("matmul"), "{err}");
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let g = Graph::<f32>::new();
        let x = g.constant(vec![2, 3], vec![0.5, -2.0, 3.0, 10.0, 10.0, -10.0]).unwrap();
        for axis in 0..2 {
            let p = x.softmax(axis).unwrap().value();
            let sums: Vec<f32> = if axis == 1 {
                p.chunks(3).map(|r| r.iter().sum()).collect()
            } else {
                (0..3).map(|j| p[j] + p[3 + j]).collect()
            };
            for s in sums {
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn exp_log_inverse() {
        let g = Graph::<f32>::new();
        let vals: Vec<f32> = (0..50).map(|i| 0.1 + i as f32 * 0.198).collect();
        let x = g.constant(vec![50], vals.clone()).unwrap();
        let y = x.log().unwrap().exp().value();
        for (a, b) in vals.iter().zip(y) {
            assert!((a - b).abs() <= 1e-6 * a.max(1.0));
        }
    }

    #[test]
    fn domain_errors() {
        let g = Graph::<f64>::new();
        let x = g.constant(vec![2], vec![1.0, 0.0]).unwrap();
        assert!(matches!(x.log(), Err(TensorError::Domain { op: "log", .. })));
        let one = g.scalar(1.0);
        assert!(matches!(one.div(x), Err(TensorError::Domain { op: "div", .. })));
        let neg = g.constant(vec![1], vec![-2.0]).unwrap();
        assert!(neg.powf(0.5).is_err());
        assert_eq!(neg.powf(2.0).unwrap().item(), 4.0);
    }

    #[test]
    fn broadcasting_rules() {
        let g = Graph::<f64>::new();
        let a = g.constant(vec![2, 1, 3], (0..6).map(f64::from).collect()).unwrap();
        let b = g.constant(vec![4, 1], (0..4).map(f64::from).collect()).unwrap();
        let c = a.add(b).unwrap();
        assert_eq!(c.shape(), vec![2, 4, 3]);
        let v = c.value();
        // c[i, j, k] = a[i, 0, k] + b[j, 0]
        assert_eq!(v[(4 + 2) * 3 + 1], 4.0 + 2.0);
        let bad = g.constant(vec![5], vec![0.0; 5]).unwrap();
        assert!(matches!(a.mul(bad), Err(TensorError::ShapeMismatch { op: "mul", .. })));
    }

    #[test]
    fn permute_and_reverse() {
        let g = Graph::<f64>::new();
        let x = g.constant(vec![2, 3], (0..6).map(f64::from).collect()).unwrap();
        assert_eq!(x.transpose().unwrap().value(), vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        assert_eq!(x.reverse(1).unwrap().value(), vec![2.0, 1.0, 0.0, 5.0, 4.0, 3.0]);
        let s = x.slice(1, 1, 3).unwrap();
        assert_eq!(s.value(), vec![1.0, 2.0, 4.0, 5.0]);
        let c = g.concat(&[x, s], 1).unwrap();
        assert_eq!(c.shape(), vec![2, 5]);
        assert_eq!(c.value()[3..5], [1.0, 2.0]);
    }

    #[test]
    fn foreign_vars_are_rejected() {
        let g1 = Graph::<f32>::new();
        let g2 = Graph::<f32>::new();
        let a = g1.scalar(1.0);
        let b = g2.scalar(2.0);
        assert_eq!(a.add(b).unwrap_err(), TensorError::ForeignVar);
    }
}
