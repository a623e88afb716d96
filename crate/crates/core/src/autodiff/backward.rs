use super::graph::{matmul_dims, permute_data, split_axis, Node, Op, Spread, GELU_A, GELU_C};
use super::{numel, Graph, Real, Result, TensorError, Var};

struct Grads<T> {
    slots: Vec<Option<Vec<T>>>,
}

impl<T: Real> Grads<T> {
    /// Returns the accumulator for `id`, or `None` when `id` is not
    /// differentiable.
    fn slot<'a>(&'a mut self, nodes: &[Node<T>], id: usize) -> Option<&'a mut Vec<T>> {
        let node = &nodes[id];
        if !node.requires_grad {
            return None;
        }
        Some(self.slots[id].get_or_insert_with(|| vec![T::zero(); node.value.len()]))
    }
}

impl<T: Real> Graph<T> {
    /// Reverse-mode gradient of the scalar `output` with respect to each of
    /// `wrt`. Tensors that do not influence `output` (or that were recorded
    /// without `requires_grad`) get an all-zero gradient. The tape is left
    /// intact, so this may be called repeatedly with different outputs.
    pub fn gradient(&self, output: Var<'_, T>, wrt: &[Var<'_, T>]) -> Result<Vec<Vec<T>>> {
        for v in std::iter::once(&output).chain(wrt) {
            if !std::ptr::eq(self, v.graph) {
                return Err(TensorError::ForeignVar);
            }
        }
        let nodes = self.nodes.borrow();
        let out = &nodes[output.id];
        if out.value.len() != 1 {
            return Err(TensorError::NonScalar(out.shape.clone()));
        }
        let mut grads = Grads {
            slots: (0..=output.id).map(|_| None).collect(),
        };
        if out.requires_grad {
            grads.slots[output.id] = Some(vec![T::one()]);
        }
        for id in (0..=output.id).rev() {
            let Some(g) = grads.slots[id].take() else {
                continue;
            };
            backprop(&nodes, id, &g, &mut grads);
            grads.slots[id] = Some(g);
        }
        Ok(wrt
            .iter()
            .map(|v| match grads.slots.get_mut(v.id).and_then(Option::take) {
                Some(g) => {
                    // Restore for duplicates in `wrt`.
                    let copy = g.clone();
                    grads.slots[v.id] = Some(g);
                    copy
                }
                None => vec![T::zero(); nodes[v.id].value.len()],
            })
            .collect())
    }
}

fn reduce_into<T: Real>(
    grads: &mut Grads<T>,
    nodes: &[Node<T>],
    id: usize,
    out_shape: &[usize],
    g: &[T],
    mut f: impl FnMut(usize, usize) -> T,
) {
    let spread = Spread::new(out_shape, &nodes[id].shape);
    if let Some(acc) = grads.slot(nodes, id) {
        match spread {
            Spread::Direct => {
                for (i, (a, &gi)) in acc.iter_mut().zip(g).enumerate() {
                    *a += gi * f(i, i);
                }
            }
            Spread::Tail(n) => {
                for (r, row) in g.chunks_exact(n).enumerate() {
                    for (j, (a, &gi)) in acc.iter_mut().zip(row).enumerate() {
                        *a += gi * f(r * n + j, j);
                    }
                }
            }
            Spread::General(_) => {
                for (i, &gi) in g.iter().enumerate() {
                    let j = spread.index(i);
                    acc[j] += gi * f(i, j);
                }
            }
        }
    }
}

fn backprop<T: Real>(nodes: &[Node<T>], id: usize, g: &[T], grads: &mut Grads<T>) {
    let node = &nodes[id];
    let shape = &node.shape;
    match &node.op {
        Op::Leaf => {}
        &Op::Add(a, b) => {
            reduce_into(grads, nodes, a, shape, g, |_, _| T::one());
            reduce_into(grads, nodes, b, shape, g, |_, _| T::one());
        }
        &Op::Sub(a, b) => {
            reduce_into(grads, nodes, a, shape, g, |_, _| T::one());
            reduce_into(grads, nodes, b, shape, g, |_, _| -T::one());
        }
        &Op::Mul(a, b) => {
            let (sa, sb) = (Spread::new(shape, &nodes[a].shape), Spread::new(shape, &nodes[b].shape));
            let (va, vb) = (&nodes[a].value, &nodes[b].value);
            reduce_into(grads, nodes, a, shape, g, |i, _| vb[sb.index(i)]);
            reduce_into(grads, nodes, b, shape, g, |i, _| va[sa.index(i)]);
        }
        &Op::Div(a, b) => {
            let (sa, sb) = (Spread::new(shape, &nodes[a].shape), Spread::new(shape, &nodes[b].shape));
            let (va, vb) = (&nodes[a].value, &nodes[b].value);
            reduce_into(grads, nodes, a, shape, g, |i, _| T::one() / vb[sb.index(i)]);
            reduce_into(grads, nodes, b, shape, g, |i, _| {
                let d = vb[sb.index(i)];
                -va[sa.index(i)] / (d * d)
            });
        }
        &Op::Neg(a) => unary(grads, nodes, a, g, |_| -T::one()),
        &Op::Exp(a) => unary(grads, nodes, a, g, |i| node.value[i]),
        &Op::Log(a) => {
            let x = &nodes[a].value;
            unary(grads, nodes, a, g, |i| T::one() / x[i])
        }
        &Op::Tanh(a) => unary(grads, nodes, a, g, |i| T::one() - node.value[i] * node.value[i]),
        &Op::Gelu(a) => {
            let x = &nodes[a].value;
            let (c, k, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
            let three = T::lit(3.0);
            unary(grads, nodes, a, g, |i| {
                let v = x[i];
                let th = (c * (v + k * v * v * v)).tanh();
                half * (T::one() + th) + half * v * (T::one() - th * th) * c * (T::one() + three * k * v * v)
            })
        }
        &Op::Powf(a, p) => {
            let x = &nodes[a].value;
            unary(grads, nodes, a, g, |i| p * x[i].powf(p - T::one()))
        }
        &Op::Scale(a, c) => unary(grads, nodes, a, g, |_| c),
        &Op::Shift(a) => unary(grads, nodes, a, g, |_| T::one()),
        &Op::MatMul(a, b) => {
            let (na, nb) = (&nodes[a], &nodes[b]);
            let dims = matmul_dims(&na.shape, &nb.shape).expect("validated in forward");
            let (m, k, n) = (dims.m, dims.k, dims.n);
            if let Some(da) = grads.slot(nodes, a) {
                // dA = dC · Bᵀ
                for bi in 0..dims.batch {
                    let bs = if dims.shared_rhs { 0 } else { bi * k * n };
                    T::gemm(
                        m,
                        n,
                        k,
                        &g[bi * m * n..],
                        n as isize,
                        1,
                        &nb.value[bs..],
                        1,
                        n as isize,
                        &mut da[bi * m * k..],
                        true,
                    );
                }
            }
            if let Some(db) = grads.slot(nodes, b) {
                // dB = Aᵀ · dC, summed over the batch when B is shared.
                for bi in 0..dims.batch {
                    let bs = if dims.shared_rhs { 0 } else { bi * k * n };
                    T::gemm(
                        k,
                        m,
                        n,
                        &na.value[bi * m * k..],
                        1,
                        k as isize,
                        &g[bi * m * n..],
                        n as isize,
                        1,
                        &mut db[bs..],
                        true,
                    );
                }
            }
        }
        &Op::Sum(a) => unary(grads, nodes, a, &vec![g[0]; nodes[a].value.len()], |_| T::one()),
        &Op::Mean(a) => {
            let len = nodes[a].value.len();
            let s = g[0] / T::lit(len as f64);
            unary(grads, nodes, a, &vec![s; len], |_| T::one())
        }
        &Op::SumAxis { a, axis } => {
            let (outer, len, inner) = split_axis(&nodes[a].shape, axis);
            if let Some(da) = grads.slot(nodes, a) {
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            da[(o * len + l) * inner + i] += g[o * inner + i];
                        }
                    }
                }
            }
        }
        &Op::Softmax { a, axis } => {
            let (outer, len, inner) = split_axis(shape, axis);
            let p = &node.value;
            if let Some(da) = grads.slot(nodes, a) {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let mut dot = T::zero();
                        for l in 0..len {
                            dot += g[at(l)] * p[at(l)];
                        }
                        for l in 0..len {
                            da[at(l)] += p[at(l)] * (g[at(l)] - dot);
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            axis,
            xhat,
            rstd,
        } => {
            let (outer, len, inner) = split_axis(shape, *axis);
            let gv = &nodes[*gamma].value;
            if let Some(dg) = grads.slot(nodes, *gamma) {
                for (j, (&gi, &h)) in g.iter().zip(xhat).enumerate() {
                    dg[(j / inner) % len] += gi * h;
                }
            }
            if let Some(db) = grads.slot(nodes, *beta) {
                for (j, &gi) in g.iter().enumerate() {
                    db[(j / inner) % len] += gi;
                }
            }
            if let Some(dx) = grads.slot(nodes, *x) {
                let inv_len = T::one() / T::lit(len as f64);
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for l in 0..len {
                            let d = g[at(l)] * gv[l];
                            mean_d += d;
                            mean_dh += d * xhat[at(l)];
                        }
                        mean_d *= inv_len;
                        mean_dh *= inv_len;
                        let r = rstd[o * inner + i];
                        for l in 0..len {
                            let d = g[at(l)] * gv[l];
                            dx[at(l)] += r * (d - mean_d - xhat[at(l)] * mean_dh);
                        }
                    }
                }
            }
        }
        &Op::Reshape(a) => unary(grads, nodes, a, g, |_| T::one()),
        Op::Permute { a, axes } => {
            let mut inverse = vec![0; axes.len()];
            for (i, &ax) in axes.iter().enumerate() {
                inverse[ax] = i;
            }
            let back = permute_data(g, shape, &inverse);
            unary(grads, nodes, *a, &back, |_| T::one());
        }
        &Op::Reverse { a, axis } => {
            let (outer, len, inner) = split_axis(shape, axis);
            if let Some(da) = grads.slot(nodes, a) {
                for o in 0..outer {
                    for l in 0..len {
                        let src = (o * len + l) * inner;
                        let dst = (o * len + (len - 1 - l)) * inner;
                        for i in 0..inner {
                            da[dst + i] += g[src + i];
                        }
                    }
                }
            }
        }
        Op::Concat { parts, axis } => {
            let (outer, total, inner) = split_axis(shape, *axis);
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].shape[*axis];
                if let Some(dp) = grads.slot(nodes, p) {
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        for (d, &s) in dp[o * len * inner..(o + 1) * len * inner]
                            .iter_mut()
                            .zip(&g[src..src + len * inner])
                        {
                            *d += s;
                        }
                    }
                }
                offset += len;
            }
        }
        &Op::Slice { a, axis, start } => {
            let (outer, len, inner) = split_axis(&nodes[a].shape, axis);
            let width = shape[axis];
            if let Some(da) = grads.slot(nodes, a) {
                for o in 0..outer {
                    let dst = (o * len + start) * inner;
                    for (d, &s) in da[dst..dst + width * inner]
                        .iter_mut()
                        .zip(&g[o * width * inner..(o + 1) * width * inner])
                    {
                        *d += s;
                    }
                }
            }
        }
        Op::GatherRows { table, rows } => {
            let width = nodes[*table].shape[1];
            if let Some(dt) = grads.slot(nodes, *table) {
                for (i, &r) in rows.iter().enumerate() {
                    for c in 0..width {
                        dt[r * width + c] += g[i * width + c];
                    }
                }
            }
        }
        &Op::BroadcastTo(a) => reduce_into(grads, nodes, a, shape, g, |_, _| T::one()),
    }
}

fn unary<T: Real>(grads: &mut Grads<T>, nodes: &[Node<T>], a: usize, g: &[T], f: impl Fn(usize) -> T) {
    debug_assert_eq!(g.len(), numel(&nodes[a].shape));
    if let Some(da) = grads.slot(nodes, a) {
        for (i, (d, &gi)) in da.iter_mut().zip(g).enumerate() {
            *d += gi * f(i);
        }
    }
}
