use super::tensor::{numel, Tensor};
use super::AutodiffError;
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy)]
struct AxisSplit {
    outer: usize,
    len: usize,
    inner: usize,
}

impl AxisSplit {
    fn new(shape: &[usize], axis: usize) -> Self {
        Self {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Binary {
        kind: BinKind,
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: T,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
    MeanAxis {
        a: Var,
        split: AxisSplit,
    },
    GatherRows {
        a: Var,
        idx: Vec<usize>,
    },
    Softmax {
        a: Var,
        split: AxisSplit,
    },
    LogSoftmax {
        a: Var,
        split: AxisSplit,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu {
        a: Var,
    },
    Square {
        a: Var,
    },
    Log {
        a: Var,
    },
    Exp {
        a: Var,
    },
    Cosine {
        a: Var,
        b: Var,
        a_unit: Vec<T>,
        b_unit: Vec<T>,
        a_norm: Vec<T>,
        b_norm: Vec<T>,
        d: usize,
    },
    Concat {
        parts: Vec<Var>,
        outer: usize,
        chunks: Vec<usize>,
    },
    Reshape {
        a: Var,
    },
    Permute {
        a: Var,
        axes: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of primitive operations.
///
/// Values are computed eagerly as operations are recorded; every node's
/// inputs precede it, so a reverse sweep over the node list is a valid
/// topological order for [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `var`, or `None` when the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `var` with zeros filled in for unused values.
    pub fn wrt(&self, var: Var) -> Tensor<T> {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[var.0].clone()),
        }
    }

    /// Moves the gradient of `var` out, leaving `None` behind.
    pub fn take(&mut self, var: Var) -> Tensor<T> {
        match self.grads[var.0].take() {
            Some(g) => g,
            None => Tensor::zeros(self.shapes[var.0].clone()),
        }
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn is_suffix(long: &[usize], short: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

fn permute_data<T: Scalar>(data: &[T], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<T>) {
    let nd = shape.len();
    let mut strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    let mut counter = vec![0usize; nd];
    let mut offset = 0usize;
    // Innermost output axis is walked with a tight loop.
    let last = nd - 1;
    let inner_len = out_shape[last];
    let inner_stride = src_strides[last];
    let mut produced = 0;
    while produced < total {
        let mut o = offset;
        for _ in 0..inner_len {
            out.push(data[o]);
            o += inner_stride;
        }
        produced += inner_len;
        // advance counters on axes [0, last)
        let mut ax = last;
        while ax > 0 {
            ax -= 1;
            counter[ax] += 1;
            offset += src_strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            counter[ax] = 0;
        }
    }
    (out_shape, out)
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    let x3 = x * x * x;
    let t = (c * (x + k * x3)).tanh();
    let y = half * x * (T::one() + t);
    let dt = c * (T::one() + T::lit(3.0) * k * x * x);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * dt;
    (y, dy)
}

/// Tanh-approximated GELU evaluated outside a tape.
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    gelu_parts(x).0
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Learnable input; gradients flow to it.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Fixed input; no gradient is tracked.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// `[m,k]·[k,n]`, or batched `[b,m,k]·[b,k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (batch, m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n),
            ([b1, m, k], [b2, k2, n]) if b1 == b2 && k == k2 => (*b1, *m, *k, *n),
            _ => return Err(shape_err("matmul", &sa, &sb)),
        };
        let mut out = vec![T::zero(); batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for bi in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    &av[bi * m * k..],
                    k as isize,
                    1,
                    &bv[bi * k * n..],
                    n as isize,
                    1,
                    &mut out[bi * m * n..(bi + 1) * m * n],
                );
            }
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        Ok(self.push(
            Tensor::raw(shape, out),
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
            },
            &[a, b],
        ))
    }

    fn binary(&mut self, kind: BinKind, a: Var, b: Var, name: &'static str) -> Result<Var, AutodiffError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if !is_suffix(&sa, &sb) {
            return Err(shape_err(name, &sa, &sb));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let period = bv.len();
        let out: Vec<T> = av
            .chunks_exact(period)
            .flat_map(|chunk| {
                chunk.iter().zip(bv).map(move |(&x, &y)| match kind {
                    BinKind::Add => x + y,
                    BinKind::Sub => x - y,
                    BinKind::Mul => x * y,
                })
            })
            .collect();
        Ok(self.push(Tensor::raw(sa, out), Op::Binary { kind, a, b }, &[a, b]))
    }

    /// Elementwise `a + b`; `b` may match a trailing suffix of `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(BinKind::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(BinKind::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(BinKind::Mul, a, b, "mul")
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale { a, c }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s: T = x.data().iter().copied().sum();
        let m = s / T::lit(x.len() as f64);
        self.push(Tensor::scalar(m), Op::Mean { a }, &[a])
    }

    /// Mean over `axis`, removing it (a rank-1 input yields shape `[1]`).
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var, AutodiffError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(AutodiffError::InvalidAxis { axis, ndim: shape.len() });
        }
        let split = AxisSplit::new(&shape, axis);
        let x = self.value(a).data();
        let inv = T::one() / T::lit(split.len as f64);
        let mut out = vec![T::zero(); split.outer * split.inner];
        for o in 0..split.outer {
            let dst = &mut out[o * split.inner..(o + 1) * split.inner];
            for i in 0..split.len {
                let base = (o * split.len + i) * split.inner;
                for (d, &s) in dst.iter_mut().zip(&x[base..base + split.inner]) {
                    *d += s;
                }
            }
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        let mut out_shape: Vec<usize> = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        Ok(self.push(Tensor::raw(out_shape, out), Op::MeanAxis { a, split }, &[a]))
    }

    /// Selects rows of `a` viewed as `[rows, rest]`; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var, AutodiffError> {
        if idx.is_empty() {
            return Err(AutodiffError::Empty("gather_rows"));
        }
        let v = self.value(a).select_rows(idx)?;
        Ok(self.push(
            v,
            Op::GatherRows {
                a,
                idx: idx.to_vec(),
            },
            &[a],
        ))
    }

    fn check_axis_finite(&self, a: Var, axis: usize, op: &'static str) -> Result<AxisSplit, AutodiffError> {
        let shape = self.shape(a);
        if axis >= shape.len() {
            return Err(AutodiffError::InvalidAxis { axis, ndim: shape.len() });
        }
        if !self.value(a).is_finite() {
            return Err(AutodiffError::NonFinite(op));
        }
        Ok(AxisSplit::new(shape, axis))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, AutodiffError> {
        let split = self.check_axis_finite(a, axis, "softmax")?;
        let x = self.value(a);
        let mut out = x.data().to_vec();
        for_each_lane(split, |idx| {
            let mx = idx.clone().map(|i| out[i]).fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for i in idx.clone() {
                out[i] = (out[i] - mx).exp();
                s += out[i];
            }
            for i in idx {
                out[i] /= s;
            }
        });
        let shape = x.shape().to_vec();
        Ok(self.push(Tensor::raw(shape, out), Op::Softmax { a, split }, &[a]))
    }

    /// Log-softmax along `axis` via log-sum-exp.
    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var, AutodiffError> {
        let split = self.check_axis_finite(a, axis, "log_softmax")?;
        let x = self.value(a);
        let mut out = x.data().to_vec();
        for_each_lane(split, |idx| {
            let mx = idx.clone().map(|i| out[i]).fold(T::neg_infinity(), T::max);
            let s: T = idx.clone().map(|i| (out[i] - mx).exp()).sum();
            let lse = mx + s.ln();
            for i in idx {
                out[i] = out[i] - lse;
            }
        });
        let shape = x.shape().to_vec();
        Ok(self.push(Tensor::raw(shape, out), Op::LogSoftmax { a, split }, &[a]))
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, AutodiffError> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().expect("non-empty shape");
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(shape_err("layer_norm", &sx, self.shape(p)));
            }
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xv.len() / d;
        let inv_d = T::one() / T::lit(d as f64);
        let eps = T::lit(eps);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mu = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mu) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        Ok(self.push(
            Tensor::raw(sx, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| gelu_parts(x).0);
        self.push(v, Op::Gelu { a }, &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square { a }, &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.ln());
        self.push(v, Op::Log { a }, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.exp());
        self.push(v, Op::Exp { a }, &[a])
    }

    /// Pairwise cosine similarity of the rows of `a: [K,D]` and `b: [M,D]`,
    /// giving `[K,M]`. Zero-norm rows are rejected.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (k, m, d) = match (sa.as_slice(), sb.as_slice()) {
            ([k, d], [m, d2]) if d == d2 => (*k, *m, *d),
            _ => return Err(shape_err("cosine_similarity", &sa, &sb)),
        };
        let unit = |x: &[T], rows: usize| -> Result<(Vec<T>, Vec<T>), AutodiffError> {
            let mut u = x.to_vec();
            let mut norms = Vec::with_capacity(rows);
            for r in 0..rows {
                let row = &mut u[r * d..(r + 1) * d];
                let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
                if !(n > T::zero()) {
                    return Err(AutodiffError::ZeroNorm { row: r });
                }
                row.iter_mut().for_each(|v| *v /= n);
                norms.push(n);
            }
            Ok((u, norms))
        };
        let (a_unit, a_norm) = unit(self.value(a).data(), k)?;
        let (b_unit, b_norm) = unit(self.value(b).data(), m)?;
        let mut out = vec![T::zero(); k * m];
        T::gemm(k, d, m, &a_unit, d as isize, 1, &b_unit, 1, d as isize, &mut out);
        Ok(self.push(
            Tensor::raw(vec![k, m], out),
            Op::Cosine {
                a,
                b,
                a_unit,
                b_unit,
                a_norm,
                b_norm,
                d,
            },
            &[a, b],
        ))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, AutodiffError> {
        let first = parts.first().ok_or(AutodiffError::Empty("concat"))?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(AutodiffError::InvalidAxis { axis, ndim: s0.len() });
        }
        let mut total_axis = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == s0.len()
                && s.iter().zip(&s0).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(shape_err("concat", &s0, s));
            }
            total_axis += s[axis];
        }
        let outer: usize = s0[..axis].iter().product();
        let inner: usize = s0[axis + 1..].iter().product();
        let chunks: Vec<usize> = parts.iter().map(|&p| self.shape(p)[axis] * inner).collect();
        let mut out = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for (&p, &c) in parts.iter().zip(&chunks) {
                out.extend_from_slice(&self.value(p).data()[o * c..(o + 1) * c]);
            }
        }
        let mut shape = s0;
        shape[axis] = total_axis;
        Ok(self.push(
            Tensor::raw(shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                chunks,
            },
            parts,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let v = self.value(a).clone().reshaped(shape.to_vec())?;
        Ok(self.push(v, Op::Reshape { a }, &[a]))
    }

    /// Reorders axes; `axes[i]` names the input axis placed at output axis `i`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var, AutodiffError> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&x| x >= shape.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(AutodiffError::InvalidPermutation(axes.to_vec()));
        }
        let (s, d) = permute_data(self.value(a).data(), &shape, axes);
        Ok(self.push(Tensor::raw(s, d), Op::Permute { a, axes: axes.to_vec() }, &[a]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let nd = self.shape(a).len();
        if nd < 2 {
            return Err(AutodiffError::InvalidAxis { axis: 1, ndim: nd });
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        self.permute(a, &axes)
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, AutodiffError> {
        let ls = self.shape(loss);
        if numel(ls) != 1 {
            return Err(AutodiffError::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(ls.to_vec(), T::one()));
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, batch, m, k, n } => {
                let av = self.value(a);
                let bv = self.value(b);
                if self.requires_grad(a) {
                    let mut da = vec![T::zero(); batch * m * k];
                    for bi in 0..batch {
                        // dA = dC · Bᵀ
                        T::gemm(
                            m,
                            n,
                            k,
                            &gd[bi * m * n..],
                            n as isize,
                            1,
                            &bv.data()[bi * k * n..],
                            1,
                            n as isize,
                            &mut da[bi * m * k..(bi + 1) * m * k],
                        );
                    }
                    self.accumulate(grads, a, Tensor::raw(av.shape().to_vec(), da));
                }
                if self.requires_grad(b) {
                    let mut db = vec![T::zero(); batch * k * n];
                    for bi in 0..batch {
                        // dB = Aᵀ · dC
                        T::gemm(
                            k,
                            m,
                            n,
                            &av.data()[bi * m * k..],
                            1,
                            k as isize,
                            &gd[bi * m * n..],
                            n as isize,
                            1,
                            &mut db[bi * k * n..(bi + 1) * k * n],
                        );
                    }
                    self.accumulate(grads, b, Tensor::raw(bv.shape().to_vec(), db));
                }
            }
            &Op::Binary { kind, a, b } => {
                let av = self.value(a);
                let bv = self.value(b);
                let period = bv.len();
                if self.requires_grad(a) {
                    let da: Vec<T> = match kind {
                        BinKind::Add | BinKind::Sub => gd.to_vec(),
                        BinKind::Mul => gd
                            .chunks_exact(period)
                            .flat_map(|c| c.iter().zip(bv.data()).map(|(&x, &y)| x * y))
                            .collect(),
                    };
                    self.accumulate(grads, a, Tensor::raw(av.shape().to_vec(), da));
                }
                if self.requires_grad(b) {
                    let mut db = vec![T::zero(); period];
                    for (ci, chunk) in gd.chunks_exact(period).enumerate() {
                        match kind {
                            BinKind::Add => db.iter_mut().zip(chunk).for_each(|(d, &x)| *d += x),
                            BinKind::Sub => db.iter_mut().zip(chunk).for_each(|(d, &x)| *d -= x),
                            BinKind::Mul => {
                                let ac = &av.data()[ci * period..(ci + 1) * period];
                                for ((d, &x), &y) in db.iter_mut().zip(chunk).zip(ac) {
                                    *d += x * y;
                                }
                            }
                        }
                    }
                    self.accumulate(grads, b, Tensor::raw(bv.shape().to_vec(), db));
                }
            }
            &Op::Scale { a, c } => {
                self.accumulate(grads, a, g.map(|x| x * c));
            }
            &Op::Sum { a } => {
                let s = self.shape(a).to_vec();
                self.accumulate(grads, a, Tensor::full(s, gd[0]));
            }
            &Op::Mean { a } => {
                let s = self.shape(a).to_vec();
                let v = gd[0] / T::lit(numel(&s) as f64);
                self.accumulate(grads, a, Tensor::full(s, v));
            }
            &Op::MeanAxis { a, split } => {
                let inv = T::one() / T::lit(split.len as f64);
                let mut da = vec![T::zero(); split.outer * split.len * split.inner];
                for o in 0..split.outer {
                    let src = &gd[o * split.inner..(o + 1) * split.inner];
                    for i in 0..split.len {
                        let base = (o * split.len + i) * split.inner;
                        for (d, &s) in da[base..base + split.inner].iter_mut().zip(src) {
                            *d = s * inv;
                        }
                    }
                }
                self.accumulate(grads, a, Tensor::raw(self.shape(a).to_vec(), da));
            }
            Op::GatherRows { a, idx } => {
                let shape = self.shape(*a).to_vec();
                let rows = shape[0];
                let width = numel(&shape) / rows;
                let mut da = vec![T::zero(); rows * width];
                for (r, &src) in idx.iter().enumerate() {
                    let dst = &mut da[src * width..(src + 1) * width];
                    for (d, &x) in dst.iter_mut().zip(&gd[r * width..(r + 1) * width]) {
                        *d += x;
                    }
                }
                self.accumulate(grads, *a, Tensor::raw(shape, da));
            }
            &Op::Softmax { a, split } => {
                let y = node.value.data();
                let mut da = vec![T::zero(); y.len()];
                for_each_lane(split, |lane| {
                    let dot: T = lane.clone().map(|i| gd[i] * y[i]).sum();
                    for i in lane {
                        da[i] = y[i] * (gd[i] - dot);
                    }
                });
                self.accumulate(grads, a, Tensor::raw(node.value.shape().to_vec(), da));
            }
            &Op::LogSoftmax { a, split } => {
                let y = node.value.data();
                let mut da = vec![T::zero(); y.len()];
                for_each_lane(split, |lane| {
                    let s: T = lane.clone().map(|i| gd[i]).sum();
                    for i in lane {
                        da[i] = gd[i] - y[i].exp() * s;
                    }
                });
                self.accumulate(grads, a, Tensor::raw(node.value.shape().to_vec(), da));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gam = self.value(*gamma).data();
                let d = gam.len();
                let rows = xhat.len() / d;
                if self.requires_grad(*x) {
                    let inv_d = T::one() / T::lit(d as f64);
                    let mut dx = vec![T::zero(); xhat.len()];
                    for r in 0..rows {
                        let gr = &gd[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let dh = gr[j] * gam[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 *= inv_d;
                        m2 *= inv_d;
                        for j in 0..d {
                            let dh = gr[j] * gam[j];
                            dx[r * d + j] = rstd[r] * (dh - m1 - hr[j] * m2);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::raw(self.shape(*x).to_vec(), dx));
                }
                if self.requires_grad(*gamma) {
                    let mut dg = vec![T::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += gd[r * d + j] * xhat[r * d + j];
                        }
                    }
                    self.accumulate(grads, *gamma, Tensor::raw(vec![d], dg));
                }
                if self.requires_grad(*beta) {
                    let mut db = vec![T::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            db[j] += gd[r * d + j];
                        }
                    }
                    self.accumulate(grads, *beta, Tensor::raw(vec![d], db));
                }
            }
            &Op::Gelu { a } => {
                let x = self.value(a);
                let da: Vec<T> = x.data().iter().zip(gd).map(|(&v, &gg)| gg * gelu_parts(v).1).collect();
                self.accumulate(grads, a, Tensor::raw(x.shape().to_vec(), da));
            }
            &Op::Square { a } => {
                let x = self.value(a);
                let two = T::lit(2.0);
                let da: Vec<T> = x.data().iter().zip(gd).map(|(&v, &gg)| two * v * gg).collect();
                self.accumulate(grads, a, Tensor::raw(x.shape().to_vec(), da));
            }
            &Op::Log { a } => {
                let x = self.value(a);
                let da: Vec<T> = x.data().iter().zip(gd).map(|(&v, &gg)| gg / v).collect();
                self.accumulate(grads, a, Tensor::raw(x.shape().to_vec(), da));
            }
            &Op::Exp { a } => {
                let y = node.value.data();
                let da: Vec<T> = y.iter().zip(gd).map(|(&v, &gg)| gg * v).collect();
                self.accumulate(grads, a, Tensor::raw(node.value.shape().to_vec(), da));
            }
            Op::Cosine {
                a,
                b,
                a_unit,
                b_unit,
                a_norm,
                b_norm,
                d,
            } => {
                let d = *d;
                let k = a_norm.len();
                let m = b_norm.len();
                let rho = node.value.data();
                if self.requires_grad(*a) {
                    let mut gb = vec![T::zero(); k * d];
                    T::gemm(k, m, d, gd, m as isize, 1, b_unit, d as isize, 1, &mut gb);
                    for i in 0..k {
                        let s: T = (0..m).map(|j| gd[i * m + j] * rho[i * m + j]).sum();
                        for c in 0..d {
                            gb[i * d + c] = (gb[i * d + c] - s * a_unit[i * d + c]) / a_norm[i];
                        }
                    }
                    self.accumulate(grads, *a, Tensor::raw(vec![k, d], gb));
                }
                if self.requires_grad(*b) {
                    let mut ga = vec![T::zero(); m * d];
                    // Gᵀ · Â
                    T::gemm(m, k, d, gd, 1, m as isize, a_unit, d as isize, 1, &mut ga);
                    for j in 0..m {
                        let s: T = (0..k).map(|i| gd[i * m + j] * rho[i * m + j]).sum();
                        for c in 0..d {
                            ga[j * d + c] = (ga[j * d + c] - s * b_unit[j * d + c]) / b_norm[j];
                        }
                    }
                    self.accumulate(grads, *b, Tensor::raw(vec![m, d], ga));
                }
            }
            Op::Concat { parts, outer, chunks } => {
                let total: usize = chunks.iter().sum();
                let mut offset = 0;
                for (&p, &c) in parts.iter().zip(chunks) {
                    if self.requires_grad(p) {
                        let mut dp = Vec::with_capacity(outer * c);
                        for o in 0..*outer {
                            let start = o * total + offset;
                            dp.extend_from_slice(&gd[start..start + c]);
                        }
                        self.accumulate(grads, p, Tensor::raw(self.shape(p).to_vec(), dp));
                    }
                    offset += c;
                }
            }
            &Op::Reshape { a } => {
                self.accumulate(grads, a, Tensor::raw(self.shape(a).to_vec(), gd.to_vec()));
            }
            Op::Permute { a, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                let (s, d) = permute_data(gd, g.shape(), &inverse);
                self.accumulate(grads, *a, Tensor::raw(s, d));
            }
        }
    }
}

fn for_each_lane(split: AxisSplit, mut f: impl FnMut(std::iter::StepBy<std::ops::Range<usize>>)) {
    for o in 0..split.outer {
        for j in 0..split.inner {
            let start = o * split.len * split.inner + j;
            let end = start + split.len * split.inner;
            f((start..end).step_by(split.inner));
        }
    }
}
