//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node holding its forward value; `backward` replays the
//! tape in reverse and accumulates gradients into nodes that require them.
//! Leaves created with [`Tape::param`] are the differentiable inputs.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

const LN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        bt: bool,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        bt: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    MulCol {
        col: Var,
        x: Var,
    },
    Scale {
        x: Var,
        s: T,
    },
    RowSum(Var),
    Sum(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Softplus(Var),
    Gelu(Var),
    Gather {
        table: Var,
        idx: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Reshape(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation. Dropout is active only while `training` is set.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    training: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros of `shape` when no path reached it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new(false)
    }
}

impl<T: Real> Tape<T> {
    pub fn new(training: bool) -> Self {
        Tape {
            nodes: Vec::new(),
            training,
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop all recorded nodes, keeping the mode.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Differentiable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// `a·b` (or `a·bᵀ` when `bt`), where `a` is `[.., k]` and `b` is 2-D.
    pub fn matmul(&mut self, a: Var, b: Var, bt: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() != 2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (k, n) = if bt { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if *sa.last().unwrap_or(&0) != k {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let m = self.value(a).rows();
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            bt,
            &mut out,
            T::zero(),
        );
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = n;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatMul { a, b, bt }, ng))
    }

    /// Batched `a·b` over `[B, m, k]` × `[B, k, n]` (or `[B, n, k]` when `bt`).
    pub fn bmm(&mut self, a: Var, b: Var, bt: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let (bs, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if bt { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let mut out = vec![T::zero(); bs * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for i in 0..bs {
                T::gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    false,
                    &bv[i * k * n..(i + 1) * k * n],
                    bt,
                    &mut out[i * m * n..(i + 1) * m * n],
                    T::zero(),
                );
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(&[bs, m, n], out)?, Op::BatchMatMul { a, b, bt }, ng))
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(ta.shape(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `[n]` bias to every row of `[.., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.len() != tx.cols() {
            return Err(Error::shape("add_bias", tx.shape(), tb.shape()));
        }
        let n = tx.cols();
        let b = tb.data();
        let data = tx.data().iter().enumerate().map(|(i, &v)| v + b[i % n]).collect();
        let t = Tensor::new(tx.shape(), data)?;
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(t, Op::AddBias { x, bias }, ng))
    }

    /// Scales row `r` of `x: [R, n]` by `col[r]`, with `col: [R, 1]`.
    pub fn mul_col(&mut self, col: Var, x: Var) -> Result<Var> {
        let (tc, tx) = (self.value(col), self.value(x));
        if tc.cols() != 1 || tc.len() != tx.rows() {
            return Err(Error::shape("mul_col", tc.shape(), tx.shape()));
        }
        let n = tx.cols();
        let c = tc.data();
        let data = tx.data().iter().enumerate().map(|(i, &v)| v * c[i / n]).collect();
        let t = Tensor::new(tx.shape(), data)?;
        let ng = self.ng(x) || self.ng(col);
        Ok(self.push(t, Op::MulCol { col, x }, ng))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::lit(s);
        let t = self.value(x).map(|v| v * s);
        let ng = self.ng(x);
        self.push(t, Op::Scale { x, s }, ng)
    }

    /// `[R, n] -> [R, 1]`.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let r = tx.rows();
        let data = (0..r).map(|i| tx.row(i).iter().copied().sum()).collect();
        let t = Tensor::new(&[r, 1], data).expect("row_sum shape");
        let ng = self.ng(x);
        self.push(t, Op::RowSum(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Softmax over the last axis, max-shifted.
    pub fn softmax(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let n = tx.cols();
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z = z + *v;
            }
            for v in row.iter_mut() {
                *v = *v / z;
            }
        }
        let t = Tensor::new(tx.shape(), data).expect("softmax shape");
        let ng = self.ng(x);
        self.push(t, Op::Softmax(x), ng)
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let tx = self.value(x);
        let n = tx.cols();
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.len() != n || tb.len() != n {
            return Err(Error::shape("layer_norm", tx.shape(), tg.shape()));
        }
        let eps = T::lit(LN_EPS);
        let nf = T::from_usize(n).unwrap();
        let mut xhat = tx.data().to_vec();
        let mut rstd = Vec::with_capacity(tx.rows());
        for row in xhat.chunks_mut(n) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let r = T::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            rstd.push(r);
        }
        let (g, b) = (tg.data(), tb.data());
        let out = xhat.iter().enumerate().map(|(i, &v)| v * g[i % n] + b[i % n]).collect();
        let t = Tensor::new(tx.shape(), out)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Inverted dropout; identity outside training mode or when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if !self.training || rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let scale = T::lit(1.0 / keep);
        let tx = self.value(x);
        let mask: Vec<T> = (0..tx.len())
            .map(|_| if rng.random::<f64>() < keep { scale } else { T::zero() })
            .collect();
        let data = tx.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let t = Tensor::new(tx.shape(), data).expect("dropout shape");
        let ng = self.ng(x);
        self.push(t, Op::Dropout { x, mask }, ng)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let t = self.value(x).map(softplus);
        let ng = self.ng(x);
        self.push(t, Op::Softplus(x), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| gelu(v).0);
        let ng = self.ng(x);
        self.push(t, Op::Gelu(x), ng)
    }

    /// Row lookup: `out[i] = table[idx[i]]`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (r, n) = (tt.rows(), tt.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::shape("gather_rows", tt.shape(), &[bad]));
        }
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(tt.row(i));
        }
        let t = Tensor::new(&[idx.len(), n], data)?;
        let ng = self.ng(table);
        Ok(self.push(
            t,
            Op::Gather {
                table,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    /// Concatenate `[R, n_i]` operands along the last axis.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let r = self.value(xs[0]).rows();
        for &x in xs {
            if self.value(x).rows() != r {
                return Err(Error::shape("concat_cols", self.shape(xs[0]), self.shape(x)));
            }
        }
        let widths: Vec<usize> = xs.iter().map(|&x| self.value(x).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &x in xs {
                data.extend_from_slice(self.value(x).row(i));
            }
        }
        let t = Tensor::new(&[r, total], data)?;
        let ng = xs.iter().any(|&x| self.ng(x));
        Ok(self.push(t, Op::ConcatCols(xs.to_vec()), ng))
    }

    /// Columns `start..start+len` of `[R, n]`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (r, n) = (tx.rows(), tx.cols());
        if start + len > n {
            return Err(Error::shape("slice_cols", tx.shape(), &[start, len]));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&tx.row(i)[start..start + len]);
        }
        let t = Tensor::new(&[r, len], data)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::SliceCols { x, start }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// Reverse pass from a scalar `loss`. The tape is left intact.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape("backward", lv.shape(), &[1]));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, data: Vec<T>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&data),
            slot @ None => *slot = Some(Tensor::new(self.shape(v), data).expect("gradient shape matches value")),
        }
    }

    fn backprop_node(&self, node: &Node<T>, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, bt } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let m = ta.rows();
                let k = ta.cols();
                let n = g.cols();
                if self.ng(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    // bt: b is [n,k] so g·b; else b is [k,n] so g·bᵀ
                    T::gemm(m, n, k, gd, false, tb.data(), !bt, &mut ga, T::zero());
                    self.acc(grads, *a, ga);
                }
                if self.ng(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    if *bt {
                        T::gemm(n, m, k, gd, true, ta.data(), false, &mut gb, T::zero());
                    } else {
                        T::gemm(k, m, n, ta.data(), true, gd, false, &mut gb, T::zero());
                    }
                    self.acc(grads, *b, gb);
                }
            }
            Op::BatchMatMul { a, b, bt } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (bs, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let n = g.shape()[2];
                if self.ng(*a) {
                    let mut ga = vec![T::zero(); bs * m * k];
                    for i in 0..bs {
                        T::gemm(
                            m,
                            n,
                            k,
                            &gd[i * m * n..(i + 1) * m * n],
                            false,
                            &tb.data()[i * k * n..(i + 1) * k * n],
                            !bt,
                            &mut ga[i * m * k..(i + 1) * m * k],
                            T::zero(),
                        );
                    }
                    self.acc(grads, *a, ga);
                }
                if self.ng(*b) {
                    let mut gb = vec![T::zero(); bs * k * n];
                    for i in 0..bs {
                        let gi = &gd[i * m * n..(i + 1) * m * n];
                        let ai = &ta.data()[i * m * k..(i + 1) * m * k];
                        let out = &mut gb[i * k * n..(i + 1) * k * n];
                        if *bt {
                            T::gemm(n, m, k, gi, true, ai, false, out, T::zero());
                        } else {
                            T::gemm(k, m, n, ai, true, gi, false, out, T::zero());
                        }
                    }
                    self.acc(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, gd.to_vec());
                self.acc(grads, *b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, gd.to_vec());
                self.acc(grads, *b, gd.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ga = gd.iter().zip(tb.data()).map(|(&g, &y)| g * y).collect();
                let gb = gd.iter().zip(ta.data()).map(|(&g, &x)| g * x).collect();
                self.acc(grads, *a, ga);
                self.acc(grads, *b, gb);
            }
            Op::AddBias { x, bias } => {
                self.acc(grads, *x, gd.to_vec());
                if self.ng(*bias) {
                    let n = g.cols();
                    let mut gb = vec![T::zero(); n];
                    for row in gd.chunks(n) {
                        for (acc, &v) in gb.iter_mut().zip(row) {
                            *acc = *acc + v;
                        }
                    }
                    self.acc(grads, *bias, gb);
                }
            }
            Op::MulCol { col, x } => {
                let (tc, tx) = (self.value(*col), self.value(*x));
                let n = tx.cols();
                if self.ng(*x) {
                    let gx = gd.iter().enumerate().map(|(i, &v)| v * tc.data()[i / n]).collect();
                    self.acc(grads, *x, gx);
                }
                if self.ng(*col) {
                    let gc = gd
                        .chunks(n)
                        .zip(tx.data().chunks(n))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(&a, &b)| a * b).sum())
                        .collect();
                    self.acc(grads, *col, gc);
                }
            }
            Op::Scale { x, s } => {
                self.acc(grads, *x, gd.iter().map(|&v| v * *s).collect());
            }
            Op::RowSum(x) => {
                let n = self.value(*x).cols();
                let gx = (0..self.value(*x).len()).map(|i| gd[i / n]).collect();
                self.acc(grads, *x, gx);
            }
            Op::Sum(x) => {
                let len = self.value(*x).len();
                self.acc(grads, *x, vec![gd[0]; len]);
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = node.value.cols();
                let mut gx = vec![T::zero(); y.len()];
                for ((gr, yr), out) in gd.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = g.cols();
                let gam = self.value(*gamma).data();
                if self.ng(*gamma) || self.ng(*beta) {
                    let mut gg = vec![T::zero(); n];
                    let mut gb = vec![T::zero(); n];
                    for (gr, xr) in gd.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] = gg[j] + gr[j] * xr[j];
                            gb[j] = gb[j] + gr[j];
                        }
                    }
                    self.acc(grads, *gamma, gg);
                    self.acc(grads, *beta, gb);
                }
                if self.ng(*x) {
                    let nf = T::from_usize(n).unwrap();
                    let mut gx = vec![T::zero(); gd.len()];
                    for (r, ((gr, xr), out)) in gd.chunks(n).zip(xhat.chunks(n)).zip(gx.chunks_mut(n)).enumerate() {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..n {
                            let gh = gr[j] * gam[j];
                            m1 = m1 + gh;
                            m2 = m2 + gh * xr[j];
                        }
                        m1 = m1 / nf;
                        m2 = m2 / nf;
                        for j in 0..n {
                            out[j] = rstd[r] * (gr[j] * gam[j] - m1 - xr[j] * m2);
                        }
                    }
                    self.acc(grads, *x, gx);
                }
            }
            Op::Dropout { x, mask } => {
                let gx = gd.iter().zip(mask).map(|(&a, &m)| a * m).collect();
                self.acc(grads, *x, gx);
            }
            Op::Softplus(x) => {
                let tx = self.value(*x);
                let gx = gd.iter().zip(tx.data()).map(|(&a, &v)| a * sigmoid(v)).collect();
                self.acc(grads, *x, gx);
            }
            Op::Gelu(x) => {
                let tx = self.value(*x);
                let gx = gd.iter().zip(tx.data()).map(|(&a, &v)| a * gelu(v).1).collect();
                self.acc(grads, *x, gx);
            }
            Op::Gather { table, idx } => {
                let tt = self.value(*table);
                let n = tt.cols();
                let mut gt = vec![T::zero(); tt.len()];
                for (gr, &i) in gd.chunks(n).zip(idx) {
                    for (acc, &v) in gt[i * n..(i + 1) * n].iter_mut().zip(gr) {
                        *acc = *acc + v;
                    }
                }
                self.acc(grads, *table, gt);
            }
            Op::ConcatCols(xs) => {
                let total = g.cols();
                let mut off = 0;
                for &x in xs {
                    let w = self.value(x).cols();
                    if self.ng(x) {
                        let mut gx = Vec::with_capacity(self.value(x).len());
                        for row in gd.chunks(total) {
                            gx.extend_from_slice(&row[off..off + w]);
                        }
                        self.acc(grads, x, gx);
                    }
                    off += w;
                }
            }
            Op::SliceCols { x, start } => {
                let tx = self.value(*x);
                let n = tx.cols();
                let w = g.cols();
                let mut gx = vec![T::zero(); tx.len()];
                for (row, out) in gd.chunks(w).zip(gx.chunks_mut(n)) {
                    out[*start..*start + w].copy_from_slice(row);
                }
                self.acc(grads, *x, gx);
            }
            Op::Reshape(x) => {
                self.acc(grads, *x, gd.to_vec());
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus<T: Real>(v: T) -> T {
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}

/// Returns `(gelu(x), d gelu / dx)`.
fn gelu<T: Real>(x: T) -> (T, T) {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let inner = c * (x + a * x * x * x);
    let th = inner.tanh();
    let y = half * x * (T::one() + th);
    let dinner = c * (T::one() + T::lit(3.0) * a * x * x);
    let dy = half * (T::one() + th) + half * x * (T::one() - th * th) * dinner;
    (y, dy)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn softmax_of_equal_scores_is_uniform() {
        let mut tape = Tape::<f64>::new(false);
        let x = tape.constant(t(&[1, 2], &[0.0, 0.0]));
        let y = tape.softmax(x);
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn layer_norm_of_constant_row_is_shift() {
        let mut tape = Tape::<f64>::new(false);
        let x = tape.constant(t(&[1, 4], &[3.0; 4]));
        let g = tape.constant(t(&[4], &[2.0; 4]));
        let b = tape.constant(t(&[4], &[0.1, 0.2, 0.3, 0.4]));
        let y = tape.layer_norm(x, g, b).unwrap();
        for (a, e) in tape.value(y).data().iter().zip([0.1, 0.2, 0.3, 0.4]) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_hand_table() {
        let mut tape = Tape::<f64>::new(false);
        let a = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.constant(t(&[3, 2], &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]));
        let c = tape.matmul(a, b, false).unwrap();
        assert_eq!(tape.value(c).data(), &[58.0, 64.0, 139.0, 154.0]);
        assert_eq!(tape.value(c).shape(), &[2, 2]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::<f32>::new(false);
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b, false).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
        let c = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(tape.add(a, c).is_err());
    }

    #[test]
    fn sum_and_square_gradients() {
        let mut tape = Tape::<f64>::new(true);
        let x = tape.param(t(&[3], &[1.0, -2.0, 0.5]));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::<f64>::new(true);
        let x = tape.param(t(&[3], &[1.0, -2.0, 0.5]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::<f64>::new(true);
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn dropout_is_identity_in_eval() {
        let mut rng = crate::numerics::Seeds::new(0).stream("t", &[]);
        let mut tape = Tape::<f32>::new(false);
        let x = tape.constant(Tensor::ones(&[4]));
        assert_eq!(tape.dropout(x, 0.5, &mut rng), x);
    }

    #[test]
    fn softplus_is_stable_for_large_inputs() {
        assert_eq!(softplus(1000.0f64), 1000.0);
        assert!(softplus(-1000.0f64) >= 0.0);
        assert!((softplus(0.0f64) - 2f64.ln()).abs() < 1e-15);
    }
}
