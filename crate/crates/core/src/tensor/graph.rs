//! Tape of recorded ops and its reverse sweep.
//!
//! Every op appends a node holding its output value plus whatever it needs
//! for the backward pass. Nodes are only ever appended, so node order is a
//! topological order and `backward` walks it once in reverse.

use super::gemm::{gemm, gemm_scaled, Layout};
use super::{shape_err, ParamSet, Scalar, Tensor, TensorError};

/// Epsilon added to the variance in layer normalisation.
pub const LN_EPSILON: f64 = 1e-6;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
    out_c: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.kh * self.kw * self.c
    }

    fn rows(&self) -> usize {
        self.batch * self.ho * self.wo
    }

    /// Visits `(col row, patch offset, input offset)` for every in-bounds
    /// tap of the receptive fields.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let patch = self.patch();
        for b in 0..self.batch {
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let row = (b * self.ho + oy) * self.wo + ox;
                    for ky in 0..self.kh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let src = ((b * self.h + iy as usize) * self.w + ix as usize) * self.c;
                            let dst = row * patch + (ky * self.kw + kx) * self.c;
                            f(row, dst, src);
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let mut cols = vec![T::zero(); self.rows() * self.patch()];
        let c = self.c;
        self.for_each_tap(|_, dst, src| cols[dst..dst + c].copy_from_slice(&x[src..src + c]));
        cols
    }

    fn col2im_add<T: Scalar>(&self, cols: &[T], dx: &mut [T]) {
        let c = self.c;
        self.for_each_tap(|_, dst, src| {
            for (d, &v) in dx[src..src + c].iter_mut().zip(&cols[dst..dst + c]) {
                *d = *d + v;
            }
        });
    }
}

enum Op<T> {
    Input,
    Param(usize),
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool, alpha: T },
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    Relu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    MaxPool { x: Var, argmax: Vec<usize> },
    Concat(Vec<Var>),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Reshape(Var),
    PermuteRows { x: Var, perm: Vec<usize> },
}

impl<T> Op<T> {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Input | Op::Param(_) => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::BatchMatMul { a, b, .. } => vec![*a, *b],
            Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Conv2d { x, w, b, .. } => vec![*x, *w, *b],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Relu(x)
            | Op::Softmax(x)
            | Op::LogSoftmax(x)
            | Op::Scale(x, _)
            | Op::Sum(x)
            | Op::Reshape(x) => vec![*x],
            Op::MaxPool { x, .. } | Op::PermuteRows { x, .. } => vec![*x],
            Op::Concat(xs) => xs.clone(),
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    name: &'static str,
}

/// A recording of one forward computation.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    non_finite: Option<(usize, &'static str)>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            non_finite: None,
        }
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Var {
        let needs_grad = matches!(op, Op::Param(_))
            || op.parents().iter().any(|p| self.nodes[p.0].needs_grad);
        let id = self.nodes.len();
        if self.non_finite.is_none() && !value.all_finite() {
            self.non_finite = Some((id, name));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            name,
        });
        Var(id)
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, "input")
    }

    /// Learnable leaf bound to `params` slot `slot`.
    pub fn param(&mut self, params: &ParamSet<T>, slot: usize) -> Var {
        self.push(params.get(slot).clone(), Op::Param(slot), "param")
    }

    /// Fails if any recorded value is NaN or infinite.
    pub fn check_finite(&self) -> Result<(), TensorError> {
        match self.non_finite {
            Some((node, op)) => Err(TensorError::NonFiniteValue { op, node }),
            None => Ok(()),
        }
    }

    /// `[m, k] x [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, n) = match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return shape_err("matmul", format!("{sa:?} x {sb:?}")),
        };
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.value(a).data(), Layout::Normal, self.value(b).data(), Layout::Normal, &mut out, false);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), "matmul"))
    }

    /// Batched `[B, m, k] x [B, k, n]`, or `[B, m, k] x [B, n, k]^T` when
    /// `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, TensorError> {
        self.bmm_scaled(a, b, trans_b, 1.0)
    }

    /// [`bmm`](Self::bmm) with the product multiplied by `alpha`.
    pub fn bmm_scaled(&mut self, a: Var, b: Var, trans_b: bool, alpha: f64) -> Result<Var, TensorError> {
        let alpha = T::from_f64_lossy(alpha);
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (batch, m, k, n) = match (sa, sb, trans_b) {
            ([b1, m, k], [b2, k2, n], false) if b1 == b2 && k == k2 => (*b1, *m, *k, *n),
            ([b1, m, k], [b2, n, k2], true) if b1 == b2 && k == k2 => (*b1, *m, *k, *n),
            _ => return shape_err("bmm", format!("{sa:?} x {sb:?} (trans_b={trans_b})")),
        };
        let mut out = vec![T::zero(); batch * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let b_layout = if trans_b { Layout::Transposed } else { Layout::Normal };
        for i in 0..batch {
            gemm_scaled(
                m,
                k,
                n,
                alpha,
                &av[i * m * k..],
                Layout::Normal,
                &bv[i * k * n..],
                b_layout,
                &mut out[i * m * n..],
                false,
            );
        }
        Ok(self.push(
            Tensor::new(&[batch, m, n], out)?,
            Op::BatchMatMul { a, b, trans_b, alpha },
            "bmm",
        ))
    }

    /// `x w + b` over the last axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let k = *sx.last().unwrap_or(&1);
        let n = match sw.as_slice() {
            [k2, n] if *k2 == k => *n,
            _ => return shape_err("linear", format!("x {sx:?}, w {sw:?}")),
        };
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return shape_err("linear", format!("bias {:?}, expected [{n}]", self.shape(b)));
            }
        }
        let rows = self.value(x).len() / k.max(1);
        let mut out = vec![T::zero(); rows * n];
        gemm(rows, k, n, self.value(x).data(), Layout::Normal, self.value(w).data(), Layout::Normal, &mut out, false);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_exact_mut(n) {
                for (o, &bb) in row.iter_mut().zip(bias) {
                    *o = *o + bb;
                }
            }
        }
        let mut shape = sx;
        *shape.last_mut().expect("rank >= 1") = n;
        Ok(self.push(Tensor::new(&shape, out)?, Op::Linear { x, w, b }, "linear"))
    }

    /// 2-D convolution over NHWC input with an `[kh, kw, c_in, c_out]`
    /// kernel, zero padding `pad` on every side.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var, TensorError> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        let geom = match (sx, sw) {
            ([batch, h, wd, c], [kh, kw, c2, o]) if c == c2 && sb == [*o] && stride >= 1 => {
                if h + 2 * pad < *kh || wd + 2 * pad < *kw {
                    return shape_err("conv2d", format!("kernel {sw:?} larger than input {sx:?}"));
                }
                ConvGeom {
                    batch: *batch,
                    h: *h,
                    w: *wd,
                    c: *c,
                    kh: *kh,
                    kw: *kw,
                    out_c: *o,
                    stride,
                    pad,
                    ho: (h + 2 * pad - kh) / stride + 1,
                    wo: (wd + 2 * pad - kw) / stride + 1,
                }
            }
            _ => return shape_err("conv2d", format!("x {sx:?}, w {sw:?}, b {sb:?}")),
        };
        let cols = geom.im2col(self.value(x).data());
        let (rows, patch, o) = (geom.rows(), geom.patch(), geom.out_c);
        let mut out = vec![T::zero(); rows * o];
        gemm(rows, patch, o, &cols, Layout::Normal, self.value(w).data(), Layout::Normal, &mut out, false);
        let bias = self.value(b).data();
        for row in out.chunks_exact_mut(o) {
            for (v, &bb) in row.iter_mut().zip(bias) {
                *v = *v + bb;
            }
        }
        let value = Tensor::new(&[geom.batch, geom.ho, geom.wo, o], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, "conv2d"))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a.max(T::zero())).collect();
        let out = Tensor {
            shape: v.shape().to_vec(),
            data,
        };
        self.push(out, Op::Relu(x), "relu")
    }

    /// Softmax over the last axis, stabilised by subtracting the row max.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = v.last_dim();
        let mut out = v.data().to_vec();
        for row in out.chunks_exact_mut(n) {
            let max = row.iter().fold(T::neg_infinity(), |m, &a| m.max(a));
            let mut sum = T::zero();
            for a in row.iter_mut() {
                *a = (*a - max).exp();
                sum = sum + *a;
            }
            for a in row.iter_mut() {
                *a = *a / sum;
            }
        }
        let shape = v.shape().to_vec();
        self.push(Tensor { shape, data: out }, Op::Softmax(x), "softmax_rows")
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = v.last_dim();
        let mut out = v.data().to_vec();
        for row in out.chunks_exact_mut(n) {
            let max = row.iter().fold(T::neg_infinity(), |m, &a| m.max(a));
            let lse = max + row.iter().map(|&a| (a - max).exp()).sum::<T>().ln();
            for a in row.iter_mut() {
                *a = *a - lse;
            }
        }
        let shape = v.shape().to_vec();
        self.push(Tensor { shape, data: out }, Op::LogSoftmax(x), "log_softmax_rows")
    }

    /// Normalises each row of the last axis to zero mean and unit variance,
    /// then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, TensorError> {
        let n = self.value(x).last_dim();
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return shape_err(
                "layer_norm",
                format!("x {:?}, gain {:?}, bias {:?}", self.shape(x), self.shape(gain), self.shape(bias)),
            );
        }
        let eps = T::from_f64_lossy(LN_EPSILON);
        let nt = T::from_usize(n).expect("width");
        let v = self.value(x);
        let (g, bb) = (self.value(gain).data(), self.value(bias).data());
        let rows = v.len() / n;
        let mut xhat = vec![T::zero(); v.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); v.len()];
        for r in 0..rows {
            let row = &v.data()[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nt;
            let var = row.iter().map(|&a| (a - mean) * (a - mean)).sum::<T>() / nt;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + bb[j];
            }
        }
        let value = Tensor::new(v.shape(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            "layer_norm",
        ))
    }

    /// Feature-wise max over the entity axis: `[B, N, k] -> [B, k]`.
    pub fn max_pool_space(&mut self, x: Var) -> Result<Var, TensorError> {
        let (batch, n, k) = match self.shape(x) {
            [b, n, k] if *n > 0 => (*b, *n, *k),
            s => return shape_err("max_pool_space", format!("expected [B, N, k], got {s:?}")),
        };
        let data = self.value(x).data();
        let mut out = vec![T::zero(); batch * k];
        let mut argmax = vec![0usize; batch * k];
        for b in 0..batch {
            for f in 0..k {
                let mut best = b * n * k + f;
                for e in 1..n {
                    let i = (b * n + e) * k + f;
                    if data[i] > data[best] {
                        best = i;
                    }
                }
                out[b * k + f] = data[best];
                argmax[b * k + f] = best;
            }
        }
        let value = Tensor::new(&[batch, k], out)?;
        Ok(self.push(value, Op::MaxPool { x, argmax }, "max_pool_space"))
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, xs: &[Var]) -> Result<Var, TensorError> {
        let Some(&first) = xs.first() else {
            return shape_err("concat_last", "no inputs");
        };
        let lead = &self.shape(first)[..self.shape(first).len() - 1];
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s.len() != lead.len() + 1 || &s[..lead.len()] != lead {
                return shape_err("concat_last", format!("{:?} vs {s:?}", self.shape(first)));
            }
            widths.push(*s.last().expect("rank >= 1"));
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(x).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Concat(xs.to_vec()), "concat_last"))
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return shape_err(name, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor {
            shape: va.shape().to_vec(),
            data,
        };
        Ok(self.push(out, op, name))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64_lossy(c);
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a * c).collect();
        let out = Tensor {
            shape: v.shape().to_vec(),
            data,
        };
        self.push(out, Op::Scale(x, c), "scale")
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(total), Op::Sum(x), "sum")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), "reshape"))
    }

    /// Reorders the middle axis of `[B, N, k]`: row `i` of the output is
    /// row `perm[i]` of the input.
    pub fn permute_rows(&mut self, x: Var, perm: &[usize]) -> Result<Var, TensorError> {
        let (batch, n, k) = match self.shape(x) {
            [b, n, k] => (*b, *n, *k),
            s => return shape_err("permute_rows", format!("expected [B, N, k], got {s:?}")),
        };
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return shape_err("permute_rows", format!("not a permutation of {n} rows"));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(batch * n * k);
        for b in 0..batch {
            for &p in perm {
                out.extend_from_slice(&src[(b * n + p) * k..(b * n + p + 1) * k]);
            }
        }
        let value = Tensor::new(&[batch, n, k], out)?;
        Ok(self.push(
            value,
            Op::PermuteRows {
                x,
                perm: perm.to_vec(),
            },
            "permute_rows",
        ))
    }

    /// Reverse sweep from the scalar `loss`. Returns one gradient per slot of
    /// `params`, zero for parameters the loss does not depend on.
    pub fn backward(&self, loss: Var, params: &ParamSet<T>) -> Result<Vec<Tensor<T>>, TensorError> {
        self.check_finite()?;
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return shape_err("backward", format!("loss must be scalar, got {:?}", root.value.shape()));
        }
        if !root.needs_grad {
            return Err(TensorError::DisconnectedLoss);
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = params.zeros_like();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.backprop_node(node, &g, &mut grads, &mut out)?;
        }
        for (slot, t) in out.iter().enumerate() {
            if !t.all_finite() {
                return Err(TensorError::NonFiniteValue {
                    op: "backward",
                    node: slot,
                });
            }
        }
        Ok(out)
    }

    fn backprop_node(
        &self,
        node: &Node<T>,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        out: &mut [Tensor<T>],
    ) -> Result<(), TensorError> {
        let nodes = &self.nodes;
        // Gradient buffer for `v`, allocated on first use; None when `v` does
        // not lead to any parameter.
        fn buf<'a, T: Scalar>(grads: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var) -> Option<&'a mut Vec<T>> {
            let n = &nodes[v.0];
            if !n.needs_grad {
                return None;
            }
            Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n.value.len()]))
        }
        fn add_into<T: Scalar>(dst: &mut [T], src: impl Iterator<Item = T>) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = *d + s;
            }
        }
        let val = |v: Var| nodes[v.0].value.data();

        match &node.op {
            Op::Input => {}
            Op::Param(slot) => {
                let dst = out[*slot].data_mut();
                if dst.len() != g.len() {
                    return shape_err("backward", format!("param slot {slot} changed shape"));
                }
                add_into(dst, g.iter().copied());
            }
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let n = nodes[b.0].value.shape()[1];
                if let Some(da) = buf(grads, nodes, *a) {
                    gemm(m, n, k, g, Layout::Normal, val(*b), Layout::Transposed, da, true);
                }
                if let Some(db) = buf(grads, nodes, *b) {
                    gemm(k, m, n, val(*a), Layout::Transposed, g, Layout::Normal, db, true);
                }
            }
            Op::BatchMatMul { a, b, trans_b, alpha } => {
                let sa = nodes[a.0].value.shape();
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                if let Some(da) = buf(grads, nodes, *a) {
                    let bl = if *trans_b { Layout::Normal } else { Layout::Transposed };
                    for i in 0..batch {
                        let (gi, bi) = (&g[i * m * n..], &val(*b)[i * k * n..]);
                        gemm_scaled(m, n, k, *alpha, gi, Layout::Normal, bi, bl, &mut da[i * m * k..], true);
                    }
                }
                if let Some(db) = buf(grads, nodes, *b) {
                    for i in 0..batch {
                        let (ga, av) = (&g[i * m * n..], &val(*a)[i * m * k..]);
                        let dbi = &mut db[i * k * n..];
                        if *trans_b {
                            gemm_scaled(n, m, k, *alpha, ga, Layout::Transposed, av, Layout::Normal, dbi, true);
                        } else {
                            gemm_scaled(k, m, n, *alpha, av, Layout::Transposed, ga, Layout::Normal, dbi, true);
                        }
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let sw = nodes[w.0].value.shape();
                let (k, n) = (sw[0], sw[1]);
                let rows = g.len() / n.max(1);
                if let Some(dx) = buf(grads, nodes, *x) {
                    gemm(rows, n, k, g, Layout::Normal, val(*w), Layout::Transposed, dx, true);
                }
                if let Some(dw) = buf(grads, nodes, *w) {
                    gemm(k, rows, n, val(*x), Layout::Transposed, g, Layout::Normal, dw, true);
                }
                if let Some(b) = b {
                    if let Some(db) = buf(grads, nodes, *b) {
                        for row in g.chunks_exact(n) {
                            add_into(db, row.iter().copied());
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let (rows, patch, o) = (geom.rows(), geom.patch(), geom.out_c);
                if let Some(db) = buf(grads, nodes, *b) {
                    for row in g.chunks_exact(o) {
                        add_into(db, row.iter().copied());
                    }
                }
                if nodes[w.0].needs_grad {
                    // Columns are recomputed rather than stored to bound memory.
                    let cols = geom.im2col(val(*x));
                    let dw = buf(grads, nodes, *w).expect("needs grad");
                    gemm(patch, rows, o, &cols, Layout::Transposed, g, Layout::Normal, dw, true);
                }
                if nodes[x.0].needs_grad {
                    let mut dcols = vec![T::zero(); rows * patch];
                    gemm(rows, o, patch, g, Layout::Normal, val(*w), Layout::Transposed, &mut dcols, false);
                    let dx = buf(grads, nodes, *x).expect("needs grad");
                    geom.col2im_add(&dcols, dx);
                }
            }
            Op::Relu(x) => {
                if let Some(dx) = buf(grads, nodes, *x) {
                    let y = node.value.data();
                    add_into(dx, g.iter().zip(y).map(|(&gi, &yi)| if yi > T::zero() { gi } else { T::zero() }));
                }
            }
            Op::Softmax(x) => {
                if let Some(dx) = buf(grads, nodes, *x) {
                    let n = node.value.last_dim();
                    let y = node.value.data();
                    for ((dxr, gr), yr) in dx.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(y.chunks_exact(n)) {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        add_into(dxr, gr.iter().zip(yr).map(|(&gi, &yi)| yi * (gi - dot)));
                    }
                }
            }
            Op::LogSoftmax(x) => {
                if let Some(dx) = buf(grads, nodes, *x) {
                    let n = node.value.last_dim();
                    let y = node.value.data();
                    for ((dxr, gr), yr) in dx.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(y.chunks_exact(n)) {
                        let total: T = gr.iter().copied().sum();
                        add_into(dxr, gr.iter().zip(yr).map(|(&gi, &yi)| gi - yi.exp() * total));
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = node.value.last_dim();
                if let Some(dg) = buf(grads, nodes, *gain) {
                    for (gr, hr) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        add_into(dg, gr.iter().zip(hr).map(|(&a, &b)| a * b));
                    }
                }
                if let Some(dbias) = buf(grads, nodes, *bias) {
                    for gr in g.chunks_exact(n) {
                        add_into(dbias, gr.iter().copied());
                    }
                }
                if let Some(dx) = buf(grads, nodes, *x) {
                    let gain = val(*gain);
                    let nt = T::from_usize(n).expect("width");
                    let mut dh = vec![T::zero(); n];
                    for (r, (gr, hr)) in g.chunks_exact(n).zip(xhat.chunks_exact(n)).enumerate() {
                        for j in 0..n {
                            dh[j] = gr[j] * gain[j];
                        }
                        let m1 = dh.iter().copied().sum::<T>() / nt;
                        let m2 = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum::<T>() / nt;
                        let is = inv_std[r];
                        let dxr = &mut dx[r * n..(r + 1) * n];
                        add_into(dxr, (0..n).map(|j| is * (dh[j] - m1 - hr[j] * m2)));
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                if let Some(dx) = buf(grads, nodes, *x) {
                    for (&idx, &gi) in argmax.iter().zip(g) {
                        dx[idx] = dx[idx] + gi;
                    }
                }
            }
            Op::Concat(xs) => {
                let total = node.value.last_dim();
                let rows = g.len() / total.max(1);
                let mut offset = 0;
                for &x in xs {
                    let w = nodes[x.0].value.last_dim();
                    if let Some(dx) = buf(grads, nodes, x) {
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            add_into(&mut dx[r * w..(r + 1) * w], src.iter().copied());
                        }
                    }
                    offset += w;
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = buf(grads, nodes, *a) {
                    add_into(da, g.iter().copied());
                }
                if let Some(db) = buf(grads, nodes, *b) {
                    add_into(db, g.iter().copied());
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = buf(grads, nodes, *a) {
                    add_into(da, g.iter().copied());
                }
                if let Some(db) = buf(grads, nodes, *b) {
                    add_into(db, g.iter().map(|&v| -v));
                }
            }
            Op::Mul(a, b) => {
                if let Some(da) = buf(grads, nodes, *a) {
                    add_into(da, g.iter().zip(val(*b)).map(|(&gi, &bi)| gi * bi));
                }
                if let Some(db) = buf(grads, nodes, *b) {
                    add_into(db, g.iter().zip(val(*a)).map(|(&gi, &ai)| gi * ai));
                }
            }
            Op::Scale(x, c) => {
                if let Some(dx) = buf(grads, nodes, *x) {
                    add_into(dx, g.iter().map(|&v| v * *c));
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = buf(grads, nodes, *x) {
                    let g0 = g[0];
                    for d in dx.iter_mut() {
                        *d = *d + g0;
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = buf(grads, nodes, *x) {
                    add_into(dx, g.iter().copied());
                }
            }
            Op::PermuteRows { x, perm } => {
                if let Some(dx) = buf(grads, nodes, *x) {
                    let s = node.value.shape();
                    let (batch, n, k) = (s[0], s[1], s[2]);
                    for b in 0..batch {
                        for (i, &p) in perm.iter().enumerate() {
                            let src = &g[(b * n + i) * k..(b * n + i + 1) * k];
                            add_into(&mut dx[(b * n + p) * k..(b * n + p + 1) * k], src.iter().copied());
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Name of the op that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].name
    }
}
