//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding its
//! output value and enough saved state to run the backward pass. Nodes are
//! appended in execution order, so walking the list backwards visits every
//! consumer before its producers. Parameters are borrowed from a
//! [`ParamStore`] and their gradients come back in a [`Gradients`] buffer,
//! which lets several tapes run against the same store from different threads.

use std::collections::HashMap;

use crate::error::TensorError;
use crate::diffcore::params::{Gradients, ParamId, ParamStore};
use crate::diffcore::tensor::{gemm, MatRef, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    idx: usize,
    generation: u32,
}

enum Op<S> {
    Input,
    Param(ParamId),
    Conv1d { input: usize, kernels: usize, stride: usize },
    AddBias { x: usize, bias: usize, axis: usize },
    MaxPool { x: usize, argmax: Vec<u32> },
    GlobalMax { x: usize, argmax: Vec<u32> },
    Softmax { x: usize, axis: usize },
    Normalize { x: usize, affine: Option<(usize, usize)>, axis: usize, xhat: Vec<S>, inv_std: Vec<S> },
    Prelu { x: usize, slope: usize, axis: usize },
    Matmul { a: usize, b: usize, ta: bool, tb: bool },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: S },
    Sum { x: usize },
    MeanAbs { x: usize },
    SumSquares { x: usize },
    Reshape { x: usize },
    WeightedCe { logits: usize, targets: Vec<usize>, weights: Vec<S>, probs: Vec<S> },
}

struct Node<S> {
    /// `None` for parameter leaves, whose value lives in the store.
    value: Option<Tensor<S>>,
    op: Op<S>,
    needs_grad: bool,
}

/// Recording of one forward pass.
pub struct Tape<'p, S: Scalar> {
    params: &'p ParamStore<S>,
    nodes: Vec<Node<S>>,
    param_leaf: HashMap<ParamId, usize>,
    generation: u32,
    consumed: bool,
}

/// Splits `shape` around `axis` into `(outer, n, inner)` element counts.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn grad_buf<S: Scalar>(grads: &mut [Option<Vec<S>>], idx: usize, len: usize) -> &mut Vec<S> {
    grads[idx].get_or_insert_with(|| vec![S::zero(); len])
}

impl<'p, S: Scalar> Tape<'p, S> {
    pub fn new(params: &'p ParamStore<S>) -> Self {
        Self { params, nodes: Vec::new(), param_leaf: HashMap::new(), generation: 0, consumed: false }
    }

    pub fn params(&self) -> &'p ParamStore<S> {
        self.params
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize, TensorError> {
        if v.generation != self.generation || v.idx >= self.nodes.len() {
            return Err(if self.consumed { TensorError::GraphConsumed } else { TensorError::StaleVar });
        }
        Ok(v.idx)
    }

    fn val(&self, idx: usize) -> &Tensor<S> {
        match (&self.nodes[idx].value, &self.nodes[idx].op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.value(*id),
            (None, _) => unreachable!("only parameter leaves borrow their value"),
        }
    }

    /// Value of a recorded node.
    pub fn value(&self, v: Var) -> Result<&Tensor<S>, TensorError> {
        Ok(self.val(self.check(v)?))
    }

    pub fn shape(&self, v: Var) -> Result<&[usize], TensorError> {
        Ok(self.value(v)?.shape())
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        self.consumed = false;
        self.nodes.push(Node { value: Some(value), op, needs_grad });
        Ok(Var { idx: self.nodes.len() - 1, generation: self.generation })
    }

    fn ng(&self, idx: usize) -> bool {
        self.nodes[idx].needs_grad
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, t: Tensor<S>) -> Result<Var, TensorError> {
        self.push("input", t, Op::Input, false)
    }

    /// Input whose gradient is reported by [`Gradients::input`].
    pub fn input_tracked(&mut self, t: Tensor<S>) -> Result<Var, TensorError> {
        self.push("input", t, Op::Input, true)
    }

    /// Leaf for a stored parameter. Gradients flow only if it is trainable.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&idx) = self.param_leaf.get(&id) {
            return Var { idx, generation: self.generation };
        }
        self.consumed = false;
        let needs_grad = self.params.get(id).trainable;
        self.nodes.push(Node { value: None, op: Op::Param(id), needs_grad });
        let idx = self.nodes.len() - 1;
        self.param_leaf.insert(id, idx);
        Var { idx, generation: self.generation }
    }

    /// Valid 1-D convolution, batched over a leading axis.
    ///
    /// `input` is `[C_in, L]` or `[B, C_in, L]`, `kernels` is `[C_out, C_in, K]`;
    /// the output is `[C_out, L_out]` or `[B, C_out, L_out]` with
    /// `L_out = (L - K) / stride + 1`.
    pub fn conv1d(&mut self, input: Var, kernels: Var, stride: usize) -> Result<Var, TensorError> {
        let (xi, wi) = (self.check(input)?, self.check(kernels)?);
        let (x, w) = (self.val(xi), self.val(wi));
        let (batch, cin, len, batched) = match x.shape() {
            &[c, l] => (1, c, l, false),
            &[b, c, l] => (b, c, l, true),
            s => return Err(TensorError::Rank { op: "conv1d", expected: 3, got: s.to_vec() }),
        };
        let &[cout, wcin, k] = w.shape() else {
            return Err(TensorError::Rank { op: "conv1d kernels", expected: 3, got: w.shape().to_vec() });
        };
        if wcin != cin {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d",
                detail: format!("input has {cin} channels, kernels expect {wcin}"),
            });
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument("conv1d stride must be positive".into()));
        }
        if len < k {
            return Err(TensorError::TooShort { op: "conv1d", len, min: k });
        }
        let lout = (len - k) / stride + 1;
        let mut out = vec![S::zero(); batch * cout * lout];
        let mut cols = vec![S::zero(); cin * k * lout];
        for b in 0..batch {
            im2col(&x.data()[b * cin * len..(b + 1) * cin * len], cin, len, k, stride, lout, &mut cols);
            gemm(
                MatRef::new(w.data(), cout, cin * k),
                MatRef::new(&cols, cin * k, lout),
                S::zero(),
                &mut out[b * cout * lout..(b + 1) * cout * lout],
            );
        }
        let shape = if batched { vec![batch, cout, lout] } else { vec![cout, lout] };
        let ng = self.ng(xi) || self.ng(wi);
        self.push("conv1d", Tensor::new(shape, out)?, Op::Conv1d { input: xi, kernels: wi, stride }, ng)
    }

    /// Adds `bias[c]` to every element whose index along `axis` is `c`.
    pub fn add_bias(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var, TensorError> {
        let (xi, bi) = (self.check(x)?, self.check(bias)?);
        let (xv, bv) = (self.val(xi), self.val(bi));
        if axis >= xv.rank() || bv.len() != xv.shape()[axis] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                detail: format!("bias of {} values for axis {axis} of {:?}", bv.len(), xv.shape()),
            });
        }
        let (outer, n, inner) = split_axis(xv.shape(), axis);
        let mut out = xv.data().to_vec();
        for o in 0..outer {
            for c in 0..n {
                let b = bv.data()[c];
                out[(o * n + c) * inner..(o * n + c + 1) * inner].iter_mut().for_each(|v| *v += b);
            }
        }
        let shape = xv.shape().to_vec();
        let ng = self.ng(xi) || self.ng(bi);
        self.push("add_bias", Tensor::new(shape, out)?, Op::AddBias { x: xi, bias: bi, axis }, ng)
    }

    /// Max pooling over the last axis. Ties go to the lowest index.
    pub fn maxpool1d(&mut self, x: Var, size: usize, stride: usize) -> Result<Var, TensorError> {
        let xi = self.check(x)?;
        let xv = self.val(xi);
        if size == 0 || stride == 0 {
            return Err(TensorError::InvalidArgument("maxpool1d size and stride must be positive".into()));
        }
        let len = *xv.shape().last().ok_or(TensorError::Rank { op: "maxpool1d", expected: 1, got: vec![] })?;
        if len < size {
            return Err(TensorError::TooShort { op: "maxpool1d", len, min: size });
        }
        let rows = xv.len() / len;
        let lout = (len - size) / stride + 1;
        let mut out = Vec::with_capacity(rows * lout);
        let mut argmax = Vec::with_capacity(rows * lout);
        for r in 0..rows {
            let row = &xv.data()[r * len..(r + 1) * len];
            for t in 0..lout {
                let start = t * stride;
                let (mut best, mut at) = (row[start], start);
                for (j, &v) in row[start + 1..start + size].iter().enumerate() {
                    if v > best {
                        best = v;
                        at = start + 1 + j;
                    }
                }
                out.push(best);
                argmax.push((r * len + at) as u32);
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = lout;
        let ng = self.ng(xi);
        self.push("maxpool1d", Tensor::new(shape, out)?, Op::MaxPool { x: xi, argmax }, ng)
    }

    /// Maximum over the last axis, which is removed from the shape.
    pub fn global_maxpool(&mut self, x: Var) -> Result<Var, TensorError> {
        let xi = self.check(x)?;
        let xv = self.val(xi);
        let len = xv.shape().last().copied().unwrap_or(0);
        if len == 0 {
            return Err(TensorError::TooShort { op: "global_maxpool", len: 0, min: 1 });
        }
        let rows = xv.len() / len;
        let mut out = Vec::with_capacity(rows);
        let mut argmax = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv.data()[r * len..(r + 1) * len];
            let (mut best, mut at) = (row[0], 0);
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > best {
                    best = v;
                    at = j;
                }
            }
            out.push(best);
            argmax.push((r * len + at) as u32);
        }
        let mut shape = xv.shape()[..xv.rank() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        let ng = self.ng(xi);
        self.push("global_maxpool", Tensor::new(shape, out)?, Op::GlobalMax { x: xi, argmax }, ng)
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let xi = self.check(x)?;
        let xv = self.val(xi);
        if axis >= xv.rank() {
            return Err(TensorError::InvalidArgument(format!("softmax axis {axis} for rank {}", xv.rank())));
        }
        let (outer, n, inner) = split_axis(xv.shape(), axis);
        let mut out = xv.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let at = |c: usize| (o * n + c) * inner + i;
                let m = (0..n).map(|c| out[at(c)]).fold(S::neg_infinity(), S::max);
                let mut z = S::zero();
                for c in 0..n {
                    let e = (out[at(c)] - m).exp();
                    out[at(c)] = e;
                    z += e;
                }
                for c in 0..n {
                    out[at(c)] = out[at(c)] / z;
                }
            }
        }
        let shape = xv.shape().to_vec();
        let ng = self.ng(xi);
        self.push("softmax", Tensor::new(shape, out)?, Op::Softmax { x: xi, axis }, ng)
    }

    /// Standardizes slices along `axis` (biased variance plus `eps`), then
    /// applies `gain` and `bias` indexed along that axis when given.
    pub fn normalize(&mut self, x: Var, axis: usize, eps: f64, affine: Option<(Var, Var)>) -> Result<Var, TensorError> {
        let xi = self.check(x)?;
        let affine = match affine {
            Some((g, b)) => Some((self.check(g)?, self.check(b)?)),
            None => None,
        };
        let xv = self.val(xi);
        if axis >= xv.rank() {
            return Err(TensorError::InvalidArgument(format!("normalize axis {axis} for rank {}", xv.rank())));
        }
        let (outer, n, inner) = split_axis(xv.shape(), axis);
        if n == 0 {
            return Err(TensorError::TooShort { op: "normalize", len: 0, min: 1 });
        }
        if let Some((g, b)) = affine {
            if self.val(g).len() != n || self.val(b).len() != n {
                return Err(TensorError::ShapeMismatch {
                    op: "normalize",
                    detail: format!("gain/bias must have {n} values"),
                });
            }
        }
        let eps = S::of(eps);
        let nf = S::of(n as f64);
        let data = xv.data();
        let mut xhat = vec![S::zero(); data.len()];
        let mut inv_std = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |c: usize| (o * n + c) * inner + i;
                let mean = (0..n).map(|c| data[at(c)]).sum::<S>() / nf;
                let var = (0..n).map(|c| (data[at(c)] - mean).powi(2)).sum::<S>() / nf;
                let is = (var + eps).sqrt().recip();
                inv_std[o * inner + i] = is;
                for c in 0..n {
                    xhat[at(c)] = (data[at(c)] - mean) * is;
                }
            }
        }
        let out = match affine {
            Some((g, b)) => {
                let (gv, bv) = (self.val(g).data(), self.val(b).data());
                let mut out = xhat.clone();
                for o in 0..outer {
                    for c in 0..n {
                        for v in &mut out[(o * n + c) * inner..(o * n + c + 1) * inner] {
                            *v = *v * gv[c] + bv[c];
                        }
                    }
                }
                out
            }
            None => xhat.clone(),
        };
        let shape = xv.shape().to_vec();
        let ng = self.ng(xi) || affine.is_some_and(|(g, b)| self.ng(g) || self.ng(b));
        self.push("normalize", Tensor::new(shape, out)?, Op::Normalize { x: xi, affine, axis, xhat, inv_std }, ng)
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, TensorError> {
        let rank = self.shape(x)?.len();
        self.normalize(x, rank - 1, eps, Some((gain, bias)))
    }

    /// Per-row standardization of an `[N, T]` signal without affine parameters.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<Var, TensorError> {
        let rank = self.shape(x)?.len();
        if rank != 2 {
            return Err(TensorError::Rank { op: "instance_norm", expected: 2, got: self.shape(x)?.to_vec() });
        }
        self.normalize(x, 1, eps, None)
    }

    /// `x` where `x >= 0`, `slope * x` elsewhere. `slope` holds one value per
    /// index along `axis`, or a single shared value.
    pub fn prelu(&mut self, x: Var, slope: Var, axis: usize) -> Result<Var, TensorError> {
        let (xi, si) = (self.check(x)?, self.check(slope)?);
        let (xv, sv) = (self.val(xi), self.val(si));
        if axis >= xv.rank() || (sv.len() != 1 && sv.len() != xv.shape()[axis]) {
            return Err(TensorError::ShapeMismatch {
                op: "prelu",
                detail: format!("{} slopes for axis {axis} of {:?}", sv.len(), xv.shape()),
            });
        }
        let (outer, n, inner) = split_axis(xv.shape(), axis);
        let shared = sv.len() == 1;
        let mut out = xv.data().to_vec();
        for o in 0..outer {
            for c in 0..n {
                let a = sv.data()[if shared { 0 } else { c }];
                for v in &mut out[(o * n + c) * inner..(o * n + c + 1) * inner] {
                    if *v < S::zero() {
                        *v = *v * a;
                    }
                }
            }
        }
        let shape = xv.shape().to_vec();
        let ng = self.ng(xi) || self.ng(si);
        self.push("prelu", Tensor::new(shape, out)?, Op::Prelu { x: xi, slope: si, axis }, ng)
    }

    /// Matrix product of rank-2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_t(a, b, false, false)
    }

    /// Matrix product with optional transposition of either operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var, TensorError> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (av, bv) = (self.val(ai), self.val(bi));
        let (ar, ac) = av.dims2()?;
        let (br, bc) = bv.dims2()?;
        let mut am = MatRef::new(av.data(), ar, ac);
        let mut bm = MatRef::new(bv.data(), br, bc);
        if ta {
            am = am.t();
        }
        if tb {
            bm = bm.t();
        }
        let (p, q) = if ta { (ac, ar) } else { (ar, ac) };
        let (q2, r) = if tb { (bc, br) } else { (br, bc) };
        if q != q2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("{p}x{q} times {q2}x{r}"),
            });
        }
        let mut out = vec![S::zero(); p * r];
        gemm(am, bm, S::zero(), &mut out);
        let ng = self.ng(ai) || self.ng(bi);
        self.push("matmul", Tensor::new(vec![p, r], out)?, Op::Matmul { a: ai, b: bi, ta, tb }, ng)
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<(), TensorError> {
        if self.val(a).shape() != self.val(b).shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.val(a).shape(), self.val(b).shape()),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        self.same_shape("add", ai, bi)?;
        let out: Vec<S> = self.val(ai).data().iter().zip(self.val(bi).data()).map(|(&x, &y)| x + y).collect();
        let shape = self.val(ai).shape().to_vec();
        let ng = self.ng(ai) || self.ng(bi);
        self.push("add", Tensor::new(shape, out)?, Op::Add { a: ai, b: bi }, ng)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        self.same_shape("mul", ai, bi)?;
        let out: Vec<S> = self.val(ai).data().iter().zip(self.val(bi).data()).map(|(&x, &y)| x * y).collect();
        let shape = self.val(ai).shape().to_vec();
        let ng = self.ng(ai) || self.ng(bi);
        self.push("mul", Tensor::new(shape, out)?, Op::Mul { a: ai, b: bi }, ng)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, TensorError> {
        let xi = self.check(x)?;
        let c = S::of(c);
        let t = self.val(xi).map(|v| v * c);
        let ng = self.ng(xi);
        self.push("scale", t, Op::Scale { x: xi, c }, ng)
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let xi = self.check(x)?;
        let s = self.val(xi).sum();
        let ng = self.ng(xi);
        self.push("sum", Tensor::scalar(s), Op::Sum { x: xi }, ng)
    }

    /// Mean absolute value of all elements.
    pub fn mean_abs(&mut self, x: Var) -> Result<Var, TensorError> {
        let xi = self.check(x)?;
        let xv = self.val(xi);
        let m = xv.data().iter().map(|v| v.abs()).sum::<S>() / S::of(xv.len().max(1) as f64);
        let ng = self.ng(xi);
        self.push("mean_abs", Tensor::scalar(m), Op::MeanAbs { x: xi }, ng)
    }

    pub fn sum_squares(&mut self, x: Var) -> Result<Var, TensorError> {
        let xi = self.check(x)?;
        let s = self.val(xi).data().iter().map(|v| *v * *v).sum::<S>();
        let ng = self.ng(xi);
        self.push("sum_squares", Tensor::scalar(s), Op::SumSquares { x: xi }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let xi = self.check(x)?;
        let t = self.val(xi).clone().reshape(shape.to_vec())?;
        let ng = self.ng(xi);
        self.push("reshape", t, Op::Reshape { x: xi }, ng)
    }

    /// Mean over the batch of `weights[y] * -log softmax(logits)[y]`.
    pub fn weighted_cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var, TensorError> {
        let li = self.check(logits)?;
        let lv = self.val(li);
        let (batch, classes) = lv.dims2()?;
        if targets.len() != batch || weights.len() != classes {
            return Err(TensorError::ShapeMismatch {
                op: "weighted_cross_entropy",
                detail: format!("{batch}x{classes} logits, {} targets, {} weights", targets.len(), weights.len()),
            });
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
            return Err(TensorError::TargetOutOfRange { target: t, classes });
        }
        if weights.iter().any(|w| !(*w > 0.0)) {
            return Err(TensorError::InvalidArgument("class weights must be positive".into()));
        }
        let mut probs = vec![S::zero(); batch * classes];
        let mut loss = S::zero();
        for (b, &t) in targets.iter().enumerate() {
            let row = lv.row(b);
            let m = row.iter().copied().fold(S::neg_infinity(), S::max);
            let z: S = row.iter().map(|&v| (v - m).exp()).sum();
            let log_z = z.ln() + m;
            for (c, &v) in row.iter().enumerate() {
                probs[b * classes + c] = (v - log_z).exp();
            }
            loss += S::of(weights[t]) * (log_z - row[t]);
        }
        loss = loss / S::of(batch as f64);
        let weights = weights.iter().map(|&w| S::of(w)).collect();
        let ng = self.ng(li);
        self.push(
            "weighted_cross_entropy",
            Tensor::scalar(loss),
            Op::WeightedCe { logits: li, targets: targets.to_vec(), weights, probs },
            ng,
        )
    }

    /// Runs the backward pass from a scalar `loss` and resets the tape.
    ///
    /// A second call without recording a new forward pass fails with
    /// [`TensorError::GraphConsumed`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<S>, TensorError> {
        self.backward_seeded(loss, 1.0)
    }

    /// Like [`Tape::backward`] with `d(loss)` seeded to `seed` instead of one.
    pub fn backward_seeded(&mut self, loss: Var, seed: f64) -> Result<Gradients<S>, TensorError> {
        let li = self.check(loss)?;
        if self.val(li).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.val(li).shape().to_vec()));
        }
        let mut result = Gradients::empty(self.params.len());
        let mut grads: Vec<Option<Vec<S>>> = (0..=li).map(|_| None).collect();
        grads[li] = Some(vec![S::of(seed)]);
        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads, &mut result)?;
        }
        self.nodes.clear();
        self.param_leaf.clear();
        self.generation = self.generation.wrapping_add(1);
        self.consumed = true;
        if !result.is_finite() {
            return Err(TensorError::NonFinite { op: "backward" });
        }
        Ok(result)
    }

    fn backprop_node(
        &self,
        i: usize,
        g: &[S],
        grads: &mut [Option<Vec<S>>],
        result: &mut Gradients<S>,
    ) -> Result<(), TensorError> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Input => {
                result.inputs.insert(i, Tensor::new(self.val(i).shape().to_vec(), g.to_vec())?);
            }
            Op::Param(id) => result.accumulate(*id, g),
            &Op::Conv1d { input, kernels, stride } => {
                let (x, w) = (self.val(input), self.val(kernels));
                let (cout, cin, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
                let len = *x.shape().last().unwrap();
                let batch = x.len() / (cin * len);
                let lout = (len - k) / stride + 1;
                let mut cols = vec![S::zero(); cin * k * lout];
                let mut gcols = vec![S::zero(); cin * k * lout];
                let need_w = self.ng(kernels);
                let need_x = self.ng(input);
                for b in 0..batch {
                    let gout = &g[b * cout * lout..(b + 1) * cout * lout];
                    if need_w {
                        im2col(&x.data()[b * cin * len..(b + 1) * cin * len], cin, len, k, stride, lout, &mut cols);
                        let gw = grad_buf(grads, kernels, w.len());
                        gemm(MatRef::new(gout, cout, lout), MatRef::new(&cols, cin * k, lout).t(), S::one(), gw);
                    }
                    if need_x {
                        gemm(MatRef::new(w.data(), cout, cin * k).t(), MatRef::new(gout, cout, lout), S::zero(), &mut gcols);
                        let gx = grad_buf(grads, input, x.len());
                        col2im_add(&gcols, cin, len, k, stride, lout, &mut gx[b * cin * len..(b + 1) * cin * len]);
                    }
                }
            }
            &Op::AddBias { x, bias, axis } => {
                let (outer, n, inner) = split_axis(self.val(x).shape(), axis);
                if self.ng(x) {
                    grad_buf(grads, x, g.len()).iter_mut().zip(g).for_each(|(a, &b)| *a += b);
                }
                if self.ng(bias) {
                    let gb = grad_buf(grads, bias, n);
                    for o in 0..outer {
                        for c in 0..n {
                            gb[c] += g[(o * n + c) * inner..(o * n + c + 1) * inner].iter().copied().sum::<S>();
                        }
                    }
                }
            }
            Op::MaxPool { x, argmax } | Op::GlobalMax { x, argmax } => {
                let gx = grad_buf(grads, *x, self.val(*x).len());
                for (&at, &gv) in argmax.iter().zip(g) {
                    gx[at as usize] += gv;
                }
            }
            &Op::Softmax { x, axis } => {
                let y = self.val(i).data();
                let (outer, n, inner) = split_axis(self.val(i).shape(), axis);
                let gx = grad_buf(grads, x, y.len());
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |c: usize| (o * n + c) * inner + j;
                        let dot: S = (0..n).map(|c| g[at(c)] * y[at(c)]).sum();
                        for c in 0..n {
                            gx[at(c)] += y[at(c)] * (g[at(c)] - dot);
                        }
                    }
                }
            }
            Op::Normalize { x, affine, axis, xhat, inv_std } => {
                let (outer, n, inner) = split_axis(self.val(*x).shape(), *axis);
                let nf = S::of(n as f64);
                if let Some((gain, bias)) = *affine {
                    if self.ng(gain) {
                        let gg = grad_buf(grads, gain, n);
                        for o in 0..outer {
                            for c in 0..n {
                                let r = (o * n + c) * inner..(o * n + c + 1) * inner;
                                gg[c] += g[r.clone()].iter().zip(&xhat[r]).map(|(&a, &b)| a * b).sum::<S>();
                            }
                        }
                    }
                    if self.ng(bias) {
                        let gb = grad_buf(grads, bias, n);
                        for o in 0..outer {
                            for c in 0..n {
                                gb[c] += g[(o * n + c) * inner..(o * n + c + 1) * inner].iter().copied().sum::<S>();
                            }
                        }
                    }
                }
                if self.ng(*x) {
                    let gain = affine.map(|(gn, _)| self.val(gn).data());
                    let gx = grad_buf(grads, *x, xhat.len());
                    let mut gh = vec![S::zero(); n];
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |c: usize| (o * n + c) * inner + j;
                            let mut s1 = S::zero();
                            let mut s2 = S::zero();
                            for c in 0..n {
                                let v = g[at(c)] * gain.map_or(S::one(), |gv| gv[c]);
                                gh[c] = v;
                                s1 += v;
                                s2 += v * xhat[at(c)];
                            }
                            let is = inv_std[o * inner + j];
                            for c in 0..n {
                                gx[at(c)] += is / nf * (nf * gh[c] - s1 - xhat[at(c)] * s2);
                            }
                        }
                    }
                }
            }
            &Op::Prelu { x, slope, axis } => {
                let (xv, sv) = (self.val(x), self.val(slope));
                let (outer, n, inner) = split_axis(xv.shape(), axis);
                let shared = sv.len() == 1;
                if self.ng(x) {
                    let gx = grad_buf(grads, x, xv.len());
                    for o in 0..outer {
                        for c in 0..n {
                            let a = sv.data()[if shared { 0 } else { c }];
                            let r = (o * n + c) * inner..(o * n + c + 1) * inner;
                            for ((gxv, &gv), &xvv) in gx[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xv.data()[r]) {
                                *gxv += if xvv < S::zero() { a * gv } else { gv };
                            }
                        }
                    }
                }
                if self.ng(slope) {
                    let gs = grad_buf(grads, slope, sv.len());
                    for o in 0..outer {
                        for c in 0..n {
                            let r = (o * n + c) * inner..(o * n + c + 1) * inner;
                            let s: S = g[r.clone()]
                                .iter()
                                .zip(&xv.data()[r])
                                .filter(|(_, &xvv)| xvv < S::zero())
                                .map(|(&gv, &xvv)| gv * xvv)
                                .sum();
                            gs[if shared { 0 } else { c }] += s;
                        }
                    }
                }
            }
            &Op::Matmul { a, b, ta, tb } => {
                let (av, bv) = (self.val(a), self.val(b));
                let (ar, ac) = (av.shape()[0], av.shape()[1]);
                let (br, bc) = (bv.shape()[0], bv.shape()[1]);
                let out_shape = self.val(i).shape();
                let gm = MatRef::new(g, out_shape[0], out_shape[1]);
                let mut am = MatRef::new(av.data(), ar, ac);
                let mut bm = MatRef::new(bv.data(), br, bc);
                if ta {
                    am = am.t();
                }
                if tb {
                    bm = bm.t();
                }
                if self.ng(a) {
                    let ga = grad_buf(grads, a, av.len());
                    if ta {
                        gemm(bm, gm.t(), S::one(), ga);
                    } else {
                        gemm(gm, bm.t(), S::one(), ga);
                    }
                }
                if self.ng(b) {
                    let gb = grad_buf(grads, b, bv.len());
                    if tb {
                        gemm(gm.t(), am, S::one(), gb);
                    } else {
                        gemm(am.t(), gm, S::one(), gb);
                    }
                }
            }
            &Op::Add { a, b } => {
                for p in [a, b] {
                    if self.ng(p) {
                        grad_buf(grads, p, g.len()).iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            &Op::Mul { a, b } => {
                for (p, other) in [(a, b), (b, a)] {
                    if self.ng(p) {
                        let ov = self.val(other).data();
                        let gp = grad_buf(grads, p, g.len());
                        for ((x, &gv), &o) in gp.iter_mut().zip(g).zip(ov) {
                            *x += gv * o;
                        }
                    }
                }
            }
            &Op::Scale { x, c } => {
                grad_buf(grads, x, g.len()).iter_mut().zip(g).for_each(|(a, &b)| *a += b * c);
            }
            &Op::Sum { x } => {
                let n = self.val(x).len();
                grad_buf(grads, x, n).iter_mut().for_each(|a| *a += g[0]);
            }
            &Op::MeanAbs { x } => {
                let xv = self.val(x);
                let k = g[0] / S::of(xv.len().max(1) as f64);
                let gx = grad_buf(grads, x, xv.len());
                for (a, &v) in gx.iter_mut().zip(xv.data()) {
                    *a += k * v.signum() * if v == S::zero() { S::zero() } else { S::one() };
                }
            }
            &Op::SumSquares { x } => {
                let xv = self.val(x);
                let gx = grad_buf(grads, x, xv.len());
                for (a, &v) in gx.iter_mut().zip(xv.data()) {
                    *a += S::of(2.0) * v * g[0];
                }
            }
            &Op::Reshape { x } => {
                grad_buf(grads, x, g.len()).iter_mut().zip(g).for_each(|(a, &b)| *a += b);
            }
            Op::WeightedCe { logits, targets, weights, probs } => {
                let classes = weights.len();
                let batch = targets.len();
                let gl = grad_buf(grads, *logits, probs.len());
                for (b, &t) in targets.iter().enumerate() {
                    let k = g[0] * weights[t] / S::of(batch as f64);
                    for c in 0..classes {
                        let onehot = if c == t { S::one() } else { S::zero() };
                        gl[b * classes + c] += k * (probs[b * classes + c] - onehot);
                    }
                }
            }
        }
        Ok(())
    }
}

impl<S: Scalar> Gradients<S> {
    /// Gradient with respect to a tracked input of the tape that produced this buffer.
    pub fn input(&self, v: Var) -> Option<&Tensor<S>> {
        self.inputs.get(&v.idx)
    }
}

/// Unfolds `[cin, len]` into `[cin * k, lout]` patches.
fn im2col<S: Scalar>(x: &[S], cin: usize, len: usize, k: usize, stride: usize, lout: usize, cols: &mut [S]) {
    for c in 0..cin {
        let row = &x[c * len..(c + 1) * len];
        for j in 0..k {
            let dst = &mut cols[(c * k + j) * lout..(c * k + j + 1) * lout];
            if stride == 1 {
                dst.copy_from_slice(&row[j..j + lout]);
            } else {
                for (t, d) in dst.iter_mut().enumerate() {
                    *d = row[t * stride + j];
                }
            }
        }
    }
}

fn col2im_add<S: Scalar>(cols: &[S], cin: usize, len: usize, k: usize, stride: usize, lout: usize, gx: &mut [S]) {
    for c in 0..cin {
        let row = &mut gx[c * len..(c + 1) * len];
        for j in 0..k {
            let src = &cols[(c * k + j) * lout..(c * k + j + 1) * lout];
            if stride == 1 {
                row[j..j + lout].iter_mut().zip(src).for_each(|(a, &b)| *a += b);
            } else {
                for (t, &v) in src.iter().enumerate() {
                    row[t * stride + j] += v;
                }
            }
        }
    }
}
