//! Define-by-run reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] is rebuilt for every forward pass. Each operation appends a
//! node holding its output value and enough saved state to run its
//! adjoint; [`Graph::backward`] then walks the nodes in reverse order and
//! accumulates gradients. Nodes created with [`Graph::input`] never receive
//! gradients, which lets large constant inputs (point clouds) skip the
//! corresponding adjoint products.

use super::params::{ParamId, ParamStore};
use super::{NumericError, Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine { x: Var, w: Var, b: Var, relu: bool },
    ScaleRows(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    SegmentMax { input: Var, argmax: Vec<usize> },
    ConcatCols(Vec<Var>),
    SliceCols { input: Var, start: usize },
    IndexRows { input: Var, index: Vec<Option<usize>> },
    ScatterAddRows { input: Var, index: Vec<usize> },
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    BceLogits { logits: Var, targets: Vec<T> },
    Bce { probs: Var, targets: Vec<T>, eps: T },
    Gate { x: Var, alpha: Var, beta: Var },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Affine { .. } => "affine",
            Op::ScaleRows(..) => "scale_rows",
            Op::Scale(..) => "scale",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::SoftmaxRows(..) => "softmax",
            Op::SegmentMax { .. } => "segment_max",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::IndexRows { .. } => "index_rows",
            Op::ScatterAddRows { .. } => "scatter_add_rows",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::BceLogits { .. } => "per_class_bce",
            Op::Bce { .. } => "bce",
            Op::Gate { .. } => "gate",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// First non-finite value seen during a forward or backward pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NonFinite {
    pub node: usize,
    pub op: &'static str,
    pub in_backward: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the root with respect to `v`; `None` when `v` does not
    /// influence the root or was created as a constant input.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
    non_finite: Option<NonFinite>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> NumericError {
    NumericError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Branch-wise gate: 0 below `beta`, linear with slope `alpha` up to
/// `1/alpha + beta`, 1 above.
pub fn gate_value<T: Scalar>(x: T, alpha: T, beta: T) -> T {
    if x <= beta {
        T::zero()
    } else if x >= T::one() / alpha + beta {
        T::one()
    } else {
        alpha * x - alpha * beta
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: Vec::new(),
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

    pub fn non_finite(&self) -> Option<&NonFinite> {
        self.non_finite.as_ref()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        let idx = self.nodes.len();
        if self.non_finite.is_none() && !value.all_finite() {
            self.non_finite = Some(NonFinite {
                node: idx,
                op: op.name(),
                in_backward: false,
            });
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(idx)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter. Repeated calls with the same id
    /// return the same node so gradients accumulate in one place.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let i = id.index();
        if self.param_vars.len() <= i {
            self.param_vars.resize(i + 1, None);
        }
        if let Some(v) = self.param_vars[i] {
            return v;
        }
        let v = self.variable(store.get(id).clone());
        self.param_vars[i] = Some(v);
        v
    }

    /// Node bound to parameter `id`, if the forward pass touched it.
    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.param_vars.get(id.index()).copied().flatten()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(mismatch("matmul", av.shape(), bv.shape()));
        }
        let out = av.matmul(bv)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var, NumericError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch(name, av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_vec(av.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `a + row`, broadcasting a `1 x n` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumericError> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(mismatch("add_row", av.shape(), rv.shape()));
        }
        let mut out = av.clone();
        let c = av.cols();
        let r = rv.data();
        for chunk in out.data_mut().chunks_mut(c.max(1)) {
            for (x, &b) in chunk.iter_mut().zip(r) {
                *x += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(out, Op::AddRow(a, row), ng))
    }

    /// `x w + b` with `b` a `1 x n` row, followed by a ReLU when `relu`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var, relu: bool) -> Result<Var, NumericError> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.cols() != wv.rows() {
            return Err(mismatch("affine", xv.shape(), wv.shape()));
        }
        if bv.rows() != 1 || bv.cols() != wv.cols() {
            return Err(mismatch("affine", wv.shape(), bv.shape()));
        }
        let (m, k, n) = (xv.rows(), xv.cols(), wv.cols());
        let mut data = Vec::with_capacity(m * n);
        for _ in 0..m {
            data.extend_from_slice(bv.data());
        }
        T::gemm(m, k, n, T::one(), xv.data(), k, 1, wv.data(), n, 1, T::one(), &mut data, n, 1);
        if relu {
            for v in &mut data {
                if *v <= T::zero() {
                    *v = T::zero();
                }
            }
        }
        let out = Tensor::from_vec(vec![m, n], data)?;
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(out, Op::Affine { x, w, b, relu }, ng))
    }

    /// Multiplies row `i` of `a` by `s[i]`, `s` being `m x 1`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var, NumericError> {
        let (av, sv) = (self.value(a), self.value(s));
        if sv.cols() != 1 || sv.rows() != av.rows() {
            return Err(mismatch("scale_rows", av.shape(), sv.shape()));
        }
        let mut out = av.clone();
        let c = av.cols();
        if c > 0 {
            for (chunk, &k) in out.data_mut().chunks_mut(c).zip(sv.data()) {
                for x in chunk {
                    *x *= k;
                }
            }
        }
        let ng = self.ng(a) || self.ng(s);
        Ok(self.push(out, Op::ScaleRows(a, s), ng))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let out = self.value(a).map(|x| x * k);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, k), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .map(|x| if x > T::zero() { x } else { T::zero() });
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.tanh());
        let ng = self.ng(a);
        self.push(out, Op::Tanh(a), ng)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, NumericError> {
        let av = self.value(a);
        let c = av.cols();
        if c == 0 {
            return Err(NumericError::EmptyAxis("softmax"));
        }
        let mut out = av.clone();
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        let ng = self.ng(a);
        Ok(self.push(out, Op::SoftmaxRows(a), ng))
    }

    /// Column-wise max over consecutive blocks of `segment` rows:
    /// `(b * segment) x c` becomes `b x c`. Ties resolve to the first row.
    pub fn segment_max(&mut self, a: Var, segment: usize) -> Result<Var, NumericError> {
        let av = self.value(a);
        let (rows, c) = (av.rows(), av.cols());
        if segment == 0 || rows % segment != 0 {
            return Err(NumericError::InvalidArgument(format!(
                "segment_max: {rows} rows not divisible into segments of {segment}"
            )));
        }
        let b = rows / segment;
        let data = av.data();
        let mut out = Vec::with_capacity(b * c);
        let mut argmax = Vec::with_capacity(b * c);
        for s in 0..b {
            let base = s * segment * c;
            let mut best: Vec<T> = data[base..base + c].to_vec();
            let mut arg: Vec<usize> = (base..base + c).collect();
            for r in 1..segment {
                let off = base + r * c;
                for j in 0..c {
                    let v = data[off + j];
                    if v > best[j] {
                        best[j] = v;
                        arg[j] = off + j;
                    }
                }
            }
            out.extend(best);
            argmax.extend(arg);
        }
        let out = Tensor::from_vec(vec![b, c], out)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::SegmentMax { input: a, argmax }, ng))
    }

    /// Column-wise max over all rows: `m x c` becomes `1 x c`.
    pub fn max_pool_rows(&mut self, a: Var) -> Result<Var, NumericError> {
        let rows = self.value(a).rows();
        if rows == 0 {
            return Err(NumericError::EmptyAxis("max_pool_rows"));
        }
        self.segment_max(a, rows)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericError> {
        let first = parts
            .first()
            .ok_or_else(|| NumericError::InvalidArgument("concat of nothing".into()))?;
        let rows = self.value(*first).rows();
        for p in parts {
            if self.value(*p).rows() != rows {
                return Err(mismatch(
                    "concat_cols",
                    self.value(*first).shape(),
                    self.value(*p).shape(),
                ));
            }
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(r));
            }
        }
        let out = Tensor::from_vec(vec![rows, total], out)?;
        let ng = parts.iter().any(|p| self.ng(*p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumericError> {
        let av = self.value(a);
        if start + len > av.cols() {
            return Err(NumericError::InvalidArgument(format!(
                "slice_cols {start}..{} of {} columns",
                start + len,
                av.cols()
            )));
        }
        let mut out = Vec::with_capacity(av.rows() * len);
        for r in 0..av.rows() {
            out.extend_from_slice(&av.row(r)[start..start + len]);
        }
        let out = Tensor::from_vec(vec![av.rows(), len], out)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::SliceCols { input: a, start }, ng))
    }

    /// Output row `k` is input row `index[k]`, or zeros for `None`.
    pub fn index_rows(&mut self, a: Var, index: &[Option<usize>]) -> Result<Var, NumericError> {
        let av = self.value(a);
        let c = av.cols();
        let mut out = Vec::with_capacity(index.len() * c);
        for ix in index {
            match ix {
                Some(r) if *r < av.rows() => out.extend_from_slice(av.row(*r)),
                Some(r) => {
                    return Err(NumericError::InvalidArgument(format!(
                        "index_rows: row {r} of {}",
                        av.rows()
                    )))
                }
                None => out.extend(std::iter::repeat_n(T::zero(), c)),
            }
        }
        let out = Tensor::from_vec(vec![index.len(), c], out)?;
        let ng = self.ng(a);
        Ok(self.push(
            out,
            Op::IndexRows {
                input: a,
                index: index.to_vec(),
            },
            ng,
        ))
    }

    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var, NumericError> {
        let ix: Vec<Option<usize>> = index.iter().copied().map(Some).collect();
        self.index_rows(a, &ix)
    }

    /// Sums input row `k` into output row `index[k]`; output has `rows` rows.
    pub fn scatter_add_rows(
        &mut self,
        a: Var,
        index: &[usize],
        rows: usize,
    ) -> Result<Var, NumericError> {
        let av = self.value(a);
        if index.len() != av.rows() {
            return Err(mismatch("scatter_add_rows", av.shape(), &[index.len()]));
        }
        let c = av.cols();
        let mut out = Tensor::zeros(&[rows, c]);
        for (k, &dst) in index.iter().enumerate() {
            if dst >= rows {
                return Err(NumericError::InvalidArgument(format!(
                    "scatter_add_rows: row {dst} of {rows}"
                )));
            }
            let src = av.row(k);
            for (o, &s) in out.row_mut(dst).iter_mut().zip(src) {
                *o += s;
            }
        }
        let ng = self.ng(a);
        Ok(self.push(
            out,
            Op::ScatterAddRows {
                input: a,
                index: index.to_vec(),
            },
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    /// Mean of all elements; the mean of an empty tensor is 0.
    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let n = av.len();
        let s: T = av.data().iter().copied().sum();
        let m = if n == 0 { T::zero() } else { s / T::c(n as f64) };
        let ng = self.ng(a);
        self.push(Tensor::scalar(m), Op::Mean(a), ng)
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, NumericError> {
        let lv = self.value(logits);
        let (rows, c) = (lv.rows(), lv.cols());
        if targets.len() != rows {
            return Err(mismatch("cross_entropy", lv.shape(), &[targets.len()]));
        }
        if c == 0 {
            return Err(NumericError::EmptyAxis("cross_entropy"));
        }
        let mut probs = lv.data().to_vec();
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(NumericError::InvalidArgument(format!(
                    "cross_entropy target {t} of {c} classes"
                )));
            }
            let row = &lv.data()[r * c..(r + 1) * c];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&x| (x - mx).exp()).sum::<T>().ln() + mx;
            total += lse - row[t];
            softmax_in_place(&mut probs[r * c..(r + 1) * c]);
        }
        let loss = if rows == 0 {
            T::zero()
        } else {
            total / T::c(rows as f64)
        };
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Per-class binary cross-entropy of `sigmoid(logits)` against 0/1
    /// targets, averaged over every element. Evaluated in the stable
    /// `max(x,0) - x*t + ln(1 + e^-|x|)` form.
    pub fn per_class_bce(&mut self, logits: Var, targets: &[T]) -> Result<Var, NumericError> {
        let lv = self.value(logits);
        if targets.len() != lv.len() {
            return Err(mismatch("per_class_bce", lv.shape(), &[targets.len()]));
        }
        let mut total = T::zero();
        for (&x, &t) in lv.data().iter().zip(targets) {
            total += x.max(T::zero()) - x * t + (T::one() + (-x.abs()).exp()).ln();
        }
        let n = lv.len();
        let loss = if n == 0 {
            T::zero()
        } else {
            total / T::c(n as f64)
        };
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceLogits {
                logits,
                targets: targets.to_vec(),
            },
            ng,
        ))
    }

    /// Mean binary cross-entropy on probabilities clamped to `[eps, 1-eps]`.
    pub fn bce(&mut self, probs: Var, targets: &[T], eps: T) -> Result<Var, NumericError> {
        let pv = self.value(probs);
        if targets.len() != pv.len() {
            return Err(mismatch("bce", pv.shape(), &[targets.len()]));
        }
        let mut total = T::zero();
        for (&p, &t) in pv.data().iter().zip(targets) {
            let pc = p.max(eps).min(T::one() - eps);
            total -= t * pc.ln() + (T::one() - t) * (T::one() - pc).ln();
        }
        let n = pv.len();
        let loss = if n == 0 {
            T::zero()
        } else {
            total / T::c(n as f64)
        };
        let ng = self.ng(probs);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                probs,
                targets: targets.to_vec(),
                eps,
            },
            ng,
        ))
    }

    /// Elementwise [`gate_value`] with `1 x 1` learnable `alpha`, `beta`.
    pub fn gate(&mut self, x: Var, alpha: Var, beta: Var) -> Result<Var, NumericError> {
        let (av, bv) = (self.value(alpha), self.value(beta));
        if av.len() != 1 || bv.len() != 1 {
            return Err(mismatch("gate", av.shape(), bv.shape()));
        }
        let (a, b) = (av.data()[0], bv.data()[0]);
        let out = self.value(x).map(|v| gate_value(v, a, b));
        let ng = self.ng(x) || self.ng(alpha) || self.ng(beta);
        Ok(self.push(out, Op::Gate { x, alpha, beta }, ng))
    }

    /// Reverse pass from `root`, seeded with ones. Only leaf adjoints are
    /// kept in the result.
    pub fn backward(&mut self, root: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));

        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if self.non_finite.is_none() && !g.all_finite() {
                self.non_finite = Some(NonFinite {
                    node: i,
                    op: self.nodes[i].op.name(),
                    in_backward: true,
                });
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            } else {
                self.backprop_node(i, g, &mut grads);
            }
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => t.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    /// Accumulates `alpha * op(a) op(b)` into the adjoint of `v` without a
    /// temporary when one already exists.
    #[allow(clippy::too_many_arguments)]
    fn acc_gemm(
        &self,
        grads: &mut [Option<Tensor<T>>],
        v: Var,
        (m, k, n): (usize, usize, usize),
        a: (&[T], usize, usize),
        b: (&[T], usize, usize),
    ) {
        let slot = &mut grads[v.0];
        let beta = if slot.is_some() { T::one() } else { T::zero() };
        let dst = slot.get_or_insert_with(|| Tensor::zeros(self.value(v).shape()));
        T::gemm(
            m, k, n, T::one(), a.0, a.1, a.2, b.0, b.1, b.2, beta, dst.data_mut(), n, 1,
        );
    }

    fn backprop_node(&self, i: usize, mut g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.ng(*a) {
                    self.acc_gemm(grads, *a, (m, n, k), (g.data(), n, 1), (bv.data(), 1, n));
                }
                if self.ng(*b) {
                    self.acc_gemm(grads, *b, (k, m, n), (av.data(), 1, k), (g.data(), n, 1));
                }
            }
            Op::Add(a, b) => {
                if self.ng(*a) && self.ng(*b) {
                    self.acc(grads, *b, g.clone());
                    self.acc(grads, *a, g);
                } else {
                    let v = if self.ng(*a) { *a } else { *b };
                    self.acc(grads, v, g);
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*b) {
                    self.acc(grads, *b, g.map(|x| -x));
                }
                self.acc(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    self.acc(grads, *a, zip_map(&g, bv, |x, y| x * y));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, zip_map(&g, av, |x, y| x * y));
                }
            }
            Op::AddRow(a, row) => {
                if self.ng(*row) {
                    let c = g.cols();
                    let mut dr = Tensor::zeros(self.value(*row).shape());
                    if c > 0 {
                        for chunk in g.data().chunks(c) {
                            for (d, &x) in dr.data_mut().iter_mut().zip(chunk) {
                                *d += x;
                            }
                        }
                    }
                    self.acc(grads, *row, dr);
                }
                self.acc(grads, *a, g);
            }
            Op::Affine { x, w, b, relu } => {
                if *relu {
                    zip_in_place(&mut g, out, |d, y| if y > T::zero() { d } else { T::zero() });
                }
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (m, k, n) = (xv.rows(), xv.cols(), wv.cols());
                if self.ng(*b) {
                    let mut db = Tensor::zeros(&[1, n]);
                    if n > 0 {
                        for chunk in g.data().chunks(n) {
                            for (d, &v) in db.data_mut().iter_mut().zip(chunk) {
                                *d += v;
                            }
                        }
                    }
                    self.acc(grads, *b, db);
                }
                if self.ng(*x) {
                    self.acc_gemm(grads, *x, (m, n, k), (g.data(), n, 1), (wv.data(), 1, n));
                }
                if self.ng(*w) {
                    self.acc_gemm(grads, *w, (k, m, n), (xv.data(), 1, k), (g.data(), n, 1));
                }
            }
            Op::ScaleRows(a, s) => {
                let (av, sv) = (self.value(*a), self.value(*s));
                let c = av.cols();
                if self.ng(*s) {
                    let mut ds = Tensor::zeros(sv.shape());
                    for r in 0..av.rows() {
                        let dot: T = g.row(r).iter().zip(av.row(r)).map(|(&x, &y)| x * y).sum();
                        ds.data_mut()[r] = dot;
                    }
                    self.acc(grads, *s, ds);
                }
                if self.ng(*a) {
                    if c > 0 {
                        for (chunk, &k) in g.data_mut().chunks_mut(c).zip(sv.data()) {
                            for x in chunk {
                                *x *= k;
                            }
                        }
                    }
                    self.acc(grads, *a, g);
                }
            }
            Op::Scale(a, k) => {
                let k = *k;
                g.data_mut().iter_mut().for_each(|x| *x *= k);
                self.acc(grads, *a, g);
            }
            Op::Relu(a) => {
                zip_in_place(&mut g, out, |d, y| if y > T::zero() { d } else { T::zero() });
                self.acc(grads, *a, g);
            }
            Op::Sigmoid(a) => {
                zip_in_place(&mut g, out, |d, y| d * y * (T::one() - y));
                self.acc(grads, *a, g);
            }
            Op::Tanh(a) => {
                zip_in_place(&mut g, out, |d, y| d * (T::one() - y * y));
                self.acc(grads, *a, g);
            }
            Op::SoftmaxRows(a) => {
                let c = out.cols();
                let mut da = Tensor::zeros(out.shape());
                for r in 0..out.rows() {
                    let (y, d) = (out.row(r), g.row(r));
                    let dot: T = y.iter().zip(d).map(|(&a, &b)| a * b).sum();
                    let dst = &mut da.data_mut()[r * c..(r + 1) * c];
                    for j in 0..c {
                        dst[j] = y[j] * (d[j] - dot);
                    }
                }
                self.acc(grads, *a, da);
            }
            Op::SegmentMax { input, argmax } => {
                if !self.ng(*input) {
                    return;
                }
                let slot = &mut grads[input.0];
                let da = slot.get_or_insert_with(|| Tensor::zeros(self.value(*input).shape()));
                for (&src, &d) in argmax.iter().zip(g.data()) {
                    da.data_mut()[src] += d;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let w = pv.cols();
                    if self.ng(*p) {
                        let mut dp = Vec::with_capacity(pv.len());
                        for r in 0..pv.rows() {
                            dp.extend_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        let dp = Tensor::from_vec(pv.shape().to_vec(), dp)
                            .expect("concat adjoint shape");
                        self.acc(grads, *p, dp);
                    }
                    offset += w;
                }
            }
            Op::SliceCols { input, start } => {
                let iv = self.value(*input);
                let mut da = Tensor::zeros(iv.shape());
                let w = g.cols();
                for r in 0..g.rows() {
                    da.row_mut(r)[*start..*start + w].copy_from_slice(g.row(r));
                }
                self.acc(grads, *input, da);
            }
            Op::IndexRows { input, index } => {
                let mut da = Tensor::zeros(self.value(*input).shape());
                for (k, ix) in index.iter().enumerate() {
                    if let Some(r) = ix {
                        let src = g.row(k);
                        for (d, &x) in da.row_mut(*r).iter_mut().zip(src) {
                            *d += x;
                        }
                    }
                }
                self.acc(grads, *input, da);
            }
            Op::ScatterAddRows { input, index } => {
                let iv = self.value(*input);
                let c = iv.cols();
                let mut da = Vec::with_capacity(iv.len());
                for &dst in index {
                    da.extend_from_slice(&g.data()[dst * c..(dst + 1) * c]);
                }
                let da = Tensor::from_vec(iv.shape().to_vec(), da).expect("scatter adjoint shape");
                self.acc(grads, *input, da);
            }
            Op::Sum(a) => {
                let d = g.data()[0];
                self.acc(grads, *a, Tensor::full(self.value(*a).shape(), d));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len().max(1);
                let d = g.data()[0] / T::c(n as f64);
                self.acc(grads, *a, Tensor::full(self.value(*a).shape(), d));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let lv = self.value(*logits);
                let c = lv.cols();
                let rows = targets.len().max(1);
                let k = g.data()[0] / T::c(rows as f64);
                let mut d = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * c + t] -= T::one();
                }
                for x in &mut d {
                    *x *= k;
                }
                let d = Tensor::from_vec(lv.shape().to_vec(), d).expect("ce adjoint shape");
                self.acc(grads, *logits, d);
            }
            Op::BceLogits { logits, targets } => {
                let lv = self.value(*logits);
                let k = g.data()[0] / T::c(lv.len().max(1) as f64);
                let d: Vec<T> = lv
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&x, &t)| (sigmoid(x) - t) * k)
                    .collect();
                let d = Tensor::from_vec(lv.shape().to_vec(), d).expect("bce adjoint shape");
                self.acc(grads, *logits, d);
            }
            Op::Bce {
                probs,
                targets,
                eps,
            } => {
                let pv = self.value(*probs);
                let k = g.data()[0] / T::c(pv.len().max(1) as f64);
                let lo = *eps;
                let hi = T::one() - *eps;
                let d: Vec<T> = pv
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&p, &t)| {
                        if p < lo || p > hi {
                            T::zero()
                        } else {
                            (-t / p + (T::one() - t) / (T::one() - p)) * k
                        }
                    })
                    .collect();
                let d = Tensor::from_vec(pv.shape().to_vec(), d).expect("bce adjoint shape");
                self.acc(grads, *probs, d);
            }
            Op::Gate { x, alpha, beta } => {
                let xv = self.value(*x);
                let a = self.value(*alpha).data()[0];
                let b = self.value(*beta).data()[0];
                let hi = T::one() / a + b;
                let mut dx = Tensor::zeros(xv.shape());
                let (mut da, mut db) = (T::zero(), T::zero());
                for ((d, &v), &gv) in dx.data_mut().iter_mut().zip(xv.data()).zip(g.data()) {
                    if v > b && v < hi {
                        *d = a * gv;
                        da += (v - b) * gv;
                        db -= a * gv;
                    }
                }
                self.acc(grads, *x, dx);
                self.acc(grads, *alpha, Tensor::scalar(da));
                self.acc(grads, *beta, Tensor::scalar(db));
            }
        }
    }
}

fn zip_in_place<T: Scalar>(a: &mut Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) {
    for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
        *x = f(*x, y);
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape().to_vec(), data).expect("same shape")
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for x in row.iter_mut() {
        *x = (*x - mx).exp();
        s += *x;
    }
    for x in row.iter_mut() {
        *x /= s;
    }
}
