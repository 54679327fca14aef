use crate::autodiff::real::{gemm, View};
use crate::autodiff::{Real, Tensor};
use crate::error::{MuseError, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    StopGradient,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Ln(Var),
    Gelu { x: Var, tanh: Vec<T> },
    Sum(Var),
    Mean(Var),
    Transpose(Var),
    Reshape(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMulNt { a: Var, b: Var },
    GatherRows { sources: Vec<Var>, index: Vec<(u32, u32)> },
    SoftmaxRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    PoolRows { x: Var, groups: Vec<Vec<usize>> },
    NormalizeRows { x: Var, norms: Vec<T> },
    DivByScalar { x: Var, s: Var },
    HeadScores { q: Var, k: Var, batch: usize, heads: usize, scale: T },
    HeadMix { a: Var, v: Var, batch: usize, heads: usize },
    RestrictRenorm { a: Var, keep: usize, mass: Vec<T> },
    KlRows { s: Var, target: Tensor<T>, repeat: usize },
    Mse { x: Var, target: Tensor<T> },
    MaskedCrossEntropy { logits: Var, targets: Vec<usize>, allowed: Vec<bool>, probs: Vec<T> },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    /// Accumulated gradient; only kept on leaves.
    grad: Option<Vec<T>>,
}

/// Define-by-run reverse-mode graph. Nodes are appended in evaluation
/// order, so index order is a topological order.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
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

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        self.grad(v).map(|g| Tensor::from_parts(self.shape(v).to_vec(), g.to_vec()))
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.iter_mut().for_each(|x| *x = T::zero());
            }
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(MuseError::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn map_unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        self.push(out, op, &[a])
    }

    fn zip_binary(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        self.push(out, op, &[a, b])
    }

    // ---- elementwise -------------------------------------------------

    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.nodes.push(Node { value, op: Op::StopGradient, requires_grad: false, grad: None });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_binary(a, b, Op::Add(a, b), |p, q| p + q))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_binary(a, b, Op::Sub(a, b), |p, q| p - q))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_binary(a, b, Op::Mul(a, b), |p, q| p * q))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        self.map_unary(a, Op::Scale(a, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        self.map_unary(a, Op::AddScalar(a), |v| v + c)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map_unary(a, Op::Exp(a), |v| v.exp())
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&v| v <= T::zero() || !v.is_finite()) {
            return Err(MuseError::NumericDomain { op: "ln", detail: "non-positive or non-finite input".into() });
        }
        Ok(self.map_unary(a, Op::Ln(a), |v| v.ln()))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (c, k, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
        let xv = self.value(a);
        let tanh: Vec<T> = xv.data().iter().map(|&x| fast_tanh(c * (x + k * x * x * x))).collect();
        let data = xv.data().iter().zip(&tanh).map(|(&x, &t)| half * x * (T::one() + t)).collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push(out, Op::Gelu { x: a, tanh }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s: T = x.data().iter().copied().sum();
        let m = s / T::of(x.numel() as f64);
        self.push(Tensor::scalar(m), Op::Mean(a), &[a])
    }

    // ---- shape --------------------------------------------------------

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.shape().len() != 2 {
            return Err(MuseError::dim("transpose", x.shape(), &[0, 0]));
        }
        let (r, c) = (x.shape()[0], x.shape()[1]);
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = x.data()[i * c + j];
            }
        }
        Ok(self.push(Tensor::from_parts(vec![c, r], data), Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    /// Output row `r` is row `index[r].1` of `sources[index[r].0]`. All
    /// sources must share the trailing dimension.
    pub fn gather_rows(&mut self, sources: &[Var], index: Vec<(u32, u32)>) -> Result<Var> {
        let first = *sources.first().ok_or_else(|| MuseError::Argument("gather_rows without sources".into()))?;
        let cols = self.value(first).cols();
        for &s in sources {
            if self.value(s).cols() != cols {
                return Err(MuseError::dim("gather_rows", self.shape(first), self.shape(s)));
            }
        }
        if index.is_empty() {
            return Err(MuseError::Argument("gather_rows with empty index".into()));
        }
        let mut data = Vec::with_capacity(index.len() * cols);
        for &(s, r) in &index {
            let src = self
                .value(*sources.get(s as usize).ok_or_else(|| MuseError::Argument(format!("gather source {s}")))?);
            if r as usize >= src.rows() {
                return Err(MuseError::Argument(format!("row {r} out of range for {} rows", src.rows())));
            }
            data.extend_from_slice(src.row(r as usize));
        }
        let out = Tensor::from_parts(vec![index.len(), cols], data);
        Ok(self.push(out, Op::GatherRows { sources: sources.to_vec(), index }, sources))
    }

    /// Stacks 2-D tensors with a shared column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mut index = Vec::new();
        for (s, &p) in parts.iter().enumerate() {
            for r in 0..self.value(p).rows() {
                index.push((s as u32, r as u32));
            }
        }
        self.gather_rows(parts, index)
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        self.gather_rows(&[x], rows.iter().map(|&r| (0, r as u32)).collect())
    }

    // ---- linear algebra -----------------------------------------------

    /// `y = x w (+ b)` where `x` is `[.., D]`, `w` is `[D, M]`, `b` is `[M]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.shape().len() != 2 || xv.cols() != wv.shape()[0] {
            return Err(MuseError::dim("linear_map", xv.shape(), wv.shape()));
        }
        let (rows, d, m) = (xv.rows(), xv.cols(), wv.shape()[1]);
        if let Some(b) = b {
            if self.value(b).numel() != m || self.shape(b).len() != 1 {
                return Err(MuseError::dim("linear_map bias", self.shape(b), &[m]));
            }
        }
        let mut out = vec![T::zero(); rows * m];
        gemm(
            T::one(),
            xv.data(),
            View::dense(0, rows, d, d),
            wv.data(),
            View::dense(0, d, m, m),
            &mut out,
            View::dense(0, rows, m, m),
            false,
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_exact_mut(m) {
                row.iter_mut().zip(bias).for_each(|(o, &bb)| *o += bb);
            }
        }
        let mut shape = xv.shape().to_vec();
        if shape.is_empty() {
            shape.push(m);
        } else {
            *shape.last_mut().unwrap() = m;
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Linear { x, w, b }, &parents))
    }

    /// `a b^T` for `a: [M, K]`, `b: [N, K]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.cols() {
            return Err(MuseError::dim("matmul_nt", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.rows());
        let mut out = vec![T::zero(); m * n];
        gemm(
            T::one(),
            av.data(),
            View::dense(0, m, k, k),
            bv.data(),
            View::dense(0, n, k, k).t(),
            &mut out,
            View::dense(0, m, n, n),
            false,
        );
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulNt { a, b }, &[a, b]))
    }

    // ---- normalisation ------------------------------------------------

    /// Softmax over the last dimension, stabilised by max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if !x.all_finite() {
            return Err(MuseError::NumericDomain { op: "softmax_rows", detail: "NaN or infinite logit".into() });
        }
        let c = x.cols();
        let mut out = x.data().to_vec();
        for row in out.chunks_exact_mut(c) {
            softmax_in_place(row);
        }
        let out = Tensor::from_parts(x.shape().to_vec(), out);
        Ok(self.push(out, Op::SoftmaxRows(a), &[a]))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(MuseError::dim("layer_norm", xv.shape(), self.shape(gain)));
        }
        if eps <= 0.0 {
            return Err(MuseError::Argument("layer_norm eps must be positive".into()));
        }
        let eps = T::of(eps);
        let inv_d = T::of(1.0 / d as f64);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = xv.rows();
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let row = xv.row(r);
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
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias]))
    }

    /// Arithmetic mean over `rows` of a `[N, D]` tensor, giving `[D]`.
    pub fn mean_pool_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let pooled = self.pool_rows(x, vec![rows.to_vec()])?;
        let d = self.value(pooled).cols();
        self.reshape(pooled, vec![d])
    }

    /// Mean over each row group, giving `[groups.len(), D]`.
    pub fn pool_rows(&mut self, x: Var, groups: Vec<Vec<usize>>) -> Result<Var> {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        if groups.is_empty() {
            return Err(MuseError::Argument("mean_pool_rows needs at least one group".into()));
        }
        let mut out = vec![T::zero(); groups.len() * d];
        for (gi, group) in groups.iter().enumerate() {
            if group.is_empty() {
                return Err(MuseError::Argument("mean_pool_rows over an empty row subset".into()));
            }
            let inv = T::of(1.0 / group.len() as f64);
            let dst = &mut out[gi * d..(gi + 1) * d];
            for &r in group {
                if r >= n {
                    return Err(MuseError::Argument(format!("row {r} out of range for {n} rows")));
                }
                dst.iter_mut().zip(xv.row(r)).for_each(|(o, &v)| *o += v);
            }
            dst.iter_mut().for_each(|o| *o *= inv);
        }
        let out = Tensor::from_parts(vec![groups.len(), d], out);
        Ok(self.push(out, Op::PoolRows { x, groups }, &[x]))
    }

    /// Scales every last-dimension slice to unit L2 norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        let mut norms = Vec::with_capacity(xv.rows());
        let mut out = xv.data().to_vec();
        for row in out.chunks_exact_mut(d) {
            let nrm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if nrm <= T::of(1e-12) {
                return Err(MuseError::NumericDomain { op: "normalize_rows", detail: "zero-norm row".into() });
            }
            row.iter_mut().for_each(|v| *v /= nrm);
            norms.push(nrm);
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        Ok(self.push(out, Op::NormalizeRows { x, norms }, &[x]))
    }

    /// `x / s` for a scalar node `s`.
    pub fn div_by_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(MuseError::dim("div_by_scalar", self.shape(x), self.shape(s)));
        }
        let sv = self.value(s).item();
        if sv == T::zero() {
            return Err(MuseError::NumericDomain { op: "div_by_scalar", detail: "division by zero".into() });
        }
        Ok(self.map_unary_with_parents(x, s, |v| v / sv))
    }

    fn map_unary_with_parents(&mut self, x: Var, s: Var, f: impl Fn(T) -> T) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push(out, Op::DivByScalar { x, s }, &[x, s])
    }

    // ---- attention ----------------------------------------------------

    /// Per-head scaled scores. `q`, `k` are `[batch*n, heads*dk]`; the result is
    /// `[batch, heads, n, n]` with `scale * q_bh k_bh^T`.
    pub fn head_scores(&mut self, q: Var, k: Var, batch: usize, heads: usize, scale: f64) -> Result<Var> {
        self.same_shape("head_scores", q, k)?;
        let (n, dk) = head_dims(self.value(q), batch, heads, "head_scores")?;
        let hd = heads * dk;
        let scale = T::of(scale);
        let (qv, kv) = (self.value(q).data(), self.value(k).data());
        let mut out = vec![T::zero(); batch * heads * n * n];
        for b in 0..batch {
            for h in 0..heads {
                let base = b * n * hd + h * dk;
                gemm(
                    scale,
                    qv,
                    View::dense(base, n, dk, hd),
                    kv,
                    View::dense(base, n, dk, hd).t(),
                    &mut out,
                    View::dense((b * heads + h) * n * n, n, n, n),
                    false,
                );
            }
        }
        let out = Tensor::from_parts(vec![batch, heads, n, n], out);
        Ok(self.push(out, Op::HeadScores { q, k, batch, heads, scale }, &[q, k]))
    }

    /// Aggregates values with per-head maps: `a` is `[batch, heads, n, n]`,
    /// `v` is `[batch*n, heads*dk]`; output head slice `(b, h)` is `a_bh v_bh`.
    pub fn head_mix(&mut self, a: Var, v: Var, batch: usize, heads: usize) -> Result<Var> {
        let (n, dk) = head_dims(self.value(v), batch, heads, "head_mix")?;
        if self.shape(a) != [batch, heads, n, n] {
            return Err(MuseError::dim("head_mix", self.shape(a), &[batch, heads, n, n]));
        }
        let hd = heads * dk;
        let (av, vv) = (self.value(a).data(), self.value(v).data());
        let mut out = vec![T::zero(); batch * n * hd];
        for b in 0..batch {
            for h in 0..heads {
                gemm(
                    T::one(),
                    av,
                    View::dense((b * heads + h) * n * n, n, n, n),
                    vv,
                    View::dense(b * n * hd + h * dk, n, dk, hd),
                    &mut out,
                    View::dense(b * n * hd + h * dk, n, dk, hd),
                    false,
                );
            }
        }
        let out = Tensor::from_parts(vec![batch * n, hd], out);
        Ok(self.push(out, Op::HeadMix { a, v, batch, heads }, &[a, v]))
    }

    /// Restricts every trailing `[n, n]` map to its leading `keep x keep`
    /// block and renormalises rows.
    pub fn restrict_renorm(&mut self, a: Var, keep: usize) -> Result<Var> {
        let x = self.value(a);
        let sh = x.shape();
        if sh.len() < 2 || sh[sh.len() - 1] != sh[sh.len() - 2] || keep == 0 || keep > sh[sh.len() - 1] {
            return Err(MuseError::dim("restrict_renorm", sh, &[keep, keep]));
        }
        let n = sh[sh.len() - 1];
        let mats = x.numel() / (n * n);
        let mut out = vec![T::zero(); mats * keep * keep];
        let mut mass = vec![T::zero(); mats * keep];
        for m in 0..mats {
            for i in 0..keep {
                let src = &x.data()[m * n * n + i * n..m * n * n + i * n + keep];
                let total: T = src.iter().copied().sum();
                if total.f64() < 1e-12 {
                    return Err(MuseError::DegenerateRow { row: i, mass: total.f64() });
                }
                mass[m * keep + i] = total;
                let dst = &mut out[(m * keep + i) * keep..(m * keep + i + 1) * keep];
                dst.iter_mut().zip(src).for_each(|(o, &s)| *o = s / total);
            }
        }
        let mut shape = sh.to_vec();
        let l = shape.len();
        shape[l - 1] = keep;
        shape[l - 2] = keep;
        Ok(self.push(Tensor::from_parts(shape, out), Op::RestrictRenorm { a, keep, mass }, &[a]))
    }

    // ---- losses -------------------------------------------------------

    /// Mean over rows of `KL(target_row || s_row)` with `0 ln 0 = 0`.
    ///
    /// `s` has `repeat` times as many rows as `target`; blocks of
    /// `target.rows() / batch` rows are shared across the repeats, so `s`
    /// laid out `[batch, repeat, r, c]` is compared to `target` `[batch, r, c]`.
    pub fn kl_rows(&mut self, s: Var, target: Tensor<T>, repeat: usize) -> Result<Var> {
        let sv = self.value(s);
        let c = sv.cols();
        if target.cols() != c || repeat == 0 || sv.numel() != target.numel() * repeat {
            return Err(MuseError::dim("kl_rows", sv.shape(), target.shape()));
        }
        let rows = sv.rows();
        let block = block_rows(target.shape());
        let mut total = 0.0f64;
        for r in 0..rows {
            let t = target.row(target_row(r, block, repeat));
            let sr = sv.row(r);
            for j in 0..c {
                let tj = t[j].f64();
                if tj > 0.0 {
                    let sj = sr[j].f64();
                    if sj <= 0.0 {
                        return Err(MuseError::NumericDomain {
                            op: "topo_loss",
                            detail: format!("student mass {sj:e} where teacher is positive (row {r}, col {j})"),
                        });
                    }
                    total += tj * (tj.ln() - sj.ln());
                }
            }
        }
        let loss = T::of(total / rows as f64);
        Ok(self.push(Tensor::scalar(loss), Op::KlRows { s, target, repeat }, &[s]))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, x: Var, target: Tensor<T>) -> Result<Var> {
        if self.shape(x) != target.shape() {
            return Err(MuseError::dim("recon_loss", self.shape(x), target.shape()));
        }
        let xv = self.value(x);
        let se: f64 = xv.data().iter().zip(target.data()).map(|(&a, &b)| (a - b).f64().powi(2)).sum();
        let loss = T::of(se / xv.numel() as f64);
        Ok(self.push(Tensor::scalar(loss), Op::Mse { x, target }, &[x]))
    }

    /// Row-wise cross entropy restricted to `allowed` entries, averaged
    /// over rows. `allowed` is row-major `[rows, cols]` and must include
    /// each row's target.
    pub fn masked_cross_entropy(&mut self, logits: Var, targets: Vec<usize>, allowed: Vec<bool>) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, cols) = (lv.rows(), lv.cols());
        if targets.len() != rows || allowed.len() != rows * cols {
            return Err(MuseError::dim("masked_cross_entropy", lv.shape(), &[targets.len(), allowed.len()]));
        }
        if !lv.all_finite() {
            return Err(MuseError::NumericDomain { op: "masked_cross_entropy", detail: "non-finite logit".into() });
        }
        let mut probs = vec![T::zero(); rows * cols];
        let mut total = 0.0f64;
        for r in 0..rows {
            let t = targets[r];
            if t >= cols || !allowed[r * cols + t] {
                return Err(MuseError::Argument(format!("row {r}: target {t} is not an allowed entry")));
            }
            let row = lv.row(r);
            let mx = (0..cols)
                .filter(|&j| allowed[r * cols + j])
                .map(|j| row[j].f64())
                .fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..cols).filter(|&j| allowed[r * cols + j]).map(|j| (row[j].f64() - mx).exp()).sum();
            for j in 0..cols {
                if allowed[r * cols + j] {
                    probs[r * cols + j] = T::of((row[j].f64() - mx).exp() / z);
                }
            }
            total += z.ln() + mx - row[t].f64();
        }
        let loss = T::of(total / rows as f64);
        Ok(self.push(Tensor::scalar(loss), Op::MaskedCrossEntropy { logits, targets, allowed, probs }, &[logits]))
    }

    // ---- backward -----------------------------------------------------

    /// Accumulates `d loss / d leaf` into every trainable leaf. Leaves that
    /// require a gradient but are not reached receive zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(MuseError::Argument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(i, &g, &mut grads);
        }
        for (i, node) in self.nodes.iter_mut().enumerate() {
            if !(matches!(node.op, Op::Leaf) && node.requires_grad) {
                continue;
            }
            let acc = node.grad.get_or_insert_with(|| vec![T::zero(); node.value.numel()]);
            if let Some(Some(g)) = grads.get(i) {
                acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| axpy(d, g, T::one()));
                self.acc(grads, *b, |d| axpy(d, g, T::one()));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| axpy(d, g, T::one()));
                self.acc(grads, *b, |d| axpy(d, g, -T::one()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |d| {
                    d.iter_mut().zip(g).zip(bv).for_each(|((d, &g), &b)| *d += g * b)
                });
                self.acc(grads, *b, |d| {
                    d.iter_mut().zip(g).zip(av).for_each(|((d, &g), &a)| *d += g * a)
                });
            }
            Op::Scale(a, c) => self.acc(grads, *a, |d| axpy(d, g, *c)),
            Op::AddScalar(a) | Op::Reshape(a) => self.acc(grads, *a, |d| axpy(d, g, T::one())),
            Op::Exp(a) => self.acc(grads, *a, |d| {
                d.iter_mut().zip(g).zip(y).for_each(|((d, &g), &y)| *d += g * y)
            }),
            Op::Ln(a) => {
                let x = self.value(*a).data();
                self.acc(grads, *a, |d| d.iter_mut().zip(g).zip(x).for_each(|((d, &g), &x)| *d += g / x))
            }
            Op::Gelu { x: a, tanh } => {
                let x = self.value(*a).data();
                let (c, k, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
                let three = T::of(3.0);
                self.acc(grads, *a, |d| {
                    for (((d, &g), &x), &t) in d.iter_mut().zip(g).zip(x).zip(tanh) {
                        let dt = (T::one() - t * t) * c * (T::one() + three * k * x * x);
                        *d += g * (half * (T::one() + t) + half * x * dt);
                    }
                })
            }
            Op::Sum(a) => self.acc(grads, *a, |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => {
                let s = g[0] / T::of(self.value(*a).numel() as f64);
                self.acc(grads, *a, |d| d.iter_mut().for_each(|d| *d += s))
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                self.acc(grads, *a, |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j * r + i];
                        }
                    }
                })
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (rows, dd, m) = (xv.rows(), xv.cols(), wv.shape()[1]);
                self.acc(grads, *x, |dx| {
                    gemm(
                        T::one(),
                        g,
                        View::dense(0, rows, m, m),
                        wv.data(),
                        View::dense(0, dd, m, m).t(),
                        dx,
                        View::dense(0, rows, dd, dd),
                        true,
                    )
                });
                self.acc(grads, *w, |dw| {
                    gemm(
                        T::one(),
                        xv.data(),
                        View::dense(0, rows, dd, dd).t(),
                        g,
                        View::dense(0, rows, m, m),
                        dw,
                        View::dense(0, dd, m, m),
                        true,
                    )
                });
                if let Some(b) = b {
                    self.acc(grads, *b, |db| {
                        for row in g.chunks_exact(m) {
                            axpy(db, row, T::one());
                        }
                    });
                }
            }
            Op::MatMulNt { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                self.acc(grads, *a, |da| {
                    gemm(
                        T::one(),
                        g,
                        View::dense(0, m, n, n),
                        bv.data(),
                        View::dense(0, n, k, k),
                        da,
                        View::dense(0, m, k, k),
                        true,
                    )
                });
                self.acc(grads, *b, |db| {
                    gemm(
                        T::one(),
                        g,
                        View::dense(0, m, n, n).t(),
                        av.data(),
                        View::dense(0, m, k, k),
                        db,
                        View::dense(0, n, k, k),
                        true,
                    )
                });
            }
            Op::GatherRows { sources, index } => {
                let cols = node.value.cols();
                for (r, &(s, src_row)) in index.iter().enumerate() {
                    let src = sources[s as usize];
                    let src_row = src_row as usize;
                    self.acc(grads, src, |d| {
                        axpy(&mut d[src_row * cols..(src_row + 1) * cols], &g[r * cols..(r + 1) * cols], T::one())
                    });
                }
            }
            Op::SoftmaxRows(a) => {
                let c = node.value.cols();
                self.acc(grads, *a, |d| {
                    for ((d, g), y) in d.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(y.chunks_exact(c)) {
                        let dot: T = g.iter().zip(y).map(|(&g, &y)| g * y).sum();
                        d.iter_mut().zip(g).zip(y).for_each(|((d, &g), &y)| *d += y * (g - dot));
                    }
                })
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let dd = node.value.cols();
                let gv = self.value(*gain).data();
                let inv_d = T::of(1.0 / dd as f64);
                self.acc(grads, *x, |dx| {
                    for r in 0..rstd.len() {
                        let gr = &g[r * dd..(r + 1) * dd];
                        let hr = &xhat[r * dd..(r + 1) * dd];
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..dd {
                            let dh = gr[j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh *= inv_d;
                        mean_dh_h *= inv_d;
                        for j in 0..dd {
                            let dh = gr[j] * gv[j];
                            dx[r * dd + j] += rstd[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                });
                self.acc(grads, *gain, |dg| {
                    for (gr, hr) in g.chunks_exact(dd).zip(xhat.chunks_exact(dd)) {
                        dg.iter_mut().zip(gr).zip(hr).for_each(|((d, &g), &h)| *d += g * h);
                    }
                });
                self.acc(grads, *bias, |db| {
                    for gr in g.chunks_exact(dd) {
                        axpy(db, gr, T::one());
                    }
                });
            }
            Op::PoolRows { x, groups } => {
                let dd = node.value.cols();
                self.acc(grads, *x, |dx| {
                    for (gi, group) in groups.iter().enumerate() {
                        let inv = T::of(1.0 / group.len() as f64);
                        let gr = &g[gi * dd..(gi + 1) * dd];
                        for &r in group {
                            axpy(&mut dx[r * dd..(r + 1) * dd], gr, inv);
                        }
                    }
                })
            }
            Op::NormalizeRows { x, norms } => {
                let dd = node.value.cols();
                self.acc(grads, *x, |dx| {
                    for (r, &nrm) in norms.iter().enumerate() {
                        let yr = &y[r * dd..(r + 1) * dd];
                        let gr = &g[r * dd..(r + 1) * dd];
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..dd {
                            dx[r * dd + j] += (gr[j] - yr[j] * dot) / nrm;
                        }
                    }
                })
            }
            Op::DivByScalar { x, s } => {
                let sv = self.value(*s).item();
                let xv = self.value(*x).data();
                self.acc(grads, *x, |dx| axpy(dx, g, T::one() / sv));
                self.acc(grads, *s, |ds| {
                    let dot: T = g.iter().zip(xv).map(|(&g, &x)| g * x).sum();
                    ds[0] -= dot / (sv * sv);
                });
            }
            Op::HeadScores { q, k, batch, heads, scale } => {
                let (n, dk) = head_dims(self.value(*q), *batch, *heads, "").expect("checked in forward");
                let hd = heads * dk;
                let (qv, kv) = (self.value(*q).data(), self.value(*k).data());
                self.acc(grads, *q, |dq| {
                    for b in 0..*batch {
                        for h in 0..*heads {
                            let base = b * n * hd + h * dk;
                            gemm(
                                *scale,
                                g,
                                View::dense((b * heads + h) * n * n, n, n, n),
                                kv,
                                View::dense(base, n, dk, hd),
                                dq,
                                View::dense(base, n, dk, hd),
                                true,
                            );
                        }
                    }
                });
                self.acc(grads, *k, |dkk| {
                    for b in 0..*batch {
                        for h in 0..*heads {
                            let base = b * n * hd + h * dk;
                            gemm(
                                *scale,
                                g,
                                View::dense((b * heads + h) * n * n, n, n, n).t(),
                                qv,
                                View::dense(base, n, dk, hd),
                                dkk,
                                View::dense(base, n, dk, hd),
                                true,
                            );
                        }
                    }
                });
            }
            Op::HeadMix { a, v, batch, heads } => {
                let (n, dk) = head_dims(self.value(*v), *batch, *heads, "").expect("checked in forward");
                let hd = heads * dk;
                let (av, vv) = (self.value(*a).data(), self.value(*v).data());
                self.acc(grads, *a, |da| {
                    for b in 0..*batch {
                        for h in 0..*heads {
                            let base = b * n * hd + h * dk;
                            gemm(
                                T::one(),
                                g,
                                View::dense(base, n, dk, hd),
                                vv,
                                View::dense(base, n, dk, hd).t(),
                                da,
                                View::dense((b * heads + h) * n * n, n, n, n),
                                true,
                            );
                        }
                    }
                });
                self.acc(grads, *v, |dv| {
                    for b in 0..*batch {
                        for h in 0..*heads {
                            let base = b * n * hd + h * dk;
                            gemm(
                                T::one(),
                                av,
                                View::dense((b * heads + h) * n * n, n, n, n).t(),
                                g,
                                View::dense(base, n, dk, hd),
                                dv,
                                View::dense(base, n, dk, hd),
                                true,
                            );
                        }
                    }
                });
            }
            Op::RestrictRenorm { a, keep, mass } => {
                let n = *self.shape(*a).last().unwrap();
                let keep = *keep;
                self.acc(grads, *a, |da| {
                    for (mi, &ms) in mass.iter().enumerate() {
                        let (m, i) = (mi / keep, mi % keep);
                        let gr = &g[mi * keep..(mi + 1) * keep];
                        let sr = &y[mi * keep..(mi + 1) * keep];
                        let dot: T = gr.iter().zip(sr).map(|(&g, &s)| g * s).sum();
                        let dst = &mut da[m * n * n + i * n..m * n * n + i * n + keep];
                        dst.iter_mut().zip(gr).for_each(|(d, &g)| *d += (g - dot) / ms);
                    }
                })
            }
            Op::KlRows { s, target, repeat } => {
                let sv = self.value(*s);
                let c = sv.cols();
                let rows = sv.rows();
                let block = block_rows(target.shape());
                let scale = g[0] / T::of(rows as f64);
                self.acc(grads, *s, |ds| {
                    for r in 0..rows {
                        let t = target.row(target_row(r, block, *repeat));
                        let sr = sv.row(r);
                        for j in 0..c {
                            if t[j] > T::zero() {
                                ds[r * c + j] -= scale * t[j] / sr[j];
                            }
                        }
                    }
                })
            }
            Op::Mse { x, target } => {
                let xv = self.value(*x).data();
                let s = g[0] * T::of(2.0 / xv.len() as f64);
                self.acc(grads, *x, |dx| {
                    dx.iter_mut().zip(xv).zip(target.data()).for_each(|((d, &a), &b)| *d += s * (a - b))
                })
            }
            Op::MaskedCrossEntropy { logits, targets, allowed, probs } => {
                let cols = self.value(*logits).cols();
                let s = g[0] / T::of(targets.len() as f64);
                self.acc(grads, *logits, |dl| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..cols {
                            if allowed[r * cols + j] {
                                dl[r * cols + j] += s * probs[r * cols + j];
                            }
                        }
                        dl[r * cols + t] -= s;
                    }
                })
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
        f(buf);
    }
}

fn axpy<T: Real>(dst: &mut [T], src: &[T], alpha: T) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += alpha * s);
}

/// Numerically stable softmax of one slice.
/// `tanh` through one `exp`; saturates cleanly at both ends.
fn fast_tanh<T: Real>(u: T) -> T {
    let two = T::of(2.0);
    T::one() - two / ((two * u).exp() + T::one())
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}

fn head_dims<T: Real>(x: &Tensor<T>, batch: usize, heads: usize, op: &'static str) -> Result<(usize, usize)> {
    let sh = x.shape();
    if sh.len() != 2 || batch == 0 || heads == 0 || !sh[0].is_multiple_of(batch) || !sh[1].is_multiple_of(heads) {
        return Err(MuseError::dim(op, sh, &[batch, heads]));
    }
    Ok((sh[0] / batch, sh[1] / heads))
}

/// Rows per shared block of a `[batch, r, c]` target (or `r` for 2-D).
fn block_rows(shape: &[usize]) -> usize {
    match shape.len() {
        0 | 1 => 1,
        2 => shape[0],
        l => shape[l - 2],
    }
}

fn target_row(r: usize, block: usize, repeat: usize) -> usize {
    (r / (repeat * block)) * block + r % block
}
