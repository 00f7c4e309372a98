//! Reverse-mode differentiation over 2D tensors.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value
//! and the indices of its inputs. Nodes are only ever appended, so the tape
//! is already in topological order and [`Graph::backward`] is a single
//! reverse sweep.

use std::collections::BTreeMap;

use super::params::{Gradients, ParamStore};
use super::tensor::Tensor;
use super::NnError;
use crate::scalar::Scalar;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Input,
    Param,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulBT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `x + row` with `row` broadcast over rows.
    AddRow(Var, Var),
    /// `x ⊙ row` with `row` broadcast over rows.
    MulRow(Var, Var),
    MulConst(Var, Tensor<T>),
    Scale(Var, T),
    Transpose(Var),
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    /// Normalization without affine terms; caches the normalized output and
    /// per-row inverse standard deviations.
    LayerNormRows { x: Var, inv_std: Vec<T> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    PermuteRows { x: Var, perm: Vec<usize> },
    Abs(Var),
    Sum(Var),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let k = T::of((2.0 / std::f64::consts::PI).sqrt());
    let inner = k * (x + T::of(GELU_C) * x * x * x);
    T::of(0.5) * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::of((2.0 / std::f64::consts::PI).sqrt());
    let c = T::of(GELU_C);
    let t = (k * (x + c * x * x * x)).tanh();
    let half = T::of(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::of(3.0) * c * x * x)
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Max-subtracted exponential normalization of one row.
pub fn softmax<T: Scalar>(z: &[T]) -> Vec<T> {
    let m = z.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let e: Vec<T> = z.iter().map(|&v| (v - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn log_softmax<T: Scalar>(z: &[T]) -> Vec<T> {
    let m = z.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let s: T = z.iter().map(|&v| (v - m).exp()).sum();
    let lse = m + s.ln();
    z.iter().map(|&v| v - lse).collect()
}

pub(crate) const LAYER_NORM_EPS: f64 = 1e-9;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::with_capacity(256), params: BTreeMap::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
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

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input)
    }

    /// Leaf bound to a named parameter. Binding the same name twice returns
    /// the same node.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var, NnError> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.get(name).ok_or_else(|| NnError::MissingParam(name.to_string()))?.clone();
        let v = self.push(value, Op::Param);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(), NnError> {
        if self.shape(a) != self.shape(b) {
            return Err(NnError::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(NnError::Shape(format!("matmul: {:?} x {:?}", va.shape(), vb.shape())));
        }
        let out = va.matmul(vb);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.cols() {
            return Err(NnError::Shape(format!("matmul_bt: {:?} x {:?}ᵀ", va.shape(), vb.shape())));
        }
        let out = va.matmul_bt(vb);
        Ok(self.push(out, Op::MatMulBT(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    fn check_row(&self, x: Var, row: Var, what: &str) -> Result<(), NnError> {
        let (xs, rs) = (self.shape(x), self.shape(row));
        if rs.0 != 1 || rs.1 != xs.1 {
            return Err(NnError::Shape(format!("{what}: {xs:?} with row {rs:?}")));
        }
        Ok(())
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, NnError> {
        self.check_row(x, row, "add_row")?;
        let r = self.value(row).data().to_vec();
        let mut out = self.value(x).clone();
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(&r) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(x, row)))
    }

    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var, NnError> {
        self.check_row(x, row, "mul_row")?;
        let r = self.value(row).data().to_vec();
        let mut out = self.value(x).clone();
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(&r) {
                *o *= b;
            }
        }
        Ok(self.push(out, Op::MulRow(x, row)))
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&mut self, x: Var, c: Tensor<T>) -> Result<Var, NnError> {
        if self.shape(x) != c.shape() {
            return Err(NnError::Shape(format!("mul_const: {:?} vs {:?}", self.shape(x), c.shape())));
        }
        let out = self.value(x).zip_map(&c, |a, b| a * b);
        Ok(self.push(out, Op::MulConst(x, c)))
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        let out = self.value(x).map(|v| v * k);
        self.push(out, Op::Scale(x, k))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        self.push(out, Op::Transpose(x))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        self.push(out, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push(out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let mut out = Tensor::zeros(v.rows(), v.cols());
        for r in 0..v.rows() {
            out.row_mut(r).copy_from_slice(&softmax(v.row(r)));
        }
        self.push(out, Op::SoftmaxRows(x))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let mut out = Tensor::zeros(v.rows(), v.cols());
        for r in 0..v.rows() {
            out.row_mut(r).copy_from_slice(&log_softmax(v.row(r)));
        }
        self.push(out, Op::LogSoftmaxRows(x))
    }

    /// Per-row `(x - mean) / sqrt(var + 1e-9)` with biased variance.
    pub fn layer_norm_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = T::of(v.cols() as f64);
        let mut out = Tensor::zeros(v.rows(), v.cols());
        let mut inv_std = Vec::with_capacity(v.rows());
        for r in 0..v.rows() {
            let row = v.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&a| (a - mean) * (a - mean)).sum::<T>() / n;
            let inv = T::one() / (var + T::of(LAYER_NORM_EPS)).sqrt();
            for (o, &a) in out.row_mut(r).iter_mut().zip(row) {
                *o = (a - mean) * inv;
            }
            inv_std.push(inv);
        }
        self.push(out, Op::LayerNormRows { x, inv_std })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NnError> {
        let v = self.value(x);
        if start + len > v.cols() {
            return Err(NnError::Shape(format!("slice_cols {start}+{len} of {:?}", v.shape())));
        }
        let out = Tensor::from_fn(v.rows(), len, |r, c| v.get(r, start + c));
        Ok(self.push(out, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let rows = parts.first().map(|&p| self.shape(p).0).unwrap_or(0);
        if parts.iter().any(|&p| self.shape(p).0 != rows) {
            return Err(NnError::Shape("concat_cols: row counts differ".into()));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            for r in 0..rows {
                out.row_mut(r)[off..off + v.cols()].copy_from_slice(v.row(r));
            }
            off += v.cols();
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Output row `i` is input row `perm[i]`.
    pub fn permute_rows(&mut self, x: Var, perm: &[usize]) -> Result<Var, NnError> {
        let v = self.value(x);
        let mut seen = vec![false; v.rows()];
        if perm.len() != v.rows() || perm.iter().any(|&p| p >= v.rows() || std::mem::replace(&mut seen[p], true)) {
            return Err(NnError::Shape("permute_rows: not a permutation".into()));
        }
        let out = Tensor::from_fn(v.rows(), v.cols(), |r, c| v.get(perm[r], c));
        Ok(self.push(out, Op::PermuteRows { x, perm: perm.to_vec() }))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.abs());
        self.push(out, Op::Abs(x))
    }

    /// Sum of all entries as a 1x1 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x))
    }

    /// Exact gradients of the 1x1 node `loss` with respect to every
    /// parameter in `store`. Parameters that were never bound get zeros.
    pub fn backward(&self, loss: Var, store: &ParamStore<T>) -> Result<Gradients<T>, NnError> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(NnError::Shape(format!("loss must be 1x1, got {:?}", lv.shape())));
        }
        if !lv.item().is_finite() {
            return Err(NnError::NonFiniteLoss(lv.item().to_f64_lossy()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        fn acc<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param => {
                    grads[i] = Some(dy);
                }
                Op::MatMul(a, b) => {
                    let da = dy.matmul_bt(self.value(*b));
                    let db = self.value(*a).matmul_at(&dy);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::MatMulBT(a, b) => {
                    let da = dy.matmul(self.value(*b));
                    let db = dy.matmul_at(self.value(*a));
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, dy.clone());
                    acc(&mut grads, *b, dy);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, dy.map(|v| -v));
                    acc(&mut grads, *a, dy);
                }
                Op::Mul(a, b) => {
                    let da = dy.zip_map(self.value(*b), |g, y| g * y);
                    let db = dy.zip_map(self.value(*a), |g, x| g * x);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::AddRow(x, row) => {
                    let drow = dy.sum_rows();
                    acc(&mut grads, *row, drow);
                    acc(&mut grads, *x, dy);
                }
                Op::MulRow(x, row) => {
                    let r = self.value(*row);
                    let xv = self.value(*x);
                    let mut dx = dy.clone();
                    let mut drow = Tensor::zeros(1, r.cols());
                    for ri in 0..dy.rows() {
                        for c in 0..dy.cols() {
                            dx.set(ri, c, dy.get(ri, c) * r.get(0, c));
                            drow.data_mut()[c] += dy.get(ri, c) * xv.get(ri, c);
                        }
                    }
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *row, drow);
                }
                Op::MulConst(x, c) => {
                    acc(&mut grads, *x, dy.zip_map(c, |g, k| g * k));
                }
                Op::Scale(x, k) => {
                    let k = *k;
                    acc(&mut grads, *x, dy.map(|g| g * k));
                }
                Op::Transpose(x) => acc(&mut grads, *x, dy.transpose()),
                Op::Gelu(x) => {
                    let dx = dy.zip_map(self.value(*x), |g, v| g * gelu_grad(v));
                    acc(&mut grads, *x, dx);
                }
                Op::Relu(x) => {
                    let dx = dy.zip_map(self.value(*x), |g, v| if v > T::zero() { g } else { T::zero() });
                    acc(&mut grads, *x, dx);
                }
                Op::Sigmoid(x) => {
                    let dx = dy.zip_map(&node.value, |g, s| g * s * (T::one() - s));
                    acc(&mut grads, *x, dx);
                }
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let mut dx = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let dot: T = dy.row(r).iter().zip(y.row(r)).map(|(&g, &s)| g * s).sum();
                        for c in 0..y.cols() {
                            dx.set(r, c, y.get(r, c) * (dy.get(r, c) - dot));
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::LogSoftmaxRows(x) => {
                    let y = &node.value;
                    let mut dx = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let total: T = dy.row(r).iter().copied().sum();
                        for c in 0..y.cols() {
                            dx.set(r, c, dy.get(r, c) - y.get(r, c).exp() * total);
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::LayerNormRows { x, inv_std } => {
                    let xhat = &node.value;
                    let n = T::of(xhat.cols() as f64);
                    let mut dx = Tensor::zeros(xhat.rows(), xhat.cols());
                    for r in 0..xhat.rows() {
                        let g = dy.row(r);
                        let h = xhat.row(r);
                        let sg: T = g.iter().copied().sum();
                        let sgh: T = g.iter().zip(h).map(|(&a, &b)| a * b).sum();
                        let k = inv_std[r] / n;
                        for c in 0..xhat.cols() {
                            dx.set(r, c, k * (n * g[c] - sg - h[c] * sgh));
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::SliceCols { x, start } => {
                    let (rows, cols) = self.shape(*x);
                    let mut dx = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        dx.row_mut(r)[*start..*start + dy.cols()].copy_from_slice(dy.row(r));
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (rows, cols) = self.shape(p);
                        let dp = Tensor::from_fn(rows, cols, |r, c| dy.get(r, off + c));
                        off += cols;
                        acc(&mut grads, p, dp);
                    }
                }
                Op::PermuteRows { x, perm } => {
                    let (rows, cols) = self.shape(*x);
                    let mut dx = Tensor::zeros(rows, cols);
                    for (r, &src) in perm.iter().enumerate() {
                        dx.row_mut(src).copy_from_slice(dy.row(r));
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Abs(x) => {
                    let dx = dy.zip_map(self.value(*x), |g, v| {
                        if v > T::zero() {
                            g
                        } else if v < T::zero() {
                            -g
                        } else {
                            T::zero()
                        }
                    });
                    acc(&mut grads, *x, dx);
                }
                Op::Sum(x) => {
                    let (rows, cols) = self.shape(*x);
                    acc(&mut grads, *x, Tensor::filled(rows, cols, dy.item()));
                }
            }
        }

        let mut out = Gradients::zeros_like(store);
        for (name, &v) in &self.params {
            if let Some(g) = grads[v.0].take() {
                out.insert(name, g)?;
            }
        }
        Ok(out)
    }
}

/// Runs `build` on a fresh graph and returns the loss and its exact
/// parameter gradients.
pub fn forward_backward<T: Scalar, F>(store: &ParamStore<T>, build: F) -> Result<(T, Gradients<T>), NnError>
where
    F: FnOnce(&mut Graph<T>, &ParamStore<T>) -> Result<Var, NnError>,
{
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    let grads = g.backward(loss, store)?;
    Ok((g.value(loss).item(), grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let mut store = ParamStore::new();
        store.insert("theta", Tensor::scalar(3.0)).unwrap();
        let (loss, grads) = forward_backward(&store, |g, s| {
            let t = g.param(s, "theta")?;
            let sq = g.mul(t, t)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert_eq!(loss, 9.0);
        assert_eq!(grads.get("theta").unwrap().item(), 6.0);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let mut store = ParamStore::<f64>::new();
        store.insert("z", Tensor::from_vec(1, 4, vec![0.3, -1.2, 2.0, 0.1]).unwrap()).unwrap();
        let (loss, grads) = forward_backward(&store, |g, s| {
            let z = g.param(s, "z")?;
            let p = g.softmax_rows(z);
            Ok(g.sum(p))
        })
        .unwrap();
        assert!((loss - 1.0).abs() < 1e-15);
        assert!(grads.get("z").unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn non_finite_loss_is_error() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::scalar(f64::INFINITY)).unwrap();
        let r = forward_backward(&store, |g, s| {
            let a = g.param(s, "a")?;
            Ok(g.sum(a))
        });
        assert!(matches!(r, Err(NnError::NonFiniteLoss(_))));
    }

    #[test]
    fn softmax_cases() {
        let p = softmax(&[0.0f64, 0.0, 0.0]);
        assert!(p.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-16));
        let p = softmax(&[1000.0, 0.0]);
        assert_eq!(p[0], 1.0);
        assert!(p[1] >= 0.0 && p[1] < 1e-300);
        let a = softmax(&[0.5f64, -2.0, 3.0]);
        let b = softmax(&[7.5f64, 5.0, 10.0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn unused_params_get_zero_gradients() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::scalar(2.0)).unwrap();
        store.insert("b", Tensor::zeros(2, 3)).unwrap();
        let (_, grads) = forward_backward(&store, |g, s| {
            let a = g.param(s, "a")?;
            Ok(g.scale(a, 4.0))
        })
        .unwrap();
        assert_eq!(grads.get("a").unwrap().item(), 4.0);
        assert_eq!(grads.get("b").unwrap(), &Tensor::zeros(2, 3));
    }
}
