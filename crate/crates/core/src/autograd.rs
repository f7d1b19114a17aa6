//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records every operation as a node in creation order, so the
//! reverse sweep is a plain backwards walk over the tape. Parameters are
//! borrowed from a slice and referenced by index; their gradients come back
//! in the same order from [`Gradients::params`].

use crate::tensor::{Matrix, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, F),
    Gather(Var, Vec<u32>),
    Gelu(Var),
    Tanh(Var),
    LayerNorm(Var, Vec<F>),
    Softmax(Var),
    LogSoftmax(Var),
    LogSigmoid(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    Sum(Var),
    Pick(Var, Vec<(usize, usize, F)>),
    CrossEntropy(Var, Vec<u32>, Vec<F>, Matrix<F>),
    Dropout(Var, Matrix<F>),
}

struct Node<F> {
    op: Op<F>,
    value: Option<Matrix<F>>,
}

pub struct Graph<'p, F: Real> {
    params: &'p [Matrix<F>],
    nodes: Vec<Node<F>>,
}

const LN_EPS: f64 = 1e-5;

impl<'p, F: Real> Graph<'p, F> {
    pub fn new(params: &'p [Matrix<F>]) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, op: Op<F>, value: Matrix<F>) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix<F> {
        let n = &self.nodes[v.0];
        match (&n.op, &n.value) {
            (Op::Param(i), None) => &self.params[*i],
            (_, Some(m)) => m,
            _ => unreachable!("node without value"),
        }
    }

    pub fn scalar(&self, v: Var) -> F {
        self.value(v).get(0, 0)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input (its gradient can be read back).
    pub fn input(&mut self, m: Matrix<F>) -> Var {
        self.push(Op::Leaf, m)
    }

    pub fn param(&mut self, idx: usize) -> Var {
        self.nodes.push(Node {
            op: Op::Param(idx),
            value: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), v)
    }

    /// `a * b^T`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        self.push(Op::MatMulT(a, b), v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(Op::Mul(a, b), v)
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row).row(0).to_vec();
        let mut v = self.value(a).clone();
        for i in 0..v.rows() {
            for (x, &y) in v.row_mut(i).iter_mut().zip(&r) {
                *x += y;
            }
        }
        self.push(Op::AddRow(a, row), v)
    }

    /// Multiplies every row of `a` elementwise by a `1 x c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row).row(0).to_vec();
        let mut v = self.value(a).clone();
        for i in 0..v.rows() {
            for (x, &y) in v.row_mut(i).iter_mut().zip(&r) {
                *x *= y;
            }
        }
        self.push(Op::MulRow(a, row), v)
    }

    pub fn scale(&mut self, a: Var, k: F) -> Var {
        let v = self.value(a).map(|x| x * k);
        self.push(Op::Scale(a, k), v)
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[u32]) -> Var {
        let t = self.value(table);
        let mut v = Matrix::zeros(ids.len(), t.cols());
        for (i, &id) in ids.iter().enumerate() {
            v.row_mut(i).copy_from_slice(t.row(id as usize));
        }
        self.push(Op::Gather(table, ids.to_vec()), v)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        self.push(Op::Gelu(a), v)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.tanh());
        self.push(Op::Tanh(a), v)
    }

    /// Per-row standardization without affine terms.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let c = F::of(x.cols() as f64);
        let mut v = x.clone();
        let mut rstd = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let row = v.row_mut(i);
            let mean = row.iter().copied().sum::<F>() / c;
            let var = row.iter().map(|&y| (y - mean) * (y - mean)).sum::<F>() / c;
            let r = F::one() / (var + F::of(LN_EPS)).sqrt();
            for y in row.iter_mut() {
                *y = (*y - mean) * r;
            }
            rstd.push(r);
        }
        self.push(Op::LayerNorm(a, rstd), v)
    }

    /// Row softmax. With `causal`, entry `(i, j)` for `j > i` is excluded.
    pub fn softmax(&mut self, a: Var, causal: bool) -> Var {
        let mut v = self.value(a).clone();
        for i in 0..v.rows() {
            let row = v.row_mut(i);
            let lim = if causal { i + 1 } else { row.len() };
            let mx = row[..lim]
                .iter()
                .copied()
                .fold(F::neg_infinity(), F::max);
            let mut s = F::zero();
            for y in row[..lim].iter_mut() {
                *y = (*y - mx).exp();
                s += *y;
            }
            for y in row[..lim].iter_mut() {
                *y /= s;
            }
            for y in row[lim..].iter_mut() {
                *y = F::zero();
            }
        }
        self.push(Op::Softmax(a), v)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for i in 0..v.rows() {
            let row = v.row_mut(i);
            let lse = log_sum_exp(row);
            for y in row.iter_mut() {
                *y -= lse;
            }
        }
        self.push(Op::LogSoftmax(a), v)
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(log_sigmoid);
        self.push(Op::LogSigmoid(a), v)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        let mut v = Matrix::zeros(x.rows(), len);
        for i in 0..x.rows() {
            v.row_mut(i).copy_from_slice(&x.row(i)[start..start + len]);
        }
        self.push(Op::SliceCols(a, start), v)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let x = self.value(p);
            for i in 0..rows {
                v.row_mut(i)[off..off + x.cols()].copy_from_slice(x.row(i));
            }
            off += x.cols();
        }
        self.push(Op::ConcatCols(parts.to_vec()), v)
    }

    /// Column means as a `1 x c` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = F::of(x.rows() as f64);
        let mut v = Matrix::zeros(1, x.cols());
        for i in 0..x.rows() {
            for (o, &y) in v.row_mut(0).iter_mut().zip(x.row(i)) {
                *o += y;
            }
        }
        let v = v.map(|y| y / n);
        self.push(Op::MeanRows(a), v)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Op::Sum(a), Matrix::filled(1, 1, s))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).data().len();
        let s = self.sum(a);
        self.scale(s, F::one() / F::of(n as f64))
    }

    /// Weighted sum of selected entries `(row, col, weight)`.
    pub fn pick(&mut self, a: Var, entries: &[(usize, usize, F)]) -> Var {
        let x = self.value(a);
        let s = entries.iter().map(|&(r, c, w)| w * x.get(r, c)).sum();
        self.push(Op::Pick(a, entries.to_vec()), Matrix::filled(1, 1, s))
    }

    /// Weighted token-mean cross-entropy of row logits against `targets`.
    /// Rows with zero weight are excluded; all-zero weights give 0.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32], weights: &[F]) -> Var {
        let x = self.value(logits);
        let total: F = weights.iter().copied().sum();
        let mut probs = Matrix::zeros(x.rows(), x.cols());
        let mut loss = F::zero();
        for i in 0..x.rows() {
            let row = x.row(i);
            let lse = log_sum_exp(row);
            for (p, &y) in probs.row_mut(i).iter_mut().zip(row) {
                *p = (y - lse).exp();
            }
            if weights[i] != F::zero() {
                loss += weights[i] * (lse - row[targets[i] as usize]);
            }
        }
        let loss = if total > F::zero() {
            loss / total
        } else {
            F::zero()
        };
        self.push(
            Op::CrossEntropy(logits, targets.to_vec(), weights.to_vec(), probs),
            Matrix::filled(1, 1, loss),
        )
    }

    /// Elementwise multiply by a fixed mask (already scaled by `1/(1-p)`).
    pub fn dropout(&mut self, a: Var, mask: Matrix<F>) -> Var {
        let v = self.value(a).zip_map(&mask, |x, m| x * m);
        self.push(Op::Dropout(a, mask), v)
    }

    /// Reverse sweep from the scalar `out`.
    pub fn backward(&self, out: Var) -> Gradients<F> {
        let mut g: Vec<Option<Matrix<F>>> = vec![None; self.nodes.len()];
        g[out.0] = Some(Matrix::filled(1, 1, F::one()));
        for idx in (0..=out.0).rev() {
            let Some(dy) = g[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf | Op::Param(_) => {
                    g[idx] = Some(dy);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let da = dy.matmul_t(self.value(*b));
                    let db = self.value(*a).t_matmul(&dy);
                    acc(&mut g, *a, da);
                    acc(&mut g, *b, db);
                }
                Op::MatMulT(a, b) => {
                    let da = dy.matmul(self.value(*b));
                    let db = dy.t_matmul(self.value(*a));
                    acc(&mut g, *a, da);
                    acc(&mut g, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut g, *b, dy.clone());
                    acc(&mut g, *a, dy);
                }
                Op::Sub(a, b) => {
                    acc(&mut g, *b, dy.map(|x| -x));
                    acc(&mut g, *a, dy);
                }
                Op::Mul(a, b) => {
                    let da = dy.zip_map(self.value(*b), |d, y| d * y);
                    let db = dy.zip_map(self.value(*a), |d, x| d * x);
                    acc(&mut g, *a, da);
                    acc(&mut g, *b, db);
                }
                Op::AddRow(a, row) => {
                    acc(&mut g, *row, col_sums(&dy));
                    acc(&mut g, *a, dy);
                }
                Op::MulRow(a, row) => {
                    let r = self.value(*row).row(0);
                    let x = self.value(*a);
                    let mut da = dy.clone();
                    let mut dr = Matrix::zeros(1, r.len());
                    for i in 0..dy.rows() {
                        for j in 0..r.len() {
                            da.row_mut(i)[j] = dy.get(i, j) * r[j];
                            dr.row_mut(0)[j] += dy.get(i, j) * x.get(i, j);
                        }
                    }
                    acc(&mut g, *a, da);
                    acc(&mut g, *row, dr);
                }
                Op::Scale(a, k) => acc(&mut g, *a, dy.map(|d| d * *k)),
                Op::Gather(table, ids) => {
                    let t = self.value(*table);
                    let mut dt = Matrix::zeros(t.rows(), t.cols());
                    for (i, &id) in ids.iter().enumerate() {
                        for (o, &d) in dt.row_mut(id as usize).iter_mut().zip(dy.row(i)) {
                            *o += d;
                        }
                    }
                    acc(&mut g, *table, dt);
                }
                Op::Gelu(a) => {
                    let da = dy.zip_map(self.value(*a), |d, x| d * gelu_grad(x));
                    acc(&mut g, *a, da);
                }
                Op::Tanh(a) => {
                    let y = self.value(Var(idx));
                    let da = dy.zip_map(y, |d, y| d * (F::one() - y * y));
                    acc(&mut g, *a, da);
                }
                Op::LayerNorm(a, rstd) => {
                    let y = self.value(Var(idx));
                    let c = F::of(y.cols() as f64);
                    let mut da = Matrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let (yr, dr) = (y.row(i), dy.row(i));
                        let mean_d = dr.iter().copied().sum::<F>() / c;
                        let mean_dy =
                            dr.iter().zip(yr).map(|(&d, &v)| d * v).sum::<F>() / c;
                        for (j, o) in da.row_mut(i).iter_mut().enumerate() {
                            *o = rstd[i] * (dr[j] - mean_d - yr[j] * mean_dy);
                        }
                    }
                    acc(&mut g, *a, da);
                }
                Op::Softmax(a) => {
                    let y = self.value(Var(idx));
                    let mut da = Matrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let (yr, dr) = (y.row(i), dy.row(i));
                        let dot = yr.iter().zip(dr).map(|(&p, &d)| p * d).sum::<F>();
                        for (j, o) in da.row_mut(i).iter_mut().enumerate() {
                            *o = yr[j] * (dr[j] - dot);
                        }
                    }
                    acc(&mut g, *a, da);
                }
                Op::LogSoftmax(a) => {
                    let y = self.value(Var(idx));
                    let mut da = Matrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let (yr, dr) = (y.row(i), dy.row(i));
                        let s = dr.iter().copied().sum::<F>();
                        for (j, o) in da.row_mut(i).iter_mut().enumerate() {
                            *o = dr[j] - yr[j].exp() * s;
                        }
                    }
                    acc(&mut g, *a, da);
                }
                Op::LogSigmoid(a) => {
                    let da = dy.zip_map(self.value(*a), |d, x| d * sigmoid(-x));
                    acc(&mut g, *a, da);
                }
                Op::SliceCols(a, start) => {
                    let x = self.value(*a);
                    let mut da = Matrix::zeros(x.rows(), x.cols());
                    for i in 0..x.rows() {
                        da.row_mut(i)[*start..*start + dy.cols()].copy_from_slice(dy.row(i));
                    }
                    acc(&mut g, *a, da);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let c = self.value(p).cols();
                        let mut dp = Matrix::zeros(dy.rows(), c);
                        for i in 0..dy.rows() {
                            dp.row_mut(i).copy_from_slice(&dy.row(i)[off..off + c]);
                        }
                        acc(&mut g, p, dp);
                        off += c;
                    }
                }
                Op::MeanRows(a) => {
                    let x = self.value(*a);
                    let n = F::of(x.rows() as f64);
                    let mut da = Matrix::zeros(x.rows(), x.cols());
                    for i in 0..x.rows() {
                        for (o, &d) in da.row_mut(i).iter_mut().zip(dy.row(0)) {
                            *o = d / n;
                        }
                    }
                    acc(&mut g, *a, da);
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    acc(&mut g, *a, Matrix::filled(r, c, dy.get(0, 0)));
                }
                Op::Pick(a, entries) => {
                    let (r, c) = self.value(*a).shape();
                    let mut da = Matrix::zeros(r, c);
                    let d = dy.get(0, 0);
                    for &(i, j, w) in entries {
                        let cur = da.get(i, j);
                        da.set(i, j, cur + d * w);
                    }
                    acc(&mut g, *a, da);
                }
                Op::CrossEntropy(a, targets, weights, probs) => {
                    let total: F = weights.iter().copied().sum();
                    let mut da = Matrix::zeros(probs.rows(), probs.cols());
                    if total > F::zero() {
                        let d = dy.get(0, 0) / total;
                        for i in 0..probs.rows() {
                            if weights[i] == F::zero() {
                                continue;
                            }
                            let w = d * weights[i];
                            for (o, &p) in da.row_mut(i).iter_mut().zip(probs.row(i)) {
                                *o = w * p;
                            }
                            let t = targets[i] as usize;
                            da.row_mut(i)[t] -= w;
                        }
                    }
                    acc(&mut g, *a, da);
                }
                Op::Dropout(a, mask) => acc(&mut g, *a, dy.zip_map(mask, |d, m| d * m)),
            }
        }
        let mut params: Vec<Option<Matrix<F>>> = vec![None; self.params.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            if let Op::Param(p) = n.op {
                if let Some(d) = g[i].take() {
                    match &mut params[p] {
                        Some(acc) => acc.add_assign(&d),
                        slot @ None => *slot = Some(d),
                    }
                }
            }
        }
        Gradients { nodes: g, params }
    }
}

fn acc<F: Real>(g: &mut [Option<Matrix<F>>], v: Var, d: Matrix<F>) {
    match &mut g[v.0] {
        Some(m) => m.add_assign(&d),
        slot @ None => *slot = Some(d),
    }
}

fn col_sums<F: Real>(m: &Matrix<F>) -> Matrix<F> {
    let mut out = Matrix::zeros(1, m.cols());
    for i in 0..m.rows() {
        for (o, &x) in out.row_mut(0).iter_mut().zip(m.row(i)) {
            *o += x;
        }
    }
    out
}

pub fn log_sum_exp<F: Real>(row: &[F]) -> F {
    let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
    if !mx.is_finite() {
        return mx;
    }
    mx + row.iter().map(|&x| (x - mx).exp()).sum::<F>().ln()
}

pub fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

pub fn log_sigmoid<F: Real>(x: F) -> F {
    // -softplus(-x), stable for both signs
    if x >= F::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu<F: Real>(x: F) -> F {
    let u = F::of(GELU_C) * (x + F::of(0.044715) * x * x * x);
    F::of(0.5) * x * (F::one() + u.tanh())
}

fn gelu_grad<F: Real>(x: F) -> F {
    let u = F::of(GELU_C) * (x + F::of(0.044715) * x * x * x);
    let th = u.tanh();
    let du = F::of(GELU_C) * (F::one() + F::of(3.0 * 0.044715) * x * x);
    F::of(0.5) * (F::one() + th) + F::of(0.5) * x * (F::one() - th * th) * du
}

/// Gradients from one reverse sweep.
pub struct Gradients<F> {
    nodes: Vec<Option<Matrix<F>>>,
    params: Vec<Option<Matrix<F>>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient of an input created with [`Graph::input`], if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Matrix<F>> {
        self.nodes[v.0].as_ref()
    }

    pub fn params(&self) -> &[Option<Matrix<F>>] {
        &self.params
    }

    pub fn into_params(self) -> Vec<Option<Matrix<F>>> {
        self.params
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of d(out)/d(input) for a graph builder.
    fn check(build: impl Fn(&mut Graph<f64>, Var) -> Var, input: Matrix<f64>, tol: f64) {
        let mut g = Graph::new(&[]);
        let x = g.input(input.clone());
        let out = build(&mut g, x);
        let grads = g.backward(out);
        let analytic = grads.wrt(x).cloned().unwrap_or(Matrix::zeros(input.rows(), input.cols()));
        let h = 1e-6;
        for k in 0..input.data().len() {
            let eval = |delta: f64| {
                let mut m = input.clone();
                m.data_mut()[k] += delta;
                let mut g = Graph::new(&[]);
                let x = g.input(m);
                let o = build(&mut g, x);
                g.scalar(o)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = analytic.data()[k];
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
            assert!(err < tol, "entry {k}: analytic {an} vs fd {fd}");
        }
    }

    fn rand_input(r: usize, c: usize, seed: u64) -> Matrix<f64> {
        Matrix::randn(r, c, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn elementwise_ops() {
        check(|g, x| { let y = g.gelu(x); g.sum(y) }, rand_input(3, 4, 1), 1e-6);
        check(|g, x| { let y = g.tanh(x); let z = g.mul(y, x); g.sum(z) }, rand_input(3, 4, 2), 1e-6);
        check(|g, x| { let y = g.log_sigmoid(x); g.mean(y) }, rand_input(2, 5, 3), 1e-6);
    }

    #[test]
    fn row_ops() {
        let w = rand_input(4, 4, 9);
        check(move |g, x| {
            let n = g.layer_norm(x);
            let c = g.input(w.clone());
            let m = g.mul(n, c);
            g.sum(m)
        }, rand_input(4, 4, 4), 1e-6);
        let w2 = rand_input(3, 3, 10);
        for causal in [false, true] {
            let w = w2.clone();
            check(move |g, x| {
                let p = g.softmax(x, causal);
                let c = g.input(w.clone());
                let m = g.mul(p, c);
                g.sum(m)
            }, rand_input(3, 3, 5), 1e-6);
        }
        check(|g, x| {
            let p = g.log_softmax(x);
            g.pick(p, &[(0, 1, 1.0), (1, 2, 0.5)])
        }, rand_input(2, 4, 6), 1e-6);
    }

    #[test]
    fn matmul_and_broadcast() {
        let b = rand_input(4, 3, 11);
        check(move |g, x| {
            let bb = g.input(b.clone());
            let y = g.matmul(x, bb);
            let z = g.matmul_t(y, y);
            let r = g.mean_rows(x);
            let s = g.slice_cols(r, 0, 3);
            let t = g.add_row(z, s);
            let u = g.mul_row(t, s);
            g.sum(u)
        }, rand_input(3, 4, 7), 1e-6);
    }

    #[test]
    fn cross_entropy_and_gather() {
        check(|g, x| {
            let rows = g.gather(x, &[2, 0, 2]);
            let a = g.slice_cols(rows, 0, 2);
            let b = g.slice_cols(rows, 2, 2);
            let cat = g.concat_cols(&[b, a]);
            g.cross_entropy(cat, &[1, 3, 0], &[1.0, 0.0, 2.0])
        }, rand_input(3, 4, 8), 1e-6);
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln_v() {
        let mut g = Graph::<f64>::new(&[]);
        let x = g.input(Matrix::zeros(5, 37));
        let l = g.cross_entropy(x, &[0, 1, 2, 3, 4], &[1.0; 5]);
        assert!((g.scalar(l) - 37f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn param_gradients_accumulate_over_reuse() {
        let p = vec![Matrix::from_vec(1, 2, vec![1.0f64, 2.0]).unwrap()];
        let mut g = Graph::new(&p);
        let a = g.param(0);
        let b = g.param(0);
        let m = g.mul(a, b);
        let s = g.sum(m);
        let grads = g.backward(s);
        assert_eq!(grads.params()[0].as_ref().unwrap().data(), &[2.0, 4.0]);
    }
}
