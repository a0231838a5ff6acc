//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Everything the training path touches is a 2-D matrix: sequences are
//! `(len × d)`, row vectors are `(1 × d)`, scalars are `(1 × 1)`. A [`Tape`]
//! records the forward graph; [`Tape::backward`] walks it once in reverse and
//! returns gradients. All arithmetic stays in `f64` so central finite
//! differences agree with the analytic pass to tight tolerances.

use ndarray::{Array2, Axis};
use std::collections::BTreeMap;

pub type Matrix = Array2<f64>;

/// Handle to a node on a [`Tape`]. Only valid for the tape that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    /// Input constant or named parameter.
    Leaf { param: Option<String> },
    Add(Var, Var),
    Sub(Var, Var),
    /// Elementwise product of same-shape matrices.
    Mul(Var, Var),
    Scale(Var, f64),
    /// `a (n×d) + b (1×d)` broadcast over rows.
    AddRow(Var, Var),
    /// `a (n×d) * b (1×d)` broadcast over rows.
    MulRow(Var, Var),
    MatMul(Var, Var),
    /// `a · bᵀ` without materializing the transpose.
    MatMulTB(Var, Var),
    Tanh(Var),
    Gelu(Var),
    /// Row-wise softmax. `-inf` entries get exactly zero weight.
    RowSoftmax(Var),
    RowLogSoftmax(Var),
    /// Per-row standardization `(x - mean) / sqrt(var + eps)`, no affine.
    LayerNormRows { x: Var, eps: f64 },
    /// Per-row L2 normalization `x / sqrt(sum x² + eps)`.
    L2NormRows { x: Var, eps: f64 },
    /// Gather rows by index; duplicate indices accumulate gradient.
    SelectRows { x: Var, rows: Vec<usize> },
    ConcatRows(Vec<Var>),
    /// Tile a `1×d` row into `n×d`.
    BroadcastRow { x: Var },
    SumAll(Var),
    MeanAll(Var),
    /// Mean over rows of `-logp[r, target[r]]`, a `1×1` result.
    NllRows { logp: Var, targets: Vec<usize> },
    /// Sum of same-shape vars (loss accumulation).
    SumList(Vec<Var>),
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Gradients keyed by node index, with named-parameter extraction.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Value of a `1×1` node as a plain scalar.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf { param: None })
    }

    pub fn scalar_const(&mut self, x: f64) -> Var {
        self.constant(Matrix::from_elem((1, 1), x))
    }

    /// Leaf whose gradient is reported under `name` by [`Tape::backward`].
    pub fn param(&mut self, name: &str, value: Matrix) -> Var {
        self.push(
            value,
            Op::Leaf {
                param: Some(name.to_string()),
            },
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.value(row).nrows(), 1);
        let v = self.value(a) + &self.value(row).row(0);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.value(row).nrows(), 1);
        let v = self.value(a) * &self.value(row).row(0);
        self.push(v, Op::MulRow(a, row))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_tb(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulTB(a, b))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu_fwd);
        self.push(v, Op::Gelu(a))
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let v = row_softmax_fwd(self.value(a));
        self.push(v, Op::RowSoftmax(a))
    }

    pub fn row_log_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&e| (e - max).exp()).sum::<f64>().ln() + max;
            row.mapv_inplace(|e| e - lse);
        }
        self.push(v, Op::RowLogSoftmax(a))
    }

    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.iter().map(|&e| (e - mean) * (e - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|e| (e - mean) * inv);
        }
        self.push(v, Op::LayerNormRows { x: a, eps })
    }

    pub fn l2_normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let norm = (row.iter().map(|&e| e * e).sum::<f64>() + eps).sqrt();
            row.mapv_inplace(|e| e / norm);
        }
        self.push(v, Op::L2NormRows { x: a, eps })
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let x = self.value(a);
        let mut v = Matrix::zeros((rows.len(), x.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            v.row_mut(i).assign(&x.row(r));
        }
        self.push(
            v,
            Op::SelectRows {
                x: a,
                rows: rows.to_vec(),
            },
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).ncols();
        let total: usize = parts.iter().map(|&p| self.value(p).nrows()).sum();
        let mut v = Matrix::zeros((total, cols));
        let mut at = 0;
        for &p in parts {
            let m = self.value(p);
            v.slice_mut(ndarray::s![at..at + m.nrows(), ..]).assign(m);
            at += m.nrows();
        }
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn broadcast_row(&mut self, a: Var, n: usize) -> Var {
        let x = self.value(a);
        debug_assert_eq!(x.nrows(), 1);
        let mut v = Matrix::zeros((n, x.ncols()));
        for mut row in v.rows_mut() {
            row.assign(&x.row(0));
        }
        self.push(v, Op::BroadcastRow { x: a })
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Matrix::from_elem((1, 1), s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let s = m.sum() / (m.len() as f64);
        self.push(Matrix::from_elem((1, 1), s), Op::MeanAll(a))
    }

    pub fn nll_rows(&mut self, logp: Var, targets: &[usize]) -> Var {
        let lp = self.value(logp);
        assert_eq!(lp.nrows(), targets.len());
        let s = targets
            .iter()
            .enumerate()
            .map(|(r, &t)| -lp[[r, t]])
            .sum::<f64>()
            / targets.len() as f64;
        self.push(
            Matrix::from_elem((1, 1), s),
            Op::NllRows {
                logp,
                targets: targets.to_vec(),
            },
        )
    }

    pub fn sum_list(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let mut v = self.value(parts[0]).clone();
        for &p in &parts[1..] {
            v += self.value(p);
        }
        self.push(v, Op::SumList(parts.to_vec()))
    }

    /// Convenience: `x · w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    /// Backpropagate from a `1×1` loss node. Returns per-node gradients;
    /// named parameters can be collected with [`Gradients`] + [`Tape::param_grads`].
    pub fn backward(&self, loss: Var) -> Gradients {
        let m = self.value(loss);
        assert_eq!(m.dim(), (1, 1), "backward expects a scalar loss");
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::from_elem((1, 1), 1.0));

        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[idx].op {
                Op::Leaf { .. } => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *b, &g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    accumulate_neg(&mut grads, *b, &g);
                }
                Op::Mul(a, b) => {
                    let da = &g * self.value(*b);
                    let db = &g * self.value(*a);
                    accumulate(&mut grads, *a, &da);
                    accumulate(&mut grads, *b, &db);
                }
                Op::Scale(a, c) => {
                    let da = &g * *c;
                    accumulate(&mut grads, *a, &da);
                }
                Op::AddRow(a, row) => {
                    accumulate(&mut grads, *a, &g);
                    let db = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *row, &db);
                }
                Op::MulRow(a, row) => {
                    let rv = self.value(*row).row(0).to_owned();
                    let da = &g * &rv;
                    let db = (&g * self.value(*a))
                        .sum_axis(Axis(0))
                        .insert_axis(Axis(0));
                    accumulate(&mut grads, *a, &da);
                    accumulate(&mut grads, *row, &db);
                }
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, &da);
                    accumulate(&mut grads, *b, &db);
                }
                Op::MatMulTB(a, b) => {
                    // c = a·bᵀ: da = g·b, db = gᵀ·a
                    let da = g.dot(self.value(*b));
                    let db = g.t().dot(self.value(*a));
                    accumulate(&mut grads, *a, &da);
                    accumulate(&mut grads, *b, &db);
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[idx].value;
                    let da = &g * &y.mapv(|t| 1.0 - t * t);
                    accumulate(&mut grads, *a, &da);
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let da = &g * &x.mapv(gelu_bwd);
                    accumulate(&mut grads, *a, &da);
                }
                Op::RowSoftmax(a) => {
                    let y = &self.nodes[idx].value;
                    let mut da = Matrix::zeros(g.dim());
                    for r in 0..y.nrows() {
                        let dot: f64 = (0..y.ncols()).map(|c| g[[r, c]] * y[[r, c]]).sum();
                        for c in 0..y.ncols() {
                            da[[r, c]] = y[[r, c]] * (g[[r, c]] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, &da);
                }
                Op::RowLogSoftmax(a) => {
                    let y = &self.nodes[idx].value;
                    let mut da = Matrix::zeros(g.dim());
                    for r in 0..y.nrows() {
                        let gsum: f64 = (0..y.ncols()).map(|c| g[[r, c]]).sum();
                        for c in 0..y.ncols() {
                            da[[r, c]] = g[[r, c]] - y[[r, c]].exp() * gsum;
                        }
                    }
                    accumulate(&mut grads, *a, &da);
                }
                Op::LayerNormRows { x, eps } => {
                    let xm = self.value(*x);
                    let y = &self.nodes[idx].value;
                    let mut da = Matrix::zeros(g.dim());
                    let n = xm.ncols() as f64;
                    for r in 0..xm.nrows() {
                        let mean = xm.row(r).sum() / n;
                        let var =
                            xm.row(r).iter().map(|&e| (e - mean) * (e - mean)).sum::<f64>() / n;
                        let inv = 1.0 / (var + eps).sqrt();
                        let gmean: f64 = g.row(r).sum() / n;
                        let gydot: f64 =
                            (0..xm.ncols()).map(|c| g[[r, c]] * y[[r, c]]).sum::<f64>() / n;
                        for c in 0..xm.ncols() {
                            da[[r, c]] = inv * (g[[r, c]] - gmean - y[[r, c]] * gydot);
                        }
                    }
                    accumulate(&mut grads, *x, &da);
                }
                Op::L2NormRows { x, eps } => {
                    let xm = self.value(*x);
                    let mut da = Matrix::zeros(g.dim());
                    for r in 0..xm.nrows() {
                        let sq: f64 = xm.row(r).iter().map(|&e| e * e).sum::<f64>() + eps;
                        let norm = sq.sqrt();
                        let gx: f64 = (0..xm.ncols()).map(|c| g[[r, c]] * xm[[r, c]]).sum();
                        for c in 0..xm.ncols() {
                            da[[r, c]] = g[[r, c]] / norm - xm[[r, c]] * gx / (sq * norm);
                        }
                    }
                    accumulate(&mut grads, *x, &da);
                }
                Op::SelectRows { x, rows } => {
                    let xm = self.value(*x);
                    let mut da = Matrix::zeros(xm.dim());
                    for (i, &r) in rows.iter().enumerate() {
                        let mut dst = da.row_mut(r);
                        dst += &g.row(i);
                    }
                    accumulate(&mut grads, *x, &da);
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let rows = self.value(p).nrows();
                        let slice = g.slice(ndarray::s![at..at + rows, ..]).to_owned();
                        accumulate(&mut grads, p, &slice);
                        at += rows;
                    }
                }
                Op::BroadcastRow { x } => {
                    let da = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *x, &da);
                }
                Op::SumAll(a) => {
                    let da = Matrix::from_elem(self.value(*a).dim(), g[[0, 0]]);
                    accumulate(&mut grads, *a, &da);
                }
                Op::MeanAll(a) => {
                    let len = self.value(*a).len() as f64;
                    let da = Matrix::from_elem(self.value(*a).dim(), g[[0, 0]] / len);
                    accumulate(&mut grads, *a, &da);
                }
                Op::NllRows { logp, targets } => {
                    let lp = self.value(*logp);
                    let mut da = Matrix::zeros(lp.dim());
                    let scale = g[[0, 0]] / targets.len() as f64;
                    for (r, &t) in targets.iter().enumerate() {
                        da[[r, t]] = -scale;
                    }
                    accumulate(&mut grads, *logp, &da);
                }
                Op::SumList(parts) => {
                    for &p in parts {
                        accumulate(&mut grads, p, &g);
                    }
                }
            }
        }
        Gradients { grads }
    }

    /// Collect gradients of all named parameter leaves.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Matrix> {
        let mut out = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(name) } = &node.op {
                if let Some(g) = grads.of(Var(idx)) {
                    out.entry(name.clone())
                        .and_modify(|acc: &mut Matrix| *acc += g)
                        .or_insert_with(|| g.clone());
                }
            }
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: &Matrix) {
    match &mut grads[v.0] {
        Some(acc) => *acc += g,
        slot => *slot = Some(g.clone()),
    }
}

fn accumulate_neg(grads: &mut [Option<Matrix>], v: Var, g: &Matrix) {
    match &mut grads[v.0] {
        Some(acc) => *acc -= g,
        slot => *slot = Some(-g),
    }
}

fn row_softmax_fwd(x: &Matrix) -> Matrix {
    let mut v = x.clone();
    for mut row in v.rows_mut() {
        // Fully -inf or NaN rows yield NaN, which divergence guards pick up;
        // masked-attention callers reject fully-masked rows beforehand.
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|e| (e - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|e| e / sum);
    }
    v
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randm(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central finite differences of `f` w.r.t. one input matrix, compared
    /// against the analytic gradient. `f` must rebuild the whole graph.
    fn check_grad<F>(inputs: &[Matrix], f: F, tol: f64)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let build = |mats: &[Matrix]| -> (Tape, Vec<Var>, Var) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = mats
                .iter()
                .enumerate()
                .map(|(i, m)| tape.param(&format!("p{i}"), m.clone()))
                .collect();
            let loss = f(&mut tape, &vars);
            (tape, vars, loss)
        };

        let (tape, vars, loss) = build(inputs);
        let grads = tape.backward(loss);

        let eps = 1e-6;
        for (pi, input) in inputs.iter().enumerate() {
            let analytic = grads
                .of(vars[pi])
                .cloned()
                .unwrap_or_else(|| Matrix::zeros(input.dim()));
            for r in 0..input.nrows() {
                for c in 0..input.ncols() {
                    let mut plus = inputs.to_vec();
                    plus[pi][[r, c]] += eps;
                    let (t, _, l) = build(&plus);
                    let fp = t.scalar(l);
                    let mut minus = inputs.to_vec();
                    minus[pi][[r, c]] -= eps;
                    let (t, _, l) = build(&minus);
                    let fm = t.scalar(l);
                    let fd = (fp - fm) / (2.0 * eps);
                    let an = analytic[[r, c]];
                    let denom = fd.abs().max(an.abs()).max(1e-8);
                    assert!(
                        ((fd - an) / denom).abs() < tol,
                        "param {pi} at ({r},{c}): fd={fd} analytic={an}"
                    );
                }
            }
        }
    }

    #[test]
    fn grad_matmul_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = randm(&mut rng, 3, 4);
        let b = randm(&mut rng, 4, 5);
        check_grad(&[a, b], |t, v| {
            let c = t.matmul(v[0], v[1]);
            let c = t.tanh(c);
            t.mean_all(c)
        }, 1e-6);
    }

    #[test]
    fn grad_matmul_tb() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = randm(&mut rng, 3, 4);
        let b = randm(&mut rng, 5, 4);
        check_grad(&[a, b], |t, v| {
            let c = t.matmul_tb(v[0], v[1]);
            let c = t.gelu(c);
            t.sum_all(c)
        }, 1e-6);
    }

    #[test]
    fn grad_softmax_and_logsoftmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = randm(&mut rng, 4, 6);
        check_grad(&[a.clone()], |t, v| {
            let s = t.row_softmax(v[0]);
            let s2 = t.mul(s, s);
            t.mean_all(s2)
        }, 1e-6);
        check_grad(&[a], |t, v| {
            let lp = t.row_log_softmax(v[0]);
            t.nll_rows(lp, &[1, 3, 0, 2])
        }, 1e-6);
    }

    #[test]
    fn grad_layer_norm_and_l2() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = randm(&mut rng, 3, 8);
        let gain = randm(&mut rng, 1, 8);
        let bias = randm(&mut rng, 1, 8);
        check_grad(&[a.clone(), gain, bias], |t, v| {
            let n = t.layer_norm_rows(v[0], 1e-5);
            let n = t.mul_row(n, v[1]);
            let n = t.add_row(n, v[2]);
            let n = t.mul(n, n);
            t.mean_all(n)
        }, 1e-6);
        check_grad(&[a], |t, v| {
            let n = t.l2_normalize_rows(v[0], 1e-12);
            let w = t.scale(n, 0.7);
            t.sum_all(w)
        }, 1e-6);
    }

    #[test]
    fn grad_select_concat_broadcast() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let table = randm(&mut rng, 6, 4);
        let row = randm(&mut rng, 1, 4);
        check_grad(&[table, row], |t, v| {
            // duplicate row indices must accumulate
            let sel = t.select_rows(v[0], &[0, 2, 2, 5]);
            let b = t.broadcast_row(v[1], 4);
            let cat = t.concat_rows(&[sel, b]);
            let sq = t.mul(cat, cat);
            t.mean_all(sq)
        }, 1e-6);
    }

    #[test]
    fn grad_masked_softmax_zero_weight() {
        // -inf mask entries get exactly zero weight and a finite gradient.
        let mut tape = Tape::new();
        let scores = tape.param("s", Matrix::from_shape_vec((2, 3), vec![0.3, -0.1, 0.8, 0.2, 0.5, -0.4]).unwrap());
        let mut mask = Matrix::zeros((2, 3));
        mask[[0, 1]] = f64::NEG_INFINITY;
        mask[[1, 0]] = f64::NEG_INFINITY;
        let m = tape.constant(mask);
        let masked = tape.add(scores, m);
        let w = tape.row_softmax(masked);
        assert_eq!(tape.value(w)[[0, 1]], 0.0);
        assert_eq!(tape.value(w)[[1, 0]], 0.0);
        for r in 0..2 {
            let sum: f64 = tape.value(w).row(r).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        let l = tape.mean_all(w);
        let g = tape.backward(l);
        assert!(g.of(scores).unwrap().iter().all(|x| x.is_finite()));
    }

    #[test]
    fn shared_param_accumulates() {
        // Same leaf used twice: gradient is the sum of both uses.
        let mut tape = Tape::new();
        let w = tape.param("w", Matrix::from_elem((1, 1), 3.0));
        let a = tape.mul(w, w); // w²  -> d/dw = 2w = 6
        let loss = tape.sum_all(a);
        let grads = tape.backward(loss);
        let by_name = tape.param_grads(&grads);
        assert!((by_name["w"][[0, 0]] - 6.0).abs() < 1e-12);
    }
}
