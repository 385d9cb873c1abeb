//! Reverse-mode autodiff over `f64` matrices.
//!
//! A [`Tape`] is a single-use expression arena: forward values are
//! computed eagerly as ops are pushed, and [`Tape::backward`] walks the
//! arena once in reverse to accumulate exact analytic gradients into
//! every parameter leaf. The op set is deliberately small; everything
//! the models need (message passing, GRU gates, 1-D convolution,
//! pooling, softmax, kernel similarities, KL terms) is composed from
//! it, which keeps each backward rule simple enough to verify against
//! central finite differences.
//!
//! Shapes are validated with panics: a shape mismatch inside a tape
//! expression is a programming error, not a runtime condition. Public
//! APIs validate their inputs before building tape expressions.

use ndarray::Array2;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Broadcast-add a `[1, m]` row to every row of a `[n, m]` matrix.
    AddRow(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    ClampMin(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    Powi(Var, i32),
    /// Sum of all entries, producing `[1, 1]`.
    SumAll(Var),
    /// Collapse rows: column totals, producing `[1, m]`.
    SumRows(Var),
    /// Collapse rows by averaging, producing `[1, m]`.
    MeanRows(Var),
    /// Collapse columns: per-row totals, producing `[n, 1]`.
    SumCols(Var),
    ConcatCols(Var, Var),
    /// Select rows by index (repetition allowed).
    GatherRows(Var, Vec<usize>),
    /// Route row `j` of the input into output row `idx[j]`, summing
    /// collisions; output has the given row count.
    ScatterAddRows(Var, Vec<usize>),
    SliceRows(Var, usize, usize),
    /// Append zero rows up to the target row count.
    PadRows(Var),
    /// Append zero columns up to the target column count.
    PadCols(Var),
    Transpose(Var),
    /// Non-overlapping max pooling over rows (stride = window, ceil
    /// semantics: a trailing partial window is kept). `argmax[r][c]`
    /// records the winning input row per output cell.
    MaxPoolRows(Var, Vec<usize>),
    /// Row-wise softmax with max-shift stabilization.
    SoftmaxRows(Var),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradients of one scalar loss with respect to tape leaves.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `var`, if it participated in the loss.
    pub fn wrt(&self, var: Var) -> Option<&Array2<f64>> {
        self.grads[var.0].as_ref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, var: Var) -> &Array2<f64> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> (usize, usize) {
        let v = &self.nodes[var.0].value;
        (v.nrows(), v.ncols())
    }

    /// Scalar value of a `[1, 1]` node.
    pub fn scalar(&self, var: Var) -> f64 {
        let v = self.value(var);
        assert_eq!(v.dim(), (1, 1), "scalar() on non-scalar node");
        v[[0, 0]]
    }

    /// Trainable leaf: gradients are accumulated for it.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derive(&mut self, value: Array2<f64>, op: Op, parents: &[Var]) -> Var {
        let needs = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push(value, op, needs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        assert_eq!(ac, br, "matmul shape mismatch: {ar}x{ac} . {br}x{bc}");
        let value = self.value(a).dot(self.value(b));
        self.derive(value, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let value = self.value(a) + self.value(b);
        self.derive(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let value = self.value(a) - self.value(b);
        self.derive(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let value = self.value(a) * self.value(b);
        self.derive(value, Op::Mul(a, b), &[a, b])
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (_, ac) = self.shape(a);
        let (rr, rc) = self.shape(row);
        assert_eq!((rr, rc), (1, ac), "add_row expects a [1, {ac}] row");
        let value = self.value(a) + self.value(row);
        self.derive(value, Op::AddRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        self.derive(value, Op::Scale(a, c), &[a])
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) + c;
        self.derive(value, Op::AddConst(a), &[a])
    }

    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let value = self.value(a).mapv(|x| x.max(floor));
        self.derive(value, Op::ClampMin(a, floor), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.derive(value, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        self.derive(value, Op::Tanh(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        self.derive(value, Op::Relu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        self.derive(value, Op::Exp(a), &[a])
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::ln);
        self.derive(value, Op::Ln(a), &[a])
    }

    pub fn powi(&mut self, a: Var, n: i32) -> Var {
        let value = self.value(a).mapv(|x| x.powi(n));
        self.derive(value, Op::Powi(a, n), &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        self.derive(value, Op::SumAll(a), &[a])
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let (_, ac) = self.shape(a);
        let mut value = Array2::zeros((1, ac));
        for row in self.value(a).rows() {
            for (c, x) in row.iter().enumerate() {
                value[[0, c]] += x;
            }
        }
        self.derive(value, Op::SumRows(a), &[a])
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (ar, ac) = self.shape(a);
        assert!(ar > 0, "mean_rows on empty matrix");
        let mut value = Array2::zeros((1, ac));
        for row in self.value(a).rows() {
            for (c, x) in row.iter().enumerate() {
                value[[0, c]] += x;
            }
        }
        value /= ar as f64;
        self.derive(value, Op::MeanRows(a), &[a])
    }

    pub fn sum_cols(&mut self, a: Var) -> Var {
        let (ar, _) = self.shape(a);
        let mut value = Array2::zeros((ar, 1));
        for (r, row) in self.value(a).rows().into_iter().enumerate() {
            value[[r, 0]] = row.sum();
        }
        self.derive(value, Op::SumCols(a), &[a])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        assert_eq!(ar, br, "concat_cols row mismatch");
        let mut value = Array2::zeros((ar, ac + bc));
        value
            .slice_mut(ndarray::s![.., ..ac])
            .assign(self.value(a));
        value
            .slice_mut(ndarray::s![.., ac..])
            .assign(self.value(b));
        self.derive(value, Op::ConcatCols(a, b), &[a, b])
    }

    pub fn gather_rows(&mut self, a: Var, indices: Vec<usize>) -> Var {
        let (ar, ac) = self.shape(a);
        let mut value = Array2::zeros((indices.len(), ac));
        for (out, &src) in indices.iter().enumerate() {
            assert!(src < ar, "gather_rows index {src} out of {ar} rows");
            value.row_mut(out).assign(&self.value(a).row(src));
        }
        self.derive(value, Op::GatherRows(a, indices), &[a])
    }

    pub fn scatter_add_rows(&mut self, a: Var, indices: Vec<usize>, out_rows: usize) -> Var {
        let (ar, ac) = self.shape(a);
        assert_eq!(ar, indices.len(), "scatter_add_rows index count mismatch");
        let mut value = Array2::zeros((out_rows, ac));
        for (src, &dst) in indices.iter().enumerate() {
            assert!(dst < out_rows, "scatter index {dst} out of {out_rows} rows");
            let row = self.value(a).row(src).to_owned();
            value.row_mut(dst).zip_mut_with(&row, |v, x| *v += x);
        }
        self.derive(value, Op::ScatterAddRows(a, indices), &[a])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let (ar, _) = self.shape(a);
        assert!(start < end && end <= ar, "slice_rows bounds {start}..{end} of {ar}");
        let value = self
            .value(a)
            .slice(ndarray::s![start..end, ..])
            .to_owned();
        self.derive(value, Op::SliceRows(a, start, end), &[a])
    }

    pub fn pad_rows(&mut self, a: Var, target: usize) -> Var {
        let (ar, ac) = self.shape(a);
        assert!(target >= ar, "pad_rows target below current rows");
        if target == ar {
            return a;
        }
        let mut value = Array2::zeros((target, ac));
        value.slice_mut(ndarray::s![..ar, ..]).assign(self.value(a));
        self.derive(value, Op::PadRows(a), &[a])
    }

    pub fn pad_cols(&mut self, a: Var, target: usize) -> Var {
        let (ar, ac) = self.shape(a);
        assert!(target >= ac, "pad_cols target below current cols");
        if target == ac {
            return a;
        }
        let mut value = Array2::zeros((ar, target));
        value.slice_mut(ndarray::s![.., ..ac]).assign(self.value(a));
        self.derive(value, Op::PadCols(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.derive(value, Op::Transpose(a), &[a])
    }

    pub fn max_pool_rows(&mut self, a: Var, window: usize) -> Var {
        let (ar, ac) = self.shape(a);
        assert!(window > 0, "max_pool_rows window must be positive");
        assert!(ar > 0, "max_pool_rows on empty matrix");
        let out_rows = ar.div_ceil(window);
        let mut value = Array2::zeros((out_rows, ac));
        let mut argmax = vec![0usize; out_rows * ac];
        let input = self.value(a);
        for r in 0..out_rows {
            let lo = r * window;
            let hi = ((r + 1) * window).min(ar);
            for c in 0..ac {
                let mut best = lo;
                for i in lo + 1..hi {
                    if input[[i, c]] > input[[best, c]] {
                        best = i;
                    }
                }
                value[[r, c]] = input[[best, c]];
                argmax[r * ac + c] = best;
            }
        }
        self.derive(value, Op::MaxPoolRows(a, argmax), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let input = self.value(a);
        let mut value = input.to_owned();
        for mut row in value.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - max).exp());
            let total: f64 = row.sum();
            row.mapv_inplace(|x| x / total);
        }
        self.derive(value, Op::SoftmaxRows(a), &[a])
    }

    /// Backpropagate from a `[1, 1]` loss node. Returns gradients for
    /// every node that required them; leaves created with
    /// [`Tape::param`] are the intended consumers.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(
            self.shape(loss),
            (1, 1),
            "backward expects a scalar loss node"
        );
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.accumulate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, idx: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let mut bump = |var: Var, delta: Array2<f64>| {
            if !self.nodes[var.0].needs_grad {
                return;
            }
            match &mut grads[var.0] {
                Some(acc) => *acc += &delta,
                slot @ None => *slot = Some(delta),
            }
        };

        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                bump(*a, g.dot(&self.value(*b).t()));
                bump(*b, self.value(*a).t().dot(g));
            }
            Op::Add(a, b) => {
                bump(*a, g.clone());
                bump(*b, g.clone());
            }
            Op::Sub(a, b) => {
                bump(*a, g.clone());
                bump(*b, -g.clone());
            }
            Op::Mul(a, b) => {
                bump(*a, g * self.value(*b));
                bump(*b, g * self.value(*a));
            }
            Op::AddRow(a, row) => {
                bump(*a, g.clone());
                let mut rg = Array2::zeros((1, g.ncols()));
                for r in g.rows() {
                    for (c, x) in r.iter().enumerate() {
                        rg[[0, c]] += x;
                    }
                }
                bump(*row, rg);
            }
            Op::Scale(a, c) => bump(*a, g * *c),
            Op::AddConst(a) => bump(*a, g.clone()),
            Op::ClampMin(a, floor) => {
                let mask = self.value(*a).mapv(|x| if x > *floor { 1.0 } else { 0.0 });
                bump(*a, g * &mask);
            }
            Op::Sigmoid(a) => bump(*a, g * &(y * &y.mapv(|v| 1.0 - v))),
            Op::Tanh(a) => bump(*a, g * &y.mapv(|v| 1.0 - v * v)),
            Op::Relu(a) => {
                let mask = self.value(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                bump(*a, g * &mask);
            }
            Op::Exp(a) => bump(*a, g * y),
            Op::Ln(a) => bump(*a, g / self.value(*a)),
            Op::Powi(a, n) => {
                let d = self.value(*a).mapv(|x| *n as f64 * x.powi(n - 1));
                bump(*a, g * &d);
            }
            Op::SumAll(a) => {
                let (ar, ac) = (self.value(*a).nrows(), self.value(*a).ncols());
                bump(*a, Array2::from_elem((ar, ac), g[[0, 0]]));
            }
            Op::SumRows(a) => {
                let ar = self.value(*a).nrows();
                let mut d = Array2::zeros((ar, g.ncols()));
                for mut row in d.rows_mut() {
                    row.assign(&g.row(0));
                }
                bump(*a, d);
            }
            Op::MeanRows(a) => {
                let ar = self.value(*a).nrows();
                let scaled = g.row(0).to_owned() / ar as f64;
                let mut d = Array2::zeros((ar, g.ncols()));
                for mut row in d.rows_mut() {
                    row.assign(&scaled);
                }
                bump(*a, d);
            }
            Op::SumCols(a) => {
                let ac = self.value(*a).ncols();
                let mut d = Array2::zeros((g.nrows(), ac));
                for (r, mut row) in d.rows_mut().into_iter().enumerate() {
                    row.fill(g[[r, 0]]);
                }
                bump(*a, d);
            }
            Op::ConcatCols(a, b) => {
                let ac = self.value(*a).ncols();
                bump(*a, g.slice(ndarray::s![.., ..ac]).to_owned());
                bump(*b, g.slice(ndarray::s![.., ac..]).to_owned());
            }
            Op::GatherRows(a, indices) => {
                let (ar, ac) = (self.value(*a).nrows(), self.value(*a).ncols());
                let mut d = Array2::zeros((ar, ac));
                for (out, &src) in indices.iter().enumerate() {
                    let grow = g.row(out).to_owned();
                    d.row_mut(src).zip_mut_with(&grow, |v, x| *v += x);
                }
                bump(*a, d);
            }
            Op::ScatterAddRows(a, indices) => {
                let ac = self.value(*a).ncols();
                let mut d = Array2::zeros((indices.len(), ac));
                for (src, &dst) in indices.iter().enumerate() {
                    d.row_mut(src).assign(&g.row(dst));
                }
                bump(*a, d);
            }
            Op::SliceRows(a, start, end) => {
                let (ar, ac) = (self.value(*a).nrows(), self.value(*a).ncols());
                let mut d = Array2::zeros((ar, ac));
                d.slice_mut(ndarray::s![*start..*end, ..]).assign(g);
                bump(*a, d);
            }
            Op::PadRows(a) => {
                let ar = self.value(*a).nrows();
                bump(*a, g.slice(ndarray::s![..ar, ..]).to_owned());
            }
            Op::PadCols(a) => {
                let ac = self.value(*a).ncols();
                bump(*a, g.slice(ndarray::s![.., ..ac]).to_owned());
            }
            Op::Transpose(a) => bump(*a, g.t().to_owned()),
            Op::MaxPoolRows(a, argmax) => {
                let (ar, ac) = (self.value(*a).nrows(), self.value(*a).ncols());
                let mut d = Array2::zeros((ar, ac));
                for r in 0..g.nrows() {
                    for c in 0..ac {
                        d[[argmax[r * ac + c], c]] += g[[r, c]];
                    }
                }
                bump(*a, d);
            }
            Op::SoftmaxRows(a) => {
                // Per row: dx_c = y_c * (g_c - sum_c'(g_c' * y_c')).
                let mut d = Array2::zeros((g.nrows(), g.ncols()));
                for r in 0..g.nrows() {
                    let dot: f64 = (0..g.ncols()).map(|c| g[[r, c]] * y[[r, c]]).sum();
                    for c in 0..g.ncols() {
                        d[[r, c]] = y[[r, c]] * (g[[r, c]] - dot);
                    }
                }
                bump(*a, d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Tolerances for comparing analytic gradients against central
    /// finite differences.
    struct GradCheckTolerance {
        eps: f64,
        atol: f64,
        rtol: f64,
    }

    impl Default for GradCheckTolerance {
        fn default() -> Self {
            GradCheckTolerance {
                eps: 1e-5,
                atol: 1e-8,
                rtol: 1e-6,
            }
        }
    }

    /// Checks d(loss)/d(x) for a scalar-valued builder, entry by entry.
    fn gradcheck(x0: Array2<f64>, tol: GradCheckTolerance, build: impl Fn(&mut Tape, Var) -> Var) {
        let mut tape = Tape::new();
        let x = tape.param(x0.clone());
        let loss = build(&mut tape, x);
        let grads = tape.backward(loss);
        let analytic = grads.wrt(x).expect("parameter got no gradient").clone();

        for r in 0..x0.nrows() {
            for c in 0..x0.ncols() {
                let mut plus = x0.clone();
                plus[[r, c]] += tol.eps;
                let mut minus = x0.clone();
                minus[[r, c]] -= tol.eps;
                let f = |m: Array2<f64>| {
                    let mut t = Tape::new();
                    let v = t.param(m);
                    let l = build(&mut t, v);
                    t.scalar(l)
                };
                let numeric = (f(plus) - f(minus)) / (2.0 * tol.eps);
                let a = analytic[[r, c]];
                let diff = (a - numeric).abs();
                assert!(
                    diff <= tol.atol + tol.rtol * numeric.abs(),
                    "grad mismatch at ({r},{c}): analytic {a}, numeric {numeric}"
                );
            }
        }
    }

    fn sample(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        // Deterministic, irrational-ish fill keeps entries away from
        // relu/maxpool tie points.
        Array2::from_shape_fn((rows, cols), |(r, c)| {
            let k = (seed as f64) + 1.37 * r as f64 + 0.73 * c as f64;
            (k.sin() * 1.9).tan().clamp(-2.5, 2.5) + 0.11
        })
    }

    #[test]
    fn forward_matmul_known_product() {
        let mut tape = Tape::new();
        let a = tape.constant(array![[1.0, 2.0], [3.0, 4.0]]);
        let b = tape.constant(array![[5.0], [6.0]]);
        let c = tape.matmul(a, b);
        assert_eq!(tape.value(c), &array![[17.0], [39.0]]);
    }

    #[test]
    fn forward_softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let a = tape.constant(array![[1.0, 2.0, 3.0], [-4.0, 0.0, 4.0]]);
        let s = tape.softmax_rows(a);
        for row in tape.value(s).rows() {
            let total: f64 = row.sum();
            assert!((total - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn forward_softmax_rows_is_shift_invariant() {
        // Max-shift stabilization: adding a constant per row must not
        // change the distribution, even for large inputs.
        let mut tape = Tape::new();
        let a = tape.constant(array![[1000.0, 1001.0]]);
        let s = tape.softmax_rows(a);
        let expected = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((tape.value(s)[[0, 1]] - expected).abs() < 1e-12);
    }

    #[test]
    fn forward_max_pool_keeps_partial_window() {
        let mut tape = Tape::new();
        let a = tape.constant(array![[1.0], [5.0], [3.0]]);
        let p = tape.max_pool_rows(a, 2);
        assert_eq!(tape.value(p), &array![[5.0], [3.0]]);
    }

    #[test]
    fn forward_scatter_add_sums_collisions() {
        let mut tape = Tape::new();
        let a = tape.constant(array![[1.0, 2.0], [10.0, 20.0], [100.0, 200.0]]);
        let s = tape.scatter_add_rows(a, vec![1, 1, 0], 3);
        assert_eq!(
            tape.value(s),
            &array![[100.0, 200.0], [11.0, 22.0], [0.0, 0.0]]
        );
    }

    #[test]
    fn backward_unused_leaf_has_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(array![[2.0]]);
        let unused = tape.param(array![[7.0]]);
        let loss = tape.mul(x, x);
        let grads = tape.backward(loss);
        assert!(grads.wrt(unused).is_none());
        assert_eq!(grads.wrt(x).unwrap()[[0, 0]], 4.0);
    }

    #[test]
    fn gradcheck_matmul_chain() {
        gradcheck(sample(3, 4, 1), GradCheckTolerance::default(), |t, x| {
            let w = t.constant(sample(4, 2, 2));
            let y = t.matmul(x, w);
            t.sum_all(y)
        });
    }

    #[test]
    fn gradcheck_elementwise_stack() {
        gradcheck(sample(2, 3, 3), GradCheckTolerance::default(), |t, x| {
            let s = t.sigmoid(x);
            let h = t.tanh(x);
            let m = t.mul(s, h);
            let e = t.exp(m);
            t.sum_all(e)
        });
    }

    #[test]
    fn gradcheck_relu_away_from_kink() {
        gradcheck(sample(3, 3, 4), GradCheckTolerance::default(), |t, x| {
            let r = t.relu(x);
            let sq = t.mul(r, r);
            t.sum_all(sq)
        });
    }

    #[test]
    fn gradcheck_softmax_log_loss() {
        // Softmax + clamp + ln is the exact CE path used by the models;
        // exponentials warrant a slightly relaxed relative tolerance.
        let tol = GradCheckTolerance {
            rtol: 1e-5,
            ..GradCheckTolerance::default()
        };
        gradcheck(sample(2, 4, 5), tol, |t, x| {
            let p = t.softmax_rows(x);
            let q = t.clamp_min(p, 1e-12);
            let lq = t.ln(q);
            let mask = t.constant(array![
                [1.0, 0.0, 0.0, 0.0],
                [0.0, 0.0, 1.0, 0.0]
            ]);
            let picked = t.mul(lq, mask);
            let s = t.sum_all(picked);
            t.scale(s, -1.0)
        });
    }

    #[test]
    fn gradcheck_gather_scatter_roundtrip() {
        gradcheck(sample(4, 3, 6), GradCheckTolerance::default(), |t, x| {
            let gathered = t.gather_rows(x, vec![0, 2, 2, 3]);
            let scattered = t.scatter_add_rows(gathered, vec![1, 1, 0, 2], 3);
            let sq = t.mul(scattered, scattered);
            t.sum_all(sq)
        });
    }

    #[test]
    fn gradcheck_concat_slice_pad() {
        gradcheck(sample(3, 2, 7), GradCheckTolerance::default(), |t, x| {
            let other = t.constant(sample(3, 2, 8));
            let cat = t.concat_cols(x, other);
            let sliced = t.slice_rows(cat, 0, 2);
            let padded = t.pad_rows(sliced, 4);
            let wide = t.pad_cols(padded, 6);
            let sq = t.mul(wide, wide);
            t.sum_all(sq)
        });
    }

    #[test]
    fn gradcheck_max_pool_and_reductions() {
        gradcheck(sample(5, 3, 9), GradCheckTolerance::default(), |t, x| {
            let p = t.max_pool_rows(x, 2);
            let m = t.mean_rows(p);
            let c = t.sum_cols(m);
            let sq = t.mul(c, c);
            t.sum_all(sq)
        });
    }

    #[test]
    fn gradcheck_add_row_broadcast_and_powi() {
        gradcheck(sample(1, 4, 10), GradCheckTolerance::default(), |t, x| {
            let base = t.constant(sample(3, 4, 11));
            let shifted = t.add_row(base, x);
            let p = t.powi(shifted, 3);
            t.sum_all(p)
        });
    }

    #[test]
    fn gradcheck_transpose_and_scale() {
        gradcheck(sample(2, 5, 12), GradCheckTolerance::default(), |t, x| {
            let xt = t.transpose(x);
            let w = t.constant(sample(2, 3, 13));
            let y = t.matmul(xt, w);
            let y2 = t.scale(y, 0.5);
            let y3 = t.add_const(y2, 1.0);
            let sq = t.mul(y3, y3);
            t.sum_all(sq)
        });
    }

    #[test]
    fn gradcheck_shared_parameter_accumulates() {
        // The same leaf used in two places must receive the sum of
        // both branch gradients.
        gradcheck(sample(2, 2, 14), GradCheckTolerance::default(), |t, x| {
            let y = t.matmul(x, x);
            t.sum_all(y)
        });
    }
}
