//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation as a node; [`Tape::backward`] walks the
//! nodes once in reverse creation order (which is a topological order, since
//! an operation can only reference earlier nodes) and accumulates gradients.
//! Everything is an `n x k` matrix: column vectors are `(n, 1)`, scalars are
//! `(1, 1)`. A tape belongs to one thread; parallelism happens across tapes.

use ndarray::{Array2, Axis};
use std::rc::Rc;

/// Handle to one node of a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Exp(Var),
    Sqrt(Var),
    Cos(Var),
    Swish(Var),
    Clamp(Var, f64, f64),
    MatMul(Var, Var),
    AddRow(Var, Var),
    BroadcastCols(Var),
    SumAll(Var),
    SumAxis1(Var),
    GatherRows(Var, Rc<Vec<usize>>),
    SegmentSum(Var, Rc<Vec<usize>>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Gradients of one backward pass, indexed by [`Var`]. Shapes always match
/// the corresponding node values.
pub struct Grads {
    grads: Vec<Array2<f64>>,
}

impl Grads {
    pub fn of(&self, var: Var) -> &Array2<f64> {
        &self.grads[var.0]
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Array2<f64> {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Record an input matrix. Leaves receive gradients like any other node.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.leaf(Array2::from_elem((1, 1), value))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.value(a).dim(),
            self.value(b).dim(),
            "{what}: operand shapes differ"
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|v| -v);
        self.push(value, Op::Neg(a))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).mapv(|v| v + c);
        self.push(value, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).mapv(|v| v * c);
        self.push(value, Op::MulScalar(a, c))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        self.push(value, Op::Exp(a))
    }

    /// Elementwise square root; operands must stay positive for a stable
    /// derivative, so callers shift by a small epsilon where zero can occur.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::sqrt);
        self.push(value, Op::Sqrt(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::cos);
        self.push(value, Op::Cos(a))
    }

    /// Swish activation `x * sigmoid(x)`.
    pub fn swish(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|v| v * sigmoid(v));
        self.push(value, Op::Swish(a))
    }

    /// Clamp to `[lo, hi]`; the gradient passes through inside the range and
    /// is zero outside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        assert!(lo < hi, "clamp: empty range");
        let value = self.value(a).mapv(|v| v.clamp(lo, hi));
        self.push(value, Op::Clamp(a, lo, hi))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.value(a).ncols(),
            self.value(b).nrows(),
            "matmul: inner dimensions differ"
        );
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// Add a `(1, k)` row to every row of an `(n, k)` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row: row operand is (1, k)");
        assert_eq!(
            self.value(a).ncols(),
            self.value(row).ncols(),
            "add_row: column counts differ"
        );
        let value = self.value(a) + self.value(row);
        self.push(value, Op::AddRow(a, row))
    }

    /// Repeat an `(n, 1)` column `k` times into an `(n, k)` matrix.
    pub fn broadcast_cols(&mut self, a: Var, k: usize) -> Var {
        assert_eq!(self.value(a).ncols(), 1, "broadcast_cols: operand is (n, 1)");
        assert!(k > 0, "broadcast_cols: k must be positive");
        let col = self.value(a);
        let mut value = Array2::zeros((col.nrows(), k));
        for (i, v) in col.column(0).iter().enumerate() {
            for j in 0..k {
                value[[i, j]] = *v;
            }
        }
        self.push(value, Op::BroadcastCols(a))
    }

    /// Sum every entry into a `(1, 1)` scalar.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(value, Op::SumAll(a))
    }

    /// Row-wise sum: `(n, k)` down to `(n, 1)`.
    pub fn sum_axis1(&mut self, a: Var) -> Var {
        let sums = self.value(a).sum_axis(Axis(1));
        let value = sums.insert_axis(Axis(1));
        self.push(value, Op::SumAxis1(a))
    }

    /// Select rows by index; an index may repeat.
    pub fn gather_rows(&mut self, a: Var, indices: Rc<Vec<usize>>) -> Var {
        let src = self.value(a);
        for &i in indices.iter() {
            assert!(i < src.nrows(), "gather_rows: row index out of range");
        }
        let mut value = Array2::zeros((indices.len(), src.ncols()));
        for (r, &i) in indices.iter().enumerate() {
            value.row_mut(r).assign(&src.row(i));
        }
        self.push(value, Op::GatherRows(a, indices))
    }

    /// Sum rows into `n_segments` buckets: `out[s] = sum over rows r with
    /// segment[r] == s`. Accumulation runs in row order, so results are
    /// deterministic.
    pub fn segment_sum(&mut self, a: Var, segments: Rc<Vec<usize>>, n_segments: usize) -> Var {
        let src = self.value(a);
        assert_eq!(
            segments.len(),
            src.nrows(),
            "segment_sum: one segment id per row"
        );
        for &s in segments.iter() {
            assert!(s < n_segments, "segment_sum: segment id out of range");
        }
        let mut value = Array2::zeros((n_segments, src.ncols()));
        for (r, &s) in segments.iter().enumerate() {
            let row = src.row(r);
            let mut out = value.row_mut(s);
            out += &row;
        }
        self.push(value, Op::SegmentSum(a, segments))
    }

    /// Reverse pass from a `(1, 1)` root. Each node is visited exactly once,
    /// in reverse creation order.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(
            self.value(root).dim(),
            (1, 1),
            "backward: root must be a scalar"
        );
        let mut grads: Vec<Array2<f64>> = self
            .nodes
            .iter()
            .map(|n| Array2::zeros(n.value.dim()))
            .collect();
        grads[root.0][[0, 0]] = 1.0;
        for id in (0..=root.0).rev() {
            let upstream = grads[id].clone();
            if upstream.iter().all(|&g| g == 0.0) {
                continue;
            }
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    grads[a.0] += &upstream;
                    grads[b.0] += &upstream;
                }
                Op::Sub(a, b) => {
                    grads[a.0] += &upstream;
                    grads[b.0] -= &upstream;
                }
                Op::Mul(a, b) => {
                    let da = &upstream * self.value(*b);
                    let db = &upstream * self.value(*a);
                    grads[a.0] += &da;
                    grads[b.0] += &db;
                }
                Op::Neg(a) => {
                    grads[a.0] -= &upstream;
                }
                Op::AddScalar(a) => {
                    grads[a.0] += &upstream;
                }
                Op::MulScalar(a, c) => {
                    grads[a.0].scaled_add(*c, &upstream);
                }
                Op::Exp(a) => {
                    let da = &upstream * &self.nodes[id].value;
                    grads[a.0] += &da;
                }
                Op::Sqrt(a) => {
                    let da = &upstream * &self.nodes[id].value.mapv(|y| 0.5 / y);
                    grads[a.0] += &da;
                }
                Op::Cos(a) => {
                    let da = &upstream * &self.value(*a).mapv(|x| -x.sin());
                    grads[a.0] += &da;
                }
                Op::Swish(a) => {
                    let da = &upstream
                        * &self.value(*a).mapv(|x| {
                            let s = sigmoid(x);
                            s + x * s * (1.0 - s)
                        });
                    grads[a.0] += &da;
                }
                Op::Clamp(a, lo, hi) => {
                    let mask = self.value(*a).mapv(|x| {
                        if x >= *lo && x <= *hi {
                            1.0
                        } else {
                            0.0
                        }
                    });
                    let da = &upstream * &mask;
                    grads[a.0] += &da;
                }
                Op::MatMul(a, b) => {
                    let da = upstream.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&upstream);
                    grads[a.0] += &da;
                    grads[b.0] += &db;
                }
                Op::AddRow(a, row) => {
                    grads[a.0] += &upstream;
                    let col_sums = upstream.sum_axis(Axis(0)).insert_axis(Axis(0));
                    grads[row.0] += &col_sums;
                }
                Op::BroadcastCols(a) => {
                    let row_sums = upstream.sum_axis(Axis(1)).insert_axis(Axis(1));
                    grads[a.0] += &row_sums;
                }
                Op::SumAll(a) => {
                    let g = upstream[[0, 0]];
                    grads[a.0] += g;
                }
                Op::SumAxis1(a) => {
                    let (n, k) = self.value(*a).dim();
                    let mut da = Array2::zeros((n, k));
                    for i in 0..n {
                        let g = upstream[[i, 0]];
                        for j in 0..k {
                            da[[i, j]] = g;
                        }
                    }
                    grads[a.0] += &da;
                }
                Op::GatherRows(a, indices) => {
                    let mut da = Array2::zeros(self.value(*a).dim());
                    for (r, &i) in indices.iter().enumerate() {
                        let mut row = da.row_mut(i);
                        row += &upstream.row(r);
                    }
                    grads[a.0] += &da;
                }
                Op::SegmentSum(a, segments) => {
                    let mut da = Array2::zeros(self.value(*a).dim());
                    for (r, &s) in segments.iter().enumerate() {
                        let mut row = da.row_mut(r);
                        row += &upstream.row(s);
                    }
                    grads[a.0] += &da;
                }
            }
        }
        Grads { grads }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn shared_subexpressions_accumulate_gradients() {
        // y = sum(x * x + x) => dy/dx = 2x + 1
        let mut tape = Tape::new();
        let x = tape.leaf(array![[1.0, -2.0], [0.5, 3.0]]);
        let sq = tape.mul(x, x);
        let s = tape.add(sq, x);
        let y = tape.sum_all(s);
        let grads = tape.backward(y);
        let expected = array![[3.0, -3.0], [2.0, 7.0]];
        let diff = grads.of(x) - &expected;
        assert!(diff.iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn grad_shapes_match_value_shapes() {
        let mut tape = Tape::new();
        let x = tape.leaf(Array2::from_elem((3, 2), 0.7));
        let w = tape.leaf(Array2::from_elem((2, 4), -0.2));
        let y = tape.matmul(x, w);
        let s = tape.sum_all(y);
        let grads = tape.backward(s);
        assert_eq!(grads.of(x).dim(), (3, 2));
        assert_eq!(grads.of(w).dim(), (2, 4));
        assert_eq!(grads.of(y).dim(), (3, 4));
    }

    #[test]
    fn matmul_gradient_matches_hand_result() {
        // y = sum(A B): dA = ones . B^T, dB = A^T . ones
        let mut tape = Tape::new();
        let a = tape.leaf(array![[1.0, 2.0], [3.0, 4.0]]);
        let b = tape.leaf(array![[5.0, 6.0], [7.0, 8.0]]);
        let y = tape.matmul(a, b);
        let s = tape.sum_all(y);
        let grads = tape.backward(s);
        let da_expected = array![[11.0, 15.0], [11.0, 15.0]];
        let db_expected = array![[4.0, 4.0], [6.0, 6.0]];
        assert!((grads.of(a) - &da_expected).iter().all(|d| d.abs() < 1e-12));
        assert!((grads.of(b) - &db_expected).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn gather_and_segment_sum_round_trip_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(array![[1.0], [2.0], [3.0]]);
        let gathered = tape.gather_rows(x, Rc::new(vec![0, 0, 2, 1]));
        let pooled = tape.segment_sum(gathered, Rc::new(vec![0, 1, 1, 0]), 2);
        let s = tape.sum_all(pooled);
        let grads = tape.backward(s);
        // Row 0 used twice, rows 1 and 2 once each.
        let expected = array![[2.0], [1.0], [1.0]];
        assert!((grads.of(x) - &expected).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn clamp_blocks_gradient_outside_range() {
        let mut tape = Tape::new();
        let x = tape.leaf(array![[-30.0, 0.0, 30.0]]);
        let c = tape.clamp(x, -20.0, 10.0);
        let s = tape.sum_all(c);
        let grads = tape.backward(s);
        let expected = array![[0.0, 1.0, 0.0]];
        assert_eq!(grads.of(x), &expected);
        assert_eq!(tape.value(c), &array![[-20.0, 0.0, 10.0]]);
    }

    #[test]
    fn swish_value_and_zero_point() {
        let mut tape = Tape::new();
        let x = tape.leaf(array![[0.0, 1.0]]);
        let y = tape.swish(x);
        assert_eq!(tape.value(y)[[0, 0]], 0.0);
        let expected = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((tape.value(y)[[0, 1]] - expected).abs() < 1e-12);
    }

    #[test]
    fn empty_row_operands_flow_through() {
        let mut tape = Tape::new();
        let x = tape.leaf(Array2::zeros((0, 3)));
        let w = tape.leaf(Array2::from_elem((3, 2), 1.0));
        let y = tape.matmul(x, w);
        let pooled = tape.segment_sum(y, Rc::new(vec![]), 4);
        assert_eq!(tape.value(pooled).dim(), (4, 2));
        assert!(tape.value(pooled).iter().all(|&v| v == 0.0));
    }
}
