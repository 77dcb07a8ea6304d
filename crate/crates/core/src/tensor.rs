//! Tape-based reverse-mode automatic differentiation over 2-D `f64` arrays.
//!
//! Every tensor in the training stack is an `Array2<f64>` with rows as batch
//! items and columns as features; scalars are `1×1`. A [`Graph`] records each
//! forward operation on a tape, and [`Graph::backward`] walks the tape in
//! reverse, accumulating gradients into every node that was created with
//! `requires_grad`. Graphs are rebuilt per step (define-by-run), so control
//! flow in the surrounding code — which networks participate, which loss
//! terms are active — needs no special handling.
//!
//! The op set is deliberately small: affine maps, pointwise nonlinearities,
//! row/scalar broadcasts, reductions, row-wise (log-)softmax, and column
//! concatenation. Batch normalization, spectral normalization, attention-free
//! residual blocks, and every loss in the crate are compositions of these
//! primitives, so their gradients come from the tape rather than hand-derived
//! formulas.
//!
//! Shape mismatches are programming errors and panic immediately with the
//! offending shapes; they are never runtime conditions worth recovering from.
//!
//! # Example
//!
//! ```
//! use advtrain_core::tensor::Graph;
//! use ndarray::array;
//!
//! let mut g = Graph::new();
//! let w = g.leaf(array![[2.0], [1.0]], true);
//! let x = g.constant(array![[3.0, 4.0]]);
//! let y = g.matmul(x, w); // 1×1: [3·2 + 4·1] = [10]
//! g.backward(y);
//! assert_eq!(g.value(y)[(0, 0)], 10.0);
//! assert_eq!(g.grad(w), &array![[3.0], [4.0]]);
//! ```

use ndarray::{concatenate, Array2, Axis};

/// Handle to a node on the tape. Cheap to copy; only valid for the graph
/// that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Matmul(usize, usize),
    /// 1×F → rows×F, replicating the single row.
    BroadcastRow(usize),
    /// 1×1 → rows×cols, replicating the single entry.
    BroadcastScalar(usize),
    Relu(usize),
    Tanh(usize),
    Square(usize),
    Sqrt(usize),
    Ln(usize),
    Exp(usize),
    Recip(usize),
    /// B×F → 1×F, column means over the batch axis.
    MeanRows(usize),
    /// B×F → 1×1.
    SumAll(usize),
    LogSoftmax(usize),
    Softmax(usize),
    ConcatCols(usize, usize),
}

struct Node {
    value: Array2<f64>,
    grad: Option<Array2<f64>>,
    op: Op,
    requires_grad: bool,
}

/// A forward tape plus the gradients produced by the last `backward` call.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert!(
            value.iter().all(|v| !v.is_nan()),
            "NaN produced by {op:?}"
        );
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, a: Var) -> bool {
        self.nodes[a.0].requires_grad
    }

    /// Inserts a differentiable leaf (a parameter) or a constant input.
    pub fn leaf(&mut self, value: Array2<f64>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Inserts a constant (no gradient tracked).
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.leaf(value, false)
    }

    /// Scalar constant as a 1×1 node.
    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target with respect to `v`.
    ///
    /// Panics if `v` does not track gradients or `backward` has not run.
    pub fn grad(&self, v: Var) -> &Array2<f64> {
        self.nodes[v.0]
            .grad
            .as_ref()
            .expect("gradient requested for a node backward never reached")
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let s = self.nodes[v.0].value.dim();
        (s.0, s.1)
    }

    fn assert_same_shape(&self, a: Var, b: Var, op: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{op}: shape mismatch {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
    }

    // -- elementwise ------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "add");
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let rg = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a.0, b.0), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "sub");
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let rg = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a.0, b.0), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "mul");
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let rg = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a.0, b.0), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = &self.nodes[a.0].value * c;
        let rg = self.needs(a);
        self.push(v, Op::Scale(a.0, c), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = &self.nodes[a.0].value + c;
        let rg = self.needs(a);
        self.push(v, Op::AddScalar(a.0), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        let rg = self.needs(a);
        self.push(v, Op::Relu(a.0), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::tanh);
        let rg = self.needs(a);
        self.push(v, Op::Tanh(a.0), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * x);
        let rg = self.needs(a);
        self.push(v, Op::Square(a.0), rg)
    }

    /// Elementwise square root; inputs must be strictly positive.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::sqrt);
        let rg = self.needs(a);
        self.push(v, Op::Sqrt(a.0), rg)
    }

    /// Elementwise natural log; inputs must be strictly positive.
    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::ln);
        let rg = self.needs(a);
        self.push(v, Op::Ln(a.0), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::exp);
        let rg = self.needs(a);
        self.push(v, Op::Exp(a.0), rg)
    }

    /// Elementwise reciprocal; inputs must be nonzero.
    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| 1.0 / x);
        let rg = self.needs(a);
        self.push(v, Op::Recip(a.0), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let r = self.recip(b);
        self.mul(a, r)
    }

    // -- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        assert_eq!(
            ac, br,
            "matmul: inner dimensions differ, {ar}x{ac} · {br}x{bc}"
        );
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        let rg = self.needs(a) || self.needs(b);
        self.push(v, Op::Matmul(a.0, b.0), rg)
    }

    /// Replicates a `1×F` row across `rows` rows.
    pub fn broadcast_row(&mut self, a: Var, rows: usize) -> Var {
        let (r, f) = self.shape(a);
        assert_eq!(r, 1, "broadcast_row: expected a single row, got {r}x{f}");
        let row = self.nodes[a.0].value.row(0).to_owned();
        let v = Array2::from_shape_fn((rows, f), |(_, j)| row[j]);
        let rg = self.needs(a);
        self.push(v, Op::BroadcastRow(a.0), rg)
    }

    /// Replicates a `1×1` scalar across a `rows×cols` array.
    pub fn broadcast_scalar(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        assert_eq!(
            self.shape(a),
            (1, 1),
            "broadcast_scalar: expected 1x1, got {:?}",
            self.shape(a)
        );
        let x = self.nodes[a.0].value[(0, 0)];
        let rg = self.needs(a);
        self.push(
            Array2::from_elem((rows, cols), x),
            Op::BroadcastScalar(a.0),
            rg,
        )
    }

    /// Column means over the batch axis: `B×F → 1×F`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (b, _) = self.shape(a);
        assert!(b > 0, "mean_rows: empty batch");
        let m = self.nodes[a.0].value.sum_axis(Axis(0)) / b as f64;
        let v = m.insert_axis(Axis(0));
        let rg = self.needs(a);
        self.push(v.into_dimensionality().unwrap(), Op::MeanRows(a.0), rg);
        Var(self.nodes.len() - 1)
    }

    /// Sum of every entry: `B×F → 1×1`.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        let rg = self.needs(a);
        self.push(Array2::from_elem((1, 1), s), Op::SumAll(a.0), rg)
    }

    /// Mean of every entry: `B×F → 1×1`.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let s = self.sum_all(a);
        self.scale(s, 1.0 / (r * c) as f64)
    }

    /// Row-wise numerically stable log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let v = log_softmax_rows(&self.nodes[a.0].value);
        let rg = self.needs(a);
        self.push(v, Op::LogSoftmax(a.0), rg)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = log_softmax_rows(&self.nodes[a.0].value).mapv(f64::exp);
        let rg = self.needs(a);
        self.push(v, Op::Softmax(a.0), rg)
    }

    /// Concatenates along the feature axis: `B×F1, B×F2 → B×(F1+F2)`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (ar, _) = self.shape(a);
        let (br, _) = self.shape(b);
        assert_eq!(ar, br, "concat_cols: row counts differ ({ar} vs {br})");
        let v = concatenate![
            Axis(1),
            self.nodes[a.0].value.view(),
            self.nodes[b.0].value.view()
        ];
        let rg = self.needs(a) || self.needs(b);
        self.push(v, Op::ConcatCols(a.0, b.0), rg)
    }

    // -- composite helpers --------------------------------------------------

    /// `x·W + b` with a row-broadcast bias.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        let rows = self.shape(xw).0;
        let bb = self.broadcast_row(b, rows);
        self.add(xw, bb)
    }

    /// Mean squared difference over all entries of two same-shaped arrays.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let s = self.square(d);
        self.mean_all(s)
    }

    /// Cross-entropy of logits against fixed one-hot (or soft) target rows,
    /// averaged over the batch: `−(1/B)·Σ target ⊙ log_softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, target: Var) -> Var {
        self.assert_same_shape(logits, target, "cross_entropy");
        let rows = self.shape(logits).0;
        let ls = self.log_softmax(logits);
        let picked = self.mul(ls, target);
        let total = self.sum_all(picked);
        self.scale(total, -1.0 / rows as f64)
    }

    // -- backward ------------------------------------------------------------

    /// Accumulates `∂loss/∂node` for every gradient-tracking node reachable
    /// from `loss`, which must be `1×1`. Overwrites gradients from any
    /// previous call on this graph.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(
            self.shape(loss),
            (1, 1),
            "backward: loss must be a 1x1 scalar, got {:?}",
            self.shape(loss)
        );
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[loss.0].grad = Some(Array2::from_elem((1, 1), 1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accumulate(a, g.clone());
                    self.accumulate(b, g.clone());
                }
                Op::Sub(a, b) => {
                    self.accumulate(a, g.clone());
                    self.accumulate(b, -&g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * &self.nodes[b].value;
                    let gb = &g * &self.nodes[a].value;
                    self.accumulate(a, ga);
                    self.accumulate(b, gb);
                }
                Op::Scale(a, c) => self.accumulate(a, &g * c),
                Op::AddScalar(a) => self.accumulate(a, g.clone()),
                Op::Matmul(a, b) => {
                    let ga = g.dot(&self.nodes[b].value.t());
                    let gb = self.nodes[a].value.t().dot(&g);
                    self.accumulate(a, ga);
                    self.accumulate(b, gb);
                }
                Op::BroadcastRow(a) => {
                    let summed = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(a, summed.into_dimensionality().unwrap());
                }
                Op::BroadcastScalar(a) => {
                    self.accumulate(a, Array2::from_elem((1, 1), g.sum()));
                }
                Op::Relu(a) => {
                    let mask = self.nodes[a].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    self.accumulate(a, &g * &mask);
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[i].value;
                    self.accumulate(a, &g * &y.mapv(|t| 1.0 - t * t));
                }
                Op::Square(a) => {
                    let ga = &g * &(&self.nodes[a].value * 2.0);
                    self.accumulate(a, ga);
                }
                Op::Sqrt(a) => {
                    let y = &self.nodes[i].value;
                    self.accumulate(a, &g / &(y * 2.0));
                }
                Op::Ln(a) => {
                    let ga = &g / &self.nodes[a].value;
                    self.accumulate(a, ga);
                }
                Op::Exp(a) => {
                    let y = self.nodes[i].value.clone();
                    self.accumulate(a, &g * &y);
                }
                Op::Recip(a) => {
                    let y = &self.nodes[i].value;
                    self.accumulate(a, -(&g * &(y * y)));
                }
                Op::MeanRows(a) => {
                    let rows = self.nodes[a].value.nrows();
                    let spread = Array2::from_shape_fn(self.nodes[a].value.dim(), |(_, j)| {
                        g[(0, j)] / rows as f64
                    });
                    self.accumulate(a, spread);
                }
                Op::SumAll(a) => {
                    let spread = Array2::from_elem(self.nodes[a].value.dim(), g[(0, 0)]);
                    self.accumulate(a, spread);
                }
                Op::LogSoftmax(a) => {
                    // dx = g − softmax(x) ⊙ rowsum(g)
                    let soft = self.nodes[i].value.mapv(f64::exp);
                    let row_sums = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    self.accumulate(a, &g - &(&soft * &row_sums));
                }
                Op::Softmax(a) => {
                    // dx = s ⊙ (g − rowsum(g ⊙ s))
                    let s = self.nodes[i].value.clone();
                    let weighted = (&g * &s).sum_axis(Axis(1)).insert_axis(Axis(1));
                    self.accumulate(a, &s * &(&g - &weighted));
                }
                Op::ConcatCols(a, b) => {
                    let fa = self.nodes[a].value.ncols();
                    let (ga, gb) = g.view().split_at(Axis(1), fa);
                    let (ga, gb) = (ga.to_owned(), gb.to_owned());
                    self.accumulate(a, ga);
                    self.accumulate(b, gb);
                }
            }
            // Leaves keep their gradient for the caller; interior nodes have
            // fully propagated theirs.
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].grad = Some(g);
            }
        }
    }

    fn accumulate(&mut self, idx: usize, g: Array2<f64>) {
        if !self.nodes[idx].requires_grad {
            return;
        }
        match &mut self.nodes[idx].grad {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }
}

fn log_softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Central-difference gradient of a scalar function at `at`, step `h`.
///
/// Shared by the unit tests here and the loss gradient checks elsewhere; it
/// is the independent reference every tape gradient is compared against.
pub fn finite_difference_gradient<F>(mut f: F, at: &Array2<f64>, h: f64) -> Array2<f64>
where
    F: FnMut(&Array2<f64>) -> f64,
{
    let mut grad = Array2::zeros(at.dim());
    for idx in ndarray::indices(at.dim()) {
        let mut plus = at.clone();
        plus[idx] += h;
        let mut minus = at.clone();
        minus[idx] -= h;
        grad[idx] = (f(&plus) - f(&minus)) / (2.0 * h);
    }
    grad
}

/// Worst-case relative disagreement between two gradients, with an absolute
/// floor so zero-gradient entries compare by absolute error.
pub fn max_relative_error(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim(), "gradient shapes differ");
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}
