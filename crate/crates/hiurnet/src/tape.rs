//! Minimal reverse-mode differentiation engine.
//!
//! A [`Tape`] records primitive applications in topological order; [`Tape::backward`]
//! replays them once in reverse, accumulating vector-Jacobian products. The op set
//! is closed: dense linear maps, elementwise nonlinearities, concat/slice (which
//! double as head merge/split), gather/scatter over edge index lists, and a
//! per-segment softmax. Graph sparsity is expressed through the index lists, so
//! the tensors themselves stay dense.
//!
//! Shape mismatches, out-of-range indices, and non-finite results are contract
//! violations and panic with the offending op named.

use std::rc::Rc;

use crate::tensor::{matmul_a_bt_acc, matmul_acc, matmul_at_b_acc, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    PowScalar(usize, f64),
    Abs(usize),
    Sigmoid(usize),
    Softplus(usize),
    Relu(usize),
    LeakyRelu(usize, f64),
    Matmul(usize, usize),
    Linear { x: usize, w: usize, b: usize },
    ConcatRows(usize, usize),
    ConcatCols(usize, usize),
    SliceRows { x: usize, start: usize },
    SliceCols { x: usize, start: usize },
    GatherRows { x: usize, idx: Rc<Vec<usize>> },
    ScatterSum { x: usize, tgt: Rc<Vec<usize>> },
    SegmentSoftmax { x: usize, seg: Rc<Vec<usize>> },
    RowDot(usize, usize),
    ScaleRows { x: usize, s: usize },
    ScaleByScalar { x: usize, s: usize },
    SumAll(usize),
    Mean(usize),
    Reshape(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Recorded computation. Single-threaded; independent tapes may run in parallel.
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    /// Record a constant input; gradients do not flow into it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Record a differentiable input (a parameter or an attribution target).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` call with respect to `v`, if it was tracked.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor, op: Op, parents: &[Var], name: &str) -> Var {
        if !value.all_finite() {
            panic!("{name}: non-finite result");
        }
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, op, rg)
    }

    fn t(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.t(a), self.t(b));
        assert_eq!(ta.shape(), tb.shape(), "add: shape mismatch");
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data);
        self.record(out, Op::Add(a.0, b.0), &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.t(a), self.t(b));
        assert_eq!(ta.shape(), tb.shape(), "sub: shape mismatch");
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x - y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data);
        self.record(out, Op::Sub(a.0, b.0), &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.t(a), self.t(b));
        assert_eq!(ta.shape(), tb.shape(), "mul: shape mismatch");
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data);
        self.record(out, Op::Mul(a.0, b.0), &[a, b], "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.t(a);
        let out = Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().map(|x| x * c).collect(),
        );
        self.record(out, Op::Scale(a.0, c), &[a], "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let ta = self.t(a);
        let out = Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().map(|x| x + c).collect(),
        );
        self.record(out, Op::AddScalar(a.0), &[a], "add_scalar")
    }

    /// Elementwise `x^p` for `x >= 0`. `p == 1` is the identity.
    pub fn pow_scalar(&mut self, a: Var, p: f64) -> Var {
        let ta = self.t(a);
        let data = if p == 1.0 {
            ta.data().to_vec()
        } else {
            ta.data().iter().map(|x| x.powf(p)).collect()
        };
        let out = Tensor::new(ta.shape().to_vec(), data);
        self.record(out, Op::PowScalar(a.0, p), &[a], "pow_scalar")
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let ta = self.t(a);
        let out = Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().map(|x| x.abs()).collect(),
        );
        self.record(out, Op::Abs(a.0), &[a], "abs")
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let ta = self.t(a);
        let out = Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().map(|&x| sigmoid(x)).collect(),
        );
        self.record(out, Op::Sigmoid(a.0), &[a], "sigmoid")
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let ta = self.t(a);
        let out = Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().map(|&x| softplus(x)).collect(),
        );
        self.record(out, Op::Softplus(a.0), &[a], "softplus")
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.t(a);
        let out = Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().map(|x| x.max(0.0)).collect(),
        );
        self.record(out, Op::Relu(a.0), &[a], "relu")
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let ta = self.t(a);
        let data = ta
            .data()
            .iter()
            .map(|&x| if x > 0.0 { x } else { slope * x })
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data);
        self.record(out, Op::LeakyRelu(a.0, slope), &[a], "leaky_relu")
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.t(a), self.t(b));
        let (n, k) = (ta.rows(), ta.cols());
        let (k2, m) = (tb.rows(), tb.cols());
        assert_eq!(k, k2, "matmul: inner dimensions {k} vs {k2}");
        let mut data = vec![0.0; n * m];
        matmul_acc(&mut data, ta.data(), tb.data(), n, k, m);
        let out = Tensor::matrix(n, m, data);
        self.record(out, Op::Matmul(a.0, b.0), &[a, b], "matmul")
    }

    /// `x @ w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (tx, tw, tb) = (self.t(x), self.t(w), self.t(b));
        let (n, din) = (tx.rows(), tx.cols());
        let (din2, dout) = (tw.rows(), tw.cols());
        assert_eq!(din, din2, "linear: input dim {din} vs weight dim {din2}");
        assert_eq!(tb.len(), dout, "linear: bias length");
        let mut data = Vec::with_capacity(n * dout);
        for _ in 0..n {
            data.extend_from_slice(tb.data());
        }
        matmul_acc(&mut data, tx.data(), tw.data(), n, din, dout);
        let out = Tensor::matrix(n, dout, data);
        self.record(
            out,
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.0,
            },
            &[x, w, b],
            "linear",
        )
    }

    /// Per-row dot product of two equally shaped matrices, yielding a vector.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.t(a), self.t(b));
        assert_eq!(ta.shape(), tb.shape(), "row_dot: shape mismatch");
        let c = ta.cols();
        let data = ta
            .data()
            .chunks(c)
            .zip(tb.data().chunks(c))
            .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x * y).sum())
            .collect();
        let out = Tensor::vector(data);
        self.record(out, Op::RowDot(a.0, b.0), &[a, b], "row_dot")
    }

    /// Scale row `i` of `x` by `s[i]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Var {
        let (tx, ts) = (self.t(x), self.t(s));
        assert_eq!(tx.rows(), ts.len(), "scale_rows: row count vs scale length");
        let c = tx.cols();
        let mut data = Vec::with_capacity(tx.len());
        for (row, &sv) in tx.data().chunks(c).zip(ts.data()) {
            data.extend(row.iter().map(|v| v * sv));
        }
        let out = Tensor::new(tx.shape().to_vec(), data);
        self.record(out, Op::ScaleRows { x: x.0, s: s.0 }, &[x, s], "scale_rows")
    }

    /// Multiply every element of `x` by a learnable scalar `s`.
    pub fn scale_by_scalar(&mut self, x: Var, s: Var) -> Var {
        let (tx, ts) = (self.t(x), self.t(s));
        assert!(ts.is_scalar(), "scale_by_scalar: scale must be a scalar");
        let sv = ts.data()[0];
        let out = Tensor::new(
            tx.shape().to_vec(),
            tx.data().iter().map(|v| v * sv).collect(),
        );
        self.record(
            out,
            Op::ScaleByScalar { x: x.0, s: s.0 },
            &[x, s],
            "scale_by_scalar",
        )
    }

    // ---- structure ----

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.t(a), self.t(b));
        assert_eq!(ta.cols(), tb.cols(), "concat_rows: column mismatch");
        let mut data = ta.data().to_vec();
        data.extend_from_slice(tb.data());
        let out = Tensor::matrix(ta.rows() + tb.rows(), ta.cols(), data);
        self.record(out, Op::ConcatRows(a.0, b.0), &[a, b], "concat_rows")
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.t(a), self.t(b));
        assert_eq!(ta.rows(), tb.rows(), "concat_cols: row mismatch");
        let (ca, cb) = (ta.cols(), tb.cols());
        let mut data = Vec::with_capacity(ta.len() + tb.len());
        for i in 0..ta.rows() {
            data.extend_from_slice(&ta.data()[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&tb.data()[i * cb..(i + 1) * cb]);
        }
        let out = Tensor::matrix(ta.rows(), ca + cb, data);
        self.record(out, Op::ConcatCols(a.0, b.0), &[a, b], "concat_cols")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let tx = self.t(x);
        assert!(start + len <= tx.rows(), "slice_rows: out of range");
        let c = tx.cols();
        let data = tx.data()[start * c..(start + len) * c].to_vec();
        let out = Tensor::matrix(len, c, data);
        self.record(out, Op::SliceRows { x: x.0, start }, &[x], "slice_rows")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let tx = self.t(x);
        let c = tx.cols();
        assert!(start + len <= c, "slice_cols: out of range");
        let mut data = Vec::with_capacity(tx.rows() * len);
        for i in 0..tx.rows() {
            data.extend_from_slice(&tx.data()[i * c + start..i * c + start + len]);
        }
        let out = Tensor::matrix(tx.rows(), len, data);
        self.record(out, Op::SliceCols { x: x.0, start }, &[x], "slice_cols")
    }

    pub fn gather_rows(&mut self, x: Var, idx: Rc<Vec<usize>>) -> Var {
        let tx = self.t(x);
        let (n, c) = (tx.rows(), tx.cols());
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            assert!(i < n, "gather_rows: index {i} out of range for {n} rows");
            data.extend_from_slice(&tx.data()[i * c..(i + 1) * c]);
        }
        let out = Tensor::matrix(idx.len(), c, data);
        self.record(out, Op::GatherRows { x: x.0, idx }, &[x], "gather_rows")
    }

    /// Sum row `i` of `x` into output row `tgt[i]`; output has `rows` rows.
    pub fn scatter_sum(&mut self, x: Var, tgt: Rc<Vec<usize>>, rows: usize) -> Var {
        let tx = self.t(x);
        assert_eq!(
            tx.rows(),
            tgt.len(),
            "scatter_sum: row count vs target length"
        );
        let c = tx.cols();
        let mut data = vec![0.0; rows * c];
        for (row, &t) in tx.data().chunks(c).zip(tgt.iter()) {
            assert!(
                t < rows,
                "scatter_sum: target {t} out of range for {rows} rows"
            );
            for (o, v) in data[t * c..(t + 1) * c].iter_mut().zip(row) {
                *o += v;
            }
        }
        let out = Tensor::matrix(rows, c, data);
        self.record(out, Op::ScatterSum { x: x.0, tgt }, &[x], "scatter_sum")
    }

    /// Softmax over rows sharing a segment id, columnwise. The per-segment
    /// maximum is subtracted before exponentiation.
    pub fn segment_softmax(&mut self, x: Var, seg: Rc<Vec<usize>>) -> Var {
        let tx = self.t(x);
        assert_eq!(
            tx.rows(),
            seg.len(),
            "segment_softmax: row count vs segment length"
        );
        let c = tx.cols();
        let n_seg = seg.iter().copied().max().map_or(0, |m| m + 1);
        let mut maxes = vec![f64::NEG_INFINITY; n_seg * c];
        for (row, &s) in tx.data().chunks(c).zip(seg.iter()) {
            for (j, &v) in row.iter().enumerate() {
                let m = &mut maxes[s * c + j];
                if v > *m {
                    *m = v;
                }
            }
        }
        let mut data: Vec<f64> = Vec::with_capacity(tx.len());
        let mut sums = vec![0.0; n_seg * c];
        for (row, &s) in tx.data().chunks(c).zip(seg.iter()) {
            for (j, &v) in row.iter().enumerate() {
                let e = (v - maxes[s * c + j]).exp();
                sums[s * c + j] += e;
                data.push(e);
            }
        }
        for (i, &s) in seg.iter().enumerate() {
            for j in 0..c {
                data[i * c + j] /= sums[s * c + j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data);
        self.record(
            out,
            Op::SegmentSoftmax { x: x.0, seg },
            &[x],
            "segment_softmax",
        )
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.t(a).data().iter().sum();
        self.record(Tensor::scalar(s), Op::SumAll(a.0), &[a], "sum_all")
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let ta = self.t(a);
        assert!(!ta.is_empty(), "mean: empty input");
        let m = ta.data().iter().sum::<f64>() / ta.len() as f64;
        self.record(Tensor::scalar(m), Op::Mean(a.0), &[a], "mean")
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let ta = self.t(a);
        assert_eq!(
            shape.iter().product::<usize>(),
            ta.len(),
            "reshape: element count mismatch"
        );
        let out = Tensor::new(shape, ta.data().to_vec());
        self.record(out, Op::Reshape(a.0), &[a], "reshape")
    }

    // ---- head helpers ----

    /// Column-slice head `i` of `h` equally sized head blocks.
    pub fn split_head(&mut self, x: Var, head: usize, heads: usize) -> Var {
        let c = self.t(x).cols();
        assert_eq!(
            c % heads,
            0,
            "split_head: {c} columns not divisible by {heads}"
        );
        let dk = c / heads;
        self.slice_cols(x, head * dk, dk)
    }

    /// Concatenate per-head blocks back into one matrix.
    pub fn merge_heads(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "merge_heads: no parts");
        let mut out = parts[0];
        for &p in &parts[1..] {
            out = self.concat_cols(out, p);
        }
        out
    }

    // ---- backward ----

    /// Populate gradients of every tracked input of the scalar `loss`.
    /// Accumulates across fan-out; panics if `loss` is not scalar or if the
    /// tape has already been differentiated.
    pub fn backward(&mut self, loss: Var) {
        assert!(
            self.t(loss).is_scalar(),
            "backward: loss must be a scalar, got shape {:?}",
            self.t(loss).shape()
        );
        assert!(!self.backward_done, "backward: called twice without reset");
        self.backward_done = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            self.nodes[i].grad = Some(g);
        }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        macro_rules! acc {
            ($p:expr, $f:expr) => {{
                let p: usize = $p;
                if self.nodes[p].requires_grad {
                    let slot = grads[p].get_or_insert_with(|| vec![0.0; self.nodes[p].value.len()]);
                    $f(slot.as_mut_slice());
                }
            }};
        }
        let val = |p: usize| self.nodes[p].value.data();

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc!(*a, |d: &mut [f64]| add_assign(d, g, 1.0));
                acc!(*b, |d: &mut [f64]| add_assign(d, g, 1.0));
            }
            Op::Sub(a, b) => {
                acc!(*a, |d: &mut [f64]| add_assign(d, g, 1.0));
                acc!(*b, |d: &mut [f64]| add_assign(d, g, -1.0));
            }
            Op::Mul(a, b) => {
                acc!(*a, |d: &mut [f64]| mul_add_assign(d, g, val(*b)));
                acc!(*b, |d: &mut [f64]| mul_add_assign(d, g, val(*a)));
            }
            Op::Scale(a, c) => acc!(*a, |d: &mut [f64]| add_assign(d, g, *c)),
            Op::AddScalar(a) => acc!(*a, |d: &mut [f64]| add_assign(d, g, 1.0)),
            Op::PowScalar(a, p) => acc!(*a, |d: &mut [f64]| {
                for ((o, &gv), &x) in d.iter_mut().zip(g).zip(val(*a)) {
                    // At x = 0 the true derivative is unbounded for p < 1;
                    // the factor multiplying it is 0 there, so clamp to 0.
                    let dx = if *p == 1.0 {
                        1.0
                    } else if x > 0.0 {
                        p * x.powf(p - 1.0)
                    } else {
                        0.0
                    };
                    *o += gv * dx;
                }
            }),
            Op::Abs(a) => acc!(*a, |d: &mut [f64]| {
                for ((o, &gv), &x) in d.iter_mut().zip(g).zip(val(*a)) {
                    *o += gv
                        * if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                }
            }),
            Op::Sigmoid(a) => acc!(*a, |d: &mut [f64]| {
                for ((o, &gv), &y) in d.iter_mut().zip(g).zip(val(i)) {
                    *o += gv * y * (1.0 - y);
                }
            }),
            Op::Softplus(a) => acc!(*a, |d: &mut [f64]| {
                for ((o, &gv), &x) in d.iter_mut().zip(g).zip(val(*a)) {
                    *o += gv * sigmoid(x);
                }
            }),
            Op::Relu(a) => acc!(*a, |d: &mut [f64]| {
                for ((o, &gv), &x) in d.iter_mut().zip(g).zip(val(*a)) {
                    if x > 0.0 {
                        *o += gv;
                    }
                }
            }),
            Op::LeakyRelu(a, s) => acc!(*a, |d: &mut [f64]| {
                for ((o, &gv), &x) in d.iter_mut().zip(g).zip(val(*a)) {
                    *o += gv * if x > 0.0 { 1.0 } else { *s };
                }
            }),
            Op::Matmul(a, b) => {
                let (n, k) = (self.nodes[*a].value.rows(), self.nodes[*a].value.cols());
                let m = self.nodes[*b].value.cols();
                acc!(*a, |d: &mut [f64]| matmul_a_bt_acc(d, g, val(*b), n, m, k));
                acc!(*b, |d: &mut [f64]| matmul_at_b_acc(d, val(*a), g, n, k, m));
            }
            Op::Linear { x, w, b } => {
                let (n, din) = (self.nodes[*x].value.rows(), self.nodes[*x].value.cols());
                let dout = self.nodes[*w].value.cols();
                acc!(*x, |d: &mut [f64]| matmul_a_bt_acc(
                    d,
                    g,
                    val(*w),
                    n,
                    dout,
                    din
                ));
                acc!(*w, |d: &mut [f64]| matmul_at_b_acc(
                    d,
                    val(*x),
                    g,
                    n,
                    din,
                    dout
                ));
                acc!(*b, |d: &mut [f64]| {
                    for row in g.chunks(dout) {
                        for (o, &gv) in d.iter_mut().zip(row) {
                            *o += gv;
                        }
                    }
                });
            }
            Op::ConcatRows(a, b) => {
                let na = self.nodes[*a].value.len();
                acc!(*a, |d: &mut [f64]| add_assign(d, &g[..na], 1.0));
                acc!(*b, |d: &mut [f64]| add_assign(d, &g[na..], 1.0));
            }
            Op::ConcatCols(a, b) => {
                let ca = self.nodes[*a].value.cols();
                let cb = self.nodes[*b].value.cols();
                let c = ca + cb;
                acc!(*a, |d: &mut [f64]| {
                    for (i, row) in g.chunks(c).enumerate() {
                        add_assign(&mut d[i * ca..(i + 1) * ca], &row[..ca], 1.0);
                    }
                });
                acc!(*b, |d: &mut [f64]| {
                    for (i, row) in g.chunks(c).enumerate() {
                        add_assign(&mut d[i * cb..(i + 1) * cb], &row[ca..], 1.0);
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let c = self.nodes[*x].value.cols();
                acc!(*x, |d: &mut [f64]| {
                    add_assign(&mut d[start * c..start * c + g.len()], g, 1.0)
                });
            }
            Op::SliceCols { x, start } => {
                let c = self.nodes[*x].value.cols();
                let len = self.nodes[i].value.cols();
                acc!(*x, |d: &mut [f64]| {
                    for (r, row) in g.chunks(len).enumerate() {
                        add_assign(&mut d[r * c + start..r * c + start + len], row, 1.0);
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let c = self.nodes[*x].value.cols();
                acc!(*x, |d: &mut [f64]| {
                    for (row, &src) in g.chunks(c).zip(idx.iter()) {
                        add_assign(&mut d[src * c..(src + 1) * c], row, 1.0);
                    }
                });
            }
            Op::ScatterSum { x, tgt } => {
                let c = self.nodes[*x].value.cols();
                acc!(*x, |d: &mut [f64]| {
                    for (row, &t) in d.chunks_mut(c).zip(tgt.iter()) {
                        add_assign(row, &g[t * c..(t + 1) * c], 1.0);
                    }
                });
            }
            Op::SegmentSoftmax { x, seg } => {
                let c = self.nodes[i].value.cols();
                let y = val(i);
                let n_seg = seg.iter().copied().max().map_or(0, |m| m + 1);
                let mut dot = vec![0.0; n_seg * c];
                for (r, &s) in seg.iter().enumerate() {
                    for j in 0..c {
                        dot[s * c + j] += g[r * c + j] * y[r * c + j];
                    }
                }
                acc!(*x, |d: &mut [f64]| {
                    for (r, &s) in seg.iter().enumerate() {
                        for j in 0..c {
                            let k = r * c + j;
                            d[k] += y[k] * (g[k] - dot[s * c + j]);
                        }
                    }
                });
            }
            Op::RowDot(a, b) => {
                let c = self.nodes[*a].value.cols();
                acc!(*a, |d: &mut [f64]| {
                    for ((row, &gv), src) in d.chunks_mut(c).zip(g).zip(val(*b).chunks(c)) {
                        add_assign(row, src, gv);
                    }
                });
                acc!(*b, |d: &mut [f64]| {
                    for ((row, &gv), src) in d.chunks_mut(c).zip(g).zip(val(*a).chunks(c)) {
                        add_assign(row, src, gv);
                    }
                });
            }
            Op::ScaleByScalar { x, s } => {
                let sv = val(*s)[0];
                acc!(*x, |d: &mut [f64]| add_assign(d, g, sv));
                acc!(*s, |d: &mut [f64]| {
                    d[0] += g.iter().zip(val(*x)).map(|(a, b)| a * b).sum::<f64>();
                });
            }
            Op::ScaleRows { x, s } => {
                let c = self.nodes[*x].value.cols();
                acc!(*x, |d: &mut [f64]| {
                    for ((row, grow), &sv) in d.chunks_mut(c).zip(g.chunks(c)).zip(val(*s)) {
                        add_assign(row, grow, sv);
                    }
                });
                acc!(*s, |d: &mut [f64]| {
                    for ((o, grow), xrow) in d.iter_mut().zip(g.chunks(c)).zip(val(*x).chunks(c)) {
                        *o += grow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
            }
            Op::SumAll(a) => acc!(*a, |d: &mut [f64]| {
                for o in d.iter_mut() {
                    *o += g[0];
                }
            }),
            Op::Mean(a) => {
                let inv = 1.0 / self.nodes[*a].value.len() as f64;
                acc!(*a, |d: &mut [f64]| {
                    for o in d.iter_mut() {
                        *o += g[0] * inv;
                    }
                });
            }
            Op::Reshape(a) => acc!(*a, |d: &mut [f64]| add_assign(d, g, 1.0)),
        }
    }
}

fn add_assign(dst: &mut [f64], src: &[f64], c: f64) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s * c;
    }
}

fn mul_add_assign(dst: &mut [f64], g: &[f64], other: &[f64]) {
    for ((d, gv), ov) in dst.iter_mut().zip(g).zip(other) {
        *d += gv * ov;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Compare the tape gradient of `f` at `x` against central finite differences.
///
/// `f` builds a scalar expression from the supplied leaf on a fresh tape. The
/// returned value is the worst per-coordinate relative error
/// `|analytic - numeric| / max(|analytic|, |numeric|)`, where differences at
/// or below the 1e-8 absolute floor count as zero (they are within finite
/// difference noise). Non-determinism of `f` is detected by evaluating it
/// twice at `x`.
pub fn finite_difference_check<F>(f: F, x: &Tensor, epsilon: f64) -> f64
where
    F: Fn(&mut Tape, Var) -> Var,
{
    assert!(
        epsilon > 0.0,
        "finite_difference_check: epsilon must be positive"
    );

    let eval = |t: &Tensor| -> f64 {
        let mut tape = Tape::new();
        let v = tape.leaf(t.clone());
        let y = f(&mut tape, v);
        tape.value(y).item()
    };

    let y0 = eval(x);
    let y1 = eval(x);
    assert!(
        y0 == y1,
        "finite_difference_check: non-deterministic function ({y0} vs {y1})"
    );

    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let y = f(&mut tape, v);
    tape.backward(y);
    // A function independent of x has zero gradient everywhere.
    let analytic = tape
        .grad(v)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    #[allow(clippy::needless_range_loop)]
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + epsilon;
        let fp = eval(&probe);
        probe.data_mut()[i] = orig - epsilon;
        let fm = eval(&probe);
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * epsilon);
        let diff = (analytic[i] - numeric).abs();
        if diff <= 1e-8 {
            continue;
        }
        worst = worst.max(diff / analytic[i].abs().max(numeric.abs()));
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::rc::Rc;

    #[test]
    fn segment_softmax_uniform_logits() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.0, 0.0]));
        let y = tape.segment_softmax(x, Rc::new(vec![7, 7]));
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn segment_softmax_hand_case() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![2.0f64.ln(), 0.0]));
        let y = tape.segment_softmax(x, Rc::new(vec![3, 3]));
        let d = tape.value(y).data();
        assert!((d[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((d[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn segment_softmax_singleton_is_one() {
        for s in [-50.0, 0.0, 3.25, 800.0] {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::vector(vec![s]));
            let y = tape.segment_softmax(x, Rc::new(vec![0]));
            assert_eq!(tape.value(y).data(), &[1.0]);
        }
    }

    #[test]
    fn backward_square_and_sigmoid() {
        // d(sum(x*x))/dx = 2x
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![3.0]));
        let sq = tape.mul(x, x);
        let loss = tape.sum_all(sq);
        tape.backward(loss);
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);

        // sigmoid'(0) = 1/4
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(0.0));
        let s = tape.sigmoid(x);
        tape.backward(s);
        assert_eq!(tape.grad(x).unwrap(), &[0.25]);
    }

    #[test]
    #[should_panic(expected = "scalar")]
    fn backward_rejects_vector_loss() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        tape.backward(x);
    }

    #[test]
    #[should_panic(expected = "twice")]
    fn backward_twice_panics() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(1.0));
        let y = tape.mul(x, x);
        tape.backward(y);
        tape.backward(y);
    }

    #[test]
    #[should_panic(expected = "non-finite")]
    fn non_finite_result_panics() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1e308));
        let y = tape.mul(x, x);
        let _ = y;
    }

    #[test]
    fn fd_check_sum_of_squares() {
        let x = Tensor::vector(vec![0.5, -1.25, 2.0, 0.0]);
        let err = finite_difference_check(
            |t, v| {
                let sq = t.mul(v, v);
                t.sum_all(sq)
            },
            &x,
            1e-5,
        );
        assert!(err <= 1e-7, "error {err}");
    }

    #[test]
    fn fd_check_constant_function() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let err = finite_difference_check(
            |t, _v| {
                let c = t.leaf(Tensor::scalar(4.0));
                t.mean(c)
            },
            &x,
            1e-5,
        );
        assert_eq!(err, 0.0);
    }

    #[test]
    #[should_panic(expected = "epsilon")]
    fn fd_check_rejects_zero_epsilon() {
        let x = Tensor::scalar(1.0);
        finite_difference_check(|t, v| t.sum_all(v), &x, 0.0);
    }

    #[test]
    fn fd_check_all_primitives() {
        // One composite expression touching every differentiable primitive.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = Tensor::matrix(4, 6, (0..24).map(|_| rng.random_range(-1.0..1.0)).collect());
        let idx = Rc::new(vec![1usize, 3, 0, 2, 1]);
        let tgt = Rc::new(vec![0usize, 1, 1, 2, 0]);
        let seg = Rc::new(vec![0usize, 0, 1, 1, 1]);
        let w = Tensor::matrix(6, 6, (0..36).map(|_| rng.random_range(-1.0..1.0)).collect());
        let b = Tensor::vector((0..6).map(|_| rng.random_range(-1.0..1.0)).collect());

        let err = finite_difference_check(
            |t, v| {
                let wl = t.leaf(w.clone());
                let bl = t.leaf(b.clone());
                let lin = t.linear(v, wl, bl);
                let g = t.gather_rows(lin, idx.clone());
                let act = t.leaky_relu(g, 0.2);
                let sp = t.softplus(act);
                let sg = t.sigmoid(sp);
                let left = t.slice_cols(sg, 0, 3);
                let right = t.slice_cols(sg, 3, 3);
                let dots = t.row_dot(left, right);
                let att = t.segment_softmax(dots, seg.clone());
                let scaled = t.scale_rows(right, att);
                let cat = t.concat_cols(left, scaled);
                let sc = t.scatter_sum(cat, tgt.clone(), 3);
                let top = t.slice_rows(sc, 0, 2);
                let bot = t.slice_rows(sc, 1, 2);
                let joined = t.concat_rows(top, bot);
                let r = t.relu(joined);
                let a = t.abs(r);
                let p = t.pow_scalar(a, 1.5);
                let sc2 = t.scale(p, 0.7);
                let sh = t.add_scalar(sc2, 0.05);
                let prod = t.mul(sh, sh);
                let diff = t.sub(prod, sh);
                let flat = t.reshape(diff, vec![4 * 6]);
                let m = t.mean(flat);
                let mm_a = t.slice_cols(sc, 0, 3);
                let mm_b = t.slice_cols(sc, 3, 3);
                let mm = t.matmul(mm_a, mm_b);
                let gain = t.slice_rows(dots, 0, 1);
                let gain = t.reshape(gain, vec![]);
                let mm = t.scale_by_scalar(mm, gain);
                let s2 = t.sum_all(mm);
                let s2s = t.scale(s2, 0.01);
                t.add(m, s2s)
            },
            &x,
            1e-5,
        );
        assert!(err <= 1e-4, "worst relative error {err}");
    }

    #[test]
    fn backward_linearity() {
        // grad(a*f + b*g) = a*grad(f) + b*grad(g)
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let xv = Tensor::vector((0..6).map(|_| rng.random_range(-2.0..2.0)).collect());
            let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));

            let grad_of = |scale_f: f64, scale_g: f64, x: &Tensor| -> Vec<f64> {
                let mut t = Tape::new();
                let v = t.param(x.clone());
                let sq = t.mul(v, v);
                let f = t.sum_all(sq);
                let sp = t.softplus(v);
                let g = t.mean(sp);
                let sf = t.scale(f, scale_f);
                let sg = t.scale(g, scale_g);
                let y = t.add(sf, sg);
                t.backward(y);
                t.grad(v).unwrap().to_vec()
            };

            let combined = grad_of(a, b, &xv);
            let gf = grad_of(1.0, 0.0, &xv);
            let gg = grad_of(0.0, 1.0, &xv);
            for i in 0..6 {
                assert!((combined[i] - (a * gf[i] + b * gg[i])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scatter_gather_roundtrip_disjoint() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::matrix(3, 2, vec![1., 2., 3., 4., 5., 6.]));
        let tgt = Rc::new(vec![2usize, 0, 1]);
        let s = tape.scatter_sum(v, tgt.clone(), 3);
        let g = tape.gather_rows(s, tgt);
        assert_eq!(tape.value(g).data(), tape.value(v).data());
    }

    proptest::proptest! {
        #[test]
        fn segment_softmax_positive_and_normalized(
            scores in proptest::collection::vec(-30.0f64..30.0, 1..40),
            seg_of in proptest::collection::vec(0usize..6, 1..40),
        ) {
            let n = scores.len().min(seg_of.len());
            let scores = &scores[..n];
            let segments: Rc<Vec<usize>> = Rc::new(seg_of[..n].to_vec());
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::vector(scores.to_vec()));
            let y = tape.segment_softmax(x, segments.clone());
            let out = tape.value(y).data();
            let mut sums = std::collections::HashMap::new();
            for (i, &s) in segments.iter().enumerate() {
                proptest::prop_assert!(out[i] > 0.0);
                *sums.entry(s).or_insert(0.0) += out[i];
            }
            for (_, sum) in sums {
                proptest::prop_assert!((sum - 1.0).abs() <= 1e-9);
            }
        }
    }
}
