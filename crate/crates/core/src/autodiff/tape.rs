use super::{lit, Array, DiffError, Gradients, Result, Scalar};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub(crate) fn index(self) -> usize {
        self.0
    }
}

/// A recorded primitive. Input handles always refer to earlier tape entries,
/// so tape order is a topological order of the graph.
#[derive(Debug, Clone)]
pub enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// x * c for a compile-time constant c.
    Scale(Var, T),
    /// x * s where s is a recorded scalar (shape `[1]`).
    MulScalar(Var, Var),
    /// `[n,m]` + `[m]`, the bias broadcast over rows.
    AddBias(Var, Var),
    /// out[i,:] = x[i,:] * s[i] for s of shape `[n]`.
    ScaleRows(Var, Var),
    /// out[i,j] = x[i,j] - s[i] for s of shape `[n]`.
    SubRowBroadcast(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize, usize),
    SliceCols(Var, usize, usize),
    /// out[k] = x[map[k]] with `None` entries fixed at zero.
    Gather(Var, Vec<Option<usize>>),
    /// Row lookup into a `[v,d]` table: out[t,:] = table[ids[t],:].
    EmbedRows(Var, Vec<usize>),
    /// Packs shape-`[1]` vars into one `[len]` vector.
    StackScalars(Vec<Var>),
    SoftmaxRows(Var),
    LogSumExpRows(Var),
    LayerNormRows { x: Var, gamma: Var, beta: Var, eps: T },
    /// Per-row L2 norms of a `[n,m]` matrix.
    RowL2Norms(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Recip(Var),
    Abs(Var),
    Powi(Var, i32),
    Gelu(Var),
    MaskedFill { x: Var, mask: Vec<bool>, fill: T },
    SumAll(Var),
    /// For unit-row `h` of shape `[n,d]`: out[a,b] = ||h_b - (h_a . h_b) h_a||.
    /// The rejection vectors are cached for backward only while
    /// n*n*d <= store_budget; above that they are recomputed blockwise.
    PairwiseOrthNorms { h: Var, store_budget: usize },
}

pub(crate) struct Node<T> {
    pub(crate) op: Op<T>,
    pub(crate) value: Array<T>,
    pub(crate) needs_grad: bool,
    /// Op-specific forward state reused by backward (e.g. layer-norm
    /// normalized rows, cached rejection vectors).
    pub(crate) saved: Option<Vec<T>>,
}

/// Eager evaluation trace: values plus the ops that produced them.
pub struct Tape<T: Scalar> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, detail: String) -> DiffError {
    DiffError::ShapeMismatch { op, detail }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Gradients are produced for it iff the array was
    /// marked with [`Array::with_grad`].
    pub fn input(&mut self, value: Array<T>) -> Var {
        let needs_grad = value.requires_grad();
        self.push_node(Op::Leaf, value, needs_grad, None)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, mut value: Array<T>) -> Var {
        value.requires_grad = false;
        self.push_node(Op::Leaf, value, false, None)
    }

    pub fn scalar_const(&mut self, x: T) -> Var {
        self.constant(Array::scalar(x))
    }

    pub fn value(&self, var: Var) -> &Array<T> {
        &self.nodes[var.index()].value
    }

    /// Convenience accessor for shape-`[1]` vars.
    pub fn scalar_value(&self, var: Var) -> T {
        let v = self.value(var);
        debug_assert_eq!(v.numel(), 1, "scalar_value on shape {:?}", v.shape());
        v.data()[0]
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.index()].needs_grad
    }

    fn push_node(&mut self, op: Op<T>, value: Array<T>, needs_grad: bool, saved: Option<Vec<T>>) -> Var {
        self.nodes.push(Node { op, value, needs_grad, saved });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.index()].needs_grad)
    }

    fn record(&mut self, op: Op<T>, name: &'static str) -> Result<Var> {
        let inputs = op_inputs(&op);
        let needs_grad = self.any_grad(&inputs);
        let (value, saved) = eval_op(self, &op)?;
        if !value.is_finite() {
            return Err(DiffError::NonFinite { op: name });
        }
        Ok(self.push_node(op, value, needs_grad, saved))
    }

    // ── elementwise and broadcast ────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        self.record(Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        self.record(Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        self.record(Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        self.record(Op::Scale(a, c), "scale")
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -T::one())
    }

    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(shape_err("mul_scalar", format!("scalar operand has shape {:?}", self.value(s).shape())));
        }
        self.record(Op::MulScalar(a, s), "mul_scalar")
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xs, bs) = (self.value(x).shape().to_vec(), self.value(bias).shape().to_vec());
        if xs.len() != 2 || bs.len() != 1 || xs[1] != bs[0] {
            return Err(shape_err("add_bias", format!("x {:?} vs bias {:?}", xs, bs)));
        }
        self.record(Op::AddBias(x, bias), "add_bias")
    }

    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xs, ss) = (self.value(x).shape().to_vec(), self.value(s).shape().to_vec());
        if xs.len() != 2 || ss.len() != 1 || xs[0] != ss[0] {
            return Err(shape_err("scale_rows", format!("x {:?} vs scale {:?}", xs, ss)));
        }
        self.record(Op::ScaleRows(x, s), "scale_rows")
    }

    pub fn sub_row_broadcast(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xs, ss) = (self.value(x).shape().to_vec(), self.value(s).shape().to_vec());
        if xs.len() != 2 || ss.len() != 1 || xs[0] != ss[0] {
            return Err(shape_err("sub_row_broadcast", format!("x {:?} vs row vector {:?}", xs, ss)));
        }
        self.record(Op::SubRowBroadcast(x, s), "sub_row_broadcast")
    }

    // ── linear algebra and shape ─────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (asp, bsp) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if asp.len() != 2 || bsp.len() != 2 || asp[1] != bsp[0] {
            return Err(shape_err("matmul", format!("{:?} x {:?}", asp, bsp)));
        }
        self.record(Op::MatMul(a, b), "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.value(a).shape().len() != 2 {
            return Err(shape_err("transpose", format!("need matrix, got {:?}", self.value(a).shape())));
        }
        self.record(Op::Transpose(a), "transpose")
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() {
            return Err(shape_err("reshape", format!("{:?} -> {:?}", self.value(a).shape(), shape)));
        }
        let inputs_grad = self.nodes[a.index()].needs_grad;
        let mut value = self.value(a).clone();
        value.shape = shape;
        Ok(self.push_node(Op::Reshape(a), value, inputs_grad, None))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err("concat_cols", "no inputs".into()));
        }
        let rows = self.value(parts[0]).shape().first().copied().unwrap_or(0);
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != 2 || s[0] != rows {
                return Err(shape_err("concat_cols", format!("inconsistent part shape {:?}", s)));
            }
        }
        self.record(Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    pub fn slice_rows(&mut self, a: Var, r0: usize, r1: usize) -> Result<Var> {
        let s = self.value(a).shape().to_vec();
        if s.len() != 2 || r0 >= r1 || r1 > s[0] {
            return Err(shape_err("slice_rows", format!("rows {}..{} of {:?}", r0, r1, s)));
        }
        self.record(Op::SliceRows(a, r0, r1), "slice_rows")
    }

    pub fn slice_cols(&mut self, a: Var, c0: usize, c1: usize) -> Result<Var> {
        let s = self.value(a).shape().to_vec();
        if s.len() != 2 || c0 >= c1 || c1 > s[1] {
            return Err(shape_err("slice_cols", format!("cols {}..{} of {:?}", c0, c1, s)));
        }
        self.record(Op::SliceCols(a, c0, c1), "slice_cols")
    }

    /// Flat-index gather; `None` entries produce zeros. Output is 1-D.
    pub fn gather(&mut self, a: Var, map: Vec<Option<usize>>) -> Result<Var> {
        let n = self.value(a).numel();
        if let Some(bad) = map.iter().flatten().find(|&&i| i >= n) {
            return Err(DiffError::IndexOutOfRange { op: "gather", detail: format!("index {} into {} elements", bad, n) });
        }
        self.record(Op::Gather(a, map), "gather")
    }

    pub fn embed_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.value(table).shape().to_vec();
        if s.len() != 2 {
            return Err(shape_err("embed_rows", format!("table must be a matrix, got {:?}", s)));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= s[0]) {
            return Err(DiffError::IndexOutOfRange { op: "embed_rows", detail: format!("row {} of {}", bad, s[0]) });
        }
        self.record(Op::EmbedRows(table, ids.to_vec()), "embed_rows")
    }

    pub fn stack_scalars(&mut self, parts: &[Var]) -> Result<Var> {
        for &p in parts {
            if self.value(p).numel() != 1 {
                return Err(shape_err("stack_scalars", format!("non-scalar part {:?}", self.value(p).shape())));
            }
        }
        self.record(Op::StackScalars(parts.to_vec()), "stack_scalars")
    }

    // ── reductions and nonlinearities ────────────────────────────────────

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.need_matrix("softmax_rows", a)?;
        self.record(Op::SoftmaxRows(a), "softmax_rows")
    }

    /// Row-wise log-sum-exp with max subtraction; `[n,m] -> [n]`.
    pub fn log_sum_exp_rows(&mut self, a: Var) -> Result<Var> {
        self.need_matrix("log_sum_exp_rows", a)?;
        self.record(Op::LogSumExpRows(a), "log_sum_exp_rows")
    }

    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (xs, gs, bs) = (
            self.value(x).shape().to_vec(),
            self.value(gamma).shape().to_vec(),
            self.value(beta).shape().to_vec(),
        );
        if xs.len() != 2 || gs != vec![xs[1]] || bs != vec![xs[1]] {
            return Err(shape_err("layer_norm_rows", format!("x {:?} gamma {:?} beta {:?}", xs, gs, bs)));
        }
        self.record(Op::LayerNormRows { x, gamma, beta, eps }, "layer_norm_rows")
    }

    pub fn row_l2_norms(&mut self, a: Var) -> Result<Var> {
        self.need_matrix("row_l2_norms", a)?;
        self.record(Op::RowL2Norms(a), "row_l2_norms")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Exp(a), "exp")
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Ln(a), "ln")
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Sqrt(a), "sqrt")
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Recip(a), "recip")
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Abs(a), "abs")
    }

    pub fn powi(&mut self, a: Var, k: i32) -> Result<Var> {
        self.record(Op::Powi(a, k), "powi")
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Gelu(a), "gelu")
    }

    pub fn masked_fill(&mut self, x: Var, mask: Vec<bool>, fill: T) -> Result<Var> {
        if mask.len() != self.value(x).numel() {
            return Err(shape_err("masked_fill", format!("mask length {} vs {} elements", mask.len(), self.value(x).numel())));
        }
        self.record(Op::MaskedFill { x, mask, fill }, "masked_fill")
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        self.record(Op::SumAll(a), "sum_all")
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let s = self.sum_all(a)?;
        self.scale(s, T::one() / lit(n as f64))
    }

    /// Dot product of two 1-D vectors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        self.sum_all(p)
    }

    pub fn pairwise_orth_norms(&mut self, h: Var, store_budget: usize) -> Result<Var> {
        self.need_matrix("pairwise_orth_norms", h)?;
        self.record(Op::PairwiseOrthNorms { h, store_budget }, "pairwise_orth_norms")
    }

    fn need_matrix(&self, op: &'static str, a: Var) -> Result<()> {
        if self.value(a).shape().len() != 2 {
            return Err(shape_err(op, format!("need matrix, got {:?}", self.value(a).shape())));
        }
        Ok(())
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape())));
        }
        Ok(())
    }

    /// Re-evaluates every recorded op from the leaves and checks that the
    /// recomputed values match the recorded ones bit for bit.
    pub fn replay_matches(&self) -> Result<bool> {
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            if let Op::Reshape(src) = node.op {
                let src_val = &self.nodes[src.index()].value;
                if src_val.data() != node.value.data() {
                    return Ok(false);
                }
                continue;
            }
            let (value, _) = eval_op(self, &self.nodes[i].op)?;
            if value.shape() != node.value.shape() {
                return Ok(false);
            }
            let same = value
                .data()
                .iter()
                .zip(node.value.data())
                .all(|(x, y)| x.to_f64().unwrap().to_bits() == y.to_f64().unwrap().to_bits());
            if !same {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Reverse-mode gradients of a scalar `out` w.r.t. every `requires_grad`
    /// leaf. See `backward.rs` for the per-op adjoint rules.
    pub fn backward(&self, out: Var) -> Result<Gradients<T>> {
        super::backward::run(self, out)
    }
}

pub(crate) fn op_inputs<T>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MulScalar(a, b) | Op::MatMul(a, b) => vec![*a, *b],
        Op::AddBias(a, b) | Op::ScaleRows(a, b) | Op::SubRowBroadcast(a, b) => vec![*a, *b],
        Op::Scale(a, _) | Op::Powi(a, _) => vec![*a],
        Op::Transpose(a)
        | Op::Reshape(a)
        | Op::SliceRows(a, _, _)
        | Op::SliceCols(a, _, _)
        | Op::Gather(a, _)
        | Op::EmbedRows(a, _)
        | Op::SoftmaxRows(a)
        | Op::LogSumExpRows(a)
        | Op::RowL2Norms(a)
        | Op::Exp(a)
        | Op::Ln(a)
        | Op::Sqrt(a)
        | Op::Recip(a)
        | Op::Abs(a)
        | Op::Gelu(a)
        | Op::SumAll(a) => vec![*a],
        Op::ConcatCols(parts) | Op::StackScalars(parts) => parts.clone(),
        Op::LayerNormRows { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::MaskedFill { x, .. } => vec![*x],
        Op::PairwiseOrthNorms { h, .. } => vec![*h],
    }
}

/// Cache-friendly `[m,k] x [k,n]` multiply (ikj order).
pub(crate) fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj += av * bj;
            }
        }
    }
    c
}

pub(crate) fn transpose_raw<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut t = vec![T::zero(); a.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

const GELU_C0: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C1: f64 = 0.044_715;

pub(crate) fn gelu_forward<T: Scalar>(x: T) -> T {
    let c0: T = lit(GELU_C0);
    let c1: T = lit(GELU_C1);
    let half: T = lit(0.5);
    let inner = c0 * (x + c1 * x * x * x);
    half * x * (T::one() + inner.tanh())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c0: T = lit(GELU_C0);
    let c1: T = lit(GELU_C1);
    let half: T = lit(0.5);
    let three: T = lit(3.0);
    let t = (c0 * (x + c1 * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c0 * (T::one() + three * c1 * x * x)
}

/// Forward evaluation of one op against already-recorded inputs.
/// Returns the value plus any state saved for backward.
#[allow(clippy::type_complexity)]
pub(crate) fn eval_op<T: Scalar>(tape: &Tape<T>, op: &Op<T>) -> Result<(Array<T>, Option<Vec<T>>)> {
    let val = |v: &Var| &tape.nodes[v.index()].value;
    let out = match op {
        Op::Leaf => unreachable!("leaves are recorded directly"),
        Op::Add(a, b) => {
            let (a, b) = (val(a), val(b));
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
            (Array { shape: a.shape.clone(), data, requires_grad: false }, None)
        }
        Op::Sub(a, b) => {
            let (a, b) = (val(a), val(b));
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x - y).collect();
            (Array { shape: a.shape.clone(), data, requires_grad: false }, None)
        }
        Op::Mul(a, b) => {
            let (a, b) = (val(a), val(b));
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
            (Array { shape: a.shape.clone(), data, requires_grad: false }, None)
        }
        Op::Scale(a, c) => {
            let a = val(a);
            let data = a.data().iter().map(|&x| x * *c).collect();
            (Array { shape: a.shape.clone(), data, requires_grad: false }, None)
        }
        Op::MulScalar(a, s) => {
            let (a, s) = (val(a), val(s).data()[0]);
            let data = a.data().iter().map(|&x| x * s).collect();
            (Array { shape: a.shape.clone(), data, requires_grad: false }, None)
        }
        Op::AddBias(x, b) => {
            let (x, b) = (val(x), val(b));
            let (n, m) = (x.rows(), x.cols());
            let mut data = x.data().to_vec();
            for i in 0..n {
                for (d, &bv) in data[i * m..(i + 1) * m].iter_mut().zip(b.data()) {
                    *d += bv;
                }
            }
            (Array { shape: x.shape.clone(), data, requires_grad: false }, None)
        }
        Op::ScaleRows(x, s) => {
            let (x, s) = (val(x), val(s));
            let (n, m) = (x.rows(), x.cols());
            let mut data = x.data().to_vec();
            for i in 0..n {
                let si = s.data()[i];
                for d in &mut data[i * m..(i + 1) * m] {
                    *d = *d * si;
                }
            }
            (Array { shape: x.shape.clone(), data, requires_grad: false }, None)
        }
        Op::SubRowBroadcast(x, s) => {
            let (x, s) = (val(x), val(s));
            let (n, m) = (x.rows(), x.cols());
            let mut data = x.data().to_vec();
            for i in 0..n {
                let si = s.data()[i];
                for d in &mut data[i * m..(i + 1) * m] {
                    *d = *d - si;
                }
            }
            (Array { shape: x.shape.clone(), data, requires_grad: false }, None)
        }
        Op::MatMul(a, b) => {
            let (a, b) = (val(a), val(b));
            let (m, k, n) = (a.rows(), a.cols(), b.cols());
            let data = matmul_raw(a.data(), b.data(), m, k, n);
            (Array { shape: vec![m, n], data, requires_grad: false }, None)
        }
        Op::Transpose(a) => {
            let a = val(a);
            let data = transpose_raw(a.data(), a.rows(), a.cols());
            (Array { shape: vec![a.cols(), a.rows()], data, requires_grad: false }, None)
        }
        Op::Reshape(a) => {
            // Shape is attached at record time; replay only checks data.
            (val(a).clone(), None)
        }
        Op::ConcatCols(parts) => {
            let rows = val(&parts[0]).rows();
            let total: usize = parts.iter().map(|p| val(p).cols()).sum();
            let mut data = vec![T::zero(); rows * total];
            let mut off = 0;
            for p in parts {
                let pv = val(p);
                let pc = pv.cols();
                for i in 0..rows {
                    data[i * total + off..i * total + off + pc].copy_from_slice(&pv.data()[i * pc..(i + 1) * pc]);
                }
                off += pc;
            }
            (Array { shape: vec![rows, total], data, requires_grad: false }, None)
        }
        Op::SliceRows(a, r0, r1) => {
            let a = val(a);
            let m = a.cols();
            let data = a.data()[r0 * m..r1 * m].to_vec();
            (Array { shape: vec![r1 - r0, m], data, requires_grad: false }, None)
        }
        Op::SliceCols(a, c0, c1) => {
            let a = val(a);
            let (n, m) = (a.rows(), a.cols());
            let w = c1 - c0;
            let mut data = vec![T::zero(); n * w];
            for i in 0..n {
                data[i * w..(i + 1) * w].copy_from_slice(&a.data()[i * m + c0..i * m + c1]);
            }
            (Array { shape: vec![n, w], data, requires_grad: false }, None)
        }
        Op::Gather(a, map) => {
            let a = val(a);
            let data = map.iter().map(|idx| idx.map_or(T::zero(), |i| a.data()[i])).collect();
            (Array { shape: vec![map.len()], data, requires_grad: false }, None)
        }
        Op::EmbedRows(table, ids) => {
            let t = val(table);
            let d = t.cols();
            let mut data = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                data.extend_from_slice(&t.data()[id * d..(id + 1) * d]);
            }
            (Array { shape: vec![ids.len(), d], data, requires_grad: false }, None)
        }
        Op::StackScalars(parts) => {
            let data = parts.iter().map(|p| val(p).data()[0]).collect();
            (Array { shape: vec![parts.len()], data, requires_grad: false }, None)
        }
        Op::SoftmaxRows(a) => {
            let a = val(a);
            let (n, m) = (a.rows(), a.cols());
            let mut data = vec![T::zero(); n * m];
            for i in 0..n {
                let row = &a.data()[i * m..(i + 1) * m];
                let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
                let mut denom = T::zero();
                for j in 0..m {
                    let e = (row[j] - max).exp();
                    data[i * m + j] = e;
                    denom += e;
                }
                for d in &mut data[i * m..(i + 1) * m] {
                    *d = *d / denom;
                }
            }
            (Array { shape: a.shape.clone(), data, requires_grad: false }, None)
        }
        Op::LogSumExpRows(a) => {
            let a = val(a);
            let (n, m) = (a.rows(), a.cols());
            let mut data = vec![T::zero(); n];
            for i in 0..n {
                let row = &a.data()[i * m..(i + 1) * m];
                let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
                let sum: T = row.iter().map(|&x| (x - max).exp()).sum();
                data[i] = max + sum.ln();
            }
            (Array { shape: vec![n], data, requires_grad: false }, None)
        }
        Op::LayerNormRows { x, gamma, beta, eps } => {
            let (x, g, b) = (val(x), val(gamma), val(beta));
            let (n, m) = (x.rows(), x.cols());
            let minv = T::one() / lit(m as f64);
            let mut data = vec![T::zero(); n * m];
            // saved = [xhat (n*m) | rstd (n)]
            let mut saved = vec![T::zero(); n * m + n];
            for i in 0..n {
                let row = &x.data()[i * m..(i + 1) * m];
                let mean: T = row.iter().cloned().sum::<T>() * minv;
                let var: T = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * minv;
                let rstd = T::one() / (var + *eps).sqrt();
                saved[n * m + i] = rstd;
                for j in 0..m {
                    let xh = (row[j] - mean) * rstd;
                    saved[i * m + j] = xh;
                    data[i * m + j] = g.data()[j] * xh + b.data()[j];
                }
            }
            (Array { shape: x.shape.clone(), data, requires_grad: false }, Some(saved))
        }
        Op::RowL2Norms(a) => {
            let a = val(a);
            let (n, m) = (a.rows(), a.cols());
            let mut data = vec![T::zero(); n];
            for i in 0..n {
                let row = &a.data()[i * m..(i + 1) * m];
                data[i] = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            }
            (Array { shape: vec![n], data, requires_grad: false }, None)
        }
        Op::Exp(a) => unary(val(a), |x| x.exp()),
        Op::Ln(a) => unary(val(a), |x| x.ln()),
        Op::Sqrt(a) => unary(val(a), |x| x.sqrt()),
        Op::Recip(a) => unary(val(a), |x| T::one() / x),
        Op::Abs(a) => unary(val(a), |x| x.abs()),
        Op::Powi(a, k) => unary(val(a), |x| x.powi(*k)),
        Op::Gelu(a) => unary(val(a), gelu_forward),
        Op::MaskedFill { x, mask, fill } => {
            let x = val(x);
            let data = x.data().iter().zip(mask).map(|(&v, &keep)| if keep { v } else { *fill }).collect();
            (Array { shape: x.shape.clone(), data, requires_grad: false }, None)
        }
        Op::SumAll(a) => {
            let s: T = val(a).data().iter().cloned().sum();
            (Array::scalar(s), None)
        }
        Op::PairwiseOrthNorms { h, store_budget } => {
            let h = val(h);
            let (n, d) = (h.rows(), h.cols());
            let store = n * n * d <= *store_budget;
            let mut saved = if store { vec![T::zero(); n * n * d] } else { Vec::new() };
            let mut data = vec![T::zero(); n * n];
            for a in 0..n {
                let ha = &h.data()[a * d..(a + 1) * d];
                for b in 0..n {
                    if a == b {
                        continue;
                    }
                    let hb = &h.data()[b * d..(b + 1) * d];
                    let g: T = ha.iter().zip(hb).map(|(&x, &y)| x * y).sum();
                    let mut sq = T::zero();
                    if store {
                        let slot = &mut saved[(a * n + b) * d..(a * n + b + 1) * d];
                        for j in 0..d {
                            let o = hb[j] - g * ha[j];
                            slot[j] = o;
                            sq += o * o;
                        }
                    } else {
                        for j in 0..d {
                            let o = hb[j] - g * ha[j];
                            sq += o * o;
                        }
                    }
                    data[a * n + b] = sq.sqrt();
                }
            }
            (Array { shape: vec![n, n], data, requires_grad: false }, if store { Some(saved) } else { None })
        }
    };
    Ok(out)
}

fn unary<T: Scalar>(a: &Array<T>, f: impl Fn(T) -> T) -> (Array<T>, Option<Vec<T>>) {
    let data = a.data().iter().map(|&x| f(x)).collect();
    (Array { shape: a.shape.clone(), data, requires_grad: false }, None)
}
