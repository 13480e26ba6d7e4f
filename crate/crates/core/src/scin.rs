//! Span Contextual Independence (SCIN) scores.
//!
//! For L2-normalized prefix states h_1..h_n, the score of span (i, j) is
//!
//! ```text
//! scin(i, j) = ||orth(h_j, h_{i-1})|| + ||orth(h_{j+1}, h_j)||
//! orth(x, y) = x - (x . y) y
//! ```
//!
//! with the first term dropped at i = 1 and the second at j = n, so the
//! whole-sentence span always scores 0. Charts come in two differentiable
//! flavors: a naive double loop over generic tape ops, and a vectorized path
//! built on the fused pairwise-rejection-norm kernel.

use crate::autodiff::{Array, DiffError, Scalar, Tape, Var};

/// Elements cached by the vectorized kernel for backward; above this the
/// rejection vectors are recomputed blockwise instead of materialized.
pub const DEFAULT_ORTH_BUDGET: usize = 1 << 22;

/// Row norms may drift this far from 1 before inputs are rejected.
pub const UNIT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScinError {
    #[error("row {row} is degenerate (norm {norm:.3e})")]
    DegenerateRow { row: usize, norm: f64 },
    #[error("vector is not unit length (norm {norm})")]
    NotUnit { norm: f64 },
    #[error("vectors have different lengths: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("hidden states must be L2-normalized rows (row {row} has norm {norm})")]
    NotNormalized { row: usize, norm: f64 },
    #[error("chart index ({i},{j}) out of range for n={n}")]
    BadSpan { i: usize, j: usize, n: usize },
    #[error(transparent)]
    Diff(#[from] DiffError),
}

pub type Result<V> = std::result::Result<V, ScinError>;

/// Which chart implementation to run; both are differentiable and must agree.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChartMode {
    Naive,
    Vectorized,
}

/// Unit-row prefix representations, one row per token prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates {
    n: usize,
    d: usize,
    data: Vec<f64>,
}

impl HiddenStates {
    /// Wraps rows that are already unit length (within [`UNIT_TOL`]).
    pub fn from_unit_rows(n: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        assert_eq!(data.len(), n * d, "data length must be n*d");
        for row in 0..n {
            let norm = l2(&data[row * d..(row + 1) * d]);
            if (norm - 1.0).abs() > UNIT_TOL {
                return Err(ScinError::NotNormalized { row: row + 1, norm });
            }
        }
        Ok(HiddenStates { n, d, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.data[(j - 1) * self.d..j * self.d]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_array(&self) -> Array<f64> {
        Array::new(vec![self.n, self.d], self.data.clone()).unwrap()
    }
}

/// Dense upper-triangular chart of per-span scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScinChart {
    n: usize,
    data: Vec<f64>,
}

impl ScinChart {
    /// Wraps a flat row-major n x n score matrix.
    pub fn from_flat(n: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n * n);
        ScinChart { n, data }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Score of span (i, j), 1-based, i <= j.
    pub fn score(&self, i: usize, j: usize) -> f64 {
        assert!(i >= 1 && i <= j && j <= self.n, "span ({i},{j}) out of range for n={}", self.n);
        self.data[(i - 1) * self.n + (j - 1)]
    }

    pub fn flat(&self) -> &[f64] {
        &self.data
    }

    /// Applies `x -> a*x + b` to every entry; used by invariance tests and
    /// probe experiments.
    pub fn affine(&self, a: f64, b: f64) -> ScinChart {
        ScinChart { n: self.n, data: self.data.iter().map(|v| a * v + b).collect() }
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

// ── plain operations ─────────────────────────────────────────────────────

/// Divides each row by its L2 norm. Zero rows are an error.
pub fn normalize_rows(n: usize, d: usize, raw: &[f64]) -> Result<HiddenStates> {
    assert_eq!(raw.len(), n * d, "data length must be n*d");
    let mut data = raw.to_vec();
    for row in 0..n {
        let slice = &mut data[row * d..(row + 1) * d];
        let norm = l2(slice);
        if norm == 0.0 || !norm.is_finite() {
            return Err(ScinError::DegenerateRow { row: row + 1, norm });
        }
        for v in slice {
            *v /= norm;
        }
    }
    Ok(HiddenStates { n, d, data })
}

/// orth(x, y) = x - (x . y) y for unit vectors; the result is orthogonal
/// to y.
pub fn orthogonal_component(x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    if x.len() != y.len() {
        return Err(ScinError::DimMismatch(x.len(), y.len()));
    }
    for v in [x, y] {
        let norm = l2(v);
        if (norm - 1.0).abs() > UNIT_TOL {
            return Err(ScinError::NotUnit { norm });
        }
    }
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    Ok(x.iter().zip(y).map(|(a, b)| a - dot * b).collect())
}

/// SCIN chart over plain hidden states.
pub fn scin_chart(h: &HiddenStates, mode: ChartMode) -> Result<ScinChart> {
    let mut tape = Tape::new();
    let hv = tape.input(h.to_array());
    let chart = chart_var(&mut tape, hv, mode)?;
    Ok(ScinChart::from_flat(h.n(), tape.value(chart).data().to_vec()))
}

/// Cosine ablation chart: each rejection-norm term is replaced by the
/// negated absolute cosine of the same vector pair.
pub fn cosine_chart(h: &HiddenStates) -> Result<ScinChart> {
    let mut tape = Tape::new();
    let hv = tape.input(h.to_array());
    let chart = cosine_chart_var(&mut tape, hv)?;
    Ok(ScinChart::from_flat(h.n(), tape.value(chart).data().to_vec()))
}

// ── tape operations ──────────────────────────────────────────────────────

/// Row normalization on the tape; gradients flow through the norms.
pub fn normalize_rows_var<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let value = tape.value(x);
    let (n, d) = (value.rows(), value.cols());
    for row in 0..n {
        let norm = value.data()[row * d..(row + 1) * d]
            .iter()
            .map(|v| v.to_f64().unwrap().powi(2))
            .sum::<f64>()
            .sqrt();
        if norm == 0.0 {
            return Err(ScinError::DegenerateRow { row: row + 1, norm });
        }
    }
    let norms = tape.row_l2_norms(x)?;
    let inv = tape.recip(norms)?;
    Ok(tape.scale_rows(x, inv)?)
}

fn check_normalized<T: Scalar>(tape: &Tape<T>, h: Var) -> Result<(usize, usize)> {
    let value = tape.value(h);
    let (n, d) = (value.rows(), value.cols());
    for row in 0..n {
        let norm = value.data()[row * d..(row + 1) * d]
            .iter()
            .map(|v| v.to_f64().unwrap().powi(2))
            .sum::<f64>()
            .sqrt();
        if (norm - 1.0).abs() > UNIT_TOL {
            return Err(ScinError::NotNormalized { row: row + 1, norm });
        }
    }
    Ok((n, d))
}

/// Differentiable SCIN chart of shape `[n, n]` (upper triangle meaningful).
pub fn chart_var<T: Scalar>(tape: &mut Tape<T>, h: Var, mode: ChartMode) -> Result<Var> {
    chart_var_with_budget(tape, h, mode, DEFAULT_ORTH_BUDGET)
}

pub fn chart_var_with_budget<T: Scalar>(tape: &mut Tape<T>, h: Var, mode: ChartMode, budget: usize) -> Result<Var> {
    let (n, _) = check_normalized(tape, h)?;
    match mode {
        ChartMode::Naive => naive_chart_var(tape, h, n),
        ChartMode::Vectorized => {
            let p = tape.pairwise_orth_norms(h, budget)?;
            assemble_from_pair_matrix(tape, p, n)
        }
    }
}

/// Reference chart: a scalar double loop over spans, each rejection norm
/// built from generic slice/dot/subtract ops.
fn naive_chart_var<T: Scalar>(tape: &mut Tape<T>, h: Var, n: usize) -> Result<Var> {
    let zero = tape.scalar_const(T::zero());
    // ||orth(h_b, h_a)|| as a scalar var, rows 1-based
    let orth_norm = |tape: &mut Tape<T>, b: usize, a: usize| -> Result<Var> {
        let x = tape.slice_rows(h, b - 1, b)?;
        let y = tape.slice_rows(h, a - 1, a)?;
        let prod = tape.mul(x, y)?;
        let dot = tape.sum_all(prod)?;
        let proj = tape.mul_scalar(y, dot)?;
        let rej = tape.sub(x, proj)?;
        Ok(tape.row_l2_norms(rej)?)
    };
    // the suffix term depends only on j; compute each once
    let mut suffix = vec![zero; n + 1];
    for (j, slot) in suffix.iter_mut().enumerate().take(n).skip(1) {
        *slot = orth_norm(tape, j + 1, j)?;
    }
    let mut entries = Vec::with_capacity(n * n);
    for i in 1..=n {
        for j in 1..=n {
            if i > j {
                entries.push(zero);
                continue;
            }
            let left = if i >= 2 { Some(orth_norm(tape, j, i - 1)?) } else { None };
            let right = if j < n { Some(suffix[j]) } else { None };
            let entry = match (left, right) {
                (Some(l), Some(r)) => tape.add(l, r)?,
                (Some(l), None) => l,
                (None, Some(r)) => r,
                (None, None) => zero,
            };
            entries.push(entry);
        }
    }
    let flat = tape.stack_scalars(&entries)?;
    Ok(tape.reshape(flat, vec![n, n])?)
}

/// Chart assembly from the `[n, n]` pairwise rejection-norm matrix
/// P\[a,b\] = ||orth(h_b, h_a)|| (0-based): entry (i, j) reads P at
/// (i-1, j) and (j, j+1), with out-of-range terms fixed at zero.
fn assemble_from_pair_matrix<T: Scalar>(tape: &mut Tape<T>, p: Var, n: usize) -> Result<Var> {
    let mut left_map = Vec::with_capacity(n * n);
    let mut right_map = Vec::with_capacity(n * n);
    for i in 1..=n {
        for j in 1..=n {
            let in_tri = i <= j;
            left_map.push(if in_tri && i >= 2 { Some((i - 2) * n + (j - 1)) } else { None });
            right_map.push(if in_tri && j < n { Some((j - 1) * n + j) } else { None });
        }
    }
    let left = tape.gather(p, left_map)?;
    let right = tape.gather(p, right_map)?;
    let sum = tape.add(left, right)?;
    Ok(tape.reshape(sum, vec![n, n])?)
}

/// Differentiable cosine ablation chart.
pub fn cosine_chart_var<T: Scalar>(tape: &mut Tape<T>, h: Var) -> Result<Var> {
    let (n, _) = check_normalized(tape, h)?;
    let ht = tape.transpose(h)?;
    let gram = tape.matmul(h, ht)?;
    let mag = tape.abs(gram)?;
    let neg = tape.neg(mag)?;
    assemble_from_pair_matrix(tape, neg, n)
}
