//! The tree-regularization loss: softmax cross-entropy over split scores,
//! summed over gold constituents, plus the combined training objective.
//!
//! For constituent (i, j) split at p, the split scores are
//! `s(i,q,j) = chart(i,q) + chart(q+1,j)` for `q in [i, j-1]` and the span
//! loss is `logsumexp_q s(i,q,j) - s(i,p,j)`. Length-2 spans have a single
//! possible split, so their loss is identically zero and the traversal
//! skips them.

use std::collections::BTreeMap;

use crate::autodiff::{DiffError, Scalar, Tape, Var};
use crate::scin::ScinChart;
use crate::treebank::{ParseTree, Span};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RegLossError {
    #[error("invalid span ({i},{j}) for chart of size {n}")]
    BadSpan { i: usize, j: usize, n: usize },
    #[error("split {p} outside [{i}, {})", j)]
    BadSplit { i: usize, j: usize, p: usize },
    #[error("chart covers {0} tokens but tree covers {1}")]
    SizeMismatch(usize, usize),
    #[error("non-finite loss input")]
    NonFinite,
    #[error(transparent)]
    Diff(#[from] DiffError),
}

pub type Result<V> = std::result::Result<V, RegLossError>;

/// Scores for every split of one span; `scores[q - i]` is s(i, q, j).
#[derive(Debug, Clone, PartialEq)]
pub struct SplitScores {
    pub span: Span,
    pub scores: Vec<f64>,
}

/// Total loss plus the per-span contributions of length >= 3 constituents
/// (length-2 spans are identically zero and omitted).
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub per_span: BTreeMap<Span, f64>,
}

fn check_span(chart: &ScinChart, i: usize, j: usize) -> Result<()> {
    if i < 1 || i >= j || j > chart.n() {
        return Err(RegLossError::BadSpan { i, j, n: chart.n() });
    }
    Ok(())
}

/// Split scores of span (i, j); requires i < j.
pub fn split_scores(chart: &ScinChart, i: usize, j: usize) -> Result<SplitScores> {
    check_span(chart, i, j)?;
    let scores = (i..j).map(|q| chart.score(i, q) + chart.score(q + 1, j)).collect();
    Ok(SplitScores { span: (i, j), scores })
}

/// Log loss of span (i, j) against gold split p, computed with max
/// subtraction. Always >= 0; exactly 0 for length-2 spans.
pub fn span_loss(chart: &ScinChart, i: usize, j: usize, p: usize) -> Result<f64> {
    if p < i || p >= j {
        return Err(RegLossError::BadSplit { i, j, p });
    }
    let ss = split_scores(chart, i, j)?;
    Ok(log_loss(&ss.scores, p - i))
}

fn log_loss(scores: &[f64], gold: usize) -> f64 {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = scores.iter().map(|s| (s - max).exp()).sum();
    max + sum.ln() - scores[gold]
}

/// Top-down recursive loss over all constituents of the gold tree.
pub fn treereg_loss(chart: &ScinChart, tree: &ParseTree) -> Result<LossBreakdown> {
    if chart.n() != tree.n() {
        return Err(RegLossError::SizeMismatch(chart.n(), tree.n()));
    }
    let mut breakdown = LossBreakdown { total: 0.0, per_span: BTreeMap::new() };
    recurse(chart, tree, 1, tree.n(), &mut breakdown)?;
    Ok(breakdown)
}

fn recurse(chart: &ScinChart, tree: &ParseTree, i: usize, j: usize, out: &mut LossBreakdown) -> Result<()> {
    if j - i < 1 {
        return Ok(());
    }
    let p = tree.split_of((i, j)).ok_or(RegLossError::BadSpan { i, j, n: tree.n() })?;
    if j - i >= 2 {
        let l = span_loss(chart, i, j, p)?;
        out.per_span.insert((i, j), l);
        out.total += l;
    }
    recurse(chart, tree, i, p, out)?;
    recurse(chart, tree, p + 1, j, out)
}

/// Training objective `lm + alpha * tr`.
pub fn combined_loss(lm_loss: f64, tr_loss: f64, alpha: f64) -> Result<f64> {
    if !lm_loss.is_finite() || !tr_loss.is_finite() || !alpha.is_finite() || alpha < 0.0 {
        return Err(RegLossError::NonFinite);
    }
    Ok(lm_loss + alpha * tr_loss)
}

// ── tape versions ────────────────────────────────────────────────────────

/// Differentiable span loss over a `[n, n]` chart var.
pub fn span_loss_var<T: Scalar>(tape: &mut Tape<T>, chart: Var, n: usize, i: usize, j: usize, p: usize) -> Result<Var> {
    if i < 1 || i >= j || j > n {
        return Err(RegLossError::BadSpan { i, j, n });
    }
    if p < i || p >= j {
        return Err(RegLossError::BadSplit { i, j, p });
    }
    let left: Vec<Option<usize>> = (i..j).map(|q| Some((i - 1) * n + (q - 1))).collect();
    let right: Vec<Option<usize>> = (i..j).map(|q| Some(q * n + (j - 1))).collect();
    let l = tape.gather(chart, left)?;
    let r = tape.gather(chart, right)?;
    let scores = tape.add(l, r)?;
    let wide = tape.reshape(scores, vec![1, j - i])?;
    let lse = tape.log_sum_exp_rows(wide)?;
    let gold = tape.gather(scores, vec![Some(p - i)])?;
    Ok(tape.sub(lse, gold)?)
}

/// Differentiable total loss via the same recursive traversal as
/// [`treereg_loss`]; returns a scalar var (zero constant when the tree has
/// no span of length >= 3).
pub fn treereg_loss_var<T: Scalar>(tape: &mut Tape<T>, chart: Var, tree: &ParseTree) -> Result<Var> {
    let n = tree.n();
    let chart_shape = tape.value(chart).shape().to_vec();
    if chart_shape != vec![n, n] {
        return Err(RegLossError::SizeMismatch(chart_shape.first().copied().unwrap_or(0), n));
    }
    let mut terms = Vec::new();
    let mut stack = vec![(1usize, n)];
    while let Some((i, j)) = stack.pop() {
        if j - i < 1 {
            continue;
        }
        let p = tree.split_of((i, j)).ok_or(RegLossError::BadSpan { i, j, n })?;
        if j - i >= 2 {
            terms.push(span_loss_var(tape, chart, n, i, j, p)?);
        }
        stack.push((i, p));
        stack.push((p + 1, j));
    }
    if terms.is_empty() {
        return Ok(tape.scalar_const(T::zero()));
    }
    let stacked = tape.stack_scalars(&terms)?;
    Ok(tape.sum_all(stacked)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{check, Array};
    use crate::scin::{self, ChartMode};
    use crate::treebank::random_tree;

    fn pseudo(seed: u64) -> impl FnMut() -> f64 {
        let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15) | 1;
        move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64
        }
    }

    fn random_chart(n: usize, seed: u64) -> ScinChart {
        let mut next = pseudo(seed);
        ScinChart::from_flat(n, (0..n * n).map(|_| next() * 2.0).collect())
    }

    #[test]
    fn split_scores_single_split() {
        let chart = random_chart(4, 1);
        let ss = split_scores(&chart, 2, 3).unwrap();
        assert_eq!(ss.scores.len(), 1);
        assert!((ss.scores[0] - (chart.score(2, 2) + chart.score(3, 3))).abs() < 1e-15);
    }

    #[test]
    fn split_scores_zero_chart() {
        let chart = ScinChart::from_flat(5, vec![0.0; 25]);
        let ss = split_scores(&chart, 1, 5).unwrap();
        assert_eq!(ss.scores, vec![0.0; 4]);
    }

    #[test]
    fn split_scores_hand_summation() {
        let chart = random_chart(5, 7);
        let ss = split_scores(&chart, 2, 4).unwrap();
        let want = [
            chart.score(2, 2) + chart.score(3, 4),
            chart.score(2, 3) + chart.score(4, 4),
        ];
        assert_eq!(ss.scores.len(), 2);
        for (got, want) in ss.scores.iter().zip(want) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn split_scores_rejects_degenerate_span() {
        let chart = random_chart(4, 2);
        assert!(matches!(split_scores(&chart, 3, 3), Err(RegLossError::BadSpan { .. })));
        assert!(matches!(split_scores(&chart, 3, 2), Err(RegLossError::BadSpan { .. })));
    }

    #[test]
    fn span_loss_length_two_is_exactly_zero() {
        for seed in 0..10 {
            let chart = random_chart(6, seed);
            assert_eq!(span_loss(&chart, 3, 4, 3).unwrap(), 0.0);
        }
    }

    #[test]
    fn span_loss_uniform_scores_is_ln_m() {
        let chart = ScinChart::from_flat(6, vec![0.25; 36]);
        for p in 1..=4 {
            let l = span_loss(&chart, 1, 5, p).unwrap();
            assert!((l - 4f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn span_loss_matches_softmax_cross_entropy_oracle() {
        let chart = random_chart(5, 99);
        let got = span_loss(&chart, 1, 4, 2).unwrap();
        // direct oracle: -log softmax(scores)[gold]
        let scores: Vec<f64> = (1..4).map(|q| chart.score(1, q) + chart.score(q + 1, 4)).collect();
        let denom: f64 = scores.iter().map(|s| s.exp()).sum();
        let want = -(scores[1].exp() / denom).ln();
        assert!((got - want).abs() < 1e-10);
    }

    #[test]
    fn span_loss_non_negative() {
        for seed in 0..100 {
            let chart = random_chart(7, seed);
            for p in 2..=5 {
                assert!(span_loss(&chart, 2, 6, p).unwrap() >= 0.0);
            }
        }
    }

    #[test]
    fn span_loss_shift_invariant() {
        for seed in 0..50 {
            let chart = random_chart(6, seed);
            let shifted = chart.affine(1.0, 3.7);
            for p in 1..=4 {
                let a = span_loss(&chart, 1, 5, p).unwrap();
                let b = span_loss(&shifted, 1, 5, p).unwrap();
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn treereg_loss_two_tokens_is_zero() {
        let chart = random_chart(2, 5);
        let tree = random_tree(2, 0);
        let b = treereg_loss(&chart, &tree).unwrap();
        assert_eq!(b.total, 0.0);
        assert!(b.per_span.is_empty());
    }

    #[test]
    fn treereg_loss_figure_tree_has_three_terms() {
        // five tokens, splits (1,5)->4, (1,4)->1, (2,4)->2, (3,4)->3
        let splits = std::collections::BTreeMap::from([((1, 5), 4), ((1, 4), 1), ((2, 4), 2), ((3, 4), 3)]);
        let tree = ParseTree::from_splits(5, splits).unwrap();
        let chart = random_chart(5, 31);
        let b = treereg_loss(&chart, &tree).unwrap();
        let spans: Vec<Span> = b.per_span.keys().copied().collect();
        assert_eq!(spans, vec![(1, 4), (1, 5), (2, 4)]);
        let want = span_loss(&chart, 1, 5, 4).unwrap()
            + span_loss(&chart, 1, 4, 1).unwrap()
            + span_loss(&chart, 2, 4, 2).unwrap();
        assert!((b.total - want).abs() < 1e-12);
    }

    #[test]
    fn recursive_equals_flat_sum_on_random_pairs() {
        for seed in 0..100u64 {
            let n = 2 + (seed as usize % 9);
            let chart = random_chart(n, seed);
            let tree = random_tree(n, seed ^ 0xfeed);
            let rec = treereg_loss(&chart, &tree).unwrap();
            let flat: f64 = tree
                .constituent_spans()
                .iter()
                .map(|&(i, j)| span_loss(&chart, i, j, tree.split_of((i, j)).unwrap()).unwrap())
                .sum();
            assert!((rec.total - flat).abs() < 1e-10, "n={n} seed={seed}");
            let from_map: f64 = rec.per_span.values().sum();
            assert!((rec.total - from_map).abs() < 1e-9);
        }
    }

    #[test]
    fn combined_loss_arithmetic() {
        assert_eq!(combined_loss(2.0, 0.5, 0.0).unwrap(), 2.0);
        assert_eq!(combined_loss(2.0, 0.5, 1.0).unwrap(), 2.5);
        assert!(combined_loss(f64::NAN, 0.5, 1.0).is_err());
        assert!(combined_loss(1.0, f64::INFINITY, 1.0).is_err());
    }

    #[test]
    fn tape_loss_matches_plain_loss() {
        for seed in 0..20u64 {
            let n = 3 + (seed as usize % 6);
            let mut next = pseudo(seed);
            let raw: Vec<f64> = (0..n * 6).map(|_| next() - 0.5).collect();
            let h = scin::normalize_rows(n, 6, &raw).unwrap();
            let tree = random_tree(n, seed);
            let plain = {
                let chart = scin::scin_chart(&h, ChartMode::Vectorized).unwrap();
                treereg_loss(&chart, &tree).unwrap().total
            };
            let mut tape = Tape::new();
            let hv = tape.input(h.to_array());
            let chart = scin::chart_var(&mut tape, hv, ChartMode::Vectorized).unwrap();
            let loss = treereg_loss_var(&mut tape, chart, &tree).unwrap();
            assert!((tape.scalar_value(loss) - plain).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_reaches_hidden_states_through_chart() {
        for (seed, mode) in [(3u64, ChartMode::Naive), (4, ChartMode::Vectorized)] {
            let n = 6;
            let mut next = pseudo(seed);
            let raw = Array::new(vec![n, 5], (0..n * 5).map(|_| next() - 0.5).collect()).unwrap();
            let tree = random_tree(n, seed);
            let report = check::grad_check(
                |tape, vars| {
                    let h = scin::normalize_rows_var(tape, vars[0]).map_err(|_| DiffError::NonFinite { op: "normalize" })?;
                    let chart = scin::chart_var(tape, h, mode).map_err(|_| DiffError::NonFinite { op: "chart" })?;
                    treereg_loss_var(tape, chart, &tree).map_err(|_| DiffError::NonFinite { op: "loss" })
                },
                &[raw],
                1e-5,
            )
            .unwrap();
            assert!(report.max_rel_err < 1e-5, "mode {mode:?}: {}", report.max_rel_err);
        }
    }

    #[test]
    fn combined_objective_gradient_flows_to_both_terms() {
        let a = Array::new(vec![1], vec![0.7]).unwrap();
        let b = Array::new(vec![1], vec![-0.3]).unwrap();
        let report = check::grad_check(
            |tape, vars| {
                // lm-like term: softplus of a; tr-like term: square of b
                let ea = tape.exp(vars[0])?;
                let one = tape.scalar_const(1.0);
                let s = tape.add(ea, one)?;
                let lm = tape.ln(s)?;
                let tr = tape.mul(vars[1], vars[1])?;
                let weighted = tape.scale(tr, 0.5)?;
                tape.add(lm, weighted)
            },
            &[a, b],
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6);
    }

    #[test]
    fn one_descent_step_improves_a_constituent_margin() {
        // minimizer direction: a small step on the free chart raises
        // s(i,p,j) - logsumexp for at least one constituent when loss > 0
        for seed in 0..20u64 {
            let n = 6;
            let tree = random_tree(n, seed);
            let chart0 = random_chart(n, seed ^ 0xabc);
            let margin = |chart: &ScinChart| -> Vec<f64> {
                tree.constituent_spans()
                    .iter()
                    .filter(|&&(i, j)| j - i >= 2)
                    .map(|&(i, j)| -span_loss(chart, i, j, tree.split_of((i, j)).unwrap()).unwrap())
                    .collect()
            };
            let before = margin(&chart0);
            if before.iter().all(|&m| m > -1e-9) {
                continue; // already at the optimum
            }
            let mut tape = Tape::new();
            let cv = tape.input(Array::new(vec![n, n], chart0.flat().to_vec()).unwrap().with_grad());
            let loss = treereg_loss_var(&mut tape, cv, &tree).unwrap();
            let grads = tape.backward(loss).unwrap();
            let g = grads.get(cv).unwrap();
            let stepped: Vec<f64> = chart0.flat().iter().zip(g).map(|(c, gi)| c - 0.05 * gi).collect();
            let after = margin(&ScinChart::from_flat(n, stepped));
            assert!(
                before.iter().zip(&after).any(|(b, a)| a > b),
                "seed {seed}: no constituent margin improved"
            );
        }
    }
}
