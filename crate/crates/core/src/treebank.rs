//! Bracketed constituency parse ingestion, right-branching binarization,
//! span extraction, unlabeled F1 scoring, and random control parses.
//!
//! Spans are 1-based inclusive `(a, b)` pairs over tokens. A binary tree over
//! `n` tokens is stored as its span set plus a split map: span `(a, b)` with
//! `b > a` splits at `p` into `(a, p)` and `(p+1, b)`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TreebankError {
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("invalid tree: {0}")]
    InvalidTree(String),
    #[error("token counts differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("subword map is not a contiguous order-preserving partition: {0}")]
    BadSubwordMap(String),
}

pub type Result<V> = std::result::Result<V, TreebankError>;

/// A span of tokens, 1-based inclusive.
pub type Span = (usize, usize);

/// Tokenized sentence, optionally with a word-to-subword partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    tokens: Vec<String>,
    /// subwords\[w\] lists the subword positions (1-based, contiguous,
    /// ascending) covering word w.
    subwords: Option<Vec<Vec<usize>>>,
}

impl Sentence {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.is_empty() || tokens.iter().any(String::is_empty) {
            return Err(TreebankError::InvalidTree("sentence must contain non-empty tokens".into()));
        }
        Ok(Sentence { tokens, subwords: None })
    }

    pub fn with_subwords(mut self, groups: Vec<Vec<usize>>) -> Result<Self> {
        if groups.len() != self.tokens.len() {
            return Err(TreebankError::BadSubwordMap(format!(
                "{} groups for {} words",
                groups.len(),
                self.tokens.len()
            )));
        }
        let mut expected = 1usize;
        for (w, g) in groups.iter().enumerate() {
            if g.is_empty() {
                return Err(TreebankError::BadSubwordMap(format!("word {} has no subwords", w + 1)));
            }
            for &s in g {
                if s != expected {
                    return Err(TreebankError::BadSubwordMap(format!(
                        "expected subword {} next, found {}",
                        expected, s
                    )));
                }
                expected += 1;
            }
        }
        self.subwords = Some(groups);
        Ok(self)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn subwords(&self) -> Option<&[Vec<usize>]> {
        self.subwords.as_deref()
    }
}

/// Possibly n-ary constituency structure as ingested; labels are discarded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BracketNode {
    Leaf(String),
    Internal(Vec<BracketNode>),
}

impl BracketNode {
    pub fn leaves(&self) -> Vec<String> {
        match self {
            BracketNode::Leaf(tok) => vec![tok.clone()],
            BracketNode::Internal(children) => children.iter().flat_map(BracketNode::leaves).collect(),
        }
    }

    fn leaf_count(&self) -> usize {
        match self {
            BracketNode::Leaf(_) => 1,
            BracketNode::Internal(children) => children.iter().map(BracketNode::leaf_count).sum(),
        }
    }
}

/// Fully binary constituency tree over `n` tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseTree {
    n: usize,
    spans: BTreeSet<Span>,
    splits: BTreeMap<Span, usize>,
}

impl ParseTree {
    /// Builds a tree from its split map, validating all invariants.
    pub fn from_splits(n: usize, splits: BTreeMap<Span, usize>) -> Result<Self> {
        if n == 0 {
            return Err(TreebankError::InvalidTree("empty tree".into()));
        }
        let mut spans = BTreeSet::new();
        for i in 1..=n {
            spans.insert((i, i));
        }
        // walk down from the root collecting multi-token spans
        let mut stack = vec![(1usize, n)];
        while let Some((a, b)) = stack.pop() {
            if a == b {
                continue;
            }
            spans.insert((a, b));
            let p = *splits
                .get(&(a, b))
                .ok_or_else(|| TreebankError::InvalidTree(format!("missing split for span ({a},{b})")))?;
            if p < a || p >= b {
                return Err(TreebankError::InvalidTree(format!("split {p} outside span ({a},{b})")));
            }
            stack.push((a, p));
            stack.push((p + 1, b));
        }
        let multi = spans.iter().filter(|(a, b)| b > a).count();
        if multi != n - 1 || splits.len() != multi {
            return Err(TreebankError::InvalidTree(format!(
                "expected {} multi-token spans, found {} (splits: {})",
                n - 1,
                multi,
                splits.len()
            )));
        }
        Ok(ParseTree { n, spans, splits })
    }

    /// The unique single-leaf tree.
    pub fn leaf() -> Self {
        ParseTree { n: 1, spans: BTreeSet::from([(1, 1)]), splits: BTreeMap::new() }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn spans(&self) -> &BTreeSet<Span> {
        &self.spans
    }

    pub fn split_of(&self, span: Span) -> Option<usize> {
        self.splits.get(&span).copied()
    }

    pub fn splits(&self) -> &BTreeMap<Span, usize> {
        &self.splits
    }

    /// Spans of length >= 2, root included; there are exactly n-1 of them.
    pub fn constituent_spans(&self) -> Vec<Span> {
        self.spans.iter().copied().filter(|(a, b)| b > a).collect()
    }

    pub fn contains(&self, span: Span) -> bool {
        self.spans.contains(&span)
    }

    /// Renders as nested brackets with the literal label `X` on every node.
    pub fn print(&self, tokens: &[String]) -> Result<String> {
        if tokens.len() != self.n {
            return Err(TreebankError::LengthMismatch(tokens.len(), self.n));
        }
        let mut out = String::new();
        self.print_span(1, self.n, tokens, &mut out);
        Ok(out)
    }

    fn print_span(&self, a: usize, b: usize, tokens: &[String], out: &mut String) {
        if a == b {
            write!(out, "(X {})", tokens[a - 1]).unwrap();
            return;
        }
        let p = self.splits[&(a, b)];
        out.push_str("(X ");
        self.print_span(a, p, tokens, out);
        out.push(' ');
        self.print_span(p + 1, b, tokens, out);
        out.push(')');
    }
}

// ── ingestion ────────────────────────────────────────────────────────────

/// Parses one bracketed constituency expression. Node labels are discarded;
/// n-ary nodes are preserved (binarize with [`binarize_right`]).
pub fn parse_bracketed(text: &str) -> Result<(Sentence, BracketNode)> {
    let bytes = text.as_bytes();
    let mut pos = 0usize;
    skip_ws(bytes, &mut pos);
    if pos >= bytes.len() || bytes[pos] != b'(' {
        return Err(TreebankError::Parse { offset: pos, message: "expected '('".into() });
    }
    let node = parse_node(bytes, &mut pos)?;
    skip_ws(bytes, &mut pos);
    if pos != bytes.len() {
        return Err(TreebankError::Parse { offset: pos, message: "trailing content after parse".into() });
    }
    let leaves = node.leaves();
    if leaves.is_empty() {
        return Err(TreebankError::Parse { offset: 0, message: "parse has no leaves".into() });
    }
    Ok((Sentence::new(leaves)?, node))
}

fn skip_ws(bytes: &[u8], pos: &mut usize) {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
}

fn read_token(bytes: &[u8], pos: &mut usize) -> String {
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'(' && bytes[*pos] != b')' {
        *pos += 1;
    }
    String::from_utf8_lossy(&bytes[start..*pos]).into_owned()
}

fn parse_node(bytes: &[u8], pos: &mut usize) -> Result<BracketNode> {
    debug_assert_eq!(bytes[*pos], b'(');
    let open = *pos;
    *pos += 1;
    skip_ws(bytes, pos);
    // the label; absent when a child bracket follows immediately (PTB-style
    // outer brackets)
    if *pos < bytes.len() && bytes[*pos] != b'(' && bytes[*pos] != b')' {
        let _label = read_token(bytes, pos);
    }
    let mut children = Vec::new();
    loop {
        skip_ws(bytes, pos);
        if *pos >= bytes.len() {
            return Err(TreebankError::Parse { offset: open, message: "unbalanced brackets: missing ')'".into() });
        }
        match bytes[*pos] {
            b')' => {
                *pos += 1;
                break;
            }
            b'(' => children.push(parse_node(bytes, pos)?),
            _ => {
                let tok = read_token(bytes, pos);
                children.push(BracketNode::Leaf(tok));
            }
        }
    }
    if children.is_empty() {
        return Err(TreebankError::Parse { offset: open, message: "empty constituent".into() });
    }
    // a labeled node with a single internal child is a unary chain link;
    // collapse nothing here, binarization handles it
    if children.len() == 1 {
        return Ok(children.into_iter().next().unwrap());
    }
    Ok(BracketNode::Internal(children))
}

/// Right-branching binarization: every n-ary node `(c1 .. cm)` becomes
/// `c1` versus `(c2 .. cm)`, recursively. Leaf order is preserved.
pub fn binarize_right(tree: &BracketNode) -> Result<ParseTree> {
    let n = tree.leaf_count();
    if n == 0 {
        return Err(TreebankError::InvalidTree("no leaves".into()));
    }
    if n == 1 {
        return Ok(ParseTree::leaf());
    }
    let mut splits = BTreeMap::new();
    collect_splits(tree, 1, &mut splits);
    ParseTree::from_splits(n, splits)
}

/// Records the binarized splits of the subtree starting at token `start`;
/// returns the exclusive end.
fn collect_splits(node: &BracketNode, start: usize, splits: &mut BTreeMap<Span, usize>) -> usize {
    match node {
        BracketNode::Leaf(_) => start + 1,
        BracketNode::Internal(children) => {
            let mut bounds = Vec::with_capacity(children.len() + 1);
            bounds.push(start);
            let mut cur = start;
            for child in children {
                cur = collect_splits(child, cur, splits);
                bounds.push(cur);
            }
            let end = cur;
            // fold children right-branching: c1 | (c2 .. cm)
            for i in 0..children.len().saturating_sub(1) {
                let a = bounds[i];
                let b = end - 1;
                if b > a {
                    splits.insert((a, b), bounds[i + 1] - 1);
                }
            }
            end
        }
    }
}

// ── scoring ──────────────────────────────────────────────────────────────

/// Unlabeled precision/recall/F1 over spans of length >= 2, whole-sentence
/// span included. Both trees must cover the same token count.
pub fn unlabeled_f1(predicted: &ParseTree, gold: &ParseTree) -> Result<(f64, f64, f64)> {
    if predicted.n != gold.n {
        return Err(TreebankError::LengthMismatch(predicted.n, gold.n));
    }
    let pred: BTreeSet<Span> = predicted.constituent_spans().into_iter().collect();
    let gold_spans: BTreeSet<Span> = gold.constituent_spans().into_iter().collect();
    Ok(prf(pred.intersection(&gold_spans).count(), pred.len(), gold_spans.len()))
}

/// Micro-averaged unlabeled F1 over a corpus of (predicted, gold) pairs.
pub fn corpus_f1<'a>(pairs: impl IntoIterator<Item = (&'a ParseTree, &'a ParseTree)>) -> Result<(f64, f64, f64)> {
    let (mut matched, mut n_pred, mut n_gold) = (0usize, 0usize, 0usize);
    for (p, g) in pairs {
        if p.n != g.n {
            return Err(TreebankError::LengthMismatch(p.n, g.n));
        }
        let ps: BTreeSet<Span> = p.constituent_spans().into_iter().collect();
        let gs: BTreeSet<Span> = g.constituent_spans().into_iter().collect();
        matched += ps.intersection(&gs).count();
        n_pred += ps.len();
        n_gold += gs.len();
    }
    Ok(prf(matched, n_pred, n_gold))
}

fn prf(matched: usize, n_pred: usize, n_gold: usize) -> (f64, f64, f64) {
    if n_pred == 0 && n_gold == 0 {
        return (1.0, 1.0, 1.0);
    }
    let p = if n_pred == 0 { 0.0 } else { matched as f64 / n_pred as f64 };
    let r = if n_gold == 0 { 0.0 } else { matched as f64 / n_gold as f64 };
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f1)
}

// ── random control trees ─────────────────────────────────────────────────

/// Uniform top-down random binary tree: the split of each length-m span is
/// drawn uniformly from its m-1 positions.
pub fn random_tree(n: usize, seed: u64) -> ParseTree {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_tree_with(n, &mut rng)
}

pub fn random_tree_with(n: usize, rng: &mut impl Rng) -> ParseTree {
    assert!(n >= 1, "tree needs at least one token");
    if n == 1 {
        return ParseTree::leaf();
    }
    let mut splits = BTreeMap::new();
    let mut stack = vec![(1usize, n)];
    while let Some((a, b)) = stack.pop() {
        if b == a {
            continue;
        }
        let p = a + rng.gen_range(0..b - a);
        splits.insert((a, b), p);
        stack.push((a, p));
        stack.push((p + 1, b));
    }
    ParseTree::from_splits(n, splits).expect("random construction is valid")
}

// ── subword projection ───────────────────────────────────────────────────

/// Projects a word-level tree onto subword positions: word span `(a, b)`
/// maps to (first subword of a, last subword of b); words with several
/// subwords get a right-branching chain under their leaf.
pub fn map_word_spans_to_subwords(tree: &ParseTree, sentence: &Sentence) -> Result<ParseTree> {
    let groups = sentence
        .subwords()
        .ok_or_else(|| TreebankError::BadSubwordMap("sentence has no subword map".into()))?;
    if groups.len() != tree.n {
        return Err(TreebankError::LengthMismatch(groups.len(), tree.n));
    }
    let first = |w: usize| groups[w - 1][0];
    let last = |w: usize| *groups[w - 1].last().unwrap();
    let total = last(tree.n);

    let mut splits = BTreeMap::new();
    for (&(a, b), &p) in tree.splits() {
        splits.insert((first(a), last(b)), last(p));
    }
    for w in 1..=tree.n {
        let (s, e) = (first(w), last(w));
        for q in s..e {
            splits.insert((q, e), q);
        }
    }
    ParseTree::from_splits(total, splits)
}

// ── corpus files ─────────────────────────────────────────────────────────

/// One successfully parsed corpus line.
#[derive(Debug, Clone)]
pub struct ParsedSentence {
    pub sentence: Sentence,
    pub tree: ParseTree,
}

/// Reads a one-parse-per-line corpus, skipping unparsable lines with a
/// warning on stderr. Returns the parsed sentences and the skip count.
pub fn read_corpus(text: &str) -> (Vec<ParsedSentence>, usize) {
    let mut out = Vec::new();
    let mut skipped = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match parse_bracketed(line).and_then(|(sentence, node)| {
            let tree = binarize_right(&node)?;
            Ok(ParsedSentence { sentence, tree })
        }) {
            Ok(ps) => out.push(ps),
            Err(e) => {
                skipped += 1;
                eprintln!("warning: skipping corpus line {}: {}", lineno + 1, e);
            }
        }
    }
    (out, skipped)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tree_of(text: &str) -> ParseTree {
        let (_, node) = parse_bracketed(text).unwrap();
        binarize_right(&node).unwrap()
    }

    #[test]
    fn single_leaf() {
        let (sentence, node) = parse_bracketed("(X a)").unwrap();
        assert_eq!(sentence.tokens(), ["a"]);
        let tree = binarize_right(&node).unwrap();
        assert_eq!(tree.n(), 1);
        assert_eq!(tree.spans().iter().copied().collect::<Vec<_>>(), [(1, 1)]);
    }

    #[test]
    fn unique_binary_tree() {
        let tree = tree_of("(X (X a) (X b))");
        assert_eq!(tree.n(), 2);
        assert!(tree.contains((1, 2)));
        assert_eq!(tree.split_of((1, 2)), Some(1));
    }

    #[test]
    fn ternary_node_binarizes_right() {
        let tree = tree_of("(X (X a) (X b) (X c))");
        assert_eq!(tree.split_of((1, 3)), Some(1));
        assert_eq!(tree.split_of((2, 3)), Some(2));
    }

    #[test]
    fn four_ary_node_binarizes_right() {
        let tree = tree_of("(X (X a) (X b) (X c) (X d))");
        assert_eq!(tree.split_of((1, 4)), Some(1));
        assert_eq!(tree.split_of((2, 4)), Some(2));
        assert_eq!(tree.split_of((3, 4)), Some(3));
    }

    #[test]
    fn already_binary_tree_unchanged() {
        let text = "(X (X (X a) (X b)) (X (X c) (X d)))";
        let tree = tree_of(text);
        assert_eq!(tree.split_of((1, 4)), Some(2));
        assert_eq!(tree.split_of((1, 2)), Some(1));
        assert_eq!(tree.split_of((3, 4)), Some(3));
    }

    #[test]
    fn mixed_tree_spans() {
        // ((a b) c d) built programmatically: no labels in the abstract form
        let inner = BracketNode::Internal(vec![
            BracketNode::Leaf("a".into()),
            BracketNode::Leaf("b".into()),
        ]);
        let root = BracketNode::Internal(vec![inner, BracketNode::Leaf("c".into()), BracketNode::Leaf("d".into())]);
        let tree = binarize_right(&root).unwrap();
        let multi: Vec<Span> = tree.constituent_spans();
        assert_eq!(multi, vec![(1, 2), (1, 4), (3, 4)]);
    }

    #[test]
    fn parse_errors_carry_offsets() {
        assert!(matches!(parse_bracketed("(X (X a) (X b)"), Err(TreebankError::Parse { .. })));
        assert!(matches!(parse_bracketed("(X ())"), Err(TreebankError::Parse { .. })));
        assert!(matches!(parse_bracketed(""), Err(TreebankError::Parse { .. })));
        let err = parse_bracketed("(X a) junk").unwrap_err();
        match err {
            TreebankError::Parse { offset, .. } => assert_eq!(offset, 6),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn figure_style_five_token_tree() {
        // splits (1,5)->4, (1,4)->1, (2,4)->2 plus the (3,4) leaf pair
        let splits = BTreeMap::from([((1, 5), 4), ((1, 4), 1), ((2, 4), 2), ((3, 4), 3)]);
        let tree = ParseTree::from_splits(5, splits).unwrap();
        assert_eq!(tree.constituent_spans(), vec![(1, 4), (1, 5), (2, 4), (3, 4)]);
    }

    #[test]
    fn left_branching_constituents() {
        let splits = BTreeMap::from([((1, 4), 3), ((1, 3), 2), ((1, 2), 1)]);
        let tree = ParseTree::from_splits(4, splits).unwrap();
        assert_eq!(tree.constituent_spans(), vec![(1, 2), (1, 3), (1, 4)]);
    }

    #[test]
    fn f1_identical_trees() {
        let t = tree_of("(X (X a) (X b) (X c) (X d))");
        assert_eq!(unlabeled_f1(&t, &t).unwrap(), (1.0, 1.0, 1.0));
    }

    #[test]
    fn f1_left_vs_right_branching_is_one_third() {
        let left = ParseTree::from_splits(4, BTreeMap::from([((1, 4), 3), ((1, 3), 2), ((1, 2), 1)])).unwrap();
        let right = ParseTree::from_splits(4, BTreeMap::from([((1, 4), 1), ((2, 4), 2), ((3, 4), 3)])).unwrap();
        let (p, r, f1) = unlabeled_f1(&left, &right).unwrap();
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
        assert!((r - 1.0 / 3.0).abs() < 1e-15);
        assert!((f1 - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn f1_single_leaf_convention() {
        assert_eq!(unlabeled_f1(&ParseTree::leaf(), &ParseTree::leaf()).unwrap(), (1.0, 1.0, 1.0));
    }

    #[test]
    fn f1_rejects_mismatched_lengths() {
        let a = ParseTree::leaf();
        let b = tree_of("(X (X a) (X b))");
        assert!(matches!(unlabeled_f1(&a, &b), Err(TreebankError::LengthMismatch(1, 2))));
    }

    #[test]
    fn random_tree_trivial_sizes() {
        assert_eq!(random_tree(1, 7).n(), 1);
        let t2a = random_tree(2, 0);
        let t2b = random_tree(2, 999);
        assert_eq!(t2a, t2b);
    }

    #[test]
    fn random_tree_hits_all_catalan_shapes() {
        // Catalan(3) = 5 binary shapes over 4 leaves
        let mut shapes = BTreeSet::new();
        for seed in 0..10_000u64 {
            let t = random_tree(4, seed);
            shapes.insert(t.constituent_spans());
        }
        assert_eq!(shapes.len(), 5);
    }

    #[test]
    fn print_parse_round_trip_random_trees() {
        for seed in 0..1000u64 {
            let n = 1 + (seed as usize * 7919) % 20;
            let tree = random_tree(n, seed);
            let tokens: Vec<String> = (0..n).map(|i| format!("w{i}")).collect();
            let printed = tree.print(&tokens).unwrap();
            let (sentence, node) = parse_bracketed(&printed).unwrap();
            assert_eq!(sentence.tokens(), tokens.as_slice());
            let reparsed = binarize_right(&node).unwrap();
            assert_eq!(reparsed.spans(), tree.spans(), "seed {seed} printed {printed}");
        }
    }

    #[test]
    fn binarize_preserves_leaves_and_closure() {
        for seed in 0..200u64 {
            let n = 2 + (seed as usize) % 12;
            let tree = random_tree(n, seed ^ 0xabcdef);
            // closure: each split's children are spans
            for (&(a, b), &p) in tree.splits() {
                assert!(tree.contains((a, p)));
                assert!(tree.contains((p + 1, b)));
            }
            assert_eq!(tree.constituent_spans().len(), n - 1);
        }
    }

    #[test]
    fn full_binary_trees_have_equal_precision_recall() {
        for seed in 0..200u64 {
            let n = 2 + (seed as usize) % 10;
            let a = random_tree(n, seed);
            let b = random_tree(n, seed.wrapping_add(10_000));
            let (p, r, f1) = unlabeled_f1(&a, &b).unwrap();
            assert_eq!(p, r);
            assert!((f1 - p).abs() < 1e-12); // harmonic mean of equal values
        }
    }

    #[test]
    fn subword_identity_map() {
        let tree = tree_of("(X (X a) (X b))");
        let sentence = Sentence::new(vec!["a".into(), "b".into()])
            .unwrap()
            .with_subwords(vec![vec![1], vec![2]])
            .unwrap();
        let mapped = map_word_spans_to_subwords(&tree, &sentence).unwrap();
        assert_eq!(mapped.spans(), tree.spans());
    }

    #[test]
    fn subword_split_second_word() {
        let tree = tree_of("(X (X a) (X b))");
        let sentence = Sentence::new(vec!["a".into(), "b".into()])
            .unwrap()
            .with_subwords(vec![vec![1], vec![2, 3]])
            .unwrap();
        let mapped = map_word_spans_to_subwords(&tree, &sentence).unwrap();
        assert_eq!(mapped.n(), 3);
        assert!(mapped.contains((1, 3)));
        assert!(mapped.contains((2, 3)));
        assert_eq!(mapped.split_of((1, 3)), Some(1));
    }

    #[test]
    fn subword_three_piece_word_chains_right() {
        let tree = tree_of("(X (X a) (X b))");
        let sentence = Sentence::new(vec!["a".into(), "b".into()])
            .unwrap()
            .with_subwords(vec![vec![1], vec![2, 3, 4]])
            .unwrap();
        let mapped = map_word_spans_to_subwords(&tree, &sentence).unwrap();
        assert_eq!(mapped.n(), 4);
        // two extra spans forming the right chain under word 2
        assert_eq!(mapped.split_of((2, 4)), Some(2));
        assert_eq!(mapped.split_of((3, 4)), Some(3));
    }

    #[test]
    fn subword_non_contiguous_rejected() {
        let err = Sentence::new(vec!["a".into(), "b".into()])
            .unwrap()
            .with_subwords(vec![vec![1], vec![3, 2]])
            .unwrap_err();
        assert!(matches!(err, TreebankError::BadSubwordMap(_)));
    }

    #[test]
    fn corpus_reader_skips_bad_lines() {
        let text = "(X (X a) (X b))\nnot a parse\n(X (X c) (X d) (X e))\n";
        let (parsed, skipped) = read_corpus(text);
        assert_eq!(parsed.len(), 2);
        assert_eq!(skipped, 1);
        assert_eq!(parsed[1].tree.n(), 3);
    }
}
