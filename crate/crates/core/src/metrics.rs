//! Sample-quality reports, BLEU, and labeled bracket F1.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::pcfg::Grammar;
use crate::treebank::{delinearize_brackets, Tree};

/// A generated sample: a tree, or a bracket-token sequence still to be parsed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Sample {
    Tree(Tree),
    Tokens(Vec<String>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleReport {
    pub count: usize,
    pub valid: usize,
    pub fail_fraction: f64,
    pub dup_fraction: f64,
    /// Mean oracle NLL per tree over valid samples.
    pub mean_nll: Option<f64>,
    /// Standard error of `mean_nll`.
    pub nll_std_error: Option<f64>,
    /// Mean of per-tree NLL divided by the tree's nonterminal count.
    pub mean_nll_per_node: Option<f64>,
}

impl SampleReport {
    pub fn fields(&self) -> Vec<(&'static str, String)> {
        let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |x| format!("{x:.6}"));
        vec![
            ("count", self.count.to_string()),
            ("valid", self.valid.to_string()),
            ("fail", format!("{:.6}", self.fail_fraction)),
            ("dup", format!("{:.6}", self.dup_fraction)),
            ("nll", opt(self.mean_nll)),
            ("nll_se", opt(self.nll_std_error)),
            ("nll_per_node", opt(self.mean_nll_per_node)),
        ]
    }
}

/// Fail, duplicate, and oracle-NLL statistics of a sample set.
///
/// Token samples that do not form a tree count as failures and are left out
/// of the NLL. Duplicates are counted over canonical forms of all samples.
pub fn sample_report(samples: &[Sample], grammar: &Grammar, penalty_prob: f64) -> Result<SampleReport> {
    let mut seen = HashSet::new();
    let mut nlls = Vec::new();
    let mut per_node = Vec::new();
    let mut failed = 0;
    for s in samples {
        let tree = match s {
            Sample::Tree(t) => Some(t.clone()),
            Sample::Tokens(toks) => delinearize_brackets(toks).ok(),
        };
        match tree {
            Some(t) => {
                let nll = grammar.oracle_nll(&t, penalty_prob)?;
                nlls.push(nll);
                per_node.push(nll / t.nonterminal_count() as f64);
                seen.insert(t.to_bracketed());
            }
            None => {
                failed += 1;
                if let Sample::Tokens(toks) = s {
                    seen.insert(format!("\u{0}{}", toks.join(" ")));
                }
            }
        }
    }
    let count = samples.len();
    let frac = |k: usize| if count == 0 { 0.0 } else { k as f64 / count as f64 };
    let (mean, se) = mean_and_se(&nlls);
    Ok(SampleReport {
        count,
        valid: nlls.len(),
        fail_fraction: frac(failed),
        dup_fraction: frac(count - seen.len()),
        mean_nll: mean,
        nll_std_error: se,
        mean_nll_per_node: mean_and_se(&per_node).0,
    })
}

/// Mean and standard error; the error needs at least two values.
pub fn mean_and_se(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (Some(mean), None);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (Some(mean), Some((var / n).sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BleuMode {
    /// Mean of smoothed sentence-level scores.
    #[default]
    Sentence,
    /// Pooled n-gram counts and lengths over all candidates.
    Corpus,
}

impl FromStr for BleuMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sentence" => Ok(BleuMode::Sentence),
            "corpus" => Ok(BleuMode::Corpus),
            _ => Err(Error::Eval(format!("unknown BLEU mode {s:?} (expected sentence or corpus)"))),
        }
    }
}

impl fmt::Display for BleuMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BleuMode::Sentence => "sentence",
            BleuMode::Corpus => "corpus",
        })
    }
}

/// Reference side of BLEU: per n-gram the largest count in any single
/// reference, plus the sorted reference lengths.
pub struct BleuReferences<'a> {
    n: usize,
    max_counts: HashMap<&'a [String], usize>,
    lengths: Vec<usize>,
}

impl<'a> BleuReferences<'a> {
    pub fn new(references: &'a [Vec<String>], n: usize) -> Result<Self> {
        if references.is_empty() {
            return Err(Error::Eval("BLEU needs at least one reference".into()));
        }
        if n == 0 {
            return Err(Error::Eval("BLEU order must be at least 1".into()));
        }
        let mut max_counts: HashMap<&[String], usize> = HashMap::new();
        for r in references {
            for (gram, c) in ngram_counts(r, n) {
                let e = max_counts.entry(gram).or_default();
                *e = (*e).max(c);
            }
        }
        let mut lengths: Vec<usize> = references.iter().map(Vec::len).collect();
        lengths.sort_unstable();
        lengths.dedup();
        Ok(BleuReferences { n, max_counts, lengths })
    }

    /// Reference length closest to `len`; ties go to the shorter one.
    fn closest_length(&self, len: usize) -> usize {
        *self.lengths.iter().min_by_key(|&&r| (r.abs_diff(len), r)).expect("non-empty")
    }

    /// Clipped matches and totals for orders 1..=n.
    fn stats(&self, cand: &[String]) -> (Vec<usize>, Vec<usize>) {
        let mut matched = vec![0; self.n];
        let mut total = vec![0; self.n];
        for (gram, c) in ngram_counts(cand, self.n) {
            let k = gram.len() - 1;
            total[k] += c;
            matched[k] += c.min(self.max_counts.get(gram).copied().unwrap_or(0));
        }
        (matched, total)
    }

    /// Smoothed sentence BLEU of one candidate.
    pub fn sentence(&self, cand: &[String]) -> f64 {
        if cand.is_empty() {
            return 0.0;
        }
        let (matched, total) = self.stats(cand);
        combine(&matched, &total, cand.len(), self.closest_length(cand.len()))
    }
}

/// Geometric mean of the n-gram precisions times the brevity penalty. Orders
/// without any candidate n-gram are left out; a zero match count is smoothed
/// to `1 / (total + 1)`.
fn combine(matched: &[usize], total: &[usize], cand_len: usize, ref_len: usize) -> f64 {
    let mut log_sum = 0.0;
    let mut orders = 0;
    for (&m, &t) in matched.iter().zip(total) {
        if t == 0 {
            continue;
        }
        let p = if m == 0 { 1.0 / (t as f64 + 1.0) } else { m as f64 / t as f64 };
        log_sum += p.ln();
        orders += 1;
    }
    if orders == 0 {
        return 0.0;
    }
    let bp = if cand_len > ref_len { 1.0 } else { (1.0 - ref_len as f64 / cand_len as f64).exp() };
    bp * (log_sum / orders as f64).exp()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    for k in 1..=n {
        for w in tokens.windows(k) {
            *counts.entry(w).or_default() += 1;
        }
    }
    counts
}

/// BLEU-n of `candidates` against the whole reference set.
pub fn bleu_n(candidates: &[Vec<String>], references: &[Vec<String>], n: usize, mode: BleuMode) -> Result<f64> {
    let refs = BleuReferences::new(references, n)?;
    if candidates.is_empty() {
        return Err(Error::Eval("BLEU needs at least one candidate".into()));
    }
    Ok(match mode {
        BleuMode::Sentence => candidates.iter().map(|c| refs.sentence(c)).sum::<f64>() / candidates.len() as f64,
        BleuMode::Corpus => {
            let mut matched = vec![0; n];
            let mut total = vec![0; n];
            let (mut c_len, mut r_len) = (0, 0);
            for c in candidates.iter().filter(|c| !c.is_empty()) {
                let (m, t) = refs.stats(c);
                for k in 0..n {
                    matched[k] += m[k];
                    total[k] += t[k];
                }
                c_len += c.len();
                r_len += refs.closest_length(c.len());
            }
            if c_len == 0 {
                0.0
            } else {
                combine(&matched, &total, c_len, r_len)
            }
        }
    })
}

/// Matched, predicted, and gold labeled-span counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BracketCounts {
    pub matched: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl BracketCounts {
    pub fn precision(&self) -> f64 {
        ratio(self.matched, self.predicted, self.gold == 0)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.matched, self.gold, self.predicted == 0)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

impl std::ops::AddAssign for BracketCounts {
    fn add_assign(&mut self, o: Self) {
        self.matched += o.matched;
        self.predicted += o.predicted;
        self.gold += o.gold;
    }
}

fn ratio(num: usize, den: usize, other_empty: bool) -> f64 {
    match den {
        0 if other_empty => 1.0,
        0 => 0.0,
        _ => num as f64 / den as f64,
    }
}

/// Labeled spans `(label, start, end)` over word positions, leaving out
/// preterminals (a nonterminal whose only child is a word).
pub fn labeled_spans(tree: &Tree) -> Vec<(String, usize, usize)> {
    fn walk(t: &Tree, n: usize, pos: &mut usize, out: &mut Vec<(String, usize, usize)>) {
        if t.is_terminal(n) {
            *pos += 1;
            return;
        }
        let start = *pos;
        for &c in t.children(n) {
            walk(t, c, pos, out);
        }
        let kids = t.children(n);
        if kids.len() >= 2 || kids.iter().any(|&c| !t.is_terminal(c)) {
            out.push((t.label(n).to_string(), start, *pos));
        }
    }
    let mut out = Vec::new();
    walk(tree, tree.root(), &mut 0, &mut out);
    out
}

pub fn bracket_counts(predicted: &Tree, gold: &Tree) -> Result<BracketCounts> {
    if predicted.words() != gold.words() {
        return Err(Error::Eval("predicted and gold trees have different yields".into()));
    }
    let mut remaining: HashMap<(String, usize, usize), usize> = HashMap::new();
    let gold_spans = labeled_spans(gold);
    for s in &gold_spans {
        *remaining.entry(s.clone()).or_default() += 1;
    }
    let pred_spans = labeled_spans(predicted);
    let mut matched = 0;
    for s in &pred_spans {
        if let Some(c) = remaining.get_mut(s) {
            if *c > 0 {
                *c -= 1;
                matched += 1;
            }
        }
    }
    Ok(BracketCounts { matched, predicted: pred_spans.len(), gold: gold_spans.len() })
}

/// Corpus-level counts summed over aligned tree pairs.
pub fn corpus_bracket_counts(predicted: &[Tree], gold: &[Tree]) -> Result<BracketCounts> {
    if predicted.len() != gold.len() {
        return Err(Error::Eval(format!("{} predicted trees vs {} gold trees", predicted.len(), gold.len())));
    }
    let mut total = BracketCounts::default();
    for (p, g) in predicted.iter().zip(gold) {
        total += bracket_counts(p, g)?;
    }
    Ok(total)
}
