//! PCFG oracle: grammar loading, pruning, constrained sampling, and tree
//! scoring by negative log-likelihood.

use std::collections::{HashMap, HashSet};
use std::fmt;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::treebank::{NodeKind, Tree};

pub const DEFAULT_PRUNE_THRESHOLD: f64 = 1e-6;
pub const DEFAULT_UNSEEN_PENALTY: f64 = 1e-6;
pub const DEFAULT_MAX_DEPTH: usize = 7;
pub const MAX_CONSECUTIVE_REJECTIONS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Symbol {
    Nonterminal(String),
    Terminal(String),
}

impl Symbol {
    pub fn label(&self) -> &str {
        match self {
            Symbol::Nonterminal(s) | Symbol::Terminal(s) => s,
        }
    }
}

impl fmt::Display for Symbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Symbol::Nonterminal(s) => f.write_str(s),
            Symbol::Terminal(s) => write!(f, "\"{s}\""),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rule {
    pub lhs: String,
    pub rhs: Vec<Symbol>,
    pub prob: f64,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.lhs)?;
        for s in &self.rhs {
            write!(f, " {s}")?;
        }
        write!(f, " {}", self.prob)
    }
}

/// Which nonterminals may root a sampled tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StartSymbols {
    /// `S` itself plus every `S_<suffix>` label, for family `"S"`.
    Family(String),
    Explicit(Vec<String>),
}

impl StartSymbols {
    /// Parses `S_*` as a family and anything else as a comma-separated list.
    pub fn parse(spec: &str) -> Self {
        match spec.strip_suffix("_*") {
            Some(prefix) => StartSymbols::Family(prefix.to_string()),
            None => StartSymbols::Explicit(spec.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()),
        }
    }

    fn matches(&self, label: &str) -> bool {
        match self {
            StartSymbols::Family(p) => label == p || label.strip_prefix(p.as_str()).is_some_and(|r| r.starts_with('_')),
            StartSymbols::Explicit(list) => list.iter().any(|s| s == label),
        }
    }
}

impl Default for StartSymbols {
    fn default() -> Self {
        StartSymbols::Family("S".into())
    }
}

#[derive(Debug, Clone, Copy)]
enum Rhs {
    Nt(usize),
    T(usize),
}

/// Probabilistic context-free grammar with a start set.
///
/// Scoring always uses the probabilities read from the file; sampling uses a
/// separate per-left-hand-side distribution that is renormalized after
/// pruning unless disabled.
#[derive(Debug, Clone)]
pub struct Grammar {
    rules: Vec<Rule>,
    nonterminals: Vec<String>,
    nt_index: HashMap<String, usize>,
    terminals: Vec<String>,
    compiled: Vec<Vec<Rhs>>,
    by_lhs: Vec<Vec<usize>>,
    by_key: HashMap<String, usize>,
    /// Cumulative sampling mass per lhs, aligned with `by_lhs`.
    cumulative: Vec<Vec<f64>>,
    renormalized: bool,
    start: Vec<usize>,
}

fn rule_key<'a>(lhs: &str, rhs: impl IntoIterator<Item = (bool, &'a str)>) -> String {
    let mut k = String::from(lhs);
    for (terminal, label) in rhs {
        k.push(' ');
        if terminal {
            k.push('"');
            k.push_str(label);
            k.push('"');
        } else {
            k.push_str(label);
        }
    }
    k
}

fn parse_symbol(tok: &str) -> Option<Symbol> {
    if let Some(inner) = tok.strip_prefix('"') {
        let inner = inner.strip_suffix('"')?;
        (!inner.is_empty() && !inner.contains('"')).then(|| Symbol::Terminal(inner.to_string()))
    } else {
        (!tok.contains('"')).then(|| Symbol::Nonterminal(tok.to_string()))
    }
}

impl Grammar {
    /// Parses the rule-file format: `LHS RHS1 [RHS2] PROB` per line, terminals
    /// in double quotes, `#` comment lines.
    pub fn parse(text: &str, start: &StartSymbols) -> Result<Self> {
        let mut rules = Vec::new();
        let mut lines_of = Vec::new();
        let mut seen: HashMap<String, usize> = HashMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let l = raw.trim();
            if l.is_empty() || l.starts_with('#') {
                continue;
            }
            let err = |message: String| Error::Grammar { line, message };
            let toks: Vec<&str> = l.split_whitespace().collect();
            if !(3..=4).contains(&toks.len()) {
                return Err(err(format!(
                    "expected LHS, 1 or 2 RHS symbols, and a probability; got {} fields",
                    toks.len()
                )));
            }
            let prob: f64 = toks[toks.len() - 1]
                .parse()
                .map_err(|_| err(format!("invalid probability {:?}", toks[toks.len() - 1])))?;
            if !(prob > 0.0 && prob <= 1.0) {
                return Err(err(format!("probability {prob} outside (0, 1]")));
            }
            let lhs = match parse_symbol(toks[0]) {
                Some(Symbol::Nonterminal(s)) => s,
                _ => return Err(err(format!("left-hand side {:?} must be a nonterminal", toks[0]))),
            };
            let rhs = toks[1..toks.len() - 1]
                .iter()
                .map(|t| parse_symbol(t).ok_or_else(|| err(format!("malformed symbol {t:?}"))))
                .collect::<Result<Vec<_>>>()?;
            let key = rule_key(&lhs, rhs.iter().map(|s| (matches!(s, Symbol::Terminal(_)), s.label())));
            if let Some(prev) = seen.insert(key, line) {
                return Err(err(format!("duplicate rule (first defined on line {prev})")));
            }
            rules.push(Rule { lhs, rhs, prob });
            lines_of.push(line);
        }
        Self::build(rules, &lines_of, start, true)
    }

    pub fn from_rules(rules: Vec<Rule>, start: &StartSymbols) -> Result<Self> {
        let lines: Vec<usize> = (1..=rules.len()).collect();
        Self::build(rules, &lines, start, true)
    }

    fn build(rules: Vec<Rule>, lines: &[usize], start: &StartSymbols, require_reachable: bool) -> Result<Self> {
        let mut nonterminals: Vec<String> = Vec::new();
        let mut nt_index: HashMap<String, usize> = HashMap::new();
        let mut terminals: Vec<String> = Vec::new();
        let mut t_index: HashMap<String, usize> = HashMap::new();
        let mut intern_nt = |s: &str, nts: &mut Vec<String>| -> usize {
            *nt_index.entry(s.to_string()).or_insert_with(|| {
                nts.push(s.to_string());
                nts.len() - 1
            })
        };
        let mut compiled = Vec::with_capacity(rules.len());
        let mut by_key = HashMap::with_capacity(rules.len());
        let mut first_use: HashMap<usize, usize> = HashMap::new();
        for (i, r) in rules.iter().enumerate() {
            if r.rhs.is_empty() || r.rhs.len() > 2 {
                return Err(Error::Grammar { line: lines[i], message: format!("rule arity {} not in {{1, 2}}", r.rhs.len()) });
            }
            if !(r.prob > 0.0 && r.prob <= 1.0) {
                return Err(Error::Grammar { line: lines[i], message: format!("probability {} outside (0, 1]", r.prob) });
            }
            intern_nt(&r.lhs, &mut nonterminals);
            let mut c = Vec::with_capacity(r.rhs.len());
            for s in &r.rhs {
                match s {
                    Symbol::Nonterminal(n) => {
                        let id = intern_nt(n, &mut nonterminals);
                        first_use.entry(id).or_insert(lines[i]);
                        c.push(Rhs::Nt(id));
                    }
                    Symbol::Terminal(t) => {
                        let id = *t_index.entry(t.clone()).or_insert_with(|| {
                            terminals.push(t.clone());
                            terminals.len() - 1
                        });
                        c.push(Rhs::T(id));
                    }
                }
            }
            compiled.push(c);
            let key = rule_key(&r.lhs, r.rhs.iter().map(|s| (matches!(s, Symbol::Terminal(_)), s.label())));
            if by_key.insert(key, i).is_some() {
                return Err(Error::Grammar { line: lines[i], message: format!("duplicate rule {r}") });
            }
        }
        let mut by_lhs = vec![Vec::new(); nonterminals.len()];
        for (i, r) in rules.iter().enumerate() {
            by_lhs[nt_index[&r.lhs]].push(i);
        }
        let start_ids: Vec<usize> = (0..nonterminals.len())
            .filter(|&i| start.matches(&nonterminals[i]) && !by_lhs[i].is_empty())
            .collect();
        if start_ids.is_empty() {
            return Err(Error::Grammar { line: 0, message: format!("no rules for any start symbol ({start:?})") });
        }

        // Every nonterminal reachable from the start set needs a rule.
        let mut seen = vec![false; nonterminals.len()];
        let mut stack = start_ids.clone();
        while let Some(nt) = stack.pop() {
            if std::mem::replace(&mut seen[nt], true) {
                continue;
            }
            if by_lhs[nt].is_empty() {
                if !require_reachable {
                    continue;
                }
                return Err(Error::Grammar {
                    line: first_use.get(&nt).copied().unwrap_or(0),
                    message: format!("nonterminal {} is reachable but has no rules", nonterminals[nt]),
                });
            }
            for &ri in &by_lhs[nt] {
                for s in &compiled[ri] {
                    if let Rhs::Nt(c) = s {
                        stack.push(*c);
                    }
                }
            }
        }

        let mut g = Grammar {
            rules,
            nonterminals,
            nt_index,
            terminals,
            compiled,
            by_lhs,
            by_key,
            cumulative: Vec::new(),
            renormalized: true,
            start: start_ids,
        };
        g.rebuild_sampling(true);
        Ok(g)
    }

    fn rebuild_sampling(&mut self, renormalize: bool) {
        self.renormalized = renormalize;
        self.cumulative = self
            .by_lhs
            .iter()
            .map(|ids| {
                let total: f64 = ids.iter().map(|&i| self.rules[i].prob).sum();
                let z = if renormalize { total } else { 1.0 };
                let mut acc = 0.0;
                ids.iter()
                    .map(|&i| {
                        acc += self.rules[i].prob / z;
                        acc
                    })
                    .collect()
            })
            .collect();
    }

    /// Drops rules with probability below `threshold`. Sampling distributions
    /// are renormalized per left-hand side when `renormalize` is set; scoring
    /// keeps the original probabilities of the surviving rules, and removed
    /// rules score as unseen.
    pub fn prune(&self, threshold: f64, renormalize: bool) -> Result<Grammar> {
        if !(threshold >= 0.0) {
            return Err(Error::Contract(format!("prune threshold {threshold} must be >= 0")));
        }
        let kept: Vec<Rule> = self.rules.iter().filter(|r| r.prob >= threshold).cloned().collect();
        let start_names: Vec<String> = self.start.iter().map(|&i| self.nonterminals[i].clone()).collect();
        for s in &start_names {
            if !kept.iter().any(|r| &r.lhs == s) {
                return Err(Error::Grammar { line: 0, message: format!("pruning leaves start symbol {s} without rules") });
            }
        }
        let lines: Vec<usize> = (1..=kept.len()).collect();
        // Pruning may orphan non-start nonterminals; sampling rejects trees
        // that reach them, so reachability is not enforced here.
        let mut g = Self::build(kept, &lines, &StartSymbols::Explicit(start_names), false)?;
        g.rebuild_sampling(renormalize);
        Ok(g)
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn nonterminals(&self) -> &[String] {
        &self.nonterminals
    }

    pub fn terminals(&self) -> &[String] {
        &self.terminals
    }

    pub fn start_symbols(&self) -> Vec<&str> {
        self.start.iter().map(|&i| self.nonterminals[i].as_str()).collect()
    }

    pub fn is_nonterminal(&self, label: &str) -> bool {
        self.nt_index.contains_key(label)
    }

    pub fn is_renormalized(&self) -> bool {
        self.renormalized
    }

    /// Scoring probability of a production, if the grammar has it.
    pub fn rule_prob(&self, lhs: &str, rhs: &[Symbol]) -> Option<f64> {
        let key = rule_key(lhs, rhs.iter().map(|s| (matches!(s, Symbol::Terminal(_)), s.label())));
        self.by_key.get(&key).map(|&i| self.rules[i].prob)
    }

    /// Sampling probabilities of the rules of `lhs`, in file order.
    pub fn sampling_distribution(&self, lhs: &str) -> Option<Vec<(&Rule, f64)>> {
        let nt = *self.nt_index.get(lhs)?;
        let cum = &self.cumulative[nt];
        Some(
            self.by_lhs[nt]
                .iter()
                .enumerate()
                .map(|(k, &ri)| (&self.rules[ri], cum[k] - if k == 0 { 0.0 } else { cum[k - 1] }))
                .collect(),
        )
    }

    /// One sampling attempt. `None` means the draw was rejected: too deep,
    /// too many nonterminals, a non-terminating nonterminal, or (without
    /// renormalization) mass that belonged to a pruned rule.
    pub fn try_sample<R: Rng + ?Sized>(&self, max_depth: usize, max_nonterminals: Option<usize>, rng: &mut R) -> Option<Tree> {
        let root_nt = self.start[rng.gen_range(0..self.start.len())];
        let mut tree = Tree::new(&self.nonterminals[root_nt]);
        let mut nt_count = 1;
        let mut frontier = vec![(0usize, root_nt, 0usize)];
        while let Some((node, nt, depth)) = frontier.pop() {
            let cum = &self.cumulative[nt];
            let total = *cum.last()?;
            let u: f64 = rng.gen::<f64>() * if self.renormalized { total } else { 1.0 };
            let k = cum.partition_point(|&c| c <= u);
            if k >= cum.len() {
                if self.renormalized {
                    // u landed on the rounding edge of the last bucket.
                } else {
                    return None;
                }
            }
            let k = k.min(cum.len() - 1);
            let rule = self.by_lhs[nt][k];
            if depth + 1 > max_depth {
                return None;
            }
            let mut pending = Vec::with_capacity(2);
            for s in &self.compiled[rule] {
                match *s {
                    Rhs::T(t) => {
                        tree.add_child(node, &self.terminals[t], NodeKind::Terminal);
                    }
                    Rhs::Nt(c) => {
                        let id = tree.add_child(node, &self.nonterminals[c], NodeKind::Nonterminal);
                        nt_count += 1;
                        if max_nonterminals.is_some_and(|m| nt_count > m) {
                            return None;
                        }
                        pending.push((id, c, depth + 1));
                    }
                }
            }
            frontier.extend(pending.into_iter().rev());
        }
        Some(tree)
    }

    /// Samples a tree with depth at most `max_depth`, rejecting and
    /// resampling whole trees that violate the cap.
    pub fn sample_tree<R: Rng + ?Sized>(&self, max_depth: usize, rng: &mut R) -> Result<Tree> {
        if max_depth == 0 {
            return Err(Error::Contract("max_depth must be at least 1".into()));
        }
        for _ in 0..MAX_CONSECUTIVE_REJECTIONS {
            if let Some(t) = self.try_sample(max_depth, None, rng) {
                return Ok(t);
            }
        }
        Err(Error::Sampling(format!(
            "{MAX_CONSECUTIVE_REJECTIONS} consecutive rejections; start set and depth cap {max_depth} look incompatible"
        )))
    }

    /// Per-node oracle log-likelihood contributions `(node id, nll)` for every
    /// nonterminal, in pre-order. Unseen productions cost `-ln(penalty_prob)`.
    pub fn nll_terms(&self, tree: &Tree, penalty_prob: f64) -> Result<Vec<(usize, f64)>> {
        let root = tree.root();
        if tree.is_terminal(root) || !self.is_nonterminal(tree.label(root)) {
            return Err(Error::Eval(format!("root label {:?} is not a nonterminal of the grammar", tree.label(root))));
        }
        let penalty = -penalty_prob.ln();
        let mut out = Vec::new();
        for id in tree.preorder() {
            if tree.is_terminal(id) {
                continue;
            }
            let key = rule_key(
                tree.label(id),
                tree.children(id).iter().map(|&c| (tree.is_terminal(c), tree.label(c))),
            );
            let nll = match self.by_key.get(&key) {
                Some(&ri) => -self.rules[ri].prob.ln(),
                None => penalty,
            };
            out.push((id, nll));
        }
        Ok(out)
    }

    /// `-ln P(tree | root)` in nats.
    pub fn oracle_nll(&self, tree: &Tree, penalty_prob: f64) -> Result<f64> {
        Ok(self.nll_terms(tree, penalty_prob)?.iter().map(|(_, v)| v).sum())
    }

    /// Number of productions in `tree` the grammar does not contain.
    pub fn unseen_rules(&self, tree: &Tree) -> usize {
        tree.preorder()
            .into_iter()
            .filter(|&id| !tree.is_terminal(id))
            .filter(|&id| {
                let key = rule_key(
                    tree.label(id),
                    tree.children(id).iter().map(|&c| (tree.is_terminal(c), tree.label(c))),
                );
                !self.by_key.contains_key(&key)
            })
            .count()
    }

    /// Rejection-samples `count` trees with exactly `target_nonterminals`
    /// nonterminal nodes and depth at most `max_depth`.
    pub fn generate_dataset(
        &self,
        count: usize,
        target_nonterminals: usize,
        max_depth: usize,
        seed: u64,
        max_attempts: Option<usize>,
    ) -> Result<Vec<Tree>> {
        if count == 0 {
            return Err(Error::Contract("dataset count must be at least 1".into()));
        }
        if max_depth == 0 || target_nonterminals == 0 {
            return Err(Error::Contract("max_depth and target node count must be at least 1".into()));
        }
        let budget = max_attempts.unwrap_or_else(|| (count * 5_000).max(1_000_000));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(count);
        let mut attempts = 0;
        while out.len() < count {
            if attempts >= budget {
                return Err(Error::Sampling(format!(
                    "rejection budget of {budget} attempts exhausted with {} of {count} trees accepted (acceptance rate {:.3e})",
                    out.len(),
                    out.len() as f64 / attempts as f64
                )));
            }
            attempts += 1;
            if let Some(t) = self.try_sample(max_depth, Some(target_nonterminals), &mut rng) {
                if t.nonterminal_count() == target_nonterminals {
                    out.push(t);
                }
            }
        }
        Ok(out)
    }

    /// Nonterminals that occur as a left-hand side, for reports.
    pub fn lhs_set(&self) -> HashSet<&str> {
        self.rules.iter().map(|r| r.lhs.as_str()).collect()
    }
}

/// Twenty-nine rule grammar used by tests, examples, and the acceptance suite.
pub const TOY_GRAMMAR: &str = include_str!("../data/toy.pcfg");
