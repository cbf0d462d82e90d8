use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::treebank::{NodeKind, Tree};

pub const UNK: &str = "<unk>";

/// Ordered symbol table: reserved symbols first, then by descending
/// frequency with ties broken lexicographically.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Vocabulary {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_symbols<I, S>(symbols: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Vocabulary::default();
        for s in symbols {
            let s = s.into();
            if s.is_empty() || s.contains(char::is_whitespace) {
                return Err(Error::Vocab(format!("invalid symbol {s:?}")));
            }
            if v.index.contains_key(&s) {
                return Err(Error::Vocab(format!("duplicate symbol {s}")));
            }
            v.index.insert(s.clone(), v.symbols.len());
            v.symbols.push(s);
        }
        Ok(v)
    }

    pub fn from_counts<'a>(reserved: &[&str], items: impl IntoIterator<Item = &'a str>) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for it in items {
            *counts.entry(it).or_default() += 1;
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().filter(|(s, _)| !reserved.contains(s)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let all = reserved.iter().copied().chain(ranked.into_iter().map(|(s, _)| s));
        Self::from_symbols(all).expect("symbols are unique")
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn get(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, id: usize) -> &str {
        &self.symbols[id]
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }
}

/// Nonterminal and terminal vocabularies of a tree model. Embedding rows are
/// laid out as `[STOP, LAYER_START, nonterminals.., terminals..]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeVocab {
    pub nonterminals: Vocabulary,
    pub terminals: Vocabulary,
    /// When set, terminal 0 is [`UNK`] and unknown words map to it.
    pub unk: bool,
}

pub const STOP_ROW: usize = 0;
pub const LAYER_START_ROW: usize = 1;

impl TreeVocab {
    pub fn new(nonterminals: Vocabulary, terminals: Vocabulary, unk: bool) -> Result<Self> {
        if nonterminals.is_empty() || terminals.is_empty() {
            return Err(Error::Vocab("both vocabularies need at least one symbol".into()));
        }
        if unk && terminals.get(UNK) != Some(0) {
            return Err(Error::Vocab(format!("terminal 0 must be {UNK} when unknown-word mapping is on")));
        }
        Ok(TreeVocab { nonterminals, terminals, unk })
    }

    pub fn from_trees<'a>(trees: impl IntoIterator<Item = &'a Tree>, unk: bool) -> Result<Self> {
        let mut nts = Vec::new();
        let mut ts = Vec::new();
        for t in trees {
            for n in t.nodes() {
                match n.kind {
                    NodeKind::Nonterminal => nts.push(n.label.as_str()),
                    NodeKind::Terminal => ts.push(n.label.as_str()),
                }
            }
        }
        let reserved: &[&str] = if unk { &[UNK] } else { &[] };
        Self::new(Vocabulary::from_counts(&[], nts), Vocabulary::from_counts(reserved, ts), unk)
    }

    pub fn embedding_rows(&self) -> usize {
        2 + self.nonterminals.len() + self.terminals.len()
    }

    pub fn nt_row(&self, nt: usize) -> usize {
        2 + nt
    }

    pub fn t_row(&self, t: usize) -> usize {
        2 + self.nonterminals.len() + t
    }

    pub fn nonterminal(&self, label: &str) -> Result<usize> {
        self.nonterminals
            .get(label)
            .ok_or_else(|| Error::Vocab(format!("nonterminal {label:?} is not in the vocabulary")))
    }

    pub fn terminal(&self, word: &str) -> Result<usize> {
        match self.terminals.get(word) {
            Some(i) => Ok(i),
            None if self.unk => Ok(0),
            None => Err(Error::Vocab(format!("terminal {word:?} is not in the vocabulary"))),
        }
    }
}
