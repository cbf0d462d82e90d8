//! Model files: a header of `key=value` settings, vocabulary listings, and a
//! parameter checkpoint.
//!
//! ```text
//! TDTD-MODEL v1
//! kind=tdtd
//! hidden_size=32
//! ...
//! [nonterminals]
//! S_0
//! [terminals]
//! the
//! [params]
//! TDTD-CKPT v1
//! ...
//! ```
//!
//! The sequence model lists a single `[tokens]` section instead.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::ParamStore;
use crate::decoder::{TdtdConfig, TdtdModel};
use crate::error::{Error, Result};
use crate::parser::ParserModel;
use crate::seq_lm::{SeqLm, SeqLmConfig};
use crate::vocab::{TreeVocab, Vocabulary};

pub const MODEL_MAGIC: &str = "TDTD-MODEL v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Tdtd,
    TdtdP,
    SeqLm,
}

impl FromStr for ModelKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "tdtd" => Ok(ModelKind::Tdtd),
            "tdtd-p" => Ok(ModelKind::TdtdP),
            "seq-lm" => Ok(ModelKind::SeqLm),
            _ => Err(format!("unknown model kind {s:?} (expected tdtd, tdtd-p, or seq-lm)")),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Tdtd => "tdtd",
            ModelKind::TdtdP => "tdtd-p",
            ModelKind::SeqLm => "seq-lm",
        })
    }
}

#[derive(Debug, Clone)]
pub enum AnyModel {
    Tdtd(TdtdModel),
    Parser(ParserModel),
    Seq(SeqLm),
}

impl AnyModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            AnyModel::Tdtd(_) => ModelKind::Tdtd,
            AnyModel::Parser(_) => ModelKind::TdtdP,
            AnyModel::Seq(_) => ModelKind::SeqLm,
        }
    }

    pub fn store(&self) -> &ParamStore {
        match self {
            AnyModel::Tdtd(m) => &m.store,
            AnyModel::Parser(m) => &m.store,
            AnyModel::Seq(m) => &m.store,
        }
    }

    pub fn to_text(&self) -> String {
        self.to_text_with(self.store())
    }

    /// Serializes the model structure with parameters taken from `store`.
    pub fn to_text_with(&self, store: &ParamStore) -> String {
        let mut out = format!("{MODEL_MAGIC}\nkind={}\n", self.kind());
        let mut header = |pairs: Vec<(&str, String)>| {
            for (k, v) in pairs {
                out.push_str(&format!("{k}={v}\n"));
            }
        };
        let mut sections: Vec<(&str, &Vocabulary)> = Vec::new();
        match self {
            AnyModel::Tdtd(m) => {
                header(m.decoder.cfg.to_pairs());
                header(vec![("unk", m.decoder.vocab.unk.to_string())]);
                sections.push(("nonterminals", &m.decoder.vocab.nonterminals));
                sections.push(("terminals", &m.decoder.vocab.terminals));
            }
            AnyModel::Parser(m) => {
                header(m.decoder.cfg.to_pairs());
                header(vec![("scaled_attention", m.scaled_attention.to_string())]);
                sections.push(("nonterminals", &m.decoder.vocab.nonterminals));
                sections.push(("terminals", &m.decoder.vocab.terminals));
            }
            AnyModel::Seq(m) => {
                header(m.cfg.to_pairs());
                sections.push(("tokens", &m.vocab));
            }
        }
        for (name, v) in sections {
            out.push_str(&format!("[{name}]\n"));
            for s in v.symbols() {
                out.push_str(s);
                out.push('\n');
            }
        }
        out.push_str("[params]\n");
        out.push_str(&store.to_checkpoint());
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let err = |line: usize, message: String| Error::Config { line, message };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, l)) if l.trim() == MODEL_MAGIC => {}
            _ => return Err(err(1, format!("expected {MODEL_MAGIC:?}"))),
        }
        let mut settings: Vec<(usize, String, String)> = Vec::new();
        let mut sections: Vec<(String, Vec<String>)> = Vec::new();
        let mut params_line = None;
        for (no, line) in lines.by_ref() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                if name == "params" {
                    params_line = Some(no);
                    break;
                }
                sections.push((name.to_string(), Vec::new()));
            } else if let Some((_, items)) = sections.last_mut() {
                items.push(line.to_string());
            } else {
                let (k, v) = line.split_once('=').ok_or_else(|| err(no, format!("expected key=value, got {line:?}")))?;
                settings.push((no, k.trim().to_string(), v.trim().to_string()));
            }
        }
        let params_line = params_line.ok_or_else(|| err(text.lines().count(), "missing [params] section".into()))?;
        let checkpoint: String = text.lines().skip(params_line).map(|l| format!("{l}\n")).collect();

        let (kind_line, kind) = settings
            .iter()
            .find(|(_, k, _)| k == "kind")
            .map(|(n, _, v)| (*n, v.clone()))
            .ok_or_else(|| err(2, "missing kind=".into()))?;
        let kind: ModelKind = kind.parse().map_err(|e| err(kind_line, e))?;
        let section = |name: &str| -> Result<Vocabulary> {
            let items = sections
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, v)| v.clone())
                .ok_or_else(|| err(params_line, format!("missing [{name}] section")))?;
            Vocabulary::from_symbols(items)
        };

        let mut tdtd = TdtdConfig::default();
        let mut seq = SeqLmConfig::default();
        let (mut unk, mut scaled) = (false, true);
        for (no, k, v) in &settings {
            let known = match (kind, k.as_str()) {
                (_, "kind") => true,
                (ModelKind::SeqLm, _) => seq.set(k, v).map_err(|e| err(*no, e))?,
                (ModelKind::Tdtd, "unk") => {
                    unk = v.parse().map_err(|_| err(*no, format!("unk: expected true or false, got {v:?}")))?;
                    true
                }
                (ModelKind::TdtdP, "scaled_attention") => {
                    scaled = v.parse().map_err(|_| err(*no, format!("scaled_attention: expected true or false, got {v:?}")))?;
                    true
                }
                _ => tdtd.set(k, v).map_err(|e| err(*no, e))?,
            };
            if !known {
                return Err(err(*no, format!("unknown key {k:?} for a {kind} model")));
            }
        }

        let mut model = match kind {
            ModelKind::Tdtd => {
                let vocab = TreeVocab::new(section("nonterminals")?, section("terminals")?, unk)?;
                AnyModel::Tdtd(TdtdModel::new(tdtd, vocab, 0)?)
            }
            ModelKind::TdtdP => {
                let vocab = TreeVocab::new(section("nonterminals")?, section("terminals")?, true)?;
                AnyModel::Parser(ParserModel::new(tdtd, vocab, scaled, 0)?)
            }
            ModelKind::SeqLm => AnyModel::Seq(SeqLm::new(seq, section("tokens")?, 0)?),
        };
        let store = match &mut model {
            AnyModel::Tdtd(m) => &mut m.store,
            AnyModel::Parser(m) => &mut m.store,
            AnyModel::Seq(m) => &mut m.store,
        };
        store.load_checkpoint(&checkpoint).map_err(|e| match e {
            Error::Checkpoint { line, message } => Error::Checkpoint { line: line + params_line, message },
            other => other,
        })?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::treebank::parse_bracketed;
    use crate::vocab::UNK;

    #[test]
    fn every_kind_round_trips() {
        let t = parse_bracketed("(S (NP the cat) (VP sat))").unwrap();
        let cfg = TdtdConfig { hidden_size: 3, embed_size: 2, ..TdtdConfig::default() };
        let tv = TreeVocab::from_trees([&t], false).unwrap();
        let pv = TreeVocab::from_trees([&t], true).unwrap();
        assert_eq!(pv.terminals.symbol(0), UNK);
        let models = vec![
            AnyModel::Tdtd(TdtdModel::new(cfg.clone(), tv, 4).unwrap()),
            AnyModel::Parser(ParserModel::new(cfg, pv, false, 5).unwrap()),
            AnyModel::Seq(
                SeqLm::new(
                    SeqLmConfig { hidden_size: 3, embed_size: 2, max_length: 9 },
                    crate::seq_lm::vocab_from_trees([&t]),
                    6,
                )
                .unwrap(),
            ),
        ];
        for m in models {
            let text = m.to_text();
            let back = AnyModel::from_text(&text).unwrap();
            assert_eq!(back.kind(), m.kind());
            assert_eq!(back.to_text(), text);
        }
    }

    #[test]
    fn bad_header_reports_line() {
        let t = parse_bracketed("(S a)").unwrap();
        let m = AnyModel::Tdtd(
            TdtdModel::new(TdtdConfig { hidden_size: 2, embed_size: 2, ..TdtdConfig::default() }, TreeVocab::from_trees([&t], false).unwrap(), 1)
                .unwrap(),
        );
        let text = m.to_text().replace("hidden_size=2", "hidden_size=banana");
        assert!(matches!(AnyModel::from_text(&text), Err(Error::Config { line: 3, .. })));
        let text = m.to_text().replace("hidden_size=2", "hidden_size=4");
        assert!(matches!(AnyModel::from_text(&text), Err(Error::Checkpoint { .. })));
    }
}
