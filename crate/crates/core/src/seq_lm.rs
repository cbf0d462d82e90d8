//! GRU language model over linearized bracket sequences.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Graph, NodeId, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::nn::{Gru, Linear};
use crate::treebank::Tree;
use crate::vocab::Vocabulary;

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
const BOS_ID: usize = 0;
const EOS_ID: usize = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqLmConfig {
    pub hidden_size: usize,
    pub embed_size: usize,
    pub max_length: usize,
}

impl Default for SeqLmConfig {
    fn default() -> Self {
        SeqLmConfig { hidden_size: 32, embed_size: 32, max_length: 200 }
    }
}

impl SeqLmConfig {
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("hidden_size", self.hidden_size.to_string()),
            ("embed_size", self.embed_size.to_string()),
            ("max_length", self.max_length.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<bool, String> {
        let slot = match key {
            "hidden_size" => &mut self.hidden_size,
            "embed_size" => &mut self.embed_size,
            "max_length" => &mut self.max_length,
            _ => return Ok(false),
        };
        *slot = value.parse().map_err(|_| format!("{key}: expected a non-negative integer, got {value:?}"))?;
        Ok(true)
    }
}

/// Token vocabulary `[BOS, EOS, ")", ...]` built from the linearized trees.
pub fn vocab_from_trees<'a>(trees: impl IntoIterator<Item = &'a Tree>) -> Vocabulary {
    let seqs: Vec<Vec<String>> = trees.into_iter().map(|t| t.linearize_brackets()).collect();
    Vocabulary::from_counts(&[BOS, EOS, ")"], seqs.iter().flatten().map(String::as_str))
}

#[derive(Debug, Clone)]
pub struct SeqLm {
    pub cfg: SeqLmConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    embed: ParamId,
    h0: ParamId,
    cell: Gru,
    out: Linear,
}

/// Sampled sequence (without BOS/EOS) and the log-probability of every draw.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledSeq {
    pub tokens: Vec<String>,
    pub recorded: Vec<f64>,
    pub ended: bool,
}

pub const PARAM_PREFIX: &str = "seq";

impl SeqLm {
    pub fn new(cfg: SeqLmConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        if vocab.get(BOS) != Some(BOS_ID) || vocab.get(EOS) != Some(EOS_ID) {
            return Err(Error::Vocab(format!("token vocabulary must start with {BOS} {EOS}")));
        }
        if cfg.hidden_size == 0 || cfg.embed_size == 0 || cfg.max_length == 0 {
            return Err(Error::Contract("sequence model sizes must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (h, e) = (cfg.hidden_size, cfg.embed_size);
        let embed = store.insert_uniform(format!("{PARAM_PREFIX}.embed"), vec![vocab.len(), e], e, &mut rng)?;
        let h0 = store.insert_uniform(format!("{PARAM_PREFIX}.h0"), vec![h], h, &mut rng)?;
        let cell = Gru::register(&mut store, &format!("{PARAM_PREFIX}.gru"), e, h, &mut rng)?;
        // BOS is never predicted, so output index i is token i + 1.
        let out = Linear::register(&mut store, &format!("{PARAM_PREFIX}.out"), h, vocab.len() - 1, &mut rng)?;
        Ok(SeqLm { cfg, vocab, store, embed, h0, cell, out })
    }

    /// Number of outcomes of each prediction.
    pub fn output_size(&self) -> usize {
        self.vocab.len() - 1
    }

    fn ids<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<usize>> {
        tokens
            .iter()
            .map(|t| {
                let t = t.as_ref();
                match self.vocab.get(t) {
                    Some(BOS_ID) | Some(EOS_ID) => Err(Error::Vocab(format!("reserved token {t} inside a sequence"))),
                    Some(i) => Ok(i),
                    None => Err(Error::Vocab(format!("token {t:?} is not in the vocabulary"))),
                }
            })
            .collect()
    }

    fn step(&self, g: &mut Graph, h: Option<NodeId>, token: usize) -> Result<(NodeId, NodeId)> {
        let h = h.unwrap_or_else(|| g.param(self.h0));
        let x = g.row(self.embed, token)?;
        let h = self.cell.step(g, h, x)?;
        let logits = self.out.forward(g, h)?;
        Ok((h, g.log_softmax(logits)))
    }

    /// Teacher-forced `log p(tokens, EOS)` with BOS as the first input. With
    /// `teacher_forcing < 1` inputs are replaced by greedy predictions.
    pub fn log_prob_node<S: AsRef<str>>(
        &self,
        g: &mut Graph,
        tokens: &[S],
        teacher_forcing: f64,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<NodeId> {
        let mut targets = self.ids(tokens)?;
        targets.push(EOS_ID);
        let mut terms = Vec::with_capacity(targets.len());
        let mut h = None;
        let mut input = BOS_ID;
        for &y in &targets {
            let (h_new, lp) = self.step(g, h, input)?;
            h = Some(h_new);
            terms.push(g.pick(lp, y - 1)?);
            input = y;
            if teacher_forcing < 1.0 {
                if let Some(r) = rng.as_deref_mut() {
                    if r.gen::<f64>() >= teacher_forcing {
                        input = argmax(g.value(lp)) + 1;
                    }
                }
            }
        }
        g.sum_scalars(&terms)
    }

    pub fn sequence_log_prob<S: AsRef<str>>(&self, tokens: &[S]) -> Result<f64> {
        let mut g = Graph::new(&self.store);
        let lp = self.log_prob_node(&mut g, tokens, 1.0, None)?;
        Ok(g.scalar(lp))
    }

    pub fn loss_and_grads<S: AsRef<str>>(
        &self,
        tokens: &[S],
        teacher_forcing: f64,
        rng: &mut dyn RngCore,
    ) -> Result<(f64, Gradients)> {
        let mut g = Graph::new(&self.store);
        let lp = self.log_prob_node(&mut g, tokens, teacher_forcing, Some(rng))?;
        let loss = g.scale(lp, -1.0);
        Ok((g.scalar(loss), g.backward(loss, 1.0)?))
    }

    /// Ancestral sampling at temperature 1 until EOS or `max_length` tokens.
    pub fn sample(&self, rng: &mut dyn RngCore, max_length: usize) -> Result<SampledSeq> {
        let mut g = Graph::new(&self.store);
        let mut out = SampledSeq { tokens: Vec::new(), recorded: Vec::new(), ended: false };
        let mut h = None;
        let mut input = BOS_ID;
        while out.tokens.len() < max_length {
            let (h_new, lp) = self.step(&mut g, h, input)?;
            h = Some(h_new);
            let lp = g.value(lp);
            let i = WeightedIndex::new(lp.iter().map(|l| l.exp()))
                .map_err(|e| Error::Sampling(e.to_string()))?
                .sample(rng);
            out.recorded.push(lp[i]);
            let token = i + 1;
            if token == EOS_ID {
                out.ended = true;
                break;
            }
            out.tokens.push(self.vocab.symbol(token).to_string());
            input = token;
        }
        Ok(out)
    }

    /// Per-step distribution after feeding `prefix` (for normalization checks).
    pub fn next_log_probs<S: AsRef<str>>(&self, prefix: &[S]) -> Result<Vec<f64>> {
        let ids = self.ids(prefix)?;
        let mut g = Graph::new(&self.store);
        let mut h = None;
        let mut lp = None;
        for &t in std::iter::once(&BOS_ID).chain(&ids) {
            let (h_new, l) = self.step(&mut g, h, t)?;
            h = Some(h_new);
            lp = Some(l);
        }
        Ok(g.value(lp.expect("at least BOS")).to_vec())
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
