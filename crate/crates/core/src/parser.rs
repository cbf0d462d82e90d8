//! Sentence-conditioned tree scoring and candidate reranking.
//!
//! The tree decoder is conditioned on a bidirectional GRU encoding of the
//! sentence: the encoder summary seeds the root, and every decision attends
//! over the token states with the query `[u; h_parent]`.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Gradients, Graph, NodeId, ParamId, ParamStore};
use crate::decoder::{Conditioner, Decoder, DecoderParams, Policy, TdtdConfig};
use crate::error::{Error, Result};
use crate::nn::{Gru, Linear};
use crate::treebank::Tree;
use crate::vocab::TreeVocab;

#[derive(Debug, Clone)]
pub struct EncoderParams {
    embed: ParamId,
    fwd: Gru,
    bwd: Gru,
    fwd_init: ParamId,
    bwd_init: ParamId,
    root_proj: Linear,
    query: Linear,
}

impl EncoderParams {
    fn register<R: rand::Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &TdtdConfig,
        vocab: &TreeVocab,
        rng: &mut R,
    ) -> Result<Self> {
        let (h, e) = (cfg.hidden_size, cfg.embed_size);
        let name = |n: &str| format!("{prefix}.{n}");
        Ok(EncoderParams {
            embed: store.insert_uniform(name("embed"), vec![vocab.terminals.len(), e], e, rng)?,
            fwd: Gru::register(store, &name("fwd"), e, h, rng)?,
            bwd: Gru::register(store, &name("bwd"), e, h, rng)?,
            fwd_init: store.insert_uniform(name("fwd.init"), vec![h], h, rng)?,
            bwd_init: store.insert_uniform(name("bwd.init"), vec![h], h, rng)?,
            root_proj: Linear::register(store, &name("root_proj"), 2 * h, e, rng)?,
            query: Linear::register(store, &name("query"), 3 * h, 2 * h, rng)?,
        })
    }
}

/// Token states `[forward; backward]` and the summary `[last forward; first backward]`.
#[derive(Debug, Clone)]
pub struct SentenceEncoding {
    pub states: Vec<NodeId>,
    pub summary: NodeId,
}

/// Attention output and its weights.
#[derive(Debug, Clone)]
pub struct Attention {
    pub context: NodeId,
    pub weights: Vec<f64>,
}

struct SentenceContext<'a> {
    model: &'a ParserModel,
    enc: SentenceEncoding,
    root_input: NodeId,
}

impl Conditioner for SentenceContext<'_> {
    fn root_input(&self) -> NodeId {
        self.root_input
    }

    fn root_parent(&self) -> NodeId {
        self.enc.summary
    }

    fn extra(&self, g: &mut Graph, u: NodeId, h_parent: NodeId) -> Result<Option<NodeId>> {
        if self.model.zero_attention {
            return Ok(Some(g.input(vec![0.0; 2 * self.model.decoder.cfg.hidden_size])));
        }
        let q = g.concat(&[u, h_parent]);
        Ok(Some(self.model.attend(g, q, &self.enc)?.context))
    }
}

#[derive(Debug, Clone)]
pub struct ParserModel {
    pub decoder: Decoder,
    pub encoder: EncoderParams,
    pub store: ParamStore,
    /// Divide attention scores by `sqrt(2 * hidden)`.
    pub scaled_attention: bool,
    /// Replace the attention context by zeros (ablation).
    pub zero_attention: bool,
}

pub const DECODER_PREFIX: &str = "tdtdp";
pub const ENCODER_PREFIX: &str = "enc";

/// Candidate index and conditional log-probability, best first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ranked {
    pub index: usize,
    pub score: f64,
}

impl ParserModel {
    /// `vocab` must map unknown words to UNK.
    pub fn new(cfg: TdtdConfig, vocab: TreeVocab, scaled_attention: bool, seed: u64) -> Result<Self> {
        if !vocab.unk {
            return Err(Error::Vocab("the parser vocabulary needs unknown-word mapping".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let h = cfg.hidden_size;
        let params = DecoderParams::register(&mut store, DECODER_PREFIX, &cfg, &vocab, 2 * h, &mut rng)?;
        let encoder = EncoderParams::register(&mut store, ENCODER_PREFIX, &cfg, &vocab, &mut rng)?;
        Ok(ParserModel {
            decoder: Decoder { cfg, vocab, params },
            encoder,
            store,
            scaled_attention,
            zero_attention: false,
        })
    }

    pub fn encode_sentence<S: AsRef<str>>(&self, g: &mut Graph, tokens: &[S]) -> Result<SentenceEncoding> {
        if tokens.is_empty() {
            return Err(Error::Contract("cannot encode an empty sentence".into()));
        }
        let enc = &self.encoder;
        let mut xs = Vec::with_capacity(tokens.len());
        for t in tokens {
            let id = self.decoder.vocab.terminal(t.as_ref())?;
            xs.push(g.row(enc.embed, id)?);
        }
        let mut fwd = Vec::with_capacity(xs.len());
        let mut h = g.param(enc.fwd_init);
        for &x in &xs {
            h = enc.fwd.step(g, h, x)?;
            fwd.push(h);
        }
        let mut bwd = vec![h; xs.len()];
        let mut h = g.param(enc.bwd_init);
        for (i, &x) in xs.iter().enumerate().rev() {
            h = enc.bwd.step(g, h, x)?;
            bwd[i] = h;
        }
        let summary = g.concat(&[fwd[fwd.len() - 1], bwd[0]]);
        let states = fwd.iter().zip(&bwd).map(|(&f, &b)| g.concat(&[f, b])).collect();
        Ok(SentenceEncoding { states, summary })
    }

    /// Dot-product attention of `query` (length `3 * hidden`) over the token states.
    pub fn attend(&self, g: &mut Graph, query: NodeId, enc: &SentenceEncoding) -> Result<Attention> {
        let q = self.encoder.query.forward(g, query)?;
        let scale = if self.scaled_attention { 1.0 / ((2 * self.decoder.cfg.hidden_size) as f64).sqrt() } else { 1.0 };
        let mut scores = Vec::with_capacity(enc.states.len());
        for &s in &enc.states {
            let d = g.dot(q, s)?;
            scores.push(g.scale(d, scale));
        }
        let scores = g.concat(&scores);
        let log_w = g.log_softmax(scores);
        let w = g.exp(log_w);
        let mut context = None;
        for (j, &s) in enc.states.iter().enumerate() {
            let wj = g.pick(w, j)?;
            let part = g.scale_by(s, wj)?;
            context = Some(match context {
                None => part,
                Some(c) => g.add(c, part)?,
            });
        }
        Ok(Attention { context: context.expect("non-empty sentence"), weights: g.value(w).to_vec() })
    }

    fn context<'a, S: AsRef<str>>(&'a self, g: &mut Graph, sentence: &[S]) -> Result<SentenceContext<'a>> {
        let enc = self.encode_sentence(g, sentence)?;
        let proj = self.encoder.root_proj.forward(g, enc.summary)?;
        let root_input = g.tanh(proj);
        Ok(SentenceContext { model: self, enc, root_input })
    }

    /// `log p(tree | sentence)` node, including the root term.
    pub fn log_prob_node<S: AsRef<str>>(&self, g: &mut Graph, tree: &Tree, sentence: &[S]) -> Result<NodeId> {
        check_yield(tree, sentence)?;
        let ctx = self.context(g, sentence)?;
        self.decoder.tree_log_prob(g, tree, Some(&ctx), true)
    }

    pub fn conditional_log_prob<S: AsRef<str>>(&self, tree: &Tree, sentence: &[S]) -> Result<f64> {
        let mut g = Graph::new(&self.store);
        let lp = self.log_prob_node(&mut g, tree, sentence)?;
        Ok(g.scalar(lp))
    }

    /// Negative conditional log-likelihood of a tree given its own yield.
    pub fn loss_and_grads(
        &self,
        tree: &Tree,
        teacher_forcing: f64,
        rng: &mut dyn RngCore,
    ) -> Result<(f64, Gradients)> {
        let sentence = tree.words();
        let mut g = Graph::new(&self.store);
        let ctx = self.context(&mut g, &sentence)?;
        let (root, children) = self.decoder.decisions(tree)?;
        let policy = Policy::Replay { root, children, teacher_forcing, rng: Some(rng) };
        let u = self.decoder.unroll(&mut g, Some(&ctx), policy, true)?;
        let lp = u.log_prob(&mut g)?;
        let loss = g.scale(lp, -1.0);
        Ok((g.scalar(loss), g.backward(loss, 1.0)?))
    }

    /// Scores every candidate and orders them best first; ties keep input order.
    pub fn rerank<S: AsRef<str> + Sync>(&self, sentence: &[S], candidates: &[Tree]) -> Result<Vec<Ranked>> {
        if candidates.is_empty() {
            return Err(Error::Contract("rerank needs at least one candidate".into()));
        }
        let scores: Vec<f64> = candidates
            .par_iter()
            .map(|t| self.conditional_log_prob(t, sentence))
            .collect::<Result<_>>()?;
        Ok(rank(&scores))
    }
}

/// Stable descending order of `scores`.
pub fn rank(scores: &[f64]) -> Vec<Ranked> {
    let mut ranked: Vec<Ranked> = scores.iter().enumerate().map(|(index, &score)| Ranked { index, score }).collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score));
    ranked
}

/// Errors unless the terminal yield of `tree` equals `sentence`.
pub fn check_yield<S: AsRef<str>>(tree: &Tree, sentence: &[S]) -> Result<()> {
    let words = tree.words();
    let n = words.len().max(sentence.len());
    for i in 0..n {
        let (a, b) = (words.get(i).copied(), sentence.get(i).map(|s| s.as_ref()));
        if a != b {
            return Err(Error::Contract(format!(
                "tree yield differs from the sentence at token {i}: {} vs {}",
                a.unwrap_or("<end>"),
                b.unwrap_or("<end>")
            )));
        }
    }
    Ok(())
}
