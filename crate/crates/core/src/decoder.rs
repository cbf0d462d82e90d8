//! Top-down breadth-first tree decoder.
//!
//! A tree is produced one layer at a time. For every nonterminal of the
//! finished layer, left to right, the decoder emits that node's children and
//! then a STOP symbol. Each decision is scored from
//!
//! ```text
//! z = [u; s_parent; h_parent; extra]
//! ```
//!
//! where `u` is the generation recurrence over everything already emitted in
//! the current layer, `s_parent` the depth recurrence over the label path from
//! the root to the parent, `h_parent` the parent's state from the
//! bidirectional encoding of its layer, and `extra` an optional conditioning
//! vector. A three-way class gate over {nonterminal, terminal, STOP} is
//! combined with class-conditional softmaxes over the two vocabularies.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Graph, NodeId, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::nn::{Gru, Linear};
use crate::treebank::{NodeKind, Tree};
use crate::vocab::{TreeVocab, LAYER_START_ROW, STOP_ROW};

pub const CLASS_NONTERMINAL: usize = 0;
pub const CLASS_TERMINAL: usize = 1;
pub const CLASS_STOP: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TdtdConfig {
    pub hidden_size: usize,
    pub embed_size: usize,
    /// Nodes at this depth are forced to be terminals.
    pub max_depth: usize,
    pub max_children: usize,
    pub max_layer_width: usize,
}

impl Default for TdtdConfig {
    fn default() -> Self {
        TdtdConfig { hidden_size: 32, embed_size: 32, max_depth: 7, max_children: 8, max_layer_width: 64 }
    }
}

impl TdtdConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("hidden_size", self.hidden_size),
            ("embed_size", self.embed_size),
            ("max_depth", self.max_depth),
            ("max_children", self.max_children),
            ("max_layer_width", self.max_layer_width),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Contract(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("hidden_size", self.hidden_size.to_string()),
            ("embed_size", self.embed_size.to_string()),
            ("max_depth", self.max_depth.to_string()),
            ("max_children", self.max_children.to_string()),
            ("max_layer_width", self.max_layer_width.to_string()),
        ]
    }

    /// Applies one `key=value` setting; returns false for keys it does not own.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<bool, String> {
        let slot = match key {
            "hidden_size" => &mut self.hidden_size,
            "embed_size" => &mut self.embed_size,
            "max_depth" => &mut self.max_depth,
            "max_children" => &mut self.max_children,
            "max_layer_width" => &mut self.max_layer_width,
            _ => return Ok(false),
        };
        *slot = value.parse().map_err(|_| format!("{key}: expected a non-negative integer, got {value:?}"))?;
        Ok(true)
    }
}

/// One decoder decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Outcome {
    Stop,
    Nonterminal(usize),
    Terminal(usize),
}

impl Outcome {
    pub fn class(self) -> usize {
        match self {
            Outcome::Nonterminal(_) => CLASS_NONTERMINAL,
            Outcome::Terminal(_) => CLASS_TERMINAL,
            Outcome::Stop => CLASS_STOP,
        }
    }

    fn embedding_row(self, vocab: &TreeVocab) -> usize {
        match self {
            Outcome::Stop => STOP_ROW,
            Outcome::Nonterminal(i) => vocab.nt_row(i),
            Outcome::Terminal(i) => vocab.t_row(i),
        }
    }
}

/// Classes admissible at one decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepMask {
    pub nonterminal: bool,
    pub terminal: bool,
    pub stop: bool,
}

impl StepMask {
    /// Mask for the next child of a parent.
    ///
    /// * a parent needs at least one child, so STOP is barred for the first;
    /// * a parent with `max_children` children must stop;
    /// * children at depth `max_depth` must be terminals;
    /// * a child is only admitted if every parent still to come in the layer
    ///   keeps room for its own first child under `max_layer_width`.
    pub fn for_child(
        cfg: &TdtdConfig,
        child_depth: usize,
        children_so_far: usize,
        layer_width_so_far: usize,
        parents_remaining: usize,
    ) -> StepMask {
        let room = layer_width_so_far + 1 + parents_remaining <= cfg.max_layer_width;
        let more = children_so_far < cfg.max_children && room;
        StepMask {
            nonterminal: more && child_depth < cfg.max_depth,
            terminal: more,
            stop: children_so_far > 0,
        }
    }

    pub fn allows(&self, o: Outcome) -> bool {
        match o {
            Outcome::Nonterminal(_) => self.nonterminal,
            Outcome::Terminal(_) => self.terminal,
            Outcome::Stop => self.stop,
        }
    }

    fn gate(&self) -> Vec<bool> {
        vec![self.nonterminal, self.terminal, self.stop]
    }
}

/// Normalized log-probabilities of one decision.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeDistribution {
    /// Log-probabilities of {nonterminal, terminal, STOP}; masked classes are `-inf`.
    pub gate: Vec<f64>,
    pub nonterminal: Vec<f64>,
    pub terminal: Vec<f64>,
}

impl NodeDistribution {
    pub fn log_prob(&self, o: Outcome) -> f64 {
        match o {
            Outcome::Stop => self.gate[CLASS_STOP],
            Outcome::Nonterminal(i) => self.gate[CLASS_NONTERMINAL] + self.nonterminal[i],
            Outcome::Terminal(i) => self.gate[CLASS_TERMINAL] + self.terminal[i],
        }
    }

    /// Every outcome with its joint log-probability.
    pub fn outcomes(&self) -> Vec<(Outcome, f64)> {
        let mut v = vec![(Outcome::Stop, self.gate[CLASS_STOP])];
        v.extend((0..self.nonterminal.len()).map(|i| (Outcome::Nonterminal(i), self.log_prob(Outcome::Nonterminal(i)))));
        v.extend((0..self.terminal.len()).map(|i| (Outcome::Terminal(i), self.log_prob(Outcome::Terminal(i)))));
        v
    }

    /// Highest-probability outcome; ties go to the earliest in [`Self::outcomes`] order.
    pub fn argmax(&self) -> Outcome {
        let mut best = (Outcome::Stop, f64::NEG_INFINITY);
        for (o, lp) in self.outcomes() {
            if lp > best.1 {
                best = (o, lp);
            }
        }
        best.0
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Outcome> {
        let gate = WeightedIndex::new(self.gate.iter().map(|l| l.exp()))
            .map_err(|e| Error::Sampling(format!("class gate: {e}")))?;
        let within = |lp: &[f64], rng: &mut R| -> Result<usize> {
            let d = WeightedIndex::new(lp.iter().map(|l| l.exp())).map_err(|e| Error::Sampling(e.to_string()))?;
            Ok(d.sample(rng))
        };
        Ok(match gate.sample(rng) {
            CLASS_NONTERMINAL => Outcome::Nonterminal(within(&self.nonterminal, rng)?),
            CLASS_TERMINAL => Outcome::Terminal(within(&self.terminal, rng)?),
            _ => Outcome::Stop,
        })
    }
}

/// Output heads evaluated at one feature vector. The class-conditional
/// softmaxes are only built when asked for.
pub struct Heads<'p> {
    params: &'p DecoderParams,
    feature: NodeId,
    gate: NodeId,
    nonterminal: Option<NodeId>,
    terminal: Option<NodeId>,
}

impl<'p> Heads<'p> {
    fn nonterminal(&mut self, g: &mut Graph) -> Result<NodeId> {
        if let Some(n) = self.nonterminal {
            return Ok(n);
        }
        let logits = self.params.nt_head.forward(g, self.feature)?;
        let n = g.log_softmax(logits);
        self.nonterminal = Some(n);
        Ok(n)
    }

    fn terminal(&mut self, g: &mut Graph) -> Result<NodeId> {
        if let Some(n) = self.terminal {
            return Ok(n);
        }
        let logits = self.params.t_head.forward(g, self.feature)?;
        let n = g.log_softmax(logits);
        self.terminal = Some(n);
        Ok(n)
    }

    /// Scalar node holding `log p(o)`.
    pub fn log_prob(&mut self, g: &mut Graph, o: Outcome) -> Result<NodeId> {
        let class = g.pick(self.gate, o.class())?;
        let within = match o {
            Outcome::Stop => return Ok(class),
            Outcome::Nonterminal(i) => {
                let n = self.nonterminal(g)?;
                g.pick(n, i)?
            }
            Outcome::Terminal(i) => {
                let t = self.terminal(g)?;
                g.pick(t, i)?
            }
        };
        g.add(class, within)
    }

    pub fn distribution(&mut self, g: &mut Graph) -> Result<NodeDistribution> {
        let nt = self.nonterminal(g)?;
        let t = self.terminal(g)?;
        Ok(NodeDistribution {
            gate: g.value(self.gate).to_vec(),
            nonterminal: g.value(nt).to_vec(),
            terminal: g.value(t).to_vec(),
        })
    }
}

/// Sentence-side inputs for the conditional variant.
pub trait Conditioner {
    /// Input vector of the root head, length `embed_size`.
    fn root_input(&self) -> NodeId;
    /// Parent context of the root when its layer is encoded, length `2 * hidden`.
    fn root_parent(&self) -> NodeId;
    /// Extra feature appended to `z`, or `None`.
    fn extra(&self, g: &mut Graph, u: NodeId, h_parent: NodeId) -> Result<Option<NodeId>>;
}

#[derive(Debug, Clone)]
pub struct DecoderParams {
    embed: ParamId,
    root_input: ParamId,
    root_parent: ParamId,
    root_head: Linear,
    layer_fwd: Gru,
    layer_bwd: Gru,
    layer_fwd_init: ParamId,
    layer_bwd_init: ParamId,
    depth: Gru,
    depth_init: ParamId,
    gen: Gru,
    gen_init: ParamId,
    gate: Linear,
    nt_head: Linear,
    t_head: Linear,
}

impl DecoderParams {
    /// Registers all decoder parameters under `prefix`. `extra_dim` is the
    /// length of the conditioning feature (0 for the unconditional model).
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &TdtdConfig,
        vocab: &TreeVocab,
        extra_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let (h, e) = (cfg.hidden_size, cfg.embed_size);
        let name = |n: &str| format!("{prefix}.{n}");
        let embed = store.insert_uniform(name("embed"), vec![vocab.embedding_rows(), e], e, rng)?;
        let root_input = store.insert_uniform(name("root_input"), vec![e], e, rng)?;
        let root_parent = store.insert_uniform(name("root_parent"), vec![2 * h], h, rng)?;
        let root_head = Linear::register(store, &name("root_head"), e, vocab.nonterminals.len(), rng)?;
        let layer_fwd = Gru::register(store, &name("layer_fwd"), e + 2 * h, h, rng)?;
        let layer_bwd = Gru::register(store, &name("layer_bwd"), e + 2 * h, h, rng)?;
        let layer_fwd_init = store.insert_uniform(name("layer_fwd.init"), vec![h], h, rng)?;
        let layer_bwd_init = store.insert_uniform(name("layer_bwd.init"), vec![h], h, rng)?;
        let depth = Gru::register(store, &name("depth"), e, h, rng)?;
        let depth_init = store.insert_uniform(name("depth.init"), vec![h], h, rng)?;
        let gen = Gru::register(store, &name("gen"), e, h, rng)?;
        let gen_init = store.insert_uniform(name("gen.init"), vec![h], h, rng)?;
        let f = 4 * h + extra_dim;
        let gate = Linear::register(store, &name("gate"), f, 3, rng)?;
        let nt_head = Linear::register(store, &name("nt_head"), f, vocab.nonterminals.len(), rng)?;
        let t_head = Linear::register(store, &name("t_head"), f, vocab.terminals.len(), rng)?;
        Ok(DecoderParams {
            embed,
            root_input,
            root_parent,
            root_head,
            layer_fwd,
            layer_bwd,
            layer_fwd_init,
            layer_bwd_init,
            depth,
            depth_init,
            gen,
            gen_init,
            gate,
            nt_head,
            t_head,
        })
    }

    pub fn root_head(&self) -> Linear {
        self.root_head
    }

    pub fn output_heads(&self) -> [Linear; 3] {
        [self.gate, self.nt_head, self.t_head]
    }
}

/// Result of one decoder pass.
#[derive(Debug, Clone)]
pub struct Unrolled {
    pub tree: Tree,
    /// Root decision term, when the root head was scored.
    pub root_term: Option<NodeId>,
    /// Child and STOP decision terms in decision order.
    pub terms: Vec<NodeId>,
    /// Values of `root_term` then `terms`, as recorded while decoding.
    pub recorded: Vec<f64>,
    pub outcomes: Vec<Outcome>,
}

impl Unrolled {
    pub fn recorded_sum(&self) -> f64 {
        self.recorded.iter().sum()
    }

    /// Scalar node summing every scored decision.
    pub fn log_prob(&self, g: &mut Graph) -> Result<NodeId> {
        let mut all = Vec::with_capacity(self.terms.len() + 1);
        all.extend(self.root_term);
        all.extend_from_slice(&self.terms);
        g.sum_scalars(&all)
    }
}

/// How a pass picks its decisions.
pub enum Policy<'r> {
    /// Replay a fixed decision sequence (root first). With `teacher_forcing < 1`
    /// the generation recurrence is fed the model's greedy prediction instead
    /// of the replayed symbol with probability `1 - teacher_forcing`.
    Replay { root: usize, children: Vec<Outcome>, teacher_forcing: f64, rng: Option<&'r mut dyn RngCore> },
    Greedy { root: Option<usize> },
    Sample { root: Option<usize>, rng: &'r mut dyn RngCore },
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub cfg: TdtdConfig,
    pub vocab: TreeVocab,
    pub params: DecoderParams,
}

impl Decoder {
    pub fn embed(&self, g: &mut Graph, row: usize) -> Result<NodeId> {
        g.row(self.params.embed, row)
    }

    /// One step down the ancestor path; `None` starts from the learned state.
    pub fn depth_step(&self, g: &mut Graph, s_parent: Option<NodeId>, emb: NodeId) -> Result<NodeId> {
        let s = s_parent.unwrap_or_else(|| g.param(self.params.depth_init));
        self.params.depth.step(g, s, emb)
    }

    pub fn gen_step(&self, g: &mut Graph, u_prev: Option<NodeId>, emb: NodeId) -> Result<NodeId> {
        let u = u_prev.unwrap_or_else(|| g.param(self.params.gen_init));
        self.params.gen.step(g, u, emb)
    }

    /// Bidirectional encoding of one layer from `(embedding, parent context)`
    /// pairs; each output is `[forward; backward]`.
    pub fn encode_layer(&self, g: &mut Graph, nodes: &[(NodeId, NodeId)]) -> Result<Vec<NodeId>> {
        let inputs: Vec<NodeId> = nodes.iter().map(|&(e, p)| g.concat(&[e, p])).collect();
        let mut fwd = Vec::with_capacity(inputs.len());
        let mut h = g.param(self.params.layer_fwd_init);
        for &x in &inputs {
            h = self.params.layer_fwd.step(g, h, x)?;
            fwd.push(h);
        }
        let mut bwd = vec![h; inputs.len()];
        let mut h = g.param(self.params.layer_bwd_init);
        for (i, &x) in inputs.iter().enumerate().rev() {
            h = self.params.layer_bwd.step(g, h, x)?;
            bwd[i] = h;
        }
        Ok(fwd.into_iter().zip(bwd).map(|(f, b)| g.concat(&[f, b])).collect())
    }

    /// Gate and heads at feature `z`, with the gate restricted to `mask`.
    pub fn predict<'p>(&'p self, g: &mut Graph, z: NodeId, mask: &StepMask) -> Result<Heads<'p>> {
        let logits = self.params.gate.forward(g, z)?;
        let gate = g.log_softmax_masked(logits, mask.gate())?;
        Ok(Heads { params: &self.params, feature: z, gate, nonterminal: None, terminal: None })
    }

    fn root_log_probs(&self, g: &mut Graph, cond: Option<&dyn Conditioner>) -> Result<NodeId> {
        let input = match cond {
            Some(c) => c.root_input(),
            None => g.param(self.params.root_input),
        };
        let logits = self.params.root_head.forward(g, input)?;
        Ok(g.log_softmax(logits))
    }

    /// Decision sequence that reproduces `tree`: root label, then per layer
    /// the children of every nonterminal followed by STOP.
    pub fn decisions(&self, tree: &Tree) -> Result<(usize, Vec<Outcome>)> {
        let root = self.vocab.nonterminal(tree.label(tree.root()))?;
        let mut out = Vec::new();
        for layer in tree.layer_view().layers {
            for n in layer {
                if tree.is_terminal(n) {
                    continue;
                }
                for &c in tree.children(n) {
                    out.push(match tree.node(c).kind {
                        NodeKind::Nonterminal => Outcome::Nonterminal(self.vocab.nonterminal(tree.label(c))?),
                        NodeKind::Terminal => Outcome::Terminal(self.vocab.terminal(tree.label(c))?),
                    });
                }
                out.push(Outcome::Stop);
            }
        }
        Ok((root, out))
    }

    /// Runs the decoder once. `score_root` adds the root head's term.
    pub fn unroll(
        &self,
        g: &mut Graph,
        cond: Option<&dyn Conditioner>,
        mut policy: Policy,
        score_root: bool,
    ) -> Result<Unrolled> {
        let vocab = &self.vocab;
        let mut recorded = Vec::new();
        let mut outcomes = Vec::new();

        let root_lp = if score_root || !matches!(policy, Policy::Replay { .. }) {
            Some(self.root_log_probs(g, cond)?)
        } else {
            None
        };
        let root = match &mut policy {
            Policy::Replay { root, .. } => *root,
            Policy::Greedy { root: Some(r) } | Policy::Sample { root: Some(r), .. } => *r,
            Policy::Greedy { root: None } => {
                let lp = g.value(root_lp.expect("root scored"));
                argmax(lp)
            }
            Policy::Sample { root: None, rng } => {
                let lp = g.value(root_lp.expect("root scored"));
                WeightedIndex::new(lp.iter().map(|l| l.exp()))
                    .map_err(|e| Error::Sampling(format!("root head: {e}")))?
                    .sample(rng)
            }
        };
        if root >= vocab.nonterminals.len() {
            return Err(Error::Contract(format!("root index {root} out of range")));
        }
        let root_term = match (score_root, root_lp) {
            (true, Some(lp)) => {
                let t = g.pick(lp, root)?;
                recorded.push(g.scalar(t));
                Some(t)
            }
            _ => None,
        };

        let mut tree = Tree::new(vocab.nonterminals.symbol(root));
        let root_emb = self.embed(g, vocab.nt_row(root))?;
        let root_parent = match cond {
            Some(c) => c.root_parent(),
            None => g.param(self.params.root_parent),
        };
        // Per tree node: embedding, parent context for layer encoding, and
        // (nonterminals only) the depth state.
        let mut emb = vec![root_emb];
        let mut parent_ctx = vec![root_parent];
        let mut s_state = vec![Some(self.depth_step(g, None, root_emb)?)];
        let mut layer = vec![tree.root()];
        let mut depth = 0;
        let mut terms = Vec::new();
        let mut replay_pos = 0;

        loop {
            let parents: Vec<usize> = layer.iter().copied().filter(|&n| !tree.is_terminal(n)).collect();
            if parents.is_empty() {
                break;
            }
            let encoded = {
                let pairs: Vec<(NodeId, NodeId)> = layer.iter().map(|&n| (emb[n], parent_ctx[n])).collect();
                self.encode_layer(g, &pairs)?
            };
            let h_of = |n: usize| encoded[layer.iter().position(|&m| m == n).expect("node in layer")];

            let start = self.embed(g, LAYER_START_ROW)?;
            let mut u = self.gen_step(g, None, start)?;
            let mut next = Vec::new();
            for (j, &p) in parents.iter().enumerate() {
                let h_p = h_of(p);
                let s_p = s_state[p].expect("nonterminal has a depth state");
                let remaining = parents.len() - j - 1;
                let mut k = 0;
                loop {
                    let mask = StepMask::for_child(&self.cfg, depth + 1, k, next.len(), remaining);
                    let z = match cond {
                        Some(c) => match c.extra(g, u, h_p)? {
                            Some(x) => g.concat(&[u, s_p, h_p, x]),
                            None => g.concat(&[u, s_p, h_p]),
                        },
                        None => g.concat(&[u, s_p, h_p]),
                    };
                    let mut heads = self.predict(g, z, &mask)?;
                    let (chosen, fed) = match &mut policy {
                        Policy::Replay { children, teacher_forcing, rng, .. } => {
                            let gold = *children.get(replay_pos).ok_or_else(|| {
                                Error::Contract("replayed decision sequence ended early".into())
                            })?;
                            replay_pos += 1;
                            let mut fed = gold;
                            if *teacher_forcing < 1.0 {
                                if let Some(r) = rng.as_deref_mut() {
                                    if r.gen::<f64>() >= *teacher_forcing {
                                        fed = heads.distribution(g)?.argmax();
                                    }
                                }
                            }
                            (gold, fed)
                        }
                        Policy::Greedy { .. } => {
                            let o = heads.distribution(g)?.argmax();
                            (o, o)
                        }
                        Policy::Sample { rng, .. } => {
                            let o = heads.distribution(g)?.sample(rng)?;
                            (o, o)
                        }
                    };
                    if !mask.allows(chosen) {
                        return Err(Error::Contract(format!(
                            "decision {chosen:?} for child {k} of {:?} at depth {} violates the decoder caps \
                             (max_depth {}, max_children {}, max_layer_width {})",
                            tree.label(p),
                            depth + 1,
                            self.cfg.max_depth,
                            self.cfg.max_children,
                            self.cfg.max_layer_width
                        )));
                    }
                    let term = heads.log_prob(g, chosen)?;
                    recorded.push(g.scalar(term));
                    terms.push(term);
                    outcomes.push(chosen);
                    let fed_emb = self.embed(g, fed.embedding_row(vocab))?;
                    u = self.gen_step(g, Some(u), fed_emb)?;

                    let (label, kind) = match chosen {
                        Outcome::Stop => break,
                        Outcome::Nonterminal(i) => (vocab.nonterminals.symbol(i), NodeKind::Nonterminal),
                        Outcome::Terminal(i) => (vocab.terminals.symbol(i), NodeKind::Terminal),
                    };
                    let child = tree.add_child(p, label, kind);
                    let child_emb =
                        if fed == chosen { fed_emb } else { self.embed(g, chosen.embedding_row(vocab))? };
                    emb.push(child_emb);
                    parent_ctx.push(h_p);
                    s_state.push(None);
                    next.push(child);
                    k += 1;
                }
            }
            for &c in &next {
                if !tree.is_terminal(c) {
                    let p = tree.node(c).parent.expect("child has a parent");
                    s_state[c] = Some(self.depth_step(g, s_state[p], emb[c])?);
                }
            }
            layer = next;
            depth += 1;
        }
        if let Policy::Replay { children, .. } = &policy {
            if replay_pos != children.len() {
                return Err(Error::Contract(format!(
                    "replayed decision sequence has {} unused decisions",
                    children.len() - replay_pos
                )));
            }
        }
        Ok(Unrolled { tree, root_term, terms, recorded, outcomes })
    }

    /// Teacher-forced `log p(tree)` node; `score_root` includes the root term.
    pub fn tree_log_prob(
        &self,
        g: &mut Graph,
        tree: &Tree,
        cond: Option<&dyn Conditioner>,
        score_root: bool,
    ) -> Result<NodeId> {
        let (root, children) = self.decisions(tree)?;
        let u = self.unroll(g, cond, Policy::Replay { root, children, teacher_forcing: 1.0, rng: None }, score_root)?;
        u.log_prob(g)
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

/// Generated tree with its recorded decision log-probabilities.
#[derive(Debug, Clone)]
pub struct Generated {
    pub tree: Tree,
    pub recorded: Vec<f64>,
}

impl Generated {
    pub fn log_prob(&self) -> f64 {
        self.recorded.iter().sum()
    }
}

/// Unconditional tree model: decoder plus its parameters.
#[derive(Debug, Clone)]
pub struct TdtdModel {
    pub decoder: Decoder,
    pub store: ParamStore,
}

pub const PARAM_PREFIX: &str = "tdtd";

impl TdtdModel {
    pub fn new(cfg: TdtdConfig, vocab: TreeVocab, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let params = DecoderParams::register(&mut store, PARAM_PREFIX, &cfg, &vocab, 0, &mut rng)?;
        Ok(TdtdModel { decoder: Decoder { cfg, vocab, params }, store })
    }

    /// `log p(tree)` including the root term.
    pub fn tree_log_prob(&self, tree: &Tree) -> Result<f64> {
        let mut g = Graph::new(&self.store);
        let lp = self.decoder.tree_log_prob(&mut g, tree, None, true)?;
        Ok(g.scalar(lp))
    }

    /// `log p(tree | root label)`.
    pub fn conditional_log_prob(&self, tree: &Tree) -> Result<f64> {
        let mut g = Graph::new(&self.store);
        let lp = self.decoder.tree_log_prob(&mut g, tree, None, false)?;
        Ok(g.scalar(lp))
    }

    /// Negative log-likelihood and its gradients, with scheduled sampling on
    /// the generation recurrence when `teacher_forcing < 1`.
    pub fn loss_and_grads(
        &self,
        tree: &Tree,
        teacher_forcing: f64,
        rng: &mut dyn RngCore,
    ) -> Result<(f64, Gradients)> {
        let (root, children) = self.decoder.decisions(tree)?;
        let mut g = Graph::new(&self.store);
        let policy = Policy::Replay { root, children, teacher_forcing, rng: Some(rng) };
        let u = self.decoder.unroll(&mut g, None, policy, true)?;
        let lp = u.log_prob(&mut g)?;
        let loss = g.scale(lp, -1.0);
        Ok((g.scalar(loss), g.backward(loss, 1.0)?))
    }

    pub fn sample(&self, rng: &mut dyn RngCore, root: Option<usize>) -> Result<Generated> {
        self.run(Policy::Sample { root, rng })
    }

    pub fn greedy(&self, root: Option<usize>) -> Result<Generated> {
        self.run(Policy::Greedy { root })
    }

    fn run(&self, policy: Policy) -> Result<Generated> {
        let mut g = Graph::new(&self.store);
        let u = self.decoder.unroll(&mut g, None, policy, true)?;
        Ok(Generated { tree: u.tree, recorded: u.recorded })
    }
}
