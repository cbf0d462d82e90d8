//! Maximum-likelihood training with curriculum filtering and scheduled
//! sampling, shared by every model kind.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Gradients, Optimizer, OptimizerKind, ParamStore};
use crate::decoder::TdtdModel;
use crate::error::{Error, Result};
use crate::parser::ParserModel;
use crate::seq_lm::SeqLm;
use crate::treebank::Tree;

/// A model that can be fitted to trees.
pub trait Trainable: Sync {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    /// Negative log-likelihood of one example and its gradients.
    fn example_loss(&self, tree: &Tree, teacher_forcing: f64, rng: &mut dyn RngCore) -> Result<(f64, Gradients)>;
    /// Teacher-forced negative log-likelihood used for held-out evaluation.
    fn eval_nll(&self, tree: &Tree) -> Result<f64>;
}

impl Trainable for TdtdModel {
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
    fn example_loss(&self, tree: &Tree, tf: f64, rng: &mut dyn RngCore) -> Result<(f64, Gradients)> {
        self.loss_and_grads(tree, tf, rng)
    }
    fn eval_nll(&self, tree: &Tree) -> Result<f64> {
        Ok(-self.tree_log_prob(tree)?)
    }
}

impl Trainable for ParserModel {
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
    fn example_loss(&self, tree: &Tree, tf: f64, rng: &mut dyn RngCore) -> Result<(f64, Gradients)> {
        self.loss_and_grads(tree, tf, rng)
    }
    fn eval_nll(&self, tree: &Tree) -> Result<f64> {
        Ok(-self.conditional_log_prob(tree, &tree.words())?)
    }
}

impl Trainable for SeqLm {
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
    fn example_loss(&self, tree: &Tree, tf: f64, rng: &mut dyn RngCore) -> Result<(f64, Gradients)> {
        self.loss_and_grads(&tree.linearize_brackets(), tf, rng)
    }
    fn eval_nll(&self, tree: &Tree) -> Result<f64> {
        Ok(-self.sequence_log_prob(&tree.linearize_brackets())?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Anneal {
    Linear,
    /// Geometric interpolation between the initial and final probability.
    Exponential,
}

impl FromStr for Anneal {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "linear" => Ok(Anneal::Linear),
            "exponential" => Ok(Anneal::Exponential),
            _ => Err(format!("unknown anneal schedule {s:?} (expected linear or exponential)")),
        }
    }
}

impl std::fmt::Display for Anneal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Anneal::Linear => "linear",
            Anneal::Exponential => "exponential",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub clip_norm: f64,
    pub curriculum: bool,
    pub curriculum_depth: usize,
    pub curriculum_width: usize,
    pub curriculum_period: usize,
    pub curriculum_increment: usize,
    pub tf_initial: f64,
    pub tf_final: f64,
    pub tf_anneal_steps: usize,
    pub tf_schedule: Anneal,
    pub seed: u64,
    pub eval_period: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.005,
            batch_size: 16,
            epochs: 10,
            optimizer: OptimizerKind::Adam,
            clip_norm: 5.0,
            curriculum: false,
            curriculum_depth: 3,
            curriculum_width: 4,
            curriculum_period: 1,
            curriculum_increment: 1,
            tf_initial: 1.0,
            tf_final: 1.0,
            tf_anneal_steps: 1,
            tf_schedule: Anneal::Linear,
            seed: 0,
            eval_period: 1,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value.parse().map_err(|_| format!("{key}: cannot parse {value:?}"))
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<bool, String> {
        match key {
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "optimizer" => self.optimizer = value.parse()?,
            "clip_norm" => self.clip_norm = parse(key, value)?,
            "curriculum" => self.curriculum = parse(key, value)?,
            "curriculum_depth" => self.curriculum_depth = parse(key, value)?,
            "curriculum_width" => self.curriculum_width = parse(key, value)?,
            "curriculum_period" => self.curriculum_period = parse(key, value)?,
            "curriculum_increment" => self.curriculum_increment = parse(key, value)?,
            "tf_initial" => self.tf_initial = parse(key, value)?,
            "tf_final" => self.tf_final = parse(key, value)?,
            "tf_anneal_steps" => self.tf_anneal_steps = parse(key, value)?,
            "tf_schedule" => self.tf_schedule = value.parse()?,
            "seed" => self.seed = parse(key, value)?,
            "eval_period" => self.eval_period = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("learning_rate", self.learning_rate.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("optimizer", self.optimizer.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("curriculum", self.curriculum.to_string()),
            ("curriculum_depth", self.curriculum_depth.to_string()),
            ("curriculum_width", self.curriculum_width.to_string()),
            ("curriculum_period", self.curriculum_period.to_string()),
            ("curriculum_increment", self.curriculum_increment.to_string()),
            ("tf_initial", self.tf_initial.to_string()),
            ("tf_final", self.tf_final.to_string()),
            ("tf_anneal_steps", self.tf_anneal_steps.to_string()),
            ("tf_schedule", self.tf_schedule.to_string()),
            ("seed", self.seed.to_string()),
            ("eval_period", self.eval_period.to_string()),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Training(format!("invalid configuration: {m}")));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        for (k, p) in [("tf_initial", self.tf_initial), ("tf_final", self.tf_final)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(&format!("{k} must lie in [0, 1]"));
            }
        }
        if self.tf_anneal_steps == 0 {
            return bad("tf_anneal_steps must be at least 1");
        }
        if self.tf_schedule == Anneal::Exponential && (self.tf_initial == 0.0 || self.tf_final == 0.0) {
            return bad("exponential annealing needs positive tf_initial and tf_final");
        }
        if self.curriculum_period == 0 {
            return bad("curriculum_period must be at least 1");
        }
        if self.eval_period == 0 {
            return bad("eval_period must be at least 1");
        }
        Ok(())
    }

    /// Curriculum caps `(depth, width)` in force at `epoch`.
    pub fn caps(&self, epoch: usize) -> Option<(usize, usize)> {
        self.curriculum.then(|| {
            let k = self.curriculum_increment * (epoch / self.curriculum_period);
            (self.curriculum_depth + k, self.curriculum_width + k)
        })
    }

    /// Teacher-forcing probability at optimizer step `step`.
    pub fn teacher_forcing_prob(&self, step: usize) -> f64 {
        let frac = (step as f64 / self.tf_anneal_steps as f64).min(1.0);
        if frac >= 1.0 {
            return self.tf_final;
        }
        match self.tf_schedule {
            Anneal::Linear => self.tf_initial + (self.tf_final - self.tf_initial) * frac,
            Anneal::Exponential => self.tf_initial * (self.tf_final / self.tf_initial).powf(frac),
        }
    }
}

/// Indices of the trees admitted by the curriculum at `epoch`.
pub fn curriculum_filter(trees: &[Tree], epoch: usize, cfg: &TrainConfig) -> Result<Vec<usize>> {
    let Some((depth, width)) = cfg.caps(epoch) else {
        return Ok((0..trees.len()).collect());
    };
    let kept: Vec<usize> =
        (0..trees.len()).filter(|&i| trees[i].depth() <= depth && trees[i].max_layer_width() <= width).collect();
    if kept.is_empty() {
        return Err(Error::Training(format!(
            "curriculum at epoch {epoch} (depth <= {depth}, width <= {width}) keeps no training tree; \
             raise curriculum_depth or curriculum_width"
        )));
    }
    Ok(kept)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_nll: Option<f64>,
    pub dev_nll: Option<f64>,
    pub tf_prob: f64,
    pub caps: Option<(usize, usize)>,
    pub examples: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub rows: Vec<EpochRow>,
}

impl TrainReport {
    pub const HEADER: &'static str =
        "epoch\ttrain_nll\tdev_nll\ttf_prob\tcurriculum_depth_cap\tcurriculum_width_cap";

    pub fn to_tsv(&self) -> String {
        let opt_f = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.10}"));
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for r in &self.rows {
            let (d, w) = r.caps.map_or(("-".to_string(), "-".to_string()), |(d, w)| (d.to_string(), w.to_string()));
            writeln!(s, "{}\t{}\t{}\t{:.6}\t{d}\t{w}", r.epoch, opt_f(r.train_nll), opt_f(r.dev_nll), r.tf_prob)
                .expect("write to string");
        }
        s
    }

    pub fn last_dev_nll(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.dev_nll)
    }
}

/// Mean held-out negative log-likelihood, or `None` for an empty set.
pub fn mean_nll<M: Trainable>(model: &M, trees: &[Tree]) -> Result<Option<f64>> {
    if trees.is_empty() {
        return Ok(None);
    }
    let nlls: Vec<f64> = trees.par_iter().map(|t| model.eval_nll(t)).collect::<Result<_>>()?;
    Ok(Some(nlls.iter().sum::<f64>() / nlls.len() as f64))
}

/// Seed of the per-example rng used for scheduled sampling.
fn example_seed(seed: u64, step: usize, slot: usize) -> u64 {
    seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (slot as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
}

/// Called after every epoch with the epoch number and the parameters.
pub type CheckpointSink<'a> = dyn FnMut(usize, &ParamStore) -> Result<()> + 'a;

/// Trains `model` on `train`; `dev` is scored at initialization and every
/// `eval_period` epochs. Example losses within a batch are computed in
/// parallel but summed in example order, so runs are bit-reproducible.
pub fn train<M: Trainable>(
    model: &mut M,
    train: &[Tree],
    dev: &[Tree],
    cfg: &TrainConfig,
    sink: &mut CheckpointSink,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Training("empty training set".into()));
    }
    let mut report = TrainReport::default();
    report.rows.push(EpochRow {
        epoch: 0,
        train_nll: None,
        dev_nll: mean_nll(model, dev)?,
        tf_prob: cfg.teacher_forcing_prob(0),
        caps: cfg.caps(0),
        examples: 0,
    });
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order = curriculum_filter(train, epoch, cfg)?;
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        let mut tf = cfg.teacher_forcing_prob(step);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            tf = cfg.teacher_forcing_prob(step);
            let model_ref: &M = model;
            let results: Vec<(f64, Gradients)> = batch
                .par_iter()
                .enumerate()
                .map(|(slot, &i)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(example_seed(cfg.seed, step, slot));
                    model_ref.example_loss(&train[i], tf, &mut rng)
                })
                .collect::<Result<_>>()?;
            let batch_loss: f64 = results.iter().map(|(l, _)| l).sum();
            let store = model.store_mut();
            store.zero_grads();
            let scale = 1.0 / batch.len() as f64;
            for (_, g) in &results {
                store.accumulate(g, scale);
            }
            let norm = store.grad_norm();
            if !batch_loss.is_finite() || !norm.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss at epoch {} batch {b}: loss {batch_loss}, gradient norm {norm}, parameter norm {}",
                    epoch + 1,
                    store.value_norm()
                )));
            }
            if norm > cfg.clip_norm {
                store.scale_grads(cfg.clip_norm / norm);
            }
            opt.step(store)?;
            total += batch_loss;
            step += 1;
        }
        let done = epoch + 1;
        let dev_nll = if done % cfg.eval_period == 0 || done == cfg.epochs { mean_nll(model, dev)? } else { None };
        report.rows.push(EpochRow {
            epoch: done,
            train_nll: Some(total / order.len() as f64),
            dev_nll,
            tf_prob: tf,
            caps: cfg.caps(epoch),
            examples: order.len(),
        });
        sink(done, model.store())?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::TdtdConfig;
    use crate::pcfg::{Grammar, StartSymbols, TOY_GRAMMAR};
    use crate::vocab::TreeVocab;

    fn data() -> (Vec<Tree>, Vec<Tree>) {
        let g = Grammar::parse(TOY_GRAMMAR, &StartSymbols::default()).unwrap();
        let trees = g.generate_dataset(60, 6, 7, 5, None).unwrap();
        (trees[..48].to_vec(), trees[48..].to_vec())
    }

    fn tiny_model(trees: &[Tree]) -> TdtdModel {
        let vocab = TreeVocab::from_trees(trees, false).unwrap();
        TdtdModel::new(TdtdConfig { hidden_size: 8, embed_size: 8, ..TdtdConfig::default() }, vocab, 1).unwrap()
    }

    #[test]
    fn teacher_forcing_schedule() {
        let cfg = TrainConfig { tf_initial: 1.0, tf_final: 0.5, tf_anneal_steps: 1000, ..TrainConfig::default() };
        assert_eq!(cfg.teacher_forcing_prob(0), 1.0);
        assert!((cfg.teacher_forcing_prob(500) - 0.75).abs() < 1e-15);
        assert_eq!(cfg.teacher_forcing_prob(1000), 0.5);
        assert_eq!(cfg.teacher_forcing_prob(5000), 0.5);
        let exp = TrainConfig { tf_schedule: Anneal::Exponential, ..cfg.clone() };
        assert!((exp.teacher_forcing_prob(500) - 0.5f64.sqrt()).abs() < 1e-15);
        let zero = TrainConfig { tf_final: 0.0, ..exp };
        assert!(zero.validate().is_err());
    }

    #[test]
    fn curriculum_schedule() {
        let (train, _) = data();
        let cfg = TrainConfig { curriculum: true, curriculum_depth: 3, curriculum_width: 2, ..TrainConfig::default() };
        let mut prev = 0;
        for epoch in 0..8 {
            match curriculum_filter(&train, epoch, &cfg) {
                Ok(kept) => {
                    assert!(kept.iter().all(|&i| train[i].depth() <= 3 + epoch));
                    assert!(kept.len() >= prev);
                    prev = kept.len();
                }
                Err(e) => assert_eq!(epoch, 0, "{e}"),
            }
        }
        assert_eq!(prev, train.len());
        let loose = TrainConfig { curriculum_depth: 100, curriculum_width: 100, ..cfg };
        assert_eq!(curriculum_filter(&train, 0, &loose).unwrap().len(), train.len());
    }

    #[test]
    fn zero_epochs_reports_initial_dev_only() {
        let (train, dev) = data();
        let mut m = tiny_model(&train);
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let r = train_fn(&mut m, &train, &dev, &cfg);
        assert_eq!(r.rows.len(), 1);
        assert!(r.rows[0].dev_nll.is_some() && r.rows[0].train_nll.is_none());
        assert!(r.to_tsv().lines().nth(1).unwrap().starts_with("0\t-\t"));
    }

    fn train_fn(m: &mut TdtdModel, train: &[Tree], dev: &[Tree], cfg: &TrainConfig) -> TrainReport {
        super::train(m, train, dev, cfg, &mut |_, _| Ok(())).unwrap()
    }

    #[test]
    fn training_is_deterministic_and_improves() {
        let (train, dev) = data();
        let cfg = TrainConfig { epochs: 3, batch_size: 8, tf_final: 0.7, tf_anneal_steps: 10, ..TrainConfig::default() };
        let mut a = tiny_model(&train);
        let mut b = tiny_model(&train);
        let mut saved = Vec::new();
        let ra = super::train(&mut a, &train, &dev, &cfg, &mut |e, s| {
            saved.push((e, s.to_checkpoint()));
            Ok(())
        })
        .unwrap();
        let rb = train_fn(&mut b, &train, &dev, &cfg);
        assert_eq!(ra.to_tsv(), rb.to_tsv());
        assert_eq!(a.store.to_checkpoint(), b.store.to_checkpoint());
        assert_eq!(saved.len(), 3);
        assert!(ra.last_dev_nll().unwrap() < ra.rows[0].dev_nll.unwrap());
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostics() {
        let (train, dev) = data();
        let mut m = tiny_model(&train);
        let id = m.store.ids().next().unwrap();
        m.store.get_mut(id).values_mut()[0] = f64::NAN;
        let err = super::train(&mut m, &train, &dev[..0], &TrainConfig::default(), &mut |_, _| Ok(())).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("epoch 1") && msg.contains("parameter norm"), "{msg}");
    }
}
