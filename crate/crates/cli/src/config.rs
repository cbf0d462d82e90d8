//! Experiment configuration: a flat `key = value` map shared by every
//! subcommand. Precedence is defaults, then the config file, then flags,
//! with `TDTD_SEED` consulted only when no seed was given at all.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use tdtd_core::decoder::TdtdConfig;
use tdtd_core::model::ModelKind;
use tdtd_core::seq_lm::SeqLmConfig;
use tdtd_core::training::TrainConfig;

pub const SEED_ENV: &str = "TDTD_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Usize,
    U64,
    F64,
    Bool,
    Text,
    /// A file that must exist once the configuration is resolved.
    Input,
    Output,
    Choice(&'static [&'static str]),
}

#[derive(Debug, Clone, Copy)]
pub struct KeySpec {
    pub name: &'static str,
    pub default: Option<&'static str>,
    pub kind: Kind,
    pub help: &'static str,
}

const fn key(name: &'static str, default: Option<&'static str>, kind: Kind, help: &'static str) -> KeySpec {
    KeySpec { name, default, kind, help }
}

pub const KEYS: &[KeySpec] = &[
    key("model", Some("tdtd"), Kind::Choice(&["tdtd", "tdtd-p", "seq-lm"]), "model family"),
    key("hidden_size", Some("32"), Kind::Usize, "recurrent state size"),
    key("embed_size", Some("32"), Kind::Usize, "symbol embedding size"),
    key("max_depth", Some("7"), Kind::Usize, "decoder depth cap"),
    key("max_children", Some("8"), Kind::Usize, "decoder children-per-node cap"),
    key("max_layer_width", Some("64"), Kind::Usize, "decoder layer width cap"),
    key("max_length", Some("200"), Kind::Usize, "sequence model length cap"),
    key("scaled_attention", Some("true"), Kind::Bool, "divide parser attention scores by sqrt(d)"),
    key("unk", Some("false"), Kind::Bool, "reserve an unknown-word terminal for tdtd"),
    key("learning_rate", Some("0.005"), Kind::F64, "optimizer step size"),
    key("batch_size", Some("16"), Kind::Usize, "examples per update"),
    key("epochs", Some("10"), Kind::Usize, "training epochs"),
    key("optimizer", Some("adam"), Kind::Choice(&["adam", "sgd"]), "optimizer"),
    key("clip_norm", Some("5"), Kind::F64, "global gradient norm clip"),
    key("curriculum", Some("false"), Kind::Bool, "train on shallow, narrow trees first"),
    key("curriculum_depth", Some("3"), Kind::Usize, "initial curriculum depth cap"),
    key("curriculum_width", Some("4"), Kind::Usize, "initial curriculum width cap"),
    key("curriculum_period", Some("1"), Kind::Usize, "epochs between curriculum relaxations"),
    key("curriculum_increment", Some("1"), Kind::Usize, "cap increase per relaxation"),
    key("tf_initial", Some("1"), Kind::F64, "initial teacher-forcing probability"),
    key("tf_final", Some("1"), Kind::F64, "final teacher-forcing probability"),
    key("tf_anneal_steps", Some("1"), Kind::Usize, "optimizer steps to reach tf_final"),
    key("tf_schedule", Some("linear"), Kind::Choice(&["linear", "exponential"]), "teacher-forcing annealing"),
    key("eval_period", Some("1"), Kind::Usize, "epochs between dev evaluations"),
    key("seed", None, Kind::U64, "random seed (falls back to TDTD_SEED)"),
    key("grammar", None, Kind::Input, "PCFG rule file"),
    key("start", Some("S_*"), Kind::Text, "start symbols: a family like S_* or a comma list"),
    key("nodes", None, Kind::Usize, "nonterminal count of generated trees"),
    key("count", None, Kind::Usize, "number of trees or samples"),
    key("grammar_max_depth", Some("7"), Kind::Usize, "depth cap for PCFG sampling"),
    key("penalty", Some("1e-6"), Kind::F64, "probability charged for rules missing from the grammar"),
    key("train", None, Kind::Input, "training treebank"),
    key("dev", None, Kind::Input, "held-out treebank"),
    key("checkpoint", None, Kind::Input, "model file"),
    key("input", None, Kind::Input, "input file"),
    key("format", Some("trees"), Kind::Choice(&["trees", "tokens", "text"]), "input format"),
    key("candidates", None, Kind::Input, "rerank candidate blocks"),
    key("gold", None, Kind::Input, "gold treebank"),
    key("predicted", None, Kind::Input, "predicted treebank"),
    key("references", None, Kind::Input, "BLEU reference file"),
    key("bleu_n", Some("4"), Kind::Usize, "largest BLEU n-gram order"),
    key("bleu_mode", Some("sentence"), Kind::Choice(&["sentence", "corpus"]), "BLEU aggregation"),
    key("json", Some("false"), Kind::Bool, "print the report as one JSON object"),
    key("gradcheck_eps", Some("1e-5"), Kind::F64, "finite-difference step"),
    key("gradcheck_coords", Some("20"), Kind::Usize, "coordinates checked per parameter tensor"),
    key("min_len", Some("17"), Kind::Usize, "shortest kept sentence"),
    key("max_len", Some("25"), Kind::Usize, "longest kept sentence"),
    key("freq_threshold", Some("180"), Kind::Usize, "minimum corpus count of every word in a kept sentence"),
    key("train_size", Some("80000"), Kind::Usize, "sentences in the training split"),
    key("test_size", Some("3000"), Kind::Usize, "sentences in the test split"),
    key("out", None, Kind::Output, "output file (defaults to a file in the run directory)"),
    key("name", None, Kind::Text, "run name (defaults to the subcommand)"),
    key("runs_dir", Some("runs"), Kind::Output, "parent of run directories"),
    key("threads", Some("0"), Kind::Usize, "worker threads (0 = all cores)"),
];

pub fn spec(name: &str) -> Option<&'static KeySpec> {
    KEYS.iter().find(|k| k.name == name)
}

fn check_value(spec: &KeySpec, value: &str) -> std::result::Result<(), String> {
    let ok = match spec.kind {
        Kind::Usize => value.parse::<usize>().is_ok(),
        Kind::U64 => value.parse::<u64>().is_ok(),
        Kind::F64 => value.parse::<f64>().is_ok_and(f64::is_finite),
        Kind::Bool => value.parse::<bool>().is_ok(),
        Kind::Text => true,
        Kind::Input | Kind::Output => !value.is_empty(),
        Kind::Choice(options) => options.contains(&value),
    };
    if ok {
        return Ok(());
    }
    let expected = match spec.kind {
        Kind::Usize | Kind::U64 => "a non-negative integer".to_string(),
        Kind::F64 => "a finite number".to_string(),
        Kind::Bool => "true or false".to_string(),
        Kind::Choice(options) => format!("one of {}", options.join(", ")),
        _ => "a non-empty path".to_string(),
    };
    Err(format!("{}: expected {expected}, got {value:?}", spec.name))
}

/// A config file problem at a 1-based line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExperimentConfig {
    values: BTreeMap<&'static str, String>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> std::result::Result<Self, ConfigError> {
        let mut cfg = ExperimentConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| ConfigError { line: i + 1, message };
            let (k, v) = line.split_once('=').ok_or_else(|| err(format!("expected `key = value`, got {line:?}")))?;
            cfg.set(k.trim(), v.trim()).map_err(err)?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let spec = spec(key).ok_or_else(|| format!("unknown key {key:?}"))?;
        check_value(spec, value)?;
        self.values.insert(spec.name, value.to_string());
        Ok(())
    }

    /// Copies every explicitly set value of `other` over this one.
    pub fn merge(&mut self, other: &ExperimentConfig) {
        for (k, v) in &other.values {
            self.values.insert(k, v.clone());
        }
    }

    pub fn is_set(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str).or_else(|| spec(key).and_then(|s| s.default))
    }

    fn typed<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key).ok_or_else(|| anyhow!("missing required setting `{key}` (pass --{})", flag(key)))?;
        v.parse().map_err(|_| anyhow!("{key}: cannot parse {v:?}"))
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.typed(key)
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        self.typed(key)
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        self.typed(key)
    }

    pub fn text(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| anyhow!("missing required setting `{key}` (pass --{})", flag(key)))
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.get(key).map(PathBuf::from)
    }

    pub fn required_path(&self, key: &str) -> Result<PathBuf> {
        self.text(key).map(PathBuf::from)
    }

    pub fn seed(&self) -> Result<u64> {
        match self.get("seed") {
            Some(v) => Ok(v.parse()?),
            None => bail!("a seed is required: pass --seed, set `seed` in the config, or export {SEED_ENV}"),
        }
    }

    pub fn model_kind(&self) -> Result<ModelKind> {
        self.text("model")?.parse().map_err(|e: String| anyhow!(e))
    }

    /// Applies `TDTD_SEED` when no seed was configured.
    pub fn apply_seed_env(&mut self, env: Option<String>) -> Result<()> {
        if let (false, Some(v)) = (self.is_set("seed"), env) {
            self.set("seed", v.trim()).map_err(|e| anyhow!("{SEED_ENV}: {e}"))?;
        }
        Ok(())
    }

    /// Every configured input file must exist.
    pub fn check_paths(&self) -> Result<()> {
        for (k, v) in &self.values {
            if spec(k).is_some_and(|s| s.kind == Kind::Input) && !Path::new(v).is_file() {
                bail!("{k}: no such file {v:?}");
            }
        }
        Ok(())
    }

    pub fn input_paths(&self) -> Vec<(&'static str, PathBuf)> {
        self.values
            .iter()
            .filter(|(k, _)| spec(k).is_some_and(|s| s.kind == Kind::Input))
            .map(|(k, v)| (*k, PathBuf::from(v)))
            .collect()
    }

    pub fn tdtd_config(&self) -> Result<TdtdConfig> {
        let mut c = TdtdConfig::default();
        for (k, v) in self.resolved() {
            c.set(k, &v).map_err(|e| anyhow!(e))?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn seq_config(&self) -> Result<SeqLmConfig> {
        let mut c = SeqLmConfig::default();
        for (k, v) in self.resolved() {
            c.set(k, &v).map_err(|e| anyhow!(e))?;
        }
        Ok(c)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut c = TrainConfig::default();
        for (k, v) in self.resolved() {
            if k != "seed" {
                c.set(k, &v).map_err(|e| anyhow!(e))?;
            }
        }
        c.seed = self.seed()?;
        c.validate()?;
        Ok(c)
    }

    /// Effective value of every key that has one, in registry order.
    pub fn resolved(&self) -> Vec<(&'static str, String)> {
        KEYS.iter().filter_map(|s| self.get(s.name).map(|v| (s.name, v.to_string()))).collect()
    }

    /// `key = value` text that [`load_config`] reads back unchanged.
    pub fn to_text(&self) -> String {
        self.resolved().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

pub fn flag(key: &str) -> String {
    key.replace('_', "-")
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    ExperimentConfig::parse(&text).map_err(|e| anyhow!("{}: {e}", path.display()))
}
