//! `tdtd` experiment harness.
//!
//! Every subcommand accepts `--config FILE` plus one flag per configuration
//! key, writes a manifest under `runs/<name>/`, and ends its output with a
//! single summary line whose last word is `OK` or `FAIL`.

use std::ffi::OsString;
use std::fmt::Display;
use std::io::Write;

use anyhow::{anyhow, Result};
use clap::{Arg, ArgAction, ArgMatches, Command};

pub mod commands;
pub mod config;
pub mod run_dir;

use config::{flag, load_config, ExperimentConfig, Kind, KEYS, SEED_ENV};

pub const SUBCOMMANDS: &[(&str, &str)] = &[
    ("gen-data", "sample a treebank from a PCFG"),
    ("train", "train a tdtd, tdtd-p, or seq-lm model"),
    ("generate", "sample trees or token sequences from a model"),
    ("score", "log-probabilities of trees or sequences"),
    ("rerank", "order candidate parses by model score"),
    ("eval-nll", "oracle NLL, Fail and Dup statistics of samples"),
    ("eval-bleu", "BLEU-n of candidate sentences against references"),
    ("eval-f1", "labeled bracket F1"),
    ("grad-check", "compare analytic gradients with finite differences"),
    ("corpus-filter", "length and word-frequency filtering with a train/test split"),
];

/// One-line machine-readable result.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub command: String,
    pub fields: Vec<(String, String)>,
    pub ok: bool,
}

impl Summary {
    pub fn new(command: &str) -> Self {
        Summary { command: command.to_string(), fields: Vec::new(), ok: true }
    }

    pub fn field(mut self, key: &str, value: impl Display) -> Self {
        self.fields.push((key.to_string(), value.to_string()));
        self
    }

    pub fn line(&self) -> String {
        let mut s = self.command.clone();
        for (k, v) in &self.fields {
            s.push_str(&format!(" {k}={v}"));
        }
        s.push_str(if self.ok { " OK" } else { " FAIL" });
        s
    }
}

fn cli() -> Command {
    let mut root = Command::new("tdtd")
        .about("Breadth-first tree decoder experiments")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for (name, about) in SUBCOMMANDS {
        let mut sub = Command::new(*name)
            .about(*about)
            .arg(Arg::new("config").long("config").value_name("FILE").help("key = value settings file"));
        for k in KEYS {
            let mut arg = Arg::new(k.name).long(flag(k.name)).help(k.help).action(ArgAction::Set);
            arg = match k.kind {
                Kind::Bool => arg.num_args(0..=1).default_missing_value("true").value_name("BOOL"),
                Kind::Choice(options) => arg.value_name(options.join("|")),
                Kind::Input | Kind::Output => arg.value_name("PATH"),
                _ => arg.value_name("VALUE"),
            };
            sub = sub.arg(arg);
        }
        root = root.subcommand(sub);
    }
    root
}

fn resolve(m: &ArgMatches, seed_env: Option<String>) -> Result<ExperimentConfig> {
    let mut cfg = match m.get_one::<String>("config") {
        Some(path) => load_config(path.as_ref())?,
        None => ExperimentConfig::default(),
    };
    let mut flags = ExperimentConfig::default();
    for k in KEYS {
        if let Some(v) = m.get_one::<String>(k.name) {
            flags.set(k.name, v).map_err(|e| anyhow!("--{}: {e}", flag(k.name)))?;
        }
    }
    cfg.merge(&flags);
    cfg.apply_seed_env(seed_env)?;
    cfg.check_paths()?;
    Ok(cfg)
}

fn execute(name: &str, m: &ArgMatches, out: &mut dyn Write) -> Result<Summary> {
    let cfg = resolve(m, std::env::var(SEED_ENV).ok())?;
    let threads = cfg.usize("threads")?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build()?;
    let mut body = Vec::new();
    let result = pool.install(|| commands::dispatch(name, &cfg, &mut body));
    out.write_all(&body)?;
    result
}

/// Runs one subcommand; `args` excludes the program name.
pub fn run_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv = std::iter::once(OsString::from("tdtd")).chain(args.into_iter().map(Into::into));
    let matches = match cli().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            if code == 0 {
                let _ = write!(out, "{text}");
            } else {
                let _ = write!(err, "{text}");
            }
            return code;
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    match execute(name, sub, out) {
        Ok(summary) => {
            let _ = writeln!(out, "{}", summary.line());
            if summary.ok {
                0
            } else {
                1
            }
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            let _ = writeln!(out, "{} FAIL", name);
            1
        }
    }
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(args, &mut stdout.lock(), &mut stderr.lock())
}
