use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use tdtd_core::autodiff::{gradient_check, GradCheckReport, ParamStore};
use tdtd_core::decoder::TdtdModel;
use tdtd_core::metrics::{bleu_n, corpus_bracket_counts, mean_and_se, sample_report, BleuMode, Sample};
use tdtd_core::model::{AnyModel, ModelKind};
use tdtd_core::parser::{check_yield, rank, ParserModel, Ranked};
use tdtd_core::pcfg::{Grammar, StartSymbols};
use tdtd_core::seq_lm::{self, SeqLm};
use tdtd_core::training::{self, Trainable};
use tdtd_core::treebank::{delinearize_brackets, parse_bracketed, parse_treebank, write_treebank, Tree};
use tdtd_core::vocab::TreeVocab;

use crate::config::ExperimentConfig;
use crate::run_dir::{self, file_digest, RunDir};
use crate::Summary;

/// Tree used by `grad-check` when no input is given: five nodes, three words.
pub const GRAD_CHECK_TREE: &str = "(S (NP the cat) sat)";
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

pub fn dispatch(name: &str, cfg: &ExperimentConfig, out: &mut dyn Write) -> Result<Summary> {
    let run = RunDir::create(cfg, name)?;
    let manifest = run.write_manifest(name, cfg)?;
    let summary = match name {
        "gen-data" => gen_data(cfg, &run)?,
        "train" => train(cfg, &run)?,
        "generate" => generate(cfg, &run)?,
        "score" => score(cfg, &run)?,
        "rerank" => rerank(cfg, &run)?,
        "eval-nll" => eval_nll(cfg, &run, out)?,
        "eval-bleu" => eval_bleu(cfg, &run, out)?,
        "eval-f1" => eval_f1(cfg, &run, out)?,
        "grad-check" => grad_check(cfg)?,
        "corpus-filter" => corpus_filter(cfg, &run)?,
        other => bail!("unknown subcommand {other:?}"),
    };
    Ok(summary.field("manifest", manifest.display()))
}

fn output_path(cfg: &ExperimentConfig, run: &RunDir, default: &str) -> std::path::PathBuf {
    cfg.path("out").unwrap_or_else(|| run.file(default))
}

fn read_trees(path: &Path) -> Result<Vec<Tree>> {
    parse_treebank(&run_dir::read(path)?).with_context(|| format!("in {}", path.display()))
}

fn load_model(cfg: &ExperimentConfig) -> Result<AnyModel> {
    let path = cfg.required_path("checkpoint")?;
    AnyModel::from_text(&run_dir::read(&path)?).with_context(|| format!("in {}", path.display()))
}

fn grammar(cfg: &ExperimentConfig) -> Result<Grammar> {
    let path = cfg.required_path("grammar")?;
    let start = StartSymbols::parse(cfg.text("start")?);
    Grammar::parse(&run_dir::read(&path)?, &start).with_context(|| format!("in {}", path.display()))
}

/// Lines of a sample or sentence file under the configured `format`.
fn read_samples(path: &Path, format: &str) -> Result<Vec<Sample>> {
    let text = run_dir::read(path)?;
    Ok(match format {
        "trees" => read_trees(path)?.into_iter().map(Sample::Tree).collect(),
        "tokens" => text
            .lines()
            .map(|l| Sample::Tokens(l.split_whitespace().map(str::to_string).collect()))
            .collect(),
        other => bail!("format {other} carries no tree structure; use trees or tokens"),
    })
}

fn read_sentences(path: &Path, format: &str) -> Result<Vec<Vec<String>>> {
    if format == "text" {
        let text = run_dir::read(path)?;
        return Ok(text.lines().map(|l| l.split_whitespace().map(str::to_string).collect()).collect());
    }
    // Token samples that do not form a tree contribute an empty sentence.
    Ok(read_samples(path, format)?
        .into_iter()
        .map(|s| match s {
            Sample::Tree(t) => t.words().into_iter().map(str::to_string).collect(),
            Sample::Tokens(toks) => delinearize_brackets(&toks)
                .map(|t| t.words().into_iter().map(str::to_string).collect())
                .unwrap_or_default(),
        })
        .collect())
}

fn format_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"))
}

fn table(fields: &[(&str, String)]) -> String {
    let width = fields.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    fields.iter().map(|(k, v)| format!("{k:<width$}  {v}\n")).collect()
}

fn json(fields: &[(&str, String)]) -> String {
    let map: serde_json::Map<String, serde_json::Value> = fields
        .iter()
        .map(|(k, v)| {
            let value = match v.parse::<f64>() {
                Ok(x) if x.is_finite() => serde_json::json!(x),
                Ok(_) => serde_json::Value::Null,
                Err(_) if v == "-" => serde_json::Value::Null,
                Err(_) => serde_json::Value::String(v.clone()),
            };
            (k.to_string(), value)
        })
        .collect();
    serde_json::Value::Object(map).to_string()
}

/// Writes `report.tsv` and prints the table, or JSON under `--json`.
fn emit(cfg: &ExperimentConfig, run: &RunDir, out: &mut dyn Write, fields: &[(&str, String)]) -> Result<()> {
    let header: Vec<&str> = fields.iter().map(|(k, _)| *k).collect();
    let row: Vec<&str> = fields.iter().map(|(_, v)| v.as_str()).collect();
    run_dir::write(&output_path(cfg, run, "report.tsv"), &format!("{}\n{}\n", header.join("\t"), row.join("\t")))?;
    if cfg.bool("json")? {
        writeln!(out, "{}", json(fields))?;
    } else {
        write!(out, "{}", table(fields))?;
    }
    Ok(())
}

fn gen_data(cfg: &ExperimentConfig, run: &RunDir) -> Result<Summary> {
    let g = grammar(cfg)?;
    let (count, nodes) = (cfg.usize("count")?, cfg.usize("nodes")?);
    let trees = g.generate_dataset(count, nodes, cfg.usize("grammar_max_depth")?, cfg.seed()?, None)?;
    let text = write_treebank(&trees);
    let path = output_path(cfg, run, "trees.txt");
    run_dir::write(&path, &text)?;
    Ok(Summary::new("gen-data")
        .field("trees", trees.len())
        .field("nodes", nodes)
        .field("out", path.display())
        .field("sha256", run_dir::digest(text.as_bytes())))
}

fn build_model(cfg: &ExperimentConfig, trees: &[Tree], seed: u64) -> Result<AnyModel> {
    Ok(match cfg.model_kind()? {
        ModelKind::Tdtd => {
            let vocab = TreeVocab::from_trees(trees, cfg.bool("unk")?)?;
            AnyModel::Tdtd(TdtdModel::new(cfg.tdtd_config()?, vocab, seed)?)
        }
        ModelKind::TdtdP => {
            let vocab = TreeVocab::from_trees(trees, true)?;
            AnyModel::Parser(ParserModel::new(cfg.tdtd_config()?, vocab, cfg.bool("scaled_attention")?, seed)?)
        }
        ModelKind::SeqLm => AnyModel::Seq(SeqLm::new(cfg.seq_config()?, seq_lm::vocab_from_trees(trees), seed)?),
    })
}

fn fit<M: Trainable>(
    model: &mut M,
    skeleton: &AnyModel,
    trees: &[Tree],
    dev: &[Tree],
    cfg: &ExperimentConfig,
    run: &RunDir,
) -> Result<training::TrainReport> {
    let tcfg = cfg.train_config()?;
    let dir = run.file("checkpoints");
    std::fs::create_dir_all(&dir)?;
    let mut sink = |epoch: usize, store: &ParamStore| -> tdtd_core::Result<()> {
        let path = dir.join(format!("epoch-{epoch:03}.model"));
        std::fs::write(&path, skeleton.to_text_with(store))
            .map_err(|e| tdtd_core::Error::Training(format!("writing {}: {e}", path.display())))
    };
    Ok(training::train(model, trees, dev, &tcfg, &mut sink)?)
}

fn train(cfg: &ExperimentConfig, run: &RunDir) -> Result<Summary> {
    let trees = read_trees(&cfg.required_path("train")?)?;
    let dev = match cfg.path("dev") {
        Some(p) => read_trees(&p)?,
        None => Vec::new(),
    };
    let seed = cfg.seed()?;
    let mut model = build_model(cfg, &trees, seed)?;
    let skeleton = model.clone();
    let report = match &mut model {
        AnyModel::Tdtd(m) => fit(m, &skeleton, &trees, &dev, cfg, run)?,
        AnyModel::Parser(m) => fit(m, &skeleton, &trees, &dev, cfg, run)?,
        AnyModel::Seq(m) => fit(m, &skeleton, &trees, &dev, cfg, run)?,
    };
    let report_path = run.file("report.tsv");
    run_dir::write(&report_path, &report.to_tsv())?;
    let model_path = output_path(cfg, run, "model.txt");
    let text = model.to_text();
    run_dir::write(&model_path, &text)?;
    let last = report.rows.last().expect("report has an initial row");
    Ok(Summary::new("train")
        .field("model", model.kind())
        .field("epochs", last.epoch)
        .field("train_nll", format_opt(last.train_nll))
        .field("dev_nll", format_opt(report.last_dev_nll()))
        .field("report", report_path.display())
        .field("out", model_path.display())
        .field("sha256", run_dir::digest(text.as_bytes())))
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn generate(cfg: &ExperimentConfig, run: &RunDir) -> Result<Summary> {
    let model = load_model(cfg)?;
    let (count, seed) = (cfg.usize("count")?, cfg.seed()?);
    let lines: Vec<(String, bool)> = match &model {
        AnyModel::Tdtd(m) => (0..count)
            .into_par_iter()
            .map(|i| {
                let t = m.sample(&mut sample_rng(seed, i), None)?.tree;
                Ok((t.to_bracketed(), t.validate().is_valid()))
            })
            .collect::<Result<_>>()?,
        AnyModel::Seq(m) => (0..count)
            .into_par_iter()
            .map(|i| {
                let s = m.sample(&mut sample_rng(seed, i), m.cfg.max_length)?;
                let valid = s.ended && delinearize_brackets(&s.tokens).is_ok();
                Ok((s.tokens.join(" "), valid))
            })
            .collect::<Result<_>>()?,
        AnyModel::Parser(_) => bail!("generate needs an unconditional model (tdtd or seq-lm); tdtd-p scores trees given a sentence"),
    };
    let path = output_path(cfg, run, "samples.txt");
    let text: String = lines.iter().map(|(l, _)| format!("{l}\n")).collect();
    run_dir::write(&path, &text)?;
    Ok(Summary::new("generate")
        .field("model", model.kind())
        .field("count", count)
        .field("invalid", lines.iter().filter(|(_, v)| !v).count())
        .field("out", path.display()))
}

fn score(cfg: &ExperimentConfig, run: &RunDir) -> Result<Summary> {
    let model = load_model(cfg)?;
    let samples = read_samples(&cfg.required_path("input")?, cfg.text("format")?)?;
    let scores: Vec<f64> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let lp = match (&model, s) {
                (AnyModel::Seq(m), Sample::Tokens(toks)) => m.sequence_log_prob(toks)?,
                (AnyModel::Seq(m), Sample::Tree(t)) => m.sequence_log_prob(&t.linearize_brackets())?,
                (_, Sample::Tokens(toks)) => {
                    let t = delinearize_brackets(toks).map_err(|e| anyhow!("sample {}: {e}", i + 1))?;
                    tree_score(&model, &t)?
                }
                (_, Sample::Tree(t)) => tree_score(&model, t)?,
            };
            Ok(lp)
        })
        .collect::<Result<_>>()?;
    let path = output_path(cfg, run, "scores.tsv");
    let text: String = scores.iter().enumerate().map(|(i, s)| format!("{i}\t{s:.10}\n")).collect();
    run_dir::write(&path, &text)?;
    let (mean, _) = mean_and_se(&scores);
    Ok(Summary::new("score")
        .field("model", model.kind())
        .field("count", scores.len())
        .field("mean_log_prob", format_opt(mean))
        .field("out", path.display()))
}

/// Joint score for tdtd, score given the tree's own yield for tdtd-p.
fn tree_score(model: &AnyModel, t: &Tree) -> Result<f64> {
    Ok(match model {
        AnyModel::Tdtd(m) => m.tree_log_prob(t)?,
        AnyModel::Parser(m) => m.conditional_log_prob(t, &t.words())?,
        AnyModel::Seq(m) => m.sequence_log_prob(&t.linearize_brackets())?,
    })
}

/// A sentence and its candidate parses.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateBlock {
    pub sentence: Vec<String>,
    pub candidates: Vec<Tree>,
}

/// Blocks separated by blank lines: a tokenized sentence, then one
/// bracketed candidate per line.
pub fn parse_candidates(text: &str) -> Result<Vec<CandidateBlock>> {
    let mut blocks = Vec::new();
    let mut current: Option<CandidateBlock> = None;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            blocks.extend(current.take());
            continue;
        }
        match current.as_mut() {
            None => {
                current = Some(CandidateBlock { sentence: line.split_whitespace().map(str::to_string).collect(), candidates: vec![] })
            }
            Some(b) => {
                let t = parse_bracketed(line).with_context(|| format!("candidate at line {}", i + 1))?;
                check_yield(&t, &b.sentence).with_context(|| format!("candidate at line {}", i + 1))?;
                b.candidates.push(t);
            }
        }
    }
    blocks.extend(current);
    if let Some(i) = blocks.iter().position(|b| b.candidates.is_empty()) {
        bail!("sentence block {} has no candidates", i + 1);
    }
    Ok(blocks)
}

fn rerank(cfg: &ExperimentConfig, run: &RunDir) -> Result<Summary> {
    let model = load_model(cfg)?;
    let blocks = parse_candidates(&run_dir::read(&cfg.required_path("candidates")?)?)?;
    let gold = cfg.path("gold").map(|p| read_trees(&p)).transpose()?;
    if let Some(g) = &gold {
        if g.len() != blocks.len() {
            bail!("{} gold trees for {} candidate blocks", g.len(), blocks.len());
        }
    }
    let mut text = String::new();
    let (mut top1, mut top3) = (0usize, 0usize);
    for (si, b) in blocks.iter().enumerate() {
        let ranked: Vec<Ranked> = match &model {
            AnyModel::Parser(m) => m.rerank(&b.sentence, &b.candidates)?,
            AnyModel::Tdtd(m) => {
                rank(&b.candidates.par_iter().map(|t| m.tree_log_prob(t)).collect::<tdtd_core::Result<Vec<_>>>()?)
            }
            AnyModel::Seq(_) => bail!("rerank needs a tree model (tdtd or tdtd-p)"),
        };
        for (r, c) in ranked.iter().enumerate() {
            text.push_str(&format!("{si}\t{}\t{:.10}\t{}\n", r + 1, c.score, b.candidates[c.index].to_bracketed()));
        }
        if let Some(g) = &gold {
            let pos = ranked.iter().position(|c| b.candidates[c.index] == g[si]);
            top1 += usize::from(pos == Some(0));
            top3 += usize::from(pos.is_some_and(|p| p < 3));
        }
    }
    let path = output_path(cfg, run, "ranked.tsv");
    run_dir::write(&path, &text)?;
    let mut s = Summary::new("rerank")
        .field("sentences", blocks.len())
        .field("candidates", blocks.iter().map(|b| b.candidates.len()).sum::<usize>());
    if gold.is_some() {
        let n = blocks.len().max(1) as f64;
        s = s.field("top1", format!("{:.4}", top1 as f64 / n)).field("top3", format!("{:.4}", top3 as f64 / n));
    }
    Ok(s.field("out", path.display()))
}

fn eval_nll(cfg: &ExperimentConfig, run: &RunDir, out: &mut dyn Write) -> Result<Summary> {
    let g = grammar(cfg)?;
    let samples = read_samples(&cfg.required_path("input")?, cfg.text("format")?)?;
    let report = sample_report(&samples, &g, cfg.f64("penalty")?)?;
    let fields = report.fields();
    emit(cfg, run, out, &fields)?;
    Ok(fields.into_iter().fold(Summary::new("eval-nll"), |s, (k, v)| s.field(k, v)))
}

fn eval_bleu(cfg: &ExperimentConfig, run: &RunDir, out: &mut dyn Write) -> Result<Summary> {
    let format = cfg.text("format")?;
    let cands = read_sentences(&cfg.required_path("input")?, format)?;
    let refs = read_sentences(&cfg.required_path("references")?, format)?;
    let n = cfg.usize("bleu_n")?;
    let mode: BleuMode = cfg.text("bleu_mode")?.parse()?;
    let score = bleu_n(&cands, &refs, n, mode)?;
    let fields = vec![
        ("n", n.to_string()),
        ("mode", mode.to_string()),
        ("candidates", cands.len().to_string()),
        ("references", refs.len().to_string()),
        ("bleu", format!("{score:.6}")),
    ];
    emit(cfg, run, out, &fields)?;
    Ok(fields.into_iter().fold(Summary::new("eval-bleu"), |s, (k, v)| s.field(k, v)))
}

fn eval_f1(cfg: &ExperimentConfig, run: &RunDir, out: &mut dyn Write) -> Result<Summary> {
    let pred = read_trees(&cfg.required_path("predicted")?)?;
    let gold = read_trees(&cfg.required_path("gold")?)?;
    if pred.len() != gold.len() {
        bail!("{} predicted trees for {} gold trees", pred.len(), gold.len());
    }
    let c = corpus_bracket_counts(&pred, &gold)?;
    let fields = vec![
        ("trees", gold.len().to_string()),
        ("matched", c.matched.to_string()),
        ("predicted", c.predicted.to_string()),
        ("gold", c.gold.to_string()),
        ("precision", format!("{:.6}", c.precision())),
        ("recall", format!("{:.6}", c.recall())),
        ("f1", format!("{:.6}", c.f1())),
    ];
    emit(cfg, run, out, &fields)?;
    Ok(fields.into_iter().fold(Summary::new("eval-f1"), |s, (k, v)| s.field(k, v)))
}

fn grad_check(cfg: &ExperimentConfig) -> Result<Summary> {
    let seed = cfg.seed()?;
    let tree = match cfg.path("input") {
        Some(p) => read_trees(&p)?.into_iter().next().ok_or_else(|| anyhow!("{} holds no tree", p.display()))?,
        None => parse_bracketed(GRAD_CHECK_TREE)?,
    };
    let model = match cfg.path("checkpoint") {
        Some(_) => load_model(cfg)?,
        None => build_model(cfg, std::slice::from_ref(&tree), seed)?,
    };
    let report = grad_check_model(&model, &tree, cfg.f64("gradcheck_eps")?, cfg.usize("gradcheck_coords")?, seed)?;
    let mut s = Summary::new("grad-check")
        .field("model", model.kind())
        .field("max_rel_error", format!("{:.3e}", report.max_rel_error))
        .field("coordinates", report.coordinates);
    if let Some((name, i)) = &report.worst {
        s = s.field("worst", format!("{name}[{i}]"));
    }
    s.ok = report.max_rel_error < GRAD_CHECK_TOLERANCE;
    Ok(s)
}

pub fn grad_check_model(model: &AnyModel, tree: &Tree, eps: f64, coords: usize, seed: u64) -> Result<GradCheckReport> {
    let words = tree.words();
    let tokens = tree.linearize_brackets();
    Ok(match model {
        AnyModel::Tdtd(m) => gradient_check(&m.store, eps, coords, seed, |g| m.decoder.tree_log_prob(g, tree, None, true))?,
        AnyModel::Parser(m) => gradient_check(&m.store, eps, coords, seed, |g| m.log_prob_node(g, tree, &words))?,
        AnyModel::Seq(m) => gradient_check(&m.store, eps, coords, seed, |g| m.log_prob_node(g, &tokens, 1.0, None))?,
    })
}

/// Sentences kept by the length window and word-frequency threshold, with
/// counts taken over the whole input.
pub fn filter_corpus(lines: &[&str], min_len: usize, max_len: usize, threshold: usize) -> Vec<usize> {
    let mut freq: HashMap<&str, usize> = HashMap::new();
    for l in lines {
        for w in l.split_whitespace() {
            *freq.entry(w).or_default() += 1;
        }
    }
    lines
        .iter()
        .enumerate()
        .filter(|(_, l)| {
            let n = l.split_whitespace().count();
            (min_len..=max_len).contains(&n) && l.split_whitespace().all(|w| freq[w] >= threshold)
        })
        .map(|(i, _)| i)
        .collect()
}

fn corpus_filter(cfg: &ExperimentConfig, run: &RunDir) -> Result<Summary> {
    let input = cfg.required_path("input")?;
    let text = run_dir::read(&input)?;
    let lines: Vec<&str> = text.lines().collect();
    let mut kept = filter_corpus(&lines, cfg.usize("min_len")?, cfg.usize("max_len")?, cfg.usize("freq_threshold")?);
    let found = kept.len();
    kept.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed()?));
    let test_n = cfg.usize("test_size")?.min(kept.len());
    let (test, rest) = kept.split_at(test_n);
    let train = &rest[..cfg.usize("train_size")?.min(rest.len())];
    let join = |ix: &[usize]| -> String { ix.iter().map(|&i| format!("{}\n", lines[i].trim())).collect() };
    let dir = cfg.path("out").unwrap_or_else(|| run.path.clone());
    run_dir::write(&dir.join("train.txt"), &join(train))?;
    run_dir::write(&dir.join("test.txt"), &join(test))?;
    let vocab: std::collections::HashSet<&str> =
        train.iter().chain(test).flat_map(|&i| lines[i].split_whitespace()).collect();
    let words: usize = train.iter().chain(test).map(|&i| lines[i].split_whitespace().count()).sum();
    let total = train.len() + test.len();
    Ok(Summary::new("corpus-filter")
        .field("input_sentences", lines.len())
        .field("kept", found)
        .field("train", train.len())
        .field("test", test.len())
        .field("vocab", vocab.len())
        .field("mean_length", format!("{:.2}", words as f64 / total.max(1) as f64))
        .field("out", dir.display())
        .field("input_sha256", file_digest(&input)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn candidate_blocks() {
        let text = "the cat\n(S (NP the) cat)\n(S the cat)\n\n\na dog\n(S a dog)\n";
        let b = parse_candidates(text).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b[0].candidates.len(), 2);
        assert_eq!(b[1].sentence, vec!["a", "dog"]);
        let e = parse_candidates("the cat\n(S the dog)\n").unwrap_err();
        assert!(format!("{e:#}").contains("line 2"));
        assert!(parse_candidates("lonely sentence\n").is_err());
    }

    #[test]
    fn corpus_filter_rules() {
        let lines = ["a a a", "a b", "a a", "a a a a a"];
        // counts: a = 11, b = 1
        assert_eq!(filter_corpus(&lines, 2, 3, 2), vec![0, 2]);
        assert_eq!(filter_corpus(&lines, 2, 5, 12), Vec::<usize>::new());
        assert_eq!(filter_corpus(&lines, 1, 5, 1), vec![0, 1, 2, 3]);
    }

    #[test]
    fn json_mirrors_fields() {
        let j = json(&[("count", "3".into()), ("nll", "-".into()), ("mode", "corpus".into())]);
        let v: serde_json::Value = serde_json::from_str(&j).unwrap();
        assert_eq!(v["count"], 3.0);
        assert!(v["nll"].is_null());
        assert_eq!(v["mode"], "corpus");
    }
}
