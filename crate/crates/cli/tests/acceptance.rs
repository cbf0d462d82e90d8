//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Pass criterion numbers as arguments to run a subset.

use std::collections::HashSet;
use std::fs;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use tdtd_core::autodiff::ParamStore;
use tdtd_core::decoder::{TdtdConfig, TdtdModel};
use tdtd_core::metrics::{bleu_n, bracket_counts, mean_and_se, sample_report, BleuMode, Sample, SampleReport};
use tdtd_core::parser::ParserModel;
use tdtd_core::pcfg::{Grammar, StartSymbols, TOY_GRAMMAR};
use tdtd_core::seq_lm::{vocab_from_trees, SeqLm, SeqLmConfig};
use tdtd_core::training::{train, TrainConfig, Trainable};
use tdtd_core::treebank::{parse_bracketed, NodeKind, Tree};
use tdtd_core::vocab::{TreeVocab, Vocabulary};

type Verdict = (bool, String);

const PENALTY: f64 = 1e-6;

fn toy() -> Grammar {
    Grammar::parse(TOY_GRAMMAR, &StartSymbols::default()).expect("toy grammar parses")
}

fn rng_for(seed: u64, stream: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream as u64);
    r
}

fn fit<M: Trainable>(model: &mut M, trees: &[Tree], epochs: usize, seed: u64) -> f64 {
    let cfg = TrainConfig { epochs, seed, ..TrainConfig::default() };
    let report = train(model, trees, &[], &cfg, &mut |_: usize, _: &ParamStore| Ok(())).expect("training succeeds");
    report.rows.last().and_then(|r| r.train_nll).unwrap_or(f64::NAN)
}

fn tdtd_samples(m: &TdtdModel, n: usize, seed: u64) -> Vec<Tree> {
    (0..n).into_par_iter().map(|i| m.sample(&mut rng_for(seed, i), None).expect("sampling succeeds").tree).collect()
}

fn seq_samples(m: &SeqLm, n: usize, seed: u64) -> Vec<Vec<String>> {
    (0..n)
        .into_par_iter()
        .map(|i| m.sample(&mut rng_for(seed, i), m.cfg.max_length).expect("sampling succeeds").tokens)
        .collect()
}

fn tree_report(trees: Vec<Tree>, g: &Grammar) -> SampleReport {
    sample_report(&trees.into_iter().map(Sample::Tree).collect::<Vec<_>>(), g, PENALTY).unwrap()
}

fn token_report(seqs: Vec<Vec<String>>, g: &Grammar) -> SampleReport {
    sample_report(&seqs.into_iter().map(Sample::Tokens).collect::<Vec<_>>(), g, PENALTY).unwrap()
}

fn nll(r: &SampleReport) -> f64 {
    r.mean_nll.unwrap_or(f64::INFINITY)
}

/// A TDTD model trained under the baseline-contrast budget, shared with the
/// structural and consistency checks.
#[derive(Default)]
struct Shared {
    trained_tdtd: Option<TdtdModel>,
}

fn c1_structural_validity(shared: &mut Shared) -> Verdict {
    let g = toy();
    let trees = g.generate_dataset(200, 15, 7, 101, None).unwrap();
    let untrained = TdtdModel::new(TdtdConfig::default(), TreeVocab::from_trees(&trees, false).unwrap(), 1).unwrap();
    let mut models = vec![("untrained", &untrained)];
    if let Some(m) = &shared.trained_tdtd {
        models.push(("trained", m));
    }
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, m) in models {
        let samples = tdtd_samples(m, 10_000, 7);
        let invalid = samples.iter().filter(|t| !t.validate().is_valid()).count();
        let r = tree_report(samples, &g);
        ok &= invalid == 0 && r.fail_fraction == 0.0 && r.count == 10_000;
        parts.push(format!("{name}: Fail {:.1}% invalid {invalid}/10000", 100.0 * r.fail_fraction));
    }
    (ok, parts.join("; "))
}

fn c2_baseline_contrast(shared: &mut Shared) -> Verdict {
    let g = toy();
    let trees = g.generate_dataset(2_000, 15, 7, 202, None).unwrap();
    let mut seq = SeqLm::new(SeqLmConfig::default(), vocab_from_trees(&trees), 3).unwrap();
    fit(&mut seq, &trees, 10, 3);
    let seq_r = token_report(seq_samples(&seq, 1_000, 4), &g);
    let mut tdtd = TdtdModel::new(TdtdConfig::default(), TreeVocab::from_trees(&trees, false).unwrap(), 3).unwrap();
    fit(&mut tdtd, &trees, 10, 3);
    let tdtd_r = tree_report(tdtd_samples(&tdtd, 1_000, 4), &g);
    shared.trained_tdtd = Some(tdtd);
    let ok = seq_r.fail_fraction > 0.0 && tdtd_r.fail_fraction == 0.0;
    (
        ok,
        format!(
            "seq-lm Fail {:.1}% Dup {:.1}% NLL {:.2}; TDTD Fail {:.1}% Dup {:.1}% NLL {:.2}",
            100.0 * seq_r.fail_fraction,
            100.0 * seq_r.dup_fraction,
            nll(&seq_r),
            100.0 * tdtd_r.fail_fraction,
            100.0 * tdtd_r.dup_fraction,
            nll(&tdtd_r)
        ),
    )
}

const C3_TRAIN_TREES: usize = 1_000;
const C3_EPOCHS: usize = 6;

fn c3_nll_ordering(_: &mut Shared) -> Verdict {
    let g = toy();
    let mut wins = 0;
    let mut parts = Vec::new();
    for nodes in [10usize, 15] {
        let mut cells = Vec::new();
        for seed in 1..=5u64 {
            let trees = g.generate_dataset(C3_TRAIN_TREES, nodes, 7, 1_000 * nodes as u64 + seed, None).unwrap();
            let mut tdtd = TdtdModel::new(TdtdConfig::default(), TreeVocab::from_trees(&trees, false).unwrap(), seed).unwrap();
            fit(&mut tdtd, &trees, C3_EPOCHS, seed);
            let t = nll(&tree_report(tdtd_samples(&tdtd, 1_000, seed), &g));
            let mut seq = SeqLm::new(SeqLmConfig::default(), vocab_from_trees(&trees), seed).unwrap();
            fit(&mut seq, &trees, C3_EPOCHS, seed);
            let s = nll(&token_report(seq_samples(&seq, 1_000, seed), &g));
            if nodes == 15 && t <= s {
                wins += 1;
            }
            cells.push(format!("{t:.2}/{s:.2}"));
        }
        parts.push(format!("n={nodes} TDTD/seq-lm [{}]", cells.join(" ")));
    }
    (wins >= 4, format!("{}; n=15 ordering holds in {wins}/5 seeds", parts.join("; ")))
}

fn c4_oracle_self_consistency(_: &mut Shared) -> Verdict {
    let g = toy();
    let draw = |seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..10_000).map(|_| g.oracle_nll(&g.sample_tree(7, &mut rng).unwrap(), PENALTY).unwrap()).collect();
        let (m, se) = mean_and_se(&v);
        (m.unwrap(), se.unwrap())
    };
    let ((ma, sa), (mb, sb)) = (draw(41), draw(42));
    let se = (sa * sa + sb * sb).sqrt();
    let z = (ma - mb).abs() / se;
    (z <= 3.0, format!("means {ma:.4} vs {mb:.4}, |diff| = {z:.2} standard errors"))
}

fn c5_gradient_correctness(_: &mut Shared) -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let mut ok = true;
    let mut parts = Vec::new();
    for model in ["tdtd", "tdtd-p", "seq-lm"] {
        let args = ["grad-check", "--model", model, "--seed", "1", "--runs-dir", dir.path().to_str().unwrap(), "--name", model];
        let mut out = Vec::new();
        let code = tdtd_cli::run_with(args, &mut out, &mut std::io::sink());
        let line = String::from_utf8(out).unwrap();
        let err = line.split_whitespace().find_map(|kv| kv.strip_prefix("max_rel_error=")).unwrap_or("?").to_string();
        ok &= code == 0 && err.parse::<f64>().is_ok_and(|e| e < 1e-4);
        parts.push(format!("{model} {err}"));
    }
    (ok, format!("max relative error: {}", parts.join(", ")))
}

/// Every tree with a nonterminal root, 1..=max_children children per
/// nonterminal, and nonterminals only above `max_depth`.
fn enumerate(label: &str, depth: usize, cfg: &TdtdConfig, v: &TreeVocab) -> Vec<Tree> {
    fn graft(dst: &mut Tree, parent: usize, src: &Tree, node: usize) {
        let id = dst.add_child(parent, src.label(node), src.node(node).kind);
        for &c in src.children(node) {
            graft(dst, id, src, c);
        }
    }
    let mut options: Vec<Tree> = v
        .terminals
        .symbols()
        .iter()
        .map(|w| {
            let mut leaf = Tree::new("_");
            leaf.add_child(0, w.as_str(), NodeKind::Terminal);
            leaf
        })
        .collect();
    if depth + 1 < cfg.max_depth {
        for nt in v.nonterminals.symbols() {
            for sub in enumerate(nt, depth + 1, cfg, v) {
                let mut t = Tree::new("_");
                graft(&mut t, 0, &sub, sub.root());
                options.push(t);
            }
        }
    }
    let mut out = Vec::new();
    let mut seqs: Vec<Vec<usize>> = (0..options.len()).map(|i| vec![i]).collect();
    while !seqs.is_empty() {
        let mut longer = Vec::new();
        for s in &seqs {
            let mut t = Tree::new(label);
            for &i in s {
                graft(&mut t, 0, &options[i], options[i].children(0)[0]);
            }
            out.push(t);
            if s.len() < cfg.max_children {
                longer.extend((0..options.len()).map(|i| [s.clone(), vec![i]].concat()));
            }
        }
        seqs = longer;
    }
    out
}

fn c6_normalization(_: &mut Shared) -> Verdict {
    let vocab = TreeVocab::new(
        Vocabulary::from_symbols(["A", "B"]).unwrap(),
        Vocabulary::from_symbols(["x", "y", "z"]).unwrap(),
        false,
    )
    .unwrap();
    let cfg = TdtdConfig { max_depth: 2, max_children: 2, ..TdtdConfig::default() };
    let mut ok = true;
    let mut parts = Vec::new();
    for seed in [1u64, 2, 3] {
        let m = TdtdModel::new(cfg.clone(), vocab.clone(), seed).unwrap();
        let trees: Vec<Tree> = vocab.nonterminals.symbols().iter().flat_map(|r| enumerate(r, 0, &cfg, &vocab)).collect();
        let total: f64 = trees.par_iter().map(|t| m.tree_log_prob(t).unwrap().exp()).sum();
        // Cap-violating continuations are masked, so their mass is exactly 0.
        ok &= trees.len() == 1512 && (total - 1.0).abs() <= 1e-8;
        parts.push(format!("seed {seed}: {} trees, sum {total:.12}", trees.len()));
    }
    (ok, parts.join("; "))
}

fn c7_scoring_consistency(shared: &mut Shared) -> Verdict {
    let g = toy();
    let trees = g.generate_dataset(200, 10, 7, 707, None).unwrap();
    let untrained = TdtdModel::new(TdtdConfig::default(), TreeVocab::from_trees(&trees, false).unwrap(), 7).unwrap();
    let mut models = vec![("untrained", &untrained)];
    if let Some(m) = &shared.trained_tdtd {
        models.push(("trained", m));
    }
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, m) in models {
        let worst = (0..1_000)
            .into_par_iter()
            .map(|i| {
                let s = m.sample(&mut rng_for(77, i), None).unwrap();
                (s.log_prob() - m.tree_log_prob(&s.tree).unwrap()).abs()
            })
            .reduce(|| 0.0, f64::max);
        ok &= worst <= 1e-10;
        parts.push(format!("{name}: max |recorded - scored| = {worst:.2e}"));
    }
    (ok, parts.join("; "))
}

/// Relabels one random nonterminal.
fn label_swap(t: &Tree, labels: &[String], rng: &mut impl Rng) -> Option<Tree> {
    let nts: Vec<usize> = (0..t.len()).filter(|&n| !t.is_terminal(n)).collect();
    let &n = nts.choose(rng)?;
    let other: Vec<&String> = labels.iter().filter(|l| l.as_str() != t.label(n)).collect();
    let new = other.choose(rng)?;
    let mut nodes = t.nodes().to_vec();
    nodes[n].label = new.to_string();
    Some(Tree::from_raw(nodes, t.root()))
}

/// One tree rotation at a random nonterminal `a` whose first (right
/// rotation) or last (left rotation) child `b` is a nonterminal with at least
/// two children. The yield is unchanged.
fn rotation(t: &Tree, rng: &mut impl Rng) -> Option<Tree> {
    let mut sites = Vec::new();
    for a in (0..t.len()).filter(|&n| !t.is_terminal(n)) {
        let kids = t.children(a);
        let (first, last) = (kids[0], kids[kids.len() - 1]);
        if !t.is_terminal(first) && t.children(first).len() >= 2 {
            sites.push((a, true));
        }
        if kids.len() >= 2 && !t.is_terminal(last) && t.children(last).len() >= 2 {
            sites.push((a, false));
        }
    }
    let &(a, right) = sites.choose(rng)?;
    // Rebuild the tree from a nested description with the rotated subtree.
    #[derive(Clone)]
    enum N {
        Leaf(String),
        Node(String, Vec<N>),
    }
    fn lift(t: &Tree, n: usize) -> N {
        if t.is_terminal(n) {
            N::Leaf(t.label(n).to_string())
        } else {
            N::Node(t.label(n).to_string(), t.children(n).iter().map(|&c| lift(t, c)).collect())
        }
    }
    fn lower(n: &N, out: &mut Tree, parent: Option<usize>) {
        match n {
            N::Leaf(w) => {
                out.add_child(parent.expect("leaf under a node"), w.as_str(), NodeKind::Terminal);
            }
            N::Node(l, kids) => {
                let id = match parent {
                    None => 0,
                    Some(p) => out.add_child(p, l.as_str(), NodeKind::Nonterminal),
                };
                for k in kids {
                    lower(k, out, Some(id));
                }
            }
        }
    }
    fn rotate(n: &N, target: &mut usize, right: bool) -> N {
        match n {
            N::Leaf(_) => n.clone(),
            N::Node(l, kids) => {
                if *target == 0 {
                    *target = usize::MAX;
                    let mut kids = kids.clone();
                    if right {
                        let N::Node(bl, mut bk) = kids.remove(0) else { unreachable!() };
                        let moved = bk.pop().unwrap();
                        let mut lower_kids = vec![moved];
                        lower_kids.extend(kids);
                        bk.push(N::Node(l.clone(), lower_kids));
                        return N::Node(bl, bk);
                    }
                    let N::Node(bl, mut bk) = kids.pop().unwrap() else { unreachable!() };
                    let moved = bk.remove(0);
                    kids.push(moved);
                    bk.insert(0, N::Node(l.clone(), kids));
                    return N::Node(bl, bk);
                }
                *target = target.wrapping_sub(1);
                N::Node(l.clone(), kids.iter().map(|k| rotate(k, target, right)).collect())
            }
        }
    }
    // Preorder position of `a` among nonterminals decides which node rotates.
    let order: Vec<usize> = t.preorder().into_iter().filter(|&n| !t.is_terminal(n)).collect();
    let mut target = order.iter().position(|&n| n == a)?;
    let rotated = rotate(&lift(t, t.root()), &mut target, right);
    let N::Node(root_label, _) = &rotated else { return None };
    let mut out = Tree::new(root_label.as_str());
    lower(&rotated, &mut out, None);
    Some(out)
}

fn corruptions(gold: &Tree, labels: &[String], k: usize, rng: &mut impl Rng) -> Vec<Tree> {
    let mut seen: HashSet<String> = HashSet::from([gold.to_bracketed()]);
    let mut out = Vec::new();
    for _ in 0..1_000 {
        if out.len() == k {
            break;
        }
        let c = if rng.gen_bool(0.5) { label_swap(gold, labels, rng) } else { rotation(gold, rng) };
        if let Some(c) = c {
            if seen.insert(c.to_bracketed()) {
                out.push(c);
            }
        }
    }
    out
}

fn c8_reranking(_: &mut Shared) -> Verdict {
    let g = toy();
    let train_trees = g.generate_dataset(500, 10, 7, 808, None).unwrap();
    let held = g.generate_dataset(200, 10, 7, 809, None).unwrap();
    let vocab = TreeVocab::from_trees(&train_trees, true).unwrap();
    let labels = vocab.nonterminals.symbols().to_vec();
    let mut m = ParserModel::new(TdtdConfig::default(), vocab, true, 8).unwrap();
    fit(&mut m, &train_trees, 10, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let (mut top1, mut top3, mut short) = (0, 0, 0);
    for gold in &held {
        let mut cands = vec![gold.clone()];
        let bad = corruptions(gold, &labels, 9, &mut rng);
        short += usize::from(bad.len() < 9);
        cands.extend(bad);
        cands.shuffle(&mut rng);
        let gold_at = cands.iter().position(|c| c == gold).unwrap();
        let ranked = m.rerank(&gold.words(), &cands).unwrap();
        let pos = ranked.iter().position(|r| r.index == gold_at).unwrap();
        top1 += usize::from(pos == 0);
        top3 += usize::from(pos < 3);
    }
    let (p1, p3) = (top1 as f64 / held.len() as f64, top3 as f64 / held.len() as f64);
    (
        p1 >= 0.70 && p3 >= 0.90,
        format!("top-1 {:.1}%, top-3 {:.1}% over {} sentences ({short} with fewer than 9 corruptions)", 100.0 * p1, 100.0 * p3, held.len()),
    )
}

fn c9_metric_fixtures(_: &mut Shared) -> Verdict {
    let w = |s: &str| -> Vec<String> { s.split_whitespace().map(str::to_string).collect() };
    let bleu = bleu_n(&[w("the cat sat")], &[w("the cat sat down")], 2, BleuMode::Sentence).unwrap();
    let gold = parse_bracketed("(S (NP (DT the) (NN cat)) (VP (VBD sat)))").unwrap();
    let pred = parse_bracketed("(S (NP (DT the)) (VP (NN cat) (VBD sat)))").unwrap();
    let c = bracket_counts(&pred, &gold).unwrap();
    let ok = (bleu - 0.7165).abs() <= 1e-4 && (c.f1() - 1.0 / 3.0).abs() <= 1e-9;
    (ok, format!("BLEU-2 {bleu:.6}, F1 {:.9} (P {:.4}, R {:.4})", c.f1(), c.precision(), c.recall()))
}

fn c10_determinism(_: &mut Shared) -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_str().unwrap().to_string();
    let data = format!("{root}/train.txt");
    fs::write(&data, toy().generate_dataset(150, 8, 7, 1010, None).unwrap().iter().map(|t| t.to_bracketed() + "\n").collect::<String>()).unwrap();
    let run = |name: &str, threads: &str| {
        let args = [
            "train", "--model", "tdtd", "--train", &data, "--dev", &data, "--hidden-size", "16", "--embed-size", "16",
            "--epochs", "3", "--curriculum", "--curriculum-depth", "5", "--curriculum-width", "6", "--tf-final", "0.5", "--tf-anneal-steps", "20", "--seed", "10",
            "--runs-dir", &root, "--name", name, "--threads", threads,
        ];
        let mut err = Vec::new();
        let code = tdtd_cli::run_with(args, &mut std::io::sink(), &mut err);
        assert_eq!(code, 0, "train run {name} failed: {}", String::from_utf8_lossy(&err));
        let mut files = vec!["model.txt".to_string(), "report.tsv".to_string()];
        files.extend((1..=3).map(|e| format!("checkpoints/epoch-{e:03}.model")));
        files.iter().map(|f| fs::read(format!("{root}/{name}/{f}")).unwrap()).collect::<Vec<_>>()
    };
    let a = run("a", "0");
    let b = run("b", "0");
    let c = run("c", "1");
    let same = a == b;
    (same && a == c, format!("model, report and 3 checkpoints identical: {same}; with --threads 1: {}", a == c))
}

type Criterion = (usize, &'static str, f64, fn(&mut Shared) -> Verdict);

const CRITERIA: &[Criterion] = &[
    (2, "baseline contrast", 900.0, c2_baseline_contrast),
    (1, "structural validity", 120.0, c1_structural_validity),
    (3, "oracle NLL ordering", f64::INFINITY, c3_nll_ordering),
    (4, "oracle self-consistency", 60.0, c4_oracle_self_consistency),
    (5, "gradient correctness", 60.0, c5_gradient_correctness),
    (6, "normalization by enumeration", 60.0, c6_normalization),
    (7, "scoring/generation consistency", f64::INFINITY, c7_scoring_consistency),
    (8, "reranking sanity", 1200.0, c8_reranking),
    (9, "metric fixtures", f64::INFINITY, c9_metric_fixtures),
    (10, "training determinism", f64::INFINITY, c10_determinism),
];

fn main() {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut shared = Shared::default();
    let mut lines = Vec::new();
    for &(id, title, limit, check) in CRITERIA {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let (pass, detail) = check(&mut shared);
        let secs = start.elapsed().as_secs_f64();
        let in_time = secs < limit;
        let verdict = if pass && in_time { "PASS" } else { "FAIL" };
        let timing = if limit.is_finite() { format!("{secs:.1}s, limit {limit:.0}s") } else { format!("{secs:.1}s") };
        let line = format!("criterion {id:>2} {verdict}  {title}: {detail} ({timing})");
        println!("{line}");
        lines.push((id, line, pass && in_time));
    }
    lines.sort_by_key(|l| l.0);
    println!("\nsummary:");
    for (_, line, _) in &lines {
        println!("{line}");
    }
    if lines.iter().any(|l| !l.2) {
        std::process::exit(1);
    }
}
