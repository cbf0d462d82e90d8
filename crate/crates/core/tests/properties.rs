use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tdtd_core::autodiff::{gradient_check, log_softmax_values, Graph, ParamStore, Tensor};
use tdtd_core::decoder::{TdtdConfig, TdtdModel};
use tdtd_core::metrics::{bleu_n, bracket_counts, sample_report, BleuMode, Sample};
use tdtd_core::parser::rank;
use tdtd_core::pcfg::{Grammar, StartSymbols, TOY_GRAMMAR};
use tdtd_core::treebank::{delinearize_brackets, parse_bracketed, Tree};
use tdtd_core::vocab::TreeVocab;

fn toy() -> Grammar {
    Grammar::parse(TOY_GRAMMAR, &StartSymbols::default()).unwrap()
}

fn toy_tree(seed: u64) -> Tree {
    toy().sample_tree(7, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn linearization_round_trips(seed in any::<u64>()) {
        let t = toy_tree(seed);
        let toks = t.linearize_brackets();
        prop_assert_eq!(toks.len(), 2 * t.nonterminal_count() + t.terminal_count());
        prop_assert_eq!(delinearize_brackets(&toks).unwrap(), t.clone());
        prop_assert_eq!(parse_bracketed(&t.to_bracketed()).unwrap(), t);
    }

    #[test]
    fn layer_view_partitions_nodes(seed in any::<u64>()) {
        let t = toy_tree(seed);
        let layers = t.layer_view().layers;
        let mut seen: Vec<usize> = layers.iter().flatten().copied().collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..t.len()).collect::<Vec<_>>());
        for w in layers.windows(2) {
            let kids: Vec<usize> = w[0].iter().flat_map(|&n| t.children(n).iter().copied()).collect();
            prop_assert_eq!(&kids, &w[1]);
        }
        prop_assert_eq!(layers.len() - 1, t.depth());
        // Terminal yield is the same whichever traversal reads it.
        let mut by_position: Vec<(Vec<usize>, &str)> = Vec::new();
        for layer in &layers {
            for &n in layer {
                if t.is_terminal(n) {
                    let mut path = vec![];
                    let mut cur = n;
                    while let Some(p) = t.node(cur).parent {
                        path.push(t.children(p).iter().position(|&c| c == cur).unwrap());
                        cur = p;
                    }
                    path.reverse();
                    by_position.push((path, t.label(n)));
                }
            }
        }
        by_position.sort();
        let words: Vec<&str> = by_position.into_iter().map(|(_, w)| w).collect();
        prop_assert_eq!(words, t.words());
    }

    #[test]
    fn oracle_nll_is_additive_over_subtrees(seed in any::<u64>()) {
        let g = toy();
        let t = toy_tree(seed);
        let total = g.oracle_nll(&t, 1e-6).unwrap();
        prop_assert!(total.is_finite() && total >= 0.0);
        prop_assert_eq!(g.unseen_rules(&t), 0);
        let root_term: f64 = g.nll_terms(&t, 1e-6).unwrap()[0].1;
        let kids: f64 = t
            .children(t.root())
            .iter()
            .filter(|&&c| !t.is_terminal(c))
            .map(|&c| g.oracle_nll(&t.subtree(c), 1e-6).unwrap())
            .sum();
        prop_assert!((total - root_term - kids).abs() < 1e-9);
    }

    #[test]
    fn log_softmax_normalizes(xs in prop::collection::vec(-50.0f64..50.0, 1..20)) {
        let lp = log_softmax_values(&xs, None);
        prop_assert!((lp.iter().map(|l| l.exp()).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn checkpoints_round_trip_bit_exact(vals in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..30)) {
        let mut s = ParamStore::new();
        let n = vals.len();
        s.insert("t", Tensor::new(vec![n], vals).unwrap()).unwrap();
        let back = ParamStore::from_checkpoint(&s.to_checkpoint()).unwrap();
        let a: Vec<u64> = s.get(s.id("t").unwrap()).values().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = back.get(back.id("t").unwrap()).values().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn generation_and_scoring_agree(seed in any::<u64>()) {
        let trees: Vec<Tree> = (0..5).map(|i| toy_tree(i)).collect();
        let vocab = TreeVocab::from_trees(&trees, false).unwrap();
        let m = TdtdModel::new(TdtdConfig { hidden_size: 6, embed_size: 5, ..TdtdConfig::default() }, vocab, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gen = m.sample(&mut rng, None).unwrap();
        prop_assert!(gen.tree.validate().is_valid());
        let lp = m.tree_log_prob(&gen.tree).unwrap();
        prop_assert!((gen.log_prob() - lp).abs() < 1e-10);
    }

    #[test]
    fn bleu_is_bounded(cands in prop::collection::vec(prop::collection::vec(0u8..5, 0..8), 1..6),
                       refs in prop::collection::vec(prop::collection::vec(0u8..5, 1..8), 1..6),
                       n in 2usize..=5) {
        let words = |v: &Vec<Vec<u8>>| -> Vec<Vec<String>> {
            v.iter().map(|s| s.iter().map(|w| format!("w{w}")).collect()).collect()
        };
        let (c, r) = (words(&cands), words(&refs));
        for mode in [BleuMode::Sentence, BleuMode::Corpus] {
            let s = bleu_n(&c, &r, n, mode).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&s));
        }
        prop_assert!((bleu_n(&r, &r, n, BleuMode::Sentence).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn f1_swaps_precision_and_recall(a in any::<u64>(), b in any::<u64>()) {
        // Rebracket one tree's yield with another tree's shape where possible.
        let (x, y) = (toy_tree(a), toy_tree(b));
        if x.words() == y.words() {
            let xy = bracket_counts(&x, &y).unwrap();
            let yx = bracket_counts(&y, &x).unwrap();
            prop_assert_eq!(xy.precision(), yx.recall());
            prop_assert_eq!(xy.recall(), yx.precision());
        }
        let flat = parse_bracketed(&format!("(S_0 {})", x.words().join(" "))).unwrap();
        let c = bracket_counts(&flat, &x).unwrap();
        let d = bracket_counts(&x, &flat).unwrap();
        prop_assert_eq!(c.precision(), d.recall());
        prop_assert_eq!(c.recall(), d.precision());
    }

    #[test]
    fn dup_fraction_is_order_invariant_and_monotone(seeds in prop::collection::vec(0u64..6, 1..12), shift in 0usize..12) {
        let g = toy();
        let samples: Vec<Sample> = seeds.iter().map(|&s| Sample::Tree(toy_tree(s))).collect();
        let base = sample_report(&samples, &g, 1e-6).unwrap();
        let mut rotated = samples.clone();
        rotated.rotate_left(shift % samples.len());
        prop_assert_eq!(sample_report(&rotated, &g, 1e-6).unwrap().dup_fraction, base.dup_fraction);
        let mut more = samples.clone();
        more.push(samples[shift % samples.len()].clone());
        prop_assert!(sample_report(&more, &g, 1e-6).unwrap().dup_fraction >= base.dup_fraction);
    }

    #[test]
    fn ranking_ignores_monotone_transforms(scores in prop::collection::vec(-20.0f64..0.0, 1..15)) {
        let a: Vec<usize> = rank(&scores).iter().map(|r| r.index).collect();
        let t: Vec<f64> = scores.iter().map(|s| 3.0 * s.exp() + 1.0).collect();
        let b: Vec<usize> = rank(&t).iter().map(|r| r.index).collect();
        prop_assert_eq!(a, b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Every differentiable op on random shapes against central differences.
    #[test]
    fn ops_match_finite_differences(n in 1usize..5, m in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rand_t = |shape: Vec<usize>| {
            let len = shape.iter().product();
            Tensor::new(shape, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        let mut s = ParamStore::new();
        let x = s.insert("x", rand_t(vec![n])).unwrap();
        let w = s.insert("w", rand_t(vec![n, m])).unwrap();
        let b = s.insert("b", rand_t(vec![m])).unwrap();
        let v = s.insert("v", rand_t(vec![m])).unwrap();
        let table = s.insert("table", rand_t(vec![3, m])).unwrap();
        let report = gradient_check(&s, 1e-5, 50, seed, |g| {
            let xn = g.param(x);
            let a = g.affine(xn, w, Some(b))?;
            let sg = g.sigmoid(a);
            let vn = g.param(v);
            let th = g.tanh(vn);
            let prod = g.mul(sg, th)?;
            let r = g.row(table, 1)?;
            let sum = g.add(prod, r)?;
            let e = g.exp(sum);
            let om = g.one_minus(e);
            let cat = g.concat(&[om, xn]);
            let ls = g.log_softmax(cat);
            let pick = g.pick(ls, 0)?;
            let d = g.dot(sg, th)?;
            let sb = g.scale_by(vn, d)?;
            let tot = g.sum(sb);
            let sc = g.scale(tot, 0.5);
            g.sum_scalars(&[pick, sc])
        }).unwrap();
        prop_assert!(report.max_rel_error < 1e-4, "{:?}", report);
    }
}

#[test]
fn backward_is_deterministic() {
    let trees: Vec<Tree> = (0..3).map(toy_tree).collect();
    let vocab = TreeVocab::from_trees(&trees, false).unwrap();
    let m = TdtdModel::new(TdtdConfig { hidden_size: 5, embed_size: 4, ..TdtdConfig::default() }, vocab, 2).unwrap();
    let grads = |_: ()| {
        let mut g = Graph::new(&m.store);
        let lp = m.decoder.tree_log_prob(&mut g, &trees[0], None, true).unwrap();
        let gr = g.backward(lp, 1.0).unwrap();
        m.store.ids().map(|id| gr.get(id).map(|v| v.to_vec())).collect::<Vec<_>>()
    };
    assert_eq!(grads(()), grads(()));
}
