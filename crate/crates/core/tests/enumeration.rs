//! Exhaustive enumeration of the decoder's tree distribution under tight caps.

use tdtd_core::decoder::{TdtdConfig, TdtdModel};
use tdtd_core::treebank::{NodeKind, Tree};
use tdtd_core::vocab::{TreeVocab, Vocabulary};

/// Child sequences of one node at `depth`, built independently of the decoder:
/// 1..=max_children children, nonterminals only above `max_depth`.
fn subtrees(label: &str, depth: usize, cfg: &TdtdConfig, v: &TreeVocab) -> Vec<Tree> {
    let mut options: Vec<Tree> = Vec::new();
    for w in v.terminals.symbols() {
        let mut t = Tree::new("_");
        t.add_child(0, w.as_str(), NodeKind::Terminal);
        options.push(t);
    }
    if depth + 1 < cfg.max_depth {
        for nt in v.nonterminals.symbols() {
            for sub in subtrees(nt, depth + 1, cfg, v) {
                let mut t = Tree::new("_");
                graft(&mut t, 0, &sub, sub.root());
                options.push(t);
            }
        }
    }
    // `options[i]` holds one child under a placeholder root.
    let mut out = Vec::new();
    let mut seqs: Vec<Vec<usize>> = (0..options.len()).map(|i| vec![i]).collect();
    for _ in 0..cfg.max_children {
        let mut longer = Vec::new();
        for s in &seqs {
            let mut t = Tree::new(label);
            for &i in s {
                let o = &options[i];
                graft(&mut t, 0, o, o.children(o.root())[0]);
            }
            out.push(t);
            if s.len() < cfg.max_children {
                for i in 0..options.len() {
                    let mut l = s.clone();
                    l.push(i);
                    longer.push(l);
                }
            }
        }
        seqs = longer;
    }
    out
}

fn graft(dst: &mut Tree, parent: usize, src: &Tree, node: usize) {
    let id = dst.add_child(parent, src.label(node), src.node(node).kind);
    for &c in src.children(node) {
        graft(dst, id, src, c);
    }
}

#[test]
fn probabilities_over_all_capped_trees_sum_to_one() {
    let vocab = TreeVocab::new(
        Vocabulary::from_symbols(["A", "B"]).unwrap(),
        Vocabulary::from_symbols(["x", "y", "z"]).unwrap(),
        false,
    )
    .unwrap();
    let cfg = TdtdConfig { hidden_size: 5, embed_size: 4, max_depth: 2, max_children: 2, max_layer_width: 64 };
    let model = TdtdModel::new(cfg.clone(), vocab.clone(), 3).unwrap();
    let mut trees = Vec::new();
    for root in vocab.nonterminals.symbols() {
        trees.extend(subtrees(root, 0, &cfg, &vocab));
    }
    // 2 roots x (27 + 27^2) child sequences.
    assert_eq!(trees.len(), 2 * (27 + 27 * 27));
    let total: f64 = trees.iter().map(|t| model.tree_log_prob(t).unwrap().exp()).sum();
    // Caps are enforced by masking, so no mass leaks to cap-violating prefixes.
    assert!((total - 1.0).abs() < 1e-8, "total {total}");
}
