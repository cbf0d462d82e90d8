//! Constituency trees: bracketed I/O, per-depth layer views, validation, and
//! the bracket-token linearization used by the sequential baseline.

use std::collections::VecDeque;
use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeKind {
    Terminal,
    Nonterminal,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    pub label: String,
    pub kind: NodeKind,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
}

/// Labeled ordered tree stored as an arena of nodes.
///
/// Equality is structural: two trees are equal when their labels, kinds, and
/// child orders agree from the root down, regardless of arena layout.
#[derive(Debug, Clone)]
pub struct Tree {
    nodes: Vec<Node>,
    root: usize,
}

impl Tree {
    pub fn new(root_label: impl Into<String>) -> Self {
        Tree {
            nodes: vec![Node {
                label: root_label.into(),
                kind: NodeKind::Nonterminal,
                parent: None,
                children: Vec::new(),
            }],
            root: 0,
        }
    }

    /// Wraps raw nodes without checking any invariant; see [`Tree::validate`].
    pub fn from_raw(nodes: Vec<Node>, root: usize) -> Self {
        Tree { nodes, root }
    }

    pub fn add_child(&mut self, parent: usize, label: impl Into<String>, kind: NodeKind) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node { label: label.into(), kind, parent: Some(parent), children: Vec::new() });
        self.nodes[parent].children.push(id);
        id
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn node(&self, id: usize) -> &Node {
        &self.nodes[id]
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn label(&self, id: usize) -> &str {
        &self.nodes[id].label
    }

    pub fn children(&self, id: usize) -> &[usize] {
        &self.nodes[id].children
    }

    pub fn is_terminal(&self, id: usize) -> bool {
        self.nodes[id].kind == NodeKind::Terminal
    }

    pub fn nonterminal_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.kind == NodeKind::Nonterminal).count()
    }

    pub fn terminal_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.kind == NodeKind::Terminal).count()
    }

    /// Depth of the deepest node; the root has depth 0.
    pub fn depth(&self) -> usize {
        self.layer_view().layers.len().saturating_sub(1)
    }

    pub fn max_layer_width(&self) -> usize {
        self.layer_view().layers.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Node ids in depth-first pre-order.
    pub fn preorder(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut stack = vec![self.root];
        while let Some(n) = stack.pop() {
            out.push(n);
            stack.extend(self.nodes[n].children.iter().rev());
        }
        out
    }

    /// Terminal words read left to right.
    pub fn words(&self) -> Vec<&str> {
        self.preorder()
            .into_iter()
            .filter(|&n| self.is_terminal(n))
            .map(|n| self.label(n))
            .collect()
    }

    pub fn layer_view(&self) -> LayerView {
        let mut layers = Vec::new();
        let mut current = vec![self.root];
        while !current.is_empty() {
            let next: Vec<usize> = current.iter().flat_map(|&n| self.nodes[n].children.iter().copied()).collect();
            layers.push(current);
            current = next;
        }
        LayerView { layers }
    }

    /// Checks every structural invariant; never fails, violations are data.
    pub fn validate(&self) -> ValidationReport {
        let mut violations = Vec::new();
        let n = self.nodes.len();
        if n == 0 {
            violations.push("tree has no nodes".to_string());
            return ValidationReport { depth: 0, nonterminal_count: 0, terminal_count: 0, violations };
        }
        if self.root >= n {
            violations.push(format!("root index {} out of range", self.root));
            return ValidationReport { depth: 0, nonterminal_count: 0, terminal_count: 0, violations };
        }
        let roots: Vec<usize> = (0..n).filter(|&i| self.nodes[i].parent.is_none()).collect();
        if roots.len() != 1 {
            violations.push(format!("expected exactly one root, found {} ({roots:?})", roots.len()));
        }
        if self.nodes[self.root].parent.is_some() {
            violations.push(format!("root {} has a parent", self.root));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            for &c in &node.children {
                if c >= n {
                    violations.push(format!("node {i} has out-of-range child {c}"));
                } else if self.nodes[c].parent != Some(i) {
                    violations.push(format!("child {c} of node {i} does not point back to it"));
                }
            }
            if let Some(p) = node.parent {
                if p >= n || !self.nodes[p].children.contains(&i) {
                    violations.push(format!("node {i} names parent {p} which does not list it"));
                }
            }
            match node.kind {
                NodeKind::Terminal if !node.children.is_empty() => {
                    violations.push(format!("terminal {i} ({}) has children", node.label))
                }
                NodeKind::Nonterminal if node.children.is_empty() => {
                    violations.push(format!("nonterminal {i} ({}) has no children", node.label))
                }
                _ => {}
            }
            if node.label.is_empty() {
                violations.push(format!("node {i} has an empty label"));
            }
        }

        // Reachability and depth, guarded against cycles.
        let mut seen = vec![false; n];
        let mut depth = 0;
        let mut queue = VecDeque::from([(self.root, 0usize)]);
        while let Some((id, d)) = queue.pop_front() {
            if seen[id] {
                violations.push(format!("node {id} reached twice"));
                continue;
            }
            seen[id] = true;
            depth = depth.max(d);
            for &c in &self.nodes[id].children {
                if c < n {
                    queue.push_back((c, d + 1));
                }
            }
        }
        let unreached = seen.iter().filter(|s| !**s).count();
        if unreached > 0 {
            violations.push(format!("{unreached} nodes unreachable from the root"));
        }
        ValidationReport {
            depth,
            nonterminal_count: self.nonterminal_count(),
            terminal_count: self.terminal_count(),
            violations,
        }
    }

    /// Depth-first bracket tokens: `(L` per nonterminal, the word per
    /// terminal, and `)` when a nonterminal closes.
    pub fn linearize_brackets(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(2 * self.nodes.len());
        self.linearize_into(self.root, &mut out);
        out
    }

    fn linearize_into(&self, id: usize, out: &mut Vec<String>) {
        let node = &self.nodes[id];
        match node.kind {
            NodeKind::Terminal => out.push(node.label.clone()),
            NodeKind::Nonterminal => {
                out.push(format!("({}", node.label));
                for &c in &node.children {
                    self.linearize_into(c, out);
                }
                out.push(")".to_string());
            }
        }
    }

    /// Canonical single-space bracketed text.
    pub fn to_bracketed(&self) -> String {
        let mut s = String::new();
        self.write_bracketed(self.root, &mut s);
        s
    }

    fn write_bracketed(&self, id: usize, out: &mut String) {
        let node = &self.nodes[id];
        match node.kind {
            NodeKind::Terminal => out.push_str(&node.label),
            NodeKind::Nonterminal => {
                out.push('(');
                out.push_str(&node.label);
                for &c in &node.children {
                    out.push(' ');
                    self.write_bracketed(c, out);
                }
                out.push(')');
            }
        }
    }

    /// Copy of the subtree rooted at `id`.
    pub fn subtree(&self, id: usize) -> Tree {
        let mut t = Tree::new(self.label(id));
        t.nodes[0].kind = self.nodes[id].kind;
        let mut stack = vec![(id, 0usize)];
        while let Some((src, dst)) = stack.pop() {
            for &c in &self.nodes[src].children {
                let nc = t.add_child(dst, self.label(c), self.nodes[c].kind);
                stack.push((c, nc));
            }
        }
        t
    }

    fn eq_at(&self, a: usize, other: &Tree, b: usize) -> bool {
        let (x, y) = (&self.nodes[a], &other.nodes[b]);
        x.label == y.label
            && x.kind == y.kind
            && x.children.len() == y.children.len()
            && x.children.iter().zip(&y.children).all(|(&ca, &cb)| self.eq_at(ca, other, cb))
    }
}

impl PartialEq for Tree {
    fn eq(&self, other: &Self) -> bool {
        self.eq_at(self.root, other, other.root)
    }
}

impl Eq for Tree {}

impl fmt::Display for Tree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_bracketed())
    }
}

/// Nodes grouped by depth, root first; each layer lists the children of the
/// previous layer's nodes left to right.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerView {
    pub layers: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationReport {
    pub depth: usize,
    pub nonterminal_count: usize,
    pub terminal_count: usize,
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tok<'a> {
    Open(usize),
    Close(usize),
    Word(usize, &'a str),
}

fn tokenize(text: &str) -> Vec<Tok<'_>> {
    let mut toks = Vec::new();
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'(' => {
                toks.push(Tok::Open(i));
                i += 1;
            }
            b')' => {
                toks.push(Tok::Close(i));
                i += 1;
            }
            c if (c as char).is_ascii_whitespace() => i += 1,
            _ => {
                let start = i;
                while i < bytes.len() && !matches!(bytes[i], b'(' | b')') && !(bytes[i] as char).is_ascii_whitespace() {
                    i += 1;
                }
                toks.push(Tok::Word(start, &text[start..i]));
            }
        }
    }
    toks
}

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse { offset, message: message.into() }
}

/// Parses one bracketed tree such as `(S (NP (DT the) (NN cat)) (VP (VBD sat)))`.
pub fn parse_bracketed(text: &str) -> Result<Tree> {
    let toks = tokenize(text);
    // Balance first, so a truncated tree reports end of input.
    let mut depth = 0i64;
    for t in &toks {
        match t {
            Tok::Open(_) => depth += 1,
            Tok::Close(o) => {
                depth -= 1;
                if depth < 0 {
                    return Err(parse_err(*o, "unmatched ')'"));
                }
            }
            Tok::Word(..) => {}
        }
    }
    if depth > 0 {
        return Err(parse_err(text.len(), format!("{depth} unclosed '(' at end of input")));
    }
    let Some(first) = toks.first() else {
        return Err(parse_err(0, "empty input"));
    };
    if let Tok::Word(o, w) = first {
        return Err(parse_err(*o, format!("terminal {w:?} outside any constituent")));
    }

    let mut tree: Option<Tree> = None;
    let mut stack: Vec<usize> = Vec::new();
    let mut i = 0;
    while i < toks.len() {
        match toks[i] {
            Tok::Open(o) => {
                let label = match toks.get(i + 1) {
                    Some(Tok::Word(_, w)) => *w,
                    _ => return Err(parse_err(o, "constituent without a label")),
                };
                let id = match (&mut tree, stack.last()) {
                    (None, _) => {
                        tree = Some(Tree::new(label));
                        0
                    }
                    (Some(t), Some(&p)) => t.add_child(p, label, NodeKind::Nonterminal),
                    (Some(_), None) => return Err(parse_err(o, "content after the root constituent")),
                };
                stack.push(id);
                i += 2;
            }
            Tok::Close(o) => {
                let id = stack.pop().expect("balanced");
                let t = tree.as_ref().expect("open seen");
                if t.children(id).is_empty() {
                    return Err(parse_err(o, format!("empty constituent ({})", t.label(id))));
                }
                i += 1;
            }
            Tok::Word(o, w) => {
                let (Some(t), Some(&p)) = (&mut tree, stack.last()) else {
                    return Err(parse_err(o, format!("terminal {w:?} outside any constituent")));
                };
                t.add_child(p, w, NodeKind::Terminal);
                i += 1;
            }
        }
    }
    Ok(tree.expect("non-empty token stream"))
}

/// Reads a treebank: one tree per line, `#` comments and blank lines skipped.
/// Errors carry the 1-based line number in the message.
pub fn parse_treebank(text: &str) -> Result<Vec<Tree>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let l = line.trim();
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        let tree = parse_bracketed(l).map_err(|e| match e {
            Error::Parse { offset, message } => Error::Parse { offset, message: format!("line {}: {message}", n + 1) },
            other => other,
        })?;
        out.push(tree);
    }
    Ok(out)
}

pub fn write_treebank(trees: &[Tree]) -> String {
    let mut s = String::new();
    for t in trees {
        s.push_str(&t.to_bracketed());
        s.push('\n');
    }
    s
}

/// Why a bracket-token sequence does not form a tree. Positions are token
/// indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LinearFailure {
    Empty,
    UnmatchedClose { position: usize },
    UnclosedOpen { position: usize },
    TrailingTokens { position: usize },
    OutsideConstituent { position: usize },
    EmptyConstituent { position: usize },
    InvalidToken { position: usize },
}

impl fmt::Display for LinearFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LinearFailure::Empty => write!(f, "empty sequence"),
            LinearFailure::UnmatchedClose { position } => write!(f, "unmatched close at token {position}"),
            LinearFailure::UnclosedOpen { position } => write!(f, "unclosed open at token {position}"),
            LinearFailure::TrailingTokens { position } => write!(f, "trailing tokens from token {position}"),
            LinearFailure::OutsideConstituent { position } => write!(f, "word outside any constituent at token {position}"),
            LinearFailure::EmptyConstituent { position } => write!(f, "empty constituent at token {position}"),
            LinearFailure::InvalidToken { position } => write!(f, "invalid token at {position}"),
        }
    }
}

enum TokKind {
    Open,
    Close,
    Word,
    Invalid,
}

fn classify(t: &str) -> TokKind {
    if t == ")" {
        TokKind::Close
    } else if let Some(label) = t.strip_prefix('(') {
        if label.is_empty() || label.contains(['(', ')']) {
            TokKind::Invalid
        } else {
            TokKind::Open
        }
    } else if t.is_empty() || t.contains(['(', ')']) || t.contains(char::is_whitespace) {
        TokKind::Invalid
    } else {
        TokKind::Word
    }
}

/// Rebuilds a tree from bracket tokens, reporting the first violation.
pub fn delinearize_brackets<S: AsRef<str>>(tokens: &[S]) -> std::result::Result<Tree, LinearFailure> {
    if tokens.is_empty() {
        return Err(LinearFailure::Empty);
    }
    // Bracket matching takes precedence over structural problems.
    let mut depth = 0usize;
    let mut open_positions: Vec<usize> = Vec::new();
    for (i, t) in tokens.iter().enumerate() {
        let t = t.as_ref();
        match classify(t) {
            TokKind::Invalid => return Err(LinearFailure::InvalidToken { position: i }),
            TokKind::Close => {
                if depth == 0 {
                    return Err(LinearFailure::UnmatchedClose { position: i });
                }
                depth -= 1;
                open_positions.pop();
                if depth == 0 && i + 1 < tokens.len() {
                    return Err(LinearFailure::TrailingTokens { position: i + 1 });
                }
            }
            TokKind::Open => {
                depth += 1;
                open_positions.push(i);
            }
            TokKind::Word => {
                if depth == 0 {
                    return Err(LinearFailure::OutsideConstituent { position: i });
                }
            }
        }
    }
    if let Some(&p) = open_positions.first() {
        return Err(LinearFailure::UnclosedOpen { position: p });
    }

    let mut tree: Option<Tree> = None;
    let mut stack: Vec<usize> = Vec::new();
    for (i, t) in tokens.iter().enumerate() {
        let t = t.as_ref();
        if t == ")" {
            let id = stack.pop().expect("balanced");
            if tree.as_ref().unwrap().children(id).is_empty() {
                return Err(LinearFailure::EmptyConstituent { position: i });
            }
        } else if let Some(label) = t.strip_prefix('(') {
            let id = match (&mut tree, stack.last()) {
                (None, _) => {
                    tree = Some(Tree::new(label));
                    0
                }
                (Some(tr), Some(&p)) => tr.add_child(p, label, NodeKind::Nonterminal),
                (Some(_), None) => unreachable!("trailing tokens rejected above"),
            };
            stack.push(id);
        } else {
            let p = *stack.last().expect("checked above");
            tree.as_mut().unwrap().add_child(p, t, NodeKind::Terminal);
        }
    }
    Ok(tree.expect("non-empty"))
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = "(S (NP (DT the) (NN cat)) (VP (VBD sat)))";

    fn labels(t: &Tree, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| t.label(i).to_string()).collect()
    }

    #[test]
    fn parses_example() {
        let t = parse_bracketed(EXAMPLE).unwrap();
        assert_eq!(t.nonterminal_count(), 6);
        assert_eq!(t.terminal_count(), 3);
        assert_eq!(t.to_bracketed(), EXAMPLE);
        let messy = parse_bracketed("  (S\n(NP (DT the)(NN cat) )\t(VP (VBD sat)))").unwrap();
        assert_eq!(messy, t);
        assert_eq!(messy.to_bracketed(), EXAMPLE);
    }

    #[test]
    fn single_terminal_under_root() {
        let t = parse_bracketed("(X a)").unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.to_bracketed(), "(X a)");
        assert_eq!(t.linearize_brackets(), vec!["(X", "a", ")"]);
    }

    #[test]
    fn unary_chain_preserved() {
        let t = parse_bracketed("(A (B (C w)))").unwrap();
        assert_eq!(t.to_bracketed(), "(A (B (C w)))");
        assert_eq!(t.depth(), 3);
    }

    #[test]
    fn parse_errors_carry_offsets() {
        let text = "(S (NP)";
        match parse_bracketed(text) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, text.len()),
            other => panic!("{other:?}"),
        }
        match parse_bracketed("(S (NP) x)") {
            Err(Error::Parse { offset, message }) => {
                assert_eq!(offset, 6);
                assert!(message.contains("empty constituent"));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_bracketed("(S a))"), Err(Error::Parse { offset: 5, .. })));
        assert!(matches!(parse_bracketed("a (S b)"), Err(Error::Parse { offset: 0, .. })));
        assert!(parse_bracketed("(S a) (S b)").is_err());
        assert!(parse_bracketed("").is_err());
        assert!(parse_bracketed("((S a))").is_err());
    }

    #[test]
    fn layers_of_example() {
        let t = parse_bracketed(EXAMPLE).unwrap();
        let lv = t.layer_view();
        let got: Vec<Vec<String>> = lv.layers.iter().map(|l| labels(&t, l)).collect();
        assert_eq!(
            got,
            vec![vec!["S"], vec!["NP", "VP"], vec!["DT", "NN", "VBD"], vec!["the", "cat", "sat"]]
        );
    }

    #[test]
    fn single_node_has_one_layer() {
        let t = Tree::new("X");
        assert_eq!(t.layer_view().layers.len(), 1);
    }

    #[test]
    fn shallow_terminal_absent_from_deeper_layers() {
        let t = parse_bracketed("(S (A x) (B (C y)))").unwrap();
        let lv = t.layer_view();
        assert_eq!(labels(&t, &lv.layers[2]), vec!["x", "C"]);
        assert_eq!(labels(&t, &lv.layers[3]), vec!["y"]);
    }

    #[test]
    fn validate_example_and_violations() {
        let t = parse_bracketed(EXAMPLE).unwrap();
        let r = t.validate();
        assert_eq!((r.depth, r.nonterminal_count, r.terminal_count), (3, 6, 3));
        assert!(r.is_valid());

        let childless = Tree::new("S");
        assert!(!childless.validate().is_valid());

        let mut nodes = t.nodes().to_vec();
        nodes.push(Node { label: "Z".into(), kind: NodeKind::Nonterminal, parent: None, children: vec![] });
        let two_roots = Tree::from_raw(nodes, 0);
        let r = two_roots.validate();
        assert!(r.violations.iter().any(|v| v.contains("exactly one root")), "{r:?}");
    }

    #[test]
    fn linearize_example() {
        let t = parse_bracketed(EXAMPLE).unwrap();
        let toks = t.linearize_brackets();
        assert_eq!(toks.join(" "), "(S (NP (DT the ) (NN cat ) ) (VP (VBD sat ) ) )");
        assert_eq!(toks.len(), 15);
        assert_eq!(delinearize_brackets(&toks).unwrap(), t);
    }

    #[test]
    fn delinearize_failures() {
        let toks = |s: &str| s.split_whitespace().map(String::from).collect::<Vec<_>>();
        assert_eq!(delinearize_brackets(&toks("(S (NP )")), Err(LinearFailure::UnclosedOpen { position: 0 }));
        assert_eq!(delinearize_brackets(&toks(") (S a )")), Err(LinearFailure::UnmatchedClose { position: 0 }));
        assert_eq!(delinearize_brackets(&toks("(S (NP ) a )")), Err(LinearFailure::EmptyConstituent { position: 2 }));
        assert_eq!(delinearize_brackets(&toks("(S a ) b")), Err(LinearFailure::TrailingTokens { position: 3 }));
        assert_eq!(delinearize_brackets(&toks("a (S b )")), Err(LinearFailure::OutsideConstituent { position: 0 }));
        assert_eq!(delinearize_brackets::<String>(&[]), Err(LinearFailure::Empty));
        assert_eq!(delinearize_brackets(&toks("( a )")), Err(LinearFailure::InvalidToken { position: 0 }));
    }

    #[test]
    fn treebank_skips_comments() {
        let text = "# header\n\n(X a)\n  (Y (Z b))\n";
        let trees = parse_treebank(text).unwrap();
        assert_eq!(trees.len(), 2);
        assert_eq!(write_treebank(&trees), "(X a)\n(Y (Z b))\n");
        let err = parse_treebank("(X a)\n(Y\n").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn subtree_copies_structure() {
        let t = parse_bracketed(EXAMPLE).unwrap();
        let np = t.children(t.root())[0];
        assert_eq!(t.subtree(np).to_bracketed(), "(NP (DT the) (NN cat))");
        assert_eq!(t.words(), vec!["the", "cat", "sat"]);
    }
}
