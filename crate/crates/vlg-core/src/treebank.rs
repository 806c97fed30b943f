//! Bracketed constituency trees.
//!
//! Parses the conventional single-line bracketed form, e.g.
//! `(S (NP (NN dog)) (VP (VBZ runs)))`. A leaf is a label with exactly one
//! bare token; `(NN dog)` and a bare `dog` directly under a phrase label
//! normalize to the same leaf shape. Structural errors (bracket balance,
//! trailing input) are reported before content errors (empty labels,
//! empty nodes, mixed bare/bracketed children), each with a byte offset.

use std::fmt;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TreeParseError {
    #[error("unbalanced brackets at byte {position}")]
    UnbalancedBrackets { position: usize },
    #[error("empty node label at byte {position}")]
    EmptyLabel { position: usize },
    #[error("trailing input after the tree at byte {position}")]
    TrailingGarbage { position: usize },
    #[error("node with no children or token at byte {position}")]
    EmptyNode { position: usize },
    #[error("node mixes bare tokens and bracketed children at byte {position}")]
    MixedContent { position: usize },
}

#[derive(Debug, Error)]
pub enum TreeFileError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        source: TreeParseError,
    },
}

/// Node of a constituency tree. Leaves carry a surface token; internal
/// nodes carry children. `span` is the half-open range of leaf indices
/// covered by the node, assigned left to right.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseTree {
    pub label: String,
    pub token: Option<String>,
    pub children: Vec<ParseTree>,
    pub span: (usize, usize),
}

impl ParseTree {
    pub fn is_leaf(&self) -> bool {
        self.token.is_some()
    }

    /// Leaf tokens under this node, in surface order.
    pub fn leaf_tokens(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect_tokens(&mut out);
        out
    }

    fn collect_tokens<'a>(&'a self, out: &mut Vec<&'a str>) {
        if let Some(token) = &self.token {
            out.push(token);
        }
        for child in &self.children {
            child.collect_tokens(out);
        }
    }

    /// Surface text: leaf tokens joined by single spaces.
    pub fn text(&self) -> String {
        self.leaf_tokens().join(" ")
    }

    /// Depth-first pre-order walk (node before its children).
    pub fn preorder(&self) -> impl Iterator<Item = &ParseTree> {
        let mut stack = vec![self];
        std::iter::from_fn(move || {
            let node = stack.pop()?;
            stack.extend(node.children.iter().rev());
            Some(node)
        })
    }
}

impl fmt::Display for ParseTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render(self))
    }
}

/// True when `label`, stripped of functional annotations (everything from
/// the first `-` or `=` on), equals `target`. `NP-SBJ` and `NP=1` match
/// `NP`; `NPS` does not.
pub fn label_matches(label: &str, target: &str) -> bool {
    let stem = label
        .split(['-', '='])
        .next()
        .expect("split yields at least one item");
    stem == target
}

// ── Parsing ──

#[derive(Clone, Copy, PartialEq)]
enum TokKind {
    Open,
    Close,
    Sym,
}

struct Tok<'a> {
    kind: TokKind,
    pos: usize,
    text: &'a str,
}

fn lex(input: &str) -> Vec<Tok<'_>> {
    let mut toks = Vec::new();
    let bytes = input.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'(' => {
                toks.push(Tok { kind: TokKind::Open, pos: i, text: "(" });
                i += 1;
            }
            b')' => {
                toks.push(Tok { kind: TokKind::Close, pos: i, text: ")" });
                i += 1;
            }
            c if c.is_ascii_whitespace() => i += 1,
            _ => {
                let start = i;
                while i < bytes.len()
                    && !bytes[i].is_ascii_whitespace()
                    && bytes[i] != b'('
                    && bytes[i] != b')'
                {
                    i += 1;
                }
                toks.push(Tok { kind: TokKind::Sym, pos: start, text: &input[start..i] });
            }
        }
    }
    toks
}

enum RawItem {
    Word { pos: usize, text: String },
    Child(RawNode),
}

struct RawNode {
    open_pos: usize,
    label: String,
    items: Vec<RawItem>,
}

struct Parser<'a> {
    toks: Vec<Tok<'a>>,
    at: usize,
    end: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&Tok<'a>> {
        self.toks.get(self.at)
    }

    fn parse_node(&mut self) -> Result<RawNode, TreeParseError> {
        let open = match self.peek() {
            Some(t) if t.kind == TokKind::Open => {
                let pos = t.pos;
                self.at += 1;
                pos
            }
            Some(t) => return Err(TreeParseError::UnbalancedBrackets { position: t.pos }),
            None => return Err(TreeParseError::UnbalancedBrackets { position: self.end }),
        };
        // The label may be structurally absent; that is reported as
        // EmptyLabel only after brackets are known to balance.
        let label = match self.peek() {
            Some(t) if t.kind == TokKind::Sym => {
                let text = t.text.to_string();
                self.at += 1;
                text
            }
            _ => String::new(),
        };
        let mut items = Vec::new();
        loop {
            match self.peek() {
                Some(t) if t.kind == TokKind::Close => {
                    self.at += 1;
                    return Ok(RawNode { open_pos: open, label, items });
                }
                Some(t) if t.kind == TokKind::Sym => {
                    items.push(RawItem::Word { pos: t.pos, text: t.text.to_string() });
                    self.at += 1;
                }
                Some(t) if t.kind == TokKind::Open => {
                    items.push(RawItem::Child(self.parse_node()?));
                }
                Some(_) => unreachable!("token kinds are exhaustive"),
                None => return Err(TreeParseError::UnbalancedBrackets { position: self.end }),
            }
        }
    }
}

fn validate(node: &RawNode) -> Result<(), TreeParseError> {
    if node.label.is_empty() {
        return Err(TreeParseError::EmptyLabel { position: node.open_pos });
    }
    if node.items.is_empty() {
        return Err(TreeParseError::EmptyNode { position: node.open_pos });
    }
    let mut saw_word = false;
    let mut saw_child = false;
    for item in &node.items {
        match item {
            RawItem::Word { pos, .. } => {
                saw_word = true;
                if saw_child {
                    return Err(TreeParseError::MixedContent { position: *pos });
                }
            }
            RawItem::Child(child) => {
                saw_child = true;
                if saw_word {
                    return Err(TreeParseError::MixedContent { position: child.open_pos });
                }
            }
        }
    }
    for item in &node.items {
        if let RawItem::Child(child) = item {
            validate(child)?;
        }
    }
    Ok(())
}

fn build(node: RawNode, next_leaf: &mut usize) -> ParseTree {
    let all_words = node
        .items
        .iter()
        .all(|i| matches!(i, RawItem::Word { .. }));
    if all_words && node.items.len() == 1 {
        let RawItem::Word { text, .. } = node.items.into_iter().next().expect("one item") else {
            unreachable!("checked all_words");
        };
        let at = *next_leaf;
        *next_leaf += 1;
        return ParseTree {
            label: node.label,
            token: Some(text),
            children: Vec::new(),
            span: (at, at + 1),
        };
    }
    let label = node.label;
    let children: Vec<ParseTree> = node
        .items
        .into_iter()
        .map(|item| match item {
            // Several bare tokens under one label normalize to one leaf
            // per token, each inheriting the parent label.
            RawItem::Word { text, .. } => {
                let at = *next_leaf;
                *next_leaf += 1;
                ParseTree {
                    label: label.clone(),
                    token: Some(text),
                    children: Vec::new(),
                    span: (at, at + 1),
                }
            }
            RawItem::Child(child) => build(child, next_leaf),
        })
        .collect();
    let span = (
        children.first().expect("validated non-empty").span.0,
        children.last().expect("validated non-empty").span.1,
    );
    ParseTree { label, token: None, children, span }
}

/// Parses one bracketed tree; the whole input must be a single balanced
/// expression. Positions in errors are byte offsets into `input`.
pub fn parse_tree(input: &str) -> Result<ParseTree, TreeParseError> {
    let toks = lex(input);
    let mut parser = Parser { toks, at: 0, end: input.len() };
    let root = parser.parse_node()?;
    if let Some(t) = parser.peek() {
        return Err(TreeParseError::TrailingGarbage { position: t.pos });
    }
    validate(&root)?;
    let mut next_leaf = 0;
    Ok(build(root, &mut next_leaf))
}

/// Canonical single-line form: children separated by single spaces.
pub fn render(tree: &ParseTree) -> String {
    let mut out = String::new();
    render_into(tree, &mut out);
    out
}

fn render_into(tree: &ParseTree, out: &mut String) {
    out.push('(');
    out.push_str(&tree.label);
    if let Some(token) = &tree.token {
        out.push(' ');
        out.push_str(token);
    }
    for child in &tree.children {
        out.push(' ');
        render_into(child, out);
    }
    out.push(')');
}

/// Reads a tree file: one bracketed tree per line; blank lines and lines
/// starting with `#` are skipped.
pub fn read_tree_file(path: &Path) -> Result<Vec<ParseTree>, TreeFileError> {
    parse_tree_lines(&std::fs::read_to_string(path)?)
}

/// Same as [`read_tree_file`] for in-memory text.
pub fn parse_tree_lines(text: &str) -> Result<Vec<ParseTree>, TreeFileError> {
    let mut trees = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let tree = parse_tree(trimmed).map_err(|source| TreeFileError::Parse {
            line: idx + 1,
            source,
        })?;
        trees.push(tree);
    }
    Ok(trees)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_the_basic_sentence() {
        let t = parse_tree("(S (NP (NN dog)) (VP (VBZ runs)))").unwrap();
        assert_eq!(t.label, "S");
        assert_eq!(t.span, (0, 2));
        assert_eq!(t.children.len(), 2);
        let np = &t.children[0];
        assert_eq!(np.label, "NP");
        assert_eq!(np.span, (0, 1));
        let nn = &np.children[0];
        assert_eq!(nn.token.as_deref(), Some("dog"));
        assert_eq!(t.text(), "dog runs");
    }

    #[test]
    fn preterminal_and_bare_leaf_have_the_same_shape() {
        let a = parse_tree("(NN dog)").unwrap();
        assert!(a.is_leaf());
        assert_eq!(a.label, "NN");
        assert_eq!(a.token.as_deref(), Some("dog"));
        let b = parse_tree("(NP dog)").unwrap();
        assert!(b.is_leaf());
        assert_eq!(b.label, "NP");
        assert_eq!(b.token.as_deref(), Some("dog"));
    }

    #[test]
    fn whitespace_variants_parse_identically() {
        let canonical = parse_tree("(S (NP (NN dog)) (VP (VBZ runs)))").unwrap();
        let spaced = parse_tree("  ( S\t(NP\n   (NN dog) )  (VP (VBZ runs))\n)  ").unwrap();
        assert_eq!(canonical, spaced);
    }

    #[test]
    fn missing_close_is_unbalanced_at_end_of_input() {
        let input = "((S (NP (NN a)))";
        assert_eq!(
            parse_tree(input),
            Err(TreeParseError::UnbalancedBrackets { position: input.len() })
        );
    }

    #[test]
    fn stray_close_is_unbalanced_at_its_position() {
        assert_eq!(
            parse_tree(")(S x)"),
            Err(TreeParseError::UnbalancedBrackets { position: 0 })
        );
    }

    #[test]
    fn empty_label_reported_after_balance() {
        assert_eq!(
            parse_tree("((S (NP (NN a))))"),
            Err(TreeParseError::EmptyLabel { position: 0 })
        );
    }

    #[test]
    fn trailing_garbage_is_reported() {
        assert_eq!(
            parse_tree("(NN dog) extra"),
            Err(TreeParseError::TrailingGarbage { position: 9 })
        );
        assert_eq!(
            parse_tree("(NN dog) (NN cat)"),
            Err(TreeParseError::TrailingGarbage { position: 9 })
        );
    }

    #[test]
    fn empty_node_and_mixed_content_are_rejected() {
        assert_eq!(parse_tree("(NP)"), Err(TreeParseError::EmptyNode { position: 0 }));
        assert_eq!(
            parse_tree("(NP dog (NN cat))"),
            Err(TreeParseError::MixedContent { position: 8 })
        );
    }

    #[test]
    fn multi_token_node_normalizes_to_one_leaf_per_token() {
        let t = parse_tree("(NP the dog)").unwrap();
        assert_eq!(t.children.len(), 2);
        assert!(t.children.iter().all(|c| c.is_leaf() && c.label == "NP"));
        assert_eq!(t.text(), "the dog");
        assert_eq!(render(&t), "(NP (NP the) (NP dog))");
        // Idempotent under a second round trip.
        let again = parse_tree(&render(&t)).unwrap();
        assert_eq!(render(&again), render(&t));
    }

    #[test]
    fn label_matching_strips_annotations() {
        assert!(label_matches("NP", "NP"));
        assert!(label_matches("NP-SBJ", "NP"));
        assert!(label_matches("NP-SBJ-1", "NP"));
        assert!(label_matches("NP=2", "NP"));
        assert!(!label_matches("NPS", "NP"));
        assert!(!label_matches("N", "NP"));
        assert!(!label_matches("VP", "NP"));
    }

    #[test]
    fn spans_cover_leaves_contiguously() {
        let t = parse_tree("(S (NP (DT the) (NN dog)) (VP (VBZ runs) (ADVP (RB far))))").unwrap();
        assert_eq!(t.span, (0, 4));
        assert_eq!(t.children[0].span, (0, 2));
        assert_eq!(t.children[1].span, (2, 4));
        // Each internal node spans exactly its children.
        for node in t.preorder() {
            if !node.is_leaf() {
                assert_eq!(node.span.0, node.children.first().unwrap().span.0);
                assert_eq!(node.span.1, node.children.last().unwrap().span.1);
                for pair in node.children.windows(2) {
                    assert_eq!(pair[0].span.1, pair[1].span.0);
                }
            }
        }
    }

    #[test]
    fn preorder_visits_parent_before_children_left_to_right() {
        let t = parse_tree("(S (A (B x) (C y)) (D z))").unwrap();
        let labels: Vec<&str> = t.preorder().map(|n| n.label.as_str()).collect();
        assert_eq!(labels, vec!["S", "A", "B", "C", "D"]);
    }

    #[test]
    fn fixture_corpus_parses_and_renders_idempotently() {
        let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("corpus/trees.mrg");
        let text = std::fs::read_to_string(path).unwrap();
        let trees = parse_tree_lines(&text).unwrap();
        assert_eq!(trees.len(), 20, "fixture corpus holds twenty trees");
        for tree in &trees {
            let rendered = render(tree);
            let reparsed = parse_tree(&rendered).unwrap();
            assert_eq!(&reparsed, tree);
            assert_eq!(render(&reparsed), rendered);
        }
    }

    // Structure generator for round-trip properties.
    fn arb_label() -> impl Strategy<Value = String> {
        proptest::string::string_regex("[A-Z]{1,3}(-[A-Z]{1,2})?").unwrap()
    }

    fn arb_tree() -> impl Strategy<Value = ParseTree> {
        let token = proptest::string::string_regex("[a-z]{1,6}").unwrap();
        let leaf = (arb_label(), token).prop_map(|(label, token)| ParseTree {
            label,
            token: Some(token),
            children: Vec::new(),
            span: (0, 0),
        });
        leaf.prop_recursive(4, 24, 4, move |inner| {
            (arb_label(), proptest::collection::vec(inner, 1..4)).prop_map(
                |(label, children)| ParseTree {
                    label,
                    token: None,
                    children,
                    span: (0, 0),
                },
            )
        })
    }

    proptest! {
        #[test]
        fn render_parse_round_trip(t in arb_tree()) {
            let rendered = render(&t);
            let parsed = parse_tree(&rendered).unwrap();
            // Rendered forms agree (spans are recomputed by the parser).
            prop_assert_eq!(render(&parsed), rendered.clone());
            // And a second round trip is a fixed point.
            let again = parse_tree(&render(&parsed)).unwrap();
            prop_assert_eq!(again, parsed);
        }
    }
}
