//! Sentence decomposition: a parsed sentence becomes one subject noun
//! phrase paired with its atomic verb phrases, in surface order.
//!
//! The subject is the first pre-order noun phrase with no verb phrase
//! beneath it (so a subject carrying a relative clause yields its head
//! NP, not the clause). Verb phrases are reduced to atomic actions:
//! coordinations split into their conjuncts, auxiliary wrappers such as
//! "is running" collapse to the inner phrase, and whatever remains is
//! emitted whole. Conjunctions and punctuation fall away because they
//! are never inside the emitted nodes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::treebank::{label_matches, ParseTree};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PlanError {
    #[error("no subject noun phrase in the tree")]
    NoNounPhrase,
    #[error("no verb phrase in the tree")]
    NoVerbPhrase,
}

/// One atomic action with its half-open leaf-index span.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerbPhrase {
    pub text: String,
    pub span: (usize, usize),
}

/// Decomposition result: the subject phrase and the ordered actions it
/// is paired with. Step `p` of downstream refinement consumes the pair
/// `(np, vps[p])`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubPromptChain {
    pub np: String,
    pub np_span: (usize, usize),
    pub vps: Vec<VerbPhrase>,
}

impl SubPromptChain {
    /// Number of refinement steps the chain drives.
    pub fn steps(&self) -> usize {
        self.vps.len()
    }
}

fn has_vp_descendant(node: &ParseTree) -> bool {
    node.preorder()
        .skip(1)
        .any(|n| label_matches(&n.label, "VP"))
}

/// First pre-order noun phrase containing no verb phrase.
pub fn find_main_np(tree: &ParseTree) -> Option<&ParseTree> {
    tree.preorder()
        .find(|n| label_matches(&n.label, "NP") && !has_vp_descendant(n))
}

/// All atomic verb phrases in surface order. A verb phrase with two or
/// more VP children is a coordination: each conjunct is processed and
/// the parent is dropped. Exactly one VP child marks an auxiliary
/// wrapper: the wrapper is dropped and the inner phrase processed. A
/// verb phrase with no VP children is atomic and emitted as is.
pub fn collect_atomic_vps(tree: &ParseTree) -> Vec<&ParseTree> {
    let mut out = Vec::new();
    walk(tree, &mut out);
    out
}

fn walk<'a>(node: &'a ParseTree, out: &mut Vec<&'a ParseTree>) {
    if label_matches(&node.label, "VP") {
        process_vp(node, out);
    } else {
        for child in &node.children {
            walk(child, out);
        }
    }
}

fn process_vp<'a>(vp: &'a ParseTree, out: &mut Vec<&'a ParseTree>) {
    let inner: Vec<&ParseTree> = vp
        .children
        .iter()
        .filter(|c| label_matches(&c.label, "VP"))
        .collect();
    match inner.len() {
        0 => out.push(vp),
        1 => process_vp(inner[0], out),
        _ => {
            for conjunct in inner {
                process_vp(conjunct, out);
            }
        }
    }
}

/// Strict decomposition: errors when the tree lacks a usable subject or
/// any verb phrase.
pub fn decompose(tree: &ParseTree) -> Result<SubPromptChain, PlanError> {
    let np = find_main_np(tree).ok_or(PlanError::NoNounPhrase)?;
    let vps = collect_atomic_vps(tree);
    if vps.is_empty() {
        return Err(PlanError::NoVerbPhrase);
    }
    let chain = SubPromptChain {
        np: np.text(),
        np_span: np.span,
        vps: vps
            .into_iter()
            .map(|v| VerbPhrase { text: v.text(), span: v.span })
            .collect(),
    };
    debug_assert!(spans_disjoint_increasing(&chain));
    Ok(chain)
}

/// Lenient decomposition for malformed or fragmentary trees: a missing
/// subject falls back to the whole sentence, and a missing verb phrase
/// falls back to the tokens flanking the subject (trailing side first),
/// or the whole sentence when the subject covers everything.
pub fn decompose_lenient(tree: &ParseTree) -> SubPromptChain {
    let tokens = tree.leaf_tokens();
    let n = tokens.len();
    let whole = || (tokens.join(" "), (0usize, n));

    let (np, np_span) = match find_main_np(tree) {
        Some(node) => (node.text(), node.span),
        None => whole(),
    };

    let vps = collect_atomic_vps(tree);
    let vps = if vps.is_empty() {
        let span = if np_span.1 < n {
            (np_span.1, n)
        } else if np_span.0 > 0 {
            (0, np_span.0)
        } else {
            (0, n)
        };
        vec![VerbPhrase { text: tokens[span.0..span.1].join(" "), span }]
    } else {
        vps.into_iter()
            .map(|v| VerbPhrase { text: v.text(), span: v.span })
            .collect()
    };

    let chain = SubPromptChain { np, np_span, vps };
    debug_assert!(spans_disjoint_increasing(&chain));
    chain
}

/// Emitted actions never overlap and appear in surface order.
fn spans_disjoint_increasing(chain: &SubPromptChain) -> bool {
    chain
        .vps
        .windows(2)
        .all(|pair| pair[0].span.1 <= pair[1].span.0)
}
