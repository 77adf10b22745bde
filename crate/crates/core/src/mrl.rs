//! The bracketed meaning-representation language (MRL).
//!
//! An MRL is a tree of intents (`IN:*`) and slots (`SL:*`) whose leaves are
//! surface tokens. In the adapted form used throughout this toolkit, intent
//! nodes carry no text of their own; only slot nodes hold token spans. The
//! canonical serialization is single-space separated:
//!
//! ```text
//! [IN:GET_EVENT [SL:CATEGORY_EVENT festivals ] [SL:DATE_TIME this weekend ] ]
//! ```
//!
//! `parse_mrl` and `serialize_mrl` round-trip: parsing a well-formed string
//! and serializing the result reproduces the whitespace-normalized input.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Root intent name whose utterances are discarded during adaptation.
pub const UNSUPPORTED_INTENT: &str = "IN:UNSUPPORTED";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MrlError {
    #[error("unbalanced brackets: {0}")]
    UnbalancedBrackets(String),
    #[error("root node must be an intent, got {0}")]
    RootNotIntent(String),
    #[error("bad label {0:?}: labels are [IN:NAME or [SL:NAME with NAME in [A-Z_0-9]+")]
    BadLabel(String),
    #[error("text tokens {tokens:?} directly under intent {label}")]
    TextUnderIntent { label: String, tokens: Vec<String> },
    #[error("slot {label} holds both text {tokens:?} and nested nodes")]
    MixedSlotContent { label: String, tokens: Vec<String> },
    #[error("leaf span {span:?} is not a contiguous subsequence of the question")]
    LeafSpanMismatch { span: Vec<String> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LabelKind {
    Intent,
    Slot,
}

/// A node label such as `IN:GET_EVENT` or `SL:DATE_TIME`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MrlLabel {
    pub kind: LabelKind,
    pub name: String,
}

impl MrlLabel {
    pub fn intent(name: &str) -> Self {
        MrlLabel { kind: LabelKind::Intent, name: name.to_string() }
    }

    pub fn slot(name: &str) -> Self {
        MrlLabel { kind: LabelKind::Slot, name: name.to_string() }
    }

    /// Parses an opening token of the form `[IN:NAME` or `[SL:NAME`.
    fn from_open_token(token: &str) -> Result<Self, MrlError> {
        let body = &token[1..];
        let (kind, name) = if let Some(rest) = body.strip_prefix("IN:") {
            (LabelKind::Intent, rest)
        } else if let Some(rest) = body.strip_prefix("SL:") {
            (LabelKind::Slot, rest)
        } else {
            return Err(MrlError::BadLabel(token.to_string()));
        };
        if name.is_empty() || !name.bytes().all(|b| b.is_ascii_uppercase() || b.is_ascii_digit() || b == b'_') {
            return Err(MrlError::BadLabel(token.to_string()));
        }
        Ok(MrlLabel { kind, name: body.to_string() })
    }
}

impl std::fmt::Display for MrlLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MrlNode {
    pub label: MrlLabel,
    pub children: Vec<MrlNode>,
    pub text: Vec<String>,
}

impl MrlNode {
    pub fn new(label: MrlLabel) -> Self {
        MrlNode { label, children: Vec::new(), text: Vec::new() }
    }

    pub fn is_leaf(&self) -> bool {
        !self.text.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MrlTree {
    pub root: MrlNode,
}

impl MrlTree {
    /// Pre-order traversal over all nodes.
    pub fn nodes(&self) -> Vec<&MrlNode> {
        let mut out = Vec::new();
        fn walk<'a>(node: &'a MrlNode, out: &mut Vec<&'a MrlNode>) {
            out.push(node);
            for c in &node.children {
                walk(c, out);
            }
        }
        walk(&self.root, &mut out);
        out
    }

    /// Leaf text spans in pre-order (which, for TOP-style data, is also
    /// utterance order).
    pub fn leaf_spans(&self) -> Vec<&Vec<String>> {
        self.nodes().into_iter().filter(|n| n.is_leaf()).map(|n| &n.text).collect()
    }

    /// Multiset of labels, useful for structure-preservation checks.
    pub fn label_multiset(&self) -> Vec<String> {
        let mut labels: Vec<String> =
            self.nodes().into_iter().map(|n| n.label.name.clone()).collect();
        labels.sort();
        labels
    }
}

impl std::fmt::Display for MrlTree {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&serialize_mrl(self))
    }
}

/// Outcome of adapting a raw TOP annotation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Adapted {
    Tree(MrlTree),
    /// Root intent was `IN:UNSUPPORTED`; the utterance is discarded.
    Dropped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseMode {
    /// Structural violations (text under an intent) are errors.
    Strict,
    /// Text under intents is silently dropped; used for ingesting the
    /// original TOP form where intents carry inline utterance tokens.
    Lenient,
}

/// Parses the canonical bracketed form with strict validation.
pub fn parse_mrl(text: &str) -> Result<MrlTree, MrlError> {
    parse_mrl_with(text, ParseMode::Strict)
}

/// Tokens beginning with `[IN:` / `[SL:` open a node, `]` closes the
/// innermost open node, and every other token is leaf text of the innermost
/// node. Any other token starting with `[` is rejected as a bad label.
pub fn parse_mrl_with(text: &str, mode: ParseMode) -> Result<MrlTree, MrlError> {
    let mut stack: Vec<MrlNode> = Vec::new();
    let mut root: Option<MrlNode> = None;

    for token in text.split_whitespace() {
        if token == "]" {
            let mut node = stack
                .pop()
                .ok_or_else(|| MrlError::UnbalancedBrackets("unmatched ]".into()))?;
            close_node(&mut node, mode)?;
            match stack.last_mut() {
                Some(parent) => parent.children.push(node),
                None => {
                    if root.is_some() {
                        return Err(MrlError::UnbalancedBrackets(
                            "content after the root node closed".into(),
                        ));
                    }
                    root = Some(node);
                }
            }
        } else if token.starts_with('[') {
            let label = MrlLabel::from_open_token(token)?;
            if stack.is_empty() {
                if root.is_some() {
                    return Err(MrlError::UnbalancedBrackets(
                        "content after the root node closed".into(),
                    ));
                }
                if label.kind != LabelKind::Intent {
                    return Err(MrlError::RootNotIntent(label.name));
                }
            }
            stack.push(MrlNode::new(label));
        } else {
            match stack.last_mut() {
                Some(node) => node.text.push(token.to_string()),
                None => {
                    return Err(MrlError::UnbalancedBrackets(format!(
                        "token {token:?} outside any node"
                    )))
                }
            }
        }
    }

    if !stack.is_empty() {
        return Err(MrlError::UnbalancedBrackets(format!(
            "{} node(s) left open at end of input",
            stack.len()
        )));
    }
    let root = root.ok_or_else(|| MrlError::UnbalancedBrackets("empty input".into()))?;
    Ok(MrlTree { root })
}

fn close_node(node: &mut MrlNode, mode: ParseMode) -> Result<(), MrlError> {
    if node.children.is_empty() || node.text.is_empty() {
        return Ok(());
    }
    match node.label.kind {
        LabelKind::Intent => match mode {
            ParseMode::Strict => Err(MrlError::TextUnderIntent {
                label: node.label.name.clone(),
                tokens: node.text.clone(),
            }),
            ParseMode::Lenient => {
                node.text.clear();
                Ok(())
            }
        },
        // Slots hold either a token span or a nested node, never both.
        LabelKind::Slot => Err(MrlError::MixedSlotContent {
            label: node.label.name.clone(),
            tokens: node.text.clone(),
        }),
    }
}

/// Canonical single-space serialization: `[LABEL child... text... ]`.
pub fn serialize_mrl(tree: &MrlTree) -> String {
    let mut out = String::new();
    write_node(&tree.root, &mut out);
    out
}

fn write_node(node: &MrlNode, out: &mut String) {
    out.push('[');
    out.push_str(&node.label.name);
    for child in &node.children {
        out.push(' ');
        write_node(child, out);
    }
    for token in &node.text {
        out.push(' ');
        out.push_str(token);
    }
    out.push_str(" ]");
}

/// Whitespace-normalizes a serialized MRL: token comparisons in this toolkit
/// are over token sequences, never raw bytes.
pub fn canonical(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Adapts an original TOP annotation (inline text under intents) into the
/// MRL used by the pipeline. Text directly under intent nodes is removed;
/// slot entity text is kept. Utterances whose root intent is
/// `IN:UNSUPPORTED` are reported as [`Adapted::Dropped`].
///
/// `question_tokens` is the tokenized utterance the annotation came with;
/// every surviving leaf span must occur, left to right, as a contiguous
/// subsequence of it.
pub fn adapt_top_annotation(
    original: &str,
    question_tokens: &[String],
) -> Result<Adapted, MrlError> {
    let tree = parse_mrl_with(original, ParseMode::Lenient)?;
    if tree.root.label.name == UNSUPPORTED_INTENT {
        return Ok(Adapted::Dropped);
    }
    // Intent text was dropped by the lenient parse; what remains must be
    // anchored in the question for downstream template construction.
    let mut cursor = 0usize;
    for span in tree.leaf_spans() {
        match find_span(question_tokens, span, cursor) {
            Some(start) => cursor = start + span.len(),
            None => return Err(MrlError::LeafSpanMismatch { span: span.clone() }),
        }
    }
    Ok(Adapted::Tree(tree))
}

/// Leftmost occurrence of `span` in `haystack` starting at or after `from`.
pub(crate) fn find_span(haystack: &[String], span: &[String], from: usize) -> Option<usize> {
    if span.is_empty() || haystack.len() < span.len() {
        return None;
    }
    (from..=haystack.len() - span.len()).find(|&start| haystack[start..start + span.len()] == *span)
}
