//! Placeholder templates: the first bootstrap step.
//!
//! A template replaces every MRL leaf span with a dense placeholder symbol
//! `x0..xk-1` and tags the matching question tokens with the same ids, e.g.
//!
//! ```text
//! Any festivals|x0 this|x1 weekend|x1
//! [IN:GET_EVENT [SL:CATEGORY_EVENT x0 ] [SL:DATE_TIME x1 ] ]
//! ```
//!
//! After translation and alignment, [`restore_template`] substitutes
//! target-language tokens back into the skeleton.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::dataset::Example;
use crate::mrl::{self, MrlNode, MrlTree};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TemplateError {
    #[error("leaf span {span:?} not found in the question after token {from}")]
    SpanNotFound { span: Vec<String>, from: usize },
    #[error("placeholder spans overlap at token {at}")]
    OverlappingSpans { at: usize },
    #[error("no substitution provided for placeholder x{0}")]
    MissingSubstitution(usize),
    #[error("substitution for placeholder x{0} is empty")]
    EmptySubstitution(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlaceholderTemplate {
    pub question_tokens: Vec<String>,
    /// Per-token placeholder id; `None` for untagged tokens.
    pub token_tags: Vec<Option<usize>>,
    /// MRL skeleton whose leaf text lists are single symbols `x0..xk-1`.
    pub skeleton: MrlTree,
    pub k: usize,
}

impl PlaceholderTemplate {
    /// Source token positions tagged with `id`.
    pub fn positions_of(&self, id: usize) -> Vec<usize> {
        self.token_tags
            .iter()
            .enumerate()
            .filter_map(|(i, t)| (*t == Some(id)).then_some(i))
            .collect()
    }

    /// The original token span for each placeholder, in id order.
    pub fn original_spans(&self) -> BTreeMap<usize, Vec<String>> {
        let mut spans: BTreeMap<usize, Vec<String>> = BTreeMap::new();
        for (i, tag) in self.token_tags.iter().enumerate() {
            if let Some(id) = tag {
                spans.entry(*id).or_default().push(self.question_tokens[i].clone());
            }
        }
        spans
    }

    /// Debug rendering with `token|x_k` annotations.
    pub fn render_tagged(&self) -> String {
        self.question_tokens
            .iter()
            .zip(&self.token_tags)
            .map(|(tok, tag)| match tag {
                Some(id) => format!("{tok}|x{id}"),
                None => tok.clone(),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

pub fn placeholder_symbol(id: usize) -> String {
    format!("x{id}")
}

fn parse_placeholder_symbol(sym: &str) -> Option<usize> {
    sym.strip_prefix('x').and_then(|rest| rest.parse().ok())
}

/// Builds the placeholder template for an example.
///
/// Leaf spans are located by leftmost match starting after the end of the
/// previously matched span: TOP leaf order follows utterance order, so the
/// monotone policy also resolves duplicated surface text deterministically.
pub fn make_template(example: &Example) -> Result<PlaceholderTemplate, TemplateError> {
    let question = &example.question_tokens;
    let mut token_tags: Vec<Option<usize>> = vec![None; question.len()];
    let mut cursor = 0usize;
    let mut next_id = 0usize;

    let mut skeleton = example.mrl.clone();
    assign_ids(&mut skeleton.root, question, &mut token_tags, &mut cursor, &mut next_id)?;

    Ok(PlaceholderTemplate {
        question_tokens: question.clone(),
        token_tags,
        skeleton,
        k: next_id,
    })
}

fn assign_ids(
    node: &mut MrlNode,
    question: &[String],
    token_tags: &mut [Option<usize>],
    cursor: &mut usize,
    next_id: &mut usize,
) -> Result<(), TemplateError> {
    if node.is_leaf() {
        let start = mrl::find_span(question, &node.text, *cursor).ok_or_else(|| {
            TemplateError::SpanNotFound { span: node.text.clone(), from: *cursor }
        })?;
        let end = start + node.text.len();
        for (i, slot) in token_tags.iter_mut().enumerate().take(end).skip(start) {
            if slot.is_some() {
                return Err(TemplateError::OverlappingSpans { at: i });
            }
            *slot = Some(*next_id);
        }
        node.text = vec![placeholder_symbol(*next_id)];
        *next_id += 1;
        *cursor = end;
        return Ok(());
    }
    for child in &mut node.children {
        assign_ids(child, question, token_tags, cursor, next_id)?;
    }
    Ok(())
}

/// Replaces each placeholder leaf with its substituted token list.
pub fn restore_template(
    template: &PlaceholderTemplate,
    substitution: &BTreeMap<usize, Vec<String>>,
) -> Result<MrlTree, TemplateError> {
    for id in 0..template.k {
        match substitution.get(&id) {
            None => return Err(TemplateError::MissingSubstitution(id)),
            Some(tokens) if tokens.is_empty() => {
                return Err(TemplateError::EmptySubstitution(id))
            }
            Some(_) => {}
        }
    }
    let mut tree = template.skeleton.clone();
    substitute(&mut tree.root, substitution);
    Ok(tree)
}

fn substitute(node: &mut MrlNode, substitution: &BTreeMap<usize, Vec<String>>) {
    if node.is_leaf() {
        if let Some(id) = parse_placeholder_symbol(&node.text[0]) {
            if let Some(tokens) = substitution.get(&id) {
                node.text = tokens.clone();
            }
        }
        return;
    }
    for child in &mut node.children {
        substitute(child, substitution);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Provenance;
    use crate::mrl::{parse_mrl, serialize_mrl};
    use std::collections::BTreeMap;

    pub(crate) fn example(question: &str, mrl: &str) -> Example {
        Example {
            id: "t-1".into(),
            lang: "en".into(),
            question_tokens: question.split_whitespace().map(String::from).collect(),
            mrl: parse_mrl(mrl).unwrap(),
            provenance: Provenance::Human,
            meta: BTreeMap::new(),
        }
    }

    fn event_example() -> Example {
        example(
            "Any festivals this weekend",
            "[IN:GET_EVENT [SL:CATEGORY_EVENT festivals ] [SL:DATE_TIME this weekend ] ]",
        )
    }

    #[test]
    fn template_matches_event_fixture() {
        let t = make_template(&event_example()).unwrap();
        assert_eq!(t.k, 2);
        assert_eq!(t.token_tags, vec![None, Some(0), Some(1), Some(1)]);
        assert_eq!(t.render_tagged(), "Any festivals|x0 this|x1 weekend|x1");
        assert_eq!(
            serialize_mrl(&t.skeleton),
            "[IN:GET_EVENT [SL:CATEGORY_EVENT x0 ] [SL:DATE_TIME x1 ] ]"
        );
    }

    #[test]
    fn whole_question_slot_tags_every_token() {
        let e = example("this weekend", "[IN:GET_EVENT [SL:DATE_TIME this weekend ] ]");
        let t = make_template(&e).unwrap();
        assert_eq!(t.token_tags, vec![Some(0), Some(0)]);
    }

    #[test]
    fn span_not_found_is_an_error() {
        let e = example("this weekend", "[IN:GET_EVENT [SL:DATE_TIME tomorrow ] ]");
        assert!(matches!(
            make_template(&e),
            Err(TemplateError::SpanNotFound { .. })
        ));
    }

    #[test]
    fn duplicate_text_resolves_left_to_right() {
        let e = example(
            "play this and this",
            "[IN:PLAY [SL:A this ] [SL:B this ] ]",
        );
        let t = make_template(&e).unwrap();
        assert_eq!(t.token_tags, vec![None, Some(0), None, Some(1)]);
    }

    #[test]
    fn restore_with_translated_spans() {
        let t = make_template(&event_example()).unwrap();
        let mut sub = BTreeMap::new();
        sub.insert(0, vec!["festival".to_string()]);
        sub.insert(
            1,
            vec!["questo".to_string(), "fine".to_string(), "settimana".to_string()],
        );
        let tree = restore_template(&t, &sub).unwrap();
        assert_eq!(
            serialize_mrl(&tree),
            "[IN:GET_EVENT [SL:CATEGORY_EVENT festival ] [SL:DATE_TIME questo fine settimana ] ]"
        );
    }

    #[test]
    fn restore_roundtrips_original_spans() {
        let e = event_example();
        let t = make_template(&e).unwrap();
        let restored = restore_template(&t, &t.original_spans()).unwrap();
        assert_eq!(restored, e.mrl);
    }

    #[test]
    fn missing_and_empty_substitutions_are_errors() {
        let t = make_template(&event_example()).unwrap();
        let mut sub = BTreeMap::new();
        sub.insert(0, vec!["festival".to_string()]);
        assert_eq!(
            restore_template(&t, &sub),
            Err(TemplateError::MissingSubstitution(1))
        );
        sub.insert(1, Vec::new());
        assert_eq!(
            restore_template(&t, &sub),
            Err(TemplateError::EmptySubstitution(1))
        );
    }

    #[test]
    fn tags_and_skeleton_stay_consistent() {
        use rand::rngs::StdRng;
        use rand::{Rng, SeedableRng};
        // Random adapted examples whose leaves are injected into a carrier
        // question in order.
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..50 {
            let slots = rng.gen_range(1..=4usize);
            let mut question = vec!["q".to_string()];
            let mut mrl = String::from("[IN:ROOT");
            for s in 0..slots {
                let span_len = rng.gen_range(1..=2usize);
                let span: Vec<String> =
                    (0..span_len).map(|j| format!("w{s}_{j}")).collect();
                question.extend(span.clone());
                question.push(format!("gap{s}"));
                mrl.push_str(&format!(" [SL:S{s} {} ]", span.join(" ")));
            }
            mrl.push_str(" ]");
            let e = example(&question.join(" "), &mrl);
            let t = make_template(&e).unwrap();
            // Each id tags a non-empty run; ids are dense and appear once
            // per skeleton leaf.
            let mut by_id: BTreeMap<usize, usize> = BTreeMap::new();
            for tag in t.token_tags.iter().flatten() {
                *by_id.entry(*tag).or_default() += 1;
            }
            assert_eq!(by_id.len(), t.k);
            let leaves = t.skeleton.leaf_spans();
            assert_eq!(leaves.len(), t.k);
            for (i, leaf) in leaves.iter().enumerate() {
                assert_eq!(leaf[0], placeholder_symbol(i));
            }
            let restored = restore_template(&t, &t.original_spans()).unwrap();
            assert_eq!(restored, e.mrl);
        }
    }
}
