//! The bootstrap pipeline: template → translate → align → restore.
//!
//! Every per-example problem becomes a counted [`FailureReason`] rather
//! than an error, so a bulk run always completes and reports its yield.
//! Only a fatal backend failure aborts (with the translation cache
//! retained).

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aligner::{self, Alignment, AlignerConfig};
use crate::dataset::{self, Corpus, Example, Provenance};
use crate::placeholder::{self, PlaceholderTemplate};
use crate::translate::{CachedTranslator, TranslateError, TranslationRequest};

#[derive(Debug, Error)]
pub enum ProjectionError {
    #[error(transparent)]
    Translate(#[from] TranslateError),
    #[error(transparent)]
    Align(#[from] aligner::AlignError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FailureReason {
    /// Template construction failed: a leaf span was not found in the
    /// question (or spans overlapped).
    SpanNotFound,
    TranslationFailed,
    /// A placeholder had no aligned target token.
    UnalignedPlaceholder,
    /// Two placeholder hulls intersect in the translation.
    OverlappingProjection,
    RestoreError,
}

impl FailureReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            FailureReason::SpanNotFound => "span_not_found",
            FailureReason::TranslationFailed => "translation_failed",
            FailureReason::UnalignedPlaceholder => "unaligned_placeholder",
            FailureReason::OverlappingProjection => "overlapping_projection",
            FailureReason::RestoreError => "restore_error",
        }
    }
}

/// One example either projects to a target-language example or fails with a
/// reason.
#[derive(Debug, Clone)]
pub enum ProjectionOutcome {
    Projected(Box<Example>),
    Failed { source_id: String, reason: FailureReason },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProjectionReport {
    pub attempted: usize,
    pub succeeded: usize,
    pub failures: BTreeMap<String, usize>,
    pub yield_fraction: f64,
}

impl ProjectionReport {
    fn from_outcomes(outcomes: &[ProjectionOutcome]) -> Self {
        let mut report = ProjectionReport { attempted: outcomes.len(), ..Default::default() };
        for outcome in outcomes {
            match outcome {
                ProjectionOutcome::Projected(_) => report.succeeded += 1,
                ProjectionOutcome::Failed { reason, .. } => {
                    *report.failures.entry(reason.as_str().to_string()).or_insert(0) += 1;
                }
            }
        }
        report.yield_fraction = if report.attempted == 0 {
            0.0
        } else {
            report.succeeded as f64 / report.attempted as f64
        };
        report
    }
}

/// Projects one example through its translation and alignment.
///
/// For each placeholder id, the target span is the convex hull of all
/// target indices aligned to any source token tagged with that id. Success
/// requires every id to receive at least one aligned token and all hulls to
/// be pairwise disjoint; the hull policy keeps projected leaves contiguous
/// even when the alignment is not.
pub fn project_example(
    source: &Example,
    target_lang: &str,
    template: &PlaceholderTemplate,
    translation_tokens: &[String],
    alignment: &Alignment,
) -> ProjectionOutcome {
    let fail = |reason| ProjectionOutcome::Failed { source_id: source.id.clone(), reason };

    let mut hulls: Vec<(usize, usize, usize)> = Vec::with_capacity(template.k); // (id, lo, hi)
    for id in 0..template.k {
        let sources = template.positions_of(id);
        let targets = alignment.targets_of_sources(&sources);
        let (Some(&lo), Some(&hi)) = (targets.first(), targets.last()) else {
            return fail(FailureReason::UnalignedPlaceholder);
        };
        if hi >= translation_tokens.len() {
            return fail(FailureReason::RestoreError);
        }
        hulls.push((id, lo, hi));
    }

    let mut by_start = hulls.clone();
    by_start.sort_by_key(|&(_, lo, _)| lo);
    for w in by_start.windows(2) {
        if w[1].1 <= w[0].2 {
            return fail(FailureReason::OverlappingProjection);
        }
    }

    let substitution: BTreeMap<usize, Vec<String>> = hulls
        .into_iter()
        .map(|(id, lo, hi)| (id, translation_tokens[lo..=hi].to_vec()))
        .collect();
    let mrl = match placeholder::restore_template(template, &substitution) {
        Ok(tree) => tree,
        Err(_) => return fail(FailureReason::RestoreError),
    };

    let mut meta = source.meta.clone();
    meta.insert("source_id".to_string(), source.id.clone());
    meta.insert("source_lang".to_string(), source.lang.clone());
    ProjectionOutcome::Projected(Box::new(Example {
        id: format!("{}-{}", source.id, target_lang),
        lang: target_lang.to_string(),
        question_tokens: translation_tokens.to_vec(),
        mrl,
        provenance: Provenance::MachineTranslated,
        meta,
    }))
}

/// Runs the full bootstrap over a corpus: build templates, translate every
/// question, train the aligner on the run's own question/translation pairs,
/// then align and project each example.
pub fn bootstrap_corpus(
    source: &Corpus,
    translator: &CachedTranslator,
    aligner_config: &AlignerConfig,
    target_lang: &str,
) -> Result<(Corpus, ProjectionReport), ProjectionError> {
    enum Stage {
        Ready { template: PlaceholderTemplate, translation: Vec<String> },
        Failed(FailureReason),
    }

    let templates: Vec<Result<PlaceholderTemplate, FailureReason>> = source
        .examples
        .iter()
        .map(|e| placeholder::make_template(e).map_err(|_| FailureReason::SpanNotFound))
        .collect();

    let questions: Vec<String> = source.examples.iter().map(|e| e.question()).collect();
    let source_lang = source
        .examples
        .first()
        .map(|e| e.lang.clone())
        .unwrap_or_else(|| "en".to_string());
    let request = TranslationRequest::new(questions, &source_lang, target_lang);
    let translations = translator.translate_each(&request)?;

    let stages: Vec<Stage> = templates
        .into_iter()
        .zip(translations)
        .map(|(template, translation)| match (template, translation) {
            (Err(reason), _) => Stage::Failed(reason),
            (_, Err(_)) => Stage::Failed(FailureReason::TranslationFailed),
            (Ok(template), Ok(translation)) => {
                let tokens = dataset::tokenize_question(&translation, target_lang);
                if tokens.is_empty() {
                    Stage::Failed(FailureReason::TranslationFailed)
                } else {
                    Stage::Ready { template, translation: tokens }
                }
            }
        })
        .collect();

    let training_pairs: Vec<(Vec<String>, Vec<String>)> = source
        .examples
        .iter()
        .zip(&stages)
        .filter_map(|(e, stage)| match stage {
            Stage::Ready { translation, .. } => {
                Some((e.question_tokens.clone(), translation.clone()))
            }
            Stage::Failed(_) => None,
        })
        .collect();
    let model = aligner::train_aligner(&training_pairs, aligner_config)?;

    let outcomes: Vec<ProjectionOutcome> = source
        .examples
        .par_iter()
        .zip(stages.par_iter())
        .map(|(example, stage)| match stage {
            Stage::Failed(reason) => ProjectionOutcome::Failed {
                source_id: example.id.clone(),
                reason: *reason,
            },
            Stage::Ready { template, translation } => {
                match model.viterbi_align(&example.question_tokens, translation) {
                    Ok(alignment) => {
                        project_example(example, target_lang, template, translation, &alignment)
                    }
                    Err(_) => ProjectionOutcome::Failed {
                        source_id: example.id.clone(),
                        reason: FailureReason::TranslationFailed,
                    },
                }
            }
        })
        .collect();

    let report = ProjectionReport::from_outcomes(&outcomes);
    let mut corpus = Corpus::new(source.split);
    corpus.examples = outcomes
        .into_iter()
        .filter_map(|o| match o {
            ProjectionOutcome::Projected(e) => Some(*e),
            ProjectionOutcome::Failed { .. } => None,
        })
        .collect();
    Ok((corpus, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Split;
    use crate::mrl::{parse_mrl, serialize_mrl};
    use crate::placeholder::make_template;
    use crate::translate::{DictBackend, IdentityBackend};
    use std::collections::BTreeMap;

    fn event_example() -> Example {
        Example {
            id: "train-1".into(),
            lang: "en".into(),
            question_tokens: ["Any", "festivals", "this", "weekend"]
                .map(String::from)
                .to_vec(),
            mrl: parse_mrl(
                "[IN:GET_EVENT [SL:CATEGORY_EVENT festivals ] [SL:DATE_TIME this weekend ] ]",
            )
            .unwrap(),
            provenance: Provenance::Human,
            meta: BTreeMap::new(),
        }
    }

    fn italian_tokens() -> Vec<String> {
        ["Tutti", "i", "festival", "questo", "fine", "settimana"]
            .map(String::from)
            .to_vec()
    }

    #[test]
    fn projects_the_walkthrough_fixture() {
        let source = event_example();
        let template = make_template(&source).unwrap();
        let alignment =
            Alignment { pairs: vec![(0, 0), (1, 2), (2, 3), (3, 4), (3, 5)] };
        match project_example(&source, "it", &template, &italian_tokens(), &alignment) {
            ProjectionOutcome::Projected(e) => {
                assert_eq!(e.lang, "it");
                assert_eq!(e.id, "train-1-it");
                assert_eq!(e.question_tokens, italian_tokens());
                assert_eq!(e.provenance, Provenance::MachineTranslated);
                assert_eq!(
                    serialize_mrl(&e.mrl),
                    "[IN:GET_EVENT [SL:CATEGORY_EVENT festival ] [SL:DATE_TIME questo fine settimana ] ]"
                );
            }
            ProjectionOutcome::Failed { reason, .. } => panic!("failed: {reason:?}"),
        }
    }

    #[test]
    fn empty_alignment_fails_unaligned() {
        let source = event_example();
        let template = make_template(&source).unwrap();
        let outcome = project_example(
            &source,
            "it",
            &template,
            &italian_tokens(),
            &Alignment::default(),
        );
        assert!(matches!(
            outcome,
            ProjectionOutcome::Failed { reason: FailureReason::UnalignedPlaceholder, .. }
        ));
    }

    #[test]
    fn crossing_alignment_fails_overlapping() {
        // x0 covers source token 1, x1 covers source 2..3. Link x0 to
        // targets {1, 3} and x1 to {2}: hull [1..3] swallows [2..2].
        let source = event_example();
        let template = make_template(&source).unwrap();
        let alignment = Alignment { pairs: vec![(1, 1), (1, 3), (2, 2)] };
        let outcome =
            project_example(&source, "it", &template, &italian_tokens(), &alignment);
        assert!(matches!(
            outcome,
            ProjectionOutcome::Failed { reason: FailureReason::OverlappingProjection, .. }
        ));
    }

    #[test]
    fn out_of_bounds_alignment_is_a_restore_error() {
        let source = event_example();
        let template = make_template(&source).unwrap();
        let alignment = Alignment { pairs: vec![(1, 40), (2, 1), (3, 2)] };
        let outcome =
            project_example(&source, "it", &template, &italian_tokens(), &alignment);
        assert!(matches!(
            outcome,
            ProjectionOutcome::Failed { reason: FailureReason::RestoreError, .. }
        ));
    }

    fn small_corpus(n: usize) -> Corpus {
        let mut corpus = Corpus::new(Split::Train);
        for i in 0..n {
            let mut e = event_example();
            e.id = format!("train-{i}");
            corpus.examples.push(e);
        }
        corpus
    }

    #[test]
    fn identity_backend_bootstraps_with_full_yield() {
        let corpus = small_corpus(12);
        let translator =
            CachedTranslator::new(Box::new(IdentityBackend), None).unwrap();
        let (out, report) =
            bootstrap_corpus(&corpus, &translator, &AlignerConfig::default(), "xx").unwrap();
        assert_eq!(report.attempted, 12);
        assert_eq!(report.succeeded, 12);
        assert!((report.yield_fraction - 1.0).abs() < 1e-12);
        for (src, dst) in corpus.examples.iter().zip(&out.examples) {
            assert_eq!(dst.lang, "xx");
            assert_eq!(dst.mrl, src.mrl, "identity projection must preserve the MRL");
            assert_eq!(dst.question_tokens, src.question_tokens);
        }
    }

    #[test]
    fn dict_backend_bootstraps_the_fixture_sentence() {
        let corpus = small_corpus(8);
        let backend = DictBackend::new(
            [
                ("any", "tutti"),
                ("festivals", "festival"),
                ("this", "questo"),
                ("weekend", "fine settimana"),
            ]
            .map(|(k, v)| (k.to_string(), v.to_string())),
        );
        let translator = CachedTranslator::new(Box::new(backend), None).unwrap();
        let (out, report) =
            bootstrap_corpus(&corpus, &translator, &AlignerConfig::default(), "it").unwrap();
        assert_eq!(report.succeeded, 8, "failures: {:?}", report.failures);
        for e in &out.examples {
            let tree = parse_mrl(&e.mrl_string()).unwrap();
            assert_eq!(tree.label_multiset(), corpus.examples[0].mrl.label_multiset());
        }
    }

    #[test]
    fn template_failures_are_counted_not_fatal() {
        let mut corpus = small_corpus(3);
        corpus.examples[1].mrl =
            parse_mrl("[IN:GET_EVENT [SL:DATE_TIME tomorrow ] ]").unwrap();
        let translator =
            CachedTranslator::new(Box::new(IdentityBackend), None).unwrap();
        let (out, report) =
            bootstrap_corpus(&corpus, &translator, &AlignerConfig::default(), "xx").unwrap();
        assert_eq!(report.attempted, 3);
        assert_eq!(report.succeeded, 2);
        assert_eq!(report.failures["span_not_found"], 1);
        assert_eq!(out.len(), 2);
        assert_eq!(
            report.attempted,
            report.succeeded + report.failures.values().sum::<usize>()
        );
    }
}
