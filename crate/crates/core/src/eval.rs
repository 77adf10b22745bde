//! Metrics and evaluation harness: exact match, filtered match, corpus
//! BLEU, and per-language / per-intent breakdowns.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bpe::is_reserved_token;
use crate::dataset::{self, Corpus};
use crate::nn::{DecodeOptions, ParserModel};
use crate::translate::{CachedTranslator, TranslateError, TranslationRequest};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prediction and gold id sets differ: {0}")]
    IdMismatch(String),
    #[error("candidate and reference lists have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Translate(#[from] TranslateError),
}

/// Tokens removed from leaf-text positions before filtered comparison,
/// e.g. Italian articles or Japanese particles.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterList {
    pub lang: String,
    pub tokens: BTreeSet<String>,
}

impl FilterList {
    pub fn new(lang: &str, tokens: impl IntoIterator<Item = impl AsRef<str>>) -> Self {
        FilterList {
            lang: lang.to_string(),
            tokens: tokens.into_iter().map(|t| t.as_ref().to_lowercase()).collect(),
        }
    }

    /// Shipped default: Italian articles (including elided forms).
    pub fn italian_default() -> Self {
        FilterList::new(
            "it",
            [
                "il", "lo", "la", "i", "gli", "le", "un", "uno", "una", "l'", "un'", "d'",
                "dell'", "della", "del", "dei", "degli", "delle",
            ],
        )
    }

    /// Shipped default: Japanese postpositions and grammatical particles.
    pub fn japanese_default() -> Self {
        FilterList::new(
            "ja",
            ["は", "が", "を", "に", "の", "で", "と", "へ", "も", "や", "から", "まで"],
        )
    }

    pub fn shipped_default(lang: &str) -> Option<Self> {
        match lang {
            "it" => Some(Self::italian_default()),
            "ja" => Some(Self::japanese_default()),
            _ => None,
        }
    }

    /// One token per line; `#` comments and blank lines ignored.
    pub fn from_file(lang: &str, path: &Path) -> Result<Self, EvalError> {
        let file = File::open(path)
            .map_err(|e| EvalError::Io { path: path.display().to_string(), source: e })?;
        let mut tokens = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line
                .map_err(|e| EvalError::Io { path: path.display().to_string(), source: e })?;
            let t = line.trim();
            if !t.is_empty() && !t.starts_with('#') {
                tokens.push(t.to_string());
            }
        }
        Ok(FilterList::new(lang, tokens))
    }

    pub fn contains(&self, token: &str) -> bool {
        self.tokens.contains(&token.to_lowercase())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IntentAccuracy {
    pub correct: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mismatch {
    pub id: String,
    pub gold: String,
    pub prediction: String,
}

/// Extra context recorded by [`run_harness`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HarnessInfo {
    pub mode: String,
    pub test_langs: BTreeSet<String>,
    pub train_langs: BTreeSet<String>,
    /// True when no test language was seen in training.
    pub zero_shot: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub exact_match_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub filtered_accuracy: Option<f64>,
    pub per_intent: BTreeMap<String, IntentAccuracy>,
    pub mismatches: Vec<Mismatch>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub harness: Option<HarnessInfo>,
}

fn canonical_tokens(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

fn root_intent(gold: &str) -> String {
    gold.split_whitespace()
        .next()
        .and_then(|tok| tok.strip_prefix('['))
        .map(String::from)
        .unwrap_or_else(|| "<invalid>".to_string())
}

fn check_ids(
    predictions: &BTreeMap<String, String>,
    golds: &BTreeMap<String, String>,
) -> Result<(), EvalError> {
    if predictions.len() != golds.len()
        || !predictions.keys().all(|k| golds.contains_key(k))
    {
        let missing: Vec<&String> =
            golds.keys().filter(|k| !predictions.contains_key(*k)).take(3).collect();
        let extra: Vec<&String> =
            predictions.keys().filter(|k| !golds.contains_key(*k)).take(3).collect();
        return Err(EvalError::IdMismatch(format!(
            "missing from predictions: {missing:?}; unexpected: {extra:?}"
        )));
    }
    Ok(())
}

fn score(
    predictions: &BTreeMap<String, String>,
    golds: &BTreeMap<String, String>,
    transform: impl Fn(&str) -> Vec<String>,
) -> (usize, BTreeMap<String, IntentAccuracy>, Vec<Mismatch>) {
    let mut matches = 0;
    let mut per_intent: BTreeMap<String, IntentAccuracy> = BTreeMap::new();
    let mut mismatches = Vec::new();
    for (id, gold) in golds {
        let prediction = &predictions[id];
        let hit = transform(gold) == transform(prediction);
        let entry = per_intent.entry(root_intent(gold)).or_default();
        entry.total += 1;
        if hit {
            matches += 1;
            entry.correct += 1;
        } else {
            mismatches.push(Mismatch {
                id: id.clone(),
                gold: gold.clone(),
                prediction: prediction.clone(),
            });
        }
    }
    (matches, per_intent, mismatches)
}

/// Exact match over canonical token sequences.
pub fn exact_match(
    predictions: &BTreeMap<String, String>,
    golds: &BTreeMap<String, String>,
) -> Result<EvalReport, EvalError> {
    check_ids(predictions, golds)?;
    let (matches, per_intent, mismatches) = score(predictions, golds, canonical_tokens);
    let n = golds.len();
    Ok(EvalReport {
        n,
        exact_match_accuracy: if n == 0 { 1.0 } else { matches as f64 / n as f64 },
        filtered_accuracy: None,
        per_intent,
        mismatches,
        harness: None,
    })
}

/// Drops filter-list tokens from leaf-text positions of a canonical MRL
/// token sequence. Structural tokens are never touched. Filter entries
/// ending in an apostrophe also strip as prefixes, so `d'artificio`
/// reduces to `artificio` whether or not the elision was tokenized apart.
pub fn apply_filter(tokens: &[String], filter: &FilterList) -> Vec<String> {
    let mut out = Vec::with_capacity(tokens.len());
    for token in tokens {
        if is_reserved_token(token) {
            out.push(token.clone());
            continue;
        }
        if filter.contains(token) {
            continue;
        }
        let lower = token.to_lowercase();
        let prefix = filter
            .tokens
            .iter()
            .filter(|e| e.ends_with('\'') && lower.starts_with(e.as_str()) && lower.len() > e.len())
            .max_by_key(|e| e.len());
        match prefix {
            Some(p) => {
                let rest = token[p.len()..].to_string();
                if !filter.contains(&rest) {
                    out.push(rest);
                }
            }
            None => out.push(token.clone()),
        }
    }
    out
}

/// Exact match after removing filter tokens from both sides.
pub fn filtered_match(
    predictions: &BTreeMap<String, String>,
    golds: &BTreeMap<String, String>,
    filter: &FilterList,
) -> Result<EvalReport, EvalError> {
    check_ids(predictions, golds)?;
    let transform = |s: &str| apply_filter(&canonical_tokens(s), filter);
    let (matches, per_intent, mismatches) = score(predictions, golds, transform);
    let n = golds.len();
    let accuracy = if n == 0 { 1.0 } else { matches as f64 / n as f64 };
    Ok(EvalReport {
        n,
        exact_match_accuracy: accuracy,
        filtered_accuracy: Some(accuracy),
        per_intent,
        mismatches,
        harness: None,
    })
}

/// Corpus-level BLEU in [0, 100]: geometric mean of clipped n-gram
/// precisions (n = 1..max_n) times the brevity penalty `exp(1 − r/c)`.
///
/// Smoothing: when any raw precision is zero, every precision for n ≥ 2
/// gets add-1 on both numerator and denominator.
pub fn corpus_bleu(
    candidates: &[Vec<String>],
    references: &[Vec<String>],
    max_n: usize,
) -> Result<f64, EvalError> {
    if candidates.len() != references.len() {
        return Err(EvalError::LengthMismatch(candidates.len(), references.len()));
    }
    let max_n = max_n.max(1);
    let mut matched = vec![0u64; max_n];
    let mut total = vec![0u64; max_n];
    let mut cand_len = 0u64;
    let mut ref_len = 0u64;

    for (cand, reference) in candidates.iter().zip(references) {
        cand_len += cand.len() as u64;
        ref_len += reference.len() as u64;
        for n in 1..=max_n {
            if cand.len() < n {
                continue;
            }
            let mut cand_counts: HashMap<&[String], u64> = HashMap::new();
            for gram in cand.windows(n) {
                *cand_counts.entry(gram).or_insert(0) += 1;
            }
            let mut ref_counts: HashMap<&[String], u64> = HashMap::new();
            for gram in reference.windows(n) {
                *ref_counts.entry(gram).or_insert(0) += 1;
            }
            total[n - 1] += cand.len() as u64 + 1 - n as u64;
            for (gram, count) in cand_counts {
                matched[n - 1] += count.min(ref_counts.get(gram).copied().unwrap_or(0));
            }
        }
    }

    if cand_len == 0 {
        return Ok(0.0);
    }
    let smoothe = (0..max_n).any(|k| matched[k] == 0);
    let mut log_precision_sum = 0.0;
    for n in 1..=max_n {
        let (mut m, mut t) = (matched[n - 1] as f64, total[n - 1] as f64);
        if smoothe && n >= 2 {
            m += 1.0;
            t += 1.0;
        }
        if m == 0.0 || t == 0.0 {
            return Ok(0.0);
        }
        log_precision_sum += (m / t).ln();
    }
    let brevity_penalty = (1.0 - ref_len as f64 / cand_len as f64).exp();
    Ok(100.0 * brevity_penalty * (log_precision_sum / max_n as f64).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HarnessMode {
    Standard,
    ZeroShot,
    TranslateTest,
}

impl HarnessMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            HarnessMode::Standard => "standard",
            HarnessMode::ZeroShot => "zero_shot",
            HarnessMode::TranslateTest => "translate_test",
        }
    }
}

impl std::str::FromStr for HarnessMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "standard" => Ok(HarnessMode::Standard),
            "zero-shot" | "zero_shot" => Ok(HarnessMode::ZeroShot),
            "translate-test" | "translate_test" => Ok(HarnessMode::TranslateTest),
            other => Err(format!("unknown mode {other:?}")),
        }
    }
}

#[derive(Default)]
pub struct HarnessOptions<'a> {
    /// Applied for filtered accuracy; falls back to the shipped default for
    /// the test language when `None`.
    pub filter: Option<FilterList>,
    /// Translate-test mode: backend used to bring questions into the
    /// model's training language.
    pub translator: Option<&'a CachedTranslator>,
    /// Translate-test mode: gold MRLs in the training language, keyed by
    /// the same ids as the test corpus. Defaults to the test corpus's own
    /// annotations.
    pub gold: Option<&'a Corpus>,
    pub beam_size: Option<usize>,
}

/// Decodes every test question and scores the predictions.
///
/// * `Standard` — decode and compare against the corpus's own gold MRLs.
/// * `ZeroShot` — identical mechanics; the report records that the test
///   language was absent from training.
/// * `TranslateTest` — questions are machine-translated into the model's
///   (primary) training language first, and scoring is against
///   training-language golds when provided.
pub fn run_harness(
    model: &ParserModel,
    test: &Corpus,
    mode: HarnessMode,
    options: &HarnessOptions,
) -> Result<EvalReport, EvalError> {
    let beam = options.beam_size.unwrap_or(model.config.beam_size);

    let inputs: Vec<Vec<String>> = match mode {
        HarnessMode::Standard | HarnessMode::ZeroShot => {
            test.examples.iter().map(|e| e.question_tokens.clone()).collect()
        }
        HarnessMode::TranslateTest => {
            let translator = options.translator.ok_or_else(|| {
                TranslateError::InvalidRequest(
                    "translate-test mode needs a translation backend".into(),
                )
            })?;
            let train_lang = model
                .train_langs
                .iter()
                .next()
                .cloned()
                .unwrap_or_else(|| "en".to_string());
            let source_lang = test
                .examples
                .first()
                .map(|e| e.lang.clone())
                .unwrap_or_else(|| "xx".to_string());
            let request = TranslationRequest::new(
                test.examples.iter().map(|e| e.question()).collect(),
                &source_lang,
                &train_lang,
            );
            translator
                .translate_batch(&request)?
                .into_iter()
                .map(|t| dataset::tokenize_question(&t, &train_lang))
                .collect()
        }
    };

    let predictions: BTreeMap<String, String> = test
        .examples
        .par_iter()
        .zip(inputs.par_iter())
        .map(|(example, question)| {
            let decoded =
                model.decode_beam(question, &DecodeOptions { beam_size: beam, ..Default::default() });
            (example.id.clone(), decoded.mrl)
        })
        .collect();

    let gold_source = match (mode, options.gold) {
        (HarnessMode::TranslateTest, Some(gold)) => gold,
        _ => test,
    };
    let golds: BTreeMap<String, String> = gold_source
        .examples
        .iter()
        .map(|e| (e.id.clone(), e.mrl_string()))
        .collect();

    let mut report = exact_match(&predictions, &golds)?;
    let test_lang = test.examples.first().map(|e| e.lang.clone());
    let filter = options
        .filter
        .clone()
        .or_else(|| test_lang.as_deref().and_then(FilterList::shipped_default));
    if let Some(filter) = filter {
        report.filtered_accuracy =
            Some(filtered_match(&predictions, &golds, &filter)?.exact_match_accuracy);
    }
    let test_langs = test.langs();
    report.harness = Some(HarnessInfo {
        mode: mode.as_str().to_string(),
        zero_shot: test_langs.iter().all(|l| !model.train_langs.contains(l)),
        test_langs,
        train_langs: model.train_langs.clone(),
    });
    Ok(report)
}

/// Human-readable rendering used by the `report` subcommand.
pub fn render_report(report: &EvalReport) -> String {
    let mut out = String::new();
    if let Some(h) = &report.harness {
        out.push_str(&format!(
            "mode: {} (train langs {:?}, test langs {:?}{})\n",
            h.mode,
            h.train_langs,
            h.test_langs,
            if h.zero_shot { ", zero-shot" } else { "" }
        ));
    }
    out.push_str(&format!("examples:        {}\n", report.n));
    out.push_str(&format!(
        "exact match:     {:.4}\n",
        report.exact_match_accuracy
    ));
    if let Some(f) = report.filtered_accuracy {
        out.push_str(&format!("filtered match:  {f:.4}\n"));
    }
    if !report.per_intent.is_empty() {
        out.push_str("per-intent accuracy:\n");
        for (intent, acc) in &report.per_intent {
            out.push_str(&format!(
                "  {:<30} {:>5}/{:<5} {:.4}\n",
                intent,
                acc.correct,
                acc.total,
                if acc.total == 0 { 0.0 } else { acc.correct as f64 / acc.total as f64 }
            ));
        }
    }
    out.push_str(&format!("mismatches:      {}\n", report.mismatches.len()));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(entries: &[(&str, &str)]) -> BTreeMap<String, String> {
        entries.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    const GOLD_IT: &str = "[IN:GET_EVENT [SL:CATEGORY_EVENT i fuochi d'artificio ] [SL:DATE_TIME questa sera ] ]";
    const PRED_IT: &str = "[IN:GET_EVENT [SL:CATEGORY_EVENT fuochi artificio ] [SL:DATE_TIME questa sera ] ]";

    #[test]
    fn identical_predictions_score_one() {
        let golds = map(&[("a", "[IN:X ]"), ("b", "[IN:Y [SL:A x ] ]")]);
        let report = exact_match(&golds, &golds).unwrap();
        assert_eq!(report.exact_match_accuracy, 1.0);
        assert!(report.mismatches.is_empty());
    }

    #[test]
    fn missing_article_is_an_exact_mismatch() {
        let golds = map(&[("1", GOLD_IT)]);
        let preds = map(&[("1", PRED_IT)]);
        let report = exact_match(&preds, &golds).unwrap();
        assert_eq!(report.exact_match_accuracy, 0.0);
        assert_eq!(report.mismatches.len(), 1);
    }

    #[test]
    fn missing_article_matches_under_italian_filter() {
        let golds = map(&[("1", GOLD_IT)]);
        let preds = map(&[("1", PRED_IT)]);
        let report = filtered_match(&preds, &golds, &FilterList::italian_default()).unwrap();
        assert_eq!(report.exact_match_accuracy, 1.0, "{:?}", report.mismatches);
    }

    #[test]
    fn half_right_scores_half() {
        let golds = map(&[("1", "[IN:X ]"), ("2", "[IN:Y ]")]);
        let preds = map(&[("1", "[IN:X ]"), ("2", "[IN:Z ]")]);
        let report = exact_match(&preds, &golds).unwrap();
        assert_eq!(report.exact_match_accuracy, 0.5);
    }

    #[test]
    fn id_mismatch_is_an_error() {
        let golds = map(&[("1", "[IN:X ]")]);
        let preds = map(&[("2", "[IN:X ]")]);
        assert!(matches!(exact_match(&preds, &golds), Err(EvalError::IdMismatch(_))));
    }

    #[test]
    fn empty_filter_equals_exact_match() {
        let golds = map(&[("1", GOLD_IT), ("2", "[IN:X [SL:A la casa ] ]")]);
        let preds = map(&[("1", PRED_IT), ("2", "[IN:X [SL:A casa ] ]")]);
        let empty = FilterList::new("xx", Vec::<String>::new());
        let exact = exact_match(&preds, &golds).unwrap();
        let filtered = filtered_match(&preds, &golds, &empty).unwrap();
        assert_eq!(filtered.exact_match_accuracy, exact.exact_match_accuracy);
    }

    #[test]
    fn filtering_is_monotone() {
        let golds = map(&[
            ("1", GOLD_IT),
            ("2", "[IN:X [SL:A la casa ] ]"),
            ("3", "[IN:X [SL:A verde ] ]"),
            ("4", "[IN:Y ]"),
        ]);
        let preds = map(&[
            ("1", PRED_IT),
            ("2", "[IN:X [SL:A casa ] ]"),
            ("3", "[IN:X [SL:A rossa ] ]"),
            ("4", "[IN:X ]"),
        ]);
        for filter in [
            FilterList::italian_default(),
            FilterList::japanese_default(),
            FilterList::new("xx", ["casa", "verde"]),
        ] {
            let exact = exact_match(&preds, &golds).unwrap().exact_match_accuracy;
            let filtered =
                filtered_match(&preds, &golds, &filter).unwrap().exact_match_accuracy;
            assert!(filtered >= exact, "filter {:?}", filter.lang);
        }
    }

    #[test]
    fn filter_never_touches_structural_tokens() {
        // A filter list containing a bracket-like token must not delete
        // structure.
        let filter = FilterList::new("xx", ["]", "la"]);
        let tokens: Vec<String> =
            "[IN:X [SL:A la casa ] ]".split_whitespace().map(String::from).collect();
        let filtered = apply_filter(&tokens, &filter);
        assert_eq!(filtered.join(" "), "[IN:X [SL:A casa ] ]");
    }

    #[test]
    fn bleu_identity_is_100() {
        let corpus: Vec<Vec<String>> = vec![
            canonical_tokens("the cat sat on the mat"),
            canonical_tokens("questo fine settimana"),
        ];
        let bleu = corpus_bleu(&corpus, &corpus, 4).unwrap();
        assert!((bleu - 100.0).abs() < 1e-9, "bleu = {bleu}");
    }

    #[test]
    fn bleu_clipping_hand_case() {
        // candidate "the the the" vs reference "the cat":
        //   p1 clipped = 1/3; p2 = (0+1)/(2+1); p3 = (0+1)/(1+1);
        //   p4 = (0+1)/(0+1); BP = exp(1 - 2/3).
        let candidates = vec![canonical_tokens("the the the")];
        let references = vec![canonical_tokens("the cat")];
        let bleu = corpus_bleu(&candidates, &references, 4).unwrap();
        let log_precisions =
            (1.0f64 / 3.0).ln() + (1.0f64 / 3.0).ln() + (1.0f64 / 2.0).ln() + 1.0f64.ln();
        let expected = 100.0 * (1.0f64 - 2.0 / 3.0).exp() * (log_precisions / 4.0).exp();
        assert!((bleu - expected).abs() < 1e-6, "bleu = {bleu}, expected = {expected}");
    }

    #[test]
    fn bleu_handles_empty_candidate_sentences() {
        let candidates = vec![Vec::new(), canonical_tokens("the cat")];
        let references =
            vec![canonical_tokens("something"), canonical_tokens("the cat")];
        let bleu = corpus_bleu(&candidates, &references, 4).unwrap();
        assert!(bleu.is_finite());
        assert!(bleu >= 0.0);
    }

    #[test]
    fn bleu_length_mismatch_is_an_error() {
        let err = corpus_bleu(&[vec![]], &[], 4).unwrap_err();
        assert!(matches!(err, EvalError::LengthMismatch(1, 0)));
    }

    #[test]
    fn filter_list_normalizes_and_dedups() {
        let filter = FilterList::new("it", ["La", "la", "IL"]);
        assert_eq!(filter.tokens.len(), 2);
        assert!(filter.contains("La"));
        assert!(filter.contains("il"));
    }
}
