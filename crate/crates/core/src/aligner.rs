//! Word alignment: EM training of a reparameterized IBM Model 2 with a
//! diagonal prior, plus Viterbi decoding.
//!
//! The model scores a target sentence `f` of length `m` against a source
//! sentence `e` of length `n` as
//!
//! ```text
//! p(f, a | e) = Π_i  p(a_i | i, m, n) · t(f_i | e_{a_i})
//! ```
//!
//! where, for target position `i` (1..m) and source position `j` (1..n),
//! `p(a_i = 0) = p0` links to NULL and
//! `p(a_i = j) = (1 − p0) · exp(λ·h(i,j,m,n)) / Z` with
//! `h = −| i/m − j/n |` and `Z` normalizing over `j = 1..n`. The tension λ
//! is fixed (not optimized); the NULL word's translation distribution is a
//! uniform floor rather than a learned row.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Translation probability floor for unseen pairs and for NULL links.
pub const T_FLOOR: f64 = 1e-9;

/// Sentence-pair batch size for the parallel E-step. Fixed so that count
/// accumulation order, and therefore every float in the model, is
/// independent of the worker count.
const E_STEP_CHUNK: usize = 512;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AlignError {
    #[error("alignment corpus is empty")]
    EmptyCorpus,
    #[error("sentence pair {index} has an empty side")]
    EmptySentence { index: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignerConfig {
    pub iterations: usize,
    /// Diagonal tension λ > 0.
    pub lambda: f64,
    /// NULL-alignment probability p0 ∈ [0, 1).
    pub p_null: f64,
    /// Add-α smoothing for the M-step count normalization.
    pub smoothing_alpha: f64,
    pub seed: u64,
}

impl Default for AlignerConfig {
    fn default() -> Self {
        AlignerConfig {
            iterations: 5,
            lambda: 4.0,
            p_null: 0.08,
            smoothing_alpha: 0.01,
            seed: 0,
        }
    }
}

/// One-direction alignment of a sentence pair: each target index links to
/// at most one source index; NULL links are omitted.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Alignment {
    /// `(source index j, target index i)` pairs, 0-based, sorted by target.
    pub pairs: Vec<(usize, usize)>,
}

impl Alignment {
    /// Pharaoh text format: space-separated `j-i` pairs.
    pub fn to_pharaoh(&self) -> String {
        self.pairs
            .iter()
            .map(|(j, i)| format!("{j}-{i}"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Target indices aligned to any of the given source positions.
    pub fn targets_of_sources(&self, sources: &[usize]) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .pairs
            .iter()
            .filter(|(j, _)| sources.contains(j))
            .map(|&(_, i)| i)
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

#[derive(Debug, Clone, Default)]
struct Interner {
    items: Vec<String>,
    index: HashMap<String, u32>,
}

impl Interner {
    fn intern(&mut self, s: &str) -> u32 {
        if let Some(&id) = self.index.get(s) {
            return id;
        }
        let id = self.items.len() as u32;
        self.items.push(s.to_string());
        self.index.insert(s.to_string(), id);
        id
    }

    fn get(&self, s: &str) -> Option<u32> {
        self.index.get(s).copied()
    }

    fn name(&self, id: u32) -> &str {
        &self.items[id as usize]
    }

    fn len(&self) -> usize {
        self.items.len()
    }
}

pub struct AlignmentModel {
    pub config: AlignerConfig,
    src_vocab: Interner,
    tgt_vocab: Interner,
    /// Stored translation probabilities for pairs seen in training.
    ttable: HashMap<(u32, u32), f64>,
    /// Per-source-word probability of any in-vocabulary target word that
    /// has no stored entry (the smoothing mass); keyed by source id.
    row_default: HashMap<u32, f64>,
}

impl AlignmentModel {
    /// `t(f | e)`, floored so scores stay finite.
    pub fn t(&self, source_word: &str, target_word: &str) -> f64 {
        let (Some(e), Some(f)) = (self.src_vocab.get(source_word), self.tgt_vocab.get(target_word))
        else {
            return T_FLOOR;
        };
        if let Some(&p) = self.ttable.get(&(e, f)) {
            return p.max(T_FLOOR);
        }
        self.row_default.get(&e).copied().unwrap_or(0.0).max(T_FLOOR)
    }

    /// Row sum over the full target vocabulary, stored entries plus the
    /// smoothing mass on unstored in-vocabulary words.
    pub fn row_sum(&self, source_word: &str) -> Option<f64> {
        let e = self.src_vocab.get(source_word)?;
        let stored: Vec<f64> = (0..self.tgt_vocab.len() as u32)
            .filter_map(|f| self.ttable.get(&(e, f)).copied())
            .collect();
        let stored_count = stored.len();
        let sum: f64 = stored.iter().sum();
        let default = self.row_default.get(&e).copied().unwrap_or(0.0);
        Some(sum + default * (self.tgt_vocab.len() - stored_count) as f64)
    }

    /// Viterbi decoding: each target word links to its argmax source
    /// position (or NULL), ties broken toward the smaller index with NULL
    /// first.
    pub fn viterbi_align(
        &self,
        source: &[String],
        target: &[String],
    ) -> Result<Alignment, AlignError> {
        if source.is_empty() || target.is_empty() {
            return Err(AlignError::EmptySentence { index: 0 });
        }
        let n = source.len();
        let m = target.len();
        let mut pairs = Vec::new();
        for i in 0..m {
            let priors = diagonal_priors(i, m, n, self.config.lambda, self.config.p_null);
            let mut best_j = 0usize; // 0 = NULL
            let mut best_score = priors[0] * T_FLOOR;
            for j in 1..=n {
                let score = priors[j] * self.t(&source[j - 1], &target[i]);
                if score > best_score {
                    best_score = score;
                    best_j = j;
                }
            }
            if best_j >= 1 {
                pairs.push((best_j - 1, i));
            }
        }
        Ok(Alignment { pairs })
    }

    /// Sorted `e f prob` lines for the stored entries.
    pub fn dump_ttable(&self, w: &mut impl Write) -> std::io::Result<()> {
        let mut entries: Vec<(&str, &str, f64)> = self
            .ttable
            .iter()
            .map(|(&(e, f), &p)| (self.src_vocab.name(e), self.tgt_vocab.name(f), p))
            .collect();
        entries.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        for (e, f, p) in entries {
            writeln!(w, "{e} {f} {p:.12e}")?;
        }
        Ok(())
    }

    /// Rebuilds a decodable model from a ttable dump. Smoothing mass is not
    /// part of the dump; unseen pairs fall back to the floor.
    pub fn load_ttable(
        r: &mut impl BufRead,
        config: AlignerConfig,
    ) -> Result<Self, std::io::Error> {
        let mut model = AlignmentModel {
            config,
            src_vocab: Interner::default(),
            tgt_vocab: Interner::default(),
            ttable: HashMap::new(),
            row_default: HashMap::new(),
        };
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(e), Some(f), Some(p)) = (parts.next(), parts.next(), parts.next()) else {
                return Err(std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("bad ttable line {line:?}"),
                ));
            };
            let p: f64 = p.parse().map_err(|_| {
                std::io::Error::new(std::io::ErrorKind::InvalidData, "bad probability")
            })?;
            let e = model.src_vocab.intern(e);
            let f = model.tgt_vocab.intern(f);
            model.ttable.insert((e, f), p);
        }
        Ok(model)
    }
}

/// Prior over `j ∈ {0..n}` (index 0 is NULL) for target position `i` of
/// `m`, 0-based `i`.
fn diagonal_priors(i: usize, m: usize, n: usize, lambda: f64, p_null: f64) -> Vec<f64> {
    let mut priors = Vec::with_capacity(n + 1);
    priors.push(p_null);
    let ti = (i + 1) as f64 / m as f64;
    let weights: Vec<f64> = (1..=n)
        .map(|j| (lambda * -((ti - j as f64 / n as f64).abs())).exp())
        .collect();
    let z: f64 = weights.iter().sum();
    priors.extend(weights.into_iter().map(|w| (1.0 - p_null) * w / z));
    priors
}

type SentencePair = (Vec<u32>, Vec<u32>);

fn intern_corpus(
    corpus: &[(Vec<String>, Vec<String>)],
) -> Result<(Vec<SentencePair>, Interner, Interner), AlignError> {
    if corpus.is_empty() {
        return Err(AlignError::EmptyCorpus);
    }
    let mut src_vocab = Interner::default();
    let mut tgt_vocab = Interner::default();
    let mut pairs = Vec::with_capacity(corpus.len());
    for (index, (src, tgt)) in corpus.iter().enumerate() {
        if src.is_empty() || tgt.is_empty() {
            return Err(AlignError::EmptySentence { index });
        }
        pairs.push((
            src.iter().map(|w| src_vocab.intern(w)).collect(),
            tgt.iter().map(|w| tgt_vocab.intern(w)).collect(),
        ));
    }
    Ok((pairs, src_vocab, tgt_vocab))
}

/// Trains the aligner by EM and returns the final model.
pub fn train_aligner(
    corpus: &[(Vec<String>, Vec<String>)],
    config: &AlignerConfig,
) -> Result<AlignmentModel, AlignError> {
    train_aligner_with_log(corpus, config).map(|(model, _)| model)
}

/// As [`train_aligner`], also returning the corpus log-likelihood of the
/// model before training and after each EM iteration.
pub fn train_aligner_with_log(
    corpus: &[(Vec<String>, Vec<String>)],
    config: &AlignerConfig,
) -> Result<(AlignmentModel, Vec<f64>), AlignError> {
    let (pairs, src_vocab, tgt_vocab) = intern_corpus(corpus)?;

    // Initialization: uniform over target words cooccurring with each
    // source word.
    let mut cooc: HashMap<u32, Vec<u32>> = HashMap::new();
    {
        let mut seen: HashMap<(u32, u32), ()> = HashMap::new();
        for (src, tgt) in &pairs {
            for &e in src {
                for &f in tgt {
                    if seen.insert((e, f), ()).is_none() {
                        cooc.entry(e).or_default().push(f);
                    }
                }
            }
        }
    }
    let mut ttable: HashMap<(u32, u32), f64> = HashMap::new();
    for (&e, fs) in &cooc {
        let p = 1.0 / fs.len() as f64;
        for &f in fs {
            ttable.insert((e, f), p);
        }
    }
    let mut model = AlignmentModel {
        config: config.clone(),
        src_vocab,
        tgt_vocab,
        ttable,
        row_default: HashMap::new(),
    };

    let mut log = vec![loglik_interned(&model, &pairs)];
    for _ in 0..config.iterations {
        let counts = expectation_counts(&model, &pairs);
        maximize(&mut model, &counts);
        log.push(loglik_interned(&model, &pairs));
    }
    Ok((model, log))
}

/// E-step over the whole corpus: expected (e, f) counts under the posterior
/// alignment distribution. NULL links carry no counts.
///
/// Sentences are processed in fixed-size chunks and the per-chunk maps are
/// reduced in corpus order, so the result is bit-identical regardless of
/// how rayon schedules the chunks.
fn expectation_counts(model: &AlignmentModel, pairs: &[SentencePair]) -> Vec<((u32, u32), f64)> {
    let chunk_maps: Vec<Vec<((u32, u32), f64)>> = pairs
        .par_chunks(E_STEP_CHUNK)
        .map(|chunk| {
            let mut local: Vec<((u32, u32), f64)> = Vec::new();
            let mut index: HashMap<(u32, u32), usize> = HashMap::new();
            for (src, tgt) in chunk {
                accumulate_pair(model, src, tgt, &mut local, &mut index);
            }
            local
        })
        .collect();

    let mut merged: Vec<((u32, u32), f64)> = Vec::new();
    let mut index: HashMap<(u32, u32), usize> = HashMap::new();
    for chunk in chunk_maps {
        for (key, value) in chunk {
            match index.get(&key) {
                Some(&at) => merged[at].1 += value,
                None => {
                    index.insert(key, merged.len());
                    merged.push((key, value));
                }
            }
        }
    }
    merged
}

fn accumulate_pair(
    model: &AlignmentModel,
    src: &[u32],
    tgt: &[u32],
    counts: &mut Vec<((u32, u32), f64)>,
    index: &mut HashMap<(u32, u32), usize>,
) {
    let n = src.len();
    let m = tgt.len();
    let mut weights = vec![0.0f64; n + 1];
    for (i, &f) in tgt.iter().enumerate() {
        let priors = diagonal_priors(i, m, n, model.config.lambda, model.config.p_null);
        weights[0] = priors[0] * T_FLOOR;
        for (j, &e) in src.iter().enumerate() {
            let t = model.ttable.get(&(e, f)).copied().unwrap_or_else(|| {
                model.row_default.get(&e).copied().unwrap_or(0.0)
            });
            weights[j + 1] = priors[j + 1] * t.max(T_FLOOR);
        }
        let z: f64 = weights.iter().sum();
        for (j, &e) in src.iter().enumerate() {
            let gamma = weights[j + 1] / z;
            let key = (e, f);
            match index.get(&key) {
                Some(&at) => counts[at].1 += gamma,
                None => {
                    index.insert(key, counts.len());
                    counts.push((key, gamma));
                }
            }
        }
    }
}

/// M-step: `t(f|e) = (c(e,f) + α) / (c(e) + α·|V_f|)`, with the same
/// smoothed mass assigned to every in-vocabulary target word that has no
/// observed count.
fn maximize(model: &mut AlignmentModel, counts: &[((u32, u32), f64)]) {
    let alpha = model.config.smoothing_alpha;
    let v_f = model.tgt_vocab.len() as f64;

    let mut sorted: Vec<((u32, u32), f64)> = counts.to_vec();
    sorted.sort_by_key(|&(key, _)| key);

    let mut row_totals: HashMap<u32, f64> = HashMap::new();
    for &((e, _), c) in &sorted {
        *row_totals.entry(e).or_insert(0.0) += c;
    }

    let mut ttable = HashMap::with_capacity(sorted.len());
    for &((e, f), c) in &sorted {
        let denom = row_totals[&e] + alpha * v_f;
        ttable.insert((e, f), (c + alpha) / denom);
    }
    let mut row_default = HashMap::with_capacity(row_totals.len());
    for (&e, &total) in row_totals.iter() {
        row_default.insert(e, alpha / (total + alpha * v_f));
    }
    model.ttable = ttable;
    model.row_default = row_default;
}

fn loglik_interned(model: &AlignmentModel, pairs: &[SentencePair]) -> f64 {
    let mut total = 0.0;
    for (src, tgt) in pairs {
        let n = src.len();
        let m = tgt.len();
        for (i, &f) in tgt.iter().enumerate() {
            let priors = diagonal_priors(i, m, n, model.config.lambda, model.config.p_null);
            let mut sum = priors[0] * T_FLOOR;
            for (j, &e) in src.iter().enumerate() {
                let t = model.ttable.get(&(e, f)).copied().unwrap_or_else(|| {
                    model.row_default.get(&e).copied().unwrap_or(0.0)
                });
                sum += priors[j + 1] * t.max(T_FLOOR);
            }
            total += sum.ln();
        }
    }
    total
}

/// `Σ_pairs Σ_i log Σ_j p(a_i = j) · t(f_i | e_j)`; finite because `t` is
/// floored.
pub fn corpus_loglik(
    model: &AlignmentModel,
    corpus: &[(Vec<String>, Vec<String>)],
) -> Result<f64, AlignError> {
    if corpus.is_empty() {
        return Err(AlignError::EmptyCorpus);
    }
    let mut total = 0.0;
    for (index, (src, tgt)) in corpus.iter().enumerate() {
        if src.is_empty() || tgt.is_empty() {
            return Err(AlignError::EmptySentence { index });
        }
        let n = src.len();
        let m = tgt.len();
        for (i, f) in tgt.iter().enumerate() {
            let priors = diagonal_priors(i, m, n, model.config.lambda, model.config.p_null);
            let mut sum = priors[0] * T_FLOOR;
            for (j, e) in src.iter().enumerate() {
                sum += priors[j + 1] * model.t(e, f);
            }
            total += sum.ln();
        }
    }
    Ok(total)
}
