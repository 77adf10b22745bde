//! Byte-pair-encoding subword tokenizer.
//!
//! Standard BPE over a word-frequency table: words start as character
//! sequences followed by an end-of-word marker symbol, and the most
//! frequent adjacent symbol pair is merged repeatedly. Ties break toward
//! the lexicographically smallest pair so learning is reproducible.
//!
//! MRL structural tokens (`[IN:*`, `[SL:*`, `]`) are reserved whole
//! symbols: they are never split and never participate in merges, so
//! decoder outputs stay well-bracketed at the symbol level.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use thiserror::Error;

pub const DEFAULT_MARKER: &str = "</w>";
/// Default merge budget for the shared multilingual vocabulary.
pub const DEFAULT_NUM_MERGES: usize = 8000;

#[derive(Debug, Error)]
pub enum BpeError {
    #[error("cannot learn a BPE model from an empty corpus")]
    EmptyCorpus,
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad model file at line {line}: {message}")]
    BadModelFile { line: usize, message: String },
}

/// Structural tokens are atomic in every encoding.
pub fn is_reserved_token(token: &str) -> bool {
    token == "]" || token.starts_with("[IN:") || token.starts_with("[SL:")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeModel {
    marker: String,
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
    vocab: BTreeSet<String>,
}

impl BpeModel {
    pub fn new(marker: &str, merges: Vec<(String, String)>) -> Self {
        let ranks = merges
            .iter()
            .enumerate()
            .map(|(i, pair)| (pair.clone(), i))
            .collect();
        let mut vocab: BTreeSet<String> =
            merges.iter().map(|(l, r)| format!("{l}{r}")).collect();
        vocab.insert(marker.to_string());
        BpeModel { marker: marker.to_string(), merges, ranks, vocab }
    }

    pub fn marker(&self) -> &str {
        &self.marker
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// Marker plus every merge product.
    pub fn vocabulary(&self) -> &BTreeSet<String> {
        &self.vocab
    }

    /// Splits one word into subword symbols by applying merges in learned
    /// order. Unseen characters pass through as singleton symbols.
    pub fn encode_word(&self, word: &str) -> Vec<String> {
        if is_reserved_token(word) {
            return vec![word.to_string()];
        }
        let mut symbols: Vec<String> = word.chars().map(|c| c.to_string()).collect();
        symbols.push(self.marker.clone());
        loop {
            let mut best: Option<(usize, usize)> = None; // (rank, position)
            for i in 0..symbols.len() - 1 {
                if let Some(&rank) =
                    self.ranks.get(&(symbols[i].clone(), symbols[i + 1].clone()))
                {
                    if best.map_or(true, |(r, _)| rank < r) {
                        best = Some((rank, i));
                    }
                }
            }
            let Some((rank, _)) = best else { break };
            let (left, right) = self.merges[rank].clone();
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
                    merged.push(format!("{left}{right}"));
                    i += 2;
                } else {
                    merged.push(symbols[i].clone());
                    i += 1;
                }
            }
            symbols = merged;
        }
        symbols
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<String> {
        tokens.iter().flat_map(|t| self.encode_word(t)).collect()
    }

    /// Joins subword symbols back into tokens. Total: unterminated trailing
    /// material becomes a final token, and reserved symbols flush any
    /// partial word before them.
    pub fn decode(&self, symbols: &[String]) -> Vec<String> {
        let mut out = Vec::new();
        let mut word = String::new();
        let mut open = false;
        for sym in symbols {
            if is_reserved_token(sym) {
                if open {
                    out.push(std::mem::take(&mut word));
                    open = false;
                }
                out.push(sym.clone());
            } else if let Some(stem) = sym.strip_suffix(self.marker.as_str()) {
                word.push_str(stem);
                out.push(std::mem::take(&mut word));
                open = false;
            } else {
                word.push_str(sym);
                open = true;
            }
        }
        if open {
            out.push(word);
        }
        out
    }

    /// Model file: a header line naming the marker, then one merge pair per
    /// line in learned order.
    pub fn save(&self, path: &Path) -> Result<(), BpeError> {
        let file = File::create(path)
            .map_err(|e| BpeError::Io { path: path.display().to_string(), source: e })?;
        let mut w = BufWriter::new(file);
        (|| -> std::io::Result<()> {
            writeln!(w, "#bpe v1 marker={}", self.marker)?;
            for (l, r) in &self.merges {
                writeln!(w, "{l} {r}")?;
            }
            Ok(())
        })()
        .map_err(|e| BpeError::Io { path: path.display().to_string(), source: e })
    }

    pub fn load(path: &Path) -> Result<Self, BpeError> {
        let file = File::open(path)
            .map_err(|e| BpeError::Io { path: path.display().to_string(), source: e })?;
        let mut lines = BufReader::new(file).lines().enumerate();
        let marker = match lines.next() {
            Some((_, Ok(header))) => header
                .strip_prefix("#bpe v1 marker=")
                .map(String::from)
                .ok_or_else(|| BpeError::BadModelFile {
                    line: 1,
                    message: format!("unexpected header {header:?}"),
                })?,
            Some((_, Err(e))) => {
                return Err(BpeError::Io { path: path.display().to_string(), source: e })
            }
            None => {
                return Err(BpeError::BadModelFile { line: 1, message: "empty file".into() })
            }
        };
        let mut merges = Vec::new();
        for (idx, line) in lines {
            let line = line
                .map_err(|e| BpeError::Io { path: path.display().to_string(), source: e })?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(l), Some(r), None) => merges.push((l.to_string(), r.to_string())),
                _ => {
                    return Err(BpeError::BadModelFile {
                        line: idx + 1,
                        message: format!("expected `left right`, got {line:?}"),
                    })
                }
            }
        }
        Ok(BpeModel::new(&marker, merges))
    }
}

/// Learns merges from a word-frequency table.
///
/// Stops early once no adjacent pair occurs at least twice. Pairs whose
/// concatenation would fabricate a symbol containing the end-of-word marker
/// (other than by merging with the word-final marker itself) are skipped so
/// decoding stays unambiguous.
pub fn learn_bpe(
    word_freqs: &BTreeMap<String, u64>,
    num_merges: usize,
) -> Result<BpeModel, BpeError> {
    learn_bpe_with_marker(word_freqs, num_merges, DEFAULT_MARKER)
}

pub fn learn_bpe_with_marker(
    word_freqs: &BTreeMap<String, u64>,
    num_merges: usize,
    marker: &str,
) -> Result<BpeModel, BpeError> {
    if word_freqs.is_empty() {
        return Err(BpeError::EmptyCorpus);
    }
    // Reserved tokens are atomic; they contribute no pairs.
    let mut words: Vec<(Vec<String>, u64)> = word_freqs
        .iter()
        .filter(|(w, _)| !is_reserved_token(w))
        .map(|(w, &freq)| {
            let mut syms: Vec<String> = w.chars().map(|c| c.to_string()).collect();
            syms.push(marker.to_string());
            (syms, freq)
        })
        .collect();

    let mut pair_counts: HashMap<(String, String), i64> = HashMap::new();
    let mut pair_words: HashMap<(String, String), BTreeSet<usize>> = HashMap::new();
    for (idx, (syms, freq)) in words.iter().enumerate() {
        for pair in adjacent_pairs(syms) {
            *pair_counts.entry(pair.clone()).or_insert(0) += *freq as i64;
            pair_words.entry(pair).or_default().insert(idx);
        }
    }

    let mut merges = Vec::new();
    for _ in 0..num_merges {
        let best = pair_counts
            .iter()
            .filter(|(pair, &count)| count >= 2 && merge_allowed(pair, marker))
            .map(|(pair, &count)| (count, pair.clone()))
            .max_by(|(ca, pa), (cb, pb)| ca.cmp(cb).then_with(|| pb.cmp(pa)));
        let Some((_, pair)) = best else { break };

        let affected: Vec<usize> = pair_words
            .get(&pair)
            .map(|set| set.iter().copied().collect())
            .unwrap_or_default();
        for idx in affected {
            let (syms, freq) = &mut words[idx];
            for old_pair in adjacent_pairs(syms) {
                *pair_counts.entry(old_pair.clone()).or_insert(0) -= *freq as i64;
                if let Some(set) = pair_words.get_mut(&old_pair) {
                    set.remove(&idx);
                }
            }
            apply_merge(syms, &pair);
            for new_pair in adjacent_pairs(syms) {
                *pair_counts.entry(new_pair.clone()).or_insert(0) += *freq as i64;
                pair_words.entry(new_pair).or_default().insert(idx);
            }
        }
        pair_counts.remove(&pair);
        merges.push(pair);
    }
    Ok(BpeModel::new(marker, merges))
}

fn adjacent_pairs(symbols: &[String]) -> Vec<(String, String)> {
    symbols.windows(2).map(|w| (w[0].clone(), w[1].clone())).collect()
}

fn merge_allowed(pair: &(String, String), marker: &str) -> bool {
    if pair.1.ends_with(marker) {
        return true;
    }
    !format!("{}{}", pair.0, pair.1).contains(marker)
}

fn apply_merge(symbols: &mut Vec<String>, pair: &(String, String)) {
    let mut merged = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == pair.0 && symbols[i + 1] == pair.1 {
            merged.push(format!("{}{}", pair.0, pair.1));
            i += 2;
        } else {
            merged.push(symbols[i].clone());
            i += 1;
        }
    }
    *symbols = merged;
}

/// Builds a word-frequency table from token sequences, with reserved label
/// tokens included so they end up in the model's atomic vocabulary.
pub fn word_frequencies<'a, I>(token_lists: I) -> BTreeMap<String, u64>
where
    I: IntoIterator<Item = &'a Vec<String>>,
{
    let mut freqs = BTreeMap::new();
    for tokens in token_lists {
        for tok in tokens {
            *freqs.entry(tok.clone()).or_insert(0) += 1;
        }
    }
    freqs
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn freqs(pairs: &[(&str, u64)]) -> BTreeMap<String, u64> {
        pairs.iter().map(|(w, f)| (w.to_string(), *f)).collect()
    }

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn first_merge_on_low_lower() {
        let model = learn_bpe(&freqs(&[("low", 3), ("lower", 2)]), 1).unwrap();
        assert_eq!(model.merges(), &[("l".to_string(), "o".to_string())]);
    }

    #[test]
    fn zero_merges_gives_character_encoding() {
        let model = learn_bpe(&freqs(&[("low", 3)]), 0).unwrap();
        assert!(model.merges().is_empty());
        assert_eq!(model.encode_word("low"), vec!["l", "o", "w", "</w>"]);
    }

    #[test]
    fn single_repeated_letter_word() {
        let model = learn_bpe(&freqs(&[("aaaa", 1)]), 1).unwrap();
        assert_eq!(model.merges(), &[("a".to_string(), "a".to_string())]);
        // Overlapping occurrences merge left to right.
        assert_eq!(model.encode_word("aaaa"), vec!["aa", "aa", "</w>"]);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(matches!(learn_bpe(&BTreeMap::new(), 5), Err(BpeError::EmptyCorpus)));
    }

    #[test]
    fn stops_when_no_pair_repeats() {
        let model = learn_bpe(&freqs(&[("ab", 1), ("cd", 1)]), 100).unwrap();
        assert!(model.merges().is_empty());
    }

    #[test]
    fn manual_merge_application() {
        let model = BpeModel::new(
            DEFAULT_MARKER,
            vec![("l".into(), "o".into()), ("lo".into(), "w".into())],
        );
        assert_eq!(model.encode_word("low"), vec!["low", "</w>"]);
        assert_eq!(model.encode_word("lower"), vec!["low", "e", "r", "</w>"]);
        assert_eq!(model.decode(&model.encode(&toks("low lower"))), toks("low lower"));
    }

    #[test]
    fn reserved_tokens_stay_whole() {
        let model = learn_bpe(&freqs(&[("low", 3), ("[IN:GET_EVENT", 50), ("]", 50)]), 10).unwrap();
        assert_eq!(model.encode_word("[IN:GET_EVENT"), vec!["[IN:GET_EVENT"]);
        assert_eq!(model.encode_word("]"), vec!["]"]);
        let mixed = toks("[IN:GET_EVENT [SL:DATE_TIME this weekend ] ]");
        assert_eq!(model.decode(&model.encode(&mixed)), mixed);
    }

    #[test]
    fn roundtrip_on_event_fixture_tokens() {
        let model = learn_bpe(&freqs(&[("weekend", 4), ("weekday", 2), ("any", 9)]), 20).unwrap();
        let tokens = toks("Any festivals this weekend");
        assert_eq!(model.decode(&model.encode(&tokens)), tokens);
    }

    #[test]
    fn unseen_characters_pass_through() {
        let model = learn_bpe(&freqs(&[("low", 3)]), 5).unwrap();
        let tokens = toks("祭り ですか");
        assert_eq!(model.decode(&model.encode(&tokens)), tokens);
    }

    #[test]
    fn marker_collision_words_still_roundtrip() {
        // A word containing the literal marker text must not teach the
        // model a symbol that decodes as an end-of-word.
        let model = learn_bpe(&freqs(&[("x</w>x", 50), ("y</w>", 40)]), 50).unwrap();
        for w in ["x</w>x", "y</w>", "</w>"] {
            let tokens = vec![w.to_string()];
            assert_eq!(model.decode(&model.encode(&tokens)), tokens, "word {w:?}");
        }
    }

    #[test]
    fn determinism_same_table_same_merges() {
        let table = freqs(&[("low", 3), ("lower", 2), ("newest", 6), ("widest", 3)]);
        let a = learn_bpe(&table, 30).unwrap();
        let b = learn_bpe(&table, 30).unwrap();
        assert_eq!(a.merges(), b.merges());
    }

    #[test]
    fn ties_break_lexicographically() {
        // "ab" and "cd" both occur twice; ("a","b") < ("c","d").
        let model = learn_bpe(&freqs(&[("ab", 2), ("cd", 2)]), 1).unwrap();
        assert_eq!(model.merges(), &[("a".to_string(), "b".to_string())]);
    }

    #[test]
    fn save_load_roundtrip() {
        let table = freqs(&[("low", 3), ("lower", 2), ("newest", 6)]);
        let model = learn_bpe(&table, 10).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        model.save(f.path()).unwrap();
        let back = BpeModel::load(f.path()).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.encode_word("lowest"), model.encode_word("lowest"));
    }

    /// Independent pair-counting oracle: recount every pair from scratch
    /// and pick the (count, lexicographic) best.
    pub(crate) fn oracle_merge_sequence(
        word_freqs: &BTreeMap<String, u64>,
        num_merges: usize,
    ) -> Vec<(String, String)> {
        let mut words: Vec<(Vec<String>, u64)> = word_freqs
            .iter()
            .filter(|(w, _)| !is_reserved_token(w))
            .map(|(w, &f)| {
                let mut syms: Vec<String> = w.chars().map(|c| c.to_string()).collect();
                syms.push(DEFAULT_MARKER.to_string());
                (syms, f)
            })
            .collect();
        let mut merges = Vec::new();
        for _ in 0..num_merges {
            let mut counts: BTreeMap<(String, String), u64> = BTreeMap::new();
            for (syms, f) in &words {
                for w in syms.windows(2) {
                    *counts.entry((w[0].clone(), w[1].clone())).or_insert(0) += f;
                }
            }
            let best = counts
                .iter()
                .filter(|(pair, &c)| c >= 2 && merge_allowed(pair, DEFAULT_MARKER))
                .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)));
            let Some((pair, _)) = best else { break };
            let pair = pair.clone();
            for (syms, _) in &mut words {
                apply_merge(syms, &pair);
            }
            merges.push(pair);
        }
        merges
    }

    #[test]
    fn merge_sequence_matches_pair_count_oracle() {
        let table = freqs(&[("low", 3), ("lower", 2)]);
        let expected = oracle_merge_sequence(&table, 10);
        let model = learn_bpe(&table, 10).unwrap();
        assert_eq!(model.merges(), expected.as_slice());

        let bigger = freqs(&[("low", 5), ("lower", 2), ("newest", 6), ("widest", 3), ("west", 4)]);
        let expected = oracle_merge_sequence(&bigger, 40);
        let model = learn_bpe(&bigger, 40).unwrap();
        assert_eq!(model.merges(), expected.as_slice());
    }

    /// Total symbol count over the training corpus after applying the first
    /// `n` merges; used for the monotonicity check.
    pub(crate) fn corpus_symbol_count(
        word_freqs: &BTreeMap<String, u64>,
        model: &BpeModel,
        first_n_merges: usize,
    ) -> u64 {
        let partial = BpeModel::new(
            model.marker(),
            model.merges()[..first_n_merges].to_vec(),
        );
        word_freqs
            .iter()
            .map(|(w, f)| partial.encode_word(w).len() as u64 * f)
            .sum()
    }

    #[test]
    fn symbol_count_strictly_decreases_per_merge() {
        let table = freqs(&[("low", 5), ("lower", 2), ("newest", 6), ("widest", 3)]);
        let model = learn_bpe(&table, 100).unwrap();
        let mut prev = corpus_symbol_count(&table, &model, 0);
        for n in 1..=model.merges().len() {
            let count = corpus_symbol_count(&table, &model, n);
            assert!(count < prev, "merge {n} did not shrink the corpus");
            prev = count;
        }
    }

    proptest! {
        #[test]
        fn roundtrip_identity_on_arbitrary_tokens(
            tokens in proptest::collection::vec("[a-zA-Z0-9<>/']{0,8}", 0..12)
        ) {
            let table = freqs(&[("low", 3), ("lower", 2), ("wide", 4)]);
            let model = learn_bpe(&table, 10).unwrap();
            let tokens: Vec<String> = tokens.into_iter().collect();
            prop_assert_eq!(model.decode(&model.encode(&tokens)), tokens);
        }
    }
}
