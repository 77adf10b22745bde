//! Corpus ingestion and the toolkit's on-disk record format.
//!
//! Two file formats live here:
//!
//! * the TOP TSV input (3 tab-separated columns: raw utterance, tokenized
//!   utterance, annotation), read by [`ingest_top_tsv`];
//! * the toolkit's own line-delimited corpus format, one JSON record per
//!   line after a `schema_version` header record, written and read by
//!   [`write_corpus`] / [`read_corpus`].

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_segmentation::UnicodeSegmentation;

use crate::mrl::{self, Adapted, MrlError, MrlTree};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected 3 tab-separated columns, got {got}")]
    MalformedRow { line: usize, got: usize },
    #[error("line {line}: {source}")]
    Mrl {
        line: usize,
        #[source]
        source: MrlError,
    },
    #[error("line {line}: bad record: {message}")]
    BadRecord { line: usize, message: String },
    #[error("corpus file declares schema_version {got}, this build reads {want}")]
    SchemaVersionMismatch { got: u32, want: u32 },
    #[error("duplicate example id {0:?}")]
    DuplicateId(String),
}

impl DataError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io { path: path.display().to_string(), source }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Human,
    MachineTranslated,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "dev" | "valid" | "validation" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// One (language, question, MRL) datum; the unit flowing through every
/// pipeline stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub id: String,
    pub lang: String,
    pub question_tokens: Vec<String>,
    pub mrl: MrlTree,
    pub provenance: Provenance,
    pub meta: BTreeMap<String, String>,
}

impl Example {
    pub fn question(&self) -> String {
        self.question_tokens.join(" ")
    }

    pub fn mrl_string(&self) -> String {
        mrl::serialize_mrl(&self.mrl)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub split: Split,
    pub examples: Vec<Example>,
}

impl Corpus {
    pub fn new(split: Split) -> Self {
        Corpus { split, examples: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn langs(&self) -> BTreeSet<String> {
        self.examples.iter().map(|e| e.lang.clone()).collect()
    }

    pub fn counts_by_lang(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for e in &self.examples {
            *counts.entry(e.lang.clone()).or_insert(0) += 1;
        }
        counts
    }
}

/// Counts emitted by [`ingest_top_tsv`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub read: usize,
    pub kept: usize,
    pub dropped_unsupported: usize,
    pub malformed: usize,
    /// 1-based line numbers of malformed rows (lenient mode only).
    pub malformed_lines: Vec<usize>,
}

/// Abort on the first malformed row, or count-and-skip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IngestStrictness {
    Strict,
    Lenient,
}

/// Reads a TOP-format TSV file into a corpus, adapting each annotation and
/// excluding `IN:UNSUPPORTED` rows.
pub fn ingest_top_tsv(
    path: &Path,
    split: Split,
    lang: &str,
    strictness: IngestStrictness,
) -> Result<(Corpus, IngestReport), DataError> {
    let file = File::open(path).map_err(|e| DataError::io(path, e))?;
    let reader = BufReader::new(file);
    let mut corpus = Corpus::new(split);
    let mut report = IngestReport::default();

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| DataError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        report.read += 1;
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            match strictness {
                IngestStrictness::Strict => {
                    return Err(DataError::MalformedRow { line: line_no, got: cols.len() })
                }
                IngestStrictness::Lenient => {
                    report.malformed += 1;
                    report.malformed_lines.push(line_no);
                    continue;
                }
            }
        }
        let question_tokens: Vec<String> =
            cols[1].split_whitespace().map(String::from).collect();
        if question_tokens.is_empty() {
            match strictness {
                IngestStrictness::Strict => {
                    return Err(DataError::BadRecord {
                        line: line_no,
                        message: "empty tokenized utterance".into(),
                    })
                }
                IngestStrictness::Lenient => {
                    report.malformed += 1;
                    report.malformed_lines.push(line_no);
                    continue;
                }
            }
        }
        match mrl::adapt_top_annotation(cols[2], &question_tokens) {
            Ok(Adapted::Dropped) => report.dropped_unsupported += 1,
            Ok(Adapted::Tree(tree)) => {
                report.kept += 1;
                corpus.examples.push(Example {
                    id: format!("{}-{}", split.as_str(), line_no),
                    lang: lang.to_string(),
                    question_tokens,
                    mrl: tree,
                    provenance: Provenance::Human,
                    meta: BTreeMap::new(),
                });
            }
            Err(e) => match strictness {
                IngestStrictness::Strict => {
                    return Err(DataError::Mrl { line: line_no, source: e })
                }
                IngestStrictness::Lenient => {
                    report.malformed += 1;
                    report.malformed_lines.push(line_no);
                }
            },
        }
    }
    Ok((corpus, report))
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    split: Split,
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    lang: String,
    question_tokens: Vec<String>,
    mrl: String,
    provenance: Provenance,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

/// Writes the line-delimited corpus format: a header record, then one JSON
/// record per example with the MRL in canonical serialized form.
pub fn write_corpus(path: &Path, corpus: &Corpus) -> Result<(), DataError> {
    let file = File::create(path).map_err(|e| DataError::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_corpus_to(&mut w, corpus).map_err(|e| DataError::io(path, e))
}

pub fn write_corpus_to(w: &mut impl Write, corpus: &Corpus) -> Result<(), std::io::Error> {
    let header = Header { schema_version: SCHEMA_VERSION, split: corpus.split };
    writeln!(w, "{}", serde_json::to_string(&header).expect("header serializes"))?;
    for e in &corpus.examples {
        let record = Record {
            id: e.id.clone(),
            lang: e.lang.clone(),
            question_tokens: e.question_tokens.clone(),
            mrl: e.mrl_string(),
            provenance: e.provenance,
            meta: e.meta.clone(),
        };
        writeln!(w, "{}", serde_json::to_string(&record).expect("record serializes"))?;
    }
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Corpus, DataError> {
    let mut text = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|e| DataError::io(path, e))?;
    read_corpus_from(&text)
}

pub fn read_corpus_from(text: &str) -> Result<Corpus, DataError> {
    let mut lines = text.lines().enumerate();
    let header: Header = match lines.next() {
        Some((_, first)) => serde_json::from_str(first)
            .map_err(|e| DataError::BadRecord { line: 1, message: e.to_string() })?,
        None => return Err(DataError::BadRecord { line: 1, message: "empty file".into() }),
    };
    if header.schema_version != SCHEMA_VERSION {
        return Err(DataError::SchemaVersionMismatch {
            got: header.schema_version,
            want: SCHEMA_VERSION,
        });
    }
    let mut corpus = Corpus::new(header.split);
    let mut seen = HashSet::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(line)
            .map_err(|e| DataError::BadRecord { line: line_no, message: e.to_string() })?;
        if record.question_tokens.is_empty() {
            return Err(DataError::BadRecord {
                line: line_no,
                message: "question_tokens must be non-empty".into(),
            });
        }
        if !seen.insert(record.id.clone()) {
            return Err(DataError::DuplicateId(record.id));
        }
        let tree = mrl::parse_mrl(&record.mrl)
            .map_err(|e| DataError::Mrl { line: line_no, source: e })?;
        corpus.examples.push(Example {
            id: record.id,
            lang: record.lang,
            question_tokens: record.question_tokens,
            mrl: tree,
            provenance: record.provenance,
            meta: record.meta,
        });
    }
    Ok(corpus)
}

const ELISION_APOSTROPHES: [char; 2] = ['\'', '\u{2019}'];
const TERMINAL_PUNCT: [char; 6] = ['.', ',', '!', '?', ';', ':'];

/// Splits a raw question into surface tokens.
///
/// Whitespace splitting, plus: terminal punctuation is detached as its own
/// token, and apostrophe-elided prefixes (`d'artificio` → `d'` +
/// `artificio`) are detached for non-English languages so article
/// filtering can see them. Whitespace in the input is trusted as
/// tokenization; an input with no whitespace at all that contains CJK
/// characters (an unsegmented Japanese sentence) is split on Unicode word
/// boundaries instead.
pub fn tokenize_question(raw: &str, lang: &str) -> Vec<String> {
    let chunks: Vec<&str> = raw.split_whitespace().collect();
    if chunks.len() == 1 && chunks[0].chars().any(is_cjk) {
        let mut out = Vec::new();
        let (body, trailing) = peel_punctuation(chunks[0]);
        out.extend(
            body.split_word_bounds().filter(|w| !w.trim().is_empty()).map(String::from),
        );
        out.extend(trailing);
        return out;
    }
    let mut out = Vec::new();
    for chunk in chunks {
        tokenize_chunk(chunk, lang, &mut out);
    }
    out
}

fn peel_punctuation(chunk: &str) -> (&str, Vec<String>) {
    let mut trailing = Vec::new();
    let mut body = chunk;
    while let Some(last) = body.chars().last() {
        if TERMINAL_PUNCT.contains(&last) && body.chars().count() > 1 {
            trailing.push(last.to_string());
            body = &body[..body.len() - last.len_utf8()];
        } else {
            break;
        }
    }
    trailing.reverse();
    (body, trailing)
}

fn tokenize_chunk(chunk: &str, lang: &str, out: &mut Vec<String>) {
    let (body, trailing) = peel_punctuation(chunk);
    if lang != "en" && !body.chars().any(is_cjk) {
        split_elision(body, out);
    } else {
        out.push(body.to_string());
    }
    out.extend(trailing);
}

/// `dell'artificio` → `dell'` + `artificio`, applied at the first short
/// alphabetic prefix ending in an apostrophe.
fn split_elision(body: &str, out: &mut Vec<String>) {
    let chars: Vec<(usize, char)> = body.char_indices().collect();
    for (pos, &(byte_idx, c)) in chars.iter().enumerate() {
        if ELISION_APOSTROPHES.contains(&c) {
            let prefix_ok = pos >= 1 && pos <= 5 && chars[..pos].iter().all(|&(_, p)| p.is_alphabetic());
            let next = chars.get(pos + 1).map(|&(_, n)| n);
            if prefix_ok && next.map_or(false, |n| n.is_alphabetic()) {
                let split_at = byte_idx + c.len_utf8();
                out.push(body[..split_at].to_string());
                split_elision(&body[split_at..], out);
                return;
            }
        }
    }
    out.push(body.to_string());
}

fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3040..=0x30FF       // hiragana + katakana
        | 0x3400..=0x4DBF     // CJK ext A
        | 0x4E00..=0x9FFF     // CJK unified
        | 0xF900..=0xFAFF     // compatibility ideographs
        | 0xFF66..=0xFF9D     // halfwidth katakana
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    const TOP_ROW: &str = "Any festivals this weekend\tAny festivals this weekend\t[IN:GET_EVENT Any [SL:CATEGORY_EVENT festivals ] [SL:DATE_TIME this weekend ] ]";

    #[test]
    fn ingest_keeps_adapted_rows() {
        let f = write_tmp(&format!("{TOP_ROW}\n"));
        let (corpus, report) =
            ingest_top_tsv(f.path(), Split::Train, "en", IngestStrictness::Strict).unwrap();
        assert_eq!(report, IngestReport { read: 1, kept: 1, ..Default::default() });
        assert_eq!(corpus.len(), 1);
        let e = &corpus.examples[0];
        assert_eq!(e.id, "train-1");
        assert_eq!(e.lang, "en");
        assert_eq!(e.question_tokens, vec!["Any", "festivals", "this", "weekend"]);
        assert_eq!(
            e.mrl_string(),
            "[IN:GET_EVENT [SL:CATEGORY_EVENT festivals ] [SL:DATE_TIME this weekend ] ]"
        );
        assert_eq!(e.provenance, Provenance::Human);
    }

    #[test]
    fn ingest_empty_file() {
        let f = write_tmp("");
        let (corpus, report) =
            ingest_top_tsv(f.path(), Split::Train, "en", IngestStrictness::Strict).unwrap();
        assert!(corpus.is_empty());
        assert_eq!(report.read, 0);
        assert_eq!(report.kept, 0);
    }

    #[test]
    fn ingest_drops_unsupported() {
        let f = write_tmp("whatever\twhatever\t[IN:UNSUPPORTED whatever ]\n");
        let (corpus, report) =
            ingest_top_tsv(f.path(), Split::Train, "en", IngestStrictness::Strict).unwrap();
        assert!(corpus.is_empty());
        assert_eq!(report.dropped_unsupported, 1);
        assert_eq!(report.read, 1);
    }

    #[test]
    fn ingest_strict_aborts_on_bad_column_count() {
        let f = write_tmp("only one column\n");
        let err = ingest_top_tsv(f.path(), Split::Train, "en", IngestStrictness::Strict)
            .unwrap_err();
        assert!(matches!(err, DataError::MalformedRow { line: 1, got: 1 }));
    }

    #[test]
    fn ingest_lenient_counts_bad_rows() {
        let content = format!("bad row\n{TOP_ROW}\na\tb\t[IN:X unclosed\n");
        let f = write_tmp(&content);
        let (corpus, report) =
            ingest_top_tsv(f.path(), Split::Train, "en", IngestStrictness::Lenient).unwrap();
        assert_eq!(corpus.len(), 1);
        assert_eq!(report.malformed, 2);
        assert_eq!(report.malformed_lines, vec![1, 3]);
    }

    #[test]
    fn ingest_line_numbers_in_errors() {
        let content = format!("{TOP_ROW}\na\tb\t[IN:X unclosed\n");
        let f = write_tmp(&content);
        let err = ingest_top_tsv(f.path(), Split::Train, "en", IngestStrictness::Strict)
            .unwrap_err();
        assert!(matches!(err, DataError::Mrl { line: 2, .. }));
    }

    fn sample_corpus() -> Corpus {
        let mut meta = BTreeMap::new();
        meta.insert("note".to_string(), "fixture".to_string());
        Corpus {
            split: Split::Train,
            examples: vec![Example {
                id: "train-1".into(),
                lang: "en".into(),
                question_tokens: vec!["Any".into(), "festivals".into(), "this".into(), "weekend".into()],
                mrl: crate::mrl::parse_mrl(
                    "[IN:GET_EVENT [SL:CATEGORY_EVENT festivals ] [SL:DATE_TIME this weekend ] ]",
                )
                .unwrap(),
                provenance: Provenance::Human,
                meta,
            }],
        }
    }

    #[test]
    fn corpus_roundtrip() {
        let corpus = sample_corpus();
        let f = tempfile::NamedTempFile::new().unwrap();
        write_corpus(f.path(), &corpus).unwrap();
        let back = read_corpus(f.path()).unwrap();
        assert_eq!(back, corpus);
    }

    #[test]
    fn corpus_roundtrip_empty() {
        let corpus = Corpus::new(Split::Dev);
        let f = tempfile::NamedTempFile::new().unwrap();
        write_corpus(f.path(), &corpus).unwrap();
        let back = read_corpus(f.path()).unwrap();
        assert_eq!(back, corpus);
    }

    #[test]
    fn corpus_roundtrip_preserves_unicode() {
        let mut corpus = Corpus::new(Split::Test);
        corpus.examples.push(Example {
            id: "test-1".into(),
            lang: "ja".into(),
            question_tokens: vec!["今週末".into(), "の".into(), "祭り".into()],
            mrl: crate::mrl::parse_mrl("[IN:GET_EVENT [SL:DATE_TIME 今週末 ] ]").unwrap(),
            provenance: Provenance::MachineTranslated,
            meta: BTreeMap::new(),
        });
        let f = tempfile::NamedTempFile::new().unwrap();
        write_corpus(f.path(), &corpus).unwrap();
        assert_eq!(read_corpus(f.path()).unwrap(), corpus);
    }

    #[test]
    fn schema_version_is_checked() {
        let text = "{\"schema_version\":99,\"split\":\"train\"}\n";
        assert!(matches!(
            read_corpus_from(text),
            Err(DataError::SchemaVersionMismatch { got: 99, .. })
        ));
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let mut corpus = sample_corpus();
        corpus.examples.push(corpus.examples[0].clone());
        let mut buf = Vec::new();
        write_corpus_to(&mut buf, &corpus).unwrap();
        let err = read_corpus_from(std::str::from_utf8(&buf).unwrap()).unwrap_err();
        assert!(matches!(err, DataError::DuplicateId(_)));
    }

    #[test]
    fn ingestion_is_deterministic() {
        let content = format!("{TOP_ROW}\nwhatever\twhatever\t[IN:UNSUPPORTED x ]\n");
        let f = write_tmp(&content);
        let a = ingest_top_tsv(f.path(), Split::Train, "en", IngestStrictness::Strict).unwrap();
        let b = ingest_top_tsv(f.path(), Split::Train, "en", IngestStrictness::Strict).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn tokenizer_detaches_italian_elision() {
        assert_eq!(
            tokenize_question("i fuochi d'artificio", "it"),
            vec!["i", "fuochi", "d'", "artificio"]
        );
        assert_eq!(
            tokenize_question("dell'estate", "it"),
            vec!["dell'", "estate"]
        );
    }

    #[test]
    fn tokenizer_keeps_english_contractions() {
        assert_eq!(tokenize_question("don't stop", "en"), vec!["don't", "stop"]);
    }

    #[test]
    fn tokenizer_detaches_terminal_punctuation() {
        assert_eq!(
            tokenize_question("festivals this weekend?", "en"),
            vec!["festivals", "this", "weekend", "?"]
        );
        assert_eq!(tokenize_question("ciao!?", "it"), vec!["ciao", "!", "?"]);
    }

    #[test]
    fn tokenizer_splits_cjk_runs() {
        let toks = tokenize_question("今週末の祭り", "ja");
        assert!(toks.len() >= 2, "expected word-boundary splits, got {toks:?}");
        assert_eq!(toks.concat(), "今週末の祭り");
    }

    #[test]
    fn tokenizer_passes_pretokenized_japanese_through() {
        assert_eq!(
            tokenize_question("今週末 の 祭り", "ja"),
            vec!["今週末", "の", "祭り"]
        );
    }
}
