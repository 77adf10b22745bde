//! Pluggable machine-translation backends with a write-through cache.
//!
//! The real pipeline ran against a commercial service; here that is an
//! interface. `HttpBackend` speaks a small JSON POST contract,
//! `FileBackend` serves a fixed sentence table, `DictBackend` is a
//! word-substitution toy for tests, and `IdentityBackend` echoes its input.
//! [`CachedTranslator`] wraps any backend with an on-disk TSV cache so
//! repeated runs never re-query.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Maximum sentences per backend call; larger requests are chunked.
pub const BATCH_CAP: usize = 50;
const MAX_RETRIES: usize = 3;

pub const ENDPOINT_ENV: &str = "MT_ENDPOINT";
pub const API_KEY_ENV: &str = "MT_API_KEY";

#[derive(Debug, Error)]
pub enum TranslateError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("no cached translation for {sentence:?} ({source_lang}->{target_lang})")]
    CacheMiss {
        sentence: String,
        source_lang: String,
        target_lang: String,
    },
    #[error("translation quota exceeded")]
    QuotaExceeded,
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl TranslateError {
    /// Fatal errors abort a bulk run; a cache miss only fails one sentence.
    pub fn is_fatal(&self) -> bool {
        !matches!(self, TranslateError::CacheMiss { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranslationRequest {
    pub sentences: Vec<String>,
    pub source_lang: String,
    pub target_lang: String,
}

impl TranslationRequest {
    pub fn new(sentences: Vec<String>, source_lang: &str, target_lang: &str) -> Self {
        TranslationRequest {
            sentences,
            source_lang: source_lang.to_string(),
            target_lang: target_lang.to_string(),
        }
    }

    pub fn validate(&self) -> Result<(), TranslateError> {
        if self.sentences.is_empty() {
            return Err(TranslateError::InvalidRequest("empty sentence list".into()));
        }
        if self.source_lang == self.target_lang {
            return Err(TranslateError::InvalidRequest(format!(
                "source and target language are both {:?}",
                self.source_lang
            )));
        }
        Ok(())
    }
}

/// A translation backend returns one output per input sentence, in order.
pub trait TranslationBackend: Send + Sync {
    fn translate(&self, request: &TranslationRequest) -> Result<Vec<String>, TranslateError>;
    fn name(&self) -> &'static str;
}

/// Echoes the source sentences; the translation-free baseline.
pub struct IdentityBackend;

impl TranslationBackend for IdentityBackend {
    fn translate(&self, request: &TranslationRequest) -> Result<Vec<String>, TranslateError> {
        Ok(request.sentences.clone())
    }

    fn name(&self) -> &'static str {
        "identity"
    }
}

/// Word-substitution toy translator. Lookup is case-insensitive; unknown
/// words pass through unchanged; a lexicon value may be a multi-word phrase.
pub struct DictBackend {
    lexicon: HashMap<String, String>,
}

impl DictBackend {
    pub fn new(entries: impl IntoIterator<Item = (String, String)>) -> Self {
        DictBackend {
            lexicon: entries
                .into_iter()
                .map(|(k, v)| (k.to_lowercase(), v))
                .collect(),
        }
    }

    /// Lexicon file: `src_word \t tgt_phrase` per line.
    pub fn from_file(path: &Path) -> Result<Self, TranslateError> {
        let file = File::open(path)
            .map_err(|e| TranslateError::Io { path: path.display().to_string(), source: e })?;
        let mut entries = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line
                .map_err(|e| TranslateError::Io { path: path.display().to_string(), source: e })?;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((src, tgt)) = line.split_once('\t') else {
                return Err(TranslateError::InvalidRequest(format!(
                    "bad lexicon line {line:?}: expected `src\\ttgt`"
                )));
            };
            entries.push((src.to_string(), tgt.to_string()));
        }
        Ok(DictBackend::new(entries))
    }
}

impl TranslationBackend for DictBackend {
    fn translate(&self, request: &TranslationRequest) -> Result<Vec<String>, TranslateError> {
        Ok(request
            .sentences
            .iter()
            .map(|sentence| {
                sentence
                    .split_whitespace()
                    .map(|w| {
                        self.lexicon
                            .get(&w.to_lowercase())
                            .cloned()
                            .unwrap_or_else(|| w.to_string())
                    })
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect())
    }

    fn name(&self) -> &'static str {
        "dict"
    }
}

/// Serves translations from a fixed table; absent sentences are cache
/// misses.
pub struct FileBackend {
    entries: HashMap<(String, String, String), String>,
}

impl FileBackend {
    /// Reads the cache TSV format: `source_lang \t target_lang \t sentence
    /// \t translation`.
    pub fn from_file(path: &Path) -> Result<Self, TranslateError> {
        Ok(FileBackend { entries: read_cache_file(path)? })
    }

    pub fn from_entries(
        entries: impl IntoIterator<Item = ((String, String, String), String)>,
    ) -> Self {
        FileBackend { entries: entries.into_iter().collect() }
    }
}

impl TranslationBackend for FileBackend {
    fn translate(&self, request: &TranslationRequest) -> Result<Vec<String>, TranslateError> {
        request
            .sentences
            .iter()
            .map(|s| {
                let key =
                    (request.source_lang.clone(), request.target_lang.clone(), s.clone());
                self.entries.get(&key).cloned().ok_or_else(|| TranslateError::CacheMiss {
                    sentence: s.clone(),
                    source_lang: request.source_lang.clone(),
                    target_lang: request.target_lang.clone(),
                })
            })
            .collect()
    }

    fn name(&self) -> &'static str {
        "file"
    }
}

#[derive(Serialize)]
struct HttpRequestBody<'a> {
    source_lang: &'a str,
    target_lang: &'a str,
    sentences: &'a [String],
}

#[derive(Deserialize)]
struct HttpResponseBody {
    translations: Vec<String>,
}

/// Generic REST endpoint: `POST {source_lang, target_lang, sentences[]}` →
/// `{translations[]}` with bearer auth, exponential backoff, and 3 retries
/// on retryable failures.
pub struct HttpBackend {
    endpoint: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    backoff_base: Duration,
}

impl HttpBackend {
    pub fn new(endpoint: &str, api_key: Option<&str>) -> Self {
        HttpBackend {
            endpoint: endpoint.to_string(),
            api_key: api_key.map(String::from),
            client: reqwest::blocking::Client::new(),
            backoff_base: Duration::from_millis(250),
        }
    }

    /// Reads `MT_ENDPOINT` and `MT_API_KEY`.
    pub fn from_env() -> Result<Self, TranslateError> {
        let endpoint = std::env::var(ENDPOINT_ENV).map_err(|_| {
            TranslateError::InvalidRequest(format!("{ENDPOINT_ENV} is not set"))
        })?;
        let api_key = std::env::var(API_KEY_ENV).ok();
        Ok(HttpBackend::new(&endpoint, api_key.as_deref()))
    }

    pub fn with_backoff_base(mut self, base: Duration) -> Self {
        self.backoff_base = base;
        self
    }

    fn attempt(&self, request: &TranslationRequest) -> Result<Vec<String>, TranslateError> {
        let body = HttpRequestBody {
            source_lang: &request.source_lang,
            target_lang: &request.target_lang,
            sentences: &request.sentences,
        };
        let mut builder = self.client.post(&self.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder
            .send()
            .map_err(|e| TranslateError::BackendUnavailable(e.to_string()))?;
        let status = response.status();
        if status.as_u16() == 429 {
            return Err(TranslateError::QuotaExceeded);
        }
        if !status.is_success() {
            return Err(TranslateError::BackendUnavailable(format!("HTTP {status}")));
        }
        let parsed: HttpResponseBody = response
            .json()
            .map_err(|e| TranslateError::BackendUnavailable(format!("bad response: {e}")))?;
        if parsed.translations.len() != request.sentences.len() {
            return Err(TranslateError::BackendUnavailable(format!(
                "response length {} != request length {}",
                parsed.translations.len(),
                request.sentences.len()
            )));
        }
        Ok(parsed.translations)
    }
}

impl TranslationBackend for HttpBackend {
    fn translate(&self, request: &TranslationRequest) -> Result<Vec<String>, TranslateError> {
        let mut delay = self.backoff_base;
        let mut last_err = None;
        for attempt in 0..=MAX_RETRIES {
            if attempt > 0 {
                std::thread::sleep(delay);
                delay *= 2;
            }
            match self.attempt(request) {
                Ok(result) => return Ok(result),
                Err(e @ (TranslateError::BackendUnavailable(_) | TranslateError::QuotaExceeded)) => {
                    last_err = Some(e);
                }
                Err(e) => return Err(e),
            }
        }
        Err(last_err.expect("at least one attempt ran"))
    }

    fn name(&self) -> &'static str {
        "http"
    }
}

type CacheKey = (String, String, String);

fn read_cache_file(path: &Path) -> Result<HashMap<CacheKey, String>, TranslateError> {
    let file = File::open(path)
        .map_err(|e| TranslateError::Io { path: path.display().to_string(), source: e })?;
    let mut entries = HashMap::new();
    for line in BufReader::new(file).lines() {
        let line = line
            .map_err(|e| TranslateError::Io { path: path.display().to_string(), source: e })?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.splitn(4, '\t').collect();
        if cols.len() != 4 {
            return Err(TranslateError::InvalidRequest(format!(
                "bad cache line {line:?}: expected 4 tab-separated fields"
            )));
        }
        entries.insert(
            (cols[0].to_string(), cols[1].to_string(), cols[2].to_string()),
            cols[3].to_string(),
        );
    }
    Ok(entries)
}

/// Write-through caching layer over any backend.
///
/// The in-memory map is loaded from the cache file at startup; new
/// translations are appended immediately so an aborted run keeps what it
/// paid for. Reads are concurrent; the file append is single-writer.
pub struct CachedTranslator {
    backend: Box<dyn TranslationBackend>,
    cache: RwLock<HashMap<CacheKey, String>>,
    cache_file: Option<Mutex<(PathBuf, File)>>,
    backend_calls: AtomicUsize,
}

impl CachedTranslator {
    pub fn new(
        backend: Box<dyn TranslationBackend>,
        cache_path: Option<&Path>,
    ) -> Result<Self, TranslateError> {
        let mut cache = HashMap::new();
        let cache_file = match cache_path {
            Some(path) => {
                if path.exists() {
                    cache = read_cache_file(path)?;
                }
                let file = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(|e| TranslateError::Io {
                        path: path.display().to_string(),
                        source: e,
                    })?;
                Some(Mutex::new((path.to_path_buf(), file)))
            }
            None => None,
        };
        Ok(CachedTranslator {
            backend,
            cache: RwLock::new(cache),
            cache_file,
            backend_calls: AtomicUsize::new(0),
        })
    }

    pub fn backend_name(&self) -> &'static str {
        self.backend.name()
    }

    /// Backend invocations so far; cache hits do not count.
    pub fn backend_calls(&self) -> usize {
        self.backend_calls.load(Ordering::SeqCst)
    }

    /// Translates a batch, serving cache hits locally and chunking the
    /// misses. Any failure fails the whole batch; see
    /// [`CachedTranslator::translate_each`] for per-sentence granularity.
    pub fn translate_batch(
        &self,
        request: &TranslationRequest,
    ) -> Result<Vec<String>, TranslateError> {
        let results = self.translate_each(request)?;
        results.into_iter().collect()
    }

    /// Per-sentence outcomes: fatal backend failures (network, quota) abort
    /// the run, while a per-sentence miss only fails that slot.
    pub fn translate_each(
        &self,
        request: &TranslationRequest,
    ) -> Result<Vec<Result<String, TranslateError>>, TranslateError> {
        request.validate()?;
        let mut out: Vec<Option<Result<String, TranslateError>>> =
            (0..request.sentences.len()).map(|_| None).collect();

        let mut miss_indices = Vec::new();
        {
            let cache = self.cache.read().expect("cache lock");
            for (idx, sentence) in request.sentences.iter().enumerate() {
                let key = self.key(request, sentence);
                match cache.get(&key) {
                    Some(hit) => out[idx] = Some(Ok(hit.clone())),
                    None => miss_indices.push(idx),
                }
            }
        }

        for chunk in miss_indices.chunks(BATCH_CAP) {
            let sentences: Vec<String> =
                chunk.iter().map(|&i| request.sentences[i].clone()).collect();
            let sub = TranslationRequest::new(
                sentences,
                &request.source_lang,
                &request.target_lang,
            );
            self.backend_calls.fetch_add(1, Ordering::SeqCst);
            match self.backend.translate(&sub) {
                Ok(translations) => {
                    for (&idx, translation) in chunk.iter().zip(translations) {
                        self.store(request, &request.sentences[idx], &translation)?;
                        out[idx] = Some(Ok(translation));
                    }
                }
                Err(e) if e.is_fatal() => return Err(e),
                Err(_) => {
                    // Fall back to per-sentence calls so one missing entry
                    // does not hide the rest of the chunk.
                    for &idx in chunk {
                        let single = TranslationRequest::new(
                            vec![request.sentences[idx].clone()],
                            &request.source_lang,
                            &request.target_lang,
                        );
                        self.backend_calls.fetch_add(1, Ordering::SeqCst);
                        match self.backend.translate(&single) {
                            Ok(mut t) => {
                                let translation = t.remove(0);
                                self.store(request, &request.sentences[idx], &translation)?;
                                out[idx] = Some(Ok(translation));
                            }
                            Err(e) if e.is_fatal() => return Err(e),
                            Err(e) => out[idx] = Some(Err(e)),
                        }
                    }
                }
            }
        }

        Ok(out.into_iter().map(|slot| slot.expect("every slot filled")).collect())
    }

    fn key(&self, request: &TranslationRequest, sentence: &str) -> CacheKey {
        (request.source_lang.clone(), request.target_lang.clone(), sentence.to_string())
    }

    fn store(
        &self,
        request: &TranslationRequest,
        sentence: &str,
        translation: &str,
    ) -> Result<(), TranslateError> {
        let key = self.key(request, sentence);
        {
            let mut cache = self.cache.write().expect("cache lock");
            if cache.insert(key, translation.to_string()).is_some() {
                return Ok(());
            }
        }
        if let Some(file) = &self.cache_file {
            let mut guard = file.lock().expect("cache file lock");
            let (path, file) = &mut *guard;
            writeln!(
                file,
                "{}\t{}\t{}\t{}",
                request.source_lang, request.target_lang, sentence, translation
            )
            .map_err(|e| TranslateError::Io { path: path.display().to_string(), source: e })?;
        }
        Ok(())
    }
}

/// Builds a backend by name, as exposed on the CLI.
pub fn backend_from_name(
    name: &str,
    lexicon: Option<&Path>,
    table: Option<&Path>,
) -> Result<Box<dyn TranslationBackend>, TranslateError> {
    match name {
        "identity" => Ok(Box::new(IdentityBackend)),
        "dict" => {
            let path = lexicon.ok_or_else(|| {
                TranslateError::InvalidRequest("dict backend needs --lexicon".into())
            })?;
            Ok(Box::new(DictBackend::from_file(path)?))
        }
        "file" => {
            let path = table.ok_or_else(|| {
                TranslateError::InvalidRequest("file backend needs --table".into())
            })?;
            Ok(Box::new(FileBackend::from_file(path)?))
        }
        "http" => Ok(Box::new(HttpBackend::from_env()?)),
        other => Err(TranslateError::InvalidRequest(format!("unknown backend {other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn event_lexicon() -> DictBackend {
        DictBackend::new(
            [
                ("any", "tutti"),
                ("festivals", "festival"),
                ("this", "questo"),
                ("weekend", "fine settimana"),
            ]
            .map(|(k, v)| (k.to_string(), v.to_string())),
        )
    }

    #[test]
    fn dict_backend_substitutes_words() {
        let backend = event_lexicon();
        let request =
            TranslationRequest::new(vec!["Any festivals this weekend".into()], "en", "it");
        assert_eq!(
            backend.translate(&request).unwrap(),
            vec!["tutti festival questo fine settimana"]
        );
    }

    #[test]
    fn dict_backend_passes_unknown_words_through() {
        let backend = event_lexicon();
        let request = TranslationRequest::new(vec!["Any concerts".into()], "en", "it");
        assert_eq!(backend.translate(&request).unwrap(), vec!["tutti concerts"]);
    }

    #[test]
    fn file_backend_serves_seeded_pairs() {
        let backend = FileBackend::from_entries([(
            ("en".to_string(), "it".to_string(), "Any festivals this weekend".to_string()),
            "Tutti i festival questo fine settimana".to_string(),
        )]);
        let request =
            TranslationRequest::new(vec!["Any festivals this weekend".into()], "en", "it");
        assert_eq!(
            backend.translate(&request).unwrap(),
            vec!["Tutti i festival questo fine settimana"]
        );
        let missing = TranslationRequest::new(vec!["unseen sentence".into()], "en", "it");
        assert!(matches!(
            backend.translate(&missing),
            Err(TranslateError::CacheMiss { .. })
        ));
    }

    #[test]
    fn empty_request_is_rejected() {
        let translator =
            CachedTranslator::new(Box::new(IdentityBackend), None).unwrap();
        let request = TranslationRequest::new(Vec::new(), "en", "it");
        assert!(matches!(
            translator.translate_batch(&request),
            Err(TranslateError::InvalidRequest(_))
        ));
    }

    #[test]
    fn same_language_pair_is_rejected() {
        let request = TranslationRequest::new(vec!["x".into()], "en", "en");
        assert!(request.validate().is_err());
    }

    #[test]
    fn order_and_length_are_preserved() {
        let translator = CachedTranslator::new(Box::new(event_lexicon()), None).unwrap();
        let sentences: Vec<String> =
            (0..130).map(|i| format!("weekend {i} festivals")).collect();
        let request = TranslationRequest::new(sentences.clone(), "en", "it");
        let out = translator.translate_batch(&request).unwrap();
        assert_eq!(out.len(), sentences.len());
        for (i, t) in out.iter().enumerate() {
            assert_eq!(t, &format!("fine settimana {i} festival"));
        }
        // 130 sentences at a 50-sentence cap = 3 backend calls.
        assert_eq!(translator.backend_calls(), 3);
    }

    #[test]
    fn warm_cache_issues_zero_backend_calls() {
        let dir = tempfile::tempdir().unwrap();
        let cache_path = dir.path().join("cache.tsv");
        let request = TranslationRequest::new(
            vec!["Any festivals this weekend".into(), "this weekend".into()],
            "en",
            "it",
        );

        let translator =
            CachedTranslator::new(Box::new(event_lexicon()), Some(&cache_path)).unwrap();
        let first = translator.translate_batch(&request).unwrap();
        assert_eq!(translator.backend_calls(), 1);
        let again = translator.translate_batch(&request).unwrap();
        assert_eq!(again, first);
        assert_eq!(translator.backend_calls(), 1, "warm run must not re-query");

        // A fresh translator over the same cache file starts warm.
        let reloaded =
            CachedTranslator::new(Box::new(event_lexicon()), Some(&cache_path)).unwrap();
        let cached = reloaded.translate_batch(&request).unwrap();
        assert_eq!(cached, first);
        assert_eq!(reloaded.backend_calls(), 0);
    }

    #[test]
    fn file_backend_misses_are_per_sentence() {
        let backend = FileBackend::from_entries([(
            ("en".to_string(), "it".to_string(), "known".to_string()),
            "noto".to_string(),
        )]);
        let translator = CachedTranslator::new(Box::new(backend), None).unwrap();
        let request =
            TranslationRequest::new(vec!["known".into(), "unknown".into()], "en", "it");
        let each = translator.translate_each(&request).unwrap();
        assert_eq!(each[0].as_ref().unwrap(), "noto");
        assert!(matches!(each[1], Err(TranslateError::CacheMiss { .. })));
        assert!(matches!(
            translator.translate_batch(&request),
            Err(TranslateError::CacheMiss { .. })
        ));
    }

    #[test]
    fn cache_file_format_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let cache_path = dir.path().join("cache.tsv");
        std::fs::write(&cache_path, "en\tit\tAny festivals this weekend\tTutti i festival questo fine settimana\n").unwrap();
        let entries = read_cache_file(&cache_path).unwrap();
        assert_eq!(
            entries[&("en".into(), "it".into(), "Any festivals this weekend".into())],
            "Tutti i festival questo fine settimana"
        );
    }
}
