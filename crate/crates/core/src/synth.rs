//! Deterministic toy-grammar corpora.
//!
//! A small two-intent event/alarm grammar over a closed ~40-word
//! vocabulary, with an optional open-vocabulary mode whose slot fillers are
//! generated letter strings (train and dev pools disjoint by
//! construction). Also provides a bijective word lexicon for the dict
//! translation backend and a "cognate" transformation that suffixes
//! open-class words, giving a second language that shares subword
//! structure with the first.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::dataset::{Corpus, Example, Provenance, Split};
use crate::mrl::{MrlLabel, MrlNode, MrlTree};

const CATEGORIES: [&str; 5] = ["concerts", "festivals", "movies", "fairs", "parades"];
const DATES: [&str; 5] = ["tonight", "tomorrow", "this weekend", "next friday", "this evening"];
const LOCATIONS: [&str; 4] = ["downtown", "berlin", "chinatown", "the park"];
const NAMES: [&str; 3] = ["beyonce", "coldplay", "picasso"];
const ALARMS: [&str; 3] = ["workout", "standup", "meeting"];

/// Closed-class words: untouched by the cognate transformation. Verbs and
/// other intent-bearing words are deliberately open-class so a cognate
/// language differs where it matters.
pub const FUNCTION_WORDS: [&str; 14] = [
    "me", "any", "at", "by", "are", "there", "near", "an", "called", "for", "a", "this",
    "next", "the",
];

struct Template {
    intent: &'static str,
    /// Mix of literal words and slot references.
    parts: &'static [Part],
}

enum Part {
    Lit(&'static str),
    Slot(&'static str),
}

use Part::{Lit, Slot};

const TEMPLATES: [Template; 7] = [
    Template {
        intent: "IN:GET_EVENT",
        parts: &[Lit("show me"), Slot("SL:CATEGORY_EVENT"), Slot("SL:DATE_TIME")],
    },
    Template {
        intent: "IN:GET_EVENT",
        parts: &[
            Lit("any"),
            Slot("SL:CATEGORY_EVENT"),
            Lit("at"),
            Slot("SL:LOCATION"),
            Slot("SL:DATE_TIME"),
        ],
    },
    Template {
        intent: "IN:GET_EVENT",
        parts: &[
            Lit("find"),
            Slot("SL:CATEGORY_EVENT"),
            Lit("by"),
            Slot("SL:NAME_EVENT"),
            Slot("SL:DATE_TIME"),
        ],
    },
    Template {
        intent: "IN:GET_EVENT",
        parts: &[
            Lit("are there"),
            Slot("SL:CATEGORY_EVENT"),
            Lit("near"),
            Slot("SL:LOCATION"),
        ],
    },
    Template {
        intent: "IN:CREATE_ALARM",
        parts: &[
            Lit("set an alarm called"),
            Slot("SL:ALARM_NAME"),
            Lit("for"),
            Slot("SL:DATE_TIME"),
        ],
    },
    Template {
        intent: "IN:CREATE_ALARM",
        parts: &[Lit("make a"), Slot("SL:ALARM_NAME"), Lit("alarm"), Slot("SL:DATE_TIME")],
    },
    Template {
        intent: "IN:CREATE_ALARM",
        parts: &[Lit("wake me for"), Slot("SL:ALARM_NAME"), Slot("SL:DATE_TIME")],
    },
];

/// Where open-class slot fillers come from.
#[derive(Debug, Clone)]
pub enum SlotFillers {
    /// The fixed closed-vocabulary lists.
    Closed,
    /// Generated letter-string pools for CATEGORY / NAME / ALARM slots;
    /// dates and locations stay closed.
    Open(Vec<String>),
}

/// Two disjoint filler pools derived from one seed (e.g. train vs dev).
pub fn open_pools(seed: u64, size: usize) -> (Vec<String>, Vec<String>) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut seen = BTreeSet::new();
    let mut words = Vec::new();
    while words.len() < 2 * size {
        let len = rng.gen_range(4..=7usize);
        let word: String =
            (0..len).map(|_| (b'a' + rng.gen_range(0..26u8)) as char).collect();
        if FUNCTION_WORDS.contains(&word.as_str()) {
            continue;
        }
        if seen.insert(word.clone()) {
            words.push(word);
        }
    }
    let second = words.split_off(size);
    (words, second)
}

fn filler<'a>(
    slot: &str,
    fillers: &'a SlotFillers,
    rng: &mut ChaCha20Rng,
) -> String {
    let closed: &[&str] = match slot {
        "SL:CATEGORY_EVENT" => &CATEGORIES,
        "SL:DATE_TIME" => &DATES,
        "SL:LOCATION" => &LOCATIONS,
        "SL:NAME_EVENT" => &NAMES,
        "SL:ALARM_NAME" => &ALARMS,
        other => panic!("unknown slot {other}"),
    };
    match fillers {
        SlotFillers::Closed => closed.choose(rng).unwrap().to_string(),
        SlotFillers::Open(pool)
            if matches!(slot, "SL:CATEGORY_EVENT" | "SL:NAME_EVENT" | "SL:ALARM_NAME") =>
        {
            pool.choose(rng).unwrap().clone()
        }
        SlotFillers::Open(_) => closed.choose(rng).unwrap().to_string(),
    }
}

/// Generates a corpus from the grammar. Deterministic in `(n, seed,
/// fillers)`.
pub fn generate_corpus(
    split: Split,
    lang: &str,
    n: usize,
    seed: u64,
    fillers: &SlotFillers,
) -> Corpus {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut corpus = Corpus::new(split);
    for i in 0..n {
        let template = &TEMPLATES[rng.gen_range(0..TEMPLATES.len())];
        let mut question: Vec<String> = Vec::new();
        let mut root = MrlNode::new(MrlLabel::intent(template.intent));
        for part in template.parts {
            match part {
                Part::Lit(words) => {
                    question.extend(words.split_whitespace().map(String::from))
                }
                Part::Slot(slot) => {
                    let value = filler(slot, fillers, &mut rng);
                    let tokens: Vec<String> =
                        value.split_whitespace().map(String::from).collect();
                    question.extend(tokens.clone());
                    let mut node = MrlNode::new(MrlLabel::slot(slot));
                    node.text = tokens;
                    root.children.push(node);
                }
            }
        }
        corpus.examples.push(Example {
            id: format!("{}-{}", split.as_str(), i + 1),
            lang: lang.to_string(),
            question_tokens: question,
            mrl: MrlTree { root },
            provenance: Provenance::Synthetic,
            meta: BTreeMap::new(),
        });
    }
    corpus
}

/// Every surface word the closed grammar can produce, sorted.
pub fn closed_vocabulary() -> Vec<String> {
    let mut words: BTreeSet<String> = FUNCTION_WORDS.iter().map(|w| w.to_string()).collect();
    for list in [&CATEGORIES[..], &DATES[..], &LOCATIONS[..], &NAMES[..], &ALARMS[..]] {
        for value in list {
            words.extend(value.split_whitespace().map(String::from));
        }
    }
    words.into_iter().collect()
}

/// One-to-one word mapping used with the dict backend: `w -> wx`.
pub fn bijective_lexicon() -> Vec<(String, String)> {
    closed_vocabulary().into_iter().map(|w| (w.clone(), format!("{w}x"))).collect()
}

/// Random monotone sentence pairs under the bijective lexicon; the gold
/// alignment of every pair is the identity.
pub fn monotone_pairs(n: usize, seed: u64) -> Vec<(Vec<String>, Vec<String>)> {
    let vocab = closed_vocabulary();
    let map: BTreeMap<&str, String> = bijective_lexicon()
        .into_iter()
        .zip(vocab.iter())
        .map(|((_, tgt), src)| (src.as_str(), tgt))
        .collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.gen_range(3..=9usize);
            let src: Vec<String> =
                (0..len).map(|_| vocab[rng.gen_range(0..vocab.len())].clone()).collect();
            let tgt: Vec<String> = src.iter().map(|w| map[w.as_str()].clone()).collect();
            (src, tgt)
        })
        .collect()
}

/// Cognate form of one word: open-class words take a suffix, closed-class
/// words pass through.
pub fn cognate_word(word: &str) -> String {
    if FUNCTION_WORDS.contains(&word) {
        word.to_string()
    } else {
        format!("{word}u")
    }
}

/// Rewrites an example into the cognate language: question tokens and MRL
/// leaf text both transform, labels and structure stay fixed.
pub fn to_cognate_example(example: &Example, lang: &str) -> Example {
    fn walk(node: &mut MrlNode) {
        for t in &mut node.text {
            *t = cognate_word(t);
        }
        for c in &mut node.children {
            walk(c);
        }
    }
    let mut out = example.clone();
    out.lang = lang.to_string();
    out.id = format!("{}-{}", example.id, lang);
    out.question_tokens = example.question_tokens.iter().map(|w| cognate_word(w)).collect();
    walk(&mut out.mrl.root);
    out
}

pub fn to_cognate_corpus(corpus: &Corpus, lang: &str) -> Corpus {
    Corpus {
        split: corpus.split,
        examples: corpus.examples.iter().map(|e| to_cognate_example(e, lang)).collect(),
    }
}
