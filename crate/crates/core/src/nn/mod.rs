//! The neural semantic parser: a transformer encoder-decoder whose decoder
//! acts over a combined space of vocabulary symbols and copy pointers into
//! the source question.
//!
//! At each step the decoder's vocabulary logits are concatenated with the
//! raw attention scores of a dedicated copy scorer and normalized together,
//! so one softmax covers "generate this symbol" and "copy source position
//! i" jointly. Training uses teacher forcing with a sum-marginal loss over
//! all source positions holding the gold subword; inference is
//! length-normalized beam search.

mod checkpoint;
mod graph;
mod model;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use model::{
    build_vocab, DecodeOptions, Decoded, EncodedSource, Param, ParamGroup, ParserModel,
    SymbolVocab, BOS_SYMBOL, EOS_SYMBOL, MASK_SYMBOL, UNK_SYMBOL,
};
pub use train::{
    freeze_mask_for_epoch, mlm_pretrain, train_parser, EpochRecord, MlmHistory, TrainHistory,
    UnfreezeSchedule,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bpe::BpeModel;
use crate::dataset::Example;
use crate::mrl;

#[derive(Debug, Error)]
pub enum ParserError {
    #[error("leaf subword {subword:?} not found in the encoded source after position {from}")]
    CopyTargetNotFound { subword: String, from: usize },
    #[error("every training example was skipped (no oracle action sequence)")]
    AllExamplesSkipped,
    #[error("loss diverged (non-finite) at epoch {epoch}")]
    DivergedLoss { epoch: usize },
    #[error("bad checkpoint: {0}")]
    CheckpointError(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParserConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub max_decode_len: usize,
    pub beam_size: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Early-stopping patience in epochs without a dev-loss improvement.
    pub patience: usize,
    /// Upper bound on training epochs.
    pub max_epochs: usize,
    /// Disables the pointer mechanism (ablation): leaf subwords become
    /// plain generation targets.
    pub use_copy: bool,
    pub seed: u64,
}

impl Default for ParserConfig {
    fn default() -> Self {
        ParserConfig {
            enc_layers: 2,
            dec_layers: 2,
            model_dim: 128,
            heads: 4,
            ffn_dim: 256,
            dropout: 0.1,
            max_decode_len: 64,
            beam_size: 4,
            learning_rate: 3e-4,
            batch_size: 32,
            patience: 5,
            max_epochs: 50,
            use_copy: true,
            seed: 0,
        }
    }
}

impl ParserConfig {
    pub fn validate(&self) -> Result<(), ParserError> {
        if self.model_dim == 0 || self.model_dim % self.heads != 0 {
            return Err(ParserError::InvalidConfig(format!(
                "model_dim {} must be a positive multiple of heads {}",
                self.model_dim, self.heads
            )));
        }
        for (name, value) in [
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("max_decode_len", self.max_decode_len),
            ("beam_size", self.beam_size),
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
        ] {
            if value == 0 {
                return Err(ParserError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.dropout) {
            return Err(ParserError::InvalidConfig(
                "learning_rate must be > 0 and dropout in [0,1)".into(),
            ));
        }
        Ok(())
    }
}

/// One decoder action: emit a vocabulary symbol or copy a source position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    Gen(String),
    Copy(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ActionSequence(pub Vec<Action>);

impl ActionSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Builds the teacher-forcing target for an example: structural and
/// generated symbols become [`Action::Gen`], leaf-text subwords become
/// [`Action::Copy`] resolved by leftmost match after the previous copy,
/// and the sequence ends with `Gen(EOS)`.
pub fn oracle_actions(example: &Example, bpe: &BpeModel) -> Result<ActionSequence, ParserError> {
    let source_syms = bpe.encode(&example.question_tokens);
    let mut actions = Vec::new();
    let mut cursor = 0usize;

    let mrl_string = mrl::serialize_mrl(&example.mrl);
    for token in mrl_string.split_whitespace() {
        if crate::bpe::is_reserved_token(token) {
            actions.push(Action::Gen(token.to_string()));
            continue;
        }
        for subword in bpe.encode_word(token) {
            let found = (cursor..source_syms.len()).find(|&j| source_syms[j] == subword);
            match found {
                Some(j) => {
                    actions.push(Action::Copy(j));
                    cursor = j + 1;
                }
                None => {
                    return Err(ParserError::CopyTargetNotFound {
                        subword,
                        from: cursor,
                    })
                }
            }
        }
    }
    actions.push(Action::Gen(EOS_SYMBOL.to_string()));
    Ok(ActionSequence(actions))
}

/// Maps an action sequence back to an MRL string: copies resolve to the
/// source subword at their position, then BPE decoding joins subwords.
pub fn detokenize_actions(
    actions: &ActionSequence,
    source_syms: &[String],
    bpe: &BpeModel,
) -> String {
    let mut symbols = Vec::with_capacity(actions.len());
    for action in &actions.0 {
        match action {
            Action::Gen(sym) => {
                if sym != EOS_SYMBOL && sym != BOS_SYMBOL && sym != MASK_SYMBOL {
                    symbols.push(sym.clone());
                }
            }
            Action::Copy(i) => {
                if let Some(sym) = source_syms.get(*i) {
                    symbols.push(sym.clone());
                }
            }
        }
    }
    bpe.decode(&symbols).join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bpe::{learn_bpe, BpeModel};
    use crate::dataset::Provenance;
    use crate::mrl::parse_mrl;
    use std::collections::BTreeMap;

    fn word_level_bpe() -> BpeModel {
        // Enough merges that every fixture word becomes a single symbol.
        let mut freqs = BTreeMap::new();
        for w in ["Any", "festivals", "this", "weekend"] {
            freqs.insert(w.to_string(), 50);
        }
        learn_bpe(&freqs, 200).unwrap()
    }

    fn event_example() -> Example {
        Example {
            id: "t".into(),
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

    #[test]
    fn oracle_actions_on_event_fixture() {
        let bpe = word_level_bpe();
        let example = event_example();
        let actions = oracle_actions(&example, &bpe).unwrap();
        // Word-level segmentation: one symbol per word plus markers makes
        // each word exactly one source position in 0,1,2,3 order.
        let src = bpe.encode(&example.question_tokens);
        assert_eq!(src.len(), 4, "fixture expects word-level symbols, got {src:?}");
        assert_eq!(
            actions.0,
            vec![
                Action::Gen("[IN:GET_EVENT".into()),
                Action::Gen("[SL:CATEGORY_EVENT".into()),
                Action::Copy(1),
                Action::Gen("]".into()),
                Action::Gen("[SL:DATE_TIME".into()),
                Action::Copy(2),
                Action::Copy(3),
                Action::Gen("]".into()),
                Action::Gen("]".into()),
                Action::Gen(EOS_SYMBOL.into()),
            ]
        );
    }

    #[test]
    fn oracle_roundtrips_through_detokenize() {
        let bpe = word_level_bpe();
        let example = event_example();
        let actions = oracle_actions(&example, &bpe).unwrap();
        let src = bpe.encode(&example.question_tokens);
        assert_eq!(detokenize_actions(&actions, &src, &bpe), example.mrl_string());
    }

    #[test]
    fn leafless_mrl_is_all_gen() {
        let bpe = word_level_bpe();
        let mut example = event_example();
        example.mrl = parse_mrl("[IN:GET_EVENT ]").unwrap();
        let actions = oracle_actions(&example, &bpe).unwrap();
        assert!(actions.0.iter().all(|a| matches!(a, Action::Gen(_))));
    }

    #[test]
    fn missing_leaf_token_is_an_error() {
        let bpe = word_level_bpe();
        let mut example = event_example();
        example.mrl = parse_mrl("[IN:GET_EVENT [SL:DATE_TIME tomorrow ] ]").unwrap();
        assert!(matches!(
            oracle_actions(&example, &bpe),
            Err(ParserError::CopyTargetNotFound { .. })
        ));
    }

    #[test]
    fn oracle_roundtrip_with_subword_segmentation() {
        // Few merges: words split into several subword symbols; the
        // round trip must still be exact.
        let mut freqs = BTreeMap::new();
        for w in ["Any", "festivals", "this", "weekend"] {
            freqs.insert(w.to_string(), 3);
        }
        let bpe = learn_bpe(&freqs, 3).unwrap();
        let example = event_example();
        let actions = oracle_actions(&example, &bpe).unwrap();
        let src = bpe.encode(&example.question_tokens);
        assert!(actions.0.iter().any(|a| matches!(a, Action::Copy(_))));
        assert_eq!(detokenize_actions(&actions, &src, &bpe), example.mrl_string());
    }

    #[test]
    fn config_validation() {
        let mut config = ParserConfig::default();
        assert!(config.validate().is_ok());
        config.model_dim = 30; // not a multiple of heads=4
        assert!(config.validate().is_err());
        config = ParserConfig { dropout: 1.0, ..Default::default() };
        assert!(config.validate().is_err());
    }
}
