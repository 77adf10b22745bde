//! Model parameters, the transformer forward pass, and decoding.

use std::collections::{BTreeSet, HashMap};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::graph::{log_softmax_row, softmax_row, Graph, NodeId};
use super::{Action, ActionSequence, ParserConfig, ParserError};
use crate::bpe::BpeModel;
use crate::dataset::{Corpus, Example};

pub const BOS_SYMBOL: &str = "<s>";
pub const EOS_SYMBOL: &str = "</s>";
pub const UNK_SYMBOL: &str = "<unk>";
pub const MASK_SYMBOL: &str = "<mask>";
const SPECIALS: [&str; 4] = [BOS_SYMBOL, EOS_SYMBOL, UNK_SYMBOL, MASK_SYMBOL];

const ATTN_MASK: f64 = -1e9;

/// Closed symbol inventory shared by the encoder input, decoder input, and
/// generation output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymbolVocab {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl SymbolVocab {
    pub fn new(symbols: impl IntoIterator<Item = String>) -> Self {
        let mut ordered: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut seen: BTreeSet<String> = ordered.iter().cloned().collect();
        let mut rest: Vec<String> = symbols
            .into_iter()
            .filter(|s| seen.insert(s.clone()))
            .collect();
        rest.sort();
        ordered.extend(rest);
        let index = ordered
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        SymbolVocab { symbols: ordered, index }
    }

    /// Trusts an already-ordered symbol list (checkpoint loading); the
    /// specials must sit at their fixed positions.
    pub fn from_ordered(symbols: Vec<String>) -> Result<Self, String> {
        for (i, special) in SPECIALS.iter().enumerate() {
            if symbols.get(i).map(String::as_str) != Some(*special) {
                return Err(format!("symbol {i} must be {special:?}"));
            }
        }
        let index = symbols
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        Ok(SymbolVocab { symbols, index })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn id(&self, sym: &str) -> Option<usize> {
        self.index.get(sym).copied()
    }

    pub fn id_or_unk(&self, sym: &str) -> usize {
        self.id(sym).unwrap_or(2)
    }

    pub fn sym(&self, id: usize) -> &str {
        &self.symbols[id]
    }

    pub fn bos_id(&self) -> usize {
        0
    }

    pub fn eos_id(&self) -> usize {
        1
    }

    pub fn unk_id(&self) -> usize {
        2
    }

    pub fn mask_id(&self) -> usize {
        3
    }
}

/// Collects every symbol the model must know: the BPE vocabulary plus all
/// symbols occurring in the given corpora's questions and MRLs.
pub fn build_vocab(corpora: &[&Corpus], bpe: &BpeModel) -> SymbolVocab {
    let mut symbols: BTreeSet<String> = bpe.vocabulary().iter().cloned().collect();
    for corpus in corpora {
        for example in &corpus.examples {
            symbols.extend(bpe.encode(&example.question_tokens));
            for token in example.mrl_string().split_whitespace() {
                symbols.extend(bpe.encode_word(token));
            }
        }
    }
    SymbolVocab::new(symbols)
}

/// Parameter groups drive the freeze mask: the source embedding and each
/// encoder layer can be frozen; decoder-side parameters always train.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    SrcEmbed,
    Encoder(usize),
    Decoder,
}

pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Array2<f64>,
}

#[derive(Clone, Copy)]
pub(crate) struct LnIdx {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Clone, Copy)]
pub(crate) struct AttnIdx {
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
}

#[derive(Clone, Copy)]
pub(crate) struct FfnIdx {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Clone, Copy)]
pub(crate) struct EncLayerIdx {
    pub ln1: LnIdx,
    pub attn: AttnIdx,
    pub ln2: LnIdx,
    pub ffn: FfnIdx,
}

#[derive(Clone, Copy)]
pub(crate) struct DecLayerIdx {
    pub ln1: LnIdx,
    pub self_attn: AttnIdx,
    pub ln2: LnIdx,
    pub cross_attn: AttnIdx,
    pub ln3: LnIdx,
    pub ffn: FfnIdx,
}

pub(crate) struct Layout {
    pub src_embed: usize,
    pub tgt_embed: usize,
    pub enc: Vec<EncLayerIdx>,
    pub enc_ln: LnIdx,
    pub dec: Vec<DecLayerIdx>,
    pub dec_ln: LnIdx,
    pub out_w: usize,
    pub out_b: usize,
    pub copy_q: usize,
    pub copy_k: usize,
}

struct ParamBuilder {
    params: Vec<Param>,
    rng: ChaCha20Rng,
}

impl ParamBuilder {
    fn xavier(&mut self, name: &str, group: ParamGroup, rows: usize, cols: usize) -> usize {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let value = Array2::from_shape_fn((rows, cols), |_| self.rng.gen_range(-limit..limit));
        self.push(name, group, value)
    }

    fn embedding(&mut self, name: &str, group: ParamGroup, rows: usize, cols: usize) -> usize {
        let value = Array2::from_shape_fn((rows, cols), |_| self.rng.gen_range(-0.05..0.05));
        self.push(name, group, value)
    }

    fn fill(&mut self, name: &str, group: ParamGroup, rows: usize, cols: usize, v: f64) -> usize {
        self.push(name, group, Array2::from_elem((rows, cols), v))
    }

    fn push(&mut self, name: &str, group: ParamGroup, value: Array2<f64>) -> usize {
        self.params.push(Param { name: name.to_string(), group, value });
        self.params.len() - 1
    }

    fn ln(&mut self, prefix: &str, group: ParamGroup, dim: usize) -> LnIdx {
        LnIdx {
            gain: self.fill(&format!("{prefix}.gain"), group, 1, dim, 1.0),
            bias: self.fill(&format!("{prefix}.bias"), group, 1, dim, 0.0),
        }
    }

    fn attn(&mut self, prefix: &str, group: ParamGroup, dim: usize) -> AttnIdx {
        AttnIdx {
            wq: self.xavier(&format!("{prefix}.wq"), group, dim, dim),
            bq: self.fill(&format!("{prefix}.bq"), group, 1, dim, 0.0),
            wk: self.xavier(&format!("{prefix}.wk"), group, dim, dim),
            bk: self.fill(&format!("{prefix}.bk"), group, 1, dim, 0.0),
            wv: self.xavier(&format!("{prefix}.wv"), group, dim, dim),
            bv: self.fill(&format!("{prefix}.bv"), group, 1, dim, 0.0),
            wo: self.xavier(&format!("{prefix}.wo"), group, dim, dim),
            bo: self.fill(&format!("{prefix}.bo"), group, 1, dim, 0.0),
        }
    }

    fn ffn(&mut self, prefix: &str, group: ParamGroup, dim: usize, hidden: usize) -> FfnIdx {
        FfnIdx {
            w1: self.xavier(&format!("{prefix}.w1"), group, dim, hidden),
            b1: self.fill(&format!("{prefix}.b1"), group, 1, hidden, 0.0),
            w2: self.xavier(&format!("{prefix}.w2"), group, hidden, dim),
            b2: self.fill(&format!("{prefix}.b2"), group, 1, dim, 0.0),
        }
    }
}

/// A training-ready example: encoded source, teacher-forcing decoder input,
/// and per-position allowed-target sets into the combined action space.
pub struct PreparedExample {
    pub id: String,
    pub src_ids: Vec<usize>,
    pub src_syms: Vec<String>,
    pub dec_input_ids: Vec<usize>,
    pub targets: Vec<Vec<usize>>,
    pub gold_mrl: String,
}

/// Cached encoder output for decoding.
pub struct EncodedSource {
    pub syms: Vec<String>,
    pub ids: Vec<usize>,
    pub enc_out: Array2<f64>,
}

impl EncodedSource {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct DecodeOptions {
    pub beam_size: usize,
    pub max_len: Option<usize>,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions { beam_size: 4, max_len: None }
    }
}

/// Decoder output plus bookkeeping.
#[derive(Debug, Clone)]
pub struct Decoded {
    pub actions: ActionSequence,
    pub mrl: String,
    /// Length-normalized log-probability.
    pub score: f64,
    /// No EOS was produced within the length budget; `mrl` is the best
    /// partial hypothesis.
    pub truncated: bool,
}

pub(crate) struct DropoutCtx<'r> {
    pub rng: &'r mut ChaCha20Rng,
    pub p: f64,
}

pub struct ParserModel {
    pub config: ParserConfig,
    pub vocab: SymbolVocab,
    pub bpe: BpeModel,
    pub train_langs: BTreeSet<String>,
    pub(crate) params: Vec<Param>,
    pub(crate) layout: Layout,
}

impl ParserModel {
    pub fn new(config: ParserConfig, vocab: SymbolVocab, bpe: BpeModel) -> Result<Self, ParserError> {
        config.validate()?;
        let dim = config.model_dim;
        let mut b = ParamBuilder {
            params: Vec::new(),
            rng: ChaCha20Rng::seed_from_u64(config.seed),
        };
        let src_embed = b.embedding("src_embed", ParamGroup::SrcEmbed, vocab.len(), dim);
        let tgt_embed = b.embedding("tgt_embed", ParamGroup::Decoder, vocab.len(), dim);
        let enc: Vec<EncLayerIdx> = (0..config.enc_layers)
            .map(|l| {
                let g = ParamGroup::Encoder(l);
                EncLayerIdx {
                    ln1: b.ln(&format!("enc{l}.ln1"), g, dim),
                    attn: b.attn(&format!("enc{l}.attn"), g, dim),
                    ln2: b.ln(&format!("enc{l}.ln2"), g, dim),
                    ffn: b.ffn(&format!("enc{l}.ffn"), g, dim, config.ffn_dim),
                }
            })
            .collect();
        let enc_ln = b.ln("enc.final_ln", ParamGroup::Encoder(config.enc_layers - 1), dim);
        let dec: Vec<DecLayerIdx> = (0..config.dec_layers)
            .map(|l| DecLayerIdx {
                ln1: b.ln(&format!("dec{l}.ln1"), ParamGroup::Decoder, dim),
                self_attn: b.attn(&format!("dec{l}.self_attn"), ParamGroup::Decoder, dim),
                ln2: b.ln(&format!("dec{l}.ln2"), ParamGroup::Decoder, dim),
                cross_attn: b.attn(&format!("dec{l}.cross_attn"), ParamGroup::Decoder, dim),
                ln3: b.ln(&format!("dec{l}.ln3"), ParamGroup::Decoder, dim),
                ffn: b.ffn(&format!("dec{l}.ffn"), ParamGroup::Decoder, dim, config.ffn_dim),
            })
            .collect();
        let dec_ln = b.ln("dec.final_ln", ParamGroup::Decoder, dim);
        let out_w = b.xavier("out.w", ParamGroup::Decoder, dim, vocab.len());
        let out_b = b.fill("out.b", ParamGroup::Decoder, 1, vocab.len(), 0.0);
        let copy_q = b.xavier("copy.wq", ParamGroup::Decoder, dim, dim);
        let copy_k = b.xavier("copy.wk", ParamGroup::Decoder, dim, dim);

        Ok(ParserModel {
            config,
            vocab,
            bpe,
            train_langs: BTreeSet::new(),
            params: b.params,
            layout: Layout {
                src_embed,
                tgt_embed,
                enc,
                enc_ln,
                dec,
                dec_ln,
                out_w,
                out_b,
                copy_q,
                copy_k,
            },
        })
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    /// Converts an example into its teacher-forcing form. With the copy
    /// mechanism enabled, a leaf subword's target set contains every source
    /// position holding that subword; disabled, it degrades to plain
    /// generation of the subword symbol.
    pub fn prepare(&self, example: &Example) -> Result<PreparedExample, ParserError> {
        let src_syms = self.bpe.encode(&example.question_tokens);
        let src_ids: Vec<usize> =
            src_syms.iter().map(|s| self.vocab.id_or_unk(s)).collect();
        let oracle = super::oracle_actions(example, &self.bpe)?;
        let v = self.vocab.len();

        let mut dec_input_ids = vec![self.vocab.bos_id()];
        let mut targets = Vec::with_capacity(oracle.len());
        for (idx, action) in oracle.0.iter().enumerate() {
            let target = match action {
                Action::Gen(sym) => vec![self.vocab.id_or_unk(sym)],
                Action::Copy(i) if self.config.use_copy => {
                    let wanted = &src_syms[*i];
                    (0..src_syms.len())
                        .filter(|&j| &src_syms[j] == wanted)
                        .map(|j| v + j)
                        .collect()
                }
                Action::Copy(i) => vec![self.vocab.id_or_unk(&src_syms[*i])],
            };
            targets.push(target);
            if idx + 1 < oracle.len() {
                dec_input_ids.push(match action {
                    Action::Gen(sym) => self.vocab.id_or_unk(sym),
                    Action::Copy(i) => src_ids[*i],
                });
            }
        }
        Ok(PreparedExample {
            id: example.id.clone(),
            src_ids,
            src_syms,
            dec_input_ids,
            targets,
            gold_mrl: example.mrl_string(),
        })
    }

    fn embed(
        &self,
        g: &mut Graph,
        table: usize,
        batch_ids: &[&[usize]],
        dropout: &mut Option<DropoutCtx>,
    ) -> (NodeId, Vec<(usize, usize)>) {
        let mut flat = Vec::new();
        let mut ranges = Vec::with_capacity(batch_ids.len());
        let mut at = 0;
        for ids in batch_ids {
            flat.extend_from_slice(ids);
            ranges.push((at, at + ids.len()));
            at += ids.len();
        }
        let table_node = g.param(table);
        let embedded = g.gather_rows(table_node, flat);
        let pe = positional_rows(batch_ids, self.config.model_dim);
        let mut x = g.add_const(embedded, &pe);
        x = self.maybe_dropout(g, x, dropout);
        (x, ranges)
    }

    fn maybe_dropout(
        &self,
        g: &mut Graph,
        x: NodeId,
        dropout: &mut Option<DropoutCtx>,
    ) -> NodeId {
        let Some(ctx) = dropout else { return x };
        if ctx.p <= 0.0 {
            return x;
        }
        let keep = 1.0 - ctx.p;
        let shape = g.value(x).raw_dim();
        let mask = Array2::from_shape_fn(shape, |_| {
            if ctx.rng.gen::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        g.dropout(x, mask)
    }

    /// Block-wise multi-head attention over a batch laid out as
    /// concatenated rows. Queries and keys/values may come from different
    /// matrices (cross-attention); each example attends only within its own
    /// block.
    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        g: &mut Graph,
        attn: &AttnIdx,
        q_input: NodeId,
        kv_input: NodeId,
        q_ranges: &[(usize, usize)],
        kv_ranges: &[(usize, usize)],
        causal: bool,
    ) -> NodeId {
        let heads = self.config.heads;
        let dh = self.config.model_dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let wq = g.param(attn.wq);
        let bq = g.param(attn.bq);
        let wk = g.param(attn.wk);
        let bk = g.param(attn.bk);
        let wv = g.param(attn.wv);
        let bv = g.param(attn.bv);
        let q_all = g.matmul(q_input, wq);
        let q_all = g.add_row(q_all, bq);
        let k_all = g.matmul(kv_input, wk);
        let k_all = g.add_row(k_all, bk);
        let v_all = g.matmul(kv_input, wv);
        let v_all = g.add_row(v_all, bv);

        let mut example_outputs = Vec::with_capacity(q_ranges.len());
        for (&(qs, qe), &(ks, ke)) in q_ranges.iter().zip(kv_ranges) {
            let q = g.slice_rows(q_all, qs, qe);
            let k = g.slice_rows(k_all, ks, ke);
            let v = g.slice_rows(v_all, ks, ke);
            let mask = causal.then(|| causal_mask(qe - qs));
            let mut head_outputs = Vec::with_capacity(heads);
            for h in 0..heads {
                let qh = g.slice_cols(q, h * dh, (h + 1) * dh);
                let kh = g.slice_cols(k, h * dh, (h + 1) * dh);
                let vh = g.slice_cols(v, h * dh, (h + 1) * dh);
                let mut scores = g.matmul_tb(qh, kh);
                scores = g.scale(scores, scale);
                if let Some(mask) = &mask {
                    scores = g.add_const(scores, mask);
                }
                let weights = g.softmax_rows(scores);
                head_outputs.push(g.matmul(weights, vh));
            }
            example_outputs.push(g.concat_cols(head_outputs));
        }
        let joined = g.concat_rows(example_outputs);
        let wo = g.param(attn.wo);
        let bo = g.param(attn.bo);
        let projected = g.matmul(joined, wo);
        g.add_row(projected, bo)
    }

    fn ffn(&self, g: &mut Graph, ffn: &FfnIdx, x: NodeId) -> NodeId {
        let w1 = g.param(ffn.w1);
        let b1 = g.param(ffn.b1);
        let w2 = g.param(ffn.w2);
        let b2 = g.param(ffn.b2);
        let h = g.matmul(x, w1);
        let h = g.add_row(h, b1);
        let h = g.gelu(h);
        let out = g.matmul(h, w2);
        g.add_row(out, b2)
    }

    fn ln(&self, g: &mut Graph, ln: &LnIdx, x: NodeId) -> NodeId {
        let gain = g.param(ln.gain);
        let bias = g.param(ln.bias);
        g.layer_norm(x, gain, bias)
    }

    /// Pre-norm encoder over a batch; returns the normalized output and the
    /// per-example row ranges.
    pub(crate) fn encoder_nodes(
        &self,
        g: &mut Graph,
        batch_src: &[&[usize]],
        dropout: &mut Option<DropoutCtx>,
    ) -> (NodeId, Vec<(usize, usize)>) {
        let (mut x, ranges) = self.embed(g, self.layout.src_embed, batch_src, dropout);
        let enc_layers = self.layout.enc.clone();
        for layer in &enc_layers {
            let normed = self.ln(g, &layer.ln1, x);
            let attn =
                self.attention(g, &layer.attn, normed, normed, &ranges, &ranges, false);
            let attn = self.maybe_dropout(g, attn, dropout);
            x = g.add(x, attn);
            let normed2 = self.ln(g, &layer.ln2, x);
            let ffn = self.ffn(g, &layer.ffn, normed2);
            let ffn = self.maybe_dropout(g, ffn, dropout);
            x = g.add(x, ffn);
        }
        let out = self.ln(g, &self.layout.enc_ln, x);
        (out, ranges)
    }

    /// Pre-norm decoder with causal self-attention and cross-attention into
    /// the encoder output.
    pub(crate) fn decoder_nodes(
        &self,
        g: &mut Graph,
        enc_out: NodeId,
        enc_ranges: &[(usize, usize)],
        batch_dec: &[&[usize]],
        dropout: &mut Option<DropoutCtx>,
    ) -> (NodeId, Vec<(usize, usize)>) {
        let (mut x, ranges) = self.embed(g, self.layout.tgt_embed, batch_dec, dropout);
        let dec_layers = self.layout.dec.clone();
        for layer in &dec_layers {
            let normed = self.ln(g, &layer.ln1, x);
            let self_attn =
                self.attention(g, &layer.self_attn, normed, normed, &ranges, &ranges, true);
            let self_attn = self.maybe_dropout(g, self_attn, dropout);
            x = g.add(x, self_attn);
            let normed2 = self.ln(g, &layer.ln2, x);
            let cross = self.attention(
                g,
                &layer.cross_attn,
                normed2,
                enc_out,
                &ranges,
                enc_ranges,
                false,
            );
            let cross = self.maybe_dropout(g, cross, dropout);
            x = g.add(x, cross);
            let normed3 = self.ln(g, &layer.ln3, x);
            let ffn = self.ffn(g, &layer.ffn, normed3);
            let ffn = self.maybe_dropout(g, ffn, dropout);
            x = g.add(x, ffn);
        }
        let out = self.ln(g, &self.layout.dec_ln, x);
        (out, ranges)
    }

    /// Per-example combined logits: vocabulary logits concatenated with the
    /// copy scorer's raw attention scores (when the pointer mechanism is
    /// enabled).
    pub(crate) fn combined_logits(
        &self,
        g: &mut Graph,
        dec_out: NodeId,
        dec_ranges: &[(usize, usize)],
        enc_out: NodeId,
        enc_ranges: &[(usize, usize)],
    ) -> Vec<NodeId> {
        let out_w = g.param(self.layout.out_w);
        let out_b = g.param(self.layout.out_b);
        let logits_all = g.matmul(dec_out, out_w);
        let logits_all = g.add_row(logits_all, out_b);

        if !self.config.use_copy {
            return dec_ranges
                .iter()
                .map(|&(s, e)| g.slice_rows(logits_all, s, e))
                .collect();
        }

        let copy_q = g.param(self.layout.copy_q);
        let copy_k = g.param(self.layout.copy_k);
        let cq_all = g.matmul(dec_out, copy_q);
        let ck_all = g.matmul(enc_out, copy_k);
        let scale = 1.0 / (self.config.model_dim as f64).sqrt();

        dec_ranges
            .iter()
            .zip(enc_ranges)
            .map(|(&(ds, de), &(es, ee))| {
                let logits = g.slice_rows(logits_all, ds, de);
                let cq = g.slice_rows(cq_all, ds, de);
                let ck = g.slice_rows(ck_all, es, ee);
                let scores = g.matmul_tb(cq, ck);
                let scores = g.scale(scores, scale);
                g.concat_cols(vec![logits, scores])
            })
            .collect()
    }

    /// Mean teacher-forcing loss over all target positions in the batch.
    /// Returns the loss node and the number of target rows.
    pub(crate) fn batch_loss_node(
        &self,
        g: &mut Graph,
        batch: &[&PreparedExample],
        mut dropout: Option<DropoutCtx>,
    ) -> (NodeId, usize) {
        let src: Vec<&[usize]> = batch.iter().map(|e| e.src_ids.as_slice()).collect();
        let dec: Vec<&[usize]> = batch.iter().map(|e| e.dec_input_ids.as_slice()).collect();
        let (enc_out, enc_ranges) = self.encoder_nodes(g, &src, &mut dropout);
        let (dec_out, dec_ranges) =
            self.decoder_nodes(g, enc_out, &enc_ranges, &dec, &mut dropout);
        let combined = self.combined_logits(g, dec_out, &dec_ranges, enc_out, &enc_ranges);

        let mut nlls = Vec::with_capacity(batch.len());
        let mut rows = 0usize;
        for (example, logits) in batch.iter().zip(combined) {
            rows += example.targets.len();
            nlls.push(g.marginal_nll(logits, example.targets.clone()));
        }
        let total = g.add_n(nlls);
        (g.scale(total, 1.0 / rows.max(1) as f64), rows)
    }

    /// Forward-only mean loss on a batch (no dropout).
    pub fn batch_loss(&self, batch: &[&PreparedExample]) -> f64 {
        let mut g = Graph::new(&self.params);
        let (loss, _) = self.batch_loss_node(&mut g, batch, None);
        g.value(loss)[[0, 0]]
    }

    /// Mean loss and per-parameter gradients on a batch (no dropout; the
    /// trainer passes dropout through its own RNG).
    pub fn batch_loss_and_grads(
        &self,
        batch: &[&PreparedExample],
    ) -> (f64, Vec<Option<Array2<f64>>>) {
        let mut g = Graph::new(&self.params);
        let (loss, _) = self.batch_loss_node(&mut g, batch, None);
        let value = g.value(loss)[[0, 0]];
        (value, g.backward(loss))
    }

    /// Runs the encoder once for decoding.
    pub fn encode_source(&self, question_tokens: &[String]) -> EncodedSource {
        assert!(!question_tokens.is_empty(), "cannot encode an empty question");
        let syms = self.bpe.encode(question_tokens);
        let ids: Vec<usize> = syms.iter().map(|s| self.vocab.id_or_unk(s)).collect();
        let mut g = Graph::new(&self.params);
        let (enc_out, _) = self.encoder_nodes(&mut g, &[ids.as_slice()], &mut None);
        EncodedSource { syms, ids, enc_out: g.value(enc_out).clone() }
    }

    /// Raw combined logits for the next action after `prefix`.
    fn step_logits(&self, src: &EncodedSource, prefix: &[Action]) -> Vec<f64> {
        let mut dec_input = Vec::with_capacity(prefix.len() + 1);
        dec_input.push(self.vocab.bos_id());
        for action in prefix {
            dec_input.push(match action {
                Action::Gen(sym) => self.vocab.id_or_unk(sym),
                Action::Copy(i) => src.ids[*i],
            });
        }
        let mut g = Graph::new(&self.params);
        let enc_node = g.constant(src.enc_out.clone());
        let enc_ranges = [(0, src.len())];
        let (dec_out, dec_ranges) =
            self.decoder_nodes(&mut g, enc_node, &enc_ranges, &[dec_input.as_slice()], &mut None);
        let combined =
            self.combined_logits(&mut g, dec_out, &dec_ranges, enc_node, &enc_ranges);
        let logits = g.value(combined[0]);
        logits.row(logits.nrows() - 1).to_vec()
    }

    /// Probability distribution over the combined action space
    /// (`|V| + source_len` entries when the pointer mechanism is on) given
    /// a decoded prefix.
    pub fn action_distribution(&self, src: &EncodedSource, prefix: &[Action]) -> Vec<f64> {
        softmax_row(&self.step_logits(src, prefix))
    }

    /// Combined-space indices the decoder may emit: everything except the
    /// bookkeeping symbols.
    pub fn decode_action_space(&self, source_len: usize) -> Vec<usize> {
        let v = self.vocab.len();
        let width = if self.config.use_copy { v + source_len } else { v };
        (0..width)
            .filter(|&a| a != self.vocab.bos_id() && a != self.vocab.mask_id())
            .collect()
    }

    fn action_of(&self, combined_index: usize) -> Action {
        if combined_index < self.vocab.len() {
            Action::Gen(self.vocab.sym(combined_index).to_string())
        } else {
            Action::Copy(combined_index - self.vocab.len())
        }
    }

    /// Step-wise argmax decoding; ties go to the smallest action index.
    pub fn decode_greedy(&self, question_tokens: &[String]) -> Decoded {
        let src = self.encode_source(question_tokens);
        let allowed = self.decode_action_space(src.len());
        let max_len = self.config.max_decode_len;
        let eos = self.vocab.eos_id();

        let mut actions: Vec<Action> = Vec::new();
        let mut logp = 0.0;
        let mut truncated = true;
        for _ in 0..max_len {
            let lp = log_softmax_row(&self.step_logits(&src, &actions));
            let mut best = allowed[0];
            for &a in &allowed[1..] {
                if lp[a] > lp[best] {
                    best = a;
                }
            }
            logp += lp[best];
            actions.push(self.action_of(best));
            if best == eos {
                truncated = false;
                break;
            }
        }
        let actions = ActionSequence(actions);
        let mrl = super::detokenize_actions(&actions, &src.syms, &self.bpe);
        let score = logp / actions.len().max(1) as f64;
        Decoded { actions, mrl, score, truncated }
    }

    /// Length-normalized beam search (`score = log-prob / length`).
    ///
    /// A hypothesis that emits EOS finishes and holds its beam slot; the
    /// search stops when every slot is finished or the length budget runs
    /// out. With `beam_size = 1` this reduces exactly to greedy decoding.
    pub fn decode_beam(&self, question_tokens: &[String], opts: &DecodeOptions) -> Decoded {
        let src = self.encode_source(question_tokens);
        let allowed = self.decode_action_space(src.len());
        let max_len = opts.max_len.unwrap_or(self.config.max_decode_len);
        let beam_size = opts.beam_size.max(1);
        let eos = self.vocab.eos_id();

        #[derive(Clone)]
        struct Hyp {
            actions: Vec<usize>,
            logp: f64,
            finished: bool,
        }
        let norm = |h: &Hyp| h.logp / h.actions.len().max(1) as f64;

        let mut beams = vec![Hyp { actions: Vec::new(), logp: 0.0, finished: false }];
        for _ in 0..max_len {
            if beams.iter().all(|h| h.finished) {
                break;
            }
            let mut candidates: Vec<Hyp> = Vec::new();
            for hyp in &beams {
                if hyp.finished {
                    candidates.push(hyp.clone());
                    continue;
                }
                let prefix: Vec<Action> =
                    hyp.actions.iter().map(|&a| self.action_of(a)).collect();
                let lp = log_softmax_row(&self.step_logits(&src, &prefix));
                for &a in &allowed {
                    let mut actions = hyp.actions.clone();
                    actions.push(a);
                    candidates.push(Hyp {
                        actions,
                        logp: hyp.logp + lp[a],
                        finished: a == eos,
                    });
                }
            }
            // Stable sort: ties keep candidate order (hyp order, then
            // action order), matching the greedy tie-break at width 1.
            candidates.sort_by(|a, b| {
                norm(b).partial_cmp(&norm(a)).unwrap_or(std::cmp::Ordering::Equal)
            });
            candidates.truncate(beam_size);
            beams = candidates;
        }

        let best = beams
            .iter()
            .filter(|h| h.finished)
            .chain(beams.iter())
            .next()
            .expect("at least one hypothesis");
        let truncated = !best.finished;
        let score = norm(best);
        let actions = ActionSequence(
            best.actions.iter().map(|&a| self.action_of(a)).collect(),
        );
        let mrl = super::detokenize_actions(&actions, &src.syms, &self.bpe);
        Decoded { actions, mrl, score, truncated }
    }
}

fn causal_mask(len: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, len), |(i, j)| if j > i { ATTN_MASK } else { 0.0 })
}

/// Sinusoidal position encodings for a batch of row-concatenated examples.
fn positional_rows(batch: &[&[usize]], dim: usize) -> Array2<f64> {
    let total: usize = batch.iter().map(|ids| ids.len()).sum();
    let mut pe = Array2::zeros((total, dim));
    let mut row = 0;
    for ids in batch {
        for pos in 0..ids.len() {
            for i in 0..dim / 2 {
                let rate = pos as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
                pe[[row, 2 * i]] = rate.sin();
                pe[[row, 2 * i + 1]] = rate.cos();
            }
            row += 1;
        }
    }
    pe
}
