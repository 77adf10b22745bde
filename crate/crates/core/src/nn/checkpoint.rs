//! Checkpoint file: a self-describing JSON header line (config, vocabulary,
//! BPE merges, parameter shapes) followed by raw little-endian `f64`
//! parameter data in layout order.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::model::{ParserModel, SymbolVocab};
use super::{ParserConfig, ParserError};
use crate::bpe::BpeModel;

const FORMAT: &str = "semparse-checkpoint";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct BpeSpec {
    marker: String,
    merges: Vec<(String, String)>,
}

#[derive(Serialize, Deserialize)]
struct ParamSpec {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config: ParserConfig,
    train_langs: BTreeSet<String>,
    vocab: Vec<String>,
    bpe: BpeSpec,
    params: Vec<ParamSpec>,
}

pub fn save_checkpoint(model: &ParserModel, path: &Path) -> Result<(), ParserError> {
    let io_err = |e: std::io::Error| ParserError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let header = Header {
        format: FORMAT.to_string(),
        version: VERSION,
        config: model.config.clone(),
        train_langs: model.train_langs.clone(),
        vocab: model.vocab.symbols().to_vec(),
        bpe: BpeSpec {
            marker: model.bpe.marker().to_string(),
            merges: model.bpe.merges().to_vec(),
        },
        params: model
            .params()
            .iter()
            .map(|p| ParamSpec {
                name: p.name.clone(),
                rows: p.value.nrows(),
                cols: p.value.ncols(),
            })
            .collect(),
    };
    let file = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, &header)
        .map_err(|e| ParserError::CheckpointError(e.to_string()))?;
    w.write_all(b"\n").map_err(io_err)?;
    for param in model.params() {
        for &v in param.value.iter() {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

pub fn load_checkpoint(path: &Path) -> Result<ParserModel, ParserError> {
    let io_err = |e: std::io::Error| ParserError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let file = File::open(path).map_err(io_err)?;
    let mut r = BufReader::new(file);

    let mut header_bytes = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        r.read_exact(&mut byte).map_err(io_err)?;
        if byte[0] == b'\n' {
            break;
        }
        header_bytes.push(byte[0]);
    }
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| ParserError::CheckpointError(format!("bad header: {e}")))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(ParserError::CheckpointError(format!(
            "unsupported checkpoint {}/{}",
            header.format, header.version
        )));
    }

    let vocab = SymbolVocab::from_ordered(header.vocab)
        .map_err(ParserError::CheckpointError)?;
    let bpe = BpeModel::new(&header.bpe.marker, header.bpe.merges);
    let mut model = ParserModel::new(header.config, vocab, bpe)?;
    model.train_langs = header.train_langs;

    if header.params.len() != model.params().len() {
        return Err(ParserError::CheckpointError(format!(
            "parameter count mismatch: file has {}, layout needs {}",
            header.params.len(),
            model.params().len()
        )));
    }
    for (spec, param) in header.params.iter().zip(model.params_mut()) {
        if spec.name != param.name
            || spec.rows != param.value.nrows()
            || spec.cols != param.value.ncols()
        {
            return Err(ParserError::CheckpointError(format!(
                "parameter {} with shape {}x{} does not match layout {} ({}x{})",
                spec.name,
                spec.rows,
                spec.cols,
                param.name,
                param.value.nrows(),
                param.value.ncols()
            )));
        }
        let mut data = vec![0u8; spec.rows * spec.cols * 8];
        r.read_exact(&mut data).map_err(io_err)?;
        let values: Vec<f64> = data
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        param.value = Array2::from_shape_vec((spec.rows, spec.cols), values)
            .map_err(|e| ParserError::CheckpointError(e.to_string()))?;
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(io_err)?;
    if !rest.is_empty() {
        return Err(ParserError::CheckpointError(format!(
            "{} trailing bytes after parameter data",
            rest.len()
        )));
    }
    Ok(model)
}
