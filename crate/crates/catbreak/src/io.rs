//! On-disk formats: JSON-Lines datasets, raw-payload embedding tables, and
//! model files.
//!
//! Binary files carry a single-line JSON header followed by a flat
//! little-endian 64-bit float payload; the header declares every shape so
//! the payload length is fully determined before reading.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::categorical::{EmbeddingTable, Instance};
use crate::classifier::{Classifier, EmbedMlpModel};
use crate::error::{Error, Result};

/// Version tag of the model file format.
pub const MODEL_FORMAT_VERSION: &str = "catbreak-model-v1";

/// Writes one instance per line as `{"categories": [...], "label": k}`;
/// `null` encodes an absent feature.
pub fn write_dataset(path: &Path, instances: &[Instance]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for inst in instances {
        serde_json::to_writer(&mut out, inst)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<Instance>> {
    let reader = BufReader::new(File::open(path)?);
    let mut instances = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: Instance = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("dataset line {}: {e}", lineno + 1)))?;
        instances.push(inst);
    }
    Ok(instances)
}

#[derive(Serialize, Deserialize)]
struct EmbeddingHeader {
    n: usize,
    m: Vec<usize>,
    d: usize,
}

/// Embedding file: JSON header `{"n", "m", "d"}`, newline, then the
/// `sum(m) * d` float payload in `(feature, value, component)` order.
pub fn write_embedding_file(path: &Path, table: &EmbeddingTable) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let header = EmbeddingHeader {
        n: table.num_features(),
        m: table.values_per_feature().to_vec(),
        d: table.dim(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    write_f64_payload(&mut out, table.flat())?;
    out.flush()?;
    Ok(())
}

pub fn read_embedding_file(path: &Path) -> Result<EmbeddingTable> {
    let mut reader = BufReader::new(File::open(path)?);
    let header: EmbeddingHeader = read_header_line(&mut reader)?;
    if header.m.len() != header.n {
        return Err(Error::Format(format!(
            "embedding header: {} value counts for n = {}",
            header.m.len(),
            header.n
        )));
    }
    let len = header.m.iter().sum::<usize>() * header.d;
    let data = read_f64_payload(&mut reader, len)?;
    EmbeddingTable::from_flat(header.m, header.d, data)
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    version: String,
    n: usize,
    m: Vec<usize>,
    d: usize,
    k: usize,
    hidden: Vec<usize>,
    seed: u64,
}

/// Model file: JSON header (shapes, seed, format version), newline, then
/// the parameter payload in declaration order — embedding table, then each
/// layer's weights (row-major) and biases.
pub fn write_model_file(path: &Path, model: &EmbedMlpModel) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let table = model.table();
    let header = ModelHeader {
        version: MODEL_FORMAT_VERSION.to_string(),
        n: table.num_features(),
        m: table.values_per_feature().to_vec(),
        d: table.dim(),
        k: model.num_classes(),
        hidden: model.hidden_sizes().to_vec(),
        seed: model.seed(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    write_f64_payload(&mut out, table.flat())?;
    for (weights, biases) in model.layer_weights().iter().zip(model.layer_biases()) {
        write_f64_payload(&mut out, weights)?;
        write_f64_payload(&mut out, biases)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_model_file(path: &Path) -> Result<EmbedMlpModel> {
    let mut reader = BufReader::new(File::open(path)?);
    let header: ModelHeader = read_header_line(&mut reader)?;
    if header.version != MODEL_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "model version '{}', expected '{MODEL_FORMAT_VERSION}'",
            header.version
        )));
    }
    if header.m.len() != header.n {
        return Err(Error::Format(format!(
            "model header: {} value counts for n = {}",
            header.m.len(),
            header.n
        )));
    }
    let emb_len = header.m.iter().sum::<usize>() * header.d;
    let emb = read_f64_payload(&mut reader, emb_len)?;
    let table = EmbeddingTable::from_flat(header.m, header.d, emb)?;

    let mut layer_sizes = vec![header.n * header.d];
    layer_sizes.extend_from_slice(&header.hidden);
    layer_sizes.push(header.k);
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for l in 0..layer_sizes.len() - 1 {
        let (rows, cols) = (layer_sizes[l + 1], layer_sizes[l]);
        weights.push(read_f64_payload(&mut reader, rows * cols)?);
        biases.push(read_f64_payload(&mut reader, rows)?);
    }
    let mut trailing = [0u8; 1];
    if reader.read(&mut trailing)? != 0 {
        return Err(Error::Format("model file has trailing bytes".into()));
    }
    EmbedMlpModel::from_parts(table, header.k, &header.hidden, weights, biases, header.seed)
}

fn read_header_line<T: serde::de::DeserializeOwned>(reader: &mut impl BufRead) -> Result<T> {
    let mut line = String::new();
    reader.read_line(&mut line)?;
    serde_json::from_str(line.trim_end()).map_err(|e| Error::Format(format!("header: {e}")))
}

fn write_f64_payload(out: &mut impl Write, values: &[f64]) -> Result<()> {
    for v in values {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64_payload(reader: &mut impl Read, len: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; len * 8];
    reader
        .read_exact(&mut bytes)
        .map_err(|e| Error::Format(format!("payload truncated ({e}), expected {len} floats")))?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}
