//! Dataset serialization: JSON Lines with a header record.
//!
//! The first line is a header with the dataset dimensions and the answer
//! vocabulary; each following line is one example. Numeric payloads
//! (features, argument embeddings) are base64-encoded little-endian f64
//! arrays, row-major for matrices. Attention targets are stored as the
//! indices of their positive entries. Export is byte-deterministic: maps
//! are ordered, and floats round-trip exactly through the binary
//! encoding.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::Program;
use crate::executor::IntermediateTargets;
use crate::tensor::{Matrix, Vector};

use super::generate::{Dataset, SceneExample};
use super::AnswerVocab;

const FORMAT: &str = "nmn-dataset";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataIoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("missing or malformed dataset header: {0}")]
    BadHeader(String),
}

fn parse_err(line: usize, message: impl Into<String>) -> DataIoError {
    DataIoError::Parse {
        line,
        message: message.into(),
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    d: usize,
    k: usize,
    noise: f64,
    seed: u64,
    vocab: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    program: String,
    features: String,
    args: BTreeMap<String, String>,
    gold: usize,
    targets: RecordTargets,
    meta: RecordMeta,
}

#[derive(Serialize, Deserialize)]
struct RecordTargets {
    attention: BTreeMap<String, Vec<usize>>,
    boolean: BTreeMap<String, u8>,
}

#[derive(Serialize, Deserialize)]
struct RecordMeta {
    objects: usize,
    length: usize,
    answer_kind: String,
}

fn encode_floats(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    B64.encode(bytes)
}

fn decode_floats(text: &str, expected: usize, line: usize) -> Result<Vec<f64>, DataIoError> {
    let bytes = B64
        .decode(text)
        .map_err(|e| parse_err(line, format!("bad base64: {e}")))?;
    if bytes.len() != expected * 8 {
        return Err(parse_err(
            line,
            format!("expected {} payload bytes, got {}", expected * 8, bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunks are 8 bytes")))
        .collect())
}

pub fn export(dataset: &Dataset, path: &Path) -> Result<(), DataIoError> {
    let mut out = BufWriter::new(File::create(path)?);
    let header = Header {
        format: FORMAT.to_string(),
        version: VERSION,
        d: dataset.d,
        k: dataset.k,
        noise: dataset.noise,
        seed: dataset.seed,
        vocab: dataset.vocab.words().to_vec(),
    };
    serde_json::to_writer(&mut out, &header).map_err(|e| parse_err(1, e.to_string()))?;
    out.write_all(b"\n")?;

    for (offset, ex) in dataset.examples.iter().enumerate() {
        let record = Record {
            id: ex.id.clone(),
            program: ex.program.to_text(),
            features: encode_floats(ex.features.as_slice()),
            args: ex
                .args
                .iter()
                .map(|(phrase, emb)| (phrase.clone(), encode_floats(emb.as_slice())))
                .collect(),
            gold: ex.gold,
            targets: RecordTargets {
                attention: ex
                    .targets
                    .attention
                    .iter()
                    .map(|(step, mask)| {
                        let hot: Vec<usize> = mask
                            .iter()
                            .enumerate()
                            .filter(|(_, &v)| v != 0.0)
                            .map(|(i, _)| i)
                            .collect();
                        (step.to_string(), hot)
                    })
                    .collect(),
                boolean: ex
                    .targets
                    .boolean
                    .iter()
                    .map(|(step, value)| (step.to_string(), if *value != 0.0 { 1 } else { 0 }))
                    .collect(),
            },
            meta: RecordMeta {
                objects: ex.objects,
                length: ex.length,
                answer_kind: ex.answer_kind.to_string(),
            },
        };
        serde_json::to_writer(&mut out, &record)
            .map_err(|e| parse_err(offset + 2, e.to_string()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Dataset, DataIoError> {
    let mut lines = BufReader::new(File::open(path)?).lines();
    let first = lines
        .next()
        .ok_or_else(|| DataIoError::BadHeader("empty file".to_string()))??;
    let header: Header = serde_json::from_str(&first)
        .map_err(|e| DataIoError::BadHeader(e.to_string()))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(DataIoError::BadHeader(format!(
            "unsupported format {}/{}",
            header.format, header.version
        )));
    }
    let vocab = AnswerVocab::from_words(header.vocab.clone()).map_err(DataIoError::BadHeader)?;

    let mut examples = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record =
            serde_json::from_str(&line).map_err(|e| parse_err(line_no, e.to_string()))?;
        examples.push(record_to_example(record, &header, &vocab, line_no)?);
    }
    Ok(Dataset {
        d: header.d,
        k: header.k,
        noise: header.noise,
        seed: header.seed,
        vocab,
        examples,
    })
}

fn record_to_example(
    record: Record,
    header: &Header,
    vocab: &AnswerVocab,
    line: usize,
) -> Result<SceneExample, DataIoError> {
    let program = Program::parse(&record.program)
        .map_err(|e| parse_err(line, format!("bad program: {e}")))?;
    let features = Matrix::new(
        header.d,
        header.k,
        decode_floats(&record.features, header.d * header.k, line)?,
    )
    .expect("dimensions were checked by the decoder");

    let mut args = BTreeMap::new();
    for (phrase, payload) in record.args {
        let data = decode_floats(&payload, header.d, line)?;
        args.insert(
            phrase,
            Vector::new(data).map_err(|e| parse_err(line, e.to_string()))?,
        );
    }

    let gold_word = vocab
        .word(record.gold)
        .ok_or_else(|| parse_err(line, format!("gold index {} out of range", record.gold)))?
        .to_string();

    let mut targets = IntermediateTargets::default();
    for (step, hot) in record.targets.attention {
        let step: usize = step
            .parse()
            .map_err(|_| parse_err(line, format!("bad attention step key `{step}`")))?;
        let mut mask = vec![0.0; header.k];
        for i in hot {
            if i >= header.k {
                return Err(parse_err(line, format!("attention index {i} out of range")));
            }
            mask[i] = 1.0;
        }
        targets.attention.insert(step, mask);
    }
    for (step, value) in record.targets.boolean {
        let step: usize = step
            .parse()
            .map_err(|_| parse_err(line, format!("bad boolean step key `{step}`")))?;
        targets.boolean.insert(step, f64::from(value));
    }

    let answer_kind = program
        .steps()
        .last()
        .ok_or_else(|| parse_err(line, "empty program"))?
        .kind;
    if answer_kind.to_string() != record.meta.answer_kind {
        return Err(parse_err(
            line,
            format!(
                "answer kind mismatch: program ends with {answer_kind}, record says {}",
                record.meta.answer_kind
            ),
        ));
    }
    if record.meta.length != program.len() {
        return Err(parse_err(
            line,
            format!(
                "length mismatch: program has {} steps, record says {}",
                program.len(),
                record.meta.length
            ),
        ));
    }

    Ok(SceneExample {
        id: record.id,
        program,
        features,
        args,
        gold: record.gold,
        gold_word,
        targets,
        objects: record.meta.objects,
        length: record.meta.length,
        answer_kind,
    })
}
