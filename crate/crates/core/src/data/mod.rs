//! Preference-dataset ingestion, validation, splitting, mixing and
//! statistics. The on-disk format is UTF-8 JSONL, one object per line with
//! required keys `prompt`, `chosen`, `rejected` and optional `id`, `source`.

mod synth;

pub use synth::{synth_generate, SynthCorpus, SynthRecord, SynthRule};

use crate::model::Vocab;
use crate::rng::{derive_seed, Rng};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed JSON: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: schema error: {message}")]
    Schema {
        path: String,
        line: usize,
        message: String,
    },
    #[error("invalid record {id}: {message}")]
    Validation { id: String, message: String },
    #[error("invalid data config: {0}")]
    Config(String),
    #[error("source '{name}' has {available} records, {requested} requested")]
    InsufficientSource {
        name: String,
        available: usize,
        requested: usize,
    },
    #[error("unknown synthetic rule '{0}' (known: marker-count, length-band, keyword-safety)")]
    UnknownRule(String),
}

/// One (prompt, chosen, rejected) triple with its dataset tag.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub id: String,
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub source: String,
}

impl PreferenceRecord {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.prompt.is_empty() || self.chosen.is_empty() || self.rejected.is_empty() {
            return Err(DataError::Validation {
                id: self.id.clone(),
                message: "prompt, chosen and rejected must be non-empty".into(),
            });
        }
        if self.chosen == self.rejected {
            return Err(DataError::Validation {
                id: self.id.clone(),
                message: "chosen and rejected are identical".into(),
            });
        }
        Ok(())
    }
}

#[derive(Deserialize)]
struct RawRecord {
    prompt: String,
    chosen: String,
    rejected: String,
    #[serde(default)]
    id: Option<String>,
    #[serde(default)]
    source: Option<String>,
}

/// Result of loading a JSONL file. Exact duplicate triples are dropped and
/// counted rather than kept.
#[derive(Debug)]
pub struct LoadReport {
    pub records: Vec<PreferenceRecord>,
    pub duplicates_dropped: usize,
}

/// Load and validate a JSONL preference file. Missing ids become
/// `line<N>`; a missing source becomes the file stem.
pub fn load_jsonl(path: impl AsRef<Path>) -> Result<LoadReport, DataError> {
    let path = path.as_ref();
    let path_str = path.display().to_string();
    let default_source = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "unknown".into());
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path_str.clone(),
        source,
    })?;
    let reader = std::io::BufReader::new(file);

    let mut records = Vec::new();
    let mut seen: HashSet<(String, String, String)> = HashSet::new();
    let mut duplicates_dropped = 0usize;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| DataError::Io {
            path: path_str.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| {
            let message = e.to_string();
            if message.contains("missing field") {
                DataError::Schema {
                    path: path_str.clone(),
                    line: line_no,
                    message,
                }
            } else {
                DataError::Parse {
                    path: path_str.clone(),
                    line: line_no,
                    message,
                }
            }
        })?;
        let record = PreferenceRecord {
            id: raw.id.unwrap_or_else(|| format!("line{line_no}")),
            source: raw.source.unwrap_or_else(|| default_source.clone()),
            prompt: raw.prompt,
            chosen: raw.chosen,
            rejected: raw.rejected,
        };
        record.validate()?;
        let key = (
            record.prompt.clone(),
            record.chosen.clone(),
            record.rejected.clone(),
        );
        if !seen.insert(key) {
            duplicates_dropped += 1;
            continue;
        }
        records.push(record);
    }
    Ok(LoadReport {
        records,
        duplicates_dropped,
    })
}

/// Write records as JSONL, one object per line, in order.
pub fn write_jsonl(path: impl AsRef<Path>, records: &[PreferenceRecord]) -> Result<(), DataError> {
    let path_str = path.as_ref().display().to_string();
    let io_err = |source| DataError::Io {
        path: path_str.clone(),
        source,
    };
    let mut file = std::fs::File::create(path.as_ref()).map_err(io_err)?;
    for r in records {
        let line = serde_json::to_string(r).expect("record serialization is infallible");
        writeln!(file, "{line}").map_err(|source| DataError::Io {
            path: path_str.clone(),
            source,
        })?;
    }
    Ok(())
}

/// Deterministic train/validation/test partition.
#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub train: Vec<PreferenceRecord>,
    pub validation: Vec<PreferenceRecord>,
    pub test: Vec<PreferenceRecord>,
    pub seed: u64,
    pub test_frac: f64,
    pub val_frac: f64,
}

/// Shuffle by seed, then carve `floor(test_frac * n)` test records and
/// `floor(val_frac * n)` validation records; the rest train.
pub fn split(
    records: &[PreferenceRecord],
    seed: u64,
    test_frac: f64,
    val_frac: f64,
) -> Result<DatasetSplit, DataError> {
    if records.len() < 3 {
        return Err(DataError::Config(format!(
            "need at least 3 records to split, got {}",
            records.len()
        )));
    }
    for (frac, name) in [(test_frac, "test_frac"), (val_frac, "val_frac")] {
        if !frac.is_finite() || frac < 0.0 {
            return Err(DataError::Config(format!("{name} must be in [0, 1), got {frac}")));
        }
    }
    if test_frac + val_frac >= 1.0 {
        return Err(DataError::Config(format!(
            "test_frac + val_frac must stay below 1, got {}",
            test_frac + val_frac
        )));
    }
    let n = records.len();
    let n_test = (test_frac * n as f64).floor() as usize;
    let n_val = (val_frac * n as f64).floor() as usize;

    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = Rng::new(derive_seed(seed, 0x73706c69)); // "spli"
    rng.shuffle(&mut indices);

    let pick = |range: &[usize]| -> Vec<PreferenceRecord> {
        range.iter().map(|&i| records[i].clone()).collect()
    };
    Ok(DatasetSplit {
        test: pick(&indices[..n_test]),
        validation: pick(&indices[n_test..n_test + n_val]),
        train: pick(&indices[n_test + n_val..]),
        seed,
        test_frac,
        val_frac,
    })
}

/// Even per-source sampling plan.
#[derive(Clone, Debug)]
pub struct MixSpec {
    pub sources: Vec<(String, Vec<PreferenceRecord>)>,
    pub per_source_count: usize,
    pub seed: u64,
}

/// Sample exactly `per_source_count` records from every source, concatenate
/// and shuffle. Records are retagged with their source name.
pub fn mix_even(spec: &MixSpec) -> Result<Vec<PreferenceRecord>, DataError> {
    let mut mixed = Vec::with_capacity(spec.sources.len() * spec.per_source_count);
    for (src_idx, (tag, records)) in spec.sources.iter().enumerate() {
        if records.len() < spec.per_source_count {
            return Err(DataError::InsufficientSource {
                name: tag.clone(),
                available: records.len(),
                requested: spec.per_source_count,
            });
        }
        let mut indices: Vec<usize> = (0..records.len()).collect();
        let mut rng = Rng::new(derive_seed(spec.seed, 0x6d69_7800 ^ src_idx as u64)); // "mix"
        rng.shuffle(&mut indices);
        for &i in indices.iter().take(spec.per_source_count) {
            let mut r = records[i].clone();
            r.source = tag.clone();
            mixed.push(r);
        }
    }
    let mut rng = Rng::new(derive_seed(spec.seed, 0x6d69_78ff));
    rng.shuffle(&mut mixed);
    Ok(mixed)
}

/// Corpus statistics in the Size / Words per QA / Tokens per QA layout.
/// Each record counts as two QA instances (prompt+chosen, prompt+rejected).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub name: String,
    pub size: usize,
    pub words_per_qa: f64,
    pub tokens_per_qa: f64,
}

pub fn compute_stats(name: &str, records: &[PreferenceRecord], vocab: &Vocab) -> DatasetStats {
    if records.is_empty() {
        return DatasetStats {
            name: name.to_string(),
            size: 0,
            words_per_qa: 0.0,
            tokens_per_qa: 0.0,
        };
    }
    let words = |s: &str| s.split_whitespace().count();
    let tokens = |s: &str| vocab.encode(s).len();
    let mut word_total = 0usize;
    let mut token_total = 0usize;
    for r in records {
        word_total += words(&r.prompt) + words(&r.chosen);
        word_total += words(&r.prompt) + words(&r.rejected);
        token_total += tokens(&r.prompt) + tokens(&r.chosen);
        token_total += tokens(&r.prompt) + tokens(&r.rejected);
    }
    let instances = (2 * records.len()) as f64;
    DatasetStats {
        name: name.to_string(),
        size: records.len(),
        words_per_qa: word_total as f64 / instances,
        tokens_per_qa: token_total as f64 / instances,
    }
}
