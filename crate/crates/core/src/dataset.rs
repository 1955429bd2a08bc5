//! Benchmark dataset ingestion, validation, subsampling, and persistence.
//!
//! The canonical on-disk format is JSONL, one sample per line:
//! `{"id": str, "subject": str, "question": str, "options": [str...], "answer_key": int}`.
//! An MMLU-style CSV importer (question, A, B, C, D, answer letter) maps into it.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// One multiple-choice item: question text, ordered options, and the index
/// of the correct option. Answer keys are stored as indices and rendered
/// as letters (A, B, ...) only at prompt time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkSample {
    pub id: String,
    pub subject: String,
    pub question: String,
    pub options: Vec<String>,
    pub answer_key: usize,
}

impl BenchmarkSample {
    /// Checks the per-sample invariants, returning a human-readable message
    /// for the first violation found.
    pub fn check(&self) -> std::result::Result<(), String> {
        if self.question.trim().is_empty() {
            return Err("question is empty".into());
        }
        if self.options.len() < 2 || self.options.len() > 26 {
            return Err(format!(
                "expected 2..=26 options, got {}",
                self.options.len()
            ));
        }
        if let Some(i) = self.options.iter().position(|o| o.trim().is_empty()) {
            return Err(format!("option {} is empty", i));
        }
        if self.answer_key >= self.options.len() {
            return Err(format!(
                "answer_key {} out of range for {} options",
                self.answer_key,
                self.options.len()
            ));
        }
        Ok(())
    }
}

/// An ordered benchmark dataset plus a content hash of the file it came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub samples: Vec<BenchmarkSample>,
    pub source_digest: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_by_id(&self, id: &str) -> Option<&BenchmarkSample> {
        self.samples.iter().find(|s| s.id == id)
    }
}

/// Supported input formats for [`ingest`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Jsonl,
    MmluCsv,
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" => Ok(Format::Jsonl),
            "mmlu-csv" => Ok(Format::MmluCsv),
            other => Err(Error::InvalidArgument(format!(
                "unknown format `{}` (expected jsonl or mmlu-csv)",
                other
            ))),
        }
    }
}

/// A single invariant violation found by [`validate`]; violations are data,
/// not errors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub sample_id: String,
    pub position: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Reads a dataset file, validating every record. The digest is computed
/// over the raw input bytes, so the same file always yields the same
/// `source_digest` and sample order.
pub fn ingest(path: &Path, format: Format) -> Result<Dataset> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let digest = sha256_hex(&raw);
    let text = String::from_utf8(raw)
        .map_err(|e| Error::Parse { line: 0, message: format!("invalid utf-8: {}", e) })?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());

    let samples = match format {
        Format::Jsonl => parse_jsonl(&text)?,
        Format::MmluCsv => parse_mmlu_csv(&text, &name)?,
    };
    if samples.is_empty() {
        return Err(Error::Parse { line: 0, message: "dataset is empty".into() });
    }

    // Per-sample invariants plus id uniqueness, with file positions in messages.
    let mut seen: HashMap<&str, usize> = HashMap::new();
    for (pos, s) in samples.iter().enumerate() {
        s.check()
            .map_err(|message| Error::Invariant { id: s.id.clone(), message })?;
        if let Some(&first) = seen.get(s.id.as_str()) {
            return Err(Error::DuplicateId { id: s.id.clone(), first, second: pos });
        }
        seen.insert(&s.id, pos);
    }

    Ok(Dataset { name, samples, source_digest: digest })
}

fn parse_jsonl(text: &str) -> Result<Vec<BenchmarkSample>> {
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut sample: BenchmarkSample =
            serde_json::from_str(line).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        // Only leading/trailing whitespace is trimmed; content bytes are preserved.
        sample.question = sample.question.trim().to_string();
        samples.push(sample);
    }
    Ok(samples)
}

/// MMLU-style CSV: question, A, B, C, D, answer letter. No header row.
/// The subject comes from the file name, matching how MMLU distributes
/// one CSV per subject; ids are row numbers.
fn parse_mmlu_csv(text: &str, subject: &str) -> Result<Vec<BenchmarkSample>> {
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields = split_csv_line(line).map_err(|message| Error::Parse {
            line: i + 1,
            message,
        })?;
        if fields.len() != 6 {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("expected 6 CSV fields, got {}", fields.len()),
            });
        }
        let letter = fields[5].trim();
        let answer_key = match letter {
            "A" | "a" => 0,
            "B" | "b" => 1,
            "C" | "c" => 2,
            "D" | "d" => 3,
            other => {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("unrecognized answer letter `{}`", other),
                })
            }
        };
        samples.push(BenchmarkSample {
            id: format!("{}-{:05}", subject, i),
            subject: subject.to_string(),
            question: fields[0].trim().to_string(),
            options: fields[1..5].to_vec(),
            answer_key,
        });
    }
    Ok(samples)
}

/// Minimal RFC-4180 field splitter (quoted fields, doubled quotes).
fn split_csv_line(line: &str) -> std::result::Result<Vec<String>, String> {
    let mut fields = Vec::new();
    let mut field = String::new();
    let mut chars = line.chars().peekable();
    let mut in_quotes = false;
    while let Some(c) = chars.next() {
        if in_quotes {
            match c {
                '"' => {
                    if chars.peek() == Some(&'"') {
                        chars.next();
                        field.push('"');
                    } else {
                        in_quotes = false;
                    }
                }
                _ => field.push(c),
            }
        } else {
            match c {
                '"' if field.is_empty() => in_quotes = true,
                ',' => fields.push(std::mem::take(&mut field)),
                _ => field.push(c),
            }
        }
    }
    if in_quotes {
        return Err("unterminated quoted field".into());
    }
    fields.push(field);
    Ok(fields)
}

/// Writes a dataset in the canonical JSONL format.
pub fn write_jsonl(d: &Dataset, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for s in &d.samples {
        serde_json::to_writer(&mut out, s).expect("sample serialization cannot fail");
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&out)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Deterministic seeded selection of `n` samples without replacement,
/// preserving original relative order. The selection depends only on
/// (source_digest, n, seed), not on the process or platform.
pub fn subsample(d: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    use rand::seq::index::sample as index_sample;
    use rand::SeedableRng;

    if n == 0 || n > d.len() {
        return Err(Error::InvalidArgument(format!(
            "subsample size {} out of range 1..={}",
            n,
            d.len()
        )));
    }
    let mut hasher = Sha256::new();
    hasher.update(d.source_digest.as_bytes());
    hasher.update(n.to_le_bytes());
    hasher.update(seed.to_le_bytes());
    let rng_seed: [u8; 32] = hasher.finalize().into();
    let mut rng = rand_chacha::ChaCha8Rng::from_seed(rng_seed);

    let mut idx: Vec<usize> = index_sample(&mut rng, d.len(), n).into_vec();
    idx.sort_unstable();
    Ok(Dataset {
        name: d.name.clone(),
        samples: idx.into_iter().map(|i| d.samples[i].clone()).collect(),
        source_digest: d.source_digest.clone(),
    })
}

/// Lists every invariant violation in the dataset. Empty report iff all hold.
pub fn validate(d: &Dataset) -> ValidationReport {
    let mut violations = Vec::new();
    let mut seen: HashMap<&str, usize> = HashMap::new();
    for (pos, s) in d.samples.iter().enumerate() {
        if let Err(message) = s.check() {
            violations.push(Violation { sample_id: s.id.clone(), position: pos, message });
        }
        if let Some(&first) = seen.get(s.id.as_str()) {
            violations.push(Violation {
                sample_id: s.id.clone(),
                position: pos,
                message: format!("duplicate id (positions {} and {})", first, pos),
            });
        } else {
            seen.insert(&s.id, pos);
        }
    }
    ValidationReport { violations }
}

/// Renders a zero-based option index as its prompt letter.
pub fn option_letter(index: usize) -> char {
    (b'A' + index as u8) as char
}
