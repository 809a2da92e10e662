//! Corpus ingestion, sampling, packing and task-data loading.
//!
//! Corpora are UTF-8 text with one document per line. CRLF line endings are
//! normalized to LF before splitting, and blank lines are skipped.

mod synth;
mod tasks;

pub use synth::{synth_bilingual, Lexicon, SynthCorpus, SynthSpec, LANG_A, LANG_B};
pub use tasks::{
    load_parallel, load_task_data, parse_parallel, parse_task_data, ParallelCorpus, TaskDataset, TaskExample,
    TaskKind,
};

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{origin}: invalid UTF-8 at byte offset {offset}")]
    Utf8 { origin: String, offset: usize },
    #[error("fetching {url}: {message}")]
    Http { url: String, message: String },
    #[error("{origin}: content hash {actual} does not match expected {expected}")]
    HashMismatch {
        origin: String,
        expected: String,
        actual: String,
    },
    #[error("cannot sample {requested} documents from {available}")]
    NotEnoughDocuments { requested: usize, available: usize },
    #[error("{path}:{line}: {message}")]
    Malformed { path: String, line: usize, message: String },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Where a corpus comes from and how much of it to use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    /// Local path or `http(s)://` URL.
    pub source: String,
    pub language: String,
    pub sample_count: usize,
    pub seed: u64,
    /// Expected SHA-256 of the raw bytes, if pinned.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Splits raw corpus bytes into documents.
pub fn parse_documents(source: &str, bytes: &[u8]) -> Result<Vec<String>> {
    let text = std::str::from_utf8(bytes).map_err(|e| DataError::Utf8 {
        origin: source.to_string(),
        offset: e.valid_up_to(),
    })?;
    Ok(text
        .replace("\r\n", "\n")
        .split('\n')
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn is_url(source: &str) -> bool {
    source.starts_with("http://") || source.starts_with("https://")
}

/// Fetches `url` once and keeps the body under `cache_dir` by content hash.
///
/// The cache holds `<sha256>.body` files plus a `<sha256(url)>.url` file
/// naming the body last fetched for the URL. A pinned `expected` hash that
/// is already cached, or a URL whose recorded body is intact, is served
/// without touching the network.
pub fn fetch_cached(url: &str, cache_dir: &Path, expected: Option<&str>) -> Result<Vec<u8>> {
    std::fs::create_dir_all(cache_dir).map_err(|source| DataError::Io {
        path: cache_dir.display().to_string(),
        source,
    })?;
    let body_path = |hash: &str| cache_dir.join(format!("{hash}.body"));
    let index_path = cache_dir.join(format!("{}.url", sha256_hex(url.as_bytes())));
    let cached = |hash: &str| -> Option<Vec<u8>> {
        let bytes = std::fs::read(body_path(hash)).ok()?;
        (sha256_hex(&bytes) == hash).then_some(bytes)
    };
    if let Some(hash) = expected {
        if let Some(bytes) = cached(hash) {
            return Ok(bytes);
        }
    } else if let Ok(hash) = std::fs::read_to_string(&index_path) {
        if let Some(bytes) = cached(hash.trim()) {
            return Ok(bytes);
        }
    }
    let http_err = |e: ureq::Error| DataError::Http {
        url: url.to_string(),
        message: e.to_string(),
    };
    let mut resp = ureq::get(url).call().map_err(http_err)?;
    let bytes = resp
        .body_mut()
        .with_config()
        .limit(1 << 32)
        .read_to_vec()
        .map_err(http_err)?;
    let hash = sha256_hex(&bytes);
    if let Some(want) = expected {
        if want != hash {
            return Err(DataError::HashMismatch {
                origin: url.to_string(),
                expected: want.to_string(),
                actual: hash,
            });
        }
    }
    write(&body_path(&hash), &bytes)?;
    write(&index_path, hash.as_bytes())?;
    Ok(bytes)
}

/// Loads every document of a corpus source in file order.
pub fn load_corpus(spec: &CorpusSpec, cache_dir: &Path) -> Result<Vec<String>> {
    let bytes = if is_url(&spec.source) {
        fetch_cached(&spec.source, cache_dir, spec.sha256.as_deref())?
    } else {
        let bytes = read(&PathBuf::from(&spec.source))?;
        if let Some(want) = &spec.sha256 {
            let actual = sha256_hex(&bytes);
            if &actual != want {
                return Err(DataError::HashMismatch {
                    origin: spec.source.clone(),
                    expected: want.clone(),
                    actual,
                });
            }
        }
        bytes
    };
    parse_documents(&spec.source, &bytes)
}

/// Uniform sample of `n` documents without replacement, in draw order.
pub fn sample_documents<T: Clone>(docs: &[T], n: usize, seed: u64) -> Result<Vec<T>> {
    if n > docs.len() {
        return Err(DataError::NotEnoughDocuments {
            requested: n,
            available: docs.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rand::seq::index::sample(&mut rng, docs.len(), n)
        .into_iter()
        .map(|i| docs[i].clone())
        .collect())
}

/// One training batch of equal-length rows.
///
/// `target[b][t]` marks positions whose token is predicted from the prefix
/// before it. Position 0 is never a target.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub tokens: Vec<Vec<usize>>,
    pub target: Vec<Vec<bool>>,
}

impl Batch {
    pub fn target_count(&self) -> usize {
        self.target.iter().flatten().filter(|&&m| m).count()
    }

    /// SHA-256 of the token ids, for diagnostics.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for row in &self.tokens {
            for t in row {
                h.update((*t as u64).to_le_bytes());
            }
        }
        hex::encode(&h.finalize()[..8])
    }
}

/// Documents concatenated with separators and cut into fixed-length chunks.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedBatchStream {
    pub chunks: Vec<Vec<usize>>,
    /// `false` on padding.
    pub real: Vec<Vec<bool>>,
    pub batch_size: usize,
}

impl PackedBatchStream {
    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn real_tokens(&self) -> usize {
        self.real.iter().flatten().filter(|&&r| r).count()
    }

    fn batch_of(&self, idx: &[usize]) -> Batch {
        let tokens = idx.iter().map(|&i| self.chunks[i].clone()).collect();
        let target = idx
            .iter()
            .map(|&i| {
                self.real[i]
                    .iter()
                    .enumerate()
                    .map(|(t, &r)| r && t > 0)
                    .collect()
            })
            .collect();
        Batch { tokens, target }
    }

    /// Consecutive batches in chunk order; the last may be smaller.
    pub fn batches(&self) -> Vec<Batch> {
        let idx: Vec<usize> = (0..self.chunks.len()).collect();
        idx.chunks(self.batch_size.max(1)).map(|c| self.batch_of(c)).collect()
    }

    /// Batches over a seeded permutation of the chunks.
    pub fn shuffled_batches(&self, seed: u64) -> Vec<Batch> {
        let mut idx: Vec<usize> = (0..self.chunks.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng);
        idx.chunks(self.batch_size.max(1)).map(|c| self.batch_of(c)).collect()
    }
}

/// Concatenates documents, each followed by `separator`, and chunks the
/// stream into `seq_len` pieces. The last chunk is padded with `pad_id`.
pub fn pack_sequences(
    docs: &[Vec<usize>],
    seq_len: usize,
    batch_size: usize,
    pad_id: usize,
    separator: usize,
) -> Result<PackedBatchStream> {
    if seq_len < 2 {
        return Err(DataError::Invalid(format!("seq_len must be at least 2, got {seq_len}")));
    }
    let mut stream = Vec::with_capacity(docs.iter().map(|d| d.len() + 1).sum());
    for d in docs {
        stream.extend_from_slice(d);
        stream.push(separator);
    }
    let mut chunks = Vec::new();
    let mut real = Vec::new();
    for piece in stream.chunks(seq_len) {
        let mut c = piece.to_vec();
        let mut r = vec![true; piece.len()];
        c.resize(seq_len, pad_id);
        r.resize(seq_len, false);
        chunks.push(c);
        real.push(r);
    }
    Ok(PackedBatchStream {
        chunks,
        real,
        batch_size,
    })
}
