//! Byte-level BPE.
//!
//! Ids `0..256` are the raw bytes, so any byte sequence (including invalid
//! UTF-8) encodes without an unknown token. Learned merges follow in
//! priority order, and an optional pad / end-of-document pair comes last.
//!
//! Training runs on raw byte streams with no pre-tokenization; merges never
//! cross document boundaries. Among equally frequent pairs the
//! lexicographically smallest `(left, right)` wins.
//!
//! File format (`bbpe-v1`):
//!
//! ```text
//! bbpe-v1 <vocab_size>
//! <left> <right> <new>
//! ...
//! ```
//!
//! The 256 byte entries are implicit. `vocab_size - 256 - merges` is the
//! number of specials, which is either 0 or 2 (pad, then eod).

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use thiserror::Error;

pub const BYTE_VOCAB: usize = 256;
const HEADER: &str = "bbpe-v1";

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("target vocabulary {0} is smaller than the 256-byte base")]
    VocabTooSmall(usize),
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("unknown token id {0}")]
    UnknownId(usize),
    #[error("special token id {0} has no byte form")]
    SpecialId(usize),
    #[error("tokenizer file line {line}: {message}")]
    Format { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TokenizerError>;

/// Reserved ids appended after the merges.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Specials {
    pub pad: usize,
    pub eod: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizerModel {
    merges: Vec<(usize, usize)>,
    specials: Option<Specials>,
    ranks: HashMap<(usize, usize), usize>,
    pieces: Vec<Vec<u8>>,
}

impl TokenizerModel {
    /// Builds a model from an ordered merge list. Merge `i` creates id `256 + i`.
    pub fn from_merges(merges: Vec<(usize, usize)>, with_specials: bool) -> Result<Self> {
        let mut pieces: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        let mut ranks = HashMap::with_capacity(merges.len());
        for (i, &(l, r)) in merges.iter().enumerate() {
            let next = BYTE_VOCAB + i;
            if l >= next || r >= next {
                return Err(TokenizerError::Format {
                    line: i + 2,
                    message: format!("merge ({l}, {r}) refers to an id not yet defined"),
                });
            }
            if ranks.insert((l, r), i).is_some() {
                return Err(TokenizerError::Format {
                    line: i + 2,
                    message: format!("duplicate merge ({l}, {r})"),
                });
            }
            let mut piece = pieces[l].clone();
            piece.extend_from_slice(&pieces[r]);
            pieces.push(piece);
        }
        let n = pieces.len();
        let specials = with_specials.then_some(Specials { pad: n, eod: n + 1 });
        Ok(Self {
            merges,
            specials,
            ranks,
            pieces,
        })
    }

    /// Pure byte vocabulary without merges or specials.
    pub fn bytes_only() -> Self {
        Self::from_merges(Vec::new(), false).expect("empty merge list")
    }

    /// The same merges with pad and end-of-document ids appended.
    pub fn with_specials(mut self) -> Self {
        let n = self.pieces.len();
        self.specials = Some(Specials { pad: n, eod: n + 1 });
        self
    }

    pub fn vocab_size(&self) -> usize {
        self.pieces.len() + if self.specials.is_some() { 2 } else { 0 }
    }

    pub fn merges(&self) -> &[(usize, usize)] {
        &self.merges
    }

    pub fn specials(&self) -> Option<Specials> {
        self.specials
    }

    pub fn pad_id(&self) -> Option<usize> {
        self.specials.map(|s| s.pad)
    }

    pub fn eod_id(&self) -> Option<usize> {
        self.specials.map(|s| s.eod)
    }

    /// Bytes spelled by a non-special id.
    pub fn piece(&self, id: usize) -> Result<&[u8]> {
        if let Some(p) = self.pieces.get(id) {
            return Ok(p);
        }
        if id < self.vocab_size() {
            Err(TokenizerError::SpecialId(id))
        } else {
            Err(TokenizerError::UnknownId(id))
        }
    }

    pub fn encode(&self, text: &[u8]) -> Vec<usize> {
        let mut ids: Vec<usize> = text.iter().map(|&b| b as usize).collect();
        if self.merges.is_empty() {
            return ids;
        }
        // Repeatedly apply the best-ranked merge present. A merge can only
        // involve ids created by earlier merges, so this visits merges in
        // list order, the same as sweeping the list once.
        loop {
            let best = ids
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).copied())
                .min();
            let Some(rank) = best else { break };
            let (l, r) = self.merges[rank];
            ids = merge_pair(&ids, l, r, BYTE_VOCAB + rank);
        }
        ids
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            out.extend_from_slice(self.piece(id)?);
        }
        Ok(out)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{HEADER} {}\n", self.vocab_size());
        for (i, (l, r)) in self.merges.iter().enumerate() {
            s.push_str(&format!("{l} {r} {}\n", BYTE_VOCAB + i));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| TokenizerError::Format {
            line: 1,
            message: "missing header".into(),
        })?;
        let vocab_size = header
            .strip_prefix(HEADER)
            .and_then(|rest| rest.trim().parse::<usize>().ok())
            .ok_or_else(|| TokenizerError::Format {
                line: 1,
                message: format!("expected `{HEADER} <vocab_size>`, found {header:?}"),
            })?;
        let mut merges = Vec::new();
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<usize> = line
                .split_whitespace()
                .map(|f| f.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| TokenizerError::Format {
                    line: lineno,
                    message: e.to_string(),
                })?;
            let [l, r, new] = fields[..] else {
                return Err(TokenizerError::Format {
                    line: lineno,
                    message: format!("expected three integers, found {}", fields.len()),
                });
            };
            if new != BYTE_VOCAB + merges.len() {
                return Err(TokenizerError::Format {
                    line: lineno,
                    message: format!("merge creates id {new}, expected {}", BYTE_VOCAB + merges.len()),
                });
            }
            merges.push((l, r));
        }
        let base = BYTE_VOCAB + merges.len();
        let with_specials = match vocab_size.checked_sub(base) {
            Some(0) => false,
            Some(2) => true,
            _ => {
                return Err(TokenizerError::Format {
                    line: 1,
                    message: format!("vocab size {vocab_size} inconsistent with {} merges", merges.len()),
                })
            }
        };
        Self::from_merges(merges, with_specials)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

fn merge_pair(ids: &[usize], l: usize, r: usize, new: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(ids.len());
    let mut i = 0;
    while i < ids.len() {
        if i + 1 < ids.len() && ids[i] == l && ids[i + 1] == r {
            out.push(new);
            i += 2;
        } else {
            out.push(ids[i]);
            i += 1;
        }
    }
    out
}

fn add_pairs(seq: &[usize], sign: i64, counts: &mut HashMap<(usize, usize), i64>) {
    for w in seq.windows(2) {
        *counts.entry((w[0], w[1])).or_insert(0) += sign;
    }
}

/// Learns merges greedily until `target_vocab` ids exist or no adjacent pair
/// occurs at least twice. The result has no specials; see
/// [`TokenizerModel::with_specials`].
///
/// `seed` is accepted for interface symmetry with the other trainers; the
/// tie rule makes training a pure function of the corpus.
pub fn train_bpe<S: AsRef<[u8]>>(corpus: &[S], target_vocab: usize, seed: u64) -> Result<TokenizerModel> {
    let _ = seed;
    if target_vocab < BYTE_VOCAB {
        return Err(TokenizerError::VocabTooSmall(target_vocab));
    }
    if corpus.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }
    let mut seqs: Vec<Vec<usize>> = corpus
        .iter()
        .map(|d| d.as_ref().iter().map(|&b| b as usize).collect())
        .collect();
    let mut counts: HashMap<(usize, usize), i64> = HashMap::new();
    let mut where_: HashMap<(usize, usize), BTreeSet<usize>> = HashMap::new();
    for (di, s) in seqs.iter().enumerate() {
        add_pairs(s, 1, &mut counts);
        for w in s.windows(2) {
            where_.entry((w[0], w[1])).or_default().insert(di);
        }
    }

    let mut merges = Vec::new();
    while BYTE_VOCAB + merges.len() < target_vocab {
        let best = counts
            .iter()
            .filter(|(_, &c)| c >= 2)
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)))
            .map(|(&p, _)| p);
        let Some(pair) = best else { break };
        let new = BYTE_VOCAB + merges.len();
        merges.push(pair);
        let docs = where_.remove(&pair).unwrap_or_default();
        for di in docs {
            let old = std::mem::take(&mut seqs[di]);
            add_pairs(&old, -1, &mut counts);
            let merged = merge_pair(&old, pair.0, pair.1, new);
            add_pairs(&merged, 1, &mut counts);
            for w in merged.windows(2) {
                if w[0] == new || w[1] == new {
                    where_.entry((w[0], w[1])).or_default().insert(di);
                }
            }
            seqs[di] = merged;
        }
        counts.retain(|_, c| *c > 0);
    }
    TokenizerModel::from_merges(merges, false)
}

/// Total number of tokens over all documents.
pub fn count_tokens<S: AsRef<[u8]>>(model: &TokenizerModel, corpus: &[S]) -> usize {
    corpus.iter().map(|d| model.encode(d.as_ref()).len()).sum()
}
