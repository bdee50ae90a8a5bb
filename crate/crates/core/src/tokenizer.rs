//! Byte-level BPE tokenizer with reserved special tokens.
//!
//! Ids `0..5` are the specials, ids `5..261` are the 256 raw bytes, and every
//! id after that is a learned merge. Text is pre-split into chunks made of a
//! whitespace run followed by a non-whitespace run; merges are learned and
//! applied inside chunks only, so encoding a chunk never depends on its
//! neighbours.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const PAD: u32 = 2;
pub const CTRL_POS: u32 = 3;
pub const CTRL_NEG: u32 = 4;
pub const NUM_SPECIALS: usize = 5;
/// Id of byte `b` is `BYTE_OFFSET + b`.
pub const BYTE_OFFSET: u32 = NUM_SPECIALS as u32;
/// Smallest legal vocabulary: specials plus the full byte alphabet.
pub const MIN_VOCAB_SIZE: usize = NUM_SPECIALS + 256;
pub const DEFAULT_VOCAB_SIZE: usize = 512;

const SPECIAL_NAMES: [&str; NUM_SPECIALS] = ["<|bos|>", "<|eos|>", "<|pad|>", "<|pos|>", "<|neg|>"];
const FORMAT_HEADER: &str = "veriguide-vocab";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("target vocabulary size {requested} is below the minimum {minimum}")]
    TargetTooSmall { requested: usize, minimum: usize },
    #[error("token id {id} is outside the vocabulary of size {size}")]
    IdOutOfRange { id: u32, size: usize },
    #[error("malformed vocabulary file at line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Immutable tokenizer vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    id_to_token: Vec<Vec<u8>>,
    token_to_id: HashMap<Vec<u8>, u32>,
    /// Merge pairs in rank order; merge `r` produces id `MIN_VOCAB_SIZE + r`.
    merges: Vec<(u32, u32)>,
    merge_rank: HashMap<(u32, u32), u32>,
}

impl Vocab {
    fn base() -> Self {
        let mut id_to_token: Vec<Vec<u8>> = SPECIAL_NAMES
            .iter()
            .map(|s| s.as_bytes().to_vec())
            .collect();
        let mut token_to_id = HashMap::new();
        for b in 0..=255u8 {
            token_to_id.insert(vec![b], id_to_token.len() as u32);
            id_to_token.push(vec![b]);
        }
        Vocab {
            id_to_token,
            token_to_id,
            merges: Vec::new(),
            merge_rank: HashMap::new(),
        }
    }

    /// Specials plus the 256 byte tokens, no merges.
    pub fn byte_level() -> Self {
        Self::base()
    }

    fn push_merge(&mut self, left: u32, right: u32) -> u32 {
        let mut bytes = self.id_to_token[left as usize].clone();
        bytes.extend_from_slice(&self.id_to_token[right as usize]);
        let id = self.id_to_token.len() as u32;
        self.merge_rank
            .insert((left, right), self.merges.len() as u32);
        self.merges.push((left, right));
        self.token_to_id.insert(bytes.clone(), id);
        self.id_to_token.push(bytes);
        id
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn num_merges(&self) -> usize {
        self.merges.len()
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < NUM_SPECIALS
    }

    /// Raw bytes of an ordinary token; specials have no byte content.
    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        if Self::is_special(id) {
            return None;
        }
        self.id_to_token.get(id as usize).map(Vec::as_slice)
    }

    /// Id of an ordinary token with exactly these bytes.
    pub fn token_id(&self, bytes: &[u8]) -> Option<u32> {
        self.token_to_id.get(bytes).copied()
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        self.encode_bytes(text.as_bytes())
    }

    pub fn encode_bytes(&self, bytes: &[u8]) -> Vec<u32> {
        let mut out = Vec::with_capacity(bytes.len() / 2 + 1);
        for chunk in chunks(bytes) {
            out.extend(self.encode_chunk(chunk));
        }
        out
    }

    fn encode_chunk(&self, chunk: &[u8]) -> Vec<u32> {
        let mut ids: Vec<u32> = chunk.iter().map(|&b| BYTE_OFFSET + b as u32).collect();
        loop {
            let best = ids
                .windows(2)
                .filter_map(|w| self.merge_rank.get(&(w[0], w[1])).copied())
                .min();
            let Some(rank) = best else { break };
            let (l, r) = self.merges[rank as usize];
            let new_id = MIN_VOCAB_SIZE as u32 + rank;
            ids = merge_pair(&ids, l, r, new_id);
        }
        ids
    }

    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>, TokenizerError> {
        let mut out = Vec::new();
        for &id in ids {
            let token = self
                .id_to_token
                .get(id as usize)
                .ok_or(TokenizerError::IdOutOfRange {
                    id,
                    size: self.len(),
                })?;
            if !Self::is_special(id) {
                out.extend_from_slice(token);
            }
        }
        Ok(out)
    }

    /// Decodes to text. Specials contribute nothing; invalid UTF-8 produced
    /// by a model is replaced lossily.
    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let bytes = self.decode_bytes(ids)?;
        Ok(match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{FORMAT_HEADER} v{FORMAT_VERSION} size={}\n", self.len());
        for (id, token) in self.id_to_token.iter().enumerate() {
            s.push_str(&escape(token));
            if id >= MIN_VOCAB_SIZE {
                let (l, r) = self.merges[id - MIN_VOCAB_SIZE];
                let _ = write!(s, "\t{l} {r}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, TokenizerError> {
        let fmt_err = |line: usize, reason: &str| TokenizerError::Format {
            line,
            reason: reason.to_string(),
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| fmt_err(1, "missing header"))?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some(FORMAT_HEADER) {
            return Err(fmt_err(1, "bad magic"));
        }
        if parts.next() != Some(&format!("v{FORMAT_VERSION}")[..]) {
            return Err(fmt_err(1, "unsupported version"));
        }
        let size: usize = parts
            .next()
            .and_then(|p| p.strip_prefix("size="))
            .and_then(|p| p.parse().ok())
            .ok_or_else(|| fmt_err(1, "missing size"))?;
        if size < MIN_VOCAB_SIZE {
            return Err(fmt_err(1, "size below minimum"));
        }
        let mut vocab = Vocab::base();
        for (idx, line) in lines.enumerate() {
            let id = idx;
            let lineno = idx + 2;
            if id >= size {
                return Err(fmt_err(lineno, "more tokens than declared"));
            }
            let (tok, merge) = match line.split_once('\t') {
                Some((t, m)) => (t, Some(m)),
                None => (line, None),
            };
            let bytes = unescape(tok).ok_or_else(|| fmt_err(lineno, "bad escape"))?;
            if id < MIN_VOCAB_SIZE {
                if bytes != vocab.id_to_token[id] || merge.is_some() {
                    return Err(fmt_err(lineno, "reserved token mismatch"));
                }
                continue;
            }
            let merge = merge.ok_or_else(|| fmt_err(lineno, "merged token without pair"))?;
            let mut ids = merge.split(' ').map(|p| p.parse::<u32>());
            let (Some(Ok(l)), Some(Ok(r)), None) = (ids.next(), ids.next(), ids.next()) else {
                return Err(fmt_err(lineno, "bad merge pair"));
            };
            if l as usize >= id || r as usize >= id || Self::is_special(l) || Self::is_special(r) {
                return Err(fmt_err(lineno, "merge refers to an unknown token"));
            }
            vocab.push_merge(l, r);
            if vocab.id_to_token[id] != bytes {
                return Err(fmt_err(lineno, "token bytes disagree with merge pair"));
            }
        }
        if vocab.len() != size {
            return Err(fmt_err(size + 1, "fewer tokens than declared"));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Stable fingerprint of the serialized vocabulary.
    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.to_text().as_bytes());
        let mut first = [0u8; 8];
        first.copy_from_slice(&digest[..8]);
        u64::from_le_bytes(first)
    }
}

/// Learns a vocabulary of (at most) `target_size` tokens by greedy pair
/// merging. Ties in pair frequency go to the lexicographically smaller pair
/// of byte strings. A pair whose concatenation already exists as a token is
/// never merged.
pub fn build_vocab<S: AsRef<str>>(
    corpus: &[S],
    target_size: usize,
) -> Result<Vocab, TokenizerError> {
    if target_size < MIN_VOCAB_SIZE {
        return Err(TokenizerError::TargetTooSmall {
            requested: target_size,
            minimum: MIN_VOCAB_SIZE,
        });
    }
    if corpus.iter().all(|t| t.as_ref().is_empty()) {
        return Err(TokenizerError::EmptyCorpus);
    }
    let mut counts: HashMap<&[u8], usize> = HashMap::new();
    for text in corpus {
        for chunk in chunks(text.as_ref().as_bytes()) {
            *counts.entry(chunk).or_default() += 1;
        }
    }
    let mut words: Vec<(Vec<u32>, usize)> = counts
        .into_iter()
        .map(|(chunk, n)| (chunk.iter().map(|&b| BYTE_OFFSET + b as u32).collect(), n))
        .collect();
    words.sort();

    let mut vocab = Vocab::base();
    let mut rejected: HashSet<(u32, u32)> = HashSet::new();
    while vocab.len() < target_size {
        let mut pair_counts: HashMap<(u32, u32), usize> = HashMap::new();
        for (ids, n) in &words {
            for w in ids.windows(2) {
                *pair_counts.entry((w[0], w[1])).or_default() += n;
            }
        }
        let best = pair_counts
            .into_iter()
            .filter(|(pair, n)| *n >= 2 && !rejected.contains(pair))
            .max_by(|(pa, na), (pb, nb)| {
                na.cmp(nb).then_with(|| {
                    let ka = (
                        vocab.id_to_token[pa.0 as usize].as_slice(),
                        vocab.id_to_token[pa.1 as usize].as_slice(),
                    );
                    let kb = (
                        vocab.id_to_token[pb.0 as usize].as_slice(),
                        vocab.id_to_token[pb.1 as usize].as_slice(),
                    );
                    kb.cmp(&ka)
                })
            });
        let Some(((l, r), _)) = best else { break };
        let mut joined = vocab.id_to_token[l as usize].clone();
        joined.extend_from_slice(&vocab.id_to_token[r as usize]);
        if vocab.token_to_id.contains_key(&joined) {
            rejected.insert((l, r));
            continue;
        }
        let new_id = vocab.push_merge(l, r);
        for (ids, _) in words.iter_mut() {
            if ids.len() >= 2 {
                *ids = merge_pair(ids, l, r, new_id);
            }
        }
    }
    Ok(vocab)
}

fn merge_pair(ids: &[u32], l: u32, r: u32, new_id: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(ids.len());
    let mut i = 0;
    while i < ids.len() {
        if i + 1 < ids.len() && ids[i] == l && ids[i + 1] == r {
            out.push(new_id);
            i += 2;
        } else {
            out.push(ids[i]);
            i += 1;
        }
    }
    out
}

/// Splits bytes into (whitespace run, non-whitespace run) chunks.
fn chunks(bytes: &[u8]) -> impl Iterator<Item = &[u8]> {
    let mut start = 0;
    std::iter::from_fn(move || {
        if start >= bytes.len() {
            return None;
        }
        let mut i = start;
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        let chunk = &bytes[start..i];
        start = i;
        Some(chunk)
    })
}

fn escape(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len());
    for &b in bytes {
        match b {
            b'\\' => s.push_str("\\\\"),
            0x21..=0x7e => s.push(b as char),
            _ => {
                let _ = write!(s, "\\x{b:02x}");
            }
        }
    }
    s
}

fn unescape(s: &str) -> Option<Vec<u8>> {
    let bytes = s.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'\\' {
            match bytes.get(i + 1)? {
                b'\\' => {
                    out.push(b'\\');
                    i += 2;
                }
                b'x' => {
                    let hex = std::str::from_utf8(bytes.get(i + 2..i + 4)?).ok()?;
                    out.push(u8::from_str_radix(hex, 16).ok()?);
                    i += 4;
                }
                _ => return None,
            }
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    Some(out)
}
