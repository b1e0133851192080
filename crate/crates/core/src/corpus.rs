// SPDX-License-Identifier: MIT OR Apache-2.0

//! Corpus ingestion: vocabulary, tokenization, token streams and batching.
//!
//! Tokenization is word level: text is lowercased, split on whitespace, and
//! each chunk is further split into runs of alphanumeric characters and
//! single punctuation characters. A document is a blank-line separated
//! paragraph of an input file; every document starts with [`BOS`].

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const UNK: u32 = 0;
pub const BOS: u32 = 1;
pub const UNK_TOKEN: &str = "<unk>";
pub const BOS_TOKEN: &str = "<bos>";
pub const RESERVED: usize = 2;
pub const DEFAULT_MAX_VOCAB: usize = 2048;

pub const STREAM_MAGIC: &[u8; 8] = b"SUBLAB01";

/// Splits text into lowercase word and punctuation tokens.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for ch in chunk.chars().flat_map(char::to_lowercase) {
            if ch.is_alphanumeric() {
                word.push(ch);
            } else {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(ch.to_string());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

/// Splits a file's contents into documents at blank lines.
pub fn split_documents(text: &str) -> Vec<&str> {
    let mut docs = Vec::new();
    let mut start: Option<usize> = None;
    let mut offset = 0;
    let mut last_end = 0;
    for line in text.split_inclusive('\n') {
        let blank = line.trim().is_empty();
        match (blank, start) {
            (false, None) => start = Some(offset),
            (true, Some(s)) => {
                docs.push(&text[s..last_end]);
                start = None;
            }
            _ => {}
        }
        offset += line.len();
        if !blank {
            last_end = offset;
        }
    }
    if let Some(s) = start {
        docs.push(&text[s..last_end]);
    }
    docs
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Bijective token <-> id map with reserved unknown and boundary ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Builds a vocabulary from token strings in id order. The first two
    /// entries must be the reserved markers.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED || tokens[0] != UNK_TOKEN || tokens[1] != BOS_TOKEN {
            return Err(Error::InvalidInput(
                "vocabulary must start with the reserved <unk> and <bos> tokens".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::InvalidInput(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// Top `max_vocab - RESERVED` tokens by frequency, ties broken
    /// lexicographically.
    pub fn from_counts(counts: &HashMap<String, u64>, max_vocab: usize) -> Result<Self> {
        if max_vocab <= RESERVED {
            return Err(Error::InvalidArgument(format!(
                "max_vocab {max_vocab} leaves no room beyond the {RESERVED} reserved ids"
            )));
        }
        if counts.is_empty() {
            return Err(Error::InvalidInput("corpus has no tokens".into()));
        }
        let mut ranked: Vec<(&String, u64)> = counts.iter().map(|(t, &c)| (t, c)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let mut tokens = vec![UNK_TOKEN.to_string(), BOS_TOKEN.to_string()];
        tokens.extend(
            ranked
                .into_iter()
                .take(max_vocab - RESERVED)
                .map(|(t, _)| t.clone()),
        );
        Vocab::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// SHA-256 over the tokens in id order.
    pub fn hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update((t.len() as u64).to_le_bytes());
            h.update(t.as_bytes());
        }
        h.finalize().into()
    }

    pub fn hash_hex(&self) -> String {
        hex::encode(self.hash())
    }

    /// JSON object mapping token to id.
    pub fn to_json(&self) -> String {
        let map: BTreeMap<&str, u32> = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_str(), i as u32))
            .collect();
        serde_json::to_string_pretty(&map).expect("vocab serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let map: BTreeMap<String, u32> =
            serde_json::from_str(text).map_err(|e| Error::format("vocab json", e))?;
        let mut tokens = vec![None; map.len()];
        for (t, id) in map {
            let slot = tokens
                .get_mut(id as usize)
                .ok_or_else(|| Error::format("vocab json", format!("id {id} not contiguous")))?;
            *slot = Some(t);
        }
        let tokens = tokens
            .into_iter()
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::format("vocab json", "ids not contiguous"))?;
        Vocab::from_tokens(tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Vocab::from_json(&read_text(path)?)
    }

    /// Token ids of `text`; out-of-vocabulary words map to [`UNK`].
    pub fn encode(&self, text: &str) -> Vec<u32> {
        split_words(text)
            .iter()
            .map(|w| self.id(w).unwrap_or(UNK))
            .collect()
    }

    /// Space-joined token strings.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(UNK_TOKEN))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Counts word tokens over every document of every file.
pub fn count_tokens(corpus_paths: &[PathBuf]) -> Result<HashMap<String, u64>> {
    let mut counts: HashMap<String, u64> = HashMap::new();
    for path in corpus_paths {
        let text = read_text(path)?;
        for w in split_words(&text) {
            *counts.entry(w).or_default() += 1;
        }
    }
    Ok(counts)
}

pub fn build_vocab(corpus_paths: &[PathBuf], max_vocab: usize) -> Result<Vocab> {
    if corpus_paths.is_empty() {
        return Err(Error::InvalidInput("no corpus files given".into()));
    }
    let counts = count_tokens(corpus_paths)?;
    Vocab::from_counts(&counts, max_vocab)
}

/// A sequence of token ids plus where it came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenStream {
    pub ids: Vec<u32>,
    pub sources: Vec<String>,
    pub vocab_hash: String,
}

impl TokenStream {
    pub fn new(ids: Vec<u32>, vocab: &Vocab) -> Self {
        TokenStream {
            ids,
            sources: Vec::new(),
            vocab_hash: vocab.hash_hex(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Checks every id is valid for a vocabulary of `vocab_size`.
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        match self.ids.iter().find(|&&i| i as usize >= vocab_size) {
            Some(bad) => Err(Error::InvalidArgument(format!(
                "token id {bad} out of range for vocabulary of {vocab_size}"
            ))),
            None => Ok(()),
        }
    }

    /// Splits off the trailing `frac` of the stream: `(head, tail)`.
    pub fn split_tail(&self, frac: f64) -> (TokenStream, TokenStream) {
        let tail = ((self.ids.len() as f64) * frac).round() as usize;
        let cut = self.ids.len() - tail.min(self.ids.len());
        let mk = |ids: &[u32]| TokenStream {
            ids: ids.to_vec(),
            sources: self.sources.clone(),
            vocab_hash: self.vocab_hash.clone(),
        };
        (mk(&self.ids[..cut]), mk(&self.ids[cut..]))
    }

    /// SHA-256 of the id payload.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for id in &self.ids {
            h.update(id.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let hash = hex::decode(&self.vocab_hash)
            .map_err(|e| Error::format("token stream", format!("vocab hash: {e}")))?;
        if hash.len() != 32 {
            return Err(Error::format("token stream", "vocab hash must be 32 bytes"));
        }
        let mut out = Vec::with_capacity(40 + 4 * self.ids.len());
        out.extend_from_slice(STREAM_MAGIC);
        out.extend_from_slice(&hash);
        for id in &self.ids {
            out.extend_from_slice(&id.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 40 || &bytes[..8] != STREAM_MAGIC {
            return Err(Error::format("token stream", "missing SUBLAB01 header"));
        }
        let body = &bytes[40..];
        if body.len() % 4 != 0 {
            return Err(Error::format("token stream", "truncated id payload"));
        }
        Ok(TokenStream {
            ids: body
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
            sources: Vec::new(),
            vocab_hash: hex::encode(&bytes[8..40]),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let mut s = TokenStream::from_bytes(&bytes)?;
        s.sources = vec![path.display().to_string()];
        Ok(s)
    }
}

/// Tokenizes `text` without adding boundary markers.
pub fn tokenize(text: &str, vocab: &Vocab) -> TokenStream {
    TokenStream::new(vocab.encode(text), vocab)
}

/// Tokenizes corpus files, prepending [`BOS`] to every document.
pub fn tokenize_corpus(corpus_paths: &[PathBuf], vocab: &Vocab) -> Result<TokenStream> {
    let mut ids = Vec::new();
    for path in corpus_paths {
        let text = read_text(path)?;
        for doc in split_documents(&text) {
            ids.push(BOS);
            ids.extend(vocab.encode(doc));
        }
    }
    Ok(TokenStream {
        ids,
        sources: corpus_paths
            .iter()
            .map(|p| p.display().to_string())
            .collect(),
        vocab_hash: vocab.hash_hex(),
    })
}

/// One `(batch × seq_len)` block of token ids, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub ids: Vec<u32>,
    pub batch: usize,
    pub seq_len: usize,
}

impl Batch {
    pub fn ids_usize(&self) -> Vec<usize> {
        self.ids.iter().map(|&i| i as usize).collect()
    }
}

/// Non-overlapping contiguous windows of `seq_len` tokens; the trailing
/// partial window is dropped.
pub fn windows(stream: &TokenStream, seq_len: usize) -> Result<Vec<&[u32]>> {
    if seq_len == 0 {
        return Err(Error::InvalidArgument("seq_len must be positive".into()));
    }
    if stream.len() < seq_len {
        return Err(Error::InvalidInput(format!(
            "stream of {} tokens is shorter than seq_len {seq_len}",
            stream.len()
        )));
    }
    Ok(stream.ids.chunks_exact(seq_len).collect())
}

/// Groups windows into batches of `batch` windows. With a seed the window
/// order is shuffled deterministically; an incomplete final batch is dropped.
pub fn batch_sequences(
    stream: &TokenStream,
    seq_len: usize,
    batch: usize,
    shuffle_seed: Option<u64>,
) -> Result<Vec<Batch>> {
    if batch == 0 {
        return Err(Error::InvalidArgument("batch must be positive".into()));
    }
    let mut wins = windows(stream, seq_len)?;
    if let Some(seed) = shuffle_seed {
        wins.shuffle(&mut crate::rng::stream(seed, "batch-order"));
    }
    Ok(wins
        .chunks_exact(batch)
        .map(|group| Batch {
            ids: group.concat(),
            batch,
            seq_len,
        })
        .collect())
}

/// Stream positions that carry a surprisal value.
///
/// The stream is cut into consecutive windows of `seq_len` tokens (the last
/// one may be shorter). Within each window every position except the first
/// is scored, unless its token is [`BOS`]: a document start has no
/// meaningful predecessor. Language-model and bigram surprisal series both
/// use this set, so they align element by element.
pub fn scored_positions(ids: &[u32], seq_len: usize) -> Result<Vec<usize>> {
    if seq_len < 2 {
        return Err(Error::InvalidArgument(format!(
            "seq_len {seq_len} leaves nothing to score"
        )));
    }
    Ok((0..ids.len())
        .filter(|&i| i % seq_len != 0 && ids[i] != BOS)
        .collect())
}
