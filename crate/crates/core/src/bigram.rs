// SPDX-License-Identifier: MIT OR Apache-2.0

//! Count-based bigram model.
//!
//! ```text
//! p(next | prev) = (count(prev, next) + ε) / (total(prev) + ε·V)   seen prev
//! p(next | prev) = 1 / V                                           unseen prev
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{scored_positions, TokenStream, BOS};
use crate::error::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct BigramTable {
    pub vocab_size: usize,
    pub epsilon: f64,
    pub corpus_hash: String,
    rows: BTreeMap<u32, BTreeMap<u32, u64>>,
    totals: BTreeMap<u32, u64>,
}

#[derive(Serialize, Deserialize)]
struct HeaderRow {
    vocab_size: usize,
    epsilon: f64,
    corpus_hash: String,
}

#[derive(Serialize, Deserialize)]
struct CountRow {
    prev: u32,
    next: u32,
    count: u64,
}

/// Counts adjacent pairs of `stream`.
///
/// A pair whose second token is [`BOS`] would join two documents and is
/// skipped; windows play no role here.
pub fn count_bigrams(stream: &TokenStream, vocab_size: usize, epsilon: f64) -> Result<BigramTable> {
    if !(epsilon >= 0.0) || !epsilon.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be finite and non-negative, got {epsilon}"
        )));
    }
    stream.validate(vocab_size)?;
    let mut table = BigramTable {
        vocab_size,
        epsilon,
        corpus_hash: stream.content_hash(),
        rows: BTreeMap::new(),
        totals: BTreeMap::new(),
    };
    for pair in stream.ids.windows(2) {
        if pair[1] != BOS {
            table.add(pair[0], pair[1]);
        }
    }
    if table.totals.is_empty() {
        return Err(Error::InvalidInput(format!(
            "stream of {} tokens holds no within-document pair",
            stream.len()
        )));
    }
    Ok(table)
}

impl BigramTable {
    fn add(&mut self, prev: u32, next: u32) {
        *self.rows.entry(prev).or_default().entry(next).or_insert(0) += 1;
        *self.totals.entry(prev).or_insert(0) += 1;
    }

    /// Records one more occurrence of `(prev, next)`.
    pub fn increment(&mut self, prev: u32, next: u32) -> Result<()> {
        self.check_id(prev)?;
        self.check_id(next)?;
        self.add(prev, next);
        Ok(())
    }

    fn check_id(&self, id: u32) -> Result<()> {
        if id as usize >= self.vocab_size {
            return Err(Error::InvalidArgument(format!(
                "token id {id} out of range for vocabulary of {}",
                self.vocab_size
            )));
        }
        Ok(())
    }

    pub fn count(&self, prev: u32, next: u32) -> u64 {
        self.rows
            .get(&prev)
            .and_then(|r| r.get(&next))
            .copied()
            .unwrap_or(0)
    }

    pub fn row_total(&self, prev: u32) -> u64 {
        self.totals.get(&prev).copied().unwrap_or(0)
    }

    /// Non-zero counts of one row, ordered by next id.
    pub fn row(&self, prev: u32) -> impl Iterator<Item = (u32, u64)> + '_ {
        self.rows
            .get(&prev)
            .into_iter()
            .flat_map(|r| r.iter().map(|(&n, &c)| (n, c)))
    }

    pub fn n_pairs(&self) -> u64 {
        self.totals.values().sum()
    }

    /// `p(next | prev)` for one pair.
    pub fn prob(&self, prev: u32, next: u32) -> Result<f64> {
        self.check_id(prev)?;
        self.check_id(next)?;
        let v = self.vocab_size as f64;
        Ok(match self.totals.get(&prev) {
            None => 1.0 / v,
            Some(&total) => {
                (self.count(prev, next) as f64 + self.epsilon) / (total as f64 + self.epsilon * v)
            }
        })
    }

    /// Full conditional distribution after `prev`.
    pub fn dist(&self, prev: u32) -> Result<Vec<f64>> {
        self.check_id(prev)?;
        let v = self.vocab_size;
        let Some(&total) = self.totals.get(&prev) else {
            return Ok(vec![1.0 / v as f64; v]);
        };
        let denom = total as f64 + self.epsilon * v as f64;
        let mut out = vec![self.epsilon / denom; v];
        for (next, c) in self.row(prev) {
            out[next as usize] = (c as f64 + self.epsilon) / denom;
        }
        Ok(out)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&HeaderRow {
            vocab_size: self.vocab_size,
            epsilon: self.epsilon,
            corpus_hash: self.corpus_hash.clone(),
        })
        .expect("header serializes");
        out.push('\n');
        for (&prev, row) in &self.rows {
            for (&next, &count) in row {
                out.push_str(
                    &serde_json::to_string(&CountRow { prev, next, count })
                        .expect("row serializes"),
                );
                out.push('\n');
            }
        }
        out
    }

    pub fn from_jsonl(reader: impl BufRead) -> Result<Self> {
        const WHAT: &str = "bigram table";
        let mut lines = reader.lines();
        let head = lines
            .next()
            .ok_or_else(|| Error::format(WHAT, "empty file"))?
            .map_err(|e| Error::format(WHAT, e.to_string()))?;
        let h: HeaderRow =
            serde_json::from_str(&head).map_err(|e| Error::format(WHAT, format!("header: {e}")))?;
        let mut table = BigramTable {
            vocab_size: h.vocab_size,
            epsilon: h.epsilon,
            corpus_hash: h.corpus_hash,
            rows: BTreeMap::new(),
            totals: BTreeMap::new(),
        };
        for (n, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::format(WHAT, e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let r: CountRow = serde_json::from_str(&line)
                .map_err(|e| Error::format(WHAT, format!("row {}: {e}", n + 2)))?;
            if r.prev as usize >= table.vocab_size || r.next as usize >= table.vocab_size {
                return Err(Error::format(WHAT, format!("row {}: id out of range", n + 2)));
            }
            *table.rows.entry(r.prev).or_default().entry(r.next).or_insert(0) += r.count;
            *table.totals.entry(r.prev).or_insert(0) += r.count;
        }
        Ok(table)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        w.write_all(self.to_jsonl().as_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        BigramTable::from_jsonl(BufReader::new(f))
    }
}

/// `-ln p(w_i | w_{i-1})` at the positions scored by the language model
/// with context `seq_len`, so both series align element by element.
pub fn bigram_surprisals(table: &BigramTable, stream: &TokenStream, seq_len: usize) -> Result<Vec<f64>> {
    stream.validate(table.vocab_size)?;
    scored_positions(&stream.ids, seq_len)?
        .into_iter()
        .map(|i| {
            let p = table.prob(stream.ids[i - 1], stream.ids[i])?;
            if p <= 0.0 {
                return Err(Error::InvalidInput(format!(
                    "pair ({}, {}) at position {i} has probability 0; use epsilon > 0",
                    stream.ids[i - 1],
                    stream.ids[i]
                )));
            }
            Ok(-p.ln())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const A: u32 = 2;
    const B: u32 = 3;
    const C: u32 = 4;

    fn stream(ids: Vec<u32>) -> TokenStream {
        TokenStream {
            ids,
            sources: vec![],
            vocab_hash: String::new(),
        }
    }

    #[test]
    fn hand_counts() {
        let t = count_bigrams(&stream(vec![A, B, A, B, A, C]), 5, 0.0).unwrap();
        assert_eq!(t.count(A, B), 2);
        assert_eq!(t.count(B, A), 2);
        assert_eq!(t.count(A, C), 1);
        assert_eq!(t.row_total(A), 3);
        assert_eq!(t.prob(A, B).unwrap(), 2.0 / 3.0);
        assert_eq!(t.prob(A, C).unwrap(), 1.0 / 3.0);
    }

    #[test]
    fn document_boundaries_are_not_crossed() {
        let t = count_bigrams(&stream(vec![BOS, A, B, BOS, C, A]), 5, 0.0).unwrap();
        assert_eq!(t.count(B, BOS), 0);
        assert_eq!(t.count(BOS, A), 1);
        assert_eq!(t.count(BOS, C), 1);
        assert_eq!(t.n_pairs(), 4);
    }

    #[test]
    fn degenerate_streams_rejected() {
        assert!(matches!(
            count_bigrams(&stream(vec![A]), 5, 0.0),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(
            count_bigrams(&stream(vec![BOS, BOS, BOS]), 5, 0.0),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn unseen_prefix_is_uniform_and_rows_normalize() {
        let t = count_bigrams(&stream(vec![A, B, A, B, A, C]), 5, 1e-6).unwrap();
        assert_eq!(t.dist(C).unwrap(), vec![0.2; 5]);
        for prev in 0..5 {
            let s: f64 = t.dist(prev).unwrap().iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        assert!(matches!(t.dist(5), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn surprisals() {
        let det = stream((0..40).map(|i| if i % 2 == 0 { A } else { B }).collect());
        let t = count_bigrams(&det, 5, 0.0).unwrap();
        assert!(bigram_surprisals(&t, &det, 8).unwrap().iter().all(|&s| s == 0.0));

        let s = stream(vec![A, B, A, B, A, C]);
        let t = count_bigrams(&s, 5, 0.0).unwrap();
        let out = bigram_surprisals(&t, &s, 6).unwrap();
        assert_eq!(out.len(), 5);
        assert!((out[0] - (1.5f64).ln()).abs() < 1e-12);
        assert!((out[0] - 0.4055).abs() < 1e-4);
    }

    #[test]
    fn jsonl_roundtrip() {
        let t = count_bigrams(&stream(vec![BOS, A, B, A, C, BOS, B]), 5, 1e-6).unwrap();
        let text = t.to_jsonl();
        assert!(text.lines().next().unwrap().contains("\"vocab_size\":5"));
        assert_eq!(BigramTable::from_jsonl(text.as_bytes()).unwrap(), t);
        assert!(BigramTable::from_jsonl("".as_bytes()).is_err());
    }
}
