// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary masks and their file format:
//!
//! ```text
//! "SUBLABMK" | header length (u64 LE) | JSON header | bit-packed payload
//! ```
//!
//! Bits are stored per tensor in row-major order, least significant bit
//! first, each tensor starting on a fresh byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::{MaskSet, TargetKind, UNDECIDED_HIGH, UNDECIDED_LOW};
use crate::autodiff::sigmoid;
use crate::error::{Error, Result};
use crate::model::{BlockKind, ParamInfo, ParamSet};
use crate::tensor::{Scalar, Tensor};

pub const MASK_MAGIC: &[u8; 8] = b"SUBLABMK";

/// Where a binary mask came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskProvenance {
    pub lambda: Option<f64>,
    /// `bigram`, `model`, `random` or `manual`.
    pub target: String,
    pub source_checkpoint_hash: String,
    pub threshold: Option<f64>,
    pub temperature: Option<f64>,
    pub steps: Option<u64>,
    pub seed: Option<u64>,
}

impl MaskProvenance {
    pub fn manual(source_checkpoint_hash: &str) -> Self {
        MaskProvenance {
            lambda: None,
            target: "manual".into(),
            source_checkpoint_hash: source_checkpoint_hash.into(),
            threshold: None,
            temperature: None,
            steps: None,
            seed: None,
        }
    }
}

/// Active count of one `(layer, block kind)` group.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockCount {
    pub layer: Option<usize>,
    pub kind: BlockKind,
    pub active: u64,
    pub total: u64,
}

/// One keep/drop bit per maskable parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    /// Maskable tensors in model order.
    pub infos: Vec<ParamInfo>,
    pub bits: Vec<Vec<bool>>,
    pub provenance: MaskProvenance,
    /// Fraction of mask values in [0.10, 0.90] when binarized.
    pub undecided_fraction: f64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    tensors: Vec<TensorEntry>,
    blocks: Vec<BlockCount>,
    active: u64,
    total: u64,
    undecided_fraction: f64,
    provenance: MaskProvenance,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    kind: BlockKind,
    layer: Option<usize>,
    shape: Vec<usize>,
    active: u64,
}

/// Whether `apply_binary` keeps or removes the masked parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    /// θ·B: only the subnetwork survives.
    Keep,
    /// θ·(1−B): the subnetwork is removed.
    Ablate,
}

impl BinaryMask {
    /// Constant mask over the maskable tensors of `params`.
    pub fn constant<F: Scalar>(params: &ParamSet<F>, on: bool, provenance: MaskProvenance) -> Self {
        let idx = params.maskable_indices();
        BinaryMask {
            infos: idx.iter().map(|&k| params.infos[k].clone()).collect(),
            bits: idx
                .iter()
                .map(|&k| vec![on; params.tensors[k].len()])
                .collect(),
            provenance,
            undecided_fraction: 0.0,
        }
    }

    /// Thresholds σ(m/T) with a strict `>`.
    pub fn from_mask_set<F: Scalar>(
        params: &ParamSet<F>,
        mask: &MaskSet<F>,
        threshold: f64,
        provenance: MaskProvenance,
    ) -> Result<Self> {
        mask.check(params)?;
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "threshold must lie in (0, 1), got {threshold}"
            )));
        }
        let inv = 1.0 / mask.temperature;
        let mut undecided = 0usize;
        let bits = mask
            .logits
            .iter()
            .map(|l| {
                l.iter()
                    .map(|&m| {
                        let v = sigmoid(m.to_f64().unwrap_or(f64::NAN) * inv);
                        if (UNDECIDED_LOW..=UNDECIDED_HIGH).contains(&v) {
                            undecided += 1;
                        }
                        v > threshold
                    })
                    .collect()
            })
            .collect();
        Ok(BinaryMask {
            infos: params
                .maskable_indices()
                .into_iter()
                .map(|k| params.infos[k].clone())
                .collect(),
            bits,
            provenance,
            undecided_fraction: undecided as f64 / mask.len().max(1) as f64,
        })
    }

    pub fn total(&self) -> u64 {
        self.bits.iter().map(|b| b.len() as u64).sum()
    }

    pub fn active(&self) -> u64 {
        self.bits
            .iter()
            .map(|b| b.iter().filter(|&&x| x).count() as u64)
            .sum()
    }

    pub fn tensor_active(&self) -> Vec<u64> {
        self.bits
            .iter()
            .map(|b| b.iter().filter(|&&x| x).count() as u64)
            .collect()
    }

    /// Active counts grouped by layer and block kind, in model order.
    pub fn block_counts(&self) -> Vec<BlockCount> {
        let mut groups: BTreeMap<(Option<usize>, BlockKind), (u64, u64)> = BTreeMap::new();
        for (info, a) in self.infos.iter().zip(self.tensor_active()) {
            let e = groups.entry((info.layer, info.kind)).or_default();
            e.0 += a;
            e.1 += info.numel() as u64;
        }
        groups
            .into_iter()
            .map(|((layer, kind), (active, total))| BlockCount {
                layer,
                kind,
                active,
                total,
            })
            .collect()
    }

    /// Checks the mask was built for the maskable tensors of `params`.
    pub fn check<F: Scalar>(&self, params: &ParamSet<F>) -> Result<()> {
        let idx = params.maskable_indices();
        let same = idx.len() == self.infos.len()
            && idx
                .iter()
                .zip(&self.infos)
                .zip(&self.bits)
                .all(|((&k, info), b)| &params.infos[k] == info && b.len() == info.numel());
        if !same {
            return Err(Error::InvalidArgument(
                "binary mask does not match the model's maskable tensors".into(),
            ));
        }
        Ok(())
    }

    /// Same tensors, same shapes.
    pub fn compatible(&self, other: &BinaryMask) -> bool {
        self.infos == other.infos
    }

    /// Number of parameters active in both masks.
    pub fn intersection(&self, other: &BinaryMask) -> Result<u64> {
        if !self.compatible(other) {
            return Err(Error::InvalidArgument(
                "masks cover different parameter sets".into(),
            ));
        }
        Ok(self
            .bits
            .iter()
            .zip(&other.bits)
            .map(|(a, b)| a.iter().zip(b).filter(|(x, y)| **x && **y).count() as u64)
            .sum())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let active = self.tensor_active();
        let header = serde_json::to_vec(&Header {
            tensors: self
                .infos
                .iter()
                .zip(&active)
                .map(|(i, &a)| TensorEntry {
                    name: i.name.clone(),
                    kind: i.kind,
                    layer: i.layer,
                    shape: i.shape.clone(),
                    active: a,
                })
                .collect(),
            blocks: self.block_counts(),
            active: active.iter().sum(),
            total: self.total(),
            undecided_fraction: self.undecided_fraction,
            provenance: self.provenance.clone(),
        })
        .expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MASK_MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for b in &self.bits {
            let mut bytes = vec![0u8; b.len().div_ceil(8)];
            for (i, _) in b.iter().enumerate().filter(|(_, &x)| x) {
                bytes[i / 8] |= 1 << (i % 8);
            }
            out.extend_from_slice(&bytes);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const WHAT: &str = "binary mask";
        if bytes.len() < 16 || &bytes[..8] != MASK_MAGIC {
            return Err(Error::format(WHAT, "missing SUBLABMK header"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let end = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::format(WHAT, "truncated header"))?;
        let h: Header = serde_json::from_slice(&bytes[16..end])
            .map_err(|e| Error::format(WHAT, e.to_string()))?;
        let mut pos = end;
        let mut infos = Vec::with_capacity(h.tensors.len());
        let mut bits = Vec::with_capacity(h.tensors.len());
        for t in h.tensors {
            let n: usize = t.shape.iter().product();
            let nb = n.div_ceil(8);
            let raw = bytes
                .get(pos..pos + nb)
                .ok_or_else(|| Error::format(WHAT, format!("payload too short for {}", t.name)))?;
            pos += nb;
            let b: Vec<bool> = (0..n).map(|i| raw[i / 8] >> (i % 8) & 1 == 1).collect();
            if b.iter().filter(|&&x| x).count() as u64 != t.active {
                return Err(Error::format(
                    WHAT,
                    format!("active count of {} disagrees with payload", t.name),
                ));
            }
            bits.push(b);
            infos.push(ParamInfo {
                name: t.name,
                kind: t.kind,
                layer: t.layer,
                shape: t.shape,
            });
        }
        if pos != bytes.len() {
            return Err(Error::format(WHAT, "trailing bytes after payload"));
        }
        Ok(BinaryMask {
            infos,
            bits,
            provenance: h.provenance,
            undecided_fraction: h.undecided_fraction,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        BinaryMask::from_bytes(&bytes)
    }
}

impl<F: Scalar> MaskSet<F> {
    /// Binary mask with `bit = σ(m/T) > threshold`.
    pub fn binarize(
        &self,
        params: &ParamSet<F>,
        threshold: f64,
        source_checkpoint_hash: &str,
    ) -> Result<BinaryMask> {
        BinaryMask::from_mask_set(
            params,
            self,
            threshold,
            MaskProvenance {
                lambda: Some(self.lambda),
                target: match self.target {
                    TargetKind::Bigram => "bigram".into(),
                    TargetKind::ModelDistill => "model".into(),
                },
                source_checkpoint_hash: source_checkpoint_hash.into(),
                threshold: Some(threshold),
                temperature: Some(self.temperature),
                steps: Some(self.step),
                seed: None,
            },
        )
    }
}

/// Parameters with the mask applied: `Keep` zeroes everything outside the
/// mask, `Ablate` zeroes everything inside it. Non-maskable tensors are
/// always copied unchanged.
pub fn apply_binary<F: Scalar>(
    params: &ParamSet<F>,
    mask: &BinaryMask,
    mode: MaskMode,
) -> Result<ParamSet<F>> {
    mask.check(params)?;
    let mut out = params.clone();
    for (bits, k) in mask.bits.iter().zip(params.maskable_indices()) {
        let keep_when = mode == MaskMode::Keep;
        let data: Vec<F> = params.tensors[k]
            .data()
            .iter()
            .zip(bits)
            .map(|(&x, &b)| if b == keep_when { x } else { F::zero() })
            .collect();
        out.tensors[k] = Tensor::new(params.tensors[k].shape().to_vec(), data)?;
    }
    Ok(out)
}

/// Random mask with exactly the same number of active bits in every tensor,
/// positions drawn uniformly without replacement.
pub fn random_matched_mask(mask: &BinaryMask, seed: u64) -> BinaryMask {
    let mut rng = crate::rng::stream(seed, "random-matched-mask");
    let bits = mask
        .bits
        .iter()
        .map(|b| {
            let n = b.len();
            let k = b.iter().filter(|&&x| x).count();
            let mut out = vec![false; n];
            for i in sample(&mut rng, n, k) {
                out[i] = true;
            }
            out
        })
        .collect();
    BinaryMask {
        infos: mask.infos.clone(),
        bits,
        provenance: MaskProvenance {
            lambda: mask.provenance.lambda,
            target: "random".into(),
            source_checkpoint_hash: mask.provenance.source_checkpoint_hash.clone(),
            threshold: None,
            temperature: None,
            steps: None,
            seed: Some(seed),
        },
        undecided_fraction: 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn params() -> ParamSet<f32> {
        ParamSet::init(&ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 4,
            d_mlp: 8,
            vocab_size: 5,
            max_seq_len: 4,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn sparse(p: &ParamSet<f32>) -> BinaryMask {
        let mut m = BinaryMask::constant(p, false, MaskProvenance::manual("x"));
        for (t, b) in m.bits.iter_mut().enumerate() {
            for (i, x) in b.iter_mut().enumerate() {
                *x = (i * 7 + t) % 5 == 0;
            }
        }
        m
    }

    #[test]
    fn zero_logits_binarize_to_zero() {
        let p = params();
        let ms = MaskSet::new(&p, 0.0, TargetKind::Bigram, 1.0).unwrap();
        let b = ms.binarize(&p, 0.5, "h").unwrap();
        assert_eq!(b.active(), 0);
        assert_eq!(b.undecided_fraction, 1.0);
    }

    #[test]
    fn saturated_binarization_ignores_threshold() {
        let p = params();
        let mut ms = MaskSet::new(&p, 0.0, TargetKind::Bigram, 1.0).unwrap();
        for (t, l) in ms.logits.iter_mut().enumerate() {
            for (i, m) in l.iter_mut().enumerate() {
                *m = if (i + t) % 3 == 0 { 12.0 } else { -12.0 };
            }
        }
        let a = ms.binarize(&p, 0.11, "h").unwrap();
        let b = ms.binarize(&p, 0.89, "h").unwrap();
        assert_eq!(a.bits, b.bits);
        assert_eq!(a.undecided_fraction, 0.0);
    }

    #[test]
    fn keep_and_ablate_partition() {
        let p = params();
        let m = sparse(&p);
        let keep = apply_binary(&p, &m, MaskMode::Keep).unwrap();
        let ablate = apply_binary(&p, &m, MaskMode::Ablate).unwrap();
        for k in 0..p.len() {
            for ((a, b), c) in keep.tensors[k]
                .data()
                .iter()
                .zip(ablate.tensors[k].data())
                .zip(p.tensors[k].data())
            {
                if p.infos[k].maskable() {
                    assert_eq!(a + b, *c);
                    assert!(*a == 0.0 || *b == 0.0);
                } else {
                    assert_eq!((a, b), (c, c));
                }
            }
        }
        let all = BinaryMask::constant(&p, true, MaskProvenance::manual("x"));
        assert_eq!(apply_binary(&p, &all, MaskMode::Keep).unwrap(), p);
        let gone = apply_binary(&p, &all, MaskMode::Ablate).unwrap();
        for k in p.maskable_indices() {
            assert!(gone.tensors[k].data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn random_matched_keeps_tensor_counts() {
        let p = params();
        let m = sparse(&p);
        let r = random_matched_mask(&m, 9);
        assert_eq!(r.tensor_active(), m.tensor_active());
        assert_ne!(r.bits, m.bits);
        assert_eq!(random_matched_mask(&m, 9), r);
        let full = BinaryMask::constant(&p, true, MaskProvenance::manual("x"));
        assert_eq!(random_matched_mask(&full, 1).bits, full.bits);
    }

    #[test]
    fn block_counts_sum_to_total() {
        let p = params();
        let m = sparse(&p);
        let blocks = m.block_counts();
        assert_eq!(blocks.iter().map(|b| b.active).sum::<u64>(), m.active());
        assert_eq!(blocks.iter().map(|b| b.total).sum::<u64>(), m.total());
        assert_eq!(blocks.len(), 2 * 6);
    }

    #[test]
    fn file_roundtrip() {
        let p = params();
        let m = sparse(&p);
        let back = BinaryMask::from_bytes(&m.to_bytes()).unwrap();
        assert_eq!(back, m);
        let mut bytes = m.to_bytes();
        bytes.push(0);
        assert!(BinaryMask::from_bytes(&bytes).is_err());
        assert!(BinaryMask::from_bytes(b"SUBLABCK").is_err());
    }

    #[test]
    fn mismatched_mask_rejected() {
        let p = params();
        let mut m = sparse(&p);
        m.bits[0].pop();
        assert!(apply_binary(&p, &m, MaskMode::Keep).is_err());
    }
}
