// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::hash_map::DefaultHasher;
use std::collections::HashSet;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::corpus::TokenStream;
use crate::error::{Error, Result};
use crate::mask::{apply_binary, random_matched_mask, BinaryMask, MaskMode};
use crate::model::{heldout_loss, ParamSet};

/// Length of the token shingles compared by [`check_disjoint`].
pub const CONTAMINATION_SHINGLE: usize = 32;

/// Held-out shingles allowed to recur in the training stream. Long natural
/// texts repeat some passages verbatim, so a handful of matches is normal.
const CONTAMINATION_LIMIT: f64 = 0.05;

fn shingle_hash(s: &[u32]) -> u64 {
    let mut h = DefaultHasher::new();
    s.hash(&mut h);
    h.finish()
}

/// Fails with a contamination error when more than 5% of the held-out
/// 32-token shingles also occur in `training`.
pub fn check_disjoint(heldout: &TokenStream, training: &TokenStream) -> Result<()> {
    let k = CONTAMINATION_SHINGLE;
    if heldout.content_hash() == training.content_hash() {
        return Err(Error::Contamination(
            "held-out and training streams are identical".into(),
        ));
    }
    if heldout.len() < k || training.len() < k {
        return Ok(());
    }
    let seen: HashSet<u64> = training.ids.windows(k).map(shingle_hash).collect();
    let total = heldout.len() - k + 1;
    let hits = heldout
        .ids
        .windows(k)
        .filter(|w| seen.contains(&shingle_hash(w)))
        .count();
    let frac = hits as f64 / total as f64;
    if frac > CONTAMINATION_LIMIT {
        return Err(Error::Contamination(format!(
            "{hits} of {total} held-out {k}-token spans ({:.1}%) occur in the training stream",
            100.0 * frac
        )));
    }
    Ok(())
}

/// Held-out loss in nats under each ablation condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub full: f64,
    pub subnetwork_only: f64,
    pub bigram_ablated: f64,
    /// `(seed, loss)` with a parameter-count-matched random mask removed.
    pub random_ablated: Vec<(u64, f64)>,
    pub mask_active: u64,
}

impl AblationReport {
    pub fn bigram_delta(&self) -> f64 {
        self.bigram_ablated - self.full
    }

    pub fn random_deltas(&self) -> Vec<f64> {
        self.random_ablated.iter().map(|&(_, l)| l - self.full).collect()
    }

    /// `(condition, loss)` rows; random conditions are labelled by seed.
    pub fn rows(&self) -> Vec<(String, f64)> {
        let mut out = vec![
            ("full".to_string(), self.full),
            ("subnetwork_only".to_string(), self.subnetwork_only),
            ("bigram_ablated".to_string(), self.bigram_ablated),
        ];
        for &(seed, l) in &self.random_ablated {
            out.push((format!("random_ablated_seed{seed}"), l));
        }
        out
    }
}

/// Held-out loss of the full model, the subnetwork alone, the model without
/// the subnetwork and the model without random matched masks.
pub fn ablation_eval(
    params: &ParamSet<f32>,
    mask: &BinaryMask,
    heldout: &TokenStream,
    training: &TokenStream,
    seeds: &[u64],
) -> Result<AblationReport> {
    mask.check(params)?;
    check_disjoint(heldout, training)?;
    let loss = |mode: MaskMode, m: &BinaryMask| -> Result<f64> {
        heldout_loss(&apply_binary(params, m, mode)?, heldout, None)
    };
    let mut random_ablated = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let r = random_matched_mask(mask, seed);
        random_ablated.push((seed, loss(MaskMode::Ablate, &r)?));
    }
    Ok(AblationReport {
        full: heldout_loss(params, heldout, None)?,
        subnetwork_only: loss(MaskMode::Keep, mask)?,
        bigram_ablated: loss(MaskMode::Ablate, mask)?,
        random_ablated,
        mask_active: mask.active(),
    })
}
