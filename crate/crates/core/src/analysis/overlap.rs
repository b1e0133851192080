// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;

pub const DEFAULT_OVERLAP_SAMPLES: usize = 10_000;

/// Parameter overlap of two subnetworks against a block-matched null.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapStats {
    /// Active fraction of each mask over all maskable parameters.
    pub proportion0: f64,
    pub proportion1: f64,
    /// Fraction of maskable parameters active in both.
    pub overlap: f64,
    /// `Σ_b n0_b n1_b / N_b` over tensors, as a fraction of all parameters.
    pub expected: f64,
    /// Mean and standard deviation of the sampled null overlaps.
    pub null_mean: f64,
    pub null_sd: f64,
    pub ratio: f64,
    /// Share of the first mask's active parameters also active in the second.
    pub contained: f64,
    pub p_value: f64,
    pub n_samples: usize,
}

/// Compares the overlap of `b0` and `b1` to random mask pairs with the same
/// active count in every tensor.
///
/// `p = (#{null overlap ≥ actual} + 1) / (n_samples + 1)`.
pub fn overlap_test(
    b0: &BinaryMask,
    b1: &BinaryMask,
    n_samples: usize,
    seed: u64,
) -> Result<OverlapStats> {
    if !b0.compatible(b1) {
        return Err(Error::InvalidArgument(
            "masks cover different parameter sets".into(),
        ));
    }
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be positive".into()));
    }
    let total = b0.total();
    if total == 0 {
        return Err(Error::InvalidInput("masks cover no parameters".into()));
    }
    let (a0, a1) = (b0.tensor_active(), b1.tensor_active());
    let sizes: Vec<usize> = b0.bits.iter().map(Vec::len).collect();
    let actual = b0.intersection(b1)?;
    let expected_count: f64 = sizes
        .iter()
        .zip(a0.iter().zip(&a1))
        .map(|(&n, (&k0, &k1))| k0 as f64 * k1 as f64 / n as f64)
        .sum();

    let mut rng = crate::rng::stream(seed, "overlap-null");
    let mut marks: Vec<Vec<bool>> = sizes.iter().map(|&n| vec![false; n]).collect();
    let mut exceed = 0usize;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n_samples {
        let mut hits = 0u64;
        for (b, &n) in sizes.iter().enumerate() {
            let (k0, k1) = (a0[b] as usize, a1[b] as usize);
            if k0 == 0 || k1 == 0 {
                continue;
            }
            let first = sample(&mut rng, n, k0);
            for i in first.iter() {
                marks[b][i] = true;
            }
            hits += sample(&mut rng, n, k1)
                .iter()
                .filter(|&i| marks[b][i])
                .count() as u64;
            for i in first.iter() {
                marks[b][i] = false;
            }
        }
        if hits >= actual {
            exceed += 1;
        }
        sum += hits as f64;
        sum_sq += (hits as f64) * (hits as f64);
    }
    let mean = sum / n_samples as f64;
    let var = if n_samples > 1 {
        ((sum_sq - n_samples as f64 * mean * mean) / (n_samples - 1) as f64).max(0.0)
    } else {
        0.0
    };
    let t = total as f64;
    let active0 = b0.active();
    Ok(OverlapStats {
        proportion0: active0 as f64 / t,
        proportion1: b1.active() as f64 / t,
        overlap: actual as f64 / t,
        expected: expected_count / t,
        null_mean: mean / t,
        null_sd: var.sqrt() / t,
        ratio: if expected_count > 0.0 {
            actual as f64 / expected_count
        } else {
            f64::NAN
        },
        contained: if active0 > 0 {
            actual as f64 / active0 as f64
        } else {
            f64::NAN
        },
        p_value: (exceed + 1) as f64 / (n_samples + 1) as f64,
        n_samples,
    })
}
