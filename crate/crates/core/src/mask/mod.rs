// SPDX-License-Identifier: MIT OR Apache-2.0

//! Continuous sparsification over the maskable parameters of a frozen model.
//!
//! Every maskable scalar θ gets a real logit m. The effective parameter is
//! θ·σ(m/T), and training minimizes
//!
//! ```text
//! CE(target, MaskedModel(x)) + λ · mean(σ(m/T))
//! ```
//!
//! while T shrinks geometrically, pushing σ(m/T) towards {0, 1}.

mod binary;
mod train;

use serde::{Deserialize, Serialize};

use crate::autodiff::sigmoid;
use crate::error::{Error, Result};
use crate::model::{EffectiveMask, ParamSet};
use crate::tensor::Scalar;

pub use binary::{apply_binary, random_matched_mask, BinaryMask, BlockCount, MaskMode, MaskProvenance, MASK_MAGIC};
pub use train::{
    mask_objective, masked_forward, train_mask, MaskHyper, MaskObjective, MaskRun, MaskTarget,
    StepRecord,
};

/// Mask values inside this closed band count as undecided.
pub const UNDECIDED_LOW: f64 = 0.10;
pub const UNDECIDED_HIGH: f64 = 0.90;

/// What the masked model is trained to reproduce.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetKind {
    Bigram,
    ModelDistill,
}

impl TargetKind {
    pub fn label(self) -> &'static str {
        match self {
            TargetKind::Bigram => "bigram",
            TargetKind::ModelDistill => "model",
        }
    }
}

/// `σ(m / T)`.
pub fn soft_mask_value(m: f64, temperature: f64) -> Result<f64> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    Ok(sigmoid(m / temperature))
}

/// Temperature after `step` divisions of `t0` by `divisor`.
pub fn temperature_at(t0: f64, divisor: f64, step: u64) -> f64 {
    t0 * divisor.powf(-(step as f64))
}

/// Learned mask logits for every maskable tensor of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSet<F = f32> {
    /// Names of the covered tensors, in the model's maskable order.
    pub names: Vec<String>,
    pub logits: Vec<Vec<F>>,
    pub temperature: f64,
    pub lambda: f64,
    pub target: TargetKind,
    pub step: u64,
}

impl<F: Scalar> MaskSet<F> {
    /// All logits at 0, so every mask value starts at 0.5.
    pub fn new(params: &ParamSet<F>, lambda: f64, target: TargetKind, t0: f64) -> Result<Self> {
        Self::filled(params, 0.0, lambda, target, t0)
    }

    /// All logits set to `m`.
    pub fn filled(
        params: &ParamSet<F>,
        m: f64,
        lambda: f64,
        target: TargetKind,
        t0: f64,
    ) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "lambda must be finite and non-negative, got {lambda}"
            )));
        }
        if !(t0 > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "initial temperature must be positive, got {t0}"
            )));
        }
        let idx = params.maskable_indices();
        Ok(MaskSet {
            names: idx.iter().map(|&k| params.infos[k].name.clone()).collect(),
            logits: idx
                .iter()
                .map(|&k| vec![F::lit(m); params.tensors[k].len()])
                .collect(),
            temperature: t0,
            lambda,
            target,
            step: 0,
        })
    }

    /// Total number of mask parameters |M|.
    pub fn len(&self) -> usize {
        self.logits.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks the mask covers exactly the maskable tensors of `params`.
    pub fn check(&self, params: &ParamSet<impl Scalar>) -> Result<()> {
        let idx = params.maskable_indices();
        let same = idx.len() == self.names.len()
            && idx.iter().zip(&self.names).zip(&self.logits).all(|((&k, n), l)| {
                &params.infos[k].name == n && params.tensors[k].len() == l.len()
            });
        if !same {
            return Err(Error::InvalidArgument(
                "mask set does not match the model's maskable tensors".into(),
            ));
        }
        Ok(())
    }

    /// Current mask values σ(m/T).
    pub fn values(&self) -> EffectiveMask<F> {
        let inv = 1.0 / self.temperature;
        EffectiveMask {
            values: self
                .logits
                .iter()
                .map(|l| {
                    l.iter()
                        .map(|&m| F::lit(sigmoid(m.to_f64().unwrap_or(f64::NAN) * inv)))
                        .collect()
                })
                .collect(),
        }
    }

    /// `(undecided, above)`: mask values in [0.10, 0.90] and above 0.90.
    pub fn decision_counts(&self) -> (usize, usize) {
        let inv = 1.0 / self.temperature;
        let mut undecided = 0;
        let mut above = 0;
        for &m in self.logits.iter().flatten() {
            let v = sigmoid(m.to_f64().unwrap_or(f64::NAN) * inv);
            if v > UNDECIDED_HIGH {
                above += 1;
            } else if v >= UNDECIDED_LOW {
                undecided += 1;
            }
        }
        (undecided, above)
    }

    pub fn cast<G: Scalar>(&self) -> MaskSet<G> {
        MaskSet {
            names: self.names.clone(),
            logits: self
                .logits
                .iter()
                .map(|l| l.iter().map(|&x| G::lit(x.to_f64().unwrap_or(f64::NAN))).collect())
                .collect(),
            temperature: self.temperature,
            lambda: self.lambda,
            target: self.target,
            step: self.step,
        }
    }
}

/// Converged when fewer than 1% as many values are undecided as are above
/// 0.90. Nothing above 0.90 means not converged.
pub fn converged(undecided: usize, above: usize) -> bool {
    above > 0 && (undecided as f64) < 0.01 * above as f64
}

pub fn check_convergence<F: Scalar>(mask: &MaskSet<F>) -> bool {
    let (u, a) = mask.decision_counts();
    converged(u, a)
}

/// Absolute jump that counts as a loss spike.
pub const SPIKE_ABS: f64 = 0.25;
/// Relative jump that counts as a loss spike.
pub const SPIKE_REL: f64 = 1.25;
/// A spike must be recovered at least this many steps before the end.
pub const SPIKE_MARGIN: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpikeCheck {
    Ok,
    /// Index of the first unrecovered spike.
    Violation(usize),
}

/// Scans a per-step loss series for spikes.
///
/// Step `i` spikes when `loss[i] > loss[i-1] + 0.25` or
/// `loss[i] > 1.25 · loss[i-1]`. The spike is recovered at the first later
/// step whose loss is back at or below `loss[i-1]`; that step must come at
/// least 100 steps before the last one.
pub fn check_spikes(losses: &[f64]) -> SpikeCheck {
    let n = losses.len();
    for i in 1..n {
        let before = losses[i - 1];
        let now = losses[i];
        if !(now > before + SPIKE_ABS || now > before * SPIKE_REL) {
            continue;
        }
        let recovered = (i + 1..n).find(|&j| losses[j] <= before);
        match recovered {
            Some(j) if n - 1 - j >= SPIKE_MARGIN => {}
            _ => return SpikeCheck::Violation(i),
        }
    }
    SpikeCheck::Ok
}
