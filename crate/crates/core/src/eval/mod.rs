// SPDX-License-Identifier: MIT OR Apache-2.0

//! Surprisal correlations, power-law fits, subnetwork selection, ablations
//! and the embedding experiments.

mod ablation;
mod recipes;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use ablation::{ablation_eval, check_disjoint, AblationReport, CONTAMINATION_SHINGLE};
pub use recipes::{experiment_recipes, linear_embedding_surprisals, RecipeInputs, RecipeKind, RecipeRow};

/// Which two surprisal series were correlated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorrelationPair {
    SubnetworkBigram,
    SubnetworkModel,
    ModelBigram,
}

impl CorrelationPair {
    pub fn label(self) -> &'static str {
        match self {
            CorrelationPair::SubnetworkBigram => "subnetwork-bigram",
            CorrelationPair::SubnetworkModel => "subnetwork-model",
            CorrelationPair::ModelBigram => "model-bigram",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub pair: CorrelationPair,
    pub r: f64,
    pub n: usize,
    pub hash1: String,
    pub hash2: String,
}

/// SHA-256 over the little-endian bytes of a series.
pub fn series_hash(s: &[f64]) -> String {
    let mut h = Sha256::new();
    for x in s {
        h.update(x.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Pearson correlation coefficient of two equally long series.
pub fn pearson_r(s1: &[f64], s2: &[f64]) -> Result<f64> {
    if s1.len() != s2.len() {
        return Err(Error::InvalidInput(format!(
            "series lengths differ: {} vs {}",
            s1.len(),
            s2.len()
        )));
    }
    let n = s1.len();
    if n < 3 {
        return Err(Error::InvalidInput(format!("need at least 3 points, got {n}")));
    }
    if s1.iter().chain(s2).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("series contain non-finite values".into()));
    }
    let m1 = s1.iter().sum::<f64>() / n as f64;
    let m2 = s2.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in s1.iter().zip(s2) {
        let (x, y) = (a - m1, b - m2);
        sxy += x * y;
        sxx += x * x;
        syy += y * y;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation(
            "a series has zero variance".into(),
        ));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

pub fn correlate(pair: CorrelationPair, s1: &[f64], s2: &[f64]) -> Result<CorrelationResult> {
    Ok(CorrelationResult {
        pair,
        r: pearson_r(s1, s2)?,
        n: s1.len(),
        hash1: series_hash(s1),
        hash2: series_hash(s2),
    })
}

/// `1 − r = c · p^(−γ)` fitted by least squares in log–log space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub c: f64,
    pub gamma: f64,
    /// Sum of squared residuals of `ln(1 − r)`.
    pub residual: f64,
    pub p_min: f64,
    pub p_max: f64,
    pub n: usize,
}

impl PowerLawFit {
    /// Predicted correlation at `p` active parameters, never above 1.
    pub fn predict(&self, p: f64) -> f64 {
        (1.0 - self.c * p.powf(-self.gamma)).min(1.0)
    }

    /// Predictions increase with `p` only for positive γ.
    pub fn is_monotone(&self) -> bool {
        self.gamma > 0.0
    }
}

pub fn powerlaw_fit(points: &[(f64, f64)]) -> Result<PowerLawFit> {
    if points.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "power-law fit needs at least 3 points, got {}",
            points.len()
        )));
    }
    if let Some(&(p, r)) = points.iter().find(|&&(p, r)| !(p > 0.0) || !(r < 1.0) || !r.is_finite() || !p.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "point (p={p}, r={r}) needs p > 0 and r < 1"
        )));
    }
    let xs: Vec<f64> = points.iter().map(|&(p, _)| p.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|&(_, r)| (1.0 - r).ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx <= f64::EPSILON * mx.abs().max(1.0) {
        return Err(Error::InvalidInput(
            "all points share one parameter count; slope is undefined".into(),
        ));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residual = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let ps = points.iter().map(|&(p, _)| p);
    Ok(PowerLawFit {
        c: intercept.exp(),
        gamma: -slope,
        residual,
        p_min: ps.clone().fold(f64::INFINITY, f64::min),
        p_max: ps.fold(0.0, f64::max),
        n: points.len(),
    })
}

/// Allowed correlation drop below the λ = 0 run when picking a sparser one.
pub const SELECTION_TOLERANCE: f64 = 0.04;

/// One λ-sweep result considered by [`select_subnetwork`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub lambda: f64,
    pub active: u64,
    pub r: f64,
}

/// Index of the sparsest run whose correlation is within 0.04 of the λ = 0
/// run: highest λ first, then fewest active parameters, then highest r.
///
/// The result does not depend on the order of `runs`.
pub fn select_subnetwork(runs: &[SweepPoint]) -> Result<usize> {
    let listing = || {
        let mut v: Vec<String> = runs.iter().map(|p| format!("λ={} r={:.4}", p.lambda, p.r)).collect();
        v.sort();
        v.join(", ")
    };
    let base = runs
        .iter()
        .filter(|p| p.lambda == 0.0)
        .map(|p| p.r)
        .fold(None, |m: Option<f64>, r| Some(m.map_or(r, |m| m.max(r))))
        .ok_or_else(|| Error::SelectionFailure(format!("no λ = 0 run among [{}]", listing())))?;
    let floor = base - SELECTION_TOLERANCE;
    let better = |a: &SweepPoint, b: &SweepPoint| {
        a.lambda
            .total_cmp(&b.lambda)
            .then(b.active.cmp(&a.active))
            .then(a.r.total_cmp(&b.r))
    };
    runs.iter()
        .enumerate()
        .filter(|(_, p)| p.r >= floor)
        .max_by(|(_, a), (_, b)| better(a, b))
        .map(|(i, _)| i)
        .ok_or_else(|| {
            Error::SelectionFailure(format!(
                "no run reaches r ≥ {floor:.4} among [{}]",
                listing()
            ))
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_hand_cases() {
        let s = [0.0, 1.0, 2.0];
        assert!((pearson_r(&s, &[0.0, 1.0, 1.0]).unwrap() - 3f64.sqrt() / 2.0).abs() < 1e-12);
        let a = [1.0, 4.0, 2.0, 8.0];
        let b: Vec<f64> = a.iter().map(|x| 2.0 * x + 1.0).collect();
        assert!((pearson_r(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let c: Vec<f64> = a.iter().map(|x| -x).collect();
        assert!((pearson_r(&a, &c).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn pearson_errors() {
        assert!(matches!(
            pearson_r(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(Error::UndefinedCorrelation(_))
        ));
        assert!(pearson_r(&[1.0, 2.0], &[1.0, 2.0]).is_err());
        assert!(pearson_r(&[1.0, 2.0, 3.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn powerlaw_recovers_synthetic_coefficients() {
        let pts: Vec<(f64, f64)> = [1e3, 1e4, 1e5, 1e6]
            .iter()
            .map(|&p: &f64| (p, 1.0 - 0.5 * p.powf(-0.3)))
            .collect();
        let f = powerlaw_fit(&pts).unwrap();
        assert!((f.c - 0.5).abs() < 1e-6);
        assert!((f.gamma - 0.3).abs() < 1e-6);
        assert!(f.residual < 1e-9);
        assert!(f.predict(1e6) >= f.predict(5e5));
        assert!(f.is_monotone());
    }

    #[test]
    fn powerlaw_guards() {
        assert!(powerlaw_fit(&[(10.0, 0.5), (10.0, 0.5), (10.0, 0.5)]).is_err());
        assert!(powerlaw_fit(&[(10.0, 0.5), (20.0, 1.0), (30.0, 0.7)]).is_err());
        assert!(powerlaw_fit(&[(10.0, 0.5), (20.0, 0.6)]).is_err());
    }

    fn pt(lambda: f64, active: u64, r: f64) -> SweepPoint {
        SweepPoint { lambda, active, r }
    }

    #[test]
    fn selection_rule() {
        let runs = vec![
            pt(0.0, 1000, 0.96),
            pt(10.0, 500, 0.95),
            pt(100.0, 100, 0.93),
            pt(1000.0, 10, 0.80),
        ];
        assert_eq!(select_subnetwork(&runs).unwrap(), 2);
        let mut rev = runs.clone();
        rev.reverse();
        assert_eq!(rev[select_subnetwork(&rev).unwrap()], runs[2]);
        assert_eq!(select_subnetwork(&runs[..1]).unwrap(), 0);
        assert!(matches!(
            select_subnetwork(&runs[1..]),
            Err(Error::SelectionFailure(_))
        ));
        let tie = vec![pt(0.0, 9, 0.9), pt(5.0, 7, 0.88), pt(5.0, 6, 0.87)];
        assert_eq!(select_subnetwork(&tie).unwrap(), 2);
    }
}
