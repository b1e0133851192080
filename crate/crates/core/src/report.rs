// SPDX-License-Identifier: MIT OR Apache-2.0

//! CSV tables consumed by the plotting scripts.

use std::path::Path;

use serde::Serialize;

use crate::analysis::{OverlapStats, RotationTarget, StructureReport};
use crate::error::{Error, Result};
use crate::eval::{AblationReport, CorrelationPair, PowerLawFit, RecipeRow};

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let map = |e: csv::Error| Error::format("csv", e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(map)?;
    for r in rows {
        w.serialize(r).map_err(map)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RotationRow {
    pub layer: usize,
    pub target: RotationTarget,
    pub median_degrees: f64,
}

pub fn write_rotations(path: &Path, rows: &[RotationRow]) -> Result<()> {
    write_rows(path, rows)
}

#[derive(Serialize)]
struct CovRow {
    i: usize,
    j: usize,
    similarity: f64,
}

pub fn write_covsim(path: &Path, sim: &[Vec<f64>]) -> Result<()> {
    write_rows(
        path,
        sim.iter().enumerate().flat_map(|(i, row)| {
            row.iter().enumerate().map(move |(j, &similarity)| CovRow { i, j, similarity })
        }),
    )
}

#[derive(Serialize)]
struct StructureRow {
    layer: String,
    block: &'static str,
    active: u64,
    proportion: f64,
}

/// One row per `(layer, block)`; parameters outside the transformer blocks
/// are labelled with layer `-`.
pub fn write_structure(path: &Path, report: &StructureReport) -> Result<()> {
    write_rows(
        path,
        report.cells.iter().map(|c| StructureRow {
            layer: c.layer.map_or_else(|| "-".to_string(), |l| l.to_string()),
            block: c.kind.label(),
            active: c.active,
            proportion: c.proportion,
        }),
    )
}

pub fn write_overlap(path: &Path, stats: &OverlapStats) -> Result<()> {
    write_rows(path, [stats])
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorrelationRow {
    pub pair: CorrelationPair,
    pub lambda: f64,
    pub active_params: u64,
    pub r: f64,
}

pub fn write_correlations(path: &Path, rows: &[CorrelationRow]) -> Result<()> {
    write_rows(path, rows)
}

#[derive(Serialize)]
struct PowerLawRow<'a> {
    checkpoint: &'a str,
    c: f64,
    gamma: f64,
    residual: f64,
    /// `p:r` pairs separated by `;`.
    predictions: String,
}

/// `fits` pairs a checkpoint label with its fit; every row carries the
/// predicted correlation at each parameter count in `at`.
pub fn write_powerlaw(path: &Path, fits: &[(String, PowerLawFit)], at: &[f64]) -> Result<()> {
    write_rows(
        path,
        fits.iter().map(|(label, f)| PowerLawRow {
            checkpoint: label,
            c: f.c,
            gamma: f.gamma,
            residual: f.residual,
            predictions: at
                .iter()
                .map(|&p| format!("{p}:{}", f.predict(p)))
                .collect::<Vec<_>>()
                .join(";"),
        }),
    )
}

#[derive(Serialize)]
struct AblationRow {
    condition: String,
    loss: f64,
}

pub fn write_ablation(path: &Path, report: &AblationReport) -> Result<()> {
    write_rows(
        path,
        report
            .rows()
            .into_iter()
            .map(|(condition, loss)| AblationRow { condition, loss }),
    )
}

#[derive(Serialize)]
struct ExperimentRow {
    kind: &'static str,
    r: f64,
}

pub fn write_experiments(path: &Path, rows: &[RecipeRow]) -> Result<()> {
    write_rows(
        path,
        rows.iter().map(|r| ExperimentRow {
            kind: r.kind.label(),
            r: r.r,
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::RecipeKind;

    fn read(path: &Path) -> String {
        std::fs::read_to_string(path).unwrap()
    }

    #[test]
    fn headers_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rot.csv");
        write_rotations(
            &p,
            &[RotationRow {
                layer: 1,
                target: RotationTarget::Output,
                median_degrees: 12.5,
            }],
        )
        .unwrap();
        assert_eq!(read(&p), "layer,target,median_degrees\n1,output,12.5\n");

        let p = dir.path().join("cov.csv");
        write_covsim(&p, &[vec![1.0, 0.5], vec![0.5, 1.0]]).unwrap();
        assert_eq!(read(&p).lines().count(), 5);
        assert!(read(&p).starts_with("i,j,similarity\n0,0,1.0\n0,1,0.5\n"));

        let p = dir.path().join("exp.csv");
        write_experiments(
            &p,
            &[RecipeRow {
                kind: RecipeKind::EmbeddingsLinear,
                r: 0.25,
            }],
        )
        .unwrap();
        assert_eq!(read(&p), "kind,r\nembeddings_linear,0.25\n");

        let p = dir.path().join("corr.csv");
        write_correlations(
            &p,
            &[CorrelationRow {
                pair: CorrelationPair::SubnetworkBigram,
                lambda: 10.0,
                active_params: 7,
                r: 0.9,
            }],
        )
        .unwrap();
        assert_eq!(read(&p), "pair,lambda,active_params,r\nsubnetwork-bigram,10.0,7,0.9\n");
    }
}
