// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::model::BlockKind;

/// Share of a subnetwork's active parameters inside one layer and block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureCell {
    pub layer: Option<usize>,
    pub kind: BlockKind,
    pub active: u64,
    pub proportion: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureReport {
    pub cells: Vec<StructureCell>,
    pub total_active: u64,
    pub mlp: f64,
    pub attention: f64,
    /// Query plus key matrices.
    pub qk: f64,
    /// Value plus output matrices.
    pub vo: f64,
}

impl StructureReport {
    /// `(layer, MLP share)` for every transformer block, in layer order.
    pub fn mlp_by_layer(&self) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, u64)> = Vec::new();
        for c in self.cells.iter().filter(|c| c.kind.is_mlp()) {
            let Some(l) = c.layer else { continue };
            match out.iter_mut().find(|(k, _)| *k == l) {
                Some(e) => e.1 += c.active,
                None => out.push((l, c.active)),
            }
        }
        out.sort();
        out.into_iter()
            .map(|(l, a)| (l, a as f64 / self.total_active as f64))
            .collect()
    }
}

/// Splits the active parameters of `mask` over layers and block kinds.
///
/// Every share is an exact count ratio, so the cells sum to 1 up to the
/// rounding of the final division.
pub fn structure_report(mask: &BinaryMask) -> Result<StructureReport> {
    let total = mask.active();
    if total == 0 {
        return Err(Error::InvalidInput(
            "structure of an empty subnetwork is undefined".into(),
        ));
    }
    let blocks = mask.block_counts();
    let share = |pred: &dyn Fn(BlockKind) -> bool| {
        blocks
            .iter()
            .filter(|b| pred(b.kind))
            .map(|b| b.active)
            .sum::<u64>() as f64
            / total as f64
    };
    Ok(StructureReport {
        mlp: share(&|k| k.is_mlp()),
        attention: share(&|k| k.is_attention()),
        qk: share(&|k| matches!(k, BlockKind::AttnQ | BlockKind::AttnK)),
        vo: share(&|k| matches!(k, BlockKind::AttnV | BlockKind::AttnO)),
        cells: blocks
            .iter()
            .map(|b| StructureCell {
                layer: b.layer,
                kind: b.kind,
                active: b.active,
                proportion: b.active as f64 / total as f64,
            })
            .collect(),
        total_active: total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::MaskProvenance;
    use crate::model::{ModelConfig, ParamSet};

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

    #[test]
    fn point_mass() {
        let p = params();
        let mut m = BinaryMask::constant(&p, false, MaskProvenance::manual("x"));
        let k = m
            .infos
            .iter()
            .position(|i| i.name == "block1.mlp.in.weight")
            .unwrap();
        m.bits[k][3] = true;
        m.bits[k][7] = true;
        let r = structure_report(&m).unwrap();
        for c in &r.cells {
            let want = if c.layer == Some(1) && c.kind == BlockKind::MlpIn { 1.0 } else { 0.0 };
            assert_eq!(c.proportion, want);
        }
        assert_eq!(r.mlp, 1.0);
        assert_eq!(r.attention, 0.0);
        assert_eq!(r.mlp_by_layer(), vec![(1, 1.0), (2, 0.0)]);
    }

    #[test]
    fn shares_sum_to_one() {
        let p = params();
        let mut m = BinaryMask::constant(&p, false, MaskProvenance::manual("x"));
        for (t, b) in m.bits.iter_mut().enumerate() {
            for (i, x) in b.iter_mut().enumerate() {
                *x = (i + 2 * t) % 3 == 0;
            }
        }
        let r = structure_report(&m).unwrap();
        let s: f64 = r.cells.iter().map(|c| c.proportion).sum();
        assert!((s - 1.0).abs() < 1e-9);
        assert!((r.mlp + r.attention - 1.0).abs() < 1e-12);
        assert!((r.qk + r.vo - r.attention).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_rejected() {
        let p = params();
        let m = BinaryMask::constant(&p, false, MaskProvenance::manual("x"));
        assert!(structure_report(&m).is_err());
    }
}
