// SPDX-License-Identifier: MIT OR Apache-2.0

//! Residual-stream analyses over activation traces and binary masks.

mod linear;
mod overlap;
mod structure;

use serde::{Deserialize, Serialize};

use crate::corpus::TokenStream;
use crate::error::{Error, Result};
use crate::model::{forward, EffectiveMask, ParamSet};

pub use linear::{
    covariance_similarity, eigen_angles, median, median_rotation, ridge_fit, LinearMap,
    RotationTarget, DEFAULT_RIDGE_ALPHA,
};
pub use overlap::{overlap_test, OverlapStats, DEFAULT_OVERLAP_SAMPLES};
pub use structure::{structure_report, StructureCell, StructureReport};

/// Default number of traced tokens.
pub const DEFAULT_TRACE_TOKENS: usize = 16_384;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceProvenance {
    pub model_hash: String,
    pub mask_hash: Option<String>,
    pub corpus_hash: String,
}

/// Residual-stream activations of `n` token positions.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTrace {
    pub n: usize,
    pub d: usize,
    /// `layers[ℓ]` is `X_ℓ` as an `n × d` row-major matrix; `X_0` is
    /// embeddings plus positions.
    pub layers: Vec<Vec<f64>>,
    /// State after the final layer norm, before unembedding.
    pub out: Vec<f64>,
    pub provenance: TraceProvenance,
}

impl ActivationTrace {
    pub fn n_layers(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn layer(&self, l: usize) -> Result<&[f64]> {
        self.layers.get(l).map(Vec::as_slice).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "layer {l} outside 0..={}",
                self.layers.len().saturating_sub(1)
            ))
        })
    }
}

/// Traces the first `n_tokens` tokens of `stream`, fed in consecutive
/// windows of the model's context length.
pub fn collect_trace(
    params: &ParamSet<f32>,
    mask: Option<&EffectiveMask<f32>>,
    mask_hash: Option<&str>,
    stream: &TokenStream,
    n_tokens: usize,
) -> Result<ActivationTrace> {
    let cfg = &params.config;
    let d = cfg.d_model;
    if n_tokens < 10 * d {
        return Err(Error::InvalidInput(format!(
            "{n_tokens} traced tokens is under 10 × d_model = {}",
            10 * d
        )));
    }
    if stream.len() < n_tokens {
        return Err(Error::InvalidInput(format!(
            "stream holds {} tokens, {n_tokens} requested",
            stream.len()
        )));
    }
    stream.validate(cfg.vocab_size)?;
    let masked;
    let params = match mask {
        Some(m) => {
            masked = m.apply(params)?;
            &masked
        }
        None => params,
    };
    let seq = cfg.max_seq_len;
    let ids: Vec<usize> = stream.ids[..n_tokens].iter().map(|&i| i as usize).collect();
    let mut layers = vec![Vec::with_capacity(n_tokens * d); cfg.n_layers + 1];
    let mut out = Vec::with_capacity(n_tokens * d);
    let per_pass = 16 * seq;
    let mut start = 0;
    while start < n_tokens {
        let full = ((n_tokens - start) / seq).min(per_pass / seq);
        let (len, batch) = if full > 0 {
            (full * seq, full)
        } else {
            (n_tokens - start, 1)
        };
        let f = forward(params, &ids[start..start + len], batch, true, None)?;
        for (dst, t) in layers.iter_mut().zip(f.residuals.expect("captured")) {
            dst.extend(t.data().iter().map(|&x| x as f64));
        }
        out.extend(f.final_norm.expect("captured").data().iter().map(|&x| x as f64));
        start += len;
    }
    Ok(ActivationTrace {
        n: n_tokens,
        d,
        layers,
        out,
        provenance: TraceProvenance {
            model_hash: params.content_hash(),
            mask_hash: mask_hash.map(str::to_string),
            corpus_hash: stream.content_hash(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, POS_EMBED_NAME, TOK_EMBED_NAME};

    fn setup() -> (ParamSet<f32>, TokenStream) {
        let p = ParamSet::init(&ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 4,
            d_mlp: 8,
            vocab_size: 9,
            max_seq_len: 8,
            ..ModelConfig::default()
        })
        .unwrap();
        let s = TokenStream {
            ids: (0..100).map(|i| (i * 5 % 9) as u32).collect(),
            sources: vec![],
            vocab_hash: String::new(),
        };
        (p, s)
    }

    #[test]
    fn rows_align_with_tokens() {
        let (p, s) = setup();
        let t = collect_trace(&p, None, None, &s, 44).unwrap();
        assert_eq!(t.layers.len(), 3);
        assert!(t.layers.iter().all(|l| l.len() == 44 * 4));
        assert_eq!(t.out.len(), 44 * 4);
        let emb = p.get(TOK_EMBED_NAME).unwrap();
        let pos = p.get(POS_EMBED_NAME).unwrap();
        for i in 0..44 {
            let id = s.ids[i] as usize;
            for j in 0..4 {
                let want = (emb.row(id)[j] + pos.row(i % 8)[j]) as f64;
                assert_eq!(t.layers[0][i * 4 + j], want);
            }
        }
    }

    #[test]
    fn identity_mask_trace_equal() {
        let (p, s) = setup();
        let a = collect_trace(&p, None, None, &s, 40).unwrap();
        let b = collect_trace(&p, Some(&EffectiveMask::ones(&p)), None, &s, 40).unwrap();
        assert_eq!(a.layers, b.layers);
        assert_eq!(a.out, b.out);
    }

    #[test]
    fn guards() {
        let (p, s) = setup();
        assert!(matches!(
            collect_trace(&p, None, None, &s, 39),
            Err(Error::InvalidInput(_))
        ));
        assert!(collect_trace(&p, None, None, &s, 101).is_err());
    }
}
