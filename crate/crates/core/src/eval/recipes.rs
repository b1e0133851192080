// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use super::pearson_r;
use crate::analysis::{collect_trace, ridge_fit, LinearMap};
use crate::autodiff::log_softmax_rows;
use crate::bigram::{bigram_surprisals, BigramTable};
use crate::corpus::{scored_positions, TokenStream};
use crate::error::{Error, Result};
use crate::mask::{apply_binary, BinaryMask, MaskMode, MaskProvenance};
use crate::model::{surprisals, ParamSet, POS_EMBED_NAME, TOK_EMBED_NAME, UNEMBED_NAME};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecipeKind {
    /// Bigram subnetwork of a freshly initialized model.
    RandomInit,
    /// As above, but embeddings, positions, layer norms and unembedding
    /// copied from the trained model.
    RandomExceptEmbeddings,
    /// Trained model with every maskable parameter removed.
    EmbeddingsEmpty,
    /// Embeddings followed by one linear map fitted to the bigram
    /// subnetwork's output state.
    EmbeddingsLinear,
}

impl RecipeKind {
    pub const ALL: [RecipeKind; 4] = [
        RecipeKind::RandomInit,
        RecipeKind::RandomExceptEmbeddings,
        RecipeKind::EmbeddingsEmpty,
        RecipeKind::EmbeddingsLinear,
    ];

    pub fn label(self) -> &'static str {
        match self {
            RecipeKind::RandomInit => "random_init",
            RecipeKind::RandomExceptEmbeddings => "random_except_embeddings",
            RecipeKind::EmbeddingsEmpty => "embeddings_empty",
            RecipeKind::EmbeddingsLinear => "embeddings_linear",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.label() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecipeRow {
    pub kind: RecipeKind,
    /// Correlation of the recipe's surprisals with bigram surprisals on the
    /// held-out stream.
    pub r: f64,
}

pub struct RecipeInputs<'a> {
    /// Trained model.
    pub reference: &'a ParamSet<f32>,
    pub table: &'a BigramTable,
    /// Bigram subnetwork of `reference`, traced for the linear recipe.
    pub bigram_mask: &'a BinaryMask,
    /// Tokens the linear map is fitted on.
    pub fit_stream: &'a TokenStream,
    pub heldout: &'a TokenStream,
    pub trace_tokens: usize,
    pub ridge_alpha: f64,
}

/// Surprisals of `unembed(L(X_0))`, where `X_0` is token plus position
/// embedding and `L` maps it to the final pre-unembedding state.
pub fn linear_embedding_surprisals(
    params: &ParamSet<f32>,
    map: &LinearMap,
    stream: &TokenStream,
) -> Result<Vec<f64>> {
    let cfg = &params.config;
    let (d, v, seq) = (cfg.d_model, cfg.vocab_size, cfg.max_seq_len);
    if map.d_in != d || map.d_out != d {
        return Err(Error::InvalidArgument(format!(
            "map is {}×{}, model width is {d}",
            map.d_in, map.d_out
        )));
    }
    stream.validate(v)?;
    let emb = params.get(TOK_EMBED_NAME).expect("layout");
    let pos = params.get(POS_EMBED_NAME).expect("layout");
    let unembed = params.get(UNEMBED_NAME).expect("layout").data();
    let positions = scored_positions(&stream.ids, seq)?;
    let mut out = Vec::with_capacity(positions.len());
    let mut x = vec![0.0; d];
    let mut logits = vec![0.0; v];
    for j in positions {
        let i = j - 1;
        let (e, p) = (emb.row(stream.ids[i] as usize), pos.row(i % seq));
        for (k, x) in x.iter_mut().enumerate() {
            *x = (e[k] + p[k]) as f64;
        }
        let y = map.apply(&x)?;
        logits.iter_mut().for_each(|l| *l = 0.0);
        for (k, &yk) in y.iter().enumerate() {
            for (l, &w) in logits.iter_mut().zip(&unembed[k * v..(k + 1) * v]) {
                *l += yk * w as f64;
            }
        }
        out.push(-log_softmax_rows(&logits, v)[stream.ids[j] as usize]);
    }
    Ok(out)
}

/// Runs the requested embedding experiments. `train_bigram_mask` learns and
/// binarizes a bigram subnetwork of the model it is given; it is only
/// called for the two recipes that start from a fresh initialization.
pub fn experiment_recipes(
    kinds: &[RecipeKind],
    inputs: &RecipeInputs<'_>,
    train_bigram_mask: &mut dyn FnMut(&ParamSet<f32>) -> Result<BinaryMask>,
) -> Result<Vec<RecipeRow>> {
    let reference = inputs.reference;
    let cfg = &reference.config;
    let bigram = bigram_surprisals(inputs.table, inputs.heldout, cfg.max_seq_len)?;
    let keep_r = |params: &ParamSet<f32>, mask: &BinaryMask| -> Result<f64> {
        let sub = apply_binary(params, mask, MaskMode::Keep)?;
        pearson_r(&surprisals(&sub, inputs.heldout, None)?, &bigram)
    };
    let mut rows = Vec::with_capacity(kinds.len());
    for &kind in kinds {
        let r = match kind {
            RecipeKind::RandomInit => {
                let fresh = ParamSet::init(cfg)?;
                let mask = train_bigram_mask(&fresh)?;
                keep_r(&fresh, &mask)?
            }
            RecipeKind::RandomExceptEmbeddings => {
                let mut fresh = ParamSet::init(cfg)?;
                fresh.copy_non_maskable_from(reference)?;
                let mask = train_bigram_mask(&fresh)?;
                keep_r(&fresh, &mask)?
            }
            RecipeKind::EmbeddingsEmpty => {
                let empty = BinaryMask::constant(
                    reference,
                    false,
                    MaskProvenance::manual(&reference.content_hash()),
                );
                keep_r(reference, &empty)?
            }
            RecipeKind::EmbeddingsLinear => {
                let sub = apply_binary(reference, inputs.bigram_mask, MaskMode::Keep)?;
                let trace = collect_trace(&sub, None, None, inputs.fit_stream, inputs.trace_tokens)?;
                let map = ridge_fit(&trace.layers[0], &trace.out, trace.n, inputs.ridge_alpha, true)?;
                pearson_r(&linear_embedding_surprisals(reference, &map, inputs.heldout)?, &bigram)?
            }
        };
        rows.push(RecipeRow { kind, r });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::DEFAULT_RIDGE_ALPHA;
    use crate::bigram::count_bigrams;
    use crate::model::ModelConfig;

    fn stream(n: usize, salt: usize) -> TokenStream {
        TokenStream {
            ids: (0..n).map(|i| ((i * 7 + salt) * (i + 3) % 13) as u32 + 2).collect(),
            sources: vec![],
            vocab_hash: String::new(),
        }
    }

    #[test]
    fn labels_roundtrip() {
        for k in RecipeKind::ALL {
            assert_eq!(RecipeKind::from_label(k.label()), Some(k));
        }
    }

    #[test]
    fn identity_map_unembeds_raw_embeddings() {
        let cfg = ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 4,
            d_mlp: 8,
            vocab_size: 15,
            max_seq_len: 8,
            ..ModelConfig::default()
        };
        let p = ParamSet::<f32>::init(&cfg).unwrap();
        let s = stream(30, 1);
        let id = LinearMap {
            d_in: 4,
            d_out: 4,
            matrix: (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect(),
            x_mean: vec![0.0; 4],
            y_mean: vec![0.0; 4],
            alpha: 0.0,
            n: 0,
            centered: false,
        };
        let got = linear_embedding_surprisals(&p, &id, &s).unwrap();
        let positions = scored_positions(&s.ids, 8).unwrap();
        assert_eq!(got.len(), positions.len());
        let emb = p.get(TOK_EMBED_NAME).unwrap();
        let pos = p.get(POS_EMBED_NAME).unwrap();
        let w = p.get(UNEMBED_NAME).unwrap();
        let j = positions[3];
        let x: Vec<f64> = (0..4)
            .map(|k| (emb.row(s.ids[j - 1] as usize)[k] + pos.row((j - 1) % 8)[k]) as f64)
            .collect();
        let logits: Vec<f64> = (0..15)
            .map(|c| (0..4).map(|k| x[k] * w.data()[k * 15 + c] as f64).sum())
            .collect();
        let z = logits.iter().map(|l| l.exp()).sum::<f64>().ln();
        assert!((got[3] - (z - logits[s.ids[j] as usize])).abs() < 1e-9);
    }

    #[test]
    fn recipes_run_on_a_tiny_model() {
        let cfg = ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 4,
            d_mlp: 8,
            vocab_size: 15,
            max_seq_len: 8,
            ..ModelConfig::default()
        };
        let p = ParamSet::<f32>::init(&cfg).unwrap();
        let fit = stream(200, 1);
        let held = stream(64, 5);
        let table = count_bigrams(&fit, 15, 1e-6).unwrap();
        let full = BinaryMask::constant(&p, true, MaskProvenance::manual("x"));
        let inputs = RecipeInputs {
            reference: &p,
            table: &table,
            bigram_mask: &full,
            fit_stream: &fit,
            heldout: &held,
            trace_tokens: 40,
            ridge_alpha: DEFAULT_RIDGE_ALPHA,
        };
        let mut calls = 0;
        let rows = experiment_recipes(&RecipeKind::ALL, &inputs, &mut |m| {
            calls += 1;
            Ok(BinaryMask::constant(m, true, MaskProvenance::manual("y")))
        })
        .unwrap();
        assert_eq!(calls, 2);
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|r| r.r.is_finite() && r.r.abs() <= 1.0));
    }
}
