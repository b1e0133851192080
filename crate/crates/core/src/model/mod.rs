// SPDX-License-Identifier: MIT OR Apache-2.0

//! Decoder-only pre-norm transformer language model.
//!
//! Each block computes
//!
//! ```text
//! x = x + Attn(LN1(x))
//! x = x + MLP(LN2(x))        MLP(h) = GELU(h W_in + b_in) W_out + b_out
//! ```
//!
//! with learned absolute positions added to the token embeddings, a final
//! layer norm, and an untied unembedding matrix.

mod checkpoint;
mod forward;
mod infer;
mod train;

use std::fmt;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
pub use forward::{forward, forward_on_tape, EffectiveMask, ForwardOutput, TapeForward};
pub use infer::{eval_positions, generate, heldout_loss, surprisals, GenerateOptions, GREEDY_TEMPERATURE};
pub use train::{train_lm, train_lm_with, LmHyper, LmTrainLog};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionalKind {
    LearnedAbsolute,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub positional: PositionalKind,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 4,
            n_heads: 4,
            d_model: 128,
            d_mlp: 512,
            vocab_size: 2048,
            max_seq_len: 128,
            positional: PositionalKind::LearnedAbsolute,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_mlp == 0 {
            return bad(format!("degenerate model config {self:?}"));
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.vocab_size < 2 || self.max_seq_len < 2 {
            return bad(format!(
                "vocab_size {} / max_seq_len {} too small",
                self.vocab_size, self.max_seq_len
            ));
        }
        Ok(())
    }
}

/// Which part of the network a parameter tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BlockKind {
    #[serde(rename = "embed")]
    Embed,
    #[serde(rename = "pos")]
    Pos,
    #[serde(rename = "unembed")]
    Unembed,
    #[serde(rename = "ln")]
    Ln,
    #[serde(rename = "attn.Q")]
    AttnQ,
    #[serde(rename = "attn.K")]
    AttnK,
    #[serde(rename = "attn.V")]
    AttnV,
    #[serde(rename = "attn.O")]
    AttnO,
    #[serde(rename = "mlp.in")]
    MlpIn,
    #[serde(rename = "mlp.out")]
    MlpOut,
}

impl BlockKind {
    pub const MASKABLE: [BlockKind; 6] = [
        BlockKind::AttnQ,
        BlockKind::AttnK,
        BlockKind::AttnV,
        BlockKind::AttnO,
        BlockKind::MlpIn,
        BlockKind::MlpOut,
    ];

    /// Embedding, position, unembedding and layer-norm tensors are never masked.
    pub fn maskable(self) -> bool {
        !matches!(
            self,
            BlockKind::Embed | BlockKind::Pos | BlockKind::Unembed | BlockKind::Ln
        )
    }

    pub fn is_mlp(self) -> bool {
        matches!(self, BlockKind::MlpIn | BlockKind::MlpOut)
    }

    pub fn is_attention(self) -> bool {
        matches!(
            self,
            BlockKind::AttnQ | BlockKind::AttnK | BlockKind::AttnV | BlockKind::AttnO
        )
    }

    pub fn label(self) -> &'static str {
        match self {
            BlockKind::Embed => "embed",
            BlockKind::Pos => "pos",
            BlockKind::Unembed => "unembed",
            BlockKind::Ln => "ln",
            BlockKind::AttnQ => "attn.Q",
            BlockKind::AttnK => "attn.K",
            BlockKind::AttnV => "attn.V",
            BlockKind::AttnO => "attn.O",
            BlockKind::MlpIn => "mlp.in",
            BlockKind::MlpOut => "mlp.out",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        Some(match s {
            "embed" => BlockKind::Embed,
            "pos" => BlockKind::Pos,
            "unembed" => BlockKind::Unembed,
            "ln" => BlockKind::Ln,
            "attn.Q" => BlockKind::AttnQ,
            "attn.K" => BlockKind::AttnK,
            "attn.V" => BlockKind::AttnV,
            "attn.O" => BlockKind::AttnO,
            "mlp.in" => BlockKind::MlpIn,
            "mlp.out" => BlockKind::MlpOut,
            _ => return None,
        })
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Name, tag and shape of one parameter tensor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub kind: BlockKind,
    /// 1-based transformer block index; `None` for embeddings, final norm
    /// and unembedding.
    pub layer: Option<usize>,
    pub shape: Vec<usize>,
}

impl ParamInfo {
    pub fn maskable(&self) -> bool {
        self.kind.maskable()
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Tensors per transformer block, in storage order.
pub(crate) const PER_LAYER: usize = 16;

/// Offsets of each tensor inside a block.
pub(crate) mod slot {
    pub const LN1_G: usize = 0;
    pub const LN1_B: usize = 1;
    pub const Q_W: usize = 2;
    pub const Q_B: usize = 3;
    pub const K_W: usize = 4;
    pub const K_B: usize = 5;
    pub const V_W: usize = 6;
    pub const V_B: usize = 7;
    pub const O_W: usize = 8;
    pub const O_B: usize = 9;
    pub const LN2_G: usize = 10;
    pub const LN2_B: usize = 11;
    pub const IN_W: usize = 12;
    pub const IN_B: usize = 13;
    pub const OUT_W: usize = 14;
    pub const OUT_B: usize = 15;
}

pub const TOK_EMBED_NAME: &str = "tok_embed";
pub const POS_EMBED_NAME: &str = "pos_embed";
pub const UNEMBED_NAME: &str = "unembed.weight";

pub(crate) const TOK_EMBED: usize = 0;
pub(crate) const POS_EMBED: usize = 1;

pub(crate) fn layer_index(layer: usize, slot: usize) -> usize {
    2 + layer * PER_LAYER + slot
}

pub(crate) fn final_index(n_layers: usize, k: usize) -> usize {
    2 + n_layers * PER_LAYER + k
}

/// Parameter layout for `cfg`, in storage order.
pub fn layout(cfg: &ModelConfig) -> Vec<ParamInfo> {
    let (d, m, v) = (cfg.d_model, cfg.d_mlp, cfg.vocab_size);
    let p = |name: String, kind, layer, shape: Vec<usize>| ParamInfo {
        name,
        kind,
        layer,
        shape,
    };
    let mut out = vec![
        p(TOK_EMBED_NAME.into(), BlockKind::Embed, None, vec![v, d]),
        p(POS_EMBED_NAME.into(), BlockKind::Pos, None, vec![cfg.max_seq_len, d]),
    ];
    for l in 1..=cfg.n_layers {
        let n = |s: &str| format!("block{l}.{s}");
        out.extend([
            p(n("ln1.gain"), BlockKind::Ln, Some(l), vec![d]),
            p(n("ln1.bias"), BlockKind::Ln, Some(l), vec![d]),
            p(n("attn.q.weight"), BlockKind::AttnQ, Some(l), vec![d, d]),
            p(n("attn.q.bias"), BlockKind::AttnQ, Some(l), vec![d]),
            p(n("attn.k.weight"), BlockKind::AttnK, Some(l), vec![d, d]),
            p(n("attn.k.bias"), BlockKind::AttnK, Some(l), vec![d]),
            p(n("attn.v.weight"), BlockKind::AttnV, Some(l), vec![d, d]),
            p(n("attn.v.bias"), BlockKind::AttnV, Some(l), vec![d]),
            p(n("attn.o.weight"), BlockKind::AttnO, Some(l), vec![d, d]),
            p(n("attn.o.bias"), BlockKind::AttnO, Some(l), vec![d]),
            p(n("ln2.gain"), BlockKind::Ln, Some(l), vec![d]),
            p(n("ln2.bias"), BlockKind::Ln, Some(l), vec![d]),
            p(n("mlp.in.weight"), BlockKind::MlpIn, Some(l), vec![d, m]),
            p(n("mlp.in.bias"), BlockKind::MlpIn, Some(l), vec![m]),
            p(n("mlp.out.weight"), BlockKind::MlpOut, Some(l), vec![m, d]),
            p(n("mlp.out.bias"), BlockKind::MlpOut, Some(l), vec![d]),
        ]);
    }
    out.extend([
        p("ln_f.gain".into(), BlockKind::Ln, None, vec![d]),
        p("ln_f.bias".into(), BlockKind::Ln, None, vec![d]),
        p(UNEMBED_NAME.into(), BlockKind::Unembed, None, vec![d, v]),
    ]);
    out
}

/// Named, tagged parameter tensors of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<F = f32> {
    pub config: ModelConfig,
    pub infos: Vec<ParamInfo>,
    pub tensors: Vec<Tensor<F>>,
}

impl<F: Scalar> ParamSet<F> {
    /// GPT-2 style initialization: N(0, 0.02) weights and embeddings,
    /// residual output projections scaled by 1/sqrt(2·n_layers), zero
    /// biases, unit layer-norm gains.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let infos = layout(cfg);
        let mut rng = crate::rng::stream(cfg.seed, "init");
        let std = 0.02;
        let resid_std = std / ((2 * cfg.n_layers) as f64).sqrt();
        let tensors = infos
            .iter()
            .map(|info| {
                let is_bias = info.name.ends_with(".bias");
                let fill = if info.name.ends_with(".gain") {
                    Some(1.0)
                } else if is_bias {
                    Some(0.0)
                } else {
                    None
                };
                match fill {
                    Some(c) => Tensor::full(&info.shape, F::lit(c)),
                    None => {
                        let s = if matches!(info.kind, BlockKind::AttnO | BlockKind::MlpOut) {
                            resid_std
                        } else {
                            std
                        };
                        let normal = Normal::new(0.0, s).expect("valid std");
                        Tensor::from_fn(&info.shape, |_| F::lit(normal.sample(&mut rng)))
                    }
                }
            })
            .collect();
        Ok(ParamSet {
            config: cfg.clone(),
            infos,
            tensors,
        })
    }

    pub fn from_parts(config: ModelConfig, tensors: Vec<Tensor<F>>) -> Result<Self> {
        config.validate()?;
        let infos = layout(&config);
        if infos.len() != tensors.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} tensors, got {}",
                infos.len(),
                tensors.len()
            )));
        }
        for (info, t) in infos.iter().zip(&tensors) {
            if info.shape != t.shape() {
                return Err(Error::InvalidArgument(format!(
                    "{} has shape {:?}, expected {:?}",
                    info.name,
                    t.shape(),
                    info.shape
                )));
            }
        }
        Ok(ParamSet {
            config,
            infos,
            tensors,
        })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.infos.iter().position(|i| i.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    /// Storage indices of the maskable tensors, in order.
    pub fn maskable_indices(&self) -> Vec<usize> {
        self.infos
            .iter()
            .enumerate()
            .filter(|(_, i)| i.maskable())
            .map(|(k, _)| k)
            .collect()
    }

    /// Total number of maskable scalars.
    pub fn maskable_count(&self) -> usize {
        self.infos
            .iter()
            .filter(|i| i.maskable())
            .map(ParamInfo::numel)
            .sum()
    }

    pub fn cast<G: Scalar>(&self) -> ParamSet<G> {
        ParamSet {
            config: self.config.clone(),
            infos: self.infos.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// SHA-256 over config, names and raw values.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for (info, t) in self.infos.iter().zip(&self.tensors) {
            h.update(info.name.as_bytes());
            for x in t.data() {
                h.update(x.to_f64().unwrap_or(f64::NAN).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Copies the non-maskable tensors (embeddings, positions, layer norms,
    /// unembedding) from `other`.
    pub fn copy_non_maskable_from(&mut self, other: &ParamSet<F>) -> Result<()> {
        if self.config != other.config {
            return Err(Error::InvalidArgument(
                "cannot patch tensors between different model configs".into(),
            ));
        }
        for (k, info) in self.infos.iter().enumerate() {
            if !info.maskable() {
                self.tensors[k] = other.tensors[k].clone();
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_mlp: 32,
            vocab_size: 11,
            max_seq_len: 6,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn maskable_set_excludes_embeddings_and_norms() {
        let p = ParamSet::<f32>::init(&tiny()).unwrap();
        for info in &p.infos {
            let expected = !matches!(
                info.kind,
                BlockKind::Embed | BlockKind::Pos | BlockKind::Unembed | BlockKind::Ln
            );
            assert_eq!(info.maskable(), expected, "{}", info.name);
        }
        // per layer: 4 d×d + 4 d biases + d×m + m + m×d + d
        let (d, m) = (8, 32);
        assert_eq!(p.maskable_count(), 2 * (4 * d * d + 4 * d + d * m + m + m * d + d));
    }

    #[test]
    fn names_unique() {
        let p = ParamSet::<f32>::init(&tiny()).unwrap();
        let mut names: Vec<_> = p.infos.iter().map(|i| i.name.clone()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), p.len());
    }

    #[test]
    fn layout_indices_match_names() {
        let cfg = tiny();
        let l = layout(&cfg);
        assert_eq!(l[layer_index(1, slot::IN_W)].name, "block2.mlp.in.weight");
        assert_eq!(l[final_index(2, 2)].name, "unembed.weight");
        assert_eq!(l[TOK_EMBED].kind, BlockKind::Embed);
        assert_eq!(l[POS_EMBED].kind, BlockKind::Pos);
    }

    #[test]
    fn rejects_indivisible_heads() {
        let cfg = ModelConfig {
            n_heads: 3,
            ..tiny()
        };
        assert!(ParamSet::<f32>::init(&cfg).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let a = ParamSet::<f32>::init(&tiny()).unwrap();
        let b = ParamSet::<f32>::init(&tiny()).unwrap();
        let c = ParamSet::<f32>::init(&ModelConfig { seed: 1, ..tiny() }).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn block_labels_roundtrip() {
        for k in [
            BlockKind::Embed,
            BlockKind::Pos,
            BlockKind::Unembed,
            BlockKind::Ln,
            BlockKind::AttnQ,
            BlockKind::AttnK,
            BlockKind::AttnV,
            BlockKind::AttnO,
            BlockKind::MlpIn,
            BlockKind::MlpOut,
        ] {
            assert_eq!(BlockKind::from_label(k.label()), Some(k));
        }
    }
}
