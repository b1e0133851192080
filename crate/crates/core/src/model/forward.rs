// SPDX-License-Identifier: MIT OR Apache-2.0

use super::{final_index, layer_index, slot, ModelConfig, ParamSet, POS_EMBED, TOK_EMBED};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Per-element multipliers for the maskable tensors of a [`ParamSet`].
///
/// `values[k]` pairs with the `k`-th maskable tensor (see
/// [`ParamSet::maskable_indices`]). Non-maskable tensors are never scaled.
#[derive(Clone, Debug, PartialEq)]
pub struct EffectiveMask<F = f32> {
    pub values: Vec<Vec<F>>,
}

impl<F: Scalar> EffectiveMask<F> {
    pub fn ones(params: &ParamSet<F>) -> Self {
        EffectiveMask {
            values: params
                .maskable_indices()
                .into_iter()
                .map(|k| vec![F::one(); params.tensors[k].len()])
                .collect(),
        }
    }

    pub fn check(&self, params: &ParamSet<F>) -> Result<()> {
        let idx = params.maskable_indices();
        if idx.len() != self.values.len() {
            return Err(Error::InvalidArgument(format!(
                "mask covers {} tensors, model has {} maskable tensors",
                self.values.len(),
                idx.len()
            )));
        }
        for (v, &k) in self.values.iter().zip(&idx) {
            if v.len() != params.tensors[k].len() {
                return Err(Error::InvalidArgument(format!(
                    "mask for {} has {} values, tensor has {}",
                    params.infos[k].name,
                    v.len(),
                    params.tensors[k].len()
                )));
            }
        }
        Ok(())
    }

    /// Parameters with every maskable tensor multiplied elementwise.
    pub fn apply(&self, params: &ParamSet<F>) -> Result<ParamSet<F>> {
        self.check(params)?;
        let mut out = params.clone();
        for (v, k) in self.values.iter().zip(params.maskable_indices()) {
            for (x, &s) in out.tensors[k].data_mut().iter_mut().zip(v) {
                *x = *x * s;
            }
        }
        Ok(out)
    }
}

/// Forward result on a live tape.
pub struct TapeForward {
    /// `[batch * seq, vocab]`
    pub logits: Var,
    /// Residual stream after embeddings (index 0) and after each block.
    pub residuals: Vec<Var>,
    /// State after the final layer norm, right before unembedding.
    pub final_norm: Var,
}

/// Forward result detached from any tape.
#[derive(Clone, Debug)]
pub struct ForwardOutput<F = f32> {
    /// `[batch * seq, vocab]`, rows grouped by sequence.
    pub logits: Tensor<F>,
    /// When captured: `n_layers + 1` tensors of shape `[batch * seq, d_model]`.
    pub residuals: Option<Vec<Tensor<F>>>,
    pub final_norm: Option<Tensor<F>>,
}

pub(crate) fn check_tokens(cfg: &ModelConfig, ids: &[usize], batch: usize) -> Result<usize> {
    if batch == 0 || ids.is_empty() || ids.len() % batch != 0 {
        return Err(Error::InvalidArgument(format!(
            "{} token ids do not split into {batch} sequences",
            ids.len()
        )));
    }
    let seq = ids.len() / batch;
    if seq > cfg.max_seq_len {
        return Err(Error::InvalidArgument(format!(
            "sequence length {seq} exceeds max_seq_len {}",
            cfg.max_seq_len
        )));
    }
    if let Some(bad) = ids.iter().find(|&&i| i >= cfg.vocab_size) {
        return Err(Error::InvalidArgument(format!(
            "token id {bad} out of range for vocabulary of {}",
            cfg.vocab_size
        )));
    }
    Ok(seq)
}

/// Runs the network on `tape` with parameters already registered as `vars`
/// (one per tensor, in storage order).
///
/// `ids` holds `batch` sequences back to back.
pub fn forward_on_tape<F: Scalar>(
    tape: &mut Tape<F>,
    cfg: &ModelConfig,
    vars: &[Var],
    ids: &[usize],
    batch: usize,
) -> Result<TapeForward> {
    let seq = check_tokens(cfg, ids, batch)?;
    let expected = final_index(cfg.n_layers, 3);
    if vars.len() != expected {
        return Err(Error::InvalidArgument(format!(
            "expected {expected} parameter vars, got {}",
            vars.len()
        )));
    }
    let pos_ids: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
    let tok = tape.embedding(vars[TOK_EMBED], ids)?;
    let pos = tape.embedding(vars[POS_EMBED], &pos_ids)?;
    let mut x = tape.add(tok, pos)?;
    let mut residuals = vec![x];
    for l in 0..cfg.n_layers {
        let p = |s| vars[layer_index(l, s)];
        let h = tape.layer_norm(x, p(slot::LN1_G), p(slot::LN1_B))?;
        let q = linear(tape, h, p(slot::Q_W), p(slot::Q_B))?;
        let k = linear(tape, h, p(slot::K_W), p(slot::K_B))?;
        let v = linear(tape, h, p(slot::V_W), p(slot::V_B))?;
        let a = tape.causal_attention(q, k, v, batch, cfg.n_heads)?;
        let a = linear(tape, a, p(slot::O_W), p(slot::O_B))?;
        x = tape.add(x, a)?;
        let h = tape.layer_norm(x, p(slot::LN2_G), p(slot::LN2_B))?;
        let h = linear(tape, h, p(slot::IN_W), p(slot::IN_B))?;
        let h = tape.gelu(h)?;
        let h = linear(tape, h, p(slot::OUT_W), p(slot::OUT_B))?;
        x = tape.add(x, h)?;
        residuals.push(x);
    }
    let f = |k| vars[final_index(cfg.n_layers, k)];
    let final_norm = tape.layer_norm(x, f(0), f(1))?;
    let logits = tape.matmul(final_norm, f(2))?;
    Ok(TapeForward {
        logits,
        residuals,
        final_norm,
    })
}

fn linear<F: Scalar>(tape: &mut Tape<F>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

/// Inference forward pass with an optional effective mask.
///
/// An all-ones mask reproduces the unmasked logits exactly, since every
/// parameter is multiplied by 1 before use.
pub fn forward<F: Scalar>(
    params: &ParamSet<F>,
    ids: &[usize],
    batch: usize,
    capture: bool,
    mask: Option<&EffectiveMask<F>>,
) -> Result<ForwardOutput<F>> {
    let masked;
    let params = match mask {
        Some(m) => {
            masked = m.apply(params)?;
            &masked
        }
        None => params,
    };
    let mut tape = Tape::<F>::new();
    let vars: Vec<Var> = params
        .tensors
        .iter()
        .map(|t| tape.constant(t.clone()))
        .collect();
    let out = forward_on_tape(&mut tape, &params.config, &vars, ids, batch)?;
    let (residuals, final_norm) = if capture {
        (
            Some(
                out.residuals
                    .iter()
                    .map(|&v| tape.value(v).clone())
                    .collect(),
            ),
            Some(tape.value(out.final_norm).clone()),
        )
    } else {
        (None, None)
    };
    Ok(ForwardOutput {
        logits: tape.value(out.logits).clone(),
        residuals,
        final_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ParamSet<f64> {
        ParamSet::init(&ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_mlp: 16,
            vocab_size: 13,
            max_seq_len: 6,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn logits_shape_and_trace_depth() {
        let p = tiny();
        let ids = [1, 2, 3, 4, 5, 6, 7, 8];
        let out = forward(&p, &ids, 2, true, None).unwrap();
        assert_eq!(out.logits.shape(), [8, 13]);
        let r = out.residuals.unwrap();
        assert_eq!(r.len(), 3);
        assert!(r.iter().all(|t| t.shape() == [8, 8]));
        assert_eq!(out.final_norm.unwrap().shape(), [8, 8]);
    }

    #[test]
    fn layer_zero_is_embedding_plus_position() {
        let p = tiny();
        let ids = [4, 9, 2];
        let out = forward(&p, &ids, 1, true, None).unwrap();
        let x0 = &out.residuals.unwrap()[0];
        for (t, &id) in ids.iter().enumerate() {
            for j in 0..8 {
                let e = p.tensors[TOK_EMBED].row(id)[j] + p.tensors[POS_EMBED].row(t)[j];
                assert_eq!(x0.row(t)[j], e);
            }
        }
    }

    #[test]
    fn all_ones_mask_is_exact() {
        let p = tiny();
        let ids = [3, 1, 4, 1, 5, 9];
        let a = forward(&p, &ids, 1, false, None).unwrap();
        let b = forward(&p, &ids, 1, false, Some(&EffectiveMask::ones(&p))).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn causal() {
        let p = tiny();
        let a = forward(&p, &[3, 1, 4, 1, 5, 9], 1, false, None).unwrap();
        let b = forward(&p, &[3, 1, 4, 7, 5, 9], 1, false, None).unwrap();
        for t in 0..3 {
            assert_eq!(a.logits.row(t), b.logits.row(t));
        }
        assert_ne!(a.logits.row(3), b.logits.row(3));
    }

    #[test]
    fn rejects_bad_tokens() {
        let p = tiny();
        assert!(matches!(
            forward(&p, &[13], 1, false, None),
            Err(Error::InvalidArgument(_))
        ));
        assert!(forward(&p, &[0; 7], 1, false, None).is_err());
        assert!(forward(&p, &[0; 5], 2, false, None).is_err());
    }

    #[test]
    fn mask_shape_checked() {
        let p = tiny();
        let mut m = EffectiveMask::ones(&p);
        m.values[0].pop();
        assert!(forward(&p, &[1], 1, false, Some(&m)).is_err());
    }
}
