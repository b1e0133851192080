// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::checkpoint::Checkpoint;
use super::forward::forward_on_tape;
use super::infer::heldout_loss;
use super::{ModelConfig, ParamSet};
use crate::autodiff::{Tape, Var, IGNORE_INDEX};
use crate::corpus::{batch_sequences, TokenStream};
use crate::error::{Error, Result};
use crate::optim::AdamState;

/// Language-model training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmHyper {
    pub lr: f64,
    pub steps: u64,
    pub checkpoint_every: u64,
    pub batch: usize,
    /// Training window length; must not exceed the model's `max_seq_len`.
    pub seq_len: usize,
    pub warmup_steps: u64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Trailing fraction of the stream held out for evaluation.
    pub heldout_frac: f64,
    /// Held-out tokens scored at each checkpoint (0 = all).
    pub eval_tokens: usize,
    pub seed: u64,
}

impl Default for LmHyper {
    fn default() -> Self {
        LmHyper {
            lr: 1e-3,
            steps: 2000,
            checkpoint_every: 250,
            batch: 32,
            seq_len: 128,
            warmup_steps: 100,
            grad_clip: 1.0,
            heldout_frac: 0.05,
            eval_tokens: 16_384,
            seed: 0,
        }
    }
}

/// Losses recorded during language-model training.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LmTrainLog {
    /// `(step, training batch loss)` for every optimizer step.
    pub train: Vec<(u64, f64)>,
    /// `(step, held-out mean surprisal)` at every checkpoint.
    pub heldout: Vec<(u64, f64)>,
}

/// Trains a fresh model and collects every checkpoint in memory.
pub fn train_lm(
    config: &ModelConfig,
    stream: &TokenStream,
    hyper: &LmHyper,
) -> Result<(Vec<Checkpoint>, LmTrainLog)> {
    let mut cps = Vec::new();
    let log = train_lm_with(config, stream, hyper, |cp| {
        cps.push(cp.clone());
        Ok(())
    })?;
    Ok((cps, log))
}

/// Trains a fresh model, handing each checkpoint to `sink` as soon as it is
/// taken. Checkpoints are taken at step 0, every `checkpoint_every` steps
/// and at the final step.
///
/// A non-finite loss or gradient aborts with a training failure; every
/// checkpoint handed to `sink` before that point stays valid.
pub fn train_lm_with(
    config: &ModelConfig,
    stream: &TokenStream,
    hyper: &LmHyper,
    mut sink: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<LmTrainLog> {
    if hyper.seq_len < 2 || hyper.seq_len > config.max_seq_len {
        return Err(Error::InvalidArgument(format!(
            "seq_len {} must lie in [2, {}]",
            hyper.seq_len, config.max_seq_len
        )));
    }
    if hyper.checkpoint_every == 0 || !(hyper.lr > 0.0) {
        return Err(Error::InvalidArgument(
            "checkpoint_every and lr must be positive".into(),
        ));
    }
    stream.validate(config.vocab_size)?;
    let (train, heldout) = stream.split_tail(hyper.heldout_frac);
    let heldout = if hyper.eval_tokens > 0 && heldout.len() > hyper.eval_tokens {
        TokenStream {
            ids: heldout.ids[..hyper.eval_tokens].to_vec(),
            ..heldout
        }
    } else {
        heldout
    };
    let first = batch_sequences(&train, hyper.seq_len, hyper.batch, Some(hyper.seed))?;
    if first.is_empty() {
        return Err(Error::InvalidInput(format!(
            "training split of {} tokens holds no batch of {}×{}",
            train.len(),
            hyper.batch,
            hyper.seq_len
        )));
    }

    let mut params = ParamSet::<f32>::init(config)?;
    let mut adam = AdamState::<f32>::new(params.tensors.iter().map(|t| t.len()));
    let mut log = LmTrainLog::default();
    let mut last_good = 0u64;

    let mut emit = |params: &ParamSet<f32>,
                    adam: &AdamState<f32>,
                    step: u64,
                    log: &mut LmTrainLog|
     -> Result<()> {
        if !heldout.is_empty() {
            log.heldout.push((step, heldout_loss(params, &heldout, None)?));
        }
        sink(&Checkpoint {
            params: params.clone(),
            step,
            optimizer_state_hash: adam_hash(adam),
        })
    };
    emit(&params, &adam, 0, &mut log)?;

    let mut batches = first;
    let mut epoch = 0u64;
    let mut cursor = 0usize;
    let rows = hyper.batch * hyper.seq_len;
    for step in 1..=hyper.steps {
        if cursor == batches.len() {
            epoch += 1;
            batches = batch_sequences(
                &train,
                hyper.seq_len,
                hyper.batch,
                Some(hyper.seed.wrapping_add(epoch)),
            )?;
            cursor = 0;
        }
        let batch = &batches[cursor];
        cursor += 1;
        let ids = batch.ids_usize();
        let targets: Vec<usize> = (0..rows)
            .map(|r| {
                if r % hyper.seq_len == hyper.seq_len - 1 {
                    IGNORE_INDEX
                } else {
                    ids[r + 1]
                }
            })
            .collect();

        let fail = |e| diverged(e, step, last_good);
        let mut tape = Tape::<f32>::new();
        let vars: Vec<Var> = params
            .tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), true))
            .collect();
        let out = forward_on_tape(&mut tape, config, &vars, &ids, hyper.batch).map_err(fail)?;
        let loss = tape.cross_entropy_ids(out.logits, &targets).map_err(fail)?;
        let loss_value = tape.value(loss).item()? as f64;
        tape.backward(loss).map_err(fail)?;
        let mut grads: Vec<Vec<f32>> = vars
            .iter()
            .map(|&v| {
                tape.take_grad(v)
                    .unwrap_or_else(|| vec![0.0; tape.value(v).len()])
            })
            .collect();
        drop(tape);

        if hyper.grad_clip > 0.0 {
            let clip = hyper.grad_clip;
            let norm = grads
                .iter()
                .flatten()
                .map(|&g| (g as f64) * (g as f64))
                .sum::<f64>()
                .sqrt();
            if norm > clip {
                let s = (clip / norm) as f32;
                grads.iter_mut().flatten().for_each(|g| *g *= s);
            }
        }
        let lr = if step <= hyper.warmup_steps {
            hyper.lr * step as f64 / hyper.warmup_steps as f64
        } else {
            hyper.lr
        };
        {
            let mut ps: Vec<&mut [f32]> =
                params.tensors.iter_mut().map(|t| t.data_mut()).collect();
            let gs: Vec<&[f32]> = grads.iter().map(Vec::as_slice).collect();
            adam.step(&mut ps, &gs, lr as f32)?;
        }
        if params.tensors.iter().any(|t| !t.is_finite()) {
            return Err(Error::TrainingFailure {
                step,
                last_good_step: last_good,
                detail: "parameters became non-finite".into(),
            });
        }
        log.train.push((step, loss_value));
        if step % hyper.checkpoint_every == 0 || step == hyper.steps {
            emit(&params, &adam, step, &mut log).map_err(|e| diverged(e, step, last_good))?;
            last_good = step;
        }
    }
    Ok(log)
}

fn diverged(e: Error, step: u64, last_good_step: u64) -> Error {
    match e {
        Error::NumericFailure { op, detail } => Error::TrainingFailure {
            step,
            last_good_step,
            detail: format!("{op}: {detail}"),
        },
        other => other,
    }
}

fn adam_hash(adam: &AdamState<f32>) -> String {
    let mut h = Sha256::new();
    h.update(adam.step.to_le_bytes());
    for buf in adam.first.iter().chain(&adam.second) {
        for x in buf {
            h.update(x.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(v: usize) -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 16,
            d_mlp: 32,
            vocab_size: v,
            max_seq_len: 8,
            ..ModelConfig::default()
        }
    }

    fn stream(ids: Vec<u32>) -> TokenStream {
        TokenStream {
            ids,
            sources: vec![],
            vocab_hash: String::new(),
        }
    }

    fn hyper(steps: u64) -> LmHyper {
        LmHyper {
            lr: 1e-2,
            steps,
            checkpoint_every: 50,
            batch: 4,
            seq_len: 8,
            warmup_steps: 5,
            ..LmHyper::default()
        }
    }

    #[test]
    fn zero_steps_gives_initialization() {
        let s = stream((0..400).map(|i| 2 + (i % 2)).collect());
        let (cps, _) = train_lm(&cfg(4), &s, &hyper(0)).unwrap();
        assert_eq!(cps.len(), 1);
        assert_eq!(cps[0].step, 0);
        assert_eq!(cps[0].params, ParamSet::init(&cfg(4)).unwrap());
    }

    #[test]
    fn alternating_corpus_is_learned() {
        // a b a b ...: after 'a' the next token is always 'b'
        let s = stream((0..2000).map(|i| 2 + (i % 2)).collect());
        let (cps, log) = train_lm(&cfg(4), &s, &hyper(150)).unwrap();
        assert_eq!(
            cps.iter().map(|c| c.step).collect::<Vec<_>>(),
            vec![0, 50, 100, 150]
        );
        let first = log.heldout[0].1;
        let last = log.heldout.last().unwrap().1;
        assert!(last < first);
        assert!(last < 0.05, "held-out loss {last}");
    }

    #[test]
    fn deterministic() {
        let s = stream((0..600).map(|i| 2 + (i * 7 % 5)).collect());
        let (a, _) = train_lm(&cfg(8), &s, &hyper(20)).unwrap();
        let (b, _) = train_lm(&cfg(8), &s, &hyper(20)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_short_stream_rejected() {
        let s = stream(vec![2, 3, 2, 3]);
        assert!(train_lm(&cfg(4), &s, &hyper(1)).is_err());
    }

    #[test]
    fn divergence_reports_last_good_checkpoint() {
        let s = stream((0..2000).map(|i| 2 + (i % 2)).collect());
        let h = LmHyper {
            lr: 1e30,
            grad_clip: 0.0,
            checkpoint_every: 1,
            warmup_steps: 0,
            ..hyper(50)
        };
        let mut kept = Vec::new();
        let err = train_lm_with(&cfg(4), &s, &h, |cp| {
            kept.push(cp.step);
            Ok(())
        })
        .unwrap_err();
        match err {
            Error::TrainingFailure { last_good_step, .. } => {
                assert_eq!(Some(&last_good_step), kept.last());
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
