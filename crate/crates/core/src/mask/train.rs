// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use super::{check_spikes, converged, temperature_at, MaskSet, SpikeCheck, TargetKind};
use crate::autodiff::{softmax_rows, Tape, Var};
use crate::bigram::BigramTable;
use crate::corpus::{batch_sequences, TokenStream};
use crate::error::{Error, Result};
use crate::model::{forward, forward_on_tape, ParamSet};
use crate::optim::AdamState;
use crate::tensor::{Scalar, Tensor};

/// Distribution the masked model is fitted to.
#[derive(Clone, Copy, Debug)]
pub enum MaskTarget<'a> {
    /// Bigram row `P(· | w_t)` at every position `t`.
    Bigram(&'a BigramTable),
    /// Softmax output of a frozen teacher at temperature 1.
    Teacher(&'a ParamSet<f32>),
}

impl MaskTarget<'_> {
    pub fn kind(&self) -> TargetKind {
        match self {
            MaskTarget::Bigram(_) => TargetKind::Bigram,
            MaskTarget::Teacher(_) => TargetKind::ModelDistill,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskHyper {
    pub lr: f64,
    pub batch: usize,
    pub seq_len: usize,
    pub t0: f64,
    pub t_divisor: f64,
    /// Hard cap on optimizer steps when convergence is not reached.
    pub max_steps: u64,
    /// Drop the cross-entropy term, leaving only the sparsity penalty.
    pub penalty_only: bool,
    /// Trailing window over which batch cross-entropy is averaged before
    /// the spike rule is applied.
    pub spike_window: usize,
    pub seed: u64,
}

impl Default for MaskHyper {
    fn default() -> Self {
        MaskHyper {
            lr: 5e-5,
            batch: 32,
            seq_len: 128,
            t0: 1.0,
            t_divisor: 1.001,
            max_steps: 20_000,
            penalty_only: false,
            spike_window: 20,
            seed: 0,
        }
    }
}

/// One row of the mask-training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    /// `cross_entropy + λ · mean_mask`
    pub loss: f64,
    pub cross_entropy: f64,
    /// Trailing mean of `cross_entropy`; the spike rule reads this column.
    pub ce_smoothed: f64,
    pub mean_mask: f64,
    /// Temperature used for this step's forward pass.
    pub temperature: f64,
    pub undecided: usize,
    pub above: usize,
}

#[derive(Clone, Debug)]
pub struct MaskRun {
    pub mask: MaskSet<f32>,
    pub log: Vec<StepRecord>,
    pub converged: bool,
}

/// Loss terms and mask-logit gradients for one batch.
#[derive(Clone, Debug)]
pub struct MaskObjective<F> {
    pub total: f64,
    pub cross_entropy: f64,
    pub mean_mask: f64,
    /// Gradient of `total` with respect to every mask logit.
    pub grads: Vec<Vec<F>>,
}

/// Logits of the model with every maskable θ replaced by θ·σ(m/T).
pub fn masked_forward<F: Scalar>(
    params: &ParamSet<F>,
    mask: &MaskSet<F>,
    ids: &[usize],
    batch: usize,
) -> Result<Tensor<F>> {
    mask.check(params)?;
    Ok(forward(params, ids, batch, false, Some(&mask.values()))?.logits)
}

/// Evaluates the training objective on one batch and differentiates it with
/// respect to the mask logits only. `targets` holds one distribution per
/// token position (`[batch * seq, vocab]`).
pub fn mask_objective<F: Scalar>(
    params: &ParamSet<F>,
    mask: &MaskSet<F>,
    ids: &[usize],
    batch: usize,
    targets: &[F],
    penalty_only: bool,
) -> Result<MaskObjective<F>> {
    mask.check(params)?;
    let n_mask = mask.len();
    if n_mask == 0 {
        return Err(Error::InvalidArgument("model has no maskable parameters".into()));
    }
    let mut tape = Tape::<F>::new();
    let inv_t = F::lit(1.0 / mask.temperature);
    let mut vars = Vec::with_capacity(params.len());
    let mut m_vars = Vec::with_capacity(mask.logits.len());
    let mut soft_sums: Option<Var> = None;
    let mut masks = mask.logits.iter();
    for (info, theta) in params.infos.iter().zip(&params.tensors) {
        let theta_var = tape.constant(theta.clone());
        if !info.maskable() {
            vars.push(theta_var);
            continue;
        }
        let m = masks.next().expect("mask covers maskable tensors");
        let m_var = tape.leaf(Tensor::new(theta.shape().to_vec(), m.clone())?, true);
        let s = tape.sigmoid_scaled(m_var, inv_t)?;
        let total = tape.sum(s)?;
        soft_sums = Some(match soft_sums {
            None => total,
            Some(acc) => tape.add(acc, total)?,
        });
        vars.push(tape.mul(theta_var, s)?);
        m_vars.push(m_var);
    }
    let soft_sum = soft_sums.expect("at least one maskable tensor");
    let mean_mask_var = tape.scale(soft_sum, F::lit(1.0 / n_mask as f64))?;
    let penalty = tape.scale(mean_mask_var, F::lit(mask.lambda))?;
    let mean_mask = tape.value(mean_mask_var).item()?.to_f64().unwrap_or(f64::NAN);

    let (loss, cross_entropy) = if penalty_only {
        (penalty, 0.0)
    } else {
        let out = forward_on_tape(&mut tape, &params.config, &vars, ids, batch)?;
        let ce = tape.cross_entropy_soft(out.logits, targets)?;
        let ce_value = tape.value(ce).item()?.to_f64().unwrap_or(f64::NAN);
        (tape.add(ce, penalty)?, ce_value)
    };
    let total = tape.value(loss).item()?.to_f64().unwrap_or(f64::NAN);
    tape.backward(loss)?;
    let grads = m_vars
        .iter()
        .map(|&v| {
            tape.take_grad(v)
                .unwrap_or_else(|| vec![F::zero(); tape.value(v).len()])
        })
        .collect();
    Ok(MaskObjective {
        total,
        cross_entropy,
        mean_mask,
        grads,
    })
}

/// Dense `V × V` bigram matrix used to fill soft targets quickly.
struct DenseBigram {
    v: usize,
    data: Vec<f32>,
}

impl DenseBigram {
    fn new(table: &BigramTable) -> Result<Self> {
        let v = table.vocab_size;
        let mut data = Vec::with_capacity(v * v);
        for prev in 0..v {
            data.extend(table.dist(prev as u32)?.into_iter().map(|p| p as f32));
        }
        Ok(DenseBigram { v, data })
    }

    fn targets(&self, ids: &[usize]) -> Vec<f32> {
        let mut out = Vec::with_capacity(ids.len() * self.v);
        for &i in ids {
            out.extend_from_slice(&self.data[i * self.v..(i + 1) * self.v]);
        }
        out
    }
}

/// Learns a mask over the frozen maskable parameters of `params`.
///
/// Logits start at 0 and the temperature at `t0`; after every step the
/// temperature is divided by `t_divisor`. Training stops as soon as the
/// convergence rule holds or after `max_steps`. An unrecovered loss spike
/// is reported as a retrain signal carrying the full log, leaving the retry
/// policy to the caller.
pub fn train_mask(
    params: &ParamSet<f32>,
    target: MaskTarget<'_>,
    lambda: f64,
    hyper: &MaskHyper,
    stream: &TokenStream,
) -> Result<MaskRun> {
    let cfg = &params.config;
    let dense = match target {
        MaskTarget::Bigram(table) => {
            if table.vocab_size != cfg.vocab_size {
                return Err(Error::InvalidArgument(format!(
                    "bigram vocabulary {} does not match model vocabulary {}",
                    table.vocab_size, cfg.vocab_size
                )));
            }
            Some(DenseBigram::new(table)?)
        }
        MaskTarget::Teacher(teacher) => {
            if teacher.config.vocab_size != cfg.vocab_size {
                return Err(Error::InvalidArgument(format!(
                    "teacher vocabulary {} does not match model vocabulary {}",
                    teacher.config.vocab_size, cfg.vocab_size
                )));
            }
            None
        }
    };
    if hyper.seq_len > cfg.max_seq_len || hyper.seq_len < 2 {
        return Err(Error::InvalidArgument(format!(
            "seq_len {} must lie in [2, {}]",
            hyper.seq_len, cfg.max_seq_len
        )));
    }
    if !(hyper.lr > 0.0) || !(hyper.t_divisor >= 1.0) || hyper.spike_window == 0 {
        return Err(Error::InvalidArgument(
            "lr must be positive, t_divisor at least 1 and spike_window non-zero".into(),
        ));
    }
    stream.validate(cfg.vocab_size)?;
    let mut mask = MaskSet::new(params, lambda, target.kind(), hyper.t0)?;
    let mut adam = AdamState::<f32>::new(mask.logits.iter().map(Vec::len));
    let mut log: Vec<StepRecord> = Vec::new();
    let mut batches = batch_sequences(stream, hyper.seq_len, hyper.batch, Some(hyper.seed))?;
    if batches.is_empty() {
        return Err(Error::InvalidInput(format!(
            "stream of {} tokens holds no batch of {}×{}",
            stream.len(),
            hyper.batch,
            hyper.seq_len
        )));
    }
    let mut cursor = 0;
    let mut epoch = 0u64;
    let mut is_converged = false;

    while mask.step < hyper.max_steps {
        if cursor == batches.len() {
            epoch += 1;
            batches = batch_sequences(
                stream,
                hyper.seq_len,
                hyper.batch,
                Some(hyper.seed.wrapping_add(epoch)),
            )?;
            cursor = 0;
        }
        let ids = batches[cursor].ids_usize();
        cursor += 1;
        let targets = match (&dense, target) {
            (_, _) if hyper.penalty_only => Vec::new(),
            (Some(d), _) => d.targets(&ids),
            (None, MaskTarget::Teacher(teacher)) => {
                let logits = forward(teacher, &ids, hyper.batch, false, None)?.logits;
                softmax_rows(logits.data(), cfg.vocab_size)
            }
            (None, MaskTarget::Bigram(_)) => unreachable!("bigram targets are dense"),
        };
        let temperature = mask.temperature;
        let obj = mask_objective(params, &mask, &ids, hyper.batch, &targets, hyper.penalty_only)?;
        {
            let mut ms: Vec<&mut [f32]> = mask.logits.iter_mut().map(Vec::as_mut_slice).collect();
            let gs: Vec<&[f32]> = obj.grads.iter().map(Vec::as_slice).collect();
            adam.step(&mut ms, &gs, hyper.lr as f32)?;
        }
        if mask.logits.iter().flatten().any(|m| !m.is_finite()) {
            return Err(Error::NumericFailure {
                op: "mask update".into(),
                detail: format!("non-finite mask logit at step {}", mask.step + 1),
            });
        }
        mask.step += 1;
        mask.temperature = temperature_at(hyper.t0, hyper.t_divisor, mask.step);

        let (undecided, above) = mask.decision_counts();
        let tracked = if hyper.penalty_only { obj.total } else { obj.cross_entropy };
        let window = log.len().min(hyper.spike_window - 1);
        let ce_smoothed = (log[log.len() - window..]
            .iter()
            .map(|r| if hyper.penalty_only { r.loss } else { r.cross_entropy })
            .sum::<f64>()
            + tracked)
            / (window + 1) as f64;
        log.push(StepRecord {
            step: mask.step,
            loss: obj.total,
            cross_entropy: obj.cross_entropy,
            ce_smoothed,
            mean_mask: obj.mean_mask,
            temperature,
            undecided,
            above,
        });
        if converged(undecided, above) {
            is_converged = true;
            break;
        }
    }

    let smoothed: Vec<f64> = log.iter().map(|r| r.ce_smoothed).collect();
    if let SpikeCheck::Violation(i) = check_spikes(&smoothed) {
        return Err(Error::RetrainSignal {
            step: log[i].step,
            log,
        });
    }
    Ok(MaskRun {
        mask,
        log,
        converged: is_converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bigram::count_bigrams;
    use crate::model::ModelConfig;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            d_mlp: 16,
            vocab_size: 6,
            max_seq_len: 8,
            ..ModelConfig::default()
        }
    }

    fn stream(n: usize) -> TokenStream {
        TokenStream {
            ids: (0..n).map(|i| 2 + ((i * i + i / 3) % 4) as u32).collect(),
            sources: vec![],
            vocab_hash: String::new(),
        }
    }

    #[test]
    fn saturated_mask_reproduces_full_model() {
        let p = ParamSet::<f64>::init(&cfg()).unwrap();
        let ids = [2, 3, 4, 5, 2, 3];
        let full = forward(&p, &ids, 1, false, None).unwrap().logits;
        let on = MaskSet::filled(&p, 100.0, 0.0, TargetKind::Bigram, 1.0).unwrap();
        let got = masked_forward(&p, &on, &ids, 1).unwrap();
        for (a, b) in full.data().iter().zip(got.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn closed_mask_leaves_embeddings_and_norms() {
        let p = ParamSet::<f64>::init(&cfg()).unwrap();
        let off = MaskSet::filled(&p, -100.0, 0.0, TargetKind::Bigram, 1.0).unwrap();
        let ids = [2, 3, 4];
        let got = masked_forward(&p, &off, &ids, 1).unwrap();
        // With every maskable tensor ≈ 0 the blocks add nothing: the logits
        // are LN_f(tok + pos) · W_U.
        let mut zeroed = p.clone();
        for k in p.maskable_indices() {
            zeroed.tensors[k] = Tensor::zeros(p.tensors[k].shape());
        }
        let want = forward(&zeroed, &ids, 1, false, None).unwrap().logits;
        for (a, b) in want.data().iter().zip(got.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn mismatched_mask_rejected() {
        let p = ParamSet::<f64>::init(&cfg()).unwrap();
        let mut m = MaskSet::new(&p, 0.0, TargetKind::Bigram, 1.0).unwrap();
        m.logits[0].pop();
        assert!(matches!(
            masked_forward(&p, &m, &[2], 1),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn loss_decomposes() {
        let p = ParamSet::<f32>::init(&cfg()).unwrap();
        let s = stream(200);
        let table = count_bigrams(&s, 6, 1e-6).unwrap();
        let h = MaskHyper {
            lr: 1e-2,
            batch: 2,
            seq_len: 8,
            max_steps: 30,
            ..MaskHyper::default()
        };
        let run = train_mask(&p, MaskTarget::Bigram(&table), 3.0, &h, &s).unwrap();
        assert_eq!(run.log.len(), 30);
        for r in &run.log {
            assert!((r.loss - (r.cross_entropy + 3.0 * r.mean_mask)).abs() < 1e-6);
            assert!((r.temperature - temperature_at(1.0, 1.001, r.step - 1)).abs() < 1e-15);
        }
    }

    #[test]
    fn frozen_parameters_and_determinism() {
        let p = ParamSet::<f32>::init(&cfg()).unwrap();
        let before = p.clone();
        let s = stream(200);
        let table = count_bigrams(&s, 6, 1e-6).unwrap();
        let h = MaskHyper {
            lr: 1e-2,
            batch: 2,
            seq_len: 8,
            max_steps: 10,
            ..MaskHyper::default()
        };
        let a = train_mask(&p, MaskTarget::Bigram(&table), 1.0, &h, &s).unwrap();
        let b = train_mask(&p, MaskTarget::Bigram(&table), 1.0, &h, &s).unwrap();
        assert_eq!(a.mask, b.mask);
        for (x, y) in p.tensors.iter().zip(&before.tensors) {
            assert_eq!(
                x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                y.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn penalty_alone_closes_the_mask() {
        let p = ParamSet::<f32>::init(&cfg()).unwrap();
        let s = stream(200);
        let table = count_bigrams(&s, 6, 1e-6).unwrap();
        let h = MaskHyper {
            lr: 1e-2,
            batch: 2,
            seq_len: 8,
            max_steps: 2000,
            penalty_only: true,
            ..MaskHyper::default()
        };
        let run = train_mask(&p, MaskTarget::Bigram(&table), 1000.0, &h, &s).unwrap();
        let vals = run.mask.values();
        assert!(vals.values.iter().flatten().all(|&v| v < 0.1));
    }

    #[test]
    fn vocab_mismatch_rejected() {
        let p = ParamSet::<f32>::init(&cfg()).unwrap();
        let s = stream(200);
        let table = count_bigrams(&s, 7, 1e-6).unwrap();
        assert!(matches!(
            train_mask(&p, MaskTarget::Bigram(&table), 0.0, &MaskHyper::default(), &s),
            Err(Error::InvalidArgument(_))
        ));
    }
}
