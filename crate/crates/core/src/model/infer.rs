// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::Rng as _;

use super::forward::{forward, EffectiveMask};
use super::ParamSet;
use crate::autodiff::log_softmax_rows;
use crate::corpus::{scored_positions, TokenStream, Vocab, BOS};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Windows evaluated together in one forward pass.
const EVAL_BATCH: usize = 16;

/// Scored stream positions for a model with context `seq_len`.
pub fn eval_positions(stream: &TokenStream, seq_len: usize) -> Result<Vec<usize>> {
    scored_positions(&stream.ids, seq_len)
}

/// Natural-log surprisal `-ln p(w_i | window prefix)` at every position
/// returned by [`eval_positions`] with the model's `max_seq_len`.
pub fn surprisals<F: Scalar>(
    params: &ParamSet<F>,
    stream: &TokenStream,
    mask: Option<&EffectiveMask<F>>,
) -> Result<Vec<f64>> {
    let cfg = &params.config;
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
    let v = cfg.vocab_size;
    let ids = &stream.ids;
    let mut out = Vec::new();
    let full = ids.len() / seq;
    let mut run = |start: usize, n_windows: usize, len: usize| -> Result<()> {
        let chunk: Vec<usize> = ids[start..start + n_windows * len]
            .iter()
            .map(|&i| i as usize)
            .collect();
        let logits = forward(params, &chunk, n_windows, false, None)?.logits;
        for w in 0..n_windows {
            for t in 1..len {
                let target = chunk[w * len + t];
                if target == BOS as usize {
                    continue;
                }
                let row = logits.row(w * len + t - 1);
                let lp = log_softmax_rows(row, v);
                out.push(-lp[target].to_f64().unwrap_or(f64::NAN));
            }
        }
        Ok(())
    };
    let mut w = 0;
    while w < full {
        let n = EVAL_BATCH.min(full - w);
        run(w * seq, n, seq)?;
        w += n;
    }
    let rest = ids.len() - full * seq;
    if rest >= 2 {
        run(full * seq, 1, rest)?;
    }
    Ok(out)
}

/// Mean surprisal over the scored positions of `stream`, in nats.
pub fn heldout_loss<F: Scalar>(
    params: &ParamSet<F>,
    stream: &TokenStream,
    mask: Option<&EffectiveMask<F>>,
) -> Result<f64> {
    let s = surprisals(params, stream, mask)?;
    if s.is_empty() {
        return Err(Error::InvalidInput(
            "stream has no scored positions".into(),
        ));
    }
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateOptions {
    pub n_tokens: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions {
            n_tokens: 30,
            temperature: 0.30,
            seed: 0,
        }
    }
}

/// Below this temperature sampling becomes argmax.
pub const GREEDY_TEMPERATURE: f64 = 1e-6;

/// Samples a continuation of `prompt` and returns the generated text only.
///
/// The prompt is preceded by a document-start marker. Logits are divided by
/// the temperature before the softmax; the context is truncated to the most
/// recent `max_seq_len` tokens.
pub fn generate<F: Scalar>(
    params: &ParamSet<F>,
    vocab: &Vocab,
    prompt: &str,
    opts: &GenerateOptions,
    mask: Option<&EffectiveMask<F>>,
) -> Result<String> {
    if !(opts.temperature > 0.0) || !opts.temperature.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {}",
            opts.temperature
        )));
    }
    if vocab.len() > params.config.vocab_size {
        return Err(Error::InvalidArgument(format!(
            "vocabulary of {} exceeds model vocabulary of {}",
            vocab.len(),
            params.config.vocab_size
        )));
    }
    let encoded = vocab.encode(prompt);
    if encoded.is_empty() {
        return Err(Error::InvalidArgument("prompt tokenizes to nothing".into()));
    }
    let masked;
    let params = match mask {
        Some(m) => {
            masked = m.apply(params)?;
            &masked
        }
        None => params,
    };
    let mut ctx: Vec<usize> = std::iter::once(BOS as usize)
        .chain(encoded.iter().map(|&i| i as usize))
        .collect();
    let mut rng = crate::rng::stream(opts.seed, "generate");
    let mut produced = Vec::with_capacity(opts.n_tokens);
    let max = params.config.max_seq_len;
    for _ in 0..opts.n_tokens {
        let window = &ctx[ctx.len().saturating_sub(max)..];
        let logits = forward(params, window, 1, false, None)?.logits;
        // Output rows past the vocabulary are never sampled.
        let row: Vec<f64> = logits.row(window.len() - 1)[..vocab.len()]
            .iter()
            .map(|x| x.to_f64().unwrap_or(f64::NAN))
            .collect();
        let next = if opts.temperature < GREEDY_TEMPERATURE {
            argmax(&row)
        } else {
            let scaled: Vec<f64> = row.iter().map(|x| x / opts.temperature).collect();
            let logp = log_softmax_rows(&scaled, scaled.len());
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut pick = logp.len() - 1;
            for (i, lp) in logp.iter().enumerate() {
                acc += lp.exp();
                if u < acc {
                    pick = i;
                    break;
                }
            }
            pick
        };
        ctx.push(next);
        produced.push(next as u32);
    }
    Ok(vocab.decode(&produced))
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn zero_model(v: usize) -> ParamSet<f64> {
        let cfg = ModelConfig {
            n_layers: 1,
            n_heads: 1,
            d_model: 4,
            d_mlp: 8,
            vocab_size: v,
            max_seq_len: 4,
            ..ModelConfig::default()
        };
        let mut p = ParamSet::<f64>::init(&cfg).unwrap();
        let u = p.index_of("unembed.weight").unwrap();
        p.tensors[u] = crate::tensor::Tensor::zeros(&[4, v]);
        p
    }

    fn stream(ids: Vec<u32>) -> TokenStream {
        TokenStream {
            ids,
            sources: vec![],
            vocab_hash: String::new(),
        }
    }

    #[test]
    fn uniform_logits_give_ln_v() {
        let p = zero_model(7);
        let s = stream(vec![1, 2, 3, 4, 5, 6, 2, 3, 4, 5]);
        let out = surprisals(&p, &s, None).unwrap();
        assert_eq!(out.len(), eval_positions(&s, 4).unwrap().len());
        for x in out {
            assert!((x - 7f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_mask_same_series() {
        let p = ParamSet::<f64>::init(&ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 4,
            d_mlp: 8,
            vocab_size: 9,
            max_seq_len: 5,
            ..ModelConfig::default()
        })
        .unwrap();
        let s = stream((0..23).map(|i| (i * 7 % 9) as u32).collect());
        let a = surprisals(&p, &s, None).unwrap();
        let b = surprisals(&p, &s, Some(&EffectiveMask::ones(&p))).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn generate_validates_and_is_deterministic() {
        let p = zero_model(5);
        let vocab = Vocab::from_tokens(
            ["<unk>", "<bos>", "a", "b", "c"].map(String::from).to_vec(),
        )
        .unwrap();
        let bad = GenerateOptions {
            temperature: 0.0,
            ..Default::default()
        };
        assert!(matches!(
            generate(&p, &vocab, "a", &bad, None),
            Err(Error::InvalidArgument(_))
        ));
        assert!(generate(&p, &vocab, "", &GenerateOptions::default(), None).is_err());
        let o = GenerateOptions {
            n_tokens: 6,
            temperature: 1.0,
            seed: 3,
        };
        let x = generate(&p, &vocab, "a b", &o, None).unwrap();
        assert_eq!(x, generate(&p, &vocab, "a b", &o, None).unwrap());
        assert_eq!(x.split(' ').count(), 6);
        // uniform logits: greedy picks the first id every time
        let g = GenerateOptions {
            temperature: 1e-9,
            ..o
        };
        assert_eq!(
            generate(&p, &vocab, "a", &g, None).unwrap(),
            vec!["<unk>"; 6].join(" ")
        );
    }
}
