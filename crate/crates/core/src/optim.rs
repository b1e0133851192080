// SPDX-License-Identifier: MIT OR Apache-2.0

//! Adam optimizer.
//!
//! Standard bias-corrected Adam with β1 = 0.9, β2 = 0.999, ε = 1e-8:
//!
//! ```text
//! m <- β1 m + (1 - β1) g
//! v <- β2 v + (1 - β2) g²
//! θ <- θ - lr · (m / (1 - β1^t)) / (sqrt(v / (1 - β2^t)) + ε)
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Scalar;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Moment estimates for a list of parameter buffers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState<F = f32> {
    pub step: u64,
    pub first: Vec<Vec<F>>,
    pub second: Vec<Vec<F>>,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(lens: impl IntoIterator<Item = usize>) -> Self {
        let lens: Vec<usize> = lens.into_iter().collect();
        AdamState {
            step: 0,
            first: lens.iter().map(|&n| vec![F::zero(); n]).collect(),
            second: lens.iter().map(|&n| vec![F::zero(); n]).collect(),
        }
    }

    /// Applies one update in place. `grads[i]` pairs with `params[i]`.
    pub fn step(&mut self, params: &mut [&mut [F]], grads: &[&[F]], lr: F) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::InvalidArgument(format!(
                "adam state tracks {} buffers, got {} params and {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.first[i].len() || g.len() != p.len() {
                return Err(Error::InvalidArgument(format!(
                    "adam buffer {i}: state {} / param {} / grad {}",
                    self.first[i].len(),
                    p.len(),
                    g.len()
                )));
            }
        }
        self.step += 1;
        let b1 = F::lit(ADAM_BETA1);
        let b2 = F::lit(ADAM_BETA2);
        let eps = F::lit(ADAM_EPS);
        let t = self.step as i32;
        let c1 = F::one() - b1.powi(t);
        let c2 = F::one() - b2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            for j in 0..p.len() {
                let gj = g[j];
                m[j] = b1 * m[j] + (F::one() - b1) * gj;
                v[j] = b2 * v[j] + (F::one() - b2) * gj * gj;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                p[j] = p[j] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.0f64, -2.0, 0.5];
        let mut st = AdamState::<f64>::new([3]);
        st.step(&mut [&mut p], &[&[0.0, 0.0, 0.0]], 1e-3).unwrap();
        for (a, b) in p.iter().zip([1.0, -2.0, 0.5]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn first_step_is_signed_lr() {
        let lr = 5e-5;
        let g = [0.3f64, -2.0, 1e-3];
        let mut p = vec![0.0f64; 3];
        let mut st = AdamState::<f64>::new([3]);
        st.step(&mut [&mut p], &[&g], lr).unwrap();
        for (pj, gj) in p.iter().zip(g) {
            // closed form: -lr * g / (|g| + eps)
            let expected = -lr * gj / (gj.abs() + ADAM_EPS);
            assert!((pj - expected).abs() < 1e-15);
            assert!((pj + lr * gj.signum()).abs() < lr * 1e-4);
        }
    }

    #[test]
    fn mismatched_state_rejected() {
        let mut p = vec![0.0f32; 2];
        let mut st = AdamState::<f32>::new([3]);
        assert!(matches!(
            st.step(&mut [&mut p], &[&[0.0, 0.0]], 1e-3),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut p = vec![0.1f32, 0.2, 0.3];
            let mut st = AdamState::<f32>::new([3]);
            for k in 0..50 {
                let g: Vec<f32> = p.iter().map(|x| x * (k as f32).sin()).collect();
                st.step(&mut [&mut p], &[&g], 1e-2).unwrap();
            }
            p
        };
        assert_eq!(
            run().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            run().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }
}
