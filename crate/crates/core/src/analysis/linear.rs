// SPDX-License-Identifier: MIT OR Apache-2.0

use nalgebra::{Cholesky, DMatrix, Schur, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::ActivationTrace;
use crate::error::{Error, Result};

pub const DEFAULT_RIDGE_ALPHA: f64 = 1.0;

/// Convergence tolerance of the real Schur iteration.
const SCHUR_EPS: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RotationTarget {
    /// Map back to the layer-0 embeddings.
    Input,
    /// Map forward to the final pre-unembedding state.
    Output,
}

impl RotationTarget {
    pub fn label(self) -> &'static str {
        match self {
            RotationTarget::Input => "input",
            RotationTarget::Output => "output",
        }
    }
}

/// Ridge-regression map with `Y ≈ (X − x_mean) L + y_mean`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearMap {
    pub d_in: usize,
    pub d_out: usize,
    /// `d_in × d_out`, row-major.
    pub matrix: Vec<f64>,
    /// Column means removed before fitting; zeros when uncentered.
    pub x_mean: Vec<f64>,
    pub y_mean: Vec<f64>,
    pub alpha: f64,
    pub n: usize,
    pub centered: bool,
}

impl LinearMap {
    /// Applies the map to the `n × d_in` rows of `x`.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() % self.d_in != 0 {
            return Err(Error::InvalidArgument(format!(
                "input of {} values is not a multiple of width {}",
                x.len(),
                self.d_in
            )));
        }
        let mut out = Vec::with_capacity(x.len() / self.d_in * self.d_out);
        let mut centered = vec![0.0; self.d_in];
        for row in x.chunks_exact(self.d_in) {
            for (c, (v, m)) in centered.iter_mut().zip(row.iter().zip(&self.x_mean)) {
                *c = v - m;
            }
            for j in 0..self.d_out {
                let mut s = self.y_mean[j];
                for (i, c) in centered.iter().enumerate() {
                    s += c * self.matrix[i * self.d_out + j];
                }
                out.push(s);
            }
        }
        Ok(out)
    }
}

fn column_means(m: &DMatrix<f64>) -> Vec<f64> {
    (0..m.ncols()).map(|j| m.column(j).mean()).collect()
}

/// Solves `(XᵀX + αI) L = XᵀY` for row-major `x` (`n × d_in`) and `y`
/// (`n × d_out`). With `centered` the column means of both are removed
/// first.
pub fn ridge_fit(
    x: &[f64],
    y: &[f64],
    n: usize,
    alpha: f64,
    centered: bool,
) -> Result<LinearMap> {
    if n == 0 || x.len() % n != 0 || y.len() % n != 0 {
        return Err(Error::InvalidArgument(format!(
            "ridge inputs of {} and {} values do not have {n} rows",
            x.len(),
            y.len()
        )));
    }
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "alpha must be finite and non-negative, got {alpha}"
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("ridge inputs contain non-finite values".into()));
    }
    let (d_in, d_out) = (x.len() / n, y.len() / n);
    let mut xm = DMatrix::from_row_slice(n, d_in, x);
    let mut ym = DMatrix::from_row_slice(n, d_out, y);
    let (x_mean, y_mean) = if centered {
        let (xmu, ymu) = (column_means(&xm), column_means(&ym));
        for (j, mu) in xmu.iter().enumerate() {
            xm.column_mut(j).add_scalar_mut(-mu);
        }
        for (j, mu) in ymu.iter().enumerate() {
            ym.column_mut(j).add_scalar_mut(-mu);
        }
        (xmu, ymu)
    } else {
        (vec![0.0; d_in], vec![0.0; d_out])
    };
    let mut gram = xm.tr_mul(&xm);
    for i in 0..d_in {
        gram[(i, i)] += alpha;
    }
    let rhs = xm.tr_mul(&ym);
    let chol = Cholesky::new(gram).ok_or_else(|| Error::NumericFailure {
        op: "ridge_fit".into(),
        detail: if alpha == 0.0 {
            "normal equations are singular; use alpha > 0".into()
        } else {
            "normal equations are not positive definite".into()
        },
    })?;
    let l = chol.solve(&rhs);
    if l.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericFailure {
            op: "ridge_fit".into(),
            detail: "solution is not finite; use a larger alpha".into(),
        });
    }
    let mut matrix = Vec::with_capacity(d_in * d_out);
    for i in 0..d_in {
        for j in 0..d_out {
            matrix.push(l[(i, j)]);
        }
    }
    Ok(LinearMap {
        d_in,
        d_out,
        matrix,
        x_mean,
        y_mean,
        alpha,
        n,
        centered,
    })
}

/// Argument of every eigenvalue of the square row-major matrix `l`, as
/// `|atan2(im, re)|` in degrees, with multiplicity.
pub fn eigen_angles(l: &[f64], d: usize) -> Result<Vec<f64>> {
    if d == 0 || l.len() != d * d {
        return Err(Error::InvalidArgument(format!(
            "{} values do not form a {d}×{d} matrix",
            l.len()
        )));
    }
    if l.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("matrix contains non-finite values".into()));
    }
    let m = DMatrix::from_row_slice(d, d, l);
    let schur = Schur::try_new(m, SCHUR_EPS, 10_000 * d).ok_or_else(|| Error::NumericFailure {
        op: "eigen_angles".into(),
        detail: "Schur iteration did not converge".into(),
    })?;
    Ok(schur
        .complex_eigenvalues()
        .iter()
        .map(|z| z.im.atan2(z.re).abs().to_degrees())
        .collect())
}

/// Median of a non-empty sample; the mean of the two middle values when
/// the length is even.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() || values.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidInput("median of empty or NaN sample".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("no NaN"));
    let k = v.len() / 2;
    Ok(if v.len() % 2 == 1 {
        v[k]
    } else {
        (v[k - 1] + v[k]) / 2.0
    })
}

/// Median eigen-angle of the ridge map from layer `layer` to either the
/// input embeddings or the output state.
pub fn median_rotation(
    trace: &ActivationTrace,
    layer: usize,
    target: RotationTarget,
    alpha: f64,
    centered: bool,
) -> Result<f64> {
    let x = trace.layer(layer)?;
    let y = match target {
        RotationTarget::Input => &trace.layers[0],
        RotationTarget::Output => &trace.out,
    };
    let map = ridge_fit(x, y, trace.n, alpha, centered)?;
    median(&eigen_angles(&map.matrix, trace.d)?)
}

/// Frobenius cosine similarity between the covariance matrices of every
/// pair of layers `0..=n_layers`, each with its top eigencomponent removed.
pub fn covariance_similarity(trace: &ActivationTrace) -> Result<Vec<Vec<f64>>> {
    let (n, d) = (trace.n, trace.d);
    if n < 2 {
        return Err(Error::InvalidInput("covariance needs at least two rows".into()));
    }
    let reduced: Vec<DMatrix<f64>> = trace
        .layers
        .iter()
        .map(|x| {
            let mut m = DMatrix::from_row_slice(n, d, x);
            for (j, mu) in column_means(&m).iter().enumerate() {
                m.column_mut(j).add_scalar_mut(-mu);
            }
            let cov = m.tr_mul(&m) / (n - 1) as f64;
            let eig = SymmetricEigen::new(cov.clone());
            let top = eig.eigenvalues.imax();
            let u = eig.eigenvectors.column(top);
            cov - (u * u.transpose()) * eig.eigenvalues[top]
        })
        .collect();
    let norms: Vec<f64> = reduced.iter().map(|c| c.norm()).collect();
    let k = reduced.len();
    let mut out = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in i..k {
            if norms[i] == 0.0 || norms[j] == 0.0 {
                return Err(Error::UndefinedSimilarity { i, j });
            }
            let s = if i == j {
                1.0
            } else {
                reduced[i].dot(&reduced[j]) / (norms[i] * norms[j])
            };
            out[i][j] = s;
            out[j][i] = s;
        }
    }
    Ok(out)
}
