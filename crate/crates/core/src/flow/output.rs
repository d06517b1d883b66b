//! Output maps from the flow's Euclidean state onto the target support.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutputMap {
    Identity,
    /// `gᵢ(z) = e^{zᵢ} / (Σₖ e^{zₖ} + 1)`: onto the open region
    /// `{s > 0, Σs < 1}` of the same dimension.
    Simplex,
    /// `g(z) = e^{a·z + b}` coordinatewise; trainable `a`, `b`.
    PositiveAffine {
        a: f64,
        b: f64,
    },
}

/// `log(Σ e^{zᵢ} + 1)` with max-subtraction.
pub(crate) fn log_one_plus_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(0.0_f64, f64::max);
    let s: f64 = z.iter().map(|v| (v - m).exp()).sum::<f64>() + (-m).exp();
    m + s.ln()
}

impl OutputMap {
    pub fn param_count(&self) -> usize {
        match self {
            OutputMap::PositiveAffine { .. } => 2,
            _ => 0,
        }
    }

    /// Returns the mapped point and `log|det J_g(z)|`.
    pub fn apply(&self, z: &[f64]) -> Result<(Vec<f64>, f64)> {
        match *self {
            OutputMap::Identity => Ok((z.to_vec(), 0.0)),
            OutputMap::Simplex => {
                let lse = log_one_plus_sum_exp(z);
                let out = z.iter().map(|v| (v - lse).exp()).collect();
                // Σ log gᵢ + log g_d, with log g_d = -lse.
                let log_det = z.iter().sum::<f64>() - (z.len() as f64 + 1.0) * lse;
                Ok((out, log_det))
            }
            OutputMap::PositiveAffine { a, b } => {
                if a == 0.0 {
                    return Err(Error::NonInvertibleOutputMap);
                }
                let la = a.abs().ln();
                let mut log_det = 0.0;
                let out = z
                    .iter()
                    .map(|v| {
                        let e = a * v + b;
                        log_det += la + e;
                        e.exp()
                    })
                    .collect();
                Ok((out, log_det))
            }
        }
    }

    /// Reverse pass: writes `∂/∂z` of `ȳᵀg(z) + l̄·log_det(z)` into `zbar` and
    /// accumulates parameter partials into `pbar` (length [`Self::param_count`]).
    pub(crate) fn pullback(
        &self,
        z: &[f64],
        ybar: &[f64],
        lbar: f64,
        zbar: &mut [f64],
        pbar: &mut [f64],
    ) -> Result<()> {
        match *self {
            OutputMap::Identity => zbar.copy_from_slice(ybar),
            OutputMap::Simplex => {
                let lse = log_one_plus_sum_exp(z);
                let k = z.len() as f64;
                let g: Vec<f64> = z.iter().map(|v| (v - lse).exp()).collect();
                let yg: f64 = ybar.iter().zip(&g).map(|(y, gi)| y * gi).sum();
                for ((zb, gi), y) in zbar.iter_mut().zip(&g).zip(ybar) {
                    *zb = gi * (y - yg) + lbar * (1.0 - (k + 1.0) * gi);
                }
            }
            OutputMap::PositiveAffine { a, b } => {
                if a == 0.0 {
                    return Err(Error::NonInvertibleOutputMap);
                }
                for ((zb, v), y) in zbar.iter_mut().zip(z).zip(ybar) {
                    let out = (a * v + b).exp();
                    *zb = y * a * out + lbar * a;
                    pbar[0] += y * v * out + lbar * (1.0 / a + v);
                    pbar[1] += y * out + lbar;
                }
            }
        }
        Ok(())
    }

    pub(crate) fn push_flat(&self, out: &mut Vec<f64>) {
        if let OutputMap::PositiveAffine { a, b } = *self {
            out.push(a);
            out.push(b);
        }
    }

    pub(crate) fn read_flat(&mut self, src: &[f64]) -> usize {
        if let OutputMap::PositiveAffine { a, b } = self {
            *a = src[0];
            *b = src[1];
            2
        } else {
            0
        }
    }
}

/// `(g(z), log|det J_g(z)|)`.
pub fn output_map_apply(map: &OutputMap, z: &[f64]) -> Result<(Vec<f64>, f64)> {
    map.apply(z)
}
