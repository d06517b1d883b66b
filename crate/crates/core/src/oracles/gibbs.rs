//! Maximum entropy risk-neutral density with a piecewise-linear log density,
//!
//! ```text
//! p(s) ∝ exp{η₀ s + Σᵢ ηᵢ (s - Kᵢ)₊} 𝟙(s ≥ 0),
//! ```
//!
//! fitted to call prices by Newton's method on the convex dual
//! `log Z(η) - ηᵀt`. Every moment is a sum of closed-form integrals over the
//! inter-strike segments, on each of which the density is a single exponential.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::constraints::OptionChain;
use crate::error::{Error, Result};

const MAX_NEWTON_ITERS: usize = 200;
const FIT_TOLERANCE: f64 = 1e-10;

/// One segment `[lo, hi)` of the support with log-density `value_lo + slope·(s - lo)`.
#[derive(Debug, Clone, Copy)]
struct Piece {
    lo: f64,
    hi: f64,
    value_lo: f64,
    slope: f64,
}

impl Piece {
    fn value_at(&self, s: f64) -> f64 {
        self.value_lo + self.slope * (s - self.lo)
    }

    /// Restriction to `[max(lo, from), hi)`.
    fn from(&self, from: f64) -> Option<Piece> {
        if from >= self.hi {
            return None;
        }
        let lo = self.lo.max(from);
        Some(Piece {
            lo,
            hi: self.hi,
            value_lo: self.value_at(lo),
            slope: self.slope,
        })
    }

    /// Restriction to `[lo, min(hi, to))`.
    fn until(&self, to: f64) -> Option<Piece> {
        if to <= self.lo {
            return None;
        }
        Some(Piece {
            hi: self.hi.min(to),
            ..*self
        })
    }

    /// `∫ s^p e^{v(s) - shift} ds` over the piece, for `p = 0, 1, 2`.
    ///
    /// The integral is anchored at the endpoint where the integrand is
    /// largest, so only decaying exponentials are ever evaluated.
    fn moments(&self, shift: f64) -> [f64; 3] {
        let len = self.hi - self.lo;
        if len <= 0.0 {
            return [0.0; 3];
        }
        let (anchor, value, sign) = if self.slope <= 0.0 || !len.is_finite() {
            (self.lo, self.value_lo, 1.0)
        } else {
            (self.hi, self.value_at(self.hi), -1.0)
        };
        let k = decaying_moments(self.slope.abs(), len);
        let c = (value - shift).exp();
        [
            c * k[0],
            c * (anchor * k[0] + sign * k[1]),
            c * (anchor * anchor * k[0] + 2.0 * anchor * sign * k[1] + k[2]),
        ]
    }
}

/// `K_p = ∫₀ᴸ x^p e^{-r x} dx` for `p = 0, 1, 2`, `r ≥ 0`.
fn decaying_moments(r: f64, len: f64) -> [f64; 3] {
    if !len.is_finite() {
        return [1.0 / r, 1.0 / (r * r), 2.0 / (r * r * r)];
    }
    let x = r * len;
    if x < 1.0 {
        // K_p = L^{p+1} Σ_k (-x)^k / (k! (p + k + 1))
        let mut out = [0.0; 3];
        for (p, o) in out.iter_mut().enumerate() {
            let mut term = 1.0;
            let mut sum = 0.0;
            for k in 0..40 {
                sum += term / (p + k + 1) as f64;
                term *= -x / (k + 1) as f64;
                if term.abs() < 1e-18 {
                    break;
                }
            }
            *o = len.powi(p as i32 + 1) * sum;
        }
        return out;
    }
    let e = (-x).exp();
    let k0 = -(-x).exp_m1() / r;
    let k1 = (k0 - len * e) / r;
    let k2 = (2.0 * k1 - len * len * e) / r;
    [k0, k1, k2]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GibbsOptionModel {
    /// `[η₀, η₁, …, η_m]`.
    pub eta: Vec<f64>,
    pub strikes: Vec<f64>,
    pub discount: f64,
    pub log_z: f64,
}

fn pieces_for(eta: &[f64], strikes: &[f64]) -> Vec<Piece> {
    let mut bounds = Vec::with_capacity(strikes.len() + 2);
    bounds.push(0.0);
    bounds.extend_from_slice(strikes);
    bounds.push(f64::INFINITY);
    let mut slope = eta[0];
    let mut value = 0.0;
    let mut pieces = Vec::with_capacity(strikes.len() + 1);
    for j in 0..=strikes.len() {
        if j > 0 {
            slope += eta[j];
        }
        pieces.push(Piece {
            lo: bounds[j],
            hi: bounds[j + 1],
            value_lo: value,
            slope,
        });
        if j < strikes.len() {
            value += slope * (bounds[j + 1] - bounds[j]);
        }
    }
    pieces
}

/// Largest unnormalized log-density; attained at `0` or at a strike since
/// the tail slope is negative.
fn max_log_value(pieces: &[Piece]) -> f64 {
    pieces
        .iter()
        .map(|p| p.value_lo)
        .fold(f64::NEG_INFINITY, f64::max)
}

fn log_normalizer(pieces: &[Piece]) -> Option<f64> {
    let last = pieces.last()?;
    if !(last.slope < 0.0) {
        return None;
    }
    let shift = max_log_value(pieces);
    let z: f64 = pieces.iter().map(|p| p.moments(shift)[0]).sum();
    let log_z = shift + z.ln();
    log_z.is_finite().then_some(log_z)
}

impl GibbsOptionModel {
    /// Builds the model for given natural parameters; fails when the density
    /// is not integrable (tail slope `η₀ + Σηᵢ ≥ 0`).
    pub fn from_eta(eta: Vec<f64>, strikes: Vec<f64>, discount: f64) -> Result<Self> {
        if eta.len() != strikes.len() + 1 {
            return Err(Error::DimensionMismatch {
                expected: strikes.len() + 1,
                got: eta.len(),
            });
        }
        if strikes.windows(2).any(|w| !(w[0] < w[1])) || strikes.iter().any(|k| !(*k > 0.0)) {
            return Err(Error::InvalidArgument(
                "strikes must be positive and strictly increasing".into(),
            ));
        }
        let log_z = log_normalizer(&pieces_for(&eta, &strikes)).ok_or_else(|| {
            Error::InvalidArgument(format!("gibbs density with eta {eta:?} is not integrable"))
        })?;
        Ok(Self {
            eta,
            strikes,
            discount,
            log_z,
        })
    }

    fn pieces(&self) -> Vec<Piece> {
        pieces_for(&self.eta, &self.strikes)
    }

    pub fn pdf(&self, s: f64) -> f64 {
        if s < 0.0 {
            return 0.0;
        }
        let pieces = self.pieces();
        let piece = pieces
            .iter()
            .find(|p| s < p.hi)
            .unwrap_or_else(|| pieces.last().expect("at least one piece"));
        (piece.value_at(s) - self.log_z).exp()
    }

    pub fn cdf(&self, s: f64) -> f64 {
        if s <= 0.0 {
            return 0.0;
        }
        self.pieces()
            .iter()
            .filter_map(|p| p.until(s))
            .map(|p| p.moments(self.log_z)[0])
            .sum::<f64>()
            .min(1.0)
    }

    /// `E[S^p 𝟙(S > k)]` for `p = 0, 1, 2`.
    pub fn tail_moments(&self, k: f64) -> [f64; 3] {
        let mut out = [0.0; 3];
        for p in self.pieces().iter().filter_map(|p| p.from(k.max(0.0))) {
            let m = p.moments(self.log_z);
            for i in 0..3 {
                out[i] += m[i];
            }
        }
        out
    }

    pub fn mean(&self) -> f64 {
        self.tail_moments(0.0)[1]
    }

    /// Discounted call price `D·E[(S - K)₊]`.
    pub fn price(&self, strike: f64) -> f64 {
        if strike <= 0.0 {
            return self.discount * (self.mean() - strike);
        }
        let [m0, m1, _] = self.tail_moments(strike);
        self.discount * (m1 - strike * m0)
    }

    /// Differential entropy `-E[log p(S)]`.
    pub fn entropy(&self) -> f64 {
        // log p = value_lo + slope (s - lo) - log Z, linear on each piece.
        self.pieces()
            .iter()
            .map(|p| {
                let [m0, m1, _] = p.moments(self.log_z);
                -((p.value_lo - p.slope * p.lo - self.log_z) * m0 + p.slope * m1)
            })
            .sum()
    }

    /// Inverse-CDF draw.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        self.quantile(u)
    }

    pub fn quantile(&self, u: f64) -> f64 {
        let pieces = self.pieces();
        let mut remaining = u;
        for (j, p) in pieces.iter().enumerate() {
            let mass = p.moments(self.log_z)[0];
            if remaining < mass || j + 1 == pieces.len() {
                let b = p.slope;
                if !p.hi.is_finite() || b <= 0.0 {
                    // solve ∫_lo^s e^{v - log Z} = remaining from the left end
                    let dens_lo = (p.value_lo - self.log_z).exp();
                    let q = remaining / dens_lo;
                    if (b * q).abs() < 1e-12 {
                        return p.lo + q;
                    }
                    let arg = (b * q).max(-1.0 + f64::EPSILON);
                    return p.lo + arg.ln_1p() / b;
                }
                // increasing piece: solve from the right end
                let dens_hi = (p.value_at(p.hi) - self.log_z).exp();
                let r = ((mass - remaining) / dens_hi).max(0.0);
                let arg = (-b * r).max(-1.0 + f64::EPSILON);
                return (p.hi + arg.ln_1p() / b).max(p.lo);
            }
            remaining -= mass;
        }
        unreachable!("pieces cover the support")
    }

    pub fn to_text(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        Self::from_eta(m.eta, m.strikes, m.discount)
    }
}

/// Dual objective pieces in scaled units `x = s / scale`.
struct DualEval {
    value: f64,
    grad: DVector<f64>,
    hessian: DMatrix<f64>,
}

fn dual_eval(eta: &[f64], knots: &[f64], targets: &[f64]) -> Option<DualEval> {
    let pieces = pieces_for(eta, knots);
    let log_z = log_normalizer(&pieces)?;
    let m = knots.len();
    // tail[i] = [T0, T1, T2] over s > threshold_i, threshold_0 = 0
    let mut tail = vec![[0.0; 3]; m + 1];
    let mut acc = [0.0; 3];
    for j in (0..=m).rev() {
        let mom = pieces[j].moments(log_z);
        for i in 0..3 {
            acc[i] += mom[i];
        }
        tail[j] = acc;
    }
    let threshold = |i: usize| if i == 0 { 0.0 } else { knots[i - 1] };
    let mean: Vec<f64> = (0..=m)
        .map(|i| tail[i][1] - threshold(i) * tail[i][0])
        .collect();
    let mut hessian = DMatrix::zeros(m + 1, m + 1);
    for i in 0..=m {
        for j in 0..=i {
            let t = tail[i]; // threshold_i >= threshold_j
            let (ki, kj) = (threshold(i), threshold(j));
            let second = t[2] - (ki + kj) * t[1] + ki * kj * t[0];
            let cov = second - mean[i] * mean[j];
            hessian[(i, j)] = cov;
            hessian[(j, i)] = cov;
        }
    }
    let value = log_z - eta.iter().zip(targets).map(|(e, t)| e * t).sum::<f64>();
    let grad = DVector::from_iterator(m + 1, mean.iter().zip(targets).map(|(m, t)| m - t));
    value.is_finite().then_some(DualEval {
        value,
        grad,
        hessian,
    })
}

/// Fits the Gibbs density to `E[S] = S₀/D` and `E[(S - Kᵢ)₊] = cᵢ/D`.
pub fn gibbs_option_fit(chain: &OptionChain) -> Result<GibbsOptionModel> {
    chain.validate()?;
    let d = chain.discount;
    let scale = chain.spot / d;
    let knots: Vec<f64> = chain.strikes.iter().map(|k| k / scale).collect();
    let mut targets = vec![1.0];
    targets.extend(chain.prices.iter().map(|c| c / chain.spot));
    let m = knots.len();

    let mut eta = vec![0.0; m + 1];
    eta[0] = -1.0;
    let mut eval = dual_eval(&eta, &knots, &targets).expect("exponential start is integrable");
    let mut iterations = 0;
    loop {
        let mismatch = eval.grad.amax() * scale;
        if mismatch <= FIT_TOLERANCE {
            break;
        }
        if iterations == MAX_NEWTON_ITERS {
            return Err(Error::NoConvergence {
                iterations,
                mismatch,
            });
        }
        iterations += 1;
        let neg_grad = -&eval.grad;
        let step = match eval.hessian.clone().cholesky() {
            Some(ch) => ch.solve(&neg_grad),
            None => eval
                .hessian
                .clone()
                .lu()
                .solve(&neg_grad)
                .unwrap_or_else(|| neg_grad.clone()),
        };
        let slope = eval.grad.dot(&step);
        let grad_norm = eval.grad.norm();
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<f64> = eta
                .iter()
                .zip(step.iter())
                .map(|(e, s)| e + t * s)
                .collect();
            if let Some(next) = dual_eval(&trial, &knots, &targets) {
                let armijo = next.value <= eval.value + 1e-4 * t * slope;
                // Near the optimum the dual value is flat to rounding; accept
                // steps that still shrink the moment mismatch.
                if armijo || next.grad.norm() < grad_norm {
                    accepted = Some((trial, next));
                    break;
                }
            }
            t *= 0.5;
        }
        match accepted {
            Some((trial, next)) => {
                eta = trial;
                eval = next;
            }
            None => {
                return Err(Error::NoConvergence {
                    iterations,
                    mismatch,
                })
            }
        }
    }
    let eta: Vec<f64> = eta.iter().map(|e| e / scale).collect();
    GibbsOptionModel::from_eta(eta, chain.strikes.clone(), d)
}

pub fn gibbs_pdf(model: &GibbsOptionModel, s: f64) -> f64 {
    model.pdf(s)
}

pub fn gibbs_cdf(model: &GibbsOptionModel, s: f64) -> f64 {
    model.cdf(s)
}

pub fn gibbs_sample<R: Rng + ?Sized>(model: &GibbsOptionModel, rng: &mut R) -> f64 {
    model.sample(rng)
}

pub fn gibbs_price(model: &GibbsOptionModel, strike: f64) -> f64 {
    model.price(strike)
}
