//! The Dirichlet distribution as a density on `S = {s ∈ R^{d-1}: s > 0, Σs < 1}`.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::special::{digamma, ln_gamma};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirichletParams {
    pub alpha: Vec<f64>,
}

impl DirichletParams {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.len() < 2 {
            return Err(Error::InvalidArgument("dirichlet needs d >= 2".into()));
        }
        if let Some(a) = alpha.iter().find(|a| !(**a > 0.0) || !a.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "dirichlet concentration must be positive, got {a}"
            )));
        }
        Ok(Self { alpha })
    }

    pub fn d(&self) -> usize {
        self.alpha.len()
    }

    pub fn alpha0(&self) -> f64 {
        self.alpha.iter().sum()
    }

    /// `log B(α) = Σ ln Γ(αₖ) - ln Γ(α₀)`.
    pub fn log_beta(&self) -> f64 {
        self.alpha.iter().map(|a| ln_gamma(*a)).sum::<f64>() - ln_gamma(self.alpha0())
    }

    /// Mean of the first `d - 1` coordinates.
    pub fn mean(&self) -> Vec<f64> {
        let a0 = self.alpha0();
        self.alpha[..self.d() - 1].iter().map(|a| a / a0).collect()
    }

    pub fn log_pdf(&self, s: &[f64]) -> Result<f64> {
        let last = interior_last(s, self.d())?;
        let body: f64 = s
            .iter()
            .chain(std::iter::once(&last))
            .zip(&self.alpha)
            .map(|(x, a)| (a - 1.0) * x.ln())
            .sum();
        Ok(body - self.log_beta())
    }

    /// Differential entropy on `S`:
    /// `log B(α) + (α₀ - d)ψ(α₀) - Σ(αₖ - 1)ψ(αₖ)`.
    pub fn entropy(&self) -> f64 {
        let a0 = self.alpha0();
        let d = self.d() as f64;
        let mut h = self.log_beta() + (a0 - d) * digamma(a0).expect("alpha0 > 0");
        for a in &self.alpha {
            h -= (a - 1.0) * digamma(*a).expect("alpha > 0");
        }
        h
    }

    /// One draw in `S` via normalized Gamma variates.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let d = self.d();
        loop {
            let g: Vec<f64> = self
                .alpha
                .iter()
                .map(|a| Gamma::new(*a, 1.0).expect("positive shape").sample(rng))
                .collect();
            let total: f64 = g.iter().sum();
            let s: Vec<f64> = g[..d - 1].iter().map(|x| x / total).collect();
            // Underflow for tiny shapes can land on the boundary; redraw.
            if g.iter().all(|x| *x > 0.0) && s.iter().sum::<f64>() < 1.0 {
                return s;
            }
        }
    }

    /// `KL(self ‖ other)`.
    pub fn kl(&self, other: &DirichletParams) -> Result<f64> {
        if self.d() != other.d() {
            return Err(Error::DimensionMismatch {
                expected: self.d(),
                got: other.d(),
            });
        }
        let psi0 = digamma(self.alpha0())?;
        let mut kl = other.log_beta() - self.log_beta();
        for (ap, aq) in self.alpha.iter().zip(&other.alpha) {
            kl += (ap - aq) * (digamma(*ap)? - psi0);
        }
        Ok(kl)
    }

    /// Method-of-moments fit to points in `S`, using the per-coordinate means
    /// and the average variance-implied concentration.
    pub fn fit_moments(points: &[Vec<f64>]) -> Result<Self> {
        let n = points.len();
        if n < 2 {
            return Err(Error::InvalidArgument("need at least two points".into()));
        }
        let k = points[0].len();
        let full: Vec<Vec<f64>> = points
            .iter()
            .map(|p| {
                let mut v = p.clone();
                v.push(1.0 - p.iter().sum::<f64>());
                v
            })
            .collect();
        let d = k + 1;
        let mut mean = vec![0.0; d];
        for p in &full {
            for (m, x) in mean.iter_mut().zip(p) {
                *m += x / n as f64;
            }
        }
        let mut conc = 0.0;
        for j in 0..d {
            let var = full.iter().map(|p| (p[j] - mean[j]).powi(2)).sum::<f64>() / (n as f64 - 1.0);
            conc += mean[j] * (1.0 - mean[j]) / var - 1.0;
        }
        conc /= d as f64;
        DirichletParams::new(mean.iter().map(|m| m * conc).collect())
    }
}

/// Checks `s` is strictly inside `S` and returns `1 - Σs`.
fn interior_last(s: &[f64], d: usize) -> Result<f64> {
    if s.len() + 1 != d {
        return Err(Error::DimensionMismatch {
            expected: d - 1,
            got: s.len(),
        });
    }
    let last = 1.0 - s.iter().sum::<f64>();
    if s.iter().any(|x| !(*x > 0.0)) || !(last > 0.0) {
        return Err(Error::OutsideDomain(format!(
            "{s:?} is not interior to the simplex"
        )));
    }
    Ok(last)
}

/// `κₖ = ψ(αₖ) - ψ(α₀)`.
pub fn kappa_from_alpha(alpha: &[f64]) -> Result<Vec<f64>> {
    let params = DirichletParams::new(alpha.to_vec())?;
    let psi0 = digamma(params.alpha0())?;
    alpha.iter().map(|a| Ok(digamma(*a)? - psi0)).collect()
}

pub fn dirichlet_log_pdf(params: &DirichletParams, s: &[f64]) -> Result<f64> {
    params.log_pdf(s)
}

pub fn dirichlet_entropy(params: &DirichletParams) -> f64 {
    params.entropy()
}

pub fn dirichlet_sample<R: Rng + ?Sized>(params: &DirichletParams, rng: &mut R) -> Vec<f64> {
    params.sample(rng)
}

pub fn dirichlet_kl(p: &DirichletParams, q: &DirichletParams) -> Result<f64> {
    p.kl(q)
}
