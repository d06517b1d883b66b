//! Multiplier update and randomized penalty escalation.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{check_dim, Error, Result};
use crate::objectives::LagrangianState;
use crate::vecops::{mean, variance};

/// `λ ← λ + c·R̂`.
pub fn lambda_update(state: &mut LagrangianState, residual: &[f64]) -> Result<()> {
    check_dim(state.lambda.len(), residual.len())?;
    for (l, r) in state.lambda.iter_mut().zip(residual) {
        *l += state.c * r;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchTest {
    pub t: f64,
    pub df: f64,
    /// Upper-tail p-value for `H₁: E[new] > E[old]`.
    pub p_value: f64,
}

/// One-sided Welch two-sample t-test of `E[x] > E[y]`.
///
/// With both sample variances zero the statistic is undefined; equal means
/// then give `p = 0.5`, otherwise `p` is 0 or 1 by the sign of the gap.
pub fn welch_upper(x: &[f64], y: &[f64]) -> Result<WelchTest> {
    if x.len() < 2 || y.len() < 2 {
        return Err(Error::InvalidArgument(
            "t-test needs at least two values per sample".into(),
        ));
    }
    let (nx, ny) = (x.len() as f64, y.len() as f64);
    let (mx, my) = (mean(x), mean(y));
    let a = variance(x) / nx;
    let b = variance(y) / ny;
    let se2 = a + b;
    if se2 == 0.0 {
        let p_value = match mx.partial_cmp(&my) {
            Some(std::cmp::Ordering::Greater) => 0.0,
            Some(std::cmp::Ordering::Less) => 1.0,
            _ => 0.5,
        };
        let t = if p_value == 0.5 {
            0.0
        } else {
            (mx - my).signum() * f64::INFINITY
        };
        return Ok(WelchTest {
            t,
            df: nx + ny - 2.0,
            p_value,
        });
    }
    let t = (mx - my) / se2.sqrt();
    let df = se2 * se2 / (a * a / (nx - 1.0) + b * b / (ny - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df)
        .map_err(|e| Error::InvalidArgument(format!("t distribution: {e}")))?;
    Ok(WelchTest {
        t,
        df,
        p_value: dist.sf(t),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyDecision {
    pub test: WelchTest,
    pub escalated: bool,
}

/// Tests `E‖R(φ_{k+1})‖ > γ·E‖R(φ_k)‖` and multiplies `c` by `β` with
/// probability `1 - p`.
pub fn c_update<R: Rng + ?Sized>(
    state: &mut LagrangianState,
    residuals_new: &[f64],
    residuals_old: &[f64],
    beta: f64,
    gamma: f64,
    rng: &mut R,
) -> Result<PenaltyDecision> {
    let scaled: Vec<f64> = residuals_old.iter().map(|r| gamma * r).collect();
    let test = welch_upper(residuals_new, &scaled)?;
    let u: f64 = rng.random();
    let escalated = u < 1.0 - test.p_value;
    if escalated {
        state.c *= beta;
    }
    Ok(PenaltyDecision { test, escalated })
}
