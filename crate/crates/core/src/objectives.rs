//! Monte Carlo estimators for the augmented Lagrangian
//! `L(φ; λ, c) = -H(p_φ) + λᵀR(φ) + (c/2)‖R(φ)‖²` and its stochastic gradient.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::constraints::ConstraintSet;
use crate::error::{check_dim, Error, Result};
use crate::flow::{std_normal_log_pdf, FlowStack, ParamGradient};
use crate::vecops::{dot, norm_sq};

/// `n` base draws pushed through a flow, with their log-densities and
/// constraint values.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub base_points: Vec<Vec<f64>>,
    pub transformed: Vec<Vec<f64>>,
    pub log_densities: Vec<f64>,
    /// `n` rows of `T(f_φ(z⁽ⁱ⁾))`.
    pub constraint_values: Vec<Vec<f64>>,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.base_points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base_points.is_empty()
    }

    /// Evaluates the flow and constraints at fixed base points.
    pub fn from_base_points(
        stack: &FlowStack,
        constraints: &ConstraintSet,
        base_points: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let n = base_points.len();
        let mut transformed = Vec::with_capacity(n);
        let mut log_densities = Vec::with_capacity(n);
        let mut constraint_values = Vec::with_capacity(n);
        for z in &base_points {
            let (y, log_det) = stack.forward(z)?;
            log_densities.push(std_normal_log_pdf(z) - log_det);
            constraint_values.push(constraints.evaluate(&y)?);
            transformed.push(y);
        }
        Ok(Self {
            base_points,
            transformed,
            log_densities,
            constraint_values,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagrangianState {
    pub lambda: Vec<f64>,
    pub c: f64,
}

impl LagrangianState {
    pub fn new(lambda: Vec<f64>, c: f64) -> Result<Self> {
        if !(c > 0.0) || !c.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "penalty c must be positive, got {c}"
            )));
        }
        Ok(Self { lambda, c })
    }
}

pub fn draw_base_points<R: Rng + ?Sized>(dim: usize, n: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(rng)).collect())
        .collect()
}

/// Fresh batch of `n ≥ 2` i.i.d. draws from the flow.
pub fn draw_batch<R: Rng + ?Sized>(
    stack: &FlowStack,
    constraints: &ConstraintSet,
    n: usize,
    rng: &mut R,
) -> Result<SampleBatch> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "batch size must be >= 2, got {n}"
        )));
    }
    let base = draw_base_points(stack.dim, n, rng);
    SampleBatch::from_base_points(stack, constraints, base)
}

/// `Ĥ = -(1/n) Σ log p_φ(z_φ⁽ⁱ⁾)`.
pub fn entropy_estimate(batch: &SampleBatch) -> f64 {
    -batch.log_densities.iter().sum::<f64>() / batch.len() as f64
}

/// Columnwise mean of the constraint values.
pub fn moment_residual(batch: &SampleBatch) -> Vec<f64> {
    column_mean(&batch.constraint_values)
}

fn column_mean(rows: &[Vec<f64>]) -> Vec<f64> {
    let m = rows.first().map_or(0, Vec::len);
    let mut out = vec![0.0; m];
    for r in rows {
        for (o, v) in out.iter_mut().zip(r) {
            *o += v;
        }
    }
    let n = rows.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    out
}

/// `-H + λᵀR + (c/2)‖R‖²`.
pub fn aug_lagrangian_value(entropy: f64, residual: &[f64], state: &LagrangianState) -> f64 {
    debug_assert_eq!(residual.len(), state.lambda.len());
    -entropy + dot(&state.lambda, residual) + 0.5 * state.c * norm_sq(residual)
}

/// Split-batch stochastic gradient of the augmented Lagrangian.
///
/// The penalty term pairs `∇T` averaged over the first half of the batch with
/// `T` averaged over the second half, so the product of the two independent
/// estimates is unbiased for `∇(½‖R‖²)`.
pub fn aug_lagrangian_grad(
    stack: &FlowStack,
    constraints: &ConstraintSet,
    state: &LagrangianState,
    batch: &SampleBatch,
) -> Result<ParamGradient> {
    split_batch_gradient(stack, constraints, state, batch, true)
}

/// As [`aug_lagrangian_grad`]; with `include_entropy = false` the entropy
/// term is dropped and only the moment terms remain.
pub fn split_batch_gradient(
    stack: &FlowStack,
    constraints: &ConstraintSet,
    state: &LagrangianState,
    batch: &SampleBatch,
    include_entropy: bool,
) -> Result<ParamGradient> {
    let n = batch.len();
    if n < 2 || !n.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "gradient batch size must be even and >= 2, got {n}"
        )));
    }
    let m = constraints.m();
    check_dim(m, state.lambda.len())?;
    let half = n / 2;
    let nf = n as f64;
    let second_mean = column_mean(&batch.constraint_values[half..]);

    let base_weights: Vec<f64> = state.lambda.iter().map(|l| l / nf).collect();
    let first_weights: Vec<f64> = base_weights
        .iter()
        .zip(&second_mean)
        .map(|(w, r)| w + state.c * (2.0 / nf) * r)
        .collect();
    let lbar = if include_entropy { -1.0 / nf } else { 0.0 };

    let mut grad = ParamGradient::zeros_like(stack);
    let mut ybar = vec![0.0; constraints.dim()];
    for (i, z) in batch.base_points.iter().enumerate() {
        let trace = stack.trace(z)?;
        let weights = if i < half {
            &first_weights
        } else {
            &base_weights
        };
        ybar.iter_mut().for_each(|v| *v = 0.0);
        constraints.vjp(&trace.output, weights, &mut ybar)?;
        stack.pullback_into(&trace, &ybar, lbar, &mut grad)?;
    }
    Ok(grad)
}

/// Frozen-batch objective whose exact gradient is [`split_batch_gradient`]:
/// `-Ĥ + λᵀR̂ + c·R̂₁ᵀR̂₂`, with `R̂₁`, `R̂₂` the half-batch residuals and `R̂₂`
/// held fixed at `frozen_second_half`.
pub fn split_batch_surrogate(
    batch: &SampleBatch,
    state: &LagrangianState,
    frozen_second_half: &[f64],
    include_entropy: bool,
) -> f64 {
    let half = batch.len() / 2;
    let first = column_mean(&batch.constraint_values[..half]);
    let h = if include_entropy {
        entropy_estimate(batch)
    } else {
        0.0
    };
    -h + dot(&state.lambda, &moment_residual(batch)) + state.c * dot(&first, frozen_second_half)
}
