//! The two-level training loop: inner stochastic descent on the augmented
//! Lagrangian for fixed `(λ, c)`, outer multiplier updates and randomized
//! penalty escalation.

mod optimizer;
mod penalty;

pub use optimizer::{Optimizer, OptimizerState};
pub use penalty::{c_update, lambda_update, welch_upper, PenaltyDecision, WelchTest};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constraints::ConstraintSet;
use crate::error::{check_dim, Error, Result};
use crate::flow::{FlowStack, ParamGradient};
use crate::objectives::{
    aug_lagrangian_value, draw_batch, entropy_estimate, moment_residual, split_batch_gradient,
    LagrangianState,
};
use crate::vecops::norm_sq;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub k_max: usize,
    pub i_max: usize,
    pub n: usize,
    pub n_tilde: usize,
    pub beta: f64,
    pub gamma: f64,
    pub c0: f64,
    /// Initial multipliers; empty means all zero.
    pub lambda0: Vec<f64>,
    pub optimizer: Optimizer,
    pub entropy_enabled: bool,
    pub seed: u64,
    /// Number of batches whose residual norms feed the penalty t-test.
    pub residual_batches: usize,
    pub residual_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k_max: 10,
            i_max: 3000,
            n: 300,
            n_tilde: 1000,
            beta: 4.0,
            gamma: 0.25,
            c0: 1.0,
            lambda0: Vec::new(),
            optimizer: Optimizer::default(),
            entropy_enabled: true,
            seed: 0,
            residual_batches: 20,
            residual_batch_size: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(msg.to_string()));
        if !(self.beta > 1.0) {
            return bad("beta must exceed 1");
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if !(self.c0 > 0.0) || !self.c0.is_finite() {
            return bad("c0 must be positive");
        }
        if self.k_max == 0 {
            return bad("k_max must be >= 1");
        }
        if self.n < 2 || !self.n.is_multiple_of(2) {
            return bad("n must be even and >= 2");
        }
        if self.n_tilde < 1 {
            return bad("n_tilde must be >= 1");
        }
        if self.residual_batches < 2 || self.residual_batch_size < 1 {
            return bad("the penalty test needs >= 2 residual batches of size >= 1");
        }
        if self.lambda0.iter().any(|l| !l.is_finite()) {
            return bad("lambda0 must be finite");
        }
        Ok(())
    }
}

/// One inner iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub outer: usize,
    pub inner: usize,
    pub entropy: f64,
    pub residual_norm: f64,
    pub loss: f64,
    pub c: f64,
    pub lambda: Vec<f64>,
}

/// End of one outer iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterRecord {
    pub outer: usize,
    /// Entropy and residual on the fresh `ñ` batch used for the multiplier update.
    pub entropy: f64,
    pub residual: Vec<f64>,
    pub residual_norm: f64,
    /// Multipliers and penalty after both updates.
    pub lambda: Vec<f64>,
    pub c: f64,
    pub t_statistic: f64,
    pub p_value: f64,
    pub escalated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub trace: Vec<TraceRow>,
    pub outer: Vec<OuterRecord>,
    pub final_stack: FlowStack,
    pub final_state: LagrangianState,
    /// Set when training stopped early.
    pub aborted: Option<String>,
}

impl TrainReport {
    /// CSV with one row per inner iteration.
    pub fn trace_csv(&self) -> String {
        let m = self.final_state.lambda.len();
        let mut s = String::from("outer,inner,entropy,residual_norm,loss,c");
        for j in 1..=m {
            s.push_str(&format!(",lambda_{j}"));
        }
        s.push('\n');
        for r in &self.trace {
            s.push_str(&format!(
                "{},{},{},{},{},{}",
                r.outer, r.inner, r.entropy, r.residual_norm, r.loss, r.c
            ));
            for l in &r.lambda {
                s.push_str(&format!(",{l}"));
            }
            s.push('\n');
        }
        s
    }

    pub fn to_text(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }
}

/// Everything the loop mutates.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub stack: FlowStack,
    pub lagrangian: LagrangianState,
    pub optimizer: OptimizerState,
    pub outer_iter: usize,
    pub inner_iter: usize,
    /// Residual-norm samples recorded at the end of each outer iteration,
    /// starting with the initial flow.
    pub residual_history: Vec<Vec<f64>>,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(
        config: &TrainConfig,
        stack: FlowStack,
        constraints: &ConstraintSet,
    ) -> Result<Self> {
        config.validate()?;
        check_dim(constraints.dim(), stack.dim)?;
        if !constraints.accepts(&stack.output) {
            return Err(Error::InvalidArgument(format!(
                "output map {:?} does not match constraint domain {:?}",
                stack.output,
                constraints.domain()
            )));
        }
        let lambda = if config.lambda0.is_empty() {
            vec![0.0; constraints.m()]
        } else {
            check_dim(constraints.m(), config.lambda0.len())?;
            config.lambda0.clone()
        };
        let optimizer = OptimizerState::new(config.optimizer, stack.param_count());
        Ok(Self {
            stack,
            lagrangian: LagrangianState::new(lambda, config.c0)?,
            optimizer,
            outer_iter: 0,
            inner_iter: 0,
            residual_history: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        })
    }

    pub fn sgd_step(&mut self, gradient: &ParamGradient) -> Result<()> {
        let mut params = self.stack.params_flat();
        self.optimizer.step(&mut params, &gradient.flatten())?;
        self.stack.set_params_flat(&params)
    }

    /// `‖R̂‖` over independent batches, for the penalty test.
    fn residual_norms(
        &mut self,
        config: &TrainConfig,
        constraints: &ConstraintSet,
    ) -> Result<Vec<f64>> {
        (0..config.residual_batches)
            .map(|_| {
                let b = draw_batch(
                    &self.stack,
                    constraints,
                    config.residual_batch_size.max(2),
                    &mut self.rng,
                )?;
                Ok(norm_sq(&moment_residual(&b)).sqrt())
            })
            .collect()
    }
}

fn non_finite(outer: usize, inner: usize, what: &str) -> Error {
    Error::NonFinite {
        outer,
        inner,
        what: what.to_string(),
    }
}

fn at(outer: usize, inner: usize) -> impl FnOnce(Error) -> Error {
    move |e| match e {
        e @ Error::NonFinite { .. } => e,
        e => Error::Aborted {
            outer,
            inner,
            source: Box::new(e),
        },
    }
}

fn inner_iteration(
    state: &mut TrainState,
    config: &TrainConfig,
    constraints: &ConstraintSet,
    k: usize,
    i: usize,
) -> Result<TraceRow> {
    let batch = draw_batch(&state.stack, constraints, config.n, &mut state.rng)?;
    let entropy = entropy_estimate(&batch);
    let residual = moment_residual(&batch);
    let h_term = if config.entropy_enabled { entropy } else { 0.0 };
    let loss = aug_lagrangian_value(h_term, &residual, &state.lagrangian);
    if !loss.is_finite() || !entropy.is_finite() {
        return Err(non_finite(k, i, "loss"));
    }
    let grad = split_batch_gradient(
        &state.stack,
        constraints,
        &state.lagrangian,
        &batch,
        config.entropy_enabled,
    )?;
    if !grad.is_finite() {
        return Err(non_finite(k, i, "gradient"));
    }
    let row = TraceRow {
        outer: k,
        inner: i,
        entropy,
        residual_norm: norm_sq(&residual).sqrt(),
        loss,
        c: state.lagrangian.c,
        lambda: state.lagrangian.lambda.clone(),
    };
    state.sgd_step(&grad)?;
    if state.stack.params_flat().iter().any(|v| !v.is_finite()) {
        return Err(non_finite(k, i, "parameters"));
    }
    Ok(row)
}

fn outer_update(
    state: &mut TrainState,
    config: &TrainConfig,
    constraints: &ConstraintSet,
    k: usize,
) -> Result<OuterRecord> {
    let batch = draw_batch(
        &state.stack,
        constraints,
        config.n_tilde.max(2),
        &mut state.rng,
    )?;
    let residual = moment_residual(&batch);
    let entropy = entropy_estimate(&batch);
    if residual.iter().any(|r| !r.is_finite()) {
        return Err(non_finite(k, config.i_max, "multiplier residual"));
    }
    lambda_update(&mut state.lagrangian, &residual)?;

    let new = state.residual_norms(config, constraints)?;
    let old = state
        .residual_history
        .last()
        .expect("initial residuals recorded")
        .clone();
    let decision = c_update(
        &mut state.lagrangian,
        &new,
        &old,
        config.beta,
        config.gamma,
        &mut state.rng,
    )?;
    state.residual_history.push(new);
    Ok(OuterRecord {
        outer: k,
        entropy,
        residual_norm: norm_sq(&residual).sqrt(),
        residual,
        lambda: state.lagrangian.lambda.clone(),
        c: state.lagrangian.c,
        t_statistic: decision.test.t,
        p_value: decision.test.p_value,
        escalated: decision.escalated,
    })
}

/// Runs training and always returns the report gathered so far, together
/// with the error that stopped it early, if any.
pub fn train_partial(
    config: &TrainConfig,
    stack0: FlowStack,
    constraints: &ConstraintSet,
) -> Result<(TrainReport, Option<Error>)> {
    let mut state = TrainState::new(config, stack0, constraints)?;
    let mut trace = Vec::with_capacity(config.k_max * config.i_max);
    let mut outer = Vec::with_capacity(config.k_max);

    let run = |state: &mut TrainState,
               trace: &mut Vec<TraceRow>,
               outer: &mut Vec<OuterRecord>|
     -> Result<()> {
        let initial = state
            .residual_norms(config, constraints)
            .map_err(at(0, 0))?;
        state.residual_history.push(initial);
        for k in 0..config.k_max {
            state.outer_iter = k;
            for i in 0..config.i_max {
                state.inner_iter = i;
                let row = inner_iteration(state, config, constraints, k, i).map_err(at(k, i))?;
                trace.push(row);
            }
            let rec = outer_update(state, config, constraints, k).map_err(at(k, config.i_max))?;
            outer.push(rec);
        }
        Ok(())
    };
    let err = run(&mut state, &mut trace, &mut outer).err();
    let report = TrainReport {
        config: config.clone(),
        trace,
        outer,
        final_stack: state.stack,
        final_state: state.lagrangian,
        aborted: err.as_ref().map(|e| e.to_string()),
    };
    Ok((report, err))
}

pub fn train(
    config: &TrainConfig,
    stack0: FlowStack,
    constraints: &ConstraintSet,
) -> Result<TrainReport> {
    match train_partial(config, stack0, constraints)? {
        (report, None) => Ok(report),
        (_, Some(e)) => Err(e),
    }
}
