//! Config-driven experiment runners: a Dirichlet problem with a known
//! maximum entropy solution and a risk-neutral density fitted to call prices.
//!
//! Each run writes `trace.csv`, `train_report.json`, `report.json`,
//! `density_grid.csv`, `qq.csv` and `samples.csv` into the output directory.

mod dirichlet;
mod options;

pub use dirichlet::{run_dirichlet, AblationSummary, DirichletResults};
pub use options::{run_options, synthetic_chain, OptionResults, PriceRow, SyntheticChain};

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constraints::ConstraintSet;
use crate::error::{Error, Result};
use crate::flow::{FlowStack, OutputMap};
use crate::objectives::{draw_batch, entropy_estimate, moment_residual, SampleBatch};
use crate::trainer::{train_partial, OuterRecord, TrainConfig, TrainReport};
use crate::vecops::{norm_sq, variance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    Dirichlet,
    Options,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirichletBlock {
    pub alpha: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptionsBlock {
    /// Training chain as CSV.
    pub chain: Option<PathBuf>,
    /// Held-out chain as CSV; its spot and discount must match the training chain.
    pub test_chain: Option<PathBuf>,
    pub synthetic: Option<SyntheticChain>,
    /// Monte Carlo draws used to price under the flow.
    #[serde(default = "default_pricing_draws")]
    pub pricing_draws: usize,
}

fn default_pricing_draws() -> usize {
    100_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_eval_size")]
    pub eval_sample_size: usize,
    #[serde(default = "default_permutations")]
    pub mmd_permutations: usize,
    #[serde(default = "default_mmd_size")]
    pub mmd_sample_size: usize,
    /// Also train with the entropy term removed.
    #[serde(default)]
    pub ablation: bool,
    #[serde(default = "default_layers")]
    pub flow_layers: usize,
    /// Standard deviation of the initial layer parameters.
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
    #[serde(default)]
    pub train: TrainConfig,
    pub dirichlet: Option<DirichletBlock>,
    pub options: Option<OptionsBlock>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_eval_size() -> usize {
    10_000
}
fn default_permutations() -> usize {
    1000
}
fn default_mmd_size() -> usize {
    300
}
fn default_layers() -> usize {
    10
}
fn default_init_scale() -> f64 {
    0.01
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Parses the file; relative chain paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::InvalidArgument(format!("cannot read config {}: {e}", path.display()))
        })?;
        let mut config = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let Some(opts) = config.options.as_mut() {
            for p in [&mut opts.chain, &mut opts.test_chain]
                .into_iter()
                .flatten()
            {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(config)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Checks the config for internal consistency and that referenced files exist.
pub fn validate_config(config: &ExperimentConfig) -> Result<()> {
    let bad = |msg: String| Err(Error::InvalidArgument(msg));
    config.train.validate()?;
    if config.eval_sample_size < 2 || config.mmd_sample_size < 2 {
        return bad("sample sizes must be >= 2".into());
    }
    if config.mmd_permutations < 100 {
        return bad("mmd_permutations must be >= 100".into());
    }
    if !(config.init_scale > 0.0) {
        return bad("init_scale must be positive".into());
    }
    match config.experiment {
        ExperimentKind::Dirichlet => {
            let Some(block) = &config.dirichlet else {
                return bad("dirichlet experiment needs a [dirichlet] block".into());
            };
            crate::oracles::DirichletParams::new(block.alpha.clone())?;
        }
        ExperimentKind::Options => {
            let Some(block) = &config.options else {
                return bad("options experiment needs an [options] block".into());
            };
            if block.pricing_draws < 2 {
                return bad("pricing_draws must be >= 2".into());
            }
            match (&block.chain, &block.synthetic) {
                (Some(_), Some(_)) => {
                    return bad("give either options.chain or options.synthetic, not both".into())
                }
                (None, None) => return bad("options need a chain file or a synthetic block".into()),
                (None, Some(s)) => s.validate()?,
                (Some(_), None) => {}
            }
            for p in [&block.chain, &block.test_chain].into_iter().flatten() {
                if !p.is_file() {
                    return bad(format!("chain file {} does not exist", p.display()));
                }
            }
        }
    }
    Ok(())
}

/// Summary of one training run evaluated on a large fresh sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub entropy: f64,
    pub entropy_se: f64,
    pub residual: Vec<f64>,
    pub residual_norm: f64,
}

impl FitSummary {
    fn from_batch(batch: &SampleBatch) -> Self {
        let residual = moment_residual(batch);
        let n = batch.len() as f64;
        Self {
            entropy: entropy_estimate(batch),
            entropy_se: (variance(&batch.log_densities) / n).sqrt(),
            residual_norm: norm_sq(&residual).sqrt(),
            residual,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ExperimentResults {
    Dirichlet(DirichletResults),
    Options(OptionResults),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seed: u64,
    pub fit: FitSummary,
    pub outer: Vec<OuterRecord>,
    pub final_lambda: Vec<f64>,
    pub final_c: f64,
    pub final_stack: FlowStack,
    pub results: ExperimentResults,
    /// Full training record; its inner trace goes to `trace.csv`.
    #[serde(skip)]
    pub train: Option<TrainReport>,
}

impl ExperimentReport {
    pub fn to_text(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Human-readable summary.
    pub fn summary(&self) -> String {
        let mut s = format!(
            "seed {}\nentropy {} (se {})\nresidual norm {}\nfinal c {}\n",
            self.seed, self.fit.entropy, self.fit.entropy_se, self.fit.residual_norm, self.final_c
        );
        match &self.results {
            ExperimentResults::Dirichlet(r) => {
                s.push_str(&format!(
                    "true entropy {}\nentropy gap {}\nmmd statistic {}\nmmd p-value {}\nkl proxy {}\n",
                    r.true_entropy, r.entropy_gap, r.mmd.statistic, r.mmd.p_value, r.kl_proxy
                ));
                if let Some(a) = &r.ablation {
                    s.push_str(&format!(
                        "ablation entropy {} (se {})\nablation residual norm {}\n",
                        a.fit.entropy, a.fit.entropy_se, a.fit.residual_norm
                    ));
                }
            }
            ExperimentResults::Options(r) => {
                s.push_str("strike,observed,gibbs,mefn,mefn_se,split\n");
                for row in &r.prices {
                    s.push_str(&format!(
                        "{},{},{},{},{},{}\n",
                        row.strike, row.observed, row.gibbs, row.mefn, row.mefn_se, row.split
                    ));
                }
                let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| x.to_string());
                s.push_str(&format!(
                    "gibbs rmse train {} test {}\nmefn rmse train {} test {}\nmefn mc se {}\nqq slope {}\n",
                    r.gibbs_rmse_train,
                    opt(r.gibbs_rmse_test),
                    r.mefn_rmse_train,
                    opt(r.mefn_rmse_test),
                    r.mefn_mc_se_train,
                    r.qq_slope
                ));
            }
        }
        s
    }
}

/// Independent random streams derived from one seed.
pub(crate) fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

pub(crate) const STREAM_INIT: u64 = 1;
pub(crate) const STREAM_EVAL: u64 = 2;
pub(crate) const STREAM_TEST: u64 = 3;

pub(crate) fn initial_stack(
    config: &ExperimentConfig,
    dim: usize,
    output: OutputMap,
) -> Result<FlowStack> {
    let mut rng = stream(config.train.seed, STREAM_INIT);
    FlowStack::random_planar(dim, config.flow_layers, config.init_scale, output, &mut rng)
}

/// Trains and writes the trace; a failed run still leaves its partial trace on disk.
pub(crate) fn train_and_record(
    train: &TrainConfig,
    stack: FlowStack,
    constraints: &ConstraintSet,
    out_dir: &Path,
    prefix: &str,
) -> Result<TrainReport> {
    let (report, err) = train_partial(train, stack, constraints)?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(
        out_dir.join(format!("{prefix}trace.csv")),
        report.trace_csv(),
    )?;
    std::fs::write(
        out_dir.join(format!("{prefix}train_report.json")),
        report.to_text(),
    )?;
    match err {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

pub(crate) fn evaluate(
    stack: &FlowStack,
    constraints: &ConstraintSet,
    n: usize,
    seed: u64,
) -> Result<(FitSummary, SampleBatch)> {
    let mut rng = stream(seed, STREAM_EVAL);
    let batch = draw_batch(stack, constraints, n, &mut rng)?;
    Ok((FitSummary::from_batch(&batch), batch))
}

/// Runs the experiment the config names, writing all artifacts.
pub fn run(config: &ExperimentConfig) -> Result<ExperimentReport> {
    validate_config(config)?;
    match config.experiment {
        ExperimentKind::Dirichlet => run_dirichlet(config),
        ExperimentKind::Options => run_options(config),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DIRICHLET: &str = r#"
experiment = "dirichlet"
output_dir = "out"

[train]
k_max = 2
i_max = 10
seed = 4

[dirichlet]
alpha = [1.0, 2.0, 3.0]
"#;

    #[test]
    fn parses_with_defaults() {
        let c = ExperimentConfig::from_toml_str(DIRICHLET).unwrap();
        assert_eq!(c.experiment, ExperimentKind::Dirichlet);
        assert_eq!(c.train.n, 300);
        assert_eq!(c.train.i_max, 10);
        assert_eq!(c.flow_layers, 10);
        assert_eq!(c.mmd_sample_size, 300);
        assert!(validate_config(&c).is_ok());
        let back = ExperimentConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_inconsistent_configs() {
        let mut c = ExperimentConfig::from_toml_str(DIRICHLET).unwrap();
        c.dirichlet = Some(DirichletBlock {
            alpha: vec![1.0, -1.0],
        });
        assert!(validate_config(&c).is_err());
        c.dirichlet = None;
        assert!(validate_config(&c).is_err());
        assert!(
            ExperimentConfig::from_toml_str("experiment = \"dirichlet\"\nbogus = 1\n").is_err()
        );

        let opts = r#"
experiment = "options"
[options]
chain = "/definitely/not/here.csv"
"#;
        let c = ExperimentConfig::from_toml_str(opts).unwrap();
        let err = validate_config(&c).unwrap_err().to_string();
        assert!(err.contains("does not exist"), "{err}");
    }
}
