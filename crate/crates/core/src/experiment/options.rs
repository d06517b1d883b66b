use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    evaluate, initial_stack, stream, train_and_record, ExperimentConfig, ExperimentReport,
    ExperimentResults, STREAM_TEST,
};
use crate::constraints::{option_constraints, OptionChain};
use crate::error::{Error, Result};
use crate::flow::{scalar_log_density_at, FlowStack, OutputMap};
use crate::objectives::draw_base_points;
use crate::oracles::{gibbs_option_fit, GibbsOptionModel};
use crate::validation::{ls_slope, qq_points};

const STREAM_GIBBS: u64 = 5;
const GRID_POINTS: usize = 400;
const SAMPLE_ROWS: usize = 10_000;

/// Option chain priced under a known piecewise-exponential density whose
/// kinks sit at the training strikes, so that density is the maximum entropy
/// answer for the training prices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticChain {
    pub discount: f64,
    /// `[η₀, η₁, …]`, one slope change per training strike.
    pub eta: Vec<f64>,
    pub train_strikes: Vec<f64>,
    #[serde(default)]
    pub test_strikes: Vec<f64>,
}

impl SyntheticChain {
    pub fn validate(&self) -> Result<()> {
        self.truth().map(|_| ())?;
        let mut all = self.train_strikes.clone();
        all.extend_from_slice(&self.test_strikes);
        if all.iter().any(|k| !(*k > 0.0)) {
            return Err(Error::InvalidArgument("strikes must be positive".into()));
        }
        Ok(())
    }

    pub fn truth(&self) -> Result<GibbsOptionModel> {
        GibbsOptionModel::from_eta(self.eta.clone(), self.train_strikes.clone(), self.discount)
    }
}

/// `(training chain, held-out chain, generating density)`.
pub fn synthetic_chain(
    synthetic: &SyntheticChain,
) -> Result<(OptionChain, OptionChain, GibbsOptionModel)> {
    let truth = synthetic.truth()?;
    let spot = synthetic.discount * truth.mean();
    let price_all = |ks: &[f64]| ks.iter().map(|k| truth.price(*k)).collect::<Vec<_>>();
    let train = OptionChain::new(
        spot,
        synthetic.discount,
        synthetic.train_strikes.clone(),
        price_all(&synthetic.train_strikes),
    )?;
    let test = OptionChain::new(
        spot,
        synthetic.discount,
        synthetic.test_strikes.clone(),
        price_all(&synthetic.test_strikes),
    )?;
    Ok((train, test, truth))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceRow {
    pub strike: f64,
    pub observed: f64,
    pub gibbs: f64,
    pub mefn: f64,
    pub mefn_se: f64,
    /// `train` or `test`.
    pub split: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptionResults {
    pub spot: f64,
    pub discount: f64,
    pub gibbs: GibbsOptionModel,
    pub gibbs_entropy: f64,
    pub prices: Vec<PriceRow>,
    pub gibbs_rmse_train: f64,
    pub gibbs_rmse_test: Option<f64>,
    pub mefn_rmse_train: f64,
    pub mefn_rmse_test: Option<f64>,
    /// Root mean square of the Monte Carlo standard errors at training strikes.
    pub mefn_mc_se_train: f64,
    pub qq_probs: Vec<f64>,
    /// `(gibbs, mefn)` quantile pairs.
    pub qq: Vec<(f64, f64)>,
    pub qq_slope: f64,
}

fn rmse(rows: &[&PriceRow], pick: impl Fn(&PriceRow) -> f64) -> Option<f64> {
    if rows.is_empty() {
        return None;
    }
    let s: f64 = rows.iter().map(|r| (pick(r) - r.observed).powi(2)).sum();
    Some((s / rows.len() as f64).sqrt())
}

/// Discounted Monte Carlo call price and its standard error.
fn mc_price(samples: &[f64], strike: f64, discount: f64) -> (f64, f64) {
    let n = samples.len() as f64;
    let pay: Vec<f64> = samples.iter().map(|s| (s - strike).max(0.0)).collect();
    let mean = pay.iter().sum::<f64>() / n;
    let var = pay.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (discount * mean, discount * (var / n).sqrt())
}

fn flow_samples<R: Rng + ?Sized>(stack: &FlowStack, n: usize, rng: &mut R) -> Result<Vec<f64>> {
    draw_base_points(1, n, rng)
        .iter()
        .map(|z| Ok(stack.forward(z)?.0[0]))
        .collect()
}

fn load_chains(
    config: &ExperimentConfig,
) -> Result<(OptionChain, OptionChain, Option<GibbsOptionModel>)> {
    let block = config
        .options
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("missing [options] block".into()))?;
    if let Some(synthetic) = &block.synthetic {
        let (train, test, truth) = synthetic_chain(synthetic)?;
        return Ok((train, test, Some(truth)));
    }
    let path = block.chain.as_ref().ok_or_else(|| {
        Error::InvalidArgument("options need a chain file or a synthetic block".into())
    })?;
    let train = OptionChain::load_csv(path).map_err(|e| {
        Error::InvalidArgument(format!("cannot load chain {}: {e}", path.display()))
    })?;
    let test = match &block.test_chain {
        Some(p) => {
            let t = OptionChain::load_csv(p)?;
            if t.spot != train.spot || t.discount != train.discount {
                return Err(Error::InvalidArgument(
                    "test chain spot and discount must match the training chain".into(),
                ));
            }
            t
        }
        None => OptionChain::new(train.spot, train.discount, vec![], vec![])?,
    };
    Ok((train, test, None))
}

/// Fits the Gibbs density and trains a scalar flow on the training prices,
/// then compares both on every strike.
pub fn run_options(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let block = config
        .options
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("missing [options] block".into()))?;
    let (train_chain, test_chain, truth) = load_chains(config)?;
    let gibbs = gibbs_option_fit(&train_chain)?;
    let constraints = option_constraints(&train_chain)?;
    let out = &config.output_dir;
    let seed = config.train.seed;
    let (spot, d) = (train_chain.spot, train_chain.discount);

    // lognormal start with mean S₀/D
    let output = OutputMap::PositiveAffine {
        a: 1.0,
        b: (spot / d).ln() - 0.5,
    };
    let stack0 = initial_stack(config, 1, output)?;
    let train = train_and_record(&config.train, stack0, &constraints, out, "")?;
    let stack = &train.final_stack;
    let (fit, _) = evaluate(stack, &constraints, config.eval_sample_size, seed)?;

    let mefn = flow_samples(stack, block.pricing_draws, &mut stream(seed, STREAM_TEST))?;
    let mut gibbs_rng = stream(seed, STREAM_GIBBS);
    let gibbs_draws: Vec<f64> = (0..block.pricing_draws)
        .map(|_| gibbs.sample(&mut gibbs_rng))
        .collect();

    let mut prices = Vec::new();
    for (chain, split) in [(&train_chain, "train"), (&test_chain, "test")] {
        for (k, c) in chain.strikes.iter().zip(&chain.prices) {
            let (m, se) = mc_price(&mefn, *k, d);
            prices.push(PriceRow {
                strike: *k,
                observed: *c,
                gibbs: gibbs.price(*k),
                mefn: m,
                mefn_se: se,
                split: split.to_string(),
            });
        }
    }
    let train_rows: Vec<&PriceRow> = prices.iter().filter(|r| r.split == "train").collect();
    let test_rows: Vec<&PriceRow> = prices.iter().filter(|r| r.split == "test").collect();
    let mefn_mc_se_train = if train_rows.is_empty() {
        0.0
    } else {
        (train_rows.iter().map(|r| r.mefn_se.powi(2)).sum::<f64>() / train_rows.len() as f64).sqrt()
    };

    let qq_probs: Vec<f64> = (1..20).map(|i| i as f64 * 0.05).collect();
    let qq = qq_points(&gibbs_draws, &mefn, &qq_probs)?;
    let qq_slope = ls_slope(&qq);

    let results = OptionResults {
        spot,
        discount: d,
        gibbs_entropy: gibbs.entropy(),
        gibbs_rmse_train: rmse(&train_rows, |r| r.gibbs).unwrap_or(0.0),
        gibbs_rmse_test: rmse(&test_rows, |r| r.gibbs),
        mefn_rmse_train: rmse(&train_rows, |r| r.mefn).unwrap_or(0.0),
        mefn_rmse_test: rmse(&test_rows, |r| r.mefn),
        mefn_mc_se_train,
        gibbs,
        prices,
        qq_probs,
        qq,
        qq_slope,
    };

    write_artifacts(out, stack, &results, truth.as_ref(), &mefn, &gibbs_draws)?;
    let report = ExperimentReport {
        seed,
        fit,
        outer: train.outer.clone(),
        final_lambda: train.final_state.lambda.clone(),
        final_c: train.final_state.c,
        final_stack: train.final_stack.clone(),
        results: ExperimentResults::Options(results),
        train: Some(train),
    };
    std::fs::write(out.join("report.json"), report.to_text())?;
    Ok(report)
}

fn write_artifacts(
    out: &std::path::Path,
    stack: &FlowStack,
    results: &OptionResults,
    truth: Option<&GibbsOptionModel>,
    mefn: &[f64],
    gibbs_draws: &[f64],
) -> Result<()> {
    let top = results.gibbs.quantile(0.999);
    let mut grid = String::from("s,gibbs_pdf,mefn_pdf,true_pdf\n");
    for i in 1..=GRID_POINTS {
        let s = top * i as f64 / GRID_POINTS as f64;
        let flow_pdf = scalar_log_density_at(stack, s).map(f64::exp).unwrap_or(0.0);
        let true_pdf = truth.map_or(String::new(), |t| t.pdf(s).to_string());
        grid.push_str(&format!(
            "{s},{},{flow_pdf},{true_pdf}\n",
            results.gibbs.pdf(s)
        ));
    }
    std::fs::write(out.join("density_grid.csv"), grid)?;

    let mut qq = String::from("prob,gibbs,mefn\n");
    for (p, (g, m)) in results.qq_probs.iter().zip(&results.qq) {
        qq.push_str(&format!("{p},{g},{m}\n"));
    }
    std::fs::write(out.join("qq.csv"), qq)?;

    let mut samples = String::from("source,s\n");
    for (name, xs) in [("mefn", mefn), ("gibbs", gibbs_draws)] {
        for x in xs.iter().take(SAMPLE_ROWS) {
            samples.push_str(&format!("{name},{x}\n"));
        }
    }
    std::fs::write(out.join("samples.csv"), samples)?;

    let mut table = String::from("strike,observed,gibbs,mefn,mefn_se,split\n");
    for r in &results.prices {
        table.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.strike, r.observed, r.gibbs, r.mefn, r.mefn_se, r.split
        ));
    }
    std::fs::write(out.join("prices.csv"), table)?;
    Ok(())
}
