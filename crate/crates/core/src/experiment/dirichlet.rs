use serde::{Deserialize, Serialize};

use super::{
    evaluate, initial_stack, stream, train_and_record, ExperimentConfig, ExperimentReport,
    ExperimentResults, FitSummary, STREAM_TEST,
};
use crate::constraints::{dirichlet_constraints, kappa_from_alpha};
use crate::error::{Error, Result};
use crate::flow::OutputMap;
use crate::oracles::{ln_gamma, DirichletParams};
use crate::validation::{
    diversity_metrics, mmd_permutation_test, qq_points, DiversityReport, MmdTest, SampleSet,
};

const STREAM_PERMUTE: u64 = 4;
const HIST_BINS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub fit: FitSummary,
    pub diversity: DiversityReport,
    pub final_c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirichletResults {
    pub alpha: Vec<f64>,
    pub true_entropy: f64,
    /// Estimated minus true entropy.
    pub entropy_gap: f64,
    pub mmd: MmdTest,
    /// `KL(moment-fitted Dirichlet ‖ truth)` for the flow's samples.
    pub kl_proxy: f64,
    pub fitted_alpha: Vec<f64>,
    pub diversity: DiversityReport,
    pub reference_diversity: DiversityReport,
    pub ablation: Option<AblationSummary>,
}

fn beta_pdf(x: f64, a: f64, b: f64) -> f64 {
    (ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + (a - 1.0) * x.ln() + (b - 1.0) * (1.0 - x).ln())
        .exp()
}

/// Per-coordinate marginal histograms of the flow's samples next to the true
/// Beta marginals, including the implied last coordinate.
fn marginal_grid(params: &DirichletParams, points: &[Vec<f64>]) -> String {
    let d = params.d();
    let a0 = params.alpha0();
    let mut s = String::from("coordinate,bin_center,true_pdf,mefn_hist\n");
    let n = points.len() as f64;
    let width = 1.0 / HIST_BINS as f64;
    for k in 0..d {
        let mut counts = vec![0usize; HIST_BINS];
        for p in points {
            let v = if k < d - 1 {
                p[k]
            } else {
                1.0 - p.iter().sum::<f64>()
            };
            counts[((v / width) as usize).min(HIST_BINS - 1)] += 1;
        }
        for (b, c) in counts.iter().enumerate() {
            let center = (b as f64 + 0.5) * width;
            let truth = beta_pdf(center, params.alpha[k], a0 - params.alpha[k]);
            s.push_str(&format!(
                "{},{},{},{}\n",
                k + 1,
                center,
                truth,
                *c as f64 / (n * width)
            ));
        }
    }
    s
}

fn qq_grid(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<String> {
    let probs: Vec<f64> = (1..20).map(|i| i as f64 * 0.05).collect();
    let mut s = String::from("coordinate,prob,mefn,dirichlet\n");
    for k in 0..a[0].len() {
        let xa: Vec<f64> = a.iter().map(|p| p[k]).collect();
        let xb: Vec<f64> = b.iter().map(|p| p[k]).collect();
        for (p, (qa, qb)) in probs.iter().zip(qq_points(&xa, &xb, &probs)?) {
            s.push_str(&format!("{},{p},{qa},{qb}\n", k + 1));
        }
    }
    Ok(s)
}

fn samples_csv(sets: &[(&str, &[Vec<f64>])]) -> String {
    let dim = sets[0].1[0].len();
    let mut s = String::from("source");
    for j in 1..=dim {
        s.push_str(&format!(",x{j}"));
    }
    s.push('\n');
    for (name, pts) in sets {
        for p in *pts {
            s.push_str(name);
            for v in p {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
    }
    s
}

/// Trains a flow towards the maximum entropy density with the log-moments of
/// `Dirichlet(alpha)`, whose exact answer is that Dirichlet.
pub fn run_dirichlet(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let block = config
        .dirichlet
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("missing [dirichlet] block".into()))?;
    let truth = DirichletParams::new(block.alpha.clone())?;
    let constraints = dirichlet_constraints(&kappa_from_alpha(&block.alpha)?)?;
    let dim = truth.d() - 1;
    let out = &config.output_dir;
    let seed = config.train.seed;

    let stack0 = initial_stack(config, dim, OutputMap::Simplex)?;
    let train = train_and_record(&config.train, stack0.clone(), &constraints, out, "")?;
    let stack = &train.final_stack;

    let eval_n = config.eval_sample_size.max(config.mmd_sample_size);
    let (fit, batch) = evaluate(stack, &constraints, eval_n, seed)?;
    let mefn_points = &batch.transformed[..config.mmd_sample_size];

    let mut test_rng = stream(seed, STREAM_TEST);
    let reference: Vec<Vec<f64>> = (0..config.mmd_sample_size)
        .map(|_| truth.sample(&mut test_rng))
        .collect();
    let mefn_set = SampleSet::new(mefn_points.to_vec())?;
    let ref_set = SampleSet::new(reference.clone())?;
    let mmd = mmd_permutation_test(
        &mefn_set,
        &ref_set,
        config.mmd_permutations,
        &mut stream(seed, STREAM_PERMUTE),
    )?;
    let fitted = DirichletParams::fit_moments(&batch.transformed)?;
    let kl_proxy = fitted.kl(&truth)?;

    let true_entropy = truth.entropy();
    let mut ablation_points = Vec::new();
    let ablation = if config.ablation {
        let mut cfg = config.train.clone();
        cfg.entropy_enabled = false;
        let report = train_and_record(&cfg, stack0, &constraints, out, "ablation_")?;
        let (fit, batch) = evaluate(&report.final_stack, &constraints, eval_n, seed)?;
        ablation_points = batch.transformed[..config.mmd_sample_size].to_vec();
        Some(AblationSummary {
            fit,
            diversity: diversity_metrics(&SampleSet::new(ablation_points.clone())?),
            final_c: report.final_state.c,
        })
    } else {
        None
    };

    let results = DirichletResults {
        alpha: block.alpha.clone(),
        true_entropy,
        entropy_gap: fit.entropy - true_entropy,
        mmd,
        kl_proxy,
        fitted_alpha: fitted.alpha.clone(),
        diversity: diversity_metrics(&mefn_set),
        reference_diversity: diversity_metrics(&ref_set),
        ablation,
    };

    std::fs::write(
        out.join("density_grid.csv"),
        marginal_grid(&truth, &batch.transformed),
    )?;
    std::fs::write(
        out.join("qq.csv"),
        qq_grid(&batch.transformed, &reference_for_qq(&truth, eval_n, seed))?,
    )?;
    let mut sets: Vec<(&str, &[Vec<f64>])> = vec![("mefn", mefn_points), ("dirichlet", &reference)];
    if !ablation_points.is_empty() {
        sets.push(("ablation", &ablation_points));
    }
    std::fs::write(out.join("samples.csv"), samples_csv(&sets))?;

    let report = ExperimentReport {
        seed,
        fit,
        outer: train.outer.clone(),
        final_lambda: train.final_state.lambda.clone(),
        final_c: train.final_state.c,
        final_stack: train.final_stack.clone(),
        results: ExperimentResults::Dirichlet(results),
        train: Some(train),
    };
    std::fs::write(out.join("report.json"), report.to_text())?;
    Ok(report)
}

/// A larger reference sample for quantile comparison, from its own stream.
fn reference_for_qq(truth: &DirichletParams, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = stream(seed, STREAM_TEST + 100);
    (0..n).map(|_| truth.sample(&mut rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::{DirichletBlock, ExperimentKind};
    use crate::trainer::TrainConfig;

    fn tiny_config(dir: &std::path::Path, alpha: Vec<f64>) -> ExperimentConfig {
        ExperimentConfig {
            experiment: ExperimentKind::Dirichlet,
            output_dir: dir.to_path_buf(),
            eval_sample_size: 500,
            mmd_permutations: 100,
            mmd_sample_size: 50,
            ablation: true,
            flow_layers: 2,
            init_scale: 0.01,
            train: TrainConfig {
                k_max: 1,
                i_max: 0,
                n: 20,
                n_tilde: 40,
                residual_batches: 3,
                residual_batch_size: 10,
                ..TrainConfig::default()
            },
            dirichlet: Some(DirichletBlock { alpha }),
            options: None,
        }
    }

    #[test]
    fn degenerate_run_emits_all_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config(dir.path(), vec![1.0, 1.0, 1.0]);
        let report = run_dirichlet(&config).unwrap();
        for f in [
            "trace.csv",
            "train_report.json",
            "report.json",
            "density_grid.csv",
            "qq.csv",
            "samples.csv",
            "ablation_trace.csv",
        ] {
            assert!(dir.path().join(f).is_file(), "{f}");
        }
        let ExperimentResults::Dirichlet(r) = &report.results else {
            panic!("wrong results kind")
        };
        assert!((r.true_entropy + 2f64.ln()).abs() < 1e-12);
        // a near-identity flow through the simplex map is a logistic-normal
        assert!(report.fit.entropy.is_finite());
        assert!(r.ablation.is_some());
    }

    #[test]
    fn beta_marginal_integrates_to_one() {
        let n = 20_000;
        let h = 1.0 / n as f64;
        let total: f64 = (0..n)
            .map(|i| beta_pdf((i as f64 + 0.5) * h, 2.0, 4.0) * h)
            .sum();
        assert!((total - 1.0).abs() < 1e-6);
    }
}
