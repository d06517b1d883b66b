//! Two-sample testing, quantile comparison and sample-diversity metrics.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `n ≥ 2` points of a common dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    points: Vec<Vec<f64>>,
}

impl SampleSet {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "a sample set needs at least two points, got {}",
                points.len()
            )));
        }
        let p = points[0].len();
        if let Some(bad) = points.iter().find(|x| x.len() != p) {
            return Err(Error::DimensionMismatch {
                expected: p,
                got: bad.len(),
            });
        }
        Ok(Self { points })
    }

    pub fn scalars(values: &[f64]) -> Result<Self> {
        Self::new(values.iter().map(|v| vec![*v]).collect())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn to_csv(&self) -> String {
        let mut s = (1..=self.dim())
            .map(|j| format!("x{j}"))
            .collect::<Vec<_>>()
            .join(",");
        s.push('\n');
        for p in &self.points {
            let row: Vec<String> = p.iter().map(|v| v.to_string()).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median of pairwise Euclidean distances in the pooled sample.
pub fn median_heuristic_bandwidth(x: &SampleSet, y: &SampleSet) -> Result<f64> {
    let pooled: Vec<&Vec<f64>> = x.points.iter().chain(&y.points).collect();
    let mut d = Vec::with_capacity(pooled.len() * (pooled.len() - 1) / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            d.push(sq_dist(pooled[i], pooled[j]).sqrt());
        }
    }
    d.sort_by(f64::total_cmp);
    let n = d.len();
    let med = if n % 2 == 1 {
        d[n / 2]
    } else {
        0.5 * (d[n / 2 - 1] + d[n / 2])
    };
    if !(med > 0.0) {
        return Err(Error::DegenerateBandwidth);
    }
    Ok(med)
}

/// RBF Gram matrix of the pooled points `x ∪ y`.
fn pooled_gram(x: &SampleSet, y: &SampleSet, sigma: f64) -> Vec<Vec<f64>> {
    let pooled: Vec<&Vec<f64>> = x.points.iter().chain(&y.points).collect();
    let scale = -0.5 / (sigma * sigma);
    let n = pooled.len();
    let mut k = vec![vec![0.0; n]; n];
    for i in 0..n {
        k[i][i] = 1.0;
        for j in 0..i {
            let v = (scale * sq_dist(pooled[i], pooled[j])).exp();
            k[i][j] = v;
            k[j][i] = v;
        }
    }
    k
}

/// Unbiased MMD² from a pooled Gram matrix and the member indices of each group.
fn mmd2_from_gram(k: &[Vec<f64>], members_x: &[usize], members_y: &[usize]) -> f64 {
    let within = |idx: &[usize]| {
        let mut s = 0.0;
        for (a, &i) in idx.iter().enumerate() {
            for &j in &idx[a + 1..] {
                s += k[i][j];
            }
        }
        let n = idx.len() as f64;
        2.0 * s / (n * (n - 1.0))
    };
    let mut cross = 0.0;
    for &i in members_x {
        for &j in members_y {
            cross += k[i][j];
        }
    }
    within(members_x) + within(members_y) - 2.0 * cross / (members_x.len() * members_y.len()) as f64
}

/// Unbiased U-statistic estimate of MMD² with an RBF kernel of width `sigma`.
pub fn mmd2_unbiased(x: &SampleSet, y: &SampleSet, sigma: f64) -> f64 {
    let k = pooled_gram(x, y, sigma);
    let nx = x.len();
    let ix: Vec<usize> = (0..nx).collect();
    let iy: Vec<usize> = (nx..nx + y.len()).collect();
    mmd2_from_gram(&k, &ix, &iy)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmdTest {
    pub statistic: f64,
    pub sigma: f64,
    pub p_value: f64,
    pub n_perm: usize,
}

/// Permutation test of equal distributions, with the median-heuristic RBF
/// kernel. `p = (1 + #{permuted ≥ observed}) / (1 + n_perm)`.
pub fn mmd_permutation_test<R: Rng + ?Sized>(
    x: &SampleSet,
    y: &SampleSet,
    n_perm: usize,
    rng: &mut R,
) -> Result<MmdTest> {
    if n_perm < 100 {
        return Err(Error::InvalidArgument(format!(
            "use at least 100 permutations, got {n_perm}"
        )));
    }
    if x.dim() != y.dim() {
        return Err(Error::DimensionMismatch {
            expected: x.dim(),
            got: y.dim(),
        });
    }
    let sigma = median_heuristic_bandwidth(x, y)?;
    let k = pooled_gram(x, y, sigma);
    let nx = x.len();
    let n = nx + y.len();
    let mut idx: Vec<usize> = (0..n).collect();
    let observed = mmd2_from_gram(&k, &idx[..nx], &idx[nx..]);
    let mut exceed = 0usize;
    for _ in 0..n_perm {
        idx.shuffle(rng);
        if mmd2_from_gram(&k, &idx[..nx], &idx[nx..]) >= observed {
            exceed += 1;
        }
    }
    Ok(MmdTest {
        statistic: observed,
        sigma,
        p_value: (1 + exceed) as f64 / (1 + n_perm) as f64,
        n_perm,
    })
}

/// Diversity of a set of samples, treating each coordinate as a group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    /// Mean squared distance over ordered pairs of distinct samples.
    pub d_l2: f64,
    pub sst: f64,
    pub ssw: f64,
    pub ssb: f64,
}

impl DiversityReport {
    pub fn csv_header() -> &'static str {
        "d_l2,sst,ssw,ssb"
    }

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.d_l2, self.sst, self.ssw, self.ssb)
    }
}

/// `SST = Σ_{i,k}(z_iᵏ - z̄)²`, `SSW = Σ_{i,k}(z_iᵏ - z̄ᵏ)²`,
/// `SSB = Σ_k n(z̄ᵏ - z̄)²`, with `z̄ᵏ` the mean of coordinate `k` over samples
/// and `z̄` the grand mean.
pub fn diversity_metrics(samples: &SampleSet) -> DiversityReport {
    let n = samples.len();
    let p = samples.dim();
    let nf = n as f64;
    let mut col_mean = vec![0.0; p];
    for x in &samples.points {
        for (m, v) in col_mean.iter_mut().zip(x) {
            *m += v / nf;
        }
    }
    let grand = col_mean.iter().sum::<f64>() / p as f64;
    let mut sst = 0.0;
    let mut ssw = 0.0;
    for x in &samples.points {
        for (v, m) in x.iter().zip(&col_mean) {
            sst += (v - grand).powi(2);
            ssw += (v - m).powi(2);
        }
    }
    let ssb = col_mean.iter().map(|m| nf * (m - grand).powi(2)).sum();
    // Σ_{i≠j}‖z_i - z_j‖² = 2n·SSW
    let d_l2 = 2.0 * ssw / (nf - 1.0);
    DiversityReport {
        d_l2,
        sst,
        ssw,
        ssb,
    }
}

/// Empirical quantile with linear interpolation between order statistics
/// (position `(n - 1)p`).
pub fn empirical_quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Pairs of empirical quantiles of `x` and `y` at each probability.
pub fn qq_points(x: &[f64], y: &[f64], probs: &[f64]) -> Result<Vec<(f64, f64)>> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::InvalidArgument("empty sample".into()));
    }
    if let Some(p) = probs.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
        return Err(Error::InvalidArgument(format!(
            "probability {p} outside (0, 1)"
        )));
    }
    let sort = |v: &[f64]| {
        let mut s = v.to_vec();
        s.sort_by(f64::total_cmp);
        s
    };
    let (sx, sy) = (sort(x), sort(y));
    Ok(probs
        .iter()
        .map(|p| (empirical_quantile(&sx, *p), empirical_quantile(&sy, *p)))
        .collect())
}

/// Least-squares slope of `y` on `x` (with intercept).
pub fn ls_slope(pairs: &[(f64, f64)]) -> f64 {
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pairs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pairs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

pub fn qq_csv(pairs: &[(f64, f64)], probs: &[f64]) -> String {
    let mut s = String::from("prob,x,y\n");
    for (p, (a, b)) in probs.iter().zip(pairs) {
        s.push_str(&format!("{p},{a},{b}\n"));
    }
    s
}
