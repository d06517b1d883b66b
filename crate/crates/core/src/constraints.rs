//! Moment functions `T` with analytic output-space Jacobians.
//!
//! A constraint set is satisfied by a density `p` when `E_p[T(s)] = 0`.
//! Two families are provided: Dirichlet log-moments on the open simplex and
//! discounted call payoffs on the positive half-line.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::flow::OutputMap;

pub use crate::oracles::kappa_from_alpha;

const LOG_FLOOR: f64 = 1e-300;

/// Support of the flow output the constraints are defined on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    /// `{s ∈ R^{d-1} : s > 0, Σs < 1}`.
    Simplex(usize),
    PositiveHalfLine,
}

impl Domain {
    pub fn output_dim(&self) -> usize {
        match self {
            Domain::Simplex(d) => d - 1,
            Domain::PositiveHalfLine => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Family {
    Dirichlet { kappa: Vec<f64> },
    Options { chain: OptionChain },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSet {
    family: Family,
}

impl ConstraintSet {
    pub fn m(&self) -> usize {
        match &self.family {
            Family::Dirichlet { kappa } => kappa.len(),
            Family::Options { chain } => chain.strikes.len() + 1,
        }
    }

    pub fn domain(&self) -> Domain {
        match &self.family {
            Family::Dirichlet { kappa } => Domain::Simplex(kappa.len()),
            Family::Options { .. } => Domain::PositiveHalfLine,
        }
    }

    /// Dimension of the output points `T` is evaluated at.
    pub fn dim(&self) -> usize {
        self.domain().output_dim()
    }

    /// Whether `map` produces points in this set's domain.
    pub fn accepts(&self, map: &OutputMap) -> bool {
        matches!(
            (self.domain(), map),
            (Domain::Simplex(_), OutputMap::Simplex)
                | (Domain::PositiveHalfLine, OutputMap::PositiveAffine { .. })
        )
    }

    pub fn evaluate(&self, s: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.m()];
        self.evaluate_into(s, &mut out)?;
        Ok(out)
    }

    pub fn evaluate_into(&self, s: &[f64], out: &mut [f64]) -> Result<()> {
        check_dim(self.dim(), s.len())?;
        check_dim(self.m(), out.len())?;
        match &self.family {
            Family::Dirichlet { kappa } => {
                let last = simplex_last(s)?;
                for (k, o) in out.iter_mut().enumerate() {
                    let x = if k < s.len() { s[k] } else { last };
                    *o = x.max(LOG_FLOOR).ln() - kappa[k];
                }
            }
            Family::Options { chain } => {
                let x = s[0];
                let d = chain.discount;
                for (i, o) in out.iter_mut().take(chain.strikes.len()).enumerate() {
                    *o = d * (x - chain.strikes[i]).max(0.0) - chain.prices[i];
                }
                out[chain.strikes.len()] = d * x - chain.spot;
            }
        }
        Ok(())
    }

    /// Jacobian `∂T/∂s`, `m` rows of length `dim`.
    pub fn output_gradient(&self, s: &[f64]) -> Result<Vec<Vec<f64>>> {
        let (m, dim) = (self.m(), self.dim());
        let mut rows = Vec::with_capacity(m);
        for i in 0..m {
            let mut e = vec![0.0; m];
            e[i] = 1.0;
            let mut row = vec![0.0; dim];
            self.vjp(s, &e, &mut row)?;
            rows.push(row);
        }
        Ok(rows)
    }

    /// Adds `(∂T/∂s)ᵀ weights` into `out`.
    pub fn vjp(&self, s: &[f64], weights: &[f64], out: &mut [f64]) -> Result<()> {
        check_dim(self.dim(), s.len())?;
        check_dim(self.m(), weights.len())?;
        check_dim(self.dim(), out.len())?;
        match &self.family {
            Family::Dirichlet { .. } => {
                let last = simplex_last(s)?;
                let dlog = |x: f64| if x < LOG_FLOOR { 0.0 } else { 1.0 / x };
                let tail = weights[s.len()] * dlog(last);
                for (k, o) in out.iter_mut().enumerate() {
                    *o += weights[k] * dlog(s[k]) - tail;
                }
            }
            Family::Options { chain } => {
                let x = s[0];
                let d = chain.discount;
                let mut g = d * weights[chain.strikes.len()];
                for (k, w) in chain.strikes.iter().zip(weights) {
                    // left derivative at the kink
                    if x > *k {
                        g += d * w;
                    }
                }
                out[0] += g;
            }
        }
        Ok(())
    }
}

/// Checks `s` lies strictly inside the simplex and returns `1 - Σs`.
fn simplex_last(s: &[f64]) -> Result<f64> {
    let last = 1.0 - s.iter().sum::<f64>();
    if s.iter().any(|x| !(*x > 0.0)) || !(last > 0.0) {
        return Err(Error::OutsideDomain(format!(
            "{s:?} is not interior to the simplex"
        )));
    }
    Ok(last)
}

/// `T_k(s) = log s_k - κ_k` with `s_d = 1 - Σs`.
pub fn dirichlet_constraints(kappa: &[f64]) -> Result<ConstraintSet> {
    if kappa.len() < 2 {
        return Err(Error::InvalidArgument(
            "dirichlet constraints need d >= 2".into(),
        ));
    }
    if kappa.iter().any(|k| !k.is_finite()) {
        return Err(Error::InvalidArgument("kappa must be finite".into()));
    }
    Ok(ConstraintSet {
        family: Family::Dirichlet {
            kappa: kappa.to_vec(),
        },
    })
}

/// `T_i(s) = D(s - K_i)₊ - c_i` for each strike, then `T_{m+1}(s) = D·s - S₀`.
pub fn option_constraints(chain: &OptionChain) -> Result<ConstraintSet> {
    chain.validate()?;
    Ok(ConstraintSet {
        family: Family::Options {
            chain: chain.clone(),
        },
    })
}

/// European calls on one underlying at a single expiry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptionChain {
    pub spot: f64,
    pub discount: f64,
    pub strikes: Vec<f64>,
    pub prices: Vec<f64>,
}

impl OptionChain {
    pub fn new(spot: f64, discount: f64, strikes: Vec<f64>, prices: Vec<f64>) -> Result<Self> {
        let chain = Self {
            spot,
            discount,
            strikes,
            prices,
        };
        chain.validate()?;
        Ok(chain)
    }

    pub fn m(&self) -> usize {
        self.strikes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.spot > 0.0) || !self.spot.is_finite() {
            return bad(format!("spot must be positive, got {}", self.spot));
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return bad(format!(
                "discount must lie in (0, 1], got {}",
                self.discount
            ));
        }
        if self.strikes.len() != self.prices.len() {
            return Err(Error::DimensionMismatch {
                expected: self.strikes.len(),
                got: self.prices.len(),
            });
        }
        if self.strikes.iter().any(|k| !(*k > 0.0) || !k.is_finite()) {
            return bad("strikes must be positive".into());
        }
        if self.strikes.windows(2).any(|w| !(w[0] < w[1])) {
            return bad("strikes must be strictly increasing".into());
        }
        if self.prices.windows(2).any(|w| !(w[0] > w[1])) {
            return bad("prices must be strictly decreasing in strike".into());
        }
        let cap = self.discount * self.spot;
        for (k, c) in self.strikes.iter().zip(&self.prices) {
            if !(*c > 0.0) || !(*c < cap) {
                return bad(format!("price {c} at strike {k} outside (0, D*spot)"));
            }
            if !(*c > self.spot - self.discount * k) {
                return bad(format!(
                    "price {c} at strike {k} is below the forward intrinsic value"
                ));
            }
        }
        Ok(())
    }

    /// Parses `spot=`/`discount=` lines and a `strike,price` table. Blank
    /// lines and `#` comments are ignored.
    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut spot = None;
        let mut discount = None;
        let mut header = false;
        let mut strikes = Vec::new();
        let mut prices = Vec::new();
        let num = |v: &str, line: usize| -> Result<f64> {
            v.trim()
                .parse()
                .map_err(|_| Error::Parse(format!("line {line}: bad number {v:?}")))
        };
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let lineno = i + 1;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(v) = line.strip_prefix("spot=") {
                spot = Some(num(v, lineno)?);
            } else if let Some(v) = line.strip_prefix("discount=") {
                discount = Some(num(v, lineno)?);
            } else if line.replace(' ', "") == "strike,price" {
                header = true;
            } else if header {
                let (k, c) = line
                    .split_once(',')
                    .ok_or_else(|| Error::Parse(format!("line {lineno}: expected strike,price")))?;
                strikes.push(num(k, lineno)?);
                prices.push(num(c, lineno)?);
            } else {
                return Err(Error::Parse(format!("line {lineno}: unexpected {line:?}")));
            }
        }
        let spot = spot.ok_or_else(|| Error::Parse("missing spot= line".into()))?;
        let discount = discount.ok_or_else(|| Error::Parse("missing discount= line".into()))?;
        if !header {
            return Err(Error::Parse("missing strike,price header".into()));
        }
        Self::new(spot, discount, strikes, prices)
    }

    pub fn to_csv_string(&self) -> String {
        let mut s = format!(
            "spot={:?}\ndiscount={:?}\nstrike,price\n",
            self.spot, self.discount
        );
        for (k, c) in self.strikes.iter().zip(&self.prices) {
            s.push_str(&format!("{k:?},{c:?}\n"));
        }
        s
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        Self::from_csv_str(&std::fs::read_to_string(path)?)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::DirichletParams;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fd_check(set: &ConstraintSet, s: &[f64], tol: f64) {
        let jac = set.output_gradient(s).unwrap();
        for j in 0..s.len() {
            let h = 1e-6 * s[j].abs().max(1e-3);
            let mut sp = s.to_vec();
            let mut sm = s.to_vec();
            sp[j] += h;
            sm[j] -= h;
            let tp = set.evaluate(&sp).unwrap();
            let tm = set.evaluate(&sm).unwrap();
            for i in 0..set.m() {
                let fd = (tp[i] - tm[i]) / (2.0 * h);
                let err = (fd - jac[i][j]).abs() / jac[i][j].abs().max(1.0);
                assert!(err <= tol, "row {i} col {j}: {fd} vs {}", jac[i][j]);
            }
        }
    }

    #[test]
    fn dirichlet_values_by_substitution() {
        let set = dirichlet_constraints(&[0.0; 3]).unwrap();
        let e = (-1.0f64).exp();
        let t = set.evaluate(&[e, e]).unwrap();
        assert!((t[0] + 1.0).abs() < 1e-15);
        assert!((t[1] + 1.0).abs() < 1e-15);
        assert!((t[2] - (1.0 - 2.0 * e).ln()).abs() < 1e-15);
        assert_eq!(set.m(), 3);
        assert_eq!(set.dim(), 2);
        assert!(set.accepts(&OutputMap::Simplex));
        assert!(!set.accepts(&OutputMap::Identity));
    }

    #[test]
    fn dirichlet_constraints_hold_only_in_expectation() {
        let alpha = [1.0, 2.0, 3.0];
        let set = dirichlet_constraints(&kappa_from_alpha(&alpha).unwrap()).unwrap();
        let t = set.evaluate(&[1.0 / 6.0, 2.0 / 6.0]).unwrap();
        assert!(t.iter().any(|v| v.abs() > 1e-3));
    }

    #[test]
    fn dirichlet_boundary_is_rejected() {
        let set = dirichlet_constraints(&[0.0; 3]).unwrap();
        assert!(set.evaluate(&[0.0, 0.5]).is_err());
        assert!(set.evaluate(&[0.5, 0.5]).is_err());
        assert!(set.evaluate(&[0.7, 0.5]).is_err());
        let mut out = [0.0; 2];
        assert!(set.vjp(&[0.5, 0.5], &[1.0; 3], &mut out).is_err());
        assert!(dirichlet_constraints(&[0.0]).is_err());
    }

    #[test]
    fn dirichlet_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for d in 2..6 {
            let kappa: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..0.0)).collect();
            let set = dirichlet_constraints(&kappa).unwrap();
            for _ in 0..100 {
                let alpha = vec![1.0; d];
                let s = DirichletParams::new(alpha).unwrap().sample(&mut rng);
                if s.iter().any(|x| *x < 1e-3) || 1.0 - s.iter().sum::<f64>() < 1e-3 {
                    continue;
                }
                fd_check(&set, &s, 1e-6);
            }
        }
    }

    #[test]
    fn dirichlet_constraints_vanish_under_the_oracle() {
        let alpha = [1.0, 2.0, 3.0];
        let set = dirichlet_constraints(&kappa_from_alpha(&alpha).unwrap()).unwrap();
        let p = DirichletParams::new(alpha.to_vec()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| set.evaluate(&p.sample(&mut rng)).unwrap())
            .collect();
        for k in 0..3 {
            let mean = rows.iter().map(|r| r[k]).sum::<f64>() / n as f64;
            let var = rows.iter().map(|r| (r[k] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            assert!(
                mean.abs() < 4.0 * (var / n as f64).sqrt(),
                "component {k}: {mean}"
            );
        }
    }

    fn chain() -> OptionChain {
        OptionChain::new(1.25, 1.0, vec![1.0], vec![0.5]).unwrap()
    }

    #[test]
    fn option_values_by_substitution() {
        let set = option_constraints(&chain()).unwrap();
        assert_eq!(set.evaluate(&[2.0]).unwrap(), vec![0.5, 0.75]);
        assert_eq!(set.evaluate(&[1.0]).unwrap(), vec![-0.5, -0.25]);
        assert_eq!(set.evaluate(&[0.0]).unwrap(), vec![-0.5, -1.25]);
        assert_eq!(
            set.output_gradient(&[1.0]).unwrap(),
            vec![vec![0.0], vec![1.0]]
        );
        assert_eq!(
            set.output_gradient(&[1.5]).unwrap(),
            vec![vec![1.0], vec![1.0]]
        );
        assert!(set.accepts(&OutputMap::PositiveAffine { a: 1.0, b: 0.0 }));
    }

    #[test]
    fn option_gradient_matches_finite_differences_away_from_kinks() {
        let chain = OptionChain::new(
            100.0,
            0.98,
            vec![90.0, 100.0, 110.0, 120.0],
            vec![14.0, 7.5, 3.2, 1.1],
        )
        .unwrap();
        let set = option_constraints(&chain).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut checked = 0;
        while checked < 100 {
            let x: f64 = rng.random_range(0.0..200.0);
            if chain.strikes.iter().any(|k| (x - k).abs() < 1e-3) {
                continue;
            }
            fd_check(&set, &[x], 1e-6);
            checked += 1;
        }
    }

    #[test]
    fn chain_validation() {
        assert!(OptionChain::new(100.0, 1.0, vec![90.0, 80.0], vec![12.0, 20.0]).is_err());
        assert!(OptionChain::new(100.0, 1.0, vec![90.0, 100.0], vec![5.0, 8.0]).is_err());
        assert!(OptionChain::new(100.0, 0.9, vec![90.0], vec![95.0]).is_err());
        assert!(OptionChain::new(100.0, 1.0, vec![90.0], vec![5.0]).is_err());
        assert!(OptionChain::new(100.0, 1.2, vec![], vec![]).is_err());
        assert!(OptionChain::new(-1.0, 1.0, vec![], vec![]).is_err());
    }

    #[test]
    fn chain_csv_round_trip() {
        let c = OptionChain::new(100.0, 0.98, vec![90.0, 100.0], vec![13.1, 6.25]).unwrap();
        let back = OptionChain::from_csv_str(&c.to_csv_string()).unwrap();
        assert_eq!(back, c);
        let text = "# chain\nspot=100\ndiscount=1\n\nstrike,price\n95, 8.0\n";
        let parsed = OptionChain::from_csv_str(text).unwrap();
        assert_eq!(parsed.strikes, vec![95.0]);
        assert!(OptionChain::from_csv_str("spot=1\nstrike,price\n").is_err());
        assert!(OptionChain::from_csv_str("spot=1\ndiscount=1\n0.5,0.7\n").is_err());
    }
}
