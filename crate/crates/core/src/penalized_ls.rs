//! Weighted l1-penalized least squares and the selector plugin contract.
//!
//! The criterion minimized by [`lasso_cd`] is
//! `|r - X b|^2 + lambda * sigma_e2 * sum_j w_j |b_j|`,
//! so each coordinate update soft-thresholds at `lambda * sigma_e2 * w_j / 2`.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Weight used in place of `1/0` for predictors uncorrelated with the response.
pub const WEIGHT_CAP: f64 = 1e12;

pub fn soft_threshold(z: f64, t: f64) -> f64 {
    debug_assert!(t >= 0.0);
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectorConfig {
    pub lambda: f64,
    /// Per-coefficient multipliers; 1 everywhere is the plain Lasso.
    pub weights: Vec<f64>,
    pub unpenalized: BTreeSet<usize>,
    pub cd_tol: f64,
    pub cd_max_pass: usize,
    /// Give up with `Error::SupportCap` once coordinate descent has
    /// converged on an active set larger than this.
    #[serde(default)]
    pub max_support: Option<usize>,
}

impl SelectorConfig {
    pub fn new(lambda: f64, p: usize) -> Self {
        SelectorConfig {
            lambda,
            weights: vec![1.0; p],
            unpenalized: BTreeSet::new(),
            cd_tol: 1e-7,
            cd_max_pass: 100_000,
            max_support: None,
        }
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if self.weights.len() != p {
            return Err(Error::Dimension(format!("{} weights for {p} coefficients", self.weights.len())));
        }
        if self.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("weights must be finite and nonnegative".into()));
        }
        if self.unpenalized.iter().any(|&j| j >= p) {
            return Err(Error::Dimension("unpenalized index out of range".into()));
        }
        if !(self.cd_tol > 0.0) || self.cd_max_pass == 0 {
            return Err(Error::Config("cd_tol must be > 0 and cd_max_pass >= 1".into()));
        }
        Ok(())
    }

    /// Weights with exempt coefficients forced to zero.
    pub fn effective_weights(&self) -> Vec<f64> {
        let mut w = self.weights.clone();
        for &j in &self.unpenalized {
            w[j] = 0.0;
        }
        w
    }

    /// `lambda * sum_j w_j |b_j|` over penalized coefficients.
    pub fn penalty(&self, beta: &[f64]) -> f64 {
        self.lambda
            * self
                .effective_weights()
                .iter()
                .zip(beta)
                .map(|(w, b)| if *w == 0.0 { 0.0 } else { w * b.abs() })
                .sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectorOutcome {
    pub beta: Vec<f64>,
    pub support: Vec<usize>,
    /// Value of the criterion the selector minimized.
    pub objective: f64,
}

impl SelectorOutcome {
    pub fn from_beta(beta: Vec<f64>, objective: f64) -> Self {
        let support = support_of(&beta);
        SelectorOutcome {
            beta,
            support,
            objective,
        }
    }
}

pub fn support_of(beta: &[f64]) -> Vec<usize> {
    beta.iter()
        .enumerate()
        .filter(|(_, b)| **b != 0.0)
        .map(|(j, _)| j)
        .collect()
}

/// Column norms and lazily computed Gram columns for one design matrix.
/// Reused across calls so repeated solves on the same X skip `X'X` work.
#[derive(Debug, Clone, Default)]
pub struct LassoWorkspace {
    key: (usize, usize, usize),
    diag: Vec<f64>,
    gram: Vec<Option<Box<[f64]>>>,
}

impl LassoWorkspace {
    fn bind(&mut self, x: &DMatrix<f64>) {
        let key = (x.as_ptr() as usize, x.nrows(), x.ncols());
        if key != self.key || self.diag.len() != x.ncols() {
            self.key = key;
            self.diag = (0..x.ncols()).map(|j| x.column(j).norm_squared()).collect();
            self.gram = vec![None; x.ncols()];
        }
    }

    fn gram_column(&mut self, x: &DMatrix<f64>, j: usize) -> &[f64] {
        self.gram[j].get_or_insert_with(|| x.tr_mul(&x.column(j)).as_slice().into())
    }

    /// Coordinate descent with covariance updates and active-set cycling.
    /// `warm` seeds the iterate.
    pub fn solve(
        &mut self,
        x: &DMatrix<f64>,
        r: &DVector<f64>,
        sigma_e2: f64,
        cfg: &SelectorConfig,
        warm: Option<&[f64]>,
    ) -> Result<SelectorOutcome> {
        let p = x.ncols();
        if r.len() != x.nrows() {
            return Err(Error::Dimension(format!("response has {} rows, X has {}", r.len(), x.nrows())));
        }
        cfg.validate(p)?;
        if !(sigma_e2 > 0.0 && sigma_e2.is_finite()) {
            return Err(Error::Config(format!("sigma_e2 must be positive, got {sigma_e2}")));
        }
        self.bind(x);
        let w = cfg.effective_weights();
        let scale = cfg.lambda * sigma_e2 / 2.0;
        let thresh: Vec<f64> = w.iter().map(|wj| scale * wj).collect();

        let mut beta = match warm {
            Some(b) if b.len() == p => b.to_vec(),
            Some(b) => return Err(Error::Dimension(format!("warm start has {} entries, expected {p}", b.len()))),
            None => vec![0.0; p],
        };
        for j in 0..p {
            if self.diag[j] == 0.0 {
                beta[j] = 0.0;
            }
        }
        // c = X'(r - X beta)
        let mut c = self.exact_correlation(x, r, &beta);

        let tol = cfg.cd_tol;
        let mut passes = 0usize;
        let mut last_change;
        loop {
            // full sweep
            let all: Vec<usize> = (0..p).collect();
            last_change = self.sweep(x, &all, &mut beta, &mut c, &thresh);
            passes += 1;
            // cycle the active set to convergence
            while last_change > 0.1 * tol && passes < cfg.cd_max_pass {
                let active: Vec<usize> = (0..p).filter(|&j| beta[j] != 0.0).collect();
                last_change = self.sweep(x, &active, &mut beta, &mut c, &thresh);
                passes += 1;
            }
            if passes >= cfg.cd_max_pass {
                break;
            }
            // converged on the current active set: later sweeps rarely shrink
            // a support this far past the cap, so stop paying for them
            if let Some(cap) = cfg.max_support {
                let size = beta.iter().filter(|b| **b != 0.0).count();
                if size > cap {
                    return Err(Error::SupportCap { size, cap });
                }
            }
            // refresh against accumulated drift before judging optimality
            c = self.exact_correlation(x, r, &beta);
            if self.kkt_residual(&beta, &c, &thresh) <= tol {
                let objective = objective(x, r, &beta, sigma_e2, cfg);
                return Ok(SelectorOutcome::from_beta(beta, objective));
            }
        }
        let objective = objective(x, r, &beta, sigma_e2, cfg);
        Err(Error::NonConvergence {
            passes,
            max_change: last_change,
            last: Box::new(SelectorOutcome::from_beta(beta, objective)),
        })
    }

    fn exact_correlation(&self, x: &DMatrix<f64>, r: &DVector<f64>, beta: &[f64]) -> Vec<f64> {
        let mut resid = r.clone();
        for (j, &b) in beta.iter().enumerate() {
            if b != 0.0 {
                resid.axpy(-b, &x.column(j), 1.0);
            }
        }
        x.tr_mul(&resid).as_slice().to_vec()
    }

    fn sweep(
        &mut self,
        x: &DMatrix<f64>,
        coords: &[usize],
        beta: &mut [f64],
        c: &mut [f64],
        thresh: &[f64],
    ) -> f64 {
        let mut max_change = 0.0_f64;
        for &j in coords {
            let d = self.diag[j];
            if d == 0.0 {
                continue;
            }
            let old = beta[j];
            let z = c[j] + d * old;
            let new = soft_threshold(z, thresh[j]) / d;
            let delta = new - old;
            if delta != 0.0 {
                let g = self.gram_column(x, j);
                for (ci, gi) in c.iter_mut().zip(g) {
                    *ci -= delta * gi;
                }
                beta[j] = new;
                max_change = max_change.max(delta.abs());
            }
        }
        max_change
    }

    /// Largest KKT violation, expressed in coefficient units (divided by `|X_j|^2`).
    fn kkt_residual(&self, beta: &[f64], c: &[f64], thresh: &[f64]) -> f64 {
        let mut worst = 0.0_f64;
        for j in 0..beta.len() {
            let d = self.diag[j];
            if d == 0.0 {
                continue;
            }
            let v = if thresh[j] == 0.0 {
                c[j].abs()
            } else if beta[j] != 0.0 {
                (c[j] - thresh[j] * beta[j].signum()).abs()
            } else {
                (c[j].abs() - thresh[j]).max(0.0)
            };
            worst = worst.max(v / d);
        }
        worst
    }
}

pub fn objective(x: &DMatrix<f64>, r: &DVector<f64>, beta: &[f64], sigma_e2: f64, cfg: &SelectorConfig) -> f64 {
    let fitted = x * DVector::from_column_slice(beta);
    (r - fitted).norm_squared() + sigma_e2 * cfg.penalty(beta)
}

/// Weighted Lasso by coordinate descent, started from zero.
pub fn lasso_cd(x: &DMatrix<f64>, r: &DVector<f64>, sigma_e2: f64, cfg: &SelectorConfig) -> Result<SelectorOutcome> {
    LassoWorkspace::default().solve(x, r, sigma_e2, cfg, None)
}

/// KKT violation of `beta` for the weighted Lasso, in gradient units:
/// `|2 X_j'(r - X b) - lambda sigma_e2 w_j sign(b_j)|` for nonzero `b_j`,
/// the excess of `|2 X_j'(r - X b)|` over `lambda sigma_e2 w_j` otherwise.
pub fn kkt_violation(x: &DMatrix<f64>, r: &DVector<f64>, beta: &[f64], sigma_e2: f64, cfg: &SelectorConfig) -> Vec<f64> {
    let resid = r - x * DVector::from_column_slice(beta);
    let grad = x.tr_mul(&resid) * 2.0;
    let w = cfg.effective_weights();
    (0..beta.len())
        .map(|j| {
            let t = cfg.lambda * sigma_e2 * w[j];
            if t == 0.0 {
                grad[j].abs()
            } else if beta[j] != 0.0 {
                (grad[j] - t * beta[j].signum()).abs()
            } else {
                (grad[j].abs() - t).max(0.0)
            }
        })
        .collect()
}

/// Univariate-OLS adaptive Lasso weights `1/|X_i'y / X_i'X_i|`.
pub fn adaptive_weights(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<Vec<f64>> {
    (0..x.ncols())
        .map(|j| {
            let col = x.column(j);
            let xx = col.norm_squared();
            if xx == 0.0 {
                return Err(Error::DegenerateColumn {
                    column: j,
                    reason: "all-zero column has no univariate OLS estimate",
                });
            }
            let b = col.dot(y) / xx;
            let w = 1.0 / b.abs();
            Ok(if w.is_finite() { w.min(WEIGHT_CAP) } else { WEIGHT_CAP })
        })
        .collect()
}

/// Variable-selection step of the ECM loop. Implementations receive the
/// working response `y - Z u` and return a new coefficient vector.
///
/// Monotone descent of the ECM objective only holds for selectors that
/// minimize the weighted-Lasso criterion; that is the caller's concern.
pub trait Selector: Send {
    fn name(&self) -> &str;

    /// Called once with the full data before iterating. May set weights.
    fn prepare(&mut self, _x: &DMatrix<f64>, _y: &DVector<f64>, _cfg: &mut SelectorConfig) -> Result<()> {
        Ok(())
    }

    fn select(
        &mut self,
        x: &DMatrix<f64>,
        r: &DVector<f64>,
        sigma_e2: f64,
        cfg: &SelectorConfig,
        warm: Option<&[f64]>,
    ) -> Result<SelectorOutcome>;
}

#[derive(Debug, Default)]
pub struct LassoSelector {
    workspace: LassoWorkspace,
}

impl Selector for LassoSelector {
    fn name(&self) -> &str {
        "lasso"
    }

    fn select(
        &mut self,
        x: &DMatrix<f64>,
        r: &DVector<f64>,
        sigma_e2: f64,
        cfg: &SelectorConfig,
        warm: Option<&[f64]>,
    ) -> Result<SelectorOutcome> {
        self.workspace.solve(x, r, sigma_e2, cfg, warm)
    }
}

#[derive(Debug, Default)]
pub struct AdaptiveLassoSelector {
    workspace: LassoWorkspace,
}

impl Selector for AdaptiveLassoSelector {
    fn name(&self) -> &str {
        "adlasso"
    }

    fn prepare(&mut self, x: &DMatrix<f64>, y: &DVector<f64>, cfg: &mut SelectorConfig) -> Result<()> {
        cfg.weights = adaptive_weights(x, y)?;
        Ok(())
    }

    fn select(
        &mut self,
        x: &DMatrix<f64>,
        r: &DVector<f64>,
        sigma_e2: f64,
        cfg: &SelectorConfig,
        warm: Option<&[f64]>,
    ) -> Result<SelectorOutcome> {
        self.workspace.solve(x, r, sigma_e2, cfg, warm)
    }
}

/// Returns the incoming coefficients unchanged. Turns the ECM loop into a
/// pure variance-component EM at fixed beta.
#[derive(Debug, Default)]
pub struct FixedSelector;

impl Selector for FixedSelector {
    fn name(&self) -> &str {
        "fixed"
    }

    fn select(
        &mut self,
        x: &DMatrix<f64>,
        r: &DVector<f64>,
        sigma_e2: f64,
        cfg: &SelectorConfig,
        warm: Option<&[f64]>,
    ) -> Result<SelectorOutcome> {
        let beta = warm.map_or_else(|| vec![0.0; x.ncols()], <[f64]>::to_vec);
        let obj = objective(x, r, &beta, sigma_e2, cfg);
        Ok(SelectorOutcome::from_beta(beta, obj))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SelectorKind {
    #[default]
    Lasso,
    #[serde(rename = "adlasso")]
    AdaptiveLasso,
}

impl SelectorKind {
    pub fn name(self) -> &'static str {
        match self {
            SelectorKind::Lasso => "lasso",
            SelectorKind::AdaptiveLasso => "adlasso",
        }
    }

    pub fn build(self) -> Box<dyn Selector> {
        match self {
            SelectorKind::Lasso => Box::new(LassoSelector::default()),
            SelectorKind::AdaptiveLasso => Box::new(AdaptiveLassoSelector::default()),
        }
    }
}

impl std::str::FromStr for SelectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lasso" => Ok(SelectorKind::Lasso),
            "adlasso" => Ok(SelectorKind::AdaptiveLasso),
            other => Err(Error::Config(format!("unknown selector '{other}' (expected lasso or adlasso)"))),
        }
    }
}

/// Looks up a bundled selector by its registered name.
pub fn selector_by_name(name: &str) -> Result<Box<dyn Selector>> {
    Ok(name.parse::<SelectorKind>()?.build())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn soft_threshold_values() {
        assert_eq!(soft_threshold(1.0, 0.5), 0.5);
        assert_eq!(soft_threshold(-0.3, 0.5), 0.0);
        assert_eq!(soft_threshold(2.0, 1.0), 1.0);
        assert_eq!(soft_threshold(-2.0, 1.0), -1.0);
    }

    #[test]
    fn orthonormal_single_column() {
        // X'X = 1, X'r = 1, lambda * sigma_e2 = 1
        let x = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let r = DVector::from_column_slice(&[1.0, 5.0]);
        let cfg = SelectorConfig::new(1.0, 1);
        let out = lasso_cd(&x, &r, 1.0, &cfg).unwrap();
        assert!((out.beta[0] - 0.5).abs() < 1e-12);
        assert_eq!(out.support, vec![0]);
    }

    #[test]
    fn zero_penalty_is_least_squares() {
        let x = DMatrix::from_fn(12, 3, |i, j| ((i * (j + 2)) % 7) as f64 + if i == j { 1.0 } else { 0.0 });
        let r = DVector::from_fn(12, |i, _| (i as f64).sin() * 3.0);
        let mut cfg = SelectorConfig::new(0.0, 3);
        cfg.cd_tol = 1e-10;
        let out = lasso_cd(&x, &r, 1.0, &cfg).unwrap();
        let ols = (x.transpose() * &x).cholesky().unwrap().solve(&x.tr_mul(&r));
        for j in 0..3 {
            assert!((out.beta[j] - ols[j]).abs() < 1e-6);
        }
    }

    #[test]
    fn unpenalized_coefficient_survives_large_lambda() {
        let x = DMatrix::from_fn(10, 2, |i, j| if j == 0 { 1.0 } else { i as f64 - 4.5 });
        let r = DVector::from_fn(10, |i, _| 3.0 + 0.1 * i as f64);
        let mut cfg = SelectorConfig::new(1e6, 2);
        cfg.unpenalized.insert(0);
        let out = lasso_cd(&x, &r, 1.0, &cfg).unwrap();
        assert!((out.beta[0] - r.mean()).abs() < 1e-9);
        assert_eq!(out.beta[1], 0.0);
    }

    #[test]
    fn non_convergence_carries_last_iterate() {
        let x = DMatrix::from_fn(10, 4, |i, j| ((i + 1) * (j + 1)) as f64 + (i as f64 * 0.1).cos());
        let r = DVector::from_fn(10, |i, _| i as f64);
        let mut cfg = SelectorConfig::new(0.0, 4);
        cfg.cd_max_pass = 1;
        cfg.cd_tol = 1e-14;
        match lasso_cd(&x, &r, 1.0, &cfg) {
            Err(Error::NonConvergence { last, .. }) => assert_eq!(last.beta.len(), 4),
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn adaptive_weight_examples() {
        let x = DMatrix::identity(4, 4);
        let y = DVector::from_column_slice(&[1.0, 2.0, 3.0, 4.0]);
        let w = adaptive_weights(&x, &y).unwrap();
        for (j, wj) in w.iter().enumerate() {
            assert!((wj - 1.0 / (j as f64 + 1.0)).abs() < 1e-15);
        }
        let x = DMatrix::from_column_slice(2, 2, &[1.0, 0.0, 1.0, -1.0]);
        let y = DVector::from_column_slice(&[2.0, 2.0]);
        let w = adaptive_weights(&x, &y).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-15);
        assert_eq!(w[1], WEIGHT_CAP);
        let z = DMatrix::zeros(2, 1);
        assert!(adaptive_weights(&z, &y).is_err());
    }

    #[test]
    fn fixed_selector_returns_warm_start() {
        let x = DMatrix::identity(3, 3);
        let r = DVector::from_column_slice(&[1.0, 2.0, 3.0]);
        let cfg = SelectorConfig::new(1.0, 3);
        let warm = [0.5, 0.0, -1.0];
        let out = FixedSelector.select(&x, &r, 1.0, &cfg, Some(&warm)).unwrap();
        assert_eq!(out.beta, warm.to_vec());
        assert_eq!(out.support, vec![0, 2]);
    }

    #[test]
    fn registry_names() {
        assert_eq!(selector_by_name("lasso").unwrap().name(), "lasso");
        assert_eq!(selector_by_name("adlasso").unwrap().name(), "adlasso");
        assert!(selector_by_name("procbol").is_err());
    }

    #[test]
    fn rejects_invalid_config() {
        let x = DMatrix::identity(2, 2);
        let r = DVector::zeros(2);
        let mut cfg = SelectorConfig::new(-1.0, 2);
        assert!(lasso_cd(&x, &r, 1.0, &cfg).is_err());
        cfg.lambda = 1.0;
        cfg.weights = vec![1.0, f64::NAN];
        assert!(lasso_cd(&x, &r, 1.0, &cfg).is_err());
    }
}
