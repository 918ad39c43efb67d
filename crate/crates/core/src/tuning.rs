//! Penalty path construction and BIC-based choice of `lambda`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ecm::{fit_with, EcmConfig, FitResult, Start};
use crate::error::{Error, Result};
use crate::model::MixedModelData;
use crate::penalized_ls::{adaptive_weights, SelectorKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BicValue {
    pub lambda: f64,
    /// `log|V| + (y - X b)' V^{-1} (y - X b)`.
    pub loglik_part: f64,
    pub df: usize,
    pub bic: f64,
    pub ebic: f64,
    pub support_size: usize,
    pub sigma2_e: f64,
    pub degenerate: bool,
}

impl BicValue {
    fn degenerate(lambda: f64) -> Self {
        BicValue {
            lambda,
            loglik_part: f64::NAN,
            df: 0,
            bic: f64::NAN,
            ebic: f64::NAN,
            support_size: 0,
            sigma2_e: f64::NAN,
            degenerate: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    #[default]
    Bic,
    Ebic,
}

impl std::str::FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bic" => Ok(Criterion::Bic),
            "ebic" => Ok(Criterion::Ebic),
            other => Err(Error::Config(format!("unknown criterion '{other}' (expected bic or ebic)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneConfig {
    pub grid_size: usize,
    pub min_ratio: f64,
    pub criterion: Criterion,
    /// Fit every grid point from scratch, in parallel.
    pub cold_start: bool,
    /// Worker threads for cold-start mode; `None` uses the global pool.
    pub threads: Option<usize>,
    /// Path truncation when `sigma_e^2 < sigma_floor_ratio * var(y)`.
    pub sigma_floor_ratio: f64,
    /// Log-scale bisection steps between the last admissible grid point and
    /// the truncation point; admissible fits found there join the argmin.
    pub edge_refine: usize,
    pub ecm: EcmConfig,
}

impl Default for TuneConfig {
    fn default() -> Self {
        TuneConfig {
            grid_size: 50,
            min_ratio: 0.01,
            criterion: Criterion::Bic,
            cold_start: false,
            threads: None,
            sigma_floor_ratio: 1e-6,
            edge_refine: 8,
            ecm: EcmConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathEntry {
    pub value: BicValue,
    pub converged: bool,
    pub iterations: usize,
    /// Why the path was truncated here, if it was.
    pub reason: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChosenPoint {
    Grid(usize),
    Edge(usize),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TuningResult {
    pub criterion: Criterion,
    /// One entry per grid point, in grid order.
    pub path: Vec<PathEntry>,
    /// Admissible fits found by edge refinement, in bisection order.
    pub edge: Vec<PathEntry>,
    pub chosen_point: ChosenPoint,
    pub chosen_lambda: f64,
    pub chosen: FitResult,
}

/// Natural log of the binomial coefficient `C(p, k)`.
pub fn ln_choose(p: usize, k: usize) -> f64 {
    let k = k.min(p - k.min(p));
    (1..=k).map(|i| ((p - k + i) as f64 / i as f64).ln()).sum()
}

/// Information criteria for a fitted model. Deleted effects carry no variance
/// parameter; `sigma_e^2` always counts.
pub fn bic(data: &MixedModelData, fit: &FitResult) -> BicValue {
    let loglik_part = fit.log_det_v + fit.quad_form;
    let j = fit.support.len();
    let df = fit.state.active.len() + 1 + j;
    let bic = loglik_part + df as f64 * (data.n() as f64).ln();
    BicValue {
        lambda: fit.lambda,
        loglik_part,
        df,
        bic,
        ebic: bic + 2.0 * ln_choose(data.p(), j),
        support_size: j,
        sigma2_e: fit.state.sigma2_e,
        degenerate: false,
    }
}

/// Residual of `y` on the columns exempt at initialization.
fn unpenalized_residual(data: &MixedModelData, exempt: &[usize]) -> Result<DVector<f64>> {
    let y = data.y().clone();
    if exempt.is_empty() {
        return Ok(y);
    }
    let xu = DMatrix::from_fn(data.n(), exempt.len(), |i, c| data.x()[(i, exempt[c])]);
    let coef = xu
        .clone()
        .svd(true, true)
        .solve(&y, 1e-12)
        .map_err(|e| Error::numeric(format!("least squares on unpenalized columns: {e}"), f64::INFINITY))?;
    Ok(y - xu * coef)
}

/// Smallest penalty whose initialization step leaves every penalized
/// coefficient at zero: `2 max_j |X_j' r0| / w_j` over penalized columns.
pub fn lambda_max(data: &MixedModelData, selector: SelectorKind) -> Result<f64> {
    let all: Vec<usize> = (0..data.q()).collect();
    let mask = data.unpenalized_mask(&all);
    let exempt: Vec<usize> = (0..data.p()).filter(|&j| mask[j]).collect();
    if exempt.len() == data.p() {
        return Err(Error::Config("no penalized columns".into()));
    }
    let weights = match selector {
        SelectorKind::Lasso => vec![1.0; data.p()],
        SelectorKind::AdaptiveLasso => adaptive_weights(data.x(), data.y())?,
    };
    let r0 = unpenalized_residual(data, &exempt)?;
    let corr = data.x().tr_mul(&r0);
    let m = (0..data.p())
        .filter(|&j| !mask[j])
        .map(|j| 2.0 * corr[j].abs() / weights[j])
        .fold(0.0_f64, f64::max);
    if !(m > 0.0 && m.is_finite()) {
        return Err(Error::Config(format!("degenerate lambda_max {m}")));
    }
    Ok(m)
}

/// Log-spaced descending grid from `lambda_max` to `min_ratio * lambda_max`.
pub fn lambda_grid(data: &MixedModelData, count: usize, min_ratio: f64, selector: SelectorKind) -> Result<Vec<f64>> {
    if count < 2 {
        return Err(Error::Config("grid needs at least 2 points".into()));
    }
    if !(min_ratio > 0.0 && min_ratio < 1.0) {
        return Err(Error::Config(format!("min_ratio must lie in (0, 1), got {min_ratio}")));
    }
    Ok(log_grid(lambda_max(data, selector)?, count, min_ratio))
}

pub fn log_grid(top: f64, count: usize, min_ratio: f64) -> Vec<f64> {
    let step = min_ratio.ln() / (count - 1) as f64;
    (0..count)
        .map(|i| if i == 0 { top } else { top * (step * i as f64).exp() })
        .collect()
}

fn variance_of(y: &DVector<f64>) -> f64 {
    let m = y.mean();
    y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / y.len() as f64
}

/// Degeneracy check for one grid point; `Some(reason)` truncates the path.
fn truncation(fit: &Result<FitResult>, floor: f64) -> Option<String> {
    match fit {
        Err(e) => Some(format!("{}: {e}", e.kind())),
        Ok(f) if f.state.sigma2_e < floor => Some(format!("sigma_e^2 = {:e} below floor {floor:e}", f.state.sigma2_e)),
        Ok(_) => None,
    }
}

/// Fits along `grid` (descending) and picks the criterion minimizer among the
/// entries before the first degenerate point.
pub fn tune(data: &MixedModelData, grid: &[f64], cfg: &TuneConfig) -> Result<TuningResult> {
    if grid.is_empty() {
        return Err(Error::Config("empty lambda grid".into()));
    }
    if grid.windows(2).any(|w| !(w[0] > w[1])) {
        return Err(Error::Config("lambda grid must be strictly decreasing".into()));
    }
    let floor = cfg.sigma_floor_ratio * variance_of(data.y());
    let fit_at = |lambda: f64, start: Start| {
        let ecm = EcmConfig {
            lambda,
            ..cfg.ecm.clone()
        };
        fit_with(data, &ecm, ecm.selector.build(), start)
    };

    let mut fits: Vec<Option<FitResult>> = Vec::with_capacity(grid.len());
    let mut path = Vec::with_capacity(grid.len());
    let mut truncated = false;
    let mut absorb = |lambda: f64, res: Result<FitResult>, truncated: &mut bool| {
        if *truncated {
            path.push(PathEntry {
                value: BicValue::degenerate(lambda),
                converged: false,
                iterations: 0,
                reason: Some("after truncation".into()),
            });
            fits.push(None);
            return;
        }
        if let Some(reason) = truncation(&res, floor) {
            *truncated = true;
            path.push(PathEntry {
                value: BicValue::degenerate(lambda),
                converged: false,
                iterations: res.as_ref().map_or(0, |f| f.iterations),
                reason: Some(reason),
            });
            fits.push(None);
            return;
        }
        let f = res.expect("checked above");
        path.push(PathEntry {
            value: bic(data, &f),
            converged: f.converged,
            iterations: f.iterations,
            reason: None,
        });
        fits.push(Some(f));
    };

    if cfg.cold_start {
        let run = || grid.par_iter().map(|&l| fit_at(l, Start::Default)).collect::<Vec<_>>();
        let results = match cfg.threads {
            Some(t) => rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?
                .install(run),
            None => run(),
        };
        for (&l, r) in grid.iter().zip(results) {
            absorb(l, r, &mut truncated);
        }
    } else {
        let mut warm: Option<Vec<f64>> = None;
        for &l in grid {
            if truncated {
                absorb(l, Err(Error::Tuning("unreachable".into())), &mut truncated);
                continue;
            }
            let start = warm.clone().map_or(Start::Default, Start::Warm);
            let r = fit_at(l, start);
            if let Ok(f) = &r {
                warm = Some(f.state.beta.clone());
            }
            absorb(l, r, &mut truncated);
        }
    }

    let mut edge = Vec::new();
    let mut edge_fits = Vec::new();
    let first_bad = path.iter().position(|e| e.value.degenerate);
    if let Some(t) = first_bad.filter(|&t| t > 0 && cfg.edge_refine > 0) {
        let (mut hi, mut lo) = (grid[t - 1], grid[t]);
        let mut warm = fits[t - 1].as_ref().map(|f| f.state.beta.clone());
        for _ in 0..cfg.edge_refine {
            let mid = (hi * lo).sqrt();
            let res = fit_at(mid, warm.clone().map_or(Start::Default, Start::Warm));
            if truncation(&res, floor).is_some() {
                lo = mid;
                continue;
            }
            let f = res.expect("admissible fit");
            hi = mid;
            warm = Some(f.state.beta.clone());
            edge.push(PathEntry {
                value: bic(data, &f),
                converged: f.converged,
                iterations: f.iterations,
                reason: None,
            });
            edge_fits.push(f);
        }
    }

    let score = |v: &BicValue| match cfg.criterion {
        Criterion::Bic => v.bic,
        Criterion::Ebic => v.ebic,
    };
    let candidates = path
        .iter()
        .enumerate()
        .filter(|(_, e)| !e.value.degenerate)
        .map(|(i, e)| (ChosenPoint::Grid(i), e))
        .chain(edge.iter().enumerate().map(|(i, e)| (ChosenPoint::Edge(i), e)));
    let chosen_point = candidates
        .min_by(|a, b| score(&a.1.value).total_cmp(&score(&b.1.value)))
        .map(|(c, _)| c)
        .ok_or_else(|| Error::Tuning("every grid point is degenerate".into()))?;
    let chosen = match chosen_point {
        ChosenPoint::Grid(i) => fits[i].take(),
        ChosenPoint::Edge(i) => edge_fits.into_iter().nth(i),
    }
    .expect("admissible entry has a fit");
    Ok(TuningResult {
        criterion: cfg.criterion,
        chosen_lambda: chosen.lambda,
        path,
        edge,
        chosen_point,
        chosen,
    })
}

/// Builds the default grid for `data` and tunes over it.
pub fn tune_default_grid(data: &MixedModelData, cfg: &TuneConfig) -> Result<TuningResult> {
    let grid = lambda_grid(data, cfg.grid_size, cfg.min_ratio, cfg.ecm.selector)?;
    tune(data, &grid, cfg)
}
