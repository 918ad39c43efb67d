//! Synthetic benchmark scenarios M1-M4 and their scorecard.
//!
//! Random numbers come from ChaCha8 seeded with `seed_from_u64(base_seed)`;
//! replicate `r` uses stream `r`, so replicates are independent of each other
//! and of the number of worker threads.

use std::collections::BTreeSet;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ecm::{refit, FitResult};
use crate::error::{Error, Result};
use crate::model::{Covariate, GroupingFactor, MixedModelData, RandomEffectSpec};
use crate::penalized_ls::SelectorKind;
use crate::tuning::{tune_default_grid, TuneConfig};

/// Stream reserved for draws shared by all replicates.
const SHARED_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelName {
    M1,
    M2,
    M3,
    M4,
}

impl std::str::FromStr for ModelName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "M1" => Ok(ModelName::M1),
            "M2" => Ok(ModelName::M2),
            "M3" => Ok(ModelName::M3),
            "M4" => Ok(ModelName::M4),
            _ => Err(Error::Config(format!("unknown model '{s}' (expected M1, M2, M3 or M4)"))),
        }
    }
}

impl fmt::Display for ModelName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationScenario {
    pub name: ModelName,
    pub n: usize,
    pub p: usize,
    pub beta_value: f64,
    /// AR(1) correlation between neighbouring columns (M2).
    pub rho: Option<f64>,
    /// `(levels, observations per level)` for each true random effect.
    pub factors: Vec<(usize, usize)>,
    /// Number of random effects in the fitted model; extra ones are spurious
    /// slopes on the next columns of X, sharing the last factor.
    pub fitted_q: usize,
    /// M2: draw the three random support indices once instead of per replicate.
    pub fixed_support: bool,
}

impl SimulationScenario {
    pub fn new(name: ModelName) -> Self {
        let same = vec![(20, 6), (20, 6)];
        let (p, beta_value, rho, factors, fitted_q) = match name {
            ModelName::M1 => (80, 2.0 / 3.0, None, same, 3),
            ModelName::M2 => (300, 0.75, Some(0.5), same, 2),
            ModelName::M3 => (300, 2.0 / 3.0, None, vec![(20, 6), (15, 8)], 2),
            ModelName::M4 => (600, 2.0 / 3.0, None, same, 2),
        };
        SimulationScenario {
            name,
            n: 120,
            p,
            beta_value,
            rho,
            factors,
            fitted_q,
            fixed_support: false,
        }
    }

    pub fn true_q(&self) -> usize {
        self.factors.len()
    }

    fn validate(&self) -> Result<()> {
        if self.factors.is_empty() || self.factors.iter().any(|&(l, m)| l * m != self.n) {
            return Err(Error::Config("every factor must partition all n observations".into()));
        }
        if self.fitted_q < self.true_q() || self.fitted_q > self.p || self.p < 5 {
            return Err(Error::Config("inconsistent scenario dimensions".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub beta: Vec<f64>,
    /// Sorted true support `J`.
    pub support: Vec<usize>,
    /// Indices of the random effects with nonzero variance.
    pub effects: Vec<usize>,
    pub u: Vec<Vec<f64>>,
    pub epsilon: Vec<f64>,
    /// `X beta`.
    pub signal: Vec<f64>,
    /// `sum_k Z_k u_k + epsilon`.
    pub noise: Vec<f64>,
    pub snr: f64,
}

pub fn replicate_rng(base_seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    rng.set_stream(stream);
    rng
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn draw_design(s: &SimulationScenario, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let mut x = DMatrix::zeros(s.n, s.p);
    for i in 0..s.n {
        x[(i, 0)] = 1.0;
        match s.rho {
            None => {
                for j in 1..s.p {
                    x[(i, j)] = normal(rng);
                }
            }
            Some(rho) => {
                // stationary AR(1) across columns: corr(x_j, x_k) = rho^|j-k|
                let c = (1.0 - rho * rho).sqrt();
                let mut prev = normal(rng);
                x[(i, 1)] = prev;
                for j in 2..s.p {
                    prev = rho * prev + c * normal(rng);
                    x[(i, j)] = prev;
                }
            }
        }
    }
    let n = s.n as f64;
    for j in 1..s.p {
        let mut col = x.column_mut(j);
        let mean = col.sum() / n;
        col.add_scalar_mut(-mean);
        let scale = (col.norm_squared() / n).sqrt();
        col /= scale;
    }
    x
}

fn draw_support(s: &SimulationScenario, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match s.name {
        ModelName::M2 => {
            let mut j: Vec<usize> = sample(rng, s.p - 2, 3).into_iter().map(|i| i + 2).collect();
            j.extend([0, 1]);
            j.sort_unstable();
            j
        }
        _ => (0..5).collect(),
    }
}

/// Draws one replicate. The design, support (M2), random effects and errors
/// all come from stream `replicate` of `base_seed`.
pub fn generate(s: &SimulationScenario, base_seed: u64, replicate: u64) -> Result<(MixedModelData, GroundTruth)> {
    s.validate()?;
    let mut rng = replicate_rng(base_seed, replicate);
    let x = draw_design(s, &mut rng);
    let support = if s.name == ModelName::M2 && s.fixed_support {
        draw_support(s, &mut replicate_rng(base_seed, SHARED_STREAM))
    } else {
        draw_support(s, &mut rng)
    };
    let mut beta = vec![0.0; s.p];
    for &j in &support {
        beta[j] = s.beta_value;
    }

    let factor_of = |k: usize| {
        let (levels, per) = s.factors[k.min(s.factors.len() - 1)];
        GroupingFactor::contiguous_blocks(levels, per)
    };
    let mut specs = Vec::with_capacity(s.fitted_q);
    for k in 0..s.fitted_q {
        let cov = if k == 0 { Covariate::None } else { Covariate::Column(k) };
        specs.push(RandomEffectSpec {
            name: format!("u{}", k + 1),
            factor: factor_of(k)?,
            covariate: cov,
            relationship: None,
        });
    }

    let signal = &x * DVector::from_column_slice(&beta);
    let mut noise = DVector::zeros(s.n);
    let mut u = Vec::with_capacity(s.true_q());
    // incidence values: level indicator times the generating column
    for k in 0..s.true_q() {
        let f = factor_of(k)?;
        let uk: Vec<f64> = (0..f.level_count()).map(|_| normal(&mut rng)).collect();
        for i in 0..s.n {
            noise[i] += x[(i, k)] * uk[f.assignment()[i]];
        }
        u.push(uk);
    }
    let epsilon: Vec<f64> = (0..s.n).map(|_| normal(&mut rng)).collect();
    for i in 0..s.n {
        noise[i] += epsilon[i];
    }
    let y = &signal + &noise;
    let snr = signal.norm_squared() / noise.norm_squared();

    let data = MixedModelData::new(y, x, None, specs, BTreeSet::from([0]))?;
    Ok((
        data,
        GroundTruth {
            beta,
            support,
            effects: (0..s.true_q()).collect(),
            u,
            epsilon,
            signal: signal.as_slice().to_vec(),
            noise: noise.as_slice().to_vec(),
            snr,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    /// `J-hat = J` and the surviving effects are exactly the true ones.
    pub truth: bool,
    pub support_exact: bool,
    pub support_size: usize,
    pub tp: usize,
    pub sigma2_e_hat: f64,
    /// One entry per fitted effect; deleted effects report 0.
    pub sigma2_k_hat: Vec<f64>,
    /// Estimates on the true support, in the order of `J`.
    pub beta_hat_j: Vec<f64>,
    pub mse: f64,
    pub snr: f64,
    pub false_deletion: bool,
    pub deleted: Vec<usize>,
    pub lambda: f64,
}

pub fn evaluate(data: &MixedModelData, fit: &FitResult, truth: &GroundTruth) -> SimulationReport {
    let jset: BTreeSet<usize> = truth.support.iter().copied().collect();
    let tp = fit.support.iter().filter(|j| jset.contains(j)).count();
    let support_exact = fit.support == truth.support;
    let active: Vec<usize> = fit.state.active.clone();
    let truth_flag = support_exact && active == truth.effects;
    let fitted = data.x() * DVector::from_column_slice(&fit.state.beta);
    let mse = (DVector::from_column_slice(&truth.signal) - fitted).norm_squared() / data.n() as f64;
    SimulationReport {
        truth: truth_flag,
        support_exact,
        support_size: fit.support.len(),
        tp,
        sigma2_e_hat: fit.state.sigma2_e,
        sigma2_k_hat: (0..data.q()).map(|k| fit.state.sigma2_of(k)).collect(),
        beta_hat_j: truth.support.iter().map(|&j| fit.state.beta[j]).collect(),
        mse,
        snr: truth.snr,
        false_deletion: truth.effects.iter().any(|k| !active.contains(k)),
        deleted: (0..data.q()).filter(|k| !active.contains(k)).collect(),
        lambda: fit.lambda,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "lasso")]
    Lasso,
    #[serde(rename = "adlasso")]
    AdLasso,
    #[serde(rename = "lasso+")]
    LassoPlus,
    #[serde(rename = "adlasso+")]
    AdLassoPlus,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Lasso => "lasso",
            Method::AdLasso => "adlasso",
            Method::LassoPlus => "lasso+",
            Method::AdLassoPlus => "adlasso+",
        }
    }

    pub fn selector(self) -> SelectorKind {
        match self {
            Method::Lasso | Method::LassoPlus => SelectorKind::Lasso,
            Method::AdLasso | Method::AdLassoPlus => SelectorKind::AdaptiveLasso,
        }
    }

    pub fn mixed(self) -> bool {
        matches!(self, Method::LassoPlus | Method::AdLassoPlus)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lasso" => Ok(Method::Lasso),
            "adlasso" => Ok(Method::AdLasso),
            "lasso+" => Ok(Method::LassoPlus),
            "adlasso+" => Ok(Method::AdLassoPlus),
            other => Err(Error::Config(format!(
                "unsupported method '{other}' (expected lasso, adlasso, lasso+ or adlasso+)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyOptions {
    pub refit: bool,
    pub threads: Option<usize>,
    pub tune: TuneConfig,
}

impl Default for StudyOptions {
    fn default() -> Self {
        StudyOptions {
            refit: false,
            threads: None,
            tune: TuneConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    pub replicate: u64,
    pub report: Option<SimulationReport>,
    pub error: Option<String>,
    pub refit: Option<SimulationReport>,
    pub refit_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub metric: String,
    pub mean: f64,
    /// Sample standard deviation; absent with fewer than two values.
    pub sd: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub label: String,
    pub replicates: usize,
    pub failures: usize,
    pub metrics: Vec<Summary>,
}

impl Aggregate {
    pub fn get(&self, metric: &str) -> Option<&Summary> {
        self.metrics.iter().find(|m| m.metric == metric)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub scenario: SimulationScenario,
    pub method: Method,
    pub base_seed: u64,
    pub replicates: Vec<ReplicateOutcome>,
    pub aggregate: Aggregate,
    pub refit_aggregate: Option<Aggregate>,
}

fn run_replicate(s: &SimulationScenario, method: Method, base_seed: u64, rep: u64, opts: &StudyOptions) -> ReplicateOutcome {
    let mut out = ReplicateOutcome {
        replicate: rep,
        report: None,
        error: None,
        refit: None,
        refit_error: None,
    };
    let (data, truth) = match generate(s, base_seed, rep) {
        Ok(v) => v,
        Err(e) => {
            out.error = Some(e.to_string());
            return out;
        }
    };
    let data = if method.mixed() { data } else { data.without_effects() };
    let mut tcfg = opts.tune.clone();
    tcfg.ecm.selector = method.selector();
    // replicates already run in parallel
    tcfg.cold_start = false;
    let tuned = match tune_default_grid(&data, &tcfg) {
        Ok(t) => t,
        Err(e) => {
            out.error = Some(format!("{}: {e}", e.kind()));
            return out;
        }
    };
    out.report = Some(evaluate(&data, &tuned.chosen, &truth));
    if opts.refit {
        match refit(&data, &tuned.chosen.support, &tuned.chosen.state.active) {
            Ok(f) => out.refit = Some(evaluate(&data, &f, &truth)),
            Err(e) => out.refit_error = Some(format!("{}: {e}", e.kind())),
        }
    }
    out
}

fn summarize(metric: String, values: &[f64]) -> Summary {
    let count = values.len();
    let mean = if count == 0 {
        f64::NAN
    } else {
        values.iter().sum::<f64>() / count as f64
    };
    let sd = (count >= 2).then(|| {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (count - 1) as f64).sqrt()
    });
    Summary { metric, mean, sd, count }
}

fn flag(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Column set of the aggregate table, in order.
pub fn metric_names(s: &SimulationScenario, q: usize) -> Vec<String> {
    let mut names: Vec<String> = ["truth", "support_exact", "support_size", "tp", "sigma2_e"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    names.extend((1..=q).map(|k| format!("sigma2_{k}")));
    names.extend((1..=5.min(s.p)).map(|i| format!("beta_j{i}")));
    names.extend(["mse", "snr", "false_deletion"].iter().map(|s| s.to_string()));
    names
}

/// Metric values in the order of [`metric_names`].
pub fn report_values(r: &SimulationReport) -> Vec<f64> {
    let mut v = vec![
        flag(r.truth),
        flag(r.support_exact),
        r.support_size as f64,
        r.tp as f64,
        r.sigma2_e_hat,
    ];
    v.extend(&r.sigma2_k_hat);
    v.extend(&r.beta_hat_j);
    v.extend([r.mse, r.snr, flag(r.false_deletion)]);
    v
}

pub fn aggregate(label: String, s: &SimulationScenario, q: usize, reports: &[Option<&SimulationReport>]) -> Aggregate {
    let names = metric_names(s, q);
    let ok: Vec<Vec<f64>> = reports.iter().flatten().map(|r| report_values(r)).collect();
    let metrics = names
        .into_iter()
        .enumerate()
        .map(|(i, name)| {
            let vals: Vec<f64> = ok.iter().filter_map(|v| v.get(i).copied()).collect();
            summarize(name, &vals)
        })
        .collect();
    Aggregate {
        label,
        replicates: reports.len(),
        failures: reports.iter().filter(|r| r.is_none()).count(),
        metrics,
    }
}

pub fn run_study(s: &SimulationScenario, reps: usize, method: Method, base_seed: u64, opts: &StudyOptions) -> Result<StudyResult> {
    if reps == 0 {
        return Err(Error::Config("reps must be >= 1".into()));
    }
    s.validate()?;
    let run = || {
        (0..reps as u64)
            .into_par_iter()
            .map(|r| run_replicate(s, method, base_seed, r, opts))
            .collect::<Vec<_>>()
    };
    let replicates = match opts.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(run),
        None => run(),
    };
    let q = if method.mixed() { s.fitted_q } else { 0 };
    let main: Vec<Option<&SimulationReport>> = replicates.iter().map(|r| r.report.as_ref()).collect();
    let aggregate = aggregate(method.name().to_string(), s, q, &main);
    let refit_aggregate = opts.refit.then(|| {
        let rf: Vec<Option<&SimulationReport>> = replicates.iter().map(|r| r.refit.as_ref()).collect();
        self::aggregate(format!("{} refit", method.name()), s, q, &rf)
    });
    Ok(StudyResult {
        scenario: s.clone(),
        method,
        base_seed,
        replicates,
        aggregate,
        refit_aggregate,
    })
}
