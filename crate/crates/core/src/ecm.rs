//! Multicycle ECM estimation of the l1-penalized linear mixed model.
//!
//! Each iteration runs two E-steps (BLUP of `u`) interleaved with two
//! conditional maximizations: a penalized least-squares step for `beta` on the
//! working response `y - Z u`, then closed-form updates of the variance
//! components. Random effects whose predicted variance collapses are removed
//! from the model, and their source columns rejoin the penalized set.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::blup::{ActiveDesign, BlupResult, GammaMatrix, HendersonSystem};
use crate::error::{Error, Result};
use crate::linalg::{self, factor_probe};
use crate::model::MixedModelData;
use crate::penalized_ls::{support_of, LassoSelector, Selector, SelectorConfig, SelectorKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterState {
    pub beta: Vec<f64>,
    /// `sigma_k^2`, aligned with `active`.
    pub sigma2: Vec<f64>,
    pub sigma2_e: f64,
    /// Indices of the random effects still in the model, increasing.
    pub active: Vec<usize>,
}

impl ParameterState {
    pub fn gamma(&self) -> Result<GammaMatrix> {
        GammaMatrix::from_variances(&self.sigma2, self.sigma2_e)
    }

    pub fn validate(&self, data: &MixedModelData) -> Result<()> {
        if self.beta.len() != data.p() {
            return Err(Error::Dimension(format!("beta has {} entries, p = {}", self.beta.len(), data.p())));
        }
        if self.sigma2.len() != self.active.len() {
            return Err(Error::Dimension("one variance per active effect required".into()));
        }
        if self.active.windows(2).any(|w| w[0] >= w[1]) || self.active.iter().any(|&k| k >= data.q()) {
            return Err(Error::Config("active effects must be increasing valid indices".into()));
        }
        if !(self.sigma2_e > 0.0 && self.sigma2_e.is_finite()) {
            return Err(Error::Config(format!("sigma_e^2 must be positive, got {}", self.sigma2_e)));
        }
        if let Some(s) = self.sigma2.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(Error::Config(format!("sigma_k^2 must be positive, got {s}")));
        }
        Ok(())
    }

    /// Variance of effect `k` (zero when deleted).
    pub fn sigma2_of(&self, k: usize) -> f64 {
        self.active
            .iter()
            .position(|&a| a == k)
            .map_or(0.0, |pos| self.sigma2[pos])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcmConfig {
    pub lambda: f64,
    pub selector: SelectorKind,
    pub cd_tol: f64,
    pub cd_max_pass: usize,
    pub tol_beta: f64,
    pub tol_u: f64,
    pub tol_loglik: f64,
    pub max_iter: usize,
    /// Effect `k` is deleted when `|u_k|^2 / N_k < delete_ratio * sigma_e^2`.
    pub delete_ratio: f64,
    pub allow_deletion: bool,
    /// Largest admissible `|J|`; `None` means `min(n - 1, p) - 1`, so the
    /// selected support stays strictly below `min(n - 1, p)`.
    pub support_cap: Option<usize>,
    /// When false the variance components stay at their starting values.
    pub update_variances: bool,
    /// Lower bound on the initial residual variance, relative to `var(y)`.
    pub init_floor_ratio: f64,
}

impl Default for EcmConfig {
    fn default() -> Self {
        EcmConfig {
            lambda: 1.0,
            selector: SelectorKind::Lasso,
            cd_tol: 1e-7,
            cd_max_pass: 100_000,
            tol_beta: 1e-6,
            tol_u: 1e-6,
            tol_loglik: 1e-8,
            max_iter: 5000,
            delete_ratio: 1e-4,
            allow_deletion: true,
            support_cap: None,
            update_variances: true,
            init_floor_ratio: 1e-8,
        }
    }
}

impl EcmConfig {
    pub fn with_lambda(lambda: f64) -> Self {
        EcmConfig {
            lambda,
            ..EcmConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("tol_beta", self.tol_beta),
            ("tol_u", self.tol_u),
            ("tol_loglik", self.tol_loglik),
            ("delete_ratio", self.delete_ratio),
            ("cd_tol", self.cd_tol),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be >= 1".into()));
        }
        Ok(())
    }

    pub fn cap_for(&self, data: &MixedModelData) -> usize {
        self.support_cap
            .unwrap_or_else(|| data.n().saturating_sub(1).min(data.p()).saturating_sub(1).max(1))
    }

    fn selector_config(&self, p: usize) -> SelectorConfig {
        let mut c = SelectorConfig::new(self.lambda, p);
        c.cd_tol = self.cd_tol;
        c.cd_max_pass = self.cd_max_pass;
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeletionEvent {
    pub effect: usize,
    pub name: String,
    pub iteration: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub iteration: usize,
    /// Penalized marginal objective at the state reached after this iteration.
    pub objective: f64,
    pub active: usize,
    /// True when effects were deleted during this iteration, so the objective
    /// is not comparable with the previous point.
    pub after_deletion: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub lambda: f64,
    pub selector: String,
    pub state: ParameterState,
    /// BLUP of the active random effects at the final state.
    pub blup: BlupResult,
    pub support: Vec<usize>,
    pub deleted: Vec<DeletionEvent>,
    pub trajectory: Vec<TrajectoryPoint>,
    pub converged: bool,
    pub stop_reason: StopReason,
    pub iterations: usize,
    /// Base penalty weights (before exemptions) used by the selector.
    pub penalty_weights: Vec<f64>,
    /// `log |V|` at the final state.
    pub log_det_v: f64,
    /// `(y - X b)' V^{-1} (y - X b)` at the final state.
    pub quad_form: f64,
    /// Final penalized marginal objective, including `n log(2 pi)`.
    pub objective: f64,
    /// Largest matrix dimension factorized inside the iteration loop.
    pub max_factor_dim: usize,
}

impl FitResult {
    pub fn support_size(&self) -> usize {
        self.support.len()
    }

    /// Per-effect BLUP blocks for the active effects.
    pub fn u_blocks(&self) -> Vec<&[f64]> {
        (0..self.state.active.len()).map(|i| self.blup.block(i)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    /// BLUP from the first E-step.
    pub u_half: Vec<f64>,
    pub support_size: usize,
    pub deleted: Vec<usize>,
    pub selector_objective: f64,
}

/// Marginal `-2 log` likelihood pieces computed on the `N x N` system:
/// `log|V| = (n - N) log s_e + sum_k N_k log s_k + sum_k log|A_k| + log|Z'Z + Gamma|`
/// and `r'V^{-1}r = (|r|^2 - r'Z (Z'Z + Gamma)^{-1} Z'r) / s_e`.
fn marginal_parts(
    data: &MixedModelData,
    design: &ActiveDesign,
    system: &HendersonSystem,
    state: &ParameterState,
) -> (f64, f64) {
    let n = data.n() as f64;
    let big_n = design.dim() as f64;
    let mut log_det = (n - big_n) * state.sigma2_e.ln() + system.log_det();
    for (&k, &s2) in state.active.iter().zip(&state.sigma2) {
        let eff = &data.effects()[k];
        log_det += eff.levels() as f64 * s2.ln();
        if let Some(rel) = &eff.spec.relationship {
            log_det += rel.log_det();
        }
    }
    let r = data.y() - data.x() * DVector::from_column_slice(&state.beta);
    let quad = if design.dim() == 0 {
        r.norm_squared()
    } else {
        let u = system.solve(design, &r).u;
        let ztr = design.z().tr_mul(&r);
        r.norm_squared() - ztr.dot(&u)
    } / state.sigma2_e;
    (log_det, quad)
}

fn penalty_value(data: &MixedModelData, state: &ParameterState, lambda: f64, weights: &[f64]) -> f64 {
    let mask = data.unpenalized_mask(&state.active);
    lambda
        * state
            .beta
            .iter()
            .zip(weights)
            .zip(&mask)
            .filter(|(_, &exempt)| !exempt)
            .map(|((b, w), _)| w * b.abs())
            .sum::<f64>()
}

/// `log|V| + (y - X b)' V^{-1} (y - X b) + lambda sum_j w_j |b_j| + n log(2 pi)`
/// evaluated without forming `V`. `weights` are base weights; coefficients
/// exempt under `state.active` are not penalized.
pub fn neg2_penalized_marginal(data: &MixedModelData, state: &ParameterState, lambda: f64, weights: &[f64]) -> Result<f64> {
    state.validate(data)?;
    if weights.len() != data.p() {
        return Err(Error::Dimension("one weight per column required".into()));
    }
    let design = ActiveDesign::new(data, &state.active);
    let system = HendersonSystem::factor(data, &design, &state.gamma()?)?;
    let (ld, quad) = marginal_parts(data, &design, &system, state);
    Ok(ld + quad + penalty_value(data, state, lambda, weights) + data.n() as f64 * (2.0 * PI).ln())
}

/// Complete-data log-likelihood `L(Phi; y, u)` for the active effects.
pub fn complete_loglik(data: &MixedModelData, state: &ParameterState, design: &ActiveDesign, u: &DVector<f64>) -> f64 {
    let n = data.n() as f64;
    let ln2pi = (2.0 * PI).ln();
    let e = data.y() - data.x() * DVector::from_column_slice(&state.beta) - design.z() * u;
    let mut neg2 = n * ln2pi + n * state.sigma2_e.ln() + e.norm_squared() / state.sigma2_e;
    for ((&k, &s2), block) in state.active.iter().zip(&state.sigma2).zip(design.blocks()) {
        let eff = &data.effects()[k];
        let nk = eff.levels() as f64;
        let mut term = nk * ln2pi + nk * s2.ln() + eff.quad_norm(&u.as_slice()[block.clone()]) / s2;
        if let Some(rel) = &eff.spec.relationship {
            term += rel.log_det();
        }
        neg2 += term;
    }
    -0.5 * neg2
}

/// Splits the linear-model residual variance `s`: `0.4 s / q` to each random
/// effect and `0.6 s` to the error (all of `s` when `q = 0`).
pub fn initial_variances(s: f64, q: usize) -> (Vec<f64>, f64) {
    if q == 0 {
        (Vec::new(), s)
    } else {
        (vec![0.4 / q as f64 * s; q], 0.6 * s)
    }
}

/// Deletion rule: `|u_k|^2 / N_k < ratio * sigma_e^2`.
pub fn should_delete(quad: f64, levels: f64, sigma2_e: f64, ratio: f64) -> bool {
    quad / levels < ratio * sigma2_e
}

fn variance_of(y: &DVector<f64>) -> f64 {
    let n = y.len() as f64;
    let m = y.mean();
    y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n
}

/// Stateful iteration engine: owns the selector, its configuration and the
/// cached design/factorization for the current active set.
pub struct EcmEngine<'a> {
    data: &'a MixedModelData,
    cfg: EcmConfig,
    selector: Box<dyn Selector + 'a>,
    sel_cfg: SelectorConfig,
    design: Arc<ActiveDesign>,
    system: Option<HendersonSystem>,
}

pub struct StepOutput {
    pub state: ParameterState,
    /// Second E-step BLUP, for the active set before deletion.
    pub blup: BlupResult,
    pub diagnostics: StepDiagnostics,
    /// Design of the active set the step started from.
    pub design: Arc<ActiveDesign>,
}

impl<'a> EcmEngine<'a> {
    pub fn new(data: &'a MixedModelData, cfg: EcmConfig, mut selector: Box<dyn Selector + 'a>) -> Result<Self> {
        cfg.validate()?;
        let mut sel_cfg = cfg.selector_config(data.p());
        sel_cfg.max_support = Some(cfg.cap_for(data));
        selector.prepare(data.x(), data.y(), &mut sel_cfg)?;
        let all: Vec<usize> = (0..data.q()).collect();
        Ok(EcmEngine {
            design: Arc::new(ActiveDesign::new(data, &all)),
            data,
            cfg,
            selector,
            sel_cfg,
            system: None,
        })
    }

    pub fn selector_config(&self) -> &SelectorConfig {
        &self.sel_cfg
    }

    /// Starting values: the selector on the plain linear model at the same
    /// penalty gives `beta^0` and `s = |y - X beta^0|^2 / n`; then
    /// `sigma_k^2 = 0.4 s / q` and `sigma_e^2 = 0.6 s`.
    pub fn initialize(&mut self, warm: Option<&[f64]>) -> Result<ParameterState> {
        let data = self.data;
        let q = data.q();
        let all: Vec<usize> = (0..q).collect();
        self.sel_cfg.unpenalized = exempt_set(data, &all);
        let out = self.selector.select(data.x(), data.y(), 1.0, &self.sel_cfg, warm)?;
        let cap = self.cfg.cap_for(data);
        if out.support.len() > cap {
            return Err(Error::SupportCap { size: out.support.len(), cap });
        }
        let resid = data.y() - data.x() * DVector::from_column_slice(&out.beta);
        let floor = (self.cfg.init_floor_ratio * variance_of(data.y())).max(f64::MIN_POSITIVE);
        let s = (resid.norm_squared() / data.n() as f64).max(floor);
        let (sigma2, sigma2_e) = initial_variances(s, q);
        Ok(ParameterState {
            beta: out.beta,
            sigma2,
            sigma2_e,
            active: all,
        })
    }

    fn ensure_design(&mut self, active: &[usize]) {
        if self.design.active() != active {
            self.design = Arc::new(ActiveDesign::new(self.data, active));
            self.system = None;
        }
    }

    fn system_for(&mut self, state: &ParameterState) -> Result<HendersonSystem> {
        self.ensure_design(&state.active);
        match self.system.take() {
            Some(s) => Ok(s),
            None => HendersonSystem::factor(self.data, &self.design, &state.gamma()?),
        }
    }

    /// One full ECM iteration from `state`.
    pub fn step(&mut self, state: &ParameterState) -> Result<StepOutput> {
        let data = self.data;
        let system = self.system_for(state)?;
        let design = Arc::clone(&self.design);
        let x = data.x();
        let y = data.y();
        let s_e = state.sigma2_e;

        // 1. E-step at beta^t
        let beta_t = DVector::from_column_slice(&state.beta);
        let u_half = system.solve(&design, &(y - x * &beta_t));

        // 2. CM-step for beta on the working response
        self.sel_cfg.unpenalized = exempt_set(data, &state.active);
        let working = y - design.z() * &u_half.u;
        let out = self.selector.select(x, &working, s_e, &self.sel_cfg, Some(&state.beta))?;
        let cap = self.cfg.cap_for(data);
        if out.support.len() > cap {
            return Err(Error::SupportCap { size: out.support.len(), cap });
        }
        let beta_new = DVector::from_column_slice(&out.beta);

        // 3. E-step at beta^{t+1}, same Gamma
        let resid_fixed = y - x * &beta_new;
        let blup = system.solve(&design, &resid_fixed);

        // 4. CM-step for the variances
        let gamma = state.gamma()?;
        let mut sigma2 = state.sigma2.clone();
        let mut quad = Vec::with_capacity(state.active.len());
        for (pos, &k) in state.active.iter().enumerate() {
            let eff = &data.effects()[k];
            let qk = eff.quad_norm(blup.block(pos));
            quad.push(qk);
            if self.cfg.update_variances {
                sigma2[pos] = (qk + blup.trace_t_ainv[pos] * s_e) / eff.levels() as f64;
            }
        }
        let sigma2_e = if self.cfg.update_variances {
            let e = &resid_fixed - design.z() * &blup.u;
            let correction: f64 = state
                .active
                .iter()
                .enumerate()
                .map(|(pos, &k)| data.effects()[k].levels() as f64 - gamma.ratios()[pos] * blup.trace_t_ainv[pos])
                .sum();
            (e.norm_squared() + correction * s_e) / data.n() as f64
        } else {
            s_e
        };

        let mut deleted = Vec::new();
        if self.cfg.allow_deletion {
            for (pos, &k) in state.active.iter().enumerate() {
                let nk = data.effects()[k].levels() as f64;
                if should_delete(quad[pos], nk, s_e, self.cfg.delete_ratio) {
                    deleted.push(k);
                }
            }
        }
        let (active, sigma2): (Vec<usize>, Vec<f64>) = state
            .active
            .iter()
            .zip(sigma2)
            .filter(|(k, _)| !deleted.contains(k))
            .map(|(k, s)| (*k, s))
            .unzip();

        let new_state = ParameterState {
            beta: out.beta,
            sigma2,
            sigma2_e,
            active,
        };
        Ok(StepOutput {
            state: new_state,
            blup,
            diagnostics: StepDiagnostics {
                u_half: u_half.u.as_slice().to_vec(),
                support_size: out.support.len(),
                deleted,
                selector_objective: out.objective,
            },
            design,
        })
    }

    /// Objective at `state`; caches the factorization for the next step.
    fn objective_at(&mut self, state: &ParameterState) -> Result<(f64, f64, f64)> {
        self.ensure_design(&state.active);
        let system = HendersonSystem::factor(self.data, &self.design, &state.gamma()?)?;
        let (ld, quad) = marginal_parts(self.data, &self.design, &system, state);
        self.system = Some(system);
        let pen = penalty_value(self.data, state, self.cfg.lambda, &self.sel_cfg.weights);
        Ok((ld, quad, ld + quad + pen + self.data.n() as f64 * (2.0 * PI).ln()))
    }

    /// Iterates from `start` until the stopping rules hold or `max_iter`.
    pub fn run(&mut self, start: ParameterState) -> Result<FitResult> {
        let data = self.data;
        start.validate(data)?;
        factor_probe::reset();

        let mut state = start;
        let (_, _, obj0) = self.objective_at(&state)?;
        let mut trajectory = vec![TrajectoryPoint {
            iteration: 0,
            objective: obj0,
            active: state.active.len(),
            after_deletion: false,
        }];
        // u^0 for the first stopping comparison
        let mut prev_u = {
            let system = self.system_for(&state)?;
            let r = data.y() - data.x() * DVector::from_column_slice(&state.beta);
            let u = system.solve(&self.design, &r).u;
            self.system = Some(system);
            u
        };
        let mut prev_design = Arc::clone(&self.design);
        let mut prev_loglik = complete_loglik(data, &state, &prev_design, &prev_u);
        let mut deleted_events = Vec::new();
        let mut converged = false;
        let mut iterations = 0;

        for t in 0..self.cfg.max_iter {
            let out = self.step(&state)?;
            iterations = t + 1;

            let d_beta: f64 = out
                .state
                .beta
                .iter()
                .zip(&state.beta)
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            let u_ok = state.active.iter().enumerate().all(|(pos, &k)| {
                let new = out.blup.block(pos);
                match prev_design.active().iter().position(|&a| a == k) {
                    Some(ppos) => {
                        let old = &prev_u.as_slice()[prev_design.blocks()[ppos].clone()];
                        new.iter().zip(old).map(|(a, b)| (a - b).powi(2)).sum::<f64>() < self.cfg.tol_u
                    }
                    None => false,
                }
            });
            // log-likelihood with the updated variances, before deletion
            let pre_delete = ParameterState {
                beta: out.state.beta.clone(),
                sigma2: state
                    .active
                    .iter()
                    .map(|&k| {
                        out.state
                            .active
                            .iter()
                            .position(|&a| a == k)
                            .map_or_else(|| fallback_sigma(&out, &state, k, data), |p| out.state.sigma2[p])
                    })
                    .collect(),
                sigma2_e: out.state.sigma2_e,
                active: state.active.clone(),
            };
            let loglik = complete_loglik(data, &pre_delete, &out.design, &out.blup.u);
            let d_loglik = (loglik - prev_loglik).powi(2);

            let had_deletion = !out.diagnostics.deleted.is_empty();
            for &k in &out.diagnostics.deleted {
                deleted_events.push(DeletionEvent {
                    effect: k,
                    name: data.effects()[k].spec.name.clone(),
                    iteration: iterations,
                });
            }

            prev_u = out.blup.u.clone();
            prev_design = Arc::clone(&out.design);
            prev_loglik = loglik;
            state = out.state;

            let (_, _, obj) = self.objective_at(&state)?;
            trajectory.push(TrajectoryPoint {
                iteration: iterations,
                objective: obj,
                active: state.active.len(),
                after_deletion: had_deletion,
            });

            if !had_deletion && d_beta < self.cfg.tol_beta && u_ok && d_loglik < self.cfg.tol_loglik {
                converged = true;
                break;
            }
        }
        let max_factor_dim = factor_probe::max_dim();

        let (log_det_v, quad_form, objective) = self.objective_at(&state)?;
        let system = self.system_for(&state)?;
        let r = data.y() - data.x() * DVector::from_column_slice(&state.beta);
        let blup = system.solve(&self.design, &r);
        self.system = Some(system);

        Ok(FitResult {
            lambda: self.cfg.lambda,
            selector: self.selector.name().to_string(),
            support: support_of(&state.beta),
            state,
            blup,
            deleted: deleted_events,
            trajectory,
            converged,
            stop_reason: if converged {
                StopReason::Converged
            } else {
                StopReason::MaxIterations
            },
            iterations,
            penalty_weights: self.sel_cfg.weights.clone(),
            log_det_v,
            quad_form,
            objective,
            max_factor_dim,
        })
    }
}

// The deleted effect's updated variance is not kept in the new state; recover
// it from the BLUP for the likelihood bookkeeping.
fn fallback_sigma(out: &StepOutput, prev: &ParameterState, k: usize, data: &MixedModelData) -> f64 {
    let pos = prev.active.iter().position(|&a| a == k).expect("effect was active");
    let eff = &data.effects()[k];
    let v = (eff.quad_norm(out.blup.block(pos)) + out.blup.trace_t_ainv[pos] * prev.sigma2_e) / eff.levels() as f64;
    v.max(f64::MIN_POSITIVE)
}

fn exempt_set(data: &MixedModelData, active: &[usize]) -> std::collections::BTreeSet<usize> {
    data.unpenalized_mask(active)
        .iter()
        .enumerate()
        .filter(|(_, e)| **e)
        .map(|(j, _)| j)
        .collect()
}

/// How to start a fit.
#[derive(Debug, Clone, Default)]
pub enum Start {
    /// Selector-based initialization at the configured penalty.
    #[default]
    Default,
    /// As `Default`, seeding the initial selector run with these coefficients.
    Warm(Vec<f64>),
    /// Explicit starting point.
    State(ParameterState),
}

pub fn initialize(data: &MixedModelData, cfg: &EcmConfig) -> Result<ParameterState> {
    EcmEngine::new(data, cfg.clone(), cfg.selector.build())?.initialize(None)
}

/// One ECM iteration with the configured bundled selector.
pub fn ecm_step(data: &MixedModelData, state: &ParameterState, cfg: &EcmConfig) -> Result<(ParameterState, BlupResult, StepDiagnostics)> {
    state.validate(data)?;
    let mut engine = EcmEngine::new(data, cfg.clone(), cfg.selector.build())?;
    let out = engine.step(state)?;
    Ok((out.state, out.blup, out.diagnostics))
}

pub fn fit(data: &MixedModelData, cfg: &EcmConfig) -> Result<FitResult> {
    fit_with(data, cfg, cfg.selector.build(), Start::Default)
}

/// Fit with an arbitrary selector plugin and starting point.
pub fn fit_with<'a>(
    data: &'a MixedModelData,
    cfg: &EcmConfig,
    selector: Box<dyn Selector + 'a>,
    start: Start,
) -> Result<FitResult> {
    let mut engine = EcmEngine::new(data, cfg.clone(), selector)?;
    let state = match start {
        Start::Default => engine.initialize(None)?,
        Start::Warm(b) => engine.initialize(Some(&b))?,
        Start::State(s) => s,
    };
    engine.run(state)
}

/// Unpenalized maximum-likelihood fit on a selected model: X restricted to
/// `support`, random effects restricted to `active`, no deletion. Returned
/// coefficients and indices refer to the original columns and effects.
pub fn refit(data: &MixedModelData, support: &[usize], active: &[usize]) -> Result<FitResult> {
    refit_with(data, support, active, &EcmConfig::default())
}

pub fn refit_with(data: &MixedModelData, support: &[usize], active: &[usize], base: &EcmConfig) -> Result<FitResult> {
    let levels = data.levels_of(active);
    if support.len() + levels >= data.n() {
        return Err(Error::Config(format!(
            "refit needs |J| + N < n, got {} + {levels} >= {}",
            support.len(),
            data.n()
        )));
    }
    let restricted = data.restrict(support, active)?;
    if !support.is_empty() {
        let xs = restricted.x();
        let gram = xs.tr_mul(xs);
        let scale = gram.diagonal().amax().max(1.0);
        let chol = linalg::cholesky(gram.clone(), "restricted X'X")
            .map_err(|_| Error::Rank(format!("columns {support:?} are linearly dependent")))?;
        let min_pivot = chol.l_dirty().diagonal().iter().fold(f64::INFINITY, |m, v| m.min(v * v));
        if min_pivot < 1e-10 * scale {
            return Err(Error::Rank(format!("columns {support:?} are numerically dependent")));
        }
    }
    let cfg = EcmConfig {
        lambda: 0.0,
        selector: SelectorKind::Lasso,
        allow_deletion: false,
        support_cap: Some(support.len()),
        ..base.clone()
    };
    let mut res = fit_with(&restricted, &cfg, Box::new(LassoSelector::default()), Start::Default)?;

    let mut beta = vec![0.0; data.p()];
    for (i, &j) in support.iter().enumerate() {
        beta[j] = res.state.beta[i];
    }
    let mut weights = vec![1.0; data.p()];
    for (i, &j) in support.iter().enumerate() {
        weights[j] = res.penalty_weights[i];
    }
    res.state.beta = beta;
    res.state.active = res.state.active.iter().map(|&k| active[k]).collect();
    for ev in &mut res.deleted {
        ev.effect = active[ev.effect];
    }
    res.support = support_of(&res.state.beta);
    res.penalty_weights = weights;
    Ok(res)
}

/// Fitted fixed part `X b`.
pub fn fixed_fit(x: &DMatrix<f64>, beta: &[f64]) -> DVector<f64> {
    x * DVector::from_column_slice(beta)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::model::{GroupingFactor, RandomEffectSpec};
    use crate::oracle;

    fn toy(seed: u64) -> MixedModelData {
        // deterministic pseudo-random data without an RNG dependency
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let mut next = move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        let n = 30;
        let p = 6;
        let x = DMatrix::from_fn(n, p, |_, j| if j == 0 { 1.0 } else { next() * 1.7 });
        let f1 = GroupingFactor::contiguous_blocks(6, 5).unwrap();
        let u: Vec<f64> = (0..6).map(|_| next() * 2.0).collect();
        let y = DVector::from_fn(n, |i, _| 1.0 + 2.0 * x[(i, 1)] + u[i / 5] + 0.5 * next());
        MixedModelData::new(y, x, None, vec![RandomEffectSpec::intercept("g", f1)], BTreeSet::from([0])).unwrap()
    }

    fn four_obs() -> MixedModelData {
        let f = GroupingFactor::from_one_based(&[1, 1, 2, 2]).unwrap();
        MixedModelData::new(
            DVector::from_column_slice(&[1.0, 1.0, 2.0, 2.0]),
            DMatrix::from_element(4, 1, 1.0),
            None,
            vec![RandomEffectSpec::intercept("g", f)],
            BTreeSet::new(),
        )
        .unwrap()
    }

    #[test]
    fn initial_variance_examples() {
        let (s, e) = initial_variances(1.5, 2);
        assert!((s[0] - 0.3).abs() < 1e-15 && (s[1] - 0.3).abs() < 1e-15);
        assert!((e - 0.9).abs() < 1e-15);
        let (s, e) = initial_variances(1.0, 1);
        assert!((s[0] - 0.4).abs() < 1e-15 && (e - 0.6).abs() < 1e-15);
    }

    #[test]
    fn deletion_threshold() {
        assert!(should_delete(2e-5, 2.0, 1.0, 1e-4));
        assert!(!should_delete(2e-4, 2.0, 1.0, 1e-4));
    }

    #[test]
    fn four_observation_variance_updates() {
        // beta held at 0 so u = (2/3, 4/3) and tr(T) = 2/3
        let data = four_obs();
        let cfg = EcmConfig::with_lambda(0.0);
        let mut engine = EcmEngine::new(&data, cfg, Box::new(crate::penalized_ls::FixedSelector)).unwrap();
        let st = ParameterState {
            beta: vec![0.0],
            sigma2: vec![1.0],
            sigma2_e: 1.0,
            active: vec![0],
        };
        let out = engine.step(&st).unwrap();
        assert!((out.blup.u[0] - 2.0 / 3.0).abs() < 1e-14);
        assert!((out.blup.u[1] - 4.0 / 3.0).abs() < 1e-14);
        assert!((out.state.sigma2[0] - 13.0 / 9.0).abs() < 1e-14);
        assert!((out.state.sigma2_e - 11.0 / 18.0).abs() < 1e-14);
        assert!(out.diagnostics.deleted.is_empty());
    }

    #[test]
    fn noiseless_start_is_floored() {
        let n = 12;
        let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { i as f64 });
        let y = DVector::from_fn(n, |i, _| 3.0 + 0.5 * i as f64);
        let f = GroupingFactor::contiguous_blocks(3, 4).unwrap();
        let data = MixedModelData::new(y, x, None, vec![RandomEffectSpec::intercept("g", f)], BTreeSet::from([0, 1])).unwrap();
        let cfg = EcmConfig {
            support_cap: Some(2),
            ..EcmConfig::with_lambda(0.0)
        };
        let st = initialize(&data, &cfg).unwrap();
        assert!(st.sigma2_e > 0.0 && st.sigma2[0] > 0.0);
        st.validate(&data).unwrap();
    }

    #[test]
    fn initialization_split() {
        let data = toy(3);
        let cfg = EcmConfig::with_lambda(2.0);
        let st = initialize(&data, &cfg).unwrap();
        let r = data.y() - data.x() * DVector::from_column_slice(&st.beta);
        let s = r.norm_squared() / data.n() as f64;
        assert!((st.sigma2[0] - 0.4 * s).abs() < 1e-12);
        assert!((st.sigma2_e - 0.6 * s).abs() < 1e-12);
    }

    #[test]
    fn objective_without_effects_is_linear_model_form() {
        let data = toy(5).without_effects();
        let st = ParameterState {
            beta: vec![0.5, 1.0, 0.0, -0.2, 0.0, 0.0],
            sigma2: vec![],
            sigma2_e: 1.7,
            active: vec![],
        };
        let w = vec![1.0; 6];
        let got = neg2_penalized_marginal(&data, &st, 3.0, &w).unwrap();
        let r = data.y() - data.x() * DVector::from_column_slice(&st.beta);
        let n = data.n() as f64;
        let want = n * 1.7f64.ln() + r.norm_squared() / 1.7 + 3.0 * (1.0 + 0.2) + n * (2.0 * PI).ln();
        assert!((got - want).abs() < 1e-10);
    }

    #[test]
    fn objective_matches_dense_route() {
        let data = toy(9);
        let st = ParameterState {
            beta: vec![1.0, 1.5, 0.0, 0.3, 0.0, 0.0],
            sigma2: vec![0.8],
            sigma2_e: 0.4,
            active: vec![0],
        };
        let w = vec![1.0; 6];
        let got = neg2_penalized_marginal(&data, &st, 2.0, &w).unwrap();
        let pen = 2.0 * (1.5 + 0.3);
        let dense = oracle::dense_neg2_penalized_marginal(&data, &[0], &[0.8], 0.4, &DVector::from_column_slice(&st.beta), pen).unwrap();
        assert!((got - dense).abs() < 1e-8, "{got} vs {dense}");
    }

    #[test]
    fn fit_decreases_objective_and_keeps_real_effect() {
        let data = toy(11);
        let cfg = EcmConfig {
            support_cap: Some(6),
            ..EcmConfig::with_lambda(2.0)
        };
        let res = fit(&data, &cfg).unwrap();
        assert!(res.converged);
        assert_eq!(res.state.active, vec![0]);
        for w in res.trajectory.windows(2) {
            if !w[1].after_deletion {
                assert!(w[1].objective <= w[0].objective + 1e-8);
            }
        }
        assert!(res.max_factor_dim <= 6);
    }

    #[test]
    fn zero_variance_effect_is_deleted_and_model_collapses() {
        let mut data = toy(13);
        // response without any group structure
        let y = DVector::from_fn(data.n(), |i, _| 1.0 + 2.0 * data.x()[(i, 1)] + 0.3 * ((i * 7 % 5) as f64 - 2.0));
        data = MixedModelData::new(
            y,
            data.x().clone(),
            None,
            vec![RandomEffectSpec::intercept("g", GroupingFactor::new((0..30).map(|i| i % 6).collect(), 6).unwrap())],
            BTreeSet::from([0]),
        )
        .unwrap();
        let cfg = EcmConfig {
            delete_ratio: 0.05,
            max_iter: 2000,
            ..EcmConfig::with_lambda(1.0)
        };
        let res = fit(&data, &cfg).unwrap();
        assert!(res.state.active.is_empty());
        assert_eq!(res.deleted.len(), 1);
        let plain = fit(&data.without_effects(), &cfg).unwrap();
        for (a, b) in res.state.beta.iter().zip(&plain.state.beta) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn fit_is_deterministic() {
        let data = toy(17);
        let cfg = EcmConfig::with_lambda(1.5);
        let a = fit(&data, &cfg).unwrap();
        let b = fit(&data, &cfg).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn null_refit_gives_mean_square() {
        let data = toy(19).without_effects();
        let res = refit(&data, &[], &[]).unwrap();
        let want = data.y().norm_squared() / data.n() as f64;
        assert!((res.state.sigma2_e - want).abs() < 1e-10);
    }

    #[test]
    fn refit_rejects_dependent_columns() {
        let data = toy(23);
        let mut x = data.x().clone();
        let c = x.column(1).clone_owned();
        x.set_column(2, &(c * 2.0));
        let data = data.with_design(x).unwrap();
        assert!(matches!(refit(&data, &[1, 2], &[0]), Err(Error::Rank(_))));
    }

    #[test]
    fn support_cap_aborts() {
        let data = toy(29);
        let cfg = EcmConfig {
            support_cap: Some(1),
            ..EcmConfig::with_lambda(0.01)
        };
        assert!(matches!(fit(&data, &cfg), Err(Error::SupportCap { .. })));
    }
}
