//! Henderson mixed-model equations for the random effects.
//!
//! With `R = sigma_e^2 I`, the conditional mean of `u` given `y` solves
//! `(Z'Z + Gamma) u = Z'(y - X beta)`, an `N x N` system where `N` is the
//! total number of random-effect levels. The inverse of the coefficient
//! matrix also supplies the `T_kk` blocks needed by the variance updates.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Chol};
use crate::model::MixedModelData;
use crate::oracle;

/// Variance ratios `gamma_k = sigma_e^2 / sigma_k^2`, aligned with an active
/// effect list.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaMatrix {
    ratios: Vec<f64>,
}

impl GammaMatrix {
    pub fn new(ratios: Vec<f64>) -> Result<Self> {
        if let Some(g) = ratios.iter().find(|g| !(g.is_finite() && **g > 0.0)) {
            return Err(Error::Config(format!("variance ratio must be finite and positive, got {g}")));
        }
        Ok(GammaMatrix { ratios })
    }

    pub fn from_variances(sigma2: &[f64], sigma2_e: f64) -> Result<Self> {
        GammaMatrix::new(sigma2.iter().map(|s| sigma2_e / s).collect())
    }

    pub fn ratios(&self) -> &[f64] {
        &self.ratios
    }
}

/// `Z` and `Z'Z` for a fixed set of active effects. Rebuilt only when the
/// active set changes.
#[derive(Debug, Clone)]
pub struct ActiveDesign {
    active: Vec<usize>,
    z: DMatrix<f64>,
    ztz: DMatrix<f64>,
    blocks: Vec<Range<usize>>,
}

impl ActiveDesign {
    pub fn new(data: &MixedModelData, active: &[usize]) -> Self {
        let z = data.z_of(active);
        let ztz = z.tr_mul(&z);
        let mut blocks = Vec::with_capacity(active.len());
        let mut off = 0;
        for &k in active {
            let nk = data.effects()[k].levels();
            blocks.push(off..off + nk);
            off += nk;
        }
        ActiveDesign {
            active: active.to_vec(),
            z,
            ztz,
            blocks,
        }
    }

    pub fn active(&self) -> &[usize] {
        &self.active
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn ztz(&self) -> &DMatrix<f64> {
        &self.ztz
    }

    pub fn blocks(&self) -> &[Range<usize>] {
        &self.blocks
    }

    /// Total number of active levels `N`.
    pub fn dim(&self) -> usize {
        self.z.ncols()
    }
}

/// Factorization of `Z'Z + Gamma` plus the quantities derived from its inverse.
#[derive(Debug, Clone)]
pub struct HendersonSystem {
    chol: Option<Chol>,
    /// `L^{-1}` for `Z'Z + Gamma = L L'`, so `(Z'Z + Gamma)^{-1} = M'M`.
    l_inv: DMatrix<f64>,
    log_det: f64,
    trace_t: Vec<f64>,
    trace_t_ainv: Vec<f64>,
    conditional_trace: f64,
}

impl HendersonSystem {
    pub fn factor(data: &MixedModelData, design: &ActiveDesign, gamma: &GammaMatrix) -> Result<Self> {
        if gamma.ratios().len() != design.active().len() {
            return Err(Error::Dimension(format!(
                "{} variance ratios for {} active effects",
                gamma.ratios().len(),
                design.active().len()
            )));
        }
        let dim = design.dim();
        if dim == 0 {
            return Ok(HendersonSystem {
                chol: None,
                l_inv: DMatrix::zeros(0, 0),
                log_det: 0.0,
                trace_t: Vec::new(),
                trace_t_ainv: Vec::new(),
                conditional_trace: 0.0,
            });
        }
        let mut c = design.ztz().clone();
        for ((&k, block), &g) in design.active().iter().zip(design.blocks()).zip(gamma.ratios()) {
            match &data.effects()[k].spec.relationship {
                None => {
                    for i in block.clone() {
                        c[(i, i)] += g;
                    }
                }
                Some(rel) => {
                    let mut sub = c.view_mut((block.start, block.start), (block.len(), block.len()));
                    sub += rel.inverse() * g;
                }
            }
        }
        let chol = linalg::cholesky(c, "Henderson coefficient matrix Z'Z + Gamma")?;
        let log_det = linalg::log_det(&chol);
        let l_inv = linalg::lower_triangular_inverse(chol.l_dirty());

        let mut trace_t = Vec::with_capacity(design.active().len());
        let mut trace_t_ainv = Vec::with_capacity(design.active().len());
        let mut gamma_trace = 0.0;
        for ((&k, block), &g) in design.active().iter().zip(design.blocks()).zip(gamma.ratios()) {
            let m = l_inv.columns(block.start, block.len());
            let tr = m.norm_squared();
            trace_t.push(tr);
            let tra = match &data.effects()[k].spec.relationship {
                None => tr,
                Some(rel) => linalg::trace_product(rel.inverse(), &m.tr_mul(&m)),
            };
            trace_t_ainv.push(tra);
            gamma_trace += g * tra;
        }
        // (Z'Z + Gamma)^{-1} (Z'Z + Gamma) = I
        let conditional_trace = dim as f64 - gamma_trace;
        Ok(HendersonSystem {
            chol: Some(chol),
            l_inv,
            log_det,
            trace_t,
            trace_t_ainv,
            conditional_trace,
        })
    }

    /// `log |Z'Z + Gamma|`.
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// `(Z'Z + Gamma)^{-1}`, assembled on demand.
    pub fn inverse(&self) -> DMatrix<f64> {
        self.l_inv.tr_mul(&self.l_inv)
    }

    /// Solves for `u` given the fixed-effect residual `r = y - X beta`.
    pub fn solve(&self, design: &ActiveDesign, residual: &DVector<f64>) -> BlupResult {
        let u = match &self.chol {
            Some(chol) => chol.solve(&design.z().tr_mul(residual)),
            None => DVector::zeros(0),
        };
        BlupResult {
            u,
            blocks: design.blocks().to_vec(),
            trace_t: self.trace_t.clone(),
            trace_t_ainv: self.trace_t_ainv.clone(),
            conditional_trace: self.conditional_trace,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlupResult {
    /// Concatenated `u_k` for the active effects.
    pub u: DVector<f64>,
    pub blocks: Vec<Range<usize>>,
    /// `tr(T_kk)` per active effect.
    pub trace_t: Vec<f64>,
    /// `tr(A_k^{-1} T_kk)`; equals `trace_t` for identity blocks.
    pub trace_t_ainv: Vec<f64>,
    /// `tr(Z (Z'Z + Gamma)^{-1} Z')`, computed as `tr((Z'Z + Gamma)^{-1} Z'Z)`.
    pub conditional_trace: f64,
}

impl BlupResult {
    /// `u_k` for the effect at position `pos` of the active list.
    pub fn block(&self, pos: usize) -> &[f64] {
        &self.u.as_slice()[self.blocks[pos].clone()]
    }
}

/// BLUP of the random effects for the active set at `beta`.
pub fn henderson_solve(
    data: &MixedModelData,
    active: &[usize],
    gamma: &GammaMatrix,
    beta: &DVector<f64>,
) -> Result<BlupResult> {
    if active.is_empty() {
        return Err(Error::Config("henderson_solve needs at least one active effect".into()));
    }
    let design = ActiveDesign::new(data, active);
    let system = HendersonSystem::factor(data, &design, gamma)?;
    let r = data.y() - data.x() * beta;
    Ok(system.solve(&design, &r))
}

/// Independent BLUP route: `u = G Z' V^{-1} (y - X beta)` with a dense `n x n`
/// marginal covariance. Test oracle only.
pub fn blup_marginal_oracle(
    data: &MixedModelData,
    active: &[usize],
    sigma2: &[f64],
    sigma2_e: f64,
    beta: &DVector<f64>,
) -> Result<DVector<f64>> {
    let v = oracle::marginal_covariance(data, active, sigma2, sigma2_e)?;
    let r = data.y() - data.x() * beta;
    let vinv_r = v.solve(&r);
    let z = data.z_of(active);
    let zt_vinv_r = z.tr_mul(&vinv_r);
    let mut u = DVector::zeros(z.ncols());
    let mut off = 0;
    for (&k, &s2) in active.iter().zip(sigma2) {
        let eff = &data.effects()[k];
        let nk = eff.levels();
        let seg = zt_vinv_r.rows(off, nk);
        let gk = match &eff.spec.relationship {
            None => seg.clone_owned() * s2,
            Some(rel) => rel.matrix() * seg * s2,
        };
        u.rows_mut(off, nk).copy_from(&gk);
        off += nk;
    }
    Ok(u)
}
