//! Known-variance reference computations on the dense `n x n` marginal
//! covariance `V = sum_k sigma_k^2 Z_k A_k Z_k' + sigma_e^2 I`.
//!
//! These routines exist to check the `N x N` Henderson route used by the ECM
//! loop. They factorize `V` directly and are only meant for small `n`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{self, Chol};
use crate::model::MixedModelData;
use crate::penalized_ls::{lasso_cd, SelectorConfig};

#[derive(Debug, Clone)]
pub struct MarginalCovariance {
    v: DMatrix<f64>,
    chol: Chol,
}

impl MarginalCovariance {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.v
    }

    pub fn factor(&self) -> &Chol {
        &self.chol
    }

    pub fn log_det(&self) -> f64 {
        linalg::log_det(&self.chol)
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }
}

fn check_variances(data: &MixedModelData, active: &[usize], sigma2: &[f64], sigma2_e: f64) -> Result<()> {
    if active.len() != sigma2.len() {
        return Err(Error::Dimension(format!("{} variances for {} effects", sigma2.len(), active.len())));
    }
    if active.iter().any(|&k| k >= data.q()) {
        return Err(Error::Dimension("active effect index out of range".into()));
    }
    if !(sigma2_e > 0.0) || sigma2.iter().any(|s| !(*s >= 0.0)) {
        return Err(Error::Config("variances must be positive".into()));
    }
    Ok(())
}

pub fn marginal_covariance(
    data: &MixedModelData,
    active: &[usize],
    sigma2: &[f64],
    sigma2_e: f64,
) -> Result<MarginalCovariance> {
    check_variances(data, active, sigma2, sigma2_e)?;
    let n = data.n();
    let mut v = DMatrix::identity(n, n) * sigma2_e;
    for (&k, &s2) in active.iter().zip(sigma2) {
        let eff = &data.effects()[k];
        let zk = &eff.z;
        match &eff.spec.relationship {
            None => v += zk * zk.transpose() * s2,
            Some(rel) => v += zk * rel.matrix() * zk.transpose() * s2,
        }
    }
    v = (&v + v.transpose()) * 0.5;
    let chol = linalg::cholesky(v.clone(), "marginal covariance V")?;
    Ok(MarginalCovariance { v, chol })
}

/// Block-diagonal `G^{-1}` for the active effects.
fn g_inverse(data: &MixedModelData, active: &[usize], sigma2: &[f64]) -> DMatrix<f64> {
    let total = data.levels_of(active);
    let mut g = DMatrix::zeros(total, total);
    let mut off = 0;
    for (&k, &s2) in active.iter().zip(sigma2) {
        let eff = &data.effects()[k];
        let nk = eff.levels();
        let block = match &eff.spec.relationship {
            None => DMatrix::identity(nk, nk) / s2,
            Some(rel) => rel.inverse() / s2,
        };
        g.view_mut((off, off), (nk, nk)).copy_from(&block);
        off += nk;
    }
    g
}

/// Penalized generalized least squares at known variances:
/// `argmin (y - X b)' V^{-1} (y - X b) + lambda sum_j w_j |b_j|`, by whitening
/// with the Cholesky factor of `V` and running the weighted Lasso with the
/// `sigma_e2` slot set to 1.
pub fn gls_lasso(
    data: &MixedModelData,
    active: &[usize],
    sigma2: &[f64],
    sigma2_e: f64,
    cfg: &SelectorConfig,
) -> Result<Vec<f64>> {
    let v = marginal_covariance(data, active, sigma2, sigma2_e)?;
    let l = v.factor().l();
    let y_w = l
        .solve_lower_triangular(data.y())
        .ok_or_else(|| Error::numeric("whitening solve failed", f64::INFINITY))?;
    let x_w = l
        .solve_lower_triangular(data.x())
        .ok_or_else(|| Error::numeric("whitening solve failed", f64::INFINITY))?;
    Ok(lasso_cd(&x_w, &y_w, 1.0, cfg)?.beta)
}

/// Max elementwise `|W - V^{-1}|` where
/// `W = R^{-1} - R^{-1} Z (Z' R^{-1} Z + G^{-1})^{-1} Z' R^{-1}`.
pub fn w_identity_check(data: &MixedModelData, active: &[usize], sigma2: &[f64], sigma2_e: f64) -> Result<f64> {
    let v = marginal_covariance(data, active, sigma2, sigma2_e)?;
    let v_inv = v.inverse();
    let n = data.n();
    let r_inv = 1.0 / sigma2_e;
    let mut w = DMatrix::identity(n, n) * r_inv;
    if !active.is_empty() {
        let z = data.z_of(active);
        let inner = z.tr_mul(&z) * r_inv + g_inverse(data, active, sigma2);
        let inner = linalg::cholesky(inner, "Z'R^-1 Z + G^-1")?;
        let zt = z.transpose() * r_inv;
        w -= &zt.transpose() * inner.solve(&zt);
    }
    Ok((w - v_inv).abs().max())
}

/// Dense evaluation of `log|V| + (y - X b)' V^{-1} (y - X b) + penalty + n log(2 pi)`.
pub fn dense_neg2_penalized_marginal(
    data: &MixedModelData,
    active: &[usize],
    sigma2: &[f64],
    sigma2_e: f64,
    beta: &DVector<f64>,
    penalty: f64,
) -> Result<f64> {
    let v = marginal_covariance(data, active, sigma2, sigma2_e)?;
    let r = data.y() - data.x() * beta;
    let quad = r.dot(&v.solve(&r));
    Ok(v.log_det() + quad + penalty + data.n() as f64 * (2.0 * PI).ln())
}

/// Both sides of the profiled-objective identity: the complete-data objective
/// `h(u(b), b)` with `u(b) = (Z'R^{-1}Z + G^{-1})^{-1} Z'R^{-1}(y - X b)`, and
/// the marginal form `(y - X b)' V^{-1} (y - X b) + penalty`.
pub fn profiled_objective_pair(
    data: &MixedModelData,
    active: &[usize],
    sigma2: &[f64],
    sigma2_e: f64,
    beta: &DVector<f64>,
    penalty: f64,
) -> Result<(f64, f64)> {
    let v = marginal_covariance(data, active, sigma2, sigma2_e)?;
    let r = data.y() - data.x() * beta;
    let marginal = r.dot(&v.solve(&r)) + penalty;
    let r_inv = 1.0 / sigma2_e;
    let h = if active.is_empty() {
        r.norm_squared() * r_inv + penalty
    } else {
        let z = data.z_of(active);
        let g_inv = g_inverse(data, active, sigma2);
        let inner = linalg::cholesky(z.tr_mul(&z) * r_inv + &g_inv, "Z'R^-1 Z + G^-1")?;
        let u = inner.solve(&(z.tr_mul(&r) * r_inv));
        let e = &r - &z * &u;
        e.norm_squared() * r_inv + u.dot(&(&g_inv * &u)) + penalty
    };
    Ok((h, marginal))
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::model::{GroupingFactor, RandomEffectSpec};

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
    fn no_effects_gives_scaled_identity() {
        let data = four_obs().without_effects();
        let v = marginal_covariance(&data, &[], &[], 2.5).unwrap();
        assert_eq!(v.matrix(), &(DMatrix::identity(4, 4) * 2.5));
        assert!(w_identity_check(&data, &[], &[], 2.5).unwrap() <= 1e-15);
    }

    #[test]
    fn four_observation_assembly() {
        let data = four_obs();
        let v = marginal_covariance(&data, &[0], &[1.0], 1.0).unwrap();
        let expected = DMatrix::from_row_slice(
            4,
            4,
            &[2., 1., 0., 0., 1., 2., 0., 0., 0., 0., 2., 1., 0., 0., 1., 2.],
        );
        assert_eq!(v.matrix(), &expected);
        assert!(w_identity_check(&data, &[0], &[1.0], 1.0).unwrap() <= 1e-12);
    }

    #[test]
    fn vanishing_random_variance() {
        let data = four_obs();
        let v = marginal_covariance(&data, &[0], &[1e-14], 0.7).unwrap();
        assert!((v.matrix() - DMatrix::identity(4, 4) * 0.7).abs().max() < 1e-13);
    }

    #[test]
    fn identity_covariance_matches_plain_lasso() {
        let n = 15;
        let x = DMatrix::from_fn(n, 4, |i, j| ((i * 3 + j * 5) % 7) as f64 - 3.0 + 0.1 * j as f64);
        let y = DVector::from_fn(n, |i, _| (i as f64 * 0.7).sin() * 4.0);
        let data = MixedModelData::new(y.clone(), x.clone(), None, vec![], BTreeSet::new()).unwrap();
        let mut cfg = SelectorConfig::new(3.0, 4);
        cfg.cd_tol = 1e-12;
        let gls = gls_lasso(&data, &[], &[], 1.0, &cfg).unwrap();
        let plain = lasso_cd(&x, &y, 1.0, &cfg).unwrap();
        for j in 0..4 {
            assert!((gls[j] - plain.beta[j]).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_penalty_is_generalized_least_squares() {
        let f = GroupingFactor::contiguous_blocks(4, 5).unwrap();
        let n = 20;
        let x = DMatrix::from_fn(n, 3, |i, j| if j == 0 { 1.0 } else { ((i * (j + 3)) % 9) as f64 - 4.0 });
        let y = DVector::from_fn(n, |i, _| (i as f64).cos() * 2.0 + (i / 5) as f64);
        let data = MixedModelData::new(y.clone(), x.clone(), None, vec![RandomEffectSpec::intercept("g", f)], BTreeSet::new()).unwrap();
        let mut cfg = SelectorConfig::new(0.0, 3);
        cfg.cd_tol = 1e-12;
        let b = gls_lasso(&data, &[0], &[1.3], 0.8, &cfg).unwrap();
        let v = marginal_covariance(&data, &[0], &[1.3], 0.8).unwrap();
        let vinv = v.inverse();
        let lhs = x.transpose() * &vinv * &x;
        let rhs = x.transpose() * &vinv * &y;
        let direct = lhs.cholesky().unwrap().solve(&rhs);
        for j in 0..3 {
            assert!((b[j] - direct[j]).abs() < 1e-8, "{j}: {} vs {}", b[j], direct[j]);
        }
    }
}
