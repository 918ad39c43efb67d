#![allow(dead_code)]

use std::collections::BTreeSet;

use lmmsel::model::{GroupingFactor, MixedModelData, RandomEffectSpec, Relationship};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub struct Instance {
    pub data: MixedModelData,
    pub beta: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub sigma2_e: f64,
}

/// Intercept plus `p - 1` Gaussian columns, `sizes.len()` crossed random
/// intercepts with the given level counts (levels assigned cyclically after
/// a shuffle), the first `k` slopes equal to 1.
pub fn instance(seed: u64, n: usize, p: usize, levels: &[usize], k: usize) -> Instance {
    let mut r = rng(seed);
    let x = DMatrix::from_fn(n, p, |_, j| if j == 0 { 1.0 } else { 0.0 });
    let mut x = x;
    for j in 1..p {
        for i in 0..n {
            x[(i, j)] = normal(&mut r);
        }
    }
    let mut beta = vec![0.0; p];
    beta[0] = 0.5;
    for b in beta.iter_mut().skip(1).take(k) {
        *b = 1.0;
    }
    let sigma2: Vec<f64> = levels.iter().map(|_| 0.5 + r.random::<f64>()).collect();
    let sigma2_e = 0.5 + r.random::<f64>();

    let mut effects = Vec::new();
    let mut y = &x * DVector::from_column_slice(&beta);
    for (idx, (&nk, &s2)) in levels.iter().zip(&sigma2).enumerate() {
        let mut assign: Vec<usize> = (0..n).map(|i| i % nk).collect();
        for i in (1..n).rev() {
            let j = r.random_range(0..=i);
            assign.swap(i, j);
        }
        let u: Vec<f64> = (0..nk).map(|_| normal(&mut r) * s2.sqrt()).collect();
        for i in 0..n {
            y[i] += u[assign[i]];
        }
        let f = GroupingFactor::new(assign, nk).unwrap();
        effects.push(RandomEffectSpec::intercept(format!("g{}", idx + 1), f));
    }
    for i in 0..n {
        y[i] += normal(&mut r) * sigma2_e.sqrt();
    }
    let data = MixedModelData::new(y, x, None, effects, BTreeSet::from([0])).unwrap();
    Instance {
        data,
        beta,
        sigma2,
        sigma2_e,
    }
}

/// Random symmetric positive-definite matrix with unit-ish diagonal.
pub fn spd(seed: u64, m: usize) -> DMatrix<f64> {
    let mut r = rng(seed);
    let b = DMatrix::from_fn(m, m, |_, _| normal(&mut r));
    let a = &b * b.transpose() / m as f64 + DMatrix::identity(m, m) * 0.5;
    (&a + a.transpose()) * 0.5
}

/// Same as [`instance`] with a relationship matrix on the first effect.
pub fn instance_with_relationship(seed: u64, n: usize, p: usize, levels: &[usize]) -> Instance {
    let base = instance(seed, n, p, levels, 2);
    let mut effects: Vec<RandomEffectSpec> = base.data.effects().iter().map(|e| e.spec.clone()).collect();
    let a = spd(seed ^ 0x5eed, levels[0]);
    effects[0] = effects[0].clone().with_relationship(Relationship::new(a).unwrap());
    let data = MixedModelData::new(
        base.data.y().clone(),
        base.data.x().clone(),
        None,
        effects,
        base.data.base_unpenalized().clone(),
    )
    .unwrap();
    Instance { data, ..base }
}
