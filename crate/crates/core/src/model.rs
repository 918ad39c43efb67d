//! Linear mixed model data: response, fixed design, grouping factors and the
//! incidence matrices they generate.
//!
//! Column and level indices are zero-based throughout the library. External
//! 1-based level codes are converted by [`GroupingFactor::from_one_based`].

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

#[derive(Debug, Clone, PartialEq)]
pub struct GroupingFactor {
    assignment: Vec<usize>,
    level_count: usize,
    labels: Option<Vec<String>>,
}

impl GroupingFactor {
    /// `assignment[i]` is the zero-based level of observation `i`.
    pub fn new(assignment: Vec<usize>, level_count: usize) -> Result<Self> {
        if level_count == 0 {
            return Err(Error::Grouping("factor must have at least one level".into()));
        }
        let mut seen = vec![false; level_count];
        for (i, &lvl) in assignment.iter().enumerate() {
            if lvl >= level_count {
                return Err(Error::Grouping(format!(
                    "observation {i} has level {} outside 1..{level_count}",
                    lvl + 1
                )));
            }
            seen[lvl] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Grouping(format!("level {} has no observations", missing + 1)));
        }
        Ok(GroupingFactor {
            assignment,
            level_count,
            labels: None,
        })
    }

    /// Levels coded 1..N_k; `N_k` is taken as the largest code.
    pub fn from_one_based(codes: &[usize]) -> Result<Self> {
        if codes.contains(&0) {
            return Err(Error::Grouping("level codes are 1-based; found 0".into()));
        }
        let level_count = codes.iter().copied().max().unwrap_or(0);
        GroupingFactor::new(codes.iter().map(|c| c - 1).collect(), level_count)
    }

    /// Maps arbitrary labels to dense levels in order of first appearance.
    pub fn from_labels<S: AsRef<str>>(labels: &[S]) -> Result<Self> {
        let mut index: BTreeMap<&str, usize> = BTreeMap::new();
        let mut names = Vec::new();
        let mut assignment = Vec::with_capacity(labels.len());
        for l in labels {
            let key = l.as_ref();
            let next = index.len();
            let lvl = *index.entry(key).or_insert_with(|| {
                names.push(key.to_string());
                next
            });
            assignment.push(lvl);
        }
        let mut f = GroupingFactor::new(assignment, names.len())?;
        f.labels = Some(names);
        Ok(f)
    }

    /// `level_count` consecutive blocks of `per_level` observations each.
    pub fn contiguous_blocks(level_count: usize, per_level: usize) -> Result<Self> {
        let assignment = (0..level_count)
            .flat_map(|l| std::iter::repeat_n(l, per_level))
            .collect();
        GroupingFactor::new(assignment, level_count)
    }

    pub fn n(&self) -> usize {
        self.assignment.len()
    }

    pub fn level_count(&self) -> usize {
        self.level_count
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    /// Number of observations at each level.
    pub fn level_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.level_count];
        for &l in &self.assignment {
            sizes[l] += 1;
        }
        sizes
    }
}

/// Incidence matrix of a factor, optionally interacted with a covariate.
pub fn build_incidence(factor: &GroupingFactor, covariate: Option<&[f64]>) -> Result<DMatrix<f64>> {
    let n = factor.n();
    if let Some(c) = covariate {
        if c.len() != n {
            return Err(Error::Dimension(format!(
                "covariate has length {} but factor has {n} observations",
                c.len()
            )));
        }
    }
    let mut z = DMatrix::zeros(n, factor.level_count());
    for (i, &lvl) in factor.assignment().iter().enumerate() {
        z[(i, lvl)] = covariate.map_or(1.0, |c| c[i]);
    }
    Ok(z)
}

/// What multiplies the level indicator in a random effect's incidence matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum Covariate {
    /// Plain random intercept: incidence entries are 1.
    None,
    /// Interaction with column `j` of X. While the effect is active, column
    /// `j` is exempt from the l1 penalty.
    Column(usize),
    /// Interaction with an external covariate not present in X.
    Values(Vec<f64>),
}

/// Known relationship matrix `A` for one random effect, with `A^{-1}` cached.
#[derive(Debug, Clone)]
pub struct Relationship {
    a: DMatrix<f64>,
    a_inv: DMatrix<f64>,
    log_det: f64,
}

impl Relationship {
    pub fn new(a: DMatrix<f64>) -> Result<Self> {
        if !linalg::is_symmetric(&a, 1e-10) {
            return Err(Error::Data("relationship matrix is not symmetric".into()));
        }
        let chol = linalg::cholesky(a.clone(), "relationship matrix")?;
        let log_det = linalg::log_det(&chol);
        let mut a_inv = chol.inverse();
        a_inv = (&a_inv + a_inv.transpose()) * 0.5;
        Ok(Relationship { a, a_inv, log_det })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn inverse(&self) -> &DMatrix<f64> {
        &self.a_inv
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }
}

#[derive(Debug, Clone)]
pub struct RandomEffectSpec {
    pub name: String,
    pub factor: GroupingFactor,
    pub covariate: Covariate,
    pub relationship: Option<Relationship>,
}

impl RandomEffectSpec {
    pub fn intercept(name: impl Into<String>, factor: GroupingFactor) -> Self {
        RandomEffectSpec {
            name: name.into(),
            factor,
            covariate: Covariate::None,
            relationship: None,
        }
    }

    pub fn slope(name: impl Into<String>, factor: GroupingFactor, column: usize) -> Self {
        RandomEffectSpec {
            name: name.into(),
            factor,
            covariate: Covariate::Column(column),
            relationship: None,
        }
    }

    pub fn with_relationship(mut self, rel: Relationship) -> Self {
        self.relationship = Some(rel);
        self
    }
}

/// A random effect together with its realized incidence matrix.
#[derive(Debug, Clone)]
pub struct RandomEffect {
    pub spec: RandomEffectSpec,
    pub z: DMatrix<f64>,
}

impl RandomEffect {
    pub fn levels(&self) -> usize {
        self.z.ncols()
    }

    /// Column of X this effect is generated by, if any.
    pub fn source_column(&self) -> Option<usize> {
        match self.spec.covariate {
            Covariate::Column(j) => Some(j),
            _ => None,
        }
    }

    /// `u' A^{-1} u` when a relationship matrix is attached, `|u|^2` otherwise.
    pub fn quad_norm(&self, u: &[f64]) -> f64 {
        match &self.spec.relationship {
            None => linalg::sq_norm(u),
            Some(rel) => {
                let v = DVector::from_column_slice(u);
                v.dot(&(rel.inverse() * &v))
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct MixedModelData {
    y: DVector<f64>,
    x: DMatrix<f64>,
    column_names: Vec<String>,
    effects: Vec<RandomEffect>,
    unpenalized: BTreeSet<usize>,
}

impl MixedModelData {
    pub fn new(
        y: DVector<f64>,
        x: DMatrix<f64>,
        column_names: Option<Vec<String>>,
        effects: Vec<RandomEffectSpec>,
        unpenalized: BTreeSet<usize>,
    ) -> Result<Self> {
        let n = y.len();
        let p = x.ncols();
        if x.nrows() != n {
            return Err(Error::Dimension(format!("y has {n} rows but X has {}", x.nrows())));
        }
        if n == 0 {
            return Err(Error::Dimension("no observations".into()));
        }
        if y.iter().chain(x.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Data("y and X must be finite".into()));
        }
        let column_names = match column_names {
            Some(names) if names.len() != p => {
                return Err(Error::Dimension(format!("{} column names for {p} columns", names.len())))
            }
            Some(names) => names,
            None => (1..=p).map(|j| format!("X{j}")).collect(),
        };
        if let Some(&j) = unpenalized.iter().find(|&&j| j >= p) {
            return Err(Error::Dimension(format!("unpenalized column {j} out of range (p = {p})")));
        }
        let mut built = Vec::with_capacity(effects.len());
        for spec in effects {
            if spec.factor.n() != n {
                return Err(Error::Dimension(format!(
                    "effect '{}' factor covers {} observations, expected {n}",
                    spec.name,
                    spec.factor.n()
                )));
            }
            let z = match &spec.covariate {
                Covariate::None => build_incidence(&spec.factor, None)?,
                Covariate::Column(j) => {
                    if *j >= p {
                        return Err(Error::Dimension(format!(
                            "effect '{}' references column {j} (p = {p})",
                            spec.name
                        )));
                    }
                    build_incidence(&spec.factor, Some(x.column(*j).as_slice()))?
                }
                Covariate::Values(v) => build_incidence(&spec.factor, Some(v))?,
            };
            if let Some(rel) = &spec.relationship {
                if rel.matrix().nrows() != z.ncols() {
                    return Err(Error::Dimension(format!(
                        "relationship matrix for '{}' is {}x{}, factor has {} levels",
                        spec.name,
                        rel.matrix().nrows(),
                        rel.matrix().ncols(),
                        z.ncols()
                    )));
                }
            }
            built.push(RandomEffect { spec, z });
        }
        Ok(MixedModelData {
            y,
            x,
            column_names,
            effects: built,
            unpenalized,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn q(&self) -> usize {
        self.effects.len()
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    pub fn effects(&self) -> &[RandomEffect] {
        &self.effects
    }

    /// Columns exempt from the penalty regardless of random effects.
    pub fn base_unpenalized(&self) -> &BTreeSet<usize> {
        &self.unpenalized
    }

    /// Total number of random-effect levels over the given effects.
    pub fn levels_of(&self, active: &[usize]) -> usize {
        active.iter().map(|&k| self.effects[k].levels()).sum()
    }

    /// Concatenation of every `Z_k`, in effect order.
    pub fn z(&self) -> DMatrix<f64> {
        let all: Vec<usize> = (0..self.q()).collect();
        self.z_of(&all)
    }

    pub fn z_of(&self, active: &[usize]) -> DMatrix<f64> {
        let total = self.levels_of(active);
        let mut z = DMatrix::zeros(self.n(), total);
        let mut off = 0;
        for &k in active {
            let zk = &self.effects[k].z;
            z.columns_mut(off, zk.ncols()).copy_from(zk);
            off += zk.ncols();
        }
        z
    }

    /// Penalty exemption mask: the base set plus the source columns of the
    /// currently active effects.
    pub fn unpenalized_mask(&self, active: &[usize]) -> Vec<bool> {
        let mut mask = vec![false; self.p()];
        for &j in &self.unpenalized {
            mask[j] = true;
        }
        for &k in active {
            if let Some(j) = self.effects[k].source_column() {
                mask[j] = true;
            }
        }
        mask
    }

    /// Same data with no random effects (the plain linear model).
    pub fn without_effects(&self) -> MixedModelData {
        MixedModelData {
            y: self.y.clone(),
            x: self.x.clone(),
            column_names: self.column_names.clone(),
            effects: Vec::new(),
            unpenalized: self.unpenalized.clone(),
        }
    }

    /// Restricts X to `columns` and the random effects to `effects`. Effects
    /// whose source column is dropped keep their incidence matrix but lose the
    /// exemption link.
    pub fn restrict(&self, columns: &[usize], effects: &[usize]) -> Result<MixedModelData> {
        let remap: BTreeMap<usize, usize> = columns.iter().enumerate().map(|(new, &old)| (old, new)).collect();
        if remap.len() != columns.len() || columns.iter().any(|&j| j >= self.p()) {
            return Err(Error::Dimension("invalid column subset".into()));
        }
        let x = self.x.select_columns(columns);
        let names = columns.iter().map(|&j| self.column_names[j].clone()).collect();
        let mut new_effects = Vec::with_capacity(effects.len());
        for &k in effects {
            let eff = self.effects.get(k).ok_or_else(|| Error::Dimension(format!("no effect {k}")))?;
            let mut spec = eff.spec.clone();
            if let Covariate::Column(j) = spec.covariate {
                spec.covariate = match remap.get(&j) {
                    Some(&nj) => Covariate::Column(nj),
                    None => Covariate::Values(self.x.column(j).iter().copied().collect()),
                };
            }
            new_effects.push(RandomEffect { spec, z: eff.z.clone() });
        }
        let unpenalized = self.unpenalized.iter().filter_map(|j| remap.get(j).copied()).collect();
        Ok(MixedModelData {
            y: self.y.clone(),
            x,
            column_names: names,
            effects: new_effects,
            unpenalized,
        })
    }

    /// Replaces X (same shape), keeping the already-built incidence matrices.
    pub fn with_design(&self, x: DMatrix<f64>) -> Result<MixedModelData> {
        if x.shape() != self.x.shape() {
            return Err(Error::Dimension("replacement design has a different shape".into()));
        }
        let mut out = self.clone();
        out.x = x;
        Ok(out)
    }
}

/// Column standardization record used to map coefficients back.
#[derive(Debug, Clone)]
pub struct Standardized {
    pub x: DMatrix<f64>,
    pub centers: Vec<f64>,
    pub scales: Vec<f64>,
    pub skip: BTreeSet<usize>,
}

/// Centers every column outside `skip` and scales it to unit second moment
/// `(1/n) sum x^2 = 1`.
pub fn standardize(x: &DMatrix<f64>, skip: &BTreeSet<usize>) -> Result<Standardized> {
    let n = x.nrows() as f64;
    let mut out = x.clone();
    let mut centers = vec![0.0; x.ncols()];
    let mut scales = vec![1.0; x.ncols()];
    for j in 0..x.ncols() {
        if skip.contains(&j) {
            continue;
        }
        let mut col = out.column_mut(j);
        let mean = col.sum() / n;
        col.add_scalar_mut(-mean);
        let ms = col.norm_squared() / n;
        if ms <= 1e-24 * (1.0 + mean * mean) {
            return Err(Error::DegenerateColumn {
                column: j,
                reason: "constant column cannot be standardized",
            });
        }
        let scale = ms.sqrt();
        col /= scale;
        centers[j] = mean;
        scales[j] = scale;
    }
    Ok(Standardized {
        x: out,
        centers,
        scales,
        skip: skip.clone(),
    })
}

impl Standardized {
    /// Maps coefficients fitted on the standardized design back to the
    /// original columns. Centering is absorbed by `intercept`.
    pub fn to_original(&self, beta: &[f64], intercept: Option<usize>) -> Result<Vec<f64>> {
        let mut out = beta.to_vec();
        let mut shift = 0.0;
        for j in 0..beta.len() {
            if self.skip.contains(&j) {
                continue;
            }
            out[j] = beta[j] / self.scales[j];
            shift += self.centers[j] * out[j];
        }
        match intercept {
            Some(i) => out[i] -= shift,
            None if shift != 0.0 => {
                return Err(Error::Config("centering requires an intercept column".into()))
            }
            None => {}
        }
        Ok(out)
    }
}

/// Index of an all-ones column, if X has one.
pub fn find_intercept(x: &DMatrix<f64>) -> Option<usize> {
    (0..x.ncols()).find(|&j| x.column(j).iter().all(|&v| v == 1.0))
}
