//! Forest fitting, pointwise estimators and the sandwich covariance.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::inference::normal_quantile;
use crate::linalg::{spd_solve_gated, GramSystem, Matrix, DEFAULT_RCOND};
use crate::seeding::derive_seed;
use crate::tree::{grow_tree, FittedTree, Leaf, NodeKind, SplitRule, TreeParams};

pub const MODEL_VERSION: u32 = 1;

/// Below this share of valid trees an estimate is flagged unreliable.
const RELIABLE_SHARE: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KRule {
    /// Fixed minimum leaf size.
    Fixed(usize),
    /// `k = ⌈s^η⌉`.
    Exponent(f64),
}

/// Which `Ω` goes into the bread of the sandwich `Ω⁻¹ Λ̂ Ω⁻¹`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BreadMatrix {
    /// `Ω̄(z)`, the average leaf Gram over trees with estimation rows.
    #[default]
    ForestAverage,
    /// The leaf Gram of the first tree with estimation rows at `z`.
    FirstTree,
    /// `n⁻¹ Σ XᵢXᵢᵀ` over the whole sample.
    FullSample,
}

/// Constant in front of `Σᵢ ε̂ᵢ² θ̂ᵢ² XᵢXᵢᵀ` in `Λ̂`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaScale {
    /// `(⌊s/2⌋ / n)²`: each row enters a tree's estimation half with
    /// probability `⌊s/2⌋ / n`, which is what the variance of `β̄` carries.
    #[default]
    HonestHalf,
    /// `s² / n²`: the population expectation replaced by a sample mean.
    SampleMean,
    /// `s² / n`, the constant as typeset in front of the sum.
    Printed,
}

impl LambdaScale {
    pub fn factor(self, s: usize, n: usize) -> f64 {
        let (s, n) = (s as f64, n as f64);
        match self {
            LambdaScale::HonestHalf => ((s / 2.0).floor() / n).powi(2),
            LambdaScale::SampleMean => (s / n).powi(2),
            LambdaScale::Printed => s * s / n,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub s_fraction: f64,
    pub k_rule: KRule,
    pub alpha: f64,
    pub pi: f64,
    pub rcond: f64,
    /// Defaults to `d_X + 2`.
    pub min_count: Option<usize>,
    pub master_seed: u64,
    pub bread: BreadMatrix,
    pub lambda_scale: LambdaScale,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            n_trees: 500,
            s_fraction: 0.8,
            k_rule: KRule::Exponent(1.0 / 6.0),
            alpha: 0.005,
            pi: 1.0,
            rcond: DEFAULT_RCOND,
            min_count: None,
            master_seed: 0,
            bread: BreadMatrix::default(),
            lambda_scale: LambdaScale::default(),
        }
    }
}

impl ForestConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn subsample_size(&self, n: usize) -> usize {
        ((self.s_fraction * n as f64) - 1e-9).ceil().max(0.0) as usize
    }

    pub fn leaf_size(&self, s: usize) -> usize {
        match self.k_rule {
            KRule::Fixed(k) => k,
            KRule::Exponent(eta) => ((s as f64).powf(eta) - 1e-9).ceil().max(1.0) as usize,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_trees < 1 {
            return bad("n_trees must be at least 1".into());
        }
        if !(self.s_fraction > 0.0 && self.s_fraction <= 1.0) {
            return bad(format!("s_fraction {} outside (0, 1]", self.s_fraction));
        }
        if !(self.alpha > 0.0 && self.alpha < 0.5) {
            return bad(format!("alpha {} outside (0, 0.5)", self.alpha));
        }
        if !(self.pi > 0.0 && self.pi <= 1.0) {
            return bad(format!("pi {} outside (0, 1]", self.pi));
        }
        if !(self.rcond > 0.0 && self.rcond < 1.0) {
            return bad(format!("rcond {} outside (0, 1)", self.rcond));
        }
        match self.k_rule {
            KRule::Fixed(0) => return bad("k must be at least 1".into()),
            KRule::Exponent(eta) if !(eta > 0.0 && eta < 1.0) => {
                return bad(format!("k exponent {eta} outside (0, 1)"))
            }
            _ => {}
        }
        Ok(())
    }

    /// Resolves `s`, `k` and the OLS gates for a dataset.
    pub fn tree_params(&self, ds: &Dataset) -> Result<TreeParams> {
        self.validate()?;
        let s = self.subsample_size(ds.n());
        let k = self.leaf_size(s);
        if s < 2 {
            return Err(Error::Config(format!("subsample size {s} is below 2")));
        }
        if k > s {
            return Err(Error::Config(format!("k = {k} exceeds subsample size {s}")));
        }
        Ok(TreeParams {
            subsample: s,
            k,
            alpha: self.alpha,
            pi: self.pi,
            min_count: self.min_count.unwrap_or(ds.d_x() + 2),
            rcond: self.rcond,
        })
    }
}

/// Leaf of every observation plus a leaf → rows inverse index.
#[derive(Clone, Debug, PartialEq)]
struct LeafIndex {
    row_leaf: Vec<u32>,
    offsets: Vec<u32>,
    rows: Vec<u32>,
}

impl LeafIndex {
    fn build(tree: &FittedTree, ds: &Dataset) -> Self {
        let row_leaf = tree.row_leaves(ds);
        let mut offsets = vec![0u32; tree.leaves.len() + 1];
        for &l in &row_leaf {
            offsets[l as usize + 1] += 1;
        }
        for i in 0..tree.leaves.len() {
            offsets[i + 1] += offsets[i];
        }
        let mut fill = offsets.clone();
        let mut rows = vec![0u32; row_leaf.len()];
        for (i, &l) in row_leaf.iter().enumerate() {
            rows[fill[l as usize] as usize] = i as u32;
            fill[l as usize] += 1;
        }
        LeafIndex {
            row_leaf,
            offsets,
            rows,
        }
    }

    fn rows_in(&self, leaf: usize) -> &[u32] {
        &self.rows[self.offsets[leaf] as usize..self.offsets[leaf + 1] as usize]
    }
}

#[derive(Clone, Debug)]
pub struct Forest {
    cfg: ForestConfig,
    params: TreeParams,
    ds: Dataset,
    fingerprint: String,
    trees: Vec<FittedTree>,
    index: Vec<LeafIndex>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BetaEstimate {
    pub beta_bar: Vec<f64>,
    pub valid_trees: usize,
    pub per_tree_ok: Vec<bool>,
    pub a_counts: Vec<usize>,
    /// Fewer than half of the trees contributed.
    pub unreliable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ThetaSummary {
    /// Rows with `θ̂(z, Zᵢ) > 0`.
    pub support: usize,
    pub sum: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CovarianceEstimate {
    pub omega_bar: Matrix,
    pub lambda_hat: Matrix,
    pub sigma_hat: Matrix,
    pub theta: ThetaSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Prediction {
    pub z: Vec<f64>,
    pub beta: Vec<f64>,
    pub se: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub level: f64,
    pub valid_trees: usize,
    pub unreliable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FitSummary {
    pub trees: usize,
    pub subsample: usize,
    pub k: usize,
    pub leaves: usize,
    pub invalid_leaf_fraction: f64,
    pub empty_leaf_fraction: f64,
    pub forced_terminal_leaves: usize,
    pub mean_depth: f64,
}

/// Fits `cfg.n_trees` trees in parallel; output does not depend on the
/// number of worker threads.
pub fn fit_forest(ds: &Dataset, cfg: &ForestConfig) -> Result<Forest> {
    let params = cfg.tree_params(ds)?;
    ds.ensure_unit_cube()?;
    let trees: Vec<FittedTree> = (0..cfg.n_trees)
        .into_par_iter()
        .map(|b| grow_tree(ds, &params, derive_seed(cfg.master_seed, b as u64)))
        .collect::<Result<_>>()?;
    Ok(Forest::assemble(cfg.clone(), params, ds.clone(), trees))
}

impl Forest {
    fn assemble(
        cfg: ForestConfig,
        params: TreeParams,
        ds: Dataset,
        trees: Vec<FittedTree>,
    ) -> Self {
        let index = trees.par_iter().map(|t| LeafIndex::build(t, &ds)).collect();
        Forest {
            fingerprint: ds.fingerprint(),
            cfg,
            params,
            ds,
            trees,
            index,
        }
    }

    pub fn config(&self) -> &ForestConfig {
        &self.cfg
    }

    pub fn params(&self) -> &TreeParams {
        &self.params
    }

    pub fn dataset(&self) -> &Dataset {
        &self.ds
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn trees(&self) -> &[FittedTree] {
        &self.trees
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    /// Errors unless `ds` is the dataset this forest was trained on.
    pub fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        let found = ds.fingerprint();
        if found != self.fingerprint {
            return Err(Error::Fingerprint {
                expected: self.fingerprint.clone(),
                found,
            });
        }
        Ok(())
    }

    pub fn summary(&self) -> FitSummary {
        let leaves: Vec<&Leaf> = self.trees.iter().flat_map(|t| &t.leaves).collect();
        let total = leaves.len().max(1) as f64;
        FitSummary {
            trees: self.trees.len(),
            subsample: self.params.subsample,
            k: self.params.k,
            leaves: leaves.len(),
            invalid_leaf_fraction: leaves.iter().filter(|l| !l.fit.ok).count() as f64 / total,
            empty_leaf_fraction: leaves.iter().filter(|l| l.a_count() == 0).count() as f64 / total,
            forced_terminal_leaves: leaves.iter().filter(|l| l.forced_terminal).count(),
            mean_depth: self.trees.iter().map(|t| t.depth() as f64).sum::<f64>()
                / self.trees.len() as f64,
        }
    }

    /// Leaf index of `z` in every tree, after validating the point.
    pub fn leaves_at(&self, z: &[f64]) -> Result<Vec<usize>> {
        let z = self.ds.check_point(z)?;
        Ok(self.trees.iter().map(|t| t.leaf_of(&z)).collect())
    }

    fn leaves_at_row(&self, i: usize) -> Vec<usize> {
        self.index
            .iter()
            .map(|ix| ix.row_leaf[i] as usize)
            .collect()
    }

    fn aggregate_beta(&self, leaves: &[usize]) -> Result<BetaEstimate> {
        let d_x = self.ds.d_x();
        let mut sum = vec![0.0; d_x];
        let mut per_tree_ok = Vec::with_capacity(leaves.len());
        let mut a_counts = Vec::with_capacity(leaves.len());
        let mut valid = 0usize;
        for (tree, &l) in self.trees.iter().zip(leaves) {
            let leaf = &tree.leaves[l];
            per_tree_ok.push(leaf.fit.ok);
            a_counts.push(leaf.a_count());
            if leaf.fit.ok {
                valid += 1;
                for (s, b) in sum.iter_mut().zip(&leaf.fit.beta) {
                    *s += b;
                }
            }
        }
        if valid == 0 {
            return Err(Error::NoValidLeaf);
        }
        let beta_bar = sum.into_iter().map(|s| s / valid as f64).collect();
        Ok(BetaEstimate {
            beta_bar,
            valid_trees: valid,
            per_tree_ok,
            a_counts,
            unreliable: (valid as f64) / (self.trees.len() as f64) < RELIABLE_SHARE,
        })
    }

    /// `β̄(z)`: mean of the valid leaf fits containing `z`.
    pub fn beta_bar(&self, z: &[f64]) -> Result<BetaEstimate> {
        self.aggregate_beta(&self.leaves_at(z)?)
    }

    /// `β̄(Zᵢ)` for a training row, reusing the cached leaf assignment.
    pub fn beta_bar_at_row(&self, i: usize) -> Result<Vec<f64>> {
        Ok(self.aggregate_beta(&self.leaves_at_row(i))?.beta_bar)
    }

    /// `β̄(Zᵢ)` for every training row; `None` where no tree is valid.
    pub fn beta_bar_rows(&self) -> Vec<Option<Vec<f64>>> {
        (0..self.ds.n())
            .into_par_iter()
            .map(|i| self.beta_bar_at_row(i).ok())
            .collect()
    }

    /// `Ω̄(z)` and `γ̄(z)` averaged over trees whose leaf at `z` holds
    /// estimation rows.
    fn averaged_system(&self, leaves: &[usize]) -> Option<(Matrix, Vec<f64>)> {
        let d_x = self.ds.d_x();
        let mut omega = Matrix::zeros(d_x, d_x);
        let mut gamma = vec![0.0; d_x];
        let mut used = 0usize;
        for (tree, &l) in self.trees.iter().zip(leaves) {
            let g: &GramSystem = &tree.leaves[l].gram;
            if g.count() == 0 {
                continue;
            }
            used += 1;
            omega.add_assign(&g.omega());
            for (a, b) in gamma.iter_mut().zip(g.gamma()) {
                *a += b;
            }
        }
        if used == 0 {
            return None;
        }
        let inv = 1.0 / used as f64;
        Some((
            omega.scaled(inv),
            gamma.into_iter().map(|v| v * inv).collect(),
        ))
    }

    pub fn omega_bar(&self, z: &[f64]) -> Result<Matrix> {
        self.averaged_system(&self.leaves_at(z)?)
            .map(|(o, _)| o)
            .ok_or(Error::NoValidLeaf)
    }

    /// `β̌(z) = Ω̄(z)⁻¹ γ̄(z)`.
    pub fn beta_check(&self, z: &[f64]) -> Result<Vec<f64>> {
        let (omega, gamma) = self
            .averaged_system(&self.leaves_at(z)?)
            .ok_or(Error::NoValidLeaf)?;
        let rhs = Matrix::from_row_major(gamma.len(), 1, gamma)?;
        Ok(spd_solve_gated(&omega, &rhs, self.cfg.rcond)?
            .as_slice()
            .to_vec())
    }

    /// `S(z, Zᵢ, ω_b)`.
    pub fn s_weight(&self, b: usize, z: &[f64], i: usize) -> Result<f64> {
        let z = self.ds.check_point(z)?;
        let leaf = self.trees[b].leaf_of(&z);
        Ok(self.s_weight_in(b, leaf, i))
    }

    fn s_weight_in(&self, b: usize, leaf: usize, i: usize) -> f64 {
        let a = self.trees[b].leaves[leaf].a_count();
        if a > 0 && self.index[b].row_leaf[i] as usize == leaf {
            1.0 / a as f64
        } else {
            0.0
        }
    }

    /// `θ̂(z, Zᵢ)` for one row.
    pub fn theta_hat(&self, z: &[f64], i: usize) -> Result<f64> {
        let leaves = self.leaves_at(z)?;
        let sum: f64 = leaves
            .iter()
            .enumerate()
            .map(|(b, &l)| self.s_weight_in(b, l, i))
            .sum();
        Ok(sum / self.trees.len() as f64)
    }

    /// `θ̂(z, Zᵢ)` for every row at once.
    pub fn theta_row(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.theta_for_leaves(&self.leaves_at(z)?))
    }

    fn theta_for_leaves(&self, leaves: &[usize]) -> Vec<f64> {
        let mut theta = vec![0.0; self.ds.n()];
        for (b, &l) in leaves.iter().enumerate() {
            let a = self.trees[b].leaves[l].a_count();
            if a == 0 {
                continue;
            }
            let w = 1.0 / a as f64;
            for &r in self.index[b].rows_in(l) {
                theta[r as usize] += w;
            }
        }
        let inv = 1.0 / self.trees.len() as f64;
        theta.iter_mut().for_each(|t| *t *= inv);
        theta
    }

    /// `θ̂(Zᵢ, Zⱼ)` between two training rows.
    pub fn theta_rows(&self, i: usize, j: usize) -> f64 {
        let mut sum = 0.0;
        for (b, ix) in self.index.iter().enumerate() {
            let l = ix.row_leaf[i];
            if l == ix.row_leaf[j] {
                let a = self.trees[b].leaves[l as usize].a_count();
                if a > 0 {
                    sum += 1.0 / a as f64;
                }
            }
        }
        sum / self.trees.len() as f64
    }

    /// `Λ̂(z) = c · Σᵢ ε̂ᵢ(z)² θ̂(z, Zᵢ)² XᵢXᵢᵀ` with `c` from the configured
    /// [`LambdaScale`].
    pub fn lambda_hat(&self, z: &[f64], be: &BetaEstimate) -> Result<Matrix> {
        let theta = self.theta_row(z)?;
        Ok(self.lambda_from(&theta, &be.beta_bar))
    }

    fn lambda_from(&self, theta: &[f64], beta: &[f64]) -> Matrix {
        let d_x = self.ds.d_x();
        let mut lambda = Matrix::zeros(d_x, d_x);
        for (i, &t) in theta.iter().enumerate() {
            if t == 0.0 {
                continue;
            }
            let x = self.ds.x_row(i);
            let resid = self.ds.y_at(i) - crate::linalg::dot(x, beta);
            lambda.add_outer(x, resid * resid * t * t);
        }
        let c = self
            .cfg
            .lambda_scale
            .factor(self.params.subsample, self.ds.n());
        let mut out = lambda.scaled(c);
        out.symmetrize();
        out
    }

    fn bread(&self, leaves: &[usize]) -> Result<Matrix> {
        match self.cfg.bread {
            BreadMatrix::ForestAverage => self
                .averaged_system(leaves)
                .map(|(o, _)| o)
                .ok_or(Error::NoValidLeaf),
            BreadMatrix::FirstTree => self
                .trees
                .iter()
                .zip(leaves)
                .map(|(t, &l)| &t.leaves[l].gram)
                .find(|g| g.count() > 0)
                .map(GramSystem::omega)
                .ok_or(Error::NoValidLeaf),
            BreadMatrix::FullSample => {
                let d_x = self.ds.d_x();
                let mut m = Matrix::zeros(d_x, d_x);
                for i in 0..self.ds.n() {
                    m.add_outer(self.ds.x_row(i), 1.0);
                }
                Ok(m.scaled(1.0 / self.ds.n() as f64))
            }
        }
    }

    /// `Σ̂(z) = Ω⁻¹ Λ̂(z) Ω⁻¹` with the configured bread.
    pub fn sigma_hat(&self, z: &[f64]) -> Result<CovarianceEstimate> {
        let leaves = self.leaves_at(z)?;
        let be = self.aggregate_beta(&leaves)?;
        self.covariance_for(&leaves, &be)
    }

    fn covariance_for(&self, leaves: &[usize], be: &BetaEstimate) -> Result<CovarianceEstimate> {
        let theta = self.theta_for_leaves(leaves);
        let lambda_hat = self.lambda_from(&theta, &be.beta_bar);
        let omega = self.bread(leaves)?;
        let sigma_hat = sandwich(&omega, &lambda_hat, self.cfg.rcond)?;
        let support = theta.iter().filter(|t| **t > 0.0).count();
        Ok(CovarianceEstimate {
            omega_bar: omega,
            lambda_hat,
            sigma_hat,
            theta: ThetaSummary {
                support,
                sum: theta.iter().sum(),
                max: theta.iter().cloned().fold(0.0, f64::max),
            },
        })
    }

    /// `β̄_j ± q · √Σ̂_jj` at coverage `level`.
    pub fn confidence_interval(&self, z: &[f64], level: f64) -> Result<Prediction> {
        let leaves = self.leaves_at(z)?;
        let be = self.aggregate_beta(&leaves)?;
        let cov = self.covariance_for(&leaves, &be)?;
        interval(z.to_vec(), &be, &cov.sigma_hat, level)
    }

    /// Same as [`Forest::confidence_interval`] at a training row.
    pub fn confidence_interval_at_row(&self, i: usize, level: f64) -> Result<Prediction> {
        let leaves = self.leaves_at_row(i);
        let be = self.aggregate_beta(&leaves)?;
        let cov = self.covariance_for(&leaves, &be)?;
        interval(self.ds.z_row(i).to_vec(), &be, &cov.sigma_hat, level)
    }
}

fn sandwich(omega: &Matrix, lambda: &Matrix, rcond: f64) -> Result<Matrix> {
    let left = spd_solve_gated(omega, lambda, rcond)?;
    let mut sigma = spd_solve_gated(omega, &left.transpose(), rcond)?;
    sigma.symmetrize();
    Ok(sigma)
}

pub fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "coverage level {level} outside (0, 1)"
        )))
    }
}

fn interval(z: Vec<f64>, be: &BetaEstimate, sigma: &Matrix, level: f64) -> Result<Prediction> {
    check_level(level)?;
    let q = normal_quantile(0.5 * (1.0 + level))?;
    let mut se = Vec::with_capacity(be.beta_bar.len());
    for j in 0..be.beta_bar.len() {
        let v = sigma[(j, j)];
        if v < -1e-12 * sigma.max_abs().max(1.0) {
            return Err(Error::Numerical(format!(
                "negative variance {v} for coefficient {j}"
            )));
        }
        se.push(v.max(0.0).sqrt());
    }
    let lo = be
        .beta_bar
        .iter()
        .zip(&se)
        .map(|(b, s)| b - q * s)
        .collect();
    let hi = be
        .beta_bar
        .iter()
        .zip(&se)
        .map(|(b, s)| b + q * s)
        .collect();
    Ok(Prediction {
        z,
        beta: be.beta_bar.clone(),
        se,
        lo,
        hi,
        level,
        valid_trees: be.valid_trees,
        unreliable: be.unreliable,
    })
}

// ---------------------------------------------------------------------------
// Model file

#[derive(Serialize, Deserialize)]
struct ModelFile {
    version: u32,
    config: ForestConfig,
    subsample: usize,
    k: usize,
    min_count: usize,
    fingerprint: String,
    dataset: Dataset,
    trees: Vec<TreeRecord>,
}

#[derive(Serialize, Deserialize)]
struct TreeRecord {
    seed: u64,
    a_indices: Vec<u32>,
    b_indices: Vec<u32>,
    nodes: Vec<NodeRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum NodeRecord {
    Split {
        #[serde(flatten)]
        rule: SplitRule,
        left: usize,
        right: usize,
        b_count: usize,
    },
    Leaf {
        leaf: LeafRecord,
        b_count: usize,
    },
}

#[derive(Serialize, Deserialize)]
struct LeafRecord {
    id: usize,
    beta: Vec<f64>,
    ok: bool,
    a_count: usize,
    a_rows: Vec<u32>,
    forced_terminal: bool,
}

impl Forest {
    pub fn to_json(&self) -> Result<String> {
        let trees = self
            .trees
            .iter()
            .map(|t| TreeRecord {
                seed: t.seed,
                a_indices: t.a_indices.clone(),
                b_indices: t.b_indices.clone(),
                nodes: t
                    .nodes
                    .iter()
                    .map(|n| match &n.kind {
                        NodeKind::Split { rule, left, right } => NodeRecord::Split {
                            rule: *rule,
                            left: *left,
                            right: *right,
                            b_count: n.b_count,
                        },
                        NodeKind::Leaf { leaf } => {
                            let l = &t.leaves[*leaf];
                            NodeRecord::Leaf {
                                leaf: LeafRecord {
                                    id: *leaf,
                                    beta: l.fit.beta.clone(),
                                    ok: l.fit.ok,
                                    a_count: l.a_count(),
                                    a_rows: l.a_rows.clone(),
                                    forced_terminal: l.forced_terminal,
                                },
                                b_count: n.b_count,
                            }
                        }
                    })
                    .collect(),
            })
            .collect();
        let file = ModelFile {
            version: MODEL_VERSION,
            config: self.cfg.clone(),
            subsample: self.params.subsample,
            k: self.params.k,
            min_count: self.params.min_count,
            fingerprint: self.fingerprint.clone(),
            dataset: self.ds.clone(),
            trees,
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile =
            serde_json::from_str(text).map_err(|e| Error::Schema(format!("model file: {e}")))?;
        if file.version != MODEL_VERSION {
            return Err(Error::Schema(format!(
                "unsupported model version {}",
                file.version
            )));
        }
        let ds = file.dataset;
        let found = ds.fingerprint();
        if found != file.fingerprint {
            return Err(Error::Fingerprint {
                expected: file.fingerprint,
                found,
            });
        }
        let params = TreeParams {
            subsample: file.subsample,
            k: file.k,
            alpha: file.config.alpha,
            pi: file.config.pi,
            min_count: file.min_count,
            rcond: file.config.rcond,
        };
        let corrupt = |m: &str| Error::Schema(format!("model file: {m}"));
        let mut trees = Vec::with_capacity(file.trees.len());
        for rec in file.trees {
            let n_leaves = rec
                .nodes
                .iter()
                .filter(|n| matches!(n, NodeRecord::Leaf { .. }))
                .count();
            let mut nodes = Vec::with_capacity(rec.nodes.len());
            let mut leaves: Vec<Option<Leaf>> = vec![None; n_leaves];
            let root = crate::tree::NodeRegion::root(ds.z_kinds());
            for n in rec.nodes {
                match n {
                    NodeRecord::Split {
                        rule,
                        left,
                        right,
                        b_count,
                    } => nodes.push(crate::tree::TreeNode {
                        b_count,
                        kind: NodeKind::Split { rule, left, right },
                    }),
                    NodeRecord::Leaf { leaf, b_count } => {
                        if leaf.id >= n_leaves || leaves[leaf.id].is_some() {
                            return Err(corrupt("bad leaf id"));
                        }
                        if leaf.a_count != leaf.a_rows.len()
                            || leaf.a_rows.iter().any(|&r| r as usize >= ds.n())
                        {
                            return Err(corrupt("leaf rows inconsistent"));
                        }
                        leaves[leaf.id] = Some(Leaf {
                            region: root.clone(),
                            b_count,
                            a_rows: leaf.a_rows,
                            gram: GramSystem::new(ds.d_x()),
                            fit: crate::linalg::OlsFit {
                                beta: leaf.beta,
                                rss: 0.0,
                                ok: leaf.ok,
                                condition_hint: 0.0,
                            },
                            forced_terminal: leaf.forced_terminal,
                        });
                        nodes.push(crate::tree::TreeNode {
                            b_count,
                            kind: NodeKind::Leaf { leaf: leaf.id },
                        });
                    }
                }
            }
            for n in &nodes {
                if let NodeKind::Split { rule, left, right } = &n.kind {
                    if *left >= nodes.len() || *right >= nodes.len() || rule.dim >= ds.d_z() {
                        return Err(corrupt("split references out of range"));
                    }
                }
            }
            let stored: Vec<Leaf> = leaves
                .into_iter()
                .collect::<Option<_>>()
                .ok_or_else(|| corrupt("missing leaf"))?;
            let mut tree = FittedTree {
                seed: rec.seed,
                nodes,
                leaves: stored.clone(),
                a_indices: rec.a_indices,
                b_indices: rec.b_indices,
            };
            tree.rebuild_regions(ds.z_kinds());
            tree.refit_leaves(&ds, params.min_count, params.rcond);
            for (fresh, old) in tree.leaves.iter().zip(&stored) {
                if fresh.fit.ok != old.fit.ok
                    || fresh
                        .fit
                        .beta
                        .iter()
                        .zip(&old.fit.beta)
                        .any(|(a, b)| a.to_bits() != b.to_bits())
                {
                    return Err(corrupt("stored leaf fit does not match its rows"));
                }
            }
            trees.push(tree);
        }
        if trees.is_empty() {
            return Err(corrupt("no trees"));
        }
        Ok(Forest::assemble(file.config, params, ds, trees))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
