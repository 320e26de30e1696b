//! Homogeneity tests of `H₀: β(z) = β₀` and the reference distributions.

use std::collections::HashSet;

use rand::Rng;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::gamma::gamma_ur;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::forest::Forest;
use crate::linalg::{ols_solve, spd_solve_vec, GramSystem, Matrix};
use crate::seeding::rng_from;

pub const DEFAULT_PAIR_BUDGET: usize = 20_000;

/// `P(χ²_dof > x)`.
pub fn chi2_upper_tail(x: f64, dof: usize) -> Result<f64> {
    if !(x >= 0.0) {
        return Err(Error::Domain(format!(
            "chi-square argument {x} is negative"
        )));
    }
    if dof == 0 {
        return Err(Error::Domain(
            "chi-square needs at least one degree of freedom".into(),
        ));
    }
    if x == 0.0 {
        return Ok(1.0);
    }
    if x.is_infinite() {
        return Ok(0.0);
    }
    Ok(gamma_ur(dof as f64 / 2.0, x / 2.0).clamp(0.0, 1.0))
}

fn std_normal() -> Normal {
    Normal::standard()
}

/// Inverse of the standard normal CDF.
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("probability {p} outside (0, 1)")));
    }
    Ok(std_normal().inverse_cdf(p))
}

pub fn normal_cdf(x: f64) -> f64 {
    std_normal().cdf(x)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LmTestResult {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    pub m_vector: Vec<f64>,
    pub v_matrix: Vec<Vec<f64>>,
    /// Set when `M` vanished to rounding and the statistic was fixed at 0.
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GlrtResult {
    pub lambda: f64,
    pub rss0: f64,
    pub rss: f64,
    pub mu_hat: f64,
    pub nu_hat: f64,
    pub standardized: f64,
    pub p_value: f64,
    pub sigma2_hat: f64,
    pub pairs: usize,
    pub triples: usize,
    pub seed: u64,
    pub sigma_scaled: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GlrtOptions {
    pub pair_budget: usize,
    pub seed: u64,
    /// Multiply `μ̂` by `σ̂²` and `ν̂²` by `σ̂⁴`.
    pub scale_by_sigma: bool,
}

impl Default for GlrtOptions {
    fn default() -> Self {
        GlrtOptions {
            pair_budget: DEFAULT_PAIR_BUDGET,
            seed: 0,
            scale_by_sigma: true,
        }
    }
}

struct GlobalOls {
    residuals: Vec<f64>,
    rss: f64,
}

fn global_ols(ds: &Dataset, rcond: f64) -> Result<GlobalOls> {
    let mut sys = GramSystem::new(ds.d_x());
    for i in 0..ds.n() {
        sys.add_row(ds.x_row(i), ds.y_at(i));
    }
    let fit = ols_solve(&sys, ds.d_x(), rcond);
    if !fit.ok {
        return Err(Error::SingularMatrix(
            "global OLS design is rank deficient".into(),
        ));
    }
    let residuals: Vec<f64> = (0..ds.n())
        .map(|i| ds.y_at(i) - crate::linalg::dot(ds.x_row(i), &fit.beta))
        .collect();
    let rss = residuals.iter().map(|e| e * e).sum();
    Ok(GlobalOls { residuals, rss })
}

fn forest_residuals(f: &Forest, ds: &Dataset) -> Result<Vec<f64>> {
    f.beta_bar_rows()
        .into_iter()
        .enumerate()
        .map(|(i, b)| {
            let b = b.ok_or(Error::NoValidLeaf)?;
            Ok(ds.y_at(i) - crate::linalg::dot(ds.x_row(i), &b))
        })
        .collect()
}

/// Lagrange multiplier test of constant coefficients against `Z`-linear
/// moments, with a forest-residual robust variance.
pub fn lm_test(ds: &Dataset, f: &Forest) -> Result<LmTestResult> {
    f.check_dataset(ds)?;
    let n = ds.n();
    let (d_x, d_z) = (ds.d_x(), ds.d_z());
    let ols = global_ols(ds, f.config().rcond)?;

    let mut m = vec![0.0; d_z];
    for i in 0..n {
        for (mj, zj) in m.iter_mut().zip(ds.z_row(i)) {
            *mj += ols.residuals[i] * zj;
        }
    }

    let eps_rf = forest_residuals(f, ds)?;
    let mut szx = Matrix::zeros(d_z, d_x);
    let mut sxx = Matrix::zeros(d_x, d_x);
    let d_w = d_z + d_x;
    let mut meat = Matrix::zeros(d_w, d_w);
    let mut w = vec![0.0; d_w];
    for i in 0..n {
        let (x, z) = (ds.x_row(i), ds.z_row(i));
        for a in 0..d_z {
            for b in 0..d_x {
                szx[(a, b)] += z[a] * x[b];
            }
        }
        sxx.add_outer(x, 1.0);
        w[..d_z].copy_from_slice(z);
        w[d_z..].copy_from_slice(x);
        meat.add_outer(&w, eps_rf[i] * eps_rf[i]);
    }
    let meat = meat.scaled(1.0 / n as f64);

    // L̂ = [I : −Szx Sxx⁻¹]; solve Sxx · Gᵀ = Szxᵀ for G = Szx Sxx⁻¹.
    let g_t = crate::linalg::spd_solve(&sxx, &szx.transpose())?;
    let mut l = Matrix::zeros(d_z, d_w);
    for a in 0..d_z {
        l[(a, a)] = 1.0;
        for b in 0..d_x {
            l[(a, d_z + b)] = -g_t[(b, a)];
        }
    }
    let mut v = l.matmul(&meat)?.matmul(&l.transpose())?;
    v.symmetrize();

    let y_scale = ds.y().iter().map(|y| y.abs()).sum::<f64>().max(1.0);
    let m_norm = m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    let (statistic, degenerate) = if m_norm <= 1e-8 * y_scale {
        (0.0, true)
    } else {
        let sol = spd_solve_vec(&v.scaled(n as f64), &m)?;
        (crate::linalg::dot(&m, &sol).max(0.0), false)
    };
    Ok(LmTestResult {
        statistic,
        dof: d_z,
        p_value: chi2_upper_tail(statistic, d_z)?,
        m_vector: m,
        v_matrix: v.to_rows(),
        degenerate,
    })
}

/// Uniform distinct unordered pairs, all of them when the budget allows.
fn sample_pairs<R: Rng>(rng: &mut R, n: usize, budget: usize) -> Vec<(usize, usize)> {
    let total = n * (n - 1) / 2;
    if budget >= total {
        return (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .collect();
    }
    let mut seen = HashSet::with_capacity(budget);
    let mut out = Vec::with_capacity(budget);
    while out.len() < budget {
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        if i == j {
            continue;
        }
        let key = (i.min(j), i.max(j));
        if seen.insert(key) {
            out.push(key);
        }
    }
    out
}

/// Distinct triples `(i, j, l)` with `i` the shared anchor.
fn sample_triples<R: Rng>(rng: &mut R, n: usize, budget: usize) -> Vec<(usize, usize, usize)> {
    let total = n.saturating_mul(n - 1).saturating_mul(n.saturating_sub(2)) / 2;
    let budget = budget.min(total);
    let mut seen = HashSet::with_capacity(budget);
    let mut out = Vec::with_capacity(budget);
    while out.len() < budget {
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        let l = rng.random_range(0..n);
        if i == j || i == l || j == l {
            continue;
        }
        let key = (i, j.min(l), j.max(l));
        if seen.insert(key) {
            out.push(key);
        }
    }
    out
}

/// `Λ = (n/2) · ln(RSS₀ / RSS)`; negative when the forest fits worse.
pub fn likelihood_ratio(n: usize, rss0: f64, rss: f64) -> f64 {
    0.5 * n as f64 * (rss0 / rss).ln()
}

/// Generalized likelihood ratio test of constant coefficients, standardized
/// with plug-in moments of the forest weights. Experimental.
pub fn glrt_test(ds: &Dataset, f: &Forest, opts: &GlrtOptions) -> Result<GlrtResult> {
    f.check_dataset(ds)?;
    if opts.pair_budget == 0 {
        return Err(Error::Config("pair budget must be positive".into()));
    }
    let n = ds.n();
    let nf = n as f64;
    let d_x = ds.d_x() as f64;
    let s = f.params().subsample as f64;

    let rss0 = global_ols(ds, f.config().rcond)?.rss;
    let rss: f64 = forest_residuals(f, ds)?.iter().map(|e| e * e).sum();
    let yy: f64 = ds.y().iter().map(|y| y * y).sum();
    let floor = 1e-20 * yy.max(f64::MIN_POSITIVE);
    if rss <= floor || rss0 <= floor {
        return Err(Error::DegenerateFit(format!(
            "residual sums of squares vanish (forest {rss:.3e}, OLS {rss0:.3e})"
        )));
    }
    let lambda = likelihood_ratio(n, rss0, rss);
    let sigma2 = rss / nf;

    let diag: Vec<f64> = (0..n).map(|i| f.theta_rows(i, i)).collect();
    let e_diag = diag.iter().sum::<f64>() / nf;
    let e_diag2 = diag.iter().map(|t| t * t).sum::<f64>() / nf;

    let mut rng = rng_from(opts.seed);
    let pairs = sample_pairs(&mut rng, n, opts.pair_budget);
    let pair_theta: Vec<f64> = pairs.iter().map(|&(i, j)| f.theta_rows(i, j)).collect();
    let e_off2 = pair_theta.iter().map(|t| t * t).sum::<f64>() / pairs.len() as f64;
    let triples = sample_triples(&mut rng, n, opts.pair_budget);
    let cross = if triples.is_empty() {
        0.0
    } else {
        triples
            .iter()
            .map(|&(i, j, l)| f.theta_rows(i, j) * f.theta_rows(i, l))
            .sum::<f64>()
            / triples.len() as f64
    };

    let (s2, s4) = if opts.scale_by_sigma {
        (sigma2, sigma2 * sigma2)
    } else {
        (1.0, 1.0)
    };
    let mu_hat = s2 * d_x * (2.0 * (s * e_diag - 1.0) + s * s / nf * e_diag2 + s * s * e_off2);
    let nu2 = 4.0
        * d_x
        * s4
        * pair_theta
            .iter()
            .map(|t| (s * t + s * s * cross).powi(2))
            .sum::<f64>()
        / pairs.len() as f64;
    let nu_hat = nu2.sqrt();
    if !(nu_hat > 0.0) || !nu_hat.is_finite() {
        return Err(Error::Numerical(format!(
            "GLRT scale estimate {nu_hat} is not positive"
        )));
    }
    let standardized = (lambda - mu_hat) / nu_hat;
    Ok(GlrtResult {
        lambda,
        rss0,
        rss,
        mu_hat,
        nu_hat,
        standardized,
        p_value: 1.0 - normal_cdf(standardized),
        sigma2_hat: sigma2,
        pairs: pairs.len(),
        triples: triples.len(),
        seed: opts.seed,
        sigma_scaled: opts.scale_by_sigma,
    })
}
