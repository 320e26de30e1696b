//! Synthetic data-generating processes and the Monte Carlo harness.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ZKind};
use crate::error::{Error, Result};
use crate::forest::{fit_forest, ForestConfig, KRule};
use crate::inference::lm_test;
use crate::seeding::{derive_seed, rng_from};

/// Share of failed replications above which a run aborts.
const MAX_FAILED_SHARE: f64 = 0.2;

pub const LM_NOMINAL: f64 = 0.05;

/// The eleven evaluation points `c · 1`, `c = 0, 0.1, …, 1`.
pub fn test_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Model {
    /// One bump in the slope along a single `Z`.
    M1,
    /// Product of two bumps, `d_Z = 2`.
    M2,
    /// Product of three logistic switches, `d_Z = 3`.
    M3,
    /// Six limiting regimes over five switches, `d_Z = 5`.
    M5,
    /// Friedman's function as the slope, `d_Z = 5`, generated without
    /// intercept and with unit noise.
    Friedman,
    /// Constant coefficients.
    HomogeneousLinear {
        intercept: f64,
        slope: f64,
        d_z: usize,
    },
}

impl Model {
    pub fn d_z(&self) -> usize {
        match self {
            Model::M1 => 1,
            Model::M2 => 2,
            Model::M3 => 3,
            Model::M5 | Model::Friedman => 5,
            Model::HomogeneousLinear { d_z, .. } => *d_z,
        }
    }

    pub fn default_noise_sd(&self) -> f64 {
        match self {
            Model::Friedman => 1.0,
            _ => 0.5,
        }
    }

    pub fn name(&self) -> String {
        match self {
            Model::M1 => "m1".into(),
            Model::M2 => "m2".into(),
            Model::M3 => "m3".into(),
            Model::M5 => "m5".into(),
            Model::Friedman => "friedman".into(),
            Model::HomogeneousLinear { d_z, .. } => format!("homogeneous_linear_dz{d_z}"),
        }
    }
}

fn logistic(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

/// Smooth plateau: 1 outside `[0.3, 0.7]`, 2 inside.
fn bump(z: f64) -> f64 {
    1.0 + logistic(100.0 * (z - 0.3)) - logistic(100.0 * (z - 0.7))
}

fn switch(z: f64) -> f64 {
    logistic(100.0 * (z - 0.5))
}

/// Slope coefficient `β₁(z)`.
pub fn beta1_eval(model: &Model, z: &[f64]) -> Result<f64> {
    if z.len() != model.d_z() {
        return Err(Error::Dim {
            expected: model.d_z(),
            got: z.len(),
        });
    }
    Ok(match model {
        Model::M1 => 5.0 * bump(z[0]),
        Model::M2 => {
            let (f1, f2) = (bump(z[0]), bump(z[1]));
            2.0 * f1 * f2 - 2.0 * f1 * (1.0 - f2)
        }
        Model::M3 => {
            let (f1, f2, f3) = (switch(z[0]), switch(z[1]), switch(z[2]));
            2.0 * f1 * f2 * f3 - f1 * f2 * (1.0 - f3) - 1.5 * f1 * (1.0 - f2)
        }
        Model::M5 => {
            let f: Vec<f64> = z.iter().map(|&v| switch(v)).collect();
            f[0] * f[1] * f[2] - f[0] * f[1] * (1.0 - f[2]) - 1.5 * f[0] * (1.0 - f[1])
                + 1.5 * (1.0 - f[0]) * f[3]
                - 0.8 * (1.0 - f[0]) * (1.0 - f[3]) * f[4]
                + 0.7 * (1.0 - f[0]) * (1.0 - f[3]) * (1.0 - f[4])
        }
        Model::Friedman => {
            10.0 * (std::f64::consts::PI * z[0] * z[1]).sin()
                + 20.0 * (z[2] - 0.5).powi(2)
                + 10.0 * z[3]
                + 5.0 * z[4]
        }
        Model::HomogeneousLinear { slope, .. } => *slope,
    })
}

/// `(β₀(z), β₁(z))`, the coefficients of the fitted `(1, X)` design.
pub fn true_beta(model: &Model, z: &[f64]) -> Result<Vec<f64>> {
    let b0 = match model {
        Model::HomogeneousLinear { intercept, .. } => *intercept,
        _ => 0.0,
    };
    Ok(vec![b0, beta1_eval(model, z)?])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub model: Model,
    pub n: usize,
    /// Defaults to the model's own noise level.
    #[serde(default)]
    pub noise_sd: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl DgpSpec {
    pub fn new(model: Model, n: usize, seed: u64) -> Self {
        DgpSpec {
            model,
            n,
            noise_sd: None,
            seed,
        }
    }

    pub fn with_noise(mut self, sd: f64) -> Self {
        self.noise_sd = Some(sd);
        self
    }

    pub fn noise(&self) -> f64 {
        self.noise_sd
            .unwrap_or_else(|| self.model.default_noise_sd())
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 10 {
            return Err(Error::Config(format!("sample size {} is below 10", self.n)));
        }
        let sd = self.noise();
        if !(sd >= 0.0 && sd.is_finite()) {
            return Err(Error::Config(format!("noise sd {sd} must be non-negative")));
        }
        if self.model.d_z() == 0 {
            return Err(Error::Config("model needs at least one Z column".into()));
        }
        Ok(())
    }
}

/// Draws `n` observations; the returned dataset carries the intercept column.
pub fn generate(spec: &DgpSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = rng_from(spec.seed);
    let d_z = spec.model.d_z();
    let noise = Normal::new(0.0, spec.noise()).map_err(|e| Error::Config(e.to_string()))?;
    let mut y = Vec::with_capacity(spec.n);
    let mut x_rows = Vec::with_capacity(spec.n);
    let mut z_rows = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let z: Vec<f64> = (0..d_z).map(|_| rng.random::<f64>()).collect();
        let x: f64 = rng.random();
        let b = true_beta(&spec.model, &z)?;
        y.push(b[0] + b[1] * x + noise.sample(&mut rng));
        x_rows.push(vec![x]);
        z_rows.push(z);
    }
    let ds = Dataset::from_unit_cube(y, x_rows, z_rows, vec![ZKind::Continuous; d_z])?;
    ds.augment_intercept()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// `B = 3000`, 500 replications.
    Paper,
    /// `B = 500`, 100 replications.
    Desk,
}

impl Preset {
    pub fn forest(self) -> ForestConfig {
        ForestConfig {
            n_trees: match self {
                Preset::Paper => 3000,
                Preset::Desk => 500,
            },
            s_fraction: 0.8,
            k_rule: KRule::Exponent(1.0 / 6.0),
            alpha: 0.005,
            ..ForestConfig::default()
        }
    }

    pub fn reps(self) -> usize {
        match self {
            Preset::Paper => 500,
            Preset::Desk => 100,
        }
    }
}

/// Mean, sd, non-excess kurtosis and skewness of one sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Moments {
    pub mean: f64,
    pub sd: f64,
    pub kurtosis: f64,
    pub skewness: f64,
}

impl Moments {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        if values.is_empty() {
            return Moments::default();
        }
        let mean = values.iter().sum::<f64>() / n;
        let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
        for v in values {
            let d = v - mean;
            let d2 = d * d;
            m2 += d2;
            m3 += d2 * d;
            m4 += d2 * d2;
        }
        let (m2, m3, m4) = (m2 / n, m3 / n, m4 / n);
        let sd = if values.len() > 1 {
            (m2 * n / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        let (kurtosis, skewness) = if m2 > 0.0 {
            (m4 / (m2 * m2), m3 / m2.powf(1.5))
        } else {
            (0.0, 0.0)
        };
        Moments {
            mean,
            sd,
            kurtosis,
            skewness,
        }
    }

    fn average(all: &[Moments]) -> Self {
        let k = all.len().max(1) as f64;
        Moments {
            mean: all.iter().map(|m| m.mean).sum::<f64>() / k,
            sd: all.iter().map(|m| m.sd).sum::<f64>() / k,
            kurtosis: all.iter().map(|m| m.kurtosis).sum::<f64>() / k,
            skewness: all.iter().map(|m| m.skewness).sum::<f64>() / k,
        }
    }
}

/// Per-coefficient statistics at one test point `c · 1`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PointStats {
    pub point: f64,
    pub bias: Vec<f64>,
    pub mse: Vec<f64>,
    pub coverage_90: Vec<f64>,
    pub coverage_95: Vec<f64>,
    /// Mean standard error reported by the forest.
    pub mean_se: Vec<f64>,
    /// Across-replication standard deviation of the estimate.
    pub sd_estimate: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct McReport {
    pub model: String,
    pub n: usize,
    pub reps: usize,
    pub completed: usize,
    pub failures: Vec<String>,
    /// Only one replication completed, so across-rep spreads are zero.
    pub single_rep: bool,
    pub residual: Moments,
    /// Estimation error moments per coefficient (intercept, slope).
    pub coef_error: Vec<Moments>,
    /// Mean squared error of `β̄(Zᵢ)` against the truth, per coefficient.
    pub in_sample_mse: Vec<f64>,
    pub points: Vec<PointStats>,
    pub lm_rejection_rate: f64,
    pub lm_dof: usize,
}

impl McReport {
    pub fn point(&self, c: f64) -> Option<&PointStats> {
        self.points.iter().find(|p| (p.point - c).abs() < 1e-9)
    }
}

struct RepOutcome {
    residual: Moments,
    coef_error: Vec<Moments>,
    in_sample_mse: Vec<f64>,
    /// Per test point: (estimate, se, covered at 90, covered at 95).
    points: Vec<(Vec<f64>, Vec<f64>, Vec<bool>, Vec<bool>)>,
    lm_reject: bool,
}

fn run_rep(spec: &DgpSpec, cfg: &ForestConfig, rep: usize) -> Result<RepOutcome> {
    let rep_seed = derive_seed(spec.seed, rep as u64);
    let ds = generate(&DgpSpec {
        seed: rep_seed,
        ..spec.clone()
    })?;
    let cfg = ForestConfig {
        master_seed: derive_seed(rep_seed, cfg.master_seed),
        ..cfg.clone()
    };
    let forest = fit_forest(&ds, &cfg)?;
    let d_x = ds.d_x();

    let mut residuals = Vec::with_capacity(ds.n());
    let mut errors = vec![Vec::with_capacity(ds.n()); d_x];
    for (i, b) in forest.beta_bar_rows().into_iter().enumerate() {
        let b = b.ok_or(Error::NoValidLeaf)?;
        residuals.push(ds.y_at(i) - crate::linalg::dot(ds.x_row(i), &b));
        let truth = true_beta(&spec.model, ds.z_row(i))?;
        for j in 0..d_x {
            errors[j].push(b[j] - truth[j]);
        }
    }
    let in_sample_mse = errors
        .iter()
        .map(|e| e.iter().map(|v| v * v).sum::<f64>() / e.len() as f64)
        .collect();

    let q90 = crate::inference::normal_quantile(0.95)?;
    let q95 = crate::inference::normal_quantile(0.975)?;
    let mut points = Vec::new();
    for c in test_grid() {
        let z = vec![c; spec.model.d_z()];
        let pred = forest.confidence_interval(&z, 0.95)?;
        let truth = true_beta(&spec.model, &z)?;
        let cover = |q: f64| -> Vec<bool> {
            (0..d_x)
                .map(|j| (pred.beta[j] - truth[j]).abs() <= q * pred.se[j])
                .collect()
        };
        points.push((pred.beta.clone(), pred.se.clone(), cover(q90), cover(q95)));
    }
    let lm = lm_test(&ds, &forest)?;
    Ok(RepOutcome {
        residual: Moments::of(&residuals),
        coef_error: errors.iter().map(|e| Moments::of(e)).collect(),
        in_sample_mse,
        points,
        lm_reject: lm.p_value < LM_NOMINAL,
    })
}

/// Runs `reps` independent replications in parallel. Results depend only on
/// `(spec, cfg, reps)`. When `out` is given the six tables are written there.
pub fn run_monte_carlo(
    spec: &DgpSpec,
    cfg: &ForestConfig,
    reps: usize,
    out: Option<&Path>,
) -> Result<McReport> {
    if reps == 0 {
        return Err(Error::Config("reps must be at least 1".into()));
    }
    spec.validate()?;
    cfg.validate()?;
    let outcomes: Vec<Result<RepOutcome>> = (0..reps)
        .into_par_iter()
        .map(|r| run_rep(spec, cfg, r))
        .collect();
    let mut ok = Vec::new();
    let mut failures = Vec::new();
    for (r, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(v) => ok.push(v),
            Err(e) => failures.push(format!("rep {r}: {e}")),
        }
    }
    if failures.len() as f64 > MAX_FAILED_SHARE * reps as f64 || ok.is_empty() {
        return Err(Error::Abort {
            failed: failures.len(),
            reps,
        });
    }
    let report = summarize(spec, reps, ok, failures);
    if let Some(dir) = out {
        write_tables(std::slice::from_ref(&report), dir)?;
    }
    Ok(report)
}

fn summarize(spec: &DgpSpec, reps: usize, ok: Vec<RepOutcome>, failures: Vec<String>) -> McReport {
    let k = ok.len() as f64;
    let d_x = ok[0].coef_error.len();
    let residual = Moments::average(&ok.iter().map(|o| o.residual).collect::<Vec<_>>());
    let coef_error = (0..d_x)
        .map(|j| Moments::average(&ok.iter().map(|o| o.coef_error[j]).collect::<Vec<_>>()))
        .collect();
    let in_sample_mse = (0..d_x)
        .map(|j| ok.iter().map(|o| o.in_sample_mse[j]).sum::<f64>() / k)
        .collect();
    let grid = test_grid();
    let mut points = Vec::with_capacity(grid.len());
    for (p, &c) in grid.iter().enumerate() {
        let truth = true_beta(&spec.model, &vec![c; spec.model.d_z()]).expect("grid matches d_z");
        let mut st = PointStats {
            point: c,
            bias: vec![0.0; d_x],
            mse: vec![0.0; d_x],
            coverage_90: vec![0.0; d_x],
            coverage_95: vec![0.0; d_x],
            mean_se: vec![0.0; d_x],
            sd_estimate: vec![0.0; d_x],
        };
        for j in 0..d_x {
            let est: Vec<f64> = ok.iter().map(|o| o.points[p].0[j]).collect();
            let err: Vec<f64> = est.iter().map(|e| e - truth[j]).collect();
            st.bias[j] = err.iter().sum::<f64>() / k;
            st.mse[j] = err.iter().map(|e| e * e).sum::<f64>() / k;
            st.coverage_90[j] = ok.iter().filter(|o| o.points[p].2[j]).count() as f64 / k;
            st.coverage_95[j] = ok.iter().filter(|o| o.points[p].3[j]).count() as f64 / k;
            st.mean_se[j] = ok.iter().map(|o| o.points[p].1[j]).sum::<f64>() / k;
            st.sd_estimate[j] = Moments::of(&est).sd;
        }
        points.push(st);
    }
    McReport {
        model: spec.model.name(),
        n: spec.n,
        reps,
        completed: ok.len(),
        failures,
        single_rep: ok.len() == 1,
        residual,
        coef_error,
        in_sample_mse,
        points,
        lm_rejection_rate: ok.iter().filter(|o| o.lm_reject).count() as f64 / k,
        lm_dof: spec.model.d_z(),
    }
}

pub const TABLE_FILES: [&str; 6] = [
    "goodness_of_fit.csv",
    "bias_mse_intercept.csv",
    "bias_mse_slope.csv",
    "coverage_intercept.csv",
    "coverage_slope.csv",
    "lm_size.csv",
];

const COEF_LABELS: [&str; 2] = ["intercept", "slope"];

/// Writes the six tables for one or more reports (typically one per `n`).
pub fn write_tables(reports: &[McReport], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut gof = csv::Writer::from_path(dir.join(TABLE_FILES[0]))?;
    gof.write_record(["model", "quantity", "statistic", "n", "value"])?;
    for r in reports {
        let mut blocks = vec![("residual".to_string(), r.residual)];
        for (j, m) in r.coef_error.iter().enumerate() {
            blocks.push((
                format!("{}_error", COEF_LABELS.get(j).unwrap_or(&"coef")),
                *m,
            ));
        }
        for (q, m) in blocks {
            for (name, v) in [
                ("mean", m.mean),
                ("standard_deviation", m.sd),
                ("kurtosis", m.kurtosis),
                ("skewness", m.skewness),
            ] {
                gof.write_record([&r.model, &q, name, &r.n.to_string(), &fmt(v)])?;
            }
        }
    }
    gof.flush()?;

    for (j, label) in COEF_LABELS.iter().enumerate() {
        let mut w = csv::Writer::from_path(dir.join(format!("bias_mse_{label}.csv")))?;
        w.write_record(["model", "point", "n", "bias", "mse"])?;
        for r in reports {
            for p in &r.points {
                w.write_record([
                    r.model.clone(),
                    fmt(p.point),
                    r.n.to_string(),
                    fmt(p.bias[j]),
                    fmt(p.mse[j]),
                ])?;
            }
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join(format!("coverage_{label}.csv")))?;
        w.write_record([
            "model",
            "point",
            "n",
            "coverage_90",
            "coverage_95",
            "mean_se",
            "sd_estimate",
        ])?;
        for r in reports {
            for p in &r.points {
                w.write_record([
                    r.model.clone(),
                    fmt(p.point),
                    r.n.to_string(),
                    fmt(p.coverage_90[j]),
                    fmt(p.coverage_95[j]),
                    fmt(p.mean_se[j]),
                    fmt(p.sd_estimate[j]),
                ])?;
            }
        }
        w.flush()?;
    }

    let mut w = csv::Writer::from_path(dir.join(TABLE_FILES[5]))?;
    w.write_record(["model", "n", "dof", "nominal", "rejection_rate", "reps"])?;
    for r in reports {
        w.write_record([
            r.model.clone(),
            r.n.to_string(),
            r.lm_dof.to_string(),
            fmt(LM_NOMINAL),
            fmt(r.lm_rejection_rate),
            r.completed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

/// Slope bias and MSE of `β̄(Zᵢ)` against the true slope over the sample.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SlopeAccuracy {
    pub n: usize,
    pub bias: f64,
    pub mse: f64,
}

/// One forest per sample size on the Friedman design.
pub fn friedman_study(ns: &[usize], cfg: &ForestConfig, seed: u64) -> Result<Vec<SlopeAccuracy>> {
    ns.iter()
        .map(|&n| {
            let spec = DgpSpec::new(Model::Friedman, n, derive_seed(seed, n as u64));
            let ds = generate(&spec)?;
            let forest = fit_forest(
                &ds,
                &ForestConfig {
                    master_seed: derive_seed(seed, !(n as u64)),
                    ..cfg.clone()
                },
            )?;
            let mut err = Vec::with_capacity(n);
            for (i, b) in forest.beta_bar_rows().into_iter().enumerate() {
                let b = b.ok_or(Error::NoValidLeaf)?;
                err.push(b[1] - beta1_eval(&Model::Friedman, ds.z_row(i))?);
            }
            Ok(SlopeAccuracy {
                n,
                bias: err.iter().sum::<f64>() / n as f64,
                mse: err.iter().map(|e| e * e).sum::<f64>() / n as f64,
            })
        })
        .collect()
}
