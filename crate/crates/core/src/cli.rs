//! Batch command-line front end: `fit`, `predict`, `test`, `simulate`.
//!
//! Machine output is JSON on stdout (or CSV files); every failure is a single
//! JSON line `{"code": ..., "message": ...}` on stderr with a stable exit
//! status.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::data::{prepare, Schema};
use crate::error::Error;
use crate::forest::{check_level, fit_forest, Forest, ForestConfig};
use crate::inference::{glrt_test, lm_test, GlrtOptions, DEFAULT_PAIR_BUDGET};
use crate::simulation::{
    run_monte_carlo, write_tables, DgpSpec, McReport, Model, Preset, TABLE_FILES,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_PREDICT: i32 = 3;
pub const EXIT_FINGERPRINT: i32 = 4;
pub const EXIT_NUMERICAL: i32 = 5;

#[derive(Debug, Parser)]
#[command(
    name = "vcforest",
    version,
    about = "Varying-coefficient random forests"
)]
pub struct Cli {
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true, env = "VCF_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a forest and write the model file.
    Fit {
        data: PathBuf,
        schema: PathBuf,
        /// Forest configuration JSON; defaults apply to omitted fields.
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the configuration's master seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Estimate coefficients and confidence intervals at test points.
    Predict {
        model: PathBuf,
        /// CSV with one column per Z, on the original scale.
        points: PathBuf,
        #[arg(long, default_value_t = 0.95)]
        level: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Test for constant coefficients on the training data.
    Test {
        model: PathBuf,
        data: PathBuf,
        #[arg(long, value_enum)]
        test: TestKind,
        #[arg(long, default_value_t = DEFAULT_PAIR_BUDGET)]
        pair_budget: usize,
        /// Seed for the pair sampling of the likelihood-ratio test.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Drop the σ̂² factors from the likelihood-ratio moments.
        #[arg(long)]
        unscaled: bool,
    },
    /// Run a Monte Carlo experiment and write its tables.
    Simulate {
        spec: PathBuf,
        #[arg(long, value_enum, default_value_t = PresetArg::Desk)]
        preset: PresetArg,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TestKind {
    Lm,
    Glrt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    Paper,
    Desk,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Paper => Preset::Paper,
            PresetArg::Desk => Preset::Desk,
        }
    }
}

/// Failures carrying their exit status.
#[derive(Debug)]
pub struct CliError {
    pub exit: i32,
    pub code: String,
    pub message: String,
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let exit = match &e {
            Error::Fingerprint { .. } => EXIT_FINGERPRINT,
            Error::SingularMatrix(_)
            | Error::NoValidLeaf
            | Error::Numerical(_)
            | Error::DegenerateFit(_)
            | Error::Abort { .. } => EXIT_NUMERICAL,
            _ => EXIT_USAGE,
        };
        CliError {
            exit,
            code: e.code().into(),
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `args` (including the program name), runs the command and returns
/// the exit status.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(stdout, "{e}");
                return EXIT_OK;
            }
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ");
            emit_error(
                stderr,
                &CliError {
                    exit: EXIT_USAGE,
                    code: "UsageError".into(),
                    message: first.to_string(),
                },
            );
            return EXIT_USAGE;
        }
    };
    let threads = cli.threads;
    let outcome = crate::with_threads(threads, || dispatch(cli.command))
        .map_err(CliError::from)
        .and_then(|r| r);
    match outcome {
        Ok(value) => {
            let _ = writeln!(stdout, "{value}");
            EXIT_OK
        }
        Err(e) => {
            emit_error(stderr, &e);
            e.exit
        }
    }
}

fn emit_error(stderr: &mut dyn Write, e: &CliError) {
    let line = json!({ "code": e.code, "message": e.message });
    let _ = writeln!(stderr, "{line}");
}

fn dispatch(cmd: Command) -> CliResult<Value> {
    match cmd {
        Command::Fit {
            data,
            schema,
            config,
            out,
            seed,
        } => cmd_fit(&data, &schema, config.as_deref(), &out, seed),
        Command::Predict {
            model,
            points,
            level,
            out,
        } => cmd_predict(&model, &points, level, &out),
        Command::Test {
            model,
            data,
            test,
            pair_budget,
            seed,
            unscaled,
        } => cmd_test(&model, &data, test, pair_budget, seed, !unscaled),
        Command::Simulate {
            spec,
            preset,
            out,
            seed,
        } => cmd_simulate(&spec, preset.into(), &out, seed),
    }
}

pub fn cmd_fit(
    data: &Path,
    schema: &Path,
    config: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
) -> CliResult<Value> {
    let schema = Schema::from_path(schema)?;
    let mut cfg = match config {
        Some(p) => ForestConfig::from_json_str(&std::fs::read_to_string(p).map_err(Error::Io)?)?,
        None => ForestConfig::default(),
    };
    if let Some(s) = seed {
        cfg.master_seed = s;
    }
    cfg.validate()?;
    let ds = prepare(data, &schema)?;
    let forest = fit_forest(&ds, &cfg)?;
    forest.save(out)?;
    let summary = forest.summary();
    Ok(json!({
        "command": "fit",
        "model": out.display().to_string(),
        "n": ds.n(),
        "d_x": ds.d_x(),
        "d_z": ds.d_z(),
        "fingerprint": forest.fingerprint(),
        "summary": summary,
    }))
}

pub fn cmd_predict(model: &Path, points: &Path, level: f64, out: &Path) -> CliResult<Value> {
    check_level(level)?;
    let forest = Forest::load(model)?;
    let ds = forest.dataset();
    let names = ds.names().clone();

    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(points)
        .map_err(Error::from)?;
    let headers = reader.headers().map_err(Error::from)?.clone();
    let cols = names
        .z
        .iter()
        .map(|n| {
            headers
                .iter()
                .position(|h| h == n)
                .ok_or_else(|| Error::Schema(format!("points file lacks column `{n}`")))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut writer = csv::Writer::from_path(out).map_err(Error::from)?;
    let mut header: Vec<String> = names.z.clone();
    for prefix in ["beta", "se", "lo", "hi"] {
        header.extend(names.x.iter().map(|x| format!("{prefix}_{x}")));
    }
    header.extend(["valid_trees".into(), "unreliable".into(), "error".into()]);
    writer.write_record(&header).map_err(Error::from)?;

    let (mut ok, mut failed) = (0usize, 0usize);
    for (r, rec) in reader.records().enumerate() {
        let rec = rec.map_err(Error::from)?;
        let raw: Vec<String> = cols
            .iter()
            .map(|&c| rec.get(c).unwrap_or("").to_string())
            .collect();
        let result = raw
            .iter()
            .map(|t| {
                t.parse::<f64>().map_err(|_| Error::Parse {
                    row: r + 1,
                    column: "z".into(),
                    message: format!("`{t}` is not a number"),
                })
            })
            .collect::<Result<Vec<f64>, _>>()
            .and_then(|z| ds.map_point(&z))
            .and_then(|z| forest.confidence_interval(&z, level));
        let mut row = raw;
        match result {
            Ok(p) => {
                ok += 1;
                for v in [&p.beta, &p.se, &p.lo, &p.hi] {
                    row.extend(v.iter().map(|x| x.to_string()));
                }
                row.extend([
                    p.valid_trees.to_string(),
                    p.unreliable.to_string(),
                    String::new(),
                ]);
            }
            Err(e) => {
                failed += 1;
                row.extend(std::iter::repeat_n(String::new(), 4 * names.x.len()));
                row.extend(["0".into(), String::new(), format!("{}: {e}", e.code())]);
            }
        }
        writer.write_record(&row).map_err(Error::from)?;
    }
    writer.flush().map_err(Error::Io)?;
    if ok == 0 {
        return Err(CliError {
            exit: EXIT_PREDICT,
            code: "PredictionError".into(),
            message: format!("all {failed} prediction rows failed"),
        });
    }
    Ok(
        json!({ "command": "predict", "rows": ok + failed, "failed": failed, "level": level, "out": out.display().to_string() }),
    )
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_test(
    model: &Path,
    data: &Path,
    test: TestKind,
    pair_budget: usize,
    seed: u64,
    scale_by_sigma: bool,
) -> CliResult<Value> {
    let forest = Forest::load(model)?;
    let ds = match forest.dataset().load_like(data) {
        Ok(ds) => ds,
        // Data outside the model's normalized domain cannot be the training set.
        Err(Error::Domain(_)) | Err(Error::Dim { .. }) => {
            return Err(Error::Fingerprint {
                expected: forest.fingerprint().into(),
                found: "(data outside the model's domain)".into(),
            }
            .into())
        }
        Err(e) => return Err(e.into()),
    };
    let config = serde_json::to_value(forest.config()).map_err(Error::from)?;
    let value = match test {
        TestKind::Lm => {
            let r = lm_test(&ds, &forest)?;
            json!({
                "test": "lm",
                "statistic": r.statistic,
                "dof": r.dof,
                "p_value": r.p_value,
                "m_vector": r.m_vector,
                "v_matrix": r.v_matrix,
                "degenerate": r.degenerate,
                "seed": null,
                "config": config,
            })
        }
        TestKind::Glrt => {
            let r = glrt_test(
                &ds,
                &forest,
                &GlrtOptions {
                    pair_budget,
                    seed,
                    scale_by_sigma,
                },
            )?;
            json!({
                "test": "glrt",
                "experimental": true,
                "statistic": r.standardized,
                "lambda": r.lambda,
                "mu": r.mu_hat,
                "nu": r.nu_hat,
                "p_value": r.p_value,
                "rss0": r.rss0,
                "rss": r.rss,
                "sigma2_hat": r.sigma2_hat,
                "pairs": r.pairs,
                "triples": r.triples,
                "sigma_scaled": r.sigma_scaled,
                "seed": r.seed,
                "pair_budget": pair_budget,
                "config": config,
            })
        }
    };
    Ok(value)
}

/// Contents of a `simulate` spec file.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationFile {
    pub model: Model,
    pub n: SampleSizes,
    #[serde(default)]
    pub noise_sd: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    /// Defaults to the preset's count.
    #[serde(default)]
    pub reps: Option<usize>,
    /// Overrides the preset's tree count.
    #[serde(default)]
    pub n_trees: Option<usize>,
    /// Replaces the preset's forest configuration entirely.
    #[serde(default)]
    pub forest: Option<ForestConfig>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum SampleSizes {
    One(usize),
    Many(Vec<usize>),
}

impl SampleSizes {
    fn to_vec(&self) -> Vec<usize> {
        match self {
            SampleSizes::One(n) => vec![*n],
            SampleSizes::Many(v) => v.clone(),
        }
    }
}

pub fn cmd_simulate(
    spec: &Path,
    preset: Preset,
    out: &Path,
    seed: Option<u64>,
) -> CliResult<Value> {
    let text = std::fs::read_to_string(spec).map_err(Error::Io)?;
    let file: SimulationFile =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("simulation spec: {e}")))?;
    let seed = seed.unwrap_or(file.seed);
    let mut cfg = file.forest.clone().unwrap_or_else(|| preset.forest());
    if let Some(b) = file.n_trees {
        cfg.n_trees = b;
    }
    cfg.validate()?;
    let reps = file.reps.unwrap_or_else(|| preset.reps());
    let ns = file.n.to_vec();
    if ns.is_empty() {
        return Err(Error::Config("simulation spec lists no sample sizes".into()).into());
    }
    let mut reports: Vec<McReport> = Vec::with_capacity(ns.len());
    for &n in &ns {
        let dgp = DgpSpec {
            model: file.model.clone(),
            n,
            noise_sd: file.noise_sd,
            seed,
        };
        reports.push(run_monte_carlo(&dgp, &cfg, reps, None)?);
    }
    write_tables(&reports, out)?;
    let manifest = json!({
        "preset": format!("{preset:?}").to_lowercase(),
        "model": file.model,
        "sample_sizes": ns,
        "reps": reps,
        "seed": seed,
        "rep_seed_rule": "derive_seed(seed, rep)",
        "noise_sd": file.noise_sd.unwrap_or_else(|| file.model.default_noise_sd()),
        "forest": cfg,
        "failures": reports.iter().flat_map(|r| r.failures.clone()).collect::<Vec<_>>(),
        "tables": TABLE_FILES,
    });
    std::fs::write(
        out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).map_err(Error::from)?,
    )
    .map_err(Error::Io)?;
    Ok(json!({ "command": "simulate", "out": out.display().to_string(), "reports": reports }))
}
