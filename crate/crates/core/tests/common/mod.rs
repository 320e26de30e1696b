//! Shared fixtures and independent oracles for the integration and
//! acceptance tests. Every check returns `Err(description)` instead of
//! panicking so the acceptance harness can report it as a line.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use vcforest::forest::Forest;
use vcforest::inference::{chi2_upper_tail, normal_quantile};
use vcforest::linalg::{ols_solve, spd_solve, GramSystem, Matrix};
use vcforest::tree::{
    best_split_continuous, best_split_discrete, choose_split, grow_tree, FittedTree, NodeKind,
    NodeRegion, ScanParams, SplitKind, TreeParams,
};
use vcforest::{fit_forest, with_threads, Dataset, ForestConfig, ZKind};

pub type Check = Result<(), String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}
#[allow(unused_imports)]
pub(crate) use ensure;

// ---------------------------------------------------------------- fixtures

/// Grid value for a discrete coordinate with `m` categories.
pub fn grid(c: usize, m: usize) -> f64 {
    c as f64 / (m - 1) as f64
}

/// `(1, x)` design, two continuous `Z` and one 3-category `Z`, slope varying
/// with all three.
pub fn mixed_dataset(n: usize, seed: u64, noise: f64) -> Dataset {
    let mut r = rng(seed);
    let eps = Normal::new(0.0, noise.max(1e-300)).unwrap();
    let kinds = vec![
        ZKind::Continuous,
        ZKind::Discrete { m: 3 },
        ZKind::Continuous,
    ];
    let mut y = Vec::with_capacity(n);
    let mut xs = Vec::with_capacity(n);
    let mut zs = Vec::with_capacity(n);
    for _ in 0..n {
        let z = vec![
            r.random::<f64>(),
            grid(r.random_range(0..3), 3),
            r.random::<f64>(),
        ];
        let x: f64 = r.random();
        let slope = 1.0 + 2.0 * z[0] + if z[1] == 0.5 { 1.5 } else { 0.0 } - z[2];
        let e = if noise > 0.0 { eps.sample(&mut r) } else { 0.0 };
        y.push(0.3 + slope * x + e);
        xs.push(vec![x]);
        zs.push(z);
    }
    Dataset::from_unit_cube(y, xs, zs, kinds)
        .unwrap()
        .augment_intercept()
        .unwrap()
}

/// Noiseless `y = xᵀβ₀` with `d_X = 2` (intercept and one regressor).
pub fn homogeneous_noiseless(n: usize, d_z: usize, beta0: [f64; 2], seed: u64) -> Dataset {
    let mut r = rng(seed);
    let mut y = Vec::with_capacity(n);
    let mut xs = Vec::with_capacity(n);
    let mut zs = Vec::with_capacity(n);
    for _ in 0..n {
        let x: f64 = r.random::<f64>() * 4.0 - 1.0;
        y.push(beta0[0] + beta0[1] * x);
        xs.push(vec![x]);
        zs.push((0..d_z).map(|_| r.random::<f64>()).collect());
    }
    Dataset::from_unit_cube(y, xs, zs, vec![ZKind::Continuous; d_z])
        .unwrap()
        .augment_intercept()
        .unwrap()
}

/// Same rows as `ds` with `y` replaced.
pub fn with_y(ds: &Dataset, y: Vec<f64>) -> Dataset {
    rebuild(ds, y, |x| x.to_vec())
}

/// Same rows as `ds` with every `X` entry transformed by `f`.
pub fn with_x(ds: &Dataset, f: impl Fn(&[f64]) -> Vec<f64>) -> Dataset {
    rebuild(ds, ds.y().to_vec(), f)
}

fn rebuild(ds: &Dataset, y: Vec<f64>, f: impl Fn(&[f64]) -> Vec<f64>) -> Dataset {
    let xs = (0..ds.n()).map(|i| f(ds.x_row(i))).collect();
    let zs = (0..ds.n()).map(|i| ds.z_row(i).to_vec()).collect();
    Dataset::from_unit_cube(y, xs, zs, ds.z_kinds().to_vec()).unwrap()
}

/// Random point of the unit cube respecting the discrete grids of `ds`.
pub fn random_point<R: Rng>(r: &mut R, ds: &Dataset) -> Vec<f64> {
    ds.z_kinds()
        .iter()
        .map(|k| match k {
            ZKind::Continuous => r.random::<f64>(),
            ZKind::Discrete { m } => grid(r.random_range(0..*m), *m),
        })
        .collect()
}

pub fn small_config(n_trees: usize, seed: u64) -> ForestConfig {
    ForestConfig {
        n_trees,
        master_seed: seed,
        ..ForestConfig::default()
    }
}

// ------------------------------------------------------------ dense oracles

/// Gauss–Jordan elimination with partial pivoting; `None` when a pivot
/// vanishes relative to the largest entry.
pub fn gauss_jordan(a: &[Vec<f64>], b: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let w = b[0].len();
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .zip(b)
        .map(|(ar, br)| ar.iter().chain(br).copied().collect())
        .collect();
    let scale = a.iter().flatten().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[piv][col].abs() <= 1e-13 * scale {
            return None;
        }
        m.swap(col, piv);
        let p = m[col][col];
        for v in m[col].iter_mut() {
            *v /= p;
        }
        for r in 0..n {
            if r != col {
                let f = m[r][col];
                if f != 0.0 {
                    for c in 0..n + w {
                        m[r][c] -= f * m[col][c];
                    }
                }
            }
        }
    }
    Some(m.into_iter().map(|row| row[n..].to_vec()).collect())
}

pub fn gj_solve_vec(a: &[Vec<f64>], b: &[f64]) -> Option<Vec<f64>> {
    let rhs: Vec<Vec<f64>> = b.iter().map(|v| vec![*v]).collect();
    gauss_jordan(a, &rhs).map(|s| s.into_iter().map(|r| r[0]).collect())
}

/// Least squares on explicit rows via the normal equations solved by
/// Gauss–Jordan; the residual sum is computed row by row.
pub fn brute_ols(ds: &Dataset, rows: &[u32]) -> Option<(Vec<f64>, f64)> {
    let d = ds.d_x();
    let mut a = vec![vec![0.0; d]; d];
    let mut b = vec![0.0; d];
    for &r in rows {
        let (x, y) = (ds.x_row(r as usize), ds.y_at(r as usize));
        for i in 0..d {
            b[i] += x[i] * y;
            for j in 0..d {
                a[i][j] += x[i] * x[j];
            }
        }
    }
    let beta = gj_solve_vec(&a, &b)?;
    let rss = rows
        .iter()
        .map(|&r| {
            let x = ds.x_row(r as usize);
            let fit: f64 = x.iter().zip(&beta).map(|(a, b)| a * b).sum();
            (ds.y_at(r as usize) - fit).powi(2)
        })
        .sum();
    Some((beta, rss))
}

/// Child criterion with the same row gate as the scan: too few rows or a
/// singular design is charged the raw sum of squares.
fn brute_child_rss(ds: &Dataset, rows: &[u32], min_count: usize) -> f64 {
    let yy: f64 = rows.iter().map(|&r| ds.y_at(r as usize).powi(2)).sum();
    if rows.is_empty() || rows.len() < min_count {
        return yy;
    }
    brute_ols(ds, rows).map_or(yy, |(_, rss)| rss)
}

#[derive(Clone, Copy, Debug)]
pub struct BruteSplit {
    pub dim: usize,
    pub delta: f64,
    pub criterion: f64,
}

fn required(alpha: f64, min_child: usize, m: usize) -> usize {
    let by_alpha = (alpha * m as f64 - 1e-9).ceil().max(0.0) as usize;
    by_alpha.max(min_child).max(1)
}

/// Every feasible `(δ, Δ)` on one dimension, by explicit partition.
pub fn brute_candidates(
    ds: &Dataset,
    rows: &[u32],
    dim: usize,
    alpha: f64,
    min_child: usize,
    min_count: usize,
) -> Vec<BruteSplit> {
    let need = required(alpha, min_child, rows.len());
    let mut out = Vec::new();
    let values: Vec<f64> = rows.iter().map(|&r| ds.z_at(r as usize, dim)).collect();
    let mut distinct = values.clone();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let discrete = ds.z_kinds()[dim].is_discrete();
    for &delta in &distinct {
        let goes_left = |v: f64| if discrete { v == delta } else { v <= delta };
        let (l, r): (Vec<u32>, Vec<u32>) = rows
            .iter()
            .partition(|&&row| goes_left(ds.z_at(row as usize, dim)));
        if l.len() < need || r.len() < need {
            continue;
        }
        let criterion = brute_child_rss(ds, &l, min_count) + brute_child_rss(ds, &r, min_count);
        out.push(BruteSplit {
            dim,
            delta,
            criterion,
        });
    }
    out
}

/// Exhaustive best split over the given dimensions: smallest Δ, then the
/// smallest dimension, then the smallest δ, with `tol` absorbing round-off.
pub fn brute_best(cands: &[BruteSplit], tol: f64) -> Option<BruteSplit> {
    let min = cands
        .iter()
        .map(|c| c.criterion)
        .fold(f64::INFINITY, f64::min);
    cands
        .iter()
        .filter(|c| c.criterion <= min + tol)
        .min_by(|a, b| a.dim.cmp(&b.dim).then(a.delta.total_cmp(&b.delta)))
        .copied()
}

/// The chosen `(dim, δ, Δ)` must be a brute-force candidate whose Δ is the
/// minimum within `tol`; when the minimum is unique it must be that one,
/// and exact ties must resolve to the lowest dimension, then smallest δ.
fn agree_with_brute(got: Option<(usize, f64, f64)>, cands: &[BruteSplit], tol: f64) -> Check {
    let Some(best) = brute_best(cands, tol) else {
        ensure!(got.is_none(), "split {got:?} where none is feasible");
        return Ok(());
    };
    let Some((dim, delta, crit)) = got else {
        return Err(format!("no split, brute force found {best:?}"));
    };
    let c = cands
        .iter()
        .find(|c| c.dim == dim && c.delta == delta)
        .ok_or_else(|| format!("({dim}, {delta}) is not a feasible candidate"))?;
    ensure!(
        (c.criterion - crit).abs() <= tol,
        "Δ {crit} vs explicit {}",
        c.criterion
    );
    ensure!(
        c.criterion <= best.criterion + tol,
        "picked Δ {} above the minimum {}",
        c.criterion,
        best.criterion
    );
    let exact_min = cands
        .iter()
        .map(|c| c.criterion)
        .fold(f64::INFINITY, f64::min);
    let near = cands
        .iter()
        .filter(|c| c.criterion <= exact_min + tol)
        .count();
    if near == 1 {
        ensure!(
            dim == best.dim && delta == best.delta,
            "picked ({dim}, {delta}) vs unique optimum ({}, {})",
            best.dim,
            best.delta
        );
    }
    Ok(())
}

/// Random small node: a subset of `ds` with at most `max_rows` rows.
fn random_node<R: Rng>(r: &mut R, n: usize, max_rows: usize) -> Vec<u32> {
    let m = r.random_range(6..=max_rows);
    let mut ids: Vec<u32> = (0..n as u32).collect();
    for i in 0..m {
        let j = r.random_range(i..n);
        ids.swap(i, j);
    }
    ids.truncate(m);
    ids
}

/// Per-dimension scans and the greedy dimension choice against exhaustive
/// enumeration on nodes of at most 30 rows.
pub fn check_split_brute_force(seed: u64, trials: usize) -> Check {
    let ds = mixed_dataset(120, seed, 0.4);
    let mut r = rng(seed ^ 0xb7);
    let mut compared = 0usize;
    for t in 0..trials {
        let rows = random_node(&mut r, ds.n(), 30);
        let alpha = [0.0, 0.1, 0.25, 0.4][t % 4];
        let min_child = 1 + t % 3;
        let min_count = 3 + t % 2;
        let scale: f64 = rows
            .iter()
            .map(|&i| ds.y_at(i as usize).powi(2))
            .sum::<f64>();
        let tol = 1e-8 * scale.max(1.0);
        let scan = ScanParams {
            alpha,
            min_child,
            min_count,
            rcond: 1e-10,
        };
        let mut all = Vec::new();
        for dim in 0..ds.d_z() {
            let cands = brute_candidates(&ds, &rows, dim, alpha, min_child, min_count);
            let got = if ds.z_kinds()[dim].is_discrete() {
                best_split_discrete(&ds, &rows, dim, &scan)
            } else {
                best_split_continuous(&ds, &rows, dim, &scan)
            };
            let got = got.map(|g| {
                let kind = if ds.z_kinds()[dim].is_discrete() {
                    SplitKind::Category
                } else {
                    SplitKind::Threshold
                };
                (g.rule.kind == kind, g.rule.dim, g.rule.delta, g.criterion)
            });
            if let Some((kind_ok, ..)) = got {
                ensure!(kind_ok, "trial {t} dim {dim}: wrong split kind");
            }
            agree_with_brute(got.map(|g| (g.1, g.2, g.3)), &cands, tol)
                .map_err(|e| format!("trial {t} dim {dim}: {e}"))?;
            all.extend(cands);
        }
        // Greedy choice across dimensions.
        let params = TreeParams {
            subsample: ds.n(),
            k: min_child,
            alpha,
            pi: 0.0,
            min_count,
            rcond: 1e-10,
        };
        let region = NodeRegion::root(ds.z_kinds());
        let got = choose_split(&mut rng(t as u64), &ds, &rows, &region, &params);
        compared += usize::from(got.is_some());
        agree_with_brute(
            got.map(|g| (g.rule.dim, g.rule.delta, g.criterion)),
            &all,
            tol,
        )
        .map_err(|e| format!("trial {t} greedy: {e}"))?;
    }
    ensure!(
        compared * 2 >= trials,
        "only {compared} of {trials} nodes had a feasible split"
    );
    Ok(())
}

/// Left-to-right add/remove scan over a sorted node against from-scratch OLS
/// at every split position.
pub fn check_incremental_gram(seed: u64, n: usize) -> Check {
    let ds = mixed_dataset(n, seed, 1.0);
    let mut order: Vec<u32> = (0..n as u32).collect();
    order.sort_by(|&a, &b| ds.z_at(a as usize, 0).total_cmp(&ds.z_at(b as usize, 0)));
    let d = ds.d_x();
    let mut left = GramSystem::new(d);
    let mut right = GramSystem::new(d);
    for &r in &order {
        right.add_row(ds.x_row(r as usize), ds.y_at(r as usize));
    }
    let min_count = d + 2;
    for pos in 0..n - 1 {
        let r = order[pos] as usize;
        left.add_row(ds.x_row(r), ds.y_at(r));
        right.remove_row(ds.x_row(r), ds.y_at(r));
        for (sys, rows) in [(&left, &order[..=pos]), (&right, &order[pos + 1..])] {
            let fresh = GramSystem::from_rows(
                d,
                rows.iter()
                    .map(|&i| (ds.x_row(i as usize), ds.y_at(i as usize))),
            )
            .map_err(|e| e.to_string())?;
            let scale = fresh.yy().max(1.0);
            let a = ols_solve(sys, min_count, 1e-10);
            let b = ols_solve(&fresh, min_count, 1e-10);
            ensure!(a.ok == b.ok, "pos {pos}: validity differs");
            ensure!(
                (a.rss - b.rss).abs() <= 1e-8 * scale,
                "pos {pos}: rss {} vs {}",
                a.rss,
                b.rss
            );
            if b.ok {
                if let Some((beta, rss)) = brute_ols(&ds, rows) {
                    ensure!(
                        (b.rss - rss).abs() <= 1e-8 * scale,
                        "pos {pos}: stored rss {} vs explicit {}",
                        b.rss,
                        rss
                    );
                    for (u, v) in a.beta.iter().zip(&beta) {
                        ensure!(
                            (u - v).abs() <= 1e-8 * v.abs().max(1.0),
                            "pos {pos}: beta {u} vs {v}"
                        );
                    }
                }
            }
        }
    }
    // The production scan must report the same criterion as a fresh fit at
    // its chosen threshold.
    let rows: Vec<u32> = (0..n as u32).collect();
    let scan = ScanParams {
        alpha: 0.0,
        min_child: 1,
        min_count,
        rcond: 1e-10,
    };
    let best = best_split_continuous(&ds, &rows, 0, &scan).ok_or("no split")?;
    let cands = brute_candidates(&ds, &rows, 0, 0.0, 1, min_count);
    let at = cands
        .iter()
        .find(|c| c.delta == best.rule.delta)
        .ok_or("chosen δ is not a brute-force candidate")?;
    let scale: f64 = ds.y().iter().map(|y| y * y).sum();
    ensure!(
        (at.criterion - best.criterion).abs() <= 1e-8 * scale,
        "scan Δ {} vs fresh {}",
        best.criterion,
        at.criterion
    );
    Ok(())
}

pub fn check_spd_vs_gauss_jordan(seed: u64, trials: usize) -> Check {
    let mut r = rng(seed);
    for t in 0..trials {
        let d = 2 + t % 4;
        // A = QᵀDQ-ish: random B, A = BᵀB + εI keeps the condition moderate.
        let b: Vec<Vec<f64>> = (0..d + 2)
            .map(|_| (0..d).map(|_| r.random::<f64>() * 2.0 - 1.0).collect())
            .collect();
        let mut a = vec![vec![0.0; d]; d];
        for row in &b {
            for i in 0..d {
                for j in 0..d {
                    a[i][j] += row[i] * row[j];
                }
            }
        }
        for (i, row) in a.iter_mut().enumerate() {
            row[i] += 1e-3;
        }
        let rhs: Vec<Vec<f64>> = (0..d)
            .map(|_| (0..2).map(|_| r.random::<f64>()).collect())
            .collect();
        let m = Matrix::from_rows(&a).map_err(|e| e.to_string())?;
        let got = spd_solve(&m, &Matrix::from_rows(&rhs).unwrap()).map_err(|e| e.to_string())?;
        let want = gauss_jordan(&a, &rhs).ok_or("oracle singular")?;
        for i in 0..d {
            for j in 0..2 {
                let (g, w) = (got[(i, j)], want[i][j]);
                ensure!(
                    (g - w).abs() <= 1e-8 * w.abs().max(1.0),
                    "trial {t}: ({i},{j}) {g} vs {w}"
                );
            }
        }
        // m · m⁻¹ = I.
        let inv = spd_solve(&m, &Matrix::identity(d)).map_err(|e| e.to_string())?;
        let prod = m.matmul(&inv).unwrap();
        for i in 0..d {
            for j in 0..d {
                let e = if i == j { 1.0 } else { 0.0 };
                ensure!(
                    (prod[(i, j)] - e).abs() <= 1e-8,
                    "trial {t}: m·m⁻¹ off identity"
                );
            }
        }
    }
    Ok(())
}

// ------------------------------------------------------ distribution oracles

/// Composite Simpson rule.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = n + n % 2;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

fn ln_gamma_half_integer(k: usize) -> f64 {
    // Γ(k/2) by recursion from Γ(1/2) = √π and Γ(1) = 1.
    let (mut v, mut x) = if k % 2 == 0 {
        (0.0, 1.0)
    } else {
        (0.5 * std::f64::consts::PI.ln(), 0.5)
    };
    while x < k as f64 / 2.0 - 1e-12 {
        v += x.ln();
        x += 1.0;
    }
    v
}

/// Upper tail of χ²_k by quadrature of the density; for `k = 1` the
/// substitution `t = u²` removes the singularity.
pub fn chi2_tail_oracle(x: f64, k: usize) -> f64 {
    if k == 1 {
        let phi = |u: f64| (2.0 / std::f64::consts::PI).sqrt() * (-u * u / 2.0).exp();
        return simpson(phi, x.sqrt(), x.sqrt() + 40.0, 200_000);
    }
    let h = k as f64 / 2.0;
    let lg = ln_gamma_half_integer(k);
    let dens = |t: f64| {
        if t <= 0.0 {
            if k == 2 {
                0.5
            } else {
                0.0
            }
        } else {
            ((h - 1.0) * t.ln() - t / 2.0 - h * 2f64.ln() - lg).exp()
        }
    };
    simpson(dens, x, x + 200.0 + 20.0 * k as f64, 400_000)
}

/// `Φ` from the Maclaurin series of erf; accurate for `|x| ≤ 6`.
pub fn normal_cdf_series(x: f64) -> f64 {
    let u = x / std::f64::consts::SQRT_2;
    let mut term = u;
    let mut sum = u;
    for n in 1..400 {
        term *= -u * u / n as f64;
        sum += term / (2 * n + 1) as f64;
    }
    0.5 + sum / std::f64::consts::PI.sqrt()
}

pub fn quantile_by_bisection(p: f64) -> f64 {
    let (mut lo, mut hi) = (-6.0, 6.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if normal_cdf_series(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

pub fn check_distribution_oracles() -> Check {
    for (x, k) in [
        (3.8415, 1),
        (0.5, 1),
        (5.9915, 2),
        (1.0, 2),
        (7.8147, 3),
        (2.0, 4),
        (11.0705, 5),
        (30.0, 19),
    ] {
        let got = chi2_upper_tail(x, k).map_err(|e| e.to_string())?;
        let want = chi2_tail_oracle(x, k);
        ensure!(
            (got - want).abs() <= 1e-4,
            "χ²_{k} tail at {x}: {got} vs quadrature {want}"
        );
    }
    for p in [0.001, 0.025, 0.05, 0.3, 0.5, 0.9, 0.95, 0.975, 0.999] {
        let got = normal_quantile(p).map_err(|e| e.to_string())?;
        let want = quantile_by_bisection(p);
        ensure!(
            (got - want).abs() <= 1e-4,
            "quantile({p}): {got} vs bisection {want}"
        );
    }
    Ok(())
}

// ------------------------------------------------------- structural checks

pub fn fuzz_params(t: usize, s: usize) -> TreeParams {
    TreeParams {
        subsample: s,
        k: [2, 3, 5][t % 3],
        alpha: [0.005, 0.1, 0.2, 0.3][t % 4],
        pi: [1.0, 0.5, 0.0][t % 3],
        min_count: 4,
        rcond: 1e-10,
    }
}

/// Per-node structure rows and the allowed category sets along each path.
struct NodeInfo {
    rows: Vec<u32>,
    allowed: Vec<Option<Vec<bool>>>,
}

fn node_infos(tree: &FittedTree, ds: &Dataset) -> Vec<NodeInfo> {
    let root_allowed: Vec<Option<Vec<bool>>> = ds
        .z_kinds()
        .iter()
        .map(|k| k.categories().map(|m| vec![true; m]))
        .collect();
    let mut infos: Vec<Option<NodeInfo>> = (0..tree.nodes.len()).map(|_| None).collect();
    let mut stack = vec![(0usize, tree.b_indices.clone(), root_allowed)];
    while let Some((id, rows, allowed)) = stack.pop() {
        if let NodeKind::Split { rule, left, right } = &tree.nodes[id].kind {
            let (l, r): (Vec<u32>, Vec<u32>) = rows
                .iter()
                .partition(|&&i| rule.goes_left(ds.z_at(i as usize, rule.dim)));
            let (mut la, mut ra): (Vec<Option<Vec<bool>>>, Vec<Option<Vec<bool>>>) =
                (allowed.clone(), allowed.clone());
            if let (Some(set), Some(m)) = (&allowed[rule.dim], ds.z_kinds()[rule.dim].categories())
            {
                let c = (rule.delta * (m - 1) as f64).round() as usize;
                let mut only = vec![false; set.len()];
                only[c] = true;
                la[rule.dim] = Some(only);
                let mut rest = set.clone();
                rest[c] = false;
                ra[rule.dim] = Some(rest);
            }
            stack.push((*left, l, la));
            stack.push((*right, r, ra));
        }
        infos[id] = Some(NodeInfo { rows, allowed });
    }
    infos
        .into_iter()
        .map(|i| i.expect("unreachable node"))
        .collect()
}

/// Whether any admissible split exists on a node, by enumeration.
fn any_feasible(ds: &Dataset, info: &NodeInfo, params: &TreeParams) -> bool {
    (0..ds.d_z()).any(|dim| {
        if let Some(set) = &info.allowed[dim] {
            if set.iter().filter(|a| **a).count() < 2 {
                return false;
            }
        }
        !brute_candidates(ds, &info.rows, dim, params.alpha, params.k, 0).is_empty()
    })
}

/// Leaf window, α-regularity, honest partition sizes, discrete exhaustion
/// and forced-terminal justification on one tree.
pub fn check_tree_structure(tree: &FittedTree, ds: &Dataset, params: &TreeParams) -> Check {
    let s = params.subsample;
    ensure!(
        tree.a_indices.len() == s / 2,
        "|A| = {}",
        tree.a_indices.len()
    );
    ensure!(
        tree.b_indices.len() == s - s / 2,
        "|B| = {}",
        tree.b_indices.len()
    );
    let mut seen = vec![false; ds.n()];
    for &i in tree.a_indices.iter().chain(&tree.b_indices) {
        ensure!(!seen[i as usize], "row {i} drawn twice");
        seen[i as usize] = true;
    }
    let infos = node_infos(tree, ds);
    let k = params.k;
    for (id, (node, info)) in tree.nodes.iter().zip(&infos).enumerate() {
        let m = info.rows.len();
        ensure!(
            node.b_count == m,
            "node {id}: b_count {} vs {m}",
            node.b_count
        );
        match &node.kind {
            NodeKind::Split { rule, left, right } => {
                let (lc, rc) = (infos[*left].rows.len(), infos[*right].rows.len());
                let floor = params.alpha * m as f64 - 1e-9;
                ensure!(
                    lc as f64 >= floor && rc as f64 >= floor,
                    "node {id}: children {lc}/{rc} violate α = {} of {m}",
                    params.alpha
                );
                ensure!(lc >= k && rc >= k, "node {id}: child below k");
                if let Some(set) = &info.allowed[rule.dim] {
                    ensure!(
                        set.iter().filter(|a| **a).count() >= 2,
                        "node {id}: exhausted discrete dim {} split again",
                        rule.dim
                    );
                }
                let present = info
                    .rows
                    .iter()
                    .any(|&i| ds.z_at(i as usize, rule.dim) == rule.delta);
                ensure!(present, "node {id}: δ is not an observed value");
            }
            NodeKind::Leaf { leaf } => {
                let lf = &tree.leaves[*leaf];
                ensure!(lf.b_count == m, "leaf {leaf}: b_count mismatch");
                if lf.forced_terminal {
                    ensure!(
                        m < k || !any_feasible(ds, info, params),
                        "leaf {leaf}: flagged forced-terminal but a feasible split exists"
                    );
                } else {
                    ensure!(
                        (k..2 * k).contains(&m),
                        "leaf {leaf}: B-count {m} outside [{k}, {}]",
                        2 * k - 1
                    );
                }
                for &r in info.rows.iter().chain(&lf.a_rows) {
                    ensure!(
                        lf.region.contains(ds.z_row(r as usize), ds.z_kinds()),
                        "leaf {leaf}: region misses one of its rows"
                    );
                }
            }
        }
    }
    Ok(())
}

/// 50 trees on a mixed discrete/continuous design with varying parameters.
pub fn check_fuzz_corpus(n_trees: usize, n: usize, seed: u64) -> Check {
    let ds = mixed_dataset(n, seed, 0.5);
    for t in 0..n_trees {
        let params = fuzz_params(t, (n * 4) / 5);
        let tree =
            grow_tree(&ds, &params, seed.wrapping_add(t as u64)).map_err(|e| e.to_string())?;
        check_tree_structure(&tree, &ds, &params).map_err(|e| format!("tree {t}: {e}"))?;
    }
    Ok(())
}

/// Region containing `z`, found by scanning every leaf region.
pub fn region_scan(tree: &FittedTree, ds: &Dataset, z: &[f64]) -> Vec<usize> {
    tree.leaves
        .iter()
        .enumerate()
        .filter(|(_, l)| l.region.contains(z, ds.z_kinds()))
        .map(|(i, _)| i)
        .collect()
}

pub fn check_tiling(forest: &Forest, points: usize, seed: u64) -> Check {
    let ds = forest.dataset();
    let mut r = rng(seed);
    for p in 0..points {
        let mut z = random_point(&mut r, ds);
        // Hit split thresholds exactly now and then.
        if p % 7 == 0 {
            if let NodeKind::Split { rule, .. } = &forest.trees()[0].nodes[0].kind {
                z[rule.dim] = rule.delta;
            }
        }
        for (b, tree) in forest.trees().iter().enumerate() {
            let hits = region_scan(tree, ds, &z);
            ensure!(
                hits.len() == 1,
                "tree {b}: {z:?} lies in {} leaves",
                hits.len()
            );
            ensure!(
                hits[0] == tree.leaf_of(&z),
                "tree {b}: descent disagrees with regions"
            );
        }
    }
    Ok(())
}

pub fn check_honesty(seed: u64) -> Check {
    let ds = mixed_dataset(300, seed, 0.5);
    let params = fuzz_params(0, 240);
    let tree = grow_tree(&ds, &params, seed).map_err(|e| e.to_string())?;
    let mut y = ds.y().to_vec();
    let mut r = rng(seed + 1);
    for &i in &tree.a_indices {
        y[i as usize] += r.random::<f64>() * 10.0 - 5.0;
    }
    let perturbed = with_y(&ds, y);
    let again = grow_tree(&perturbed, &params, seed).map_err(|e| e.to_string())?;
    ensure!(
        tree.structure_hash() == again.structure_hash(),
        "structure changed after perturbing A-side responses"
    );
    let changed = tree
        .leaves
        .iter()
        .zip(&again.leaves)
        .any(|(a, b)| a.fit.ok && a.fit.beta != b.fit.beta);
    ensure!(changed, "leaf fits did not react to A-side responses");
    // Perturbing a B-row is allowed to move the structure; it must at least
    // be seen by the hash when it does.
    Ok(())
}

/// `Σ_{i∈A_b} S(z, Zᵢ, ω_b) = 1` on every tree whose leaf at `z` holds
/// estimation rows, and `S` vanishes off the leaf.
pub fn check_weight_normalization(forest: &Forest, points: usize, seed: u64) -> Check {
    let ds = forest.dataset();
    let mut r = rng(seed);
    for _ in 0..points {
        let z = random_point(&mut r, ds);
        for (b, tree) in forest.trees().iter().enumerate() {
            let leaf = tree.leaf_of(&z);
            let a = tree.leaves[leaf].a_count();
            let mut sum = 0.0;
            for &i in &tree.a_indices {
                sum += forest
                    .s_weight(b, &z, i as usize)
                    .map_err(|e| e.to_string())?;
            }
            if a > 0 {
                ensure!((sum - 1.0).abs() <= 1e-12, "tree {b}: Σ S = {sum}");
            } else {
                ensure!(sum == 0.0, "tree {b}: empty leaf carries weight");
            }
            for i in (0..ds.n()).step_by(37) {
                let w = forest.s_weight(b, &z, i).map_err(|e| e.to_string())?;
                let inside = tree.leaf_of(ds.z_row(i)) == leaf;
                let want = if inside && a > 0 { 1.0 / a as f64 } else { 0.0 };
                ensure!(w == want, "tree {b} row {i}: S = {w}, expected {want}");
            }
        }
    }
    Ok(())
}

pub fn check_thread_invariance(ds: &Dataset, cfg: &ForestConfig) -> Check {
    let fit = |threads| {
        with_threads(Some(threads), || fit_forest(ds, cfg))
            .and_then(|r| r)
            .map_err(|e| e.to_string())
    };
    let one = fit(1)?;
    let many = fit(4)?;
    ensure!(
        one.to_json().unwrap() == many.to_json().unwrap(),
        "model files differ between 1 and 4 workers"
    );
    let rows_one = with_threads(Some(1), || one.beta_bar_rows()).unwrap();
    let rows_many = with_threads(Some(4), || many.beta_bar_rows()).unwrap();
    ensure!(rows_one == rows_many, "β̄ at training rows differs");
    let mut r = rng(99);
    for _ in 0..5 {
        let z = random_point(&mut r, ds);
        let a = one
            .confidence_interval(&z, 0.9)
            .map_err(|e| e.to_string())?;
        let b = many
            .confidence_interval(&z, 0.9)
            .map_err(|e| e.to_string())?;
        ensure!(a == b, "intervals differ at {z:?}");
    }
    Ok(())
}

pub fn check_round_trip(forest: &Forest) -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("model.json");
    forest.save(&path).map_err(|e| e.to_string())?;
    let loaded = Forest::load(&path).map_err(|e| e.to_string())?;
    ensure!(
        loaded.to_json().unwrap() == forest.to_json().unwrap(),
        "re-serialized model differs"
    );
    ensure!(
        loaded.fingerprint() == forest.fingerprint(),
        "fingerprint differs"
    );
    for (a, b) in forest.trees().iter().zip(loaded.trees()) {
        ensure!(
            a.structure_hash() == b.structure_hash(),
            "tree structure differs"
        );
        for (la, lb) in a.leaves.iter().zip(&b.leaves) {
            ensure!(la.region == lb.region, "leaf regions differ");
            ensure!(la.fit == lb.fit, "leaf fits differ");
        }
    }
    let mut r = rng(5);
    for _ in 0..5 {
        let z = random_point(&mut r, forest.dataset());
        let a = forest
            .confidence_interval(&z, 0.95)
            .map_err(|e| e.to_string())?;
        let b = loaded
            .confidence_interval(&z, 0.95)
            .map_err(|e| e.to_string())?;
        ensure!(a == b, "predictions differ after reload");
    }
    Ok(())
}

/// `β̄` as the mean of independently recomputed leaf fits, and `β̌` from an
/// Ω̄, γ̄ assembled directly from the leaves' estimation rows.
pub fn check_reassembly(forest: &Forest, points: usize, seed: u64) -> Check {
    let ds = forest.dataset();
    let d = ds.d_x();
    let min_count = forest.params().min_count;
    let mut r = rng(seed);
    for _ in 0..points {
        let z = random_point(&mut r, ds);
        let mut sum = vec![0.0; d];
        let mut valid = 0usize;
        let mut omega = vec![vec![0.0; d]; d];
        let mut gamma = vec![0.0; d];
        let mut used = 0usize;
        for tree in forest.trees() {
            let leaf = &tree.leaves[tree.leaf_of(&z)];
            let rows = &leaf.a_rows;
            if rows.len() >= min_count.max(1) {
                if let Some((beta, _)) = brute_ols(ds, rows) {
                    if leaf.fit.ok {
                        valid += 1;
                        for (s, b) in sum.iter_mut().zip(&beta) {
                            *s += b;
                        }
                    }
                }
            }
            if !rows.is_empty() {
                used += 1;
                let w = 1.0 / rows.len() as f64;
                for &i in rows {
                    let (x, y) = (ds.x_row(i as usize), ds.y_at(i as usize));
                    for a in 0..d {
                        gamma[a] += w * x[a] * y;
                        for b in 0..d {
                            omega[a][b] += w * x[a] * x[b];
                        }
                    }
                }
            }
        }
        let got = forest.beta_bar(&z).map_err(|e| e.to_string())?;
        ensure!(
            got.valid_trees == valid,
            "valid tree count {} vs {valid}",
            got.valid_trees
        );
        for (g, s) in got.beta_bar.iter().zip(&sum) {
            let w = s / valid as f64;
            ensure!((g - w).abs() <= 1e-10 * w.abs().max(1.0), "β̄ {g} vs {w}");
        }
        let omega: Vec<Vec<f64>> = omega
            .into_iter()
            .map(|row| row.into_iter().map(|v| v / used as f64).collect())
            .collect();
        let gamma: Vec<f64> = gamma.into_iter().map(|v| v / used as f64).collect();
        let want = gj_solve_vec(&omega, &gamma).ok_or("oracle Ω̄ singular")?;
        let got = forest.beta_check(&z).map_err(|e| e.to_string())?;
        for (g, w) in got.iter().zip(&want) {
            ensure!((g - w).abs() <= 1e-10 * w.abs().max(1.0), "β̌ {g} vs {w}");
        }
    }
    Ok(())
}
