//! One honest, double-sample, local-linear tree.
//!
//! The subsample is split into an estimation half `A` and a structure half
//! `B`. Splits are chosen on `B` alone by minimizing the summed OLS residual
//! sums of squares of the two children, subject to α-regularity and a minimum
//! child size of `k`. Splitting stops once a node holds between `k` and
//! `2k − 1` structure rows. Leaves are then fitted by OLS on the `A` rows
//! that fall inside them.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{category_index, Dataset, ZKind};
use crate::error::{Error, Result};
use crate::linalg::{ols_solve, GramSystem, OlsFit};
use crate::seeding::{derive_seed, rng_from};

/// Number of downdates after which the right-hand scan system is rebuilt.
const REBUILD_EVERY: usize = 64;

/// Resolved per-tree growth parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TreeParams {
    /// Subsample size `s`.
    pub subsample: usize,
    /// Minimum leaf size `k`.
    pub k: usize,
    /// α-regularity fraction.
    pub alpha: f64,
    /// Probability of drawing the split dimension uniformly.
    pub pi: f64,
    /// Row gate for every OLS solve.
    pub min_count: usize,
    pub rcond: f64,
}

impl TreeParams {
    fn validate(&self, n: usize) -> Result<()> {
        if self.subsample > n {
            return Err(Error::Config(format!(
                "subsample size {} exceeds n = {n}",
                self.subsample
            )));
        }
        if self.subsample < 2 {
            return Err(Error::Config("subsample size must be at least 2".into()));
        }
        if self.k < 1 {
            return Err(Error::Config(
                "minimum leaf size k must be at least 1".into(),
            ));
        }
        if self.k > self.subsample {
            return Err(Error::Config(format!(
                "k = {} exceeds subsample size {}",
                self.k, self.subsample
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    /// `z ≤ δ` goes left.
    Threshold,
    /// `z = δ` goes left.
    Category,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRule {
    pub dim: usize,
    pub kind: SplitKind,
    pub delta: f64,
}

impl SplitRule {
    #[inline]
    pub fn goes_left(&self, v: f64) -> bool {
        match self.kind {
            SplitKind::Threshold => v <= self.delta,
            SplitKind::Category => v == self.delta,
        }
    }
}

/// Best split found on one dimension.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitCandidate {
    pub rule: SplitRule,
    /// `RSS(left) + RSS(right)`.
    pub criterion: f64,
    pub left_count: usize,
    pub right_count: usize,
}

/// Extent of a node along one `Z` coordinate.
#[derive(Clone, Debug, PartialEq)]
pub enum DimRange {
    /// `lo < z ≤ hi`, or `lo ≤ z ≤ hi` when `lo_closed`.
    Interval { lo: f64, hi: f64, lo_closed: bool },
    /// Allowed categories, indexed by grid position.
    Categories(Vec<bool>),
}

impl DimRange {
    fn contains(&self, v: f64, kind: ZKind) -> bool {
        match (self, kind) {
            (DimRange::Interval { lo, hi, lo_closed }, _) => {
                (if *lo_closed { v >= *lo } else { v > *lo }) && v <= *hi
            }
            (DimRange::Categories(allowed), ZKind::Discrete { m }) => allowed[category_index(v, m)],
            (DimRange::Categories(_), ZKind::Continuous) => false,
        }
    }
}

/// Axis-aligned cell of `[0,1]^{d_Z}` with category sets on discrete axes.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeRegion {
    pub dims: Vec<DimRange>,
}

impl NodeRegion {
    pub fn root(kinds: &[ZKind]) -> Self {
        NodeRegion {
            dims: kinds
                .iter()
                .map(|k| match k {
                    ZKind::Continuous => DimRange::Interval {
                        lo: 0.0,
                        hi: 1.0,
                        lo_closed: true,
                    },
                    ZKind::Discrete { m } => DimRange::Categories(vec![true; *m]),
                })
                .collect(),
        }
    }

    pub fn contains(&self, z: &[f64], kinds: &[ZKind]) -> bool {
        self.dims
            .iter()
            .zip(z)
            .zip(kinds)
            .all(|((r, &v), &k)| r.contains(v, k))
    }

    fn split(&self, rule: &SplitRule, kinds: &[ZKind]) -> (NodeRegion, NodeRegion) {
        let mut left = self.clone();
        let mut right = self.clone();
        match (&self.dims[rule.dim], rule.kind) {
            (DimRange::Interval { lo, hi, lo_closed }, SplitKind::Threshold) => {
                left.dims[rule.dim] = DimRange::Interval {
                    lo: *lo,
                    hi: rule.delta,
                    lo_closed: *lo_closed,
                };
                right.dims[rule.dim] = DimRange::Interval {
                    lo: rule.delta,
                    hi: *hi,
                    lo_closed: false,
                };
            }
            (DimRange::Categories(allowed), SplitKind::Category) => {
                let m = kinds[rule.dim].categories().unwrap_or(allowed.len());
                let c = category_index(rule.delta, m);
                let mut only = vec![false; allowed.len()];
                only[c] = true;
                let mut rest = allowed.clone();
                rest[c] = false;
                left.dims[rule.dim] = DimRange::Categories(only);
                right.dims[rule.dim] = DimRange::Categories(rest);
            }
            _ => unreachable!("split kind does not match dimension kind"),
        }
        (left, right)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum NodeKind {
    Split {
        rule: SplitRule,
        left: usize,
        right: usize,
    },
    Leaf {
        leaf: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TreeNode {
    /// Structure-sample rows that reached this node.
    pub b_count: usize,
    pub kind: NodeKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Leaf {
    pub region: NodeRegion,
    pub b_count: usize,
    /// Estimation-sample rows inside the leaf, in subsample order.
    pub a_rows: Vec<u32>,
    pub gram: GramSystem,
    pub fit: OlsFit,
    /// Set when the node could not be split although it exceeds `2k − 1`
    /// structure rows (or the root already had fewer than `k`).
    pub forced_terminal: bool,
}

impl Leaf {
    pub fn a_count(&self) -> usize {
        self.a_rows.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FittedTree {
    pub seed: u64,
    pub nodes: Vec<TreeNode>,
    pub leaves: Vec<Leaf>,
    pub a_indices: Vec<u32>,
    pub b_indices: Vec<u32>,
}

/// Leaf output at a query point.
#[derive(Clone, Debug, PartialEq)]
pub struct TreeBeta {
    pub beta: Vec<f64>,
    pub ok: bool,
    pub a_count: usize,
}

/// Grows one tree on `ds` with the given seed.
pub fn grow_tree(ds: &Dataset, params: &TreeParams, seed: u64) -> Result<FittedTree> {
    params.validate(ds.n())?;
    ds.ensure_unit_cube()?;
    let n = ds.n();
    let s = params.subsample;

    // Partial Fisher-Yates: the first `s` positions become the subsample.
    let mut rng = rng_from(seed);
    let mut ids: Vec<u32> = (0..n as u32).collect();
    for i in 0..s {
        let j = rng.random_range(i..n);
        ids.swap(i, j);
    }
    let a_indices = ids[..s / 2].to_vec();
    let b_indices = ids[s / 2..s].to_vec();

    let kinds = ds.z_kinds();
    let mut nodes: Vec<TreeNode> = vec![TreeNode {
        b_count: b_indices.len(),
        kind: NodeKind::Leaf { leaf: usize::MAX },
    }];
    let mut leaves: Vec<Leaf> = Vec::new();
    let mut stack = vec![(0usize, b_indices.clone(), NodeRegion::root(kinds))];

    while let Some((node_id, rows, region)) = stack.pop() {
        let m = rows.len();
        let mut forced = m < params.k;
        let mut split = None;
        if m >= 2 * params.k {
            let mut node_rng = rng_from(derive_seed(seed, node_id as u64));
            split = choose_split(&mut node_rng, ds, &rows, &region, params);
            forced = split.is_none();
        }
        match split {
            Some(cand) => {
                let (lrows, rrows): (Vec<u32>, Vec<u32>) = rows
                    .iter()
                    .partition(|&&r| cand.rule.goes_left(ds.z_at(r as usize, cand.rule.dim)));
                debug_assert_eq!(lrows.len(), cand.left_count);
                let (lreg, rreg) = region.split(&cand.rule, kinds);
                let left = nodes.len();
                let right = left + 1;
                for count in [lrows.len(), rrows.len()] {
                    nodes.push(TreeNode {
                        b_count: count,
                        kind: NodeKind::Leaf { leaf: usize::MAX },
                    });
                }
                nodes[node_id].kind = NodeKind::Split {
                    rule: cand.rule,
                    left,
                    right,
                };
                // Right first so the left subtree is expanded first.
                stack.push((right, rrows, rreg));
                stack.push((left, lrows, lreg));
            }
            None => {
                nodes[node_id].kind = NodeKind::Leaf { leaf: leaves.len() };
                leaves.push(Leaf {
                    region,
                    b_count: m,
                    a_rows: Vec::new(),
                    gram: GramSystem::new(ds.d_x()),
                    fit: OlsFit {
                        beta: vec![0.0; ds.d_x()],
                        rss: 0.0,
                        ok: false,
                        condition_hint: 0.0,
                    },
                    forced_terminal: forced,
                });
            }
        }
    }

    let mut tree = FittedTree {
        seed,
        nodes,
        leaves,
        a_indices,
        b_indices,
    };
    let a_rows = tree.a_indices.clone();
    for &r in &a_rows {
        let leaf = tree.leaf_of(ds.z_row(r as usize));
        tree.leaves[leaf].a_rows.push(r);
    }
    tree.refit_leaves(ds, params.min_count, params.rcond);
    Ok(tree)
}

/// Picks the split dimension and returns its best split.
///
/// With probability `pi` a dimension is drawn uniformly; otherwise (or when
/// the drawn dimension has no feasible split) the dimension with the smallest
/// criterion wins, ties going to the lower index.
pub fn choose_split<R: Rng>(
    rng: &mut R,
    ds: &Dataset,
    rows: &[u32],
    region: &NodeRegion,
    params: &TreeParams,
) -> Option<SplitCandidate> {
    let d_z = ds.d_z();
    let draw: f64 = rng.random();
    if draw < params.pi {
        let dim = rng.random_range(0..d_z);
        if let Some(c) = best_split_on(ds, rows, dim, region, params) {
            return Some(c);
        }
    }
    let mut best: Option<SplitCandidate> = None;
    for dim in 0..d_z {
        if let Some(c) = best_split_on(ds, rows, dim, region, params) {
            if best.is_none_or(|b| c.criterion < b.criterion) {
                best = Some(c);
            }
        }
    }
    best
}

/// Which dimension `choose_split` would use, exposed for frequency checks.
pub fn choose_split_dim<R: Rng>(
    rng: &mut R,
    ds: &Dataset,
    rows: &[u32],
    region: &NodeRegion,
    params: &TreeParams,
) -> Option<usize> {
    choose_split(rng, ds, rows, region, params).map(|c| c.rule.dim)
}

fn best_split_on(
    ds: &Dataset,
    rows: &[u32],
    dim: usize,
    region: &NodeRegion,
    params: &TreeParams,
) -> Option<SplitCandidate> {
    let scan = ScanParams {
        alpha: params.alpha,
        min_child: params.k,
        min_count: params.min_count,
        rcond: params.rcond,
    };
    match ds.z_kinds()[dim] {
        ZKind::Continuous => best_split_continuous(ds, rows, dim, &scan),
        ZKind::Discrete { .. } => match &region.dims[dim] {
            DimRange::Categories(allowed) if allowed.iter().filter(|a| **a).count() >= 2 => {
                best_split_discrete(ds, rows, dim, &scan)
            }
            _ => None,
        },
    }
}

/// Feasibility and OLS gates for one split scan.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScanParams {
    pub alpha: f64,
    pub min_child: usize,
    pub min_count: usize,
    pub rcond: f64,
}

impl ScanParams {
    /// Smallest admissible child size for a node of `m` rows.
    pub fn required_child(&self, m: usize) -> usize {
        let by_alpha = (self.alpha * m as f64 - 1e-9).ceil().max(0.0) as usize;
        by_alpha.max(self.min_child).max(1)
    }
}

fn child_rss(sys: &GramSystem, scan: &ScanParams) -> f64 {
    ols_solve(sys, scan.min_count, scan.rcond).rss
}

/// Best threshold on a continuous dimension; candidates are the node's
/// observed values and ties go to the smallest threshold.
pub fn best_split_continuous(
    ds: &Dataset,
    rows: &[u32],
    dim: usize,
    scan: &ScanParams,
) -> Option<SplitCandidate> {
    let m = rows.len();
    let need = scan.required_child(m);
    if 2 * need > m {
        return None;
    }
    let mut sorted: Vec<(f64, u32)> = rows
        .iter()
        .map(|&r| (ds.z_at(r as usize, dim), r))
        .collect();
    sorted.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let d_x = ds.d_x();
    let mut left = GramSystem::new(d_x);
    let mut right = GramSystem::new(d_x);
    for &(_, r) in &sorted {
        right.add_row(ds.x_row(r as usize), ds.y_at(r as usize));
    }
    let mut best: Option<SplitCandidate> = None;
    for pos in 0..m - 1 {
        let r = sorted[pos].1 as usize;
        left.add_row(ds.x_row(r), ds.y_at(r));
        right.remove_row(ds.x_row(r), ds.y_at(r));
        if (pos + 1) % REBUILD_EVERY == 0 {
            right = GramSystem::new(d_x);
            for &(_, rr) in &sorted[pos + 1..] {
                right.add_row(ds.x_row(rr as usize), ds.y_at(rr as usize));
            }
        }
        let lc = pos + 1;
        let rc = m - lc;
        if rc < need {
            break;
        }
        if lc < need || sorted[pos].0 == sorted[pos + 1].0 {
            continue;
        }
        let criterion = child_rss(&left, scan) + child_rss(&right, scan);
        if best.is_none_or(|b| criterion < b.criterion) {
            best = Some(SplitCandidate {
                rule: SplitRule {
                    dim,
                    kind: SplitKind::Threshold,
                    delta: sorted[pos].0,
                },
                criterion,
                left_count: lc,
                right_count: rc,
            });
        }
    }
    best
}

/// Best one-versus-rest category split on a discrete dimension; ties go to
/// the smallest grid value.
pub fn best_split_discrete(
    ds: &Dataset,
    rows: &[u32],
    dim: usize,
    scan: &ScanParams,
) -> Option<SplitCandidate> {
    let ZKind::Discrete { m: cats } = ds.z_kinds()[dim] else {
        return None;
    };
    let d_x = ds.d_x();
    let mut per_cat: Vec<GramSystem> = (0..cats).map(|_| GramSystem::new(d_x)).collect();
    for &r in rows {
        let r = r as usize;
        per_cat[category_index(ds.z_at(r, dim), cats)].add_row(ds.x_row(r), ds.y_at(r));
    }
    let present: Vec<usize> = (0..cats).filter(|&c| per_cat[c].count() > 0).collect();
    if present.len() < 2 {
        return None;
    }
    let need = scan.required_child(rows.len());
    let mut best: Option<SplitCandidate> = None;
    for &c in &present {
        let lc = per_cat[c].count();
        let rc = rows.len() - lc;
        if lc < need || rc < need {
            continue;
        }
        // Rebuild the complement from its own rows instead of subtracting.
        let mut rest = GramSystem::new(d_x);
        for &r in rows {
            let r = r as usize;
            if category_index(ds.z_at(r, dim), cats) != c {
                rest.add_row(ds.x_row(r), ds.y_at(r));
            }
        }
        let criterion = child_rss(&per_cat[c], scan) + child_rss(&rest, scan);
        if best.is_none_or(|b| criterion < b.criterion) {
            best = Some(SplitCandidate {
                rule: SplitRule {
                    dim,
                    kind: SplitKind::Category,
                    delta: c as f64 / (cats - 1) as f64,
                },
                criterion,
                left_count: lc,
                right_count: rc,
            });
        }
    }
    best
}

impl FittedTree {
    /// Leaf index for a point already known to be on the unit cube.
    #[inline]
    pub fn leaf_of(&self, z: &[f64]) -> usize {
        let mut node = 0;
        loop {
            match &self.nodes[node].kind {
                NodeKind::Split { rule, left, right } => {
                    node = if rule.goes_left(z[rule.dim]) {
                        *left
                    } else {
                        *right
                    };
                }
                NodeKind::Leaf { leaf } => return *leaf,
            }
        }
    }

    /// Leaf containing `z`, after validating the point against `ds`.
    pub fn locate_leaf(&self, ds: &Dataset, z: &[f64]) -> Result<usize> {
        let z = ds.check_point(z)?;
        Ok(self.leaf_of(&z))
    }

    pub fn tree_beta(&self, ds: &Dataset, z: &[f64]) -> Result<TreeBeta> {
        let leaf = &self.leaves[self.locate_leaf(ds, z)?];
        Ok(TreeBeta {
            beta: leaf.fit.beta.clone(),
            ok: leaf.fit.ok,
            a_count: leaf.a_count(),
        })
    }

    /// Leaf index of every observation in `ds`, used or not by this tree.
    pub fn row_leaves(&self, ds: &Dataset) -> Vec<u32> {
        (0..ds.n())
            .map(|i| self.leaf_of(ds.z_row(i)) as u32)
            .collect()
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[TreeNode], i: usize) -> usize {
            match &nodes[i].kind {
                NodeKind::Split { left, right, .. } => {
                    1 + walk(nodes, *left).max(walk(nodes, *right))
                }
                NodeKind::Leaf { .. } => 0,
            }
        }
        walk(&self.nodes, 0)
    }

    /// Hash of the split structure and leaf structure-sample counts; blind
    /// to anything fitted on the estimation half.
    pub fn structure_hash(&self) -> String {
        let mut h = Sha256::new();
        for node in &self.nodes {
            h.update((node.b_count as u64).to_le_bytes());
            match &node.kind {
                NodeKind::Split { rule, left, right } => {
                    h.update([0u8]);
                    h.update((rule.dim as u64).to_le_bytes());
                    h.update([rule.kind as u8]);
                    h.update(rule.delta.to_bits().to_le_bytes());
                    h.update((*left as u64).to_le_bytes());
                    h.update((*right as u64).to_le_bytes());
                }
                NodeKind::Leaf { leaf } => {
                    h.update([1u8]);
                    h.update((*leaf as u64).to_le_bytes());
                }
            }
        }
        hex::encode(&h.finalize()[..16])
    }

    /// Recomputes every leaf's Gram system and OLS fit from its `a_rows`.
    pub fn refit_leaves(&mut self, ds: &Dataset, min_count: usize, rcond: f64) {
        for leaf in &mut self.leaves {
            let mut sys = GramSystem::new(ds.d_x());
            for &r in &leaf.a_rows {
                sys.add_row(ds.x_row(r as usize), ds.y_at(r as usize));
            }
            leaf.fit = ols_solve(&sys, min_count, rcond);
            leaf.gram = sys;
        }
    }

    /// Recomputes leaf regions by walking the split rules from the root.
    pub(crate) fn rebuild_regions(&mut self, kinds: &[ZKind]) {
        let mut stack = vec![(0usize, NodeRegion::root(kinds))];
        while let Some((i, region)) = stack.pop() {
            match self.nodes[i].kind.clone() {
                NodeKind::Split { rule, left, right } => {
                    let (l, r) = region.split(&rule, kinds);
                    stack.push((left, l));
                    stack.push((right, r));
                }
                NodeKind::Leaf { leaf } => self.leaves[leaf].region = region,
            }
        }
    }
}
