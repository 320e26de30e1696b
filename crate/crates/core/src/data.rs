//! Observation storage: `(Y, X, Z)` tables, CSV ingestion, unit-cube
//! normalization of `Z` and intercept augmentation.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Name given to the synthetic all-ones regressor.
pub const INTERCEPT_NAME: &str = "(intercept)";

/// Discrete values are snapped to this many decimals before grid checks.
const GRID_DECIMALS: f64 = 1e12;

/// Role of one effect-modifier column.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ZKind {
    Continuous,
    /// Supported on `{0, 1/(m-1), ..., 1}`.
    Discrete {
        m: usize,
    },
}

impl ZKind {
    pub fn is_discrete(&self) -> bool {
        matches!(self, ZKind::Discrete { .. })
    }

    pub fn categories(&self) -> Option<usize> {
        match self {
            ZKind::Continuous => None,
            ZKind::Discrete { m } => Some(*m),
        }
    }
}

/// One `z` entry in a schema file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZColumnSpec {
    pub name: String,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
}

/// Column-role map read from the schema JSON file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub y: String,
    pub x: Vec<String>,
    pub z: Vec<ZColumnSpec>,
    #[serde(default = "default_intercept")]
    pub intercept: bool,
}

fn default_intercept() -> bool {
    true
}

impl Schema {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        if value.get("y").is_none() {
            return Err(Error::Schema("schema has no `y` column".into()));
        }
        serde_json::from_value(value).map_err(|e| Error::Schema(e.to_string()))
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn z_kinds(&self) -> Result<Vec<ZKind>> {
        self.z
            .iter()
            .map(|c| match (c.kind.as_str(), c.m) {
                ("continuous", None) => Ok(ZKind::Continuous),
                ("discrete", Some(m)) if m >= 2 => Ok(ZKind::Discrete { m }),
                ("discrete", _) => Err(Error::Schema(format!(
                    "discrete column `{}` needs an integer `m` >= 2",
                    c.name
                ))),
                ("continuous", Some(_)) => Err(Error::Schema(format!(
                    "continuous column `{}` must not declare `m`",
                    c.name
                ))),
                (other, _) => Err(Error::Schema(format!(
                    "column `{}` has unknown kind `{other}`",
                    c.name
                ))),
            })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.x.is_empty() {
            return Err(Error::Schema("schema needs at least one x column".into()));
        }
        if self.z.is_empty() {
            return Err(Error::Schema("schema needs at least one z column".into()));
        }
        let mut seen = HashSet::new();
        let names = std::iter::once(&self.y)
            .chain(&self.x)
            .chain(self.z.iter().map(|c| &c.name));
        for name in names {
            if !seen.insert(name.as_str()) {
                return Err(Error::Schema(format!(
                    "column `{name}` has more than one role"
                )));
            }
        }
        self.z_kinds().map(|_| ())
    }
}

/// Affine map from the original `Z_j` scale onto `[0, 1]`:
/// `original = offset + scale * unit`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub offset: f64,
    pub scale: f64,
}

impl Affine {
    pub const IDENTITY: Affine = Affine {
        offset: 0.0,
        scale: 1.0,
    };

    pub fn to_unit(&self, v: f64) -> f64 {
        (v - self.offset) / self.scale
    }

    pub fn to_original(&self, u: f64) -> f64 {
        self.offset + self.scale * u
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnNames {
    pub y: String,
    pub x: Vec<String>,
    pub z: Vec<String>,
}

/// Aligned `(Y, X, Z)` observations, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    n: usize,
    d_x: usize,
    d_z: usize,
    y: Vec<f64>,
    x: Vec<f64>,
    z: Vec<f64>,
    z_kinds: Vec<ZKind>,
    names: ColumnNames,
    /// Per `Z` column; `Some` for continuous columns once normalized.
    scaling: Vec<Option<Affine>>,
    normalized: bool,
    intercept: bool,
}

impl Dataset {
    /// Builds a dataset from row vectors, validating finiteness, shapes and
    /// discrete grids. Continuous `Z` may still lie outside `[0, 1]`.
    pub fn new(
        y: Vec<f64>,
        x_rows: Vec<Vec<f64>>,
        z_rows: Vec<Vec<f64>>,
        z_kinds: Vec<ZKind>,
    ) -> Result<Self> {
        let d_x = x_rows.first().map_or(0, Vec::len);
        let d_z = z_kinds.len();
        let names = ColumnNames {
            y: "y".into(),
            x: (0..d_x).map(|j| format!("x{}", j + 1)).collect(),
            z: (0..d_z).map(|j| format!("z{}", j + 1)).collect(),
        };
        Self::from_parts(y, x_rows, z_rows, z_kinds, names)
    }

    fn from_parts(
        y: Vec<f64>,
        x_rows: Vec<Vec<f64>>,
        z_rows: Vec<Vec<f64>>,
        z_kinds: Vec<ZKind>,
        names: ColumnNames,
    ) -> Result<Self> {
        let n = y.len();
        if n < 2 {
            return Err(Error::Domain(format!(
                "need at least 2 observations, got {n}"
            )));
        }
        if x_rows.len() != n {
            return Err(Error::Dim {
                expected: n,
                got: x_rows.len(),
            });
        }
        if z_rows.len() != n {
            return Err(Error::Dim {
                expected: n,
                got: z_rows.len(),
            });
        }
        let d_x = x_rows[0].len();
        let d_z = z_kinds.len();
        if d_x == 0 || d_z == 0 {
            return Err(Error::Domain("d_X and d_Z must both be at least 1".into()));
        }
        let mut x = Vec::with_capacity(n * d_x);
        let mut z = Vec::with_capacity(n * d_z);
        for i in 0..n {
            if x_rows[i].len() != d_x {
                return Err(Error::Dim {
                    expected: d_x,
                    got: x_rows[i].len(),
                });
            }
            if z_rows[i].len() != d_z {
                return Err(Error::Dim {
                    expected: d_z,
                    got: z_rows[i].len(),
                });
            }
            x.extend_from_slice(&x_rows[i]);
            for (j, &v) in z_rows[i].iter().enumerate() {
                let v = match z_kinds[j] {
                    ZKind::Continuous => v,
                    ZKind::Discrete { m } => snap_to_grid(v, m).ok_or_else(|| {
                        Error::Domain(format!(
                            "row {}, column `{}`: value {v} is not on the {m}-point grid",
                            i + 1,
                            names.z[j]
                        ))
                    })?,
                };
                z.push(v);
            }
        }
        let non_finite = |v: &f64| !v.is_finite();
        if y.iter().any(non_finite) || x.iter().any(non_finite) || z.iter().any(non_finite) {
            return Err(Error::Domain("non-finite value in data".into()));
        }
        Ok(Dataset {
            n,
            d_x,
            d_z,
            y,
            x,
            z,
            scaling: vec![None; d_z],
            z_kinds,
            names,
            normalized: false,
            intercept: false,
        })
    }

    /// Dataset whose `Z` already lives on the unit cube (simulated designs);
    /// recorded as normalized with identity maps.
    pub fn from_unit_cube(
        y: Vec<f64>,
        x_rows: Vec<Vec<f64>>,
        z_rows: Vec<Vec<f64>>,
        z_kinds: Vec<ZKind>,
    ) -> Result<Self> {
        let mut ds = Self::new(y, x_rows, z_rows, z_kinds)?;
        ds.ensure_unit_cube()?;
        for (j, kind) in ds.z_kinds.iter().enumerate() {
            if !kind.is_discrete() {
                ds.scaling[j] = Some(Affine::IDENTITY);
            }
        }
        ds.normalized = true;
        Ok(ds)
    }

    pub fn with_names(mut self, y: &str, x: &[&str], z: &[&str]) -> Result<Self> {
        if x.len() != self.d_x || z.len() != self.d_z {
            return Err(Error::Dim {
                expected: self.d_x + self.d_z,
                got: x.len() + z.len(),
            });
        }
        self.names = ColumnNames {
            y: y.into(),
            x: x.iter().map(|s| s.to_string()).collect(),
            z: z.iter().map(|s| s.to_string()).collect(),
        };
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d_x(&self) -> usize {
        self.d_x
    }

    pub fn d_z(&self) -> usize {
        self.d_z
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn y_at(&self, i: usize) -> f64 {
        self.y[i]
    }

    pub fn x_row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d_x..(i + 1) * self.d_x]
    }

    pub fn z_row(&self, i: usize) -> &[f64] {
        &self.z[i * self.d_z..(i + 1) * self.d_z]
    }

    pub fn z_at(&self, i: usize, j: usize) -> f64 {
        self.z[i * self.d_z + j]
    }

    pub fn z_kinds(&self) -> &[ZKind] {
        &self.z_kinds
    }

    pub fn names(&self) -> &ColumnNames {
        &self.names
    }

    pub fn scaling(&self) -> &[Option<Affine>] {
        &self.scaling
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn has_intercept(&self) -> bool {
        self.intercept
    }

    /// Checks every continuous `Z` entry lies in `[0, 1]`.
    pub fn ensure_unit_cube(&self) -> Result<()> {
        for i in 0..self.n {
            for (j, kind) in self.z_kinds.iter().enumerate() {
                let v = self.z_at(i, j);
                if !kind.is_discrete() && !(0.0..=1.0).contains(&v) {
                    return Err(Error::Domain(format!(
                        "row {}, column `{}`: value {v} outside [0, 1]; normalize first",
                        i + 1,
                        self.names.z[j]
                    )));
                }
            }
        }
        Ok(())
    }

    /// Min-max maps each continuous `Z` column onto `[0, 1]`, composing with
    /// any earlier normalization so the stored maps always start from the
    /// original scale.
    pub fn normalize_z(mut self) -> Result<Self> {
        for j in 0..self.d_z {
            if self.z_kinds[j].is_discrete() {
                continue;
            }
            let (lo, hi) = (0..self.n).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), i| {
                let v = self.z_at(i, j);
                (lo.min(v), hi.max(v))
            });
            if !(hi > lo) {
                return Err(Error::DegenerateColumn(self.names.z[j].clone()));
            }
            let range = hi - lo;
            for i in 0..self.n {
                let v = &mut self.z[i * self.d_z + j];
                *v = ((*v - lo) / range).clamp(0.0, 1.0);
            }
            let prev = self.scaling[j].unwrap_or(Affine::IDENTITY);
            self.scaling[j] = Some(Affine {
                offset: prev.offset + prev.scale * lo,
                scale: prev.scale * range,
            });
        }
        self.normalized = true;
        Ok(self)
    }

    /// Normalizes with externally supplied maps (e.g. a fitted model's).
    pub fn normalize_with(mut self, scaling: &[Option<Affine>]) -> Result<Self> {
        if scaling.len() != self.d_z {
            return Err(Error::Dim {
                expected: self.d_z,
                got: scaling.len(),
            });
        }
        for j in 0..self.d_z {
            if let (ZKind::Continuous, Some(map)) = (self.z_kinds[j], scaling[j]) {
                for i in 0..self.n {
                    let v = &mut self.z[i * self.d_z + j];
                    *v = map.to_unit(*v);
                }
            }
        }
        self.scaling = scaling.to_vec();
        self.normalized = true;
        self.ensure_unit_cube()?;
        Ok(self)
    }

    /// Schema that reloads this dataset's columns from a CSV.
    pub fn schema(&self) -> Schema {
        let skip = usize::from(self.intercept);
        Schema {
            y: self.names.y.clone(),
            x: self.names.x[skip..].to_vec(),
            z: self
                .names
                .z
                .iter()
                .zip(&self.z_kinds)
                .map(|(name, kind)| ZColumnSpec {
                    name: name.clone(),
                    kind: if kind.is_discrete() {
                        "discrete"
                    } else {
                        "continuous"
                    }
                    .into(),
                    m: kind.categories(),
                })
                .collect(),
            intercept: self.intercept,
        }
    }

    /// Loads a CSV with this dataset's schema, normalization and intercept.
    pub fn load_like(&self, path: impl AsRef<Path>) -> Result<Dataset> {
        let ds = load_csv(path, &self.schema())?.normalize_with(&self.scaling)?;
        if self.intercept {
            ds.augment_intercept()
        } else {
            Ok(ds)
        }
    }

    /// Prepends an all-ones regressor.
    pub fn augment_intercept(mut self) -> Result<Self> {
        if self.intercept {
            return Err(Error::AlreadyAugmented);
        }
        let d = self.d_x + 1;
        let mut x = Vec::with_capacity(self.n * d);
        for i in 0..self.n {
            x.push(1.0);
            x.extend_from_slice(self.x_row(i));
        }
        self.x = x;
        self.d_x = d;
        self.names.x.insert(0, INTERCEPT_NAME.into());
        self.intercept = true;
        Ok(self)
    }

    /// Maps a raw (original-scale) test point onto the unit cube using the
    /// stored normalization and validates it.
    pub fn map_point(&self, raw: &[f64]) -> Result<Vec<f64>> {
        if raw.len() != self.d_z {
            return Err(Error::Dim {
                expected: self.d_z,
                got: raw.len(),
            });
        }
        let mapped: Vec<f64> = raw
            .iter()
            .enumerate()
            .map(|(j, &v)| match (self.z_kinds[j], self.scaling[j]) {
                (ZKind::Continuous, Some(map)) => map.to_unit(v),
                _ => v,
            })
            .collect();
        self.check_point(&mapped)
    }

    /// Validates a unit-cube test point and snaps discrete coordinates.
    pub fn check_point(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.d_z {
            return Err(Error::Dim {
                expected: self.d_z,
                got: z.len(),
            });
        }
        z.iter()
            .enumerate()
            .map(|(j, &v)| {
                if !v.is_finite() {
                    return Err(Error::Domain(format!("coordinate {j} is not finite")));
                }
                match self.z_kinds[j] {
                    ZKind::Continuous => {
                        // Tolerate rounding from the affine map.
                        if (-1e-12..=1.0 + 1e-12).contains(&v) {
                            Ok(v.clamp(0.0, 1.0))
                        } else {
                            Err(Error::Domain(format!(
                                "coordinate `{}` = {v} outside [0, 1]",
                                self.names.z[j]
                            )))
                        }
                    }
                    ZKind::Discrete { m } => snap_to_grid(v, m).ok_or_else(|| {
                        Error::Domain(format!(
                            "coordinate `{}` = {v} is not on the {m}-point grid",
                            self.names.z[j]
                        ))
                    }),
                }
            })
            .collect()
    }

    /// Stable content hash over shapes, kinds and the bit patterns of every value.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.n as u64).to_le_bytes());
        h.update((self.d_x as u64).to_le_bytes());
        h.update((self.d_z as u64).to_le_bytes());
        for kind in &self.z_kinds {
            h.update((kind.categories().unwrap_or(0) as u64).to_le_bytes());
        }
        for v in self.y.iter().chain(&self.x).chain(&self.z) {
            h.update(v.to_bits().to_le_bytes());
        }
        hex::encode(&h.finalize()[..16])
    }

    /// Writes the current values as CSV (the synthetic intercept is omitted).
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let skip = usize::from(self.intercept);
        let mut header = vec![self.names.y.clone()];
        header.extend(self.names.x[skip..].iter().cloned());
        header.extend(self.names.z.iter().cloned());
        w.write_record(&header)?;
        for i in 0..self.n {
            let mut rec = vec![self.y[i].to_string()];
            rec.extend(self.x_row(i)[skip..].iter().map(f64::to_string));
            rec.extend(self.z_row(i).iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Snaps `v` onto `{0, 1/(m-1), ..., 1}`; `None` when it is off the grid.
pub fn snap_to_grid(v: f64, m: usize) -> Option<f64> {
    let steps = (m - 1) as f64;
    let idx = (v * steps).round();
    if !(0.0..=steps).contains(&idx) {
        return None;
    }
    let grid = idx / steps;
    let rounded = (v * GRID_DECIMALS).round() / GRID_DECIMALS;
    let grid_rounded = (grid * GRID_DECIMALS).round() / GRID_DECIMALS;
    (rounded == grid_rounded).then_some(grid)
}

/// Category index of a snapped discrete value.
pub fn category_index(v: f64, m: usize) -> usize {
    (v * (m - 1) as f64).round() as usize
}

/// Reads a CSV with a header row and assigns roles according to `schema`.
///
/// The result is not normalized and carries no intercept; see [`prepare`].
pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<Dataset> {
    schema.validate()?;
    let kinds = schema.z_kinds()?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("column `{name}` not found in header")))
    };
    let y_col = find(&schema.y)?;
    let x_cols = schema
        .x
        .iter()
        .map(|n| find(n))
        .collect::<Result<Vec<_>>>()?;
    let z_cols = schema
        .z
        .iter()
        .map(|c| find(&c.name))
        .collect::<Result<Vec<_>>>()?;

    let mut y = Vec::new();
    let mut x_rows = Vec::new();
    let mut z_rows = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let row = r + 1;
        let cell = |col: usize, name: &str| -> Result<f64> {
            let text = record.get(col).unwrap_or("");
            let v: f64 = text.parse().map_err(|_| Error::Parse {
                row,
                column: name.to_string(),
                message: format!("`{text}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    column: name.to_string(),
                    message: format!("`{text}` is not finite"),
                });
            }
            Ok(v)
        };
        y.push(cell(y_col, &schema.y)?);
        x_rows.push(
            x_cols
                .iter()
                .zip(&schema.x)
                .map(|(&c, n)| cell(c, n))
                .collect::<Result<Vec<_>>>()?,
        );
        z_rows.push(
            z_cols
                .iter()
                .zip(&schema.z)
                .map(|(&c, spec)| cell(c, &spec.name))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    let names = ColumnNames {
        y: schema.y.clone(),
        x: schema.x.clone(),
        z: schema.z.iter().map(|c| c.name.clone()).collect(),
    };
    Dataset::from_parts(y, x_rows, z_rows, kinds, names)
}

/// `load_csv`, then `normalize_z`, then `augment_intercept` if the schema asks for it.
pub fn prepare(path: impl AsRef<Path>, schema: &Schema) -> Result<Dataset> {
    let ds = load_csv(path, schema)?.normalize_z()?;
    if schema.intercept {
        ds.augment_intercept()
    } else {
        Ok(ds)
    }
}

/// Evaluation point on the unit cube, optionally carrying regressor values
/// for predicting `xᵀβ(z)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TestPoint {
    pub z: Vec<f64>,
    pub x: Option<Vec<f64>>,
}

impl TestPoint {
    pub fn new(ds: &Dataset, z: &[f64]) -> Result<Self> {
        Ok(TestPoint {
            z: ds.check_point(z)?,
            x: None,
        })
    }

    pub fn with_x(mut self, ds: &Dataset, x: Vec<f64>) -> Result<Self> {
        if x.len() != ds.d_x() {
            return Err(Error::Dim {
                expected: ds.d_x(),
                got: x.len(),
            });
        }
        self.x = Some(x);
        Ok(self)
    }
}
