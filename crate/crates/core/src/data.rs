//! Dataset ingestion and typing: integer feature matrices with per-feature
//! bounds, shift directions, and one-hot categorical groups.
//!
//! Data arrives as a CSV file (header row, integer cells) plus a JSON sidecar
//! describing each feature column. The one CSV column not named in the sidecar
//! is the label column. Categorical source columns declared in the sidecar are
//! expanded here into one-hot member columns (one per observed level, levels
//! ascending), so everything downstream sees a purely integer/binary matrix.
//!
//! Branching candidates come from [`compute_thresholds`]: for a feature with
//! observed training range [c, d] the usable cut points are the integers in
//! [c, d) — a cut at θ sends values ≤ θ left and ≥ θ+1 right, so θ ≥ d or
//! θ < c would never separate anything.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// How a feature's value may be perturbed at prediction time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShiftDirection {
    /// May move up or down.
    Both,
    /// May only increase.
    Up,
    /// May only decrease.
    Down,
    /// Never moves.
    None,
}

/// Value domain of one (expanded) feature column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FeatureKind {
    /// Integer-valued; either bound may be absent (open side).
    Integer {
        lower: Option<i64>,
        upper: Option<i64>,
    },
    /// {0, 1}-valued.
    Binary,
    /// One column of a one-hot group; `group` names the original
    /// categorical column all members share.
    CategoricalMember { group: String },
}

impl FeatureKind {
    /// Smallest value the feature may take, if bounded below.
    pub fn lower_bound(&self) -> Option<i64> {
        match self {
            FeatureKind::Integer { lower, .. } => *lower,
            FeatureKind::Binary | FeatureKind::CategoricalMember { .. } => Some(0),
        }
    }

    /// Largest value the feature may take, if bounded above.
    pub fn upper_bound(&self) -> Option<i64> {
        match self {
            FeatureKind::Integer { upper, .. } => *upper,
            FeatureKind::Binary | FeatureKind::CategoricalMember { .. } => Some(1),
        }
    }

    /// Group id if this is a one-hot member column.
    pub fn group(&self) -> Option<&str> {
        match self {
            FeatureKind::CategoricalMember { group } => Some(group),
            _ => None,
        }
    }
}

/// Declaration of one feature column: domain, shift behavior, and the
/// per-feature certainty ρ used by uncertainty-set calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSchema {
    pub name: String,
    pub kind: FeatureKind,
    pub shift: ShiftDirection,
    /// Probability that the value does *not* shift; `None` means the caller
    /// must supply ρ at calibration time.
    pub rho: Option<f64>,
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("schema file is not valid JSON: {0}")]
    SchemaJson(#[from] serde_json::Error),
    #[error("schema column {column:?}: {reason}")]
    SchemaInvalid { column: String, reason: String },
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("CSV is missing schema column {name:?}")]
    MissingColumn { name: String },
    #[error("CSV must have exactly one non-schema column (the label); found {0:?}")]
    LabelColumn(Vec<String>),
    #[error("row {row}, column {column:?}: cell {value:?} is not an integer")]
    CellParse {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}, column {column:?}: value {value} outside [{lower}, {upper}]")]
    BoundViolation {
        row: usize,
        column: String,
        value: i64,
        lower: DisplayBound,
        upper: DisplayBound,
    },
    #[error("row {row}, group {group:?}: one-hot columns sum to {sum}, expected 1")]
    BrokenOneHot {
        row: usize,
        group: String,
        sum: i64,
    },
    #[error("dataset has no rows")]
    Empty,
    #[error("dataset has a single label class {0:?}; at least two are required")]
    SingleClass(String),
    #[error("column {column:?}: rho {rho} outside ({min}, 1]")]
    RhoOutOfRange { column: String, rho: f64, min: f64 },
    #[error("split fraction {0} is not strictly between 0 and 1")]
    SplitFraction(f64),
}

/// `Option<i64>` bound rendered as the value or an infinity sign.
#[derive(Debug, Clone, Copy)]
pub struct DisplayBound(pub Option<i64>);

impl fmt::Display for DisplayBound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some(v) => write!(f, "{v}"),
            None => write!(f, "∞"),
        }
    }
}

/// Immutable training data: an |I| × |F| integer matrix, dense label ids,
/// and the per-column [`FeatureSchema`]s.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<FeatureSchema>,
    /// Row-major |I| × |F|.
    x: Vec<Vec<i64>>,
    /// Dense ids into `label_names`.
    y: Vec<usize>,
    /// Original label text per dense id, lexicographically sorted.
    label_names: Vec<String>,
}

impl Dataset {
    /// Build and validate a dataset from parts. Labels are arbitrary text;
    /// they are mapped to dense ids in lexicographic order of the distinct
    /// values.
    pub fn from_parts(
        features: Vec<FeatureSchema>,
        x: Vec<Vec<i64>>,
        labels: Vec<String>,
    ) -> Result<Self, DataError> {
        let mut names: Vec<String> = labels.iter().cloned().collect();
        names.sort();
        names.dedup();
        if names.len() < 2 {
            return Err(DataError::SingleClass(
                names.first().cloned().unwrap_or_default(),
            ));
        }
        let y = labels
            .iter()
            .map(|l| names.binary_search(l).expect("label present"))
            .collect();
        Self::assemble(features, x, y, names)
    }

    fn assemble(
        features: Vec<FeatureSchema>,
        x: Vec<Vec<i64>>,
        y: Vec<usize>,
        label_names: Vec<String>,
    ) -> Result<Self, DataError> {
        if x.is_empty() {
            return Err(DataError::Empty);
        }
        debug_assert_eq!(x.len(), y.len());
        for row in &x {
            debug_assert_eq!(row.len(), features.len());
        }
        let ds = Dataset {
            features,
            x,
            y,
            label_names,
        };
        ds.validate_schemas()?;
        ds.validate_values()?;
        Ok(ds)
    }

    fn validate_schemas(&self) -> Result<(), DataError> {
        for fs in &self.features {
            if let FeatureKind::Integer {
                lower: Some(l),
                upper: Some(u),
            } = fs.kind
            {
                if l > u {
                    return Err(DataError::SchemaInvalid {
                        column: fs.name.clone(),
                        reason: format!("bounds [{l}, {u}] have lower > upper"),
                    });
                }
            }
            if let Some(rho) = fs.rho {
                // Floor below which the stay-put probability is less than a
                // uniform draw over the feature's whole range — calibration
                // has no valid cost there.
                let min = match &fs.kind {
                    FeatureKind::Integer {
                        lower: Some(l),
                        upper: Some(u),
                    } => 1.0 / (*u - *l + 1) as f64,
                    FeatureKind::Binary => 0.5,
                    FeatureKind::CategoricalMember { group } => {
                        1.0 / self.group_members(group).len() as f64
                    }
                    _ => 0.0,
                };
                if rho <= 0.0 || rho > 1.0 || rho < min {
                    return Err(DataError::RhoOutOfRange {
                        column: fs.name.clone(),
                        rho,
                        min,
                    });
                }
            }
        }
        // Members of a group must agree on rho and shift: cost calibration
        // treats the group as one categorical feature.
        for (group, members) in self.groups() {
            let first = &self.features[members[0]];
            for &m in &members[1..] {
                let fs = &self.features[m];
                if fs.rho != first.rho || fs.shift != first.shift {
                    return Err(DataError::SchemaInvalid {
                        column: fs.name.clone(),
                        reason: format!(
                            "group {group:?} members disagree on rho or shift"
                        ),
                    });
                }
            }
        }
        Ok(())
    }

    fn validate_values(&self) -> Result<(), DataError> {
        for (i, row) in self.x.iter().enumerate() {
            for (f, fs) in self.features.iter().enumerate() {
                let v = row[f];
                let lo = fs.kind.lower_bound();
                let hi = fs.kind.upper_bound();
                if lo.is_some_and(|l| v < l) || hi.is_some_and(|u| v > u) {
                    return Err(DataError::BoundViolation {
                        row: i,
                        column: fs.name.clone(),
                        value: v,
                        lower: DisplayBound(lo),
                        upper: DisplayBound(hi),
                    });
                }
            }
        }
        for (group, members) in self.groups() {
            for (i, row) in self.x.iter().enumerate() {
                let sum: i64 = members.iter().map(|&f| row[f]).sum();
                if sum != 1 {
                    return Err(DataError::BrokenOneHot {
                        row: i,
                        group: group.clone(),
                        sum,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        self.x.len()
    }

    pub fn n_features(&self) -> usize {
        self.features.len()
    }

    /// Number of distinct label classes (over the full label table, which a
    /// train/test split shares with its parent).
    pub fn n_labels(&self) -> usize {
        self.label_names.len()
    }

    pub fn features(&self) -> &[FeatureSchema] {
        &self.features
    }

    pub fn feature(&self, f: usize) -> &FeatureSchema {
        &self.features[f]
    }

    pub fn value(&self, i: usize, f: usize) -> i64 {
        self.x[i][f]
    }

    pub fn row(&self, i: usize) -> &[i64] {
        &self.x[i]
    }

    /// Dense label id of sample `i`.
    pub fn label(&self, i: usize) -> usize {
        self.y[i]
    }

    pub fn label_name(&self, k: usize) -> &str {
        &self.label_names[k]
    }

    pub fn label_names(&self) -> &[String] {
        &self.label_names
    }

    /// One-hot groups in first-appearance order: group id → member column
    /// indices (ascending).
    pub fn groups(&self) -> Vec<(String, Vec<usize>)> {
        let mut order: Vec<String> = Vec::new();
        let mut map: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (f, fs) in self.features.iter().enumerate() {
            if let Some(g) = fs.kind.group() {
                if !map.contains_key(g) {
                    order.push(g.to_string());
                }
                map.entry(g.to_string()).or_default().push(f);
            }
        }
        order
            .into_iter()
            .map(|g| {
                let members = map[&g].clone();
                (g, members)
            })
            .collect()
    }

    /// Member columns of the group `f` belongs to (including `f` itself), or
    /// just `[f]` for a non-categorical feature.
    pub fn group_members(&self, group: &str) -> Vec<usize> {
        self.features
            .iter()
            .enumerate()
            .filter(|(_, fs)| fs.kind.group() == Some(group))
            .map(|(f, _)| f)
            .collect()
    }

    /// Clone out the given rows, keeping schemas and the full label table.
    /// Splits deliberately skip the two-class check: a small side may see
    /// one class, but its labels still refer to the shared table.
    fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.clone(),
            x: indices.iter().map(|&i| self.x[i].clone()).collect(),
            y: indices.iter().map(|&i| self.y[i]).collect(),
            label_names: self.label_names.clone(),
        }
    }
}

/// Candidate branching thresholds per feature, ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThresholdMap {
    per_feature: Vec<Vec<i64>>,
}

impl ThresholdMap {
    pub fn thresholds(&self, f: usize) -> &[i64] {
        &self.per_feature[f]
    }

    pub fn n_features(&self) -> usize {
        self.per_feature.len()
    }

    /// True if no feature has any usable threshold.
    pub fn is_empty(&self) -> bool {
        self.per_feature.iter().all(|t| t.is_empty())
    }
}

/// Usable cut points per feature: the integers in [min, max) of the observed
/// column. A constant column gets none and is never branchable; one-hot
/// member columns always get {0} so a level seen in only one phase of a
/// split stays branchable.
pub fn compute_thresholds(dataset: &Dataset) -> ThresholdMap {
    let per_feature = (0..dataset.n_features())
        .map(|f| {
            if dataset.feature(f).kind.group().is_some() {
                return vec![0];
            }
            let lo = (0..dataset.n_samples())
                .map(|i| dataset.value(i, f))
                .min()
                .unwrap();
            let hi = (0..dataset.n_samples())
                .map(|i| dataset.value(i, f))
                .max()
                .unwrap();
            (lo..hi).collect()
        })
        .collect();
    ThresholdMap { per_feature }
}

/// Deterministic shuffled split. The training side gets ⌈fraction·n⌉ rows
/// (capped at n−1 so the test side is never empty); same seed, same split.
pub fn train_test_split(
    dataset: &Dataset,
    fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset), DataError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DataError::SplitFraction(fraction));
    }
    let n = dataset.n_samples();
    // The 1e-9 slack absorbs float noise so e.g. 0.8 of 10 rows is 8, not 9.
    let want = (fraction * n as f64 - 1e-9).ceil() as usize;
    let train_n = want.clamp(1, n - 1);
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let train = dataset.subset(&indices[..train_n]);
    let test = dataset.subset(&indices[train_n..]);
    Ok((train, test))
}

// ---------------------------------------------------------------------------
// Sidecar schema file
// ---------------------------------------------------------------------------

/// One column entry in the JSON schema sidecar. Exactly these keys are
/// understood; anything else is rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SidecarColumn {
    name: String,
    /// "integer" | "binary" | "categorical" | "categorical-member"
    kind: String,
    /// [lower, upper], either side may be null; only for "integer".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bounds: Option<(Option<i64>, Option<i64>)>,
    /// "both" (default) | "up" | "down" | "none"
    #[serde(default, skip_serializing_if = "Option::is_none")]
    shift: Option<ShiftDirection>,
    /// Group id; required for "categorical-member", forbidden otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    group: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rho: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SidecarKind {
    Integer,
    Binary,
    /// Source column to be one-hot expanded at load time.
    Categorical,
    CategoricalMember,
}

impl SidecarColumn {
    fn parsed_kind(&self) -> Result<SidecarKind, DataError> {
        match self.kind.as_str() {
            "integer" => Ok(SidecarKind::Integer),
            "binary" => Ok(SidecarKind::Binary),
            "categorical" => Ok(SidecarKind::Categorical),
            "categorical-member" => Ok(SidecarKind::CategoricalMember),
            other => Err(DataError::SchemaInvalid {
                column: self.name.clone(),
                reason: format!("unknown kind {other:?}"),
            }),
        }
    }

    fn validate(&self) -> Result<SidecarKind, DataError> {
        let kind = self.parsed_kind()?;
        let err = |reason: String| DataError::SchemaInvalid {
            column: self.name.clone(),
            reason,
        };
        match kind {
            SidecarKind::Integer => {
                if self.group.is_some() {
                    return Err(err("\"group\" is only valid for categorical-member".into()));
                }
            }
            SidecarKind::Binary => {
                if self.group.is_some() {
                    return Err(err("\"group\" is only valid for categorical-member".into()));
                }
                if let Some(b) = self.bounds {
                    if b != (Some(0), Some(1)) {
                        return Err(err("binary bounds must be [0, 1] or absent".into()));
                    }
                }
            }
            SidecarKind::Categorical | SidecarKind::CategoricalMember => {
                if self.bounds.is_some() {
                    return Err(err("categorical columns take no bounds".into()));
                }
                if kind == SidecarKind::CategoricalMember && self.group.is_none() {
                    return Err(err("categorical-member requires a \"group\"".into()));
                }
                if kind == SidecarKind::Categorical && self.group.is_some() {
                    return Err(err(
                        "\"group\" is only valid for categorical-member".into(),
                    ));
                }
                if matches!(self.shift, Some(ShiftDirection::Up | ShiftDirection::Down)) {
                    return Err(err(
                        "categorical shift must be \"both\" or \"none\"".into(),
                    ));
                }
            }
        }
        Ok(kind)
    }

    fn shift(&self) -> ShiftDirection {
        self.shift.unwrap_or(ShiftDirection::Both)
    }
}

fn read_to_string(path: &Path) -> Result<String, DataError> {
    std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Load a CSV + JSON-sidecar pair into a validated [`Dataset`].
///
/// The CSV must contain every sidecar column plus exactly one extra column,
/// which becomes the label. Categorical source columns are expanded into one
/// one-hot member column per observed level (levels ascending), named
/// `"{column}={level}"`, in place of the source column. Column order follows
/// the sidecar, not the CSV.
pub fn load_dataset(csv_path: &Path, schema_path: &Path) -> Result<Dataset, DataError> {
    let sidecar: Vec<SidecarColumn> = serde_json::from_str(&read_to_string(schema_path)?)?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(csv_path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => DataError::Io {
                path: csv_path.display().to_string(),
                source: std::io::Error::other(e.to_string()),
            },
            _ => DataError::Csv(e),
        })?;
    let header: Vec<String> = reader
        .headers()?
        .iter()
        .map(|s| s.to_string())
        .collect();

    let mut col_index: BTreeMap<&str, usize> = BTreeMap::new();
    for (j, h) in header.iter().enumerate() {
        col_index.insert(h.as_str(), j);
    }
    for c in &sidecar {
        c.validate()?;
        if !col_index.contains_key(c.name.as_str()) {
            return Err(DataError::MissingColumn {
                name: c.name.clone(),
            });
        }
    }
    let extra: Vec<String> = header
        .iter()
        .filter(|h| !sidecar.iter().any(|c| &c.name == *h))
        .cloned()
        .collect();
    if extra.len() != 1 {
        return Err(DataError::LabelColumn(extra));
    }
    let label_col = col_index[extra[0].as_str()];

    // Raw cells, sidecar column order.
    let mut raw: Vec<Vec<i64>> = Vec::new();
    let mut labels: Vec<String> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let mut row = Vec::with_capacity(sidecar.len());
        for c in &sidecar {
            let cell = record.get(col_index[c.name.as_str()]).unwrap_or("");
            let v: i64 = cell.parse().map_err(|_| DataError::CellParse {
                row: i,
                column: c.name.clone(),
                value: cell.to_string(),
            })?;
            row.push(v);
        }
        raw.push(row);
        labels.push(record.get(label_col).unwrap_or("").to_string());
    }
    if raw.is_empty() {
        return Err(DataError::Empty);
    }

    // Expand categorical source columns; pass the rest through.
    let mut features: Vec<FeatureSchema> = Vec::new();
    let mut x: Vec<Vec<i64>> = vec![Vec::new(); raw.len()];
    for (j, c) in sidecar.iter().enumerate() {
        match c.validate()? {
            SidecarKind::Integer => {
                let (lower, upper) = c.bounds.unwrap_or((None, None));
                features.push(FeatureSchema {
                    name: c.name.clone(),
                    kind: FeatureKind::Integer { lower, upper },
                    shift: c.shift(),
                    rho: c.rho,
                });
                for (i, row) in raw.iter().enumerate() {
                    x[i].push(row[j]);
                }
            }
            SidecarKind::Binary => {
                features.push(FeatureSchema {
                    name: c.name.clone(),
                    kind: FeatureKind::Binary,
                    shift: c.shift(),
                    rho: c.rho,
                });
                for (i, row) in raw.iter().enumerate() {
                    x[i].push(row[j]);
                }
            }
            SidecarKind::CategoricalMember => {
                features.push(FeatureSchema {
                    name: c.name.clone(),
                    kind: FeatureKind::CategoricalMember {
                        group: c.group.clone().unwrap(),
                    },
                    shift: c.shift(),
                    rho: c.rho,
                });
                for (i, row) in raw.iter().enumerate() {
                    x[i].push(row[j]);
                }
            }
            SidecarKind::Categorical => {
                let mut levels: Vec<i64> = raw.iter().map(|row| row[j]).collect();
                levels.sort_unstable();
                levels.dedup();
                for &level in &levels {
                    features.push(FeatureSchema {
                        name: format!("{}={}", c.name, level),
                        kind: FeatureKind::CategoricalMember {
                            group: c.name.clone(),
                        },
                        shift: c.shift(),
                        rho: c.rho,
                    });
                    for (i, row) in raw.iter().enumerate() {
                        x[i].push(i64::from(row[j] == level));
                    }
                }
            }
        }
    }
    Dataset::from_parts(features, x, labels)
}

/// Serialize a dataset's (expanded) feature schemas back to sidecar JSON.
/// Categorical members come out as explicit `categorical-member` columns;
/// the original source column is not reconstructed.
pub fn schema_to_json(dataset: &Dataset) -> String {
    let cols: Vec<SidecarColumn> = dataset
        .features()
        .iter()
        .map(|fs| {
            let (kind, bounds, group) = match &fs.kind {
                FeatureKind::Integer { lower, upper } => (
                    "integer",
                    if lower.is_some() || upper.is_some() {
                        Some((*lower, *upper))
                    } else {
                        None
                    },
                    None,
                ),
                FeatureKind::Binary => ("binary", None, None),
                FeatureKind::CategoricalMember { group } => {
                    ("categorical-member", None, Some(group.clone()))
                }
            };
            SidecarColumn {
                name: fs.name.clone(),
                kind: kind.to_string(),
                bounds,
                shift: Some(fs.shift),
                group,
                rho: fs.rho,
            }
        })
        .collect();
    serde_json::to_string_pretty(&cols).expect("schema serializes")
}

/// Serialize the data matrix and labels back to CSV, feature columns first,
/// label column last under `label_name`.
pub fn dataset_to_csv(dataset: &Dataset, label_name: &str) -> String {
    let mut out = String::new();
    let names: Vec<&str> = dataset
        .features()
        .iter()
        .map(|fs| fs.name.as_str())
        .collect();
    out.push_str(&names.join(","));
    out.push(',');
    out.push_str(label_name);
    out.push('\n');
    for i in 0..dataset.n_samples() {
        for f in 0..dataset.n_features() {
            out.push_str(&dataset.value(i, f).to_string());
            out.push(',');
        }
        out.push_str(dataset.label_name(dataset.label(i)));
        out.push('\n');
    }
    out
}
