//! Command implementations behind the `robtree` binary: train a tree
//! (robust, regularized-nominal, or stability-proxy), evaluate a saved
//! tree under sampled covariate shifts, report a calibration, and export
//! a tree for reading or graphing.
//!
//! Commands are deterministic functions of their arguments: given the
//! same inputs and seeds they write byte-identical artifacts, so runs can
//! be diffed. Timing is printed to stderr only, never serialized.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Serialize;
use thiserror::Error;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use robtree_core::data::{load_dataset, DataError, Dataset};
use robtree_core::master::{
    cutting_plane_solve, nonrobust_regularized_solve, proxy_solve, BudgetMode, EnumerativeBackend,
    MasterError, SolveOptions, SolveReport,
};
use robtree_core::tree::{
    deserialize_tree, route, serialize_tree, NodeRole, TreeEncoding, TreeError,
};
use robtree_core::uncertainty::{
    calibrate, calibration_report, rho_floor, sample_perturbation, BudgetSpec, CalibrationSpec,
    UncertaintyError,
};

/// Encodings are enumerable up to this count with the built-in backend.
const ENUMERATION_CAP: u128 = 500_000;

/// Errors mapped to process exit codes: 2 validation, 3 resource cap,
/// 4 backend failure.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Resource(String),
    #[error("{0}")]
    Backend(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Resource(_) => 3,
            CliError::Backend(_) => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Validation(_) => "validation",
            CliError::Resource(_) => "resource-cap",
            CliError::Backend(_) => "backend",
        }
    }

    /// Machine-readable error record for stderr.
    pub fn record(&self) -> String {
        serde_json::json!({ "error": { "kind": self.kind(), "message": self.to_string() } })
            .to_string()
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<TreeError> for CliError {
    fn from(e: TreeError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<UncertaintyError> for CliError {
    fn from(e: UncertaintyError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<MasterError> for CliError {
    fn from(e: MasterError) -> Self {
        match e {
            MasterError::EnumerationBudget { .. } => CliError::Resource(e.to_string()),
            MasterError::BackendUnavailable { .. } => CliError::Backend(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Validation(format!("{}: {e}", path.display()))
}

// ---------------------------------------------------------------------------
// Shared argument plumbing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Robust,
    NonrobustRegularized,
    Proxy,
}

impl TrainMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrainMode::Robust => "robust",
            TrainMode::NonrobustRegularized => "nonrobust-regularized",
            TrainMode::Proxy => "proxy",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendChoice {
    BuiltinEnum,
    External,
}

impl BackendChoice {
    fn instantiate(&self) -> Result<EnumerativeBackend, CliError> {
        match self {
            BackendChoice::BuiltinEnum => Ok(EnumerativeBackend {
                max_encodings: ENUMERATION_CAP,
            }),
            BackendChoice::External => Err(CliError::Backend(
                "no external solver adapter is linked into this build; use --backend builtin-enum"
                    .into(),
            )),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            BackendChoice::BuiltinEnum => "builtin-enum",
            BackendChoice::External => "external",
        }
    }
}

fn load(data: &Path, schema: &Path) -> Result<Dataset, CliError> {
    Ok(load_dataset(data, schema)?)
}

fn budget_spec(lambda: Option<f64>, epsilon: Option<f64>) -> Result<BudgetSpec, CliError> {
    match (lambda, epsilon) {
        (Some(l), None) => Ok(BudgetSpec::Lambda(l)),
        (None, Some(e)) => Ok(BudgetSpec::Explicit(e)),
        _ => Err(CliError::Validation(
            "provide exactly one of --lambda or --epsilon".into(),
        )),
    }
}

/// One standard-normal draw (Box–Muller, cosine branch).
fn normal_draw(rng: &mut ChaCha12Rng, mean: f64, sd: f64) -> f64 {
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random();
    mean + sd * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Stream separator so ρ draws never collide with perturbation draws
/// made from the same user seed.
const RHO_STREAM: u64 = 0x8f0c_5eed_2b1d_77a3;

/// Per-feature ρ drawn around a mean (sd 0.2) and clamped into each
/// feature's admissible range — the stand-in for hand-set noise levels
/// when exploring robustness/accuracy trade-offs.
fn rho_harness(dataset: &Dataset, mean: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ RHO_STREAM);
    (0..dataset.n_features())
        .map(|f| normal_draw(&mut rng, mean, 0.2).clamp(rho_floor(dataset, f).max(0.01), 1.0))
        .collect()
}

/// Per-feature ρ for sampling/calibration: an explicit flag wins, then a
/// drawn harness, then the schema's per-feature values.
fn resolve_rho(
    dataset: &Dataset,
    rho: Option<f64>,
    rho_mean: Option<f64>,
    seed: u64,
) -> Result<Vec<f64>, CliError> {
    if let Some(mean) = rho_mean {
        return Ok(rho_harness(dataset, mean, seed));
    }
    (0..dataset.n_features())
        .map(|f| {
            rho.or(dataset.feature(f).rho).ok_or_else(|| {
                CliError::Validation(format!(
                    "feature '{}' has no noise level: pass --rho/--rho-mean or set rho in the schema",
                    dataset.feature(f).name
                ))
            })
        })
        .collect()
}

/// Refuse trees that reference columns or labels the dataset lacks.
fn check_tree_against(dataset: &Dataset, encoding: &TreeEncoding) -> Result<(), CliError> {
    for n in encoding.topology().all_nodes() {
        match encoding.role(n) {
            NodeRole::Branch { feature, .. } if feature >= dataset.n_features() => {
                return Err(CliError::Validation(format!(
                    "tree branches on feature {feature} but the data has {} columns",
                    dataset.n_features()
                )));
            }
            NodeRole::Predict { label } if label >= dataset.n_labels() => {
                return Err(CliError::Validation(format!(
                    "tree predicts label id {label} but the data has {} classes",
                    dataset.n_labels()
                )));
            }
            _ => {}
        }
    }
    Ok(())
}

fn correct_count(encoding: &TreeEncoding, rows: &[Vec<i64>], dataset: &Dataset) -> usize {
    rows.iter()
        .enumerate()
        .filter(|(i, row)| route(encoding, row).label == dataset.label(*i))
        .count()
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
    }
    std::fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn pretty_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialize");
    s.push('\n');
    s
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainArgs {
    pub data: PathBuf,
    pub schema: PathBuf,
    pub depth: u32,
    pub mode: TrainMode,
    pub lambda: Option<f64>,
    pub epsilon: Option<f64>,
    pub rho: Option<f64>,
    pub rho_mean: Option<f64>,
    pub r: Option<f64>,
    pub budget_mode: BudgetMode,
    pub seed: u64,
    pub backend: BackendChoice,
    pub iter_cap: Option<usize>,
    pub time_cap: Option<f64>,
    pub no_strengthen: bool,
    pub out: PathBuf,
}

/// What `train` wrote and where.
#[derive(Debug, Serialize)]
pub struct TrainReport {
    pub mode: &'static str,
    pub depth: u32,
    pub backend: &'static str,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    pub epsilon: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub regularization: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub budget_mode: Option<&'static str>,
    pub objective: f64,
    pub bound: f64,
    pub status: &'static str,
    pub iterations: usize,
    pub cuts_added: usize,
    pub branching_nodes: usize,
    pub n_samples: usize,
    pub n_features: usize,
    pub labels: Vec<String>,
    pub tree_file: String,
}

pub struct TrainOutcome {
    pub report: TrainReport,
    pub solve: SolveReport,
    pub tree_path: PathBuf,
    pub report_path: PathBuf,
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainOutcome, CliError> {
    let dataset = load(&args.data, &args.schema)?;
    let options = SolveOptions {
        strengthen: !args.no_strengthen,
        iteration_cap: args.iter_cap,
        time_cap: args.time_cap.map(Duration::from_secs_f64),
    };

    let mut used_rho: Option<Vec<f64>> = None;
    let mut calibration = |lambda: Option<f64>, epsilon: Option<f64>| {
        let rho_vec = if args.rho_mean.is_some() {
            let v = rho_harness(&dataset, args.rho_mean.unwrap(), args.seed);
            used_rho = Some(v.clone());
            Some(v)
        } else {
            None
        };
        let spec = CalibrationSpec {
            budget: Some(budget_spec(lambda, epsilon)?),
            rho_overrides: rho_vec
                .map(|v| vec![v; dataset.n_samples()]),
            default_rho: args.rho,
        };
        Ok::<_, CliError>(calibrate(&spec, &dataset)?)
    };

    let (solve, epsilon, regularization, budget_mode) = match args.mode {
        TrainMode::Robust => {
            let model = calibration(args.lambda, args.epsilon)?;
            let backend = args.backend.instantiate()?;
            let eps = model.epsilon;
            (
                cutting_plane_solve(&dataset, &model, args.depth, &backend, options)?,
                eps,
                None,
                None,
            )
        }
        TrainMode::NonrobustRegularized => {
            if args.lambda.is_some() || args.epsilon.is_some() {
                eprintln!("note: --lambda/--epsilon have no effect in nonrobust-regularized mode");
            }
            let r = args.r.unwrap_or(1.0);
            let backend = args.backend.instantiate()?;
            (
                nonrobust_regularized_solve(&dataset, args.depth, r, &backend, options)?,
                0.0,
                Some(r),
                None,
            )
        }
        TrainMode::Proxy => {
            let model = calibration(args.lambda, args.epsilon)?;
            // The proxy path enumerates directly; an external backend has
            // nothing to do here, but refuse explicitly rather than ignore.
            args.backend.instantiate()?;
            let eps = model.epsilon;
            (
                proxy_solve(&dataset, &model, args.depth, args.budget_mode, ENUMERATION_CAP)?,
                eps,
                None,
                Some(match args.budget_mode {
                    BudgetMode::Shared => "shared",
                    BudgetMode::PerSample => "per-sample",
                }),
            )
        }
    };

    let tree_path = args.out.join("tree.json");
    let report_path = args.out.join("report.json");
    let report = TrainReport {
        mode: args.mode.as_str(),
        depth: args.depth,
        backend: args.backend.as_str(),
        seed: args.seed,
        lambda: args.lambda,
        epsilon,
        rho: used_rho,
        regularization,
        budget_mode,
        objective: solve.objective,
        bound: solve.bound,
        status: solve.status.as_str(),
        iterations: solve.iterations,
        cuts_added: solve.cuts_added,
        branching_nodes: solve.encoding.n_branching(),
        n_samples: dataset.n_samples(),
        n_features: dataset.n_features(),
        labels: dataset.label_names().to_vec(),
        tree_file: "tree.json".into(),
    };

    let mut blob = serialize_tree(&solve.encoding);
    blob.push('\n');
    write_file(&tree_path, &blob)?;
    write_file(&report_path, &pretty_json(&report))?;

    Ok(TrainOutcome {
        report,
        solve,
        tree_path,
        report_path,
    })
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EvaluateArgs {
    pub tree: PathBuf,
    pub data: PathBuf,
    pub schema: PathBuf,
    pub rho: Option<f64>,
    pub rho_mean: Option<f64>,
    pub rho_offset: Option<f64>,
    pub rho_radius: Option<f64>,
    pub k: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

/// Accuracy of one tree on the nominal data and across K sampled
/// perturbed copies, with the cost of having trained robustly.
#[derive(Debug, Serialize)]
pub struct EvaluationReport {
    pub nominal_accuracy: f64,
    pub worst_accuracy: f64,
    pub average_accuracy: f64,
    /// Best nominal accuracy any same-depth tree attains on this data,
    /// minus this tree's: what robustness cost on clean data.
    pub price_of_robustness: f64,
    pub branching_nodes: usize,
    pub k: usize,
    pub seed: u64,
    pub rho: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho_offset: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho_radius: Option<f64>,
    pub per_run_seeds: Vec<u64>,
}

fn derive_seed(seed: u64, k: u64) -> u64 {
    // splitmix64 step over (seed, k) — independent streams per run.
    let mut z = seed ^ k.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<EvaluationReport, CliError> {
    if args.k == 0 {
        return Err(CliError::Validation("--K must be at least 1".into()));
    }
    let dataset = load(&args.data, &args.schema)?;
    let blob = std::fs::read_to_string(&args.tree).map_err(|e| io_err(&args.tree, e))?;
    let encoding = deserialize_tree(&blob)?;
    check_tree_against(&dataset, &encoding)?;

    let base_rho = resolve_rho(&dataset, args.rho, args.rho_mean, args.seed)?;
    let offset = args.rho_offset.unwrap_or(0.0);
    let rho: Vec<f64> = (0..dataset.n_features())
        .map(|f| (base_rho[f] + offset).clamp(rho_floor(&dataset, f).max(0.01), 1.0))
        .collect();

    let n = dataset.n_samples();
    let nominal_rows: Vec<Vec<i64>> = (0..n).map(|i| dataset.row(i).to_vec()).collect();
    let nominal_accuracy = correct_count(&encoding, &nominal_rows, &dataset) as f64 / n as f64;

    let per_run_seeds: Vec<u64> = (0..args.k as u64).map(|k| derive_seed(args.seed, k)).collect();

    // Each run draws an independent perturbed copy of the test set; with a
    // radius, the noise level itself is re-drawn per run first. Runs are
    // independent, so they score in parallel; integer correct-counts
    // aggregate exactly regardless of worker split.
    let run_correct = |k: usize| -> Result<usize, CliError> {
        let run_rho: Vec<f64> = if let Some(radius) = args.rho_radius {
            let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(args.seed ^ 0x7d1a, k as u64));
            (0..dataset.n_features())
                .map(|f| {
                    let jitter = rng.random_range(-radius..=radius);
                    (rho[f] + jitter).clamp(rho_floor(&dataset, f).max(0.01), 1.0)
                })
                .collect()
        } else {
            rho.clone()
        };
        let rows = sample_perturbation(&dataset, &run_rho, per_run_seeds[k])?;
        Ok(correct_count(&encoding, &rows, &dataset))
    };

    let threads = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(8)
        .min(args.k);
    let mut counts: Vec<usize> = vec![0; args.k];
    std::thread::scope(|scope| -> Result<(), CliError> {
        let chunk = args.k.div_ceil(threads);
        let mut handles = Vec::new();
        for (t, slot) in counts.chunks_mut(chunk).enumerate() {
            let run_correct = &run_correct;
            handles.push(scope.spawn(move || -> Result<(), CliError> {
                for (j, out) in slot.iter_mut().enumerate() {
                    *out = run_correct(t * chunk + j)?;
                }
                Ok(())
            }));
        }
        for h in handles {
            h.join().expect("evaluation worker panicked")?;
        }
        Ok(())
    })?;

    let worst_accuracy = *counts.iter().min().expect("k >= 1") as f64 / n as f64;
    let average_accuracy = counts.iter().sum::<usize>() as f64 / (args.k * n) as f64;

    // The non-robust same-depth optimum on this data anchors the price.
    let best_nominal = nonrobust_regularized_solve(
        &dataset,
        encoding.depth(),
        1.0,
        &EnumerativeBackend {
            max_encodings: ENUMERATION_CAP,
        },
        SolveOptions::default(),
    )?;
    let price_of_robustness =
        best_nominal.objective / dataset.n_samples() as f64 - nominal_accuracy;

    let report = EvaluationReport {
        nominal_accuracy,
        worst_accuracy,
        average_accuracy,
        price_of_robustness,
        branching_nodes: encoding.n_branching(),
        k: args.k,
        seed: args.seed,
        rho,
        rho_offset: args.rho_offset,
        rho_radius: args.rho_radius,
        per_run_seeds,
    };
    if let Some(out) = &args.out {
        write_file(out, &pretty_json(&report))?;
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// calibrate
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct CalibrateArgs {
    pub data: PathBuf,
    pub schema: PathBuf,
    pub lambda: Option<f64>,
    pub epsilon: Option<f64>,
    pub rho: Option<f64>,
    pub rho_mean: Option<f64>,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

pub fn cmd_calibrate(args: &CalibrateArgs) -> Result<String, CliError> {
    let dataset = load(&args.data, &args.schema)?;
    let rho_overrides = args
        .rho_mean
        .map(|mean| vec![rho_harness(&dataset, mean, args.seed); dataset.n_samples()]);
    let spec = CalibrationSpec {
        budget: Some(budget_spec(args.lambda, args.epsilon)?),
        rho_overrides,
        default_rho: args.rho,
    };
    let report = calibration_report(&spec, &dataset)?;
    let rendered = pretty_json(&report);
    if let Some(out) = &args.out {
        write_file(out, &rendered)?;
    }
    Ok(rendered)
}

// ---------------------------------------------------------------------------
// export
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ExportArgs {
    pub tree: PathBuf,
    /// Where to write the graph description (Graphviz dot); omitted = skip.
    pub out: Option<PathBuf>,
}

/// Indented text form; pruned nodes never appear.
pub fn render_text(encoding: &TreeEncoding) -> String {
    fn walk(encoding: &TreeEncoding, n: u32, indent: usize, prefix: &str, out: &mut String) {
        let pad = "  ".repeat(indent);
        match encoding.role(n) {
            NodeRole::Branch { feature, threshold } => {
                let _ = writeln!(out, "{pad}{prefix}f{feature} >= {}", threshold + 1);
                walk(encoding, 2 * n, indent + 1, "no:  ", out);
                walk(encoding, 2 * n + 1, indent + 1, "yes: ", out);
            }
            NodeRole::Predict { label } => {
                let _ = writeln!(out, "{pad}{prefix}predict {label}");
            }
            NodeRole::Pruned => {}
        }
    }
    let mut out = String::new();
    walk(encoding, 1, 0, "", &mut out);
    out
}

/// Graphviz rendering with the same branch/leaf labels as the text form.
pub fn render_dot(encoding: &TreeEncoding) -> String {
    let mut out = String::from("digraph tree {\n  node [fontname=\"monospace\"];\n");
    for n in encoding.topology().all_nodes() {
        match encoding.role(n) {
            NodeRole::Branch { feature, threshold } => {
                let _ = writeln!(
                    out,
                    "  n{n} [shape=box label=\"f{feature} >= {}\"];",
                    threshold + 1
                );
                let _ = writeln!(out, "  n{n} -> n{} [label=\"no\"];", 2 * n);
                let _ = writeln!(out, "  n{n} -> n{} [label=\"yes\"];", 2 * n + 1);
            }
            NodeRole::Predict { label } => {
                let _ = writeln!(out, "  n{n} [label=\"predict {label}\"];");
            }
            NodeRole::Pruned => {}
        }
    }
    out.push_str("}\n");
    out
}

pub fn cmd_export(args: &ExportArgs) -> Result<String, CliError> {
    let blob = std::fs::read_to_string(&args.tree).map_err(|e| io_err(&args.tree, e))?;
    let encoding = deserialize_tree(&blob)?;
    if let Some(out) = &args.out {
        write_file(out, &render_dot(&encoding))?;
    }
    Ok(render_text(&encoding))
}
