//! The outer optimization: pick the tree whose worst-case correct count is
//! highest, by delayed cut generation.
//!
//! The search space is the finite encoding set; the worst-case objective
//! is represented by continuous variables t (one per sample, each in
//! [0,1]) that every accumulated cut bounds from above. The loop solves
//! the relaxed master (initially just t ≤ |I|), asks the adversary how the
//! incumbent really fares, and — whenever the master overestimated — adds
//! the certificate's cut and re-solves. Cuts are valid at *every* tree:
//! a certificate's frozen shift ξ̃ and per-sample cut-sets q̃ bound any
//! tree's worst case via max-flow ≤ cut, so the master only ever shrinks
//! toward the true hypograph and terminates with objective = bound.
//!
//! The backend that maximizes over encodings is pluggable; the built-in
//! one enumerates the encoding set (meant for shallow trees and modest
//! threshold counts) and breaks ties toward the first encoding in the
//! documented enumeration order.

use std::collections::{BTreeMap, HashSet};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::adversary::{
    min_cost_to_reroute, worst_case_correct, AdversaryCertificate, DecisionCutSet,
};
use crate::data::{compute_thresholds, Dataset, ThresholdMap};
use crate::tree::{
    build_topology, count_encodings, enumerate_encodings, route, Topology, TreeEncoding, TreeError,
};
use crate::uncertainty::{ShiftDomain, UncertaintyModel, BUDGET_SLACK};

/// Master bounds are integral counts; anything past this slack is a
/// genuinely violated cut, not float noise.
pub const SEPARATION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum MasterError {
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("{encodings} encodings exceed the enumeration budget of {cap}; supply an external backend")]
    EnumerationBudget { encodings: u128, cap: u128 },
    #[error("backend '{name}' is not available in this build")]
    BackendUnavailable { name: String },
    #[error("per-sample cut rejected: sample {sample} is nominally correct, so the bound would cut off valid solutions")]
    CutRejected { sample: usize },
    #[error("regularization weight {r} is outside [0, 1]")]
    InvalidRegularization { r: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CutKind {
    /// Bounds the sum of all t variables.
    Global,
    /// Bounds a single sample's t variable.
    PerSample { sample: usize },
}

/// One accumulated constraint: t (or t^i) ≤ constant + Σ coeff·w + Σ
/// coeff·b, with the certificate's (q̃, ξ̃) frozen into the coefficients.
/// Per sample every coefficient is 0/1; aggregation turns them into
/// counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cut {
    pub kind: CutKind,
    /// Σ over samples of the cut source edge (always 0 for path cut-sets).
    pub constant: u32,
    /// (node, label) → count: how many samples with y = label have that
    /// node's sink edge cut.
    pub w_coeffs: Vec<(u32, usize, u32)>,
    /// (node, feature, θ) → count: how many cut child edges the shifted
    /// sample would actually cross if the node branched on (feature, θ).
    pub b_coeffs: Vec<(u32, usize, i64, u32)>,
}

impl Cut {
    /// Evaluate the right-hand side at a candidate tree.
    pub fn rhs(&self, encoding: &TreeEncoding) -> u32 {
        let mut total = self.constant;
        for &(n, k, count) in &self.w_coeffs {
            if encoding.w(n, k) {
                total += count;
            }
        }
        for &(n, f, theta, count) in &self.b_coeffs {
            if encoding.b(n, f, theta) {
                total += count;
            }
        }
        total
    }
}

/// Fold one sample's cut-set at its frozen shift into coefficient maps.
///
/// Sink edges contribute at (node, y); a cut child edge (n, m) contributes
/// at every (n, f, θ) whose test would send the shifted row toward m —
/// so at a tree branching on (f, θ) the coefficient reproduces exactly
/// that edge's capacity.
fn accumulate_sample(
    cutset: &DecisionCutSet,
    shifted: &[i64],
    label: usize,
    thresholds: &ThresholdMap,
    constant: &mut u32,
    w_map: &mut BTreeMap<(u32, usize), u32>,
    b_map: &mut BTreeMap<(u32, usize, i64), u32>,
) {
    *constant += u32::from(cutset.source_edge());
    for &n in cutset.sink_nodes() {
        *w_map.entry((n, label)).or_insert(0) += 1;
    }
    for &(n, m) in &cutset.child_edges {
        let is_left = m == 2 * n;
        for f in 0..thresholds.n_features() {
            for &theta in thresholds.thresholds(f) {
                let crosses = if is_left {
                    shifted[f] <= theta
                } else {
                    shifted[f] >= theta + 1
                };
                if crosses {
                    *b_map.entry((n, f, theta)).or_insert(0) += 1;
                }
            }
        }
    }
}

fn collect_cut(
    kind: CutKind,
    constant: u32,
    w_map: BTreeMap<(u32, usize), u32>,
    b_map: BTreeMap<(u32, usize, i64), u32>,
) -> Cut {
    Cut {
        kind,
        constant,
        w_coeffs: w_map.into_iter().map(|((n, k), c)| (n, k, c)).collect(),
        b_coeffs: b_map
            .into_iter()
            .map(|((n, f, t), c)| (n, f, t, c))
            .collect(),
    }
}

/// The certificate's cut: Σ t^i ≤ RHS, aggregated over every sample's
/// cut-set at the witnessing shift. At the generating tree the RHS equals
/// the certificate value.
pub fn build_cut_global(
    dataset: &Dataset,
    thresholds: &ThresholdMap,
    certificate: &AdversaryCertificate,
) -> Cut {
    let mut constant = 0;
    let mut w_map = BTreeMap::new();
    let mut b_map = BTreeMap::new();
    for i in 0..dataset.n_samples() {
        let shifted: Vec<i64> = (0..dataset.n_features())
            .map(|f| dataset.value(i, f) + certificate.xi[i][f])
            .collect();
        accumulate_sample(
            &certificate.cutsets[i],
            &shifted,
            dataset.label(i),
            thresholds,
            &mut constant,
            &mut w_map,
            &mut b_map,
        );
    }
    collect_cut(CutKind::Global, constant, w_map, b_map)
}

/// A strengthening cut for one nominally misclassified sample: its t^i ≤
/// RHS of the nominal path's cut-set at ξ = 0. No shift is needed to
/// expose the error, so the cut is valid for every tree, and at the
/// incumbent it pins t^i to 0. Rejected for nominally correct samples —
/// there the same bound would cut off legitimate solutions.
pub fn build_cut_single(
    dataset: &Dataset,
    thresholds: &ThresholdMap,
    encoding: &TreeEncoding,
    sample: usize,
) -> Result<Cut, MasterError> {
    let trace = route(encoding, dataset.row(sample));
    if trace.label == dataset.label(sample) {
        return Err(MasterError::CutRejected { sample });
    }
    let cutset = DecisionCutSet::new(trace.nodes, &encoding.topology());
    let mut constant = 0;
    let mut w_map = BTreeMap::new();
    let mut b_map = BTreeMap::new();
    accumulate_sample(
        &cutset,
        dataset.row(sample),
        dataset.label(sample),
        thresholds,
        &mut constant,
        &mut w_map,
        &mut b_map,
    );
    Ok(collect_cut(
        CutKind::PerSample { sample },
        constant,
        w_map,
        b_map,
    ))
}

/// The relaxed outer problem a backend maximizes over: the encoding set
/// (fixed topology, thresholds, labels), per-sample t ∈ [0,1] initially
/// bounded only by Σt ≤ |I|, and the accumulated cut pool.
#[derive(Debug, Clone)]
pub struct MainProblem {
    pub topology: Topology,
    pub thresholds: ThresholdMap,
    pub n_labels: usize,
    pub n_samples: usize,
    pub cuts: Vec<Cut>,
}

impl MainProblem {
    pub fn new(
        topology: Topology,
        thresholds: ThresholdMap,
        n_labels: usize,
        n_samples: usize,
    ) -> Self {
        MainProblem {
            topology,
            thresholds,
            n_labels,
            n_samples,
            cuts: Vec::new(),
        }
    }

    pub fn add_cut(&mut self, cut: Cut) {
        self.cuts.push(cut);
    }
}

/// Linear objective over (t, encoding): `t_weight`·Σt +
/// `branch_weight`·(number of branching nodes).
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveWeights {
    pub t_weight: f64,
    pub branch_weight: f64,
}

impl ObjectiveWeights {
    /// Plain worst-case correct count.
    pub const ROBUST: ObjectiveWeights = ObjectiveWeights {
        t_weight: 1.0,
        branch_weight: 0.0,
    };

    /// Accuracy traded against tree size: R·Σt − (1−R)·Σ branches.
    pub fn regularized(r: f64) -> Self {
        ObjectiveWeights {
            t_weight: r,
            branch_weight: -(1.0 - r),
        }
    }
}

/// What a backend hands back: the maximizing encoding, the optimal Σt at
/// it, and the objective value.
#[derive(Debug, Clone)]
pub struct BackendSolution {
    pub encoding: TreeEncoding,
    pub t_sum: f64,
    pub objective: f64,
}

/// An exact maximizer for [`MainProblem`] states. Implementations must be
/// exact — the loop's termination argument needs true optima, not
/// heuristic ones — and hold no mutable state across calls.
pub trait BackendContract {
    fn name(&self) -> &str;
    fn solve(
        &self,
        problem: &MainProblem,
        objective: ObjectiveWeights,
    ) -> Result<BackendSolution, MasterError>;
}

/// The built-in exact backend: enumerate every encoding, solve the t-part
/// by inspection (t^i ≤ 1 and the per-sample cut minima, Σt capped by the
/// global cut minima and |I|), keep the best. Ties go to the first
/// encoding in enumeration order, making reported trees deterministic.
#[derive(Debug, Clone, Copy)]
pub struct EnumerativeBackend {
    pub max_encodings: u128,
}

impl Default for EnumerativeBackend {
    fn default() -> Self {
        EnumerativeBackend {
            max_encodings: 500_000,
        }
    }
}

impl BackendContract for EnumerativeBackend {
    fn name(&self) -> &str {
        "builtin-enum"
    }

    fn solve(
        &self,
        problem: &MainProblem,
        objective: ObjectiveWeights,
    ) -> Result<BackendSolution, MasterError> {
        let total = count_encodings(&problem.topology, &problem.thresholds, problem.n_labels);
        if total > self.max_encodings {
            return Err(MasterError::EnumerationBudget {
                encodings: total,
                cap: self.max_encodings,
            });
        }
        let n = problem.n_samples as f64;
        let mut best: Option<BackendSolution> = None;
        let mut per_sample = vec![0.0f64; problem.n_samples];
        for encoding in enumerate_encodings(&problem.topology, &problem.thresholds, problem.n_labels)
        {
            per_sample.fill(1.0);
            let mut t_sum = n;
            for cut in &problem.cuts {
                let rhs = f64::from(cut.rhs(&encoding));
                match cut.kind {
                    CutKind::Global => t_sum = t_sum.min(rhs),
                    CutKind::PerSample { sample } => {
                        per_sample[sample] = per_sample[sample].min(rhs)
                    }
                }
            }
            let per_total: f64 = per_sample.iter().map(|t| t.min(1.0)).sum();
            t_sum = t_sum.min(per_total).clamp(0.0, n);
            let obj = objective.t_weight * t_sum
                + objective.branch_weight * encoding.n_branching() as f64;
            if best.as_ref().is_none_or(|b| obj > b.objective) {
                best = Some(BackendSolution {
                    encoding,
                    t_sum,
                    objective: obj,
                });
            }
        }
        Ok(best.expect("encoding set is never empty: the root can always predict"))
    }
}

/// Solve one master state with the built-in backend under the plain
/// worst-case objective.
pub fn enumerative_backend_solve(problem: &MainProblem) -> Result<BackendSolution, MasterError> {
    EnumerativeBackend::default().solve(problem, ObjectiveWeights::ROBUST)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Optimal,
    IterationCap,
    TimeCap,
}

impl Termination {
    pub fn as_str(&self) -> &'static str {
        match self {
            Termination::Optimal => "optimal",
            Termination::IterationCap => "iteration-cap",
            Termination::TimeCap => "time-cap",
        }
    }
}

/// Outcome of a solve: the incumbent tree, its true objective, the
/// master's bound (equal at optimality), and loop accounting.
#[derive(Debug, Clone)]
pub struct SolveReport {
    pub encoding: TreeEncoding,
    pub objective: f64,
    pub bound: f64,
    pub iterations: usize,
    pub cuts_added: usize,
    pub wall_time: Duration,
    pub status: Termination,
}

#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    /// Also add per-sample cuts for every nominally misclassified sample
    /// of each incumbent (cheap, often collapses iterations).
    pub strengthen: bool,
    pub iteration_cap: Option<usize>,
    pub time_cap: Option<Duration>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            strengthen: true,
            iteration_cap: None,
            time_cap: None,
        }
    }
}

/// Shared solve-separate-cut loop; the objective weights distinguish the
/// robust solve from the regularized nominal one.
fn cut_loop(
    dataset: &Dataset,
    model: &UncertaintyModel,
    depth: u32,
    backend: &dyn BackendContract,
    weights: ObjectiveWeights,
    options: SolveOptions,
) -> Result<SolveReport, MasterError> {
    let start = Instant::now();
    let topology = build_topology(depth)?;
    let thresholds = compute_thresholds(dataset);
    let mut problem = MainProblem::new(
        topology,
        thresholds.clone(),
        dataset.n_labels(),
        dataset.n_samples(),
    );
    let mut singles_seen: HashSet<(usize, Vec<u32>)> = HashSet::new();
    let mut iterations = 0;
    let mut cuts_added = 0;

    loop {
        let solution = backend.solve(&problem, weights)?;
        iterations += 1;
        let certificate = worst_case_correct(&solution.encoding, dataset, model);
        let value = certificate.value as f64;
        let true_objective = weights.t_weight * value
            + weights.branch_weight * solution.encoding.n_branching() as f64;

        if solution.t_sum <= value + SEPARATION_TOLERANCE {
            // No violated cut exists: the master agrees with the adversary
            // at its own maximizer, so the incumbent is optimal.
            return Ok(SolveReport {
                encoding: solution.encoding,
                objective: true_objective,
                bound: true_objective,
                iterations,
                cuts_added,
                wall_time: start.elapsed(),
                status: Termination::Optimal,
            });
        }

        let capped = options.iteration_cap.is_some_and(|cap| iterations >= cap);
        let timed_out = options.time_cap.is_some_and(|cap| start.elapsed() >= cap);
        if capped || timed_out {
            return Ok(SolveReport {
                encoding: solution.encoding,
                objective: true_objective,
                bound: solution.objective,
                iterations,
                cuts_added,
                wall_time: start.elapsed(),
                status: if capped {
                    Termination::IterationCap
                } else {
                    Termination::TimeCap
                },
            });
        }

        if options.strengthen {
            for i in 0..dataset.n_samples() {
                let trace = route(&solution.encoding, dataset.row(i));
                if trace.label != dataset.label(i) && singles_seen.insert((i, trace.nodes)) {
                    problem.add_cut(build_cut_single(dataset, &thresholds, &solution.encoding, i)?);
                    cuts_added += 1;
                }
            }
        }
        problem.add_cut(build_cut_global(dataset, &thresholds, &certificate));
        cuts_added += 1;
    }
}

/// Maximize the worst-case correct count at the given depth by delayed
/// cut generation. Terminates with status `optimal` and objective = bound
/// unless an iteration or time cap fires first, in which case the best
/// incumbent and the master's bound are returned.
pub fn cutting_plane_solve(
    dataset: &Dataset,
    model: &UncertaintyModel,
    depth: u32,
    backend: &dyn BackendContract,
    options: SolveOptions,
) -> Result<SolveReport, MasterError> {
    cut_loop(dataset, model, depth, backend, ObjectiveWeights::ROBUST, options)
}

/// Direct oracle: score every encoding with the adversary, keep the best.
/// Same tie-break as the enumerative backend (first in enumeration order).
pub fn exhaustive_solve(
    dataset: &Dataset,
    model: &UncertaintyModel,
    depth: u32,
    max_encodings: u128,
) -> Result<SolveReport, MasterError> {
    let start = Instant::now();
    let topology = build_topology(depth)?;
    let thresholds = compute_thresholds(dataset);
    let total = count_encodings(&topology, &thresholds, dataset.n_labels());
    if total > max_encodings {
        return Err(MasterError::EnumerationBudget {
            encodings: total,
            cap: max_encodings,
        });
    }
    let mut best: Option<(TreeEncoding, usize)> = None;
    let mut evaluated = 0;
    for encoding in enumerate_encodings(&topology, &thresholds, dataset.n_labels()) {
        evaluated += 1;
        let value = worst_case_correct(&encoding, dataset, model).value;
        if best.as_ref().is_none_or(|(_, b)| value > *b) {
            best = Some((encoding, value));
        }
    }
    let (encoding, value) = best.expect("encoding set is never empty");
    Ok(SolveReport {
        encoding,
        objective: value as f64,
        bound: value as f64,
        iterations: evaluated,
        cuts_added: 0,
        wall_time: start.elapsed(),
        status: Termination::Optimal,
    })
}

/// A model that admits no shift at all: the worst case collapses to
/// nominal accuracy.
fn identity_model(dataset: &Dataset) -> UncertaintyModel {
    UncertaintyModel {
        gamma: vec![vec![1.0; dataset.n_features()]; dataset.n_samples()],
        epsilon: 0.0,
        domains: vec![vec![ShiftDomain::Frozen; dataset.n_features()]; dataset.n_samples()],
        groups: vec![],
    }
}

/// Non-robust baseline with a size penalty: maximize R·(correct count) −
/// (1−R)·(branching nodes) at zero shift. R = 1 is plain accuracy
/// maximization; R = 0 degenerates to the smallest tree.
pub fn nonrobust_regularized_solve(
    dataset: &Dataset,
    depth: u32,
    r: f64,
    backend: &dyn BackendContract,
    options: SolveOptions,
) -> Result<SolveReport, MasterError> {
    if !(0.0..=1.0).contains(&r) || r.is_nan() {
        return Err(MasterError::InvalidRegularization { r });
    }
    let model = identity_model(dataset);
    cut_loop(
        dataset,
        &model,
        depth,
        backend,
        ObjectiveWeights::regularized(r),
        options,
    )
}

/// How the stability constraint reads its budget. A reroute is a
/// single-sample act, so a shared pot the adversary may concentrate and a
/// per-row allowance of the same size forbid exactly the same trees; the
/// mode is kept for reporting faithfulness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BudgetMode {
    Shared,
    PerSample,
}

/// Conservative proxy: maximize *nominal* accuracy over trees where no
/// sample can be rerouted to a different prediction node within budget
/// (whatever label it would get there). Zero-depth trees have a single
/// prediction node, so the feasible set is never empty.
pub fn proxy_solve(
    dataset: &Dataset,
    model: &UncertaintyModel,
    depth: u32,
    _mode: BudgetMode,
    max_encodings: u128,
) -> Result<SolveReport, MasterError> {
    let start = Instant::now();
    let topology = build_topology(depth)?;
    let thresholds = compute_thresholds(dataset);
    let total = count_encodings(&topology, &thresholds, dataset.n_labels());
    if total > max_encodings {
        return Err(MasterError::EnumerationBudget {
            encodings: total,
            cap: max_encodings,
        });
    }
    let mut best: Option<(TreeEncoding, usize)> = None;
    let mut evaluated = 0;
    for encoding in enumerate_encodings(&topology, &thresholds, dataset.n_labels()) {
        evaluated += 1;
        let stable = (0..dataset.n_samples()).all(|i| {
            min_cost_to_reroute(dataset, i, &encoding, model) > model.epsilon + BUDGET_SLACK
        });
        if !stable {
            continue;
        }
        let correct = (0..dataset.n_samples())
            .filter(|&i| route(&encoding, dataset.row(i)).label == dataset.label(i))
            .count();
        if best.as_ref().is_none_or(|(_, b)| correct > *b) {
            best = Some((encoding, correct));
        }
    }
    let (encoding, correct) = best.expect("prediction-only trees are always stable");
    Ok(SolveReport {
        encoding,
        objective: correct as f64,
        bound: correct as f64,
        iterations: evaluated,
        cuts_added: 0,
        wall_time: start.elapsed(),
        status: Termination::Optimal,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adversary::cutset_value;
    use crate::data::tests::line_dataset;
    use crate::tree::{sample_encoding, NodeRole};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn unit_model(n_samples: usize, n_features: usize, epsilon: f64) -> UncertaintyModel {
        UncertaintyModel {
            gamma: vec![vec![1.0; n_features]; n_samples],
            epsilon,
            domains: vec![
                vec![ShiftDomain::Interval { lo: None, hi: None }; n_features];
                n_samples
            ],
            groups: vec![],
        }
    }

    fn stump(theta: i64) -> TreeEncoding {
        TreeEncoding::from_roles(&[
            NodeRole::Branch {
                feature: 0,
                threshold: theta,
            },
            NodeRole::Predict { label: 0 },
            NodeRole::Predict { label: 1 },
        ])
    }

    #[test]
    fn global_cut_rhs_matches_certificate_at_generating_tree() {
        let ds = line_dataset();
        let thr = compute_thresholds(&ds);

        // A perfectly classifying tree under no budget: RHS = |I|.
        let perfect = stump(4);
        let cert = worst_case_correct(&perfect, &ds, &unit_model(9, 1, 0.0));
        assert_eq!(cert.value, 9);
        assert_eq!(build_cut_global(&ds, &thr, &cert).rhs(&perfect), 9);

        let enc = stump(5);
        let cert = worst_case_correct(&enc, &ds, &unit_model(9, 1, 2.0));
        assert_eq!(cert.value, 7);
        assert_eq!(build_cut_global(&ds, &thr, &cert).rhs(&enc), 7);

        // Majority vote in the depth-1 slots.
        let majority = TreeEncoding::from_roles(&[
            NodeRole::Predict { label: 1 },
            NodeRole::Pruned,
            NodeRole::Pruned,
        ]);
        let cert = worst_case_correct(&majority, &ds, &unit_model(9, 1, 2.0));
        assert_eq!(cert.value, 5);
        let cut = build_cut_global(&ds, &thr, &cert);
        assert_eq!(cut.rhs(&majority), 5);
        // The same cut does not bind branching trees: every sample's cut
        // child edges cover both root children, costing the full count.
        assert_eq!(cut.rhs(&stump(4)), 9);
    }

    #[test]
    fn aggregated_cut_equals_direct_cutset_sums() {
        let ds = line_dataset();
        let thr = compute_thresholds(&ds);
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let topo = build_topology(2).unwrap();
        for _ in 0..20 {
            let gen = sample_encoding(&topo, &thr, ds.n_labels(), &mut rng);
            let cert = worst_case_correct(&gen, &ds, &unit_model(9, 1, 1.5));
            let cut = build_cut_global(&ds, &thr, &cert);
            for _ in 0..10 {
                let eval = sample_encoding(&topo, &thr, ds.n_labels(), &mut rng);
                let direct: u32 = (0..9)
                    .map(|i| {
                        let shifted: Vec<i64> =
                            (0..1).map(|f| ds.value(i, f) + cert.xi[i][f]).collect();
                        cutset_value(&cert.cutsets[i], &eval, &shifted, ds.label(i))
                    })
                    .sum();
                assert_eq!(cut.rhs(&eval), direct);
            }
        }
    }

    #[test]
    fn single_cut_pins_misclassified_sample_and_rejects_correct_ones() {
        let ds = line_dataset();
        let thr = compute_thresholds(&ds);
        let enc = stump(5);
        // x=5 (index 4, y=1) goes left into the 0-leaf: t ≤ 0 there.
        let cut = build_cut_single(&ds, &thr, &enc, 4).unwrap();
        assert_eq!(cut.kind, CutKind::PerSample { sample: 4 });
        assert_eq!(cut.rhs(&enc), 0);
        // Nominally correct samples are refused.
        assert!(matches!(
            build_cut_single(&ds, &thr, &enc, 0),
            Err(MasterError::CutRejected { sample: 0 })
        ));

        // Depth-0 tree predicting the wrong label: t ≤ 0 as well.
        let wrong = TreeEncoding::from_roles(&[NodeRole::Predict { label: 0 }]);
        let cut = build_cut_single(&ds, &thr, &wrong, 4).unwrap();
        assert_eq!(cut.rhs(&wrong), 0);
    }

    #[test]
    fn single_cut_is_valid_wherever_the_sample_is_correct() {
        // Cuts are cuts of one topology's flow graph; probe within it.
        let ds = line_dataset();
        let thr = compute_thresholds(&ds);
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for depth in [1, 2] {
            let topo = build_topology(depth).unwrap();
            // An incumbent in this topology that misclassifies x=5 (y=1).
            let mut roles = vec![NodeRole::Pruned; topo.n_nodes()];
            roles[0] = NodeRole::Branch {
                feature: 0,
                threshold: 5,
            };
            roles[1] = NodeRole::Predict { label: 0 };
            roles[2] = NodeRole::Predict { label: 1 };
            let incumbent = TreeEncoding::from_roles(&roles);
            let cut = build_cut_single(&ds, &thr, &incumbent, 4).unwrap();
            assert_eq!(cut.rhs(&incumbent), 0);

            let mut probed = 0;
            for _ in 0..300 {
                let enc = sample_encoding(&topo, &thr, ds.n_labels(), &mut rng);
                if route(&enc, ds.row(4)).label == ds.label(4) {
                    probed += 1;
                    assert!(cut.rhs(&enc) >= 1);
                }
            }
            assert!(probed > 20, "probe needs correct-routing trees to mean anything");
        }
    }

    #[test]
    fn empty_pool_hits_the_trivial_bound() {
        let ds = line_dataset();
        let problem = MainProblem::new(
            build_topology(1).unwrap(),
            compute_thresholds(&ds),
            ds.n_labels(),
            ds.n_samples(),
        );
        let sol = enumerative_backend_solve(&problem).unwrap();
        assert_eq!(sol.t_sum, 9.0);
        assert_eq!(sol.objective, 9.0);
        // Ties resolve to the first encoding: a bare root predicting 0.
        assert_eq!(
            sol.encoding.role(1),
            NodeRole::Predict { label: 0 },
        );
        assert_eq!(sol.encoding.n_branching(), 0);
    }

    #[test]
    fn zero_depth_certificate_does_not_bind_branching_trees() {
        let ds = line_dataset();
        let thr = compute_thresholds(&ds);
        let majority = TreeEncoding::from_roles(&[
            NodeRole::Predict { label: 1 },
            NodeRole::Pruned,
            NodeRole::Pruned,
        ]);
        let cert = worst_case_correct(&majority, &ds, &unit_model(9, 1, 0.0));
        let mut problem = MainProblem::new(
            build_topology(1).unwrap(),
            thr.clone(),
            ds.n_labels(),
            ds.n_samples(),
        );
        problem.add_cut(build_cut_global(&ds, &thr, &cert));
        let sol = enumerative_backend_solve(&problem).unwrap();
        assert_eq!(sol.t_sum, 9.0);
        assert!(sol.encoding.n_branching() > 0);
    }

    #[test]
    fn backend_respects_enumeration_budget() {
        let ds = line_dataset();
        let problem = MainProblem::new(
            build_topology(2).unwrap(),
            compute_thresholds(&ds),
            ds.n_labels(),
            ds.n_samples(),
        );
        let tight = EnumerativeBackend { max_encodings: 10 };
        assert!(matches!(
            tight.solve(&problem, ObjectiveWeights::ROBUST),
            Err(MasterError::EnumerationBudget { .. })
        ));
    }

    #[test]
    fn encoding_count_matches_enumeration() {
        let ds = line_dataset();
        let thr = compute_thresholds(&ds);
        for depth in 0..=2 {
            let topo = build_topology(depth).unwrap();
            assert_eq!(
                count_encodings(&topo, &thr, ds.n_labels()),
                enumerate_encodings(&topo, &thr, ds.n_labels()).len() as u128
            );
        }
    }

    #[test]
    fn cutting_plane_solves_the_line() {
        let ds = line_dataset();
        let backend = EnumerativeBackend::default();

        for strengthen in [true, false] {
            let options = SolveOptions {
                strengthen,
                ..SolveOptions::default()
            };
            let r = cutting_plane_solve(&ds, &unit_model(9, 1, 2.0), 1, &backend, options).unwrap();
            assert_eq!(r.status, Termination::Optimal);
            assert_eq!(r.objective, 7.0);
            assert_eq!(r.bound, 7.0);

            let r = cutting_plane_solve(&ds, &unit_model(9, 1, 0.0), 1, &backend, options).unwrap();
            assert_eq!(r.objective, 9.0);

            let r = cutting_plane_solve(&ds, &unit_model(9, 1, 3.0), 0, &backend, options).unwrap();
            assert_eq!(r.objective, 5.0);
        }
    }

    #[test]
    fn exhaustive_matches_known_optima() {
        let ds = line_dataset();
        let r = exhaustive_solve(&ds, &unit_model(9, 1, 2.0), 1, 1 << 20).unwrap();
        assert_eq!(r.objective, 7.0);
        assert_eq!(r.status, Termination::Optimal);
        let r = exhaustive_solve(&ds, &unit_model(9, 1, 0.0), 1, 1 << 20).unwrap();
        assert_eq!(r.objective, 9.0);
    }

    #[test]
    fn regularized_solves() {
        let ds = line_dataset();
        let backend = EnumerativeBackend::default();
        let options = SolveOptions::default();

        let r = nonrobust_regularized_solve(&ds, 1, 1.0, &backend, options).unwrap();
        assert_eq!(r.objective, 9.0);
        assert_eq!(r.status, Termination::Optimal);

        // R=0: accuracy is worthless, so the smallest tree wins.
        let r = nonrobust_regularized_solve(&ds, 1, 0.0, &backend, options).unwrap();
        assert_eq!(r.encoding.n_branching(), 0);
        assert_eq!(r.objective, 0.0);

        // R=0.9 at depth 2: one branch suffices for full accuracy, and a
        // second would cost more than it earns.
        let r = nonrobust_regularized_solve(&ds, 2, 0.9, &backend, options).unwrap();
        assert_eq!(r.encoding.n_branching(), 1);
        let correct = (0..9)
            .filter(|&i| route(&r.encoding, ds.row(i)).label == ds.label(i))
            .count();
        assert_eq!(correct, 9);
        assert!((r.objective - (0.9 * 9.0 - 0.1)).abs() < 1e-9);

        assert!(matches!(
            nonrobust_regularized_solve(&ds, 1, 1.5, &backend, options),
            Err(MasterError::InvalidRegularization { .. })
        ));
    }

    #[test]
    fn proxy_on_consecutive_integers_collapses_to_majority() {
        let ds = line_dataset();
        // Every threshold has a sample within distance 2, so no branching
        // tree survives; the majority stump-less tree scores 5.
        let r = proxy_solve(&ds, &unit_model(9, 1, 2.0), 1, BudgetMode::Shared, 1 << 20).unwrap();
        assert_eq!(r.objective, 5.0);
        assert_eq!(r.encoding.n_branching(), 0);

        // Zero budget: the constraint is vacuous, optimum is nominal.
        let r = proxy_solve(&ds, &unit_model(9, 1, 0.0), 1, BudgetMode::Shared, 1 << 20).unwrap();
        assert_eq!(r.objective, 9.0);

        // Both budget readings agree.
        let r2 =
            proxy_solve(&ds, &unit_model(9, 1, 2.0), 1, BudgetMode::PerSample, 1 << 20).unwrap();
        assert_eq!(r2.objective, 5.0);
    }

    #[test]
    fn caps_return_the_incumbent_with_a_bound() {
        let ds = line_dataset();
        let backend = EnumerativeBackend::default();
        let options = SolveOptions {
            strengthen: false,
            iteration_cap: Some(1),
            time_cap: None,
        };
        let r = cutting_plane_solve(&ds, &unit_model(9, 1, 2.0), 1, &backend, options).unwrap();
        assert_eq!(r.status, Termination::IterationCap);
        assert!(r.objective <= r.bound);
        assert!(r.bound >= 7.0);

        let timed = SolveOptions {
            strengthen: false,
            iteration_cap: None,
            time_cap: Some(Duration::ZERO),
        };
        let r = cutting_plane_solve(&ds, &unit_model(9, 1, 2.0), 1, &backend, timed).unwrap();
        assert_eq!(r.status, Termination::TimeCap);
    }
}
