//! The exact adversary: given a tree, find the cheapest way to make each
//! sample misclassified, then spend the budget on the cheapest victims.
//!
//! Everything rests on one observation: to misclassify sample i, the
//! adversary must route x^i + ξ^i down *some* root-to-prediction path whose
//! label differs from y^i, and the branch tests along a fixed path collapse
//! into one integer interval per feature (a right turn at (f, θ) forces
//! ξ_f ≥ θ+1−x_f, a left turn forces ξ_f ≤ θ−x_f). Minimizing cost under
//! interval constraints decomposes per feature and is solved by inspection:
//! take the admissible point nearest zero. The per-sample minimum over
//! paths is ψ^i; ordering samples by ψ and funding greedily until the
//! budget runs out is exact, because per-sample costs are disjoint.
//!
//! Each attack carries a cut-set certificate: the edges leaving the path's
//! node set (off-path children, every path node's sink edge). Summing a
//! certificate's edge capacities at any tree bounds that tree's correct
//! count from above, which is what the cutting-plane master consumes.

use thiserror::Error;

use crate::data::Dataset;
use crate::tree::{enumerate_paths, route, DecisionPath, NodeRole, Topology, TreeEncoding};
use crate::uncertainty::{ShiftDomain, UncertaintyModel, BUDGET_SLACK};

#[derive(Debug, Error)]
pub enum AdversaryError {
    #[error("brute-force enumeration hit the cap: {rows} candidate rows for one sample (cap {cap})")]
    EnumerationBudget { rows: usize, cap: usize },
}

/// The cut generated by one decision path: all edges from the path's node
/// set (plus the source) to the rest of the sample's flow graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecisionCutSet {
    /// The generating path, root first, ending at a prediction node.
    pub path: Vec<u32>,
    /// Cut tree edges (n, m): n on the path, child m off it. A terminal
    /// that is internal to the topology contributes both its child edges —
    /// they exist in the flow graph and carry capacity at trees that
    /// branch where this path predicted.
    pub child_edges: Vec<(u32, u32)>,
}

impl DecisionCutSet {
    pub fn new(path: Vec<u32>, topo: &Topology) -> Self {
        let mut child_edges = Vec::new();
        for w in path.windows(2) {
            child_edges.push((w[0], if w[1] == 2 * w[0] { 2 * w[0] + 1 } else { 2 * w[0] }));
        }
        if let Some(&last) = path.last() {
            if !topo.is_leaf(last) {
                child_edges.push((last, 2 * last));
                child_edges.push((last, 2 * last + 1));
            }
        }
        DecisionCutSet { path, child_edges }
    }

    /// Nodes whose sink edge is cut: every path node.
    pub fn sink_nodes(&self) -> &[u32] {
        &self.path
    }

    /// Whether the source edge is cut; false for all path cut-sets.
    pub fn source_edge(&self) -> bool {
        false
    }
}

/// Build the cut-set of a decision path. The source edge (s, root) is
/// never cut — the root is in the path's side of the cut.
pub fn cutset_from_path(path: &DecisionPath, topo: &Topology) -> DecisionCutSet {
    DecisionCutSet::new(path.nodes.clone(), topo)
}

/// Capacity of the cut at a given tree, for a sample sitting at `row`
/// (already shifted) with true label `label`. A child edge carries 1 when
/// the row would actually take it; a sink edge carries 1 when the node
/// predicts the true label. By max-flow duality this bounds the sample's
/// correctness indicator at that tree from above.
pub fn cutset_value(
    cutset: &DecisionCutSet,
    encoding: &TreeEncoding,
    row: &[i64],
    label: usize,
) -> u32 {
    let mut value = u32::from(cutset.source_edge());
    for &(n, m) in &cutset.child_edges {
        if let NodeRole::Branch { feature, threshold } = encoding.role(n) {
            let goes_right = row[feature] >= threshold + 1;
            let taken = if goes_right { 2 * n + 1 } else { 2 * n };
            value += u32::from(taken == m);
        }
    }
    for &n in cutset.sink_nodes() {
        value += u32::from(encoding.w(n, label));
    }
    value
}

/// The cheapest way (if any) to push one sample off its nominal route and
/// down some specific path.
#[derive(Debug, Clone, PartialEq)]
pub struct PerSampleAttack {
    /// Minimum cost to misclassify the sample; +∞ when impossible.
    pub psi: f64,
    /// Shift row achieving ψ; all zeros when ψ = +∞.
    pub xi: Vec<i64>,
    /// Cut-set of the attack path (the nominal path when ψ = +∞).
    pub cutset: DecisionCutSet,
}

// Interval endpoints as Option<i64>, None = unbounded side.
fn tighten_lo(lo: &mut Option<i64>, v: i64) {
    *lo = Some(lo.map_or(v, |c| c.max(v)));
}

fn tighten_hi(hi: &mut Option<i64>, v: i64) {
    *hi = Some(hi.map_or(v, |c| c.min(v)));
}

fn interval_empty(lo: Option<i64>, hi: Option<i64>) -> bool {
    matches!((lo, hi), (Some(l), Some(h)) if l > h)
}

fn contains_zero(lo: Option<i64>, hi: Option<i64>) -> bool {
    lo.map_or(true, |l| l <= 0) && hi.map_or(true, |h| h >= 0)
}

/// Admissible shift of minimum magnitude in a nonempty interval.
fn nearest_to_zero(lo: Option<i64>, hi: Option<i64>) -> i64 {
    if contains_zero(lo, hi) {
        0
    } else if let Some(l) = lo.filter(|&l| l > 0) {
        l
    } else {
        hi.expect("interval without zero is bounded on its blocking side")
    }
}

/// Minimum-cost shift row sending sample `i` down `path`: collapse the
/// path's branch tests into per-feature intervals, intersect with the
/// cell domains, and take the admissible point nearest zero per feature
/// (for one-hot groups: the cheapest category consistent with every
/// member's interval). `None` when some feature or group has no
/// admissible value.
pub fn min_cost_for_path(
    dataset: &Dataset,
    i: usize,
    path: &[u32],
    encoding: &TreeEncoding,
    model: &UncertaintyModel,
) -> Option<(f64, Vec<i64>)> {
    let n_features = dataset.n_features();
    let mut lo = vec![None; n_features];
    let mut hi = vec![None; n_features];
    for w in path.windows(2) {
        let NodeRole::Branch { feature, threshold } = encoding.role(w[0]) else {
            unreachable!("non-terminal path node must branch")
        };
        let x = dataset.value(i, feature);
        if w[1] == 2 * w[0] {
            tighten_hi(&mut hi[feature], threshold - x);
        } else {
            tighten_lo(&mut lo[feature], threshold + 1 - x);
        }
    }

    let in_group = |f: usize| model.groups.iter().any(|g| g.members.contains(&f));
    let mut cost = 0.0;
    let mut xi = vec![0i64; n_features];

    for f in 0..n_features {
        if in_group(f) {
            continue;
        }
        match &model.domains[i][f] {
            ShiftDomain::Frozen => {
                if !contains_zero(lo[f], hi[f]) {
                    return None;
                }
            }
            ShiftDomain::Interval { lo: dlo, hi: dhi } => {
                let mut l = lo[f];
                let mut h = hi[f];
                if let Some(d) = dlo {
                    tighten_lo(&mut l, *d);
                }
                if let Some(d) = dhi {
                    tighten_hi(&mut h, *d);
                }
                if interval_empty(l, h) {
                    return None;
                }
                let shift = nearest_to_zero(l, h);
                xi[f] = shift;
                if shift != 0 {
                    cost += model.gamma[i][f] * shift.unsigned_abs() as f64;
                }
            }
            ShiftDomain::Group(_) => unreachable!("group cells are handled per group"),
        }
    }

    for group in &model.groups {
        let current = group
            .members
            .iter()
            .position(|&m| dataset.value(i, m) == 1)
            .expect("one-hot row has a set member");
        let flips_allowed = group
            .members
            .iter()
            .all(|&m| matches!(model.domains[i][m], ShiftDomain::Group(_)));
        // Category c puts member c at 1 and the rest at 0; check every
        // member's interval against the implied shift.
        let feasible = |c: usize| {
            group.members.iter().enumerate().all(|(j, &m)| {
                let target = i64::from(j == c) - dataset.value(i, m);
                lo[m].map_or(true, |l| target >= l) && hi[m].map_or(true, |h| target <= h)
            })
        };
        let mut best: Option<(f64, usize)> = None;
        for c in 0..group.members.len() {
            if c != current && !flips_allowed {
                continue;
            }
            if !feasible(c) {
                continue;
            }
            let flip_cost = if c == current {
                0.0
            } else {
                model.gamma[i][group.members[current]] + model.gamma[i][group.members[c]]
            };
            if best.is_none_or(|(b, _)| flip_cost < b) {
                best = Some((flip_cost, c));
            }
        }
        let (flip_cost, c) = best?;
        if !flip_cost.is_finite() {
            return None;
        }
        cost += flip_cost;
        if c != current {
            xi[group.members[current]] = -1;
            xi[group.members[c]] = 1;
        }
    }

    Some((cost, xi))
}

/// ψ^i: the cheapest admissible perturbation misclassifying sample `i`,
/// minimized over all decision paths with a wrong label. Ties go to the
/// first such path in left-to-right order. ψ = 0 exactly when the sample
/// is already misclassified (all costs being positive); ψ = +∞ when no
/// wrong-label path is reachable within the domains.
pub fn cheapest_misclassification(
    dataset: &Dataset,
    i: usize,
    encoding: &TreeEncoding,
    model: &UncertaintyModel,
) -> PerSampleAttack {
    let y = dataset.label(i);
    let topo = encoding.topology();
    let mut best: Option<PerSampleAttack> = None;
    for path in enumerate_paths(encoding) {
        let NodeRole::Predict { label } = encoding.role(path.terminal()) else {
            unreachable!("path terminal must predict")
        };
        if label == y {
            continue;
        }
        if let Some((cost, xi)) = min_cost_for_path(dataset, i, &path.nodes, encoding, model) {
            if best.as_ref().is_none_or(|b| cost < b.psi) {
                best = Some(PerSampleAttack {
                    psi: cost,
                    xi,
                    cutset: cutset_from_path(&path, &topo),
                });
            }
        }
    }
    best.unwrap_or_else(|| PerSampleAttack {
        psi: f64::INFINITY,
        xi: vec![0; dataset.n_features()],
        cutset: DecisionCutSet::new(route(encoding, dataset.row(i)).nodes, &topo),
    })
}

/// The adversary's answer for one tree: worst-case correct count with the
/// witnessing perturbation and per-sample cut-sets.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversaryCertificate {
    /// Number of samples still correct under the worst admissible shift.
    pub value: usize,
    /// ξ̃ rows; zero for unfunded samples.
    pub xi: Vec<Vec<i64>>,
    /// q̃ per sample: the attack path's cut-set if funded, else the
    /// nominal path's.
    pub cutsets: Vec<DecisionCutSet>,
    pub funded: Vec<bool>,
}

/// Spend the budget on attacks in order of cost (ψ ascending, sample index
/// breaking ties), funding each affordable one — the inclusive test `ψ ≤
/// remaining` matches the budget constraint Σcost ≤ ε. Unfunded samples
/// keep ξ = 0 and their nominal cut-set.
pub fn saturate_budget(
    dataset: &Dataset,
    encoding: &TreeEncoding,
    attacks: &[PerSampleAttack],
    epsilon: f64,
) -> AdversaryCertificate {
    let n = dataset.n_samples();
    debug_assert_eq!(attacks.len(), n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        attacks[a]
            .psi
            .partial_cmp(&attacks[b].psi)
            .expect("ψ is never NaN")
            .then(a.cmp(&b))
    });

    let mut remaining = epsilon;
    let mut funded = vec![false; n];
    for &i in &order {
        let psi = attacks[i].psi;
        if psi.is_finite() && psi <= remaining + BUDGET_SLACK {
            funded[i] = true;
            remaining -= psi;
        }
    }

    let xi = (0..n)
        .map(|i| {
            if funded[i] {
                attacks[i].xi.clone()
            } else {
                vec![0; dataset.n_features()]
            }
        })
        .collect();
    let topo = encoding.topology();
    let cutsets = (0..n)
        .map(|i| {
            if funded[i] {
                attacks[i].cutset.clone()
            } else {
                DecisionCutSet::new(route(encoding, dataset.row(i)).nodes, &topo)
            }
        })
        .collect();
    let value = funded.iter().filter(|&&f| !f).count();
    AdversaryCertificate {
        value,
        xi,
        cutsets,
        funded,
    }
}

/// Worst-case correct count for one tree: per-sample cheapest attacks,
/// then greedy budget saturation.
pub fn worst_case_correct(
    encoding: &TreeEncoding,
    dataset: &Dataset,
    model: &UncertaintyModel,
) -> AdversaryCertificate {
    let attacks: Vec<PerSampleAttack> = (0..dataset.n_samples())
        .map(|i| cheapest_misclassification(dataset, i, encoding, model))
        .collect();
    saturate_budget(dataset, encoding, &attacks, model.epsilon)
}

/// Enumeration limits for the brute-force oracle.
#[derive(Debug, Clone, Copy)]
pub struct BruteForceCaps {
    /// Most candidate shift rows enumerated for any one sample.
    pub max_rows_per_sample: usize,
}

impl Default for BruteForceCaps {
    fn default() -> Self {
        BruteForceCaps {
            max_rows_per_sample: 200_000,
        }
    }
}

/// Independent oracle for [`worst_case_correct`]: enumerate, per sample,
/// every admissible shift row with each cell capped to its saturation
/// range (one step past the observed feature range — anything farther
/// crosses no additional threshold), judge misclassification by actually
/// routing the shifted row, and fund the cheapest misclassifying rows
/// greedily. Exact on instances small enough to enumerate; shares no
/// interval logic with the path-based adversary.
pub fn brute_force_adversary(
    encoding: &TreeEncoding,
    dataset: &Dataset,
    model: &UncertaintyModel,
    caps: BruteForceCaps,
) -> Result<usize, AdversaryError> {
    let n_features = dataset.n_features();
    // Observed per-feature range, for the saturation cap.
    let observed: Vec<(i64, i64)> = (0..n_features)
        .map(|f| {
            let values = (0..dataset.n_samples()).map(|i| dataset.value(i, f));
            (values.clone().min().unwrap(), values.max().unwrap())
        })
        .collect();
    let in_group = |f: usize| model.groups.iter().any(|g| g.members.contains(&f));

    // Cheapest misclassifying row cost per sample, by full enumeration.
    let mut cheapest = Vec::with_capacity(dataset.n_samples());
    for i in 0..dataset.n_samples() {
        // Per-feature options (skipping group members), then per-group
        // category options, combined by cartesian product.
        let mut free_axes: Vec<Vec<(usize, i64, f64)>> = Vec::new();
        for f in 0..n_features {
            if in_group(f) {
                continue;
            }
            let x = dataset.value(i, f);
            let (lo_cap, hi_cap) = (observed[f].0 - 1 - x, observed[f].1 + 1 - x);
            let options: Vec<(usize, i64, f64)> = (lo_cap..=hi_cap)
                .filter(|&s| model.domains[i][f].contains(s))
                .map(|s| (f, s, model.gamma[i][f] * s.unsigned_abs() as f64))
                .collect();
            debug_assert!(options.iter().any(|&(_, s, _)| s == 0));
            free_axes.push(options);
        }
        for group in &model.groups {
            let current = group
                .members
                .iter()
                .position(|&m| dataset.value(i, m) == 1)
                .unwrap();
            let flips_allowed = group
                .members
                .iter()
                .all(|&m| matches!(model.domains[i][m], ShiftDomain::Group(_)));
            let mut options = vec![(group.members[current], 0i64, 0.0)];
            if flips_allowed {
                for (c, &m) in group.members.iter().enumerate() {
                    if c != current {
                        let cost = model.gamma[i][group.members[current]] + model.gamma[i][m];
                        if cost.is_finite() {
                            // Encode a flip as (target member, +1, cost); the
                            // -1 on the current member is implied.
                            options.push((m, 1, cost));
                        }
                    }
                }
            }
            free_axes.push(options);
        }

        let total_rows: usize = free_axes.iter().map(Vec::len).product();
        if total_rows > caps.max_rows_per_sample {
            return Err(AdversaryError::EnumerationBudget {
                rows: total_rows,
                cap: caps.max_rows_per_sample,
            });
        }

        let mut best = f64::INFINITY;
        let mut choice = vec![0usize; free_axes.len()];
        loop {
            let mut row: Vec<i64> = dataset.row(i).to_vec();
            let mut cost = 0.0;
            for (axis, &pick) in free_axes.iter().zip(&choice) {
                let (f, shift, c) = axis[pick];
                cost += c;
                if shift != 0 && in_group(f) {
                    // A group flip: clear the current member, set the target.
                    let group = model.groups.iter().find(|g| g.members.contains(&f)).unwrap();
                    let current = group
                        .members
                        .iter()
                        .position(|&m| dataset.value(i, m) == 1)
                        .unwrap();
                    row[group.members[current]] = 0;
                    row[f] = 1;
                } else {
                    row[f] += shift;
                }
            }
            if cost < best && route(encoding, &row).label != dataset.label(i) {
                best = cost;
            }
            // Odometer increment over the axes.
            let mut axis = 0;
            loop {
                if axis == free_axes.len() {
                    break;
                }
                choice[axis] += 1;
                if choice[axis] < free_axes[axis].len() {
                    break;
                }
                choice[axis] = 0;
                axis += 1;
            }
            if axis == free_axes.len() {
                break;
            }
        }
        cheapest.push(best);
    }

    // The adversary maximizes misclassifications under the shared budget;
    // costs are disjoint across samples, so cheapest-first is optimal.
    let mut costs = cheapest.clone();
    costs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut remaining = model.epsilon;
    let mut misclassified = 0;
    for cost in costs {
        if cost.is_finite() && cost <= remaining + BUDGET_SLACK {
            misclassified += 1;
            remaining -= cost;
        }
    }
    Ok(dataset.n_samples() - misclassified)
}

/// Cheapest admissible shift that changes which node predicts for sample
/// `i` — the label at the other end is irrelevant. +∞ when the tree has a
/// single prediction node or no alternative is reachable.
pub fn min_cost_to_reroute(
    dataset: &Dataset,
    i: usize,
    encoding: &TreeEncoding,
    model: &UncertaintyModel,
) -> f64 {
    let nominal = *route(encoding, dataset.row(i)).nodes.last().unwrap();
    let mut best = f64::INFINITY;
    for path in enumerate_paths(encoding) {
        if path.terminal() == nominal {
            continue;
        }
        if let Some((cost, _)) = min_cost_for_path(dataset, i, &path.nodes, encoding, model) {
            best = best.min(cost);
        }
    }
    best
}
