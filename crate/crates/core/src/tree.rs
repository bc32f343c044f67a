//! Binary tree topologies, the indicator encoding of complete depth-d trees,
//! sample routing, and decision-path enumeration.
//!
//! Nodes are numbered breadth-first from 1: internal nodes are 1..2^d−1,
//! leaves 2^d..2^{d+1}−1, the children of n are 2n and 2n+1, its parent is
//! ⌊n/2⌋. A tree over this fixed topology is encoded by three indicator
//! families:
//!
//! - branch indicators: node n tests feature f against integer threshold θ;
//! - prediction flags v_n: node n predicts instead of branching;
//! - label indicators w_{nk}: the label predicted at n.
//!
//! A valid encoding gives every node exactly one fate — branch, predict, or
//! sit pruned below a predicting ancestor — and pairs each prediction flag
//! with exactly one label. Validity is deliberately *not* baked into the
//! representation: the solver and tests manipulate raw indicators, and
//! [`validate_encoding`] is the gate.
//!
//! Routing is the usual axis-aligned walk with integer semantics: at a
//! branch (f, θ) a row goes right iff `row[f] ≥ θ+1`, so a value equal to
//! the threshold goes left.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::ThresholdMap;

/// Hard upper bound on tree depth; complete trees get big fast.
pub const MAX_DEPTH: u32 = 10;

/// Version tag written into tree blobs.
const BLOB_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("depth {depth} exceeds the supported maximum {max}")]
    DepthCap { depth: u32, max: u32 },
    #[error("node {node}: branch/predict/pruned indicators sum to {sum}, expected exactly 1")]
    NodeChoiceSum { node: u32, sum: u32 },
    #[error("node {node}: prediction flag is {v} but {labels} label indicator(s) are set")]
    PredictLabelMismatch { node: u32, v: bool, labels: usize },
    #[error("leaf {node} carries a branch indicator")]
    LeafBranch { node: u32 },
    #[error("node {node}: duplicate indicator")]
    DuplicateIndicator { node: u32 },
    #[error("node {node}: feature {feature} out of range")]
    FeatureOutOfRange { node: u32, feature: usize },
    #[error("node {node}: threshold {threshold} is not a valid cut for feature {feature}")]
    ThresholdOutOfRange {
        node: u32,
        feature: usize,
        threshold: i64,
    },
    #[error("node {node}: label {label} out of range")]
    LabelOutOfRange { node: u32, label: usize },
    #[error("encoding has {nodes} node slots, topology of depth {depth} needs {expected}")]
    SizeMismatch {
        nodes: usize,
        depth: u32,
        expected: usize,
    },
    #[error("tree blob version {found}, this build reads version {expected}")]
    BlobVersion { found: u32, expected: u32 },
    #[error("malformed tree blob: {0}")]
    BlobMalformed(String),
}

/// The complete binary tree shape at a fixed depth; pure index arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Topology {
    depth: u32,
}

/// Build the complete topology of the given depth (node-count cap applies).
pub fn build_topology(depth: u32) -> Result<Topology, TreeError> {
    if depth > MAX_DEPTH {
        return Err(TreeError::DepthCap {
            depth,
            max: MAX_DEPTH,
        });
    }
    Ok(Topology { depth })
}

impl Topology {
    pub fn depth(&self) -> u32 {
        self.depth
    }

    /// Internal (branchable) nodes: 1..2^d−1; empty at depth 0.
    pub fn internal_nodes(&self) -> std::ops::Range<u32> {
        1..(1 << self.depth)
    }

    /// Leaf nodes: 2^d..2^{d+1}−1.
    pub fn leaves(&self) -> std::ops::Range<u32> {
        (1 << self.depth)..(1 << (self.depth + 1))
    }

    /// All nodes in breadth-first order.
    pub fn all_nodes(&self) -> std::ops::Range<u32> {
        1..(1 << (self.depth + 1))
    }

    pub fn n_nodes(&self) -> usize {
        (1 << (self.depth + 1)) - 1
    }

    pub fn is_leaf(&self, n: u32) -> bool {
        n >= 1 << self.depth
    }

    pub fn left(&self, n: u32) -> u32 {
        debug_assert!(!self.is_leaf(n));
        2 * n
    }

    pub fn right(&self, n: u32) -> u32 {
        debug_assert!(!self.is_leaf(n));
        2 * n + 1
    }

    pub fn parent(&self, n: u32) -> Option<u32> {
        if n <= 1 {
            None
        } else {
            Some(n / 2)
        }
    }

    /// Proper ancestors of `n`, nearest first, ending at the root.
    pub fn ancestors(&self, n: u32) -> Vec<u32> {
        let mut out = Vec::new();
        let mut m = n;
        while m > 1 {
            m /= 2;
            out.push(m);
        }
        out
    }
}

/// Raw indicator state of one node slot.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct NodeState {
    /// Branch indicators (feature, threshold); at most one in a valid tree.
    pub branches: Vec<(usize, i64)>,
    /// Prediction flag.
    pub v: bool,
    /// Label indicators; exactly one iff `v` in a valid tree.
    pub labels: Vec<usize>,
}

/// What a node does in a valid tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeRole {
    Branch { feature: usize, threshold: i64 },
    Predict { label: usize },
    Pruned,
}

/// Indicator encoding of one complete tree. Slot `n` lives at `nodes[n−1]`;
/// the slot count 2^{d+1}−1 determines the depth.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TreeEncoding {
    pub nodes: Vec<NodeState>,
}

impl TreeEncoding {
    /// All-zero indicators for a depth-`depth` tree (not yet valid).
    pub fn empty(depth: u32) -> Self {
        TreeEncoding {
            nodes: vec![NodeState::default(); (1 << (depth + 1)) - 1],
        }
    }

    pub fn from_roles(roles: &[NodeRole]) -> Self {
        let nodes = roles
            .iter()
            .map(|r| match *r {
                NodeRole::Branch { feature, threshold } => NodeState {
                    branches: vec![(feature, threshold)],
                    ..NodeState::default()
                },
                NodeRole::Predict { label } => NodeState {
                    v: true,
                    labels: vec![label],
                    ..NodeState::default()
                },
                NodeRole::Pruned => NodeState::default(),
            })
            .collect();
        TreeEncoding { nodes }
    }

    /// Depth implied by the slot count.
    pub fn depth(&self) -> u32 {
        debug_assert!((self.nodes.len() + 1).is_power_of_two());
        (self.nodes.len() + 1).trailing_zeros() - 1
    }

    pub fn topology(&self) -> Topology {
        Topology {
            depth: self.depth(),
        }
    }

    pub fn state(&self, n: u32) -> &NodeState {
        &self.nodes[(n - 1) as usize]
    }

    pub fn state_mut(&mut self, n: u32) -> &mut NodeState {
        &mut self.nodes[(n - 1) as usize]
    }

    /// Branch indicator b at (n, f, θ).
    pub fn b(&self, n: u32, feature: usize, threshold: i64) -> bool {
        self.state(n).branches.contains(&(feature, threshold))
    }

    /// Prediction flag v at n.
    pub fn v(&self, n: u32) -> bool {
        self.state(n).v
    }

    /// Label indicator w at (n, k).
    pub fn w(&self, n: u32, label: usize) -> bool {
        self.state(n).labels.contains(&label)
    }

    /// The node's role, assuming a valid encoding.
    pub fn role(&self, n: u32) -> NodeRole {
        let s = self.state(n);
        if let Some(&(feature, threshold)) = s.branches.first() {
            NodeRole::Branch { feature, threshold }
        } else if s.v {
            NodeRole::Predict {
                label: s.labels[0],
            }
        } else {
            NodeRole::Pruned
        }
    }

    /// Number of branch indicators set anywhere (the tree's split count).
    pub fn n_branching(&self) -> usize {
        self.nodes.iter().map(|s| s.branches.len()).sum()
    }
}

/// Check membership of `encoding` in the valid-tree set over `topology`:
/// every node has exactly one fate (branch / predict / pruned under a
/// predicting ancestor), prediction flags pair with exactly one label, and
/// all indices are in range (thresholds must be usable cuts per
/// `thresholds`, labels below `n_labels`). Reports the first violation in
/// breadth-first node order.
pub fn validate_encoding(
    encoding: &TreeEncoding,
    topology: &Topology,
    thresholds: &ThresholdMap,
    n_labels: usize,
) -> Result<(), TreeError> {
    if encoding.nodes.len() != topology.n_nodes() {
        return Err(TreeError::SizeMismatch {
            nodes: encoding.nodes.len(),
            depth: topology.depth(),
            expected: topology.n_nodes(),
        });
    }
    for n in topology.all_nodes() {
        let s = encoding.state(n);
        let mut seen = s.branches.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != s.branches.len() {
            return Err(TreeError::DuplicateIndicator { node: n });
        }
        let mut seen_labels = s.labels.clone();
        seen_labels.sort_unstable();
        seen_labels.dedup();
        if seen_labels.len() != s.labels.len() {
            return Err(TreeError::DuplicateIndicator { node: n });
        }
        if topology.is_leaf(n) && !s.branches.is_empty() {
            return Err(TreeError::LeafBranch { node: n });
        }
        for &(f, theta) in &s.branches {
            if f >= thresholds.n_features() {
                return Err(TreeError::FeatureOutOfRange { node: n, feature: f });
            }
            if !thresholds.thresholds(f).contains(&theta) {
                return Err(TreeError::ThresholdOutOfRange {
                    node: n,
                    feature: f,
                    threshold: theta,
                });
            }
        }
        for &k in &s.labels {
            if k >= n_labels {
                return Err(TreeError::LabelOutOfRange { node: n, label: k });
            }
        }
        // Exactly-one-fate: branch indicators + own prediction flag + any
        // predicting ancestor must account for precisely one unit.
        let ancestor_predicts: u32 = topology
            .ancestors(n)
            .iter()
            .map(|&m| u32::from(encoding.v(m)))
            .sum();
        let sum = s.branches.len() as u32 + u32::from(s.v) + ancestor_predicts;
        if sum != 1 {
            return Err(TreeError::NodeChoiceSum { node: n, sum });
        }
        // A set prediction flag carries exactly one label, a clear one none.
        if s.labels.len() != usize::from(s.v) {
            return Err(TreeError::PredictLabelMismatch {
                node: n,
                v: s.v,
                labels: s.labels.len(),
            });
        }
    }
    Ok(())
}

/// Root-to-prediction walk of one sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoutingTrace {
    /// Visited nodes, root first; the last one predicts.
    pub nodes: Vec<u32>,
    pub label: usize,
}

/// Route a row through a valid tree: right iff `row[f] ≥ θ+1` at each
/// branch, stop at the first predicting node.
pub fn route(encoding: &TreeEncoding, row: &[i64]) -> RoutingTrace {
    let mut n = 1u32;
    let mut nodes = Vec::new();
    loop {
        nodes.push(n);
        match encoding.role(n) {
            NodeRole::Branch { feature, threshold } => {
                n = if row[feature] >= threshold + 1 {
                    2 * n + 1
                } else {
                    2 * n
                };
            }
            NodeRole::Predict { label } => {
                return RoutingTrace { nodes, label };
            }
            NodeRole::Pruned => unreachable!("routing reached a pruned node; encoding invalid"),
        }
    }
}

/// One root-to-prediction-node path (source and sink implicit).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecisionPath {
    /// Nodes from the root to a predicting node, parent-to-child.
    pub nodes: Vec<u32>,
}

impl DecisionPath {
    /// The predicting node the path ends at.
    pub fn terminal(&self) -> u32 {
        *self.nodes.last().expect("path is nonempty")
    }
}

/// All root-to-prediction paths of a valid tree, left-to-right. There is
/// exactly one per predicting node.
pub fn enumerate_paths(encoding: &TreeEncoding) -> Vec<DecisionPath> {
    let mut out = Vec::new();
    let mut stack = vec![vec![1u32]];
    while let Some(prefix) = stack.pop() {
        let n = *prefix.last().unwrap();
        match encoding.role(n) {
            NodeRole::Predict { .. } => out.push(DecisionPath { nodes: prefix }),
            NodeRole::Branch { .. } => {
                // Push right first so the left child pops first.
                let mut right = prefix.clone();
                right.push(2 * n + 1);
                stack.push(right);
                let mut left = prefix;
                left.push(2 * n);
                stack.push(left);
            }
            NodeRole::Pruned => unreachable!("path walk reached a pruned node; encoding invalid"),
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TreeBlob {
    version: u32,
    depth: u32,
    nodes: Vec<BlobNode>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlobNode {
    id: u32,
    /// "branch" | "predict" | "pruned"
    role: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feature: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    threshold: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<usize>,
}

/// Serialize a valid tree to its JSON blob. Output bytes are a pure
/// function of the encoding (nodes ascending, fixed field order).
pub fn serialize_tree(encoding: &TreeEncoding) -> String {
    let topology = encoding.topology();
    let nodes = topology
        .all_nodes()
        .map(|n| match encoding.role(n) {
            NodeRole::Branch { feature, threshold } => BlobNode {
                id: n,
                role: "branch".into(),
                feature: Some(feature),
                threshold: Some(threshold),
                label: None,
            },
            NodeRole::Predict { label } => BlobNode {
                id: n,
                role: "predict".into(),
                feature: None,
                threshold: None,
                label: Some(label),
            },
            NodeRole::Pruned => BlobNode {
                id: n,
                role: "pruned".into(),
                feature: None,
                threshold: None,
                label: None,
            },
        })
        .collect();
    let blob = TreeBlob {
        version: BLOB_VERSION,
        depth: topology.depth(),
        nodes,
    };
    serde_json::to_string_pretty(&blob).expect("tree blob serializes")
}

/// Parse a tree blob and re-check structural validity (every node one fate,
/// labels paired with prediction flags). Threshold/label ranges can only be
/// checked against a dataset, so they are revalidated at use sites.
pub fn deserialize_tree(blob: &str) -> Result<TreeEncoding, TreeError> {
    let parsed: TreeBlob =
        serde_json::from_str(blob).map_err(|e| TreeError::BlobMalformed(e.to_string()))?;
    if parsed.version != BLOB_VERSION {
        return Err(TreeError::BlobVersion {
            found: parsed.version,
            expected: BLOB_VERSION,
        });
    }
    let topology = build_topology(parsed.depth)?;
    if parsed.nodes.len() != topology.n_nodes() {
        return Err(TreeError::SizeMismatch {
            nodes: parsed.nodes.len(),
            depth: parsed.depth,
            expected: topology.n_nodes(),
        });
    }
    let mut encoding = TreeEncoding::empty(parsed.depth);
    for (slot, node) in topology.all_nodes().zip(&parsed.nodes) {
        if node.id != slot {
            return Err(TreeError::BlobMalformed(format!(
                "node ids must run 1..{} in order; found {} at position {}",
                topology.n_nodes(),
                node.id,
                slot
            )));
        }
        let state = encoding.state_mut(slot);
        match node.role.as_str() {
            "branch" => match (node.feature, node.threshold) {
                (Some(f), Some(t)) => state.branches.push((f, t)),
                _ => {
                    return Err(TreeError::BlobMalformed(format!(
                        "branch node {slot} needs feature and threshold"
                    )))
                }
            },
            "predict" => match node.label {
                Some(k) => {
                    state.v = true;
                    state.labels.push(k);
                }
                None => {
                    return Err(TreeError::BlobMalformed(format!(
                        "predict node {slot} needs a label"
                    )))
                }
            },
            "pruned" => {}
            other => {
                return Err(TreeError::BlobMalformed(format!(
                    "node {slot}: unknown role {other:?}"
                )))
            }
        }
    }
    validate_structure(&encoding, &topology)?;
    Ok(encoding)
}

/// The range-free part of [`validate_encoding`]: fates and label pairing.
fn validate_structure(encoding: &TreeEncoding, topology: &Topology) -> Result<(), TreeError> {
    for n in topology.all_nodes() {
        let s = encoding.state(n);
        if topology.is_leaf(n) && !s.branches.is_empty() {
            return Err(TreeError::LeafBranch { node: n });
        }
        let ancestor_predicts: u32 = topology
            .ancestors(n)
            .iter()
            .map(|&m| u32::from(encoding.v(m)))
            .sum();
        let sum = s.branches.len() as u32 + u32::from(s.v) + ancestor_predicts;
        if sum != 1 {
            return Err(TreeError::NodeChoiceSum { node: n, sum });
        }
        if s.labels.len() != usize::from(s.v) {
            return Err(TreeError::PredictLabelMismatch {
                node: n,
                v: s.v,
                labels: s.labels.len(),
            });
        }
    }
    Ok(())
}

/// Every valid tree over `topology`, branching only on cuts from
/// `thresholds`, predicting labels below `n_labels`.
///
/// Enumeration order is deterministic and documented because solvers use
/// "first in this order" as the tie-break: a subtree's options are listed
/// predictions first (labels ascending), then branches (feature ascending,
/// threshold ascending) with left-subtree options varying slower than right.
pub fn enumerate_encodings(
    topology: &Topology,
    thresholds: &ThresholdMap,
    n_labels: usize,
) -> Vec<TreeEncoding> {
    let branch_options: Vec<(usize, i64)> = (0..thresholds.n_features())
        .flat_map(|f| thresholds.thresholds(f).iter().map(move |&t| (f, t)))
        .collect();

    // Assignments for the subtree rooted at n, as (node, role) lists.
    fn subtree(
        n: u32,
        topology: &Topology,
        branch_options: &[(usize, i64)],
        n_labels: usize,
    ) -> Vec<Vec<(u32, NodeRole)>> {
        let mut out = Vec::new();
        for label in 0..n_labels {
            // Predict here; everything below stays pruned (all-zero).
            out.push(vec![(n, NodeRole::Predict { label })]);
        }
        if !topology.is_leaf(n) {
            let lefts = subtree(2 * n, topology, branch_options, n_labels);
            let rights = subtree(2 * n + 1, topology, branch_options, n_labels);
            for &(feature, threshold) in branch_options {
                for l in &lefts {
                    for r in &rights {
                        let mut assignment = vec![(n, NodeRole::Branch { feature, threshold })];
                        assignment.extend_from_slice(l);
                        assignment.extend_from_slice(r);
                        out.push(assignment);
                    }
                }
            }
        }
        out
    }

    subtree(1, topology, &branch_options, n_labels)
        .into_iter()
        .map(|assignment| {
            let mut encoding = TreeEncoding::empty(topology.depth());
            for (n, role) in assignment {
                match role {
                    NodeRole::Branch { feature, threshold } => {
                        encoding.state_mut(n).branches.push((feature, threshold));
                    }
                    NodeRole::Predict { label } => {
                        let s = encoding.state_mut(n);
                        s.v = true;
                        s.labels.push(label);
                    }
                    NodeRole::Pruned => {}
                }
            }
            encoding
        })
        .collect()
}

/// How many encodings [`enumerate_encodings`] would yield, without
/// materializing them — so callers can refuse oversized enumerations up
/// front. Saturates at `u128::MAX`.
pub fn count_encodings(topology: &Topology, thresholds: &ThresholdMap, n_labels: usize) -> u128 {
    let branch_options: u128 = (0..thresholds.n_features())
        .map(|f| thresholds.thresholds(f).len() as u128)
        .sum();
    // A node's count depends only on its level: labels to predict here,
    // plus cuts × left × right below.
    let mut per_level = n_labels as u128;
    for _ in 0..topology.depth() {
        per_level = (n_labels as u128)
            .saturating_add(branch_options.saturating_mul(per_level.saturating_mul(per_level)));
    }
    per_level
}

/// Draw one uniformly-shaped valid tree: each node independently picks
/// predict-or-branch, then a uniform label / cut. Handy for randomized
/// validity and round-trip checks, not a statement about any distribution
/// over trees.
pub fn sample_encoding<R: rand::Rng>(
    topology: &Topology,
    thresholds: &ThresholdMap,
    n_labels: usize,
    rng: &mut R,
) -> TreeEncoding {
    let branch_options: Vec<(usize, i64)> = (0..thresholds.n_features())
        .flat_map(|f| thresholds.thresholds(f).iter().map(move |&t| (f, t)))
        .collect();
    let mut encoding = TreeEncoding::empty(topology.depth());
    let mut stack = vec![1u32];
    while let Some(n) = stack.pop() {
        let branchable = !topology.is_leaf(n) && !branch_options.is_empty();
        if branchable && rng.random_bool(0.5) {
            let (feature, threshold) = branch_options[rng.random_range(0..branch_options.len())];
            encoding.state_mut(n).branches.push((feature, threshold));
            stack.push(2 * n);
            stack.push(2 * n + 1);
        } else {
            let s = encoding.state_mut(n);
            s.v = true;
            s.labels.push(rng.random_range(0..n_labels));
        }
    }
    encoding
}
