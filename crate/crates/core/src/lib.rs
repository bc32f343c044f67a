//! Training of optimal depth-bounded classification trees that remain accurate
//! when an adversary may shift integer/categorical inputs within a budgeted
//! uncertainty set.
//!
//! The pipeline, end to end:
//!
//! 1. [`data`] — typed integer datasets with per-feature bounds, shift
//!    directions, and one-hot categorical groups; candidate split thresholds.
//! 2. [`uncertainty`] — turns per-feature certainty probabilities ρ (and a
//!    global plausibility λ) into per-cell shift costs γ and a total budget ε,
//!    and samples perturbations from the matching truncated-geometric laws.
//! 3. [`tree`] — the binary-encoded search space of complete trees with
//!    branch/predict/pruned roles, routing, and root-to-decision paths.
//! 4. [`adversary`] — given a tree, finds the exact worst-case perturbation
//!    under the budget, with a cut-set certificate per sample.
//! 5. [`master`] — the cut-generation loop: solve a relaxed main problem,
//!    call the adversary on the incumbent, add violated cuts, repeat until
//!    the worst-case objective matches the bound.

pub mod adversary;
pub mod data;
pub mod master;
pub mod tree;
pub mod uncertainty;
