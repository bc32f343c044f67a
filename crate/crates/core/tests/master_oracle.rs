//! The cutting-plane loop against the direct oracle on random
//! micro-instances, plus the two structural guarantees everything rests
//! on: pooled cuts never cut off a feasible tree, and stability-proxy
//! optima remain exactly evaluable (and dominated) under the true
//! worst-case objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use robtree_core::adversary::worst_case_correct;
use robtree_core::data::{compute_thresholds, Dataset, FeatureKind, FeatureSchema, ShiftDirection};
use robtree_core::master::{
    build_cut_global, cutting_plane_solve, exhaustive_solve, proxy_solve, BudgetMode,
    EnumerativeBackend, SolveOptions, Termination,
};
use robtree_core::tree::{build_topology, enumerate_encodings, route, sample_encoding};
use robtree_core::uncertainty::{ShiftDomain, UncertaintyModel};

struct Instance {
    dataset: Dataset,
    model: UncertaintyModel,
    depth: u32,
}

/// Small instances with enumerable encoding sets: 1–2 integer features
/// (narrow at depth 2), 2 labels, mixed shift domains and costs.
fn random_instance(seed: u64) -> Instance {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let depth = rng.random_range(0..=2u32);
    let n_int = if depth == 2 { 1 } else { rng.random_range(1..=2) };
    let hi = if depth == 2 { 4 } else { 6 };
    let n_rows = rng.random_range(3..=7);

    let features: Vec<FeatureSchema> = (0..n_int)
        .map(|k| FeatureSchema {
            name: format!("g{k}"),
            kind: FeatureKind::Integer {
                lower: None,
                upper: None,
            },
            shift: ShiftDirection::Both,
            rho: None,
        })
        .collect();
    let x: Vec<Vec<i64>> = (0..n_rows)
        .map(|_| (0..n_int).map(|_| rng.random_range(0..=hi)).collect())
        .collect();
    let mut labels: Vec<String> = (0..n_rows)
        .map(|_| rng.random_range(0..2).to_string())
        .collect();
    labels[0] = "0".into();
    labels[1] = "1".into();
    let dataset = Dataset::from_parts(features, x, labels).unwrap();

    let mut gamma = vec![vec![0.0; n_int]; n_rows];
    let mut domains = vec![vec![ShiftDomain::Frozen; n_int]; n_rows];
    for i in 0..n_rows {
        for f in 0..n_int {
            gamma[i][f] = if rng.random_bool(0.1) {
                0.0
            } else {
                rng.random_range(0.4..2.0)
            };
            domains[i][f] = match rng.random_range(0..5) {
                0 => ShiftDomain::Frozen,
                1 => ShiftDomain::Interval {
                    lo: Some(0),
                    hi: None,
                },
                2 => ShiftDomain::Interval {
                    lo: None,
                    hi: Some(0),
                },
                3 => ShiftDomain::Interval {
                    lo: Some(-2),
                    hi: Some(2),
                },
                _ => ShiftDomain::Interval { lo: None, hi: None },
            };
        }
    }
    let epsilon = [0.0, 0.7, 1.5, 3.0][rng.random_range(0..4)];
    Instance {
        dataset,
        model: UncertaintyModel {
            gamma,
            epsilon,
            domains,
            groups: vec![],
        },
        depth,
    }
}

#[test]
fn cutting_plane_matches_exhaustive() {
    let backend = EnumerativeBackend::default();
    for seed in 0..60u64 {
        let inst = random_instance(seed);
        let oracle = exhaustive_solve(&inst.dataset, &inst.model, inst.depth, 1 << 24).unwrap();
        for strengthen in [true, false] {
            let options = SolveOptions {
                strengthen,
                ..SolveOptions::default()
            };
            let report =
                cutting_plane_solve(&inst.dataset, &inst.model, inst.depth, &backend, options)
                    .unwrap();
            assert_eq!(report.status, Termination::Optimal, "seed {seed}");
            assert_eq!(
                report.objective, oracle.objective,
                "seed {seed}, strengthen {strengthen}"
            );
            assert_eq!(report.objective, report.bound);
            // The loop's own incumbent must actually attain the objective.
            let check = worst_case_correct(&report.encoding, &inst.dataset, &inst.model).value;
            assert_eq!(check as f64, report.objective);
        }
    }
}

#[test]
fn pooled_cuts_never_exclude_a_feasible_tree() {
    for seed in 100..130u64 {
        let mut inst = random_instance(seed);
        inst.depth = inst.depth.min(1);
        let thresholds = compute_thresholds(&inst.dataset);
        let topo = build_topology(inst.depth).unwrap();
        let all = enumerate_encodings(&topo, &thresholds, inst.dataset.n_labels());

        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0xABCD);
        for _ in 0..4 {
            let incumbent = sample_encoding(&topo, &thresholds, inst.dataset.n_labels(), &mut rng);
            let cert = worst_case_correct(&incumbent, &inst.dataset, &inst.model);
            let cut = build_cut_global(&inst.dataset, &thresholds, &cert);
            for enc in &all {
                let true_value = worst_case_correct(enc, &inst.dataset, &inst.model).value;
                assert!(
                    u32::try_from(true_value).unwrap() <= cut.rhs(enc),
                    "seed {seed}: cut below the true worst case"
                );
            }
        }
    }
}

#[test]
fn proxy_optima_survive_the_true_adversary() {
    for seed in 200..240u64 {
        let inst = random_instance(seed);
        let proxy = proxy_solve(
            &inst.dataset,
            &inst.model,
            inst.depth,
            BudgetMode::Shared,
            1 << 24,
        )
        .unwrap();
        // Stability means the adversary can only exploit nominal errors,
        // so the worst case equals the proxy's nominal objective...
        let value = worst_case_correct(&proxy.encoding, &inst.dataset, &inst.model).value;
        assert_eq!(value as f64, proxy.objective, "seed {seed}");
        // ...which the unrestricted robust optimum therefore dominates.
        let robust = exhaustive_solve(&inst.dataset, &inst.model, inst.depth, 1 << 24).unwrap();
        assert!(proxy.objective <= robust.objective, "seed {seed}");
        // And the proxy tree really is stable: nominal routing survives
        // every funded attack... directly: nominal accuracy is unchanged.
        let nominal = (0..inst.dataset.n_samples())
            .filter(|&i| {
                route(&proxy.encoding, inst.dataset.row(i)).label == inst.dataset.label(i)
            })
            .count();
        assert_eq!(nominal as f64, proxy.objective);
    }
}
