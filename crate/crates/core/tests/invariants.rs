use dp_consensus::engine::{consensus_deviation, run, run_full, run_stage1};
use dp_consensus::experiments::{build_run, ExperimentConfig};
use dp_consensus::graph::{gen_erdos_renyi, spectral_gap};
use dp_consensus::objectives::ObjectiveSpec;
use dp_consensus::privacy::{
    budget_check, build_schedule, privacy_loss_coupled_run, run_audit, LossSummary, NeighborEdit,
    PrivacyBudget,
};
use nalgebra::DVector;
use proptest::prelude::*;

fn small_config(n_nodes: usize, points: usize, horizon: usize, p_c: f64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.graph.n_nodes = n_nodes;
    cfg.graph.edge_probability = p_c;
    cfg.data.points_per_node = points;
    cfg.data.dimension = 3;
    cfg.run.horizon = horizon;
    cfg
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn schedules_always_fit_their_budget(
        horizon in 1usize..3000,
        eps in 0.05f64..10.0,
        log_delta in -12f64..-0.5,
        mu in 0.1f64..10.0,
        spread in 1.0f64..20.0,
        g in 0.01f64..100.0,
    ) {
        let budget = PrivacyBudget::new(eps, 10f64.powf(log_delta)).unwrap();
        let spec = ObjectiveSpec::new(g, mu * spread, mu, 2).unwrap();
        let s = build_schedule(horizon, &budget, &spec).unwrap();
        let check = budget_check(&s, s.sensitivities(), &budget).unwrap();
        prop_assert!(check.pass);
        prop_assert!(check.spent <= check.allowance * (1.0 + 1e-12));
        prop_assert!(s.scales().iter().all(|m| m.is_finite() && *m > 0.0));
    }

    #[test]
    fn mixing_matrices_are_doubly_stochastic(n in 2usize..25, p_c in 0.3f64..1.0, seed: u64) {
        let g = gen_erdos_renyi(n, p_c, seed).unwrap();
        let w = g.weights();
        for i in 0..n {
            prop_assert!((w.row(i).sum() - 1.0).abs() < 1e-12);
            prop_assert!((w.column(i).sum() - 1.0).abs() < 1e-12);
            for j in 0..n {
                prop_assert!((w[(i, j)] - w[(j, i)]).abs() < 1e-15);
                if i != j && !g.adjacency().contains(i, j) {
                    prop_assert_eq!(w[(i, j)], 0.0);
                }
            }
        }
        let beta = spectral_gap(w).unwrap();
        prop_assert!((0.0..1.0).contains(&beta));
        prop_assert!((beta - g.beta()).abs() < 1e-9);
    }

    #[test]
    fn stage1_iterates_stay_in_the_box(
        n in 2usize..8,
        points in 1usize..20,
        horizon in 1usize..60,
        p_c in 0.2f64..1.0,
        seed: u64,
    ) {
        let run_cfg = build_run(&small_config(n, points, horizon, p_c), seed).unwrap();
        let (stage1, _) = run_stage1(&run_cfg).unwrap();
        let r = run_cfg.domain.half_width;
        prop_assert!(stage1.x.iter().chain(stage1.z.iter()).all(|v| v.abs() <= r));
        let (_, metrics) = run(&run_cfg).unwrap();
        prop_assert_eq!(metrics.stage1_rounds(), horizon);
        prop_assert!(metrics.stage2_rounds() >= 1);
        let inv = metrics.stage2_invariants(run_cfg.graph.beta()).unwrap();
        prop_assert!(inv.holds(1e-10, 1e-8), "{:?}", inv);
    }

    #[test]
    fn privacy_loss_parts_respect_their_bounds(
        n in 2usize..6,
        points in 1usize..10,
        horizon in 1usize..40,
        node_pick in 0usize..100,
        index_pick in 0usize..100,
        coords in proptest::collection::vec(-1.0f64..=1.0, 3),
        seed: u64,
        noise_seed: u64,
    ) {
        let run_cfg = build_run(&small_config(n, points, horizon, 0.7), seed).unwrap();
        let edit = NeighborEdit::new(node_pick % n, index_pick % points, DVector::from_vec(coords));
        let s = privacy_loss_coupled_run(&run_cfg, &edit, noise_seed).unwrap();
        let alpha = run_cfg.schedule.alpha();
        prop_assert!(s.max_gap_ratio <= 1.0 + 1e-9);
        prop_assert!(s.deterministic_part >= 0.0);
        prop_assert!(s.deterministic_part <= alpha / 2.0 * (1.0 + 1e-9));
        let scale = 1.0 + s.total.abs() + s.direct_total.abs();
        prop_assert!((s.total - s.direct_total).abs() <= 1e-8 * scale);
    }
}

#[test]
fn noise_part_has_zero_mean() {
    let mut cfg = ExperimentConfig::default();
    cfg.run.horizon = 30;
    let run_cfg = build_run(&cfg, 5).unwrap();
    let edit = NeighborEdit::worst_case(&run_cfg.datasets, &run_cfg.domain).unwrap();
    let samples = run_audit(&run_cfg, &edit, 10_000, 17).unwrap();
    let summary = LossSummary::from_samples(&samples);
    assert!(
        summary.mean_noise.abs() <= 3.0 * summary.stderr_noise,
        "{} vs 3 SE {}",
        summary.mean_noise,
        3.0 * summary.stderr_noise
    );
}

#[test]
fn noiseless_runs_match_a_centralized_oracle() {
    // Centralized projected gradient descent on F(x) = Σ_i Σ_l ½‖x − d_il‖²
    // has the grand mean as its minimizer; the distributed run must land there.
    let mut cfg = small_config(6, 15, 400, 0.5);
    cfg.privacy.noiseless = true;
    let run_cfg = build_run(&cfg, 8).unwrap();
    let metrics = run_full(&run_cfg).unwrap();

    let all: Vec<&DVector<f64>> = run_cfg.datasets.iter().flat_map(|d| &d.points).collect();
    let total = all.len() as f64;
    let mut x = DVector::zeros(3);
    for t in 1..=2000 {
        let grad = all.iter().fold(DVector::zeros(3), |acc, d| acc + (&x - *d));
        x -= grad / (total * t as f64);
    }
    let last = metrics.last().unwrap();
    let err = (&last.mean_iterate - &x).norm() / x.norm();
    assert!(err < 1e-3, "relative distance to centralized optimum {err}");
}

#[test]
fn noisy_runs_end_in_consensus() {
    let run_cfg = build_run(&ExperimentConfig::default(), 3).unwrap();
    let (state, _) = run(&run_cfg).unwrap();
    assert!(consensus_deviation(&state.x) < 1e-6);
}
