use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use npg_core::diagnostics::{max_ratio, mismatch_coefficients, relative_condition_number};
use npg_core::mdp::generate_random_mdp;
use npg_core::oracle::{
    evaluate_policy, optimal_policy, performance_difference, state_action_visitation_bar,
    state_action_visitation_tilde, state_visitation,
};
use npg_core::policy::{
    center_design, expected_kl, log_policy, mirror_update_table, npg_direction_fisher,
    policy_gradient, policy_table, three_point_check, three_point_sides, weighted_root,
};
use npg_core::linalg::{svd, PINV_RCOND};
use npg_core::regression::{compatible_problem, second_moment_identity_check, RegressionKind};
use npg_core::{FeatureMap, FiniteMdp, PolicyTable, RegressionProblem, RngStream};
use npg_core::{StateActionDistribution, StateDistribution};

fn normals(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = RngStream::new(seed, 77).rng();
    (0..n).map(|_| rng.normal()).collect()
}

fn simplex(seed: u64, n: usize, allow_zero: bool) -> Vec<f64> {
    let mut rng = RngStream::new(seed, 78).rng();
    let mut v: Vec<f64> = (0..n)
        .map(|i| {
            if allow_zero && i % 2 == 1 && rng.bernoulli(0.5) {
                0.0
            } else {
                rng.uniform_open0()
            }
        })
        .collect();
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

fn random_table(seed: u64, ns: usize, na: usize) -> PolicyTable {
    let probs = (0..ns).flat_map(|s| simplex(seed.wrapping_mul(31).wrapping_add(s as u64), na, false)).collect();
    PolicyTable::new(ns, na, probs).unwrap()
}

#[derive(Debug, Clone)]
struct Instance {
    mdp: FiniteMdp,
    features: FeatureMap,
    theta: DVector<f64>,
    rho: StateDistribution,
}

fn instance() -> impl Strategy<Value = Instance> {
    (2usize..6, 2usize..4, 0.1f64..0.95, any::<u64>(), 1usize..7).prop_map(
        |(ns, na, gamma, seed, dim)| {
            let mdp = generate_random_mdp(ns, na, gamma, seed).unwrap();
            let features = FeatureMap::gaussian(ns, na, dim, seed ^ 0x55).unwrap();
            let theta = DVector::from_vec(normals(seed, dim));
            let rho = StateDistribution::new(simplex(seed ^ 0x99, ns, false)).unwrap();
            Instance {
                mdp,
                features,
                theta,
                rho,
            }
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn performance_difference_holds(inst in instance(), s1 in any::<u64>(), s2 in any::<u64>()) {
        let (ns, na) = (inst.mdp.n_states(), inst.mdp.n_actions());
        let pi = random_table(s1, ns, na);
        let pi_prime = random_table(s2, ns, na);
        let (lhs, rhs) = performance_difference(&inst.mdp, &pi, &pi_prime, &inst.rho).unwrap();
        prop_assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn parameter_step_is_mirror_step(inst in instance(), eta in 0.01f64..5.0, ws in any::<u64>()) {
        let f = &inst.features;
        let table = policy_table(&inst.theta, f).unwrap();
        let w = DVector::from_vec(normals(ws, f.dim()));
        let next = policy_table(&(&inst.theta - &w * eta), f).unwrap();
        let raw = mirror_update_table(&table, f.matrix(), &w, eta).unwrap();
        let centered = mirror_update_table(&table, &center_design(f.matrix(), &table), &w, eta).unwrap();
        prop_assert!(next.max_abs_diff(&raw) < 1e-10);
        prop_assert!(next.max_abs_diff(&centered) < 1e-10);
    }

    #[test]
    fn natural_direction_is_compatible_minimizer(inst in instance()) {
        let f = &inst.features;
        let table = policy_table(&inst.theta, f).unwrap();
        let d_bar = state_action_visitation_bar(&inst.mdp, &table, &inst.rho).unwrap();
        let problem = compatible_problem(&inst.mdp, &table, f, d_bar, RegressionKind::Advantage).unwrap();
        let w_star = problem.minimizer();
        let dir = npg_direction_fisher(&inst.mdp, &inst.theta, f, &inst.rho).unwrap();
        let expected = w_star / (1.0 - inst.mdp.gamma());
        // Going through the gradient costs the square of the root's conditioning.
        let root = weighted_root(&center_design(f.matrix(), &table), problem.weights.probs());
        let sv = svd(&root).singular_values;
        let top = sv.max();
        let low = sv.iter().copied().filter(|&x| x > PINV_RCOND * top).fold(top, f64::min);
        let cond = if top > 0.0 { top / low } else { 1.0 };
        let tol = 1e-8 * (1.0 + expected.norm()) + 16.0 * f64::EPSILON * cond * cond * expected.norm();
        let err = (&dir - &expected).norm();
        prop_assert!(err < tol, "{err} vs {tol}");
    }

    #[test]
    fn gradient_matches_finite_differences(inst in instance()) {
        let f = &inst.features;
        let h = 1e-6;
        let value = |t: &DVector<f64>| {
            evaluate_policy(&inst.mdp, &policy_table(t, f).unwrap()).unwrap().value_at(&inst.rho)
        };
        let grad = policy_gradient(&inst.mdp, &inst.theta, f, &inst.rho).unwrap();
        let table = policy_table(&inst.theta, f).unwrap();
        let centered = center_design(f.matrix(), &table);
        for i in 0..f.dim() {
            let mut up = inst.theta.clone();
            let mut down = inst.theta.clone();
            up[i] += h;
            down[i] -= h;
            let fd = (value(&up) - value(&down)) / (2.0 * h);
            prop_assert!((fd - grad[i]).abs() < 1e-6 * (1.0 + grad[i].abs()), "coord {i}: {fd} vs {}", grad[i]);
            let lp_up = log_policy(&up, f).unwrap();
            let lp_down = log_policy(&down, f).unwrap();
            for p in 0..lp_up.len() {
                let fd = (lp_up[p] - lp_down[p]) / (2.0 * h);
                prop_assert!((fd - centered[(p, i)]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn second_moment_identity(rows in 3usize..12, dim in 1usize..6, seed in any::<u64>()) {
        let design = DMatrix::from_vec(rows, dim, normals(seed, rows * dim));
        let target = DVector::from_vec(normals(seed ^ 1, rows));
        let weights = StateActionDistribution::new(simplex(seed ^ 2, rows, true)).unwrap();
        let p = RegressionProblem::new(design, target, weights).unwrap();
        let w = DVector::from_vec(normals(seed ^ 3, dim));
        let (excess, quad) = second_moment_identity_check(&p, &w);
        prop_assert!((excess - quad).abs() < 1e-8 * (1.0 + quad.abs()), "{excess} vs {quad}");
    }

    #[test]
    fn mismatch_chain(inst in instance()) {
        let table = policy_table(&inst.theta, &inst.features).unwrap();
        let star = optimal_policy(&inst.mdp).unwrap();
        let d_star = state_visitation(&inst.mdp, &star, &inst.rho).unwrap();
        let (vk, vr) = mismatch_coefficients(&inst.mdp, &star, &table, &inst.rho).unwrap();
        prop_assert!(vk <= vr * (1.0 + 1e-12));
        let d0 = expected_kl(&d_star, &star, &PolicyTable::uniform(d_star.len(), table.n_actions())).unwrap();
        prop_assert!(d0 <= (table.n_actions() as f64).ln() + 1e-12);
    }

    #[test]
    fn transfer_error_is_controlled(inst in instance(), nus in any::<u64>()) {
        let (ns, na) = (inst.mdp.n_states(), inst.mdp.n_actions());
        let nu = StateActionDistribution::new(simplex(nus, ns * na, false)).unwrap();
        let table = policy_table(&inst.theta, &inst.features).unwrap();
        let star = optimal_policy(&inst.mdp).unwrap();
        let d_star = state_visitation(&inst.mdp, &star, &inst.rho).unwrap();
        let weights = state_action_visitation_tilde(&inst.mdp, &table, &nu).unwrap();
        for kind in [RegressionKind::Q, RegressionKind::Advantage] {
            let p = compatible_problem(&inst.mdp, &table, &inst.features, weights.clone(), kind).unwrap();
            let w = p.minimizer();
            let r = npg_core::regression::errors_with_problem(&p, &d_star, &w);
            let spread = StateActionDistribution::spread_uniform(&d_star, na);
            let ratio = max_ratio(spread.probs(), nu.probs()) / (1.0 - inst.mdp.gamma());
            prop_assert!(r.eps_bias <= ratio * r.eps_approx * (1.0 + 1e-9) + 1e-12);
        }
    }

    #[test]
    fn scaling_leaves_policy_path_and_kappa(inst in instance(), c in 0.1f64..10.0, nus in any::<u64>()) {
        let f = &inst.features;
        let g = f.scaled(c).unwrap();
        let scaled_theta = &inst.theta / c;
        let table = policy_table(&inst.theta, f).unwrap();
        prop_assert!(table.max_abs_diff(&policy_table(&scaled_theta, &g).unwrap()) < 1e-12);
        let d = npg_direction_fisher(&inst.mdp, &inst.theta, f, &inst.rho).unwrap();
        let dg = npg_direction_fisher(&inst.mdp, &scaled_theta, &g, &inst.rho).unwrap();
        prop_assert!((&d - &dg * c).norm() < 1e-7 * (1.0 + d.norm()));
        let (ns, na) = (f.n_states(), f.n_actions());
        let nu = StateActionDistribution::new(simplex(nus, ns * na, false)).unwrap();
        let star = optimal_policy(&inst.mdp).unwrap();
        let d_star = state_visitation(&inst.mdp, &star, &inst.rho).unwrap();
        let k1 = relative_condition_number(f, &d_star, &nu, na);
        let k2 = relative_condition_number(&g, &d_star, &nu, na);
        prop_assert!(k1 == k2 || (k1 - k2).abs() < 1e-8 * k1.max(1.0), "{k1} vs {k2}");
    }
}

#[test]
fn three_point_inequality_on_1000_draws() {
    for i in 0..1000u64 {
        let n = 2 + (i % 5) as usize;
        let q = simplex(i, n, false);
        let u = simplex(i ^ 0xabc, n, true);
        let g: Vec<f64> = normals(i, n).iter().map(|x| 3.0 * x).collect();
        let eta = 0.05 + (i % 17) as f64 * 0.4;
        let (lhs, rhs) = three_point_sides(&q, &g, eta, &u).unwrap();
        assert!(three_point_check(&q, &g, eta, &u), "draw {i}: {lhs} > {rhs}");
    }
}

#[test]
fn large_step_on_one_hot_is_policy_iteration() {
    for seed in 0..10 {
        let m = generate_random_mdp(5, 3, 0.9, seed).unwrap();
        let f = FeatureMap::one_hot(5, 3);
        let table = PolicyTable::uniform(5, 3);
        let q = evaluate_policy(&m, &table).unwrap().q;
        let w = DVector::from_vec(q.clone());
        let next = mirror_update_table(&table, f.matrix(), &w, 1e6).unwrap();
        let greedy = PolicyTable::greedy(5, 3, &q);
        assert!(next.max_abs_diff(&greedy) < 1e-9, "seed {seed}");
    }
}
