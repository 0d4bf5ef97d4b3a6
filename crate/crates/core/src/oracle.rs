//! Exact policy evaluation by dense linear solves.
//!
//! Everything sampled elsewhere in the crate is checked against these
//! routines: value, Q and advantage functions, the state and state-action
//! visitation distributions, and the policy-iteration optimum.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::solve_lu;
use crate::mdp::{FiniteMdp, StateActionDistribution, StateDistribution, SIMPLEX_TOL};

/// Hard stop for policy iteration; a finite MDP converges in far fewer sweeps.
const MAX_POLICY_ITERATIONS: usize = 10_000;

/// Actions whose Q-value is within this margin of the row minimum count as
/// tied; the lowest index among them wins.
const GREEDY_TIE_TOL: f64 = 1e-12;

/// A stochastic policy `pi_{s,a}`, one simplex row per state.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl PolicyTable {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions {
            return Err(Error::Dimension {
                what: "policy table length",
                expected: n_states * n_actions,
                actual: probs.len(),
            });
        }
        for (s, row) in probs.chunks(n_actions).enumerate() {
            let sum: f64 = row.iter().sum();
            let bad = row.iter().position(|&p| !(p >= 0.0 && p.is_finite()));
            if bad.is_some() || (sum - 1.0).abs() > SIMPLEX_TOL {
                let index = bad.unwrap_or(0);
                return Err(Error::NotSimplex {
                    what: "policy row",
                    index: s * n_actions + index,
                    value: row[index],
                    sum,
                });
            }
        }
        Ok(Self {
            n_states,
            n_actions,
            probs,
        })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    /// Deterministic policy taking `actions[s]` in state `s`.
    pub fn deterministic(n_actions: usize, actions: &[usize]) -> Self {
        let mut probs = vec![0.0; actions.len() * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            probs[s * n_actions + a] = 1.0;
        }
        Self {
            n_states: actions.len(),
            n_actions,
            probs,
        }
    }

    /// Greedy (argmin) policy with respect to a Q table; ties go to the lowest
    /// action index.
    pub fn greedy(n_states: usize, n_actions: usize, q: &[f64]) -> Self {
        let actions: Vec<usize> = q.chunks(n_actions).map(argmin_lowest).collect();
        debug_assert_eq!(actions.len(), n_states);
        Self::deterministic(n_actions, &actions)
    }

    #[inline]
    pub fn n_states(&self) -> usize {
        self.n_states
    }

    #[inline]
    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    #[inline]
    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    #[inline]
    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    /// Largest entrywise difference to another table of the same shape.
    pub fn max_abs_diff(&self, other: &PolicyTable) -> f64 {
        self.probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn check_for(&self, mdp: &FiniteMdp) -> Result<()> {
        if self.n_states != mdp.n_states() || self.n_actions != mdp.n_actions() {
            return Err(Error::Dimension {
                what: "policy shape (states * actions)",
                expected: mdp.n_pairs(),
                actual: self.n_states * self.n_actions,
            });
        }
        Ok(())
    }
}

fn argmin_lowest(row: &[f64]) -> usize {
    let min = row.iter().copied().fold(f64::INFINITY, f64::min);
    row.iter()
        .position(|&x| x <= min + GREEDY_TIE_TOL)
        .unwrap_or(0)
}

/// `V`, `Q` and `A = Q - V` of a policy.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueBundle {
    pub v: Vec<f64>,
    pub q: Vec<f64>,
    pub adv: Vec<f64>,
}

impl ValueBundle {
    /// `V_rho = sum_s rho_s V_s`.
    pub fn value_at(&self, rho: &StateDistribution) -> f64 {
        dot(rho.probs(), &self.v)
    }
}

/// State-to-state transition matrix `P^pi` under a policy.
pub fn policy_transition(mdp: &FiniteMdp, policy: &PolicyTable) -> DMatrix<f64> {
    let ns = mdp.n_states();
    let mut p = DMatrix::zeros(ns, ns);
    for s in 0..ns {
        for a in 0..mdp.n_actions() {
            let w = policy.prob(s, a);
            if w == 0.0 {
                continue;
            }
            for (next, &pr) in mdp.transition_row(s, a).iter().enumerate() {
                p[(s, next)] += w * pr;
            }
        }
    }
    p
}

/// Expected one-step cost `c^pi_s`.
pub fn policy_cost(mdp: &FiniteMdp, policy: &PolicyTable) -> DVector<f64> {
    DVector::from_iterator(
        mdp.n_states(),
        (0..mdp.n_states()).map(|s| {
            (0..mdp.n_actions())
                .map(|a| policy.prob(s, a) * mdp.cost(s, a))
                .sum::<f64>()
        }),
    )
}

fn resolvent(mdp: &FiniteMdp, policy: &PolicyTable) -> DMatrix<f64> {
    let ns = mdp.n_states();
    DMatrix::identity(ns, ns) - policy_transition(mdp, policy) * mdp.gamma()
}

/// Evaluates `V`, `Q`, `A` of `policy` by solving `(I - gamma P^pi) V = c^pi`.
pub fn evaluate_policy(mdp: &FiniteMdp, policy: &PolicyTable) -> Result<ValueBundle> {
    policy.check_for(mdp)?;
    let v = solve_lu(resolvent(mdp, policy), &policy_cost(mdp, policy))?;
    let v: Vec<f64> = v.iter().copied().collect();
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let mut q = vec![0.0; ns * na];
    let mut adv = vec![0.0; ns * na];
    for s in 0..ns {
        for a in 0..na {
            let i = mdp.pair(s, a);
            q[i] = mdp.cost(s, a) + mdp.gamma() * dot(mdp.transition_row(s, a), &v);
            adv[i] = q[i] - v[s];
        }
    }
    Ok(ValueBundle { v, q, adv })
}

/// Discounted state visitation `d^pi(rho) = (1 - gamma) rho^T (I - gamma P^pi)^{-1}`.
pub fn state_visitation(
    mdp: &FiniteMdp,
    policy: &PolicyTable,
    rho: &StateDistribution,
) -> Result<StateDistribution> {
    policy.check_for(mdp)?;
    check_len("rho", mdp.n_states(), rho.len())?;
    let rhs = DVector::from_iterator(
        rho.len(),
        rho.probs().iter().map(|&r| (1.0 - mdp.gamma()) * r),
    );
    let d = solve_lu(resolvent(mdp, policy).transpose(), &rhs)?;
    StateDistribution::renormalized(d.iter().copied().collect())
}

/// `d_bar_{s,a} = d^pi_s(rho) pi_{s,a}`.
pub fn state_action_visitation_bar(
    mdp: &FiniteMdp,
    policy: &PolicyTable,
    rho: &StateDistribution,
) -> Result<StateActionDistribution> {
    let d = state_visitation(mdp, policy, rho)?;
    StateActionDistribution::product(&d, policy)
}

/// Discounted state-action visitation started from `(s_0, a_0) ~ nu`.
///
/// Uses `d_tilde = (1 - gamma) nu + gamma d^pi(mu_1) * pi`, where `mu_1` is
/// the state distribution after the first transition. This is the same
/// quantity as `(1 - gamma) nu^T (I - gamma P_tilde^pi)^{-1}` at the cost of an
/// `|S| x |S|` solve instead of an `|S||A| x |S||A|` one.
pub fn state_action_visitation_tilde(
    mdp: &FiniteMdp,
    policy: &PolicyTable,
    nu: &StateActionDistribution,
) -> Result<StateActionDistribution> {
    policy.check_for(mdp)?;
    check_len("nu", mdp.n_pairs(), nu.len())?;
    let (ns, na, gamma) = (mdp.n_states(), mdp.n_actions(), mdp.gamma());
    let mut mu1 = vec![0.0; ns];
    for s in 0..ns {
        for a in 0..na {
            let w = nu.probs()[mdp.pair(s, a)];
            if w == 0.0 {
                continue;
            }
            for (next, &p) in mdp.transition_row(s, a).iter().enumerate() {
                mu1[next] += w * p;
            }
        }
    }
    let mu1 = StateDistribution::renormalized(mu1)?;
    let d1 = state_visitation(mdp, policy, &mu1)?;
    let probs = (0..ns * na)
        .map(|i| (1.0 - gamma) * nu.probs()[i] + gamma * d1.probs()[i / na] * policy.probs()[i])
        .collect();
    StateActionDistribution::renormalized(probs)
}

/// A state distribution `rho` with `d^pi(rho) = rho`, i.e. the stationary
/// distribution of `P^pi`. Solved with one normalization row replacing an
/// equation of `rho (I - P^pi) = 0`.
pub fn visitation_fixed_point(mdp: &FiniteMdp, policy: &PolicyTable) -> Result<StateDistribution> {
    policy.check_for(mdp)?;
    let ns = mdp.n_states();
    let mut a = (DMatrix::identity(ns, ns) - policy_transition(mdp, policy)).transpose();
    for j in 0..ns {
        a[(ns - 1, j)] = 1.0;
    }
    let mut b = DVector::zeros(ns);
    b[ns - 1] = 1.0;
    let x = solve_lu(a, &b)?;
    StateDistribution::renormalized(x.iter().copied().collect())
}

/// Deterministic optimal policy by exact policy iteration from the
/// all-zeros-action policy; greedy steps break ties toward the lowest index.
pub fn optimal_policy(mdp: &FiniteMdp) -> Result<PolicyTable> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let mut policy = PolicyTable::deterministic(na, &vec![0; ns]);
    for _ in 0..MAX_POLICY_ITERATIONS {
        let values = evaluate_policy(mdp, &policy)?;
        let next = PolicyTable::greedy(ns, na, &values.q);
        if next == policy {
            return Ok(policy);
        }
        policy = next;
    }
    Ok(policy)
}

/// Both sides of the performance difference identity:
/// `V_rho(pi) - V_rho(pi')` and `E_{(s,a) ~ d_bar^pi}[A_{s,a}(pi')] / (1 - gamma)`.
pub fn performance_difference(
    mdp: &FiniteMdp,
    pi: &PolicyTable,
    pi_prime: &PolicyTable,
    rho: &StateDistribution,
) -> Result<(f64, f64)> {
    let v_pi = evaluate_policy(mdp, pi)?;
    let v_prime = evaluate_policy(mdp, pi_prime)?;
    let lhs = v_pi.value_at(rho) - v_prime.value_at(rho);
    let d_bar = state_action_visitation_bar(mdp, pi, rho)?;
    let rhs = dot(d_bar.probs(), &v_prime.adv) / (1.0 - mdp.gamma());
    Ok((lhs, rhs))
}

/// Optimality gap `V_rho(policy) - V_rho(comparator)`.
pub fn value_gap(
    mdp: &FiniteMdp,
    policy: &PolicyTable,
    comparator: &PolicyTable,
    rho: &StateDistribution,
) -> Result<f64> {
    Ok(evaluate_policy(mdp, policy)?.value_at(rho) - evaluate_policy(mdp, comparator)?.value_at(rho))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::Dimension {
            what,
            expected,
            actual,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{generate_chain_mdp, generate_random_mdp};

    /// Truncated power series `sum_{t<=T} gamma^t (P^pi)^t c^pi`.
    fn truncated_values(mdp: &FiniteMdp, pi: &PolicyTable, horizon: usize) -> Vec<f64> {
        let p = policy_transition(mdp, pi);
        let mut term = policy_cost(mdp, pi);
        let mut acc = term.clone();
        for _ in 0..horizon {
            term = &p * term * mdp.gamma();
            acc += &term;
        }
        acc.iter().copied().collect()
    }

    /// Truncated `(1 - gamma) sum_t gamma^t mu_t` over state-action pairs.
    fn truncated_tilde(mdp: &FiniteMdp, pi: &PolicyTable, nu: &[f64], horizon: usize) -> Vec<f64> {
        let (ns, na) = (mdp.n_states(), mdp.n_actions());
        let mut cur = nu.to_vec();
        let mut acc = vec![0.0; ns * na];
        let mut w = 1.0 - mdp.gamma();
        for _ in 0..=horizon {
            for i in 0..ns * na {
                acc[i] += w * cur[i];
            }
            let mut next = vec![0.0; ns * na];
            for s in 0..ns {
                for a in 0..na {
                    let m = cur[s * na + a];
                    for (s2, &p) in mdp.transition_row(s, a).iter().enumerate() {
                        for a2 in 0..na {
                            next[s2 * na + a2] += m * p * pi.prob(s2, a2);
                        }
                    }
                }
            }
            cur = next;
            w *= mdp.gamma();
        }
        acc
    }

    fn value_iteration(mdp: &FiniteMdp, tol: f64) -> Vec<f64> {
        let (ns, na) = (mdp.n_states(), mdp.n_actions());
        let mut v = vec![0.0; ns];
        loop {
            let next: Vec<f64> = (0..ns)
                .map(|s| {
                    (0..na)
                        .map(|a| mdp.cost(s, a) + mdp.gamma() * dot(mdp.transition_row(s, a), &v))
                        .fold(f64::INFINITY, f64::min)
                })
                .collect();
            let diff = next
                .iter()
                .zip(&v)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            v = next;
            if diff < tol {
                return v;
            }
        }
    }

    fn random_policy(ns: usize, na: usize, seed: u64) -> PolicyTable {
        let mut rng = crate::rng::RngStream::new(seed, 99).rng();
        let mut probs: Vec<f64> = (0..ns * na).map(|_| rng.uniform_open0()).collect();
        for row in probs.chunks_mut(na) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= s);
        }
        PolicyTable::new(ns, na, probs).unwrap()
    }

    #[test]
    fn zero_cost_gives_zero_values() {
        let m = generate_random_mdp(3, 2, 0.9, 4).unwrap();
        let m = FiniteMdp::new(3, 2, m.transition().to_vec(), vec![0.0; 6], 0.9).unwrap();
        let vb = evaluate_policy(&m, &PolicyTable::uniform(3, 2)).unwrap();
        assert!(vb.v.iter().chain(&vb.q).chain(&vb.adv).all(|&x| x == 0.0));
    }

    #[test]
    fn single_state_geometric_series() {
        let m = FiniteMdp::new(1, 1, vec![1.0], vec![1.0], 0.9).unwrap();
        let vb = evaluate_policy(&m, &PolicyTable::uniform(1, 1)).unwrap();
        assert!((vb.v[0] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn values_match_truncated_series() {
        let m = generate_random_mdp(4, 3, 0.9, 11).unwrap();
        let pi = PolicyTable::uniform(4, 3);
        let vb = evaluate_policy(&m, &pi).unwrap();
        let oracle = truncated_values(&m, &pi, 2000);
        for (a, b) in vb.v.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn value_bundle_invariants() {
        let m = generate_random_mdp(5, 4, 0.95, 3).unwrap();
        let pi = random_policy(5, 4, 1);
        let vb = evaluate_policy(&m, &pi).unwrap();
        for s in 0..5 {
            let vq = dot(pi.row(s), &vb.q[s * 4..s * 4 + 4]);
            assert!((vq - vb.v[s]).abs() < 1e-10);
            let ea = dot(pi.row(s), &vb.adv[s * 4..s * 4 + 4]);
            assert!(ea.abs() < 1e-10);
        }
        let qmax = 1.0 / (1.0 - 0.95);
        assert!(vb.q.iter().all(|&q| (0.0..=qmax).contains(&q)));
    }

    #[test]
    fn zero_discount_visitation_is_start() {
        let m = generate_random_mdp(3, 2, 0.0, 5).unwrap();
        let pi = random_policy(3, 2, 2);
        let rho = StateDistribution::new(vec![0.2, 0.3, 0.5]).unwrap();
        let d = state_visitation(&m, &pi, &rho).unwrap();
        for (a, b) in d.probs().iter().zip(rho.probs()) {
            assert!((a - b).abs() < 1e-15);
        }
        let db = state_action_visitation_bar(&m, &pi, &rho).unwrap();
        for i in 0..6 {
            assert!((db.probs()[i] - rho.probs()[i / 2] * pi.probs()[i]).abs() < 1e-15);
        }
        let nu = StateActionDistribution::new(vec![0.1, 0.2, 0.3, 0.1, 0.2, 0.1]).unwrap();
        let dt = state_action_visitation_tilde(&m, &pi, &nu).unwrap();
        for (a, b) in dt.probs().iter().zip(nu.probs()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn visitation_lower_bounds() {
        for seed in 0..20 {
            let m = generate_random_mdp(4, 3, 0.8, seed).unwrap();
            let pi = random_policy(4, 3, seed + 100);
            let rho = StateDistribution::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
            let d = state_visitation(&m, &pi, &rho).unwrap();
            let db = state_action_visitation_bar(&m, &pi, &rho).unwrap();
            for s in 0..4 {
                assert!(d.probs()[s] >= 0.2 * rho.probs()[s] - 1e-15);
                for a in 0..3 {
                    assert!(db.probs()[s * 3 + a] >= 0.2 * rho.probs()[s] * pi.prob(s, a) - 1e-15);
                }
            }
            let nu = StateActionDistribution::uniform(12);
            let dt = state_action_visitation_tilde(&m, &pi, &nu).unwrap();
            assert!(dt.probs().iter().all(|&x| x >= 0.2 / 12.0 - 1e-15));
        }
    }

    #[test]
    fn chain_visitation_matches_truncated_sum() {
        let m = generate_chain_mdp(3, 0.9).unwrap();
        let pi = random_policy(3, 2, 8);
        let rho = StateDistribution::new(vec![0.2, 0.3, 0.5]).unwrap();
        let d = state_visitation(&m, &pi, &rho).unwrap();
        let nu: Vec<f64> = (0..6).map(|i| rho.probs()[i / 2] * pi.probs()[i]).collect();
        let oracle = truncated_tilde(&m, &pi, &nu, 2000);
        for s in 0..3 {
            let marg = oracle[2 * s] + oracle[2 * s + 1];
            assert!((d.probs()[s] - marg).abs() < 1e-10);
        }
    }

    #[test]
    fn tilde_matches_truncated_sum_and_bar_marginal() {
        let m = generate_random_mdp(3, 2, 0.9, 21).unwrap();
        let pi = random_policy(3, 2, 5);
        let nu = StateActionDistribution::new(vec![0.05, 0.25, 0.1, 0.3, 0.2, 0.1]).unwrap();
        let dt = state_action_visitation_tilde(&m, &pi, &nu).unwrap();
        let oracle = truncated_tilde(&m, &pi, nu.probs(), 2000);
        for (a, b) in dt.probs().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-10);
        }

        // Starting tilde from nu = rho * pi reproduces d_bar.
        let rho = StateDistribution::new(vec![0.5, 0.2, 0.3]).unwrap();
        let nu = StateActionDistribution::product(&rho, &pi).unwrap();
        let dt = state_action_visitation_tilde(&m, &pi, &nu).unwrap();
        let db = state_action_visitation_bar(&m, &pi, &rho).unwrap();
        for (a, b) in dt.probs().iter().zip(db.probs()) {
            assert!((a - b).abs() < 1e-10);
        }
        let d = state_visitation(&m, &pi, &rho).unwrap();
        for (a, b) in dt.state_marginal(2).iter().zip(d.probs()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn tilde_matches_pair_space_solve() {
        let m = generate_random_mdp(4, 3, 0.9, 2).unwrap();
        let pi = random_policy(4, 3, 3);
        let nu = StateActionDistribution::uniform(12);
        let n = 12;
        let mut big = DMatrix::<f64>::identity(n, n);
        for s in 0..4 {
            for a in 0..3 {
                for (s2, &p) in m.transition_row(s, a).iter().enumerate() {
                    for a2 in 0..3 {
                        big[(s * 3 + a, s2 * 3 + a2)] -= 0.9 * p * pi.prob(s2, a2);
                    }
                }
            }
        }
        let rhs = DVector::from_iterator(n, nu.probs().iter().map(|x| 0.1 * x));
        let x = solve_lu(big.transpose(), &rhs).unwrap();
        let dt = state_action_visitation_tilde(&m, &pi, &nu).unwrap();
        for i in 0..n {
            assert!((x[i] - dt.probs()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn chain_optimum_points_to_goal() {
        for n in [2, 5] {
            let m = generate_chain_mdp(n, 0.9).unwrap();
            let pi = optimal_policy(&m).unwrap();
            for s in 0..n {
                assert_eq!(pi.prob(s, 0), 1.0);
            }
            let v = evaluate_policy(&m, &pi).unwrap().v;
            assert!(v[0].abs() < 1e-12);
            for (s, vs) in v.iter().enumerate().skip(1) {
                let expected = (1.0 - 0.9f64.powi(s as i32)) / 0.1;
                assert!((vs - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn chain_values_agree_with_value_iteration() {
        let m = generate_chain_mdp(5, 0.9).unwrap();
        let v = evaluate_policy(&m, &optimal_policy(&m).unwrap()).unwrap().v;
        let vi = value_iteration(&m, 1e-13);
        for (a, b) in v.iter().zip(&vi) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn single_state_optimum_takes_cheapest_action() {
        let m = FiniteMdp::new(1, 3, vec![1.0; 3], vec![0.7, 0.2, 0.5], 0.9).unwrap();
        let pi = optimal_policy(&m).unwrap();
        assert_eq!(pi.row(0), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn random_optimum_matches_value_iteration_and_is_fixed_point() {
        let m = generate_random_mdp(6, 4, 0.9, 17).unwrap();
        let pi = optimal_policy(&m).unwrap();
        let vb = evaluate_policy(&m, &pi).unwrap();
        let vi = value_iteration(&m, 1e-13);
        for (a, b) in vb.v.iter().zip(&vi) {
            assert!((a - b).abs() < 1e-10);
        }
        assert_eq!(PolicyTable::greedy(6, 4, &vb.q), pi);
    }

    #[test]
    fn performance_difference_identity() {
        let m = generate_random_mdp(4, 3, 0.9, 31).unwrap();
        let rho = StateDistribution::uniform(4);
        let pi = random_policy(4, 3, 1);
        let (l, r) = performance_difference(&m, &pi, &pi, &rho).unwrap();
        assert!(l.abs() < 1e-12 && r.abs() < 1e-12);
        let pi2 = random_policy(4, 3, 2);
        let (l, r) = performance_difference(&m, &pi, &pi2, &rho).unwrap();
        assert!((l - r).abs() < 1e-10);
        let star = optimal_policy(&m).unwrap();
        let (l, r) = performance_difference(&m, &star, &PolicyTable::uniform(4, 3), &rho).unwrap();
        assert!(l <= 0.0 && r <= 1e-12);
    }

    #[test]
    fn fixed_point_distribution_is_stationary() {
        let m = generate_random_mdp(5, 3, 0.9, 4).unwrap();
        let pi = optimal_policy(&m).unwrap();
        let rho = visitation_fixed_point(&m, &pi).unwrap();
        let d = state_visitation(&m, &pi, &rho).unwrap();
        for (a, b) in d.probs().iter().zip(rho.probs()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let m = generate_random_mdp(3, 2, 0.9, 1).unwrap();
        assert!(matches!(
            evaluate_policy(&m, &PolicyTable::uniform(2, 2)),
            Err(Error::Dimension { .. })
        ));
    }
}
