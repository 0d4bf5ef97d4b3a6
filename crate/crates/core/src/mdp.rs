//! Finite discounted MDPs with costs, plus deterministic instance generators.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Tolerance for row sums of probability vectors.
pub const SIMPLEX_TOL: f64 = 1e-12;

/// A finite discounted MDP `(S, A, P, c, gamma)` stored densely.
///
/// `transition` is row-major with shape `|S| x |A| x |S|`, `cost` has shape
/// `|S| x |A|`. Costs are minimized.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteMdp {
    n_states: usize,
    n_actions: usize,
    transition: Vec<f64>,
    cost: Vec<f64>,
    gamma: f64,
}

impl FiniteMdp {
    /// Builds and validates an MDP.
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        cost: Vec<f64>,
        gamma: f64,
    ) -> Result<Self> {
        let mdp = Self::new_unchecked(n_states, n_actions, transition, cost, gamma)?;
        mdp.validate()?;
        Ok(mdp)
    }

    /// Builds an MDP checking only array shapes; call [`FiniteMdp::validate`]
    /// before use.
    pub fn new_unchecked(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        cost: Vec<f64>,
        gamma: f64,
    ) -> Result<Self> {
        if n_states == 0 {
            return Err(Error::EmptySpace("n_states"));
        }
        if n_actions == 0 {
            return Err(Error::EmptySpace("n_actions"));
        }
        let sa = n_states * n_actions;
        if transition.len() != sa * n_states {
            return Err(Error::Dimension {
                what: "transition tensor length",
                expected: sa * n_states,
                actual: transition.len(),
            });
        }
        if cost.len() != sa {
            return Err(Error::Dimension {
                what: "cost matrix length",
                expected: sa,
                actual: cost.len(),
            });
        }
        Ok(Self {
            n_states,
            n_actions,
            transition,
            cost,
            gamma,
        })
    }

    /// Checks stochasticity of every transition row, the cost range and the
    /// discount. Reports the first violation found.
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Discount(self.gamma));
        }
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let row = self.transition_row(s, a);
                for (next, &p) in row.iter().enumerate() {
                    if !(p >= 0.0 && p.is_finite()) {
                        return Err(Error::TransitionEntry {
                            state: s,
                            action: a,
                            next,
                            value: p,
                        });
                    }
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > SIMPLEX_TOL {
                    return Err(Error::TransitionRowSum {
                        state: s,
                        action: a,
                        sum,
                    });
                }
                let c = self.cost(s, a);
                if !(0.0..=1.0).contains(&c) {
                    return Err(Error::CostRange {
                        state: s,
                        action: a,
                        value: c,
                    });
                }
            }
        }
        Ok(())
    }

    #[inline]
    pub fn n_states(&self) -> usize {
        self.n_states
    }

    #[inline]
    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    /// `|S| * |A|`.
    #[inline]
    pub fn n_pairs(&self) -> usize {
        self.n_states * self.n_actions
    }

    #[inline]
    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Row-major index of the pair `(s, a)`.
    #[inline]
    pub fn pair(&self, s: usize, a: usize) -> usize {
        s * self.n_actions + a
    }

    #[inline]
    pub fn cost(&self, s: usize, a: usize) -> f64 {
        self.cost[self.pair(s, a)]
    }

    /// `P(. | s, a)`.
    #[inline]
    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let start = self.pair(s, a) * self.n_states;
        &self.transition[start..start + self.n_states]
    }

    pub fn transition(&self) -> &[f64] {
        &self.transition
    }

    pub fn costs(&self) -> &[f64] {
        &self.cost
    }

    /// Same dynamics and costs with a different discount.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        let mut out = self.clone();
        out.gamma = gamma;
        out.validate()?;
        Ok(out)
    }
}

/// Random MDP: each row of `P` is a normalized vector of i.i.d. uniform draws
/// on `(0, 1]` (so every row has full support) and costs are i.i.d. uniform on
/// `[0, 1)`. Deterministic in `seed`.
pub fn generate_random_mdp(
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    seed: u64,
) -> Result<FiniteMdp> {
    if n_states == 0 {
        return Err(Error::EmptySpace("n_states"));
    }
    if n_actions == 0 {
        return Err(Error::EmptySpace("n_actions"));
    }
    let mut rng = RngStream::new(seed, 0x6d64_705f_6765_6e00).rng();
    let sa = n_states * n_actions;
    let mut transition = vec![0.0; sa * n_states];
    for row in transition.chunks_mut(n_states) {
        for p in row.iter_mut() {
            *p = rng.uniform_open0();
        }
        normalize(row);
    }
    let cost = (0..sa).map(|_| rng.uniform()).collect();
    FiniteMdp::new(n_states, n_actions, transition, cost, gamma)
}

/// Deterministic chain `0 - 1 - ... - (n-1)` with the goal at state 0.
///
/// Action 0 moves one step left (toward the goal), action 1 one step right
/// (the right end stays put). The goal is absorbing and costs 0; every other
/// state costs 1 under both actions.
pub fn generate_chain_mdp(n_states: usize, gamma: f64) -> Result<FiniteMdp> {
    if n_states < 2 {
        return Err(Error::Invalid("chain MDP needs at least 2 states".into()));
    }
    let n_actions = 2;
    let mut transition = vec![0.0; n_states * n_actions * n_states];
    let mut cost = vec![0.0; n_states * n_actions];
    for s in 0..n_states {
        for a in 0..n_actions {
            let next = if s == 0 {
                0
            } else if a == 0 {
                s - 1
            } else {
                (s + 1).min(n_states - 1)
            };
            transition[(s * n_actions + a) * n_states + next] = 1.0;
            cost[s * n_actions + a] = if s == 0 { 0.0 } else { 1.0 };
        }
    }
    FiniteMdp::new(n_states, n_actions, transition, cost, gamma)
}

fn normalize(v: &mut [f64]) {
    let sum: f64 = v.iter().sum();
    for x in v.iter_mut() {
        *x /= sum;
    }
}

fn check_simplex(what: &'static str, probs: &[f64]) -> Result<()> {
    let sum: f64 = probs.iter().sum();
    for (index, &value) in probs.iter().enumerate() {
        if !(value >= 0.0 && value.is_finite()) {
            return Err(Error::NotSimplex {
                what,
                index,
                value,
                sum,
            });
        }
    }
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::NotSimplex {
            what,
            index: 0,
            value: probs.first().copied().unwrap_or(0.0),
            sum,
        });
    }
    Ok(())
}

/// Distribution over states.
#[derive(Debug, Clone, PartialEq)]
pub struct StateDistribution(Vec<f64>);

impl StateDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        check_simplex("state distribution", &probs)?;
        Ok(Self(probs))
    }

    /// Clips round-off negatives and rescales to sum 1 before validating.
    pub fn renormalized(mut probs: Vec<f64>) -> Result<Self> {
        for p in probs.iter_mut() {
            if *p < 0.0 && *p > -1e-12 {
                *p = 0.0;
            }
        }
        normalize(&mut probs);
        Self::new(probs)
    }

    pub fn uniform(n_states: usize) -> Self {
        Self(vec![1.0 / n_states as f64; n_states])
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.0.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Distribution over state-action pairs, row-major by state.
#[derive(Debug, Clone, PartialEq)]
pub struct StateActionDistribution(Vec<f64>);

impl StateActionDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        check_simplex("state-action distribution", &probs)?;
        Ok(Self(probs))
    }

    pub fn renormalized(mut probs: Vec<f64>) -> Result<Self> {
        for p in probs.iter_mut() {
            if *p < 0.0 && *p > -1e-12 {
                *p = 0.0;
            }
        }
        normalize(&mut probs);
        Self::new(probs)
    }

    pub fn uniform(n_pairs: usize) -> Self {
        Self(vec![1.0 / n_pairs as f64; n_pairs])
    }

    /// `rho_s * pi_{s,a}`.
    pub fn product(rho: &StateDistribution, policy: &crate::oracle::PolicyTable) -> Result<Self> {
        let na = policy.n_actions();
        let probs = (0..rho.len() * na)
            .map(|i| rho.probs()[i / na] * policy.probs()[i])
            .collect();
        Self::renormalized(probs)
    }

    /// `d_s / |A|`, the state distribution spread uniformly over actions.
    pub fn spread_uniform(d: &StateDistribution, n_actions: usize) -> Self {
        let probs = (0..d.len() * n_actions)
            .map(|i| d.probs()[i / n_actions] / n_actions as f64)
            .collect();
        Self(probs)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.0.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Sum over actions.
    pub fn state_marginal(&self, n_actions: usize) -> Vec<f64> {
        self.0
            .chunks(n_actions)
            .map(|row| row.iter().sum())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_by_two(row: [f64; 2], cost: f64) -> Result<FiniteMdp> {
        let mut p = vec![0.5; 8];
        p[2] = row[0];
        p[3] = row[1];
        let mut c = vec![0.25; 4];
        c[3] = cost;
        FiniteMdp::new(2, 2, p, c, 0.9)
    }

    #[test]
    fn well_formed_two_by_two() {
        assert!(two_by_two([0.3, 0.7], 0.5).is_ok());
    }

    #[test]
    fn short_row_is_named() {
        let err = two_by_two([0.3, 0.6], 0.5).unwrap_err();
        match err {
            Error::TransitionRowSum { state, action, sum } => {
                assert_eq!((state, action), (0, 1));
                assert!((sum - 0.9).abs() < 1e-15);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn cost_out_of_range_is_named() {
        let err = two_by_two([0.3, 0.7], 1.5).unwrap_err();
        assert_eq!(
            err,
            Error::CostRange {
                state: 1,
                action: 1,
                value: 1.5
            }
        );
    }

    #[test]
    fn discount_must_be_below_one() {
        let m = generate_random_mdp(2, 2, 0.5, 1).unwrap();
        assert!(matches!(m.with_gamma(1.0), Err(Error::Discount(_))));
        assert!(matches!(m.with_gamma(-0.1), Err(Error::Discount(_))));
    }

    #[test]
    fn random_generator_is_deterministic() {
        let a = generate_random_mdp(2, 2, 0.9, 1).unwrap();
        let b = generate_random_mdp(2, 2, 0.9, 1).unwrap();
        assert_eq!(a, b);
        let c = generate_random_mdp(2, 2, 0.9, 2).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn random_rows_have_full_support() {
        let m = generate_random_mdp(20, 5, 0.9, 7).unwrap();
        assert!(m.transition().iter().all(|&p| p > 0.0));
        m.validate().unwrap();
    }

    #[test]
    fn chain_is_valid_and_goal_absorbing() {
        let m = generate_chain_mdp(5, 0.9).unwrap();
        m.validate().unwrap();
        assert_eq!(m.transition_row(0, 1)[0], 1.0);
        assert_eq!(m.transition_row(3, 0)[2], 1.0);
        assert_eq!(m.transition_row(4, 1)[4], 1.0);
        assert_eq!(m.cost(0, 0), 0.0);
        assert_eq!(m.cost(2, 1), 1.0);
    }

    #[test]
    fn distributions_reject_bad_vectors() {
        assert!(StateDistribution::new(vec![0.5, 0.6]).is_err());
        assert!(StateDistribution::new(vec![1.5, -0.5]).is_err());
        assert!(StateActionDistribution::new(vec![0.25; 4]).is_ok());
    }
}
