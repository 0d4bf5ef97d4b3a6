//! Geometric-horizon rollout samplers and averaged SGD on their output.
//!
//! A rollout first walks the chain from `(s_0, a_0) ~ nu`, continuing with
//! probability `gamma` per step, and accepts the pair where it stops; the
//! accepted pair is distributed as the discounted visitation `d_tilde(nu)`.
//! A second geometric walk from the accepted pair sums undiscounted costs,
//! which is an unbiased estimate of `Q`. The advantage sampler adds a third
//! walk from the accepted state for `V`.

use alloc::vec::Vec;
use core::ops::Range;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::mdp::{FiniteMdp, StateActionDistribution};
use crate::oracle::PolicyTable;
use crate::policy::{center_design, policy_table, FeatureMap};
use crate::regression::{compatible_problem, RegressionKind, RegressionSolution};
use crate::oracle::state_action_visitation_tilde;
use crate::rng::{RngStream, StreamRng};

/// Optional per-rollout step limit; reaching it is a hard error.
pub const SAFETY_CAP: u64 = 1_000_000;

/// Number of rollouts drawn ahead of the SGD recursion at a time.
const PREFETCH_CHUNK: usize = 4096;

/// One accepted pair with its return estimates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutSample {
    pub state: usize,
    pub action: usize,
    pub q_hat: f64,
    /// Present for advantage rollouts only.
    pub v_hat: Option<f64>,
    /// Index `h` of the accepted step.
    pub accept_time: u64,
    /// Environment steps (visited pairs) consumed by all walks.
    pub trajectory_len: u64,
}

impl RolloutSample {
    /// `Q_hat - V_hat`, or `Q_hat` for a Q-only rollout.
    pub fn a_hat(&self) -> f64 {
        self.q_hat - self.v_hat.unwrap_or(0.0)
    }

    /// Regression target for the given kind.
    pub fn target(&self, kind: RegressionKind) -> f64 {
        match kind {
            RegressionKind::Q => self.q_hat,
            RegressionKind::Advantage => self.a_hat(),
        }
    }
}

/// A policy frozen for sampling from a start distribution.
#[derive(Debug, Clone)]
pub struct Sampler<'a> {
    mdp: &'a FiniteMdp,
    policy: PolicyTable,
    nu: &'a StateActionDistribution,
    step_cap: Option<u64>,
}

impl<'a> Sampler<'a> {
    pub fn new(mdp: &'a FiniteMdp, policy: PolicyTable, nu: &'a StateActionDistribution) -> Result<Self> {
        if policy.n_states() != mdp.n_states() || policy.n_actions() != mdp.n_actions() {
            return Err(Error::Dimension {
                what: "sampler policy shape",
                expected: mdp.n_pairs(),
                actual: policy.probs().len(),
            });
        }
        if nu.len() != mdp.n_pairs() {
            return Err(Error::Dimension {
                what: "nu length",
                expected: mdp.n_pairs(),
                actual: nu.len(),
            });
        }
        Ok(Self {
            mdp,
            policy,
            nu,
            step_cap: None,
        })
    }

    /// Sampler for the log-linear policy `pi(theta)`.
    pub fn for_theta(
        mdp: &'a FiniteMdp,
        theta: &DVector<f64>,
        features: &FeatureMap,
        nu: &'a StateActionDistribution,
    ) -> Result<Self> {
        Self::new(mdp, policy_table(theta, features)?, nu)
    }

    pub fn with_step_cap(mut self, cap: Option<u64>) -> Self {
        self.step_cap = cap;
        self
    }

    pub fn policy(&self) -> &PolicyTable {
        &self.policy
    }

    pub fn mdp(&self) -> &FiniteMdp {
        self.mdp
    }

    fn step(&self, s: usize, a: usize, rng: &mut StreamRng) -> (usize, usize) {
        let next = rng.categorical(self.mdp.transition_row(s, a));
        (next, rng.categorical(self.policy.row(next)))
    }

    fn charge(&self, used: &mut u64) -> Result<()> {
        *used += 1;
        match self.step_cap {
            Some(cap) if *used > cap => Err(Error::HorizonCap { cap }),
            _ => Ok(()),
        }
    }

    /// Accept-phase plus Q-phase, returning `(s_h, a_h, h, q_hat, steps)`.
    fn accept_and_q(&self, rng: &mut StreamRng) -> Result<(usize, usize, u64, f64, u64)> {
        let gamma = self.mdp.gamma();
        let na = self.mdp.n_actions();
        let start = rng.categorical(self.nu.probs());
        let (mut s, mut a) = (start / na, start % na);
        let mut used = 0;
        self.charge(&mut used)?;
        let mut h = 0;
        while rng.bernoulli(gamma) {
            (s, a) = self.step(s, a, rng);
            h += 1;
            self.charge(&mut used)?;
        }
        let (s_h, a_h) = (s, a);
        let mut q_hat = self.mdp.cost(s, a);
        while rng.bernoulli(gamma) {
            (s, a) = self.step(s, a, rng);
            q_hat += self.mdp.cost(s, a);
            self.charge(&mut used)?;
        }
        Ok((s_h, a_h, h, q_hat, used))
    }

    pub fn sample_q(&self, rng: &mut StreamRng) -> Result<RolloutSample> {
        let (state, action, accept_time, q_hat, used) = self.accept_and_q(rng)?;
        Ok(RolloutSample {
            state,
            action,
            q_hat,
            v_hat: None,
            accept_time,
            trajectory_len: used,
        })
    }

    pub fn sample_a(&self, rng: &mut StreamRng) -> Result<RolloutSample> {
        let (state, action, accept_time, q_hat, mut used) = self.accept_and_q(rng)?;
        let gamma = self.mdp.gamma();
        let mut s = state;
        let mut v_hat = 0.0;
        loop {
            let a = rng.categorical(self.policy.row(s));
            v_hat += self.mdp.cost(s, a);
            self.charge(&mut used)?;
            if !rng.bernoulli(gamma) {
                break;
            }
            s = rng.categorical(self.mdp.transition_row(s, a));
        }
        Ok(RolloutSample {
            state,
            action,
            q_hat,
            v_hat: Some(v_hat),
            accept_time,
            trajectory_len: used,
        })
    }

    pub fn sample(&self, kind: RegressionKind, rng: &mut StreamRng) -> Result<RolloutSample> {
        match kind {
            RegressionKind::Q => self.sample_q(rng),
            RegressionKind::Advantage => self.sample_a(rng),
        }
    }
}

/// `sample_q` for `pi(theta)` with an explicit stream.
pub fn sample_q(
    mdp: &FiniteMdp,
    theta: &DVector<f64>,
    features: &FeatureMap,
    nu: &StateActionDistribution,
    rng: &mut StreamRng,
) -> Result<RolloutSample> {
    Sampler::for_theta(mdp, theta, features, nu)?.sample_q(rng)
}

/// `sample_a` for `pi(theta)` with an explicit stream.
pub fn sample_a(
    mdp: &FiniteMdp,
    theta: &DVector<f64>,
    features: &FeatureMap,
    nu: &StateActionDistribution,
    rng: &mut StreamRng,
) -> Result<RolloutSample> {
    Sampler::for_theta(mdp, theta, features, nu)?.sample_a(rng)
}

/// Draws the rollouts with indices `range` of outer iteration `iteration`.
///
/// Rollout `t` always uses stream `(seed, iteration, t)`, so any
/// implementation returns the same samples in the same order.
pub trait SampleProvider {
    fn draw(
        &self,
        sampler: &Sampler<'_>,
        kind: RegressionKind,
        seed: u64,
        iteration: u64,
        range: Range<usize>,
    ) -> Result<Vec<RolloutSample>>;
}

/// Single-threaded provider.
#[derive(Debug, Clone, Copy, Default)]
pub struct SequentialProvider;

impl SampleProvider for SequentialProvider {
    fn draw(
        &self,
        sampler: &Sampler<'_>,
        kind: RegressionKind,
        seed: u64,
        iteration: u64,
        range: Range<usize>,
    ) -> Result<Vec<RolloutSample>> {
        range
            .map(|t| {
                let mut rng = RngStream::for_sample(seed, iteration, t as u64).rng();
                sampler.sample(kind, &mut rng)
            })
            .collect()
    }
}

/// Averaged-SGD settings.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdConfig {
    pub n_steps: usize,
    pub step_size: f64,
    /// Starting point; zero when absent.
    pub init: Option<DVector<f64>>,
    pub seed: u64,
    /// Outer iteration index, used only to key random streams.
    pub iteration: u64,
}

impl SgdConfig {
    pub fn new(n_steps: usize, step_size: f64, seed: u64) -> Self {
        Self {
            n_steps,
            step_size,
            init: None,
            seed,
            iteration: 0,
        }
    }

    /// `alpha = 1 / (2 B^2)` for the Q regression.
    pub fn q_default(n_steps: usize, b_norm: f64, seed: u64) -> Self {
        Self::new(n_steps, 1.0 / (2.0 * b_norm * b_norm), seed)
    }

    /// `alpha = 1 / (8 B^2)` for the advantage regression.
    pub fn advantage_default(n_steps: usize, b_norm: f64, seed: u64) -> Self {
        Self::new(n_steps, 1.0 / (8.0 * b_norm * b_norm), seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::SgdConfig("number of steps must be at least 1"));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::SgdConfig("step size must be positive and finite"));
        }
        Ok(())
    }

    /// Step size on `f = L / 2` that the same update amounts to.
    pub fn half_loss_step(&self) -> f64 {
        2.0 * self.step_size
    }
}

/// Averaged iterate and sampling cost of one SGD run.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdOutput {
    pub w: DVector<f64>,
    pub env_steps: u64,
}

/// Runs `w <- w - alpha * 2 (w^T x - y) x` on fresh rollouts and returns the
/// average of `w_1 .. w_T`. `design` supplies `x` per pair.
pub fn averaged_sgd<P: SampleProvider + ?Sized>(
    sampler: &Sampler<'_>,
    design: &DMatrix<f64>,
    kind: RegressionKind,
    config: &SgdConfig,
    provider: &P,
) -> Result<SgdOutput> {
    config.validate()?;
    let m = design.ncols();
    let mut w = match &config.init {
        Some(w0) if w0.len() != m => {
            return Err(Error::Dimension {
                what: "SGD initial point",
                expected: m,
                actual: w0.len(),
            })
        }
        Some(w0) => w0.clone(),
        None => DVector::zeros(m),
    };
    let na = sampler.mdp().n_actions();
    let mut sum = DVector::zeros(m);
    let mut env_steps = 0u64;
    let mut start = 0;
    while start < config.n_steps {
        let end = (start + PREFETCH_CHUNK).min(config.n_steps);
        let batch = provider.draw(sampler, kind, config.seed, config.iteration, start..end)?;
        for (offset, sample) in batch.iter().enumerate() {
            let x = design.row(sample.state * na + sample.action);
            let r = (x * &w)[(0, 0)] - sample.target(kind);
            w.axpy(-2.0 * config.step_size * r, &x.transpose(), 1.0);
            if w.iter().any(|v| !v.is_finite()) {
                return Err(Error::SgdDiverged {
                    step: start + offset,
                    step_size: config.step_size,
                });
            }
            sum += &w;
            env_steps += sample.trajectory_len;
        }
        start = end;
    }
    Ok(SgdOutput {
        w: sum / config.n_steps as f64,
        env_steps,
    })
}

/// SGD on the Q regression for `pi(theta)`, scored against the exact loss
/// under `d_tilde(nu)`.
pub fn qnpg_sgd(
    mdp: &FiniteMdp,
    theta: &DVector<f64>,
    features: &FeatureMap,
    nu: &StateActionDistribution,
    config: &SgdConfig,
) -> Result<RegressionSolution> {
    sgd_scored(mdp, theta, features, nu, config, RegressionKind::Q)
}

/// SGD on the advantage regression (centered features, `A_hat` targets).
pub fn npg_sgd(
    mdp: &FiniteMdp,
    theta: &DVector<f64>,
    features: &FeatureMap,
    nu: &StateActionDistribution,
    config: &SgdConfig,
) -> Result<RegressionSolution> {
    sgd_scored(mdp, theta, features, nu, config, RegressionKind::Advantage)
}

fn sgd_scored(
    mdp: &FiniteMdp,
    theta: &DVector<f64>,
    features: &FeatureMap,
    nu: &StateActionDistribution,
    config: &SgdConfig,
    kind: RegressionKind,
) -> Result<RegressionSolution> {
    let sampler = Sampler::for_theta(mdp, theta, features, nu)?;
    let design = match kind {
        RegressionKind::Q => features.matrix().clone(),
        RegressionKind::Advantage => center_design(features.matrix(), sampler.policy()),
    };
    let out = averaged_sgd(&sampler, &design, kind, config, &SequentialProvider)?;
    let weights = state_action_visitation_tilde(mdp, sampler.policy(), nu)?;
    let problem = compatible_problem(mdp, sampler.policy(), features, weights, kind)?;
    Ok(problem.assess(out.w))
}

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub count: usize,
}

impl MeanEstimate {
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: 0.0,
                stderr: 0.0,
                count: 0,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Self {
            mean,
            stderr: libm::sqrt(var / n as f64),
            count: n,
        }
    }

    /// `|mean - target| <= k * stderr`, with a tiny floor for zero-variance
    /// samples.
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.mean - target).abs() <= k * self.stderr + 1e-12
    }
}

/// Empirical `E[Q_hat^2]` over `n_draws` Q rollouts, streams keyed by `seed`.
pub fn estimate_q_hat_second_moment(
    mdp: &FiniteMdp,
    theta: &DVector<f64>,
    features: &FeatureMap,
    nu: &StateActionDistribution,
    n_draws: usize,
    seed: u64,
) -> Result<MeanEstimate> {
    let sampler = Sampler::for_theta(mdp, theta, features, nu)?;
    let draws = SequentialProvider.draw(&sampler, RegressionKind::Q, seed, 0, 0..n_draws)?;
    let squares: Vec<f64> = draws.iter().map(|d| d.q_hat * d.q_hat).collect();
    Ok(MeanEstimate::from_values(&squares))
}

/// One stochastic gradient `2 (w^T x - y) x` of the regression loss.
pub fn stochastic_gradient(
    sample: &RolloutSample,
    design: &DMatrix<f64>,
    n_actions: usize,
    w: &DVector<f64>,
    kind: RegressionKind,
) -> DVector<f64> {
    let x = design.row(sample.state * n_actions + sample.action).transpose();
    let r = x.dot(w) - sample.target(kind);
    x * (2.0 * r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::generate_random_mdp;
    use alloc::vec;

    #[test]
    fn zero_discount_accepts_start() {
        let m = generate_random_mdp(3, 2, 0.0, 1).unwrap();
        let nu = StateActionDistribution::new(vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let s = Sampler::new(&m, PolicyTable::uniform(3, 2), &nu).unwrap();
        for t in 0..50 {
            let mut rng = RngStream::new(3, t).rng();
            let q = s.sample_q(&mut rng).unwrap();
            assert_eq!((q.state, q.action, q.accept_time), (1, 1, 0));
            assert_eq!(q.q_hat, m.cost(1, 1));
            assert_eq!(q.trajectory_len, 1);
            let a = s.sample_a(&mut rng).unwrap();
            let v = a.v_hat.unwrap();
            assert!(v == m.cost(1, 0) || v == m.cost(1, 1));
            assert_eq!(a.a_hat(), m.cost(1, 1) - v);
        }
    }

    #[test]
    fn step_cap_is_hard_error() {
        let m = generate_random_mdp(2, 2, 0.999, 1).unwrap();
        let nu = StateActionDistribution::uniform(4);
        let s = Sampler::new(&m, PolicyTable::uniform(2, 2), &nu)
            .unwrap()
            .with_step_cap(Some(1));
        let hit = (0..200).any(|t| {
            matches!(
                s.sample_q(&mut RngStream::new(0, t).rng()),
                Err(Error::HorizonCap { cap: 1 })
            )
        });
        assert!(hit);
    }

    #[test]
    fn trajectory_len_covers_accept_time() {
        let m = generate_random_mdp(3, 2, 0.9, 2).unwrap();
        let nu = StateActionDistribution::uniform(6);
        let s = Sampler::new(&m, PolicyTable::uniform(3, 2), &nu).unwrap();
        for t in 0..500 {
            let x = s.sample_a(&mut RngStream::new(1, t).rng()).unwrap();
            assert!(x.trajectory_len > x.accept_time);
            assert!(x.q_hat >= 0.0);
        }
    }

    #[test]
    fn zero_cost_sgd_stays_at_zero() {
        let m = generate_random_mdp(3, 2, 0.9, 2).unwrap();
        let m = FiniteMdp::new(3, 2, m.transition().to_vec(), vec![0.0; 6], 0.9).unwrap();
        let f = FeatureMap::one_hot(3, 2);
        let nu = StateActionDistribution::uniform(6);
        let sol = qnpg_sgd(&m, &DVector::zeros(6), &f, &nu, &SgdConfig::q_default(200, 1.0, 4)).unwrap();
        assert_eq!(sol.w.norm(), 0.0);
    }

    #[test]
    fn single_action_sgd_keeps_init() {
        let m = generate_random_mdp(3, 1, 0.9, 2).unwrap();
        let f = FeatureMap::gaussian(3, 1, 2, 1).unwrap();
        let nu = StateActionDistribution::uniform(3);
        let mut cfg = SgdConfig::advantage_default(100, f.b_norm(), 1);
        cfg.init = Some(DVector::from_vec(vec![0.5, -2.0]));
        let sol = npg_sgd(&m, &DVector::zeros(2), &f, &nu, &cfg).unwrap();
        assert!((sol.w - DVector::from_vec(vec![0.5, -2.0])).norm() < 1e-15);
    }

    #[test]
    fn huge_step_reports_divergence() {
        let m = generate_random_mdp(3, 2, 0.9, 2).unwrap();
        let f = FeatureMap::gaussian(3, 2, 4, 1).unwrap();
        let nu = StateActionDistribution::uniform(6);
        let cfg = SgdConfig::new(5000, 1e3, 1);
        let err = qnpg_sgd(&m, &DVector::zeros(4), &f, &nu, &cfg).unwrap_err();
        assert!(matches!(err, Error::SgdDiverged { .. }));
    }

    #[test]
    fn config_validation() {
        assert!(SgdConfig::new(0, 0.1, 0).validate().is_err());
        assert!(SgdConfig::new(1, 0.0, 0).validate().is_err());
        assert_eq!(SgdConfig::q_default(10, 2.0, 0).step_size, 0.125);
        assert_eq!(SgdConfig::advantage_default(10, 1.0, 0).step_size, 0.125);
    }

    #[test]
    fn unit_cost_second_moment_closed_form() {
        // Q_hat = H + 1 with H geometric: E[(H+1)^2] = (1 + gamma) / (1 - gamma)^2 = 6 at gamma = 0.5.
        let m = generate_random_mdp(2, 2, 0.5, 3).unwrap();
        let m = FiniteMdp::new(2, 2, m.transition().to_vec(), vec![1.0; 4], 0.5).unwrap();
        let f = FeatureMap::one_hot(2, 2);
        let nu = StateActionDistribution::uniform(4);
        let est = estimate_q_hat_second_moment(&m, &DVector::zeros(4), &f, &nu, 100_000, 9).unwrap();
        assert!(est.within(6.0, 4.0), "{est:?}");
    }
}
