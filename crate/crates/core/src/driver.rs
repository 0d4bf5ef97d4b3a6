//! Outer NPG / Q-NPG loop.
//!
//! Each iteration fits `w^(k)` to `Q` (raw features) or `A` (centered
//! features) under `d_tilde^(k)(nu)`, exactly or by averaged SGD, and steps
//! `theta <- theta - eta_k w^(k)`. After the loop every iterate is scored
//! against the comparator and the applicable bounds are evaluated with the
//! run-wide suprema of the measured coefficients.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DVector;

use crate::diagnostics::{
    concentrability_nu_terms, concentrability_rho, covariance_min_eig, relative_condition_number,
    bound_value, mismatch_rho, BoundInputs, ConcentrabilityTerms, BoundKind,
};
use crate::error::{Error, Result};
use crate::linalg::min_eigenvalue;
use crate::mdp::{FiniteMdp, StateActionDistribution, StateDistribution};
use crate::oracle::{
    evaluate_policy, optimal_policy, state_action_visitation_tilde, state_visitation, PolicyTable,
};
use crate::policy::{expected_kl, mirror_update_table, policy_table, weighted_gram, FeatureMap};
use crate::regression::{compatible_problem, design_for, errors_with_problem, ErrorReport, RegressionKind};
use crate::sampling::{averaged_sgd, SampleProvider, Sampler, SequentialProvider, SgdConfig};

/// Step size used when the log-|A| rule gives zero (single action).
pub const ETA_FLOOR: f64 = 1e-8;
/// Step size used at `gamma = 0`, where the rule divides by zero; one step
/// is then already greedy for any finite advantage scale.
pub const ETA_ZERO_DISCOUNT: f64 = 1e8;

/// Relative slack on the initial-step condition; the default `eta_0` meets
/// it with equality when the comparator is deterministic.
pub const STEP_CONDITION_SLACK: f64 = 1e-12;

/// Step sizes `eta_k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepSchedule {
    /// `eta_k = eta_0 / gamma^k`, stored as `log eta_0` and `-log gamma`.
    Geometric { log_eta0: f64, log_growth: f64 },
    Constant { eta: f64 },
}

impl StepSchedule {
    pub fn geometric(eta0: f64, gamma: f64) -> Result<Self> {
        if !(eta0 > 0.0 && eta0.is_finite()) {
            return Err(Error::Invalid(alloc::format!("eta0 must be positive, got {eta0}")));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::Invalid(alloc::format!(
                "geometric steps need 0 < gamma < 1, got {gamma}"
            )));
        }
        Ok(Self::Geometric {
            log_eta0: libm::log(eta0),
            log_growth: -libm::log(gamma),
        })
    }

    pub fn constant(eta: f64) -> Result<Self> {
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(Error::Invalid(alloc::format!("eta must be positive, got {eta}")));
        }
        Ok(Self::Constant { eta })
    }

    pub fn eta(&self, k: usize) -> f64 {
        match *self {
            Self::Geometric {
                log_eta0,
                log_growth,
            } => libm::exp(log_eta0 + k as f64 * log_growth),
            Self::Constant { eta } => eta,
        }
    }

    pub fn eta0(&self) -> f64 {
        self.eta(0)
    }

    pub fn is_geometric(&self) -> bool {
        matches!(self, Self::Geometric { .. })
    }
}

/// `((1 - gamma) / gamma) log |A|`, an upper bound on the initial-step
/// requirement from the uniform start.
pub fn default_eta0(n_actions: usize, gamma: f64) -> f64 {
    if gamma == 0.0 {
        return ETA_ZERO_DISCOUNT;
    }
    let eta = (1.0 - gamma) / gamma * libm::log(n_actions as f64);
    if eta > 0.0 {
        eta
    } else {
        ETA_FLOOR
    }
}

/// Averaged-SGD regression settings for the sampled mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdSettings {
    pub n_steps: usize,
    /// Defaults to `1/(2B^2)` for Q and `1/(8B^2)` for the advantage fit.
    pub step_size: Option<f64>,
    pub seed: u64,
    pub step_cap: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    Exact,
    Sgd(SgdSettings),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub kind: RegressionKind,
    pub schedule: StepSchedule,
    pub iterations: usize,
    pub mode: Mode,
    /// Policy-iteration optimum when absent.
    pub comparator: Option<PolicyTable>,
    /// Bound written to the `bound` column; chosen from the kind and
    /// schedule when absent.
    pub primary: Option<BoundKind>,
}

impl RunConfig {
    pub fn new(kind: RegressionKind, schedule: StepSchedule, iterations: usize, mode: Mode) -> Self {
        Self {
            kind,
            schedule,
            iterations,
            mode,
            comparator: None,
            primary: None,
        }
    }

    /// Bounds whose hypotheses match this run.
    pub fn applicable_bounds(&self) -> Vec<BoundKind> {
        use BoundKind::*;
        let sgd = matches!(self.mode, Mode::Sgd(_));
        match (self.kind, self.schedule.is_geometric()) {
            (RegressionKind::Q, true) if sgd => vec![QTransfer, QApprox, QSampled],
            (RegressionKind::Q, true) => vec![QTransfer, QApprox],
            (RegressionKind::Q, false) => vec![QTransferAverage],
            (RegressionKind::Advantage, true) if sgd => vec![Npg, NpgSampled],
            (RegressionKind::Advantage, true) => vec![Npg],
            (RegressionKind::Advantage, false) => vec![NpgAverage],
        }
    }

    pub fn primary_bound(&self) -> BoundKind {
        self.primary.unwrap_or(self.applicable_bounds()[0])
    }
}

/// Per-iteration coefficients; `c_nu` needs the next iterate and is absent
/// at the last one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationCoefficients {
    pub mismatch_k: f64,
    pub c_rho: f64,
    pub c_nu: Option<ConcentrabilityTerms>,
    /// Smallest eigenvalue of the centered-feature covariance under
    /// `d_tilde^(k)`; absent at the last iterate.
    pub centered_min_eig: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub k: usize,
    pub eta: f64,
    pub theta: Vec<f64>,
    pub theta_digest: u64,
    pub policy: PolicyTable,
    pub value: f64,
    pub gap: f64,
    /// `(1/k) sum_{t<k} gap_t`; absent at `k = 0`.
    pub avg_gap: Option<f64>,
    /// Absent at the last iterate, where no regression is solved.
    pub errors: Option<ErrorReport>,
    pub d_kstar: f64,
    pub samples: u64,
    /// Largest entrywise gap between the parameter update and the row-wise
    /// mirror step that produced the next iterate.
    pub pmd_deviation: Option<f64>,
    pub coefficients: IterationCoefficients,
    pub bound: f64,
    pub bounds: Vec<(BoundKind, f64)>,
}

/// Run-wide constants and suprema.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub gamma: f64,
    pub n_actions: usize,
    pub mismatch_rho: f64,
    pub mismatch_k_max: f64,
    pub kappa_nu: f64,
    pub c_rho: f64,
    pub c_nu: f64,
    pub errors: ErrorReport,
    pub d0_star: f64,
    pub b_norm: f64,
    /// `lambda_min(Sigma_nu)` for Q; smallest centered covariance eigenvalue
    /// over the run for the advantage fit.
    pub mu: f64,
    pub feature_dim: usize,
    /// Whether `eta_0 >= ((1 - gamma)/gamma) D_0*` (geometric schedules).
    pub step_condition_holds: bool,
    pub primary: BoundKind,
}

impl RunSummary {
    /// Bound inputs with the run-wide suprema; `errors` overrides the
    /// measured ones (e.g. cross-seed means).
    pub fn bound_inputs(&self, eta: Option<f64>, sgd_steps: Option<usize>, errors: Option<ErrorReport>) -> BoundInputs {
        let e = errors.unwrap_or(self.errors);
        BoundInputs {
            gamma: self.gamma,
            n_actions: self.n_actions,
            mismatch_rho: Some(self.mismatch_rho),
            c_rho: Some(self.c_rho),
            c_nu: Some(self.c_nu),
            kappa_nu: Some(self.kappa_nu),
            eps_stat: Some(e.eps_stat),
            eps_bias: Some(e.eps_bias),
            eps_approx: Some(e.eps_approx),
            d0_star: Some(self.d0_star),
            eta,
            b_norm: Some(self.b_norm),
            mu: Some(self.mu),
            feature_dim: Some(self.feature_dim),
            sgd_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub kind: RegressionKind,
    pub schedule: StepSchedule,
    pub sgd_steps: Option<usize>,
    pub comparator: PolicyTable,
    pub comparator_value: f64,
    pub records: Vec<IterationRecord>,
    pub summary: RunSummary,
}

impl RunTrace {
    pub fn final_gap(&self) -> f64 {
        self.records.last().map(|r| r.gap).unwrap_or(f64::NAN)
    }

    pub fn gaps(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.gap).collect()
    }

    /// Largest parameter-vs-mirror deviation over the run.
    pub fn max_pmd_deviation(&self) -> f64 {
        self.records
            .iter()
            .filter_map(|r| r.pmd_deviation)
            .fold(0.0, f64::max)
    }

    pub fn total_samples(&self) -> u64 {
        self.records.iter().map(|r| r.samples).sum()
    }
}

/// FNV-1a over the bit patterns of `theta`.
pub fn theta_digest(theta: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for x in theta {
        for b in x.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

struct RawIterate {
    theta: DVector<f64>,
    policy: PolicyTable,
    eta: f64,
    errors: Option<ErrorReport>,
    samples: u64,
    pmd_deviation: Option<f64>,
    centered_min_eig: Option<f64>,
}

/// Runs the outer loop from `theta = 0`.
pub fn run(
    mdp: &FiniteMdp,
    features: &FeatureMap,
    rho: &StateDistribution,
    nu: &StateActionDistribution,
    config: &RunConfig,
    provider: &dyn SampleProvider,
) -> Result<RunTrace> {
    if features.n_states() != mdp.n_states() || features.n_actions() != mdp.n_actions() {
        return Err(Error::Dimension {
            what: "feature map rows vs MDP pairs",
            expected: mdp.n_pairs(),
            actual: features.n_states() * features.n_actions(),
        });
    }
    let comparator = match &config.comparator {
        Some(c) => c.clone(),
        None => optimal_policy(mdp)?,
    };
    let d_star = state_visitation(mdp, &comparator, rho)?;

    let mut theta = DVector::zeros(features.dim());
    let mut raw: Vec<RawIterate> = Vec::with_capacity(config.iterations + 1);
    for k in 0..=config.iterations {
        let policy = policy_table(&theta, features)?;
        let eta = config.schedule.eta(k);
        if k == config.iterations {
            raw.push(RawIterate {
                theta: theta.clone(),
                policy,
                eta,
                errors: None,
                samples: 0,
                pmd_deviation: None,
                centered_min_eig: None,
            });
            break;
        }
        let weights = state_action_visitation_tilde(mdp, &policy, nu)?;
        let problem = compatible_problem(mdp, &policy, features, weights, config.kind)?;
        let centered_min_eig = if config.kind == RegressionKind::Advantage {
            min_eigenvalue(&problem.covariance())
        } else {
            min_eigenvalue(&weighted_gram(
                &design_for(RegressionKind::Advantage, features, &policy),
                problem.weights.probs(),
            ))
        };
        let (w, samples) = match config.mode {
            Mode::Exact => (problem.minimizer(), 0),
            Mode::Sgd(s) => {
                let sampler = Sampler::new(mdp, policy.clone(), nu)?.with_step_cap(s.step_cap);
                let step = s.step_size.unwrap_or_else(|| {
                    let b = features.b_norm();
                    match config.kind {
                        RegressionKind::Q => 1.0 / (2.0 * b * b),
                        RegressionKind::Advantage => 1.0 / (8.0 * b * b),
                    }
                });
                let mut cfg = SgdConfig::new(s.n_steps, step, s.seed);
                cfg.iteration = k as u64;
                let out = averaged_sgd(&sampler, &problem.design, config.kind, &cfg, provider)?;
                (out.w, out.env_steps)
            }
        };
        let errors = errors_with_problem(&problem, &d_star, &w);
        let next_theta = &theta - &w * eta;
        if next_theta.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteParameter { iteration: k });
        }
        let next_policy = policy_table(&next_theta, features)?;
        let mirrored = mirror_update_table(&policy, &problem.design, &w, eta)?;
        raw.push(RawIterate {
            theta: theta.clone(),
            policy,
            eta,
            errors: Some(errors),
            samples,
            pmd_deviation: Some(next_policy.max_abs_diff(&mirrored)),
            centered_min_eig: Some(centered_min_eig),
        });
        theta = next_theta;
    }
    score(mdp, features, rho, nu, config, comparator, &d_star, raw)
}

#[allow(clippy::too_many_arguments)]
fn score(
    mdp: &FiniteMdp,
    features: &FeatureMap,
    rho: &StateDistribution,
    nu: &StateActionDistribution,
    config: &RunConfig,
    comparator: PolicyTable,
    d_star: &StateDistribution,
    raw: Vec<RawIterate>,
) -> Result<RunTrace> {
    let gamma = mdp.gamma();
    let comparator_value = evaluate_policy(mdp, &comparator)?.value_at(rho);
    let vt_rho = mismatch_rho(d_star, rho, gamma);
    let kappa = relative_condition_number(features, d_star, nu, mdp.n_actions());
    let d0_star = kl_or_inf(d_star, &comparator, &raw[0].policy)?;

    let mut records = Vec::with_capacity(raw.len());
    let mut sup_errors = ErrorReport::default();
    let (mut sup_c_rho, mut sup_c_nu, mut sup_vk): (f64, f64, f64) = (0.0, 0.0, 0.0);
    let mut min_centered = f64::INFINITY;
    let mut gap_sum = 0.0;
    for (i, it) in raw.iter().enumerate() {
        let value = evaluate_policy(mdp, &it.policy)?.value_at(rho);
        let gap = value - comparator_value;
        let avg_gap = if i == 0 { None } else { Some(gap_sum / i as f64) };
        gap_sum += gap;
        let d_k = state_visitation(mdp, &it.policy, rho)?;
        let mismatch_k = crate::diagnostics::max_ratio(d_star.probs(), d_k.probs());
        let c_rho = concentrability_rho(mdp, &comparator, &it.policy, rho)?;
        let c_nu = match raw.get(i + 1) {
            Some(next) => Some(concentrability_nu_terms(
                mdp,
                rho,
                &comparator,
                &it.policy,
                &next.policy,
                nu,
            )?),
            None => None,
        };
        if let Some(e) = it.errors {
            sup_errors = sup_errors.max(e);
        }
        if let Some(mu) = it.centered_min_eig {
            min_centered = min_centered.min(mu);
        }
        sup_vk = sup_vk.max(mismatch_k);
        sup_c_rho = sup_c_rho.max(c_rho);
        if let Some(t) = c_nu {
            sup_c_nu = sup_c_nu.max(match config.kind {
                RegressionKind::Q => t.q_variant(),
                RegressionKind::Advantage => t.advantage_variant(),
            });
        }
        let theta: Vec<f64> = it.theta.iter().copied().collect();
        records.push(IterationRecord {
            k: i,
            eta: it.eta,
            theta_digest: theta_digest(&theta),
            theta,
            policy: it.policy.clone(),
            value,
            gap,
            avg_gap,
            errors: it.errors,
            d_kstar: kl_or_inf(d_star, &comparator, &it.policy)?,
            samples: it.samples,
            pmd_deviation: it.pmd_deviation,
            coefficients: IterationCoefficients {
                mismatch_k,
                c_rho,
                c_nu,
                centered_min_eig: it.centered_min_eig,
            },
            bound: f64::NAN,
            bounds: Vec::new(),
        });
    }

    let mu = match config.kind {
        RegressionKind::Q => covariance_min_eig(features, nu),
        RegressionKind::Advantage => {
            if min_centered.is_finite() {
                min_centered
            } else {
                0.0
            }
        }
    };
    let summary = RunSummary {
        gamma,
        n_actions: mdp.n_actions(),
        mismatch_rho: vt_rho,
        mismatch_k_max: sup_vk,
        kappa_nu: kappa,
        c_rho: sup_c_rho,
        c_nu: sup_c_nu,
        errors: sup_errors,
        d0_star,
        b_norm: features.b_norm(),
        mu,
        feature_dim: features.dim(),
        step_condition_holds: !config.schedule.is_geometric()
            || gamma == 0.0
            || config.schedule.eta0() >= (1.0 - gamma) / gamma * d0_star * (1.0 - STEP_CONDITION_SLACK),
        primary: config.primary_bound(),
    };

    let sgd_steps = match config.mode {
        Mode::Sgd(s) => Some(s.n_steps),
        Mode::Exact => None,
    };
    let eta = match config.schedule {
        StepSchedule::Constant { eta } => Some(eta),
        StepSchedule::Geometric { .. } => None,
    };
    let inputs = summary.bound_inputs(eta, sgd_steps, None);
    let mut ids = config.applicable_bounds();
    if !ids.contains(&summary.primary) {
        ids.insert(0, summary.primary);
    }
    for r in records.iter_mut() {
        for &id in &ids {
            r.bounds.push((id, bound_value(id, &inputs, r.k)?));
        }
        r.bound = r
            .bounds
            .iter()
            .find(|(id, _)| *id == summary.primary)
            .map(|(_, b)| *b)
            .unwrap_or(f64::NAN);
    }

    Ok(RunTrace {
        kind: config.kind,
        schedule: config.schedule,
        sgd_steps,
        comparator,
        comparator_value,
        records,
        summary,
    })
}

fn kl_or_inf(d: &StateDistribution, p: &PolicyTable, q: &PolicyTable) -> Result<f64> {
    match expected_kl(d, p, q) {
        Ok(v) => Ok(v),
        Err(Error::InfiniteDivergence { .. }) => Ok(f64::INFINITY),
        Err(e) => Err(e),
    }
}

/// Q-NPG with the sequential sampler and the policy-iteration comparator.
pub fn run_qnpg(
    mdp: &FiniteMdp,
    features: &FeatureMap,
    rho: &StateDistribution,
    nu: &StateActionDistribution,
    schedule: StepSchedule,
    iterations: usize,
    mode: Mode,
) -> Result<RunTrace> {
    let config = RunConfig::new(RegressionKind::Q, schedule, iterations, mode);
    run(mdp, features, rho, nu, &config, &SequentialProvider)
}

/// NPG with the sequential sampler and the policy-iteration comparator.
pub fn run_npg(
    mdp: &FiniteMdp,
    features: &FeatureMap,
    rho: &StateDistribution,
    nu: &StateActionDistribution,
    schedule: StepSchedule,
    iterations: usize,
    mode: Mode,
) -> Result<RunTrace> {
    let config = RunConfig::new(RegressionKind::Advantage, schedule, iterations, mode);
    run(mdp, features, rho, nu, &config, &SequentialProvider)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::generate_random_mdp;

    #[test]
    fn default_eta0_values() {
        assert!((default_eta0(5, 0.9) - 0.1 / 0.9 * libm::log(5.0)).abs() < 1e-15);
        assert_eq!(default_eta0(1, 0.9), ETA_FLOOR);
        assert_eq!(default_eta0(3, 0.0), ETA_ZERO_DISCOUNT);
    }

    #[test]
    fn geometric_growth_is_one_over_gamma() {
        let s = StepSchedule::geometric(0.3, 0.9).unwrap();
        for k in 0..200 {
            let (a, b) = (s.eta(k), s.eta(k + 1));
            assert!((b * 0.9 - a).abs() <= 1e-13 * a, "k={k}");
        }
        assert!(StepSchedule::geometric(0.3, 0.0).is_err());
        assert!(StepSchedule::constant(0.0).is_err());
    }

    #[test]
    fn zero_iterations_evaluates_uniform_only() {
        let m = generate_random_mdp(3, 2, 0.9, 1).unwrap();
        let f = FeatureMap::one_hot(3, 2);
        let t = run_qnpg(
            &m,
            &f,
            &StateDistribution::uniform(3),
            &StateActionDistribution::uniform(6),
            StepSchedule::constant(1.0).unwrap(),
            0,
            Mode::Exact,
        )
        .unwrap();
        assert_eq!(t.records.len(), 1);
        assert_eq!(t.records[0].policy, PolicyTable::uniform(3, 2));
        assert!(t.records[0].errors.is_none());
    }

    #[test]
    fn single_action_policy_is_constant() {
        let m = generate_random_mdp(4, 1, 0.9, 2).unwrap();
        let f = FeatureMap::gaussian(4, 1, 3, 1).unwrap();
        let t = run_npg(
            &m,
            &f,
            &StateDistribution::uniform(4),
            &StateActionDistribution::uniform(4),
            StepSchedule::geometric(default_eta0(1, 0.9), 0.9).unwrap(),
            5,
            Mode::Exact,
        )
        .unwrap();
        for r in &t.records {
            assert_eq!(r.policy, PolicyTable::uniform(4, 1));
            assert!(r.gap.abs() < 1e-12);
        }
    }

    #[test]
    fn digest_changes_with_theta() {
        assert_ne!(theta_digest(&[0.0, 1.0]), theta_digest(&[1.0, 0.0]));
        assert_eq!(theta_digest(&[0.5]), theta_digest(&[0.5]));
    }
}
