//! Coefficients that appear in the convergence bounds, and the bounds.
//!
//! Infinite coefficients are kept as `f64::INFINITY` and make any bound that
//! uses them infinite (vacuous). Missing ones are an error naming the
//! assumption that supplies them.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{min_eigenvalue, svd};
use crate::mdp::{FiniteMdp, StateActionDistribution, StateDistribution};
use crate::oracle::{state_action_visitation_tilde, state_visitation, PolicyTable};
use crate::policy::{weighted_gram, weighted_root, FeatureMap};

/// Relative eigenvalue cutoff when restricting to the range of a covariance.
const RANGE_RCOND: f64 = 1e-10;
/// Relative size of a root's component outside that range that counts as mass.
const RANGE_ATOL: f64 = 3e-5;

/// Which right-hand side to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BoundKind {
    /// Q-NPG, geometric steps, transfer error.
    QTransfer,
    /// Q-NPG, constant step, transfer error (bounds the running-average gap).
    QTransferAverage,
    /// Q-NPG, geometric steps, approximation error.
    QApprox,
    /// NPG, geometric steps.
    Npg,
    /// NPG, constant step (running-average gap).
    NpgAverage,
    /// Sampled Q-NPG with averaged SGD.
    QSampled,
    /// Sampled NPG with averaged SGD.
    NpgSampled,
}

impl BoundKind {
    pub const ALL: [BoundKind; 7] = [
        BoundKind::QTransfer,
        BoundKind::QTransferAverage,
        BoundKind::QApprox,
        BoundKind::Npg,
        BoundKind::NpgAverage,
        BoundKind::QSampled,
        BoundKind::NpgSampled,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BoundKind::QTransfer => "q_transfer",
            BoundKind::QTransferAverage => "q_transfer_average",
            BoundKind::QApprox => "q_approx",
            BoundKind::Npg => "npg",
            BoundKind::NpgAverage => "npg_average",
            BoundKind::QSampled => "q_sampled",
            BoundKind::NpgSampled => "npg_sampled",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name().eq_ignore_ascii_case(s))
    }

    /// True for the bounds on the running-average gap.
    pub fn bounds_average(self) -> bool {
        matches!(self, BoundKind::QTransferAverage | BoundKind::NpgAverage)
    }
}

/// Coefficients measured at one iteration (or their run-wide suprema).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CoefficientReport {
    pub mismatch_rho: f64,
    pub mismatch_k: f64,
    pub c_rho: f64,
    pub c_nu: f64,
    pub kappa_nu: f64,
    pub sigma_nu_min_eig: f64,
    pub b_norm: f64,
    pub d_kstar: f64,
}

/// `sum_i num_i^2 / den_i`, infinite when some `den_i = 0 < num_i`.
fn chi_square_like(num: &[f64], den: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&n, &d) in num.iter().zip(den) {
        if n == 0.0 {
            continue;
        }
        if d <= 0.0 {
            return f64::INFINITY;
        }
        acc += n * n / d;
    }
    acc
}

/// `max_i num_i / den_i` with `0/0 = 0` and `x/0 = inf`.
pub fn max_ratio(num: &[f64], den: &[f64]) -> f64 {
    let mut best: f64 = 0.0;
    for (&n, &d) in num.iter().zip(den) {
        if n == 0.0 {
            continue;
        }
        if d <= 0.0 {
            return f64::INFINITY;
        }
        best = best.max(n / d);
    }
    best
}

/// `mismatch_rho = max_s d*_s / rho_s / (1 - gamma)`; infinite when `rho`
/// misses part of the support of `d*`. In that case the guarantees can still
/// be restated for a different start distribution `rho'` with full support.
pub fn mismatch_rho(d_star: &StateDistribution, rho: &StateDistribution, gamma: f64) -> f64 {
    max_ratio(d_star.probs(), rho.probs()) / (1.0 - gamma)
}

/// `(mismatch_k, mismatch_rho)`.
pub fn mismatch_coefficients(
    mdp: &FiniteMdp,
    comparator: &PolicyTable,
    policy_k: &PolicyTable,
    rho: &StateDistribution,
) -> Result<(f64, f64)> {
    let d_star = state_visitation(mdp, comparator, rho)?;
    let d_k = state_visitation(mdp, policy_k, rho)?;
    Ok((
        max_ratio(d_star.probs(), d_k.probs()),
        mismatch_rho(&d_star, rho, mdp.gamma()),
    ))
}

/// `E_{s ~ d*}[(d^k_s / d*_s)^2] = sum_s (d^k_s)^2 / d*_s`.
pub fn concentrability_rho(
    mdp: &FiniteMdp,
    comparator: &PolicyTable,
    policy_k: &PolicyTable,
    rho: &StateDistribution,
) -> Result<f64> {
    let d_star = state_visitation(mdp, comparator, rho)?;
    let d_k = state_visitation(mdp, policy_k, rho)?;
    Ok(chi_square_like(d_k.probs(), d_star.probs()))
}

/// The four visitation terms `h` compared against `d_tilde^k`, in order:
/// `d^{k+1} pi^{k+1}`, `d^{k+1} pi^k`, `d* pi^k`, `d* pi*`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConcentrabilityTerms {
    pub terms: [f64; 4],
}

impl ConcentrabilityTerms {
    /// Maximum over all four terms.
    pub fn q_variant(&self) -> f64 {
        self.terms.iter().copied().fold(0.0, f64::max)
    }

    /// Maximum over the first and fourth terms only.
    pub fn advantage_variant(&self) -> f64 {
        self.terms[0].max(self.terms[3])
    }
}

pub fn concentrability_nu_terms(
    mdp: &FiniteMdp,
    rho: &StateDistribution,
    comparator: &PolicyTable,
    policy_k: &PolicyTable,
    policy_k1: &PolicyTable,
    nu: &StateActionDistribution,
) -> Result<ConcentrabilityTerms> {
    let d_tilde = state_action_visitation_tilde(mdp, policy_k, nu)?;
    let d_star = state_visitation(mdp, comparator, rho)?;
    let d_k1 = state_visitation(mdp, policy_k1, rho)?;
    let na = mdp.n_actions();
    let h = |d: &StateDistribution, pi: &PolicyTable| -> alloc::vec::Vec<f64> {
        (0..mdp.n_pairs())
            .map(|i| d.probs()[i / na] * pi.probs()[i])
            .collect()
    };
    let den = d_tilde.probs();
    Ok(ConcentrabilityTerms {
        terms: [
            chi_square_like(&h(&d_k1, policy_k1), den),
            chi_square_like(&h(&d_k1, policy_k), den),
            chi_square_like(&h(&d_star, policy_k), den),
            chi_square_like(&h(&d_star, comparator), den),
        ],
    })
}

/// `C_nu` for Q-NPG (all four terms).
pub fn concentrability_nu(
    mdp: &FiniteMdp,
    rho: &StateDistribution,
    comparator: &PolicyTable,
    policy_k: &PolicyTable,
    policy_k1: &PolicyTable,
    nu: &StateActionDistribution,
) -> Result<f64> {
    Ok(concentrability_nu_terms(mdp, rho, comparator, policy_k, policy_k1, nu)?.q_variant())
}

/// Feature covariance `E_{(s,a) ~ weights}[phi phi^T]`.
pub fn feature_covariance(features: &FeatureMap, weights: &[f64]) -> DMatrix<f64> {
    weighted_gram(features.matrix(), weights)
}

/// `max_w |T w|^2 / |R w|^2` over `w` outside the null space of `R`, i.e.
/// the largest generalized eigenvalue of `(T^T T, R^T R)`; infinite if `T`
/// does not vanish on that null space. Works on the roots so the reference
/// conditioning is not squared.
pub fn generalized_max_ratio(target_root: &DMatrix<f64>, reference_root: &DMatrix<f64>) -> f64 {
    let scale = target_root.norm();
    if scale == 0.0 {
        return 0.0;
    }
    let d = svd(reference_root);
    let smax = d.singular_values.iter().copied().fold(0.0, f64::max);
    if smax <= 0.0 {
        return f64::INFINITY;
    }
    let keep: alloc::vec::Vec<usize> = (0..d.singular_values.len())
        .filter(|&i| d.singular_values[i] * d.singular_values[i] > RANGE_RCOND * smax * smax)
        .collect();
    let n = reference_root.ncols();
    let mut whiten = DMatrix::zeros(n, keep.len());
    let mut basis = DMatrix::zeros(n, keep.len());
    for (j, &i) in keep.iter().enumerate() {
        basis.set_column(j, &d.v.column(i));
        whiten.set_column(j, &(d.v.column(i) / d.singular_values[i]));
    }
    let outside = target_root * (DMatrix::identity(n, n) - &basis * basis.transpose());
    if outside.norm() > RANGE_ATOL * scale {
        return f64::INFINITY;
    }
    let top = svd(&(target_root * whiten)).singular_values.iter().copied().fold(0.0, f64::max);
    top * top
}

/// `kappa_nu = max_w (w^T Sigma_{d*/|A|} w) / (w^T Sigma_nu w)`.
pub fn relative_condition_number(
    features: &FeatureMap,
    d_star: &StateDistribution,
    nu: &StateActionDistribution,
    n_actions: usize,
) -> f64 {
    let d_tilde_star = StateActionDistribution::spread_uniform(d_star, n_actions);
    generalized_max_ratio(
        &weighted_root(features.matrix(), d_tilde_star.probs()),
        &weighted_root(features.matrix(), nu.probs()),
    )
}

/// Smallest eigenvalue of `Sigma_nu`.
pub fn covariance_min_eig(features: &FeatureMap, nu: &StateActionDistribution) -> f64 {
    min_eigenvalue(&feature_covariance(features, nu.probs()))
}

/// Everything a bound may need. `None` marks a coefficient that was not
/// measured.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BoundInputs {
    pub gamma: f64,
    pub n_actions: usize,
    pub mismatch_rho: Option<f64>,
    pub c_rho: Option<f64>,
    pub c_nu: Option<f64>,
    pub kappa_nu: Option<f64>,
    pub eps_stat: Option<f64>,
    pub eps_bias: Option<f64>,
    pub eps_approx: Option<f64>,
    pub d0_star: Option<f64>,
    pub eta: Option<f64>,
    pub b_norm: Option<f64>,
    pub mu: Option<f64>,
    pub feature_dim: Option<usize>,
    pub sgd_steps: Option<usize>,
}

fn need(value: Option<f64>, which: BoundKind, assumption: &'static str) -> Result<f64> {
    value.ok_or(Error::MissingCoefficient {
        bound: which.name(),
        assumption,
    })
}

/// Evaluates the right-hand side of `which` at iteration `k`.
///
/// For `QTransferAverage`/`NpgAverage` the result bounds `(1/k) sum_{t<k} gap_t` and is infinite at
/// `k = 0`.
pub fn bound_value(which: BoundKind, inputs: &BoundInputs, k: usize) -> Result<f64> {
    use BoundKind::*;
    let g = inputs.gamma;
    let one_m = 1.0 - g;
    let vt = need(inputs.mismatch_rho, which, "distribution mismatch coefficient")?;
    let mut used = alloc::vec![vt];

    let floor = match which {
        QTransfer | QTransferAverage => {
            let c_rho = need(inputs.c_rho, which, "state-visitation concentrability")?;
            let kappa = need(inputs.kappa_nu, which, "bounded relative condition number")?;
            let stat = need(inputs.eps_stat, which, "bounded statistical error")?;
            let bias = need(inputs.eps_bias, which, "bounded transfer error")?;
            used.extend([c_rho, kappa, stat, bias]);
            2.0 * libm::sqrt(inputs.n_actions as f64) * (vt * libm::sqrt(c_rho) + 1.0) / one_m
                * (libm::sqrt(kappa * stat / one_m) + libm::sqrt(bias))
        }
        QApprox | Npg | NpgAverage => {
            let c_nu = need(inputs.c_nu, which, "state-action concentrability")?;
            let stat = need(inputs.eps_stat, which, "bounded statistical error")?;
            let approx = need(inputs.eps_approx, which, "bounded approximation error")?;
            used.extend([c_nu, stat, approx]);
            let lead = if which == QApprox { 2.0 } else { 1.0 };
            lead * libm::sqrt(c_nu) * (vt + 1.0) / one_m
                * (libm::sqrt(stat) + libm::sqrt(approx))
        }
        QSampled | NpgSampled => {
            let c_nu = need(inputs.c_nu, which, "state-action concentrability")?;
            let approx = need(inputs.eps_approx, which, "bounded approximation error")?;
            let b = need(inputs.b_norm, which, "bounded feature norm")?;
            let mu = need(inputs.mu, which, "non-singular feature covariance")?;
            let m = need(inputs.feature_dim.map(|m| m as f64), which, "feature dimension")?;
            let t = need(inputs.sgd_steps.map(|t| t as f64), which, "SGD step count")?;
            used.extend([c_nu, approx, b, mu]);
            if mu <= 0.0 {
                return Ok(f64::INFINITY);
            }
            let root = libm::sqrt(2.0 * m);
            let sc = libm::sqrt(c_nu);
            if which == QSampled {
                2.0 * (vt + 1.0) * libm::sqrt(c_nu * approx) / one_m
                    + 4.0 * sc * (vt + 1.0) / (one_m * one_m * one_m * libm::sqrt(t))
                        * (b * b / mu * (root + 1.0) + one_m * root)
            } else {
                (vt + 1.0) * libm::sqrt(c_nu * approx) / one_m
                    + 4.0 * sc * (vt + 1.0) / (one_m * one_m * libm::sqrt(t))
                        * (2.0 * b * b / mu * (root + 1.0) + root)
            }
        }
    };

    let lead = if which.bounds_average() {
        let d0 = need(inputs.d0_star, which, "initial divergence to the comparator")?;
        let eta = need(inputs.eta, which, "constant step size")?;
        used.extend([d0, eta]);
        if k == 0 {
            f64::INFINITY
        } else {
            (d0 / eta + 2.0 * vt) / (one_m * k as f64)
        }
    } else {
        libm::pow(1.0 - 1.0 / vt, k as f64) * 2.0 / one_m
    };

    if used.iter().any(|x| x.is_infinite()) {
        return Ok(f64::INFINITY);
    }
    Ok(lead + floor)
}

/// Constants of the averaged-SGD guarantee for one regression.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdBound {
    /// Noise level `sigma` from the variance condition.
    pub sigma: f64,
    /// Norm bound `R` on the regression inputs.
    pub r: f64,
    /// `(4 / T) (sigma sqrt(m) + R |w*|)^2`.
    pub excess_bound: f64,
    /// Step on `f = L / 2` the literal update amounts to (`2 alpha`).
    pub half_loss_step_literal: f64,
    /// Step on `f = L / 2` under the `alpha / 2` reading.
    pub half_loss_step_halved: f64,
}

/// Excess-risk bound for the Q regression with `alpha = 1 / (2 B^2)`:
/// `sigma = sqrt(2) / (1 - gamma) * (B^2 / (mu (1 - gamma)) + 1)`.
pub fn sgd_bound_q(gamma: f64, b_norm: f64, mu: f64, dim: usize, w_star_norm: f64, n_steps: usize, alpha: f64) -> SgdBound {
    let one_m = 1.0 - gamma;
    let sigma = if mu > 0.0 {
        core::f64::consts::SQRT_2 / one_m * (b_norm * b_norm / (mu * one_m) + 1.0)
    } else {
        f64::INFINITY
    };
    let r = b_norm;
    let base = sigma * libm::sqrt(dim as f64) + r * w_star_norm;
    SgdBound {
        sigma,
        r,
        excess_bound: 4.0 / n_steps as f64 * base * base,
        half_loss_step_literal: 2.0 * alpha,
        half_loss_step_halved: alpha / 2.0,
    }
}

/// Advantage-regression analogue, with centered inputs bounded by `2B` and
/// `sigma = 2 sqrt(2) / (1 - gamma) * (2 B^2 / mu + 1)`.
pub fn sgd_bound_advantage(gamma: f64, b_norm: f64, mu: f64, dim: usize, w_star_norm: f64, n_steps: usize, alpha: f64) -> SgdBound {
    let one_m = 1.0 - gamma;
    let sigma = if mu > 0.0 {
        2.0 * core::f64::consts::SQRT_2 / one_m * (2.0 * b_norm * b_norm / mu + 1.0)
    } else {
        f64::INFINITY
    };
    let r = 2.0 * b_norm;
    let base = sigma * libm::sqrt(dim as f64) + r * w_star_norm;
    SgdBound {
        sigma,
        r,
        excess_bound: 4.0 / n_steps as f64 * base * base,
        half_loss_step_literal: 2.0 * alpha,
        half_loss_step_halved: alpha / 2.0,
    }
}
