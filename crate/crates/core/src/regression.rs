//! Weighted least squares for compatible function approximation.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::pinv;
use crate::mdp::{FiniteMdp, StateActionDistribution, StateDistribution};
use crate::oracle::{evaluate_policy, state_action_visitation_tilde, state_visitation, PolicyTable};
use crate::policy::{center_design, weighted_gram, FeatureMap};

/// Which compatible regression is being solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegressionKind {
    /// Regress `Q` on raw features.
    Q,
    /// Regress `A` on features centered under the current policy.
    Advantage,
}

/// `min_w sum_i weights_i (<design_i, w> - target_i)^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionProblem {
    pub design: DMatrix<f64>,
    pub target: DVector<f64>,
    pub weights: StateActionDistribution,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionSolution {
    pub w: DVector<f64>,
    pub loss_at_w: f64,
    pub loss_at_opt: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ErrorReport {
    pub eps_stat: f64,
    pub eps_bias: f64,
    pub eps_approx: f64,
}

impl ErrorReport {
    /// Entrywise maximum, used for running suprema over iterations.
    pub fn max(self, other: Self) -> Self {
        Self {
            eps_stat: self.eps_stat.max(other.eps_stat),
            eps_bias: self.eps_bias.max(other.eps_bias),
            eps_approx: self.eps_approx.max(other.eps_approx),
        }
    }
}

impl RegressionProblem {
    pub fn new(
        design: DMatrix<f64>,
        target: DVector<f64>,
        weights: StateActionDistribution,
    ) -> Result<Self> {
        if design.nrows() != target.len() {
            return Err(Error::Dimension {
                what: "regression target length",
                expected: design.nrows(),
                actual: target.len(),
            });
        }
        if design.nrows() != weights.len() {
            return Err(Error::Dimension {
                what: "regression weight length",
                expected: design.nrows(),
                actual: weights.len(),
            });
        }
        Ok(Self {
            design,
            target,
            weights,
        })
    }

    pub fn dim(&self) -> usize {
        self.design.ncols()
    }

    fn residual(&self, w: &DVector<f64>) -> DVector<f64> {
        &self.design * w - &self.target
    }

    pub fn loss(&self, w: &DVector<f64>) -> f64 {
        self.residual(w)
            .iter()
            .zip(self.weights.probs())
            .map(|(r, d)| d * r * r)
            .sum()
    }

    /// `grad L(w) = 2 X^T D (X w - t)`.
    pub fn gradient(&self, w: &DVector<f64>) -> DVector<f64> {
        let r = self.residual(w);
        let dr = DVector::from_iterator(
            r.len(),
            r.iter().zip(self.weights.probs()).map(|(r, d)| 2.0 * d * r),
        );
        self.design.transpose() * dr
    }

    /// `Sigma = X^T D X`.
    pub fn covariance(&self) -> DMatrix<f64> {
        weighted_gram(&self.design, self.weights.probs())
    }

    /// `|| Sigma w - X^T D t ||_2`, the first-order optimality residual.
    pub fn normal_residual(&self, w: &DVector<f64>) -> f64 {
        let dt = DVector::from_iterator(
            self.target.len(),
            self.target
                .iter()
                .zip(self.weights.probs())
                .map(|(t, d)| d * t),
        );
        (self.covariance() * w - self.design.transpose() * dt).norm()
    }

    /// Minimal-norm minimizer, from the pseudoinverse of `D^{1/2} X`.
    pub fn minimizer(&self) -> DVector<f64> {
        let mut a = self.design.clone();
        let mut b = self.target.clone();
        for (i, &d) in self.weights.probs().iter().enumerate() {
            let r = libm::sqrt(d);
            let mut row = a.row_mut(i);
            row *= r;
            b[i] *= r;
        }
        pinv(&a) * b
    }

    pub fn solve_exact(&self) -> RegressionSolution {
        let w = self.minimizer();
        let loss = self.loss(&w);
        RegressionSolution {
            w,
            loss_at_w: loss,
            loss_at_opt: loss,
        }
    }

    /// Packages an arbitrary `w` with its loss and the optimal loss.
    pub fn assess(&self, w: DVector<f64>) -> RegressionSolution {
        let loss_at_opt = self.loss(&self.minimizer());
        RegressionSolution {
            loss_at_w: self.loss(&w),
            w,
            loss_at_opt,
        }
    }

    /// Same design and targets under different weights.
    pub fn reweighted(&self, weights: StateActionDistribution) -> Result<Self> {
        Self::new(self.design.clone(), self.target.clone(), weights)
    }
}

/// `(L(w) - L(w*), ||w - w*||^2_Sigma)`; equal for the unconstrained minimizer.
///
/// Both sides are summed row by row from `X (w - w*)` rather than from the
/// losses and `Sigma`, so an ill-conditioned design with a long `w - w*`
/// does not cancel away the digits being compared.
pub fn second_moment_identity_check(problem: &RegressionProblem, w: &DVector<f64>) -> (f64, f64) {
    let w_star = problem.minimizer();
    let shift = &problem.design * (w - &w_star);
    let r_star = problem.residual(&w_star);
    let mut excess = 0.0;
    let mut quad = 0.0;
    for ((u, r), d) in shift.iter().zip(r_star.iter()).zip(problem.weights.probs()) {
        // r_w^2 - r_*^2 = u (u + 2 r_*) with u = r_w - r_*.
        excess += d * u * (u + 2.0 * r);
        quad += d * u * u;
    }
    (excess, quad)
}

/// Design matrix of a regression kind under the current policy.
pub fn design_for(kind: RegressionKind, features: &FeatureMap, table: &PolicyTable) -> DMatrix<f64> {
    match kind {
        RegressionKind::Q => features.matrix().clone(),
        RegressionKind::Advantage => center_design(features.matrix(), table),
    }
}

/// Exact regression problem of the given kind for `table` under `weights`.
pub fn compatible_problem(
    mdp: &FiniteMdp,
    table: &PolicyTable,
    features: &FeatureMap,
    weights: StateActionDistribution,
    kind: RegressionKind,
) -> Result<RegressionProblem> {
    let values = evaluate_policy(mdp, table)?;
    let target = match kind {
        RegressionKind::Q => values.q,
        RegressionKind::Advantage => values.adv,
    };
    RegressionProblem::new(
        design_for(kind, features, table),
        DVector::from_vec(target),
        weights,
    )
}

/// Statistical, approximation and transfer errors of `w` at the current
/// policy: the first two under `d_tilde(nu)`, the transfer error under the
/// comparator measure `d*_s / |A|`.
#[allow(clippy::too_many_arguments)]
pub fn error_report(
    mdp: &FiniteMdp,
    policy_k: &PolicyTable,
    features: &FeatureMap,
    nu: &StateActionDistribution,
    rho: &StateDistribution,
    comparator: &PolicyTable,
    w: &DVector<f64>,
    kind: RegressionKind,
) -> Result<ErrorReport> {
    let d_tilde = state_action_visitation_tilde(mdp, policy_k, nu)?;
    let problem = compatible_problem(mdp, policy_k, features, d_tilde, kind)?;
    let d_star = state_visitation(mdp, comparator, rho)?;
    Ok(errors_with_problem(&problem, &d_star, w))
}

/// Error decomposition given the on-policy problem and the comparator state
/// visitation.
pub fn errors_with_problem(
    problem: &RegressionProblem,
    d_star: &StateDistribution,
    w: &DVector<f64>,
) -> ErrorReport {
    let n_actions = problem.weights.len() / d_star.len();
    let w_star = problem.minimizer();
    let at_opt = problem.loss(&w_star);
    let transfer = StateActionDistribution::spread_uniform(d_star, n_actions);
    let bias = RegressionProblem {
        design: problem.design.clone(),
        target: problem.target.clone(),
        weights: transfer,
    }
    .loss(&w_star);
    ErrorReport {
        eps_stat: (problem.loss(w) - at_opt).max(0.0),
        eps_bias: bias,
        eps_approx: at_opt,
    }
}
