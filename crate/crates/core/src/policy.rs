//! Log-linear (softmax) policies over a fixed feature map, with the
//! simplex mirror-descent step they are equivalent to.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::pinv;
use crate::mdp::{FiniteMdp, StateActionDistribution, StateDistribution};
use crate::oracle::{evaluate_policy, state_action_visitation_bar, PolicyTable};
use crate::rng::RngStream;

/// Probabilities below this are flushed to exact zero before renormalizing.
pub const PROB_FLUSH: f64 = 1e-300;

const GAUSSIAN_STREAM: u64 = 0x6665_6174_5f67_6175;
const PROJECTION_STREAM: u64 = 0x6665_6174_5f70_726a;

/// Feature map `(s, a) -> phi_{s,a}` stored as a `|S||A| x m` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    n_states: usize,
    n_actions: usize,
    phi: DMatrix<f64>,
    b_norm: f64,
}

impl FeatureMap {
    pub fn new(n_states: usize, n_actions: usize, phi: DMatrix<f64>) -> Result<Self> {
        if phi.nrows() != n_states * n_actions {
            return Err(Error::Dimension {
                what: "feature rows",
                expected: n_states * n_actions,
                actual: phi.nrows(),
            });
        }
        if phi.ncols() == 0 {
            return Err(Error::EmptySpace("feature dimension"));
        }
        if let Some(i) = phi.iter().position(|x| !x.is_finite()) {
            // Column-major position back to (pair, coordinate).
            return Err(Error::Invalid(alloc::format!(
                "non-finite feature entry at pair {}, coordinate {}",
                i % phi.nrows(),
                i / phi.nrows()
            )));
        }
        let b_norm = max_row_norm(&phi);
        Ok(Self {
            n_states,
            n_actions,
            phi,
            b_norm,
        })
    }

    /// Builds from row-major data, one row of length `dim` per pair.
    pub fn from_rows(n_states: usize, n_actions: usize, dim: usize, rows: &[f64]) -> Result<Self> {
        if rows.len() != n_states * n_actions * dim {
            return Err(Error::Dimension {
                what: "feature data length",
                expected: n_states * n_actions * dim,
                actual: rows.len(),
            });
        }
        Self::new(
            n_states,
            n_actions,
            DMatrix::from_row_slice(n_states * n_actions, dim, rows),
        )
    }

    /// Tabular features: `phi_{s,a} = e_{(s,a)}`, `m = |S||A|`.
    pub fn one_hot(n_states: usize, n_actions: usize) -> Self {
        let n = n_states * n_actions;
        Self {
            n_states,
            n_actions,
            phi: DMatrix::identity(n, n),
            b_norm: 1.0,
        }
    }

    /// I.i.d. standard normal entries.
    pub fn gaussian(n_states: usize, n_actions: usize, dim: usize, seed: u64) -> Result<Self> {
        let mut rng = RngStream::new(seed, GAUSSIAN_STREAM).rng();
        let n = n_states * n_actions;
        let data: Vec<f64> = (0..n * dim).map(|_| rng.normal()).collect();
        Self::from_rows(n_states, n_actions, dim, &data)
    }

    /// One-hot features composed with a random `|S||A| x m` projection with
    /// orthonormal columns; `m < |S||A|` leaves a nonzero approximation error
    /// for generic targets.
    pub fn rank_reduced(n_states: usize, n_actions: usize, dim: usize, seed: u64) -> Result<Self> {
        let n = n_states * n_actions;
        if dim == 0 || dim >= n {
            return Err(Error::Invalid(alloc::format!(
                "rank-reduced features need 1 <= m < |S||A| = {n}, got m = {dim}"
            )));
        }
        let mut rng = RngStream::new(seed, PROJECTION_STREAM).rng();
        let g = DMatrix::from_fn(n, dim, |_, _| rng.normal());
        let q = g.qr().q();
        Self::new(n_states, n_actions, q)
    }

    /// Same map with every feature multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(self.n_states, self.n_actions, &self.phi * c)
    }

    #[inline]
    pub fn n_states(&self) -> usize {
        self.n_states
    }

    #[inline]
    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.phi.ncols()
    }

    /// `B = max_{s,a} ||phi_{s,a}||_2`.
    #[inline]
    pub fn b_norm(&self) -> f64 {
        self.b_norm
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.phi
    }

    /// Rows as row-major data.
    pub fn to_rows(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.phi.len());
        for i in 0..self.phi.nrows() {
            out.extend(self.phi.row(i).iter());
        }
        out
    }

    /// Recomputes `B` and checks it against the stored value.
    pub fn check_b_norm(&self) -> bool {
        (max_row_norm(&self.phi) - self.b_norm).abs() <= 1e-12
    }

    /// Scores `phi_{s,a}^T theta` for every pair.
    pub fn logits(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        if theta.len() != self.dim() {
            return Err(Error::Dimension {
                what: "parameter length",
                expected: self.dim(),
                actual: theta.len(),
            });
        }
        Ok(&self.phi * theta)
    }

    fn check_for(&self, mdp: &FiniteMdp) -> Result<()> {
        if self.n_states != mdp.n_states() || self.n_actions != mdp.n_actions() {
            return Err(Error::Dimension {
                what: "feature map rows vs MDP pairs",
                expected: mdp.n_pairs(),
                actual: self.phi.nrows(),
            });
        }
        Ok(())
    }
}

fn max_row_norm(phi: &DMatrix<f64>) -> f64 {
    (0..phi.nrows())
        .map(|i| phi.row(i).norm())
        .fold(0.0, f64::max)
}

/// Parameter vector together with the features it scores.
#[derive(Debug, Clone)]
pub struct LogLinearPolicy<'a> {
    pub theta: DVector<f64>,
    pub features: &'a FeatureMap,
}

impl<'a> LogLinearPolicy<'a> {
    /// `theta = 0`, i.e. the uniform policy.
    pub fn zero(features: &'a FeatureMap) -> Self {
        Self {
            theta: DVector::zeros(features.dim()),
            features,
        }
    }

    pub fn table(&self) -> Result<PolicyTable> {
        policy_table(&self.theta, self.features)
    }

    pub fn centered(&self) -> Result<CenteredFeatures> {
        centered_features(&self.theta, self.features)
    }
}

/// Rows `phi_{s,a} - E_{a' ~ pi_s} phi_{s,a'}`.
#[derive(Debug, Clone, PartialEq)]
pub struct CenteredFeatures {
    pub phi_bar: DMatrix<f64>,
}

/// Row-wise softmax of `phi theta`.
pub fn policy_table(theta: &DVector<f64>, features: &FeatureMap) -> Result<PolicyTable> {
    let logits = features.logits(theta)?;
    let na = features.n_actions();
    let mut probs = vec![0.0; logits.len()];
    for s in 0..features.n_states() {
        let row = &logits.as_slice()[s * na..(s + 1) * na];
        if let Some(a) = row.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFiniteLogit {
                state: s,
                action: a,
            });
        }
        softmax_into(row, &mut probs[s * na..(s + 1) * na]);
    }
    PolicyTable::new(features.n_states(), na, probs)
}

/// Stable softmax with flushing of negligible mass.
fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = libm::exp(z - max);
    }
    flush_and_normalize(out);
}

fn flush_and_normalize(p: &mut [f64]) {
    let mut sum = 0.0;
    for x in p.iter_mut() {
        if *x < PROB_FLUSH {
            *x = 0.0;
        }
        sum += *x;
    }
    for x in p.iter_mut() {
        *x /= sum;
    }
}

/// Centers a design matrix per state under `table`.
pub fn center_design(design: &DMatrix<f64>, table: &PolicyTable) -> DMatrix<f64> {
    let na = table.n_actions();
    let mut out = design.clone();
    for s in 0..table.n_states() {
        let mut mean = DVector::zeros(design.ncols());
        for a in 0..na {
            mean.axpy(table.prob(s, a), &design.row(s * na + a).transpose(), 1.0);
        }
        for a in 0..na {
            let mut row = out.row_mut(s * na + a);
            row -= mean.transpose();
        }
    }
    out
}

pub fn centered_features(theta: &DVector<f64>, features: &FeatureMap) -> Result<CenteredFeatures> {
    let table = policy_table(theta, features)?;
    Ok(CenteredFeatures {
        phi_bar: center_design(features.matrix(), &table),
    })
}

/// `log pi_{s,a}(theta)` for every pair, via log-sum-exp.
pub fn log_policy(theta: &DVector<f64>, features: &FeatureMap) -> Result<Vec<f64>> {
    let logits = features.logits(theta)?;
    let na = features.n_actions();
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.as_slice().chunks(na) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + libm::log(row.iter().map(|z| libm::exp(z - max)).sum::<f64>());
        out.extend(row.iter().map(|z| z - lse));
    }
    Ok(out)
}

/// `sum_i w_i x_i x_i^T` over the rows of `design`.
pub fn weighted_gram(design: &DMatrix<f64>, weights: &[f64]) -> DMatrix<f64> {
    let scaled = weighted_root(design, weights);
    scaled.transpose() * &scaled
}

/// `diag(sqrt(weights)) * design`, the square root of [`weighted_gram`].
pub fn weighted_root(design: &DMatrix<f64>, weights: &[f64]) -> DMatrix<f64> {
    let mut scaled = design.clone();
    for (i, &w) in weights.iter().enumerate() {
        let mut row = scaled.row_mut(i);
        row *= libm::sqrt(w);
    }
    scaled
}

/// `F(theta) = E_{(s,a) ~ d_bar^theta(rho)}[phi_bar phi_bar^T]`.
pub fn fisher_matrix(
    mdp: &FiniteMdp,
    theta: &DVector<f64>,
    features: &FeatureMap,
    rho: &StateDistribution,
) -> Result<DMatrix<f64>> {
    features.check_for(mdp)?;
    let table = policy_table(theta, features)?;
    let d_bar = state_action_visitation_bar(mdp, &table, rho)?;
    let phi_bar = center_design(features.matrix(), &table);
    Ok(weighted_gram(&phi_bar, d_bar.probs()))
}

/// Exact gradient of `V_rho(theta)`:
/// `E_{(s,a) ~ d_bar}[A_{s,a} phi_bar_{s,a}] / (1 - gamma)`.
pub fn policy_gradient(
    mdp: &FiniteMdp,
    theta: &DVector<f64>,
    features: &FeatureMap,
    rho: &StateDistribution,
) -> Result<DVector<f64>> {
    features.check_for(mdp)?;
    let table = policy_table(theta, features)?;
    let values = evaluate_policy(mdp, &table)?;
    let d_bar = state_action_visitation_bar(mdp, &table, rho)?;
    let phi_bar = center_design(features.matrix(), &table);
    let weighted = DVector::from_iterator(
        d_bar.len(),
        d_bar
            .probs()
            .iter()
            .zip(&values.adv)
            .map(|(d, a)| d * a / (1.0 - mdp.gamma())),
    );
    Ok(phi_bar.transpose() * weighted)
}

/// Natural gradient direction `F^+ grad V`.
///
/// The gradient always lies in the range of `F`; a residual above
/// `1e-8 (1 + |grad V| + |F| |dir|)` means the pseudoinverse cutoff dropped part of it.
pub fn npg_direction_fisher(
    mdp: &FiniteMdp,
    theta: &DVector<f64>,
    features: &FeatureMap,
    rho: &StateDistribution,
) -> Result<DVector<f64>> {
    features.check_for(mdp)?;
    let table = policy_table(theta, features)?;
    let d_bar = state_action_visitation_bar(mdp, &table, rho)?;
    let root = weighted_root(&center_design(features.matrix(), &table), d_bar.probs());
    let grad = policy_gradient(mdp, theta, features, rho)?;
    // F^+ = R^+ (R^+)^T for F = R^T R; avoids squaring the condition number.
    let root_pinv = pinv(&root);
    let dir = &root_pinv * (root_pinv.transpose() * &grad);
    let f = root.transpose() * &root;
    let residual = (&f * &dir - &grad).norm();
    let tolerance = 1e-8 * (1.0 + grad.norm() + f.norm() * dir.norm());
    if residual > tolerance {
        return Err(Error::PseudoinverseTolerance {
            residual,
            tolerance,
        });
    }
    Ok(dir)
}

/// `KL(p || q) = sum_a p_a log(p_a / q_a)` with `0 log 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Dimension {
            what: "KL argument length",
            expected: p.len(),
            actual: q.len(),
        });
    }
    let mut acc = 0.0;
    for (index, (&pa, &qa)) in p.iter().zip(q).enumerate() {
        if pa == 0.0 {
            continue;
        }
        if qa == 0.0 {
            return Err(Error::InfiniteDivergence { index });
        }
        acc += pa * libm::log(pa / qa);
    }
    Ok(acc.max(0.0))
}

/// `E_{s ~ d}[KL(pi_s || pi'_s)]`, the weighted divergence between two
/// policies.
pub fn expected_kl(d: &StateDistribution, pi: &PolicyTable, pi_prime: &PolicyTable) -> Result<f64> {
    let mut acc = 0.0;
    for (s, &w) in d.probs().iter().enumerate() {
        if w > 0.0 {
            acc += w * kl_divergence(pi.row(s), pi_prime.row(s))?;
        }
    }
    Ok(acc)
}

/// `p = q * exp(-eta g) / Z`, computed with max-subtraction over the support
/// of `q`. Huge `eta` degrades to a greedy argmin over that support.
pub fn mirror_descent_step(q: &[f64], g: &[f64], eta: f64) -> Vec<f64> {
    debug_assert_eq!(q.len(), g.len());
    let max = q
        .iter()
        .zip(g)
        .filter(|(&qa, _)| qa > 0.0)
        .map(|(_, &ga)| -eta * ga)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = q
        .iter()
        .zip(g)
        .map(|(&qa, &ga)| {
            if qa > 0.0 {
                qa * libm::exp(-eta * ga - max)
            } else {
                0.0
            }
        })
        .collect();
    flush_and_normalize(&mut p);
    p
}

/// Row-wise mirror step on a whole table with `g_s = design_s w`.
pub fn mirror_update_table(
    table: &PolicyTable,
    design: &DMatrix<f64>,
    w: &DVector<f64>,
    eta: f64,
) -> Result<PolicyTable> {
    let g = design * w;
    let na = table.n_actions();
    let mut probs = Vec::with_capacity(table.probs().len());
    for s in 0..table.n_states() {
        probs.extend(mirror_descent_step(
            table.row(s),
            &g.as_slice()[s * na..(s + 1) * na],
            eta,
        ));
    }
    PolicyTable::new(table.n_states(), na, probs)
}

/// Both sides of the three-point inequality
/// `f(x+) + D(x+, q) <= f(u) + D(u, q) - D(u, x+)` with `f = eta <g, .>`.
pub fn three_point_sides(q: &[f64], g: &[f64], eta: f64, u: &[f64]) -> Result<(f64, f64)> {
    let x = mirror_descent_step(q, g, eta);
    let f = |v: &[f64]| eta * v.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
    let lhs = f(&x) + kl_divergence(&x, q)?;
    let rhs = f(u) + kl_divergence(u, q)? - kl_divergence(u, &x)?;
    Ok((lhs, rhs))
}

/// Checks the three-point inequality with `1e-10` slack.
pub fn three_point_check(q: &[f64], g: &[f64], eta: f64, u: &[f64]) -> bool {
    match three_point_sides(q, g, eta, u) {
        Ok((lhs, rhs)) => lhs <= rhs + 1e-10,
        Err(_) => false,
    }
}

/// Weights for a regression under `d_tilde* = d*_s / |A|`.
pub fn comparator_pair_measure(d_star: &StateDistribution, n_actions: usize) -> StateActionDistribution {
    StateActionDistribution::spread_uniform(d_star, n_actions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::generate_random_mdp;

    #[test]
    fn zero_parameter_is_uniform() {
        let f = FeatureMap::gaussian(3, 4, 5, 1).unwrap();
        let t = policy_table(&DVector::zeros(5), &f).unwrap();
        assert!(t.probs().iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn one_hot_softmax_value() {
        let f = FeatureMap::one_hot(1, 2);
        let theta = DVector::from_vec(vec![libm::log(1.0), libm::log(2.0)]);
        let t = policy_table(&theta, &f).unwrap();
        assert!((t.prob(0, 0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((t.prob(0, 1) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn per_state_shift_invariance() {
        let f = FeatureMap::one_hot(2, 3);
        let theta = DVector::from_vec(vec![0.1, -0.4, 2.0, 1.0, 0.0, -3.0]);
        let mut shifted = theta.clone();
        for a in 0..3 {
            shifted[a] += 7.5;
            shifted[3 + a] -= 100.0;
        }
        let a = policy_table(&theta, &f).unwrap();
        let b = policy_table(&shifted, &f).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-14);
    }

    #[test]
    fn huge_logits_stay_finite() {
        let f = FeatureMap::one_hot(1, 3);
        let t = policy_table(&DVector::from_vec(vec![1e12, 0.0, -1e12]), &f).unwrap();
        assert_eq!(t.row(0), &[1.0, 0.0, 0.0]);
        let err = policy_table(&DVector::from_vec(vec![f64::NAN, 0.0, 0.0]), &f).unwrap_err();
        assert_eq!(err, Error::NonFiniteLogit { state: 0, action: 0 });
    }

    #[test]
    fn single_action_centering_vanishes() {
        let f = FeatureMap::gaussian(4, 1, 3, 2).unwrap();
        let c = centered_features(&DVector::from_vec(vec![0.3, -1.0, 2.0]), &f).unwrap();
        assert!(c.phi_bar.iter().all(|&x| x.abs() < 1e-15));
        let m = generate_random_mdp(4, 1, 0.9, 1).unwrap();
        let fm = fisher_matrix(&m, &DVector::zeros(3), &f, &StateDistribution::uniform(4)).unwrap();
        assert!(fm.iter().all(|&x| x.abs() < 1e-15));
    }

    #[test]
    fn centering_has_zero_policy_mean() {
        let f = FeatureMap::gaussian(3, 4, 6, 9).unwrap();
        let theta = DVector::from_fn(6, |i, _| 0.3 * i as f64 - 0.5);
        let t = policy_table(&theta, &f).unwrap();
        let c = centered_features(&theta, &f).unwrap();
        for s in 0..3 {
            for j in 0..6 {
                let m: f64 = (0..4).map(|a| t.prob(s, a) * c.phi_bar[(s * 4 + a, j)]).sum();
                assert!(m.abs() < 1e-10);
            }
        }
    }

    #[test]
    fn fisher_matches_brute_force_two_by_two() {
        let m = generate_random_mdp(2, 2, 0.8, 5).unwrap();
        let f = FeatureMap::gaussian(2, 2, 3, 5).unwrap();
        let rho = StateDistribution::new(vec![0.3, 0.7]).unwrap();
        let theta = DVector::from_vec(vec![0.5, -0.2, 0.1]);
        let fisher = fisher_matrix(&m, &theta, &f, &rho).unwrap();
        let t = policy_table(&theta, &f).unwrap();
        let d = state_action_visitation_bar(&m, &t, &rho).unwrap();
        let pb = center_design(f.matrix(), &t);
        let mut brute = DMatrix::<f64>::zeros(3, 3);
        for i in 0..4 {
            for j in 0..3 {
                for k in 0..3 {
                    brute[(j, k)] += d.probs()[i] * pb[(i, j)] * pb[(i, k)];
                }
            }
        }
        assert!((fisher - brute).abs().max() < 1e-14);
    }

    #[test]
    fn kl_values() {
        assert_eq!(kl_divergence(&[0.2, 0.8], &[0.2, 0.8]).unwrap(), 0.0);
        let d = kl_divergence(&[1.0, 0.0, 0.0, 0.0], &[0.25; 4]).unwrap();
        assert!((d - libm::log(4.0)).abs() < 1e-15);
        let d = kl_divergence(&[0.7, 0.3], &[0.5, 0.5]).unwrap();
        let expected = 0.7 * libm::log(1.4) + 0.3 * libm::log(0.6);
        assert!((d - expected).abs() < 1e-15);
        assert_eq!(
            kl_divergence(&[0.5, 0.5], &[1.0, 0.0]),
            Err(Error::InfiniteDivergence { index: 1 })
        );
    }

    #[test]
    fn mirror_step_values() {
        assert_eq!(mirror_descent_step(&[0.3, 0.7], &[1.0, 2.0], 0.0), vec![0.3, 0.7]);
        let p = mirror_descent_step(&[0.3, 0.7], &[5.0, 5.0], 3.0);
        assert!((p[0] - 0.3).abs() < 1e-15 && (p[1] - 0.7).abs() < 1e-15);
        let p = mirror_descent_step(&[0.5, 0.5], &[0.0, libm::log(2.0)], 1.0);
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
        let p = mirror_descent_step(&[0.5, 0.5], &[0.0, 1.0], 1e300);
        assert_eq!(p, vec![1.0, 0.0]);
    }

    #[test]
    fn three_point_tight_at_minimizer() {
        let q = [0.2, 0.5, 0.3];
        let g = [0.4, -1.0, 2.0];
        let x = mirror_descent_step(&q, &g, 0.7);
        let (l, r) = three_point_sides(&q, &g, 0.7, &x).unwrap();
        assert!((l - r).abs() < 1e-12);
        assert!(three_point_check(&q, &g, 0.0, &[0.1, 0.1, 0.8]));
    }

    #[test]
    fn rank_reduced_has_orthonormal_columns() {
        let f = FeatureMap::rank_reduced(5, 3, 6, 4).unwrap();
        let g = f.matrix().transpose() * f.matrix();
        assert!((g - DMatrix::<f64>::identity(6, 6)).abs().max() < 1e-12);
        assert!(f.check_b_norm());
        assert!(FeatureMap::rank_reduced(2, 2, 4, 1).is_err());
    }
}
