//! Monte Carlo checks of the samplers and SGD solvers against the exact
//! oracles.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::mdp::StateActionDistribution;
use crate::oracle::{evaluate_policy, state_action_visitation_tilde};
use crate::regression::{RegressionKind, RegressionProblem};
use crate::sampling::{averaged_sgd, stochastic_gradient, MeanEstimate, SampleProvider, Sampler, SgdConfig};

/// Per-pair sample statistics next to the exact values.
#[derive(Debug, Clone, PartialEq)]
pub struct PairStats {
    pub pair: usize,
    pub count: usize,
    pub q_hat: MeanEstimate,
    pub exact_q: f64,
    /// Advantage rollouts only.
    pub a_hat: Option<MeanEstimate>,
    pub exact_a: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerReport {
    pub n_draws: usize,
    /// Total variation between accepted-pair frequencies and `d_tilde`.
    pub tv: f64,
    /// Mean of `h + 1`.
    pub accept_len: MeanEstimate,
    pub expected_len: f64,
    /// Pearson statistic of `h` against `(1 - gamma) gamma^h`, with bins
    /// merged into a tail so every expected count is at least 5.
    pub accept_chi2: f64,
    pub accept_chi2_df: usize,
    pub pairs: Vec<PairStats>,
    /// `A_hat` over all draws (advantage rollouts only).
    pub a_hat_overall: Option<MeanEstimate>,
}

impl SamplerReport {
    /// Upper acceptance threshold `df + 4 sqrt(2 df)` for the Pearson
    /// statistic (about four standard deviations).
    pub fn chi2_threshold(&self) -> f64 {
        let df = self.accept_chi2_df as f64;
        df + 4.0 * libm::sqrt(2.0 * df)
    }

    pub fn accept_len_ok(&self, k: f64) -> bool {
        self.accept_len.within(self.expected_len, k)
    }

    /// Every visited pair's mean `Q_hat` (and `A_hat`) within `k` standard
    /// errors of the exact value.
    pub fn pair_means_ok(&self, k: f64) -> bool {
        self.pairs.iter().filter(|p| p.count > 1).all(|p| {
            p.q_hat.within(p.exact_q, k) && p.a_hat.is_none_or(|a| a.within(p.exact_a, k))
        })
    }
}

/// Draws `n_draws` rollouts of `kind` and compares them with the oracles.
pub fn sampler_report<P: SampleProvider + ?Sized>(
    sampler: &Sampler<'_>,
    nu: &StateActionDistribution,
    kind: RegressionKind,
    n_draws: usize,
    seed: u64,
    provider: &P,
) -> Result<SamplerReport> {
    let mdp = sampler.mdp();
    let gamma = mdp.gamma();
    let na = mdp.n_actions();
    let exact = evaluate_policy(mdp, sampler.policy())?;
    let d_tilde = state_action_visitation_tilde(mdp, sampler.policy(), nu)?;
    let draws = provider.draw(sampler, kind, seed, 0, 0..n_draws)?;

    let np = mdp.n_pairs();
    let mut q_by_pair: Vec<Vec<f64>> = vec![Vec::new(); np];
    let mut a_by_pair: Vec<Vec<f64>> = vec![Vec::new(); np];
    let mut lens = Vec::with_capacity(n_draws);
    let mut a_all = Vec::new();
    for d in &draws {
        let p = d.state * na + d.action;
        q_by_pair[p].push(d.q_hat);
        if d.v_hat.is_some() {
            a_by_pair[p].push(d.a_hat());
            a_all.push(d.a_hat());
        }
        lens.push(d.accept_time as f64 + 1.0);
    }
    let n = n_draws as f64;
    let tv = 0.5
        * q_by_pair
            .iter()
            .zip(d_tilde.probs())
            .map(|(v, p)| (v.len() as f64 / n - p).abs())
            .sum::<f64>();

    let (accept_chi2, accept_chi2_df) = geometric_chi2(&draws.iter().map(|d| d.accept_time).collect::<Vec<_>>(), gamma);

    let pairs = (0..np)
        .map(|p| PairStats {
            pair: p,
            count: q_by_pair[p].len(),
            q_hat: MeanEstimate::from_values(&q_by_pair[p]),
            exact_q: exact.q[p],
            a_hat: (kind == RegressionKind::Advantage).then(|| MeanEstimate::from_values(&a_by_pair[p])),
            exact_a: exact.adv[p],
        })
        .collect();

    Ok(SamplerReport {
        n_draws,
        tv,
        accept_len: MeanEstimate::from_values(&lens),
        expected_len: 1.0 / (1.0 - gamma),
        accept_chi2,
        accept_chi2_df,
        pairs,
        a_hat_overall: (kind == RegressionKind::Advantage).then(|| MeanEstimate::from_values(&a_all)),
    })
}

/// Pearson statistic and degrees of freedom of accept times against the
/// geometric law. `gamma = 0` puts all mass at 0 and gives `(0, 0)`.
pub fn geometric_chi2(times: &[u64], gamma: f64) -> (f64, usize) {
    let n = times.len() as f64;
    // Bins 0..last, plus a tail bin for h >= last, each with expected >= 5.
    let mut last = 0usize;
    while n * (1.0 - gamma) * libm::pow(gamma, (last + 1) as f64) >= 5.0
        && n * libm::pow(gamma, (last + 2) as f64) >= 5.0
    {
        last += 1;
    }
    if last == 0 {
        return (0.0, 0);
    }
    let mut counts = vec![0usize; last + 1];
    for &h in times {
        counts[(h as usize).min(last)] += 1;
    }
    let stat = counts
        .iter()
        .enumerate()
        .map(|(k, &o)| {
            let p = if k < last {
                (1.0 - gamma) * libm::pow(gamma, k as f64)
            } else {
                libm::pow(gamma, last as f64)
            };
            let e = n * p;
            (o as f64 - e) * (o as f64 - e) / e
        })
        .sum();
    (stat, last)
}

/// Excess risk of averaged SGD against the exact minimizer, one entry per
/// seed.
pub fn sgd_excess_risks<P: SampleProvider + ?Sized>(
    sampler: &Sampler<'_>,
    problem: &RegressionProblem,
    kind: RegressionKind,
    n_steps: usize,
    step_size: f64,
    seeds: Range<u64>,
    provider: &P,
) -> Result<Vec<f64>> {
    let opt = problem.loss(&problem.minimizer());
    seeds
        .map(|seed| {
            let cfg = SgdConfig::new(n_steps, step_size, seed);
            let out = averaged_sgd(sampler, &problem.design, kind, &cfg, provider)?;
            Ok((problem.loss(&out.w) - opt).max(0.0))
        })
        .collect()
}

/// Per-coordinate means of `n_draws` stochastic gradients at `w`, and the
/// exact gradient of the regression loss.
pub fn gradient_check<P: SampleProvider + ?Sized>(
    sampler: &Sampler<'_>,
    problem: &RegressionProblem,
    kind: RegressionKind,
    w: &DVector<f64>,
    n_draws: usize,
    seed: u64,
    provider: &P,
) -> Result<(Vec<MeanEstimate>, DVector<f64>)> {
    let na = sampler.mdp().n_actions();
    let draws = provider.draw(sampler, kind, seed, 0, 0..n_draws)?;
    let m = problem.dim();
    let mut grads = DMatrix::zeros(m, n_draws);
    for (j, d) in draws.iter().enumerate() {
        grads.set_column(j, &stochastic_gradient(d, &problem.design, na, w, kind));
    }
    let means = (0..m)
        .map(|i| MeanEstimate::from_values(grads.row(i).transpose().as_slice()))
        .collect();
    Ok((means, problem.gradient(w)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chi2_of_exact_counts_is_small() {
        let gamma: f64 = 0.5;
        let mut times = Vec::new();
        for h in 0..12u64 {
            let c = (4096.0 * (1.0 - gamma) * gamma.powi(h as i32)) as usize;
            times.extend(core::iter::repeat_n(h, c));
        }
        let (stat, df) = geometric_chi2(&times, gamma);
        assert!(df >= 5);
        assert!(stat < 1.0, "{stat}");
    }

    #[test]
    fn chi2_flags_wrong_law() {
        let times = vec![0u64; 10_000];
        let (stat, df) = geometric_chi2(&times, 0.9);
        assert!(stat > df as f64 + 4.0 * libm::sqrt(2.0 * df as f64));
    }
}
