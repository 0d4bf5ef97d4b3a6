//! Named experiments. Each returns pass/fail assertions plus the traces and
//! measurements behind them.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use serde_json::{json, Value};

use npg_core::diagnostics::{relative_condition_number, sgd_bound_advantage, sgd_bound_q, bound_value, BoundKind};
use npg_core::driver::{default_eta0, run, Mode, RunConfig, RunSummary, RunTrace, SgdSettings, StepSchedule};
use npg_core::mdp::{generate_chain_mdp, generate_random_mdp};
use npg_core::oracle::{
    evaluate_policy, optimal_policy, performance_difference, state_action_visitation_bar,
    state_action_visitation_tilde, state_visitation, visitation_fixed_point,
};
use npg_core::policy::{
    center_design, log_policy, mirror_update_table, npg_direction_fisher, policy_gradient, policy_table,
    three_point_sides,
};
use npg_core::regression::{compatible_problem, second_moment_identity_check, ErrorReport};
use npg_core::sampling::{estimate_q_hat_second_moment, SampleProvider};
use npg_core::validation::{sampler_report, sgd_excess_risks};
use npg_core::{
    FeatureMap, FiniteMdp, PolicyTable, RegressionKind, RegressionProblem, RngStream, Sampler,
    StateActionDistribution, StateDistribution,
};

use crate::config::{Algorithm, ExperimentConfig, FeatureSpec, MdpSpec, Recipe, RhoSpec, ScheduleSpec};
use crate::error::{CliError, CliResult};
use crate::io::{fmt_float, num, read_json, FeatureDocument, MdpDocument};

/// Stream id for parameter and instance draws made by the recipes.
const RECIPE_STREAM: u64 = 0x7265_6369_7065;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Assertion {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct RecipeReport {
    pub recipe: Recipe,
    pub assertions: Vec<Assertion>,
    /// `(label, trace)`; each becomes `trace_<label>.csv`.
    pub traces: Vec<(String, RunTrace)>,
    pub details: Value,
    /// Informational lines (e.g. vacuous bounds), not assertions.
    pub notes: Vec<String>,
}

impl RecipeReport {
    fn new(recipe: Recipe) -> Self {
        Self {
            recipe,
            assertions: Vec::new(),
            traces: Vec::new(),
            details: json!({}),
            notes: Vec::new(),
        }
    }

    fn check(&mut self, name: &str, passed: bool, detail: impl Into<String>) {
        self.assertions.push(Assertion {
            name: name.to_string(),
            passed,
            detail: detail.into(),
        });
    }

    pub fn passed(&self) -> bool {
        self.assertions.iter().all(|a| a.passed)
    }

    pub fn assertion(&self, name: &str) -> Option<&Assertion> {
        self.assertions.iter().find(|a| a.name == name)
    }

    /// `PASS name: detail` lines, notes, then the overall verdict.
    pub fn summary_lines(&self) -> Vec<String> {
        let mut lines: Vec<String> = self
            .assertions
            .iter()
            .map(|a| format!("{} {}: {}", if a.passed { "PASS" } else { "FAIL" }, a.name, a.detail))
            .collect();
        lines.extend(self.notes.iter().map(|n| format!("NOTE {n}")));
        lines.push(format!(
            "verdict {}: {}",
            self.recipe.name(),
            if self.passed() { "PASS" } else { "FAIL" }
        ));
        lines
    }
}

pub fn run_recipe(cfg: &ExperimentConfig, provider: &(dyn SampleProvider + Sync)) -> CliResult<RecipeReport> {
    match cfg.recipe {
        Recipe::ExactTabularLinear => exact_tabular_linear(cfg, provider),
        Recipe::ExactConstantSublinear => exact_constant_sublinear(cfg, provider),
        Recipe::ApproxFeaturesLinear => approx_features_linear(cfg, provider),
        Recipe::SampledQnpg => sampled(cfg, provider, RegressionKind::Q),
        Recipe::SampledNpg => sampled(cfg, provider, RegressionKind::Advantage),
        Recipe::SamplerValidation => sampler_validation(cfg, provider),
        Recipe::SgdRate => sgd_rate(cfg, provider),
        Recipe::IdentityChecks => identity_checks(cfg),
    }
}

// ---- instance construction ----

/// `(label, mdp)` for every configured instance.
pub fn build_mdps(cfg: &ExperimentConfig) -> CliResult<Vec<(String, FiniteMdp)>> {
    match &cfg.mdp {
        MdpSpec::Random {
            states,
            actions,
            seed,
            count,
        } => (0..*count as u64)
            .map(|i| {
                let s = seed + i;
                Ok((format!("mdp{s}"), generate_random_mdp(*states, *actions, cfg.gamma, s)?))
            })
            .collect(),
        MdpSpec::Chain { states } => Ok(vec![("chain".into(), generate_chain_mdp(*states, cfg.gamma)?)]),
        MdpSpec::File { path } => {
            let doc: MdpDocument = read_json(path)?;
            Ok(vec![("file".into(), doc.into_mdp(cfg.gamma)?)])
        }
    }
}

pub fn build_features(cfg: &ExperimentConfig, mdp: &FiniteMdp) -> CliResult<FeatureMap> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let f = match &cfg.features {
        FeatureSpec::OneHot => FeatureMap::one_hot(ns, na),
        FeatureSpec::Gaussian { dim, seed } => FeatureMap::gaussian(ns, na, *dim, *seed)?,
        FeatureSpec::RankReduced { dim, seed } => FeatureMap::rank_reduced(ns, na, *dim, *seed)?,
        FeatureSpec::File { path } => {
            let doc: FeatureDocument = read_json(path)?;
            let f = doc.into_features()?;
            if f.n_states() != ns || f.n_actions() != na {
                return Err(CliError::usage("features.path", "feature shape does not match the MDP"));
            }
            f
        }
    };
    if cfg.feature_scale == 1.0 {
        Ok(f)
    } else {
        Ok(f.scaled(cfg.feature_scale)?)
    }
}

fn build_rho(spec: RhoSpec, mdp: &FiniteMdp) -> CliResult<StateDistribution> {
    Ok(match spec {
        RhoSpec::Uniform => StateDistribution::uniform(mdp.n_states()),
        RhoSpec::StationaryOptimal => visitation_fixed_point(mdp, &optimal_policy(mdp)?)?,
    })
}

fn build_schedule(cfg: &ExperimentConfig, mdp: &FiniteMdp) -> CliResult<StepSchedule> {
    Ok(match cfg.schedule {
        ScheduleSpec::Geometric { eta0 } => StepSchedule::geometric(
            eta0.unwrap_or_else(|| default_eta0(mdp.n_actions(), cfg.gamma)),
            cfg.gamma,
        )?,
        ScheduleSpec::Constant { eta } => StepSchedule::constant(eta)?,
    })
}

fn kinds(alg: Algorithm) -> Vec<RegressionKind> {
    match alg {
        Algorithm::Qnpg => vec![RegressionKind::Q],
        Algorithm::Npg => vec![RegressionKind::Advantage],
        Algorithm::Both => vec![RegressionKind::Q, RegressionKind::Advantage],
    }
}

fn kind_tag(kind: RegressionKind) -> &'static str {
    match kind {
        RegressionKind::Q => "qnpg",
        RegressionKind::Advantage => "npg",
    }
}

fn normals(seed: u64, stream: u64, n: usize) -> Vec<f64> {
    let mut rng = RngStream::new(seed, RECIPE_STREAM ^ stream).rng();
    (0..n).map(|_| rng.normal()).collect()
}

fn random_simplex(seed: u64, stream: u64, n: usize) -> Vec<f64> {
    let mut rng = RngStream::new(seed, RECIPE_STREAM ^ stream).rng();
    let v: Vec<f64> = (0..n).map(|_| -rng.uniform_open0().ln()).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

fn random_table(seed: u64, stream: u64, ns: usize, na: usize) -> CliResult<PolicyTable> {
    let probs = (0..ns)
        .flat_map(|s| random_simplex(seed, stream.wrapping_mul(1009).wrapping_add(s as u64), na))
        .collect();
    Ok(PolicyTable::new(ns, na, probs)?)
}

// ---- exact-mode trace checks ----

#[derive(Default)]
struct Worst {
    value: f64,
    at: String,
}

impl Worst {
    fn new() -> Self {
        Self {
            value: f64::NEG_INFINITY,
            at: String::new(),
        }
    }

    fn see(&mut self, v: f64, at: impl FnOnce() -> String) {
        if v > self.value || self.value == f64::NEG_INFINITY {
            self.value = v;
            self.at = at();
        }
    }
}

/// Largest `gap - bound` over every per-iterate bound; the averaged bounds
/// are compared with the running-average gap.
fn bound_margin(trace: &RunTrace, label: &str, worst: &mut Worst) {
    for r in &trace.records {
        for (id, b) in &r.bounds {
            let measured = if id.bounds_average() {
                match r.avg_gap {
                    Some(a) => a,
                    None => continue,
                }
            } else {
                r.gap
            };
            worst.see(measured - b, || format!("{label} k={} {}", r.k, id.name()));
        }
    }
}

fn mismatch_margin(trace: &RunTrace, label: &str, worst: &mut Worst) {
    let vt = trace.summary.mismatch_rho;
    for r in &trace.records {
        worst.see(r.coefficients.mismatch_k / vt, || format!("{label} k={}", r.k));
    }
}

fn run_exact(
    mdp: &FiniteMdp,
    features: &FeatureMap,
    rho: &StateDistribution,
    schedule: StepSchedule,
    iterations: usize,
    kind: RegressionKind,
    provider: &(dyn SampleProvider + Sync),
) -> CliResult<RunTrace> {
    let nu = StateActionDistribution::uniform(mdp.n_pairs());
    let config = RunConfig::new(kind, schedule, iterations, Mode::Exact);
    Ok(run(mdp, features, rho, &nu, &config, provider)?)
}

fn exact_tabular_linear(cfg: &ExperimentConfig, provider: &(dyn SampleProvider + Sync)) -> CliResult<RecipeReport> {
    let mut rep = RecipeReport::new(cfg.recipe);
    let mut envelope = Worst::new();
    let mut gamma_envelope = Worst::new();
    let mut final_ratio = Worst::new();
    let mut bounds = Worst::new();
    let mut mismatch = Worst::new();
    let mut pmd = Worst::new();
    let mut per_mdp = Vec::new();
    let g = cfg.gamma;
    for (label, mdp) in build_mdps(cfg)? {
        let features = build_features(cfg, &mdp)?;
        let schedule = build_schedule(cfg, &mdp)?;
        let rho = build_rho(cfg.rho, &mdp)?;
        let t = run_exact(&mdp, &features, &rho, schedule, cfg.iterations, RegressionKind::Q, provider)?;
        let vt = t.summary.mismatch_rho;
        for r in &t.records {
            let env = (1.0 - 1.0 / vt).powi(r.k as i32) * 2.0 / (1.0 - g);
            envelope.see(r.gap / env, || format!("{label} k={}", r.k));
        }
        let ratio = t.final_gap() / t.records[0].gap;
        final_ratio.see(ratio, || label.clone());
        bound_margin(&t, &label, &mut bounds);
        mismatch_margin(&t, &label, &mut mismatch);
        pmd.see(t.max_pmd_deviation(), || label.clone());

        let stationary = build_rho(RhoSpec::StationaryOptimal, &mdp)?;
        let ts = run_exact(&mdp, &features, &stationary, schedule, cfg.iterations, RegressionKind::Q, provider)?;
        for r in &ts.records {
            let env = g.powi(r.k as i32) * 2.0 / (1.0 - g);
            gamma_envelope.see(r.gap - env, || format!("{label} k={}", r.k));
        }
        let slabel = format!("{label}_stationary");
        bound_margin(&ts, &slabel, &mut bounds);
        mismatch_margin(&ts, &slabel, &mut mismatch);
        per_mdp.push(json!({
            "label": label,
            "mismatch_rho": num(vt),
            "initial_gap": num(t.records[0].gap),
            "final_gap": num(t.final_gap()),
            "final_ratio": num(ratio),
            "stationary_mismatch_rho": num(ts.summary.mismatch_rho),
        }));
        rep.traces.push((label.clone(), t));
        rep.traces.push((slabel, ts));
    }
    let k = cfg.iterations;
    rep.check(
        "linear_envelope",
        envelope.value <= 1.0,
        format!("max gap / ((1-1/mismatch)^k 2/(1-gamma)) = {} at {}", fmt_float(envelope.value), envelope.at),
    );
    rep.check(
        "final_gap_ratio_1e-6",
        final_ratio.value <= 1e-6,
        format!("max gap_{k}/gap_0 = {} at {} (needs <= 1e-6)", fmt_float(final_ratio.value), final_ratio.at),
    );
    rep.check(
        "gamma_rate_envelope",
        gamma_envelope.value <= 1e-12,
        format!(
            "stationary start: max gap - gamma^k 2/(1-gamma) = {} at {}",
            fmt_float(gamma_envelope.value),
            gamma_envelope.at
        ),
    );
    push_soundness(&mut rep, &bounds, &mismatch);
    rep.check(
        "mirror_step_equivalence",
        pmd.value <= 1e-10,
        format!("max |pi_theta - pi_mirror| = {} at {}", fmt_float(pmd.value), pmd.at),
    );
    rep.details = json!({ "instances": per_mdp });
    Ok(rep)
}

fn push_soundness(rep: &mut RecipeReport, bounds: &Worst, mismatch: &Worst) {
    rep.check(
        "bounds_dominate_gap",
        bounds.value <= 1e-12,
        format!("max measured - bound = {} at {}", fmt_float(bounds.value), bounds.at),
    );
    rep.check(
        "mismatch_k_le_mismatch_rho",
        mismatch.value <= 1.0 + 1e-12,
        format!("max mismatch_k / mismatch_rho = {} at {}", fmt_float(mismatch.value), mismatch.at),
    );
}

fn exact_constant_sublinear(
    cfg: &ExperimentConfig,
    provider: &(dyn SampleProvider + Sync),
) -> CliResult<RecipeReport> {
    let mut rep = RecipeReport::new(cfg.recipe);
    let mut sublinear = Worst::new();
    let mut bounds = Worst::new();
    let mut mismatch = Worst::new();
    let mut per_mdp = Vec::new();
    let k = cfg.iterations;
    if k == 0 {
        return Err(CliError::usage("iterations", "the running average needs at least one iteration"));
    }
    for (label, mdp) in build_mdps(cfg)? {
        let features = build_features(cfg, &mdp)?;
        let schedule = build_schedule(cfg, &mdp)?;
        let eta = match schedule {
            StepSchedule::Constant { eta } => eta,
            StepSchedule::Geometric { .. } => {
                return Err(CliError::usage("schedule.kind", "this recipe needs a constant step"))
            }
        };
        let rho = build_rho(cfg.rho, &mdp)?;
        let t = run_exact(&mdp, &features, &rho, schedule, k, RegressionKind::Q, provider)?;
        let s = &t.summary;
        let rhs = (s.d0_star / eta + 2.0 * s.mismatch_rho) / ((1.0 - cfg.gamma) * k as f64);
        let avg = t.records[k].avg_gap.expect("k >= 1");
        sublinear.see(avg - rhs, || label.clone());
        bound_margin(&t, &label, &mut bounds);
        mismatch_margin(&t, &label, &mut mismatch);
        per_mdp.push(json!({"label": label, "avg_gap": num(avg), "bound": num(rhs), "d0_star": num(s.d0_star)}));
        rep.traces.push((label, t));
    }
    rep.check(
        "average_gap_sublinear",
        sublinear.value <= 1e-12,
        format!("max avg gap_{k} - (D0/eta + 2 mismatch)/((1-gamma) k) = {} at {}", fmt_float(sublinear.value), sublinear.at),
    );
    push_soundness(&mut rep, &bounds, &mismatch);
    rep.details = json!({ "instances": per_mdp });
    Ok(rep)
}

fn approx_features_linear(
    cfg: &ExperimentConfig,
    provider: &(dyn SampleProvider + Sync),
) -> CliResult<RecipeReport> {
    let mut rep = RecipeReport::new(cfg.recipe);
    let mut bounds = Worst::new();
    let mut mismatch = Worst::new();
    let mut pmd = Worst::new();
    let mut min_approx = f64::INFINITY;
    let mut per_run = Vec::new();
    for (label, mdp) in build_mdps(cfg)? {
        let features = build_features(cfg, &mdp)?;
        let schedule = build_schedule(cfg, &mdp)?;
        let rho = build_rho(cfg.rho, &mdp)?;
        for kind in kinds(cfg.algorithm) {
            let tag = format!("{label}_{}", kind_tag(kind));
            let t = run_exact(&mdp, &features, &rho, schedule, cfg.iterations, kind, provider)?;
            bound_margin(&t, &tag, &mut bounds);
            mismatch_margin(&t, &tag, &mut mismatch);
            pmd.see(t.max_pmd_deviation(), || tag.clone());
            min_approx = min_approx.min(t.summary.errors.eps_approx);
            per_run.push(json!({
                "label": tag,
                "eps_approx_max": num(t.summary.errors.eps_approx),
                "eps_bias_max": num(t.summary.errors.eps_bias),
                "kappa_nu": num(t.summary.kappa_nu),
                "final_gap": num(t.final_gap()),
                "final_bound": num(t.records.last().map_or(f64::NAN, |r| r.bound)),
            }));
            rep.traces.push((tag, t));
        }
    }
    rep.check(
        "approximation_error_present",
        min_approx > 0.0,
        format!("min over runs of sup_k eps_approx = {}", fmt_float(min_approx)),
    );
    push_soundness(&mut rep, &bounds, &mismatch);
    rep.check(
        "mirror_step_equivalence",
        pmd.value <= 1e-10,
        format!("max |pi_theta - pi_mirror| = {} at {}", fmt_float(pmd.value), pmd.at),
    );
    rep.details = json!({ "runs": per_run });
    Ok(rep)
}

// ---- sampled runs ----

/// Coefficient suprema across replicate traces; `mu` takes the minimum.
fn merged_summary(traces: &[RunTrace]) -> RunSummary {
    let mut s = traces[0].summary.clone();
    for t in &traces[1..] {
        let o = &t.summary;
        s.c_rho = s.c_rho.max(o.c_rho);
        s.c_nu = s.c_nu.max(o.c_nu);
        s.mismatch_k_max = s.mismatch_k_max.max(o.mismatch_k_max);
        s.mu = s.mu.min(o.mu);
        s.errors = s.errors.max(o.errors);
    }
    s
}

/// `sup_k` of the per-iteration mean (over replicates) of each error.
fn mean_errors(traces: &[RunTrace]) -> ErrorReport {
    let n = traces.len() as f64;
    let k_max = traces[0].records.len().saturating_sub(1);
    let mut sup = ErrorReport::default();
    for k in 0..k_max {
        let mut m = ErrorReport::default();
        for t in traces {
            let e = t.records[k].errors.unwrap_or_default();
            m.eps_stat += e.eps_stat / n;
            m.eps_bias += e.eps_bias / n;
            m.eps_approx += e.eps_approx / n;
        }
        sup = sup.max(m);
    }
    sup
}

fn sampled(
    cfg: &ExperimentConfig,
    provider: &(dyn SampleProvider + Sync),
    kind: RegressionKind,
) -> CliResult<RecipeReport> {
    let mut rep = RecipeReport::new(cfg.recipe);
    let primary = match kind {
        RegressionKind::Q => BoundKind::QApprox,
        RegressionKind::Advantage => BoundKind::Npg,
    };
    let sampled_bound = match kind {
        RegressionKind::Q => BoundKind::QSampled,
        RegressionKind::Advantage => BoundKind::NpgSampled,
    };
    let mut dominate = Worst::new();
    let mut reduction = Worst::new();
    let mut per_mdp = Vec::new();
    for (label, mdp) in build_mdps(cfg)? {
        let features = build_features(cfg, &mdp)?;
        let schedule = build_schedule(cfg, &mdp)?;
        if !schedule.is_geometric() {
            return Err(CliError::usage("schedule.kind", "sampled recipes use the geometric schedule"));
        }
        let rho = build_rho(cfg.rho, &mdp)?;
        let nu = StateActionDistribution::uniform(mdp.n_pairs());
        let mut traces = Vec::with_capacity(cfg.replicates);
        for r in 0..cfg.replicates as u64 {
            let mut config = RunConfig::new(
                kind,
                schedule,
                cfg.iterations,
                Mode::Sgd(SgdSettings {
                    n_steps: cfg.sgd_steps,
                    step_size: cfg.sgd_step_size,
                    seed: cfg.seed.wrapping_add(r),
                    step_cap: None,
                }),
            );
            config.primary = Some(primary);
            traces.push(run(&mdp, &features, &rho, &nu, &config, provider)?);
        }
        let n = traces.len() as f64;
        let kk = cfg.iterations;
        let mean_gap: Vec<f64> = (0..=kk)
            .map(|k| traces.iter().map(|t| t.records[k].gap).sum::<f64>() / n)
            .collect();
        let summary = merged_summary(&traces);
        let errors = mean_errors(&traces);
        let inputs = summary.bound_inputs(None, Some(cfg.sgd_steps), Some(errors));
        let primary_bounds: Vec<f64> = (0..=kk)
            .map(|k| bound_value(primary, &inputs, k))
            .collect::<Result<_, _>>()?;
        let sampled_final = bound_value(sampled_bound, &inputs, kk)?;
        for (k, (g, b)) in mean_gap.iter().zip(&primary_bounds).enumerate() {
            dominate.see(g - b, || format!("{label} k={k}"));
        }
        let ratio = mean_gap[kk] / mean_gap[0];
        reduction.see(ratio, || label.clone());
        if !sampled_final.is_finite() {
            rep.notes.push(format!(
                "{label}: {} bound vacuous (mu = {})",
                sampled_bound.name(),
                fmt_float(summary.mu)
            ));
        }
        per_mdp.push(json!({
            "label": label,
            "mean_gap": mean_gap.iter().copied().map(num).collect::<Vec<_>>(),
            "primary_bound": primary_bounds.iter().copied().map(num).collect::<Vec<_>>(),
            "sampled_bound_final": num(sampled_final),
            "mean_eps_stat_sup": num(errors.eps_stat),
            "mean_eps_approx_sup": num(errors.eps_approx),
            "c_nu_sup": num(summary.c_nu),
            "mismatch_rho": num(summary.mismatch_rho),
            "final_ratio": num(ratio),
            "samples": traces.iter().map(RunTrace::total_samples).sum::<u64>(),
        }));
        for (r, t) in traces.into_iter().enumerate() {
            rep.traces.push((format!("{label}_rep{r}"), t));
        }
    }
    rep.check(
        "final_gap_le_5pct_initial",
        reduction.value <= 0.05,
        format!(
            "max mean gap_K / mean gap_0 = {} at {} over {} replicates",
            fmt_float(reduction.value),
            reduction.at,
            cfg.replicates
        ),
    );
    rep.check(
        &format!("{}_bound_dominates_mean_gap", primary.name()),
        dominate.value <= 0.0,
        format!("max mean gap - bound = {} at {}", fmt_float(dominate.value), dominate.at),
    );
    rep.details = json!({ "instances": per_mdp });
    Ok(rep)
}

// ---- sampler and SGD statistics ----

fn random_policy(cfg: &ExperimentConfig, mdp: &FiniteMdp, features: &FeatureMap) -> CliResult<PolicyTable> {
    let theta = DVector::from_vec(normals(cfg.seed, 1, features.dim()));
    let _ = mdp;
    Ok(policy_table(&theta, features)?)
}

fn sampler_validation(
    cfg: &ExperimentConfig,
    provider: &(dyn SampleProvider + Sync),
) -> CliResult<RecipeReport> {
    let mut rep = RecipeReport::new(cfg.recipe);
    let (_, mdp) = build_mdps(cfg)?.into_iter().next().expect("at least one MDP");
    let features = build_features(cfg, &mdp)?;
    let table = random_policy(cfg, &mdp, &features)?;
    let nu = StateActionDistribution::uniform(mdp.n_pairs());
    let sampler = Sampler::new(&mdp, table, &nu)?;
    let mut reports = Vec::new();
    for kind in [RegressionKind::Q, RegressionKind::Advantage] {
        let r = sampler_report(&sampler, &nu, kind, cfg.draws, cfg.seed, provider)?;
        let tag = kind_tag(kind);
        rep.check(
            &format!("{tag}_tv_le_0.01"),
            r.tv <= 0.01,
            format!("TV(empirical, d_tilde) = {} over {} draws", fmt_float(r.tv), r.n_draws),
        );
        rep.check(
            &format!("{tag}_accept_length"),
            r.accept_len_ok(3.0),
            format!(
                "mean h+1 = {} +- {} vs 1/(1-gamma) = {}",
                fmt_float(r.accept_len.mean),
                fmt_float(r.accept_len.stderr),
                fmt_float(r.expected_len)
            ),
        );
        rep.check(
            &format!("{tag}_accept_time_geometric"),
            r.accept_chi2 <= r.chi2_threshold(),
            format!(
                "chi2 = {} on {} df (threshold {})",
                fmt_float(r.accept_chi2),
                r.accept_chi2_df,
                fmt_float(r.chi2_threshold())
            ),
        );
        let worst = r
            .pairs
            .iter()
            .filter(|p| p.count > 1)
            .flat_map(|p| {
                let mut z = vec![(p.q_hat.mean - p.exact_q).abs() / p.q_hat.stderr.max(1e-300)];
                if let Some(a) = p.a_hat {
                    z.push((a.mean - p.exact_a).abs() / a.stderr.max(1e-300));
                }
                z
            })
            .fold(0.0, f64::max);
        rep.check(
            &format!("{tag}_pair_means_within_3se"),
            r.pair_means_ok(3.0),
            format!("max |mean - exact| / stderr = {}", fmt_float(worst)),
        );
        reports.push(json!({
            "kind": tag,
            "tv": num(r.tv),
            "accept_len_mean": num(r.accept_len.mean),
            "accept_len_stderr": num(r.accept_len.stderr),
            "accept_chi2": num(r.accept_chi2),
            "accept_chi2_df": r.accept_chi2_df,
            "pairs": r.pairs.iter().map(|p| json!({
                "pair": p.pair,
                "count": p.count,
                "q_hat_mean": num(p.q_hat.mean),
                "q_hat_stderr": num(p.q_hat.stderr),
                "exact_q": num(p.exact_q),
                "a_hat_mean": p.a_hat.map(|a| num(a.mean)),
                "a_hat_stderr": p.a_hat.map(|a| num(a.stderr)),
                "exact_a": num(p.exact_a),
            })).collect::<Vec<_>>(),
        }));
    }
    let theta = DVector::from_vec(normals(cfg.seed, 1, features.dim()));
    let mut moments = Vec::new();
    let mut moment_ok = true;
    let mut moment_detail = Vec::new();
    for &g in &cfg.moment_gammas {
        let m = mdp.with_gamma(g)?;
        let est = estimate_q_hat_second_moment(&m, &theta, &features, &nu, cfg.draws, cfg.seed)?;
        let bound = 2.0 / ((1.0 - g) * (1.0 - g));
        let ok = est.mean <= bound + 3.0 * est.stderr;
        moment_ok &= ok;
        moment_detail.push(format!(
            "gamma {g}: {} +- {} vs {}",
            fmt_float(est.mean),
            fmt_float(est.stderr),
            fmt_float(bound)
        ));
        moments.push(json!({"gamma": g, "mean": num(est.mean), "stderr": num(est.stderr), "bound": num(bound)}));
    }
    rep.check("q_hat_second_moment", moment_ok, moment_detail.join("; "));
    rep.details = json!({ "samplers": reports, "second_moment": moments });
    Ok(rep)
}

fn sgd_rate(cfg: &ExperimentConfig, provider: &(dyn SampleProvider + Sync)) -> CliResult<RecipeReport> {
    let mut rep = RecipeReport::new(cfg.recipe);
    let (_, mdp) = build_mdps(cfg)?.into_iter().next().expect("at least one MDP");
    let features = build_features(cfg, &mdp)?;
    let table = random_policy(cfg, &mdp, &features)?;
    let nu = StateActionDistribution::uniform(mdp.n_pairs());
    let weights = state_action_visitation_tilde(&mdp, &table, &nu)?;
    let sampler = Sampler::new(&mdp, table.clone(), &nu)?;
    let b = features.b_norm();
    let t = cfg.sgd_steps;
    let seeds = cfg.seed..cfg.seed + cfg.replicates as u64;
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;

    let q = compatible_problem(&mdp, &table, &features, weights.clone(), RegressionKind::Q)?;
    let alpha_q = cfg.sgd_step_size.unwrap_or(1.0 / (2.0 * b * b));
    let q_short = mean(sgd_excess_risks(&sampler, &q, RegressionKind::Q, t, alpha_q, seeds.clone(), provider)?);
    let q_long = mean(sgd_excess_risks(&sampler, &q, RegressionKind::Q, 4 * t, alpha_q, seeds.clone(), provider)?);
    let q_ratio = q_short / q_long;
    rep.check(
        "q_excess_ratio_T_vs_4T",
        (2.0..=8.0).contains(&q_ratio),
        format!("mean excess T={t}: {}, 4T: {}, ratio {}", fmt_float(q_short), fmt_float(q_long), fmt_float(q_ratio)),
    );
    let mu = npg_core::diagnostics::covariance_min_eig(&features, &nu);
    let w_star_norm = q.minimizer().norm();
    let bound = sgd_bound_q(cfg.gamma, b, mu, features.dim(), w_star_norm, t, alpha_q);
    rep.check(
        "q_eps_stat_le_proof_bound",
        q_short <= bound.excess_bound,
        format!(
            "mean eps_stat {} <= (4/T)(sigma sqrt(m) + B |w*|)^2 = {} (sigma {}, |w*| {}); step on L/2 is {} or {} by reading, needs <= {}",
            fmt_float(q_short),
            fmt_float(bound.excess_bound),
            fmt_float(bound.sigma),
            fmt_float(w_star_norm),
            fmt_float(bound.half_loss_step_literal),
            fmt_float(bound.half_loss_step_halved),
            fmt_float(1.0 / (4.0 * bound.r * bound.r)),
        ),
    );

    let a = compatible_problem(&mdp, &table, &features, weights, RegressionKind::Advantage)?;
    let alpha_a = cfg.sgd_step_size.unwrap_or(1.0 / (8.0 * b * b));
    let a_short = mean(sgd_excess_risks(&sampler, &a, RegressionKind::Advantage, 2 * t, alpha_a, seeds.clone(), provider)?);
    let a_long = mean(sgd_excess_risks(&sampler, &a, RegressionKind::Advantage, 4 * t, alpha_a, seeds, provider)?);
    let a_ratio = a_short / a_long;
    rep.check(
        "advantage_excess_halving",
        (1.4..=2.9).contains(&a_ratio),
        format!("mean excess 2T: {}, 4T: {}, ratio {}", fmt_float(a_short), fmt_float(a_long), fmt_float(a_ratio)),
    );
    let centered = center_design(features.matrix(), &table);
    let mu_c = npg_core::linalg::min_eigenvalue(&npg_core::policy::weighted_gram(&centered, nu.probs()));
    let abound = sgd_bound_advantage(cfg.gamma, b, mu_c, features.dim(), a.minimizer().norm(), 2 * t, alpha_a);
    if !abound.excess_bound.is_finite() {
        rep.notes.push(format!(
            "advantage proof bound vacuous: centered covariance min eigenvalue {}",
            fmt_float(mu_c)
        ));
    }
    rep.details = json!({
        "q": {"alpha": num(alpha_q), "T": t, "mean_excess_T": num(q_short), "mean_excess_4T": num(q_long),
               "ratio": num(q_ratio), "mu": num(mu), "sigma": num(bound.sigma), "R": num(bound.r),
               "w_star_norm": num(w_star_norm), "proof_bound": num(bound.excess_bound),
               "half_loss_step_literal": num(bound.half_loss_step_literal),
               "half_loss_step_halved": num(bound.half_loss_step_halved)},
        "advantage": {"alpha": num(alpha_a), "mean_excess_2T": num(a_short), "mean_excess_4T": num(a_long),
                       "ratio": num(a_ratio), "mu": num(mu_c), "proof_bound": num(abound.excess_bound),
                       "half_loss_step_literal": num(abound.half_loss_step_literal),
                       "half_loss_step_halved": num(abound.half_loss_step_halved)},
    });
    Ok(rep)
}

// ---- identities ----

struct IdentityInstance {
    mdp: FiniteMdp,
    features: FeatureMap,
    theta: DVector<f64>,
    rho: StateDistribution,
}

fn identity_instance(cfg: &ExperimentConfig, i: u64) -> CliResult<IdentityInstance> {
    let (ns, na) = match cfg.mdp {
        MdpSpec::Random { states, actions, .. } => (states, actions),
        _ => return Err(CliError::usage("mdp.kind", "identity checks draw random MDPs")),
    };
    let base = match cfg.mdp {
        MdpSpec::Random { seed, .. } => seed,
        _ => 0,
    };
    let mdp = generate_random_mdp(ns, na, cfg.gamma, base.wrapping_add(i))?;
    let features = match &cfg.features {
        FeatureSpec::OneHot => FeatureMap::one_hot(ns, na),
        FeatureSpec::Gaussian { dim, seed } => FeatureMap::gaussian(ns, na, *dim, seed.wrapping_add(i))?,
        FeatureSpec::RankReduced { dim, seed } => FeatureMap::rank_reduced(ns, na, *dim, seed.wrapping_add(i))?,
        FeatureSpec::File { .. } => build_features(cfg, &mdp)?,
    };
    let theta = DVector::from_vec(normals(cfg.seed.wrapping_add(i), 2, features.dim()));
    let rho = StateDistribution::new(random_simplex(cfg.seed.wrapping_add(i), 3, ns))?;
    Ok(IdentityInstance {
        mdp,
        features,
        theta,
        rho,
    })
}

fn identity_checks(cfg: &ExperimentConfig) -> CliResult<RecipeReport> {
    let mut rep = RecipeReport::new(cfg.recipe);

    let mut pdl = 0.0f64;
    for i in 0..100 {
        let inst = identity_instance(cfg, i)?;
        let (ns, na) = (inst.mdp.n_states(), inst.mdp.n_actions());
        let pi = random_table(cfg.seed.wrapping_add(i), 10, ns, na)?;
        let pi2 = random_table(cfg.seed.wrapping_add(i), 11, ns, na)?;
        let (lhs, rhs) = performance_difference(&inst.mdp, &pi, &pi2, &inst.rho)?;
        pdl = pdl.max((lhs - rhs).abs());
    }
    rep.check("performance_difference", pdl <= 1e-10, format!("max |lhs - rhs| = {} over 100 triples", fmt_float(pdl)));

    let mut pmd = 0.0f64;
    for i in 0..50 {
        let inst = identity_instance(cfg, i)?;
        let f = &inst.features;
        let w = DVector::from_vec(normals(cfg.seed.wrapping_add(i), 4, f.dim()));
        let eta = 0.05 + 0.1 * i as f64;
        let table = policy_table(&inst.theta, f)?;
        let next = policy_table(&(&inst.theta - &w * eta), f)?;
        let raw = mirror_update_table(&table, f.matrix(), &w, eta)?;
        let centered = mirror_update_table(&table, &center_design(f.matrix(), &table), &w, eta)?;
        pmd = pmd.max(next.max_abs_diff(&raw)).max(next.max_abs_diff(&centered));
    }
    rep.check("mirror_step_equivalence", pmd <= 1e-10, format!("max entry gap = {} over 50 steps, both designs", fmt_float(pmd)));

    let mut fisher = 0.0f64;
    for i in 0..20 {
        let inst = identity_instance(cfg, i)?;
        let table = policy_table(&inst.theta, &inst.features)?;
        let d_bar = state_action_visitation_bar(&inst.mdp, &table, &inst.rho)?;
        let p = compatible_problem(&inst.mdp, &table, &inst.features, d_bar, RegressionKind::Advantage)?;
        let expected = p.minimizer() / (1.0 - cfg.gamma);
        let dir = npg_direction_fisher(&inst.mdp, &inst.theta, &inst.features, &inst.rho)?;
        fisher = fisher.max((dir - &expected).norm() / (1.0 + expected.norm()));
    }
    rep.check(
        "fisher_direction_is_compatible_minimizer",
        fisher <= 1e-8,
        format!("max relative |F^+ grad - w*/(1-gamma)| = {} over 20 instances", fmt_float(fisher)),
    );

    let mut three_point = (0usize, f64::NEG_INFINITY);
    for i in 0..1000u64 {
        let n = 2 + (i % 5) as usize;
        let seed = cfg.seed.wrapping_add(i);
        let q = random_simplex(seed, 20, n);
        let mut u = random_simplex(seed, 21, n);
        if i % 3 == 0 {
            u[0] = 0.0;
            let s: f64 = u.iter().sum();
            u.iter_mut().for_each(|x| *x /= s);
        }
        let g: Vec<f64> = normals(seed, 22, n).into_iter().map(|x| 3.0 * x).collect();
        let eta = 0.05 + (i % 17) as f64 * 0.4;
        let (lhs, rhs) = three_point_sides(&q, &g, eta, &u)?;
        if lhs <= rhs + 1e-10 {
            three_point.0 += 1;
        }
        three_point.1 = three_point.1.max(lhs - rhs);
    }
    rep.check(
        "three_point_inequality",
        three_point.0 == 1000,
        format!("{}/1000 draws hold; max lhs - rhs = {}", three_point.0, fmt_float(three_point.1)),
    );

    let mut identity = 0.0f64;
    for i in 0..100u64 {
        let seed = cfg.seed.wrapping_add(i);
        let rows = 3 + (i % 10) as usize;
        let dim = 1 + (i % 5) as usize;
        let design = DMatrix::from_vec(rows, dim, normals(seed, 30, rows * dim));
        let target = DVector::from_vec(normals(seed, 31, rows));
        let weights = StateActionDistribution::new(random_simplex(seed, 32, rows))?;
        let p = RegressionProblem::new(design, target, weights)?;
        let w = DVector::from_vec(normals(seed, 33, dim));
        let (excess, quad) = second_moment_identity_check(&p, &w);
        identity = identity.max((excess - quad).abs() / (1.0 + quad.abs()));
    }
    rep.check(
        "second_moment_identity",
        identity <= 1e-8,
        format!("max relative |excess - quadratic form| = {} over 100 problems", fmt_float(identity)),
    );

    let mut fd = 0.0f64;
    let h = 1e-6;
    for i in 0..10 {
        let inst = identity_instance(cfg, i)?;
        let f = &inst.features;
        let table = policy_table(&inst.theta, f)?;
        let centered = center_design(f.matrix(), &table);
        let grad = policy_gradient(&inst.mdp, &inst.theta, f, &inst.rho)?;
        let value = |t: &DVector<f64>| -> CliResult<f64> {
            Ok(evaluate_policy(&inst.mdp, &policy_table(t, f)?)?.value_at(&inst.rho))
        };
        for j in 0..f.dim() {
            let mut up = inst.theta.clone();
            let mut down = inst.theta.clone();
            up[j] += h;
            down[j] -= h;
            let lp_up = log_policy(&up, f)?;
            let lp_down = log_policy(&down, f)?;
            for p in 0..lp_up.len() {
                fd = fd.max(((lp_up[p] - lp_down[p]) / (2.0 * h) - centered[(p, j)]).abs());
            }
            let dv = (value(&up)? - value(&down)?) / (2.0 * h);
            fd = fd.max((dv - grad[j]).abs() / (1.0 + grad[j].abs()));
        }
    }
    rep.check(
        "centered_features_are_score",
        fd <= 1e-6,
        format!("max finite-difference mismatch (score and value gradient) = {}", fmt_float(fd)),
    );

    let mut kappa = 0.0f64;
    for i in 0..5 {
        let inst = identity_instance(cfg, i)?;
        let (ns, na) = (inst.mdp.n_states(), inst.mdp.n_actions());
        let one_hot = FeatureMap::one_hot(ns, na);
        let nu = StateActionDistribution::new(random_simplex(cfg.seed.wrapping_add(i), 40, ns * na))?;
        let d_star = state_visitation(&inst.mdp, &optimal_policy(&inst.mdp)?, &inst.rho)?;
        let k = relative_condition_number(&one_hot, &d_star, &nu, na);
        let closed = d_star
            .probs()
            .iter()
            .enumerate()
            .flat_map(|(s, d)| (0..na).map(move |a| (s, a, d)))
            .map(|(s, a, d)| d / na as f64 / nu.probs()[s * na + a])
            .fold(0.0, f64::max);
        kappa = kappa.max((k - closed).abs());
    }
    rep.check(
        "one_hot_kappa_closed_form",
        kappa <= 1e-10,
        format!("max |kappa - max d*/(|A| nu)| = {} over 5 instances", fmt_float(kappa)),
    );
    Ok(rep)
}
