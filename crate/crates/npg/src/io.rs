//! JSON model files, trace CSV and trace JSON.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use npg_core::diagnostics::BoundKind;
use npg_core::driver::{IterationRecord, RunTrace, StepSchedule};
use npg_core::{FeatureMap, FiniteMdp};

use crate::error::{CliError, CliResult};

/// Frozen column order of the trace CSV.
pub const CSV_COLUMNS: [&str; 10] = [
    "k",
    "eta",
    "value",
    "gap",
    "eps_stat",
    "eps_bias",
    "eps_approx",
    "d_kstar",
    "bound",
    "samples",
];

/// MDP file: `transition[s][a][s']` and `cost[s][a]`; the discount comes
/// from the experiment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpDocument {
    pub n_states: usize,
    pub n_actions: usize,
    pub transition: Vec<Vec<Vec<f64>>>,
    pub cost: Vec<Vec<f64>>,
}

/// Feature file: one row of length `dim` per pair, ordered `s * |A| + a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureDocument {
    pub n_states: usize,
    pub n_actions: usize,
    pub dim: usize,
    pub rows: Vec<Vec<f64>>,
}

impl MdpDocument {
    pub fn from_mdp(mdp: &FiniteMdp) -> Self {
        let (ns, na) = (mdp.n_states(), mdp.n_actions());
        Self {
            n_states: ns,
            n_actions: na,
            transition: (0..ns)
                .map(|s| (0..na).map(|a| mdp.transition_row(s, a).to_vec()).collect())
                .collect(),
            cost: (0..ns).map(|s| (0..na).map(|a| mdp.cost(s, a)).collect()).collect(),
        }
    }

    pub fn into_mdp(self, gamma: f64) -> CliResult<FiniteMdp> {
        let (ns, na) = (self.n_states, self.n_actions);
        if self.transition.len() != ns || self.transition.iter().any(|r| r.len() != na) {
            return Err(CliError::usage("mdp.transition", format!("expected {ns} x {na} rows")));
        }
        if self.cost.len() != ns || self.cost.iter().any(|r| r.len() != na) {
            return Err(CliError::usage("mdp.cost", format!("expected {ns} x {na} entries")));
        }
        let transition = self.transition.into_iter().flatten().flatten().collect();
        let cost = self.cost.into_iter().flatten().collect();
        Ok(FiniteMdp::new(ns, na, transition, cost, gamma)?)
    }
}

impl FeatureDocument {
    pub fn from_features(f: &FeatureMap) -> Self {
        let dim = f.dim();
        Self {
            n_states: f.n_states(),
            n_actions: f.n_actions(),
            dim,
            rows: f.to_rows().chunks(dim).map(<[f64]>::to_vec).collect(),
        }
    }

    pub fn into_features(self) -> CliResult<FeatureMap> {
        if self.rows.iter().any(|r| r.len() != self.dim) {
            return Err(CliError::usage("features.rows", format!("every row needs {} entries", self.dim)));
        }
        let flat: Vec<f64> = self.rows.into_iter().flatten().collect();
        Ok(FeatureMap::from_rows(self.n_states, self.n_actions, self.dim, &flat)?)
    }
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::io(path, e))?;
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

/// 17 significant digits; non-finite values print as `inf`, `-inf`, `NaN`.
pub fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

fn opt_float(x: Option<f64>) -> String {
    x.map(fmt_float).unwrap_or_default()
}

/// One CSV row; error columns are empty at the last iterate.
pub fn csv_row(r: &IterationRecord) -> [String; 10] {
    [
        r.k.to_string(),
        fmt_float(r.eta),
        fmt_float(r.value),
        fmt_float(r.gap),
        opt_float(r.errors.map(|e| e.eps_stat)),
        opt_float(r.errors.map(|e| e.eps_bias)),
        opt_float(r.errors.map(|e| e.eps_approx)),
        fmt_float(r.d_kstar),
        fmt_float(r.bound),
        r.samples.to_string(),
    ]
}

pub fn write_trace_csv<W: Write>(trace: &RunTrace, out: W) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(out);
    let io_err = |e: csv::Error| CliError::io("<trace csv>", e);
    w.write_record(CSV_COLUMNS).map_err(io_err)?;
    for r in &trace.records {
        w.write_record(csv_row(r)).map_err(io_err)?;
    }
    w.flush().map_err(|e| CliError::io("<trace csv>", e))
}

pub fn trace_csv_string(trace: &RunTrace) -> CliResult<String> {
    let mut buf = Vec::new();
    write_trace_csv(trace, &mut buf)?;
    Ok(String::from_utf8(buf).expect("csv output is UTF-8"))
}

/// JSON number, or a string for non-finite values.
pub fn num(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else {
        Value::String(fmt_float(x))
    }
}

fn bounds_json(bounds: &[(BoundKind, f64)]) -> Value {
    Value::Object(bounds.iter().map(|(id, b)| (id.name().to_string(), num(*b))).collect())
}

/// Full-precision trace document with coefficient snapshots.
pub fn trace_json(trace: &RunTrace) -> Value {
    let s = &trace.summary;
    let schedule = match trace.schedule {
        StepSchedule::Geometric { .. } => json!({"kind": "geometric", "eta0": num(trace.schedule.eta0())}),
        StepSchedule::Constant { eta } => json!({"kind": "constant", "eta": num(eta)}),
    };
    let records: Vec<Value> = trace
        .records
        .iter()
        .map(|r| {
            let c = &r.coefficients;
            json!({
                "k": r.k,
                "eta": num(r.eta),
                "theta_digest": format!("{:016x}", r.theta_digest),
                "theta": r.theta.iter().copied().map(num).collect::<Vec<_>>(),
                "value": num(r.value),
                "gap": num(r.gap),
                "avg_gap": r.avg_gap.map(num),
                "eps_stat": r.errors.map(|e| num(e.eps_stat)),
                "eps_bias": r.errors.map(|e| num(e.eps_bias)),
                "eps_approx": r.errors.map(|e| num(e.eps_approx)),
                "d_kstar": num(r.d_kstar),
                "samples": r.samples,
                "pmd_deviation": r.pmd_deviation.map(num),
                "mismatch_k": num(c.mismatch_k),
                "c_rho": num(c.c_rho),
                "c_nu_terms": c.c_nu.map(|t| t.terms.iter().copied().map(num).collect::<Vec<_>>()),
                "centered_min_eig": c.centered_min_eig.map(num),
                "bound": num(r.bound),
                "bounds": bounds_json(&r.bounds),
            })
        })
        .collect();
    json!({
        "kind": format!("{:?}", trace.kind),
        "schedule": schedule,
        "sgd_steps": trace.sgd_steps,
        "comparator_value": num(trace.comparator_value),
        "coefficients": {
            "gamma": num(s.gamma),
            "n_actions": s.n_actions,
            "mismatch_rho": num(s.mismatch_rho),
            "mismatch_k_max": num(s.mismatch_k_max),
            "kappa_nu": num(s.kappa_nu),
            "c_rho": num(s.c_rho),
            "c_nu": num(s.c_nu),
            "eps_stat_max": num(s.errors.eps_stat),
            "eps_bias_max": num(s.errors.eps_bias),
            "eps_approx_max": num(s.errors.eps_approx),
            "d0_star": num(s.d0_star),
            "b_norm": num(s.b_norm),
            "mu": num(s.mu),
            "feature_dim": s.feature_dim,
            "step_condition_holds": s.step_condition_holds,
            "primary_bound": s.primary.name(),
        },
        "records": records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use npg_core::mdp::generate_random_mdp;

    #[test]
    fn mdp_document_round_trips_exactly() {
        let m = generate_random_mdp(3, 2, 0.7, 5).unwrap();
        let text = serde_json::to_string(&MdpDocument::from_mdp(&m)).unwrap();
        let back: MdpDocument = serde_json::from_str(&text).unwrap();
        assert_eq!(back.into_mdp(0.7).unwrap(), m);
    }

    #[test]
    fn feature_document_round_trips_exactly() {
        let f = FeatureMap::gaussian(3, 2, 4, 1).unwrap();
        let text = serde_json::to_string(&FeatureDocument::from_features(&f)).unwrap();
        let back: FeatureDocument = serde_json::from_str(&text).unwrap();
        assert_eq!(back.into_features().unwrap().to_rows(), f.to_rows());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = r#"{"n_states":1,"n_actions":1,"transition":[[[1.0]]],"cost":[[0.5]],"extra":1}"#;
        assert!(serde_json::from_str::<MdpDocument>(text).is_err());
    }

    #[test]
    fn float_format_has_17_digits() {
        assert_eq!(fmt_float(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt_float(f64::INFINITY), "inf");
        assert_eq!(fmt_float(0.1).parse::<f64>().unwrap(), 0.1);
    }
}
