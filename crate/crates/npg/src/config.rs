//! Flat `key = value` experiment configs.
//!
//! One setting per line, `#` starts a comment, keys are dotted paths such as
//! `mdp.states`. Unknown and duplicate keys are rejected. Environment
//! variables `NPG_<KEY>` override file values, with `.` written as `__`
//! (`NPG_MDP__STATES=8`).

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::Serialize;

use crate::error::{CliError, CliResult};

pub const ENV_PREFIX: &str = "NPG_";

pub const KNOWN_KEYS: &[&str] = &[
    "recipe",
    "gamma",
    "mdp.kind",
    "mdp.states",
    "mdp.actions",
    "mdp.seed",
    "mdp.count",
    "mdp.path",
    "features.kind",
    "features.dim",
    "features.seed",
    "features.scale",
    "features.path",
    "rho",
    "nu",
    "algorithm",
    "schedule.kind",
    "schedule.eta0",
    "schedule.eta",
    "iterations",
    "sgd.steps",
    "sgd.step_size",
    "replicates",
    "seed",
    "draws",
    "moment.gammas",
    "workers",
    "out",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Recipe {
    ExactTabularLinear,
    ExactConstantSublinear,
    ApproxFeaturesLinear,
    SampledQnpg,
    SampledNpg,
    SamplerValidation,
    SgdRate,
    IdentityChecks,
}

impl Recipe {
    pub const ALL: [Recipe; 8] = [
        Recipe::ExactTabularLinear,
        Recipe::ExactConstantSublinear,
        Recipe::ApproxFeaturesLinear,
        Recipe::SampledQnpg,
        Recipe::SampledNpg,
        Recipe::SamplerValidation,
        Recipe::SgdRate,
        Recipe::IdentityChecks,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Recipe::ExactTabularLinear => "exact_tabular_linear",
            Recipe::ExactConstantSublinear => "exact_constant_sublinear",
            Recipe::ApproxFeaturesLinear => "approx_features_linear",
            Recipe::SampledQnpg => "sampled_qnpg",
            Recipe::SampledNpg => "sampled_npg",
            Recipe::SamplerValidation => "sampler_validation",
            Recipe::SgdRate => "sgd_rate",
            Recipe::IdentityChecks => "identity_checks",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Recipe::ExactTabularLinear => {
                "exact Q-NPG, one-hot features, geometric steps: linear envelope and gamma-rate start"
            }
            Recipe::ExactConstantSublinear => {
                "exact Q-NPG with a constant step: running-average gap against the O(1/k) bound"
            }
            Recipe::ApproxFeaturesLinear => {
                "exact NPG and Q-NPG with rank-reduced features: bounds with nonzero approximation error"
            }
            Recipe::SampledQnpg => "Q-NPG with averaged-SGD regression on sampled rollouts",
            Recipe::SampledNpg => "NPG with averaged-SGD regression on sampled advantage rollouts",
            Recipe::SamplerValidation => {
                "rollout samplers against exact visitation, Q and A; Q_hat second moment"
            }
            Recipe::SgdRate => "averaged SGD excess risk against T and the proof bound",
            Recipe::IdentityChecks => {
                "performance difference, mirror-step equivalence, Fisher direction, three-point, gradients"
            }
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|r| r.name() == name)
    }

    /// Bundled default config.
    pub fn default_config(self) -> &'static str {
        match self {
            Recipe::ExactTabularLinear => {
                "recipe = exact_tabular_linear\ngamma = 0.9\nmdp.states = 20\nmdp.actions = 5\nmdp.count = 10\n\
                 features.kind = one_hot\nschedule.kind = geometric\nschedule.eta0 = default\niterations = 30\n"
            }
            Recipe::ExactConstantSublinear => {
                "recipe = exact_constant_sublinear\ngamma = 0.9\nmdp.states = 20\nmdp.actions = 5\nmdp.count = 10\n\
                 features.kind = one_hot\nschedule.kind = constant\nschedule.eta = 10\niterations = 100\n"
            }
            Recipe::ApproxFeaturesLinear => {
                "recipe = approx_features_linear\ngamma = 0.9\nmdp.states = 20\nmdp.actions = 5\nmdp.count = 3\n\
                 features.kind = rank_reduced\nfeatures.dim = 40\nalgorithm = both\n\
                 schedule.kind = geometric\nschedule.eta0 = default\niterations = 30\n"
            }
            Recipe::SampledQnpg => {
                "recipe = sampled_qnpg\ngamma = 0.9\nmdp.states = 6\nmdp.actions = 3\nmdp.seed = 100\n\
                 features.kind = one_hot\nalgorithm = qnpg\nschedule.kind = geometric\nschedule.eta0 = 1\n\
                 iterations = 15\nsgd.steps = 20000\nreplicates = 10\n"
            }
            Recipe::SampledNpg => {
                "recipe = sampled_npg\ngamma = 0.9\nmdp.states = 6\nmdp.actions = 3\nmdp.seed = 100\n\
                 features.kind = one_hot\nalgorithm = npg\nschedule.kind = geometric\nschedule.eta0 = 1\n\
                 iterations = 15\nsgd.steps = 20000\nreplicates = 10\n"
            }
            Recipe::SamplerValidation => {
                "recipe = sampler_validation\ngamma = 0.9\nmdp.states = 4\nmdp.actions = 3\nmdp.seed = 21\n\
                 draws = 100000\nmoment.gammas = 0.5, 0.9\n"
            }
            Recipe::SgdRate => {
                "recipe = sgd_rate\ngamma = 0.9\nmdp.states = 4\nmdp.actions = 3\nmdp.seed = 13\n\
                 features.kind = one_hot\nsgd.steps = 2000\nreplicates = 20\n"
            }
            Recipe::IdentityChecks => {
                "recipe = identity_checks\ngamma = 0.9\nmdp.states = 5\nmdp.actions = 3\n\
                 features.kind = gaussian\nfeatures.dim = 6\n"
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MdpSpec {
    /// `count` instances seeded `seed, seed + 1, ...`.
    Random {
        states: usize,
        actions: usize,
        seed: u64,
        count: usize,
    },
    Chain { states: usize },
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureSpec {
    OneHot,
    Gaussian { dim: usize, seed: u64 },
    RankReduced { dim: usize, seed: u64 },
    File { path: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RhoSpec {
    Uniform,
    /// Stationary distribution of the optimal policy.
    StationaryOptimal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Qnpg,
    Npg,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleSpec {
    /// `eta0 = None` uses `((1 - gamma)/gamma) log |A|`.
    Geometric { eta0: Option<f64> },
    Constant { eta: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub recipe: Recipe,
    pub gamma: f64,
    pub mdp: MdpSpec,
    pub features: FeatureSpec,
    pub feature_scale: f64,
    pub rho: RhoSpec,
    pub algorithm: Algorithm,
    pub schedule: ScheduleSpec,
    pub iterations: usize,
    pub sgd_steps: usize,
    /// `None` picks the regression kind's default.
    pub sgd_step_size: Option<f64>,
    pub replicates: usize,
    pub seed: u64,
    pub draws: usize,
    pub moment_gammas: Vec<f64>,
    pub workers: usize,
    pub out: Option<PathBuf>,
}

/// Key/value pairs before typing.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawConfig {
    entries: BTreeMap<String, String>,
}

impl RawConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = match line.find('#') {
                Some(i) => &line[..i],
                None => line,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::usage(
                    format!("line {}", lineno + 1),
                    format!("expected `key = value`, got `{line}`"),
                )
            })?;
            let key = key.trim().to_string();
            check_known(&key)?;
            if entries.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(CliError::usage(key, "duplicate key"));
            }
        }
        Ok(Self { entries })
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> CliResult<()> {
        check_known(key)?;
        self.entries.insert(key.to_string(), value.into());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// Applies `NPG_*` variables from `vars`; others are ignored.
    pub fn apply_env<I, K, V>(&mut self, vars: I) -> CliResult<()>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: Into<String>,
    {
        for (name, value) in vars {
            if let Some(key) = env_key(name.as_ref()) {
                self.set(&key, value)
                    .map_err(|_| CliError::usage(name.as_ref(), format!("`{key}` is not a config key")))?;
            }
        }
        Ok(())
    }
}

/// `NPG_MDP__STATES` -> `mdp.states`.
pub fn env_key(var: &str) -> Option<String> {
    var.strip_prefix(ENV_PREFIX)
        .map(|rest| rest.to_ascii_lowercase().replace("__", "."))
}

fn check_known(key: &str) -> CliResult<()> {
    if KNOWN_KEYS.contains(&key) {
        Ok(())
    } else {
        Err(CliError::usage(key, "unknown key"))
    }
}

struct Fields<'a>(&'a RawConfig);

impl Fields<'_> {
    fn required(&self, key: &str) -> CliResult<&str> {
        self.0
            .get(key)
            .ok_or_else(|| CliError::usage(key, "missing required key"))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, default: T) -> CliResult<T>
    where
        T::Err: std::fmt::Display,
    {
        match self.0.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|e| CliError::usage(key, format!("cannot parse `{v}`: {e}"))),
        }
    }

    fn float(&self, key: &str, default: f64) -> CliResult<f64> {
        let v = self.parse(key, default)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(CliError::usage(key, "must be finite"))
        }
    }

    /// `default` (or absent) maps to `None`.
    fn optional_float(&self, key: &str) -> CliResult<Option<f64>> {
        match self.0.get(key) {
            None | Some("default") => Ok(None),
            Some(_) => self.float(key, 0.0).map(Some),
        }
    }

    fn choice<'c>(&self, key: &str, default: &'c str, options: &[&'c str]) -> CliResult<&'c str> {
        let v = self.0.get(key).unwrap_or(default);
        options
            .iter()
            .copied()
            .find(|o| *o == v)
            .ok_or_else(|| CliError::usage(key, format!("`{v}` is not one of {}", options.join(", "))))
    }
}

impl ExperimentConfig {
    pub fn from_raw(raw: &RawConfig) -> CliResult<Self> {
        let f = Fields(raw);
        let recipe_name = f.required("recipe")?;
        let recipe = Recipe::parse(recipe_name)
            .ok_or_else(|| CliError::usage("recipe", format!("unknown recipe `{recipe_name}`")))?;
        let gamma: f64 = f.required("gamma").and_then(|_| f.float("gamma", 0.0))?;
        if !(0.0..1.0).contains(&gamma) {
            return Err(CliError::usage("gamma", format!("{gamma} lies outside [0, 1)")));
        }

        let mdp = match f.choice("mdp.kind", "random", &["random", "chain", "file"])? {
            "random" => MdpSpec::Random {
                states: positive(&f, "mdp.states", 4)?,
                actions: positive(&f, "mdp.actions", 2)?,
                seed: f.parse("mdp.seed", 0)?,
                count: positive(&f, "mdp.count", 1)?,
            },
            "chain" => MdpSpec::Chain {
                states: positive(&f, "mdp.states", 4)?,
            },
            _ => MdpSpec::File {
                path: f.required("mdp.path")?.into(),
            },
        };
        let features = match f.choice(
            "features.kind",
            "one_hot",
            &["one_hot", "gaussian", "rank_reduced", "file"],
        )? {
            "one_hot" => FeatureSpec::OneHot,
            "gaussian" => FeatureSpec::Gaussian {
                dim: positive(&f, "features.dim", 4)?,
                seed: f.parse("features.seed", 0)?,
            },
            "rank_reduced" => FeatureSpec::RankReduced {
                dim: positive(&f, "features.dim", 4)?,
                seed: f.parse("features.seed", 0)?,
            },
            _ => FeatureSpec::File {
                path: f.required("features.path")?.into(),
            },
        };
        let feature_scale = f.float("features.scale", 1.0)?;
        if feature_scale <= 0.0 {
            return Err(CliError::usage("features.scale", "must be positive"));
        }
        let rho = match f.choice("rho", "uniform", &["uniform", "stationary_optimal"])? {
            "uniform" => RhoSpec::Uniform,
            _ => RhoSpec::StationaryOptimal,
        };
        f.choice("nu", "uniform", &["uniform"])?;
        let algorithm = match f.choice("algorithm", "qnpg", &["qnpg", "npg", "both"])? {
            "qnpg" => Algorithm::Qnpg,
            "npg" => Algorithm::Npg,
            _ => Algorithm::Both,
        };
        let schedule = match f.choice("schedule.kind", "geometric", &["geometric", "constant"])? {
            "geometric" => ScheduleSpec::Geometric {
                eta0: f.optional_float("schedule.eta0")?,
            },
            _ => ScheduleSpec::Constant {
                eta: f.required("schedule.eta").and_then(|_| f.float("schedule.eta", 0.0))?,
            },
        };
        match schedule {
            ScheduleSpec::Geometric { eta0: Some(e) } if e <= 0.0 => {
                return Err(CliError::usage("schedule.eta0", "must be positive"))
            }
            ScheduleSpec::Constant { eta } if eta <= 0.0 => {
                return Err(CliError::usage("schedule.eta", "must be positive"))
            }
            ScheduleSpec::Geometric { .. } if gamma == 0.0 => {
                return Err(CliError::usage("schedule.kind", "geometric steps need gamma > 0"))
            }
            _ => {}
        }
        let sgd_step_size = f.optional_float("sgd.step_size")?;
        if matches!(sgd_step_size, Some(a) if a <= 0.0) {
            return Err(CliError::usage("sgd.step_size", "must be positive"));
        }
        let moment_gammas = match raw.get("moment.gammas") {
            None => vec![gamma],
            Some(list) => list
                .split(',')
                .map(|s| {
                    let s = s.trim();
                    match s.parse::<f64>() {
                        Ok(g) if (0.0..1.0).contains(&g) => Ok(g),
                        _ => Err(CliError::usage("moment.gammas", format!("`{s}` is not a discount in [0, 1)"))),
                    }
                })
                .collect::<CliResult<_>>()?,
        };

        Ok(Self {
            recipe,
            gamma,
            mdp,
            features,
            feature_scale,
            rho,
            algorithm,
            schedule,
            iterations: f.parse("iterations", 30)?,
            sgd_steps: positive(&f, "sgd.steps", 1000)?,
            sgd_step_size,
            replicates: positive(&f, "replicates", 1)?,
            seed: f.parse("seed", 0)?,
            draws: positive(&f, "draws", 100_000)?,
            moment_gammas,
            workers: f.parse("workers", 1)?,
            out: raw.get("out").map(PathBuf::from),
        })
    }
}

fn positive(f: &Fields<'_>, key: &str, default: usize) -> CliResult<usize> {
    let v: usize = f.parse(key, default)?;
    if v == 0 {
        Err(CliError::usage(key, "must be at least 1"))
    } else {
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_bundled_default_parses() {
        for r in Recipe::ALL {
            let raw = RawConfig::parse(r.default_config()).unwrap();
            let cfg = ExperimentConfig::from_raw(&raw).unwrap();
            assert_eq!(cfg.recipe, r);
        }
    }

    #[test]
    fn missing_gamma_names_gamma() {
        let raw = RawConfig::parse("recipe = sgd_rate\n").unwrap();
        let err = ExperimentConfig::from_raw(&raw).unwrap_err();
        assert!(matches!(&err, CliError::Usage { field, .. } if field == "gamma"), "{err}");
        assert!(err.to_string().contains("gamma"));
    }

    #[test]
    fn unknown_and_duplicate_keys_are_rejected() {
        assert!(RawConfig::parse("gamma = 0.9\nmdp.colour = red\n").is_err());
        assert!(RawConfig::parse("gamma = 0.9\ngamma = 0.8\n").is_err());
        assert!(RawConfig::parse("no equals sign\n").is_err());
    }

    #[test]
    fn env_overrides_map_double_underscore() {
        assert_eq!(env_key("NPG_MDP__STATES").as_deref(), Some("mdp.states"));
        assert_eq!(env_key("HOME"), None);
        let mut raw = RawConfig::parse(Recipe::SgdRate.default_config()).unwrap();
        raw.apply_env([("NPG_MDP__STATES", "7"), ("PATH", "/bin")]).unwrap();
        let cfg = ExperimentConfig::from_raw(&raw).unwrap();
        assert!(matches!(cfg.mdp, MdpSpec::Random { states: 7, .. }));
        assert!(raw.apply_env([("NPG_BOGUS", "1")]).is_err());
    }

    #[test]
    fn comments_and_defaults() {
        let raw = RawConfig::parse("# header\nrecipe = identity_checks # trailing\ngamma = 0.5\n").unwrap();
        let cfg = ExperimentConfig::from_raw(&raw).unwrap();
        assert_eq!(cfg.gamma, 0.5);
        assert_eq!(cfg.schedule, ScheduleSpec::Geometric { eta0: None });
    }

    #[test]
    fn out_of_range_values_are_named() {
        let raw = RawConfig::parse("recipe = sgd_rate\ngamma = 1.0\n").unwrap();
        assert!(ExperimentConfig::from_raw(&raw).unwrap_err().to_string().contains("gamma"));
        let raw = RawConfig::parse("recipe = sgd_rate\ngamma = 0.9\nmdp.states = 0\n").unwrap();
        assert!(ExperimentConfig::from_raw(&raw).unwrap_err().to_string().contains("mdp.states"));
    }
}
