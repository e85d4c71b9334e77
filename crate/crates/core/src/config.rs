//! Declarative scenario files: one model, one weight family and a list of
//! experiments, each with kind-specific parameters.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::drift::counterexample::CounterexampleConfig;
use crate::drift::imh::ImhFlavor;
use crate::drift::rwm::{Exponents, RwmMode, RwmModel, ScanSpec};
use crate::drift::unifdrift::TailPremise;
use crate::drift::DriftSpec;
use crate::target::{Increment, ModelSpec, ProposalKernel, StateSpace, TargetDistribution};
use crate::weights::{GridSpec, WeightFamily};
use crate::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetConfig {
    /// Unnormalized masses on `{0, …, n−1}`.
    Masses { masses: Vec<f64> },
    /// `π(x) ∝ ratio^x`.
    Geometric { states: usize, ratio: f64 },
    Uniform { states: usize },
    /// Centred normal with standard deviation `sd` on a 1-D midpoint grid.
    GridNormal { lower: f64, upper: f64, points: usize, sd: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProposalConfig {
    UniformIndependent,
    NearestNeighbour,
    Independent { probs: Vec<f64> },
    RandomWalk { increments: Vec<Increment> },
    Explicit { matrix: Vec<Vec<f64>> },
    ConvolvedGaussian { half_sd: f64, half_width: i64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub target: TargetConfig,
    pub proposal: ProposalConfig,
}

impl ModelConfig {
    pub fn build(&self) -> Result<ModelSpec, Error> {
        let target = match &self.target {
            TargetConfig::Masses { masses } => TargetDistribution::from_masses(StateSpace::finite(masses.len())?, masses)?,
            TargetConfig::Geometric { states, ratio } => TargetDistribution::geometric(*states, *ratio)?,
            TargetConfig::Uniform { states } => TargetDistribution::uniform(StateSpace::finite(*states)?)?,
            TargetConfig::GridNormal { lower, upper, points, sd } => {
                let sd = *sd;
                TargetDistribution::from_log_density(StateSpace::grid(*lower, *upper, *points, 1)?, move |c: &[f64]| {
                    -0.5 * (c[0] / sd).powi(2)
                })?
            }
        };
        let proposal = match &self.proposal {
            ProposalConfig::UniformIndependent => ProposalKernel::uniform_independent(target.len()),
            ProposalConfig::NearestNeighbour => ProposalKernel::nearest_neighbour(),
            ProposalConfig::Independent { probs } => ProposalKernel::Independent { probs: probs.clone() },
            ProposalConfig::RandomWalk { increments } => ProposalKernel::RandomWalk {
                increments: increments.clone(),
            },
            ProposalConfig::Explicit { matrix } => ProposalKernel::Explicit { matrix: matrix.clone() },
            ProposalConfig::ConvolvedGaussian { half_sd, half_width } => ProposalKernel::convolved_gaussian(*half_sd, *half_width),
        };
        Ok(ModelSpec::new(target, proposal)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    SpectralSandwich,
    VarianceOrder,
    VarianceConvergence,
    GapCollapse,
    DriftImh,
    DriftUniform,
    DriftRwm,
    Counterexample,
    Unifdrift,
}

impl ExperimentKind {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentKind::SpectralSandwich => "spectral_sandwich",
            ExperimentKind::VarianceOrder => "variance_order",
            ExperimentKind::VarianceConvergence => "variance_convergence",
            ExperimentKind::GapCollapse => "gap_collapse",
            ExperimentKind::DriftImh => "drift_imh",
            ExperimentKind::DriftUniform => "drift_uniform",
            ExperimentKind::DriftRwm => "drift_rwm",
            ExperimentKind::Counterexample => "counterexample",
            ExperimentKind::Unifdrift => "unifdrift",
        }
    }

    /// Whether the experiment reads the scenario's model and family.
    pub fn needs_model(&self) -> bool {
        !matches!(self, ExperimentKind::DriftRwm | ExperimentKind::Counterexample)
    }
}

fn default_tolerance() -> f64 {
    1e-8
}

fn default_lambda() -> f64 {
    0.9
}

fn default_ns() -> Vec<usize> {
    vec![1, 2, 4, 8, 16, 32]
}

fn default_upper_quantiles() -> Vec<f64> {
    vec![1.0 - 1e-2, 1.0 - 1e-4, 1.0 - 1e-6]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SandwichParams {
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VarianceOrderParams {
    /// Test function on X; the state index when absent.
    #[serde(default)]
    pub g: Option<Vec<f64>>,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VarianceConvergenceParams {
    #[serde(default = "default_ns")]
    pub ns: Vec<usize>,
    #[serde(default)]
    pub g: Option<Vec<f64>>,
    #[serde(default)]
    pub grid: GridSpec,
    /// Core-set mass defect for the total-variation scan; skipped when absent.
    #[serde(default)]
    pub tv_epsilon: Option<f64>,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GapCollapseParams {
    #[serde(default = "default_upper_quantiles")]
    pub upper_quantiles: Vec<f64>,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftImhParams {
    pub flavor: ImhFlavor,
    #[serde(default)]
    pub grid: GridSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftUniformParams {
    pub beta: f64,
    #[serde(default)]
    pub grid: GridSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftRwmParams {
    pub model: RwmModel,
    pub exponents: Exponents,
    pub mode: RwmMode,
    /// `scan.seed` is replaced by the experiment seed.
    #[serde(default)]
    pub scan: ScanSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnifdriftParams {
    pub drift: DriftSpec,
    pub ns: Vec<usize>,
    pub v_levels: Vec<f64>,
    #[serde(default)]
    pub premise: Option<TailPremise>,
    #[serde(default)]
    pub grid: GridSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Experiment {
    SpectralSandwich(SandwichParams),
    VarianceOrder(VarianceOrderParams),
    VarianceConvergence(VarianceConvergenceParams),
    GapCollapse(GapCollapseParams),
    DriftImh(DriftImhParams),
    DriftUniform(DriftUniformParams),
    DriftRwm(DriftRwmParams),
    Counterexample(CounterexampleConfig),
    Unifdrift(UnifdriftParams),
}

impl Experiment {
    pub fn kind(&self) -> ExperimentKind {
        match self {
            Experiment::SpectralSandwich(_) => ExperimentKind::SpectralSandwich,
            Experiment::VarianceOrder(_) => ExperimentKind::VarianceOrder,
            Experiment::VarianceConvergence(_) => ExperimentKind::VarianceConvergence,
            Experiment::GapCollapse(_) => ExperimentKind::GapCollapse,
            Experiment::DriftImh(_) => ExperimentKind::DriftImh,
            Experiment::DriftUniform(_) => ExperimentKind::DriftUniform,
            Experiment::DriftRwm(_) => ExperimentKind::DriftRwm,
            Experiment::Counterexample(_) => ExperimentKind::Counterexample,
            Experiment::Unifdrift(_) => ExperimentKind::Unifdrift,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentEntry {
    pub name: String,
    pub experiment: Experiment,
}

/// Raw file layout; `params` is decoded once `kind` is known.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExperiment {
    kind: ExperimentKind,
    #[serde(default)]
    name: Option<String>,
    #[serde(default)]
    params: Option<toml::Table>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    seed: Option<u64>,
    #[serde(default)]
    output_dir: Option<String>,
    #[serde(default)]
    model: Option<ModelConfig>,
    #[serde(default)]
    family: Option<WeightFamily>,
    #[serde(default)]
    experiments: Vec<RawExperiment>,
}

#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub output_dir: Option<String>,
    pub model_config: Option<ModelConfig>,
    pub model: Option<ModelSpec>,
    pub family: Option<WeightFamily>,
    pub experiments: Vec<ExperimentEntry>,
}

fn config_error(key: impl Into<String>, message: impl ToString) -> Error {
    Error::Config {
        key: key.into(),
        message: message.to_string(),
    }
}

fn decode<T: DeserializeOwned>(key: &str, params: Option<toml::Table>) -> Result<T, Error> {
    toml::Value::Table(params.unwrap_or_default())
        .try_into()
        .map_err(|e: toml::de::Error| config_error(key, e.message()))
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, Error> {
        let raw: RawScenario = toml::from_str(text).map_err(|e| {
            let key = e
                .span()
                .map(|s| format!("byte {}..{}", s.start, s.end))
                .unwrap_or_else(|| "<root>".into());
            config_error(key, e.message())
        })?;
        let seed = raw.seed.ok_or_else(|| config_error("seed", "missing key (no ambient randomness)"))?;

        let mut experiments = Vec::with_capacity(raw.experiments.len());
        for (i, e) in raw.experiments.into_iter().enumerate() {
            let key = format!("experiments[{i}].params");
            let experiment = match e.kind {
                ExperimentKind::SpectralSandwich => Experiment::SpectralSandwich(decode(&key, e.params)?),
                ExperimentKind::VarianceOrder => Experiment::VarianceOrder(decode(&key, e.params)?),
                ExperimentKind::VarianceConvergence => Experiment::VarianceConvergence(decode(&key, e.params)?),
                ExperimentKind::GapCollapse => Experiment::GapCollapse(decode(&key, e.params)?),
                ExperimentKind::DriftImh => Experiment::DriftImh(decode(&key, e.params)?),
                ExperimentKind::DriftUniform => Experiment::DriftUniform(decode(&key, e.params)?),
                ExperimentKind::DriftRwm => Experiment::DriftRwm(decode(&key, e.params)?),
                ExperimentKind::Counterexample => Experiment::Counterexample(decode(&key, e.params)?),
                ExperimentKind::Unifdrift => Experiment::Unifdrift(decode(&key, e.params)?),
            };
            let name = e.name.unwrap_or_else(|| format!("{}_{i}", e.kind.name()));
            if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                return Err(config_error(format!("experiments[{i}].name"), "use only [A-Za-z0-9_-]"));
            }
            if experiments.iter().any(|x: &ExperimentEntry| x.name == name) {
                return Err(config_error(format!("experiments[{i}].name"), format!("duplicate name `{name}`")));
            }
            experiments.push(ExperimentEntry { name, experiment });
        }

        let needs: Option<usize> = experiments.iter().position(|e| e.experiment.kind().needs_model());
        let model = match (&raw.model, needs) {
            (Some(m), _) => Some(m.build().map_err(|e| config_error("model", e))?),
            (None, Some(i)) => return Err(config_error("model", format!("missing key (required by experiments[{i}])"))),
            (None, None) => None,
        };
        let family = match (raw.family, needs) {
            (Some(f), _) => {
                if let Some(m) = &model {
                    f.validate(m.len()).map_err(|e| config_error("family", e))?;
                }
                Some(f)
            }
            (None, Some(i)) => return Err(config_error("family", format!("missing key (required by experiments[{i}])"))),
            (None, None) => None,
        };
        Ok(ScenarioConfig {
            seed,
            output_dir: raw.output_dir,
            model_config: raw.model,
            model,
            family,
            experiments,
        })
    }

    /// Seed of the `i`-th experiment.
    pub fn experiment_seed(&self, i: usize) -> u64 {
        self.seed.wrapping_add((i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
seed = 3
[model]
target = { kind = "masses", masses = [1.0, 2.0, 3.0, 2.0, 1.5] }
proposal = { kind = "nearest_neighbour" }
[family]
kind = "two_point"
low = 0.5
p_low = 0.8
"#;

    #[test]
    fn parses_experiments_with_defaults() {
        let text = format!(
            "{BASE}\n[[experiments]]\nkind = \"variance_order\"\n[experiments.params]\nlambda = 0.5\n\n[[experiments]]\nkind = \"counterexample\"\nname = \"ce\"\n[experiments.params]\nk_max = 1\n"
        );
        let c = ScenarioConfig::from_toml(&text).unwrap();
        assert_eq!(c.experiments.len(), 2);
        assert_eq!(c.experiments[0].name, "variance_order_0");
        match &c.experiments[0].experiment {
            Experiment::VarianceOrder(p) => {
                assert_eq!(p.lambda, 0.5);
                assert!(p.g.is_none());
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(c.model.as_ref().unwrap().len(), 5);
        assert_ne!(c.experiment_seed(0), c.experiment_seed(1));
    }

    #[test]
    fn missing_keys_are_named() {
        let no_family = BASE.split("[family]").next().unwrap().to_string() + "\n[[experiments]]\nkind = \"spectral_sandwich\"\n";
        match ScenarioConfig::from_toml(&no_family) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "family"),
            other => panic!("{other:?}"),
        }
        match ScenarioConfig::from_toml("[[experiments]]\nkind = \"counterexample\"\n") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "seed"),
            other => panic!("{other:?}"),
        }
        let bad = format!("{BASE}\n[[experiments]]\nkind = \"drift_uniform\"\n[experiments.params]\nbta = 2.0\n");
        match ScenarioConfig::from_toml(&bad) {
            Err(Error::Config { key, message }) => {
                assert_eq!(key, "experiments[0].params");
                assert!(message.contains("bta"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_list_needs_no_model() {
        let c = ScenarioConfig::from_toml("seed = 1\nexperiments = []\n").unwrap();
        assert!(c.experiments.is_empty() && c.model.is_none());
    }
}
