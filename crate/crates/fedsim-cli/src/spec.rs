//! The experiment spec: one JSON document, all key fields overridable on
//! the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use fedsim::availability::ParticipationSampler;
use fedsim::data::{
    generate_regression, load_mnist_idx, partition, FederationData, PartitionStrategy,
    SynthRegressionSpec,
};
use fedsim::engine::{RunConfig, StepSize};
use fedsim::optimization::{FeatureMatrix, ProjectionSet};

use crate::failure::Failure;
use crate::RunOverrides;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TaskSpec {
    SynthRegression {
        #[serde(flatten)]
        spec: SynthRegressionSpec,
    },
    MnistLogistic {
        images: PathBuf,
        labels: PathBuf,
        n_clients: usize,
        #[serde(default = "default_partition")]
        partition: PartitionStrategy,
        /// Use only the first `limit` samples when set.
        #[serde(default)]
        limit: Option<usize>,
        #[serde(default)]
        seed: u64,
    },
}

fn default_partition() -> PartitionStrategy {
    PartitionStrategy::IidShards
}

impl TaskSpec {
    pub fn n_clients(&self) -> usize {
        match self {
            TaskSpec::SynthRegression { spec } => spec.n_clients,
            TaskSpec::MnistLogistic { n_clients, .. } => *n_clients,
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            TaskSpec::SynthRegression { spec } => spec.seed,
            TaskSpec::MnistLogistic { seed, .. } => *seed,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TaskSpec::SynthRegression { .. } => "synth-regression",
            TaskSpec::MnistLogistic { .. } => "mnist-logistic",
        }
    }

    pub fn build(&self) -> Result<FederationData, Failure> {
        match self {
            TaskSpec::SynthRegression { spec } => Ok(generate_regression(spec)?),
            TaskSpec::MnistLogistic {
                images,
                labels,
                n_clients,
                partition: strategy,
                limit,
                seed,
            } => {
                let (features, labels) = load_mnist_idx(images, labels)?;
                let (features, labels) = match limit {
                    Some(limit) if *limit < labels.len() => {
                        let d = features.n_cols();
                        let values: Vec<f64> =
                            (0..*limit).flat_map(|i| features.row(i).to_vec()).collect();
                        (
                            FeatureMatrix::new(*limit, d, values)?,
                            labels[..*limit].to_vec(),
                        )
                    }
                    _ => (features, labels),
                };
                Ok(partition(features, labels, *n_clients, *strategy, *seed)?)
            }
        }
    }
}

/// Sampler descriptor: the core kinds plus the exponential-bias shorthand
/// `w_i = exp(-(i-1)/beta)` (`beta = null` or `"inf"` means uniform).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SamplerSpec {
    Explicit {
        dist: fedsim::availability::SubsetDistribution,
    },
    FixedSizeWeighted {
        weights: Vec<f64>,
        size: usize,
    },
    BernoulliIndependent {
        probs: Vec<f64>,
    },
    FixedSizeExp {
        n_clients: usize,
        size: usize,
        /// Bias scale; larger is flatter. Omit for uniform weights.
        beta: Option<f64>,
    },
}

pub fn exp_weights(n_clients: usize, beta: Option<f64>) -> Vec<f64> {
    match beta {
        Some(b) if b.is_finite() => (0..n_clients).map(|i| (-(i as f64) / b).exp()).collect(),
        _ => vec![1.0; n_clients],
    }
}

impl SamplerSpec {
    pub fn build(&self) -> Result<ParticipationSampler, Failure> {
        let sampler = match self {
            SamplerSpec::Explicit { dist } => ParticipationSampler::explicit(dist.clone()),
            SamplerSpec::FixedSizeWeighted { weights, size } => {
                ParticipationSampler::fixed_size_weighted(weights.clone(), *size)?
            }
            SamplerSpec::BernoulliIndependent { probs } => {
                ParticipationSampler::bernoulli(probs.clone())?
            }
            SamplerSpec::FixedSizeExp {
                n_clients,
                size,
                beta,
            } => ParticipationSampler::fixed_size_weighted(exp_weights(*n_clients, *beta), *size)?,
        };
        Ok(sampler)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSection {
    pub local_steps: usize,
    pub global_rounds: usize,
    pub step_size: StepSize,
    pub batch_size: usize,
    pub radius: f64,
    #[serde(default)]
    pub project_aggregates: bool,
    #[serde(default)]
    pub track_divergence: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RuleName {
    Agnostic,
    Weighted,
}

impl RuleName {
    pub fn as_str(&self) -> &'static str {
        match self {
            RuleName::Agnostic => "agnostic",
            RuleName::Weighted => "weighted",
        }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_marginal_draws() -> u64 {
    100_000
}

/// One experiment: task, run shape, sampler, rules, seeds, output.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub task: TaskSpec,
    pub run: RunSection,
    pub sampler: SamplerSpec,
    pub rules: Vec<RuleName>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_marginal_draws")]
    pub marginal_draws: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl ExperimentSpec {
    pub fn load(path: &Path, overrides: &RunOverrides) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::new(1, format!("{}: {e}", path.display())))?;
        let mut spec: ExperimentSpec = serde_json::from_str(&text).map_err(|e| {
            Failure::invalid(format!(
                "{}:{}:{}: {e}",
                path.display(),
                e.line(),
                e.column()
            ))
        })?;
        spec.apply(overrides)?;
        spec.validate()?;
        Ok(spec)
    }

    fn apply(&mut self, overrides: &RunOverrides) -> Result<(), Failure> {
        if let Some(out) = &overrides.out {
            self.out = Some(out.clone());
        }
        if let Some(seeds) = &overrides.seeds {
            self.seeds = seeds.clone();
        }
        if let Some(rules) = &overrides.rules {
            self.rules = rules
                .iter()
                .map(|r| match r.as_str() {
                    "agnostic" => Ok(RuleName::Agnostic),
                    "weighted" => Ok(RuleName::Weighted),
                    other => Err(Failure::invalid(format!(
                        "unknown rule {other:?}; expected agnostic or weighted"
                    ))),
                })
                .collect::<Result<Vec<_>, _>>()?;
        }
        if let Some(rounds) = overrides.rounds {
            self.run.global_rounds = rounds;
        }
        if let Some(h) = overrides.local_steps {
            self.run.local_steps = h;
        }
        if let Some(eta) = overrides.eta {
            self.run.step_size = StepSize::Fixed { eta };
        }
        if let Some(c) = overrides.schedule_c {
            self.run.step_size = StepSize::InverseSqrt { c };
        }
        if let Some(b) = overrides.batch_size {
            self.run.batch_size = b;
        }
        if let Some(d) = overrides.marginal_draws {
            self.marginal_draws = d;
        }
        Ok(())
    }

    fn validate(&self) -> Result<(), Failure> {
        if self.rules.is_empty() {
            return Err(Failure::invalid("at least one rule is required"));
        }
        if self.seeds.is_empty() {
            return Err(Failure::invalid("at least one seed is required"));
        }
        if self.rules.contains(&RuleName::Weighted) && self.marginal_draws == 0 {
            return Err(Failure::invalid(
                "the weighted rule needs resolvable marginals: set marginal_draws > 0",
            ));
        }
        Ok(())
    }

    pub fn run_config(&self, seed: u64) -> Result<RunConfig, Failure> {
        Ok(RunConfig {
            n_clients: self.task.n_clients(),
            local_steps: self.run.local_steps,
            global_rounds: self.run.global_rounds,
            step_size: self.run.step_size,
            batch_size: self.run.batch_size,
            projection: ProjectionSet::new(self.run.radius)?,
            project_aggregates: self.run.project_aggregates,
            track_divergence: self.run.track_divergence,
            seed,
        })
    }

    pub fn out_dir(&self) -> Result<&Path, Failure> {
        self.out.as_deref().ok_or_else(|| {
            Failure::invalid("no output directory: set `out` in the spec or pass --out")
        })
    }
}
