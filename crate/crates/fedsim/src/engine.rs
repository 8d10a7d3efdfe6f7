//! The federated-averaging round loop.
//!
//! All clients start at zero. Time runs `t = 1..=T*H`; when `t` is a
//! multiple of `H` the available subset is drawn, the server aggregates the
//! previous-step parameters under the configured rule and broadcasts the
//! result to everyone; otherwise every client takes one projected minibatch
//! SGD step. The returned parameter is the average of the `T` per-round
//! aggregates.
//!
//! A communication round replaces a local step, so each window between
//! consecutive aggregations contains exactly `H - 1` SGD steps; with
//! `H = 1` every round communicates and no client ever moves.
//!
//! One master seed derives one independent minibatch stream per client plus
//! a participation stream. Participation draws are consumed only on
//! communication rounds and minibatch draws only on local rounds, so traces
//! are bit-reproducible and independent of how the per-client work is
//! scheduled across threads.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::availability::{sample_subset, ClientId, MarginalWeights, ParticipationSampler};
use crate::data::FederationData;
use crate::error::{Error, Result};
use crate::optimization::{
    global_objective, project, sgd_step, Minibatch, ParamVector, ProjectionSet,
};
use crate::par;
use crate::rng::{self, domain, Stream};

/// Server aggregation rule.
#[derive(Clone, Debug, PartialEq)]
pub enum AggregationRule {
    /// Plain unweighted mean over the available subset; needs no knowledge
    /// of the participation process.
    Agnostic,
    /// `(N / |S|) * sum_{i in S} p_i theta_i` using known marginal weights.
    Weighted(MarginalWeights),
}

impl AggregationRule {
    pub fn name(&self) -> &'static str {
        match self {
            AggregationRule::Agnostic => "agnostic",
            AggregationRule::Weighted(_) => "weighted",
        }
    }
}

/// Step-size policy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepSize {
    Fixed {
        eta: f64,
    },
    /// `eta = c / sqrt(T * H)`, the schedule under which the averaged
    /// iterate converges at the standard rate.
    InverseSqrt {
        c: f64,
    },
}

impl StepSize {
    pub fn resolve(&self, global_rounds: usize, local_steps: usize) -> f64 {
        match *self {
            StepSize::Fixed { eta } => eta,
            StepSize::InverseSqrt { c } => c / ((global_rounds * local_steps) as f64).sqrt(),
        }
    }
}

/// Configuration of one simulated run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub n_clients: usize,
    /// `H`: rounds per communication window.
    pub local_steps: usize,
    /// `T`: number of server aggregations.
    pub global_rounds: usize,
    pub step_size: StepSize,
    pub batch_size: usize,
    pub projection: ProjectionSet,
    /// Project weighted aggregates back onto the ball (ablation; the
    /// weighted rule as stated performs no projection). Default off.
    #[serde(default)]
    pub project_aggregates: bool,
    /// Record the per-window max pairwise client distance in the trace.
    #[serde(default)]
    pub track_divergence: bool,
    pub seed: u64,
}

impl RunConfig {
    pub fn eta(&self) -> f64 {
        self.step_size.resolve(self.global_rounds, self.local_steps)
    }

    pub fn validate(&self, data: &FederationData) -> Result<()> {
        if self.n_clients == 0 || self.local_steps == 0 || self.global_rounds == 0 {
            return Err(Error::validation(
                "n_clients, local_steps and global_rounds must all be at least 1",
            ));
        }
        if self.n_clients != data.n_clients() {
            return Err(Error::dimension(format!(
                "config says {} clients but the federation has {}",
                self.n_clients,
                data.n_clients()
            )));
        }
        if self.batch_size == 0 || self.batch_size > data.min_samples() {
            return Err(Error::validation(format!(
                "batch_size {} must lie in 1..={} (smallest client)",
                self.batch_size,
                data.min_samples()
            )));
        }
        let eta = self.eta();
        if !eta.is_finite() || eta < 0.0 {
            return Err(Error::validation(format!(
                "step size resolves to {eta}; must be finite and >= 0"
            )));
        }
        data.validate()
    }
}

/// Mutable state of the federation during a run.
#[derive(Clone, Debug)]
pub struct FederationState {
    /// Per-client parameters `theta_i^t`.
    pub client_params: Vec<ParamVector>,
    /// Most recent server aggregate.
    pub last_aggregate: Option<ParamVector>,
    /// Running sum of per-round aggregates.
    pub sum_of_aggregates: ParamVector,
    /// Round clock `t`.
    pub round: usize,
}

impl FederationState {
    fn new(n_clients: usize, dim: usize) -> Self {
        Self {
            client_params: vec![ParamVector::zeros(dim); n_clients],
            last_aggregate: None,
            sum_of_aggregates: ParamVector::zeros(dim),
            round: 0,
        }
    }
}

/// One communication round's record.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundRecord {
    /// 1-based aggregation index `tau` (the aggregate at `t = tau * H`).
    pub round: usize,
    pub subset: Vec<ClientId>,
    pub aggregate: ParamVector,
    /// Global objective of the fresh aggregate.
    pub objective_aggregate: f64,
    /// Global objective of the running average of aggregates.
    pub objective_running_avg: f64,
    /// Max pairwise client distance over the window just ended, when tracked.
    pub max_pairwise_distance: Option<f64>,
}

/// Full trace of a run: exactly `T` records plus the returned average.
#[derive(Clone, Debug, PartialEq)]
pub struct RunTrace {
    pub records: Vec<RoundRecord>,
    pub final_average: ParamVector,
}

impl RunTrace {
    /// Objective of the final averaged iterate.
    pub fn final_objective(&self) -> f64 {
        self.records
            .last()
            .map(|r| r.objective_running_avg)
            .unwrap_or(f64::NAN)
    }
}

/// Observer hooks for instrumented runs. Called after each round `t` has
/// fully executed.
pub trait RunObserver {
    /// After a local round: every client took one SGD step.
    fn on_local_round(&mut self, _t: usize, _params: &[ParamVector]) {}
    /// After a communication round: subset drawn, aggregate broadcast.
    fn on_communication(&mut self, _t: usize, _subset: &[ClientId], _aggregate: &ParamVector) {}
}

/// The no-instrumentation observer.
pub struct NoopObserver;

impl RunObserver for NoopObserver {}

/// Aggregate the given clients' parameters under the rule.
pub fn aggregate(
    subset: &[ClientId],
    params: &[ParamVector],
    rule: &AggregationRule,
    n_clients: usize,
) -> Result<ParamVector> {
    if subset.is_empty() {
        return Err(Error::validation("cannot aggregate an empty subset"));
    }
    let dim = params[0].dim();
    let mut out = ParamVector::zeros(dim);
    match rule {
        AggregationRule::Agnostic => {
            for c in subset {
                out.add_scaled(&params[c.index()], 1.0);
            }
            out.scale(1.0 / subset.len() as f64);
        }
        AggregationRule::Weighted(weights) => {
            if weights.n_clients() != n_clients {
                return Err(Error::dimension(format!(
                    "weighted rule carries {} weights for {} clients",
                    weights.n_clients(),
                    n_clients
                )));
            }
            for c in subset {
                out.add_scaled(&params[c.index()], weights.p[c.index()]);
            }
            out.scale(n_clients as f64 / subset.len() as f64);
        }
    }
    Ok(out)
}

/// Mean of all per-round aggregates: the algorithm's returned parameter.
pub fn averaged_iterate(trace: &RunTrace) -> Result<ParamVector> {
    if trace.records.is_empty() {
        return Err(Error::validation("trace has no records to average"));
    }
    let mut sum = ParamVector::zeros(trace.records[0].aggregate.dim());
    for r in &trace.records {
        sum.add_scaled(&r.aggregate, 1.0);
    }
    sum.scale(1.0 / trace.records.len() as f64);
    Ok(sum)
}

struct ClientSlot {
    params: ParamVector,
    stream: Stream,
}

/// Run federated averaging and produce a full trace.
///
/// `eval_weights` are the marginal survival weights under which per-round
/// objectives (and hence the trace) are reported; for faithful reporting
/// they should be the sampler's own marginals, exact where enumerable.
pub fn run_fedavg(
    config: &RunConfig,
    sampler: &ParticipationSampler,
    rule: &AggregationRule,
    data: &FederationData,
    eval_weights: &MarginalWeights,
) -> Result<RunTrace> {
    run_fedavg_observed(config, sampler, rule, data, eval_weights, &mut NoopObserver)
}

/// [`run_fedavg`] with observer hooks for instrumentation.
pub fn run_fedavg_observed(
    config: &RunConfig,
    sampler: &ParticipationSampler,
    rule: &AggregationRule,
    data: &FederationData,
    eval_weights: &MarginalWeights,
    observer: &mut dyn RunObserver,
) -> Result<RunTrace> {
    config.validate(data)?;
    sampler.validate()?;
    if sampler.n_clients() != config.n_clients {
        return Err(Error::dimension(format!(
            "sampler covers {} clients, config says {}",
            sampler.n_clients(),
            config.n_clients
        )));
    }
    if eval_weights.n_clients() != config.n_clients {
        return Err(Error::dimension(format!(
            "eval weights cover {} clients, config says {}",
            eval_weights.n_clients(),
            config.n_clients
        )));
    }
    if let AggregationRule::Weighted(w) = rule {
        w.validate(crate::availability::ESTIMATE_TOL)?;
        if w.n_clients() != config.n_clients {
            return Err(Error::dimension(format!(
                "weighted rule carries {} weights for {} clients",
                w.n_clients(),
                config.n_clients
            )));
        }
    }

    let dim = data.param_dim();
    let eta = config.eta();
    let n = config.n_clients;
    let h = config.local_steps;
    let t_total = config.global_rounds * h;

    let mut slots: Vec<ClientSlot> = (0..n)
        .map(|i| ClientSlot {
            params: ParamVector::zeros(dim),
            stream: rng::derive_stream(config.seed, domain::MINIBATCH, i as u64),
        })
        .collect();
    let mut participation = rng::derive_stream(config.seed, domain::PARTICIPATION, 0);
    let mut state = FederationState::new(n, dim);
    let mut records = Vec::with_capacity(config.global_rounds);
    let mut window_max_distance = 0.0_f64;

    for t in 1..=t_total {
        state.round = t;
        if t % h == 0 {
            let subset = sample_subset(sampler, &mut participation);
            let params: Vec<ParamVector> = slots.iter().map(|s| s.params.clone()).collect();
            let mut agg = aggregate(&subset, &params, rule, n)?;
            if config.project_aggregates {
                agg = project(&agg, &config.projection);
            }
            for slot in &mut slots {
                slot.params = agg.clone();
            }
            state.sum_of_aggregates.add_scaled(&agg, 1.0);
            let tau = t / h;
            let mut running = state.sum_of_aggregates.clone();
            running.scale(1.0 / tau as f64);
            let objective_aggregate =
                global_objective(&agg, eval_weights, &data.datasets, &data.model)?;
            let objective_running_avg =
                global_objective(&running, eval_weights, &data.datasets, &data.model)?;
            records.push(RoundRecord {
                round: tau,
                subset: subset.clone(),
                aggregate: agg.clone(),
                objective_aggregate,
                objective_running_avg,
                max_pairwise_distance: config.track_divergence.then_some(window_max_distance),
            });
            window_max_distance = 0.0;
            state.last_aggregate = Some(agg.clone());
            observer.on_communication(t, &subset, &agg);
        } else {
            // per-client work scales with the minibatch gradient cost
            let grain = config.batch_size * dim;
            par::for_each_indexed_mut_grained(&mut slots, grain, |i, slot| {
                let dataset = &data.datasets[i];
                let batch =
                    Minibatch::sample(&mut slot.stream, dataset.n_samples(), config.batch_size)
                        .expect("batch size validated against every client");
                slot.params = sgd_step(
                    &slot.params,
                    dataset,
                    &data.model,
                    &batch,
                    eta,
                    &config.projection,
                )
                .expect("dimensions validated before the loop");
            });
            if config.track_divergence {
                for i in 0..n {
                    for j in i + 1..n {
                        let d = slots[i].params.distance(&slots[j].params);
                        window_max_distance = window_max_distance.max(d);
                    }
                }
            }
            let params: Vec<ParamVector> = slots.iter().map(|s| s.params.clone()).collect();
            state.client_params = params;
            observer.on_local_round(t, &state.client_params);
        }
    }

    let mut final_average = state.sum_of_aggregates;
    final_average.scale(1.0 / config.global_rounds as f64);
    Ok(RunTrace {
        records,
        final_average,
    })
}

#[derive(Serialize, Deserialize)]
struct RecordWire {
    round: usize,
    subset: Vec<usize>,
    subset_size: usize,
    aggregate: Vec<f64>,
    objective_aggregate: f64,
    objective_running_avg: f64,
    max_pairwise_distance: Option<f64>,
}

/// Stream a trace as JSONL, one record per communication round. Client ids
/// are 1-based on the wire.
pub fn write_trace_jsonl(trace: &RunTrace, out: &mut impl Write) -> Result<()> {
    for r in &trace.records {
        let wire = RecordWire {
            round: r.round,
            subset: r.subset.iter().map(|c| c.index() + 1).collect(),
            subset_size: r.subset.len(),
            aggregate: r.aggregate.0.clone(),
            objective_aggregate: r.objective_aggregate,
            objective_running_avg: r.objective_running_avg,
            max_pairwise_distance: r.max_pairwise_distance,
        };
        serde_json::to_writer(&mut *out, &wire)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Per-round CSV summary. Suboptimality is measured for the running average
/// of aggregates against the supplied reference value.
pub fn write_trace_csv(trace: &RunTrace, f_star: f64, out: &mut impl Write) -> Result<()> {
    writeln!(
        out,
        "round,subset_size,objective_aggregate,objective_running_avg,suboptimality"
    )?;
    for r in &trace.records {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.round,
            r.subset.len(),
            r.objective_aggregate,
            r.objective_running_avg,
            r.objective_running_avg - f_star
        )?;
    }
    Ok(())
}

/// Final state (the returned averaged iterate and its objective) as JSON.
pub fn write_final_state_json(trace: &RunTrace, out: &mut impl Write) -> Result<()> {
    #[derive(Serialize)]
    struct FinalWire<'a> {
        final_average: &'a [f64],
        rounds: usize,
        final_objective: f64,
    }
    serde_json::to_writer_pretty(
        &mut *out,
        &FinalWire {
            final_average: &trace.final_average.0,
            rounds: trace.records.len(),
            final_objective: trace.final_objective(),
        },
    )?;
    out.write_all(b"\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::availability::{compute_marginals_exact, estimate_marginals, SubsetDistribution};
    use crate::data::{generate_regression, SynthRegressionSpec};
    use crate::optimization::{ClientDataset, FeatureMatrix, LossModel, Targets};
    use approx::assert_relative_eq;

    fn one_client_federation() -> FederationData {
        FederationData {
            datasets: vec![ClientDataset::new(
                FeatureMatrix::new(1, 1, vec![1.0]).unwrap(),
                Targets::Real(vec![1.0]),
            )
            .unwrap()],
            model: LossModel::SquaredError,
            meta: crate::data::FederationMeta {
                generator: "test".into(),
                seed: 0,
            },
        }
    }

    fn smoke_config(n_clients: usize, t: usize, h: usize, eta: f64, seed: u64) -> RunConfig {
        RunConfig {
            n_clients,
            local_steps: h,
            global_rounds: t,
            step_size: StepSize::Fixed { eta },
            batch_size: 1,
            projection: ProjectionSet::new(10.0).unwrap(),
            project_aggregates: false,
            track_divergence: false,
            seed,
        }
    }

    #[test]
    fn aggregate_agnostic_two_point_mean() {
        let params = vec![
            ParamVector(vec![0.0, 0.0]),
            ParamVector(vec![2.0, 0.0]),
            ParamVector(vec![0.0, 0.0]),
            ParamVector(vec![0.0, 4.0]),
        ];
        let subset = vec![ClientId(1), ClientId(3)];
        let out = aggregate(&subset, &params, &AggregationRule::Agnostic, 4).unwrap();
        assert_eq!(out.0, vec![1.0, 2.0]);
    }

    #[test]
    fn aggregate_weighted_hand_value() {
        let params = vec![
            ParamVector(vec![1.0, 0.0]),
            ParamVector(vec![0.0, 1.0]),
            ParamVector(vec![9.0, 9.0]),
            ParamVector(vec![9.0, 9.0]),
        ];
        let p = MarginalWeights::exact(vec![0.4, 0.1, 0.25, 0.25]).unwrap();
        let subset = vec![ClientId(0), ClientId(1)];
        let out = aggregate(&subset, &params, &AggregationRule::Weighted(p), 4).unwrap();
        assert_relative_eq!(out.0[0], 0.8, epsilon = 1e-15);
        assert_relative_eq!(out.0[1], 0.2, epsilon = 1e-15);
    }

    #[test]
    fn aggregate_uniform_weighted_equals_agnostic() {
        let params = vec![
            ParamVector(vec![1.5]),
            ParamVector(vec![-0.5]),
            ParamVector(vec![3.0]),
        ];
        let subset = vec![ClientId(0), ClientId(2)];
        let a = aggregate(&subset, &params, &AggregationRule::Agnostic, 3).unwrap();
        let w = aggregate(
            &subset,
            &params,
            &AggregationRule::Weighted(MarginalWeights::uniform(3)),
            3,
        )
        .unwrap();
        assert!(a.minus(&w).norm() < 1e-15);
    }

    #[test]
    fn aggregate_rejects_empty_subset() {
        let params = vec![ParamVector(vec![1.0])];
        assert!(aggregate(&[], &params, &AggregationRule::Agnostic, 1).is_err());
    }

    #[test]
    fn hand_traced_single_client_run() {
        // One local step to 0.5, then the communication round aggregates it.
        let data = one_client_federation();
        let dist = SubsetDistribution::singleton_atom(1, vec![0]).unwrap();
        let sampler = ParticipationSampler::explicit(dist);
        let config = smoke_config(1, 1, 2, 0.25, 0);
        let p = MarginalWeights::uniform(1);
        let trace = run_fedavg(&config, &sampler, &AggregationRule::Agnostic, &data, &p).unwrap();
        assert_eq!(trace.records.len(), 1);
        assert_relative_eq!(trace.records[0].aggregate.0[0], 0.5, epsilon = 1e-15);
        assert_relative_eq!(trace.final_average.0[0], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn h_equal_one_never_moves() {
        let data = one_client_federation();
        let dist = SubsetDistribution::singleton_atom(1, vec![0]).unwrap();
        let sampler = ParticipationSampler::explicit(dist);
        let config = smoke_config(1, 8, 1, 0.25, 0);
        let p = MarginalWeights::uniform(1);
        let trace = run_fedavg(&config, &sampler, &AggregationRule::Agnostic, &data, &p).unwrap();
        assert_eq!(trace.records.len(), 8);
        for r in &trace.records {
            assert_eq!(r.aggregate.0, vec![0.0]);
        }
        assert_eq!(trace.final_average.0, vec![0.0]);
    }

    #[test]
    fn zero_eta_stays_at_origin() {
        let spec = SynthRegressionSpec {
            n_clients: 3,
            samples_per_client: 4,
            dim: 2,
            noise_std: 0.1,
            heterogeneity: 0.2,
            seed: 5,
        };
        let data = generate_regression(&spec).unwrap();
        let sampler = ParticipationSampler::bernoulli(vec![0.8, 0.8, 0.8]).unwrap();
        let config = smoke_config(3, 4, 3, 0.0, 1);
        let p = compute_marginals_exact(
            &crate::availability::enumerate_sampler_distribution(&sampler).unwrap(),
        )
        .unwrap();
        let trace = run_fedavg(&config, &sampler, &AggregationRule::Agnostic, &data, &p).unwrap();
        assert_eq!(trace.final_average.0, vec![0.0, 0.0]);
        let f0 = global_objective(&ParamVector::zeros(2), &p, &data.datasets, &data.model).unwrap();
        assert_relative_eq!(trace.records.last().unwrap().objective_running_avg, f0);
    }

    #[test]
    fn uniform_weighted_matches_agnostic_trace() {
        let spec = SynthRegressionSpec {
            n_clients: 4,
            samples_per_client: 6,
            dim: 3,
            noise_std: 0.1,
            heterogeneity: 0.3,
            seed: 2,
        };
        let data = generate_regression(&spec).unwrap();
        let sampler =
            ParticipationSampler::fixed_size_weighted(vec![1.0, 1.0, 1.0, 1.0], 2).unwrap();
        let config = smoke_config(4, 10, 3, 0.05, 3);
        let p = MarginalWeights::uniform(4);
        let a = run_fedavg(&config, &sampler, &AggregationRule::Agnostic, &data, &p).unwrap();
        let w = run_fedavg(
            &config,
            &sampler,
            &AggregationRule::Weighted(MarginalWeights::uniform(4)),
            &data,
            &p,
        )
        .unwrap();
        assert_eq!(a.records.len(), w.records.len());
        for (ra, rw) in a.records.iter().zip(&w.records) {
            assert_eq!(ra.subset, rw.subset);
            for (x, y) in ra.aggregate.0.iter().zip(&rw.aggregate.0) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_seeds_identical_traces() {
        let spec = SynthRegressionSpec {
            n_clients: 5,
            samples_per_client: 8,
            dim: 2,
            noise_std: 0.2,
            heterogeneity: 0.4,
            seed: 11,
        };
        let data = generate_regression(&spec).unwrap();
        let sampler = ParticipationSampler::fixed_size_weighted(
            (0..5).map(|i| (-(i as f64) / 10.0).exp()).collect(),
            2,
        )
        .unwrap();
        let config = smoke_config(5, 6, 4, 0.02, 42);
        let p = compute_marginals_exact(
            &crate::availability::enumerate_sampler_distribution(&sampler).unwrap(),
        )
        .unwrap();
        let a = run_fedavg(&config, &sampler, &AggregationRule::Agnostic, &data, &p).unwrap();
        let b = run_fedavg(&config, &sampler, &AggregationRule::Agnostic, &data, &p).unwrap();
        assert_eq!(a, b);
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_and_sequential_traces_are_bit_identical() {
        let spec = SynthRegressionSpec {
            n_clients: 6,
            samples_per_client: 10,
            dim: 3,
            noise_std: 0.1,
            heterogeneity: 0.5,
            seed: 13,
        };
        let data = generate_regression(&spec).unwrap();
        let sampler = ParticipationSampler::bernoulli(vec![0.6; 6]).unwrap();
        let config = smoke_config(6, 5, 3, 0.03, 77);
        let p = compute_marginals_exact(
            &crate::availability::enumerate_sampler_distribution(&sampler).unwrap(),
        )
        .unwrap();
        let par_trace =
            run_fedavg(&config, &sampler, &AggregationRule::Agnostic, &data, &p).unwrap();
        let _guard = par::TEST_OVERRIDE_LOCK.lock().unwrap();
        par::set_force_sequential(true);
        let seq_trace =
            run_fedavg(&config, &sampler, &AggregationRule::Agnostic, &data, &p).unwrap();
        par::set_force_sequential(false);
        assert_eq!(par_trace, seq_trace);
    }

    #[test]
    fn broadcast_synchrony_and_window_structure() {
        struct Counter {
            local_since_comm: usize,
            window_lengths: Vec<usize>,
            synchronized: bool,
        }
        impl RunObserver for Counter {
            fn on_local_round(&mut self, _t: usize, _params: &[ParamVector]) {
                self.local_since_comm += 1;
            }
            fn on_communication(&mut self, _t: usize, _s: &[ClientId], _a: &ParamVector) {
                self.window_lengths.push(self.local_since_comm);
                self.local_since_comm = 0;
            }
        }
        let spec = SynthRegressionSpec {
            n_clients: 3,
            samples_per_client: 5,
            dim: 2,
            noise_std: 0.1,
            heterogeneity: 0.3,
            seed: 4,
        };
        let data = generate_regression(&spec).unwrap();
        let sampler = ParticipationSampler::bernoulli(vec![0.9, 0.9, 0.9]).unwrap();
        let config = smoke_config(3, 5, 4, 0.05, 9);
        let p = MarginalWeights::uniform(3);
        let mut obs = Counter {
            local_since_comm: 0,
            window_lengths: vec![],
            synchronized: true,
        };
        let trace = run_fedavg_observed(
            &config,
            &sampler,
            &AggregationRule::Agnostic,
            &data,
            &p,
            &mut obs,
        )
        .unwrap();
        assert!(obs.synchronized);
        // every window holds exactly H - 1 local steps
        assert_eq!(obs.window_lengths, vec![3; 5]);
        // feasibility of every aggregate under the agnostic rule
        for r in &trace.records {
            assert!(r.aggregate.norm() <= 10.0 + 1e-12);
        }
    }

    #[test]
    fn participation_accounting_recovers_marginals() {
        // Long run, frozen parameters: per-round subset frequencies
        // re-estimate the exact marginals.
        let data = {
            let spec = SynthRegressionSpec {
                n_clients: 4,
                samples_per_client: 2,
                dim: 1,
                noise_std: 0.0,
                heterogeneity: 0.0,
                seed: 0,
            };
            generate_regression(&spec).unwrap()
        };
        let sampler =
            ParticipationSampler::fixed_size_weighted(vec![1.0, 0.7, 0.45, 0.3], 2).unwrap();
        let exact = compute_marginals_exact(
            &crate::availability::enumerate_sampler_distribution(&sampler).unwrap(),
        )
        .unwrap();
        let config = smoke_config(4, 3000, 2, 0.0, 21);
        let trace =
            run_fedavg(&config, &sampler, &AggregationRule::Agnostic, &data, &exact).unwrap();
        let draws = trace.records.len() as f64;
        let mut sum = [0.0_f64; 4];
        let mut sum_sq = [0.0_f64; 4];
        for r in &trace.records {
            let share = 1.0 / r.subset.len() as f64;
            for c in &r.subset {
                sum[c.index()] += share;
                sum_sq[c.index()] += share * share;
            }
        }
        for i in 0..4 {
            let mean = sum[i] / draws;
            let var = ((sum_sq[i] - draws * mean * mean) / (draws - 1.0)).max(0.0);
            let stderr = (var / draws).sqrt();
            assert!(
                (mean - exact.p[i]).abs() <= 3.0 * stderr + 1e-9,
                "client {i}: mean {mean} exact {} stderr {stderr}",
                exact.p[i]
            );
        }
    }

    #[test]
    fn estimated_weights_feed_the_weighted_rule() {
        // The weighted rule accepts Monte-Carlo weights (sum within 1e-9).
        let spec = SynthRegressionSpec {
            n_clients: 3,
            samples_per_client: 4,
            dim: 2,
            noise_std: 0.1,
            heterogeneity: 0.2,
            seed: 8,
        };
        let data = generate_regression(&spec).unwrap();
        let sampler = ParticipationSampler::fixed_size_weighted(vec![1.0, 0.6, 0.3], 2).unwrap();
        let mut est_rng = rng::derive_stream(3, domain::MARGINAL_EST, 0);
        let p_hat = estimate_marginals(&sampler, 20_000, &mut est_rng).unwrap();
        let config = smoke_config(3, 3, 2, 0.05, 2);
        let trace = run_fedavg(
            &config,
            &sampler,
            &AggregationRule::Weighted(p_hat.clone()),
            &data,
            &p_hat,
        )
        .unwrap();
        assert_eq!(trace.records.len(), 3);
    }

    #[test]
    fn averaged_iterate_matches_trace_mean() {
        let recs = [[2.0, 0.0], [0.0, 2.0]];
        let trace = RunTrace {
            records: recs
                .iter()
                .enumerate()
                .map(|(i, v)| RoundRecord {
                    round: i + 1,
                    subset: vec![ClientId(0)],
                    aggregate: ParamVector(v.to_vec()),
                    objective_aggregate: 0.0,
                    objective_running_avg: 0.0,
                    max_pairwise_distance: None,
                })
                .collect(),
            final_average: ParamVector(vec![1.0, 1.0]),
        };
        let avg = averaged_iterate(&trace).unwrap();
        assert_eq!(avg.0, vec![1.0, 1.0]);
        let empty = RunTrace {
            records: vec![],
            final_average: ParamVector::zeros(2),
        };
        assert!(averaged_iterate(&empty).is_err());
    }

    #[test]
    fn jsonl_and_csv_writers_emit_expected_shapes() {
        let data = one_client_federation();
        let dist = SubsetDistribution::singleton_atom(1, vec![0]).unwrap();
        let sampler = ParticipationSampler::explicit(dist);
        let config = smoke_config(1, 2, 2, 0.25, 0);
        let p = MarginalWeights::uniform(1);
        let trace = run_fedavg(&config, &sampler, &AggregationRule::Agnostic, &data, &p).unwrap();

        let mut jsonl = Vec::new();
        write_trace_jsonl(&trace, &mut jsonl).unwrap();
        let text = String::from_utf8(jsonl).unwrap();
        assert_eq!(text.lines().count(), 2);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first["round"], 1);
        assert_eq!(first["subset"], serde_json::json!([1])); // 1-based on the wire
        assert_eq!(first["subset_size"], 1);

        let mut csv = Vec::new();
        write_trace_csv(&trace, 0.0, &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "round,subset_size,objective_aggregate,objective_running_avg,suboptimality"
        );
        assert_eq!(lines.count(), 2);

        let mut fin = Vec::new();
        write_final_state_json(&trace, &mut fin).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&fin).unwrap();
        assert_eq!(v["rounds"], 2);
        assert!(v["final_average"].is_array());
    }
}
