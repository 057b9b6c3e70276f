//! Round orchestration: broadcast → local training → upload → server
//! aggregation → evaluation, repeated for the configured number of rounds.

use rayon::prelude::*;
use rayon::ThreadPool;
use serde::{Deserialize, Serialize};

use super::client::{local_objective, local_train, ClientReport, ClientState, LocalOutcome};
use super::metrics::{evaluate, MetricsSink};
use super::theory::{estimate_theory_params, round_satisfies_bound, RoundTrace};
use super::{FederationConfig, FederationError, Model};
use crate::autodiff::ParamStore;
use crate::prototypes::PrototypeUpload;
use crate::server::{fedavg_aggregate, AggregationWeights, GlobalPrototypeSet};
use crate::synthdata::{make_federation_data, DataSpec, FederationData, Sample};

/// What the server broadcasts at the start of a round.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub params: ParamStore,
    pub prototypes: GlobalPrototypeSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub clients: Vec<ClientReport>,
    pub uploads_total: usize,
    /// Per-domain foreground Dice of the new global model, on evaluation rounds.
    pub domain_dice: Option<Vec<f64>>,
    pub avg_dice: Option<f64>,
    /// Monitor record, when the monitor is enabled.
    pub trace: Option<RoundTrace>,
    /// One-round bound evaluated with the constants estimated so far.
    pub descent_ok: Option<bool>,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub reports: Vec<RoundReport>,
    pub final_params: ParamStore,
    pub final_prototypes: GlobalPrototypeSet,
}

impl ExperimentResult {
    pub fn trace(&self) -> Vec<RoundTrace> {
        self.reports.iter().filter_map(|r| r.trace.clone()).collect()
    }

    /// Per-domain and average Dice of the last evaluated round.
    pub fn final_dice(&self) -> Option<(Vec<f64>, f64)> {
        self.reports
            .iter()
            .rev()
            .find_map(|r| Some((r.domain_dice.clone()?, r.avg_dice?)))
    }
}

/// Applies `f` to every client, on `pool` when given, collecting results in
/// client order either way.
fn map_clients<T, F>(pool: Option<&ThreadPool>, clients: &[ClientState], f: F) -> Result<Vec<T>, FederationError>
where
    T: Send,
    F: Fn(&ClientState) -> Result<T, FederationError> + Sync,
{
    match pool {
        Some(pool) => pool.install(|| clients.par_iter().map(&f).collect()),
        None => clients.iter().map(f).collect(),
    }
}

fn weighted_sum(weights: &AggregationWeights, values: &[f64]) -> f64 {
    weights.as_slice().iter().zip(values).map(|(w, v)| w * v).sum()
}

/// One communication round. Replaces `server` with the next broadcast.
#[allow(clippy::too_many_arguments)]
pub fn run_round(
    round: usize,
    clients: &[ClientState],
    model: &Model,
    server: &mut ServerState,
    config: &FederationConfig,
    test_sets: &[&[Sample]],
    pool: Option<&ThreadPool>,
    history: &[RoundTrace],
) -> Result<RoundReport, FederationError> {
    let outcomes: Vec<LocalOutcome> = map_clients(pool, clients, |c| {
        local_train(c, model, &server.params, &server.prototypes, config, round)
    })?;

    let uploads: Vec<PrototypeUpload> = outcomes
        .iter()
        .zip(clients)
        .flat_map(|(o, c)| {
            o.prototypes
                .iter()
                .map(move |p| PrototypeUpload::from_prototype(c.client_id, round, p))
        })
        .collect();
    let counts: Vec<usize> = clients.iter().map(ClientState::sample_count).collect();
    let weights = AggregationWeights::from_counts(&counts)?;
    let local_params: Vec<ParamStore> = outcomes.iter().map(|o| o.params.clone()).collect();
    let next = ServerState {
        params: fedavg_aggregate(&local_params, &weights)?,
        prototypes: GlobalPrototypeSet::from_uploads(&uploads, config.metric),
    };

    let (trace, descent_ok) = if config.monitor {
        let monitors: Vec<_> = outcomes
            .iter()
            .map(|o| o.monitor.clone().expect("monitor enabled"))
            .collect();
        let ends = map_clients(pool, clients, |c| {
            local_objective(model, &next.params, c.samples(), &next.prototypes, config, false)
                .map(|(v, _)| v)
                .map_err(|source| FederationError::Round {
                    round,
                    stage: "objective evaluation",
                    source,
                })
        })?;
        let starts: Vec<f64> = monitors.iter().map(|m| m.objective_start).collect();
        let sums: Vec<f64> = monitors.iter().map(|m| m.grad_norm_sum).collect();
        let record = RoundTrace {
            round,
            objective_start: weighted_sum(&weights, &starts),
            objective_end: weighted_sum(&weights, &ends),
            grad_norm_sum: weighted_sum(&weights, &sums),
            smoothness: monitors.iter().filter_map(|m| m.smoothness).reduce(f64::max),
            variance: monitors.iter().map(|m| m.variance).fold(0.0, f64::max),
            prototype_norm: uploads
                .iter()
                .map(|u| u.values.iter().map(|x| x * x).sum::<f64>().sqrt())
                .fold(0.0, f64::max),
            local_steps: monitors.iter().map(|m| m.steps).max().unwrap_or(0),
        };
        let mut so_far = history.to_vec();
        so_far.push(record.clone());
        let weights_cfg = config.loss_weights();
        let ok = estimate_theory_params(&so_far, weights_cfg.tau, weights_cfg.lambda_c, config.learning_rate, 1.0)
            .ok()
            .map(|t| round_satisfies_bound(&record, &t));
        (Some(record), ok)
    } else {
        (None, None)
    };

    let evaluate_now = (round + 1) % config.eval_every == 0 || round + 1 == config.rounds;
    let (domain_dice, avg_dice) = if evaluate_now {
        let d = evaluate(model, &next.params, test_sets, config.checked).map_err(|source| FederationError::Round {
            round,
            stage: "test evaluation",
            source,
        })?;
        let avg = d.iter().sum::<f64>() / d.len().max(1) as f64;
        (Some(d), Some(avg))
    } else {
        (None, None)
    };

    *server = next;
    Ok(RoundReport {
        round,
        clients: outcomes.into_iter().map(|o| o.report).collect(),
        uploads_total: uploads.len(),
        domain_dice,
        avg_dice,
        trace,
        descent_ok,
    })
}

/// Generates the data from `spec` (seeded by the run seed) and runs the
/// configured number of rounds.
pub fn run_experiment(
    config: &FederationConfig,
    spec: &DataSpec,
    sink: Option<MetricsSink>,
) -> Result<ExperimentResult, FederationError> {
    let data = make_federation_data(spec, config.seed).map_err(FederationError::Config)?;
    run_on_data(config, &data, spec.augment, sink)
}

/// Runs the experiment on already generated data: one client per domain.
pub fn run_on_data(
    config: &FederationConfig,
    data: &FederationData,
    augment: bool,
    mut sink: Option<MetricsSink>,
) -> Result<ExperimentResult, FederationError> {
    config.validate()?;
    let clients = data
        .domains
        .iter()
        .map(|d| ClientState::new(d.domain_id, d.train.clone(), augment))
        .collect::<Result<Vec<_>, _>>()?;
    let test_sets: Vec<&[Sample]> = data.domains.iter().map(|d| d.test.as_slice()).collect();
    let model = Model::new(config, 2)?;
    let mut server = ServerState {
        params: model.init(config.seed)?,
        prototypes: GlobalPrototypeSet::default(),
    };
    let pool = if config.parallel > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(config.parallel)
                .build()
                .map_err(|e| FederationError::Config(format!("thread pool: {e}")))?,
        )
    } else {
        None
    };

    let mut reports = Vec::with_capacity(config.rounds);
    let mut history = Vec::new();
    for round in 0..config.rounds {
        let report = run_round(
            round,
            &clients,
            &model,
            &mut server,
            config,
            &test_sets,
            pool.as_ref(),
            &history,
        )?;
        if let Some(t) = &report.trace {
            history.push(t.clone());
        }
        if let Some(sink) = sink.as_mut() {
            sink.record(&report)?;
        }
        reports.push(report);
    }
    if let Some(sink) = sink {
        let dir = sink.dir().to_path_buf();
        sink.finish(&server.params)?;
        let json = serde_json::to_string_pretty(&server.prototypes).map_err(std::io::Error::other)?;
        std::fs::write(dir.join("prototypes.json"), json)?;
    }
    Ok(ExperimentResult {
        reports,
        final_params: server.params,
        final_prototypes: server.prototypes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::read_checkpoint;
    use crate::federation::Method;

    fn tiny_spec() -> DataSpec {
        DataSpec {
            image_size: 16,
            train_per_domain: 4,
            test_per_domain: 2,
            ..DataSpec::default()
        }
    }

    fn tiny_config() -> FederationConfig {
        FederationConfig {
            rounds: 3,
            batch_size: 2,
            eval_every: 2,
            ..FederationConfig::default()
        }
    }

    #[test]
    fn rounds_report_uploads_and_evaluations() {
        let result = run_experiment(&tiny_config(), &tiny_spec(), None).unwrap();
        assert_eq!(result.reports.len(), 3);
        for r in &result.reports {
            assert_eq!(r.uploads_total, 16);
            assert!(r.clients.iter().all(|c| c.uploads == 4));
        }
        assert!(result.reports[0].domain_dice.is_none());
        assert!(result.reports[1].domain_dice.is_some());
        assert!(result.reports[2].domain_dice.is_some());
        assert!(result.reports[0].clients[0].contra.is_none());
        assert!(result.reports[1].clients[0].contra.is_some());
        let (domains, avg) = result.final_dice().unwrap();
        assert_eq!(domains.len(), 4);
        assert!((0.0..=1.0).contains(&avg));
    }

    #[test]
    fn plain_averaging_uploads_nothing() {
        let cfg = FederationConfig {
            method: Method::Fedavg,
            ..tiny_config()
        };
        let result = run_experiment(&cfg, &tiny_spec(), None).unwrap();
        assert!(result.reports.iter().all(|r| r.uploads_total == 0));
        assert!(result.final_prototypes.is_empty());
    }

    #[test]
    fn parallel_matches_serial() {
        let serial = run_experiment(&tiny_config(), &tiny_spec(), None).unwrap();
        let cfg = FederationConfig {
            parallel: 3,
            ..tiny_config()
        };
        let parallel = run_experiment(&cfg, &tiny_spec(), None).unwrap();
        assert!(serial.final_params.values_bit_identical(&parallel.final_params));
        assert_eq!(serial.reports, parallel.reports);
    }

    #[test]
    fn sink_writes_metrics_and_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let sink = MetricsSink::create(dir.path(), 4).unwrap();
        let result = run_experiment(&tiny_config(), &tiny_spec(), Some(sink)).unwrap();
        let lines = std::fs::read_to_string(dir.path().join("rounds.jsonl")).unwrap();
        let parsed: Vec<RoundReport> = lines.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(parsed, result.reports);
        let csv = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        let rows: Vec<&str> = csv.lines().collect();
        assert_eq!(rows[0], "round,dice_d0,dice_d1,dice_d2,dice_d3,avg_dice");
        assert_eq!(rows.len(), 3);
        let ckpt = read_checkpoint(std::fs::File::open(dir.path().join("final.fbcs")).unwrap()).unwrap();
        assert!(ckpt.values_bit_identical(&result.final_params));
        assert!(dir.path().join("prototypes.json").exists());
    }

    #[test]
    fn monitor_traces_every_round() {
        let cfg = FederationConfig {
            monitor: true,
            ..tiny_config()
        };
        let result = run_experiment(&cfg, &tiny_spec(), None).unwrap();
        let trace = result.trace();
        assert_eq!(trace.len(), 3);
        // The end of one round is the start of the next: same model, same prototypes.
        for pair in trace.windows(2) {
            assert!((pair[0].objective_end - pair[1].objective_start).abs() < 1e-12);
        }
        assert!(result.reports.iter().all(|r| r.descent_ok.is_some()));
    }
}
