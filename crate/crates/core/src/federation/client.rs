//! One client's share of a round: minibatch training on the total loss,
//! prototype construction over the final epoch, and (optionally) the
//! full-data gradients the convergence monitor needs.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::optim::Optimizer;
use super::{FederationConfig, FederationError, Model};
use crate::autodiff::{ParamStore, Tape, Var};
use crate::losses::{dice_loss, prototype_terms, total_loss, LossWeights};
use crate::prototypes::{embed_sample, Prototype, PrototypeAccumulator};
use crate::rng::stream;
use crate::segnet::TapBundle;
use crate::server::GlobalPrototypeSet;
use crate::synthdata::{augment, Sample};
use crate::tensor::TensorError;

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const AUGMENT_STREAM: u64 = 0x4155_474d;

/// A client's private data. Clients are stateless between rounds: every
/// round starts from the broadcast global parameters.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: usize,
    samples: Vec<Sample>,
    augment: bool,
}

impl ClientState {
    pub fn new(client_id: usize, samples: Vec<Sample>, augment: bool) -> Result<Self, FederationError> {
        if samples.is_empty() {
            return Err(FederationError::Config(format!("client {client_id} has no training samples")));
        }
        Ok(ClientState {
            client_id,
            samples,
            augment,
        })
    }

    pub fn sample_count(&self) -> usize {
        self.samples.len()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }
}

/// Per-client training statistics of one round, averaged over every sample
/// pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientReport {
    pub client_id: usize,
    pub samples: usize,
    pub dice: f64,
    /// `None` when no sample had a prototype term (e.g. round 0).
    pub contra: Option<f64>,
    pub consis: Option<f64>,
    pub total: f64,
    /// Mean squared norm of the minibatch gradients.
    pub grad_norm_sq: f64,
    pub uploads: usize,
}

/// Full-data gradient statistics along one client's local trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientMonitor {
    /// Local objective at the broadcast parameters.
    pub objective_start: f64,
    /// `Σ_e ‖∇F(Θ_e)‖²` over the local steps.
    pub grad_norm_sum: f64,
    /// Largest `‖∇F(Θ_e) − ∇F(Θ_{e+1})‖ / ‖Θ_e − Θ_{e+1}‖`; `None` with a
    /// single local step.
    pub smoothness: Option<f64>,
    /// Mean squared deviation of minibatch gradients from their epoch mean.
    pub variance: f64,
    pub steps: usize,
}

#[derive(Debug, Clone)]
pub struct LocalOutcome {
    pub params: ParamStore,
    pub prototypes: Vec<Prototype>,
    pub report: ClientReport,
    pub monitor: Option<ClientMonitor>,
}

/// Visiting order of the client's samples in one epoch.
pub fn batch_order(seed: u64, client_id: usize, round: usize, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, &[SHUFFLE_STREAM, client_id as u64, round as u64, epoch as u64]));
    order
}

struct SamplePass {
    loss: Var,
    taps: TapBundle,
    dice: f64,
    contra: Option<f64>,
    consis: Option<f64>,
}

fn sample_pass(
    tape: &mut Tape,
    model: &Model,
    store: &ParamStore,
    sample: &Sample,
    global: &GlobalPrototypeSet,
    weights: LossWeights,
) -> Result<SamplePass, TensorError> {
    let image = tape.constant(sample.image.clone())?;
    let (logits, taps) = model.net.forward(tape, store, image)?;
    let dice = dice_loss(tape, logits, &sample.labels)?;
    let (mut contra, mut consis) = (None, None);
    if weights.lambda_c > 0.0 && !global.is_empty() {
        if let Some(layout) = &model.layout {
            let anchors = embed_sample(tape, store, layout, &taps, &sample.labels)?;
            let terms = prototype_terms(tape, &anchors, global, weights.tau)?;
            contra = terms.contra;
            consis = terms.consis;
        }
    }
    let loss = total_loss(tape, dice, contra, consis, weights.lambda_c)?;
    let scalar = |v: Var| tape.value(v).data()[0];
    let pass = SamplePass {
        loss,
        dice: scalar(dice),
        contra: contra.map(scalar),
        consis: consis.map(scalar),
        taps,
    };
    if tape.checked() && !scalar(loss).is_finite() {
        return Err(TensorError::NonFinite { op: "total_loss" });
    }
    Ok(pass)
}

/// Mean total loss over `samples` and, when asked, its gradient (flattened
/// in parameter-identifier order).
pub fn local_objective(
    model: &Model,
    params: &ParamStore,
    samples: &[Sample],
    global: &GlobalPrototypeSet,
    config: &FederationConfig,
    with_grad: bool,
) -> Result<(f64, Option<Vec<f64>>), TensorError> {
    let weights = config.loss_weights();
    let mut store = params.clone();
    store.zero_grad();
    let inv = 1.0 / samples.len() as f64;
    let mut value = 0.0;
    for sample in samples {
        let mut tape = Tape::new(config.checked);
        let pass = sample_pass(&mut tape, model, &store, sample, global, weights)?;
        value += tape.value(pass.loss).data()[0] * inv;
        if with_grad {
            let scaled = tape.scale(pass.loss, inv)?;
            tape.backward(scaled, &mut store)?;
        }
    }
    Ok((value, with_grad.then(|| store.flat_grads())))
}

fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

#[derive(Default)]
struct Running {
    n: usize,
    dice: f64,
    total: f64,
    contra: (f64, usize),
    consis: (f64, usize),
}

impl Running {
    fn add(&mut self, pass: &SamplePass, total: f64) {
        self.n += 1;
        self.dice += pass.dice;
        self.total += total;
        if let Some(c) = pass.contra {
            self.contra.0 += c;
            self.contra.1 += 1;
        }
        if let Some(c) = pass.consis {
            self.consis.0 += c;
            self.consis.1 += 1;
        }
    }
}

fn mean_of((sum, n): (f64, usize)) -> Option<f64> {
    (n > 0).then(|| sum / n as f64)
}

/// `E` epochs of minibatch training from the broadcast parameters.
///
/// Each sample gets its own tape; the loss is scaled by the inverse batch
/// size so the accumulated gradient is the batch mean. Prototypes are
/// accumulated from the final epoch's forward passes and fused with the
/// final parameters.
pub fn local_train(
    client: &ClientState,
    model: &Model,
    global_params: &ParamStore,
    global_prototypes: &GlobalPrototypeSet,
    config: &FederationConfig,
    round: usize,
) -> Result<LocalOutcome, FederationError> {
    let weights = config.loss_weights();
    let n = client.sample_count();
    let mut store = global_params.clone();
    store.zero_grad();
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate, config.weight_decay);
    let mut accumulator = PrototypeAccumulator::new(model.net.class_count());
    let mut running = Running::default();
    let mut grad_norm_sq = 0.0;
    let mut steps = 0;

    let mut monitor = config.monitor.then(|| ClientMonitor {
        objective_start: 0.0,
        grad_norm_sum: 0.0,
        smoothness: None,
        variance: 0.0,
        steps: 0,
    });
    let mut previous: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut variance_sum = 0.0;

    let fail = |batch: usize, source: TensorError| FederationError::Training {
        round,
        client: client.client_id,
        batch,
        source,
    };

    for epoch in 0..config.local_epochs {
        let final_epoch = epoch + 1 == config.local_epochs;
        let order = batch_order(config.seed, client.client_id, round, epoch, n);
        let mut aug_rng = stream(
            config.seed,
            &[AUGMENT_STREAM, client.client_id as u64, round as u64, epoch as u64],
        );
        let mut epoch_grads: Vec<Vec<f64>> = Vec::new();
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            if let Some(m) = monitor.as_mut() {
                let (value, grad) =
                    local_objective(model, &store, &client.samples, global_prototypes, config, true)
                        .map_err(|e| fail(b, e))?;
                let grad = grad.expect("gradient requested");
                let theta = store.flat_values();
                if steps == 0 {
                    m.objective_start = value;
                }
                m.grad_norm_sum += sq_norm(&grad);
                if let Some((prev_theta, prev_grad)) = &previous {
                    let dtheta = sq_dist(&theta, prev_theta).sqrt();
                    if dtheta > 0.0 {
                        let ratio = sq_dist(&grad, prev_grad).sqrt() / dtheta;
                        m.smoothness = Some(m.smoothness.map_or(ratio, |s: f64| s.max(ratio)));
                    }
                }
                previous = Some((theta, grad));
            }

            store.zero_grad();
            let inv = 1.0 / batch.len() as f64;
            for &i in batch {
                let augmented;
                let sample = if client.augment {
                    augmented = augment(&client.samples[i], &mut aug_rng);
                    &augmented
                } else {
                    &client.samples[i]
                };
                let mut tape = Tape::new(config.checked);
                let pass = sample_pass(&mut tape, model, &store, sample, global_prototypes, weights)
                    .map_err(|e| fail(b, e))?;
                running.add(&pass, tape.value(pass.loss).data()[0]);
                if final_epoch {
                    if let Some(layout) = &model.layout {
                        accumulator
                            .add_sample(&tape, layout, &pass.taps, &sample.labels)
                            .map_err(|e| fail(b, e))?;
                    }
                }
                let scaled = tape.scale(pass.loss, inv).map_err(|e| fail(b, e))?;
                tape.backward(scaled, &mut store).map_err(|e| fail(b, e))?;
            }
            let grad = store.flat_grads();
            if config.checked && grad.iter().any(|g| !g.is_finite()) {
                return Err(fail(b, TensorError::NonFinite { op: "gradient" }));
            }
            grad_norm_sq += sq_norm(&grad);
            if monitor.is_some() {
                epoch_grads.push(grad);
            }
            optimizer.step(&mut store);
            steps += 1;
        }
        if !epoch_grads.is_empty() {
            let dim = epoch_grads[0].len();
            let mut mean = vec![0.0; dim];
            for g in &epoch_grads {
                for (m, x) in mean.iter_mut().zip(g) {
                    *m += x / epoch_grads.len() as f64;
                }
            }
            variance_sum += epoch_grads.iter().map(|g| sq_dist(g, &mean)).sum::<f64>() / epoch_grads.len() as f64;
        }
    }

    if let Some(m) = monitor.as_mut() {
        m.steps = steps;
        m.variance = variance_sum / config.local_epochs as f64;
    }
    let prototypes = match &model.layout {
        Some(layout) => accumulator.finish(&store, layout)?,
        None => Vec::new(),
    };
    store.zero_grad();
    let report = ClientReport {
        client_id: client.client_id,
        samples: n,
        dice: running.dice / running.n as f64,
        contra: mean_of(running.contra),
        consis: mean_of(running.consis),
        total: running.total / running.n as f64,
        grad_norm_sq: grad_norm_sq / steps as f64,
        uploads: prototypes.len(),
    };
    Ok(LocalOutcome {
        params: store,
        prototypes,
        report,
        monitor,
    })
}
