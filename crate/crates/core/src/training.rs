//! Adam and the two-phase pipeline: train the trunk alone, then warm-start
//! the branchy network from it and train every exit jointly.

use std::fmt::Write as _;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{joint_loss_and_grads, ExitWeights, Network};
use crate::layers::{argmax, one_hot, Mode};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            alpha: 0.001,
            beta1: 0.99,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha >= 0.0
            && self.alpha.is_finite()
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(format!("invalid Adam hyperparameters {self:?}")))
        }
    }
}

/// First/second moment estimates for every parameter, plus the step count.
#[derive(Debug, Clone)]
pub struct AdamState {
    config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParameterStore) -> Result<Self> {
        config.validate()?;
        let zeros = || params.iter().map(|p| Tensor::zeros_like(&p.value)).collect();
        Ok(AdamState {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// One bias-corrected Adam update from the accumulated gradients, which
    /// are zeroed afterwards.
    pub fn step(&mut self, params: &mut ParameterStore) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::State(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                params.len()
            )));
        }
        self.t += 1;
        let AdamConfig {
            alpha,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.t as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grads = p.grad.data();
            for (((theta, m), v), &g) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(grads)
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *theta -= alpha * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        params.round_to_storage();
        params.zero_grads();
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Baseline,
    Branchy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Per-exit loss weights; `None` means 1.0 on the first exit and 0.3 on the last.
    pub exit_weights: Option<Vec<f64>>,
    pub seed: u64,
    pub phase: Phase,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 15,
            batch_size: 64,
            adam: AdamConfig::default(),
            exit_weights: None,
            seed: 42,
            phase: Phase::Branchy,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Validation("batch size must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn weights_for(&self, net: &Network) -> Result<ExitWeights> {
        match &self.exit_weights {
            None => Ok(ExitWeights::default_for(net.num_exits())),
            Some(w) if w.len() == net.num_exits() => ExitWeights::new(w.clone()),
            Some(w) => Err(Error::Validation(format!(
                "{} exit weights configured for a network with {} exits",
                w.len(),
                net.num_exits()
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
        }
    }
}

/// Loss and accuracy of one exit over one split after one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: Split,
    pub exit: usize,
    pub loss: f64,
    pub accuracy: f64,
}

pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,split,exit,loss,accuracy\n");
    for m in metrics {
        writeln!(
            out,
            "{},{},{},{:.9},{:.6}",
            m.epoch,
            m.split.as_str(),
            m.exit,
            m.loss,
            m.accuracy
        )
        .expect("writing to a String");
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParameterStore,
    pub metrics: Vec<EpochMetrics>,
}

/// Per-exit `(loss, accuracy)` over a whole dataset, evaluated in batches.
pub fn evaluate_exits(
    net: &Network,
    params: &ParameterStore,
    data: &Dataset,
    batch_size: usize,
) -> Result<Vec<(f64, f64)>> {
    if data.is_empty() {
        return Err(Error::Validation("cannot evaluate on an empty dataset".into()));
    }
    let exits = net.num_exits();
    let mut loss = vec![0.0; exits];
    let mut correct = vec![0usize; exits];
    let indices: Vec<usize> = (0..data.len()).collect();
    let unit = ExitWeights::new(vec![1.0; exits])?;
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, labels) = data.batch(chunk)?;
        let (logits, _) = net.forward_all_exits(params, &x, Mode::Infer)?;
        let y = one_hot(&labels, net.num_classes())?;
        let (jl, _) = joint_loss_and_grads(&logits, &y, &unit)?;
        for (e, z) in logits.iter().enumerate() {
            loss[e] += jl.per_exit[e] * chunk.len() as f64;
            correct[e] += z
                .rows()
                .zip(&labels)
                .filter(|(row, &l)| argmax(row) == l)
                .count();
        }
    }
    let n = data.len() as f64;
    Ok(loss
        .into_iter()
        .zip(correct)
        .map(|(l, c)| (l / n, c as f64 / n))
        .collect())
}

fn check_compatible(net: &Network, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Validation("training dataset is empty".into()));
    }
    if data.sample_dims() != net.spec().input.as_slice() || data.num_classes() != net.num_classes() {
        return Err(Error::Validation(format!(
            "dataset samples {:?} with {} classes do not fit network input {:?} with {} classes",
            data.sample_dims(),
            data.num_classes(),
            net.spec().input,
            net.num_classes()
        )));
    }
    Ok(())
}

/// Optimises the joint weighted loss of `net` starting from `params`.
///
/// The sample order is reshuffled every epoch from a generator seeded by
/// `config.seed`; the last partial batch is kept. When `validation` is
/// given its per-exit metrics are recorded before training (epoch 0) and
/// after every epoch.
pub fn train(
    net: &Network,
    mut params: ParameterStore,
    data: &Dataset,
    validation: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    check_compatible(net, data)?;
    if let Some(v) = validation {
        check_compatible(net, v)?;
    }
    net.check_params(&params)?;
    let weights = config.weights_for(net)?;
    let mut adam = AdamState::new(config.adam, &params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let exits = net.num_exits();
    let mut metrics = Vec::new();
    let record_validation = |epoch: usize, params: &ParameterStore, metrics: &mut Vec<EpochMetrics>| -> Result<()> {
        if let Some(v) = validation {
            for (e, (loss, accuracy)) in evaluate_exits(net, params, v, 256)?.into_iter().enumerate() {
                metrics.push(EpochMetrics {
                    epoch,
                    split: Split::Validation,
                    exit: e + 1,
                    loss,
                    accuracy,
                });
            }
        }
        Ok(())
    };
    record_validation(0, &params, &mut metrics)?;

    params.zero_grads();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss = vec![0.0; exits];
        let mut correct = vec![0usize; exits];
        for chunk in order.chunks(config.batch_size) {
            let (x, labels) = data.batch(chunk)?;
            let y = one_hot(&labels, net.num_classes())?;
            let (logits, cache) = net.forward_all_exits(&params, &x, Mode::Train)?;
            for (e, z) in logits.iter().enumerate() {
                correct[e] += z
                    .rows()
                    .zip(&labels)
                    .filter(|(row, &l)| argmax(row) == l)
                    .count();
            }
            let jl = net.backward_joint(&mut params, &cache, &y, &weights)?;
            for (acc, l) in loss.iter_mut().zip(&jl.per_exit) {
                *acc += l * chunk.len() as f64;
            }
            adam.step(&mut params)?;
        }
        let n = data.len() as f64;
        for e in 0..exits {
            metrics.push(EpochMetrics {
                epoch,
                split: Split::Train,
                exit: e + 1,
                loss: loss[e] / n,
                accuracy: correct[e] as f64 / n,
            });
        }
        record_validation(epoch, &params, &mut metrics)?;
        let summary: Vec<String> = metrics
            .iter()
            .filter(|m| m.epoch == epoch)
            .map(|m| format!("{} exit {}: loss {:.5} acc {:.4}", m.split.as_str(), m.exit, m.loss, m.accuracy))
            .collect();
        info!("epoch {epoch}/{}: {}", config.epochs, summary.join("; "));
    }
    Ok(TrainOutcome { params, metrics })
}

/// Phase one: trains a branch-free network from a fresh seeded initialisation.
/// Configured exit weights are ignored; the single exit has weight 1.
pub fn train_baseline(
    net: &Network,
    data: &Dataset,
    validation: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    if net.num_exits() != 1 {
        return Err(Error::Validation(format!(
            "baseline training needs a network without branches, got {} exits",
            net.num_exits()
        )));
    }
    check_compatible(net, data)?;
    let config = TrainConfig {
        exit_weights: None,
        ..config.clone()
    };
    let params = net.init_params(config.seed)?;
    train(net, params, data, validation, &config)
}

/// Copies every trunk parameter of `baseline` bitwise into a fresh store
/// for `branchy`, whose branch parameters are initialised from `seed`.
pub fn init_branchy_from_baseline(
    branchy: &Network,
    baseline: &Network,
    baseline_params: &ParameterStore,
    seed: u64,
) -> Result<ParameterStore> {
    let (a, b) = (branchy.spec(), baseline.spec());
    let mut problems = Vec::new();
    if a.input != b.input {
        problems.push(format!("input {:?} vs {:?}", a.input, b.input));
    }
    if a.num_classes != b.num_classes {
        problems.push(format!("classes {} vs {}", a.num_classes, b.num_classes));
    }
    let longest = a.trunk.len().max(b.trunk.len());
    for i in 0..longest {
        match (a.trunk.get(i), b.trunk.get(i)) {
            (Some(x), Some(y)) if x == y => {}
            (x, y) => problems.push(format!(
                "trunk layer {i}: `{}` vs baseline `{}`",
                x.map_or("-".to_string(), |s| s.to_string()),
                y.map_or("-".to_string(), |s| s.to_string())
            )),
        }
    }
    if !problems.is_empty() {
        return Err(Error::Validation(format!(
            "branchy trunk does not match the baseline: {}",
            problems.join("; ")
        )));
    }
    baseline.check_params(baseline_params)?;
    let mut params = branchy.init_params(seed)?;
    params.set_precision(baseline_params.precision());
    for p in baseline_params.iter() {
        let id = params
            .id(&p.name)
            .ok_or_else(|| Error::Validation(format!("branchy network lacks {:?}", p.name)))?;
        *params.value_mut(id) = p.value.clone();
    }
    Ok(params)
}

/// Phase two: joint training of every exit from warm-started parameters.
pub fn train_branchy(
    net: &Network,
    warm_start: ParameterStore,
    data: &Dataset,
    validation: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train(net, warm_start, data, validation, config)
}
