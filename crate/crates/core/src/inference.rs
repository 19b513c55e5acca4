//! Entropy-gated fast inference with trunk-activation reuse and
//! multiply-accumulate accounting.
//!
//! Samples are processed one at a time. Exits are visited in order; the
//! trunk is advanced only as far as the next exit needs, so a sample that
//! continues past exit `n` never recomputes the shared prefix.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::Network;
use crate::layers::{argmax, softmax, Mode, PROB_FLOOR};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

/// Shannon entropy in nats, `-Σ p ln p`, with probabilities floored at
/// `1e-12` inside the logarithm.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .map(|&p| p * p.clamp(PROB_FLOOR, 1.0).ln())
        .sum::<f64>()
}

/// Entropy thresholds for exits `1..N-1`; the last exit is unconditional.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdVector(Vec<f64>);

impl ThresholdVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(bad) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Validation(format!(
                "thresholds must be finite and non-negative, got {bad}"
            )));
        }
        Ok(ThresholdVector(values))
    }

    /// All-zero thresholds: no sample can leave before the last exit.
    pub fn closed(num_exits: usize) -> Self {
        ThresholdVector(vec![0.0; num_exits.saturating_sub(1)])
    }

    /// Thresholds above any attainable entropy: every sample leaves at exit 1.
    pub fn open(num_exits: usize, num_classes: usize) -> Self {
        ThresholdVector(vec![(num_classes as f64).ln() + 1.0; num_exits.saturating_sub(1)])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn check_for(&self, net: &Network) -> Result<()> {
        if self.0.len() + 1 != net.num_exits() {
            return Err(Error::Validation(format!(
                "{} thresholds given for a network with {} exits (need {})",
                self.0.len(),
                net.num_exits(),
                net.num_exits() - 1
            )));
        }
        Ok(())
    }
}

impl std::fmt::Display for ThresholdVector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|t| format!("{t}")).collect();
        write!(f, "{}", parts.join(","))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExitDecision {
    pub predicted_class: usize,
    /// 1-based exit the sample left at.
    pub exit_index: usize,
    /// Entropy at the exit taken.
    pub entropy: f64,
    /// Entropy at every exit evaluated, in order.
    pub entropies: Vec<f64>,
    /// Prediction at every exit evaluated, in order.
    pub predictions: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostReport {
    pub macs_evaluated: u64,
    pub wall_time: Duration,
}

/// Runs one sample (`[1, ...]`) through the network, leaving at the first
/// exit whose entropy is strictly below its threshold.
pub fn fast_inference(
    net: &Network,
    params: &ParameterStore,
    x: &Tensor,
    thresholds: &ThresholdVector,
) -> Result<(ExitDecision, CostReport)> {
    thresholds.check_for(net)?;
    if x.dims().first() != Some(&1) {
        return Err(Error::Dimension(format!(
            "fast inference takes one sample at a time, got {}",
            x.shape()
        )));
    }
    let start = Instant::now();
    let exits = net.num_exits();
    let trunk = net.trunk();
    let mut act = x.clone();
    let mut next_layer = 0;
    let mut macs = 0u64;
    let mut entropies = Vec::with_capacity(exits);
    let mut predictions = Vec::with_capacity(exits);
    for exit in 1..=exits {
        let attach = net.attach_point(exit);
        while next_layer <= attach {
            let layer = &trunk[next_layer];
            act = layer.forward(params, &act, Mode::Infer)?.0;
            macs += layer.macs();
            next_layer += 1;
        }
        let logits = if exit < exits {
            let mut z = act.clone();
            for layer in net.branch(exit) {
                z = layer.forward(params, &z, Mode::Infer)?.0;
                macs += layer.macs();
            }
            z
        } else {
            act.clone()
        };
        let probs = softmax(&logits);
        let e = entropy(probs.data());
        entropies.push(e);
        predictions.push(argmax(probs.data()));
        if exit == exits || e < thresholds.as_slice()[exit - 1] {
            let decision = ExitDecision {
                predicted_class: *predictions.last().expect("pushed above"),
                exit_index: exit,
                entropy: e,
                entropies,
                predictions,
            };
            let cost = CostReport {
                macs_evaluated: macs,
                wall_time: start.elapsed(),
            };
            return Ok((decision, cost));
        }
    }
    unreachable!("the last exit always returns")
}

/// One row of the optional per-sample trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub sample_id: usize,
    pub exit_index: usize,
    pub entropy: f64,
    pub predicted: usize,
    pub truth: usize,
    pub macs: u64,
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("sample_id,exit_index,entropy,predicted,true,macs\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{:.9e},{},{},{}",
            r.sample_id, r.exit_index, r.entropy, r.predicted, r.truth, r.macs
        )
        .expect("writing to a String");
    }
    out
}

/// Aggregate fast-inference results over a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub thresholds: ThresholdVector,
    pub samples: usize,
    pub accuracy: f64,
    pub exit_fractions: Vec<f64>,
    /// Mean multiply-accumulates per sample.
    pub expected_macs: f64,
    pub baseline_macs: u64,
    /// `baseline_macs / expected_macs`.
    pub speedup: f64,
    /// Mean batch-size-1 wall time per sample; `None` when computed from a profile.
    pub mean_latency: Option<Duration>,
}

impl EvalReport {
    /// A one-line summary in the shape of the usual results table.
    pub fn table_row(&self) -> String {
        let fractions: Vec<String> = self
            .exit_fractions
            .iter()
            .map(|f| format!("{:.2}", 100.0 * f))
            .collect();
        let latency = self
            .mean_latency
            .map(|d| format!("{:.4} ms", d.as_secs_f64() * 1e3))
            .unwrap_or_else(|| "-".into());
        format!(
            "acc {:.2}% | avg MACs {:.0} | speedup {:.2}x | T [{}] | exit % [{}] | latency {}",
            100.0 * self.accuracy,
            self.expected_macs,
            self.speedup,
            self.thresholds,
            fractions.join(", "),
            latency
        )
    }
}

struct Tally {
    correct: usize,
    exits: Vec<usize>,
    macs: u64,
}

impl Tally {
    fn new(num_exits: usize) -> Self {
        Tally {
            correct: 0,
            exits: vec![0; num_exits],
            macs: 0,
        }
    }

    fn add(&mut self, exit: usize, predicted: usize, truth: usize, macs: u64) {
        self.exits[exit - 1] += 1;
        self.correct += usize::from(predicted == truth);
        self.macs += macs;
    }

    fn finish(
        self,
        net: &Network,
        thresholds: &ThresholdVector,
        n: usize,
        mean_latency: Option<Duration>,
    ) -> EvalReport {
        let nf = n as f64;
        let expected_macs = self.macs as f64 / nf;
        let baseline_macs = net.baseline_macs();
        EvalReport {
            thresholds: thresholds.clone(),
            samples: n,
            accuracy: self.correct as f64 / nf,
            exit_fractions: self.exits.iter().map(|&c| c as f64 / nf).collect(),
            expected_macs,
            baseline_macs,
            speedup: baseline_macs as f64 / expected_macs,
            mean_latency,
        }
    }
}

/// Runs [`fast_inference`] on every sample and aggregates the results,
/// optionally keeping a per-sample trace.
pub fn evaluate(
    net: &Network,
    params: &ParameterStore,
    data: &Dataset,
    thresholds: &ThresholdVector,
    mut trace: Option<&mut Vec<TraceRow>>,
) -> Result<EvalReport> {
    thresholds.check_for(net)?;
    if data.is_empty() {
        return Err(Error::Validation("cannot evaluate on an empty dataset".into()));
    }
    let mut tally = Tally::new(net.num_exits());
    let mut elapsed = Duration::ZERO;
    for i in 0..data.len() {
        let ex = data.example(i)?;
        let (decision, cost) = fast_inference(net, params, &ex.image, thresholds)?;
        elapsed += cost.wall_time;
        tally.add(decision.exit_index, decision.predicted_class, ex.label, cost.macs_evaluated);
        if let Some(rows) = trace.as_deref_mut() {
            rows.push(TraceRow {
                sample_id: i,
                exit_index: decision.exit_index,
                entropy: decision.entropy,
                predicted: decision.predicted_class,
                truth: ex.label,
                macs: cost.macs_evaluated,
            });
        }
    }
    let mean = elapsed / data.len() as u32;
    Ok(tally.finish(net, thresholds, data.len(), Some(mean)))
}

/// Mean batch-size-1 wall time of the plain trunk forward (the baseline network).
pub fn baseline_latency(net: &Network, params: &ParameterStore, data: &Dataset) -> Result<Duration> {
    if data.is_empty() {
        return Err(Error::Validation("cannot time an empty dataset".into()));
    }
    let mut elapsed = Duration::ZERO;
    for i in 0..data.len() {
        let ex = data.example(i)?;
        let start = Instant::now();
        let logits = net.forward_trunk(params, &ex.image)?;
        std::hint::black_box(argmax(softmax(&logits).data()));
        elapsed += start.elapsed();
    }
    Ok(elapsed / data.len() as u32)
}

/// Entropy and prediction of every exit for every sample, recorded once
/// with the gates closed. Any threshold vector can then be scored without
/// re-running the network, with exactly the decisions [`fast_inference`]
/// would make.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitProfile {
    entropies: Vec<Vec<f64>>,
    predictions: Vec<Vec<usize>>,
    labels: Vec<usize>,
    cumulative_macs: Vec<u64>,
    baseline_macs: u64,
    num_classes: usize,
}

impl ExitProfile {
    pub fn record(net: &Network, params: &ParameterStore, data: &Dataset) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Validation("cannot profile an empty dataset".into()));
        }
        let closed = ThresholdVector::closed(net.num_exits());
        let mut entropies = Vec::with_capacity(data.len());
        let mut predictions = Vec::with_capacity(data.len());
        for i in 0..data.len() {
            let ex = data.example(i)?;
            let (d, _) = fast_inference(net, params, &ex.image, &closed)?;
            entropies.push(d.entropies);
            predictions.push(d.predictions);
        }
        Ok(ExitProfile {
            entropies,
            predictions,
            labels: data.labels().to_vec(),
            cumulative_macs: (1..=net.num_exits()).map(|e| net.cumulative_macs(e)).collect(),
            baseline_macs: net.baseline_macs(),
            num_classes: net.num_classes(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_exits(&self) -> usize {
        self.cumulative_macs.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn baseline_macs(&self) -> u64 {
        self.baseline_macs
    }

    /// Entropies at `exit` for every sample.
    pub fn exit_entropies(&self, exit: usize) -> impl Iterator<Item = f64> + '_ {
        self.entropies.iter().map(move |e| e[exit - 1])
    }

    /// Accuracy when every sample is classified by `exit` alone.
    pub fn exit_accuracy(&self, exit: usize) -> f64 {
        let correct = self
            .predictions
            .iter()
            .zip(&self.labels)
            .filter(|(p, &l)| p[exit - 1] == l)
            .count();
        correct as f64 / self.len() as f64
    }

    /// Exit taken by `sample` under `thresholds`.
    pub fn exit_for(&self, sample: usize, thresholds: &ThresholdVector) -> usize {
        let last = self.num_exits();
        (1..last)
            .find(|&e| self.entropies[sample][e - 1] < thresholds.as_slice()[e - 1])
            .unwrap_or(last)
    }

    pub fn report(&self, thresholds: &ThresholdVector) -> Result<EvalReport> {
        if thresholds.len() + 1 != self.num_exits() {
            return Err(Error::Validation(format!(
                "{} thresholds for a profile with {} exits",
                thresholds.len(),
                self.num_exits()
            )));
        }
        let mut correct = 0;
        let mut exits = vec![0usize; self.num_exits()];
        let mut macs = 0u64;
        for i in 0..self.len() {
            let e = self.exit_for(i, thresholds);
            exits[e - 1] += 1;
            correct += usize::from(self.predictions[i][e - 1] == self.labels[i]);
            macs += self.cumulative_macs[e - 1];
        }
        let n = self.len() as f64;
        let expected_macs = macs as f64 / n;
        Ok(EvalReport {
            thresholds: thresholds.clone(),
            samples: self.len(),
            accuracy: correct as f64 / n,
            exit_fractions: exits.iter().map(|&c| c as f64 / n).collect(),
            expected_macs,
            baseline_macs: self.baseline_macs,
            speedup: self.baseline_macs as f64 / expected_macs,
            mean_latency: None,
        })
    }
}
