//! Threshold screening: score a grid of threshold vectors on held-out data
//! and pick the knee, the cheapest point whose accuracy stays within a
//! slack of the baseline network.

use std::cmp::Ordering;
use std::fmt::Write as _;

use log::warn;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::Network;
use crate::inference::{ExitProfile, ThresholdVector};
use crate::params::ParameterStore;

pub const DEFAULT_SLACK_PP: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub thresholds: ThresholdVector,
    pub accuracy: f64,
    pub expected_macs: f64,
    pub speedup: f64,
    pub exit_fractions: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KneeStatus {
    /// The point meets the accuracy bound.
    WithinSlack,
    /// Nothing met the bound; the most accurate point was returned instead.
    NoPointWithinSlack,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Knee {
    pub index: usize,
    pub status: KneeStatus,
    pub slack_pp: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub points: Vec<SweepPoint>,
    pub knee: Knee,
    pub baseline_accuracy: f64,
    pub baseline_macs: u64,
}

impl SweepReport {
    pub fn knee_point(&self) -> &SweepPoint {
        &self.points[self.knee.index]
    }

    pub fn to_csv(&self) -> String {
        let exits = self.points[0].exit_fractions.len();
        let mut header: Vec<String> = (1..exits).map(|i| format!("t_{i}")).collect();
        header.extend(["accuracy", "expected_macs", "speedup"].map(String::from));
        header.extend((1..=exits).map(|i| format!("exit_frac_{i}")));
        header.push("knee".into());
        let mut out = header.join(",");
        out.push('\n');
        for (i, p) in self.points.iter().enumerate() {
            let mut row: Vec<String> = p.thresholds.as_slice().iter().map(|t| format!("{t:.9e}")).collect();
            row.push(format!("{:.6}", p.accuracy));
            row.push(format!("{:.3}", p.expected_macs));
            row.push(format!("{:.6}", p.speedup));
            row.extend(p.exit_fractions.iter().map(|f| format!("{f:.6}")));
            row.push(if i == self.knee.index { "1" } else { "0" }.into());
            writeln!(out, "{}", row.join(",")).expect("writing to a String");
        }
        out
    }
}

/// Per coordinate: 0 plus 25 log-spaced values in `[1e-4, ln C]`.
pub fn default_grid(num_exits: usize, num_classes: usize) -> Vec<Vec<f64>> {
    let coordinate = log_grid(1e-4, (num_classes as f64).ln(), 25, true);
    vec![coordinate; num_exits.saturating_sub(1)]
}

/// `count` log-spaced values from `lo` to `hi` inclusive, optionally preceded by 0.
pub fn log_grid(lo: f64, hi: f64, count: usize, with_zero: bool) -> Vec<f64> {
    let mut out = Vec::with_capacity(count + 1);
    if with_zero {
        out.push(0.0);
    }
    let (a, b) = (lo.ln(), hi.ln());
    for i in 0..count {
        let frac = if count == 1 { 0.0 } else { i as f64 / (count - 1) as f64 };
        out.push((a + (b - a) * frac).exp());
    }
    out
}

fn cartesian(grid: &[Vec<f64>]) -> Vec<Vec<f64>> {
    grid.iter().fold(vec![Vec::new()], |acc, coord| {
        acc.iter()
            .flat_map(|prefix| {
                coord.iter().map(move |&v| {
                    let mut next = prefix.clone();
                    next.push(v);
                    next
                })
            })
            .collect()
    })
}

/// Scores every combination of grid values (last coordinate varies fastest).
pub fn sweep_profile(profile: &ExitProfile, grid: &[Vec<f64>], slack_pp: f64) -> Result<SweepReport> {
    if grid.len() + 1 != profile.num_exits() {
        return Err(Error::Validation(format!(
            "grid has {} coordinates, network needs {}",
            grid.len(),
            profile.num_exits() - 1
        )));
    }
    if let Some(i) = grid.iter().position(Vec::is_empty) {
        return Err(Error::Validation(format!("grid coordinate {} is empty", i + 1)));
    }
    let mut points = Vec::new();
    for combo in cartesian(grid) {
        let report = profile.report(&ThresholdVector::new(combo)?)?;
        points.push(SweepPoint {
            thresholds: report.thresholds,
            accuracy: report.accuracy,
            expected_macs: report.expected_macs,
            speedup: report.speedup,
            exit_fractions: report.exit_fractions,
        });
    }
    let baseline_accuracy = profile.exit_accuracy(profile.num_exits());
    let mut report = SweepReport {
        points,
        knee: Knee {
            index: 0,
            status: KneeStatus::WithinSlack,
            slack_pp,
        },
        baseline_accuracy,
        baseline_macs: profile.baseline_macs(),
    };
    report.knee = select_knee(&report, slack_pp)?;
    Ok(report)
}

/// Records an exit profile on `data` and sweeps `grid` over it.
pub fn sweep(
    net: &Network,
    params: &ParameterStore,
    data: &Dataset,
    grid: &[Vec<f64>],
    slack_pp: f64,
) -> Result<SweepReport> {
    if grid.len() + 1 != net.num_exits() {
        return Err(Error::Validation(format!(
            "grid has {} coordinates, network needs {}",
            grid.len(),
            net.num_exits() - 1
        )));
    }
    if let Some(i) = grid.iter().position(Vec::is_empty) {
        return Err(Error::Validation(format!("grid coordinate {} is empty", i + 1)));
    }
    let profile = ExitProfile::record(net, params, data)?;
    sweep_profile(&profile, grid, slack_pp)
}

fn lexicographic(a: &ThresholdVector, b: &ThresholdVector) -> Ordering {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Cheapest point with `accuracy ≥ baseline − slack` (slack in percentage
/// points). Ties go to higher accuracy, then to lexicographically lower
/// thresholds. If no point qualifies, the most accurate point is returned
/// with [`KneeStatus::NoPointWithinSlack`].
pub fn select_knee(report: &SweepReport, slack_pp: f64) -> Result<Knee> {
    if report.points.is_empty() {
        return Err(Error::Validation("cannot pick a knee from an empty sweep".into()));
    }
    let bound = report.baseline_accuracy - slack_pp / 100.0;
    let better = |a: &SweepPoint, b: &SweepPoint| {
        a.expected_macs
            .total_cmp(&b.expected_macs)
            .then(b.accuracy.total_cmp(&a.accuracy))
            .then(lexicographic(&a.thresholds, &b.thresholds))
    };
    let eligible = report
        .points
        .iter()
        .enumerate()
        .filter(|(_, p)| p.accuracy >= bound)
        .min_by(|(_, a), (_, b)| better(a, b));
    if let Some((index, _)) = eligible {
        return Ok(Knee {
            index,
            status: KneeStatus::WithinSlack,
            slack_pp,
        });
    }
    let (index, best) = report
        .points
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| {
            b.accuracy
                .total_cmp(&a.accuracy)
                .then(a.expected_macs.total_cmp(&b.expected_macs))
                .then(lexicographic(&a.thresholds, &b.thresholds))
        })
        .expect("non-empty");
    warn!(
        "no sweep point within {slack_pp} pp of baseline accuracy {:.4}; falling back to the most accurate point ({:.4})",
        report.baseline_accuracy, best.accuracy
    );
    Ok(Knee {
        index,
        status: KneeStatus::NoPointWithinSlack,
        slack_pp,
    })
}
