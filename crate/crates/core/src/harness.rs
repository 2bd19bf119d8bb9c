//! Repeated train/validation runs per dataset variant: stratified splits,
//! run averaging, LOESS smoothing and the train-overtakes-validation
//! crossing used to read off an accuracy estimate.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cnn::{build_network, train, Batch, CnnConfig};
use crate::eda::Label;
use crate::error::{Error, Result};
use crate::preprocess::{DatasetVariant, ProcessedDataset};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub train_acc: f64,
    pub val_acc: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingCurve {
    pub run_id: String,
    pub series: Vec<EpochMetrics>,
}

impl TrainingCurve {
    pub fn epochs(&self) -> usize {
        self.series.len()
    }

    pub fn train_acc(&self) -> Vec<f64> {
        self.series.iter().map(|m| m.train_acc).collect()
    }

    pub fn val_acc(&self) -> Vec<f64> {
        self.series.iter().map(|m| m.val_acc).collect()
    }

    pub fn train_loss(&self) -> Vec<f64> {
        self.series.iter().map(|m| m.train_loss).collect()
    }

    pub fn val_loss(&self) -> Vec<f64> {
        self.series.iter().map(|m| m.val_loss).collect()
    }

    pub fn from_columns(run_id: impl Into<String>, train_acc: &[f64], val_acc: &[f64], train_loss: &[f64], val_loss: &[f64]) -> Self {
        let series = (0..train_acc.len())
            .map(|e| EpochMetrics {
                train_acc: train_acc[e],
                val_acc: val_acc[e],
                train_loss: train_loss[e],
                val_loss: val_loss[e],
            })
            .collect();
        Self { run_id: run_id.into(), series }
    }

    /// Writes `epoch,train_acc,val_acc,train_loss,val_loss`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["epoch", "train_acc", "val_acc", "train_loss", "val_loss"])?;
        for (e, m) in self.series.iter().enumerate() {
            w.write_record([
                e.to_string(),
                m.train_acc.to_string(),
                m.val_acc.to_string(),
                m.train_loss.to_string(),
                m.val_loss.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(run_id: impl Into<String>, reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut series = Vec::new();
        for row in rdr.records() {
            let row = row?;
            let num = |i: usize| -> Result<f64> {
                row.get(i)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::malformed("curve csv", format!("bad row {row:?}")))
            };
            series.push(EpochMetrics { train_acc: num(1)?, val_acc: num(2)?, train_loss: num(3)?, val_loss: num(4)? });
        }
        Ok(Self { run_id: run_id.into(), series })
    }
}

/// Label-stratified holdout. Returns sorted (train, validation) indices.
pub fn split_indices(labels: &[Label], val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("validation fraction {val_fraction} outside (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train_idx, mut val_idx) = (Vec::new(), Vec::new());
    for class in [Label::Nodule, Label::Normal] {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        let n_val = (val_fraction * members.len() as f64).round() as usize;
        val_idx.extend_from_slice(&members[..n_val]);
        train_idx.extend_from_slice(&members[n_val..]);
    }
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::Stratify(format!(
            "{} samples give {} train / {} validation at fraction {val_fraction}",
            labels.len(),
            train_idx.len(),
            val_idx.len()
        )));
    }
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    Ok((train_idx, val_idx))
}

pub fn average_curves(curves: &[TrainingCurve]) -> Result<TrainingCurve> {
    let first = curves.first().ok_or(Error::Empty("curve list"))?;
    if let Some(c) = curves.iter().find(|c| c.epochs() != first.epochs()) {
        return Err(Error::InvalidArgument(format!(
            "curve {} has {} epochs, expected {}",
            c.run_id,
            c.epochs(),
            first.epochs()
        )));
    }
    let k = curves.len() as f64;
    let series = (0..first.epochs())
        .map(|e| {
            let mut m = EpochMetrics { train_acc: 0.0, val_acc: 0.0, train_loss: 0.0, val_loss: 0.0 };
            for c in curves {
                let s = &c.series[e];
                m.train_acc += s.train_acc;
                m.val_acc += s.val_acc;
                m.train_loss += s.train_loss;
                m.val_loss += s.val_loss;
            }
            EpochMetrics {
                train_acc: m.train_acc / k,
                val_acc: m.val_acc / k,
                train_loss: m.train_loss / k,
                val_loss: m.val_loss / k,
            }
        })
        .collect();
    Ok(TrainingCurve { run_id: "averaged".into(), series })
}

/// Indices of the `q` nearest neighbours of `i` in `0..n`, as a half-open
/// window. Equal distances prefer the lower index.
fn neighbour_window(i: usize, n: usize, q: usize) -> (usize, usize) {
    let (mut lo, mut hi) = (i, i + 1);
    while hi - lo < q {
        let left = (lo > 0).then(|| i - (lo - 1));
        let right = (hi < n).then(|| hi - i);
        match (left, right) {
            (Some(l), Some(r)) if l <= r => lo -= 1,
            (Some(_), Some(_)) | (None, Some(_)) => hi += 1,
            (Some(_), None) => lo -= 1,
            (None, None) => break,
        }
    }
    (lo, hi)
}

/// Weighted least-squares polynomial in `t`, evaluated at `t = 0`.
/// Householder QR on the square-root-weighted Vandermonde system.
fn local_fit(ts: &[f64], ys: &[f64], ws: &[f64], degree: usize) -> f64 {
    let m = ts.len();
    let cols = degree + 1;
    let mut a: Vec<Vec<f64>> = (0..m)
        .map(|r| {
            let sw = ws[r].sqrt();
            (0..cols).map(|c| sw * ts[r].powi(c as i32)).collect()
        })
        .collect();
    let mut b: Vec<f64> = (0..m).map(|r| ws[r].sqrt() * ys[r]).collect();
    for c in 0..cols {
        let norm = (c..m).map(|r| a[r][c] * a[r][c]).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if a[c][c] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (c..m).map(|r| a[r][c]).collect();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        for cc in c..cols {
            let dot: f64 = (c..m).map(|r| v[r - c] * a[r][cc]).sum();
            let f = 2.0 * dot / vnorm2;
            for r in c..m {
                a[r][cc] -= f * v[r - c];
            }
        }
        let dot: f64 = (c..m).map(|r| v[r - c] * b[r]).sum();
        let f = 2.0 * dot / vnorm2;
        for r in c..m {
            b[r] -= f * v[r - c];
        }
    }
    let mut coef = vec![0.0; cols];
    for c in (0..cols).rev() {
        let s: f64 = (c + 1..cols).map(|k| a[c][k] * coef[k]).sum();
        coef[c] = (b[c] - s) / a[c][c];
    }
    coef[0]
}

/// Tricube weights over neighbour distances, or uniform weights when the
/// window has no spread or too few positive weights for the fit.
pub fn tricube_weights(distances: &[f64], degree: usize) -> Vec<f64> {
    let dmax = distances.iter().copied().fold(0.0, f64::max);
    if dmax == 0.0 {
        return vec![1.0; distances.len()];
    }
    let w: Vec<f64> = distances.iter().map(|d| (1.0 - (d / dmax).powi(3)).powi(3)).collect();
    if w.iter().filter(|&&v| v > 0.0).count() < degree + 1 {
        return vec![1.0; distances.len()];
    }
    w
}

/// Window size used by [`loess_smooth`].
pub fn loess_window(n: usize, span: f64, degree: usize) -> usize {
    ((span * n as f64).ceil() as usize).max(degree + 1).min(n)
}

/// Local polynomial regression of `series` against its index.
pub fn loess_smooth(series: &[f64], span: f64, degree: usize) -> Result<Vec<f64>> {
    if !(span > 0.0 && span <= 1.0) {
        return Err(Error::InvalidArgument(format!("span {span} outside (0, 1]")));
    }
    if !(degree == 1 || degree == 2) {
        return Err(Error::InvalidArgument(format!("degree {degree} must be 1 or 2")));
    }
    let n = series.len();
    if n < degree + 1 {
        return Err(Error::InvalidArgument(format!("{n} points cannot carry a degree-{degree} fit")));
    }
    let q = loess_window(n, span, degree);
    Ok((0..n)
        .map(|i| {
            let (lo, hi) = neighbour_window(i, n, q);
            let ts: Vec<f64> = (lo..hi).map(|j| j as f64 - i as f64).collect();
            let dists: Vec<f64> = ts.iter().map(|t| t.abs()).collect();
            let ws = tricube_weights(&dists, degree);
            local_fit(&ts, &series[lo..hi], &ws, degree)
        })
        .collect())
}

/// First epoch where training accuracy is at least the validation accuracy.
pub fn crossing_epoch(train_acc: &[f64], val_acc: &[f64]) -> Option<usize> {
    train_acc.iter().zip(val_acc).position(|(t, v)| t >= v)
}

/// Smoothed validation accuracy at the crossing epoch.
pub fn actual_accuracy(smoothed: &TrainingCurve) -> Option<(usize, f64)> {
    let e = crossing_epoch(&smoothed.train_acc(), &smoothed.val_acc())?;
    Some((e, smoothed.series[e].val_acc))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    pub val_fraction: f64,
    pub loess_span: f64,
    pub loess_degree: usize,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self { val_fraction: 0.2, loess_span: 0.3, loess_degree: 2 }
    }
}

/// Smooths all four series; accuracies are kept in `[0, 1]` and losses non-negative.
pub fn smooth_curve(curve: &TrainingCurve, span: f64, degree: usize) -> Result<TrainingCurve> {
    if curve.epochs() == 0 {
        return Ok(TrainingCurve { run_id: "smoothed".into(), series: Vec::new() });
    }
    let acc = |v: Vec<f64>| v.into_iter().map(|x| x.clamp(0.0, 1.0)).collect::<Vec<_>>();
    let loss = |v: Vec<f64>| v.into_iter().map(|x| x.max(0.0)).collect::<Vec<_>>();
    let (ta, va) = (acc(loess_smooth(&curve.train_acc(), span, degree)?), acc(loess_smooth(&curve.val_acc(), span, degree)?));
    let (tl, vl) = (loss(loess_smooth(&curve.train_loss(), span, degree)?), loss(loess_smooth(&curve.val_loss(), span, degree)?));
    Ok(TrainingCurve::from_columns("smoothed", &ta, &va, &tl, &vl))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: DatasetVariant,
    pub averaged: TrainingCurve,
    pub smoothed: TrainingCurve,
    pub crossing_epoch: Option<usize>,
    pub actual_accuracy: Option<f64>,
}

impl RunSummary {
    pub fn from_runs(variant: DatasetVariant, runs: &[TrainingCurve], harness: &HarnessConfig) -> Result<Self> {
        let averaged = average_curves(runs)?;
        let smoothed = smooth_curve(&averaged, harness.loess_span, harness.loess_degree)?;
        let estimate = actual_accuracy(&smoothed);
        Ok(Self {
            variant,
            averaged,
            smoothed,
            crossing_epoch: estimate.map(|(e, _)| e),
            actual_accuracy: estimate.map(|(_, a)| a),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub runs: Vec<TrainingCurve>,
    pub summary: RunSummary,
}

/// One stratified split and training run per seed, then aggregation.
/// Runs execute in parallel and are joined in seed order.
pub fn run_experiment(
    dataset: &ProcessedDataset,
    cnn: &CnnConfig,
    harness: &HarnessConfig,
    epochs: usize,
    seeds: &[u64],
) -> Result<Experiment> {
    if seeds.is_empty() {
        return Err(Error::Empty("seed list"));
    }
    let all = Batch::from_samples(&dataset.samples, cnn.input_side)?;
    let labels: Vec<Label> = dataset.samples.iter().map(|s| s.label).collect();
    let runs = seeds
        .par_iter()
        .map(|&seed| {
            let (tr, va) = split_indices(&labels, harness.val_fraction, seed)?;
            let pick = |idx: &[usize]| Batch {
                images: idx.iter().map(|&i| all.images[i].clone()).collect(),
                labels: idx.iter().map(|&i| all.labels[i]).collect(),
            };
            let mut net = build_network(&CnnConfig { seed, ..cnn.clone() })?;
            let mut curve = train(&mut net, &pick(&tr), &pick(&va), epochs)?;
            curve.run_id = format!("{}-seed{seed}", dataset.variant);
            Ok(curve)
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = RunSummary::from_runs(dataset.variant, &runs, harness)?;
    Ok(Experiment { runs, summary })
}
