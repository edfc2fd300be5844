//! Evaluation metrics: test-retest percent changes, annual percent change,
//! effect sizes, power analysis, lesion rates, Dice overlap, and LDA/ROC
//! group classification.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::volio::{csv_error, VolumeTimeSeries};

fn check_pair(v1: f64, v2: f64) -> Result<()> {
    if !(v1 >= 0.0 && v2 >= 0.0) || v1 + v2 == 0.0 {
        return Err(Error::InvalidArgument(format!(
            "percent change needs nonnegative volumes with positive sum, got ({v1}, {v2})"
        )));
    }
    Ok(())
}

/// Signed symmetrized percent change `100 (v2 − v1) / ((v1 + v2)/2)`.
pub fn spc(v1: f64, v2: f64) -> Result<f64> {
    check_pair(v1, v2)?;
    Ok(100.0 * (v2 - v1) / ((v1 + v2) / 2.0))
}

/// Absolute symmetrized percent change.
pub fn aspc(v1: f64, v2: f64) -> Result<f64> {
    spc(v1, v2).map(f64::abs)
}

/// ASPC over every unordered pair of repeated measurements.
pub fn aspc_all_pairs(values: &[f64]) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for i in 0..values.len() {
        for j in i + 1..values.len() {
            out.push(aspc(values[i], values[j])?);
        }
    }
    Ok(out)
}

/// Ordinary least-squares line `a + b t`; returns `(a, b)`.
pub fn least_squares_line(times: &[f64], values: &[f64]) -> Result<(f64, f64)> {
    if times.len() != values.len() || times.len() < 2 {
        return Err(Error::InvalidArgument(
            "a line fit needs at least two paired points".into(),
        ));
    }
    let n = times.len() as f64;
    let tm = times.iter().sum::<f64>() / n;
    let vm = values.iter().sum::<f64>() / n;
    let stt: f64 = times.iter().map(|t| (t - tm).powi(2)).sum();
    if stt == 0.0 {
        return Err(Error::InvalidArgument("time points are all equal".into()));
    }
    let stv: f64 = times
        .iter()
        .zip(values)
        .map(|(t, v)| (t - tm) * (v - vm))
        .sum();
    let b = stv / stt;
    Ok((vm - b * tm, b))
}

/// Annual percent change `100 b / a` of the least-squares line through the
/// series, with the intercept evaluated at baseline (t = 0).
pub fn apc_values(times: &[f64], volumes: &[f64]) -> Result<f64> {
    let (a, b) = least_squares_line(times, volumes)?;
    if !(a > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "baseline intercept {a} is not positive"
        )));
    }
    Ok(100.0 * b / a)
}

pub fn apc(series: &VolumeTimeSeries, structure: &str) -> Result<f64> {
    let volumes = series.structure(structure).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "structure `{structure}` missing for {}",
            series.subject_id
        ))
    })?;
    apc_values(&series.times(), &volumes)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupSample {
    pub label: String,
    pub values: Vec<f64>,
}

impl GroupSample {
    pub fn new(label: impl Into<String>, values: Vec<f64>) -> Self {
        Self {
            label: label.into(),
            values,
        }
    }
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var)
}

/// Cohen's d with the pooled sample standard deviation.
pub fn cohens_d(a: &GroupSample, b: &GroupSample) -> Result<f64> {
    let (na, nb) = (a.values.len(), b.values.len());
    if na < 2 || nb < 2 {
        return Err(Error::InvalidArgument(
            "each group needs at least two values".into(),
        ));
    }
    let (ma, va) = mean_var(&a.values);
    let (mb, vb) = mean_var(&b.values);
    let pooled = ((na as f64 - 1.0) * va + (nb as f64 - 1.0) * vb) / (na + nb - 2) as f64;
    if !(pooled > 0.0) {
        return Err(Error::InvalidArgument("pooled variance is zero".into()));
    }
    Ok((ma - mb) / pooled.sqrt())
}

/// Per-group sample size `⌈2 (z_{1−α/2} + z_power)² / d²⌉` for a two-sided
/// two-sample comparison.
pub fn sample_size_for_effect(d: f64, power: f64, alpha: f64) -> Result<u64> {
    if !(d.abs() > 0.0) || !d.is_finite() {
        return Err(Error::InvalidArgument(
            "zero effect size needs an unbounded sample".into(),
        ));
    }
    if !(power > 0.0 && power < 1.0 && alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(
            "power and alpha must lie in (0, 1)".into(),
        ));
    }
    let normal = Normal::standard();
    let z = normal.inverse_cdf(1.0 - alpha / 2.0) + normal.inverse_cdf(power);
    Ok((2.0 * z * z / (d * d)).ceil() as u64)
}

pub fn required_sample_size(
    a: &GroupSample,
    b: &GroupSample,
    power: f64,
    alpha: f64,
) -> Result<u64> {
    sample_size_for_effect(cohens_d(a, b)?, power, alpha)
}

/// `(LES_I, LES_D)`: mean over consecutive pairs of newly labelled
/// (respectively unlabelled) voxels per year.
pub fn lesion_rates(masks: &[(&[bool], f64)]) -> Result<(f64, f64)> {
    if masks.len() < 2 {
        return Err(Error::InvalidArgument(
            "lesion rates need at least two time points".into(),
        ));
    }
    let n = masks[0].0.len();
    let (mut inc, mut dec) = (0.0, 0.0);
    for w in masks.windows(2) {
        let ((m0, t0), (m1, t1)) = (w[0], w[1]);
        if m1.len() != n || m0.len() != n {
            return Err(Error::Shape("lesion masks differ in size".into()));
        }
        let dt = t1 - t0;
        if !(dt > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "time step {dt} is not positive"
            )));
        }
        let gained = m0.iter().zip(m1).filter(|(a, b)| !**a && **b).count();
        let lost = m0.iter().zip(m1).filter(|(a, b)| **a && !**b).count();
        inc += gained as f64 / dt;
        dec += lost as f64 / dt;
    }
    let pairs = (masks.len() - 1) as f64;
    Ok((inc / pairs, dec / pairs))
}

/// Dice overlap `2|X∩Y| / (|X| + |Y|)`; two empty masks score 1.
pub fn dice(x: &[bool], y: &[bool]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape("masks differ in size".into()));
    }
    let both = x.iter().zip(y).filter(|(a, b)| **a && **b).count();
    let total = x.iter().filter(|&&a| a).count() + y.iter().filter(|&&b| b).count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / total as f64)
}

/// ROC points `(fpr, tpr)` from `(0,0)` to `(1,1)` for scores where larger
/// means positive, with tied scores grouped, and the trapezoidal AUC.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<(Vec<(f64, f64)>, f64)> {
    if scores.len() != labels.len() {
        return Err(Error::Shape("scores and labels differ in length".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let neg = labels.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return Err(Error::InvalidArgument("ROC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut curve = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        curve.push((fp / neg, tp / pos));
    }
    let auc = curve
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum();
    Ok((curve, auc))
}

fn interpolate_tpr(curve: &[(f64, f64)], fpr: f64) -> f64 {
    let mut best: f64 = 0.0;
    for w in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if fpr >= x0 && fpr <= x1 {
            let y = if x1 > x0 {
                y0 + (y1 - y0) * (fpr - x0) / (x1 - x0)
            } else {
                y1
            };
            best = best.max(y);
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocResult {
    /// AUC of the ROC built from all held-out scores.
    pub auc: f64,
    /// Held-out discriminant score per subject (larger means positive).
    pub scores: Vec<f64>,
    /// Per-fold ROC curves averaged on an even false-positive-rate grid.
    pub mean_curve: Vec<(f64, f64)>,
    /// A ridge was added to a singular pooled covariance in some fold.
    pub regularized: bool,
}

/// Number of points of [`RocResult::mean_curve`].
pub const ROC_GRID_POINTS: usize = 101;

/// Two-class LDA with pooled covariance, evaluated by stratified k-fold
/// cross-validation. `labels[i]` is true for the positive group.
pub fn lda_roc(
    features: &[Vec<f64>],
    labels: &[bool],
    folds: usize,
    seed: u64,
) -> Result<RocResult> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::Shape("features and labels differ in length".into()));
    }
    let dim = features[0].len();
    if dim == 0 || features.iter().any(|f| f.len() != dim) {
        return Err(Error::Shape(
            "feature vectors must share a nonzero length".into(),
        ));
    }
    if folds < 2 {
        return Err(Error::InvalidArgument("need at least two folds".into()));
    }
    let mut rng = SplitMix64::new(seed);
    let mut fold_of = vec![0usize; labels.len()];
    for class in [true, false] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if idx.len() < folds {
            return Err(Error::InvalidArgument(format!(
                "{} subjects in one class, fewer than {folds} folds",
                idx.len()
            )));
        }
        rng.shuffle(&mut idx);
        for (j, &i) in idx.iter().enumerate() {
            fold_of[i] = j % folds;
        }
    }
    let x: Vec<DVector<f64>> = features
        .iter()
        .map(|f| DVector::from_column_slice(f))
        .collect();
    let mut scores = vec![0.0; labels.len()];
    let mut regularized = false;
    let grid: Vec<f64> = (0..ROC_GRID_POINTS)
        .map(|i| i as f64 / (ROC_GRID_POINTS - 1) as f64)
        .collect();
    let mut mean_tpr = vec![0.0; ROC_GRID_POINTS];
    for fold in 0..folds {
        let train: Vec<usize> = (0..labels.len()).filter(|&i| fold_of[i] != fold).collect();
        let test: Vec<usize> = (0..labels.len()).filter(|&i| fold_of[i] == fold).collect();
        let class_mean = |c: bool| {
            let members: Vec<&DVector<f64>> = train
                .iter()
                .filter(|&&i| labels[i] == c)
                .map(|&i| &x[i])
                .collect();
            let n = members.len() as f64;
            (
                members.iter().fold(DVector::zeros(dim), |acc, v| acc + *v) / n,
                n,
            )
        };
        let (m1, n1) = class_mean(true);
        let (m0, n0) = class_mean(false);
        let mut pooled = DMatrix::zeros(dim, dim);
        for &i in &train {
            let d = &x[i] - if labels[i] { &m1 } else { &m0 };
            pooled += &d * d.transpose();
        }
        pooled /= (train.len() - 2) as f64;
        let diff = &m1 - &m0;
        let w = match pooled.clone().cholesky() {
            Some(ch) if pooled.trace() > 0.0 => ch.solve(&diff),
            _ => {
                regularized = true;
                let ridge = 1e-6 * (pooled.trace() / dim as f64).max(f64::MIN_POSITIVE);
                let reg = &pooled + DMatrix::identity(dim, dim) * ridge;
                reg.cholesky()
                    .map(|ch| ch.solve(&diff))
                    .unwrap_or_else(|| diff.clone())
            }
        };
        let mid = (&m1 + &m0) * 0.5;
        let offset = (n1 / n0).ln();
        for &i in &test {
            scores[i] = w.dot(&(&x[i] - &mid)) + offset;
        }
        let fold_scores: Vec<f64> = test.iter().map(|&i| scores[i]).collect();
        let fold_labels: Vec<bool> = test.iter().map(|&i| labels[i]).collect();
        let (curve, _) = roc_curve(&fold_scores, &fold_labels)?;
        for (acc, &f) in mean_tpr.iter_mut().zip(&grid) {
            *acc += interpolate_tpr(&curve, f) / folds as f64;
        }
    }
    let (_, auc) = roc_curve(&scores, labels)?;
    Ok(RocResult {
        auc,
        scores,
        mean_curve: grid.into_iter().zip(mean_tpr).collect(),
        regularized,
    })
}

/// One row of the metrics CSV (`metric,subject,structure,value`).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub subject: String,
    pub structure: String,
    pub value: f64,
}

pub fn write_metrics_csv(rows: &[MetricRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["metric", "subject", "structure", "value"])
        .map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.write_record([
            r.metric.as_str(),
            r.subject.as_str(),
            r.structure.as_str(),
            &r.value.to_string(),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_roc_csv(curve: &[(f64, f64)], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["fpr", "tpr"])
        .map_err(|e| csv_error(path, e))?;
    for (f, t) in curve {
        w.write_record([f.to_string(), t.to_string()])
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Median of a nonempty sample (mean of the middle pair for even length).
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}
