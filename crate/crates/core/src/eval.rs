//! Classification metrics, negative-transfer checks, the joint MMD
//! divergence and aggregation over repeated trajectories.

use serde::{Deserialize, Serialize};

use crate::active::QueryTrajectory;
use crate::data::{Dataset, LabelSpace};
use crate::error::{Error, Result};

/// Per-class precision, recall and F1 with the confusion counts
/// (`confusion[truth][pred]`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub support: Vec<usize>,
    pub macro_f1: f64,
    pub confusion: Vec<Vec<usize>>,
}

/// Macro F1 over the classes present in `truth`. A present class with no
/// true positives scores 0.
pub fn macro_f1(pred: &[usize], truth: &[usize], label_space: &LabelSpace) -> Result<F1Report> {
    if pred.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            found: pred.len(),
        });
    }
    if truth.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let c = label_space.len();
    if let Some(&bad) = pred.iter().chain(truth).find(|&&l| l >= c) {
        return Err(Error::InvalidInput(format!(
            "label {bad} outside the label space"
        )));
    }
    let mut confusion = vec![vec![0usize; c]; c];
    for (&p, &t) in pred.iter().zip(truth) {
        confusion[t][p] += 1;
    }
    let mut precision = vec![0.0; c];
    let mut recall = vec![0.0; c];
    let mut f1 = vec![0.0; c];
    let mut support = vec![0; c];
    let mut total = 0.0;
    let mut present = 0;
    for k in 0..c {
        let tp = confusion[k][k] as f64;
        let predicted: usize = (0..c).map(|t| confusion[t][k]).sum();
        support[k] = confusion[k].iter().sum();
        if predicted > 0 {
            precision[k] = tp / predicted as f64;
        }
        if support[k] > 0 {
            recall[k] = tp / support[k] as f64;
        }
        if tp > 0.0 {
            f1[k] = 2.0 * precision[k] * recall[k] / (precision[k] + recall[k]);
        }
        if support[k] > 0 {
            total += f1[k];
            present += 1;
        }
    }
    Ok(F1Report {
        precision,
        recall,
        f1,
        support,
        macro_f1: total / present as f64,
        confusion,
    })
}

/// Mean zero-one loss of `predict` on a labelled dataset.
pub fn empirical_risk(
    mut predict: impl FnMut(&[f64]) -> Result<usize>,
    labelled: &Dataset,
) -> Result<f64> {
    if labelled.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let labels = labelled.labels()?;
    let mut wrong = 0usize;
    for (o, &y) in labelled.observations().iter().zip(&labels) {
        if predict(&o.features)? != y {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / labels.len() as f64)
}

/// Transfer is negative when it leaves a strictly higher target risk than
/// ignoring the source.
pub fn negative_transfer(risk_transfer: f64, risk_target_only: f64) -> bool {
    risk_transfer > risk_target_only
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// Median pairwise distance of the pooled features.
    Median,
    Fixed(f64),
}

/// Components of a joint MMD evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JmmdReport {
    /// The total, clamped at zero.
    pub value: f64,
    pub raw: f64,
    pub marginal: f64,
    /// `(class, squared MMD)` for each class shared by both sides.
    pub per_class: Vec<(usize, f64)>,
    pub skipped: Vec<usize>,
    pub bandwidth: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Unbiased squared MMD between two samples under `exp(-|x-y|^2 / (2 h^2))`.
pub fn mmd2_unbiased(x: &[&[f64]], y: &[&[f64]], h: f64) -> Result<f64> {
    let (m, n) = (x.len(), y.len());
    if m < 2 || n < 2 {
        return Err(Error::InvalidInput(
            "each sample needs at least two rows".into(),
        ));
    }
    let gamma = 1.0 / (2.0 * h * h);
    let within = |s: &[&[f64]]| -> f64 {
        let mut total = 0.0;
        for i in 0..s.len() {
            for j in (i + 1)..s.len() {
                total += (-gamma * sq_dist(s[i], s[j])).exp();
            }
        }
        2.0 * total / (s.len() * (s.len() - 1)) as f64
    };
    let mut cross = 0.0;
    for a in x {
        for b in y {
            cross += (-gamma * sq_dist(a, b)).exp();
        }
    }
    Ok(within(x) + within(y) - 2.0 * cross / (m * n) as f64)
}

fn median_distance(rows: &[&[f64]]) -> f64 {
    let mut d: Vec<f64> = Vec::with_capacity(rows.len() * rows.len() / 2);
    for i in 0..rows.len() {
        for j in (i + 1)..rows.len() {
            d.push(sq_dist(rows[i], rows[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    *m
}

/// Marginal squared MMD plus the class-conditional squared MMDs over the
/// classes both sides share. Symmetric in its arguments.
pub fn jmmd(source: &Dataset, target_mapped: &Dataset, bandwidth: Bandwidth) -> Result<JmmdReport> {
    if source.dim() != target_mapped.dim() {
        return Err(Error::DimensionMismatch {
            expected: source.dim(),
            found: target_mapped.dim(),
        });
    }
    let ys = source.labels()?;
    let yt = target_mapped.labels()?;
    let xs: Vec<&[f64]> = source
        .observations()
        .iter()
        .map(|o| o.features.as_slice())
        .collect();
    let xt: Vec<&[f64]> = target_mapped
        .observations()
        .iter()
        .map(|o| o.features.as_slice())
        .collect();
    let c = source.label_space().len();
    let shared: Vec<usize> = (0..c)
        .filter(|k| ys.contains(k) && yt.contains(k))
        .collect();
    if shared.is_empty() {
        return Err(Error::InvalidInput("the datasets share no class".into()));
    }
    let h = match bandwidth {
        Bandwidth::Fixed(h) if h > 0.0 => h,
        Bandwidth::Fixed(h) => {
            return Err(Error::InvalidInput(format!(
                "bandwidth {h} must be positive"
            )))
        }
        Bandwidth::Median => {
            let pooled: Vec<&[f64]> = xs.iter().chain(&xt).copied().collect();
            let h = median_distance(&pooled);
            if h > 0.0 {
                h
            } else {
                1.0
            }
        }
    };
    let marginal = mmd2_unbiased(&xs, &xt, h)?;
    let mut per_class = Vec::new();
    let mut skipped = Vec::new();
    for k in shared {
        let a: Vec<&[f64]> = xs
            .iter()
            .zip(&ys)
            .filter(|(_, &y)| y == k)
            .map(|(x, _)| *x)
            .collect();
        let b: Vec<&[f64]> = xt
            .iter()
            .zip(&yt)
            .filter(|(_, &y)| y == k)
            .map(|(x, _)| *x)
            .collect();
        if a.len() < 2 || b.len() < 2 {
            log::warn!(
                "class `{}` has fewer than two members on one side; left out of the joint MMD",
                source.label_space().name(k)
            );
            skipped.push(k);
            continue;
        }
        per_class.push((k, mmd2_unbiased(&a, &b, h)?));
    }
    let raw = marginal + per_class.iter().map(|(_, v)| v).sum::<f64>();
    if raw < 0.0 {
        log::debug!("joint MMD estimate {raw:e} clamped to zero");
    }
    Ok(JmmdReport {
        value: raw.max(0.0),
        raw,
        marginal,
        per_class,
        skipped,
        bandwidth: h,
    })
}

/// Nearest-rank percentile (`p` in percent) of an ascending slice.
pub fn percentile_nearest_rank(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// Mean and 10th/90th nearest-rank percentiles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub mean: f64,
    pub p10: f64,
    pub p90: f64,
}

impl Band {
    pub fn of(values: &[f64]) -> Self {
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Self {
            mean: values.iter().sum::<f64>() / values.len() as f64,
            p10: percentile_nearest_rank(&sorted, 10.0),
            p90: percentile_nearest_rank(&sorted, 90.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepeatSummary {
    pub repeats: usize,
    pub stream_len: usize,
    pub mean: Vec<f64>,
    pub p10: Vec<f64>,
    pub p90: Vec<f64>,
    /// Queried labels per class over repeats.
    pub class_queries: Vec<Band>,
    pub total_queries: Band,
    pub query_fraction: Band,
    pub final_f1: Band,
}

/// Pointwise summary of F1 curves and query counts over repeats.
pub fn aggregate_repeats(trajectories: &[QueryTrajectory]) -> Result<RepeatSummary> {
    let first = trajectories.first().ok_or(Error::EmptyDataset)?;
    let len = first.f1_curve.len();
    if let Some(t) = trajectories.iter().find(|t| t.f1_curve.len() != len) {
        return Err(Error::DimensionMismatch {
            expected: len,
            found: t.f1_curve.len(),
        });
    }
    let n_classes = first.n_classes;
    let mut mean = Vec::with_capacity(len);
    let mut p10 = Vec::with_capacity(len);
    let mut p90 = Vec::with_capacity(len);
    for i in 0..len {
        let column: Vec<f64> = trajectories.iter().map(|t| t.f1_curve[i]).collect();
        let b = Band::of(&column);
        mean.push(b.mean);
        p10.push(b.p10);
        p90.push(b.p90);
    }
    let per_class: Vec<Vec<usize>> = trajectories.iter().map(|t| t.queries_per_class()).collect();
    let class_queries = (0..n_classes)
        .map(|k| Band::of(&per_class.iter().map(|q| q[k] as f64).collect::<Vec<_>>()))
        .collect();
    let totals: Vec<f64> = trajectories.iter().map(|t| t.n_queried() as f64).collect();
    let fractions: Vec<f64> = trajectories.iter().map(|t| t.query_fraction()).collect();
    let finals: Vec<f64> = trajectories.iter().map(|t| t.final_f1()).collect();
    Ok(RepeatSummary {
        repeats: trajectories.len(),
        stream_len: len,
        mean,
        p10,
        p90,
        class_queries,
        total_queries: Band::of(&totals),
        query_fraction: Band::of(&fractions),
        final_f1: Band::of(&finals),
    })
}
