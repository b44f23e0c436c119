//! Multiclass relevance vector machine with a Gaussian kernel.
//!
//! Class scores are `γ_c = Σ_j k(x, rv_j) w_cj` and probabilities their
//! softmax. Each weight has its own precision with a Gamma hyperprior;
//! training alternates a Newton step on the weights of each class with a
//! closed-form precision update.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LabelSpace};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Gaussian,
}

/// `k(x, x') = exp(-bandwidth · ‖x - x'‖²)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub bandwidth: f64,
}

impl KernelSpec {
    pub fn gaussian(bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "kernel bandwidth {bandwidth} must be positive"
            )));
        }
        Ok(Self {
            kind: KernelKind::Gaussian,
            bandwidth,
        })
    }

    /// The default bandwidth `1/d`.
    pub fn for_dim(d: usize) -> Self {
        Self {
            kind: KernelKind::Gaussian,
            bandwidth: 1.0 / d.max(1) as f64,
        }
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        let sq: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
        (-self.bandwidth * sq).exp()
    }
}

/// `K[i, j] = k(x_i, rv_j)`.
pub fn kernel_matrix(
    x: &DMatrix<f64>,
    rv: &DMatrix<f64>,
    kernel: &KernelSpec,
) -> Result<DMatrix<f64>> {
    if x.ncols() != rv.ncols() {
        return Err(Error::DimensionMismatch {
            expected: rv.ncols(),
            found: x.ncols(),
        });
    }
    let d = x.ncols();
    Ok(DMatrix::from_fn(x.nrows(), rv.nrows(), |i, j| {
        let mut sq = 0.0;
        for k in 0..d {
            let diff = x[(i, k)] - rv[(j, k)];
            sq += diff * diff;
        }
        (-kernel.bandwidth * sq).exp()
    }))
}

/// Shape and rate of the Gamma prior on each weight precision.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaHyper {
    pub a: f64,
    pub b: f64,
}

impl Default for GammaHyper {
    fn default() -> Self {
        Self { a: 1e-6, b: 1e-6 }
    }
}

impl GammaHyper {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "gamma hyperparameters a={a}, b={b} must be positive"
            )));
        }
        Ok(Self { a, b })
    }

    /// Precision maximizing the log-precision posterior for a weight `w`.
    pub fn precision_update(&self, w: f64) -> f64 {
        (1.0 + 2.0 * self.a) / (w * w + 2.0 * self.b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    /// Stop when `max|ΔW| / max|W|` falls below this.
    pub tol: f64,
    pub max_iter: usize,
    /// Precision every weight starts from. A weak start lets the first
    /// weight fit be driven by the data; starting near the prior mean traps
    /// the fit in a dense solution with every weight shrunk alike.
    pub init_precision: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            tol: 1e-4,
            max_iter: 200,
            init_precision: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RvmModel {
    /// `n_r × d`, rows are training inputs.
    pub relevance_vectors: DMatrix<f64>,
    /// `C × n_r`, row `c` scores `classes[c]`.
    pub weights: DMatrix<f64>,
    /// `C × n_r`, positive.
    pub precisions: DMatrix<f64>,
    pub kernel: KernelSpec,
    pub label_space: LabelSpace,
    /// Label-space indices of the modelled classes, ascending.
    pub classes: Vec<usize>,
    /// Row index in the training set of each relevance vector.
    pub active_index: Vec<usize>,
}

impl RvmModel {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn n_relevance(&self) -> usize {
        self.relevance_vectors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.relevance_vectors.ncols()
    }

    /// Position of a label-space class among the modelled classes.
    pub fn class_position(&self, label: usize) -> Option<usize> {
        self.classes.iter().position(|&c| c == label)
    }

    pub fn kernel_row(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite feature value".into()));
        }
        Ok((0..self.n_relevance())
            .map(|j| {
                let mut sq = 0.0;
                for k in 0..x.len() {
                    let diff = x[k] - self.relevance_vectors[(j, k)];
                    sq += diff * diff;
                }
                (-self.kernel.bandwidth * sq).exp()
            })
            .collect())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ModelDoc::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str::<ModelDoc>(text)?.try_into()
    }
}

#[derive(Serialize, Deserialize)]
struct ModelDoc {
    kernel: KernelSpec,
    label_space: LabelSpace,
    classes: Vec<usize>,
    active_index: Vec<usize>,
    relevance_vectors: Vec<Vec<f64>>,
    weights: Vec<Vec<f64>>,
    precisions: Vec<Vec<f64>>,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(r: &[Vec<f64>], ncols: usize) -> Result<DMatrix<f64>> {
    if let Some(bad) = r.iter().find(|row| row.len() != ncols) {
        return Err(Error::DimensionMismatch {
            expected: ncols,
            found: bad.len(),
        });
    }
    Ok(DMatrix::from_fn(r.len(), ncols, |i, j| r[i][j]))
}

impl From<&RvmModel> for ModelDoc {
    fn from(m: &RvmModel) -> Self {
        Self {
            kernel: m.kernel,
            label_space: m.label_space.clone(),
            classes: m.classes.clone(),
            active_index: m.active_index.clone(),
            relevance_vectors: rows(&m.relevance_vectors),
            weights: rows(&m.weights),
            precisions: rows(&m.precisions),
        }
    }
}

impl TryFrom<ModelDoc> for RvmModel {
    type Error = Error;

    fn try_from(doc: ModelDoc) -> Result<Self> {
        let d = doc.relevance_vectors.first().map_or(0, Vec::len);
        let n_r = doc.relevance_vectors.len();
        let model = RvmModel {
            relevance_vectors: from_rows(&doc.relevance_vectors, d)?,
            weights: from_rows(&doc.weights, n_r)?,
            precisions: from_rows(&doc.precisions, n_r)?,
            kernel: doc.kernel,
            label_space: doc.label_space,
            classes: doc.classes,
            active_index: doc.active_index,
        };
        if model.weights.nrows() != model.classes.len()
            || model.precisions.nrows() != model.classes.len()
        {
            return Err(Error::DimensionMismatch {
                expected: model.classes.len(),
                found: model.weights.nrows(),
            });
        }
        if model.active_index.len() != n_r {
            return Err(Error::DimensionMismatch {
                expected: n_r,
                found: model.active_index.len(),
            });
        }
        if model.precisions.iter().any(|&a| !(a > 0.0)) {
            return Err(Error::InvalidInput("precisions must be positive".into()));
        }
        Ok(model)
    }
}

/// Numerically stable softmax.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `ln Σ exp(z)`.
pub fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Class scores `γ_c = ⟨k_row, w_c⟩`.
pub fn logits(model: &RvmModel, k_row: &[f64]) -> Result<Vec<f64>> {
    if k_row.len() != model.n_relevance() {
        return Err(Error::DimensionMismatch {
            expected: model.n_relevance(),
            found: k_row.len(),
        });
    }
    Ok(model
        .weights
        .row_iter()
        .map(|w| w.iter().zip(k_row).map(|(a, b)| a * b).sum())
        .collect())
}

/// Class probabilities over `model.classes`.
pub fn predict_proba(model: &RvmModel, x: &[f64]) -> Result<Vec<f64>> {
    let k = model.kernel_row(x)?;
    Ok(softmax(&logits(model, &k)?))
}

/// Most probable label-space class.
pub fn predict_label(model: &RvmModel, x: &[f64]) -> Result<usize> {
    let p = predict_proba(model, x)?;
    Ok(model.classes[argmax(&p)])
}

pub fn argmax(p: &[f64]) -> usize {
    p.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
            if v > best.1 {
                (i, v)
            } else {
                best
            }
        })
        .0
}

/// Trains on every labelled observation of `train`; all of its inputs start
/// as candidate relevance vectors.
pub fn fit_em(
    train: &Dataset,
    kernel: &KernelSpec,
    hyper: &GammaHyper,
    cfg: &EmConfig,
) -> Result<RvmModel> {
    fit_em_traced(train, kernel, hyper, cfg).map(|(m, _)| m)
}

/// As [`fit_em`], also returning the objective after every iteration.
///
/// The objective is the log posterior of the weights and log-precisions,
/// `Σ_i ln p(y_i | x_i, W) + Σ_cj [(a + ½) ln α_cj - α_cj (w_cj²/2 + b)]`,
/// up to a constant. Both steps of an iteration increase it.
pub fn fit_em_traced(
    train: &Dataset,
    kernel: &KernelSpec,
    hyper: &GammaHyper,
    cfg: &EmConfig,
) -> Result<(RvmModel, Vec<f64>)> {
    let labels = train.labels()?;
    let mut classes: Vec<usize> = labels.clone();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::SingleClass);
    }
    let y: Vec<usize> = labels
        .iter()
        .map(|l| classes.binary_search(l).unwrap())
        .collect();
    let x = train.features();
    let k = kernel_matrix(&x, &x, kernel)?;
    let n = x.nrows();
    let c = classes.len();

    let mut w = DMatrix::<f64>::zeros(c, n);
    let mut alpha = DMatrix::<f64>::from_element(c, n, cfg.init_precision);
    // scores F = K Wᵀ, n × C
    let mut f = DMatrix::<f64>::zeros(n, c);
    let mut trace = Vec::new();

    let loglik = |f: &DMatrix<f64>| -> f64 {
        (0..n)
            .map(|i| {
                let row: Vec<f64> = f.row(i).iter().copied().collect();
                row[y[i]] - log_sum_exp(&row)
            })
            .sum()
    };
    let objective = |f: &DMatrix<f64>, w: &DMatrix<f64>, alpha: &DMatrix<f64>| -> f64 {
        let prior: f64 = w
            .iter()
            .zip(alpha.iter())
            .map(|(&wi, &ai)| (hyper.a + 0.5) * ai.ln() - ai * (0.5 * wi * wi + hyper.b))
            .sum();
        loglik(f) + prior
    };

    for iter in 0..cfg.max_iter {
        let w_before = w.clone();
        for cls in 0..c {
            newton_step(&k, &y, cls, &mut w, &alpha, &mut f, &loglik, iter)?;
        }
        for (wi, ai) in w.iter().zip(alpha.iter_mut()) {
            *ai = hyper.precision_update(*wi);
        }
        let j = objective(&f, &w, &alpha);
        if !j.is_finite() {
            return Err(Error::NonFiniteObjective(iter));
        }
        trace.push(j);
        let change = (&w - &w_before).abs().max() / w.abs().max().max(f64::MIN_POSITIVE);
        log::trace!("em iteration {iter}: objective {j:.6}, relative change {change:.3e}");
        if change < cfg.tol {
            break;
        }
    }
    if trace.len() == cfg.max_iter {
        log::debug!("EM stopped at the iteration limit ({})", cfg.max_iter);
    }

    Ok((
        RvmModel {
            relevance_vectors: x,
            weights: w,
            precisions: alpha,
            kernel: *kernel,
            label_space: train.label_space().clone(),
            classes,
            active_index: (0..n).collect(),
        },
        trace,
    ))
}

/// One damped Newton step on the weights of class `cls` with the other
/// classes and all precisions fixed.
#[allow(clippy::too_many_arguments)]
fn newton_step(
    k: &DMatrix<f64>,
    y: &[usize],
    cls: usize,
    w: &mut DMatrix<f64>,
    alpha: &DMatrix<f64>,
    f: &mut DMatrix<f64>,
    loglik: &dyn Fn(&DMatrix<f64>) -> f64,
    iter: usize,
) -> Result<()> {
    let n = k.nrows();
    let m = k.ncols();
    let wc: DVector<f64> = w.row(cls).transpose();
    let ac: DVector<f64> = alpha.row(cls).transpose();
    let penalty = |v: &DVector<f64>| -> f64 {
        -0.5 * v.iter().zip(ac.iter()).map(|(a, b)| a * a * b).sum::<f64>()
    };

    let mut resid = DVector::zeros(n);
    let mut curv = DVector::zeros(n);
    for i in 0..n {
        let row: Vec<f64> = f.row(i).iter().copied().collect();
        let p = softmax(&row)[cls];
        resid[i] = f64::from(u8::from(y[i] == cls)) - p;
        curv[i] = p * (1.0 - p);
    }
    let grad = k.transpose() * &resid - ac.component_mul(&wc);
    let mut kd = k.clone();
    for (i, mut r) in kd.row_iter_mut().enumerate() {
        r *= curv[i];
    }
    let mut h = k.transpose() * kd;
    for j in 0..m {
        h[(j, j)] += ac[j];
    }
    let step = match h.cholesky() {
        Some(ch) => ch.solve(&grad),
        None => grad.clone(),
    };
    if step.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteObjective(iter));
    }

    let current = loglik(f) + penalty(&wc);
    let old_scores = f.column(cls).clone_owned();
    let mut t = 1.0;
    for _ in 0..40 {
        let cand = &wc + &step * t;
        f.set_column(cls, &(k * &cand));
        let value = loglik(f) + penalty(&cand);
        if value >= current {
            w.set_row(cls, &cand.transpose());
            return Ok(());
        }
        t *= 0.5;
    }
    f.set_column(cls, &old_scores);
    Ok(())
}

/// Drops relevance vectors whose largest absolute weight over classes is
/// below `threshold`.
pub fn prune(model: &RvmModel, threshold: f64) -> Result<RvmModel> {
    if !(threshold >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "prune threshold {threshold} must be non-negative"
        )));
    }
    let keep: Vec<usize> = (0..model.n_relevance())
        .filter(|&j| model.weights.column(j).amax() >= threshold)
        .collect();
    if keep.is_empty() {
        return Err(Error::DegenerateModel);
    }
    Ok(RvmModel {
        relevance_vectors: model.relevance_vectors.select_rows(&keep),
        weights: model.weights.select_columns(&keep),
        precisions: model.precisions.select_columns(&keep),
        kernel: model.kernel,
        label_space: model.label_space.clone(),
        classes: model.classes.clone(),
        active_index: keep.iter().map(|&j| model.active_index[j]).collect(),
    })
}

/// Runs EM from `cfg.init_precision` and from ten times smaller and larger
/// starts, prunes each fit and keeps the one with the highest final
/// objective among those that keep at least one vector. Small training sets
/// make the objective multimodal, and a near-uniform fit that prunes to
/// nothing can outscore the sparse ones.
pub fn fit_pruned(
    train: &Dataset,
    kernel: &KernelSpec,
    hyper: &GammaHyper,
    cfg: &EmConfig,
    threshold: f64,
) -> Result<RvmModel> {
    let mut best: Option<(f64, RvmModel)> = None;
    let mut last_err = Error::DegenerateModel;
    for factor in [1.0, 0.1, 10.0] {
        let start = EmConfig {
            init_precision: cfg.init_precision * factor,
            ..*cfg
        };
        let (model, trace) = fit_em_traced(train, kernel, hyper, &start)?;
        let objective = trace.last().copied().unwrap_or(f64::NEG_INFINITY);
        match prune(&model, threshold) {
            Ok(m) if best.as_ref().is_none_or(|(b, _)| objective > *b) => {
                best = Some((objective, m))
            }
            Ok(_) => {}
            Err(e) => last_err = e,
        }
    }
    best.map(|(_, m)| m).ok_or(last_err)
}
