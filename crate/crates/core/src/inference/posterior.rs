//! Running chains over a [`DaRvmProblem`] and summarizing the draws.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::diagnostics::{effective_sample_size, quantile, split_rhat};
use super::model::{DaRvmProblem, Domain, ModelState};
use super::nuts::{run_chain, Adaptation, LogDensity, NutsSettings};
use crate::data::LabelSpace;
use crate::error::{Error, Result};
use crate::mapping::MappingParams;
use crate::rvm::{softmax, KernelSpec, RvmModel};

/// Settings of a posterior run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub warmup: usize,
    pub draws: usize,
    pub chains: usize,
    pub target_accept: f64,
    pub max_depth: usize,
    pub seed: u64,
    /// Hold the precisions at their EM values instead of sampling them.
    pub freeze_precisions: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            warmup: 1000,
            draws: 1000,
            chains: 1,
            target_accept: 0.8,
            max_depth: 10,
            seed: 0,
            freeze_precisions: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.draws == 0 || self.chains == 0 || self.max_depth == 0 {
            return Err(Error::Config(
                "draws, chains and max_depth must be at least 1".into(),
            ));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::Config("target_accept must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Where a later run starts: the previous posterior mean and the adapted
/// step size and metric of each chain.
#[derive(Clone, Debug)]
pub struct WarmStart {
    pub state: ModelState,
    pub adaptation: Vec<Adaptation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub divergences: usize,
    pub warmup_divergences: usize,
    pub mean_accept: f64,
    pub mean_leapfrog: f64,
    pub max_depth_hits: usize,
    pub step_sizes: Vec<f64>,
    /// Split R-hat per constrained parameter, present with several chains.
    pub rhat: Option<Vec<f64>>,
    pub warnings: Vec<String>,
}

/// Retained draws of one posterior run with what is needed to predict.
#[derive(Clone, Debug)]
pub struct PosteriorSet {
    pub draws: Vec<ModelState>,
    pub diagnostics: Diagnostics,
    pub chains: usize,
    pub relevance_vectors: DMatrix<f64>,
    pub kernel: KernelSpec,
    /// Label-space ids of the modelled classes, in weight-row order.
    pub classes: Vec<usize>,
    pub label_space: LabelSpace,
    adaptation: Vec<Adaptation>,
}

/// Draws from the joint posterior, starting at `init` or at the warm start.
pub fn sample_posterior(
    problem: &DaRvmProblem,
    rvm: &RvmModel,
    init: &ModelState,
    config: &SamplerConfig,
    warm: Option<&WarmStart>,
) -> Result<PosteriorSet> {
    config.validate()?;
    let start = warm.map(|w| &w.state).unwrap_or(init);
    let q0 = problem.to_unconstrained(start)?;
    let mut g = vec![0.0; q0.len()];
    let lp0 = problem.logp_and_grad(&q0, &mut g)?;
    if !lp0.is_finite() {
        return Err(Error::NonFiniteInitialDensity);
    }
    let settings = NutsSettings {
        warmup: config.warmup,
        draws: config.draws,
        target_accept: config.target_accept,
        max_depth: config.max_depth,
        adapt_metric: true,
    };
    let outputs: Vec<_> = (0..config.chains)
        .into_par_iter()
        .map(|chain| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(chain as u64);
            let adapt = warm.and_then(|w| w.adaptation.get(chain));
            run_chain(problem, &q0, &settings, adapt, &mut rng)
        })
        .collect::<Result<_>>()?;

    let mut draws = Vec::with_capacity(config.draws * config.chains);
    let mut accept = 0.0;
    let mut n_stats = 0usize;
    let mut divergences = 0;
    let mut warmup_divergences = 0;
    let mut max_depth_hits = 0;
    let mut leapfrogs = 0;
    for out in &outputs {
        warmup_divergences += out.warmup_divergences;
        for (q, st) in out.draws.iter().zip(&out.stats) {
            draws.push(problem.from_unconstrained(q));
            accept += st.accept_stat;
            n_stats += 1;
            divergences += usize::from(st.divergent);
            max_depth_hits += usize::from(st.depth >= config.max_depth);
            leapfrogs += st.n_leapfrog;
        }
    }
    let mut warnings = Vec::new();
    if divergences * 10 > n_stats {
        warnings.push(format!(
            "{divergences} of {n_stats} retained transitions diverged"
        ));
        log::warn!("{}", warnings.last().unwrap());
    }
    let mut post = PosteriorSet {
        draws,
        diagnostics: Diagnostics {
            divergences,
            warmup_divergences,
            mean_accept: accept / n_stats.max(1) as f64,
            mean_leapfrog: leapfrogs as f64 / n_stats.max(1) as f64,
            max_depth_hits,
            step_sizes: outputs.iter().map(|o| o.adaptation.step_size).collect(),
            rhat: None,
            warnings,
        },
        chains: config.chains,
        relevance_vectors: rvm.relevance_vectors.clone(),
        kernel: rvm.kernel,
        classes: rvm.classes.clone(),
        label_space: rvm.label_space.clone(),
        adaptation: outputs.into_iter().map(|o| o.adaptation).collect(),
    };
    if post.chains > 1 {
        let series = post.parameter_series();
        let rhat: Vec<f64> = series
            .iter()
            .map(|s| split_rhat(&post.split_chains(s)))
            .collect();
        if let Some(worst) = rhat
            .iter()
            .copied()
            .filter(|r| r.is_finite())
            .reduce(f64::max)
        {
            if worst > 1.05 {
                post.diagnostics
                    .warnings
                    .push(format!("largest split R-hat is {worst:.3}"));
            }
        }
        post.diagnostics.rhat = Some(rhat);
    }
    Ok(post)
}

/// Flattens a state as scale, translation, rotation, weights and precisions
/// (both row-major).
fn flatten(state: &ModelState) -> Vec<f64> {
    let m = &state.mapping;
    let mut v = Vec::new();
    v.extend_from_slice(&m.scale);
    v.extend_from_slice(&m.translation);
    v.extend_from_slice(&m.rotation);
    v.extend(state.weights.transpose().iter());
    v.extend(state.precisions.transpose().iter());
    v
}

impl PosteriorSet {
    /// A posterior made of the given states, for plug-in use.
    pub fn from_states(rvm: &RvmModel, draws: Vec<ModelState>) -> Result<Self> {
        if draws.is_empty() {
            return Err(Error::EmptyPosterior);
        }
        Ok(Self {
            draws,
            diagnostics: Diagnostics {
                divergences: 0,
                warmup_divergences: 0,
                mean_accept: f64::NAN,
                mean_leapfrog: f64::NAN,
                max_depth_hits: 0,
                step_sizes: Vec::new(),
                rhat: None,
                warnings: Vec::new(),
            },
            chains: 1,
            relevance_vectors: rvm.relevance_vectors.clone(),
            kernel: rvm.kernel,
            classes: rvm.classes.clone(),
            label_space: rvm.label_space.clone(),
            adaptation: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.relevance_vectors.ncols()
    }

    pub fn parameter_names(&self) -> Vec<String> {
        let Some(first) = self.draws.first() else {
            return Vec::new();
        };
        let m = &first.mapping;
        let (c, nr) = first.weights.shape();
        let mut names = Vec::new();
        names.extend((0..m.scale.len()).map(|i| format!("scale[{i}]")));
        names.extend((0..m.translation.len()).map(|i| format!("translation[{i}]")));
        names.extend((0..m.rotation.len()).map(|i| format!("rotation[{i}]")));
        for prefix in ["w", "alpha"] {
            for ci in 0..c {
                names.extend((0..nr).map(|j| format!("{prefix}[{ci},{j}]")));
            }
        }
        names
    }

    /// One series per constrained parameter, in draw order.
    pub fn parameter_series(&self) -> Vec<Vec<f64>> {
        let flat: Vec<Vec<f64>> = self.draws.iter().map(flatten).collect();
        let n = flat.first().map_or(0, Vec::len);
        (0..n)
            .map(|k| flat.iter().map(|row| row[k]).collect())
            .collect()
    }

    fn split_chains<'a>(&self, series: &'a [f64]) -> Vec<&'a [f64]> {
        let per = series.len() / self.chains.max(1);
        series.chunks(per.max(1)).collect()
    }

    /// Componentwise posterior mean of every latent variable.
    pub fn mean_state(&self) -> Result<ModelState> {
        let first = self.draws.first().ok_or(Error::EmptyPosterior)?;
        let n = self.draws.len() as f64;
        let mut mean = first.clone();
        let avg = |f: &dyn Fn(&ModelState) -> f64| self.draws.iter().map(f).sum::<f64>() / n;
        for i in 0..mean.mapping.scale.len() {
            mean.mapping.scale[i] = avg(&|s| s.mapping.scale[i]);
            mean.mapping.translation[i] = avg(&|s| s.mapping.translation[i]);
        }
        for k in 0..mean.mapping.rotation.len() {
            mean.mapping.rotation[k] = avg(&|s| s.mapping.rotation[k]);
        }
        mean.weights = self.draws.iter().fold(
            DMatrix::zeros(first.weights.nrows(), first.weights.ncols()),
            |acc, s| acc + &s.weights,
        ) / n;
        mean.precisions = self.draws.iter().fold(
            DMatrix::zeros(first.precisions.nrows(), first.precisions.ncols()),
            |acc, s| acc + &s.precisions,
        ) / n;
        Ok(mean)
    }

    /// Starting point for a later run on an extended data set.
    pub fn warm_start(&self) -> Result<WarmStart> {
        Ok(WarmStart {
            state: self.mean_state()?,
            adaptation: self.adaptation.clone(),
        })
    }

    /// Effective sample size of every constrained parameter.
    pub fn ess(&self) -> Vec<f64> {
        self.parameter_series()
            .iter()
            .map(|s| effective_sample_size(&self.split_chains(s)))
            .collect()
    }

    /// Per-parameter mean, standard deviation, quantiles, ESS and R-hat.
    pub fn summary(&self) -> Vec<ParameterSummary> {
        let names = self.parameter_names();
        let series = self.parameter_series();
        let ess = self.ess();
        series
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let n = s.len() as f64;
                let mean = s.iter().sum::<f64>() / n;
                let var = if s.len() > 1 {
                    s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
                } else {
                    0.0
                };
                let mut sorted = s.clone();
                sorted.sort_by(f64::total_cmp);
                ParameterSummary {
                    name: names[k].clone(),
                    mean,
                    sd: var.sqrt(),
                    q05: quantile(&sorted, 0.05),
                    q50: quantile(&sorted, 0.5),
                    q95: quantile(&sorted, 0.95),
                    ess: ess[k],
                    rhat: self.diagnostics.rhat.as_ref().map(|r| r[k]),
                }
            })
            .collect()
    }

    pub fn summary_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Doc<'a> {
            draws: usize,
            chains: usize,
            diagnostics: &'a Diagnostics,
            parameters: Vec<ParameterSummary>,
        }
        let doc = Doc {
            draws: self.draws.len(),
            chains: self.chains,
            diagnostics: &self.diagnostics,
            parameters: self.summary(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub q05: f64,
    pub q50: f64,
    pub q95: f64,
    pub ess: f64,
    pub rhat: Option<f64>,
}

/// Monte Carlo predictive distribution over the modelled classes.
pub fn posterior_predictive(post: &PosteriorSet, x: &[f64], domain: Domain) -> Result<Vec<f64>> {
    Ok(
        posterior_predictive_batch(post, &DMatrix::from_row_slice(1, x.len(), x), domain)?
            .row(0)
            .iter()
            .copied()
            .collect(),
    )
}

/// [`posterior_predictive`] for every row of `x`.
pub fn posterior_predictive_batch(
    post: &PosteriorSet,
    x: &DMatrix<f64>,
    domain: Domain,
) -> Result<DMatrix<f64>> {
    if post.is_empty() {
        return Err(Error::EmptyPosterior);
    }
    if x.ncols() != post.dim() {
        return Err(Error::DimensionMismatch {
            expected: post.dim(),
            found: x.ncols(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite features".into()));
    }
    let c = post.classes.len();
    let nr = post.relevance_vectors.nrows();
    let d = post.dim();
    let mut out = DMatrix::zeros(x.nrows(), c);
    // the source-side kernel does not depend on the draw
    let fixed_k = match domain {
        Domain::Source => Some(kernel_rows(x, &post.relevance_vectors, &post.kernel)),
        Domain::Target => None,
    };
    let mut mapped = vec![0.0; d];
    for state in &post.draws {
        let k = match &fixed_k {
            Some(k) => k.clone(),
            None => {
                let compiled = state.mapping.compile()?;
                let mut xm = DMatrix::zeros(x.nrows(), d);
                for i in 0..x.nrows() {
                    let row: Vec<f64> = x.row(i).iter().copied().collect();
                    compiled.apply_row(&row, &mut mapped);
                    for p in 0..d {
                        xm[(i, p)] = mapped[p];
                    }
                }
                kernel_rows(&xm, &post.relevance_vectors, &post.kernel)
            }
        };
        let scores = &k * state.weights.transpose();
        for i in 0..x.nrows() {
            let z: Vec<f64> = scores.row(i).iter().copied().collect();
            let p = softmax(&z);
            for ci in 0..c {
                out[(i, ci)] += p[ci];
            }
        }
        debug_assert_eq!(k.ncols(), nr);
    }
    Ok(out / post.draws.len() as f64)
}

fn kernel_rows(x: &DMatrix<f64>, rv: &DMatrix<f64>, kernel: &KernelSpec) -> DMatrix<f64> {
    let mut k = DMatrix::zeros(x.nrows(), rv.nrows());
    for i in 0..x.nrows() {
        let xi: Vec<f64> = x.row(i).iter().copied().collect();
        for j in 0..rv.nrows() {
            let rj: Vec<f64> = rv.row(j).iter().copied().collect();
            k[(i, j)] = kernel.eval(&xi, &rj);
        }
    }
    k
}

/// Componentwise posterior mean of the mapping.
pub fn expected_mapping(post: &PosteriorSet) -> Result<MappingParams> {
    Ok(post.mean_state()?.mapping)
}

/// Label-space id of the most probable modelled class.
pub fn predict_labels(post: &PosteriorSet, x: &DMatrix<f64>, domain: Domain) -> Result<Vec<usize>> {
    let p = posterior_predictive_batch(post, x, domain)?;
    Ok((0..p.nrows())
        .map(|i| {
            let row: Vec<f64> = p.row(i).iter().copied().collect();
            post.classes[crate::rvm::argmax(&row)]
        })
        .collect())
}
