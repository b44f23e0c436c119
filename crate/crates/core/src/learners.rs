//! Concrete learners for the stream loop: the domain-adapted posterior and
//! an RVM trained on target labels alone.

use nalgebra::DMatrix;

use crate::active::Learner;
use crate::data::{Dataset, LabelSpace, Observation};
use crate::error::{Error, Result};
use crate::inference::{
    posterior_predictive, predict_labels, sample_posterior, DaRvmProblem, Domain, PosteriorSet,
    SamplerConfig, WarmStart,
};
use crate::mapping::{Frame, MappingPrior};
use crate::rvm::{fit_pruned, predict_proba, EmConfig, GammaHyper, KernelSpec, RvmModel};

fn expand(classes: &[usize], p: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for (&c, &v) in classes.iter().zip(p) {
        out[c] = v;
    }
    out
}

fn framed_target(frame: &Frame, ds: &Dataset) -> Result<Dataset> {
    if ds.is_empty() {
        return Ok(ds.clone());
    }
    ds.with_features(&frame.target_rows(&ds.features())?)
}

fn draw(
    rvm: &RvmModel,
    source: &Dataset,
    target: &Dataset,
    prior: &MappingPrior,
    settings: &DaSettings,
    warm: Option<&WarmStart>,
    offset: u64,
) -> Result<PosteriorSet> {
    let mut cfg = match warm {
        Some(_) => settings.refit.clone(),
        None => settings.initial.clone(),
    };
    let problem = DaRvmProblem::new(
        rvm,
        source,
        target,
        prior,
        &settings.hyper,
        cfg.freeze_precisions,
    )?;
    let init = problem.initial_state(rvm);
    cfg.seed = cfg.seed.wrapping_add(offset);
    sample_posterior(&problem, rvm, &init, &cfg, warm)
}

/// Settings of the posterior refits.
#[derive(Clone, Debug)]
pub struct DaSettings {
    pub hyper: GammaHyper,
    /// Sampler used for the first posterior.
    pub initial: SamplerConfig,
    /// Sampler used for warm-started refits.
    pub refit: SamplerConfig,
}

/// Learner backed by posterior draws of the joint mapping and classifier.
#[derive(Clone, Debug)]
pub struct DaLearner {
    frame: Frame,
    rvm: RvmModel,
    source: Dataset,
    prior: MappingPrior,
    settings: DaSettings,
    labelled: Vec<Observation>,
    template: Dataset,
    post: PosteriorSet,
    refits: u64,
}

impl DaLearner {
    /// `source` is in the model frame, `initial` holds raw labelled target
    /// observations.
    pub fn new(
        frame: Frame,
        rvm: RvmModel,
        source: Dataset,
        prior: MappingPrior,
        initial: &Dataset,
        settings: DaSettings,
    ) -> Result<Self> {
        let template = initial.derive(Vec::new())?;
        let labelled = framed_target(&frame, initial)?.into_observations();
        let post = draw(
            &rvm,
            &source,
            &template.derive(labelled.clone())?,
            &prior,
            &settings,
            None,
            0,
        )?;
        Ok(Self {
            frame,
            rvm,
            source,
            prior,
            settings,
            labelled,
            template,
            post,
            refits: 0,
        })
    }

    pub fn posterior(&self) -> &PosteriorSet {
        &self.post
    }

    pub fn frame(&self) -> &Frame {
        &self.frame
    }

    pub fn rvm(&self) -> &RvmModel {
        &self.rvm
    }
}

impl Learner for DaLearner {
    fn label_space(&self) -> &LabelSpace {
        &self.rvm.label_space
    }

    fn classes(&self) -> Vec<usize> {
        self.rvm.classes.clone()
    }

    fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        let row = self
            .frame
            .target_rows(&DMatrix::from_row_slice(1, x.len(), x))?;
        let xs: Vec<f64> = row.iter().copied().collect();
        let p = posterior_predictive(&self.post, &xs, Domain::Target)?;
        Ok(expand(&self.rvm.classes, &p, self.rvm.label_space.len()))
    }

    fn predict_labels(&self, x: &Dataset) -> Result<Vec<usize>> {
        predict_labels(
            &self.post,
            &self.frame.target_rows(&x.features())?,
            Domain::Target,
        )
    }

    fn observe(&mut self, mut obs: Observation) {
        match obs.label {
            Some(l) if self.rvm.class_position(l).is_some() => {
                let row = DMatrix::from_row_slice(1, obs.features.len(), &obs.features);
                match self.frame.target_rows(&row) {
                    Ok(r) => {
                        obs.features = r.iter().copied().collect();
                        self.labelled.push(obs);
                    }
                    Err(e) => log::warn!("observation {} not framed: {e}", obs.seq),
                }
            }
            _ => log::warn!(
                "observation {} has a class the classifier does not model; not used",
                obs.seq
            ),
        }
    }

    fn refit(&mut self) -> Result<()> {
        self.refits += 1;
        let warm = self.post.warm_start()?;
        self.post = draw(
            &self.rvm,
            &self.source,
            &self.template.derive(self.labelled.clone())?,
            &self.prior,
            &self.settings,
            Some(&warm),
            self.refits,
        )?;
        Ok(())
    }

    fn n_labelled(&self) -> usize {
        self.labelled.len()
    }
}

/// An RVM trained by multi-start EM on the labelled target observations
/// only.
#[derive(Clone, Debug)]
pub struct TargetRvmLearner {
    frame: Frame,
    kernel: KernelSpec,
    hyper: GammaHyper,
    em: EmConfig,
    prune_threshold: f64,
    labelled: Dataset,
    model: RvmModel,
}

impl TargetRvmLearner {
    /// Trains on the raw labelled target observations in `initial`, which
    /// must cover at least two classes.
    pub fn new(
        frame: Frame,
        kernel: KernelSpec,
        hyper: GammaHyper,
        em: EmConfig,
        prune_threshold: f64,
        initial: &Dataset,
    ) -> Result<Self> {
        let labelled = framed_target(&frame, initial)?;
        let model = fit_pruned(&labelled, &kernel, &hyper, &em, prune_threshold)?;
        Ok(Self {
            frame,
            kernel,
            hyper,
            em,
            prune_threshold,
            labelled,
            model,
        })
    }

    pub fn model(&self) -> &RvmModel {
        &self.model
    }
}

impl Learner for TargetRvmLearner {
    fn label_space(&self) -> &LabelSpace {
        &self.model.label_space
    }

    fn classes(&self) -> Vec<usize> {
        self.model.classes.clone()
    }

    fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        let row = self
            .frame
            .target_rows(&DMatrix::from_row_slice(1, x.len(), x))?;
        let xs: Vec<f64> = row.iter().copied().collect();
        let p = predict_proba(&self.model, &xs)?;
        Ok(expand(
            &self.model.classes,
            &p,
            self.model.label_space.len(),
        ))
    }

    fn predict_labels(&self, x: &Dataset) -> Result<Vec<usize>> {
        let rows = self.frame.target_rows(&x.features())?;
        (0..rows.nrows())
            .map(|i| {
                let xs: Vec<f64> = rows.row(i).iter().copied().collect();
                crate::rvm::predict_label(&self.model, &xs)
            })
            .collect()
    }

    fn observe(&mut self, obs: Observation) {
        let row = DMatrix::from_row_slice(1, obs.features.len(), &obs.features);
        match self.frame.target_rows(&row) {
            Ok(r) => {
                let mut all = self.labelled.observations().to_vec();
                all.push(Observation {
                    features: r.iter().copied().collect(),
                    ..obs
                });
                match self.labelled.derive(all) {
                    Ok(ds) => self.labelled = ds,
                    Err(e) => log::warn!("observation not added: {e}"),
                }
            }
            Err(e) => log::warn!("observation {} not framed: {e}", obs.seq),
        }
    }

    fn refit(&mut self) -> Result<()> {
        self.model = fit_pruned(
            &self.labelled,
            &self.kernel,
            &self.hyper,
            &self.em,
            self.prune_threshold,
        )?;
        Ok(())
    }

    fn n_labelled(&self) -> usize {
        self.labelled.len()
    }
}

/// Macro-F1 of a fixed RVM on raw target rows passed through `transform`.
pub fn static_f1(
    rvm: &RvmModel,
    test: &Dataset,
    transform: impl Fn(&DMatrix<f64>) -> Result<DMatrix<f64>>,
) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let rows = transform(&test.features())?;
    let pred = (0..rows.nrows())
        .map(|i| {
            let xs: Vec<f64> = rows.row(i).iter().copied().collect();
            crate::rvm::predict_label(rvm, &xs)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(crate::eval::macro_f1(&pred, &test.labels()?, &rvm.label_space)?.macro_f1)
}
