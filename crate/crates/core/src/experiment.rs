//! Multi-repeat experiments: configuration, the per-repeat protocol and the
//! files a run leaves behind.
//!
//! A run directory holds `config.toml` (the resolved configuration, with
//! the output directory written as `.`), one
//! subdirectory per strategy with `repeat_NNN.csv` trajectories plus
//! `aggregate.csv`/`aggregate.json`, `features/repeat_NNN.csv` dumps of the
//! source and the posterior-mapped target, `repeats.json` and `summary.json`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::active::{run_random, run_stream, take_initial, Learner, StreamConfig, TruthOracle};
use crate::data::{
    load_dataset, order_stream, select_normal_condition, stratified_split, write_dataset, Dataset,
    DatasetSchema, LabelSpace, Observation, SingletonPolicy, StreamLayout, StreamPlan, TempWindow,
};
use crate::error::{Error, Result};
use crate::eval::{aggregate_repeats, jmmd, Band, Bandwidth, RepeatSummary};
use crate::inference::{
    expected_mapping, predict_labels, sample_posterior, DaRvmProblem, Domain, SamplerConfig,
};
use crate::learners::{static_f1, DaLearner, DaSettings, TargetRvmLearner};
use crate::mapping::{Frame, MappingParams, MappingPrior, NormalStats, PriorWidths};
use crate::rvm::{fit_pruned, EmConfig, GammaHyper, KernelSpec, RvmModel};
use crate::synthetic::{generate_population, SyntheticSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// The default population in `dim` features, or a full `spec`.
    Synthetic {
        #[serde(default)]
        dim: Option<usize>,
        #[serde(default)]
        seed: Option<u64>,
        #[serde(default)]
        spec: Option<SyntheticSpec>,
    },
    Files {
        source: PathBuf,
        target: PathBuf,
        classes: Vec<String>,
        #[serde(default)]
        merge_groups: Vec<Vec<String>>,
        /// Empty means every `f<k>` column.
        #[serde(default)]
        feature_columns: Vec<String>,
    },
}

impl DataSource {
    pub fn synthetic_spec(&self) -> Option<SyntheticSpec> {
        match self {
            DataSource::Synthetic { dim, seed, spec } => {
                let mut spec = spec
                    .clone()
                    .unwrap_or_else(|| SyntheticSpec::with_dim(dim.unwrap_or(2)));
                if let Some(s) = seed {
                    spec.seed = *s;
                }
                Some(spec)
            }
            DataSource::Files { .. } => None,
        }
    }

    /// Source, target and the ground-truth mapping when it is known.
    pub fn load(&self) -> Result<(Dataset, Dataset, Option<MappingParams>)> {
        match self {
            DataSource::Synthetic { .. } => {
                let spec = self.synthetic_spec().expect("synthetic source");
                let (s, t, truth) = generate_population(&spec)?;
                Ok((s, t, Some(truth)))
            }
            DataSource::Files {
                source,
                target,
                classes,
                merge_groups,
                feature_columns,
            } => {
                let space = LabelSpace::from_names(classes, merge_groups)?;
                let schema = |id: &str| DatasetSchema {
                    feature_columns: feature_columns.clone(),
                    ..DatasetSchema::standard(id, space.clone())
                };
                Ok((
                    load_dataset(source, &schema("source"))?,
                    load_dataset(target, &schema("target"))?,
                    None,
                ))
            }
        }
    }
}

/// Class roles of the stream, by name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayoutConfig {
    pub normal: Vec<String>,
    pub steady: String,
    pub scenarios: Vec<Vec<String>>,
}

impl Default for LayoutConfig {
    fn default() -> Self {
        Self {
            normal: vec!["ambient".into(), "freezing".into()],
            steady: "ambient".into(),
            scenarios: vec![
                vec!["damage1".into(), "damage2".into()],
                vec!["damage1".into(), "damage3".into()],
            ],
        }
    }
}

impl LayoutConfig {
    pub fn resolve(&self, space: &LabelSpace) -> Result<StreamLayout> {
        let one = |n: &String| {
            space
                .index_of(n)
                .ok_or_else(|| Error::Config(format!("unknown class `{n}` in stream layout")))
        };
        Ok(StreamLayout {
            normal: self.normal.iter().map(one).collect::<Result<_>>()?,
            steady: one(&self.steady)?,
            scenarios: self
                .scenarios
                .iter()
                .map(|s| s.iter().map(one).collect())
                .collect::<Result<_>>()?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Domain-adapted posterior with entropy queries.
    DaRvm,
    /// RVM on target labels only, entropy queries.
    TargetOnly,
    /// Domain-adapted posterior, random queries matched to `da_rvm`'s count.
    Random,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::DaRvm => "da_rvm",
            Strategy::TargetOnly => "target_only",
            Strategy::Random => "random",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub split_ratio: f64,
    pub singleton_policy: SingletonPolicy,
    pub repeats: usize,
    /// Normal-condition target labels available before the stream starts.
    pub n_initial: usize,
    pub temp_window: Option<TempWindow>,
    pub layout: LayoutConfig,
    /// Seed class and count of extra labels the target-only RVM needs.
    pub target_init_class: String,
    pub target_init_count: usize,
    pub prior: PriorWidths,
    /// Kernel bandwidth; defaults to `1 / d`.
    pub kernel_bandwidth: Option<f64>,
    pub hyper: GammaHyper,
    pub em: EmConfig,
    pub prune_threshold: f64,
    pub sampler: SamplerConfig,
    pub refit_sampler: SamplerConfig,
    pub stream: StreamConfig,
    pub strategies: Vec<Strategy>,
    pub output_dir: PathBuf,
    pub master_seed: u64,
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataSource::Synthetic {
                dim: None,
                seed: None,
                spec: None,
            },
            split_ratio: 0.8,
            singleton_policy: SingletonPolicy::Train,
            repeats: 20,
            n_initial: 20,
            temp_window: Some(TempWindow::above(0.0)),
            layout: LayoutConfig::default(),
            target_init_class: "damage1".into(),
            target_init_count: 3,
            prior: PriorWidths::default(),
            kernel_bandwidth: None,
            hyper: GammaHyper::default(),
            em: EmConfig::default(),
            prune_threshold: 1e-5,
            sampler: SamplerConfig {
                warmup: 500,
                draws: 500,
                freeze_precisions: true,
                ..SamplerConfig::default()
            },
            refit_sampler: SamplerConfig {
                warmup: 100,
                draws: 100,
                freeze_precisions: true,
                ..SamplerConfig::default()
            },
            stream: StreamConfig::default(),
            strategies: vec![Strategy::DaRvm, Strategy::TargetOnly, Strategy::Random],
            output_dir: PathBuf::from("runs/default"),
            master_seed: 0,
            workers: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::Config("split_ratio must lie in (0, 1)".into()));
        }
        if self.n_initial < 2 {
            return Err(Error::Config("n_initial must be at least 2".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if self.strategies.is_empty() {
            return Err(Error::Config("no strategy enabled".into()));
        }
        if self.strategies.contains(&Strategy::Random)
            && !self.strategies.contains(&Strategy::DaRvm)
        {
            return Err(Error::Config(
                "the random strategy matches da_rvm's query count and needs it enabled".into(),
            ));
        }
        if let Some(h) = self.kernel_bandwidth {
            KernelSpec::gaussian(h).map_err(|e| Error::Config(e.to_string()))?;
        }
        if !(self.prune_threshold >= 0.0) {
            return Err(Error::Config("prune_threshold must be non-negative".into()));
        }
        GammaHyper::new(self.hyper.a, self.hyper.b).map_err(|e| Error::Config(e.to_string()))?;
        self.sampler.validate()?;
        self.refit_sampler.validate()?;
        let probe = MappingPrior::centered_at(&MappingParams::identity(1), &self.prior);
        probe.map_err(|e| Error::Config(format!("mapping prior: {e}")))?;
        if let Some(spec) = self.data.synthetic_spec() {
            spec.validate().map_err(|e| Error::Config(e.to_string()))?;
            let space = spec.label_space()?;
            self.layout.resolve(&space)?;
            self.target_init_class_id(&space)?;
        }
        Ok(())
    }

    fn target_init_class_id(&self, space: &LabelSpace) -> Result<usize> {
        space
            .index_of(&self.target_init_class)
            .ok_or_else(|| Error::Config(format!("unknown class `{}`", self.target_init_class)))
    }

    pub fn kernel(&self, d: usize) -> Result<KernelSpec> {
        match self.kernel_bandwidth {
            Some(h) => KernelSpec::gaussian(h),
            None => Ok(KernelSpec::for_dim(d)),
        }
    }

    /// Seed of repeat `r`, independent of the worker count.
    pub fn repeat_seed(&self, r: usize) -> u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(r as u64);
        rng.next_u64()
    }
}

/// Everything a repeat's strategies share: the split, the stream, the
/// initial labels and the source classifier in the model frame.
#[derive(Clone, Debug)]
pub struct RepeatSetup {
    pub seed: u64,
    pub source_train: Dataset,
    pub source_test: Dataset,
    pub target_train: Dataset,
    pub target_test: Dataset,
    /// Target training observations in presentation order, initial labels
    /// removed.
    pub stream: Vec<Observation>,
    pub initial: Dataset,
    pub frame: Frame,
    /// Source training set in the model frame.
    pub source_framed: Dataset,
    pub rvm: RvmModel,
    pub prior: MappingPrior,
}

fn normal_stats(ds: &Dataset) -> Result<NormalStats> {
    if ds.len() < 2 {
        return Err(Error::InvalidInput(
            "normal-condition statistics need at least two observations".into(),
        ));
    }
    NormalStats::from_rows(&ds.features())
}

fn sub_seed(seed: u64, tag: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng.next_u64()
}

impl RepeatSetup {
    pub fn new(
        cfg: &ExperimentConfig,
        source: &Dataset,
        target: &Dataset,
        repeat: usize,
    ) -> Result<Self> {
        let seed = cfg.repeat_seed(repeat);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (source_train, source_test) =
            stratified_split(source, cfg.split_ratio, &mut rng, cfg.singleton_policy)?;
        let (target_train, target_test) =
            stratified_split(target, cfg.split_ratio, &mut rng, cfg.singleton_policy)?;
        let layout = cfg.layout.resolve(target.label_space())?;
        let plan = StreamPlan::cycles(&target_train, &layout)?;
        let ordered = target_train.derive(order_stream(&target_train, &plan, &mut rng)?)?;
        let initial =
            select_normal_condition(&ordered, cfg.n_initial, cfg.temp_window, &layout.normal)?;
        let taken: Vec<usize> = initial.observations().iter().map(|o| o.seq).collect();
        let stream = ordered
            .into_observations()
            .into_iter()
            .filter(|o| !taken.contains(&o.seq))
            .collect();

        let source_normal = source_train
            .of_classes(&layout.normal)
            .filter(|o| cfg.temp_window.is_none_or(|w| w.contains(o.temperature)));
        let frame = Frame::from_normal(&normal_stats(&source_normal)?, &normal_stats(&initial)?)?;
        let source_framed =
            source_train.with_features(&frame.source_rows(&source_train.features())?)?;
        let kernel = cfg.kernel(source.dim())?;
        let rvm = fit_pruned(
            &source_framed,
            &kernel,
            &cfg.hyper,
            &cfg.em,
            cfg.prune_threshold,
        )?;
        let framed_normal = normal_stats(
            &source_normal.with_features(&frame.source_rows(&source_normal.features())?)?,
        )?;
        let framed_initial =
            normal_stats(&initial.with_features(&frame.target_rows(&initial.features())?)?)?;
        let prior = MappingPrior::from_nca(&framed_normal, &framed_initial, &cfg.prior)?;
        Ok(Self {
            seed,
            source_train,
            source_test,
            target_train,
            target_test,
            stream,
            initial,
            frame,
            source_framed,
            rvm,
            prior,
        })
    }

    pub fn da_settings(&self, cfg: &ExperimentConfig, tag: u64) -> DaSettings {
        let seed = sub_seed(self.seed, tag);
        DaSettings {
            hyper: cfg.hyper,
            initial: SamplerConfig {
                seed,
                ..cfg.sampler.clone()
            },
            refit: SamplerConfig {
                seed: seed.wrapping_add(1),
                ..cfg.refit_sampler.clone()
            },
        }
    }

    pub fn da_learner(&self, cfg: &ExperimentConfig, tag: u64) -> Result<DaLearner> {
        DaLearner::new(
            self.frame.clone(),
            self.rvm.clone(),
            self.source_framed.clone(),
            self.prior.clone(),
            &self.initial,
            self.da_settings(cfg, tag),
        )
    }

    /// The target-only learner and its stream, with the seed labels taken
    /// out of the stream.
    pub fn target_only(
        &self,
        cfg: &ExperimentConfig,
    ) -> Result<(TargetRvmLearner, Vec<Observation>, Vec<usize>)> {
        let class = cfg.target_init_class_id(self.target_train.label_space())?;
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(self.seed, 3));
        let (picked, rest) = take_initial(&self.stream, class, cfg.target_init_count, &mut rng)?;
        let init_labels = picked.iter().filter_map(|o| o.label).collect();
        let mut labelled = self.initial.observations().to_vec();
        labelled.extend(picked);
        let learner = TargetRvmLearner::new(
            self.frame.clone(),
            cfg.kernel(self.target_train.dim())?,
            cfg.hyper,
            cfg.em,
            cfg.prune_threshold,
            &self.target_train.derive(labelled)?,
        )?;
        Ok((learner, rest, init_labels))
    }

    /// Test macro-F1 of the source classifier on target data standardized as
    /// if it were source data.
    pub fn source_only_f1(&self) -> Result<f64> {
        static_f1(&self.rvm, &self.target_test, |x| self.frame.source_rows(x))
    }

    /// Test macro-F1 of the source classifier after the NCA map.
    pub fn nca_f1(&self) -> Result<f64> {
        let map = self.prior.location().compile()?;
        static_f1(&self.rvm, &self.target_test, |x| {
            map.apply(&self.frame.target_rows(x)?)
        })
    }

    /// Source (train and test) in the model frame.
    pub fn source_all_framed(&self) -> Result<Dataset> {
        let all = concat(&self.source_train, &self.source_test)?;
        all.with_features(&self.frame.source_rows(&all.features())?)
    }

    /// Target (train and test) mapped into the source frame by a mapping
    /// expressed in the model frame.
    pub fn target_all_mapped(&self, framed: &MappingParams) -> Result<Dataset> {
        let all = concat(&self.target_train, &self.target_test)?;
        let map = framed.compile()?;
        all.with_features(&map.apply(&self.frame.target_rows(&all.features())?)?)
    }

    /// Target (train and test) mapped by a raw-space mapping.
    pub fn target_all_raw_mapped(&self, raw: &MappingParams) -> Result<Dataset> {
        self.target_all_mapped(&self.frame.to_frame(raw)?)
    }
}

fn concat(a: &Dataset, b: &Dataset) -> Result<Dataset> {
    let mut obs = a.observations().to_vec();
    obs.extend_from_slice(b.observations());
    a.derive(obs)
}

/// Macro-F1 on the full target test set of a DA posterior and of a
/// target-only RVM, both trained with the target training labels of
/// `classes` only.
pub fn restricted_label_comparison(
    cfg: &ExperimentConfig,
    setup: &RepeatSetup,
    classes: &[usize],
) -> Result<(f64, f64)> {
    let labelled = setup.target_train.of_classes(classes);
    let framed = labelled.with_features(&setup.frame.target_rows(&labelled.features())?)?;
    let settings = setup.da_settings(cfg, 7);
    let problem = DaRvmProblem::new(
        &setup.rvm,
        &setup.source_framed,
        &framed,
        &setup.prior,
        &cfg.hyper,
        settings.initial.freeze_precisions,
    )?;
    let init = problem.initial_state(&setup.rvm);
    let post = sample_posterior(&problem, &setup.rvm, &init, &settings.initial, None)?;
    let test = &setup.target_test;
    let truth = test.labels()?;
    let da_pred = predict_labels(
        &post,
        &setup.frame.target_rows(&test.features())?,
        Domain::Target,
    )?;
    let da = crate::eval::macro_f1(&da_pred, &truth, test.label_space())?.macro_f1;
    let to = TargetRvmLearner::new(
        setup.frame.clone(),
        cfg.kernel(test.dim())?,
        cfg.hyper,
        cfg.em,
        cfg.prune_threshold,
        &labelled,
    )?;
    let to_pred = to.predict_labels(test)?;
    let to_f1 = crate::eval::macro_f1(&to_pred, &truth, test.label_space())?.macro_f1;
    Ok((da, to_f1))
}

/// JMMD of one repeat under several target mappings; the comparison is
/// always against the source in the model frame.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RepeatJmmd {
    /// Target standardized as if it were source data.
    pub unmapped: Option<f64>,
    pub nca: Option<f64>,
    /// Expected mapping of the final `da_rvm` posterior.
    pub posterior: Option<f64>,
    pub truth: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepeatRecord {
    pub repeat: usize,
    pub seed: u64,
    pub stream_len: usize,
    pub source_only_f1: Option<f64>,
    pub nca_f1: Option<f64>,
    pub jmmd: RepeatJmmd,
    /// Expected mapping of the final `da_rvm` posterior, in raw units.
    pub expected_mapping: Option<MappingParams>,
    pub errors: Vec<String>,
}

impl RepeatRecord {
    pub fn failed(&self) -> bool {
        !self.errors.is_empty()
    }
}

/// Everything produced by one repeat.
#[derive(Clone, Debug)]
pub struct RepeatOutcome {
    pub record: RepeatRecord,
    pub trajectories: Vec<crate::active::QueryTrajectory>,
    /// Source rows followed by mapped target rows.
    pub features: Option<String>,
}

fn jmmd_value(source: &Dataset, target: Result<Dataset>) -> Option<f64> {
    match target.and_then(|t| jmmd(source, &t, Bandwidth::Median)) {
        Ok(r) => Some(r.value),
        Err(e) => {
            log::warn!("joint MMD not computed: {e}");
            None
        }
    }
}

fn features_csv(source: &Dataset, target: &Dataset, train_len: (usize, usize)) -> Result<String> {
    let ser = |e: csv::Error| Error::Serialization(e.to_string());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec![
        "domain".to_string(),
        "split".into(),
        "seq".into(),
        "label".into(),
    ];
    header.extend((1..=source.dim()).map(|k| format!("f{k}")));
    w.write_record(&header).map_err(ser)?;
    for (ds, n_train) in [(source, train_len.0), (target, train_len.1)] {
        for (i, o) in ds.observations().iter().enumerate() {
            let mut rec = vec![
                ds.domain_id.clone(),
                if i < n_train { "train" } else { "test" }.to_string(),
                o.seq.to_string(),
                o.label
                    .map(|l| ds.label_space().name(l).to_string())
                    .unwrap_or_default(),
            ];
            rec.extend(o.features.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(ser)?;
        }
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Serialization(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Serialization(e.to_string()))
}

/// Runs every enabled strategy of one repeat. Stage failures are recorded
/// on the outcome rather than returned.
pub fn run_repeat(
    cfg: &ExperimentConfig,
    source: &Dataset,
    target: &Dataset,
    truth: Option<&MappingParams>,
    repeat: usize,
) -> RepeatOutcome {
    let mut record = RepeatRecord {
        repeat,
        seed: cfg.repeat_seed(repeat),
        stream_len: 0,
        source_only_f1: None,
        nca_f1: None,
        jmmd: RepeatJmmd::default(),
        expected_mapping: None,
        errors: Vec::new(),
    };
    let mut outcome = RepeatOutcome {
        record: record.clone(),
        trajectories: Vec::new(),
        features: None,
    };
    let setup = match RepeatSetup::new(cfg, source, target, repeat) {
        Ok(s) => s,
        Err(e) => {
            record.errors.push(format!("setup: {e}"));
            outcome.record = record;
            return outcome;
        }
    };
    record.stream_len = setup.stream.len();
    let note = |record: &mut RepeatRecord, stage: &str, e: Error| {
        log::warn!("repeat {repeat}: {stage} failed: {e}");
        record.errors.push(format!("{stage}: {e}"));
    };
    match setup.source_only_f1() {
        Ok(v) => record.source_only_f1 = Some(v),
        Err(e) => note(&mut record, "source_only", e),
    }
    match setup.nca_f1() {
        Ok(v) => record.nca_f1 = Some(v),
        Err(e) => note(&mut record, "nca", e),
    }

    let test = &setup.target_test;
    let stream_cfg = &cfg.stream;
    let enabled = |s: Strategy| cfg.strategies.contains(&s);
    let mut da_queries = None;
    let mut final_mapping = None;
    if enabled(Strategy::DaRvm) {
        let res = setup.da_learner(cfg, 1).and_then(|mut learner| {
            let mut oracle = TruthOracle::default();
            let traj = run_stream(
                Strategy::DaRvm.name(),
                &mut learner,
                &setup.stream,
                test,
                &mut oracle,
                stream_cfg,
                sub_seed(setup.seed, 11),
            )?;
            let mapping = expected_mapping(learner.posterior())?;
            Ok((traj, mapping))
        });
        match res {
            Ok((traj, mapping)) => {
                if let Some(e) = &traj.error {
                    note(&mut record, "da_rvm", Error::InvalidInput(e.clone()));
                } else {
                    da_queries = Some(traj.n_queried());
                }
                final_mapping = Some(mapping);
                outcome.trajectories.push(traj);
            }
            Err(e) => note(&mut record, "da_rvm", e),
        }
    }
    if enabled(Strategy::Random) {
        match da_queries {
            Some(count) => {
                // same initial posterior and refit seeds as the active run
                let res = setup.da_learner(cfg, 1).and_then(|mut learner| {
                    run_random(
                        Strategy::Random.name(),
                        &mut learner,
                        &setup.stream,
                        test,
                        &mut TruthOracle::default(),
                        count,
                        stream_cfg,
                        sub_seed(setup.seed, 12),
                    )
                });
                match res {
                    Ok(traj) => {
                        if let Some(e) = &traj.error {
                            note(&mut record, "random", Error::InvalidInput(e.clone()));
                        }
                        outcome.trajectories.push(traj);
                    }
                    Err(e) => note(&mut record, "random", e),
                }
            }
            None => note(
                &mut record,
                "random",
                Error::InvalidInput("no completed da_rvm trajectory to match".into()),
            ),
        }
    }
    if enabled(Strategy::TargetOnly) {
        let res = setup
            .target_only(cfg)
            .and_then(|(mut learner, stream, init_labels)| {
                let mut traj = run_stream(
                    Strategy::TargetOnly.name(),
                    &mut learner,
                    &stream,
                    test,
                    &mut TruthOracle::default(),
                    stream_cfg,
                    sub_seed(setup.seed, 13),
                )?;
                traj.init_labels = init_labels;
                Ok(traj)
            });
        match res {
            Ok(traj) => {
                if let Some(e) = &traj.error {
                    note(&mut record, "target_only", Error::InvalidInput(e.clone()));
                }
                outcome.trajectories.push(traj);
            }
            Err(e) => note(&mut record, "target_only", e),
        }
    }

    match setup.source_all_framed() {
        Ok(src) => {
            record.jmmd.unmapped = jmmd_value(
                &src,
                concat(&setup.target_train, &setup.target_test)
                    .and_then(|t| t.with_features(&setup.frame.source_rows(&t.features())?)),
            );
            record.jmmd.nca = jmmd_value(&src, setup.target_all_mapped(&setup.prior.location()));
            if let Some(t) = truth {
                record.jmmd.truth = jmmd_value(&src, setup.target_all_raw_mapped(t));
            }
            if let Some(m) = &final_mapping {
                record.jmmd.posterior = jmmd_value(&src, setup.target_all_mapped(m));
                match setup.target_all_mapped(m).and_then(|t| {
                    features_csv(
                        &src,
                        &t,
                        (setup.source_train.len(), setup.target_train.len()),
                    )
                }) {
                    Ok(csv) => outcome.features = Some(csv),
                    Err(e) => note(&mut record, "features", e),
                }
                match setup.frame.to_raw(m) {
                    Ok(raw) => record.expected_mapping = Some(raw),
                    Err(e) => note(&mut record, "mapping", e),
                }
            }
        }
        Err(e) => note(&mut record, "jmmd", e),
    }
    outcome.record = record;
    outcome
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: String,
    /// Repeats whose trajectory completed and entered the aggregate.
    pub completed: usize,
    pub aggregate: Option<RepeatSummary>,
    pub mean_query_fraction: Option<f64>,
    pub mean_final_f1: Option<f64>,
    /// Labels used to seed the classifier outside the stream, per class.
    pub init_labels_per_class: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub repeats: usize,
    pub failed_repeats: Vec<usize>,
    pub strategies: Vec<StrategySummary>,
    pub source_only_f1: Option<Band>,
    pub nca_f1: Option<Band>,
    pub jmmd_posterior: Option<Band>,
    pub best_jmmd_repeat: Option<usize>,
    pub worst_jmmd_repeat: Option<usize>,
}

impl RunSummary {
    pub fn strategy(&self, s: Strategy) -> Option<&StrategySummary> {
        self.strategies.iter().find(|x| x.strategy == s.name())
    }
}

/// Index of the smallest and largest stored values, ties to the lowest
/// repeat id.
pub fn best_worst(values: &[(usize, f64)]) -> Option<(usize, usize)> {
    let first = values.first()?;
    let (mut best, mut worst) = (*first, *first);
    for &(r, v) in &values[1..] {
        if v < best.1 {
            best = (r, v);
        }
        if v > worst.1 {
            worst = (r, v);
        }
    }
    Some((best.0, worst.0))
}

fn band_of(values: Vec<f64>) -> Option<Band> {
    (!values.is_empty()).then(|| Band::of(&values))
}

pub fn summarize(cfg: &ExperimentConfig, outcomes: &[RepeatOutcome]) -> Result<RunSummary> {
    let mut strategies = Vec::new();
    for &s in &cfg.strategies {
        let done: Vec<_> = outcomes
            .iter()
            .flat_map(|o| &o.trajectories)
            .filter(|t| t.strategy == s.name() && t.error.is_none())
            .cloned()
            .collect();
        let aggregate = if done.is_empty() {
            None
        } else {
            Some(aggregate_repeats(&done)?)
        };
        let n_classes = done.first().map_or(0, |t| t.n_classes);
        let mut init = vec![0; n_classes];
        for t in &done {
            for &l in &t.init_labels {
                init[l] += 1;
            }
        }
        strategies.push(StrategySummary {
            strategy: s.name().to_string(),
            completed: done.len(),
            mean_query_fraction: aggregate.as_ref().map(|a| a.query_fraction.mean),
            mean_final_f1: aggregate.as_ref().map(|a| a.final_f1.mean),
            aggregate,
            init_labels_per_class: init,
        });
    }
    let records: Vec<&RepeatRecord> = outcomes.iter().map(|o| &o.record).collect();
    let posterior: Vec<(usize, f64)> = records
        .iter()
        .filter_map(|r| r.jmmd.posterior.map(|v| (r.repeat, v)))
        .collect();
    let (best, worst) = best_worst(&posterior).unzip();
    Ok(RunSummary {
        repeats: outcomes.len(),
        failed_repeats: records
            .iter()
            .filter(|r| r.failed())
            .map(|r| r.repeat)
            .collect(),
        strategies,
        source_only_f1: band_of(records.iter().filter_map(|r| r.source_only_f1).collect()),
        nca_f1: band_of(records.iter().filter_map(|r| r.nca_f1).collect()),
        jmmd_posterior: band_of(posterior.iter().map(|p| p.1).collect()),
        best_jmmd_repeat: best,
        worst_jmmd_repeat: worst,
    })
}

/// Runs every repeat in a pool of `cfg.workers` threads. Results are in
/// repeat order whatever the pool size.
pub fn run_repeats(cfg: &ExperimentConfig) -> Result<(Vec<RepeatOutcome>, LabelSpace)> {
    cfg.validate()?;
    let (source, target, truth) = cfg.data.load()?;
    if source.dim() != target.dim() {
        return Err(Error::DimensionMismatch {
            expected: source.dim(),
            found: target.dim(),
        });
    }
    cfg.layout.resolve(source.label_space())?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let outcomes = pool.install(|| {
        (0..cfg.repeats)
            .into_par_iter()
            .map(|r| {
                log::info!("repeat {r} started");
                let out = run_repeat(cfg, &source, &target, truth.as_ref(), r);
                log::info!(
                    "repeat {r} finished with {} errors",
                    out.record.errors.len()
                );
                out
            })
            .collect()
    });
    Ok((outcomes, source.label_space().clone()))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn curve_csv(summary: &RepeatSummary) -> String {
    let mut out = String::from("index,mean,p10,p90\n");
    for i in 0..summary.stream_len {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6}",
            i + 1,
            summary.mean[i],
            summary.p10[i],
            summary.p90[i]
        );
    }
    out
}

/// Writes the run directory. Per-repeat files are written as soon as the
/// outcomes are known, the aggregates once at the end.
pub fn write_run(
    cfg: &ExperimentConfig,
    dir: &Path,
    outcomes: &[RepeatOutcome],
    space: &LabelSpace,
) -> Result<RunSummary> {
    mkdir(dir)?;
    let echo = ExperimentConfig {
        output_dir: PathBuf::from("."),
        ..cfg.clone()
    };
    write(&dir.join("config.toml"), &echo.to_toml()?)?;
    for &s in &cfg.strategies {
        mkdir(&dir.join(s.name()))?;
    }
    mkdir(&dir.join("features"))?;
    for o in outcomes {
        let r = o.record.repeat;
        for t in &o.trajectories {
            write(
                &dir.join(&t.strategy).join(format!("repeat_{r:03}.csv")),
                &t.to_csv(space)?,
            )?;
        }
        if let Some(f) = &o.features {
            write(&dir.join("features").join(format!("repeat_{r:03}.csv")), f)?;
        }
    }
    let records: Vec<&RepeatRecord> = outcomes.iter().map(|o| &o.record).collect();
    write(
        &dir.join("repeats.json"),
        &serde_json::to_string_pretty(&records)?,
    )?;
    let summary = summarize(cfg, outcomes)?;
    for s in &summary.strategies {
        if let Some(a) = &s.aggregate {
            let sub = dir.join(&s.strategy);
            write(&sub.join("aggregate.csv"), &curve_csv(a))?;
            write(
                &sub.join("aggregate.json"),
                &serde_json::to_string_pretty(a)?,
            )?;
        }
    }
    write(
        &dir.join("summary.json"),
        &serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(summary)
}

/// Loads data, runs all repeats and writes the run directory.
pub fn run_experiment(cfg: &ExperimentConfig, dir: &Path) -> Result<RunSummary> {
    let (outcomes, space) = run_repeats(cfg)?;
    write_run(cfg, dir, &outcomes, &space)
}

/// Writes `source.csv`, `target.csv` and `truth.json` for a synthetic spec.
pub fn write_population(spec: &SyntheticSpec, dir: &Path) -> Result<()> {
    let (source, target, truth) = generate_population(spec)?;
    mkdir(dir)?;
    write_dataset(dir.join("source.csv"), &source)?;
    write_dataset(dir.join("target.csv"), &target)?;
    write(
        &dir.join("truth.json"),
        &serde_json::to_string_pretty(&truth)?,
    )
}

/// Files written by [`report`], relative to the run directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportIndex {
    pub curves: Vec<PathBuf>,
    pub query_bars: Vec<PathBuf>,
    pub best_jmmd_repeat: Option<usize>,
    pub worst_jmmd_repeat: Option<usize>,
    pub feature_dumps: Vec<PathBuf>,
}

struct TrajectoryRows {
    f1: Vec<f64>,
    queried: Vec<String>,
}

fn read_trajectory(path: &Path) -> Result<TrajectoryRows> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let headers = reader.headers().map_err(|e| Error::csv(path, e))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let (f1_col, q_col, class_col) = (col("macro_f1")?, col("queried")?, col("true_class")?);
    let mut rows = TrajectoryRows {
        f1: Vec::new(),
        queried: Vec::new(),
    };
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let f1 = rec[f1_col].parse::<f64>().map_err(|_| Error::Row {
            row,
            message: "non-numeric macro_f1".into(),
        })?;
        rows.f1.push(f1);
        if &rec[q_col] == "1" {
            rows.queried.push(rec[class_col].to_string());
        }
    }
    Ok(rows)
}

fn repeat_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("repeat_") && n.ends_with(".csv"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Builds figure-ready tables from a completed run directory into
/// `dir/report`.
pub fn report(dir: &Path) -> Result<ReportIndex> {
    let cfg = ExperimentConfig::load(dir.join("config.toml"))?;
    let records_path = dir.join("repeats.json");
    let records: Vec<RepeatRecord> = serde_json::from_str(
        &fs::read_to_string(&records_path).map_err(|e| Error::io(&records_path, e))?,
    )?;
    let out = dir.join("report");
    mkdir(&out)?;
    let mut index = ReportIndex::default();
    let space = match cfg.data.synthetic_spec() {
        Some(spec) => Some(spec.label_space()?),
        None => match &cfg.data {
            DataSource::Files {
                classes,
                merge_groups,
                ..
            } => Some(LabelSpace::from_names(classes, merge_groups)?),
            _ => None,
        },
    };
    for &s in &cfg.strategies {
        let sub = dir.join(s.name());
        if !sub.is_dir() {
            return Err(Error::InvalidInput(format!(
                "missing strategy directory {}",
                sub.display()
            )));
        }
        let trajectories = repeat_files(&sub)?
            .iter()
            .map(|p| read_trajectory(p))
            .collect::<Result<Vec<_>>>()?;
        if trajectories.is_empty() {
            log::warn!("strategy {} has no trajectories", s.name());
            continue;
        }
        // truncated trajectories belong to failed repeats
        let len = trajectories.iter().map(|t| t.f1.len()).max().unwrap_or(0);
        let complete: Vec<&TrajectoryRows> =
            trajectories.iter().filter(|t| t.f1.len() == len).collect();
        let mut curve = String::from("index,mean,p10,p90\n");
        for i in 0..len {
            let b = Band::of(&complete.iter().map(|t| t.f1[i]).collect::<Vec<_>>());
            let _ = writeln!(curve, "{},{:.6},{:.6},{:.6}", i + 1, b.mean, b.p10, b.p90);
        }
        let name = PathBuf::from(format!("curve_{}.csv", s.name()));
        write(&out.join(&name), &curve)?;
        index.curves.push(name);

        let classes: Vec<String> = match &space {
            Some(sp) => sp.classes().to_vec(),
            None => Vec::new(),
        };
        let mut bars = String::from("class,mean,p10,p90\n");
        for c in &classes {
            let counts: Vec<f64> = complete
                .iter()
                .map(|t| t.queried.iter().filter(|q| *q == c).count() as f64)
                .collect();
            let b = Band::of(&counts);
            let _ = writeln!(bars, "{c},{:.6},{},{}", b.mean, b.p10, b.p90);
        }
        let name = PathBuf::from(format!("queries_{}.csv", s.name()));
        write(&out.join(&name), &bars)?;
        index.query_bars.push(name);
    }

    let mut statics = String::from("repeat,source_only,nca\n");
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for r in &records {
        let _ = writeln!(
            statics,
            "{},{},{}",
            r.repeat,
            fmt(r.source_only_f1),
            fmt(r.nca_f1)
        );
    }
    write(&out.join("static_baselines.csv"), &statics)?;

    let values: Vec<(usize, f64)> = records
        .iter()
        .filter_map(|r| r.jmmd.posterior.map(|v| (r.repeat, v)))
        .collect();
    if let Some((best, worst)) = best_worst(&values) {
        index.best_jmmd_repeat = Some(best);
        index.worst_jmmd_repeat = Some(worst);
        for (tag, r) in [("best", best), ("worst", worst)] {
            let src = dir.join("features").join(format!("repeat_{r:03}.csv"));
            let text = fs::read_to_string(&src).map_err(|e| Error::io(&src, e))?;
            let name = PathBuf::from(format!("features_{tag}_jmmd.csv"));
            write(&out.join(&name), &text)?;
            index.feature_dumps.push(name);
        }
    }
    let mut jm = String::from("repeat,unmapped,nca,posterior,truth\n");
    for r in &records {
        let j = &r.jmmd;
        let _ = writeln!(
            jm,
            "{},{},{},{},{}",
            r.repeat,
            fmt(j.unmapped),
            fmt(j.nca),
            fmt(j.posterior),
            fmt(j.truth)
        );
    }
    write(&out.join("jmmd.csv"), &jm)?;
    write(
        &out.join("index.json"),
        &serde_json::to_string_pretty(&index)?,
    )?;
    Ok(index)
}
