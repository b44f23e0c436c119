//! Observations, datasets, and the stream protocol used to present target data.
//!
//! A [`Dataset`] is a list of [`Observation`]s over a shared [`LabelSpace`].
//! Labels are stored as indices into the label space; observations keep the
//! `seq` they were given at load or generation time, so an observation can be
//! traced through splits and stream reordering.

use std::collections::HashSet;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub features: Vec<f64>,
    pub label: Option<usize>,
    pub temperature: Option<f64>,
    pub seq: usize,
}

impl Observation {
    pub fn new(
        features: Vec<f64>,
        label: Option<usize>,
        temperature: Option<f64>,
        seq: usize,
    ) -> Self {
        Self {
            features,
            label,
            temperature,
            seq,
        }
    }
}

/// Ordered class identifiers plus groups of classes that count as one
/// category when measuring predictive uncertainty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelSpace {
    classes: Vec<String>,
    #[serde(default)]
    merge_groups: Vec<Vec<usize>>,
}

impl LabelSpace {
    pub fn new(classes: Vec<String>, merge_groups: Vec<Vec<usize>>) -> Result<Self> {
        let mut seen = HashSet::new();
        for c in &classes {
            if !seen.insert(c.as_str()) {
                return Err(Error::InvalidInput(format!(
                    "duplicate class identifier `{c}`"
                )));
            }
        }
        let mut grouped = HashSet::new();
        for group in &merge_groups {
            if group.is_empty() {
                return Err(Error::InvalidInput("empty merge group".into()));
            }
            for &c in group {
                if c >= classes.len() {
                    return Err(Error::InvalidInput(format!(
                        "merge group names unknown class {c}"
                    )));
                }
                if !grouped.insert(c) {
                    return Err(Error::OverlappingGroups(c));
                }
            }
        }
        Ok(Self {
            classes,
            merge_groups,
        })
    }

    /// Builds a label space from class names, with merge groups given by name.
    pub fn from_names<S: AsRef<str>>(classes: &[S], groups: &[Vec<S>]) -> Result<Self> {
        let names: Vec<String> = classes.iter().map(|c| c.as_ref().to_string()).collect();
        let mut idx_groups = Vec::with_capacity(groups.len());
        for g in groups {
            let mut idx = Vec::with_capacity(g.len());
            for name in g {
                let name = name.as_ref();
                let i = names.iter().position(|c| c == name).ok_or_else(|| {
                    Error::InvalidInput(format!("merge group names unknown class `{name}`"))
                })?;
                idx.push(i);
            }
            idx_groups.push(idx);
        }
        Self::new(names, idx_groups)
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn merge_groups(&self) -> &[Vec<usize>] {
        &self.merge_groups
    }

    pub fn name(&self, class: usize) -> &str {
        &self.classes[class]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    pub fn resolve(&self, names: &[String]) -> Result<Vec<usize>> {
        names
            .iter()
            .map(|n| {
                self.index_of(n)
                    .ok_or_else(|| Error::InvalidInput(format!("unknown class `{n}`")))
            })
            .collect()
    }
}

/// An open temperature interval; a missing bound is unbounded.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TempWindow {
    #[serde(default)]
    pub low: Option<f64>,
    #[serde(default)]
    pub high: Option<f64>,
}

impl TempWindow {
    pub fn above(low: f64) -> Self {
        Self {
            low: Some(low),
            high: None,
        }
    }

    /// Observations without a temperature never fall inside a window.
    pub fn contains(&self, temperature: Option<f64>) -> bool {
        let Some(t) = temperature else {
            return false;
        };
        self.low.is_none_or(|lo| t > lo) && self.high.is_none_or(|hi| t < hi)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub domain_id: String,
    observations: Vec<Observation>,
    label_space: LabelSpace,
    dim: usize,
}

impl Dataset {
    /// Validates and wraps observations. The feature dimension is taken from
    /// the first observation; use [`Dataset::empty`] for an empty dataset.
    pub fn new(
        domain_id: impl Into<String>,
        observations: Vec<Observation>,
        label_space: LabelSpace,
    ) -> Result<Self> {
        let dim = observations
            .first()
            .ok_or(Error::EmptyDataset)?
            .features
            .len();
        Self::with_dim(domain_id, dim, observations, label_space)
    }

    pub fn empty(domain_id: impl Into<String>, dim: usize, label_space: LabelSpace) -> Self {
        Self {
            domain_id: domain_id.into(),
            observations: Vec::new(),
            label_space,
            dim,
        }
    }

    pub fn with_dim(
        domain_id: impl Into<String>,
        dim: usize,
        observations: Vec<Observation>,
        label_space: LabelSpace,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidInput(
                "feature dimension must be at least 1".into(),
            ));
        }
        for (row, obs) in observations.iter().enumerate() {
            if obs.features.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: obs.features.len(),
                });
            }
            if obs.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::Row {
                    row,
                    message: "non-finite feature value".into(),
                });
            }
            if let Some(l) = obs.label {
                if l >= label_space.len() {
                    return Err(Error::Row {
                        row,
                        message: format!("label index {l} outside label space"),
                    });
                }
            }
        }
        Ok(Self {
            domain_id: domain_id.into(),
            observations,
            label_space,
            dim,
        })
    }

    /// A dataset over the same domain and label space with other observations.
    pub fn derive(&self, observations: Vec<Observation>) -> Result<Self> {
        Self::with_dim(
            self.domain_id.clone(),
            self.dim,
            observations,
            self.label_space.clone(),
        )
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn into_observations(self) -> Vec<Observation> {
        self.observations
    }

    pub fn label_space(&self) -> &LabelSpace {
        &self.label_space
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// Features as an `n × d` matrix.
    pub fn features(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.len(), self.dim, |i, j| {
            self.observations[i].features[j]
        })
    }

    /// Labels of every observation; fails if any is unlabelled.
    pub fn labels(&self) -> Result<Vec<usize>> {
        self.observations
            .iter()
            .enumerate()
            .map(|(row, o)| {
                o.label.ok_or_else(|| Error::Row {
                    row,
                    message: "observation is unlabelled".into(),
                })
            })
            .collect()
    }

    /// Count of labelled observations per class of the label space.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.label_space.len()];
        for o in &self.observations {
            if let Some(l) = o.label {
                counts[l] += 1;
            }
        }
        counts
    }

    pub fn filter(&self, mut keep: impl FnMut(&Observation) -> bool) -> Dataset {
        Dataset {
            domain_id: self.domain_id.clone(),
            observations: self
                .observations
                .iter()
                .filter(|o| keep(o))
                .cloned()
                .collect(),
            label_space: self.label_space.clone(),
            dim: self.dim,
        }
    }

    /// Observations whose label is one of `classes`.
    pub fn of_classes(&self, classes: &[usize]) -> Dataset {
        self.filter(|o| o.label.is_some_and(|l| classes.contains(&l)))
    }

    /// Applies `f` to every feature vector, keeping labels and metadata.
    pub fn map_features(&self, mut f: impl FnMut(&[f64]) -> Vec<f64>) -> Result<Dataset> {
        let observations = self
            .observations
            .iter()
            .map(|o| Observation {
                features: f(&o.features),
                ..o.clone()
            })
            .collect::<Vec<_>>();
        let dim = observations.first().map_or(self.dim, |o| o.features.len());
        Self::with_dim(
            self.domain_id.clone(),
            dim,
            observations,
            self.label_space.clone(),
        )
    }

    /// Replaces the feature vectors with the rows of `features`.
    pub fn with_features(&self, features: &DMatrix<f64>) -> Result<Dataset> {
        if features.nrows() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                found: features.nrows(),
            });
        }
        let observations = self
            .observations
            .iter()
            .enumerate()
            .map(|(i, o)| Observation {
                features: features.row(i).iter().copied().collect(),
                ..o.clone()
            })
            .collect();
        Self::with_dim(
            self.domain_id.clone(),
            features.ncols(),
            observations,
            self.label_space.clone(),
        )
    }
}

/// Column mapping for delimited dataset files.
#[derive(Clone, Debug)]
pub struct DatasetSchema {
    pub domain_id: String,
    /// Feature column names; empty means every header of the form `f<k>`, in
    /// order of `k`.
    pub feature_columns: Vec<String>,
    pub label_column: Option<String>,
    pub temperature_column: Option<String>,
    pub label_space: LabelSpace,
}

impl DatasetSchema {
    pub fn standard(domain_id: impl Into<String>, label_space: LabelSpace) -> Self {
        Self {
            domain_id: domain_id.into(),
            feature_columns: Vec::new(),
            label_column: Some("label".into()),
            temperature_column: Some("temp".into()),
            label_space,
        }
    }
}

fn feature_index(header: &str) -> Option<usize> {
    header
        .strip_prefix('f')?
        .parse::<usize>()
        .ok()
        .filter(|&k| k >= 1)
}

fn parse_optional_f64(cell: &str) -> std::result::Result<Option<f64>, ()> {
    let cell = cell.trim();
    if cell.is_empty() {
        Ok(None)
    } else {
        cell.parse::<f64>().map(Some).map_err(|_| ())
    }
}

/// Reads a delimited file with a header row. Rows are numbered from zero,
/// excluding the header, in error messages.
pub fn load_dataset(path: impl AsRef<Path>, schema: &DatasetSchema) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers = reader.headers().map_err(|e| Error::csv(path, e))?.clone();
    let column = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };

    let feature_cols: Vec<usize> = if schema.feature_columns.is_empty() {
        let mut found: Vec<(usize, usize)> = headers
            .iter()
            .enumerate()
            .filter_map(|(i, h)| feature_index(h).map(|k| (k, i)))
            .collect();
        found.sort_unstable();
        if found.is_empty() {
            return Err(Error::MissingColumn("f1".into()));
        }
        for (expected, (k, _)) in found.iter().enumerate() {
            if *k != expected + 1 {
                return Err(Error::MissingColumn(format!("f{}", expected + 1)));
            }
        }
        found.into_iter().map(|(_, i)| i).collect()
    } else {
        schema
            .feature_columns
            .iter()
            .map(|c| column(c))
            .collect::<Result<_>>()?
    };
    let label_col = schema.label_column.as_deref().map(column).transpose()?;
    let temp_col = schema
        .temperature_column
        .as_deref()
        .map(column)
        .transpose()?;

    let mut observations = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::csv(path, e))?;
        let mut features = Vec::with_capacity(feature_cols.len());
        for &c in &feature_cols {
            let cell = record.get(c).unwrap_or("");
            let v: f64 = cell.parse().map_err(|_| Error::Row {
                row,
                message: format!("non-numeric feature `{cell}` in column `{}`", &headers[c]),
            })?;
            if !v.is_finite() {
                return Err(Error::Row {
                    row,
                    message: format!("non-finite feature `{cell}` in column `{}`", &headers[c]),
                });
            }
            features.push(v);
        }
        let label = match label_col.map(|c| record.get(c).unwrap_or("").trim()) {
            None | Some("") => None,
            Some(name) => Some(
                schema
                    .label_space
                    .index_of(name)
                    .ok_or_else(|| Error::Row {
                        row,
                        message: format!("unknown label `{name}`"),
                    })?,
            ),
        };
        let temperature = match temp_col {
            None => None,
            Some(c) => parse_optional_f64(record.get(c).unwrap_or("")).map_err(|_| Error::Row {
                row,
                message: "non-numeric temperature".into(),
            })?,
        };
        observations.push(Observation::new(features, label, temperature, row));
    }
    Dataset::with_dim(
        schema.domain_id.clone(),
        feature_cols.len(),
        observations,
        schema.label_space.clone(),
    )
}

/// Writes `f1..fd,label,temp` with shortest round-trip float formatting.
pub fn write_dataset(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let path = path.as_ref();
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut header: Vec<String> = (1..=ds.dim()).map(|k| format!("f{k}")).collect();
    header.push("label".into());
    header.push("temp".into());
    writer
        .write_record(&header)
        .map_err(|e| Error::csv(path, e))?;
    for o in ds.observations() {
        let mut rec: Vec<String> = o.features.iter().map(|v| v.to_string()).collect();
        rec.push(
            o.label
                .map(|l| ds.label_space().name(l).to_string())
                .unwrap_or_default(),
        );
        rec.push(o.temperature.map(|t| t.to_string()).unwrap_or_default());
        writer.write_record(&rec).map_err(|e| Error::csv(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

/// What to do with a class that has a single member when both sides of a
/// split should receive data.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SingletonPolicy {
    #[default]
    Train,
    Test,
    Reject,
}

/// Stratified split: every class (and the unlabelled stratum) is shuffled and
/// `round(n * ratio)` of its members go to the training side. Both outputs
/// keep the input order.
pub fn stratified_split<R: Rng + ?Sized>(
    ds: &Dataset,
    ratio: f64,
    rng: &mut R,
    policy: SingletonPolicy,
) -> Result<(Dataset, Dataset)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidInput(format!(
            "split ratio {ratio} outside (0, 1)"
        )));
    }
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n_classes = ds.label_space().len();
    let mut strata: Vec<Vec<usize>> = vec![Vec::new(); n_classes + 1];
    for (i, o) in ds.observations().iter().enumerate() {
        strata[o.label.unwrap_or(n_classes)].push(i);
    }
    let mut to_train = vec![false; ds.len()];
    for (class, mut members) in strata.into_iter().enumerate() {
        let n = members.len();
        if n == 0 {
            continue;
        }
        let n_train = if n == 1 {
            match policy {
                SingletonPolicy::Train => {
                    log::warn!(
                        "class {class} has a single member; placing it in the training split"
                    );
                    1
                }
                SingletonPolicy::Test => 0,
                SingletonPolicy::Reject => {
                    return Err(Error::InvalidInput(format!(
                        "class {class} has a single member and cannot be split"
                    )))
                }
            }
        } else {
            ((n as f64 * ratio).round() as usize).clamp(1, n - 1)
        };
        members.shuffle(rng);
        for &i in &members[..n_train] {
            to_train[i] = true;
        }
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, o) in ds.observations().iter().enumerate() {
        if to_train[i] {
            train.push(o.clone());
        } else {
            test.push(o.clone());
        }
    }
    Ok((ds.derive(train)?, ds.derive(test)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamPhase {
    pub name: String,
    pub classes: Vec<usize>,
    #[serde(default)]
    pub temp_window: Option<TempWindow>,
    pub count: usize,
}

impl StreamPhase {
    fn matches(&self, o: &Observation) -> bool {
        o.label.is_some_and(|l| self.classes.contains(&l))
            && self.temp_window.is_none_or(|w| w.contains(o.temperature))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StreamPlan {
    pub phases: Vec<StreamPhase>,
}

/// Class roles used to build the default presentation order: normal data at
/// changing temperatures, then steady (ambient) normal data, then a damage
/// scenario in order of severity, once per scenario.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamLayout {
    pub normal: Vec<usize>,
    pub steady: usize,
    pub scenarios: Vec<Vec<usize>>,
}

fn share(total: usize, parts: usize, k: usize) -> usize {
    total / parts + usize::from(k < total % parts)
}

impl StreamPlan {
    /// Builds the cyclic plan for the class counts present in `train`.
    pub fn cycles(train: &Dataset, layout: &StreamLayout) -> Result<Self> {
        let k = layout.scenarios.len();
        if k == 0 {
            return Err(Error::InvalidInput(
                "stream layout needs at least one damage scenario".into(),
            ));
        }
        if !layout.normal.contains(&layout.steady) {
            return Err(Error::InvalidInput(
                "steady class must be a normal class".into(),
            ));
        }
        let counts = train.class_counts();
        let names = train.label_space();
        let mut occurrences = vec![0usize; counts.len()];
        for s in &layout.scenarios {
            for &c in s {
                occurrences[c] += 1;
            }
        }
        let mut seen = vec![0usize; counts.len()];
        let mut phases = Vec::new();
        for (cycle, scenario) in layout.scenarios.iter().enumerate() {
            let steady_share = share(counts[layout.steady], k, cycle);
            let steady_changing = steady_share / 2;
            let changing: usize = layout
                .normal
                .iter()
                .filter(|&&c| c != layout.steady)
                .map(|&c| share(counts[c], k, cycle))
                .sum::<usize>()
                + steady_changing;
            if changing > 0 {
                phases.push(StreamPhase {
                    name: format!("cycle{}-normal-changing", cycle + 1),
                    classes: layout.normal.clone(),
                    temp_window: None,
                    count: changing,
                });
            }
            if steady_share > steady_changing {
                phases.push(StreamPhase {
                    name: format!("cycle{}-normal-{}", cycle + 1, names.name(layout.steady)),
                    classes: vec![layout.steady],
                    temp_window: None,
                    count: steady_share - steady_changing,
                });
            }
            for &c in scenario {
                let n = share(counts[c], occurrences[c], seen[c]);
                seen[c] += 1;
                if n > 0 {
                    phases.push(StreamPhase {
                        name: format!("cycle{}-{}", cycle + 1, names.name(c)),
                        classes: vec![c],
                        temp_window: None,
                        count: n,
                    });
                }
            }
        }
        Ok(Self { phases })
    }
}

/// Orders `train` according to `plan`. Phases are filled from their matching
/// observations, most selective phase first, so that broad phases cannot
/// starve narrow ones; each phase is presented in random order.
pub fn order_stream<R: Rng + ?Sized>(
    train: &Dataset,
    plan: &StreamPlan,
    rng: &mut R,
) -> Result<Vec<Observation>> {
    let n_classes = train.label_space().len();
    let obs = train.observations();
    let mut candidates: Vec<Vec<usize>> = Vec::with_capacity(plan.phases.len());
    for phase in &plan.phases {
        if let Some(&c) = phase.classes.iter().find(|&&c| c >= n_classes) {
            return Err(Error::InvalidInput(format!(
                "phase `{}` names unknown class {c}",
                phase.name
            )));
        }
        let matching: Vec<usize> = (0..obs.len()).filter(|&i| phase.matches(&obs[i])).collect();
        if matching.is_empty() {
            return Err(Error::EmptyPhase(phase.name.clone()));
        }
        candidates.push(matching);
    }
    let mut order: Vec<usize> = (0..plan.phases.len()).collect();
    order.sort_by_key(|&p| (candidates[p].len(), p));

    let mut taken = vec![false; obs.len()];
    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); plan.phases.len()];
    for p in order {
        let phase = &plan.phases[p];
        let mut free: Vec<usize> = candidates[p]
            .iter()
            .copied()
            .filter(|&i| !taken[i])
            .collect();
        if free.len() < phase.count {
            return Err(Error::InsufficientPhase {
                name: phase.name.clone(),
                wanted: phase.count,
                available: free.len(),
            });
        }
        free.shuffle(rng);
        free.truncate(phase.count);
        for &i in &free {
            taken[i] = true;
        }
        assigned[p] = free;
    }
    let unassigned = taken.iter().filter(|t| !**t).count();
    if unassigned > 0 {
        return Err(Error::StreamCoverage(unassigned));
    }
    Ok(assigned
        .into_iter()
        .flatten()
        .map(|i| obs[i].clone())
        .collect())
}

/// The first `n_initial` normal-condition observations of a stream-ordered
/// dataset, optionally restricted to a temperature window.
pub fn select_normal_condition(
    stream: &Dataset,
    n_initial: usize,
    temp_window: Option<TempWindow>,
    normal_classes: &[usize],
) -> Result<Dataset> {
    let picked: Vec<Observation> = stream
        .observations()
        .iter()
        .filter(|o| o.label.is_some_and(|l| normal_classes.contains(&l)))
        .filter(|o| temp_window.is_none_or(|w| w.contains(o.temperature)))
        .take(n_initial)
        .cloned()
        .collect();
    if picked.len() < n_initial {
        return Err(Error::InsufficientNormal {
            wanted: n_initial,
            found: picked.len(),
        });
    }
    stream.derive(picked)
}
