//! Stream-based maximum-entropy active learning: the query rule and the
//! observe, query, refit loop.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LabelSpace, Observation};
use crate::error::{Error, Result};
use crate::eval::macro_f1;

const PROB_TOL: f64 = 1e-9;

fn check_distribution(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::InvalidDistribution("no categories".into()));
    }
    if let Some(v) = p.iter().find(|&&v| !(v >= -PROB_TOL) || !v.is_finite()) {
        return Err(Error::InvalidDistribution(format!("entry {v}")));
    }
    let total = p.iter().sum::<f64>();
    if (total - 1.0).abs() > PROB_TOL {
        return Err(Error::InvalidDistribution(format!("sums to {total}")));
    }
    Ok(())
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> Result<f64> {
    check_distribution(p)?;
    Ok(p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| -v * v.ln())
        .sum::<f64>()
        .max(0.0))
}

/// Sums the probabilities of each merge group. A group takes the position
/// of its first member; ungrouped classes keep their order.
pub fn merge_probs(p: &[f64], groups: &[Vec<usize>]) -> Result<Vec<f64>> {
    let mut owner: Vec<Option<usize>> = vec![None; p.len()];
    for (g, members) in groups.iter().enumerate() {
        for &m in members {
            if m >= p.len() {
                return Err(Error::InvalidInput(format!("merge group names class {m}")));
            }
            if owner[m].is_some() {
                return Err(Error::OverlappingGroups(m));
            }
            owner[m] = Some(g);
        }
    }
    let mut out = Vec::with_capacity(p.len());
    let mut slot: Vec<Option<usize>> = vec![None; groups.len()];
    for (k, &v) in p.iter().enumerate() {
        match owner[k] {
            None => out.push(v),
            Some(g) => match slot[g] {
                Some(i) => out[i] += v,
                None => {
                    slot[g] = Some(out.len());
                    out.push(v);
                }
            },
        }
    }
    Ok(out)
}

/// Entropy normalized by its maximum over the categories present.
pub fn info_efficiency(p_merged: &[f64]) -> Result<f64> {
    if p_merged.len() < 2 {
        return Err(Error::SingleCategory);
    }
    let h = entropy(p_merged)?;
    Ok((h / (p_merged.len() as f64).ln()).clamp(0.0, 1.0))
}

/// Information efficiency of a label-space distribution, counting only the
/// categories that contain a class the model can predict.
pub fn query_eta(p: &[f64], space: &LabelSpace, modelled: &[usize]) -> Result<f64> {
    let mut groups: Vec<Vec<usize>> = space.merge_groups().to_vec();
    let merged = merge_probs(p, &groups)?;
    // which merged categories hold a modelled class
    groups.iter_mut().for_each(|g| g.sort_unstable());
    let mut keep = Vec::new();
    let mut seen_group = vec![false; groups.len()];
    for k in 0..p.len() {
        match groups.iter().position(|g| g.contains(&k)) {
            None => keep.push(modelled.contains(&k)),
            Some(g) if !seen_group[g] => {
                seen_group[g] = true;
                keep.push(groups[g].iter().any(|m| modelled.contains(m)));
            }
            Some(_) => {}
        }
    }
    let restricted: Vec<f64> = merged
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(&v, _)| v)
        .collect();
    info_efficiency(&restricted)
}

/// Draws `q ~ U[0, 1)` and queries when `q < eta`.
pub fn decide_query<R: Rng + ?Sized>(eta: f64, rng: &mut R) -> (f64, bool) {
    let q: f64 = rng.random();
    (q, q < eta)
}

/// A classifier that can be updated with newly labelled observations.
pub trait Learner {
    fn label_space(&self) -> &LabelSpace;

    /// Label-space ids the current model can predict.
    fn classes(&self) -> Vec<usize>;

    /// Predictive distribution over the whole label space for a raw target
    /// observation; unmodelled classes get probability zero.
    fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>>;

    /// Most probable label of every raw target observation.
    fn predict_labels(&self, x: &Dataset) -> Result<Vec<usize>>;

    /// Records a labelled observation for the next refit.
    fn observe(&mut self, obs: Observation);

    fn refit(&mut self) -> Result<()>;

    fn n_labelled(&self) -> usize;
}

/// Source of true labels for queried observations.
pub trait Oracle {
    fn label(&mut self, obs: &Observation) -> Result<usize>;
}

/// Reveals the label stored on the observation.
#[derive(Clone, Debug, Default)]
pub struct TruthOracle {
    pub calls: usize,
}

impl Oracle for TruthOracle {
    fn label(&mut self, obs: &Observation) -> Result<usize> {
        self.calls += 1;
        obs.label
            .ok_or_else(|| Error::Oracle(format!("observation {} has no label", obs.seq)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StreamConfig {
    /// Refit after this many new labels.
    pub refit_every: usize,
    /// Stop querying once this many labels were bought.
    pub budget: Option<usize>,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            refit_every: 1,
            budget: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryDecision {
    pub seq: usize,
    pub truth: Option<usize>,
    /// Absent for randomly chosen queries.
    pub eta: Option<f64>,
    pub q: Option<f64>,
    pub queried: bool,
    pub label: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryTrajectory {
    pub strategy: String,
    pub seed: u64,
    pub n_classes: usize,
    pub decisions: Vec<QueryDecision>,
    /// Stream positions after which the model was refitted.
    pub refit_points: Vec<usize>,
    /// Test macro-F1 after each presented observation.
    pub f1_curve: Vec<f64>,
    /// Test macro-F1 before the stream starts.
    pub initial_f1: f64,
    /// Classes of labels spent on initialization, outside the stream.
    pub init_labels: Vec<usize>,
    pub error: Option<String>,
}

impl QueryTrajectory {
    fn new(strategy: &str, seed: u64, n_classes: usize, initial_f1: f64) -> Self {
        Self {
            strategy: strategy.to_string(),
            seed,
            n_classes,
            decisions: Vec::new(),
            refit_points: Vec::new(),
            f1_curve: Vec::new(),
            initial_f1,
            init_labels: Vec::new(),
            error: None,
        }
    }

    pub fn n_queried(&self) -> usize {
        self.decisions.iter().filter(|d| d.queried).count()
    }

    pub fn query_fraction(&self) -> f64 {
        if self.decisions.is_empty() {
            0.0
        } else {
            self.n_queried() as f64 / self.decisions.len() as f64
        }
    }

    pub fn queries_per_class(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for l in self.decisions.iter().filter_map(|d| d.label) {
            counts[l] += 1;
        }
        counts
    }

    pub fn final_f1(&self) -> f64 {
        self.f1_curve.last().copied().unwrap_or(self.initial_f1)
    }

    /// One row per presented observation.
    pub fn to_csv(&self, space: &LabelSpace) -> Result<String> {
        let ser = |e: csv::Error| Error::Serialization(e.to_string());
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["seq", "true_class", "eta", "q", "queried", "macro_f1"])
            .map_err(ser)?;
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for (d, f1) in self.decisions.iter().zip(&self.f1_curve) {
            w.write_record([
                d.seq.to_string(),
                d.truth
                    .map(|l| space.name(l).to_string())
                    .unwrap_or_default(),
                fmt(d.eta),
                fmt(d.q),
                u8::from(d.queried).to_string(),
                format!("{f1:.6}"),
            ])
            .map_err(ser)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Serialization(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Serialization(e.to_string()))
    }
}

/// Macro-F1 of `learner` on a labelled raw target test set.
pub fn test_f1<L: Learner + ?Sized>(learner: &L, test: &Dataset) -> Result<f64> {
    let pred = learner.predict_labels(test)?;
    Ok(macro_f1(&pred, &test.labels()?, learner.label_space())?.macro_f1)
}

enum Rule<'a> {
    Entropy,
    /// Query exactly the marked positions.
    Fixed(&'a [bool]),
}

fn run<L: Learner + ?Sized, O: Oracle + ?Sized>(
    strategy: &str,
    learner: &mut L,
    stream: &[Observation],
    test: &Dataset,
    oracle: &mut O,
    cfg: &StreamConfig,
    seed: u64,
    rule: Rule<'_>,
) -> Result<QueryTrajectory> {
    let refit_every = cfg.refit_every.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let space = learner.label_space().clone();
    let mut f1 = test_f1(learner, test)?;
    let mut traj = QueryTrajectory::new(strategy, seed, space.len(), f1);
    let mut bought = 0usize;
    let mut pending = 0usize;
    for (i, obs) in stream.iter().enumerate() {
        let mut decision = QueryDecision {
            seq: obs.seq,
            truth: obs.label,
            eta: None,
            q: None,
            queried: false,
            label: None,
        };
        let want = match rule {
            Rule::Entropy => {
                let p = learner.predict_proba(&obs.features)?;
                let eta = query_eta(&p, &space, &learner.classes())?;
                let (q, hit) = decide_query(eta, &mut rng);
                decision.eta = Some(eta);
                decision.q = Some(q);
                hit
            }
            Rule::Fixed(marks) => marks[i],
        };
        let affordable = cfg.budget.is_none_or(|b| bought < b);
        if want && affordable {
            let label = oracle.label(obs)?;
            decision.queried = true;
            decision.label = Some(label);
            bought += 1;
            pending += 1;
            let mut labelled = obs.clone();
            labelled.label = Some(label);
            learner.observe(labelled);
            if pending >= refit_every {
                pending = 0;
                if let Err(e) = learner.refit() {
                    log::warn!("{strategy}: refit failed at stream position {i}: {e}");
                    traj.decisions.push(decision);
                    traj.error = Some(e.to_string());
                    return Ok(traj);
                }
                traj.refit_points.push(i);
                f1 = test_f1(learner, test)?;
            }
        }
        traj.decisions.push(decision);
        traj.f1_curve.push(f1);
    }
    Ok(traj)
}

/// Presents `stream` to `learner`, querying with probability equal to the
/// information efficiency of its predictive distribution.
pub fn run_stream<L: Learner + ?Sized, O: Oracle + ?Sized>(
    strategy: &str,
    learner: &mut L,
    stream: &[Observation],
    test: &Dataset,
    oracle: &mut O,
    cfg: &StreamConfig,
    seed: u64,
) -> Result<QueryTrajectory> {
    run(
        strategy,
        learner,
        stream,
        test,
        oracle,
        cfg,
        seed,
        Rule::Entropy,
    )
}

/// Presents `stream`, querying `query_count` positions chosen uniformly
/// without replacement.
#[allow(clippy::too_many_arguments)]
pub fn run_random<L: Learner + ?Sized, O: Oracle + ?Sized>(
    strategy: &str,
    learner: &mut L,
    stream: &[Observation],
    test: &Dataset,
    oracle: &mut O,
    query_count: usize,
    cfg: &StreamConfig,
    seed: u64,
) -> Result<QueryTrajectory> {
    if query_count > stream.len() {
        return Err(Error::InvalidInput(format!(
            "cannot query {query_count} of {} observations",
            stream.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut marks = vec![false; stream.len()];
    for i in sample(&mut rng, stream.len(), query_count) {
        marks[i] = true;
    }
    run(
        strategy,
        learner,
        stream,
        test,
        oracle,
        cfg,
        seed,
        Rule::Fixed(&marks),
    )
}

/// Takes `count` random observations of `class` out of `stream` to seed a
/// classifier that has not seen that class. Returns the picked observations
/// and the remaining stream, in order.
pub fn take_initial<R: Rng + ?Sized>(
    stream: &[Observation],
    class: usize,
    count: usize,
    rng: &mut R,
) -> Result<(Vec<Observation>, Vec<Observation>)> {
    let positions: Vec<usize> = (0..stream.len())
        .filter(|&i| stream[i].label == Some(class))
        .collect();
    if positions.len() < count {
        return Err(Error::InvalidInput(format!(
            "stream holds {} observations of class {class}, {count} needed",
            positions.len()
        )));
    }
    let mut chosen: Vec<usize> = sample(rng, positions.len(), count)
        .into_iter()
        .map(|k| positions[k])
        .collect();
    chosen.sort_unstable();
    let picked = chosen.iter().map(|&i| stream[i].clone()).collect();
    let rest = (0..stream.len())
        .filter(|i| chosen.binary_search(i).is_err())
        .map(|i| stream[i].clone())
        .collect();
    Ok((picked, rest))
}
