//! Synthetic two-domain populations with a known target→source mapping.
//!
//! Source observations are drawn from class-conditional Gaussians. Target
//! observations are drawn from the same distributions and then pushed
//! through the inverse of the ground-truth mapping, so mapping the target
//! with the truth recovers the source geometry.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LabelSpace, Observation};
use crate::error::{Error, Result};
use crate::mapping::{n_angles, MappingParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassCluster {
    pub name: String,
    pub mean: Vec<f64>,
    /// Row-major `d × d` covariance.
    pub cov: Vec<Vec<f64>>,
    /// Temperatures are drawn uniformly from `[low, high)`.
    pub temperature: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub clusters: Vec<ClassCluster>,
    #[serde(default)]
    pub merge_groups: Vec<Vec<String>>,
    pub source_counts: Vec<usize>,
    pub target_counts: Vec<usize>,
    pub truth: MappingParams,
    pub seed: u64,
}

// Base frequencies and spreads of the default population; cluster centres
// are offsets in units of the spread.
const BASE: [f64; 2] = [8.0, 25.0];
const SPREAD: [f64; 2] = [0.25, 0.5];

fn default_cluster(
    name: &str,
    z: [f64; 2],
    sd: f64,
    temperature: [f64; 2],
    d: usize,
) -> ClassCluster {
    let base = |k: usize| BASE[k % 2] + 17.0 * (k / 2) as f64;
    let spread = |k: usize| SPREAD[k % 2] * (1 + k / 2) as f64;
    ClassCluster {
        name: name.to_string(),
        mean: (0..d).map(|k| base(k) + spread(k) * z[k % 2]).collect(),
        cov: (0..d)
            .map(|i| {
                (0..d)
                    .map(|j| {
                        if i == j {
                            (spread(i) * sd).powi(2)
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect(),
        temperature,
    }
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self::with_dim(2)
    }
}

impl SyntheticSpec {
    /// The default five-class population in `d` features: a large ambient
    /// cluster, a freezing cluster offset upwards in every feature, and
    /// three damage clusters offset downwards.
    pub fn with_dim(d: usize) -> Self {
        let warm = [1.0, 30.0];
        let cold = [-10.0, -1.0];
        let clusters = vec![
            default_cluster("ambient", [-0.6, -0.6], 0.35, warm, d),
            default_cluster("freezing", [0.9, 0.9], 0.35, cold, d),
            default_cluster("damage1", [-2.0, -1.0], 0.3, warm, d),
            default_cluster("damage2", [-3.2, -2.2], 0.3, warm, d),
            default_cluster("damage3", [-1.4, -3.0], 0.3, warm, d),
        ];
        Self {
            clusters,
            merge_groups: vec![vec!["ambient".into(), "freezing".into()]],
            source_counts: vec![179, 138, 19, 10, 10],
            target_counts: vec![129, 54, 10, 7, 10],
            truth: MappingParams {
                scale: (0..d).map(|k| if k % 2 == 0 { 1.3 } else { 0.8 }).collect(),
                translation: (0..d)
                    .map(|k| if k % 2 == 0 { 0.5 } else { -0.4 })
                    .collect(),
                rotation: vec![0.3; n_angles(d)],
            },
            seed: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.clusters.first().map_or(0, |c| c.mean.len())
    }

    pub fn label_space(&self) -> Result<LabelSpace> {
        let names: Vec<&str> = self.clusters.iter().map(|c| c.name.as_str()).collect();
        let groups: Vec<Vec<&str>> = self
            .merge_groups
            .iter()
            .map(|g| g.iter().map(String::as_str).collect())
            .collect();
        LabelSpace::from_names(&names, &groups)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 {
            return Err(Error::InvalidInput("synthetic spec has no classes".into()));
        }
        let k = self.clusters.len();
        if self.source_counts.len() != k || self.target_counts.len() != k {
            return Err(Error::InvalidInput(format!(
                "per-class counts must list {k} entries"
            )));
        }
        for c in &self.clusters {
            if c.mean.len() != d || c.cov.len() != d || c.cov.iter().any(|r| r.len() != d) {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: c.mean.len(),
                });
            }
            if !(c.temperature[0] <= c.temperature[1]) {
                return Err(Error::InvalidInput(format!(
                    "class `{}` has an empty temperature range",
                    c.name
                )));
            }
        }
        if self.truth.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: self.truth.dim(),
            });
        }
        self.truth.check()?;
        if self.truth.scale.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidInput(
                "ground-truth scale must be strictly positive".into(),
            ));
        }
        let quarter = std::f64::consts::FRAC_PI_4;
        if self
            .truth
            .rotation
            .iter()
            .any(|&a| !(a > -quarter && a < quarter))
        {
            return Err(Error::InvalidInput(
                "ground-truth rotation must lie in (-pi/4, pi/4)".into(),
            ));
        }
        self.label_space()?;
        Ok(())
    }
}

struct Sampler {
    mean: DVector<f64>,
    chol: DMatrix<f64>,
    temperature: [f64; 2],
}

impl Sampler {
    fn new(c: &ClassCluster) -> Result<Self> {
        let d = c.mean.len();
        let cov = DMatrix::from_fn(d, d, |i, j| c.cov[i][j]);
        if (&cov - cov.transpose()).abs().max() > 1e-12 * cov.abs().max().max(1.0) {
            return Err(Error::SingularCovariance(c.name.clone()));
        }
        let chol = cov
            .cholesky()
            .ok_or_else(|| Error::SingularCovariance(c.name.clone()))?
            .l();
        Ok(Self {
            mean: DVector::from_column_slice(&c.mean),
            chol,
            temperature: c.temperature,
        })
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> (DVector<f64>, f64) {
        let z = DVector::from_fn(self.mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
        let [lo, hi] = self.temperature;
        let t = if hi > lo {
            rng.random_range(lo..hi)
        } else {
            lo
        };
        (&self.mean + &self.chol * z, t)
    }
}

/// Draws a source and a target dataset from `spec`; the third element is the
/// target→source mapping used to misalign the target.
pub fn generate_population(spec: &SyntheticSpec) -> Result<(Dataset, Dataset, MappingParams)> {
    spec.validate()?;
    let space = spec.label_space()?;
    let samplers = spec
        .clusters
        .iter()
        .map(Sampler::new)
        .collect::<Result<Vec<_>>>()?;
    let truth = spec.truth.compile()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut draw_domain = |counts: &[usize], to_target: bool| -> Result<Vec<Observation>> {
        let mut out = Vec::with_capacity(counts.iter().sum());
        for (class, (&n, sampler)) in counts.iter().zip(&samplers).enumerate() {
            for _ in 0..n {
                let (x, temp) = sampler.draw(&mut rng);
                let features = if to_target {
                    let row = DMatrix::from_row_slice(1, x.len(), x.as_slice());
                    truth.invert(&row)?.iter().copied().collect()
                } else {
                    x.iter().copied().collect()
                };
                let seq = out.len();
                out.push(Observation::new(features, Some(class), Some(temp), seq));
            }
        }
        Ok(out)
    };
    let source = draw_domain(&spec.source_counts, false)?;
    let target = draw_domain(&spec.target_counts, true)?;
    let d = spec.dim();
    Ok((
        Dataset::with_dim("source", d, source, space.clone())?,
        Dataset::with_dim("target", d, target, space)?,
        spec.truth.clone(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn class_mean(ds: &Dataset, class: usize) -> (Vec<f64>, Vec<f64>) {
        let rows: Vec<&Observation> = ds
            .observations()
            .iter()
            .filter(|o| o.label == Some(class))
            .collect();
        let n = rows.len() as f64;
        let d = ds.dim();
        let mean: Vec<f64> = (0..d)
            .map(|j| rows.iter().map(|o| o.features[j]).sum::<f64>() / n)
            .collect();
        let se = (0..d)
            .map(|j| {
                let var = rows
                    .iter()
                    .map(|o| (o.features[j] - mean[j]).powi(2))
                    .sum::<f64>()
                    / (n - 1.0);
                (var / n).sqrt()
            })
            .collect();
        (mean, se)
    }

    #[test]
    fn default_counts_are_exact() {
        let (s, t, truth) = generate_population(&SyntheticSpec::default()).unwrap();
        assert_eq!(s.class_counts(), vec![179, 138, 19, 10, 10]);
        assert_eq!(s.len(), 356);
        assert_eq!(t.class_counts(), vec![129, 54, 10, 7, 10]);
        assert_eq!(truth.rotation, vec![0.3]);
    }

    #[test]
    fn identity_truth_gives_matching_means() {
        let mut spec = SyntheticSpec::default();
        spec.truth = MappingParams::identity(2);
        spec.source_counts = vec![400, 400, 100, 100, 100];
        spec.target_counts = spec.source_counts.clone();
        let (s, t, _) = generate_population(&spec).unwrap();
        for class in 0..5 {
            let (ms, ses) = class_mean(&s, class);
            let (mt, set) = class_mean(&t, class);
            for j in 0..2 {
                let se = (ses[j].powi(2) + set[j].powi(2)).sqrt();
                assert!(
                    (ms[j] - mt[j]).abs() < 3.0 * se,
                    "class {class} feature {j}"
                );
            }
        }
    }

    #[test]
    fn translation_offsets_target() {
        let mut spec = SyntheticSpec::default();
        spec.truth = MappingParams {
            scale: vec![1.0, 1.0],
            translation: vec![5.0, 0.0],
            rotation: vec![0.0],
        };
        spec.source_counts = vec![500, 0, 0, 0, 0];
        spec.target_counts = vec![500, 0, 0, 0, 0];
        let (s, t, _) = generate_population(&spec).unwrap();
        let (ms, ses) = class_mean(&s, 0);
        let (mt, set) = class_mean(&t, 0);
        let se = (ses[0].powi(2) + set[0].powi(2)).sqrt();
        assert!((mt[0] - ms[0] + 5.0).abs() < 3.0 * se);
        let se1 = (ses[1].powi(2) + set[1].powi(2)).sqrt();
        assert!((mt[1] - ms[1]).abs() < 3.0 * se1);
    }

    #[test]
    fn truth_maps_target_onto_source_geometry() {
        let spec = SyntheticSpec::default();
        let (_, t, truth) = generate_population(&spec).unwrap();
        let mapped = truth.compile().unwrap().apply(&t.features()).unwrap();
        let back = t.with_features(&mapped).unwrap();
        let (m, se) = class_mean(&back, 0);
        for j in 0..2 {
            assert!((m[j] - spec.clusters[0].mean[j]).abs() < 3.0 * se[j]);
        }
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        let spec = SyntheticSpec::default();
        let a = generate_population(&spec).unwrap();
        let b = generate_population(&spec).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        let mut other = spec.clone();
        other.seed = 1;
        assert_ne!(generate_population(&other).unwrap().0, a.0);
    }

    #[test]
    fn singular_covariance_rejected() {
        let mut spec = SyntheticSpec::default();
        spec.clusters[2].cov = vec![vec![1.0, 1.0], vec![1.0, 1.0]];
        assert!(
            matches!(generate_population(&spec), Err(Error::SingularCovariance(name)) if name == "damage1")
        );
    }

    #[test]
    fn invalid_truth_rejected() {
        let mut spec = SyntheticSpec::default();
        spec.truth.scale[0] = 0.0;
        assert!(spec.validate().is_err());
        let mut spec = SyntheticSpec::default();
        spec.truth.rotation[0] = 0.8;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn higher_dimension() {
        let spec = SyntheticSpec::with_dim(3);
        let (s, t, truth) = generate_population(&spec).unwrap();
        assert_eq!(s.dim(), 3);
        assert_eq!(t.dim(), 3);
        assert_eq!(truth.rotation.len(), 3);
    }
}
