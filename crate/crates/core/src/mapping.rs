//! Constrained affine map from target features into the source feature space.
//!
//! A target row `x` is rotated by a product of Givens rotations, scaled per
//! feature and translated: `x̂ = s ⊙ (Θ x) + t`. For a data matrix with rows
//! as observations this is `X Θᵀ S + 1 tᵀ`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::truncnorm::{normal_ln_pdf, Bounds, TruncatedNormal};

/// Number of rotation angles for dimension `d`.
pub fn n_angles(d: usize) -> usize {
    d * d.saturating_sub(1) / 2
}

/// Rotation planes `(i, j)`, `i < j`, in lexicographic order.
pub fn angle_pairs(d: usize) -> Vec<(usize, usize)> {
    (0..d)
        .flat_map(|i| (i + 1..d).map(move |j| (i, j)))
        .collect()
}

fn givens(d: usize, i: usize, j: usize, theta: f64) -> DMatrix<f64> {
    let (s, c) = libm::sincos(theta);
    let mut g = DMatrix::identity(d, d);
    g[(i, i)] = c;
    g[(j, j)] = c;
    g[(i, j)] = -s;
    g[(j, i)] = s;
    g
}

fn givens_derivative(d: usize, i: usize, j: usize, theta: f64) -> DMatrix<f64> {
    let (s, c) = libm::sincos(theta);
    let mut g = DMatrix::zeros(d, d);
    g[(i, i)] = -s;
    g[(j, j)] = -s;
    g[(i, j)] = -c;
    g[(j, i)] = c;
    g
}

fn check_angles(theta: &[f64], d: usize) -> Result<()> {
    if theta.len() != n_angles(d) {
        return Err(Error::DimensionMismatch {
            expected: n_angles(d),
            found: theta.len(),
        });
    }
    Ok(())
}

/// `Θ = Π G(i,j)(θ_ij)` over the lexicographically ordered planes.
pub fn assemble_rotation(theta: &[f64], d: usize) -> Result<DMatrix<f64>> {
    check_angles(theta, d)?;
    Ok(angle_pairs(d)
        .into_iter()
        .zip(theta)
        .fold(DMatrix::identity(d, d), |acc, ((i, j), &a)| {
            acc * givens(d, i, j, a)
        }))
}

/// The rotation together with `∂Θ/∂θ_k` for every angle.
pub fn rotation_with_derivatives(
    theta: &[f64],
    d: usize,
) -> Result<(DMatrix<f64>, Vec<DMatrix<f64>>)> {
    check_angles(theta, d)?;
    let pairs = angle_pairs(d);
    let factors: Vec<DMatrix<f64>> = pairs
        .iter()
        .zip(theta)
        .map(|(&(i, j), &a)| givens(d, i, j, a))
        .collect();
    let m = factors.len();
    // prefix[k] = G_0 ... G_{k-1}; suffix[k] = G_{k+1} ... G_{m-1}
    let mut prefix = Vec::with_capacity(m + 1);
    prefix.push(DMatrix::identity(d, d));
    for f in &factors {
        let next = prefix.last().unwrap() * f;
        prefix.push(next);
    }
    let mut suffix = vec![DMatrix::identity(d, d); m + 1];
    for k in (0..m).rev() {
        suffix[k] = &factors[k] * &suffix[k + 1];
    }
    let derivs = (0..m)
        .map(|k| {
            let (i, j) = pairs[k];
            &prefix[k] * givens_derivative(d, i, j, theta[k]) * &suffix[k + 1]
        })
        .collect();
    Ok((prefix.pop().unwrap(), derivs))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MappingParams {
    pub scale: Vec<f64>,
    pub translation: Vec<f64>,
    pub rotation: Vec<f64>,
}

impl MappingParams {
    pub fn identity(d: usize) -> Self {
        Self {
            scale: vec![1.0; d],
            translation: vec![0.0; d],
            rotation: vec![0.0; n_angles(d)],
        }
    }

    pub fn dim(&self) -> usize {
        self.scale.len()
    }

    pub fn check(&self) -> Result<()> {
        let d = self.dim();
        if self.translation.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: self.translation.len(),
            });
        }
        check_angles(&self.rotation, d)
    }

    pub fn compile(&self) -> Result<CompiledMapping> {
        self.check()?;
        Ok(CompiledMapping {
            rotation: assemble_rotation(&self.rotation, self.dim())?,
            scale: self.scale.clone(),
            translation: self.translation.clone(),
        })
    }
}

/// A mapping with its rotation matrix assembled.
#[derive(Clone, Debug)]
pub struct CompiledMapping {
    rotation: DMatrix<f64>,
    scale: Vec<f64>,
    translation: Vec<f64>,
}

impl CompiledMapping {
    pub fn rotation(&self) -> &DMatrix<f64> {
        &self.rotation
    }

    pub fn apply_row(&self, x: &[f64], out: &mut [f64]) {
        let d = self.scale.len();
        for i in 0..d {
            let mut acc = 0.0;
            for j in 0..d {
                acc += self.rotation[(i, j)] * x[j];
            }
            out[i] = self.scale[i] * acc + self.translation[i];
        }
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let d = self.scale.len();
        if x.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: x.ncols(),
            });
        }
        let mut out = x * self.rotation.transpose();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            col.apply(|v| *v = *v * self.scale[j] + self.translation[j]);
        }
        Ok(out)
    }

    /// Exact inverse `((X̂ - 1tᵀ) S⁻¹) Θ`.
    pub fn invert(&self, x_hat: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let d = self.scale.len();
        if x_hat.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: x_hat.ncols(),
            });
        }
        if self.scale.contains(&0.0) {
            return Err(Error::InvalidInput(
                "mapping with zero scale is not invertible".into(),
            ));
        }
        let mut unscaled = x_hat.clone();
        for (j, mut col) in unscaled.column_iter_mut().enumerate() {
            col.apply(|v| *v = (*v - self.translation[j]) / self.scale[j]);
        }
        Ok(unscaled * &self.rotation)
    }
}

/// Applies `params` to every row of `x_t`.
pub fn apply_mapping(x_t: &DMatrix<f64>, params: &MappingParams) -> Result<DMatrix<f64>> {
    params.compile()?.apply(x_t)
}

/// Per-feature mean and standard deviation of normal-condition data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormalStats {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::DimensionMismatch {
                expected: mean.len(),
                found: std.len(),
            });
        }
        if let Some(i) = std.iter().position(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::ZeroStd(i));
        }
        Ok(Self { mean, std })
    }

    /// Column means and sample standard deviations (`n - 1` denominator).
    pub fn from_rows(x: &DMatrix<f64>) -> Result<Self> {
        let n = x.nrows();
        if n < 2 {
            return Err(Error::InvalidInput(format!(
                "normal-condition statistics need at least 2 rows, got {n}"
            )));
        }
        let mean: Vec<f64> = x.column_iter().map(|c| c.sum() / n as f64).collect();
        let std: Vec<f64> = x
            .column_iter()
            .zip(&mean)
            .map(|(c, m)| (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt())
            .collect();
        Self::new(mean, std)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        if self.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: d,
            });
        }
        Ok(())
    }
}

/// Centers each feature by `stats.mean` and divides by `stats.std`.
pub fn standardize_source(x_s: &DMatrix<f64>, stats: &NormalStats) -> Result<DMatrix<f64>> {
    stats.check_dim(x_s.ncols())?;
    let mut out = x_s.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col.apply(|v| *v = (*v - stats.mean[j]) / stats.std[j]);
    }
    Ok(out)
}

/// Normal-condition alignment: standardize by the target statistics, then
/// restore the source statistics.
pub fn nca_transform(
    x_t: &DMatrix<f64>,
    source: &NormalStats,
    target: &NormalStats,
) -> Result<DMatrix<f64>> {
    source.check_dim(x_t.ncols())?;
    target.check_dim(x_t.ncols())?;
    let mut out = x_t.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col.apply(|v| *v = (*v - target.mean[j]) / target.std[j] * source.std[j] + source.mean[j]);
    }
    Ok(out)
}

/// Scale and translation of the affine map equivalent to [`nca_transform`].
pub fn nca_prior_means(source: &NormalStats, target: &NormalStats) -> Result<(Vec<f64>, Vec<f64>)> {
    source.check_dim(target.dim())?;
    let scale: Vec<f64> = source
        .std
        .iter()
        .zip(&target.std)
        .map(|(s, t)| s / t)
        .collect();
    let translation = (0..source.dim())
        .map(|i| source.mean[i] - target.mean[i] * scale[i])
        .collect();
    Ok((scale, translation))
}

/// Coordinates the model works in. Source rows are standardized per
/// feature; target rows are centered and divided by one common scale, which
/// commutes with the rotation so a raw mapping stays in the family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub source: NormalStats,
    pub target_offset: Vec<f64>,
    pub target_scale: f64,
}

impl Frame {
    /// Frame fixed by normal-condition statistics of both domains; the
    /// target scale is the geometric mean of its standard deviations.
    pub fn from_normal(source: &NormalStats, target: &NormalStats) -> Result<Self> {
        source.check_dim(target.dim())?;
        let log_mean = target.std.iter().map(|s| s.ln()).sum::<f64>() / target.dim() as f64;
        Self::new(source.clone(), target.mean.clone(), log_mean.exp())
    }

    pub fn new(source: NormalStats, target_offset: Vec<f64>, target_scale: f64) -> Result<Self> {
        source.check_dim(target_offset.len())?;
        if !(target_scale > 0.0 && target_scale.is_finite()) {
            return Err(Error::InvalidInput(
                "target scale must be positive and finite".into(),
            ));
        }
        Ok(Self {
            source,
            target_offset,
            target_scale,
        })
    }

    /// A frame that leaves both domains unchanged.
    pub fn identity(d: usize) -> Self {
        Self {
            source: NormalStats {
                mean: vec![0.0; d],
                std: vec![1.0; d],
            },
            target_offset: vec![0.0; d],
            target_scale: 1.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.source.dim()
    }

    pub fn source_rows(&self, x_s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        standardize_source(x_s, &self.source)
    }

    pub fn target_rows(&self, x_t: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.source.check_dim(x_t.ncols())?;
        let mut out = x_t.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            col.apply(|v| *v = (*v - self.target_offset[j]) / self.target_scale);
        }
        Ok(out)
    }

    /// Back from framed source coordinates to raw source features.
    pub fn source_to_raw(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.source.check_dim(x.ncols())?;
        let mut out = x.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            col.apply(|v| *v = *v * self.source.std[j] + self.source.mean[j]);
        }
        Ok(out)
    }

    /// Expresses a raw target → raw source map in framed coordinates.
    pub fn to_frame(&self, raw: &MappingParams) -> Result<MappingParams> {
        self.source.check_dim(raw.dim())?;
        let d = raw.dim();
        let mut at_offset = vec![0.0; d];
        raw.compile()?
            .apply_row(&self.target_offset, &mut at_offset);
        let (mu, sd) = (&self.source.mean, &self.source.std);
        Ok(MappingParams {
            scale: (0..d)
                .map(|i| raw.scale[i] * self.target_scale / sd[i])
                .collect(),
            translation: (0..d).map(|i| (at_offset[i] - mu[i]) / sd[i]).collect(),
            rotation: raw.rotation.clone(),
        })
    }

    /// Inverse of [`Frame::to_frame`].
    pub fn to_raw(&self, framed: &MappingParams) -> Result<MappingParams> {
        self.source.check_dim(framed.dim())?;
        let d = framed.dim();
        let (mu, sd) = (&self.source.mean, &self.source.std);
        let scale: Vec<f64> = (0..d)
            .map(|i| framed.scale[i] * sd[i] / self.target_scale)
            .collect();
        let rotated = rotate_row(
            &assemble_rotation(&framed.rotation, d)?,
            &self.target_offset,
        );
        Ok(MappingParams {
            translation: (0..d)
                .map(|i| framed.translation[i] * sd[i] + mu[i] - scale[i] * rotated[i])
                .collect(),
            scale,
            rotation: framed.rotation.clone(),
        })
    }
}

/// Widths and bounds of the mapping prior; the means come from NCA.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorWidths {
    pub scale_sd: f64,
    pub translation_sd: f64,
    pub rotation_sd: f64,
    pub scale_bounds: Bounds,
    pub rotation_bounds: Bounds,
}

impl Default for PriorWidths {
    fn default() -> Self {
        let quarter = std::f64::consts::FRAC_PI_4;
        Self {
            scale_sd: 0.1,
            translation_sd: 0.1,
            rotation_sd: 0.1,
            scale_bounds: Bounds {
                lower: 0.0,
                upper: f64::INFINITY,
            },
            rotation_bounds: Bounds {
                lower: -quarter,
                upper: quarter,
            },
        }
    }
}

/// Truncated-normal priors on scale and rotation, normal prior on
/// translation, independent per component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MappingPrior {
    pub scale_mean: Vec<f64>,
    pub scale_sd: f64,
    pub scale_bounds: Bounds,
    pub translation_mean: Vec<f64>,
    pub translation_sd: f64,
    pub rotation_mean: Vec<f64>,
    pub rotation_sd: f64,
    pub rotation_bounds: Bounds,
}

impl MappingPrior {
    pub fn centered_at(location: &MappingParams, widths: &PriorWidths) -> Result<Self> {
        location.check()?;
        let prior = Self {
            scale_mean: location.scale.clone(),
            scale_sd: widths.scale_sd,
            scale_bounds: widths.scale_bounds,
            translation_mean: location.translation.clone(),
            translation_sd: widths.translation_sd,
            rotation_mean: location.rotation.clone(),
            rotation_sd: widths.rotation_sd,
            rotation_bounds: widths.rotation_bounds,
        };
        prior.compile()?;
        Ok(prior)
    }

    /// Prior centered on the NCA map with zero rotation.
    pub fn from_nca(
        source: &NormalStats,
        target: &NormalStats,
        widths: &PriorWidths,
    ) -> Result<Self> {
        let (scale, translation) = nca_prior_means(source, target)?;
        let d = scale.len();
        Self::centered_at(
            &MappingParams {
                scale,
                translation,
                rotation: vec![0.0; n_angles(d)],
            },
            widths,
        )
    }

    pub fn dim(&self) -> usize {
        self.scale_mean.len()
    }

    /// The location parameters, used as the sampler's starting point.
    pub fn location(&self) -> MappingParams {
        MappingParams {
            scale: self.scale_mean.clone(),
            translation: self.translation_mean.clone(),
            rotation: self.rotation_mean.clone(),
        }
    }

    pub fn compile(&self) -> Result<CompiledPrior> {
        let d = self.dim();
        self.location().check()?;
        if !(self.translation_sd > 0.0) {
            return Err(Error::InvalidInput(
                "translation prior sd must be positive".into(),
            ));
        }
        if d != self.translation_mean.len() {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: self.translation_mean.len(),
            });
        }
        Ok(CompiledPrior {
            scale: self
                .scale_mean
                .iter()
                .map(|&m| TruncatedNormal::new(m, self.scale_sd, self.scale_bounds))
                .collect::<Result<_>>()?,
            rotation: self
                .rotation_mean
                .iter()
                .map(|&m| TruncatedNormal::new(m, self.rotation_sd, self.rotation_bounds))
                .collect::<Result<_>>()?,
            translation_mean: self.translation_mean.clone(),
            translation_sd: self.translation_sd,
        })
    }
}

/// Per-component prior densities with their normalizers precomputed.
#[derive(Clone, Debug)]
pub struct CompiledPrior {
    pub(crate) scale: Vec<TruncatedNormal>,
    pub(crate) rotation: Vec<TruncatedNormal>,
    pub(crate) translation_mean: Vec<f64>,
    pub(crate) translation_sd: f64,
}

impl CompiledPrior {
    pub fn scale_bounds(&self) -> Bounds {
        self.scale.first().map_or(Bounds::UNBOUNDED, |t| t.bounds())
    }

    pub fn rotation_bounds(&self) -> Bounds {
        self.rotation
            .first()
            .map_or(Bounds::UNBOUNDED, |t| t.bounds())
    }

    fn check(&self, params: &MappingParams) -> Result<()> {
        params.check()?;
        if params.dim() != self.scale.len() {
            return Err(Error::DimensionMismatch {
                expected: self.scale.len(),
                found: params.dim(),
            });
        }
        Ok(())
    }

    pub fn log_density(&self, params: &MappingParams) -> Result<f64> {
        self.check(params)?;
        let mut lp = 0.0;
        for (tn, &s) in self.scale.iter().zip(&params.scale) {
            lp += tn.ln_pdf(s);
        }
        for (tn, &a) in self.rotation.iter().zip(&params.rotation) {
            lp += tn.ln_pdf(a);
        }
        if lp == f64::NEG_INFINITY {
            return Err(Error::OutOfSupport);
        }
        for (&m, &t) in self.translation_mean.iter().zip(&params.translation) {
            lp += normal_ln_pdf(t, m, self.translation_sd);
        }
        Ok(lp)
    }

    pub fn gradient(&self, params: &MappingParams) -> Result<MappingParams> {
        self.check(params)?;
        let in_support = self
            .scale
            .iter()
            .zip(&params.scale)
            .all(|(tn, &s)| tn.bounds().contains(s))
            && self
                .rotation
                .iter()
                .zip(&params.rotation)
                .all(|(tn, &a)| tn.bounds().contains(a));
        if !in_support {
            return Err(Error::OutOfSupport);
        }
        let sd2 = self.translation_sd * self.translation_sd;
        Ok(MappingParams {
            scale: self
                .scale
                .iter()
                .zip(&params.scale)
                .map(|(tn, &s)| tn.d_ln_pdf(s))
                .collect(),
            translation: self
                .translation_mean
                .iter()
                .zip(&params.translation)
                .map(|(&m, &t)| -(t - m) / sd2)
                .collect(),
            rotation: self
                .rotation
                .iter()
                .zip(&params.rotation)
                .map(|(tn, &a)| tn.d_ln_pdf(a))
                .collect(),
        })
    }
}

/// Log prior density of a mapping; [`Error::OutOfSupport`] outside the
/// truncation bounds.
pub fn log_prior(params: &MappingParams, prior: &MappingPrior) -> Result<f64> {
    prior.compile()?.log_density(params)
}

/// Partial derivatives of [`log_prior`] with respect to each component.
pub fn grad_log_prior(params: &MappingParams, prior: &MappingPrior) -> Result<MappingParams> {
    prior.compile()?.gradient(params)
}

/// `Θ x` for a single row, as a vector.
pub fn rotate_row(rotation: &DMatrix<f64>, x: &[f64]) -> DVector<f64> {
    rotation * DVector::from_column_slice(x)
}
