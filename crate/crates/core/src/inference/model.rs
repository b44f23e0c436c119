//! Joint density of the domain-adapted RVM and its unconstrained
//! parameterization.
//!
//! Unconstrained coordinates are laid out as
//! `[scale (d) | translation (d) | rotation (m) | W (C·n_r, row-major)]` when
//! precisions are frozen. When they are sampled the weights are
//! non-centred, `[... | Z (C·n_r) | ln A (C·n_r)]` with `W = Z / √A`, which
//! removes the funnel between a weight and its precision.

use nalgebra::{DMatrix, DVector};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::inference::nuts::LogDensity;
use crate::mapping::{
    n_angles, rotation_with_derivatives, CompiledPrior, MappingParams, MappingPrior,
};
use crate::rvm::{kernel_matrix, log_sum_exp, GammaHyper, KernelSpec, RvmModel};
use crate::truncnorm::Bounds;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// One joint setting of the latent variables.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub mapping: MappingParams,
    /// `C × n_r`.
    pub weights: DMatrix<f64>,
    /// `C × n_r`, positive.
    pub precisions: DMatrix<f64>,
}

/// Map from an unconstrained real onto an interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Transform {
    Identity,
    Lower(f64),
    Upper(f64),
    Interval(f64, f64),
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

impl Transform {
    pub(crate) fn from_bounds(b: Bounds) -> Self {
        match (b.lower.is_finite(), b.upper.is_finite()) {
            (false, false) => Transform::Identity,
            (true, false) => Transform::Lower(b.lower),
            (false, true) => Transform::Upper(b.upper),
            (true, true) => Transform::Interval(b.lower, b.upper),
        }
    }

    pub(crate) fn forward(self, u: f64) -> f64 {
        match self {
            Transform::Identity => u,
            Transform::Lower(a) => a + u.exp(),
            Transform::Upper(b) => b - u.exp(),
            Transform::Interval(a, b) => a + (b - a) * sigmoid(u),
        }
    }

    /// Fails on the boundary, where the unconstrained value is infinite.
    pub(crate) fn inverse(self, x: f64) -> Result<f64> {
        let u = match self {
            Transform::Identity => x,
            Transform::Lower(a) => (x - a).ln(),
            Transform::Upper(b) => (b - x).ln(),
            Transform::Interval(a, b) => {
                let p = (x - a) / (b - a);
                (p / (1.0 - p)).ln()
            }
        };
        if u.is_finite() {
            Ok(u)
        } else {
            Err(Error::OutOfSupport)
        }
    }

    /// `ln |dx/du|`.
    pub(crate) fn log_jacobian(self, u: f64) -> f64 {
        match self {
            Transform::Identity => 0.0,
            Transform::Lower(_) | Transform::Upper(_) => u,
            Transform::Interval(a, b) => (b - a).ln() - softplus(-u) - softplus(u),
        }
    }

    pub(crate) fn dx_du(self, u: f64) -> f64 {
        match self {
            Transform::Identity => 1.0,
            Transform::Lower(_) => u.exp(),
            Transform::Upper(_) => -u.exp(),
            Transform::Interval(a, b) => {
                let s = sigmoid(u);
                (b - a) * s * (1.0 - s)
            }
        }
    }

    pub(crate) fn d_log_jacobian(self, u: f64) -> f64 {
        match self {
            Transform::Identity => 0.0,
            Transform::Lower(_) | Transform::Upper(_) => 1.0,
            Transform::Interval(..) => 1.0 - 2.0 * sigmoid(u),
        }
    }
}

/// Which feature space an input lives in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

/// Everything the joint density conditions on.
#[derive(Clone, Debug)]
pub struct DaRvmProblem {
    d: usize,
    n_classes: usize,
    relevance_vectors: DMatrix<f64>,
    kernel: KernelSpec,
    hyper: GammaHyper,
    prior: MappingPrior,
    compiled_prior: CompiledPrior,
    scale_tf: Transform,
    rotation_tf: Transform,
    /// Frozen precisions, when they are not sampled.
    frozen: Option<DMatrix<f64>>,
    source_k: DMatrix<f64>,
    source_y: Vec<usize>,
    target_x: DMatrix<f64>,
    target_y: Vec<usize>,
    gamma_const: f64,
}

impl DaRvmProblem {
    /// `source` must already be in the frame the RVM was trained in and
    /// `target` in the frame the mapping acts on; both must be labelled with
    /// classes the RVM models.
    pub fn new(
        rvm: &RvmModel,
        source: &Dataset,
        target: &Dataset,
        prior: &MappingPrior,
        hyper: &GammaHyper,
        freeze_precisions: bool,
    ) -> Result<Self> {
        let d = rvm.dim();
        for ds in [source, target] {
            if !ds.is_empty() && ds.dim() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: ds.dim(),
                });
            }
        }
        let positions = |ds: &Dataset| -> Result<Vec<usize>> {
            ds.labels()?
                .into_iter()
                .map(|l| {
                    rvm.class_position(l).ok_or_else(|| {
                        Error::InvalidInput(format!(
                            "class `{}` is not modelled by the classifier",
                            ds.label_space().name(l)
                        ))
                    })
                })
                .collect()
        };
        let source_y = positions(source)?;
        let target_y = positions(target)?;
        let source_k = if source.is_empty() {
            DMatrix::zeros(0, rvm.n_relevance())
        } else {
            kernel_matrix(&source.features(), &rvm.relevance_vectors, &rvm.kernel)?
        };
        let target_x = if target.is_empty() {
            DMatrix::zeros(0, d)
        } else {
            target.features()
        };
        Self::assemble(
            d,
            rvm.n_classes(),
            rvm.relevance_vectors.clone(),
            rvm.kernel,
            prior,
            hyper,
            freeze_precisions.then(|| rvm.precisions.clone()),
            (source_k, source_y),
            (target_x, target_y),
        )
    }

    /// A model with the mapping prior as its only factor.
    pub fn prior_only(prior: &MappingPrior) -> Result<Self> {
        let d = prior.dim();
        Self::assemble(
            d,
            0,
            DMatrix::zeros(0, d),
            KernelSpec::for_dim(d),
            prior,
            &GammaHyper::default(),
            None,
            (DMatrix::zeros(0, 0), Vec::new()),
            (DMatrix::zeros(0, d), Vec::new()),
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        d: usize,
        n_classes: usize,
        relevance_vectors: DMatrix<f64>,
        kernel: KernelSpec,
        prior: &MappingPrior,
        hyper: &GammaHyper,
        frozen: Option<DMatrix<f64>>,
        source: (DMatrix<f64>, Vec<usize>),
        target: (DMatrix<f64>, Vec<usize>),
    ) -> Result<Self> {
        if prior.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: prior.dim(),
            });
        }
        let compiled_prior = prior.compile()?;
        Ok(Self {
            d,
            n_classes,
            relevance_vectors,
            kernel,
            hyper: *hyper,
            scale_tf: Transform::from_bounds(compiled_prior.scale_bounds()),
            rotation_tf: Transform::from_bounds(compiled_prior.rotation_bounds()),
            prior: prior.clone(),
            compiled_prior,
            frozen,
            source_k: source.0,
            source_y: source.1,
            target_x: target.0,
            target_y: target.1,
            gamma_const: hyper.a * hyper.b.ln() - libm::lgamma(hyper.a),
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.d
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_relevance(&self) -> usize {
        self.relevance_vectors.nrows()
    }

    pub fn relevance_vectors(&self) -> &DMatrix<f64> {
        &self.relevance_vectors
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn prior(&self) -> &MappingPrior {
        &self.prior
    }

    pub fn precisions_frozen(&self) -> bool {
        self.frozen.is_some()
    }

    pub fn n_target(&self) -> usize {
        self.target_y.len()
    }

    fn n_angles(&self) -> usize {
        n_angles(self.d)
    }

    fn w_offset(&self) -> usize {
        2 * self.d + self.n_angles()
    }

    fn n_weights(&self) -> usize {
        self.n_classes * self.n_relevance()
    }

    /// Human-readable name of an unconstrained coordinate.
    pub fn coordinate_name(&self, i: usize) -> String {
        let (d, m, nw, nr) = (
            self.d,
            self.n_angles(),
            self.n_weights(),
            self.n_relevance().max(1),
        );
        let w0 = self.w_offset();
        if i < d {
            format!("scale[{i}]")
        } else if i < 2 * d {
            format!("translation[{}]", i - d)
        } else if i < 2 * d + m {
            format!("rotation[{}]", i - 2 * d)
        } else if i < w0 + nw {
            let k = i - w0;
            let tag = if self.frozen.is_some() { "w" } else { "z" };
            format!("{tag}[{},{}]", k / nr, k % nr)
        } else {
            let k = i - w0 - nw;
            format!("log_alpha[{},{}]", k / nr, k % nr)
        }
    }

    /// The state with the mapping at the prior location and the RVM's
    /// weights and precisions.
    pub fn initial_state(&self, rvm: &RvmModel) -> ModelState {
        ModelState {
            mapping: self.prior.location(),
            weights: rvm.weights.clone(),
            precisions: rvm.precisions.clone(),
        }
    }

    fn check_state(&self, state: &ModelState) -> Result<()> {
        state.mapping.check()?;
        if state.mapping.dim() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                found: state.mapping.dim(),
            });
        }
        let shape = (self.n_classes, self.n_relevance());
        if state.weights.shape() != shape || state.precisions.shape() != shape {
            return Err(Error::DimensionMismatch {
                expected: self.n_weights(),
                found: state.weights.len(),
            });
        }
        Ok(())
    }

    fn precisions_of<'a>(&'a self, state: &'a ModelState) -> &'a DMatrix<f64> {
        self.frozen.as_ref().unwrap_or(&state.precisions)
    }

    /// Log joint density of a constrained state. With frozen precisions the
    /// state's precisions are ignored and the Gamma factor is omitted.
    pub fn log_joint(&self, state: &ModelState) -> Result<f64> {
        self.check_state(state)?;
        let mut lp = self.compiled_prior.log_density(&state.mapping)?;
        let alpha = self.precisions_of(state);
        if alpha.iter().any(|&a| !(a > 0.0)) {
            return Err(Error::OutOfSupport);
        }
        for (&w, &a) in state.weights.iter().zip(alpha.iter()) {
            lp += 0.5 * a.ln() - 0.5 * LN_2PI - 0.5 * a * w * w;
        }
        if self.frozen.is_none() {
            for &a in alpha.iter() {
                lp += self.gamma_const + (self.hyper.a - 1.0) * a.ln() - self.hyper.b * a;
            }
        }
        lp += self.source_log_likelihood(&state.weights);
        lp += self.target_log_likelihood(state)?;
        Ok(lp)
    }

    fn source_log_likelihood(&self, w: &DMatrix<f64>) -> f64 {
        if self.source_y.is_empty() {
            return 0.0;
        }
        let scores = &self.source_k * w.transpose();
        (0..scores.nrows())
            .map(|i| {
                let row: Vec<f64> = scores.row(i).iter().copied().collect();
                row[self.source_y[i]] - log_sum_exp(&row)
            })
            .sum()
    }

    fn target_log_likelihood(&self, state: &ModelState) -> Result<f64> {
        if self.target_y.is_empty() {
            return Ok(0.0);
        }
        let mapped = state.mapping.compile()?.apply(&self.target_x)?;
        let k = kernel_matrix(&mapped, &self.relevance_vectors, &self.kernel)?;
        let scores = k * state.weights.transpose();
        Ok((0..scores.nrows())
            .map(|i| {
                let row: Vec<f64> = scores.row(i).iter().copied().collect();
                row[self.target_y[i]] - log_sum_exp(&row)
            })
            .sum())
    }

    /// Unconstrained coordinates of an interior state.
    pub fn to_unconstrained(&self, state: &ModelState) -> Result<Vec<f64>> {
        self.check_state(state)?;
        let mut u = Vec::with_capacity(self.dim());
        for &s in &state.mapping.scale {
            u.push(self.scale_tf.inverse(s)?);
        }
        u.extend_from_slice(&state.mapping.translation);
        for &a in &state.mapping.rotation {
            u.push(self.rotation_tf.inverse(a)?);
        }
        match self.frozen {
            Some(_) => u.extend(state.weights.transpose().iter()),
            None => {
                let (wt, at) = (state.weights.transpose(), state.precisions.transpose());
                if at.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
                    return Err(Error::OutOfSupport);
                }
                u.extend(wt.iter().zip(at.iter()).map(|(w, a)| w * a.sqrt()));
                u.extend(at.iter().map(|a| a.ln()));
            }
        }
        Ok(u)
    }

    pub fn from_unconstrained(&self, u: &[f64]) -> ModelState {
        let (d, m) = (self.d, self.n_angles());
        let (c, nr) = (self.n_classes, self.n_relevance());
        let w0 = self.w_offset();
        let nw = self.n_weights();
        let mapping = MappingParams {
            scale: u[..d].iter().map(|&v| self.scale_tf.forward(v)).collect(),
            translation: u[d..2 * d].to_vec(),
            rotation: u[2 * d..2 * d + m]
                .iter()
                .map(|&v| self.rotation_tf.forward(v))
                .collect(),
        };
        let raw = DMatrix::from_row_slice(c, nr, &u[w0..w0 + nw]);
        let (weights, precisions) = match &self.frozen {
            Some(a) => (raw, a.clone()),
            None => {
                let la = DMatrix::from_row_slice(c, nr, &u[w0 + nw..w0 + 2 * nw]);
                (
                    raw.zip_map(&la, |z, l| z * (-0.5 * l).exp()),
                    la.map(f64::exp),
                )
            }
        };
        ModelState {
            mapping,
            weights,
            precisions,
        }
    }

    /// Sum of `ln |dx/du|` over the constrained coordinates.
    pub fn log_jacobian(&self, u: &[f64]) -> f64 {
        let (d, m) = (self.d, self.n_angles());
        let mut lj: f64 = u[..d].iter().map(|&v| self.scale_tf.log_jacobian(v)).sum();
        lj += u[2 * d..2 * d + m]
            .iter()
            .map(|&v| self.rotation_tf.log_jacobian(v))
            .sum::<f64>();
        if self.frozen.is_none() {
            // log alpha, plus w = z / sqrt(alpha)
            let start = self.w_offset() + self.n_weights();
            lj += 0.5 * u[start..].iter().sum::<f64>();
        }
        lj
    }

    /// Log density in unconstrained coordinates, evaluated directly from
    /// [`DaRvmProblem::log_joint`].
    pub fn log_density_unconstrained(&self, u: &[f64]) -> Result<f64> {
        Ok(self.log_joint(&self.from_unconstrained(u))? + self.log_jacobian(u))
    }

    /// Gradient of the unconstrained log density at `state`.
    pub fn grad_log_joint(&self, state: &ModelState) -> Result<Vec<f64>> {
        let u = self.to_unconstrained(state)?;
        let mut g = vec![0.0; u.len()];
        self.logp_and_grad(&u, &mut g)?;
        Ok(g)
    }
}

impl LogDensity for DaRvmProblem {
    fn dim(&self) -> usize {
        let extra = if self.frozen.is_some() {
            0
        } else {
            self.n_weights()
        };
        self.w_offset() + self.n_weights() + extra
    }

    fn logp_and_grad(&self, u: &[f64], grad: &mut [f64]) -> Result<f64> {
        let (d, m) = (self.d, self.n_angles());
        let (c, nr) = (self.n_classes, self.n_relevance());
        let w0 = self.w_offset();
        let nw = self.n_weights();
        grad.iter_mut().for_each(|g| *g = 0.0);

        let state = self.from_unconstrained(u);
        let mapping = &state.mapping;
        let w = &state.weights;
        let alpha = self.precisions_of(&state);

        let mut lp = self.compiled_prior.log_density(mapping)?;
        let prior_grad = self.compiled_prior.gradient(mapping)?;
        let mut g_scale = prior_grad.scale;
        let mut g_trans = prior_grad.translation;
        let mut g_rot = prior_grad.rotation;

        // weight and precision priors
        let mut g_w = DMatrix::<f64>::zeros(c, nr);
        let mut g_la = DMatrix::<f64>::zeros(c, nr);
        let (a, b) = (self.hyper.a, self.hyper.b);
        for ci in 0..c {
            for j in 0..nr {
                let (wv, av) = (w[(ci, j)], alpha[(ci, j)]);
                lp += 0.5 * av.ln() - 0.5 * LN_2PI - 0.5 * av * wv * wv;
                g_w[(ci, j)] = -av * wv;
                if self.frozen.is_none() {
                    // the log-transform Jacobian is added with the others below
                    lp += self.gamma_const + (a - 1.0) * av.ln() - b * av;
                    g_la[(ci, j)] = a + 0.5 - av * (0.5 * wv * wv + b);
                }
            }
        }

        if !self.source_y.is_empty() {
            let scores = &self.source_k * w.transpose();
            let (ll, resid) = softmax_residuals(scores, &self.source_y);
            lp += ll;
            g_w += resid.transpose() * &self.source_k;
        }

        if !self.target_y.is_empty() {
            let (rot, drot) = rotation_with_derivatives(&mapping.rotation, d)?;
            let beta = self.kernel.bandwidth;
            let nt = self.target_y.len();
            // rotated rows, then mapped rows
            let rx = &self.target_x * rot.transpose();
            let mut xh = rx.clone();
            for p in 0..d {
                let (sp, tp) = (mapping.scale[p], mapping.translation[p]);
                xh.column_mut(p).apply(|v| *v = sp * *v + tp);
            }
            let kt = kernel_matrix(&xh, &self.relevance_vectors, &self.kernel)?;
            let scores = &kt * w.transpose();
            let (ll, resid) = softmax_residuals(scores, &self.target_y);
            lp += ll;
            g_w += resid.transpose() * &kt;
            // coef[i, j] = -2 beta k_ij sum_c r_ic w_cj
            let mut coef = &resid * w;
            coef.component_mul_assign(&kt);
            coef *= -2.0 * beta;
            // v_i = sum_j coef_ij (xh_i - rv_j)
            let row_sums = DVector::from_iterator(nt, (0..nt).map(|i| coef.row(i).sum()));
            let mut v = -(&coef * &self.relevance_vectors);
            for p in 0..d {
                v.column_mut(p)
                    .axpy(1.0, &xh.column(p).component_mul(&row_sums), 1.0);
            }
            for p in 0..d {
                g_trans[p] += v.column(p).sum();
                g_scale[p] += v.column(p).dot(&rx.column(p));
            }
            if !drot.is_empty() {
                // scale each column of v by s_p, then contract with d(rot) x
                let mut vs = v;
                for p in 0..d {
                    vs.column_mut(p).scale_mut(mapping.scale[p]);
                }
                // sum_i vs_i^T dR x_i = trace(dR X^T Vs) = <dR, Vs^T X>
                let m_vx = vs.transpose() * &self.target_x;
                for (kk, dr) in drot.iter().enumerate() {
                    g_rot[kk] += dr.dot(&m_vx);
                }
            }
        }

        // chain rule into unconstrained coordinates
        for p in 0..d {
            let uu = u[p];
            grad[p] = g_scale[p] * self.scale_tf.dx_du(uu) + self.scale_tf.d_log_jacobian(uu);
            grad[d + p] = g_trans[p];
        }
        for k in 0..m {
            let uu = u[2 * d + k];
            grad[2 * d + k] =
                g_rot[k] * self.rotation_tf.dx_du(uu) + self.rotation_tf.d_log_jacobian(uu);
        }
        for ci in 0..c {
            for j in 0..nr {
                let k = ci * nr + j;
                match self.frozen {
                    Some(_) => grad[w0 + k] = g_w[(ci, j)],
                    None => {
                        let (gw, wv) = (g_w[(ci, j)], w[(ci, j)]);
                        grad[w0 + k] = gw / alpha[(ci, j)].sqrt();
                        grad[w0 + nw + k] = g_la[(ci, j)] - 0.5 * gw * wv - 0.5;
                    }
                }
            }
        }
        lp += self.log_jacobian(u);

        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(self.coordinate_name(i)));
        }
        Ok(lp)
    }
}

/// Categorical log-likelihood of `labels` under softmax(`scores`) and the
/// residuals onehot - softmax, row by row. Consumes `scores`.
fn softmax_residuals(mut scores: DMatrix<f64>, labels: &[usize]) -> (f64, DMatrix<f64>) {
    let mut ll = 0.0;
    let c = scores.ncols();
    for (i, &y) in labels.iter().enumerate() {
        let mut max = f64::NEG_INFINITY;
        for k in 0..c {
            max = max.max(scores[(i, k)]);
        }
        let own = scores[(i, y)] - max;
        let mut total = 0.0;
        for k in 0..c {
            let e = (scores[(i, k)] - max).exp();
            scores[(i, k)] = e;
            total += e;
        }
        ll += own - total.ln();
        for k in 0..c {
            scores[(i, k)] /= -total;
        }
        scores[(i, y)] += 1.0;
    }
    (ll, scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{LabelSpace, Observation};
    use crate::mapping::PriorWidths;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn space() -> LabelSpace {
        LabelSpace::from_names(&["a", "b", "c"], &[]).unwrap()
    }

    fn random_rows(rng: &mut ChaCha8Rng, n: usize, labelled: bool) -> Dataset {
        let obs = (0..n)
            .map(|i| {
                Observation::new(
                    vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)],
                    labelled.then_some(i % 3),
                    None,
                    i,
                )
            })
            .collect();
        Dataset::with_dim("t", 2, obs, space()).unwrap()
    }

    fn instance(seed: u64, frozen: bool) -> (DaRvmProblem, RvmModel) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rv = random_rows(&mut rng, 10, true);
        let rvm = RvmModel {
            relevance_vectors: rv.features(),
            weights: DMatrix::from_fn(3, 10, |_, _| rng.random_range(-2.0..2.0)),
            precisions: DMatrix::from_fn(3, 10, |_, _| rng.random_range(0.2..3.0)),
            kernel: KernelSpec::for_dim(2),
            label_space: space(),
            classes: vec![0, 1, 2],
            active_index: (0..10).collect(),
        };
        let source = random_rows(&mut rng, 15, true);
        let target = random_rows(&mut rng, 12, true);
        let prior = MappingPrior::centered_at(
            &MappingParams {
                scale: vec![1.1, 0.9],
                translation: vec![0.2, -0.1],
                rotation: vec![0.05],
            },
            &PriorWidths {
                scale_sd: 0.3,
                translation_sd: 0.5,
                rotation_sd: 0.2,
                ..PriorWidths::default()
            },
        )
        .unwrap();
        let p = DaRvmProblem::new(
            &rvm,
            &source,
            &target,
            &prior,
            &GammaHyper::new(0.5, 0.3).unwrap(),
            frozen,
        )
        .unwrap();
        (p, rvm)
    }

    fn random_state(p: &DaRvmProblem, rvm: &RvmModel, rng: &mut ChaCha8Rng) -> ModelState {
        let mut s = p.initial_state(rvm);
        for v in s.mapping.scale.iter_mut() {
            *v = rng.random_range(0.4..1.8);
        }
        for v in s.mapping.translation.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        for v in s.mapping.rotation.iter_mut() {
            *v = rng.random_range(-0.7..0.7);
        }
        s.weights = s.weights.map(|_| rng.random_range(-2.0..2.0));
        s.precisions = s.precisions.map(|_| rng.random_range(0.1..4.0));
        s
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for (seed, frozen) in [(1, false), (2, true)] {
            let (p, rvm) = instance(seed, frozen);
            for _ in 0..10 {
                let state = random_state(&p, &rvm, &mut rng);
                let u = p.to_unconstrained(&state).unwrap();
                let g = p.grad_log_joint(&state).unwrap();
                let mut g2 = vec![0.0; u.len()];
                let fused = p.logp_and_grad(&u, &mut g2).unwrap();
                assert_abs_diff_eq!(
                    fused,
                    p.log_density_unconstrained(&u).unwrap(),
                    epsilon = 1e-9
                );
                for i in 0..u.len() {
                    let h = 1e-5 * u[i].abs().max(1.0);
                    let mut up = u.clone();
                    up[i] += h;
                    let mut dn = u.clone();
                    dn[i] -= h;
                    let fd = (p.log_density_unconstrained(&up).unwrap()
                        - p.log_density_unconstrained(&dn).unwrap())
                        / (2.0 * h);
                    let rel = (fd - g[i]).abs() / g[i].abs().max(1.0);
                    assert!(
                        rel < 1e-5,
                        "{}: fd {fd} analytic {}",
                        p.coordinate_name(i),
                        g[i]
                    );
                }
            }
        }
    }

    #[test]
    fn empty_target_is_source_plus_priors() {
        let (p, rvm) = instance(3, false);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let state = random_state(&p, &rvm, &mut rng);
        let source = random_rows(&mut ChaCha8Rng::seed_from_u64(5), 15, true);
        let empty = Dataset::empty("t", 2, space());
        let q = DaRvmProblem::new(
            &rvm,
            &source,
            &empty,
            p.prior(),
            &GammaHyper::new(0.5, 0.3).unwrap(),
            false,
        )
        .unwrap();
        let lj = q.log_joint(&state).unwrap();

        // direct sum
        let mut expected = crate::mapping::log_prior(&state.mapping, p.prior()).unwrap();
        let (a, b) = (0.5f64, 0.3f64);
        for (&w, &al) in state.weights.iter().zip(state.precisions.iter()) {
            expected += -0.5 * (2.0 * std::f64::consts::PI / al).ln() - 0.5 * al * w * w;
            expected += a * b.ln() - libm::lgamma(a) + (a - 1.0) * al.ln() - b * al;
        }
        let rvm_at = RvmModel {
            weights: state.weights.clone(),
            ..rvm.clone()
        };
        for o in source.observations() {
            let pr = crate::rvm::predict_proba(&rvm_at, &o.features).unwrap();
            expected += pr[o.label.unwrap()].ln();
        }
        assert_abs_diff_eq!(lj, expected, epsilon = 1e-9);
    }

    #[test]
    fn duplicated_target_row_adds_its_log_predictive() {
        let (p, rvm) = instance(6, false);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let source = random_rows(&mut ChaCha8Rng::seed_from_u64(8), 15, true);
        let target = random_rows(&mut ChaCha8Rng::seed_from_u64(9), 5, true);
        let mut extra = target.observations().to_vec();
        extra.push(target.observations()[2].clone());
        let target2 = target.derive(extra).unwrap();
        let hyper = GammaHyper::new(0.5, 0.3).unwrap();
        let p1 = DaRvmProblem::new(&rvm, &source, &target, p.prior(), &hyper, false).unwrap();
        let p2 = DaRvmProblem::new(&rvm, &source, &target2, p.prior(), &hyper, false).unwrap();
        let state = random_state(&p, &rvm, &mut rng);
        let diff = p2.log_joint(&state).unwrap() - p1.log_joint(&state).unwrap();

        let o = &target.observations()[2];
        let mapped = state
            .mapping
            .compile()
            .unwrap()
            .apply(&DMatrix::from_row_slice(1, 2, &o.features))
            .unwrap();
        let rvm_at = RvmModel {
            weights: state.weights.clone(),
            ..rvm
        };
        let pr = crate::rvm::predict_proba(&rvm_at, &[mapped[(0, 0)], mapped[(0, 1)]]).unwrap();
        assert_abs_diff_eq!(diff, pr[o.label.unwrap()].ln(), epsilon = 1e-10);
    }

    #[test]
    fn rotation_beyond_bound_is_out_of_support() {
        let (p, rvm) = instance(10, false);
        let mut s = p.initial_state(&rvm);
        s.mapping.rotation[0] = std::f64::consts::FRAC_PI_4 + 1e-6;
        assert!(matches!(p.log_joint(&s), Err(Error::OutOfSupport)));
        assert!(p.to_unconstrained(&s).is_err());
    }

    #[test]
    fn prior_only_gradient_vanishes_at_the_mode() {
        let prior = MappingPrior::centered_at(
            &MappingParams {
                scale: vec![2.0, 3.0],
                translation: vec![0.5, -1.0],
                rotation: vec![0.0],
            },
            &PriorWidths {
                scale_sd: 0.1,
                translation_sd: 0.1,
                rotation_sd: 0.1,
                ..PriorWidths::default()
            },
        )
        .unwrap();
        let p = DaRvmProblem::prior_only(&prior).unwrap();
        assert_eq!(p.dim(), 5);
        let s = ModelState {
            mapping: prior.location(),
            weights: DMatrix::zeros(0, 0),
            precisions: DMatrix::zeros(0, 0),
        };
        let g = p.grad_log_joint(&s).unwrap();
        // translation coordinates are untransformed, so they vanish exactly
        assert!(g[2].abs() < 1e-8 && g[3].abs() < 1e-8);
        // the remaining ones only carry the Jacobian term
        let u = p.to_unconstrained(&s).unwrap();
        assert_abs_diff_eq!(g[0], 1.0, epsilon = 1e-8);
        assert_abs_diff_eq!(g[4], 1.0 - 2.0 * sigmoid(u[4]), epsilon = 1e-8);
    }

    #[test]
    fn dimension_counts_present_weights_only() {
        let (p, _) = instance(11, false);
        assert_eq!(p.dim(), 2 + 2 + 1 + 30 + 30);
        let (q, _) = instance(11, true);
        assert_eq!(q.dim(), 2 + 2 + 1 + 30);
        assert_eq!(q.coordinate_name(5), "w[0,0]");
        assert_eq!(p.coordinate_name(35), "log_alpha[0,0]");
    }

    #[test]
    fn transforms_round_trip() {
        for tf in [
            Transform::Identity,
            Transform::Lower(0.0),
            Transform::Upper(2.0),
            Transform::Interval(-0.7, 0.7),
        ] {
            for u in [-3.0, -0.2, 0.0, 1.5] {
                let x = tf.forward(u);
                assert_abs_diff_eq!(tf.inverse(x).unwrap(), u, epsilon = 1e-12);
                let h = 1e-6;
                let fd = (tf.forward(u + h) - tf.forward(u - h)) / (2.0 * h);
                assert_abs_diff_eq!(tf.dx_du(u), fd, epsilon = 1e-7);
                assert_abs_diff_eq!(tf.log_jacobian(u), tf.dx_du(u).abs().ln(), epsilon = 1e-12);
            }
        }
    }
}
