//! No-U-turn Hamiltonian Monte Carlo with multinomial trajectory sampling,
//! dual-averaged step size and windowed diagonal metric adaptation.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// A differentiable log density over `R^dim`.
pub trait LogDensity {
    fn dim(&self) -> usize;

    /// Returns `ln p(x)` and writes its gradient into `grad`. An error is
    /// treated by the sampler as an infinitely unlikely point.
    fn logp_and_grad(&self, x: &[f64], grad: &mut [f64]) -> Result<f64>;
}

const MAX_DELTA_H: f64 = 1000.0;

#[derive(Clone, Debug)]
struct Point {
    q: Vec<f64>,
    p: Vec<f64>,
    grad: Vec<f64>,
    logp: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Sampler state that survives across transitions: step size and the
/// diagonal inverse metric.
#[derive(Clone, Debug, PartialEq)]
pub struct Adaptation {
    pub step_size: f64,
    pub inv_metric: Vec<f64>,
}

impl Adaptation {
    pub fn unit(dim: usize) -> Self {
        Self {
            step_size: 1.0,
            inv_metric: vec![1.0; dim],
        }
    }
}

/// Outcome of one transition.
#[derive(Clone, Copy, Debug, Default)]
pub struct TransitionStats {
    pub accept_stat: f64,
    pub n_leapfrog: usize,
    pub depth: usize,
    pub divergent: bool,
    pub energy: f64,
}

struct Hamiltonian<'a, D: LogDensity + ?Sized> {
    density: &'a D,
    inv_metric: &'a [f64],
}

impl<D: LogDensity + ?Sized> Hamiltonian<'_, D> {
    fn evaluate(&self, q: &[f64], grad: &mut [f64]) -> f64 {
        match self.density.logp_and_grad(q, grad) {
            Ok(v) if v.is_finite() => v,
            _ => f64::NEG_INFINITY,
        }
    }

    fn kinetic(&self, p: &[f64]) -> f64 {
        0.5 * p
            .iter()
            .zip(self.inv_metric)
            .map(|(p, m)| p * p * m)
            .sum::<f64>()
    }

    fn energy(&self, z: &Point) -> f64 {
        let h = -z.logp + self.kinetic(&z.p);
        if h.is_nan() {
            f64::INFINITY
        } else {
            h
        }
    }

    fn p_sharp(&self, p: &[f64]) -> Vec<f64> {
        p.iter().zip(self.inv_metric).map(|(p, m)| p * m).collect()
    }

    fn leapfrog(&self, z: &mut Point, eps: f64) {
        for (p, g) in z.p.iter_mut().zip(&z.grad) {
            *p += 0.5 * eps * g;
        }
        for ((q, p), m) in z.q.iter_mut().zip(&z.p).zip(self.inv_metric) {
            *q += eps * m * p;
        }
        z.logp = self.evaluate(&z.q, &mut z.grad);
        if z.logp.is_finite() {
            for (p, g) in z.p.iter_mut().zip(&z.grad) {
                *p += 0.5 * eps * g;
            }
        }
    }

    fn sample_momentum<R: Rng>(&self, rng: &mut R, p: &mut [f64]) {
        for (pi, m) in p.iter_mut().zip(self.inv_metric) {
            let z: f64 = rng.sample(StandardNormal);
            *pi = z / m.sqrt();
        }
    }
}

fn criterion(p_sharp_minus: &[f64], p_sharp_plus: &[f64], rho: &[f64]) -> bool {
    dot(p_sharp_plus, rho) > 0.0 && dot(p_sharp_minus, rho) > 0.0
}

/// Endpoint momenta of a subtree.
struct Ends {
    p_beg: Vec<f64>,
    p_sharp_beg: Vec<f64>,
    p_end: Vec<f64>,
    p_sharp_end: Vec<f64>,
}

struct TreeBuilder<'a, 'b, D: LogDensity + ?Sized, R: Rng> {
    ham: &'a Hamiltonian<'b, D>,
    rng: &'a mut R,
    eps: f64,
    h0: f64,
    n_leapfrog: usize,
    sum_metro_prob: f64,
    divergent: bool,
}

impl<D: LogDensity + ?Sized, R: Rng> TreeBuilder<'_, '_, D, R> {
    /// Extends `z` by `2^depth` leapfrog steps in direction `sign`.
    /// Returns whether the subtree is valid; on success `propose` holds the
    /// subtree's multinomial draw and `rho` is incremented by its momenta.
    fn build(
        &mut self,
        depth: usize,
        z: &mut Point,
        sign: f64,
        propose: &mut Point,
        rho: &mut [f64],
        log_sum_weight: &mut f64,
    ) -> (bool, Option<Ends>) {
        if depth == 0 {
            self.ham.leapfrog(z, sign * self.eps);
            self.n_leapfrog += 1;
            let h = self.ham.energy(z);
            if h - self.h0 > MAX_DELTA_H || !h.is_finite() {
                self.divergent = true;
            }
            *log_sum_weight = log_add(*log_sum_weight, self.h0 - h);
            self.sum_metro_prob += if self.h0 - h > 0.0 {
                1.0
            } else {
                (self.h0 - h).exp()
            };
            propose.clone_from(z);
            for (r, p) in rho.iter_mut().zip(&z.p) {
                *r += p;
            }
            let ps = self.ham.p_sharp(&z.p);
            let ends = Ends {
                p_beg: z.p.clone(),
                p_sharp_beg: ps.clone(),
                p_end: z.p.clone(),
                p_sharp_end: ps,
            };
            return (!self.divergent, Some(ends));
        }

        let n = z.q.len();
        let mut lsw_init = f64::NEG_INFINITY;
        let mut rho_init = vec![0.0; n];
        let (ok, init) = self.build(depth - 1, z, sign, propose, &mut rho_init, &mut lsw_init);
        if !ok {
            return (false, None);
        }
        let init = init.unwrap();

        let mut propose_final = z.clone();
        let mut lsw_final = f64::NEG_INFINITY;
        let mut rho_final = vec![0.0; n];
        let (ok, fin) = self.build(
            depth - 1,
            z,
            sign,
            &mut propose_final,
            &mut rho_final,
            &mut lsw_final,
        );
        if !ok {
            return (false, None);
        }
        let fin = fin.unwrap();

        let lsw_subtree = log_add(lsw_init, lsw_final);
        *log_sum_weight = log_add(*log_sum_weight, lsw_subtree);
        if lsw_final > lsw_subtree {
            *propose = propose_final;
        } else {
            let accept = (lsw_final - lsw_subtree).exp();
            if self.rng.random::<f64>() < accept {
                *propose = propose_final;
            }
        }

        let rho_subtree: Vec<f64> = rho_init
            .iter()
            .zip(&rho_final)
            .map(|(a, b)| a + b)
            .collect();
        for (r, s) in rho.iter_mut().zip(&rho_subtree) {
            *r += s;
        }
        let mut persist = criterion(&init.p_sharp_beg, &fin.p_sharp_end, &rho_subtree);
        let rho_ext: Vec<f64> = rho_init
            .iter()
            .zip(&fin.p_beg)
            .map(|(a, b)| a + b)
            .collect();
        persist &= criterion(&init.p_sharp_beg, &fin.p_sharp_beg, &rho_ext);
        let rho_ext: Vec<f64> = rho_final
            .iter()
            .zip(&init.p_end)
            .map(|(a, b)| a + b)
            .collect();
        persist &= criterion(&init.p_sharp_end, &fin.p_sharp_end, &rho_ext);

        (
            persist,
            Some(Ends {
                p_beg: init.p_beg,
                p_sharp_beg: init.p_sharp_beg,
                p_end: fin.p_end,
                p_sharp_end: fin.p_sharp_end,
            }),
        )
    }
}

/// One NUTS transition from `q0` (with cached log density and gradient).
fn transition<D: LogDensity + ?Sized, R: Rng>(
    ham: &Hamiltonian<'_, D>,
    z0: &Point,
    eps: f64,
    max_depth: usize,
    rng: &mut R,
) -> (Point, TransitionStats) {
    let n = z0.q.len();
    let mut z = z0.clone();
    ham.sample_momentum(rng, &mut z.p);
    let h0 = ham.energy(&z);

    let mut z_fwd = z.clone();
    let mut z_bck = z.clone();
    let mut sample = z.clone();
    let p_sharp0 = ham.p_sharp(&z.p);
    // momenta at the backward and forward ends of the whole trajectory
    let (mut p_bck, mut p_sharp_bck) = (z.p.clone(), p_sharp0.clone());
    let (mut p_fwd, mut p_sharp_fwd) = (z.p.clone(), p_sharp0);
    let mut rho = z.p.clone();
    let mut log_sum_weight = 0.0;
    let mut depth = 0;

    let mut tb = TreeBuilder {
        ham,
        rng,
        eps,
        h0,
        n_leapfrog: 0,
        sum_metro_prob: 0.0,
        divergent: false,
    };

    while depth < max_depth {
        let mut rho_sub = vec![0.0; n];
        let mut lsw_sub = f64::NEG_INFINITY;
        let mut propose = z.clone();
        let forward = tb.rng.random::<f64>() > 0.5;
        let (valid, ends) = if forward {
            tb.build(
                depth,
                &mut z_fwd,
                1.0,
                &mut propose,
                &mut rho_sub,
                &mut lsw_sub,
            )
        } else {
            tb.build(
                depth,
                &mut z_bck,
                -1.0,
                &mut propose,
                &mut rho_sub,
                &mut lsw_sub,
            )
        };
        if !valid {
            break;
        }
        let ends = ends.unwrap();
        depth += 1;

        if lsw_sub > log_sum_weight {
            sample = propose;
        } else {
            let accept = (lsw_sub - log_sum_weight).exp();
            if tb.rng.random::<f64>() < accept {
                sample = propose;
            }
        }
        log_sum_weight = log_add(log_sum_weight, lsw_sub);

        // Old trajectory and new subtree, ordered backward to forward.
        let (rho_b, rho_f, b_end_p, b_end_ps, f_beg_p, f_beg_ps) = if forward {
            (
                &rho,
                &rho_sub,
                &p_fwd,
                &p_sharp_fwd,
                &ends.p_beg,
                &ends.p_sharp_beg,
            )
        } else {
            (
                &rho_sub,
                &rho,
                &ends.p_beg,
                &ends.p_sharp_beg,
                &p_bck,
                &p_sharp_bck,
            )
        };
        let rho_total: Vec<f64> = rho_b.iter().zip(rho_f).map(|(a, b)| a + b).collect();
        let rho_ext_b: Vec<f64> = rho_b.iter().zip(f_beg_p).map(|(a, b)| a + b).collect();
        let rho_ext_f: Vec<f64> = rho_f.iter().zip(b_end_p).map(|(a, b)| a + b).collect();
        let (new_bck_ps, new_fwd_ps) = if forward {
            (p_sharp_bck.clone(), ends.p_sharp_end.clone())
        } else {
            (ends.p_sharp_end.clone(), p_sharp_fwd.clone())
        };
        let mut persist = criterion(&new_bck_ps, &new_fwd_ps, &rho_total);
        persist &= criterion(&new_bck_ps, f_beg_ps, &rho_ext_b);
        persist &= criterion(b_end_ps, &new_fwd_ps, &rho_ext_f);

        if forward {
            p_fwd = ends.p_end;
            p_sharp_fwd = ends.p_sharp_end;
        } else {
            p_bck = ends.p_end;
            p_sharp_bck = ends.p_sharp_end;
        }
        rho = rho_total;
        if !persist {
            break;
        }
    }

    let n_leapfrog = tb.n_leapfrog.max(1);
    let stats = TransitionStats {
        accept_stat: tb.sum_metro_prob / n_leapfrog as f64,
        n_leapfrog: tb.n_leapfrog,
        depth,
        divergent: tb.divergent,
        energy: ham.energy(&sample),
    };
    (sample, stats)
}

struct DualAveraging {
    mu: f64,
    s_bar: f64,
    x_bar: f64,
    counter: f64,
    delta: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    fn new(eps: f64, delta: f64) -> Self {
        Self {
            mu: (10.0 * eps).ln(),
            s_bar: 0.0,
            x_bar: 0.0,
            counter: 0.0,
            delta,
        }
    }

    fn restart(&mut self, eps: f64) {
        self.mu = (10.0 * eps).ln();
        self.s_bar = 0.0;
        self.x_bar = 0.0;
        self.counter = 0.0;
    }

    fn learn(&mut self, accept_stat: f64) -> f64 {
        self.counter += 1.0;
        let a = accept_stat.min(1.0);
        let eta = 1.0 / (self.counter + Self::T0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.delta - a);
        let x = self.mu - self.s_bar * self.counter.sqrt() / Self::GAMMA;
        let x_eta = self.counter.powf(-Self::KAPPA);
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x;
        x.exp()
    }

    fn final_step(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// Windows of the diagonal metric estimation: an initial fast interval, a
/// series of doubling slow windows, and a terminal fast interval.
struct Windows {
    num_warmup: usize,
    init_buffer: usize,
    term_buffer: usize,
    window_size: usize,
    next_window: usize,
    counter: usize,
}

impl Windows {
    fn new(num_warmup: usize) -> Self {
        let (mut init_buffer, mut term_buffer, mut base) = (75, 50, 25);
        if num_warmup < init_buffer + term_buffer + base {
            init_buffer = (0.15 * num_warmup as f64) as usize;
            term_buffer = (0.1 * num_warmup as f64) as usize;
            base = num_warmup.saturating_sub(init_buffer + term_buffer);
        }
        Self {
            num_warmup,
            init_buffer,
            term_buffer,
            window_size: base,
            next_window: (init_buffer + base).saturating_sub(1),
            counter: 0,
        }
    }

    fn in_window(&self) -> bool {
        self.counter >= self.init_buffer
            && self.counter < self.num_warmup - self.term_buffer
            && self.counter != self.num_warmup
    }

    fn window_ends(&self) -> bool {
        self.counter == self.next_window && self.counter != self.num_warmup
    }

    fn advance_window(&mut self) {
        let last = self.num_warmup - self.term_buffer - 1;
        if self.next_window == last {
            return;
        }
        self.window_size *= 2;
        self.next_window = self.counter + self.window_size;
        if self.next_window != last {
            let boundary = self.next_window + 2 * self.window_size;
            if boundary >= self.num_warmup - self.term_buffer {
                self.next_window = last;
            }
        }
    }
}

/// Welford accumulator of per-coordinate variances.
struct VarEstimator {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl VarEstimator {
    fn new(dim: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    fn add(&mut self, q: &[f64]) {
        self.n += 1;
        for i in 0..q.len() {
            let delta = q[i] - self.mean[i];
            self.mean[i] += delta / self.n as f64;
            self.m2[i] += delta * (q[i] - self.mean[i]);
        }
    }

    /// Variance shrunk towards a small constant.
    fn regularized(&self) -> Vec<f64> {
        let n = self.n as f64;
        self.m2
            .iter()
            .map(|m2| {
                let var = if self.n > 1 { m2 / (n - 1.0) } else { 1.0 };
                (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
            })
            .collect()
    }

    fn restart(&mut self) {
        self.n = 0;
        self.mean.iter_mut().for_each(|v| *v = 0.0);
        self.m2.iter_mut().for_each(|v| *v = 0.0);
    }
}

#[derive(Clone, Debug)]
pub struct NutsSettings {
    pub warmup: usize,
    pub draws: usize,
    pub target_accept: f64,
    pub max_depth: usize,
    /// Adapt the diagonal metric during warmup, not only the step size.
    pub adapt_metric: bool,
}

/// Draws of one chain in unconstrained coordinates.
#[derive(Clone, Debug)]
pub struct ChainOutput {
    pub draws: Vec<Vec<f64>>,
    pub stats: Vec<TransitionStats>,
    pub adaptation: Adaptation,
    pub warmup_divergences: usize,
}

fn init_point<D: LogDensity + ?Sized>(density: &D, q: &[f64]) -> Result<Point> {
    let mut grad = vec![0.0; q.len()];
    let logp = density.logp_and_grad(q, &mut grad).map_err(|e| match e {
        Error::NonFiniteGradient(name) => Error::NonFiniteGradient(name),
        _ => Error::NonFiniteInitialDensity,
    })?;
    if !logp.is_finite() {
        return Err(Error::NonFiniteInitialDensity);
    }
    Ok(Point {
        q: q.to_vec(),
        p: vec![0.0; q.len()],
        grad,
        logp,
    })
}

/// Doubles or halves the step size until a single leapfrog step crosses an
/// acceptance probability of 0.8.
fn heuristic_step_size<D: LogDensity + ?Sized, R: Rng>(
    ham: &Hamiltonian<'_, D>,
    z0: &Point,
    mut eps: f64,
    rng: &mut R,
) -> f64 {
    let target = 0.8f64.ln();
    let step = |eps: f64, rng: &mut R| -> f64 {
        let mut z = z0.clone();
        ham.sample_momentum(rng, &mut z.p);
        let h0 = ham.energy(&z);
        ham.leapfrog(&mut z, eps);
        let delta = h0 - ham.energy(&z);
        if delta.is_nan() {
            f64::NEG_INFINITY
        } else {
            delta
        }
    };
    let first = step(eps, rng);
    let direction = if first > target { 1 } else { -1 };
    for _ in 0..100 {
        let delta = step(eps, rng);
        if (direction == 1 && !(delta > target)) || (direction == -1 && !(delta < target)) {
            break;
        }
        eps = if direction == 1 { 2.0 * eps } else { 0.5 * eps };
        if !(1e-12..=1e7).contains(&eps) {
            break;
        }
    }
    eps.clamp(1e-12, 1e7)
}

/// Runs warmup and sampling for one chain.
pub fn run_chain<D: LogDensity + ?Sized, R: Rng>(
    density: &D,
    q0: &[f64],
    settings: &NutsSettings,
    start: Option<&Adaptation>,
    rng: &mut R,
) -> Result<ChainOutput> {
    let dim = density.dim();
    if q0.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: q0.len(),
        });
    }
    let mut adapt = start.cloned().unwrap_or_else(|| Adaptation::unit(dim));
    if adapt.inv_metric.len() != dim {
        adapt = Adaptation::unit(dim);
    }
    let mut z = init_point(density, q0)?;

    let mut eps = {
        let ham = Hamiltonian {
            density,
            inv_metric: &adapt.inv_metric,
        };
        heuristic_step_size(&ham, &z, adapt.step_size, rng)
    };
    let mut da = DualAveraging::new(eps, settings.target_accept);
    let mut windows = Windows::new(settings.warmup);
    let mut est = VarEstimator::new(dim);
    let mut warmup_divergences = 0;

    for _ in 0..settings.warmup {
        let (next, st) = {
            let ham = Hamiltonian {
                density,
                inv_metric: &adapt.inv_metric,
            };
            transition(&ham, &z, eps, settings.max_depth, rng)
        };
        z = next;
        warmup_divergences += usize::from(st.divergent);
        eps = da.learn(st.accept_stat);
        if settings.adapt_metric && settings.warmup >= 20 {
            if windows.in_window() {
                est.add(&z.q);
            }
            if windows.window_ends() {
                windows.advance_window();
                adapt.inv_metric = est.regularized();
                est.restart();
                let ham = Hamiltonian {
                    density,
                    inv_metric: &adapt.inv_metric,
                };
                eps = heuristic_step_size(&ham, &z, eps, rng);
                da.restart(eps);
            }
        }
        windows.counter += 1;
    }
    if settings.warmup > 0 {
        eps = da.final_step();
    }
    adapt.step_size = eps;

    let ham = Hamiltonian {
        density,
        inv_metric: &adapt.inv_metric,
    };
    let mut draws = Vec::with_capacity(settings.draws);
    let mut stats = Vec::with_capacity(settings.draws);
    for _ in 0..settings.draws {
        let (next, st) = transition(&ham, &z, eps, settings.max_depth, rng);
        z = next;
        draws.push(z.q.clone());
        stats.push(st);
    }
    Ok(ChainOutput {
        draws,
        stats,
        adaptation: adapt,
        warmup_divergences,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Gaussian {
        mean: Vec<f64>,
        sd: Vec<f64>,
    }

    impl LogDensity for Gaussian {
        fn dim(&self) -> usize {
            self.mean.len()
        }

        fn logp_and_grad(&self, x: &[f64], grad: &mut [f64]) -> Result<f64> {
            let mut lp = 0.0;
            for i in 0..x.len() {
                let z = (x[i] - self.mean[i]) / self.sd[i];
                lp -= 0.5 * z * z;
                grad[i] = -z / self.sd[i];
            }
            Ok(lp)
        }
    }

    fn settings() -> NutsSettings {
        NutsSettings {
            warmup: 500,
            draws: 2000,
            target_accept: 0.8,
            max_depth: 10,
            adapt_metric: true,
        }
    }

    #[test]
    fn recovers_anisotropic_gaussian() {
        let g = Gaussian {
            mean: vec![1.0, -3.0, 10.0],
            sd: vec![0.01, 1.0, 20.0],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = run_chain(&g, &[0.0, 0.0, 0.0], &settings(), None, &mut rng).unwrap();
        let n = out.draws.len() as f64;
        for i in 0..3 {
            let m = out.draws.iter().map(|d| d[i]).sum::<f64>() / n;
            let v = out.draws.iter().map(|d| (d[i] - m).powi(2)).sum::<f64>() / (n - 1.0);
            assert!((m - g.mean[i]).abs() < 0.15 * g.sd[i], "mean {i}: {m}");
            assert!(
                (v.sqrt() / g.sd[i] - 1.0).abs() < 0.15,
                "sd {i}: {}",
                v.sqrt()
            );
        }
        // the adapted metric tracks the scales
        assert!(out.adaptation.inv_metric[2] > 100.0 * out.adaptation.inv_metric[1]);
        let accept = out.stats.iter().map(|s| s.accept_stat).sum::<f64>() / n;
        assert!(accept > 0.6, "{accept}");
        assert_eq!(out.stats.iter().filter(|s| s.divergent).count(), 0);
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let g = Gaussian {
            mean: vec![0.0, 2.0],
            sd: vec![1.0, 3.0],
        };
        let s = NutsSettings {
            warmup: 100,
            draws: 50,
            ..settings()
        };
        let a = run_chain(&g, &[0.5, 0.5], &s, None, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = run_chain(&g, &[0.5, 0.5], &s, None, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.draws, b.draws);
    }

    struct Broken;

    impl LogDensity for Broken {
        fn dim(&self) -> usize {
            1
        }

        fn logp_and_grad(&self, _: &[f64], _: &mut [f64]) -> Result<f64> {
            Ok(f64::NEG_INFINITY)
        }
    }

    #[test]
    fn non_finite_start_is_rejected() {
        let r = run_chain(
            &Broken,
            &[0.0],
            &settings(),
            None,
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        assert!(matches!(r, Err(Error::NonFiniteInitialDensity)));
    }

    #[test]
    fn windows_follow_the_doubling_schedule() {
        let mut w = Windows::new(1000);
        let mut ends = Vec::new();
        for _ in 0..1000 {
            if w.window_ends() {
                ends.push(w.counter);
                w.advance_window();
            }
            w.counter += 1;
        }
        assert_eq!(ends, vec![99, 149, 249, 449, 949]);
    }
}
