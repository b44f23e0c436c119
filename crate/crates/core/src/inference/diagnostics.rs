//! Convergence and efficiency statistics of MCMC output.

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn var(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)
}

/// Potential scale reduction over chains split in half. Returns NaN when
/// chains are too short and 1 for a constant parameter.
pub fn split_rhat(chains: &[&[f64]]) -> f64 {
    let n = chains.iter().map(|c| c.len()).min().unwrap_or(0) / 2;
    if n < 2 {
        return f64::NAN;
    }
    let halves: Vec<&[f64]> = chains
        .iter()
        .flat_map(|c| {
            let c = &c[..2 * n];
            [&c[..n], &c[n..]]
        })
        .collect();
    let means: Vec<f64> = halves.iter().map(|h| mean(h)).collect();
    let w = mean(&halves.iter().map(|h| var(h)).collect::<Vec<_>>());
    let b = n as f64 * var(&means);
    if w == 0.0 {
        return if b == 0.0 { 1.0 } else { f64::INFINITY };
    }
    let var_plus = (n as f64 - 1.0) / n as f64 * w + b / n as f64;
    (var_plus / w).sqrt()
}

/// Sample autocovariance at every lag, normalized by `n`.
fn autocovariance(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let m = mean(x);
    (0..n)
        .map(|lag| {
            (0..n - lag)
                .map(|i| (x[i] - m) * (x[i + lag] - m))
                .sum::<f64>()
                / n as f64
        })
        .collect()
}

/// Effective sample size from the initial monotone positive sequence of
/// autocorrelation pair sums, combined across chains.
pub fn effective_sample_size(chains: &[&[f64]]) -> f64 {
    let m = chains.len();
    let n = chains.iter().map(|c| c.len()).min().unwrap_or(0);
    if m == 0 || n < 4 {
        return f64::NAN;
    }
    let chains: Vec<&[f64]> = chains.iter().map(|c| &c[..n]).collect();
    let acov: Vec<Vec<f64>> = chains.iter().map(|c| autocovariance(c)).collect();
    let chain_means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let nf = n as f64;
    let w = mean(
        &acov
            .iter()
            .map(|a| a[0] * nf / (nf - 1.0))
            .collect::<Vec<_>>(),
    );
    if w == 0.0 {
        return (m * n) as f64;
    }
    let b_over_n = if m > 1 { var(&chain_means) } else { 0.0 };
    let var_plus = w * (nf - 1.0) / nf + b_over_n;
    let rho = |lag: usize| -> f64 {
        let mean_acov = acov.iter().map(|a| a[lag]).sum::<f64>() / m as f64;
        1.0 - (w - mean_acov) / var_plus
    };

    let mut rho_hat = vec![0.0; n];
    rho_hat[0] = 1.0;
    rho_hat[1] = rho(1);
    let mut t = 1;
    while t + 2 < n {
        let a = rho(t + 1);
        let b = rho(t + 2);
        if a + b < 0.0 {
            break;
        }
        rho_hat[t + 1] = a;
        rho_hat[t + 2] = b;
        t += 2;
    }
    let max_t = t;
    // enforce a monotone sequence of pair sums
    let mut k = 1;
    while k + 2 <= max_t {
        let prev = rho_hat[k - 1] + rho_hat[k];
        if rho_hat[k + 1] + rho_hat[k + 2] > prev {
            rho_hat[k + 1] = prev / 2.0;
            rho_hat[k + 2] = prev / 2.0;
        }
        k += 2;
    }
    let tau = -1.0 + 2.0 * rho_hat[..=max_t].iter().sum::<f64>();
    let total = (m * n) as f64;
    total / tau.max(1.0 / total.log10().max(1.0))
}

/// Linearly interpolated quantile of an ascending slice.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let h = p.clamp(0.0, 1.0) * (n - 1) as f64;
            let lo = h.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn iid_draws_have_ess_near_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..4000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let ess = effective_sample_size(&[&x]);
        assert!((ess / 4000.0 - 1.0).abs() < 0.15, "{ess}");
    }

    #[test]
    fn ar1_ess_matches_theory() {
        // ESS/N = (1 - phi) / (1 + phi) for an AR(1) process
        let phi = 0.8;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut x = vec![0.0; 20000];
        for i in 1..x.len() {
            let e: f64 = StandardNormal.sample(&mut rng);
            x[i] = phi * x[i - 1] + e;
        }
        let ess = effective_sample_size(&[&x]);
        let expected = 20000.0 * (1.0 - phi) / (1.0 + phi);
        assert!((ess / expected - 1.0).abs() < 0.2, "{ess} vs {expected}");
    }

    #[test]
    fn rhat_flags_separated_chains() {
        let a: Vec<f64> = (0..100).map(|i| (i % 7) as f64).collect();
        let b: Vec<f64> = a.iter().map(|v| v + 50.0).collect();
        assert!(split_rhat(&[&a, &b]) > 2.0);
        assert!((split_rhat(&[&a, &a]) - 1.0).abs() < 0.05);
    }

    #[test]
    fn quantile_interpolates() {
        let s = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&s, 0.0), 1.0);
        assert_eq!(quantile(&s, 1.0), 4.0);
        assert!((quantile(&s, 0.5) - 2.5).abs() < 1e-15);
    }
}
