//! Acceptance criteria, one PASS/FAIL line each. Runs without the libtest
//! harness so the lines show up in plain `cargo test` output.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use darvm::active::{
    decide_query, entropy, info_efficiency, merge_probs, query_eta, QueryTrajectory,
};
use darvm::data::{Dataset, LabelSpace};
use darvm::eval::{jmmd, macro_f1, Bandwidth};
use darvm::experiment::{
    report, restricted_label_comparison, run_experiment, run_repeats, summarize, write_run,
    DataSource, ExperimentConfig, RepeatRecord, RepeatSetup, Strategy,
};
use darvm::inference::{
    predict_labels, sample_posterior, DaRvmProblem, Domain, ModelState, SamplerConfig,
};
use darvm::mapping::{
    apply_mapping, assemble_rotation, n_angles, nca_prior_means, nca_transform, Frame,
    MappingParams, MappingPrior, NormalStats, PriorWidths,
};
use darvm::rvm::{predict_proba, KernelSpec, RvmModel};
use darvm::synthetic::{generate_population, SyntheticSpec};
use darvm::truncnorm::Bounds;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }

    fn skip(detail: impl Into<String>) -> Option<Self> {
        println!("criterion 11 [bridge data]: SKIP ({})", detail.into());
        None
    }
}

/// The widths used when scale and translation must move far from the NCA
/// location (scale and translation 1, rotation 0.1).
fn wide_prior() -> PriorWidths {
    PriorWidths {
        scale_sd: 1.0,
        translation_sd: 1.0,
        ..PriorWidths::default()
    }
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Density of a truncated normal from the textbook formula.
fn truncated_pdf(x: f64, mu: f64, sd: f64, lo: f64, hi: f64) -> f64 {
    let z = (x - mu) / sd;
    let phi = (-0.5 * z * z).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt());
    phi / (std_normal_cdf((hi - mu) / sd) - std_normal_cdf((lo - mu) / sd))
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = n + n % 2;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

fn criterion_1() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut orth = 0.0f64;
    let mut det = 0.0f64;
    for d in 1..=5 {
        for _ in 0..50 {
            let theta: Vec<f64> = (0..n_angles(d))
                .map(|_| rng.random_range(-std::f64::consts::PI..std::f64::consts::PI))
                .collect();
            let r = assemble_rotation(&theta, d).unwrap();
            orth = orth.max((r.transpose() * &r - DMatrix::identity(d, d)).abs().max());
            det = det.max((r.determinant() - 1.0).abs());
        }
    }

    // gradient against central differences of the directly evaluated density
    let spec = SyntheticSpec::default();
    let (s, t, _) = generate_population(&spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let src = s.filter(|_| rng.random_bool(0.15));
    let tgt = t.filter(|_| rng.random_bool(0.15));
    let frame = Frame::from_normal(
        &NormalStats::from_rows(&src.of_classes(&[0]).features()).unwrap(),
        &NormalStats::from_rows(&tgt.of_classes(&[0]).features()).unwrap(),
    )
    .unwrap();
    let src = src
        .with_features(&frame.source_rows(&src.features()).unwrap())
        .unwrap();
    let tgt = tgt
        .with_features(&frame.target_rows(&tgt.features()).unwrap())
        .unwrap();
    let rvm = darvm::rvm::fit_pruned(
        &src,
        &KernelSpec::for_dim(2),
        &darvm::rvm::GammaHyper::default(),
        &darvm::rvm::EmConfig::default(),
        1e-5,
    )
    .unwrap();
    let tgt = tgt.of_classes(&rvm.classes);
    let prior = MappingPrior::centered_at(&MappingParams::identity(2), &wide_prior()).unwrap();
    let hyper = darvm::rvm::GammaHyper::new(0.5, 0.5).unwrap();
    let problem = DaRvmProblem::new(&rvm, &src, &tgt, &prior, &hyper, false).unwrap();
    let mut worst_rel = 0.0f64;
    for _ in 0..20 {
        let state = ModelState {
            mapping: MappingParams {
                scale: (0..2).map(|_| rng.random_range(0.5..1.5)).collect(),
                translation: (0..2).map(|_| rng.random_range(-0.5..0.5)).collect(),
                rotation: vec![rng.random_range(-0.5..0.5)],
            },
            weights: rvm.weights.map(|w| w + rng.random_range(-0.5..0.5)),
            precisions: rvm.precisions.map(|_| rng.random_range(0.2..3.0)),
        };
        let u = problem.to_unconstrained(&state).unwrap();
        let g = problem.grad_log_joint(&state).unwrap();
        // five-point stencil; the density sums thousands of terms, so a
        // two-point difference drowns in roundoff before truncation is small
        let f = |v: &[f64]| problem.log_density_unconstrained(v).unwrap();
        for i in 0..u.len() {
            let h = 1e-3 * u[i].abs().max(1.0);
            let at = |k: f64| {
                let mut v = u.clone();
                v[i] += k * h;
                f(&v)
            };
            let fd = (at(-2.0) - 8.0 * at(-1.0) + 8.0 * at(1.0) - at(2.0)) / (12.0 * h);
            worst_rel = worst_rel.max((fd - g[i]).abs() / g[i].abs().max(1.0));
        }
    }

    // each prior component integrates to one
    let p = MappingPrior::centered_at(
        &MappingParams {
            scale: vec![0.3, 1.2],
            translation: vec![-0.4, 2.0],
            rotation: vec![0.6],
        },
        &PriorWidths {
            scale_sd: 0.5,
            translation_sd: 0.7,
            rotation_sd: 0.4,
            ..PriorWidths::default()
        },
    )
    .unwrap();
    let loc = p.location();
    let base = darvm::mapping::log_prior(&loc, &p).unwrap();
    let quarter = std::f64::consts::FRAC_PI_4;
    let mut worst_mass = 0.0f64;
    let comps: Vec<(usize, usize, f64, f64, f64, f64)> = vec![
        (0, 0, 0.3, 0.5, 0.0, f64::INFINITY),
        (0, 1, 1.2, 0.5, 0.0, f64::INFINITY),
        (1, 0, -0.4, 0.7, f64::NEG_INFINITY, f64::INFINITY),
        (1, 1, 2.0, 0.7, f64::NEG_INFINITY, f64::INFINITY),
        (2, 0, 0.6, 0.4, -quarter, quarter),
    ];
    for (group, k, mu, sd, lo, hi) in comps {
        // log_prior at x minus log_prior at the location, plus the oracle's
        // log density at the location, is the component's log density at x
        let at_loc = truncated_pdf(mu, mu, sd, lo, hi).ln();
        let dens = |x: f64| {
            let mut m = loc.clone();
            match group {
                0 => m.scale[k] = x,
                1 => m.translation[k] = x,
                _ => m.rotation[k] = x,
            }
            (darvm::mapping::log_prior(&m, &p).unwrap() - base + at_loc).exp()
        };
        let a = lo.max(mu - 14.0 * sd);
        let b = hi.min(mu + 14.0 * sd);
        let mass = simpson(dens, a, b, 20_000);
        worst_mass = worst_mass.max((mass - 1.0).abs());
    }
    Verdict::new(
        orth < 1e-10 && det < 1e-10 && worst_rel < 1e-5 && worst_mass < 1e-6,
        format!(
            "orthogonality {orth:.1e}, det {det:.1e}, gradient rel err {worst_rel:.1e} over 20 states, prior mass err {worst_mass:.1e}"
        ),
    )
}

fn criterion_2() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for d in 1..=5 {
        for _ in 0..20 {
            let stats = |rng: &mut ChaCha8Rng| {
                NormalStats::new(
                    (0..d).map(|_| rng.random_range(-5.0..5.0)).collect(),
                    (0..d).map(|_| rng.random_range(0.1..4.0)).collect(),
                )
                .unwrap()
            };
            let (ss, ts) = (stats(&mut rng), stats(&mut rng));
            let x = DMatrix::from_fn(30, d, |_, _| rng.random_range(-10.0..10.0));
            let (scale, translation) = nca_prior_means(&ss, &ts).unwrap();
            let params = MappingParams {
                scale,
                translation,
                rotation: vec![0.0; n_angles(d)],
            };
            let a = apply_mapping(&x, &params).unwrap();
            let b = nca_transform(&x, &ss, &ts).unwrap();
            worst = worst.max((a - b).abs().max());
        }
    }
    Verdict::new(worst <= 1e-12, format!("max abs difference {worst:.1e}"))
}

fn prior_rvm(d: usize) -> RvmModel {
    RvmModel {
        relevance_vectors: DMatrix::zeros(0, d),
        weights: DMatrix::zeros(0, 0),
        precisions: DMatrix::zeros(0, 0),
        kernel: KernelSpec::for_dim(d),
        label_space: LabelSpace::from_names(&["a"], &[]).unwrap(),
        classes: vec![],
        active_index: vec![],
    }
}

fn criterion_3() -> Verdict {
    let prior = MappingPrior::centered_at(
        &MappingParams {
            scale: vec![1.3, 0.15, 0.8],
            translation: vec![0.5, -0.4, 0.0],
            rotation: vec![0.3, -0.7, 0.0],
        },
        &PriorWidths {
            scale_sd: 0.3,
            translation_sd: 0.5,
            rotation_sd: 0.2,
            ..PriorWidths::default()
        },
    )
    .unwrap();
    let problem = DaRvmProblem::prior_only(&prior).unwrap();
    let rvm = prior_rvm(3);
    let init = ModelState {
        mapping: prior.location(),
        weights: DMatrix::zeros(0, 0),
        precisions: DMatrix::zeros(0, 0),
    };
    let cfg = SamplerConfig {
        seed: 5,
        ..SamplerConfig::default()
    };
    let post = sample_posterior(&problem, &rvm, &init, &cfg, None).unwrap();
    let quarter = std::f64::consts::FRAC_PI_4;
    let tn_mean = |mu: f64, sd: f64, lo: f64, hi: f64| {
        darvm::truncnorm::TruncatedNormal::new(mu, sd, Bounds::new(lo, hi).unwrap())
            .unwrap()
            .mean()
    };
    let mut expected = Vec::new();
    for &m in &prior.scale_mean {
        expected.push(tn_mean(m, 0.3, 0.0, f64::INFINITY));
    }
    expected.extend_from_slice(&prior.translation_mean);
    for &m in &prior.rotation_mean {
        expected.push(tn_mean(m, 0.2, -quarter, quarter));
    }
    let summary = post.summary();
    let worst = summary
        .iter()
        .zip(&expected)
        .map(|(s, e)| (s.mean - e).abs() / (s.sd / s.ess.sqrt()))
        .fold(0.0f64, f64::max);
    Verdict::new(
        post.len() == 1000 && worst < 3.0,
        format!(
            "{} draws, worst |mean - prior mean| = {worst:.2} MC SE over 9 parameters",
            post.len()
        ),
    )
}

fn criterion_4() -> Verdict {
    let cfg = ExperimentConfig {
        prior: wide_prior(),
        ..ExperimentConfig::default()
    };
    let (s, t, truth) = cfg.data.load().unwrap();
    let truth = truth.unwrap();
    let setup = RepeatSetup::new(&cfg, &s, &t, 0).unwrap();
    let labelled = &setup.target_train;
    let framed = labelled
        .with_features(&setup.frame.target_rows(&labelled.features()).unwrap())
        .unwrap();
    let problem = DaRvmProblem::new(
        &setup.rvm,
        &setup.source_framed,
        &framed,
        &setup.prior,
        &cfg.hyper,
        true,
    )
    .unwrap();
    // precisions held at their EM values, as in the pipeline; with vague
    // precision hyperpriors the fully joint posterior has no usable mass
    let sampler = SamplerConfig {
        seed: 21,
        freeze_precisions: true,
        ..SamplerConfig::default()
    };
    let init = problem.initial_state(&setup.rvm);
    let post = sample_posterior(&problem, &setup.rvm, &init, &sampler, None).unwrap();
    let flat =
        |m: &MappingParams| [m.scale.clone(), m.translation.clone(), m.rotation.clone()].concat();
    let raw: Vec<Vec<f64>> = post
        .draws
        .iter()
        .map(|d| flat(&setup.frame.to_raw(&d.mapping).unwrap()))
        .collect();
    let tv = flat(&truth);
    let names = ["s1", "s2", "t1", "t2", "theta"];
    let mut zs = Vec::new();
    for k in 0..tv.len() {
        let xs: Vec<f64> = raw.iter().map(|r| r[k]).collect();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        zs.push((mean - tv[k]) / sd);
    }
    let test = &setup.target_test;
    let pred = predict_labels(
        &post,
        &setup.frame.target_rows(&test.features()).unwrap(),
        Domain::Target,
    )
    .unwrap();
    let f1 = macro_f1(&pred, &test.labels().unwrap(), test.label_space())
        .unwrap()
        .macro_f1;
    let detail: Vec<String> = names
        .iter()
        .zip(&zs)
        .map(|(n, z)| format!("{n} {z:+.2}"))
        .collect();
    Verdict::new(
        zs.iter().all(|z| z.abs() <= 2.0) && f1 >= 0.95,
        format!(
            "z of truth under posterior: {}; target-test macro-F1 {f1:.3}; divergences {}",
            detail.join(", "),
            post.diagnostics.divergences
        ),
    )
}

/// Sampler settings for the twenty-repeat protocol runs.
fn protocol_config(repeats: usize) -> ExperimentConfig {
    ExperimentConfig {
        repeats,
        prior: wide_prior(),
        sampler: SamplerConfig {
            warmup: 300,
            draws: 300,
            freeze_precisions: true,
            ..SamplerConfig::default()
        },
        refit_sampler: SamplerConfig {
            warmup: 100,
            draws: 100,
            freeze_precisions: true,
            ..SamplerConfig::default()
        },
        ..ExperimentConfig::default()
    }
}

fn criterion_5() -> Verdict {
    let cfg = protocol_config(20);
    let (s, t, _) = cfg.data.load().unwrap();
    let classes = ["ambient", "freezing", "damage1"]
        .map(|n| s.label_space().index_of(n).unwrap())
        .to_vec();
    let mut diffs = Vec::new();
    let (mut da_sum, mut to_sum) = (0.0, 0.0);
    for r in 0..cfg.repeats {
        let setup = RepeatSetup::new(&cfg, &s, &t, r).unwrap();
        let (da, to) = restricted_label_comparison(&cfg, &setup, &classes).unwrap();
        da_sum += da;
        to_sum += to;
        diffs.push(da - to);
    }
    let n = diffs.len();
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut boot: Vec<f64> = (0..10_000)
        .map(|_| (0..n).map(|_| diffs[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    boot.sort_by(f64::total_cmp);
    let lower = boot[(0.025 * boot.len() as f64) as usize];
    let mean = diffs.iter().sum::<f64>() / n as f64;
    Verdict::new(
        lower > 0.0,
        format!(
            "{n} repeats, mean macro-F1 DA {:.3} vs target-only {:.3}, paired diff {mean:.3}, 95% bootstrap lower bound {lower:.3}",
            da_sum / n as f64,
            to_sum / n as f64
        ),
    )
}

struct ProtocolRun {
    trajectories: BTreeMap<String, Vec<QueryTrajectory>>,
    failed: usize,
    dir: tempfile::TempDir,
}

fn protocol_run() -> ProtocolRun {
    let cfg = protocol_config(20);
    let (outcomes, space) = run_repeats(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_run(&cfg, dir.path(), &outcomes, &space).unwrap();
    let mut trajectories: BTreeMap<String, Vec<QueryTrajectory>> = BTreeMap::new();
    for o in &outcomes {
        for t in &o.trajectories {
            if t.error.is_none() {
                trajectories
                    .entry(t.strategy.clone())
                    .or_default()
                    .push(t.clone());
            }
        }
    }
    let failed = summarize(&cfg, &outcomes).unwrap().failed_repeats.len();
    ProtocolRun {
        trajectories,
        failed,
        dir,
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn criterion_6(run: &ProtocolRun) -> Verdict {
    let da = &run.trajectories[Strategy::DaRvm.name()];
    let to = &run.trajectories[Strategy::TargetOnly.name()];
    let (qa, qt) = (
        mean(da.iter().map(|t| t.query_fraction())),
        mean(to.iter().map(|t| t.query_fraction())),
    );
    let (fa, ft) = (
        mean(da.iter().map(|t| t.final_f1())),
        mean(to.iter().map(|t| t.final_f1())),
    );
    let ratio = qa / qt;
    Verdict::new(
        da.len() >= 20 && to.len() >= 20 && ratio <= 0.6 && fa >= ft - 0.05,
        format!(
            "{}/{} repeats, queried fraction DA {qa:.3} vs target-only {qt:.3} (ratio {ratio:.2}), final F1 DA {fa:.3} vs {ft:.3}",
            da.len(),
            to.len()
        ),
    )
}

fn mean_curve(ts: &[QueryTrajectory]) -> Vec<f64> {
    let len = ts[0].f1_curve.len();
    (0..len)
        .map(|i| mean(ts.iter().map(|t| t.f1_curve[i])))
        .collect()
}

fn criterion_7(run: &ProtocolRun) -> Verdict {
    let active = &run.trajectories[Strategy::DaRvm.name()];
    let random = &run.trajectories[Strategy::Random.name()];
    let (a, r) = (mean_curve(active), mean_curve(random));
    let worst = a
        .iter()
        .zip(&r)
        .map(|(a, r)| r - a)
        .fold(f64::NEG_INFINITY, f64::max);
    let strict = a.iter().zip(&r).filter(|(a, r)| r < a).count();
    Verdict::new(
        active.len() >= 20 && random.len() >= 20 && worst <= 0.02 && strict > 0,
        format!(
            "{} paired repeats, max(random - active) = {worst:+.3} over {} positions, random strictly below at {strict}; final mean F1 active {:.3}, random {:.3}",
            random.len(),
            a.len(),
            a.last().unwrap(),
            r.last().unwrap()
        ),
    )
}

fn criterion_8() -> Verdict {
    let space = LabelSpace::from_names(
        &["ambient", "freezing", "damage1", "damage2", "damage3"],
        &[vec!["ambient", "freezing"]],
    )
    .unwrap();
    let all: Vec<usize> = (0..5).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut in_range = true;
    for _ in 0..2000 {
        let raw: Vec<f64> = (0..5).map(|_| rng.random::<f64>().powi(3)).collect();
        let total: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let eta = query_eta(&p, &space, &all).unwrap();
        in_range &= (0.0..=1.0).contains(&eta);
    }
    let uniform_merged = info_efficiency(&[0.25; 4]).unwrap();
    let one_hot =
        info_efficiency(&merge_probs(&[0.5, 0.5, 0.0, 0.0, 0.0], space.merge_groups()).unwrap())
            .unwrap();

    let mut hits = 0;
    let n = 10_000;
    for _ in 0..n {
        hits += usize::from(decide_query(0.3, &mut rng).1);
    }
    let rate = hits as f64 / n as f64;
    let sigma = (0.3f64 * 0.7 / n as f64).sqrt();

    let rvm = RvmModel {
        relevance_vectors: DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, -1.0, -2.0, 0.5]),
        weights: DMatrix::from_fn(5, 3, |i, j| (i as f64 - 2.0) * (j as f64 + 1.0)),
        precisions: DMatrix::from_element(5, 3, 1.0),
        kernel: KernelSpec::for_dim(2),
        label_space: space.clone(),
        classes: all.clone(),
        active_index: vec![0, 1, 2],
    };
    let far = predict_proba(&rvm, &[1e3, -1e3]).unwrap();
    let h_far = entropy(&far).unwrap();
    let pass = in_range
        && (uniform_merged - 1.0).abs() < 1e-12
        && one_hot.abs() < 1e-12
        && (rate - 0.3).abs() <= 3.0 * sigma
        && h_far >= 5f64.ln() - 1e-6;
    Verdict::new(
        pass,
        format!(
            "eta in [0,1] on 2000 draws: {in_range}; uniform merged {uniform_merged:.12}; one-hot {one_hot:.1e}; rate at 0.3 = {rate:.4} (3 sigma {:.4}); far-field entropy {h_far:.8} vs ln 5 {:.8}",
            3.0 * sigma,
            5f64.ln()
        ),
    )
}

fn standardized(ds: &Dataset, stats: &NormalStats) -> Dataset {
    let x = darvm::mapping::standardize_source(&ds.features(), stats).unwrap();
    ds.with_features(&x).unwrap()
}

fn criterion_9(run: &ProtocolRun) -> Verdict {
    let (s, _, _) = generate_population(&SyntheticSpec::default()).unwrap();
    let zero = jmmd(&s, &s, Bandwidth::Median).unwrap().value;

    let mut decreased = 0;
    let repeats = 20;
    let mut worst_ratio = 0.0f64;
    for r in 0..repeats {
        let spec = SyntheticSpec {
            seed: 1000 + r,
            ..SyntheticSpec::default()
        };
        let (s, t, truth) = generate_population(&spec).unwrap();
        let stats = NormalStats::from_rows(&s.of_classes(&[0]).features()).unwrap();
        let src = standardized(&s, &stats);
        let before = standardized(&t, &stats);
        let mapped = t
            .with_features(&apply_mapping(&t.features(), &truth).unwrap())
            .unwrap();
        let after = standardized(&mapped, &stats);
        let j0 = jmmd(&src, &before, Bandwidth::Median).unwrap().value;
        let j1 = jmmd(&src, &after, Bandwidth::Median).unwrap().value;
        if j1 < j0 {
            decreased += 1;
        }
        worst_ratio = worst_ratio.max(j1 / j0);
    }

    // best and worst repeats named by the report against the stored values
    let dir = run.dir.path();
    let index = report(dir).unwrap();
    let records: Vec<RepeatRecord> =
        serde_json::from_str(&std::fs::read_to_string(dir.join("repeats.json")).unwrap()).unwrap();
    let values: Vec<(usize, f64)> = records
        .iter()
        .filter_map(|r| r.jmmd.posterior.map(|v| (r.repeat, v)))
        .collect();
    let argmin = values
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|v| v.0);
    let argmax = values
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|v| v.0);
    let ranking =
        argmin.is_some() && index.best_jmmd_repeat == argmin && index.worst_jmmd_repeat == argmax;
    Verdict::new(
        zero <= 1e-12 && decreased == repeats && ranking,
        format!(
            "identical sets {zero:.1e}; truth mapping lowers JMMD in {decreased}/{repeats} populations (worst after/before {worst_ratio:.3}); report best/worst {:?}/{:?} vs stored argmin/argmax {argmin:?}/{argmax:?}",
            index.best_jmmd_repeat, index.worst_jmmd_repeat
        ),
    )
}

fn read_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(p) = stack.pop() {
        for e in std::fs::read_dir(&p).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path
                    .strip_prefix(root)
                    .unwrap()
                    .to_string_lossy()
                    .into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn criterion_10() -> Verdict {
    let cfg = ExperimentConfig {
        repeats: 3,
        master_seed: 77,
        prior: wide_prior(),
        sampler: SamplerConfig {
            warmup: 60,
            draws: 60,
            freeze_precisions: true,
            ..SamplerConfig::default()
        },
        refit_sampler: SamplerConfig {
            warmup: 20,
            draws: 20,
            freeze_precisions: true,
            ..SamplerConfig::default()
        },
        stream: darvm::active::StreamConfig {
            refit_every: 4,
            budget: None,
        },
        ..ExperimentConfig::default()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        run_experiment(&cfg, d.path()).unwrap();
        report(d.path()).unwrap();
    }
    let (ta, tb) = (read_tree(a.path()), read_tree(b.path()));
    Verdict::new(
        !ta.is_empty() && ta == tb,
        format!(
            "{} files compared across two runs, identical: {}",
            ta.len(),
            ta == tb
        ),
    )
}

fn criterion_11() -> Option<Verdict> {
    let Ok(dir) = std::env::var("DARVM_BRIDGE_DIR") else {
        return Verdict::skip(
            "set DARVM_BRIDGE_DIR to a directory holding source.csv, target.csv and config.toml",
        );
    };
    let dir = Path::new(&dir);
    let mut cfg = match ExperimentConfig::load(dir.join("config.toml")) {
        Ok(c) => c,
        Err(e) => return Verdict::skip(format!("no usable config.toml: {e}")),
    };
    if let DataSource::Files { source, target, .. } = &mut cfg.data {
        *source = dir.join(&*source);
        *target = dir.join(&*target);
    }
    cfg.repeats = 100;
    cfg.strategies = vec![Strategy::DaRvm, Strategy::TargetOnly];
    let out = tempfile::tempdir().unwrap();
    let summary = match run_experiment(&cfg, out.path()) {
        Ok(s) => s,
        Err(e) => return Some(Verdict::new(false, format!("run failed: {e}"))),
    };
    let da = summary
        .strategy(Strategy::DaRvm)
        .and_then(|s| s.mean_final_f1);
    let to = summary
        .strategy(Strategy::TargetOnly)
        .and_then(|s| s.mean_final_f1);
    Some(match (da, to) {
        (Some(a), Some(b)) => Verdict::new(
            (a - b).abs() <= 0.1,
            format!("mean final macro-F1 DA {a:.3} vs target-only {b:.3} over 100 repeats"),
        ),
        _ => Verdict::new(false, "a strategy produced no completed trajectory"),
    })
}

fn main() {
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let wanted = |n: u32| filter.as_ref().is_none_or(|f| f == &n.to_string());
    let mut failures = Vec::new();
    let mut report_line = |n: u32, name: &str, v: Verdict, started: Instant| {
        println!(
            "criterion {n} [{name}]: {} ({}) [{:.0}s]",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            started.elapsed().as_secs_f64()
        );
        if !v.pass {
            failures.push(n);
        }
    };
    let simple: [(u32, &str, fn() -> Verdict); 5] = [
        (1, "numerical keystones", criterion_1),
        (2, "NCA identity", criterion_2),
        (3, "prior recovery", criterion_3),
        (4, "mapping recovery", criterion_4),
        (8, "sampling rule", criterion_8),
    ];
    for (n, name, f) in simple {
        if wanted(n) {
            let t = Instant::now();
            report_line(n, name, f(), t);
        }
    }
    if wanted(5) {
        let t = Instant::now();
        report_line(5, "extrapolation to unseen classes", criterion_5(), t);
    }
    if wanted(6) || wanted(7) || wanted(9) {
        let t = Instant::now();
        let run = protocol_run();
        println!(
            "protocol run: 20 repeats in {:.0}s, {} with a failed stage",
            t.elapsed().as_secs_f64(),
            run.failed
        );
        for (n, name, f) in [
            (
                6u32,
                "query efficiency",
                criterion_6 as fn(&ProtocolRun) -> Verdict,
            ),
            (7, "active beats random", criterion_7),
            (9, "JMMD diagnostics", criterion_9),
        ] {
            if wanted(n) {
                let t = Instant::now();
                report_line(n, name, f(&run), t);
            }
        }
    }
    if wanted(10) {
        let t = Instant::now();
        report_line(10, "end-to-end determinism", criterion_10(), t);
    }
    if wanted(11) {
        let t = Instant::now();
        if let Some(v) = criterion_11() {
            report_line(11, "bridge data", v, t);
        }
    }
    if !failures.is_empty() {
        println!("failed criteria: {failures:?}");
        std::process::exit(1);
    }
}
