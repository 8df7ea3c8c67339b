mod common;

use common::{mean_2x2, random_kernel, scalar_gf, scalar_survival};
use irg_core::branching::{
    dominance_check, empirical_gf, mean_progeny, sample_batch, sample_progeny, tail_fit, tail_mle,
    SampleBatch,
};
use irg_core::fixed_point::{progeny_gf, r_kappa, IterationConfig};
use irg_core::kernel::{tilt_normalizer, Kernel, KernelDoc, KernelSpec, Transform, TypeSpace};
use irg_core::rng::stream;
use irg_core::Error;
use rand::Rng;

fn two_type() -> Kernel {
    let space = TypeSpace::new(vec![0, 1], vec![0.5, 0.5]).unwrap();
    Kernel::explicit(space, vec![vec![0.3, 0.5], vec![0.5, 0.7]]).unwrap()
}

fn within_sigmas(value: f64, target: f64, se: f64, k: f64) -> bool {
    (value - target).abs() <= k * se
}

#[test]
fn zero_kernel_gives_single_particles() {
    let k = Kernel::scalar(0.0).unwrap();
    let mut rng = stream(1, &[]);
    for _ in 0..100 {
        let out = sample_progeny(&k, 1, 1000, &mut rng).unwrap();
        assert_eq!((out.size, out.censored, out.generations), (1, false, 0));
    }
}

#[test]
fn cap_censors_supercritical_growth() {
    let k = Kernel::scalar(3.0).unwrap();
    let batch = sample_batch(&k, 1, 2000, 500, 3).unwrap();
    for o in batch.outcomes.iter().filter(|o| o.censored) {
        assert_eq!(o.size, 500);
    }
    // Survival probability of Poisson(3) is about 0.94.
    assert!((batch.censored_fraction() - scalar_survival(3.0)).abs() < 0.03);
}

#[test]
fn scalar_mean_matches_geometric_series() {
    let k = Kernel::scalar(0.5).unwrap();
    let batch = sample_batch(&k, 1, 100_000, 10_000_000, 11).unwrap();
    let (mean, se) = batch.size_mean();
    assert!(within_sigmas(mean, 2.0, se, 3.0), "{mean} ± {se}");
    assert_eq!(mean_progeny(&k).unwrap(), vec![2.0]);
    assert_eq!(
        mean_progeny(&Kernel::scalar(0.0).unwrap()).unwrap(),
        vec![1.0]
    );
}

#[test]
fn two_type_means_match_linear_solve() {
    let k = two_type();
    let kk = [[0.15, 0.25], [0.25, 0.35]];
    let oracle = mean_2x2(kk);
    let m = mean_progeny(&k).unwrap();
    for x in 0..2 {
        assert!((m[x] - oracle[x]).abs() < 1e-12);
        let batch = sample_batch(&k, x as u32, 100_000, 10_000_000, 5).unwrap();
        let (mean, se) = batch.size_mean();
        assert!(
            within_sigmas(mean, oracle[x], se, 3.0),
            "type {x}: {mean} ± {se} vs {}",
            oracle[x]
        );
    }
}

#[test]
fn mean_progeny_refuses_critical_kernel() {
    let space = TypeSpace::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
    let k = KernelDoc {
        space,
        kernel: KernelSpec::Rank1 {
            phi: vec![1.0, 1.0],
        },
    }
    .build()
    .unwrap();
    assert!(matches!(mean_progeny(&k), Err(Error::Refused(_))));
}

#[test]
fn random_subcritical_means_match() {
    let mut rng = stream(2024, &[]);
    for i in 0..20 {
        let d = rng.random_range(1..=4usize);
        let w: Vec<f64> = (0..d).map(|_| rng.random_range(0.1..1.0)).collect();
        let e: Vec<f64> = (0..d * (d + 1) / 2)
            .map(|_| rng.random_range(0.05..1.0))
            .collect();
        let k = random_kernel(&w, &e, rng.random_range(0.2..0.8));
        let m = mean_progeny(&k).unwrap();
        let root = rng.random_range(0..d);
        let batch = sample_batch(&k, root as u32, 100_000, 10_000_000, 100 + i).unwrap();
        let (mean, se) = batch.size_mean();
        assert!(
            within_sigmas(mean, m[root], se, 3.0),
            "kernel {i}: {mean} ± {se} vs {}",
            m[root]
        );
    }
}

#[test]
fn censoring_vanishes_as_cap_grows() {
    for (c, strict) in [(0.5, false), (0.99, true)] {
        let k = Kernel::scalar(c).unwrap();
        let fractions: Vec<f64> = [1_000, 10_000, 100_000]
            .iter()
            .map(|&cap| {
                sample_batch(&k, 1, 20_000, cap, 9)
                    .unwrap()
                    .censored_fraction()
            })
            .collect();
        for w in fractions.windows(2) {
            if strict {
                assert!(w[1] < w[0], "c = {c}: {fractions:?}");
            } else {
                assert!(w[1] <= w[0], "c = {c}: {fractions:?}");
            }
        }
    }
}

#[test]
fn empirical_gf_edge_cases() {
    let k = Kernel::scalar(0.5).unwrap();
    let batch = sample_batch(&k, 1, 1000, 1000, 1).unwrap();
    let est = empirical_gf(&batch, 1.0).unwrap();
    assert_eq!((est.mean, est.stderr), (1.0, 0.0));
    let empty = SampleBatch {
        outcomes: Vec::new(),
        ..batch
    };
    assert!(empirical_gf(&empty, 1.0).is_err());
}

#[test]
fn empirical_gf_matches_fixed_point() {
    let cfg = IterationConfig::default();
    let scalar = Kernel::scalar(0.5).unwrap();
    let batch = sample_batch(&scalar, 1, 1_000_000, 10_000_000, 21).unwrap();
    for z in [1.02, 1.05, 1.1] {
        let est = empirical_gf(&batch, z).unwrap();
        let oracle = scalar_gf(0.5, z);
        assert!(
            within_sigmas(est.mean, oracle, est.stderr, 3.0),
            "z = {z}: {est:?} vs {oracle}"
        );
    }
    let k = two_type();
    for root in [0u32, 1] {
        let batch = sample_batch(&k, root, 200_000, 10_000_000, 22).unwrap();
        for z in [1.02, 1.05] {
            let h = progeny_gf(&k, z, &cfg).unwrap().h.unwrap();
            let est = empirical_gf(&batch, z).unwrap();
            assert!(within_sigmas(est.mean, h[root as usize], est.stderr, 3.0));
        }
    }
}

#[test]
fn tail_rate_matches_log_radius() {
    let cfg = IterationConfig::default();
    let scalar = Kernel::scalar(0.5).unwrap();
    let batch = sample_batch(&scalar, 1, 1_000_000, 10_000_000, 31).unwrap();
    let fit = tail_fit(&batch, None).unwrap();
    let expected = (2.0f64 * (-0.5f64).exp()).ln();
    assert!((expected - 0.193147).abs() < 1e-6);
    assert!((fit.rate - expected).abs() <= 0.05 * expected, "{fit:?}");
    assert!(fit.exceedances >= 200);
    let mle = tail_mle(&batch, None).unwrap();
    assert!((mle.rate - expected).abs() <= 0.05 * expected, "{mle:?}");
    assert!(mle.k_top > fit.window[1]);

    let k = two_type();
    let r = r_kappa(&k, &cfg, 1e-9).unwrap();
    let batch = sample_batch(&k, 0, 1_000_000, 10_000_000, 32).unwrap();
    let fit = tail_fit(&batch, None).unwrap();
    let expected = r.midpoint().ln();
    assert!(
        (fit.rate - expected).abs() <= 0.05 * expected,
        "{fit:?} vs {expected}"
    );
}

#[test]
fn near_critical_tail_rate() {
    let k = Kernel::scalar(0.9).unwrap();
    let batch = sample_batch(&k, 1, 1_000_000, 10_000_000, 41).unwrap();
    let fit = tail_fit(&batch, None).unwrap();
    let expected = 0.9 - 1.0 - 0.9f64.ln();
    assert!((expected - 0.005361).abs() < 1e-6);
    assert!(
        (fit.rate - expected).abs() <= 0.15 * expected,
        "{fit:?} vs {expected}"
    );
}

#[test]
fn tail_fit_refuses_supercritical_batches() {
    let k = Kernel::scalar(2.0).unwrap();
    let batch = sample_batch(&k, 1, 20_000, 10_000, 51).unwrap();
    assert!((batch.censored_fraction() - 0.7968121).abs() < 0.02);
    assert!(matches!(tail_fit(&batch, None), Err(Error::Refused(_))));
    assert!(matches!(tail_mle(&batch, None), Err(Error::Refused(_))));
}

#[test]
fn tail_fit_needs_enough_exceedances() {
    let k = Kernel::scalar(0.5).unwrap();
    let batch = sample_batch(&k, 1, 1000, 1000, 1).unwrap();
    assert!(tail_fit(&batch, Some((20, 80))).is_err());
}

#[test]
fn dominance_examples() {
    let a = sample_batch(&Kernel::scalar(0.5).unwrap(), 1, 100_000, 100_000, 61).unwrap();
    let same = dominance_check(&a, &a).unwrap();
    assert_eq!(same.max_violation, 0.0);
    assert!(same.passed);

    let b = sample_batch(&Kernel::scalar(0.55).unwrap(), 1, 100_000, 100_000, 62).unwrap();
    assert!(dominance_check(&b, &a).unwrap().passed);
    // The reverse direction fails: the larger intensity shifts mass upward.
    assert!(!dominance_check(&a, &b).unwrap().passed);

    let k = two_type();
    let base = sample_batch(&k, 0, 100_000, 100_000, 63).unwrap();
    let trunc = k.transformed(Transform::Truncate { d: 0, c: 0.5 }).unwrap();
    let small = sample_batch(&trunc, 0, 100_000, 100_000, 64).unwrap();
    assert!(dominance_check(&base, &small).unwrap().passed);

    let q = 0.5;
    let tilt = k
        .transformed(Transform::Tilt {
            q,
            c: 1.0 / tilt_normalizer(&k, q).unwrap(),
        })
        .unwrap();
    let big = sample_batch(&tilt, 0, 100_000, 100_000, 65).unwrap();
    assert!(dominance_check(&big, &base).unwrap().passed);

    let other_cap = sample_batch(&k, 0, 10, 50, 1).unwrap();
    assert!(dominance_check(&base, &other_cap).is_err());
}

#[test]
fn batch_csv_export() {
    let batch = sample_batch(&Kernel::scalar(0.5).unwrap(), 1, 5, 100, 1).unwrap();
    let mut buf = Vec::new();
    batch.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("root_type,size,censored,generations"));
    assert_eq!(lines.count(), 5);
}

#[test]
fn batches_are_reproducible() {
    let k = two_type();
    let a = sample_batch(&k, 1, 5000, 1000, 77).unwrap();
    let b = sample_batch(&k, 1, 5000, 1000, 77).unwrap();
    assert_eq!(a, b);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let c = pool.install(|| sample_batch(&k, 1, 5000, 1000, 77).unwrap());
    assert_eq!(a, c);
}
