use gridgp::clustering::k_medoids;
use gridgp::corruption::{inject, CorruptionPlan};
use gridgp::covariance::{LearnedCovariance, Moments};
use gridgp::identify::{build_mask, identify, IdentifyConfig};
use gridgp::inference::{assemble_blocks, conditional_mean, JointBlocks};
use gridgp::kernel::KernelTensor;
use gridgp::learning::{fit_l1, FitConfig, Objective};
use gridgp::simulate::{simulate, SimulationConfig};
use gridgp::synth::six_generator;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_psd(rng: &mut ChaCha8Rng, r: usize) -> DMatrix<f64> {
    let b = DMatrix::from_fn(r, r, |_, _| rng.random_range(-1.0..1.0));
    &b * b.transpose() + DMatrix::identity(r, r) * 0.1
}

fn six_truth(a: DMatrix<f64>, lags: &[f64]) -> LearnedCovariance {
    let model = six_generator();
    let basis = model.eigen_decompose().unwrap();
    let kernel = KernelTensor::build(&basis, lags).unwrap();
    LearnedCovariance::new(a, kernel, basis, model, vec![], DVector::zeros(0)).unwrap()
}

fn exact_moments(truth: &LearnedCovariance, lags: &[f64], meters: &[usize]) -> Moments {
    let mats: Vec<DMatrix<f64>> = lags.iter().map(|&t| truth.sigma(t, meters).unwrap()).collect();
    let stds = mats[0].diagonal().map(f64::sqrt);
    Moments::from_parts(lags.to_vec(), mats, meters.to_vec(), stds).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn mask_and_pattern_partition_the_ones(w in proptest::collection::vec(0.0f64..=1.0, 1..9)) {
        let w = DVector::from_vec(w);
        let (big_w, mask) = build_mask(&w).unwrap();
        let m = w.len();
        prop_assert!((&big_w + &mask - DMatrix::from_element(m, m, 1.0)).amax() < 1e-15);
        prop_assert_eq!(&big_w, &big_w.transpose());
    }

    #[test]
    fn binary_mask_zeroes_exactly_flagged_rows(flags in proptest::collection::vec(any::<bool>(), 1..9)) {
        let w = DVector::from_iterator(flags.len(), flags.iter().map(|&f| if f { 1.0 } else { 0.0 }));
        let (_, mask) = build_mask(&w).unwrap();
        for i in 0..flags.len() {
            for j in 0..flags.len() {
                let expected = if flags[i] || flags[j] { 0.0 } else { 1.0 };
                prop_assert_eq!(mask[(i, j)], expected);
            }
        }
    }

    #[test]
    fn posterior_mean_is_linear_in_observations(seed in 0u64..10_000, alpha in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rng.random_range(2..20);
        let d1 = rng.random_range(1..d);
        let s = random_psd(&mut rng, d);
        let blocks = JointBlocks::from_parts(
            s.view((0, 0), (d1, d1)).into_owned(),
            s.view((d1, 0), (d - d1, d1)).into_owned(),
            s.view((d1, d1), (d - d1, d - d1)).into_owned(),
            DVector::zeros(d1),
            DVector::zeros(d - d1),
        ).unwrap();
        let x = DVector::from_fn(d1, |_, _| rng.random_range(-1.0..1.0));
        let y = conditional_mean(&blocks, &x).unwrap();
        let ya = conditional_mean(&blocks, &(&x * alpha)).unwrap();
        prop_assert!((ya - y * alpha).amax() <= 1e-10 * (1.0 + alpha.abs()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn observed_block_is_block_toeplitz(seed in 0u64..10_000, ticks in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dt = 1.0 / 30.0;
        let lags: Vec<f64> = (0..ticks).map(|k| k as f64 * dt).collect();
        let truth = six_truth(random_psd(&mut rng, 6) * 1e-6, &lags);
        let meters = [0usize, 2, 3];
        let blocks = assemble_blocks(&truth, &meters, &[4, 5], ticks, dt).unwrap();
        let s11 = &blocks.sigma11;
        let m = meters.len();
        let block = |s: usize, t: usize| s11.view((s * m, t * m), (m, m)).into_owned();
        for s in 0..ticks {
            for t in 0..ticks {
                if s > 0 && t > 0 {
                    let diff = (block(s, t) - block(s - 1, t - 1)).amax();
                    prop_assert!(diff <= 1e-12 * s11.amax(), "blocks ({s},{t}) and ({},{}) differ by {diff}", s - 1, t - 1);
                }
            }
        }
        let b01 = block(0, 1);
        prop_assert!((b01 - block(1, 0).transpose()).amax() <= 1e-12 * s11.amax());
    }

    #[test]
    fn k_medoids_cost_never_increases(seed in 0u64..10_000, n in 3usize..25) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<(f64, f64)> = (0..n).map(|_| (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0))).collect();
        let d = DMatrix::from_fn(n, n, |i, j| ((pts[i].0 - pts[j].0).powi(2) + (pts[i].1 - pts[j].1).powi(2)).sqrt());
        let k = rng.random_range(1..n);
        let (assignment, trace) = k_medoids(&d, k, seed).unwrap();
        prop_assert!(trace.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{trace:?}");
        let direct: f64 = (0..n).map(|g| d[(g, assignment.medoids[assignment.membership[g]])]).sum();
        prop_assert!((direct - assignment.cost).abs() < 1e-9);
    }

    #[test]
    fn l1_fit_is_homogeneous_in_the_moments(seed in 0u64..10_000, c in 0.1f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lags = [0.0, 0.25, 0.5];
        let truth = six_truth(random_psd(&mut rng, 6), &lags);
        let meters: Vec<usize> = (0..6).collect();
        let base = exact_moments(&truth, &lags, &meters);
        let noisy: Vec<DMatrix<f64>> = base.matrices().iter().map(|m| {
            m.map(|v| v * (1.0 + 0.05 * rng.random_range(-1.0..1.0)))
        }).collect();
        let scaled: Vec<DMatrix<f64>> = noisy.iter().map(|m| m * c).collect();
        let a = Moments::from_parts(lags.to_vec(), noisy, meters.clone(), base.stds().clone()).unwrap();
        let b = Moments::from_parts(lags.to_vec(), scaled, meters.clone(), base.stds().clone()).unwrap();
        let model = truth.model();
        let cfg = FitConfig::new(Objective::L1, lags.to_vec());
        let (fa, ra) = fit_l1(&a, truth.kernel(), truth.basis(), model, &cfg).unwrap();
        let (fb, rb) = fit_l1(&b, truth.kernel(), truth.basis(), model, &cfg).unwrap();
        prop_assert!((rb.objective_value - c * ra.objective_value).abs() <= 1e-6 * c * (1.0 + ra.objective_value));
        for &t in &lags {
            let sa = fa.sigma(t, &meters).unwrap() * c;
            let sb = fb.sigma(t, &meters).unwrap();
            prop_assert!((&sa - &sb).amax() <= 1e-4 * sa.amax(), "lag {t}");
        }
        let asym = (fa.a() - fa.a().transpose()).amax();
        prop_assert!(asym <= 1e-10 * fa.a().amax());
    }

    #[test]
    fn injectors_touch_only_their_targets(seed in 0u64..1000, kind in 0usize..3, mask in 1u8..32) {
        let model = six_generator();
        let config = SimulationConfig::new(1.0 / 480.0, 8.0, 30.0, seed);
        let meters = [0usize, 1, 2, 3, 4];
        let clean = simulate(&model, &config).unwrap().restrict_to_meters(&meters).unwrap();
        let targets: Vec<usize> = (0..5).filter(|i| mask & (1 << i) != 0).collect();
        let plan = match kind {
            0 => CorruptionPlan::fdi(targets.clone(), 1.0, seed),
            1 => CorruptionPlan::gross(targets.clone(), 5, 0.1, seed),
            _ => CorruptionPlan::drift(targets.clone(), 0.1, 1.0, seed),
        };
        let (bad, truth) = inject(&clean, &model, &config, &plan).unwrap();
        for (c, g) in meters.iter().enumerate() {
            let same = bad.values().column(c) == clean.values().column(c);
            prop_assert_eq!(same, !truth.corrupted.contains(g), "column of generator {}", g);
            prop_assert!(same || targets.contains(g));
        }
        // Gross errors spread a total count, so a target may be missed.
        if kind != 1 {
            prop_assert_eq!(&truth.corrupted, &targets);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn larger_beta_never_flags_more(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lags = [0.0, 0.25, 0.5];
        let truth = six_truth(random_psd(&mut rng, 6), &lags);
        let meters: Vec<usize> = (0..6).collect();
        let base = exact_moments(&truth, &lags, &meters);
        let bad = rng.random_range(0..6);
        let mats: Vec<DMatrix<f64>> = base.matrices().iter().map(|c| {
            DMatrix::from_fn(6, 6, |i, j| {
                let s = base.stds()[i] * base.stds()[j];
                let hit = if i == bad || j == bad { rng.random_range(-0.5..0.5) } else { 0.0 };
                c[(i, j)] + s * (hit + 0.01 * rng.random_range(-1.0..1.0))
            })
        }).collect();
        let moments = Moments::from_parts(lags.to_vec(), mats, meters, base.stds().clone()).unwrap();
        let model = truth.model();
        let cfg = FitConfig::new(Objective::L1, lags.to_vec());
        let (fit, _) = fit_l1(&moments, truth.kernel(), truth.basis(), model, &cfg).unwrap();
        let mut last = usize::MAX;
        for beta in [0.3, 1.0, 3.0, 10.0, 30.0] {
            let count = match identify(&moments, &fit, &IdentifyConfig::new(beta, lags.to_vec())) {
                Ok(w) => w.flagged().len(),
                // Every meter flagged: the largest possible set.
                Err(_) => 6,
            };
            prop_assert!(count <= last, "β = {beta} flags {count} after {last}");
            last = count;
        }
    }
}
