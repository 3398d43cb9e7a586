use super::*;
use crate::corrsim::{kww_curve, synth_two_time, ScenarioSpec, Trajectory};
use approx::assert_relative_eq;
use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn cut_from(td: Vec<f64>, y: Vec<f64>) -> OneTimeCut {
    let n = td.len();
    OneTimeCut {
        td_values: td,
        c1_values: y,
        weights: vec![1.0; n],
        stderr: None,
        age_center: 0.0,
        bin_width: 1,
    }
}

fn kww_cut(p: [f64; 4], n: usize) -> OneTimeCut {
    let td: Vec<f64> = (1..=n).map(|t| t as f64).collect();
    let y = kww_curve(p[0], p[1], p[2], p[3], &td).unwrap();
    cut_from(td, y)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

#[test]
fn constant_matrix_gives_constant_cuts() {
    let c2 = TwoTimeCorrelation::new(Array2::from_elem((20, 20), 1.25), 1.0, "c").unwrap();
    for (age, w) in [(3, 1), (5, 4), (10, 7)] {
        let cut = extract_1tcf(&c2, age, w).unwrap();
        assert!(cut.c1_values.iter().all(|&v| v == 1.25));
        assert!(cut.weights.iter().all(|&v| v == 1.0));
    }
}

#[test]
fn single_slice_cut_is_the_row() {
    let m = Array2::from_shape_fn((30, 30), |(i, j)| 1.0 + 0.01 * (i + j) as f64 + 0.001 * (i * j) as f64);
    let c2 = TwoTimeCorrelation::new(m.clone(), 1.0, "r").unwrap();
    let cut = extract_1tcf(&c2, 12, 1).unwrap();
    assert_eq!(cut.len(), 17);
    assert_eq!(cut.age_center, 12.0);
    for (k, (&td, &v)) in cut.td_values.iter().zip(&cut.c1_values).enumerate() {
        assert_eq!(td, (k + 1) as f64);
        assert_eq!(v, m[[12, 12 + k + 1]]);
    }
}

#[test]
fn two_row_bin_averages_by_hand() {
    let mut m = Array2::from_elem((4, 4), 1.0);
    m[[0, 2]] = 1.2;
    m[[2, 0]] = 1.2;
    m[[1, 3]] = 1.4;
    m[[3, 1]] = 1.4;
    let c2 = TwoTimeCorrelation::new(m, 1.0, "h").unwrap();
    // width 2 around age 1 covers rows {0, 1}
    let cut = extract_1tcf(&c2, 1, 2).unwrap();
    assert_eq!(cut.td_values[1], 2.0);
    assert_relative_eq!(cut.c1_values[1], 1.3, epsilon = 1e-15);
    assert_eq!(cut.age_center, 0.5);
    assert!(cut.stderr.is_some());
    let mean_w = cut.weights.iter().sum::<f64>() / cut.weights.len() as f64;
    assert_relative_eq!(mean_w, 1.0, epsilon = 1e-12);
}

#[test]
fn out_of_bounds_bins_are_rejected() {
    let c2 = TwoTimeCorrelation::new(Array2::from_elem((10, 10), 1.0), 1.0, "o").unwrap();
    assert!(extract_1tcf(&c2, 10, 1).is_err());
    assert!(extract_1tcf(&c2, 1, 4).is_err());
    assert!(extract_1tcf(&c2, 8, 4).is_ok());
    assert!(extract_1tcf(&c2, 9, 4).is_err());
    assert!(extract_1tcf(&c2, 3, 0).is_err());
}

#[test]
fn half_time_values() {
    assert_relative_eq!(half_time(1.0, 1.0), 0.34657359027997264, epsilon = 1e-15);
    assert_relative_eq!(half_time(0.5, 1.0), 0.6931471805599453, epsilon = 1e-15);
    assert_eq!(half_time(0.0, 1.3), f64::INFINITY);
    assert!(half_time(1.0, 0.0).is_nan());
}

#[test]
fn noiseless_cut_is_recovered() {
    let truth = [0.1, 0.3, 1.2, 1.0];
    let fit = fit_1tcf(&kww_cut(truth, 200), &Bounds::default(), None).unwrap();
    let p = fit.params().to_array();
    for k in 0..4 {
        assert!(rel(p[k], truth[k]) < 1e-4, "{} = {} vs {}", PARAM_NAMES[k], p[k], truth[k]);
    }
    assert!(fit.fit.r_squared > 0.999_999);
    assert_relative_eq!(fit.fit.half_time, half_time(p[0], p[2]));
}

#[test]
fn every_grid_start_converges_on_noiseless_cuts() {
    let bounds = Bounds::default();
    for &g in &[0.01, 0.03, 0.1, 0.3, 1.0] {
        let truth = [g, 0.25, 1.0, 1.0];
        let cut = kww_cut(truth, 150);
        for start in GAMMA_GRID {
            let init = KWWParams::from_array([start, 0.2, 1.0, 1.0]);
            let problem = KwwProblem { td: &cut.td_values, y: &cut.c1_values, w: &cut.weights };
            let (lo, hi): (Vec<f64>, Vec<f64>) = bounds.to_array().iter().copied().unzip();
            let out = minimize(&problem, &init.to_array(), &lo, &hi, &[true; 4], &LmOptions::default());
            if rel(out.params[0], g) > 1e-4 {
                // a start may land in another basin; the scan must still recover
                let fit = fit_1tcf(&cut, &bounds, Some(&init)).unwrap();
                assert!(rel(fit.params().gamma, g) < 1e-4);
            }
        }
    }
}

#[test]
fn constant_cut_is_sentinel() {
    let td: Vec<f64> = (1..=40).map(|t| t as f64).collect();
    let fit = fit_1tcf(&cut_from(td, vec![1.0; 40]), &Bounds::default(), None).unwrap();
    assert!(!fit.fit.is_valid());
    assert!(fit.params().to_array().iter().all(|v| v.is_nan()));
    assert!(fit.fit.half_time.is_nan());
}

#[test]
fn short_cut_is_rejected() {
    let cut = kww_cut([0.1, 0.3, 1.0, 1.0], 4);
    assert!(matches!(
        fit_1tcf(&cut, &Bounds::default(), None),
        Err(Error::TooFewPoints { needed: 5, got: 4 })
    ));
}

#[test]
fn fit_beats_the_constant_line() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let noise = Normal::new(0.0, 0.02).unwrap();
    let mut cut = kww_cut([0.05, 0.2, 1.4, 1.0], 60);
    for v in cut.c1_values.iter_mut() {
        *v += noise.sample(&mut rng);
    }
    let fit = fit_1tcf(&cut, &Bounds::default(), None).unwrap();
    let p = fit.params();
    let ssr: f64 = cut.td_values.iter().zip(&cut.c1_values).map(|(&t, &y)| (p.eval(t) - y).powi(2)).sum();
    let mean = cut.c1_values.iter().sum::<f64>() / 60.0;
    let sst: f64 = cut.c1_values.iter().map(|y| (y - mean).powi(2)).sum();
    assert!(ssr <= sst);
    assert!(fit.fit.errors.to_array().iter().all(|e| *e >= 0.0));
    let c = fit.fit.correlations;
    for i in 0..4 {
        assert_eq!(c[i][i], 1.0);
        for j in 0..4 {
            assert_relative_eq!(c[i][j], c[j][i], epsilon = 1e-12);
        }
    }
}

#[test]
fn tail_weights() {
    let p = KWWParams::from_array([0.1, 0.3, 1.0, 1.0]);
    let e2 = std::f64::consts::E.powi(2);
    assert_relative_eq!(tail_weight(&p, e2), 0.5, epsilon = 1e-15);
    assert_eq!(tail_weight(&p, 1.0), 1.0);
    // the decay term is still above β/e for small delays
    assert_eq!(tail_weight(&p, 2.0), 1.0);
}

#[test]
fn second_pass_equals_first_when_all_points_are_high() {
    // slow decay: every point stays above 1 + β/e
    let cut = kww_cut([0.001, 0.3, 1.0, 1.0], 40);
    let first = fit_1tcf(&cut, &Bounds::default(), None).unwrap();
    let both = two_pass_fit(&cut, &first, &Bounds::default()).unwrap();
    let v = both.weighted_variant.as_ref().unwrap();
    assert_eq!(v.params.baseline, first.params().baseline);
    for (a, b) in v.params.to_array().iter().zip(first.params().to_array()) {
        assert!(rel(*a, b) < 1e-8);
    }
}

#[test]
fn second_pass_helps_on_long_tails() {
    let truth = [0.2, 0.3, 1.0, 1.0];
    let normal = Normal::new(0.0, 0.01).unwrap();
    let (mut first_err, mut second_err) = (Vec::new(), Vec::new());
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        // about 90% of a 100-point cut sits on the baseline
        let mut cut = kww_cut(truth, 100);
        for v in cut.c1_values.iter_mut() {
            *v += normal.sample(&mut rng);
        }
        let first = fit_1tcf(&cut, &Bounds::default(), None).unwrap();
        let both = two_pass_fit(&cut, &first, &Bounds::default()).unwrap();
        first_err.push(rel(first.params().gamma, truth[0]));
        second_err.push(rel(both.effective().params.gamma, truth[0]));
    }
    first_err.sort_by(f64::total_cmp);
    second_err.sort_by(f64::total_cmp);
    assert!(second_err[10] <= first_err[10], "{:?} vs {:?}", second_err[10], first_err[10]);
}

fn ageing_spec(n: usize) -> ScenarioSpec {
    ScenarioSpec {
        n_frames: n,
        gamma: Trajectory::Exponential { start: 0.08, end: 0.03 },
        beta: Trajectory::Constant(0.25),
        alpha: Trajectory::Linear { start: 1.0, end: 1.5 },
        baseline: 1.0,
        noise_sigma: 0.0,
        stripe_sigma: 0.0,
        seed: 0,
        frame_rate: 10.0,
    }
}

#[test]
fn single_frame_grid_skips_short_edge_cuts() {
    let (clean, _) = synth_two_time(&ageing_spec(350)).unwrap();
    let fits = fit_2tcf(&clean, 1, &Bounds::default(), &TrustConfig::default(), None).unwrap();
    assert!(fits.len() >= 340);
    assert_eq!(fits.len(), 345);
    assert_eq!(fits.trust.len(), fits.len());
    assert!(fits.cut_lengths.iter().all(|&n| n >= MIN_CUT_POINTS));
    assert_relative_eq!(fits.ages_seconds[20], fits.ages[20] / 10.0);
}

#[test]
fn full_width_bin_is_the_average_cut() {
    let (clean, _) = synth_two_time(&ageing_spec(120)).unwrap();
    let fits = fit_2tcf(&clean, 120, &Bounds::default(), &TrustConfig::default(), None).unwrap();
    assert_eq!(fits.len(), 1);
    let cut = extract_1tcf(&clean, 60, 120).unwrap();
    let direct = fit_cut(&cut, &Bounds::default(), None).unwrap();
    assert_eq!(fits.fits[0], direct);
}

#[test]
fn averaged_cut_misses_the_time_average_of_ageing_parameters() {
    let spec = ageing_spec(300);
    let (clean, _) = synth_two_time(&spec).unwrap();
    let per_age = fit_2tcf(&clean, 1, &Bounds::default(), &TrustConfig::default(), None).unwrap();
    let mut errs: Vec<f64> = per_age
        .ages
        .iter()
        .zip(&per_age.fits)
        .filter(|(_, f)| f.effective().is_valid())
        .map(|(&a, f)| rel(f.effective().params.gamma, spec.truth_at(a).gamma))
        .collect();
    errs.sort_by(f64::total_cmp);
    let median = errs[errs.len() / 2];

    let table = spec.truth_table();
    let mean_gamma = table.iter().map(|t| t.gamma).sum::<f64>() / table.len() as f64;
    let avg = fit_2tcf(&clean, 300, &Bounds::default(), &TrustConfig::default(), None).unwrap();
    let g = avg.fits[0].effective().params.gamma;
    assert!(rel(g, mean_gamma) > median, "{g} vs {mean_gamma}, median {median}");
}

proptest! {
    #[test]
    fn half_time_decreases_in_gamma(g in 1e-4f64..10.0, dg in 1e-6f64..1.0, a in 0.2f64..3.0) {
        prop_assert!(half_time(g + dg, a) < half_time(g, a));
    }

    #[test]
    fn half_time_is_continuous_near_alpha_one(g in 1e-3f64..5.0, d in -1e-7f64..1e-7) {
        let h = half_time(g, 1.0);
        prop_assert!((half_time(g, 1.0 + d) - h).abs() <= 1e-6 * h);
    }

    #[test]
    fn stderr_weights_have_unit_mean(s in proptest::collection::vec(0.0f64..1.0, 1..30)) {
        let w = stderr_weights(&s);
        let m = w.iter().sum::<f64>() / w.len() as f64;
        prop_assert!((m - 1.0).abs() < 1e-12);
        prop_assert!(w.iter().all(|v| *v > 0.0));
    }
}
