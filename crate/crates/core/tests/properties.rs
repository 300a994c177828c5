//! Property tests of the invariants each module promises.

use proptest::prelude::*;
use qdalign::emitters::{mortensen_variance, EmitterFit, EmitterModel, MortensenInputs};
use qdalign::fitcore::{
    fit_curve, lm_fit, CurveFit, EllipticalAiryFamily, ErfEdgeFamily, ErfEdgeModel, FitProblem, Gaussian2DFamily,
    GaussianLineFamily, ParametricModel, SigmaConvention, TripleGaussianFamily,
};
use qdalign::imgproc::{
    decode_pgm, encode_pgm, estimate_rotation, inverted_residual, rotate, subtract_background, Image, Roi,
};
use qdalign::markers::{fit_cross, intersect, ArmLine, CrossFitConfig, MarkerGrid};
use qdalign::registration::{correlate_devices, solve_transform, to_global, FrameTransform, GlobalPoint, ImagePoint, PointSource};
use qdalign::stark::{
    field, fit_stark, shift_stats, spectral_shift, stark_wavelength_nm, ExcitonLabel, FieldConfig, Grouping,
    PlateauPoint, PlateauTrace, ShiftRecord, Spectrum, Structure,
};
use qdalign::synth::{airy_psf, expected_counts, render, CrossSpec, EmitterSpec, Frame, ImagingMode, LineSpec, Orientation, PsfKind, Scene};
use qdalign::special::AIRY_FIRST_ZERO;
use qdalign::waveguides::{misalign, misalign_stats, weighted_mean, WaveguideAxis};
use std::path::Path;

const PITCH: f64 = 59.0;

fn frame(w: usize, h: usize) -> Frame {
    Frame {
        width: w,
        height: h,
        pitch_nm: PITCH,
    }
}

fn image(w: usize, h: usize, counts: Vec<f64>) -> Image {
    Image::new(w, h, counts, PITCH).unwrap()
}

// ---- imgproc ----

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pgm_round_trip_is_bit_identical(w in 1usize..24, h in 1usize..24, seed in any::<u64>()) {
        let mut s = seed;
        let counts: Vec<f64> = (0..w * h)
            .map(|_| {
                s = qdalign::rng::splitmix64(s);
                (s % 65536) as f64
            })
            .collect();
        let img = image(w, h, counts);
        let back = decode_pgm(&encode_pgm(&img), Path::new("mem")).unwrap();
        prop_assert_eq!(back.counts(), img.counts());
        prop_assert_eq!(back.pixel_pitch(), img.pixel_pitch());
    }

    #[test]
    fn zero_rotation_is_exact_identity(w in 2usize..20, h in 2usize..20, v in prop::collection::vec(0.0f64..1000.0, 400)) {
        let img = image(w, h, v[..w * h].to_vec());
        let r = rotate(&img, 0.0);
        prop_assert_eq!(r.counts(), img.counts());
    }

    #[test]
    fn background_residual_is_non_negative(amp in 10.0f64..500.0, off in 0.0f64..100.0, shadow in 0.0f64..1.0, seed in any::<u64>()) {
        let (w, h) = (48, 40);
        let mut s = seed;
        let counts: Vec<f64> = (0..w * h)
            .map(|i| {
                let (x, y) = ((i % w) as f64, (i / w) as f64);
                s = qdalign::rng::splitmix64(s);
                let noise = (s % 17) as f64;
                let env = amp * (-((x - 24.0).powi(2) + (y - 20.0).powi(2)) / 800.0).exp() + off;
                let dark = if (x - 24.0).abs() < 2.0 { 1.0 - shadow } else { 1.0 };
                env * dark + noise
            })
            .collect();
        let img = image(w, h, counts);
        let (res, model) = subtract_background(&img);
        prop_assert!(res.counts().iter().all(|&c| c >= 0.0));
        prop_assert!(inverted_residual(&img, &model).counts().iter().all(|&c| c >= 0.0));
    }
}

fn grid_lines_scene(angle: f64) -> Scene {
    // mirror-symmetric about the frame center, so ±angle scenes are mirror images
    let f = frame(256, 256);
    let c = f.width as f64 * PITCH / 2.0;
    let mut s = Scene::empty(ImagingMode::IntrinsicMarkers, f);
    s.background = qdalign::imgproc::BackgroundModel::constant(150.0);
    s.rotation_deg = angle;
    s.shot_noise = false;
    for p in [c - 3000.0, c + 3000.0] {
        for o in [Orientation::AlongX, Orientation::AlongY] {
            s.lines.push(LineSpec {
                orientation: o,
                position_nm: p,
                width_nm: 400.0,
                depth: 1.0,
            });
        }
    }
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn rotation_estimate_is_odd(angle in 0.2f64..5.0) {
        let a = estimate_rotation(&render(&grid_lines_scene(angle)).unwrap()).unwrap();
        let b = estimate_rotation(&render(&grid_lines_scene(-angle)).unwrap()).unwrap();
        let tol = 2.0 * a.uncertainty.max(b.uncertainty);
        prop_assert!((a.angle + b.angle).abs() <= tol, "{} vs {} (tol {})", a.angle, b.angle, tol);
        prop_assert!((a.angle - angle).abs() <= 2.0 * a.uncertainty + 0.02, "{} vs {}", a.angle, angle);
    }
}

// ---- synth ----

fn spot_scene(mode: ImagingMode, psf: PsfKind, x: f64, y: f64, photons: f64) -> Scene {
    let mut s = Scene::empty(mode, frame(64, 64));
    s.shot_noise = false;
    s.emitters.push(EmitterSpec {
        x_nm: x * PITCH,
        y_nm: y * PITCH,
        photons,
        psf,
        psf_scale_nm: 1.5 * PITCH,
        ellipticity: 1.0,
        orientation_deg: 0.0,
    });
    s.crosses.push(CrossSpec {
        center_x_nm: 20.0 * PITCH,
        center_y_nm: 40.0 * PITCH,
        arm_length_nm: 600.0,
        arm_width_nm: 150.0,
        depth: 1.0,
    });
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn render_is_deterministic(seed in any::<u64>(), x in 20.0f64..44.0, y in 20.0f64..44.0) {
        let mut s = spot_scene(ImagingMode::IntrinsicEmitters, PsfKind::Gaussian, x, y, 5e3);
        s.shot_noise = true;
        s.read_noise_sigma = 2.0;
        s.seed = seed;
        prop_assert_eq!(render(&s).unwrap(), render(&s).unwrap());
    }

    #[test]
    fn gaussian_photons_are_conserved(x in 25.0f64..39.0, y in 25.0f64..39.0, n in 1e2f64..1e6) {
        let s = spot_scene(ImagingMode::IntrinsicEmitters, PsfKind::Gaussian, x, y, n);
        let total: f64 = expected_counts(&s).iter().sum();
        prop_assert!((total - n).abs() <= 1e-9 * n, "{} vs {}", total, n);
    }

    #[test]
    fn modes_show_only_their_features(x in 30.0f64..40.0, y in 10.0f64..20.0) {
        // emitter images ignore crosses, marker images ignore emitters
        let emit = spot_scene(ImagingMode::IntrinsicEmitters, PsfKind::Gaussian, x, y, 1e4);
        let mut emit_only = emit.clone();
        emit_only.crosses.clear();
        prop_assert_eq!(expected_counts(&emit), expected_counts(&emit_only));

        let mark = spot_scene(ImagingMode::IntrinsicMarkers, PsfKind::Gaussian, x, y, 1e4);
        let mut mark_only = mark.clone();
        mark_only.emitters.clear();
        prop_assert_eq!(expected_counts(&mark), expected_counts(&mark_only));
    }

    #[test]
    fn airy_psf_decreases_to_first_zero(scale in 0.5f64..5.0, a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (r1, r2) = (a.min(b), a.max(b));
        let z = AIRY_FIRST_ZERO * scale;
        prop_assume!(r2 > r1);
        prop_assert!(airy_psf(r1 * z, scale) > airy_psf(r2 * z, scale));
    }
}

// ---- fitcore ----

fn erf_family(conv: SigmaConvention) -> ErfEdgeFamily {
    ErfEdgeFamily { width: 5.0, convention: conv }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn erf_edge_is_even_about_center(a in 1.0f64..500.0, xc in -20.0f64..20.0, sigma in 0.3f64..6.0,
                                     d in 1.0f64..12.0, c in -50.0f64..50.0, dx in 0.0f64..30.0, std in any::<bool>()) {
        let m = ErfEdgeModel {
            amplitude: a,
            center: xc,
            sigma,
            width: d,
            slope: 0.0,
            offset: c,
            convention: if std { SigmaConvention::StdDev } else { SigmaConvention::Variance },
        };
        let (l, r) = (m.eval(xc - dx), m.eval(xc + dx));
        prop_assert!((l - r).abs() <= 1e-12 * (a + c.abs()), "{} vs {}", l, r);
    }

    #[test]
    fn lm_cost_never_increases(a in 50.0f64..300.0, xc in -2.0f64..2.0, sigma in 0.8f64..3.0, start in -3.0f64..3.0) {
        let fam = erf_family(SigmaConvention::Variance);
        let xs: Vec<f64> = (0..41).map(|i| -10.0 + 0.5 * i as f64).collect();
        let truth = [a, xc, sigma, 0.1, 5.0];
        let ys: Vec<f64> = xs.iter().enumerate().map(|(i, &x)| fam.value(x, &truth) + ((i * 7919) % 13) as f64 - 6.0).collect();
        let r = fit_curve(&fam, &xs, &ys, FitProblem::new(vec![a * 0.7, start, 1.5, 0.0, 0.0])).unwrap();
        prop_assert!(r.cost_history.windows(2).all(|w| w[1] <= w[0]));
    }
}

fn perturbed(p: &[f64], seed: u64) -> Vec<f64> {
    let mut s = seed;
    p.iter()
        .map(|&v| {
            s = qdalign::rng::splitmix64(s);
            let u = (s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0;
            v * (1.0 + 0.1 * u)
        })
        .collect()
}

fn assert_recovered(fit: &[f64], truth: &[f64]) -> Result<(), TestCaseError> {
    for (f, t) in fit.iter().zip(truth) {
        prop_assert!((f - t).abs() <= 1e-5 * t.abs().max(1e-3), "fit {:?} truth {:?}", fit, truth);
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn noise_free_erf_edge_is_recovered(a in 50.0f64..300.0, xc in -2.0f64..2.0, sigma in 0.8f64..3.0,
                                        b in 0.05f64..0.5, c in 5.0f64..30.0, seed in any::<u64>(), std in any::<bool>()) {
        let fam = erf_family(if std { SigmaConvention::StdDev } else { SigmaConvention::Variance });
        let truth = [a, xc, sigma, b, c];
        let xs: Vec<f64> = (0..61).map(|i| -15.0 + 0.5 * i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|&x| fam.value(x, &truth)).collect();
        let mut init = perturbed(&truth, seed);
        // location parameters are perturbed relative to the edge scale
        init[1] = xc + 0.1 * sigma * (init[1] - xc).signum();
        let r = fit_curve(&fam, &xs, &ys, FitProblem::new(init).with_tolerance(1e-15)).unwrap();
        assert_recovered(&r.params, &truth)?;
    }

    #[test]
    fn noise_free_gaussian_2d_is_recovered(a in 100.0f64..1000.0, x0 in 6.0f64..8.0, y0 in 6.0f64..8.0,
                                           sx in 1.0f64..2.5, sy in 1.0f64..2.5, off in 1.0f64..20.0, seed in any::<u64>()) {
        let truth = [a, x0, y0, sx, sy, off];
        let coords: Vec<(f64, f64)> = (0..225).map(|i| ((i % 15) as f64, (i / 15) as f64)).collect();
        let ys: Vec<f64> = coords.iter().map(|&c| Gaussian2DFamily.value(c, &truth)).collect();
        let r = fit_curve(&Gaussian2DFamily, &coords, &ys, FitProblem::new(perturbed(&truth, seed)).with_tolerance(1e-15)).unwrap();
        assert_recovered(&r.params, &truth)?;
    }

    #[test]
    fn noise_free_gaussian_line_is_recovered(a in 100.0f64..1000.0, c in 929.0f64..931.0, w in 0.05f64..0.2,
                                             slope in 0.5f64..5.0, off in 5.0f64..50.0, seed in any::<u64>()) {
        let fam = GaussianLineFamily { reference: 928.0 };
        let truth = [a, c, w, slope, off];
        let xs: Vec<f64> = (0..200).map(|i| 928.0 + 0.02 * i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|&x| fam.value(x, &truth)).collect();
        let mut init = perturbed(&truth, seed);
        init[1] = c + (init[1] - c) / c * w;
        let r = fit_curve(&fam, &xs, &ys, FitProblem::new(init).with_tolerance(1e-15)).unwrap();
        assert_recovered(&r.params, &truth)?;
    }

    #[test]
    fn noise_free_triple_gaussian_is_recovered(mid in -50.0f64..50.0, a in 50.0f64..150.0, m in 30.0f64..80.0, seed in any::<u64>()) {
        let fam = TripleGaussianFamily { reference: 0.0 };
        let truth = [a, mid - 1200.0, 180.0, m, mid, 200.0, a * 0.9, mid + 1200.0, 180.0, 0.002, 20.0];
        let xs: Vec<f64> = (0..96).map(|i| -2800.0 + 59.0 * i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|&x| fam.value(x, &truth)).collect();
        let r = fit_curve(&fam, &xs, &ys, FitProblem::new(perturbed(&truth, seed)).with_tolerance(1e-15)).unwrap();
        assert_recovered(&r.params, &truth)?;
    }

    #[test]
    fn noise_free_airy_is_recovered(a in 100.0f64..1000.0, x0 in 9.0f64..11.0, y0 in 9.0f64..11.0,
                                    major in 2.5f64..4.0, ratio in 0.6f64..0.85, phi in 10.0f64..60.0, seed in any::<u64>()) {
        let truth = [a, x0, y0, major, major * ratio, phi, 5.0];
        let coords: Vec<(f64, f64)> = (0..441).map(|i| ((i % 21) as f64, (i / 21) as f64)).collect();
        let ys: Vec<f64> = coords.iter().map(|&c| EllipticalAiryFamily.value(c, &truth)).collect();
        let r = fit_curve(&EllipticalAiryFamily, &coords, &ys, FitProblem::new(perturbed(&truth, seed)).with_tolerance(1e-15)).unwrap();
        assert_recovered(&r.params, &truth)?;
    }
}

#[test]
fn weighted_curve_fit_matches_unweighted_on_exact_data() {
    let fam = GaussianLineFamily { reference: 0.0 };
    let truth = [10.0, 1.0, 0.5, 0.0, 1.0];
    let xs: Vec<f64> = (0..50).map(|i| -2.0 + 0.1 * i as f64).collect();
    let ys: Vec<f64> = xs.iter().map(|&x| fam.value(x, &truth)).collect();
    let w = vec![2.0; xs.len()];
    let mut cf = CurveFit::new(&fam, &xs, &ys);
    cf.weights = Some(&w);
    let r = lm_fit(&cf, &FitProblem::new(vec![9.0, 1.1, 0.6, 0.0, 0.9])).unwrap();
    for (a, b) in r.params.iter().zip(truth) {
        assert!((a - b).abs() < 1e-8);
    }
}

// ---- markers ----

fn cross_image(cx: f64, cy: f64) -> Image {
    let mut s = Scene::empty(ImagingMode::IntrinsicMarkers, frame(320, 320));
    s.background = qdalign::imgproc::BackgroundModel::constant(200.0);
    s.shot_noise = false;
    let g = MarkerGrid::default();
    s.crosses.push(CrossSpec {
        center_x_nm: cx * PITCH,
        center_y_nm: cy * PITCH,
        arm_length_nm: g.arm_length_nm,
        arm_width_nm: g.arm_width_nm,
        depth: 1.0,
    });
    let img = render(&s).unwrap();
    let (_, bg) = subtract_background(&img);
    inverted_residual(&img, &bg)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn cross_fit_is_translation_equivariant(x in 155.0f64..165.0, y in 155.0f64..165.0, dx in -3.0f64..3.0, dy in -3.0f64..3.0) {
        let g = MarkerGrid::default();
        let cfg = CrossFitConfig::default();
        let side = qdalign::markers::roi_side(&g, PITCH);
        let fit = |cx: f64, cy: f64| {
            let img = cross_image(cx, cy);
            let roi = Roi::centered((cx.round(), cy.round()), side, 320, 320).unwrap();
            fit_cross(&img, &roi, &g, &cfg).unwrap()
        };
        let a = fit(x, y);
        let b = fit(x + dx, y + dy);
        let ux = a.unc_x_nm.hypot(b.unc_x_nm).max(1e-3);
        let uy = a.unc_y_nm.hypot(b.unc_y_nm).max(1e-3);
        prop_assert!((b.center_x_nm - a.center_x_nm - dx * PITCH).abs() <= ux + 0.5);
        prop_assert!((b.center_y_nm - a.center_y_nm - dy * PITCH).abs() <= uy + 0.5);
    }
}

proptest! {
    #[test]
    fn perpendicular_arms_intersect_exactly(x0 in -50.0f64..50.0, y0 in -50.0f64..50.0, deg in -5.0f64..5.0,
                                            xr in 0.0f64..40.0, yr in 0.0f64..40.0) {
        // both arms pass through (x0, y0) and are rotated by the same angle
        let t = deg.to_radians().tan();
        let cov = [[1e-4, 0.0], [0.0, 1e-6]];
        let h = ArmLine { slope: t, intercept: y0 + t * (xr - x0), reference: xr, covariance: cov };
        let v = ArmLine { slope: -t, intercept: x0 - t * (yr - y0), reference: yr, covariance: cov };
        let ((x, y), _) = intersect(&h, &v).unwrap();
        prop_assert!((x - x0).abs() <= 1e-9 && (y - y0).abs() <= 1e-9, "({x}, {y}) vs ({x0}, {y0})");
    }
}

// ---- emitters ----

proptest! {
    #[test]
    fn predicted_variance_is_monotone(sigma in 0.5f64..3.0, n in 1e2f64..1e6, b2 in 0.0f64..100.0, k in 1.01f64..3.0) {
        let v = mortensen_variance(&MortensenInputs::new(sigma, n, b2));
        prop_assert!(mortensen_variance(&MortensenInputs::new(sigma, n * k, b2)) < v);
        prop_assert!(mortensen_variance(&MortensenInputs::new(sigma, n, b2 * k + 0.1)) > v);
        prop_assert!(mortensen_variance(&MortensenInputs::new(sigma * k, n, b2)) > v);
    }
}

// ---- waveguides ----

fn emitter_at(x: f64, y: f64, unc: f64) -> EmitterFit {
    EmitterFit {
        x_nm: x,
        y_nm: y,
        model: EmitterModel::Airy2d,
        sigma_x: 3.0,
        sigma_y: 2.0,
        orientation_deg: 0.0,
        photons: 1e4,
        b2: 5.0,
        unc_x_nm: unc,
        unc_y_nm: unc,
        ci95_x_nm: 2.0 * unc,
        ci95_y_nm: 2.0 * unc,
    }
}

proptest! {
    #[test]
    fn misalignment_flips_under_reflection(axis in -1e4f64..1e4, q in -1e4f64..1e4, u in 0.1f64..50.0, along_x in any::<bool>()) {
        let o = if along_x { Orientation::AlongX } else { Orientation::AlongY };
        let wg = WaveguideAxis { orientation: o, axis_nm: axis, unc_nm: 5.0, sections: vec![] };
        let refl = 2.0 * axis - q;
        let (a, b) = match o {
            Orientation::AlongX => (emitter_at(0.0, q, u), emitter_at(0.0, refl, u)),
            Orientation::AlongY => (emitter_at(q, 0.0, u), emitter_at(refl, 0.0, u)),
        };
        let da = misalign(&a, &wg, o).unwrap();
        let db = misalign(&b, &wg, o).unwrap();
        prop_assert!((da.delta_nm + db.delta_nm).abs() <= 1e-9 * (1.0 + axis.abs() + q.abs()));
        prop_assert_eq!(da.unc_nm, db.unc_nm);
    }

    #[test]
    fn weighted_mean_is_bounded(v in prop::collection::vec((-1e3f64..1e3, 0.1f64..100.0), 1..30)) {
        let (m, u) = weighted_mean(&v).unwrap();
        let lo = v.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let hi = v.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        let umin = v.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        prop_assert!(m >= lo - 1e-9 && m <= hi + 1e-9);
        prop_assert!(u <= umin * (1.0 + 1e-12));
    }

    #[test]
    fn misalignment_stats_match_definitions(v in prop::collection::vec(-500.0f64..500.0, 5..80)) {
        let s = misalign_stats(&v).unwrap();
        let n = v.len() as f64;
        let mut sum = 0.0;
        for x in &v { sum += x; }
        let mean = sum / n;
        let mut ss = 0.0;
        for x in &v { ss += (x - mean) * (x - mean); }
        let std = (ss / (n - 1.0)).sqrt();
        prop_assert!((s.mean - mean).abs() <= 1e-12 * (1.0 + mean.abs()));
        prop_assert!((s.std - std).abs() <= 1e-12 * (1.0 + std));
    }
}

// ---- registration ----

fn cross_at(x: f64, y: f64, unc: f64) -> qdalign::markers::CrossFit {
    let line = ArmLine { slope: 0.0, intercept: 0.0, reference: 0.0, covariance: [[0.0; 2]; 2] };
    qdalign::markers::CrossFit {
        center_x_nm: x,
        center_y_nm: y,
        unc_x_nm: unc,
        unc_y_nm: unc,
        n_sections_used: (9, 9),
        horizontal: line,
        vertical: line,
    }
}

proptest! {
    #[test]
    fn solved_transform_reproduces_exact_nominals(theta in -3.0f64..3.0, s in 0.98f64..1.02,
                                                  tx in -1e5f64..1e5, ty in -1e5f64..1e5, unc in 1.0f64..10.0) {
        let truth = FrameTransform { rotation_deg: theta, translation_nm: (tx, ty), scale: s, ..FrameTransform::identity() };
        let pts = [(10000.0, 10000.0), (50000.0, 10500.0), (9500.0, 50000.0), (50500.0, 49000.0)];
        let observed: Vec<_> = pts.iter().map(|&(x, y)| cross_at(x, y, unc)).collect();
        let nominal: Vec<(f64, f64)> = pts.iter().map(|&(x, y)| truth.apply(x, y)).collect();
        let t = solve_transform(&observed, &nominal).unwrap();
        prop_assert!(t.residual_rms_nm < 1e-6, "rms {}", t.residual_rms_nm);
        for (&(x, y), &(gx, gy)) in pts.iter().zip(&nominal) {
            let (ax, ay) = t.apply(x, y);
            prop_assert!((ax - gx).abs() < 1e-6 && (ay - gy).abs() < 1e-6);
        }
    }

    #[test]
    fn global_uncertainty_grows_with_inputs(u in 0.0f64..20.0, m in 0.0f64..20.0, du in 0.01f64..5.0, dm in 0.01f64..5.0) {
        let t = FrameTransform::identity();
        let p = |unc: f64| ImagePoint { x_nm: 100.0, y_nm: 200.0, unc_x_nm: unc, unc_y_nm: unc };
        let base = to_global("q", &p(u), &t, m, PointSource::Emitter).unc_nm;
        prop_assert!(to_global("q", &p(u + du), &t, m, PointSource::Emitter).unc_nm > base);
        prop_assert!(to_global("q", &p(u), &t, m + dm, PointSource::Emitter).unc_nm > base);
    }

    #[test]
    fn matching_yield_is_symmetric(pts in prop::collection::vec((0.0f64..2000.0, 0.0f64..2000.0, -200.0f64..200.0, -200.0f64..200.0), 1..25),
                                   radius in 10.0f64..300.0) {
        let mk = |x: f64, y: f64, i: usize| GlobalPoint { id: format!("p{i}"), x_nm: x, y_nm: y, unc_nm: 1.0, source: PointSource::Emitter };
        let pre: Vec<_> = pts.iter().enumerate().map(|(i, p)| mk(p.0, p.1, i)).collect();
        let post: Vec<_> = pts.iter().enumerate().map(|(i, p)| mk(p.0 + p.2, p.1 + p.3, i)).collect();
        let a = correlate_devices(&pre, &post, radius).unwrap();
        let b = correlate_devices(&post, &pre, radius).unwrap();
        prop_assert_eq!(a.matched, b.matched);
        prop_assert_eq!(a.yield_fraction, b.yield_fraction);
    }
}

// ---- stark ----

fn trace_from(volts: &[f64], lambda0: f64, p_z: f64, alpha: f64, weights: &[f64]) -> PlateauTrace {
    let cfg = FieldConfig::default();
    PlateauTrace {
        label: ExcitonLabel::X0,
        points: volts
            .iter()
            .zip(weights)
            .map(|(&v, &w)| PlateauPoint {
                voltage: v,
                wavelength_nm: stark_wavelength_nm(lambda0, p_z, alpha, field(v, &cfg)),
                weight: w,
            })
            .collect(),
    }
}

fn line(center: f64) -> Spectrum {
    let wl: Vec<f64> = (0..400).map(|i| 925.0 + 0.025 * i as f64).collect();
    let y = wl.iter().map(|&x| 800.0 * (-0.5 * ((x - center) / 0.07).powi(2)).exp() + 30.0).collect();
    Spectrum::new(wl, y).unwrap()
}

proptest! {
    #[test]
    fn field_is_affine_in_bias(v1 in -2.0f64..3.0, v2 in -2.0f64..3.0) {
        let cfg = FieldConfig::default();
        let d = field(v1, &cfg) - field(v2, &cfg);
        prop_assert!((d - (v1 - v2) / cfg.thickness_nm * 1e4).abs() <= 1e-9);
    }

    #[test]
    fn spectral_shift_is_antisymmetric(a in 928.0f64..932.0, b in 928.0f64..932.0) {
        let (sa, sb) = (line(a), line(b));
        let f = spectral_shift(&sa, &sb).unwrap();
        let r = spectral_shift(&sb, &sa).unwrap();
        prop_assert!((f.delta_nm + r.delta_nm).abs() <= 1e-9);
        prop_assert!((f.delta_nm - (b - a)).abs() <= 1e-6);
    }

    #[test]
    fn stark_fit_ignores_weight_scale(l0 in 925.0f64..935.0, p in -0.05f64..0.05, al in -2e-3f64..-1e-5,
                                      k in 1e-3f64..1e3, w in prop::collection::vec(0.5f64..5.0, 40)) {
        let volts: Vec<f64> = (0..40).map(|i| 0.4 + 0.03 * i as f64).collect();
        let mut t = trace_from(&volts, l0, p, al, &w);
        // small deterministic ripple so the fit has residuals
        for (i, pt) in t.points.iter_mut().enumerate() {
            pt.wavelength_nm += 1e-3 * ((i * 37 % 11) as f64 - 5.0);
        }
        let a = fit_stark(&t, &FieldConfig::default()).unwrap();
        let mut scaled = t.clone();
        scaled.points.iter_mut().for_each(|pt| pt.weight *= k);
        let b = fit_stark(&scaled, &FieldConfig::default()).unwrap();
        prop_assert!((a.lambda0_nm - b.lambda0_nm).abs() <= 1e-9 * a.lambda0_nm);
        prop_assert!((a.p_z - b.p_z).abs() <= 1e-9 * (1e-3 + a.p_z.abs()));
        prop_assert!((a.alpha - b.alpha).abs() <= 1e-9 * (1e-6 + a.alpha.abs()));
        for i in 0..3 {
            prop_assert!((a.ci95[i] - b.ci95[i]).abs() <= 1e-6 * (1e-12 + a.ci95[i]));
        }
    }

    #[test]
    fn shift_statistics_match_definitions(v in prop::collection::vec((0u8..2, 0u8..3, -3.0f64..3.0), 1..60)) {
        let recs: Vec<ShiftRecord> = v
            .iter()
            .enumerate()
            .map(|(i, &(s, g, d))| ShiftRecord {
                qd_id: format!("q{i}"),
                structure: if s == 0 { Structure::Nanoguide } else { Structure::Phcw },
                group: format!("g{g}"),
                delta_nm: d,
            })
            .collect();
        for grouping in [Grouping::Structure, Grouping::Group, Grouping::StructureAndGroup] {
            let stats = shift_stats(&recs, grouping).unwrap();
            prop_assert_eq!(stats.iter().map(|g| g.n).sum::<usize>(), recs.len());
            for g in stats {
                let vals: Vec<f64> = recs
                    .iter()
                    .filter(|r| match grouping {
                        Grouping::Structure => r.structure.to_string() == g.group,
                        Grouping::Group => r.group == g.group,
                        Grouping::StructureAndGroup => format!("{}/{}", r.structure, r.group) == g.group,
                    })
                    .map(|r| r.delta_nm)
                    .collect();
                let n = vals.len() as f64;
                let mean = vals.iter().sum::<f64>() / n;
                prop_assert!((g.mean_nm - mean).abs() <= 1e-12);
                match g.std_nm {
                    None => prop_assert_eq!(vals.len(), 1),
                    Some(s) => {
                        let sd = (vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
                        prop_assert!((s - sd).abs() <= 1e-12);
                    }
                }
            }
        }
    }
}
