use proptest::prelude::*;

use thsmooth_core::energy::energy_u;
use thsmooth_core::guidance::WeightField;
use thsmooth_core::io::{clamp_quantize, load_image, save_image, SampleDepth};
use thsmooth_core::penalty::HuberSpec;
use thsmooth_core::pipeline::{smooth_with, Preset, SmoothOptions};
use thsmooth_core::solver::{assemble_from_iterate, solve, solve_dense, SolveMethod, SolveOptions};
use thsmooth_core::{ImageGrid, SmoothingParams};

fn grid(h: usize, w: usize, c: usize) -> impl Strategy<Value = ImageGrid> {
    prop::collection::vec(0.0f64..1.0, h * w * c).prop_map(move |d| ImageGrid::new(h, w, c, d).unwrap())
}

fn sized_grid(c: usize) -> impl Strategy<Value = ImageGrid> {
    (2usize..9, 2usize..9).prop_flat_map(move |(h, w)| grid(h, w, c))
}

fn params() -> impl Strategy<Value = SmoothingParams> {
    (0.05f64..5.0, 0.0f64..1.0, 1e-7f64..0.1, 0.05f64..1.0, 0usize..3, 1usize..3, 1usize..5).prop_map(
        |(lambda, alpha, a, b, r_d, r_s, n)| SmoothingParams {
            lambda,
            alpha,
            a_d: a,
            b_d: b.max(a),
            a_s: a,
            b_s: b.max(a),
            r_d,
            r_s,
            n_iters: n,
            ..Default::default()
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn truncated_penalty_is_even_bounded_and_monotone(x in -3.0f64..3.0, y in -3.0f64..3.0, a in 1e-7f64..1.0, extra in 0.0f64..2.0) {
        let s = HuberSpec::new(a, a + extra).unwrap();
        prop_assert_eq!(s.truncated(x), s.truncated(-x));
        prop_assert!(s.truncated(x) <= s.ceiling() + 1e-15);
        prop_assert!(s.truncated(x) <= s.huber(x));
        if x.abs() <= y.abs() {
            prop_assert!(s.truncated(x) <= s.truncated(y) + 1e-15);
        }
    }

    #[test]
    fn system_is_symmetric(f in sized_grid(1), p in params()) {
        let w = WeightField::build(&f, f.extent(), &p).unwrap();
        let (sys, _) = assemble_from_iterate(f.data(), f.data(), &w, &p).unwrap();
        let m = sys.to_dense();
        for i in 0..m.len() {
            for j in 0..i {
                prop_assert_eq!(m[i][j], m[j][i]);
            }
        }
    }

    #[test]
    fn iterative_and_dense_solves_agree(f in sized_grid(1), p in params()) {
        let w = WeightField::build(&f, f.extent(), &p).unwrap();
        let (sys, _) = assemble_from_iterate(f.data(), f.data(), &w, &p).unwrap();
        let dense = solve_dense(&sys).unwrap();
        let opts = SolveOptions { method: SolveMethod::Pcg, tol: 1e-12, max_iters: Some(100_000), ..Default::default() };
        let (x, _) = solve(&sys, f.data(), &opts).unwrap();
        let scale = dense.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for (a, b) in x.iter().zip(&dense) {
            prop_assert!((a - b).abs() <= 1e-6 * scale, "{} vs {}", a, b);
        }
    }

    #[test]
    fn audited_runs_never_increase_energy(f in sized_grid(3), p in params()) {
        let opts = SmoothOptions { audit: true, ..Default::default() };
        let out = smooth_with(&f, &f, &p, &opts).unwrap();
        let w = WeightField::build(&f, f.extent(), &p).unwrap();
        let e0 = energy_u(&f, &f, &w, &p).unwrap();
        let last = energy_u(&out.image, &f, &w, &p).unwrap();
        prop_assert!(last <= e0 + 1e-10);
    }

    #[test]
    fn smoothing_commutes_with_mirroring(f in sized_grid(3), p in params()) {
        let a = smooth_with(&f, &f, &p, &SmoothOptions::default()).unwrap().image.flip_horizontal();
        let m = f.flip_horizontal();
        let b = smooth_with(&m, &m, &p, &SmoothOptions::default()).unwrap().image;
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-6, "{} vs {}", x, y);
        }
    }

    #[test]
    fn png_round_trip_matches_quantizer(f in sized_grid(3), sixteen in any::<bool>()) {
        let depth = if sixteen { SampleDepth::U16 } else { SampleDepth::U8 };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        save_image(&f, &path, depth).unwrap();
        let back = load_image(&path).unwrap();
        prop_assert_eq!(back.depth, depth);
        for (x, y) in f.data().iter().zip(back.image.data()) {
            prop_assert_eq!(clamp_quantize(*x, depth), *y);
        }
    }

    #[test]
    fn pfm_round_trip_is_exact_in_single_precision(f in sized_grid(1)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pfm");
        save_image(&f, &path, SampleDepth::F32).unwrap();
        let back = load_image(&path).unwrap().image;
        for (x, y) in f.data().iter().zip(back.data()) {
            prop_assert_eq!(*x as f32 as f64, *y);
        }
    }
}

#[test]
fn constant_images_are_fixed_points_of_every_preset() {
    let f = ImageGrid::filled(7, 9, 3, 0.37).unwrap();
    for p in Preset::ALL {
        let u = smooth_with(&f, &f, &p.template(), &SmoothOptions::default()).unwrap().image;
        for v in u.data() {
            assert!((v - 0.37).abs() < 1e-6, "{}: {v}", p.name());
        }
    }
}
