use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use thsmooth_core::pipeline::{resolve, smooth_with, Preset, PresetOverrides, SmoothOptions};
use thsmooth_core::tasks::{
    bicubic_upsample, enhance_detail, remove_clipart_artifacts, remove_texture, upsample_depth, DepthSample,
};
use thsmooth_core::ImageGrid;

fn image(h: usize, w: usize, c: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> ImageGrid {
    let mut d = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                d.push(f(y, x, ch));
            }
        }
    }
    ImageGrid::new(h, w, c, d).unwrap()
}

fn region_variance(g: &ImageGrid, ys: std::ops::Range<usize>, xs: std::ops::Range<usize>) -> f64 {
    let vals: Vec<f64> = ys.flat_map(|y| xs.clone().map(move |x| (y, x))).map(|(y, x)| g.get(y, x, 0)).collect();
    let m = vals.iter().sum::<f64>() / vals.len() as f64;
    vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64
}

#[test]
fn clipart_flattens_blocks_and_keeps_the_edge() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let noise: Vec<f64> = (0..32 * 32).map(|_| rng.gen_range(-0.03..0.03)).collect();
    let f = image(32, 32, 1, |y, x, _| if x < 16 { 0.2 } else { 0.8 } + noise[y * 32 + x]);
    let u = remove_clipart_artifacts(&f, 0.1, 1, 5.0, &SmoothOptions::default()).unwrap();
    for xs in [2..14, 18..30] {
        let before = region_variance(&f, 2..30, xs.clone());
        let after = region_variance(&u, 2..30, xs);
        assert!(after < 0.25 * before, "{after} vs {before}");
    }
    let jump = u.get(16, 16, 0) - u.get(16, 15, 0);
    assert!(jump > 0.5, "edge contrast {jump}");
}

#[test]
fn texture_removal_suppresses_a_fine_checkerboard() {
    let f = image(32, 32, 1, |y, x, _| {
        let base = if y < 16 { 0.3 } else { 0.7 };
        base + if (x / 2 + y / 2) % 2 == 0 { 0.05 } else { -0.05 }
    });
    let u = remove_texture(&f, 0.5, 2, &SmoothOptions::default()).unwrap();
    let before = region_variance(&f, 2..14, 2..30);
    let after = region_variance(&u, 2..14, 2..30);
    assert!(after < 0.2 * before, "{after} vs {before}");
    assert!(u.get(24, 16, 0) - u.get(8, 16, 0) > 0.3);
}

#[test]
fn enhancement_with_boost_one_returns_the_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let f = image(12, 12, 3, |_, _, _| rng.gen_range(0.1..0.9));
    let u = enhance_detail(&f, 20.0, 1.0, &SmoothOptions::default()).unwrap();
    for (a, b) in f.data().iter().zip(u.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn enhancement_with_boost_zero_is_the_base_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let f = image(12, 12, 3, |_, _, _| rng.gen_range(0.1..0.9));
    let u = enhance_detail(&f, 20.0, 0.0, &SmoothOptions::default()).unwrap();
    let p = resolve(
        Preset::Group1Detail,
        &PresetOverrides {
            lambda: Some(20.0),
            ..Default::default()
        },
    )
    .unwrap();
    let base = smooth_with(&f, &f, &p, &SmoothOptions::default()).unwrap().image.clamped();
    assert_eq!(u, base);
}

#[test]
fn enhancement_rejects_negative_boost() {
    let f = ImageGrid::filled(4, 4, 1, 0.5).unwrap();
    assert!(enhance_detail(&f, 20.0, -1.0, &SmoothOptions::default()).is_err());
}

#[test]
fn bicubic_at_scale_one_is_the_identity() {
    let low = image(5, 7, 1, |y, x, _| (y * 7 + x) as f64 / 35.0);
    assert_eq!(bicubic_upsample(&low, 5, 7).unwrap(), low);
}

#[test]
fn upsampling_a_flat_depth_map_stays_flat() {
    let low = ImageGrid::filled(4, 4, 1, 0.42).unwrap();
    let guide = image(16, 16, 3, |y, x, c| ((y * 3 + x * 5 + c) % 7) as f64 / 7.0);
    let s = DepthSample::new(low, guide, None, 4).unwrap();
    let u = upsample_depth(&s, &Preset::Group3Guided.template(), &SmoothOptions::default()).unwrap();
    assert_eq!((u.height(), u.width()), (16, 16));
    for v in u.data() {
        assert!((v - 0.42).abs() < 1e-6);
    }
}

#[test]
fn depth_sample_checks_the_guide_size() {
    let low = ImageGrid::filled(4, 4, 1, 0.5).unwrap();
    let guide = ImageGrid::filled(15, 16, 3, 0.5).unwrap();
    assert!(DepthSample::new(low.clone(), guide, None, 4).is_err());
    let guide = ImageGrid::filled(12, 12, 3, 0.5).unwrap();
    assert!(DepthSample::new(low, guide, None, 3).is_err());
}
