//! Guided depth upsampling, its synthetic benchmark and the MAE harness.
//!
//! The low-resolution map is brought to the guide's extent with bicubic
//! (Catmull-Rom) interpolation and then smoothed with the group 3 regime using
//! the high-resolution guide.

use std::fmt;
use std::path::{Path, PathBuf};

use image::imageops::{resize, FilterType};
use image::{ImageBuffer, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::pipeline::{smooth_with, Preset, SmoothOptions};
use crate::SmoothingParams;

#[derive(Debug, Clone, PartialEq)]
pub struct DepthSample {
    pub low_res: ImageGrid,
    pub guide: ImageGrid,
    pub ground_truth: Option<ImageGrid>,
    pub scale: usize,
}

impl DepthSample {
    pub fn new(low_res: ImageGrid, guide: ImageGrid, ground_truth: Option<ImageGrid>, scale: usize) -> Result<Self> {
        let s = DepthSample {
            low_res,
            guide,
            ground_truth,
            scale,
        };
        s.check()?;
        Ok(s)
    }

    fn check(&self) -> Result<()> {
        if !matches!(self.scale, 1 | 2 | 4 | 8 | 16) {
            return Err(Error::Contract(format!("scale must be 1, 2, 4, 8 or 16 (got {})", self.scale)));
        }
        if self.low_res.channels() != 1 {
            return Err(Error::Shape("depth map must have one channel".into()));
        }
        let (h, w) = (self.low_res.height() * self.scale, self.low_res.width() * self.scale);
        if (self.guide.height(), self.guide.width()) != (h, w) {
            return Err(Error::Shape(format!(
                "guide is {}, expected {w}x{h} for scale {}",
                self.guide.extent(),
                self.scale
            )));
        }
        if let Some(gt) = &self.ground_truth {
            if gt.extent() != self.guide.extent() || gt.channels() != 1 {
                return Err(Error::Shape(format!("ground truth is {}x{}, expected {w}x{h}x1", gt.width(), gt.height())));
            }
        }
        Ok(())
    }
}

/// Catmull-Rom upsampling of a single-channel map to `height × width`.
pub fn bicubic_upsample(low: &ImageGrid, height: usize, width: usize) -> Result<ImageGrid> {
    if low.channels() != 1 {
        return Err(Error::Shape("bicubic_upsample expects one channel".into()));
    }
    if (low.height(), low.width()) == (height, width) {
        return Ok(low.clone());
    }
    let buf: ImageBuffer<Luma<f32>, Vec<f32>> = ImageBuffer::from_raw(
        low.width() as u32,
        low.height() as u32,
        low.data().iter().map(|&v| v as f32).collect(),
    )
    .ok_or_else(|| Error::Shape("depth buffer".into()))?;
    let up = resize(&buf, width as u32, height as u32, FilterType::CatmullRom);
    ImageGrid::with_intensity_max(
        height,
        width,
        1,
        up.into_raw().into_iter().map(f64::from).collect(),
        low.intensity_max(),
    )
}

/// Bicubic initialization followed by guided smoothing. Depth is divided by
/// the map's `intensity_max` for the smoothing and scaled back afterwards.
pub fn upsample_depth(sample: &DepthSample, params: &SmoothingParams, opts: &SmoothOptions) -> Result<ImageGrid> {
    sample.check()?;
    let init = bicubic_upsample(&sample.low_res, sample.guide.height(), sample.guide.width())?;
    let im = sample.low_res.intensity_max();
    let f = ImageGrid::new(init.height(), init.width(), 1, init.data().iter().map(|v| v / im).collect())?;
    let g = normalized(&sample.guide)?;
    let u = smooth_with(&f, &g, params, opts)?.image;
    ImageGrid::with_intensity_max(u.height(), u.width(), 1, u.data().iter().map(|v| v * im).collect(), im)
}

fn normalized(g: &ImageGrid) -> Result<ImageGrid> {
    let im = g.intensity_max();
    if im == 1.0 {
        return Ok(g.clone());
    }
    ImageGrid::new(g.height(), g.width(), g.channels(), g.data().iter().map(|v| v / im).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaeScore {
    pub value: f64,
    pub pixels: usize,
}

impl fmt::Display for MaeScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6}", self.value)
    }
}

pub fn mae(a: &ImageGrid, b: &ImageGrid) -> Result<MaeScore> {
    if a.extent() != b.extent() || a.channels() != 1 || b.channels() != 1 {
        return Err(Error::Shape(format!(
            "mae needs equal single-channel extents, got {}x{} and {}x{}",
            a.extent(),
            a.channels(),
            b.extent(),
            b.channels()
        )));
    }
    let n = a.data().len();
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum();
    Ok(MaeScore {
        value: sum / n as f64,
        pixels: n,
    })
}

/// Mean forward-difference gradient magnitude of channel-averaged `img` over
/// the pixels where `mask` is set.
pub fn mean_gradient(img: &ImageGrid, mask: &[bool]) -> f64 {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let v = |y: usize, x: usize| (0..c).map(|k| img.get(y, x, k)).sum::<f64>() / c as f64;
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in 0..h.saturating_sub(1) {
        for x in 0..w.saturating_sub(1) {
            if mask[y * w + x] {
                let gx = v(y, x + 1) - v(y, x);
                let gy = v(y + 1, x) - v(y, x);
                sum += (gx * gx + gy * gy).sqrt();
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Mean gradient of `output` over `guide` on `mask`: how much guide texture
/// leaked into the output.
pub fn texture_copy_ratio(output: &ImageGrid, guide: &ImageGrid, mask: &[bool]) -> f64 {
    let g = mean_gradient(guide, mask);
    if g == 0.0 {
        0.0
    } else {
        mean_gradient(output, mask) / g
    }
}

pub const BENCH_SIZE: usize = 64;
pub const BENCH_SCALE: usize = 4;
/// Standard deviation of the additive Gaussian noise on the low-resolution map.
pub const BENCH_NOISE: f64 = 0.005;
const TEXTURE_PERIOD: usize = 4;
const TEXTURE_AMPLITUDE: f64 = 0.25;
/// Depth of each rectangle above the background. Bicubic ramps of larger steps
/// exceed `b` and would be truncated before the edge had a chance to sharpen.
const OBJECT_STEP: (f64, f64) = (0.1, 0.3);

/// One synthetic benchmark instance with its evaluation mask.
#[derive(Debug, Clone)]
pub struct SyntheticDepth {
    pub sample: DepthSample,
    /// Pixels where the depth is flat but the guide is textured, away from
    /// depth edges.
    pub textured_flat: Vec<bool>,
}

/// 64 × 64 piecewise-constant depth (background plus three rectangles), a
/// guide whose regions follow the depth with a striped texture on part of the
/// background, and a 4× block-averaged, noisy low-resolution input.
pub fn synthetic_depth(seed: u64) -> SyntheticDepth {
    let n = BENCH_SIZE;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let background = rng.gen_range(0.2..0.35);
    let mut depth = vec![background; n * n];
    let mut label = vec![0usize; n * n];
    for k in 1..=3 {
        let (h, w) = (rng.gen_range(12..28), rng.gen_range(12..28));
        let (y0, x0) = (rng.gen_range(2..n - h - 2), rng.gen_range(2..n - w - 2));
        let d = background + rng.gen_range(OBJECT_STEP.0..OBJECT_STEP.1);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                depth[y * n + x] = d;
                label[y * n + x] = k;
            }
        }
    }
    let shades = [0.35, rng.gen_range(0.55..0.65), rng.gen_range(0.7..0.8), rng.gen_range(0.85..0.95)];
    // texture on one half of the background, split at a random column
    let split = rng.gen_range(n / 4..3 * n / 4);
    let textured = |y: usize, x: usize| x >= split && label[y * n + x] == 0;
    let mut guide = vec![0.0; n * n * 3];
    for y in 0..n {
        for x in 0..n {
            let i = y * n + x;
            let mut v = shades[label[i]];
            if textured(y, x) {
                let stripe = ((x + y) / (TEXTURE_PERIOD / 2)) % 2 == 0;
                v += if stripe { TEXTURE_AMPLITUDE } else { -TEXTURE_AMPLITUDE } / 2.0;
            }
            let tint = [1.0, 0.9, 0.8];
            for c in 0..3 {
                guide[i * 3 + c] = (v * tint[c]).clamp(0.0, 1.0);
            }
        }
    }
    // flat, textured, and at least 3 px from any depth change
    let margin = 3isize;
    let mut mask = vec![false; n * n];
    for y in 0..n {
        for x in 0..n {
            if !textured(y, x) {
                continue;
            }
            let mut flat = true;
            for dy in -margin..=margin {
                for dx in -margin..=margin {
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    if yy >= 0 && xx >= 0 && (yy as usize) < n && (xx as usize) < n {
                        flat &= label[yy as usize * n + xx as usize] == 0;
                    }
                }
            }
            mask[y * n + x] = flat;
        }
    }
    let noise = Normal::new(0.0, BENCH_NOISE).expect("positive deviation");
    let m = n / BENCH_SCALE;
    let mut low = vec![0.0; m * m];
    for y in 0..m {
        for x in 0..m {
            let mut s = 0.0;
            for yy in 0..BENCH_SCALE {
                for xx in 0..BENCH_SCALE {
                    s += depth[(y * BENCH_SCALE + yy) * n + x * BENCH_SCALE + xx];
                }
            }
            low[y * m + x] = (s / (BENCH_SCALE * BENCH_SCALE) as f64 + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    let sample = DepthSample {
        low_res: ImageGrid::new(m, m, 1, low).expect("benchmark extent"),
        guide: ImageGrid::new(n, n, 3, guide).expect("benchmark extent"),
        ground_truth: Some(ImageGrid::new(n, n, 1, depth).expect("benchmark extent")),
        scale: BENCH_SCALE,
    };
    SyntheticDepth {
        sample,
        textured_flat: mask,
    }
}

/// Scores of one benchmark instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchScore {
    pub mae: f64,
    pub baseline_mae: f64,
    pub texture_copy: f64,
}

pub fn score_synthetic(inst: &SyntheticDepth, params: &SmoothingParams, opts: &SmoothOptions) -> Result<BenchScore> {
    let s = &inst.sample;
    let gt = s.ground_truth.as_ref().expect("synthetic instances carry ground truth");
    let out = upsample_depth(s, params, opts)?;
    let base = bicubic_upsample(&s.low_res, gt.height(), gt.width())?;
    Ok(BenchScore {
        mae: mae(&out, gt)?.value,
        baseline_mae: mae(&base, gt)?.value,
        texture_copy: texture_copy_ratio(&out, &s.guide, &inst.textured_flat),
    })
}

/// Default parameters of the upsampling task.
pub fn depth_params() -> SmoothingParams {
    Preset::Group3Guided.template()
}

/// One line of a benchmark manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub low_res: PathBuf,
    pub guide: PathBuf,
    pub ground_truth: PathBuf,
    pub scale: usize,
}

/// Parses `low_res guide ground_truth scale` lines (whitespace or comma
/// separated, `#` comments). Relative paths resolve against `base`.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .collect();
        if fields.len() != 4 {
            return Err(Error::Config(format!(
                "manifest line {}: expected `low_res guide ground_truth scale`",
                n + 1
            )));
        }
        let scale = fields[3]
            .parse()
            .map_err(|_| Error::Config(format!("manifest line {}: bad scale `{}`", n + 1, fields[3])))?;
        out.push(ManifestEntry {
            low_res: base.join(fields[0]),
            guide: base.join(fields[1]),
            ground_truth: base.join(fields[2]),
            scale,
        });
    }
    if out.is_empty() {
        return Err(Error::Config("manifest lists no samples".into()));
    }
    Ok(out)
}

/// `sample,scale,mae,baseline_mae` header.
pub const MAE_CSV_HEADER: &str = "sample,scale,mae,baseline_mae";

pub fn mae_csv_row(sample: &str, scale: usize, mae: f64, baseline: f64) -> String {
    format!("{sample},{scale},{mae:.17e},{baseline:.17e}")
}
