//! The four application groups, the depth upsampling benchmark and the
//! evaluation helpers.

pub mod depth;
pub mod fixtures;

use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::pipeline::{resolve, smooth_with, Preset, PresetOverrides, SmoothOptions};

pub use depth::{bicubic_upsample, mae, texture_copy_ratio, upsample_depth, DepthSample, MaeScore};
pub use fixtures::{fixture_params, gen_1d_fixture, transition_width, FixtureKind};

/// Default amplification of the detail layer.
pub const DEFAULT_BOOST: f64 = 3.0;

/// Base/detail decomposition with a group 1 base layer; returns
/// `clamp(u + boost (f - u))`.
pub fn enhance_detail(f: &ImageGrid, lambda: f64, boost: f64, opts: &SmoothOptions) -> Result<ImageGrid> {
    if !(boost >= 0.0 && boost.is_finite()) {
        return Err(Error::Contract(format!("boost >= 0 (got {boost})")));
    }
    let params = resolve(
        Preset::Group1Detail,
        &PresetOverrides {
            lambda: Some(lambda),
            ..Default::default()
        },
    )?;
    let base = smooth_with(f, f, &params, opts)?.image;
    let data = f
        .data()
        .iter()
        .zip(base.data())
        .map(|(&fv, &uv)| uv + boost * (fv - uv))
        .collect();
    Ok(ImageGrid::new(f.height(), f.width(), f.channels(), data)?.clamped())
}

/// Group 2 smoothing of a compressed clip-art image, clamped.
pub fn remove_clipart_artifacts(
    f: &ImageGrid,
    b: f64,
    r: usize,
    lambda: f64,
    opts: &SmoothOptions,
) -> Result<ImageGrid> {
    let params = resolve(
        Preset::Group2Sharpen,
        &PresetOverrides {
            lambda: Some(lambda),
            radius: Some(r),
            b: Some(b),
            ..Default::default()
        },
    )?;
    Ok(smooth_with(f, f, &params, opts)?.image.clamped())
}

/// Group 4 structure-preserving smoothing.
pub fn remove_texture(f: &ImageGrid, lambda: f64, r: usize, opts: &SmoothOptions) -> Result<ImageGrid> {
    let params = resolve(
        Preset::Group4Texture,
        &PresetOverrides {
            lambda: Some(lambda),
            radius: Some(r),
            ..Default::default()
        },
    )?;
    Ok(smooth_with(f, f, &params, opts)?.image)
}
