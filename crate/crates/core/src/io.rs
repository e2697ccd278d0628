//! Image, signal and run-configuration files.
//!
//! Images are normalized to `I_m = 1` on load. Integer formats are clamped to
//! `[0, 1]` and quantized with round-half-away-from-zero on save; PFM stores
//! the floats unclamped.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Cursor, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::codecs::png::PngEncoder;
use image::{DynamicImage, ExtendedColorType, ImageEncoder, ImageReader};

use crate::error::{Error, Result};
use crate::grid::ImageGrid;

/// Sample depth of an image file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleDepth {
    U8,
    U16,
    F32,
}

impl SampleDepth {
    fn max_code(self) -> Option<f64> {
        match self {
            SampleDepth::U8 => Some(255.0),
            SampleDepth::U16 => Some(65535.0),
            SampleDepth::F32 => None,
        }
    }
}

impl fmt::Display for SampleDepth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SampleDepth::U8 => "8",
            SampleDepth::U16 => "16",
            SampleDepth::F32 => "32f",
        })
    }
}

impl FromStr for SampleDepth {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "8" => Ok(SampleDepth::U8),
            "16" => Ok(SampleDepth::U16),
            "32" | "32f" | "f32" => Ok(SampleDepth::F32),
            other => Err(Error::Config(format!("bit depth `{other}` (expected 8, 16 or 32f)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileFormat {
    Png,
    /// Binary PGM or PPM, chosen by channel count.
    Pnm,
    Pfm,
}

impl FileFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .unwrap_or_default();
        match ext.as_str() {
            "png" => Ok(FileFormat::Png),
            "pgm" | "ppm" | "pnm" => Ok(FileFormat::Pnm),
            "pfm" => Ok(FileFormat::Pfm),
            _ => Err(Error::format(path, "unsupported extension (png, pgm, ppm, pfm)")),
        }
    }
}

/// A decoded image with the depth it was stored at.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedImage {
    pub image: ImageGrid,
    pub depth: SampleDepth,
}

pub fn load_image(path: impl AsRef<Path>) -> Result<LoadedImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes, path)
}

/// Decodes PNG, binary PGM/PPM or PFM by content.
pub fn decode_image(bytes: &[u8], path: &Path) -> Result<LoadedImage> {
    if bytes.starts_with(b"PF") || bytes.starts_with(b"Pf") {
        return decode_pfm(bytes, path).map(|image| LoadedImage {
            image,
            depth: SampleDepth::F32,
        });
    }
    let reader = ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| Error::format(path, e.to_string()))?;
    match reader.format() {
        Some(image::ImageFormat::Png) | Some(image::ImageFormat::Pnm) => {}
        _ => return Err(Error::format(path, "not a PNG, PGM, PPM or PFM file")),
    }
    let img = reader.decode().map_err(|e| Error::format(path, e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, depth, data): (usize, SampleDepth, Vec<f64>) = match img {
        DynamicImage::ImageLuma8(b) => (1, SampleDepth::U8, scale(b.as_raw(), 255.0)),
        DynamicImage::ImageRgb8(b) => (3, SampleDepth::U8, scale(b.as_raw(), 255.0)),
        DynamicImage::ImageLuma16(b) => (1, SampleDepth::U16, scale(b.as_raw(), 65535.0)),
        DynamicImage::ImageRgb16(b) => (3, SampleDepth::U16, scale(b.as_raw(), 65535.0)),
        other => {
            return Err(Error::format(
                path,
                format!("unsupported pixel layout {:?} (gray or RGB only)", other.color()),
            ))
        }
    };
    let image = ImageGrid::new(h, w, channels, data).map_err(|e| Error::format(path, e.to_string()))?;
    Ok(LoadedImage { image, depth })
}

fn scale<T: Copy + Into<f64>>(raw: &[T], max: f64) -> Vec<f64> {
    raw.iter().map(|&v| v.into() / max).collect()
}

fn decode_pfm(bytes: &[u8], path: &Path) -> Result<ImageGrid> {
    let bad = |m: &str| Error::format(path, format!("PFM: {m}"));
    // three whitespace-separated header tokens after the magic, then one
    // whitespace byte
    let mut pos = 2;
    let mut tokens = Vec::with_capacity(3);
    while tokens.len() < 3 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not text"))?);
    }
    if pos >= bytes.len() {
        return Err(bad("truncated header"));
    }
    pos += 1;
    let channels = if bytes[1] == b'F' { 3 } else { 1 };
    let w: usize = tokens[0].parse().map_err(|_| bad("bad width"))?;
    let h: usize = tokens[1].parse().map_err(|_| bad("bad height"))?;
    let s: f64 = tokens[2].parse().map_err(|_| bad("bad scale"))?;
    if w == 0 || h == 0 || s == 0.0 || !s.is_finite() {
        return Err(bad("empty image or zero scale"));
    }
    let little = s < 0.0;
    let count = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| bad("extent overflows"))?;
    let payload = &bytes[pos..];
    if payload.len() < count * 4 {
        return Err(bad("truncated pixel data"));
    }
    let mut data = vec![0.0; count];
    let row = w * channels;
    // rows are stored bottom to top
    for (k, chunk) in payload[..count * 4].chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        if !v.is_finite() {
            return Err(bad("non-finite sample"));
        }
        let (file_row, col) = (k / row, k % row);
        data[(h - 1 - file_row) * row + col] = v as f64;
    }
    let max = data.iter().cloned().fold(1.0, f64::max);
    ImageGrid::with_intensity_max(h, w, channels, data, max).map_err(|e| Error::format(path, e.to_string()))
}

/// Clamps to `[0, 1]` and rounds half away from zero to an integer code.
pub fn quantize(v: f64, depth: SampleDepth) -> u16 {
    let max = depth.max_code().unwrap_or(65535.0);
    (v.clamp(0.0, 1.0) * max).round() as u16
}

/// The value `load` returns for a sample written at `depth`.
pub fn clamp_quantize(v: f64, depth: SampleDepth) -> f64 {
    match depth.max_code() {
        Some(max) => quantize(v, depth) as f64 / max,
        None => v as f32 as f64,
    }
}

pub fn save_image(grid: &ImageGrid, path: impl AsRef<Path>, depth: SampleDepth) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_image(grid, FileFormat::from_path(path)?, depth, path)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_image(grid: &ImageGrid, format: FileFormat, depth: SampleDepth, path: &Path) -> Result<Vec<u8>> {
    if !grid.is_finite() {
        return Err(Error::NonFinite("output image"));
    }
    let (w, h) = (grid.width() as u32, grid.height() as u32);
    let color = match (grid.channels(), depth) {
        (1, SampleDepth::U8) => ExtendedColorType::L8,
        (3, SampleDepth::U8) => ExtendedColorType::Rgb8,
        (1, SampleDepth::U16) => ExtendedColorType::L16,
        (3, SampleDepth::U16) => ExtendedColorType::Rgb16,
        _ => ExtendedColorType::Unknown(0),
    };
    if format == FileFormat::Pfm || depth == SampleDepth::F32 {
        if format != FileFormat::Pfm {
            return Err(Error::format(path, "32-bit float output needs a .pfm path"));
        }
        return Ok(encode_pfm(grid));
    }
    if format == FileFormat::Pnm {
        return Ok(encode_pnm(grid, depth));
    }
    let raw: Vec<u8> = match depth {
        SampleDepth::U8 => grid.data().iter().map(|&v| quantize(v, depth) as u8).collect(),
        _ => grid
            .data()
            .iter()
            .flat_map(|&v| quantize(v, depth).to_ne_bytes())
            .collect(),
    };
    let mut out = Vec::new();
    PngEncoder::new(&mut out)
        .write_image(&raw, w, h, color)
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(out)
}

/// Binary P5/P6; 16-bit samples are big-endian.
fn encode_pnm(grid: &ImageGrid, depth: SampleDepth) -> Vec<u8> {
    let magic = if grid.channels() == 1 { "P5" } else { "P6" };
    let maxval = if depth == SampleDepth::U8 { 255 } else { 65535 };
    let mut out = format!("{magic}\n{} {}\n{maxval}\n", grid.width(), grid.height()).into_bytes();
    for &v in grid.data() {
        let q = quantize(v, depth);
        if depth == SampleDepth::U8 {
            out.push(q as u8);
        } else {
            out.extend_from_slice(&q.to_be_bytes());
        }
    }
    out
}

fn encode_pfm(grid: &ImageGrid) -> Vec<u8> {
    let (w, h, c) = (grid.width(), grid.height(), grid.channels());
    let magic = if c == 3 { "PF" } else { "Pf" };
    let mut out = format!("{magic}\n{w} {h}\n-1.0\n").into_bytes();
    let row = w * c;
    for y in (0..h).rev() {
        for &v in &grid.data()[y * row..(y + 1) * row] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// Reads a 1-D signal, one decimal value per line. Blank lines are skipped.
pub fn load_signal_csv(path: impl AsRef<Path>) -> Result<ImageGrid> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut values = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let t = line.trim().trim_end_matches(',');
        if t.is_empty() {
            continue;
        }
        let v: f64 = t
            .parse()
            .map_err(|_| Error::format(path, format!("line {}: `{t}` is not a number", n + 1)))?;
        if !v.is_finite() {
            return Err(Error::format(path, format!("line {}: non-finite value", n + 1)));
        }
        values.push(v);
    }
    if values.is_empty() {
        return Err(Error::format(path, "no samples"));
    }
    ImageGrid::from_signal(&values)
}

/// Writes the first channel of every pixel in row-major order, 17
/// significant digits per line.
pub fn save_signal_csv(signal: &ImageGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    write_signal(signal, &mut out).map_err(|e| Error::io(path, e))?;
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_signal<W: Write>(signal: &ImageGrid, mut out: W) -> std::io::Result<()> {
    let c = signal.channels();
    for v in signal.data().iter().step_by(c) {
        writeln!(out, "{v:.16e}")?;
    }
    Ok(())
}

/// Keys accepted in a run configuration file.
pub const CONFIG_KEYS: &[&str] = &[
    "task", "input", "guide", "output", "preset", "audit", "lambda", "alpha", "a", "b", "radius", "n_iters",
    "delta", "boost", "scale", "bit_depth", "gray_guide", "threads", "solver", "tol",
];

/// Flat `key = value` configuration.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub task: Option<String>,
    pub input: Option<PathBuf>,
    pub guide: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub preset: Option<String>,
    pub audit: bool,
    /// Remaining numeric and switch keys, value text as written.
    pub values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.parse()
    }

    /// Parses `key` with the type the caller expects.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("`{key} = {v}`: bad value"))),
        }
    }
}

impl FromStr for RunConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !CONFIG_KEYS.contains(&key) {
                return Err(Error::Config(format!("line {}: unknown key `{key}`", n + 1)));
            }
            if value.is_empty() {
                return Err(Error::Config(format!("line {}: `{key}` has no value", n + 1)));
            }
            match key {
                "task" => cfg.task = Some(value.into()),
                "input" => cfg.input = Some(value.into()),
                "guide" => cfg.guide = Some(value.into()),
                "output" => cfg.output = Some(value.into()),
                "preset" => cfg.preset = Some(value.into()),
                "audit" => cfg.audit = parse_bool(key, value)?,
                "gray_guide" => {
                    parse_bool(key, value)?;
                    cfg.values.insert(key.into(), value.into());
                }
                "radius" | "n_iters" | "scale" | "threads" => {
                    value
                        .parse::<usize>()
                        .map_err(|_| Error::Config(format!("line {}: `{key}` must be an integer", n + 1)))?;
                    cfg.values.insert(key.into(), value.into());
                }
                "bit_depth" => {
                    value.parse::<SampleDepth>()?;
                    cfg.values.insert(key.into(), value.into());
                }
                "solver" => {
                    cfg.values.insert(key.into(), value.into());
                }
                _ => {
                    let v: f64 = value
                        .parse()
                        .map_err(|_| Error::Config(format!("line {}: `{key}` must be a decimal", n + 1)))?;
                    if !v.is_finite() {
                        return Err(Error::Config(format!("line {}: `{key}` must be finite", n + 1)));
                    }
                    cfg.values.insert(key.into(), value.into());
                }
            }
        }
        Ok(cfg)
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("`{key}` must be true or false"))),
    }
}
