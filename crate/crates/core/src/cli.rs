//! The `thsmooth` command line.
//!
//! Exit codes: 0 on success, 1 for usage errors (bad flags, bad parameters,
//! unreadable configuration), 2 for runtime failures (unreadable or malformed
//! images, solver stagnation, descent violations under `--audit`).

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::guidance::WeightField;
use crate::io::{self, FileFormat, RunConfig, SampleDepth};
use crate::pipeline::{resolve, smooth_with, Preset, PresetOverrides, SmoothOptions, SmoothOutput};
use crate::solver::{assemble_from_iterate, write_system, SolveMethod, SolveOptions};
use crate::tasks::depth::{self, DepthSample};
use crate::tasks::fixtures::{self, FixtureKind};
use crate::tasks::DEFAULT_BOOST;
use crate::SmoothingParams;

/// Environment variable holding the default thread count.
pub const THREADS_ENV: &str = "THSMOOTH_THREADS";

#[derive(Debug, Parser)]
#[command(name = "thsmooth", version, about = "Truncated-Huber image smoothing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Smooth an image (or a one-column CSV signal) with a preset.
    Smooth(SmoothCmd),
    /// Base/detail decomposition with an amplified detail layer.
    Enhance(EnhanceCmd),
    /// Remove compression artifacts from clip-art while sharpening edges.
    Clipart(ClipartCmd),
    /// Guided upsampling of a low-resolution depth map.
    UpsampleDepth(DepthCmd),
    /// Structure-preserving texture removal.
    Texture(TextureCmd),
    /// Generate a 1-D fixture, smooth it and print its behaviour scores.
    #[command(name = "demo-1d")]
    Demo1d(DemoCmd),
    /// MAE of guided upsampling against bicubic over a manifest or the
    /// synthetic benchmark.
    EvalMae(EvalCmd),
    /// Wall time of smoothing a synthetic image per (size, r, N).
    Bench(BenchCmd),
    /// Run the task named in a configuration file.
    Run(RunCmd),
}

/// Flags shared by every smoothing subcommand. Each maps to the configuration
/// key of the same name, with dashes as underscores.
#[derive(Debug, Args, Default, Clone)]
struct Common {
    /// Input image (png, pgm, ppm, pfm) or signal (csv).
    #[arg(long = "in", short = 'i', value_name = "PATH")]
    input: Option<PathBuf>,
    /// Output path; the format follows the extension.
    #[arg(long = "out", short = 'o', value_name = "PATH")]
    output: Option<PathBuf>,
    /// Sample depth of integer outputs: 8 or 16 (default: the input's).
    #[arg(long)]
    bit_depth: Option<SampleDepth>,
    /// Write per-iteration energies to `<out stem>.audit.csv` and fail on
    /// any energy increase.
    #[arg(long)]
    audit: bool,
    /// Worker threads (default: $THSMOOTH_THREADS, else all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Linear solver: direct or pcg.
    #[arg(long)]
    solver: Option<String>,
    /// Relative residual target of each solve.
    #[arg(long)]
    tol: Option<f64>,
    /// Write the first linear system (channel 0) to this file.
    #[arg(long, value_name = "PATH")]
    dump_system: Option<PathBuf>,
    /// Read defaults from a `key = value` file; flags win.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SmoothCmd {
    #[command(flatten)]
    common: Common,
    #[arg(long, short = 'p')]
    preset: Option<String>,
    /// Guidance image (default: the input).
    #[arg(long, value_name = "PATH")]
    guide: Option<PathBuf>,
    /// Use the Rec. 601 luma of the guide.
    #[arg(long)]
    gray_guide: bool,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    a: Option<f64>,
    #[arg(long)]
    b: Option<f64>,
    #[arg(long, visible_alias = "r")]
    radius: Option<usize>,
    #[arg(long, visible_alias = "n")]
    n_iters: Option<usize>,
    #[arg(long)]
    delta: Option<f64>,
}

#[derive(Debug, Args)]
struct EnhanceCmd {
    #[command(flatten)]
    common: Common,
    /// Smoothing strength of the base layer (default 20).
    #[arg(long)]
    lambda: Option<f64>,
    /// Detail amplification (default 3).
    #[arg(long)]
    boost: Option<f64>,
}

#[derive(Debug, Args)]
struct ClipartCmd {
    #[command(flatten)]
    common: Common,
    /// Truncation threshold in [0.05, 0.2] (default 0.1).
    #[arg(long)]
    b: Option<f64>,
    /// Window radius 1-5 (default 1).
    #[arg(long, visible_alias = "r")]
    radius: Option<usize>,
    /// Default 5.
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Debug, Args)]
struct DepthCmd {
    #[command(flatten)]
    common: Common,
    /// High-resolution guidance image.
    #[arg(long, value_name = "PATH")]
    guide: Option<PathBuf>,
    #[arg(long)]
    gray_guide: bool,
    /// Ground truth; prints MAE of the result and of bicubic.
    #[arg(long, value_name = "PATH")]
    ground_truth: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    b: Option<f64>,
    #[arg(long, visible_alias = "r")]
    radius: Option<usize>,
}

#[derive(Debug, Args)]
struct TextureCmd {
    #[command(flatten)]
    common: Common,
    /// Default 0.5.
    #[arg(long)]
    lambda: Option<f64>,
    /// Window radius 1-3 (default 1).
    #[arg(long, visible_alias = "r")]
    radius: Option<usize>,
}

#[derive(Debug, Args)]
struct DemoCmd {
    /// step_details, pulses or blurred_step.
    #[arg(long)]
    kind: FixtureKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Smoothed signal as CSV.
    #[arg(long = "out", short = 'o', value_name = "PATH")]
    output: Option<PathBuf>,
    /// The generated fixture as CSV.
    #[arg(long, value_name = "PATH")]
    input_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalCmd {
    /// Lines of `low_res guide ground_truth scale`, paths relative to the
    /// manifest.
    #[arg(long, value_name = "PATH", conflicts_with = "synthetic")]
    manifest: Option<PathBuf>,
    /// Score this many seeded synthetic instances instead.
    #[arg(long)]
    synthetic: Option<u64>,
    /// CSV destination (default: stdout).
    #[arg(long = "out", short = 'o', value_name = "PATH")]
    output: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    b: Option<f64>,
    #[arg(long, visible_alias = "r")]
    radius: Option<usize>,
    #[arg(long)]
    gray_guide: bool,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Args)]
struct BenchCmd {
    /// Image size as WIDTHxHEIGHT.
    #[arg(long, default_value = "800x600", value_parser = parse_size)]
    size: (usize, usize),
    /// Window radii, comma separated.
    #[arg(long, visible_alias = "r", value_delimiter = ',', default_value = "1")]
    radius: Vec<usize>,
    /// Outer iterations.
    #[arg(long, visible_alias = "n", default_value_t = 10)]
    n_iters: usize,
    #[arg(long, default_value_t = 3)]
    channels: usize,
    /// Default 1 so the numbers are single-core.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long)]
    solver: Option<String>,
}

#[derive(Debug, Args)]
struct RunCmd {
    /// Configuration file with a `task` key.
    config: PathBuf,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("`{s}`: expected WIDTHxHEIGHT"))?;
    let parse = |t: &str| t.trim().parse::<usize>().ok().filter(|&v| v > 0);
    match (parse(w), parse(h)) {
        (Some(w), Some(h)) => Ok((w, h)),
        _ => Err(format!("`{s}`: expected WIDTHxHEIGHT")),
    }
}

/// Presets and their resolved defaults, for `--help`.
pub fn preset_table() -> String {
    let mut s = String::from("Presets (defaults at I_m = 1; b = 10 means untruncated):\n");
    for p in Preset::ALL {
        let t = p.template();
        let _ = writeln!(
            s,
            "  {:<15} lambda={} alpha={} a_d={} b_d={} a_s={} b_s={} r_d={} r_s={} N={}\n  {:<15} free: {}",
            p.name(),
            t.lambda,
            t.alpha,
            short(t.a_d),
            t.b_d,
            short(t.a_s),
            t.b_s,
            t.r_d,
            t.r_s,
            t.n_iters,
            "",
            p.knobs()
        );
    }
    s
}

fn short(v: f64) -> String {
    if v != 0.0 && v.abs() < 1e-3 {
        format!("{v:e}")
    } else {
        v.to_string()
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let table = preset_table();
    let cmd = Cli::command()
        .after_help(table.clone())
        .mut_subcommand("smooth", |c| c.after_help(table));
    let cli = match cmd.try_get_matches_from(args).and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::UnknownPreset(_)
        | Error::PresetConstraint { .. }
        | Error::InvalidParams(_)
        | Error::Contract(_)
        | Error::Shape(_) => 1,
        _ => 2,
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Smooth(c) => cmd_smooth(c),
        Command::Enhance(c) => cmd_enhance(c),
        Command::Clipart(c) => cmd_clipart(c),
        Command::UpsampleDepth(c) => cmd_depth(c),
        Command::Texture(c) => cmd_texture(c),
        Command::Demo1d(c) => cmd_demo(c),
        Command::EvalMae(c) => cmd_eval(c),
        Command::Bench(c) => cmd_bench(c),
        Command::Run(c) => cmd_run(c),
    }
}

/// Flag values merged over an optional configuration file.
struct Settings {
    cfg: RunConfig,
}

impl Settings {
    fn load(path: Option<&Path>, task: &str) -> Result<Self> {
        let cfg = match path {
            Some(p) => RunConfig::load(p).map_err(|e| match e {
                Error::Io { path, source } => Error::Config(format!("{}: {source}", path.display())),
                other => other,
            })?,
            None => RunConfig::default(),
        };
        if let Some(t) = &cfg.task {
            if t != task {
                return Err(Error::Config(format!("configuration is for task `{t}`, not `{task}`")));
            }
        }
        Ok(Settings { cfg })
    }

    fn pick<T: std::str::FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>> {
        match flag {
            Some(v) => Ok(Some(v)),
            None => self.cfg.get(key),
        }
    }

    fn switch(&self, flag: bool, key: &str) -> Result<bool> {
        Ok(flag || self.cfg.get::<String>(key)?.is_some_and(|v| matches!(v.as_str(), "true" | "1" | "yes" | "on")))
    }

    fn input(&self, flag: Option<PathBuf>) -> Result<PathBuf> {
        flag.or_else(|| self.cfg.input.clone())
            .ok_or_else(|| Error::Config("missing --in".into()))
    }

    fn output(&self, flag: Option<PathBuf>) -> Result<PathBuf> {
        flag.or_else(|| self.cfg.output.clone())
            .ok_or_else(|| Error::Config("missing --out".into()))
    }
}

/// Everything a smoothing run needs besides the parameters.
struct Job {
    input: PathBuf,
    output: PathBuf,
    bit_depth: Option<SampleDepth>,
    audit: bool,
    threads: Option<usize>,
    opts: SmoothOptions,
    dump: Option<PathBuf>,
}

impl Job {
    fn new(c: Common, s: &Settings) -> Result<Self> {
        let method = match s.pick(c.solver, "solver")?.as_deref() {
            None | Some("direct") => SolveMethod::Direct,
            Some("pcg") => SolveMethod::Pcg,
            Some(other) => return Err(Error::Config(format!("solver `{other}` (direct or pcg)"))),
        };
        let mut solve = SolveOptions {
            method,
            ..Default::default()
        };
        if let Some(tol) = s.pick(c.tol, "tol")? {
            if !(tol > 0.0 && tol < 1.0) {
                return Err(Error::Config(format!("tol must be in (0, 1) (got {tol})")));
            }
            solve.tol = tol;
        }
        let audit = c.audit || s.cfg.audit;
        Ok(Job {
            input: s.input(c.input)?,
            output: s.output(c.output)?,
            bit_depth: s.pick(c.bit_depth, "bit_depth")?,
            audit,
            threads: s.pick(c.threads, "threads")?,
            opts: SmoothOptions { audit, solve },
            dump: c.dump_system,
        })
    }
}

/// An input file: an image or a CSV signal.
struct Loaded {
    image: ImageGrid,
    depth: SampleDepth,
    signal: bool,
}

fn is_csv(path: &Path) -> bool {
    path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

fn load_input(path: &Path) -> Result<Loaded> {
    if is_csv(path) {
        return Ok(Loaded {
            image: io::load_signal_csv(path)?,
            depth: SampleDepth::F32,
            signal: true,
        });
    }
    let l = io::load_image(path)?;
    Ok(Loaded {
        image: l.image,
        depth: l.depth,
        signal: false,
    })
}

fn save_output(img: &ImageGrid, path: &Path, source: SampleDepth, requested: Option<SampleDepth>) -> Result<()> {
    if is_csv(path) {
        return io::save_signal_csv(img, path);
    }
    let depth = match FileFormat::from_path(path)? {
        FileFormat::Pfm => SampleDepth::F32,
        _ => match requested.unwrap_or(source) {
            SampleDepth::F32 => SampleDepth::U16,
            d => d,
        },
    };
    if requested == Some(SampleDepth::F32) && depth != SampleDepth::F32 {
        return Err(Error::Config("32-bit float output needs a .pfm path".into()));
    }
    io::save_image(img, path, depth)
}

/// Scales to `I_m = 1` for smoothing.
fn to_unit(img: &ImageGrid) -> Result<ImageGrid> {
    let m = img.intensity_max();
    if m == 1.0 {
        return Ok(img.clone());
    }
    ImageGrid::new(img.height(), img.width(), img.channels(), img.data().iter().map(|v| v / m).collect())
}

fn from_unit(img: &ImageGrid, m: f64) -> Result<ImageGrid> {
    if m == 1.0 {
        return Ok(img.clone());
    }
    ImageGrid::with_intensity_max(
        img.height(),
        img.width(),
        img.channels(),
        img.data().iter().map(|v| v * m).collect(),
        m,
    )
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) if !v.trim().is_empty() => Some(
                v.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("{THREADS_ENV}=`{v}` is not a thread count")))?,
            ),
            _ => None,
        },
    };
    if n == Some(0) {
        return Err(Error::Config("thread count must be at least 1".into()));
    }
    Ok(n)
}

/// Runs `f` on a pool capped at the requested thread count.
fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match thread_count(threads)? {
        None => f(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Contract(format!("thread pool: {e}")))?
            .install(f),
    }
}

fn audit_path(output: &Path) -> PathBuf {
    let stem = output.file_stem().and_then(|s| s.to_str()).unwrap_or("output");
    output.with_file_name(format!("{stem}.audit.csv"))
}

fn write_audit(output: &Path, out: &SmoothOutput) -> Result<()> {
    let path = audit_path(output);
    let mut buf = Vec::new();
    crate::energy::write_reports_csv(&mut buf, &out.reports).map_err(|e| Error::io(&path, e))?;
    fs::write(&path, buf).map_err(|e| Error::io(&path, e))
}

fn dump_system(path: &Path, f: &ImageGrid, g: &ImageGrid, params: &SmoothingParams) -> Result<()> {
    let weights = WeightField::build(g, f.extent(), params)?;
    let plane = f.plane(0);
    let (sys, _) = assemble_from_iterate(&plane, &plane, &weights, params)?;
    let mut buf = Vec::new();
    write_system(&sys, &mut buf).map_err(|e| Error::io(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn warn_unconverged(out: &SmoothOutput) {
    if !out.all_converged() {
        let worst = out
            .solves
            .iter()
            .flatten()
            .map(|r| r.relative_residual)
            .fold(0.0, f64::max);
        eprintln!("warning: some solves stopped short of the tolerance (worst relative residual {worst:.3e})");
    }
}

/// Smooths `f` guided by `g`, writes the output and the optional audit and
/// system dump.
fn smooth_job(job: &Job, src: &Loaded, g: &ImageGrid, params: &SmoothingParams) -> Result<ImageGrid> {
    let m = src.image.intensity_max();
    let f = to_unit(&src.image)?;
    let g = to_unit(g)?;
    if let Some(path) = &job.dump {
        dump_system(path, &f, &g, params)?;
    }
    let out = with_threads(job.threads, || smooth_with(&f, &g, params, &job.opts))?;
    warn_unconverged(&out);
    if job.audit {
        write_audit(&job.output, &out)?;
    }
    from_unit(&out.image, m)
}

fn finish(job: &Job, src: &Loaded, u: &ImageGrid) -> Result<()> {
    let u = if src.signal || matches!(FileFormat::from_path(&job.output), Ok(FileFormat::Pfm)) {
        u.clone()
    } else {
        u.clamped()
    };
    save_output(&u, &job.output, src.depth, job.bit_depth)
}

fn load_guide(path: Option<&Path>, f: &Loaded, gray: bool) -> Result<ImageGrid> {
    let g = match path {
        Some(p) => load_input(p)?.image,
        None => f.image.clone(),
    };
    if g.extent() != f.image.extent() {
        return Err(Error::Shape(format!("guide is {}, input is {}", g.extent(), f.image.extent())));
    }
    Ok(if gray { g.to_luma() } else { g })
}

fn cmd_smooth(c: SmoothCmd) -> Result<()> {
    let s = Settings::load(c.common.config.as_deref(), "smooth")?;
    let name = c
        .preset
        .or_else(|| s.cfg.preset.clone())
        .ok_or_else(|| Error::Config("missing --preset".into()))?;
    let preset: Preset = name.parse()?;
    let overrides = PresetOverrides {
        lambda: s.pick(c.lambda, "lambda")?,
        radius: s.pick(c.radius, "radius")?,
        b: s.pick(c.b, "b")?,
        n_iters: s.pick(c.n_iters, "n_iters")?,
        alpha: s.pick(c.alpha, "alpha")?,
        a: s.pick(c.a, "a")?,
        delta: s.pick(c.delta, "delta")?,
    };
    let params = resolve(preset, &overrides)?;
    let guide = c.guide.or_else(|| s.cfg.guide.clone());
    if guide.is_some() && preset.self_guided() {
        return Err(Error::PresetConstraint {
            preset: preset.name().into(),
            reason: "the guide is the input itself".into(),
        });
    }
    let gray = s.switch(c.gray_guide, "gray_guide")?;
    let job = Job::new(c.common, &s)?;
    let src = load_input(&job.input)?;
    let g = load_guide(guide.as_deref(), &src, gray)?;
    let u = smooth_job(&job, &src, &g, &params)?;
    finish(&job, &src, &u)
}

fn cmd_enhance(c: EnhanceCmd) -> Result<()> {
    let s = Settings::load(c.common.config.as_deref(), "enhance")?;
    let lambda = s.pick(c.lambda, "lambda")?;
    let boost = s.pick(c.boost, "boost")?.unwrap_or(DEFAULT_BOOST);
    if !(boost >= 0.0 && boost.is_finite()) {
        return Err(Error::Config(format!("boost must be >= 0 (got {boost})")));
    }
    let params = resolve(
        Preset::Group1Detail,
        &PresetOverrides {
            lambda,
            ..Default::default()
        },
    )?;
    let job = Job::new(c.common, &s)?;
    let src = load_input(&job.input)?;
    let base = smooth_job(&job, &src, &src.image, &params)?;
    let data = src
        .image
        .data()
        .iter()
        .zip(base.data())
        .map(|(&f, &u)| u + boost * (f - u))
        .collect();
    let out = ImageGrid::with_intensity_max(
        base.height(),
        base.width(),
        base.channels(),
        data,
        src.image.intensity_max(),
    )?
    .clamped();
    save_output(&out, &job.output, src.depth, job.bit_depth)
}

fn cmd_clipart(c: ClipartCmd) -> Result<()> {
    let s = Settings::load(c.common.config.as_deref(), "clipart")?;
    let params = resolve(
        Preset::Group2Sharpen,
        &PresetOverrides {
            lambda: s.pick(c.lambda, "lambda")?,
            radius: s.pick(c.radius, "radius")?,
            b: s.pick(c.b, "b")?,
            ..Default::default()
        },
    )?;
    let job = Job::new(c.common, &s)?;
    let src = load_input(&job.input)?;
    let u = smooth_job(&job, &src, &src.image, &params)?;
    save_output(&u.clamped(), &job.output, src.depth, job.bit_depth)
}

fn cmd_texture(c: TextureCmd) -> Result<()> {
    let s = Settings::load(c.common.config.as_deref(), "texture")?;
    let params = resolve(
        Preset::Group4Texture,
        &PresetOverrides {
            lambda: s.pick(c.lambda, "lambda")?,
            radius: s.pick(c.radius, "radius")?,
            ..Default::default()
        },
    )?;
    let job = Job::new(c.common, &s)?;
    let src = load_input(&job.input)?;
    let u = smooth_job(&job, &src, &src.image, &params)?;
    finish(&job, &src, &u)
}

fn depth_overrides(lambda: Option<f64>, b: Option<f64>, radius: Option<usize>) -> Result<SmoothingParams> {
    resolve(
        Preset::Group3Guided,
        &PresetOverrides {
            lambda,
            b,
            radius,
            ..Default::default()
        },
    )
}

fn cmd_depth(c: DepthCmd) -> Result<()> {
    let s = Settings::load(c.common.config.as_deref(), "upsample-depth")?;
    let params = depth_overrides(s.pick(c.lambda, "lambda")?, s.pick(c.b, "b")?, s.pick(c.radius, "radius")?)?;
    let gray = s.switch(c.gray_guide, "gray_guide")?;
    let guide_path = c
        .guide
        .or_else(|| s.cfg.guide.clone())
        .ok_or_else(|| Error::Config("missing --guide".into()))?;
    let job = Job::new(c.common, &s)?;
    let low = load_input(&job.input)?;
    if low.image.channels() != 1 {
        return Err(Error::Shape("depth map must have one channel".into()));
    }
    let guide = load_input(&guide_path)?.image;
    let guide = if gray { guide.to_luma() } else { guide };
    let scale = guide.width() / low.image.width();
    let gt = c.ground_truth.as_deref().map(load_input).transpose()?;
    let sample = DepthSample::new(low.image.clone(), guide, gt.as_ref().map(|g| g.image.clone()), scale)?;
    if let Some(path) = &job.dump {
        let init = depth::bicubic_upsample(&to_unit(&sample.low_res)?, sample.guide.height(), sample.guide.width())?;
        dump_system(path, &init, &to_unit(&sample.guide)?, &params)?;
    }
    let u = with_threads(job.threads, || depth::upsample_depth(&sample, &params, &job.opts))?;
    if let Some(gt) = &gt {
        let base = depth::bicubic_upsample(&sample.low_res, gt.image.height(), gt.image.width())?;
        let units = Units::of(gt.depth);
        println!(
            "mae {:.6} bicubic {:.6} ({})",
            units.scale(depth::mae(&u, &gt.image)?.value, &gt.image),
            units.scale(depth::mae(&base, &gt.image)?.value, &gt.image),
            units.label()
        );
    }
    let u = if matches!(FileFormat::from_path(&job.output), Ok(FileFormat::Pfm)) {
        u
    } else {
        u.clamped()
    };
    save_output(&u, &job.output, low.depth, job.bit_depth)
}

/// Units MAE is reported in: integer levels of the ground truth's depth, or
/// the float values of a PFM as stored.
#[derive(Clone, Copy)]
enum Units {
    Levels(f64),
    Stored,
}

impl Units {
    fn of(depth: SampleDepth) -> Self {
        match depth {
            SampleDepth::U8 => Units::Levels(255.0),
            SampleDepth::U16 => Units::Levels(65535.0),
            SampleDepth::F32 => Units::Stored,
        }
    }

    fn scale(self, v: f64, gt: &ImageGrid) -> f64 {
        match self {
            Units::Levels(l) => v / gt.intensity_max() * l,
            Units::Stored => v,
        }
    }

    fn label(self) -> &'static str {
        match self {
            Units::Levels(l) if l == 255.0 => "8-bit levels",
            Units::Levels(_) => "16-bit levels",
            Units::Stored => "stored units",
        }
    }
}

fn cmd_eval(c: EvalCmd) -> Result<()> {
    let params = depth_overrides(c.lambda, c.b, c.radius)?;
    let opts = SmoothOptions::default();
    let mut csv = String::new();
    match (&c.manifest, c.synthetic) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let base = path.parent().unwrap_or(Path::new("."));
            let entries = depth::parse_manifest(&text, base)?;
            let _ = writeln!(csv, "{},units", depth::MAE_CSV_HEADER);
            with_threads(c.threads, || {
                for e in &entries {
                    let low = io::load_image(&e.low_res)?.image;
                    let guide = io::load_image(&e.guide)?.image;
                    let guide = if c.gray_guide { guide.to_luma() } else { guide };
                    let gt = io::load_image(&e.ground_truth)?;
                    let sample = DepthSample::new(low, guide, Some(gt.image.clone()), e.scale)?;
                    let u = depth::upsample_depth(&sample, &params, &opts)?;
                    let b = depth::bicubic_upsample(&sample.low_res, gt.image.height(), gt.image.width())?;
                    let units = Units::of(gt.depth);
                    let _ = writeln!(
                        csv,
                        "{},{}",
                        depth::mae_csv_row(
                            &e.low_res.display().to_string(),
                            e.scale,
                            units.scale(depth::mae(&u, &gt.image)?.value, &gt.image),
                            units.scale(depth::mae(&b, &gt.image)?.value, &gt.image),
                        ),
                        units.label()
                    );
                }
                Ok(())
            })?;
        }
        (None, Some(n)) => {
            let _ = writeln!(csv, "{},texture_copy", depth::MAE_CSV_HEADER);
            with_threads(c.threads, || {
                for seed in 0..n {
                    let inst = depth::synthetic_depth(seed);
                    let score = depth::score_synthetic(&inst, &params, &opts)?;
                    let _ = writeln!(
                        csv,
                        "{},{:.17e}",
                        depth::mae_csv_row(&format!("synthetic-{seed}"), inst.sample.scale, score.mae, score.baseline_mae),
                        score.texture_copy
                    );
                }
                Ok(())
            })?;
        }
        (None, None) => return Err(Error::Config("pass --manifest or --synthetic".into())),
    }
    emit(c.output.as_deref(), &csv)
}

fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
        }
    }
}

fn cmd_demo(c: DemoCmd) -> Result<()> {
    let f = fixtures::gen_1d_fixture(c.kind, c.seed);
    let params = fixtures::fixture_params(c.kind);
    let u = smooth_with(&f, &f, &params, &SmoothOptions::default())?.image;
    if let Some(p) = &c.input_out {
        io::save_signal_csv(&f, p)?;
    }
    if let Some(p) = &c.output {
        io::save_signal_csv(&u, p)?;
    }
    let (fd, ud) = (f.data(), u.data());
    let n = fd.len();
    let line = match c.kind {
        FixtureKind::Pulses => {
            let (small, large) = fixtures::pulse_scores(ud, &fixtures::layout(c.kind, c.seed));
            format!("small_pulse_residual {small:.6} large_pulse_retained {large:.6}")
        }
        FixtureKind::StepDetails => {
            let half = n / 2;
            format!(
                "overshoot {:.6} monotone {} oscillation {:.6} -> {:.6}",
                fixtures::overshoot(fd, ud, 3).max(0.0),
                fixtures::step_is_monotone(ud, 1e-9),
                fixtures::peak_to_peak(fd, 16..half - 16),
                fixtures::peak_to_peak(ud, 16..half - 16)
            )
        }
        FixtureKind::BlurredStep => format!(
            "transition_width {} -> {}",
            fixtures::transition_width(fd, fixtures::STEP_LOW, fixtures::STEP_HIGH),
            fixtures::transition_width(ud, fixtures::STEP_LOW, fixtures::STEP_HIGH)
        ),
    };
    println!("{} seed {} ({}, lambda {}): {line}", c.kind, c.seed, c.kind.preset(), params.lambda);
    Ok(())
}

/// Deterministic test card for `bench`: a checkerboard of flat tiles with a
/// horizontal ripple and uniform noise.
pub fn bench_image(width: usize, height: usize, channels: usize, seed: u64) -> Result<ImageGrid> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d = Vec::with_capacity(width * height * channels);
    for y in 0..height {
        for x in 0..width {
            let base = if (x / 100 + y / 100) % 2 == 0 { 0.3 } else { 0.7 };
            for _ in 0..channels {
                d.push(base + 0.1 * (x as f64 * 0.7).sin() + rng.gen_range(-0.05..0.05));
            }
        }
    }
    ImageGrid::new(height, width, channels, d)
}

/// Parameters timed by `bench`: the group 2 regime at window radius `r`.
pub fn bench_params(r: usize, n_iters: usize) -> SmoothingParams {
    SmoothingParams {
        r_d: r,
        r_s: r,
        n_iters,
        ..Preset::Group2Sharpen.template()
    }
}

fn cmd_bench(c: BenchCmd) -> Result<()> {
    let (w, h) = c.size;
    let method = match c.solver.as_deref() {
        None | Some("direct") => SolveMethod::Direct,
        Some("pcg") => SolveMethod::Pcg,
        Some(other) => return Err(Error::Config(format!("solver `{other}` (direct or pcg)"))),
    };
    let opts = SmoothOptions {
        audit: false,
        solve: SolveOptions {
            method,
            ..Default::default()
        },
    };
    let f = bench_image(w, h, c.channels, 0)?;
    println!("size,channels,r,n,seconds");
    for &r in &c.radius {
        let params = bench_params(r, c.n_iters);
        params.validate()?;
        let secs = with_threads(Some(c.threads), || {
            let t = Instant::now();
            let out = smooth_with(&f, &f, &params, &opts)?;
            warn_unconverged(&out);
            Ok(t.elapsed().as_secs_f64())
        })?;
        println!("{w}x{h},{},{r},{},{secs:.3}", c.channels, c.n_iters);
    }
    Ok(())
}

fn cmd_run(c: RunCmd) -> Result<()> {
    let cfg = RunConfig::load(&c.config).map_err(|e| match e {
        Error::Io { path, source } => Error::Config(format!("{}: {source}", path.display())),
        other => other,
    })?;
    let task = cfg
        .task
        .clone()
        .ok_or_else(|| Error::Config("configuration has no `task`".into()))?;
    let common = Common {
        config: Some(c.config.clone()),
        ..Default::default()
    };
    match task.as_str() {
        "smooth" => cmd_smooth(SmoothCmd {
            common,
            preset: None,
            guide: None,
            gray_guide: false,
            lambda: None,
            alpha: None,
            a: None,
            b: None,
            radius: None,
            n_iters: None,
            delta: None,
        }),
        "enhance" => cmd_enhance(EnhanceCmd {
            common,
            lambda: None,
            boost: None,
        }),
        "clipart" => cmd_clipart(ClipartCmd {
            common,
            b: None,
            radius: None,
            lambda: None,
        }),
        "texture" => cmd_texture(TextureCmd {
            common,
            lambda: None,
            radius: None,
        }),
        "upsample-depth" => cmd_depth(DepthCmd {
            common,
            guide: None,
            gray_guide: false,
            ground_truth: None,
            lambda: None,
            b: None,
            radius: None,
        }),
        other => Err(Error::Config(format!(
            "task `{other}` (smooth, enhance, clipart, texture, upsample-depth)"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_parse() {
        assert_eq!(parse_size("800x600"), Ok((800, 600)));
        assert!(parse_size("800").is_err());
        assert!(parse_size("0x5").is_err());
    }

    #[test]
    fn help_lists_every_preset() {
        let t = preset_table();
        for p in Preset::ALL {
            assert!(t.contains(p.name()));
        }
        assert!(t.contains("lambda=20"));
    }

    #[test]
    fn usage_errors_exit_with_one() {
        assert_eq!(run(["thsmooth", "frobnicate"]), 1);
        assert_eq!(run(["thsmooth", "smooth", "--preset", "nope", "--in", "a.png", "--out", "b.png"]), 1);
        assert_eq!(run(["thsmooth", "--help"]), 0);
    }

    #[test]
    fn audit_file_sits_next_to_output() {
        assert_eq!(audit_path(Path::new("out/b.png")), PathBuf::from("out/b.audit.csv"));
    }
}
