//! Deterministic 1-D test signals, `1 × 256`.
//!
//! * `step_details`: a 0.6 step at the centre (0.2 → 0.8) plus a sinusoid of
//!   amplitude 0.1 and period 16 px; the seed picks the phase.
//! * `pulses`: baseline 0.1, a small pulse of width 5 and height 0.8 and a
//!   large pulse of width 40 and height 0.3; the seed shifts both by up to
//!   ±8 px.
//! * `blurred_step`: 0.2 → 0.8 through a logistic whose 10-90 % rise spans
//!   6 px; the seed shifts the edge by up to ±8 px.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::pipeline::{resolve, Preset, PresetOverrides};
use crate::SmoothingParams;

pub const FIXTURE_LEN: usize = 256;
pub const STEP_LOW: f64 = 0.2;
pub const STEP_HIGH: f64 = 0.8;
pub const DETAIL_AMPLITUDE: f64 = 0.1;
pub const DETAIL_PERIOD: usize = 16;
pub const PULSE_BASE: f64 = 0.1;
pub const SMALL_PULSE: (usize, f64) = (5, 0.8);
pub const LARGE_PULSE: (usize, f64) = (40, 0.3);
pub const BLUR_WIDTH: f64 = 6.0;

/// Smoothing radius used on every fixture. A 1-D pixel has two neighbors per
/// ring instead of eight, hence the larger `λ` values below.
pub const FIXTURE_RADIUS: usize = 1;
pub const STEP_DETAILS_LAMBDA: f64 = 20.0;
pub const PULSES_LAMBDA: f64 = 16.0;
pub const BLURRED_STEP_LAMBDA: f64 = 5.0;
pub const BLURRED_STEP_B: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FixtureKind {
    StepDetails,
    Pulses,
    BlurredStep,
}

impl FixtureKind {
    pub const ALL: [FixtureKind; 3] = [FixtureKind::StepDetails, FixtureKind::Pulses, FixtureKind::BlurredStep];

    /// The group each fixture demonstrates.
    pub fn preset(&self) -> Preset {
        match self {
            FixtureKind::StepDetails => Preset::Group1Detail,
            FixtureKind::Pulses => Preset::Group4Texture,
            FixtureKind::BlurredStep => Preset::Group2Sharpen,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FixtureKind::StepDetails => "step_details",
            FixtureKind::Pulses => "pulses",
            FixtureKind::BlurredStep => "blurred_step",
        }
    }
}

impl fmt::Display for FixtureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FixtureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().replace('-', "_");
        FixtureKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == key)
            .ok_or_else(|| Error::Contract(format!("unknown fixture `{s}` (step_details, pulses, blurred_step)")))
    }
}

/// Where the interesting structures of a generated fixture sit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixtureLayout {
    /// First sample of the upper plateau (steps).
    pub edge: usize,
    /// Half-open sample ranges of the two pulses.
    pub small: (usize, usize),
    pub large: (usize, usize),
    pub phase: f64,
}

pub fn layout(kind: FixtureKind, seed: u64) -> FixtureLayout {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shift = rng.gen_range(-8i64..=8);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let at = |x: i64| (x + shift) as usize;
    match kind {
        FixtureKind::StepDetails => FixtureLayout {
            edge: FIXTURE_LEN / 2,
            small: (0, 0),
            large: (0, 0),
            phase,
        },
        FixtureKind::Pulses => FixtureLayout {
            edge: 0,
            small: (at(64), at(64) + SMALL_PULSE.0),
            large: (at(160), at(160) + LARGE_PULSE.0),
            phase: 0.0,
        },
        FixtureKind::BlurredStep => FixtureLayout {
            edge: at(128),
            small: (0, 0),
            large: (0, 0),
            phase: 0.0,
        },
    }
}

pub fn gen_1d_fixture(kind: FixtureKind, seed: u64) -> ImageGrid {
    ImageGrid::from_signal(&fixture_values(kind, seed)).expect("fixture length is positive")
}

fn fixture_values(kind: FixtureKind, seed: u64) -> Vec<f64> {
    let l = layout(kind, seed);
    (0..FIXTURE_LEN)
        .map(|x| match kind {
            FixtureKind::StepDetails => {
                let base = if x < l.edge { STEP_LOW } else { STEP_HIGH };
                let t = std::f64::consts::TAU * x as f64 / DETAIL_PERIOD as f64;
                base + DETAIL_AMPLITUDE * (t + l.phase).sin()
            }
            FixtureKind::Pulses => {
                let mut v = PULSE_BASE;
                if (l.small.0..l.small.1).contains(&x) {
                    v += SMALL_PULSE.1;
                }
                if (l.large.0..l.large.1).contains(&x) {
                    v += LARGE_PULSE.1;
                }
                v
            }
            FixtureKind::BlurredStep => {
                // 10-90 % rise of a logistic is 2 ln 9 times its scale
                let s = BLUR_WIDTH / (2.0 * 9f64.ln());
                let t = (x as f64 - (l.edge as f64 - 0.5)) / s;
                STEP_LOW + (STEP_HIGH - STEP_LOW) / (1.0 + (-t).exp())
            }
        })
        .collect()
}

pub fn fixture_params(kind: FixtureKind) -> SmoothingParams {
    let (lambda, b) = match kind {
        FixtureKind::StepDetails => (STEP_DETAILS_LAMBDA, None),
        FixtureKind::Pulses => (PULSES_LAMBDA, None),
        FixtureKind::BlurredStep => (BLURRED_STEP_LAMBDA, Some(BLURRED_STEP_B)),
    };
    let o = PresetOverrides {
        lambda: Some(lambda),
        radius: Some(FIXTURE_RADIUS),
        b,
        ..Default::default()
    };
    resolve(kind.preset(), &o).expect("fixture settings are inside the regimes")
}

/// Largest excursion of the small pulse from the baseline, and the mean
/// height of the large pulse above it.
pub fn pulse_scores(u: &[f64], l: &FixtureLayout) -> (f64, f64) {
    let small = u[l.small.0..l.small.1]
        .iter()
        .map(|v| (v - PULSE_BASE).abs())
        .fold(0.0, f64::max);
    let large = u[l.large.0..l.large.1].iter().map(|v| v - PULSE_BASE).sum::<f64>()
        / (l.large.1 - l.large.0) as f64;
    (small, large)
}

/// How far `u` leaves the range of `f` over the window of `radius` around each
/// sample; zero or negative means no overshoot.
pub fn overshoot(f: &[f64], u: &[f64], radius: usize) -> f64 {
    (0..u.len())
        .map(|i| {
            let w = &f[i.saturating_sub(radius)..(i + radius + 1).min(f.len())];
            let lo = w.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (lo - u[i]).max(u[i] - hi)
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Whether the one-period moving average of a step-plus-details signal never
/// decreases, i.e. the step survives without the oscillations.
pub fn step_is_monotone(u: &[f64], tol: f64) -> bool {
    let avg: Vec<f64> = u
        .windows(DETAIL_PERIOD)
        .map(|w| w.iter().sum::<f64>() / DETAIL_PERIOD as f64)
        .collect();
    avg.windows(2).all(|w| w[1] >= w[0] - tol)
}

/// Peak-to-peak amplitude over `range`.
pub fn peak_to_peak(u: &[f64], range: std::ops::Range<usize>) -> f64 {
    let w = &u[range];
    w.iter().copied().fold(f64::NEG_INFINITY, f64::max) - w.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Samples strictly between the 10 % and 90 % levels of the rise from `low`
/// to `high`.
pub fn transition_width(signal: &[f64], low: f64, high: f64) -> usize {
    let (lo, hi) = (low + 0.1 * (high - low), low + 0.9 * (high - low));
    let (lo, hi) = (lo.min(hi), lo.max(hi));
    signal.iter().filter(|&&v| v > lo && v < hi).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_are_deterministic() {
        for k in FixtureKind::ALL {
            assert_eq!(gen_1d_fixture(k, 7), gen_1d_fixture(k, 7));
            assert_eq!(gen_1d_fixture(k, 7).width(), FIXTURE_LEN);
            assert_eq!(k.name().parse::<FixtureKind>().unwrap(), k);
        }
        assert!("sawtooth".parse::<FixtureKind>().is_err());
    }

    #[test]
    fn step_details_by_construction() {
        let d = fixture_values(FixtureKind::StepDetails, 3);
        // one period averages out the sinusoid
        let mean = |r: std::ops::Range<usize>| d[r.clone()].iter().sum::<f64>() / r.len() as f64;
        assert!((mean(32..48) - STEP_LOW).abs() < 1e-12);
        assert!((mean(200..216) - STEP_HIGH).abs() < 1e-12);
        let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(lo >= STEP_LOW - DETAIL_AMPLITUDE - 1e-12 && hi <= STEP_HIGH + DETAIL_AMPLITUDE + 1e-12);
    }

    #[test]
    fn pulses_by_construction() {
        let l = layout(FixtureKind::Pulses, 11);
        let d = fixture_values(FixtureKind::Pulses, 11);
        assert_eq!(l.small.1 - l.small.0, 5);
        assert_eq!(l.large.1 - l.large.0, 40);
        assert!(d[l.small.0..l.small.1].iter().all(|&v| (v - 0.9).abs() < 1e-12));
        assert!(d[l.large.0..l.large.1].iter().all(|&v| (v - 0.4).abs() < 1e-12));
        assert_eq!(d.iter().filter(|&&v| v == PULSE_BASE).count(), 256 - 45);
    }

    #[test]
    fn input_scores() {
        let l = layout(FixtureKind::Pulses, 2);
        let f = fixture_values(FixtureKind::Pulses, 2);
        let (small, large) = pulse_scores(&f, &l);
        assert!((small - 0.8).abs() < 1e-12 && (large - 0.3).abs() < 1e-12);
        let f = fixture_values(FixtureKind::StepDetails, 2);
        assert!(overshoot(&f, &f, 3) <= 0.0);
        assert!(step_is_monotone(&f, 1e-12));
        let mut bumped = f.clone();
        bumped[40] += 1.0;
        assert!((overshoot(&f, &bumped, 3) - 1.0).abs() < 0.2);
        for k in FixtureKind::ALL {
            assert_eq!(fixture_params(k).r_s, FIXTURE_RADIUS);
        }
    }

    #[test]
    fn blurred_step_spans_six_samples() {
        for seed in 0..5 {
            let s = fixture_values(FixtureKind::BlurredStep, seed);
            assert_eq!(transition_width(&s, STEP_LOW, STEP_HIGH), 6);
        }
    }
}
