//! Per-pair auxiliary variables `l^d, l^s, μ^d, μ^s`.
//!
//! Stored densely per channel, pixel and window offset; slots whose neighbour
//! falls outside the grid are kept at `l = 0, μ = 1/(2a)` and never read.

use crate::error::{Error, Result};
use crate::grid::{Extent, ImageGrid, SmoothingParams};
use crate::penalty::{branch, HuberBranch, HuberSpec};

/// How often each branch of the update rules fired.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BranchTally {
    /// Pairs whose difference exceeded `b`, so that `l = ∇`.
    pub truncated: u64,
    /// `μ` updates on the `|∇ - l| ≥ a` branch.
    pub mu_linear: u64,
    /// `μ` updates on the `|∇ - l| < a` branch.
    pub mu_quadratic: u64,
}

impl BranchTally {
    pub fn merge(&mut self, other: BranchTally) {
        self.truncated += other.truncated;
        self.mu_linear += other.mu_linear;
        self.mu_quadratic += other.mu_quadratic;
    }

    #[inline]
    pub(crate) fn record(&mut self, l: f64, residual: f64, a: f64) {
        if l != 0.0 {
            self.truncated += 1;
        }
        match branch(residual, a) {
            HuberBranch::Quadratic => self.mu_quadratic += 1,
            HuberBranch::Linear => self.mu_linear += 1,
        }
    }
}

/// The four auxiliary fields, laid out `[channel][pixel][offset]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxFields {
    extent: Extent,
    channels: usize,
    r_d: usize,
    r_s: usize,
    kd: usize,
    pub l_d: Vec<f64>,
    pub mu_d: Vec<f64>,
    pub l_s: Vec<f64>,
    pub mu_s: Vec<f64>,
}

impl AuxFields {
    /// `l ≡ 0` and `μ ≡ 1/(2a)` everywhere.
    pub fn zeros(extent: Extent, channels: usize, params: &SmoothingParams) -> Self {
        let kd = params.data_window().len();
        let ks = params.smoothness_window().len();
        let n = extent.pixels() * channels;
        AuxFields {
            extent,
            channels,
            r_d: params.r_d,
            r_s: params.r_s,
            kd,
            l_d: vec![0.0; n * kd],
            mu_d: vec![0.5 / params.a_d; n * kd],
            l_s: vec![0.0; n * ks],
            mu_s: vec![0.5 / params.a_s; n * ks],
        }
    }

    /// Optimal `l` for the iterate `u`, then optimal `μ` for that `l`.
    pub fn from_iterate(
        u: &ImageGrid,
        f: &ImageGrid,
        params: &SmoothingParams,
    ) -> Result<(Self, BranchTally)> {
        check_pair(u, f)?;
        let mut aux = Self::zeros(u.extent(), u.channels(), params);
        let spec_d = HuberSpec::new(params.a_d, params.b_d)?;
        let spec_s = HuberSpec::new(params.a_s, params.b_s)?;
        let mut tally = BranchTally::default();
        aux.visit(u, f, |slot, grad| {
            let spec = if slot.data { spec_d } else { spec_s };
            let l = spec.l_update(grad);
            let residual = grad - l;
            tally.record(l, residual, spec.a());
            (l, spec.mu_update(residual))
        });
        Ok((aux, tally))
    }

    /// Re-derives `μ` from the current `l` fields at iterate `u`.
    pub fn refresh_mu(&mut self, u: &ImageGrid, f: &ImageGrid, params: &SmoothingParams) -> Result<()> {
        check_pair(u, f)?;
        self.check_shape(u, params)?;
        let spec_d = HuberSpec::new(params.a_d, params.b_d)?;
        let spec_s = HuberSpec::new(params.a_s, params.b_s)?;
        let (l_d, l_s) = (self.l_d.clone(), self.l_s.clone());
        self.visit(u, f, |slot, grad| {
            let (spec, l) = if slot.data {
                (spec_d, l_d[slot.index])
            } else {
                (spec_s, l_s[slot.index])
            };
            (l, spec.mu_update(grad - l))
        });
        Ok(())
    }

    /// Calls `update(slot, ∇)` for every in-bounds directed pair and stores
    /// the returned `(l, μ)`.
    fn visit(&mut self, u: &ImageGrid, f: &ImageGrid, mut update: impl FnMut(Slot, f64) -> (f64, f64)) {
        let e = self.extent;
        let c_n = self.channels;
        let wd = crate::grid::NeighborOffsets::data(self.r_d);
        let ws = crate::grid::NeighborOffsets::smoothness(self.r_s);
        let (kd, ks) = (wd.len(), ws.len());
        for c in 0..c_n {
            for y in 0..e.height {
                for x in 0..e.width {
                    let i = e.index(y, x);
                    let ui = u.data()[i * c_n + c];
                    for (k, &(dy, dx)) in wd.offsets().iter().enumerate() {
                        if let Some(j) = e.shifted(y, x, dy, dx) {
                            let index = (c * e.pixels() + i) * kd + k;
                            let grad = ui - f.data()[j * c_n + c];
                            let (l, mu) = update(Slot { data: true, index }, grad);
                            self.l_d[index] = l;
                            self.mu_d[index] = mu;
                        }
                    }
                    for (k, &(dy, dx)) in ws.offsets().iter().enumerate() {
                        if let Some(j) = e.shifted(y, x, dy, dx) {
                            let index = (c * e.pixels() + i) * ks + k;
                            let grad = ui - u.data()[j * c_n + c];
                            let (l, mu) = update(Slot { data: false, index }, grad);
                            self.l_s[index] = l;
                            self.mu_s[index] = mu;
                        }
                    }
                }
            }
        }
    }

    pub fn extent(&self) -> Extent {
        self.extent
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data_len(&self) -> usize {
        self.kd
    }

    pub fn smooth_len(&self) -> usize {
        (2 * self.r_s + 1).pow(2) - 1
    }

    #[inline]
    pub fn data_index(&self, c: usize, i: usize, k: usize) -> usize {
        (c * self.extent.pixels() + i) * self.data_len() + k
    }

    #[inline]
    pub fn smooth_index(&self, c: usize, i: usize, k: usize) -> usize {
        (c * self.extent.pixels() + i) * self.smooth_len() + k
    }

    pub(crate) fn check_shape(&self, u: &ImageGrid, params: &SmoothingParams) -> Result<()> {
        if self.extent != u.extent()
            || self.channels != u.channels()
            || self.r_d != params.r_d
            || self.r_s != params.r_s
        {
            return Err(Error::Shape(format!(
                "auxiliary fields are {}x{} r_d={} r_s={}, image is {}x{} r_d={} r_s={}",
                self.extent,
                self.channels,
                self.r_d,
                self.r_s,
                u.extent(),
                u.channels(),
                params.r_d,
                params.r_s
            )));
        }
        Ok(())
    }

    /// Every `l` slot, in-bounds or not, is exactly zero.
    pub fn l_is_zero(&self) -> bool {
        self.l_d.iter().chain(&self.l_s).all(|&v| v == 0.0)
    }
}

#[derive(Debug, Clone, Copy)]
struct Slot {
    data: bool,
    index: usize,
}

pub(crate) fn check_pair(u: &ImageGrid, f: &ImageGrid) -> Result<()> {
    if u.extent() != f.extent() || u.channels() != f.channels() {
        return Err(Error::Shape(format!(
            "iterate is {}x{}, input is {}x{}",
            u.extent(),
            u.channels(),
            f.extent(),
            f.channels()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn updates_follow_the_closed_forms() {
        let f = ImageGrid::new(1, 3, 1, vec![0.0, 0.5, 0.55]).unwrap();
        let u = ImageGrid::new(1, 3, 1, vec![0.0, 0.5, 0.55]).unwrap();
        let p = SmoothingParams {
            b_s: 0.1,
            b_d: 0.1,
            r_d: 0,
            ..Default::default()
        };
        let (aux, tally) = AuxFields::from_iterate(&u, &f, &p).unwrap();
        // pixel 0 -> pixel 1 difference -0.5 is truncated
        let k_right = p.smoothness_window().position(0, 1).unwrap();
        let idx = aux.smooth_index(0, 0, k_right);
        assert_eq!(aux.l_s[idx], -0.5);
        assert_eq!(aux.mu_s[idx], 0.5 / 1e-7);
        // pixel 1 -> pixel 2 difference -0.05 is kept
        let idx = aux.smooth_index(0, 1, k_right);
        assert_eq!(aux.l_s[idx], 0.0);
        assert!((aux.mu_s[idx] - 10.0).abs() < 1e-9);
        // 4 directed smoothness pairs, 2 truncated; data residuals all zero
        assert_eq!(tally.truncated, 2);
        assert_eq!(tally.mu_linear, 2);
        assert_eq!(tally.mu_quadratic, 5);
    }

    #[test]
    fn large_b_never_truncates() {
        let f = ImageGrid::new(2, 2, 1, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let p = SmoothingParams::default();
        let (aux, tally) = AuxFields::from_iterate(&f, &f, &p).unwrap();
        assert!(aux.l_is_zero());
        assert_eq!(tally.truncated, 0);
    }

    #[test]
    fn shape_mismatch() {
        let f = ImageGrid::filled(2, 2, 1, 0.0).unwrap();
        let u = ImageGrid::filled(2, 3, 1, 0.0).unwrap();
        assert!(AuxFields::from_iterate(&u, &f, &SmoothingParams::default()).is_err());
    }
}
