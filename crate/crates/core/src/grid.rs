//! Image containers, neighbourhood geometry and the parameter record.

use crate::error::{Error, Result};

/// Default value of the small constant `a = ε` used by every preset.
pub const EPSILON: f64 = 1e-7;
/// Floor added to guidance distances before exponentiation.
pub const DELTA: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Extent {
    pub height: usize,
    pub width: usize,
}

impl Extent {
    pub fn new(height: usize, width: usize) -> Self {
        Extent { height, width }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn coords(&self, i: usize) -> (usize, usize) {
        (i / self.width, i % self.width)
    }

    /// Index of `(y + dy, x + dx)` when it lies inside the grid.
    #[inline]
    pub fn shifted(&self, y: usize, x: usize, dy: isize, dx: isize) -> Option<usize> {
        let ny = y as isize + dy;
        let nx = x as isize + dx;
        if ny < 0 || nx < 0 || ny >= self.height as isize || nx >= self.width as isize {
            None
        } else {
            Some(ny as usize * self.width + nx as usize)
        }
    }
}

impl std::fmt::Display for Extent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

/// A `height × width × channels` image, row-major, channel-interleaved.
///
/// Samples are nominally in `[0, intensity_max]`; iterates produced by the
/// smoother may leave that range and are only clamped on output.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
    intensity_max: f64,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        Self::with_intensity_max(height, width, channels, data, 1.0)
    }

    pub fn with_intensity_max(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f64>,
        intensity_max: f64,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("empty extent {width}x{height}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Shape(format!("{channels} channels, expected 1 or 3")));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{} samples for {width}x{height}x{channels}",
                data.len()
            )));
        }
        if !(intensity_max > 0.0 && intensity_max.is_finite()) {
            return Err(Error::Contract(format!("intensity_max = {intensity_max}")));
        }
        Ok(ImageGrid {
            height,
            width,
            channels,
            data,
            intensity_max,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    /// A 1-D signal as a `1 × len` single-channel grid.
    pub fn from_signal(values: &[f64]) -> Result<Self> {
        Self::new(1, values.len(), 1, values.to_vec())
    }

    /// Reassembles an image from per-channel planes.
    pub fn from_planes(extent: Extent, planes: &[Vec<f64>]) -> Result<Self> {
        let n = extent.pixels();
        if planes.iter().any(|p| p.len() != n) {
            return Err(Error::Shape("plane length does not match extent".into()));
        }
        let c = planes.len();
        let mut data = vec![0.0; n * c];
        for (ch, plane) in planes.iter().enumerate() {
            for (i, v) in plane.iter().enumerate() {
                data[i * c + ch] = *v;
            }
        }
        Self::new(extent.height, extent.width, c, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn extent(&self) -> Extent {
        Extent::new(self.height, self.width)
    }

    pub fn intensity_max(&self) -> f64 {
        self.intensity_max
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, value: f64) {
        self.data[(y * self.width + x) * self.channels + c] = value;
    }

    /// Samples of pixel `i` (all channels).
    #[inline]
    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }

    pub fn plane(&self, c: usize) -> Vec<f64> {
        self.data
            .iter()
            .skip(c)
            .step_by(self.channels)
            .copied()
            .collect()
    }

    pub fn planes(&self) -> Vec<Vec<f64>> {
        (0..self.channels).map(|c| self.plane(c)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn clamped(&self) -> ImageGrid {
        let m = self.intensity_max;
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v = v.clamp(0.0, m));
        out
    }

    pub fn flip_horizontal(&self) -> ImageGrid {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    out.set(y, self.width - 1 - x, c, self.get(y, x, c));
                }
            }
        }
        out
    }

    /// Rec. 601 luma; single-channel images are returned unchanged.
    pub fn to_luma(&self) -> ImageGrid {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect();
        ImageGrid {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
            intensity_max: self.intensity_max,
        }
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

/// The square `(2r+1)²` window, optionally without its centre, in row-major
/// offset order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborOffsets {
    radius: usize,
    include_center: bool,
    offsets: Vec<(isize, isize)>,
}

impl NeighborOffsets {
    pub fn new(radius: usize, include_center: bool) -> Self {
        let r = radius as isize;
        let mut offsets = Vec::with_capacity((2 * radius + 1).pow(2));
        for dy in -r..=r {
            for dx in -r..=r {
                if dy == 0 && dx == 0 && !include_center {
                    continue;
                }
                offsets.push((dy, dx));
            }
        }
        NeighborOffsets {
            radius,
            include_center,
            offsets,
        }
    }

    /// The data window N_d. At radius 0 it is the pixel itself; for larger
    /// radii the centre is left out.
    ///
    /// Starting from `u = f` the centre pair has a zero residual, so its
    /// half-quadratic weight is `1/(2a)`. With `a` near zero that single pair
    /// outweighs everything else and pins `u_i` to `f_i` at every iteration.
    pub fn data(radius: usize) -> Self {
        Self::new(radius, radius == 0)
    }

    /// The smoothness window N_s: centre excluded.
    pub fn smoothness(radius: usize) -> Self {
        Self::new(radius, false)
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn include_center(&self) -> bool {
        self.include_center
    }

    pub fn offsets(&self) -> &[(isize, isize)] {
        &self.offsets
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    /// Position of `(dy, dx)` in the offset list.
    pub fn position(&self, dy: isize, dx: isize) -> Option<usize> {
        let r = self.radius as isize;
        if dy.abs() > r || dx.abs() > r {
            return None;
        }
        let side = 2 * r + 1;
        let raw = ((dy + r) * side + dx + r) as usize;
        if self.include_center {
            Some(raw)
        } else if dy == 0 && dx == 0 {
            None
        } else {
            let center = (side * side / 2) as usize;
            Some(if raw > center { raw - 1 } else { raw })
        }
    }

    /// Position of the negated offset. For symmetric windows this always exists.
    pub fn mirror(&self, k: usize) -> usize {
        let (dy, dx) = self.offsets[k];
        self.position(-dy, -dx).expect("window is symmetric")
    }
}

/// The smoothness window split into unordered pairs.
///
/// Each offset `o` of the centre-less window is paired with `-o`; the
/// representative of a pair is the offset that comes later in row-major order
/// (`dy > 0`, or `dy == 0 && dx > 0`). Per-pair quantities are stored once per
/// pixel and representative offset, at the pixel where the pair starts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairStencil {
    window: NeighborOffsets,
    half: Vec<(isize, isize)>,
    /// For every window offset: the representative index and whether the
    /// offset is the representative itself (`true`) or its mirror.
    lookup: Vec<(usize, bool)>,
}

impl PairStencil {
    pub fn new(radius: usize) -> Self {
        let window = NeighborOffsets::smoothness(radius);
        let half: Vec<(isize, isize)> = window
            .offsets()
            .iter()
            .copied()
            .filter(|&(dy, dx)| dy > 0 || (dy == 0 && dx > 0))
            .collect();
        let lookup = window
            .offsets()
            .iter()
            .map(|&(dy, dx)| {
                if let Some(h) = half.iter().position(|&o| o == (dy, dx)) {
                    (h, true)
                } else {
                    let h = half.iter().position(|&o| o == (-dy, -dx)).unwrap();
                    (h, false)
                }
            })
            .collect();
        PairStencil {
            window,
            half,
            lookup,
        }
    }

    pub fn radius(&self) -> usize {
        self.window.radius()
    }

    pub fn window(&self) -> &NeighborOffsets {
        &self.window
    }

    /// Representative offsets, one per unordered pair direction.
    pub fn half(&self) -> &[(isize, isize)] {
        &self.half
    }

    pub fn lookup(&self, k: usize) -> (usize, bool) {
        self.lookup[k]
    }
}

/// In-bounds pixels of the `(2r+1)²` window around pixel `i`, row-major by offset.
pub fn neighbors(i: usize, radius: usize, extent: Extent, include_center: bool) -> Result<Vec<usize>> {
    if i >= extent.pixels() {
        return Err(Error::Contract(format!(
            "pixel {i} outside {extent} grid"
        )));
    }
    let (y, x) = extent.coords(i);
    Ok(NeighborOffsets::new(radius, include_center)
        .offsets()
        .iter()
        .filter_map(|&(dy, dx)| extent.shifted(y, x, dy, dx))
        .collect())
}

/// Every scalar of the objective and of the outer loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothingParams {
    /// Overall smoothing strength.
    pub lambda: f64,
    /// Sensitivity of the guidance weight to guidance edges.
    pub alpha: f64,
    pub a_d: f64,
    pub b_d: f64,
    pub a_s: f64,
    pub b_s: f64,
    /// Data window radius.
    pub r_d: usize,
    /// Smoothness window radius.
    pub r_s: usize,
    /// Number of outer iterations, i.e. linear solves.
    pub n_iters: usize,
    pub delta: f64,
    pub epsilon: f64,
}

impl Default for SmoothingParams {
    fn default() -> Self {
        SmoothingParams {
            lambda: 1.0,
            alpha: 0.5,
            a_d: EPSILON,
            b_d: 10.0,
            a_s: EPSILON,
            b_s: 10.0,
            r_d: 1,
            r_s: 1,
            n_iters: 10,
            delta: DELTA,
            epsilon: EPSILON,
        }
    }
}

impl SmoothingParams {
    /// All violated invariants; empty when the record is valid.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let positive = |x: f64| x > 0.0 && x.is_finite();
        if !positive(self.lambda) {
            v.push(format!("lambda > 0 (got {})", self.lambda));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            v.push(format!("alpha >= 0 (got {})", self.alpha));
        }
        for (name, a) in [("a_d", self.a_d), ("a_s", self.a_s)] {
            if !positive(a) {
                v.push(format!("{name} > 0 (got {a})"));
            }
        }
        for (name, b) in [("b_d", self.b_d), ("b_s", self.b_s)] {
            if !b.is_finite() {
                v.push(format!("{name} finite (got {b})"));
            }
        }
        if !(self.a_d <= self.b_d) {
            v.push(format!("a_d ≤ b_d (got {} > {})", self.a_d, self.b_d));
        }
        if !(self.a_s <= self.b_s) {
            v.push(format!("a_s ≤ b_s (got {} > {})", self.a_s, self.b_s));
        }
        if !positive(self.delta) {
            v.push(format!("delta > 0 (got {})", self.delta));
        }
        if !positive(self.epsilon) {
            v.push(format!("epsilon > 0 (got {})", self.epsilon));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidParams(v))
        }
    }

    pub fn data_window(&self) -> NeighborOffsets {
        NeighborOffsets::data(self.r_d)
    }

    pub fn smoothness_window(&self) -> NeighborOffsets {
        NeighborOffsets::smoothness(self.r_s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interior_pixel_has_full_window() {
        let e = Extent::new(5, 5);
        let n = neighbors(e.index(2, 2), 1, e, false).unwrap();
        assert_eq!(n.len(), 8);
        assert!(!n.contains(&e.index(2, 2)));
    }

    #[test]
    fn corner_pixel_is_clipped() {
        let e = Extent::new(5, 5);
        let n = neighbors(0, 1, e, false).unwrap();
        assert_eq!(n, vec![1, 5, 6]);
    }

    #[test]
    fn radius_zero_with_center_is_self() {
        let e = Extent::new(4, 7);
        for i in 0..e.pixels() {
            assert_eq!(neighbors(i, 0, e, true).unwrap(), vec![i]);
        }
    }

    #[test]
    fn out_of_bounds_index_is_rejected() {
        let e = Extent::new(2, 2);
        assert!(matches!(neighbors(4, 1, e, true), Err(Error::Contract(_))));
    }

    #[test]
    fn neighbor_order_is_row_major() {
        let e = Extent::new(3, 3);
        let n = neighbors(4, 1, e, true).unwrap();
        assert_eq!(n, (0..9).collect::<Vec<_>>());
    }

    #[test]
    fn window_counts_and_symmetry() {
        let e = Extent::new(9, 11);
        for r in 0..4 {
            let full = (2 * r + 1) * (2 * r + 1) - 1;
            for i in 0..e.pixels() {
                let ni = neighbors(i, r, e, false).unwrap();
                let (y, x) = e.coords(i);
                let interior = y >= r && x >= r && y + r < e.height && x + r < e.width;
                assert!(ni.len() <= full);
                assert_eq!(ni.len() == full, interior);
                for &j in &ni {
                    assert!(neighbors(j, r, e, false).unwrap().contains(&i));
                }
            }
        }
    }

    #[test]
    fn offset_positions_round_trip() {
        for r in 0..4 {
            for center in [false, true] {
                let w = NeighborOffsets::new(r, center);
                for (k, &(dy, dx)) in w.offsets().iter().enumerate() {
                    assert_eq!(w.position(dy, dx), Some(k));
                    let m = w.mirror(k);
                    assert_eq!(w.offsets()[m], (-dy, -dx));
                }
            }
        }
    }

    #[test]
    fn params_validation() {
        let p = SmoothingParams {
            a_s: 0.2,
            b_s: 0.1,
            ..Default::default()
        };
        let v = p.violations();
        assert_eq!(v.len(), 1);
        assert!(v[0].starts_with("a_s ≤ b_s"));

        assert!(SmoothingParams::default().violations().is_empty());
        let p = SmoothingParams {
            n_iters: 0,
            ..Default::default()
        };
        assert!(p.validate().is_ok());

        let p = SmoothingParams {
            lambda: 0.0,
            delta: -1.0,
            a_d: 0.0,
            ..Default::default()
        };
        assert_eq!(p.violations().len(), 3);
    }

    #[test]
    fn defaults_match_documented_constants() {
        let p = SmoothingParams::default();
        assert_eq!(p.delta, 1e-7);
        assert_eq!(p.epsilon, 1e-7);
    }

    #[test]
    fn planes_round_trip() {
        let g = ImageGrid::new(2, 2, 3, (0..12).map(|v| v as f64).collect()).unwrap();
        let back = ImageGrid::from_planes(g.extent(), &g.planes()).unwrap();
        assert_eq!(g, back);
        assert_eq!(g.plane(1), vec![1.0, 4.0, 7.0, 10.0]);
    }

    #[test]
    fn constructor_rejects_bad_shapes() {
        assert!(ImageGrid::new(0, 3, 1, vec![]).is_err());
        assert!(ImageGrid::new(2, 2, 2, vec![0.0; 8]).is_err());
        assert!(ImageGrid::new(2, 2, 1, vec![0.0; 3]).is_err());
    }
}
