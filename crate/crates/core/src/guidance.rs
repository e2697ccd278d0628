//! Static guidance weights `ω_{i,j} = (|g_i - g_j| + δ)^-α`.
//!
//! The weights only depend on the guidance image, so they are built once per
//! smoothing call. The per-iteration weight actually used by the solver is
//! `ω · μ^s`, where `μ^s` tracks the current iterate.

use crate::error::{Error, Result};
use crate::grid::{Extent, ImageGrid, PairStencil, SmoothingParams};

/// Distance between two guidance pixels: absolute difference for gray,
/// mean of per-channel absolute differences for colour.
pub fn guidance_distance(g: &ImageGrid, i: usize, j: usize) -> f64 {
    let (gi, gj) = (g.pixel(i), g.pixel(j));
    if gi.len() == 1 {
        return (gi[0] - gj[0]).abs();
    }
    let sum: f64 = gi.iter().zip(gj).map(|(a, b)| (a - b).abs()).sum();
    sum / gi.len() as f64
}

#[inline]
pub fn guidance_weight(dist: f64, alpha: f64, delta: f64) -> f64 {
    if alpha == 0.0 {
        return 1.0;
    }
    (dist + delta).powf(-alpha)
}

/// One weight per unordered smoothness pair, stored at the pixel where the
/// pair's representative offset starts. Pairs that leave the grid hold 0.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightField {
    extent: Extent,
    stencil: PairStencil,
    alpha: f64,
    delta: f64,
    values: Vec<f64>,
}

impl WeightField {
    pub fn build(g: &ImageGrid, target: Extent, params: &SmoothingParams) -> Result<Self> {
        if g.extent() != target {
            return Err(Error::Shape(format!(
                "guidance is {}, image is {target}",
                g.extent()
            )));
        }
        let stencil = PairStencil::new(params.r_s);
        let h = stencil.half().len();
        let mut values = vec![0.0; target.pixels() * h];
        for y in 0..target.height {
            for x in 0..target.width {
                let i = target.index(y, x);
                for (k, &(dy, dx)) in stencil.half().iter().enumerate() {
                    if let Some(j) = target.shifted(y, x, dy, dx) {
                        let d = guidance_distance(g, i, j);
                        values[i * h + k] = guidance_weight(d, params.alpha, params.delta);
                    }
                }
            }
        }
        Ok(WeightField {
            extent: target,
            stencil,
            alpha: params.alpha,
            delta: params.delta,
            values,
        })
    }

    pub fn extent(&self) -> Extent {
        self.extent
    }

    pub fn stencil(&self) -> &PairStencil {
        &self.stencil
    }

    pub fn radius(&self) -> usize {
        self.stencil.radius()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Row-major `pixels × half-offsets` storage.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Weight of the pair starting at pixel `i` along representative offset `h`.
    #[inline]
    pub fn pair(&self, i: usize, h: usize) -> f64 {
        self.values[i * self.stencil.half().len() + h]
    }

    /// `ω_{i,j}` for `j = i + window offset k`. Caller guarantees `j` is in bounds.
    #[inline]
    pub fn directed(&self, i: usize, j: usize, k: usize) -> f64 {
        let (h, forward) = self.stencil.lookup(k);
        if forward {
            self.pair(i, h)
        } else {
            self.pair(j, h)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::neighbors;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn distance_examples() {
        let g = ImageGrid::new(1, 2, 1, vec![0.8, 0.3]).unwrap();
        assert!((guidance_distance(&g, 0, 1) - 0.5).abs() < 1e-15);
        assert_eq!(guidance_distance(&g, 1, 1), 0.0);

        let g = ImageGrid::new(1, 2, 3, vec![0.5, 0.2, 0.9, 0.2, 0.2, 0.6]).unwrap();
        assert!((guidance_distance(&g, 0, 1) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn distance_is_symmetric_and_zero_iff_equal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..2000 {
            let data: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..1.0)).collect();
            let g = ImageGrid::new(1, 2, 3, data).unwrap();
            let d = guidance_distance(&g, 0, 1);
            assert_eq!(d, guidance_distance(&g, 1, 0));
            assert!(d > 0.0);
            assert_eq!(guidance_distance(&g, 0, 0), 0.0);
        }
    }

    #[test]
    fn weight_examples() {
        assert_eq!(guidance_weight(0.37, 0.0, 1e-7), 1.0);
        let w = guidance_weight(0.0, 0.5, 1e-7);
        assert!((w - 10f64.powf(3.5)).abs() < 1e-9);
        assert!((w - 3162.2776601683795).abs() < 1e-9);
        assert!((guidance_weight(1.0, 0.5, 1e-7) - 1.0).abs() < 1e-7);
    }

    #[test]
    fn constant_guide_gives_ceiling_weight() {
        let g = ImageGrid::filled(4, 5, 1, 0.4).unwrap();
        for alpha in [0.0, 0.2, 0.5, 1.0] {
            let p = SmoothingParams {
                alpha,
                r_s: 2,
                ..Default::default()
            };
            let w = WeightField::build(&g, g.extent(), &p).unwrap();
            let expect = guidance_weight(0.0, alpha, 1e-7);
            let e = g.extent();
            for i in 0..e.pixels() {
                let (y, x) = e.coords(i);
                for (h, &(dy, dx)) in w.stencil().half().iter().enumerate() {
                    if e.shifted(y, x, dy, dx).is_some() {
                        assert_eq!(w.pair(i, h), expect);
                    } else {
                        assert_eq!(w.pair(i, h), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn two_pixel_pair_weight() {
        let g = ImageGrid::new(2, 1, 1, vec![0.0, 1.0]).unwrap();
        let p = SmoothingParams {
            alpha: 0.5,
            ..Default::default()
        };
        let w = WeightField::build(&g, g.extent(), &p).unwrap();
        let h = w.stencil().half().iter().position(|&o| o == (1, 0)).unwrap();
        assert!((w.pair(0, h) - (1.0f64 + 1e-7).powf(-0.5)).abs() < 1e-15);
        assert!((w.pair(0, h) - 1.0).abs() < 1e-7);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let g = ImageGrid::filled(4, 5, 1, 0.0).unwrap();
        let p = SmoothingParams::default();
        assert!(WeightField::build(&g, Extent::new(5, 4), &p).is_err());
    }

    #[test]
    fn directed_lookup_is_symmetric_and_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let e = Extent::new(6, 7);
        let g = ImageGrid::new(6, 7, 3, (0..126).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let p = SmoothingParams {
            r_s: 2,
            ..Default::default()
        };
        let w = WeightField::build(&g, e, &p).unwrap();
        let window = w.stencil().window().clone();
        let mut pairs = Vec::new();
        for i in 0..e.pixels() {
            let (y, x) = e.coords(i);
            for (k, &(dy, dx)) in window.offsets().iter().enumerate() {
                if let Some(j) = e.shifted(y, x, dy, dx) {
                    let m = window.mirror(k);
                    assert_eq!(w.directed(i, j, k), w.directed(j, i, m));
                    assert!(w.directed(i, j, k) > 0.0);
                    pairs.push((guidance_distance(&g, i, j), w.directed(i, j, k)));
                }
            }
            assert_eq!(
                neighbors(i, 2, e, false).unwrap().len(),
                window
                    .offsets()
                    .iter()
                    .filter(|&&(dy, dx)| e.shifted(y, x, dy, dx).is_some())
                    .count()
            );
        }
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for win in pairs.windows(2) {
            assert!(win[1].1 <= win[0].1);
        }
        let again = WeightField::build(&g, e, &p).unwrap();
        assert_eq!(w, again);
    }
}
