//! Sparse Cholesky solve of the per-iteration system.
//!
//! The sparsity pattern of `M` depends only on the grid extent and the
//! smoothness radius, so the symbolic analysis is done once and shared by all
//! channels and outer iterations. The fill-reducing ordering is a geometric
//! nested dissection of the pixel grid with separators `r_s` pixels wide.

use std::sync::Arc;

use faer::dyn_stack::{MemBuffer, MemStack};
use faer::perm::Perm;
use faer::sparse::linalg::cholesky::{
    factorize_symbolic_cholesky, SymbolicCholesky, SymmetricOrdering,
};
use faer::sparse::{SparseColMatRef, SymbolicSparseColMatRef};
use faer::{Conj, Mat, Par, Side};

use crate::error::{Error, Result};
use crate::grid::{Extent, PairStencil};
use crate::solver::{SolveReport, SparseSystem};

const NONE: usize = usize::MAX;

/// Leaves of the dissection at or below this many pixels are ordered row-major.
const LEAF_PIXELS: usize = 64;

/// Symbolic factorization for one `(extent, r_s)` pattern.
#[derive(Debug, Clone)]
pub struct DirectSolver {
    extent: Extent,
    r_s: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    diag_slot: Vec<usize>,
    /// Value slot of pair `(h, i)`, offset-major like `SparseSystem::pairs`.
    pair_slot: Vec<usize>,
    symbolic: Arc<SymbolicCholesky<usize>>,
}

impl DirectSolver {
    pub fn new(extent: Extent, r_s: usize) -> Result<Self> {
        let n = extent.pixels();
        let stencil = PairStencil::new(r_s);
        let half = stencil.half();
        let w = extent.width as isize;
        // column entries must be sorted by row, i.e. by linear shift
        let mut by_shift: Vec<(isize, usize)> = half
            .iter()
            .enumerate()
            .map(|(h, &(dy, dx))| (dy * w + dx, h))
            .collect();
        by_shift.sort_unstable();

        let mut col_ptr = Vec::with_capacity(n + 1);
        let mut row_idx = Vec::with_capacity(n * (half.len() + 1));
        let mut diag_slot = vec![NONE; n];
        let mut pair_slot = vec![NONE; n * half.len()];
        col_ptr.push(0);
        for i in 0..n {
            let (y, x) = extent.coords(i);
            diag_slot[i] = row_idx.len();
            row_idx.push(i);
            for &(_, h) in &by_shift {
                let (dy, dx) = half[h];
                if let Some(j) = extent.shifted(y, x, dy, dx) {
                    pair_slot[h * n + i] = row_idx.len();
                    row_idx.push(j);
                }
            }
            col_ptr.push(row_idx.len());
        }

        let fwd = nested_dissection(extent, r_s);
        let mut inv = vec![0usize; n];
        for (k, &p) in fwd.iter().enumerate() {
            inv[p] = k;
        }
        let perm = Perm::new_checked(fwd.into_boxed_slice(), inv.into_boxed_slice(), n);
        let pattern = SymbolicSparseColMatRef::new_checked(n, n, &col_ptr, None, &row_idx);
        let symbolic = factorize_symbolic_cholesky(
            pattern,
            Side::Lower,
            SymmetricOrdering::Custom(perm.as_ref()),
            Default::default(),
        )
        .map_err(|e| Error::Contract(format!("symbolic factorization failed: {e:?}")))?;
        Ok(DirectSolver {
            extent,
            r_s,
            col_ptr,
            row_idx,
            diag_slot,
            pair_slot,
            symbolic: Arc::new(symbolic),
        })
    }

    pub fn extent(&self) -> Extent {
        self.extent
    }

    pub fn r_s(&self) -> usize {
        self.r_s
    }

    /// Stored entries of the Cholesky factor.
    pub fn factor_len(&self) -> usize {
        self.symbolic.len_val()
    }

    /// Buffers for [`DirectSolver::solve`], reusable across calls with the
    /// same solver.
    pub fn workspace(&self) -> Workspace {
        Workspace {
            values: vec![0.0; self.row_idx.len()],
            l_values: vec![0.0; self.symbolic.len_val()],
            factor_buf: MemBuffer::new(
                self.symbolic
                    .factorize_numeric_llt_scratch::<f64>(Par::Seq, Default::default()),
            ),
            solve_buf: MemBuffer::new(self.symbolic.solve_in_place_scratch::<f64>(1, Par::Seq)),
        }
    }

    /// Factorizes `sys` and solves it, with one step of iterative refinement
    /// when the first solve misses `tol`.
    pub fn solve(&self, sys: &SparseSystem, tol: f64, ws: &mut Workspace) -> Result<(Vec<f64>, SolveReport)> {
        if sys.extent() != self.extent || sys.r_s() != self.r_s {
            return Err(Error::Shape(format!(
                "system is {} r_s={}, factorization is {} r_s={}",
                sys.extent(),
                sys.r_s(),
                self.extent,
                self.r_s
            )));
        }
        if ws.values.len() != self.row_idx.len() || ws.l_values.len() != self.symbolic.len_val() {
            return Err(Error::Shape("workspace belongs to another solver".into()));
        }
        if !sys.diag().iter().chain(sys.pairs()).chain(sys.rhs()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("linear system"));
        }
        let n = sys.len();
        // symmetric Jacobi scaling keeps the factor away from subnormals
        let s: Vec<f64> = sys.diag().iter().map(|d| 1.0 / d.sqrt()).collect();
        let values = &mut ws.values;
        for i in 0..n {
            values[self.diag_slot[i]] = 1.0;
        }
        let c = -2.0 * sys.lambda();
        let half = self.pair_slot.len() / n.max(1);
        for h in 0..half {
            for i in 0..n {
                let slot = self.pair_slot[h * n + i];
                if slot != NONE {
                    let j = self.row_idx[slot];
                    values[slot] = c * sys.pairs()[h * n + i] * s[i] * s[j];
                }
            }
        }
        let pattern = SymbolicSparseColMatRef::new_checked(n, n, &self.col_ptr, None, &self.row_idx);
        let mat = SparseColMatRef::new(pattern, values);

        let _ftz = FlushSubnormals::enable();
        let llt = self
            .symbolic
            .factorize_numeric_llt(
                &mut ws.l_values,
                mat,
                Side::Lower,
                Default::default(),
                Par::Seq,
                MemStack::new(&mut ws.factor_buf),
                Default::default(),
            )
            .map_err(|e| Error::Contract(format!("system is not positive definite: {e:?}")))?;
        let buf = &mut ws.solve_buf;
        let mut run = |rhs: &[f64]| {
            let mut x = Mat::<f64>::from_fn(n, 1, |i, _| rhs[i] * s[i]);
            llt.solve_in_place_with_conj(Conj::No, x.as_mut(), Par::Seq, MemStack::new(buf));
            (0..n).map(|i| x[(i, 0)] * s[i]).collect::<Vec<f64>>()
        };

        let scale = crate::solver::rhs_scale(sys);
        let mut x = run(sys.rhs());
        let mut rel = sys.relative_residual(&x);
        let mut floor = sys.rounding_floor(&x) / scale;
        let mut solves = 1;
        if rel > tol.max(floor) {
            let r = sys.residual(&x);
            let dx = run(&r);
            let refined: Vec<f64> = x.iter().zip(&dx).map(|(a, b)| a + b).collect();
            let rel_refined = sys.relative_residual(&refined);
            solves += 1;
            if rel_refined < rel {
                x = refined;
                rel = rel_refined;
                floor = sys.rounding_floor(&x) / scale;
            }
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("solution"));
        }
        Ok((
            x,
            SolveReport {
                iterations: solves,
                relative_residual: rel,
                floor,
                converged: rel <= tol.max(floor),
            },
        ))
    }
}

/// Scratch memory for one in-flight factorization.
pub struct Workspace {
    values: Vec<f64>,
    l_values: Vec<f64>,
    factor_buf: MemBuffer,
    solve_buf: MemBuffer,
}

impl std::fmt::Debug for Workspace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Workspace").field("factor_len", &self.l_values.len()).finish()
    }
}

/// Flushes subnormal results to zero on the current thread while alive.
///
/// Eliminating strongly coupled pixel clusters produces long runs of subnormal
/// fill values, which are slow on x86 and carry no information at the scale of
/// the factor.
struct FlushSubnormals {
    #[cfg(target_arch = "x86_64")]
    saved: u32,
}

impl FlushSubnormals {
    #[cfg(target_arch = "x86_64")]
    #[allow(deprecated)]
    fn enable() -> Self {
        use std::arch::x86_64::{_mm_getcsr, _mm_setcsr};
        const FTZ_DAZ: u32 = 0x8040;
        // SAFETY: SSE is part of the x86_64 baseline; only the rounding
        // control bits for subnormals change and they are restored on drop
        let saved = unsafe { _mm_getcsr() };
        unsafe { _mm_setcsr(saved | FTZ_DAZ) };
        FlushSubnormals { saved }
    }

    #[cfg(not(target_arch = "x86_64"))]
    fn enable() -> Self {
        FlushSubnormals {}
    }
}

#[cfg(target_arch = "x86_64")]
impl Drop for FlushSubnormals {
    #[allow(deprecated)]
    fn drop(&mut self) {
        // SAFETY: restores the value read in `enable`
        unsafe { std::arch::x86_64::_mm_setcsr(self.saved) };
    }
}

/// Elimination order for the pixel grid: both halves of a region first, then
/// the separator between them.
pub fn nested_dissection(extent: Extent, r: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(extent.pixels());
    dissect(extent, r, 0, extent.height, 0, extent.width, &mut out);
    out
}

fn dissect(e: Extent, r: usize, y0: usize, y1: usize, x0: usize, x1: usize, out: &mut Vec<usize>) {
    let (h, w) = (y1 - y0, x1 - x0);
    if h * w <= LEAF_PIXELS || (h <= 2 * r + 1 && w <= 2 * r + 1) {
        for y in y0..y1 {
            out.extend((x0..x1).map(|x| e.index(y, x)));
        }
        return;
    }
    if w >= h {
        let m = x0 + (w - r) / 2;
        dissect(e, r, y0, y1, x0, m, out);
        dissect(e, r, y0, y1, m + r, x1, out);
        for y in y0..y1 {
            out.extend((m..m + r).map(|x| e.index(y, x)));
        }
    } else {
        let m = y0 + (h - r) / 2;
        dissect(e, r, y0, m, x0, x1, out);
        dissect(e, r, m + r, y1, x0, x1, out);
        for y in m..m + r {
            out.extend((x0..x1).map(|x| e.index(y, x)));
        }
    }
}
