//! The per-iteration linear system and its conjugate-gradient solve.
//!
//! With `l` and `μ` frozen, `E_ulμ` is a quadratic in `u` whose stationarity
//! condition is
//!
//! ```text
//! (A - 2λW) u = D + 2λS
//! A_ii = Σ_d μ^d_ij + 2λ Σ_s W_ij      W_ij = ω_ij μ^s_ij
//! D_i  = Σ_d μ^d_ij (f_j + l^d_ij)     S_i  = Σ_s W_ij l^s_ij
//! ```
//!
//! Directed pair quantities are symmetrized at assembly: `W` uses the mean of
//! both directions and `S` the mean of `W_ij l_ij - W_ji l_ji`. For fields
//! produced by the update rules (`μ` symmetric, `l` antisymmetric) this is the
//! identity; for arbitrary fields it is still the exact gradient of `E_ulμ`.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::fields::{AuxFields, BranchTally};
use crate::grid::{Extent, NeighborOffsets, SmoothingParams};
use crate::guidance::WeightField;
use crate::penalty::HuberSpec;

/// `M = A - 2λW` on a clipped window stencil, plus the right-hand side.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSystem {
    extent: Extent,
    r_s: usize,
    lambda: f64,
    half: Vec<(isize, isize)>,
    diag: Vec<f64>,
    /// Symmetrized `W`, `half.len() × n`, offset-major.
    pairs: Vec<f64>,
    rhs: Vec<f64>,
}

/// Per-pair inputs of the assembly: `(l, μ)` of a directed data pair, and of
/// a smoothness pair in both directions (`i → j` along offset `k`, `j → i`
/// along its mirror `m`).
trait PairSource {
    fn data(&mut self, i: usize, k: usize, grad: f64) -> (f64, f64);
    fn smooth(&mut self, i: usize, k: usize, j: usize, m: usize, grad: f64) -> [(f64, f64); 2];
}

struct FromFields<'a> {
    aux: &'a AuxFields,
    channel: usize,
}

impl PairSource for FromFields<'_> {
    #[inline]
    fn data(&mut self, i: usize, k: usize, _grad: f64) -> (f64, f64) {
        let idx = self.aux.data_index(self.channel, i, k);
        (self.aux.l_d[idx], self.aux.mu_d[idx])
    }

    #[inline]
    fn smooth(&mut self, i: usize, k: usize, j: usize, m: usize, _grad: f64) -> [(f64, f64); 2] {
        let a = self.aux.smooth_index(self.channel, i, k);
        let b = self.aux.smooth_index(self.channel, j, m);
        [(self.aux.l_s[a], self.aux.mu_s[a]), (self.aux.l_s[b], self.aux.mu_s[b])]
    }
}

struct FromIterate {
    data: HuberSpec,
    smooth: HuberSpec,
    tally: BranchTally,
}

impl FromIterate {
    #[inline]
    fn update(spec: HuberSpec, tally: &mut BranchTally, grad: f64) -> (f64, f64) {
        let l = spec.l_update(grad);
        let r = grad - l;
        tally.record(l, r, spec.a());
        (l, spec.mu_update(r))
    }
}

impl PairSource for FromIterate {
    #[inline]
    fn data(&mut self, _i: usize, _k: usize, grad: f64) -> (f64, f64) {
        Self::update(self.data, &mut self.tally, grad)
    }

    #[inline]
    fn smooth(&mut self, _i: usize, _k: usize, _j: usize, _m: usize, grad: f64) -> [(f64, f64); 2] {
        // the reverse direction is tallied when pixel j is visited
        let forward = Self::update(self.smooth, &mut self.tally, grad);
        let l = self.smooth.l_update(-grad);
        let backward = (l, self.smooth.mu_update(-grad - l));
        [forward, backward]
    }
}

fn check_plane(name: &'static str, plane: &[f64], n: usize) -> Result<()> {
    if plane.len() != n {
        return Err(Error::Shape(format!("{name} has {} samples, expected {n}", plane.len())));
    }
    if plane.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(name));
    }
    Ok(())
}

fn assemble_with(
    f: &[f64],
    u: &[f64],
    weights: &WeightField,
    params: &SmoothingParams,
    source: &mut impl PairSource,
) -> SparseSystem {
    let e = weights.extent();
    let n = e.pixels();
    let wd = NeighborOffsets::data(params.r_d);
    let stencil = weights.stencil();
    let ws = stencil.window();
    let mirrors: Vec<usize> = (0..ws.len()).map(|k| ws.mirror(k)).collect();
    let half = stencil.half().to_vec();
    let nh = half.len();
    let lambda = params.lambda;
    let mut diag = vec![0.0; n];
    let mut rhs = vec![0.0; n];
    let mut pairs = vec![0.0; nh * n];
    for y in 0..e.height {
        for x in 0..e.width {
            let i = e.index(y, x);
            let ui = u[i];
            let mut a = 0.0;
            let mut d = 0.0;
            for (k, &(dy, dx)) in wd.offsets().iter().enumerate() {
                if let Some(j) = e.shifted(y, x, dy, dx) {
                    let (l, mu) = source.data(i, k, ui - f[j]);
                    a += mu;
                    d += mu * (f[j] + l);
                }
            }
            let mut wsum = 0.0;
            let mut s = 0.0;
            for (k, &(dy, dx)) in ws.offsets().iter().enumerate() {
                if let Some(j) = e.shifted(y, x, dy, dx) {
                    let omega = weights.directed(i, j, k);
                    let grad = ui - u[j];
                    let [(l_ij, mu_ij), (l_ji, mu_ji)] = source.smooth(i, k, j, mirrors[k], grad);
                    let w_ij = omega * mu_ij;
                    let w_ji = omega * mu_ji;
                    let w = 0.5 * (w_ij + w_ji);
                    wsum += w;
                    s += 0.5 * (w_ij * l_ij - w_ji * l_ji);
                    let (h, forward) = stencil.lookup(k);
                    if forward {
                        pairs[h * n + i] = w;
                    }
                }
            }
            diag[i] = a + 2.0 * lambda * wsum;
            rhs[i] = d + 2.0 * lambda * s;
        }
    }
    SparseSystem {
        extent: e,
        r_s: params.r_s,
        lambda,
        half,
        diag,
        pairs,
        rhs,
    }
}

/// Assembles the system for channel `channel` from explicit auxiliary fields.
///
/// `u_prev` only enters through the auxiliary fields; it is accepted so the
/// finiteness contract covers the iterate the fields were derived from.
pub fn assemble(
    f: &[f64],
    u_prev: &[f64],
    aux: &AuxFields,
    channel: usize,
    weights: &WeightField,
    params: &SmoothingParams,
) -> Result<SparseSystem> {
    let n = weights.extent().pixels();
    check_plane("input plane", f, n)?;
    check_plane("iterate plane", u_prev, n)?;
    if aux.extent() != weights.extent() || channel >= aux.channels() {
        return Err(Error::Shape("auxiliary fields do not match the system".into()));
    }
    if aux.l_d.iter().chain(&aux.mu_d).chain(&aux.l_s).chain(&aux.mu_s).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("auxiliary fields"));
    }
    let mut src = FromFields { aux, channel };
    Ok(assemble_with(f, u_prev, weights, params, &mut src))
}

/// Assembles the system at iterate `u_prev`, updating `l` and `μ` on the fly
/// with the closed-form rules. Equivalent to [`AuxFields::from_iterate`]
/// followed by [`assemble`], without materializing the fields.
pub fn assemble_from_iterate(
    f: &[f64],
    u_prev: &[f64],
    weights: &WeightField,
    params: &SmoothingParams,
) -> Result<(SparseSystem, BranchTally)> {
    let n = weights.extent().pixels();
    check_plane("input plane", f, n)?;
    check_plane("iterate plane", u_prev, n)?;
    let mut src = FromIterate {
        data: HuberSpec::new(params.a_d, params.b_d)?,
        smooth: HuberSpec::new(params.a_s, params.b_s)?,
        tally: BranchTally::default(),
    };
    let sys = assemble_with(f, u_prev, weights, params, &mut src);
    Ok((sys, src.tally))
}

const ROUNDING_FACTOR: f64 = 64.0;

/// How the pipeline solves each system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SolveMethod {
    /// Sparse Cholesky factorization, see [`crate::direct`].
    #[default]
    Direct,
    /// Jacobi-preconditioned conjugate gradients warm-started at `u^k`.
    Pcg,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub method: SolveMethod,
    /// Target relative residual `‖Mu - rhs‖ / ‖rhs‖`.
    pub tol: f64,
    /// `None` means `10 n`.
    pub max_iters: Option<usize>,
    /// Iterations without a new best residual before giving up.
    pub stagnation_window: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            method: SolveMethod::Direct,
            tol: 1e-8,
            max_iters: None,
            stagnation_window: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveReport {
    pub iterations: usize,
    pub relative_residual: f64,
    /// Smallest relative residual distinguishable from rounding at the
    /// returned iterate. The effective target is `max(tol, floor)`.
    pub floor: f64,
    /// `false` when the iteration budget ran out before reaching the target.
    pub converged: bool,
}

/// Outcome of the diagonal-dominance check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpdReport {
    pub ok: bool,
    /// Smallest `(A_ii - Σ_j |M_ij|) / A_ii` over rows.
    pub worst_margin: f64,
    pub worst_row: usize,
}

impl SparseSystem {
    pub fn extent(&self) -> Extent {
        self.extent
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn r_s(&self) -> usize {
        self.r_s
    }

    pub fn half_offsets(&self) -> &[(isize, isize)] {
        &self.half
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    pub fn rhs(&self) -> &[f64] {
        &self.rhs
    }

    /// Offset-major symmetrized affinities `W`.
    pub fn pairs(&self) -> &[f64] {
        &self.pairs
    }

    /// Mutable access for constructing adversarial systems in tests and tools.
    pub fn diag_mut(&mut self) -> &mut [f64] {
        &mut self.diag
    }

    /// Calls `visit(i, j, W_ij)` once per in-bounds unordered pair.
    fn for_each_pair(&self, mut visit: impl FnMut(usize, usize, f64)) {
        let e = self.extent;
        let n = e.pixels();
        for (h, &(dy, dx)) in self.half.iter().enumerate() {
            let y_end = (e.height as isize - dy).max(0) as usize;
            let x_lo = (-dx).max(0) as usize;
            let x_hi = (e.width as isize - dx.max(0)).max(0) as usize;
            let shift = dy * e.width as isize + dx;
            let col = &self.pairs[h * n..(h + 1) * n];
            for y in 0..y_end {
                let row = y * e.width;
                for x in x_lo..x_hi {
                    let i = row + x;
                    let j = (i as isize + shift) as usize;
                    visit(i, j, col[i]);
                }
            }
        }
    }

    /// `out = M x`.
    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        let e = self.extent;
        let n = e.pixels();
        for ((o, d), xi) in out.iter_mut().zip(&self.diag).zip(x) {
            *o = d * xi;
        }
        let c = 2.0 * self.lambda;
        if c == 0.0 {
            return;
        }
        for (h, &(dy, dx)) in self.half.iter().enumerate() {
            // dy ≥ 0 for representative offsets
            let y_end = e.height.saturating_sub(dy as usize);
            let x_lo = (-dx).max(0) as usize;
            let x_hi = (e.width as isize - dx.max(0)).max(0) as usize;
            if x_lo >= x_hi {
                continue;
            }
            let shift = (dy * e.width as isize + dx) as usize;
            let col = &self.pairs[h * n..(h + 1) * n];
            for y in 0..y_end {
                let start = y * e.width + x_lo;
                let end = y * e.width + x_hi;
                for i in start..end {
                    let j = i + shift;
                    let w = c * col[i];
                    out[i] -= w * x[j];
                    out[j] -= w * x[i];
                }
            }
        }
    }

    /// Entry `M_ij`.
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return self.diag[i];
        }
        let e = self.extent;
        let (yi, xi) = e.coords(i);
        let (yj, xj) = e.coords(j);
        let (dy, dx) = (yj as isize - yi as isize, xj as isize - xi as isize);
        let n = e.pixels();
        for (h, &o) in self.half.iter().enumerate() {
            if o == (dy, dx) {
                return -2.0 * self.lambda * self.pairs[h * n + i];
            }
            if o == (-dy, -dx) {
                return -2.0 * self.lambda * self.pairs[h * n + j];
            }
        }
        0.0
    }

    /// Dense copy of `M`, row-major.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let n = self.len();
        let mut m = vec![vec![0.0; n]; n];
        for i in 0..n {
            m[i][i] = self.diag[i];
        }
        let c = -2.0 * self.lambda;
        self.for_each_pair(|i, j, w| {
            m[i][j] = c * w;
            m[j][i] = c * w;
        });
        m
    }

    pub fn residual(&self, x: &[f64]) -> Vec<f64> {
        let mut mx = vec![0.0; self.len()];
        self.apply(x, &mut mx);
        self.rhs.iter().zip(&mx).map(|(b, m)| b - m).collect()
    }

    /// Rounding noise expected in `‖Mx - rhs‖` when evaluated in floating
    /// point: a small multiple of `ε_mach ‖|M||x| + |rhs|‖`.
    pub fn rounding_floor(&self, x: &[f64]) -> f64 {
        let n = self.len();
        let mut acc: Vec<f64> = (0..n)
            .map(|i| self.diag[i].abs() * x[i].abs() + self.rhs[i].abs())
            .collect();
        let c = 2.0 * self.lambda.abs();
        self.for_each_pair(|i, j, w| {
            let w = c * w.abs();
            acc[i] += w * x[j].abs();
            acc[j] += w * x[i].abs();
        });
        ROUNDING_FACTOR * f64::EPSILON * norm(&acc)
    }

    pub fn relative_residual(&self, x: &[f64]) -> f64 {
        let r = norm(&self.residual(x));
        let b = norm(&self.rhs);
        if b == 0.0 {
            r
        } else {
            r / b
        }
    }
}

/// `‖rhs‖`, or 1 for a zero right-hand side.
pub(crate) fn rhs_scale(sys: &SparseSystem) -> f64 {
    let b = norm(&sys.rhs);
    if b > 0.0 {
        b
    } else {
        1.0
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Row-wise diagonal dominance `A_ii ≥ 2λ Σ_j |W_ij|`, strict through the data term.
pub fn spd_check(sys: &SparseSystem) -> SpdReport {
    let n = sys.len();
    let mut off = vec![0.0; n];
    let c = 2.0 * sys.lambda.abs();
    sys.for_each_pair(|i, j, w| {
        off[i] += c * w.abs();
        off[j] += c * w.abs();
    });
    let mut worst = f64::INFINITY;
    let mut worst_row = 0;
    for i in 0..n {
        let d = sys.diag[i];
        let margin = if d > 0.0 { (d - off[i]) / d } else { f64::NEG_INFINITY };
        if margin < worst {
            worst = margin;
            worst_row = i;
        }
    }
    SpdReport {
        // margins below this are indistinguishable from rounding in A_ii
        ok: worst > 1e-13,
        worst_margin: worst,
        worst_row,
    }
}

/// Jacobi-preconditioned conjugate gradients from `warm_start`.
///
/// Every iterate decreases the quadratic `½uᵀMu - uᵀrhs` (and hence `E_ulμ`)
/// relative to the warm start, whatever the stopping point.
pub fn solve(
    sys: &SparseSystem,
    warm_start: &[f64],
    opts: &SolveOptions,
) -> Result<(Vec<f64>, SolveReport)> {
    let n = sys.len();
    if warm_start.len() != n {
        return Err(Error::Shape(format!(
            "warm start has {} samples, system has {n}",
            warm_start.len()
        )));
    }
    let spd = spd_check(sys);
    if !spd.ok {
        return Err(Error::Contract(format!(
            "system is not diagonally dominant (row {}, margin {:.3e})",
            spd.worst_row, spd.worst_margin
        )));
    }
    let max_iters = opts.max_iters.unwrap_or(10 * n);
    let inv_diag: Vec<f64> = sys.diag.iter().map(|d| 1.0 / d).collect();
    let scale = rhs_scale(sys);

    let mut x = warm_start.to_vec();
    let mut r = sys.residual(&x);
    let mut rel = norm(&r) / scale;
    let mut target = opts.tol.max(sys.rounding_floor(&x) / scale);
    let mut history = vec![rel];
    let mut best = rel;
    let mut best_at = 0usize;
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(a, b)| a * b).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut q = vec![0.0; n];
    let mut iters = 0;

    while iters < max_iters {
        if rel <= target {
            // guard against drift of the recursively updated residual
            r = sys.residual(&x);
            rel = norm(&r) / scale;
            target = opts.tol.max(sys.rounding_floor(&x) / scale);
            if rel <= target {
                break;
            }
            z = r.iter().zip(&inv_diag).map(|(a, b)| a * b).collect();
            p.copy_from_slice(&z);
            rz = dot(&r, &z);
        }
        sys.apply(&p, &mut q);
        let pq = dot(&p, &q);
        if !(pq > 0.0) {
            // exact solution reached (p = 0) or loss of positivity in rounding
            break;
        }
        let alpha = rz / pq;
        for ((xi, ri), (pi, qi)) in x.iter_mut().zip(r.iter_mut()).zip(p.iter().zip(&q)) {
            *xi += alpha * pi;
            *ri -= alpha * qi;
        }
        iters += 1;
        rel = norm(&r) / scale;
        history.push(rel);
        if rel < best {
            best = rel;
            best_at = iters;
        } else if iters - best_at >= opts.stagnation_window {
            return Err(Error::Stagnation {
                iterations: iters,
                best,
                history,
            });
        }
        for ((zi, ri), di) in z.iter_mut().zip(&r).zip(&inv_diag) {
            *zi = ri * di;
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for (pi, zi) in p.iter_mut().zip(&z) {
            *pi = zi + beta * *pi;
        }
    }
    let final_rel = sys.relative_residual(&x);
    let floor = sys.rounding_floor(&x) / scale;
    Ok((
        x,
        SolveReport {
            iterations: iters,
            relative_residual: final_rel,
            floor,
            converged: final_rel <= opts.tol.max(floor),
        },
    ))
}

/// Dense reference solver for small systems (Gaussian elimination with
/// partial pivoting on the expanded matrix).
pub fn solve_dense(sys: &SparseSystem) -> Result<Vec<f64>> {
    let n = sys.len();
    if n > 4096 {
        return Err(Error::Contract(format!("dense solve of {n} unknowns")));
    }
    let mut m = sys.to_dense();
    let mut b = sys.rhs.clone();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&a, &c| m[a][col].abs().partial_cmp(&m[c][col].abs()).unwrap())
            .unwrap();
        if m[piv][col] == 0.0 {
            return Err(Error::Contract("singular system".into()));
        }
        m.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let factor = m[row][col] / m[col][col];
            if factor != 0.0 {
                for k in col..n {
                    m[row][k] -= factor * m[col][k];
                }
                b[row] -= factor * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| m[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / m[row][row];
    }
    Ok(x)
}

const DUMP_MAGIC: &[u8; 8] = b"THSYS\0\0\x01";

/// Writes the system as little-endian binary:
///
/// ```text
/// magic  8 bytes  "THSYS\0\0\x01"
/// u64    height, width, n = height·width, r_s, H (representative offsets)
/// i64×2  H offset pairs (dy, dx)
/// f64    lambda
/// f64×n  diagonal A - ... (i.e. M_ii)
/// f64×Hn W, offset-major
/// f64×n  right-hand side
/// ```
pub fn write_system<W: Write>(sys: &SparseSystem, mut out: W) -> std::io::Result<()> {
    out.write_all(DUMP_MAGIC)?;
    let e = sys.extent;
    for v in [e.height, e.width, e.pixels(), sys.r_s, sys.half.len()] {
        out.write_all(&(v as u64).to_le_bytes())?;
    }
    for &(dy, dx) in &sys.half {
        out.write_all(&(dy as i64).to_le_bytes())?;
        out.write_all(&(dx as i64).to_le_bytes())?;
    }
    out.write_all(&sys.lambda.to_le_bytes())?;
    for v in sys.diag.iter().chain(&sys.pairs).chain(&sys.rhs) {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_system<R: Read>(mut input: R) -> std::io::Result<SparseSystem> {
    use std::io::{Error as IoError, ErrorKind};
    let bad = |m: &str| IoError::new(ErrorKind::InvalidData, m.to_string());
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != DUMP_MAGIC {
        return Err(bad("not a system dump"));
    }
    let mut u64s = [0usize; 5];
    for v in &mut u64s {
        let mut b = [0u8; 8];
        input.read_exact(&mut b)?;
        *v = u64::from_le_bytes(b) as usize;
    }
    let [height, width, n, r_s, nh] = u64s;
    if height.checked_mul(width) != Some(n) || nh > 4 * (r_s + 1) * (r_s + 1) {
        return Err(bad("inconsistent header"));
    }
    let mut half = Vec::with_capacity(nh);
    for _ in 0..nh {
        let mut b = [0u8; 16];
        input.read_exact(&mut b)?;
        let dy = i64::from_le_bytes(b[..8].try_into().unwrap()) as isize;
        let dx = i64::from_le_bytes(b[8..].try_into().unwrap()) as isize;
        half.push((dy, dx));
    }
    let mut read_f64s = |count: usize| -> std::io::Result<Vec<f64>> {
        let mut buf = vec![0u8; count * 8];
        input.read_exact(&mut buf)?;
        Ok(buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    };
    let lambda = read_f64s(1)?[0];
    let diag = read_f64s(n)?;
    let pairs = read_f64s(nh * n)?;
    let rhs = read_f64s(n)?;
    Ok(SparseSystem {
        extent: Extent::new(height, width),
        r_s,
        lambda,
        half,
        diag,
        pairs,
        rhs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::energy_ulmu;
    use crate::grid::ImageGrid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_plane(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()
    }

    fn gray(e: Extent, data: Vec<f64>) -> ImageGrid {
        ImageGrid::new(e.height, e.width, 1, data).unwrap()
    }

    #[test]
    fn data_only_system_is_diagonal() {
        let e = Extent::new(3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_plane(&mut rng, 12);
        let p = SmoothingParams {
            lambda: 0.0,
            r_d: 0,
            ..Default::default()
        };
        let g = gray(e, f.clone());
        let w = WeightField::build(&g, e, &p).unwrap();
        let (sys, _) = assemble_from_iterate(&f, &f, &w, &p).unwrap();
        let dense = sys.to_dense();
        for i in 0..12 {
            for j in 0..12 {
                if i != j {
                    assert_eq!(dense[i][j], 0.0);
                }
            }
        }
        assert!(spd_check(&sys).ok);
        let (u, rep) = solve(&sys, &vec![0.0; 12], &SolveOptions::default()).unwrap();
        assert!(rep.converged);
        for i in 0..12 {
            assert!((u[i] - sys.rhs()[i] / sys.diag()[i]).abs() < 1e-12);
            assert!((u[i] - f[i]).abs() < 1e-12);
        }
    }

    fn three_pixel_system(lambda: f64, c_d: f64, c_s: f64) -> (SparseSystem, Vec<f64>) {
        let e = Extent::new(1, 3);
        let f = vec![0.1, 0.5, 0.6];
        let p = SmoothingParams {
            lambda,
            alpha: 0.0,
            r_d: 0,
            r_s: 1,
            ..Default::default()
        };
        let w = WeightField::build(&gray(e, f.clone()), e, &p).unwrap();
        let mut aux = AuxFields::zeros(e, 1, &p);
        aux.mu_d.iter_mut().for_each(|v| *v = c_d);
        aux.mu_s.iter_mut().for_each(|v| *v = c_s);
        (assemble(&f, &f, &aux, 0, &w, &p).unwrap(), f)
    }

    #[test]
    fn three_pixel_tridiagonal_by_hand() {
        let (lambda, c_d, c_s) = (0.7, 2.0, 3.0);
        let (sys, f) = three_pixel_system(lambda, c_d, c_s);
        let o = -2.0 * lambda * c_s;
        let expect = [
            [c_d + 2.0 * lambda * c_s, o, 0.0],
            [o, c_d + 4.0 * lambda * c_s, o],
            [0.0, o, c_d + 2.0 * lambda * c_s],
        ];
        let dense = sys.to_dense();
        for i in 0..3 {
            for j in 0..3 {
                assert!((dense[i][j] - expect[i][j]).abs() < 1e-15, "({i},{j})");
                assert_eq!(sys.entry(i, j), dense[i][j]);
            }
            assert!((sys.rhs()[i] - c_d * f[i]).abs() < 1e-15);
        }
        let oracle = solve_dense(&sys).unwrap();
        let opts = SolveOptions {
            tol: 1e-15,
            ..Default::default()
        };
        let (u, _) = solve(&sys, &f, &opts).unwrap();
        for i in 0..3 {
            assert!((u[i] - oracle[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn fused_and_explicit_assembly_agree_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..6 {
            let e = Extent::new(7, 9);
            let f = random_plane(&mut rng, e.pixels());
            let u = random_plane(&mut rng, e.pixels());
            let p = SmoothingParams {
                lambda: 1.3,
                b_d: 0.2,
                b_s: 0.15 + 0.1 * trial as f64,
                r_d: trial % 3,
                r_s: 1 + trial % 2,
                ..Default::default()
            };
            let fg = gray(e, f.clone());
            let ug = gray(e, u.clone());
            let w = WeightField::build(&fg, e, &p).unwrap();
            let (aux, tally_a) = AuxFields::from_iterate(&ug, &fg, &p).unwrap();
            let explicit = assemble(&f, &u, &aux, 0, &w, &p).unwrap();
            let (fused, tally_b) = assemble_from_iterate(&f, &u, &w, &p).unwrap();
            assert_eq!(explicit, fused);
            assert_eq!(tally_a, tally_b);
        }
    }

    #[test]
    fn assembled_matrix_is_exactly_symmetric_and_matches_apply() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let e = Extent::new(5, 6);
        let f = random_plane(&mut rng, 30);
        let u = random_plane(&mut rng, 30);
        let p = SmoothingParams {
            r_s: 2,
            b_s: 0.2,
            ..Default::default()
        };
        let w = WeightField::build(&gray(e, f.clone()), e, &p).unwrap();
        let mut aux = AuxFields::from_iterate(&gray(e, u.clone()), &gray(e, f.clone()), &p)
            .unwrap()
            .0;
        // break the directed symmetry on purpose
        for v in aux.mu_s.iter_mut() {
            *v *= rng.gen_range(0.5..1.0);
        }
        let sys = assemble(&f, &u, &aux, 0, &w, &p).unwrap();
        let m = sys.to_dense();
        let x = random_plane(&mut rng, 30);
        let mut y = vec![0.0; 30];
        sys.apply(&x, &mut y);
        for i in 0..30 {
            let mut yi = 0.0;
            for j in 0..30 {
                assert_eq!(m[i][j], m[j][i]);
                yi += m[i][j] * x[j];
            }
            assert!((yi - y[i]).abs() < 1e-9 * yi.abs().max(1.0));
        }
    }

    /// Central-difference gradient of `E_ulμ` in the plane values.
    fn fd_gradient(
        u: &[f64],
        e: Extent,
        aux: &AuxFields,
        f: &ImageGrid,
        w: &WeightField,
        p: &SmoothingParams,
        h: f64,
    ) -> Vec<f64> {
        (0..u.len())
            .map(|i| {
                let mut up = u.to_vec();
                up[i] += h;
                let mut dn = u.to_vec();
                dn[i] -= h;
                let ep = energy_ulmu(&gray(e, up), aux, f, w, p).unwrap();
                let em = energy_ulmu(&gray(e, dn), aux, f, w, p).unwrap();
                (ep - em) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn solution_zeroes_the_energy_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let e = Extent::new(4, 5);
        let f = random_plane(&mut rng, e.pixels());
        let p = SmoothingParams {
            lambda: 0.8,
            b_d: 0.3,
            b_s: 0.2,
            a_d: 0.01,
            a_s: 0.02,
            r_d: 1,
            r_s: 1,
            ..Default::default()
        };
        let fg = gray(e, f.clone());
        let w = WeightField::build(&fg, e, &p).unwrap();
        let u_prev: Vec<f64> = f.iter().map(|v| v + rng.gen_range(-0.2..0.2)).collect();
        let (aux, _) = AuxFields::from_iterate(&gray(e, u_prev.clone()), &fg, &p).unwrap();
        let sys = assemble(&f, &u_prev, &aux, 0, &w, &p).unwrap();
        let opts = SolveOptions {
            tol: 1e-14,
            ..Default::default()
        };
        let (u, _) = solve(&sys, &u_prev, &opts).unwrap();
        let g0 = fd_gradient(&u_prev, e, &aux, &fg, &w, &p, 1e-6);
        let g1 = fd_gradient(&u, e, &aux, &fg, &w, &p, 1e-6);
        let scale = 1.0 + g0.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let worst = g1.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(worst < 1e-5 * scale, "{worst} vs {scale}");
        // and matches the dense oracle
        let oracle = solve_dense(&sys).unwrap();
        for (a, b) in u.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn spd_check_flags_missing_data_term() {
        let (sys, _) = three_pixel_system(0.0, 1.0, 1.0);
        assert!(spd_check(&sys).ok);
        let (mut sys, _) = three_pixel_system(1.0, 1.0, 1.0);
        assert!(spd_check(&sys).ok);
        // remove the data contribution from every row
        for (i, d) in sys.diag_mut().iter_mut().enumerate() {
            *d -= 1.0;
            let _ = i;
        }
        let rep = spd_check(&sys);
        assert!(!rep.ok);
        assert!(rep.worst_margin.abs() < 1e-12);
        assert!(solve(&sys, &[0.0; 3], &SolveOptions::default()).is_err());
    }

    #[test]
    fn random_detail_system_converges() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let e = Extent::new(16, 16);
        let f = random_plane(&mut rng, e.pixels());
        let p = SmoothingParams {
            lambda: 20.0,
            alpha: 0.2,
            r_d: 2,
            r_s: 2,
            n_iters: 1,
            ..Default::default()
        };
        let fg = gray(e, f.clone());
        let w = WeightField::build(&fg, e, &p).unwrap();
        let (sys, _) = assemble_from_iterate(&f, &f, &w, &p).unwrap();
        let (u, rep) = solve(&sys, &f, &SolveOptions::default()).unwrap();
        assert!(rep.converged);
        assert!(rep.relative_residual <= 1e-8);
        assert!(sys.relative_residual(&u) <= 1e-8);
        assert!(rep.iterations <= 10 * e.pixels());
    }

    #[test]
    fn iteration_budget_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let e = Extent::new(8, 8);
        let f = random_plane(&mut rng, e.pixels());
        let p = SmoothingParams {
            lambda: 5.0,
            ..Default::default()
        };
        let w = WeightField::build(&gray(e, f.clone()), e, &p).unwrap();
        let u0: Vec<f64> = f.iter().map(|v| 1.0 - v).collect();
        let (sys, _) = assemble_from_iterate(&f, &u0, &w, &p).unwrap();
        let opts = SolveOptions {
            tol: 1e-14,
            max_iters: Some(2),
            ..Default::default()
        };
        let (_, rep) = solve(&sys, &u0, &opts).unwrap();
        assert_eq!(rep.iterations, 2);
        assert!(!rep.converged);
    }

    #[test]
    fn dump_round_trip() {
        let (sys, _) = three_pixel_system(0.4, 1.5, 2.5);
        let mut buf = Vec::new();
        write_system(&sys, &mut buf).unwrap();
        assert_eq!(&buf[..8], DUMP_MAGIC);
        assert_eq!(buf.len(), 8 + 5 * 8 + 16 * sys.half_offsets().len() + 8 * (1 + 3 + 3 * sys.half_offsets().len() + 3));
        let back = read_system(&buf[..]).unwrap();
        assert_eq!(back, sys);
        assert!(read_system(&buf[..20]).is_err());
        let mut corrupt = buf.clone();
        corrupt[0] = b'X';
        assert!(read_system(&corrupt[..]).is_err());
    }

    #[test]
    fn non_finite_inputs_are_rejected() {
        let e = Extent::new(2, 2);
        let f = vec![0.0, f64::NAN, 0.0, 0.0];
        let p = SmoothingParams::default();
        let w = WeightField::build(&gray(e, vec![0.0; 4]), e, &p).unwrap();
        assert!(matches!(
            assemble_from_iterate(&f, &[0.0; 4], &w, &p),
            Err(Error::NonFinite(_))
        ));
    }
}
