//! The objective and its two auxiliary relaxations.
//!
//! * `E_u(u)` sums truncated Huber penalties over data and smoothness pairs.
//! * `E_ul(u, l)` replaces each truncated penalty by `h(∇ - l) + (b - a/2)|l|₀`.
//! * `E_ulμ(u, l, μ)` further replaces `h(x)` by `μ x² + ψ(μ)`.
//!
//! For fixed `u`, the optimal `l` makes `E_ul = E_u` and the optimal `μ` makes
//! `E_ulμ = E_ul`; for any other choice they are upper bounds. The smoother
//! relies on this sandwich for monotone descent, and the audit mode checks it.

use std::io::Write;

use crate::error::{Error, Result};
use crate::fields::{check_pair, AuxFields};
use crate::grid::{ImageGrid, NeighborOffsets, SmoothingParams};
use crate::guidance::WeightField;
use crate::penalty::HuberSpec;

/// Energies and solver state of one outer iteration, measured at `u^k`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyReport {
    pub iteration: usize,
    pub e_u: f64,
    pub e_ul: f64,
    pub e_ulmu: f64,
    /// `E_ulμ(u^{k+1}, l^k, μ^k)`, after the solve. `None` on the final row.
    pub e_ulmu_after: Option<f64>,
    /// Worst relative residual over channels. `None` on the final row.
    pub residual: Option<f64>,
    pub millis: f64,
}

impl EnergyReport {
    pub const CSV_HEADER: &'static str = "k,e_u,e_ul,e_ulmu,residual,millis";

    pub fn csv_row(&self) -> String {
        let residual = self.residual.map(|r| format!("{r:.6e}")).unwrap_or_default();
        format!(
            "{},{:.17e},{:.17e},{:.17e},{},{:.3}",
            self.iteration, self.e_u, self.e_ul, self.e_ulmu, residual, self.millis
        )
    }
}

pub fn write_reports_csv<W: Write>(mut out: W, reports: &[EnergyReport]) -> std::io::Result<()> {
    writeln!(out, "{}", EnergyReport::CSV_HEADER)?;
    for r in reports {
        writeln!(out, "{}", r.csv_row())?;
    }
    Ok(())
}

fn check_inputs(
    u: &ImageGrid,
    f: &ImageGrid,
    weights: &WeightField,
    params: &SmoothingParams,
) -> Result<()> {
    check_pair(u, f)?;
    if weights.extent() != u.extent() || weights.radius() != params.r_s {
        return Err(Error::Shape(format!(
            "weight field is {} r_s={}, image is {} r_s={}",
            weights.extent(),
            weights.radius(),
            u.extent(),
            params.r_s
        )));
    }
    Ok(())
}

/// Shared summation skeleton: per pixel, data terms then `λ Σ ω · smooth`
/// terms, accumulated per row and then over rows. All three energies use it,
/// so identical terms give bit-identical totals.
fn accumulate(
    u: &ImageGrid,
    f: &ImageGrid,
    weights: &WeightField,
    params: &SmoothingParams,
    mut data_term: impl FnMut(usize, usize, usize, f64) -> Result<f64>,
    mut smooth_term: impl FnMut(usize, usize, usize, f64) -> Result<f64>,
) -> Result<f64> {
    let e = u.extent();
    let cn = u.channels();
    let wd = NeighborOffsets::data(params.r_d);
    let ws = weights.stencil().window();
    let mut total = 0.0;
    for c in 0..cn {
        for y in 0..e.height {
            let mut row = 0.0;
            for x in 0..e.width {
                let i = e.index(y, x);
                let ui = u.data()[i * cn + c];
                let mut data = 0.0;
                for (k, &(dy, dx)) in wd.offsets().iter().enumerate() {
                    if let Some(j) = e.shifted(y, x, dy, dx) {
                        data += data_term(c, i, k, ui - f.data()[j * cn + c])?;
                    }
                }
                let mut smooth = 0.0;
                for (k, &(dy, dx)) in ws.offsets().iter().enumerate() {
                    if let Some(j) = e.shifted(y, x, dy, dx) {
                        let w = weights.directed(i, j, k);
                        smooth += w * smooth_term(c, i, k, ui - u.data()[j * cn + c])?;
                    }
                }
                row += data + params.lambda * smooth;
            }
            total += row;
        }
    }
    Ok(total)
}

fn specs(params: &SmoothingParams) -> Result<(HuberSpec, HuberSpec)> {
    Ok((
        HuberSpec::new(params.a_d, params.b_d)?,
        HuberSpec::new(params.a_s, params.b_s)?,
    ))
}

/// `E_u(u)`.
pub fn energy_u(
    u: &ImageGrid,
    f: &ImageGrid,
    weights: &WeightField,
    params: &SmoothingParams,
) -> Result<f64> {
    check_inputs(u, f, weights, params)?;
    let (sd, ss) = specs(params)?;
    accumulate(
        u,
        f,
        weights,
        params,
        |_, _, _, g| Ok(sd.truncated(g)),
        |_, _, _, g| Ok(ss.truncated(g)),
    )
}

/// `E_ul(u, l^d, l^s)`; the `μ` fields of `aux` are ignored.
pub fn energy_ul(
    u: &ImageGrid,
    aux: &AuxFields,
    f: &ImageGrid,
    weights: &WeightField,
    params: &SmoothingParams,
) -> Result<f64> {
    check_inputs(u, f, weights, params)?;
    aux.check_shape(u, params)?;
    let (sd, ss) = specs(params)?;
    let term = |spec: HuberSpec, grad: f64, l: f64| {
        let charge = if l != 0.0 { spec.ceiling() } else { 0.0 };
        spec.huber(grad - l) + charge
    };
    accumulate(
        u,
        f,
        weights,
        params,
        |c, i, k, g| Ok(term(sd, g, aux.l_d[aux.data_index(c, i, k)])),
        |c, i, k, g| Ok(term(ss, g, aux.l_s[aux.smooth_index(c, i, k)])),
    )
}

/// `E_ulμ(u, l^d, l^s, μ^d, μ^s)`. Every in-bounds `μ` must lie in `(0, 1/(2a)]`.
pub fn energy_ulmu(
    u: &ImageGrid,
    aux: &AuxFields,
    f: &ImageGrid,
    weights: &WeightField,
    params: &SmoothingParams,
) -> Result<f64> {
    check_inputs(u, f, weights, params)?;
    aux.check_shape(u, params)?;
    let (sd, ss) = specs(params)?;
    let term = |spec: HuberSpec, grad: f64, l: f64, mu: f64| {
        if !spec.mu_in_domain(mu) {
            return Err(Error::Contract(format!(
                "mu = {mu} outside (0, {}]",
                spec.mu_max()
            )));
        }
        let r = grad - l;
        let charge = if l != 0.0 { spec.ceiling() } else { 0.0 };
        Ok(mu * r * r + spec.psi(mu) + charge)
    };
    accumulate(
        u,
        f,
        weights,
        params,
        |c, i, k, g| {
            let idx = aux.data_index(c, i, k);
            term(sd, g, aux.l_d[idx], aux.mu_d[idx])
        },
        |c, i, k, g| {
            let idx = aux.smooth_index(c, i, k);
            term(ss, g, aux.l_s[idx], aux.mu_s[idx])
        },
    )
}

/// Number of in-bounds directed data pairs and the sum of directed smoothness
/// weights; together they bound `E_u` from above when truncation is active.
pub fn truncation_ceiling(u: &ImageGrid, weights: &WeightField, params: &SmoothingParams) -> f64 {
    let e = u.extent();
    let wd = NeighborOffsets::data(params.r_d);
    let ws = weights.stencil().window();
    let mut pairs = 0usize;
    let mut wsum = 0.0;
    for y in 0..e.height {
        for x in 0..e.width {
            let i = e.index(y, x);
            pairs += wd
                .offsets()
                .iter()
                .filter(|&&(dy, dx)| e.shifted(y, x, dy, dx).is_some())
                .count();
            for (k, &(dy, dx)) in ws.offsets().iter().enumerate() {
                if let Some(j) = e.shifted(y, x, dy, dx) {
                    wsum += weights.directed(i, j, k);
                }
            }
        }
    }
    let c = u.channels() as f64;
    c * (pairs as f64 * (params.b_d - 0.5 * params.a_d)
        + params.lambda * wsum * (params.b_s - 0.5 * params.a_s))
}
