//! Modified time reversal `A_c h = v(0)`: the interior wave equation run
//! backward from `v(T) = φ`, `v_t(T) = 0`, where φ is the harmonic extension
//! of `h(T)`, with Dirichlet data `h` on ∂M.

use crate::error::{Error, Result};
use crate::field::{ScalarField, SpeedField};
use crate::geometry::{BoundaryNode, DomainMask, NodeClass};
use crate::interp::apply_stencil;
use crate::linsolve::{bicgstab, CsrMatrix};
use crate::trace::BoundaryTrace;
use crate::wave::{cfl_limit, TimeGrid};

pub const HARMONIC_TOL: f64 = 1e-10;

#[inline]
fn inject(b: &BoundaryNode, g: &[f64], v: &[f64]) -> f64 {
    (1.0 - b.inner_weight) * apply_stencil(g, &b.theta_stencil) + b.inner_weight * apply_stencil(v, &b.inner)
}

/// Discrete Dirichlet problem `Δφ = 0` in M, `φ = g` on ∂M.
///
/// Unknowns are all inside nodes. Interior rows are the 5-point Laplacian;
/// near-boundary rows impose the radial interpolation between `g(θ)` and
/// an interior point, which keeps the extension second order.
pub fn harmonic_extension(boundary_values: &[f64], mask: &DomainMask) -> Result<ScalarField> {
    if boundary_values.len() != mask.n_theta() {
        return Err(Error::InvalidArgument(format!(
            "expected {} boundary values, got {}",
            mask.n_theta(),
            boundary_values.len()
        )));
    }
    if boundary_values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite boundary value".into()));
    }
    let grid = *mask.grid();
    let inside = mask.inside_nodes();
    if inside.is_empty() || mask.interior_nodes().is_empty() {
        return Err(Error::GeometryDoesNotFit("domain has no interior nodes".into()));
    }
    let mut index = vec![usize::MAX; grid.len()];
    for (m, &k) in inside.iter().enumerate() {
        index[k] = m;
    }
    let nx = grid.nx;
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); inside.len()];
    let mut rhs = vec![0.0; inside.len()];
    for &k in mask.interior_nodes() {
        let m = index[k];
        rows[m] = vec![(m, 4.0), (index[k - 1], -1.0), (index[k + 1], -1.0), (index[k - nx], -1.0), (index[k + nx], -1.0)];
    }
    for b in mask.near_boundary() {
        let m = index[b.node];
        let mut row = vec![(m, 1.0)];
        row.extend(b.inner.iter().map(|&(j, w)| (index[j], -b.inner_weight * w)));
        rows[m] = row;
        rhs[m] = (1.0 - b.inner_weight) * apply_stencil(boundary_values, &b.theta_stencil);
    }
    let a = CsrMatrix::from_rows(rows);
    let mean = boundary_values.iter().sum::<f64>() / boundary_values.len() as f64;
    let mut x = vec![mean; inside.len()];
    let max_iter = 50 * ((inside.len() as f64).sqrt() as usize) + 1000;
    bicgstab(&a, &rhs, &mut x, HARMONIC_TOL, max_iter)?;
    let mut values = vec![0.0; grid.len()];
    for (m, &k) in inside.iter().enumerate() {
        values[k] = x[m];
    }
    ScalarField::new(grid, values)
}

/// `A_c h`: returns `v(0)` on the inside nodes of M (zero elsewhere).
///
/// The trace is used at its own time step when that step satisfies the CFL
/// limit of `c0`; otherwise it is resampled in time by linear interpolation
/// onto the CFL step for `cfl_safety`.
pub fn time_reverse(h: &BoundaryTrace, c0: &SpeedField, mask: &DomainMask, cfl_safety: f64) -> Result<ScalarField> {
    time_reverse_impl(h, c0, mask, cfl_safety, true)
}

/// Plain time reversal started from zero final data. Kept as a baseline for
/// comparison with the modified operator.
#[cfg_attr(not(test), allow(dead_code))]
pub(crate) fn time_reverse_plain(h: &BoundaryTrace, c0: &SpeedField, mask: &DomainMask, cfl_safety: f64) -> Result<ScalarField> {
    time_reverse_impl(h, c0, mask, cfl_safety, false)
}

fn time_reverse_impl(
    h: &BoundaryTrace,
    c0: &SpeedField,
    mask: &DomainMask,
    cfl_safety: f64,
    harmonic_start: bool,
) -> Result<ScalarField> {
    if c0.grid() != mask.grid() {
        return Err(Error::GridMismatch);
    }
    if h.n_theta() != mask.n_theta() || (h.radius() - mask.radius()).abs() > 1e-12 * mask.radius() {
        return Err(Error::DegenerateTrace("trace was not recorded on this boundary".into()));
    }
    if h.n_t() < 2 {
        return Err(Error::DegenerateTrace("time reversal needs at least two time levels".into()));
    }
    let grid = *mask.grid();
    let limit = cfl_limit(c0.c_max(), grid.h);
    let resampled;
    let h = if h.dt() <= limit * (1.0 + 1e-12) {
        h
    } else {
        let tg = TimeGrid::new(&[c0], cfl_safety, h.duration())?;
        resampled = h.resample(tg.n_steps)?;
        &resampled
    };
    let dt = h.dt();
    if dt > limit * (1.0 + 1e-12) {
        return Err(Error::CflViolation { dt, limit });
    }
    let n_last = h.n_t() - 1;
    let nx = grid.nx;
    let coef: Vec<f64> = c0.values().iter().map(|c| (c * dt / grid.h).powi(2)).collect();

    let mut curr = if harmonic_start {
        harmonic_extension(h.row(n_last), mask)?.into_values()
    } else {
        vec![0.0; grid.len()]
    };
    let mut prev = vec![0.0; grid.len()];
    let interior = mask.interior_nodes();
    for n in (0..n_last).rev() {
        let first = n + 1 == n_last;
        for &k in interior {
            let lap = curr[k - 1] + curr[k + 1] + curr[k - nx] + curr[k + nx] - 4.0 * curr[k];
            prev[k] = if first { curr[k] + 0.5 * coef[k] * lap } else { 2.0 * curr[k] - prev[k] + coef[k] * lap };
        }
        let g = h.row(n);
        for b in mask.near_boundary() {
            prev[b.node] = inject(b, g, &prev);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    debug_assert!(mask.classes().iter().zip(&curr).all(|(c, v)| *c != NodeClass::Exterior || *v == 0.0));
    ScalarField::new(grid, curr)
}
