//! Explicit Carleman and observability constants for the conformal metric
//! `g = c^-2 dx^2` with weight `mu = c^(n-2)`, and a pointwise numerical check
//! of the Carleman inequality.
//!
//! Conventions (n = 2, so `mu = 1`): `grad f = c^2 ∂f`, `|X|_g = |X| / c`,
//! `div_mu X = c^2 ∂_i (c^-2 X^i)`, `Δ_mu = c^2 Δ`, `dm = c^-2 dx`, `dn = c^-1 ds`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::{Grid2D, ScalarField, SpeedField};
use crate::geometry::DomainMask;
use crate::interp::{apply_stencil, bilinear_weights, cubic_weights};
use crate::linsolve::{pcg, CsrMatrix};

/// Margin turning grid minima into the strict bounds `D^2 ℓ > ρ`, `|grad ℓ| > r`.
pub const STRICT_MARGIN: f64 = 0.99;
/// Inflation of the discrete Friedrichs constant.
pub const FRIEDRICHS_INFLATION: f64 = 1.05;

#[derive(Debug, Clone, PartialEq)]
pub enum ConvexWeight {
    /// `scale |x - x0|^2 / 2 + shift`.
    Quadratic { x0: [f64; 2], scale: f64, shift: f64 },
    /// Nodal samples; derivatives by central differences.
    Sampled(ScalarField),
}

impl ConvexWeight {
    pub fn quadratic(x0: [f64; 2]) -> Self {
        ConvexWeight::Quadratic { x0, scale: 1.0, shift: 0.0 }
    }

    pub fn shifted(&self, s: f64) -> Self {
        match self {
            ConvexWeight::Quadratic { x0, scale, shift } => ConvexWeight::Quadratic { x0: *x0, scale: *scale, shift: shift + s },
            ConvexWeight::Sampled(f) => ConvexWeight::Sampled(ScalarField::from_fn(*f.grid(), |_, _| s).add_scaled(f, 1.0).unwrap()),
        }
    }

    pub fn scaled(&self, a: f64) -> Self {
        match self {
            ConvexWeight::Quadratic { x0, scale, shift } => ConvexWeight::Quadratic { x0: *x0, scale: scale * a, shift: shift * a },
            ConvexWeight::Sampled(f) => ConvexWeight::Sampled(f.scaled(a)),
        }
    }
}

/// Value and derivatives of the weight, the speed and `q = Δ_mu ℓ` at a point.
#[derive(Debug, Clone, Copy)]
struct Local {
    ell: f64,
    d_ell: [f64; 2],
    h_ell: [f64; 3],
    c: f64,
    d_log_c: [f64; 2],
    q: f64,
    d_q: [f64; 2],
}

impl Local {
    /// Smallest eigenvalue of `D_g^2 ℓ` relative to `g`.
    fn metric_hessian_min(&self) -> f64 {
        let [lx, ly] = self.d_ell;
        let [sx, sy] = self.d_log_c;
        let dot = sx * lx + sy * ly;
        // D_g^2 ℓ_ij = ∂_ij ℓ - Γ^k_ij ∂_k ℓ
        let a = self.h_ell[0] + 2.0 * lx * sx - dot;
        let b = self.h_ell[1] + lx * sy + ly * sx;
        let d = self.h_ell[2] + 2.0 * ly * sy - dot;
        let c2 = self.c * self.c;
        c2 * ((a + d) / 2.0 - (((a - d) / 2.0).powi(2) + b * b).sqrt())
    }

    fn grad_norm_g(&self) -> f64 {
        self.c * self.d_ell[0].hypot(self.d_ell[1])
    }

    fn grad_q_norm_g(&self) -> f64 {
        self.c * self.d_q[0].hypot(self.d_q[1])
    }
}

/// Derivative fields on the grid plus evaluation at nodes and off-grid points.
struct Prepared<'a> {
    weight: &'a ConvexWeight,
    grid: Grid2D,
    c: &'a [f64],
    d_log_c: [Vec<f64>; 2],
    sampled: Option<[Vec<f64>; 6]>,
    q: Vec<f64>,
    d_q: [Vec<f64>; 2],
}

fn central_x(grid: &Grid2D, f: &[f64]) -> [Vec<f64>; 2] {
    let (nx, ny, h) = (grid.nx, grid.ny, grid.h);
    let mut dx = vec![0.0; f.len()];
    let mut dy = vec![0.0; f.len()];
    for j in 1..ny - 1 {
        for i in 1..nx - 1 {
            let k = j * nx + i;
            dx[k] = (f[k + 1] - f[k - 1]) / (2.0 * h);
            dy[k] = (f[k + nx] - f[k - nx]) / (2.0 * h);
        }
    }
    [dx, dy]
}

impl<'a> Prepared<'a> {
    fn new(weight: &'a ConvexWeight, c: &'a SpeedField) -> Result<Self> {
        let grid = *c.grid();
        let log_c: Vec<f64> = c.values().iter().map(|v| v.ln()).collect();
        let d_log_c = central_x(&grid, &log_c);
        let (nx, h) = (grid.nx, grid.h);
        let sampled = match weight {
            ConvexWeight::Sampled(f) => {
                if f.grid() != &grid {
                    return Err(Error::GridMismatch);
                }
                let v = f.values();
                let [gx, gy] = central_x(&grid, v);
                let mut hxx = vec![0.0; v.len()];
                let mut hxy = vec![0.0; v.len()];
                let mut hyy = vec![0.0; v.len()];
                for j in 1..grid.ny - 1 {
                    for i in 1..nx - 1 {
                        let k = j * nx + i;
                        hxx[k] = (v[k + 1] - 2.0 * v[k] + v[k - 1]) / (h * h);
                        hyy[k] = (v[k + nx] - 2.0 * v[k] + v[k - nx]) / (h * h);
                        hxy[k] = (v[k + 1 + nx] - v[k + 1 - nx] - v[k - 1 + nx] + v[k - 1 - nx]) / (4.0 * h * h);
                    }
                }
                Some([v.to_vec(), gx, gy, hxx, hxy, hyy])
            }
            ConvexWeight::Quadratic { .. } => None,
        };
        let mut p = Self { weight, grid, c: c.values(), d_log_c, sampled, q: Vec::new(), d_q: [Vec::new(), Vec::new()] };
        p.q = (0..grid.len())
            .map(|k| {
                let (_, _, hs) = p.weight_at_node(k);
                p.c[k] * p.c[k] * (hs[0] + hs[2])
            })
            .collect();
        p.d_q = central_x(&grid, &p.q);
        Ok(p)
    }

    fn weight_at_node(&self, k: usize) -> (f64, [f64; 2], [f64; 3]) {
        match (self.weight, &self.sampled) {
            (ConvexWeight::Quadratic { .. }, _) => self.weight_at(self.grid.point(k)),
            (_, Some(s)) => (s[0][k], [s[1][k], s[2][k]], [s[3][k], s[4][k], s[5][k]]),
            _ => unreachable!(),
        }
    }

    fn weight_at(&self, p: [f64; 2]) -> (f64, [f64; 2], [f64; 3]) {
        match (self.weight, &self.sampled) {
            (ConvexWeight::Quadratic { x0, scale, shift }, _) => {
                let d = [p[0] - x0[0], p[1] - x0[1]];
                (scale * (d[0] * d[0] + d[1] * d[1]) / 2.0 + shift, [scale * d[0], scale * d[1]], [*scale, 0.0, *scale])
            }
            (_, Some(s)) => {
                let st = cubic_weights(&self.grid, p).expect("boundary point inside grid");
                let e = |f: &Vec<f64>| apply_stencil(f, &st);
                (e(&s[0]), [e(&s[1]), e(&s[2])], [e(&s[3]), e(&s[4]), e(&s[5])])
            }
            _ => unreachable!(),
        }
    }

    fn at_node(&self, k: usize) -> Local {
        let (ell, d_ell, h_ell) = self.weight_at_node(k);
        Local {
            ell,
            d_ell,
            h_ell,
            c: self.c[k],
            d_log_c: [self.d_log_c[0][k], self.d_log_c[1][k]],
            q: self.q[k],
            d_q: [self.d_q[0][k], self.d_q[1][k]],
        }
    }

    fn at_point(&self, p: [f64; 2]) -> Local {
        let (ell, d_ell, h_ell) = self.weight_at(p);
        let st = cubic_weights(&self.grid, p).expect("boundary point inside grid");
        let e = |f: &[f64]| apply_stencil(f, &st);
        let c = e(self.c);
        Local {
            ell,
            d_ell,
            h_ell,
            c,
            d_log_c: [e(&self.d_log_c[0]), e(&self.d_log_c[1])],
            q: c * c * (h_ell[0] + h_ell[2]),
            d_q: [e(&self.d_q[0]), e(&self.d_q[1])],
        }
    }

    /// Inside nodes of M followed by the circle samples.
    fn samples(&self, mask: &DomainMask) -> Vec<Local> {
        mask.inside_nodes()
            .iter()
            .map(|&k| self.at_node(k))
            .chain(mask.boundary().iter().map(|s| self.at_point(s.point)))
            .collect()
    }
}

fn check_grids(c: &SpeedField, mask: &DomainMask) -> Result<()> {
    if c.grid() != mask.grid() {
        return Err(Error::GridMismatch);
    }
    Ok(())
}

fn critical_point(weight: &ConvexWeight, mask: &DomainMask, prep: &Prepared<'_>) -> Option<[f64; 2]> {
    match weight {
        ConvexWeight::Quadratic { x0, scale, .. } => {
            let m = mask.center();
            let inside = (x0[0] - m[0]).hypot(x0[1] - m[1]) <= mask.radius();
            (inside || *scale == 0.0).then_some(*x0)
        }
        ConvexWeight::Sampled(_) => {
            let g = mask.grid();
            let nx = g.nx;
            for &k in mask.inside_nodes() {
                let (i, j) = g.ij(k);
                if i + 1 >= nx || j + 1 >= g.ny {
                    continue;
                }
                let corners = [k, k + 1, k + nx, k + nx + 1];
                if !corners.iter().all(|&m| mask.is_inside(m)) {
                    continue;
                }
                let d: Vec<[f64; 2]> = corners.iter().map(|&m| prep.weight_at_node(m).1).collect();
                let flips = |a: usize| {
                    let lo = d.iter().map(|v| v[a]).fold(f64::INFINITY, f64::min);
                    let hi = d.iter().map(|v| v[a]).fold(f64::NEG_INFINITY, f64::max);
                    lo <= 0.0 && hi >= 0.0
                };
                if flips(0) && flips(1) {
                    let p = g.point(k);
                    return Some([p[0] + 0.5 * g.h, p[1] + 0.5 * g.h]);
                }
            }
            None
        }
    }
}

/// `ρ = 0.99 min_M λ_min(D_g^2 ℓ)` with eigenvalues relative to `g`.
pub fn metric_hessian_bound(ell: &ConvexWeight, c: &SpeedField, mask: &DomainMask) -> Result<f64> {
    check_grids(c, mask)?;
    let prep = Prepared::new(ell, c)?;
    let raw = prep.samples(mask).iter().map(Local::metric_hessian_min).fold(f64::INFINITY, f64::min);
    if !(raw > 0.0) {
        return Err(Error::NotConvex(format!("smallest metric Hessian eigenvalue is {raw:e}")));
    }
    Ok(STRICT_MARGIN * raw)
}

/// `r = 0.99 min_M |grad ℓ|_g = 0.99 min_M c |∂ℓ|`.
pub fn gradient_bound(ell: &ConvexWeight, c: &SpeedField, mask: &DomainMask) -> Result<f64> {
    check_grids(c, mask)?;
    let prep = Prepared::new(ell, c)?;
    if let Some([x, y]) = critical_point(ell, mask, &prep) {
        return Err(Error::CriticalPoint { x, y });
    }
    let raw = prep.samples(mask).iter().map(Local::grad_norm_g).fold(f64::INFINITY, f64::min);
    if !(raw > 0.0) {
        return Err(Error::CriticalPoint { x: f64::NAN, y: f64::NAN });
    }
    Ok(STRICT_MARGIN * raw)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CarlemanConstants {
    pub rho: f64,
    pub r: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub b_ell: f64,
    pub beta_ell: f64,
    pub c_f: f64,
    pub tau: f64,
    /// Observability threshold `2 C_F (2 C2^2 τ + C3) e^{(B - β) τ} τ`.
    pub t_min: f64,
    /// `ln t_min`, finite even when `t_min` overflows.
    pub ln_t_min: f64,
}

/// `τ = max(3/ρ, C1 / (2 ρ r^2), 1)`.
pub fn carleman_tau(rho: f64, r: f64, c1: f64) -> f64 {
    (3.0 / rho).max(c1 / (2.0 * rho * r * r)).max(1.0)
}

/// Returns `(t_min, ln t_min)`.
pub fn observability_threshold(c_f: f64, c2: f64, c3: f64, b_ell: f64, beta_ell: f64, tau: f64) -> (f64, f64) {
    let pre = 2.0 * c_f * (2.0 * c2 * c2 * tau + c3) * tau;
    let expo = (b_ell - beta_ell) * tau;
    (pre * expo.exp(), pre.ln() + expo)
}

pub fn compute_constants(ell: &ConvexWeight, c: &SpeedField, mask: &DomainMask, c_f: f64) -> Result<CarlemanConstants> {
    if !(c_f >= 1.0) {
        return Err(Error::InvalidArgument(format!("Friedrichs constant must be at least 1, got {c_f}")));
    }
    let rho = metric_hessian_bound(ell, c, mask)?;
    let r = gradient_bound(ell, c, mask)?;
    let prep = Prepared::new(ell, c)?;
    let s = prep.samples(mask);
    let max = |f: &dyn Fn(&Local) -> f64| s.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
    let c1 = rho * rho + max(&|l| l.grad_q_norm_g().powi(2));
    let c2 = max(&|l| l.grad_norm_g() + 1.0);
    let c3 = max(&|l| (rho + l.q.abs()) / 2.0);
    let b_ell = 2.0 * max(&|l| l.ell);
    let beta_ell = -2.0 * max(&|l| -l.ell);
    let tau = carleman_tau(rho, r, c1);
    let (t_min, ln_t_min) = observability_threshold(c_f, c2, c3, b_ell, beta_ell, tau);
    Ok(CarlemanConstants { rho, r, c1, c2, c3, b_ell, beta_ell, c_f, tau, t_min, ln_t_min })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct FriedrichsEstimate {
    /// Smallest generalized eigenvalue of (gradient + boundary form, mass form).
    pub lambda_min: f64,
    /// `1 / λ_min`.
    pub raw: f64,
    /// `max(1, 1.05 / λ_min)`.
    pub c_f: f64,
    pub iterations: usize,
}

/// Discrete quadratic forms of the Friedrichs inequality.
pub struct FriedrichsForms {
    pub stiffness: CsrMatrix,
    /// Lumped mass.
    pub mass: Vec<f64>,
    /// Grid index of every unknown (the inside nodes).
    pub nodes: Vec<usize>,
}

/// `∫|grad φ|^2 dm + ∮ φ^2 dn` and `∫ φ^2 dm` with `dm = c^-2 dx`, `dn = c^-1 ds`.
///
/// Bilinear elements on every cell meeting M, with the gradient energy
/// integrated exactly over the cut cell; `|grad φ|_g^2 dm = |∂φ|^2 dx` for
/// n = 2. Cell corners outside M are linear extrapolations from two inside
/// nodes, which keeps sliver cells from decoupling the boundary values.
pub fn friedrichs_forms(c: &SpeedField, mask: &DomainMask) -> Result<FriedrichsForms> {
    check_grids(c, mask)?;
    let g = mask.grid();
    let (nx, h) = (g.nx, g.h);
    let [cx, cy] = mask.center();
    let r = mask.radius();
    let mut cells = Vec::new();
    for j in 0..g.ny - 1 {
        for i in 0..nx - 1 {
            let (xi, yj) = (g.x(i) - cx, g.y(j) - cy);
            let m = crate::geometry::rect_disk_moments(xi, xi + h, yj, yj + h, r);
            if m[0] > 0.0 {
                cells.push((g.idx(i, j), xi, yj, m));
            }
        }
    }
    // unknowns are the inside nodes; outside corners are linear extrapolations
    let nodes = mask.inside_nodes().to_vec();
    let mut index = vec![usize::MAX; g.len()];
    for (m, &k) in nodes.iter().enumerate() {
        index[k] = m;
    }
    let mut ext: std::collections::HashMap<usize, [(usize, f64); 2]> = std::collections::HashMap::new();
    let mut expand = |n: usize| -> Result<Vec<(usize, f64)>> {
        if index[n] != usize::MAX {
            return Ok(vec![(index[n], 1.0)]);
        }
        if let Some(e) = ext.get(&n) {
            return Ok(e.to_vec());
        }
        let (i, j) = g.ij(n);
        let p = g.point(n);
        let inward = [cx - p[0], cy - p[1]];
        let mut dirs: Vec<(i64, i64)> = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)].to_vec();
        let align = |d: &(i64, i64)| (d.0 as f64 * inward[0] + d.1 as f64 * inward[1]) / (d.0.abs() as f64 + d.1.abs() as f64).sqrt();
        dirs.sort_by(|a, b| align(b).partial_cmp(&align(a)).unwrap());
        for (di, dj) in dirs {
            let at = |s: i64| {
                let (ii, jj) = (i as i64 + s * di, j as i64 + s * dj);
                (ii >= 0 && jj >= 0 && (ii as usize) < nx && (jj as usize) < g.ny).then(|| g.idx(ii as usize, jj as usize))
            };
            if let (Some(a), Some(b)) = (at(1), at(2)) {
                if mask.is_inside(a) && mask.is_inside(b) {
                    let e = [(index[a], 2.0), (index[b], -1.0)];
                    ext.insert(n, e);
                    return Ok(e.to_vec());
                }
            }
        }
        Err(Error::GeometryDoesNotFit("no inside extrapolation for a cut cell corner".into()))
    };
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); nodes.len()];
    let alpha = [-1.0 / h, 1.0 / h, 0.0, 0.0];
    let beta = [-1.0 / h, 0.0, 1.0 / h, 0.0];
    let delta = [1.0 / (h * h), -1.0 / (h * h), -1.0 / (h * h), 1.0 / (h * h)];
    for &(k, xi, yj, m) in &cells {
        // moments in cell coordinates ξ = x - x_i, η = y - y_j
        let m0 = m[0];
        let mxi = m[1] - xi * m0;
        let meta = m[2] - yj * m0;
        let mxixi = m[3] - 2.0 * xi * m[1] + xi * xi * m0;
        let metaeta = m[4] - 2.0 * yj * m[2] + yj * yj * m0;
        // φ = φ00 + a ξ + b η + d ξη: |∇φ|^2 = (a + dη)^2 + (b + dξ)^2
        let mut corners = Vec::with_capacity(4);
        for n in [k, k + 1, k + nx, k + nx + 1] {
            corners.push(expand(n)?);
        }
        for p in 0..4 {
            for q in 0..4 {
                let v = m0 * (alpha[p] * alpha[q] + beta[p] * beta[q])
                    + meta * (alpha[p] * delta[q] + delta[p] * alpha[q])
                    + mxi * (beta[p] * delta[q] + delta[p] * beta[q])
                    + (mxixi + metaeta) * delta[p] * delta[q];
                for &(a, wa) in &corners[p] {
                    for &(b, wb) in &corners[q] {
                        rows[a].push((b, v * wa * wb));
                    }
                }
            }
        }
    }
    let cv = c.values();
    // boundary quadrature fine enough that every cut cell carries samples
    let n_b = mask.n_theta().max(8 * (std::f64::consts::TAU * r / h).ceil() as usize);
    let ds = std::f64::consts::TAU * r / n_b as f64;
    for q in 0..n_b {
        let th = std::f64::consts::TAU * q as f64 / n_b as f64;
        let point = [cx + r * th.cos(), cy + r * th.sin()];
        let st = bilinear_weights(g, point)
            .ok_or_else(|| Error::GeometryDoesNotFit("boundary sample outside the grid".into()))?;
        let cb = crate::interp::cubic(g, cv, point).unwrap_or_else(|| apply_stencil(cv, &st));
        let mut comb: Vec<(usize, f64)> = Vec::new();
        for &(n, v) in st.iter().filter(|&&(_, v)| v != 0.0) {
            comb.extend(expand(n)?.into_iter().map(|(a, w)| (a, w * v)));
        }
        let wb = ds / cb;
        for &(a, va) in &comb {
            for &(b, vb) in &comb {
                rows[a].push((b, wb * va * vb));
            }
        }
    }
    let w = mask.weights();
    let mass = nodes.iter().map(|&k| w[k] / (cv[k] * cv[k])).collect();
    Ok(FriedrichsForms { stiffness: CsrMatrix::from_rows(rows), mass, nodes })
}

/// Inverse iteration for the smallest generalized eigenvalue, to relative 1e-8.
pub fn friedrichs_constant(c: &SpeedField, mask: &DomainMask) -> Result<FriedrichsEstimate> {
    let forms = friedrichs_forms(c, mask)?;
    let n = forms.nodes.len();
    let a = &forms.stiffness;
    let m = &forms.mass;
    let m_norm = |x: &[f64]| x.iter().zip(m).map(|(v, w)| w * v * v).sum::<f64>().sqrt();
    let mut x = vec![1.0; n];
    let s = m_norm(&x);
    x.iter_mut().for_each(|v| *v /= s);
    let mut lambda = a.form(&x, &x);
    let max_iter = 200;
    for it in 1..=max_iter {
        let rhs: Vec<f64> = x.iter().zip(m).map(|(v, w)| v * w).collect();
        let mut y = x.clone();
        pcg(a, &rhs, &mut y, 1e-12, 20 * n + 100)?;
        let s = m_norm(&y);
        x = y.into_iter().map(|v| v / s).collect();
        let next = a.form(&x, &x);
        if (next - lambda).abs() <= 1e-8 * next.abs() {
            return Ok(FriedrichsEstimate {
                lambda_min: next,
                raw: 1.0 / next,
                c_f: (FRIEDRICHS_INFLATION / next).max(1.0),
                iterations: it,
            });
        }
        lambda = next;
    }
    Err(Error::EigenNotConverged { iterations: max_iter })
}

/// Space-time sampling of the pointwise check: levels `t0 + n dt`, `n = 0..=n_steps`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct CheckTimeGrid {
    pub t0: f64,
    pub dt: f64,
    pub n_steps: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct CarlemanCheckSample {
    pub tau: f64,
    pub rho: f64,
    pub c1: f64,
    pub n_nodes: usize,
    pub min_residual: f64,
    /// Smallest residual relative to the node's own error bound `δ`.
    pub min_scaled_residual: f64,
    pub violations: usize,
    pub violation_fraction: f64,
    /// Level at which the slices below are taken.
    pub slice_level: usize,
    #[serde(skip)]
    pub residual_slice: Option<ScalarField>,
    #[serde(skip)]
    pub theta_slice: Option<ScalarField>,
    #[serde(skip)]
    pub y_norm_slice: Option<ScalarField>,
}

struct Stride<'a> {
    grid: &'a Grid2D,
    c: &'a [f64],
    loc: &'a [Local],
    tau: f64,
    rho: f64,
    s: usize,
}

/// Per-node terms at a time level: `(ϑ, ϑ grad v, Y)` and `v_t`.
struct LevelFields {
    theta: Vec<f64>,
    w: [Vec<f64>; 2],
    y: [Vec<f64>; 2],
    vt: Vec<f64>,
}

impl Stride<'_> {
    fn spacing(&self) -> f64 {
        self.grid.h * self.s as f64
    }

    fn fields(&self, v_m: &[f64], v0: &[f64], v_p: &[f64], dt: f64, nodes: &[usize]) -> LevelFields {
        let n = v0.len();
        let (nx, hs) = (self.grid.nx, self.spacing());
        let off = self.s;
        let mut out = LevelFields {
            theta: vec![0.0; n],
            w: [vec![0.0; n], vec![0.0; n]],
            y: [vec![0.0; n], vec![0.0; n]],
            vt: vec![0.0; n],
        };
        for &k in nodes {
            let l = &self.loc[k];
            let c2 = self.c[k] * self.c[k];
            let vt = (v_p[k] - v_m[k]) / (2.0 * dt);
            let dv = [(v0[k + off] - v0[k - off]) / (2.0 * hs), (v0[k + off * nx] - v0[k - off * nx]) / (2.0 * hs)];
            // grad v = c^2 ∂v, (grad v, grad ℓ)_g = c^2 ∂v·∂ℓ, |grad v|_g^2 = c^2 |∂v|^2
            let gv_gl = c2 * (dv[0] * l.d_ell[0] + dv[1] * l.d_ell[1]);
            let gv2 = c2 * (dv[0] * dv[0] + dv[1] * dv[1]);
            let gl2 = l.grad_norm_g().powi(2);
            let theta = self.tau * ((l.q - self.rho) * v0[k] + 2.0 * gv_gl);
            // |grad v|^2 enters Y with a minus sign, as in the multiplier identity for
            // (grad v, grad ℓ) Δv; with a plus sign the inequality fails for generic u
            let ycoef = self.tau * (vt * vt - gv2 - (self.tau * self.rho - self.tau * self.tau * gl2) * v0[k] * v0[k]);
            out.theta[k] = theta;
            out.vt[k] = vt;
            for a in 0..2 {
                out.w[a][k] = theta * c2 * dv[a];
                out.y[a][k] = ycoef * c2 * l.d_ell[a];
            }
        }
        out
    }

    /// `div_mu X = c^2 ∂_i (c^-2 X^i)` by central differences.
    fn div(&self, x: &[Vec<f64>; 2], k: usize) -> f64 {
        let (nx, hs, off) = (self.grid.nx, self.spacing(), self.s);
        let f = |a: usize, m: usize| x[a][m] / (self.c[m] * self.c[m]);
        self.c[k] * self.c[k]
            * ((f(0, k + off) - f(0, k - off)) / (2.0 * hs) + (f(1, k + off * nx) - f(1, k - off * nx)) / (2.0 * hs))
    }
}

/// Evaluates both sides of the pointwise Carleman inequality at every
/// space-time node of M whose difference stencils (at twice the grid
/// spacing) fit in the grid, for a synthetic `u(t, x, y)`.
///
/// Each residual `LHS - RHS` is computed at strides 1 and 2; the error bound
/// is `δ = 2 |R_1 - R_2|` plus a roundoff floor proportional to the size of
/// the individual terms. A node violates the inequality if `R_1 < -δ`.
pub fn pointwise_carleman_check(
    u: &dyn Fn(f64, f64, f64) -> f64,
    ell: &ConvexWeight,
    c: &SpeedField,
    mask: &DomainMask,
    tau: f64,
    rho: f64,
    time: &CheckTimeGrid,
) -> Result<CarlemanCheckSample> {
    check_grids(c, mask)?;
    if !(tau > 0.0) || !(rho > 0.0) {
        return Err(Error::InvalidArgument(format!("Carleman parameters must be positive (tau = {tau}, rho = {rho})")));
    }
    if time.n_steps < 9 || !(time.dt > 0.0) {
        return Err(Error::InvalidArgument("pointwise check needs at least 9 time steps".into()));
    }
    let prep = Prepared::new(ell, c)?;
    let s = prep.samples(mask);
    let hess_min = s.iter().map(Local::metric_hessian_min).fold(f64::INFINITY, f64::min);
    if rho > hess_min {
        return Err(Error::NotConvex(format!("rho = {rho} exceeds the metric Hessian bound {hess_min}")));
    }
    let c1 = rho * rho + s.iter().map(|l| l.grad_q_norm_g().powi(2)).fold(0.0, f64::max);

    let g = *mask.grid();
    let nx = g.nx;
    let loc: Vec<Local> = (0..g.len()).map(|k| prep.at_node(k)).collect();
    let margin = 5;
    let check_nodes: Vec<usize> = mask
        .inside_nodes()
        .iter()
        .copied()
        .filter(|&k| {
            let (i, j) = g.ij(k);
            i >= margin && j >= margin && i + margin < g.nx && j + margin < g.ny
        })
        .collect();
    // nodes where ϑ, Y are needed: check nodes and their neighbours at distance <= 2
    let mut need = vec![false; g.len()];
    for &k in &check_nodes {
        for d in [0usize, 1, 2] {
            for m in [k + d, k - d, k + d * nx, k - d * nx] {
                need[m] = true;
            }
        }
    }
    let field_nodes: Vec<usize> = (0..g.len()).filter(|&k| need[k]).collect();
    let exp_tl: Vec<f64> = loc.iter().map(|l| (tau * l.ell).exp()).collect();

    let level = |t: f64| -> (Vec<f64>, Vec<f64>) {
        let mut uu = vec![0.0; g.len()];
        let mut vv = vec![0.0; g.len()];
        for &k in &field_nodes {
            let p = g.point(k);
            uu[k] = u(t, p[0], p[1]);
            vv[k] = exp_tl[k] * uu[k];
        }
        // stencils reach two nodes beyond field nodes at stride 2
        for &k in &field_nodes {
            for m in [k + 1, k - 1, k + nx, k - nx, k + 2, k - 2, k + 2 * nx, k - 2 * nx] {
                if !need[m] && uu[m] == 0.0 {
                    let p = g.point(m);
                    uu[m] = u(t, p[0], p[1]);
                    vv[m] = exp_tl[m] * uu[m];
                }
            }
        }
        (uu, vv)
    };

    let strides: Vec<Stride> = [1usize, 2]
        .iter()
        .map(|&s| Stride { grid: &g, c: c.values(), loc: &loc, tau, rho, s })
        .collect();

    let slice_level = time.n_steps / 2;
    let mut residual_slice = None;
    let mut theta_slice = None;
    let mut y_norm_slice = None;
    let mut min_residual = f64::INFINITY;
    let mut min_scaled = f64::INFINITY;
    let mut violations = 0usize;
    let mut count = 0usize;
    let t_at = |n: i64| time.t0 + n as f64 * time.dt;

    for n in 4..=(time.n_steps - 4) as i64 {
        let mut results: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(2);
        for st in &strides {
            let s = st.s as i64;
            let dts = time.dt * st.s as f64;
            let levels: Vec<(Vec<f64>, Vec<f64>)> = (-2..=2).map(|j| level(t_at(n + j * s))).collect();
            let (u_m, _) = &levels[1];
            let (u0, _) = &levels[2];
            let (u_p, _) = &levels[3];
            let lf_m = st.fields(&levels[0].1, &levels[1].1, &levels[2].1, dts, &field_nodes);
            let lf_0 = st.fields(&levels[1].1, &levels[2].1, &levels[3].1, dts, &field_nodes);
            let lf_p = st.fields(&levels[2].1, &levels[3].1, &levels[4].1, dts, &field_nodes);
            let hs = st.spacing();
            let off = st.s;
            let mut res = vec![0.0; check_nodes.len()];
            let mut scale = vec![0.0; check_nodes.len()];
            for (idx, &k) in check_nodes.iter().enumerate() {
                let l = &loc[k];
                let c2 = c.values()[k] * c.values()[k];
                let e2 = exp_tl[k] * exp_tl[k];
                let u_tt = (u_p[k] - 2.0 * u0[k] + u_m[k]) / (dts * dts);
                let lap = (u0[k + off] + u0[k - off] + u0[k + off * nx] + u0[k - off * nx] - 4.0 * u0[k]) / (hs * hs);
                let wave = e2 * (u_tt - c2 * lap).powi(2) / 2.0;
                let dt_p = (lf_p.theta[k] * lf_p.vt[k] - lf_m.theta[k] * lf_m.vt[k]) / (2.0 * dts);
                let div_w = st.div(&lf_0.w, k);
                let div_y = st.div(&lf_0.y, k);
                let lhs = wave - dt_p + div_w + div_y;
                let u_t = (u_p[k] - u_m[k]) / (2.0 * dts);
                let du = [(u0[k + off] - u0[k - off]) / (2.0 * hs), (u0[k + off * nx] - u0[k - off * nx]) / (2.0 * hs)];
                let gu2 = c2 * (du[0] * du[0] + du[1] * du[1]);
                let gl2 = l.grad_norm_g().powi(2);
                let rhs_a = e2 * (rho * tau - 1.0) * (u_t * u_t + gu2) / 2.0;
                let rhs_b = e2 * (2.0 * rho * gl2 * tau - c1) * tau * tau * u0[k] * u0[k];
                res[idx] = lhs - rhs_a - rhs_b;
                scale[idx] = wave.abs() + dt_p.abs() + div_w.abs() + div_y.abs() + rhs_a.abs() + rhs_b.abs();
            }
            if st.s == 1 && n as usize == slice_level {
                let mut r = vec![0.0; g.len()];
                let mut th = vec![0.0; g.len()];
                let mut yn = vec![0.0; g.len()];
                for (idx, &k) in check_nodes.iter().enumerate() {
                    r[k] = res[idx];
                    th[k] = lf_0.theta[k];
                    yn[k] = lf_0.y[0][k].hypot(lf_0.y[1][k]) / c.values()[k];
                }
                residual_slice = Some(ScalarField::new(g, r)?);
                theta_slice = Some(ScalarField::new(g, th)?);
                y_norm_slice = Some(ScalarField::new(g, yn)?);
            }
            results.push((res, scale));
        }
        let (r1, sc) = &results[0];
        let (r2, _) = &results[1];
        for idx in 0..r1.len() {
            let delta = 2.0 * (r1[idx] - r2[idx]).abs() + 1e-9 * sc[idx];
            min_residual = min_residual.min(r1[idx]);
            if delta > 0.0 {
                min_scaled = min_scaled.min(r1[idx] / delta);
            }
            if r1[idx] < -delta {
                violations += 1;
            }
            count += 1;
        }
    }
    Ok(CarlemanCheckSample {
        tau,
        rho,
        c1,
        n_nodes: count,
        min_residual,
        min_scaled_residual: min_scaled,
        violations,
        violation_fraction: violations as f64 / count.max(1) as f64,
        slice_level,
        residual_slice,
        theta_slice,
        y_norm_slice,
    })
}
