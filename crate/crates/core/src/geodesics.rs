//! Rays of the metric `c^-2 dx^2`: Hamiltonian flow of `H = c^2 |ξ|^2 / 2`,
//! exit times from M, trapping and tangency diagnostics and the boundary
//! convexity check.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::SpeedField;
use crate::geometry::{CompactSupport, DomainMask};
use crate::interp::QuinticSpline;

/// Ratio of practical observability time to the longest exit time.
pub const PRACTICAL_TIME_FACTOR: f64 = 2.2;
/// Exit directions closer than this to the boundary tangent are flagged.
pub const TANGENCY_TOL: f64 = 1e-3;
/// Default integration step in metric time.
pub const DEFAULT_RAY_DT: f64 = 5e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RayState {
    pub x: [f64; 2],
    pub xi: [f64; 2],
    pub t: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RayPath {
    pub states: Vec<RayState>,
    /// State at the first crossing of ∂M, if reached before `t_max`.
    pub exit: Option<RayState>,
}

/// Quintic B-spline evaluation of `c` and `∇c`.
///
/// RK4 only keeps fourth order when `∇c` is smooth across grid lines; the
/// C1 Keys interpolant drops the exit times to roughly first order.
pub struct Medium {
    spline: QuinticSpline,
    c_min: f64,
    c_max: f64,
}

impl Medium {
    pub fn new(c: &SpeedField) -> Self {
        Self { spline: QuinticSpline::new(*c.grid(), c.values()), c_min: c.c_min(), c_max: c.c_max() }
    }

    pub fn eval(&self, x: [f64; 2]) -> Result<(f64, [f64; 2])> {
        self.spline.value_grad(x).ok_or(Error::RayLeftGrid { x: x[0], y: x[1] })
    }

    pub fn c_min(&self) -> f64 {
        self.c_min
    }

    pub fn c_max(&self) -> f64 {
        self.c_max
    }

    fn rhs(&self, s: &[f64; 4]) -> Result<[f64; 4]> {
        let (c, g) = self.eval([s[0], s[1]])?;
        let xi2 = s[2] * s[2] + s[3] * s[3];
        Ok([c * c * s[2], c * c * s[3], -xi2 * c * g[0], -xi2 * c * g[1]])
    }

    fn rk4(&self, s: &[f64; 4], h: f64) -> Result<[f64; 4]> {
        let add = |a: &[f64; 4], b: &[f64; 4], f: f64| [a[0] + f * b[0], a[1] + f * b[1], a[2] + f * b[2], a[3] + f * b[3]];
        let k1 = self.rhs(s)?;
        let k2 = self.rhs(&add(s, &k1, h / 2.0))?;
        let k3 = self.rhs(&add(s, &k2, h / 2.0))?;
        let k4 = self.rhs(&add(s, &k3, h))?;
        let mut out = *s;
        for i in 0..4 {
            out[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        Ok(out)
    }
}

fn level(mask: &DomainMask, x: [f64; 2]) -> f64 {
    let m = mask.center();
    (x[0] - m[0]).hypot(x[1] - m[1]) - mask.radius()
}

fn to_state(s: &[f64; 4], t: f64) -> RayState {
    RayState { x: [s[0], s[1]], xi: [s[2], s[3]], t }
}

/// Rescales `ξ` so that `c(x) |ξ| = 1`.
pub fn normalize_covector(med: &Medium, x: [f64; 2], xi: [f64; 2]) -> Result<[f64; 2]> {
    let n = xi[0].hypot(xi[1]);
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::InvalidArgument("covector must be nonzero".into()));
    }
    let (cx, _) = med.eval(x)?;
    Ok([xi[0] / (cx * n), xi[1] / (cx * n)])
}

/// Integrates the ray from `x0` with classical RK4 until it crosses ∂M or
/// reaches `t_max`. The crossing is located by Illinois regula falsi on the
/// length of a single RK4 step from the last inside state.
pub fn trace_ray(x0: [f64; 2], xi0: [f64; 2], med: &Medium, mask: &DomainMask, dt: f64, t_max: f64) -> Result<RayPath> {
    if !(dt > 0.0) || !(t_max > 0.0) {
        return Err(Error::InvalidArgument(format!("ray step and horizon must be positive (dt = {dt}, t_max = {t_max})")));
    }
    if level(mask, x0) > 1e-12 * mask.radius() {
        return Err(Error::InvalidArgument(format!("ray start ({}, {}) lies outside M", x0[0], x0[1])));
    }
    let xi = normalize_covector(med, x0, xi0)?;
    let mut s = [x0[0], x0[1], xi[0], xi[1]];
    let mut t = 0.0;
    let mut states = vec![to_state(&s, t)];
    while t < t_max {
        let h = dt.min(t_max - t);
        let next = med.rk4(&s, h)?;
        let f1 = level(mask, [next[0], next[1]]);
        if f1 > 0.0 {
            let (a, sa) = crossing(med, mask, &s, h)?;
            let exit = to_state(&sa, t + a);
            states.push(exit);
            return Ok(RayPath { states, exit: Some(exit) });
        }
        s = next;
        t += h;
        states.push(to_state(&s, t));
    }
    Ok(RayPath { states, exit: None })
}

fn crossing(med: &Medium, mask: &DomainMask, s: &[f64; 4], h: f64) -> Result<(f64, [f64; 4])> {
    let f = |a: f64| -> Result<(f64, [f64; 4])> {
        let st = if a == 0.0 { *s } else { med.rk4(s, a)? };
        Ok((level(mask, [st[0], st[1]]), st))
    };
    let (mut lo, mut hi) = (0.0, h);
    let (mut flo, mut slo) = f(lo)?;
    let (mut fhi, _) = f(hi)?;
    if flo >= 0.0 {
        return Ok((0.0, slo));
    }
    let mut side = 0i8;
    for _ in 0..200 {
        let m = (lo * fhi - hi * flo) / (fhi - flo);
        let (fm, sm) = f(m)?;
        if fm.abs() < 1e-15 || hi - lo < 1e-15 {
            return Ok((m, sm));
        }
        if fm < 0.0 {
            lo = m;
            flo = fm;
            slo = sm;
            if side == -1 {
                fhi /= 2.0;
            }
            side = -1;
        } else {
            hi = m;
            fhi = fm;
            if side == 1 {
                flo /= 2.0;
            }
            side = 1;
        }
    }
    Ok((lo, slo))
}

fn default_t_max(med: &Medium, mask: &DomainMask) -> f64 {
    20.0 * mask.radius() / med.c_min()
}

/// First positive time at which the unit-speed ray reaches ∂M.
pub fn exit_time(x0: [f64; 2], xi0: [f64; 2], med: &Medium, mask: &DomainMask, dt: f64) -> Result<f64> {
    let t_max = default_t_max(med, mask);
    trace_ray(x0, xi0, med, mask, dt, t_max)?.exit.map(|e| e.t).ok_or(Error::Trapped { t_max })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ExitSample {
    pub x0: [f64; 2],
    /// Launch direction angle.
    pub angle: f64,
    pub exit_time: f64,
    pub exit_point: [f64; 2],
    /// Angle between the exit velocity and the boundary tangent.
    pub exit_angle: f64,
    pub tangential: bool,
    pub trapped: bool,
    /// The straight continuation outside M meets M again within `2 R_M`.
    pub reenters: bool,
}

/// Traces one ray from `x0` with launch angle `angle` and classifies its exit.
pub fn exit_sample(x0: [f64; 2], angle: f64, med: &Medium, mask: &DomainMask, dt: f64) -> Result<ExitSample> {
    let t_max = default_t_max(med, mask);
    let path = trace_ray(x0, [angle.cos(), angle.sin()], med, mask, dt, t_max)?;
    let Some(e) = path.exit else {
        return Ok(ExitSample {
            x0,
            angle,
            exit_time: f64::INFINITY,
            exit_point: [f64::NAN; 2],
            exit_angle: f64::NAN,
            tangential: false,
            trapped: true,
            reenters: false,
        });
    };
    let m = mask.center();
    let r = (e.x[0] - m[0]).hypot(e.x[1] - m[1]);
    let nu = [(e.x[0] - m[0]) / r, (e.x[1] - m[1]) / r];
    // velocity is parallel to ξ in a conformal metric
    let vn = e.xi[0].hypot(e.xi[1]);
    let d = [e.xi[0] / vn, e.xi[1] / vn];
    let exit_angle = (d[0] * nu[0] + d[1] * nu[1]).abs().atan2((d[0] * nu[1] - d[1] * nu[0]).abs());
    Ok(ExitSample {
        x0,
        angle,
        exit_time: e.t,
        exit_point: e.x,
        exit_angle,
        tangential: exit_angle < TANGENCY_TOL,
        trapped: false,
        reenters: reenters(mask, e.x, d),
    })
}

/// Whether the segment `x + s d`, `0 < s <= 2 R`, passes strictly inside M.
fn reenters(mask: &DomainMask, x: [f64; 2], d: [f64; 2]) -> bool {
    let m = mask.center();
    let p = [x[0] - m[0], x[1] - m[1]];
    let b = p[0] * d[0] + p[1] * d[1];
    let cc = p[0] * p[0] + p[1] * p[1] - mask.radius().powi(2);
    // closest approach along s > 0
    let s_star = (-b).clamp(0.0, 2.0 * mask.radius());
    s_star > 1e-9 && cc + 2.0 * b * s_star + s_star * s_star < -1e-9 * mask.radius().powi(2)
}

/// Deterministic launch points: a quarter on a ring just inside ∂K, the rest
/// on a sunflower spiral filling K.
pub fn support_samples(k: &CompactSupport, n_x: usize) -> Vec<[f64; 2]> {
    let n_ring = n_x.div_ceil(4);
    let n_fill = n_x - n_ring;
    let ring_r = k.radius * (1.0 - 1e-12);
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let mut out: Vec<[f64; 2]> = (0..n_ring)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / n_ring as f64;
            [k.center[0] + ring_r * a.cos(), k.center[1] + ring_r * a.sin()]
        })
        .collect();
    out.extend((0..n_fill).map(|i| {
        let r = k.radius * ((i as f64 + 0.5) / n_fill as f64).sqrt();
        let a = golden * i as f64;
        [k.center[0] + r * a.cos(), k.center[1] + r * a.sin()]
    }));
    out
}

fn directions(n_dir: usize) -> impl Iterator<Item = f64> {
    (0..n_dir).map(move |j| std::f64::consts::TAU * j as f64 / n_dir as f64)
}

#[derive(Debug, Clone, Serialize)]
pub struct ExitTimeReport {
    pub max_exit_time: f64,
    pub argmax: Option<ExitSample>,
    pub trapped: bool,
    pub n_trapped: usize,
    pub n_reentering: usize,
    pub t_max: f64,
    /// `2.2 * max_exit_time`.
    pub practical_time: f64,
}

/// Longest exit time over `n_x` points of K times `n_dir` directions. Rays
/// still inside M at `t_max = 20 R_M / c_min` are reported as trapped.
pub fn max_exit_time(med: &Medium, k: &CompactSupport, mask: &DomainMask, n_x: usize, n_dir: usize, dt: f64) -> Result<ExitTimeReport> {
    if n_x == 0 || n_dir == 0 {
        return Err(Error::InvalidArgument("max_exit_time needs at least one point and one direction".into()));
    }
    let mut max = 0.0;
    let mut argmax = None;
    let mut n_trapped = 0;
    let mut n_reentering = 0;
    for x0 in support_samples(k, n_x) {
        for a in directions(n_dir) {
            let s = exit_sample(x0, a, med, mask, dt)?;
            if s.trapped {
                n_trapped += 1;
                continue;
            }
            n_reentering += s.reenters as usize;
            if s.exit_time > max {
                max = s.exit_time;
                argmax = Some(s);
            }
        }
    }
    Ok(ExitTimeReport {
        max_exit_time: max,
        argmax,
        trapped: n_trapped > 0,
        n_trapped,
        n_reentering,
        t_max: default_t_max(med, mask),
        practical_time: PRACTICAL_TIME_FACTOR * max,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TangencyScan {
    pub samples: Vec<ExitSample>,
    /// Indices into `samples` of tangential exits.
    pub flagged: Vec<usize>,
    /// Largest change of exit angle between neighbouring launch directions.
    pub max_adjacent_jump: f64,
}

/// Exit angles for `n_x` points of K times `n_dir` directions; exits within
/// 1e-3 rad of the boundary tangent are flagged.
pub fn tangency_scan(k: &CompactSupport, med: &Medium, mask: &DomainMask, n_x: usize, n_dir: usize, dt: f64) -> Result<TangencyScan> {
    let mut samples = Vec::with_capacity(n_x * n_dir);
    let mut jump: f64 = 0.0;
    for x0 in support_samples(k, n_x) {
        let start = samples.len();
        for a in directions(n_dir) {
            samples.push(exit_sample(x0, a, med, mask, dt)?);
        }
        let row = &samples[start..];
        for j in 0..row.len() {
            let (p, q) = (&row[j], &row[(j + 1) % row.len()]);
            if !p.trapped && !q.trapped {
                jump = jump.max((p.exit_angle - q.exit_angle).abs());
            }
        }
    }
    let flagged = samples.iter().enumerate().filter(|(_, s)| s.tangential).map(|(i, _)| i).collect();
    Ok(TangencyScan { samples, flagged, max_adjacent_jump: jump })
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvexityReport {
    /// Geodesic curvature of ∂M in `g` at each boundary sample.
    pub kappa: Vec<f64>,
    pub min_kappa: f64,
    pub argmin_theta: f64,
    /// Probe verdict per sample: the tangent ray leaves M.
    pub probe_exits: Vec<bool>,
    /// Samples where formula and probe disagree (ignoring `|κ| < tol`).
    pub disagreements: Vec<usize>,
    pub consistent: bool,
    pub convex: bool,
}

/// `κ_g = c (1/R - ∂_ν log c)` at every boundary sample, cross-checked by
/// launching both tangent rays and testing on which side of ∂M they are
/// after a short time.
pub fn boundary_convexity_check(med: &Medium, mask: &DomainMask) -> Result<ConvexityReport> {
    let r = mask.radius();
    let m = mask.center();
    let probe_t = 0.05 * r / med.c_max();
    let n_steps = 20;
    let h = probe_t / n_steps as f64;
    let mut kappa = Vec::with_capacity(mask.boundary().len());
    let mut probe_exits = Vec::with_capacity(kappa.capacity());
    for s in mask.boundary() {
        let (cv, g) = med.eval(s.point)?;
        let nu = [(s.point[0] - m[0]) / r, (s.point[1] - m[1]) / r];
        let dnu_log_c = (g[0] * nu[0] + g[1] * nu[1]) / cv;
        kappa.push(cv * (1.0 / r - dnu_log_c));
        let mut exits = true;
        for sign in [1.0, -1.0] {
            let tangent = [-sign * nu[1] / cv, sign * nu[0] / cv];
            let mut st = [s.point[0], s.point[1], tangent[0], tangent[1]];
            for _ in 0..n_steps {
                st = med.rk4(&st, h)?;
            }
            exits &= level(mask, [st[0], st[1]]) > 0.0;
        }
        probe_exits.push(exits);
    }
    let (argmin, &min_kappa) = kappa
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .ok_or_else(|| Error::InvalidArgument("mask has no boundary samples".into()))?;
    let tol = 1e-6 / r;
    let disagreements: Vec<usize> = kappa
        .iter()
        .zip(&probe_exits)
        .enumerate()
        .filter(|(_, (k, e))| k.abs() > tol && (**k > 0.0) != **e)
        .map(|(i, _)| i)
        .collect();
    Ok(ConvexityReport {
        argmin_theta: mask.boundary()[argmin].theta,
        min_kappa,
        consistent: disagreements.is_empty(),
        convex: min_kappa > 0.0,
        kappa,
        probe_exits,
        disagreements,
    })
}
