//! Leapfrog solver for `u_tt = c^2 Δu (+ F)` on a padded box with
//! homogeneous Dirichlet edges, with boundary measurement on the circle ∂M.
//!
//! The box emulates free space: as long as the padding between ∂M and the
//! box edge is at least `c_max T / 2`, reflections from the edge cannot
//! reach ∂M before `T`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::{Grid2D, ScalarField, SpeedField};
use crate::geometry::{CompactSupport, DomainMask};
use crate::interp::{apply_stencil, bilinear_weights, cubic_weights};
use crate::norms::{check_support, check_support_in_domain};
use crate::trace::BoundaryTrace;

pub const DEFAULT_CFL_SAFETY: f64 = 0.9;

/// Largest stable step of the 5-point leapfrog scheme, `h / (c_max sqrt 2)`.
pub fn cfl_limit(c_max: f64, h: f64) -> f64 {
    h / (c_max * std::f64::consts::SQRT_2)
}

/// `dt = safety * h / (c_max sqrt 2)`.
pub fn cfl_timestep(c: &SpeedField, h: f64, safety: f64) -> Result<f64> {
    if !(safety > 0.0 && safety < 1.0) {
        return Err(Error::InvalidArgument(format!("CFL safety must be in (0, 1), got {safety}")));
    }
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("grid spacing must be positive, got {h}")));
    }
    Ok(safety * cfl_limit(c.c_max(), h))
}

/// Uniform time levels `t_n = n dt`, `n = 0..=n_steps`, with `n_steps dt = T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimeGrid {
    pub dt: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    /// Shrinks the CFL step of the fastest speed so that it divides `t_final`.
    pub fn new(speeds: &[&SpeedField], safety: f64, t_final: f64) -> Result<Self> {
        if !(t_final > 0.0 && t_final.is_finite()) {
            return Err(Error::InvalidArgument(format!("final time must be positive, got {t_final}")));
        }
        let first = speeds
            .first()
            .ok_or_else(|| Error::InvalidArgument("at least one speed is required".into()))?;
        let h = first.grid().h;
        let c_max = speeds.iter().map(|c| c.c_max()).fold(0.0, f64::max);
        let dt = safety * cfl_limit(c_max, h);
        if !(safety > 0.0 && safety < 1.0) {
            return Err(Error::InvalidArgument(format!("CFL safety must be in (0, 1), got {safety}")));
        }
        let n_steps = ((t_final / dt) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
        Ok(Self { dt: t_final / n_steps as f64, n_steps })
    }

    pub fn t_final(&self) -> f64 {
        self.dt * self.n_steps as f64
    }

    pub fn validate(&self, c: &SpeedField) -> Result<()> {
        let limit = cfl_limit(c.c_max(), c.grid().h);
        if !(self.dt > 0.0) || self.dt > limit * (1.0 + 1e-12) {
            return Err(Error::CflViolation { dt: self.dt, limit });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub cfl_safety: f64,
    /// Record energy over M, the boundary flux and the normal derivative.
    pub record_energy: bool,
    pub snapshot_stride: Option<usize>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { cfl_safety: DEFAULT_CFL_SAFETY, record_energy: true, snapshot_stride: None }
    }
}

impl SolverOptions {
    pub fn measurement_only() -> Self {
        Self { record_energy: false, ..Self::default() }
    }
}

#[derive(Debug, Clone)]
pub struct WaveState {
    pub u: ScalarField,
    pub u_t: ScalarField,
    pub t: f64,
}

#[derive(Debug, Clone)]
pub struct SimulationRun {
    pub time_grid: TimeGrid,
    /// `u` at the circle samples, one row per time level.
    pub trace: BoundaryTrace,
    pub final_state: WaveState,
    /// Discrete `E(t_n) = ∫_M u_t^2 / c^2 + |∂u|^2 dx` per time level (empty unless recorded).
    pub energy_log: Vec<f64>,
    /// `∮ ∂_ν u u_t ds` per time level (empty unless recorded).
    pub flux_log: Vec<f64>,
    /// Outward normal derivative on ∂M (present when energy is recorded).
    pub normal_derivative: Option<BoundaryTrace>,
    pub snapshots: Vec<(usize, ScalarField)>,
}

/// Rectangular window `[i0, i0 + ni) x [j0, j0 + nj)` of grid nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Window {
    pub i0: usize,
    pub j0: usize,
    pub ni: usize,
    pub nj: usize,
}

impl Window {
    /// Smallest window containing the disk `support`, clipped to the grid interior.
    pub fn around(grid: &Grid2D, support: &CompactSupport) -> Self {
        let lo = grid.to_index_space([support.center[0] - support.radius, support.center[1] - support.radius]);
        let hi = grid.to_index_space([support.center[0] + support.radius, support.center[1] + support.radius]);
        let i0 = (lo[0].floor().max(1.0)) as usize;
        let j0 = (lo[1].floor().max(1.0)) as usize;
        let i1 = (hi[0].ceil() as usize).min(grid.nx - 2);
        let j1 = (hi[1].ceil() as usize).min(grid.ny - 2);
        Self { i0, j0, ni: i1 - i0 + 1, nj: j1 - j0 + 1 }
    }

    pub fn len(&self) -> usize {
        self.ni * self.nj
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn bounds(&self) -> [usize; 4] {
        [self.i0, self.i0 + self.ni - 1, self.j0, self.j0 + self.nj - 1]
    }
}

/// Right-hand side `F` of the inhomogeneous equation, sampled at solver time levels.
#[derive(Debug, Clone)]
pub enum SourceTerm {
    /// `F(t_n, x) = time[n] * space(x)`.
    Separable { space: ScalarField, time: Vec<f64> },
    /// Frame `n` holds `F(t_n, ·)` on `window`, row-major.
    Recorded { grid: Grid2D, window: Window, dt: f64, frames: Vec<f64> },
}

impl SourceTerm {
    pub fn separable(space: ScalarField, tg: &TimeGrid, profile: impl Fn(f64) -> f64) -> Self {
        let time = (0..=tg.n_steps).map(|n| profile(n as f64 * tg.dt)).collect();
        SourceTerm::Separable { space, time }
    }

    fn n_frames(&self) -> usize {
        match self {
            SourceTerm::Separable { time, .. } => time.len(),
            SourceTerm::Recorded { window, frames, .. } => frames.len() / window.len().max(1),
        }
    }

    fn grid(&self) -> &Grid2D {
        match self {
            SourceTerm::Separable { space, .. } => space.grid(),
            SourceTerm::Recorded { grid, .. } => grid,
        }
    }

    /// Space-time L2 norm with trapezoidal weights in time.
    pub fn l2_norm(&self, dt: f64) -> f64 {
        let n = self.n_frames();
        let tw = |k: usize| if k == 0 || k + 1 == n { 0.5 * dt } else { dt };
        match self {
            SourceTerm::Separable { space, time } => {
                let h = space.grid().h;
                let s2: f64 = space.values().iter().map(|v| v * v).sum::<f64>() * h * h;
                let t2: f64 = time.iter().enumerate().map(|(k, v)| tw(k) * v * v).sum();
                (s2 * t2).sqrt()
            }
            SourceTerm::Recorded { grid, window, frames, .. } => {
                let h = grid.h;
                frames
                    .chunks(window.len())
                    .enumerate()
                    .map(|(k, fr)| tw(k) * fr.iter().map(|v| v * v).sum::<f64>() * h * h)
                    .sum::<f64>()
                    .sqrt()
            }
        }
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        match self {
            SourceTerm::Separable { space, time } => {
                SourceTerm::Separable { space: space.scaled(alpha), time: time.clone() }
            }
            SourceTerm::Recorded { grid, window, dt, frames } => SourceTerm::Recorded {
                grid: *grid,
                window: *window,
                dt: *dt,
                frames: frames.iter().map(|v| alpha * v).collect(),
            },
        }
    }

    /// Adds `scale * F(t_n)` to `u`.
    fn add_to(&self, n: usize, scale: f64, u: &mut [f64], active: &[usize; 4]) {
        match self {
            SourceTerm::Separable { space, time } => {
                let a = scale * time[n];
                if a == 0.0 {
                    return;
                }
                let nx = space.grid().nx;
                let s = space.values();
                for j in active[2]..=active[3] {
                    for i in active[0]..=active[1] {
                        let k = j * nx + i;
                        u[k] += a * s[k];
                    }
                }
            }
            SourceTerm::Recorded { grid, window, frames, .. } => {
                let fr = &frames[n * window.len()..(n + 1) * window.len()];
                for b in 0..window.nj {
                    let row = (window.j0 + b) * grid.nx + window.i0;
                    for a in 0..window.ni {
                        u[row + a] += scale * fr[b * window.ni + a];
                    }
                }
            }
        }
    }

    fn support_box(&self) -> Option<[usize; 4]> {
        match self {
            SourceTerm::Separable { space, .. } => nonzero_box(space.grid(), space.values()),
            SourceTerm::Recorded { window, .. } => Some(window.bounds()),
        }
    }
}

fn nonzero_box(grid: &Grid2D, values: &[f64]) -> Option<[usize; 4]> {
    let mut b: Option<[usize; 4]> = None;
    for (k, v) in values.iter().enumerate() {
        if *v != 0.0 {
            let (i, j) = grid.ij(k);
            b = Some(match b {
                None => [i, i, j, j],
                Some([a, c, d, e]) => [a.min(i), c.max(i), d.min(j), e.max(j)],
            });
        }
    }
    b.map(|[i0, i1, j0, j1]| {
        [i0.max(1), i1.min(grid.nx - 2), j0.max(1), j1.min(grid.ny - 2)]
    })
}

fn union_box(a: Option<[usize; 4]>, b: Option<[usize; 4]>) -> Option<[usize; 4]> {
    match (a, b) {
        (Some(x), Some(y)) => Some([x[0].min(y[0]), x[1].max(y[1]), x[2].min(y[2]), x[3].max(y[3])]),
        (x, None) => x,
        (None, y) => y,
    }
}

/// Two-level leapfrog state. Only the nodes of a box that grows by one node
/// per step are updated; everything outside it is exactly zero.
#[derive(Debug, Clone)]
pub struct WaveStepper {
    grid: Grid2D,
    coef: Vec<f64>,
    dt: f64,
    prev: Vec<f64>,
    curr: Vec<f64>,
    active: Option<[usize; 4]>,
    started: bool,
    level: usize,
}

impl WaveStepper {
    pub fn new(u0: &ScalarField, c: &SpeedField, dt: f64) -> Result<Self> {
        u0.ensure_same_grid(c.field())?;
        let grid = *u0.grid();
        let limit = cfl_limit(c.c_max(), grid.h);
        if !(dt > 0.0) || dt > limit * (1.0 + 1e-12) {
            return Err(Error::CflViolation { dt, limit });
        }
        let r = dt / grid.h;
        let coef = c.values().iter().map(|c| c * c * r * r).collect();
        Ok(Self {
            grid,
            coef,
            dt,
            prev: vec![0.0; grid.len()],
            curr: u0.values().to_vec(),
            active: nonzero_box(&grid, u0.values()),
            started: false,
            level: 0,
        })
    }

    fn include(&mut self, b: Option<[usize; 4]>) {
        self.active = union_box(self.active, b);
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }
    pub fn level(&self) -> usize {
        self.level
    }
    pub fn current(&self) -> &[f64] {
        &self.curr
    }
    pub fn previous(&self) -> &[f64] {
        &self.prev
    }

    fn grow(&mut self) -> Option<[usize; 4]> {
        let g = self.grid;
        self.active = self.active.map(|[i0, i1, j0, j1]| {
            [i0.saturating_sub(1).max(1), (i1 + 1).min(g.nx - 2), j0.saturating_sub(1).max(1), (j1 + 1).min(g.ny - 2)]
        });
        self.active
    }

    /// Advances one level. The first step uses the Taylor start
    /// `u^1 = u^0 + dt^2/2 (c^2 Δu^0 + F^0)`, consistent with `u_t(0) = 0`.
    pub fn step(&mut self) {
        self.step_forced(None);
    }

    fn step_forced(&mut self, source: Option<(&SourceTerm, usize)>) {
        let Some(b) = self.grow() else {
            if let Some((s, _)) = source {
                self.include(s.support_box());
                if self.active.is_some() {
                    return self.step_forced(source);
                }
            }
            std::mem::swap(&mut self.prev, &mut self.curr);
            self.curr.iter_mut().for_each(|v| *v = 0.0);
            self.level += 1;
            self.started = true;
            return;
        };
        let nx = self.grid.nx;
        let (c, p) = (&self.curr, &mut self.prev);
        let half = if self.started { 1.0 } else { 0.5 };
        for j in b[2]..=b[3] {
            let row = j * nx;
            for k in row + b[0]..=row + b[1] {
                let lap = c[k - 1] + c[k + 1] + c[k - nx] + c[k + nx] - 4.0 * c[k];
                p[k] = if self.started {
                    2.0 * c[k] - p[k] + self.coef[k] * lap
                } else {
                    c[k] + 0.5 * self.coef[k] * lap
                };
            }
        }
        if let Some((s, n)) = source {
            s.add_to(n, half * self.dt * self.dt, p, &b);
        }
        std::mem::swap(&mut self.prev, &mut self.curr);
        self.started = true;
        self.level += 1;
    }

    /// Swaps the two levels so that subsequent steps run backward in time.
    pub fn reverse(&mut self) {
        std::mem::swap(&mut self.prev, &mut self.curr);
    }

    /// Conserved staggered energy `sum c^-2 ((u^{n+1}-u^n)/dt)^2 - <Δ_h u^n, u^{n+1}>`
    /// of the last two levels, over the whole box.
    pub fn energy(&self, c: &SpeedField) -> f64 {
        staggered_energy(&self.grid, &self.prev, &self.curr, c.values(), self.dt)
    }
}

fn staggered_energy(grid: &Grid2D, prev: &[f64], curr: &[f64], c: &[f64], dt: f64) -> f64 {
    let nx = grid.nx;
    let h = grid.h;
    let mut kin = 0.0;
    let mut pot = 0.0;
    for j in 1..grid.ny - 1 {
        for i in 1..nx - 1 {
            let k = j * nx + i;
            let d = (curr[k] - prev[k]) / dt;
            kin += d * d / (c[k] * c[k]);
            let lap = (prev[k - 1] + prev[k + 1] + prev[k - nx] + prev[k + nx] - 4.0 * prev[k]) / (h * h);
            pot -= lap * curr[k];
        }
    }
    (kin + pot) * h * h
}

/// Discrete energy between two consecutive levels on the full box.
pub fn discrete_energy(prev: &ScalarField, curr: &ScalarField, c: &SpeedField, dt: f64) -> Result<f64> {
    prev.ensure_same_grid(curr)?;
    prev.ensure_same_grid(c.field())?;
    Ok(staggered_energy(prev.grid(), prev.values(), curr.values(), c.values(), dt))
}

fn check_inputs(c: &SpeedField, mask: &DomainMask, tg: &TimeGrid) -> Result<()> {
    if c.grid() != mask.grid() {
        return Err(Error::GridMismatch);
    }
    tg.validate(c)?;
    let h = mask.grid().h;
    // one extra step is taken to centre the final time derivative
    let need = c.c_max() * (tg.t_final() + tg.dt) / 2.0 + 5.0 * h;
    if mask.padding() < need {
        return Err(Error::InsufficientPadding { have: mask.padding(), need });
    }
    Ok(())
}

/// Minimal grid half-width around the centre of M for a run of length `t_final`.
pub fn required_half_width(r_m: f64, c_max: f64, t_final: f64, h: f64) -> f64 {
    r_m + c_max * t_final / 2.0 + 7.0 * h
}

/// Evolves `u_tt = c^2 Δu` from `u(0) = f`, `u_t(0) = 0` and records `u` on ∂M.
pub fn propagate_free(
    f: &ScalarField,
    c: &SpeedField,
    t_final: f64,
    mask: &DomainMask,
    opts: &SolverOptions,
) -> Result<SimulationRun> {
    let tg = TimeGrid::new(&[c], opts.cfl_safety, t_final)?;
    propagate_free_on(f, c, &tg, mask, opts)
}

/// [`propagate_free`] on a prescribed time grid.
pub fn propagate_free_on(
    f: &ScalarField,
    c: &SpeedField,
    tg: &TimeGrid,
    mask: &DomainMask,
    opts: &SolverOptions,
) -> Result<SimulationRun> {
    f.ensure_same_grid(c.field())?;
    check_inputs(c, mask, tg)?;
    check_support_in_domain(f, mask)?;
    run(Some(f), None, c, tg, mask, opts, None)
}

/// Evolves `w_tt - c0^2 Δw = F` from zero Cauchy data.
pub fn propagate_source(
    source: &SourceTerm,
    c0: &SpeedField,
    tg: &TimeGrid,
    mask: &DomainMask,
    support: &CompactSupport,
    opts: &SolverOptions,
) -> Result<SimulationRun> {
    check_inputs(c0, mask, tg)?;
    if source.grid() != c0.grid() {
        return Err(Error::GridMismatch);
    }
    if source.n_frames() != tg.n_steps + 1 {
        return Err(Error::InvalidArgument(format!(
            "source has {} time samples, solver needs {}",
            source.n_frames(),
            tg.n_steps + 1
        )));
    }
    match source {
        SourceTerm::Separable { space, .. } => check_support(space, support)?,
        SourceTerm::Recorded { window, dt, .. } => {
            if (dt - tg.dt).abs() > 1e-12 * tg.dt {
                return Err(Error::InvalidArgument(format!(
                    "recorded source step {dt} differs from solver step {}",
                    tg.dt
                )));
            }
            if window.i0 == 0 || window.j0 == 0 || window.i0 + window.ni >= c0.grid().nx || window.j0 + window.nj >= c0.grid().ny
            {
                return Err(Error::InvalidArgument("source window touches the grid edge".into()));
            }
        }
    }
    run(None, Some(source), c0, tg, mask, opts, None)
}

/// Runs `propagate_free(f, c)` and records `F^n = (c^2 - c0^2) Δ_h u^n` on the
/// window around K. With this source, `propagate_source(F, c0)` on the same
/// time grid yields exactly the discrete `Λ_c f - Λ_c0 f`.
pub fn record_mismatch_source(
    f: &ScalarField,
    c: &SpeedField,
    c0: &SpeedField,
    tg: &TimeGrid,
    mask: &DomainMask,
    support: &CompactSupport,
    opts: &SolverOptions,
) -> Result<(SimulationRun, SourceTerm)> {
    c.check_reference_outside(support, c0)?;
    f.ensure_same_grid(c.field())?;
    check_inputs(c, mask, tg)?;
    tg.validate(c0)?;
    check_support_in_domain(f, mask)?;
    let grid = *c.grid();
    let window = Window::around(&grid, support);
    let h2 = grid.h * grid.h;
    let diff: Vec<f64> = (0..window.len())
        .map(|m| {
            let k = (window.j0 + m / window.ni) * grid.nx + window.i0 + m % window.ni;
            let (a, b) = (c.values()[k], c0.values()[k]);
            (a * a - b * b) / h2
        })
        .collect();
    let mut frames = Vec::with_capacity(window.len() * (tg.n_steps + 1));
    let mut observer = |n: usize, u: &[f64]| {
        if n > tg.n_steps {
            return;
        }
        let nx = grid.nx;
        for (m, d) in diff.iter().enumerate() {
            let k = (window.j0 + m / window.ni) * nx + window.i0 + m % window.ni;
            let lap = u[k - 1] + u[k + 1] + u[k - nx] + u[k + nx] - 4.0 * u[k];
            frames.push(d * lap);
        }
    };
    let run = run(Some(f), None, c, tg, mask, opts, Some(&mut observer))?;
    Ok((run, SourceTerm::Recorded { grid, window, dt: tg.dt, frames }))
}

/// Energy over M localised from the conserved staggered energy.
///
/// Each node owns half of its four edges; the level-`n` energy is the mean of
/// the staggered energies at `n - 1/2` and `n + 1/2`, weighted by the cut-cell
/// quadrature. Summed over the whole box this is exactly conserved, so over M
/// it changes only through the boundary flux.
struct LocalEnergy<'a> {
    inside: &'a [usize],
    weights: &'a [f64],
    inv_c2: Vec<f64>,
    nx: usize,
    inv_h2: f64,
    inv_dt2: f64,
}

impl<'a> LocalEnergy<'a> {
    fn new(mask: &'a DomainMask, c: &SpeedField, dt: f64) -> Self {
        let inside = mask.inside_nodes();
        let h = mask.grid().h;
        Self {
            inside,
            weights: mask.weights(),
            inv_c2: inside.iter().map(|&k| 1.0 / (c.values()[k] * c.values()[k])).collect(),
            nx: mask.grid().nx,
            inv_h2: 1.0 / (h * h),
            inv_dt2: 1.0 / (dt * dt),
        }
    }

    /// Contribution of the half level between `a = u^n` and `b = u^{n±1}`.
    fn half(&self, a: &[f64], b: &[f64]) -> f64 {
        let nx = self.nx;
        let mut total = 0.0;
        for (m, &k) in self.inside.iter().enumerate() {
            let d = b[k] - a[k];
            let kin = 0.5 * self.inv_c2[m] * d * d * self.inv_dt2;
            let mut pot = 0.0;
            for nb in [k - 1, k + 1, k - nx, k + nx] {
                pot += (a[nb] - a[k]) * (b[nb] - b[k]);
            }
            total += self.weights[k] * (kin + 0.25 * pot * self.inv_h2);
        }
        total
    }
}

struct FluxProbe {
    at: [(usize, f64); 16],
    in1: [(usize, f64); 16],
    in2: [(usize, f64); 16],
    delta: f64,
}

fn flux_probes(mask: &DomainMask) -> Result<Vec<FluxProbe>> {
    let g = mask.grid();
    let delta = g.h;
    mask.boundary()
        .iter()
        .map(|s| {
            let nu = mask.normal(s);
            let p = s.point;
            let q1 = [p[0] - delta * nu[0], p[1] - delta * nu[1]];
            let q2 = [p[0] - 2.0 * delta * nu[0], p[1] - 2.0 * delta * nu[1]];
            match (cubic_weights(g, p), cubic_weights(g, q1), cubic_weights(g, q2)) {
                (Some(at), Some(in1), Some(in2)) => Ok(FluxProbe { at, in1, in2, delta }),
                _ => Err(Error::GeometryDoesNotFit("boundary probe outside the grid".into())),
            }
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn run(
    init: Option<&ScalarField>,
    source: Option<&SourceTerm>,
    c: &SpeedField,
    tg: &TimeGrid,
    mask: &DomainMask,
    opts: &SolverOptions,
    mut observer: Option<&mut dyn FnMut(usize, &[f64])>,
) -> Result<SimulationRun> {
    let grid = *c.grid();
    let zero = ScalarField::zeros(grid);
    let mut st = WaveStepper::new(init.unwrap_or(&zero), c, tg.dt)?;
    if let Some(s) = source {
        st.include(s.support_box());
    }
    let n_steps = tg.n_steps;
    let n_th = mask.n_theta();
    let stencils: Vec<[(usize, f64); 4]> = mask
        .boundary()
        .iter()
        .map(|s| bilinear_weights(&grid, s.point).ok_or_else(|| Error::GeometryDoesNotFit("boundary sample outside grid".into())))
        .collect::<Result<_>>()?;
    let mut trace = BoundaryTrace::zeros(n_steps + 1, n_th, tg.dt, mask.radius(), mask.center());

    let record = opts.record_energy;
    let probes = if record { flux_probes(mask)? } else { Vec::new() };
    let local = LocalEnergy::new(mask, c, tg.dt);
    let mut boundary_u = Vec::new();
    let mut dnu = Vec::new();
    let mut energy_log = Vec::new();
    let mut snapshots = Vec::new();
    let mut before_last = Vec::new();

    let dt = tg.dt;
    for n in 0..=n_steps {
        let u = st.current();
        if let Some(obs) = observer.as_deref_mut() {
            obs(n, u);
        }
        for (k, stc) in stencils.iter().enumerate() {
            trace.row_mut(n)[k] = apply_stencil(u, stc);
        }
        if let Some(stride) = opts.snapshot_stride {
            if stride > 0 && n % stride == 0 {
                snapshots.push((n, ScalarField::from_raw(grid, u.to_vec())));
            }
        }
        if record {
            for p in &probes {
                let u0 = apply_stencil(u, &p.at);
                let u1 = apply_stencil(u, &p.in1);
                let u2 = apply_stencil(u, &p.in2);
                boundary_u.push(u0);
                dnu.push((3.0 * u0 - 4.0 * u1 + u2) / (2.0 * p.delta));
            }
            if n > 0 {
                energy_log.push(local.half(u, st.previous()));
            }
        }
        if n == n_steps {
            before_last = st.previous().to_vec();
        }
        st.step_forced(source.map(|s| (s, n)));
        if record {
            let b = local.half(st.previous(), st.current());
            if n == 0 {
                // u^{-1} = u^1 under the Taylor start
                energy_log.push(2.0 * b);
            } else {
                energy_log[n] += b;
            }
        }
    }
    // after the loop: level n_steps + 1 is current, n_steps previous
    let last = st.current();
    let u_final = st.previous().to_vec();
    let u_t: Vec<f64> = last.iter().zip(&before_last).map(|(a, b)| (a - b) / (2.0 * dt)).collect();

    let mut flux_log = Vec::new();
    let mut normal_derivative = None;
    if record {
        let mut extra = Vec::with_capacity(n_th);
        for p in &probes {
            extra.push(apply_stencil(last, &p.at));
        }
        let ds = mask.ds();
        for n in 0..=n_steps {
            let mut acc = 0.0;
            if n > 0 {
                for k in 0..n_th {
                    let up = if n == n_steps { extra[k] } else { boundary_u[(n + 1) * n_th + k] };
                    let um = boundary_u[(n - 1) * n_th + k];
                    acc += dnu[n * n_th + k] * (up - um) / (2.0 * dt);
                }
            }
            flux_log.push(acc * ds);
        }
        normal_derivative = Some(BoundaryTrace::new(dnu, n_steps + 1, n_th, dt, mask.radius(), mask.center())?);
    }

    Ok(SimulationRun {
        time_grid: *tg,
        trace,
        final_state: WaveState {
            u: ScalarField::from_raw(grid, u_final),
            u_t: ScalarField::from_raw(grid, u_t),
            t: tg.t_final(),
        },
        energy_log,
        flux_log,
        normal_derivative,
        snapshots,
    })
}

/// `max_n |E(t_n) - E(0) - 2 ∫_0^{t_n} ∮ ∂_ν u u_t| / E(0)`, trapezoidal in time.
///
/// With `g = c^-2 dx^2` and `mu = c^(n-2)`, `n = 2`, the weighted energy is
/// `∫ u_t^2/c^2 + |∂u|^2 dx` and the flux density `∂_ν u u_t dn` reduces to
/// the Euclidean `∂_n u u_t ds`, which is what the logs hold.
pub fn flux_identity_residual(run: &SimulationRun) -> Result<f64> {
    let e = &run.energy_log;
    let q = &run.flux_log;
    if e.is_empty() || q.len() != e.len() {
        return Err(Error::InvalidArgument("run has no energy/flux log; enable record_energy".into()));
    }
    let dt = run.time_grid.dt;
    let e0 = e[0];
    let mut integral = 0.0;
    let mut worst: f64 = 0.0;
    for n in 1..e.len() {
        integral += 0.5 * dt * (q[n - 1] + q[n]);
        worst = worst.max((e[n] - e0 - 2.0 * integral).abs());
    }
    Ok(if worst == 0.0 { 0.0 } else { worst / e0.max(f64::MIN_POSITIVE) })
}

/// Gaussian `A exp(-|x - x0|^2 / (2 sigma^2))` multiplied by a smooth cutoff
/// that is 1 on the inner 75% of K and 0 outside K.
pub fn gaussian_source(
    grid: Grid2D,
    support: &CompactSupport,
    center: [f64; 2],
    sigma: f64,
    amplitude: f64,
) -> Result<ScalarField> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("Gaussian width must be positive, got {sigma}")));
    }
    let kc = support.center;
    let rk = support.radius;
    Ok(ScalarField::from_fn(grid, |x, y| {
        let s = ((x - kc[0]).powi(2) + (y - kc[1]).powi(2)).sqrt() / rk;
        let cut = crate::field::smooth_cutoff(s, 0.75);
        if cut == 0.0 {
            return 0.0;
        }
        let r2 = (x - center[0]).powi(2) + (y - center[1]).powi(2);
        amplitude * (-r2 / (2.0 * sigma * sigma)).exp() * cut
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::SmoothBump;
    use crate::geometry::build_disk_domain;

    fn setup(h: f64, t_final: f64, c_max: f64) -> (DomainMask, CompactSupport) {
        let hw = required_half_width(1.0, c_max, t_final, h);
        let g = Grid2D::centered([0.0, 0.0], hw, h).unwrap();
        build_disk_domain(g, [0.0, 0.0], 1.0, 0.5, 128).unwrap()
    }

    #[test]
    fn cfl_formula() {
        let g = Grid2D::centered([0.0, 0.0], 1.0, 0.01).unwrap();
        let c = SpeedField::constant(g, 1.0).unwrap();
        let dt = cfl_timestep(&c, 0.01, 0.9).unwrap();
        assert!((dt - 0.9 * 0.01 / 2f64.sqrt()).abs() < 1e-15);
        let c2 = SpeedField::constant(g, 2.0).unwrap();
        assert!((cfl_timestep(&c2, 0.01, 0.9).unwrap() - dt / 2.0).abs() < 1e-15);
        assert!(cfl_timestep(&c, 0.01, 1.01).is_err());
    }

    #[test]
    fn time_grid_divides_final_time() {
        let g = Grid2D::centered([0.0, 0.0], 1.0, 0.01).unwrap();
        let c = SpeedField::constant(g, 1.0).unwrap();
        let tg = TimeGrid::new(&[&c], 0.9, 1.0).unwrap();
        assert!((tg.t_final() - 1.0).abs() < 1e-12);
        assert!(tg.dt <= cfl_timestep(&c, 0.01, 0.9).unwrap());
        let bad = TimeGrid { dt: 0.01, n_steps: 10 };
        assert!(matches!(bad.validate(&c), Err(Error::CflViolation { .. })));
    }

    #[test]
    fn zero_data_gives_zero_trace() {
        let (mask, _) = setup(1.0 / 32.0, 1.0, 1.0);
        let g = *mask.grid();
        let c = SpeedField::constant(g, 1.0).unwrap();
        let run = propagate_free(&ScalarField::zeros(g), &c, 1.0, &mask, &SolverOptions::default()).unwrap();
        assert_eq!(run.trace.max_abs(), 0.0);
        assert_eq!(run.final_state.u.max_abs(), 0.0);
        assert_eq!(flux_identity_residual(&run).unwrap(), 0.0);
    }

    #[test]
    fn padding_and_support_are_enforced() {
        let (mask, support) = setup(1.0 / 32.0, 1.0, 1.0);
        let g = *mask.grid();
        let c = SpeedField::constant(g, 1.0).unwrap();
        let f = gaussian_source(g, &support, [0.0, 0.0], 0.1, 1.0).unwrap();
        assert!(matches!(
            propagate_free(&f, &c, 3.0, &mask, &SolverOptions::default()),
            Err(Error::InsufficientPadding { .. })
        ));
        let wide = ScalarField::constant(g, 1.0);
        assert!(matches!(
            propagate_free(&wide, &c, 0.5, &mask, &SolverOptions::default()),
            Err(Error::SupportViolation { .. })
        ));
    }

    #[test]
    fn staggered_energy_is_conserved() {
        let h = 1.0 / 32.0;
        let g = Grid2D::centered([0.0, 0.0], 3.0, h).unwrap();
        let (_, support) = build_disk_domain(g, [0.0, 0.0], 1.0, 0.5, 64).unwrap();
        let c = SpeedField::with_bumps(g, 1.0, &[SmoothBump { center: [0.1, 0.0], radius: 0.4, amplitude: 0.2 }]).unwrap();
        let f = gaussian_source(g, &support, [0.0, 0.0], 0.1, 1.0).unwrap();
        let dt = cfl_timestep(&c, h, 0.9).unwrap();
        let mut st = WaveStepper::new(&f, &c, dt).unwrap();
        st.step();
        let e0 = st.energy(&c);
        // 1.5 time units keeps the front away from the box edge
        let steps = (1.5 / dt) as usize;
        for _ in 0..steps {
            st.step();
        }
        let rel = (st.energy(&c) - e0).abs() / e0;
        assert!(rel < 1e-6 * (steps as f64 / 1000.0).max(1.0), "relative drift {rel}");
    }

    #[test]
    fn scheme_is_time_reversible() {
        let h = 1.0 / 32.0;
        let g = Grid2D::centered([0.0, 0.0], 3.0, h).unwrap();
        let (_, support) = build_disk_domain(g, [0.0, 0.0], 1.0, 0.5, 64).unwrap();
        let c = SpeedField::with_bumps(g, 1.0, &[SmoothBump { center: [0.0, 0.1], radius: 0.4, amplitude: -0.1 }]).unwrap();
        let f = gaussian_source(g, &support, [0.1, 0.0], 0.12, 1.0).unwrap();
        let dt = cfl_timestep(&c, h, 0.9).unwrap();
        let mut st = WaveStepper::new(&f, &c, dt).unwrap();
        let n = 100;
        for _ in 0..n {
            st.step();
        }
        st.reverse();
        for _ in 0..n - 1 {
            st.step();
        }
        let err = st.current().iter().zip(f.values()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err < 1e-8 * f.max_abs(), "error {err}");
    }

    #[test]
    fn finite_propagation_speed() {
        let h = 1.0 / 32.0;
        let (mask, support) = setup(h, 0.6, 1.2);
        let g = *mask.grid();
        let c = SpeedField::with_bumps(g, 1.0, &[SmoothBump { center: [0.0, 0.0], radius: 0.45, amplitude: 0.2 }]).unwrap();
        let f = gaussian_source(g, &support, [0.0, 0.0], 0.08, 1.0).unwrap();
        let dt = cfl_timestep(&c, h, 0.9).unwrap();
        let mut st = WaveStepper::new(&f, &c, dt).unwrap();
        for n in 1..=60 {
            st.step();
            let t = n as f64 * dt;
            for (k, v) in st.current().iter().enumerate() {
                if support.distance(g.point(k)) > c.c_max() * t + 2.0 * h {
                    assert!(v.abs() <= 1e-10 * f.max_abs());
                }
            }
        }
    }

    #[test]
    fn forward_is_linear_and_deterministic() {
        let (mask, support) = setup(1.0 / 32.0, 1.0, 1.05);
        let g = *mask.grid();
        let c = SpeedField::with_bumps(g, 1.0, &[SmoothBump { center: [0.1, 0.1], radius: 0.3, amplitude: 0.05 }]).unwrap();
        let f1 = gaussian_source(g, &support, [0.0, 0.0], 0.1, 1.0).unwrap();
        let f2 = gaussian_source(g, &support, [0.15, -0.1], 0.08, -0.5).unwrap();
        let opts = SolverOptions::measurement_only();
        let r1 = propagate_free(&f1, &c, 1.0, &mask, &opts).unwrap();
        let r2 = propagate_free(&f2, &c, 1.0, &mask, &opts).unwrap();
        let sum = f1.add_scaled(&f2, 2.0).unwrap();
        let r3 = propagate_free(&sum, &c, 1.0, &mask, &opts).unwrap();
        let scale = r3.trace.max_abs();
        for ((a, b), s) in r1.trace.values().iter().zip(r2.trace.values()).zip(r3.trace.values()) {
            assert!((a + 2.0 * b - s).abs() <= 1e-10 * scale);
        }
        let again = propagate_free(&f1, &c, 1.0, &mask, &opts).unwrap();
        assert_eq!(again.trace, r1.trace);
    }

    #[test]
    fn even_data_gives_symmetric_trace() {
        let (mask, support) = setup(1.0 / 32.0, 1.0, 1.0);
        let g = *mask.grid();
        let c = SpeedField::with_bumps(g, 1.0, &[SmoothBump { center: [0.0, 0.2], radius: 0.25, amplitude: 0.05 }]).unwrap();
        let f = gaussian_source(g, &support, [0.0, 0.1], 0.1, 1.0).unwrap();
        let run = propagate_free(&f, &c, 1.0, &mask, &SolverOptions::measurement_only()).unwrap();
        let n = mask.n_theta();
        let scale = run.trace.max_abs();
        for t in 0..run.trace.n_t() {
            for k in 0..n {
                let m = (n / 2 + n - k) % n;
                assert!((run.trace.at(t, k) - run.trace.at(t, m)).abs() <= 1e-12 * scale);
            }
        }
        let u = &run.final_state.u;
        for j in 0..g.ny {
            for i in 0..g.nx {
                assert!((u.at(i, j) - u.at(g.nx - 1 - i, j)).abs() <= 1e-12 * scale.max(u.max_abs()));
            }
        }
    }

    #[test]
    fn flux_identity_before_arrival() {
        let (mask, support) = setup(1.0 / 64.0, 0.3, 1.0);
        let g = *mask.grid();
        let c = SpeedField::constant(g, 1.0).unwrap();
        let f = gaussian_source(g, &support, [0.0, 0.0], 0.06, 1.0).unwrap();
        let run = propagate_free(&f, &c, 0.3, &mask, &SolverOptions::default()).unwrap();
        assert!(run.flux_log.iter().all(|q| q.abs() < 1e-12));
        let r = flux_identity_residual(&run).unwrap();
        assert!(r <= 1e-3, "{r}");
    }

    #[test]
    fn source_is_linear_and_zero_source_gives_zero() {
        let (mask, support) = setup(1.0 / 32.0, 1.0, 1.0);
        let g = *mask.grid();
        let c0 = SpeedField::constant(g, 1.0).unwrap();
        let tg = TimeGrid::new(&[&c0], 0.9, 1.0).unwrap();
        let space = gaussian_source(g, &support, [0.1, 0.0], 0.1, 1.0).unwrap();
        let src = SourceTerm::separable(space, &tg, |t| (6.0 * t).sin() * t);
        let opts = SolverOptions::measurement_only();
        let a = propagate_source(&src, &c0, &tg, &mask, &support, &opts).unwrap();
        let b = propagate_source(&src.scaled(-3.0), &c0, &tg, &mask, &support, &opts).unwrap();
        let s = a.trace.max_abs();
        assert!(s > 0.0);
        for (x, y) in a.trace.values().iter().zip(b.trace.values()) {
            assert!((-3.0 * x - y).abs() <= 1e-10 * 3.0 * s);
        }
        let z = propagate_source(&src.scaled(0.0), &c0, &tg, &mask, &support, &opts).unwrap();
        assert_eq!(z.trace.max_abs(), 0.0);
        let short = SourceTerm::Separable { space: ScalarField::zeros(g), time: vec![0.0; 3] };
        assert!(propagate_source(&short, &c0, &tg, &mask, &support, &opts).is_err());
    }

    #[test]
    fn mismatch_source_reproduces_trace_difference() {
        let (mask, support) = setup(1.0 / 32.0, 1.5, 1.1);
        let g = *mask.grid();
        let c0 = SpeedField::constant(g, 1.0).unwrap();
        let c = SpeedField::with_bumps(g, 1.0, &[SmoothBump { center: [0.1, 0.0], radius: 0.35, amplitude: 0.1 }]).unwrap();
        let f = gaussian_source(g, &support, [0.0, 0.05], 0.1, 1.0).unwrap();
        let tg = TimeGrid::new(&[&c, &c0], 0.9, 1.5).unwrap();
        let opts = SolverOptions::measurement_only();
        let (run_c, src) = record_mismatch_source(&f, &c, &c0, &tg, &mask, &support, &opts).unwrap();
        let run_c0 = propagate_free_on(&f, &c0, &tg, &mask, &opts).unwrap();
        let w = propagate_source(&src, &c0, &tg, &mask, &support, &opts).unwrap();
        let diff = run_c.trace.sub(&run_c0.trace).unwrap();
        let err = w.trace.sub(&diff).unwrap().max_abs();
        assert!(diff.max_abs() > 1e-4);
        assert!(err <= 1e-10 * diff.max_abs(), "{err}");
    }
}
