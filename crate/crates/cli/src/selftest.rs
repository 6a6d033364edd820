//! Curated trivial checks: zero data, constants, symmetry and the
//! closed-form cases every module must reproduce on the configured domain.

use std::f64::consts::{PI, SQRT_2, TAU};

use anyhow::Result;
use pat_lab::carleman::{carleman_tau, compute_constants, metric_hessian_bound, ConvexWeight};
use pat_lab::config::ScenarioConfig;
use pat_lab::geodesics::{boundary_convexity_check, exit_time, tangency_scan, Medium};
use pat_lab::neumann::reconstruct;
use pat_lab::norms::{h1_norm, trace_h1_norm};
use pat_lab::time_reversal::harmonic_extension;
use pat_lab::wave::{cfl_timestep, propagate_free, required_half_width, SolverOptions};
use pat_lab::{build_disk_domain, BoundaryTrace, Error, Grid2D, NodeClass, ScalarField, SpeedField};
use serde::Serialize;

#[derive(Debug, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub value: f64,
    pub expected: f64,
    pub tolerance: f64,
}

fn close(name: &'static str, value: f64, expected: f64, tolerance: f64) -> Check {
    Check { name, passed: (value - expected).abs() <= tolerance, value, expected, tolerance }
}

fn flag(name: &'static str, ok: bool) -> Check {
    let v = if ok { 1.0 } else { 0.0 };
    Check { name, passed: ok, value: v, expected: 1.0, tolerance: 0.0 }
}

pub fn run(cfg: &ScenarioConfig) -> Result<Vec<Check>> {
    let d = &cfg.domain;
    let h = cfg.grid.h;
    let t_zero = 0.5;
    let g = Grid2D::centered(d.center, required_half_width(d.r_m, 1.0, t_zero, h), h)?;
    let (mask, support) = build_disk_domain(g, d.center, d.r_m, d.r_k, d.n_theta)?;
    let one = SpeedField::constant(g, 1.0)?;
    let two = SpeedField::constant(g, 2.0)?;
    let mut out = Vec::new();

    let c_unit = SpeedField::constant(Grid2D::new(32, 32, 0.01, [0.0, 0.0])?, 1.0)?;
    out.push(close("cfl_dt_formula", cfl_timestep(&c_unit, 0.01, 0.9)?, 0.9 * 0.01 / SQRT_2, 1e-15));
    out.push(flag("cfl_rejects_safety_above_one", cfl_timestep(&c_unit, 0.01, 1.01).is_err()));

    out.push(flag("equal_radii_rejected", build_disk_domain(g, d.center, d.r_m, d.r_m, d.n_theta).is_err()));
    let centre = g.idx(((d.center[0] - g.origin[0]) / h).round() as usize, ((d.center[1] - g.origin[1]) / h).round() as usize);
    out.push(flag("centre_node_interior", mask.class(centre) == NodeClass::Interior));

    out.push(close("h1_of_zero", h1_norm(&ScalarField::zeros(g), &mask)?, 0.0, 0.0));
    out.push(close("h1_of_one_is_sqrt_area", h1_norm(&ScalarField::constant(g, 1.0), &mask)?, (PI * d.r_m * d.r_m).sqrt(), 4.0 * h));

    let n_t = 64;
    let dt = 0.05;
    let zero_tr = BoundaryTrace::zeros(n_t, d.n_theta, dt, d.r_m, d.center);
    out.push(close("trace_h1_of_zero", trace_h1_norm(&zero_tr)?, 0.0, 0.0));
    let ones = BoundaryTrace::new(vec![1.0; n_t * d.n_theta], n_t, d.n_theta, dt, d.r_m, d.center)?;
    let expect = (ones.duration() * TAU * d.r_m).sqrt();
    out.push(close("trace_h1_of_one", trace_h1_norm(&ones)?, expect, 1e-12 * expect));

    let run = propagate_free(&ScalarField::zeros(g), &one, t_zero, &mask, &SolverOptions::measurement_only())?;
    out.push(close("zero_source_zero_trace", run.trace.max_abs().max(run.final_state.u.max_abs()), 0.0, 0.0));

    let phi = harmonic_extension(&vec![1.0; mask.boundary().len()], &mask)?;
    let dev = mask.inside_nodes().iter().map(|&k| (phi.values()[k] - 1.0).abs()).fold(0.0, f64::max);
    out.push(close("harmonic_extension_of_one", dev, 0.0, 1e-9));

    let (f0, rep) = reconstruct(&zero_tr, &one, &mask, 1e-3, 5, None, cfg.solver.cfl_safety)?;
    out.push(flag("zero_data_reconstructs_zero", f0.max_abs() == 0.0 && rep.m_used == 0));

    let ell = ConvexWeight::quadratic([d.center[0] - 2.0 * d.r_m, d.center[1]]);
    out.push(close("euclidean_hessian_bound", metric_hessian_bound(&ell, &one, &mask)?, 0.99, 1e-12));
    let inside = compute_constants(&ConvexWeight::quadratic(d.center), &one, &mask, 1.0);
    out.push(flag("weight_centre_inside_rejected", matches!(inside, Err(Error::CriticalPoint { .. }))));
    out.push(close("tau_clamps_at_one", carleman_tau(3.5, 1.0, 0.01), 1.0, 0.0));

    let m1 = Medium::new(&one);
    let m2 = Medium::new(&two);
    let ray_dt = cfg.rays.dt;
    let t1 = exit_time(d.center, [0.6, 0.8], &m1, &mask, ray_dt)?;
    out.push(close("exit_from_centre_is_radius", t1, d.r_m, 1e-8 * d.r_m));
    let x = [d.center[0] + 0.3 * d.r_k, d.center[1] - 0.2 * d.r_k];
    let a = exit_time(x, [1.0, 0.3], &m1, &mask, ray_dt)?;
    let b = exit_time(x, [1.0, 0.3], &m2, &mask, ray_dt)?;
    out.push(close("double_speed_halves_exit_time", b, 0.5 * a, 1e-8 * a));
    let scan = tangency_scan(&support, &m1, &mask, 16, 36, ray_dt)?;
    out.push(flag("interior_support_no_tangency", scan.flagged.is_empty()));
    let conv = boundary_convexity_check(&m1, &mask)?;
    out.push(close("circle_curvature", conv.min_kappa, 1.0 / d.r_m, 1e-6 / d.r_m));
    out.push(flag("circle_probe_agrees", conv.convex && conv.consistent));
    Ok(out)
}
