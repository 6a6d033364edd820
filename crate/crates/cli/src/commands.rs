use anyhow::{bail, Result};
use pat_lab::carleman::{compute_constants, ConvexWeight, friedrichs_constant, pointwise_carleman_check, CheckTimeGrid};
use pat_lab::config::{Scenario, ScenarioConfig};
use pat_lab::geodesics::{boundary_convexity_check, max_exit_time, tangency_scan, Medium};
use pat_lab::neumann::{observability_ratio, operator_norm_estimate, reconstruct, stability_experiment, Observation};
use pat_lab::norms::trace_h1_norm;
use pat_lab::wave::{flux_identity_residual, propagate_free};
use pat_lab::{build_disk_domain, CompactSupport, DomainMask, Error, Grid2D};
use serde::Serialize;
use serde_json::json;

use crate::output::OutputDir;

/// Result of a run that completed: either every hypothesis held, or the
/// report documents one that did not.
pub enum Verdict {
    Ok,
    Violation(String),
}

/// Grid hugging M, for commands that only look inside M and at ∂M.
fn compact_domain(cfg: &ScenarioConfig, h: f64) -> Result<(Grid2D, DomainMask, CompactSupport)> {
    let d = &cfg.domain;
    let g = Grid2D::centered(d.center, 1.1 * d.r_m + 8.0 * h, h)?;
    let (mask, support) = build_disk_domain(g, d.center, d.r_m, d.r_k, d.n_theta)?;
    Ok((g, mask, support))
}

#[derive(Serialize)]
struct EnergyRow {
    step: usize,
    t: f64,
    energy: f64,
    flux: f64,
}

pub fn forward(cfg: &ScenarioConfig, out: &mut OutputDir) -> Result<Verdict> {
    let sc = Scenario::build(cfg)?;
    let run = propagate_free(&sc.source, &sc.speed, sc.t_final, &sc.mask, &sc.solver_options())?;
    let dt = run.time_grid.dt;
    out.field("source", &sc.source)?;
    out.field("speed", sc.speed.field())?;
    out.trace("trace.csv", &run.trace)?;
    let rows: Vec<EnergyRow> = run
        .energy_log
        .iter()
        .zip(&run.flux_log)
        .enumerate()
        .map(|(step, (&energy, &flux))| EnergyRow { step, t: step as f64 * dt, energy, flux })
        .collect();
    out.table("energy.csv", &rows)?;
    out.image("final_u.pgm", &run.final_state.u)?;
    for (step, snap) in &run.snapshots {
        out.image(&format!("snapshots/u_{step:06}.pgm"), snap)?;
    }
    out.json(
        "forward.json",
        &json!({
            "t_final": sc.t_final,
            "max_exit_time": sc.max_exit_time,
            "dt": dt,
            "n_steps": run.time_grid.n_steps,
            "grid": sc.grid,
            "flux_identity_residual": flux_identity_residual(&run)?,
            "trace_h1": trace_h1_norm(&run.trace)?,
            "snapshots": run.snapshots.len(),
        }),
    )?;
    out.gnuplot(
        "trace.gp",
        "set datafile separator ','\nset xlabel 't'\nset ylabel 'theta'\nset view map\n\
         splot 'trace.csv' using 1:2:3 every ::1 with points pointtype 5 pointsize 0.3 palette notitle\n",
    )?;
    out.gnuplot(
        "energy.gp",
        "set datafile separator ','\nset xlabel 't'\n\
         plot 'energy.csv' using 2:3 every ::1 with lines title 'E(t)', '' using 2:4 every ::1 with lines title 'flux'\n",
    )?;
    Ok(Verdict::Ok)
}

#[derive(Serialize)]
struct IterateRow {
    m: usize,
    iterate_h1: f64,
    partial_sum_h1: f64,
    rel_error_h1: Option<f64>,
}

/// Measures with the configured speed and reconstructs with the same speed.
pub fn reconstruct_cmd(cfg: &ScenarioConfig, out: &mut OutputDir) -> Result<Verdict> {
    let sc = Scenario::build(cfg)?;
    let opts = pat_lab::wave::SolverOptions { record_energy: false, snapshot_stride: None, ..sc.solver_options() };
    let h = propagate_free(&sc.source, &sc.speed, sc.t_final, &sc.mask, &opts)?.trace;
    let r = &cfg.reconstruction;
    let (f_tilde, rep) = reconstruct(&h, &sc.speed, &sc.mask, r.tol, r.m_max, Some(&sc.source), opts.cfl_safety)?;
    out.field("reconstruction", &f_tilde)?;
    out.field("source", &sc.source)?;
    out.trace("trace.csv", &h)?;
    let rows: Vec<IterateRow> = (0..=rep.m_used)
        .map(|m| IterateRow {
            m,
            iterate_h1: rep.iterate_norms[m],
            partial_sum_h1: rep.partial_sum_norms[m],
            rel_error_h1: rep.error_history.get(m).copied(),
        })
        .collect();
    out.table("iterates.csv", &rows)?;
    // contraction factor of K from a seeded random start, the rate the series can hope for
    let k_norm = operator_norm_estimate(&sc.speed, &sc.mask, &sc.support, sc.t_final, 6, cfg.seeds.master, opts.cfl_safety)?;
    let obs = Observation::new(&sc.speed, &sc.mask, sc.t_final, opts.cfl_safety)?;
    out.json(
        "reconstruction.json",
        &json!({
            "t_final": sc.t_final,
            "report": rep,
            "k_norm_estimate": k_norm,
            "k_norm_seed": cfg.seeds.master,
            "observability_ratio": observability_ratio(&sc.source, &obs)?,
        }),
    )?;
    out.gnuplot(
        "iterates.gp",
        "set datafile separator ','\nset logscale y\nset xlabel 'm'\n\
         plot 'iterates.csv' using 1:2 every ::1 with linespoints title '|K^m A h|', \
         '' using 1:4 every ::1 with linespoints title 'relative error'\n",
    )?;
    Ok(Verdict::Ok)
}

pub fn stability(cfg: &ScenarioConfig, out: &mut OutputDir) -> Result<Verdict> {
    let sc = Scenario::build(cfg)?;
    let pert = sc.perturbation()?;
    let rows = stability_experiment(&sc.source, &sc.speed, &pert, &sc.mask, &sc.support, &sc.series_settings())?;
    out.table("stability.csv", &rows)?;
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    out.json(
        "stability.json",
        &json!({ "t_final": sc.t_final, "rows": rows.len(), "failed_rows": failed, "psi_sup": 1.0 }),
    )?;
    out.gnuplot(
        "stability.gp",
        "set datafile separator ','\nset xlabel 'eps'\nset ylabel 'H1 error'\n\
         plot 'stability.csv' using 1:4 every ::1 with linespoints notitle\n",
    )?;
    if failed > 0 {
        bail!("{failed} of {} stability rows failed; see stability.csv", rows.len());
    }
    Ok(Verdict::Ok)
}

/// Failed convexity or a critical point of the weight is a hypothesis report,
/// not an error.
fn hypothesis(e: Error) -> Result<String> {
    match e {
        Error::NotConvex(_) | Error::CriticalPoint { .. } => Ok(e.to_string()),
        other => Err(other.into()),
    }
}

pub fn carleman(cfg: &ScenarioConfig, out: &mut OutputDir) -> Result<Verdict> {
    let cc = &cfg.carleman;
    let h = 2.0 * cfg.domain.r_m / cc.n as f64;
    let (g, mask, _) = compact_domain(cfg, h)?;
    let c = cfg.speed.build(g)?;
    let d = &cfg.domain;
    let ell = ConvexWeight::quadratic(cfg.weight.as_ref().map_or([d.center[0] - 2.0 * d.r_m, d.center[1]], |w| w.x0));
    let fe = friedrichs_constant(&c, &mask)?;
    let k = match compute_constants(&ell, &c, &mask, fe.c_f) {
        Ok(k) => k,
        Err(e) => {
            let msg = hypothesis(e)?;
            out.json("carleman.json", &json!({ "friedrichs": fe, "violation": msg }))?;
            return Ok(Verdict::Violation(msg));
        }
    };
    let [cx, cy] = cfg.domain.center;
    let r = cfg.domain.r_m;
    let tm = 0.5 * cc.t_final;
    let u = move |t: f64, x: f64, y: f64| {
        let (x, y) = ((x - cx) / r, (y - cy) / r);
        let env = (-((x - 0.1).powi(2) + (y + 0.1).powi(2)) / 0.18 - ((t - tm) / (0.35 * cc.t_final)).powi(2) / 2.0).exp();
        (1.0 + 0.5 * x - 0.3 * y + 0.4 * t / cc.t_final + 0.2 * x * y) * env
    };
    let time = CheckTimeGrid { t0: 0.0, dt: cc.t_final / cc.steps as f64, n_steps: cc.steps };
    let check = pointwise_carleman_check(&u, &ell, &c, &mask, k.tau, k.rho, &time)?;
    if let Some(slice) = &check.residual_slice {
        out.image("residual_slice.pgm", slice)?;
    }
    out.json("carleman.json", &json!({ "constants": k, "friedrichs": fe, "pointwise_check": check }))?;
    if check.violations > 0 {
        return Ok(Verdict::Violation(format!(
            "{} of {} space-time nodes violate the pointwise inequality",
            check.violations, check.n_nodes
        )));
    }
    Ok(Verdict::Ok)
}

#[derive(Serialize)]
struct RayRow {
    x0: f64,
    y0: f64,
    angle: f64,
    exit_time: f64,
    exit_angle: f64,
    tangential: bool,
    trapped: bool,
}

pub fn geodesics(cfg: &ScenarioConfig, out: &mut OutputDir) -> Result<Verdict> {
    let (g, mask, support) = compact_domain(cfg, cfg.grid.h)?;
    let med = Medium::new(&cfg.speed.build(g)?);
    let rc = &cfg.rays;
    let exit = max_exit_time(&med, &support, &mask, rc.n_x, rc.n_dir, rc.dt)?;
    let scan = tangency_scan(&support, &med, &mask, rc.n_x, rc.n_dir, rc.dt)?;
    let conv = boundary_convexity_check(&med, &mask)?;
    let rows: Vec<RayRow> = scan
        .samples
        .iter()
        .map(|s| RayRow {
            x0: s.x0[0],
            y0: s.x0[1],
            angle: s.angle,
            exit_time: s.exit_time,
            exit_angle: s.exit_angle,
            tangential: s.tangential,
            trapped: s.trapped,
        })
        .collect();
    out.table("rays.csv", &rows)?;
    out.json(
        "geodesics.json",
        &json!({
            "max_exit_time": exit.max_exit_time,
            "practical_time": exit.practical_time,
            "trapped": exit.trapped,
            "n_trapped": exit.n_trapped,
            "n_reentering": exit.n_reentering,
            "n_tangential": scan.flagged.len(),
            "max_adjacent_jump": scan.max_adjacent_jump,
            "min_boundary_curvature": conv.min_kappa,
        }),
    )?;
    out.gnuplot(
        "rays.gp",
        "set datafile separator ','\nset xlabel 'launch angle'\nset ylabel 'exit time'\n\
         plot 'rays.csv' using 3:4 every ::1 with dots notitle\n",
    )?;
    if exit.trapped {
        return Ok(Verdict::Violation(format!("{} rays from K are trapped", exit.n_trapped)));
    }
    if !scan.flagged.is_empty() {
        return Ok(Verdict::Violation(format!("{} rays exit tangentially", scan.flagged.len())));
    }
    Ok(Verdict::Ok)
}

#[derive(Serialize)]
struct KappaRow {
    theta: f64,
    kappa: f64,
    probe_exits: bool,
}

pub fn convexity(cfg: &ScenarioConfig, out: &mut OutputDir) -> Result<Verdict> {
    let (g, mask, _) = compact_domain(cfg, cfg.grid.h)?;
    let med = Medium::new(&cfg.speed.build(g)?);
    let rep = boundary_convexity_check(&med, &mask)?;
    let rows: Vec<KappaRow> = mask
        .boundary()
        .iter()
        .zip(rep.kappa.iter().zip(&rep.probe_exits))
        .map(|(s, (&kappa, &probe_exits))| KappaRow { theta: s.theta, kappa, probe_exits })
        .collect();
    out.table("convexity.csv", &rows)?;
    out.json(
        "convexity.json",
        &json!({
            "min_kappa": rep.min_kappa,
            "argmin_theta": rep.argmin_theta,
            "convex": rep.convex,
            "consistent": rep.consistent,
            "disagreements": rep.disagreements.len(),
        }),
    )?;
    out.gnuplot(
        "convexity.gp",
        "set datafile separator ','\nset xlabel 'theta'\nset ylabel 'geodesic curvature'\n\
         plot 'convexity.csv' using 1:2 every ::1 with lines notitle, 0 notitle\n",
    )?;
    if !rep.consistent {
        bail!(
            "curvature formula and tangent-ray probe disagree at {} boundary samples",
            rep.disagreements.len()
        );
    }
    if !rep.convex {
        return Ok(Verdict::Violation(format!(
            "boundary is not strictly convex: min geodesic curvature {:.4} at theta = {:.4}",
            rep.min_kappa, rep.argmin_theta
        )));
    }
    Ok(Verdict::Ok)
}
