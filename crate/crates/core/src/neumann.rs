//! Neumann-series inversion `f = Σ_m K^m A h` with `K = 1 - A Λ`, and the
//! speed-mismatch stability experiment built on it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::{random_bandlimited, ScalarField, SpeedField};
use crate::geometry::{CompactSupport, DomainMask};
use crate::norms::{check_support, h1_norm, trace_h1_norm};
use crate::time_reversal::time_reverse;
use crate::trace::BoundaryTrace;
use crate::wave::{cfl_limit, propagate_free_on, SolverOptions, TimeGrid};

/// Consecutive norm increases after which a series is declared divergent.
pub const DIVERGENCE_RUN: usize = 3;
/// Largest perturbation amplitude accepted by the stability experiment.
pub const MAX_EPS: f64 = 0.05;

/// Forward and backward solves of one series run share a single time grid.
#[derive(Debug, Clone)]
pub struct Observation<'a> {
    pub c0: &'a SpeedField,
    pub mask: &'a DomainMask,
    pub time_grid: TimeGrid,
    pub cfl_safety: f64,
}

impl<'a> Observation<'a> {
    pub fn new(c0: &'a SpeedField, mask: &'a DomainMask, t_final: f64, cfl_safety: f64) -> Result<Self> {
        let time_grid = TimeGrid::new(&[c0], cfl_safety, t_final)?;
        Ok(Self { c0, mask, time_grid, cfl_safety })
    }

    /// Uses the time grid of a recorded trace when it is stable for `c0`.
    pub fn for_trace(c0: &'a SpeedField, mask: &'a DomainMask, h: &BoundaryTrace, cfl_safety: f64) -> Result<Self> {
        let limit = cfl_limit(c0.c_max(), c0.grid().h);
        if h.dt() <= limit * (1.0 + 1e-12) {
            Ok(Self { c0, mask, time_grid: TimeGrid { dt: h.dt(), n_steps: h.n_t() - 1 }, cfl_safety })
        } else {
            Self::new(c0, mask, h.duration(), cfl_safety)
        }
    }

    /// `Λ_{c0} f`.
    pub fn measure(&self, f: &ScalarField) -> Result<BoundaryTrace> {
        let opts = SolverOptions { cfl_safety: self.cfl_safety, record_energy: false, snapshot_stride: None };
        Ok(propagate_free_on(f, self.c0, &self.time_grid, self.mask, &opts)?.trace)
    }

    /// `A_{c0} h`.
    pub fn reverse(&self, h: &BoundaryTrace) -> Result<ScalarField> {
        time_reverse(h, self.c0, self.mask, self.cfl_safety)
    }

    /// `K f = f - A Λ f`.
    pub fn apply_k(&self, f: &ScalarField) -> Result<ScalarField> {
        let back = self.reverse(&self.measure(f)?)?;
        f.sub(&back)
    }
}

/// `K_{c0} f = f - A_{c0} Λ_{c0} f` over `[0, t_final]`.
pub fn apply_k(f: &ScalarField, c0: &SpeedField, t_final: f64, mask: &DomainMask, cfl_safety: f64) -> Result<ScalarField> {
    Observation::new(c0, mask, t_final, cfl_safety)?.apply_k(f)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Tolerance,
    MaxTerms,
    Divergence,
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StopReason::Tolerance => "tolerance",
            StopReason::MaxTerms => "max_terms",
            StopReason::Divergence => "divergence",
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ReconstructionReport {
    /// `‖K^m A h‖_{H1}` for `m = 0..=m_used`.
    pub iterate_norms: Vec<f64>,
    /// `‖Σ_{j≤m} K^j A h‖_{H1}`.
    pub partial_sum_norms: Vec<f64>,
    pub m_used: usize,
    pub stop_reason: StopReason,
    /// `‖f̃ - f‖_{H1} / ‖f‖_{H1}` when the truth is supplied.
    pub rel_error_h1: Option<f64>,
    /// Per-iteration relative errors when the truth is supplied.
    pub error_history: Vec<f64>,
    /// `q / (1 - q) ‖g_m‖` from the last contraction ratio `q < 1`.
    pub tail_bound: Option<f64>,
}

impl ReconstructionReport {
    /// Ratios `‖g_m‖ / ‖g_{m-1}‖`.
    pub fn ratios(&self) -> Vec<f64> {
        self.iterate_norms.windows(2).map(|w| w[1] / w[0]).collect()
    }
}

/// `f̃ = Σ_{m≤M} K^m A h` with `K`, `A` built from `c0` on the trace's time window.
pub fn reconstruct(
    h: &BoundaryTrace,
    c0: &SpeedField,
    mask: &DomainMask,
    tol: f64,
    m_max: usize,
    truth: Option<&ScalarField>,
    cfl_safety: f64,
) -> Result<(ScalarField, ReconstructionReport)> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance must be positive, got {tol}")));
    }
    if m_max < 1 {
        return Err(Error::InvalidArgument("m_max must be at least 1".into()));
    }
    let obs = Observation::for_trace(c0, mask, h, cfl_safety)?;
    let truth_norm = truth.map(|f| h1_norm(f, mask)).transpose()?;
    let rel_err = |sum: &ScalarField| -> Result<Option<f64>> {
        match (truth, truth_norm) {
            (Some(f), Some(n)) => Ok(Some(h1_norm(&sum.sub(f)?, mask)? / n.max(f64::MIN_POSITIVE))),
            _ => Ok(None),
        }
    };

    let mut g = obs.reverse(h)?;
    let mut sum = g.clone();
    let mut iterate_norms = vec![h1_norm(&g, mask)?];
    let mut partial_sum_norms = vec![iterate_norms[0]];
    let mut error_history: Vec<f64> = rel_err(&sum)?.into_iter().collect();
    let mut stop_reason = StopReason::MaxTerms;
    let mut increases = 0;
    if iterate_norms[0] == 0.0 {
        stop_reason = StopReason::Tolerance;
    } else {
        for _m in 1..=m_max {
            g = obs.apply_k(&g)?;
            sum.add_assign_scaled(&g, 1.0)?;
            let gn = h1_norm(&g, mask)?;
            let sn = h1_norm(&sum, mask)?;
            let prev = *iterate_norms.last().unwrap();
            iterate_norms.push(gn);
            partial_sum_norms.push(sn);
            error_history.extend(rel_err(&sum)?);
            if gn <= tol * sn {
                stop_reason = StopReason::Tolerance;
                break;
            }
            increases = if gn > prev { increases + 1 } else { 0 };
            if increases >= DIVERGENCE_RUN {
                stop_reason = StopReason::Divergence;
                break;
            }
        }
    }
    let m_used = iterate_norms.len() - 1;
    let tail_bound = if m_used >= 1 {
        let q = iterate_norms[m_used] / iterate_norms[m_used - 1];
        (q < 1.0).then(|| q / (1.0 - q) * iterate_norms[m_used])
    } else {
        None
    };
    let report = ReconstructionReport {
        iterate_norms,
        partial_sum_norms,
        m_used,
        stop_reason,
        rel_error_h1: rel_err(&sum)?,
        error_history,
        tail_bound,
    };
    Ok((sum, report))
}

/// Smooth speed perturbation `c_ε = c0 (1 + ε ψ)`.
#[derive(Debug, Clone)]
pub struct PerturbationSpec {
    psi: ScalarField,
    pub eps: Vec<f64>,
}

impl PerturbationSpec {
    /// `psi` must be supported in K with `‖psi‖_∞ = 1`.
    pub fn new(psi: ScalarField, eps: Vec<f64>, support: &CompactSupport) -> Result<Self> {
        check_support(&psi, support)?;
        let m = psi.max_abs();
        if (m - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("perturbation profile must have unit sup-norm, got {m}")));
        }
        if eps.iter().any(|e| !e.is_finite()) {
            return Err(Error::InvalidArgument("non-finite perturbation amplitude".into()));
        }
        Ok(Self { psi, eps })
    }

    /// Rescales `profile` to unit sup-norm.
    pub fn normalized(profile: &ScalarField, eps: Vec<f64>, support: &CompactSupport) -> Result<Self> {
        let m = profile.max_abs();
        if m == 0.0 {
            return Err(Error::InvalidArgument("perturbation profile is zero".into()));
        }
        Self::new(profile.scaled(1.0 / m), eps, support)
    }

    pub fn psi(&self) -> &ScalarField {
        &self.psi
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StabilityRow {
    pub eps: f64,
    pub sup_c_diff: f64,
    pub trace_h1: f64,
    pub err_h1: f64,
    pub rel_err_h1: f64,
    /// `e / (ε ‖c0 ψ‖_∞ ‖h_ε‖^{1/2})`, undefined at `ε = 0`.
    pub ratio: Option<f64>,
    pub m_used: usize,
    pub stop_reason: Option<StopReason>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy)]
pub struct SeriesSettings {
    pub t_final: f64,
    pub tol: f64,
    pub m_max: usize,
    pub cfl_safety: f64,
}

/// For each ε: measure with `c_ε`, reconstruct with `c0`, record the H1 error.
/// All rows share one time grid stable for every `c_ε`, so the ε = 0 row is
/// the discretization floor of the others. Failures are reported per row.
pub fn stability_experiment(
    f: &ScalarField,
    c0: &SpeedField,
    pert: &PerturbationSpec,
    mask: &DomainMask,
    support: &CompactSupport,
    settings: &SeriesSettings,
) -> Result<Vec<StabilityRow>> {
    check_support(f, support)?;
    let speeds: Vec<Result<SpeedField>> = pert
        .eps
        .iter()
        .map(|&e| {
            if e.abs() > MAX_EPS {
                return Err(Error::InvalidArgument(format!("|eps| = {} exceeds {MAX_EPS}", e.abs())));
            }
            c0.perturbed(pert.psi(), e)
        })
        .collect();
    let refs: Vec<&SpeedField> = std::iter::once(c0).chain(speeds.iter().filter_map(|s| s.as_ref().ok())).collect();
    let tg = TimeGrid::new(&refs, settings.cfl_safety, settings.t_final)?;
    let f_norm = h1_norm(f, mask)?;
    let c0psi = c0
        .values()
        .iter()
        .zip(pert.psi().values())
        .fold(0.0f64, |m, (c, p)| m.max((c * p).abs()));
    let opts = SolverOptions { cfl_safety: settings.cfl_safety, record_energy: false, snapshot_stride: None };

    let rows = pert
        .eps
        .par_iter()
        .zip(speeds.par_iter())
        .map(|(&eps, speed)| {
            let attempt = || -> Result<StabilityRow> {
                let c = speed.as_ref().map_err(|e| Error::InvalidArgument(e.to_string()))?;
                c.check_reference_outside(support, c0)?;
                let h = propagate_free_on(f, c, &tg, mask, &opts)?.trace;
                let trace_h1 = trace_h1_norm(&h)?;
                let (ft, rep) = reconstruct(&h, c0, mask, settings.tol, settings.m_max, None, settings.cfl_safety)?;
                let err_h1 = h1_norm(&ft.sub(f)?, mask)?;
                let ratio = (eps != 0.0).then(|| err_h1 / (eps.abs() * c0psi * trace_h1.sqrt()));
                Ok(StabilityRow {
                    eps,
                    sup_c_diff: c.sup_diff(c0)?,
                    trace_h1,
                    err_h1,
                    rel_err_h1: err_h1 / f_norm,
                    ratio,
                    m_used: rep.m_used,
                    stop_reason: Some(rep.stop_reason),
                    error: None,
                })
            };
            attempt().unwrap_or_else(|e| StabilityRow {
                eps,
                sup_c_diff: f64::NAN,
                trace_h1: f64::NAN,
                err_h1: f64::NAN,
                rel_err_h1: f64::NAN,
                ratio: None,
                m_used: 0,
                stop_reason: None,
                error: Some(e.to_string()),
            })
        })
        .collect();
    Ok(rows)
}

#[derive(Debug, Clone, Serialize)]
pub struct AmplitudeRow {
    pub amplitude: f64,
    pub trace_h1: f64,
    pub err_h1: f64,
    /// `e / ‖h‖^{1/2}`.
    pub ratio_sqrt: f64,
    /// `e / ‖h‖`.
    pub ratio_linear: f64,
}

/// Secondary sweep over the source amplitude at a fixed mismatch ε.
pub fn amplitude_sweep(
    f: &ScalarField,
    c0: &SpeedField,
    psi: &ScalarField,
    eps: f64,
    amplitudes: &[f64],
    mask: &DomainMask,
    settings: &SeriesSettings,
) -> Result<Vec<AmplitudeRow>> {
    let c = c0.perturbed(psi, eps)?;
    let tg = TimeGrid::new(&[c0, &c], settings.cfl_safety, settings.t_final)?;
    let opts = SolverOptions { cfl_safety: settings.cfl_safety, record_energy: false, snapshot_stride: None };
    amplitudes
        .par_iter()
        .map(|&a| {
            let fa = f.scaled(a);
            let h = propagate_free_on(&fa, &c, &tg, mask, &opts)?.trace;
            let trace_h1 = trace_h1_norm(&h)?;
            let (ft, _) = reconstruct(&h, c0, mask, settings.tol, settings.m_max, None, settings.cfl_safety)?;
            let err_h1 = h1_norm(&ft.sub(&fa)?, mask)?;
            Ok(AmplitudeRow {
                amplitude: a,
                trace_h1,
                err_h1,
                ratio_sqrt: err_h1 / trace_h1.sqrt(),
                ratio_linear: err_h1 / trace_h1,
            })
        })
        .collect()
}

/// Power-iteration estimate of the H1 growth factor of `K` started from `f0`:
/// the ratio `‖K x‖ / ‖x‖` after `iters` normalised applications.
pub fn operator_norm_from(f0: &ScalarField, obs: &Observation<'_>, iters: usize) -> Result<f64> {
    if iters < 5 {
        return Err(Error::InvalidArgument(format!("power iteration needs at least 5 steps, got {iters}")));
    }
    let n0 = h1_norm(f0, obs.mask)?;
    if n0 == 0.0 {
        return Err(Error::InvalidArgument("seed field is zero".into()));
    }
    let mut x = f0.scaled(1.0 / n0);
    let mut factor = 0.0;
    for _ in 0..iters {
        let y = obs.apply_k(&x)?;
        factor = h1_norm(&y, obs.mask)?;
        if factor == 0.0 {
            return Ok(0.0);
        }
        x = y.scaled(1.0 / factor);
    }
    Ok(factor)
}

/// [`operator_norm_from`] with a random smooth K-supported seed.
pub fn operator_norm_estimate(
    c0: &SpeedField,
    mask: &DomainMask,
    support: &CompactSupport,
    t_final: f64,
    iters: usize,
    seed: u64,
    cfl_safety: f64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f0 = random_bandlimited(*mask.grid(), support, 8, 8.0, &mut rng);
    let obs = Observation::new(c0, mask, t_final, cfl_safety)?;
    operator_norm_from(&f0, &obs, iters)
}

/// `‖f‖_{H1(M)} / ‖Λ_c f‖_{H1 trace}`: an empirical observability constant.
pub fn observability_ratio(f: &ScalarField, obs: &Observation<'_>) -> Result<f64> {
    let h = obs.measure(f)?;
    Ok(h1_norm(f, obs.mask)? / trace_h1_norm(&h)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{Grid2D, SmoothBump};
    use crate::geometry::build_disk_domain;
    use crate::wave::{gaussian_source, required_half_width};

    fn setup(h: f64, t: f64) -> (DomainMask, CompactSupport) {
        let g = Grid2D::centered([0.0, 0.0], required_half_width(1.0, 1.1, t, h), h).unwrap();
        build_disk_domain(g, [0.0, 0.0], 1.0, 0.6, 128).unwrap()
    }

    #[test]
    fn k_of_zero_and_linearity() {
        let (mask, support) = setup(1.0 / 24.0, 2.5);
        let g = *mask.grid();
        let c0 = SpeedField::constant(g, 1.0).unwrap();
        let obs = Observation::new(&c0, &mask, 2.5, 0.9).unwrap();
        assert_eq!(obs.apply_k(&ScalarField::zeros(g)).unwrap().max_abs(), 0.0);
        let a = gaussian_source(g, &support, [0.1, 0.0], 0.12, 1.0).unwrap();
        let b = gaussian_source(g, &support, [-0.1, 0.2], 0.1, 1.0).unwrap();
        let ka = obs.apply_k(&a).unwrap();
        let kb = obs.apply_k(&b).unwrap();
        let ks = obs.apply_k(&a.add_scaled(&b, 3.0).unwrap()).unwrap();
        let want = ka.add_scaled(&kb, 3.0).unwrap();
        assert!(ks.sub(&want).unwrap().max_abs() <= 1e-8 * want.max_abs());
    }

    #[test]
    fn k_contracts_for_long_observation() {
        let (mask, support) = setup(1.0 / 32.0, 4.0);
        let g = *mask.grid();
        let c0 = SpeedField::constant(g, 1.0).unwrap();
        let f = gaussian_source(g, &support, [0.1, 0.0], 0.12, 1.0).unwrap();
        let kf = apply_k(&f, &c0, 4.0, &mask, 0.9).unwrap();
        let ratio = h1_norm(&kf, &mask).unwrap() / h1_norm(&f, &mask).unwrap();
        assert!(ratio < 1.0, "{ratio}");
    }

    #[test]
    fn zero_data_reconstructs_zero() {
        let (mask, _) = setup(1.0 / 24.0, 2.0);
        let g = *mask.grid();
        let c0 = SpeedField::constant(g, 1.0).unwrap();
        let tg = TimeGrid::new(&[&c0], 0.9, 2.0).unwrap();
        let h = BoundaryTrace::zeros(tg.n_steps + 1, 128, tg.dt, 1.0, [0.0, 0.0]);
        let (ft, rep) = reconstruct(&h, &c0, &mask, 1e-3, 5, None, 0.9).unwrap();
        assert_eq!(ft.max_abs(), 0.0);
        assert_eq!(rep.m_used, 0);
        assert_eq!(rep.iterate_norms.len(), 1);
        assert!(reconstruct(&h, &c0, &mask, 0.0, 5, None, 0.9).is_err());
        assert!(reconstruct(&h, &c0, &mask, 1e-3, 0, None, 0.9).is_err());
    }

    #[test]
    fn self_reconstruction_converges() {
        let t = 4.0;
        let (mask, support) = setup(1.0 / 32.0, t);
        let g = *mask.grid();
        let c0 = SpeedField::constant(g, 1.0).unwrap();
        let f = gaussian_source(g, &support, [0.1, -0.05], 0.15, 1.0).unwrap();
        let obs = Observation::new(&c0, &mask, t, 0.9).unwrap();
        let h = obs.measure(&f).unwrap();
        let (_, rep) = reconstruct(&h, &c0, &mask, 1e-3, 10, Some(&f), 0.9).unwrap();
        assert_eq!(rep.iterate_norms.len(), rep.m_used + 1);
        assert!(rep.rel_error_h1.unwrap() < 0.15, "{rep:?}");
        assert!(rep.ratios().iter().all(|&q| q < 0.9), "{rep:?}");
        let again = reconstruct(&h, &c0, &mask, 1e-3, 10, Some(&f), 0.9).unwrap().1;
        assert_eq!(again.iterate_norms, rep.iterate_norms);
    }

    #[test]
    fn short_observation_does_not_reconstruct() {
        let t = 0.6;
        let (mask, support) = setup(1.0 / 24.0, t);
        let g = *mask.grid();
        let c0 = SpeedField::constant(g, 1.0).unwrap();
        let f = gaussian_source(g, &support, [0.0, 0.0], 0.15, 1.0).unwrap();
        let obs = Observation::new(&c0, &mask, t, 0.9).unwrap();
        let h = obs.measure(&f).unwrap();
        let (_, rep) = reconstruct(&h, &c0, &mask, 1e-3, 8, Some(&f), 0.9).unwrap();
        assert!(rep.stop_reason == StopReason::Divergence || rep.rel_error_h1.unwrap() >= 0.5, "{rep:?}");
    }

    #[test]
    fn perturbation_spec_validation() {
        let (mask, support) = setup(1.0 / 24.0, 1.0);
        let g = *mask.grid();
        let bump = SmoothBump { center: [0.0, 0.0], radius: 0.4, amplitude: 1.0 };
        let psi = ScalarField::from_fn(g, |x, y| bump.eval(x, y));
        assert!(PerturbationSpec::new(psi.clone(), vec![0.0, 0.01], &support).is_ok());
        assert!(PerturbationSpec::new(psi.scaled(0.5), vec![0.01], &support).is_err());
        let wide = ScalarField::from_fn(g, |x, y| SmoothBump { center: [0.0, 0.0], radius: 0.9, amplitude: 1.0 }.eval(x, y));
        assert!(PerturbationSpec::new(wide, vec![0.01], &support).is_err());
    }

    #[test]
    fn stability_rows_report_errors_per_row() {
        let t = 2.5;
        let (mask, support) = setup(1.0 / 24.0, t);
        let g = *mask.grid();
        let c0 = SpeedField::constant(g, 1.0).unwrap();
        let f = gaussian_source(g, &support, [0.0, 0.0], 0.15, 1.0).unwrap();
        let bump = SmoothBump { center: [0.1, 0.0], radius: 0.4, amplitude: 1.0 };
        let psi = ScalarField::from_fn(g, |x, y| bump.eval(x, y));
        assert!(PerturbationSpec::new(psi.clone(), vec![0.01], &support).is_err());
        let pert = PerturbationSpec::normalized(&psi, vec![0.0, 0.01, 0.2], &support).unwrap();
        let settings = SeriesSettings { t_final: t, tol: 1e-2, m_max: 3, cfl_safety: 0.9 };
        let rows = stability_experiment(&f, &c0, &pert, &mask, &support, &settings).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows[0].ratio.is_none() && rows[0].error.is_none());
        assert!(rows[1].ratio.unwrap() > 0.0);
        assert!(rows[1].err_h1 > rows[0].err_h1);
        assert!(rows[2].error.is_some());
    }

    #[test]
    fn power_iteration_is_scale_invariant_and_deterministic() {
        let t = 2.5;
        let (mask, support) = setup(1.0 / 24.0, t);
        let g = *mask.grid();
        let c0 = SpeedField::constant(g, 1.0).unwrap();
        let a = operator_norm_estimate(&c0, &mask, &support, t, 5, 3, 0.9).unwrap();
        let b = operator_norm_estimate(&c0, &mask, &support, t, 5, 3, 0.9).unwrap();
        assert_eq!(a, b);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f0 = random_bandlimited(g, &support, 8, 8.0, &mut rng);
        let obs = Observation::new(&c0, &mask, t, 0.9).unwrap();
        let x = operator_norm_from(&f0, &obs, 5).unwrap();
        let y = operator_norm_from(&f0.scaled(7.5), &obs, 5).unwrap();
        assert!((x - y).abs() <= 1e-12 * x);
        assert!(operator_norm_from(&f0, &obs, 4).is_err());
    }
}
