//! Scenario configuration: one strict JSON document describing the grid,
//! domain, speed, source and experiment settings.

use serde::{Deserialize, Serialize};

use crate::carleman::ConvexWeight;
use crate::error::{Error, Result};
use crate::field::{Grid2D, ScalarField, SmoothBump, SpeedField};
use crate::geodesics::{max_exit_time, Medium, DEFAULT_RAY_DT};
use crate::geometry::{build_disk_domain, CompactSupport, DomainMask};
use crate::neumann::{PerturbationSpec, SeriesSettings, MAX_EPS};
use crate::wave::{gaussian_source, required_half_width, SolverOptions, DEFAULT_CFL_SAFETY};

/// Guards against configs that would allocate absurd grids.
pub const MAX_NODES_PER_AXIS: usize = 8192;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub grid: GridConfig,
    pub domain: DomainConfig,
    pub speed: SpeedConfig,
    pub source: SourceConfig,
    pub time: TimeConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub reconstruction: ReconstructionConfig,
    #[serde(default)]
    pub perturbation: Option<PerturbationConfig>,
    /// Defaults to a point at distance `2 R_M` left of the centre.
    #[serde(default)]
    pub weight: Option<WeightConfig>,
    #[serde(default)]
    pub rays: RayConfig,
    #[serde(default)]
    pub carleman: CarlemanCheckConfig,
    #[serde(default)]
    pub seeds: SeedConfig,
}

/// `nx`/`ny` may be omitted, in which case the box is sized from the run
/// length so that nothing reflects back into M.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub h: f64,
    #[serde(default)]
    pub nx: Option<usize>,
    #[serde(default)]
    pub ny: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    #[serde(default)]
    pub center: [f64; 2],
    #[serde(rename = "R_M")]
    pub r_m: f64,
    #[serde(rename = "R_K")]
    pub r_k: f64,
    #[serde(rename = "N_theta")]
    pub n_theta: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum SpeedConfig {
    Constant { c: f64 },
    Bumps { reference: f64, bumps: Vec<SmoothBump> },
}

impl SpeedConfig {
    pub fn reference(&self) -> f64 {
        match self {
            SpeedConfig::Constant { c } => *c,
            SpeedConfig::Bumps { reference, .. } => *reference,
        }
    }

    /// Upper bound on the speed, exact for non-overlapping bumps.
    pub fn c_max_bound(&self) -> f64 {
        match self {
            SpeedConfig::Constant { c } => *c,
            SpeedConfig::Bumps { reference, bumps } => {
                reference * (1.0 + bumps.iter().map(|b| b.amplitude.max(0.0)).sum::<f64>())
            }
        }
    }

    pub fn build(&self, grid: Grid2D) -> Result<SpeedField> {
        match self {
            SpeedConfig::Constant { c } => SpeedField::constant(grid, *c),
            SpeedConfig::Bumps { reference, bumps } => SpeedField::with_bumps(grid, *reference, bumps),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceConfig {
    pub center: [f64; 2],
    pub sigma: f64,
    #[serde(default = "one")]
    pub amplitude: f64,
}

/// `"auto"` or `{"fixed": T}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeConfig {
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default = "default_cfl")]
    pub cfl_safety: f64,
    #[serde(default)]
    pub snapshot_stride: Option<usize>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { cfl_safety: DEFAULT_CFL_SAFETY, snapshot_stride: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconstructionConfig {
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_m_max")]
    pub m_max: usize,
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        Self { tol: default_tol(), m_max: default_m_max() }
    }
}

/// Profile of `c - c0 = ε c0 ψ`; the bump is rescaled to unit sup-norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationConfig {
    pub center: [f64; 2],
    pub radius: f64,
    pub eps: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightConfig {
    pub x0: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RayConfig {
    #[serde(default = "default_n_x")]
    pub n_x: usize,
    #[serde(default = "default_n_dir")]
    pub n_dir: usize,
    #[serde(default = "default_ray_dt")]
    pub dt: f64,
}

impl Default for RayConfig {
    fn default() -> Self {
        Self { n_x: default_n_x(), n_dir: default_n_dir(), dt: default_ray_dt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CarlemanCheckConfig {
    #[serde(default = "default_check_n")]
    pub n: usize,
    #[serde(default = "default_check_steps")]
    pub steps: usize,
    #[serde(default = "default_check_time")]
    pub t_final: f64,
}

impl Default for CarlemanCheckConfig {
    fn default() -> Self {
        Self { n: default_check_n(), steps: default_check_steps(), t_final: default_check_time() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedConfig {
    #[serde(default = "default_seed")]
    pub master: u64,
}

impl Default for SeedConfig {
    fn default() -> Self {
        Self { master: default_seed() }
    }
}

fn one() -> f64 {
    1.0
}
fn default_cfl() -> f64 {
    DEFAULT_CFL_SAFETY
}
fn default_tol() -> f64 {
    1e-3
}
fn default_m_max() -> usize {
    20
}
fn default_n_x() -> usize {
    64
}
fn default_n_dir() -> usize {
    72
}
fn default_ray_dt() -> f64 {
    DEFAULT_RAY_DT
}
fn default_check_n() -> usize {
    64
}
fn default_check_steps() -> usize {
    128
}
fn default_check_time() -> f64 {
    2.0
}
fn default_seed() -> u64 {
    20240611
}

/// Parses a config and reports the JSON path of the first schema error,
/// then runs [`ScenarioConfig::validate`].
pub fn parse_config(bytes: &[u8]) -> Result<ScenarioConfig> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    let cfg: ScenarioConfig = serde_path_to_error::deserialize(&mut *de).map_err(|e| {
        let path = e.path().to_string();
        let msg = e.inner().to_string();
        // serde reports a missing field at its parent; name the field itself
        let full = match msg.strip_prefix("missing field `").and_then(|r| r.split('`').next()) {
            Some(field) if path == "." => field.to_string(),
            Some(field) => format!("{path}.{field}"),
            None => path,
        };
        Error::Parse(format!("config field `{full}`: {msg}"))
    })?;
    de.end().map_err(|e| Error::Parse(format!("trailing data after config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

fn check(issues: &mut Vec<String>, ok: bool, field: &str, msg: impl FnOnce() -> String) {
    if !ok {
        issues.push(format!("{field}: {}", msg()));
    }
}

fn finite2(p: [f64; 2]) -> bool {
    p.iter().all(|v| v.is_finite())
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

impl ScenarioConfig {
    /// Checks every value-level constraint and lists all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        let d = &self.domain;
        check(&mut v, self.grid.h > 0.0 && self.grid.h.is_finite(), "grid.h", || {
            format!("must be positive, got {}", self.grid.h)
        });
        for (name, n) in [("grid.nx", self.grid.nx), ("grid.ny", self.grid.ny)] {
            if let Some(n) = n {
                check(&mut v, (Grid2D::MIN_NODES..=MAX_NODES_PER_AXIS).contains(&n), name, || {
                    format!("must lie in [{}, {MAX_NODES_PER_AXIS}], got {n}", Grid2D::MIN_NODES)
                });
            }
        }
        check(&mut v, finite2(d.center), "domain.center", || "must be finite".into());
        check(&mut v, d.r_m > 0.0 && d.r_m.is_finite(), "domain.R_M", || format!("must be positive, got {}", d.r_m));
        check(&mut v, d.r_k > 0.0 && d.r_k < d.r_m, "domain.R_K", || {
            format!("must lie in (0, R_M), got {}", d.r_k)
        });
        check(&mut v, d.n_theta >= 64, "domain.N_theta", || format!("must be at least 64, got {}", d.n_theta));
        check(&mut v, d.r_m - d.r_k >= 4.0 * self.grid.h, "domain.R_K", || {
            format!("gap R_M - R_K = {} must be at least 4h", d.r_m - d.r_k)
        });

        let reference = self.speed.reference();
        check(&mut v, reference > 0.0 && reference.is_finite(), "speed", || {
            format!("reference speed must be positive, got {reference}")
        });
        if let SpeedConfig::Bumps { bumps, .. } = &self.speed {
            let mut low = 1.0;
            for (k, b) in bumps.iter().enumerate() {
                let f = format!("speed.bumps[{k}]");
                check(&mut v, finite2(b.center) && b.amplitude.is_finite(), &f, || "must be finite".into());
                check(&mut v, b.radius > 0.0, &format!("{f}.radius"), || format!("must be positive, got {}", b.radius));
                check(&mut v, dist(b.center, d.center) + b.radius <= d.r_k, &f, || "must lie inside K".into());
                low += b.amplitude.min(0.0);
            }
            check(&mut v, low > 0.0, "speed.bumps", || "negative amplitudes drive the speed to zero".into());
        }

        let s = &self.source;
        check(&mut v, finite2(s.center) && dist(s.center, d.center) < d.r_k, "source.center", || {
            "must lie inside K".into()
        });
        check(&mut v, s.sigma > 0.0 && s.sigma.is_finite(), "source.sigma", || format!("must be positive, got {}", s.sigma));
        check(&mut v, s.amplitude.is_finite(), "source.amplitude", || "must be finite".into());
        if let TimeConfig::Fixed(t) = self.time {
            check(&mut v, t > 0.0 && t.is_finite(), "time.fixed", || format!("must be positive, got {t}"));
        }
        let cfl = self.solver.cfl_safety;
        check(&mut v, cfl > 0.0 && cfl < 1.0, "solver.cfl_safety", || format!("must lie in (0, 1), got {cfl}"));
        check(&mut v, self.solver.snapshot_stride != Some(0), "solver.snapshot_stride", || "must be positive".into());
        let r = &self.reconstruction;
        check(&mut v, r.tol > 0.0 && r.tol < 1.0, "reconstruction.tol", || format!("must lie in (0, 1), got {}", r.tol));
        check(&mut v, r.m_max >= 1, "reconstruction.m_max", || "must be at least 1".into());
        if let Some(p) = &self.perturbation {
            check(&mut v, p.radius > 0.0 && finite2(p.center), "perturbation", || "bump must be finite with positive radius".into());
            check(&mut v, dist(p.center, d.center) + p.radius <= d.r_k, "perturbation", || "bump must lie inside K".into());
            check(&mut v, !p.eps.is_empty(), "perturbation.eps", || "must not be empty".into());
            for (k, e) in p.eps.iter().enumerate() {
                check(&mut v, e.abs() <= MAX_EPS, &format!("perturbation.eps[{k}]"), || {
                    format!("|{e}| exceeds {MAX_EPS}")
                });
            }
        }
        if let Some(w) = &self.weight {
            check(&mut v, finite2(w.x0) && dist(w.x0, d.center) > d.r_m, "weight.x0", || {
                "must lie outside the closed disk M so that the weight has no critical point".into()
            });
        }
        let rays = &self.rays;
        check(&mut v, rays.n_x >= 1 && rays.n_dir >= 1, "rays", || "n_x and n_dir must be positive".into());
        check(&mut v, rays.n_x <= 100_000 && rays.n_dir <= 100_000, "rays", || "n_x and n_dir are capped at 100000".into());
        check(&mut v, rays.dt > 0.0 && rays.dt.is_finite(), "rays.dt", || format!("must be positive, got {}", rays.dt));
        let cc = &self.carleman;
        check(&mut v, (Grid2D::MIN_NODES..=MAX_NODES_PER_AXIS).contains(&cc.n), "carleman.n", || {
            format!("must lie in [{}, {MAX_NODES_PER_AXIS}]", Grid2D::MIN_NODES)
        });
        check(&mut v, cc.steps >= 9, "carleman.steps", || "must be at least 9".into());
        check(&mut v, cc.t_final > 0.0, "carleman.t_final", || "must be positive".into());

        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Parse(format!("invalid config:\n  {}", v.join("\n  "))))
        }
    }
}

/// Everything a subcommand needs, built from a validated config.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub grid: Grid2D,
    pub mask: DomainMask,
    pub support: CompactSupport,
    pub speed: SpeedField,
    pub source: ScalarField,
    pub t_final: f64,
    /// Set when `time` is `auto`.
    pub max_exit_time: Option<f64>,
}

/// Grid of `nx x ny` nodes centred on `center`.
fn grid_about(center: [f64; 2], nx: usize, ny: usize, h: f64) -> Result<Grid2D> {
    let ox = center[0] - 0.5 * (nx - 1) as f64 * h;
    let oy = center[1] - 0.5 * (ny - 1) as f64 * h;
    Grid2D::new(nx, ny, h, [ox, oy])
}

impl Scenario {
    pub fn build(config: &ScenarioConfig) -> Result<Self> {
        config.validate()?;
        let d = &config.domain;
        let h = config.grid.h;
        let (t_final, max_exit) = match config.time {
            TimeConfig::Fixed(t) => (t, None),
            TimeConfig::Auto => {
                let g = Grid2D::centered(d.center, d.r_m + 8.0 * h, h)?;
                let (mask, support) = build_disk_domain(g, d.center, d.r_m, d.r_k, d.n_theta)?;
                let med = Medium::new(&config.speed.build(g)?);
                let rep = max_exit_time(&med, &support, &mask, config.rays.n_x, config.rays.n_dir, config.rays.dt)?;
                if rep.trapped {
                    return Err(Error::Trapped { t_max: rep.t_max });
                }
                (rep.practical_time, Some(rep.max_exit_time))
            }
        };
        let half = required_half_width(d.r_m, config.speed.c_max_bound(), t_final, h);
        let auto_n = 2 * (half / h).ceil() as usize + 1;
        if auto_n > MAX_NODES_PER_AXIS && (config.grid.nx.is_none() || config.grid.ny.is_none()) {
            return Err(Error::InvalidArgument(format!(
                "run needs {auto_n} nodes per axis, above the limit {MAX_NODES_PER_AXIS}"
            )));
        }
        let grid = grid_about(d.center, config.grid.nx.unwrap_or(auto_n), config.grid.ny.unwrap_or(auto_n), h)?;
        let (mask, support) = build_disk_domain(grid, d.center, d.r_m, d.r_k, d.n_theta)?;
        let speed = config.speed.build(grid)?;
        let s = &config.source;
        let source = gaussian_source(grid, &support, s.center, s.sigma, s.amplitude)?;
        Ok(Self { config: config.clone(), grid, mask, support, speed, source, t_final, max_exit_time: max_exit })
    }

    pub fn solver_options(&self) -> SolverOptions {
        SolverOptions {
            cfl_safety: self.config.solver.cfl_safety,
            record_energy: true,
            snapshot_stride: self.config.solver.snapshot_stride,
        }
    }

    pub fn series_settings(&self) -> SeriesSettings {
        SeriesSettings {
            t_final: self.t_final,
            tol: self.config.reconstruction.tol,
            m_max: self.config.reconstruction.m_max,
            cfl_safety: self.config.solver.cfl_safety,
        }
    }

    pub fn perturbation(&self) -> Result<PerturbationSpec> {
        let p = self
            .config
            .perturbation
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("config has no `perturbation` section".into()))?;
        let bump = SmoothBump { center: p.center, radius: p.radius, amplitude: 1.0 };
        let profile = ScalarField::from_fn(self.grid, |x, y| bump.eval(x, y));
        PerturbationSpec::normalized(&profile, p.eps.clone(), &self.support)
    }

    pub fn weight(&self) -> ConvexWeight {
        let d = &self.config.domain;
        let x0 = self.config.weight.as_ref().map_or([d.center[0] - 2.0 * d.r_m, d.center[1]], |w| w.x0);
        ConvexWeight::quadratic(x0)
    }
}
