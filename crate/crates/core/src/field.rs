//! Uniform grids and the sampled fields that live on them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform node lattice. Node `(i, j)` sits at `origin + (i h, j h)`;
/// storage is row-major with `i` fastest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid2D {
    pub nx: usize,
    pub ny: usize,
    pub h: f64,
    pub origin: [f64; 2],
}

impl Grid2D {
    pub const MIN_NODES: usize = 32;

    pub fn new(nx: usize, ny: usize, h: f64, origin: [f64; 2]) -> Result<Self> {
        if nx < Self::MIN_NODES || ny < Self::MIN_NODES {
            return Err(Error::InvalidArgument(format!(
                "grid must have at least {} nodes per axis, got {nx}x{ny}",
                Self::MIN_NODES
            )));
        }
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::InvalidArgument(format!("grid spacing must be positive, got {h}")));
        }
        if !origin.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("grid origin must be finite".into()));
        }
        Ok(Self { nx, ny, h, origin })
    }

    /// Square grid with a node exactly at `center`, extending at least
    /// `half_width` in every direction.
    pub fn centered(center: [f64; 2], half_width: f64, h: f64) -> Result<Self> {
        if !(half_width > 0.0) || !(h > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "half width {half_width} and spacing {h} must be positive"
            )));
        }
        let n_half = (half_width / h - 1e-9).ceil() as usize;
        let n = 2 * n_half + 1;
        let off = n_half as f64 * h;
        Self::new(n, n, h, [center[0] - off, center[1] - off])
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    #[inline]
    pub fn ij(&self, idx: usize) -> (usize, usize) {
        (idx % self.nx, idx / self.nx)
    }

    #[inline]
    pub fn x(&self, i: usize) -> f64 {
        self.origin[0] + i as f64 * self.h
    }

    #[inline]
    pub fn y(&self, j: usize) -> f64 {
        self.origin[1] + j as f64 * self.h
    }

    #[inline]
    pub fn point(&self, idx: usize) -> [f64; 2] {
        let (i, j) = self.ij(idx);
        [self.x(i), self.y(j)]
    }

    pub fn lower(&self) -> [f64; 2] {
        self.origin
    }

    pub fn upper(&self) -> [f64; 2] {
        [self.x(self.nx - 1), self.y(self.ny - 1)]
    }

    /// Fractional node coordinates of a physical point.
    #[inline]
    pub fn to_index_space(&self, p: [f64; 2]) -> [f64; 2] {
        [(p[0] - self.origin[0]) / self.h, (p[1] - self.origin[1]) / self.h]
    }
}

/// A real function sampled at every node of a grid. Values are always finite.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: Grid2D,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: Grid2D, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} values for a {}x{} grid, got {}",
                grid.len(),
                grid.nx,
                grid.ny,
                values.len()
            )));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite value at node {k}")));
        }
        Ok(Self { grid, values })
    }

    pub(crate) fn from_raw(grid: Grid2D, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        Self { grid, values }
    }

    pub fn zeros(grid: Grid2D) -> Self {
        Self { grid, values: vec![0.0; grid.len()] }
    }

    pub fn constant(grid: Grid2D, value: f64) -> Self {
        Self { grid, values: vec![value; grid.len()] }
    }

    pub fn from_fn(grid: Grid2D, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.len());
        for j in 0..grid.ny {
            let y = grid.y(j);
            for i in 0..grid.nx {
                values.push(f(grid.x(i), y));
            }
        }
        Self { grid, values }
    }

    #[inline]
    pub fn grid(&self) -> &Grid2D {
        &self.grid
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[self.grid.idx(i, j)]
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            grid: self.grid,
            values: self.values.iter().map(|v| alpha * v).collect(),
        }
    }

    /// `self + alpha * other`.
    pub fn add_scaled(&self, other: &Self, alpha: f64) -> Result<Self> {
        self.ensure_same_grid(other)?;
        Ok(Self {
            grid: self.grid,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + alpha * b)
                .collect(),
        })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.add_scaled(other, -1.0)
    }

    pub fn add_assign_scaled(&mut self, other: &Self, alpha: f64) -> Result<()> {
        self.ensure_same_grid(other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn ensure_same_grid(&self, other: &Self) -> Result<()> {
        if self.grid == other.grid {
            Ok(())
        } else {
            Err(Error::GridMismatch)
        }
    }
}

/// Compactly supported C-infinity bump `amplitude * exp(1 - 1/(1 - s^2))`,
/// `s = |x - center| / radius`; equals `amplitude` at the center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothBump {
    pub center: [f64; 2],
    pub radius: f64,
    pub amplitude: f64,
}

impl SmoothBump {
    #[inline]
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.center[0];
        let dy = y - self.center[1];
        let s2 = (dx * dx + dy * dy) / (self.radius * self.radius);
        if s2 >= 1.0 {
            0.0
        } else {
            self.amplitude * (1.0 - 1.0 / (1.0 - s2)).exp()
        }
    }

    /// Largest gradient magnitude of the unit-amplitude profile times `|amplitude|`.
    pub fn max_gradient(&self) -> f64 {
        // d/dr exp(1 - 1/(1-s^2)) peaks at a fixed s; evaluate on a fine 1-D scan.
        let mut best: f64 = 0.0;
        let n = 4000;
        for k in 1..n {
            let s = k as f64 / n as f64;
            let q = 1.0 - s * s;
            let g = (1.0 - 1.0 / q).exp() * 2.0 * s / (q * q);
            best = best.max(g);
        }
        best * self.amplitude.abs() / self.radius
    }
}

/// Smooth step: 1 for `s <= s0`, 0 for `s >= 1`, C-infinity in between.
pub fn smooth_cutoff(s: f64, s0: f64) -> f64 {
    if s <= s0 {
        return 1.0;
    }
    if s >= 1.0 {
        return 0.0;
    }
    let t = (s - s0) / (1.0 - s0);
    let a = psi(1.0 - t);
    let b = psi(t);
    a / (a + b)
}

#[inline]
fn psi(t: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else {
        (-1.0 / t).exp()
    }
}

/// Random smooth field supported in `support`: a sum of `n_modes` plane
/// waves with wavenumbers in `[-k_max, k_max]^2` times a cutoff that is 1 on
/// the inner half of the disk.
pub fn random_bandlimited<R: rand::Rng>(
    grid: Grid2D,
    support: &crate::geometry::CompactSupport,
    n_modes: usize,
    k_max: f64,
    rng: &mut R,
) -> ScalarField {
    let modes: Vec<[f64; 4]> = (0..n_modes)
        .map(|_| {
            [
                rng.gen_range(-k_max..=k_max),
                rng.gen_range(-k_max..=k_max),
                rng.gen_range(0.0..2.0 * std::f64::consts::PI),
                rng.gen_range(-1.0..1.0),
            ]
        })
        .collect();
    let [cx, cy] = support.center;
    let r = support.radius;
    ScalarField::from_fn(grid, |x, y| {
        let cut = smooth_cutoff(((x - cx).powi(2) + (y - cy).powi(2)).sqrt() / r, 0.5);
        if cut == 0.0 {
            return 0.0;
        }
        cut * modes.iter().map(|[kx, ky, ph, a]| a * (kx * (x - cx) + ky * (y - cy) + ph).cos()).sum::<f64>()
    })
}

/// Strictly positive acoustic speed sampled on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedField {
    field: ScalarField,
    c_min: f64,
    c_max: f64,
}

impl SpeedField {
    pub fn new(field: ScalarField) -> Result<Self> {
        let (c_min, c_max) = field.min_max();
        if !(c_min > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "speed must be strictly positive, min = {c_min}"
            )));
        }
        Ok(Self { field, c_min, c_max })
    }

    pub fn constant(grid: Grid2D, c: f64) -> Result<Self> {
        Self::new(ScalarField::constant(grid, c))
    }

    /// `c = reference * (1 + sum of bumps)`.
    pub fn with_bumps(grid: Grid2D, reference: f64, bumps: &[SmoothBump]) -> Result<Self> {
        Self::new(ScalarField::from_fn(grid, |x, y| {
            reference * (1.0 + bumps.iter().map(|b| b.eval(x, y)).sum::<f64>())
        }))
    }

    /// `self * (1 + eps * psi)`.
    pub fn perturbed(&self, psi: &ScalarField, eps: f64) -> Result<Self> {
        self.field.ensure_same_grid(psi)?;
        let values = self
            .field
            .values()
            .iter()
            .zip(psi.values())
            .map(|(c, p)| c * (1.0 + eps * p))
            .collect();
        Self::new(ScalarField::new(*self.field.grid(), values)?)
    }

    /// Checks that `c` equals `reference` at every node outside `support`.
    pub fn check_reference_outside(
        &self,
        support: &crate::geometry::CompactSupport,
        reference: &SpeedField,
    ) -> Result<()> {
        self.field.ensure_same_grid(&reference.field)?;
        let g = self.grid();
        let mut worst: f64 = 0.0;
        for (k, (a, b)) in self.values().iter().zip(reference.values()).enumerate() {
            let p = g.point(k);
            if !support.contains(p) {
                worst = worst.max((a - b).abs());
            }
        }
        if worst > 1e-12 * self.c_max {
            return Err(Error::SupportViolation {
                region: "K (speed differs from reference)",
                outside: worst,
                max: self.c_max,
            });
        }
        Ok(())
    }

    #[inline]
    pub fn grid(&self) -> &Grid2D {
        self.field.grid()
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        self.field.values()
    }

    pub fn field(&self) -> &ScalarField {
        &self.field
    }

    pub fn c_min(&self) -> f64 {
        self.c_min
    }

    pub fn c_max(&self) -> f64 {
        self.c_max
    }

    /// Sup-norm of `self - other`.
    pub fn sup_diff(&self, other: &SpeedField) -> Result<f64> {
        self.field.ensure_same_grid(&other.field)?;
        Ok(self
            .values()
            .iter()
            .zip(other.values())
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centered_grid_has_node_at_center() {
        let g = Grid2D::centered([0.0, 0.0], 1.0, 1.0 / 64.0).unwrap();
        assert_eq!(g.nx % 2, 1);
        let mid = g.nx / 2;
        assert_eq!(g.x(mid), 0.0);
        assert_eq!(g.y(mid), 0.0);
        assert!(g.upper()[0] >= 1.0);
        // x = 1 is a node when 1/h is an integer
        assert!((g.x(mid + 64) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn small_grids_rejected() {
        assert!(Grid2D::new(16, 64, 0.1, [0.0, 0.0]).is_err());
        assert!(Grid2D::new(64, 64, 0.0, [0.0, 0.0]).is_err());
    }

    #[test]
    fn non_finite_values_rejected() {
        let g = Grid2D::new(32, 32, 0.1, [0.0, 0.0]).unwrap();
        let mut v = vec![0.0; g.len()];
        v[7] = f64::NAN;
        assert!(ScalarField::new(g, v).is_err());
    }

    #[test]
    fn bump_profile() {
        let b = SmoothBump { center: [0.1, 0.0], radius: 0.2, amplitude: 2.0 };
        assert_eq!(b.eval(0.1, 0.0), 2.0);
        assert_eq!(b.eval(0.31, 0.0), 0.0);
        assert!(b.eval(0.2, 0.0) > 0.0 && b.eval(0.2, 0.0) < 2.0);
        // numeric gradient maximum agrees with the scan
        let mut g: f64 = 0.0;
        for k in 1..2000 {
            let x = 0.1 + 0.2 * k as f64 / 2000.0;
            let d = (b.eval(x + 1e-7, 0.0) - b.eval(x - 1e-7, 0.0)) / 2e-7;
            g = g.max(d.abs());
        }
        assert!((g - b.max_gradient()).abs() < 1e-3 * g);
    }

    #[test]
    fn cutoff_is_monotone_step() {
        assert_eq!(smooth_cutoff(0.5, 0.8), 1.0);
        assert_eq!(smooth_cutoff(1.0, 0.8), 0.0);
        let mut prev = 1.0;
        for k in 0..=100 {
            let v = smooth_cutoff(0.8 + 0.2 * k as f64 / 100.0, 0.8);
            assert!(v <= prev + 1e-15);
            prev = v;
        }
    }

    #[test]
    fn speed_must_be_positive() {
        let g = Grid2D::new(32, 32, 0.1, [0.0, 0.0]).unwrap();
        assert!(SpeedField::constant(g, 0.0).is_err());
        let c = SpeedField::constant(g, 2.0).unwrap();
        assert_eq!(c.c_min(), 2.0);
        assert_eq!(c.c_max(), 2.0);
    }
}
