use crate::error::{Error, Result};

/// Space-time record on `[0, T] x ∂M`: row `n` holds the values at
/// `t_n = n dt` for the `n_theta` equispaced boundary samples.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryTrace {
    values: Vec<f64>,
    n_t: usize,
    n_theta: usize,
    dt: f64,
    radius: f64,
    center: [f64; 2],
}

impl BoundaryTrace {
    pub fn new(
        values: Vec<f64>,
        n_t: usize,
        n_theta: usize,
        dt: f64,
        radius: f64,
        center: [f64; 2],
    ) -> Result<Self> {
        if n_t == 0 || n_theta == 0 {
            return Err(Error::DegenerateTrace(format!("{n_t} x {n_theta} samples")));
        }
        if values.len() != n_t * n_theta {
            return Err(Error::DegenerateTrace(format!(
                "expected {} values, got {}",
                n_t * n_theta,
                values.len()
            )));
        }
        if !(dt > 0.0 && dt.is_finite()) || !(radius > 0.0) {
            return Err(Error::DegenerateTrace(format!("dt = {dt}, radius = {radius}")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateTrace("non-finite value".into()));
        }
        Ok(Self { values, n_t, n_theta, dt, radius, center })
    }

    pub fn zeros(n_t: usize, n_theta: usize, dt: f64, radius: f64, center: [f64; 2]) -> Self {
        Self { values: vec![0.0; n_t * n_theta], n_t, n_theta, dt, radius, center }
    }

    pub(crate) fn row_mut(&mut self, n: usize) -> &mut [f64] {
        &mut self.values[n * self.n_theta..(n + 1) * self.n_theta]
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.values[n * self.n_theta..(n + 1) * self.n_theta]
    }

    #[inline]
    pub fn at(&self, n: usize, k: usize) -> f64 {
        self.values[n * self.n_theta + k]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn n_t(&self) -> usize {
        self.n_t
    }
    pub fn n_theta(&self) -> usize {
        self.n_theta
    }
    pub fn dt(&self) -> f64 {
        self.dt
    }
    pub fn radius(&self) -> f64 {
        self.radius
    }
    pub fn center(&self) -> [f64; 2] {
        self.center
    }
    /// `T = (n_t - 1) dt`.
    pub fn duration(&self) -> f64 {
        (self.n_t - 1) as f64 * self.dt
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= alpha);
        out
    }

    fn ensure_compatible(&self, other: &Self) -> Result<()> {
        if self.n_t != other.n_t || self.n_theta != other.n_theta || self.dt != other.dt || self.radius != other.radius {
            return Err(Error::DegenerateTrace("traces sampled on different space-time grids".into()));
        }
        Ok(())
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.ensure_compatible(other)?;
        let mut out = self.clone();
        for (a, b) in out.values.iter_mut().zip(&other.values) {
            *a -= b;
        }
        Ok(out)
    }

    /// Linear interpolation in time onto `n_steps` uniform steps over the same duration.
    pub fn resample(&self, n_steps: usize) -> Result<Self> {
        if n_steps == 0 || self.n_t < 2 {
            return Err(Error::DegenerateTrace("cannot resample a single time level".into()));
        }
        let big_t = self.duration();
        let dt = big_t / n_steps as f64;
        let mut out = Self::zeros(n_steps + 1, self.n_theta, dt, self.radius, self.center);
        for n in 0..=n_steps {
            let pos = (n as f64 * dt / self.dt).min((self.n_t - 1) as f64);
            let lo = (pos.floor() as usize).min(self.n_t - 2);
            let w = pos - lo as f64;
            for k in 0..self.n_theta {
                out.values[n * self.n_theta + k] = (1.0 - w) * self.at(lo, k) + w * self.at(lo + 1, k);
            }
        }
        Ok(out)
    }
}
