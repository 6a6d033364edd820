//! Off-grid sampling of nodal fields.

use std::f64::consts::PI;

use crate::field::Grid2D;

/// Bilinear stencil of a point: four `(node, weight)` pairs, or `None`
/// when the point is outside the grid box.
pub fn bilinear_weights(grid: &Grid2D, p: [f64; 2]) -> Option<[(usize, f64); 4]> {
    let [fx, fy] = grid.to_index_space(p);
    if !(fx >= 0.0 && fy >= 0.0 && fx <= (grid.nx - 1) as f64 && fy <= (grid.ny - 1) as f64) {
        return None;
    }
    let i0 = (fx.floor() as usize).min(grid.nx - 2);
    let j0 = (fy.floor() as usize).min(grid.ny - 2);
    let tx = fx - i0 as f64;
    let ty = fy - j0 as f64;
    Some([
        (grid.idx(i0, j0), (1.0 - tx) * (1.0 - ty)),
        (grid.idx(i0 + 1, j0), tx * (1.0 - ty)),
        (grid.idx(i0, j0 + 1), (1.0 - tx) * ty),
        (grid.idx(i0 + 1, j0 + 1), tx * ty),
    ])
}

#[inline]
pub fn apply_stencil<const N: usize>(values: &[f64], stencil: &[(usize, f64); N]) -> f64 {
    stencil.iter().map(|&(k, w)| w * values[k]).sum()
}

pub fn bilinear(grid: &Grid2D, values: &[f64], p: [f64; 2]) -> Option<f64> {
    bilinear_weights(grid, p).map(|s| apply_stencil(values, &s))
}

#[inline]
fn lagrange4(t: f64) -> [f64; 4] {
    [
        -t * (t - 1.0) * (t - 2.0) / 6.0,
        (t + 1.0) * (t - 1.0) * (t - 2.0) / 2.0,
        -(t + 1.0) * t * (t - 2.0) / 2.0,
        (t + 1.0) * t * (t - 1.0) / 6.0,
    ]
}

/// Tensor-product cubic Lagrange stencil (16 nodes, fourth-order accurate).
pub fn cubic_weights(grid: &Grid2D, p: [f64; 2]) -> Option<[(usize, f64); 16]> {
    let [fx, fy] = grid.to_index_space(p);
    let (i0, tx) = cubic_base(fx, grid.nx)?;
    let (j0, ty) = cubic_base(fy, grid.ny)?;
    let wx = lagrange4(tx);
    let wy = lagrange4(ty);
    let mut out = [(0usize, 0.0f64); 16];
    for b in 0..4 {
        for a in 0..4 {
            out[b * 4 + a] = (grid.idx(i0 + a, j0 + b), wx[a] * wy[b]);
        }
    }
    Some(out)
}

pub fn cubic(grid: &Grid2D, values: &[f64], p: [f64; 2]) -> Option<f64> {
    cubic_weights(grid, p).map(|s| apply_stencil(values, &s))
}

/// First node of a 4-point stencil around fractional index `f`, and the offset in `[0, 1]`.
#[inline]
fn cubic_base(f: f64, n: usize) -> Option<(usize, f64)> {
    if !(f >= 1.0 && f <= (n - 2) as f64) {
        return None;
    }
    let base = (f.floor() as usize).min(n - 3);
    Some((base - 1, f - base as f64))
}

/// Tensor-product quintic B-spline interpolant (C4) with mirror boundaries.
///
/// Used where a smooth right-hand side matters: RK4 on rays only keeps its
/// order if `∇c` is several times differentiable.
#[derive(Debug, Clone)]
pub struct QuinticSpline {
    grid: Grid2D,
    coef: Vec<f64>,
}

const QUINTIC_POLES: [f64; 2] = [-0.430_575_347_099_973_8, -0.043_096_288_203_264_65];

fn prefilter(c: &mut [f64]) {
    let n = c.len();
    if n < 2 {
        return;
    }
    let gain: f64 = QUINTIC_POLES.iter().map(|z| (1.0 - z) * (1.0 - 1.0 / z)).product();
    c.iter_mut().for_each(|v| *v *= gain);
    for &z in &QUINTIC_POLES {
        c[0] = causal_init(c, z);
        for k in 1..n {
            c[k] += z * c[k - 1];
        }
        c[n - 1] = (z / (z * z - 1.0)) * (z * c[n - 2] + c[n - 1]);
        for k in (0..n - 1).rev() {
            c[k] = z * (c[k + 1] - c[k]);
        }
    }
}

fn causal_init(c: &[f64], z: f64) -> f64 {
    let n = c.len();
    let horizon = (f64::EPSILON.ln() / z.abs().ln()).ceil() as usize;
    if horizon < n {
        let mut zk = z;
        let mut sum = c[0];
        for v in &c[1..horizon] {
            sum += zk * v;
            zk *= z;
        }
        return sum;
    }
    let iz = 1.0 / z;
    let mut z1 = z;
    let mut zn = z.powi(n as i32 - 1);
    let mut sum = c[0] + zn * c[n - 1];
    zn *= zn * iz;
    for v in &c[1..n - 1] {
        sum += (z1 + zn) * v;
        z1 *= z;
        zn *= iz;
    }
    sum / (1.0 - z.powi(2 * n as i32 - 2))
}

/// Quintic B-spline and its derivative.
fn beta5(x: f64) -> (f64, f64) {
    let a = x.abs();
    let p = |t: f64, e: i32| if t > 0.0 { t.powi(e) } else { 0.0 };
    let v = (p(3.0 - a, 5) - 6.0 * p(2.0 - a, 5) + 15.0 * p(1.0 - a, 5)) / 120.0;
    let d = (-5.0 * p(3.0 - a, 4) + 30.0 * p(2.0 - a, 4) - 75.0 * p(1.0 - a, 4)) / 120.0;
    (v, d * x.signum())
}

impl QuinticSpline {
    pub fn new(grid: Grid2D, values: &[f64]) -> Self {
        let (nx, ny) = (grid.nx, grid.ny);
        let mut coef = values.to_vec();
        for j in 0..ny {
            prefilter(&mut coef[j * nx..(j + 1) * nx]);
        }
        let mut col = vec![0.0; ny];
        for i in 0..nx {
            for j in 0..ny {
                col[j] = coef[j * nx + i];
            }
            prefilter(&mut col);
            for j in 0..ny {
                coef[j * nx + i] = col[j];
            }
        }
        Self { grid, coef }
    }

    pub fn grid(&self) -> &Grid2D {
        &self.grid
    }

    /// Value and gradient; `None` unless the 6×6 support lies in the grid.
    pub fn value_grad(&self, p: [f64; 2]) -> Option<(f64, [f64; 2])> {
        let [fx, fy] = self.grid.to_index_space(p);
        if !(fx.is_finite() && fy.is_finite()) {
            return None;
        }
        let (bx, by) = (fx.floor() as i64, fy.floor() as i64);
        if bx < 2 || by < 2 || bx + 3 >= self.grid.nx as i64 || by + 3 >= self.grid.ny as i64 {
            return None;
        }
        let mut wx = [(0.0, 0.0); 6];
        let mut wy = [(0.0, 0.0); 6];
        for k in 0..6 {
            wx[k] = beta5(fx - (bx + k as i64 - 2) as f64);
            wy[k] = beta5(fy - (by + k as i64 - 2) as f64);
        }
        let (mut v, mut gx, mut gy) = (0.0, 0.0, 0.0);
        for b in 0..6 {
            let row = (by as usize + b - 2) * self.grid.nx + bx as usize - 2;
            let (mut rv, mut rd) = (0.0, 0.0);
            for a in 0..6 {
                let f = self.coef[row + a];
                rv += wx[a].0 * f;
                rd += wx[a].1 * f;
            }
            v += wy[b].0 * rv;
            gx += wy[b].0 * rd;
            gy += wy[b].1 * rv;
        }
        Some((v, [gx / self.grid.h, gy / self.grid.h]))
    }
}

/// Angle of sample `k` out of `n` equispaced samples on the circle.
#[inline]
pub fn sample_angle(k: usize, n: usize) -> f64 {
    2.0 * PI * k as f64 / n as f64
}

/// Four-point periodic Lagrange stencil for equispaced angular samples.
pub fn periodic_cubic_weights(n: usize, theta: f64) -> [(usize, f64); 4] {
    let pos = theta.rem_euclid(2.0 * PI) / (2.0 * PI) * n as f64;
    let base = pos.floor();
    let t = pos - base;
    let base = base as i64;
    let w = lagrange4(t);
    let wrap = |k: i64| k.rem_euclid(n as i64) as usize;
    [
        (wrap(base - 1), w[0]),
        (wrap(base), w[1]),
        (wrap(base + 1), w[2]),
        (wrap(base + 2), w[3]),
    ]
}

pub fn periodic_cubic(samples: &[f64], theta: f64) -> f64 {
    apply_stencil(samples, &periodic_cubic_weights(samples.len(), theta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> Grid2D {
        Grid2D::new(40, 36, 0.05, [-1.0, -0.9]).unwrap()
    }

    fn sample(g: &Grid2D, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        (0..g.len()).map(|k| {
            let p = g.point(k);
            f(p[0], p[1])
        }).collect()
    }

    #[test]
    fn quintic_spline_interpolates_and_differentiates() {
        let g = grid();
        let f = |x: f64, y: f64| (1.3 * x).sin() * (0.7 * y + 0.2).cos() + 0.1 * x * y;
        let v = sample(&g, f);
        let s = QuinticSpline::new(g, &v);
        for (i, j) in [(5, 7), (20, 18), (30, 25)] {
            let (val, _) = s.value_grad(g.point(g.idx(i, j))).unwrap();
            assert!((val - v[g.idx(i, j)]).abs() < 1e-12);
        }
        for p in [[0.013, 0.101], [-0.31, 0.27], [0.1, -0.05]] {
            let (val, gr) = s.value_grad(p).unwrap();
            assert!((val - f(p[0], p[1])).abs() < 1e-6);
            let ex = [1.3 * (1.3 * p[0]).cos() * (0.7 * p[1] + 0.2).cos() + 0.1 * p[1], -0.7 * (1.3 * p[0]).sin() * (0.7 * p[1] + 0.2).sin() + 0.1 * p[0]];
            assert!((gr[0] - ex[0]).abs() < 1e-5 && (gr[1] - ex[1]).abs() < 1e-5, "{gr:?} {ex:?}");
        }
        assert!(s.value_grad([-0.99, 0.0]).is_none());
    }

    #[test]
    fn quintic_spline_keeps_constants() {
        let g = grid();
        let s = QuinticSpline::new(g, &vec![2.5; g.len()]);
        let (v, gr) = s.value_grad([0.123, -0.2]).unwrap();
        assert!((v - 2.5).abs() < 1e-13 && gr[0].abs() < 1e-12 && gr[1].abs() < 1e-12);
    }

    #[test]
    fn bilinear_exact_for_bilinear_functions() {
        let g = grid();
        let v = sample(&g, |x, y| 1.0 + 2.0 * x - y + 0.5 * x * y);
        let p = [0.123, -0.31];
        let want = 1.0 + 2.0 * p[0] - p[1] + 0.5 * p[0] * p[1];
        assert!((bilinear(&g, &v, p).unwrap() - want).abs() < 1e-13);
        assert!(bilinear(&g, &v, [5.0, 0.0]).is_none());
    }

    #[test]
    fn cubic_exact_for_cubics() {
        let g = grid();
        let f = |x: f64, y: f64| x * x * x - 3.0 * x * y * y + 0.7 * y * y - x;
        let v = sample(&g, f);
        let p = [0.2113, 0.377];
        assert!((cubic(&g, &v, p).unwrap() - f(p[0], p[1])).abs() < 1e-12);
    }

    #[test]
    fn periodic_interpolation_of_cosines() {
        let n = 128;
        let s: Vec<f64> = (0..n).map(|k| (3.0 * sample_angle(k, n)).cos()).collect();
        for &th in &[0.0, 0.01, 1.234, 6.2, -0.4] {
            assert!((periodic_cubic(&s, th) - (3.0f64 * th).cos()).abs() < 1e-5);
        }
        assert!((periodic_cubic(&s, sample_angle(5, n)) - s[5]).abs() < 1e-14);
    }
}
