//! Discrete Sobolev norms: H1 on M, H^s on the support disk K (Fourier
//! multiplier), and the H1 norm of traces on the boundary cylinder.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::field::ScalarField;
use crate::geometry::{CompactSupport, DomainMask};
use crate::trace::BoundaryTrace;

/// Relative threshold below which a field counts as vanishing outside a region.
pub const SUPPORT_TOL: f64 = 1e-12;

/// `sqrt(sum_inside w (u^2 + |grad_h u|^2))`. Central differences where both
/// neighbours are inside M, one-sided towards the inside neighbour otherwise.
pub fn h1_norm(field: &ScalarField, mask: &DomainMask) -> Result<f64> {
    Ok(h1_norm_squared(field, mask)?.sqrt())
}

pub fn h1_norm_squared(field: &ScalarField, mask: &DomainMask) -> Result<f64> {
    if field.grid() != mask.grid() {
        return Err(Error::GridMismatch);
    }
    let g = field.grid();
    let u = field.values();
    let w = mask.weights();
    let h = g.h;
    let mut total = 0.0;
    for &k in mask.inside_nodes() {
        let (gx, gy) = gradient_inside(mask, u, k, h);
        total += w[k] * (u[k] * u[k] + gx * gx + gy * gy);
    }
    Ok(total)
}

/// Plain L2 norm over M with the same quadrature.
pub fn l2_norm(field: &ScalarField, mask: &DomainMask) -> Result<f64> {
    if field.grid() != mask.grid() {
        return Err(Error::GridMismatch);
    }
    let u = field.values();
    let w = mask.weights();
    Ok(mask.inside_nodes().iter().map(|&k| w[k] * u[k] * u[k]).sum::<f64>().sqrt())
}

#[inline]
fn gradient_inside(mask: &DomainMask, u: &[f64], k: usize, h: f64) -> (f64, f64) {
    let nx = mask.grid().nx;
    let d = |plus: usize, minus: usize| -> f64 {
        match (mask.is_inside(plus), mask.is_inside(minus)) {
            (true, true) => (u[plus] - u[minus]) / (2.0 * h),
            (true, false) => (u[plus] - u[k]) / h,
            (false, true) => (u[k] - u[minus]) / h,
            (false, false) => 0.0,
        }
    };
    (d(k + 1, k - 1), d(k + nx, k - nx))
}

/// Checks that `field` vanishes (relative to its maximum) outside `support`.
pub fn check_support(field: &ScalarField, support: &CompactSupport) -> Result<()> {
    let g = field.grid();
    let max = field.max_abs();
    let outside = field
        .values()
        .iter()
        .enumerate()
        .filter(|(k, _)| !support.contains(g.point(*k)))
        .fold(0.0f64, |m, (_, v)| m.max(v.abs()));
    if outside > SUPPORT_TOL * max {
        return Err(Error::SupportViolation { region: "K", outside, max });
    }
    Ok(())
}

/// Checks that `field` vanishes outside the open disk M.
pub fn check_support_in_domain(field: &ScalarField, mask: &DomainMask) -> Result<()> {
    if field.grid() != mask.grid() {
        return Err(Error::GridMismatch);
    }
    let max = field.max_abs();
    let outside = field
        .values()
        .iter()
        .enumerate()
        .filter(|(k, _)| !mask.is_inside(*k))
        .fold(0.0f64, |m, (_, v)| m.max(v.abs()));
    if outside > SUPPORT_TOL * max {
        return Err(Error::SupportViolation { region: "M", outside, max });
    }
    Ok(())
}

/// H^s norm of a field supported in K, `s` in `0..=3`.
///
/// The bounding box of K is embedded in a periodic box of twice its side and
/// `sum (1 + |xi|^2)^s |f_hat(xi)|^2` is evaluated with the discrete Fourier
/// transform (Parseval), so `s = 0` is exactly the discrete L2 norm.
pub fn hs_norm_compact(field: &ScalarField, support: &CompactSupport, s: u32) -> Result<f64> {
    Ok(hs_norms_compact(field, support, &[s])?[0])
}

/// Several H^s norms from a single transform.
pub fn hs_norms_compact(field: &ScalarField, support: &CompactSupport, orders: &[u32]) -> Result<Vec<f64>> {
    if let Some(s) = orders.iter().find(|&&s| s > 3) {
        return Err(Error::InvalidArgument(format!("H^s order must be in 0..=3, got {s}")));
    }
    check_support(field, support)?;
    let g = field.grid();
    let h = g.h;
    let lo = g.to_index_space([support.center[0] - support.radius, support.center[1] - support.radius]);
    let hi = g.to_index_space([support.center[0] + support.radius, support.center[1] + support.radius]);
    let i0 = (lo[0].floor().max(0.0)) as usize;
    let j0 = (lo[1].floor().max(0.0)) as usize;
    let i1 = (hi[0].ceil() as usize).min(g.nx - 1);
    let j1 = (hi[1].ceil() as usize).min(g.ny - 1);
    let side = (i1 - i0 + 1).max(j1 - j0 + 1);
    let n = 2 * side;

    let mut data = vec![Complex64::new(0.0, 0.0); n * n];
    for j in j0..=j1 {
        for i in i0..=i1 {
            data[(j - j0) * n + (i - i0)] = Complex64::new(field.at(i, j), 0.0);
        }
    }
    fft2(&mut data, n);

    let dk = 2.0 * std::f64::consts::PI / (n as f64 * h);
    let freq = |k: usize| -> f64 {
        let m = if k < n.div_ceil(2) { k as f64 } else { k as f64 - n as f64 };
        m * dk
    };
    let mut sums = vec![0.0; orders.len()];
    for b in 0..n {
        let ky = freq(b);
        for a in 0..n {
            let kx = freq(a);
            let weight = 1.0 + kx * kx + ky * ky;
            let p = data[b * n + a].norm_sqr();
            for (acc, &s) in sums.iter_mut().zip(orders) {
                *acc += weight.powi(s as i32) * p;
            }
        }
    }
    let scale = h * h / (n * n) as f64;
    Ok(sums.into_iter().map(|v| (v * scale).sqrt()).collect())
}

fn fft2(data: &mut [Complex64], n: usize) {
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n);
    for row in data.chunks_mut(n) {
        fft.process(row);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); n];
    for a in 0..n {
        for b in 0..n {
            col[b] = data[b * n + a];
        }
        fft.process(&mut col);
        for b in 0..n {
            data[b * n + a] = col[b];
        }
    }
}

/// H1 norm on the boundary cylinder `(0, T) x ∂M` using the full space-time
/// gradient: `sum (h^2 + (d_t h)^2 + (d_theta h / R)^2) dt ds` with
/// trapezoidal weights in time.
pub fn trace_h1_norm(trace: &BoundaryTrace) -> Result<f64> {
    let n_t = trace.n_t();
    let n_th = trace.n_theta();
    if n_t < 3 || n_th < 3 {
        return Err(Error::DegenerateTrace(format!(
            "H1 norm needs at least 3x3 samples, got {n_t}x{n_th}"
        )));
    }
    let dt = trace.dt();
    let r = trace.radius();
    let dth = 2.0 * std::f64::consts::PI / n_th as f64;
    let ds = r * dth;
    let mut total = 0.0;
    for n in 0..n_t {
        let wt = if n == 0 || n == n_t - 1 { 0.5 * dt } else { dt };
        let row = trace.row(n);
        let mut acc = 0.0;
        for k in 0..n_th {
            let v = row[k];
            let vt = if n == 0 {
                (-3.0 * trace.at(0, k) + 4.0 * trace.at(1, k) - trace.at(2, k)) / (2.0 * dt)
            } else if n == n_t - 1 {
                (3.0 * trace.at(n, k) - 4.0 * trace.at(n - 1, k) + trace.at(n - 2, k)) / (2.0 * dt)
            } else {
                (trace.at(n + 1, k) - trace.at(n - 1, k)) / (2.0 * dt)
            };
            let vth = (row[(k + 1) % n_th] - row[(k + n_th - 1) % n_th]) / (2.0 * dth * r);
            acc += v * v + vt * vt + vth * vth;
        }
        total += wt * ds * acc;
    }
    Ok(total.sqrt())
}

/// L2 norm on the boundary cylinder.
pub fn trace_l2_norm(trace: &BoundaryTrace) -> f64 {
    let n_t = trace.n_t();
    let dt = trace.dt();
    let ds = 2.0 * std::f64::consts::PI * trace.radius() / trace.n_theta() as f64;
    let mut total = 0.0;
    for n in 0..n_t {
        let wt = if n == 0 || n == n_t - 1 { 0.5 * dt } else { dt };
        total += wt * ds * trace.row(n).iter().map(|v| v * v).sum::<f64>();
    }
    total.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Grid2D;
    use crate::geometry::build_disk_domain;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn domain(h: f64) -> (DomainMask, CompactSupport) {
        let g = Grid2D::centered([0.0, 0.0], 1.0 + 6.0 * h, h).unwrap();
        build_disk_domain(g, [0.0, 0.0], 1.0, 0.5, 128).unwrap()
    }

    fn random_bandlimited(grid: Grid2D, support: &CompactSupport, rng: &mut ChaCha8Rng) -> ScalarField {
        crate::field::random_bandlimited(grid, support, 6, 12.0, rng)
    }

    #[test]
    fn h1_of_zero_and_constant() {
        let (mask, _) = domain(1.0 / 64.0);
        let g = *mask.grid();
        assert_eq!(h1_norm(&ScalarField::zeros(g), &mask).unwrap(), 0.0);
        let one = ScalarField::constant(g, 1.0);
        assert!((h1_norm(&one, &mask).unwrap() - PI.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn h1_of_linear_function() {
        // ∫_disk x^2 = pi/4, |grad x|^2 = 1
        let (mask, _) = domain(1.0 / 64.0);
        let u = ScalarField::from_fn(*mask.grid(), |x, _| x);
        let want = (PI / 4.0 + PI).sqrt();
        assert!((h1_norm(&u, &mask).unwrap() - want).abs() < 1.0 / 64.0);
    }

    #[test]
    fn h1_converges_at_least_order_one_and_a_half() {
        // u = exp(x) cos(y): u^2 + |grad u|^2 = 2 exp(2x) cos^2 y + ... analytic in polar form
        let f = |x: f64, y: f64| x.exp() * y.cos();
        // oracle: fine polar quadrature of u^2 + |grad u|^2 = e^{2x}(cos^2 y + cos^2 y + sin^2 y)
        let integrand = |x: f64, y: f64| (2.0 * x).exp() * (1.0 + y.cos().powi(2));
        let (nr, nth) = (400, 800);
        let mut exact = 0.0;
        for a in 0..nr {
            // Gauss-free midpoint in r is second order; use many points
            let r = (a as f64 + 0.5) / nr as f64;
            for b in 0..nth {
                let t = 2.0 * PI * b as f64 / nth as f64;
                exact += integrand(r * t.cos(), r * t.sin()) * r;
            }
        }
        exact *= (1.0 / nr as f64) * (2.0 * PI / nth as f64);
        let errs: Vec<f64> = [1.0 / 32.0, 1.0 / 64.0, 1.0 / 128.0]
            .iter()
            .map(|&h| {
                let (mask, _) = domain(h);
                let u = ScalarField::from_fn(*mask.grid(), f);
                (h1_norm_squared(&u, &mask).unwrap() - exact).abs()
            })
            .collect();
        let o1 = (errs[0] / errs[1]).log2();
        let o2 = (errs[1] / errs[2]).log2();
        assert!(o1 >= 1.5 && o2 >= 1.5, "orders {o1} {o2}, errors {errs:?}");
    }

    #[test]
    fn norms_are_homogeneous_and_satisfy_triangle() {
        let (mask, support) = domain(1.0 / 48.0);
        let g = *mask.grid();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let a = random_bandlimited(g, &support, &mut rng);
            let b = random_bandlimited(g, &support, &mut rng);
            let sum = a.add_scaled(&b, 1.0).unwrap();
            let na = h1_norm(&a, &mask).unwrap();
            let nb = h1_norm(&b, &mask).unwrap();
            assert!(h1_norm(&sum, &mask).unwrap() <= na + nb + 1e-12);
            let sa = hs_norm_compact(&a, &support, 2).unwrap();
            let sb = hs_norm_compact(&b, &support, 2).unwrap();
            assert!(hs_norm_compact(&sum, &support, 2).unwrap() <= sa + sb + 1e-12);
        }
        let a = random_bandlimited(g, &support, &mut rng);
        for alpha in [-2.0, 0.5] {
            let sa = a.scaled(alpha);
            let n0 = h1_norm(&a, &mask).unwrap();
            assert!((h1_norm(&sa, &mask).unwrap() - alpha.abs() * n0).abs() <= 1e-12 * n0);
            for s in 0..=3 {
                let n0 = hs_norm_compact(&a, &support, s).unwrap();
                assert!((hs_norm_compact(&sa, &support, s).unwrap() - alpha.abs() * n0).abs() <= 1e-12 * n0);
            }
        }
    }

    #[test]
    fn hs_zero_is_discrete_l2() {
        let (mask, support) = domain(1.0 / 64.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_bandlimited(*mask.grid(), &support, &mut rng);
        let h = mask.grid().h;
        let l2 = (f.values().iter().map(|v| v * v).sum::<f64>() * h * h).sqrt();
        assert!((hs_norm_compact(&f, &support, 0).unwrap() - l2).abs() < 1e-12 * l2);
    }

    #[test]
    fn hs_single_mode_multiplier() {
        let (mask, support) = domain(1.0 / 128.0);
        let k = 40.0;
        let f = ScalarField::from_fn(*mask.grid(), |x, y| {
            let s = (x * x + y * y).sqrt() / support.radius;
            (k * x).sin() * crate::field::smooth_cutoff(s, 0.3)
        });
        let n = hs_norms_compact(&f, &support, &[0, 2]).unwrap();
        let ratio = n[1] / n[0];
        let want = 1.0 + k * k;
        assert!((ratio / want - 1.0).abs() < 0.05, "ratio {ratio}, want {want}");
    }

    #[test]
    fn hs_monotone_and_interpolation() {
        let (mask, support) = domain(1.0 / 48.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let f = random_bandlimited(*mask.grid(), &support, &mut rng);
            let n = hs_norms_compact(&f, &support, &[0, 1, 2, 3]).unwrap();
            assert!(n[0] <= n[1] && n[1] <= n[2] && n[2] <= n[3]);
            assert!(n[2] <= (n[1] * n[3]).sqrt() * (1.0 + 1e-10));
        }
    }

    #[test]
    fn hs_rejects_support_violation_and_bad_order() {
        let (mask, support) = domain(1.0 / 32.0);
        let f = ScalarField::constant(*mask.grid(), 1.0);
        assert!(matches!(hs_norm_compact(&f, &support, 1), Err(Error::SupportViolation { .. })));
        let z = ScalarField::zeros(*mask.grid());
        assert!(hs_norm_compact(&z, &support, 4).is_err());
    }

    #[test]
    fn trace_norm_cases() {
        let (n_t, n_th, dt, r) = (401, 128, 0.01, 1.0);
        let big_t = (n_t - 1) as f64 * dt;
        let zero = BoundaryTrace::zeros(n_t, n_th, dt, r, [0.0, 0.0]);
        assert_eq!(trace_h1_norm(&zero).unwrap(), 0.0);

        let one = BoundaryTrace::new(vec![1.0; n_t * n_th], n_t, n_th, dt, r, [0.0, 0.0]).unwrap();
        let want = (big_t * 2.0 * PI * r).sqrt();
        assert!((trace_h1_norm(&one).unwrap() - want).abs() < 1e-12 * want);

        let w = 3.0;
        let mut v = Vec::new();
        for n in 0..n_t {
            let t = n as f64 * dt;
            v.extend(std::iter::repeat((w * t).sin()).take(n_th));
        }
        let tr = BoundaryTrace::new(v, n_t, n_th, dt, r, [0.0, 0.0]).unwrap();
        // ∫_0^T sin^2 + w^2 cos^2 = T/2 - sin(2wT)/(4w) + w^2 (T/2 + sin(2wT)/(4w))
        let s = (2.0 * w * big_t).sin() / (4.0 * w);
        let exact = 2.0 * PI * r * (big_t / 2.0 - s + w * w * (big_t / 2.0 + s));
        let got = trace_h1_norm(&tr).unwrap().powi(2);
        assert!((got - exact).abs() < 1e-3 * exact, "{got} vs {exact}");

        let thin = BoundaryTrace::zeros(2, n_th, dt, r, [0.0, 0.0]);
        assert!(trace_h1_norm(&thin).is_err());
    }
}
