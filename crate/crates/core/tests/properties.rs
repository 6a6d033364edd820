use std::sync::OnceLock;

use pat_lab::carleman::{carleman_tau, observability_threshold};
use pat_lab::config::parse_config;
use pat_lab::field::random_bandlimited;
use pat_lab::geodesics::{exit_time, trace_ray, Medium};
use pat_lab::geometry::{rect_disk_area, rect_disk_moments};
use pat_lab::io::{decode_pgm, encode_pgm, read_field_csv, read_trace_csv, write_field_csv, write_trace_csv};
use pat_lab::norms::{h1_norm, hs_norms_compact, l2_norm};
use pat_lab::time_reversal::harmonic_extension;
use pat_lab::{build_disk_domain, BoundaryTrace, CompactSupport, DomainMask, Grid2D, ScalarField, SmoothBump, SpeedField};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn domain() -> &'static (DomainMask, CompactSupport) {
    static D: OnceLock<(DomainMask, CompactSupport)> = OnceLock::new();
    D.get_or_init(|| {
        let g = Grid2D::centered([0.0, 0.0], 1.2, 1.0 / 32.0).unwrap();
        build_disk_domain(g, [0.0, 0.0], 1.0, 0.6, 128).unwrap()
    })
}

fn medium() -> &'static (Medium, DomainMask) {
    static M: OnceLock<(Medium, DomainMask)> = OnceLock::new();
    M.get_or_init(|| {
        let g = Grid2D::centered([0.0, 0.0], 1.4, 1.0 / 64.0).unwrap();
        let mask = build_disk_domain(g, [0.0, 0.0], 1.0, 0.5, 256).unwrap().0;
        let c = SpeedField::with_bumps(g, 1.0, &[SmoothBump { center: [0.1, -0.1], radius: 0.7, amplitude: 0.15 }]).unwrap();
        (Medium::new(&c), mask)
    })
}

fn field(seed: u64, k_max: f64) -> ScalarField {
    let (mask, support) = domain();
    random_bandlimited(*mask.grid(), support, 5, k_max, &mut ChaCha8Rng::seed_from_u64(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn norms_are_homogeneous(seed in any::<u64>(), alpha in -3.0f64..3.0) {
        let (mask, support) = domain();
        let f = field(seed, 5.0);
        let g = f.scaled(alpha);
        for (a, b) in [(h1_norm(&g, mask).unwrap(), h1_norm(&f, mask).unwrap()), (l2_norm(&g, mask).unwrap(), l2_norm(&f, mask).unwrap())] {
            prop_assert!((a - alpha.abs() * b).abs() <= 1e-12 * b.max(1e-300));
        }
        let hs_f = hs_norms_compact(&f, support, &[0, 1, 2, 3]).unwrap();
        let hs_g = hs_norms_compact(&g, support, &[0, 1, 2, 3]).unwrap();
        for (a, b) in hs_g.iter().zip(&hs_f) {
            prop_assert!((a - alpha.abs() * b).abs() <= 1e-12 * b.max(1e-300));
        }
    }

    #[test]
    fn norms_satisfy_triangle_inequality(s1 in any::<u64>(), s2 in any::<u64>()) {
        let (mask, support) = domain();
        let (f, g) = (field(s1, 4.0), field(s2, 8.0));
        let sum = f.add_scaled(&g, 1.0).unwrap();
        let h1 = |u: &ScalarField| h1_norm(u, mask).unwrap();
        prop_assert!(h1(&sum) <= (h1(&f) + h1(&g)) * (1.0 + 1e-12));
        let hs = |u: &ScalarField| hs_norms_compact(u, support, &[2]).unwrap()[0];
        prop_assert!(hs(&sum) <= (hs(&f) + hs(&g)) * (1.0 + 1e-12));
    }

    #[test]
    fn sobolev_scale_is_monotone_and_log_convex(seed in any::<u64>(), k_max in 1.0f64..15.0) {
        let (_, support) = domain();
        let n = hs_norms_compact(&field(seed, k_max), support, &[0, 1, 2, 3]).unwrap();
        for w in n.windows(2) {
            prop_assert!(w[0] <= w[1]);
        }
        for s in 1..3 {
            prop_assert!(n[s] <= (n[s - 1] * n[s + 1]).sqrt() * (1.0 + 1e-10));
        }
    }

    #[test]
    fn harmonic_extension_obeys_maximum_principle(coef in prop::collection::vec(-1.0f64..1.0, 6)) {
        let (mask, _) = domain();
        let data: Vec<f64> = mask
            .boundary()
            .iter()
            .map(|s| coef.iter().enumerate().map(|(k, a)| a * ((k / 2 + 1) as f64 * s.theta + (k % 2) as f64).cos()).sum())
            .collect();
        let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let phi = harmonic_extension(&data, mask).unwrap();
        for &k in mask.inside_nodes() {
            let v = phi.values()[k];
            prop_assert!(v >= lo - 1e-9 && v <= hi + 1e-9, "{v} outside [{lo}, {hi}]");
        }
    }

    #[test]
    fn cut_cell_moments_are_consistent(x0 in -1.5f64..1.5, y0 in -1.5f64..1.5, w in 0.01f64..1.0, hgt in 0.01f64..1.0, r in 0.2f64..1.5) {
        let m = rect_disk_moments(x0, x0 + w, y0, y0 + hgt, r);
        let a = rect_disk_area(x0, x0 + w, y0, y0 + hgt, r);
        prop_assert!((m[0] - a).abs() <= 1e-10 * (1.0 + a));
        prop_assert!(m[0] >= -1e-14 && m[0] <= w * hgt * (1.0 + 1e-12));
        if m[0] > 1e-9 {
            // centroid lies in the rectangle, second moments dominate squared means
            let (cx, cy) = (m[1] / m[0], m[2] / m[0]);
            prop_assert!(cx >= x0 - 1e-9 && cx <= x0 + w + 1e-9);
            prop_assert!(cy >= y0 - 1e-9 && cy <= y0 + hgt + 1e-9);
            prop_assert!(m[3] * m[0] >= m[1] * m[1] * (1.0 - 1e-9) - 1e-15);
            prop_assert!(m[4] * m[0] >= m[2] * m[2] * (1.0 - 1e-9) - 1e-15);
        }
    }

    #[test]
    fn tau_never_grows_with_r(rho in 0.05f64..2.0, r in 0.05f64..3.0, dr in 0.0f64..1.0, c1 in 0.0f64..5.0) {
        prop_assert!(carleman_tau(rho, r + dr, c1) <= carleman_tau(rho, r, c1));
        prop_assert!(carleman_tau(rho, r, c1) >= 1.0);
    }

    #[test]
    fn threshold_depends_only_on_weight_oscillation(c2 in 1.0f64..5.0, c3 in 0.5f64..3.0, beta in -5.0f64..5.0, osc in 0.0f64..6.0, shift in -10.0f64..10.0, tau in 1.0f64..4.0) {
        let (t0, l0) = observability_threshold(1.0, c2, c3, beta + osc, beta, tau);
        let (t1, l1) = observability_threshold(1.0, c2, c3, beta + osc + shift, beta + shift, tau);
        prop_assert!((l0 - l1).abs() <= 1e-12 * l0.abs().max(1.0));
        prop_assert!((t0 - t1).abs() <= 1e-12 * t0);
    }

    #[test]
    fn exit_time_ignores_covector_scale(r in 0.0f64..0.9, phi in 0.0f64..6.28, a in 0.0f64..6.28, alpha in 0.2f64..5.0) {
        let (med, mask) = medium();
        let x = [r * phi.cos(), r * phi.sin()];
        let d = [a.cos(), a.sin()];
        let t1 = exit_time(x, d, med, mask, 0.01).unwrap();
        let ta = exit_time(x, [alpha * d[0], alpha * d[1]], med, mask, 0.01).unwrap();
        prop_assert!((t1 - ta).abs() <= 1e-12 * t1);
    }

    #[test]
    fn rays_retrace_and_conserve_hamiltonian(r in 0.0f64..0.8, phi in 0.0f64..6.28, a in 0.0f64..6.28) {
        let (med, mask) = medium();
        let x0 = [r * phi.cos(), r * phi.sin()];
        let out = trace_ray(x0, [a.cos(), a.sin()], med, mask, 0.005, 10.0).unwrap();
        for s in &out.states {
            let (c, _) = med.eval(s.x).unwrap();
            prop_assert!((c * s.xi[0].hypot(s.xi[1]) - 1.0).abs() <= 1e-7 * (1.0 + s.t));
        }
        let e = out.exit.unwrap();
        let back = trace_ray(e.x, [-e.xi[0], -e.xi[1]], med, mask, 0.005, e.t).unwrap();
        let last = back.states.last().unwrap();
        prop_assert!((last.x[0] - x0[0]).hypot(last.x[1] - x0[1]) < 1e-5);
    }

    #[test]
    fn field_csv_roundtrips_exactly(seed in any::<u64>()) {
        let f = field(seed, 6.0);
        let mut buf = Vec::new();
        write_field_csv(&mut buf, &f).unwrap();
        let back = read_field_csv(buf.as_slice()).unwrap();
        prop_assert_eq!(back.values(), f.values());
        prop_assert_eq!(back.grid().nx, f.grid().nx);
        prop_assert!((back.grid().h - f.grid().h).abs() < 1e-12);
    }

    #[test]
    fn pgm_error_is_half_a_quantum(seed in any::<u64>(), scale in 1e-3f64..1e3) {
        let f = field(seed, 6.0).scaled(scale);
        let (bytes, meta) = encode_pgm(&f);
        let back = decode_pgm(&bytes, &meta).unwrap();
        let q = (meta.max - meta.min) / 65535.0;
        for (a, b) in f.values().iter().zip(back.values()) {
            prop_assert!((a - b).abs() <= 0.5 * q * (1.0 + 1e-9));
        }
    }

    #[test]
    fn trace_csv_roundtrips_exactly(vals in prop::collection::vec(-1e3f64..1e3, 3 * 8), dt in 1e-4f64..0.5) {
        let tr = BoundaryTrace::new(vals, 3, 8, dt, 1.0, [0.0, 0.0]).unwrap();
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &tr).unwrap();
        let back = read_trace_csv(buf.as_slice(), 1.0, [0.0, 0.0]).unwrap();
        prop_assert_eq!(back.values(), tr.values());
        prop_assert!((back.dt() - dt).abs() <= 1e-12 * dt);
    }

    #[test]
    fn config_parser_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        let _ = parse_config(&bytes);
    }
}
