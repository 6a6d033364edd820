//! The disk domain M, the concentric support disk K and their discrete
//! representation on a uniform grid.
//!
//! The boundary of M is kept twice: exactly, as `N_theta` equispaced points on
//! the circle (used for traces and geometric checks), and approximately, as a
//! classification of grid nodes (used by interior solves). Quadrature weights
//! are exact cell/disk intersection areas, which keeps domain integrals second
//! order despite the staircase.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::Grid2D;
use crate::interp::{bilinear_weights, periodic_cubic_weights, sample_angle};

/// Spatial dimension. The conformal weight is `mu = c^(DIM - 2)`.
pub const DIM: i32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum NodeClass {
    Exterior,
    /// Inside M with all four neighbours inside M.
    Interior,
    /// Inside M with at least one neighbour outside; carries Dirichlet data.
    NearBoundary,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CompactSupport {
    pub center: [f64; 2],
    pub radius: f64,
    /// `R_M - R_K`.
    pub margin: f64,
}

impl CompactSupport {
    #[inline]
    pub fn contains(&self, p: [f64; 2]) -> bool {
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        dx * dx + dy * dy <= self.radius * self.radius
    }

    pub fn distance(&self, p: [f64; 2]) -> f64 {
        let d = ((p[0] - self.center[0]).powi(2) + (p[1] - self.center[1]).powi(2)).sqrt();
        (d - self.radius).max(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundarySample {
    pub theta: f64,
    pub point: [f64; 2],
    pub arclength: f64,
}

/// Dirichlet node of the interior solves.
///
/// Its value is linear interpolation along the ray from the centre between
/// the boundary datum at angle `theta` and the bilinear value at an inner
/// point `Q` whose stencil only touches `Interior` nodes:
/// `u = (1 - inner_weight) g(theta) + inner_weight * sum(inner)`.
#[derive(Debug, Clone)]
pub struct BoundaryNode {
    pub node: usize,
    pub theta: f64,
    pub theta_stencil: [(usize, f64); 4],
    pub inner: [(usize, f64); 4],
    pub inner_weight: f64,
}

#[derive(Debug, Clone)]
pub struct DomainMask {
    grid: Grid2D,
    center: [f64; 2],
    radius: f64,
    class: Vec<NodeClass>,
    cell_area: Vec<f64>,
    weights: Vec<f64>,
    inside: Vec<usize>,
    interior: Vec<usize>,
    near_boundary: Vec<BoundaryNode>,
    boundary: Vec<BoundarySample>,
}

impl DomainMask {
    pub fn grid(&self) -> &Grid2D {
        &self.grid
    }
    pub fn center(&self) -> [f64; 2] {
        self.center
    }
    pub fn radius(&self) -> f64 {
        self.radius
    }
    pub fn class(&self, idx: usize) -> NodeClass {
        self.class[idx]
    }
    pub fn classes(&self) -> &[NodeClass] {
        &self.class
    }
    /// `|cell(idx) ∩ M|` for every grid node, including exterior nodes whose
    /// cell overlaps the disk.
    pub fn cell_areas(&self) -> &[f64] {
        &self.cell_area
    }
    /// Quadrature weights supported on inside nodes only (exterior overlap
    /// folded onto the nearest inside neighbour). They sum to the disk area.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
    /// Interior and near-boundary nodes.
    pub fn inside_nodes(&self) -> &[usize] {
        &self.inside
    }
    pub fn interior_nodes(&self) -> &[usize] {
        &self.interior
    }
    pub fn near_boundary(&self) -> &[BoundaryNode] {
        &self.near_boundary
    }
    pub fn boundary(&self) -> &[BoundarySample] {
        &self.boundary
    }
    pub fn n_theta(&self) -> usize {
        self.boundary.len()
    }
    /// Arclength element between consecutive boundary samples.
    pub fn ds(&self) -> f64 {
        2.0 * std::f64::consts::PI * self.radius / self.boundary.len() as f64
    }
    pub fn is_inside(&self, idx: usize) -> bool {
        self.class[idx] != NodeClass::Exterior
    }
    /// Smallest distance from the circle to the edge of the grid box.
    pub fn padding(&self) -> f64 {
        let lo = self.grid.lower();
        let hi = self.grid.upper();
        let c = self.center;
        [c[0] - lo[0], c[1] - lo[1], hi[0] - c[0], hi[1] - c[1]]
            .into_iter()
            .fold(f64::INFINITY, f64::min)
            - self.radius
    }
    /// Outward unit normal at a boundary sample.
    pub fn normal(&self, sample: &BoundarySample) -> [f64; 2] {
        [sample.theta.cos(), sample.theta.sin()]
    }
    pub fn area(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Builds the disk M of radius `r_m` and the concentric support disk K of
/// radius `r_k`, both centred at `center`.
pub fn build_disk_domain(
    grid: Grid2D,
    center: [f64; 2],
    r_m: f64,
    r_k: f64,
    n_theta: usize,
) -> Result<(DomainMask, CompactSupport)> {
    if !(r_k > 0.0) || r_k >= r_m {
        return Err(Error::InvalidRadii { r_k, r_m });
    }
    if n_theta < 64 {
        return Err(Error::InvalidArgument(format!("N_theta must be at least 64, got {n_theta}")));
    }
    let h = grid.h;
    if r_m - r_k < 4.0 * h {
        return Err(Error::InvalidArgument(format!(
            "gap between K and the boundary ({:.4}) must be at least 4h = {:.4}",
            r_m - r_k,
            4.0 * h
        )));
    }
    let lo = grid.lower();
    let hi = grid.upper();
    let need = r_m + 4.0 * h;
    if center[0] - need < lo[0] || center[1] - need < lo[1] || center[0] + need > hi[0] || center[1] + need > hi[1] {
        return Err(Error::GeometryDoesNotFit(format!(
            "disk of radius {r_m} at ({}, {}) plus 4 nodes of padding exceeds the grid box [{}, {}] x [{}, {}]",
            center[0], center[1], lo[0], hi[0], lo[1], hi[1]
        )));
    }

    let n = grid.len();
    let r2 = r_m * r_m;
    let rel = |k: usize| {
        let p = grid.point(k);
        [p[0] - center[0], p[1] - center[1]]
    };
    let is_in = |k: usize| {
        let q = rel(k);
        q[0] * q[0] + q[1] * q[1] < r2
    };

    let mut class = vec![NodeClass::Exterior; n];
    for j in 1..grid.ny - 1 {
        for i in 1..grid.nx - 1 {
            let k = grid.idx(i, j);
            if !is_in(k) {
                continue;
            }
            let all_in = [grid.idx(i + 1, j), grid.idx(i - 1, j), grid.idx(i, j + 1), grid.idx(i, j - 1)]
                .into_iter()
                .all(is_in);
            class[k] = if all_in { NodeClass::Interior } else { NodeClass::NearBoundary };
        }
    }

    let mut cell_area = vec![0.0; n];
    for (k, area) in cell_area.iter_mut().enumerate() {
        let q = rel(k);
        let d = (q[0] * q[0] + q[1] * q[1]).sqrt();
        if d - std::f64::consts::FRAC_1_SQRT_2 * h >= r_m {
            continue;
        }
        *area = rect_disk_area(q[0] - 0.5 * h, q[0] + 0.5 * h, q[1] - 0.5 * h, q[1] + 0.5 * h, r_m);
    }

    let mut weights = vec![0.0; n];
    for k in 0..n {
        if class[k] != NodeClass::Exterior {
            weights[k] += cell_area[k];
        } else if cell_area[k] > 0.0 {
            let target = nearest_inside(&grid, &class, k, &rel).ok_or_else(|| {
                Error::GeometryDoesNotFit("boundary cell has no inside neighbour; grid too coarse".into())
            })?;
            weights[target] += cell_area[k];
        }
    }

    let inside: Vec<usize> = (0..n).filter(|&k| class[k] != NodeClass::Exterior).collect();
    let interior: Vec<usize> = (0..n).filter(|&k| class[k] == NodeClass::Interior).collect();

    let mut near_boundary = Vec::new();
    for k in 0..n {
        if class[k] != NodeClass::NearBoundary {
            continue;
        }
        let q = rel(k);
        let r = (q[0] * q[0] + q[1] * q[1]).sqrt();
        let e = [q[0] / r, q[1] / r];
        let theta = q[1].atan2(q[0]).rem_euclid(2.0 * std::f64::consts::PI);
        let gap = r_m - r;
        let mut depth = 2.0 * h;
        let inner = loop {
            if depth > r.min(8.0 * h) {
                return Err(Error::GeometryDoesNotFit(format!(
                    "no interior stencil for boundary node at radius {r:.4}; grid too coarse for the disk"
                )));
            }
            let p = grid.point(k);
            let qpt = [p[0] - depth * e[0], p[1] - depth * e[1]];
            if let Some(st) = bilinear_weights(&grid, qpt) {
                if st.iter().all(|&(m, _)| class[m] == NodeClass::Interior) {
                    break st;
                }
            }
            depth += 0.5 * h;
        };
        near_boundary.push(BoundaryNode {
            node: k,
            theta,
            theta_stencil: periodic_cubic_weights(n_theta, theta),
            inner,
            inner_weight: gap / (depth + gap),
        });
    }

    let boundary = (0..n_theta)
        .map(|k| {
            let theta = sample_angle(k, n_theta);
            BoundarySample {
                theta,
                point: [center[0] + r_m * theta.cos(), center[1] + r_m * theta.sin()],
                arclength: r_m * theta,
            }
        })
        .collect();

    let mask = DomainMask {
        grid,
        center,
        radius: r_m,
        class,
        cell_area,
        weights,
        inside,
        interior,
        near_boundary,
        boundary,
    };
    let support = CompactSupport { center, radius: r_k, margin: r_m - r_k };
    Ok((mask, support))
}

fn nearest_inside(
    grid: &Grid2D,
    class: &[NodeClass],
    k: usize,
    rel: &impl Fn(usize) -> [f64; 2],
) -> Option<usize> {
    const RINGS: [&[(i64, i64)]; 3] = [
        &[(1, 0), (-1, 0), (0, 1), (0, -1)],
        &[(1, 1), (1, -1), (-1, 1), (-1, -1)],
        &[
            (2, 0), (-2, 0), (0, 2), (0, -2), (2, 1), (2, -1), (-2, 1), (-2, -1),
            (1, 2), (-1, 2), (1, -2), (-1, -2), (2, 2), (2, -2), (-2, 2), (-2, -2),
        ],
    ];
    let (i, j) = grid.ij(k);
    for ring in RINGS {
        let best = ring
            .iter()
            .filter_map(|&(di, dj)| {
                let ii = i as i64 + di;
                let jj = j as i64 + dj;
                if ii < 0 || jj < 0 || ii >= grid.nx as i64 || jj >= grid.ny as i64 {
                    return None;
                }
                let m = grid.idx(ii as usize, jj as usize);
                (class[m] != NodeClass::Exterior).then(|| {
                    let q = rel(m);
                    (q[0] * q[0] + q[1] * q[1], m)
                })
            })
            .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        if let Some((_, m)) = best {
            return Some(m);
        }
    }
    None
}

/// Exact area of `[x0, x1] x [y0, y1]` intersected with the disk of radius
/// `r` centred at the origin.
pub fn rect_disk_area(x0: f64, x1: f64, y0: f64, y1: f64, r: f64) -> f64 {
    let xa = x0.max(-r);
    let xb = x1.min(r);
    if xa >= xb || y0 >= y1 {
        return 0.0;
    }
    let mut cuts = vec![xa, xb];
    for y in [y0, y1] {
        if y.abs() < r {
            let s = (r * r - y * y).sqrt();
            for c in [-s, s] {
                if c > xa && c < xb {
                    cuts.push(c);
                }
            }
        }
    }
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let half_chord = |x: f64| (r * r - x * x).max(0.0).sqrt();
    // antiderivative of sqrt(r^2 - x^2)
    let big_s = |x: f64| {
        let x = x.clamp(-r, r);
        0.5 * (x * half_chord(x) + r * r * (x / r).asin())
    };
    let mut area = 0.0;
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b <= a {
            continue;
        }
        let m = 0.5 * (a + b);
        let s = half_chord(m);
        let top_is_y1 = y1 < s;
        let bottom_is_y0 = y0 > -s;
        let top = if top_is_y1 { y1 } else { s };
        let bottom = if bottom_is_y0 { y0 } else { -s };
        if top <= bottom {
            continue;
        }
        let dx = b - a;
        let int_top = if top_is_y1 { y1 * dx } else { big_s(b) - big_s(a) };
        let int_bottom = if bottom_is_y0 { y0 * dx } else { -(big_s(b) - big_s(a)) };
        area += int_top - int_bottom;
    }
    area
}

const GAUSS8: [(f64, f64); 8] = [
    (-0.960_289_856_497_536_3, 0.101_228_536_290_376_26),
    (-0.796_666_477_413_626_7, 0.222_381_034_453_374_47),
    (-0.525_532_409_916_329, 0.313_706_645_877_887_3),
    (-0.183_434_642_495_649_8, 0.362_683_783_378_362),
    (0.183_434_642_495_649_8, 0.362_683_783_378_362),
    (0.525_532_409_916_329, 0.313_706_645_877_887_3),
    (0.796_666_477_413_626_7, 0.222_381_034_453_374_47),
    (0.960_289_856_497_536_3, 0.101_228_536_290_376_26),
];

/// Moments `[∫1, ∫x, ∫y, ∫x^2, ∫y^2, ∫xy]` of `[x0,x1]×[y0,y1] ∩ {|x| < r}`.
///
/// Pieces bounded by the circle are integrated in the angle `x = r sin φ`,
/// where the integrand is smooth, with 8-point Gauss rules.
pub fn rect_disk_moments(x0: f64, x1: f64, y0: f64, y1: f64, r: f64) -> [f64; 6] {
    let mut m = [0.0; 6];
    let xa = x0.max(-r);
    let xb = x1.min(r);
    if xa >= xb || y0 >= y1 {
        return m;
    }
    let mut cuts = vec![xa, xb];
    for y in [y0, y1] {
        if y.abs() < r {
            let s = (r * r - y * y).sqrt();
            for c in [-s, s] {
                if c > xa && c < xb {
                    cuts.push(c);
                }
            }
        }
    }
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let half_chord = |x: f64| (r * r - x * x).max(0.0).sqrt();
    // ∫ y^k dy over [lo, hi] for k = 0, 1, 2
    let column = |x: f64, lo: f64, hi: f64, w: f64, m: &mut [f64; 6]| {
        if hi <= lo {
            return;
        }
        let i0 = hi - lo;
        let i1 = (hi * hi - lo * lo) / 2.0;
        let i2 = (hi.powi(3) - lo.powi(3)) / 3.0;
        m[0] += w * i0;
        m[1] += w * x * i0;
        m[2] += w * i1;
        m[3] += w * x * x * i0;
        m[4] += w * i2;
        m[5] += w * x * i1;
    };
    for win in cuts.windows(2) {
        let (a, b) = (win[0], win[1]);
        if b <= a {
            continue;
        }
        let s = half_chord(0.5 * (a + b));
        let top_circle = y1 >= s;
        let bottom_circle = y0 <= -s;
        let bounds = |x: f64| {
            let s = half_chord(x);
            (if bottom_circle { -s } else { y0 }, if top_circle { s } else { y1 })
        };
        if top_circle || bottom_circle {
            let (pa, pb) = ((a / r).clamp(-1.0, 1.0).asin(), (b / r).clamp(-1.0, 1.0).asin());
            let pieces = ((pb - pa) / 0.1).ceil().max(1.0) as usize;
            let step = (pb - pa) / pieces as f64;
            for piece in 0..pieces {
                let p0 = pa + piece as f64 * step;
                for &(z, w) in &GAUSS8 {
                    let phi = p0 + 0.5 * step * (1.0 + z);
                    let x = r * phi.sin();
                    let (lo, hi) = bounds(x);
                    column(x, lo, hi, w * 0.5 * step * r * phi.cos(), &mut m);
                }
            }
        } else {
            for &(z, w) in &GAUSS8 {
                let x = 0.5 * (a + b) + 0.5 * (b - a) * z;
                column(x, y0, y1, w * 0.5 * (b - a), &mut m);
            }
        }
    }
    m
}
