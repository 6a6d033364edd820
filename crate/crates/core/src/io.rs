//! File formats: 16-bit PGM images with a JSON sidecar, and flat CSV for
//! fields (`x,y,value`) and boundary traces (`t,theta,value`).

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Grid2D, ScalarField};
use crate::trace::BoundaryTrace;

const PGM_MAXVAL: u32 = 65535;

/// Grid metadata stored next to a PGM image. `min`/`max` undo the 16-bit
/// quantization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PgmSidecar {
    pub nx: usize,
    pub ny: usize,
    pub h: f64,
    pub origin: [f64; 2],
    pub min: f64,
    pub max: f64,
}

pub fn sidecar_path(pgm: &Path) -> PathBuf {
    pgm.with_extension("json")
}

/// Encodes a field as binary PGM. The top image row is the largest `y`.
pub fn encode_pgm(field: &ScalarField) -> (Vec<u8>, PgmSidecar) {
    let g = *field.grid();
    let (min, max) = field.min_max();
    let span = max - min;
    let mut out = format!("P5\n{} {}\n{}\n", g.nx, g.ny, PGM_MAXVAL).into_bytes();
    out.reserve(2 * g.len());
    for j in (0..g.ny).rev() {
        for i in 0..g.nx {
            let q = if span > 0.0 {
                ((field.at(i, j) - min) / span * PGM_MAXVAL as f64).round() as u16
            } else {
                0
            };
            out.extend_from_slice(&q.to_be_bytes());
        }
    }
    (out, PgmSidecar { nx: g.nx, ny: g.ny, h: g.h, origin: g.origin, min, max })
}

fn pgm_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Parse("truncated PGM header".into()));
    }
    Ok(&bytes[start..*pos])
}

fn pgm_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = pgm_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .ok_or_else(|| Error::Parse(format!("bad PGM {what}")))
}

/// Raw PGM decode: `(width, height, maxval, samples)` with samples in file
/// order (top row first).
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, u32, Vec<u16>)> {
    let mut pos = 0;
    if pgm_token(bytes, &mut pos)? != b"P5" {
        return Err(Error::Parse("not a binary PGM (P5)".into()));
    }
    let w = pgm_number(bytes, &mut pos, "width")?;
    let hgt = pgm_number(bytes, &mut pos, "height")?;
    let maxval = pgm_number(bytes, &mut pos, "maxval")?;
    if w == 0 || hgt == 0 || maxval == 0 || maxval > PGM_MAXVAL as usize {
        return Err(Error::Parse(format!("bad PGM header {w}x{hgt} maxval {maxval}")));
    }
    // exactly one whitespace byte separates header and raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Parse("missing raster".into()));
    }
    pos += 1;
    let bps = if maxval > 255 { 2 } else { 1 };
    let n = w
        .checked_mul(hgt)
        .and_then(|n| n.checked_mul(bps))
        .ok_or_else(|| Error::Parse("PGM dimensions overflow".into()))?;
    let raster = &bytes[pos..];
    if raster.len() != n {
        return Err(Error::Parse(format!("expected {n} raster bytes, got {}", raster.len())));
    }
    let samples: Vec<u16> = if bps == 2 {
        raster.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    } else {
        raster.iter().map(|&b| b as u16).collect()
    };
    if samples.iter().any(|&s| s as usize > maxval) {
        return Err(Error::Parse("sample exceeds maxval".into()));
    }
    Ok((w, hgt, maxval as u32, samples))
}

pub fn decode_pgm(bytes: &[u8], meta: &PgmSidecar) -> Result<ScalarField> {
    let (w, hgt, maxval, samples) = parse_pgm(bytes)?;
    if w != meta.nx || hgt != meta.ny {
        return Err(Error::Parse(format!(
            "image is {w}x{hgt}, sidecar says {}x{}",
            meta.nx, meta.ny
        )));
    }
    if !(meta.min.is_finite() && meta.max.is_finite() && meta.max >= meta.min) {
        return Err(Error::Parse("sidecar range invalid".into()));
    }
    let grid = Grid2D::new(meta.nx, meta.ny, meta.h, meta.origin)?;
    let span = meta.max - meta.min;
    let mut values = vec![0.0; grid.len()];
    for (r, row) in samples.chunks_exact(w).enumerate() {
        let j = hgt - 1 - r;
        for (i, &s) in row.iter().enumerate() {
            values[grid.idx(i, j)] = meta.min + span * s as f64 / maxval as f64;
        }
    }
    ScalarField::new(grid, values)
}

pub fn parse_sidecar(bytes: &[u8]) -> Result<PgmSidecar> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    let meta: PgmSidecar = serde_path_to_error::deserialize(&mut *de)
        .map_err(|e| Error::Parse(format!("sidecar {}: {}", e.path(), e.inner())))?;
    de.end().map_err(|e| Error::Parse(format!("sidecar: {e}")))?;
    Ok(meta)
}

/// Writes `path` and its `.json` sidecar.
pub fn write_pgm(path: &Path, field: &ScalarField) -> Result<()> {
    let (bytes, meta) = encode_pgm(field);
    fs::write(path, bytes)?;
    let json = serde_json::to_vec_pretty(&meta).map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(sidecar_path(path), json)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<ScalarField> {
    let meta = parse_sidecar(&fs::read(sidecar_path(path))?)?;
    decode_pgm(&fs::read(path)?, &meta)
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse(format!("{other:?}")),
    }
}

#[derive(Serialize, Deserialize)]
struct FieldRow {
    x: f64,
    y: f64,
    value: f64,
}

#[derive(Serialize, Deserialize)]
struct TraceRow {
    t: f64,
    theta: f64,
    value: f64,
}

pub fn write_field_csv<W: Write>(w: W, field: &ScalarField) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let g = field.grid();
    for (k, &value) in field.values().iter().enumerate() {
        let [x, y] = g.point(k);
        wr.serialize(FieldRow { x, y, value }).map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

/// Sorted distinct coordinates, merging values closer than `tol`.
fn distinct(mut v: Vec<f64>, tol: f64) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v.dedup_by(|a, b| (*a - *b).abs() <= tol);
    v
}

fn uniform_axis(coords: &[f64], axis: &str) -> Result<(f64, f64)> {
    if coords.len() < 2 {
        return Err(Error::Parse(format!("{axis} axis has fewer than 2 nodes")));
    }
    let h = (coords[coords.len() - 1] - coords[0]) / (coords.len() - 1) as f64;
    for (k, &c) in coords.iter().enumerate() {
        if (c - (coords[0] + k as f64 * h)).abs() > 1e-6 * h {
            return Err(Error::Parse(format!("{axis} coordinates are not uniform")));
        }
    }
    Ok((coords[0], h))
}

/// Reads `x,y,value` rows in any order and rebuilds the uniform grid they
/// were sampled on.
pub fn read_field_csv<R: Read>(r: R) -> Result<ScalarField> {
    let mut rd = csv::Reader::from_reader(r);
    let rows: Vec<FieldRow> =
        rd.deserialize().collect::<std::result::Result<_, _>>().map_err(csv_err)?;
    if rows.iter().any(|r| !(r.x.is_finite() && r.y.is_finite() && r.value.is_finite())) {
        return Err(Error::Parse("non-finite entry".into()));
    }
    let span = rows
        .iter()
        .flat_map(|r| [r.x.abs(), r.y.abs()])
        .fold(1.0, f64::max);
    let tol = 1e-9 * span;
    let xs = distinct(rows.iter().map(|r| r.x).collect(), tol);
    let ys = distinct(rows.iter().map(|r| r.y).collect(), tol);
    let (x0, hx) = uniform_axis(&xs, "x")?;
    let (y0, hy) = uniform_axis(&ys, "y")?;
    if (hx - hy).abs() > 1e-6 * hx {
        return Err(Error::Parse(format!("spacing differs between axes: {hx} vs {hy}")));
    }
    let grid = Grid2D::new(xs.len(), ys.len(), hx, [x0, y0])?;
    if rows.len() != grid.len() {
        return Err(Error::Parse(format!("expected {} rows, got {}", grid.len(), rows.len())));
    }
    let mut values = vec![f64::NAN; grid.len()];
    for r in &rows {
        let i = ((r.x - x0) / hx).round() as usize;
        let j = ((r.y - y0) / hx).round() as usize;
        if i >= grid.nx || j >= grid.ny {
            return Err(Error::Parse(format!("node ({}, {}) off the grid", r.x, r.y)));
        }
        let k = grid.idx(i, j);
        if !values[k].is_nan() {
            return Err(Error::Parse(format!("duplicate node ({}, {})", r.x, r.y)));
        }
        values[k] = r.value;
    }
    ScalarField::new(grid, values)
}

pub fn trace_theta(k: usize, n_theta: usize) -> f64 {
    std::f64::consts::TAU * k as f64 / n_theta as f64
}

pub fn write_trace_csv<W: Write>(w: W, trace: &BoundaryTrace) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for n in 0..trace.n_t() {
        let t = n as f64 * trace.dt();
        for (k, &value) in trace.row(n).iter().enumerate() {
            wr.serialize(TraceRow { t, theta: trace_theta(k, trace.n_theta()), value })
                .map_err(csv_err)?;
        }
    }
    wr.flush()?;
    Ok(())
}

/// Reads a trace written time-major: all angles for `t_0`, then `t_1`, ...
/// The circle geometry is not stored in the file and must be supplied.
pub fn read_trace_csv<R: Read>(r: R, radius: f64, center: [f64; 2]) -> Result<BoundaryTrace> {
    let mut rd = csv::Reader::from_reader(r);
    let rows: Vec<TraceRow> =
        rd.deserialize().collect::<std::result::Result<_, _>>().map_err(csv_err)?;
    let Some(first) = rows.first() else {
        return Err(Error::Parse("empty trace".into()));
    };
    let n_theta = rows.iter().take_while(|r| r.t == first.t).count();
    if rows.len() % n_theta != 0 {
        return Err(Error::Parse(format!("{} rows do not fill {n_theta} angles", rows.len())));
    }
    let n_t = rows.len() / n_theta;
    if n_t < 2 {
        return Err(Error::Parse("trace needs at least two time levels".into()));
    }
    if first.t.abs() > 1e-12 {
        return Err(Error::Parse(format!("trace must start at t = 0, got {}", first.t)));
    }
    let dt = rows[n_theta].t;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Parse(format!("time step {dt} is not positive")));
    }
    for (m, r) in rows.iter().enumerate() {
        let (n, k) = (m / n_theta, m % n_theta);
        if (r.t - n as f64 * dt).abs() > 1e-9 * (1.0 + n as f64 * dt) {
            return Err(Error::Parse(format!("row {m}: t = {} off the uniform time grid", r.t)));
        }
        if (r.theta - trace_theta(k, n_theta)).abs() > 1e-9 {
            return Err(Error::Parse(format!("row {m}: theta = {} out of order", r.theta)));
        }
    }
    BoundaryTrace::new(rows.iter().map(|r| r.value).collect(), n_t, n_theta, dt, radius, center)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ScalarField {
        let g = Grid2D::new(40, 33, 0.05, [-1.0, -0.8]).unwrap();
        ScalarField::from_fn(g, |x, y| (3.0 * x).sin() * y + 0.25 * x)
    }

    #[test]
    fn pgm_roundtrip_within_quantization() {
        let f = sample();
        let (bytes, meta) = encode_pgm(&f);
        let back = decode_pgm(&bytes, &meta).unwrap();
        assert_eq!(back.grid(), f.grid());
        let tol = (meta.max - meta.min) / PGM_MAXVAL as f64;
        for (a, b) in f.values().iter().zip(back.values()) {
            assert!((a - b).abs() <= 0.5 * tol + 1e-15);
        }
    }

    #[test]
    fn pgm_top_row_is_largest_y() {
        let g = Grid2D::new(32, 32, 0.1, [0.0, 0.0]).unwrap();
        let f = ScalarField::from_fn(g, |_, y| y);
        let (bytes, _) = encode_pgm(&f);
        let (_, _, _, s) = parse_pgm(&bytes).unwrap();
        assert_eq!(s[0], 65535);
        assert_eq!(s[s.len() - 1], 0);
    }

    #[test]
    fn pgm_rejects_garbage() {
        assert!(parse_pgm(b"P2\n2 2\n255\n").is_err());
        assert!(parse_pgm(b"P5\n2 2\n255\n\x00\x01\x02").is_err());
        assert!(parse_pgm(b"P5\n2 2\n70000\n").is_err());
        assert!(parse_pgm(b"P5\n# comment\n2 1\n255\n\x00\x01").is_ok());
    }

    #[test]
    fn pgm_files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.pgm");
        write_pgm(&p, &sample()).unwrap();
        assert!(sidecar_path(&p).exists());
        let back = read_pgm(&p).unwrap();
        assert_eq!(back.grid(), sample().grid());
    }

    #[test]
    fn field_csv_roundtrip_exact() {
        let f = sample();
        let mut buf = Vec::new();
        write_field_csv(&mut buf, &f).unwrap();
        assert!(buf.starts_with(b"x,y,value\n"));
        let back = read_field_csv(buf.as_slice()).unwrap();
        assert_eq!(back.grid().nx, 40);
        assert_eq!(back.grid().ny, 33);
        assert!((back.grid().h - 0.05).abs() < 1e-12);
        assert_eq!(back.values(), f.values());
    }

    #[test]
    fn field_csv_rejects_holes_and_duplicates() {
        let f = sample();
        let mut buf = Vec::new();
        write_field_csv(&mut buf, &f).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        let dup = lines[2];
        lines[5] = dup;
        assert!(read_field_csv(lines.join("\n").as_bytes()).is_err());
        lines.remove(5);
        assert!(read_field_csv(lines.join("\n").as_bytes()).is_err());
    }

    #[test]
    fn trace_csv_roundtrip() {
        let vals: Vec<f64> = (0..5 * 16).map(|k| (k as f64 * 0.37).cos()).collect();
        let tr = BoundaryTrace::new(vals, 5, 16, 0.01, 1.0, [0.0, 0.0]).unwrap();
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &tr).unwrap();
        assert!(buf.starts_with(b"t,theta,value\n"));
        let back = read_trace_csv(buf.as_slice(), 1.0, [0.0, 0.0]).unwrap();
        assert_eq!(back.n_t(), 5);
        assert_eq!(back.n_theta(), 16);
        assert!((back.dt() - 0.01).abs() < 1e-15);
        assert_eq!(back.values(), tr.values());
    }

    #[test]
    fn trace_csv_rejects_shuffled_angles() {
        let csv = "t,theta,value\n0,0,1\n0,3.14159,2\n0.1,3.14159,3\n0.1,0,4\n";
        assert!(read_trace_csv(csv.as_bytes(), 1.0, [0.0, 0.0]).is_err());
        assert!(read_trace_csv("t,theta,value\n".as_bytes(), 1.0, [0.0, 0.0]).is_err());
    }
}
