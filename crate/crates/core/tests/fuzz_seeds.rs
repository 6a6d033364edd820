//! Replays the checked-in fuzz corpus through the decoders, with the
//! accept/reject outcome each seed was written for.

use std::fs;
use std::path::PathBuf;

use pat_lab::config::parse_config;
use pat_lab::io::{decode_pgm, parse_pgm, parse_sidecar, read_field_csv, read_trace_csv};

fn seed(target: &str, name: &str) -> Vec<u8> {
    let p: PathBuf = [env!("CARGO_MANIFEST_DIR"), "../../fuzz/corpus", target, name].iter().collect();
    fs::read(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn config_seeds() {
    assert!(parse_config(&seed("parse_config", "default.json")).is_ok());
    assert!(parse_config(&seed("parse_config", "minimal.json")).is_ok());
    let e = parse_config(&seed("parse_config", "missing_rm.json")).unwrap_err().to_string();
    assert!(e.contains("domain.R_M"), "{e}");
    let e = parse_config(&seed("parse_config", "unknown_field.json")).unwrap_err().to_string();
    assert!(e.contains("nz"), "{e}");
}

#[test]
fn pgm_seeds() {
    let data = seed("read_pgm", "with_sidecar");
    let split = data.iter().position(|&b| b == 0).unwrap();
    let meta = parse_sidecar(&data[..split]).unwrap();
    let f = decode_pgm(&data[split + 1..], &meta).unwrap();
    assert_eq!((f.grid().nx, f.grid().ny), (32, 32));
    let (lo, hi) = f.min_max();
    assert!(lo >= meta.min && hi <= meta.max);
    assert_eq!(parse_pgm(&seed("read_pgm", "bare_8bit")).unwrap().2, 255);
    assert!(parse_pgm(&seed("read_pgm", "bare_16bit")).is_ok());
    assert!(parse_pgm(&seed("read_pgm", "truncated")).is_err());
}

#[test]
fn field_csv_seeds() {
    let a = read_field_csv(seed("read_field_csv", "gaussian.csv").as_slice()).unwrap();
    let b = read_field_csv(seed("read_field_csv", "shuffled.csv").as_slice()).unwrap();
    assert_eq!(a.values(), b.values());
    assert!((a.grid().h - 0.0625).abs() < 1e-12);
    assert!(read_field_csv(seed("read_field_csv", "hole.csv").as_slice()).is_err());
}

#[test]
fn trace_csv_seeds() {
    let t = read_trace_csv(seed("read_trace_csv", "small.csv").as_slice(), 1.0, [0.0, 0.0]).unwrap();
    assert_eq!((t.n_t(), t.n_theta()), (4, 8));
    assert!((t.dt() - 0.1).abs() < 1e-12);
    assert!(read_trace_csv(seed("read_trace_csv", "late_start.csv").as_slice(), 1.0, [0.0, 0.0]).is_err());
    assert!(read_trace_csv(seed("read_trace_csv", "ragged.csv").as_slice(), 1.0, [0.0, 0.0]).is_err());
}
