#![no_main]
use libfuzzer_sys::fuzz_target;
use pat_lab::io::{decode_pgm, encode_pgm, parse_pgm, parse_sidecar};

// Input is `sidecar JSON \0 PGM bytes`; without a NUL the whole input is the image.
fuzz_target!(|data: &[u8]| {
    let Some(split) = data.iter().position(|&b| b == 0) else {
        let _ = parse_pgm(data);
        return;
    };
    let (meta, image) = (&data[..split], &data[split + 1..]);
    let _ = parse_pgm(image);
    let Ok(meta) = parse_sidecar(meta) else { return };
    if let Ok(field) = decode_pgm(image, &meta) {
        let (bytes, _) = encode_pgm(&field);
        let (w, h, _, _) = parse_pgm(&bytes).unwrap();
        assert_eq!((w, h), (meta.nx, meta.ny));
    }
});
