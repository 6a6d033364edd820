#![no_main]
use libfuzzer_sys::fuzz_target;
use pat_lab::io::{read_field_csv, write_field_csv};

fuzz_target!(|data: &[u8]| {
    if let Ok(f) = read_field_csv(data) {
        let mut buf = Vec::new();
        write_field_csv(&mut buf, &f).unwrap();
        let back = read_field_csv(buf.as_slice()).unwrap();
        assert_eq!(back.grid().nx, f.grid().nx);
        assert_eq!(back.grid().ny, f.grid().ny);
        assert!(back.values().iter().zip(f.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
});
