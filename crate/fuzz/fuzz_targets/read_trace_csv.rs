#![no_main]
use libfuzzer_sys::fuzz_target;
use pat_lab::io::{read_trace_csv, write_trace_csv};

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = read_trace_csv(data, 1.0, [0.0, 0.0]) {
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &t).unwrap();
        let back = read_trace_csv(buf.as_slice(), 1.0, [0.0, 0.0]).unwrap();
        assert_eq!(back.n_t(), t.n_t());
        assert_eq!(back.n_theta(), t.n_theta());
    }
});
