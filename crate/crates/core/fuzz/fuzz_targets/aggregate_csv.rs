#![no_main]
use darcy_core::harness::aggregate_records;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let mut lines = text.lines().map(|l| l.split(',').map(String::from).collect::<Vec<_>>());
    let Some(header) = lines.next() else { return };
    let rows: Vec<Vec<String>> = lines.collect();
    if let Ok(report) = aggregate_records(&header, &rows) {
        assert!(header.contains(&report.scale_column));
    }
});
