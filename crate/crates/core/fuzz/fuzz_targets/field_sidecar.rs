#![no_main]
use darcy_core::fdsolver::{decode_field, FieldHeader};
use libfuzzer_sys::fuzz_target;

// first line: sidecar length in bytes; then the sidecar, then raw field bytes
fuzz_target!(|data: &[u8]| {
    let split = data.first().map_or(0, |&b| b as usize).min(data.len().saturating_sub(1));
    let (head, body) = data.get(1..).unwrap_or_default().split_at(split);
    let Ok(text) = std::str::from_utf8(head) else { return };
    let Ok(header) = text.parse::<FieldHeader>() else { return };
    assert_eq!(header.to_string().parse::<FieldHeader>().expect("header round trip"), header);
    if let Ok(values) = decode_field(&header, body) {
        assert_eq!(Some(values.len()), header.node_count());
    }
});
