#![no_main]
use darcy_core::pointprocess::Realization;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(real) = Realization::from_dump(text) {
        let again = Realization::from_dump(&real.to_dump()).expect("a written dump parses");
        assert_eq!(again, real);
    }
});
