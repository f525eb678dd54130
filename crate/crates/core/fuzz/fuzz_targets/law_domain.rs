#![no_main]
use darcy_core::domain::DomainSpec;
use darcy_core::pointprocess::RadiiLaw;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(law) = text.parse::<RadiiLaw>() {
        assert!(law.validate().is_ok());
        assert_eq!(law.to_string().parse::<RadiiLaw>(), Ok(law));
    }
    if let Ok(domain) = text.parse::<DomainSpec>() {
        assert!(domain.validate().is_ok());
        assert_eq!(domain.to_string().parse::<DomainSpec>(), Ok(domain));
    }
});
