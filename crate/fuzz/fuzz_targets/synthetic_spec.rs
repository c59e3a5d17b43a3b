#![no_main]
use ebdreg::evaluator::SyntheticSpec;
use libfuzzer_sys::fuzz_target;

// Generation itself is skipped: sizes come from the input.
fuzz_target!(|data: &[u8]| {
    if let Ok(spec) = serde_json::from_slice::<SyntheticSpec>(data) {
        let _ = spec.validate();
    }
});
