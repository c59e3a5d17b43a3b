#![no_main]
use ebdreg::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok(ckpt) = Checkpoint::parse(data) {
        let _ = ckpt.model();
    }
});
