#![no_main]
use ebdreg::evaluator::Lexicon;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    let _ = Lexicon::parse(data);
});
