#![no_main]
use ebdreg::corpus::{parse_record_line, record_to_line};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok(record) = parse_record_line(data) {
        let again = parse_record_line(&record_to_line(&record)).expect("serialized record parses");
        assert_eq!(record, again);
    }
});
