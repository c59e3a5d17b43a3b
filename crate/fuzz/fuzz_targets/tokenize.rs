#![no_main]
use ebdreg::corpus::tokenize;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    let words = tokenize(data);
    for w in &words {
        assert!(!w.is_empty());
        assert!(!w.chars().any(char::is_whitespace));
    }
    assert_eq!(tokenize(&words.join(" ")), words);
});
