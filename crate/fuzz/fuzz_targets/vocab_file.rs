#![no_main]
use ebdreg::Vocabulary;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok(vocab) = Vocabulary::parse(data) {
        let again = Vocabulary::parse(&vocab.to_file_string()).expect("written vocabulary parses");
        assert_eq!(vocab, again);
        for (i, w) in vocab.words().iter().enumerate() {
            assert_eq!(vocab.word(vocab.id(w)), Some(w.as_str()), "word {i}");
        }
    }
});
