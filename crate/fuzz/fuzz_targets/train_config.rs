#![no_main]
use ebdreg::TrainConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(config) = serde_json::from_slice::<TrainConfig>(data) else {
        return;
    };
    if config.validate().is_ok() {
        let _ = config.supervised_blocks();
        let text = serde_json::to_string(&config).expect("config serializes");
        let again: TrainConfig = serde_json::from_str(&text).expect("serialized config parses");
        assert_eq!(config.hash(), again.hash());
    }
});
