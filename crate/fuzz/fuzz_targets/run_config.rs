#![no_main]

use libfuzzer_sys::fuzz_target;
use smpc_cli::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = RunConfig::from_json(text) {
        // A config that validates must hash and resolve its derived fields.
        assert_eq!(cfg.hash(), cfg.hash());
        let _ = cfg.x0();
        let _ = cfg.epsilon0();
    }
});
