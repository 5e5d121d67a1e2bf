#![no_main]

use libfuzzer_sys::fuzz_target;
use smpc::{GainLibrary, PlantModel};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = GainLibrary::from_json_for(text, &PlantModel::coupled_tank());
    if let Ok(lib) = GainLibrary::from_json(text) {
        let again = GainLibrary::from_json(&lib.to_json()).expect("serialised library parses");
        assert_eq!(lib, again);
    }
});
