#![no_main]

use libfuzzer_sys::fuzz_target;
use smpc::PlantModel;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(model) = PlantModel::from_json(text) else { return };
    // Validation reports problems, it never panics.
    let _ = model.validate();
    let again = PlantModel::from_json(&model.to_json()).expect("serialised model parses");
    assert_eq!(model, again);
    assert_eq!(model.content_hash(), again.content_hash());
});
