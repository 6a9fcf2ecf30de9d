#![no_main]

use dampc::artifacts::{decode_model, encode_model};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok((model, envelope, hash)) = decode_model(text) {
        let encoded = encode_model(&model, &envelope, &hash).unwrap();
        let (back, env_back, _) = decode_model(&encoded).unwrap();
        assert_eq!(back, model);
        assert_eq!(env_back, envelope);
    }
});
