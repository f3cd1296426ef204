#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Some((&n, bytes)) = data.split_first() else { return };
    if let Ok(values) = tsattr::io::decode_f64s(bytes, n as usize) {
        assert_eq!(values.len(), n as usize);
        assert_eq!(tsattr::io::encode_f64s(&values), bytes);
    }
});
