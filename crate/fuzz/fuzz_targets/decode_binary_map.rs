#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if data.len() < 2 {
        return;
    }
    let (rows, cols) = (data[0] as usize, data[1] as usize);
    if let Ok(map) = tsattr::io::decode_binary_map(&data[2..], rows, cols) {
        assert_eq!(map.data().len(), rows * cols);
        assert!(map.data().iter().all(|&b| b <= 1));
    }
});
