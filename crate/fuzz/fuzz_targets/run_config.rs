#![no_main]

use libfuzzer_sys::fuzz_target;

// First line is the config text; every further line is a `--set` override.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let mut lines = text.split('\n');
    let config = lines.next().unwrap_or("");
    let overrides: Vec<String> = lines.map(str::to_string).collect();
    let _ = tsattr::config::RunConfig::parse(config, &overrides);
});
