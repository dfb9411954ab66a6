#![no_main]

use libfuzzer_sys::fuzz_target;
use mfrt::classes::ClassTable;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(table) = ClassTable::parse(text) {
        assert_eq!(ClassTable::parse(&table.to_text()).expect("round trip"), table);
    }
});
