#![no_main]
use geolandmark::report::{merge_reports, parse_train_report};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(report) = parse_train_report(text) {
        for row in &report.rows {
            assert_eq!(row.raw.len(), 9);
        }
        let merged = merge_reports(&[("a".to_string(), report)]).expect("single run merges");
        assert!(merged.starts_with("# runs=1\n"));
    }
});
