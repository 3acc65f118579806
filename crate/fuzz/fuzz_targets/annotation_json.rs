//! Annotation and prediction files in both parse modes.

#![no_main]
use geolandmark::dataset::{parse_dataset, write_records, ParseMode};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let predictions = parse_dataset(data, ParseMode::Predictions);
    if let Ok(records) = parse_dataset(data, ParseMode::Annotations) {
        // anything accepted as ground truth is also a valid prediction file
        assert_eq!(predictions.as_ref().ok(), Some(&records));
    }
    if let Ok(records) = predictions {
        let again = parse_dataset(write_records(&records).as_bytes(), ParseMode::Predictions)
            .expect("written records must parse");
        assert_eq!(again, records);
    }
});
