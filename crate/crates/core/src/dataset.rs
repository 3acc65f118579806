//! JSON annotation and prediction files.
//!
//! A file is either a top-level array of records, or an envelope object
//! `{"_meta": {...}, "records": [...]}` as written by the synthetic
//! generator. `_meta` is never interpreted by the parser.
//!
//! ```json
//! [{"image_id": "a", "width": 957, "height": 555, "spacing_mm_per_px": 0.1,
//!   "landmarks": {"CP": [412.5, 120.0], "AP": [430.0, 395.25], ...}}]
//! ```

use std::collections::BTreeMap;

use serde::de::IgnoredAny;
use serde::ser::{SerializeMap, Serializer};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{
    validate_landmark_set, AnnotationRecord, CoordinateFailure, LandmarkId, LandmarkSet, Point,
    NUM_LANDMARKS,
};

/// Whether coordinates must lie inside the image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParseMode {
    /// Ground truth: every landmark inside `[0, width) x [0, height)`.
    Annotations,
    /// Model output: coordinates only need to be finite.
    Predictions,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    image_id: String,
    width: u32,
    height: u32,
    spacing_mm_per_px: f64,
    landmarks: BTreeMap<String, [f64; 2]>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEnvelope {
    #[serde(rename = "_meta")]
    _meta: Option<IgnoredAny>,
    records: Vec<RawRecord>,
}

fn syntax_error(e: serde_json::Error) -> Error {
    Error::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    }
}

/// Parses an annotation or prediction file. Record order is preserved.
pub fn parse_dataset(bytes: &[u8], mode: ParseMode) -> Result<Vec<AnnotationRecord>> {
    let first = bytes.iter().copied().find(|b| !b.is_ascii_whitespace());
    let raw: Vec<RawRecord> = match first {
        Some(b'{') => serde_json::from_slice::<RawEnvelope>(bytes)
            .map_err(syntax_error)?
            .records,
        _ => serde_json::from_slice(bytes).map_err(syntax_error)?,
    };
    raw.into_iter()
        .enumerate()
        .map(|(i, r)| convert_record(i, r, mode))
        .collect()
}

fn convert_record(record: usize, raw: RawRecord, mode: ParseMode) -> Result<AnnotationRecord> {
    let invalid = |message: String| Error::Validation {
        record,
        image_id: raw.image_id.clone(),
        message,
    };
    if raw.width == 0 || raw.height == 0 {
        return Err(invalid(format!(
            "image size must be positive, got {}x{}",
            raw.width, raw.height
        )));
    }
    if !(raw.spacing_mm_per_px > 0.0) {
        return Err(invalid(format!(
            "spacing_mm_per_px must be positive, got {}",
            raw.spacing_mm_per_px
        )));
    }
    if let Some(name) = raw
        .landmarks
        .keys()
        .find(|name| name.parse::<LandmarkId>().is_err())
    {
        return Err(Error::UnknownLandmark {
            record,
            image_id: raw.image_id.clone(),
            name: name.clone(),
        });
    }
    let mut landmarks = LandmarkSet::default();
    for id in LandmarkId::ALL {
        let [x, y] = *raw.landmarks.get(id.name()).ok_or_else(|| Error::MissingLandmark {
            record,
            image_id: raw.image_id.clone(),
            landmark: id,
        })?;
        landmarks[id] = Point::new(x, y);
    }
    let verdict = validate_landmark_set(&landmarks, raw.width, raw.height);
    let failures: Vec<_> = verdict
        .failures
        .iter()
        .filter(|(_, f)| mode == ParseMode::Annotations || *f == CoordinateFailure::NonFinite)
        .map(|(id, f)| format!("{id} {f:?}"))
        .collect();
    if !failures.is_empty() {
        return Err(invalid(format!("invalid coordinates: {}", failures.join(", "))));
    }
    Ok(AnnotationRecord {
        image_id: raw.image_id,
        width: raw.width,
        height: raw.height,
        spacing_mm_per_px: raw.spacing_mm_per_px,
        landmarks,
    })
}

struct OrderedLandmarks<'a>(&'a LandmarkSet);

impl Serialize for OrderedLandmarks<'_> {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(NUM_LANDMARKS))?;
        for (id, p) in self.0.iter() {
            map.serialize_entry(id.name(), &[p.x, p.y])?;
        }
        map.end()
    }
}

#[derive(Serialize)]
struct OutRecord<'a> {
    image_id: &'a str,
    width: u32,
    height: u32,
    spacing_mm_per_px: f64,
    landmarks: OrderedLandmarks<'a>,
}

#[derive(Serialize)]
struct OutEnvelope<'a, T: Serialize> {
    #[serde(rename = "_meta")]
    meta: &'a T,
    records: Vec<OutRecord<'a>>,
}

/// Serializes records (landmarks in index order); with `meta`, the envelope
/// form is written.
pub fn write_dataset<T: Serialize>(records: &[AnnotationRecord], meta: Option<&T>) -> String {
    let out: Vec<OutRecord<'_>> = records
        .iter()
        .map(|r| OutRecord {
            image_id: &r.image_id,
            width: r.width,
            height: r.height,
            spacing_mm_per_px: r.spacing_mm_per_px,
            landmarks: OrderedLandmarks(&r.landmarks),
        })
        .collect();
    let mut s = match meta {
        Some(meta) => serde_json::to_string_pretty(&OutEnvelope { meta, records: out }),
        None => serde_json::to_string_pretty(&out),
    }
    .expect("records serialize to JSON");
    s.push('\n');
    s
}

/// `write_dataset` without metadata.
pub fn write_records(records: &[AnnotationRecord]) -> String {
    write_dataset::<()>(records, None)
}
