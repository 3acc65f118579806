//! Landmark vocabulary, line-group structure and annotation records.
//!
//! Sixteen landmarks describe one anterior tooth section. Six are placed by
//! hand (crown point, apical point, the two CEJ points and the two alveolar
//! crest points); the remaining ten are intersections of three lines drawn
//! perpendicular to the tooth axis with the labial/lingual bone and root
//! outlines. Those three level lines plus the axis are the line groups the
//! geometric loss constrains.

use std::fmt;
use std::ops::{Index, IndexMut};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One of the sixteen anatomical landmarks of a tooth section.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[allow(non_camel_case_types)]
pub enum LandmarkId {
    CP,
    AP,
    CEJ_A,
    CEJ_P,
    A_crest,
    P_crest,
    AB_AP,
    PB_AP,
    AB_13,
    AR_13,
    PR_13,
    PB_13,
    AB_12,
    AR_12,
    PR_12,
    PB_12,
}

pub const NUM_LANDMARKS: usize = 16;

impl LandmarkId {
    /// All landmarks in index order.
    pub const ALL: [LandmarkId; NUM_LANDMARKS] = [
        LandmarkId::CP,
        LandmarkId::AP,
        LandmarkId::CEJ_A,
        LandmarkId::CEJ_P,
        LandmarkId::A_crest,
        LandmarkId::P_crest,
        LandmarkId::AB_AP,
        LandmarkId::PB_AP,
        LandmarkId::AB_13,
        LandmarkId::AR_13,
        LandmarkId::PR_13,
        LandmarkId::PB_13,
        LandmarkId::AB_12,
        LandmarkId::AR_12,
        LandmarkId::PR_12,
        LandmarkId::PB_12,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<LandmarkId> {
        Self::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            LandmarkId::CP => "CP",
            LandmarkId::AP => "AP",
            LandmarkId::CEJ_A => "CEJ_A",
            LandmarkId::CEJ_P => "CEJ_P",
            LandmarkId::A_crest => "A_crest",
            LandmarkId::P_crest => "P_crest",
            LandmarkId::AB_AP => "AB_AP",
            LandmarkId::PB_AP => "PB_AP",
            LandmarkId::AB_13 => "AB_13",
            LandmarkId::AR_13 => "AR_13",
            LandmarkId::PR_13 => "PR_13",
            LandmarkId::PB_13 => "PB_13",
            LandmarkId::AB_12 => "AB_12",
            LandmarkId::AR_12 => "AR_12",
            LandmarkId::PR_12 => "PR_12",
            LandmarkId::PB_12 => "PB_12",
        }
    }
}

impl fmt::Display for LandmarkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LandmarkId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LandmarkId::ALL
            .iter()
            .copied()
            .find(|id| id.name() == s)
            .ok_or_else(|| Error::Input(format!("unknown landmark name {s:?}")))
    }
}

/// A 2D point in pixel units: `x` is the column, `y` the row, with pixel
/// centers at integer coordinates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn distance(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Coordinates of all sixteen landmarks of one image.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LandmarkSet(pub [Point; NUM_LANDMARKS]);

impl LandmarkSet {
    pub fn new(coords: [Point; NUM_LANDMARKS]) -> Self {
        LandmarkSet(coords)
    }

    pub fn points(&self) -> &[Point; NUM_LANDMARKS] {
        &self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = (LandmarkId, Point)> + '_ {
        LandmarkId::ALL.iter().map(move |&id| (id, self[id]))
    }

    pub fn map(&self, mut f: impl FnMut(Point) -> Point) -> LandmarkSet {
        LandmarkSet(self.0.map(&mut f))
    }
}

impl Index<LandmarkId> for LandmarkSet {
    type Output = Point;

    fn index(&self, id: LandmarkId) -> &Point {
        &self.0[id.index()]
    }
}

impl IndexMut<LandmarkId> for LandmarkSet {
    fn index_mut(&mut self, id: LandmarkId) -> &mut Point {
        &mut self.0[id.index()]
    }
}

/// How the perpendicularity dot product enters the geometric loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// The raw dot product `v_axis · v_level`.
    #[default]
    PaperLiteral,
    /// `|v_axis · v_level|`.
    Absolute,
    /// `(v_axis · v_level)^2`.
    Squared,
}

impl LossMode {
    pub fn name(self) -> &'static str {
        match self {
            LossMode::PaperLiteral => "paper_literal",
            LossMode::Absolute => "absolute",
            LossMode::Squared => "squared",
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper_literal" => Ok(LossMode::PaperLiteral),
            "absolute" => Ok(LossMode::Absolute),
            "squared" => Ok(LossMode::Squared),
            other => Err(Error::param(format!(
                "unknown loss mode {other:?} (expected paper_literal, absolute or squared)"
            ))),
        }
    }
}

/// Assignment of landmarks to the tooth axis and the three level lines.
#[derive(Clone, Debug, PartialEq)]
pub struct LineGroupSchema {
    axis: (LandmarkId, LandmarkId),
    level_lines: [Vec<LandmarkId>; 3],
    pub loss_mode: LossMode,
}

impl LineGroupSchema {
    pub fn new(
        axis: (LandmarkId, LandmarkId),
        level_lines: [Vec<LandmarkId>; 3],
        loss_mode: LossMode,
    ) -> Result<Self> {
        if axis.0 == axis.1 {
            return Err(Error::param("axis members must be distinct"));
        }
        for (i, line) in level_lines.iter().enumerate() {
            if line.len() < 2 {
                return Err(Error::param(format!(
                    "level line {i} has {} member(s), need at least 2",
                    line.len()
                )));
            }
            if line.contains(&LandmarkId::CP) {
                return Err(Error::param(format!("level line {i} contains CP")));
            }
        }
        Ok(LineGroupSchema {
            axis,
            level_lines,
            loss_mode,
        })
    }

    pub fn axis(&self) -> (LandmarkId, LandmarkId) {
        self.axis
    }

    /// Root apex, apical third and mid-root level lines, in that order.
    pub fn level_lines(&self) -> &[Vec<LandmarkId>; 3] {
        &self.level_lines
    }

    pub fn root_apex_level(&self) -> &[LandmarkId] {
        &self.level_lines[0]
    }

    pub fn apical_third_level(&self) -> &[LandmarkId] {
        &self.level_lines[1]
    }

    pub fn mid_root_level(&self) -> &[LandmarkId] {
        &self.level_lines[2]
    }

    pub fn with_loss_mode(mut self, loss_mode: LossMode) -> Self {
        self.loss_mode = loss_mode;
        self
    }

    /// True if the landmark belongs to the axis or to any level line.
    pub fn constrains(&self, id: LandmarkId) -> bool {
        self.axis.0 == id || self.axis.1 == id || self.level_lines.iter().any(|l| l.contains(&id))
    }
}

impl Default for LineGroupSchema {
    fn default() -> Self {
        line_groups_default()
    }
}

/// The line groups given by the annotation construction: the CP-AP axis, and
/// the perpendiculars through AP, at one third and at one half of the root
/// length. AP belongs to the root apex line because that line passes through
/// it; there are no root points at the apex level.
pub fn line_groups_default() -> LineGroupSchema {
    use LandmarkId::*;
    LineGroupSchema {
        axis: (CP, AP),
        level_lines: [
            vec![AB_AP, AP, PB_AP],
            vec![AB_13, AR_13, PR_13, PB_13],
            vec![AB_12, AR_12, PR_12, PB_12],
        ],
        loss_mode: LossMode::PaperLiteral,
    }
}

/// Ground truth (or prediction) for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationRecord {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    /// Isotropic pixel spacing in millimeters per pixel.
    pub spacing_mm_per_px: f64,
    pub landmarks: LandmarkSet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CoordinateFailure {
    NonFinite,
    OutOfBounds,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationVerdict {
    pub failures: Vec<(LandmarkId, CoordinateFailure)>,
}

impl ValidationVerdict {
    pub fn is_valid(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Checks every coordinate is finite and inside `[0, width) x [0, height)`.
pub fn validate_landmark_set(set: &LandmarkSet, width: u32, height: u32) -> ValidationVerdict {
    let (w, h) = (f64::from(width), f64::from(height));
    let failures = set
        .iter()
        .filter_map(|(id, p)| {
            if !p.is_finite() {
                Some((id, CoordinateFailure::NonFinite))
            } else if p.x < 0.0 || p.x >= w || p.y < 0.0 || p.y >= h {
                Some((id, CoordinateFailure::OutOfBounds))
            } else {
                None
            }
        })
        .collect();
    ValidationVerdict { failures }
}
