//! Synthetic tooth configurations.
//!
//! The generator reproduces the annotation construction exactly: the tooth
//! axis runs from the crown point CP to the apical point AP, and the three
//! level lines are perpendicular to it through AP and at one third and one
//! half of the root length from the apex. Unperturbed configurations
//! therefore have zero geometric residual, which makes them an oracle for the
//! loss and its gradient.
//!
//! Randomness uses ChaCha8 (`rand_chacha`) with standard-normal sampling
//! from `rand_distr`; every record derives its own seed from the dataset
//! seed and record index with SplitMix64.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::dataset::write_dataset;
use crate::error::{Error, Result};
use crate::schema::{validate_landmark_set, AnnotationRecord, LandmarkId, LandmarkSet, Point};

pub const GENERATOR_VERSION: &str = "geolandmark-synth/1";
pub const RNG_NAME: &str = "ChaCha8Rng+StandardNormal(rand_distr 0.5)";

/// Members of each level line placed off the axis, and the fraction of the
/// root length (from the apex toward the crown) at which the line sits.
pub const LEVEL_MEMBERS: [(&[LandmarkId], f64); 3] = {
    use LandmarkId::*;
    [
        (&[AB_AP, PB_AP], 0.0),
        (&[AB_13, AR_13, PR_13, PB_13], 1.0 / 3.0),
        (&[AB_12, AR_12, PR_12, PB_12], 0.5),
    ]
};

#[derive(Clone, Debug, PartialEq)]
pub struct ToothConfigParams {
    /// Direction of CP -> AP, radians.
    pub axis_angle: f64,
    pub root_length: f64,
    /// Distance of CP beyond the CEJ level.
    pub crown_offset: f64,
    pub apex: Point,
    /// Signed offset along the level line for each of the ten off-axis level
    /// members.
    pub half_widths: BTreeMap<LandmarkId, f64>,
    /// Signed lateral offsets of CEJ_A and CEJ_P at the CEJ level.
    pub cej_offsets: [f64; 2],
    /// Distance of the crest level from the CEJ level toward the apex.
    pub crest_depth: f64,
    /// Signed lateral offsets of A_crest and P_crest.
    pub crest_offsets: [f64; 2],
    pub noise_sigma: f64,
    pub seed: u64,
}

impl ToothConfigParams {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.axis_angle,
            self.root_length,
            self.crown_offset,
            self.apex.x,
            self.apex.y,
            self.crest_depth,
            self.noise_sigma,
        ]
        .iter()
        .chain(&self.cej_offsets)
        .chain(&self.crest_offsets)
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::param("tooth parameters must be finite"));
        }
        if !(self.root_length > 0.0) {
            return Err(Error::param(format!("root_length must be positive, got {}", self.root_length)));
        }
        if !(self.crown_offset > 0.0) {
            return Err(Error::param(format!("crown_offset must be positive, got {}", self.crown_offset)));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::param("noise_sigma must be >= 0"));
        }
        for (members, _) in LEVEL_MEMBERS {
            let mut seen: Vec<f64> = Vec::new();
            for id in members {
                let w = *self
                    .half_widths
                    .get(id)
                    .ok_or_else(|| Error::param(format!("missing half width for {id}")))?;
                if !w.is_finite() || w == 0.0 {
                    return Err(Error::param(format!("half width of {id} must be finite and non-zero")));
                }
                if seen.contains(&w) {
                    return Err(Error::param(format!("duplicate offset {w} on the line of {id}")));
                }
                seen.push(w);
            }
        }
        Ok(())
    }
}

/// Exact landmark positions for a tooth.
pub fn generate_tooth_config(params: &ToothConfigParams) -> Result<LandmarkSet> {
    use LandmarkId::*;
    params.validate()?;
    let (s, c) = params.axis_angle.sin_cos();
    // unit vector toward the crown, and the level-line direction
    let up = Point::new(-c, -s);
    let across = Point::new(-s, c);
    let at = |dist_from_apex: f64, lateral: f64| {
        Point::new(
            params.apex.x + dist_from_apex * up.x + lateral * across.x,
            params.apex.y + dist_from_apex * up.y + lateral * across.y,
        )
    };
    let l = params.root_length;
    let mut set = LandmarkSet::default();
    set[AP] = params.apex;
    set[CP] = at(l + params.crown_offset, 0.0);
    for (members, fraction) in LEVEL_MEMBERS {
        for &id in members {
            set[id] = at(fraction * l, params.half_widths[&id]);
        }
    }
    set[CEJ_A] = at(l, params.cej_offsets[0]);
    set[CEJ_P] = at(l, params.cej_offsets[1]);
    set[A_crest] = at(l - params.crest_depth, params.crest_offsets[0]);
    set[P_crest] = at(l - params.crest_depth, params.crest_offsets[1]);
    Ok(set)
}

/// Adds independent `N(0, noise_sigma^2)` noise to every coordinate.
pub fn perturb(set: &LandmarkSet, noise_sigma: f64, seed: u64) -> LandmarkSet {
    if noise_sigma == 0.0 {
        return *set;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    set.map(|p| {
        let dx: f64 = rng.sample(StandardNormal);
        let dy: f64 = rng.sample(StandardNormal);
        Point::new(p.x + noise_sigma * dx, p.y + noise_sigma * dy)
    })
}

/// SplitMix64 finalizer, used to derive per-record seeds.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Ranges from which tooth parameters are drawn, in image pixels.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamRanges {
    /// Maximum deviation of the axis from vertical, radians.
    pub axis_tilt: f64,
    pub root_length: (f64, f64),
    pub crown_offset: (f64, f64),
    /// Bone half-width at the apex level.
    pub apex_bone: (f64, f64),
    /// Root half-width at the apical-third level.
    pub third_root: (f64, f64),
    /// Root half-width at the mid-root level.
    pub mid_root: (f64, f64),
    /// Bone distance outside the root outline.
    pub bone_margin: (f64, f64),
    pub cej_half: (f64, f64),
    pub crest_depth: (f64, f64),
    pub crest_half: (f64, f64),
    /// Minimum clearance of every landmark from the image border.
    pub border_margin: f64,
}

impl Default for ParamRanges {
    fn default() -> Self {
        ParamRanges {
            axis_tilt: 0.3,
            root_length: (110.0, 170.0),
            crown_offset: (60.0, 100.0),
            apex_bone: (8.0, 18.0),
            third_root: (5.0, 9.0),
            mid_root: (8.0, 13.0),
            bone_margin: (4.0, 12.0),
            cej_half: (16.0, 24.0),
            crest_depth: (10.0, 25.0),
            crest_half: (18.0, 30.0),
            border_margin: 20.0,
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Draws tooth parameters (upper or lower arch with equal probability) with
/// the apex anywhere in the image; callers reject configurations that fall
/// outside it.
pub fn sample_params(rng: &mut ChaCha8Rng, ranges: &ParamRanges, width: u32, height: u32) -> ToothConfigParams {
    use LandmarkId::*;
    let lower = rng.random_bool(0.5);
    let tilt = if ranges.axis_tilt > 0.0 {
        rng.random_range(-ranges.axis_tilt..ranges.axis_tilt)
    } else {
        0.0
    };
    let base = if lower {
        std::f64::consts::FRAC_PI_2
    } else {
        -std::f64::consts::FRAC_PI_2
    };
    let m = ranges.border_margin;
    let apex = Point::new(
        uniform(rng, (m, f64::from(width) - m)),
        uniform(rng, (m, f64::from(height) - m)),
    );
    let mut half_widths = BTreeMap::new();
    let apex_a = uniform(rng, ranges.apex_bone);
    let apex_p = uniform(rng, ranges.apex_bone);
    half_widths.insert(AB_AP, -apex_a);
    half_widths.insert(PB_AP, apex_p);
    for (root_range, [ab, ar, pr, pb]) in [
        (ranges.third_root, [AB_13, AR_13, PR_13, PB_13]),
        (ranges.mid_root, [AB_12, AR_12, PR_12, PB_12]),
    ] {
        let ra = uniform(rng, root_range);
        let rp = uniform(rng, root_range);
        half_widths.insert(ar, -ra);
        half_widths.insert(ab, -ra - uniform(rng, ranges.bone_margin));
        half_widths.insert(pr, rp);
        half_widths.insert(pb, rp + uniform(rng, ranges.bone_margin));
    }
    ToothConfigParams {
        axis_angle: base + tilt,
        root_length: uniform(rng, ranges.root_length),
        crown_offset: uniform(rng, ranges.crown_offset),
        apex,
        half_widths,
        cej_offsets: [-uniform(rng, ranges.cej_half), uniform(rng, ranges.cej_half)],
        crest_depth: uniform(rng, ranges.crest_depth),
        crest_offsets: [-uniform(rng, ranges.crest_half), uniform(rng, ranges.crest_half)],
        noise_sigma: 0.0,
        seed: 0,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_images: usize,
    /// Train, validation and test record counts.
    pub split: [usize; 3],
    pub seed: u64,
    pub noise_sigma: f64,
    pub width: u32,
    pub height: u32,
    pub spacing_mm_per_px: f64,
    pub ranges: ParamRanges,
}

pub const DEFAULT_SPLIT: [usize; 3] = [36, 149, 162];
pub const DEFAULT_IMAGE_SIZE: (u32, u32) = (957, 555);
pub const DEFAULT_SPACING_MM_PER_PX: f64 = 0.1;
pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_images: DEFAULT_SPLIT.iter().sum(),
            split: DEFAULT_SPLIT,
            seed: 0,
            noise_sigma: 0.0,
            width: DEFAULT_IMAGE_SIZE.0,
            height: DEFAULT_IMAGE_SIZE.1,
            spacing_mm_per_px: DEFAULT_SPACING_MM_PER_PX,
            ranges: ParamRanges::default(),
        }
    }
}

/// Recorded in the `_meta` object of generated files.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DatasetMeta {
    pub generator_version: String,
    pub seed: u64,
    pub noise_sigma: f64,
    pub rng_name: String,
    pub split: String,
    /// True for the unperturbed companion file.
    pub clean: bool,
    pub spacing_mm_per_px: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSplit {
    pub name: &'static str,
    /// Exact configurations.
    pub clean: Vec<AnnotationRecord>,
    /// Perturbed annotations (equal to `clean` when `noise_sigma` is 0).
    pub noisy: Vec<AnnotationRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub splits: Vec<SynthSplit>,
}

const MAX_ATTEMPTS: u64 = 10_000;

fn generate_record(cfg: &SynthConfig, index: usize, image_id: String) -> Result<(AnnotationRecord, AnnotationRecord)> {
    let record_seed = mix_seed(cfg.seed, index as u64);
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(record_seed, 2 * attempt));
        let mut params = sample_params(&mut rng, &cfg.ranges, cfg.width, cfg.height);
        params.noise_sigma = cfg.noise_sigma;
        params.seed = mix_seed(record_seed, 2 * attempt + 1);
        let clean = generate_tooth_config(&params)?;
        let noisy = perturb(&clean, params.noise_sigma, params.seed);
        let inside = |s: &LandmarkSet| {
            let m = cfg.ranges.border_margin;
            validate_landmark_set(s, cfg.width, cfg.height).is_valid()
                && s.0.iter().all(|p| {
                    p.x >= m && p.y >= m && p.x <= f64::from(cfg.width) - m && p.y <= f64::from(cfg.height) - m
                })
        };
        if inside(&clean) && validate_landmark_set(&noisy, cfg.width, cfg.height).is_valid() {
            let rec = |landmarks| AnnotationRecord {
                image_id: image_id.clone(),
                width: cfg.width,
                height: cfg.height,
                spacing_mm_per_px: cfg.spacing_mm_per_px,
                landmarks,
            };
            return Ok((rec(clean), rec(noisy)));
        }
    }
    Err(Error::param(format!(
        "could not place a tooth inside {}x{} after {MAX_ATTEMPTS} attempts",
        cfg.width, cfg.height
    )))
}

pub fn generate_dataset(cfg: &SynthConfig) -> Result<SynthDataset> {
    if cfg.split.iter().sum::<usize>() != cfg.n_images {
        return Err(Error::param(format!(
            "split {:?} does not sum to {} images",
            cfg.split, cfg.n_images
        )));
    }
    if cfg.width == 0 || cfg.height == 0 {
        return Err(Error::param("image size must be positive"));
    }
    if !(cfg.spacing_mm_per_px > 0.0 && cfg.spacing_mm_per_px.is_finite()) {
        return Err(Error::param("spacing_mm_per_px must be positive"));
    }
    if !(cfg.noise_sigma >= 0.0 && cfg.noise_sigma.is_finite()) {
        return Err(Error::param("noise_sigma must be >= 0"));
    }
    let mut splits = Vec::with_capacity(3);
    let mut index = 0;
    for (name, &count) in SPLIT_NAMES.iter().zip(&cfg.split) {
        let mut clean = Vec::with_capacity(count);
        let mut noisy = Vec::with_capacity(count);
        for i in 0..count {
            let (c, n) = generate_record(cfg, index, format!("{name}_{i:04}"))?;
            clean.push(c);
            noisy.push(n);
            index += 1;
        }
        splits.push(SynthSplit { name, clean, noisy });
    }
    Ok(SynthDataset {
        config: cfg.clone(),
        splits,
    })
}

impl SynthDataset {
    fn meta(&self, split: &str, clean: bool) -> DatasetMeta {
        DatasetMeta {
            generator_version: GENERATOR_VERSION.into(),
            seed: self.config.seed,
            noise_sigma: if clean { 0.0 } else { self.config.noise_sigma },
            rng_name: RNG_NAME.into(),
            split: split.into(),
            clean,
            spacing_mm_per_px: self.config.spacing_mm_per_px,
        }
    }

    /// `(file name, contents)` for every file the dataset writes: one
    /// annotation file per split, plus `<split>_clean.json` with the exact
    /// configurations when noise was applied.
    pub fn files(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for s in &self.splits {
            out.push((format!("{}.json", s.name), write_dataset(&s.noisy, Some(&self.meta(s.name, self.config.noise_sigma == 0.0)))));
        }
        if self.config.noise_sigma > 0.0 {
            for s in &self.splits {
                out.push((format!("{}_clean.json", s.name), write_dataset(&s.clean, Some(&self.meta(s.name, true)))));
            }
        }
        out
    }

    pub fn write_to(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        self.files()
            .into_iter()
            .map(|(name, text)| {
                let path = dir.join(name);
                std::fs::write(&path, text)?;
                Ok(path)
            })
            .collect()
    }

    pub fn split(&self, name: &str) -> Option<&SynthSplit> {
        self.splits.iter().find(|s| s.name == name)
    }
}
