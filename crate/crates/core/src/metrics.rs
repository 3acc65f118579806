//! Radial error and detection-rate metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geometry::geometric_loss;
use crate::schema::{line_groups_default, AnnotationRecord, LandmarkId, LandmarkSet, LossMode, NUM_LANDMARKS};

/// Detection thresholds in millimeters.
pub const DEFAULT_THRESHOLDS_MM: [f64; 3] = [0.5, 1.0, 2.0];

fn check_spacing(spacing: f64) -> Result<()> {
    if spacing > 0.0 && spacing.is_finite() {
        Ok(())
    } else {
        Err(Error::param(format!("spacing must be positive, got {spacing}")))
    }
}

/// Mean over the sixteen landmarks of `spacing * |pred - gt|`, in mm.
pub fn mre(pred: &LandmarkSet, gt: &LandmarkSet, spacing_mm_per_px: f64) -> Result<f64> {
    check_spacing(spacing_mm_per_px)?;
    let sum: f64 = pred
        .0
        .iter()
        .zip(gt.0.iter())
        .map(|(p, g)| spacing_mm_per_px * p.distance(*g))
        .sum();
    Ok(sum / NUM_LANDMARKS as f64)
}

/// Percentage of landmark predictions within `threshold_mm` (inclusive).
pub fn sdr(preds: &[LandmarkSet], gts: &[LandmarkSet], spacings: &[f64], threshold_mm: f64) -> Result<f64> {
    if preds.len() != gts.len() || preds.len() != spacings.len() {
        return Err(Error::dim(format!(
            "{} predictions, {} ground truths, {} spacings",
            preds.len(),
            gts.len(),
            spacings.len()
        )));
    }
    if !(threshold_mm > 0.0) {
        return Err(Error::param(format!("threshold must be positive, got {threshold_mm}")));
    }
    if preds.is_empty() {
        return Err(Error::dim("empty corpus"));
    }
    let mut hits = 0usize;
    for ((p, g), &s) in preds.iter().zip(gts).zip(spacings) {
        check_spacing(s)?;
        hits += p
            .0
            .iter()
            .zip(g.0.iter())
            .filter(|(a, b)| s * a.distance(**b) <= threshold_mm)
            .count();
    }
    Ok(100.0 * hits as f64 / (NUM_LANDMARKS * preds.len()) as f64)
}

/// Where per-image pixel spacing comes from during evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum SpacingSource {
    #[default]
    FromGroundTruth,
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub mre_mm: f64,
    /// `(threshold_mm, percent)` in configured order.
    pub sdr: Vec<(f64, f64)>,
    pub sdr_average: f64,
    /// Mean absolute-mode geometric loss over predicted sets that could be
    /// fitted; `None` if none could.
    pub geometric_residual: Option<f64>,
    /// Predicted sets skipped for a degenerate line fit.
    pub geometric_skipped: usize,
    pub per_landmark_mre_mm: [f64; NUM_LANDMARKS],
    pub n_images: usize,
    pub n_points: usize,
}

/// Pairs predictions with ground truth by `image_id` and aggregates metrics
/// over all landmark instances. Pairs are processed in `image_id` order so
/// the result is independent of file order.
pub fn evaluate_corpus(
    preds: &[AnnotationRecord],
    gts: &[AnnotationRecord],
    thresholds_mm: &[f64],
    spacing: SpacingSource,
) -> Result<MetricsReport> {
    if thresholds_mm.is_empty() {
        return Err(Error::param("at least one threshold is required"));
    }
    if let Some(t) = thresholds_mm.iter().find(|t| !(**t > 0.0 && t.is_finite())) {
        return Err(Error::param(format!("threshold must be positive, got {t}")));
    }
    if let SpacingSource::Fixed(s) = spacing {
        check_spacing(s)?;
    }
    let index = |records: &[AnnotationRecord], what: &str| -> Result<BTreeMap<String, usize>> {
        let mut m = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            if m.insert(r.image_id.clone(), i).is_some() {
                return Err(Error::Input(format!("duplicate image_id {:?} in {what}", r.image_id)));
            }
        }
        Ok(m)
    };
    let pred_ix = index(preds, "predictions")?;
    let gt_ix = index(gts, "ground truth")?;
    let missing_in_pred: Vec<String> = gt_ix.keys().filter(|k| !pred_ix.contains_key(*k)).cloned().collect();
    let missing_in_gt: Vec<String> = pred_ix.keys().filter(|k| !gt_ix.contains_key(*k)).cloned().collect();
    if !missing_in_pred.is_empty() || !missing_in_gt.is_empty() {
        return Err(Error::Pairing {
            missing_in_pred,
            missing_in_gt,
        });
    }
    if gt_ix.is_empty() {
        return Err(Error::dim("empty corpus"));
    }

    let schema = line_groups_default().with_loss_mode(LossMode::Absolute);
    let mut per_landmark = [0.0; NUM_LANDMARKS];
    let mut total_err = 0.0;
    let mut hits = vec![0usize; thresholds_mm.len()];
    let mut residual_sum = 0.0;
    let mut residual_n = 0usize;
    let mut skipped = 0usize;
    for (id, &gi) in &gt_ix {
        let g = &gts[gi];
        let p = &preds[pred_ix[id]];
        let s = match spacing {
            SpacingSource::FromGroundTruth => g.spacing_mm_per_px,
            SpacingSource::Fixed(s) => s,
        };
        check_spacing(s)?;
        for k in 0..NUM_LANDMARKS {
            let e = s * p.landmarks.0[k].distance(g.landmarks.0[k]);
            per_landmark[k] += e;
            total_err += e;
            for (h, &t) in hits.iter_mut().zip(thresholds_mm) {
                if e <= t {
                    *h += 1;
                }
            }
        }
        match geometric_loss(&p.landmarks, &schema) {
            Ok(v) => {
                residual_sum += v.total;
                residual_n += 1;
            }
            Err(Error::Degenerate { .. }) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    let n_images = gt_ix.len();
    let n_points = n_images * NUM_LANDMARKS;
    let sdr: Vec<(f64, f64)> = thresholds_mm
        .iter()
        .zip(&hits)
        .map(|(&t, &h)| (t, 100.0 * h as f64 / n_points as f64))
        .collect();
    let sdr_average = sdr.iter().map(|(_, v)| v).sum::<f64>() / sdr.len() as f64;
    Ok(MetricsReport {
        mre_mm: total_err / n_points as f64,
        sdr,
        sdr_average,
        geometric_residual: (residual_n > 0).then(|| residual_sum / residual_n as f64),
        geometric_skipped: skipped,
        per_landmark_mre_mm: per_landmark.map(|v| v / n_images as f64),
        n_images,
        n_points,
    })
}

/// `0.5 -> "0.5"`, `1 -> "1.0"`.
pub fn threshold_label(t: f64) -> String {
    if t.fract() == 0.0 {
        format!("{t:.1}")
    } else {
        format!("{t}")
    }
}

impl MetricsReport {
    /// `metric,value` CSV.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (t, v) in &self.sdr {
            let _ = writeln!(s, "sdr_{},{v}", threshold_label(*t));
        }
        let _ = writeln!(s, "sdr_average,{}", self.sdr_average);
        let _ = writeln!(s, "mre_mm,{}", self.mre_mm);
        match self.geometric_residual {
            Some(r) => {
                let _ = writeln!(s, "geometric_residual,{r}");
            }
            None => s.push_str("geometric_residual,nan\n"),
        }
        let _ = writeln!(s, "geometric_skipped,{}", self.geometric_skipped);
        let _ = writeln!(s, "n_images,{}", self.n_images);
        let _ = writeln!(s, "n_points,{}", self.n_points);
        s
    }

    /// `landmark,mre_mm` CSV in landmark index order.
    pub fn per_landmark_csv(&self) -> String {
        let mut s = String::from("landmark,mre_mm\n");
        for (id, v) in LandmarkId::ALL.iter().zip(self.per_landmark_mre_mm) {
            let _ = writeln!(s, "{id},{v}");
        }
        s
    }

    /// One-line summary in the usual comparison-table column order:
    /// the SDR columns, SDR average, then MRE.
    pub fn summary_header(&self) -> String {
        let mut cols: Vec<String> = self.sdr.iter().map(|(t, _)| format!("sdr_{}", threshold_label(*t))).collect();
        cols.push("sdr_average".into());
        cols.push("mre_mm".into());
        cols.join(",")
    }

    pub fn summary_row(&self) -> String {
        let mut cols: Vec<String> = self.sdr.iter().map(|(_, v)| v.to_string()).collect();
        cols.push(self.sdr_average.to_string());
        cols.push(self.mre_mm.to_string());
        cols.join(",")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::Point;

    fn set(offset: f64) -> LandmarkSet {
        let mut s = LandmarkSet::default();
        for (i, p) in s.0.iter_mut().enumerate() {
            *p = Point::new(100.0 + 7.0 * i as f64 + offset, 300.0 - 11.0 * (i % 5) as f64);
        }
        s
    }

    fn record(id: &str, landmarks: LandmarkSet, spacing: f64) -> AnnotationRecord {
        AnnotationRecord {
            image_id: id.into(),
            width: 957,
            height: 555,
            spacing_mm_per_px: spacing,
            landmarks,
        }
    }

    #[test]
    fn mre_examples() {
        let gt = set(0.0);
        assert_eq!(mre(&gt, &gt, 1.0).unwrap(), 0.0);
        let mut p = gt;
        p.0[3].x += 3.0;
        p.0[3].y += 4.0;
        assert_eq!(mre(&p, &gt, 1.0).unwrap(), 5.0 / 16.0);
        assert!((mre(&set(1.0), &gt, 0.2).unwrap() - 0.2).abs() < 1e-15);
        assert!(matches!(mre(&gt, &gt, 0.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn sdr_examples() {
        let gt = set(0.0);
        for t in DEFAULT_THRESHOLDS_MM {
            assert_eq!(sdr(&[gt], &[gt], &[0.1], t).unwrap(), 100.0);
        }
        let mut p = gt;
        p.0[0].x += 7.0; // 0.7 mm at 0.1 mm/px
        assert_eq!(sdr(&[p], &[gt], &[0.1], 0.5).unwrap(), 93.75);
        assert_eq!(sdr(&[p], &[gt], &[0.1], 1.0).unwrap(), 100.0);
        assert!(matches!(sdr(&[p, p], &[gt], &[0.1], 1.0), Err(Error::Dimension(_))));
    }

    #[test]
    fn boundary_is_inclusive() {
        let gt = set(0.0);
        let mut p = gt;
        p.0[0].x += 5.0;
        assert_eq!(sdr(&[p], &[gt], &[0.1], 0.5).unwrap(), 100.0);
    }

    #[test]
    fn two_image_corpus() {
        let gts = vec![record("A", set(0.0), 0.1), record("B", set(0.0), 0.1)];
        let preds = vec![record("A", set(0.0), 0.1), record("B", set(15.0), 0.1)];
        let r = evaluate_corpus(&preds, &gts, &DEFAULT_THRESHOLDS_MM, SpacingSource::FromGroundTruth).unwrap();
        assert_eq!(r.sdr[1], (1.0, 50.0));
        assert_eq!(r.sdr[2], (2.0, 100.0));
        assert_eq!(r.n_points, 32);
        assert!(r.to_csv().starts_with("metric,value\nsdr_0.5,50\nsdr_1.0,50\nsdr_2.0,100\n"));
    }

    #[test]
    fn identical_corpus() {
        let gts = vec![record("A", set(0.0), 0.1), record("B", set(2.0), 0.2)];
        let r = evaluate_corpus(&gts, &gts, &DEFAULT_THRESHOLDS_MM, SpacingSource::FromGroundTruth).unwrap();
        assert_eq!(r.mre_mm, 0.0);
        assert_eq!(r.sdr_average, 100.0);
        assert!(r.sdr.iter().all(|(_, v)| *v == 100.0));
    }

    #[test]
    fn unmatched_ids() {
        let gts = vec![record("A", set(0.0), 0.1), record("B", set(0.0), 0.1)];
        let preds = vec![record("A", set(0.0), 0.1), record("C", set(0.0), 0.1)];
        match evaluate_corpus(&preds, &gts, &DEFAULT_THRESHOLDS_MM, SpacingSource::FromGroundTruth) {
            Err(Error::Pairing { missing_in_pred, missing_in_gt }) => {
                assert_eq!(missing_in_pred, vec!["B".to_string()]);
                assert_eq!(missing_in_gt, vec!["C".to_string()]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn summary_row_layout() {
        let r = MetricsReport {
            mre_mm: 0.747,
            sdr: vec![(0.5, 63.19), (1.0, 84.14), (2.0, 93.36)],
            sdr_average: 80.23,
            geometric_residual: None,
            geometric_skipped: 0,
            per_landmark_mre_mm: [0.0; 16],
            n_images: 162,
            n_points: 162 * 16,
        };
        assert_eq!(r.summary_header(), "sdr_0.5,sdr_1.0,sdr_2.0,sdr_average,mre_mm");
        assert_eq!(r.summary_row(), "63.19,84.14,93.36,80.23,0.747");
    }
}
