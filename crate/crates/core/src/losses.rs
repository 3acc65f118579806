//! Heatmap MSE, geometric loss on soft-argmax decodes, and their weighted sum.

use crate::error::{Error, Result};
use crate::geometry::{geometric_loss_grad, GeoLossValue};
use crate::heatmap::{encode_gaussian, soft_argmax_vjp_into, soft_argmax_with_probs, Heatmap, HeatmapStack, Role};
use crate::schema::{LandmarkSet, LineGroupSchema, NUM_LANDMARKS};

/// Default weight of the geometric term.
pub const DEFAULT_LAMBDA: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub mse: f64,
    pub geo: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(mse: f64, geo: f64, lambda: f64) -> Self {
        LossBreakdown {
            mse,
            geo,
            lambda,
            total: mse + lambda * geo,
        }
    }
}

fn check_shapes(pred: &HeatmapStack, target: &HeatmapStack) -> Result<()> {
    if pred.same_shape(target) {
        Ok(())
    } else {
        Err(Error::dim(format!(
            "prediction {}x{}x{} vs target {}x{}x{}",
            pred.num_channels(),
            pred.height(),
            pred.width(),
            target.num_channels(),
            target.height(),
            target.width()
        )))
    }
}

/// Mean of `(pred - target)^2` over every channel and pixel.
pub fn mse_heatmap(pred: &HeatmapStack, target: &HeatmapStack) -> Result<f64> {
    check_shapes(pred, target)?;
    let n = pred.len() as f64;
    let sum: f64 = pred
        .flat_values()
        .zip(target.flat_values())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(sum / n)
}

/// `2 (pred - target) / N` in the layout of `pred`.
pub fn mse_heatmap_grad(pred: &HeatmapStack, target: &HeatmapStack) -> Result<HeatmapStack> {
    check_shapes(pred, target)?;
    let k = 2.0 / pred.len() as f64;
    let channels = pred
        .channels()
        .iter()
        .zip(target.channels())
        .map(|(p, t)| {
            let g = p.values().iter().zip(t.values()).map(|(a, b)| k * (a - b)).collect();
            Heatmap::from_raw(p.width(), p.height(), g)
        })
        .collect();
    HeatmapStack::new(Role::Logits, channels)
}

/// Soft-argmax decode of all channels, keeping the probability maps.
fn decode_with_probs(
    pred: &HeatmapStack,
    temperature: f64,
) -> Result<(LandmarkSet, Vec<crate::heatmap::ProbabilityMap>)> {
    if pred.num_channels() != NUM_LANDMARKS {
        return Err(Error::dim(format!(
            "geometric loss needs {NUM_LANDMARKS} channels, got {}",
            pred.num_channels()
        )));
    }
    let mut set = LandmarkSet::default();
    let mut maps = Vec::with_capacity(NUM_LANDMARKS);
    for (p, c) in set.0.iter_mut().zip(pred.channels()) {
        let (q, m) = soft_argmax_with_probs(c, temperature)?;
        *p = q;
        maps.push(m);
    }
    Ok((set, maps))
}

/// Geometric loss of the soft-argmax decode and its gradient with respect to
/// the logits. Degenerate line fits are errors here.
pub fn geo_heatmap_grad(
    pred: &HeatmapStack,
    schema: &LineGroupSchema,
    temperature: f64,
) -> Result<(GeoLossValue, HeatmapStack)> {
    let (decoded, maps) = decode_with_probs(pred, temperature)?;
    let (value, g) = geometric_loss_grad(&decoded, schema)?;
    let channels = maps
        .iter()
        .zip(decoded.0.iter())
        .zip(g.0.iter())
        .map(|((m, &p), &up)| {
            let mut out = vec![0.0; m.probs().len()];
            soft_argmax_vjp_into(m, p, up, 1.0, &mut out);
            Heatmap::from_raw(m.width(), m.height(), out)
        })
        .collect();
    Ok((value, HeatmapStack::new(Role::Logits, channels)?))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParams {
    pub temperature: f64,
    pub sigma: f64,
    pub lambda: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        LossParams {
            temperature: crate::heatmap::DEFAULT_TEMPERATURE,
            sigma: crate::heatmap::DEFAULT_SIGMA,
            lambda: DEFAULT_LAMBDA,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TotalLoss {
    pub breakdown: LossBreakdown,
    /// Gradient of `breakdown.total` with respect to the predicted logits.
    pub grad: HeatmapStack,
    /// Soft-argmax decode of the prediction.
    pub decoded: LandmarkSet,
    /// True when a line fit was degenerate and the geometric term was dropped.
    pub degenerate: bool,
}

/// `mse(pred, gaussian(target_coords)) + lambda * geo(soft_argmax(pred))`.
pub fn total_loss(
    pred: &HeatmapStack,
    target_coords: &LandmarkSet,
    schema: &LineGroupSchema,
    params: LossParams,
) -> Result<TotalLoss> {
    let target = encode_gaussian(target_coords, pred.width(), pred.height(), params.sigma)?;
    total_loss_with_target(pred, &target, schema, params)
}

/// [`total_loss`] against a pre-encoded target stack.
///
/// A degenerate line fit makes the geometric term contribute 0 to both the
/// value and the gradient; `degenerate` is set so callers can count it.
pub fn total_loss_with_target(
    pred: &HeatmapStack,
    target: &HeatmapStack,
    schema: &LineGroupSchema,
    params: LossParams,
) -> Result<TotalLoss> {
    if !(params.lambda >= 0.0 && params.lambda.is_finite()) {
        return Err(Error::param(format!("lambda must be >= 0, got {}", params.lambda)));
    }
    if !(params.sigma > 0.0) {
        return Err(Error::param(format!("sigma must be positive, got {}", params.sigma)));
    }
    check_shapes(pred, target)?;
    let mse = mse_heatmap(pred, target)?;
    let (decoded, maps) = decode_with_probs(pred, params.temperature)?;

    let n = pred.len() as f64;
    let k = 2.0 / n;
    let mut channels: Vec<Vec<f64>> = pred
        .channels()
        .iter()
        .zip(target.channels())
        .map(|(p, t)| p.values().iter().zip(t.values()).map(|(a, b)| k * (a - b)).collect())
        .collect();

    let (geo, degenerate) = match geometric_loss_grad(&decoded, schema) {
        Ok((value, g)) => {
            if params.lambda != 0.0 {
                for ((out, m), (&p, &up)) in channels.iter_mut().zip(&maps).zip(decoded.0.iter().zip(g.0.iter())) {
                    soft_argmax_vjp_into(m, p, up, params.lambda, out);
                }
            }
            (value.total, false)
        }
        Err(Error::Degenerate { .. }) => (0.0, true),
        Err(e) => return Err(e),
    };

    let grad = HeatmapStack::new(
        Role::Logits,
        channels
            .into_iter()
            .map(|v| Heatmap::from_raw(pred.width(), pred.height(), v))
            .collect(),
    )?;
    Ok(TotalLoss {
        breakdown: LossBreakdown::new(mse, geo, params.lambda),
        grad,
        decoded,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heatmap::Heatmap;
    use crate::schema::{line_groups_default, LandmarkId, LossMode, Point};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stack1(values: Vec<f64>, role: Role) -> HeatmapStack {
        HeatmapStack::new(role, vec![Heatmap::new(2, 1, values).unwrap()]).unwrap()
    }

    fn random_stack(rng: &mut ChaCha8Rng, channels: usize, w: usize, h: usize, lo: f64, hi: f64, role: Role) -> HeatmapStack {
        let c = (0..channels)
            .map(|_| Heatmap::from_fn(w, h, |_, _| rng.random_range(lo..hi)).unwrap())
            .collect();
        HeatmapStack::new(role, c).unwrap()
    }

    #[test]
    fn mse_examples() {
        let t = stack1(vec![1.0, 1.0], Role::Target);
        assert_eq!(mse_heatmap(&t, &t).unwrap(), 0.0);
        assert_eq!(mse_heatmap(&stack1(vec![2.0, 2.0], Role::Logits), &t).unwrap(), 1.0);
        let p = stack1(vec![0.0, 1.0], Role::Logits);
        assert_eq!(mse_heatmap(&p, &t).unwrap(), 0.5);
        let g = mse_heatmap_grad(&p, &t).unwrap();
        assert_eq!(g.channel(0).values(), &[-1.0, 0.0]);
        assert!(mse_heatmap_grad(&t, &t).unwrap().flat_values().all(|v| v == 0.0));
    }

    #[test]
    fn mse_shape_mismatch() {
        let a = HeatmapStack::zeros(Role::Logits, 2, 3, 3).unwrap();
        let b = HeatmapStack::zeros(Role::Target, 3, 3, 3).unwrap();
        assert!(matches!(mse_heatmap(&a, &b), Err(Error::Dimension(_))));
        assert!(matches!(mse_heatmap_grad(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn mse_grad_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pred = random_stack(&mut rng, 16, 32, 32, -1.0, 1.0, Role::Logits);
        let target = random_stack(&mut rng, 16, 32, 32, 0.0, 1.0, Role::Target);
        let g: Vec<f64> = mse_heatmap_grad(&pred, &target).unwrap().flat_values().collect();
        let base: Vec<f64> = pred.flat_values().collect();
        // the loss is quadratic, so central differences are exact for any step;
        // a large step keeps cancellation well below the 1e-6 tolerance
        let step = 0.1;
        for _ in 0..200 {
            let i = rng.random_range(0..base.len());
            let eval = |d: f64| {
                let mut v = base.clone();
                v[i] += d;
                mse_heatmap(&pred.with_flat_values(Role::Logits, &v).unwrap(), &target).unwrap()
            };
            let fd = (eval(step) - eval(-step)) / (2.0 * step);
            assert!((fd - g[i]).abs() / g[i].abs().max(1e-12) <= 1e-6, "{fd} vs {}", g[i]);
        }
    }

    fn random_targets(rng: &mut ChaCha8Rng, w: usize) -> LandmarkSet {
        let mut s = LandmarkSet::default();
        for p in s.0.iter_mut() {
            *p = Point::new(rng.random_range(2.0..(w as f64 - 3.0)), rng.random_range(2.0..(w as f64 - 3.0)));
        }
        s
    }

    #[test]
    fn lambda_zero_is_pure_mse() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pred = random_stack(&mut rng, 16, 16, 16, 0.0, 0.5, Role::Logits);
        let coords = random_targets(&mut rng, 16);
        let params = LossParams { lambda: 0.0, ..LossParams::default() };
        let t = total_loss(&pred, &coords, &line_groups_default(), params).unwrap();
        let target = encode_gaussian(&coords, 16, 16, params.sigma).unwrap();
        assert_eq!(t.breakdown.total, mse_heatmap(&pred, &target).unwrap());
        assert_eq!(t.grad, mse_heatmap_grad(&pred, &target).unwrap());
    }

    #[test]
    fn lambda_linearity_and_gradient_additivity() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let pred = random_stack(&mut rng, 16, 16, 16, 0.0, 0.5, Role::Logits);
        let coords = random_targets(&mut rng, 16);
        let schema = line_groups_default();
        let p0 = LossParams { lambda: 0.0, ..LossParams::default() };
        let lambda = 0.37;
        let p1 = LossParams { lambda, ..LossParams::default() };
        let t0 = total_loss(&pred, &coords, &schema, p0).unwrap();
        let t1 = total_loss(&pred, &coords, &schema, p1).unwrap();
        assert!(!t1.degenerate);
        // exact up to the rounding of the final addition
        let diff = t1.breakdown.total - t0.breakdown.total;
        assert!((diff - lambda * t1.breakdown.geo).abs() <= 2.0 * f64::EPSILON * t1.breakdown.total.abs());
        assert_eq!(t1.breakdown.total, t1.breakdown.mse + lambda * t1.breakdown.geo);

        let target = encode_gaussian(&coords, 16, 16, p1.sigma).unwrap();
        let mse_g: Vec<f64> = mse_heatmap_grad(&pred, &target).unwrap().flat_values().collect();
        let (geo, geo_g) = geo_heatmap_grad(&pred, &schema, p1.temperature).unwrap();
        assert_eq!(geo.total, t1.breakdown.geo);
        for ((c, m), g) in t1.grad.flat_values().zip(&mse_g).zip(geo_g.flat_values()) {
            assert!((c - (m + lambda * g)).abs() <= 1e-12);
        }
    }

    #[test]
    fn uniform_logits_hit_the_degenerate_fallback() {
        let pred = HeatmapStack::zeros(Role::Logits, 16, 8, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let coords = random_targets(&mut rng, 8);
        let t = total_loss(&pred, &coords, &line_groups_default(), LossParams::default()).unwrap();
        assert!(t.degenerate);
        assert_eq!(t.breakdown.geo, 0.0);
        let target = encode_gaussian(&coords, 8, 8, 2.0).unwrap();
        assert_eq!(t.grad, mse_heatmap_grad(&pred, &target).unwrap());
    }

    #[test]
    fn bad_parameters() {
        let pred = HeatmapStack::zeros(Role::Logits, 16, 8, 8).unwrap();
        let coords = LandmarkSet::default();
        let s = line_groups_default();
        for params in [
            LossParams { lambda: -1.0, ..LossParams::default() },
            LossParams { sigma: 0.0, ..LossParams::default() },
            LossParams { temperature: 0.0, ..LossParams::default() },
        ] {
            assert!(matches!(total_loss(&pred, &coords, &s, params), Err(Error::Parameter(_))));
        }
    }

    #[test]
    fn exact_decoded_configuration_is_stationary() {
        use LandmarkId::*;
        // integer lattice points: vertical axis, horizontal level lines
        let mut coords = LandmarkSet::default();
        let place = |s: &mut LandmarkSet, id: LandmarkId, x: f64, y: f64| s[id] = Point::new(x, y);
        place(&mut coords, CP, 16.0, 2.0);
        place(&mut coords, AP, 16.0, 28.0);
        place(&mut coords, AB_AP, 10.0, 28.0);
        place(&mut coords, PB_AP, 22.0, 28.0);
        for (ids, y) in [([AB_13, AR_13, PR_13, PB_13], 20.0), ([AB_12, AR_12, PR_12, PB_12], 15.0)] {
            for (id, x) in ids.into_iter().zip([8.0, 13.0, 19.0, 24.0]) {
                place(&mut coords, id, x, y);
            }
        }
        place(&mut coords, CEJ_A, 11.0, 8.0);
        place(&mut coords, CEJ_P, 21.0, 8.0);
        place(&mut coords, A_crest, 9.0, 10.0);
        place(&mut coords, P_crest, 23.0, 10.0);
        let channels = coords
            .0
            .iter()
            .map(|p| Heatmap::from_fn(32, 32, |x, y| if (x as f64, y as f64) == (p.x, p.y) { 10.0 } else { 0.0 }).unwrap())
            .collect();
        let pred = HeatmapStack::new(Role::Logits, channels).unwrap();
        let schema = line_groups_default().with_loss_mode(LossMode::Squared);
        let (geo, g) = geo_heatmap_grad(&pred, &schema, 0.1).unwrap();
        assert_eq!(geo.total, 0.0);
        let norm = g.flat_values().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm <= 1e-9, "{norm}");
    }
}
