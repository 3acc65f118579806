//! Central-difference verification of every analytic gradient.
//!
//! Relative error of an analytic partial `a` against its numerical estimate
//! `n` is `|a - n| / max(|a|, |n|, floor)` with `floor = 1e-3 * max|a|` over
//! the partials checked in that instance. The floor keeps partials that are
//! zero up to rounding from dominating the maximum.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{geometric_loss, geometric_loss_grad};
use crate::heatmap::{encode_gaussian, soft_argmax_jacobian, soft_argmax_with_probs, Heatmap, HeatmapStack, Role};
use crate::losses::{mse_heatmap, mse_heatmap_grad, total_loss_with_target, LossParams};
use crate::schema::{line_groups_default, LandmarkSet, LineGroupSchema, LossMode, Point, NUM_LANDMARKS};
use crate::synth::{generate_tooth_config, mix_seed, perturb, sample_params, ParamRanges};

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub instances: usize,
    pub width: usize,
    pub height: usize,
    pub step: f64,
    pub temperature: f64,
    /// Weight of the geometric term in the `total_loss` component. At 0 the
    /// geometric components are reported as not exercised.
    pub lambda: f64,
    pub loss_mode: LossMode,
    pub tolerance: f64,
    /// Channels of the soft-argmax and total-loss checks, per instance.
    pub channels_per_instance: usize,
    /// Pixels sampled per channel in the MSE and total-loss checks.
    pub pixels_per_channel: usize,
    /// Replace the geometric check with a configuration whose line fit is
    /// degenerate and verify the zero-gradient fallback instead.
    pub inject_degenerate: bool,
    pub threads: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            seed: 1,
            instances: 100,
            width: 32,
            height: 32,
            step: 1e-5,
            temperature: crate::heatmap::DEFAULT_TEMPERATURE,
            lambda: crate::losses::DEFAULT_LAMBDA,
            loss_mode: LossMode::default(),
            tolerance: 1e-4,
            channels_per_instance: 3,
            pixels_per_channel: 64,
            inject_degenerate: false,
            threads: 1,
        }
    }
}

pub const STATUS_PASS: &str = "pass";
pub const STATUS_FAIL: &str = "fail";
pub const STATUS_NOT_EXERCISED: &str = "not exercised";
pub const STATUS_FALLBACK: &str = "fallback path: zero gradient verified";
pub const STATUS_FALLBACK_FAILED: &str = "fallback path: nonzero gradient";

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckRow {
    pub component: &'static str,
    /// NaN when the component was not exercised.
    pub max_rel_err: f64,
    pub status: &'static str,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub rows: Vec<GradcheckRow>,
}

impl GradcheckReport {
    pub fn row(&self, component: &str) -> Option<&GradcheckRow> {
        self.rows.iter().find(|r| r.component == component)
    }

    /// True when no row failed.
    pub fn ok(&self) -> bool {
        self.rows
            .iter()
            .all(|r| r.status != STATUS_FAIL && r.status != STATUS_FALLBACK_FAILED)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("component,max_rel_err,status\n");
        for r in &self.rows {
            let err = if r.max_rel_err.is_nan() {
                String::new()
            } else {
                format!("{:e}", r.max_rel_err)
            };
            let _ = writeln!(out, "{},{},{}", r.component, err, r.status);
        }
        out
    }
}

/// Maximum floored relative error between two gradient vectors.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(f64::MIN_POSITIVE);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

fn random_logits(rng: &mut ChaCha8Rng, w: usize, h: usize) -> (HeatmapStack, LandmarkSet) {
    let mut centers = LandmarkSet::default();
    for p in centers.0.iter_mut() {
        *p = Point::new(rng.random_range(3.0..w as f64 - 4.0), rng.random_range(3.0..h as f64 - 4.0));
    }
    let channels = centers
        .0
        .iter()
        .map(|c| {
            Heatmap::from_fn(w, h, |x, y| {
                let d2 = (x as f64 - c.x).powi(2) + (y as f64 - c.y).powi(2);
                0.5 * rng.random::<f64>() + (-d2 / 8.0).exp()
            })
            .expect("finite")
        })
        .collect();
    (HeatmapStack::new(Role::Logits, channels).expect("uniform shape"), centers)
}

fn distinct(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(k);
    while out.len() < k.min(n) {
        let i = rng.random_range(0..n);
        if !out.contains(&i) {
            out.push(i);
        }
    }
    out
}

fn perturbed(stack: &HeatmapStack, flat_index: usize, delta: f64) -> HeatmapStack {
    let mut v: Vec<f64> = stack.flat_values().collect();
    v[flat_index] += delta;
    stack.with_flat_values(stack.role(), &v).expect("finite perturbation")
}

fn instance_rng(cfg: &GradcheckConfig, component: u64, k: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(cfg.seed, component), k as u64))
}

fn check_soft_argmax(cfg: &GradcheckConfig, k: usize) -> Result<f64> {
    let mut rng = instance_rng(cfg, 1, k);
    let (stack, _) = random_logits(&mut rng, cfg.width, cfg.height);
    let h = cfg.step;
    let mut worst = 0.0f64;
    for c in distinct(&mut rng, NUM_LANDMARKS, cfg.channels_per_instance) {
        let ch = stack.channel(c);
        let jac = soft_argmax_jacobian(ch, cfg.temperature)?;
        let mut nx = Vec::with_capacity(ch.len());
        let mut ny = Vec::with_capacity(ch.len());
        let mut vals = ch.values().to_vec();
        for i in 0..ch.len() {
            let orig = vals[i];
            vals[i] = orig + h;
            let (p, _) = soft_argmax_with_probs(&Heatmap::new(cfg.width, cfg.height, vals.clone())?, cfg.temperature)?;
            vals[i] = orig - h;
            let (m, _) = soft_argmax_with_probs(&Heatmap::new(cfg.width, cfg.height, vals.clone())?, cfg.temperature)?;
            vals[i] = orig;
            nx.push((p.x - m.x) / (2.0 * h));
            ny.push((p.y - m.y) / (2.0 * h));
        }
        worst = worst.max(max_relative_error(&jac.d_x, &nx)).max(max_relative_error(&jac.d_y, &ny));
    }
    Ok(worst)
}

fn check_mse(cfg: &GradcheckConfig, k: usize) -> Result<f64> {
    let mut rng = instance_rng(cfg, 2, k);
    let (pred, centers) = random_logits(&mut rng, cfg.width, cfg.height);
    let shifted = centers.map(|p| Point::new(p.x + rng.random_range(-2.0..2.0), p.y + rng.random_range(-2.0..2.0)));
    let target = encode_gaussian(&shifted, cfg.width, cfg.height, 2.0)?;
    let grad: Vec<f64> = mse_heatmap_grad(&pred, &target)?.flat_values().collect();
    let n = cfg.pixels_per_channel * cfg.channels_per_instance;
    let idx = distinct(&mut rng, pred.len(), n);
    let h = cfg.step;
    let mut a = Vec::with_capacity(idx.len());
    let mut num = Vec::with_capacity(idx.len());
    for &i in &idx {
        let up = mse_heatmap(&perturbed(&pred, i, h), &target)?;
        let down = mse_heatmap(&perturbed(&pred, i, -h), &target)?;
        a.push(grad[i]);
        num.push((up - down) / (2.0 * h));
    }
    Ok(max_relative_error(&a, &num))
}

fn random_configuration(rng: &mut ChaCha8Rng) -> Result<LandmarkSet> {
    let params = sample_params(rng, &ParamRanges::default(), 957, 555);
    let exact = generate_tooth_config(&params)?;
    Ok(perturb(&exact, 3.0, rng.random()))
}

fn check_geometric(cfg: &GradcheckConfig, schema: &LineGroupSchema, k: usize) -> Result<f64> {
    let mut rng = instance_rng(cfg, 3, k);
    let set = random_configuration(&mut rng)?;
    let (_, g) = geometric_loss_grad(&set, schema)?;
    let h = cfg.step;
    let mut a = Vec::with_capacity(2 * NUM_LANDMARKS);
    let mut num = Vec::with_capacity(2 * NUM_LANDMARKS);
    for i in 0..NUM_LANDMARKS {
        for axis in 0..2 {
            let eval = |d: f64| {
                let mut s = set;
                if axis == 0 {
                    s.0[i].x += d;
                } else {
                    s.0[i].y += d;
                }
                geometric_loss(&s, schema).map(|v| v.total)
            };
            num.push((eval(h)? - eval(-h)?) / (2.0 * h));
            a.push(if axis == 0 { g.0[i].x } else { g.0[i].y });
        }
    }
    Ok(max_relative_error(&a, &num))
}

fn check_total(cfg: &GradcheckConfig, schema: &LineGroupSchema, lambda: f64, k: usize) -> Result<f64> {
    let mut rng = instance_rng(cfg, 4, k);
    let (pred, centers) = random_logits(&mut rng, cfg.width, cfg.height);
    let shifted = centers.map(|p| Point::new(p.x + rng.random_range(-2.0..2.0), p.y + rng.random_range(-2.0..2.0)));
    let target = encode_gaussian(&shifted, cfg.width, cfg.height, 2.0)?;
    let params = LossParams {
        temperature: cfg.temperature,
        sigma: 2.0,
        lambda,
    };
    let base = total_loss_with_target(&pred, &target, schema, params)?;
    let grad: Vec<f64> = base.grad.flat_values().collect();
    let per = cfg.width * cfg.height;
    let h = cfg.step;
    let mut a = Vec::new();
    let mut num = Vec::new();
    for c in distinct(&mut rng, NUM_LANDMARKS, cfg.channels_per_instance) {
        for p in distinct(&mut rng, per, cfg.pixels_per_channel) {
            let i = c * per + p;
            let up = total_loss_with_target(&perturbed(&pred, i, h), &target, schema, params)?;
            let down = total_loss_with_target(&perturbed(&pred, i, -h), &target, schema, params)?;
            if up.degenerate || down.degenerate || base.degenerate {
                return Err(Error::Input("gradcheck total-loss instance hit a degenerate fit".into()));
            }
            a.push(grad[i]);
            num.push((up.breakdown.total - down.breakdown.total) / (2.0 * h));
        }
    }
    Ok(max_relative_error(&a, &num))
}

/// Uniform logits on every channel of the apex level make its decoded points
/// coincide, so the line fit is degenerate; the total-loss gradient must then
/// equal the MSE gradient exactly.
fn check_fallback(cfg: &GradcheckConfig, schema: &LineGroupSchema) -> Result<bool> {
    let mut rng = instance_rng(cfg, 5, 0);
    let (pred, centers) = random_logits(&mut rng, cfg.width, cfg.height);
    let mut channels = pred.into_channels();
    for id in schema.root_apex_level() {
        channels[id.index()] = Heatmap::zeros(cfg.width, cfg.height)?;
    }
    let pred = HeatmapStack::new(Role::Logits, channels)?;
    let target = encode_gaussian(&centers, cfg.width, cfg.height, 2.0)?;
    let params = LossParams {
        temperature: cfg.temperature,
        sigma: 2.0,
        lambda: if cfg.lambda > 0.0 { cfg.lambda } else { 1.0 },
    };
    let t = total_loss_with_target(&pred, &target, schema, params)?;
    let mse = mse_heatmap_grad(&pred, &target)?;
    Ok(t.degenerate && t.breakdown.geo == 0.0 && t.grad.flat_values().eq(mse.flat_values()))
}

fn run_component(cfg: &GradcheckConfig, f: impl Fn(usize) -> Result<f64> + Sync + Send) -> Result<f64> {
    let errs: Vec<Result<f64>> = if cfg.threads > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| Error::param(format!("thread pool: {e}")))?;
        pool.install(|| (0..cfg.instances).into_par_iter().map(&f).collect())
    } else {
        (0..cfg.instances).map(&f).collect()
    };
    let mut worst = 0.0f64;
    for e in errs {
        let e = e?;
        worst = if e.is_nan() { f64::NAN } else { worst.max(e) };
    }
    Ok(worst)
}

fn row(component: &'static str, err: f64, tol: f64) -> GradcheckRow {
    GradcheckRow {
        component,
        max_rel_err: err,
        status: if err <= tol { STATUS_PASS } else { STATUS_FAIL },
    }
}

pub fn gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if cfg.instances == 0 || cfg.width < 8 || cfg.height < 8 {
        return Err(Error::param("gradcheck needs at least one instance of at least 8x8"));
    }
    if !(cfg.step > 0.0 && cfg.temperature > 0.0 && cfg.lambda >= 0.0 && cfg.tolerance > 0.0) {
        return Err(Error::param("gradcheck step, temperature and tolerance must be positive, lambda >= 0"));
    }
    if cfg.channels_per_instance == 0 || cfg.pixels_per_channel == 0 || cfg.threads == 0 {
        return Err(Error::param("gradcheck sample counts and threads must be positive"));
    }
    let schema = line_groups_default().with_loss_mode(cfg.loss_mode);
    let tol = cfg.tolerance;
    let mut rows = vec![
        row("soft_argmax_jacobian", run_component(cfg, |k| check_soft_argmax(cfg, k))?, tol),
        row("mse_heatmap_grad", run_component(cfg, |k| check_mse(cfg, k))?, tol),
    ];
    if cfg.lambda == 0.0 {
        rows.push(GradcheckRow {
            component: "geometric_loss_grad",
            max_rel_err: f64::NAN,
            status: STATUS_NOT_EXERCISED,
        });
    } else if cfg.inject_degenerate {
        let ok = check_fallback(cfg, &schema)?;
        rows.push(GradcheckRow {
            component: "geometric_loss_grad",
            max_rel_err: 0.0,
            status: if ok { STATUS_FALLBACK } else { STATUS_FALLBACK_FAILED },
        });
    } else {
        rows.push(row(
            "geometric_loss_grad",
            run_component(cfg, |k| check_geometric(cfg, &schema, k))?,
            tol,
        ));
    }
    rows.push(row(
        "total_loss",
        run_component(cfg, |k| check_total(cfg, &schema, cfg.lambda, k))?,
        tol,
    ));
    Ok(GradcheckReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GradcheckConfig {
        GradcheckConfig {
            instances: 3,
            width: 12,
            height: 12,
            pixels_per_channel: 8,
            ..GradcheckConfig::default()
        }
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(max_relative_error(&[1.0, 0.0], &[1.0, 1e-20]), 1e-20 / 1e-3);
        assert_eq!(max_relative_error(&[2.0], &[1.0]), 0.5);
    }

    #[test]
    fn small_run_passes() {
        let r = gradcheck(&small()).unwrap();
        assert!(r.ok(), "{}", r.to_csv());
        assert_eq!(r.rows.len(), 4);
        assert!(r.to_csv().starts_with("component,max_rel_err,status\n"));
    }

    #[test]
    fn lambda_zero_skips_geometry() {
        let r = gradcheck(&GradcheckConfig { lambda: 0.0, ..small() }).unwrap();
        assert_eq!(r.row("geometric_loss_grad").unwrap().status, STATUS_NOT_EXERCISED);
        assert!(r.to_csv().contains("geometric_loss_grad,,not exercised\n"));
    }

    // At the default weight the geometric share of the total gradient is
    // below the tolerance, so the coupling is also checked at unit weight.
    // There the loss is large relative to each partial and step 1e-5 is
    // dominated by rounding, so a wider step is used.
    #[test]
    fn total_gradient_at_unit_lambda() {
        let cfg = GradcheckConfig {
            instances: 10,
            step: 1e-4,
            ..GradcheckConfig::default()
        };
        let schema = line_groups_default().with_loss_mode(cfg.loss_mode);
        let worst = run_component(&cfg, |k| check_total(&cfg, &schema, 1.0, k)).unwrap();
        assert!(worst <= 1e-4, "{worst}");
    }

    #[test]
    fn injected_degeneracy_uses_fallback() {
        let r = gradcheck(&GradcheckConfig {
            inject_degenerate: true,
            ..small()
        })
        .unwrap();
        assert_eq!(r.row("geometric_loss_grad").unwrap().status, STATUS_FALLBACK);
        assert!(r.ok());
    }

    #[test]
    fn threads_do_not_change_the_report() {
        let a = gradcheck(&small()).unwrap();
        let b = gradcheck(&GradcheckConfig { threads: 2, ..small() }).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
    }
}
