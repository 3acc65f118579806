//! Reference trainer.
//!
//! Two parameterizations share one loop:
//!
//! * `free_logits`: every image owns its heatmap logits directly, initialized
//!   to zero. Train and validation images are both fitted (there is nothing
//!   to generalize from), losses are logged on the train images and the
//!   validation columns describe the validation images.
//! * `lora_linear`: logits are `W x + (alpha/r) B A x + bias` for a frozen
//!   random `W` and a per-image feature vector `x` derived from the image id.
//!   Only the train images are fitted; validation images are decoded from the
//!   model.
//!
//! Validation columns of an epoch use the decode each validation image had
//! when it was last evaluated during that epoch: its loss evaluation for
//! fitted images, a decode after the epoch's last step otherwise.
//!
//! Heatmaps cover an isotropic square crop around each annotation's bounding
//! box, so decoded coordinates map back to image pixels by one scale and one
//! offset.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::geometric_loss;
use crate::heatmap::{decode_soft_argmax, encode_gaussian, Heatmap, HeatmapStack, Role, DEFAULT_SIGMA, DEFAULT_TEMPERATURE};
use crate::lora::{lora_backward, trainable_param_count, LoraLinear, MapSpec, ModelDescription, ParamCount, REFERENCE_SCALE_LINE};
use crate::losses::{total_loss_with_target, LossParams, TotalLoss, DEFAULT_LAMBDA};
use crate::optim::{adamw_step, AdamWState, LrSchedule, ADAM_BETA1, ADAM_BETA2, ADAM_EPS, DEFAULT_WEIGHT_DECAY};
use crate::schema::{line_groups_default, AnnotationRecord, LandmarkSet, LossMode, Point, NUM_LANDMARKS};
use crate::synth::mix_seed;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TrainMode {
    #[default]
    FreeLogits,
    LoraLinear,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::FreeLogits => "free_logits",
            TrainMode::LoraLinear => "lora_linear",
        }
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "free_logits" => Ok(TrainMode::FreeLogits),
            "lora_linear" => Ok(TrainMode::LoraLinear),
            other => Err(Error::param(format!(
                "unknown train mode {other:?} (expected free_logits or lora_linear)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraSettings {
    pub feature_dim: usize,
    pub rank: usize,
    pub alpha: f64,
    /// Standard deviation of the frozen weights times `sqrt(feature_dim)`.
    pub base_scale: f64,
}

impl Default for LoraSettings {
    fn default() -> Self {
        LoraSettings {
            feature_dim: 32,
            rank: 4,
            alpha: 4.0,
            base_scale: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub lambda: f64,
    pub temperature: f64,
    /// Target Gaussian width in heatmap pixels.
    pub sigma: f64,
    pub loss_mode: LossMode,
    pub epochs: usize,
    /// Images per optimizer step; `None` uses every fitted image.
    pub batch: Option<usize>,
    pub seed: u64,
    pub heatmap_size: usize,
    /// Crop padding on each side as a fraction of the bounding-box extent.
    pub crop_margin: f64,
    pub schedule: LrSchedule,
    /// Epoch at which the geometric term switches on.
    pub lambda_start_epoch: usize,
    /// Epochs over which its weight then rises linearly to `lambda`.
    pub lambda_ramp_epochs: usize,
    pub weight_decay: f64,
    /// Worker threads for per-image loss evaluation. Results are reduced in
    /// image order, so the output does not depend on this value.
    pub threads: usize,
    pub lora: LoraSettings,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::FreeLogits,
            lambda: DEFAULT_LAMBDA,
            temperature: DEFAULT_TEMPERATURE,
            sigma: DEFAULT_SIGMA,
            loss_mode: LossMode::default(),
            epochs: 300,
            batch: None,
            seed: 0,
            heatmap_size: 64,
            crop_margin: 0.15,
            schedule: LrSchedule::default(),
            lambda_start_epoch: 0,
            lambda_ramp_epochs: 0,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            threads: 1,
            lora: LoraSettings::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::param(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::param(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::param(format!("sigma must be positive, got {}", self.sigma)));
        }
        if self.epochs == 0 {
            return Err(Error::param("epochs must be at least 1"));
        }
        if self.batch == Some(0) {
            return Err(Error::param("batch must be at least 1"));
        }
        if self.heatmap_size < 2 {
            return Err(Error::param("heatmap_size must be at least 2"));
        }
        if !(self.crop_margin >= 0.0 && self.crop_margin.is_finite()) {
            return Err(Error::param("crop_margin must be >= 0"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::param("weight_decay must be >= 0"));
        }
        if self.threads == 0 {
            return Err(Error::param("threads must be at least 1"));
        }
        if self.mode == TrainMode::LoraLinear {
            let l = &self.lora;
            if l.feature_dim == 0 || l.rank == 0 {
                return Err(Error::param("lora feature_dim and rank must be at least 1"));
            }
            if !(l.alpha.is_finite() && l.base_scale.is_finite() && l.base_scale >= 0.0) {
                return Err(Error::param("lora alpha and base_scale must be finite"));
            }
        }
        self.schedule.validate()
    }

    /// Geometric weight in effect during `epoch`.
    pub fn lambda_at(&self, epoch: usize) -> f64 {
        if epoch < self.lambda_start_epoch {
            return 0.0;
        }
        let t = (epoch - self.lambda_start_epoch + 1) as f64 / (self.lambda_ramp_epochs + 1) as f64;
        self.lambda * t.min(1.0)
    }

    fn loss_params(&self, epoch: usize) -> LossParams {
        LossParams {
            temperature: self.temperature,
            sigma: self.sigma,
            lambda: self.lambda_at(epoch),
        }
    }
}

/// Square image window mapped onto the heatmap lattice.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropFrame {
    pub origin: Point,
    /// Heatmap pixels per image pixel.
    pub scale: f64,
}

impl CropFrame {
    pub fn around(set: &LandmarkSet, size: usize, margin: f64) -> CropFrame {
        let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in set.0 {
            x0 = x0.min(p.x);
            y0 = y0.min(p.y);
            x1 = x1.max(p.x);
            y1 = y1.max(p.y);
        }
        let side = ((x1 - x0).max(y1 - y0) * (1.0 + 2.0 * margin)).max(1.0);
        let cx = 0.5 * (x0 + x1);
        let cy = 0.5 * (y0 + y1);
        CropFrame {
            origin: Point::new(cx - 0.5 * side, cy - 0.5 * side),
            scale: (size - 1) as f64 / side,
        }
    }

    pub fn to_heatmap(&self, p: Point) -> Point {
        Point::new((p.x - self.origin.x) * self.scale, (p.y - self.origin.y) * self.scale)
    }

    pub fn to_image(&self, q: Point) -> Point {
        Point::new(self.origin.x + q.x / self.scale, self.origin.y + q.y / self.scale)
    }
}

struct Sample {
    record: AnnotationRecord,
    reference: LandmarkSet,
    frame: CropFrame,
    target: HeatmapStack,
    is_val: bool,
}

enum Model {
    Free {
        params: Vec<Vec<f64>>,
        states: Vec<AdamWState>,
    },
    Lora {
        features: Vec<Vec<f64>>,
        layer: Box<LoraLinear>,
        bias: Vec<f64>,
        state_a: AdamWState,
        state_b: AdamWState,
        state_bias: AdamWState,
    },
}

fn stack_from_flat(flat: &[f64], size: usize) -> Result<HeatmapStack> {
    let per = size * size;
    HeatmapStack::new(
        Role::Logits,
        flat.chunks_exact(per).map(|c| Heatmap::from_raw(size, size, c.to_vec())).collect(),
    )
}

/// FNV-1a, used to turn an image id into a feature seed.
fn hash_id(id: &str) -> u64 {
    id.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

impl Model {
    fn new(cfg: &TrainConfig, samples: &[Sample]) -> Result<Model> {
        let d_out = NUM_LANDMARKS * cfg.heatmap_size * cfg.heatmap_size;
        match cfg.mode {
            TrainMode::FreeLogits => Ok(Model::Free {
                params: vec![vec![0.0; d_out]; samples.len()],
                states: vec![AdamWState::new(d_out, cfg.weight_decay); samples.len()],
            }),
            TrainMode::LoraLinear => {
                let l = &cfg.lora;
                let d_in = l.feature_dim;
                let features = samples
                    .iter()
                    .map(|s| {
                        let mut rng = ChaCha8Rng::seed_from_u64(hash_id(&s.record.image_id));
                        (0..d_in).map(|_| rng.random_range(-1.0..1.0)).collect()
                    })
                    .collect();
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x4c6f_5241));
                let std = l.base_scale / (d_in as f64).sqrt();
                let w = (0..d_out * d_in)
                    .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let layer = LoraLinear::with_fresh_adapter(d_in, d_out, l.rank, l.alpha, w, &mut rng)?;
                Ok(Model::Lora {
                    features,
                    state_a: AdamWState::new(layer.a.len(), cfg.weight_decay),
                    state_b: AdamWState::new(layer.b.len(), cfg.weight_decay),
                    state_bias: AdamWState::new(d_out, cfg.weight_decay),
                    bias: vec![0.0; d_out],
                    layer: Box::new(layer),
                })
            }
        }
    }

    fn logits(&self, i: usize, size: usize) -> Result<HeatmapStack> {
        match self {
            Model::Free { params, .. } => stack_from_flat(&params[i], size),
            Model::Lora {
                features, layer, bias, ..
            } => {
                let mut y = crate::lora::lora_forward(layer, &features[i])?;
                for (v, b) in y.iter_mut().zip(bias) {
                    *v += b;
                }
                stack_from_flat(&y, size)
            }
        }
    }

    /// Applies one optimizer step from per-sample gradients already scaled
    /// by the batch size.
    fn step(&mut self, batch: &[usize], grads: &[Vec<f64>], lr: f64) -> Result<()> {
        match self {
            Model::Free { params, states } => {
                for (&i, g) in batch.iter().zip(grads) {
                    adamw_step(&mut params[i], g, &mut states[i], lr)?;
                }
            }
            Model::Lora {
                features,
                layer,
                bias,
                state_a,
                state_b,
                state_bias,
            } => {
                let mut ga = vec![0.0; layer.a.len()];
                let mut gb = vec![0.0; layer.b.len()];
                let mut gbias = vec![0.0; bias.len()];
                for (&i, g) in batch.iter().zip(grads) {
                    let lg = lora_backward(layer, &features[i], g)?;
                    ga.iter_mut().zip(&lg.a).for_each(|(s, v)| *s += v);
                    gb.iter_mut().zip(&lg.b).for_each(|(s, v)| *s += v);
                    gbias.iter_mut().zip(g).for_each(|(s, v)| *s += v);
                }
                adamw_step(&mut layer.a, &ga, state_a, lr)?;
                adamw_step(&mut layer.b, &gb, state_b, lr)?;
                adamw_step(bias, &gbias, state_bias, lr)?;
            }
        }
        Ok(())
    }

    fn param_count(&self) -> Option<ParamCount> {
        match self {
            Model::Free { .. } => None,
            Model::Lora { layer, bias, .. } => Some(trainable_param_count(&ModelDescription {
                maps: vec![MapSpec {
                    d_in: layer.d_in(),
                    d_out: layer.d_out(),
                    rank: layer.rank(),
                }],
                head_params: bias.len(),
            })),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Optimizer steps taken once the epoch finished.
    pub step: usize,
    /// Schedule factor used by the epoch's last step.
    pub lr_factor: f64,
    pub loss_total: f64,
    pub loss_mse: f64,
    pub loss_geo: f64,
    /// Mean absolute-mode geometric loss of the decoded validation points,
    /// NaN when every validation fit was degenerate.
    pub geo_residual_val: f64,
    /// Mean radial error in image pixels against the validation reference.
    pub mre_val_px: f64,
    pub degenerate_count: usize,
}

pub const REPORT_COLUMNS: [&str; 9] = [
    "epoch",
    "step",
    "lr_factor",
    "loss_total",
    "loss_mse",
    "loss_geo",
    "geo_residual_val",
    "mre_val_px",
    "degenerate_count",
];

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Configuration echo written as `# key=value` lines.
    pub header: Vec<(String, String)>,
    pub epochs: Vec<EpochLog>,
    /// Mean train geometric loss per optimizer step.
    pub geo_curve: Vec<(usize, f64)>,
    /// Decoded points for every image (train first), in image pixels.
    pub predictions: Vec<AnnotationRecord>,
    pub param_count: Option<ParamCount>,
}

fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v}")
    }
}

impl TrainReport {
    pub fn final_epoch(&self) -> &EpochLog {
        self.epochs.last().expect("at least one epoch")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.header {
            let _ = writeln!(out, "# {k}={v}");
        }
        out.push_str(&REPORT_COLUMNS.join(","));
        out.push('\n');
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                e.epoch,
                e.step,
                fmt_f64(e.lr_factor),
                fmt_f64(e.loss_total),
                fmt_f64(e.loss_mse),
                fmt_f64(e.loss_geo),
                fmt_f64(e.geo_residual_val),
                fmt_f64(e.mre_val_px),
                e.degenerate_count
            );
        }
        out
    }

    pub fn geo_curve_csv(&self) -> String {
        let mut out = String::from("step,loss_geo\n");
        for (s, g) in &self.geo_curve {
            let _ = writeln!(out, "{s},{}", fmt_f64(*g));
        }
        out
    }
}

/// Input records for [`train`].
#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub train: Vec<AnnotationRecord>,
    pub val: Vec<AnnotationRecord>,
    /// Reference positions for the validation images (for example the exact
    /// configurations behind noisy annotations). The validation annotations
    /// are used when absent.
    pub val_reference: Option<Vec<AnnotationRecord>>,
}

fn build_samples(cfg: &TrainConfig, data: &TrainData) -> Result<Vec<Sample>> {
    if data.train.is_empty() {
        return Err(Error::param("training set is empty"));
    }
    if data.val.is_empty() {
        return Err(Error::param("validation set is empty"));
    }
    let mut seen = std::collections::BTreeSet::new();
    for r in data.train.iter().chain(&data.val) {
        if !seen.insert(r.image_id.as_str()) {
            return Err(Error::Input(format!("image_id {:?} appears more than once", r.image_id)));
        }
    }
    let reference: Option<BTreeMap<&str, &LandmarkSet>> = data
        .val_reference
        .as_ref()
        .map(|v| v.iter().map(|r| (r.image_id.as_str(), &r.landmarks)).collect());
    let size = cfg.heatmap_size;
    let mut out = Vec::with_capacity(data.train.len() + data.val.len());
    for (records, is_val) in [(&data.train, false), (&data.val, true)] {
        for r in records {
            let frame = CropFrame::around(&r.landmarks, size, cfg.crop_margin);
            let target = encode_gaussian(&r.landmarks.map(|p| frame.to_heatmap(p)), size, size, cfg.sigma)?;
            let reference = match (&reference, is_val) {
                (Some(map), true) => **map.get(r.image_id.as_str()).ok_or_else(|| Error::Pairing {
                    missing_in_pred: vec![],
                    missing_in_gt: vec![r.image_id.clone()],
                })?,
                _ => r.landmarks,
            };
            out.push(Sample {
                record: r.clone(),
                reference,
                frame,
                target,
                is_val,
            });
        }
    }
    Ok(out)
}

fn pool(threads: usize) -> Result<Option<rayon::ThreadPool>> {
    if threads <= 1 {
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map(Some)
        .map_err(|e| Error::param(format!("thread pool: {e}")))
}

fn map_in_order<T: Send>(pool: &Option<rayon::ThreadPool>, n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    match pool {
        None => (0..n).map(f).collect(),
        Some(p) => p.install(|| (0..n).into_par_iter().map(f).collect()),
    }
}

pub fn train(data: &TrainData, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let samples = build_samples(cfg, data)?;
    let schema = line_groups_default().with_loss_mode(cfg.loss_mode);
    let residual_schema = line_groups_default().with_loss_mode(LossMode::Absolute);
    let size = cfg.heatmap_size;
    let workers = pool(cfg.threads)?;
    let mut model = Model::new(cfg, &samples)?;

    let fitted: Vec<usize> = match cfg.mode {
        TrainMode::FreeLogits => (0..samples.len()).collect(),
        TrainMode::LoraLinear => (0..samples.len()).filter(|&i| !samples[i].is_val).collect(),
    };
    let val: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].is_val).collect();
    let batch_size = cfg.batch.unwrap_or(fitted.len()).min(fitted.len());

    let mut step = 0usize;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut geo_curve = Vec::new();
    let mut last_finite: Option<usize> = None;

    for epoch in 0..cfg.epochs {
        let mut order = fitted.clone();
        if batch_size < fitted.len() {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64)));
        }
        let (mut sum_total, mut sum_mse, mut sum_geo, mut n_train, mut degenerate) = (0.0, 0.0, 0.0, 0usize, 0usize);
        let mut lr_factor = 0.0;
        let params = cfg.loss_params(epoch);
        // validation decodes seen during the epoch's steps, in heatmap pixels
        let mut in_epoch: Vec<Option<LandmarkSet>> = vec![None; samples.len()];
        for batch in order.chunks(batch_size) {
            let model_ref = &model;
            let results: Vec<Result<TotalLoss>> = map_in_order(&workers, batch.len(), |j| {
                let i = batch[j];
                let logits = model_ref.logits(i, size)?;
                total_loss_with_target(&logits, &samples[i].target, &schema, params)
            });
            let inv = 1.0 / batch.len() as f64;
            let mut grads = Vec::with_capacity(batch.len());
            let (mut step_geo, mut step_n) = (0.0, 0usize);
            for (&i, r) in batch.iter().zip(results) {
                let loss = match r {
                    Ok(l) if l.breakdown.total.is_finite() => l,
                    Ok(_) | Err(Error::Input(_)) => {
                        return Err(Error::Divergence {
                            epoch,
                            last_finite_epoch: last_finite,
                        })
                    }
                    Err(e) => return Err(e),
                };
                if !samples[i].is_val {
                    let b = loss.breakdown;
                    sum_total += b.total;
                    sum_mse += b.mse;
                    sum_geo += b.geo;
                    n_train += 1;
                    step_geo += b.geo;
                    step_n += 1;
                    degenerate += usize::from(loss.degenerate);
                } else {
                    in_epoch[i] = Some(loss.decoded);
                }
                grads.push(loss.grad.flat_values().map(|g| g * inv).collect::<Vec<f64>>());
            }
            lr_factor = cfg.schedule.lr_factor(step, epoch);
            model.step(batch, &grads, cfg.schedule.base_lr * lr_factor)?;
            step += 1;
            if step_n > 0 {
                geo_curve.push((step, step_geo / step_n as f64));
            }
        }

        let model_ref = &model;
        let decoded: Vec<Result<LandmarkSet>> = map_in_order(&workers, val.len(), |j| {
            let s = &samples[val[j]];
            let d = match in_epoch[val[j]] {
                Some(d) => d,
                None => decode_soft_argmax(&model_ref.logits(val[j], size)?, cfg.temperature)?,
            };
            Ok(d.map(|q| s.frame.to_image(q)))
        });
        let (mut res_sum, mut res_n, mut err_sum) = (0.0, 0usize, 0.0);
        for (&i, d) in val.iter().zip(decoded) {
            let d = match d {
                Ok(d) => d,
                Err(Error::Input(_)) => {
                    return Err(Error::Divergence {
                        epoch,
                        last_finite_epoch: last_finite,
                    })
                }
                Err(e) => return Err(e),
            };
            match geometric_loss(&d, &residual_schema) {
                Ok(v) => {
                    res_sum += v.total;
                    res_n += 1;
                }
                Err(Error::Degenerate { .. }) => {}
                Err(e) => return Err(e),
            }
            err_sum += d.0.iter().zip(samples[i].reference.0.iter()).map(|(a, b)| a.distance(*b)).sum::<f64>();
        }
        let nt = n_train.max(1) as f64;
        let log = EpochLog {
            epoch,
            step,
            lr_factor,
            loss_total: sum_total / nt,
            loss_mse: sum_mse / nt,
            loss_geo: sum_geo / nt,
            geo_residual_val: if res_n == 0 { f64::NAN } else { res_sum / res_n as f64 },
            mre_val_px: err_sum / (val.len() * NUM_LANDMARKS) as f64,
            degenerate_count: degenerate,
        };
        if !(log.loss_total.is_finite() && log.mre_val_px.is_finite()) {
            return Err(Error::Divergence {
                epoch,
                last_finite_epoch: last_finite,
            });
        }
        last_finite = Some(epoch);
        epochs.push(log);
    }

    let model_ref = &model;
    let predictions = map_in_order(&workers, samples.len(), |i| {
        let s = &samples[i];
        let d = decode_soft_argmax(&model_ref.logits(i, size)?, cfg.temperature)?;
        Ok(AnnotationRecord {
            landmarks: d.map(|q| s.frame.to_image(q)),
            ..s.record.clone()
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let param_count = model.param_count();
    Ok(TrainReport {
        header: header(cfg, data, param_count),
        epochs,
        geo_curve,
        predictions,
        param_count,
    })
}

fn header(cfg: &TrainConfig, data: &TrainData, count: Option<ParamCount>) -> Vec<(String, String)> {
    let s = &cfg.schedule;
    let milestones: Vec<String> = s.milestones.iter().map(|m| m.to_string()).collect();
    let mut h: Vec<(&str, String)> = vec![
        ("mode", cfg.mode.name().into()),
        ("lambda", fmt_f64(cfg.lambda)),
        ("temperature", fmt_f64(cfg.temperature)),
        ("sigma", fmt_f64(cfg.sigma)),
        ("loss_mode", cfg.loss_mode.name().into()),
        ("epochs", cfg.epochs.to_string()),
        ("batch", cfg.batch.map_or("all".into(), |b| b.to_string())),
        ("seed", cfg.seed.to_string()),
        ("heatmap_size", cfg.heatmap_size.to_string()),
        ("crop_margin", fmt_f64(cfg.crop_margin)),
        ("base_lr", fmt_f64(s.base_lr)),
        ("warmup_steps", s.warmup_steps.to_string()),
        ("warmup_start_factor", fmt_f64(s.warmup_start_factor)),
        ("milestones", milestones.join(";")),
        ("gamma", fmt_f64(s.gamma)),
        ("lambda_start_epoch", cfg.lambda_start_epoch.to_string()),
        ("lambda_ramp_epochs", cfg.lambda_ramp_epochs.to_string()),
        ("weight_decay", fmt_f64(cfg.weight_decay)),
        ("beta1", fmt_f64(ADAM_BETA1)),
        ("beta2", fmt_f64(ADAM_BETA2)),
        ("eps", fmt_f64(ADAM_EPS)),
        ("n_train", data.train.len().to_string()),
        ("n_val", data.val.len().to_string()),
        ("val_reference", if data.val_reference.is_some() { "provided" } else { "annotations" }.into()),
    ];
    if let Some(c) = count {
        h.extend([
            ("lora_rank", cfg.lora.rank.to_string()),
            ("lora_alpha", fmt_f64(cfg.lora.alpha)),
            ("feature_dim", cfg.lora.feature_dim.to_string()),
            ("trainable_params", c.trainable.to_string()),
            ("total_params", c.total.to_string()),
            ("reduction_percent", format!("{:.2}", c.reduction_percent)),
            ("reference_scale", REFERENCE_SCALE_LINE.into()),
        ]);
    }
    h.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, SynthConfig};

    fn tiny(noise: f64) -> (TrainData, Vec<AnnotationRecord>) {
        let d = generate_dataset(&SynthConfig {
            n_images: 6,
            split: [3, 3, 0],
            seed: 3,
            noise_sigma: noise,
            ..SynthConfig::default()
        })
        .unwrap();
        let train = d.split("train").unwrap().noisy.clone();
        let val = d.split("val").unwrap();
        (
            TrainData {
                train,
                val: val.noisy.clone(),
                val_reference: Some(val.clean.clone()),
            },
            val.clean.clone(),
        )
    }

    fn fast(cfg: TrainConfig) -> TrainConfig {
        TrainConfig {
            epochs: 5,
            heatmap_size: 16,
            schedule: LrSchedule {
                base_lr: 0.05,
                warmup_steps: 2,
                ..LrSchedule::default()
            },
            ..cfg
        }
    }

    #[test]
    fn lambda_ramp() {
        let cfg = TrainConfig {
            lambda: 1.0,
            lambda_start_epoch: 2,
            lambda_ramp_epochs: 3,
            ..TrainConfig::default()
        };
        let w: Vec<f64> = (0..7).map(|e| cfg.lambda_at(e)).collect();
        assert_eq!(w, vec![0.0, 0.0, 0.25, 0.5, 0.75, 1.0, 1.0]);
        assert_eq!(TrainConfig::default().lambda_at(0), DEFAULT_LAMBDA);
    }

    #[test]
    fn crop_frame_round_trip() {
        let (data, _) = tiny(0.0);
        let set = data.train[0].landmarks;
        let f = CropFrame::around(&set, 64, 0.15);
        for p in set.0 {
            let q = f.to_heatmap(p);
            assert!(q.x > 0.0 && q.y > 0.0 && q.x < 63.0 && q.y < 63.0);
            assert!(f.to_image(q).distance(p) < 1e-9);
        }
    }

    #[test]
    fn config_validation() {
        let (data, _) = tiny(0.0);
        for bad in [
            TrainConfig { lambda: -1.0, ..TrainConfig::default() },
            TrainConfig { temperature: 0.0, ..TrainConfig::default() },
            TrainConfig { epochs: 0, ..TrainConfig::default() },
            TrainConfig { batch: Some(0), ..TrainConfig::default() },
            TrainConfig { heatmap_size: 1, ..TrainConfig::default() },
        ] {
            assert!(matches!(train(&data, &bad), Err(Error::Parameter(_))));
        }
        let empty = TrainData { val: vec![], ..data };
        assert!(train(&empty, &fast(TrainConfig::default())).is_err());
        assert!("nope".parse::<TrainMode>().is_err());
    }

    #[test]
    fn report_is_deterministic_and_thread_independent() {
        let (data, _) = tiny(1.0);
        let cfg = fast(TrainConfig {
            lambda: 0.01,
            seed: 9,
            batch: Some(2),
            ..TrainConfig::default()
        });
        let a = train(&data, &cfg).unwrap();
        let b = train(&data, &cfg).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(a.predictions, b.predictions);
        let c = train(&data, &TrainConfig { threads: 3, ..cfg }).unwrap();
        assert_eq!(a.to_csv(), c.to_csv());
        // 6 fitted images in batches of 2
        assert_eq!(a.final_epoch().step, 15);
        assert_eq!(a.predictions.len(), 6);
    }

    #[test]
    fn header_echoes_defaults() {
        let (data, _) = tiny(0.0);
        let r = train(&data, &fast(TrainConfig::default())).unwrap();
        let csv = r.to_csv();
        assert!(csv.contains("# lambda=0.00001\n"));
        assert!(csv.contains("# temperature=0.1\n"));
        assert!(csv.contains(&format!("\n{}\n", REPORT_COLUMNS.join(","))));
        assert_eq!(r.epochs.len(), 5);
        assert!(r.param_count.is_none());
    }

    #[test]
    fn lora_mode_runs_and_accounts_parameters() {
        let (data, _) = tiny(0.0);
        let cfg = fast(TrainConfig {
            mode: TrainMode::LoraLinear,
            ..TrainConfig::default()
        });
        let r = train(&data, &cfg).unwrap();
        let c = r.param_count.unwrap();
        let d_out = 16 * 16 * 16;
        assert_eq!(c.trainable, 4 * (32 + d_out) + d_out);
        assert_eq!(c.total, 32 * d_out + d_out);
        let csv = r.to_csv();
        assert!(csv.contains("# reference_scale=trainable 24M of 330M (92.73% reduction)\n"));
        assert_eq!(r.final_epoch().step, 5);
    }

    #[test]
    fn divergence_is_reported() {
        let (data, _) = tiny(0.0);
        let mut cfg = fast(TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        });
        cfg.schedule = LrSchedule {
            base_lr: 1e308,
            warmup_steps: 0,
            ..LrSchedule::default()
        };
        match train(&data, &cfg) {
            Err(Error::Divergence { epoch, last_finite_epoch }) => {
                assert!(epoch >= 1);
                assert_eq!(last_finite_epoch, Some(epoch - 1));
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
