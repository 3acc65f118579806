use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::parser::ValueSource;
use clap::ArgMatches;
use serde::Deserialize;
use serde_json::json;

use geolandmark::dataset::{parse_dataset, write_records, ParseMode};
use geolandmark::ghmp::{read_ghmp, write_ghmp};
use geolandmark::gradcheck::{gradcheck, GradcheckConfig};
use geolandmark::heatmap::{decode_argmax, decode_soft_argmax, encode_gaussian, HeatmapStack, Role};
use geolandmark::metrics::{evaluate_corpus, SpacingSource};
use geolandmark::optim::LrSchedule;
use geolandmark::report::{merge_reports, parse_train_report, summarize_reports};
use geolandmark::synth::{generate_dataset, SynthConfig};
use geolandmark::train::{train, LoraSettings, TrainConfig, TrainData, TrainMode};
use geolandmark::{AnnotationRecord, LossMode, Point, NUM_LANDMARKS};

use crate::args::*;
use crate::manifest::{self, Manifest};
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

pub fn run(cli: Cli, matches: &ArgMatches) -> Result<()> {
    if cli.threads == 0 {
        return Err(CliError::Invalid("--threads must be at least 1".into()));
    }
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Encode(a) => encode(a),
        Command::Decode(a) => decode(a),
        Command::Eval(a) => eval(a),
        Command::Train(a) => {
            let sub = matches.subcommand_matches("train").expect("train subcommand matched");
            train_cmd(a, sub, cli.threads)
        }
        Command::Gradcheck(a) => gradcheck_cmd(a, cli.threads),
        Command::Report(a) => report(a),
    }
}

fn parse_list<T: FromStr>(s: &str, flag: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<T>()
                .map_err(|_| CliError::Invalid(format!("--{flag}: cannot parse {p:?}")))
        })
        .collect()
}

fn load_records(path: &Path, mode: ParseMode, m: &mut Manifest) -> Result<Vec<AnnotationRecord>> {
    let bytes = manifest::read(path)?;
    m.input(path, &bytes);
    parse_dataset(&bytes, mode).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))
}

fn loss_mode(a: LossModeArg) -> LossMode {
    match a {
        LossModeArg::PaperLiteral => LossMode::PaperLiteral,
        LossModeArg::Absolute => LossMode::Absolute,
        LossModeArg::Squared => LossMode::Squared,
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let split: Vec<usize> = parse_list(&a.split, "split")?;
    let split: [usize; 3] = split
        .try_into()
        .map_err(|_| CliError::Invalid("--split needs three counts: train,val,test".into()))?;
    let cfg = SynthConfig {
        n_images: a.n,
        split,
        seed: a.seed,
        noise_sigma: a.noise_sigma,
        width: a.width,
        height: a.height,
        spacing_mm_per_px: a.spacing,
        ..SynthConfig::default()
    };
    let data = generate_dataset(&cfg)?;
    let mut m = Manifest::new(
        "synth",
        Some(a.seed),
        json!({
            "n": a.n,
            "split": split,
            "noise_sigma": a.noise_sigma,
            "width": a.width,
            "height": a.height,
            "spacing_mm_per_px": a.spacing,
            "ranges": cfg.ranges,
        }),
    );
    for (name, text) in data.files() {
        m.output(&a.out.join(&name), text.as_bytes())?;
        println!("{}", a.out.join(name).display());
    }
    m.finish(&manifest::for_dir(&a.out))?;
    Ok(())
}

/// Pixel-centre preserving resampling between grids of `from` and `to`
/// pixels.
fn rescale(v: f64, from: usize, to: usize) -> f64 {
    (v + 0.5) * to as f64 / from as f64 - 0.5
}

fn encode(a: EncodeArgs) -> Result<()> {
    let mut m = Manifest::new("encode", None, json!({}));
    let records = load_records(&a.annotations, ParseMode::Annotations, &mut m)?;
    if records.is_empty() {
        return Err(CliError::Invalid("annotation file has no records".into()));
    }
    let mut channels = Vec::with_capacity(records.len() * NUM_LANDMARKS);
    let mut dims = None;
    for r in &records {
        let (iw, ih) = (r.width as usize, r.height as usize);
        let w = a.width.unwrap_or(iw);
        let h = a.height.unwrap_or(ih);
        if *dims.get_or_insert((w, h)) != (w, h) {
            return Err(CliError::Invalid(
                "records have different image sizes; pass --width and --height".into(),
            ));
        }
        let coords = r.landmarks.map(|p| Point::new(rescale(p.x, iw, w), rescale(p.y, ih, h)));
        channels.extend(encode_gaussian(&coords, w, h, a.sigma)?.into_channels());
    }
    let (w, h) = dims.expect("at least one record");
    let stack = HeatmapStack::new(Role::Target, channels)?;
    m = Manifest::new(
        "encode",
        None,
        json!({
            "width": w,
            "height": h,
            "sigma": a.sigma,
            "records": records.iter().map(|r| r.image_id.as_str()).collect::<Vec<_>>(),
        }),
    )
    .with_inputs_from(m);
    m.output(&a.out, &write_ghmp(&stack))?;
    m.finish(&manifest::for_file(&a.out))?;
    Ok(())
}

fn decode(a: DecodeArgs) -> Result<()> {
    let mut m = Manifest::new(
        "decode",
        None,
        json!({
            "mode": format!("{:?}", a.mode).to_lowercase(),
            "temperature": a.temperature,
        }),
    );
    let bytes = manifest::read(&a.heatmaps)?;
    m.input(&a.heatmaps, &bytes);
    let stack = read_ghmp(&bytes).map_err(|e| CliError::Invalid(format!("{}: {e}", a.heatmaps.display())))?;
    if stack.num_channels() % NUM_LANDMARKS != 0 {
        return Err(CliError::Invalid(format!(
            "{} channels is not a multiple of {NUM_LANDMARKS}",
            stack.num_channels()
        )));
    }
    let (w, h) = (stack.width(), stack.height());
    let groups = stack.num_channels() / NUM_LANDMARKS;
    let like = match &a.like {
        Some(p) => {
            let r = load_records(p, ParseMode::Predictions, &mut m)?;
            if r.len() != groups {
                return Err(CliError::Invalid(format!(
                    "{} holds {} records but the heatmaps hold {groups}",
                    p.display(),
                    r.len()
                )));
            }
            Some(r)
        }
        None => None,
    };
    let role = stack.role();
    let mut channels = stack.into_channels();
    let mut out = Vec::with_capacity(groups);
    for k in 0..groups {
        let rest = channels.split_off(NUM_LANDMARKS);
        let group = HeatmapStack::new(role, std::mem::replace(&mut channels, rest))?;
        let points = match a.mode {
            DecodeMode::Argmax => decode_argmax(&group)?,
            DecodeMode::Softargmax => decode_soft_argmax(&group, a.temperature)?,
        };
        out.push(match &like {
            Some(l) => {
                let r = &l[k];
                let (iw, ih) = (r.width as usize, r.height as usize);
                AnnotationRecord {
                    landmarks: points.map(|q| Point::new(rescale(q.x, w, iw), rescale(q.y, h, ih))),
                    ..r.clone()
                }
            }
            None => AnnotationRecord {
                image_id: format!("heatmap_{k:04}"),
                width: w as u32,
                height: h as u32,
                spacing_mm_per_px: 1.0,
                landmarks: points,
            },
        });
    }
    m.output(&a.out, write_records(&out).as_bytes())?;
    m.finish(&manifest::for_file(&a.out))?;
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let thresholds: Vec<f64> = parse_list(&a.thresholds, "thresholds")?;
    let spacing = match a.spacing {
        Some(s) => SpacingSource::Fixed(s),
        None => SpacingSource::FromGroundTruth,
    };
    let mut m = Manifest::new(
        "eval",
        None,
        json!({
            "thresholds_mm": thresholds,
            "spacing": a.spacing.map_or(json!("from_gt"), |s| json!(s)),
        }),
    );
    let preds = load_records(&a.pred, ParseMode::Predictions, &mut m)?;
    let gts = load_records(&a.gt, ParseMode::Annotations, &mut m)?;
    let report = evaluate_corpus(&preds, &gts, &thresholds, spacing)?;
    m.output(&a.out, report.to_csv().as_bytes())?;
    m.finish(&manifest::for_file(&a.out))?;
    println!("{}", report.summary_header());
    println!("{}", report.summary_row());
    Ok(())
}

/// Keys accepted in a `train --config` file.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    train: Option<PathBuf>,
    val: Option<PathBuf>,
    val_reference: Option<PathBuf>,
    mode: Option<String>,
    lambda: Option<f64>,
    temperature: Option<f64>,
    loss_mode: Option<String>,
    epochs: Option<usize>,
    batch: Option<usize>,
    seed: Option<u64>,
    sigma: Option<f64>,
    heatmap_size: Option<usize>,
    crop_margin: Option<f64>,
    lr: Option<f64>,
    warmup_steps: Option<usize>,
    warmup_start_factor: Option<f64>,
    milestones: Option<Vec<usize>>,
    gamma: Option<f64>,
    weight_decay: Option<f64>,
    lambda_start_epoch: Option<usize>,
    lambda_ramp_epochs: Option<usize>,
    lora_rank: Option<usize>,
    lora_alpha: Option<f64>,
    feature_dim: Option<usize>,
}

fn train_cmd(a: TrainArgs, matches: &ArgMatches, threads: usize) -> Result<()> {
    let mut m = Manifest::new("train", None, json!({}));
    let file: TrainFile = match &a.config {
        Some(p) => {
            let bytes = manifest::read(p)?;
            m.input(p, &bytes);
            serde_json::from_slice(&bytes).map_err(|e| CliError::Invalid(format!("{}: {e}", p.display())))?
        }
        None => TrainFile::default(),
    };
    let explicit = |id: &str| matches.value_source(id) == Some(ValueSource::CommandLine);
    macro_rules! pick {
        ($field:ident) => {
            match (&file.$field, explicit(stringify!($field))) {
                (Some(v), false) => v.clone(),
                _ => a.$field.clone(),
            }
        };
    }
    let mode = match (&file.mode, explicit("mode")) {
        (Some(s), false) => TrainMode::from_str(s)?,
        _ => match a.mode {
            ModeArg::FreeLogits => TrainMode::FreeLogits,
            ModeArg::LoraLinear => TrainMode::LoraLinear,
        },
    };
    let loss_mode = match (&file.loss_mode, explicit("loss_mode")) {
        (Some(s), false) => LossMode::from_str(s)?,
        _ => loss_mode(a.loss_mode),
    };
    let milestones = match (&file.milestones, explicit("milestones")) {
        (Some(v), false) => v.clone(),
        _ => parse_list(&a.milestones, "milestones")?,
    };
    let batch: usize = pick!(batch);
    let cfg = TrainConfig {
        mode,
        lambda: pick!(lambda),
        temperature: pick!(temperature),
        sigma: pick!(sigma),
        loss_mode,
        epochs: pick!(epochs),
        batch: (batch > 0).then_some(batch),
        seed: pick!(seed),
        heatmap_size: pick!(heatmap_size),
        crop_margin: pick!(crop_margin),
        schedule: LrSchedule {
            base_lr: pick!(lr),
            warmup_steps: pick!(warmup_steps),
            warmup_start_factor: pick!(warmup_start_factor),
            milestones,
            gamma: pick!(gamma),
        },
        lambda_start_epoch: pick!(lambda_start_epoch),
        lambda_ramp_epochs: pick!(lambda_ramp_epochs),
        weight_decay: pick!(weight_decay),
        threads,
        lora: LoraSettings {
            feature_dim: pick!(feature_dim),
            rank: pick!(lora_rank),
            alpha: pick!(lora_alpha),
            ..LoraSettings::default()
        },
    };
    let path_of = |cli: &Option<PathBuf>, from_file: &Option<PathBuf>, id: &str| match (cli, explicit(id)) {
        (Some(p), true) => Some(p.clone()),
        _ => from_file.clone().or_else(|| cli.clone()),
    };
    let train_path = path_of(&a.train, &file.train, "train").ok_or_else(|| CliError::Invalid("--train is required".into()))?;
    let val_path = path_of(&a.val, &file.val, "val").ok_or_else(|| CliError::Invalid("--val is required".into()))?;
    let ref_path = path_of(&a.val_reference, &file.val_reference, "val_reference");

    let data = TrainData {
        train: load_records(&train_path, ParseMode::Annotations, &mut m)?,
        val: load_records(&val_path, ParseMode::Annotations, &mut m)?,
        val_reference: match &ref_path {
            Some(p) => Some(load_records(p, ParseMode::Annotations, &mut m)?),
            None => None,
        },
    };
    let report = train(&data, &cfg)?;
    let config: serde_json::Map<String, serde_json::Value> =
        report.header.iter().map(|(k, v)| (k.clone(), json!(v))).collect();
    let mut out = Manifest::new("train", Some(cfg.seed), serde_json::Value::Object(config)).with_inputs_from(m);
    out.output(&a.out.join("train_report.csv"), report.to_csv().as_bytes())?;
    out.output(&a.out.join("loss_geo_curve.csv"), report.geo_curve_csv().as_bytes())?;
    out.output(&a.out.join("predictions.json"), write_records(&report.predictions).as_bytes())?;
    out.finish(&manifest::for_dir(&a.out))?;
    let last = report.final_epoch();
    println!(
        "epochs={} loss_total={} geo_residual_val={} mre_val_px={}",
        report.epochs.len(),
        last.loss_total,
        last.geo_residual_val,
        last.mre_val_px
    );
    if let Some(c) = report.param_count {
        println!(
            "trainable {} of {} ({:.2}% reduction)",
            c.trainable, c.total, c.reduction_percent
        );
        println!("reference: {}", geolandmark::lora::REFERENCE_SCALE_LINE);
    }
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs, threads: usize) -> Result<()> {
    let cfg = GradcheckConfig {
        seed: a.seed,
        instances: a.instances,
        lambda: a.lambda,
        temperature: a.temperature,
        loss_mode: loss_mode(a.loss_mode),
        inject_degenerate: a.inject_degenerate,
        threads,
        ..GradcheckConfig::default()
    };
    let report = gradcheck(&cfg)?;
    let mut m = Manifest::new(
        "gradcheck",
        Some(a.seed),
        json!({
            "instances": cfg.instances,
            "width": cfg.width,
            "height": cfg.height,
            "step": cfg.step,
            "temperature": cfg.temperature,
            "lambda": cfg.lambda,
            "loss_mode": cfg.loss_mode.name(),
            "tolerance": cfg.tolerance,
            "inject_degenerate": cfg.inject_degenerate,
        }),
    );
    let csv = report.to_csv();
    m.output(&a.out, csv.as_bytes())?;
    m.finish(&manifest::for_file(&a.out))?;
    print!("{csv}");
    if report.ok() {
        Ok(())
    } else {
        Err(CliError::Invalid("gradient check failed".into()))
    }
}

fn report(a: ReportArgs) -> Result<()> {
    let mut m = Manifest::new("report", None, json!({}));
    let mut runs = Vec::with_capacity(a.runs.len());
    for dir in &a.runs {
        let path = dir.join("train_report.csv");
        let bytes = manifest::read(&path)?;
        m.input(&path, &bytes);
        let text = String::from_utf8(bytes).map_err(|_| CliError::Invalid(format!("{} is not UTF-8", path.display())))?;
        let parsed = parse_train_report(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        runs.push((name, parsed));
    }
    let merged = merge_reports(&runs)?;
    m.output(&a.out, merged.as_bytes())?;
    m.finish(&manifest::for_file(&a.out))?;
    print!("{}", summarize_reports(&runs));
    Ok(())
}
