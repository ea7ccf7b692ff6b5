//! Subcommand implementations.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{bail, ensure, Context, Result};
use bevlocate::dataset::{
    read_poses, select_window, synth_world, LabelSpec, OracleNoise, Sequence, SynthConfig, SynthWorld, WindowConfig,
};
use bevlocate::encoder::WindowFrame;
use bevlocate::evaluation::{align, ape_series, summarize, EvalReport};
use bevlocate::geometry::{CameraModel, Pose2};
use bevlocate::gradcheck::run_suite;
use bevlocate::imaging::{GrayImage, RgbImage};
use bevlocate::mapstore::{load_map, GeoRaster, LABEL_PX};
use bevlocate::model::{Model, ModelConfig};
use bevlocate::nncore::BnMode;
use bevlocate::registration::{
    inscribed_square, localize as register, ncc_map_fast, read_predictions, write_predictions, LocalizeOptions,
    NccPath, PredictionRow,
};
use bevlocate::training::{write_loss_csv, Example, Optimizer, TrainConfig, Trainer};
use clap::{Args, ValueEnum};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::manifest::RunManifest;
use crate::VerificationFailed;

/// Caps worker threads for every parallel command.
pub const THREADS_ENV: &str = "BEVLOCATE_THREADS";

fn thread_pool(jobs: Option<usize>) -> Result<rayon::ThreadPool> {
    let cap = match std::env::var(THREADS_ENV) {
        Ok(v) => Some(
            v.parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .with_context(|| format!("{THREADS_ENV}={v} is not a positive integer"))?,
        ),
        Err(_) => None,
    };
    let want = jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let n = cap.map_or(want, |c| want.min(c)).max(1);
    Ok(rayon::ThreadPoolBuilder::new().num_threads(n).build()?)
}

#[derive(Args, Serialize)]
pub struct WindowArgs {
    /// Seconds of history a window may draw from.
    #[arg(long, default_value_t = 5.0)]
    window_s: f64,
    /// Past frames per window (the current frame is added).
    #[arg(long, default_value_t = 5)]
    past_frames: usize,
}

impl WindowArgs {
    fn config(&self) -> WindowConfig {
        WindowConfig {
            span_s: self.window_s,
            past_frames: self.past_frames,
        }
    }
}

#[derive(Args, Serialize)]
pub struct SynthArgs {
    /// Output directory for the map and sequence.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Side of the square world, meters.
    #[arg(long, default_value_t = 600.0)]
    size_m: f64,
    #[arg(long, default_value_t = 0.229)]
    m_per_px: f64,
    /// Coarsest texture wavelength, meters.
    #[arg(long, default_value_t = 16.0)]
    texture_m: f64,
    /// Minimum distance of the trajectory from the map border, meters.
    #[arg(long, default_value_t = 100.0)]
    margin_m: f64,
    #[arg(long, default_value_t = 100)]
    frames: usize,
    /// Seconds between frames.
    #[arg(long, default_value_t = 0.5)]
    dt: f64,
    /// Meters per second.
    #[arg(long, default_value_t = 8.0)]
    speed: f64,
    /// Side of the square camera images.
    #[arg(long, default_value_t = 224)]
    image_px: usize,
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let mut man = RunManifest::new("synth", &a, Some(a.seed))?;
    let cfg = SynthConfig {
        seed: a.seed,
        size_m: a.size_m,
        m_per_px: a.m_per_px,
        texture_scale: a.texture_m,
        margin_m: a.margin_m,
        frames: a.frames,
        dt: a.dt,
        speed: a.speed,
        ..SynthConfig::default()
    };
    let world = man.time("world", || synth_world(&cfg))?;
    let cams = CameraModel::trinocular_rig(a.image_px, a.image_px);
    let seq = man.time("sequence", || world.write_sequence(&a.out, cams))?;
    for f in ["map.png", "map.json", "poses.csv", "calib.json"] {
        man.output(f);
    }
    man.output(format!("frames/ ({} images)", 3 * seq.len()));
    man.write(&a.out)?;
    println!(
        "wrote {}x{} px map and {} frames to {}",
        world.map.rows(),
        world.map.cols(),
        seq.len(),
        a.out.display()
    );
    Ok(())
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelSize {
    /// The reference widths (d = 64, 28×28 grid, 224 px output).
    Full,
    /// Small widths for desk-scale runs (d = 8, 8×8 grid, 64 px output).
    Miniature,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerArg {
    Sgd,
    Adam,
}

#[derive(Args, Serialize)]
pub struct TrainArgs {
    /// Sequence directory (poses.csv, calib.json, frames/).
    #[arg(long)]
    data: PathBuf,
    /// Map raster; defaults to `<data>/map.png`.
    #[arg(long)]
    map: Option<PathBuf>,
    /// Map sidecar; defaults to `<data>/map.json`.
    #[arg(long)]
    meta: Option<PathBuf>,
    /// Output directory for weights, loss.csv and the run manifest.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = ModelSize::Miniature)]
    model: ModelSize,
    /// Resume from these weights instead of a fresh initialization.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    /// Defaults to 4e-5 for SGD and 5e-3 for Adam.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Sgd)]
    optimizer: OptimizerArg,
    #[arg(long, default_value_t = 1)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Train repeatedly on this single frame instead of the whole sequence.
    #[arg(long)]
    overfit_index: Option<usize>,
    /// Steps for `--overfit-index`.
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[command(flatten)]
    window: WindowArgs,
}

fn model_config(size: ModelSize, cams: &[CameraModel; 3]) -> Result<ModelConfig> {
    let mut cfg = match size {
        ModelSize::Full => ModelConfig::default(),
        ModelSize::Miniature => ModelConfig::miniature(),
    };
    ensure!(
        cams.iter()
            .all(|c| c.image_h == cams[0].image_h && c.image_w == cams[0].image_w),
        "all views must share one image size"
    );
    cfg.encoder.image_h = cams[0].image_h;
    cfg.encoder.image_w = cams[0].image_w;
    cfg.validate()?;
    Ok(cfg)
}

fn map_paths(data: &Path, map: &Option<PathBuf>, meta: &Option<PathBuf>) -> (PathBuf, PathBuf) {
    (
        map.clone().unwrap_or_else(|| data.join("map.png")),
        meta.clone().unwrap_or_else(|| data.join("map.json")),
    )
}

fn window_frames(seq: &Sequence, indices: &[usize]) -> Result<Vec<WindowFrame<f32>>> {
    indices
        .iter()
        .map(|&i| {
            Ok(WindowFrame {
                images: seq.load_images(i)?,
                pose: seq.frames[i].pose,
                timestamp: seq.frames[i].timestamp,
            })
        })
        .collect()
}

fn example(
    seq: &Sequence,
    map: &GeoRaster,
    label: &LabelSpec,
    win: &WindowConfig,
    index: usize,
    seed: u64,
) -> Result<Example> {
    let indices = select_window(seq, index, win, seed)?;
    Ok(Example {
        frames: window_frames(seq, &indices)?,
        label: label.render(map, &seq.frames[index].pose).to_tensor(),
    })
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut man = RunManifest::new("train", &a, Some(a.seed))?;
    let seq = Sequence::load(&a.data)?;
    ensure!(!seq.is_empty(), "sequence {} has no frames", a.data.display());
    let (map_path, meta_path) = map_paths(&a.data, &a.map, &a.meta);
    let map = load_map(&map_path, &meta_path)?;
    let mut model = match &a.weights {
        Some(w) => {
            let m = Model::load(w)?;
            ensure!(
                (m.cfg.encoder.image_h, m.cfg.encoder.image_w) == (seq.cameras[0].image_h, seq.cameras[0].image_w),
                "weights expect {}x{} images, sequence has {}x{}",
                m.cfg.encoder.image_h,
                m.cfg.encoder.image_w,
                seq.cameras[0].image_h,
                seq.cameras[0].image_w
            );
            m
        }
        None => Model::new(model_config(a.model, &seq.cameras)?, a.seed)?,
    };
    let views = model.view_geometry(&seq.cameras)?;
    let label = LabelSpec::for_render_size(model.cfg.render_size());
    let win = a.window.config();
    let optimizer = match a.optimizer {
        OptimizerArg::Sgd => Optimizer::Sgd,
        OptimizerArg::Adam => Optimizer::Adam,
    };
    let base = match optimizer {
        Optimizer::Sgd => TrainConfig::default(),
        Optimizer::Adam => TrainConfig::overfit(),
    };
    let cfg = TrainConfig {
        lr: a.lr.unwrap_or(base.lr),
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: a.seed,
        optimizer,
        ..base
    };
    let mut trainer = Trainer::new(cfg)?;
    let count = model.param_count();
    log::info!(
        "parameters: encoder {}, renderer {}, total {}",
        count.encoder,
        count.renderer,
        count.total
    );

    let t = Instant::now();
    let mut losses = Vec::new();
    if let Some(idx) = a.overfit_index {
        let ex = example(&seq, &map, &label, &win, idx, a.seed)?;
        for step in 0..a.steps {
            let l = trainer.train_step(&mut model, &views, std::slice::from_ref(&ex))?;
            log::info!("step {step} loss {l:.6}");
            losses.push(l);
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
        let mut order: Vec<usize> = (0..seq.len()).collect();
        for epoch in 0..a.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(a.batch_size) {
                let batch = chunk
                    .iter()
                    .map(|&i| example(&seq, &map, &label, &win, i, a.seed ^ epoch as u64))
                    .collect::<Result<Vec<_>>>()?;
                let l = trainer.train_step(&mut model, &views, &batch)?;
                log::info!("epoch {epoch} step {} loss {l:.6}", losses.len());
                losses.push(l);
            }
        }
    }
    man.timings.insert("train".into(), t.elapsed().as_secs_f64());

    std::fs::create_dir_all(&a.out)?;
    model.save(a.out.join("weights.brw"))?;
    write_loss_csv(a.out.join("loss.csv"), &losses)?;
    for f in ["weights.brw", "weights.brw.json", "loss.csv"] {
        man.output(f);
    }
    man.write(&a.out)?;
    match (losses.first(), losses.last()) {
        (Some(first), Some(last)) => println!("{} steps, loss {first:.6} -> {last:.6}", losses.len()),
        _ => println!("no steps taken"),
    }
    Ok(())
}

fn load_model_for(weights: &Path, seq: &Sequence) -> Result<Model<f32>> {
    let model = Model::load(weights)?;
    let want = (model.cfg.encoder.image_h, model.cfg.encoder.image_w);
    let have = (seq.cameras[0].image_h, seq.cameras[0].image_w);
    ensure!(want == have, "weights expect {want:?} images, sequence has {have:?}");
    Ok(model)
}

/// Neural BEV of frame `index`, resized to cover [`LABEL_PX`] map pixels.
fn neural_bev(
    model: &Model<f32>,
    views: &[bevlocate::encoder::ViewGeometry],
    seq: &Sequence,
    win: &WindowConfig,
    index: usize,
    seed: u64,
) -> Result<RgbImage> {
    let indices = select_window(seq, index, win, seed)?;
    let frames = window_frames(seq, &indices)?;
    let (img, _) = model.forward(views, &frames, BnMode::Eval)?;
    Ok(RgbImage::from_tensor(&img)?)
}

#[derive(Args, Serialize)]
pub struct RenderArgs {
    /// Weights written by `train`.
    #[arg(long)]
    weights: PathBuf,
    /// Sequence directory.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for `<timestamp>_bev.png` images.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    jobs: Option<usize>,
    #[command(flatten)]
    window: WindowArgs,
}

pub fn render(a: RenderArgs) -> Result<()> {
    let mut man = RunManifest::new("render", &a, Some(a.seed))?;
    let pool = thread_pool(a.jobs)?;
    let seq = Sequence::load(&a.data)?;
    let model = load_model_for(&a.weights, &seq)?;
    let views = model.view_geometry(&seq.cameras)?;
    let win = a.window.config();
    std::fs::create_dir_all(&a.out)?;
    let names: Vec<String> = (0..seq.len())
        .map(|i| format!("{:.3}_bev.png", seq.frames[i].timestamp))
        .collect();
    man.time("render", || {
        pool.install(|| {
            (0..seq.len()).into_par_iter().try_for_each(|i| -> Result<()> {
                neural_bev(&model, &views, &seq, &win, i, a.seed)?.save_png(a.out.join(&names[i]))?;
                Ok(())
            })
        })
    })?;
    for n in names {
        man.output(n);
    }
    man.write(&a.out)?;
    println!("rendered {} frames to {}", seq.len(), a.out.display());
    Ok(())
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PathArg {
    Fast,
    Reference,
}

#[derive(Args, Serialize)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["weights", "oracle"])))]
pub struct LocalizeArgs {
    /// Map raster (PNG).
    #[arg(long)]
    map: PathBuf,
    /// Map sidecar (JSON).
    #[arg(long)]
    meta: PathBuf,
    /// Trained weights used to render BEV images.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Use ground-truth map crops instead of neural renders.
    #[arg(long)]
    oracle: bool,
    /// Sequence directory.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for predictions.csv and the run manifest.
    #[arg(long)]
    out: PathBuf,
    /// Side of the search region, meters.
    #[arg(long, default_value_t = 200.0)]
    search_m: f64,
    /// Match threshold for the printed summary, meters.
    #[arg(long, default_value_t = 10.0)]
    threshold_m: f64,
    /// Worker threads (capped by BEVLOCATE_THREADS).
    #[arg(long)]
    jobs: Option<usize>,
    /// Gaussian noise added to oracle renders.
    #[arg(long, default_value_t = 0.0)]
    noise_sigma: f64,
    /// Radius of the random offset applied to the ground-truth prior, meters.
    #[arg(long, default_value_t = 0.0)]
    prior_noise_m: f64,
    #[arg(long, value_enum, default_value_t = PathArg::Fast)]
    ncc: PathArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    window: WindowArgs,
}

pub fn localize(a: LocalizeArgs) -> Result<()> {
    let mut man = RunManifest::new("localize", &a, Some(a.seed))?;
    let pool = thread_pool(a.jobs)?;
    ensure!(
        a.noise_sigma >= 0.0 && a.prior_noise_m >= 0.0,
        "noise levels must be non-negative"
    );
    let seq = Sequence::load(&a.data)?;
    let map = load_map(&a.map, &a.meta)?;
    let model = a.weights.as_ref().map(|w| load_model_for(w, &seq)).transpose()?;
    let views = model.as_ref().map(|m| m.view_geometry(&seq.cameras)).transpose()?;
    let win = a.window.config();
    let opts = LocalizeOptions {
        extent_m: a.search_m,
        path: match a.ncc {
            PathArg::Fast => NccPath::Fast,
            PathArg::Reference => NccPath::Reference,
        },
    };
    let oracle = SynthWorld {
        map: map.clone(),
        timestamps: Vec::new(),
        trajectory: Vec::new(),
    };
    let noise = OracleNoise {
        sigma: a.noise_sigma,
        brightness: 0.0,
    };
    let t = Instant::now();
    let rows: Vec<PredictionRow> = pool.install(|| {
        (0..seq.len())
            .into_par_iter()
            .map(|i| -> Result<PredictionRow> {
                let f = &seq.frames[i];
                let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
                rng.set_stream(i as u64);
                let bev = match (&model, &views) {
                    (Some(m), Some(v)) => {
                        let img = neural_bev(m, v, &seq, &win, i, a.seed)?;
                        if img.rows == LABEL_PX {
                            img
                        } else {
                            img.resize(LABEL_PX, LABEL_PX)
                        }
                    }
                    _ => oracle.oracle_render(&f.pose, &LabelSpec::default(), &noise, &mut rng),
                };
                let (r, ang) = (
                    a.prior_noise_m * rng.random::<f64>().sqrt(),
                    rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
                );
                let prior = Pose2::new(
                    f.pose.easting + r * ang.sin(),
                    f.pose.northing + r * ang.cos(),
                    f.pose.azimuth,
                );
                let m = register(&bev, &prior, &map, &opts).with_context(|| format!("frame t={}", f.timestamp))?;
                Ok(PredictionRow::from_match(f.timestamp, &m))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let elapsed = t.elapsed().as_secs_f64();
    man.timings.insert("localize".into(), elapsed);
    std::fs::create_dir_all(&a.out)?;
    write_predictions(a.out.join("predictions.csv"), &rows)?;
    man.output("predictions.csv");
    man.write(&a.out)?;

    let preds: Vec<(f64, f64)> = rows.iter().map(|r| (r.pred_easting, r.pred_northing)).collect();
    let gts: Vec<(f64, f64)> = seq.frames.iter().map(|f| (f.pose.easting, f.pose.northing)).collect();
    if !rows.is_empty() {
        let mut report = summarize(&ape_series(&preds, &gts)?, a.threshold_m)?;
        report.seconds_per_frame = Some(elapsed / rows.len() as f64);
        println!("{report}");
    }
    Ok(())
}

#[derive(Args, Serialize)]
pub struct EvalArgs {
    /// Predictions CSV written by `localize`.
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth poses.csv.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, default_value_t = 10.0)]
    threshold_m: f64,
    /// Directory for report.json and the run manifest.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seconds per frame to record in the report.
    #[arg(long)]
    seconds_per_frame: Option<f64>,
}

pub fn eval(a: EvalArgs, verbose: bool) -> Result<()> {
    let preds = read_predictions(&a.pred)?;
    let gts = read_poses(&a.gt)?;
    ensure!(!preds.is_empty(), "{} has no predictions", a.pred.display());
    let (p, g) = align(&preds, &gts)?;
    let mut report: EvalReport = summarize(&ape_series(&p, &g)?, a.threshold_m)?;
    report.seconds_per_frame = a.seconds_per_frame;
    println!("{report}");
    if verbose {
        let invalid = preds.iter().filter(|r| r.valid_flag == 0).count();
        println!("{invalid} of {} peaks on the search border", preds.len());
    }
    if let Some(out) = &a.out {
        let mut man = RunManifest::new("eval", &a, None)?;
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
        man.output("report.json");
        man.write(out)?;
    }
    Ok(())
}

#[derive(Args, Serialize)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for gradcheck.json and the run manifest.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let mut man = RunManifest::new("gradcheck", &a, Some(a.seed))?;
    let results = man.time("suite", || run_suite(a.seed))?;
    println!(
        "{:<24} {:>7} {:>12} {:>10}  result",
        "check", "probes", "max rel err", "tolerance"
    );
    for r in &results {
        println!(
            "{:<24} {:>7} {:>12.3e} {:>10.0e}  {}",
            r.name,
            r.probes,
            r.max_rel_err,
            r.tolerance,
            if r.passed { "pass" } else { "FAIL" }
        );
    }
    if let Some(out) = &a.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("gradcheck.json"), serde_json::to_string_pretty(&results)?)?;
        man.output("gradcheck.json");
        man.write(out)?;
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if !failed.is_empty() {
        return Err(VerificationFailed(format!("gradient checks failed: {}", failed.join(", "))).into());
    }
    Ok(())
}

#[derive(Args, Serialize)]
pub struct BenchArgs {
    /// Search region sides to time, pixels.
    #[arg(long, value_delimiter = ',', default_values_t = [437, 874])]
    region_px: Vec<usize>,
    /// Side of the (unrotated) BEV image; the template is its inscribed square.
    #[arg(long, default_value_t = LABEL_PX)]
    bev_px: usize,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for bench.json and the run manifest.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct BenchRow {
    region_px: usize,
    template_px: usize,
    median_ms: f64,
    min_ms: f64,
}

pub fn bench(a: BenchArgs) -> Result<()> {
    ensure!(a.reps > 0, "--reps must be at least 1");
    let mut man = RunManifest::new("bench", &a, Some(a.seed))?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let side = inscribed_square(a.bev_px);
    let mut rows = Vec::new();
    println!(
        "{:>10} {:>10} {:>12} {:>10}",
        "region", "template", "median ms", "min ms"
    );
    for &n in &a.region_px {
        if n < side {
            bail!("region {n} px is smaller than the {side} px template");
        }
        let region = GrayImage::new(n, n, (0..n * n).map(|_| rng.random()).collect())?;
        let template = region.crop((n - side) / 2, (n - side) / 2, side, side)?;
        ncc_map_fast(&template, None, &region)?;
        let mut times: Vec<Duration> = (0..a.reps)
            .map(|_| {
                let t = Instant::now();
                std::hint::black_box(ncc_map_fast(&template, None, &region)).map(|_| t.elapsed())
            })
            .collect::<bevlocate::Result<_>>()?;
        times.sort();
        let row = BenchRow {
            region_px: n,
            template_px: side,
            median_ms: times[times.len() / 2].as_secs_f64() * 1e3,
            min_ms: times[0].as_secs_f64() * 1e3,
        };
        println!(
            "{:>10} {:>10} {:>12.2} {:>10.2}",
            row.region_px, row.template_px, row.median_ms, row.min_ms
        );
        rows.push(row);
    }
    if let Some(out) = &a.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("bench.json"), serde_json::to_string_pretty(&rows)?)?;
        man.output("bench.json");
        man.write(out)?;
    }
    Ok(())
}
