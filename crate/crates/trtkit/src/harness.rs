//! Training and evaluation harness: dataset generation for the hidden-scene
//! task, an AdamW optimizer, deterministic per-sample training loops for both
//! reconstruction heads, metric reports grouped by photon budget, and a fast
//! finite-difference gradient audit.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ad::{BoundParams, ParameterSet, Tape, Tensor, Var};
use crate::attention::{save_checkpoint, AttnError};
use crate::data::{
    self, crop_to_gt, DataError, DepthMap, DepthUnit, IntensityImage, TransientCube,
};
use crate::los_sim::{
    self, calibrate_sbr, ideal_transient, mix64, poisson_detect, DetectionModel, LosSample,
    SimError,
};
use crate::nlos_sim::{
    gt_views, render_confocal, HiddenScene, NlosError as NlosSimError, ScanGrid, ScenePoint,
};
use crate::pulse::{PulseError, PulseModel};
use crate::trt_los::build_los_model;
use crate::trt_los::{
    cube_tensor, forward_trt_los, los_total_loss, soft_argmax_depth, LosError, LosModelConfig,
};
use crate::trt_nlos::{
    build_nlos_model, forward_trt_nlos, hard_argmax_depth, nlos_losses, NlosError, NlosModelConfig,
};
use crate::SPEED_OF_LIGHT;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    NlosSim(#[from] NlosSimError),
    #[error(transparent)]
    Pulse(#[from] PulseError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Los(#[from] LosError),
    #[error(transparent)]
    Nlos(#[from] NlosError),
    #[error(transparent)]
    Attn(#[from] AttnError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at epoch {epoch}, sample {sample}")]
    NonFinite { epoch: usize, sample: usize },
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl HarnessError {
    /// Process exit code contract: 2 for validation problems, 3 for
    /// numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::NonFinite { .. } | HarnessError::Numerical(_) => 3,
            _ => 2,
        }
    }
}

// ---------------------------------------------------------------------------
// hidden-scene dataset generation

/// Simulation settings for the confocal hidden-scene dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NlosSimConfig {
    pub height: usize,
    pub width: usize,
    pub bins: usize,
    pub bin_width_ps: f64,
    /// Side length of the scanned wall patch in meters.
    pub wall_extent_m: f64,
    pub pulse: PulseModel,
    /// Mean signal photons per scan position.
    pub signal: f64,
    /// Mean background photons per scan position over the full window.
    pub background: f64,
    pub count: usize,
    pub seed: u64,
}

impl Default for NlosSimConfig {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            bins: 64,
            bin_width_ps: 132.0,
            wall_extent_m: 1.0,
            pulse: PulseModel::default(),
            signal: 10.0,
            background: 2.0,
            count: 8,
            seed: 0,
        }
    }
}

impl NlosSimConfig {
    pub fn grid(&self) -> ScanGrid {
        ScanGrid {
            height: self.height,
            width: self.width,
            extent_m: self.wall_extent_m,
            bins: self.bins,
            bin_width_ps: self.bin_width_ps,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NlosSample {
    pub cube_path: PathBuf,
    pub clean_path: PathBuf,
    pub gt_intensity_path: PathBuf,
    pub gt_depth_path: PathBuf,
    /// Validity mask of the ground-truth views (nonzero = valid).
    pub gt_mask_path: PathBuf,
    pub signal: f64,
    pub background: f64,
    pub seed: u64,
}

/// Random hidden scene: a few fronto-parallel square patches sampled as
/// point grids, kept near the wall axis so every scan position sees all
/// returns inside the time window.
pub fn generate_nlos_scene(grid: &ScanGrid, seed: u64) -> HiddenScene {
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed));
    let max_range = grid.max_range_m();
    // worst-case wall offset from a patch point to the far wall corner
    let half = grid.extent_m / 2.0;
    let wall_reach_sq = |x: f64, y: f64| {
        let dx = half + x.abs();
        let dy = half + y.abs();
        dx * dx + dy * dy
    };
    // shrink the lateral spread until the far corner still fits in range
    let budget = (0.9 * max_range).powi(2);
    let mut lateral = 0.25 * grid.extent_m;
    while lateral > 1e-3 * grid.extent_m
        && budget - wall_reach_sq(lateral, lateral) < (0.1 * max_range).powi(2)
    {
        lateral *= 0.5;
    }
    let z_cap = (budget - wall_reach_sq(lateral, lateral)).max(1e-4).sqrt();
    let z_lo = 0.25 * z_cap;
    let mut points = Vec::new();
    let patches = rng.gen_range(2..=3);
    for _ in 0..patches {
        let cx = rng.gen_range(-lateral..lateral);
        let cy = rng.gen_range(-lateral..lateral);
        let cz = rng.gen_range(z_lo..z_cap);
        let size = rng.gen_range(0.1..0.3) * grid.extent_m;
        let albedo = rng.gen_range(0.4..1.0);
        let n = 4usize;
        for i in 0..n {
            for j in 0..n {
                let x = cx + size * (i as f64 / (n - 1) as f64 - 0.5);
                let y = cy + size * (j as f64 / (n - 1) as f64 - 0.5);
                if x.abs() > lateral || y.abs() > lateral {
                    continue;
                }
                points.push(ScenePoint {
                    position: [x, y, cz],
                    albedo,
                    normal: [0.0, 0.0, -1.0],
                });
            }
        }
    }
    HiddenScene::new(points).expect("generated points are valid")
}

/// Simulate `count` hidden scenes to disk: Poisson count cubes, the clean
/// signal-rate cubes the denoiser regresses to, orthographic ground-truth
/// views, and a JSON manifest.
pub fn generate_nlos_dataset(
    dir: &Path,
    cfg: &NlosSimConfig,
) -> Result<Vec<NlosSample>, HarnessError> {
    std::fs::create_dir_all(dir)?;
    let grid = cfg.grid();
    grid.validate()?;
    let kernel = cfg.pulse.combined_kernel(cfg.bin_width_ps)?;
    let mut manifest = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let scene_seed = mix64(cfg.seed.wrapping_add(i as u64 + 1));
        let scene = generate_nlos_scene(&grid, scene_seed);
        let rates = render_confocal(&scene, &grid, &kernel, false)?;
        let det = calibrate_sbr(
            &rates,
            &DetectionModel::uniform(),
            cfg.signal,
            cfg.background,
        )?;
        let counts = poisson_detect(&rates, &det, scene_seed)?;
        // clean regression target: the attenuated signal rates, background-free
        let pixels = grid.height * grid.width;
        let mut clean_vals = rates.values().to_vec();
        for p in 0..pixels {
            let gain = det.cycles as f64 * det.quantum_efficiency * det.attenuation_at(p);
            for v in &mut clean_vals[p * grid.bins..(p + 1) * grid.bins] {
                *v *= gain;
            }
        }
        let clean = TransientCube::new(
            grid.height,
            grid.width,
            grid.bins,
            cfg.bin_width_ps,
            crate::data::CubeKind::Rates,
            clean_vals,
        )?;
        let (gt_i, gt_d) = gt_views(&scene, &grid)?;
        let cube_path = dir.join(format!("nlos_{i:04}.cube"));
        let clean_path = dir.join(format!("nlos_{i:04}_clean.cube"));
        let gt_intensity_path = dir.join(format!("nlos_{i:04}_intensity.png"));
        let gt_depth_path = dir.join(format!("nlos_{i:04}_depth.png"));
        let gt_mask_path = dir.join(format!("nlos_{i:04}_mask.png"));
        counts.save(&cube_path)?;
        clean.save(&clean_path)?;
        data::save_gray16(
            &gt_intensity_path,
            grid.height,
            grid.width,
            &gt_i.values,
            None,
            "albedo",
        )?;
        data::save_gray16(
            &gt_depth_path,
            grid.height,
            grid.width,
            &gt_d.values,
            Some(&gt_d.valid),
            "m",
        )?;
        // grayscale images quantize invalid pixels to the range minimum,
        // so the mask is stored explicitly
        let mask_vals: Vec<f64> = gt_d
            .valid
            .iter()
            .map(|&v| if v { 1.0 } else { 0.0 })
            .collect();
        data::save_gray16(
            &gt_mask_path,
            grid.height,
            grid.width,
            &mask_vals,
            None,
            "mask",
        )?;
        manifest.push(NlosSample {
            cube_path,
            clean_path,
            gt_intensity_path,
            gt_depth_path,
            gt_mask_path,
            signal: cfg.signal,
            background: cfg.background,
            seed: scene_seed,
        });
    }
    let f = std::fs::File::create(dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(f, &manifest)?;
    Ok(manifest)
}

pub fn load_nlos_manifest(path: &Path) -> Result<Vec<NlosSample>, HarnessError> {
    let f = std::fs::File::open(path)?;
    Ok(serde_json::from_reader(f)?)
}

// ---------------------------------------------------------------------------
// optimizer

/// AdamW with decoupled weight decay and bias correction.
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: usize,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update over every parameter that received a gradient.
    pub fn step(&mut self, params: &mut ParameterSet, grads: &BTreeMap<String, Tensor>) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let cur = params.get(name).clone();
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; cur.numel()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; cur.numel()]);
            let mut next = cur.data().to_vec();
            for ((w, &gi), (mi, vi)) in next
                .iter_mut()
                .zip(g.data().iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *w);
            }
            params.set(name, Tensor::from_vec(cur.shape().to_vec(), next));
        }
    }
}

// ---------------------------------------------------------------------------
// training configuration

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Los,
    Nlos,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub task: Task,
    /// Directory holding a dataset manifest (`manifest.json`).
    pub data_dir: PathBuf,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Per-epoch multiplicative learning-rate decay.
    pub lr_decay: f64,
    pub seed: u64,
    /// Cap on samples used per epoch; `None` uses the whole manifest.
    pub limit: Option<usize>,
    pub los: Option<LosModelConfig>,
    pub nlos: Option<NlosModelConfig>,
    /// Checkpoint written after every epoch when set.
    pub ckpt_path: Option<PathBuf>,
}

impl TrainConfig {
    pub fn los_default(data_dir: impl Into<PathBuf>) -> Self {
        Self {
            task: Task::Los,
            data_dir: data_dir.into(),
            epochs: 1,
            lr: 1e-4,
            weight_decay: 0.0,
            lr_decay: 1.0,
            seed: 0,
            limit: None,
            los: Some(LosModelConfig::default()),
            nlos: None,
            ckpt_path: None,
        }
    }

    pub fn nlos_default(data_dir: impl Into<PathBuf>) -> Self {
        Self {
            task: Task::Nlos,
            data_dir: data_dir.into(),
            epochs: 1,
            lr: 1e-4,
            weight_decay: 0.0,
            lr_decay: 0.95,
            seed: 0,
            limit: None,
            los: None,
            nlos: Some(NlosModelConfig::default()),
            ckpt_path: None,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.epochs == 0 || !(self.lr > 0.0) || !(self.lr_decay > 0.0) {
            return Err(HarnessError::InvalidConfig(
                "epochs, lr, and lr_decay must be positive".into(),
            ));
        }
        match self.task {
            Task::Los => {
                let cfg = self.los.as_ref().ok_or_else(|| {
                    HarnessError::InvalidConfig("missing los model config".into())
                })?;
                cfg.validate()?;
            }
            Task::Nlos => {
                let cfg = self.nlos.as_ref().ok_or_else(|| {
                    HarnessError::InvalidConfig("missing nlos model config".into())
                })?;
                cfg.validate()?;
            }
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form with output paths removed, so
    /// two runs writing to different locations share a hash.
    pub fn config_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("ckpt_path");
        }
        let mut hasher = Sha256::new();
        hasher.update(v.to_string().as_bytes());
        hex_string(&hasher.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub task: Task,
    pub config_hash: String,
    pub seed: u64,
    pub samples: usize,
    pub epochs: Vec<EpochStats>,
    pub wall_clock_s: f64,
}

// ---------------------------------------------------------------------------
// loaded training samples

/// One direct-view sample in memory: measured counts and the normalized
/// ground-truth arrival histogram rebuilt from the stored depth image.
pub struct LosTrainSample {
    pub input: Tensor,
    pub target_hist: Tensor,
    pub gt_depth: DepthMap,
    pub signal: f64,
    pub background: f64,
    pub bin_width_ps: f64,
}

/// Rebuild the ideal arrival distribution from a ground-truth depth map:
/// unit albedo through the instrument kernel, then normalized per pixel
/// so it is a probability over bins (albedo-independent supervision).
pub fn target_histogram(
    depth: &DepthMap,
    bins: usize,
    bin_width_ps: f64,
    pulse: &PulseModel,
) -> Result<Tensor, HarnessError> {
    let (h, w) = (depth.height(), depth.width());
    let ones = IntensityImage::new(h, w, vec![1.0; h * w])?;
    let kernel = pulse.combined_kernel(bin_width_ps)?;
    let ideal = ideal_transient(depth, &ones, bins, bin_width_ps, &kernel)?;
    let mut vals = ideal.values().to_vec();
    for p in 0..h * w {
        let hist = &mut vals[p * bins..(p + 1) * bins];
        let sum: f64 = hist.iter().sum();
        if sum > 0.0 {
            for v in hist.iter_mut() {
                *v /= sum;
            }
        } else {
            for v in hist.iter_mut() {
                *v = 1.0 / bins as f64;
            }
        }
    }
    Ok(Tensor::from_vec(vec![h, w, bins], vals))
}

pub fn load_los_samples(
    manifest: &[LosSample],
    pulse: &PulseModel,
) -> Result<Vec<LosTrainSample>, HarnessError> {
    let mut out = Vec::with_capacity(manifest.len());
    for s in manifest {
        let cube = TransientCube::load(&s.cube_path)?;
        let (h, w, vals, sidecar) = {
            let (h, w, v, sc) = data::load_gray16(&s.gt_depth_path)?;
            (h, w, v, sc)
        };
        if sidecar.units != "m" {
            return Err(HarnessError::InvalidConfig(format!(
                "depth image {} stores '{}', expected meters",
                s.gt_depth_path.display(),
                sidecar.units
            )));
        }
        let valid: Vec<bool> = vals.iter().map(|v| v.is_finite()).collect();
        let gt_depth = DepthMap::new(h, w, vals, valid, DepthUnit::Meters)?;
        let target_hist = target_histogram(&gt_depth, cube.bins(), cube.bin_width_ps(), pulse)?;
        out.push(LosTrainSample {
            input: cube_tensor(&cube),
            target_hist,
            gt_depth,
            signal: s.signal,
            background: s.background,
            bin_width_ps: cube.bin_width_ps(),
        });
    }
    Ok(out)
}

/// One hidden-scene sample in memory. The depth target is expressed in
/// downsampled bin units to match the reconstruction volume's axis.
pub struct NlosTrainSample {
    pub input: Tensor,
    pub clean: Tensor,
    pub gt_intensity: Tensor,
    pub gt_depth_bins: Tensor,
    pub gt_mask: Tensor,
    pub gt_depth: DepthMap,
    pub bin_width_ps: f64,
}

pub fn load_nlos_samples(
    manifest: &[NlosSample],
    temporal_down: usize,
) -> Result<Vec<NlosTrainSample>, HarnessError> {
    let mut out = Vec::with_capacity(manifest.len());
    for s in manifest {
        let cube = TransientCube::load(&s.cube_path)?;
        let clean = TransientCube::load(&s.clean_path)?;
        let (h, w, ivals, _) = data::load_gray16(&s.gt_intensity_path)?;
        let (dh, dw, dvals, dsc) = data::load_gray16(&s.gt_depth_path)?;
        let (mh, mw, mvals, _) = data::load_gray16(&s.gt_mask_path)?;
        if dsc.units != "m" || dh != h || dw != w || mh != h || mw != w {
            return Err(HarnessError::InvalidConfig(format!(
                "ground-truth views of {} are inconsistent",
                s.cube_path.display()
            )));
        }
        let bin_m = cube.bin_width_ps() * 1e-12 * SPEED_OF_LIGHT / 2.0;
        let coarse_bin_m = bin_m * temporal_down as f64;
        let mut depth_bins = vec![0.0; h * w];
        let mut mask = vec![0.0; h * w];
        let mut valid = vec![false; h * w];
        let mut depth_m = vec![0.0; h * w];
        for i in 0..h * w {
            if mvals[i] > 0.5 {
                depth_bins[i] = dvals[i] / coarse_bin_m;
                depth_m[i] = dvals[i];
                mask[i] = 1.0;
                valid[i] = true;
            }
        }
        let ivals: Vec<f64> = ivals.iter().map(|v| v.max(0.0)).collect();
        out.push(NlosTrainSample {
            input: cube_tensor(&cube),
            clean: cube_tensor(&clean),
            gt_intensity: Tensor::from_vec(vec![h, w], ivals),
            gt_depth_bins: Tensor::from_vec(vec![h, w], depth_bins),
            gt_mask: Tensor::from_vec(vec![h, w], mask),
            gt_depth: DepthMap::new(h, w, depth_m, valid, DepthUnit::Meters)?,
            bin_width_ps: cube.bin_width_ps(),
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// training loops

const MODEL_PREFIX: &str = "m";

/// Build a fresh parameter set for the configured task.
pub fn build_model(cfg: &TrainConfig) -> Result<ParameterSet, HarnessError> {
    cfg.validate()?;
    let mut ps = ParameterSet::new();
    match cfg.task {
        Task::Los => build_los_model(&mut ps, MODEL_PREFIX, cfg.los.as_ref().unwrap(), cfg.seed),
        Task::Nlos => build_nlos_model(&mut ps, MODEL_PREFIX, cfg.nlos.as_ref().unwrap(), cfg.seed),
    }
    Ok(ps)
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by_key(|&i| mix64(seed ^ mix64(epoch as u64 + 1) ^ (i as u64)));
    idx
}

fn finite_or_err(loss: f64, epoch: usize, sample: usize) -> Result<f64, HarnessError> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(HarnessError::NonFinite { epoch, sample })
    }
}

/// Train the configured head over its manifest; returns the trained
/// parameters and a run report. Fully deterministic for a fixed seed.
pub fn train(cfg: &TrainConfig) -> Result<(ParameterSet, TrainReport), HarnessError> {
    cfg.validate()?;
    let start = Instant::now();
    let mut params = build_model(cfg)?;
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let manifest_path = cfg.data_dir.join("manifest.json");
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let samples;
    match cfg.task {
        Task::Los => {
            let model = cfg.los.as_ref().unwrap();
            let manifest = los_sim::load_manifest(&manifest_path)?;
            let mut data = load_los_samples(&manifest, &PulseModel::default())?;
            if let Some(limit) = cfg.limit {
                data.truncate(limit);
            }
            samples = data.len();
            for epoch in 0..cfg.epochs {
                opt.lr = cfg.lr * cfg.lr_decay.powi(epoch as i32);
                let mut total = 0.0;
                for &i in &epoch_order(data.len(), cfg.seed, epoch) {
                    total += los_step(&mut params, &mut opt, model, &data[i], epoch, i)?;
                }
                let stats = EpochStats {
                    epoch,
                    lr: opt.lr,
                    mean_loss: total / data.len().max(1) as f64,
                };
                if let Some(path) = &cfg.ckpt_path {
                    save_checkpoint(path, cfg, &params)?;
                }
                epochs.push(stats);
            }
        }
        Task::Nlos => {
            let model = cfg.nlos.as_ref().unwrap();
            let manifest = load_nlos_manifest(&manifest_path)?;
            let mut data = load_nlos_samples(&manifest, model.temporal_down)?;
            if let Some(limit) = cfg.limit {
                data.truncate(limit);
            }
            samples = data.len();
            for epoch in 0..cfg.epochs {
                opt.lr = cfg.lr * cfg.lr_decay.powi(epoch as i32);
                let mut total = 0.0;
                for &i in &epoch_order(data.len(), cfg.seed, epoch) {
                    total += nlos_step(&mut params, &mut opt, model, &data[i], epoch, i)?;
                }
                let stats = EpochStats {
                    epoch,
                    lr: opt.lr,
                    mean_loss: total / data.len().max(1) as f64,
                };
                if let Some(path) = &cfg.ckpt_path {
                    save_checkpoint(path, cfg, &params)?;
                }
                epochs.push(stats);
            }
        }
    }
    let report = TrainReport {
        task: cfg.task,
        config_hash: cfg.config_hash(),
        seed: cfg.seed,
        samples,
        epochs,
        wall_clock_s: start.elapsed().as_secs_f64(),
    };
    Ok((params, report))
}

fn los_step(
    params: &mut ParameterSet,
    opt: &mut AdamW,
    model: &LosModelConfig,
    sample: &LosTrainSample,
    epoch: usize,
    index: usize,
) -> Result<f64, HarnessError> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params);
    let input = tape.constant(sample.input.clone());
    let (hist, depth) = forward_trt_los(&mut tape, &bound, MODEL_PREFIX, input, model)?;
    let loss = los_total_loss(&mut tape, hist, &sample.target_hist, depth, model.gamma)?;
    let value = finite_or_err(tape.value(loss).item(), epoch, index)?;
    let grads = tape.backward(loss);
    let grad_map = bound.gradients(&tape, &grads);
    opt.step(params, &grad_map);
    Ok(value)
}

fn nlos_step(
    params: &mut ParameterSet,
    opt: &mut AdamW,
    model: &NlosModelConfig,
    sample: &NlosTrainSample,
    epoch: usize,
    index: usize,
) -> Result<f64, HarnessError> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params);
    let input = tape.constant(sample.input.clone());
    let out = forward_trt_nlos(
        &mut tape,
        &bound,
        MODEL_PREFIX,
        input,
        model,
        sample.bin_width_ps,
    )?;
    let loss = nlos_losses(
        &mut tape,
        out.denoised,
        &sample.clean,
        out.intensity,
        &sample.gt_intensity,
        out.depth,
        &sample.gt_depth_bins,
        Some(&sample.gt_mask),
        model.alpha,
        model.beta,
    )?;
    let value = finite_or_err(tape.value(loss).item(), epoch, index)?;
    let grads = tape.backward(loss);
    let grad_map = bound.gradients(&tape, &grads);
    opt.step(params, &grad_map);
    Ok(value)
}

// ---------------------------------------------------------------------------
// inference helpers

/// Direct-view inference without gradients: predicted histogram tensor
/// plus hard-argmax and soft-argmax depth readouts (meters / bins).
pub struct LosPrediction {
    pub hist: Tensor,
    pub depth_argmax: DepthMap,
    pub depth_soft_bins: Tensor,
}

pub fn infer_los(
    params: &ParameterSet,
    model: &LosModelConfig,
    input: &Tensor,
    bin_width_ps: f64,
) -> Result<LosPrediction, HarnessError> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params);
    let x = tape.constant(input.clone());
    let (hist, depth) = forward_trt_los(&mut tape, &bound, MODEL_PREFIX, x, model)?;
    let hist_t = tape.value(hist).clone();
    let depth_argmax = crate::trt_los::depth_map_from_hist(&hist_t, bin_width_ps);
    Ok(LosPrediction {
        hist: hist_t,
        depth_argmax,
        depth_soft_bins: tape.value(depth).clone(),
    })
}

/// Hidden-scene inference without gradients.
pub struct NlosPrediction {
    pub volume: Tensor,
    pub intensity: IntensityImage,
    /// Hard-argmax depth over the volume, in downsampled bin units.
    pub depth_argmax: DepthMap,
    pub depth_soft_bins: Tensor,
}

pub fn infer_nlos(
    params: &ParameterSet,
    model: &NlosModelConfig,
    input: &Tensor,
    bin_width_ps: f64,
) -> Result<NlosPrediction, HarnessError> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params);
    let x = tape.constant(input.clone());
    let out = forward_trt_nlos(&mut tape, &bound, MODEL_PREFIX, x, model, bin_width_ps)?;
    let volume = tape.value(out.volume).clone();
    let ivals = tape.value(out.intensity).data().to_vec();
    let (h, w) = (volume.shape()[0], volume.shape()[1]);
    let ivals: Vec<f64> = ivals.iter().map(|v| v.max(0.0)).collect();
    Ok(NlosPrediction {
        depth_argmax: hard_argmax_depth(&volume),
        intensity: IntensityImage::new(h, w, ivals)?,
        depth_soft_bins: tape.value(out.depth).clone(),
        volume,
    })
}

// ---------------------------------------------------------------------------
// evaluation

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LosLabelMetrics {
    pub signal: f64,
    pub background: f64,
    pub count: usize,
    pub rmse_m: f64,
    pub mad_m: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LosGroupMetrics {
    pub background: f64,
    pub mean_rmse_m: f64,
    pub mean_mad_m: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LosEvalReport {
    pub labels: Vec<LosLabelMetrics>,
    /// Unweighted averages of the per-label means, grouped by background.
    pub groups: Vec<LosGroupMetrics>,
    pub mean_rmse_m: f64,
    pub mean_mad_m: f64,
    pub wall_clock_s: f64,
}

/// Evaluate a trained direct-view model over a manifest, grouping metrics
/// by photon-budget label.
pub fn evaluate_los(
    params: &ParameterSet,
    model: &LosModelConfig,
    manifest: &[LosSample],
) -> Result<LosEvalReport, HarnessError> {
    let start = Instant::now();
    let data = load_los_samples(manifest, &PulseModel::default())?;
    let mut buckets: BTreeMap<(u64, u64), Vec<(f64, f64)>> = BTreeMap::new();
    for s in &data {
        let pred = infer_los(params, model, &s.input, s.bin_width_ps)?;
        let rmse = data::rmse(&pred.depth_argmax, &s.gt_depth)?;
        let mad = data::mad(&pred.depth_argmax, &s.gt_depth)?;
        buckets
            .entry((s.signal.to_bits(), s.background.to_bits()))
            .or_default()
            .push((rmse, mad));
    }
    let mut labels = Vec::new();
    for (&(sb, bb), list) in &buckets {
        let n = list.len() as f64;
        labels.push(LosLabelMetrics {
            signal: f64::from_bits(sb),
            background: f64::from_bits(bb),
            count: list.len(),
            rmse_m: list.iter().map(|p| p.0).sum::<f64>() / n,
            mad_m: list.iter().map(|p| p.1).sum::<f64>() / n,
        });
    }
    let mut by_bg: BTreeMap<u64, Vec<&LosLabelMetrics>> = BTreeMap::new();
    for l in &labels {
        by_bg.entry(l.background.to_bits()).or_default().push(l);
    }
    let groups = by_bg
        .iter()
        .map(|(&bb, ls)| LosGroupMetrics {
            background: f64::from_bits(bb),
            mean_rmse_m: ls.iter().map(|l| l.rmse_m).sum::<f64>() / ls.len() as f64,
            mean_mad_m: ls.iter().map(|l| l.mad_m).sum::<f64>() / ls.len() as f64,
        })
        .collect();
    let n = labels.len().max(1) as f64;
    Ok(LosEvalReport {
        mean_rmse_m: labels.iter().map(|l| l.rmse_m).sum::<f64>() / n,
        mean_mad_m: labels.iter().map(|l| l.mad_m).sum::<f64>() / n,
        labels,
        groups,
        wall_clock_s: start.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NlosEvalReport {
    pub count: usize,
    /// Depth error in downsampled bin units over the ground-truth mask.
    pub mean_depth_rmse_bins: f64,
    /// Intensity quality on the region cropped to the ground truth.
    pub mean_psnr_db: f64,
    /// Mean structural similarity; absent when every cropped region is
    /// smaller than the similarity window.
    pub mean_ssim: Option<f64>,
    pub wall_clock_s: f64,
}

pub fn evaluate_nlos(
    params: &ParameterSet,
    model: &NlosModelConfig,
    manifest: &[NlosSample],
) -> Result<NlosEvalReport, HarnessError> {
    let start = Instant::now();
    let data = load_nlos_samples(manifest, model.temporal_down)?;
    let (mut rmse_sum, mut psnr_sum, mut ssim_sum) = (0.0, 0.0, 0.0);
    let mut ssim_count = 0usize;
    for s in &data {
        let pred = infer_nlos(params, model, &s.input, s.bin_width_ps)?;
        let (h, w) = (s.gt_depth.height(), s.gt_depth.width());
        let gt_bins = DepthMap::new(
            h,
            w,
            s.gt_depth_bins.data().to_vec(),
            s.gt_depth.valid.clone(),
            DepthUnit::Bins,
        )?;
        rmse_sum += data::rmse(&pred.depth_argmax, &gt_bins)?;
        let gt_i = IntensityImage::new(h, w, s.gt_intensity.data().to_vec())?;
        let peak = gt_i
            .values
            .iter()
            .cloned()
            .fold(f64::MIN, f64::max)
            .max(1e-12);
        let (pc, gc, _) = crop_to_gt(&pred.intensity, &gt_i)?;
        psnr_sum += data::psnr(&pc, &gc, peak)?;
        if pc.height() >= 11 && pc.width() >= 11 {
            ssim_sum += data::ssim(&pc, &gc, peak)?;
            ssim_count += 1;
        }
    }
    let n = data.len().max(1) as f64;
    Ok(NlosEvalReport {
        count: data.len(),
        mean_depth_rmse_bins: rmse_sum / n,
        mean_psnr_db: psnr_sum / n,
        mean_ssim: (ssim_count > 0).then(|| ssim_sum / ssim_count as f64),
        wall_clock_s: start.elapsed().as_secs_f64(),
    })
}

// ---------------------------------------------------------------------------
// gradient audit

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradCheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
    pub pass: bool,
}

fn fd_check_param(
    params: &ParameterSet,
    name: &str,
    mut forward: impl FnMut(&mut Tape, &BoundParams) -> Var,
    tol: f64,
) -> GradCheckResult {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params);
    let loss = forward(&mut tape, &bound);
    let grads = tape.backward(loss);
    let analytic = grads
        .get(bound.var(name))
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(params.get(name).shape()));
    let base = params.get(name).clone();
    let numeric = crate::ad::check::fd_grad(
        &mut |t: &Tensor| {
            let mut ps = params.clone();
            ps.set(name, t.clone());
            let mut tape = Tape::new();
            let bound = BoundParams::bind(&mut tape, &ps);
            let loss = forward(&mut tape, &bound);
            tape.value(loss).item()
        },
        &base,
        1e-5,
    );
    let err = crate::ad::check::max_rel_err(&analytic, &numeric);
    GradCheckResult {
        name: name.to_string(),
        max_rel_err: err,
        tol,
        pass: err <= tol,
    }
}

/// Fast finite-difference audit of the gradient paths both heads rely
/// on, at desk scale. Returns one result per audited parameter.
pub fn gradcheck_suite() -> Vec<GradCheckResult> {
    let mut results = Vec::new();

    // direct-view head, one block at reduced width
    let mut los_cfg = LosModelConfig::default();
    los_cfg.blocks = 1;
    los_cfg.channels = 16;
    los_cfg.attention.channels = 16;
    los_cfg.attention.heads = 2;
    los_cfg.attention.p_s = 2;
    los_cfg.attention.p_t = 2;
    los_cfg.attention.s = 2;
    let mut ps = ParameterSet::new();
    build_los_model(&mut ps, MODEL_PREFIX, &los_cfg, 7);
    let input = Tensor::randn(&[8, 8, 32], 0.3, 11)
        .data()
        .iter()
        .map(|v| v.abs())
        .collect::<Vec<_>>();
    let input = Tensor::from_vec(vec![8, 8, 32], input);
    let target = {
        let raw = Tensor::rand_uniform(&[8, 8, 32], 0.5, 12);
        let mut vals = raw.data().iter().map(|v| v + 0.6).collect::<Vec<f64>>();
        for p in 0..64 {
            let s: f64 = vals[p * 32..(p + 1) * 32].iter().sum();
            for v in &mut vals[p * 32..(p + 1) * 32] {
                *v /= s;
            }
        }
        Tensor::from_vec(vec![8, 8, 32], vals)
    };
    for name in [
        "m.ext.down.b",
        "m.head.b",
        "m.trt.block0.local.ffn.w2.b",
        "m.trt.block0.dec.l.stca.v.b",
    ] {
        let input = input.clone();
        let target = target.clone();
        let cfg = los_cfg.clone();
        results.push(fd_check_param(
            &ps,
            name,
            move |tape, bound| {
                let x = tape.constant(input.clone());
                let (hist, depth) =
                    forward_trt_los(tape, bound, MODEL_PREFIX, x, &cfg).expect("forward");
                los_total_loss(tape, hist, &target, depth, cfg.gamma).expect("loss")
            },
            1e-3,
        ));
    }

    // hidden-scene head, one block at reduced width
    let mut nlos_cfg = NlosModelConfig::default();
    nlos_cfg.blocks = 1;
    nlos_cfg.channels = 4;
    nlos_cfg.attention.channels = 4;
    nlos_cfg.attention.heads = 2;
    nlos_cfg.attention.p_s = 2;
    nlos_cfg.attention.p_t = 2;
    nlos_cfg.attention.s = 1;
    nlos_cfg.wall_extent_m = 1.0;
    let mut ps = ParameterSet::new();
    build_nlos_model(&mut ps, MODEL_PREFIX, &nlos_cfg, 13);
    let input = {
        let raw = Tensor::rand_uniform(&[4, 4, 16], 0.5, 21);
        Tensor::from_vec(vec![4, 4, 16], raw.data().iter().map(|v| v + 0.6).collect())
    };
    let clean = {
        let raw = Tensor::rand_uniform(&[4, 4, 16], 0.4, 22);
        Tensor::from_vec(vec![4, 4, 16], raw.data().iter().map(|v| v + 0.5).collect())
    };
    let gi = {
        let raw = Tensor::rand_uniform(&[4, 4], 0.4, 23);
        Tensor::from_vec(vec![4, 4], raw.data().iter().map(|v| v + 0.5).collect())
    };
    let gd = Tensor::rand_uniform(&[4, 4], 1.5, 24);
    for name in ["m.dn.c0.b", "m.fuse.b.b", "m.trt.block0.global.ffn.w2.b"] {
        let input = input.clone();
        let clean = clean.clone();
        let gi = gi.clone();
        let gd = gd.clone();
        let cfg = nlos_cfg.clone();
        results.push(fd_check_param(
            &ps,
            name,
            move |tape, bound| {
                let x = tape.constant(input.clone());
                let out =
                    forward_trt_nlos(tape, bound, MODEL_PREFIX, x, &cfg, 132.0).expect("forward");
                nlos_losses(
                    tape,
                    out.denoised,
                    &clean,
                    out.intensity,
                    &gi,
                    out.depth,
                    &gd,
                    None,
                    cfg.alpha,
                    cfg.beta,
                )
                .expect("losses")
            },
            1e-3,
        ));
    }

    // soft depth readout in isolation
    {
        let mut ps = ParameterSet::new();
        ps.insert("logits", Tensor::randn(&[2, 2, 8], 0.7, 31));
        results.push(fd_check_param(
            &ps,
            "logits",
            |tape, bound| {
                let x = bound.var("logits");
                let d = soft_argmax_depth(tape, x, 0.5);
                tape.sum_all(d)
            },
            1e-5,
        ));
    }
    results
}
