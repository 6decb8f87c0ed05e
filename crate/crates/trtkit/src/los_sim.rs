//! Direct-view single-photon LiDAR simulator: ideal transients from a
//! depth/albedo scene, photon-budget calibration, and Poisson detection.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{CubeKind, DataError, DepthMap, DepthUnit, IntensityImage, TransientCube};
use crate::par;
use crate::pulse::{Kernel, PulseError, PulseModel};
use crate::SPEED_OF_LIGHT;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("depth {depth_m} m at pixel ({h},{w}) maps to bin {bin} outside 0..{bins}")]
    DepthOutOfRange {
        h: usize,
        w: usize,
        depth_m: f64,
        bin: i64,
        bins: usize,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("ideal transient has zero mass")]
    ZeroMass,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Pulse(#[from] PulseError),
}

/// Detection-chain parameters: laser cycles N, detector quantum
/// efficiency, per-pixel attenuation (lumped falloff x reflectance), and
/// expected background counts per bin over the full dwell.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DetectionModel {
    pub cycles: u64,
    pub quantum_efficiency: f64,
    /// One nonnegative factor per pixel; length 1 broadcasts everywhere.
    pub attenuation: Vec<f64>,
    pub background_per_bin: f64,
}

impl DetectionModel {
    pub fn uniform() -> Self {
        Self {
            cycles: 1,
            quantum_efficiency: 1.0,
            attenuation: vec![1.0],
            background_per_bin: 0.0,
        }
    }

    pub fn validate(&self, pixels: usize) -> Result<(), SimError> {
        if self.cycles == 0 {
            return Err(SimError::InvalidParameter("cycles must be >= 1".into()));
        }
        if !(self.quantum_efficiency > 0.0 && self.quantum_efficiency <= 1.0) {
            return Err(SimError::InvalidParameter(
                "quantum efficiency in (0,1]".into(),
            ));
        }
        if self.attenuation.len() != 1 && self.attenuation.len() != pixels {
            return Err(SimError::ShapeMismatch("attenuation map".into()));
        }
        if self.attenuation.iter().any(|&a| !(a >= 0.0)) || !(self.background_per_bin >= 0.0) {
            return Err(SimError::InvalidParameter("negative rate factor".into()));
        }
        Ok(())
    }

    pub fn attenuation_at(&self, pixel: usize) -> f64 {
        if self.attenuation.len() == 1 {
            self.attenuation[0]
        } else {
            self.attenuation[pixel]
        }
    }

    /// Expected detection rate for one voxel of an ideal rate cube.
    pub fn rate(&self, pixel: usize, ideal: f64) -> f64 {
        self.cycles as f64 * self.quantum_efficiency * self.attenuation_at(pixel) * ideal
            + self.background_per_bin
    }
}

/// One signal:background photon-budget label from the evaluation grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SbrLabel {
    pub signal: f64,
    pub background: f64,
}

impl std::fmt::Display for SbrLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.signal, self.background)
    }
}

/// The 12-label evaluation grid of per-pixel photon budgets.
pub fn sbr_grid() -> Vec<SbrLabel> {
    let mut out = Vec::new();
    for signal in [2.0, 5.0, 10.0] {
        for background in [2.0, 10.0, 50.0] {
            out.push(SbrLabel { signal, background });
        }
    }
    for signal in [1.0, 2.0, 3.0] {
        out.push(SbrLabel {
            signal,
            background: 100.0,
        });
    }
    out
}

/// Noise-free transient: per pixel, a delta of mass `albedo` at the bin
/// of the round-trip time, convolved with the instrument kernel. Kernel
/// tails falling outside the time window are clipped.
pub fn ideal_transient(
    depth: &DepthMap,
    albedo: &IntensityImage,
    bins: usize,
    bin_width_ps: f64,
    kernel: &Kernel,
) -> Result<TransientCube, SimError> {
    if depth.height() != albedo.height() || depth.width() != albedo.width() {
        return Err(SimError::ShapeMismatch("depth vs albedo".into()));
    }
    let depth_m = depth.converted(DepthUnit::Meters, bin_width_ps);
    let bin_m = bin_width_ps * 1e-12 * SPEED_OF_LIGHT / 2.0;
    let (h, w) = (depth.height(), depth.width());
    let mut values = vec![0.0; h * w * bins];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if !depth_m.valid[i] || albedo.values[i] == 0.0 {
                continue;
            }
            let z = depth_m.values[i];
            let bin = (z / bin_m).round() as i64;
            if bin < 0 || bin >= bins as i64 {
                return Err(SimError::DepthOutOfRange {
                    h: r,
                    w: c,
                    depth_m: z,
                    bin,
                    bins,
                });
            }
            let mut hist = vec![0.0; bins];
            hist[bin as usize] = albedo.values[i];
            let blurred = kernel.apply(&hist);
            values[i * bins..(i + 1) * bins].copy_from_slice(&blurred);
        }
    }
    Ok(TransientCube::new(
        h,
        w,
        bins,
        bin_width_ps,
        CubeKind::Rates,
        values,
    )?)
}

/// Scale the detection chain so the mean per-pixel signal photon count
/// matches `signal_photons`, and set the per-bin background so the total
/// background per pixel over all bins matches `background_photons`.
pub fn calibrate_sbr(
    ideal: &TransientCube,
    det: &DetectionModel,
    signal_photons: f64,
    background_photons: f64,
) -> Result<DetectionModel, SimError> {
    let pixels = ideal.height() * ideal.width();
    det.validate(pixels)?;
    if !(signal_photons > 0.0) || !(background_photons >= 0.0) {
        return Err(SimError::InvalidParameter("photon budget".into()));
    }
    let bins = ideal.bins();
    let mut total = 0.0;
    for p in 0..pixels {
        let mass: f64 = ideal.values()[p * bins..(p + 1) * bins].iter().sum();
        let gain = det.cycles as f64 * det.quantum_efficiency * det.attenuation_at(p);
        total += gain * mass;
    }
    if total <= 0.0 {
        return Err(SimError::ZeroMass);
    }
    let scale = signal_photons * pixels as f64 / total;
    let mut out = det.clone();
    for a in out.attenuation.iter_mut() {
        *a *= scale;
    }
    out.background_per_bin = background_photons / bins as f64;
    Ok(out)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Draw one Poisson count from a dedicated stream keyed by `(seed, key)`.
/// Every voxel gets its own generator, so results do not depend on the
/// evaluation order or thread count.
pub fn poisson_draw(rate: f64, seed: u64, key: u64) -> u32 {
    if rate <= 0.0 {
        return 0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(key)));
    let p = Poisson::new(rate).expect("positive finite rate");
    let v: f64 = p.sample(&mut rng);
    // guard against astronomically unlikely overflow rather than wrap
    v.min(u32::MAX as f64).round() as u32
}

/// Poisson detection of an ideal rate cube through the detection chain.
pub fn poisson_detect(
    rates: &TransientCube,
    det: &DetectionModel,
    seed: u64,
) -> Result<TransientCube, SimError> {
    if rates.kind() != CubeKind::Rates {
        return Err(SimError::InvalidParameter("expected a rate cube".into()));
    }
    det.validate(rates.height() * rates.width())?;
    let bins = rates.bins();
    let src = rates.values();
    let mut values = vec![0.0; src.len()];
    par::for_each_chunk_mut(&mut values, bins, |pix, chunk| {
        for (n, out) in chunk.iter_mut().enumerate() {
            let idx = pix * bins + n;
            *out = poisson_draw(det.rate(pix, src[idx]), seed, idx as u64) as f64;
        }
    });
    Ok(TransientCube::new(
        rates.height(),
        rates.width(),
        bins,
        rates.bin_width_ps(),
        CubeKind::Counts,
        values,
    )?)
}

// ---------------------------------------------------------------------------
// procedural scenes and datasets

#[derive(Clone, Debug)]
pub struct LosScene {
    pub depth: DepthMap,
    pub albedo: IntensityImage,
}

/// Minimum procedural albedo; keeps every pixel detectable so the whole
/// frame carries depth supervision.
pub const MIN_ALBEDO: f64 = 0.1;

/// Smooth random scene: a tilted plane plus a few Gaussian bumps in both
/// depth and albedo, depth kept inside the central part of the range.
pub fn generate_los_scene(height: usize, width: usize, max_depth_m: f64, seed: u64) -> LosScene {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed));
    let mut depth = vec![0.0; height * width];
    let mut albedo = vec![0.0; height * width];
    let base = max_depth_m * rng.gen_range(0.35..0.55);
    let tilt_r = max_depth_m * rng.gen_range(-0.1..0.1);
    let tilt_c = max_depth_m * rng.gen_range(-0.1..0.1);
    let bumps: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.gen_range(0.0..height as f64),
                rng.gen_range(0.0..width as f64),
                rng.gen_range(0.08..0.3) * height.max(width) as f64,
                max_depth_m * rng.gen_range(-0.15..0.15),
            )
        })
        .collect();
    let tex: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.gen_range(0.0..height as f64),
                rng.gen_range(0.0..width as f64),
                rng.gen_range(0.1..0.4) * height.max(width) as f64,
                rng.gen_range(0.2..0.9),
            )
        })
        .collect();
    for r in 0..height {
        for c in 0..width {
            let i = r * width + c;
            let (rf, cf) = (
                r as f64 / height as f64 - 0.5,
                c as f64 / width as f64 - 0.5,
            );
            let mut z = base + tilt_r * rf + tilt_c * cf;
            for &(br, bc, s, amp) in &bumps {
                let d2 = (r as f64 - br).powi(2) + (c as f64 - bc).powi(2);
                z += amp * (-d2 / (2.0 * s * s)).exp();
            }
            depth[i] = z.clamp(0.05 * max_depth_m, 0.95 * max_depth_m);
            let mut a = MIN_ALBEDO;
            for &(br, bc, s, amp) in &tex {
                let d2 = (r as f64 - br).powi(2) + (c as f64 - bc).powi(2);
                a += amp * (-d2 / (2.0 * s * s)).exp();
            }
            albedo[i] = a.min(1.0);
        }
    }
    LosScene {
        depth: DepthMap::new(
            height,
            width,
            depth,
            vec![true; height * width],
            DepthUnit::Meters,
        )
        .unwrap(),
        albedo: IntensityImage::new(height, width, albedo).unwrap(),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LosSimConfig {
    pub height: usize,
    pub width: usize,
    pub bins: usize,
    pub bin_width_ps: f64,
    pub pulse: PulseModel,
    pub sbr: SbrLabel,
    pub count: usize,
    pub seed: u64,
}

impl Default for LosSimConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            bins: 128,
            bin_width_ps: 80.0,
            pulse: PulseModel::default(),
            sbr: SbrLabel {
                signal: 2.0,
                background: 10.0,
            },
            count: 8,
            seed: 0,
        }
    }
}

impl LosSimConfig {
    pub fn max_depth_m(&self) -> f64 {
        self.bins as f64 * self.bin_width_ps * 1e-12 * SPEED_OF_LIGHT / 2.0
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LosSample {
    pub cube_path: PathBuf,
    pub gt_depth_path: PathBuf,
    pub signal: f64,
    pub background: f64,
    pub seed: u64,
}

/// Simulate `count` scenes to disk: measured count cubes, ground-truth
/// depth images, and a JSON manifest listing them.
pub fn generate_los_dataset(dir: &Path, cfg: &LosSimConfig) -> Result<Vec<LosSample>, SimError> {
    std::fs::create_dir_all(dir).map_err(DataError::Io)?;
    let kernel = cfg.pulse.combined_kernel(cfg.bin_width_ps)?;
    let mut manifest = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let scene_seed = splitmix(cfg.seed.wrapping_add(i as u64 + 1));
        let scene = generate_los_scene(cfg.height, cfg.width, cfg.max_depth_m(), scene_seed);
        let ideal = ideal_transient(
            &scene.depth,
            &scene.albedo,
            cfg.bins,
            cfg.bin_width_ps,
            &kernel,
        )?;
        let det = calibrate_sbr(
            &ideal,
            &DetectionModel::uniform(),
            cfg.sbr.signal,
            cfg.sbr.background,
        )?;
        let counts = poisson_detect(&ideal, &det, scene_seed)?;
        let cube_path = dir.join(format!("los_{i:04}.cube"));
        let gt_depth_path = dir.join(format!("los_{i:04}_depth.png"));
        counts.save(&cube_path)?;
        crate::data::save_gray16(
            &gt_depth_path,
            cfg.height,
            cfg.width,
            &scene.depth.values,
            Some(&scene.depth.valid),
            "m",
        )?;
        manifest.push(LosSample {
            cube_path,
            gt_depth_path,
            signal: cfg.sbr.signal,
            background: cfg.sbr.background,
            seed: scene_seed,
        });
    }
    let f = std::fs::File::create(dir.join("manifest.json")).map_err(DataError::Io)?;
    serde_json::to_writer_pretty(f, &manifest).map_err(DataError::Json)?;
    Ok(manifest)
}

pub fn load_manifest(path: &Path) -> Result<Vec<LosSample>, SimError> {
    let f = std::fs::File::open(path).map_err(DataError::Io)?;
    Ok(serde_json::from_reader(f).map_err(DataError::Json)?)
}

pub(crate) fn mix64(z: u64) -> u64 {
    splitmix(z)
}
