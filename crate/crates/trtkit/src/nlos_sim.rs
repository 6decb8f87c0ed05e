//! Confocal non-line-of-sight simulator: hidden point scenes behind a
//! relay wall, transient rendering, and orthographic supervision views.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{CubeKind, DataError, DepthMap, DepthUnit, IntensityImage, TransientCube};
use crate::los_sim::{self, DetectionModel, SimError};
use crate::par;
use crate::pulse::{Kernel, PulseError};
use crate::SPEED_OF_LIGHT;

#[derive(Debug, Error)]
pub enum NlosError {
    #[error("scene point {index}: {reason}")]
    BadPoint { index: usize, reason: String },
    #[error("point {index} at range {range_m} m exceeds the temporal window ({bins} bins)")]
    PointOutOfRange {
        index: usize,
        range_m: f64,
        bins: usize,
    },
    #[error("scan grid: {0}")]
    BadGrid(String),
    #[error("empty scene")]
    EmptyScene,
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Pulse(#[from] PulseError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// One hidden surface sample: position (wall plane z=0, hidden volume
/// z>0), albedo in [0,1], and a unit surface normal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScenePoint {
    pub position: [f64; 3],
    pub albedo: f64,
    pub normal: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct HiddenScene {
    pub points: Vec<ScenePoint>,
}

impl HiddenScene {
    pub fn new(points: Vec<ScenePoint>) -> Result<Self, NlosError> {
        for (index, p) in points.iter().enumerate() {
            if p.position[2] <= 0.0 {
                return Err(NlosError::BadPoint {
                    index,
                    reason: "z must be > 0".into(),
                });
            }
            if !(0.0..=1.0).contains(&p.albedo) {
                return Err(NlosError::BadPoint {
                    index,
                    reason: "albedo outside [0,1]".into(),
                });
            }
            let n2 = p.normal.iter().map(|v| v * v).sum::<f64>();
            if (n2.sqrt() - 1.0).abs() > 1e-6 {
                return Err(NlosError::BadPoint {
                    index,
                    reason: "normal not unit length".into(),
                });
            }
        }
        Ok(Self { points })
    }

    /// Mirror the scene across the grid's vertical (y) axis: x -> -x.
    pub fn mirrored_x(&self) -> Self {
        Self {
            points: self
                .points
                .iter()
                .map(|p| ScenePoint {
                    position: [-p.position[0], p.position[1], p.position[2]],
                    albedo: p.albedo,
                    normal: [-p.normal[0], p.normal[1], p.normal[2]],
                })
                .collect(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NlosError> {
        #[derive(Serialize)]
        struct File {
            points: Vec<[f64; 7]>,
        }
        let f = File {
            points: self
                .points
                .iter()
                .map(|p| {
                    [
                        p.position[0],
                        p.position[1],
                        p.position[2],
                        p.albedo,
                        p.normal[0],
                        p.normal[1],
                        p.normal[2],
                    ]
                })
                .collect(),
        };
        serde_json::to_writer_pretty(std::fs::File::create(path)?, &f)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NlosError> {
        #[derive(Deserialize)]
        struct File {
            points: Vec<[f64; 7]>,
        }
        let f: File = serde_json::from_reader(std::fs::File::open(path)?)?;
        Self::new(
            f.points
                .into_iter()
                .map(|v| ScenePoint {
                    position: [v[0], v[1], v[2]],
                    albedo: v[3],
                    normal: [v[4], v[5], v[6]],
                })
                .collect(),
        )
    }
}

/// Relay-wall scan positions: a regular grid in the z=0 plane centered
/// at the origin, confocal (illumination and sampling coincide).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScanGrid {
    pub height: usize,
    pub width: usize,
    pub extent_m: f64,
    pub bins: usize,
    pub bin_width_ps: f64,
}

impl ScanGrid {
    pub fn validate(&self) -> Result<(), NlosError> {
        if self.height < 2 || self.width < 2 {
            return Err(NlosError::BadGrid("grid must be at least 2x2".into()));
        }
        if !(self.extent_m > 0.0) || !(self.bin_width_ps > 0.0) || self.bins == 0 {
            return Err(NlosError::BadGrid(
                "extent, bins, bin width must be positive".into(),
            ));
        }
        Ok(())
    }

    /// World position of scan point (row, col), cell-centered.
    pub fn point(&self, row: usize, col: usize) -> [f64; 3] {
        [
            (col as f64 + 0.5) / self.width as f64 * self.extent_m - self.extent_m / 2.0,
            (row as f64 + 0.5) / self.height as f64 * self.extent_m - self.extent_m / 2.0,
            0.0,
        ]
    }

    pub fn max_range_m(&self) -> f64 {
        self.bins as f64 * self.bin_width_ps * 1e-12 * SPEED_OF_LIGHT / 2.0
    }
}

/// Per-scan-point contribution of one scene point before binning:
/// albedo x clamped cosine / falloff.
fn contribution(s: [f64; 3], p: &ScenePoint, quadratic_falloff: bool) -> (f64, f64) {
    let d = [
        s[0] - p.position[0],
        s[1] - p.position[1],
        s[2] - p.position[2],
    ];
    let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    let cos = (d[0] * p.normal[0] + d[1] * p.normal[1] + d[2] * p.normal[2]) / r;
    let vis = cos.max(0.0);
    let falloff = if quadratic_falloff {
        r * r * r * r
    } else {
        r * r
    };
    (p.albedo * vis / falloff, r)
}

/// Render a hidden point scene into a confocal rate cube: each point
/// deposits its Lambertian-weighted contribution into the round-trip bin
/// at every wall pixel, then histograms are blurred with the pulse.
pub fn render_confocal(
    scene: &HiddenScene,
    grid: &ScanGrid,
    kernel: &Kernel,
    quadratic_falloff: bool,
) -> Result<TransientCube, NlosError> {
    grid.validate()?;
    let bin_m = grid.bin_width_ps * 1e-12 * SPEED_OF_LIGHT / 2.0;
    // range precheck: the pre-condition is global, not per wall pixel
    for (index, p) in scene.points.iter().enumerate() {
        let mut worst = 0.0f64;
        for (r, c) in [
            (0, 0),
            (0, grid.width - 1),
            (grid.height - 1, 0),
            (grid.height - 1, grid.width - 1),
        ] {
            let s = grid.point(r, c);
            let d = [
                s[0] - p.position[0],
                s[1] - p.position[1],
                s[2] - p.position[2],
            ];
            worst = worst.max((d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt());
        }
        if (worst / bin_m).round() as usize >= grid.bins {
            return Err(NlosError::PointOutOfRange {
                index,
                range_m: worst,
                bins: grid.bins,
            });
        }
    }
    let bins = grid.bins;
    let mut values = vec![0.0; grid.height * grid.width * bins];
    par::for_each_chunk_mut(&mut values, bins, |pix, chunk| {
        let s = grid.point(pix / grid.width, pix % grid.width);
        let mut hist = vec![0.0; bins];
        for p in &scene.points {
            let (w, r) = contribution(s, p, quadratic_falloff);
            if w > 0.0 {
                hist[(r / bin_m).round() as usize] += w;
            }
        }
        chunk.copy_from_slice(&kernel.apply(&hist));
    });
    Ok(TransientCube::new(
        grid.height,
        grid.width,
        bins,
        grid.bin_width_ps,
        CubeKind::Rates,
        values,
    )?)
}

/// Poisson detection of a rendered NLOS cube; shares the detection chain
/// with the direct-view simulator.
pub fn poisson_detect_nlos(
    rates: &TransientCube,
    det: &DetectionModel,
    seed: u64,
) -> Result<TransientCube, NlosError> {
    Ok(los_sim::poisson_detect(rates, det, seed)?)
}

/// Orthographic front view of the hidden scene on the scan grid's (x,y)
/// cells: per cell, the brightest albedo and the nearest depth; empty
/// cells are masked invalid.
pub fn gt_views(
    scene: &HiddenScene,
    grid: &ScanGrid,
) -> Result<(IntensityImage, DepthMap), NlosError> {
    grid.validate()?;
    if scene.points.is_empty() {
        return Err(NlosError::EmptyScene);
    }
    let (h, w) = (grid.height, grid.width);
    let mut intensity = vec![0.0; h * w];
    let mut depth = vec![0.0; h * w];
    let mut valid = vec![false; h * w];
    let half = grid.extent_m / 2.0;
    for p in &scene.points {
        let col = ((p.position[0] + half) / grid.extent_m * w as f64).floor() as i64;
        let row = ((p.position[1] + half) / grid.extent_m * h as f64).floor() as i64;
        if row < 0 || row >= h as i64 || col < 0 || col >= w as i64 {
            continue;
        }
        let i = row as usize * w + col as usize;
        if !valid[i] {
            valid[i] = true;
            intensity[i] = p.albedo;
            depth[i] = p.position[2];
        } else {
            intensity[i] = intensity[i].max(p.albedo);
            depth[i] = depth[i].min(p.position[2]);
        }
    }
    Ok((
        IntensityImage::new(h, w, intensity)?,
        DepthMap::new(h, w, depth, valid, DepthUnit::Meters)?,
    ))
}
