//! Core data model: transient cubes, depth/intensity maps, the bit-exact
//! cube file format, and the evaluation metrics shared by every module.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::SPEED_OF_LIGHT;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad magic (expected {expected}, found {found:?})")]
    BadMagic {
        expected: &'static str,
        found: [u8; 4],
    },
    #[error("unsupported format version {0}")]
    VersionMismatch(u16),
    #[error("truncated payload")]
    Truncated,
    #[error("dimension overflow: {0}")]
    DimensionOverflow(String),
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty valid mask")]
    EmptyMask,
    #[error("ground truth entirely below threshold")]
    EmptyRegion,
    #[error("image {0}x{1} smaller than the {2}-tap window")]
    ImageTooSmall(usize, usize, usize),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Photon counts or rates over scan positions and time bins, stored
/// row-major with time fastest.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CubeKind {
    Counts,
    Rates,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransientCube {
    height: usize,
    width: usize,
    bins: usize,
    bin_width_ps: f64,
    kind: CubeKind,
    values: Vec<f64>,
}

impl TransientCube {
    pub fn new(
        height: usize,
        width: usize,
        bins: usize,
        bin_width_ps: f64,
        kind: CubeKind,
        values: Vec<f64>,
    ) -> Result<Self> {
        if height == 0 || width == 0 || bins == 0 {
            return Err(DataError::InvalidValue("dimensions must be >= 1".into()));
        }
        if !(bin_width_ps > 0.0) {
            return Err(DataError::InvalidValue("bin_width must be > 0".into()));
        }
        if values.len() != height * width * bins {
            return Err(DataError::ShapeMismatch(format!(
                "{}x{}x{} vs {} values",
                height,
                width,
                bins,
                values.len()
            )));
        }
        for &v in &values {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(DataError::InvalidValue("values must be >= 0".into()));
            }
            if kind == CubeKind::Counts && (v.fract() != 0.0 || v > u32::MAX as f64) {
                return Err(DataError::InvalidValue(
                    "counts must be integral u32".into(),
                ));
            }
        }
        Ok(Self {
            height,
            width,
            bins,
            bin_width_ps,
            kind,
            values,
        })
    }

    pub fn zeros(
        height: usize,
        width: usize,
        bins: usize,
        bin_width_ps: f64,
        kind: CubeKind,
    ) -> Self {
        Self::new(
            height,
            width,
            bins,
            bin_width_ps,
            kind,
            vec![0.0; height * width * bins],
        )
        .unwrap()
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn bins(&self) -> usize {
        self.bins
    }
    pub fn bin_width_ps(&self) -> f64 {
        self.bin_width_ps
    }
    pub fn kind(&self) -> CubeKind {
        self.kind
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, h: usize, w: usize, n: usize) -> f64 {
        self.values[(h * self.width + w) * self.bins + n]
    }

    pub fn pixel(&self, h: usize, w: usize) -> &[f64] {
        let base = (h * self.width + w) * self.bins;
        &self.values[base..base + self.bins]
    }

    /// Depth of one histogram bin in meters (round-trip time halved).
    pub fn bin_depth_m(&self) -> f64 {
        self.bin_width_ps * 1e-12 * SPEED_OF_LIGHT / 2.0
    }

    const MAGIC: &'static [u8; 4] = b"TRTC";
    const VERSION: u16 = 1;

    /// Serialize to the little-endian container format. Round-trips are
    /// bit-exact: counts as u32, rates as f32 (rate cubes produced for
    /// storage must already be f32-representable, which `new` does not
    /// enforce; saving rounds to f32 and loading returns those exact
    /// values).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(Self::MAGIC)?;
        w.write_all(&Self::VERSION.to_le_bytes())?;
        let kind = match self.kind {
            CubeKind::Counts => 0u8,
            CubeKind::Rates => 1u8,
        };
        w.write_all(&[kind, 0u8])?;
        for dim in [self.height, self.width, self.bins] {
            let v =
                u32::try_from(dim).map_err(|_| DataError::DimensionOverflow(format!("{dim}")))?;
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.bin_width_ps.to_le_bytes())?;
        match self.kind {
            CubeKind::Counts => {
                for &v in &self.values {
                    w.write_all(&(v as u32).to_le_bytes())?;
                }
            }
            CubeKind::Rates => {
                for &v in &self.values {
                    w.write_all(&(v as f32).to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| DataError::Truncated)?;
        if &magic != Self::MAGIC {
            return Err(DataError::BadMagic {
                expected: "TRTC",
                found: magic,
            });
        }
        let mut buf2 = [0u8; 2];
        r.read_exact(&mut buf2).map_err(|_| DataError::Truncated)?;
        let version = u16::from_le_bytes(buf2);
        if version != Self::VERSION {
            return Err(DataError::VersionMismatch(version));
        }
        r.read_exact(&mut buf2).map_err(|_| DataError::Truncated)?;
        let kind = match buf2[0] {
            0 => CubeKind::Counts,
            1 => CubeKind::Rates,
            k => return Err(DataError::InvalidValue(format!("unknown kind {k}"))),
        };
        let mut dims = [0usize; 3];
        for d in dims.iter_mut() {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|_| DataError::Truncated)?;
            *d = u32::from_le_bytes(b) as usize;
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8).map_err(|_| DataError::Truncated)?;
        let bin_width_ps = f64::from_le_bytes(b8);
        let n = dims[0]
            .checked_mul(dims[1])
            .and_then(|v| v.checked_mul(dims[2]))
            .ok_or_else(|| DataError::DimensionOverflow(format!("{dims:?}")))?;
        let mut values = Vec::with_capacity(n);
        let mut b4 = [0u8; 4];
        for _ in 0..n {
            r.read_exact(&mut b4).map_err(|_| DataError::Truncated)?;
            values.push(match kind {
                CubeKind::Counts => u32::from_le_bytes(b4) as f64,
                CubeKind::Rates => f32::from_le_bytes(b4) as f64,
            });
        }
        Self::new(dims[0], dims[1], dims[2], bin_width_ps, kind, values)
    }
}

/// Units a depth map is expressed in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DepthUnit {
    Meters,
    Bins,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
    pub unit: DepthUnit,
}

impl DepthMap {
    pub fn new(
        height: usize,
        width: usize,
        values: Vec<f64>,
        valid: Vec<bool>,
        unit: DepthUnit,
    ) -> Result<Self> {
        if values.len() != height * width || valid.len() != height * width {
            return Err(DataError::ShapeMismatch("depth map buffers".into()));
        }
        for (v, &ok) in values.iter().zip(&valid) {
            if ok && !v.is_finite() {
                return Err(DataError::InvalidValue("non-finite valid depth".into()));
            }
        }
        Ok(Self {
            height,
            width,
            values,
            valid,
            unit,
        })
    }

    pub fn filled(height: usize, width: usize, v: f64, unit: DepthUnit) -> Self {
        Self::new(
            height,
            width,
            vec![v; height * width],
            vec![true; height * width],
            unit,
        )
        .unwrap()
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn at(&self, h: usize, w: usize) -> f64 {
        self.values[h * self.width + w]
    }

    /// Convert between meters and bin units given the bin width.
    pub fn converted(&self, unit: DepthUnit, bin_width_ps: f64) -> Self {
        if unit == self.unit {
            return self.clone();
        }
        let bin_m = bin_width_ps * 1e-12 * SPEED_OF_LIGHT / 2.0;
        let f = match unit {
            DepthUnit::Meters => bin_m,
            DepthUnit::Bins => 1.0 / bin_m,
        };
        Self {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|v| v * f).collect(),
            valid: self.valid.clone(),
            unit,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntensityImage {
    height: usize,
    width: usize,
    pub values: Vec<f64>,
}

impl IntensityImage {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(DataError::ShapeMismatch("intensity buffer".into()));
        }
        for &v in &values {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(DataError::InvalidValue("intensity must be >= 0".into()));
            }
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
}

/// Inclusive-start, exclusive-end crop rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub row0: usize,
    pub row1: usize,
    pub col0: usize,
    pub col1: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmse: f64,
    pub mad: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub crop_region: Option<Rect>,
}

// ---------------------------------------------------------------------------
// metrics

fn masked_pairs<'a>(
    d: &'a DepthMap,
    gt: &'a DepthMap,
) -> Result<impl Iterator<Item = (f64, f64)> + 'a> {
    if d.height != gt.height || d.width != gt.width {
        return Err(DataError::ShapeMismatch("depth maps".into()));
    }
    if !gt.valid.iter().any(|&v| v) {
        return Err(DataError::EmptyMask);
    }
    Ok(d.values
        .iter()
        .zip(&gt.values)
        .zip(&gt.valid)
        .filter(|(_, &ok)| ok)
        .map(|((&a, &b), _)| (a, b)))
}

/// Root mean square depth error over the ground-truth valid mask.
pub fn rmse(d: &DepthMap, gt: &DepthMap) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (a, b) in masked_pairs(d, gt)? {
        sum += (a - b) * (a - b);
        n += 1;
    }
    Ok((sum / n as f64).sqrt())
}

/// Mean absolute distance over the ground-truth valid mask.
pub fn mad(d: &DepthMap, gt: &DepthMap) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (a, b) in masked_pairs(d, gt)? {
        sum += (a - b).abs();
        n += 1;
    }
    Ok(sum / n as f64)
}

/// PSNR cap for identical images; keeps reports finite.
pub const PSNR_CAP_DB: f64 = 99.0;

pub fn psnr(i: &IntensityImage, gt: &IntensityImage, peak: f64) -> Result<f64> {
    if i.height != gt.height || i.width != gt.width {
        return Err(DataError::ShapeMismatch("intensity images".into()));
    }
    if !(peak > 0.0) {
        return Err(DataError::InvalidValue("peak must be > 0".into()));
    }
    let mse: f64 = i
        .values
        .iter()
        .zip(&gt.values)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / i.values.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Mean local SSIM with an 11-tap Gaussian window (sigma 1.5), windows
/// fully inside the frame.
pub fn ssim(i: &IntensityImage, gt: &IntensityImage, peak: f64) -> Result<f64> {
    if i.height != gt.height || i.width != gt.width {
        return Err(DataError::ShapeMismatch("intensity images".into()));
    }
    if i.height < SSIM_WINDOW || i.width < SSIM_WINDOW {
        return Err(DataError::ImageTooSmall(i.height, i.width, SSIM_WINDOW));
    }
    let k = ssim_kernel();
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let (h, w) = (i.height, i.width);
    let mut total = 0.0;
    let mut count = 0usize;
    for r0 in 0..=h - SSIM_WINDOW {
        for c0 in 0..=w - SSIM_WINDOW {
            let mut mx = 0.0;
            let mut my = 0.0;
            let mut mxx = 0.0;
            let mut myy = 0.0;
            let mut mxy = 0.0;
            for dr in 0..SSIM_WINDOW {
                for dc in 0..SSIM_WINDOW {
                    let wgt = k[dr] * k[dc];
                    let a = i.values[(r0 + dr) * w + c0 + dc];
                    let b = gt.values[(r0 + dr) * w + c0 + dc];
                    mx += wgt * a;
                    my += wgt * b;
                    mxx += wgt * a * a;
                    myy += wgt * b * b;
                    mxy += wgt * a * b;
                }
            }
            let vx = mxx - mx * mx;
            let vy = myy - my * my;
            let cov = mxy - mx * my;
            let val = ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            total += val;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Fraction of the ground-truth maximum below which pixels do not count
/// toward the evaluation crop.
pub const CROP_THRESHOLD_FRAC: f64 = 0.01;
pub const CROP_MARGIN: usize = 4;

/// Tight bounding box of ground-truth pixels above 1% of the maximum,
/// grown by a 4-pixel margin and clamped to the frame.
pub fn crop_to_gt(
    pred: &IntensityImage,
    gt: &IntensityImage,
) -> Result<(IntensityImage, IntensityImage, Rect)> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(DataError::ShapeMismatch("intensity images".into()));
    }
    let max = gt.values.iter().cloned().fold(0.0, f64::max);
    let thr = max * CROP_THRESHOLD_FRAC;
    let mut r0 = usize::MAX;
    let mut r1 = 0usize;
    let mut c0 = usize::MAX;
    let mut c1 = 0usize;
    for r in 0..gt.height {
        for c in 0..gt.width {
            if max > 0.0 && gt.values[r * gt.width + c] > thr {
                r0 = r0.min(r);
                r1 = r1.max(r + 1);
                c0 = c0.min(c);
                c1 = c1.max(c + 1);
            }
        }
    }
    if r0 == usize::MAX {
        return Err(DataError::EmptyRegion);
    }
    let rect = Rect {
        row0: r0.saturating_sub(CROP_MARGIN),
        row1: (r1 + CROP_MARGIN).min(gt.height),
        col0: c0.saturating_sub(CROP_MARGIN),
        col1: (c1 + CROP_MARGIN).min(gt.width),
    };
    let cut = |img: &IntensityImage| {
        let mut vals = Vec::with_capacity((rect.row1 - rect.row0) * (rect.col1 - rect.col0));
        for r in rect.row0..rect.row1 {
            for c in rect.col0..rect.col1 {
                vals.push(img.values[r * img.width + c]);
            }
        }
        IntensityImage::new(rect.row1 - rect.row0, rect.col1 - rect.col0, vals).unwrap()
    };
    Ok((cut(pred), cut(gt), rect))
}

/// Per-pixel argmax depth; ties break to the smallest bin index, all-zero
/// histograms come back masked invalid at index 0.
pub fn depth_from_argmax(cube: &TransientCube) -> DepthMap {
    let bin_m = cube.bin_depth_m();
    let mut values = Vec::with_capacity(cube.height * cube.width);
    let mut valid = Vec::with_capacity(cube.height * cube.width);
    for h in 0..cube.height {
        for w in 0..cube.width {
            let hist = cube.pixel(h, w);
            let mut best = 0usize;
            let mut any = false;
            for (n, &v) in hist.iter().enumerate() {
                if v > hist[best] {
                    best = n;
                }
                if v != 0.0 {
                    any = true;
                }
            }
            values.push(best as f64 * bin_m);
            valid.push(any);
        }
    }
    DepthMap::new(cube.height, cube.width, values, valid, DepthUnit::Meters).unwrap()
}

// ---------------------------------------------------------------------------
// PNG export/import with linear-scaling sidecar

#[derive(Serialize, Deserialize)]
pub struct PngSidecar {
    pub min: f64,
    pub max: f64,
    pub units: String,
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    p.into()
}

/// 16-bit grayscale PNG with the linear scaling recorded in a sidecar
/// JSON next to the image. Invalid pixels are written as 0.
pub fn save_gray16(
    path: impl AsRef<Path>,
    height: usize,
    width: usize,
    values: &[f64],
    valid: Option<&[bool]>,
    units: &str,
) -> Result<()> {
    let path = path.as_ref();
    let mask = |i: usize| valid.map_or(true, |m| m[i]);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (i, &v) in values.iter().enumerate() {
        if mask(i) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !lo.is_finite() {
        lo = 0.0;
        hi = 0.0;
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut img =
        image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(width as u32, height as u32);
    for (i, px) in img.pixels_mut().enumerate() {
        let v = if mask(i) {
            (((values[i] - lo) / span) * 65535.0)
                .round()
                .clamp(0.0, 65535.0) as u16
        } else {
            0
        };
        *px = image::Luma([v]);
    }
    img.save(path)?;
    let sidecar = PngSidecar {
        min: lo,
        max: hi,
        units: units.to_string(),
    };
    serde_json::to_writer_pretty(File::create(sidecar_path(path))?, &sidecar)?;
    Ok(())
}

/// Load a 16-bit grayscale PNG with its sidecar scaling back into values.
pub fn load_gray16(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<f64>, PngSidecar)> {
    let path = path.as_ref();
    let img = image::open(path)?.into_luma16();
    let sidecar: PngSidecar = serde_json::from_reader(File::open(sidecar_path(path))?)?;
    let span = if sidecar.max > sidecar.min {
        sidecar.max - sidecar.min
    } else {
        1.0
    };
    let (w, h) = (img.width() as usize, img.height() as usize);
    let values = img
        .pixels()
        .map(|p| sidecar.min + span * p.0[0] as f64 / 65535.0)
        .collect();
    Ok((h, w, values, sidecar))
}
