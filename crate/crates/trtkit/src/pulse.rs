//! Temporal instrument response: laser pulse shape, detector jitter, and
//! their combination, discretized onto histogram bins.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PulseError {
    #[error("invalid pulse parameter: {0}")]
    InvalidParameter(String),
}

pub const FWHM_TO_SIGMA: f64 = 2.354820045030949; // 2 sqrt(2 ln 2)

/// Default laser pulse full width at half maximum in picoseconds.
pub const DEFAULT_PULSE_FWHM_PS: f64 = 400.0;

/// Truncation half-width of a discretized Gaussian, in sigmas.
pub const TRUNCATION_SIGMAS: f64 = 4.0;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PulseModel {
    /// Laser pulse FWHM in picoseconds.
    pub pulse_fwhm_ps: f64,
    /// Detector timing jitter FWHM in picoseconds; 0 disables jitter.
    pub jitter_fwhm_ps: f64,
}

impl Default for PulseModel {
    fn default() -> Self {
        Self {
            pulse_fwhm_ps: DEFAULT_PULSE_FWHM_PS,
            jitter_fwhm_ps: 0.0,
        }
    }
}

/// A discrete symmetric kernel over time bins with odd support and unit
/// area, centered at `(len - 1) / 2`.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    pub taps: Vec<f64>,
}

impl Kernel {
    pub fn delta() -> Self {
        Self { taps: vec![1.0] }
    }

    pub fn radius(&self) -> usize {
        self.taps.len() / 2
    }

    fn normalized(mut taps: Vec<f64>) -> Self {
        let sum: f64 = taps.iter().sum();
        for t in taps.iter_mut() {
            *t /= sum;
        }
        Self { taps }
    }

    /// Gaussian sampled at bin centers, truncated at 4 sigma, odd support,
    /// renormalized to unit area. Degenerate widths collapse to a delta.
    pub fn gaussian(fwhm_ps: f64, bin_width_ps: f64) -> Result<Self, PulseError> {
        if !(fwhm_ps >= 0.0) || !fwhm_ps.is_finite() {
            return Err(PulseError::InvalidParameter(format!("fwhm {fwhm_ps}")));
        }
        if !(bin_width_ps > 0.0) {
            return Err(PulseError::InvalidParameter(format!(
                "bin width {bin_width_ps}"
            )));
        }
        let sigma_bins = fwhm_ps / FWHM_TO_SIGMA / bin_width_ps;
        if sigma_bins == 0.0 {
            return Ok(Self::delta());
        }
        let radius = (TRUNCATION_SIGMAS * sigma_bins).ceil() as usize;
        let taps: Vec<f64> = (-(radius as i64)..=radius as i64)
            .map(|i| (-(i as f64).powi(2) / (2.0 * sigma_bins * sigma_bins)).exp())
            .collect();
        Ok(Self::normalized(taps))
    }

    /// Full discrete convolution of two kernels; support stays odd and
    /// area stays one.
    pub fn convolved(&self, other: &Kernel) -> Self {
        let n = self.taps.len() + other.taps.len() - 1;
        let mut out = vec![0.0; n];
        for (i, &a) in self.taps.iter().enumerate() {
            for (j, &b) in other.taps.iter().enumerate() {
                out[i + j] += a * b;
            }
        }
        Self::normalized(out)
    }

    /// Convolve a histogram with the kernel; out-of-range taps clip at
    /// the edges (mass outside the window is dropped, not wrapped).
    pub fn apply(&self, hist: &[f64]) -> Vec<f64> {
        let r = self.radius() as i64;
        let t = hist.len() as i64;
        let mut out = vec![0.0; hist.len()];
        for (i, &v) in hist.iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            for (k, &w) in self.taps.iter().enumerate() {
                let j = i as i64 + k as i64 - r;
                if j >= 0 && j < t {
                    out[j as usize] += v * w;
                }
            }
        }
        out
    }
}

impl PulseModel {
    /// Laser pulse kernel alone.
    pub fn pulse_kernel(&self, bin_width_ps: f64) -> Result<Kernel, PulseError> {
        Kernel::gaussian(self.pulse_fwhm_ps, bin_width_ps)
    }

    /// Combined instrument response: pulse convolved with jitter.
    pub fn combined_kernel(&self, bin_width_ps: f64) -> Result<Kernel, PulseError> {
        let p = Kernel::gaussian(self.pulse_fwhm_ps, bin_width_ps)?;
        if self.jitter_fwhm_ps == 0.0 {
            return Ok(p);
        }
        let j = Kernel::gaussian(self.jitter_fwhm_ps, bin_width_ps)?;
        Ok(p.convolved(&j))
    }
}
