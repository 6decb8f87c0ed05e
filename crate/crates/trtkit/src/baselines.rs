//! Classical per-pixel depth estimators runnable on any transient cube:
//! log-matched filtering and raw argmax.

use crate::data::{depth_from_argmax, DepthMap, DepthUnit, TransientCube};
use crate::par;
use crate::pulse::Kernel;

/// Epsilon inside the logarithm of the matched template.
pub const LM_EPS: f64 = 1e-6;

/// Correlate every pixel histogram with the log of the pulse template and
/// take the best-aligned bin (ties break low). Pixels whose correlation
/// is flat — no alignment preference, e.g. uniform or empty histograms —
/// are masked as low-confidence.
pub fn log_matched_filter(cube: &TransientCube, pulse: &Kernel) -> DepthMap {
    let (h, w, bins) = (cube.height(), cube.width(), cube.bins());
    // Correlating a histogram with the full-period log template
    // ln(pulse + eps), pulse zero-padded to the bin count, differs from
    // correlating with ln(pulse + eps) - ln(eps) on the pulse support by
    // a lag-independent constant, so the argmax is identical; the
    // baseline-subtracted form avoids touching every empty bin.
    let template: Vec<f64> = pulse
        .taps
        .iter()
        .map(|&t| (t + LM_EPS).ln() - LM_EPS.ln())
        .collect();
    let radius = template.len() / 2;
    // per pixel: [best bin, 1.0 if the scores vary]
    let mut packed = vec![0.0; h * w * 2];
    par::for_each_chunk_mut(&mut packed, 2, |pix, out| {
        let hist = cube.pixel(pix / w, pix % w);
        let mut best_bin = 0usize;
        let mut best = f64::NEG_INFINITY;
        let mut worst = f64::INFINITY;
        for i in 0..bins {
            let mut score = 0.0;
            for (k, &t) in template.iter().enumerate() {
                let j = (i + k + bins * (radius / bins + 1) - radius) % bins;
                score += t * hist[j];
            }
            if score > best {
                best = score;
                best_bin = i;
            }
            worst = worst.min(score);
        }
        out[0] = best_bin as f64;
        out[1] = if best > worst { 1.0 } else { 0.0 };
    });
    let mut values = vec![0.0; h * w];
    let mut valid = vec![false; h * w];
    for pix in 0..h * w {
        valid[pix] = packed[pix * 2 + 1] > 0.0;
        values[pix] = if valid[pix] { packed[pix * 2] } else { 0.0 };
    }
    DepthMap::new(h, w, values, valid, DepthUnit::Bins).expect("bin indices are finite")
}

/// Per-pixel argmax depth; all-zero histograms are masked.
pub fn raw_argmax(cube: &TransientCube) -> DepthMap {
    depth_from_argmax(cube)
}
