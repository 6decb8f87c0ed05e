//! Frequency-wavenumber (Stolt) migration: refocuses a confocal transient
//! cube into a spatial volume by resampling the temporal frequency axis
//! onto the dispersion surface, with an exact adjoint for backprop.

use std::sync::Arc;

use num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

use crate::ad::{LinearOp, Tensor};
use crate::data::TransientCube;
use crate::SPEED_OF_LIGHT;

#[derive(Debug, Error)]
pub enum FkError {
    #[error("spatial grid must be square, got {0}x{1}")]
    NonSquareGrid(usize, usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// One row of the spectral resampling: an output frequency sample drawn
/// from up to two input samples on the same (kx, ky) line.
#[derive(Clone, Copy, Debug)]
struct Stencil {
    src0: u32,
    w0: f64,
    src1: u32,
    w1: f64,
}

const ZERO_STENCIL: Stencil = Stencil {
    src0: 0,
    w0: 0.0,
    src1: 0,
    w1: 0.0,
};

/// Precomputed migration for a fixed grid: FFT plans plus the sparse
/// real-weighted Stolt interpolation over the spectrum.
pub struct FkOperator {
    n: usize,
    t: usize,
    stencils: Vec<Stencil>,
    fft_n_fwd: Arc<dyn Fft<f64>>,
    fft_n_inv: Arc<dyn Fft<f64>>,
    fft_t_fwd: Arc<dyn Fft<f64>>,
    fft_t_inv: Arc<dyn Fft<f64>>,
}

fn signed_freq(i: usize, len: usize) -> i64 {
    if i <= len / 2 {
        i as i64
    } else {
        i as i64 - len as i64
    }
}

impl FkOperator {
    pub fn new(n: usize, t: usize, wall_extent_m: f64, bin_width_ps: f64) -> Result<Self, FkError> {
        if n == 0 || t == 0 {
            return Err(FkError::InvalidParameter("empty grid".into()));
        }
        if !(wall_extent_m > 0.0) || !(bin_width_ps > 0.0) {
            return Err(FkError::InvalidParameter(
                "extent and bin width must be positive".into(),
            ));
        }
        let dx = wall_extent_m / n as f64;
        let dz = bin_width_ps * 1e-12 * SPEED_OF_LIGHT / 2.0;
        // physical frequency steps per index along each axis
        let fx_step = 1.0 / (n as f64 * dx);
        let fz_step = 1.0 / (t as f64 * dz);
        let nyquist = t as f64 / 2.0;
        let mut stencils = vec![ZERO_STENCIL; n * n * t];
        for ix in 0..n {
            let kx = signed_freq(ix, n) as f64 * fx_step;
            for iy in 0..n {
                let ky = signed_freq(iy, n) as f64 * fx_step;
                let base = (ix * n + iy) * t;
                for iz in 0..t {
                    let kzi = signed_freq(iz, t);
                    if kzi == 0 {
                        continue; // Jacobian vanishes on the kz = 0 plane
                    }
                    let kz = kzi as f64 * fz_step;
                    let mag = (kx * kx + ky * ky + kz * kz).sqrt();
                    let f = kz.signum() * mag;
                    let pos = f / fz_step; // fractional source index
                    if pos.abs() > nyquist {
                        continue; // outside the measured band
                    }
                    let jac = kz.abs() / mag;
                    let i0 = pos.floor();
                    let frac = pos - i0;
                    let wrap = |k: i64| (((k % t as i64) + t as i64) % t as i64) as u32;
                    let s0 = wrap(i0 as i64);
                    let s1 = wrap(i0 as i64 + 1);
                    stencils[base + iz] = Stencil {
                        src0: base as u32 + s0,
                        w0: jac * (1.0 - frac),
                        src1: base as u32 + s1,
                        w1: jac * frac,
                    };
                }
            }
        }
        let mut planner = FftPlanner::new();
        Ok(Self {
            n,
            t,
            stencils,
            fft_n_fwd: planner.plan_fft_forward(n),
            fft_n_inv: planner.plan_fft_inverse(n),
            fft_t_fwd: planner.plan_fft_forward(t),
            fft_t_inv: planner.plan_fft_inverse(t),
        })
    }

    pub fn spatial(&self) -> usize {
        self.n
    }
    pub fn bins(&self) -> usize {
        self.t
    }

    fn fft3(&self, data: &mut [Complex<f64>], inverse: bool) {
        let (n, t) = (self.n, self.t);
        let (fn_, ft) = if inverse {
            (&self.fft_n_inv, &self.fft_t_inv)
        } else {
            (&self.fft_n_fwd, &self.fft_t_fwd)
        };
        // along t: contiguous rows
        let mut scratch = vec![Complex::default(); ft.get_inplace_scratch_len()];
        for row in data.chunks_exact_mut(t) {
            ft.process_with_scratch(row, &mut scratch);
        }
        // along w and h: gather strided lines into a temp buffer
        let mut scratch = vec![Complex::default(); fn_.get_inplace_scratch_len()];
        let mut line = vec![Complex::default(); n];
        for ix in 0..n {
            for iz in 0..t {
                for iy in 0..n {
                    line[iy] = data[(ix * n + iy) * t + iz];
                }
                fn_.process_with_scratch(&mut line, &mut scratch);
                for iy in 0..n {
                    data[(ix * n + iy) * t + iz] = line[iy];
                }
            }
        }
        for iy in 0..n {
            for iz in 0..t {
                for ix in 0..n {
                    line[ix] = data[(ix * n + iy) * t + iz];
                }
                fn_.process_with_scratch(&mut line, &mut scratch);
                for ix in 0..n {
                    data[(ix * n + iy) * t + iz] = line[ix];
                }
            }
        }
    }

    fn run(&self, input: &[f64], transpose: bool) -> Vec<f64> {
        assert_eq!(input.len(), self.n * self.n * self.t);
        let mut spec: Vec<Complex<f64>> = input.iter().map(|&v| Complex::new(v, 0.0)).collect();
        self.fft3(&mut spec, false);
        let mut out = vec![Complex::default(); spec.len()];
        if transpose {
            for (dst, s) in self.stencils.iter().enumerate() {
                if s.w0 != 0.0 || s.w1 != 0.0 {
                    let v = spec[dst];
                    out[s.src0 as usize] += v * s.w0;
                    out[s.src1 as usize] += v * s.w1;
                }
            }
        } else {
            for (dst, s) in self.stencils.iter().enumerate() {
                if s.w0 != 0.0 || s.w1 != 0.0 {
                    out[dst] = spec[s.src0 as usize] * s.w0 + spec[s.src1 as usize] * s.w1;
                }
            }
        }
        self.fft3(&mut out, true);
        let norm = 1.0 / (self.n * self.n * self.t) as f64;
        out.iter().map(|c| c.re * norm).collect()
    }

    /// Migrate one channel laid out `[h][w][t]` into a `[h][w][z]` volume
    /// on the same grid (z step = c * bin width / 2).
    pub fn migrate(&self, data: &[f64]) -> Vec<f64> {
        self.run(data, false)
    }

    /// Exact adjoint of `migrate` (same spectral map, transposed).
    pub fn migrate_adjoint(&self, grad: &[f64]) -> Vec<f64> {
        self.run(grad, true)
    }
}

impl LinearOp for FkOperator {
    /// Channelwise application on a `[H, W, T, C]` feature volume.
    fn forward(&self, x: &Tensor) -> Tensor {
        self.apply_channels(x, false)
    }

    fn adjoint(&self, g: &Tensor) -> Tensor {
        self.apply_channels(g, true)
    }
}

impl FkOperator {
    fn apply_channels(&self, x: &Tensor, transpose: bool) -> Tensor {
        let shape = x.shape().to_vec();
        assert_eq!(shape.len(), 4, "expected [H, W, T, C]");
        let (h, w, t, c) = (shape[0], shape[1], shape[2], shape[3]);
        assert_eq!(h, self.n);
        assert_eq!(w, self.n);
        assert_eq!(t, self.t);
        let src = x.data();
        let mut out = vec![0.0; src.len()];
        let mut chan = vec![0.0; h * w * t];
        for ch in 0..c {
            for i in 0..h * w * t {
                chan[i] = src[i * c + ch];
            }
            let mig = self.run(&chan, transpose);
            for i in 0..h * w * t {
                out[i * c + ch] = mig[i];
            }
        }
        Tensor::from_vec(shape, out)
    }
}

/// Migrate a measured cube; the volume shares the cube's grid with the
/// third axis reinterpreted as depth z = c t / 2.
pub fn fk_migration(cube: &TransientCube, wall_extent_m: f64) -> Result<Vec<f64>, FkError> {
    if cube.height() != cube.width() {
        return Err(FkError::NonSquareGrid(cube.height(), cube.width()));
    }
    let op = FkOperator::new(
        cube.height(),
        cube.bins(),
        wall_extent_m,
        cube.bin_width_ps(),
    )?;
    Ok(op.migrate(cube.values()))
}
