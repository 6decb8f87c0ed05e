//! Line-of-sight reconstruction head: convolutional feature extraction,
//! transformer encoder/decoder stack, pixelshuffle histogram prediction,
//! soft-argmax depth readout, and the KL + total-variation loss.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ad::{BoundParams, Conv3dSpec, ParameterSet, Tape, Tensor, Var};
use crate::attention::{
    build_linear, build_stack, trt_stack, AttentionConfig, AttnError, BlockModes,
};
use crate::data::{DepthMap, IntensityImage, TransientCube};

#[derive(Debug, Error)]
pub enum LosError {
    #[error("dimension {dim} not divisible by {by}")]
    Indivisible { dim: usize, by: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("per-pixel histogram sums must be 1 (pixel {pixel} sums to {sum})")]
    NotNormalized { pixel: usize, sum: f64 },
    #[error(transparent)]
    Attn(#[from] AttnError),
}

/// Configuration of the LOS model head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LosModelConfig {
    /// Spatial downsample factor of the extractor (power of two).
    pub spatial_down: usize,
    /// Total temporal downsample factor of the extractor (power of two).
    pub temporal_down: usize,
    /// Dilations of the interlaced convolution pairs.
    pub dilations: Vec<usize>,
    /// Number of encoder/decoder blocks.
    pub blocks: usize,
    /// Channel width of the feature volumes.
    pub channels: usize,
    /// Attention geometry applied to the extracted feature volume.
    pub attention: AttentionConfig,
    /// Encoder/decoder ablation switches.
    pub modes: BlockModes,
    /// Weight of the total-variation regularizer.
    pub gamma: f64,
    /// Softmax temperature of the depth readout.
    pub softmax_temp: f64,
}

impl Default for LosModelConfig {
    fn default() -> Self {
        Self {
            spatial_down: 2,
            temporal_down: 8,
            dilations: vec![1, 2],
            blocks: 12,
            channels: 64,
            attention: AttentionConfig {
                heads: 4,
                p_s: 4,
                p_t: 8,
                s: 2,
                channels: 64,
            },
            modes: BlockModes::default(),
            gamma: 1e-5,
            softmax_temp: 1.0,
        }
    }
}

impl LosModelConfig {
    pub fn validate(&self) -> Result<(), LosError> {
        for (name, v) in [
            ("spatial_down", self.spatial_down),
            ("temporal_down", self.temporal_down),
        ] {
            if v == 0 || !v.is_power_of_two() {
                return Err(LosError::InvalidParameter(format!(
                    "{name} must be a power of two, got {v}"
                )));
            }
        }
        if self.temporal_down < 2 {
            return Err(LosError::InvalidParameter(
                "temporal_down must be at least 2".into(),
            ));
        }
        if self.gamma < 0.0 {
            return Err(LosError::InvalidParameter(format!(
                "gamma must be nonnegative, got {}",
                self.gamma
            )));
        }
        if self.softmax_temp <= 0.0 {
            return Err(LosError::InvalidParameter(format!(
                "softmax_temp must be positive, got {}",
                self.softmax_temp
            )));
        }
        if self.channels % 16 != 0 {
            return Err(LosError::InvalidParameter(format!(
                "channels must be divisible by 16 for the pixelshuffle head, got {}",
                self.channels
            )));
        }
        if self.blocks == 0 {
            return Err(LosError::InvalidParameter("blocks must be positive".into()));
        }
        if self.attention.channels != self.channels {
            return Err(LosError::InvalidParameter(
                "attention channel width must match model channels".into(),
            ));
        }
        Ok(())
    }
}

fn conv_weight(co: usize, k: (usize, usize, usize), ci: usize, seed: u64) -> Tensor {
    let fan_in = (k.0 * k.1 * k.2 * ci) as f64;
    Tensor::randn(&[co, k.0, k.1, k.2, ci], 1.0 / fan_in.sqrt(), seed)
}

fn build_conv(
    ps: &mut ParameterSet,
    prefix: &str,
    co: usize,
    k: (usize, usize, usize),
    ci: usize,
    seed: u64,
) {
    let s = crate::attention::name_seed(prefix, seed);
    ps.insert(&format!("{prefix}.w"), conv_weight(co, k, ci, s));
    ps.insert(&format!("{prefix}.b"), Tensor::zeros(&[co]));
}

/// Register every parameter of the LOS model under `prefix`.
pub fn build_los_model(ps: &mut ParameterSet, prefix: &str, cfg: &LosModelConfig, seed: u64) {
    let c = cfg.channels;
    build_conv(ps, &format!("{prefix}.ext.down"), c, (3, 3, 3), 1, seed);
    for (i, _) in cfg.dilations.iter().enumerate() {
        build_conv(
            ps,
            &format!("{prefix}.ext.pair{i}.a"),
            c / 2,
            (3, 3, 3),
            c,
            seed,
        );
        build_conv(
            ps,
            &format!("{prefix}.ext.pair{i}.d"),
            c / 2,
            (3, 3, 3),
            c,
            seed,
        );
    }
    let tf = cfg.temporal_down / 2;
    build_conv(ps, &format!("{prefix}.ext.tdown"), c, (1, 1, tf), c, seed);
    build_stack(ps, &format!("{prefix}.trt"), c, cfg.blocks, seed);
    // branch TPF (÷4 channels each), concat (×2), then 3-D shuffle (÷8)
    build_linear(ps, &format!("{prefix}.head"), c / 16, 1, seed);
}

fn conv(tape: &mut Tape, p: &BoundParams, prefix: &str, x: Var, spec: Conv3dSpec) -> Var {
    let w = p.var(&format!("{prefix}.w"));
    let b = p.var(&format!("{prefix}.b"));
    tape.conv3d(x, w, Some(b), spec)
}

/// Convolutional front end: strided downsampling, interlaced standard and
/// dilated convolution pairs with channel concatenation, then a temporal
/// downsampling convolution. Input [H, W, T, 1] yields
/// [H/spatial, W/spatial, T/temporal, C].
pub fn feature_extract_los(
    tape: &mut Tape,
    p: &BoundParams,
    prefix: &str,
    x: Var,
    cfg: &LosModelConfig,
) -> Result<Var, LosError> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 4 || shape[3] != 1 {
        return Err(LosError::ShapeMismatch(format!(
            "extractor expects [H, W, T, 1], got {shape:?}"
        )));
    }
    let (h, w, t) = (shape[0], shape[1], shape[2]);
    for (dim, by) in [
        (h, cfg.spatial_down),
        (w, cfg.spatial_down),
        (t, cfg.temporal_down),
    ] {
        if dim % by != 0 {
            return Err(LosError::Indivisible { dim, by });
        }
    }
    let sd = cfg.spatial_down;
    let mut cur = conv(
        tape,
        p,
        &format!("{prefix}.ext.down"),
        x,
        Conv3dSpec {
            stride: (sd, sd, 2),
            dilation: (1, 1, 1),
            padding: (1, 1, 1),
        },
    );
    cur = tape.gelu(cur);
    for (i, &dil) in cfg.dilations.iter().enumerate() {
        let plain = conv(
            tape,
            p,
            &format!("{prefix}.ext.pair{i}.a"),
            cur,
            Conv3dSpec {
                stride: (1, 1, 1),
                dilation: (1, 1, 1),
                padding: (1, 1, 1),
            },
        );
        let dilated = conv(
            tape,
            p,
            &format!("{prefix}.ext.pair{i}.d"),
            cur,
            Conv3dSpec {
                stride: (1, 1, 1),
                dilation: (dil, dil, dil),
                padding: (dil, dil, dil),
            },
        );
        let cat = tape.concat_lastdim(&[plain, dilated]);
        cur = tape.gelu(cat);
    }
    let tfactor = cfg.temporal_down / 2;
    Ok(conv(
        tape,
        p,
        &format!("{prefix}.ext.tdown"),
        cur,
        Conv3dSpec {
            stride: (1, 1, tfactor),
            dilation: (1, 1, 1),
            padding: (0, 0, 0),
        },
    ))
}

fn shuffle_map(
    tape: &mut Tape,
    x: Var,
    out_shape: Vec<usize>,
    f: impl Fn(usize, usize, usize, usize) -> usize,
) -> Var {
    let (oh, ow, ot, oc) = (out_shape[0], out_shape[1], out_shape[2], out_shape[3]);
    let mut map = Vec::with_capacity(oh * ow * ot * oc);
    for h in 0..oh {
        for w in 0..ow {
            for t in 0..ot {
                for c in 0..oc {
                    map.push(f(h, w, t, c));
                }
            }
        }
    }
    tape.index_map(x, out_shape, Arc::new(map))
}

/// Trade channels for temporal resolution:
/// (H, W, T, C) -> (H, W, T·r, C/r) with out[h,w,t',c'] = in[h,w,t'/r, c'·r + t'%r].
pub fn temporal_pixelshuffle(tape: &mut Tape, x: Var, r: usize) -> Result<Var, LosError> {
    let s = tape.value(x).shape().to_vec();
    if s.len() != 4 {
        return Err(LosError::ShapeMismatch(format!(
            "expected 4-D volume, got {s:?}"
        )));
    }
    if s[3] % r != 0 {
        return Err(LosError::Indivisible { dim: s[3], by: r });
    }
    let (w_in, t_in, c_in) = (s[1], s[2], s[3]);
    let out = vec![s[0], s[1], s[2] * r, s[3] / r];
    Ok(shuffle_map(tape, x, out, |h, w, t, c| {
        ((h * w_in + w) * t_in + t / r) * c_in + c * r + t % r
    }))
}

/// Inverse of [`temporal_pixelshuffle`].
pub fn temporal_pixelunshuffle(tape: &mut Tape, x: Var, r: usize) -> Result<Var, LosError> {
    let s = tape.value(x).shape().to_vec();
    if s.len() != 4 {
        return Err(LosError::ShapeMismatch(format!(
            "expected 4-D volume, got {s:?}"
        )));
    }
    if s[2] % r != 0 {
        return Err(LosError::Indivisible { dim: s[2], by: r });
    }
    let (w_in, t_in, c_in) = (s[1], s[2], s[3]);
    let out = vec![s[0], s[1], s[2] / r, s[3] * r];
    Ok(shuffle_map(tape, x, out, |h, w, t, c| {
        // out channel c = c_src·r + t_off where source time is t·r + t_off
        ((h * w_in + w) * t_in + t * r + c % r) * c_in + c / r
    }))
}

/// Trade channels for resolution on all three axes:
/// (H, W, T, C) -> (rH, rW, rT, C/r³) with
/// out[h',w',t',c'] = in[h'/r, w'/r, t'/r, c'·r³ + ((h'%r·r + w'%r)·r + t'%r)].
pub fn pixelshuffle_3d(tape: &mut Tape, x: Var, r: usize) -> Result<Var, LosError> {
    let s = tape.value(x).shape().to_vec();
    if s.len() != 4 {
        return Err(LosError::ShapeMismatch(format!(
            "expected 4-D volume, got {s:?}"
        )));
    }
    let r3 = r * r * r;
    if s[3] % r3 != 0 {
        return Err(LosError::Indivisible { dim: s[3], by: r3 });
    }
    let (w_in, t_in, c_in) = (s[1], s[2], s[3]);
    let out = vec![s[0] * r, s[1] * r, s[2] * r, s[3] / r3];
    Ok(shuffle_map(tape, x, out, |h, w, t, c| {
        let off = ((h % r) * r + w % r) * r + t % r;
        (((h / r) * w_in + w / r) * t_in + t / r) * c_in + c * r3 + off
    }))
}

/// Inverse of [`pixelshuffle_3d`].
pub fn pixelunshuffle_3d(tape: &mut Tape, x: Var, r: usize) -> Result<Var, LosError> {
    let s = tape.value(x).shape().to_vec();
    if s.len() != 4 {
        return Err(LosError::ShapeMismatch(format!(
            "expected 4-D volume, got {s:?}"
        )));
    }
    let r3 = r * r * r;
    for (dim, by) in [(s[0], r), (s[1], r), (s[2], r)] {
        if dim % by != 0 {
            return Err(LosError::Indivisible { dim, by });
        }
    }
    let (w_in, t_in, c_in) = (s[1], s[2], s[3]);
    let out = vec![s[0] / r, s[1] / r, s[2] / r, s[3] * r3];
    Ok(shuffle_map(tape, x, out, |h, w, t, c| {
        let off = c % r3;
        let (ho, rem) = (off / (r * r), off % (r * r));
        let (wo, to) = (rem / r, rem % r);
        ((h * r + ho) * w_in + (w * r + wo)) * t_in * c_in + (t * r + to) * c_in + c / r3
    }))
}

/// Fuse the two decoder outputs into a per-pixel transient distribution at
/// the input resolution: temporal pixelshuffle each branch, concatenate,
/// 3-D pixelshuffle back to full resolution, project to one channel, then
/// softplus and per-pixel normalization. Output shape [H, W, T].
pub fn predict_histogram(
    tape: &mut Tape,
    p: &BoundParams,
    prefix: &str,
    f_local: Var,
    f_global: Var,
) -> Result<Var, LosError> {
    let sl = tape.value(f_local).shape().to_vec();
    let sg = tape.value(f_global).shape().to_vec();
    if sl != sg {
        return Err(LosError::ShapeMismatch(format!(
            "deep features differ: {sl:?} vs {sg:?}"
        )));
    }
    let a = temporal_pixelshuffle(tape, f_local, 4)?;
    let b = temporal_pixelshuffle(tape, f_global, 4)?;
    let cat = tape.concat_lastdim(&[a, b]);
    let full = pixelshuffle_3d(tape, cat, 2)?;
    let w = p.var(&format!("{prefix}.head.w"));
    let bias = p.var(&format!("{prefix}.head.b"));
    let proj = tape.linear(full, w, Some(bias));
    let s = tape.value(proj).shape().to_vec();
    let flat = tape.reshape(proj, vec![s[0], s[1], s[2]]);
    let pos = tape.softplus(flat);
    Ok(tape.normalize_lastdim(pos, 0.0))
}

/// Differentiable depth readout: D[p] = Σ_n n · softmax(x[p]/temp)[n].
pub fn soft_argmax_depth(tape: &mut Tape, x: Var, temp: f64) -> Var {
    let shape = tape.value(x).shape().to_vec();
    let t = *shape.last().unwrap();
    let scaled = tape.scale(x, 1.0 / temp);
    let soft = tape.softmax_lastdim(scaled);
    let weights: Vec<f64> = (0..t).map(|n| n as f64).collect();
    tape.dot_const_lastdim(soft, Arc::new(weights))
}

fn check_normalized(hist: &Tensor) -> Result<(), LosError> {
    let t = *hist.shape().last().unwrap();
    for (pixel, row) in hist.data().chunks(t).enumerate() {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(LosError::NotNormalized { pixel, sum });
        }
    }
    Ok(())
}

/// Mean per-pixel KL divergence between predicted and reference transient
/// distributions, with an epsilon floor on both before the logarithm.
pub const KL_EPS: f64 = 1e-8;

pub fn kl_loss(tape: &mut Tape, pred: Var, gt: &Tensor) -> Result<Var, LosError> {
    check_normalized(tape.value(pred))?;
    check_normalized(gt)?;
    Ok(tape.kl_mean_lastdim(pred, gt, KL_EPS))
}

/// Anisotropic 2-D total variation of a depth map (mean absolute
/// neighbor difference over both axes).
pub fn tv_loss(tape: &mut Tape, depth: Var) -> Var {
    tape.tv2d(depth)
}

/// L = L_KL + γ·L_TV.
pub fn los_total_loss(
    tape: &mut Tape,
    pred_hist: Var,
    gt_hist: &Tensor,
    depth: Var,
    gamma: f64,
) -> Result<Var, LosError> {
    let kl = kl_loss(tape, pred_hist, gt_hist)?;
    let tv = tv_loss(tape, depth);
    let tv_scaled = tape.scale(tv, gamma);
    Ok(tape.add(kl, tv_scaled))
}

/// Mask depth pixels whose predicted reflectivity falls strictly below
/// the image mean.
pub fn reflectivity_threshold_filter(
    depth: &DepthMap,
    intensity: &IntensityImage,
) -> Result<DepthMap, LosError> {
    if depth.height() != intensity.height() || depth.width() != intensity.width() {
        return Err(LosError::ShapeMismatch(format!(
            "depth {}x{} vs intensity {}x{}",
            depth.height(),
            depth.width(),
            intensity.height(),
            intensity.width()
        )));
    }
    let n = intensity.values.len();
    let mean = intensity.values.iter().sum::<f64>() / n as f64;
    let mut out = depth.clone();
    for (i, &v) in intensity.values.iter().enumerate() {
        if v < mean {
            out.valid[i] = false;
        }
    }
    Ok(out)
}

/// Full forward pass: extraction, encoder/decoder stack, histogram
/// prediction, and soft-argmax depth (in bin units).
pub fn forward_trt_los(
    tape: &mut Tape,
    p: &BoundParams,
    prefix: &str,
    cube: Var,
    cfg: &LosModelConfig,
) -> Result<(Var, Var), LosError> {
    cfg.validate()?;
    let s = tape.value(cube).shape().to_vec();
    if s.len() != 3 {
        return Err(LosError::ShapeMismatch(format!(
            "expected [H, W, T] transient volume, got {s:?}"
        )));
    }
    let x = tape.reshape(cube, vec![s[0], s[1], s[2], 1]);
    let feat = feature_extract_los(tape, p, prefix, x, cfg)?;
    let fs = tape.value(feat).shape().to_vec();
    cfg.attention.validate(fs[0], fs[1], fs[2])?;
    let (f_l, f_g) = trt_stack(
        tape,
        p,
        &format!("{prefix}.trt"),
        feat,
        &cfg.attention,
        cfg.blocks,
        cfg.modes,
    )?;
    let hist = predict_histogram(tape, p, prefix, f_l, f_g)?;
    let depth = soft_argmax_depth(tape, hist, cfg.softmax_temp);
    Ok((hist, depth))
}

/// Tensor view of a transient cube's values as [H, W, T].
pub fn cube_tensor(cube: &TransientCube) -> Tensor {
    Tensor::from_vec(
        vec![cube.height(), cube.width(), cube.bins()],
        cube.values().to_vec(),
    )
}

/// Non-differentiable depth map from a predicted histogram tensor.
pub fn depth_map_from_hist(hist: &Tensor, bin_width_ps: f64) -> DepthMap {
    let (h, w, t) = (hist.shape()[0], hist.shape()[1], hist.shape()[2]);
    let cube = TransientCube::new(
        h,
        w,
        t,
        bin_width_ps,
        crate::data::CubeKind::Rates,
        hist.data().to_vec(),
    )
    .expect("histogram is a valid rate cube");
    crate::data::depth_from_argmax(&cube)
}
