//! Non-line-of-sight reconstruction head: separable-convolution transient
//! denoiser, frequency-wavenumber prior feature extraction, shallow/deep
//! fusion with max-projection readouts, and the three-term L1 loss.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ad::{BoundParams, Conv3dSpec, ConvTranspose3dSpec, ParameterSet, Tape, Tensor, Var};
use crate::attention::{build_stack, name_seed, trt_stack, AttentionConfig, AttnError, BlockModes};
use crate::data::{DepthMap, DepthUnit};
use crate::fk::{FkError, FkOperator};
use crate::trt_los::soft_argmax_depth;

#[derive(Debug, Error)]
pub enum NlosError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("dimension {dim} not divisible by {by}")]
    Indivisible { dim: usize, by: usize },
    #[error(transparent)]
    Fk(#[from] FkError),
    #[error(transparent)]
    Attn(#[from] AttnError),
}

/// Configuration of the NLOS model head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NlosModelConfig {
    /// Channel widths of the four standard denoiser convolutions.
    pub denoiser_channels: Vec<usize>,
    /// Whether the denoiser runs at all (ablation switch).
    pub use_denoiser: bool,
    /// Temporal downsample factor of the shallow extractor.
    pub temporal_down: usize,
    /// Number of encoder/decoder blocks.
    pub blocks: usize,
    /// Channel width of the feature volumes.
    pub channels: usize,
    /// Attention geometry applied at the deep (half-temporal) scale.
    pub attention: AttentionConfig,
    /// Encoder/decoder ablation switches.
    pub modes: BlockModes,
    /// Physical side length of the scanned wall patch.
    pub wall_extent_m: f64,
    /// Intensity loss weight.
    pub alpha: f64,
    /// Depth loss weight; a positive value enables the differentiable
    /// soft-argmax depth path during training.
    pub beta: f64,
    /// Softmax temperature of the soft depth readout.
    pub softmax_temp: f64,
}

impl Default for NlosModelConfig {
    fn default() -> Self {
        Self {
            denoiser_channels: vec![4, 8, 8, 8],
            use_denoiser: true,
            temporal_down: 4,
            blocks: 12,
            channels: 64,
            attention: AttentionConfig {
                heads: 4,
                p_s: 4,
                p_t: 4,
                s: 2,
                channels: 64,
            },
            modes: BlockModes::default(),
            wall_extent_m: 2.0,
            alpha: 1.0,
            beta: 1.0,
            softmax_temp: 1.0,
        }
    }
}

impl NlosModelConfig {
    pub fn validate(&self) -> Result<(), NlosError> {
        if self.denoiser_channels.len() != 4 || self.denoiser_channels.iter().any(|&c| c == 0) {
            return Err(NlosError::InvalidParameter(
                "denoiser ladder must list four positive channel widths".into(),
            ));
        }
        if self.temporal_down == 0 || !self.temporal_down.is_power_of_two() {
            return Err(NlosError::InvalidParameter(
                "temporal_down must be a power of two".into(),
            ));
        }
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(NlosError::InvalidParameter(
                "loss weights must be nonnegative".into(),
            ));
        }
        if self.wall_extent_m <= 0.0 {
            return Err(NlosError::InvalidParameter(
                "wall extent must be positive".into(),
            ));
        }
        if self.blocks == 0 || self.channels == 0 {
            return Err(NlosError::InvalidParameter(
                "blocks and channels must be positive".into(),
            ));
        }
        if self.attention.channels != self.channels {
            return Err(NlosError::InvalidParameter(
                "attention channel width must match model channels".into(),
            ));
        }
        Ok(())
    }
}

fn build_conv(
    ps: &mut ParameterSet,
    prefix: &str,
    co: usize,
    k: (usize, usize, usize),
    ci: usize,
    seed: u64,
) {
    let fan_in = (k.0 * k.1 * k.2 * ci) as f64;
    let s = name_seed(prefix, seed);
    ps.insert(
        &format!("{prefix}.w"),
        Tensor::randn(&[co, k.0, k.1, k.2, ci], 1.0 / fan_in.sqrt(), s),
    );
    ps.insert(&format!("{prefix}.b"), Tensor::zeros(&[co]));
}

/// One 3x3x3 filter per channel, stored as [C, 3, 3, 3].
fn build_depthwise(ps: &mut ParameterSet, prefix: &str, c: usize, seed: u64) {
    let s = name_seed(prefix, seed);
    ps.insert(
        &format!("{prefix}.w"),
        Tensor::randn(&[c, 3, 3, 3], 1.0 / 27f64.sqrt(), s),
    );
    ps.insert(&format!("{prefix}.b"), Tensor::zeros(&[c]));
}

/// Scalar parameters of one depthwise + pointwise pair from `ci` to `co`
/// channels, versus a standard 3x3x3 convolution of the same mapping.
pub fn separable_param_count(ci: usize, co: usize) -> (usize, usize) {
    let separable = 27 * ci + ci + ci * co + co;
    let standard = 27 * ci * co + co;
    (separable, standard)
}

/// Register every parameter of the NLOS model under `prefix`.
pub fn build_nlos_model(ps: &mut ParameterSet, prefix: &str, cfg: &NlosModelConfig, seed: u64) {
    let ch = &cfg.denoiser_channels;
    let mut ci = 1;
    for (i, &co) in ch.iter().enumerate() {
        build_conv(ps, &format!("{prefix}.dn.c{i}"), co, (3, 3, 3), ci, seed);
        ci = co;
    }
    let mid = ci / 2;
    build_depthwise(ps, &format!("{prefix}.dn.s0.dw"), ci, seed);
    build_conv(ps, &format!("{prefix}.dn.s0.pw"), mid, (1, 1, 1), ci, seed);
    build_depthwise(ps, &format!("{prefix}.dn.s1.dw"), mid, seed);
    build_conv(ps, &format!("{prefix}.dn.s1.pw"), 1, (1, 1, 1), mid, seed);

    let c = cfg.channels;
    build_conv(ps, &format!("{prefix}.ext.a"), c, (3, 3, 3), 1, seed);
    build_conv(ps, &format!("{prefix}.ext.b"), c, (3, 3, 3), c, seed);
    build_conv(ps, &format!("{prefix}.ext.r"), c, (3, 3, 3), c, seed);
    build_conv(ps, &format!("{prefix}.enh.a"), c / 2, (3, 3, 3), c, seed);
    build_conv(ps, &format!("{prefix}.enh.d"), c / 2, (3, 3, 3), c, seed);
    build_conv(ps, &format!("{prefix}.deep"), c, (3, 3, 3), c, seed);
    build_stack(ps, &format!("{prefix}.trt"), c, cfg.blocks, seed);
    // transposed temporal upsampling of each deep branch, then fusion
    let s = name_seed(&format!("{prefix}.up.l"), seed);
    ps.insert(
        &format!("{prefix}.up.l.w"),
        Tensor::randn(&[c, 1, 1, 2, c], 1.0 / (c as f64).sqrt(), s),
    );
    ps.insert(&format!("{prefix}.up.l.b"), Tensor::zeros(&[c]));
    let s = name_seed(&format!("{prefix}.up.g"), seed);
    ps.insert(
        &format!("{prefix}.up.g.w"),
        Tensor::randn(&[c, 1, 1, 2, c], 1.0 / (c as f64).sqrt(), s),
    );
    ps.insert(&format!("{prefix}.up.g.b"), Tensor::zeros(&[c]));
    build_conv(ps, &format!("{prefix}.fuse.a"), c, (3, 3, 3), 3 * c, seed);
    build_conv(ps, &format!("{prefix}.fuse.b"), 1, (1, 1, 1), c, seed);
}

fn conv(tape: &mut Tape, p: &BoundParams, prefix: &str, x: Var, spec: Conv3dSpec) -> Var {
    let w = p.var(&format!("{prefix}.w"));
    let b = p.var(&format!("{prefix}.b"));
    tape.conv3d(x, w, Some(b), spec)
}

/// Depthwise 3x3x3 convolution: channel c of the output sees only
/// channel c of the input.
fn depthwise_conv(tape: &mut Tape, p: &BoundParams, prefix: &str, x: Var) -> Var {
    let shape = tape.value(x).shape().to_vec();
    let (h, w, t, c) = (shape[0], shape[1], shape[2], shape[3]);
    let wv = p.var(&format!("{prefix}.w"));
    let bv = p.var(&format!("{prefix}.b"));
    let mut outs = Vec::with_capacity(c);
    for ch in 0..c {
        // slice channel ch of the volume and filter bank
        let mut xmap = Vec::with_capacity(h * w * t);
        for pos in 0..h * w * t {
            xmap.push(pos * c + ch);
        }
        let xc = tape.index_map(x, vec![h, w, t, 1], Arc::new(xmap));
        let mut wmap = Vec::with_capacity(27);
        for k in 0..27 {
            wmap.push(ch * 27 + k);
        }
        let wc = tape.index_map(wv, vec![1, 3, 3, 3, 1], Arc::new(wmap));
        let bc = tape.index_map(bv, vec![1], Arc::new(vec![ch]));
        let spec = Conv3dSpec {
            stride: (1, 1, 1),
            dilation: (1, 1, 1),
            padding: (1, 1, 1),
        };
        outs.push(tape.conv3d(xc, wc, Some(bc), spec));
    }
    tape.concat_lastdim(&outs)
}

/// Transient denoiser: four standard convolutions with rectifiers, two
/// depthwise-separable pairs back to one channel, a residual skip from
/// the input, and a final rectifier. Shape preserving, output nonnegative.
pub fn denoise(tape: &mut Tape, p: &BoundParams, prefix: &str, x: Var) -> Result<Var, NlosError> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 3 {
        return Err(NlosError::ShapeMismatch(format!(
            "denoiser expects [H, W, T], got {shape:?}"
        )));
    }
    let (h, w, t) = (shape[0], shape[1], shape[2]);
    let mut cur = tape.reshape(x, vec![h, w, t, 1]);
    let input = cur;
    let unit = Conv3dSpec {
        stride: (1, 1, 1),
        dilation: (1, 1, 1),
        padding: (1, 1, 1),
    };
    for i in 0..4 {
        cur = conv(tape, p, &format!("{prefix}.dn.c{i}"), cur, unit);
        cur = tape.relu(cur);
    }
    for s in 0..2 {
        cur = depthwise_conv(tape, p, &format!("{prefix}.dn.s{s}.dw"), cur);
        let pw = Conv3dSpec {
            stride: (1, 1, 1),
            dilation: (1, 1, 1),
            padding: (0, 0, 0),
        };
        cur = conv(tape, p, &format!("{prefix}.dn.s{s}.pw"), cur, pw);
        if s == 0 {
            cur = tape.relu(cur);
        }
    }
    let skip = tape.add(cur, input);
    let rect = tape.relu(skip);
    Ok(tape.reshape(rect, vec![h, w, t]))
}

/// Shallow extraction: residual convolutions with temporal downsampling
/// and channel expansion, a fixed frequency-wavenumber transform applied
/// per channel, then interlaced plain/dilated enhancement.
/// Returns (pre-enhancement, enhanced) feature volumes at H x W x T/down x C.
pub fn shallow_extract(
    tape: &mut Tape,
    p: &BoundParams,
    prefix: &str,
    x: Var,
    cfg: &NlosModelConfig,
    bin_width_ps: f64,
) -> Result<(Var, Var), NlosError> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 3 {
        return Err(NlosError::ShapeMismatch(format!(
            "extractor expects [H, W, T], got {shape:?}"
        )));
    }
    let (h, w, t) = (shape[0], shape[1], shape[2]);
    if h != w {
        return Err(NlosError::ShapeMismatch(format!(
            "scan grid must be square, got {h}x{w}"
        )));
    }
    if t % cfg.temporal_down != 0 {
        return Err(NlosError::Indivisible {
            dim: t,
            by: cfg.temporal_down,
        });
    }
    let half = cfg.temporal_down / 2;
    let vol = tape.reshape(x, vec![h, w, t, 1]);
    let mut cur = conv(
        tape,
        p,
        &format!("{prefix}.ext.a"),
        vol,
        Conv3dSpec {
            stride: (1, 1, half.max(1)),
            dilation: (1, 1, 1),
            padding: (1, 1, 1),
        },
    );
    cur = tape.gelu(cur);
    cur = conv(
        tape,
        p,
        &format!("{prefix}.ext.b"),
        cur,
        Conv3dSpec {
            stride: (1, 1, if half == 0 { 1 } else { 2 }),
            dilation: (1, 1, 1),
            padding: (1, 1, 1),
        },
    );
    cur = tape.gelu(cur);
    let res = conv(
        tape,
        p,
        &format!("{prefix}.ext.r"),
        cur,
        Conv3dSpec {
            stride: (1, 1, 1),
            dilation: (1, 1, 1),
            padding: (1, 1, 1),
        },
    );
    let pre = tape.add(cur, res);

    // fixed physics prior: migrate every channel to the spatial domain
    let t_down = t / cfg.temporal_down;
    let op = FkOperator::new(
        h,
        t_down,
        cfg.wall_extent_m,
        bin_width_ps * cfg.temporal_down as f64,
    )?;
    let f_star = tape.apply_linear_op(pre, Arc::new(op));

    let plain = conv(
        tape,
        p,
        &format!("{prefix}.enh.a"),
        f_star,
        Conv3dSpec {
            stride: (1, 1, 1),
            dilation: (1, 1, 1),
            padding: (1, 1, 1),
        },
    );
    let dil = conv(
        tape,
        p,
        &format!("{prefix}.enh.d"),
        f_star,
        Conv3dSpec {
            stride: (1, 1, 1),
            dilation: (2, 2, 2),
            padding: (2, 2, 2),
        },
    );
    let cat = tape.concat_lastdim(&[plain, dil]);
    let act = tape.gelu(cat);
    let f_s = tape.add(act, f_star);
    Ok((f_star, f_s))
}

/// Fusion and readout: transposed-convolution temporal upsampling of the
/// two deep branches to the shallow scale, channel concatenation,
/// convolutional fusion to a one-channel volume V, then
/// intensity = max_z V and a differentiable soft depth readout.
pub fn fuse_reconstruct(
    tape: &mut Tape,
    p: &BoundParams,
    prefix: &str,
    f_star: Var,
    f_local: Var,
    f_global: Var,
    softmax_temp: f64,
) -> Result<(Var, Var, Var), NlosError> {
    let ss = tape.value(f_star).shape().to_vec();
    let sl = tape.value(f_local).shape().to_vec();
    let sg = tape.value(f_global).shape().to_vec();
    if sl != sg {
        return Err(NlosError::ShapeMismatch(format!(
            "deep branches differ: {sl:?} vs {sg:?}"
        )));
    }
    if ss[0] != sl[0] || ss[1] != sl[1] || ss[2] != 2 * sl[2] || ss[3] != sl[3] {
        return Err(NlosError::ShapeMismatch(format!(
            "shallow {ss:?} is not the 2x temporal upsampling of deep {sl:?}"
        )));
    }
    let up = ConvTranspose3dSpec {
        stride: (1, 1, 2),
        padding: (0, 0, 0),
    };
    let wl = p.var(&format!("{prefix}.up.l.w"));
    let bl = p.var(&format!("{prefix}.up.l.b"));
    let ul = tape.conv_transpose3d(f_local, wl, Some(bl), up);
    let wg = p.var(&format!("{prefix}.up.g.w"));
    let bg = p.var(&format!("{prefix}.up.g.b"));
    let ug = tape.conv_transpose3d(f_global, wg, Some(bg), up);
    let cat = tape.concat_lastdim(&[f_star, ul, ug]);
    let mut cur = conv(
        tape,
        p,
        &format!("{prefix}.fuse.a"),
        cat,
        Conv3dSpec {
            stride: (1, 1, 1),
            dilation: (1, 1, 1),
            padding: (1, 1, 1),
        },
    );
    cur = tape.gelu(cur);
    let v4 = conv(
        tape,
        p,
        &format!("{prefix}.fuse.b"),
        cur,
        Conv3dSpec {
            stride: (1, 1, 1),
            dilation: (1, 1, 1),
            padding: (0, 0, 0),
        },
    );
    let vol = tape.reshape(v4, vec![ss[0], ss[1], ss[2]]);
    // soft-rectified max-projection: empty cells decay smoothly toward
    // zero response instead of back-driving the shared volume scale with
    // a constant-magnitude gradient
    let raw = tape.max_lastdim(vol);
    let intensity = tape.softplus(raw);
    let depth = soft_argmax_depth(tape, vol, softmax_temp);
    Ok((vol, intensity, depth))
}

/// Hard argmax depth readout of a reconstructed volume (tie breaks to
/// the lowest bin; every pixel is valid).
pub fn hard_argmax_depth(vol: &Tensor) -> DepthMap {
    let s = vol.shape();
    let (h, w, t) = (s[0], s[1], s[2]);
    let mut values = vec![0.0; h * w];
    for (pix, row) in vol.data().chunks(t).enumerate() {
        let mut best = 0;
        for (n, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = n;
            }
        }
        values[pix] = best as f64;
    }
    DepthMap::new(h, w, values, vec![true; h * w], DepthUnit::Bins)
        .expect("argmax indices are finite")
}

/// L = |rho - rho_hat|_1 + alpha |I - I_hat|_1 + beta |D - D_hat|_1, each
/// term mean-reduced; the depth term is evaluated on the reference mask.
#[allow(clippy::too_many_arguments)]
pub fn nlos_losses(
    tape: &mut Tape,
    rho_hat: Var,
    rho: &Tensor,
    i_hat: Var,
    intensity: &Tensor,
    d_hat: Var,
    depth: &Tensor,
    depth_mask: Option<&Tensor>,
    alpha: f64,
    beta: f64,
) -> Result<Var, NlosError> {
    for (name, got, want) in [
        (
            "measurement",
            tape.value(rho_hat).shape().to_vec(),
            rho.shape().to_vec(),
        ),
        (
            "intensity",
            tape.value(i_hat).shape().to_vec(),
            intensity.shape().to_vec(),
        ),
        (
            "depth",
            tape.value(d_hat).shape().to_vec(),
            depth.shape().to_vec(),
        ),
    ] {
        if got != want {
            return Err(NlosError::ShapeMismatch(format!(
                "{name}: {got:?} vs {want:?}"
            )));
        }
    }
    let lm = tape.l1_mean_masked(rho_hat, rho, None);
    let li = tape.l1_mean_masked(i_hat, intensity, None);
    let ld = tape.l1_mean_masked(d_hat, depth, depth_mask);
    let li_s = tape.scale(li, alpha);
    let ld_s = tape.scale(ld, beta);
    let part = tape.add(lm, li_s);
    Ok(tape.add(part, ld_s))
}

/// Everything the full forward pass produces.
pub struct NlosForward {
    /// Denoised measurement, [H, W, T].
    pub denoised: Var,
    /// Reconstructed volume, [H, W, T/down].
    pub volume: Var,
    /// Max-projection intensity, [H, W].
    pub intensity: Var,
    /// Soft-argmax depth in downsampled bin units, [H, W].
    pub depth: Var,
}

/// Full forward pass: denoise, shallow extraction with the fixed
/// migration prior, a strided deep stem, the encoder/decoder stack, and
/// fusion back to volume/intensity/depth readouts.
pub fn forward_trt_nlos(
    tape: &mut Tape,
    p: &BoundParams,
    prefix: &str,
    cube: Var,
    cfg: &NlosModelConfig,
    bin_width_ps: f64,
) -> Result<NlosForward, NlosError> {
    cfg.validate()?;
    let denoised = if cfg.use_denoiser {
        denoise(tape, p, prefix, cube)?
    } else {
        cube
    };
    let (f_star, f_s) = shallow_extract(tape, p, prefix, denoised, cfg, bin_width_ps)?;
    let deep_in = conv(
        tape,
        p,
        &format!("{prefix}.deep"),
        f_s,
        Conv3dSpec {
            stride: (1, 1, 2),
            dilation: (1, 1, 1),
            padding: (1, 1, 1),
        },
    );
    let ds = tape.value(deep_in).shape().to_vec();
    cfg.attention.validate(ds[0], ds[1], ds[2])?;
    let (f_l, f_g) = trt_stack(
        tape,
        p,
        &format!("{prefix}.trt"),
        deep_in,
        &cfg.attention,
        cfg.blocks,
        cfg.modes,
    )?;
    let (volume, intensity, depth) =
        fuse_reconstruct(tape, p, prefix, f_star, f_l, f_g, cfg.softmax_temp)?;
    Ok(NlosForward {
        denoised,
        volume,
        intensity,
        depth,
    })
}
