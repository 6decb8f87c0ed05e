//! Spatio-temporal attention operators: windowed local and downsampled
//! global self-attention encoders, token-space cross-attention decoders,
//! and the stacked block that both reconstruction heads share.
//!
//! Feature volumes are `[H, W, T, C]` tensors (channels fastest).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ad::{BoundParams, ParameterSet, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum AttnError {
    #[error("dimension {dim} = {value} not divisible by {by}")]
    Indivisible {
        dim: &'static str,
        value: usize,
        by: usize,
    },
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("checkpoint: bad magic")]
    BadMagic,
    #[error("checkpoint: unsupported version {0}")]
    VersionMismatch(u16),
    #[error("checkpoint: truncated")]
    Truncated,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub heads: usize,
    /// Side of a spatial attention window.
    pub p_s: usize,
    /// Length of a temporal attention window.
    pub p_t: usize,
    /// Spatial downsample factor of the global branch.
    pub s: usize,
    pub channels: usize,
}

impl AttentionConfig {
    pub fn validate(&self, h: usize, w: usize, t: usize) -> Result<(), AttnError> {
        if self.heads == 0 || self.channels == 0 || self.p_s == 0 || self.p_t == 0 || self.s == 0 {
            return Err(AttnError::BadConfig(
                "all config fields must be >= 1".into(),
            ));
        }
        if self.channels % self.heads != 0 {
            return Err(AttnError::Indivisible {
                dim: "channels",
                value: self.channels,
                by: self.heads,
            });
        }
        for (dim, value, by) in [
            ("height", h, self.p_s),
            ("width", w, self.p_s),
            ("bins", t, self.p_t),
            ("height", h, self.s),
            ("width", w, self.s),
        ] {
            if value % by != 0 {
                return Err(AttnError::Indivisible { dim, value, by });
            }
        }
        Ok(())
    }
}

/// Which branches exchange information in the cross-attention decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum IntegrationMode {
    NoInt,
    LocInt,
    GloInt,
    LgInt,
}

impl std::str::FromStr for IntegrationMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "noint" => Ok(Self::NoInt),
            "locint" => Ok(Self::LocInt),
            "gloint" => Ok(Self::GloInt),
            "lgint" => Ok(Self::LgInt),
            other => Err(format!("unknown integration mode {other:?}")),
        }
    }
}

/// Which attention axes the encoders use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionDims {
    SpatialOnly,
    TemporalOnly,
    Both,
}

impl std::str::FromStr for AttentionDims {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "s-only" | "spatial" => Ok(Self::SpatialOnly),
            "t-only" | "temporal" => Ok(Self::TemporalOnly),
            "both" => Ok(Self::Both),
            other => Err(format!("unknown attention dims {other:?}")),
        }
    }
}

/// Per-block toggles; the defaults reproduce the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockModes {
    pub integration: IntegrationMode,
    pub dims: AttentionDims,
}

impl Default for BlockModes {
    fn default() -> Self {
        Self {
            integration: IntegrationMode::LgInt,
            dims: AttentionDims::Both,
        }
    }
}

// ---------------------------------------------------------------------------
// window partitions

fn build_partition_maps(
    h: usize,
    w: usize,
    t: usize,
    c: usize,
    p_s: usize,
) -> (Vec<usize>, Arc<Vec<usize>>, Arc<Vec<usize>>) {
    let (nh, nw) = (h / p_s, w / p_s);
    let total = h * w * t * c;
    let mut fwd = vec![0usize; total];
    let mut inv = vec![0usize; total];
    let mut out = 0usize;
    for win in 0..nh * nw {
        let (wh, ww) = (win / nw, win % nw);
        for i in 0..p_s {
            for j in 0..p_s {
                let (hh, wc) = (wh * p_s + i, ww * p_s + j);
                let base_in = (hh * w + wc) * t * c;
                for k in 0..t * c {
                    fwd[out] = base_in + k;
                    inv[base_in + k] = out;
                    out += 1;
                }
            }
        }
    }
    (vec![nh * nw, p_s, p_s, t, c], Arc::new(fwd), Arc::new(inv))
}

/// Split `[H, W, T, C]` into `[N_s, P_s, P_s, T, C]` windows.
pub fn window_partition_spatial(tape: &mut Tape, x: Var, p_s: usize) -> Result<Var, AttnError> {
    let shape = tape.value(x).shape().to_vec();
    let (h, w, t, c) = (shape[0], shape[1], shape[2], shape[3]);
    if h % p_s != 0 {
        return Err(AttnError::Indivisible {
            dim: "height",
            value: h,
            by: p_s,
        });
    }
    if w % p_s != 0 {
        return Err(AttnError::Indivisible {
            dim: "width",
            value: w,
            by: p_s,
        });
    }
    let (out_shape, fwd, _) = build_partition_maps(h, w, t, c, p_s);
    Ok(tape.index_map(x, out_shape, fwd))
}

/// Inverse of `window_partition_spatial`.
pub fn window_stitch_spatial(
    tape: &mut Tape,
    windows: Var,
    h: usize,
    w: usize,
) -> Result<Var, AttnError> {
    let shape = tape.value(windows).shape().to_vec();
    let (p_s, t, c) = (shape[1], shape[3], shape[4]);
    if shape[0] * p_s * p_s != h * w || shape[2] != p_s {
        return Err(AttnError::BadConfig(
            "window shape inconsistent with target".into(),
        ));
    }
    let (_, _, inv) = build_partition_maps(h, w, t, c, p_s);
    Ok(tape.index_map(windows, vec![h, w, t, c], inv))
}

fn build_temporal_maps(
    h: usize,
    w: usize,
    t: usize,
    c: usize,
    p_t: usize,
) -> (Vec<usize>, Arc<Vec<usize>>, Arc<Vec<usize>>) {
    let nt = t / p_t;
    let total = h * w * t * c;
    let mut fwd = vec![0usize; total];
    let mut inv = vec![0usize; total];
    let mut out = 0usize;
    for win in 0..nt {
        for hw in 0..h * w {
            for i in 0..p_t {
                let base_in = (hw * t + win * p_t + i) * c;
                for ch in 0..c {
                    fwd[out] = base_in + ch;
                    inv[base_in + ch] = out;
                    out += 1;
                }
            }
        }
    }
    (vec![nt, h, w, p_t, c], Arc::new(fwd), Arc::new(inv))
}

/// Split `[H, W, T, C]` into `[N_t, H, W, P_t, C]` temporal windows.
pub fn window_partition_temporal(tape: &mut Tape, x: Var, p_t: usize) -> Result<Var, AttnError> {
    let shape = tape.value(x).shape().to_vec();
    let (h, w, t, c) = (shape[0], shape[1], shape[2], shape[3]);
    if t % p_t != 0 {
        return Err(AttnError::Indivisible {
            dim: "bins",
            value: t,
            by: p_t,
        });
    }
    let (out_shape, fwd, _) = build_temporal_maps(h, w, t, c, p_t);
    Ok(tape.index_map(x, out_shape, fwd))
}

/// Inverse of `window_partition_temporal`.
pub fn window_stitch_temporal(tape: &mut Tape, windows: Var, t: usize) -> Result<Var, AttnError> {
    let shape = tape.value(windows).shape().to_vec();
    let (h, w, p_t, c) = (shape[1], shape[2], shape[3], shape[4]);
    if shape[0] * p_t != t {
        return Err(AttnError::BadConfig(
            "window count inconsistent with target".into(),
        ));
    }
    let (_, _, inv) = build_temporal_maps(h, w, t, c, p_t);
    Ok(tape.index_map(windows, vec![h, w, t, c], inv))
}

// ---------------------------------------------------------------------------
// parameter construction

pub(crate) fn name_seed(name: &str, seed: u64) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h ^ seed.wrapping_mul(0x9e3779b97f4a7c15)
}

/// Insert a linear layer `{prefix}.w` `[e_in, e_out]` (scaled normal
/// init) and `{prefix}.b` (zeros).
pub fn build_linear(ps: &mut ParameterSet, prefix: &str, e_in: usize, e_out: usize, seed: u64) {
    let std = 1.0 / (e_in as f64).sqrt();
    ps.insert(
        format!("{prefix}.w"),
        Tensor::randn(&[e_in, e_out], std, name_seed(prefix, seed)),
    );
    ps.insert(format!("{prefix}.b"), Tensor::zeros(&[e_out]));
}

fn build_ln(ps: &mut ParameterSet, prefix: &str, e: usize) {
    ps.insert(format!("{prefix}.g"), Tensor::filled(&[e], 1.0));
    ps.insert(format!("{prefix}.b"), Tensor::zeros(&[e]));
}

/// Multi-head self-attention parameters with a pre-norm.
pub fn build_msa(ps: &mut ParameterSet, prefix: &str, e: usize, seed: u64) {
    build_ln(ps, &format!("{prefix}.ln"), e);
    for proj in ["wq", "wk", "wv", "wo"] {
        build_linear(ps, &format!("{prefix}.{proj}"), e, e, seed);
    }
}

/// Feed-forward sublayer parameters (pre-norm, hidden 4C).
pub fn build_ffn(ps: &mut ParameterSet, prefix: &str, c: usize, seed: u64) {
    build_ln(ps, &format!("{prefix}.ln"), c);
    build_linear(ps, &format!("{prefix}.w1"), c, 4 * c, seed);
    build_linear(ps, &format!("{prefix}.w2"), 4 * c, c, seed);
}

/// One self-attention encoder branch: spatial MSA, temporal MSA, FFN.
pub fn build_stsa(ps: &mut ParameterSet, prefix: &str, c: usize, seed: u64) {
    build_msa(ps, &format!("{prefix}.sp"), c, seed);
    build_msa(ps, &format!("{prefix}.tm"), c, seed);
    build_ffn(ps, &format!("{prefix}.ffn"), c, seed);
}

/// Cross-attention projections (1x1x1 convolutions over channels).
pub fn build_stca(ps: &mut ParameterSet, prefix: &str, c: usize, seed: u64) {
    for proj in ["q", "k", "v", "k2", "v2"] {
        build_linear(ps, &format!("{prefix}.{proj}"), c, c, seed);
    }
}

/// Decoder: two cross-attention paths, each followed by an FFN sublayer.
pub fn build_decoder(ps: &mut ParameterSet, prefix: &str, c: usize, seed: u64) {
    build_stca(ps, &format!("{prefix}.l.stca"), c, seed);
    build_ffn(ps, &format!("{prefix}.l.ffn"), c, seed);
    build_stca(ps, &format!("{prefix}.g.stca"), c, seed);
    build_ffn(ps, &format!("{prefix}.g.ffn"), c, seed);
}

/// One full block: local + global encoders, decoder, fusion projection.
pub fn build_block(ps: &mut ParameterSet, prefix: &str, c: usize, seed: u64) {
    build_stsa(ps, &format!("{prefix}.local"), c, seed);
    build_stsa(ps, &format!("{prefix}.global"), c, seed);
    build_decoder(ps, &format!("{prefix}.dec"), c, seed);
    build_linear(ps, &format!("{prefix}.fuse"), 2 * c, c, seed);
}

/// A stack of `blocks` blocks under `{prefix}.block{i}`.
pub fn build_stack(ps: &mut ParameterSet, prefix: &str, c: usize, blocks: usize, seed: u64) {
    for i in 0..blocks {
        build_block(ps, &format!("{prefix}.block{i}"), c, seed);
    }
}

// ---------------------------------------------------------------------------
// forward operators

fn linear_p(tape: &mut Tape, p: &BoundParams, prefix: &str, x: Var) -> Var {
    let w = p.var(&format!("{prefix}.w"));
    let b = p.var(&format!("{prefix}.b"));
    tape.linear(x, w, Some(b))
}

fn layer_norm_p(tape: &mut Tape, p: &BoundParams, prefix: &str, x: Var) -> Var {
    let g = p.var(&format!("{prefix}.g"));
    let b = p.var(&format!("{prefix}.b"));
    tape.layer_norm(x, g, b)
}

/// Standard scaled dot-product multi-head self-attention over `[B, L, E]`
/// tokens. No positional encoding.
pub fn msa(tape: &mut Tape, p: &BoundParams, prefix: &str, tokens: Var, heads: usize) -> Var {
    let shape = tape.value(tokens).shape().to_vec();
    assert_eq!(shape.len(), 3, "msa expects [B, L, E]");
    let (b, l, e) = (shape[0], shape[1], shape[2]);
    assert_eq!(e % heads, 0);
    let dh = e / heads;
    let split = |tape: &mut Tape, x: Var| {
        let x = tape.reshape(x, vec![b, l, heads, dh]);
        let x = tape.permute(x, &[0, 2, 1, 3]);
        tape.reshape(x, vec![b * heads, l, dh])
    };
    let q = linear_p(tape, p, &format!("{prefix}.wq"), tokens);
    let k = linear_p(tape, p, &format!("{prefix}.wk"), tokens);
    let v = linear_p(tape, p, &format!("{prefix}.wv"), tokens);
    let (q, k, v) = (split(tape, q), split(tape, k), split(tape, v));
    let scores = tape.bmm(q, k, false, true);
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let att = tape.softmax_lastdim(scores);
    let ctx = tape.bmm(att, v, false, false);
    let ctx = tape.reshape(ctx, vec![b, heads, l, dh]);
    let ctx = tape.permute(ctx, &[0, 2, 1, 3]);
    let ctx = tape.reshape(ctx, vec![b, l, e]);
    linear_p(tape, p, &format!("{prefix}.wo"), ctx)
}

/// Pre-norm residual MSA sublayer.
fn msa_sublayer(tape: &mut Tape, p: &BoundParams, prefix: &str, x: Var, heads: usize) -> Var {
    let normed = layer_norm_p(tape, p, &format!("{prefix}.ln"), x);
    let a = msa(tape, p, prefix, normed, heads);
    tape.add(x, a)
}

/// Pre-norm residual feed-forward sublayer on the trailing channel dim.
pub fn ffn_sublayer(tape: &mut Tape, p: &BoundParams, prefix: &str, x: Var) -> Var {
    let normed = layer_norm_p(tape, p, &format!("{prefix}.ln"), x);
    let h = linear_p(tape, p, &format!("{prefix}.w1"), normed);
    let h = tape.gelu(h);
    let h = linear_p(tape, p, &format!("{prefix}.w2"), h);
    tape.add(x, h)
}

/// Local encoder: windowed spatial attention (temporal slices as batch
/// lanes), windowed temporal attention (spatial sites as batch lanes),
/// then an FFN sublayer. Shape-preserving.
pub fn stsa_local(
    tape: &mut Tape,
    p: &BoundParams,
    prefix: &str,
    x: Var,
    cfg: &AttentionConfig,
    dims: AttentionDims,
) -> Result<Var, AttnError> {
    let shape = tape.value(x).shape().to_vec();
    let (h, w, t, c) = (shape[0], shape[1], shape[2], shape[3]);
    cfg.validate(h, w, t)?;
    let mut cur = x;
    if dims != AttentionDims::TemporalOnly {
        let wins = window_partition_spatial(tape, cur, cfg.p_s)?;
        let ns = h * w / (cfg.p_s * cfg.p_s);
        // [N_s, P_s, P_s, T, C] -> [N_s, T, P_s^2, C] token layout
        let perm = tape.permute(wins, &[0, 3, 1, 2, 4]);
        let tokens = tape.reshape(perm, vec![ns * t, cfg.p_s * cfg.p_s, c]);
        let out = msa_sublayer(tape, p, &format!("{prefix}.sp"), tokens, cfg.heads);
        let out = tape.reshape(out, vec![ns, t, cfg.p_s, cfg.p_s, c]);
        let out = tape.permute(out, &[0, 2, 3, 1, 4]);
        cur = window_stitch_spatial(tape, out, h, w)?;
    }
    if dims != AttentionDims::SpatialOnly {
        let wins = window_partition_temporal(tape, cur, cfg.p_t)?;
        let nt = t / cfg.p_t;
        // [N_t, H, W, P_t, C] rows are already (P_t, C) tokens
        let tokens = tape.reshape(wins, vec![nt * h * w, cfg.p_t, c]);
        let out = msa_sublayer(tape, p, &format!("{prefix}.tm"), tokens, cfg.heads);
        let out = tape.reshape(out, vec![nt, h, w, cfg.p_t, c]);
        cur = window_stitch_temporal(tape, out, t)?;
    }
    Ok(ffn_sublayer(tape, p, &format!("{prefix}.ffn"), cur))
}

/// Global encoder: spatial average-pool by S, full spatial attention per
/// temporal slice, full temporal attention per site, FFN. Output is
/// `[H/S, W/S, T, C]`.
pub fn stsa_global(
    tape: &mut Tape,
    p: &BoundParams,
    prefix: &str,
    x: Var,
    cfg: &AttentionConfig,
    dims: AttentionDims,
) -> Result<Var, AttnError> {
    let shape = tape.value(x).shape().to_vec();
    let (h, w, t, c) = (shape[0], shape[1], shape[2], shape[3]);
    cfg.validate(h, w, t)?;
    let (hs, ws) = (h / cfg.s, w / cfg.s);
    let mut cur = if cfg.s == 1 {
        x
    } else {
        tape.avg_pool_spatial(x, cfg.s)
    };
    if dims != AttentionDims::TemporalOnly {
        // tokens: all H/S * W/S sites, temporal slices as batch lanes
        let perm = tape.permute(cur, &[2, 0, 1, 3]);
        let tokens = tape.reshape(perm, vec![t, hs * ws, c]);
        let out = msa_sublayer(tape, p, &format!("{prefix}.sp"), tokens, cfg.heads);
        let out = tape.reshape(out, vec![t, hs, ws, c]);
        cur = tape.permute(out, &[1, 2, 0, 3]);
    }
    if dims != AttentionDims::SpatialOnly {
        // tokens: all T bins, spatial sites as batch lanes
        let tokens = tape.reshape(cur, vec![hs * ws, t, c]);
        let out = msa_sublayer(tape, p, &format!("{prefix}.tm"), tokens, cfg.heads);
        cur = tape.reshape(out, vec![hs, ws, t, c]);
    }
    Ok(ffn_sublayer(tape, p, &format!("{prefix}.ffn"), cur))
}

/// Token-space cross attention between two same-shape volumes. Stage 1
/// attends over HW spatial tokens with (T*C)-dim embeddings; stage 2 re-
/// projects stage-1 output into keys/values and attends over T temporal
/// tokens with (HW*C)-dim embeddings. Residual from the query volume.
pub fn stca(
    tape: &mut Tape,
    p: &BoundParams,
    prefix: &str,
    query_vol: Var,
    kv_vol: Var,
) -> Result<Var, AttnError> {
    let shape = tape.value(query_vol).shape().to_vec();
    if tape.value(kv_vol).shape() != shape.as_slice() {
        return Err(AttnError::BadConfig("query/kv volume shapes differ".into()));
    }
    let (h, w, t, c) = (shape[0], shape[1], shape[2], shape[3]);
    let q = linear_p(tape, p, &format!("{prefix}.q"), query_vol);
    let k = linear_p(tape, p, &format!("{prefix}.k"), kv_vol);
    let v = linear_p(tape, p, &format!("{prefix}.v"), kv_vol);
    // stage 1: HW tokens, embedding T*C
    let sq = tape.reshape(q, vec![1, h * w, t * c]);
    let sk = tape.reshape(k, vec![1, h * w, t * c]);
    let sv = tape.reshape(v, vec![1, h * w, t * c]);
    let scores = tape.bmm(sq, sk, false, true);
    let scores = tape.scale(scores, 1.0 / ((t * c) as f64).sqrt());
    let att = tape.softmax_lastdim(scores);
    let stage1 = tape.bmm(att, sv, false, false);
    let stage1 = tape.reshape(stage1, vec![h, w, t, c]);
    // stage 2: fresh keys/values from stage 1, T tokens, embedding HW*C
    let k2 = linear_p(tape, p, &format!("{prefix}.k2"), stage1);
    let v2 = linear_p(tape, p, &format!("{prefix}.v2"), stage1);
    let tokens_t = |tape: &mut Tape, x: Var| {
        let x = tape.permute(x, &[2, 0, 1, 3]);
        tape.reshape(x, vec![1, t, h * w * c])
    };
    let (q2, k2, v2) = (tokens_t(tape, q), tokens_t(tape, k2), tokens_t(tape, v2));
    let scores = tape.bmm(q2, k2, false, true);
    let scores = tape.scale(scores, 1.0 / ((h * w * c) as f64).sqrt());
    let att = tape.softmax_lastdim(scores);
    let stage2 = tape.bmm(att, v2, false, false);
    let stage2 = tape.reshape(stage2, vec![t, h, w, c]);
    let stage2 = tape.permute(stage2, &[1, 2, 0, 3]);
    Ok(tape.add(query_vol, stage2))
}

/// Decoder integrating the two branches: the upsampled global features
/// query the local ones and vice versa; each result passes an FFN
/// sublayer. `integration` toggles either cross path for ablations.
pub fn stca_decoder(
    tape: &mut Tape,
    p: &BoundParams,
    prefix: &str,
    f_l: Var,
    f_g: Var,
    s: usize,
    integration: IntegrationMode,
) -> Result<(Var, Var), AttnError> {
    let lshape = tape.value(f_l).shape().to_vec();
    let gshape = tape.value(f_g).shape().to_vec();
    if gshape[0] * s != lshape[0] || gshape[1] * s != lshape[1] {
        return Err(AttnError::BadConfig(
            "global/local scales incompatible".into(),
        ));
    }
    let g_up = if s == 1 {
        f_g
    } else {
        tape.upsample_nearest_spatial(f_g, s)
    };
    let local_in = match integration {
        IntegrationMode::LgInt | IntegrationMode::LocInt => {
            stca(tape, p, &format!("{prefix}.l.stca"), g_up, f_l)?
        }
        _ => f_l,
    };
    let global_in = match integration {
        IntegrationMode::LgInt | IntegrationMode::GloInt => {
            stca(tape, p, &format!("{prefix}.g.stca"), f_l, g_up)?
        }
        _ => g_up,
    };
    let f_l_star = ffn_sublayer(tape, p, &format!("{prefix}.l.ffn"), local_in);
    let f_g_star = ffn_sublayer(tape, p, &format!("{prefix}.g.ffn"), global_in);
    Ok((f_l_star, f_g_star))
}

/// One encoder/decoder block.
pub fn trt_block(
    tape: &mut Tape,
    p: &BoundParams,
    prefix: &str,
    f_s: Var,
    cfg: &AttentionConfig,
    modes: BlockModes,
) -> Result<(Var, Var), AttnError> {
    let f_l = stsa_local(tape, p, &format!("{prefix}.local"), f_s, cfg, modes.dims)?;
    let f_g = stsa_global(tape, p, &format!("{prefix}.global"), f_s, cfg, modes.dims)?;
    stca_decoder(
        tape,
        p,
        &format!("{prefix}.dec"),
        f_l,
        f_g,
        cfg.s,
        modes.integration,
    )
}

/// Stack blocks by fusing each block's two outputs (concat + projection)
/// into the next block's input; returns the final block's pair.
pub fn trt_stack(
    tape: &mut Tape,
    p: &BoundParams,
    prefix: &str,
    f_s: Var,
    cfg: &AttentionConfig,
    blocks: usize,
    modes: BlockModes,
) -> Result<(Var, Var), AttnError> {
    assert!(blocks >= 1);
    let mut cur = f_s;
    let mut pair = None;
    for i in 0..blocks {
        let bp = format!("{prefix}.block{i}");
        let (l, g) = trt_block(tape, p, &bp, cur, cfg, modes)?;
        if i + 1 < blocks {
            let cat = tape.concat_lastdim(&[l, g]);
            cur = linear_p(tape, p, &format!("{bp}.fuse"), cat);
        }
        pair = Some((l, g));
    }
    Ok(pair.unwrap())
}

// ---------------------------------------------------------------------------
// checkpoints

const CKPT_MAGIC: &[u8; 4] = b"TRTW";
const CKPT_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct CkptEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CkptHeader {
    config: serde_json::Value,
    entries: Vec<CkptEntry>,
}

/// Save parameters with an arbitrary JSON-serializable config header.
/// Payloads are stored as row-major little-endian f32.
pub fn save_checkpoint<C: Serialize>(
    path: impl AsRef<Path>,
    config: &C,
    params: &ParameterSet,
) -> Result<(), AttnError> {
    let header = CkptHeader {
        config: serde_json::to_value(config)?,
        entries: params
            .iter()
            .map(|(name, t)| CkptEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&CKPT_VERSION.to_le_bytes())?;
    let hjson = serde_json::to_vec(&header)?;
    w.write_all(&(hjson.len() as u32).to_le_bytes())?;
    w.write_all(&hjson)?;
    for (_, t) in params.iter() {
        for &v in t.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Load a checkpoint; returns the raw JSON config and the parameters.
pub fn load_checkpoint(
    path: impl AsRef<Path>,
) -> Result<(serde_json::Value, ParameterSet), AttnError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| AttnError::Truncated)?;
    if &magic != CKPT_MAGIC {
        return Err(AttnError::BadMagic);
    }
    let mut b2 = [0u8; 2];
    r.read_exact(&mut b2).map_err(|_| AttnError::Truncated)?;
    let version = u16::from_le_bytes(b2);
    if version != CKPT_VERSION {
        return Err(AttnError::VersionMismatch(version));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(|_| AttnError::Truncated)?;
    let hlen = u32::from_le_bytes(b4) as usize;
    let mut hjson = vec![0u8; hlen];
    r.read_exact(&mut hjson).map_err(|_| AttnError::Truncated)?;
    let header: CkptHeader = serde_json::from_slice(&hjson)?;
    let mut params = ParameterSet::new();
    for e in &header.entries {
        let n: usize = e.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut b4).map_err(|_| AttnError::Truncated)?;
            data.push(f32::from_le_bytes(b4) as f64);
        }
        params.insert(e.name.clone(), Tensor::from_vec(e.shape.clone(), data));
    }
    Ok((header.config, params))
}
