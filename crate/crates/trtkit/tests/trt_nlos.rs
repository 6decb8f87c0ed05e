//! NLOS head contracts: denoiser shape/nonnegativity, shallow extraction
//! with the fixed migration prior, fusion readout consistency, losses,
//! and end-to-end gradients.

use trtkit::ad::check::{fd_grad, max_rel_err};
use trtkit::ad::{BoundParams, ParameterSet, Tape, Tensor, Var};
use trtkit::attention::AttentionConfig;
use trtkit::trt_nlos::*;

fn upos(shape: &[usize], seed: u64) -> Tensor {
    let t = Tensor::rand_uniform(shape, 0.5, seed);
    Tensor::from_vec(
        t.shape().to_vec(),
        t.data().iter().map(|v| v + 0.6).collect(),
    )
}

fn tiny_cfg(channels: usize) -> NlosModelConfig {
    NlosModelConfig {
        denoiser_channels: vec![4, 8, 8, 8],
        use_denoiser: true,
        temporal_down: 4,
        blocks: 1,
        channels,
        attention: AttentionConfig {
            heads: 1,
            p_s: 2,
            p_t: 2,
            s: 2,
            channels,
        },
        modes: Default::default(),
        wall_extent_m: 2.0,
        alpha: 1.0,
        beta: 1.0,
        softmax_temp: 1.0,
    }
}

// ---------------------------------------------------------------------------
// denoiser

#[test]
fn denoiser_preserves_shape_and_nonnegativity() {
    let cfg = tiny_cfg(4);
    let mut ps = ParameterSet::new();
    build_nlos_model(&mut ps, "m", &cfg, 1);
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, &ps);
    let x = tape.leaf(Tensor::randn(&[6, 6, 12], 1.0, 2));
    let y = denoise(&mut tape, &bound, "m", x).unwrap();
    assert_eq!(tape.value(y).shape(), [6, 6, 12]);
    assert!(tape.value(y).data().iter().all(|&v| v >= 0.0));
    assert!(tape.value(y).is_finite());
}

#[test]
fn denoiser_zero_input_yields_zero() {
    let cfg = tiny_cfg(4);
    let mut ps = ParameterSet::new();
    build_nlos_model(&mut ps, "m", &cfg, 3);
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, &ps);
    let x = tape.leaf(Tensor::zeros(&[4, 4, 8]));
    let y = denoise(&mut tape, &bound, "m", x).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn denoiser_learns_more_than_identity_on_poisson_pairs() {
    // one gradient-descent fit on a small batch of (noisy, clean) pairs
    // must beat the identity map's L1 on held-out noise
    use trtkit::data::{CubeKind, TransientCube};
    use trtkit::los_sim::{poisson_detect, DetectionModel};

    let cfg = tiny_cfg(4);
    let mut ps = ParameterSet::new();
    build_nlos_model(&mut ps, "m", &cfg, 5);
    let (h, w, t) = (4usize, 4usize, 16usize);
    let make_pair = |seed: u64| -> (Tensor, Tensor) {
        let mut clean = vec![0.0; h * w * t];
        for pix in 0..h * w {
            let bin = (seed as usize + pix) % t;
            clean[pix * t + bin] = 3.0;
        }
        let cube = TransientCube::new(h, w, t, 100.0, CubeKind::Rates, clean.clone()).unwrap();
        let det = DetectionModel {
            background_per_bin: 0.05,
            ..DetectionModel::uniform()
        };
        let noisy = poisson_detect(&cube, &det, seed).unwrap();
        (
            Tensor::from_vec(vec![h, w, t], noisy.values().to_vec()),
            Tensor::from_vec(vec![h, w, t], clean),
        )
    };
    let pairs: Vec<_> = (0..6).map(|i| make_pair(100 + i)).collect();
    let lr = 2e-2;
    for _ in 0..40 {
        for (noisy, clean) in &pairs[..5] {
            let mut tape = Tape::new();
            let bound = BoundParams::bind(&mut tape, &ps);
            let x = tape.leaf(noisy.clone());
            let y = denoise(&mut tape, &bound, "m", x).unwrap();
            let loss = tape.l1_mean_masked(y, clean, None);
            let grads = tape.backward(loss);
            for (name, g) in bound.gradients(&tape, &grads) {
                if !name.starts_with("m.dn.") {
                    continue;
                }
                let cur = ps.get(&name).clone();
                let upd = Tensor::from_vec(
                    cur.shape().to_vec(),
                    cur.data()
                        .iter()
                        .zip(g.data())
                        .map(|(p, g)| p - lr * g)
                        .collect(),
                );
                ps.set(&name, upd);
            }
        }
    }
    let (noisy, clean) = &pairs[5];
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, &ps);
    let x = tape.leaf(noisy.clone());
    let y = denoise(&mut tape, &bound, "m", x).unwrap();
    let loss = tape.l1_mean_masked(y, clean, None);
    let model_l1 = tape.value(loss).item();
    let identity_l1 = noisy
        .data()
        .iter()
        .zip(clean.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / clean.numel() as f64;
    assert!(
        model_l1 < identity_l1,
        "denoiser l1 {model_l1} vs identity {identity_l1}"
    );
}

// ---------------------------------------------------------------------------
// shallow extraction

#[test]
fn shallow_extract_shape_contract() {
    let cfg = tiny_cfg(8);
    let mut ps = ParameterSet::new();
    build_nlos_model(&mut ps, "m", &cfg, 7);
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, &ps);
    let x = tape.leaf(upos(&[16, 16, 64], 8));
    let (pre, enh) = shallow_extract(&mut tape, &bound, "m", x, &cfg, 132.0).unwrap();
    assert_eq!(tape.value(pre).shape(), [16, 16, 16, 8]);
    assert_eq!(tape.value(enh).shape(), [16, 16, 16, 8]);
    assert!(tape.value(enh).is_finite());
}

#[test]
fn shallow_extract_zero_input_yields_zero() {
    let cfg = tiny_cfg(8);
    let mut ps = ParameterSet::new();
    build_nlos_model(&mut ps, "m", &cfg, 9);
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, &ps);
    let x = tape.leaf(Tensor::zeros(&[8, 8, 32]));
    let (pre, enh) = shallow_extract(&mut tape, &bound, "m", x, &cfg, 132.0).unwrap();
    assert!(tape.value(pre).data().iter().all(|&v| v == 0.0));
    assert!(tape.value(enh).data().iter().all(|&v| v == 0.0));
}

#[test]
fn shallow_extract_rejects_non_square_grid() {
    let cfg = tiny_cfg(8);
    let mut ps = ParameterSet::new();
    build_nlos_model(&mut ps, "m", &cfg, 11);
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, &ps);
    let x = tape.leaf(Tensor::zeros(&[8, 4, 32]));
    assert!(matches!(
        shallow_extract(&mut tape, &bound, "m", x, &cfg, 132.0),
        Err(NlosError::ShapeMismatch(_))
    ));
}

// ---------------------------------------------------------------------------
// fusion readout

#[test]
fn intensity_is_volume_value_at_argmax() {
    let cfg = tiny_cfg(4);
    let mut ps = ParameterSet::new();
    build_nlos_model(&mut ps, "m", &cfg, 13);
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, &ps);
    let x = tape.leaf(upos(&[8, 8, 32], 14));
    let out = forward_trt_nlos(&mut tape, &bound, "m", x, &cfg, 132.0).unwrap();
    let vol = tape.value(out.volume);
    let inten = tape.value(out.intensity);
    let depth = hard_argmax_depth(vol);
    let t = vol.shape()[2];
    for pix in 0..64 {
        let z = depth.values[pix] as usize;
        // intensity is the soft-rectified volume value at the argmax bin
        let m = vol.data()[pix * t + z];
        let sp = if m > 30.0 { m } else { (1.0 + m.exp()).ln() };
        assert!((inten.data()[pix] - sp).abs() < 1e-12);
    }
}

#[test]
fn hard_argmax_depth_semantics() {
    // one-hot volume: intensity peaks where the voxel is, depth reads z0
    let mut data = vec![0.0; 2 * 2 * 4];
    data[(1 * 2 + 0) * 4 + 2] = 5.0;
    let vol = Tensor::from_vec(vec![2, 2, 4], data);
    let d = hard_argmax_depth(&vol);
    assert_eq!(d.values[2], 2.0);
    // flat rows tie-break to the lowest bin
    assert_eq!(d.values[0], 0.0);
    assert!(d.valid.iter().all(|&v| v));

    // random volume vs scalar oracle
    let vol = Tensor::randn(&[3, 3, 8], 1.0, 15);
    let d = hard_argmax_depth(&vol);
    for (pix, row) in vol.data().chunks(8).enumerate() {
        let mut best = 0;
        for (n, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = n;
            }
        }
        assert_eq!(d.values[pix], best as f64);
    }
}

// ---------------------------------------------------------------------------
// losses

#[test]
fn losses_zero_at_equality_and_weighting() {
    let rho = upos(&[2, 2, 8], 16);
    let inten = upos(&[2, 2], 17);
    let depth = upos(&[2, 2], 18);
    let mut tape = Tape::new();
    let rv = tape.leaf(rho.clone());
    let iv = tape.leaf(inten.clone());
    let dv = tape.leaf(depth.clone());
    let l = nlos_losses(&mut tape, rv, &rho, iv, &inten, dv, &depth, None, 1.0, 1.0).unwrap();
    assert_eq!(tape.value(l).item(), 0.0);

    // alpha = beta = 0 reduces to the measurement term
    let other_i = upos(&[2, 2], 19);
    let other_d = upos(&[2, 2], 20);
    let shifted = Tensor::from_vec(vec![2, 2, 8], rho.data().iter().map(|v| v + 0.5).collect());
    let rv2 = tape.leaf(shifted);
    let l0 = nlos_losses(
        &mut tape, rv2, &rho, iv, &other_i, dv, &other_d, None, 0.0, 0.0,
    )
    .unwrap();
    assert!((tape.value(l0).item() - 0.5).abs() < 1e-12);

    // weights scale their terms linearly
    let l1 = nlos_losses(
        &mut tape, rv, &rho, iv, &other_i, dv, &other_d, None, 2.0, 3.0,
    )
    .unwrap();
    let li = tape.l1_mean_masked(iv, &other_i, None);
    let ld = tape.l1_mean_masked(dv, &other_d, None);
    let want = 2.0 * tape.value(li).item() + 3.0 * tape.value(ld).item();
    assert!((tape.value(l1).item() - want).abs() < 1e-12);
}

#[test]
fn depth_loss_respects_mask() {
    let depth_gt = Tensor::from_vec(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]);
    let mask = Tensor::from_vec(vec![1, 4], vec![1.0, 1.0, 0.0, 0.0]);
    let pred = Tensor::from_vec(vec![1, 4], vec![1.0, 2.0, 99.0, -7.0]);
    let zero3 = Tensor::zeros(&[1, 1, 2]);
    let zero2 = Tensor::zeros(&[1, 1]);
    let mut tape = Tape::new();
    let rv = tape.leaf(zero3.clone());
    let iv = tape.leaf(zero2.clone());
    let dv = tape.leaf(pred);
    let l = nlos_losses(
        &mut tape,
        rv,
        &zero3,
        iv,
        &zero2,
        dv,
        &depth_gt,
        Some(&mask),
        0.0,
        1.0,
    )
    .unwrap();
    // masked pixels carry arbitrary error yet contribute nothing
    assert_eq!(tape.value(l).item(), 0.0);
}

#[test]
fn losses_reject_shape_mismatch() {
    let rho = Tensor::zeros(&[2, 2, 8]);
    let i2 = Tensor::zeros(&[2, 2]);
    let mut tape = Tape::new();
    let rv = tape.leaf(Tensor::zeros(&[2, 2, 4]));
    let iv = tape.leaf(i2.clone());
    let dv = tape.leaf(i2.clone());
    assert!(matches!(
        nlos_losses(&mut tape, rv, &rho, iv, &i2, dv, &i2, None, 1.0, 1.0),
        Err(NlosError::ShapeMismatch(_))
    ));
}

// ---------------------------------------------------------------------------
// end to end

#[test]
fn forward_shape_contract_on_desk_input() {
    let cfg = tiny_cfg(8);
    let mut ps = ParameterSet::new();
    build_nlos_model(&mut ps, "m", &cfg, 21);
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, &ps);
    let x = tape.leaf(upos(&[16, 16, 64], 22));
    let out = forward_trt_nlos(&mut tape, &bound, "m", x, &cfg, 132.0).unwrap();
    assert_eq!(tape.value(out.denoised).shape(), [16, 16, 64]);
    assert_eq!(tape.value(out.volume).shape(), [16, 16, 16]);
    assert_eq!(tape.value(out.intensity).shape(), [16, 16]);
    assert_eq!(tape.value(out.depth).shape(), [16, 16]);
    assert!(tape.value(out.volume).is_finite());

    // ablation: the denoiser-off configuration runs and skips the skip
    let mut off = cfg;
    off.use_denoiser = false;
    let out2 = forward_trt_nlos(&mut tape, &bound, "m", x, &off, 132.0).unwrap();
    assert_eq!(tape.value(out2.denoised).data(), tape.value(x).data());
    assert_eq!(tape.value(out2.volume).shape(), [16, 16, 16]);
}

#[test]
fn gradient_reaches_every_trained_parameter() {
    let cfg = tiny_cfg(4);
    let mut ps = ParameterSet::new();
    build_nlos_model(&mut ps, "m", &cfg, 23);
    ps.insert("in", upos(&[8, 8, 32], 24));
    let rho = upos(&[8, 8, 32], 25);
    let inten = upos(&[8, 8], 26);
    let depth = upos(&[8, 8], 27);
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, &ps);
    let x = bound.var("in");
    let out = forward_trt_nlos(&mut tape, &bound, "m", x, &cfg, 132.0).unwrap();
    let loss = nlos_losses(
        &mut tape,
        out.denoised,
        &rho,
        out.intensity,
        &inten,
        out.depth,
        &depth,
        None,
        cfg.alpha,
        cfg.beta,
    )
    .unwrap();
    let grads = tape.backward(loss);
    let dead: Vec<String> = bound
        .zero_grad_names(&tape, &grads)
        .into_iter()
        // key-projection biases are structurally gradient-free; the
        // final inter-block fuse only feeds deeper stacks
        .filter(|n| !n.ends_with(".wk.b") && !n.contains("block0.fuse") && n != "in")
        .collect();
    assert!(dead.is_empty(), "no gradient reached: {dead:?}");
}

#[test]
fn end_to_end_gradient_matches_fd() {
    let mut cfg = tiny_cfg(4);
    cfg.attention.s = 1;
    let mut ps = ParameterSet::new();
    build_nlos_model(&mut ps, "m", &cfg, 29);
    ps.insert("in", upos(&[4, 4, 16], 30));
    let rho = upos(&[4, 4, 16], 31);
    let inten = upos(&[4, 4], 32);
    let depth = upos(&[4, 4], 33);
    let run = |p: &ParameterSet| -> (Tape, BoundParams, Var) {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, p);
        let x = bound.var("in");
        let out = forward_trt_nlos(&mut tape, &bound, "m", x, &cfg, 132.0).unwrap();
        let loss = nlos_losses(
            &mut tape,
            out.denoised,
            &rho,
            out.intensity,
            &inten,
            out.depth,
            &depth,
            None,
            cfg.alpha,
            cfg.beta,
        )
        .unwrap();
        (tape, bound, loss)
    };
    let (tape, bound, loss) = run(&ps);
    let grads = tape.backward(loss);
    let analytic = bound.gradients(&tape, &grads);
    for name in [
        "m.dn.c0.b",
        "m.dn.s1.pw.b",
        "m.ext.r.b",
        "m.enh.d.b",
        "m.up.l.b",
        "m.fuse.b.b",
        "m.trt.block0.dec.g.stca.v.b",
    ] {
        let mut f = |t: &Tensor| {
            let mut p2 = ps.clone();
            p2.set(name, t.clone());
            let (tape, _, loss) = run(&p2);
            tape.value(loss).item()
        };
        let numeric = fd_grad(&mut f, ps.get(name), 1e-5);
        let err = max_rel_err(&analytic[name], &numeric);
        assert!(err <= 1e-3, "{name}: rel err {err}");
    }
}
