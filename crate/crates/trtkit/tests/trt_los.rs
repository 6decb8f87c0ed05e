//! LOS head contracts: extractor shapes, pixelshuffle index maps,
//! histogram normalization, soft-argmax readout, losses, and
//! end-to-end gradient flow.

use std::sync::Arc;

use trtkit::ad::check::{fd_grad, max_rel_err};
use trtkit::ad::{BoundParams, ParameterSet, Tape, Tensor};
use trtkit::attention::AttentionConfig;
use trtkit::data::{DepthMap, DepthUnit, IntensityImage};
use trtkit::trt_los::*;

fn upos(shape: &[usize], seed: u64) -> Tensor {
    let t = Tensor::rand_uniform(shape, 0.5, seed);
    Tensor::from_vec(
        t.shape().to_vec(),
        t.data().iter().map(|v| v + 0.6).collect(),
    )
}

fn small_cfg(channels: usize) -> LosModelConfig {
    LosModelConfig {
        spatial_down: 2,
        temporal_down: 8,
        dilations: vec![1, 2],
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
        gamma: 1e-5,
        softmax_temp: 1.0,
    }
}

// ---------------------------------------------------------------------------
// extractor

#[test]
fn extractor_shape_contract() {
    let cfg = LosModelConfig {
        channels: 16,
        attention: AttentionConfig {
            heads: 1,
            p_s: 2,
            p_t: 2,
            s: 2,
            channels: 16,
        },
        ..LosModelConfig::default()
    };
    let mut ps = ParameterSet::new();
    build_los_model(&mut ps, "m", &cfg, 1);
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, &ps);
    let x = tape.leaf(Tensor::randn(&[32, 32, 128, 1], 1.0, 2));
    let f = feature_extract_los(&mut tape, &bound, "m", x, &cfg).unwrap();
    assert_eq!(tape.value(f).shape(), [16, 16, 16, 16]);
    assert!(tape.value(f).is_finite());
}

#[test]
fn extractor_zero_input_yields_zero() {
    let cfg = small_cfg(16);
    let mut ps = ParameterSet::new();
    build_los_model(&mut ps, "m", &cfg, 3);
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, &ps);
    let x = tape.leaf(Tensor::zeros(&[8, 8, 32, 1]));
    let f = feature_extract_los(&mut tape, &bound, "m", x, &cfg).unwrap();
    // biases are zero-initialized, so zero input propagates as zero
    assert!(tape.value(f).data().iter().all(|&v| v == 0.0));
}

#[test]
fn extractor_rejects_indivisible_dims() {
    let cfg = small_cfg(16);
    let mut ps = ParameterSet::new();
    build_los_model(&mut ps, "m", &cfg, 4);
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, &ps);
    let x = tape.leaf(Tensor::zeros(&[7, 8, 32, 1]));
    assert!(matches!(
        feature_extract_los(&mut tape, &bound, "m", x, &cfg),
        Err(LosError::Indivisible { .. })
    ));
}

// ---------------------------------------------------------------------------
// pixelshuffle

#[test]
fn temporal_pixelshuffle_enumerated_index_map() {
    // 1x1x2x4, r=2: out[t', c'] = in[t'/2, c'*2 + t'%2]
    let data: Vec<f64> = (0..8).map(|v| v as f64).collect();
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(vec![1, 1, 2, 4], data.clone()));
    let y = temporal_pixelshuffle(&mut tape, x, 2).unwrap();
    assert_eq!(tape.value(y).shape(), [1, 1, 4, 2]);
    let mut want = vec![0.0; 8];
    for tp in 0..4 {
        for cp in 0..2 {
            want[tp * 2 + cp] = data[(tp / 2) * 4 + cp * 2 + tp % 2];
        }
    }
    assert_eq!(tape.value(y).data(), &want[..]);

    let back = temporal_pixelunshuffle(&mut tape, y, 2).unwrap();
    assert_eq!(tape.value(back).data(), &data[..]);

    // r = 1 is the identity
    let id = temporal_pixelshuffle(&mut tape, x, 1).unwrap();
    assert_eq!(tape.value(id).data(), &data[..]);
}

#[test]
fn pixelshuffle_3d_enumerated_index_map() {
    // 1x1x1x8, r=2: out[h',w',t',0] = in[0,0,0, (h'*2 + w')*2 + t']
    let data: Vec<f64> = (0..8).map(|v| v as f64).collect();
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(vec![1, 1, 1, 8], data.clone()));
    let y = pixelshuffle_3d(&mut tape, x, 2).unwrap();
    assert_eq!(tape.value(y).shape(), [2, 2, 2, 1]);
    let mut want = vec![0.0; 8];
    for h in 0..2 {
        for w in 0..2 {
            for t in 0..2 {
                want[(h * 2 + w) * 2 + t] = data[(h * 2 + w) * 2 + t];
            }
        }
    }
    assert_eq!(tape.value(y).data(), &want[..]);

    let back = pixelunshuffle_3d(&mut tape, y, 2).unwrap();
    assert_eq!(tape.value(back).data(), &data[..]);

    let id = pixelshuffle_3d(&mut tape, x, 1).unwrap();
    assert_eq!(tape.value(id).data(), &data[..]);
}

#[test]
fn pixelshuffle_round_trip_random() {
    let mut tape = Tape::new();
    let x = Tensor::randn(&[2, 3, 4, 8], 1.0, 5);
    let v = tape.leaf(x.clone());
    let s = pixelshuffle_3d(&mut tape, v, 2).unwrap();
    let u = pixelunshuffle_3d(&mut tape, s, 2).unwrap();
    assert_eq!(tape.value(u).max_abs_diff(&x), 0.0);
    let s = temporal_pixelshuffle(&mut tape, v, 4).unwrap();
    let u = temporal_pixelunshuffle(&mut tape, s, 4).unwrap();
    assert_eq!(tape.value(u).max_abs_diff(&x), 0.0);
}

#[test]
fn pixelshuffle_rejects_indivisible_channels() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[1, 1, 2, 3]));
    assert!(matches!(
        temporal_pixelshuffle(&mut tape, x, 2),
        Err(LosError::Indivisible { .. })
    ));
    assert!(matches!(
        pixelshuffle_3d(&mut tape, x, 2),
        Err(LosError::Indivisible { .. })
    ));
}

// ---------------------------------------------------------------------------
// histogram head

#[test]
fn predicted_histogram_is_normalized_at_input_resolution() {
    let cfg = small_cfg(16);
    let mut ps = ParameterSet::new();
    build_los_model(&mut ps, "m", &cfg, 6);
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, &ps);
    let fl = tape.leaf(Tensor::randn(&[4, 4, 4, 16], 1.0, 7));
    let fg = tape.leaf(Tensor::randn(&[4, 4, 4, 16], 1.0, 8));
    let hist = predict_histogram(&mut tape, &bound, "m", fl, fg).unwrap();
    assert_eq!(tape.value(hist).shape(), [8, 8, 32]);
    for row in tape.value(hist).data().chunks(32) {
        let sum: f64 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6, "pixel sum {sum}");
        assert!(row.iter().all(|&v| v >= 0.0));
    }
}

// ---------------------------------------------------------------------------
// soft argmax

#[test]
fn soft_argmax_uniform_histogram_gives_mean_index() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::filled(&[1, 1, 128], 1.0 / 128.0));
    let d = soft_argmax_depth(&mut tape, x, 1.0);
    assert!((tape.value(d).data()[0] - 63.5).abs() < 1e-12);
}

#[test]
fn soft_argmax_saturated_logit_selects_bin() {
    let mut tape = Tape::new();
    let mut data = vec![0.0; 16];
    data[7] = 1e4;
    let x = tape.leaf(Tensor::from_vec(vec![1, 1, 16], data));
    let d = soft_argmax_depth(&mut tape, x, 1.0);
    assert!((tape.value(d).data()[0] - 7.0).abs() < 1e-3);
}

#[test]
fn soft_argmax_matches_scalar_oracle() {
    let x = Tensor::randn(&[2, 2, 16], 1.0, 9);
    let temp = 0.5;
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let d = soft_argmax_depth(&mut tape, v, temp);
    for (pix, row) in x.data().chunks(16).enumerate() {
        let m = row
            .iter()
            .map(|v| v / temp)
            .fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v / temp - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        let want: f64 = exps.iter().enumerate().map(|(n, e)| n as f64 * e / z).sum();
        assert!((tape.value(d).data()[pix] - want).abs() < 1e-10);
    }
}

#[test]
fn soft_argmax_is_translation_consistent() {
    // a circular shift away from edges moves the readout by exactly k
    let mut base = vec![0.0; 32];
    for (i, v) in base.iter_mut().enumerate() {
        // bump centered at bin 10
        *v = (-((i as f64 - 10.0) * (i as f64 - 10.0)) / 4.0).exp();
    }
    let mut shifted = vec![0.0; 32];
    for i in 0..32 {
        shifted[(i + 5) % 32] = base[i];
    }
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::from_vec(vec![1, 1, 32], base));
    let b = tape.leaf(Tensor::from_vec(vec![1, 1, 32], shifted));
    let da = soft_argmax_depth(&mut tape, a, 1.0);
    let db = soft_argmax_depth(&mut tape, b, 1.0);
    // identical mass everywhere except relocated bump: difference is not
    // exactly 5 under softmax of values (the flat background moves too),
    // so compare sharpened readouts where the bump dominates
    let da_s = soft_argmax_depth(&mut tape, a, 0.01);
    let db_s = soft_argmax_depth(&mut tape, b, 0.01);
    assert!((tape.value(db_s).data()[0] - tape.value(da_s).data()[0] - 5.0).abs() < 1e-6);
    // and the temp-1 readout still moves toward the shift
    assert!(tape.value(db).data()[0] > tape.value(da).data()[0]);
}

// ---------------------------------------------------------------------------
// losses

#[test]
fn kl_loss_zero_at_equality_and_closed_form() {
    let mut tape = Tape::new();
    let p = Tensor::from_vec(vec![1, 1, 4], vec![0.1, 0.2, 0.3, 0.4]);
    let v = tape.leaf(p.clone());
    let l = kl_loss(&mut tape, v, &p).unwrap();
    assert!(tape.value(l).item().abs() < 1e-9);

    let q = Tensor::from_vec(vec![1, 1, 2], vec![0.5, 0.5]);
    let v = tape.leaf(Tensor::from_vec(vec![1, 1, 2], vec![1.0, 0.0]));
    let l = kl_loss(&mut tape, v, &q).unwrap();
    // KL([1,0] || [0.5,0.5]) = log 2, up to the epsilon floor
    assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-5);

    let bad = tape.leaf(Tensor::from_vec(vec![1, 1, 2], vec![0.9, 0.9]));
    assert!(matches!(
        kl_loss(&mut tape, bad, &q),
        Err(LosError::NotNormalized { .. })
    ));
}

#[test]
fn kl_loss_is_nonnegative_on_random_distributions() {
    for seed in 0..5 {
        let mut tape = Tape::new();
        let norm = |t: Tensor| {
            let mut d = t.data().to_vec();
            for row in d.chunks_mut(8) {
                let s: f64 = row.iter().sum();
                for v in row.iter_mut() {
                    *v /= s;
                }
            }
            Tensor::from_vec(t.shape().to_vec(), d)
        };
        let p = norm(upos(&[2, 2, 8], 100 + seed));
        let q = norm(upos(&[2, 2, 8], 200 + seed));
        let v = tape.leaf(p);
        let l = kl_loss(&mut tape, v, &q).unwrap();
        assert!(tape.value(l).item() > -1e-7);
    }
}

#[test]
fn tv_loss_reference_values_and_homogeneity() {
    let mut tape = Tape::new();
    let c = tape.leaf(Tensor::filled(&[4, 4], 3.0));
    let tc = tv_loss(&mut tape, c);
    assert_eq!(tape.value(tc).item(), 0.0);

    let two = tape.leaf(Tensor::from_vec(vec![1, 2], vec![0.0, 1.0]));
    let t2 = tv_loss(&mut tape, two);
    assert_eq!(tape.value(t2).item(), 1.0);

    // scalar oracle on a random 4x4 map, and 1-homogeneity
    let x = Tensor::randn(&[4, 4], 1.0, 11);
    let mut want = 0.0;
    for i in 0..4 {
        for j in 0..4 {
            if j + 1 < 4 {
                want += (x.data()[i * 4 + j + 1] - x.data()[i * 4 + j]).abs();
            }
            if i + 1 < 4 {
                want += (x.data()[(i + 1) * 4 + j] - x.data()[i * 4 + j]).abs();
            }
        }
    }
    want /= 24.0;
    let v = tape.leaf(x.clone());
    let tv = tv_loss(&mut tape, v);
    let got = tape.value(tv).item();
    assert!((got - want).abs() < 1e-12);
    let scaled = tape.leaf(Tensor::from_vec(
        vec![4, 4],
        x.data().iter().map(|v| 3.0 * v).collect(),
    ));
    let tv3 = tv_loss(&mut tape, scaled);
    let got3 = tape.value(tv3).item();
    assert!((got3 - 3.0 * want).abs() < 1e-12);
}

#[test]
fn total_loss_is_kl_plus_weighted_tv() {
    let gt = Tensor::from_vec(vec![1, 2, 4], vec![0.25; 8]);
    let pred = {
        let mut d = vec![0.1, 0.2, 0.3, 0.4, 0.4, 0.3, 0.2, 0.1];
        d.iter_mut().for_each(|v| *v *= 1.0);
        Tensor::from_vec(vec![1, 2, 4], d)
    };
    let depth = Tensor::from_vec(vec![1, 2], vec![1.0, 3.0]);
    let mut tape = Tape::new();
    let pv = tape.leaf(pred.clone());
    let dv = tape.leaf(depth.clone());
    let total = los_total_loss(&mut tape, pv, &gt, dv, 1e-5).unwrap();
    let kl = kl_loss(&mut tape, pv, &gt).unwrap();
    let tv = tv_loss(&mut tape, dv);
    let want = tape.value(kl).item() + 1e-5 * tape.value(tv).item();
    assert!((tape.value(total).item() - want).abs() < 1e-15);

    // gamma = 0 reduces to the KL term
    let total0 = los_total_loss(&mut tape, pv, &gt, dv, 0.0).unwrap();
    assert!((tape.value(total0).item() - tape.value(kl).item()).abs() < 1e-15);
}

#[test]
fn kl_gradient_matches_fd() {
    let gt = {
        let mut d = upos(&[2, 2, 6], 12).data().to_vec();
        for row in d.chunks_mut(6) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        Tensor::from_vec(vec![2, 2, 6], d)
    };
    // path: free logits -> softplus -> normalize -> KL (mirrors the model head)
    let logits = Tensor::randn(&[2, 2, 6], 1.0, 13);
    let run = |t: &Tensor| -> (Tape, trtkit::ad::Var, trtkit::ad::Var) {
        let mut tape = Tape::new();
        let x = tape.leaf(t.clone());
        let sp = tape.softplus(x);
        let pr = tape.normalize_lastdim(sp, 0.0);
        let l = kl_loss(&mut tape, pr, &gt).unwrap();
        (tape, x, l)
    };
    let (tape, x, l) = run(&logits);
    let grads = tape.backward(l);
    let analytic = grads.get(x).unwrap().clone();
    let mut f = |t: &Tensor| {
        let (tape, _, l) = run(t);
        tape.value(l).item()
    };
    let numeric = fd_grad(&mut f, &logits, 1e-6);
    assert!(max_rel_err(&analytic, &numeric) < 1e-4);
}

// ---------------------------------------------------------------------------
// reflectivity filter

#[test]
fn reflectivity_filter_masks_below_mean() {
    let depth = DepthMap::new(
        1,
        4,
        vec![1.0, 2.0, 3.0, 4.0],
        vec![true; 4],
        DepthUnit::Bins,
    )
    .unwrap();
    let inten = IntensityImage::new(1, 4, vec![0.0, 0.0, 2.0, 2.0]).unwrap();
    let out = reflectivity_threshold_filter(&depth, &inten).unwrap();
    assert_eq!(out.valid, vec![false, false, true, true]);

    // uniform intensity: strict comparison masks nothing
    let flat = IntensityImage::new(1, 4, vec![5.0; 4]).unwrap();
    let out = reflectivity_threshold_filter(&depth, &flat).unwrap();
    assert_eq!(out.valid, vec![true; 4]);

    // random case vs scalar oracle
    let vals = upos(&[16], 14).data().to_vec();
    let inten = IntensityImage::new(4, 4, vals.clone()).unwrap();
    let depth = DepthMap::new(4, 4, vec![1.0; 16], vec![true; 16], DepthUnit::Bins).unwrap();
    let out = reflectivity_threshold_filter(&depth, &inten).unwrap();
    let mean = vals.iter().sum::<f64>() / 16.0;
    for (i, &v) in vals.iter().enumerate() {
        assert_eq!(out.valid[i], v >= mean);
    }
}

// ---------------------------------------------------------------------------
// end to end

#[test]
fn forward_shape_contract_and_gradient_connectivity() {
    let cfg = small_cfg(16);
    let mut ps = ParameterSet::new();
    build_los_model(&mut ps, "m", &cfg, 15);
    ps.insert("in", upos(&[8, 8, 32], 16));
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, &ps);
    let x = bound.var("in");
    let (hist, depth) = forward_trt_los(&mut tape, &bound, "m", x, &cfg).unwrap();
    assert_eq!(tape.value(hist).shape(), [8, 8, 32]);
    assert_eq!(tape.value(depth).shape(), [8, 8]);
    assert!(tape.value(hist).is_finite() && tape.value(depth).is_finite());

    let gt = Tensor::filled(&[8, 8, 32], 1.0 / 32.0);
    let loss = los_total_loss(&mut tape, hist, &gt, depth, cfg.gamma).unwrap();
    let grads = tape.backward(loss);
    let dead: Vec<String> = bound
        .zero_grad_names(&tape, &grads)
        .into_iter()
        // key-projection biases are structurally gradient-free (softmax
        // row-shift invariance); the final fuse layer only feeds the next
        // block in deeper stacks
        .filter(|n| {
            !n.ends_with(".wk.b")
                && !n.contains(&format!("block{}.fuse", cfg.blocks - 1))
                && n != "in"
        })
        .collect();
    assert!(dead.is_empty(), "no gradient reached: {dead:?}");
}

#[test]
fn end_to_end_gradient_matches_fd_on_desk_model() {
    // 8x8x32 volume, one block, C=16: FD-check a sample of parameters
    // through the full forward pass and total loss
    let cfg = small_cfg(16);
    let mut ps = ParameterSet::new();
    build_los_model(&mut ps, "m", &cfg, 17);
    ps.insert("in", upos(&[8, 8, 32], 18));
    let gt = {
        let mut d = upos(&[8, 8, 32], 19).data().to_vec();
        for row in d.chunks_mut(32) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        Tensor::from_vec(vec![8, 8, 32], d)
    };
    let run = |p: &ParameterSet| -> (Tape, BoundParams, trtkit::ad::Var) {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, p);
        let x = bound.var("in");
        let (hist, depth) = forward_trt_los(&mut tape, &bound, "m", x, &cfg).unwrap();
        let loss = los_total_loss(&mut tape, hist, &gt, depth, cfg.gamma).unwrap();
        (tape, bound, loss)
    };
    let (tape, bound, loss) = run(&ps);
    let grads = tape.backward(loss);
    let analytic = bound.gradients(&tape, &grads);
    for name in [
        "in",
        "m.ext.down.b",
        "m.ext.pair1.d.b",
        "m.head.w",
        "m.head.b",
        "m.trt.block0.local.ffn.w2.b",
        "m.trt.block0.dec.l.stca.v.b",
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

#[test]
fn soft_argmax_gradient_matches_fd() {
    let x = Tensor::randn(&[2, 2, 8], 1.0, 21);
    let run = |t: &Tensor| -> (Tape, trtkit::ad::Var, trtkit::ad::Var) {
        let mut tape = Tape::new();
        let v = tape.leaf(t.clone());
        let d = soft_argmax_depth(&mut tape, v, 0.7);
        let w = tape.constant(Tensor::randn(&[2, 2], 1.0, 909));
        let prod = tape.mul(d, w);
        let l = tape.sum_all(prod);
        (tape, v, l)
    };
    let (tape, v, l) = run(&x);
    let grads = tape.backward(l);
    let analytic = grads.get(v).unwrap().clone();
    let mut f = |t: &Tensor| {
        let (tape, _, l) = run(t);
        tape.value(l).item()
    };
    let numeric = fd_grad(&mut f, &x, 1e-6);
    assert!(max_rel_err(&analytic, &numeric) < 1e-4);
}

#[test]
fn shuffle_map_gradient_is_permutation_adjoint() {
    // index maps are permutations: the gradient of sum(weighted output)
    // must be the inverse permutation of the weights
    let x = Tensor::randn(&[2, 2, 2, 8], 1.0, 23);
    let wconst = Tensor::randn(&[4, 4, 4, 1], 1.0, 24);
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let y = pixelshuffle_3d(&mut tape, v, 2).unwrap();
    let wc = tape.constant(wconst.clone());
    let prod = tape.mul(y, wc);
    let l = tape.sum_all(prod);
    let grads = tape.backward(l);
    let g = grads.get(v).unwrap().clone();
    // pushing the weights through the inverse shuffle reproduces g
    let mut tape2 = Tape::new();
    let wv = tape2.leaf(wconst);
    let back = pixelunshuffle_3d(&mut tape2, wv, 2).unwrap();
    assert!(g.max_abs_diff(tape2.value(back)) < 1e-15);
}
