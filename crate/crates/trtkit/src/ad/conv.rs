use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::par;

/// Stride/dilation/padding for a 3-D convolution over `[H, W, T, C]`
/// volumes. Weights are `[C_out, k_h, k_w, k_t, C_in]`.
#[derive(Clone, Copy, Debug)]
pub struct Conv3dSpec {
    pub stride: (usize, usize, usize),
    pub dilation: (usize, usize, usize),
    pub padding: (usize, usize, usize),
}

impl Conv3dSpec {
    pub fn unit() -> Self {
        Self {
            stride: (1, 1, 1),
            dilation: (1, 1, 1),
            padding: (0, 0, 0),
        }
    }

    /// kernel-3 "same" convolution with the given stride and dilation;
    /// padding equals the dilation so shape is preserved at stride 1.
    pub fn same3(stride: (usize, usize, usize), dilation: usize) -> Self {
        Self {
            stride,
            dilation: (dilation, dilation, dilation),
            padding: (dilation, dilation, dilation),
        }
    }
}

/// Transposed 3-D convolution spec; weights are `[C_in, k_h, k_w, k_t, C_out]`.
#[derive(Clone, Copy, Debug)]
pub struct ConvTranspose3dSpec {
    pub stride: (usize, usize, usize),
    pub padding: (usize, usize, usize),
}

fn out_dim(i: usize, k: usize, s: usize, d: usize, p: usize) -> usize {
    (i + 2 * p - d * (k - 1) - 1) / s + 1
}

impl Tape {
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv3dSpec) -> Var {
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        assert_eq!(xv.shape().len(), 4, "conv3d input must be 4-D");
        assert_eq!(wv.shape().len(), 5, "conv3d weight must be 5-D");
        let (h, w_in, t, ci) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (co, kh, kw, kt) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
        assert_eq!(wv.shape()[4], ci, "conv3d channel mismatch");
        let (sh, sw, st) = spec.stride;
        let (dh, dw, dt) = spec.dilation;
        let (ph, pw, pt) = spec.padding;
        let ho = out_dim(h, kh, sh, dh, ph);
        let wo = out_dim(w_in, kw, sw, dw, pw);
        let to = out_dim(t, kt, st, dt, pt);
        let ktap = kh * kw * kt;

        let mut data = vec![0.0; ho * wo * to * co];
        par::for_each_chunk_mut(&mut data, wo * to * co, |oh, plane| {
            let xd = xv.data();
            let wd = wv.data();
            for ow in 0..wo {
                for ot in 0..to {
                    let acc = &mut plane[(ow * to + ot) * co..(ow * to + ot + 1) * co];
                    for ikh in 0..kh {
                        let ih = (oh * sh + ikh * dh).wrapping_sub(ph);
                        if ih >= h {
                            continue;
                        }
                        for ikw in 0..kw {
                            let iw = (ow * sw + ikw * dw).wrapping_sub(pw);
                            if iw >= w_in {
                                continue;
                            }
                            for ikt in 0..kt {
                                let it = (ot * st + ikt * dt).wrapping_sub(pt);
                                if it >= t {
                                    continue;
                                }
                                let xb = ((ih * w_in + iw) * t + it) * ci;
                                let tap = (ikh * kw + ikw) * kt + ikt;
                                for (c, slot) in acc.iter_mut().enumerate() {
                                    let wb = (c * ktap + tap) * ci;
                                    let mut s = 0.0;
                                    for cc in 0..ci {
                                        s += xd[xb + cc] * wd[wb + cc];
                                    }
                                    *slot += s;
                                }
                            }
                        }
                    }
                }
            }
        });
        let out = Tensor::from_vec(vec![ho, wo, to, co], data);
        let y = self.push(
            out,
            Some(Box::new(move |g| {
                let gd = g.data();
                let wd = wv.data();
                let xd = xv.data();
                // input gradient: gather over kernel taps
                let mut gx = vec![0.0; h * w_in * t * ci];
                par::for_each_chunk_mut(&mut gx, w_in * t * ci, |ih, plane| {
                    for iw in 0..w_in {
                        for it in 0..t {
                            let acc = &mut plane[(iw * t + it) * ci..(iw * t + it + 1) * ci];
                            for ikh in 0..kh {
                                let num = ih + ph;
                                if num < ikh * dh {
                                    continue;
                                }
                                let r = num - ikh * dh;
                                if r % sh != 0 {
                                    continue;
                                }
                                let oh = r / sh;
                                if oh >= ho {
                                    continue;
                                }
                                for ikw in 0..kw {
                                    let num = iw + pw;
                                    if num < ikw * dw {
                                        continue;
                                    }
                                    let r = num - ikw * dw;
                                    if r % sw != 0 {
                                        continue;
                                    }
                                    let ow = r / sw;
                                    if ow >= wo {
                                        continue;
                                    }
                                    for ikt in 0..kt {
                                        let num = it + pt;
                                        if num < ikt * dt {
                                            continue;
                                        }
                                        let r = num - ikt * dt;
                                        if r % st != 0 {
                                            continue;
                                        }
                                        let ot = r / st;
                                        if ot >= to {
                                            continue;
                                        }
                                        let gb = ((oh * wo + ow) * to + ot) * co;
                                        let tap = (ikh * kw + ikw) * kt + ikt;
                                        for c in 0..co {
                                            let gv = gd[gb + c];
                                            if gv == 0.0 {
                                                continue;
                                            }
                                            let wb = (c * ktap + tap) * ci;
                                            for (cc, slot) in acc.iter_mut().enumerate() {
                                                *slot += gv * wd[wb + cc];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                // weight gradient
                let mut gw = vec![0.0; co * ktap * ci];
                par::for_each_chunk_mut(&mut gw, ktap * ci, |c, wslab| {
                    for oh in 0..ho {
                        for ow in 0..wo {
                            for ot in 0..to {
                                let gv = gd[((oh * wo + ow) * to + ot) * co + c];
                                if gv == 0.0 {
                                    continue;
                                }
                                for ikh in 0..kh {
                                    let ih = (oh * sh + ikh * dh).wrapping_sub(ph);
                                    if ih >= h {
                                        continue;
                                    }
                                    for ikw in 0..kw {
                                        let iw = (ow * sw + ikw * dw).wrapping_sub(pw);
                                        if iw >= w_in {
                                            continue;
                                        }
                                        for ikt in 0..kt {
                                            let it = (ot * st + ikt * dt).wrapping_sub(pt);
                                            if it >= t {
                                                continue;
                                            }
                                            let xb = ((ih * w_in + iw) * t + it) * ci;
                                            let tap = (ikh * kw + ikw) * kt + ikt;
                                            for cc in 0..ci {
                                                wslab[tap * ci + cc] += gv * xd[xb + cc];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                vec![
                    (x.0, Tensor::from_vec(vec![h, w_in, t, ci], gx)),
                    (w.0, Tensor::from_vec(vec![co, kh, kw, kt, ci], gw)),
                ]
            })),
        );
        match b {
            Some(b) => self.add_bias(y, b),
            None => y,
        }
    }

    pub fn conv_transpose3d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvTranspose3dSpec,
    ) -> Var {
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        assert_eq!(xv.shape().len(), 4);
        assert_eq!(wv.shape().len(), 5);
        let (h, w_in, t, ci) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (kh, kw, kt, co) = (wv.shape()[1], wv.shape()[2], wv.shape()[3], wv.shape()[4]);
        assert_eq!(wv.shape()[0], ci, "conv_transpose3d channel mismatch");
        let (sh, sw, st) = spec.stride;
        let (ph, pw, pt) = spec.padding;
        let ho = (h - 1) * sh + kh - 2 * ph;
        let wo = (w_in - 1) * sw + kw - 2 * pw;
        let to = (t - 1) * st + kt - 2 * pt;
        let ktap = kh * kw * kt;

        let mut data = vec![0.0; ho * wo * to * co];
        par::for_each_chunk_mut(&mut data, wo * to * co, |oh, plane| {
            let xd = xv.data();
            let wd = wv.data();
            for ow in 0..wo {
                for ot in 0..to {
                    let acc = &mut plane[(ow * to + ot) * co..(ow * to + ot + 1) * co];
                    for ikh in 0..kh {
                        let num = oh + ph;
                        if num < ikh || (num - ikh) % sh != 0 {
                            continue;
                        }
                        let ih = (num - ikh) / sh;
                        if ih >= h {
                            continue;
                        }
                        for ikw in 0..kw {
                            let num = ow + pw;
                            if num < ikw || (num - ikw) % sw != 0 {
                                continue;
                            }
                            let iw = (num - ikw) / sw;
                            if iw >= w_in {
                                continue;
                            }
                            for ikt in 0..kt {
                                let num = ot + pt;
                                if num < ikt || (num - ikt) % st != 0 {
                                    continue;
                                }
                                let it = (num - ikt) / st;
                                if it >= t {
                                    continue;
                                }
                                let xb = ((ih * w_in + iw) * t + it) * ci;
                                let tap = (ikh * kw + ikw) * kt + ikt;
                                for cc in 0..ci {
                                    let xval = xd[xb + cc];
                                    if xval == 0.0 {
                                        continue;
                                    }
                                    let wb = (cc * ktap + tap) * co;
                                    for (c, slot) in acc.iter_mut().enumerate() {
                                        *slot += xval * wd[wb + c];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
        let out = Tensor::from_vec(vec![ho, wo, to, co], data);
        let y = self.push(
            out,
            Some(Box::new(move |g| {
                let gd = g.data();
                let wd = wv.data();
                let xd = xv.data();
                let mut gx = vec![0.0; h * w_in * t * ci];
                let mut gw = vec![0.0; ci * ktap * co];
                for ih in 0..h {
                    for iw in 0..w_in {
                        for it in 0..t {
                            let xb = ((ih * w_in + iw) * t + it) * ci;
                            for ikh in 0..kh {
                                let oh = (ih * sh + ikh).wrapping_sub(ph);
                                if oh >= ho {
                                    continue;
                                }
                                for ikw in 0..kw {
                                    let ow = (iw * sw + ikw).wrapping_sub(pw);
                                    if ow >= wo {
                                        continue;
                                    }
                                    for ikt in 0..kt {
                                        let ot = (it * st + ikt).wrapping_sub(pt);
                                        if ot >= to {
                                            continue;
                                        }
                                        let gb = ((oh * wo + ow) * to + ot) * co;
                                        let tap = (ikh * kw + ikw) * kt + ikt;
                                        for cc in 0..ci {
                                            let wb = (cc * ktap + tap) * co;
                                            let mut s = 0.0;
                                            for c in 0..co {
                                                let gv = gd[gb + c];
                                                s += gv * wd[wb + c];
                                                gw[wb + c] += gv * xd[xb + cc];
                                            }
                                            gx[xb + cc] += s;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                vec![
                    (x.0, Tensor::from_vec(vec![h, w_in, t, ci], gx)),
                    (w.0, Tensor::from_vec(vec![ci, kh, kw, kt, co], gw)),
                ]
            })),
        );
        match b {
            Some(b) => self.add_bias(y, b),
            None => y,
        }
    }
}
