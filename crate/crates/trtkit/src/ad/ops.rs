use std::sync::Arc;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::par;

/// Fixed linear map with an explicit adjoint, recorded on the tape as a
/// single node (used for the frequency-wavenumber transform).
pub trait LinearOp: Send + Sync {
    fn forward(&self, x: &Tensor) -> Tensor;
    /// Adjoint with respect to the real inner product.
    fn adjoint(&self, grad_out: &Tensor) -> Tensor;
}

pub(crate) fn matmul_2d(
    a: &[f64],
    b: &[f64],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
) -> Vec<f64> {
    // a is m x k (k x m when ta), b is k x n (n x k when tb)
    let mut out = vec![0.0; m * n];
    par::for_each_chunk_mut(&mut out, n, |i, row| {
        for kk in 0..k {
            let av = if ta { a[kk * m + i] } else { a[i * k + kk] };
            if av == 0.0 {
                continue;
            }
            if tb {
                for (j, o) in row.iter_mut().enumerate() {
                    *o += av * b[j * k + kk];
                }
            } else {
                let brow = &b[kk * n..kk * n + n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    });
    out
}

fn unary(
    tape: &mut Tape,
    x: Var,
    f: impl Fn(f64) -> f64,
    df: impl Fn(f64) -> f64 + 'static,
) -> Var {
    let xv = tape.value(x).clone();
    let out = xv.map(f);
    tape.push(
        out,
        Some(Box::new(move |g| {
            let data = g
                .data()
                .iter()
                .zip(xv.data())
                .map(|(&gv, &v)| gv * df(v))
                .collect();
            vec![(x.0, Tensor::from_vec(xv.shape().to_vec(), data))]
        })),
    )
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a).clone();
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "add shape mismatch");
        let out = av.add_tensor(bv);
        self.push(
            out,
            Some(Box::new(move |g| vec![(a.0, g.clone()), (b.0, g.clone())])),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let neg = self.scale(b, -1.0);
        self.add(a, neg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        assert_eq!(av.shape(), bv.shape(), "mul shape mismatch");
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::from_vec(av.shape().to_vec(), data);
        self.push(
            out,
            Some(Box::new(move |g| {
                let ga = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                let gb = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                vec![
                    (a.0, Tensor::from_vec(bv.shape().to_vec(), ga)),
                    (b.0, Tensor::from_vec(av.shape().to_vec(), gb)),
                ]
            })),
        )
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        unary(self, x, move |v| v * c, move |_| c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        unary(self, x, move |v| v + c, |_| 1.0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        unary(self, x, |v| v.max(0.0), |v| if v > 0.0 { 1.0 } else { 0.0 })
    }

    /// tanh-form GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        const A: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const B: f64 = 0.044715;
        unary(
            self,
            x,
            |v| 0.5 * v * (1.0 + (A * (v + B * v * v * v)).tanh()),
            |v| {
                let inner = A * (v + B * v * v * v);
                let t = inner.tanh();
                let dinner = A * (1.0 + 3.0 * B * v * v);
                0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner
            },
        )
    }

    /// Numerically stable softplus ln(1 + e^x).
    pub fn softplus(&mut self, x: Var) -> Var {
        unary(
            self,
            x,
            |v| {
                if v > 30.0 {
                    v
                } else {
                    v.max(0.0) + (-v.abs()).exp().ln_1p()
                }
            },
            |v| 1.0 / (1.0 + (-v).exp()),
        )
    }

    /// Broadcast-add `b` (shape `[C]`) along the last dimension of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let xv = self.value(x).clone();
        let bv = self.value(b).clone();
        let c = *xv.shape().last().unwrap();
        assert_eq!(bv.shape(), [c], "bias must match last dim");
        let mut data = xv.data().to_vec();
        for chunk in data.chunks_mut(c) {
            for (o, &add) in chunk.iter_mut().zip(bv.data()) {
                *o += add;
            }
        }
        let out = Tensor::from_vec(xv.shape().to_vec(), data);
        self.push(
            out,
            Some(Box::new(move |g| {
                let mut gb = vec![0.0; c];
                for chunk in g.data().chunks(c) {
                    for (acc, &gv) in gb.iter_mut().zip(chunk) {
                        *acc += gv;
                    }
                }
                vec![(x.0, g.clone()), (b.0, Tensor::from_vec(vec![c], gb))]
            })),
        )
    }

    /// `x @ w + b` over the flattened leading dims; `w` is `[E_in, E_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        let e_in = *xv.shape().last().unwrap();
        assert_eq!(wv.shape()[0], e_in, "linear weight mismatch");
        let e_out = wv.shape()[1];
        let rows = xv.numel() / e_in;
        let data = matmul_2d(xv.data(), wv.data(), rows, e_in, e_out, false, false);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = e_out;
        let out = Tensor::from_vec(shape, data);
        let y = self.push(
            out,
            Some(Box::new(move |g| {
                // gx = g w^T, gw = x^T g
                let gx = matmul_2d(g.data(), wv.data(), rows, e_out, e_in, false, true);
                let gw = matmul_2d(xv.data(), g.data(), e_in, rows, e_out, true, false);
                vec![
                    (x.0, Tensor::from_vec(xv.shape().to_vec(), gx)),
                    (w.0, Tensor::from_vec(vec![e_in, e_out], gw)),
                ]
            })),
        );
        match b {
            Some(b) => self.add_bias(y, b),
            None => y,
        }
    }

    /// Batched matmul `[B,M,K] x [B,K,N]`, with transpose flags applying
    /// to the trailing two dims.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        assert_eq!(av.shape().len(), 3);
        assert_eq!(bv.shape().len(), 3);
        let bsz = av.shape()[0];
        assert_eq!(bv.shape()[0], bsz);
        let (m, k) = if ta {
            (av.shape()[2], av.shape()[1])
        } else {
            (av.shape()[1], av.shape()[2])
        };
        let (kb, n) = if tb {
            (bv.shape()[2], bv.shape()[1])
        } else {
            (bv.shape()[1], bv.shape()[2])
        };
        assert_eq!(k, kb, "bmm inner dim mismatch");
        let mut data = vec![0.0; bsz * m * n];
        let a_stride = av.numel() / bsz;
        let b_stride = bv.numel() / bsz;
        par::for_each_chunk_mut(&mut data, m * n, |i, out| {
            let sa = &av.data()[i * a_stride..(i + 1) * a_stride];
            let sb = &bv.data()[i * b_stride..(i + 1) * b_stride];
            out.copy_from_slice(&matmul_2d(sa, sb, m, k, n, ta, tb));
        });
        let out = Tensor::from_vec(vec![bsz, m, n], data);
        self.push(
            out,
            Some(Box::new(move |g| {
                let a_sh = av.shape().to_vec();
                let b_sh = bv.shape().to_vec();
                let mut ga = vec![0.0; av.numel()];
                let mut gb = vec![0.0; bv.numel()];
                for i in 0..bsz {
                    let gg = &g.data()[i * m * n..(i + 1) * m * n];
                    let sa = &av.data()[i * a_stride..(i + 1) * a_stride];
                    let sb = &bv.data()[i * b_stride..(i + 1) * b_stride];
                    // dA = dY B^T (or transposed variants)
                    let ga_i = if ta {
                        // A stored as [K,M]: dA = B dY^T with layout [k,m]
                        if tb {
                            matmul_2d(sb, gg, k, n, m, true, true)
                        } else {
                            matmul_2d(sb, gg, k, n, m, false, true)
                        }
                    } else if tb {
                        matmul_2d(gg, sb, m, n, k, false, false)
                    } else {
                        matmul_2d(gg, sb, m, n, k, false, true)
                    };
                    let gb_i = if tb {
                        // B stored as [N,K]: dB = dY^T A
                        if ta {
                            matmul_2d(gg, sa, n, m, k, true, true)
                        } else {
                            matmul_2d(gg, sa, n, m, k, true, false)
                        }
                    } else if ta {
                        matmul_2d(sa, gg, k, m, n, false, false)
                    } else {
                        matmul_2d(sa, gg, k, m, n, true, false)
                    };
                    ga[i * a_stride..(i + 1) * a_stride].copy_from_slice(&ga_i);
                    gb[i * b_stride..(i + 1) * b_stride].copy_from_slice(&gb_i);
                }
                vec![
                    (a.0, Tensor::from_vec(a_sh, ga)),
                    (b.0, Tensor::from_vec(b_sh, gb)),
                ]
            })),
        )
    }

    /// Softmax along the last dimension. Rows sum to one exactly up to
    /// rounding; subtracting the row max keeps it stable.
    pub fn softmax_lastdim(&mut self, x: Var) -> Var {
        let xv = self.value(x).clone();
        let n = *xv.shape().last().unwrap();
        let mut data = xv.data().to_vec();
        par::for_each_chunk_mut(&mut data, n, |_, row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        });
        let out = Tensor::from_vec(xv.shape().to_vec(), data);
        let yv = out.clone();
        self.push(
            out,
            Some(Box::new(move |g| {
                let mut gx = g.data().to_vec();
                for (grow, yrow) in gx.chunks_mut(n).zip(yv.data().chunks(n)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for (gv, &y) in grow.iter_mut().zip(yrow) {
                        *gv = y * (*gv - dot);
                    }
                }
                vec![(x.0, Tensor::from_vec(yv.shape().to_vec(), gx))]
            })),
        )
    }

    /// Layer normalization along the last dimension with affine params.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f64 = 1e-5;
        let xv = self.value(x).clone();
        let gv = self.value(gamma).clone();
        let c = *xv.shape().last().unwrap();
        assert_eq!(gv.shape(), [c]);
        let rows = xv.numel() / c;
        let mut xhat = vec![0.0; xv.numel()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let istd = 1.0 / (var + EPS).sqrt();
            inv_std[r] = istd;
            for (o, &v) in xhat[r * c..(r + 1) * c].iter_mut().zip(row) {
                *o = (v - mean) * istd;
            }
        }
        let bv = self.value(beta).clone();
        let mut data = vec![0.0; xv.numel()];
        for r in 0..rows {
            for j in 0..c {
                data[r * c + j] = xhat[r * c + j] * gv.data()[j] + bv.data()[j];
            }
        }
        let out = Tensor::from_vec(xv.shape().to_vec(), data);
        let xhat = Arc::new(xhat);
        let inv_std = Arc::new(inv_std);
        self.push(
            out,
            Some(Box::new(move |g| {
                let mut gx = vec![0.0; rows * c];
                let mut ggamma = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                for r in 0..rows {
                    let grow = &g.data()[r * c..(r + 1) * c];
                    let xh = &xhat[r * c..(r + 1) * c];
                    let mut mean_dy = 0.0;
                    let mut mean_dyxh = 0.0;
                    for j in 0..c {
                        let dy = grow[j] * gv.data()[j];
                        mean_dy += dy;
                        mean_dyxh += dy * xh[j];
                        ggamma[j] += grow[j] * xh[j];
                        gbeta[j] += grow[j];
                    }
                    mean_dy /= c as f64;
                    mean_dyxh /= c as f64;
                    for j in 0..c {
                        let dy = grow[j] * gv.data()[j];
                        gx[r * c + j] = inv_std[r] * (dy - mean_dy - xh[j] * mean_dyxh);
                    }
                }
                vec![
                    (x.0, Tensor::from_vec(xv.shape().to_vec(), gx)),
                    (gamma.0, Tensor::from_vec(vec![c], ggamma)),
                    (beta.0, Tensor::from_vec(vec![c], gbeta)),
                ]
            })),
        )
    }

    /// Zero-cost view with a new shape.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let xv = self.value(x).clone();
        let old_shape = xv.shape().to_vec();
        let out = xv.reshaped(shape);
        self.push(
            out,
            Some(Box::new(move |g| {
                vec![(x.0, g.reshaped(old_shape.clone()))]
            })),
        )
    }

    /// Gather: `out[i] = x[map[i]]`. Backward scatter-adds, so maps with
    /// repeated entries (nearest-neighbor upsampling) stay correct.
    pub fn index_map(&mut self, x: Var, shape: Vec<usize>, map: Arc<Vec<usize>>) -> Var {
        let xv = self.value(x).clone();
        assert_eq!(shape.iter().product::<usize>(), map.len());
        let mut data = vec![0.0; map.len()];
        par::for_each_chunk_mut(&mut data, 1024.min(map.len()), |i, chunk| {
            let base = i * 1024.min(map.len());
            for (j, o) in chunk.iter_mut().enumerate() {
                *o = xv.data()[map[base + j]];
            }
        });
        let out = Tensor::from_vec(shape, data);
        let in_numel = xv.numel();
        let in_shape = xv.shape().to_vec();
        self.push(
            out,
            Some(Box::new(move |g| {
                let mut gx = vec![0.0; in_numel];
                for (i, &src) in map.iter().enumerate() {
                    gx[src] += g.data()[i];
                }
                vec![(x.0, Tensor::from_vec(in_shape.clone(), gx))]
            })),
        )
    }

    /// Concatenate along the last dimension.
    pub fn concat_lastdim(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let shapes: Vec<Vec<usize>> = parts
            .iter()
            .map(|&p| self.value(p).shape().to_vec())
            .collect();
        let lead = &shapes[0][..shapes[0].len() - 1];
        for s in &shapes {
            assert_eq!(&s[..s.len() - 1], lead, "concat leading dims mismatch");
        }
        let widths: Vec<usize> = shapes.iter().map(|s| *s.last().unwrap()).collect();
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let values: Vec<Tensor> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let mut data = vec![0.0; rows * total];
        for r in 0..rows {
            let mut off = 0;
            for (v, &w) in values.iter().zip(&widths) {
                data[r * total + off..r * total + off + w]
                    .copy_from_slice(&v.data()[r * w..(r + 1) * w]);
                off += w;
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let out = Tensor::from_vec(shape, data);
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(
            out,
            Some(Box::new(move |g| {
                let mut res = Vec::new();
                let mut off = 0;
                for (idx, (&id, &w)) in ids.iter().zip(&widths).enumerate() {
                    let mut gp = vec![0.0; rows * w];
                    for r in 0..rows {
                        gp[r * w..(r + 1) * w]
                            .copy_from_slice(&g.data()[r * total + off..r * total + off + w]);
                    }
                    res.push((id, Tensor::from_vec(shapes[idx].clone(), gp)));
                    off += w;
                }
                res
            })),
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let xv = self.value(x).clone();
        let s: f64 = xv.data().iter().sum();
        self.push(
            Tensor::scalar(s),
            Some(Box::new(move |g| {
                let gv = g.item();
                vec![(x.0, Tensor::filled(xv.shape(), gv))]
            })),
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Per-row dot product with a constant vector along the last dim.
    pub fn dot_const_lastdim(&mut self, x: Var, w: Arc<Vec<f64>>) -> Var {
        let xv = self.value(x).clone();
        let n = *xv.shape().last().unwrap();
        assert_eq!(w.len(), n);
        let rows = xv.numel() / n;
        let mut data = vec![0.0; rows];
        for (r, o) in data.iter_mut().enumerate() {
            *o = xv.data()[r * n..(r + 1) * n]
                .iter()
                .zip(w.iter())
                .map(|(a, b)| a * b)
                .sum();
        }
        let shape = xv.shape()[..xv.shape().len() - 1].to_vec();
        let shape = if shape.is_empty() { vec![1] } else { shape };
        let out = Tensor::from_vec(shape, data);
        self.push(
            out,
            Some(Box::new(move |g| {
                let mut gx = vec![0.0; rows * n];
                for r in 0..rows {
                    let gv = g.data()[r];
                    for j in 0..n {
                        gx[r * n + j] = gv * w[j];
                    }
                }
                vec![(x.0, Tensor::from_vec(xv.shape().to_vec(), gx))]
            })),
        )
    }

    /// Normalize each row of the last dimension to sum to one
    /// (`y = x / (sum(x) + eps)`).
    pub fn normalize_lastdim(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x).clone();
        let n = *xv.shape().last().unwrap();
        let rows = xv.numel() / n;
        let mut sums = vec![0.0; rows];
        let mut data = xv.data().to_vec();
        for r in 0..rows {
            let row = &mut data[r * n..(r + 1) * n];
            let s: f64 = row.iter().sum::<f64>() + eps;
            sums[r] = s;
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let out = Tensor::from_vec(xv.shape().to_vec(), data);
        let yv = out.clone();
        self.push(
            out,
            Some(Box::new(move |g| {
                let mut gx = vec![0.0; rows * n];
                for r in 0..rows {
                    let grow = &g.data()[r * n..(r + 1) * n];
                    let yrow = &yv.data()[r * n..(r + 1) * n];
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gx[r * n + j] = (grow[j] - dot) / sums[r];
                    }
                }
                vec![(x.0, Tensor::from_vec(yv.shape().to_vec(), gx))]
            })),
        )
    }

    /// Mean over rows of the KL divergence `sum (p+eps) ln((p+eps)/(q+eps))`
    /// along the last dim; `q` is a constant target.
    pub fn kl_mean_lastdim(&mut self, pred: Var, gt: &Tensor, eps: f64) -> Var {
        let pv = self.value(pred).clone();
        assert_eq!(pv.shape(), gt.shape(), "kl shape mismatch");
        let n = *pv.shape().last().unwrap();
        let rows = pv.numel() / n;
        let mut total = 0.0;
        for (p, q) in pv.data().iter().zip(gt.data()) {
            let pe = p + eps;
            let qe = q + eps;
            total += pe * (pe / qe).ln();
        }
        let value = total / rows as f64;
        let gtc = gt.clone();
        self.push(
            Tensor::scalar(value),
            Some(Box::new(move |g| {
                let gs = g.item() / rows as f64;
                let data = pv
                    .data()
                    .iter()
                    .zip(gtc.data())
                    .map(|(p, q)| gs * (((p + eps) / (q + eps)).ln() + 1.0))
                    .collect();
                vec![(pred.0, Tensor::from_vec(pv.shape().to_vec(), data))]
            })),
        )
    }

    /// Anisotropic 2-D total variation: mean absolute difference over all
    /// horizontal and vertical neighbor pairs.
    pub fn tv2d(&mut self, d: Var) -> Var {
        let dv = self.value(d).clone();
        assert_eq!(dv.shape().len(), 2);
        let (h, w) = (dv.shape()[0], dv.shape()[1]);
        let count = h * w.saturating_sub(1) + h.saturating_sub(1) * w;
        if count == 0 {
            return self.constant(Tensor::scalar(0.0));
        }
        let x = dv.data();
        let mut total = 0.0;
        for i in 0..h {
            for j in 0..w {
                if j + 1 < w {
                    total += (x[i * w + j + 1] - x[i * w + j]).abs();
                }
                if i + 1 < h {
                    total += (x[(i + 1) * w + j] - x[i * w + j]).abs();
                }
            }
        }
        self.push(
            Tensor::scalar(total / count as f64),
            Some(Box::new(move |g| {
                let gs = g.item() / count as f64;
                let x = dv.data();
                let mut gd = vec![0.0; h * w];
                for i in 0..h {
                    for j in 0..w {
                        if j + 1 < w {
                            let s = (x[i * w + j + 1] - x[i * w + j]).signum();
                            gd[i * w + j + 1] += gs * s;
                            gd[i * w + j] -= gs * s;
                        }
                        if i + 1 < h {
                            let s = (x[(i + 1) * w + j] - x[i * w + j]).signum();
                            gd[(i + 1) * w + j] += gs * s;
                            gd[i * w + j] -= gs * s;
                        }
                    }
                }
                vec![(d.0, Tensor::from_vec(vec![h, w], gd))]
            })),
        )
    }

    /// Mean absolute error against a constant target, optionally
    /// restricted to a mask (1 = counted).
    pub fn l1_mean_masked(&mut self, x: Var, target: &Tensor, mask: Option<&Tensor>) -> Var {
        let xv = self.value(x).clone();
        assert_eq!(xv.shape(), target.shape(), "l1 shape mismatch");
        let m: Vec<f64> = match mask {
            Some(m) => {
                assert_eq!(m.shape(), xv.shape());
                m.data().to_vec()
            }
            None => vec![1.0; xv.numel()],
        };
        let count: f64 = m.iter().sum();
        assert!(count > 0.0, "l1 mask is empty");
        let mut total = 0.0;
        for i in 0..xv.numel() {
            total += m[i] * (xv.data()[i] - target.data()[i]).abs();
        }
        let tv = target.clone();
        self.push(
            Tensor::scalar(total / count),
            Some(Box::new(move |g| {
                let gs = g.item() / count;
                let data = (0..xv.numel())
                    .map(|i| gs * m[i] * (xv.data()[i] - tv.data()[i]).signum())
                    .collect();
                vec![(x.0, Tensor::from_vec(xv.shape().to_vec(), data))]
            })),
        )
    }

    /// Max along the last dimension; gradient flows to the first maximum.
    pub fn max_lastdim(&mut self, x: Var) -> Var {
        let xv = self.value(x).clone();
        let n = *xv.shape().last().unwrap();
        let rows = xv.numel() / n;
        let mut data = vec![0.0; rows];
        let mut argmax = vec![0usize; rows];
        for r in 0..rows {
            let row = &xv.data()[r * n..(r + 1) * n];
            let mut best = 0;
            for j in 1..n {
                if row[j] > row[best] {
                    best = j;
                }
            }
            data[r] = row[best];
            argmax[r] = best;
        }
        let shape = xv.shape()[..xv.shape().len() - 1].to_vec();
        let shape = if shape.is_empty() { vec![1] } else { shape };
        let out = Tensor::from_vec(shape, data);
        self.push(
            out,
            Some(Box::new(move |g| {
                let mut gx = vec![0.0; rows * n];
                for r in 0..rows {
                    gx[r * n + argmax[r]] = g.data()[r];
                }
                vec![(x.0, Tensor::from_vec(xv.shape().to_vec(), gx))]
            })),
        )
    }

    /// Strided average pooling over the two leading spatial dims of an
    /// `[H, W, T, C]` volume.
    pub fn avg_pool_spatial(&mut self, x: Var, s: usize) -> Var {
        let xv = self.value(x).clone();
        assert_eq!(xv.shape().len(), 4);
        let (h, w, t, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        assert!(h % s == 0 && w % s == 0, "pool factor must divide dims");
        if s == 1 {
            return self.scale(x, 1.0);
        }
        let (ho, wo) = (h / s, w / s);
        let inner = t * c;
        let mut data = vec![0.0; ho * wo * inner];
        let norm = 1.0 / (s * s) as f64;
        for oh in 0..ho {
            for ow in 0..wo {
                let dst = (oh * wo + ow) * inner;
                for dh in 0..s {
                    for dw in 0..s {
                        let src = ((oh * s + dh) * w + ow * s + dw) * inner;
                        for k in 0..inner {
                            data[dst + k] += xv.data()[src + k] * norm;
                        }
                    }
                }
            }
        }
        let out = Tensor::from_vec(vec![ho, wo, t, c], data);
        self.push(
            out,
            Some(Box::new(move |g| {
                let mut gx = vec![0.0; h * w * inner];
                for oh in 0..ho {
                    for ow in 0..wo {
                        let src = (oh * wo + ow) * inner;
                        for dh in 0..s {
                            for dw in 0..s {
                                let dst = ((oh * s + dh) * w + ow * s + dw) * inner;
                                for k in 0..inner {
                                    gx[dst + k] += g.data()[src + k] * norm;
                                }
                            }
                        }
                    }
                }
                vec![(x.0, Tensor::from_vec(vec![h, w, t, c], gx))]
            })),
        )
    }

    /// Record a fixed linear operator (e.g. the FK transform) with its
    /// exact adjoint as the backward pass.
    pub fn apply_linear_op(&mut self, x: Var, op: Arc<dyn LinearOp>) -> Var {
        let xv = self.value(x).clone();
        let out = op.forward(&xv);
        self.push(out, Some(Box::new(move |g| vec![(x.0, op.adjoint(g))])))
    }
}

/// Build the gather map for a permutation of axes; `out = x.permute(axes)`.
pub fn permute_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Arc<Vec<usize>>) {
    assert_eq!(shape.len(), axes.len());
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let n: usize = shape.iter().product();
    let mut in_strides = vec![1usize; shape.len()];
    for i in (0..shape.len() - 1).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let mut map = vec![0usize; n];
    let mut idx = vec![0usize; out_shape.len()];
    for slot in map.iter_mut() {
        let mut src = 0;
        for (d, &i) in idx.iter().enumerate() {
            src += i * in_strides[axes[d]];
        }
        *slot = src;
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out_shape, Arc::new(map))
}

impl Tape {
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Var {
        let (shape, map) = permute_map(self.value(x).shape(), axes);
        self.index_map(x, shape, map)
    }

    /// Nearest-neighbor spatial upsampling of an `[H, W, T, C]` volume.
    pub fn upsample_nearest_spatial(&mut self, x: Var, s: usize) -> Var {
        if s == 1 {
            return self.scale(x, 1.0);
        }
        let sh = self.value(x).shape().to_vec();
        assert_eq!(sh.len(), 4);
        let (h, w, t, c) = (sh[0], sh[1], sh[2], sh[3]);
        let inner = t * c;
        let mut map = Vec::with_capacity(h * s * w * s * inner);
        for oh in 0..h * s {
            for ow in 0..w * s {
                let src = ((oh / s) * w + ow / s) * inner;
                for k in 0..inner {
                    map.push(src + k);
                }
            }
        }
        self.index_map(x, vec![h * s, w * s, t, c], Arc::new(map))
    }
}
