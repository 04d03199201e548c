//! Convolution, transposed convolution and pooling on NCHW tensors.
//!
//! All convolutions are stride 1 with "same" zero padding, so kernels must
//! have odd spatial size.

use std::rc::Rc;

use super::{gemm, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn nchw(shape: &[usize], what: &str) -> Result<[usize; 4]> {
    match shape {
        &[b, c, h, w] => Ok([b, c, h, w]),
        _ => Err(Error::shape(format!(
            "{what} expects NCHW input, got {shape:?}"
        ))),
    }
}

/// Unfolds one image (c, h, w) into columns (c·k·k, h·w).
fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, cols: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * hw..][..hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (xo, d) in dst.iter_mut().enumerate() {
                        let sx = xo as isize + dx;
                        *d = if sx < 0 || sx >= w as isize {
                            0.0
                        } else {
                            src[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into an image.
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize, x: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * hw..][..hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    for (xo, v) in src.iter().enumerate() {
                        let sx = xo as isize + dx;
                        if sx >= 0 && sx < w as isize {
                            dst[sx as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

impl Var {
    /// Dense 2-D convolution; `kernel` is (c_out, c_in, k, k) with odd k.
    pub fn conv2d(&self, kernel: &Var) -> Result<Var> {
        let [b, c, h, w] = nchw(self.shape(), "conv2d")?;
        let &[co, ci, k, k2] = kernel.shape() else {
            return Err(Error::shape(format!(
                "conv2d kernel must be rank 4, got {:?}",
                kernel.shape()
            )));
        };
        if ci != c || k != k2 || k % 2 == 0 {
            return Err(Error::shape(format!(
                "conv2d: input {:?} incompatible with kernel {:?}",
                self.shape(),
                kernel.shape()
            )));
        }
        let hw = h * w;
        let ckk = c * k * k;
        let xd = self.value().data();
        let kd = kernel.value().data();
        let mut out = vec![0.0; b * co * hw];
        // 1x1 kernels need no unfolding
        let cols: Rc<Vec<f64>> = if k == 1 {
            self.rc_data()
        } else {
            let mut cols = vec![0.0; b * ckk * hw];
            for bi in 0..b {
                im2col(&xd[bi * c * hw..], c, h, w, k, &mut cols[bi * ckk * hw..]);
            }
            Rc::new(cols)
        };
        for bi in 0..b {
            gemm(
                co,
                ckk,
                hw,
                kd,
                false,
                &cols[bi * ckk * hw..],
                false,
                0.0,
                &mut out[bi * co * hw..],
            );
        }
        self.tape().add_macs((b * co * ckk * hw) as u64);
        let rk = kernel.rc();
        let out = Tensor::from_parts(vec![b, co, h, w], out);
        self.tape()
            .record("conv2d", out, &[self, kernel], move |g, needs| {
                let gd = g.data();
                let gx = needs[0].then(|| {
                    let mut gx = vec![0.0; b * c * hw];
                    let mut gcols = vec![0.0; ckk * hw];
                    for bi in 0..b {
                        let dst = &mut gx[bi * c * hw..(bi + 1) * c * hw];
                        if k == 1 {
                            gemm(
                                ckk,
                                co,
                                hw,
                                rk.data(),
                                true,
                                &gd[bi * co * hw..],
                                false,
                                0.0,
                                dst,
                            );
                        } else {
                            gemm(
                                ckk,
                                co,
                                hw,
                                rk.data(),
                                true,
                                &gd[bi * co * hw..],
                                false,
                                0.0,
                                &mut gcols,
                            );
                            col2im(&gcols, c, h, w, k, dst);
                        }
                    }
                    Tensor::from_parts(vec![b, c, h, w], gx)
                });
                let gk = needs[1].then(|| {
                    let mut gk = vec![0.0; co * ckk];
                    for bi in 0..b {
                        gemm(
                            co,
                            hw,
                            ckk,
                            &gd[bi * co * hw..],
                            false,
                            &cols[bi * ckk * hw..],
                            true,
                            1.0,
                            &mut gk,
                        );
                    }
                    Tensor::from_parts(vec![co, c, k, k], gk)
                });
                vec![gx, gk]
            })
    }

    /// Per-channel 2-D convolution; `kernel` is (c, 1, k, k) with odd k.
    pub fn depthwise_conv2d(&self, kernel: &Var) -> Result<Var> {
        let [b, c, h, w] = nchw(self.shape(), "depthwise_conv2d")?;
        let &[kc, one, k, k2] = kernel.shape() else {
            return Err(Error::shape("depthwise kernel must be rank 4"));
        };
        if kc != c || one != 1 || k != k2 || k % 2 == 0 {
            return Err(Error::shape(format!(
                "depthwise_conv2d: input {:?} incompatible with kernel {:?}",
                self.shape(),
                kernel.shape()
            )));
        }
        let pad = k / 2;
        let hw = h * w;
        let xd = self.value().data();
        let kd = kernel.value().data();
        let mut out = vec![0.0; b * c * hw];
        // valid output range along one axis for kernel offset `o`
        let span = move |o: usize, n: usize| -> (usize, usize) {
            let lo = pad.saturating_sub(o);
            let hi = (n + pad).saturating_sub(o).min(n);
            (lo, hi)
        };
        for bi in 0..b {
            for ch in 0..c {
                let x = &xd[(bi * c + ch) * hw..][..hw];
                let y = &mut out[(bi * c + ch) * hw..][..hw];
                let kk = &kd[ch * k * k..][..k * k];
                for ky in 0..k {
                    let (y0, y1) = span(ky, h);
                    for kx in 0..k {
                        let wv = kk[ky * k + kx];
                        let (x0, x1) = span(kx, w);
                        if x1 <= x0 {
                            continue;
                        }
                        for oy in y0..y1 {
                            let sy = oy + ky - pad;
                            let src = &x[sy * w + x0 + kx - pad..sy * w + x1 + kx - pad];
                            let dst = &mut y[oy * w + x0..oy * w + x1];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        }
        self.tape().add_macs((b * c * hw * k * k) as u64);
        let (rx, rk) = (self.rc(), kernel.rc());
        let out = Tensor::from_parts(vec![b, c, h, w], out);
        self.tape()
            .record("depthwise_conv2d", out, &[self, kernel], move |g, needs| {
                let gd = g.data();
                let xd = rx.data();
                let kd = rk.data();
                let mut gx = needs[0].then(|| vec![0.0; b * c * hw]);
                let mut gk = needs[1].then(|| vec![0.0; c * k * k]);
                for bi in 0..b {
                    for ch in 0..c {
                        let base = (bi * c + ch) * hw;
                        let gy = &gd[base..base + hw];
                        for ky in 0..k {
                            let (y0, y1) = span(ky, h);
                            for kx in 0..k {
                                let (x0, x1) = span(kx, w);
                                let wv = kd[ch * k * k + ky * k + kx];
                                let mut acc = 0.0;
                                for oy in y0..y1 {
                                    let sy = oy + ky - pad;
                                    for ox in x0..x1 {
                                        let gv = gy[oy * w + ox];
                                        let si = base + sy * w + ox + kx - pad;
                                        acc += gv * xd[si];
                                        if let Some(gx) = gx.as_mut() {
                                            gx[si] += wv * gv;
                                        }
                                    }
                                }
                                if let Some(gk) = gk.as_mut() {
                                    gk[ch * k * k + ky * k + kx] += acc;
                                }
                            }
                        }
                    }
                }
                vec![
                    gx.map(|v| Tensor::from_parts(vec![b, c, h, w], v)),
                    gk.map(|v| Tensor::from_parts(vec![c, 1, k, k], v)),
                ]
            })
    }

    /// Transposed convolution with a 2×2 kernel and stride 2, doubling the
    /// spatial extents. `kernel` is (c_in, c_out, 2, 2).
    pub fn conv_transpose2x2(&self, kernel: &Var) -> Result<Var> {
        let [b, c, h, w] = nchw(self.shape(), "conv_transpose2x2")?;
        let &[kc, co, 2, 2] = kernel.shape() else {
            return Err(Error::shape(format!(
                "transposed conv kernel must be (c_in, c_out, 2, 2), got {:?}",
                kernel.shape()
            )));
        };
        if kc != c {
            return Err(Error::shape(format!(
                "conv_transpose2x2: {c} input channels vs kernel {:?}",
                kernel.shape()
            )));
        }
        let hw = h * w;
        let (oh, ow) = (2 * h, 2 * w);
        let xd = self.value().data();
        let kd = kernel.value().data();
        let mut out = vec![0.0; b * co * oh * ow];
        let mut tmp = vec![0.0; co * 4 * hw];
        for bi in 0..b {
            // tmp (co·4, hw) = Kᵀ (co·4, c) · x_b (c, hw)
            gemm(
                co * 4,
                c,
                hw,
                kd,
                true,
                &xd[bi * c * hw..],
                false,
                0.0,
                &mut tmp,
            );
            let dst = &mut out[bi * co * oh * ow..];
            for o in 0..co {
                for d in 0..4 {
                    let (dy, dx) = (d / 2, d % 2);
                    let row = &tmp[(o * 4 + d) * hw..][..hw];
                    for y in 0..h {
                        for x in 0..w {
                            dst[(o * oh + 2 * y + dy) * ow + 2 * x + dx] = row[y * w + x];
                        }
                    }
                }
            }
        }
        self.tape().add_macs((b * co * 4 * c * hw) as u64);
        let (rx, rk) = (self.rc(), kernel.rc());
        let out = Tensor::from_parts(vec![b, co, oh, ow], out);
        self.tape().record(
            "conv_transpose2x2",
            out,
            &[self, kernel],
            move |g, needs| {
                let gd = g.data();
                let mut gx = needs[0].then(|| vec![0.0; b * c * hw]);
                let mut gk = needs[1].then(|| vec![0.0; c * co * 4]);
                let mut gtmp = vec![0.0; co * 4 * hw];
                for bi in 0..b {
                    let src = &gd[bi * co * oh * ow..];
                    for o in 0..co {
                        for d in 0..4 {
                            let (dy, dx) = (d / 2, d % 2);
                            let row = &mut gtmp[(o * 4 + d) * hw..][..hw];
                            for y in 0..h {
                                for x in 0..w {
                                    row[y * w + x] = src[(o * oh + 2 * y + dy) * ow + 2 * x + dx];
                                }
                            }
                        }
                    }
                    if let Some(gx) = gx.as_mut() {
                        gemm(
                            c,
                            co * 4,
                            hw,
                            rk.data(),
                            false,
                            &gtmp,
                            false,
                            0.0,
                            &mut gx[bi * c * hw..],
                        );
                    }
                    if let Some(gk) = gk.as_mut() {
                        gemm(
                            c,
                            hw,
                            co * 4,
                            &rx.data()[bi * c * hw..],
                            false,
                            &gtmp,
                            true,
                            1.0,
                            gk,
                        );
                    }
                }
                vec![
                    gx.map(|v| Tensor::from_parts(vec![b, c, h, w], v)),
                    gk.map(|v| Tensor::from_parts(vec![c, co, 2, 2], v)),
                ]
            },
        )
    }

    /// 2×2 max pooling with stride 2; extents must be even.
    pub fn max_pool2x2(&self) -> Result<Var> {
        let [b, c, h, w] = nchw(self.shape(), "max_pool2x2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!(
                "max_pool2x2 needs even extents, got {h}x{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xd = self.value().data();
        let mut out = vec![0.0; b * c * oh * ow];
        let mut arg = vec![0usize; out.len()];
        for p in 0..b * c {
            for y in 0..oh {
                for x in 0..ow {
                    let base = p * h * w;
                    let cands = [
                        base + 2 * y * w + 2 * x,
                        base + 2 * y * w + 2 * x + 1,
                        base + (2 * y + 1) * w + 2 * x,
                        base + (2 * y + 1) * w + 2 * x + 1,
                    ];
                    // first maximum wins ties
                    let best = cands
                        .into_iter()
                        .reduce(|a, b| if xd[b] > xd[a] { b } else { a })
                        .unwrap();
                    let o = (p * oh + y) * ow + x;
                    out[o] = xd[best];
                    arg[o] = best;
                }
            }
        }
        self.tape().note_kinks(arg.iter().map(|&a| a as u64));
        let n_in = b * c * h * w;
        let out = Tensor::from_parts(vec![b, c, oh, ow], out);
        self.tape()
            .record("max_pool2x2", out, &[self], move |g, _| {
                let mut gx = vec![0.0; n_in];
                for (o, &a) in arg.iter().enumerate() {
                    gx[a] += g.data()[o];
                }
                vec![Some(Tensor::from_parts(vec![b, c, h, w], gx))]
            })
    }

    fn rc_data(&self) -> Rc<Vec<f64>> {
        Rc::new(self.value().data().to_vec())
    }
}
