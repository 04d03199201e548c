//! Window attention and the regular/shifted transformer block pair.
//!
//! Attention runs on a token matrix with one row per spatial position,
//! ordered (batch, y, x). Window partitioning, cyclic shifting and head
//! splitting are all index gathers into that matrix, so the backward pass
//! is a scatter-add and needs no special casing.

use std::rc::Rc;

use super::patch::linear_embed;
use super::{key, LN_EPS};
use crate::autograd::{Var, GATHER_ZERO};
use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamDef};
use crate::tensor::Tensor;

/// Additive score for token pairs that straddle a wrap-around seam.
const MASKED: f64 = -1e30;

/// Row of the token matrix feeding each window slot. Slots are ordered
/// (batch, window row, window column, y in window, x in window). With a
/// nonzero `shift` the grid is rolled by `-shift` on both axes first.
pub fn window_partition_rows(b: usize, h: usize, w: usize, n: usize, shift: usize) -> Vec<usize> {
    let mut rows = Vec::with_capacity(b * h * w);
    for bi in 0..b {
        for wy in 0..h / n {
            for wx in 0..w / n {
                for iy in 0..n {
                    for ix in 0..n {
                        let y = (wy * n + iy + shift) % h;
                        let x = (wx * n + ix + shift) % w;
                        rows.push((bi * h + y) * w + x);
                    }
                }
            }
        }
    }
    rows
}

/// Zero-pads H and W of an NCHW tensor up to multiples of `n`.
pub fn pad_to_multiple(x: &Var, n: usize) -> Result<Var> {
    let &[b, c, h, w] = x.shape() else {
        return Err(Error::shape(format!(
            "padding expects NCHW, got {:?}",
            x.shape()
        )));
    };
    let (ph, pw) = (h.div_ceil(n) * n, w.div_ceil(n) * n);
    if (ph, pw) == (h, w) {
        return Ok(x.clone());
    }
    let mut idx = Vec::with_capacity(b * c * ph * pw);
    for plane in 0..b * c {
        for y in 0..ph {
            for xx in 0..pw {
                idx.push(if y < h && xx < w {
                    (plane * h + y) * w + xx
                } else {
                    GATHER_ZERO
                });
            }
        }
    }
    x.gather(Rc::new(idx), vec![b, c, ph, pw])
}

/// Top-left `h × w` crop of an NCHW tensor.
pub fn crop(x: &Var, h: usize, w: usize) -> Result<Var> {
    let s = x.shape();
    if s.len() != 4 || s[2] < h || s[3] < w {
        return Err(Error::shape(format!("cannot crop {s:?} to {h}x{w}")));
    }
    let mut y = x.clone();
    if s[2] != h {
        y = y.narrow(2, 0, h)?;
    }
    if s[3] != w {
        y = y.narrow(3, 0, w)?;
    }
    Ok(y)
}

fn to_tokens(x: &Var) -> Result<Var> {
    let &[b, c, h, w] = x.shape() else {
        return Err(Error::shape(format!("expected NCHW, got {:?}", x.shape())));
    };
    x.permute(&[0, 2, 3, 1])?.reshape(&[b * h * w, c])
}

fn from_tokens(t: &Var, b: usize, h: usize, w: usize) -> Result<Var> {
    let c = t.shape()[1];
    t.reshape(&[b, h, w, c])?.permute(&[0, 3, 1, 2])
}

/// `x · weight + bias` on a (rows, features) matrix.
fn affine(p: &Bound, x: &Var, prefix: &str) -> Result<Var> {
    x.matmul(p.var(&key(prefix, "weight"))?)?
        .add(p.var(&key(prefix, "bias"))?)
}

/// Two transformer blocks at fixed width: the first attends within
/// regular windows, the second within windows shifted by half a window.
/// Each block is `z = x + LN(attention(x))` followed by
/// `out = z + MLP(LN(z))`.
#[derive(Clone, Debug)]
pub struct SwinPair {
    pub prefix: String,
    pub dim: usize,
    pub window: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
}

impl SwinPair {
    pub fn new(
        prefix: impl Into<String>,
        dim: usize,
        window: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Result<Self> {
        if dim == 0 || window == 0 || heads == 0 || mlp_ratio == 0 {
            return Err(Error::invalid("attention sizes must be positive"));
        }
        if dim % heads != 0 {
            return Err(Error::invalid(format!(
                "{heads} heads do not divide width {dim}"
            )));
        }
        Ok(Self {
            prefix: prefix.into(),
            dim,
            window,
            heads,
            mlp_hidden: dim * mlp_ratio,
        })
    }

    pub fn shift(&self) -> usize {
        self.window / 2
    }

    fn bkey(&self, block: usize, name: &str) -> String {
        key(&self.prefix, &format!("b{block}.{name}"))
    }

    pub fn defs(&self) -> Vec<ParamDef> {
        let (d, r) = (self.dim, self.mlp_hidden);
        let mut defs = Vec::new();
        for b in [1, 2] {
            let k = |n: &str| self.bkey(b, n);
            defs.extend([
                ParamDef::new(k("qkv.weight"), &[d, 3 * d], Init::Lecun { fan_in: d }),
                ParamDef::new(k("q.bias"), &[d], Init::Zeros),
                ParamDef::new(k("v.bias"), &[d], Init::Zeros),
                ParamDef::new(k("proj.weight"), &[d, d], Init::Lecun { fan_in: d }),
                ParamDef::new(k("proj.bias"), &[d], Init::Zeros),
                ParamDef::new(k("norm1.gamma"), &[d], Init::Ones),
                ParamDef::new(k("norm1.beta"), &[d], Init::Zeros),
                ParamDef::new(k("norm2.gamma"), &[d], Init::Ones),
                ParamDef::new(k("norm2.beta"), &[d], Init::Zeros),
                ParamDef::new(k("mlp.fc1.weight"), &[d, r], Init::He { fan_in: d }),
                ParamDef::new(k("mlp.fc1.bias"), &[r], Init::Zeros),
                ParamDef::new(k("mlp.fc2.weight"), &[r, d], Init::Lecun { fan_in: r }),
                ParamDef::new(k("mlp.fc2.bias"), &[d], Init::Zeros),
            ]);
        }
        defs
    }

    fn check_extents(&self, h: usize, w: usize) -> Result<()> {
        if h % self.window != 0 || w % self.window != 0 {
            return Err(Error::shape(format!(
                "window {} does not divide feature map {h}x{w}",
                self.window
            )));
        }
        Ok(())
    }

    /// Multi-head attention of block `block` (1 or 2) on an NCHW tensor.
    pub fn window_attention(&self, p: &Bound, block: usize, x: &Var, shifted: bool) -> Result<Var> {
        let &[b, c, h, w] = x.shape() else {
            return Err(Error::shape(format!(
                "attention expects NCHW, got {:?}",
                x.shape()
            )));
        };
        if c != self.dim {
            return Err(Error::shape(format!(
                "attention width {} vs {c} channels",
                self.dim
            )));
        }
        self.check_extents(h, w)?;
        let y = self.attention_tokens(p, block, &to_tokens(x)?, (b, h, w), shifted)?;
        from_tokens(&y, b, h, w)
    }

    fn attention_tokens(
        &self,
        p: &Bound,
        block: usize,
        tokens: &Var,
        (b, h, w): (usize, usize, usize),
        shifted: bool,
    ) -> Result<Var> {
        let (d, n, heads) = (self.dim, self.window, self.heads);
        let hd = d / heads;
        let nn = n * n;
        let shift = if shifted { self.shift() } else { 0 };
        let rows = window_partition_rows(b, h, w, n, shift);
        let groups = rows.len() / nn * heads;

        // keys carry no bias: it would shift every score of a query
        // equally, which softmax cancels
        let zero = tokens.tape().constant(Tensor::zeros(&[d]));
        let bias = Var::concat(
            &[
                p.var(&self.bkey(block, "q.bias"))?,
                &zero,
                p.var(&self.bkey(block, "v.bias"))?,
            ],
            0,
        )?;
        let qkv = tokens
            .matmul(p.var(&self.bkey(block, "qkv.weight"))?)?
            .add(&bias)?;
        // (window, head, slot, j) <- qkv[row(window, slot), part*d + head*hd + j]
        let split = |part: usize| -> Result<Var> {
            let mut idx = Vec::with_capacity(rows.len() * d);
            for win in 0..rows.len() / nn {
                for head in 0..heads {
                    for s in 0..nn {
                        let base = rows[win * nn + s] * 3 * d + part * d + head * hd;
                        idx.extend(base..base + hd);
                    }
                }
            }
            qkv.gather(Rc::new(idx), vec![groups, nn, hd])
        };
        let (q, k, v) = (split(0)?, split(1)?, split(2)?);
        let mut scores = q.matmul_t(&k)?.scale(1.0 / (hd as f64).sqrt())?;
        if shift > 0 {
            let nw = (h / n) * (w / n);
            let mask = scores.tape().constant(shift_mask(h, w, n, shift));
            scores = scores
                .reshape(&[b, nw, heads, nn, nn])?
                .add(&mask)?
                .reshape(&[groups, nn, nn])?;
        }
        let out = scores.softmax(2)?.matmul(&v)?;

        // back to token rows: token row r with feature head*hd + j
        let mut slot_of = vec![0usize; rows.len()];
        for (s, &r) in rows.iter().enumerate() {
            slot_of[r] = s;
        }
        let mut idx = Vec::with_capacity(rows.len() * d);
        for &s in &slot_of {
            let (win, i) = (s / nn, s % nn);
            for head in 0..heads {
                let base = ((win * heads + head) * nn + i) * hd;
                idx.extend(base..base + hd);
            }
        }
        let merged = out.gather(Rc::new(idx), vec![rows.len(), d])?;
        affine(p, &merged, &self.bkey(block, "proj"))
    }

    fn block(
        &self,
        p: &Bound,
        block: usize,
        x: &Var,
        dims: (usize, usize, usize),
        shifted: bool,
    ) -> Result<Var> {
        let ln = |t: &Var, name: &str| {
            t.layer_norm(
                p.var(&self.bkey(block, &format!("{name}.gamma")))?,
                p.var(&self.bkey(block, &format!("{name}.beta")))?,
                LN_EPS,
            )
        };
        let a = self.attention_tokens(p, block, x, dims, shifted)?;
        let z = x.add(&ln(&a, "norm1")?)?;
        let hidden = affine(p, &ln(&z, "norm2")?, &self.bkey(block, "mlp.fc1"))?.gelu()?;
        z.add(&affine(p, &hidden, &self.bkey(block, "mlp.fc2"))?)
    }

    /// Both blocks on an NCHW tensor whose extents are multiples of the window.
    pub fn forward(&self, p: &Bound, x: &Var) -> Result<Var> {
        let &[b, c, h, w] = x.shape() else {
            return Err(Error::shape(format!(
                "attention expects NCHW, got {:?}",
                x.shape()
            )));
        };
        if c != self.dim {
            return Err(Error::shape(format!(
                "attention width {} vs {c} channels",
                self.dim
            )));
        }
        self.check_extents(h, w)?;
        let t = to_tokens(x)?;
        let z = self.block(p, 1, &t, (b, h, w), false)?;
        let z = self.block(p, 2, &z, (b, h, w), true)?;
        from_tokens(&z, b, h, w)
    }

    /// [`forward`](Self::forward) on any extents: zero-pads to window
    /// multiples and crops the result back.
    pub fn forward_padded(&self, p: &Bound, x: &Var) -> Result<Var> {
        let (h, w) = (x.shape()[2], x.shape()[3]);
        let y = self.forward(p, &pad_to_multiple(x, self.window)?)?;
        crop(&y, h, w)
    }
}

/// Transformer unit on a feature map: a per-pixel linear embedding from the
/// input channels to the pair's width, then the block pair. Any extents are
/// accepted (padded to window multiples internally). The output has
/// `pair.dim` channels.
#[derive(Clone, Debug)]
pub struct SwinUnit {
    pub prefix: String,
    pub c_in: usize,
    pub pair: SwinPair,
}

impl SwinUnit {
    pub fn new(
        prefix: impl Into<String>,
        c_in: usize,
        dim: usize,
        window: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Result<Self> {
        let prefix = prefix.into();
        if c_in == 0 {
            return Err(Error::invalid("transformer input width must be positive"));
        }
        let pair = SwinPair::new(prefix.clone(), dim, window, heads, mlp_ratio)?;
        Ok(Self { prefix, c_in, pair })
    }

    pub fn out_channels(&self) -> usize {
        self.pair.dim
    }

    pub fn defs(&self) -> Vec<ParamDef> {
        let d = self.pair.dim;
        let mut defs = vec![
            ParamDef::new(
                key(&self.prefix, "embed.weight"),
                &[self.c_in, d],
                Init::Lecun { fan_in: self.c_in },
            ),
            ParamDef::new(key(&self.prefix, "embed.bias"), &[d], Init::Zeros),
        ];
        defs.extend(self.pair.defs());
        defs
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Result<Var> {
        let &[_, c, _, _] = x.shape() else {
            return Err(Error::shape(format!(
                "attention expects NCHW, got {:?}",
                x.shape()
            )));
        };
        if c != self.c_in {
            return Err(Error::shape(format!(
                "transformer unit expects {} channels, got {c}",
                self.c_in
            )));
        }
        let embedded = linear_embed(
            &x.permute(&[0, 2, 3, 1])?,
            p.var(&key(&self.prefix, "embed.weight"))?,
            p.var(&key(&self.prefix, "embed.bias"))?,
        )?;
        self.pair
            .forward_padded(p, &embedded.permute(&[0, 3, 1, 2])?)
    }
}

/// (1, windows, 1, N², N²) additive mask separating the regions that a
/// cyclic shift brings together.
fn shift_mask(h: usize, w: usize, n: usize, shift: usize) -> Tensor {
    let region = |v: usize, extent: usize| {
        if v < extent - n {
            0
        } else if v < extent - shift {
            1
        } else {
            2
        }
    };
    let (nwy, nwx, nn) = (h / n, w / n, n * n);
    let mut m = Vec::with_capacity(nwy * nwx * nn * nn);
    for wy in 0..nwy {
        for wx in 0..nwx {
            let label: Vec<usize> = (0..nn)
                .map(|s| region(wy * n + s / n, h) * 3 + region(wx * n + s % n, w))
                .collect();
            for i in 0..nn {
                for j in 0..nn {
                    m.push(if label[i] == label[j] { 0.0 } else { MASKED });
                }
            }
        }
    }
    Tensor::from_parts(vec![1, nwy * nwx, 1, nn, nn], m)
}
