//! Patch tokenization utilities: 4×4 partition, 2×2 merge, linear embedding.

use std::rc::Rc;

use crate::autograd::Var;
use crate::error::{Error, Result};

/// `x · weight (+ bias)` applied to the last axis of any-rank `x`.
pub fn linear(x: &Var, weight: &Var, bias: Option<&Var>) -> Result<Var> {
    let s = x.shape().to_vec();
    let f = *s.last().ok_or_else(|| Error::shape("linear of a scalar"))?;
    let &[fi, fo] = weight.shape() else {
        return Err(Error::shape(format!(
            "linear weight must be 2-D, got {:?}",
            weight.shape()
        )));
    };
    if fi != f {
        return Err(Error::shape(format!(
            "linear: {f} features into weight {:?}",
            weight.shape()
        )));
    }
    let mut y = x.reshape(&[x.value().len() / f, f])?.matmul(weight)?;
    if let Some(b) = bias {
        y = y.add(b)?;
    }
    let mut out = s;
    *out.last_mut().expect("rank >= 1") = fo;
    y.reshape(&out)
}

/// (B, C, H, W) → (B, H/4 · W/4, 16C); features of a token are ordered
/// (channel, row in patch, column in patch).
pub fn patch_partition4(x: &Var) -> Result<Var> {
    let &[b, c, h, w] = x.shape() else {
        return Err(Error::shape(format!(
            "patch partition expects NCHW, got {:?}",
            x.shape()
        )));
    };
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::shape(format!(
            "{h}x{w} is not divisible into 4x4 patches"
        )));
    }
    let (gh, gw) = (h / 4, w / 4);
    let mut idx = Vec::with_capacity(x.value().len());
    for bi in 0..b {
        for ty in 0..gh {
            for tx in 0..gw {
                for ci in 0..c {
                    for py in 0..4 {
                        for px in 0..4 {
                            idx.push(((bi * c + ci) * h + ty * 4 + py) * w + tx * 4 + px);
                        }
                    }
                }
            }
        }
    }
    x.gather(Rc::new(idx), vec![b, gh * gw, 16 * c])
}

/// Merges each 2×2 group of tokens on a `grid = (rows, cols)` layout:
/// concatenates their features in the order (0,0), (1,0), (0,1), (1,1)
/// and projects 4d → `weight`'s output width (2d by convention).
pub fn patch_merge2(x: &Var, grid: (usize, usize), weight: &Var) -> Result<Var> {
    let &[b, t, d] = x.shape() else {
        return Err(Error::shape(format!(
            "patch merge expects (B, T, d), got {:?}",
            x.shape()
        )));
    };
    let (gh, gw) = grid;
    if gh * gw != t || gh % 2 != 0 || gw % 2 != 0 {
        return Err(Error::shape(format!(
            "{t} tokens on a {gh}x{gw} grid cannot merge 2x2"
        )));
    }
    let mut idx = Vec::with_capacity(x.value().len());
    for bi in 0..b {
        for my in 0..gh / 2 {
            for mx in 0..gw / 2 {
                for (dy, dx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let tok = (my * 2 + dy) * gw + mx * 2 + dx;
                    let base = (bi * t + tok) * d;
                    idx.extend(base..base + d);
                }
            }
        }
    }
    let grouped = x.gather(Rc::new(idx), vec![b, t / 4, 4 * d])?;
    linear(&grouped, weight, None)
}

/// Projects raw token features to the embedding width.
pub fn linear_embed(x: &Var, weight: &Var, bias: &Var) -> Result<Var> {
    linear(x, weight, Some(bias))
}
