//! Signed distance to the boundary of a binary mask.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-pixel signed Euclidean distance to the boundary of a mask: negative
/// inside, positive outside, zero on the boundary pixels themselves.
///
/// Boundary pixels are foreground pixels with at least one background
/// 4-neighbor; pixels off the image edge do not count as background.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelSetMap {
    pub values: Tensor,
}

const FAR: f64 = 1e20;

/// Lower envelope of parabolas, one pass of the separable squared distance
/// transform. `f` holds squared distances along one line, 0 at sites and
/// `FAR` elsewhere.
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    let mut k = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2 * q - 2 * p) as f64;
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0: the new parabola dominates everywhere
                v[0] = q;
                z[1] = f64::INFINITY;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
            }
            break;
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared distance from every pixel of an `h × w` grid to the nearest site.
pub(crate) fn squared_distance(sites: &[bool], h: usize, w: usize) -> Vec<f64> {
    let mut grid: Vec<f64> = sites.iter().map(|&s| if s { 0.0 } else { FAR }).collect();
    let mut line = vec![0.0; h.max(w)];
    let mut col = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        edt_1d(&col, &mut line[..h]);
        for y in 0..h {
            grid[y * w + x] = line[y];
        }
    }
    let mut row = vec![0.0; w];
    for y in 0..h {
        row.copy_from_slice(&grid[y * w..(y + 1) * w]);
        edt_1d(&row, &mut grid[y * w..(y + 1) * w]);
    }
    grid
}

/// Foreground pixels with a background 4-neighbor.
pub fn boundary_pixels(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut b = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            let bg = |yy: usize, xx: usize| !mask[yy * w + xx];
            b[y * w + x] = (y > 0 && bg(y - 1, x))
                || (y + 1 < h && bg(y + 1, x))
                || (x > 0 && bg(y, x - 1))
                || (x + 1 < w && bg(y, x + 1));
        }
    }
    b
}

fn binary_plane(g: &[f64]) -> Result<Vec<bool>> {
    g.iter()
        .map(|&v| match v {
            0.0 => Ok(false),
            1.0 => Ok(true),
            _ => Err(Error::invalid(format!("mask value {v} is not 0 or 1"))),
        })
        .collect()
}

fn plane(g: &[f64], h: usize, w: usize) -> Result<Vec<f64>> {
    let mask = binary_plane(g)?;
    if mask.iter().all(|&m| m) || mask.iter().all(|&m| !m) {
        return Err(Error::invalid(
            "level set needs both foreground and background pixels",
        ));
    }
    let sq = squared_distance(&boundary_pixels(&mask, h, w), h, w);
    Ok(sq
        .iter()
        .zip(&mask)
        .map(|(&d, &inside)| if inside { -d.sqrt() } else { d.sqrt() })
        .collect())
}

/// Level set of an (H, W) mask, or of every (H, W) plane of a rank-3 or
/// rank-4 mask stack.
pub fn level_set(g: &Tensor) -> Result<LevelSetMap> {
    let s = g.shape();
    if s.len() < 2 {
        return Err(Error::shape(format!(
            "level set needs at least (H, W), got {s:?}"
        )));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let mut out = Vec::with_capacity(g.len());
    for p in g.data().chunks(h * w) {
        out.extend(plane(p, h, w)?);
    }
    Ok(LevelSetMap {
        values: Tensor::new(s.to_vec(), out)?,
    })
}
