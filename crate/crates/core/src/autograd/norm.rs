//! Fused batch and layer normalization.

use super::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Batch statistics observed by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance (n − 1 denominator), the estimate running stats track.
    pub var_unbiased: Vec<f64>,
}

fn check_affine(x: &[usize], gamma: &Var, beta: &Var, c: usize, op: &str) -> Result<()> {
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(format!(
            "{op}: affine params {:?}/{:?} do not match {c} features of {x:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    Ok(())
}

impl Var {
    /// Training-mode batch norm over (N, H, W) per channel of an NCHW input.
    pub fn batch_norm_train(&self, gamma: &Var, beta: &Var, eps: f64) -> Result<(Var, BatchStats)> {
        let &[b, c, h, w] = self.shape() else {
            return Err(Error::shape(format!(
                "batch norm expects NCHW, got {:?}",
                self.shape()
            )));
        };
        check_affine(self.shape(), gamma, beta, c, "batch_norm")?;
        let hw = h * w;
        let n = (b * hw) as f64;
        let xd = self.value().data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for bi in 0..b {
                s += xd[(bi * c + ch) * hw..][..hw].iter().sum::<f64>();
            }
            let m = s / n;
            let mut v = 0.0;
            for bi in 0..b {
                v += xd[(bi * c + ch) * hw..][..hw]
                    .iter()
                    .map(|x| (x - m) * (x - m))
                    .sum::<f64>();
            }
            mean[ch] = m;
            var[ch] = v / n;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gd = gamma.value().data();
        let bd = beta.value().data();
        let mut xhat = vec![0.0; xd.len()];
        let mut y = vec![0.0; xd.len()];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * hw;
                for i in base..base + hw {
                    xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                    y[i] = gd[ch] * xhat[i] + bd[ch];
                }
            }
        }
        let stats = BatchStats {
            mean,
            var_unbiased: var
                .iter()
                .map(|v| if n > 1.0 { v * n / (n - 1.0) } else { *v })
                .collect(),
        };
        let rg = gamma.rc();
        let shape = self.shape().to_vec();
        let out = Tensor::from_parts(shape.clone(), y);
        let var =
            self.tape()
                .record("batch_norm", out, &[self, gamma, beta], move |g, needs| {
                    let gdat = g.data();
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for bi in 0..b {
                        for ch in 0..c {
                            let base = (bi * c + ch) * hw;
                            for i in base..base + hw {
                                dgamma[ch] += gdat[i] * xhat[i];
                                dbeta[ch] += gdat[i];
                            }
                        }
                    }
                    let gx = needs[0].then(|| {
                        let mut gx = vec![0.0; gdat.len()];
                        for bi in 0..b {
                            for ch in 0..c {
                                let base = (bi * c + ch) * hw;
                                let k = rg.data()[ch] * inv_std[ch];
                                let mg = dbeta[ch] / n;
                                let mgx = dgamma[ch] / n;
                                for i in base..base + hw {
                                    gx[i] = k * (gdat[i] - mg - xhat[i] * mgx);
                                }
                            }
                        }
                        Tensor::from_parts(shape, gx)
                    });
                    vec![
                        gx,
                        needs[1].then(|| Tensor::from_parts(vec![c], dgamma)),
                        needs[2].then(|| Tensor::from_parts(vec![c], dbeta)),
                    ]
                })?;
        Ok((var, stats))
    }

    /// Inference-mode batch norm with fixed running statistics.
    pub fn batch_norm_eval(
        &self,
        gamma: &Var,
        beta: &Var,
        running_mean: &Tensor,
        running_var: &Tensor,
        eps: f64,
    ) -> Result<Var> {
        let &[b, c, h, w] = self.shape() else {
            return Err(Error::shape(format!(
                "batch norm expects NCHW, got {:?}",
                self.shape()
            )));
        };
        check_affine(self.shape(), gamma, beta, c, "batch_norm")?;
        if running_mean.shape() != [c] || running_var.shape() != [c] {
            return Err(Error::shape(
                "batch norm running stats do not match channel count",
            ));
        }
        if running_var.data().iter().any(|&v| v < 0.0) {
            return Err(Error::invalid("negative running variance"));
        }
        let hw = h * w;
        let inv_std: Vec<f64> = running_var
            .data()
            .iter()
            .map(|v| 1.0 / (v + eps).sqrt())
            .collect();
        let rm = running_mean.data().to_vec();
        let xd = self.value().data();
        let gd = gamma.value().data();
        let bd = beta.value().data();
        let mut y = vec![0.0; xd.len()];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * hw;
                for i in base..base + hw {
                    y[i] = gd[ch] * (xd[i] - rm[ch]) * inv_std[ch] + bd[ch];
                }
            }
        }
        let (rx, rg) = (self.rc(), gamma.rc());
        let shape = self.shape().to_vec();
        let out = Tensor::from_parts(shape.clone(), y);
        self.tape().record(
            "batch_norm_eval",
            out,
            &[self, gamma, beta],
            move |g, needs| {
                let gdat = g.data();
                let xd = rx.data();
                let mut gx = needs[0].then(|| vec![0.0; gdat.len()]);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for bi in 0..b {
                    for ch in 0..c {
                        let base = (bi * c + ch) * hw;
                        let k = rg.data()[ch] * inv_std[ch];
                        for i in base..base + hw {
                            dgamma[ch] += gdat[i] * (xd[i] - rm[ch]) * inv_std[ch];
                            dbeta[ch] += gdat[i];
                            if let Some(gx) = gx.as_mut() {
                                gx[i] = k * gdat[i];
                            }
                        }
                    }
                }
                vec![
                    gx.map(|v| Tensor::from_parts(shape, v)),
                    needs[1].then(|| Tensor::from_parts(vec![c], dgamma)),
                    needs[2].then(|| Tensor::from_parts(vec![c], dbeta)),
                ]
            },
        )
    }

    /// Layer norm over the last axis with per-feature affine parameters.
    pub fn layer_norm(&self, gamma: &Var, beta: &Var, eps: f64) -> Result<Var> {
        let shape = self.shape().to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| Error::shape("layer norm of a scalar"))?;
        check_affine(&shape, gamma, beta, d, "layer_norm")?;
        let rows = self.value().len() / d;
        let xd = self.value().data();
        let gd = gamma.value().data();
        let bd = beta.value().data();
        let mut xhat = vec![0.0; xd.len()];
        let mut y = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let m = row.iter().sum::<f64>() / d as f64;
            let v = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / d as f64;
            let is = 1.0 / (v + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - m) * is;
                xhat[r * d + j] = xh;
                y[r * d + j] = gd[j] * xh + bd[j];
            }
        }
        let rg = gamma.rc();
        let out = Tensor::from_parts(shape.clone(), y);
        self.tape()
            .record("layer_norm", out, &[self, gamma, beta], move |g, needs| {
                let gdat = g.data();
                let gam = rg.data();
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut gx = needs[0].then(|| vec![0.0; gdat.len()]);
                for r in 0..rows {
                    let gr = &gdat[r * d..(r + 1) * d];
                    let xr = &xhat[r * d..(r + 1) * d];
                    let mut mean_gy = 0.0;
                    let mut mean_gyx = 0.0;
                    for j in 0..d {
                        dgamma[j] += gr[j] * xr[j];
                        dbeta[j] += gr[j];
                        let gy = gr[j] * gam[j];
                        mean_gy += gy;
                        mean_gyx += gy * xr[j];
                    }
                    mean_gy /= d as f64;
                    mean_gyx /= d as f64;
                    if let Some(gx) = gx.as_mut() {
                        for j in 0..d {
                            gx[r * d + j] =
                                inv_std[r] * (gr[j] * gam[j] - mean_gy - xr[j] * mean_gyx);
                        }
                    }
                }
                vec![
                    gx.map(|v| Tensor::from_parts(shape, v)),
                    needs[1].then(|| Tensor::from_parts(vec![d], dgamma)),
                    needs[2].then(|| Tensor::from_parts(vec![d], dbeta)),
                ]
            })
    }
}
