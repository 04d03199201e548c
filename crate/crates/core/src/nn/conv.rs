use super::{key, BN_EPS};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::params::{Bound, ForwardCtx, Init, ParamDef};
use crate::tensor::Tensor;

/// `x + bias` with `bias` of shape (c) broadcast over an NCHW tensor.
pub fn add_channel_bias(x: &Var, bias: &Var) -> Result<Var> {
    let c = bias.value().len();
    x.add(&bias.reshape(&[1, c, 1, 1])?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvKind {
    /// Depthwise k×k followed by pointwise 1×1.
    Separable,
    /// One dense k×k convolution.
    Standard,
}

/// Convolution (no bias) followed by batch norm.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub prefix: String,
    pub kind: ConvKind,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
}

impl ConvBn {
    pub fn new(
        prefix: impl Into<String>,
        kind: ConvKind,
        c_in: usize,
        c_out: usize,
        k: usize,
    ) -> Result<Self> {
        if k % 2 == 0 || c_in == 0 || c_out == 0 {
            return Err(Error::invalid(format!(
                "conv block needs odd k and nonzero channels, got k={k}"
            )));
        }
        Ok(Self {
            prefix: prefix.into(),
            kind,
            c_in,
            c_out,
            k,
        })
    }

    fn key(&self, name: &str) -> String {
        key(&self.prefix, name)
    }

    pub fn defs(&self) -> Vec<ParamDef> {
        let (ci, co, k) = (self.c_in, self.c_out, self.k);
        let mut defs = match self.kind {
            ConvKind::Separable => vec![
                ParamDef::new(
                    self.key("depthwise"),
                    &[ci, 1, k, k],
                    Init::He { fan_in: k * k },
                ),
                ParamDef::new(
                    self.key("pointwise"),
                    &[co, ci, 1, 1],
                    Init::He { fan_in: ci },
                ),
            ],
            ConvKind::Standard => vec![ParamDef::new(
                self.key("kernel"),
                &[co, ci, k, k],
                Init::He { fan_in: ci * k * k },
            )],
        };
        defs.extend([
            ParamDef::new(self.key("bn.gamma"), &[co], Init::Ones),
            ParamDef::new(self.key("bn.beta"), &[co], Init::Zeros),
            ParamDef::buffer(self.key("bn.running_mean"), &[co], Init::Zeros),
            ParamDef::buffer(self.key("bn.running_var"), &[co], Init::Ones),
        ]);
        defs
    }

    /// Convolution then batch norm (no activation).
    pub fn forward(&self, p: &Bound, x: &Var, ctx: &mut ForwardCtx) -> Result<Var> {
        if x.shape().len() != 4 || x.shape()[1] != self.c_in {
            return Err(Error::shape(format!(
                "{}: expected {} input channels, got {:?}",
                self.prefix,
                self.c_in,
                x.shape()
            )));
        }
        let y = match self.kind {
            ConvKind::Separable => x
                .depthwise_conv2d(p.var(&self.key("depthwise"))?)?
                .conv2d(p.var(&self.key("pointwise"))?)?,
            ConvKind::Standard => x.conv2d(p.var(&self.key("kernel"))?)?,
        };
        let gamma = p.var(&self.key("bn.gamma"))?;
        let beta = p.var(&self.key("bn.beta"))?;
        let rm_key = self.key("bn.running_mean");
        let rv_key = self.key("bn.running_var");
        if ctx.training {
            let (out, stats) = y.batch_norm_train(gamma, beta, BN_EPS)?;
            let m = ctx.bn_momentum;
            let blend = |old: &Tensor, new: &[f64]| {
                let v = old
                    .data()
                    .iter()
                    .zip(new)
                    .map(|(o, n)| (1.0 - m) * o + m * n)
                    .collect();
                Tensor::new(vec![new.len()], v)
            };
            let rm = blend(p.buffer(&rm_key)?, &stats.mean)?;
            let rv = blend(p.buffer(&rv_key)?, &stats.var_unbiased)?;
            ctx.bn_updates.push((rm_key, rm));
            ctx.bn_updates.push((rv_key, rv));
            Ok(out)
        } else {
            y.batch_norm_eval(gamma, beta, p.buffer(&rm_key)?, p.buffer(&rv_key)?, BN_EPS)
        }
    }

    pub fn forward_relu(&self, p: &Bound, x: &Var, ctx: &mut ForwardCtx) -> Result<Var> {
        self.forward(p, x, ctx)?.relu()
    }
}

/// Two conv+BN+ReLU layers; the activation before pooling is kept as the
/// skip feature.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub conv1: ConvBn,
    pub conv2: ConvBn,
}

impl EncoderBlock {
    pub fn new(prefix: &str, kind: ConvKind, c_in: usize, c_out: usize, k: usize) -> Result<Self> {
        Ok(Self {
            conv1: ConvBn::new(key(prefix, "conv1"), kind, c_in, c_out, k)?,
            conv2: ConvBn::new(key(prefix, "conv2"), kind, c_out, c_out, k)?,
        })
    }

    pub fn defs(&self) -> Vec<ParamDef> {
        let mut d = self.conv1.defs();
        d.extend(self.conv2.defs());
        d
    }

    /// Returns `(skip, pooled)`.
    pub fn forward(&self, p: &Bound, x: &Var, ctx: &mut ForwardCtx) -> Result<(Var, Var)> {
        if x.shape().len() == 4 && (x.shape()[2] % 2 != 0 || x.shape()[3] % 2 != 0) {
            return Err(Error::shape(format!(
                "encoder block needs even extents, got {:?}",
                x.shape()
            )));
        }
        let h = self.conv1.forward_relu(p, x, ctx)?;
        let skip = self.conv2.forward_relu(p, &h, ctx)?;
        let pooled = skip.max_pool2x2()?;
        Ok((skip, pooled))
    }
}

/// 2×2 stride-2 transposed convolution with bias; doubles H and W.
#[derive(Clone, Debug)]
pub struct TransposedConv {
    pub prefix: String,
    pub c_in: usize,
    pub c_out: usize,
}

impl TransposedConv {
    pub fn new(prefix: impl Into<String>, c_in: usize, c_out: usize) -> Self {
        Self {
            prefix: prefix.into(),
            c_in,
            c_out,
        }
    }

    pub fn defs(&self) -> Vec<ParamDef> {
        vec![
            ParamDef::new(
                key(&self.prefix, "kernel"),
                &[self.c_in, self.c_out, 2, 2],
                Init::He { fan_in: self.c_in },
            ),
            ParamDef::new(key(&self.prefix, "bias"), &[self.c_out], Init::Zeros),
        ]
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Result<Var> {
        let y = x.conv_transpose2x2(p.var(&key(&self.prefix, "kernel"))?)?;
        add_channel_bias(&y, p.var(&key(&self.prefix, "bias"))?)
    }
}
