use super::config::{DecoderChaining, ModelConfig, SkipSequence};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{BConvLstm, ConvBn, EncoderBlock, SwinUnit, TransposedConv};
use crate::params::{Bound, ForwardCtx, ParamDef, ParamStore};
use crate::tensor::Tensor;

/// Middle of the dense bottleneck: a transformer pair, or two conv layers
/// when the placement leaves the bottleneck convolutional.
#[derive(Clone, Debug)]
enum DenseMid {
    Swin(SwinUnit),
    Conv(ConvBn, ConvBn),
}

#[derive(Clone, Debug)]
struct DecoderStage {
    conv1: ConvBn,
    conv2: ConvBn,
    up: TransposedConv,
    up_swin: Option<SwinUnit>,
    lstm: Option<BConvLstm>,
    skip_swin: Option<SwinUnit>,
}

/// The segmentation network: three encoder stages, a densely connected
/// bottleneck, three decoder stages whose skip features pass through a
/// bidirectional ConvLSTM and a transformer pair, and a two-layer head.
///
/// With base width C the encoder produces C, 2C and 4C channels and the
/// bottleneck works at 8C. Decoder stage `i` (deepest first) reduces to the
/// matching skip width before upsampling. A transformer unit replaces its
/// input's width by the embedding width d, so concatenations downstream of
/// one grow or shrink accordingly.
#[derive(Clone, Debug)]
pub struct Network {
    cfg: ModelConfig,
    enc: Vec<EncoderBlock>,
    dense_in: (ConvBn, ConvBn),
    dense_mid: DenseMid,
    dense_out: (ConvBn, ConvBn),
    stages: Vec<DecoderStage>,
    head: (ConvBn, ConvBn),
}

impl Network {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let (c, k, kind) = (cfg.base_channels, cfg.kernel_size, cfg.conv_kind);
        let conv = |p: &str, ci: usize, co: usize| ConvBn::new(p, kind, ci, co, k);
        let swin = |p: &str, c_in: usize| {
            SwinUnit::new(
                p,
                c_in,
                cfg.embed_dim,
                cfg.window_size,
                cfg.heads(),
                cfg.mlp_ratio,
            )
        };

        let enc = vec![
            EncoderBlock::new("enc1", kind, cfg.input_channels, c, k)?,
            EncoderBlock::new("enc2", kind, c, 2 * c, k)?,
            EncoderBlock::new("enc3", kind, 2 * c, 4 * c, k)?,
        ];
        let d = 8 * c;
        let dense_in = (conv("dense.conv1", 4 * c, d)?, conv("dense.conv2", d, d)?);
        let (dense_mid, mid_width) = if cfg.placement.in_dense() {
            let unit = swin("dense.swin", d)?;
            let width = unit.out_channels();
            (DenseMid::Swin(unit), width)
        } else {
            (
                DenseMid::Conv(conv("dense.mid1", d, d)?, conv("dense.mid2", d, d)?),
                d,
            )
        };
        let dense_out = (
            conv("dense.conv3", mid_width + d, d)?,
            conv("dense.conv4", d, d)?,
        );
        // conv4 output, B1 and B2 = mid © B1
        let bottleneck = 3 * d + mid_width;

        let mut stages = Vec::new();
        let mut c_prev = bottleneck;
        for i in 0..3 {
            let level = 2 - i;
            let sc = c << level;
            let (h, w) = (cfg.input_height >> level, cfg.input_width >> level);
            let p = |name: &str| format!("dec{}.{name}", i + 1);
            let c_in = match cfg.decoder_chaining {
                DecoderChaining::Chained => c_prev,
                DecoderChaining::Literal => bottleneck,
            };
            let lstm = if cfg.skip_bconvlstm {
                let hidden = (sc / cfg.lstm_hidden_divisor).max(1);
                Some(BConvLstm::new(&p("lstm"), sc, hidden, sc, k, h, w)?)
            } else {
                None
            };
            let up_swin = cfg
                .placement
                .after_upsampling()
                .then(|| swin(&p("up_swin"), sc))
                .transpose()?;
            let skip_swin = cfg
                .placement
                .on_skips()
                .then(|| swin(&p("skip_swin"), sc))
                .transpose()?;
            c_prev = [&up_swin, &skip_swin]
                .iter()
                .map(|u| u.as_ref().map_or(sc, SwinUnit::out_channels))
                .sum();
            stages.push(DecoderStage {
                conv1: conv(&p("conv1"), c_in, sc)?,
                conv2: conv(&p("conv2"), sc, sc)?,
                up: TransposedConv::new(p("up"), sc, sc),
                up_swin,
                lstm,
                skip_swin,
            });
        }
        let head = (
            conv("head.conv1", c_prev, c)?,
            conv("head.conv2", c, cfg.num_classes)?,
        );
        Ok(Self {
            cfg: cfg.clone(),
            enc,
            dense_in,
            dense_mid,
            dense_out,
            stages,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Every stored tensor, in construction order. The key set depends only
    /// on the configuration.
    pub fn defs(&self) -> Vec<ParamDef> {
        let mut d = Vec::new();
        for e in &self.enc {
            d.extend(e.defs());
        }
        d.extend(self.dense_in.0.defs());
        d.extend(self.dense_in.1.defs());
        match &self.dense_mid {
            DenseMid::Swin(s) => d.extend(s.defs()),
            DenseMid::Conv(a, b) => {
                d.extend(a.defs());
                d.extend(b.defs());
            }
        }
        d.extend(self.dense_out.0.defs());
        d.extend(self.dense_out.1.defs());
        for s in &self.stages {
            d.extend(s.conv1.defs());
            d.extend(s.conv2.defs());
            d.extend(s.up.defs());
            for sw in [&s.up_swin, &s.skip_swin].into_iter().flatten() {
                d.extend(sw.defs());
            }
            if let Some(l) = &s.lstm {
                d.extend(l.defs());
            }
        }
        d.extend(self.head.0.defs());
        d.extend(self.head.1.defs());
        d
    }

    /// Deterministically initialized parameters.
    pub fn build(&self, seed: u64) -> Result<ParamStore> {
        ParamStore::initialize(&self.defs(), seed)
    }

    /// Trainable scalar count implied by the configuration.
    pub fn param_count(&self) -> usize {
        self.defs()
            .iter()
            .filter(|d| d.trainable)
            .map(ParamDef::numel)
            .sum()
    }

    fn pair(p: &Bound, a: &ConvBn, b: &ConvBn, x: &Var, ctx: &mut ForwardCtx) -> Result<Var> {
        let h = a.forward_relu(p, x, ctx)?;
        b.forward_relu(p, &h, ctx)
    }

    /// Class probabilities of shape (batch, classes, H, W).
    pub fn forward(&self, p: &Bound, x: &Var, ctx: &mut ForwardCtx) -> Result<Var> {
        let cfg = &self.cfg;
        let want = [cfg.input_channels, cfg.input_height, cfg.input_width];
        if x.shape().len() != 4 || x.shape()[1..] != want {
            return Err(Error::shape(format!(
                "network expects (batch, {}, {}, {}), got {:?}",
                want[0],
                want[1],
                want[2],
                x.shape()
            )));
        }
        let mut skips = Vec::with_capacity(3);
        let mut cur = x.clone();
        for e in &self.enc {
            let (skip, pooled) = e.forward(p, &cur, ctx)?;
            skips.push(skip);
            cur = pooled;
        }

        let b1 = Self::pair(p, &self.dense_in.0, &self.dense_in.1, &cur, ctx)?;
        let mid = match &self.dense_mid {
            DenseMid::Swin(s) => s.forward(p, &b1)?,
            DenseMid::Conv(a, b) => Self::pair(p, a, b, &b1, ctx)?,
        };
        let b2 = Var::concat(&[&mid, &b1], 1)?;
        let b3 = Var::concat(
            &[
                &Self::pair(p, &self.dense_out.0, &self.dense_out.1, &b2, ctx)?,
                &b1,
                &b2,
            ],
            1,
        )?;

        let mut cur = b3.clone();
        for (i, st) in self.stages.iter().enumerate() {
            let src = match cfg.decoder_chaining {
                DecoderChaining::Chained => &cur,
                DecoderChaining::Literal => &b3,
            };
            let h = st.conv1.forward_relu(p, src, ctx)?;
            let h = st.conv2.forward_relu(p, &h, ctx)?;
            let upsampled = st.up.forward(p, &h)?;
            let up = match &st.up_swin {
                Some(sw) => sw.forward(p, &upsampled)?,
                None => upsampled.clone(),
            };
            let skip = &skips[2 - i];
            let mut s = skip.clone();
            if let Some(l) = &st.lstm {
                // the paired sequence uses the upsampled feature before any
                // transformer so both elements share the skip width
                s = match cfg.skip_sequence {
                    SkipSequence::Single => l.forward(p, &[skip])?,
                    SkipSequence::Paired => l.forward(p, &[&upsampled, skip])?,
                };
            }
            if let Some(sw) = &st.skip_swin {
                s = sw.forward(p, &s)?;
            }
            cur = Var::concat(&[&up, &s], 1)?;
        }

        let h = self.head.0.forward_relu(p, &cur, ctx)?;
        let logits = self.head.1.forward(p, &h, ctx)?;
        if cfg.num_classes == 1 {
            logits.sigmoid()
        } else {
            logits.softmax(1)
        }
    }

    /// Inference-mode forward without gradient bookkeeping.
    pub fn predict(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let y = self.forward(&p, &tape.constant(x.clone()), &mut ForwardCtx::inference())?;
        Ok(y.value().clone())
    }

    /// Floating-point operations of one inference forward on a single
    /// image: two per multiply-accumulate of every convolution, transposed
    /// convolution and matrix product. Attention products are counted as
    /// they run, which equals the windowed complexity on padded extents.
    pub fn count_flops(&self) -> Result<u64> {
        let store = ParamStore::initialize(&self.defs(), 0)?;
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let cfg = &self.cfg;
        let x = tape.constant(Tensor::zeros(&[
            1,
            cfg.input_channels,
            cfg.input_height,
            cfg.input_width,
        ]));
        self.forward(&p, &x, &mut ForwardCtx::inference())?;
        Ok(2 * tape.macs())
    }
}

/// Trainable scalar count of a parameter store.
pub fn count_params(store: &ParamStore) -> usize {
    store.trainable_count()
}
