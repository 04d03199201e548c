use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kv;
use crate::nn::ConvKind;

/// Where shifted-window transformer pairs are inserted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Placement {
    None,
    /// Inside the dense bottleneck.
    Dense,
    /// After each decoder upsampling.
    DecoderPools,
    /// On every skip path, after the BConvLSTM.
    Skips,
    SkipsAndDense,
}

impl Placement {
    pub const ALL: [Placement; 5] = [
        Self::None,
        Self::Dense,
        Self::DecoderPools,
        Self::Skips,
        Self::SkipsAndDense,
    ];

    pub fn in_dense(self) -> bool {
        matches!(self, Self::Dense | Self::SkipsAndDense)
    }

    pub fn on_skips(self) -> bool {
        matches!(self, Self::Skips | Self::SkipsAndDense)
    }

    pub fn after_upsampling(self) -> bool {
        self == Self::DecoderPools
    }
}

/// What the skip-path BConvLSTM reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SkipSequence {
    /// The encoder feature alone (length-1 sequence).
    Single,
    /// [upsampled decoder feature, encoder feature].
    Paired,
}

/// Which feature each decoder stage upsamples.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderChaining {
    /// The previous stage's output (U-shape).
    Chained,
    /// The bottleneck output at every stage. Cannot reach full resolution;
    /// exists so that inconsistency can be demonstrated.
    Literal,
}

macro_rules! enum_names {
    ($t:ty, $what:literal, $($v:path => $s:literal),+ $(,)?) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($v => $s),+ })
            }
        }
        impl FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($v),)+
                    _ => Err(Error::invalid(format!(concat!("unknown ", $what, " `{}`"), s))),
                }
            }
        }
    };
}

enum_names!(Placement, "placement",
    Placement::None => "none",
    Placement::Dense => "dense",
    Placement::DecoderPools => "decoder_pools",
    Placement::Skips => "skips",
    Placement::SkipsAndDense => "skips_and_dense",
);
enum_names!(SkipSequence, "skip sequence", SkipSequence::Single => "single", SkipSequence::Paired => "paired");
enum_names!(DecoderChaining, "decoder chaining",
    DecoderChaining::Chained => "chained",
    DecoderChaining::Literal => "literal",
);
enum_names!(ConvKind, "conv kind", ConvKind::Separable => "separable", ConvKind::Standard => "standard");

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub input_channels: usize,
    /// C: channels of the first encoder stage.
    pub base_channels: usize,
    /// 1 gives a sigmoid head, more a softmax over classes.
    pub num_classes: usize,
    pub kernel_size: usize,
    pub conv_kind: ConvKind,
    pub placement: Placement,
    pub window_size: usize,
    /// Token width d of every transformer unit; each unit embeds its input
    /// channels to this width per pixel.
    pub embed_dim: usize,
    /// Upper bound; the transformers use the largest divisor of
    /// `embed_dim` not exceeding this.
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub skip_bconvlstm: bool,
    pub skip_sequence: SkipSequence,
    /// ConvLSTM hidden channels = skip channels / this (at least 1).
    pub lstm_hidden_divisor: usize,
    pub decoder_chaining: DecoderChaining,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_height: 64,
            input_width: 64,
            input_channels: 3,
            base_channels: 8,
            num_classes: 1,
            kernel_size: 3,
            conv_kind: ConvKind::Separable,
            placement: Placement::SkipsAndDense,
            window_size: 4,
            embed_dim: 16,
            num_heads: 4,
            mlp_ratio: 2,
            skip_bconvlstm: true,
            skip_sequence: SkipSequence::Single,
            lstm_hidden_divisor: 2,
            decoder_chaining: DecoderChaining::Chained,
            bn_momentum: 0.1,
        }
    }
}

impl ModelConfig {
    pub const KEYS: [&'static str; 17] = [
        "input_height",
        "input_width",
        "input_channels",
        "base_channels",
        "num_classes",
        "kernel_size",
        "conv_kind",
        "placement",
        "window_size",
        "embed_dim",
        "num_heads",
        "mlp_ratio",
        "skip_bconvlstm",
        "skip_sequence",
        "lstm_hidden_divisor",
        "decoder_chaining",
        "bn_momentum",
    ];

    /// Sets one field by name. Returns `Ok(false)` for keys this config
    /// does not own, so callers can route them elsewhere.
    pub fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "input_height" => self.input_height = kv::value(key, v)?,
            "input_width" => self.input_width = kv::value(key, v)?,
            "input_channels" => self.input_channels = kv::value(key, v)?,
            "base_channels" => self.base_channels = kv::value(key, v)?,
            "num_classes" => self.num_classes = kv::value(key, v)?,
            "kernel_size" => self.kernel_size = kv::value(key, v)?,
            "conv_kind" => self.conv_kind = v.parse()?,
            "placement" => self.placement = v.parse()?,
            "window_size" => self.window_size = kv::value(key, v)?,
            "embed_dim" => self.embed_dim = kv::value(key, v)?,
            "num_heads" => self.num_heads = kv::value(key, v)?,
            "mlp_ratio" => self.mlp_ratio = kv::value(key, v)?,
            "skip_bconvlstm" => self.skip_bconvlstm = kv::value(key, v)?,
            "skip_sequence" => self.skip_sequence = v.parse()?,
            "lstm_hidden_divisor" => self.lstm_hidden_divisor = kv::value(key, v)?,
            "decoder_chaining" => self.decoder_chaining = v.parse()?,
            "bn_momentum" => self.bn_momentum = kv::value(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("input_height", self.input_height.to_string()),
            ("input_width", self.input_width.to_string()),
            ("input_channels", self.input_channels.to_string()),
            ("base_channels", self.base_channels.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("kernel_size", self.kernel_size.to_string()),
            ("conv_kind", self.conv_kind.to_string()),
            ("placement", self.placement.to_string()),
            ("window_size", self.window_size.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("num_heads", self.num_heads.to_string()),
            ("mlp_ratio", self.mlp_ratio.to_string()),
            ("skip_bconvlstm", self.skip_bconvlstm.to_string()),
            ("skip_sequence", self.skip_sequence.to_string()),
            ("lstm_hidden_divisor", self.lstm_hidden_divisor.to_string()),
            ("decoder_chaining", self.decoder_chaining.to_string()),
            ("bn_momentum", format!("{:?}", self.bn_momentum)),
        ]
    }

    pub fn to_kv(&self) -> String {
        kv::render(&self.to_pairs())
    }

    /// Parses config text; every key must belong to the model config.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in kv::parse(text)? {
            if !cfg.set(&k, &v)? {
                return Err(Error::invalid(format!("unknown model key `{k}`")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_height", self.input_height),
            ("input_width", self.input_width),
            ("input_channels", self.input_channels),
            ("base_channels", self.base_channels),
            ("num_classes", self.num_classes),
            ("window_size", self.window_size),
            ("embed_dim", self.embed_dim),
            ("num_heads", self.num_heads),
            ("mlp_ratio", self.mlp_ratio),
            ("lstm_hidden_divisor", self.lstm_hidden_divisor),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("`{k}` must be positive")));
            }
        }
        if self.input_height % 8 != 0 || self.input_width % 8 != 0 {
            return Err(Error::invalid(format!(
                "input {}x{} must be a multiple of 8 on both axes",
                self.input_height, self.input_width
            )));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::invalid("kernel_size must be odd"));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) {
            return Err(Error::invalid("bn_momentum must lie in (0, 1)"));
        }
        Ok(())
    }

    /// Heads used by the transformer units: the largest divisor of
    /// `embed_dim` not exceeding `num_heads`.
    pub fn heads(&self) -> usize {
        let d = self.embed_dim;
        (1..=self.num_heads.min(d))
            .rev()
            .find(|h| d % h == 0)
            .unwrap_or(1)
    }
}
