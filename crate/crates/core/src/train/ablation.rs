use std::fmt::Write as _;
use std::str::FromStr;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::losses::LossTerms;
use crate::model::{transfer_from, ModelConfig, Network, Placement};
use crate::nn::ConvKind;
use crate::tensor::Tensor;

use super::{evaluate, train, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationMode {
    /// Transformer placement rows, Dice loss only.
    Placement,
    /// The seven loss subsets.
    LossCombo,
    /// Training from scratch vs from weights learnt on a source dataset.
    Transfer,
}

impl FromStr for AblationMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "placement" => Ok(Self::Placement),
            "loss_combo" => Ok(Self::LossCombo),
            "transfer" => Ok(Self::Transfer),
            _ => Err(Error::invalid(format!("unknown ablation mode `{s}`"))),
        }
    }
}

/// Everything a harness run needs. `source` is only read in transfer mode.
#[derive(Clone, Debug)]
pub struct AblationSpec {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: Vec<Sample>,
    pub test: Vec<Sample>,
    pub source: Option<Vec<Sample>>,
}

/// Mean test-set rates of one variant, in percent; `None` when no image
/// defines the rate.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub rates: [Option<f64>; 5],
}

/// Variant label and configuration pairs for a mode.
pub fn variants(
    mode: AblationMode,
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Vec<(String, ModelConfig, TrainConfig)> {
    match mode {
        AblationMode::Placement => {
            let dice = TrainConfig {
                loss_terms: LossTerms::DICE,
                ..cfg.clone()
            };
            let row = |label: &str, placement, conv_kind| {
                (
                    label.to_string(),
                    ModelConfig {
                        placement,
                        conv_kind,
                        skip_bconvlstm: true,
                        ..model.clone()
                    },
                    dice.clone(),
                )
            };
            vec![
                row("baseline", Placement::None, ConvKind::Standard),
                row("separable", Placement::None, ConvKind::Separable),
                row(
                    "separable+transformer:dense",
                    Placement::Dense,
                    ConvKind::Separable,
                ),
                row(
                    "separable+transformer:decoder_pools",
                    Placement::DecoderPools,
                    ConvKind::Separable,
                ),
                row(
                    "separable+transformer:skips",
                    Placement::Skips,
                    ConvKind::Separable,
                ),
                row(
                    "separable+transformer:skips_and_dense",
                    Placement::SkipsAndDense,
                    ConvKind::Separable,
                ),
            ]
        }
        AblationMode::LossCombo => LossTerms::subsets()
            .into_iter()
            .map(|t| {
                (
                    t.to_string(),
                    model.clone(),
                    TrainConfig {
                        loss_terms: t,
                        ..cfg.clone()
                    },
                )
            })
            .collect(),
        AblationMode::Transfer => ["no_transfer", "transfer"]
            .iter()
            .map(|l| (l.to_string(), model.clone(), cfg.clone()))
            .collect(),
    }
}

fn test_rates(
    net: &Network,
    store: &crate::params::ParamStore,
    test: &[Sample],
) -> Result<[Option<f64>; 5]> {
    let rows: Vec<(String, &Tensor, &Tensor)> = test
        .iter()
        .map(|s| (String::new(), &s.image, &s.mask))
        .collect();
    let sum = evaluate(net, store, &rows)?.summary();
    Ok([0, 1, 2, 3, 4].map(|i| sum[i].map(|s| s.mean)))
}

/// Trains every variant of `mode` under the same seeds and budget and
/// scores it on `spec.test`.
pub fn ablation_harness(
    mode: AblationMode,
    spec: &AblationSpec,
    mut progress: impl FnMut(&str),
) -> Result<Vec<AblationRow>> {
    if spec.test.is_empty() {
        return Err(Error::invalid("ablation needs a nonempty test set"));
    }
    let mut rows = Vec::new();
    for (label, mcfg, tcfg) in variants(mode, &spec.model, &spec.train) {
        progress(&label);
        let net = Network::new(&mcfg)?;
        let init = if label == "transfer" {
            let source = spec
                .source
                .as_ref()
                .ok_or_else(|| Error::invalid("transfer mode needs a source dataset"))?;
            let pre = train(&mcfg, &tcfg, source, None, None, |_| {})?;
            let mut store = net.build(tcfg.seed)?;
            transfer_from(
                &mut store,
                &pre.best
                    .iter()
                    .map(|(k, t)| (k.to_string(), t.clone()))
                    .collect(),
            )?;
            Some(store)
        } else {
            None
        };
        let out = train(&mcfg, &tcfg, &spec.data, init, None, |_| {})?;
        rows.push(AblationRow {
            variant: label,
            rates: test_rates(&net, &out.best, &spec.test)?,
        });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,J,D,Acc,Sn,Sp\n");
    for r in rows {
        s.push_str(&r.variant);
        for v in r.rates {
            s.push(',');
            if let Some(v) = v {
                let _ = write!(s, "{v:.4}");
            }
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_sets() {
        let (m, t) = (ModelConfig::default(), TrainConfig::default());
        let p = variants(AblationMode::Placement, &m, &t);
        assert_eq!(p.len(), 6);
        assert!(p.iter().all(|(_, _, t)| t.loss_terms == LossTerms::DICE));
        assert_eq!(
            (p[0].1.conv_kind, p[0].1.placement),
            (ConvKind::Standard, Placement::None)
        );
        let l: Vec<String> = variants(AblationMode::LossCombo, &m, &t)
            .into_iter()
            .map(|v| v.0)
            .collect();
        assert_eq!(l, ["d", "j", "b", "d+b", "d+j", "j+b", "d+j+b"]);
        assert_eq!(variants(AblationMode::Transfer, &m, &t).len(), 2);
        assert!("tables".parse::<AblationMode>().is_err());
    }
}
