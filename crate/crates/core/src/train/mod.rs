//! Training loop, evaluation and the ablation harness.

mod ablation;
mod optim;

pub use ablation::{
    ablation_csv, ablation_harness, variants, AblationMode, AblationRow, AblationSpec,
};
pub use optim::{lr_schedule, Adam, Plateau, MIN_LR};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tape;
use crate::data::{augment, batch, prepare, train_val_split, Prepared, Sample};
use crate::error::{Error, Result};
use crate::io::{crop, pad_edge};
use crate::kv;
use crate::losses::{composite_loss, LossSchedule, LossTerms};
use crate::metrics::{
    binarize, confusion, seg_metrics, summarize, ImageRow, MetricsReport, SegMetrics,
};
use crate::model::{save_checkpoint, ModelConfig, Network};
use crate::params::{ForwardCtx, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub initial_lr: f64,
    pub plateau_patience: usize,
    /// New rate = old rate × this on a plateau.
    pub plateau_factor: f64,
    pub early_stop_patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss_terms: LossTerms,
    pub schedule: LossSchedule,
    pub val_fraction: f64,
    pub augment: bool,
    /// Wall-clock limit in seconds. No further epoch starts once the next
    /// one would probably overrun it, so runs that hit it are not
    /// reproducible epoch for epoch.
    pub time_budget_secs: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 60,
            initial_lr: 1e-3,
            plateau_patience: 5,
            plateau_factor: 0.25,
            early_stop_patience: 10,
            batch_size: 8,
            seed: 0,
            loss_terms: LossTerms::ALL,
            schedule: LossSchedule::default(),
            val_fraction: 0.1,
            augment: true,
            time_budget_secs: None,
        }
    }
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "max_epochs" => self.max_epochs = kv::value(key, v)?,
            "initial_lr" => self.initial_lr = kv::value(key, v)?,
            "plateau_patience" => self.plateau_patience = kv::value(key, v)?,
            "plateau_factor" => self.plateau_factor = kv::value(key, v)?,
            "early_stop_patience" => self.early_stop_patience = kv::value(key, v)?,
            "batch_size" => self.batch_size = kv::value(key, v)?,
            "seed" => self.seed = kv::value(key, v)?,
            "loss_terms" => self.loss_terms = v.parse()?,
            "lambda_d" => self.schedule.lambda_d = kv::value(key, v)?,
            "lambda_j" => self.schedule.lambda_j = kv::value(key, v)?,
            "lambda_b_initial" => self.schedule.lambda_b_initial = kv::value(key, v)?,
            "lambda_b_decay" => self.schedule.lambda_b_decay = kv::value(key, v)?,
            "lambda_b_floor" => self.schedule.lambda_b_floor = kv::value(key, v)?,
            "val_fraction" => self.val_fraction = kv::value(key, v)?,
            "augment" => self.augment = kv::value(key, v)?,
            "time_budget_secs" => {
                self.time_budget_secs = if v == "none" {
                    None
                } else {
                    Some(kv::value(key, v)?)
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let s = &self.schedule;
        vec![
            ("max_epochs", self.max_epochs.to_string()),
            ("initial_lr", format!("{:?}", self.initial_lr)),
            ("plateau_patience", self.plateau_patience.to_string()),
            ("plateau_factor", format!("{:?}", self.plateau_factor)),
            ("early_stop_patience", self.early_stop_patience.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("loss_terms", self.loss_terms.to_string()),
            ("lambda_d", format!("{:?}", s.lambda_d)),
            ("lambda_j", format!("{:?}", s.lambda_j)),
            ("lambda_b_initial", format!("{:?}", s.lambda_b_initial)),
            ("lambda_b_decay", format!("{:?}", s.lambda_b_decay)),
            ("lambda_b_floor", format!("{:?}", s.lambda_b_floor)),
            ("val_fraction", format!("{:?}", self.val_fraction)),
            ("augment", self.augment.to_string()),
            (
                "time_budget_secs",
                self.time_budget_secs
                    .map_or("none".into(), |t| format!("{t:?}")),
            ),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (k, v) in [
            ("max_epochs", self.max_epochs),
            ("plateau_patience", self.plateau_patience),
            ("early_stop_patience", self.early_stop_patience),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("`{k}` must be positive")));
            }
        }
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::invalid("`initial_lr` must be positive"));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::invalid("`plateau_factor` must lie in (0, 1)"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::invalid("`val_fraction` must lie in (0, 1)"));
        }
        if self
            .time_budget_secs
            .is_some_and(|t| !(t > 0.0 && t.is_finite()))
        {
            return Err(Error::invalid("`time_budget_secs` must be positive"));
        }
        let s = &self.schedule;
        let weights = [
            s.lambda_d,
            s.lambda_j,
            s.lambda_b_initial,
            s.lambda_b_decay,
            s.lambda_b_floor,
        ];
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::invalid(
                "loss weights must be finite and nonnegative",
            ));
        }
        Ok(())
    }
}

/// Reads a combined model + training config; unknown keys are errors.
pub fn parse_run_config(text: &str) -> Result<(ModelConfig, TrainConfig)> {
    let (mut m, mut t) = (ModelConfig::default(), TrainConfig::default());
    for (k, v) in kv::parse(text)? {
        if !m.set(&k, &v)? && !t.set(&k, &v)? {
            return Err(Error::invalid(format!("unknown config key `{k}`")));
        }
    }
    m.validate()?;
    t.validate()?;
    Ok((m, t))
}

pub fn render_run_config(m: &ModelConfig, t: &TrainConfig) -> String {
    let mut pairs = m.to_pairs();
    pairs.extend(t.to_pairs());
    kv::render(&pairs)
}

/// One line of the training log. Loss columns are epoch means of the
/// unweighted terms; unselected terms are `None`. Validation rates are
/// percentages.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lambda_b: f64,
    pub lr: f64,
    pub loss_d: Option<f64>,
    pub loss_j: Option<f64>,
    pub loss_b: Option<f64>,
    pub val_j: f64,
    pub val_d: f64,
}

pub const LOG_HEADER: &str = "epoch,lambda_b,lr,loss_d,loss_j,loss_b,val_J,val_D";

pub fn log_csv(log: &[EpochLog]) -> String {
    let opt = |v: Option<f64>| v.map(|v| format!("{v:.8}")).unwrap_or_default();
    let mut s = format!("{LOG_HEADER}\n");
    for e in log {
        let _ = writeln!(
            s,
            "{},{:.4},{:e},{},{},{},{:.4},{:.4}",
            e.epoch,
            e.lambda_b,
            e.lr,
            opt(e.loss_d),
            opt(e.loss_j),
            opt(e.loss_b),
            e.val_j,
            e.val_d
        );
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub best: ParamStore,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
    pub stopped_early: bool,
}

impl TrainOutcome {
    pub fn best_val_j(&self) -> f64 {
        self.log[self.best_epoch].val_j
    }
}

/// Rates of one prediction: binary masks directly, multiclass as the mean
/// over foreground classes of the one-vs-rest rates.
pub fn image_metrics(probs: &Tensor, mask: &Tensor) -> Result<SegMetrics> {
    let k = probs.shape()[0];
    if k == 1 {
        return Ok(seg_metrics(&confusion(&binarize(&probs.index0(0)), mask)?));
    }
    let &[_, h, w] = probs.shape() else {
        return Err(Error::shape(format!(
            "expected (K, H, W), got {:?}",
            probs.shape()
        )));
    };
    let pred = crate::metrics::argmax_classes(&probs.reshape(&[1, k, h, w])?)?.reshape(&[h, w])?;
    let per: Vec<SegMetrics> = (1..k)
        .map(|c| {
            let is = |t: &Tensor| t.map(|v| if v == c as f64 { 1.0 } else { 0.0 });
            confusion(&is(&pred), &is(mask)).map(|cc| seg_metrics(&cc))
        })
        .collect::<Result<_>>()?;
    let mean = |f: fn(&SegMetrics) -> Option<f64>| summarize(per.iter().map(f)).map(|s| s.mean);
    Ok(SegMetrics {
        j: mean(|m| m.j),
        d: mean(|m| m.d),
        acc: mean(|m| m.acc),
        sn: mean(|m| m.sn),
        sp: mean(|m| m.sp),
    })
}

/// Inference-mode probabilities (K, H, W) for a list of images,
/// `batch_size` at a time. Images smaller than the network input are
/// edge-padded and the probabilities cropped back.
pub fn predict_all(
    net: &Network,
    store: &ParamStore,
    images: &[&Tensor],
    batch_size: usize,
) -> Result<Vec<Tensor>> {
    let (h, w) = (net.config().input_height, net.config().input_width);
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch_size.max(1)) {
        let x = Tensor::stack(
            &chunk
                .iter()
                .map(|t| pad_edge(t, h, w))
                .collect::<Result<Vec<_>>>()?,
        )?;
        let y = net.predict(store, &x)?;
        for (i, t) in chunk.iter().enumerate() {
            out.push(crop(&y.index0(i), t.shape()[1], t.shape()[2])?);
        }
    }
    Ok(out)
}

/// Per-image report over labelled samples; `names` label the rows.
pub fn evaluate(
    net: &Network,
    store: &ParamStore,
    samples: &[(String, &Tensor, &Tensor)],
) -> Result<MetricsReport> {
    let images: Vec<&Tensor> = samples.iter().map(|s| s.1).collect();
    let probs = predict_all(net, store, &images, 16)?;
    let rows = samples
        .iter()
        .zip(&probs)
        .map(|((name, _, mask), p)| {
            Ok(ImageRow {
                image: name.clone(),
                metrics: image_metrics(p, mask)?,
                hd: Vec::new(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(MetricsReport {
        rows,
        ..MetricsReport::default()
    })
}

fn mean_rates(net: &Network, store: &ParamStore, data: &[Prepared]) -> Result<(f64, f64)> {
    let s: Vec<(String, &Tensor, &Tensor)> = data
        .iter()
        .map(|p| (String::new(), &p.image, &p.mask))
        .collect();
    let sum = evaluate(net, store, &s)?.summary();
    Ok((
        sum[0].map_or(0.0, |m| m.mean),
        sum[1].map_or(0.0, |m| m.mean),
    ))
}

/// One optimizer step on a batch; returns the unweighted loss terms.
fn train_step(
    net: &Network,
    store: &mut ParamStore,
    adam: &mut Adam,
    items: &[&Prepared],
    cfg: &TrainConfig,
    epoch: usize,
    lr: f64,
) -> Result<[Option<f64>; 3]> {
    let (x, g, lv) = batch(items.iter().copied())?;
    let tape = Tape::new();
    let mut ctx = ForwardCtx::training(net.config().bn_momentum);
    let grads = {
        let bound = store.bind(&tape, true);
        let s = net.forward(&bound, &tape.constant(x), &mut ctx)?;
        let (loss, parts) = composite_loss(&s, &g, &lv, &cfg.schedule, epoch, cfg.loss_terms)?;
        if !parts.total.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        let mut all = tape.backward(&loss)?;
        let grads: BTreeMap<String, Tensor> = bound
            .vars()
            .map(|(k, v)| {
                (
                    k.to_string(),
                    all.take(v).unwrap_or_else(|| Tensor::zeros(v.shape())),
                )
            })
            .collect();
        (grads, [parts.dice, parts.jaccard, parts.boundary])
    };
    adam.step(store, &grads.0, lr)?;
    ctx.apply_updates(store)?;
    Ok(grads.1)
}

/// Trains on `data` with a held-out validation split of the original
/// (unaugmented) samples, keeping the parameters of the best validation
/// Jaccard. `init` replaces the seeded initialization. With `out`, the
/// best checkpoint, `log.csv` and `train.cfg` are written there; on a
/// non-finite loss the best checkpoint so far is written before the error
/// is returned.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    data: &[Sample],
    init: Option<ParamStore>,
    out: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let start = std::time::Instant::now();
    let net = Network::new(model_cfg)?;
    let (tr_idx, va_idx) = train_val_split(data.len(), cfg.val_fraction, cfg.seed)?;
    let k = model_cfg.num_classes;
    let mut train_set = Vec::new();
    for &i in &tr_idx {
        if cfg.augment {
            for a in augment(&data[i]) {
                train_set.push(prepare(&a, k)?);
            }
        } else {
            train_set.push(prepare(&data[i], k)?);
        }
    }
    let val_set: Vec<Prepared> = va_idx
        .iter()
        .map(|&i| prepare(&data[i], k))
        .collect::<Result<_>>()?;

    let mut store = match init {
        Some(s) => s,
        None => net.build(cfg.seed)?,
    };
    let mut adam = Adam::default();
    let mut plateau = Plateau::new(
        cfg.plateau_patience,
        cfg.plateau_factor,
        cfg.early_stop_patience,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut lr = cfg.initial_lr;
    let mut best = store.clone();
    let mut best_epoch = 0;
    let mut log = Vec::new();
    let mut stopped_early = false;

    let bail = |best: &ParamStore, e: Error| -> Error {
        if let Some(dir) = out {
            if let Err(w) = save_checkpoint(dir, model_cfg, best) {
                return w;
            }
        }
        e
    };

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut sums = [None::<f64>; 3];
        for chunk in order.chunks(cfg.batch_size) {
            let items: Vec<&Prepared> = chunk.iter().map(|&i| &train_set[i]).collect();
            let parts = match train_step(&net, &mut store, &mut adam, &items, cfg, epoch, lr) {
                Ok(p) => p,
                Err(e @ Error::NonFinite(_)) => return Err(bail(&best, e)),
                Err(e) => return Err(e),
            };
            for (s, p) in sums.iter_mut().zip(parts) {
                if let Some(p) = p {
                    *s = Some(s.unwrap_or(0.0) + p * chunk.len() as f64);
                }
            }
        }
        let n = train_set.len() as f64;
        let (val_j, val_d) = mean_rates(&net, &store, &val_set)?;
        let entry = EpochLog {
            epoch,
            lambda_b: cfg.schedule.lambda_b(epoch),
            lr,
            loss_d: sums[0].map(|s| s / n),
            loss_j: sums[1].map(|s| s / n),
            loss_b: sums[2].map(|s| s / n),
            val_j,
            val_d,
        };
        on_epoch(&entry);
        log.push(entry);
        lr = plateau.observe(val_j, lr);
        if plateau.improved() {
            best = store.clone();
            best_epoch = epoch;
        }
        if plateau.should_stop() {
            stopped_early = epoch + 1 < cfg.max_epochs;
            break;
        }
        if let Some(budget) = cfg.time_budget_secs {
            let spent = start.elapsed().as_secs_f64();
            if spent + spent / (epoch + 1) as f64 > budget {
                stopped_early = epoch + 1 < cfg.max_epochs;
                break;
            }
        }
    }

    if let Some(dir) = out {
        save_checkpoint(dir, model_cfg, &best)?;
        std::fs::write(dir.join("log.csv"), log_csv(&log))?;
        std::fs::write(dir.join("train.cfg"), render_run_config(model_cfg, cfg))?;
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        log,
        stopped_early,
    })
}
