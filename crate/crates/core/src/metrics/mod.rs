//! Pixel-level segmentation metrics, Hausdorff distance and report tables.
//!
//! Rates are percentages. A rate whose denominator is zero is `None` and is
//! left out of every aggregate.

mod stats;

pub use stats::{paired_t_test, parse_scores, significant, TTest};

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::losses::squared_distance;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

impl std::ops::AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.tn += o.tn;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

fn as_binary(t: &Tensor, what: &str) -> Result<Vec<bool>> {
    t.data()
        .iter()
        .map(|&v| match v {
            0.0 => Ok(false),
            1.0 => Ok(true),
            _ => Err(Error::invalid(format!("{what} value {v} is not 0 or 1"))),
        })
        .collect()
}

/// Thresholds probabilities at 0.5 (inclusive).
pub fn binarize(probs: &Tensor) -> Tensor {
    probs.map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
}

/// Pixel counts of a binary prediction against a binary mask.
pub fn confusion(pred: &Tensor, truth: &Tensor) -> Result<ConfusionCounts> {
    if pred.shape() != truth.shape() {
        return Err(Error::shape(format!(
            "prediction {:?} vs mask {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (p, g) in as_binary(pred, "prediction")?
        .into_iter()
        .zip(as_binary(truth, "mask")?)
    {
        match (p, g) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Jaccard, Dice, accuracy, sensitivity, specificity in percent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegMetrics {
    pub j: Option<f64>,
    pub d: Option<f64>,
    pub acc: Option<f64>,
    pub sn: Option<f64>,
    pub sp: Option<f64>,
}

fn pct(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| 100.0 * num as f64 / den as f64)
}

pub fn seg_metrics(c: &ConfusionCounts) -> SegMetrics {
    SegMetrics {
        j: pct(c.tp, c.tp + c.fp + c.fn_),
        d: pct(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        acc: pct(c.tp + c.tn, c.total()),
        sn: pct(c.tp, c.tp + c.fn_),
        sp: pct(c.tn, c.tn + c.fp),
    }
}

impl SegMetrics {
    pub fn values(&self) -> [Option<f64>; 5] {
        [self.j, self.d, self.acc, self.sn, self.sp]
    }
}

/// Single (H, W) plane of a tensor whose leading axes are all 1.
fn plane(t: &Tensor) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() < 2 || s[..s.len() - 2].iter().any(|&d| d != 1) {
        return Err(Error::shape(format!(
            "expected a single (H, W) plane, got {s:?}"
        )));
    }
    Ok((s[s.len() - 2], s[s.len() - 1]))
}

/// Symmetric Hausdorff distance between the foreground pixel sets, in pixels.
///
/// Each directed distance reads an exact distance transform of the other
/// set at the points of this one.
pub fn hausdorff(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let (h, w) = plane(a)?;
    let (ma, mb) = (as_binary(a, "mask")?, as_binary(b, "mask")?);
    if !ma.iter().any(|&v| v) || !mb.iter().any(|&v| v) {
        return Err(Error::invalid("hausdorff distance of an empty mask"));
    }
    let directed = |from: &[bool], to: &[bool]| {
        let d = squared_distance(to, h, w);
        from.iter()
            .zip(&d)
            .filter(|(&f, _)| f)
            .map(|(_, &d)| d)
            .fold(0.0, f64::max)
    };
    Ok(directed(&ma, &mb).max(directed(&mb, &ma)).sqrt())
}

/// Mean and sample standard deviation (n − 1) of the present values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

pub fn summarize(values: impl IntoIterator<Item = Option<f64>>) -> Option<Summary> {
    let v: Vec<f64> = values.into_iter().flatten().collect();
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some(Summary {
        mean,
        std,
        count: v.len(),
    })
}

/// One row of a report: an image, its five rates and optional per-class
/// Hausdorff distances.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRow {
    pub image: String,
    pub metrics: SegMetrics,
    pub hd: Vec<Option<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<ImageRow>,
    /// Names of the Hausdorff columns, e.g. `HD_class_1`.
    pub hd_columns: Vec<String>,
    pub ttests: Vec<(String, String, TTest)>,
}

fn cell(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.4}")).unwrap_or_default()
}

impl MetricsReport {
    /// Per-column summaries: J, D, Acc, Sn, Sp, then the HD columns.
    pub fn summary(&self) -> Vec<Option<Summary>> {
        let mut out: Vec<Option<Summary>> = (0..5)
            .map(|i| summarize(self.rows.iter().map(|r| r.metrics.values()[i])))
            .collect();
        for k in 0..self.hd_columns.len() {
            out.push(summarize(
                self.rows.iter().map(|r| r.hd.get(k).copied().flatten()),
            ));
        }
        out
    }

    /// Header, one line per image, then a `mean±std` row. Absent values
    /// are empty fields.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("image,J,D,Acc,Sn,Sp");
        for c in &self.hd_columns {
            s.push(',');
            s.push_str(c);
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.image);
            for v in r.metrics.values().into_iter().chain(r.hd.iter().copied()) {
                s.push(',');
                s.push_str(&cell(v));
            }
            s.push('\n');
        }
        s.push_str("mean±std");
        for m in self.summary() {
            s.push(',');
            if let Some(m) = m {
                let _ = write!(s, "{:.4}±{:.4}", m.mean, m.std);
            }
        }
        s.push('\n');
        s
    }

    pub fn ttests_csv(&self) -> String {
        let mut s = String::from("method_a,method_b,t,df,p\n");
        for (a, b, t) in &self.ttests {
            let _ = writeln!(s, "{a},{b},{:.6},{},{:.6}", t.t, t.df, t.p);
        }
        s
    }
}

/// Per-class Dice and Hausdorff for one class over a set of images.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassScores {
    pub dice: Vec<Option<f64>>,
    pub hd: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MulticlassReport {
    /// Indexed by class, background included.
    pub classes: Vec<ClassScores>,
    /// Per image: mean Dice over the foreground classes present.
    pub mean_dice: Vec<Option<f64>>,
    pub mean_hd: Vec<Option<f64>>,
}

impl MulticlassReport {
    pub fn dice_summary(&self, class: usize) -> Option<Summary> {
        summarize(self.classes[class].dice.iter().copied())
    }

    pub fn hd_summary(&self, class: usize) -> Option<Summary> {
        summarize(self.classes[class].hd.iter().copied())
    }
}

/// Index of the largest value along axis 1 of (N, K, H, W); ties go to the
/// lowest class.
pub fn argmax_classes(probs: &Tensor) -> Result<Tensor> {
    let &[n, k, h, w] = probs.shape() else {
        return Err(Error::shape(format!(
            "expected (N, K, H, W), got {:?}",
            probs.shape()
        )));
    };
    let plane = h * w;
    let mut out = vec![0.0; n * plane];
    for b in 0..n {
        for p in 0..plane {
            let mut best = 0;
            for c in 1..k {
                if probs.data()[(b * k + c) * plane + p] > probs.data()[(b * k + best) * plane + p]
                {
                    best = c;
                }
            }
            out[b * plane + p] = best as f64;
        }
    }
    Tensor::new(vec![n, h, w], out)
}

/// Scores an (N, K, H, W) probability map against (N, H, W) labels.
///
/// A class absent from both prediction and labels of an image has no Dice
/// for that image; Hausdorff needs the class in both. Averages skip absent
/// entries and the background class 0.
pub fn multiclass_report(probs: &Tensor, labels: &Tensor) -> Result<MulticlassReport> {
    let pred = argmax_classes(probs)?;
    let &[n, k, h, w] = probs.shape() else {
        unreachable!()
    };
    if labels.shape() != [n, h, w] {
        return Err(Error::shape(format!(
            "labels {:?} for predictions {:?}",
            labels.shape(),
            probs.shape()
        )));
    }
    if let Some(v) = labels
        .data()
        .iter()
        .find(|&&v| v.fract() != 0.0 || v < 0.0 || v >= k as f64)
    {
        return Err(Error::invalid(format!("label {v} outside 0..{k}")));
    }
    let plane = h * w;
    let mut classes = vec![
        ClassScores {
            dice: Vec::new(),
            hd: Vec::new()
        };
        k
    ];
    for b in 0..n {
        let p = &pred.data()[b * plane..][..plane];
        let g = &labels.data()[b * plane..][..plane];
        for (c, scores) in classes.iter_mut().enumerate() {
            let one = |src: &[f64]| {
                Tensor::new(
                    vec![h, w],
                    src.iter()
                        .map(|&v| if v == c as f64 { 1.0 } else { 0.0 })
                        .collect(),
                )
            };
            let (pm, gm) = (one(p)?, one(g)?);
            scores.dice.push(seg_metrics(&confusion(&pm, &gm)?).d);
            scores.hd.push(if pm.sum() > 0.0 && gm.sum() > 0.0 {
                Some(hausdorff(&pm, &gm)?)
            } else {
                None
            });
        }
    }
    let fg = if k > 1 { 1 } else { 0 };
    let mean_dice = (0..n)
        .map(|b| summarize(classes[fg..].iter().map(|s| s.dice[b])).map(|m| m.mean))
        .collect();
    let mean_hd = (0..n)
        .map(|b| summarize(classes[fg..].iter().map(|s| s.hd[b])).map(|m| m.mean))
        .collect();
    Ok(MulticlassReport {
        classes,
        mean_dice,
        mean_hd,
    })
}
