//! Training losses: soft Dice, soft Jaccard with a bounding-box term,
//! boundary loss on signed distance maps, and their weighted sum.
//!
//! Probabilities `S` and masks `G` are (batch, classes, H, W).

mod levelset;

pub(crate) use levelset::squared_distance;
pub use levelset::{boundary_pixels, level_set, LevelSetMap};

use std::fmt;
use std::str::FromStr;

use crate::autograd::{ReduceOp, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default smoothing constant ξ.
pub const XI: f64 = 1e-6;

fn check_pair(s: &Var, g: &Tensor) -> Result<()> {
    if s.shape() != g.shape() {
        return Err(Error::shape(format!(
            "prediction {:?} vs mask {:?}",
            s.shape(),
            g.shape()
        )));
    }
    if s.shape().len() != 4 {
        return Err(Error::shape(format!(
            "losses expect (batch, classes, H, W), got {:?}",
            s.shape()
        )));
    }
    if let Some(v) = s.value().data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(format!("probability {v} outside [0, 1]")));
    }
    if let Some(v) = g.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid(format!("mask value {v} is not 0 or 1")));
    }
    Ok(())
}

/// `1 − Σ_k 2·w_k·Σ(S_k·G_k) / (Σ S_k² + Σ G_k²) + ξ`, sums over batch and
/// pixels per class. `weights` defaults to 1/K for each of K classes.
pub fn dice_loss(s: &Var, g: &Tensor, weights: Option<&[f64]>, xi: f64) -> Result<Var> {
    check_pair(s, g)?;
    let k = s.shape()[1];
    let w = match weights {
        Some(w) if w.len() != k => {
            return Err(Error::invalid(format!(
                "{} class weights for {k} classes",
                w.len()
            )));
        }
        Some(w) => w.to_vec(),
        None => vec![1.0 / k as f64; k],
    };
    let tape = s.tape();
    let gv = tape.constant(g.clone());
    let axes = [0, 2, 3];
    let inter = s.mul(&gv)?.reduce(ReduceOp::Sum, &axes, false)?;
    let denom = s
        .square()?
        .reduce(ReduceOp::Sum, &axes, false)?
        .add(&gv.reduce(ReduceOp::Sum, &axes, false)?)?;
    if let Some(c) = denom.value().data().iter().position(|&d| d == 0.0) {
        return Err(Error::invalid(format!(
            "dice undefined: class {c} is empty in both prediction and mask"
        )));
    }
    let wt = tape.constant(Tensor::new(vec![k], w.iter().map(|v| 2.0 * v).collect())?);
    let score = inter.div(&denom)?.mul(&wt)?.sum_all()?;
    score.neg()?.add_scalar(1.0 + xi)
}

/// Tight box (y0, y1, x0, x1), inclusive, around the pixels where `keep` holds.
fn bounding_box(
    h: usize,
    w: usize,
    keep: impl Fn(usize) -> bool,
) -> Option<(usize, usize, usize, usize)> {
    let mut b: Option<(usize, usize, usize, usize)> = None;
    for i in (0..h * w).filter(|&i| keep(i)) {
        let (y, x) = (i / w, i % w);
        b = Some(match b {
            None => (y, y, x, x),
            Some((y0, y1, x0, x1)) => (y0.min(y), y1.max(y), x0.min(x), x1.max(x)),
        });
    }
    b
}

/// Per image and class: `1 − IoU − |B − (S ∪ G)| / |B| + ξ`, averaged.
///
/// IoU is `Σ S·G / (Σ S + Σ G − Σ S·G)`; B is the tight box around G and the
/// pixels where S ≥ 0.5; `|B − (S ∪ G)|` is `|B| − Σ_B (S + G − S·G)`. The
/// box extent is a constant of the graph, so gradients flow through the soft
/// union only. The box term enters with a minus sign, so the loss drops
/// below ξ at perfect overlap whenever G does not fill its box.
pub fn jaccard_loss(s: &Var, g: &Tensor, xi: f64) -> Result<Var> {
    check_pair(s, g)?;
    let &[b, k, h, w] = s.shape() else {
        unreachable!()
    };
    let plane = h * w;
    let mut box_mask = vec![0.0; b * k * plane];
    let mut box_area = vec![0.0; b * k];
    for bk in 0..b * k {
        let (sp, gp) = (
            &s.value().data()[bk * plane..][..plane],
            &g.data()[bk * plane..][..plane],
        );
        let (y0, y1, x0, x1) =
            bounding_box(h, w, |i| gp[i] == 1.0 || sp[i] >= 0.5).ok_or_else(|| {
                Error::invalid(format!(
                    "jaccard box undefined: image {} class {} has an empty union",
                    bk / k,
                    bk % k
                ))
            })?;
        for y in y0..=y1 {
            for x in x0..=x1 {
                box_mask[bk * plane + y * w + x] = 1.0;
            }
        }
        box_area[bk] = ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
    }
    let tape = s.tape();
    let gv = tape.constant(g.clone());
    let axes = [2, 3];
    let sg = s.mul(&gv)?;
    let inter = sg.reduce(ReduceOp::Sum, &axes, false)?;
    let sum_s = s.reduce(ReduceOp::Sum, &axes, false)?;
    let sum_g = gv.reduce(ReduceOp::Sum, &axes, false)?;
    let iou = inter.div(&sum_s.add(&sum_g)?.sub(&inter)?)?;
    let union = s.add(&gv)?.sub(&sg)?;
    let area = tape.constant(Tensor::new(vec![b, k], box_area)?);
    let covered = union
        .mul(&tape.constant(Tensor::new(vec![b, k, h, w], box_mask)?))?
        .reduce(ReduceOp::Sum, &axes, false)?;
    let box_term = area.sub(&covered)?.div(&area)?;
    iou.add(&box_term)?.neg()?.add_scalar(1.0 + xi)?.mean_all()
}

/// Mean over pixels of `ϑ_G · S`.
pub fn boundary_loss(s: &Var, levelset: &LevelSetMap) -> Result<Var> {
    if s.shape() != levelset.values.shape() {
        return Err(Error::shape(format!(
            "prediction {:?} vs level set {:?}",
            s.shape(),
            levelset.values.shape()
        )));
    }
    s.mul(&s.tape().constant(levelset.values.clone()))?
        .mean_all()
}

/// Loss weights; `λ_b` decays linearly per epoch down to a floor.
#[derive(Clone, Debug, PartialEq)]
pub struct LossSchedule {
    pub lambda_d: f64,
    pub lambda_j: f64,
    pub lambda_b_initial: f64,
    pub lambda_b_decay: f64,
    pub lambda_b_floor: f64,
}

impl Default for LossSchedule {
    fn default() -> Self {
        Self {
            lambda_d: 1.0,
            lambda_j: 1.0,
            lambda_b_initial: 1.0,
            lambda_b_decay: 0.01,
            lambda_b_floor: 0.01,
        }
    }
}

impl LossSchedule {
    /// Snapped to a 1e-12 grid so decimal settings give the nearest f64 to
    /// the decimal result (1 − 0.01·99 would otherwise sit just above 0.01).
    pub fn lambda_b(&self, epoch: usize) -> f64 {
        let raw = self.lambda_b_initial - self.lambda_b_decay * epoch as f64;
        ((raw * 1e12).round() / 1e12).max(self.lambda_b_floor)
    }
}

/// Which loss terms enter the composite.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossTerms {
    pub dice: bool,
    pub jaccard: bool,
    pub boundary: bool,
}

impl LossTerms {
    pub const ALL: LossTerms = LossTerms {
        dice: true,
        jaccard: true,
        boundary: true,
    };
    pub const DICE: LossTerms = LossTerms {
        dice: true,
        jaccard: false,
        boundary: false,
    };

    /// The seven nonempty subsets, singles first.
    pub fn subsets() -> [LossTerms; 7] {
        let t = |dice, jaccard, boundary| LossTerms {
            dice,
            jaccard,
            boundary,
        };
        [
            t(true, false, false),
            t(false, true, false),
            t(false, false, true),
            t(true, false, true),
            t(true, true, false),
            t(false, true, true),
            t(true, true, true),
        ]
    }
}

impl fmt::Display for LossTerms {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [(self.dice, "d"), (self.jaccard, "j"), (self.boundary, "b")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        f.write_str(&names.join("+"))
    }
}

impl FromStr for LossTerms {
    type Err = Error;
    /// `d`, `j`, `b` joined by `+`, e.g. `d+j+b`.
    fn from_str(s: &str) -> Result<Self> {
        let mut t = LossTerms {
            dice: false,
            jaccard: false,
            boundary: false,
        };
        for part in s.split('+') {
            let slot = match part.trim() {
                "d" => &mut t.dice,
                "j" => &mut t.jaccard,
                "b" => &mut t.boundary,
                other => {
                    return Err(Error::invalid(format!(
                        "unknown loss term `{other}` (use d, j, b)"
                    )))
                }
            };
            if std::mem::replace(slot, true) {
                return Err(Error::invalid(format!("loss term `{part}` repeated")));
            }
        }
        Ok(t)
    }
}

/// Component values of one composite evaluation; unselected terms are `None`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub dice: Option<f64>,
    pub jaccard: Option<f64>,
    pub boundary: Option<f64>,
    pub lambda_b: f64,
    pub total: f64,
}

/// `λ_d·ζ_d + λ_j·ζ_j + λ_b(epoch)·ζ_b` over the selected terms.
pub fn composite_loss(
    s: &Var,
    g: &Tensor,
    levelset: &LevelSetMap,
    schedule: &LossSchedule,
    epoch: usize,
    terms: LossTerms,
) -> Result<(Var, LossBreakdown)> {
    if !(terms.dice || terms.jaccard || terms.boundary) {
        return Err(Error::invalid("no loss term selected"));
    }
    let mut breakdown = LossBreakdown {
        lambda_b: schedule.lambda_b(epoch),
        ..LossBreakdown::default()
    };
    let mut parts = Vec::new();
    if terms.dice {
        let v = dice_loss(s, g, None, XI)?;
        breakdown.dice = Some(v.item());
        parts.push(v.scale(schedule.lambda_d)?);
    }
    if terms.jaccard {
        let v = jaccard_loss(s, g, XI)?;
        breakdown.jaccard = Some(v.item());
        parts.push(v.scale(schedule.lambda_j)?);
    }
    if terms.boundary {
        let v = boundary_loss(s, levelset)?;
        breakdown.boundary = Some(v.item());
        parts.push(v.scale(breakdown.lambda_b)?);
    }
    let mut total = parts[0].clone();
    for p in &parts[1..] {
        total = total.add(p)?;
    }
    breakdown.total = total.item();
    Ok((total, breakdown))
}
