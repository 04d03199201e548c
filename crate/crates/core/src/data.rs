//! Synthetic datasets, augmentation, splits and batching.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::kv;
use crate::losses::{level_set, LevelSetMap};
use crate::tensor::Tensor;

/// Image (C, H, W) in [0, 1] with its (H, W) label grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub mask: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeFamily {
    Ellipses,
    BlobsWithHoles,
    MultiLesion,
}

impl fmt::Display for ShapeFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ellipses => "ellipses",
            Self::BlobsWithHoles => "blobs_with_holes",
            Self::MultiLesion => "multi_lesion",
        })
    }
}

impl FromStr for ShapeFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ellipses" => Ok(Self::Ellipses),
            "blobs_with_holes" => Ok(Self::BlobsWithHoles),
            "multi_lesion" => Ok(Self::MultiLesion),
            _ => Err(Error::invalid(format!("unknown shape family `{s}`"))),
        }
    }
}

/// Rotated ellipse in pixel coordinates; pixel (y, x) is sampled at its
/// integer position.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cy: f64,
    pub cx: f64,
    pub ry: f64,
    pub rx: f64,
    pub theta: f64,
}

impl Ellipse {
    /// Value of the implicit equation; ≤ 1 inside.
    pub fn level(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.theta.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.rx).powi(2) + (v / self.ry).powi(2)
    }

    pub fn contains(&self, y: f64, x: f64) -> bool {
        self.level(y, x) <= 1.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub family: ShapeFamily,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    /// Foreground/background intensity gap, drawn per image.
    pub contrast_min: f64,
    pub contrast_max: f64,
    /// Foreground classes; labels run 0..=classes.
    pub classes: usize,
    pub count: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            channels: 3,
            family: ShapeFamily::Ellipses,
            noise: 0.1,
            contrast_min: 0.4,
            contrast_max: 0.8,
            classes: 1,
            count: 200,
        }
    }
}

impl SynthSpec {
    pub fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "height" => self.height = kv::value(key, v)?,
            "width" => self.width = kv::value(key, v)?,
            "channels" => self.channels = kv::value(key, v)?,
            "family" => self.family = v.parse()?,
            "noise" => self.noise = kv::value(key, v)?,
            "contrast_min" => self.contrast_min = kv::value(key, v)?,
            "contrast_max" => self.contrast_max = kv::value(key, v)?,
            "classes" => self.classes = kv::value(key, v)?,
            "count" => self.count = kv::value(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_kv(&self) -> String {
        kv::render(&[
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("channels", self.channels.to_string()),
            ("family", self.family.to_string()),
            ("noise", format!("{:?}", self.noise)),
            ("contrast_min", format!("{:?}", self.contrast_min)),
            ("contrast_max", format!("{:?}", self.contrast_max)),
            ("classes", self.classes.to_string()),
            ("count", self.count.to_string()),
        ])
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut s = Self::default();
        for (k, v) in kv::parse(text)? {
            if !s.set(&k, &v)? {
                return Err(Error::invalid(format!("unknown synth key `{k}`")));
            }
        }
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::invalid("synthetic images need at least 8x8 pixels"));
        }
        if !matches!(self.channels, 1 | 3) {
            return Err(Error::invalid("channels must be 1 or 3"));
        }
        if self.classes == 0 || self.classes > 254 {
            return Err(Error::invalid("classes must lie in 1..=254"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::invalid("noise must be a finite nonnegative number"));
        }
        if !(0.0 < self.contrast_min
            && self.contrast_min <= self.contrast_max
            && self.contrast_max <= 1.0)
        {
            return Err(Error::invalid(
                "contrast range must satisfy 0 < min <= max <= 1",
            ));
        }
        Ok(())
    }
}

/// A filled region: an ellipse, optionally with an elliptical hole.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Region {
    pub outer: Ellipse,
    pub hole: Option<Ellipse>,
    pub label: usize,
}

impl Region {
    pub fn contains(&self, y: f64, x: f64) -> bool {
        self.outer.contains(y, x) && !self.hole.is_some_and(|h| h.contains(y, x))
    }
}

fn random_ellipse(rng: &mut impl Rng, h: f64, w: f64, scale: (f64, f64)) -> Ellipse {
    let ry = rng.random_range(scale.0..scale.1) * h;
    let rx = rng.random_range(scale.0..scale.1) * w;
    let m = ry.max(rx);
    Ellipse {
        cy: rng.random_range((m * 0.6).min(h / 2.0)..=(h - 1.0 - m * 0.6).max(h / 2.0)),
        cx: rng.random_range((m * 0.6).min(w / 2.0)..=(w - 1.0 - m * 0.6).max(w / 2.0)),
        ry,
        rx,
        theta: rng.random_range(0.0..std::f64::consts::PI),
    }
}

/// Regions of one image; later regions paint over earlier ones.
pub fn random_regions(spec: &SynthSpec, rng: &mut impl Rng) -> Vec<Region> {
    let (h, w) = (spec.height as f64, spec.width as f64);
    let k = spec.classes;
    let label = |i: usize| i % k + 1;
    match spec.family {
        ShapeFamily::Ellipses => (0..k)
            .map(|i| Region {
                outer: random_ellipse(rng, h, w, (0.15, 0.35)),
                hole: None,
                label: label(i),
            })
            .collect(),
        ShapeFamily::BlobsWithHoles => (0..k)
            .map(|i| {
                let outer = random_ellipse(rng, h, w, (0.25, 0.4));
                let f = rng.random_range(0.3..0.55);
                let hole = Ellipse {
                    ry: outer.ry * f,
                    rx: outer.rx * f,
                    ..outer
                };
                Region {
                    outer,
                    hole: Some(hole),
                    label: label(i),
                }
            })
            .collect(),
        ShapeFamily::MultiLesion => {
            let n = rng.random_range(k.max(2)..=k.max(2) + 2);
            (0..n)
                .map(|i| Region {
                    outer: random_ellipse(rng, h, w, (0.06, 0.16)),
                    hole: None,
                    label: label(i),
                })
                .collect()
        }
    }
}

/// Label grid of a set of regions.
pub fn render_mask(regions: &[Region], h: usize, w: usize) -> Tensor {
    let mut m = vec![0.0; h * w];
    for r in regions {
        for (i, v) in m.iter_mut().enumerate() {
            if r.contains((i / w) as f64, (i % w) as f64) {
                *v = r.label as f64;
            }
        }
    }
    Tensor::new(vec![h, w], m).expect("length matches")
}

/// Deterministic dataset. Each foreground class appears in every mask;
/// draws that hide a class are redrawn.
pub fn synth_dataset(spec: &SynthSpec, seed: u64) -> Result<Vec<Sample>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (spec.height, spec.width);
    let mut out = Vec::with_capacity(spec.count);
    while out.len() < spec.count {
        let regions = random_regions(spec, &mut rng);
        let mask = render_mask(&regions, h, w);
        let complete = (1..=spec.classes).all(|c| mask.data().contains(&(c as f64)))
            && mask.data().contains(&0.0);
        if !complete {
            continue;
        }
        let contrast = rng.random_range(spec.contrast_min..=spec.contrast_max);
        let base = (1.0 - contrast) / 2.0;
        let mut img = Vec::with_capacity(spec.channels * h * w);
        for _ in 0..spec.channels {
            for &l in mask.data() {
                // brighter per class so multiclass masks are separable
                let fg = if l > 0.0 {
                    contrast * l / spec.classes as f64
                } else {
                    0.0
                };
                let n: f64 = if spec.noise > 0.0 {
                    rng.sample::<f64, _>(StandardNormal) * spec.noise
                } else {
                    0.0
                };
                img.push((base + fg + n).clamp(0.0, 1.0));
            }
        }
        out.push(Sample {
            image: Tensor::new(vec![spec.channels, h, w], img)?,
            mask,
        });
    }
    Ok(out)
}

fn flip(t: &Tensor, horizontal: bool) -> Tensor {
    let s = t.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let mut out = t.clone();
    for (dst, src) in out.data_mut().chunks_mut(h * w).zip(t.data().chunks(h * w)) {
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = if horizontal {
                    (y, w - 1 - x)
                } else {
                    (h - 1 - y, x)
                };
                dst[y * w + x] = src[sy * w + sx];
            }
        }
    }
    out
}

pub fn flip_horizontal(t: &Tensor) -> Tensor {
    flip(t, true)
}

pub fn flip_vertical(t: &Tensor) -> Tensor {
    flip(t, false)
}

/// `clip(mean + f·(x − mean), 0, 1)` with the mean over the whole image.
pub fn adjust_contrast(image: &Tensor, f: f64) -> Tensor {
    let mean = image.sum() / image.len() as f64;
    image.map(|x| (mean + f * (x - mean)).clamp(0.0, 1.0))
}

/// Original, contrast ×0.9, contrast ×1.1, horizontal flip, vertical flip.
pub fn augment(s: &Sample) -> [Sample; 5] {
    let with = |image, mask| Sample { image, mask };
    [
        s.clone(),
        with(adjust_contrast(&s.image, 0.9), s.mask.clone()),
        with(adjust_contrast(&s.image, 1.1), s.mask.clone()),
        with(flip_horizontal(&s.image), flip_horizontal(&s.mask)),
        with(flip_vertical(&s.image), flip_vertical(&s.mask)),
    ]
}

/// Shuffled split into (train, validation) indices; validation gets
/// `round(n·fraction)` items, at least one, and train keeps at least one.
pub fn train_val_split(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::invalid("need at least two samples to split"));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid("validation fraction must lie in (0, 1)"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    let val = idx.split_off(n - n_val);
    Ok((idx, val))
}

/// k shuffled folds: each index is validation in exactly one fold.
pub fn kfold(n: usize, k: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if k < 2 || k > n {
        return Err(Error::invalid(format!(
            "cannot make {k} folds of {n} samples"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((0..k)
        .map(|f| {
            let (lo, hi) = (f * n / k, (f + 1) * n / k);
            let val = idx[lo..hi].to_vec();
            let train = idx[..lo].iter().chain(&idx[hi..]).copied().collect();
            (train, val)
        })
        .collect())
}

/// Network target channels for a label grid: the foreground indicator when
/// `num_classes` is 1, one-hot planes otherwise.
pub fn targets(mask: &Tensor, num_classes: usize) -> Result<Tensor> {
    let &[h, w] = mask.shape() else {
        return Err(Error::shape(format!(
            "mask must be (H, W), got {:?}",
            mask.shape()
        )));
    };
    let k = num_classes.max(2);
    if let Some(v) = mask
        .data()
        .iter()
        .find(|&&v| v.fract() != 0.0 || v < 0.0 || v >= k as f64)
    {
        return Err(Error::invalid(format!("label {v} outside 0..{k}")));
    }
    if num_classes == 1 {
        return mask.reshape(&[1, h, w]);
    }
    let mut out = vec![0.0; num_classes * h * w];
    for (p, &l) in mask.data().iter().enumerate() {
        out[l as usize * h * w + p] = 1.0;
    }
    Tensor::new(vec![num_classes, h, w], out)
}

/// Signed distance maps of every target plane; a plane without both
/// foreground and background gets zeros, so it adds nothing to the
/// boundary term.
pub fn target_level_sets(target: &Tensor) -> Result<LevelSetMap> {
    let s = target.shape();
    let plane = s[s.len() - 2] * s[s.len() - 1];
    let mut values = Vec::with_capacity(target.len());
    for p in target.data().chunks(plane) {
        let t = Tensor::new(s[s.len() - 2..].to_vec(), p.to_vec())?;
        match level_set(&t) {
            Ok(l) => values.extend_from_slice(l.values.data()),
            Err(Error::InvalidArgument(_)) if p.iter().all(|&v| v == p[0]) => {
                values.extend(std::iter::repeat_n(0.0, plane))
            }
            Err(e) => return Err(e),
        }
    }
    Ok(LevelSetMap {
        values: Tensor::new(s.to_vec(), values)?,
    })
}

/// A training example with its targets and cached level sets.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub image: Tensor,
    pub target: Tensor,
    pub levelset: LevelSetMap,
    pub mask: Tensor,
}

pub fn prepare(s: &Sample, num_classes: usize) -> Result<Prepared> {
    let target = targets(&s.mask, num_classes)?;
    let levelset = target_level_sets(&target)?;
    Ok(Prepared {
        image: s.image.clone(),
        target,
        levelset,
        mask: s.mask.clone(),
    })
}

/// Stacks items along a new leading axis.
pub fn batch<'a>(
    items: impl IntoIterator<Item = &'a Prepared>,
) -> Result<(Tensor, Tensor, LevelSetMap)> {
    let (mut x, mut g, mut l) = (Vec::new(), Vec::new(), Vec::new());
    for p in items {
        x.push(p.image.clone());
        g.push(p.target.clone());
        l.push(p.levelset.values.clone());
    }
    Ok((
        Tensor::stack(&x)?,
        Tensor::stack(&g)?,
        LevelSetMap {
            values: Tensor::stack(&l)?,
        },
    ))
}
