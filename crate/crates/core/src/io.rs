//! Binary PGM/PPM images and masks, overlays and dataset directories.

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::metrics::ConfusionCounts;
use crate::tensor::Tensor;

/// Pixels (C, H, W) in [0, 1], C ∈ {1, 3}.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub pixels: Tensor,
    pub source: Option<PathBuf>,
    pub bit_depth: u8,
}

/// Label grid (H, W) with integer values below the class count.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskRecord {
    pub labels: Tensor,
    /// File byte for each class index.
    pub palette: Vec<u8>,
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 || !(bytes[..2] == *b"P5" || bytes[..2] == *b"P6") {
        return Err(Error::format("not a binary PGM (P5) or PPM (P6) file"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::format("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos || pos - start > 9 {
            return Err(Error::format("malformed header field"));
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .expect("ascii digits")
            .parse()
            .expect("short digit run");
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format("header must end with one whitespace byte"));
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::format(format!(
            "unsupported maxval {maxval}; only 8-bit files are read"
        )));
    }
    if width == 0 || height == 0 {
        return Err(Error::format("zero image extent"));
    }
    Ok(Header {
        magic: [bytes[0], bytes[1]],
        width,
        height,
        data_start: pos + 1,
    })
}

/// Raw bytes in (C, H, W) order after validating the whole file.
fn decode(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let h = parse_header(bytes)?;
    let c = if h.magic == *b"P5" { 1 } else { 3 };
    let n = c * h.width * h.height;
    let data = &bytes[h.data_start..];
    if data.len() != n {
        return Err(Error::format(format!(
            "expected {n} data bytes, found {}",
            data.len()
        )));
    }
    // files interleave channels per pixel
    let plane = h.width * h.height;
    let mut out = vec![0u8; n];
    for p in 0..plane {
        for ch in 0..c {
            out[ch * plane + p] = data[p * c + ch];
        }
    }
    Ok((c, h.height, h.width, out))
}

fn encode(c: usize, h: usize, w: usize, planes: &[u8]) -> Vec<u8> {
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    for p in 0..plane {
        for ch in 0..c {
            out.push(planes[ch * plane + p]);
        }
    }
    out
}

pub fn decode_image(bytes: &[u8]) -> Result<Tensor> {
    let (c, h, w, raw) = decode(bytes)?;
    Tensor::new(
        vec![c, h, w],
        raw.iter().map(|&b| f64::from(b) / 255.0).collect(),
    )
}

/// Quantizes to 8 bits, rounding to nearest.
pub fn encode_image(pixels: &Tensor) -> Result<Vec<u8>> {
    let &[c, h, w] = pixels.shape() else {
        return Err(Error::shape(format!(
            "image must be (C, H, W), got {:?}",
            pixels.shape()
        )));
    };
    if !matches!(c, 1 | 3) {
        return Err(Error::shape(format!(
            "{c} channels; only 1 or 3 can be written"
        )));
    }
    if let Some(v) = pixels.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(format!("pixel value {v} outside [0, 1]")));
    }
    let raw: Vec<u8> = pixels
        .data()
        .iter()
        .map(|v| (v * 255.0).round() as u8)
        .collect();
    Ok(encode(c, h, w, &raw))
}

pub fn read_image(path: &Path) -> Result<ImageRecord> {
    let pixels = decode_image(&fs::read(path)?)?;
    Ok(ImageRecord {
        pixels,
        source: Some(path.to_path_buf()),
        bit_depth: 8,
    })
}

pub fn write_image(pixels: &Tensor, path: &Path) -> Result<()> {
    Ok(fs::write(path, encode_image(pixels)?)?)
}

fn palette(num_classes: usize) -> Vec<u8> {
    if num_classes == 1 {
        vec![0, 255]
    } else {
        (0..num_classes).map(|c| c as u8).collect()
    }
}

/// `num_classes == 1` is a binary mask stored as {0, 255}; otherwise the
/// bytes are the labels themselves and must be below `num_classes`.
pub fn decode_mask(bytes: &[u8], num_classes: usize) -> Result<MaskRecord> {
    if num_classes == 0 || num_classes > 256 {
        return Err(Error::invalid(format!(
            "class count {num_classes} outside 1..=256"
        )));
    }
    let (c, h, w, raw) = decode(bytes)?;
    if c != 1 {
        return Err(Error::format("masks must be single-channel PGM"));
    }
    let pal = palette(num_classes);
    let labels = raw
        .iter()
        .map(|b| match pal.iter().position(|p| p == b) {
            Some(l) => Ok(l as f64),
            None if num_classes == 1 => Err(Error::invalid(format!(
                "binary mask byte {b} is neither 0 nor 255"
            ))),
            None => Err(Error::invalid(format!(
                "label {b} outside 0..{num_classes}"
            ))),
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(MaskRecord {
        labels: Tensor::new(vec![h, w], labels)?,
        palette: pal,
    })
}

pub fn encode_mask(labels: &Tensor, num_classes: usize) -> Result<Vec<u8>> {
    let &[h, w] = labels.shape() else {
        return Err(Error::shape(format!(
            "mask must be (H, W), got {:?}",
            labels.shape()
        )));
    };
    let pal = palette(num_classes);
    let raw = labels
        .data()
        .iter()
        .map(|&v| {
            if v.fract() != 0.0 || v < 0.0 || v as usize >= pal.len() {
                return Err(Error::invalid(format!(
                    "label {v} outside 0..{}",
                    pal.len()
                )));
            }
            Ok(pal[v as usize])
        })
        .collect::<Result<Vec<u8>>>()?;
    Ok(encode(1, h, w, &raw))
}

pub fn read_mask(path: &Path, num_classes: usize) -> Result<MaskRecord> {
    decode_mask(&fs::read(path)?, num_classes)
}

pub fn write_mask(labels: &Tensor, num_classes: usize, path: &Path) -> Result<()> {
    Ok(fs::write(path, encode_mask(labels, num_classes)?)?)
}

/// Pads (C, H, W) to (C, h, w) by repeating the last row and column, the
/// nearest-neighbor extension. Shrinking is an error.
pub fn pad_edge(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let &[c, th, tw] = t.shape() else {
        return Err(Error::shape(format!(
            "padding expects (C, H, W), got {:?}",
            t.shape()
        )));
    };
    if th > h || tw > w {
        return Err(Error::invalid(format!(
            "{th}x{tw} image exceeds the {h}x{w} network input"
        )));
    }
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h {
            let row = &t.data()[(ch * th + y.min(th - 1)) * tw..][..tw];
            out.extend((0..w).map(|x| row[x.min(tw - 1)]));
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Top-left (C, h, w) corner of a (C, H, W) tensor.
pub fn crop(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let &[c, th, tw] = t.shape() else {
        return Err(Error::shape(format!(
            "crop expects (C, H, W), got {:?}",
            t.shape()
        )));
    };
    if h > th || w > tw {
        return Err(Error::invalid(format!("cannot crop {th}x{tw} to {h}x{w}")));
    }
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h {
            out.extend_from_slice(&t.data()[(ch * th + y) * tw..][..w]);
        }
    }
    Tensor::new(vec![c, h, w], out)
}

pub const TP_COLOR: [f64; 3] = [0.0, 1.0, 0.0];
pub const FP_COLOR: [f64; 3] = [1.0, 0.0, 0.0];
pub const FN_COLOR: [f64; 3] = [0.0, 0.0, 1.0];

/// RGB overlay of a binary prediction on the grayscale image: true
/// positives tinted green, false positives red, false negatives blue, each
/// a 50% blend; true negatives stay gray.
pub fn overlay(image: &Tensor, truth: &Tensor, pred: &Tensor) -> Result<Tensor> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::shape(format!(
            "image must be (C, H, W), got {:?}",
            image.shape()
        )));
    };
    if truth.shape() != [h, w] || pred.shape() != [h, w] {
        return Err(Error::shape(format!(
            "masks {:?} / {:?} for a {h}x{w} image",
            truth.shape(),
            pred.shape()
        )));
    }
    let plane = h * w;
    let mut out = vec![0.0; 3 * plane];
    for p in 0..plane {
        let gray = (0..c).map(|ch| image.data()[ch * plane + p]).sum::<f64>() / c as f64;
        let tint = match (pred.data()[p] == 1.0, truth.data()[p] == 1.0) {
            (true, true) => Some(TP_COLOR),
            (true, false) => Some(FP_COLOR),
            (false, true) => Some(FN_COLOR),
            (false, false) => None,
        };
        for ch in 0..3 {
            out[ch * plane + p] = match tint {
                Some(t) => 0.5 * gray + 0.5 * t[ch],
                None => gray,
            };
        }
    }
    Tensor::new(vec![3, h, w], out)
}

pub fn overlay_report(image: &Tensor, truth: &Tensor, pred: &Tensor, path: &Path) -> Result<()> {
    write_image(&overlay(image, truth, pred)?, path)
}

/// Counts tinted pixels of an overlay read back from disk: a channel that
/// exceeds both others marks TP (green), FP (red) or FN (blue).
pub fn overlay_counts(rgb: &Tensor) -> ConfusionCounts {
    let plane = rgb.shape()[1] * rgb.shape()[2];
    let mut c = ConfusionCounts::default();
    for p in 0..plane {
        let [r, g, b] = [0, 1, 2].map(|ch| rgb.data()[ch * plane + p]);
        if g > r && g > b {
            c.tp += 1;
        } else if r > g && r > b {
            c.fp += 1;
        } else if b > r && b > g {
            c.fn_ += 1;
        } else {
            c.tn += 1;
        }
    }
    c
}

fn image_name(i: usize, channels: usize) -> String {
    format!("{i:04}.{}", if channels == 1 { "pgm" } else { "ppm" })
}

/// `images/NNNN.ppm` (or `.pgm`) and `masks/NNNN.pgm`.
pub fn write_dataset(dir: &Path, samples: &[Sample], num_classes: usize) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    for (i, s) in samples.iter().enumerate() {
        write_image(
            &s.image,
            &dir.join("images").join(image_name(i, s.image.shape()[0])),
        )?;
        write_mask(
            &s.mask,
            num_classes,
            &dir.join("masks").join(format!("{i:04}.pgm")),
        )?;
    }
    Ok(())
}

/// Reads a dataset directory, pairing images and masks by file stem in
/// sorted order. Returns the stems with the samples.
pub fn read_dataset(dir: &Path, num_classes: usize) -> Result<Vec<(String, Sample)>> {
    let mut stems = Vec::new();
    for e in fs::read_dir(dir.join("images"))? {
        let path = e?.path();
        if matches!(
            path.extension().and_then(|x| x.to_str()),
            Some("pgm" | "ppm")
        ) {
            stems.push(path);
        }
    }
    stems.sort();
    if stems.is_empty() {
        return Err(Error::format(format!(
            "no images under {}",
            dir.join("images").display()
        )));
    }
    stems
        .into_iter()
        .map(|img| {
            let stem = img
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            let mask_path = dir.join("masks").join(format!("{stem}.pgm"));
            let image = read_image(&img)?.pixels;
            let mask = read_mask(&mask_path, num_classes)?.labels;
            if mask.shape() != &image.shape()[1..] {
                return Err(Error::shape(format!(
                    "mask {stem} is {:?} for image {:?}",
                    mask.shape(),
                    image.shape()
                )));
            }
            Ok((stem, Sample { image, mask }))
        })
        .collect()
}
