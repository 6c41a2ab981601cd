//! Clips, frame preprocessing and the on-disk dataset layout
//! `<root>/<split>/<video_id>/frame_%06d.pgm` with optional `labels.csv`.

pub mod pgm;
pub mod synth;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::warn;

use crate::error::{DataError, Error, Result};
use crate::tensor::Tensor;
pub use pgm::GrayImage;
pub use synth::{gen_synthetic, AnomalyKind, Split, SynthSpec};

pub const LABELS_FILE: &str = "labels.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Synthetic,
    Disk,
}

/// Ordered frames `[C, H, W]` on `[-1, 1]` with per-frame labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub video_id: String,
    pub frames: Vec<Tensor<f32>>,
    /// 0 normal, 1 abnormal; all 0 when no labels were available.
    pub labels: Vec<u8>,
    pub labelled: bool,
    pub source: Source,
}

impl Clip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Bilinear resize to `(height, width)` with half-pixel centres, then
/// `[0, 255] -> [-1, 1]`. Returns `[1, height, width]`.
pub fn preprocess(image: &GrayImage, height: usize, width: usize) -> Result<Tensor<f32>> {
    if height == 0 || width == 0 {
        return Err(Error::config(format!("cannot resize to {height}x{width}")));
    }
    let (sh, sw) = (image.height, image.width);
    let src = |y: usize, x: usize| image.pixels[y * sw + x] as f64;
    let axis = |dst: usize, n_dst: usize, n_src: usize| -> (usize, usize, f64) {
        let pos = ((dst as f64 + 0.5) * n_src as f64 / n_dst as f64 - 0.5).clamp(0.0, (n_src - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(n_src - 1);
        (lo, hi, pos - lo as f64)
    };
    Ok(Tensor::from_fn(&[1, height, width], |i| {
        let (y0, y1, fy) = axis(i / width, height, sh);
        let (x0, x1, fx) = axis(i % width, width, sw);
        let top = src(y0, x0) * (1.0 - fx) + src(y0, x1) * fx;
        let bottom = src(y1, x0) * (1.0 - fx) + src(y1, x1) * fx;
        let v = top * (1.0 - fy) + bottom * fy;
        (v * 2.0 / 255.0 - 1.0) as f32
    }))
}

/// Inverse of the intensity map, rounding to the nearest grey level.
pub fn quantize(frame: &Tensor<f32>) -> Result<GrayImage> {
    if frame.rank() != 3 || frame.shape()[0] != 1 {
        return Err(Error::shape("quantize", format!("expected a [1, H, W] frame, got {:?}", frame.shape())));
    }
    let pixels = frame
        .data()
        .iter()
        .map(|&v| (((v as f64 + 1.0) * 0.5).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Ok(GrayImage {
        width: frame.shape()[2],
        height: frame.shape()[1],
        pixels,
    })
}

fn frame_index(name: &str) -> Option<usize> {
    let digits = name.strip_prefix("frame_")?.strip_suffix(".pgm")?;
    if digits.len() != 6 || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

pub fn frame_name(index: usize) -> String {
    format!("frame_{index:06}.pgm")
}

fn read_labels(path: &Path, first: usize, len: usize) -> Result<BTreeMap<usize, u8>> {
    let bad = |reason: String| -> Error {
        DataError::BadLabel {
            path: path.to_path_buf(),
            reason,
        }
        .into()
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let headers = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["frame_index", "label"] {
        return Err(bad(format!("header must be `frame_index,label`, got `{}`", headers.iter().collect::<Vec<_>>().join(","))));
    }
    let mut labels = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| bad(e.to_string()))?;
        let index: usize = record[0].trim().parse().map_err(|_| bad(format!("frame index `{}`", &record[0])))?;
        let label: u8 = match record[1].trim() {
            "0" => 0,
            "1" => 1,
            other => return Err(bad(format!("label `{other}` is not 0 or 1"))),
        };
        if index < first || index >= first + len {
            return Err(DataError::LabelOutOfRange {
                path: path.to_path_buf(),
                index,
            }
            .into());
        }
        labels.insert(index, label);
    }
    Ok(labels)
}

/// Loads one clip from a directory of `frame_%06d.pgm` files.
///
/// Frames are resized to `(height, width)`. Without a labels file every
/// frame is labelled normal and a warning is logged.
pub fn load_frame_dir(dir: &Path, labels_path: Option<&Path>, height: usize, width: usize) -> Result<Clip> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut indexed = BTreeMap::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if let Some(i) = entry.file_name().to_str().and_then(frame_index) {
            indexed.insert(i, entry.path());
        }
    }
    let (&first, _) = indexed.first_key_value().ok_or_else(|| DataError::NoFrames { dir: dir.to_path_buf() })?;
    for (expected, &i) in (first..).zip(indexed.keys()) {
        if i != expected {
            return Err(DataError::MissingFrame {
                dir: dir.to_path_buf(),
                missing: expected,
            }
            .into());
        }
    }
    let mut frames = Vec::with_capacity(indexed.len());
    let mut source_shape: Option<(usize, usize)> = None;
    for (&i, path) in &indexed {
        let img = pgm::read(path)?;
        let shape = (img.height, img.width);
        if let Some(s) = source_shape.filter(|&s| s != shape) {
            return Err(DataError::FrameShape {
                index: i,
                expected: vec![s.0, s.1],
                found: vec![shape.0, shape.1],
            }
            .into());
        }
        source_shape = Some(shape);
        frames.push(preprocess(&img, height, width)?);
    }
    let len = frames.len();
    let default_labels = dir.join(LABELS_FILE);
    let labels_path = labels_path.map(Path::to_path_buf).or_else(|| default_labels.exists().then_some(default_labels));
    let (labels, labelled) = match labels_path {
        Some(p) => {
            let map = read_labels(&p, first, len)?;
            if map.len() < len {
                warn!("{}: {} of {len} frames have no label, treating them as normal", p.display(), len - map.len());
            }
            ((first..first + len).map(|i| map.get(&i).copied().unwrap_or(0)).collect(), true)
        }
        None => {
            warn!("{}: no {LABELS_FILE}, all frames labelled normal", dir.display());
            (vec![0; len], false)
        }
    };
    let video_id = dir
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("video")
        .to_string();
    Ok(Clip {
        video_id,
        frames,
        labels,
        labelled,
        source: Source::Disk,
    })
}

/// Loads every clip under `root/split`, in video id order.
pub fn load_split(root: &Path, split: &str, height: usize, width: usize) -> Result<Vec<Clip>> {
    let dir = root.join(split);
    let mut videos: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    videos.sort();
    if videos.is_empty() {
        return Err(DataError::NoFrames { dir }.into());
    }
    videos.iter().map(|v| load_frame_dir(v, None, height, width)).collect()
}

/// Writes a clip as `dir/frame_%06d.pgm` (numbered from 0) plus `labels.csv`.
pub fn write_clip(dir: &Path, clip: &Clip) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, frame) in clip.frames.iter().enumerate() {
        pgm::write(&dir.join(frame_name(i)), &quantize(frame)?)?;
    }
    if clip.labelled {
        let path = dir.join(LABELS_FILE);
        let mut text = String::from("frame_index,label\n");
        for (i, l) in clip.labels.iter().enumerate() {
            text.push_str(&format!("{i},{l}\n"));
        }
        std::fs::write(&path, text).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
