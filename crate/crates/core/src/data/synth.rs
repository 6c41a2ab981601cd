//! Moving-square videos with injected motion and appearance anomalies.
//!
//! Normal clips contain squares gliding horizontally at constant speed and
//! bouncing off the side walls. A test clip additionally shows one anomalous
//! object from its onset for `duration` frames: a square moving vertically,
//! a square moving three times faster than the normal range allows, or a
//! disc. A frame is labelled abnormal exactly when that object is visible.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Clip, Source};
use crate::error::{DataError, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

pub const BACKGROUND: f64 = 0.1;
pub const FOREGROUND: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnomalyKind {
    Vertical,
    Speed,
    Disc,
}

impl std::str::FromStr for AnomalyKind {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vertical" => Ok(AnomalyKind::Vertical),
            "speed" => Ok(AnomalyKind::Speed),
            "disc" => Ok(AnomalyKind::Disc),
            other => Err(DataError::InvalidSpec(format!("unknown anomaly `{other}` (vertical|speed|disc)")).into()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub split: Split,
    pub height: usize,
    pub width: usize,
    /// Normal objects per clip.
    pub objects: usize,
    /// Side of a square and diameter of a disc, in pixels.
    pub object_size: usize,
    /// Normal horizontal speed range in pixels per frame.
    pub min_speed: f64,
    pub max_speed: f64,
    /// Test clip `i` uses `anomalies[i % len]`.
    pub anomalies: Vec<AnomalyKind>,
    /// Inclusive range of 0-based onset frames.
    pub onset: (usize, usize),
    /// Inclusive range of anomaly durations in frames.
    pub duration: (usize, usize),
    /// Gaussian noise standard deviation on the `[0, 1]` intensity scale.
    pub noise: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn train(seed: u64) -> Self {
        SynthSpec {
            split: Split::Train,
            height: 64,
            width: 64,
            objects: 2,
            object_size: 10,
            min_speed: 1.0,
            max_speed: 2.0,
            anomalies: Vec::new(),
            onset: (0, 0),
            duration: (0, 0),
            noise: 0.02,
            seed,
        }
    }

    pub fn test(seed: u64) -> Self {
        SynthSpec {
            split: Split::Test,
            anomalies: vec![AnomalyKind::Vertical, AnomalyKind::Speed, AnomalyKind::Disc],
            onset: (8, 20),
            duration: (8, 16),
            ..Self::train(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DataError::InvalidSpec(m).into());
        if self.split == Split::Train && !self.anomalies.is_empty() {
            return Err(DataError::AnomalyInTrainingSpec.into());
        }
        if self.object_size == 0 || self.object_size > self.height.min(self.width) {
            return bad(format!("object size {} does not fit a {}x{} canvas", self.object_size, self.height, self.width));
        }
        if !(self.min_speed > 0.0 && self.min_speed <= self.max_speed && self.max_speed.is_finite()) {
            return bad(format!("speed range [{}, {}] is invalid", self.min_speed, self.max_speed));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise {} must be non-negative", self.noise));
        }
        if !self.anomalies.is_empty()
            && (self.onset.0 > self.onset.1 || self.duration.0 == 0 || self.duration.0 > self.duration.1)
        {
            return bad(format!("onset {:?} / duration {:?} ranges are invalid", self.onset, self.duration));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Square,
    Disc,
}

#[derive(Debug, Clone)]
struct Object {
    shape: Shape,
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
}

impl Object {
    fn step(&mut self, w: f64, h: f64, size: f64) {
        self.x += self.vx;
        self.y += self.vy;
        let bounce = |p: &mut f64, v: &mut f64, hi: f64| {
            if *p < 0.0 {
                *p = -*p;
                *v = -*v;
            } else if *p > hi {
                *p = 2.0 * hi - *p;
                *v = -*v;
            }
        };
        bounce(&mut self.x, &mut self.vx, w - size);
        bounce(&mut self.y, &mut self.vy, h - size);
    }

    /// Fraction of pixel `(px, py)` covered by the object.
    fn coverage(&self, px: usize, py: usize, size: f64) -> f64 {
        let (px, py) = (px as f64, py as f64);
        match self.shape {
            Shape::Square => {
                let ox = ((px + 1.0).min(self.x + size) - px.max(self.x)).max(0.0);
                let oy = ((py + 1.0).min(self.y + size) - py.max(self.y)).max(0.0);
                ox * oy
            }
            Shape::Disc => {
                let r = size / 2.0;
                let d = f64::hypot(px + 0.5 - (self.x + r), py + 0.5 - (self.y + r));
                (r + 0.5 - d).clamp(0.0, 1.0)
            }
        }
    }
}

fn random_sign(rng: &mut Rng) -> f64 {
    if rng.random_bool(0.5) {
        1.0
    } else {
        -1.0
    }
}

fn place(spec: &SynthSpec, rng: &mut Rng, shape: Shape, vx: f64, vy: f64) -> Object {
    let s = spec.object_size as f64;
    Object {
        shape,
        x: rng.random_range(0.0..=spec.width as f64 - s),
        y: rng.random_range(0.0..=spec.height as f64 - s),
        vx,
        vy,
    }
}

fn normal_speed(spec: &SynthSpec, rng: &mut Rng) -> f64 {
    random_sign(rng) * rng.random_range(spec.min_speed..=spec.max_speed)
}

fn render(spec: &SynthSpec, objects: &[&Object], rng: &mut Rng) -> Tensor<f32> {
    let (h, w, s) = (spec.height, spec.width, spec.object_size as f64);
    let noise = Normal::new(0.0, spec.noise).expect("validated noise");
    Tensor::from_fn(&[1, h, w], |i| {
        let (py, px) = (i / w, i % w);
        let cover = objects.iter().map(|o| o.coverage(px, py, s)).fold(0.0, f64::max);
        let v = BACKGROUND + (FOREGROUND - BACKGROUND) * cover + noise.sample(rng);
        (2.0 * v.clamp(0.0, 1.0) - 1.0) as f32
    })
}

/// Generates `n_clips` clips of `clip_len` frames; frames are `[1, H, W]`
/// on `[-1, 1]`. Each clip draws from its own stream of `spec.seed`.
pub fn gen_synthetic(spec: &SynthSpec, n_clips: usize, clip_len: usize) -> Result<Vec<Clip>> {
    spec.validate()?;
    if clip_len == 0 {
        return Err(DataError::InvalidSpec("clip length must be positive".into()).into());
    }
    if !spec.anomalies.is_empty() && spec.onset.1 >= clip_len {
        return Err(DataError::InvalidSpec(format!(
            "latest onset {} does not fit in {clip_len} frames",
            spec.onset.1
        ))
        .into());
    }
    let (w, h, s) = (spec.width as f64, spec.height as f64, spec.object_size as f64);
    let split_stream = match spec.split {
        Split::Train => 0,
        Split::Test => 1 << 32,
    };
    (0..n_clips)
        .map(|c| {
            let mut rng = rng::stream(spec.seed, split_stream + c as u64);
            let mut normal: Vec<Object> = (0..spec.objects)
                .map(|_| {
                    let vx = normal_speed(spec, &mut rng);
                    place(spec, &mut rng, Shape::Square, vx, 0.0)
                })
                .collect();
            let mut anomaly = (!spec.anomalies.is_empty()).then(|| {
                let kind = spec.anomalies[c % spec.anomalies.len()];
                let onset = rng.random_range(spec.onset.0..=spec.onset.1);
                let duration = rng.random_range(spec.duration.0..=spec.duration.1);
                let v = normal_speed(spec, &mut rng);
                let obj = match kind {
                    AnomalyKind::Vertical => place(spec, &mut rng, Shape::Square, 0.0, v),
                    AnomalyKind::Speed => place(spec, &mut rng, Shape::Square, 3.0 * v, 0.0),
                    AnomalyKind::Disc => place(spec, &mut rng, Shape::Disc, v, 0.0),
                };
                (onset, duration, obj)
            });
            let mut frames = Vec::with_capacity(clip_len);
            let mut labels = Vec::with_capacity(clip_len);
            for t in 0..clip_len {
                let mut visible: Vec<&Object> = normal.iter().collect();
                let mut label = 0;
                if let Some((onset, duration, obj)) = &anomaly {
                    if t >= *onset && t < onset + duration {
                        visible.push(obj);
                        label = 1;
                    }
                }
                frames.push(render(spec, &visible, &mut rng));
                labels.push(label);
                for o in normal.iter_mut() {
                    o.step(w, h, s);
                }
                if let Some((onset, _, obj)) = anomaly.as_mut() {
                    if t >= *onset {
                        obj.step(w, h, s);
                    }
                }
            }
            Ok(Clip {
                video_id: format!("video_{c:03}"),
                frames,
                labels,
                labelled: true,
                source: Source::Synthetic,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn training_clips_are_normal() {
        let clips = gen_synthetic(&SynthSpec::train(1), 3, 20).unwrap();
        assert!(clips.iter().all(|c| c.labels.iter().all(|&l| l == 0)));
        assert!(clips.iter().all(|c| c.frames.iter().all(|f| f.data().iter().all(|v| (-1.0..=1.0).contains(v)))));
        let mut spec = SynthSpec::train(1);
        spec.anomalies = vec![AnomalyKind::Disc];
        assert!(matches!(
            gen_synthetic(&spec, 1, 20),
            Err(Error::Data(DataError::AnomalyInTrainingSpec))
        ));
    }

    #[test]
    fn same_seed_same_clips() {
        let a = gen_synthetic(&SynthSpec::test(4), 3, 30).unwrap();
        let b = gen_synthetic(&SynthSpec::test(4), 3, 30).unwrap();
        assert_eq!(a, b);
        let c = gen_synthetic(&SynthSpec::test(5), 3, 30).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn labels_follow_onset_and_duration() {
        let mut spec = SynthSpec::test(2);
        spec.onset = (19, 19);
        spec.duration = (10, 10);
        for clip in gen_synthetic(&spec, 3, 40).unwrap() {
            let expect: Vec<u8> = (0..40).map(|t| u8::from((19..29).contains(&t))).collect();
            assert_eq!(clip.labels, expect);
        }
    }

    #[test]
    fn anomalous_object_changes_the_pixels() {
        let mut spec = SynthSpec::test(3);
        spec.noise = 0.0;
        spec.onset = (5, 5);
        spec.duration = (5, 5);
        let with = gen_synthetic(&spec, 3, 12).unwrap();
        let total = |f: &Tensor<f32>| f.data().iter().map(|&v| v as f64).sum::<f64>();
        for clip in &with {
            assert!(total(&clip.frames[5]) > total(&clip.frames[4]) + 10.0);
            assert!(total(&clip.frames[10]) < total(&clip.frames[9]) - 10.0);
        }
    }

    #[test]
    fn squares_bounce_inside_the_canvas() {
        let mut o = Object {
            shape: Shape::Square,
            x: 1.0,
            y: 0.0,
            vx: -3.0,
            vy: 0.0,
        };
        o.step(20.0, 20.0, 4.0);
        assert_eq!((o.x, o.vx), (2.0, 3.0));
        o.x = 15.0;
        o.step(20.0, 20.0, 4.0);
        assert_eq!((o.x, o.vx), (14.0, -3.0));
    }

    #[test]
    fn invalid_specs() {
        let mut s = SynthSpec::test(0);
        s.onset = (50, 60);
        assert!(gen_synthetic(&s, 1, 40).is_err());
        let mut s = SynthSpec::train(0);
        s.object_size = 100;
        assert!(s.validate().is_err());
        assert!("bogus".parse::<AnomalyKind>().is_err());
        assert_eq!("speed".parse::<AnomalyKind>().unwrap(), AnomalyKind::Speed);
    }
}
