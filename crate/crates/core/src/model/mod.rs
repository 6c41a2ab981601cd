//! Encoder/decoder around the memory read.
//!
//! The encoder stacks `feature_dims.len()` stages, each halving the
//! resolution:
//!
//! ```text
//! conv3x3/s2 -> BN -> ReLU -> conv3x3 -> BN -> ReLU
//! ```
//!
//! The last stage's second convolution outputs `query_channels` and has a
//! bias but no BN or ReLU; its output is L2-normalized per location to give
//! the query map. The decoder mirrors the encoder: the bottleneck input is
//! `query || read` (`2C` channels), and each stage is
//!
//! ```text
//! [concat skip] -> conv3x3 -> BN -> ReLU -> convT4x4/s2 -> BN -> ReLU
//! ```
//!
//! followed by a final conv3x3 and `tanh`.

use std::collections::BTreeMap;

use log::info;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchNormMode, BatchStats, Tape, Var};
use crate::error::{Error, Result};
use crate::memory::{read_on_tape, MatchWeights, MemoryBank, QueryMap, ReadMap};
use crate::rng::Rng;
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Reconstruction,
    Prediction,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Reconstruction => "reconstruction",
            Task::Prediction => "prediction",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reconstruction" => Ok(Task::Reconstruction),
            "prediction" => Ok(Task::Prediction),
            other => Err(Error::config(format!("unknown task `{other}` (reconstruction|prediction)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub task: Task,
    /// Frames concatenated along channels as encoder input.
    pub input_window: usize,
    /// Index of the target frame within a sample of `sample_len()` frames.
    pub target_index: usize,
    pub frame_height: usize,
    pub frame_width: usize,
    pub channels_in: usize,
    /// Width of each encoder stage; the stage count is the length.
    pub feature_dims: Vec<usize>,
    pub query_channels: usize,
    pub use_skip_connections: bool,
    /// When false the decoder sees `query || query` and no memory is read.
    pub use_memory: bool,
}

impl ModelConfig {
    /// Desk defaults for `task` at 64x64 grayscale.
    pub fn for_task(task: Task) -> Self {
        let (input_window, target_index, use_skip_connections) = match task {
            Task::Reconstruction => (1, 0, false),
            Task::Prediction => (4, 4, true),
        };
        ModelConfig {
            task,
            input_window,
            target_index,
            frame_height: 64,
            frame_width: 64,
            channels_in: 1,
            feature_dims: vec![8, 16, 32],
            query_channels: 32,
            use_skip_connections,
            use_memory: true,
        }
    }

    /// Reconstruction of the ninth of sixteen frames.
    pub fn motion_cues() -> Self {
        ModelConfig {
            input_window: 16,
            target_index: 8,
            ..Self::for_task(Task::Reconstruction)
        }
    }

    /// Frames per training sample: the window, plus the target for prediction.
    pub fn sample_len(&self) -> usize {
        match self.task {
            Task::Reconstruction => self.input_window,
            Task::Prediction => self.input_window + 1,
        }
    }

    pub fn stages(&self) -> usize {
        self.feature_dims.len()
    }

    pub fn query_size(&self) -> (usize, usize) {
        let f = 1 << self.stages();
        (self.frame_height / f, self.frame_width / f)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.input_window == 0 || self.channels_in == 0 || self.query_channels == 0 {
            return bad("input_window, channels_in and query_channels must be positive".into());
        }
        if self.feature_dims.is_empty() || self.feature_dims.contains(&0) {
            return bad(format!("feature_dims must be non-empty and positive, got {:?}", self.feature_dims));
        }
        let f = 1usize << self.stages();
        if !self.frame_height.is_multiple_of(f) || !self.frame_width.is_multiple_of(f) || self.frame_height < f || self.frame_width < f {
            return bad(format!(
                "frame {}x{} is not divisible by the encoder stride {f}",
                self.frame_height, self.frame_width
            ));
        }
        match self.task {
            Task::Reconstruction if self.target_index >= self.input_window => bad(format!(
                "reconstruction target_index {} must be < input_window {}",
                self.target_index, self.input_window
            )),
            Task::Prediction if self.target_index != self.input_window => bad(format!(
                "prediction target_index {} must equal input_window {}",
                self.target_index, self.input_window
            )),
            _ => Ok(()),
        }
    }

    /// Logs when the skip setting differs from the task's usual choice.
    pub fn note_overrides(&self) {
        let usual = self.task == Task::Prediction;
        if self.use_skip_connections != usual {
            info!(
                "skip connections {} for the {} task (overriding the default)",
                if self.use_skip_connections { "enabled" } else { "disabled" },
                self.task.as_str()
            );
        }
    }

    fn input_channels(&self) -> usize {
        self.channels_in * self.input_window
    }
}

/// Trainable parameters and batch-norm running statistics, keyed by name.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub params: BTreeMap<String, Tensor<T>>,
    pub buffers: BTreeMap<String, Tensor<T>>,
}

fn conv_weight<T: Scalar>(rng: &mut Rng, shape: [usize; 4], fan_in: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(&shape, |_| T::from_f64(rng.random_range(-bound..bound)))
}

struct Builder<'a, T> {
    rng: &'a mut Rng,
    out: ModelParams<T>,
}

impl<T: Scalar> Builder<'_, T> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, bias: bool) {
        let w = conv_weight(self.rng, [cout, cin, 3, 3], cin * 9);
        self.out.params.insert(format!("{name}.weight"), w);
        if bias {
            self.out.params.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
        }
    }

    fn conv_t(&mut self, name: &str, cin: usize, cout: usize) {
        // Each output pixel of a 4x4 stride-2 kernel sees 2x2 taps per input channel.
        let w = conv_weight(self.rng, [cin, cout, 4, 4], cin * 4);
        self.out.params.insert(format!("{name}.weight"), w);
    }

    fn bn(&mut self, name: &str, c: usize) {
        self.out.params.insert(format!("{name}.gamma"), Tensor::full(&[c], T::one()));
        self.out.params.insert(format!("{name}.beta"), Tensor::zeros(&[c]));
        self.out.buffers.insert(format!("{name}.running_mean"), Tensor::zeros(&[c]));
        self.out.buffers.insert(format!("{name}.running_var"), Tensor::full(&[c], T::one()));
    }
}

impl<T: Scalar> ModelParams<T> {
    /// Fan-in scaled uniform weights, zero biases, identity batch norms.
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            rng,
            out: ModelParams {
                params: BTreeMap::new(),
                buffers: BTreeMap::new(),
            },
        };
        let dims = &config.feature_dims;
        let last = dims.len() - 1;
        for (i, &f) in dims.iter().enumerate() {
            let cin = if i == 0 { config.input_channels() } else { dims[i - 1] };
            b.conv(&format!("enc{i}.conv1"), cin, f, false);
            b.bn(&format!("enc{i}.bn1"), f);
            if i == last {
                b.conv(&format!("enc{i}.conv2"), f, config.query_channels, true);
            } else {
                b.conv(&format!("enc{i}.conv2"), f, f, false);
                b.bn(&format!("enc{i}.bn2"), f);
            }
        }
        for j in (0..dims.len()).rev() {
            let mut cin = if j == last { 2 * config.query_channels } else { dims[j + 1] };
            if config.use_skip_connections && j != last {
                cin += dims[j];
            }
            b.conv(&format!("dec{j}.conv"), cin, dims[j], false);
            b.bn(&format!("dec{j}.bn1"), dims[j]);
            b.conv_t(&format!("dec{j}.up"), dims[j], dims[j]);
            b.bn(&format!("dec{j}.bn2"), dims[j]);
        }
        b.conv("out.conv", dims[0], config.channels_in, true);
        Ok(b.out)
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let c = |m: &BTreeMap<String, Tensor<T>>| m.iter().map(|(k, v)| (k.clone(), v.cast())).collect();
        ModelParams {
            params: c(&self.params),
            buffers: c(&self.buffers),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().chain(self.buffers.values()).all(Tensor::is_finite)
    }

    /// Folds batch statistics into the running buffers with momentum 0.1.
    pub fn apply_batch_stats(&mut self, stats: &[(String, BatchStats<T>)]) -> Result<()> {
        let m = lit::<T>(BN_MOMENTUM);
        let keep = T::one() - m;
        for (name, s) in stats {
            for (suffix, values) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                let key = format!("{name}.{suffix}");
                let buf = self
                    .buffers
                    .get_mut(&key)
                    .ok_or_else(|| Error::config(format!("no batch-norm buffer `{key}`")))?;
                for (r, &v) in buf.data_mut().iter_mut().zip(values.iter()) {
                    *r = keep * *r + m * v;
                }
            }
        }
        Ok(())
    }
}

/// Tape handles for every parameter.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub vars: BTreeMap<String, Var>,
}

impl BoundParams {
    /// Records every parameter as a trainable leaf (`trainable`) or constant.
    pub fn bind<T: Scalar>(tape: &mut Tape<T>, params: &ModelParams<T>, trainable: bool) -> Self {
        let vars = params
            .params
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), trainable)))
            .collect();
        BoundParams { vars }
    }

    fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::config(format!("missing model parameter `{name}`")))
    }
}

/// Everything the graph needs besides the tape: bound parameters, the
/// running statistics, the batch-norm mode and the collected batch stats.
pub struct Graph<'a, T> {
    pub config: &'a ModelConfig,
    pub bound: &'a BoundParams,
    pub params: &'a ModelParams<T>,
    pub mode: BatchNormMode,
    pub stats: Vec<(String, BatchStats<T>)>,
}

/// Encoder output: queries as `[B * K, C]` rows and the skip features.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub queries: Var,
    pub skips: Vec<Var>,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub recon: Var,
    pub encoded: Encoded,
    /// `[B * K, C]`, absent when memory is bypassed.
    pub read: Option<Var>,
    /// `[B * K, M]`, absent when memory is bypassed.
    pub weights: Option<Var>,
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new(config: &'a ModelConfig, bound: &'a BoundParams, params: &'a ModelParams<T>, mode: BatchNormMode) -> Self {
        Graph {
            config,
            bound,
            params,
            mode,
            stats: Vec::new(),
        }
    }

    fn bn(&mut self, tape: &mut Tape<T>, x: Var, name: &str) -> Result<Var> {
        let buffer = |s: &str| {
            let key = format!("{name}.{s}");
            self.params
                .buffers
                .get(&key)
                .ok_or_else(|| Error::config(format!("missing batch-norm buffer `{key}`")))
        };
        let (rm, rv) = (buffer("running_mean")?, buffer("running_var")?);
        let gamma = self.bound.get(&format!("{name}.gamma"))?;
        let beta = self.bound.get(&format!("{name}.beta"))?;
        let (y, stats) = tape.batch_norm2d(x, gamma, beta, rm.data(), rv.data(), self.mode)?;
        if let Some(s) = stats {
            self.stats.push((name.to_string(), s));
        }
        Ok(y)
    }

    fn conv(&self, tape: &mut Tape<T>, x: Var, name: &str, stride: usize, bias: bool) -> Result<Var> {
        let w = self.bound.get(&format!("{name}.weight"))?;
        let b = if bias { Some(self.bound.get(&format!("{name}.bias"))?) } else { None };
        tape.conv2d(x, w, b, stride, 1)
    }

    /// `input: [B, channels_in * input_window, H, W]`.
    pub fn encode(&mut self, tape: &mut Tape<T>, input: Var) -> Result<Encoded> {
        let c = self.config;
        let s = tape.shape(input).to_vec();
        let expect = [c.input_channels(), c.frame_height, c.frame_width];
        if s.len() != 4 || s[1..] != expect {
            return Err(Error::shape(
                "encode",
                format!("input {s:?} does not match [B, {}, {}, {}]", expect[0], expect[1], expect[2]),
            ));
        }
        let last = c.stages() - 1;
        let mut x = input;
        let mut skips = Vec::new();
        for i in 0..c.stages() {
            x = self.conv(tape, x, &format!("enc{i}.conv1"), 2, false)?;
            x = self.bn(tape, x, &format!("enc{i}.bn1"))?;
            x = tape.relu(x);
            if i == last {
                x = self.conv(tape, x, &format!("enc{i}.conv2"), 1, true)?;
            } else {
                x = self.conv(tape, x, &format!("enc{i}.conv2"), 1, false)?;
                x = self.bn(tape, x, &format!("enc{i}.bn2"))?;
                x = tape.relu(x);
                skips.push(x);
            }
        }
        let (batch, height, width) = (s[0], tape.shape(x)[2], tape.shape(x)[3]);
        let rows = tape.permute(x, &[0, 2, 3, 1])?;
        let rows = tape.reshape(rows, &[batch * height * width, c.query_channels])?;
        let queries = tape.l2_normalize(rows, 1)?;
        if !c.use_skip_connections {
            skips.clear();
        }
        Ok(Encoded {
            queries,
            skips,
            batch,
            height,
            width,
        })
    }

    fn to_nchw(&self, tape: &mut Tape<T>, rows: Var, e: &Encoded) -> Result<Var> {
        let c = tape.shape(rows)[1];
        let grid = tape.reshape(rows, &[e.batch, e.height, e.width, c])?;
        tape.permute(grid, &[0, 3, 1, 2])
    }

    /// Decodes from queries and read features (both `[B * K, C]`).
    pub fn decode(&mut self, tape: &mut Tape<T>, encoded: &Encoded, read: Var) -> Result<Var> {
        let c = self.config;
        let (qs, rs) = (tape.shape(encoded.queries).to_vec(), tape.shape(read).to_vec());
        if qs != rs || qs[1] != c.query_channels {
            return Err(Error::shape(
                "decode",
                format!("queries {qs:?} and read {rs:?} must both be [B*K, {}]", c.query_channels),
            ));
        }
        let expected_skips = if c.use_skip_connections { c.stages() - 1 } else { 0 };
        if encoded.skips.len() != expected_skips {
            return Err(Error::config(format!(
                "decoder expects {expected_skips} skip features, got {}",
                encoded.skips.len()
            )));
        }
        let q = self.to_nchw(tape, encoded.queries, encoded)?;
        let r = self.to_nchw(tape, read, encoded)?;
        let mut x = tape.concat(&[q, r], 1)?;
        let last = c.stages() - 1;
        for j in (0..c.stages()).rev() {
            if c.use_skip_connections && j != last {
                x = tape.concat(&[x, encoded.skips[j]], 1)?;
            }
            x = self.conv(tape, x, &format!("dec{j}.conv"), 1, false)?;
            x = self.bn(tape, x, &format!("dec{j}.bn1"))?;
            x = tape.relu(x);
            let w = self.bound.get(&format!("dec{j}.up.weight"))?;
            x = tape.conv_transpose2d(x, w, None, 2, 1)?;
            x = self.bn(tape, x, &format!("dec{j}.bn2"))?;
            x = tape.relu(x);
        }
        x = self.conv(tape, x, "out.conv", 1, true)?;
        Ok(tape.tanh(x))
    }

    /// Encode, read `items` (`[M, C]`) unless memory is bypassed, decode.
    pub fn forward(&mut self, tape: &mut Tape<T>, input: Var, items: Option<Var>) -> Result<Forward> {
        let encoded = self.encode(tape, input)?;
        let (read, weights) = match (self.config.use_memory, items) {
            (true, Some(items)) => {
                let (r, w) = read_on_tape(tape, encoded.queries, items)?;
                (Some(r), Some(w))
            }
            (true, None) => return Err(Error::config("model uses memory but no items were supplied")),
            (false, _) => (None, None),
        };
        let recon = self.decode(tape, &encoded, read.unwrap_or(encoded.queries))?;
        Ok(Forward {
            recon,
            encoded,
            read,
            weights,
        })
    }
}

/// Stacks frames `[channels_in, H, W]` along channels; `batch` holds one
/// window per element. Returns `[B, channels_in * window, H, W]`.
pub fn stack_windows<T: Scalar>(batch: &[Vec<&Tensor<T>>]) -> Result<Tensor<T>> {
    let first = batch
        .first()
        .and_then(|w| w.first())
        .ok_or_else(|| Error::shape("stack windows", "empty batch"))?;
    let fs = first.shape().to_vec();
    let window = batch[0].len();
    let mut data = Vec::with_capacity(batch.len() * window * first.len());
    for w in batch {
        if w.len() != window {
            return Err(Error::shape("stack windows", format!("windows of length {} and {window}", w.len())));
        }
        for f in w {
            if f.shape() != fs.as_slice() {
                return Err(Error::shape("stack windows", format!("frame {:?} vs {fs:?}", f.shape())));
            }
            data.extend_from_slice(f.data());
        }
    }
    Tensor::new(vec![batch.len(), window * fs[0], fs[1], fs[2]], data)
}

/// Result of an evaluation-mode forward pass on one window.
#[derive(Debug, Clone)]
pub struct Inference<T> {
    /// `[channels_in, H, W]`.
    pub recon: Tensor<T>,
    pub query_map: QueryMap<T>,
    pub read: Option<(ReadMap<T>, MatchWeights<T>)>,
}

/// Runs the model in evaluation mode (running batch-norm statistics, no
/// gradients) on a single window of frames.
pub fn infer<T: Scalar>(
    config: &ModelConfig,
    params: &ModelParams<T>,
    bank: Option<&MemoryBank<T>>,
    window: &[&Tensor<T>],
) -> Result<Inference<T>> {
    if window.len() != config.input_window {
        return Err(Error::shape(
            "encode",
            format!("window has {} frames, model expects {}", window.len(), config.input_window),
        ));
    }
    let input = stack_windows(&[window.to_vec()])?;
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params, false);
    let mut g = Graph::new(config, &bound, params, BatchNormMode::Eval);
    let x = tape.constant(input);
    let items = bank.map(|b| tape.constant(b.items().clone()));
    let out = g.forward(&mut tape, x, items)?;
    let e = &out.encoded;
    let query_map = QueryMap::new(e.height, e.width, tape.value(e.queries).clone())?;
    let read = match (out.read, out.weights) {
        (Some(r), Some(w)) => Some((
            ReadMap {
                height: e.height,
                width: e.width,
                features: tape.value(r).clone(),
            },
            MatchWeights {
                probs: tape.value(w).clone(),
            },
        )),
        _ => None,
    };
    let shape = tape.shape(out.recon)[1..].to_vec();
    Ok(Inference {
        recon: tape.value(out.recon).clone().reshape(&shape)?,
        query_map,
        read,
    })
}
