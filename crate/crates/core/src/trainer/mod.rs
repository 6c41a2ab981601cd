//! Training loop, test-time scoring driver, and checkpointing.

pub mod checkpoint;
mod config;

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::{debug, info};
use rand::seq::SliceRandom;

pub use config::{Config, MemoryConfig, ScoreConfig, TrainParams};

use crate::autodiff::{BatchNormMode, Tape};
use crate::data::Clip;
use crate::error::{DataError, Error, Result};
use crate::losses::{reconstruction_loss, training_losses, LossBreakdown};
use crate::memory::{assign, gated_update, regular_score, update_rows, GateDecision, MatchWeights, MemoryBank, Phase, QueryMap};
use crate::model::{infer, stack_windows, BoundParams, Graph, ModelParams};
use crate::optim::{cosine_lr, OptimizerState};
use crate::rng::{self, RngState};
use crate::scoring::{distance_score, normalize_trace, psnr, to_unit_range, trace_auc, NormalizationScope, TraceRow};
use crate::tensor::Tensor;

/// Optimizer key for the memory items when they are trained.
pub const ITEMS_PARAM: &str = "memory.items";
pub const CHECKPOINT_FILE: &str = "checkpoint.mnad";
pub const LOG_FILE: &str = "train_log.csv";
pub const LOG_NOTE: &str = "# l_compact and l_separate sum over the K queries of a frame and average over the batch";
pub const LOG_HEADER: &str = "step,epoch,lr,l_rec,l_compact,l_separate,l_total";

/// Everything needed to resume training or to evaluate.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: Config,
    pub params: ModelParams<f32>,
    pub bank: MemoryBank<f32>,
    pub optimizer: OptimizerState<f32>,
    pub rng: RngState,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed optimizer steps.
    pub step: u64,
}

impl TrainState {
    /// Fresh parameters and memory drawn from `config.train.seed`.
    pub fn init(config: &Config) -> Result<Self> {
        config.validate()?;
        let mut r = rng::seeded(config.train.seed);
        let params = ModelParams::init(&config.model, &mut r)?;
        let bank = MemoryBank::random(config.memory.items.max(1), config.model.query_channels, &mut r)?;
        let mut optimizer = OptimizerState::new(&params.params);
        if config.memory.trainable_items && config.model.use_memory {
            let items = BTreeMap::from([(ITEMS_PARAM.to_string(), bank.items().clone())]);
            optimizer.moments.extend(OptimizerState::new(&items).moments);
        }
        Ok(TrainState {
            config: config.clone(),
            params,
            bank,
            optimizer,
            rng: RngState::capture(&r),
            epoch: 0,
            step: 0,
        })
    }

    /// Refuses to evaluate with a checkpoint trained for another task.
    pub fn expect_task(&self, task: crate::model::Task) -> Result<()> {
        if self.config.model.task != task {
            return Err(crate::error::CheckpointError::ConfigMismatch {
                key: "model.task".into(),
                found: self.config.model.task.as_str().into(),
                expected: task.as_str().into(),
            }
            .into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub loss: LossBreakdown,
}

impl LogRow {
    pub fn to_csv(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{:e},{:.9},{:.9},{:.9},{:.9}",
            self.step, self.epoch, self.lr, l.rec, l.compact, l.separate, l.total
        )
    }
}

/// Sample windows `(clip, first frame)`, stride 1.
fn windows(clips: &[Clip], sample_len: usize) -> Vec<(usize, usize)> {
    clips
        .iter()
        .enumerate()
        .flat_map(|(c, clip)| (0..=clip.len().saturating_sub(sample_len)).map(move |s| (c, s)))
        .collect()
}

fn check_clips(config: &Config, clips: &[Clip], training: bool) -> Result<()> {
    let m = &config.model;
    let expected = vec![m.channels_in, m.frame_height, m.frame_width];
    if clips.is_empty() {
        return Err(DataError::NoFrames { dir: PathBuf::from("<clips>") }.into());
    }
    for clip in clips {
        if clip.len() < m.sample_len() {
            return Err(DataError::ClipTooShort {
                video_id: clip.video_id.clone(),
                len: clip.len(),
                needed: m.sample_len(),
            }
            .into());
        }
        if training && clip.labels.contains(&1) {
            return Err(DataError::AnomalyInTrainingSpec.into());
        }
        if let Some((i, f)) = clip.frames.iter().enumerate().find(|(_, f)| f.shape() != expected.as_slice()) {
            return Err(DataError::FrameShape {
                index: i,
                expected,
                found: f.shape().to_vec(),
            }
            .into());
        }
    }
    Ok(())
}

/// Input frames and target of the sample starting at `start`.
fn sample<'a>(config: &Config, clip: &'a Clip, start: usize) -> (Vec<&'a Tensor<f32>>, &'a Tensor<f32>) {
    let m = &config.model;
    let window = clip.frames[start..start + m.input_window].iter().collect();
    (window, &clip.frames[start + m.target_index])
}

fn non_finite(what: &str, step: u64) -> Error {
    Error::NonFinite(format!("{what} at step {step}; training aborted"))
}

/// One optimizer step on a batch of samples.
fn train_step(state: &mut TrainState, batch: &[(Vec<&Tensor<f32>>, &Tensor<f32>)], lr: f64) -> Result<LossBreakdown> {
    let config = state.config.clone();
    let m = &config.model;
    let input = stack_windows(&batch.iter().map(|(w, _)| w.clone()).collect::<Vec<_>>())?;
    let target = stack_windows(&batch.iter().map(|(_, t)| vec![*t]).collect::<Vec<_>>())?;

    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, &state.params, true);
    let trainable_items = config.memory.trainable_items && m.use_memory;
    let items = m.use_memory.then(|| tape.leaf(state.bank.items().clone(), trainable_items));
    let x = tape.constant(input);
    let y = tape.constant(target);
    let mut graph = Graph::new(m, &bound, &state.params, BatchNormMode::Train);
    let out = graph.forward(&mut tape, x, items)?;
    let stats = std::mem::take(&mut graph.stats);

    let (total, breakdown) = match (items, out.weights) {
        (Some(items), Some(w)) => {
            let a = assign(&MatchWeights {
                probs: tape.value(w).clone(),
            })?;
            let vars = training_losses(&mut tape, out.recon, y, out.encoded.queries, items, &a, &config.losses)?;
            (vars.total, vars.breakdown(&tape))
        }
        _ => {
            let rec = reconstruction_loss(&mut tape, out.recon, y)?;
            let v = tape.value(rec).item() as f64;
            (
                rec,
                LossBreakdown {
                    rec: v,
                    compact: 0.0,
                    separate: 0.0,
                    total: v,
                },
            )
        }
    };
    if !breakdown.total.is_finite() {
        return Err(non_finite("loss", state.step));
    }
    let mut grads = tape.backward_scalar(total)?;
    let mut named: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    for (name, &v) in &bound.vars {
        if let Some(g) = grads.take(v) {
            named.insert(name.clone(), g);
        }
    }
    let queries = tape.value(out.encoded.queries).clone();

    let mut all = std::mem::take(&mut state.params.params);
    let item_grad = items.filter(|_| trainable_items).and_then(|v| grads.take(v));
    if let Some(g) = item_grad {
        all.insert(ITEMS_PARAM.to_string(), state.bank.items().clone());
        named.insert(ITEMS_PARAM.to_string(), g);
    }
    let stepped = state.optimizer.adam_step(&mut all, &named, lr);
    if let Some(items) = all.remove(ITEMS_PARAM) {
        if stepped.is_ok() {
            state.bank.set_items(items)?;
        }
    }
    state.params.params = all;
    stepped.map_err(|e| match e {
        Error::NonFinite(_) => non_finite("gradient", state.step),
        other => other,
    })?;
    state.params.apply_batch_stats(&stats)?;
    if m.use_memory {
        state.bank = update_rows(&state.bank, &queries)?;
    }
    if !state.params.is_finite() {
        return Err(non_finite("parameter", state.step));
    }
    state.step += 1;
    Ok(breakdown)
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub state: TrainState,
    pub log: Vec<LogRow>,
}

/// Trains from scratch on normal clips.
///
/// With `out_dir`, each step appends to `train_log.csv` and each epoch
/// rewrites `checkpoint.mnad`; a numerical abort leaves the checkpoint of
/// the last completed epoch in place.
pub fn train(config: &Config, clips: &[Clip], out_dir: Option<&Path>) -> Result<TrainRun> {
    let state = TrainState::init(config)?;
    resume(state, clips, out_dir)
}

/// Continues training `state` until `config.train.epochs` epochs are done.
pub fn resume(mut state: TrainState, clips: &[Clip], out_dir: Option<&Path>) -> Result<TrainRun> {
    let config = state.config.clone();
    config.validate()?;
    config.model.note_overrides();
    check_clips(&config, clips, true)?;
    let mut all_windows = windows(clips, config.model.sample_len());
    let b = config.train.batch_size;
    let steps_per_epoch = all_windows.len().div_ceil(b) as u64;
    let total_steps = steps_per_epoch * config.train.epochs as u64;

    let mut log_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(LOG_FILE);
            let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            writeln!(f, "{LOG_NOTE}\n{LOG_HEADER}").map_err(|e| Error::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };
    let mut log = Vec::new();
    info!(
        "training {} windows from {} clips, {} steps per epoch, {} epochs",
        all_windows.len(),
        clips.len(),
        steps_per_epoch,
        config.train.epochs
    );
    while state.epoch < config.train.epochs as u64 {
        let mut r = state.rng.restore();
        all_windows.sort_unstable();
        all_windows.shuffle(&mut r);
        state.rng = RngState::capture(&r);
        for chunk in all_windows.chunks(b) {
            let batch: Vec<_> = chunk.iter().map(|&(c, s)| sample(&config, &clips[c], s)).collect();
            let lr = cosine_lr(state.step, total_steps, config.train.lr)?;
            let loss = train_step(&mut state, &batch, lr)?;
            let row = LogRow {
                step: state.step,
                epoch: state.epoch + 1,
                lr,
                loss,
            };
            if let Some((f, path)) = log_file.as_mut() {
                writeln!(f, "{}", row.to_csv()).map_err(|e| Error::io(path.as_path(), e))?;
            }
            debug!("step {} loss {:.5}", row.step, loss.total);
            log.push(row);
        }
        state.epoch += 1;
        let epoch_rows = &log[log.len() - chunk_count(all_windows.len(), b)..];
        let mean_rec = epoch_rows.iter().map(|r| r.loss.rec).sum::<f64>() / epoch_rows.len() as f64;
        info!("epoch {} mean l_rec {mean_rec:.5}", state.epoch);
        if let Some(dir) = out_dir {
            checkpoint::save(&state, &dir.join(CHECKPOINT_FILE))?;
        }
    }
    Ok(TrainRun { state, log })
}

fn chunk_count(n: usize, b: usize) -> usize {
    n.div_ceil(b)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameScore {
    pub psnr_db: f64,
    pub psnr_clamped: bool,
    pub dist: f64,
    pub regular: f64,
    pub gate: GateDecision,
}

#[derive(Debug, Clone)]
pub struct Scored {
    pub score: FrameScore,
    /// `[channels_in, H, W]` on `[-1, 1]`.
    pub recon: Tensor<f32>,
    pub query_map: QueryMap<f32>,
}

/// Scores frames one at a time, evolving its own copy of the memory.
#[derive(Debug, Clone)]
pub struct Scorer<'a> {
    state: &'a TrainState,
    pub bank: MemoryBank<f32>,
    pub gamma: f64,
}

impl<'a> Scorer<'a> {
    pub fn new(state: &'a TrainState, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0) {
            return Err(Error::config(format!("gate threshold gamma must be positive, got {gamma}")));
        }
        Ok(Scorer {
            state,
            bank: state.bank.clone(),
            gamma,
        })
    }

    /// Scores `target` given its input window, then applies the gated
    /// memory update.
    pub fn score(&mut self, window: &[&Tensor<f32>], target: &Tensor<f32>) -> Result<Scored> {
        let m = &self.state.config.model;
        let bank = m.use_memory.then_some(&self.bank);
        let out = infer(m, &self.state.params, bank, window)?;
        let (recon01, target01) = (to_unit_range(&out.recon), to_unit_range(target));
        let p = psnr(&recon01, &target01)?;
        let regular = regular_score(&target01, &recon01)?;
        let (dist, gate) = if m.use_memory {
            let d = distance_score(&out.query_map, &self.bank)?;
            let (bank, gate) = gated_update(&self.bank, &out.query_map, regular, self.gamma, Phase::Test)?;
            self.bank = bank;
            (d, gate)
        } else {
            (0.0, GateDecision::NoMemory)
        };
        Ok(Scored {
            score: FrameScore {
                psnr_db: p.db,
                psnr_clamped: p.clamped,
                dist,
                regular,
                gate,
            },
            recon: out.recon,
            query_map: out.query_map,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub gamma: f64,
    pub lambda: f64,
    pub scope: NormalizationScope,
    /// Restart every video from the checkpoint's bank instead of carrying
    /// the evolved bank across videos.
    pub bank_per_video: bool,
    /// Keep all queries of every `n`-th scored frame (0 keeps none).
    pub query_sample_every: usize,
    /// Keep per-pixel error maps of every scored frame.
    pub error_maps: bool,
}

impl EvalOptions {
    pub fn from_config(config: &Config) -> Self {
        EvalOptions {
            gamma: config.memory.gamma,
            lambda: config.score.lambda,
            scope: config.score.scope,
            bank_per_video: config.score.bank_per_video,
            query_sample_every: 0,
            error_maps: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QuerySample {
    pub video_id: String,
    pub frame_index: usize,
    pub queries: Tensor<f32>,
}

/// Per-pixel reconstruction error on the `[0, 1]` scale, `[H, W]`.
#[derive(Debug, Clone)]
pub struct ErrorMap {
    pub video_id: String,
    pub frame_index: usize,
    pub error: Tensor<f32>,
}

#[derive(Debug, Clone)]
pub struct EvalResult {
    pub rows: Vec<TraceRow>,
    /// Present when the labelled frames contain both classes.
    pub auc: Option<f64>,
    /// Memory after the last frame.
    pub bank: MemoryBank<f32>,
    pub skipped_updates: usize,
    pub queries: Vec<QuerySample>,
    pub error_maps: Vec<ErrorMap>,
}

/// L2 error over channels per pixel; frames are on `[-1, 1]`, so half the
/// difference is the error on the `[0, 1]` scale.
fn pixel_error(recon: &Tensor<f32>, target: &Tensor<f32>) -> Tensor<f32> {
    let (c, h, w) = (target.shape()[0], target.shape()[1], target.shape()[2]);
    let (a, b) = (recon.data(), target.data());
    Tensor::from_fn(&[h, w], |i| {
        (0..c)
            .map(|ch| {
                let d = 0.5 * (a[ch * h * w + i] - b[ch * h * w + i]);
                d * d
            })
            .sum::<f32>()
            .sqrt()
    })
}

/// Scores every frame that has a complete input window, video by video in
/// order, sharing one evolving bank unless `bank_per_video` is set. The
/// checkpoint's bank is not modified.
pub fn evaluate(state: &TrainState, clips: &[Clip], opts: &EvalOptions) -> Result<EvalResult> {
    check_clips(&state.config, clips, false)?;
    let m = &state.config.model;
    let mut scorer = Scorer::new(state, opts.gamma)?;
    let mut rows = Vec::new();
    let mut queries = Vec::new();
    let mut error_maps = Vec::new();
    for clip in clips {
        if opts.bank_per_video {
            scorer.bank = state.bank.clone();
        }
        for start in 0..=clip.len() - m.sample_len() {
            let (window, target) = sample(&state.config, clip, start);
            let frame_index = start + m.target_index;
            let scored = scorer.score(&window, target)?;
            if opts.query_sample_every > 0 && rows.len() % opts.query_sample_every == 0 {
                queries.push(QuerySample {
                    video_id: clip.video_id.clone(),
                    frame_index,
                    queries: scored.query_map.queries,
                });
            }
            if opts.error_maps {
                error_maps.push(ErrorMap {
                    video_id: clip.video_id.clone(),
                    frame_index,
                    error: pixel_error(&scored.recon, target),
                });
            }
            let s = scored.score;
            rows.push(TraceRow {
                video_id: clip.video_id.clone(),
                frame_index,
                psnr_db: s.psnr_db,
                dist: s.dist,
                g_psnr: 0.0,
                g_dist: 0.0,
                score: 0.0,
                label: clip.labelled.then(|| clip.labels[frame_index]),
                gate: s.gate,
            });
        }
    }
    normalize_trace(&mut rows, opts.scope, opts.lambda)?;
    let labels: Vec<u8> = rows.iter().filter_map(|r| r.label).collect();
    let auc = if labels.contains(&0) && labels.contains(&1) {
        Some(trace_auc(&rows)?)
    } else {
        None
    };
    let skipped_updates = rows.iter().filter(|r| r.gate == GateDecision::AbnormalSkipped).count();
    Ok(EvalResult {
        rows,
        auc,
        bank: scorer.bank,
        skipped_updates,
        queries,
        error_maps,
    })
}
