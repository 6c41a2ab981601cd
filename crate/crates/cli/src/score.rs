use std::io::Write;
use std::time::Instant;

use mnad::data::load_frame_dir;
use mnad::error::{Error, Result};
use mnad::scoring::{normalize_trace, trace_writer, write_trace_row, NormalizationScope, StreamingNormalizer, TraceRow};
use mnad::trainer::{checkpoint, Scorer};

use crate::eval::apply_gate;
use crate::output::{self, SCORES_FILE};
use crate::ScoreArgs;

pub const STREAMING_NOTE: &str = "# normalization=streaming (running min/max over the frames so far)";
pub const BATCH_NOTE: &str = "# normalization=batch (min/max over the whole sequence)";

pub fn run(args: ScoreArgs) -> Result<()> {
    let state = checkpoint::load(&args.checkpoint)?;
    let mut c = state.config.clone();
    apply_gate(&args.gate, &mut c.memory.gamma, &mut c.score.lambda);
    c.validate()?;
    let m = &c.model;

    let started = Instant::now();
    let clip = load_frame_dir(&args.frames, None, m.frame_height, m.frame_width)?;
    if clip.len() < m.sample_len() {
        return Err(mnad::error::DataError::ClipTooShort {
            video_id: clip.video_id.clone(),
            len: clip.len(),
            needed: m.sample_len(),
        }
        .into());
    }
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let path = args.out.join(SCORES_FILE);
    let mut file = output::create(&path)?;
    let note = if args.batch { BATCH_NOTE } else { STREAMING_NOTE };
    writeln!(file, "{note}").map_err(|e| Error::io(&path, e))?;
    let mut w = trace_writer(file)?;
    let io = |e| Error::io(&path, e);

    let mut scorer = Scorer::new(&state, c.memory.gamma)?;
    let mut normalizer = StreamingNormalizer::new(c.score.lambda)?;
    let mut rows = Vec::new();
    for start in 0..=clip.len() - m.sample_len() {
        let window: Vec<_> = clip.frames[start..start + m.input_window].iter().collect();
        let frame_index = start + m.target_index;
        let s = scorer.score(&window, &clip.frames[frame_index])?.score;
        let mut row = TraceRow {
            video_id: clip.video_id.clone(),
            frame_index,
            psnr_db: s.psnr_db,
            dist: s.dist,
            g_psnr: 0.0,
            g_dist: 0.0,
            score: 0.0,
            label: clip.labelled.then(|| clip.labels[frame_index]),
            gate: s.gate,
        };
        if args.batch {
            rows.push(row);
        } else {
            (row.g_psnr, row.g_dist, row.score) = normalizer.push(s.psnr_db, s.dist);
            write_trace_row(&mut w, &row)?;
            w.flush().map_err(io)?;
            rows.push(row);
        }
    }
    if args.batch {
        normalize_trace(&mut rows, NormalizationScope::PerVideo, c.score.lambda)?;
        for row in &rows {
            write_trace_row(&mut w, row)?;
        }
        w.flush().map_err(io)?;
    }
    let seconds = started.elapsed().as_secs_f64();
    println!("frames={} seconds={seconds:.3} fps={:.1}", rows.len(), rows.len() as f64 / seconds);
    Ok(())
}
