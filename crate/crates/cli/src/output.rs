//! Files written by `eval` and `score` besides the trace itself.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use mnad::data::{frame_name, pgm, GrayImage};
use mnad::error::{Error, Result};
use mnad::memory::MemoryBank;
use mnad::trainer::{ErrorMap, EvalResult, QuerySample};

pub const TRACE_FILE: &str = "trace.csv";
pub const METRICS_FILE: &str = "metrics.txt";
pub const BANK_FILE: &str = "memory_bank.csv";
pub const QUERIES_FILE: &str = "queries.csv";
pub const SCORES_FILE: &str = "scores.csv";
pub const EVOLVED_CHECKPOINT: &str = "checkpoint_evolved.mnad";
pub const ERROR_MAP_DIR: &str = "error_maps";

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    csv::Writer::from_path(path).map_err(|e| csv_err(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

fn components(c: usize) -> impl Iterator<Item = String> {
    (0..c).map(|i| format!("c{i}"))
}

pub fn bank_header(c: usize) -> Vec<String> {
    std::iter::once("item".to_string()).chain(components(c)).collect()
}

pub fn queries_header(c: usize) -> Vec<String> {
    ["video_id", "frame_index", "query"]
        .into_iter()
        .map(String::from)
        .chain(components(c))
        .collect()
}

/// One row per item, `M` rows by `C` value columns.
pub fn write_bank(path: &Path, bank: &MemoryBank<f32>) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(bank_header(bank.dim())).map_err(|e| csv_err(path, e))?;
    for m in 0..bank.len() {
        let row = std::iter::once(m.to_string()).chain(bank.item(m).iter().map(|v| v.to_string()));
        w.write_record(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One row per query position of each sampled frame.
pub fn write_queries(path: &Path, samples: &[QuerySample], c: usize) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(queries_header(c)).map_err(|e| csv_err(path, e))?;
    for s in samples {
        for k in 0..s.queries.shape()[0] {
            let row = [s.video_id.clone(), s.frame_index.to_string(), k.to_string()]
                .into_iter()
                .chain(s.queries.row(k).iter().map(|v| v.to_string()));
            w.write_record(row).map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Error maps as 8-bit images, 255 meaning an error of 1 on the `[0, 1]` scale.
pub fn write_error_maps(root: &Path, maps: &[ErrorMap]) -> Result<()> {
    for map in maps {
        let dir = root.join(&map.video_id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let (h, w) = (map.error.shape()[0], map.error.shape()[1]);
        let pixels = map.error.data().iter().map(|&e| (e.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        pgm::write(&dir.join(frame_name(map.frame_index)), &GrayImage { width: w, height: h, pixels })?;
    }
    Ok(())
}

/// `key=value` lines, ending with the `AUC=` line scripts look for.
pub fn metrics(result: &EvalResult, gamma: f64, lambda: f64, scope: &str) -> String {
    let rows = &result.rows;
    let mut videos: Vec<&str> = rows.iter().map(|r| r.video_id.as_str()).collect();
    videos.dedup();
    let count = |l: u8| rows.iter().filter(|r| r.label == Some(l)).count();
    let updated = rows.iter().filter(|r| r.gate == mnad::memory::GateDecision::Updated).count();
    let mut out = String::new();
    let mut line = |k: &str, v: String| out.push_str(&format!("{k}={v}\n"));
    line("videos", videos.len().to_string());
    line("frames", rows.len().to_string());
    line("normal_frames", count(0).to_string());
    line("abnormal_frames", count(1).to_string());
    line("memory_updates", updated.to_string());
    line("gate_skipped", result.skipped_updates.to_string());
    line("gamma", gamma.to_string());
    line("lambda", lambda.to_string());
    line("scope", scope.to_string());
    line("AUC", result.auc.map_or("nan".into(), |a| format!("{a:.6}")));
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = create(path)?;
    f.write_all(text.as_bytes()).and_then(|_| f.flush()).map_err(|e| Error::io(path, e))
}
