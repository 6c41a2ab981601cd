//! Per-frame abnormality scores and frame-level ROC AUC.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::{distance, nearest_by_dot, GateDecision, MemoryBank, QueryMap};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// PSNR reported for pixel-identical frames.
pub const PSNR_MAX_DB: f64 = 100.0;

pub const TRACE_HEADER: [&str; 9] = [
    "video_id",
    "frame_index",
    "psnr_db",
    "dist",
    "g_psnr",
    "g_dist",
    "score",
    "label",
    "gate_flag",
];

/// Maps `[-1, 1]` intensities to `[0, 1]`.
pub fn to_unit_range<T: Scalar>(frame: &Tensor<T>) -> Tensor<T> {
    let half = T::from_f64(0.5);
    frame.map(|v| (v + T::one()) * half)
}

/// Mean distance from each query to its nearest item.
pub fn distance_score<T: Scalar>(query_map: &QueryMap<T>, bank: &MemoryBank<T>) -> Result<f64> {
    let nearest = nearest_by_dot(&query_map.queries, bank)?;
    let total: f64 = nearest
        .iter()
        .enumerate()
        .map(|(k, &p)| distance(query_map.query(k), bank.item(p)).as_f64())
        .sum();
    Ok(total / nearest.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Psnr {
    pub db: f64,
    /// Set when the frames were identical and `db` is [`PSNR_MAX_DB`].
    pub clamped: bool,
}

/// PSNR with peak 1 for frames on `[0, 1]`.
pub fn psnr<T: Scalar>(recon: &Tensor<T>, frame: &Tensor<T>) -> Result<Psnr> {
    if recon.shape() != frame.shape() {
        return Err(Error::shape("psnr", format!("{:?} vs {:?}", recon.shape(), frame.shape())));
    }
    let sse: f64 = recon
        .data()
        .iter()
        .zip(frame.data())
        .map(|(&a, &b)| {
            let d = a.as_f64() - b.as_f64();
            d * d
        })
        .sum();
    if sse == 0.0 {
        return Ok(Psnr { db: PSNR_MAX_DB, clamped: true });
    }
    let db = 10.0 * (1.0 / (sse / frame.len() as f64)).log10();
    Ok(Psnr { db: db.min(PSNR_MAX_DB), clamped: false })
}

/// `(x - min) / (max - min)`; a constant sequence maps to all zeros.
pub fn minmax_normalize(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::config("min-max normalization over an empty scope"));
    }
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        return Ok(vec![0.0; values.len()]);
    }
    Ok(values.iter().map(|&v| (v - lo) / (hi - lo)).collect())
}

/// `lambda * (1 - g_psnr) + (1 - lambda) * g_dist` for already normalized terms.
pub fn fuse(g_psnr: f64, g_dist: f64, lambda: f64) -> f64 {
    lambda * (1.0 - g_psnr) + (1.0 - lambda) * g_dist
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::config(format!("score weight lambda must lie in [0, 1], got {lambda}")));
    }
    Ok(())
}

/// Normalized PSNR and distance terms plus fused scores over one scope.
#[derive(Debug, Clone, PartialEq)]
pub struct ScopeScores {
    pub g_psnr: Vec<f64>,
    pub g_dist: Vec<f64>,
    pub score: Vec<f64>,
}

/// A scope whose PSNR values are all equal contributes nothing through the
/// PSNR term (its inverted, normalized value is 0), so a degenerate scope
/// scores 0 rather than `lambda`.
pub fn abnormality_score(psnr_db: &[f64], dist: &[f64], lambda: f64) -> Result<ScopeScores> {
    check_lambda(lambda)?;
    if psnr_db.len() != dist.len() {
        return Err(Error::shape(
            "abnormality score",
            format!("{} PSNR values vs {} distances", psnr_db.len(), dist.len()),
        ));
    }
    let g_psnr = minmax_normalize(psnr_db)?;
    let g_dist = minmax_normalize(dist)?;
    let inverted = minmax_normalize(&psnr_db.iter().map(|p| -p).collect::<Vec<_>>())?;
    let score = inverted
        .iter()
        .zip(&g_dist)
        .map(|(&ip, &gd)| lambda * ip + (1.0 - lambda) * gd)
        .collect();
    Ok(ScopeScores { g_psnr, g_dist, score })
}

/// Area under the ROC curve; ties between a positive and a negative count
/// one half. `labels` are 0 (normal) or 1 (abnormal).
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("roc auc", format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::config(format!("labels must be 0 or 1, found {bad}")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("score passed to roc auc".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::config("roc auc needs both normal and abnormal frames"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64 * avg_rank;
        i = j + 1;
    }
    let (pos, neg) = (pos as f64, neg as f64);
    Ok((rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizationScope {
    #[default]
    PerVideo,
    Global,
}

impl NormalizationScope {
    pub fn as_str(self) -> &'static str {
        match self {
            NormalizationScope::PerVideo => "per-video",
            NormalizationScope::Global => "global",
        }
    }
}

impl std::str::FromStr for NormalizationScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-video" => Ok(NormalizationScope::PerVideo),
            "global" => Ok(NormalizationScope::Global),
            other => Err(Error::config(format!("unknown normalization scope `{other}` (per-video|global)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub video_id: String,
    pub frame_index: usize,
    pub psnr_db: f64,
    pub dist: f64,
    pub g_psnr: f64,
    pub g_dist: f64,
    pub score: f64,
    pub label: Option<u8>,
    pub gate: GateDecision,
}

/// Fills `g_psnr`, `g_dist` and `score` for rows grouped by video.
pub fn normalize_trace(rows: &mut [TraceRow], scope: NormalizationScope, lambda: f64) -> Result<()> {
    let mut groups: Vec<(usize, usize)> = Vec::new();
    match scope {
        NormalizationScope::Global => groups.push((0, rows.len())),
        NormalizationScope::PerVideo => {
            let mut start = 0;
            for i in 1..=rows.len() {
                if i == rows.len() || rows[i].video_id != rows[start].video_id {
                    groups.push((start, i));
                    start = i;
                }
            }
        }
    }
    for (a, b) in groups {
        let slice = &mut rows[a..b];
        let p: Vec<f64> = slice.iter().map(|r| r.psnr_db).collect();
        let d: Vec<f64> = slice.iter().map(|r| r.dist).collect();
        let s = abnormality_score(&p, &d, lambda)?;
        for (i, row) in slice.iter_mut().enumerate() {
            row.g_psnr = s.g_psnr[i];
            row.g_dist = s.g_dist[i];
            row.score = s.score[i];
        }
    }
    Ok(())
}

/// AUC over every labelled row.
pub fn trace_auc(rows: &[TraceRow]) -> Result<f64> {
    let (scores, labels): (Vec<f64>, Vec<u8>) = rows.iter().filter_map(|r| r.label.map(|l| (r.score, l))).unzip();
    roc_auc(&scores, &labels)
}

/// Running min/max normalization for frames scored one at a time.
#[derive(Debug, Clone)]
pub struct StreamingNormalizer {
    lambda: f64,
    psnr: (f64, f64),
    dist: (f64, f64),
}

fn running(range: &mut (f64, f64), v: f64) -> (f64, bool) {
    range.0 = range.0.min(v);
    range.1 = range.1.max(v);
    if range.1 > range.0 {
        ((v - range.0) / (range.1 - range.0), false)
    } else {
        (0.0, true)
    }
}

impl StreamingNormalizer {
    pub fn new(lambda: f64) -> Result<Self> {
        check_lambda(lambda)?;
        Ok(StreamingNormalizer {
            lambda,
            psnr: (f64::INFINITY, f64::NEG_INFINITY),
            dist: (f64::INFINITY, f64::NEG_INFINITY),
        })
    }

    /// Returns `(g_psnr, g_dist, score)` against the extremes seen so far,
    /// including this frame.
    pub fn push(&mut self, psnr_db: f64, dist: f64) -> (f64, f64, f64) {
        let (gp, degenerate) = running(&mut self.psnr, psnr_db);
        let (gd, _) = running(&mut self.dist, dist);
        let inverted = if degenerate { 0.0 } else { 1.0 - gp };
        (gp, gd, self.lambda * inverted + (1.0 - self.lambda) * gd)
    }
}

pub fn trace_writer<W: Write>(out: W) -> Result<csv::Writer<W>> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRACE_HEADER).map_err(csv_err)?;
    Ok(w)
}

pub fn write_trace_row<W: Write>(w: &mut csv::Writer<W>, row: &TraceRow) -> Result<()> {
    w.write_record([
        row.video_id.clone(),
        row.frame_index.to_string(),
        format!("{:.6}", row.psnr_db),
        format!("{:.6}", row.dist),
        format!("{:.6}", row.g_psnr),
        format!("{:.6}", row.g_dist),
        format!("{:.6}", row.score),
        row.label.map_or(String::new(), |l| l.to_string()),
        row.gate.as_str().to_string(),
    ])
    .map_err(csv_err)
}

pub fn write_trace<W: Write>(out: W, rows: &[TraceRow]) -> Result<()> {
    let mut w = trace_writer(out)?;
    for row in rows {
        write_trace_row(&mut w, row)?;
    }
    w.flush().map_err(|e| Error::io("trace output", e))
}

fn csv_err(e: csv::Error) -> Error {
    Error::io("trace output", std::io::Error::other(e))
}
