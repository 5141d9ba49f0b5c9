//! Decoding head outputs into scored segments, NMS, and per-video prediction.

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio;
use crate::datasets::{pad_or_window, VideoFeatures};
use crate::error::{Error, Result};
use crate::losses::grid_position;
use crate::parallel;
use crate::model::{predict_heads, HeadOutputs, Model, ModelParams};
use crate::tensor::sigmoid;
use crate::textbank::ClassEmbeddingTable;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub start: f64,
    pub end: f64,
    pub class_id: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferConfig {
    pub score_thresh: f64,
    pub pre_nms_topk: usize,
    pub nms_thresh: f64,
    pub class_aware: bool,
    /// Inference window length; longer videos are windowed and merged.
    pub max_seq_len: usize,
    pub threads: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            score_thresh: 0.01,
            pre_nms_topk: 200,
            nms_thresh: 0.5,
            class_aware: true,
            max_seq_len: 512,
            threads: 1,
        }
    }
}

impl InferConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.score_thresh > 0.0 && self.score_thresh < 1.0) {
            return Err(Error::Config(format!("score_thresh must lie in (0, 1), got {}", self.score_thresh)));
        }
        if self.pre_nms_topk == 0 {
            return Err(Error::Config("pre_nms_topk must be >= 1".into()));
        }
        if !(self.nms_thresh > 0.0 && self.nms_thresh <= 1.0) {
            return Err(Error::Config(format!("nms_thresh must lie in (0, 1], got {}", self.nms_thresh)));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be >= 1".into()));
        }
        if self.max_seq_len == 0 {
            return Err(Error::Config("max_seq_len must be >= 1".into()));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("score_thresh", self.score_thresh.to_string()),
            ("pre_nms_topk", self.pre_nms_topk.to_string()),
            ("nms_thresh", self.nms_thresh.to_string()),
            ("class_aware", self.class_aware.to_string()),
            ("max_seq_len", self.max_seq_len.to_string()),
            ("threads", self.threads.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let v = value.trim();
        let bad = || Error::Config(format!("{key}: cannot parse {v:?}"));
        match key {
            "score_thresh" => self.score_thresh = v.parse().map_err(|_| bad())?,
            "pre_nms_topk" => self.pre_nms_topk = v.parse().map_err(|_| bad())?,
            "nms_thresh" => self.nms_thresh = v.parse().map_err(|_| bad())?,
            "class_aware" => self.class_aware = v.parse().map_err(|_| bad())?,
            "max_seq_len" => self.max_seq_len = v.parse().map_err(|_| bad())?,
            "threads" => self.threads = v.parse().map_err(|_| bad())?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Descending score, then smaller start, then smaller class id.
pub fn rank_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.start.total_cmp(&b.start))
        .then(a.class_id.cmp(&b.class_id))
}

fn keep_top(mut dets: Vec<Detection>, k: usize) -> Vec<Detection> {
    dets.sort_by(rank_order);
    dets.truncate(k);
    dets
}

/// Turns per-level head outputs into detections in `[1, valid_len]`
/// coordinates; `class_ids[a]` names logit column `a`.
pub fn decode(heads: &HeadOutputs, class_ids: &[usize], valid_len: usize, cfg: &InferConfig) -> Vec<Detection> {
    let hi = valid_len.max(1) as f64;
    let mut out = Vec::new();
    for lvl in &heads.levels {
        let a = lvl.logits.cols();
        let s = lvl.stride as f64;
        for t in 0..lvl.logits.rows() {
            if !lvl.mask[t] {
                continue;
            }
            let p = grid_position(t, lvl.stride);
            let start = (p - s * lvl.offsets.get(t, 0)).clamp(1.0, hi);
            let end = (p + s * lvl.offsets.get(t, 1)).clamp(1.0, hi);
            if end <= start {
                continue;
            }
            for (c, &class_id) in class_ids.iter().enumerate().take(a) {
                let score = sigmoid(lvl.logits.get(t, c));
                if score >= cfg.score_thresh {
                    out.push(Detection { start, end, class_id, score });
                }
            }
        }
    }
    keep_top(out, cfg.pre_nms_topk)
}

pub fn temporal_iou(a: (f64, f64), b: (f64, f64)) -> Result<f64> {
    if !(a.1 > a.0) || !(b.1 > b.0) {
        return Err(Error::Usage(format!("degenerate segment in tIoU: {a:?} vs {b:?}")));
    }
    Ok(tiou_unchecked(a, b))
}

pub(crate) fn tiou_unchecked(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy hard NMS; output sorted by [`rank_order`].
pub fn nms(dets: &[Detection], thresh: f64, class_aware: bool) -> Vec<Detection> {
    let mut order = dets.to_vec();
    order.sort_by(rank_order);
    let mut kept: Vec<Detection> = Vec::new();
    for d in order {
        let suppressed = kept.iter().any(|k| {
            (!class_aware || k.class_id == d.class_id) && tiou_unchecked((k.start, k.end), (d.start, d.end)) > thresh
        });
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoPredictions {
    pub video_id: String,
    pub detections: Vec<Detection>,
}

/// Windows the video if needed, decodes each window, shifts to video
/// coordinates and runs one NMS pass over the union.
pub fn predict_video(
    model: &Model,
    params: &ModelParams,
    video: &VideoFeatures,
    table: &ClassEmbeddingTable,
    cfg: &InferConfig,
) -> Result<VideoPredictions> {
    cfg.validate()?;
    let windows = if video.valid_len > cfg.max_seq_len {
        pad_or_window(video, cfg.max_seq_len)?
    } else {
        vec![video.clone()]
    };
    let mut all = Vec::new();
    for w in &windows {
        let heads = predict_heads(model, params, w, table)?;
        let shift = (w.offset - video.offset) as f64;
        for mut d in decode(&heads, table.class_ids(), w.valid_len, cfg) {
            d.start += shift;
            d.end += shift;
            all.push(d);
        }
    }
    Ok(VideoPredictions {
        video_id: video.id.clone(),
        detections: nms(&all, cfg.nms_thresh, cfg.class_aware),
    })
}

pub fn predict_all(
    model: &Model,
    params: &ModelParams,
    videos: &[VideoFeatures],
    table: &ClassEmbeddingTable,
    cfg: &InferConfig,
) -> Result<Vec<VideoPredictions>> {
    if cfg.threads > 1 {
        let shared = params.to_map();
        parallel::map_with_state(
            videos,
            cfg.threads,
            || ModelParams::from_map(shared.clone()),
            |p, v| predict_video(model, p, v, table, cfg),
        )
        .into_iter()
        .collect()
    } else {
        videos.iter().map(|v| predict_video(model, params, v, table, cfg)).collect()
    }
}

pub fn predictions_to_json(preds: &[VideoPredictions]) -> String {
    serde_json::to_string_pretty(preds).expect("predictions serialize")
}

pub fn save_predictions(preds: &[VideoPredictions], path: &Path) -> Result<()> {
    binio::write_text(path, &predictions_to_json(preds))
}

pub fn load_predictions(path: &Path) -> Result<Vec<VideoPredictions>> {
    let text = binio::read_text(path)?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}
