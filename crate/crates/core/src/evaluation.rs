//! Average precision at tIoU thresholds and split-aware mAP.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio;
use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::inference::{tiou_unchecked, Detection, VideoPredictions};
use crate::textbank::Split;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub tiou_grid: Vec<f64>,
    /// Keep at most this many top-scored detections per video.
    pub top_k: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { tiou_grid: vec![0.3, 0.4, 0.5, 0.6, 0.7], top_k: None }
    }
}

impl EvalConfig {
    pub fn at(thresh: f64) -> Self {
        EvalConfig { tiou_grid: vec![thresh], top_k: None }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tiou_grid.is_empty() {
            return Err(Error::Config("tiou_grid is empty".into()));
        }
        for w in self.tiou_grid.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::Config("tiou_grid must be strictly increasing".into()));
            }
        }
        if self.tiou_grid.iter().any(|&t| !(t > 0.0 && t <= 1.0)) {
            return Err(Error::Config("tiou thresholds must lie in (0, 1]".into()));
        }
        if self.top_k == Some(0) {
            return Err(Error::Config("top_k must be >= 1".into()));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            (
                "tiou_grid",
                self.tiou_grid.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(","),
            ),
            ("top_k", self.top_k.map_or_else(|| "none".to_string(), |k| k.to_string())),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let v = value.trim();
        match key {
            "tiou_grid" => {
                self.tiou_grid = v
                    .split(',')
                    .map(|t| {
                        t.trim()
                            .parse::<f64>()
                            .map_err(|_| Error::Config(format!("tiou_grid: cannot parse {t:?}")))
                    })
                    .collect::<Result<_>>()?
            }
            "top_k" => {
                self.top_k = if v == "none" {
                    None
                } else {
                    Some(v.parse().map_err(|_| Error::Config(format!("top_k: cannot parse {v:?}")))?)
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// A detection tagged with the position of its video in the dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredSegment {
    pub video: usize,
    pub start: f64,
    pub end: f64,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruth {
    pub video: usize,
    pub start: f64,
    pub end: f64,
}

/// Descending score, then smaller start, then smaller video index.
fn det_order(a: &ScoredSegment, b: &ScoredSegment) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.start.total_cmp(&b.start))
        .then(a.video.cmp(&b.video))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApResult {
    /// `None` when the class has no ground truth.
    pub ap: Option<f64>,
    /// TP flag for each input detection, in input order.
    pub tp: Vec<bool>,
}

/// All-point interpolated AP for one class at one threshold.
///
/// Videos are ranked by their index, so callers order them by id.
pub fn average_precision(dets: &[ScoredSegment], gts: &[GroundTruth], thresh: f64) -> ApResult {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| det_order(&dets[i], &dets[j]));
    let mut by_video: HashMap<usize, Vec<usize>> = HashMap::new();
    for (g, gt) in gts.iter().enumerate() {
        by_video.entry(gt.video).or_default().push(g);
    }
    let mut used = vec![false; gts.len()];
    let mut tp = vec![false; dets.len()];
    for &i in &order {
        let d = &dets[i];
        let mut best: Option<(f64, usize)> = None;
        for &g in by_video.get(&d.video).map(Vec::as_slice).unwrap_or(&[]) {
            if used[g] {
                continue;
            }
            let iou = tiou_unchecked((d.start, d.end), (gts[g].start, gts[g].end));
            if iou >= thresh && best.is_none_or(|(b, _)| iou > b) {
                best = Some((iou, g));
            }
        }
        if let Some((_, g)) = best {
            used[g] = true;
            tp[i] = true;
        }
    }
    if gts.is_empty() {
        return ApResult { ap: None, tp };
    }
    // recall rises by exactly 1/n_gt at each TP, so the all-point sum is the
    // mean of the interpolated precision over TP ranks
    let mut precision = Vec::with_capacity(order.len());
    let mut hits = 0usize;
    for (rank, &i) in order.iter().enumerate() {
        if tp[i] {
            hits += 1;
        }
        precision.push(hits as f64 / (rank + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let total: f64 = order.iter().zip(&precision).filter(|(&i, _)| tp[i]).fold(0.0, |acc, (_, p)| acc + p);
    let ap = total / gts.len() as f64;
    ApResult { ap: Some(ap), tp }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: usize,
    pub name: String,
    pub split: String,
    pub num_gt: usize,
    /// One entry per threshold; `None` for classes without ground truth.
    pub ap_by_threshold: Vec<Option<f64>>,
}

impl ClassAp {
    pub fn mean_ap(&self) -> Option<f64> {
        let v: Vec<f64> = self.ap_by_threshold.iter().flatten().copied().collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionLabel {
    pub video_id: String,
    pub class_id: usize,
    pub start: f64,
    pub end: f64,
    pub score: f64,
    /// TP flag at each threshold of the grid.
    pub tp: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_echo: BTreeMap<String, String>,
    pub tiou_grid: Vec<f64>,
    pub per_class: Vec<ClassAp>,
    pub map_base: Option<f64>,
    pub map_novel: Option<f64>,
    pub map_all: Option<f64>,
    /// Split mAP at each threshold, as (base, novel, all).
    pub map_by_threshold: Vec<[Option<f64>; 3]>,
    #[serde(default)]
    pub labels: Vec<DetectionLabel>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn split_map(per_class: &[ClassAp], keep: impl Fn(&ClassAp) -> bool, thresholds: usize) -> (Option<f64>, Vec<Option<f64>>) {
    let by_thresh: Vec<Option<f64>> = (0..thresholds)
        .map(|k| {
            let aps: Vec<f64> = per_class
                .iter()
                .filter(|c| keep(c))
                .filter_map(|c| c.ap_by_threshold[k])
                .collect();
            mean(&aps)
        })
        .collect();
    let defined: Vec<f64> = by_thresh.iter().flatten().copied().collect();
    (mean(&defined), by_thresh)
}

/// Scores `predictions` against `dataset`'s annotations for every class of
/// its vocabulary.
pub fn evaluate(predictions: &[VideoPredictions], dataset: &Dataset, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let vocab = &dataset.vocab;
    // rank videos by id so ties break on the smaller id
    let mut ids: Vec<&str> = dataset.videos.iter().map(|v| v.id.as_str()).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Data(format!("dataset {} has duplicate video ids", dataset.name)));
    }
    let rank: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();

    let mut gts: BTreeMap<usize, Vec<GroundTruth>> = BTreeMap::new();
    for v in &dataset.videos {
        for a in &v.annotations {
            gts.entry(a.class_id).or_default().push(GroundTruth { video: rank[v.id.as_str()], start: a.start, end: a.end });
        }
    }

    let mut dets: BTreeMap<usize, Vec<(ScoredSegment, usize)>> = BTreeMap::new();
    let mut flat: Vec<(String, Detection)> = Vec::new();
    for p in predictions {
        let &video = rank
            .get(p.video_id.as_str())
            .ok_or_else(|| Error::Data(format!("prediction for unknown video {:?}", p.video_id)))?;
        let mut list = p.detections.clone();
        if let Some(k) = cfg.top_k {
            list.sort_by(crate::inference::rank_order);
            list.truncate(k);
        }
        for d in list {
            if vocab.get(d.class_id).is_none() {
                return Err(Error::Data(format!(
                    "video {}: predicted class id {} is not in the vocabulary",
                    p.video_id, d.class_id
                )));
            }
            if !(d.end > d.start) {
                return Err(Error::Data(format!(
                    "video {}: degenerate detection [{}, {}]",
                    p.video_id, d.start, d.end
                )));
            }
            let seg = ScoredSegment { video, start: d.start, end: d.end, score: d.score };
            dets.entry(d.class_id).or_default().push((seg, flat.len()));
            flat.push((p.video_id.clone(), d));
        }
    }

    let k = cfg.tiou_grid.len();
    let mut tp_flags = vec![vec![false; k]; flat.len()];
    let mut per_class = Vec::new();
    for entry in vocab.classes() {
        let g = gts.get(&entry.id).map(Vec::as_slice).unwrap_or(&[]);
        let d = dets.get(&entry.id).map(Vec::as_slice).unwrap_or(&[]);
        let segs: Vec<ScoredSegment> = d.iter().map(|(s, _)| *s).collect();
        let mut aps = Vec::with_capacity(k);
        for (ti, &thresh) in cfg.tiou_grid.iter().enumerate() {
            let r = average_precision(&segs, g, thresh);
            for ((_, idx), &hit) in d.iter().zip(&r.tp) {
                tp_flags[*idx][ti] = hit;
            }
            aps.push(r.ap);
        }
        per_class.push(ClassAp {
            class_id: entry.id,
            name: entry.name.clone(),
            split: entry.split.to_string(),
            num_gt: g.len(),
            ap_by_threshold: aps,
        });
    }

    let base = Split::Base.to_string();
    let novel = Split::Novel.to_string();
    let (map_base, base_t) = split_map(&per_class, |c| c.split == base, k);
    let (map_novel, novel_t) = split_map(&per_class, |c| c.split == novel, k);
    let (map_all, all_t) = split_map(&per_class, |_| true, k);
    let labels = flat
        .into_iter()
        .zip(tp_flags)
        .map(|((video_id, d), tp)| DetectionLabel {
            video_id,
            class_id: d.class_id,
            start: d.start,
            end: d.end,
            score: d.score,
            tp,
        })
        .collect();
    Ok(EvalReport {
        config_echo: cfg.to_pairs().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        tiou_grid: cfg.tiou_grid.clone(),
        per_class,
        map_base,
        map_novel,
        map_all,
        map_by_threshold: (0..k).map(|i| [base_t[i], novel_t[i], all_t[i]]).collect(),
        labels,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&binio::read_text(path)?, path)
    }

    /// Per-class table of evaluable classes sorted by class id.
    pub fn class_table(&self) -> String {
        let mut s = String::from("class_id\tsplit\tname\tnum_gt");
        for t in &self.tiou_grid {
            s.push_str(&format!("\tAP@{t}"));
        }
        s.push_str("\tmean\n");
        let mut rows: Vec<&ClassAp> = self.per_class.iter().filter(|c| c.mean_ap().is_some()).collect();
        rows.sort_by_key(|c| c.class_id);
        for c in rows {
            s.push_str(&format!("{}\t{}\t{}\t{}", c.class_id, c.split, c.name, c.num_gt));
            for ap in &c.ap_by_threshold {
                s.push_str(&format!("\t{:.4}", ap.unwrap_or(f64::NAN)));
            }
            s.push_str(&format!("\t{:.4}\n", c.mean_ap().unwrap_or(f64::NAN)));
        }
        s
    }

    /// One line: `map_base=… map_novel=… map_all=…`.
    pub fn summary_line(&self) -> String {
        let f = |v: Option<f64>| v.map_or_else(|| "null".to_string(), |x| format!("{x:.4}"));
        format!(
            "map_base={} map_novel={} map_all={}",
            f(self.map_base),
            f(self.map_novel),
            f(self.map_all)
        )
    }
}

/// Writes `<dir>/eval.json` and `<dir>/eval_classes.tsv`.
pub fn report(r: &EvalReport, dir: &Path) -> Result<()> {
    binio::write_text(&dir.join("eval.json"), &r.to_json())?;
    binio::write_text(&dir.join("eval_classes.tsv"), &r.class_table())
}
