use serde::{Deserialize, Serialize};

use ovformer::datasets::ActionAnnotation;
use ovformer::evaluation::{average_precision, GroundTruth, ScoredSegment};
use ovformer::inference::{nms, Detection};
use ovformer::losses::{assign_targets, grid_position, AssignConfig};
use ovformer::model::ModelConfig;

fn parse<'a, T: Deserialize<'a>>(what: &str, text: &'a str) -> Result<T, String> {
    serde_json::from_str(text).map_err(|e| format!("{what}: {e}"))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("plain data serializes")
}

#[derive(Serialize)]
struct NmsOutput {
    kept: Vec<Detection>,
    suppressed: usize,
}

pub fn run_nms(detections: &str, thresh: f64, class_aware: bool) -> Result<String, String> {
    if !(0.0..=1.0).contains(&thresh) {
        return Err(format!("threshold must lie in [0, 1], got {thresh}"));
    }
    let dets: Vec<Detection> = parse("detections", detections)?;
    if let Some(d) = dets.iter().find(|d| !(d.end > d.start)) {
        return Err(format!("segment [{}, {}] has no length", d.start, d.end));
    }
    let kept = nms(&dets, thresh, class_aware);
    Ok(to_json(&NmsOutput { suppressed: dets.len() - kept.len(), kept }))
}

#[derive(Serialize)]
struct Positive {
    t: usize,
    position: f64,
    annotation: usize,
    classes: Vec<usize>,
    offsets: [f64; 2],
}

#[derive(Serialize)]
struct LevelView {
    stride: usize,
    len: usize,
    range: (f64, f64),
    positives: Vec<Positive>,
}

#[derive(Deserialize)]
struct Annotation {
    start: f64,
    end: f64,
    class_id: usize,
}

pub fn assign_levels(annotations: &str, t: usize, levels: usize, center_ratio: f64) -> Result<String, String> {
    let anns: Vec<Annotation> = parse("annotations", annotations)?;
    let anns: Vec<ActionAnnotation> = anns
        .iter()
        .map(|a| ActionAnnotation { start: a.start, end: a.end, class_id: a.class_id })
        .collect();
    if t == 0 || levels == 0 || levels > 8 {
        return Err("need T >= 1 and 1 <= levels <= 8".into());
    }
    let num_classes = anns.iter().map(|a| a.class_id + 1).max().unwrap_or(1);
    let class_ids: Vec<usize> = (0..num_classes).collect();
    let lengths = ModelConfig { levels, ..ModelConfig::default() }.level_lengths(t);
    let cfg = AssignConfig { center_ratio, ..AssignConfig::for_levels(levels) };
    let asg = assign_targets(&anns, &class_ids, &lengths, &cfg).map_err(|e| e.to_string())?;
    let views: Vec<LevelView> = asg
        .levels
        .iter()
        .zip(&cfg.level_ranges)
        .map(|(lvl, &range)| LevelView {
            stride: lvl.stride,
            len: lvl.len,
            range,
            positives: (0..lvl.len)
                .filter_map(|r| {
                    let offsets = lvl.regression[r]?;
                    Some(Positive {
                        t: r,
                        position: grid_position(r, lvl.stride),
                        annotation: lvl.matched[r]?,
                        classes: (0..num_classes).filter(|&c| lvl.classes[r * num_classes + c]).collect(),
                        offsets,
                    })
                })
                .collect(),
        })
        .collect();
    Ok(to_json(&views))
}

#[derive(Deserialize)]
struct Segment {
    #[serde(default)]
    video: usize,
    start: f64,
    end: f64,
    #[serde(default)]
    score: f64,
}

#[derive(Serialize)]
struct ApOutput {
    ap: Option<f64>,
    tp: Vec<bool>,
}

pub fn score_ap(detections: &str, ground_truth: &str, thresh: f64) -> Result<String, String> {
    if !(thresh > 0.0 && thresh <= 1.0) {
        return Err(format!("tIoU threshold must lie in (0, 1], got {thresh}"));
    }
    let dets: Vec<Segment> = parse("detections", detections)?;
    let gts: Vec<Segment> = parse("ground truth", ground_truth)?;
    if let Some(s) = dets.iter().chain(&gts).find(|s| !(s.end > s.start)) {
        return Err(format!("segment [{}, {}] has no length", s.start, s.end));
    }
    let dets: Vec<ScoredSegment> = dets
        .iter()
        .map(|d| ScoredSegment { video: d.video, start: d.start, end: d.end, score: d.score })
        .collect();
    let gts: Vec<GroundTruth> = gts.iter().map(|g| GroundTruth { video: g.video, start: g.start, end: g.end }).collect();
    let r = average_precision(&dets, &gts, thresh);
    Ok(to_json(&ApOutput { ap: r.ap, tp: r.tp }))
}
