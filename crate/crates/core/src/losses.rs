//! Target assignment and the joint focal + DIoU objective.

use crate::datasets::ActionAnnotation;
use crate::error::{Error, Result};
use crate::model::ForwardOutput;
use crate::tensor::{diou_segments, focal_element, RegressionTarget, Tape, Var};

pub use crate::tensor::FocalParams;

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams { alpha: Some(0.25), gamma: 2.0 }
    }
}

impl FocalParams {
    pub fn validate(&self) -> Result<()> {
        if let Some(a) = self.alpha {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::Config(format!("focal alpha must lie in (0, 1], got {a}")));
            }
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::Config(format!("focal gamma must be >= 0, got {}", self.gamma)));
        }
        Ok(())
    }
}

/// Label-assignment knobs. `level_ranges[m]` bounds the larger of the two
/// offsets, in units of level `m`'s stride, as a half-open `(lo, hi]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AssignConfig {
    pub center_ratio: f64,
    pub level_ranges: Vec<(f64, f64)>,
}

impl AssignConfig {
    /// Ranges that tile frame offsets as (0,4], (4,8], (8,16], ... with the
    /// last level open-ended.
    pub fn for_levels(levels: usize) -> Self {
        let level_ranges = (0..levels)
            .map(|m| {
                let lo = if m == 0 { 0.0 } else { 2.0 };
                let hi = if m + 1 == levels { f64::INFINITY } else { 4.0 };
                (lo, hi)
            })
            .collect();
        AssignConfig { center_ratio: 0.5, level_ranges }
    }

    pub fn validate(&self, levels: usize) -> Result<()> {
        if !(self.center_ratio > 0.0 && self.center_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "center_ratio must lie in (0, 1], got {}",
                self.center_ratio
            )));
        }
        if self.level_ranges.len() != levels {
            return Err(Error::Config(format!(
                "{} level ranges given for {levels} pyramid levels",
                self.level_ranges.len()
            )));
        }
        for (m, &(lo, hi)) in self.level_ranges.iter().enumerate() {
            if !(lo >= 0.0 && hi > lo) {
                return Err(Error::Config(format!("level range {m} ({lo}, {hi}] is empty")));
            }
            if m + 1 == levels && hi != f64::INFINITY {
                return Err(Error::Config("the last level range must be unbounded above".into()));
            }
        }
        Ok(())
    }

    /// Parses `lo:hi,lo:hi,...` with `inf` allowed as an upper bound.
    pub fn parse_ranges(text: &str) -> Result<Vec<(f64, f64)>> {
        text.split(',')
            .map(|part| {
                let (lo, hi) = part
                    .trim()
                    .split_once(':')
                    .ok_or_else(|| Error::Config(format!("bad level range {part:?}, want lo:hi")))?;
                let num = |s: &str| -> Result<f64> {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Config(format!("bad level range bound {s:?}")))
                };
                Ok((num(lo)?, num(hi)?))
            })
            .collect()
    }

    pub fn format_ranges(ranges: &[(f64, f64)]) -> String {
        ranges
            .iter()
            .map(|(lo, hi)| format!("{lo}:{hi}"))
            .collect::<Vec<_>>()
            .join(",")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelTargets {
    pub len: usize,
    pub stride: usize,
    /// Row-major `len × A` multi-hot class targets.
    pub classes: Vec<bool>,
    pub positive: Vec<bool>,
    pub regression: Vec<Option<[f64; 2]>>,
    pub matched: Vec<Option<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetAssignment {
    pub num_classes: usize,
    pub levels: Vec<LevelTargets>,
}

impl TargetAssignment {
    pub fn num_positives(&self) -> usize {
        self.levels
            .iter()
            .map(|l| l.positive.iter().filter(|&&p| p).count())
            .sum()
    }
}

/// Grid position of 0-based timestep `t` at 0-based level `m`.
pub fn grid_position(t: usize, stride: usize) -> f64 {
    (t * stride + 1) as f64
}

/// Assigns every pyramid timestep to at most one annotation.
///
/// `class_ids` lists the vocabulary id of each classifier column.
pub fn assign_targets(
    annotations: &[ActionAnnotation],
    class_ids: &[usize],
    level_lengths: &[usize],
    cfg: &AssignConfig,
) -> Result<TargetAssignment> {
    cfg.validate(level_lengths.len())?;
    let a = class_ids.len();
    let columns = annotations
        .iter()
        .map(|ann| {
            class_ids.iter().position(|&c| c == ann.class_id).ok_or_else(|| {
                Error::Data(format!(
                    "annotation class {} is not in the active vocabulary",
                    ann.class_id
                ))
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut levels = Vec::with_capacity(level_lengths.len());
    for (m, &len) in level_lengths.iter().enumerate() {
        let stride = 1usize << m;
        let s = stride as f64;
        let (lo, hi) = cfg.level_ranges[m];
        let mut lt = LevelTargets {
            len,
            stride,
            classes: vec![false; len * a],
            positive: vec![false; len],
            regression: vec![None; len],
            matched: vec![None; len],
        };
        for t in 0..len {
            let p = grid_position(t, stride);
            let mut best: Option<usize> = None;
            for (i, ann) in annotations.iter().enumerate() {
                let (ds, de) = (p - ann.start, ann.end - p);
                if ds <= 0.0 || de <= 0.0 {
                    continue;
                }
                let center = 0.5 * (ann.start + ann.end);
                let radius = 0.5 * cfg.center_ratio * (ann.end - ann.start);
                if (p - center).abs() > radius {
                    continue;
                }
                let reach = ds.max(de) / s;
                if !(reach > lo && reach <= hi) {
                    continue;
                }
                let extent = ann.end - ann.start;
                match best {
                    Some(j) if annotations[j].end - annotations[j].start <= extent => {}
                    _ => best = Some(i),
                }
            }
            if let Some(i) = best {
                let win = &annotations[i];
                lt.positive[t] = true;
                lt.matched[t] = Some(i);
                lt.regression[t] = Some([(p - win.start) / s, (win.end - p) / s]);
                for (j, other) in annotations.iter().enumerate() {
                    if other.start == win.start && other.end == win.end {
                        lt.classes[t * a + columns[j]] = true;
                    }
                }
            }
        }
        levels.push(lt);
    }
    Ok(TargetAssignment { num_classes: a, levels })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub focal: FocalParams,
    pub lambda: f64,
    pub assign: AssignConfig,
}

impl LossConfig {
    pub fn for_levels(levels: usize) -> Self {
        LossConfig {
            focal: FocalParams::default(),
            lambda: 1.0,
            assign: AssignConfig::for_levels(levels),
        }
    }

    pub fn validate(&self, levels: usize) -> Result<()> {
        self.focal.validate()?;
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        self.assign.validate(levels)
    }
}

pub struct LossParts<'t> {
    pub total: Var<'t>,
    pub cls: Var<'t>,
    pub reg: Var<'t>,
}

/// `L_cls + λ·L_reg`, with focal loss summed over valid timesteps and divided
/// by `max(1, #positives)`, and DIoU averaged over positives.
pub fn joint_loss<'t>(
    tape: &'t Tape,
    out: &ForwardOutput<'t>,
    assignment: &TargetAssignment,
    focal: FocalParams,
    lambda: f64,
) -> Result<LossParts<'t>> {
    if out.levels.len() != assignment.levels.len() {
        return Err(Error::Usage(format!(
            "{} output levels but {} assigned levels",
            out.levels.len(),
            assignment.levels.len()
        )));
    }
    let positives = assignment.num_positives();
    let norm = positives.max(1) as f64;
    let mut cls: Option<Var<'t>> = None;
    let mut reg: Option<Var<'t>> = None;
    for (lvl, tgt) in out.levels.iter().zip(&assignment.levels) {
        if lvl.mask.len() != tgt.len {
            return Err(Error::Usage(format!(
                "level of length {} assigned with length {}",
                lvl.mask.len(),
                tgt.len
            )));
        }
        let weights: Vec<f64> = lvl.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        let c = lvl.logits.focal_loss(&tgt.classes, &weights, focal, norm)?;
        cls = Some(match cls {
            None => c,
            Some(acc) => acc.add(&c)?,
        });
        let targets: Vec<RegressionTarget> = tgt
            .regression
            .iter()
            .enumerate()
            .filter_map(|(row, r)| r.map(|target| RegressionTarget { row, target }))
            .collect();
        if !targets.is_empty() {
            let r = lvl.offsets.diou_loss(&targets, positives as f64)?;
            reg = Some(match reg {
                None => r,
                Some(acc) => acc.add(&r)?,
            });
        }
    }
    let cls = cls.ok_or_else(|| Error::Usage("joint loss over zero levels".into()))?;
    let reg = reg.unwrap_or_else(|| tape.constant(crate::tensor::Tensor::scalar(0.0)));
    let total = if lambda == 0.0 { cls } else { cls.add(&reg.scale(lambda))? };
    Ok(LossParts { total, cls, reg })
}

/// Focal loss over plain values, summed and divided by `max(1, #positive rows)`.
pub fn focal_loss_value(logits: &[f64], targets: &[bool], num_classes: usize, p: FocalParams) -> f64 {
    let positives = targets
        .chunks(num_classes.max(1))
        .filter(|row| row.iter().any(|&b| b))
        .count();
    let sum: f64 = logits
        .iter()
        .zip(targets)
        .map(|(&x, &t)| focal_element(x, t, p).0)
        .sum();
    sum / positives.max(1) as f64
}

/// DIoU loss between two offset pairs sharing an anchor.
pub fn diou_offsets(pred: [f64; 2], target: [f64; 2]) -> f64 {
    diou_segments((-pred[0], pred[1]), (-target[0], target[1])).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{params_grad_check, Model, ModelConfig, ModelParams};
    use crate::tensor::Tensor;
    use crate::textbank::ClassEmbeddingTable;
    use proptest::prelude::*;

    fn ann(s: f64, e: f64, c: usize) -> ActionAnnotation {
        ActionAnnotation { start: s, end: e, class_id: c }
    }

    fn open_ranges(levels: usize) -> AssignConfig {
        AssignConfig {
            center_ratio: 1.0,
            level_ranges: vec![(0.0, f64::INFINITY); levels],
        }
    }

    #[test]
    fn no_annotations_no_positives() {
        let a = assign_targets(&[], &[0, 1], &[16, 8], &AssignConfig::for_levels(2)).unwrap();
        assert_eq!(a.num_positives(), 0);
        assert!(a.levels.iter().all(|l| l.classes.iter().all(|&b| !b)));
    }

    #[test]
    fn single_annotation_offsets() {
        let a = assign_targets(&[ann(10.0, 20.0, 3)], &[1, 3], &[32], &open_ranges(1)).unwrap();
        let l = &a.levels[0];
        // p = 15 is timestep 14
        assert_eq!(l.regression[14], Some([5.0, 5.0]));
        assert!(l.classes[14 * 2 + 1] && !l.classes[14 * 2]);
        // endpoints are excluded because an offset would be zero
        assert!(!l.positive[9] && !l.positive[19]);
        assert_eq!(l.positive.iter().filter(|&&p| p).count(), 9);
    }

    #[test]
    fn stride_units_and_center_region() {
        let cfg = AssignConfig { center_ratio: 0.5, level_ranges: vec![(0.0, 4.0), (2.0, f64::INFINITY)] };
        let a = assign_targets(&[ann(2.0, 18.0, 0)], &[0], &[20, 10], &cfg).unwrap();
        assert_eq!(a.levels[0].positive.iter().filter(|&&p| p).count(), 0);
        let l = &a.levels[1];
        // p = 2t+1 within [6, 14]: t = 3..=6
        let pos: Vec<usize> = (0..10).filter(|&t| l.positive[t]).collect();
        assert_eq!(pos, vec![3, 4, 5, 6]);
        assert_eq!(l.regression[4], Some([3.5, 4.5]));
    }

    #[test]
    fn nested_annotations_shorter_wins() {
        let anns = [ann(0.0, 30.0, 0), ann(12.0, 18.0, 1)];
        let a = assign_targets(&anns, &[0, 1], &[32], &open_ranges(1)).unwrap();
        let l = &a.levels[0];
        assert_eq!(l.matched[14], Some(1));
        assert_eq!(l.regression[14], Some([3.0, 3.0]));
        assert!(l.classes[14 * 2 + 1] && !l.classes[14 * 2]);
        assert_eq!(l.matched[5], Some(0));
    }

    #[test]
    fn identical_extents_are_multi_hot() {
        let anns = [ann(4.0, 9.0, 0), ann(4.0, 9.0, 2)];
        let a = assign_targets(&anns, &[0, 1, 2], &[12], &open_ranges(1)).unwrap();
        let row = &a.levels[0].classes[5 * 3..6 * 3];
        assert_eq!(row, &[true, false, true]);
    }

    #[test]
    fn unknown_class_is_error() {
        let r = assign_targets(&[ann(1.0, 4.0, 9)], &[0], &[8], &open_ranges(1));
        assert!(matches!(r, Err(Error::Data(_))));
    }

    #[test]
    fn default_ranges_tile_frame_offsets() {
        let cfg = AssignConfig::for_levels(3);
        assert_eq!(cfg.level_ranges, vec![(0.0, 4.0), (2.0, 4.0), (2.0, f64::INFINITY)]);
        let parsed = AssignConfig::parse_ranges(&AssignConfig::format_ranges(&cfg.level_ranges)).unwrap();
        assert_eq!(parsed, cfg.level_ranges);
        assert!(AssignConfig { center_ratio: 0.5, level_ranges: vec![(0.0, 4.0)] }.validate(1).is_err());
    }

    #[test]
    fn focal_examples() {
        let ce = FocalParams { alpha: None, gamma: 0.0 };
        assert!((focal_loss_value(&[0.0], &[true], 1, ce) - std::f64::consts::LN_2).abs() < 1e-15);
        let logit = (0.9f64 / 0.1).ln();
        let v = focal_loss_value(&[logit], &[true], 1, FocalParams::default());
        assert!((v - 0.25 * 0.01 * -(0.9f64).ln()).abs() < 1e-15);
        assert!((v - 2.6342e-4).abs() < 1e-7);
        assert!(focal_loss_value(&[40.0], &[true], 1, FocalParams::default()) < 1e-15);
        // normalized by positive rows, not elements
        let two = focal_loss_value(&[0.0, 0.0, 0.0, 0.0], &[true, false, false, false], 2, ce);
        assert!((two - 4.0 * std::f64::consts::LN_2).abs() < 1e-14);
    }

    #[test]
    fn diou_examples() {
        assert_eq!(diou_offsets([2.0, 3.0], [2.0, 3.0]), 0.0);
        // [0,2] vs [1,3] around anchor 1: offsets (1,1) and (0,2)
        assert!((diou_offsets([1.0, 1.0], [0.0, 2.0]) - 7.0 / 9.0).abs() < 1e-15);
        let (l, _) = diou_segments((0.0, 1.0), (2.0, 3.0));
        assert!((l - 13.0 / 9.0).abs() < 1e-15);
    }

    fn model_setup(t: usize) -> (Model, ModelParams, crate::datasets::VideoFeatures, ClassEmbeddingTable) {
        let cfg = ModelConfig {
            d_v: 4,
            d_f: 4,
            d_model: 8,
            d_hat: 8,
            heads: 2,
            levels: 2,
            text_dim: 4,
            ffn_mult: 2,
            head_layers: 2,
            temperature: 10.0,
            late_fusion_only: false,
        };
        let model = Model::new(cfg.clone()).unwrap();
        let params = ModelParams::init(&cfg, 3).unwrap();
        let snippet = Tensor::new(vec![t, 4], (0..t * 4).map(|i| ((i * 37 % 11) as f64 - 5.0) / 5.0).collect()).unwrap();
        let frame = Tensor::new(vec![t, 4], (0..t * 4).map(|i| ((i * 13 % 7) as f64 - 3.0) / 3.0).collect()).unwrap();
        let v = crate::datasets::VideoFeatures::new(
            "v",
            snippet,
            frame,
            vec![ann(2.0, 7.0, 0), ann(7.5, 11.5, 1)],
        )
        .unwrap();
        let table = ClassEmbeddingTable::from_rows(&[
            vec![1.0, 0.0, 0.5, 0.0],
            vec![0.0, 1.0, 0.0, -0.5],
            vec![0.3, 0.3, 0.3, 0.3],
        ])
        .unwrap();
        (model, params, v, table)
    }

    #[test]
    fn joint_loss_composition() {
        let (model, params, v, table) = model_setup(16);
        let lens = model.cfg.level_lengths(16);
        let asg = assign_targets(&v.annotations, table.class_ids(), &lens, &AssignConfig::for_levels(2)).unwrap();
        assert!(asg.num_positives() > 0);
        let tape = Tape::new();
        let b = params.bind(&tape, |_| false);
        let out = model.forward(&tape, &b, &v, &table).unwrap();
        let parts = joint_loss(&tape, &out, &asg, FocalParams::default(), 1.0).unwrap();
        let (total, cls, reg) = (parts.total.value().item(), parts.cls.value().item(), parts.reg.value().item());
        assert_eq!(total, cls + reg);

        // hand sum of the element losses
        let mut c = 0.0;
        let mut r = 0.0;
        for (lvl, tgt) in out.levels.iter().zip(&asg.levels) {
            let logits = lvl.logits.value();
            for (i, (&x, &y)) in logits.data().iter().zip(&tgt.classes).enumerate() {
                if lvl.mask[i / 3] {
                    c += focal_element(x, y, FocalParams::default()).0;
                }
            }
            let offs = lvl.offsets.value();
            for (t, reg) in tgt.regression.iter().enumerate() {
                if let Some(target) = reg {
                    r += diou_offsets([offs.get(t, 0), offs.get(t, 1)], *target);
                }
            }
        }
        let n = asg.num_positives() as f64;
        assert!((cls - c / n).abs() < 1e-12);
        assert!((reg - r / n).abs() < 1e-12);

        let zero = joint_loss(&tape, &out, &asg, FocalParams::default(), 0.0).unwrap();
        assert_eq!(zero.total.value().item(), cls);
    }

    #[test]
    fn joint_loss_without_positives() {
        let (model, params, mut v, table) = model_setup(12);
        v.annotations.clear();
        let asg = assign_targets(&[], table.class_ids(), &model.cfg.level_lengths(12), &AssignConfig::for_levels(2)).unwrap();
        let tape = Tape::new();
        let b = params.bind(&tape, |_| false);
        let out = model.forward(&tape, &b, &v, &table).unwrap();
        let parts = joint_loss(&tape, &out, &asg, FocalParams::default(), 1.0).unwrap();
        assert_eq!(parts.reg.value().item(), 0.0);
        let mut c = 0.0;
        for lvl in &out.levels {
            for &x in lvl.logits.value().data() {
                c += focal_element(x, false, FocalParams::default()).0;
            }
        }
        assert!((parts.cls.value().item() - c).abs() < 1e-12);
    }

    #[test]
    fn joint_loss_gradient_through_model() {
        let (model, params, v, table) = model_setup(12);
        let asg = assign_targets(&v.annotations, table.class_ids(), &model.cfg.level_lengths(12), &AssignConfig::for_levels(2)).unwrap();
        let err = params_grad_check(&params, 1e-6, |tape, b| {
            let out = model.forward(tape, b, &v, &table)?;
            Ok(joint_loss(tape, &out, &asg, FocalParams::default(), 1.0)?.total)
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    /// Re-derivation that walks annotations first and keeps the shortest per cell.
    fn brute_force(anns: &[ActionAnnotation], lens: &[usize], cfg: &AssignConfig) -> Vec<Vec<Option<usize>>> {
        lens.iter()
            .enumerate()
            .map(|(m, &len)| {
                let stride = (1u64 << m) as f64;
                let mut cell: Vec<Option<usize>> = vec![None; len];
                for (i, a) in anns.iter().enumerate() {
                    let width = a.end - a.start;
                    let margin = (1.0 - cfg.center_ratio) * width / 2.0;
                    for (t, slot) in cell.iter_mut().enumerate() {
                        let p = t as f64 * stride + 1.0;
                        let inside = p > a.start && p < a.end;
                        let central = p - a.start >= margin && a.end - p >= margin;
                        let reach = f64::max(p - a.start, a.end - p) / stride;
                        let (lo, hi) = cfg.level_ranges[m];
                        if inside && central && lo < reach && reach <= hi {
                            let better = match *slot {
                                None => true,
                                Some(j) => width < anns[j].end - anns[j].start,
                            };
                            if better {
                                *slot = Some(i);
                            }
                        }
                    }
                }
                cell
            })
            .collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn assignment_matches_brute_force(
            spans in proptest::collection::vec((0u32..60, 1u32..30), 0..6),
            ratio_idx in 0usize..3,
        ) {
            // integer endpoints keep both derivations exact
            let anns: Vec<ActionAnnotation> = spans
                .iter()
                .enumerate()
                .map(|(i, &(s, l))| ann(s as f64 + 1.0, (s + l) as f64 + 1.0, i % 2))
                .collect();
            let cfg = AssignConfig { center_ratio: [0.5, 0.75, 1.0][ratio_idx], ..AssignConfig::for_levels(3) };
            let lens = [64, 32, 16];
            let got = assign_targets(&anns, &[0, 1], &lens, &cfg).unwrap();
            let want = brute_force(&anns, &lens, &cfg);
            for (lvl, w) in got.levels.iter().zip(&want) {
                prop_assert_eq!(&lvl.matched, w);
                for t in 0..lvl.len {
                    prop_assert_eq!(lvl.positive[t], w[t].is_some());
                    prop_assert_eq!(lvl.regression[t].is_some(), w[t].is_some());
                    prop_assert_eq!(lvl.classes[t * 2..t * 2 + 2].iter().any(|&b| b), w[t].is_some());
                    if let Some(r) = lvl.regression[t] {
                        prop_assert!(r[0] > 0.0 && r[1] > 0.0);
                    }
                }
            }
        }

        #[test]
        fn diou_bounds_and_symmetry(
            a in (0.01f64..20.0, 0.01f64..20.0),
            b in (0.01f64..20.0, 0.01f64..20.0),
        ) {
            let l = diou_offsets([a.0, a.1], [b.0, b.1]);
            prop_assert!((0.0..2.0).contains(&l));
            let r = diou_offsets([b.0, b.1], [a.0, a.1]);
            prop_assert!((l - r).abs() < 1e-12);
        }

        #[test]
        fn diou_without_center_gap_is_one_minus_iou(c in -5.0f64..5.0, w1 in 0.1f64..10.0, w2 in 0.1f64..10.0) {
            let (l, _) = diou_segments((c - w1, c + w1), (c - w2, c + w2));
            let iou = w1.min(w2) / w1.max(w2);
            prop_assert!((l - (1.0 - iou)).abs() < 1e-12);
        }

        #[test]
        fn focal_monotone_in_pt(x in -8.0f64..8.0, dx in 0.01f64..4.0, target in any::<bool>()) {
            let p = FocalParams::default();
            // moving the logit toward the target raises p_t
            let (lo, hi) = if target { (x, x + dx) } else { (x + dx, x) };
            prop_assert!(focal_element(hi, target, p).0 <= focal_element(lo, target, p).0);
        }

        #[test]
        fn focal_gamma_suppresses_easy(x in 0.05f64..8.0, g in 0.0f64..4.0, dg in 0.1f64..2.0) {
            // p_t > 0.5 for a positive with a positive logit
            let a = focal_element(x, true, FocalParams { alpha: Some(0.25), gamma: g }).0;
            let b = focal_element(x, true, FocalParams { alpha: Some(0.25), gamma: g + dg }).0;
            prop_assert!(b < a);
        }
    }
}
