//! Optimizer, learning-rate schedule and the two-stage training loop.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::binio;
use crate::parallel;
use crate::datasets::{pad_or_window, Dataset, DatasetRole, VideoFeatures};
use crate::error::{Error, Result};
use crate::losses::{assign_targets, joint_loss, AssignConfig, FocalParams};
use crate::model::{Checkpoint, Model, ModelConfig, ModelParams, StageTag};
use crate::tensor::{Tape, Tensor};
use crate::textbank::ClassEmbeddingTable;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Freeze {
    None,
    Enc,
    Dec,
}

impl Freeze {
    pub fn trainable(self, name: &str) -> bool {
        match self {
            Freeze::None => true,
            Freeze::Enc => !name.starts_with("enc."),
            Freeze::Dec => !name.starts_with("dec."),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActiveVocab {
    Super,
    Base,
}

macro_rules! text_enum {
    ($ty:ident { $($variant:ident => $text:literal),* $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$variant => $text),* })
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($ty::$variant),)*
                    _ => Err(Error::Config(format!(
                        concat!("bad ", stringify!($ty), " {:?}, want one of: ", $($text, " "),*),
                        s
                    ))),
                }
            }
        }
    };
}

text_enum!(Stage { One => "one", Two => "two" });
text_enum!(Freeze { None => "none", Enc => "enc", Dec => "dec" });
text_enum!(ActiveVocab { Super => "super", Base => "base" });

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub lr: f64,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lambda: f64,
    pub freeze: Freeze,
    pub grad_clip: f64,
    pub active_vocab: ActiveVocab,
    pub weight_decay: f64,
    /// Training window length; longer videos are split into overlapping windows.
    pub max_seq_len: usize,
    pub focal_alpha: Option<f64>,
    pub focal_gamma: f64,
    pub center_ratio: f64,
    /// `None` uses the default tiling for the model's level count.
    pub level_ranges: Option<Vec<(f64, f64)>>,
    pub checkpoint_dir: Option<PathBuf>,
    /// Worker threads for per-video gradients; results do not depend on it.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: Stage::One,
            epochs: 40,
            lr: 1e-3,
            warmup_epochs: 5,
            batch_size: 2,
            seed: 0,
            lambda: 1.0,
            freeze: Freeze::None,
            grad_clip: 1.0,
            active_vocab: ActiveVocab::Super,
            weight_decay: 1e-4,
            max_seq_len: 512,
            focal_alpha: Some(0.25),
            focal_gamma: 2.0,
            center_ratio: 0.5,
            level_ranges: None,
            checkpoint_dir: None,
            threads: 1,
        }
    }
}

/// Named presets shared by training and inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub train: TrainConfig,
    pub nms_thresh: f64,
}

pub const PRESET_NAMES: &[&str] = &["stage1", "thumos-ft", "anet-ft", "acceptance"];

pub fn preset(name: &str) -> Result<Preset> {
    let base = TrainConfig::default();
    let p = match name {
        "stage1" => Preset {
            name: "stage1",
            train: TrainConfig { max_seq_len: 512, lr: 1e-3, epochs: 40, ..base },
            nms_thresh: 0.75,
        },
        "thumos-ft" => Preset {
            name: "thumos-ft",
            train: TrainConfig {
                stage: Stage::Two,
                active_vocab: ActiveVocab::Base,
                max_seq_len: 2304,
                lr: 1e-4,
                epochs: 13,
                warmup_epochs: 2,
                ..base
            },
            nms_thresh: 0.5,
        },
        "anet-ft" => Preset {
            name: "anet-ft",
            train: TrainConfig {
                stage: Stage::Two,
                active_vocab: ActiveVocab::Base,
                max_seq_len: 192,
                lr: 1e-3,
                epochs: 15,
                warmup_epochs: 2,
                ..base
            },
            nms_thresh: 0.7,
        },
        "acceptance" => Preset {
            name: "acceptance",
            train: TrainConfig {
                max_seq_len: 128,
                lr: 5e-3,
                epochs: 12,
                warmup_epochs: 1,
                batch_size: 4,
                ..base
            },
            nms_thresh: 0.5,
        },
        other => {
            return Err(Error::Config(format!(
                "unknown preset {other:?}, want one of {}",
                PRESET_NAMES.join(", ")
            )))
        }
    };
    Ok(p)
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 && self.stage == Stage::One {
            return bad("stage one needs epochs >= 1".into());
        }
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return bad(format!(
                "warmup_epochs ({}) must be below epochs ({})",
                self.warmup_epochs, self.epochs
            ));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be a finite value >= 0, got {}", self.lr));
        }
        if self.threads == 0 {
            return bad("threads must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.grad_clip > 0.0) {
            return bad(format!("grad_clip must be > 0, got {}", self.grad_clip));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.max_seq_len == 0 {
            return bad("max_seq_len must be >= 1".into());
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        self.focal().validate()
    }

    pub fn focal(&self) -> FocalParams {
        FocalParams { alpha: self.focal_alpha, gamma: self.focal_gamma }
    }

    pub fn assign(&self, levels: usize) -> AssignConfig {
        let mut a = AssignConfig::for_levels(levels);
        a.center_ratio = self.center_ratio;
        if let Some(r) = &self.level_ranges {
            a.level_ranges = r.clone();
        }
        a
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("stage", self.stage.to_string()),
            ("epochs", self.epochs.to_string()),
            ("lr", self.lr.to_string()),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("lambda", self.lambda.to_string()),
            ("freeze", self.freeze.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("active_vocab", self.active_vocab.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("max_seq_len", self.max_seq_len.to_string()),
            (
                "focal_alpha",
                self.focal_alpha.map_or_else(|| "none".to_string(), |a| a.to_string()),
            ),
            ("focal_gamma", self.focal_gamma.to_string()),
            ("center_ratio", self.center_ratio.to_string()),
            (
                "level_ranges",
                self.level_ranges
                    .as_ref()
                    .map_or_else(|| "auto".to_string(), |r| AssignConfig::format_ranges(r)),
            ),
            (
                "checkpoint_dir",
                self.checkpoint_dir
                    .as_ref()
                    .map_or_else(|| "none".to_string(), |p| p.display().to_string()),
            ),
            ("threads", self.threads.to_string()),
        ]
    }

    /// Applies one `key=value` setting; returns `false` for keys this type does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let v = value.trim();
        let num = |what: &str| Error::Config(format!("{what}: cannot parse {v:?}"));
        match key {
            "stage" => self.stage = v.parse()?,
            "epochs" => self.epochs = v.parse().map_err(|_| num(key))?,
            "lr" => self.lr = v.parse().map_err(|_| num(key))?,
            "warmup_epochs" => self.warmup_epochs = v.parse().map_err(|_| num(key))?,
            "batch_size" => self.batch_size = v.parse().map_err(|_| num(key))?,
            "seed" => self.seed = v.parse().map_err(|_| num(key))?,
            "lambda" => self.lambda = v.parse().map_err(|_| num(key))?,
            "freeze" => self.freeze = v.parse()?,
            "grad_clip" => self.grad_clip = v.parse().map_err(|_| num(key))?,
            "active_vocab" => self.active_vocab = v.parse()?,
            "weight_decay" => self.weight_decay = v.parse().map_err(|_| num(key))?,
            "max_seq_len" => self.max_seq_len = v.parse().map_err(|_| num(key))?,
            "focal_alpha" => {
                self.focal_alpha = if v == "none" {
                    None
                } else {
                    Some(v.parse().map_err(|_| num(key))?)
                }
            }
            "focal_gamma" => self.focal_gamma = v.parse().map_err(|_| num(key))?,
            "center_ratio" => self.center_ratio = v.parse().map_err(|_| num(key))?,
            "level_ranges" => {
                self.level_ranges = if v == "auto" {
                    None
                } else {
                    Some(AssignConfig::parse_ranges(v)?)
                }
            }
            "checkpoint_dir" => {
                self.checkpoint_dir = if v == "none" { None } else { Some(PathBuf::from(v)) }
            }
            "threads" => self.threads = v.parse().map_err(|_| num(key))?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Linear warmup over `warmup` steps, then cosine decay to zero at `total`.
pub fn lr_at(step: usize, total: usize, warmup: usize, base: f64) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

#[derive(Clone, Debug, Default)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

/// Global L2 norm of all gradients.
pub fn global_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Rescales in place so the global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= scale);
        }
    }
    norm
}

pub fn check_finite(grads: &BTreeMap<String, Tensor>) -> Result<()> {
    for (name, g) in grads {
        if !g.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient in tensor {name}")));
        }
    }
    Ok(())
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW { cfg, step: 0, moments: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update over the tensors present in `grads`. Weight decay is
    /// skipped for rank-1 tensors (norm gains, biases, scalars).
    pub fn step(
        &mut self,
        params: &mut ModelParams,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
        grad_clip: Option<f64>,
    ) -> Result<f64> {
        check_finite(grads)?;
        let clipped;
        let (grads, norm) = match grad_clip {
            Some(c) => {
                let mut g = grads.clone();
                let n = clip_global_norm(&mut g, c);
                clipped = g;
                (&clipped, n)
            }
            None => (grads, global_norm(grads)),
        };
        self.step += 1;
        let t = self.step as i32;
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.cfg;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::Usage(format!("gradient for unknown tensor {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::shape("optimizer_step", p.shape(), g.shape()));
            }
            let decay = if p.rank() > 1 { weight_decay } else { 0.0 };
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *x -= lr * (mhat / (vhat.sqrt() + eps) + decay * *x);
            }
        }
        Ok(norm)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochLoss {
    pub cls: f64,
    pub reg: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainReport {
    pub stage: String,
    pub epochs: Vec<EpochLoss>,
    pub best_epoch: Option<usize>,
    /// Kept out of the JSON summary so that it stays reproducible.
    #[serde(skip)]
    pub wall_time_secs: f64,
    pub checkpoint: Option<PathBuf>,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
}

impl TrainReport {
    /// `epoch<TAB>L_cls<TAB>L_reg<TAB>total`, one line per epoch.
    pub fn log_text(&self) -> String {
        let mut s = String::new();
        for (i, e) in self.epochs.iter().enumerate() {
            s.push_str(&format!("{}\t{}\t{}\t{}\n", i + 1, e.cls, e.reg, e.total));
        }
        s
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Writes `<stem>.log` (epoch losses plus wall time) and `<stem>.json`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        let log = format!("{}# wall_time_secs\t{:.3}\n", self.log_text(), self.wall_time_secs);
        binio::write_text(&dir.join(format!("{stem}.log")), &log)?;
        binio::write_text(&dir.join(format!("{stem}.json")), &self.summary_json())
    }
}

/// Losses and gradients for one sample.
pub struct SampleGrad {
    pub cls: f64,
    pub reg: f64,
    pub total: f64,
    pub grads: BTreeMap<String, Tensor>,
}

pub fn sample_gradient(
    model: &Model,
    params: &ModelParams,
    video: &VideoFeatures,
    table: &ClassEmbeddingTable,
    cfg: &TrainConfig,
) -> Result<SampleGrad> {
    let tape = Tape::new();
    let bound = params.bind(&tape, |n| cfg.freeze.trainable(n));
    let out = model.forward(&tape, &bound, video, table)?;
    let lengths: Vec<usize> = out.levels.iter().map(|l| l.mask.len()).collect();
    let assignment = assign_targets(
        &video.annotations,
        table.class_ids(),
        &lengths,
        &cfg.assign(model.cfg.levels),
    )?;
    let parts = joint_loss(&tape, &out, &assignment, cfg.focal(), cfg.lambda)?;
    let (cls, reg, total) = (parts.cls.value().item(), parts.reg.value().item(), parts.total.value().item());
    if !total.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss on video {}", video.id)));
    }
    let mut g = tape.backward(parts.total)?;
    let mut grads = BTreeMap::new();
    for (name, var) in bound.iter() {
        if cfg.freeze.trainable(name) {
            grads.insert(name.to_string(), g.take(var));
        }
    }
    Ok(SampleGrad { cls, reg, total, grads })
}

fn check_data(data: &Dataset, table: &ClassEmbeddingTable, model: &ModelConfig) -> Result<()> {
    if table.dim() != model.text_dim {
        return Err(Error::Config(format!(
            "embedding table width {} does not match model s={}",
            table.dim(),
            model.text_dim
        )));
    }
    for v in &data.videos {
        if v.snippet.cols() != model.d_v || v.frame.cols() != model.d_f {
            return Err(Error::Config(format!(
                "video {}: feature widths {}/{} but model expects d_v={} d_f={}",
                v.id,
                v.snippet.cols(),
                v.frame.cols(),
                model.d_v,
                model.d_f
            )));
        }
        for a in &v.annotations {
            if !table.class_ids().contains(&a.class_id) {
                return Err(Error::Config(format!(
                    "video {}: class {} is not in the active vocabulary",
                    v.id, a.class_id
                )));
            }
        }
    }
    Ok(())
}

fn training_samples(data: &Dataset, cfg: &TrainConfig, model: &ModelConfig) -> Result<Vec<VideoFeatures>> {
    let mut out = Vec::new();
    for v in &data.videos {
        if v.valid_len > cfg.max_seq_len {
            out.extend(pad_or_window(v, cfg.max_seq_len)?);
        } else {
            out.push(v.clone());
        }
    }
    if let Some(v) = out.iter().find(|v| v.len() < model.min_len()) {
        return Err(Error::Config(format!(
            "video {} has {} steps, fewer than the {} the pyramid needs",
            v.id,
            v.len(),
            model.min_len()
        )));
    }
    Ok(out)
}

/// Runs the shared loop: deterministic shuffles, averaged batch gradients,
/// one checkpoint per epoch and the best-by-loss parameters returned.
fn run(
    model_cfg: &ModelConfig,
    init: ModelParams,
    data: &Dataset,
    table: &ClassEmbeddingTable,
    cfg: &TrainConfig,
    tag: StageTag,
) -> Result<(ModelParams, TrainReport)> {
    cfg.validate()?;
    let model = Model::new(model_cfg.clone())?;
    check_data(data, table, model_cfg)?;
    cfg.assign(model_cfg.levels).validate(model_cfg.levels)?;
    let samples = training_samples(data, cfg, model_cfg)?;
    let started = Instant::now();
    let mut params = init;
    let mut report = TrainReport {
        stage: tag.to_string(),
        epochs: Vec::new(),
        best_epoch: None,
        wall_time_secs: 0.0,
        checkpoint: None,
        seed: cfg.seed,
        config: model_cfg
            .to_pairs()
            .into_iter()
            .chain(cfg.to_pairs())
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
    };
    if cfg.epochs == 0 || samples.is_empty() {
        report.wall_time_secs = started.elapsed().as_secs_f64();
        return Ok((params, report));
    }

    let steps_per_epoch = samples.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let warmup = steps_per_epoch * cfg.warmup_epochs;
    let mut opt = AdamW::new(AdamWConfig { weight_decay: cfg.weight_decay, ..AdamWConfig::default() });
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut best: Option<(f64, ModelParams)> = None;
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(binio::mix_seed(&[cfg.seed, epoch as u64, 0x5452_4149]));
        order.shuffle(&mut rng);
        let (mut cls, mut reg, mut total) = (0.0, 0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let mut sum: BTreeMap<String, Tensor> = BTreeMap::new();
            let results = if cfg.threads > 1 {
                let shared = params.to_map();
                parallel::map_with_state(
                    batch,
                    cfg.threads,
                    || ModelParams::from_map(shared.clone()),
                    |p, &i| sample_gradient(&model, p, &samples[i], table, cfg),
                )
            } else {
                batch
                    .iter()
                    .map(|&i| sample_gradient(&model, &params, &samples[i], table, cfg))
                    .collect()
            };
            for g in results {
                let g = g?;
                cls += g.cls;
                reg += g.reg;
                total += g.total;
                for (name, t) in g.grads {
                    match sum.get_mut(&name) {
                        Some(acc) => acc.data_mut().iter_mut().zip(t.data()).for_each(|(a, b)| *a += b),
                        None => {
                            sum.insert(name, t);
                        }
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for g in sum.values_mut() {
                g.data_mut().iter_mut().for_each(|x| *x *= inv);
            }
            let lr = lr_at(step, total_steps, warmup, cfg.lr);
            opt.step(&mut params, &sum, lr, Some(cfg.grad_clip))?;
            step += 1;
        }
        let n = samples.len() as f64;
        let e = EpochLoss { cls: cls / n, reg: reg / n, total: total / n };
        log::info!(
            "{tag} epoch {}/{}: L_cls {:.5} L_reg {:.5} total {:.5}",
            epoch + 1,
            cfg.epochs,
            e.cls,
            e.reg,
            e.total
        );
        report.epochs.push(e);
        // losses are measured while the epoch trains, so they describe the
        // parameters going into it
        let snapshot = params.to_f32_precision();
        if best.as_ref().is_none_or(|(l, _)| e.total < *l) {
            best = Some((e.total, snapshot.clone()));
            report.best_epoch = Some(epoch + 1);
            if let Some(dir) = &cfg.checkpoint_dir {
                let path = dir.join(format!("{tag}_best.ovck"));
                write_checkpoint(model_cfg, &snapshot, cfg.seed, tag, &path)?;
                report.checkpoint = Some(path);
            }
        }
        if let Some(dir) = &cfg.checkpoint_dir {
            write_checkpoint(model_cfg, &snapshot, cfg.seed, tag, &dir.join(format!("{tag}_last.ovck")))?;
        }
    }
    report.wall_time_secs = started.elapsed().as_secs_f64();
    let (_, best_params) = best.expect("at least one epoch ran");
    Ok((best_params, report))
}

fn write_checkpoint(cfg: &ModelConfig, params: &ModelParams, seed: u64, stage: StageTag, path: &Path) -> Result<()> {
    Checkpoint { cfg: cfg.clone(), params: params.clone(), seed, stage }.save(path)
}

/// Stage I: trains from a fresh seeded initialization on the large vocabulary.
pub fn train_stage1(
    model_cfg: &ModelConfig,
    data: &Dataset,
    table: &ClassEmbeddingTable,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainReport)> {
    if cfg.active_vocab != ActiveVocab::Super || cfg.stage != Stage::One {
        return Err(Error::Config("stage one trains with stage=one and active_vocab=super".into()));
    }
    if let Some(role) = data.role.filter(|r| *r != DatasetRole::Super) {
        return Err(Error::Config(format!("stage one expects a super dataset, got {role:?}")));
    }
    let init = ModelParams::init(model_cfg, cfg.seed)?;
    run(model_cfg, init, data, table, cfg, StageTag::StageOne)
}

/// Stage II: finetunes from `init` on base classes.
pub fn finetune_stage2(
    init: &Checkpoint,
    data: &Dataset,
    table: &ClassEmbeddingTable,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainReport)> {
    if cfg.active_vocab != ActiveVocab::Base || cfg.stage != Stage::Two {
        return Err(Error::Config("stage two trains with stage=two and active_vocab=base".into()));
    }
    if let Some(role) = data.role.filter(|r| *r == DatasetRole::Super) {
        return Err(Error::Config(format!("stage two expects a base dataset, got {role:?}")));
    }
    init.check_compatible(&init.cfg)?;
    run(&init.cfg, init.params.clone(), data, table, cfg, StageTag::StageTwo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{synth_generate, SynthConfig};
    use crate::textbank::{build_table, SyntheticTextEncoder, Vocabulary};

    fn small_model() -> ModelConfig {
        ModelConfig {
            d_v: 8,
            d_f: 8,
            d_model: 8,
            d_hat: 8,
            heads: 2,
            levels: 2,
            text_dim: 8,
            ffn_mult: 2,
            head_layers: 1,
            temperature: 10.0,
            late_fusion_only: false,
        }
    }

    fn small_data(n: usize) -> (Dataset, ClassEmbeddingTable) {
        let vocab = Vocabulary::from_names(&["jump", "throw", "swim"], crate::textbank::Split::Super).unwrap();
        let enc = SyntheticTextEncoder::new(3, 8);
        let table = build_table(&vocab, &enc.describe_all(&vocab)).unwrap();
        let cfg = SynthConfig {
            n_videos: n,
            t: 32,
            d_v: 8,
            d_f: 8,
            actions_per_video: 2,
            min_len: 4,
            max_len: 10,
            ..SynthConfig::default()
        };
        (synth_generate(&cfg, &vocab, &table).unwrap(), table)
    }

    fn quick(epochs: usize) -> TrainConfig {
        TrainConfig { epochs, warmup_epochs: 0, batch_size: 2, lr: 1e-2, max_seq_len: 32, ..TrainConfig::default() }
    }

    fn single(v: f64) -> ModelParams {
        let mut m = BTreeMap::new();
        m.insert("w".to_string(), Tensor::matrix(1, 1, vec![v]).unwrap());
        ModelParams::from_map(m)
    }

    fn grad(v: f64) -> BTreeMap<String, Tensor> {
        let mut m = BTreeMap::new();
        m.insert("w".to_string(), Tensor::matrix(1, 1, vec![v]).unwrap());
        m
    }

    #[test]
    fn adamw_zero_gradient_no_decay_is_noop() {
        let mut p = single(0.7);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() });
        for _ in 0..3 {
            opt.step(&mut p, &grad(0.0), 1e-2, Some(1.0)).unwrap();
        }
        assert_eq!(p.get("w").unwrap().data(), &[0.7]);
    }

    #[test]
    fn adamw_first_step_is_sign() {
        for g in [3.0, -0.02] {
            let mut p = single(0.0);
            let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() });
            opt.step(&mut p, &grad(g), 0.1, None).unwrap();
            let x = p.get("w").unwrap().data()[0];
            let expect = -0.1 * g.signum();
            assert!((x - expect).abs() < 0.1 * 1e-8 / g.abs() + 1e-15, "{x}");
        }
    }

    #[test]
    fn adamw_decay_skips_rank_one() {
        let mut m = BTreeMap::new();
        m.insert("w".to_string(), Tensor::matrix(1, 1, vec![1.0]).unwrap());
        m.insert("b".to_string(), Tensor::vector(vec![1.0]));
        let mut p = ModelParams::from_map(m.clone());
        let zeros: BTreeMap<String, Tensor> = m.keys().map(|k| (k.clone(), Tensor::zeros(m[k].shape()))).collect();
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.5, ..AdamWConfig::default() });
        opt.step(&mut p, &zeros, 0.1, None).unwrap();
        assert_eq!(p.get("b").unwrap().data(), &[1.0]);
        assert!((p.get("w").unwrap().data()[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn clipping_halves_at_twice_the_norm() {
        let mut g = BTreeMap::new();
        g.insert("a".to_string(), Tensor::vector(vec![1.2, 0.0]));
        g.insert("b".to_string(), Tensor::vector(vec![1.6]));
        let before = g.clone();
        let norm = clip_global_norm(&mut g, 1.0);
        assert!((norm - 2.0).abs() < 1e-15);
        for (k, t) in &g {
            for (x, y) in t.data().iter().zip(before[k].data()) {
                assert!((x - y / 2.0).abs() < 1e-15);
            }
        }
        assert!((global_norm(&g) - 1.0).abs() < 1e-15);
        let mut small = before.clone();
        clip_global_norm(&mut small, 5.0);
        assert_eq!(small, before);
    }

    #[test]
    fn nan_gradient_names_tensor() {
        let mut p = single(0.0);
        let mut opt = AdamW::new(AdamWConfig::default());
        let err = opt.step(&mut p, &grad(f64::NAN), 0.1, Some(1.0)).unwrap_err();
        assert!(matches!(&err, Error::Numeric(m) if m.contains("tensor w")), "{err}");
        assert_eq!(p.get("w").unwrap().data(), &[0.0]);
    }

    #[test]
    fn schedule_shape() {
        assert!((lr_at(0, 100, 10, 1.0) - 0.1).abs() < 1e-15);
        assert!((lr_at(9, 100, 10, 1.0) - 1.0).abs() < 1e-15);
        assert!((lr_at(10, 100, 10, 1.0) - 1.0).abs() < 1e-15);
        assert!((lr_at(55, 100, 10, 1.0) - 0.5).abs() < 1e-12);
        assert!(lr_at(100, 100, 10, 1.0).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for s in 10..100 {
            let lr = lr_at(s, 100, 10, 1.0);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn config_keys_round_trip() {
        let mut cfg = TrainConfig {
            focal_alpha: None,
            level_ranges: Some(vec![(0.0, 4.0), (2.0, f64::INFINITY)]),
            freeze: Freeze::Enc,
            ..TrainConfig::default()
        };
        cfg.checkpoint_dir = Some(PathBuf::from("/tmp/x"));
        let mut back = TrainConfig::default();
        for (k, v) in cfg.to_pairs() {
            assert!(back.set(k, &v).unwrap(), "{k}");
        }
        assert_eq!(back, cfg);
        assert!(!back.set("bogus", "1").unwrap());
        assert!(back.set("freeze", "everything").is_err());
        assert!(TrainConfig { warmup_epochs: 40, ..TrainConfig::default() }.validate().is_err());
        for name in PRESET_NAMES {
            preset(name).unwrap().train.validate().unwrap();
        }
        assert_eq!(preset("thumos-ft").unwrap().train.max_seq_len, 2304);
        assert!(preset("nope").is_err());
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let (data, table) = small_data(2);
        let cfg = TrainConfig { lr: 0.0, ..quick(1) };
        let (params, report) = train_stage1(&small_model(), &data, &table, &cfg).unwrap();
        assert_eq!(params, ModelParams::init(&small_model(), cfg.seed).unwrap());
        assert_eq!(report.epochs.len(), 1);
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let (data, table) = small_data(6);
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig { checkpoint_dir: Some(dir.path().to_path_buf()), ..quick(8) };
        let (a, ra) = train_stage1(&small_model(), &data, &table, &cfg).unwrap();
        let (b, rb) = train_stage1(&small_model(), &data, &table, &TrainConfig { checkpoint_dir: None, ..cfg.clone() }).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.epochs, rb.epochs);
        assert!(ra.epochs.last().unwrap().total < ra.epochs[0].total);
        let ck = Checkpoint::load(ra.checkpoint.as_ref().unwrap()).unwrap();
        assert_eq!(ck.params, a);
        assert_eq!(ck.stage, StageTag::StageOne);
        assert!(dir.path().join("stage1_last.ovck").exists());
        assert_eq!(ra.log_text().lines().count(), 8);
        let json: serde_json::Value = serde_json::from_str(&ra.summary_json()).unwrap();
        assert_eq!(json["epochs"].as_array().unwrap().len(), 8);
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let (data, table) = small_data(5);
        let one = train_stage1(&small_model(), &data, &table, &TrainConfig { batch_size: 3, ..quick(2) }).unwrap();
        let many = train_stage1(&small_model(), &data, &table, &TrainConfig { batch_size: 3, threads: 3, ..quick(2) }).unwrap();
        assert_eq!(one.0, many.0);
        assert_eq!(one.1.epochs, many.1.epochs);
    }

    #[test]
    fn freeze_modes_keep_tensors_bitwise() {
        let (data, table) = small_data(4);
        let model = small_model();
        let init = Checkpoint {
            cfg: model.clone(),
            params: ModelParams::init(&model, 5).unwrap(),
            seed: 5,
            stage: StageTag::StageOne,
        };
        let base = TrainConfig { stage: Stage::Two, active_vocab: ActiveVocab::Base, ..quick(2) };
        for (freeze, frozen) in [(Freeze::Enc, "enc."), (Freeze::Dec, "dec.")] {
            let (p, _) = finetune_stage2(&init, &data, &table, &TrainConfig { freeze, ..base.clone() }).unwrap();
            for (name, t) in p.iter() {
                let before = init.params.get(name).unwrap();
                if name.starts_with(frozen) {
                    assert_eq!(t, before, "{name}");
                }
            }
            assert!(p.iter().any(|(n, t)| !n.starts_with(frozen) && t != init.params.get(n).unwrap()));
        }
        let (p, r) = finetune_stage2(&init, &data, &table, &TrainConfig { epochs: 0, ..base }).unwrap();
        assert_eq!(p, init.params);
        assert!(r.epochs.is_empty());
    }

    #[test]
    fn stage_and_vocab_mismatches_are_config_errors() {
        let (data, table) = small_data(2);
        let wrong = TrainConfig { active_vocab: ActiveVocab::Base, ..quick(1) };
        assert!(matches!(train_stage1(&small_model(), &data, &table, &wrong), Err(Error::Config(_))));
        let sub = table.subset(&[0]).unwrap();
        let err = train_stage1(&small_model(), &data, &sub, &quick(1)).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }
}
