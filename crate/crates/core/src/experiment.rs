//! The synthetic open-vocabulary protocol: a large-vocabulary pretraining set,
//! a base-class finetuning set, and a test set mixing base and novel classes.

use crate::datasets::{synth_generate, Dataset, DatasetRole, SynthConfig};
use crate::error::Result;
use crate::evaluation::{evaluate, EvalConfig, EvalReport};
use crate::inference::{predict_all, InferConfig};
use crate::model::{Checkpoint, Model, ModelConfig, ModelParams, StageTag};
use crate::textbank::{build_table, ClassEmbeddingTable, ClassEntry, Split, SyntheticTextEncoder, Vocabulary};
use crate::training::{finetune_stage2, train_stage1, ActiveVocab, Stage, TrainConfig, TrainReport};

pub const SUPER_NAMES: [&str; 16] = [
    "Archery",
    "BalanceBeam",
    "BasketballDunk",
    "Billiards",
    "BoxingPunchingBag",
    "CleanAndJerk",
    "CliffDiving",
    "CricketBowling",
    "Diving",
    "FrisbeeCatch",
    "GolfSwing",
    "HammerThrow",
    "HighJump",
    "JavelinThrow",
    "LongJump",
    "PoleVault",
];

pub const FRESH_NAMES: [&str; 4] = ["Shotput", "SoccerPenalty", "TennisSwing", "VolleyballSpiking"];

#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolConfig {
    pub text_dim: usize,
    pub text_seed: u64,
    pub proj_seed: u64,
    pub data_seed: u64,
    pub n_super: usize,
    pub n_base: usize,
    pub n_test: usize,
    pub t: usize,
    pub d_v: usize,
    pub d_f: usize,
    pub snr: f64,
    pub snippet_rank: usize,
    pub actions_per_video: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Draw the novel classes from the super classes not used as base
    /// classes; otherwise use names never seen in pretraining.
    pub novel_from_super: bool,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            text_dim: 16,
            text_seed: 7,
            proj_seed: 11,
            data_seed: 0,
            n_super: 300,
            n_base: 200,
            n_test: 100,
            t: 128,
            d_v: 32,
            d_f: 32,
            snr: 8.0,
            snippet_rank: 4,
            actions_per_video: 3,
            min_len: 4,
            max_len: 24,
            novel_from_super: true,
        }
    }
}

pub struct Protocol {
    pub super_data: Dataset,
    pub super_table: ClassEmbeddingTable,
    pub base_data: Dataset,
    pub base_table: ClassEmbeddingTable,
    pub test_data: Dataset,
    pub test_table: ClassEmbeddingTable,
}

fn vocab_of(names: &[(&str, Split)]) -> Result<Vocabulary> {
    Vocabulary::new(
        names
            .iter()
            .enumerate()
            .map(|(id, &(name, split))| ClassEntry { id, name: name.to_string(), split })
            .collect(),
    )
}

impl Protocol {
    pub fn build(cfg: &ProtocolConfig) -> Result<Self> {
        let enc = SyntheticTextEncoder::new(cfg.text_seed, cfg.text_dim);
        // downstream descriptions are written in another style
        let restyled = SyntheticTextEncoder { style: 1, ..enc.clone() };
        let synth = |name: &str, seed: u64, n: usize, role| SynthConfig {
            name: name.to_string(),
            seed,
            proj_seed: cfg.proj_seed,
            n_videos: n,
            t: cfg.t,
            d_v: cfg.d_v,
            d_f: cfg.d_f,
            actions_per_video: cfg.actions_per_video,
            min_len: cfg.min_len,
            max_len: cfg.max_len,
            snr: cfg.snr,
            smooth: 3,
            snippet_rank: cfg.snippet_rank,
            background_scale: 1.0,
            role: Some(role),
        };

        let super_names: Vec<(&str, Split)> = SUPER_NAMES.iter().map(|&n| (n, Split::Super)).collect();
        let super_vocab = vocab_of(&super_names)?;
        let super_table = build_table(&super_vocab, &enc.describe_all(&super_vocab))?;
        let super_data = synth_generate(
            &synth("super", cfg.data_seed * 3 + 1, cfg.n_super, DatasetRole::Super),
            &super_vocab,
            &super_table,
        )?;

        let base_names: Vec<&str> = SUPER_NAMES.iter().step_by(2).copied().collect();
        let novel_names: Vec<&str> = if cfg.novel_from_super {
            SUPER_NAMES.iter().skip(1).step_by(4).copied().collect()
        } else {
            FRESH_NAMES.to_vec()
        };
        let base_vocab = vocab_of(&base_names.iter().map(|&n| (n, Split::Base)).collect::<Vec<_>>())?;
        let test_vocab = vocab_of(
            &base_names
                .iter()
                .map(|&n| (n, Split::Base))
                .chain(novel_names.iter().map(|&n| (n, Split::Novel)))
                .collect::<Vec<_>>(),
        )?;
        let base_table = build_table(&base_vocab, &restyled.describe_all(&base_vocab))?;
        let test_table = build_table(&test_vocab, &restyled.describe_all(&test_vocab))?;
        let base_data = synth_generate(
            &synth("base", cfg.data_seed * 3 + 2, cfg.n_base, DatasetRole::Base),
            &base_vocab,
            &base_table,
        )?;
        let test_data = synth_generate(
            &synth("test", cfg.data_seed * 3 + 3, cfg.n_test, DatasetRole::Test),
            &test_vocab,
            &test_table,
        )?;
        Ok(Protocol { super_data, super_table, base_data, base_table, test_data, test_table })
    }
}

pub fn experiment_model(cfg: &ProtocolConfig) -> ModelConfig {
    ModelConfig {
        d_v: cfg.d_v,
        d_f: cfg.d_f,
        d_model: 16,
        d_hat: 16,
        heads: 2,
        levels: 3,
        text_dim: cfg.text_dim,
        ffn_mult: 2,
        head_layers: 2,
        temperature: 10.0,
        late_fusion_only: false,
    }
}

pub fn stage1_config(seed: u64) -> TrainConfig {
    TrainConfig {
        stage: Stage::One,
        active_vocab: ActiveVocab::Super,
        epochs: 12,
        warmup_epochs: 1,
        lr: 5e-3,
        batch_size: 4,
        max_seq_len: 128,
        seed,
        ..TrainConfig::default()
    }
}

pub fn stage2_config(seed: u64) -> TrainConfig {
    TrainConfig {
        stage: Stage::Two,
        active_vocab: ActiveVocab::Base,
        epochs: 8,
        warmup_epochs: 1,
        lr: 2e-3,
        ..stage1_config(seed)
    }
}

pub fn infer_config() -> InferConfig {
    InferConfig { nms_thresh: 0.5, max_seq_len: 128, ..InferConfig::default() }
}

pub struct StageOneResult {
    pub checkpoint: Checkpoint,
    pub report: TrainReport,
}

pub fn run_stage1(p: &Protocol, model: &ModelConfig, cfg: &TrainConfig) -> Result<StageOneResult> {
    let (params, report) = train_stage1(model, &p.super_data, &p.super_table, cfg)?;
    Ok(StageOneResult {
        checkpoint: Checkpoint { cfg: model.clone(), params, seed: cfg.seed, stage: StageTag::StageOne },
        report,
    })
}

pub struct PipelineResult {
    pub params: ModelParams,
    pub report: TrainReport,
    pub eval: EvalReport,
}

/// Finetunes from `init` and evaluates on the test split at `tiou`.
pub fn finetune_and_eval(p: &Protocol, init: &Checkpoint, cfg: &TrainConfig, tiou: f64) -> Result<PipelineResult> {
    let (params, report) = finetune_stage2(init, &p.base_data, &p.base_table, cfg)?;
    let eval = evaluate_params(p, &init.cfg, &params, tiou)?;
    Ok(PipelineResult { params, report, eval })
}

pub fn evaluate_params(p: &Protocol, model: &ModelConfig, params: &ModelParams, tiou: f64) -> Result<EvalReport> {
    let m = Model::new(model.clone())?;
    let preds = predict_all(&m, params, &p.test_data.videos, &p.test_table, &infer_config())?;
    evaluate(&preds, &p.test_data, &EvalConfig::at(tiou))
}

pub fn random_init(model: &ModelConfig, seed: u64) -> Result<Checkpoint> {
    Ok(Checkpoint { cfg: model.clone(), params: ModelParams::init(model, seed)?, seed, stage: StageTag::Init })
}
