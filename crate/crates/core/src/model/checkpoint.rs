use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use crate::binio::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{ModelConfig, ModelParams};

/// Which training stage produced a checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageTag {
    Init,
    StageOne,
    StageTwo,
}

impl StageTag {
    fn code(self) -> u32 {
        match self {
            StageTag::Init => 0,
            StageTag::StageOne => 1,
            StageTag::StageTwo => 2,
        }
    }

    fn from_code(c: u32) -> Option<Self> {
        match c {
            0 => Some(StageTag::Init),
            1 => Some(StageTag::StageOne),
            2 => Some(StageTag::StageTwo),
            _ => None,
        }
    }
}

impl fmt::Display for StageTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StageTag::Init => "init",
            StageTag::StageOne => "stage1",
            StageTag::StageTwo => "stage2",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub cfg: ModelConfig,
    pub params: ModelParams,
    pub seed: u64,
    pub stage: StageTag,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_magic(b"OVCK", 1);
        let cfg_text: String = self
            .cfg
            .to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        w.len_prefixed(cfg_text.as_bytes());
        w.u64(self.seed);
        w.u32(self.stage.code());
        w.u32(self.params.len() as u32);
        for (name, t) in self.params.iter() {
            w.len_prefixed(name.as_bytes());
            w.u32(t.rank() as u32);
            for &d in t.shape() {
                w.u32(d as u32);
            }
            w.f32s(t.data());
        }
        w.finish()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::open(bytes, path, b"OVCK", 1)?;
        let cfg_text = std::str::from_utf8(r.len_prefixed()?)
            .map_err(|_| r.err("config block is not UTF-8"))?
            .to_string();
        let mut cfg = ModelConfig::default();
        for line in cfg_text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| r.err(format!("bad config line {line:?}")))?;
            if !cfg.set(k, v).map_err(|e| r.err(e.to_string()))? {
                return Err(r.err(format!("unknown config key {k:?}")));
            }
        }
        let seed = r.u64()?;
        let stage_code = r.u32()?;
        let stage = StageTag::from_code(stage_code)
            .ok_or_else(|| r.err(format!("unknown stage tag {stage_code}")))?;
        let n = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..n {
            let name = std::str::from_utf8(r.len_prefixed()?)
                .map_err(|_| r.err("tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            if rank == 0 || rank > 8 {
                return Err(r.err(format!("tensor {name}: bad rank {rank}")));
            }
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| r.err(format!("tensor {name}: size overflow")))?;
            let data = r.f32s(numel)?;
            let t = Tensor::new(shape, data).map_err(|e| r.err(format!("tensor {name}: {e}")))?;
            tensors.insert(name, t);
        }
        r.finish()?;
        Ok(Checkpoint {
            cfg,
            params: ModelParams::from_map(tensors),
            seed,
            stage,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&binio::read_file(path)?, path)
    }

    /// Loads and checks the stored configuration and every tensor shape
    /// against `expected`, reporting all mismatches at once.
    ///
    /// `s` (text width) must match, but the vocabulary size never enters a shape.
    pub fn load_compatible(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        ck.check_compatible(expected)
            .map_err(|e| Error::format(path, e.to_string()))?;
        Ok(ck)
    }

    pub fn check_compatible(&self, expected: &ModelConfig) -> Result<()> {
        let mut problems = expected.mismatches(&self.cfg);
        // late_fusion_only and temperature do not change shapes
        problems.retain(|p| !p.starts_with("late_fusion_only") && !p.starts_with("temperature"));
        let reference = ModelParams::init(expected, 0)?;
        for (name, t) in reference.iter() {
            match self.params.get(name) {
                None => problems.push(format!("{name}: missing")),
                Some(found) if found.shape() != t.shape() => problems.push(format!(
                    "{name}: expected shape {:?}, found {:?}",
                    t.shape(),
                    found.shape()
                )),
                _ => {}
            }
        }
        for name in self.params.names() {
            if reference.get(name).is_none() {
                problems.push(format!("{name}: unexpected tensor"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Data(format!(
                "incompatible checkpoint: {}",
                problems.join("; ")
            )))
        }
    }
}
