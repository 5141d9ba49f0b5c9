//! Vocabularies, prompt rendering and the aggregated class-embedding table.
//!
//! Each class is described by `E` text descriptions whose embeddings are
//! averaged into a single row of the table. Embeddings are ingested from files
//! (or produced by [`SyntheticTextEncoder`]); nothing here talks to a network.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::binio::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Vocabulary tag of a class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Super,
    Base,
    Novel,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Super => "super",
            Split::Base => "base",
            Split::Novel => "novel",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "super" => Ok(Split::Super),
            "base" => Ok(Split::Base),
            "novel" => Ok(Split::Novel),
            other => Err(Error::Data(format!("unknown split tag {other:?}"))),
        }
    }
}

/// Which part of a vocabulary to keep in [`select_split`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitSelector {
    Base,
    Novel,
    All,
}

impl FromStr for SplitSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "base" => Ok(SplitSelector::Base),
            "novel" => Ok(SplitSelector::Novel),
            "all" => Ok(SplitSelector::All),
            other => Err(Error::Usage(format!("unknown split selector {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassEntry {
    pub id: usize,
    pub name: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    classes: Vec<ClassEntry>,
}

fn normalize_name(name: &str) -> String {
    name.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

impl Vocabulary {
    /// Validates ids (unique, contiguous from 0) and names (unique after
    /// whitespace and case folding). Entries are stored in id order.
    pub fn new(mut classes: Vec<ClassEntry>) -> Result<Self> {
        classes.sort_by_key(|c| c.id);
        for (i, c) in classes.iter().enumerate() {
            if c.id != i {
                return Err(Error::Data(format!(
                    "class ids must be unique and contiguous from 0; expected {i}, found {} ({})",
                    c.id, c.name
                )));
            }
            if c.name.trim().is_empty() {
                return Err(Error::Data(format!("class {} has an empty name", c.id)));
            }
        }
        let mut seen = HashSet::new();
        for c in &classes {
            if !seen.insert(normalize_name(&c.name)) {
                return Err(Error::Data(format!("duplicate class name {:?}", c.name)));
            }
        }
        Ok(Vocabulary { classes })
    }

    /// Builds a vocabulary from names in id order, all tagged `split`.
    pub fn from_names<S: AsRef<str>>(names: &[S], split: Split) -> Result<Self> {
        Self::new(
            names
                .iter()
                .enumerate()
                .map(|(id, n)| ClassEntry {
                    id,
                    name: n.as_ref().to_string(),
                    split,
                })
                .collect(),
        )
    }

    pub fn classes(&self) -> &[ClassEntry] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&ClassEntry> {
        self.classes.get(id)
    }

    pub fn ids_in(&self, which: SplitSelector) -> Vec<usize> {
        self.classes
            .iter()
            .filter(|c| match which {
                SplitSelector::All => true,
                SplitSelector::Base => c.split == Split::Base,
                SplitSelector::Novel => c.split == Split::Novel,
            })
            .map(|c| c.id)
            .collect()
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut classes = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.splitn(3, '\t');
            let (Some(id), Some(split), Some(name)) = (parts.next(), parts.next(), parts.next())
            else {
                return Err(Error::format(
                    path,
                    format!("line {}: expected <id>\\t<split>\\t<name>", lineno + 1),
                ));
            };
            let id = id.trim().parse::<usize>().map_err(|_| {
                Error::format(path, format!("line {}: bad class id {id:?}", lineno + 1))
            })?;
            classes.push(ClassEntry {
                id,
                name: name.to_string(),
                split: split.parse()?,
            });
        }
        Self::new(classes)
    }

    pub fn to_text(&self) -> String {
        self.classes
            .iter()
            .map(|c| format!("{}\t{}\t{}\n", c.id, c.split, c.name))
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&binio::read_text(path)?, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::write_text(path, &self.to_text())
    }
}

/// The prompt sent to a language model to obtain class descriptions.
pub fn render_prompt(classname: &str) -> Result<String> {
    if classname.trim().is_empty() {
        return Err(Error::Usage("class name must be nonempty".into()));
    }
    Ok(format!(
        "How can you recognize a video of a person performing the {classname} action?"
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DescriptionSet {
    pub class_id: usize,
    /// Either empty (embeddings only) or one string per embedding.
    pub descriptions: Vec<String>,
    pub embeddings: Vec<Vec<f64>>,
}

impl DescriptionSet {
    pub fn dim(&self) -> Option<usize> {
        self.embeddings.first().map(Vec::len)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AggregateOptions {
    /// L2-normalize each description embedding before averaging.
    pub normalize_descriptions: bool,
}

/// Component-wise mean of the description embeddings.
pub fn aggregate_embeddings(desc: &DescriptionSet) -> Result<Vec<f64>> {
    aggregate_embeddings_with(desc, AggregateOptions::default())
}

pub fn aggregate_embeddings_with(desc: &DescriptionSet, opts: AggregateOptions) -> Result<Vec<f64>> {
    let dim = desc
        .dim()
        .ok_or_else(|| Error::Data(format!("class {} has no description embeddings", desc.class_id)))?;
    if dim == 0 {
        return Err(Error::Data(format!("class {} has zero-width embeddings", desc.class_id)));
    }
    if let Some(bad) = desc.embeddings.iter().find(|e| e.len() != dim) {
        return Err(Error::Data(format!(
            "class {}: description embedding widths differ ({dim} vs {})",
            desc.class_id,
            bad.len()
        )));
    }
    if !desc.descriptions.is_empty() && desc.descriptions.len() != desc.embeddings.len() {
        return Err(Error::Data(format!(
            "class {}: {} descriptions but {} embeddings",
            desc.class_id,
            desc.descriptions.len(),
            desc.embeddings.len()
        )));
    }
    let vectors: Vec<Vec<f64>> = if opts.normalize_descriptions {
        desc.embeddings
            .iter()
            .map(|e| {
                let n = e.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > 0.0 {
                    e.iter().map(|v| v / n).collect()
                } else {
                    e.clone()
                }
            })
            .collect()
    } else {
        desc.embeddings.clone()
    };
    let e = vectors.len() as f64;
    let mut column = Vec::with_capacity(vectors.len());
    let mut out = Vec::with_capacity(dim);
    for j in 0..dim {
        // summing in sorted order makes the mean independent of description order
        column.clear();
        column.extend(vectors.iter().map(|v| v[j]));
        column.sort_by(f64::total_cmp);
        out.push(column.iter().sum::<f64>() / e);
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data(format!(
            "class {}: aggregated embedding is not finite",
            desc.class_id
        )));
    }
    Ok(out)
}

/// One aggregated embedding per class, rows in class-id order.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassEmbeddingTable {
    rows: Tensor,
    /// Vocabulary id of each row.
    class_ids: Vec<usize>,
}

impl ClassEmbeddingTable {
    pub fn new(rows: Tensor, class_ids: Vec<usize>) -> Result<Self> {
        if rows.rank() != 2 || rows.rows() != class_ids.len() {
            return Err(Error::shape("class table", rows.shape(), &[class_ids.len()]));
        }
        if !rows.is_finite() {
            return Err(Error::Data("class table contains non-finite entries".into()));
        }
        Ok(ClassEmbeddingTable { rows, class_ids })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Tensor::from_rows(rows)?, (0..rows.len()).collect())
    }

    pub fn matrix(&self) -> &Tensor {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn class_ids(&self) -> &[usize] {
        &self.class_ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.rows.row(i)
    }

    /// Keeps the listed rows (by position) in the given order.
    pub fn subset(&self, positions: &[usize]) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::Usage("empty table subset".into()));
        }
        let rows: Vec<Vec<f64>> = positions.iter().map(|&p| self.row(p).to_vec()).collect();
        Self::new(
            Tensor::from_rows(&rows)?,
            positions.iter().map(|&p| self.class_ids[p]).collect(),
        )
    }

    pub fn to_f32_precision(&self) -> Self {
        ClassEmbeddingTable {
            rows: self.rows.to_f32_precision(),
            class_ids: self.class_ids.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer::with_magic(b"OVZL", 1);
        w.u32(self.len() as u32);
        w.u32(self.dim() as u32);
        w.f32s(self.rows.data());
        w.write_to(path)
    }

    /// Loads an aggregated table; rows get class ids `0..A`.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = binio::read_file(path)?;
        let mut r = Reader::open(&bytes, path, b"OVZL", 1)?;
        let a = r.u32()? as usize;
        let s = r.u32()? as usize;
        if a == 0 || s == 0 {
            return Err(r.err(format!("empty table header (A={a}, s={s})")));
        }
        let data = r.f32s(a * s)?;
        r.finish()?;
        Self::new(Tensor::matrix(a, s, data)?, (0..a).collect())
            .map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Stacks one aggregated embedding per vocabulary class.
pub fn build_table(vocab: &Vocabulary, sets: &[DescriptionSet]) -> Result<ClassEmbeddingTable> {
    build_table_with(vocab, sets, AggregateOptions::default())
}

pub fn build_table_with(
    vocab: &Vocabulary,
    sets: &[DescriptionSet],
    opts: AggregateOptions,
) -> Result<ClassEmbeddingTable> {
    let mut by_class: BTreeMap<usize, &DescriptionSet> = BTreeMap::new();
    for set in sets {
        let entry = vocab.get(set.class_id).ok_or_else(|| {
            Error::Data(format!("descriptions for unknown class id {}", set.class_id))
        })?;
        if by_class.insert(set.class_id, set).is_some() {
            return Err(Error::Data(format!(
                "duplicate description set for class {} ({})",
                entry.id, entry.name
            )));
        }
    }
    let mut rows = Vec::with_capacity(vocab.len());
    let mut dim = None;
    for class in vocab.classes() {
        let set = by_class.get(&class.id).ok_or_else(|| {
            Error::Data(format!(
                "missing description set for class {} ({})",
                class.id, class.name
            ))
        })?;
        let row = aggregate_embeddings_with(set, opts)?;
        if *dim.get_or_insert(row.len()) != row.len() {
            return Err(Error::Data(format!(
                "class {} ({}) has embedding width {}, expected {}",
                class.id,
                class.name,
                row.len(),
                dim.unwrap_or(0)
            )));
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Data("vocabulary has no classes".into()));
    }
    ClassEmbeddingTable::from_rows(&rows)
}

/// Restricts the table to one split. Returns the sub-table and, per row, the
/// original class id.
pub fn select_split(
    table: &ClassEmbeddingTable,
    vocab: &Vocabulary,
    which: SplitSelector,
) -> Result<(ClassEmbeddingTable, Vec<usize>)> {
    if table.len() != vocab.len() {
        return Err(Error::Data(format!(
            "table has {} rows but vocabulary has {} classes",
            table.len(),
            vocab.len()
        )));
    }
    let ids = vocab.ids_in(which);
    if ids.is_empty() {
        return Err(Error::Usage(format!("split {which:?} selects no classes")));
    }
    let positions: Vec<usize> = ids
        .iter()
        .map(|id| table.class_ids().iter().position(|c| c == id).unwrap())
        .collect();
    let sub = table.subset(&positions)?;
    let remap = sub.class_ids().to_vec();
    Ok((sub, remap))
}

/// Writes per-description embeddings (`OVTB`) and the parallel description sidecar.
pub fn save_descriptions(sets: &[DescriptionSet], path: &Path, sidecar: Option<&Path>) -> Result<()> {
    let dim = sets.iter().find_map(|s| s.dim()).unwrap_or(0);
    let e_max = sets.iter().map(|s| s.embeddings.len()).max().unwrap_or(0);
    let mut w = Writer::with_magic(b"OVTB", 1);
    w.u32(sets.len() as u32);
    w.u32(e_max as u32);
    w.u32(dim as u32);
    for set in sets {
        w.u32(set.class_id as u32);
        w.u32(set.embeddings.len() as u32);
        for e in &set.embeddings {
            if e.len() != dim {
                return Err(Error::Data(format!(
                    "class {}: embedding width {} differs from {dim}",
                    set.class_id,
                    e.len()
                )));
            }
            w.f32s(e);
        }
    }
    w.write_to(path)?;
    if let Some(side) = sidecar {
        let blocks: Vec<String> = sets
            .iter()
            .map(|s| {
                s.descriptions
                    .iter()
                    .map(|d| d.replace('\n', " "))
                    .collect::<Vec<_>>()
                    .join("\n")
            })
            .collect();
        binio::write_text(side, &(blocks.join("\n\n") + "\n"))?;
    }
    Ok(())
}

/// Reads an `OVTB` file; when `sidecar` is given, attaches the description
/// strings block by block.
pub fn load_descriptions(path: &Path, sidecar: Option<&Path>) -> Result<Vec<DescriptionSet>> {
    let bytes = binio::read_file(path)?;
    let mut r = Reader::open(&bytes, path, b"OVTB", 1)?;
    let a = r.u32()? as usize;
    let e_max = r.u32()? as usize;
    let s = r.u32()? as usize;
    let mut sets = Vec::with_capacity(a);
    for _ in 0..a {
        let class_id = r.u32()? as usize;
        let e = r.u32()? as usize;
        if e == 0 || e > e_max {
            return Err(r.err(format!("class {class_id}: E={e} outside 1..={e_max}")));
        }
        let embeddings = (0..e).map(|_| r.f32s(s)).collect::<Result<Vec<_>>>()?;
        sets.push(DescriptionSet {
            class_id,
            descriptions: Vec::new(),
            embeddings,
        });
    }
    r.finish()?;
    if let Some(side) = sidecar {
        let text = binio::read_text(side)?;
        let blocks: Vec<&str> = text.trim_end_matches('\n').split("\n\n").collect();
        if blocks.len() != sets.len() {
            return Err(Error::format(
                side,
                format!("{} description blocks for {} classes", blocks.len(), sets.len()),
            ));
        }
        for (set, block) in sets.iter_mut().zip(blocks) {
            set.descriptions = block.lines().map(str::to_string).collect();
        }
    }
    Ok(sets)
}

/// Deterministic stand-in for a text encoder.
///
/// Each class name maps to a seeded unit-norm prototype; each description
/// embedding is the prototype plus seeded Gaussian jitter of per-component
/// scale `spread / sqrt(dim)`. `style` changes only the jitter, so the same
/// class names under a different style give nearby but distinct tables.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTextEncoder {
    pub seed: u64,
    pub dim: usize,
    pub descriptions_per_class: usize,
    pub spread: f64,
    pub style: u64,
}

impl SyntheticTextEncoder {
    pub fn new(seed: u64, dim: usize) -> Self {
        SyntheticTextEncoder {
            seed,
            dim,
            descriptions_per_class: 10,
            spread: 0.3,
            style: 0,
        }
    }

    pub fn prototype(&self, name: &str) -> Vec<f64> {
        let key = binio::fnv1a(normalize_name(name).as_bytes());
        let mut rng = ChaCha8Rng::seed_from_u64(binio::mix_seed(&[self.seed, key]));
        let v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    pub fn describe(&self, class: &ClassEntry) -> DescriptionSet {
        let proto = self.prototype(&class.name);
        let key = binio::fnv1a(normalize_name(&class.name).as_bytes());
        let mut rng = ChaCha8Rng::seed_from_u64(binio::mix_seed(&[self.seed, key, self.style, 1]));
        let scale = self.spread / (self.dim as f64).sqrt();
        let mut descriptions = Vec::new();
        let mut embeddings = Vec::new();
        for r in 0..self.descriptions_per_class {
            descriptions.push(format!(
                "{} (synthetic description {} of {})",
                class.name,
                r + 1,
                self.descriptions_per_class
            ));
            embeddings.push(
                proto
                    .iter()
                    .map(|p| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        // file formats hold f32
                        (p + scale * z) as f32 as f64
                    })
                    .collect(),
            );
        }
        DescriptionSet {
            class_id: class.id,
            descriptions,
            embeddings,
        }
    }

    pub fn describe_all(&self, vocab: &Vocabulary) -> Vec<DescriptionSet> {
        vocab.classes().iter().map(|c| self.describe(c)).collect()
    }
}

/// Settings for building embedding tables.
#[derive(Clone, Debug, PartialEq)]
pub struct TextConfig {
    pub encoder: SyntheticTextEncoder,
    pub aggregate: AggregateOptions,
}

impl Default for TextConfig {
    fn default() -> Self {
        TextConfig {
            encoder: SyntheticTextEncoder::new(0, 512),
            aggregate: AggregateOptions::default(),
        }
    }
}

impl TextConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder.dim == 0 || self.encoder.descriptions_per_class == 0 {
            return Err(Error::Config("s and descriptions_per_class must be >= 1".into()));
        }
        if !(self.encoder.spread >= 0.0) || !self.encoder.spread.is_finite() {
            return Err(Error::Config("spread must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let e = &self.encoder;
        vec![
            ("s", e.dim.to_string()),
            ("text_seed", e.seed.to_string()),
            ("descriptions_per_class", e.descriptions_per_class.to_string()),
            ("spread", e.spread.to_string()),
            ("style", e.style.to_string()),
            ("normalize_descriptions", self.aggregate.normalize_descriptions.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
        }
        let v = value.trim();
        let e = &mut self.encoder;
        match key {
            "s" => e.dim = num(key, v)?,
            "text_seed" => e.seed = num(key, v)?,
            "descriptions_per_class" => e.descriptions_per_class = num(key, v)?,
            "spread" => e.spread = num(key, v)?,
            "style" => e.style = num(key, v)?,
            "normalize_descriptions" => self.aggregate.normalize_descriptions = num(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}
