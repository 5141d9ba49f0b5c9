//! Feature-stream datasets: binary blobs plus a JSON manifest, windowing for
//! fixed training lengths, and a seeded generator with planted actions.
//!
//! Time is measured on the feature grid. Files and [`ActionAnnotation`] use
//! 1-based positions: timestep index `t` (0-based in the tensors) sits at grid
//! position `t + 1`, and an action covering indices `t0..=t1` is annotated as
//! `[t0 + 1, t1 + 1]`.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::binio::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::textbank::{ClassEmbeddingTable, Vocabulary};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionAnnotation {
    #[serde(rename = "s")]
    pub start: f64,
    #[serde(rename = "e")]
    pub end: f64,
    pub class_id: usize,
}

impl ActionAnnotation {
    pub fn length(&self) -> f64 {
        self.end - self.start
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoFeatures {
    pub id: String,
    /// Snippet-level stream, `T×d_v`.
    pub snippet: Tensor,
    /// Frame-level stream, `T×d_f`.
    pub frame: Tensor,
    pub annotations: Vec<ActionAnnotation>,
    /// Leading timesteps holding real data; the rest is zero padding.
    pub valid_len: usize,
    /// Index of this window's first timestep in the source video.
    pub offset: usize,
}

impl VideoFeatures {
    pub fn new(
        id: impl Into<String>,
        snippet: Tensor,
        frame: Tensor,
        annotations: Vec<ActionAnnotation>,
    ) -> Result<Self> {
        let id = id.into();
        if snippet.rank() != 2 || frame.rank() != 2 || snippet.rows() != frame.rows() {
            return Err(Error::Data(format!(
                "video {id}: snippet {:?} and frame {:?} streams must share T",
                snippet.shape(),
                frame.shape()
            )));
        }
        let valid_len = snippet.rows();
        let v = VideoFeatures {
            id,
            snippet,
            frame,
            annotations,
            valid_len,
            offset: 0,
        };
        v.validate_annotations(None)?;
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.snippet.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mask(&self) -> Vec<bool> {
        (0..self.len()).map(|t| t < self.valid_len).collect()
    }

    pub fn validate_annotations(&self, vocab: Option<&Vocabulary>) -> Result<()> {
        let t = self.valid_len as f64;
        for a in &self.annotations {
            if !(a.start >= 1.0 && a.start < a.end && a.end <= t) {
                return Err(Error::Data(format!(
                    "video {}: annotation [{}, {}] violates 1 <= s < e <= T={}",
                    self.id, a.start, a.end, self.valid_len
                )));
            }
            if let Some(v) = vocab {
                if a.class_id >= v.len() {
                    return Err(Error::Data(format!(
                        "video {}: class id {} not in vocabulary of {} classes",
                        self.id,
                        a.class_id,
                        v.len()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn save_blob(&self, path: &Path) -> Result<()> {
        let mut w = Writer::with_magic(b"OVFT", 1);
        w.u32(self.len() as u32);
        w.u32(self.snippet.cols() as u32);
        w.u32(self.frame.cols() as u32);
        w.f32s(self.snippet.data());
        w.f32s(self.frame.data());
        w.write_to(path)
    }

    /// Feature blob bytes for in-memory round trips.
    pub fn blob_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_magic(b"OVFT", 1);
        w.u32(self.len() as u32);
        w.u32(self.snippet.cols() as u32);
        w.u32(self.frame.cols() as u32);
        w.f32s(self.snippet.data());
        w.f32s(self.frame.data());
        w.finish()
    }
}

/// Reads an `OVFT` blob into `(snippet, frame)`.
pub fn load_blob(path: &Path) -> Result<(Tensor, Tensor)> {
    let bytes = binio::read_file(path)?;
    parse_blob(&bytes, path)
}

pub fn parse_blob(bytes: &[u8], path: &Path) -> Result<(Tensor, Tensor)> {
    let mut r = Reader::open(bytes, path, b"OVFT", 1)?;
    let t = r.u32()? as usize;
    let d_v = r.u32()? as usize;
    let d_f = r.u32()? as usize;
    if t == 0 || d_v == 0 || d_f == 0 {
        return Err(r.err(format!("degenerate shape T={t} d_v={d_v} d_f={d_f}")));
    }
    let snippet = r.f32s(t * d_v)?;
    let frame = r.f32s(t * d_f)?;
    r.finish()?;
    Ok((Tensor::matrix(t, d_v, snippet)?, Tensor::matrix(t, d_f, frame)?))
}

/// Role of a dataset in the two-stage protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetRole {
    Super,
    Base,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestVideo {
    pub id: String,
    pub blob: String,
    pub annotations: Vec<ActionAnnotation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub vocab_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<DatasetRole>,
    pub videos: Vec<ManifestVideo>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub role: Option<DatasetRole>,
    pub vocab: Vocabulary,
    pub videos: Vec<VideoFeatures>,
}

impl Dataset {
    pub fn annotation_count(&self) -> usize {
        self.videos.iter().map(|v| v.annotations.len()).sum()
    }
}

fn resolve(base: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads and validates every video named by a manifest.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = binio::read_text(manifest_path)?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| Error::format(manifest_path, format!("bad manifest JSON: {e}")))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let vocab = Vocabulary::load(&resolve(base, &manifest.vocab_path))?;
    let mut videos = Vec::with_capacity(manifest.videos.len());
    for entry in &manifest.videos {
        let (snippet, frame) = load_blob(&resolve(base, &entry.blob))?;
        let v = VideoFeatures::new(entry.id.clone(), snippet, frame, entry.annotations.clone())?;
        v.validate_annotations(Some(&vocab))?;
        videos.push(v);
    }
    Ok(Dataset {
        name: manifest.name,
        role: manifest.role,
        vocab,
        videos,
    })
}

/// Writes blobs, the vocabulary and `manifest.json` into `dir`; returns the manifest path.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let vocab_file = "vocab.tsv";
    dataset.vocab.save(&dir.join(vocab_file))?;
    let mut entries = Vec::with_capacity(dataset.videos.len());
    for v in &dataset.videos {
        let blob = format!("{}.ovft", v.id);
        v.save_blob(&dir.join(&blob))?;
        entries.push(ManifestVideo {
            id: v.id.clone(),
            blob,
            annotations: v.annotations.clone(),
        });
    }
    let manifest = DatasetManifest {
        name: dataset.name.clone(),
        vocab_path: vocab_file.into(),
        role: dataset.role,
        videos: entries,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    binio::write_text(&path, &(json + "\n"))?;
    Ok(path)
}

/// Start indices of the windows covering a length-`t` sequence: stride is 75%
/// of `max_len`, and the last window is aligned to the sequence end.
pub fn window_starts(t: usize, max_len: usize) -> Vec<usize> {
    if t <= max_len {
        return vec![0];
    }
    let stride = (max_len - max_len / 4).max(1);
    let mut starts = Vec::new();
    let mut s = 0;
    while s + max_len < t {
        starts.push(s);
        s += stride;
    }
    starts.push(t - max_len);
    starts.dedup();
    starts
}

/// Clips an annotation to the window `[offset + 1, offset + len]` and shifts it
/// into window coordinates; `None` if less than one grid unit survives.
pub fn clip_to_window(a: &ActionAnnotation, offset: usize, len: usize) -> Option<ActionAnnotation> {
    let lo = offset as f64 + 1.0;
    let hi = (offset + len) as f64;
    let s = a.start.max(lo);
    let e = a.end.min(hi);
    if e - s < 1.0 {
        return None;
    }
    Some(ActionAnnotation {
        start: s - offset as f64,
        end: e - offset as f64,
        class_id: a.class_id,
    })
}

fn slice_rows(t: &Tensor, start: usize, len: usize, out_len: usize) -> Tensor {
    let c = t.cols();
    let mut data = vec![0.0; out_len * c];
    data[..len * c].copy_from_slice(&t.data()[start * c..(start + len) * c]);
    Tensor::matrix(out_len, c, data).expect("window shape")
}

/// Brings a video to exactly `max_len` timesteps: zero-padding with a validity
/// mask when shorter, overlapping windows when longer.
pub fn pad_or_window(v: &VideoFeatures, max_len: usize) -> Result<Vec<VideoFeatures>> {
    if max_len == 0 {
        return Err(Error::Usage("max_len must be >= 1".into()));
    }
    let t = v.valid_len;
    let mut out = Vec::new();
    for start in window_starts(t, max_len) {
        let len = max_len.min(t - start);
        let annotations = v
            .annotations
            .iter()
            .filter_map(|a| clip_to_window(a, start, max_len))
            .collect();
        let suffix = if t > max_len {
            format!("{}@{}", v.id, v.offset + start)
        } else {
            v.id.clone()
        };
        out.push(VideoFeatures {
            id: suffix,
            snippet: slice_rows(&v.snippet, start, len, max_len),
            frame: slice_rows(&v.frame, start, len, max_len),
            annotations,
            valid_len: len,
            offset: v.offset + start,
        });
    }
    Ok(out)
}

/// Generator settings. `proj_seed` fixes the embedding-to-feature maps and
/// background prototypes so that datasets generated with different `seed`s
/// live in the same feature space.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub name: String,
    pub seed: u64,
    pub proj_seed: u64,
    pub n_videos: usize,
    pub t: usize,
    pub d_v: usize,
    pub d_f: usize,
    pub actions_per_video: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Noise standard deviation is `1 / snr`; `f64::INFINITY` gives noiseless data.
    pub snr: f64,
    /// Centered moving-average width applied to the clean snippet signal.
    pub smooth: usize,
    /// Rank of the snippet map; `0` means full rank.
    pub snippet_rank: usize,
    pub background_scale: f64,
    pub role: Option<DatasetRole>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            name: "synthetic".into(),
            seed: 0,
            proj_seed: 1,
            n_videos: 8,
            t: 128,
            d_v: 32,
            d_f: 32,
            actions_per_video: 3,
            min_len: 6,
            max_len: 24,
            snr: 8.0,
            smooth: 3,
            snippet_rank: 0,
            background_scale: 1.0,
            role: None,
        }
    }
}

impl DatasetRole {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetRole::Super => "super",
            DatasetRole::Base => "base",
            DatasetRole::Test => "test",
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.t == 0 || self.d_v == 0 || self.d_f == 0 {
            return bad("T, d_v and d_f must be >= 1");
        }
        if self.min_len < 2 || self.min_len > self.max_len || self.max_len > self.t {
            return bad("need 2 <= min_len <= max_len <= T");
        }
        if !(self.snr > 0.0) {
            return bad("snr must be > 0");
        }
        if self.smooth == 0 {
            return bad("smooth must be >= 1");
        }
        if !(self.background_scale >= 0.0) || !self.background_scale.is_finite() {
            return bad("background_scale must be finite and >= 0");
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("name", self.name.clone()),
            ("seed", self.seed.to_string()),
            ("proj_seed", self.proj_seed.to_string()),
            ("n_videos", self.n_videos.to_string()),
            ("T", self.t.to_string()),
            ("d_v", self.d_v.to_string()),
            ("d_f", self.d_f.to_string()),
            ("actions_per_video", self.actions_per_video.to_string()),
            ("min_len", self.min_len.to_string()),
            ("max_len", self.max_len.to_string()),
            ("snr", self.snr.to_string()),
            ("smooth", self.smooth.to_string()),
            ("snippet_rank", self.snippet_rank.to_string()),
            ("background_scale", self.background_scale.to_string()),
            ("role", self.role.map_or("none", DatasetRole::as_str).to_string()),
        ]
    }

    /// Sets one key; returns `false` if the key is not a generator key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
        }
        let v = value.trim();
        match key {
            "name" => self.name = v.to_string(),
            "seed" => self.seed = num(key, v)?,
            "proj_seed" => self.proj_seed = num(key, v)?,
            "n_videos" => self.n_videos = num(key, v)?,
            "T" => self.t = num(key, v)?,
            "d_v" => self.d_v = num(key, v)?,
            "d_f" => self.d_f = num(key, v)?,
            "actions_per_video" => self.actions_per_video = num(key, v)?,
            "min_len" => self.min_len = num(key, v)?,
            "max_len" => self.max_len = num(key, v)?,
            "snr" => self.snr = num(key, v)?,
            "smooth" => self.smooth = num(key, v)?,
            "snippet_rank" => self.snippet_rank = num(key, v)?,
            "background_scale" => self.background_scale = num(key, v)?,
            "role" => {
                self.role = match v {
                    "none" => None,
                    "super" => Some(DatasetRole::Super),
                    "base" => Some(DatasetRole::Base),
                    "test" => Some(DatasetRole::Test),
                    _ => return Err(Error::Config(format!("role: expected super|base|test|none, got {v:?}"))),
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// The fixed random maps from embedding space into the two feature streams.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMaps {
    /// `d_f×s`.
    pub frame_map: Tensor,
    /// `d_v×s`.
    pub snippet_map: Tensor,
    pub frame_background: Vec<f64>,
    pub snippet_background: Vec<f64>,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

impl FeatureMaps {
    pub fn new(cfg: &SynthConfig, s: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(binio::mix_seed(&[cfg.proj_seed, 0x4d41_5053]));
        let frame_map = Tensor::matrix(cfg.d_f, s, gaussian(&mut rng, cfg.d_f * s)).unwrap();
        let rank = if cfg.snippet_rank == 0 { s } else { cfg.snippet_rank.min(s) };
        let u = gaussian(&mut rng, cfg.d_v * rank);
        let w = gaussian(&mut rng, s * rank);
        let norm = 1.0 / (rank as f64).sqrt();
        let mut snippet = vec![0.0; cfg.d_v * s];
        for i in 0..cfg.d_v {
            for j in 0..s {
                snippet[i * s + j] =
                    norm * (0..rank).map(|k| u[i * rank + k] * w[j * rank + k]).sum::<f64>();
            }
        }
        let frame_background = gaussian(&mut rng, cfg.d_f)
            .into_iter()
            .map(|v| v * cfg.background_scale)
            .collect();
        let snippet_background = gaussian(&mut rng, cfg.d_v)
            .into_iter()
            .map(|v| v * cfg.background_scale)
            .collect();
        FeatureMaps {
            frame_map,
            snippet_map: Tensor::matrix(cfg.d_v, s, snippet).unwrap(),
            frame_background,
            snippet_background,
        }
    }

    fn apply(map: &Tensor, z: &[f64]) -> Vec<f64> {
        (0..map.rows())
            .map(|i| map.row(i).iter().zip(z).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn frame_signal(&self, z: &[f64]) -> Vec<f64> {
        Self::apply(&self.frame_map, z)
    }

    pub fn snippet_signal(&self, z: &[f64]) -> Vec<f64> {
        Self::apply(&self.snippet_map, z)
    }
}

/// Generates `cfg.n_videos` videos whose actions are drawn from the rows of
/// `table` (row `i` is planted with class id `table.class_ids()[i]`).
pub fn synth_generate(
    cfg: &SynthConfig,
    vocab: &Vocabulary,
    table: &ClassEmbeddingTable,
) -> Result<Dataset> {
    if cfg.min_len < 2 || cfg.min_len > cfg.max_len {
        return Err(Error::Config(format!(
            "synthetic action lengths need 2 <= min_len <= max_len, got {}..{}",
            cfg.min_len, cfg.max_len
        )));
    }
    if cfg.actions_per_video * cfg.max_len > cfg.t {
        return Err(Error::Config(format!(
            "{} actions of up to {} steps cannot fit in T={}",
            cfg.actions_per_video, cfg.max_len, cfg.t
        )));
    }
    if table.is_empty() || cfg.snr <= 0.0 || cfg.t == 0 || cfg.d_v == 0 || cfg.d_f == 0 {
        return Err(Error::Config("synthetic generator needs classes, snr > 0 and positive dims".into()));
    }
    if let Some(&bad) = table.class_ids().iter().find(|&&c| c >= vocab.len()) {
        return Err(Error::Config(format!("table class id {bad} not in vocabulary")));
    }
    let maps = FeatureMaps::new(cfg, table.dim());
    let frame_sig: Vec<Vec<f64>> = (0..table.len()).map(|i| maps.frame_signal(table.row(i))).collect();
    let snip_sig: Vec<Vec<f64>> = (0..table.len()).map(|i| maps.snippet_signal(table.row(i))).collect();
    let sigma = if cfg.snr.is_infinite() { 0.0 } else { 1.0 / cfg.snr };

    let videos = (0..cfg.n_videos)
        .map(|index| {
            let mut rng = ChaCha8Rng::seed_from_u64(binio::mix_seed(&[cfg.seed, index as u64, 0x5649_4445]));
            generate_video(cfg, index, &mut rng, table, &frame_sig, &snip_sig, &maps, sigma)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        name: cfg.name.clone(),
        role: cfg.role,
        vocab: vocab.clone(),
        videos,
    })
}

#[allow(clippy::too_many_arguments)]
fn generate_video(
    cfg: &SynthConfig,
    index: usize,
    rng: &mut ChaCha8Rng,
    table: &ClassEmbeddingTable,
    frame_sig: &[Vec<f64>],
    snip_sig: &[Vec<f64>],
    maps: &FeatureMaps,
    sigma: f64,
) -> Result<VideoFeatures> {
    let t = cfg.t;
    let n = cfg.actions_per_video;
    let lengths: Vec<usize> = (0..n).map(|_| rng.random_range(cfg.min_len..=cfg.max_len)).collect();
    let slack = t - lengths.iter().sum::<usize>();
    // split the free slack into n + 1 gaps
    let mut cuts: Vec<usize> = (0..n).map(|_| rng.random_range(0..=slack)).collect();
    cuts.sort_unstable();
    let mut label: Vec<Option<usize>> = vec![None; t];
    let mut annotations = Vec::with_capacity(n);
    let mut cursor = 0;
    let mut prev_cut = 0;
    for (i, &len) in lengths.iter().enumerate() {
        cursor += cuts[i] - prev_cut;
        prev_cut = cuts[i];
        let row = rng.random_range(0..table.len());
        for slot in &mut label[cursor..cursor + len] {
            *slot = Some(row);
        }
        annotations.push(ActionAnnotation {
            start: (cursor + 1) as f64,
            end: (cursor + len) as f64,
            class_id: table.class_ids()[row],
        });
        cursor += len;
    }

    let (d_v, d_f) = (cfg.d_v, cfg.d_f);
    let mut frame = vec![0.0; t * d_f];
    let mut clean_snip = vec![0.0; t * d_v];
    for step in 0..t {
        let (f, v) = match label[step] {
            Some(row) => (&frame_sig[row], &snip_sig[row]),
            None => (&maps.frame_background, &maps.snippet_background),
        };
        frame[step * d_f..(step + 1) * d_f].copy_from_slice(f);
        clean_snip[step * d_v..(step + 1) * d_v].copy_from_slice(v);
    }
    let half = cfg.smooth.max(1) / 2;
    let mut snippet = vec![0.0; t * d_v];
    for step in 0..t {
        let lo = step.saturating_sub(half);
        let hi = (step + half).min(t - 1);
        let w = (hi - lo + 1) as f64;
        for j in 0..d_v {
            snippet[step * d_v + j] = (lo..=hi).map(|u| clean_snip[u * d_v + j]).sum::<f64>() / w;
        }
    }
    if sigma > 0.0 {
        for v in frame.iter_mut().chain(snippet.iter_mut()) {
            let z: f64 = StandardNormal.sample(rng);
            *v += sigma * z;
        }
    }
    let round = |v: Vec<f64>| v.into_iter().map(|x| x as f32 as f64).collect::<Vec<_>>();
    VideoFeatures::new(
        format!("{}_{index:05}", cfg.name),
        Tensor::matrix(t, d_v, round(snippet))?,
        Tensor::matrix(t, d_f, round(frame))?,
        annotations,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textbank::{Split, SyntheticTextEncoder};

    fn setup(classes: usize, s: usize) -> (Vocabulary, ClassEmbeddingTable) {
        let names: Vec<String> = (0..classes).map(|i| format!("class{i}")).collect();
        let vocab = Vocabulary::from_names(&names, Split::Super).unwrap();
        let enc = SyntheticTextEncoder::new(3, s);
        let rows: Vec<Vec<f64>> = names.iter().map(|n| enc.prototype(n)).collect();
        (vocab, ClassEmbeddingTable::from_rows(&rows).unwrap())
    }

    fn video(t: usize, anns: Vec<ActionAnnotation>) -> VideoFeatures {
        let snip = Tensor::matrix(t, 1, (0..t).map(|i| i as f64).collect()).unwrap();
        let frame = Tensor::matrix(t, 2, (0..2 * t).map(|i| -(i as f64)).collect()).unwrap();
        VideoFeatures::new("v", snip, frame, anns).unwrap()
    }

    fn ann(s: f64, e: f64) -> ActionAnnotation {
        ActionAnnotation { start: s, end: e, class_id: 0 }
    }

    #[test]
    fn annotation_bounds_enforced() {
        let snip = Tensor::zeros(&[10, 1]);
        let frame = Tensor::zeros(&[10, 1]);
        assert!(VideoFeatures::new("x", snip.clone(), frame.clone(), vec![ann(3.0, 3.0)]).is_err());
        assert!(VideoFeatures::new("x", snip.clone(), frame.clone(), vec![ann(0.5, 3.0)]).is_err());
        assert!(VideoFeatures::new("x", snip.clone(), frame.clone(), vec![ann(2.0, 11.0)]).is_err());
        assert!(VideoFeatures::new("x", snip, frame, vec![ann(1.0, 10.0)]).is_ok());
    }

    #[test]
    fn window_identity_and_padding() {
        let v = video(16, vec![ann(2.0, 5.0)]);
        let w = pad_or_window(&v, 16).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0], v);

        let v = video(8, vec![ann(2.0, 5.0)]);
        let w = pad_or_window(&v, 16).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].len(), 16);
        assert_eq!(w[0].valid_len, 8);
        assert_eq!(w[0].mask().iter().filter(|&&m| m).count(), 8);
        assert!(w[0].snippet.data()[8..].iter().all(|&x| x == 0.0));
        assert_eq!(w[0].annotations, v.annotations);
    }

    #[test]
    fn window_second_half_action_appears_once() {
        // T = 32, max_len = 16: windows start at 0, 12, 16
        let v = video(32, vec![ann(29.0, 31.0)]);
        let w = pad_or_window(&v, 16).unwrap();
        assert_eq!(w.iter().map(|x| x.offset).collect::<Vec<_>>(), vec![0, 12, 16]);
        let hits: Vec<_> = w.iter().filter(|x| !x.annotations.is_empty()).collect();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].offset, 16);
        assert_eq!(hits[0].annotations, vec![ann(13.0, 15.0)]);
    }

    #[test]
    fn blob_round_trip_is_bit_exact() {
        let (vocab, table) = setup(4, 8);
        let cfg = SynthConfig { n_videos: 2, t: 64, d_v: 5, d_f: 6, max_len: 12, ..Default::default() };
        let ds = synth_generate(&cfg, &vocab, &table).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = write_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back.videos, ds.videos);
        assert_eq!(back.vocab, vocab);
    }

    #[test]
    fn empty_manifest_loads() {
        let (vocab, _) = setup(2, 4);
        let ds = Dataset { name: "empty".into(), role: None, vocab, videos: vec![] };
        let dir = tempfile::tempdir().unwrap();
        let path = write_dataset(&ds, dir.path()).unwrap();
        assert!(load_dataset(&path).unwrap().videos.is_empty());
    }

    #[test]
    fn corrupted_blob_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ovft");
        std::fs::write(&p, b"OVFX\x01\0\0\0").unwrap();
        assert!(matches!(load_blob(&p), Err(Error::Format { .. })));
        std::fs::write(&p, b"OVFT\x01\0\0\0\x04\0\0\0\x01\0\0\0\x01\0\0\0").unwrap();
        let err = load_blob(&p).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn generator_counts_and_determinism() {
        let (vocab, table) = setup(4, 8);
        let cfg = SynthConfig { n_videos: 5, t: 64, actions_per_video: 3, max_len: 12, ..Default::default() };
        let a = synth_generate(&cfg, &vocab, &table).unwrap();
        let b = synth_generate(&cfg, &vocab, &table).unwrap();
        assert_eq!(a.annotation_count(), 15);
        for (x, y) in a.videos.iter().zip(&b.videos) {
            assert_eq!(x.blob_bytes(), y.blob_bytes());
        }
        for v in &a.videos {
            v.validate_annotations(Some(&vocab)).unwrap();
        }
    }

    #[test]
    fn noiseless_frames_equal_mapped_embedding() {
        let (vocab, table) = setup(3, 8);
        let cfg = SynthConfig { n_videos: 2, t: 48, snr: f64::INFINITY, max_len: 12, ..Default::default() };
        let ds = synth_generate(&cfg, &vocab, &table).unwrap();
        let maps = FeatureMaps::new(&cfg, 8);
        for v in &ds.videos {
            for a in &v.annotations {
                let expect = maps.frame_signal(table.row(a.class_id));
                for pos in a.start as usize..=a.end as usize {
                    let row = v.frame.row(pos - 1);
                    for (x, y) in row.iter().zip(&expect) {
                        assert_eq!(*x, *y as f32 as f64);
                    }
                }
            }
        }
    }

    #[test]
    fn infeasible_packing_is_config_error() {
        let (vocab, table) = setup(2, 4);
        let cfg = SynthConfig { t: 20, actions_per_video: 3, max_len: 10, ..Default::default() };
        assert!(matches!(synth_generate(&cfg, &vocab, &table), Err(Error::Config(_))));
        let cfg = SynthConfig { min_len: 1, ..Default::default() };
        assert!(matches!(synth_generate(&cfg, &vocab, &table), Err(Error::Config(_))));
    }
}
