//! The detector: input projections, a multi-scale encoder whose levels each
//! hold a modality mixer, and shared classification/regression heads.
//!
//! Per level, the snippet stream self-attends, the frame stream cross-attends
//! over the class-embedding table, and the two results are summed and passed
//! through a residual FFN. The next level downsamples the fused output (snippet
//! side) and the guided frame features (frame side) by two.

mod checkpoint;

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datasets::VideoFeatures;
use crate::error::{Error, Result};
use crate::tensor::{Padding, Tape, Tensor, Var, LAYER_NORM_EPS};
use crate::textbank::ClassEmbeddingTable;

pub use checkpoint::{Checkpoint, StageTag};

/// Prior probability used to initialize the classification bias.
pub const PRIOR_PROB: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_v: usize,
    pub d_f: usize,
    /// Model width `D`.
    pub d_model: usize,
    /// Frame width after projection; must equal `d_model`.
    pub d_hat: usize,
    pub heads: usize,
    pub levels: usize,
    /// Text-embedding width `s`.
    pub text_dim: usize,
    pub ffn_mult: usize,
    pub head_layers: usize,
    /// Initial value of the learnable cosine temperature.
    pub temperature: f64,
    /// Skip cross-attention: text enters only through the classification head.
    pub late_fusion_only: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_v: 32,
            d_f: 32,
            d_model: 16,
            d_hat: 16,
            heads: 2,
            levels: 3,
            text_dim: 512,
            ffn_mult: 4,
            head_layers: 2,
            temperature: 10.0,
            late_fusion_only: false,
        }
    }
}

const CONFIG_KEYS: [&str; 11] = [
    "d_v",
    "d_f",
    "D",
    "D_hat",
    "H",
    "M",
    "s",
    "ffn_mult",
    "head_layers",
    "temperature",
    "late_fusion_only",
];

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let c = |ok: bool, msg: String| if ok { Ok(()) } else { Err(Error::Config(msg)) };
        c(self.heads > 0 && self.d_model % self.heads == 0,
            format!("D={} must be divisible by H={}", self.d_model, self.heads))?;
        c(self.d_hat == self.d_model,
            format!("D_hat={} must equal D={} so the two streams can be summed", self.d_hat, self.d_model))?;
        c(self.levels >= 1, "M must be >= 1".into())?;
        c(self.temperature > 0.0, format!("temperature must be > 0, got {}", self.temperature))?;
        c(self.d_v > 0 && self.d_f > 0 && self.text_dim > 0 && self.ffn_mult > 0,
            "input, text and FFN widths must be positive".into())?;
        c(self.head_layers >= 1, "head_layers must be >= 1".into())
    }

    /// Shortest sequence the pyramid supports.
    pub fn min_len(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn level_lengths(&self, t: usize) -> Vec<usize> {
        let mut out = vec![t];
        for _ in 1..self.levels {
            let last = *out.last().unwrap();
            out.push(last.div_ceil(2));
        }
        out
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let v = [
            self.d_v.to_string(),
            self.d_f.to_string(),
            self.d_model.to_string(),
            self.d_hat.to_string(),
            self.heads.to_string(),
            self.levels.to_string(),
            self.text_dim.to_string(),
            self.ffn_mult.to_string(),
            self.head_layers.to_string(),
            format!("{:?}", self.temperature),
            self.late_fusion_only.to_string(),
        ];
        CONFIG_KEYS.iter().copied().zip(v).collect()
    }

    /// Sets one key; returns `false` if the key is not a model key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
        }
        match key {
            "d_v" => self.d_v = num(key, value)?,
            "d_f" => self.d_f = num(key, value)?,
            "D" => self.d_model = num(key, value)?,
            "D_hat" => self.d_hat = num(key, value)?,
            "H" => self.heads = num(key, value)?,
            "M" => self.levels = num(key, value)?,
            "s" => self.text_dim = num(key, value)?,
            "ffn_mult" => self.ffn_mult = num(key, value)?,
            "head_layers" => self.head_layers = num(key, value)?,
            "temperature" => self.temperature = num(key, value)?,
            "late_fusion_only" => self.late_fusion_only = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn keys() -> &'static [&'static str] {
        &CONFIG_KEYS
    }

    /// Lists `key: expected X, found Y` for every differing field.
    pub fn mismatches(&self, found: &ModelConfig) -> Vec<String> {
        self.to_pairs()
            .into_iter()
            .zip(found.to_pairs())
            .filter(|((_, a), (_, b))| a != b)
            .map(|((k, a), (_, b))| format!("{k}: expected {a}, found {b}"))
            .collect()
    }
}

/// Named parameter tensors. Names starting with `enc.` belong to the encoder
/// (projections included), `dec.` to the heads.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Rc<Tensor>>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-bound..bound)).collect(),
    )
    .unwrap()
}

impl ModelParams {
    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        ModelParams {
            tensors: tensors.into_iter().map(|(k, v)| (k, Rc::new(v))).collect(),
        }
    }

    /// Fan-in uniform weights, unit norm gains, zero biases, and a
    /// classification bias matching [`PRIOR_PROB`].
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = BTreeMap::new();
        let d = cfg.d_model;
        let dk = cfg.head_dim();
        let s = cfg.text_dim;
        let hidden = d * cfg.ffn_mult;
        let mut put = |name: String, value: Tensor| {
            t.insert(name, value);
        };
        for (stream, d_in) in [("v", cfg.d_v), ("f", cfg.d_f)] {
            put(format!("enc.proj_{stream}.0.w"), uniform(&mut rng, &[1, d_in, d], d_in));
            put(format!("enc.proj_{stream}.0.b"), Tensor::zeros(&[d]));
            put(format!("enc.proj_{stream}.1.w"), uniform(&mut rng, &[1, d, d], d));
            put(format!("enc.proj_{stream}.1.b"), Tensor::zeros(&[d]));
        }
        for m in 0..cfg.levels {
            let p = format!("enc.l{m}");
            if m > 0 {
                for stream in ["v", "f"] {
                    put(format!("{p}.down_{stream}.dw"), uniform(&mut rng, &[3, d], 3));
                    put(format!("{p}.down_{stream}.pw"), uniform(&mut rng, &[1, d, d], d));
                    put(format!("{p}.down_{stream}.b"), Tensor::zeros(&[d]));
                }
            }
            for block in ["sa", "ca", "ffn"] {
                put(format!("{p}.{block}.ln.gain"), Tensor::full(&[d], 1.0));
                put(format!("{p}.{block}.ln.bias"), Tensor::zeros(&[d]));
            }
            for h in 0..cfg.heads {
                put(format!("{p}.sa.q{h}"), uniform(&mut rng, &[d, dk], d));
                put(format!("{p}.sa.k{h}"), uniform(&mut rng, &[d, dk], d));
                put(format!("{p}.sa.v{h}"), uniform(&mut rng, &[d, dk], d));
                put(format!("{p}.ca.q{h}"), uniform(&mut rng, &[d, dk], d));
                put(format!("{p}.ca.k{h}"), uniform(&mut rng, &[s, dk], s));
                put(format!("{p}.ca.v{h}"), uniform(&mut rng, &[s, dk], s));
            }
            put(format!("{p}.sa.o"), uniform(&mut rng, &[d, d], d));
            put(format!("{p}.ca.o"), uniform(&mut rng, &[d, d], d));
            put(format!("{p}.ffn.w1"), uniform(&mut rng, &[d, hidden], d));
            put(format!("{p}.ffn.b1"), Tensor::zeros(&[hidden]));
            put(format!("{p}.ffn.w2"), uniform(&mut rng, &[hidden, d], hidden));
            put(format!("{p}.ffn.b2"), Tensor::zeros(&[d]));
        }
        put("dec.ln.gain".into(), Tensor::full(&[d], 1.0));
        put("dec.ln.bias".into(), Tensor::zeros(&[d]));
        for head in ["cls", "reg"] {
            for i in 0..cfg.head_layers {
                put(format!("dec.{head}.conv{i}.w"), uniform(&mut rng, &[3, d, d], 3 * d));
                put(format!("dec.{head}.conv{i}.b"), Tensor::zeros(&[d]));
            }
        }
        put("dec.cls.wl".into(), uniform(&mut rng, &[s, d], s));
        put("dec.cls.tau".into(), Tensor::scalar(cfg.temperature));
        put(
            "dec.cls.bias".into(),
            Tensor::scalar(-((1.0 - PRIOR_PROB) / PRIOR_PROB).ln()),
        );
        put("dec.reg.out.w".into(), uniform(&mut rng, &[3, d, 2], 3 * d));
        put("dec.reg.out.b".into(), Tensor::zeros(&[2]));
        Ok(Self::from_map(t).to_f32_precision())
    }

    /// Owned copy that can cross threads.
    pub fn to_map(&self) -> BTreeMap<String, Tensor> {
        self.tensors.iter().map(|(k, v)| (k.clone(), (**v).clone())).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name).map(|t| t.as_ref())
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name).map(Rc::make_mut)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), Rc::new(value));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    pub fn to_f32_precision(&self) -> Self {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Rc::new(v.to_f32_precision())))
                .collect(),
        }
    }

    /// Records every tensor on `tape`; those for which `trainable` returns true
    /// become gradient-tracked leaves.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: impl Fn(&str) -> bool) -> Bound<'t> {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| {
                    let var = if trainable(k) {
                        tape.param_rc(Rc::clone(v))
                    } else {
                        tape.constant_rc(Rc::clone(v))
                    };
                    (k.clone(), var)
                })
                .collect(),
        }
    }
}

/// Parameters recorded on one tape.
pub struct Bound<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var<'t>)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Replaces the variable bound to `name`.
    pub fn set(&mut self, name: &str, var: Var<'t>) {
        self.vars.insert(name.to_string(), var);
    }
}

/// Finite-difference check of every parameter gradient of `loss`; returns the
/// largest `|analytic − numeric| / max(1, |analytic|)` over all scalars.
pub fn params_grad_check<F>(params: &ModelParams, h: f64, loss: F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &Bound<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let bound = params.bind(&tape, |_| true);
    let out = loss(&tape, &bound)?;
    let grads = tape.backward(out)?;
    let mut worst: f64 = 0.0;
    for (name, value) in params.iter() {
        let analytic = grads.wrt(bound.get(name)?);
        for i in 0..value.numel() {
            let eval = |delta: f64| -> Result<f64> {
                let tape = Tape::new();
                let mut b = params.bind(&tape, |_| false);
                let mut probe = value.clone();
                probe.data_mut()[i] += delta;
                b.set(name, tape.constant(probe));
                Ok(loss(&tape, &b)?.value().item())
            };
            let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
            let a = analytic.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

/// Multi-scale encoder output; level `m` has stride `2^m` (0-based `m`).
pub struct PyramidFeatures<'t> {
    pub levels: Vec<Var<'t>>,
    pub masks: Vec<Vec<bool>>,
}

impl PyramidFeatures<'_> {
    pub fn lengths(&self) -> Vec<usize> {
        self.masks.iter().map(Vec::len).collect()
    }
}

/// Attention output together with the per-head weight matrices.
pub struct Attended<'t> {
    pub out: Var<'t>,
    pub weights: Vec<Var<'t>>,
}

pub struct MixerOutput<'t> {
    /// Fused level features `Z`.
    pub fused: Var<'t>,
    /// Guided frame features, `None` in late-fusion mode.
    pub guided: Option<Var<'t>>,
    pub self_attention: Attended<'t>,
    pub cross_attention: Option<Attended<'t>>,
}

pub struct LevelOutput<'t> {
    pub logits: Var<'t>,
    pub offsets: Var<'t>,
    pub mask: Vec<bool>,
    pub stride: usize,
}

pub struct ForwardOutput<'t> {
    pub levels: Vec<LevelOutput<'t>>,
}

fn mask_weights(mask: &[bool]) -> Rc<Vec<f64>> {
    Rc::new(mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect())
}

fn apply_mask<'t>(x: Var<'t>, mask: &[bool]) -> Result<Var<'t>> {
    if mask.iter().all(|&m| m) {
        Ok(x)
    } else {
        x.row_scale(mask_weights(mask))
    }
}

/// Fixed sinusoidal encodings, `T×D`.
pub fn positional_encoding(t: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; t * d];
    for pos in 0..t {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::matrix(t, d, data).unwrap()
}

pub fn downsample_mask(mask: &[bool]) -> Vec<bool> {
    mask.iter().step_by(2).copied().collect()
}

/// The network as a set of pure functions of `(inputs, bound parameters)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Model { cfg })
    }

    fn conv_stack<'t>(
        &self,
        b: &Bound<'t>,
        x: Var<'t>,
        prefix: &str,
        mask: &[bool],
        relu_last: bool,
    ) -> Result<Var<'t>> {
        let mut h = x;
        for i in 0..self.cfg.head_layers {
            h = h
                .conv1d(&b.get(&format!("{prefix}.conv{i}.w"))?, 1, Padding::Same)?
                .add_bias(&b.get(&format!("{prefix}.conv{i}.b"))?)?;
            if relu_last || i + 1 < self.cfg.head_layers {
                h = h.relu();
            }
            h = apply_mask(h, mask)?;
        }
        Ok(h)
    }

    /// Two 1×1 conv + ReLU layers per stream.
    pub fn project_inputs<'t>(
        &self,
        tape: &'t Tape,
        b: &Bound<'t>,
        video: &VideoFeatures,
    ) -> Result<(Var<'t>, Var<'t>)> {
        if video.snippet.cols() != self.cfg.d_v || video.frame.cols() != self.cfg.d_f {
            return Err(Error::Config(format!(
                "video {} has widths (d_v={}, d_f={}), model expects ({}, {})",
                video.id,
                video.snippet.cols(),
                video.frame.cols(),
                self.cfg.d_v,
                self.cfg.d_f
            )));
        }
        let mask = video.mask();
        let project = |input: &Tensor, stream: &str| -> Result<Var<'t>> {
            let mut h = tape.constant(input.clone());
            for layer in 0..2 {
                h = h
                    .conv1d(&b.get(&format!("enc.proj_{stream}.{layer}.w"))?, 1, Padding::Same)?
                    .add_bias(&b.get(&format!("enc.proj_{stream}.{layer}.b"))?)?
                    .relu();
            }
            apply_mask(h, &mask)
        };
        Ok((project(&video.snippet, "v")?, project(&video.frame, "f")?))
    }

    fn attend<'t>(
        &self,
        b: &Bound<'t>,
        prefix: &str,
        queries: Var<'t>,
        keys: Var<'t>,
        key_mask: Option<&[bool]>,
    ) -> Result<Attended<'t>> {
        let scale = 1.0 / (self.cfg.head_dim() as f64).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.heads);
        let mut weights = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let q = queries.matmul(&b.get(&format!("{prefix}.q{h}"))?)?;
            let k = keys.matmul(&b.get(&format!("{prefix}.k{h}"))?)?;
            let v = keys.matmul(&b.get(&format!("{prefix}.v{h}"))?)?;
            let a = q.matmul_t(&k)?.scale(scale).softmax_rows_masked(key_mask)?;
            heads.push(a.matmul(&v)?);
            weights.push(a);
        }
        let out = Var::concat_cols(&heads)?.matmul(&b.get(&format!("{prefix}.o"))?)?;
        Ok(Attended { out, weights })
    }

    fn norm<'t>(&self, b: &Bound<'t>, x: Var<'t>, prefix: &str) -> Result<Var<'t>> {
        x.layer_norm(
            &b.get(&format!("{prefix}.gain"))?,
            &b.get(&format!("{prefix}.bias"))?,
            LAYER_NORM_EPS,
        )
    }

    /// Pre-norm multi-head self-attention with a residual connection.
    pub fn self_attend<'t>(
        &self,
        b: &Bound<'t>,
        level: usize,
        z_v: Var<'t>,
        mask: &[bool],
    ) -> Result<Attended<'t>> {
        let p = format!("enc.l{level}.sa");
        let normed = self.norm(b, z_v, &format!("{p}.ln"))?;
        let key_mask = (!mask.iter().all(|&m| m)).then_some(mask);
        let att = self.attend(b, &p, normed, normed, key_mask)?;
        Ok(Attended {
            out: apply_mask(z_v.add(&att.out)?, mask)?,
            weights: att.weights,
        })
    }

    /// Pre-norm multi-head cross-attention from frame features onto the class
    /// embeddings, with a residual connection.
    pub fn cross_attend<'t>(
        &self,
        b: &Bound<'t>,
        level: usize,
        z_f: Var<'t>,
        z_l: Var<'t>,
        mask: &[bool],
    ) -> Result<Attended<'t>> {
        let shape = z_l.shape();
        if shape[0] == 0 {
            return Err(Error::Usage("cross-attention needs at least one class".into()));
        }
        if shape[1] != self.cfg.text_dim {
            return Err(Error::Config(format!(
                "class table width {} differs from model s={}",
                shape[1], self.cfg.text_dim
            )));
        }
        let p = format!("enc.l{level}.ca");
        let normed = self.norm(b, z_f, &format!("{p}.ln"))?;
        let att = self.attend(b, &p, normed, z_l, None)?;
        Ok(Attended {
            out: apply_mask(z_f.add(&att.out)?, mask)?,
            weights: att.weights,
        })
    }

    /// `Z = U + FFN(norm(U))` with `U = Z_F' + Z_V'`, or `U = Z_V'` in late-fusion mode.
    pub fn mixer_level<'t>(
        &self,
        b: &Bound<'t>,
        level: usize,
        z_v: Var<'t>,
        z_f: Option<Var<'t>>,
        z_l: Var<'t>,
        mask: &[bool],
    ) -> Result<MixerOutput<'t>> {
        let sa = self.self_attend(b, level, z_v, mask)?;
        let (fused_in, ca) = if self.cfg.late_fusion_only {
            (sa.out, None)
        } else {
            let z_f = z_f.ok_or_else(|| Error::Usage("mixer needs the frame stream".into()))?;
            let ca = self.cross_attend(b, level, z_f, z_l, mask)?;
            (ca.out.add(&sa.out)?, Some(ca))
        };
        let p = format!("enc.l{level}.ffn");
        let h = self
            .norm(b, fused_in, &format!("{p}.ln"))?
            .matmul(&b.get(&format!("{p}.w1"))?)?
            .add_bias(&b.get(&format!("{p}.b1"))?)?
            .relu()
            .matmul(&b.get(&format!("{p}.w2"))?)?
            .add_bias(&b.get(&format!("{p}.b2"))?)?;
        let fused = apply_mask(fused_in.add(&h)?, mask)?;
        Ok(MixerOutput {
            fused,
            guided: ca.as_ref().map(|c| c.out),
            self_attention: sa,
            cross_attention: ca,
        })
    }

    fn downsample<'t>(
        &self,
        b: &Bound<'t>,
        level: usize,
        stream: &str,
        x: Var<'t>,
        mask: &[bool],
    ) -> Result<Var<'t>> {
        let p = format!("enc.l{level}.down_{stream}");
        let y = x
            .depthwise_conv1d(&b.get(&format!("{p}.dw"))?, 2)?
            .conv1d(&b.get(&format!("{p}.pw"))?, 1, Padding::Same)?
            .add_bias(&b.get(&format!("{p}.b"))?)?;
        apply_mask(y, mask)
    }

    /// Runs the pyramid; `trace` receives every level's mixer output.
    pub fn encode_traced<'t>(
        &self,
        tape: &'t Tape,
        b: &Bound<'t>,
        z_v: Var<'t>,
        z_f: Var<'t>,
        z_l: Var<'t>,
        mask: &[bool],
        mut trace: Option<&mut Vec<MixerOutput<'t>>>,
    ) -> Result<PyramidFeatures<'t>> {
        let t = mask.len();
        if t < self.cfg.min_len() {
            return Err(Error::Config(format!(
                "T={t} is shorter than 2^(M-1)={} for M={}",
                self.cfg.min_len(),
                self.cfg.levels
            )));
        }
        let pe = tape.constant(positional_encoding(t, self.cfg.d_model));
        let mut cur_v = apply_mask(z_v.add(&pe)?, mask)?;
        let mut cur_f = if self.cfg.late_fusion_only {
            None
        } else {
            Some(apply_mask(z_f.add(&pe)?, mask)?)
        };
        let mut cur_mask = mask.to_vec();
        let mut levels = Vec::with_capacity(self.cfg.levels);
        let mut masks = Vec::with_capacity(self.cfg.levels);
        for m in 0..self.cfg.levels {
            if m > 0 {
                cur_mask = downsample_mask(&cur_mask);
                cur_v = self.downsample(b, m, "v", cur_v, &cur_mask)?;
                cur_f = match cur_f {
                    Some(f) => Some(self.downsample(b, m, "f", f, &cur_mask)?),
                    None => None,
                };
            }
            let out = self.mixer_level(b, m, cur_v, cur_f, z_l, &cur_mask)?;
            levels.push(out.fused);
            masks.push(cur_mask.clone());
            cur_v = out.fused;
            cur_f = out.guided;
            if let Some(tr) = trace.as_deref_mut() {
                tr.push(out);
            }
        }
        Ok(PyramidFeatures { levels, masks })
    }

    pub fn encode<'t>(
        &self,
        tape: &'t Tape,
        b: &Bound<'t>,
        z_v: Var<'t>,
        z_f: Var<'t>,
        z_l: Var<'t>,
        mask: &[bool],
    ) -> Result<PyramidFeatures<'t>> {
        self.encode_traced(tape, b, z_v, z_f, z_l, mask, None)
    }

    fn head_input<'t>(&self, b: &Bound<'t>, z: Var<'t>, mask: &[bool]) -> Result<Var<'t>> {
        apply_mask(self.norm(b, z, "dec.ln")?, mask)
    }

    /// Cosine-similarity logits against the active class table, one
    /// `T_m×A` matrix per level.
    pub fn classify<'t>(
        &self,
        tape: &'t Tape,
        b: &Bound<'t>,
        pyramid: &PyramidFeatures<'t>,
        table: &ClassEmbeddingTable,
    ) -> Result<Vec<Var<'t>>> {
        let z_l = tape.constant(table.matrix().clone());
        self.classify_with(b, pyramid, z_l)
    }

    fn classify_with<'t>(
        &self,
        b: &Bound<'t>,
        pyramid: &PyramidFeatures<'t>,
        z_l: Var<'t>,
    ) -> Result<Vec<Var<'t>>> {
        let text = z_l.matmul(&b.get("dec.cls.wl")?)?.l2_normalize_rows()?;
        let tau = b.get("dec.cls.tau")?;
        let bias = b.get("dec.cls.bias")?;
        pyramid
            .levels
            .iter()
            .zip(&pyramid.masks)
            .map(|(z, mask)| {
                let x = self.head_input(b, *z, mask)?;
                let feat = self.conv_stack(b, x, "dec.cls", mask, false)?;
                feat.l2_normalize_rows()?
                    .matmul_t(&text)?
                    .scale_by(&tau)?
                    .add_scalar(&bias)
            })
            .collect()
    }

    /// Strictly positive `(d_start, d_end)` offsets in level-stride units.
    pub fn regress<'t>(&self, b: &Bound<'t>, pyramid: &PyramidFeatures<'t>) -> Result<Vec<Var<'t>>> {
        pyramid
            .levels
            .iter()
            .zip(&pyramid.masks)
            .map(|(z, mask)| {
                let x = self.head_input(b, *z, mask)?;
                let h = self.conv_stack(b, x, "dec.reg", mask, true)?;
                Ok(h.conv1d(&b.get("dec.reg.out.w")?, 1, Padding::Same)?
                    .add_bias(&b.get("dec.reg.out.b")?)?
                    .softplus())
            })
            .collect()
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        b: &Bound<'t>,
        video: &VideoFeatures,
        table: &ClassEmbeddingTable,
    ) -> Result<ForwardOutput<'t>> {
        let (z_v, z_f) = self.project_inputs(tape, b, video)?;
        let z_l = tape.constant(table.matrix().clone());
        let pyramid = self.encode(tape, b, z_v, z_f, z_l, &video.mask())?;
        let logits = self.classify_with(b, &pyramid, z_l)?;
        let offsets = self.regress(b, &pyramid)?;
        Ok(ForwardOutput {
            levels: logits
                .into_iter()
                .zip(offsets)
                .zip(pyramid.masks)
                .enumerate()
                .map(|(m, ((logits, offsets), mask))| LevelOutput {
                    logits,
                    offsets,
                    mask,
                    stride: 1 << m,
                })
                .collect(),
        })
    }
}

/// Head outputs copied off the tape: per level `(logits T_m×A, offsets T_m×2, mask)`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutputs {
    pub levels: Vec<HeadLevel>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadLevel {
    pub logits: Tensor,
    pub offsets: Tensor,
    pub mask: Vec<bool>,
    pub stride: usize,
}

/// Forward pass without gradient tracking.
pub fn predict_heads(
    model: &Model,
    params: &ModelParams,
    video: &VideoFeatures,
    table: &ClassEmbeddingTable,
) -> Result<HeadOutputs> {
    let tape = Tape::new();
    let b = params.bind(&tape, |_| false);
    let out = model.forward(&tape, &b, video, table)?;
    Ok(HeadOutputs {
        levels: out
            .levels
            .into_iter()
            .map(|l| HeadLevel {
                logits: (*l.logits.value()).clone(),
                offsets: (*l.offsets.value()).clone(),
                mask: l.mask,
                stride: l.stride,
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests;
