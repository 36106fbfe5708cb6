//! Encoder, transform decoder and cosine classifier heads.
//!
//! Parameter names:
//! - `enc.{i}.weight` / `enc.{i}.bias` for conv stage `i`
//! - `dec.0.*` (hidden) and `dec.1.*` (output) for the transform decoder
//! - `cls.base`, `cls.novel` for classifier rows and `cls.scale` for the
//!   shared cosine temperature

pub mod checkpoint;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FlatError, Result};
use crate::seed;
use crate::tensor::tape::{ParamSet, Tape, Var};
use crate::tensor::{l2_normalize_slice, Scalar, Tensor};
use crate::transforms::TARGET_DIM;

pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint, CheckpointMeta};

pub const BASE_HEAD: &str = "cls.base";
pub const NOVEL_HEAD: &str = "cls.novel";
pub const SCALE: &str = "cls.scale";
const MIN_SCALE: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub input_channels: usize,
    pub input_size: usize,
    pub stages: Vec<Stage>,
    pub feature_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_channels: 3,
            input_size: 32,
            stages: vec![Stage { filters: 64, kernel: 3, stride: 1 }; 4],
            feature_dim: 64,
        }
    }
}

impl EncoderConfig {
    /// Conv stages of `filters` each, 3×3, stride 1.
    pub fn uniform(input_channels: usize, input_size: usize, depth: usize, filters: usize) -> Self {
        EncoderConfig {
            input_channels,
            input_size,
            stages: vec![Stage { filters, kernel: 3, stride: 1 }; depth],
            feature_dim: filters,
        }
    }

    /// Spatial size after every stage (conv with "same" padding, then 2×2 pool).
    pub fn spatial_sizes(&self) -> Result<Vec<usize>> {
        let mut size = self.input_size;
        let mut sizes = Vec::with_capacity(self.stages.len());
        for (i, st) in self.stages.iter().enumerate() {
            if st.kernel == 0 || st.stride == 0 || st.filters == 0 {
                return Err(FlatError::config(format!("encoder.stages[{i}]"), "filters, kernel and stride must be positive"));
            }
            let pad = st.kernel / 2;
            if st.kernel > size + 2 * pad {
                return Err(FlatError::config(format!("encoder.stages[{i}]"), format!("kernel {} exceeds map size {size}", st.kernel)));
            }
            size = (size + 2 * pad - st.kernel) / st.stride + 1;
            if size < 2 {
                return Err(FlatError::config(format!("encoder.stages[{i}]"), format!("map shrinks to {size} before pooling")));
            }
            size /= 2;
            sizes.push(size);
        }
        Ok(sizes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 {
            return Err(FlatError::config("encoder.input_channels", "must be positive"));
        }
        if self.stages.is_empty() {
            return Err(FlatError::config("encoder.stages", "at least one stage is required"));
        }
        if self.feature_dim == 0 {
            return Err(FlatError::config("encoder.feature_dim", "must be positive"));
        }
        let last = self.stages.last().expect("non-empty").filters;
        if last != self.feature_dim {
            return Err(FlatError::config(
                "encoder.feature_dim",
                format!("global pooling yields {last} features but feature_dim is {}", self.feature_dim),
            ));
        }
        self.spatial_sizes().map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Initial cosine temperature.
    pub scale_init: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { encoder: EncoderConfig::default(), scale_init: 10.0 }
    }
}

/// Which classifier rows produce logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Base,
    Novel,
    /// Base rows followed by novel rows.
    Joint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlatModel<T: Scalar = f32> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
}

fn kaiming<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect();
    Tensor::new(shape, data).expect("shape matches").with_grad()
}

fn random_unit<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

impl<T: Scalar> FlatModel<T> {
    /// Fresh model with `n_base` base classes. Conv and hidden weights are
    /// Kaiming-uniform, biases zero, the decoder output layer zero, and all
    /// base rows start equal so the first logits are uniform.
    pub fn new(config: ModelConfig, n_base: usize, seed: u64) -> Result<Self> {
        config.encoder.validate()?;
        if n_base < 2 {
            return Err(FlatError::config("n_base", format!("need at least 2 base classes, got {n_base}")));
        }
        if !(config.scale_init > 0.0) {
            return Err(FlatError::config("model.scale_init", "must be positive"));
        }
        let mut rng = seed::stream(seed, &[seed::tag::INIT]);
        let mut params = ParamSet::default();
        let mut channels = config.encoder.input_channels;
        for (i, st) in config.encoder.stages.iter().enumerate() {
            let fan_in = channels * st.kernel * st.kernel;
            params.insert(&format!("enc.{i}.weight"), kaiming(&mut rng, &[st.filters, channels, st.kernel, st.kernel], fan_in));
            params.insert(&format!("enc.{i}.bias"), Tensor::zeros(&[st.filters]).with_grad());
            channels = st.filters;
        }
        let d = config.encoder.feature_dim;
        params.insert("dec.0.weight", kaiming(&mut rng, &[d, 2 * d], 2 * d));
        params.insert("dec.0.bias", Tensor::zeros(&[d]).with_grad());
        params.insert("dec.1.weight", Tensor::zeros(&[TARGET_DIM, d]).with_grad());
        params.insert("dec.1.bias", Tensor::zeros(&[TARGET_DIM]).with_grad());
        let row: Vec<T> = random_unit(&mut rng, d).into_iter().map(T::of).collect();
        let base: Vec<T> = (0..n_base).flat_map(|_| row.iter().copied()).collect();
        params.insert(BASE_HEAD, Tensor::new(&[n_base, d], base)?.with_grad());
        params.insert(SCALE, Tensor::scalar(T::of(config.scale_init as f64)).with_grad());
        Ok(FlatModel { config, params })
    }

    pub fn feature_dim(&self) -> usize {
        self.config.encoder.feature_dim
    }

    pub fn head_rows(&self, name: &str) -> Option<usize> {
        self.params.by_name(name).map(|t| t.shape()[0])
    }

    pub fn n_base(&self) -> Option<usize> {
        self.head_rows(BASE_HEAD)
    }

    pub fn n_novel(&self) -> Option<usize> {
        self.head_rows(NOVEL_HEAD)
    }

    pub fn scale(&self) -> T {
        self.params.by_name(SCALE).expect("scale exists").item()
    }

    pub fn encoder_param_names(&self) -> Vec<String> {
        self.params.names().into_iter().filter(|n| n.starts_with("enc.")).collect()
    }

    pub fn decoder_param_names(&self) -> Vec<String> {
        self.params.names().into_iter().filter(|n| n.starts_with("dec.")).collect()
    }

    pub fn set_requires_grad(&mut self, names: &[String], on: bool) {
        for n in names {
            if let Some(t) = self.params.by_name_mut(n) {
                t.requires_grad = on;
            }
        }
    }

    /// Conv stages, ReLU, 2×2 max-pool, then global average pooling.
    pub fn encode(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let enc = &self.config.encoder;
        let s = enc.input_size;
        let expect = [enc.input_channels, s, s];
        if tape.shape(x).len() != 4 || tape.shape(x)[1..] != expect {
            return Err(FlatError::Dimension(format!(
                "encoder expects Bx{}x{}x{} input, got {:?}",
                expect[0],
                expect[1],
                expect[2],
                tape.shape(x)
            )));
        }
        let mut h = x;
        for (i, st) in enc.stages.iter().enumerate() {
            let w = tape.param_by_name(&self.params, &format!("enc.{i}.weight"))?;
            let b = tape.param_by_name(&self.params, &format!("enc.{i}.bias"))?;
            h = tape.conv2d(h, w, st.stride, st.kernel / 2)?;
            h = tape.add_channel_bias(h, b)?;
            h = tape.relu(h);
            h = tape.maxpool2(h)?;
        }
        tape.global_avg_pool(h)
    }

    /// Predicts normalized corner offsets from `[f_orig, f_trans]`.
    pub fn decode_transform(&self, tape: &mut Tape<T>, f_orig: Var, f_trans: Var) -> Result<Var> {
        if tape.shape(f_orig) != tape.shape(f_trans) {
            return Err(FlatError::Dimension(format!(
                "feature batches differ: {:?} vs {:?}",
                tape.shape(f_orig),
                tape.shape(f_trans)
            )));
        }
        let cat = tape.concat(f_orig, f_trans)?;
        let w0 = tape.param_by_name(&self.params, "dec.0.weight")?;
        let b0 = tape.param_by_name(&self.params, "dec.0.bias")?;
        let w1 = tape.param_by_name(&self.params, "dec.1.weight")?;
        let b1 = tape.param_by_name(&self.params, "dec.1.bias")?;
        let h = tape.linear(cat, w0, Some(b0))?;
        let h = tape.relu(h);
        tape.linear(h, w1, Some(b1))
    }

    fn head_logits(&self, tape: &mut Tape<T>, fnorm: Var, s: Var, name: &str) -> Result<Var> {
        let w = tape.param_by_name(&self.params, name).map_err(|_| {
            FlatError::State(format!("classifier head `{name}` does not exist"))
        })?;
        let wn = tape.normalize_rows(w);
        let cos = tape.matmul_nt(fnorm, wn)?;
        tape.scale_by(cos, s)
    }

    /// Scaled cosine logits of `features` against the requested rows.
    pub fn classify(&self, tape: &mut Tape<T>, features: Var, head: Head) -> Result<Var> {
        let d = self.feature_dim();
        if tape.shape(features).len() != 2 || tape.shape(features)[1] != d {
            return Err(FlatError::Dimension(format!(
                "classifier expects Bx{d} features, got {:?}",
                tape.shape(features)
            )));
        }
        let required: &[&str] = match head {
            Head::Base => &[BASE_HEAD],
            Head::Novel => &[NOVEL_HEAD],
            Head::Joint => &[BASE_HEAD, NOVEL_HEAD],
        };
        for name in required {
            if self.params.id(name).is_none() {
                return Err(FlatError::State(format!("{head:?} logits need head `{name}`, which does not exist")));
            }
        }
        let fnorm = tape.normalize_rows(features);
        let s = tape.param_by_name(&self.params, SCALE)?;
        match head {
            Head::Base => self.head_logits(tape, fnorm, s, BASE_HEAD),
            Head::Novel => self.head_logits(tape, fnorm, s, NOVEL_HEAD),
            Head::Joint => {
                let b = self.head_logits(tape, fnorm, s, BASE_HEAD)?;
                let n = self.head_logits(tape, fnorm, s, NOVEL_HEAD)?;
                tape.concat(b, n)
            }
        }
    }

    /// Inference helper: embeddings of a `B×C×H×W` batch.
    pub fn embed(&self, images: Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let x = tape.input(images);
        let f = self.encode(&mut tape, x)?;
        Ok(tape.tensor(f))
    }

    /// Inference helper: logits for precomputed features.
    pub fn logits(&self, features: &Tensor<T>, head: Head) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let f = tape.input(features.clone());
        let l = self.classify(&mut tape, f, head)?;
        Ok(tape.tensor(l))
    }

    /// Sets the novel head to one imprinted row per class. Each row is the
    /// normalized mean of the class's normalized support features.
    pub fn imprint(&mut self, per_class: &[Tensor<T>]) -> Result<()> {
        let d = self.feature_dim();
        let mut rows = Vec::with_capacity(per_class.len() * d);
        for (class, feats) in per_class.iter().enumerate() {
            rows.extend(prototype(feats, d, class)?);
        }
        if per_class.is_empty() {
            return Err(FlatError::Data("imprinting needs at least one novel class".into()));
        }
        self.params.insert(NOVEL_HEAD, Tensor::new(&[per_class.len(), d], rows)?.with_grad());
        Ok(())
    }

    /// Replaces the novel head with random unit rows.
    pub fn init_novel_random(&mut self, n_novel: usize, seed: u64) -> Result<()> {
        let d = self.feature_dim();
        let mut rng = seed::stream(seed, &[seed::tag::HEAD]);
        let rows: Vec<T> = (0..n_novel).flat_map(|_| random_unit(&mut rng, d)).map(T::of).collect();
        self.params.insert(NOVEL_HEAD, Tensor::new(&[n_novel, d], rows)?.with_grad());
        Ok(())
    }

    /// Drops the base head (transfer setting).
    pub fn drop_base_head(&mut self) {
        self.params.remove(BASE_HEAD);
    }

    /// Restores unit-norm classifier rows and a positive scale after an
    /// optimizer step.
    pub fn renormalize_heads(&mut self) {
        for name in [BASE_HEAD, NOVEL_HEAD] {
            if let Some(t) = self.params.by_name_mut(name) {
                let d = t.shape()[1];
                for row in t.data_mut().chunks_mut(d) {
                    if let Ok(unit) = l2_normalize_slice(row) {
                        row.copy_from_slice(&unit);
                    }
                }
            }
        }
        if let Some(s) = self.params.by_name_mut(SCALE) {
            let v = s.data_mut();
            if !(v[0].f64() >= MIN_SCALE) {
                v[0] = T::of(MIN_SCALE);
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> FlatModel<U> {
        FlatModel { config: self.config.clone(), params: self.params.cast() }
    }
}

/// Normalized mean of normalized rows of `feats` (`K×d`).
pub fn prototype<T: Scalar>(feats: &Tensor<T>, d: usize, class: usize) -> Result<Vec<T>> {
    if feats.shape().len() != 2 || feats.shape()[1] != d {
        return Err(FlatError::Dimension(format!(
            "support features for class {class} must be Kx{d}, got {:?}",
            feats.shape()
        )));
    }
    let k = feats.shape()[0];
    let mut mean = vec![0.0f64; d];
    for r in 0..k {
        let unit = l2_normalize_slice(feats.row(r)).map_err(|e| match e {
            FlatError::DegenerateVector { norm, .. } => FlatError::DegeneratePrototype { class, norm },
            e => e,
        })?;
        mean.iter_mut().zip(unit).for_each(|(m, u)| *m += u.f64());
    }
    mean.iter_mut().for_each(|m| *m /= k as f64);
    let norm = mean.iter().map(|m| m * m).sum::<f64>().sqrt();
    if !(norm > crate::tensor::NORM_EPS) {
        return Err(FlatError::DegeneratePrototype { class, norm });
    }
    Ok(mean.into_iter().map(|m| T::of(m / norm)).collect())
}
