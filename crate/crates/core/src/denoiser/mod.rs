//! A small token-based noise predictor.
//!
//! Patches (or, for vector data, sinusoidal features of the input at `N`
//! different frequencies) are embedded into `N` tokens of width `C`, passed through pre-norm transformer blocks
//! and projected back to the sample shape. Time and class conditioning enter
//! as an additive token bias at the input and at every block.
//!
//! Blocks expose two hook sites: the hidden tokens entering a block's
//! attention, and the post-softmax attention map. Hooks are per call, so a
//! perturbed and an unperturbed pass can share the same weights.

mod backward;
mod forward;
mod hooks;
mod layout;
mod train;

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perturb::TokenTensor;
use crate::rng::{Domain, SeededRng};

pub use forward::{BlockTrace, Trace};
pub use hooks::{blur_attention_row, HookAction, HookPoint, HookSite, Hooks};
pub use layout::{Linear, ParamEntry, ParamLayout};
pub use train::{train, TrainConfig, TrainReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InputShape {
    /// Row-major `(height, width, channels)` images cut into square patches.
    Image {
        height: usize,
        width: usize,
        channels: usize,
    },
    /// Flat vectors; token `j` holds `sin(w_j x), cos(w_j x)` of every
    /// coordinate, with `w_j` geometric from 0.5 to 16.
    Vector { dims: usize, tokens: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub input: InputShape,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    /// Includes the null class, which is always the last index.
    pub num_classes: usize,
    pub time_embed_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            input: InputShape::Image {
                height: 16,
                width: 16,
                channels: 1,
            },
            patch_size: 4,
            embed_dim: 64,
            depth: 6,
            heads: 4,
            mlp_dim: 128,
            num_classes: 5,
            time_embed_dim: 32,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        match self.input {
            InputShape::Image {
                height,
                width,
                channels,
            } => {
                if self.patch_size == 0 || height == 0 || width == 0 || channels == 0 {
                    return bad("image dims and patch size must be positive".into());
                }
                if height % self.patch_size != 0 || width % self.patch_size != 0 {
                    return bad(format!(
                        "{height}x{width} image is not divisible by patch {}",
                        self.patch_size
                    ));
                }
            }
            InputShape::Vector { dims, tokens } => {
                if dims == 0 || tokens == 0 {
                    return bad("vector dims and token count must be positive".into());
                }
            }
        }
        if !self.tokens().is_power_of_two() {
            return bad(format!(
                "token count {} is not a power of two",
                self.tokens()
            ));
        }
        if self.embed_dim == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.depth == 0 || self.mlp_dim == 0 {
            return bad("depth and mlp_dim must be positive".into());
        }
        if self.num_classes == 0 {
            return bad("num_classes must include the null class".into());
        }
        if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return bad(format!(
                "time_embed_dim {} must be even",
                self.time_embed_dim
            ));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        match self.input {
            InputShape::Image { height, width, .. } => {
                (height / self.patch_size.max(1)) * (width / self.patch_size.max(1))
            }
            InputShape::Vector { tokens, .. } => tokens,
        }
    }

    /// Width of one input token before embedding.
    pub fn patch_dim(&self) -> usize {
        match self.input {
            InputShape::Image { channels, .. } => self.patch_size * self.patch_size * channels,
            InputShape::Vector { dims, .. } => 2 * dims,
        }
    }

    /// Flattened length of one sample.
    pub fn sample_dim(&self) -> usize {
        match self.input {
            InputShape::Image {
                height,
                width,
                channels,
            } => height * width * channels,
            InputShape::Vector { dims, .. } => dims,
        }
    }

    pub fn null_class(&self) -> usize {
        self.num_classes - 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// Middle third of the blocks, `[depth / 3, 2 * depth / 3)`, or the
    /// middle block when that range is empty.
    pub fn default_perturbed_layers(&self) -> Vec<usize> {
        let (lo, hi) = (self.depth / 3, 2 * self.depth / 3);
        if lo < hi {
            (lo..hi).collect()
        } else {
            vec![self.depth / 2]
        }
    }
}

/// Frequency of vector token `j` out of `n`.
pub fn token_frequency(j: usize, n: usize) -> f64 {
    if n == 1 {
        return 0.5;
    }
    0.5 * 32f64.powf(j as f64 / (n - 1) as f64)
}

/// Sinusoidal embedding `[sin(t w_0), cos(t w_0), sin(t w_1), ...]` with
/// `w_i = 10000^(-i / (dim / 2))`.
pub fn time_embedding(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::InvalidConfig(format!(
            "time embedding dim {dim} must be even"
        )));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        out.push((t * freq).sin());
        out.push((t * freq).cos());
    }
    Ok(out)
}

/// Flat-sample indices in token-major order: entry `j * P + k` is the
/// position in the row-major `(H, W, C)` sample of element `k` of patch `j`.
pub(crate) fn patch_gather_index(
    height: usize,
    width: usize,
    channels: usize,
    p: usize,
) -> Vec<usize> {
    let (ph, pw) = (height / p, width / p);
    let mut idx = Vec::with_capacity(height * width * channels);
    for py in 0..ph {
        for px in 0..pw {
            for dy in 0..p {
                for dx in 0..p {
                    for ch in 0..channels {
                        let (y, x) = (py * p + dy, px * p + dx);
                        idx.push((y * width + x) * channels + ch);
                    }
                }
            }
        }
    }
    idx
}

/// Splits `(B, H, W, C)` images into `(B, N, p*p*C)` tokens, patches in
/// row-major order.
pub fn patchify(x: &Array4<f64>, patch: usize) -> Result<TokenTensor> {
    let (b, h, w, c) = x.dim();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{h}x{w} image is not divisible into {patch}x{patch} patches"
        )));
    }
    let idx = patch_gather_index(h, w, c, patch);
    let n = (h / patch) * (w / patch);
    let pd = patch * patch * c;
    let mut out = ndarray::Array3::zeros((b, n, pd));
    for (s, img) in x.outer_iter().enumerate() {
        let flat: Vec<f64> = img.iter().copied().collect();
        for (pos, &src) in idx.iter().enumerate() {
            out[[s, pos / pd, pos % pd]] = flat[src];
        }
    }
    TokenTensor::new(out)
}

pub fn unpatchify(
    tokens: &TokenTensor,
    height: usize,
    width: usize,
    channels: usize,
    patch: usize,
) -> Result<Array4<f64>> {
    if patch == 0 || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
        return Err(Error::ShapeMismatch(format!(
            "{height}x{width} image is not divisible into {patch}x{patch} patches"
        )));
    }
    let n = (height / patch) * (width / patch);
    let pd = patch * patch * channels;
    if tokens.tokens() != n || tokens.channels() != pd {
        return Err(Error::ShapeMismatch(format!(
            "expected {n} tokens of width {pd}, got {} of width {}",
            tokens.tokens(),
            tokens.channels()
        )));
    }
    let idx = patch_gather_index(height, width, channels, patch);
    let b = tokens.batch();
    let mut flat = vec![0.0; b * height * width * channels];
    let sd = height * width * channels;
    for s in 0..b {
        for (pos, &dst) in idx.iter().enumerate() {
            flat[s * sd + dst] = tokens.data()[[s, pos / pd, pos % pd]];
        }
    }
    Ok(Array4::from_shape_vec((b, height, width, channels), flat).expect("sized above"))
}

/// Trained or freshly initialized noise predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    config: DenoiserConfig,
    layout: ParamLayout,
    params: Vec<f64>,
    null_trained: bool,
}

impl Denoiser {
    pub fn from_params(
        config: DenoiserConfig,
        params: Vec<f64>,
        null_trained: bool,
    ) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        if params.len() != layout.total() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                layout.total(),
                params.len()
            )));
        }
        Ok(Self {
            config,
            layout,
            params,
            null_trained,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Whether training ever presented the null class.
    pub fn null_trained(&self) -> bool {
        self.null_trained
    }

    pub fn set_null_trained(&mut self, v: bool) {
        self.null_trained = v;
    }

    /// Rounds every parameter to the nearest `f32` so the model survives a
    /// 32-bit checkpoint bit for bit.
    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            *p = f64::from(*p as f32);
        }
    }

    /// Noise prediction for a batch at a shared step `t`.
    pub fn predict(
        &self,
        x: &Array2<f64>,
        t: usize,
        classes: &[usize],
        hooks: &Hooks,
    ) -> Result<Array2<f64>> {
        let ts = vec![t; x.nrows()];
        self.forward(x, &ts, classes, hooks)
    }
}

/// Scaled-uniform init: linear maps `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`,
/// embeddings `U(-0.02, 0.02)`, norm gains 1, biases 0 and an all-zero output
/// head. Values are drawn as `f32`.
pub fn init_weights(cfg: &DenoiserConfig, seed: u64) -> Result<Denoiser> {
    cfg.validate()?;
    let layout = ParamLayout::new(cfg);
    let mut params = vec![0.0; layout.total()];
    let mut rng = SeededRng::new(seed, Domain::Weights, 0, 0);
    for entry in layout.entries() {
        let slice = &mut params[entry.offset..entry.offset + entry.len()];
        match entry.init {
            layout::Init::Zeros => slice.fill(0.0),
            layout::Init::Ones => slice.fill(1.0),
            layout::Init::Uniform(bound) => {
                for v in slice.iter_mut() {
                    let u = (rng.uniform() * 2.0 - 1.0) * bound;
                    *v = f64::from(u as f32);
                }
            }
        }
    }
    Denoiser::from_params(cfg.clone(), params, false)
}
