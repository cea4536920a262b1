//! Activation tensors and the shape-normalizing max-pool.
//!
//! An activation tensor stacks a model's post-FFN, post-residual hidden
//! states over (layers x tokens x features). Pooling pads the two spatial
//! axes up to a multiple of the target size and takes the per-channel max
//! over disjoint patches, so any input lands on a fixed (L_p, N_p) grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::llm::LlmRegistry;

/// Padding sentinel: effectively -inf, so padded cells never win a max
/// against any finite activation.
pub const PAD_VALUE: f32 = -3.0e38;

/// Dense row-major (layers, tokens, features) tensor of f32.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    layers: usize,
    tokens: usize,
    features: usize,
    data: Vec<f32>,
}

impl Tensor3 {
    pub fn zeros(layers: usize, tokens: usize, features: usize) -> Self {
        Self {
            layers,
            tokens,
            features,
            data: vec![0.0; layers * tokens * features],
        }
    }

    pub fn from_vec(layers: usize, tokens: usize, features: usize, data: Vec<f32>) -> Result<Self> {
        if layers == 0 || tokens == 0 || features == 0 {
            return Err(Error::validation("tensor dims must all be >= 1"));
        }
        if data.len() != layers * tokens * features {
            return Err(Error::validation(format!(
                "tensor data length {} does not match shape ({layers}, {tokens}, {features})",
                data.len()
            )));
        }
        Ok(Self {
            layers,
            tokens,
            features,
            data,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.layers, self.tokens, self.features)
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn features(&self) -> usize {
        self.features
    }

    #[inline]
    pub fn get(&self, l: usize, n: usize, d: usize) -> f32 {
        self.data[(l * self.tokens + n) * self.features + d]
    }

    #[inline]
    pub fn set(&mut self, l: usize, n: usize, d: usize, v: f32) {
        self.data[(l * self.tokens + n) * self.features + d] = v;
    }

    /// The feature vector at one (layer, token) activation pixel.
    #[inline]
    pub fn pixel(&self, l: usize, n: usize) -> &[f32] {
        let base = (l * self.tokens + n) * self.features;
        &self.data[base..base + self.features]
    }

    pub fn pixel_mut(&mut self, l: usize, n: usize) -> &mut [f32] {
        let base = (l * self.tokens + n) * self.features;
        &mut self.data[base..base + self.features]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// One labeled activation tensor plus provenance.
#[derive(Debug, Clone)]
pub struct ActivationTensor {
    pub data: Tensor3,
    pub llm_id: String,
    pub sample_id: String,
    /// 1 = correct response, 0 = hallucination; None while unlabeled.
    pub label: Option<u8>,
}

impl ActivationTensor {
    /// First violated invariant, or Ok. Checks shape positivity, finiteness,
    /// and agreement with the registered descriptor for `llm_id`.
    pub fn validate(&self, registry: &LlmRegistry) -> Result<()> {
        let (l, n, d) = self.data.shape();
        if l == 0 || n == 0 || d == 0 {
            return Err(Error::validation(format!(
                "sample '{}': all dims must be >= 1, got ({l}, {n}, {d})",
                self.sample_id
            )));
        }
        let desc = registry.require(&self.llm_id)?;
        if l != desc.layers || d != desc.hidden_dim {
            return Err(Error::validation(format!(
                "sample '{}': shape ({l}, {n}, {d}) does not match llm '{}' with {} layers and hidden dim {}",
                self.sample_id, self.llm_id, desc.layers, desc.hidden_dim
            )));
        }
        if !self.data.all_finite() {
            return Err(Error::validation(format!(
                "sample '{}': tensor contains non-finite entries",
                self.sample_id
            )));
        }
        if let Some(y) = self.label {
            if y > 1 {
                return Err(Error::validation(format!(
                    "sample '{}': label must be 0 or 1, got {y}",
                    self.sample_id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    /// Pool both spatial axes to (L_p, N_p).
    TwoD,
    /// Pool layers only; the token axis passes through at input resolution.
    LayerOnly,
}

/// Target spatial shape for pooling.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PoolConfig {
    pub target_layers: usize,
    pub target_tokens: usize,
    pub mode: PoolMode,
    #[serde(default = "default_pad_value")]
    pub pad_value: f32,
}

fn default_pad_value() -> f32 {
    PAD_VALUE
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig {
            target_layers: 8,
            target_tokens: 100,
            mode: PoolMode::TwoD,
            pad_value: PAD_VALUE,
        }
    }
}

impl PoolConfig {
    pub fn two_d(target_layers: usize, target_tokens: usize) -> Self {
        PoolConfig {
            target_layers,
            target_tokens,
            mode: PoolMode::TwoD,
            pad_value: PAD_VALUE,
        }
    }

    pub fn layer_only(target_layers: usize) -> Self {
        PoolConfig {
            target_layers,
            target_tokens: 1,
            mode: PoolMode::LayerOnly,
            pad_value: PAD_VALUE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_layers == 0 {
            return Err(Error::validation("pool target_layers must be >= 1"));
        }
        if self.mode == PoolMode::TwoD && self.target_tokens == 0 {
            return Err(Error::validation(
                "pool target_tokens must be >= 1 in two_d mode",
            ));
        }
        if !self.pad_value.is_finite() {
            return Err(Error::validation("pool pad_value must be finite"));
        }
        Ok(())
    }
}

/// Resolve a token offset into an index for a length-`n` sequence.
/// Non-negative offsets count from the start, negative from the end
/// (-1 is the last token).
pub fn resolve_token_offset(offset: i32, n: usize) -> Option<usize> {
    if offset >= 0 {
        let idx = offset as usize;
        (idx < n).then_some(idx)
    } else {
        n.checked_sub(offset.unsigned_abs() as usize)
    }
}

/// Non-fatal conditions observed while pooling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PoolWarning {
    /// `count` output rows cover only padding and will hold `pad_value`.
    PadOnlyLayerRows { count: usize },
    /// `count` output columns cover only padding and will hold `pad_value`.
    PadOnlyTokenCols { count: usize },
}

impl std::fmt::Display for PoolWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PoolWarning::PadOnlyLayerRows { count } => {
                write!(f, "{count} pooled layer rows contain only padding")
            }
            PoolWarning::PadOnlyTokenCols { count } => {
                write!(f, "{count} pooled token columns contain only padding")
            }
        }
    }
}

/// Pooled tensor with its provenance; spatial shape is fixed by the config.
#[derive(Debug, Clone)]
pub struct PooledTensor {
    pub data: Tensor3,
    /// (layers, tokens) before pooling.
    pub source_shape: (usize, usize),
    pub config: PoolConfig,
    pub llm_id: String,
    pub sample_id: String,
    pub label: Option<u8>,
}

impl PooledTensor {
    /// Zero out pad-only pixels (every channel exactly at the sentinel).
    /// Mixed patches never contain the sentinel (the per-channel max sees at
    /// least one real cell), so this only touches all-padding pixels, whose
    /// sentinel would otherwise overflow f32 arithmetic and fall outside the
    /// f16 storage range. Returns how many pixels were cleared.
    pub fn sanitize_pad_pixels(&mut self) -> usize {
        let (l_p, n_p, _) = self.data.shape();
        let pad = self.config.pad_value;
        let mut cleared = 0;
        for l in 0..l_p {
            for n in 0..n_p {
                let px = self.data.pixel_mut(l, n);
                if px.iter().all(|&v| v == pad) {
                    px.iter_mut().for_each(|v| *v = 0.0);
                    cleared += 1;
                }
            }
        }
        cleared
    }
}

pub struct PoolOutcome {
    pub tensor: PooledTensor,
    pub warnings: Vec<PoolWarning>,
}

/// Max-pool `a` to the configured spatial shape.
///
/// Both spatial axes are padded at their end with `cfg.pad_value` up to the
/// next multiple of the target size; the kernel is the resulting patch
/// factor. Targets larger than the input are legal (the kernel degenerates
/// to 1 over padded cells) but reported as warnings, since pad-only patches
/// return `pad_value`.
pub fn pool(a: &ActivationTensor, cfg: &PoolConfig) -> Result<PoolOutcome> {
    cfg.validate()?;
    let (layers, tokens, features) = a.data.shape();
    if !a.data.all_finite() {
        return Err(Error::validation(format!(
            "sample '{}': cannot pool tensor with non-finite entries",
            a.sample_id
        )));
    }

    let out_layers = cfg.target_layers;
    let out_tokens = match cfg.mode {
        PoolMode::TwoD => cfg.target_tokens,
        PoolMode::LayerOnly => tokens,
    };

    let padded_layers = layers.div_ceil(out_layers) * out_layers;
    let padded_tokens = tokens.div_ceil(out_tokens) * out_tokens;
    let factor_l = padded_layers / out_layers;
    let factor_n = padded_tokens / out_tokens;

    let mut warnings = Vec::new();
    let rows_with_data = layers.div_ceil(factor_l);
    if rows_with_data < out_layers {
        warnings.push(PoolWarning::PadOnlyLayerRows {
            count: out_layers - rows_with_data,
        });
    }
    let cols_with_data = tokens.div_ceil(factor_n);
    if cols_with_data < out_tokens {
        warnings.push(PoolWarning::PadOnlyTokenCols {
            count: out_tokens - cols_with_data,
        });
    }

    let mut out = Tensor3::zeros(out_layers, out_tokens, features);
    for ol in 0..out_layers {
        for on in 0..out_tokens {
            for c in 0..features {
                let mut best = cfg.pad_value;
                for l in ol * factor_l..(ol + 1) * factor_l {
                    if l >= layers {
                        break;
                    }
                    for n in on * factor_n..(on + 1) * factor_n {
                        if n >= tokens {
                            break;
                        }
                        let v = a.data.get(l, n, c);
                        if v > best {
                            best = v;
                        }
                    }
                }
                out.set(ol, on, c, best);
            }
        }
    }

    Ok(PoolOutcome {
        tensor: PooledTensor {
            data: out,
            source_shape: (layers, tokens),
            config: *cfg,
            llm_id: a.llm_id.clone(),
            sample_id: a.sample_id.clone(),
            label: a.label,
        },
        warnings,
    })
}
