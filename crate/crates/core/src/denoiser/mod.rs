//! Denoiser backend contract.
//!
//! A backend predicts conditional and unconditional noise, exposes decoder
//! feature taps, self- and cross-attention maps, and accepts key/value
//! injection into its self-attention layers. Backends that drive guidance
//! must also report vector-Jacobian products of their taps with respect to
//! the input latent.

mod adapter;
mod attention;
mod toy;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use ndarray::Array4;
use serde::{Deserialize, Serialize};

pub use adapter::{AdapterFactory, AdapterRegistry};
pub use toy::{toy_backend, ToyDenoiser};

use crate::error::{Error, Result};

/// Latent tensor laid out as `[frames, channels, height, width]`.
pub type Latent = Array4<f64>;

/// Decoder block identifier, 1-based from the lowest resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BlockId(pub u8);

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "block-{}", self.0)
    }
}

/// Text condition. The null token of the unconditional branch is implicit
/// and never collides with any prompt, including the empty one.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Condition {
    pub prompt: String,
}

impl Condition {
    pub fn new(prompt: impl Into<String>) -> Self {
        Condition {
            prompt: prompt.into(),
        }
    }
}

/// Which conditioning a forward pass uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch<'a> {
    Prompt(&'a str),
    Null,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl LatentShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        LatentShape {
            channels,
            height,
            width,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct BlockSpec {
    pub id: BlockId,
    /// Spatial stride relative to the latent grid.
    pub stride: usize,
    pub channels: usize,
    pub heads: usize,
}

/// Introspection table of a backend's decoder taps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TapTable {
    pub blocks: Vec<BlockSpec>,
}

impl Default for TapTable {
    fn default() -> Self {
        let block = |id, stride, channels| BlockSpec {
            id: BlockId(id),
            stride,
            channels,
            heads: 2,
        };
        TapTable {
            blocks: vec![block(1, 8, 16), block(2, 4, 16), block(3, 2, 12), block(4, 1, 8)],
        }
    }
}

impl TapTable {
    pub fn block(&self, id: BlockId) -> Result<&BlockSpec> {
        self.blocks
            .iter()
            .find(|b| b.id == id)
            .ok_or_else(|| Error::UnknownTap(id.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for b in &self.blocks {
            if !seen.insert(b.id) {
                return Err(Error::Config(format!("duplicate tap {}", b.id)));
            }
            if b.stride == 0 || b.heads == 0 || b.channels == 0 || b.channels % b.heads != 0 {
                return Err(Error::Config(format!(
                    "{}: channels must be a positive multiple of heads and stride positive",
                    b.id
                )));
            }
        }
        Ok(())
    }

    /// `(channels, rows, cols)` of a feature tap on the given latent grid.
    pub fn feature_shape(&self, id: BlockId, latent: LatentShape) -> Result<(usize, usize, usize)> {
        let b = self.block(id)?;
        Ok((b.channels, latent.height / b.stride, latent.width / b.stride))
    }

    /// `(heads, tokens, head_dim)` of a self-attention layer's keys.
    pub fn kv_shape(&self, id: BlockId, latent: LatentShape) -> Result<(usize, usize, usize)> {
        let (c, h, w) = self.feature_shape(id, latent)?;
        let b = self.block(id)?;
        Ok((b.heads, h * w, c / b.heads))
    }
}

/// Decoder feature map `[frames, channels, rows, cols]` tapped at one block.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub data: Array4<f64>,
    pub block: BlockId,
    pub timestep: usize,
}

impl FeatureMap {
    pub fn frames(&self) -> usize {
        self.data.dim().0
    }
    pub fn channels(&self) -> usize {
        self.data.dim().1
    }
    pub fn rows(&self) -> usize {
        self.data.dim().2
    }
    pub fn cols(&self) -> usize {
        self.data.dim().3
    }
}

/// Which intermediate products a forward pass should return.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TapRequest {
    pub features: BTreeSet<BlockId>,
    pub self_attn: BTreeSet<BlockId>,
    pub cross_attn: BTreeSet<BlockId>,
}

impl TapRequest {
    pub fn none() -> Self {
        TapRequest::default()
    }

    pub fn features(blocks: impl IntoIterator<Item = BlockId>) -> Self {
        TapRequest {
            features: blocks.into_iter().collect(),
            ..Default::default()
        }
    }

    pub fn all_blocks(&self) -> BTreeSet<BlockId> {
        self.features
            .iter()
            .chain(&self.self_attn)
            .chain(&self.cross_attn)
            .copied()
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct DenoiserOutput {
    pub eps_cond: Latent,
    pub eps_uncond: Latent,
    pub features: BTreeMap<BlockId, FeatureMap>,
    /// `[frames, heads, tokens, tokens]`, rows are post-softmax distributions.
    pub self_attn: BTreeMap<BlockId, Array4<f64>>,
    /// `[frames, heads, tokens, text_tokens]`.
    pub cross_attn: BTreeMap<BlockId, Array4<f64>>,
}

/// Keys and values of one self-attention layer, `[frames, heads, tokens, head_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyValue {
    pub keys: Array4<f64>,
    pub values: Array4<f64>,
}

/// Replacement keys/values for named self-attention layers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvInjection {
    pub layers: BTreeMap<BlockId, KeyValue>,
}

/// Cotangents of a scalar objective with respect to tapped outputs.
#[derive(Debug, Clone, Default)]
pub struct TapCotangent {
    /// Same shape as the feature tap.
    pub features: BTreeMap<BlockId, Array4<f64>>,
    /// Same shape as the cross-attention map.
    pub cross_attn: BTreeMap<BlockId, Array4<f64>>,
}

impl TapCotangent {
    pub fn is_empty(&self) -> bool {
        self.features.is_empty() && self.cross_attn.is_empty()
    }
}

/// A noise-prediction network with feature taps and attention hooks.
pub trait Denoiser: Send + Sync {
    /// Registration name, used in diagnostics and manifests.
    fn name(&self) -> &str;

    fn latent_shape(&self) -> LatentShape;

    fn tap_table(&self) -> &TapTable;

    /// Noise prediction for both guidance branches plus the requested taps.
    ///
    /// With an injection the named self-attention layers attend with their
    /// own queries over the supplied keys and values; taps are read after the
    /// injection takes effect.
    fn predict(
        &self,
        x: &Latent,
        t: usize,
        cond: &Condition,
        taps: &TapRequest,
        injection: Option<&KvInjection>,
    ) -> Result<DenoiserOutput>;

    /// Keys and values of the named self-attention layers for this input.
    fn capture_kv(
        &self,
        x: &Latent,
        t: usize,
        cond: &Condition,
        layers: &BTreeSet<BlockId>,
    ) -> Result<KvInjection>;

    /// Whether [`Denoiser::vjp`] is available.
    fn differentiable(&self) -> bool;

    /// Gradient with respect to `x` of `sum <cotangent, tap>` over the
    /// conditional-branch taps of `predict(x, t, cond, .., injection)`.
    /// Injected keys and values are constants.
    fn vjp(
        &self,
        x: &Latent,
        t: usize,
        cond: &Condition,
        injection: Option<&KvInjection>,
        cotangent: &TapCotangent,
    ) -> Result<Latent>;

    /// Maps pixels `[frames, channels, H, W]` in `[0, 1]` into latent space.
    fn encode(&self, pixels: &Array4<f64>) -> Result<Latent>;

    /// Inverse of [`Denoiser::encode`] up to the encoder's information loss.
    fn decode(&self, latent: &Latent) -> Result<Array4<f64>>;
}
