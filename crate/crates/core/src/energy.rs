//! Style, spatial and semantic-distance energies and their latent gradient.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array3, Array4, Zip};
use serde::{Deserialize, Serialize};

use crate::correspondence::PeMode;
use crate::denoiser::{BlockId, Condition, Denoiser, FeatureMap, KvInjection, Latent, TapCotangent, TapRequest};
use crate::error::{Error, Result};

fn default_blocks() -> BTreeSet<BlockId> {
    [BlockId(2), BlockId(3)].into()
}

fn default_swap_layers() -> BTreeSet<BlockId> {
    [BlockId(3), BlockId(4)].into()
}

/// Guidance weights and schedules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct EnergyConfig {
    pub omega: f64,
    pub gamma_ref: f64,
    pub gamma_c: f64,
    pub gamma_reg: f64,
    pub lambda_pe: f64,
    pub clamp_lo: f64,
    pub clamp_hi: f64,
    /// Sampling-step index from which the KV swap and regularizer run.
    pub swap_start: usize,
    /// Sampling-step index from which AdaIN is applied.
    pub adain_start: usize,
    pub feature_blocks: BTreeSet<BlockId>,
    pub swap_layers: BTreeSet<BlockId>,
    pub pe_mode: PeMode,
    pub k_clusters: usize,
    pub shuffle_correspondence: bool,
    pub shuffle_seed: u64,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        EnergyConfig {
            omega: 3.5,
            gamma_ref: 3.0,
            gamma_c: 0.9,
            gamma_reg: 1.0,
            lambda_pe: 3.0,
            clamp_lo: -1.0,
            clamp_hi: 1.0,
            swap_start: 10,
            adain_start: 20,
            feature_blocks: default_blocks(),
            swap_layers: default_swap_layers(),
            pe_mode: PeMode::TwoD,
            k_clusters: 2,
            shuffle_correspondence: false,
            shuffle_seed: 0,
        }
    }
}

impl EnergyConfig {
    /// Weights used for video inputs.
    pub fn video() -> Self {
        EnergyConfig {
            gamma_ref: 6.0,
            gamma_c: 3.0,
            gamma_reg: 5.0,
            ..Self::default()
        }
    }

    /// All guidance switched off.
    pub fn unguided() -> Self {
        EnergyConfig {
            gamma_ref: 0.0,
            gamma_c: 0.0,
            gamma_reg: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self, plan_len: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        for (name, v) in [
            ("gamma-ref", self.gamma_ref),
            ("gamma-c", self.gamma_c),
            ("gamma-reg", self.gamma_reg),
            ("lambda-pe", self.lambda_pe),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be a nonnegative number, got {v}"));
            }
        }
        if !self.omega.is_finite() {
            return bad(format!("omega must be finite, got {}", self.omega));
        }
        if !(self.clamp_lo < self.clamp_hi) {
            return bad(format!("clamp-lo {} must be below clamp-hi {}", self.clamp_lo, self.clamp_hi));
        }
        if self.swap_start > plan_len || self.adain_start > plan_len {
            return bad(format!(
                "swap-start {} and adain-start {} must not exceed the {plan_len} plan steps",
                self.swap_start, self.adain_start
            ));
        }
        if self.feature_blocks.is_empty() {
            return bad("feature-blocks must name at least one block".into());
        }
        if self.k_clusters == 0 {
            return bad("k-clusters must be at least 1".into());
        }
        Ok(())
    }

    pub fn clamp(&self, g: &Latent) -> Latent {
        g.mapv(|v| v.clamp(self.clamp_lo, self.clamp_hi))
    }
}

/// Term values and their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct EnergyBreakdown {
    pub style: f64,
    pub spatial: f64,
    pub regularizer: f64,
    pub total: f64,
    /// Positions where a zero-norm vector made the cosine undefined.
    pub zero_norm: usize,
}

/// Mean cosine distance with its gradient in the first argument.
#[derive(Debug, Clone)]
pub struct CosineTerm {
    pub value: f64,
    pub grad: Array4<f64>,
    pub zero_norm: usize,
}

fn cosine_term(a: &Array4<f64>, b: &Array4<f64>, mask: Option<&Array3<bool>>) -> Result<CosineTerm> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("feature maps {:?} vs {:?}", a.dim(), b.dim())));
    }
    let (frames, c, h, w) = a.dim();
    if let Some(m) = mask {
        if (m.dim().1, m.dim().2) != (h, w) || (m.dim().0 != frames && m.dim().0 != 1) {
            return Err(Error::Shape(format!("mask {:?} vs features {:?}", m.dim(), a.dim())));
        }
    }
    let inside = |f: usize, r: usize, k: usize| match mask {
        None => true,
        Some(m) => m[[if m.dim().0 == 1 { 0 } else { f }, r, k]],
    };
    let count = (0..frames)
        .flat_map(|f| (0..h).flat_map(move |r| (0..w).map(move |k| (f, r, k))))
        .filter(|&(f, r, k)| inside(f, r, k))
        .count();
    if count == 0 {
        return Err(Error::EmptyMask("context"));
    }
    let mut value = 0.0;
    let mut zero_norm = 0;
    let mut grad = Array4::zeros(a.raw_dim());
    let scale = 1.0 / count as f64;
    for f in 0..frames {
        for r in 0..h {
            for k in 0..w {
                if !inside(f, r, k) {
                    continue;
                }
                let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
                for ch in 0..c {
                    let (x, y) = (a[[f, ch, r, k]], b[[f, ch, r, k]]);
                    dot += x * y;
                    na += x * x;
                    nb += y * y;
                }
                if na == 0.0 || nb == 0.0 {
                    zero_norm += 1;
                    value += scale;
                    continue;
                }
                let (na, nb) = (na.sqrt(), nb.sqrt());
                let cos = dot / (na * nb);
                value += scale * (1.0 - cos.clamp(-1.0, 1.0));
                for ch in 0..c {
                    let (x, y) = (a[[f, ch, r, k]], b[[f, ch, r, k]]);
                    grad[[f, ch, r, k]] = -scale * (y / (na * nb) - cos * x / (na * na));
                }
            }
        }
    }
    Ok(CosineTerm { value, grad, zero_norm })
}

/// Mean of `1 - cos(out_i, ref_i)` over positions inside the context mask.
pub fn style_term(out: &FeatureMap, ref_star: &FeatureMap, context_mask: &Array3<bool>) -> Result<CosineTerm> {
    cosine_term(&out.data, &ref_star.data, Some(context_mask))
}

/// Mean of `1 - cos(out_i, c_i)` over every position.
pub fn spatial_term(out: &FeatureMap, context: &FeatureMap) -> Result<CosineTerm> {
    cosine_term(&out.data, &context.data, None)
}

/// Sum over layers of the mean squared difference; `ca_context` is a constant.
/// Returns the value and the gradient with respect to `ca_swap`.
pub fn semantic_distance(
    ca_swap: &BTreeMap<BlockId, Array4<f64>>,
    ca_context: &BTreeMap<BlockId, Array4<f64>>,
) -> Result<(f64, BTreeMap<BlockId, Array4<f64>>)> {
    let mut value = 0.0;
    let mut grads = BTreeMap::new();
    for (id, a) in ca_swap {
        let b = ca_context
            .get(id)
            .ok_or_else(|| Error::Shape(format!("no context cross-attention for {id}")))?;
        if a.dim() != b.dim() {
            return Err(Error::Shape(format!("{id} cross-attention {:?} vs {:?}", a.dim(), b.dim())));
        }
        let n = a.len() as f64;
        let diff = a - b;
        value += diff.iter().map(|d| d * d).sum::<f64>() / n;
        grads.insert(*id, diff * (2.0 / n));
    }
    if ca_context.keys().any(|id| !ca_swap.contains_key(id)) {
        return Err(Error::Shape("cross-attention layer sets differ".into()));
    }
    Ok((value, grads))
}

pub fn total_energy(style: f64, spatial: f64, regularizer: f64, cfg: &EnergyConfig) -> EnergyBreakdown {
    EnergyBreakdown {
        style,
        spatial,
        regularizer,
        total: cfg.gamma_ref * style + cfg.gamma_c * spatial + cfg.gamma_reg * regularizer,
        zero_norm: 0,
    }
}

/// Quantities held fixed while differentiating the output track's energy.
#[derive(Debug, Clone)]
pub struct EnergyTargets {
    /// Rearranged reference features, one per guided block.
    pub ref_star: BTreeMap<BlockId, FeatureMap>,
    pub context_features: BTreeMap<BlockId, FeatureMap>,
    /// Context-grid masks for the style term, per block.
    pub style_masks: BTreeMap<BlockId, Array3<bool>>,
    /// Swap-pass injection and the context cross-attention it is compared to.
    pub swap: Option<SwapTarget>,
}

#[derive(Debug, Clone)]
pub struct SwapTarget {
    pub injection: KvInjection,
    pub ca_context: BTreeMap<BlockId, Array4<f64>>,
}

/// Breakdown plus clamped and raw gradients.
#[derive(Debug, Clone)]
pub struct EnergyGradient {
    pub breakdown: EnergyBreakdown,
    pub gradient: Latent,
    pub unclamped: Latent,
}

/// Energy of the output latent and its cotangents on the backend taps.
pub fn evaluate_energy(
    backend: &dyn Denoiser,
    x_out: &Latent,
    t: usize,
    cond: &Condition,
    targets: &EnergyTargets,
    cfg: &EnergyConfig,
) -> Result<(EnergyBreakdown, TapCotangent, TapCotangent)> {
    let blocks: BTreeSet<BlockId> = targets.ref_star.keys().copied().collect();
    let out = backend.predict(x_out, t, cond, &TapRequest::features(blocks.iter().copied()), None)?;
    let nb = blocks.len().max(1) as f64;
    let (mut style, mut spatial, mut zero_norm) = (0.0, 0.0, 0);
    let mut feat_ct = TapCotangent::default();
    for id in &blocks {
        let f_out = &out.features[id];
        let mask = targets
            .style_masks
            .get(id)
            .ok_or_else(|| Error::Shape(format!("no style mask for {id}")))?;
        let f_c = targets
            .context_features
            .get(id)
            .ok_or_else(|| Error::Shape(format!("no context features for {id}")))?;
        let s = style_term(f_out, &targets.ref_star[id], mask)?;
        let p = spatial_term(f_out, f_c)?;
        style += s.value / nb;
        spatial += p.value / nb;
        zero_norm += s.zero_norm + p.zero_norm;
        let g = s.grad * (cfg.gamma_ref / nb) + p.grad * (cfg.gamma_c / nb);
        feat_ct.features.insert(*id, g);
    }
    let mut ca_ct = TapCotangent::default();
    let mut regularizer = 0.0;
    if let Some(swap) = &targets.swap {
        let taps = TapRequest {
            cross_attn: swap.ca_context.keys().copied().collect(),
            ..Default::default()
        };
        let swapped = backend.predict(x_out, t, cond, &taps, Some(&swap.injection))?;
        let (value, grads) = semantic_distance(&swapped.cross_attn, &swap.ca_context)?;
        regularizer = value;
        ca_ct.cross_attn = grads.into_iter().map(|(id, g)| (id, g * cfg.gamma_reg)).collect();
    }
    let mut breakdown = total_energy(style, spatial, regularizer, cfg);
    breakdown.zero_norm = zero_norm;
    Ok((breakdown, feat_ct, ca_ct))
}

/// Gradient of the total energy with respect to `x_out`, clamped elementwise.
/// Masks, assignments and all target tensors are constants.
pub fn energy_gradient(
    backend: &dyn Denoiser,
    x_out: &Latent,
    t: usize,
    cond: &Condition,
    targets: &EnergyTargets,
    cfg: &EnergyConfig,
) -> Result<EnergyGradient> {
    if !backend.differentiable() {
        return Err(Error::NotDifferentiable(backend.name().to_string()));
    }
    let (breakdown, feat_ct, ca_ct) = evaluate_energy(backend, x_out, t, cond, targets, cfg)?;
    let mut unclamped = Latent::zeros(x_out.raw_dim());
    if cfg.gamma_ref != 0.0 || cfg.gamma_c != 0.0 {
        unclamped += &backend.vjp(x_out, t, cond, None, &feat_ct)?;
    }
    if let (Some(swap), true) = (&targets.swap, cfg.gamma_reg != 0.0) {
        unclamped += &backend.vjp(x_out, t, cond, Some(&swap.injection), &ca_ct)?;
    }
    let gradient = cfg.clamp(&unclamped);
    Ok(EnergyGradient {
        breakdown,
        gradient,
        unclamped,
    })
}

/// Largest absolute entry.
pub fn max_abs(x: &Latent) -> f64 {
    let mut m: f64 = 0.0;
    Zip::from(x).for_each(|&v| m = m.max(v.abs()));
    m
}
