//! Deterministic desk-scale backend.
//!
//! * noise: `eps(x, t, c) = g(t) * (A x + k * x) + h(t) * b(c)` with a seeded
//!   channel mix `A` and a seeded depthwise 3x3 kernel `k`; linear in `x`.
//! * block `k` tokens: seeded projections of 4x4 latent patches sampled on a
//!   grid of stride `stride_k`, followed by one transformer layer
//!   (self-attention, then cross-attention over the prompt tokens), both with
//!   residual connections. The feature tap is the layer output.
//!
//! Every tap is a smooth function of `x`, and `vjp` runs the exact reverse pass.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{s, Array2, Array3, Array4, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::attention::{self, AttnForward};
use super::{
    BlockId, BlockSpec, Branch, Condition, Denoiser, DenoiserOutput, FeatureMap, KeyValue,
    KvInjection, Latent, LatentShape, TapCotangent, TapRequest, TapTable,
};
use crate::error::{Error, Result};

const PATCH: usize = 4;
const TEXT_TOKENS: usize = 4;
const TEXT_DIM: usize = 8;
const TIME_SCALE: f64 = 1000.0;

struct BlockWeights {
    spec: BlockSpec,
    /// `[channels * 16, dim]`
    proj: Array2<f64>,
    wq: Array2<f64>,
    wk: Array2<f64>,
    wv: Array2<f64>,
    wo: Array2<f64>,
    wq_cross: Array2<f64>,
    /// `[TEXT_DIM, dim]`
    wk_cross: Array2<f64>,
    wv_cross: Array2<f64>,
    wo_cross: Array2<f64>,
}

pub struct ToyDenoiser {
    seed: u64,
    shape: LatentShape,
    table: TapTable,
    downscale: usize,
    /// `[C, C]`
    mix: Array2<f64>,
    /// `[C, 3, 3]`
    kernel: Array3<f64>,
    /// `[C, TEXT_DIM]`
    bias_proj: Array2<f64>,
    blocks: BTreeMap<BlockId, BlockWeights>,
}

/// Builds a toy backend; equal seeds give identical backends.
pub fn toy_backend(seed: u64, latent_shape: LatentShape, tap_table: TapTable) -> Result<ToyDenoiser> {
    ToyDenoiser::new(seed, latent_shape, tap_table)
}

fn gaussian(rng: &mut ChaCha8Rng, shape: (usize, usize), std: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

impl ToyDenoiser {
    pub fn new(seed: u64, shape: LatentShape, table: TapTable) -> Result<Self> {
        table.validate()?;
        if shape.channels == 0 || shape.height == 0 || shape.width == 0 {
            return Err(Error::Shape("latent dims must be positive".into()));
        }
        for b in &table.blocks {
            if !shape.height.is_multiple_of(b.stride) || !shape.width.is_multiple_of(b.stride) {
                return Err(Error::Shape(format!(
                    "latent {}x{} is not divisible by the stride {} of {}",
                    shape.height, shape.width, b.stride, b.id
                )));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = shape.channels;
        let mix = gaussian(&mut rng, (c, c), 0.3 / (c as f64).sqrt());
        let kernel = gaussian(&mut rng, (c, 9), 0.05)
            .into_shape_with_order((c, 3, 3))
            .expect("kernel reshape");
        let bias_proj = gaussian(&mut rng, (c, TEXT_DIM), 0.3 / (TEXT_DIM as f64).sqrt());
        let mut blocks = BTreeMap::new();
        for spec in &table.blocks {
            let d = spec.channels;
            let fan_in = c * PATCH * PATCH;
            let sd = 1.0 / (d as f64).sqrt();
            let w = BlockWeights {
                spec: spec.clone(),
                proj: gaussian(&mut rng, (fan_in, d), 1.0 / (fan_in as f64).sqrt()),
                wq: gaussian(&mut rng, (d, d), sd),
                wk: gaussian(&mut rng, (d, d), sd),
                wv: gaussian(&mut rng, (d, d), sd),
                wo: gaussian(&mut rng, (d, d), sd),
                wq_cross: gaussian(&mut rng, (d, d), sd),
                wk_cross: gaussian(&mut rng, (TEXT_DIM, d), 1.0 / (TEXT_DIM as f64).sqrt()),
                wv_cross: gaussian(&mut rng, (TEXT_DIM, d), 1.0 / (TEXT_DIM as f64).sqrt()),
                wo_cross: gaussian(&mut rng, (d, d), sd),
            };
            blocks.insert(spec.id, w);
        }
        Ok(ToyDenoiser {
            seed,
            shape,
            table,
            downscale: 1,
            mix,
            kernel,
            bias_proj,
            blocks,
        })
    }

    /// Pixel-to-latent downscale factor of the identity-with-average-pool encoder.
    pub fn with_downscale(mut self, factor: usize) -> Self {
        self.downscale = factor.max(1);
        self
    }

    pub fn downscale(&self) -> usize {
        self.downscale
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Prompt token embeddings `[TEXT_TOKENS, TEXT_DIM]`, a seeded hash of the prompt.
    pub fn embed(&self, branch: Branch<'_>) -> Array2<f64> {
        let mut hasher = Sha256::new();
        hasher.update(b"semantix-toy-text\0");
        hasher.update(self.seed.to_le_bytes());
        match branch {
            Branch::Prompt(p) => {
                hasher.update([1u8]);
                hasher.update(p.as_bytes());
            }
            Branch::Null => hasher.update([0u8]),
        }
        let digest = hasher.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(key);
        gaussian(&mut rng, (TEXT_TOKENS, TEXT_DIM), 1.0)
    }

    fn time_gain(t: usize) -> (f64, f64) {
        let u = (t as f64 / TIME_SCALE).min(1.0);
        (0.05 + 0.25 * u, 0.1 + 0.2 * u)
    }

    fn check_input(&self, x: &Latent, t: usize) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if (c, h, w) != (self.shape.channels, self.shape.height, self.shape.width) {
            return Err(Error::Shape(format!(
                "latent is {c}x{h}x{w}, backend expects {}x{}x{}",
                self.shape.channels, self.shape.height, self.shape.width
            )));
        }
        if t == 0 {
            return Err(Error::TimestepOutOfRange {
                t,
                lo: 1,
                hi: usize::MAX,
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("latent has non-finite entries".into()));
        }
        Ok(())
    }

    fn block(&self, id: BlockId) -> Result<&BlockWeights> {
        self.blocks
            .get(&id)
            .ok_or_else(|| Error::UnknownTap(id.to_string()))
    }

    fn eps(&self, x: &Latent, t: usize, branch: Branch<'_>) -> Latent {
        let (gain, bias_gain) = Self::time_gain(t);
        let (frames, c, h, w) = x.dim();
        let text = self.embed(branch).mean_axis(Axis(0)).expect("tokens");
        let bias = self.bias_proj.dot(&text) * bias_gain;
        let mut out = Latent::zeros((frames, c, h, w));
        for f in 0..frames {
            let frame = x.index_axis(Axis(0), f);
            for co in 0..c {
                let mut plane = out.slice_mut(s![f, co, .., ..]);
                for ci in 0..c {
                    plane.scaled_add(gain * self.mix[[co, ci]], &frame.index_axis(Axis(0), ci));
                }
                let src = frame.index_axis(Axis(0), co);
                for ky in 0..3 {
                    for kx in 0..3 {
                        let kval = gain * self.kernel[[co, ky, kx]];
                        for i in 0..h {
                            let si = i as isize + ky as isize - 1;
                            if si < 0 || si >= h as isize {
                                continue;
                            }
                            for j in 0..w {
                                let sj = j as isize + kx as isize - 1;
                                if sj >= 0 && sj < w as isize {
                                    plane[[i, j]] += kval * src[[si as usize, sj as usize]];
                                }
                            }
                        }
                    }
                }
                plane.mapv_inplace(|v| v + bias[co]);
            }
        }
        out
    }

    fn patch_origin(stride: usize, p: usize) -> isize {
        (stride * p + stride / 2) as isize - (PATCH / 2) as isize
    }

    /// Patch matrix `[tokens, C * 16]` of one frame for a block.
    fn patches(&self, frame: ArrayView3<f64>, stride: usize) -> Array2<f64> {
        let (c, h, w) = frame.dim();
        let (rows, cols) = (h / stride, w / stride);
        let mut out = Array2::zeros((rows * cols, c * PATCH * PATCH));
        for p in 0..rows {
            let y0 = Self::patch_origin(stride, p);
            for q in 0..cols {
                let x0 = Self::patch_origin(stride, q);
                let mut row = out.row_mut(p * cols + q);
                for ch in 0..c {
                    for dy in 0..PATCH {
                        let y = y0 + dy as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for dx in 0..PATCH {
                            let xx = x0 + dx as isize;
                            if xx >= 0 && xx < w as isize {
                                row[ch * PATCH * PATCH + dy * PATCH + dx] = frame[[ch, y as usize, xx as usize]];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Adjoint of [`Self::patches`], accumulated into `grad`.
    fn scatter_patches(&self, d_patches: &Array2<f64>, stride: usize, mut grad: ndarray::ArrayViewMut3<f64>) {
        let (c, h, w) = grad.dim();
        let cols = w / stride;
        for (token, row) in d_patches.rows().into_iter().enumerate() {
            let (p, q) = (token / cols, token % cols);
            let y0 = Self::patch_origin(stride, p);
            let x0 = Self::patch_origin(stride, q);
            for ch in 0..c {
                for dy in 0..PATCH {
                    let y = y0 + dy as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for dx in 0..PATCH {
                        let xx = x0 + dx as isize;
                        if xx >= 0 && xx < w as isize {
                            grad[[ch, y as usize, xx as usize]] += row[ch * PATCH * PATCH + dy * PATCH + dx];
                        }
                    }
                }
            }
        }
    }

    fn check_injection(&self, injection: &KvInjection, frames: usize) -> Result<()> {
        for (id, kv) in &injection.layers {
            let (heads, n, dh) = self.table.kv_shape(*id, self.shape)?;
            let want = (frames, heads, n, dh);
            if kv.keys.dim() != want || kv.values.dim() != want {
                return Err(Error::Shape(format!(
                    "injection for {id}: keys {:?} / values {:?}, layer expects {want:?}",
                    kv.keys.dim(),
                    kv.values.dim()
                )));
            }
        }
        Ok(())
    }

    fn run_block(
        &self,
        w: &BlockWeights,
        frame: ArrayView3<f64>,
        text: &Array2<f64>,
        injected: Option<(&Array3<f64>, &Array3<f64>)>,
    ) -> BlockPass {
        let heads = w.spec.heads;
        let tokens = self.patches(frame, w.spec.stride).dot(&w.proj);
        let q = tokens.dot(&w.wq);
        let (k, v) = match injected {
            Some((keys, values)) => (merge_heads(keys), merge_heads(values)),
            None => (tokens.dot(&w.wk), tokens.dot(&w.wv)),
        };
        let self_attn = attention::forward(&q, &k, &v, heads);
        let hidden = &tokens + &self_attn.out.dot(&w.wo);
        let q_cross = hidden.dot(&w.wq_cross);
        let k_cross = text.dot(&w.wk_cross);
        let v_cross = text.dot(&w.wv_cross);
        let cross_attn = attention::forward(&q_cross, &k_cross, &v_cross, heads);
        let out = &hidden + &cross_attn.out.dot(&w.wo_cross);
        BlockPass {
            q,
            k,
            v,
            self_attn,
            hidden,
            q_cross,
            k_cross,
            v_cross,
            cross_attn,
            out,
            injected: injected.is_some(),
        }
    }

    /// Reverse pass of one block for one frame, accumulated into `grad`.
    fn reverse_block(
        &self,
        w: &BlockWeights,
        pass: &BlockPass,
        d_out: Option<&Array2<f64>>,
        d_cross: Option<&[Array2<f64>]>,
        grad: ndarray::ArrayViewMut3<f64>,
    ) {
        let n = pass.out.nrows();
        let d = pass.out.ncols();
        let d_out = d_out.cloned().unwrap_or_else(|| Array2::zeros((n, d)));
        let d_cross_out = d_out.dot(&w.wo_cross.t());
        let cross = attention::backward(
            &pass.q_cross,
            &pass.k_cross,
            &pass.v_cross,
            &pass.cross_attn,
            &d_cross_out,
            d_cross,
        );
        let d_hidden = &d_out + &cross.dq.dot(&w.wq_cross.t());
        let d_self_out = d_hidden.dot(&w.wo.t());
        let sa = attention::backward(&pass.q, &pass.k, &pass.v, &pass.self_attn, &d_self_out, None);
        let mut d_tokens = d_hidden + sa.dq.dot(&w.wq.t());
        if !pass.injected {
            d_tokens = d_tokens + sa.dk.dot(&w.wk.t()) + sa.dv.dot(&w.wv.t());
        }
        let d_patches = d_tokens.dot(&w.proj.t());
        self.scatter_patches(&d_patches, w.spec.stride, grad);
    }

    fn injected_for(
        injection: Option<&KvInjection>,
        id: BlockId,
        frame: usize,
    ) -> Option<(Array3<f64>, Array3<f64>)> {
        injection.and_then(|inj| inj.layers.get(&id)).map(|kv| {
            (
                kv.keys.index_axis(Axis(0), frame).to_owned(),
                kv.values.index_axis(Axis(0), frame).to_owned(),
            )
        })
    }
}

struct BlockPass {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    self_attn: AttnForward,
    #[allow(dead_code)]
    hidden: Array2<f64>,
    q_cross: Array2<f64>,
    k_cross: Array2<f64>,
    v_cross: Array2<f64>,
    cross_attn: AttnForward,
    out: Array2<f64>,
    injected: bool,
}

/// `[heads, tokens, dh]` -> `[tokens, heads * dh]`
fn merge_heads(m: &Array3<f64>) -> Array2<f64> {
    let (heads, n, dh) = m.dim();
    let mut out = Array2::zeros((n, heads * dh));
    for h in 0..heads {
        out.slice_mut(s![.., h * dh..(h + 1) * dh])
            .assign(&m.index_axis(Axis(0), h));
    }
    out
}

/// `[tokens, heads * dh]` -> `[heads, tokens, dh]`
fn split_heads(m: &Array2<f64>, heads: usize) -> Array3<f64> {
    let (n, d) = m.dim();
    let dh = d / heads;
    let mut out = Array3::zeros((heads, n, dh));
    for h in 0..heads {
        out.index_axis_mut(Axis(0), h)
            .assign(&m.slice(s![.., h * dh..(h + 1) * dh]));
    }
    out
}

fn stack_probs(probs: &[Array2<f64>]) -> Array3<f64> {
    let (n, m) = probs[0].dim();
    let mut out = Array3::zeros((probs.len(), n, m));
    for (h, p) in probs.iter().enumerate() {
        out.index_axis_mut(Axis(0), h).assign(p);
    }
    out
}

impl Denoiser for ToyDenoiser {
    fn name(&self) -> &str {
        "toy"
    }

    fn latent_shape(&self) -> LatentShape {
        self.shape
    }

    fn tap_table(&self) -> &TapTable {
        &self.table
    }

    fn predict(
        &self,
        x: &Latent,
        t: usize,
        cond: &Condition,
        taps: &TapRequest,
        injection: Option<&KvInjection>,
    ) -> Result<DenoiserOutput> {
        self.check_input(x, t)?;
        let frames = x.dim().0;
        let needed = taps.all_blocks();
        for id in &needed {
            self.block(*id)?;
        }
        if let Some(inj) = injection {
            self.check_injection(inj, frames)?;
        }
        let eps_cond = self.eps(x, t, Branch::Prompt(&cond.prompt));
        let eps_uncond = self.eps(x, t, Branch::Null);
        let text = self.embed(Branch::Prompt(&cond.prompt));

        let mut features = BTreeMap::new();
        let mut self_attn = BTreeMap::new();
        let mut cross_attn = BTreeMap::new();
        for id in needed {
            let w = self.block(id)?;
            let (c, rows, cols) = self.table.feature_shape(id, self.shape)?;
            let n = rows * cols;
            let heads = w.spec.heads;
            let mut feat = Array4::zeros((frames, c, rows, cols));
            let mut sa = Array4::zeros((frames, heads, n, n));
            let mut ca = Array4::zeros((frames, heads, n, TEXT_TOKENS));
            for f in 0..frames {
                let inj = Self::injected_for(injection, id, f);
                let pass = self.run_block(w, x.index_axis(Axis(0), f), &text, inj.as_ref().map(|(k, v)| (k, v)));
                let grid = pass
                    .out
                    .t()
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order((c, rows, cols))
                    .expect("feature reshape");
                feat.index_axis_mut(Axis(0), f).assign(&grid);
                sa.index_axis_mut(Axis(0), f).assign(&stack_probs(&pass.self_attn.probs));
                ca.index_axis_mut(Axis(0), f).assign(&stack_probs(&pass.cross_attn.probs));
            }
            if taps.features.contains(&id) {
                features.insert(
                    id,
                    FeatureMap {
                        data: feat,
                        block: id,
                        timestep: t,
                    },
                );
            }
            if taps.self_attn.contains(&id) {
                self_attn.insert(id, sa);
            }
            if taps.cross_attn.contains(&id) {
                cross_attn.insert(id, ca);
            }
        }
        Ok(DenoiserOutput {
            eps_cond,
            eps_uncond,
            features,
            self_attn,
            cross_attn,
        })
    }

    fn capture_kv(
        &self,
        x: &Latent,
        t: usize,
        _cond: &Condition,
        layers: &BTreeSet<BlockId>,
    ) -> Result<KvInjection> {
        self.check_input(x, t)?;
        let frames = x.dim().0;
        let mut out = KvInjection::default();
        for id in layers {
            let w = self.block(*id)?;
            let (heads, n, dh) = self.table.kv_shape(*id, self.shape)?;
            let mut keys = Array4::zeros((frames, heads, n, dh));
            let mut values = Array4::zeros((frames, heads, n, dh));
            for f in 0..frames {
                let tokens = self.patches(x.index_axis(Axis(0), f), w.spec.stride).dot(&w.proj);
                keys.index_axis_mut(Axis(0), f)
                    .assign(&split_heads(&tokens.dot(&w.wk), heads));
                values
                    .index_axis_mut(Axis(0), f)
                    .assign(&split_heads(&tokens.dot(&w.wv), heads));
            }
            out.layers.insert(*id, KeyValue { keys, values });
        }
        Ok(out)
    }

    fn differentiable(&self) -> bool {
        true
    }

    fn vjp(
        &self,
        x: &Latent,
        t: usize,
        cond: &Condition,
        injection: Option<&KvInjection>,
        cotangent: &TapCotangent,
    ) -> Result<Latent> {
        self.check_input(x, t)?;
        let frames = x.dim().0;
        if let Some(inj) = injection {
            self.check_injection(inj, frames)?;
        }
        let text = self.embed(Branch::Prompt(&cond.prompt));
        let mut grad = Latent::zeros(x.raw_dim());
        let blocks: BTreeSet<BlockId> = cotangent
            .features
            .keys()
            .chain(cotangent.cross_attn.keys())
            .copied()
            .collect();
        for id in blocks {
            let w = self.block(id)?;
            let (c, rows, cols) = self.table.feature_shape(id, self.shape)?;
            let n = rows * cols;
            if let Some(df) = cotangent.features.get(&id) {
                if df.dim() != (frames, c, rows, cols) {
                    return Err(Error::Shape(format!("feature cotangent for {id} has shape {:?}", df.dim())));
                }
            }
            if let Some(dc) = cotangent.cross_attn.get(&id) {
                if dc.dim() != (frames, w.spec.heads, n, TEXT_TOKENS) {
                    return Err(Error::Shape(format!("cross-attention cotangent for {id} has shape {:?}", dc.dim())));
                }
            }
            for f in 0..frames {
                let inj = Self::injected_for(injection, id, f);
                let pass = self.run_block(w, x.index_axis(Axis(0), f), &text, inj.as_ref().map(|(k, v)| (k, v)));
                let d_out = cotangent.features.get(&id).map(|df| {
                    df.index_axis(Axis(0), f)
                        .to_owned()
                        .into_shape_with_order((c, n))
                        .expect("cotangent reshape")
                        .t()
                        .to_owned()
                });
                let d_cross: Option<Vec<Array2<f64>>> = cotangent.cross_attn.get(&id).map(|dc| {
                    dc.index_axis(Axis(0), f)
                        .outer_iter()
                        .map(|m| m.to_owned())
                        .collect()
                });
                self.reverse_block(w, &pass, d_out.as_ref(), d_cross.as_deref(), grad.index_axis_mut(Axis(0), f));
            }
        }
        Ok(grad)
    }

    fn encode(&self, pixels: &Array4<f64>) -> Result<Latent> {
        let (frames, c, h, w) = pixels.dim();
        let f = self.downscale;
        if c != self.shape.channels || h != self.shape.height * f || w != self.shape.width * f {
            return Err(Error::Shape(format!(
                "image {c}x{h}x{w} does not encode to the backend latent {}x{}x{} at downscale {f}",
                self.shape.channels, self.shape.height, self.shape.width
            )));
        }
        let (lh, lw) = (self.shape.height, self.shape.width);
        let norm = (f * f) as f64;
        Ok(Latent::from_shape_fn((frames, c, lh, lw), |(b, ch, i, j)| {
            pixels
                .slice(s![b, ch, i * f..(i + 1) * f, j * f..(j + 1) * f])
                .sum()
                / norm
        }))
    }

    fn decode(&self, latent: &Latent) -> Result<Array4<f64>> {
        let (frames, c, h, w) = latent.dim();
        let f = self.downscale;
        Ok(Array4::from_shape_fn((frames, c, h * f, w * f), |(b, ch, i, j)| {
            latent[[b, ch, i / f, j / f]]
        }))
    }
}
