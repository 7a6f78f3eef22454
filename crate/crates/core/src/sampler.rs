//! Guided three-track sampling: context and reference replay their own
//! inversions while the output track follows the context noise maps with an
//! energy gradient added to its noise prediction.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array4, Axis, Zip};
use serde::Serialize;

use crate::correspondence::{
    add_positional_encoding, cluster_masks, make_positional_field, match_features, rearrange, resample_mask,
    shuffle_assignment, KMeansOptions, RegionMask,
};
use crate::denoiser::{Condition, Denoiser, Latent, TapRequest};
use crate::energy::{energy_gradient, max_abs, EnergyBreakdown, EnergyConfig, EnergyTargets, SwapTarget};
use crate::error::{Error, Result};
use crate::inversion::{invert, reverse_step, InversionRecord};
use crate::schedule::{Schedule, TimestepPlan};

pub const ADAIN_EPS: f64 = 1e-5;

/// Classifier-free guidance `(1 + omega) eps_cond - omega eps_uncond`,
/// evaluated as `eps_cond + omega (eps_cond - eps_uncond)` so that equal
/// branches come back unchanged.
pub fn cfg_combine(eps_cond: &Latent, eps_uncond: &Latent, omega: f64) -> Result<Latent> {
    if eps_cond.dim() != eps_uncond.dim() {
        return Err(Error::Shape(format!(
            "conditional {:?} vs unconditional {:?}",
            eps_cond.dim(),
            eps_uncond.dim()
        )));
    }
    let mut out = Latent::zeros(eps_cond.raw_dim());
    Zip::from(&mut out)
        .and(eps_cond)
        .and(eps_uncond)
        .for_each(|o, &c, &u| *o = c + omega * (c - u));
    Ok(out)
}

fn channel_stats(x: &Latent) -> Vec<(f64, f64)> {
    x.axis_iter(Axis(1))
        .map(|ch| {
            let n = ch.len() as f64;
            let mean = ch.sum() / n;
            let var = ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            (mean, var.sqrt())
        })
        .collect()
}

/// Per-channel renormalisation of `x_out` to the mean and standard deviation
/// of `x_ref`, with statistics pooled over frames and space. The divisor is
/// `max(std, eps)`.
pub fn adain_latents(x_out: &Latent, x_ref: &Latent, eps: f64) -> Result<Latent> {
    if x_out.dim().1 != x_ref.dim().1 {
        return Err(Error::Shape(format!(
            "{} output channels vs {} reference channels",
            x_out.dim().1,
            x_ref.dim().1
        )));
    }
    let src = channel_stats(x_out);
    let dst = channel_stats(x_ref);
    let mut out = x_out.clone();
    for (c, mut ch) in out.axis_iter_mut(Axis(1)).enumerate() {
        let ((m, s), (mr, sr)) = (src[c], dst[c]);
        let scale = sr / s.max(eps);
        ch.mapv_inplace(|v| (v - m) * scale + mr);
    }
    Ok(out)
}

/// One line of the energy log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub t: usize,
    pub style: f64,
    pub spatial: f64,
    pub regularizer: f64,
    pub total: f64,
    pub grad_max_abs: f64,
}

/// State of a guided run between steps.
#[derive(Debug, Clone)]
pub struct TransferSession {
    pub context: InversionRecord,
    pub reference: InversionRecord,
    pub context_cond: Condition,
    pub reference_cond: Condition,
    pub x_context: Latent,
    pub x_reference: Latent,
    pub x_out: Latent,
    pub step_index: usize,
    pub cfg: EnergyConfig,
    pub plan: TimestepPlan,
    /// Seeds the k-means initialisation.
    pub mask_seed: u64,
    pub log: Vec<StepLog>,
    /// Frames where clustering fell back to the full mask.
    pub degenerate_masks: usize,
}

impl TransferSession {
    pub fn new(
        context: InversionRecord,
        reference: InversionRecord,
        cfg: EnergyConfig,
        mask_seed: u64,
    ) -> Result<Self> {
        if context.plan != reference.plan {
            return Err(Error::Config("context and reference were inverted with different plans".into()));
        }
        if context.shape() != reference.shape() {
            return Err(Error::Shape(format!(
                "context latent {:?} vs reference latent {:?}",
                context.shape(),
                reference.shape()
            )));
        }
        let plan = context.plan.clone();
        cfg.validate(plan.len())?;
        Ok(TransferSession {
            x_context: context.x_t_f64(),
            x_reference: reference.x_t_f64(),
            x_out: context.x_t_f64(),
            context_cond: context.condition.clone(),
            reference_cond: reference.condition.clone(),
            context,
            reference,
            step_index: 0,
            cfg,
            plan,
            mask_seed,
            log: Vec::new(),
            degenerate_masks: 0,
        })
    }

    pub fn finished(&self) -> bool {
        self.step_index >= self.plan.len()
    }

    fn guided(&self) -> bool {
        self.cfg.gamma_ref != 0.0 || self.cfg.gamma_c != 0.0 || self.cfg.gamma_reg != 0.0
    }

    /// Advances all three tracks by one plan step.
    pub fn guided_step(&mut self, backend: &dyn Denoiser, schedule: &Schedule) -> Result<StepLog> {
        if self.finished() {
            return Err(Error::SessionFinished(self.step_index));
        }
        let step = self.step_index;
        let (t, t_prev) = self.plan.transitions()[step];
        let cfg = &self.cfg;
        let blocks = cfg.feature_blocks.clone();
        let mask_block = *blocks.iter().next_back().expect("validated nonempty");
        let swap_active = step >= cfg.swap_start && !cfg.swap_layers.is_empty();

        let ref_taps = TapRequest {
            features: blocks.clone(),
            self_attn: [mask_block].into(),
            cross_attn: BTreeSet::new(),
        };
        let ctx_taps = TapRequest {
            cross_attn: if swap_active { cfg.swap_layers.clone() } else { BTreeSet::new() },
            ..ref_taps.clone()
        };
        let c_out = backend.predict(&self.x_context, t, &self.context_cond, &ctx_taps, None)?;
        let r_out = backend.predict(&self.x_reference, t, &self.reference_cond, &ref_taps, None)?;
        let o_out = backend.predict(&self.x_out, t, &self.context_cond, &TapRequest::none(), None)?;

        let eps_c = cfg_combine(&c_out.eps_cond, &c_out.eps_uncond, cfg.omega)?;
        let eps_r = cfg_combine(&r_out.eps_cond, &r_out.eps_uncond, cfg.omega)?;
        let mut eps_o = cfg_combine(&o_out.eps_cond, &o_out.eps_uncond, cfg.omega)?;

        let shape = backend.latent_shape();
        let table = backend.tap_table();
        let (_, mrows, mcols) = table.feature_shape(mask_block, shape)?;
        let kopts = KMeansOptions::new(cfg.k_clusters, self.mask_seed);
        let cm = cluster_masks(&c_out.self_attn[&mask_block], mrows, mcols, &kopts)?;
        let rm = cluster_masks(&r_out.self_attn[&mask_block], mrows, mcols, &kopts)?;
        self.degenerate_masks += cm.degenerate.iter().chain(&rm.degenerate).filter(|&&d| d).count();

        let frames = self.x_out.dim().0;
        let mut ref_star = BTreeMap::new();
        let mut style_masks = BTreeMap::new();
        for id in &blocks {
            let f_c = &c_out.features[id];
            let f_r = &r_out.features[id];
            let (rows, cols) = (f_c.rows(), f_c.cols());
            let masks = RegionMask::new(resample_mask(&cm.mask, rows, cols), resample_mask(&rm.mask, rows, cols))?;
            let pe = make_positional_field(f_c.channels(), rows, cols, cfg.pe_mode, Some(frames), cfg.lambda_pe)?;
            let fc_bar = add_positional_encoding(f_c, &pe)?;
            let fr_bar = add_positional_encoding(f_r, &pe)?;
            let mut corr = match_features(&fc_bar, &fr_bar, &masks)?;
            if cfg.shuffle_correspondence {
                let seed = cfg.shuffle_seed ^ ((step as u64) << 8 | u64::from(id.0));
                corr = shuffle_assignment(&corr, &fc_bar, &fr_bar, seed)?;
            }
            ref_star.insert(*id, rearrange(f_r, &corr)?);
            style_masks.insert(*id, masks.context);
        }

        let mut breakdown = EnergyBreakdown::default();
        let mut grad_max_abs = 0.0;
        if self.guided() {
            let swap = if swap_active {
                Some(SwapTarget {
                    injection: backend.capture_kv(&self.x_reference, t, &self.reference_cond, &cfg.swap_layers)?,
                    ca_context: c_out.cross_attn.clone(),
                })
            } else {
                None
            };
            let targets = EnergyTargets {
                ref_star,
                context_features: c_out.features.clone(),
                style_masks,
                swap,
            };
            let g = energy_gradient(backend, &self.x_out, t, &self.context_cond, &targets, cfg)?;
            breakdown = g.breakdown;
            grad_max_abs = max_abs(&g.gradient);
            eps_o += &g.gradient;
        }

        let z_c = self.context.noise_map(t)?;
        let z_r = self.reference.noise_map(t)?;
        let x_c = reverse_step(&self.x_context, &eps_c, t, t_prev, schedule, Some(z_c))?;
        let x_r = reverse_step(&self.x_reference, &eps_r, t, t_prev, schedule, Some(z_r))?;
        let mut x_o = reverse_step(&self.x_out, &eps_o, t, t_prev, schedule, Some(z_c))?;
        if step >= cfg.adain_start {
            x_o = adain_latents(&x_o, &x_r, ADAIN_EPS)?;
        }
        if [&x_c, &x_r, &x_o].iter().any(|x| x.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite { step, t });
        }
        self.x_context = x_c;
        self.x_reference = x_r;
        self.x_out = x_o;
        self.step_index += 1;
        let entry = StepLog {
            step,
            t,
            style: breakdown.style,
            spatial: breakdown.spatial,
            regularizer: breakdown.regularizer,
            total: breakdown.total,
            grad_max_abs,
        };
        self.log.push(entry);
        Ok(entry)
    }

    pub fn run(&mut self, backend: &dyn Denoiser, schedule: &Schedule) -> Result<()> {
        while !self.finished() {
            self.guided_step(backend, schedule)?;
        }
        Ok(())
    }
}

/// Prompts for the context (also used by the output track) and the reference.
#[derive(Debug, Clone, PartialEq)]
pub struct Prompts {
    pub context: Condition,
    pub reference: Condition,
}

/// Decoded tracks and the per-step energy log of a finished run.
#[derive(Debug, Clone)]
pub struct TransferOutput {
    pub context_recon: Array4<f64>,
    pub reference_recon: Array4<f64>,
    pub output: Array4<f64>,
    pub log: Vec<StepLog>,
    pub degenerate_masks: usize,
}

/// Seeds used by one run: the context inversion, the reference inversion and
/// the mask clustering.
pub fn derive_seeds(seed: u64) -> (u64, u64, u64) {
    (seed, seed.wrapping_add(1), seed.wrapping_add(2))
}

/// Inverts both inputs, runs every plan step and decodes the three tracks.
/// A single-frame reference is repeated to the context's frame count.
#[allow(clippy::too_many_arguments)]
pub fn run_transfer(
    context_pixels: &Array4<f64>,
    reference_pixels: &Array4<f64>,
    prompts: &Prompts,
    backend: &dyn Denoiser,
    schedule: &Schedule,
    cfg: &EnergyConfig,
    plan: &TimestepPlan,
    seed: u64,
) -> Result<TransferOutput> {
    cfg.validate(plan.len())?;
    let frames = context_pixels.dim().0;
    let reference_pixels = match reference_pixels.dim().0 {
        f if f == frames => reference_pixels.clone(),
        1 => {
            let views: Vec<_> = (0..frames).map(|_| reference_pixels.view()).collect();
            ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?
        }
        f => return Err(Error::Shape(format!("{f} reference frames for {frames} context frames"))),
    };
    let (seed_c, seed_r, seed_m) = derive_seeds(seed);
    let x_c = backend.encode(context_pixels)?;
    let x_r = backend.encode(&reference_pixels)?;
    let rec_c = invert(&x_c, backend, &prompts.context, schedule, plan, cfg.omega, seed_c)?;
    let rec_r = invert(&x_r, backend, &prompts.reference, schedule, plan, cfg.omega, seed_r)?;
    let mut session = TransferSession::new(rec_c, rec_r, cfg.clone(), seed_m)?;
    session.run(backend, schedule)?;
    Ok(TransferOutput {
        context_recon: backend.decode(&session.x_context)?,
        reference_recon: backend.decode(&session.x_reference)?,
        output: backend.decode(&session.x_out)?,
        log: session.log,
        degenerate_masks: session.degenerate_masks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{toy_backend, LatentShape, TapTable, ToyDenoiser};
    use crate::schedule::{make_plan, ScheduleConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(seed: u64, dim: (usize, usize, usize, usize)) -> Latent {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Latent::from_shape_fn(dim, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn cfg_algebra() {
        let c = random(1, (1, 3, 4, 4));
        let u = random(2, (1, 3, 4, 4));
        assert_eq!(cfg_combine(&c, &u, 0.0).unwrap(), c);
        for w in [0.0, 1.0, 3.5] {
            assert_eq!(cfg_combine(&c, &c, w).unwrap(), c);
        }
        assert!(cfg_combine(&c, &random(3, (1, 3, 4, 5)), 1.0).is_err());
    }

    #[test]
    fn adain_scalar_example() {
        let x = Latent::from_shape_vec((1, 1, 1, 2), vec![0.0, 2.0]).unwrap();
        let r = Latent::from_shape_vec((1, 1, 1, 2), vec![1.0, 5.0]).unwrap();
        let y = adain_latents(&x, &r, ADAIN_EPS).unwrap();
        for (a, b) in x.iter().zip(&y) {
            assert!((b - (2.0 * (a - 1.0) + 3.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn adain_matches_stats_and_is_idempotent() {
        let x = random(4, (2, 3, 5, 5)) * 3.0 + 0.5;
        let r = random(5, (2, 3, 5, 5)) * 0.4 - 1.0;
        let y = adain_latents(&x, &r, ADAIN_EPS).unwrap();
        for ((m, s), (mr, sr)) in channel_stats(&y).into_iter().zip(channel_stats(&r)) {
            assert!((m - mr).abs() < 1e-5 && (s - sr).abs() < 1e-5);
        }
        let yy = adain_latents(&y, &r, ADAIN_EPS).unwrap();
        assert!(Zip::from(&y).and(&yy).all(|a, b| (a - b).abs() < 1e-5));
        let same = adain_latents(&x, &x, ADAIN_EPS).unwrap();
        assert!(Zip::from(&x).and(&same).all(|a, b| (a - b).abs() < 1e-5));
    }

    #[test]
    fn adain_guards_flat_channels() {
        let x = Latent::from_elem((1, 2, 3, 3), 0.7);
        let r = random(6, (1, 2, 3, 3));
        let y = adain_latents(&x, &r, ADAIN_EPS).unwrap();
        assert!(y.iter().all(|v| v.is_finite()));
    }

    struct Fixture {
        backend: ToyDenoiser,
        schedule: Schedule,
        plan: TimestepPlan,
        ctx: Latent,
        reference: Latent,
    }

    fn fixture(seed: u64, steps: usize) -> Fixture {
        let shape = LatentShape::new(3, 16, 16);
        let schedule = ScheduleConfig::default().build().unwrap();
        let plan = make_plan(&schedule, 601, steps).unwrap();
        Fixture {
            backend: toy_backend(seed, shape, TapTable::default()).unwrap(),
            schedule,
            plan,
            ctx: random(seed * 2 + 1, (1, 3, 16, 16)),
            reference: random(seed * 2 + 2, (1, 3, 16, 16)),
        }
    }

    fn session(f: &Fixture, cfg: EnergyConfig) -> TransferSession {
        let rc = invert(&f.ctx, &f.backend, &Condition::new("a photo"), &f.schedule, &f.plan, cfg.omega, 1).unwrap();
        let rr = invert(&f.reference, &f.backend, &Condition::new("a painting"), &f.schedule, &f.plan, cfg.omega, 2).unwrap();
        TransferSession::new(rc, rr, cfg, 3).unwrap()
    }

    #[test]
    fn unguided_output_tracks_context() {
        let f = fixture(1, 12);
        let cfg = EnergyConfig {
            swap_start: 12,
            adain_start: 12,
            ..EnergyConfig::unguided()
        };
        let mut s = session(&f, cfg);
        assert_eq!(s.x_out, s.x_context);
        while !s.finished() {
            s.guided_step(&f.backend, &f.schedule).unwrap();
            let diff = Zip::from(&s.x_out).and(&s.x_context).fold(0.0f64, |m, a, b| m.max((a - b).abs()));
            assert!(diff <= 1e-4);
        }
        let diff = Zip::from(&s.x_context).and(&f.ctx).fold(0.0f64, |m, a, b| m.max((a - b).abs()));
        assert!(diff <= 1e-4, "context reconstruction off by {diff}");
        assert!(s.guided_step(&f.backend, &f.schedule).is_err());
    }

    #[test]
    fn guidance_leaves_other_tracks_alone() {
        let f = fixture(2, 12);
        let cfg = EnergyConfig { swap_start: 4, adain_start: 8, ..EnergyConfig::default() };
        let mut guided = session(&f, cfg);
        let mut plain = session(&f, EnergyConfig { swap_start: 4, adain_start: 8, ..EnergyConfig::unguided() });
        guided.run(&f.backend, &f.schedule).unwrap();
        plain.run(&f.backend, &f.schedule).unwrap();
        assert_eq!(guided.x_context, plain.x_context);
        assert_eq!(guided.x_reference, plain.x_reference);
        assert_ne!(guided.x_out, plain.x_out);
        assert!(guided.log.iter().all(|l| l.grad_max_abs <= 1.0));
        assert!(guided.log[..4].iter().all(|l| l.regularizer == 0.0));
        assert!(guided.log[4..].iter().any(|l| l.regularizer > 0.0));
    }

    #[test]
    fn runs_are_deterministic() {
        let f = fixture(3, 8);
        let cfg = EnergyConfig { swap_start: 2, adain_start: 4, shuffle_correspondence: true, shuffle_seed: 5, ..EnergyConfig::default() };
        let prompts = Prompts { context: Condition::new("a"), reference: Condition::new("b") };
        let px_c = f.ctx.mapv(|v| 0.5 + 0.4 * v);
        let px_r = f.reference.mapv(|v| 0.5 + 0.4 * v);
        let a = run_transfer(&px_c, &px_r, &prompts, &f.backend, &f.schedule, &cfg, &f.plan, 9).unwrap();
        let b = run_transfer(&px_c, &px_r, &prompts, &f.backend, &f.schedule, &cfg, &f.plan, 9).unwrap();
        assert_eq!(a.output, b.output);
        assert_eq!(a.log, b.log);
        let err = Zip::from(&a.context_recon).and(&px_c).fold(0.0f64, |m, x, y| m.max((x - y).abs()));
        assert!(err <= 1e-3);
    }

    #[test]
    fn adain_pins_output_stats_to_reference() {
        let f = fixture(4, 6);
        let mut s = session(&f, EnergyConfig { swap_start: 6, adain_start: 0, ..EnergyConfig::default() });
        s.run(&f.backend, &f.schedule).unwrap();
        for ((m, sd), (mr, sr)) in channel_stats(&s.x_out).into_iter().zip(channel_stats(&s.x_reference)) {
            assert!((m - mr).abs() < 1e-5 && (sd - sr).abs() < 1e-5);
        }
    }

    #[test]
    fn video_reference_is_replicated() {
        let f = fixture(5, 4);
        let cfg = EnergyConfig { swap_start: 2, adain_start: 2, ..EnergyConfig::video() };
        let prompts = Prompts { context: Condition::new("a"), reference: Condition::new("b") };
        let ctx = random(50, (3, 3, 16, 16)).mapv(|v| 0.5 + 0.4 * v);
        let reference = f.reference.mapv(|v| 0.5 + 0.4 * v);
        let out = run_transfer(&ctx, &reference, &prompts, &f.backend, &f.schedule, &cfg, &f.plan, 1).unwrap();
        assert_eq!(out.output.dim(), (3, 3, 16, 16));
        for fr in 0..3 {
            let d = Zip::from(out.reference_recon.index_axis(Axis(0), fr))
                .and(reference.index_axis(Axis(0), 0))
                .fold(0.0f64, |m, a, b| m.max((a - b).abs()));
            assert!(d <= 1e-3);
        }
    }

    fn median(mut v: Vec<f64>) -> f64 {
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
    }

    #[test]
    fn style_guidance_lowers_final_style_term() {
        let mut with = Vec::new();
        let mut without = Vec::new();
        for seed in 0..6 {
            let f = fixture(100 + seed, 30);
            for (gamma, bucket) in [(3.0, &mut with), (0.0, &mut without)] {
                let cfg = EnergyConfig { gamma_ref: gamma, ..EnergyConfig::default() };
                let mut s = session(&f, cfg);
                s.run(&f.backend, &f.schedule).unwrap();
                bucket.push(s.log.last().unwrap().style);
            }
        }
        assert!(median(with) < median(without));
    }
}
