//! Edit-friendly DDPM inversion.
//!
//! Every plan level gets its own independently noised copy of the input; the
//! per-step noise maps are then solved from the reverse recursion
//! `x_prev = mu_hat(x_t) + sigma_t z_t`, so replaying the stored maps
//! reproduces the input.

use std::collections::BTreeMap;

use ndarray::{Array4, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::denoiser::{Condition, Denoiser, Latent, TapRequest};
use crate::error::{Error, Result};
use crate::sampler::cfg_combine;
use crate::schedule::{Schedule, TimestepPlan};

/// Terminal latent plus the per-step noise maps of one inverted input.
#[derive(Debug, Clone, PartialEq)]
pub struct InversionRecord {
    /// Latent at `plan.t_start()`.
    pub x_t: Array4<f32>,
    /// One map per plan step, keyed by the step it leaves.
    pub noise_maps: BTreeMap<usize, Array4<f32>>,
    pub plan: TimestepPlan,
    pub condition: Condition,
    pub omega: f64,
    pub seed: u64,
}

impl InversionRecord {
    pub fn x_t_f64(&self) -> Latent {
        self.x_t.mapv(f64::from)
    }

    pub fn noise_map(&self, t: usize) -> Result<&Array4<f32>> {
        self.noise_maps.get(&t).ok_or(Error::MissingNoiseMap(t))
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        self.x_t.dim()
    }
}

/// Independent forward noising `sqrt(abar_t) x0 + sqrt(1 - abar_t) eps_t` at each plan step.
///
/// Each step draws from its own ChaCha stream, so a level's noise depends
/// only on `(seed, t)`.
pub fn diffuse_independent(
    x0: &Latent,
    schedule: &Schedule,
    plan: &TimestepPlan,
    seed: u64,
) -> Result<BTreeMap<usize, Latent>> {
    let mut out = BTreeMap::new();
    for &t in plan.ascending() {
        let abar = schedule.alpha_bar(t)?;
        out.insert(t, diffuse_with_alpha_bar(x0, abar, seed, t as u64));
    }
    Ok(out)
}

/// Forward-noised copy of `x0` at level `t`, using the same stream as inversion.
pub fn noised_latent(x0: &Latent, schedule: &Schedule, t: usize, seed: u64) -> Result<Latent> {
    Ok(diffuse_with_alpha_bar(x0, schedule.alpha_bar(t)?, seed, t as u64))
}

pub(crate) fn diffuse_with_alpha_bar(x0: &Latent, abar: f64, seed: u64, stream: u64) -> Latent {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let (signal, noise) = (abar.sqrt(), (1.0 - abar).sqrt());
    let mut out = x0.clone();
    out.mapv_inplace(|v| {
        let e: f64 = StandardNormal.sample(&mut rng);
        signal * v + noise * e
    });
    out
}

/// `mu_hat = sqrt(abar_prev) (x_t - sqrt(1 - abar_t) eps) / sqrt(abar_t) + sqrt(1 - abar_prev - sigma^2) eps`.
///
/// `abar_prev` is read at `t_prev`, which may be several native steps below `t`.
pub fn compute_mu_hat(
    x_t: &Latent,
    eps_hat: &Latent,
    t: usize,
    t_prev: usize,
    schedule: &Schedule,
) -> Result<Latent> {
    let sigma = schedule.step_sigma(t, t_prev)?;
    mu_hat_with_sigma(x_t, eps_hat, t, t_prev, sigma, schedule)
}

pub(crate) fn mu_hat_with_sigma(
    x_t: &Latent,
    eps_hat: &Latent,
    t: usize,
    t_prev: usize,
    sigma: f64,
    schedule: &Schedule,
) -> Result<Latent> {
    if x_t.dim() != eps_hat.dim() {
        return Err(Error::Shape(format!(
            "latent {:?} vs noise prediction {:?}",
            x_t.dim(),
            eps_hat.dim()
        )));
    }
    let abar_t = schedule.alpha_bar(t)?;
    let abar_prev = schedule.target_alpha_bar(t_prev)?;
    let limit = 1.0 - abar_prev;
    let radicand = limit - sigma * sigma;
    if radicand < -1e-14 {
        return Err(Error::NegativeRadicand {
            sigma_sq: sigma * sigma,
            limit,
        });
    }
    let direction = radicand.max(0.0).sqrt();
    let x0_scale = (abar_prev / abar_t).sqrt();
    let noise_scale = (1.0 - abar_t).sqrt();
    let mut out = Latent::zeros(x_t.raw_dim());
    Zip::from(&mut out)
        .and(x_t)
        .and(eps_hat)
        .for_each(|o, &x, &e| *o = x0_scale * (x - noise_scale * e) + direction * e);
    Ok(out)
}

/// `(x_prev - mu_hat) / sigma`.
pub fn extract_noise(x_prev: &Latent, mu_hat: &Latent, sigma: f64) -> Result<Latent> {
    if !(sigma > 0.0) {
        return Err(Error::ZeroSigma(sigma));
    }
    if x_prev.dim() != mu_hat.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", x_prev.dim(), mu_hat.dim())));
    }
    Ok((x_prev - mu_hat) / sigma)
}

/// One reverse step `mu_hat + sigma z`; `z = None` means a noiseless step.
pub(crate) fn reverse_step(
    x_t: &Latent,
    eps_hat: &Latent,
    t: usize,
    t_prev: usize,
    schedule: &Schedule,
    z: Option<&Array4<f32>>,
) -> Result<Latent> {
    let sigma = schedule.step_sigma(t, t_prev)?;
    let mut x = mu_hat_with_sigma(x_t, eps_hat, t, t_prev, sigma, schedule)?;
    if let Some(z) = z {
        if z.dim() != x.dim() {
            return Err(Error::Shape(format!("noise map {:?} vs latent {:?}", z.dim(), x.dim())));
        }
        Zip::from(&mut x).and(z).for_each(|v, &n| *v += sigma * f64::from(n));
    }
    Ok(x)
}

pub(crate) fn guided_eps(
    backend: &dyn Denoiser,
    x: &Latent,
    t: usize,
    cond: &Condition,
    omega: f64,
) -> Result<Latent> {
    let out = backend.predict(x, t, cond, &TapRequest::none(), None)?;
    cfg_combine(&out.eps_cond, &out.eps_uncond, omega)
}

/// Inverts `x0` into a terminal latent plus one noise map per plan step.
///
/// The noise maps are solved against the replayed trajectory, i.e. after
/// each step the current latent is set to `mu_hat + sigma z` with the stored
/// (float32) `z`, which is exactly what [`reconstruct`] will compute.
pub fn invert(
    x0: &Latent,
    backend: &dyn Denoiser,
    cond: &Condition,
    schedule: &Schedule,
    plan: &TimestepPlan,
    omega: f64,
    seed: u64,
) -> Result<InversionRecord> {
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Shape("input latent has non-finite entries".into()));
    }
    let levels = diffuse_independent(x0, schedule, plan, seed)?;
    let x_t = levels[&plan.t_start()].mapv(|v| v as f32);
    let mut current = x_t.mapv(f64::from);
    let mut noise_maps = BTreeMap::new();
    for (t, t_prev) in plan.transitions() {
        let target = if t_prev == 0 { x0 } else { &levels[&t_prev] };
        let eps_hat = guided_eps(backend, &current, t, cond, omega)?;
        let sigma = schedule.step_sigma(t, t_prev)?;
        let mu = mu_hat_with_sigma(&current, &eps_hat, t, t_prev, sigma, schedule)?;
        let z = if sigma > 0.0 {
            extract_noise(target, &mu, sigma)?.mapv(|v| v as f32)
        } else {
            Array4::zeros(x0.raw_dim())
        };
        let mut next = mu;
        Zip::from(&mut next).and(&z).for_each(|v, &n| *v += sigma * f64::from(n));
        current = next;
        noise_maps.insert(t, z);
    }
    Ok(InversionRecord {
        x_t,
        noise_maps,
        plan: plan.clone(),
        condition: cond.clone(),
        omega,
        seed,
    })
}

/// Replays the stored noise maps from the terminal latent down to level 0.
pub fn reconstruct(
    record: &InversionRecord,
    backend: &dyn Denoiser,
    schedule: &Schedule,
    omega: f64,
) -> Result<Latent> {
    let mut x = record.x_t_f64();
    for (t, t_prev) in record.plan.transitions() {
        let z = record.noise_map(t)?;
        let eps_hat = guided_eps(backend, &x, t, &record.condition, omega)?;
        x = reverse_step(&x, &eps_hat, t, t_prev, schedule, Some(z))?;
    }
    Ok(x)
}
