//! Variance schedules and timestep plans.
//!
//! Timesteps are 1-based: `t` ranges over `1..=T`, and level `0` is the clean
//! latent with `alpha_bar(0) = 1`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the per-step betas are produced.
#[derive(Debug, Clone, PartialEq)]
pub enum BetaSpec {
    /// Betas linearly interpolated from `start` (t = 1) to `end` (t = T).
    Linear { start: f64, end: f64 },
    /// Betas given explicitly, one per timestep.
    Explicit(Vec<f64>),
}

impl Default for BetaSpec {
    fn default() -> Self {
        BetaSpec::Linear {
            start: 0.00085,
            end: 0.012,
        }
    }
}

impl BetaSpec {
    fn betas(&self, num_steps: usize) -> Result<Vec<f64>> {
        match self {
            BetaSpec::Linear { start, end } => {
                if num_steps == 1 {
                    return Ok(vec![*start]);
                }
                let span = (num_steps - 1) as f64;
                Ok((0..num_steps)
                    .map(|i| start + (end - start) * i as f64 / span)
                    .collect())
            }
            BetaSpec::Explicit(betas) => {
                if betas.len() != num_steps {
                    return Err(Error::Config(format!(
                        "explicit beta list has {} entries, expected {num_steps}",
                        betas.len()
                    )));
                }
                Ok(betas.clone())
            }
        }
    }
}

impl fmt::Display for BetaSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BetaSpec::Linear { start, end } => write!(f, "linear({start}, {end})"),
            BetaSpec::Explicit(betas) => {
                write!(f, "explicit(")?;
                for (i, b) in betas.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{b}")?;
                }
                write!(f, ")")
            }
        }
    }
}

impl FromStr for BetaSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let parse_args = |body: &str| -> Result<Vec<f64>> {
            body.split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Config(format!("bad number `{}` in beta spec", v.trim())))
                })
                .collect()
        };
        let (name, rest) = s
            .split_once('(')
            .ok_or_else(|| Error::Config(format!("unrecognised beta spec `{s}`")))?;
        let body = rest
            .strip_suffix(')')
            .ok_or_else(|| Error::Config(format!("unterminated beta spec `{s}`")))?;
        match name.trim() {
            "linear" => {
                let args = parse_args(body)?;
                if args.len() != 2 {
                    return Err(Error::Config(format!(
                        "linear beta spec takes two arguments, got {}",
                        args.len()
                    )));
                }
                Ok(BetaSpec::Linear {
                    start: args[0],
                    end: args[1],
                })
            }
            "explicit" => Ok(BetaSpec::Explicit(parse_args(body)?)),
            other => Err(Error::Config(format!("unknown beta schedule `{other}`"))),
        }
    }
}

impl Serialize for BetaSpec {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BetaSpec {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Which closed form to use for the per-step noise scale.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaVariant {
    /// `eta * beta_t * (1 - abar_{t-1}) / (1 - abar_t)`, no square root.
    PaperLiteral,
    /// `eta * sqrt(beta_t * (1 - abar_{t-1}) / (1 - abar_t))`; eta = 1 is the DDPM posterior std.
    #[default]
    PosteriorSqrt,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    eta: f64,
    variant: SigmaVariant,
}

/// Serializable schedule parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub num_steps: usize,
    pub beta_spec: BetaSpec,
    pub eta: f64,
    pub sigma_variant: SigmaVariant,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            num_steps: 1000,
            beta_spec: BetaSpec::default(),
            eta: 1.0,
            sigma_variant: SigmaVariant::PosteriorSqrt,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<Schedule> {
        Ok(Schedule::new(self.num_steps, &self.beta_spec, self.eta)?.with_sigma_variant(self.sigma_variant))
    }
}

pub fn make_schedule(num_steps: usize, beta_spec: &BetaSpec, eta: f64) -> Result<Schedule> {
    Schedule::new(num_steps, beta_spec, eta)
}

impl Schedule {
    pub fn new(num_steps: usize, beta_spec: &BetaSpec, eta: f64) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::Config(format!("eta = {eta} is outside [0, 1]")));
        }
        let beta = beta_spec.betas(num_steps)?;
        for (i, &b) in beta.iter().enumerate() {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::InvalidBeta { index: i + 1, value: b });
            }
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Schedule {
            beta,
            alpha,
            alpha_bar,
            eta,
            variant: SigmaVariant::default(),
        })
    }

    /// Sets the variant used by [`Schedule::step_sigma`].
    pub fn with_sigma_variant(mut self, variant: SigmaVariant) -> Self {
        self.variant = variant;
        self
    }

    pub fn sigma_variant(&self) -> SigmaVariant {
        self.variant
    }

    pub fn num_steps(&self) -> usize {
        self.beta.len()
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.num_steps() {
            return Err(Error::TimestepOutOfRange {
                t,
                lo: 1,
                hi: self.num_steps(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.beta[t - 1])
    }

    /// `alpha_bar(0)` is 1 by definition.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.check(t)?;
        Ok(self.alpha_bar[t - 1])
    }

    /// Cumulative alpha of the level a plan transition lands on.
    ///
    /// Level 0 (the clean latent) uses `alpha_bar(1)` rather than 1 so the
    /// last transition of a plan keeps a nonzero noise scale and the
    /// inversion stays exactly invertible.
    pub fn target_alpha_bar(&self, t_prev: usize) -> Result<f64> {
        if t_prev == 0 {
            return Ok(self.alpha_bar[0]);
        }
        self.alpha_bar(t_prev)
    }

    /// Native single-step noise scale at `t` (with `alpha_bar(0) = 1`).
    pub fn sigma(&self, t: usize, variant: SigmaVariant) -> Result<f64> {
        self.check(t)?;
        let ratio = self.beta[t - 1] * (1.0 - self.alpha_bar(t - 1)?) / (1.0 - self.alpha_bar[t - 1]);
        Ok(scale(self.eta, ratio, variant))
    }

    /// Noise scale for a plan transition `t -> t_prev`.
    ///
    /// Uses the effective beta `1 - abar_t / abar_prev` of the skipped span;
    /// equals [`Schedule::sigma`] whenever `t_prev = t - 1 >= 1`.
    pub fn sigma_between(&self, t: usize, t_prev: usize, variant: SigmaVariant) -> Result<f64> {
        self.check(t)?;
        if t_prev >= t {
            return Err(Error::Config(format!(
                "transition {t} -> {t_prev} does not move toward the clean latent"
            )));
        }
        let abar_t = self.alpha_bar[t - 1];
        let abar_prev = self.target_alpha_bar(t_prev)?;
        let beta_eff = (1.0 - abar_t / abar_prev).max(0.0);
        let ratio = beta_eff * (1.0 - abar_prev) / (1.0 - abar_t);
        Ok(scale(self.eta, ratio, variant))
    }

    /// [`Schedule::sigma_between`] with the schedule's configured variant.
    pub fn step_sigma(&self, t: usize, t_prev: usize) -> Result<f64> {
        self.sigma_between(t, t_prev, self.variant)
    }
}

fn scale(eta: f64, ratio: f64, variant: SigmaVariant) -> f64 {
    match variant {
        SigmaVariant::PaperLiteral => eta * ratio,
        SigmaVariant::PosteriorSqrt => eta * ratio.sqrt(),
    }
}

/// Timesteps visited by inversion and sampling, stored ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimestepPlan {
    steps: Vec<usize>,
    t_start: usize,
}

/// Evenly spaced plan of `n_steps` indices ending at `t_start`.
///
/// Index `k` (1-based) is `k * t_start / n_steps` rounded half up, so the plan
/// always contains `t_start` and is strictly increasing.
pub fn make_plan(schedule: &Schedule, t_start: usize, n_steps: usize) -> Result<TimestepPlan> {
    if n_steps == 0 {
        return Err(Error::Config("plan needs at least one step".into()));
    }
    if n_steps > t_start {
        return Err(Error::Config(format!(
            "n_steps = {n_steps} exceeds t_start = {t_start}"
        )));
    }
    if t_start > schedule.num_steps() {
        return Err(Error::TimestepOutOfRange {
            t: t_start,
            lo: 1,
            hi: schedule.num_steps(),
        });
    }
    let steps = (1..=n_steps)
        .map(|k| (2 * k * t_start + n_steps) / (2 * n_steps))
        .collect();
    Ok(TimestepPlan { steps, t_start })
}

impl TimestepPlan {
    /// Builds a plan from explicit steps (any order); validates the invariants.
    pub fn from_steps(mut steps: Vec<usize>, schedule: &Schedule) -> Result<Self> {
        steps.sort_unstable();
        steps.dedup();
        match (steps.first(), steps.last()) {
            (Some(&lo), Some(&hi)) if lo >= 1 && hi <= schedule.num_steps() => Ok(TimestepPlan {
                t_start: hi,
                steps,
            }),
            (Some(_), Some(&hi)) => Err(Error::TimestepOutOfRange {
                t: hi,
                lo: 1,
                hi: schedule.num_steps(),
            }),
            _ => Err(Error::Config("empty plan".into())),
        }
    }

    pub fn t_start(&self) -> usize {
        self.t_start
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Ascending order (the order inversion consumes).
    pub fn ascending(&self) -> &[usize] {
        &self.steps
    }

    /// Descending order (the order sampling consumes).
    pub fn descending(&self) -> Vec<usize> {
        self.steps.iter().rev().copied().collect()
    }

    /// `(t, t_prev)` pairs in sampling order; the last pair lands on level 0.
    pub fn transitions(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.steps.len());
        for i in (0..self.steps.len()).rev() {
            let prev = if i == 0 { 0 } else { self.steps[i - 1] };
            out.push((self.steps[i], prev));
        }
        out
    }
}
