//! Run configuration shared by every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::denoiser::{BlockId, TapTable};
use crate::energy::EnergyConfig;
use crate::error::{Error, Result};
use crate::schedule::{make_plan, Schedule, ScheduleConfig, TimestepPlan};

pub const SEED_ENV: &str = "SEMANTIX_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct DenoiserConfig {
    /// `toy` or the name of a registered adapter.
    pub kind: String,
    pub seed: u64,
    /// Pixel-to-latent downscale of the toy backend.
    pub downscale: usize,
    /// Square side inputs are resized to when an adapter is selected.
    pub adapter_size: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tap_table: Option<TapTable>,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            kind: "toy".into(),
            seed: 0,
            downscale: 4,
            adapter_size: 512,
            tap_table: None,
        }
    }
}

impl DenoiserConfig {
    pub fn is_toy(&self) -> bool {
        self.kind == "toy"
    }

    pub fn tap_table(&self) -> TapTable {
        self.tap_table.clone().unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct PlanConfig {
    pub t_start: usize,
    pub n_steps: usize,
    pub inversion_seed: u64,
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig {
            t_start: 601,
            n_steps: 60,
            inversion_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct PromptConfig {
    pub context: String,
    pub reference: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct IoConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub context: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub energy_log: bool,
}

impl Default for IoConfig {
    fn default() -> Self {
        IoConfig {
            context: None,
            reference: None,
            output_dir: PathBuf::from("semantix-out"),
            energy_log: true,
        }
    }
}

/// Everything a run needs; defaults are the published image settings.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct RunConfig {
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub plan: PlanConfig,
    pub guidance: EnergyConfig,
    pub prompts: PromptConfig,
    pub io: IoConfig,
}

/// Named bundles of guidance weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Image,
    Video,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(Preset::Image),
            "video" => Ok(Preset::Video),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }
}

impl RunConfig {
    /// Parses TOML, or JSON when the text starts with `{`.
    pub fn parse(text: &str) -> Result<Self> {
        if text.trim_start().starts_with('{') {
            Ok(serde_json::from_str(text)?)
        } else {
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn apply_preset(&mut self, preset: Preset) {
        let (gamma_ref, gamma_c, gamma_reg, lambda_pe) = match preset {
            Preset::Image => (3.0, 0.9, 1.0, 3.0),
            Preset::Video => (6.0, 3.0, 5.0, 3.0),
        };
        let g = &mut self.guidance;
        g.gamma_ref = gamma_ref;
        g.gamma_c = gamma_c;
        g.gamma_reg = gamma_reg;
        g.lambda_pe = lambda_pe;
    }

    /// Replaces every seed with `seed`.
    pub fn override_seeds(&mut self, seed: u64) {
        self.denoiser.seed = seed;
        self.plan.inversion_seed = seed;
        self.guidance.shuffle_seed = seed;
    }

    /// Applies `SEMANTIX_SEED` when it is set.
    pub fn apply_seed_env(&mut self) -> Result<()> {
        if let Ok(raw) = std::env::var(SEED_ENV) {
            let seed = raw
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got `{raw}`")))?;
            self.override_seeds(seed);
        }
        Ok(())
    }

    pub fn build_schedule(&self) -> Result<Schedule> {
        self.schedule.build()
    }

    pub fn build_plan(&self, schedule: &Schedule) -> Result<TimestepPlan> {
        make_plan(schedule, self.plan.t_start, self.plan.n_steps)
    }

    /// Checks every section before any compute.
    pub fn validate(&self) -> Result<()> {
        let schedule = self.build_schedule()?;
        let plan = self.build_plan(&schedule)?;
        self.guidance.validate(plan.len())?;
        let table = self.denoiser.tap_table();
        table.validate()?;
        let check = |ids: &std::collections::BTreeSet<BlockId>, what: &str| -> Result<()> {
            for id in ids {
                table
                    .block(*id)
                    .map_err(|_| Error::Config(format!("{what} names {id}, which the tap table does not have")))?;
            }
            Ok(())
        };
        check(&self.guidance.feature_blocks, "feature-blocks")?;
        check(&self.guidance.swap_layers, "swap-layers")?;
        if self.denoiser.kind.trim().is_empty() {
            return Err(Error::Config("denoiser kind must not be empty".into()));
        }
        if self.denoiser.downscale == 0 {
            return Err(Error::Config("denoiser downscale must be at least 1".into()));
        }
        if self.denoiser.adapter_size == 0 {
            return Err(Error::Config("denoiser adapter-size must be positive".into()));
        }
        Ok(())
    }
}
