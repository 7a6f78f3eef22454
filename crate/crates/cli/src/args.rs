use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use semantix::config::{Preset, RunConfig};
use semantix::correspondence::PeMode;
use semantix::schedule::SigmaVariant;

#[derive(Parser, Debug)]
#[command(name = "semantix", version, about = "Energy-guided semantic style transfer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Transfer the reference's style onto the context image or video.
    Transfer {
        #[arg(long)]
        context: Option<PathBuf>,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Invert an input into a noise-map archive.
    Invert {
        #[arg(long)]
        input: PathBuf,
        /// Archive directory.
        #[arg(long)]
        record: PathBuf,
        /// Prompt used for inversion (defaults to the context prompt).
        #[arg(long)]
        prompt: Option<String>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Replay an archive back to an image.
    Reconstruct {
        #[arg(long)]
        record: PathBuf,
        /// Original input, to report the reconstruction error.
        #[arg(long)]
        input: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Write PCA views of the decoder features at one timestep.
    InspectFeatures {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long, default_value_t = 601)]
        t: usize,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Gram loss and SSIM between two images or two directories of images.
    Metrics {
        a: PathBuf,
        b: PathBuf,
        /// Directory for per-pair JSON reports and summary.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Flags that override the configuration file.
#[derive(Args, Debug, Default, Clone)]
pub struct ConfigArgs {
    /// TOML or JSON configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Guidance weights: `image` or `video`.
    #[arg(long)]
    pub preset: Option<String>,
    /// Sets every seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub denoiser: Option<String>,
    #[arg(long)]
    pub downscale: Option<usize>,
    #[arg(long)]
    pub t_start: Option<usize>,
    #[arg(long)]
    pub n_steps: Option<usize>,
    #[arg(long)]
    pub inversion_seed: Option<u64>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub sigma_variant: Option<String>,
    #[arg(long)]
    pub omega: Option<f64>,
    #[arg(long)]
    pub gamma_ref: Option<f64>,
    #[arg(long)]
    pub gamma_c: Option<f64>,
    #[arg(long)]
    pub gamma_reg: Option<f64>,
    #[arg(long)]
    pub lambda_pe: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub clamp_lo: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub clamp_hi: Option<f64>,
    #[arg(long)]
    pub swap_start: Option<usize>,
    #[arg(long)]
    pub adain_start: Option<usize>,
    #[arg(long)]
    pub pe_mode: Option<String>,
    #[arg(long)]
    pub k_clusters: Option<usize>,
    #[arg(long)]
    pub shuffle_correspondence: bool,
    #[arg(long)]
    pub shuffle_seed: Option<u64>,
    #[arg(long)]
    pub context_prompt: Option<String>,
    #[arg(long)]
    pub reference_prompt: Option<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, conflicts_with = "energy_log")]
    pub no_energy_log: bool,
    #[arg(long)]
    pub energy_log: bool,
}

impl ConfigArgs {
    /// File, then preset, then flags, then `SEMANTIX_SEED`; validated.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(p) = &self.preset {
            cfg.apply_preset(p.parse::<Preset>()?);
        }
        if let Some(s) = self.seed {
            cfg.override_seeds(s);
        }
        macro_rules! set {
            ($($flag:ident => $($field:ident).+;)*) => {
                $(if let Some(v) = &self.$flag { cfg.$($field).+ = v.clone(); })*
            };
        }
        set! {
            denoiser => denoiser.kind;
            downscale => denoiser.downscale;
            t_start => plan.t_start;
            n_steps => plan.n_steps;
            inversion_seed => plan.inversion_seed;
            eta => schedule.eta;
            omega => guidance.omega;
            gamma_ref => guidance.gamma_ref;
            gamma_c => guidance.gamma_c;
            gamma_reg => guidance.gamma_reg;
            lambda_pe => guidance.lambda_pe;
            clamp_lo => guidance.clamp_lo;
            clamp_hi => guidance.clamp_hi;
            swap_start => guidance.swap_start;
            adain_start => guidance.adain_start;
            k_clusters => guidance.k_clusters;
            shuffle_seed => guidance.shuffle_seed;
            context_prompt => prompts.context;
            reference_prompt => prompts.reference;
            out => io.output_dir;
        }
        if let Some(v) = &self.sigma_variant {
            cfg.schedule.sigma_variant = match v.as_str() {
                "paper-literal" => SigmaVariant::PaperLiteral,
                "posterior-sqrt" => SigmaVariant::PosteriorSqrt,
                other => anyhow::bail!("unknown sigma variant `{other}`"),
            };
        }
        if let Some(m) = &self.pe_mode {
            cfg.guidance.pe_mode = m.parse::<PeMode>()?;
        }
        if self.shuffle_correspondence {
            cfg.guidance.shuffle_correspondence = true;
        }
        if self.no_energy_log {
            cfg.io.energy_log = false;
        }
        if self.energy_log {
            cfg.io.energy_log = true;
        }
        cfg.apply_seed_env()?;
        cfg.validate()?;
        Ok(cfg)
    }
}
