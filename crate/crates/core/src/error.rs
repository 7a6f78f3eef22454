use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("beta[{index}] = {value} is outside (0, 1)")]
    InvalidBeta { index: usize, value: f64 },

    #[error("timestep {t} is outside [{lo}, {hi}]")]
    TimestepOutOfRange { t: usize, lo: usize, hi: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unknown tap or layer id `{0}`")]
    UnknownTap(String),

    #[error("negative radicand in mu-hat: sigma^2 = {sigma_sq} exceeds 1 - alpha_bar_prev = {limit}")]
    NegativeRadicand { sigma_sq: f64, limit: f64 },

    #[error("sigma must be positive to extract a noise map (got {0})")]
    ZeroSigma(f64),

    #[error("inversion record has no noise map for timestep {0}")]
    MissingNoiseMap(usize),

    #[error("empty mask: {0}")]
    EmptyMask(&'static str),

    #[error("non-finite latent at sampling step {step} (t = {t})")]
    NonFinite { step: usize, t: usize },

    #[error("backend `{0}` does not report gradients")]
    NotDifferentiable(String),

    #[error("image of {height}x{width} is smaller than the {window}x{window} SSIM window")]
    ImageTooSmall {
        height: usize,
        width: usize,
        window: usize,
    },

    #[error("session already finished after {0} steps")]
    SessionFinished(usize),

    #[error("archive: {0}")]
    Archive(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
