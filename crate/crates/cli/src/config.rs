//! Experiment configs. Every table rejects unknown keys; omitted keys take
//! the documented defaults and the fully resolved config is written next to
//! the results.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use ntc_core::oracles::BaConfig;
use ntc_core::optim::Schedule;
use ntc_core::sources::SourceSpec;
use ntc_core::training::{Architecture, TrainConfig};

use crate::error::{CliError, CliResult};

fn default_eval_samples() -> usize {
    200_000
}

fn default_eval_seed() -> u64 {
    1
}

fn default_resolution() -> usize {
    2000
}

/// Region scanned when extracting a quantizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scan {
    /// `[lo, hi]` for scalar models.
    pub range: Option<[f64; 2]>,
    /// `[x0, x1, y0, y1]` for two-dimensional models.
    pub bounds: Option<[f64; 4]>,
    #[serde(default = "default_resolution")]
    pub resolution: usize,
}

impl Scan {
    pub fn range(&self) -> CliResult<[f64; 2]> {
        self.range.ok_or_else(|| CliError::config("scan.range is required for scalar models"))
    }

    pub fn bounds(&self) -> CliResult<[f64; 4]> {
        self.bounds
            .ok_or_else(|| CliError::config("scan.bounds is required for two-dimensional models"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VecvqRun {
    pub source: SourceSpec,
    pub lambda: f64,
    /// 256 for scalar sources and 1024 otherwise when absent.
    pub codebook_size: Option<usize>,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
    #[serde(default = "default_eval_seed")]
    pub eval_seed: u64,
    pub scan: Option<Scan>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NtcRun {
    pub train: TrainConfig,
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
    #[serde(default = "default_eval_seed")]
    pub eval_seed: u64,
    pub scan: Option<Scan>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultirateRun {
    /// Must set `lambda_range` and `variant`.
    pub train: TrainConfig,
    /// Trade-offs at which the model is evaluated.
    pub eval_lambdas: Vec<f64>,
    /// Also train one single-trade-off model per evaluation point.
    #[serde(default)]
    pub reference_models: bool,
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
    #[serde(default = "default_eval_seed")]
    pub eval_seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Vecvq,
    NtcNoise,
    /// Noise-trained model operated with a fresh offset per vector.
    NtcDithered,
    NtcSt,
    NtcSoft,
    Ltc,
    Sullivan,
    Ba,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Vecvq => "vecvq",
            Method::NtcNoise => "ntc_noise",
            Method::NtcDithered => "ntc_dithered",
            Method::NtcSt => "ntc_st",
            Method::NtcSoft => "ntc_soft",
            Method::Ltc => "ltc",
            Method::Sullivan => "sullivan",
            Method::Ba => "ba",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VecvqSettings {
    pub codebook_size: Option<usize>,
    pub schedule: Schedule,
}

impl Default for VecvqSettings {
    fn default() -> Self {
        VecvqSettings {
            codebook_size: None,
            schedule: Schedule::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NtcSettings {
    pub arch: Architecture,
    pub schedule: Schedule,
    /// Steps for the soft-rounding proxy when it needs a longer anneal.
    pub soft_steps: Option<usize>,
    pub offset_grid: usize,
    pub offset_samples: usize,
}

impl Default for NtcSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        NtcSettings {
            arch: t.arch,
            schedule: t.schedule,
            soft_steps: None,
            offset_grid: t.offset_grid,
            offset_samples: t.offset_samples,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepRun {
    pub source: SourceSpec,
    pub lambdas: Vec<f64>,
    pub methods: Vec<Method>,
    #[serde(default)]
    pub vecvq: VecvqSettings,
    #[serde(default)]
    pub ntc: NtcSettings,
    #[serde(default)]
    pub ba: BaConfig,
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
    #[serde(default = "default_eval_seed")]
    pub eval_seed: u64,
}

fn default_jacobian_points() -> usize {
    1000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnoseRun {
    /// Model file written by `train-ntc`, relative to the config file.
    pub model: Option<PathBuf>,
    /// Or a model trained on the spot.
    pub train: Option<TrainConfig>,
    pub scan: Scan,
    #[serde(default = "default_jacobian_points")]
    pub jacobian_points: usize,
    #[serde(default = "default_eval_seed")]
    pub seed: u64,
}

fn default_vectors() -> usize {
    100_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecRun {
    pub model: Option<PathBuf>,
    pub train: Option<TrainConfig>,
    #[serde(default = "default_vectors")]
    pub vectors: usize,
    #[serde(default = "default_eval_seed")]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlotKind {
    /// Rate-distortion curves from a sweep CSV.
    Rd,
    /// Scalar quantizer: codevector stalks and bin boundaries.
    Stalks,
    /// Two-dimensional partition: cell boundaries and codevectors.
    Partition,
    /// Generic `series,x,y` curves.
    Curve,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlotRun {
    pub kind: PlotKind,
    /// CSV to plot, relative to the config file.
    pub input: PathBuf,
    /// Codevector CSV for partition plots.
    pub codevectors: Option<PathBuf>,
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub x_label: String,
    #[serde(default)]
    pub y_label: String,
    #[serde(default)]
    pub log_x: bool,
    #[serde(default)]
    pub log_y: bool,
    #[serde(default = "default_plot_name")]
    pub output: String,
}

fn default_plot_name() -> String {
    "plot.svg".into()
}

/// Parses a config file, rejecting unknown keys.
pub fn load<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

pub fn to_toml<T: Serialize>(value: &T) -> CliResult<String> {
    toml::to_string(value).map_err(|e| CliError::Other(format!("serializing config: {e}")))
}

/// Resolves `p` against the directory holding the config file.
pub fn relative_to(config: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        config.parent().unwrap_or(Path::new(".")).join(p)
    }
}
