//! TOML experiment configuration.
//!
//! One flat document describes the channel, the pilot plan, the Monte Carlo
//! settings, and the optional per-command tables. See `docs/config.md` for
//! the full schema.

use serde::Deserialize;
use std::path::{Path, PathBuf};

use whident::channel::{paper_g, paper_h, Amplifier, FirFilter, PolynomialAmplifier, RappAmplifier, WhModel};
use whident::estimator::{PhaseMode, PilotPlan};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub channel: ChannelConfig,
    #[serde(default)]
    pub pilots: PilotConfig,
    #[serde(default)]
    pub experiment: ExperimentConfig,
    #[serde(default)]
    pub volterra: Option<VolterraConfig>,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelConfig {
    /// "paper" loads the appendix filters and the Rapp(1, 10, 3) amplifier.
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub h_file: Option<PathBuf>,
    #[serde(default)]
    pub g_file: Option<PathBuf>,
    /// "rapp" or "polynomial".
    #[serde(default)]
    pub amplifier: Option<String>,
    #[serde(default = "default_gain")]
    pub gain: f64,
    #[serde(default = "default_saturation")]
    pub saturation: f64,
    #[serde(default = "default_smoothness")]
    pub smoothness: f64,
    /// Odd-order coefficients (orders 1, 3, …) for `amplifier = "polynomial"`.
    #[serde(default)]
    pub gamma: Option<Vec<f64>>,
    /// Output-noise variance; ignored when `pilots.snr_db` is set.
    #[serde(default)]
    pub noise_variance: f64,
}

fn default_gain() -> f64 {
    1.0
}
fn default_saturation() -> f64 {
    10.0
}
fn default_smoothness() -> f64 {
    3.0
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PilotConfig {
    pub l1: usize,
    pub l2: usize,
    pub n1: usize,
    pub m1: usize,
    /// Fundamental of x₁; 0 → full-band default `0.5/(m1+1)`.
    pub f1: f64,
    /// "schroeder" or "minmax".
    pub phase_mode: String,
    pub minmax_budget: usize,
    pub minmax_min_harmonics: usize,
    pub ibo_db: f64,
    pub sat_input_amplitude: f64,
    pub n2: usize,
    pub m2: usize,
    /// 0 → automatic length.
    pub n3: usize,
    pub passband_threshold_db: f64,
    /// Target SNR (noise adjusted to the noiseless output power); NaN-free
    /// only when present.
    pub snr_db: Option<f64>,
}

impl Default for PilotConfig {
    fn default() -> Self {
        Self {
            l1: 20,
            l2: 20,
            n1: 8000,
            m1: 100,
            f1: 0.0,
            phase_mode: "schroeder".into(),
            minmax_budget: 3000,
            minmax_min_harmonics: 50,
            ibo_db: 5.0,
            sat_input_amplitude: 16.0,
            n2: 8000,
            m2: 100,
            n3: 0,
            passband_threshold_db: 3.0,
            snr_db: Some(20.0),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Monte Carlo repetitions (noise seeds).
    pub seeds: u64,
    /// Master seed; the `--seed` flag overrides it.
    pub master_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self { seeds: 10, master_seed: 1 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VolterraConfig {
    pub l1: usize,
    pub l2: usize,
    /// Pilot length as a multiple of the reduced kernel count.
    pub n_factor: f64,
    pub snr_db: Vec<f64>,
    /// Ridge parameter for deliberately underdetermined runs (0 = off).
    pub ridge: f64,
}

impl Default for VolterraConfig {
    fn default() -> Self {
        Self {
            l1: 6,
            l2: 6,
            n_factor: 50.0,
            snr_db: vec![10.0, 20.0, 30.0],
            ridge: 0.0,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// "backoff_db", "snr_db", "n1", or "n2".
    pub axis: String,
    pub values: Vec<f64>,
}

/// A usage-level configuration error (maps to exit code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for UsageError {}

impl Config {
    pub fn load(path: &Path) -> Result<Self, Box<dyn std::error::Error>> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        let config: Config =
            toml::from_str(&text).map_err(|e| UsageError(format!("config parse error: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> Result<(), UsageError> {
        let p = &self.pilots;
        for (name, v) in [("l1", p.l1), ("l2", p.l2), ("n1", p.n1), ("m1", p.m1), ("n2", p.n2), ("m2", p.m2)] {
            if v == 0 {
                return Err(UsageError(format!("pilots.{name} must be ≥ 1")));
            }
        }
        let f1 = self.effective_f1();
        if p.m1 as f64 * f1 > 0.5 {
            return Err(UsageError(format!(
                "pilots.m1 · f1 = {:.4} exceeds the Nyquist frequency 1/2",
                p.m1 as f64 * f1
            )));
        }
        match p.phase_mode.as_str() {
            "schroeder" | "minmax" => {}
            other => {
                return Err(UsageError(format!(
                    "pilots.phase_mode must be \"schroeder\" or \"minmax\", got \"{other}\""
                )))
            }
        }
        if let Some(sweep) = &self.sweep {
            match sweep.axis.as_str() {
                "backoff_db" | "snr_db" | "n1" | "n2" => {}
                other => {
                    return Err(UsageError(format!(
                        "sweep.axis must be one of backoff_db/snr_db/n1/n2, got \"{other}\""
                    )))
                }
            }
            if sweep.values.is_empty() {
                return Err(UsageError("sweep.values must not be empty".into()));
            }
        }
        if self.experiment.seeds == 0 {
            return Err(UsageError("experiment.seeds must be ≥ 1".into()));
        }
        self.build_model_uncached().map(|_| ()).map_err(|e| e)
    }

    pub fn effective_f1(&self) -> f64 {
        if self.pilots.f1 > 0.0 {
            self.pilots.f1
        } else {
            0.5 / (self.pilots.m1 as f64 + 1.0)
        }
    }

    fn build_model_uncached(&self) -> Result<WhModel, UsageError> {
        let c = &self.channel;
        let preset = c.preset.as_deref();
        let (h, g) = match (preset, &c.h_file, &c.g_file) {
            (Some("paper"), None, None) => (paper_h(), paper_g()),
            (Some(other), _, _) if other != "paper" => {
                return Err(UsageError(format!("channel.preset: unknown preset \"{other}\"")))
            }
            (_, Some(hf), Some(gf)) => {
                let h = FirFilter::from_csv_file(hf)
                    .map_err(|e| UsageError(format!("channel.h_file: {e}")))?;
                let g = FirFilter::from_csv_file(gf)
                    .map_err(|e| UsageError(format!("channel.g_file: {e}")))?;
                (h, g)
            }
            (Some("paper"), _, _) => {
                return Err(UsageError(
                    "channel.preset = \"paper\" excludes h_file/g_file".into(),
                ))
            }
            _ => {
                return Err(UsageError(
                    "channel needs either preset = \"paper\" or both h_file and g_file".into(),
                ))
            }
        };
        let amplifier = match c.amplifier.as_deref().unwrap_or("rapp") {
            "rapp" => Amplifier::Rapp(
                RappAmplifier::new(c.gain, c.saturation, c.smoothness)
                    .map_err(|e| UsageError(format!("channel amplifier: {e}")))?,
            ),
            "polynomial" => {
                let gamma = c.gamma.clone().ok_or_else(|| {
                    UsageError("channel.gamma required for amplifier = \"polynomial\"".into())
                })?;
                Amplifier::Polynomial(
                    PolynomialAmplifier::from_odd_coeffs(gamma)
                        .map_err(|e| UsageError(format!("channel.gamma: {e}")))?,
                )
            }
            other => {
                return Err(UsageError(format!(
                    "channel.amplifier must be \"rapp\" or \"polynomial\", got \"{other}\""
                )))
            }
        };
        WhModel::new(h, amplifier, g, c.noise_variance)
            .map_err(|e| UsageError(format!("channel: {e}")))
    }

    pub fn build_model(&self) -> WhModel {
        self.build_model_uncached().expect("validated at load time")
    }

    pub fn build_plan(&self, master_seed: u64) -> PilotPlan {
        let p = &self.pilots;
        let phase_mode = match p.phase_mode.as_str() {
            "minmax" => PhaseMode::MinMax {
                min_harmonics: p.minmax_min_harmonics.clamp(1, p.m1),
                budget: p.minmax_budget,
            },
            _ => PhaseMode::Schroeder,
        };
        PilotPlan {
            l1: p.l1,
            l2: p.l2,
            poly_order: 3,
            n1: p.n1,
            m1: p.m1,
            f1: self.effective_f1(),
            phase_mode,
            ibo_db: p.ibo_db,
            sat_input_amplitude: p.sat_input_amplitude,
            n2: p.n2,
            m2: p.m2,
            n3: (p.n3 > 0).then_some(p.n3),
            passband_threshold_db: p.passband_threshold_db,
            snr_db: p.snr_db,
            seed: master_seed,
        }
    }
}
