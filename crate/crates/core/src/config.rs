//! Experiment configuration: one TOML document per run.
//!
//! Every section and field is optional; omitted values fall back to the desk-scale defaults.
//! Unknown fields are rejected. Seeds for the codebook, clips, channel, probe sampling and
//! win-rate subsets all derive from the single master `seed`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codebook::{DEFAULT_DIM, DEFAULT_K};
use crate::error::{Error, Result};
use crate::eval::{Aggregation, WinRateSpec};
use crate::grid::{DEFAULT_HEIGHT, DEFAULT_RATE_HZ, DEFAULT_WIDTH};
use crate::protocol::{KeyframePolicy, DEFAULT_HEADER_BYTES, DEFAULT_N_MAX, DEFAULT_UPDATE_BYTES};
use crate::rng::{derive_seed, Stream};
use crate::streams::DynamicsConfig;
use crate::utility::{PredictorConfig, SampleSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    #[default]
    Desk,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Clips at desk scale.
    pub n_clips: usize,
    /// Clips at full scale.
    pub full_scale_clips: usize,
    pub timesteps: usize,
    pub height: usize,
    pub width: usize,
    pub rate_hz: f64,
    /// Read `*.tks` clips from here instead of synthesizing.
    pub clips_dir: Option<PathBuf>,
    /// Codebook to pair with `clips_dir`.
    pub codebook_path: Option<PathBuf>,
    /// Synthetic dynamics; `seed` is ignored in favor of the master seed.
    pub dynamics: DynamicsConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_clips: 100,
            full_scale_clips: 2000,
            timesteps: 200,
            height: DEFAULT_HEIGHT,
            width: DEFAULT_WIDTH,
            rate_hz: DEFAULT_RATE_HZ,
            clips_dir: None,
            codebook_path: None,
            dynamics: DynamicsConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodebookConfig {
    pub k: usize,
    pub dim: usize,
    pub n_clusters: usize,
    pub spread: f64,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            dim: DEFAULT_DIM,
            n_clusters: 64,
            spread: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub periodic_n: Vec<usize>,
    /// Explicit drift thresholds. When empty, thresholds come from `tau_percentiles`.
    pub tau_h: Vec<f64>,
    /// Percentiles of the per-step change-rate distribution used as thresholds.
    pub tau_percentiles: Vec<f64>,
    pub n_max: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            periodic_n: vec![9, 10, 12, 17, 21],
            tau_h: Vec::new(),
            tau_percentiles: vec![99.9, 99.5, 99.0],
            n_max: DEFAULT_N_MAX,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub budgets: Vec<usize>,
    pub header_bytes: usize,
    pub update_bytes: usize,
    /// Loss levels; `0` is always added.
    pub drop_probs: Vec<f64>,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            budgets: vec![100, 200, 400, 800],
            header_bytes: DEFAULT_HEADER_BYTES,
            update_bytes: DEFAULT_UPDATE_BYTES,
            drop_probs: vec![0.0, 0.01, 0.05, 0.1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UtilityConfig {
    /// Score the probe during `sweep`.
    pub enabled: bool,
    pub predictor: PredictorConfig,
    pub timesteps_per_clip: usize,
    pub positions_per_clip: usize,
    /// Score every `(t, u)` instead of sampling.
    pub full_eval: bool,
    /// Loss levels to score; empty means all.
    pub drop_probs: Vec<f64>,
    /// Load a trained probe instead of training.
    pub model_path: Option<PathBuf>,
}

impl Default for UtilityConfig {
    fn default() -> Self {
        let sample = SampleSpec::default();
        Self {
            enabled: true,
            predictor: PredictorConfig::default(),
            timesteps_per_clip: sample.timesteps_per_clip,
            positions_per_clip: sample.positions_per_clip,
            full_eval: false,
            drop_probs: vec![0.0],
            model_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WinRateConfig {
    pub n_seeds: usize,
    /// Clips per seeded subset at desk scale.
    pub subset_size: usize,
    pub full_scale_subset_size: usize,
}

impl Default for WinRateConfig {
    fn default() -> Self {
        Self {
            n_seeds: 10,
            subset_size: 50,
            full_scale_subset_size: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub scale: Scale,
    pub aggregation: Aggregation,
    pub data: DataConfig,
    pub codebook: CodebookConfig,
    pub policies: PolicyConfig,
    pub protocol: ProtocolConfig,
    pub utility: UtilityConfig,
    pub winrate: WinRateConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            scale: Scale::Desk,
            aggregation: Aggregation::PerClip,
            data: DataConfig::default(),
            codebook: CodebookConfig::default(),
            policies: PolicyConfig::default(),
            protocol: ProtocolConfig::default(),
            utility: UtilityConfig::default(),
            winrate: WinRateConfig::default(),
        }
    }
}

fn bad(field: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        field: field.to_string(),
        reason: reason.into(),
    }
}

/// Re-labels a parameter error with its config path.
fn within(section: &str, e: Error) -> Error {
    match e {
        Error::InvalidParameter { name, reason } => bad(&format!("{section}.{name}"), reason),
        other => bad(section, other.to_string()),
    }
}

fn unit_interval(field: &str, values: &[f64]) -> Result<()> {
    match values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        Some(p) => Err(bad(field, format!("{p} is outside [0, 1]"))),
        None => Ok(()),
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1);
            let reason = match line {
                Some(l) => format!("{} (line {l})", e.message()),
                None => e.message().to_string(),
            };
            bad("config", reason)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config { field, reason } => Error::Config {
                field,
                reason: format!("{reason} (in {})", path.display()),
            },
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.n_clips == 0 {
            return Err(bad("data.n_clips", "must be >= 1"));
        }
        if d.full_scale_clips == 0 {
            return Err(bad("data.full_scale_clips", "must be >= 1"));
        }
        if d.timesteps < 2 {
            return Err(bad("data.timesteps", "must be >= 2"));
        }
        if d.height == 0 || d.width == 0 {
            return Err(bad("data.height", "grid dimensions must be positive"));
        }
        if !(d.rate_hz > 0.0 && d.rate_hz.is_finite()) {
            return Err(bad("data.rate_hz", "must be positive"));
        }
        if d.clips_dir.is_some() != d.codebook_path.is_some() {
            return Err(bad(
                "data.codebook_path",
                "clips_dir and codebook_path must be given together",
            ));
        }
        d.dynamics.validate().map_err(|e| within("data.dynamics", e))?;

        let c = &self.codebook;
        if c.k < 2 || c.k > 1 << 16 {
            return Err(bad("codebook.k", format!("must be in 2..=65536, got {}", c.k)));
        }
        if c.dim < 2 {
            return Err(bad("codebook.dim", "must be >= 2"));
        }
        if c.n_clusters == 0 || c.n_clusters > c.k {
            return Err(bad(
                "codebook.n_clusters",
                format!("must be in 1..=k, got {}", c.n_clusters),
            ));
        }
        if !(c.spread >= 0.0 && c.spread.is_finite()) {
            return Err(bad("codebook.spread", "must be non-negative"));
        }

        let p = &self.policies;
        if let Some(n) = p.periodic_n.iter().find(|&&n| n == 0) {
            return Err(bad("policies.periodic_n", format!("interval {n} must be >= 1")));
        }
        unit_interval("policies.tau_h", &p.tau_h)?;
        if let Some(q) = p.tau_percentiles.iter().find(|q| !(0.0..=100.0).contains(*q)) {
            return Err(bad("policies.tau_percentiles", format!("{q} is outside [0, 100]")));
        }
        if p.n_max == 0 {
            return Err(bad("policies.n_max", "must be >= 1"));
        }
        if p.periodic_n.is_empty() && p.tau_h.is_empty() && p.tau_percentiles.is_empty() {
            return Err(bad("policies", "no policies configured"));
        }

        let pr = &self.protocol;
        if pr.budgets.is_empty() {
            return Err(bad("protocol.budgets", "must not be empty"));
        }
        if let Some(b) = pr.budgets.iter().find(|&&b| b <= pr.header_bytes) {
            return Err(bad(
                "protocol.budgets",
                format!("budget {b} does not exceed the {}-byte header", pr.header_bytes),
            ));
        }
        if pr.update_bytes == 0 {
            return Err(bad("protocol.update_bytes", "must be >= 1"));
        }
        unit_interval("protocol.drop_probs", &pr.drop_probs)?;

        let u = &self.utility;
        u.predictor.validate().map_err(|e| within("utility.predictor", e))?;
        if d.timesteps <= u.predictor.context_len {
            return Err(bad(
                "utility.predictor.context_len",
                "must be shorter than data.timesteps",
            ));
        }
        if !u.full_eval && (u.timesteps_per_clip == 0 || u.positions_per_clip == 0) {
            return Err(bad("utility.timesteps_per_clip", "sample sizes must be >= 1"));
        }
        unit_interval("utility.drop_probs", &u.drop_probs)?;

        let w = &self.winrate;
        if w.n_seeds == 0 {
            return Err(bad("winrate.n_seeds", "must be >= 1"));
        }
        if w.subset_size == 0 || w.full_scale_subset_size == 0 {
            return Err(bad("winrate.subset_size", "must be >= 1"));
        }
        Ok(())
    }

    pub fn n_clips(&self) -> usize {
        match self.scale {
            Scale::Desk => self.data.n_clips,
            Scale::Full => self.data.full_scale_clips,
        }
    }

    pub fn winrate_spec(&self) -> WinRateSpec {
        WinRateSpec {
            n_seeds: self.winrate.n_seeds,
            subset_size: match self.scale {
                Scale::Desk => self.winrate.subset_size,
                Scale::Full => self.winrate.full_scale_subset_size,
            },
            seed: derive_seed(self.seed, Stream::SeedSet, 0),
        }
    }

    pub fn dynamics(&self) -> DynamicsConfig {
        DynamicsConfig {
            seed: derive_seed(self.seed, Stream::Clip, 0),
            ..self.data.dynamics
        }
    }

    pub fn codebook_seed(&self) -> u64 {
        derive_seed(self.seed, Stream::Codebook, 0)
    }

    pub fn sample_spec(&self) -> SampleSpec {
        SampleSpec {
            timesteps_per_clip: self.utility.timesteps_per_clip,
            positions_per_clip: self.utility.positions_per_clip,
            seed: derive_seed(self.seed, Stream::Sampling, 0),
            full: self.utility.full_eval,
        }
    }

    /// Loss levels with `0` first and duplicates removed, in config order.
    pub fn drop_probs(&self) -> Vec<f64> {
        let mut out = vec![0.0];
        for &p in &self.protocol.drop_probs {
            if !out.contains(&p) {
                out.push(p);
            }
        }
        out
    }

    /// Periodic policies followed by adaptive ones, one per threshold.
    pub fn policies(&self, taus: &[f64]) -> Vec<KeyframePolicy> {
        let mut out: Vec<KeyframePolicy> = self
            .policies
            .periodic_n
            .iter()
            .map(|&n| KeyframePolicy::Periodic { n })
            .collect();
        out.extend(taus.iter().map(|&tau_h| KeyframePolicy::Adaptive {
            tau_h,
            n_max: self.policies.n_max,
        }));
        out
    }

    /// SHA-256 of the canonical TOML rendering, excluding `out_dir`.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.out_dir = PathBuf::new();
        let text = toml::to_string(&canonical).expect("config always serializes");
        Sha256::digest(text.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }
}
