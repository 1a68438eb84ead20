//! Command-line driver: `generate`, `simulate`, `sweep` and `utility`.
//!
//! Each command resolves one [`ExperimentConfig`] (file, then flag overrides), validates it,
//! and writes its outputs under `out_dir`. Exit codes: 0 success, 1 config error, 2 I/O or
//! file format error, 3 runtime error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::codebook::{gen_clustered_codebook, Codebook};
use crate::config::{ExperimentConfig, Scale};
use crate::error::{Error, Result};
use crate::eval::{sweep, win_rates, SweepResult, SweepSpec, UtilityProbe};
use crate::grid::Clip;
use crate::protocol::KeyframePolicy;
use crate::report::{self, Provenance};
use crate::streams::{
    change_rate_distribution, gen_clips, percentile_threshold, read_clip, read_codebook, write_clip, write_codebook,
};
use crate::utility::{read_model, train, write_model, CountModel};

#[derive(Debug, Parser)]
#[command(
    name = "tokensync",
    version,
    about = "Keyframe/delta token-grid streaming experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Master seed (overrides `seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads for clip-parallel work.
    #[arg(long, global = true)]
    pub workers: Option<usize>,

    /// Use the full-scale clip population and win-rate subsets.
    #[arg(long, global = true)]
    pub full_scale: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Write synthetic clips, the codebook and change-rate statistics.
    Generate,
    /// Run every configuration and write per-clip and aggregate metrics.
    Simulate,
    /// Write the rate-distortion, loss, keyframe, utility and win-rate tables.
    Sweep,
    /// Train or load the probe and write perplexity against bitrate.
    Utility,
}

/// Maps an error to the process exit code.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config { .. } => 1,
        Error::Io { .. } | Error::Format { .. } => 2,
        _ => 3,
    }
}

impl Cli {
    /// Config file (or defaults) with flag overrides applied, validated.
    pub fn resolve_config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if self.full_scale {
            cfg.scale = Scale::Full;
        }
        if self.workers == Some(0) {
            return Err(Error::Config {
                field: "--workers".into(),
                reason: "must be >= 1".into(),
            });
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `args` and runs the command. Returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Runs the parsed command and returns the files written.
pub fn run(cli: &Cli) -> Result<Vec<PathBuf>> {
    let cfg = cli.resolve_config()?;
    let go = || execute(cli.command, &cfg);
    match cli.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config {
                field: "--workers".into(),
                reason: e.to_string(),
            })?
            .install(go),
        None => go(),
    }
}

pub fn execute(command: Command, cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    match command {
        Command::Generate => cmd_generate(cfg),
        Command::Simulate => cmd_simulate(cfg),
        Command::Sweep => cmd_sweep(cfg),
        Command::Utility => cmd_utility(cfg),
    }
}

pub fn provenance(cfg: &ExperimentConfig) -> Provenance {
    Provenance {
        config_hash: cfg.hash(),
        seed: cfg.seed,
    }
}

/// Clips plus the codebook they index.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub codebook: Codebook,
    pub clips: Vec<Clip>,
}

pub fn synthesize(cfg: &ExperimentConfig) -> Result<Dataset> {
    let c = &cfg.codebook;
    let codebook = gen_clustered_codebook(c.k, c.dim, c.n_clusters, c.spread, cfg.codebook_seed())?;
    let d = &cfg.data;
    let clips = gen_clips(
        &cfg.dynamics(),
        &codebook,
        cfg.n_clips(),
        d.timesteps,
        d.height,
        d.width,
    )?
    .into_iter()
    .map(|clip| clip.with_rate(d.rate_hz))
    .collect::<Result<_>>()?;
    Ok(Dataset { codebook, clips })
}

/// Reads `clips_dir` (first `n_clips` `.tks` files by name) when configured, otherwise
/// synthesizes from the config.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let (Some(dir), Some(cb_path)) = (&cfg.data.clips_dir, &cfg.data.codebook_path) else {
        return synthesize(cfg);
    };
    let codebook = read_codebook(cb_path)?;
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|entry| entry.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|x| x == "tks"))
        .collect();
    paths.sort();
    paths.truncate(cfg.n_clips());
    if paths.is_empty() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no .tks clips found"),
        ));
    }
    let mut clips = Vec::with_capacity(paths.len());
    for path in &paths {
        let (clip, k) = read_clip(path, cfg.data.rate_hz)?;
        if k > codebook.k() {
            return Err(Error::Format {
                path: path.clone(),
                offset: 17,
                reason: format!("clip vocabulary {k} exceeds codebook size {}", codebook.k()),
            });
        }
        clips.push(clip);
    }
    Ok(Dataset { codebook, clips })
}

/// Explicit thresholds, or percentiles of the dataset's per-step change rates.
pub fn thresholds(cfg: &ExperimentConfig, clips: &[Clip]) -> Result<Vec<f64>> {
    if !cfg.policies.tau_h.is_empty() {
        return Ok(cfg.policies.tau_h.clone());
    }
    if cfg.policies.tau_percentiles.is_empty() {
        return Ok(Vec::new());
    }
    let rates = change_rate_distribution(clips)?;
    cfg.policies
        .tau_percentiles
        .iter()
        .map(|&q| percentile_threshold(&rates, q))
        .collect()
}

fn sweep_spec(cfg: &ExperimentConfig, policies: Vec<KeyframePolicy>, drop_probs: Vec<f64>) -> SweepSpec {
    SweepSpec {
        policies,
        budgets: cfg.protocol.budgets.clone(),
        drop_probs,
        header_bytes: cfg.protocol.header_bytes,
        update_bytes: cfg.protocol.update_bytes,
        master_seed: cfg.seed,
        aggregation: cfg.aggregation,
    }
}

/// Loads `utility.model_path` or trains on the dataset's ground truth.
pub fn probe_model(cfg: &ExperimentConfig, data: &Dataset) -> Result<(CountModel, bool)> {
    match &cfg.utility.model_path {
        Some(path) => {
            let model = read_model(path)?;
            if model.vocab_size() != data.codebook.k() || model.context_len() != cfg.utility.predictor.context_len {
                return Err(Error::Config {
                    field: "utility.model_path".into(),
                    reason: format!(
                        "model has k={} L={}, config expects k={} L={}",
                        model.vocab_size(),
                        model.context_len(),
                        data.codebook.k(),
                        cfg.utility.predictor.context_len
                    ),
                });
            }
            Ok((model, false))
        }
        None => Ok((train(&data.clips, &cfg.utility.predictor, data.codebook.k())?, true)),
    }
}

fn out(cfg: &ExperimentConfig, name: &str) -> PathBuf {
    cfg.out_dir.join(name)
}

fn write_resolved_config(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let path = out(cfg, "config.toml");
    let text = format!("{}\n{}", provenance(cfg).line(), cfg.to_toml_string());
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let data = synthesize(cfg)?;
    let prov = provenance(cfg);
    let mut files = vec![write_resolved_config(cfg)?];

    let cb_path = out(cfg, "codebook.tkcb");
    write_codebook(&cb_path, &data.codebook)?;
    files.push(cb_path);

    let clip_dir = out(cfg, "clips");
    fs::create_dir_all(&clip_dir).map_err(|e| Error::io(&clip_dir, e))?;
    for (i, clip) in data.clips.iter().enumerate() {
        write_clip(clip_dir.join(format!("clip_{i:05}.tks")), clip, data.codebook.k())?;
    }
    files.push(clip_dir);

    let rates = change_rate_distribution(&data.clips)?;
    let mean = rates.iter().sum::<f64>() / rates.len() as f64;
    let mut rows = vec![
        ("n_clips".to_string(), data.clips.len().to_string()),
        ("n_samples".to_string(), rates.len().to_string()),
        ("mean".to_string(), report::fmt_f64(mean)),
        (
            "min".to_string(),
            report::fmt_f64(rates.iter().copied().fold(f64::INFINITY, f64::min)),
        ),
        (
            "max".to_string(),
            report::fmt_f64(rates.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
        ),
    ];
    for q in [50.0, 90.0, 99.0, 99.5, 99.9] {
        rows.push((format!("p{q}"), report::fmt_f64(percentile_threshold(&rates, q)?)));
    }
    let stats = out(cfg, "stats.csv");
    report::write_csv(
        &stats,
        &prov,
        &["statistic", "value"],
        rows.into_iter().map(|(a, b)| vec![a, b]),
    )?;
    files.push(stats);

    let hist = out(cfg, "change_rates.csv");
    let mut counts = [0u64; 20];
    for &r in &rates {
        counts[((r * 20.0) as usize).min(19)] += 1;
    }
    let cells = counts.iter().enumerate().map(|(i, &c)| {
        vec![
            report::fmt_f64(i as f64 / 20.0),
            report::fmt_f64((i + 1) as f64 / 20.0),
            c.to_string(),
        ]
    });
    report::write_csv(&hist, &prov, &["bin_lo", "bin_hi", "count"], cells)?;
    files.push(hist);
    Ok(files)
}

pub fn cmd_simulate(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let data = load_dataset(cfg)?;
    let taus = thresholds(cfg, &data.clips)?;
    let spec = sweep_spec(cfg, cfg.policies(&taus), cfg.drop_probs());
    let res = sweep(&data.clips, &spec, &data.codebook, None)?;
    let prov = provenance(cfg);
    let clips_csv = out(cfg, "simulate_clips.csv");
    report::write_clip_metrics(&clips_csv, &prov, &res.rows, &res.per_clip)?;
    let metrics_csv = out(cfg, "simulate_metrics.csv");
    report::write_loss_robustness(&metrics_csv, &prov, &res.rows)?;
    Ok(vec![write_resolved_config(cfg)?, clips_csv, metrics_csv])
}

/// The sweep behind `cmd_sweep`, exposed for callers that want the numbers, not the files.
pub fn run_sweep(cfg: &ExperimentConfig, data: &Dataset) -> Result<SweepResult> {
    let taus = thresholds(cfg, &data.clips)?;
    let spec = sweep_spec(cfg, cfg.policies(&taus), cfg.drop_probs());
    let probe = if cfg.utility.enabled {
        let (model, _) = probe_model(cfg, data)?;
        Some(UtilityProbe {
            model,
            predictor: cfg.utility.predictor.clone(),
            sample: cfg.sample_spec(),
            drop_probs: cfg.utility.drop_probs.clone(),
        })
    } else {
        None
    };
    sweep(&data.clips, &spec, &data.codebook, probe.as_ref())
}

pub fn cmd_sweep(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let data = load_dataset(cfg)?;
    let res = run_sweep(cfg, &data)?;
    let prov = provenance(cfg);
    let mut files = vec![write_resolved_config(cfg)?];
    let mut emit = |name: &str, f: &dyn Fn(&Path) -> Result<()>| -> Result<()> {
        let path = out(cfg, name);
        f(&path)?;
        files.push(path);
        Ok(())
    };
    emit("rd_curve.csv", &|p| report::write_rd_curve(p, &prov, &res.rows))?;
    emit("loss_robustness.csv", &|p| {
        report::write_loss_robustness(p, &prov, &res.rows)
    })?;
    emit("keyframes_vs_tau.csv", &|p| {
        report::write_keyframes_vs_tau(p, &prov, &res.rows)
    })?;
    emit("utility_vs_bitrate.csv", &|p| {
        report::write_utility(p, &prov, &res.rows)
    })?;
    let table = win_rates(&res, &cfg.winrate_spec())?;
    emit("winrate.csv", &|p| report::write_winrate(p, &prov, &table))?;
    Ok(files)
}

pub fn cmd_utility(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let data = load_dataset(cfg)?;
    let taus = thresholds(cfg, &data.clips)?;
    let mut files = vec![write_resolved_config(cfg)?];
    let (model, trained) = probe_model(cfg, &data)?;
    if trained {
        let path = out(cfg, "probe.tkpm");
        write_model(&path, &model)?;
        files.push(path);
    }
    // Every-step keyframes give the receiver the exact history: the perfect-sync reference.
    let reference = KeyframePolicy::Periodic { n: 1 };
    let mut policies = vec![reference];
    policies.extend(cfg.policies(&taus).into_iter().filter(|p| *p != reference));
    let drop_probs = if cfg.utility.drop_probs.is_empty() {
        cfg.drop_probs()
    } else {
        cfg.utility.drop_probs.clone()
    };
    let probe = UtilityProbe {
        model,
        predictor: cfg.utility.predictor.clone(),
        sample: cfg.sample_spec(),
        drop_probs: Vec::new(),
    };
    let res = sweep(
        &data.clips,
        &sweep_spec(cfg, policies, drop_probs),
        &data.codebook,
        Some(&probe),
    )?;
    let path = out(cfg, "utility_vs_bitrate.csv");
    report::write_utility(&path, &provenance(cfg), &res.rows)?;
    files.push(path);
    Ok(files)
}
