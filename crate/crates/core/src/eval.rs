//! End-to-end simulation: sender, channel and receiver over whole clips, plus sweeps over
//! policy, budget and loss grids.
//!
//! The sender never sees channel feedback, so its message stream depends only on
//! `(clip, policy, budget)`. Sweeps encode each clip once per `(policy, budget)` and replay the
//! messages through every loss level.

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{Channel, ChannelConfig};
use crate::codebook::{ChangeCache, Codebook};
use crate::error::{Error, Result};
use crate::grid::{Clip, TokenGrid};
use crate::metrics::DistortionSum;
use crate::protocol::{message_bytes, BudgetModel, KeyframePolicy, Message, ReceiverState, SenderState};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::utility::{clip_log_loss, ClipLogLoss, CountModel, LogLoss, Perplexity, PredictorConfig, SampleSpec};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunConfig {
    pub policy: KeyframePolicy,
    pub budget: BudgetModel,
    pub channel: ChannelConfig,
    pub rate_hz: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub is_keyframe: bool,
    pub bytes: usize,
    pub delivered: bool,
    pub recon: TokenGrid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipTrace {
    pub steps: Vec<StepRecord>,
    pub bytes_total: u64,
    pub keyframe_count: u64,
}

impl ClipTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Receiver reconstructions as a clip.
    pub fn recon_clip(&self, rate_hz: f64) -> Result<Clip> {
        Clip::new(self.steps.iter().map(|s| s.recon.clone()).collect(), rate_hz)
    }
}

/// The sender's messages for one clip, with their accounted sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedClip {
    pub messages: Vec<Message>,
    pub bytes: Vec<usize>,
}

impl EncodedClip {
    pub fn bytes_total(&self) -> u64 {
        self.bytes.iter().map(|&b| b as u64).sum()
    }

    pub fn keyframe_count(&self) -> u64 {
        self.messages.iter().filter(|m| m.is_keyframe()).count() as u64
    }
}

pub fn encode_clip(
    clip: &Clip,
    policy: &KeyframePolicy,
    budget: &BudgetModel,
    codebook: &Codebook,
) -> Result<EncodedClip> {
    encode_clip_cached(clip, policy, budget, &mut ChangeCache::new(codebook))
}

pub(crate) fn encode_clip_cached(
    clip: &Clip,
    policy: &KeyframePolicy,
    budget: &BudgetModel,
    cache: &mut ChangeCache,
) -> Result<EncodedClip> {
    policy.validate()?;
    let k = cache.codebook().k();
    let first = clip.grids().first().ok_or(Error::Empty("clip has no frames"))?;
    first.validate_vocab(k)?;
    let (mut sender, kf) = SenderState::init(first);
    let mut messages = Vec::with_capacity(clip.len());
    messages.push(kf);
    for (t, z) in clip.grids().iter().enumerate().skip(1) {
        messages.push(sender.step_with(t, z, policy, budget, k, |a, b| cache.change(a, b))?);
    }
    let bytes = messages.iter().map(|m| message_bytes(m, budget)).collect();
    Ok(EncodedClip { messages, bytes })
}

/// Pushes `enc` through the channel, calling `on_step(t, delivered, recon)` after each receive.
fn replay(enc: &EncodedClip, channel: ChannelConfig, mut on_step: impl FnMut(usize, bool, &TokenGrid)) -> Result<()> {
    channel.validate()?;
    let mut link = Channel::new(channel);
    let mut receiver = ReceiverState::new();
    for msg in &enc.messages {
        let delivered = link.transmit(msg);
        receiver.apply(delivered.then_some(msg))?;
        let recon = receiver
            .recon()
            .ok_or_else(|| Error::param("receiver", "no keyframe delivered at t = 0"))?;
        on_step(msg.t(), delivered, recon);
    }
    Ok(())
}

/// Runs the full sender, channel, receiver loop and records every step.
pub fn run_clip(clip: &Clip, cfg: &RunConfig, codebook: &Codebook) -> Result<ClipTrace> {
    if (cfg.rate_hz - clip.rate_hz()).abs() > 1e-9 * clip.rate_hz() {
        return Err(Error::param(
            "rate_hz",
            format!(
                "run config says {} Hz but the clip is sampled at {} Hz",
                cfg.rate_hz,
                clip.rate_hz()
            ),
        ));
    }
    let enc = encode_clip(clip, &cfg.policy, &cfg.budget, codebook)?;
    let mut steps = Vec::with_capacity(enc.messages.len());
    replay(&enc, cfg.channel, |t, delivered, recon| {
        steps.push(StepRecord {
            t,
            is_keyframe: enc.messages[t].is_keyframe(),
            bytes: enc.bytes[t],
            delivered,
            recon: recon.clone(),
        });
    })?;
    Ok(ClipTrace {
        steps,
        bytes_total: enc.bytes_total(),
        keyframe_count: enc.keyframe_count(),
    })
}

fn mbps(bytes: u64, timesteps: usize, rate_hz: f64) -> f64 {
    bytes as f64 * 8.0 / (timesteps as f64 / rate_hz) / 1e6
}

/// Average bitrate over the clip duration `T / rate_hz`.
pub fn bitrate_mbps(trace: &ClipTrace, rate_hz: f64) -> Result<f64> {
    if trace.is_empty() {
        return Err(Error::Empty("trace has no steps"));
    }
    if !(rate_hz > 0.0 && rate_hz.is_finite()) {
        return Err(Error::param("rate_hz", format!("must be positive, got {rate_hz}")));
    }
    Ok(mbps(trace.bytes_total, trace.len(), rate_hz))
}

/// Trained probe plus the scoring configuration used for every streaming method.
#[derive(Debug, Clone)]
pub struct UtilityProbe {
    pub model: CountModel,
    pub predictor: PredictorConfig,
    pub sample: SampleSpec,
    /// Loss levels whose rows get scored; empty scores every row.
    pub drop_probs: Vec<f64>,
}

impl UtilityProbe {
    fn scores(&self, drop_prob: f64) -> bool {
        self.drop_probs.is_empty() || self.drop_probs.contains(&drop_prob)
    }
}

/// Per-clip outcome of one configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipMetrics {
    pub timesteps: usize,
    pub rate_hz: f64,
    pub bytes_total: u64,
    pub keyframes: u64,
    pub distortion: DistortionSum,
    pub mismatched: u64,
    pub cells: u64,
    pub sent_deltas: u64,
    pub dropped_deltas: u64,
    pub log_loss: Option<ClipLogLoss>,
}

impl ClipMetrics {
    pub fn bitrate_mbps(&self) -> f64 {
        mbps(self.bytes_total, self.timesteps, self.rate_hz)
    }

    pub fn d_dyn(&self) -> Option<f64> {
        self.distortion.mean()
    }

    pub fn mismatch_rate(&self) -> f64 {
        self.mismatched as f64 / self.cells as f64
    }
}

/// Replays `enc` and scores the reconstruction against `truth` without keeping per-step records
/// unless the probe needs the reconstructed history.
pub fn score_clip(
    enc: &EncodedClip,
    truth: &Clip,
    channel: ChannelConfig,
    codebook: &Codebook,
    probe: Option<&UtilityProbe>,
    clip_id: u64,
) -> Result<ClipMetrics> {
    score_clip_cached(enc, truth, channel, &mut ChangeCache::new(codebook), probe, clip_id)
}

pub(crate) fn score_clip_cached(
    enc: &EncodedClip,
    truth: &Clip,
    channel: ChannelConfig,
    cache: &mut ChangeCache,
    probe: Option<&UtilityProbe>,
    clip_id: u64,
) -> Result<ClipMetrics> {
    truth.validate_vocab(cache.codebook().k())?;
    if enc.messages.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} timesteps", truth.len()),
            actual: format!("{} messages", enc.messages.len()),
        });
    }
    let grids = truth.grids();
    let mut distortion = DistortionSum::default();
    let mut mismatched = 0u64;
    let mut dropped = 0u64;
    let mut recon_grids = probe.map(|_| Vec::with_capacity(truth.len()));
    replay(enc, channel, |t, delivered, recon| {
        if !delivered {
            dropped += 1;
        }
        let cur = grids[t].tokens();
        let rec = recon.tokens();
        if t == 0 {
            mismatched += cur.iter().zip(rec).filter(|(a, b)| a != b).count() as u64;
        } else {
            let prev = grids[t - 1].tokens();
            for ((&p, &c), &r) in prev.iter().zip(cur).zip(rec) {
                if c != r {
                    mismatched += 1;
                }
                if p != c {
                    distortion.sum += cache.change(c, r);
                    distortion.count += 1;
                }
            }
        }
        if let Some(v) = recon_grids.as_mut() {
            v.push(recon.clone());
        }
    })?;
    let log_loss = match (probe, recon_grids) {
        (Some(p), Some(g)) => {
            let recon = Clip::new(g, truth.rate_hz())?;
            Some(clip_log_loss(
                &p.model,
                &p.predictor,
                truth,
                &recon,
                clip_id,
                &p.sample,
            )?)
        }
        _ => None,
    };
    let keyframes = enc.keyframe_count();
    Ok(ClipMetrics {
        timesteps: truth.len(),
        rate_hz: truth.rate_hz(),
        bytes_total: enc.bytes_total(),
        keyframes,
        distortion,
        mismatched,
        cells: (truth.len() * truth.n_positions()) as u64,
        sent_deltas: enc.messages.len() as u64 - keyframes,
        dropped_deltas: dropped,
        log_loss,
    })
}

/// How per-clip metrics become population numbers. Perplexity is always pooled over samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Mean over clips of per-clip values; clips with undefined `d_dyn` are skipped for it.
    #[default]
    PerClip,
    /// Pooled over all positions and bytes.
    Pooled,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub bitrate_mbps: f64,
    pub d_dyn: Option<f64>,
    pub mismatch: f64,
    pub keyframes_per_clip: f64,
    pub ppl_all: Option<Perplexity>,
    pub ppl_dyn: Option<Perplexity>,
    pub n_clips: usize,
    pub n_undefined_ddyn: usize,
}

/// Aggregates in iteration order; callers iterate by clip index for bitwise reproducibility.
pub fn aggregate<'a>(metrics: impl IntoIterator<Item = &'a ClipMetrics>, mode: Aggregation) -> Result<Aggregate> {
    let mut n = 0usize;
    let mut undefined = 0usize;
    let (mut rate_sum, mut mism_sum, mut kf_sum) = (0.0, 0.0, 0.0);
    let (mut ddyn_sum, mut ddyn_n) = (0.0, 0usize);
    let (mut bytes, mut seconds) = (0u64, 0.0);
    let (mut pooled_d, mut mism, mut cells) = (DistortionSum::default(), 0u64, 0u64);
    let mut loss: Option<ClipLogLoss> = None;
    for m in metrics {
        n += 1;
        rate_sum += m.bitrate_mbps();
        mism_sum += m.mismatch_rate();
        kf_sum += m.keyframes as f64;
        match m.d_dyn() {
            Some(d) => {
                ddyn_sum += d;
                ddyn_n += 1;
            }
            None => undefined += 1,
        }
        bytes += m.bytes_total;
        seconds += m.timesteps as f64 / m.rate_hz;
        pooled_d.merge(m.distortion);
        mism += m.mismatched;
        cells += m.cells;
        if let Some(l) = m.log_loss {
            loss.get_or_insert_with(ClipLogLoss::default).merge(l);
        }
    }
    if n == 0 {
        return Err(Error::Empty("no clips to aggregate"));
    }
    let (bitrate_mbps, d_dyn, mismatch) = match mode {
        Aggregation::PerClip => (
            rate_sum / n as f64,
            (ddyn_n > 0).then(|| ddyn_sum / ddyn_n as f64),
            mism_sum / n as f64,
        ),
        Aggregation::Pooled => (
            bytes as f64 * 8.0 / seconds / 1e6,
            pooled_d.mean(),
            mism as f64 / cells as f64,
        ),
    };
    let ppl = |f: fn(&ClipLogLoss) -> LogLoss| loss.as_ref().and_then(|l| f(l).perplexity());
    Ok(Aggregate {
        bitrate_mbps,
        d_dyn,
        mismatch,
        keyframes_per_clip: kf_sum / n as f64,
        ppl_all: ppl(|l| l.all),
        ppl_dyn: ppl(|l| l.dynamic),
        n_clips: n,
        n_undefined_ddyn: undefined,
    })
}

/// The configuration grid of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub policies: Vec<KeyframePolicy>,
    pub budgets: Vec<usize>,
    pub drop_probs: Vec<f64>,
    pub header_bytes: usize,
    pub update_bytes: usize,
    pub master_seed: u64,
    pub aggregation: Aggregation,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.policies.is_empty() {
            return Err(Error::Empty("no policies"));
        }
        if self.budgets.is_empty() {
            return Err(Error::Empty("no budgets"));
        }
        if self.drop_probs.is_empty() {
            return Err(Error::Empty("no drop probabilities"));
        }
        for p in &self.policies {
            p.validate()?;
        }
        for &p in &self.drop_probs {
            ChannelConfig::new(p, 0)?;
        }
        Ok(())
    }
}

/// Loss pattern seed for a clip. Shared by all policies so their drops line up step for step.
pub fn clip_channel_seed(master_seed: u64, clip_id: u64) -> u64 {
    derive_seed(master_seed, Stream::Channel, clip_id)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub policy: KeyframePolicy,
    pub budget_bytes: usize,
    pub capacity: usize,
    pub drop_prob: f64,
    pub agg: Aggregate,
}

impl SweepRow {
    pub fn policy_id(&self) -> String {
        self.policy.id()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// `per_clip[r][c]` is clip `c` under row `r`.
    pub per_clip: Vec<Vec<ClipMetrics>>,
    pub aggregation: Aggregation,
}

impl SweepResult {
    /// Re-aggregates every row over a clip subset.
    pub fn subset(&self, clip_ids: &[usize]) -> Result<Vec<SweepRow>> {
        self.rows
            .iter()
            .zip(&self.per_clip)
            .map(|(row, clips)| {
                let agg = aggregate(clip_ids.iter().map(|&c| &clips[c]), self.aggregation)?;
                Ok(SweepRow { agg, ..row.clone() })
            })
            .collect()
    }

    /// Adaptive rows paired with the nearest-bitrate periodic row at the same `(B, p)`.
    pub fn matched_pairs(&self) -> Vec<MatchedPair> {
        matched_pairs(&self.rows)
    }
}

/// Runs every `(policy, budget, drop_prob)` on every clip. Clip `i` is clip id `i`; rows are
/// ordered policy-major, then budget, then loss.
pub fn sweep(
    clips: &[Clip],
    spec: &SweepSpec,
    codebook: &Codebook,
    probe: Option<&UtilityProbe>,
) -> Result<SweepResult> {
    spec.validate()?;
    let first = clips
        .first()
        .and_then(|c| c.grids().first())
        .ok_or(Error::Empty("no clips"))?;
    let n_pos = first.n_positions();
    let budgets = spec
        .budgets
        .iter()
        .map(|&b| BudgetModel::with_costs(b, spec.header_bytes, spec.update_bytes, n_pos, codebook.k()))
        .collect::<Result<Vec<_>>>()?;
    for clip in clips {
        first.check_shape(clip.grids().first().ok_or(Error::Empty("clip has no frames"))?)?;
    }

    let per_clip_rows: Vec<Vec<ClipMetrics>> = clips
        .par_iter()
        .enumerate()
        .map(|(c, clip)| {
            let seed = clip_channel_seed(spec.master_seed, c as u64);
            let mut cache = ChangeCache::new(codebook);
            let mut out = Vec::with_capacity(spec.policies.len() * budgets.len() * spec.drop_probs.len());
            for policy in &spec.policies {
                for budget in &budgets {
                    let enc = encode_clip_cached(clip, policy, budget, &mut cache)?;
                    for &p in &spec.drop_probs {
                        let channel = ChannelConfig { drop_prob: p, seed };
                        let probe = probe.filter(|pr| pr.scores(p));
                        out.push(score_clip_cached(&enc, clip, channel, &mut cache, probe, c as u64)?);
                    }
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    let mut per_clip = Vec::new();
    let mut r = 0;
    for policy in &spec.policies {
        for budget in &budgets {
            for &p in &spec.drop_probs {
                let column: Vec<ClipMetrics> = per_clip_rows.iter().map(|m| m[r]).collect();
                rows.push(SweepRow {
                    policy: *policy,
                    budget_bytes: budget.payload_budget_bytes,
                    capacity: budget.capacity(),
                    drop_prob: p,
                    agg: aggregate(&column, spec.aggregation)?,
                });
                per_clip.push(column);
                r += 1;
            }
        }
    }
    Ok(SweepResult {
        rows,
        per_clip,
        aggregation: spec.aggregation,
    })
}

/// One adaptive row and its nearest-bitrate periodic partner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateMatch {
    pub adaptive: usize,
    pub periodic: usize,
    /// `adaptive_bitrate - periodic_bitrate`.
    pub gap: f64,
}

/// Pairs each adaptive bitrate with the nearest periodic one; ties go to the earlier periodic
/// entry. Empty if either side is empty.
pub fn rate_match(periodic_bitrates: &[f64], adaptive_bitrates: &[f64]) -> Vec<RateMatch> {
    if periodic_bitrates.is_empty() {
        return Vec::new();
    }
    adaptive_bitrates
        .iter()
        .enumerate()
        .map(|(a, &ra)| {
            let mut best = 0;
            for (i, &rp) in periodic_bitrates.iter().enumerate().skip(1) {
                if (ra - rp).abs() < (ra - periodic_bitrates[best]).abs() {
                    best = i;
                }
            }
            RateMatch {
                adaptive: a,
                periodic: best,
                gap: ra - periodic_bitrates[best],
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchedPair {
    pub adaptive: SweepRow,
    pub periodic: SweepRow,
    pub gap_mbps: f64,
}

impl MatchedPair {
    /// `adaptive - periodic` distortion, if both are defined.
    pub fn d_dyn_diff(&self) -> Option<f64> {
        Some(self.adaptive.agg.d_dyn? - self.periodic.agg.d_dyn?)
    }
}

/// Rate-matches within each `(B, p)` cell, in row order.
pub fn matched_pairs(rows: &[SweepRow]) -> Vec<MatchedPair> {
    let mut out = Vec::new();
    for row in rows.iter().filter(|r| r.policy.is_adaptive()) {
        let cell = |r: &&SweepRow| {
            !r.policy.is_adaptive() && r.budget_bytes == row.budget_bytes && r.drop_prob == row.drop_prob
        };
        let periodic: Vec<&SweepRow> = rows.iter().filter(cell).collect();
        let rates: Vec<f64> = periodic.iter().map(|r| r.agg.bitrate_mbps).collect();
        if let Some(m) = rate_match(&rates, &[row.agg.bitrate_mbps]).first() {
            out.push(MatchedPair {
                adaptive: row.clone(),
                periodic: periodic[m.periodic].clone(),
                gap_mbps: m.gap,
            });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WinRateSpec {
    pub n_seeds: usize,
    /// Clips per seeded subset; clamped to the population size.
    pub subset_size: usize,
    pub seed: u64,
}

impl Default for WinRateSpec {
    fn default() -> Self {
        Self {
            n_seeds: 10,
            subset_size: 500,
            seed: 0,
        }
    }
}

/// One seeded subset's comparison of an adaptive row against its matched periodic row.
#[derive(Debug, Clone, PartialEq)]
pub struct WinRecord {
    pub seed_index: usize,
    pub pair: MatchedPair,
    pub win: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WinSummary {
    pub adaptive: KeyframePolicy,
    pub budget_bytes: usize,
    pub drop_prob: f64,
    pub wins: usize,
    pub n_seeds: usize,
    pub mean_diff: f64,
    pub std_diff: f64,
}

impl WinSummary {
    pub fn win_rate(&self) -> f64 {
        self.wins as f64 / self.n_seeds as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WinRateTable {
    pub records: Vec<WinRecord>,
    pub summaries: Vec<WinSummary>,
    pub subset_size: usize,
}

/// Deterministic clip subset for seed `s`, sorted.
pub fn subset_indices(seed: u64, seed_index: usize, population: usize, size: usize) -> Vec<usize> {
    let mut rng = stream_rng(seed, Stream::Subset, seed_index as u64);
    let mut ids = index::sample(&mut rng, population, size.min(population)).into_vec();
    ids.sort_unstable();
    ids
}

/// Adaptive-vs-matched-periodic wins over seeded clip subsets. A win is a strictly lower
/// `d_dyn`; seeds where either side is undefined count as losses.
pub fn win_rates(result: &SweepResult, spec: &WinRateSpec) -> Result<WinRateTable> {
    if spec.n_seeds == 0 {
        return Err(Error::param("n_seeds", "must be >= 1"));
    }
    let population = result.per_clip.first().map_or(0, Vec::len);
    if population == 0 {
        return Err(Error::Empty("sweep has no clips"));
    }
    let size = spec.subset_size.min(population);
    let mut records = Vec::new();
    for s in 0..spec.n_seeds {
        let ids = subset_indices(spec.seed, s, population, size);
        for pair in matched_pairs(&result.subset(&ids)?) {
            let win = pair.d_dyn_diff().is_some_and(|d| d < 0.0);
            records.push(WinRecord {
                seed_index: s,
                pair,
                win,
            });
        }
    }
    let mut summaries: Vec<WinSummary> = Vec::new();
    for rec in records.iter().filter(|r| r.seed_index == 0) {
        let a = &rec.pair.adaptive;
        let same = |r: &&WinRecord| {
            r.pair.adaptive.policy == a.policy
                && r.pair.adaptive.budget_bytes == a.budget_bytes
                && r.pair.adaptive.drop_prob == a.drop_prob
        };
        let group: Vec<&WinRecord> = records.iter().filter(same).collect();
        let diffs: Vec<f64> = group.iter().filter_map(|r| r.pair.d_dyn_diff()).collect();
        let (mean_diff, std_diff) = mean_std(&diffs);
        summaries.push(WinSummary {
            adaptive: a.policy,
            budget_bytes: a.budget_bytes,
            drop_prob: a.drop_prob,
            wins: group.iter().filter(|r| r.win).count(),
            n_seeds: group.len(),
            mean_diff,
            std_diff,
        });
    }
    Ok(WinRateTable {
        records,
        summaries,
        subset_size: size,
    })
}

/// Sample mean and standard deviation (n - 1); `NaN` where undefined.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
