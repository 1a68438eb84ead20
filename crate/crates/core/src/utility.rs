//! Count-based next-token probe for scoring receiver reconstructions.
//!
//! Each grid position gets its own table of `(context, next)` counts over the `j` most recent
//! tokens at that position, for every order `j = L..=0`. Predictions interpolate add-k smoothed
//! estimates across orders with a uniform floor, so no token ever gets zero probability.
//! Evaluation conditions on a reconstructed history but always scores the ground-truth target.

use std::fs;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Clip, TokenId};
use crate::rng::{stream_rng, Stream};

/// Context tokens are packed 16 bits each below the order byte.
pub const MAX_CONTEXT_LEN: usize = 6;

pub const MODEL_MAGIC: &[u8; 4] = b"TKPM";
const MODEL_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    pub context_len: usize,
    pub smoothing_k: f64,
    /// One weight per order `L, L-1, ..., 0`, then the uniform floor.
    pub interpolation_weights: Vec<f64>,
    /// Seed for the evaluation sample set.
    pub seed: u64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            context_len: 4,
            smoothing_k: 0.1,
            interpolation_weights: vec![0.3, 0.2, 0.15, 0.15, 0.1, 0.1],
            seed: 0,
        }
    }
}

impl PredictorConfig {
    /// All mass on the uniform floor.
    pub fn uniform_only(context_len: usize) -> Self {
        let mut w = vec![0.0; context_len + 2];
        w[context_len + 1] = 1.0;
        Self {
            context_len,
            interpolation_weights: w,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.context_len;
        if l == 0 || l > MAX_CONTEXT_LEN {
            return Err(Error::param(
                "context_len",
                format!("must be in 1..={MAX_CONTEXT_LEN}, got {l}"),
            ));
        }
        if !(self.smoothing_k > 0.0 && self.smoothing_k.is_finite()) {
            return Err(Error::param(
                "smoothing_k",
                format!("must be positive, got {}", self.smoothing_k),
            ));
        }
        let w = &self.interpolation_weights;
        if w.len() != l + 2 {
            return Err(Error::param(
                "interpolation_weights",
                format!(
                    "expected {} weights (orders {l}..=0 plus uniform), got {}",
                    l + 2,
                    w.len()
                ),
            ));
        }
        if w.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
            return Err(Error::param("interpolation_weights", "weights must be non-negative"));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::param(
                "interpolation_weights",
                format!("weights sum to {sum}, expected 1"),
            ));
        }
        if w[l + 1] <= 0.0 {
            return Err(Error::param(
                "interpolation_weights",
                "uniform floor weight must be positive",
            ));
        }
        Ok(())
    }

    fn order_weight(&self, order: usize) -> f64 {
        self.interpolation_weights[self.context_len - order]
    }

    fn uniform_weight(&self) -> f64 {
        self.interpolation_weights[self.context_len + 1]
    }
}

/// Sub-range of `events[range]` whose `key` equals `value`; `key` must be sorted over the range.
#[inline]
fn refine(events: &[u32], range: Range<usize>, value: TokenId, key: impl Fn(usize) -> TokenId) -> Range<usize> {
    let sub = &events[range.clone()];
    let lo = sub.partition_point(|&e| key(e as usize) < value);
    let hi = lo + sub[lo..].partition_point(|&e| key(e as usize) <= value);
    range.start + lo..range.start + hi
}

/// Training history and occurrence index for one grid position.
///
/// An event is a training timestep `t >= L` of some clip. Sorting events by
/// `(next, c_1, .., c_L)` with `c_1` the most recent context token makes the events matching
/// any `(next, c_1..c_j)` a contiguous range; sorting by `(c_1, .., c_L)` does the same for
/// context totals. Counts for every order are range lengths.
#[derive(Debug, Clone, Default, PartialEq)]
struct PositionIndex {
    /// Token history of every training clip at this position, clips concatenated.
    column: Vec<TokenId>,
    by_next: Vec<u32>,
    by_context: Vec<u32>,
}

impl PositionIndex {
    fn build(column: Vec<TokenId>, clip_lengths: &[usize], l: usize) -> Self {
        let mut events = Vec::with_capacity(column.len());
        let mut offset = 0;
        for &len in clip_lengths {
            events.extend((offset + l..offset + len).map(|e| e as u32));
            offset += len;
        }
        let pack_context = |e: usize| (1..=l).fold(0u128, |acc, j| (acc << 16) | column[e - j] as u128);
        let sorted = |key: &dyn Fn(usize) -> u128| {
            let mut keyed: Vec<(u128, u32)> = events.iter().map(|&e| (key(e as usize), e)).collect();
            keyed.sort_unstable();
            keyed.into_iter().map(|(_, e)| e).collect::<Vec<u32>>()
        };
        let by_next = sorted(&|e| ((column[e] as u128) << (16 * l)) | pack_context(e));
        let by_context = sorted(&pack_context);
        Self {
            column,
            by_next,
            by_context,
        }
    }

    fn n_events(&self) -> usize {
        self.by_context.len()
    }

    /// Events whose `order` most recent context tokens equal `newest_first[..order]`.
    fn context_range(&self, newest_first: &[TokenId], order: usize) -> Range<usize> {
        let mut r = 0..self.by_context.len();
        for (j, &tok) in newest_first.iter().enumerate().take(order) {
            if r.is_empty() {
                break;
            }
            r = refine(&self.by_context, r, tok, |e| self.column[e - j - 1]);
        }
        r
    }

    /// Events with the given next token and context.
    fn ngram_range(&self, newest_first: &[TokenId], order: usize, next: TokenId) -> Range<usize> {
        let mut r = refine(&self.by_next, 0..self.by_next.len(), next, |e| self.column[e]);
        for (j, &tok) in newest_first.iter().enumerate().take(order) {
            if r.is_empty() {
                break;
            }
            r = refine(&self.by_next, r, tok, |e| self.column[e - j - 1]);
        }
        r
    }
}

/// Per-position n-gram counts over temporal token histories.
#[derive(Debug, Clone, PartialEq)]
pub struct CountModel {
    context_len: usize,
    k: usize,
    clip_lengths: Vec<usize>,
    positions: Vec<PositionIndex>,
}

impl CountModel {
    pub fn context_len(&self) -> usize {
        self.context_len
    }

    pub fn vocab_size(&self) -> usize {
        self.k
    }

    pub fn n_positions(&self) -> usize {
        self.positions.len()
    }

    /// Training events `(clip, t >= L, u)` counted, over all positions.
    pub fn n_events(&self) -> usize {
        self.positions.iter().map(PositionIndex::n_events).sum()
    }

    /// Count of `next` after `context` (oldest first) at `position`; `context.len()` is the order.
    pub fn count(&self, position: usize, context: &[TokenId], next: TokenId) -> Result<u64> {
        let index = self.index(position)?;
        let newest = self.newest_first(context)?;
        Ok(index.ngram_range(&newest, newest.len(), next).len() as u64)
    }

    /// Total observations of `context` (oldest first) at `position`.
    pub fn context_total(&self, position: usize, context: &[TokenId]) -> Result<u64> {
        let index = self.index(position)?;
        let newest = self.newest_first(context)?;
        Ok(index.context_range(&newest, newest.len()).len() as u64)
    }

    fn newest_first(&self, context: &[TokenId]) -> Result<Vec<TokenId>> {
        if context.len() > self.context_len {
            return Err(Error::param(
                "context",
                format!("order {} exceeds L={}", context.len(), self.context_len),
            ));
        }
        Ok(context.iter().rev().copied().collect())
    }

    fn index(&self, position: usize) -> Result<&PositionIndex> {
        self.positions.get(position).ok_or(Error::InvalidPosition {
            position,
            n_positions: self.positions.len(),
        })
    }

    fn check_history(&self, position: usize, history: &[TokenId]) -> Result<&PositionIndex> {
        let index = self.index(position)?;
        if history.len() != self.context_len {
            return Err(Error::param(
                "history",
                format!("expected {} tokens, got {}", self.context_len, history.len()),
            ));
        }
        Ok(index)
    }

    fn check_config(&self, cfg: &PredictorConfig) -> Result<()> {
        cfg.validate()?;
        if cfg.context_len != self.context_len {
            return Err(Error::param(
                "context_len",
                format!(
                    "config has L={} but model was trained with L={}",
                    cfg.context_len, self.context_len
                ),
            ));
        }
        Ok(())
    }

    /// Probability of `target` given `newest_first` history, without building the distribution.
    fn prob_unchecked(
        &self,
        cfg: &PredictorConfig,
        index: &PositionIndex,
        newest_first: &[TokenId],
        target: TokenId,
    ) -> f64 {
        let kk = cfg.smoothing_k * self.k as f64;
        let mut p = cfg.uniform_weight() / self.k as f64;
        let mut ctx = 0..index.by_context.len();
        let mut ngram = refine(&index.by_next, 0..index.by_next.len(), target, |e| index.column[e]);
        for order in 0..=self.context_len {
            if order > 0 {
                let tok = newest_first[order - 1];
                if !ctx.is_empty() {
                    ctx = refine(&index.by_context, ctx, tok, |e| index.column[e - order]);
                }
                if !ngram.is_empty() {
                    ngram = refine(&index.by_next, ngram, tok, |e| index.column[e - order]);
                }
            }
            let w = cfg.order_weight(order);
            if w > 0.0 {
                p += w * (ngram.len() as f64 + cfg.smoothing_k) / (ctx.len() as f64 + kk);
            }
        }
        p
    }

    /// Probability of `target` at `position` given `history`, the `L` most recent tokens oldest first.
    pub fn prob(&self, cfg: &PredictorConfig, position: usize, history: &[TokenId], target: TokenId) -> Result<f64> {
        self.check_config(cfg)?;
        let index = self.check_history(position, history)?;
        if target as usize >= self.k {
            return Err(Error::InvalidToken {
                token: target as u32,
                k: self.k,
            });
        }
        let newest: Vec<TokenId> = history.iter().rev().copied().collect();
        Ok(self.prob_unchecked(cfg, index, &newest, target))
    }
}

/// Counts every `(u, z_{t-j..t-1}[u]) -> z_t[u]` for `t in [L, T)` and `j = L..=0`.
pub fn train(clips: &[Clip], cfg: &PredictorConfig, k: usize) -> Result<CountModel> {
    cfg.validate()?;
    let first = clips.first().ok_or(Error::Empty("no training clips"))?;
    let l = cfg.context_len;
    for clip in clips {
        if clip.len() <= l {
            return Err(Error::param(
                "clip",
                format!("training needs more than L={l} timesteps, got {}", clip.len()),
            ));
        }
        first.grids()[0].check_shape(&clip.grids()[0])?;
        clip.validate_vocab(k)?;
    }
    let clip_lengths: Vec<usize> = clips.iter().map(Clip::len).collect();
    let total: usize = clip_lengths.iter().sum();
    if total > u32::MAX as usize {
        return Err(Error::param(
            "clips",
            format!("{total} training timesteps exceed the index limit"),
        ));
    }
    let positions = (0..first.n_positions())
        .into_par_iter()
        .map(|u| {
            let column = clips
                .iter()
                .flat_map(|c| c.grids().iter().map(move |g| g.tokens()[u]))
                .collect();
            PositionIndex::build(column, &clip_lengths, l)
        })
        .collect();
    Ok(CountModel {
        context_len: l,
        k,
        clip_lengths,
        positions,
    })
}

/// Full next-token distribution at `position` given the `L` most recent tokens (oldest first).
pub fn predict(model: &CountModel, cfg: &PredictorConfig, position: usize, history: &[TokenId]) -> Result<Vec<f64>> {
    model.check_config(cfg)?;
    let index = model.check_history(position, history)?;
    let newest: Vec<TokenId> = history.iter().rev().copied().collect();
    let k = model.k;
    let kk = cfg.smoothing_k * k as f64;
    let mut dist = vec![cfg.uniform_weight() / k as f64; k];
    let mut counts = vec![0u64; k];
    for order in 0..=model.context_len {
        let w = cfg.order_weight(order);
        if w == 0.0 {
            continue;
        }
        let range = index.context_range(&newest, order);
        let total = range.len() as f64;
        counts.iter_mut().for_each(|c| *c = 0);
        for &e in &index.by_context[range] {
            counts[index.column[e as usize] as usize] += 1;
        }
        for (p, &c) in dist.iter_mut().zip(&counts) {
            *p += w * (c as f64 + cfg.smoothing_k) / (total + kk);
        }
    }
    Ok(dist)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionFilter {
    All,
    Dynamic,
}

/// Which `(t, u)` pairs to score per clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSpec {
    pub timesteps_per_clip: usize,
    pub positions_per_clip: usize,
    pub seed: u64,
    /// Score every `(t, u)` instead of sampling.
    pub full: bool,
}

impl Default for SampleSpec {
    fn default() -> Self {
        Self {
            timesteps_per_clip: 32,
            positions_per_clip: 64,
            seed: 0,
            full: false,
        }
    }
}

/// The scored `(t, u)` set for one clip. Depends only on `(spec, clip_id)` and the clip shape,
/// never on the reconstruction being scored.
pub fn sample_indices(
    spec: &SampleSpec,
    clip_id: u64,
    timesteps: usize,
    n_positions: usize,
    context_len: usize,
) -> Vec<(usize, usize)> {
    if timesteps <= context_len {
        return Vec::new();
    }
    let span = timesteps - context_len;
    let (ts, us): (Vec<usize>, Vec<usize>) = if spec.full {
        ((context_len..timesteps).collect(), (0..n_positions).collect())
    } else {
        let mut rng = stream_rng(spec.seed, Stream::Sampling, clip_id);
        let mut ts: Vec<usize> = index::sample(&mut rng, span, spec.timesteps_per_clip.min(span))
            .into_iter()
            .map(|i| i + context_len)
            .collect();
        let mut us = index::sample(&mut rng, n_positions, spec.positions_per_clip.min(n_positions)).into_vec();
        ts.sort_unstable();
        us.sort_unstable();
        (ts, us)
    };
    ts.iter().flat_map(|&t| us.iter().map(move |&u| (t, u))).collect()
}

/// Accumulated negative log2-likelihood.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LogLoss {
    pub bits: f64,
    pub count: u64,
}

impl LogLoss {
    pub fn merge(&mut self, other: LogLoss) {
        self.bits += other.bits;
        self.count += other.count;
    }

    /// `None` when nothing was scored.
    pub fn perplexity(&self) -> Option<Perplexity> {
        (self.count > 0).then(|| {
            let mean_bits = self.bits / self.count as f64;
            Perplexity {
                value: mean_bits.exp2(),
                cross_entropy_nats: mean_bits * std::f64::consts::LN_2,
                n_samples: self.count,
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Perplexity {
    pub value: f64,
    pub cross_entropy_nats: f64,
    pub n_samples: u64,
}

/// Log loss over all sampled positions and over the dynamic subset, for one clip.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ClipLogLoss {
    pub all: LogLoss,
    pub dynamic: LogLoss,
}

impl ClipLogLoss {
    pub fn merge(&mut self, other: ClipLogLoss) {
        self.all.merge(other.all);
        self.dynamic.merge(other.dynamic);
    }

    pub fn get(&self, filter: PositionFilter) -> &LogLoss {
        match filter {
            PositionFilter::All => &self.all,
            PositionFilter::Dynamic => &self.dynamic,
        }
    }
}

/// Scores `-log2 p(truth_t[u] | recon_{t-L..t-1}[u], u)` over the clip's sample set.
pub fn clip_log_loss(
    model: &CountModel,
    cfg: &PredictorConfig,
    truth: &Clip,
    recon: &Clip,
    clip_id: u64,
    spec: &SampleSpec,
) -> Result<ClipLogLoss> {
    model.check_config(cfg)?;
    truth.check_aligned(recon)?;
    if truth.n_positions() != model.n_positions() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} positions", model.n_positions()),
            actual: format!("{} positions", truth.n_positions()),
        });
    }
    truth.validate_vocab(model.k)?;
    let l = model.context_len;
    let mut out = ClipLogLoss::default();
    // Newest first.
    let mut history = vec![0 as TokenId; l];
    for (t, u) in sample_indices(spec, clip_id, truth.len(), truth.n_positions(), l) {
        for (j, h) in history.iter_mut().enumerate() {
            *h = recon.grids()[t - 1 - j].tokens()[u];
        }
        let target = truth.grids()[t].tokens()[u];
        let bits = -model.prob_unchecked(cfg, &model.positions[u], &history, target).log2();
        out.all.merge(LogLoss { bits, count: 1 });
        if truth.grids()[t - 1].tokens()[u] != target {
            out.dynamic.merge(LogLoss { bits, count: 1 });
        }
    }
    Ok(out)
}

/// Pooled perplexity over aligned ground-truth / reconstruction clips; clip ids are slice indices.
/// `None` when no sample passes the filter.
pub fn eval_perplexity(
    model: &CountModel,
    cfg: &PredictorConfig,
    truth: &[Clip],
    recon: &[Clip],
    filter: PositionFilter,
    spec: &SampleSpec,
) -> Result<Option<Perplexity>> {
    if truth.len() != recon.len() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} clips", truth.len()),
            actual: format!("{} clips", recon.len()),
        });
    }
    let mut total = LogLoss::default();
    for (i, (gt, rc)) in truth.iter().zip(recon).enumerate() {
        total.merge(*clip_log_loss(model, cfg, gt, rc, i as u64, spec)?.get(filter));
    }
    Ok(total.perplexity())
}

/// Binary dump: `"TKPM"`, version `u8`, then `L`, `k`, `n_positions`, `n_clips` as `u32`, the
/// `n_clips` training clip lengths as `u32`, then for each position its concatenated training
/// history as `u16` tokens. Little-endian. The count index is rebuilt on load.
pub fn write_model(path: impl AsRef<Path>, model: &CountModel) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut go = || -> std::io::Result<()> {
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&[MODEL_VERSION])?;
        let header = [
            model.context_len,
            model.k,
            model.positions.len(),
            model.clip_lengths.len(),
        ];
        for v in header.iter().chain(&model.clip_lengths) {
            w.write_all(&(*v as u32).to_le_bytes())?;
        }
        for index in &model.positions {
            for tok in &index.column {
                w.write_all(&tok.to_le_bytes())?;
            }
        }
        w.flush()
    };
    go().map_err(|e| Error::io(path, e))
}

pub fn read_model(path: impl AsRef<Path>) -> Result<CountModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |offset: usize, reason: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        reason,
    };
    let truncated = |need: usize| {
        fail(
            bytes.len(),
            format!("truncated: expected at least {need} bytes, found {}", bytes.len()),
        )
    };
    if bytes.get(..4).is_some_and(|m| m != MODEL_MAGIC) {
        return Err(fail(0, "bad magic".into()));
    }
    if bytes.len() < 21 {
        return Err(truncated(21));
    }
    if bytes[4] != MODEL_VERSION {
        return Err(fail(4, format!("unsupported version {}", bytes[4])));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[5 + 4 * i..9 + 4 * i].try_into().unwrap()) as usize;
    let (context_len, k, n_pos, n_clips) = (word(0), word(1), word(2), word(3));
    if context_len == 0 || context_len > MAX_CONTEXT_LEN {
        return Err(fail(5, format!("context length {context_len} out of range")));
    }
    if !(2..=1 << 16).contains(&k) {
        return Err(fail(9, format!("vocabulary size {k} out of range")));
    }
    let lengths_end = 21 + 4 * n_clips;
    if bytes.len() < lengths_end {
        return Err(truncated(lengths_end));
    }
    let clip_lengths: Vec<usize> = (0..n_clips).map(|i| word(4 + i)).collect();
    if let Some(i) = clip_lengths.iter().position(|&len| len <= context_len) {
        return Err(fail(
            21 + 4 * i,
            format!("clip length {} not longer than L", clip_lengths[i]),
        ));
    }
    let total: usize = clip_lengths.iter().sum();
    let expected = lengths_end + 2 * total * n_pos;
    if bytes.len() < expected {
        return Err(truncated(expected));
    }
    if bytes.len() > expected {
        return Err(fail(expected, format!("{} trailing bytes", bytes.len() - expected)));
    }
    let body = &bytes[lengths_end..];
    let columns: Vec<Vec<TokenId>> = (0..n_pos)
        .map(|u| {
            body[2 * total * u..2 * total * (u + 1)]
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]))
                .collect()
        })
        .collect();
    for (u, col) in columns.iter().enumerate() {
        if let Some(i) = col.iter().position(|&t| t as usize >= k) {
            return Err(fail(
                lengths_end + 2 * (total * u + i),
                format!("token {} out of range for k={k}", col[i]),
            ));
        }
    }
    let positions = columns
        .into_par_iter()
        .map(|col| PositionIndex::build(col, &clip_lengths, context_len))
        .collect();
    Ok(CountModel {
        context_len,
        k,
        clip_lengths,
        positions,
    })
}
