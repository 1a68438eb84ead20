//! Fidelity metrics over token grids and clips.

use crate::codebook::Codebook;
use crate::error::{Error, Result};
use crate::grid::{Clip, TokenGrid};

/// Per-position change flags between two consecutive ground-truth grids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DynamicMask {
    flags: Vec<bool>,
}

impl DynamicMask {
    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn is_dynamic(&self, position: usize) -> bool {
        self.flags.get(position).copied().unwrap_or(false)
    }
}

/// Fraction of positions where `current` and `reference` disagree.
pub fn hamming_drift(current: &TokenGrid, reference: &TokenGrid) -> Result<f64> {
    current.check_shape(reference)?;
    Ok(count_diff(current, reference) as f64 / current.n_positions() as f64)
}

#[inline]
pub(crate) fn count_diff(a: &TokenGrid, b: &TokenGrid) -> usize {
    a.tokens().iter().zip(b.tokens()).filter(|(x, y)| x != y).count()
}

pub fn dynamic_mask(curr: &TokenGrid, prev: &TokenGrid) -> Result<DynamicMask> {
    curr.check_shape(prev)?;
    Ok(DynamicMask {
        flags: curr.tokens().iter().zip(prev.tokens()).map(|(a, b)| a != b).collect(),
    })
}

/// Mean of `1[recon_t[u] != truth_t[u]]` over every `(t, u)`.
pub fn mismatch_rate(truth: &Clip, recon: &Clip) -> Result<f64> {
    let (mismatched, total) = mismatch_counts(truth, recon)?;
    if total == 0 {
        return Err(Error::Empty("clip has no positions"));
    }
    Ok(mismatched as f64 / total as f64)
}

pub(crate) fn mismatch_counts(truth: &Clip, recon: &Clip) -> Result<(u64, u64)> {
    truth.check_aligned(recon)?;
    let mismatched = truth
        .grids()
        .iter()
        .zip(recon.grids())
        .map(|(a, b)| count_diff(a, b) as u64)
        .sum();
    Ok((mismatched, (truth.len() * truth.n_positions()) as u64))
}

/// Running sum of cosine distances over dynamic positions.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DistortionSum {
    pub sum: f64,
    pub count: u64,
}

impl DistortionSum {
    /// `None` when no dynamic position was observed.
    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }

    pub fn merge(&mut self, other: DistortionSum) {
        self.sum += other.sum;
        self.count += other.count;
    }
}

/// Dynamic-only embedding distortion: mean `1 - cos(E[z_t[u]], E[recon_t[u]])` over
/// positions whose ground-truth token changed at `t`. `None` for a fully static clip.
pub fn dyn_embedding_distortion(truth: &Clip, recon: &Clip, codebook: &Codebook) -> Result<Option<f64>> {
    Ok(dyn_distortion_sum(truth, recon, codebook)?.mean())
}

pub(crate) fn dyn_distortion_sum(truth: &Clip, recon: &Clip, codebook: &Codebook) -> Result<DistortionSum> {
    truth.check_aligned(recon)?;
    truth.validate_vocab(codebook.k())?;
    recon.validate_vocab(codebook.k())?;
    let mut acc = DistortionSum::default();
    let grids = truth.grids();
    for t in 1..grids.len() {
        let (prev, curr, rec) = (&grids[t - 1], &grids[t], &recon.grids()[t]);
        for ((&p, &c), &r) in prev.tokens().iter().zip(curr.tokens()).zip(rec.tokens()) {
            if p != c {
                acc.sum += codebook.cosine_change_unchecked(c, r);
                acc.count += 1;
            }
        }
    }
    Ok(acc)
}
