use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codebook::Codebook;
use crate::error::{Error, Result};
use crate::grid::{Clip, TokenGrid, TokenId, DEFAULT_RATE_HZ};
use crate::metrics::hamming_drift;
use crate::rng::{stream_rng, Stream};

/// Knobs for the synthetic token dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicsConfig {
    /// Per-step probability that a position changes outside bursts.
    pub base_change_rate: f64,
    /// Per-step probability of a drift burst (abrupt scene change).
    pub burst_prob: f64,
    /// Per-position change probability during a burst.
    pub burst_change_rate: f64,
    /// Probability that a change draws a replacement from the token's own cluster.
    pub within_cluster_prob: f64,
    pub seed: u64,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        Self {
            base_change_rate: 0.25,
            burst_prob: 0.03,
            burst_change_rate: 0.8,
            within_cluster_prob: 0.7,
            seed: 0,
        }
    }
}

impl DynamicsConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &'static str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::param(name, format!("must be in [0, 1], got {v}")))
            }
        };
        unit("base_change_rate", self.base_change_rate)?;
        unit("burst_prob", self.burst_prob)?;
        unit("burst_change_rate", self.burst_change_rate)?;
        unit("within_cluster_prob", self.within_cluster_prob)?;
        if self.burst_change_rate < self.base_change_rate {
            return Err(Error::param(
                "burst_change_rate",
                format!(
                    "must be >= base_change_rate ({} < {})",
                    self.burst_change_rate, self.base_change_rate
                ),
            ));
        }
        Ok(())
    }

    /// Expected per-step changed fraction with uniform replacements.
    pub fn expected_change_rate(&self, k: usize) -> f64 {
        let stay = 1.0 - 1.0 / k as f64;
        (self.base_change_rate * (1.0 - self.burst_prob) + self.burst_change_rate * self.burst_prob) * stay
    }
}

/// Generates a `timesteps`-long clip of `height x width` grids.
///
/// Frame 0 is uniform over the vocabulary. Afterwards each position changes independently
/// with the step's rate (the burst rate with probability `burst_prob`). A change draws a
/// token from the current token's cluster with probability `within_cluster_prob`, otherwise
/// uniformly; the draw may return the same token. Codebooks without cluster structure
/// always draw uniformly.
pub fn gen_clip(
    cfg: &DynamicsConfig,
    codebook: &Codebook,
    timesteps: usize,
    height: usize,
    width: usize,
) -> Result<Clip> {
    gen_clip_from(cfg, codebook, timesteps, height, width, 0)
}

/// Generates `n_clips` clips; clip `i` draws from its own stream keyed by `(cfg.seed, i)`, so any
/// clip can be regenerated alone. Clip 0 equals [`gen_clip`].
pub fn gen_clips(
    cfg: &DynamicsConfig,
    codebook: &Codebook,
    n_clips: usize,
    timesteps: usize,
    height: usize,
    width: usize,
) -> Result<Vec<Clip>> {
    (0..n_clips)
        .into_par_iter()
        .map(|i| gen_clip_from(cfg, codebook, timesteps, height, width, i as u64))
        .collect()
}

fn gen_clip_from(
    cfg: &DynamicsConfig,
    codebook: &Codebook,
    timesteps: usize,
    height: usize,
    width: usize,
    index: u64,
) -> Result<Clip> {
    cfg.validate()?;
    if timesteps < 2 {
        return Err(Error::param("timesteps", format!("must be >= 2, got {timesteps}")));
    }
    if height == 0 || width == 0 {
        return Err(Error::param("grid", "height and width must be positive"));
    }
    let k = codebook.k();
    let n_pos = height * width;
    let mut rng = stream_rng(cfg.seed, Stream::Clip, index);

    let mut current: Vec<TokenId> = (0..n_pos).map(|_| rng.random_range(0..k) as TokenId).collect();
    let mut grids = Vec::with_capacity(timesteps);
    grids.push(TokenGrid::new(height, width, current.clone())?);

    let clusters = codebook.n_clusters().filter(|&c| c < k);
    for _ in 1..timesteps {
        let rate = if rng.random::<f64>() < cfg.burst_prob {
            cfg.burst_change_rate
        } else {
            cfg.base_change_rate
        };
        for tok in current.iter_mut() {
            if rng.random::<f64>() >= rate {
                continue;
            }
            let within = rng.random::<f64>() < cfg.within_cluster_prob;
            *tok = match clusters {
                Some(c) if within => {
                    let cluster = *tok as usize % c;
                    let members = (k - cluster).div_ceil(c);
                    (cluster + c * rng.random_range(0..members)) as TokenId
                }
                _ => rng.random_range(0..k) as TokenId,
            };
        }
        grids.push(TokenGrid::new(height, width, current.clone())?);
    }
    Clip::new(grids, DEFAULT_RATE_HZ)
}

/// One sample per `(clip, t >= 1)`: the Hamming drift between consecutive ground-truth grids.
pub fn change_rate_distribution<'a, I>(clips: I) -> Result<Vec<f64>>
where
    I: IntoIterator<Item = &'a Clip>,
{
    let mut samples = Vec::new();
    let mut any = false;
    for clip in clips {
        any = true;
        if clip.len() < 2 {
            return Err(Error::param(
                "clip",
                format!("need at least 2 timesteps, got {}", clip.len()),
            ));
        }
        for pair in clip.grids().windows(2) {
            samples.push(hamming_drift(&pair[1], &pair[0])?);
        }
    }
    if !any {
        return Err(Error::Empty("no clips"));
    }
    Ok(samples)
}

/// Nearest-rank percentile: the smallest sample whose cumulative fraction is `>= q / 100`.
pub fn percentile_threshold(samples: &[f64], q: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("empty distribution"));
    }
    if !(q > 0.0 && q < 100.0) {
        return Err(Error::param("q", format!("percentile must be in (0, 100), got {q}")));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    // Guard against 0.995 * 1000 landing a hair above an integer.
    let rank = ((q * n as f64 / 100.0) - 1e-9).ceil().max(1.0) as usize;
    Ok(sorted[rank.min(n) - 1])
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    use super::*;
    use crate::codebook::gen_clustered_codebook;

    fn small_codebook() -> Codebook {
        gen_clustered_codebook(256, 8, 16, 0.2, 3).unwrap()
    }

    fn cfg(base: f64, burst_prob: f64, burst: f64, within: f64, seed: u64) -> DynamicsConfig {
        DynamicsConfig {
            base_change_rate: base,
            burst_prob,
            burst_change_rate: burst,
            within_cluster_prob: within,
            seed,
        }
    }

    #[test]
    fn static_dynamics_repeat_frame_zero() {
        let clip = gen_clip(&cfg(0.0, 0.0, 0.0, 0.0, 1), &small_codebook(), 20, 4, 5).unwrap();
        assert!(clip.grids().iter().all(|g| g == &clip.grids()[0]));
    }

    #[test]
    fn full_change_rate() {
        let cb = small_codebook();
        let clip = gen_clip(&cfg(1.0, 0.0, 1.0, 0.0, 9), &cb, 1001, 18, 32).unwrap();
        let dist = change_rate_distribution([&clip]).unwrap();
        assert_eq!(dist.len(), 1000);
        let mean = dist.iter().sum::<f64>() / dist.len() as f64;
        // Expected 1 - 1/k = 0.99609; allow Monte-Carlo slack.
        assert!(mean > 1.0 - 1.0 / 256.0 - 0.002, "mean {mean}");
    }

    #[test]
    fn base_rate_matches_over_seeds() {
        let cb = gen_clustered_codebook(8192, 8, 64, 0.2, 1).unwrap();
        let mut means = Vec::new();
        for seed in 0..20 {
            let clip = gen_clip(&cfg(0.05, 0.0, 0.05, 0.0, seed), &cb, 200, 18, 32).unwrap();
            let d = change_rate_distribution([&clip]).unwrap();
            means.push(d.iter().sum::<f64>() / d.len() as f64);
        }
        let mean = means.iter().sum::<f64>() / means.len() as f64;
        assert!((mean - 0.05).abs() <= 0.01, "mean {mean}");
    }

    #[test]
    fn mean_change_rate_with_bursts() {
        let cb = gen_clustered_codebook(1024, 8, 16, 0.2, 1).unwrap();
        let c = cfg(0.1, 0.1, 0.6, 0.0, 0);
        let clips: Vec<Clip> = (0..30)
            .map(|s| gen_clip(&DynamicsConfig { seed: s, ..c }, &cb, 200, 18, 32).unwrap())
            .collect();
        let d = change_rate_distribution(&clips).unwrap();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        assert!((mean - c.expected_change_rate(1024)).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn deterministic_given_seed() {
        let cb = small_codebook();
        let c = cfg(0.2, 0.05, 0.7, 0.5, 77);
        assert_eq!(
            gen_clip(&c, &cb, 30, 3, 4).unwrap(),
            gen_clip(&c, &cb, 30, 3, 4).unwrap()
        );
        let other = DynamicsConfig { seed: 78, ..c };
        assert_ne!(
            gen_clip(&c, &cb, 30, 3, 4).unwrap(),
            gen_clip(&other, &cb, 30, 3, 4).unwrap()
        );
    }

    #[test]
    fn within_cluster_changes_stay_in_cluster() {
        let cb = small_codebook();
        let clip = gen_clip(&cfg(0.5, 0.0, 0.5, 1.0, 4), &cb, 50, 3, 3).unwrap();
        for pair in clip.grids().windows(2) {
            for (a, b) in pair[0].tokens().iter().zip(pair[1].tokens()) {
                assert_eq!(a % 16, b % 16);
            }
        }
    }

    #[test]
    fn gen_rejects_bad_input() {
        let cb = small_codebook();
        assert!(gen_clip(&cfg(0.1, 0.0, 0.1, 0.0, 0), &cb, 1, 2, 2).is_err());
        assert!(gen_clip(&cfg(0.1, 0.0, 0.1, 0.0, 0), &cb, 5, 0, 2).is_err());
        assert!(gen_clip(&cfg(0.5, 0.0, 0.1, 0.0, 0), &cb, 5, 2, 2).is_err());
        assert!(gen_clip(&cfg(1.5, 0.0, 1.5, 0.0, 0), &cb, 5, 2, 2).is_err());
    }

    #[test]
    fn distribution_examples() {
        let a = TokenGrid::filled(18, 32, 1).unwrap();
        let b = TokenGrid::filled(18, 32, 2).unwrap();
        let stat = Clip::new(vec![a.clone(); 5], 10.0).unwrap();
        assert!(change_rate_distribution([&stat]).unwrap().iter().all(|&x| x == 0.0));

        let alt = Clip::new(vec![a.clone(), b.clone(), a.clone(), b], 10.0).unwrap();
        assert!(change_rate_distribution([&alt]).unwrap().iter().all(|&x| x == 1.0));

        let mut c = a.clone();
        for u in [0, 10, 500] {
            c.set(u, 3).unwrap();
        }
        let two = Clip::new(vec![a, c], 10.0).unwrap();
        let d = change_rate_distribution([&two]).unwrap();
        assert_eq!(d.len(), 1);
        assert_abs_diff_eq!(d[0], 3.0 / 576.0, epsilon = 1e-15);

        assert!(change_rate_distribution(std::iter::empty::<&Clip>()).is_err());
    }

    #[test]
    fn percentile_examples() {
        assert_eq!(percentile_threshold(&[0.5; 7], 37.0).unwrap(), 0.5);
        let tenths: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        assert_eq!(percentile_threshold(&tenths, 99.0).unwrap(), 1.0);
        assert_eq!(percentile_threshold(&tenths, 50.0).unwrap(), 0.5);
        let thousand: Vec<f64> = (1..=1000).map(|i| i as f64).collect();
        assert_eq!(percentile_threshold(&thousand, 99.5).unwrap(), 995.0);
        assert_eq!(percentile_threshold(&thousand, 99.9).unwrap(), 999.0);
        assert!(percentile_threshold(&[], 50.0).is_err());
        assert!(percentile_threshold(&tenths, 100.0).is_err());
        assert!(percentile_threshold(&tenths, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn percentile_monotone_in_q(
            samples in proptest::collection::vec(0.0f64..1.0, 1..200),
            q1 in 0.01f64..99.99,
            q2 in 0.01f64..99.99,
        ) {
            let (lo, hi) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
            prop_assert!(percentile_threshold(&samples, lo).unwrap() <= percentile_threshold(&samples, hi).unwrap());
        }
    }
}
