//! Lossy link: i.i.d. delta drops, keyframes always delivered.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocol::Message;
use crate::rng::counter_uniform;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub drop_prob: f64,
    pub seed: u64,
}

impl ChannelConfig {
    pub fn new(drop_prob: f64, seed: u64) -> Result<Self> {
        let cfg = Self { drop_prob, seed };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if (0.0..=1.0).contains(&self.drop_prob) {
            Ok(())
        } else {
            Err(Error::param(
                "drop_prob",
                format!("must be in [0, 1], got {}", self.drop_prob),
            ))
        }
    }
}

/// One draw per delta message, keyed by the message timestep.
///
/// Keying on the timestep (rather than a running stream) makes the loss pattern a function of
/// `(seed, t)`: two policies replayed on the same clip see the same drop decision at every step,
/// and raising `drop_prob` only adds drops.
#[derive(Debug, Clone)]
pub struct Channel {
    cfg: ChannelConfig,
    sent_deltas: u64,
    dropped_deltas: u64,
}

impl Channel {
    pub fn new(cfg: ChannelConfig) -> Self {
        Self {
            cfg,
            sent_deltas: 0,
            dropped_deltas: 0,
        }
    }

    pub fn config(&self) -> &ChannelConfig {
        &self.cfg
    }

    /// Whether `msg` reaches the receiver.
    pub fn transmit(&mut self, msg: &Message) -> bool {
        if msg.is_keyframe() {
            return true;
        }
        self.sent_deltas += 1;
        let delivered = !self.drops_at(msg.t() as u64);
        if !delivered {
            self.dropped_deltas += 1;
        }
        delivered
    }

    #[inline]
    fn drops_at(&self, t: u64) -> bool {
        // `u < p` never fires at p = 0 and always fires at p = 1 since u is in [0, 1).
        counter_uniform(self.cfg.seed, t) < self.cfg.drop_prob
    }

    pub fn sent_deltas(&self) -> u64 {
        self.sent_deltas
    }

    pub fn dropped_deltas(&self) -> u64 {
        self.dropped_deltas
    }
}
