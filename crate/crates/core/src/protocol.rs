//! Keyframe/delta sender and receiver.
//!
//! The sender keeps an optimistic reference of what the receiver holds (no feedback channel).
//! Each step it either sends a full keyframe or a delta carrying the top-`M` changed positions
//! ranked by embedding-space change against that reference.

use serde::{Deserialize, Serialize};

use crate::codebook::Codebook;
use crate::error::{Error, Result};
use crate::grid::{TokenGrid, TokenId};
use crate::metrics::count_diff;

pub const DEFAULT_HEADER_BYTES: usize = 20;
pub const DEFAULT_UPDATE_BYTES: usize = 4;
pub const DEFAULT_N_MAX: usize = 30;

/// Byte accounting for delta and keyframe messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetModel {
    pub payload_budget_bytes: usize,
    pub header_bytes: usize,
    pub update_bytes: usize,
    /// Fixed-length coded grid: `ceil(n_positions * ceil(log2 k) / 8)`.
    pub keyframe_grid_bytes: usize,
}

/// Bits needed for a fixed-length token id.
pub fn token_bits(k: usize) -> u32 {
    if k <= 1 {
        1
    } else {
        usize::BITS - (k - 1).leading_zeros()
    }
}

impl BudgetModel {
    pub fn new(payload_budget_bytes: usize, n_positions: usize, k: usize) -> Result<Self> {
        Self::with_costs(
            payload_budget_bytes,
            DEFAULT_HEADER_BYTES,
            DEFAULT_UPDATE_BYTES,
            n_positions,
            k,
        )
    }

    pub fn with_costs(
        payload_budget_bytes: usize,
        header_bytes: usize,
        update_bytes: usize,
        n_positions: usize,
        k: usize,
    ) -> Result<Self> {
        if update_bytes == 0 {
            return Err(Error::param("update_bytes", "must be positive"));
        }
        if payload_budget_bytes <= header_bytes {
            return Err(Error::param(
                "payload_budget_bytes",
                format!("budget {payload_budget_bytes} must exceed header {header_bytes}"),
            ));
        }
        let keyframe_grid_bytes = (n_positions * token_bits(k) as usize).div_ceil(8);
        Ok(Self {
            payload_budget_bytes,
            header_bytes,
            update_bytes,
            keyframe_grid_bytes,
        })
    }

    /// `M = floor((B - b_hdr) / b_upd)`.
    pub fn capacity(&self) -> usize {
        (self.payload_budget_bytes - self.header_bytes) / self.update_bytes
    }

    pub fn keyframe_bytes(&self) -> usize {
        self.keyframe_grid_bytes + self.header_bytes
    }
}

/// `M = floor((B - b_hdr) / b_upd)`; fails when the budget does not cover the header.
pub fn budget_capacity(bm: &BudgetModel) -> Result<usize> {
    if bm.payload_budget_bytes <= bm.header_bytes {
        return Err(Error::param(
            "payload_budget_bytes",
            format!(
                "budget {} must exceed header {}",
                bm.payload_budget_bytes, bm.header_bytes
            ),
        ));
    }
    if bm.update_bytes == 0 {
        return Err(Error::param("update_bytes", "must be positive"));
    }
    Ok(bm.capacity())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Update {
    pub position: usize,
    pub token: TokenId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    Keyframe { t: usize, grid: TokenGrid },
    Delta { t: usize, updates: Vec<Update> },
}

impl Message {
    pub fn t(&self) -> usize {
        match self {
            Message::Keyframe { t, .. } | Message::Delta { t, .. } => *t,
        }
    }

    pub fn is_keyframe(&self) -> bool {
        matches!(self, Message::Keyframe { .. })
    }

    /// Transport encoding: type byte (0 keyframe, 1 delta), `u32` timestep, then either
    /// every token as `u16` or a `u16` count followed by `(u16 position, u16 token)` pairs.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let t = u32::try_from(self.t()).map_err(|_| Error::param("t", "timestep exceeds u32"))?;
        let mut out = Vec::new();
        match self {
            Message::Keyframe { grid, .. } => {
                out.reserve(5 + 2 * grid.n_positions());
                out.push(0);
                out.extend_from_slice(&t.to_le_bytes());
                for &tok in grid.tokens() {
                    out.extend_from_slice(&tok.to_le_bytes());
                }
            }
            Message::Delta { updates, .. } => {
                let count =
                    u16::try_from(updates.len()).map_err(|_| Error::param("updates", "more than 65535 updates"))?;
                out.reserve(7 + 4 * updates.len());
                out.push(1);
                out.extend_from_slice(&t.to_le_bytes());
                out.extend_from_slice(&count.to_le_bytes());
                for up in updates {
                    let pos = u16::try_from(up.position)
                        .map_err(|_| Error::param("position", format!("{} exceeds u16", up.position)))?;
                    out.extend_from_slice(&pos.to_le_bytes());
                    out.extend_from_slice(&up.token.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    /// Inverse of [`Message::encode`]; the grid shape is agreed out of band.
    pub fn decode(bytes: &[u8], height: usize, width: usize) -> Result<Message> {
        let need = |len: usize, what: &str| -> Result<()> {
            if bytes.len() < len {
                Err(Error::Wire {
                    offset: bytes.len(),
                    reason: format!("truncated {what}: expected {len} bytes, found {}", bytes.len()),
                })
            } else {
                Ok(())
            }
        };
        let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
        need(5, "header")?;
        let t = u32::from_le_bytes(bytes[1..5].try_into().unwrap()) as usize;
        let (msg, used) = match bytes[0] {
            0 => {
                let n = height * width;
                need(5 + 2 * n, "keyframe")?;
                let tokens = (0..n).map(|i| u16_at(5 + 2 * i)).collect();
                let grid = TokenGrid::new(height, width, tokens)?;
                (Message::Keyframe { t, grid }, 5 + 2 * n)
            }
            1 => {
                need(7, "delta header")?;
                let count = u16_at(5) as usize;
                need(7 + 4 * count, "delta updates")?;
                let updates = (0..count)
                    .map(|i| Update {
                        position: u16_at(7 + 4 * i) as usize,
                        token: u16_at(9 + 4 * i),
                    })
                    .collect();
                (Message::Delta { t, updates }, 7 + 4 * count)
            }
            other => {
                return Err(Error::Wire {
                    offset: 0,
                    reason: format!("unknown message type {other}"),
                })
            }
        };
        if used != bytes.len() {
            return Err(Error::Wire {
                offset: used,
                reason: format!("{} trailing bytes", bytes.len() - used),
            });
        }
        Ok(msg)
    }
}

/// Accounted size: keyframes cost the fixed-length grid plus header, deltas the header plus
/// `b_upd` per update.
pub fn message_bytes(msg: &Message, bm: &BudgetModel) -> usize {
    match msg {
        Message::Keyframe { .. } => bm.keyframe_bytes(),
        Message::Delta { updates, .. } => bm.header_bytes + bm.update_bytes * updates.len(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum KeyframePolicy {
    Periodic { n: usize },
    Adaptive { tau_h: f64, n_max: usize },
}

impl KeyframePolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            KeyframePolicy::Periodic { n: 0 } => Err(Error::param("n", "keyframe interval must be >= 1")),
            KeyframePolicy::Adaptive { tau_h, .. } if !(0.0..=1.0).contains(&tau_h) => {
                Err(Error::param("tau_h", format!("must be in [0, 1], got {tau_h}")))
            }
            KeyframePolicy::Adaptive { n_max: 0, .. } => Err(Error::param("n_max", "must be >= 1")),
            _ => Ok(()),
        }
    }

    /// Stable identifier used in result tables.
    pub fn id(&self) -> String {
        match self {
            KeyframePolicy::Periodic { n } => format!("periodic-{n}"),
            KeyframePolicy::Adaptive { tau_h, n_max } => format!("adaptive-{tau_h:.4}-{n_max}"),
        }
    }

    pub fn is_adaptive(&self) -> bool {
        matches!(self, KeyframePolicy::Adaptive { .. })
    }

    fn wants_keyframe(&self, drift: f64, gap: usize) -> bool {
        match *self {
            KeyframePolicy::Periodic { n } => gap >= n,
            KeyframePolicy::Adaptive { tau_h, n_max } => drift > tau_h || gap >= n_max,
        }
    }
}

#[inline]
fn rank_order(a: &(f64, usize), b: &(f64, usize)) -> std::cmp::Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// Keeps the best `m` of `scored` by descending change, ties to the lower position.
fn top_m(mut scored: Vec<(f64, usize)>, m: usize) -> Vec<(f64, usize)> {
    if m == 0 {
        return Vec::new();
    }
    if scored.len() > m {
        scored.select_nth_unstable_by(m - 1, rank_order);
        scored.truncate(m);
    }
    scored.sort_unstable_by(rank_order);
    scored
}

/// Ranks positions where `current` differs from `reference` by cosine change and returns
/// the top `m`, ordered by descending change then ascending position.
pub fn select_deltas(current: &TokenGrid, reference: &TokenGrid, codebook: &Codebook, m: usize) -> Result<Vec<Update>> {
    current.check_shape(reference)?;
    current.validate_vocab(codebook.k())?;
    reference.validate_vocab(codebook.k())?;
    let scored = current
        .tokens()
        .iter()
        .zip(reference.tokens())
        .enumerate()
        .filter(|(_, (a, b))| a != b)
        .map(|(u, (&a, &b))| (codebook.cosine_change_unchecked(a, b), u))
        .collect();
    Ok(top_m(scored, m)
        .into_iter()
        .map(|(_, u)| Update {
            position: u,
            token: current.tokens()[u],
        })
        .collect())
}

#[derive(Debug, Clone, Copy)]
struct CachedChange {
    current: TokenId,
    reference: TokenId,
    change: f64,
}

/// Sender reference state plus a per-position memo of the last computed change magnitude.
#[derive(Debug, Clone)]
pub struct SenderState {
    reference: TokenGrid,
    last_kf: usize,
    t: usize,
    memo: Vec<CachedChange>,
}

impl SenderState {
    /// The mandatory initial keyframe at `t = 0`.
    pub fn init(z0: &TokenGrid) -> (SenderState, Message) {
        let memo = z0
            .tokens()
            .iter()
            .map(|&tok| CachedChange {
                current: tok,
                reference: tok,
                change: 0.0,
            })
            .collect();
        let state = SenderState {
            reference: z0.clone(),
            last_kf: 0,
            t: 0,
            memo,
        };
        (state, Message::Keyframe { t: 0, grid: z0.clone() })
    }

    pub fn reference(&self) -> &TokenGrid {
        &self.reference
    }

    pub fn last_keyframe(&self) -> usize {
        self.last_kf
    }

    pub fn t(&self) -> usize {
        self.t
    }

    /// Processes the grid for timestep `t`, which must be `self.t() + 1`.
    pub fn step(
        &mut self,
        t: usize,
        z: &TokenGrid,
        policy: &KeyframePolicy,
        budget: &BudgetModel,
        codebook: &Codebook,
    ) -> Result<Message> {
        self.step_with(t, z, policy, budget, codebook.k(), |a, b| {
            codebook.cosine_change_unchecked(a, b)
        })
    }

    /// `step` with a caller-supplied change function, which must agree with the codebook's.
    pub(crate) fn step_with(
        &mut self,
        t: usize,
        z: &TokenGrid,
        policy: &KeyframePolicy,
        budget: &BudgetModel,
        k: usize,
        mut change: impl FnMut(TokenId, TokenId) -> f64,
    ) -> Result<Message> {
        if t != self.t + 1 {
            return Err(Error::NonConsecutiveStep {
                expected: self.t + 1,
                actual: t,
            });
        }
        self.reference.check_shape(z)?;
        z.validate_vocab(k)?;
        self.t = t;

        let drift = count_diff(z, &self.reference) as f64 / z.n_positions() as f64;
        if policy.wants_keyframe(drift, t - self.last_kf) {
            self.reference = z.clone();
            self.last_kf = t;
            return Ok(Message::Keyframe { t, grid: z.clone() });
        }

        let mut scored = Vec::new();
        for (u, (&cur, &reference)) in z.tokens().iter().zip(self.reference.tokens()).enumerate() {
            if cur == reference {
                continue;
            }
            let slot = &mut self.memo[u];
            if slot.current != cur || slot.reference != reference {
                *slot = CachedChange {
                    current: cur,
                    reference,
                    change: change(cur, reference),
                };
            }
            scored.push((slot.change, u));
        }
        let updates: Vec<Update> = top_m(scored, budget.capacity())
            .into_iter()
            .map(|(_, u)| Update {
                position: u,
                token: z.tokens()[u],
            })
            .collect();
        for up in &updates {
            self.reference.set(up.position, up.token)?;
        }
        Ok(Message::Delta { t, updates })
    }
}

/// Receiver reconstruction. Uninitialized until the first keyframe arrives.
#[derive(Debug, Clone, Default)]
pub struct ReceiverState {
    recon: Option<TokenGrid>,
    t: Option<usize>,
}

impl ReceiverState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn recon(&self) -> Option<&TokenGrid> {
        self.recon.as_ref()
    }

    pub fn t(&self) -> Option<usize> {
        self.t
    }

    /// Applies a delivered message, or `None` for a dropped one (state is retained).
    pub fn apply(&mut self, delivered: Option<&Message>) -> Result<()> {
        let Some(msg) = delivered else {
            self.t = Some(self.t.map_or(0, |t| t + 1));
            return Ok(());
        };
        if let Some(prev) = self.t {
            if msg.t() <= prev {
                return Err(Error::NonConsecutiveStep {
                    expected: prev + 1,
                    actual: msg.t(),
                });
            }
        }
        match msg {
            Message::Keyframe { grid, .. } => {
                if let Some(r) = &self.recon {
                    r.check_shape(grid)?;
                }
                self.recon = Some(grid.clone());
            }
            Message::Delta { updates, .. } => {
                let recon = self
                    .recon
                    .as_mut()
                    .ok_or_else(|| Error::param("receiver", "delta received before any keyframe"))?;
                let n_positions = recon.n_positions();
                if let Some(bad) = updates.iter().find(|u| u.position >= n_positions) {
                    return Err(Error::InvalidPosition {
                        position: bad.position,
                        n_positions,
                    });
                }
                for up in updates {
                    recon.set(up.position, up.token)?;
                }
            }
        }
        self.t = Some(msg.t());
        Ok(())
    }
}
