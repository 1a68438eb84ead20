//! Token grids and clips.

use crate::error::{Error, Result};

/// Index into a codebook. Files store tokens as 16-bit values, so `k <= 65536`.
pub type TokenId = u16;

pub const DEFAULT_HEIGHT: usize = 18;
pub const DEFAULT_WIDTH: usize = 32;
pub const DEFAULT_RATE_HZ: f64 = 10.0;

/// One timestep of sender state: a `height x width` grid of token ids, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenGrid {
    height: usize,
    width: usize,
    tokens: Vec<TokenId>,
}

impl TokenGrid {
    pub fn new(height: usize, width: usize, tokens: Vec<TokenId>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::param("grid", "height and width must be positive"));
        }
        if tokens.len() != height * width {
            return Err(Error::DimensionMismatch {
                expected: format!("{} tokens ({height}x{width})", height * width),
                actual: format!("{} tokens", tokens.len()),
            });
        }
        Ok(Self { height, width, tokens })
    }

    pub fn filled(height: usize, width: usize, token: TokenId) -> Result<Self> {
        Self::new(height, width, vec![token; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n_positions(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn get(&self, position: usize) -> Option<TokenId> {
        self.tokens.get(position).copied()
    }

    pub fn set(&mut self, position: usize, token: TokenId) -> Result<()> {
        let n_positions = self.tokens.len();
        let slot = self
            .tokens
            .get_mut(position)
            .ok_or(Error::InvalidPosition { position, n_positions })?;
        *slot = token;
        Ok(())
    }

    pub fn into_tokens(self) -> Vec<TokenId> {
        self.tokens
    }

    /// Fails unless every token is `< k`.
    pub fn validate_vocab(&self, k: usize) -> Result<()> {
        match self.tokens.iter().find(|&&t| t as usize >= k) {
            Some(&t) => Err(Error::InvalidToken { token: t as u32, k }),
            None => Ok(()),
        }
    }

    pub fn same_shape(&self, other: &TokenGrid) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub(crate) fn check_shape(&self, other: &TokenGrid) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                expected: format!("{}x{}", self.height, self.width),
                actual: format!("{}x{}", other.height, other.width),
            })
        }
    }
}

/// A sequence of token grids sampled at a fixed rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    grids: Vec<TokenGrid>,
    rate_hz: f64,
}

impl Clip {
    pub fn new(grids: Vec<TokenGrid>, rate_hz: f64) -> Result<Self> {
        if !(rate_hz > 0.0 && rate_hz.is_finite()) {
            return Err(Error::param("rate_hz", format!("must be positive, got {rate_hz}")));
        }
        if let Some(first) = grids.first() {
            for g in &grids[1..] {
                first.check_shape(g)?;
            }
        }
        Ok(Self { grids, rate_hz })
    }

    /// Same frames, relabeled with a different sampling rate.
    pub fn with_rate(self, rate_hz: f64) -> Result<Self> {
        Clip::new(self.grids, rate_hz)
    }

    pub fn grids(&self) -> &[TokenGrid] {
        &self.grids
    }

    pub fn len(&self) -> usize {
        self.grids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grids.is_empty()
    }

    pub fn rate_hz(&self) -> f64 {
        self.rate_hz
    }

    /// `(height, width)` of every grid, `None` for an empty clip.
    pub fn shape(&self) -> Option<(usize, usize)> {
        self.grids.first().map(|g| (g.height(), g.width()))
    }

    pub fn n_positions(&self) -> usize {
        self.grids.first().map_or(0, TokenGrid::n_positions)
    }

    pub fn validate_vocab(&self, k: usize) -> Result<()> {
        self.grids.iter().try_for_each(|g| g.validate_vocab(k))
    }

    pub(crate) fn check_aligned(&self, other: &Clip) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::DimensionMismatch {
                expected: format!("{} timesteps", self.len()),
                actual: format!("{} timesteps", other.len()),
            });
        }
        if let (Some(a), Some(b)) = (self.grids.first(), other.grids.first()) {
            a.check_shape(b)?;
        }
        Ok(())
    }
}
