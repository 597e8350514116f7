//! Discrete core × uncore frequency lattice, configuration states and the
//! 3×3 action geometry.
//!
//! The learner only ever sees indices. Frequencies in GHz are used at the
//! edges (config files, energy model, reports).

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Two levels closer than this are considered the same frequency.
const LEVEL_EPS_GHZ: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("{0} frequency list is empty")]
    EmptyDimension(Dimension),
    #[error("{0} frequency list contains a non-finite or non-positive value: {1}")]
    BadLevel(Dimension, f64),
    #[error("action {action} is not valid at state {state}")]
    InvalidAction { state: ConfigState, action: ActionDelta },
    #[error("state {0} lies outside the grid")]
    OutOfBounds(ConfigState),
    #[error("no grid level matches {0} GHz")]
    UnknownFrequency(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dimension {
    Core,
    Uncore,
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dimension::Core => f.write_str("core"),
            Dimension::Uncore => f.write_str("uncore"),
        }
    }
}

/// Rectangular lattice of selectable (core, uncore) frequency pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGrid", into = "RawGrid")]
pub struct FrequencyGrid {
    core_levels: Vec<f64>,
    uncore_levels: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawGrid {
    core_ghz: Vec<f64>,
    uncore_ghz: Vec<f64>,
}

impl TryFrom<RawGrid> for FrequencyGrid {
    type Error = GridError;

    fn try_from(raw: RawGrid) -> Result<Self, Self::Error> {
        make_grid(&raw.core_ghz, &raw.uncore_ghz)
    }
}

impl From<FrequencyGrid> for RawGrid {
    fn from(grid: FrequencyGrid) -> Self {
        RawGrid {
            core_ghz: grid.core_levels,
            uncore_ghz: grid.uncore_levels,
        }
    }
}

fn normalize_levels(levels: &[f64], dim: Dimension) -> Result<Vec<f64>, GridError> {
    if levels.is_empty() {
        return Err(GridError::EmptyDimension(dim));
    }
    if let Some(&bad) = levels.iter().find(|v| !v.is_finite() || **v <= 0.0) {
        return Err(GridError::BadLevel(dim, bad));
    }
    let mut sorted = levels.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup_by(|b, a| (*b - *a).abs() < LEVEL_EPS_GHZ);
    if sorted.is_empty() {
        return Err(GridError::EmptyDimension(dim));
    }
    Ok(sorted)
}

/// Builds a grid from unordered frequency lists. Levels are sorted ascending
/// and duplicates removed.
pub fn make_grid(core_ghz: &[f64], uncore_ghz: &[f64]) -> Result<FrequencyGrid, GridError> {
    Ok(FrequencyGrid {
        core_levels: normalize_levels(core_ghz, Dimension::Core)?,
        uncore_levels: normalize_levels(uncore_ghz, Dimension::Uncore)?,
    })
}

/// Evenly spaced levels from `lo` to `hi` inclusive, rounded to the MHz.
pub fn stepped_levels(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step + 1e-6).floor() as usize;
    (0..=n)
        .map(|i| ((lo + i as f64 * step) * 1000.0).round() / 1000.0)
        .collect()
}

impl FrequencyGrid {
    /// Core 1.2–2.5 GHz and uncore 1.2–3.0 GHz, both in 100 MHz steps.
    pub fn default_grid() -> Self {
        make_grid(
            &stepped_levels(1.2, 2.5, 0.1),
            &stepped_levels(1.2, 3.0, 0.1),
        )
        .expect("default grid is well formed")
    }

    pub fn core_levels(&self) -> &[f64] {
        &self.core_levels
    }

    pub fn uncore_levels(&self) -> &[f64] {
        &self.uncore_levels
    }

    pub fn core_count(&self) -> usize {
        self.core_levels.len()
    }

    pub fn uncore_count(&self) -> usize {
        self.uncore_levels.len()
    }

    pub fn len(&self) -> usize {
        self.core_count() * self.uncore_count()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, s: ConfigState) -> bool {
        s.core_idx < self.core_count() && s.uncore_idx < self.uncore_count()
    }

    pub fn check(&self, s: ConfigState) -> Result<ConfigState, GridError> {
        if self.contains(s) {
            Ok(s)
        } else {
            Err(GridError::OutOfBounds(s))
        }
    }

    /// Row-major linear index (core major).
    pub fn linear_index(&self, s: ConfigState) -> usize {
        s.core_idx * self.uncore_count() + s.uncore_idx
    }

    pub fn state_at(&self, linear: usize) -> ConfigState {
        ConfigState::new(linear / self.uncore_count(), linear % self.uncore_count())
    }

    /// All states in row-major order.
    pub fn states(&self) -> impl Iterator<Item = ConfigState> + '_ {
        (0..self.len()).map(move |i| self.state_at(i))
    }

    pub fn core_ghz(&self, s: ConfigState) -> f64 {
        self.core_levels[s.core_idx]
    }

    pub fn uncore_ghz(&self, s: ConfigState) -> f64 {
        self.uncore_levels[s.uncore_idx]
    }

    /// Looks up the state whose levels match the given frequencies to within 1 MHz.
    pub fn state_for(&self, core_ghz: f64, uncore_ghz: f64) -> Result<ConfigState, GridError> {
        let find = |levels: &[f64], ghz: f64| {
            levels
                .iter()
                .position(|l| (l - ghz).abs() < 5e-4)
                .ok_or(GridError::UnknownFrequency(ghz))
        };
        Ok(ConfigState::new(
            find(&self.core_levels, core_ghz)?,
            find(&self.uncore_levels, uncore_ghz)?,
        ))
    }

    pub fn is_valid(&self, s: ConfigState, a: ActionDelta) -> bool {
        shift(s.core_idx, a.core_delta, self.core_count()).is_some()
            && shift(s.uncore_idx, a.uncore_delta, self.uncore_count()).is_some()
    }

    /// Actions that keep the state inside the grid, in canonical order.
    /// Always contains the stay action.
    pub fn valid_actions(&self, s: ConfigState) -> Vec<ActionDelta> {
        ActionDelta::ALL
            .into_iter()
            .filter(|a| self.is_valid(s, *a))
            .collect()
    }

    pub fn apply_action(&self, s: ConfigState, a: ActionDelta) -> Result<ConfigState, GridError> {
        let core = shift(s.core_idx, a.core_delta, self.core_count());
        let uncore = shift(s.uncore_idx, a.uncore_delta, self.uncore_count());
        match (core, uncore) {
            (Some(c), Some(u)) => Ok(ConfigState::new(c, u)),
            _ => Err(GridError::InvalidAction { state: s, action: a }),
        }
    }
}

fn shift(idx: usize, delta: i8, len: usize) -> Option<usize> {
    let next = idx as i64 + delta as i64;
    (0..len as i64).contains(&next).then_some(next as usize)
}

/// A point on the frequency grid, by index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConfigState {
    pub core_idx: usize,
    pub uncore_idx: usize,
}

impl ConfigState {
    pub const fn new(core_idx: usize, uncore_idx: usize) -> Self {
        Self {
            core_idx,
            uncore_idx,
        }
    }

    /// Chebyshev distance: the number of moves separating two states.
    pub fn steps_to(&self, other: ConfigState) -> usize {
        self.core_idx
            .abs_diff(other.core_idx)
            .max(self.uncore_idx.abs_diff(other.uncore_idx))
    }
}

impl fmt::Display for ConfigState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.core_idx, self.uncore_idx)
    }
}

/// Move of at most one level in each dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[i8; 2]", into = "[i8; 2]")]
pub struct ActionDelta {
    core_delta: i8,
    uncore_delta: i8,
}

impl ActionDelta {
    pub const STAY: ActionDelta = ActionDelta {
        core_delta: 0,
        uncore_delta: 0,
    };

    /// Canonical order: row-major over (core, uncore) in {-1, 0, +1}².
    pub const ALL: [ActionDelta; 9] = {
        let mut all = [Self::STAY; 9];
        let mut i = 0;
        while i < 9 {
            all[i] = ActionDelta {
                core_delta: (i / 3) as i8 - 1,
                uncore_delta: (i % 3) as i8 - 1,
            };
            i += 1;
        }
        all
    };

    pub fn new(core_delta: i8, uncore_delta: i8) -> Option<Self> {
        ((-1..=1).contains(&core_delta) && (-1..=1).contains(&uncore_delta)).then_some(Self {
            core_delta,
            uncore_delta,
        })
    }

    pub fn core_delta(&self) -> i8 {
        self.core_delta
    }

    pub fn uncore_delta(&self) -> i8 {
        self.uncore_delta
    }

    pub fn is_stay(&self) -> bool {
        *self == Self::STAY
    }

    pub fn negate(&self) -> Self {
        Self {
            core_delta: -self.core_delta,
            uncore_delta: -self.uncore_delta,
        }
    }

    /// Position in [`ActionDelta::ALL`].
    pub fn index(&self) -> usize {
        ((self.core_delta + 1) * 3 + (self.uncore_delta + 1)) as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }
}

impl TryFrom<[i8; 2]> for ActionDelta {
    type Error = String;

    fn try_from(v: [i8; 2]) -> Result<Self, Self::Error> {
        ActionDelta::new(v[0], v[1]).ok_or_else(|| format!("action deltas out of range: {v:?}"))
    }
}

impl From<ActionDelta> for [i8; 2] {
    fn from(a: ActionDelta) -> Self {
        [a.core_delta, a.uncore_delta]
    }
}

impl fmt::Display for ActionDelta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{:+}, {:+}]", self.core_delta, self.uncore_delta)
    }
}
