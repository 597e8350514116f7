//! Tabular state-action learner for frequency selection.
//!
//! States are grid points, actions are single-level moves in core and uncore
//! frequency. Rewards are the normalised energy difference between two
//! consecutive measurements of the same runtime situation.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calltree::RtsId;
use crate::energymodel::EnergySample;
use crate::freqspace::{ActionDelta, ConfigState, FrequencyGrid};
use crate::rng::{rng_from_seed, SimRng};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LearnerError {
    #[error("energies sum to zero; reward is undefined")]
    DegenerateEnergy,
    #[error("no table entry for action {action} at state {state}")]
    InvalidEntry { state: ConfigState, action: ActionDelta },
    #[error("transition {from} --{action}--> {to} is not a grid move")]
    TransitionMismatch {
        from: ConfigState,
        action: ActionDelta,
        to: ConfigState,
    },
    #[error("sample was taken at {sample} but the tuner is at {current}")]
    StateMismatch { sample: ConfigState, current: ConfigState },
    #[error("state {0} is outside the grid")]
    OutOfBounds(ConfigState),
    #[error("{name} = {value} is out of range {range}")]
    BadHyperparameter {
        name: &'static str,
        value: f64,
        range: &'static str,
    },
    #[error("malformed table: {0}")]
    MalformedTable(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearnerConfig {
    /// Learning rate.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Discount factor.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Probability of taking a uniformly random valid action.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Initial value of the stay action at the start state.
    #[serde(default = "default_stay_bias")]
    pub stay_bias: f64,
}

fn default_alpha() -> f64 {
    0.1
}
fn default_gamma() -> f64 {
    0.5
}
fn default_epsilon() -> f64 {
    0.25
}
fn default_stay_bias() -> f64 {
    -0.1
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            alpha: default_alpha(),
            gamma: default_gamma(),
            epsilon: default_epsilon(),
            stay_bias: default_stay_bias(),
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<(), LearnerError> {
        let bad = |name, value, range| Err(LearnerError::BadHyperparameter { name, value, range });
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha", self.alpha, "[0, 1]");
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma", self.gamma, "[0, 1)");
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return bad("epsilon", self.epsilon, "[0, 1]");
        }
        if !self.stay_bias.is_finite() {
            return bad("stay_bias", self.stay_bias, "finite");
        }
        Ok(())
    }
}

/// State-action values for one runtime situation, plus the last energy seen at
/// each visited state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TableRepr", into = "TableRepr")]
pub struct QTable {
    grid: FrequencyGrid,
    values: Vec<[f64; 9]>,
    /// Bit `i` set once action `i` left its initial value.
    touched: Vec<u16>,
    last_energy: Vec<Option<f64>>,
    visited: Vec<bool>,
}

/// Fresh table: every valid entry 0 except the stay action at `start`.
pub fn init_qtable(grid: &FrequencyGrid, start: ConfigState, cfg: &LearnerConfig) -> QTable {
    assert!(grid.contains(start), "start state {start} outside grid");
    let n = grid.len();
    let mut table = QTable {
        grid: grid.clone(),
        values: vec![[0.0; 9]; n],
        touched: vec![0; n],
        last_energy: vec![None; n],
        visited: vec![false; n],
    };
    let i = grid.linear_index(start);
    table.values[i][ActionDelta::STAY.index()] = cfg.stay_bias;
    table.visited[i] = true;
    table
}

impl QTable {
    pub fn grid(&self) -> &FrequencyGrid {
        &self.grid
    }

    pub fn get(&self, s: ConfigState, a: ActionDelta) -> Option<f64> {
        (self.grid.contains(s) && self.grid.is_valid(s, a)).then(|| self.values[self.grid.linear_index(s)][a.index()])
    }

    /// Valid (action, value) pairs at `s` in canonical action order.
    pub fn row(&self, s: ConfigState) -> Vec<(ActionDelta, f64)> {
        let vals = &self.values[self.grid.linear_index(s)];
        self.grid
            .valid_actions(s)
            .into_iter()
            .map(|a| (a, vals[a.index()]))
            .collect()
    }

    pub fn max_value(&self, s: ConfigState) -> f64 {
        self.row(s).into_iter().map(|(_, q)| q).fold(f64::NEG_INFINITY, f64::max)
    }

    /// First action with the largest value in canonical order.
    pub fn greedy_action(&self, s: ConfigState) -> ActionDelta {
        let mut best = (ActionDelta::STAY, f64::NEG_INFINITY);
        for (a, q) in self.row(s) {
            if q > best.1 {
                best = (a, q);
            }
        }
        best.0
    }

    pub fn is_touched(&self, s: ConfigState, a: ActionDelta) -> bool {
        self.touched[self.grid.linear_index(s)] & (1 << a.index()) != 0
    }

    /// Overwrites one entry, marking it as learned.
    pub fn set(&mut self, s: ConfigState, a: ActionDelta, q: f64) -> Result<(), LearnerError> {
        if self.get(s, a).is_none() {
            return Err(LearnerError::InvalidEntry { state: s, action: a });
        }
        self.write(s, a, q);
        Ok(())
    }

    fn write(&mut self, s: ConfigState, a: ActionDelta, q: f64) {
        let i = self.grid.linear_index(s);
        self.values[i][a.index()] = q;
        self.touched[i] |= 1 << a.index();
    }

    pub fn is_visited(&self, s: ConfigState) -> bool {
        self.visited[self.grid.linear_index(s)]
    }

    pub fn visited_states(&self) -> impl Iterator<Item = ConfigState> + '_ {
        self.grid.states().filter(|s| self.is_visited(*s))
    }

    pub fn last_energy(&self, s: ConfigState) -> Option<f64> {
        self.last_energy[self.grid.linear_index(s)]
    }

    /// Marks `s` visited and stores its latest energy. Returns whether `s` was
    /// new.
    pub fn record_energy(&mut self, s: ConfigState, joules: f64) -> bool {
        let i = self.grid.linear_index(s);
        let fresh = !self.visited[i];
        self.visited[i] = true;
        self.last_energy[i] = Some(joules);
        fresh
    }

    /// Applies one temporal-difference update to `(s_t, a_t)` and returns the
    /// new value. No other entry changes.
    pub fn update(
        &mut self,
        s_t: ConfigState,
        a_t: ActionDelta,
        reward: f64,
        s_next: ConfigState,
        cfg: &LearnerConfig,
    ) -> Result<f64, LearnerError> {
        let q = self.get(s_t, a_t).ok_or(LearnerError::InvalidEntry {
            state: s_t,
            action: a_t,
        })?;
        if self.grid.apply_action(s_t, a_t).ok() != Some(s_next) {
            return Err(LearnerError::TransitionMismatch {
                from: s_t,
                action: a_t,
                to: s_next,
            });
        }
        let target = reward + cfg.gamma * self.max_value(s_next);
        let updated = q + cfg.alpha * (target - q);
        self.write(s_t, a_t, updated);
        Ok(updated)
    }
}

/// Normalised energy change: positive when the newer measurement is lower.
pub fn compute_reward(e_prev: f64, e_curr: f64) -> Result<f64, LearnerError> {
    let mean = 0.5 * (e_prev + e_curr);
    if mean == 0.0 {
        return Err(LearnerError::DegenerateEnergy);
    }
    Ok((e_prev - e_curr) / mean)
}

/// ε-greedy choice among the valid actions at `s`. Returns the action and
/// whether it came from the random branch.
pub fn select_action<R: Rng + ?Sized>(
    table: &QTable,
    s: ConfigState,
    cfg: &LearnerConfig,
    rng: &mut R,
) -> (ActionDelta, bool) {
    if rng.gen::<f64>() < cfg.epsilon {
        let valid = table.grid.valid_actions(s);
        let a = *valid.choose(rng).expect("stay is always valid");
        (a, true)
    } else {
        (table.greedy_action(s), false)
    }
}

/// Seeds untouched entries at a newly visited state from energies already
/// recorded at its neighbours. Returns the number of entries written.
pub fn seed_from_neighbors(table: &mut QTable, s_new: ConfigState) -> usize {
    let Some(here) = table.last_energy(s_new) else {
        return 0;
    };
    let mut seeded = 0;
    for a in table.grid.valid_actions(s_new) {
        if a.is_stay() || table.is_touched(s_new, a) {
            continue;
        }
        let neighbour = table.grid.apply_action(s_new, a).expect("valid action");
        let Some(there) = table.last_energy(neighbour) else {
            continue;
        };
        if let Ok(r) = compute_reward(here, there) {
            table.write(s_new, a, r);
            seeded += 1;
        }
    }
    seeded
}

/// Learner bookkeeping for one runtime situation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunerState {
    pub rts: RtsId,
    /// State the next measurement is taken at.
    pub current: ConfigState,
    pub prev: Option<ConfigState>,
    pub prev_action: Option<ActionDelta>,
    pub prev_energy: Option<f64>,
    #[serde(default)]
    pub prev_explored: bool,
    pub step: u64,
}

impl TunerState {
    pub fn new(rts: RtsId, start: ConfigState) -> Self {
        Self {
            rts,
            current: start,
            prev: None,
            prev_action: None,
            prev_energy: None,
            prev_explored: false,
            step: 0,
        }
    }

    pub fn is_consistent(&self) -> bool {
        let present = [
            self.prev.is_some(),
            self.prev_action.is_some(),
            self.prev_energy.is_some(),
        ];
        present.iter().all(|p| *p) || present.iter().all(|p| !*p)
    }
}

/// One completed measure → update → select cycle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub state_before: ConfigState,
    pub action: ActionDelta,
    pub state_after: ConfigState,
    pub energy_j: f64,
    pub reward: f64,
    pub q_after: f64,
    pub explored: bool,
}

/// Feeds one measurement taken at `ts.current` into the learner and returns
/// the state for the next invocation. The first call only stores the initial
/// energy and yields no record.
pub fn tuner_step<R: Rng + ?Sized>(
    ts: &mut TunerState,
    table: &mut QTable,
    e_curr: &EnergySample,
    cfg: &LearnerConfig,
    rng: &mut R,
) -> Result<(ConfigState, Option<StepRecord>), LearnerError> {
    if e_curr.state != ts.current {
        return Err(LearnerError::StateMismatch {
            sample: e_curr.state,
            current: ts.current,
        });
    }
    let current = ts.current;

    let record = match (ts.prev, ts.prev_action, ts.prev_energy) {
        (Some(prev), Some(action), Some(prev_energy)) => {
            let reward = compute_reward(prev_energy, e_curr.joules)?;
            let q_after = table.update(prev, action, reward, current, cfg)?;
            if table.record_energy(current, e_curr.joules) {
                seed_from_neighbors(table, current);
            }
            ts.step += 1;
            Some(StepRecord {
                step: ts.step,
                state_before: prev,
                action,
                state_after: current,
                energy_j: e_curr.joules,
                reward,
                q_after,
                explored: ts.prev_explored,
            })
        }
        _ => {
            table.record_energy(current, e_curr.joules);
            None
        }
    };

    let (action, explored) = select_action(table, current, cfg, rng);
    let next = table
        .grid
        .apply_action(current, action)
        .expect("selected actions are valid");
    ts.prev = Some(current);
    ts.prev_action = Some(action);
    ts.prev_energy = Some(e_curr.joules);
    ts.prev_explored = explored;
    ts.current = next;
    Ok((next, record))
}

/// Table, bookkeeping and exploration stream for one runtime situation.
#[derive(Debug, Clone, PartialEq)]
pub struct Tuner {
    pub table: QTable,
    pub state: TunerState,
    pub rng: SimRng,
}

impl Tuner {
    pub fn new(grid: &FrequencyGrid, start: ConfigState, rts: RtsId, cfg: &LearnerConfig, seed: u64) -> Self {
        Self {
            table: init_qtable(grid, start, cfg),
            state: TunerState::new(rts, start),
            rng: rng_from_seed(seed),
        }
    }

    pub fn current(&self) -> ConfigState {
        self.state.current
    }

    pub fn step(
        &mut self,
        sample: &EnergySample,
        cfg: &LearnerConfig,
    ) -> Result<(ConfigState, Option<StepRecord>), LearnerError> {
        tuner_step(&mut self.state, &mut self.table, sample, cfg, &mut self.rng)
    }
}

#[derive(Serialize, Deserialize)]
struct EntryRepr {
    core_idx: usize,
    uncore_idx: usize,
    action: ActionDelta,
    q: f64,
    #[serde(default)]
    touched: bool,
}

#[derive(Serialize, Deserialize)]
struct EnergyRepr {
    core_idx: usize,
    uncore_idx: usize,
    joules: f64,
}

#[derive(Serialize, Deserialize)]
struct TableRepr {
    grid: FrequencyGrid,
    entries: Vec<EntryRepr>,
    last_energy: Vec<EnergyRepr>,
    visited: Vec<ConfigState>,
}

impl From<QTable> for TableRepr {
    fn from(t: QTable) -> Self {
        let mut entries = Vec::new();
        let mut last_energy = Vec::new();
        let mut visited = Vec::new();
        for s in t.grid.states() {
            for (action, q) in t.row(s) {
                entries.push(EntryRepr {
                    core_idx: s.core_idx,
                    uncore_idx: s.uncore_idx,
                    action,
                    q,
                    touched: t.is_touched(s, action),
                });
            }
            if let Some(joules) = t.last_energy(s) {
                last_energy.push(EnergyRepr {
                    core_idx: s.core_idx,
                    uncore_idx: s.uncore_idx,
                    joules,
                });
            }
            if t.is_visited(s) {
                visited.push(s);
            }
        }
        TableRepr {
            grid: t.grid,
            entries,
            last_energy,
            visited,
        }
    }
}

impl TryFrom<TableRepr> for QTable {
    type Error = LearnerError;

    fn try_from(r: TableRepr) -> Result<Self, Self::Error> {
        let grid = r.grid;
        let n = grid.len();
        let mut table = QTable {
            grid: grid.clone(),
            values: vec![[0.0; 9]; n],
            touched: vec![0; n],
            last_energy: vec![None; n],
            visited: vec![false; n],
        };
        let mut seen = vec![0u16; n];
        for e in r.entries {
            let s = ConfigState::new(e.core_idx, e.uncore_idx);
            if !grid.contains(s) || !grid.is_valid(s, e.action) {
                return Err(LearnerError::MalformedTable(format!(
                    "entry {} at {s} is not a valid grid move",
                    e.action
                )));
            }
            if !e.q.is_finite() {
                return Err(LearnerError::MalformedTable(format!("non-finite q at {s}")));
            }
            let i = grid.linear_index(s);
            let bit = 1 << e.action.index();
            if seen[i] & bit != 0 {
                return Err(LearnerError::MalformedTable(format!("duplicate entry {} at {s}", e.action)));
            }
            seen[i] |= bit;
            table.values[i][e.action.index()] = e.q;
            if e.touched {
                table.touched[i] |= bit;
            }
        }
        for s in grid.states() {
            let expected = grid.valid_actions(s).iter().fold(0u16, |m, a| m | 1 << a.index());
            if seen[grid.linear_index(s)] != expected {
                return Err(LearnerError::MalformedTable(format!("missing entries at {s}")));
            }
        }
        for s in r.visited {
            if !grid.contains(s) {
                return Err(LearnerError::MalformedTable(format!("visited state {s} outside grid")));
            }
            table.visited[grid.linear_index(s)] = true;
        }
        for e in r.last_energy {
            let s = ConfigState::new(e.core_idx, e.uncore_idx);
            if !grid.contains(s) || !table.is_visited(s) {
                return Err(LearnerError::MalformedTable(format!("energy at unvisited state {s}")));
            }
            table.last_energy[grid.linear_index(s)] = Some(e.joules);
        }
        Ok(table)
    }
}
