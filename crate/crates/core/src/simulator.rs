//! End-to-end experiments: simulated processes replay a fixed region
//! pattern, tune every candidate runtime situation independently and are
//! compared against an untuned baseline.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calltree::{CallTree, CallTreeError, NodeId, RtsId, Segment, ROOT_NAME};
use crate::energymodel::{EnergyError, EnergySample, EnergySurface, Meter, MeterConfig, RegionEnergy};
use crate::freqspace::{ConfigState, FrequencyGrid, GridError};
use crate::learner::{LearnerConfig, LearnerError, StepRecord, Tuner};
use crate::persistence::RestartMode;
use crate::rng::{derive_seed, fnv1a, rng_from_seed};

const METER_SALT: u64 = 0x006d_6574_6572;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid experiment: {0}")]
    Invalid(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    CallTree(#[from] CallTreeError),
}

/// A frequency pair given in GHz, resolved against the grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FreqPoint {
    pub core_ghz: f64,
    pub uncore_ghz: f64,
}

impl FreqPoint {
    pub fn resolve(&self, grid: &FrequencyGrid) -> Result<ConfigState, GridError> {
        grid.state_for(self.core_ghz, self.uncore_ghz)
    }

    pub fn of(grid: &FrequencyGrid, s: ConfigState) -> Self {
        Self {
            core_ghz: grid.core_ghz(s),
            uncore_ghz: grid.uncore_ghz(s),
        }
    }
}

/// One step below `main` in a region's call path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PathStep {
    Function(String),
    Parameter { param: String, value: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSpec {
    /// Call path below `main`; the last step must be a function.
    pub path: Vec<PathStep>,
    #[serde(flatten)]
    pub energy: RegionEnergy,
}

impl RegionSpec {
    pub fn rts(&self) -> RtsId {
        let mut segs = vec![Segment::Function(ROOT_NAME.to_string())];
        segs.extend(self.path.iter().map(|p| match p {
            PathStep::Function(n) => Segment::Function(n.clone()),
            PathStep::Parameter { param, value } => Segment::Parameter(param.clone(), value.clone()),
        }));
        RtsId::from_segments(segs).expect("rooted at main")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseChange {
    /// First iteration (0-based, counted across resumed runs) using the new surface.
    pub iteration: u64,
    #[serde(default)]
    pub region: usize,
    pub surface: EnergySurface,
}

fn default_processes() -> usize {
    1
}

fn default_threshold() -> f64 {
    crate::calltree::DEFAULT_THRESHOLD_MS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub grid: FrequencyGrid,
    #[serde(default)]
    pub learner: LearnerConfig,
    #[serde(default)]
    pub meter: MeterConfig,
    #[serde(default)]
    pub restart: RestartMode,
    #[serde(default = "default_processes")]
    pub processes: usize,
    pub iterations: u64,
    pub regions: Vec<RegionSpec>,
    pub start: FreqPoint,
    pub default: FreqPoint,
    #[serde(default)]
    pub phase_changes: Vec<PhaseChange>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_threshold")]
    pub threshold_ms: f64,
}

impl ExperimentSpec {
    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let spec: Self = serde_json::from_str(text).map_err(|e| SimError::Invalid(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.learner.validate()?;
        self.meter.validate()?;
        self.start_state()?;
        self.default_state()?;
        if self.processes == 0 {
            return Err(SimError::Invalid("processes must be at least 1".into()));
        }
        if self.regions.is_empty() {
            return Err(SimError::Invalid("no regions".into()));
        }
        if !(self.threshold_ms >= 0.0 && self.threshold_ms.is_finite()) {
            return Err(SimError::Invalid(format!("threshold_ms = {}", self.threshold_ms)));
        }
        let mut seen = std::collections::BTreeSet::new();
        for r in &self.regions {
            if !matches!(r.path.last(), Some(PathStep::Function(_))) {
                return Err(SimError::Invalid("region paths must end in a function".into()));
            }
            if !seen.insert(r.rts()) {
                return Err(SimError::Invalid(format!("duplicate region {}", r.rts())));
            }
            r.energy.validate(&self.grid)?;
        }
        for pc in &self.phase_changes {
            if pc.region >= self.regions.len() {
                return Err(SimError::Invalid(format!("phase change names region {}", pc.region)));
            }
            pc.surface.validate(&self.grid)?;
        }
        Ok(())
    }

    pub fn start_state(&self) -> Result<ConfigState, GridError> {
        self.start.resolve(&self.grid)
    }

    pub fn default_state(&self) -> Result<ConfigState, GridError> {
        self.default.resolve(&self.grid)
    }

    pub fn process_seed(&self, process: usize) -> u64 {
        derive_seed(self.seed, process as u64)
    }

    /// Region energy model in effect during `iteration`.
    pub fn region_at(&self, region: usize, iteration: u64) -> RegionEnergy {
        let mut energy = self.regions[region].energy.clone();
        if let Some(pc) = self
            .phase_changes
            .iter()
            .filter(|pc| pc.region == region && pc.iteration <= iteration)
            .max_by_key(|pc| pc.iteration)
        {
            energy.surface = pc.surface.clone();
        }
        energy
    }
}

/// One measured region invocation in a process trace.
#[derive(Debug, Clone, PartialEq)]
pub enum TraceEvent {
    /// No tuner yet, or the region is filtered out.
    Untuned {
        iteration: u64,
        rts: RtsId,
        sample: EnergySample,
    },
    /// First measurement of a new tuner.
    Initial {
        iteration: u64,
        rts: RtsId,
        sample: EnergySample,
    },
    Step {
        iteration: u64,
        rts: RtsId,
        sample: EnergySample,
        record: StepRecord,
    },
}

impl TraceEvent {
    pub fn sample(&self) -> &EnergySample {
        match self {
            TraceEvent::Untuned { sample, .. } | TraceEvent::Initial { sample, .. } | TraceEvent::Step { sample, .. } => {
                sample
            }
        }
    }

    pub fn rts(&self) -> &RtsId {
        match self {
            TraceEvent::Untuned { rts, .. } | TraceEvent::Initial { rts, .. } | TraceEvent::Step { rts, .. } => rts,
        }
    }

    pub fn iteration(&self) -> u64 {
        match self {
            TraceEvent::Untuned { iteration, .. }
            | TraceEvent::Initial { iteration, .. }
            | TraceEvent::Step { iteration, .. } => *iteration,
        }
    }

    pub fn record(&self) -> Option<&StepRecord> {
        match self {
            TraceEvent::Step { record, .. } => Some(record),
            _ => None,
        }
    }
}

/// Everything one simulated process owns.
#[derive(Debug, Clone)]
pub struct ProcessSim {
    pub index: usize,
    pub tree: CallTree,
    pub meter: Meter,
    pub tuners: BTreeMap<RtsId, Tuner>,
    /// Configuration the hardware was last set to.
    pub hardware: ConfigState,
    pub clock_ms: f64,
    pub iterations_done: u64,
}

impl ProcessSim {
    pub fn fresh(spec: &ExperimentSpec, index: usize) -> Result<Self, SimError> {
        let seed = spec.process_seed(index);
        let mut tree = CallTree::new();
        tree.enter_region(ROOT_NAME, 0.0)?;
        Ok(Self {
            index,
            tree,
            meter: Meter::with_rng(spec.meter, rng_from_seed(derive_seed(seed, METER_SALT))),
            tuners: BTreeMap::new(),
            hardware: spec.default_state()?,
            clock_ms: 0.0,
            iterations_done: 0,
        })
    }

    pub fn tuner_seed(spec: &ExperimentSpec, index: usize, rts: &RtsId) -> u64 {
        derive_seed(spec.process_seed(index), fnv1a(rts.to_string().as_bytes()))
    }

    fn enter_path(&mut self, region: &RegionSpec) -> Result<NodeId, SimError> {
        let mut leaf = None;
        for step in &region.path {
            match step {
                PathStep::Function(name) => leaf = Some(self.tree.enter_region(name, self.clock_ms)?),
                PathStep::Parameter { param, value } => {
                    self.tree.set_parameter(param, value)?;
                }
            }
        }
        Ok(leaf.expect("validated: path ends in a function"))
    }

    fn exit_path(&mut self, region: &RegionSpec) -> Result<(), SimError> {
        for step in region.path.iter().rev() {
            if let PathStep::Function(name) = step {
                self.tree.exit_region(name, self.clock_ms)?;
            }
        }
        Ok(())
    }

    /// Runs `iterations` more sweeps over the region pattern.
    pub fn run(&mut self, spec: &ExperimentSpec, iterations: u64) -> Result<Vec<TraceEvent>, SimError> {
        let start = spec.start_state()?;
        let mut events = Vec::with_capacity((iterations as usize) * spec.regions.len());
        for _ in 0..iterations {
            let iteration = self.iterations_done;
            for (ri, region) in spec.regions.iter().enumerate() {
                let energy = spec.region_at(ri, iteration);
                let rts = region.rts();
                let leaf = self.enter_path(region)?;

                if let Some(t) = self.tuners.get(&rts) {
                    self.hardware = t.current();
                }
                let sample = self.meter.measure(&energy, self.hardware, &spec.grid);
                self.clock_ms += sample.duration_ms;
                self.exit_path(region)?;

                match self.tuners.get_mut(&rts) {
                    Some(tuner) => {
                        let (_, record) = tuner.step(&sample, &spec.learner)?;
                        events.push(match record {
                            Some(record) => TraceEvent::Step {
                                iteration,
                                rts,
                                sample,
                                record,
                            },
                            None => TraceEvent::Initial { iteration, rts, sample },
                        });
                    }
                    None => {
                        let node = self.tree.node(leaf);
                        if node.call_count >= 2 && self.tree.is_tuning_candidate(leaf, spec.threshold_ms) {
                            let seed = Self::tuner_seed(spec, self.index, &rts);
                            let tuner = Tuner::new(&spec.grid, start, rts.clone(), &spec.learner, seed);
                            self.tuners.insert(rts.clone(), tuner);
                        }
                        events.push(TraceEvent::Untuned { iteration, rts, sample });
                    }
                }
            }
            self.iterations_done += 1;
        }
        Ok(events)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProcessResult {
    pub process: usize,
    pub events: Vec<TraceEvent>,
    pub energy_j: f64,
    pub duration_ms: f64,
    /// Last measured state per tuned region.
    pub final_states: BTreeMap<RtsId, ConfigState>,
}

impl ProcessResult {
    fn from_events(process: usize, events: Vec<TraceEvent>) -> Self {
        let energy_j = events.iter().map(|e| e.sample().joules).sum();
        let duration_ms = events.iter().map(|e| e.sample().duration_ms).sum();
        let mut final_states = BTreeMap::new();
        for e in &events {
            if let TraceEvent::Initial { rts, sample, .. } | TraceEvent::Step { rts, sample, .. } = e {
                final_states.insert(rts.clone(), sample.state);
            }
        }
        Self {
            process,
            events,
            energy_j,
            duration_ms,
            final_states,
        }
    }

    pub fn records_for<'a>(&'a self, rts: &'a RtsId) -> impl Iterator<Item = &'a StepRecord> + 'a {
        self.events.iter().filter(move |e| e.rts() == rts).filter_map(TraceEvent::record)
    }

    pub fn records(&self) -> impl Iterator<Item = &StepRecord> {
        self.events.iter().filter_map(TraceEvent::record)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub processes: Vec<ProcessResult>,
    pub tuned_energy_j: f64,
    pub baseline_energy_j: f64,
    pub savings_fraction: f64,
    pub tuned_duration_ms: f64,
    pub baseline_duration_ms: f64,
    pub runtime_overhead_fraction: f64,
    /// Iteration range `[from, to)` this result covers.
    pub iterations: (u64, u64),
}

/// Noiseless (energy, duration) of every region pinned at the default state
/// over iterations `[from, to)`, summed over all processes.
pub fn baseline_over(spec: &ExperimentSpec, from: u64, to: u64) -> Result<(f64, f64), SimError> {
    let default = spec.default_state()?;
    let (mut joules, mut ms) = (0.0, 0.0);
    for it in from..to {
        for ri in 0..spec.regions.len() {
            let energy = spec.region_at(ri, it);
            joules += energy.noiseless_joules(default, &spec.grid, spec.meter.static_offset_w);
            ms += energy.duration_at(default, &spec.grid);
        }
    }
    let p = spec.processes as f64;
    Ok((joules * p, ms * p))
}

pub fn baseline_energy(spec: &ExperimentSpec) -> Result<f64, SimError> {
    Ok(baseline_over(spec, 0, spec.iterations)?.0)
}

pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentResult, SimError> {
    spec.validate()?;
    let sims = (0..spec.processes)
        .map(|p| ProcessSim::fresh(spec, p))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(run_processes(spec, sims)?.0)
}

/// Advances each process by `spec.iterations` and aggregates. Processes run
/// on separate threads; they share nothing, so the result does not depend on
/// scheduling.
pub fn run_processes(
    spec: &ExperimentSpec,
    mut sims: Vec<ProcessSim>,
) -> Result<(ExperimentResult, Vec<ProcessSim>), SimError> {
    let from = sims.first().map_or(0, |s| s.iterations_done);
    if sims.iter().any(|s| s.iterations_done != from) {
        return Err(SimError::Invalid("processes resumed at different iterations".into()));
    }
    let traces: Vec<Result<Vec<TraceEvent>, SimError>> = if sims.len() == 1 {
        vec![sims[0].run(spec, spec.iterations)]
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = sims
                .iter_mut()
                .map(|sim| scope.spawn(move || sim.run(spec, spec.iterations)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("process thread panicked"))
                .collect()
        })
    };
    let mut processes = Vec::with_capacity(sims.len());
    for (sim, trace) in sims.iter().zip(traces) {
        processes.push(ProcessResult::from_events(sim.index, trace?));
    }
    let to = from + spec.iterations;
    let (baseline_energy_j, baseline_duration_ms) = baseline_over(spec, from, to)?;
    let tuned_energy_j: f64 = processes.iter().map(|p| p.energy_j).sum();
    let tuned_duration_ms: f64 = processes.iter().map(|p| p.duration_ms).sum();
    let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else { 1.0 };
    let result = ExperimentResult {
        processes,
        tuned_energy_j,
        baseline_energy_j,
        savings_fraction: 1.0 - ratio(tuned_energy_j, baseline_energy_j),
        tuned_duration_ms,
        baseline_duration_ms,
        runtime_overhead_fraction: ratio(tuned_duration_ms, baseline_duration_ms) - 1.0,
        iterations: (from, to),
    };
    Ok((result, sims))
}

/// Runs a spec that contains a mid-run surface swap. Same as
/// [`run_experiment`], after checking that a phase change is present.
pub fn phase_change_response(spec: &ExperimentSpec) -> Result<ExperimentResult, SimError> {
    if spec.phase_changes.is_empty() {
        return Err(SimError::Invalid("no phase change in spec".into()));
    }
    run_experiment(spec)
}

/// First record whose resulting state lies within `radius` moves of `target`.
pub fn first_hit<'a>(records: impl IntoIterator<Item = &'a StepRecord>, target: ConfigState, radius: usize) -> Option<u64> {
    records
        .into_iter()
        .find(|r| r.state_after.steps_to(target) <= radius)
        .map(|r| r.step)
}

/// Most frequent measured state over the trailing `fraction` of `records`.
/// Ties go to the smallest state.
pub fn modal_state<'a>(records: impl IntoIterator<Item = &'a StepRecord>, fraction: f64) -> Option<ConfigState> {
    let all: Vec<&StepRecord> = records.into_iter().collect();
    let keep = ((all.len() as f64) * fraction).ceil() as usize;
    let mut counts: BTreeMap<ConfigState, usize> = BTreeMap::new();
    for r in &all[all.len() - keep.min(all.len())..] {
        *counts.entry(r.state_after).or_default() += 1;
    }
    let mut best: Option<(ConfigState, usize)> = None;
    for (s, c) in counts {
        if best.is_none_or(|(_, bc)| c > bc) {
            best = Some((s, c));
        }
    }
    best.map(|(s, _)| s)
}
