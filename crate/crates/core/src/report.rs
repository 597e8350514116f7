//! CSV and JSON outputs for experiment results.

use std::collections::BTreeMap;
use std::io;

use serde::{Deserialize, Serialize};

use crate::calltree::RtsId;
use crate::energymodel::optimum_state;
use crate::freqspace::{ConfigState, FrequencyGrid};
use crate::simulator::{modal_state, ExperimentResult, ExperimentSpec, FreqPoint, ProcessSim, SimError, TraceEvent};

/// Fraction of trailing steps used to pick the settled state.
pub const SETTLED_FRACTION: f64 = 0.2;

/// One row of `trajectory.csv`. Untuned invocations leave `step` empty; the
/// first measurement of a tuner has step 0 and no reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub step: Option<u64>,
    pub process: usize,
    pub rts: String,
    pub core_ghz: f64,
    pub uncore_ghz: f64,
    pub energy_j: f64,
    pub reward: Option<f64>,
    pub q_after: Option<f64>,
    pub explored: bool,
}

pub fn trajectory_rows(result: &ExperimentResult, grid: &FrequencyGrid) -> Vec<TrajectoryRow> {
    let mut rows = Vec::new();
    for p in &result.processes {
        for e in &p.events {
            let s = e.sample();
            let (step, reward, q_after, explored) = match e {
                TraceEvent::Untuned { .. } => (None, None, None, false),
                TraceEvent::Initial { .. } => (Some(0), None, None, false),
                TraceEvent::Step { record, .. } => {
                    (Some(record.step), Some(record.reward), Some(record.q_after), record.explored)
                }
            };
            rows.push(TrajectoryRow {
                step,
                process: p.process,
                rts: e.rts().to_string(),
                core_ghz: grid.core_ghz(s.state),
                uncore_ghz: grid.uncore_ghz(s.state),
                energy_j: s.joules,
                reward,
                q_after,
                explored,
            });
        }
    }
    rows
}

fn write_rows<W: io::Write, T: Serialize>(out: W, rows: &[T]) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(io::Error::other)?;
    }
    w.flush()
}

pub fn write_trajectory<W: io::Write>(out: W, result: &ExperimentResult, grid: &FrequencyGrid) -> io::Result<()> {
    write_rows(out, &trajectory_rows(result, grid))
}

pub fn trajectory_csv(result: &ExperimentResult, grid: &FrequencyGrid) -> String {
    let mut buf = Vec::new();
    write_trajectory(&mut buf, result, grid).expect("writing to memory");
    String::from_utf8(buf).expect("csv is utf-8")
}

pub fn read_trajectory<R: io::Read>(input: R) -> Result<Vec<TrajectoryRow>, csv::Error> {
    csv::Reader::from_reader(input).deserialize().collect()
}

/// Per grid cell visit count and last energy, for each tuned region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapRow {
    pub process: usize,
    pub rts: String,
    pub core_ghz: f64,
    pub uncore_ghz: f64,
    pub visits: u64,
    pub last_energy_j: Option<f64>,
}

pub fn heatmap_rows(result: &ExperimentResult, sims: &[ProcessSim], grid: &FrequencyGrid) -> Vec<HeatmapRow> {
    let mut rows = Vec::new();
    for (p, sim) in result.processes.iter().zip(sims) {
        let mut visits: BTreeMap<(&RtsId, ConfigState), u64> = BTreeMap::new();
        for e in &p.events {
            if !matches!(e, TraceEvent::Untuned { .. }) {
                *visits.entry((e.rts(), e.sample().state)).or_default() += 1;
            }
        }
        for (rts, tuner) in &sim.tuners {
            for s in grid.states() {
                rows.push(HeatmapRow {
                    process: p.process,
                    rts: rts.to_string(),
                    core_ghz: grid.core_ghz(s),
                    uncore_ghz: grid.uncore_ghz(s),
                    visits: visits.get(&(rts, s)).copied().unwrap_or(0),
                    last_energy_j: tuner.table.last_energy(s),
                });
            }
        }
    }
    rows
}

pub fn heatmap_csv(result: &ExperimentResult, sims: &[ProcessSim], grid: &FrequencyGrid) -> String {
    let mut buf = Vec::new();
    write_rows(&mut buf, &heatmap_rows(result, sims, grid)).expect("writing to memory");
    String::from_utf8(buf).expect("csv is utf-8")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunerSummary {
    pub process: usize,
    pub rts: String,
    pub steps: u64,
    /// Last measured configuration.
    pub last_state: FreqPoint,
    /// Most visited configuration over the trailing fifth of the steps.
    pub final_state: Option<FreqPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub savings_fraction: f64,
    pub tuned_energy_j: f64,
    pub baseline_energy_j: f64,
    pub runtime_overhead_fraction: f64,
    pub tuned_duration_ms: f64,
    pub baseline_duration_ms: f64,
    pub processes: usize,
    pub first_iteration: u64,
    pub iterations: u64,
    pub seed: u64,
    pub tuners: Vec<TunerSummary>,
}

pub fn summarize(spec: &ExperimentSpec, result: &ExperimentResult) -> Summary {
    let mut tuners = Vec::new();
    for p in &result.processes {
        for (rts, last) in &p.final_states {
            let records: Vec<_> = p.records_for(rts).collect();
            tuners.push(TunerSummary {
                process: p.process,
                rts: rts.to_string(),
                steps: records.last().map_or(0, |r| r.step),
                last_state: FreqPoint::of(&spec.grid, *last),
                final_state: modal_state(records, SETTLED_FRACTION).map(|s| FreqPoint::of(&spec.grid, s)),
            });
        }
    }
    Summary {
        savings_fraction: result.savings_fraction,
        tuned_energy_j: result.tuned_energy_j,
        baseline_energy_j: result.baseline_energy_j,
        runtime_overhead_fraction: result.runtime_overhead_fraction,
        tuned_duration_ms: result.tuned_duration_ms,
        baseline_duration_ms: result.baseline_duration_ms,
        processes: result.processes.len(),
        first_iteration: result.iterations.0,
        iterations: result.iterations.1 - result.iterations.0,
        seed: spec.seed,
        tuners,
    }
}

/// Ground truth for one region: where the energy minimum is and how much a
/// perfect tuner could save against the default configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRow {
    pub rts: String,
    pub optimum: FreqPoint,
    pub optimum_energy_j: f64,
    pub default_energy_j: f64,
    pub savings_bound: f64,
}

pub fn oracle_rows(spec: &ExperimentSpec) -> Result<Vec<OracleRow>, SimError> {
    let default = spec.default_state()?;
    let offset = spec.meter.static_offset_w;
    Ok(spec
        .regions
        .iter()
        .map(|r| {
            let (opt, opt_j) = optimum_state(&r.energy, &spec.grid, offset);
            let default_j = r.energy.noiseless_joules(default, &spec.grid, offset);
            OracleRow {
                rts: r.rts().to_string(),
                optimum: FreqPoint::of(&spec.grid, opt),
                optimum_energy_j: opt_j,
                default_energy_j: default_j,
                savings_bound: 1.0 - opt_j / default_j,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub savings: f64,
    pub steps_to_convergence: Option<f64>,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut buf = Vec::new();
    write_rows(&mut buf, rows).expect("writing to memory");
    String::from_utf8(buf).expect("csv is utf-8")
}
