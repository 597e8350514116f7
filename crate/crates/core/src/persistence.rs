//! Tuner snapshots and the three restart policies.
//!
//! A snapshot holds one process's tables, tuner bookkeeping and random
//! streams as versioned JSON, so a later run can either ignore it, pick up
//! exactly where it stopped, or start over from the initial configuration
//! while keeping what was learned.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calltree::CallTree;
use crate::freqspace::{ConfigState, FrequencyGrid};
use crate::learner::{LearnerConfig, QTable, Tuner, TunerState};
use crate::rng::{decode_rng, encode_rng, rng_from_seed};
use crate::energymodel::Meter;
use crate::simulator::{ExperimentSpec, ProcessSim, SimError};

pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("snapshot i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("snapshot does not match the experiment: {0}")]
    IncompatibleSnapshot(String),
    #[error("corrupt snapshot: {0}")]
    CorruptSnapshot(String),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RestartMode {
    /// Ignore any stored state.
    #[default]
    Discard,
    /// Resume the interrupted run exactly.
    Continue,
    /// Keep learned values, restart from the initial configuration.
    #[serde(rename = "reset")]
    ResetIteration,
}

impl std::str::FromStr for RestartMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "discard" => Ok(Self::Discard),
            "continue" => Ok(Self::Continue),
            "reset" => Ok(Self::ResetIteration),
            other => Err(format!("unknown restart mode {other:?} (expected discard, continue or reset)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotMeta {
    pub created_by: String,
    pub process: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunerSnapshot {
    pub table: QTable,
    pub state: TunerState,
    pub rng: String,
}

/// Process-level simulation state needed for exact resumption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessSnapshot {
    pub iterations_done: u64,
    pub clock_ms: f64,
    pub hardware: ConfigState,
    pub meter_rng: String,
    pub tree: CallTree,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub version: u32,
    pub grid: FrequencyGrid,
    pub learner: LearnerConfig,
    pub meta: SnapshotMeta,
    pub tuners: Vec<TunerSnapshot>,
    pub process: ProcessSnapshot,
}

impl Snapshot {
    pub fn capture(spec: &ExperimentSpec, sim: &ProcessSim) -> Self {
        Self {
            version: SNAPSHOT_VERSION,
            grid: spec.grid.clone(),
            learner: spec.learner,
            meta: SnapshotMeta {
                created_by: concat!("freqtune ", env!("CARGO_PKG_VERSION")).to_string(),
                process: sim.index,
                seed: spec.seed,
            },
            tuners: sim
                .tuners
                .values()
                .map(|t| TunerSnapshot {
                    table: t.table.clone(),
                    state: t.state.clone(),
                    rng: encode_rng(&t.rng),
                })
                .collect(),
            process: ProcessSnapshot {
                iterations_done: sim.iterations_done,
                clock_ms: sim.clock_ms,
                hardware: sim.hardware,
                meter_rng: encode_rng(sim.meter.rng()),
                tree: sim.tree.clone(),
            },
        }
    }

    fn check_compatible(&self, spec: &ExperimentSpec) -> Result<(), PersistError> {
        if self.grid != spec.grid {
            return Err(PersistError::IncompatibleSnapshot("frequency grid differs".into()));
        }
        if self.learner != spec.learner {
            return Err(PersistError::IncompatibleSnapshot("learner configuration differs".into()));
        }
        for t in &self.tuners {
            if t.table.grid() != &spec.grid {
                return Err(PersistError::IncompatibleSnapshot(format!("table for {} uses another grid", t.state.rts)));
            }
        }
        Ok(())
    }
}

/// `snap.json` → `snap-p3.json`.
pub fn process_path(base: &Path, index: usize) -> PathBuf {
    let stem = base.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match base.extension() {
        Some(ext) => format!("{stem}-p{index}.{}", ext.to_string_lossy()),
        None => format!("{stem}-p{index}"),
    };
    base.with_file_name(name)
}

/// Writes the snapshot to a temporary file next to `path` and renames it
/// into place.
pub fn save_snapshot(snapshot: &Snapshot, path: &Path) -> Result<(), PersistError> {
    let io = |source| PersistError::Io {
        path: path.to_path_buf(),
        source,
    };
    let json = serde_json::to_vec_pretty(snapshot).expect("snapshot serializes");
    let tmp = path.with_file_name(format!(
        ".{}.tmp{}",
        path.file_name().map(|s| s.to_string_lossy()).unwrap_or_default(),
        std::process::id()
    ));
    let mut file = fs::File::create(&tmp).map_err(io)?;
    file.write_all(&json).and_then(|_| file.sync_all()).map_err(io)?;
    drop(file);
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        io(e)
    })
}

pub fn read_snapshot(path: &Path) -> Result<Snapshot, PersistError> {
    let bytes = fs::read(path).map_err(|source| PersistError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let value: serde_json::Value =
        serde_json::from_slice(&bytes).map_err(|e| PersistError::CorruptSnapshot(e.to_string()))?;
    match value.get("version").and_then(serde_json::Value::as_u64) {
        Some(v) if v == u64::from(SNAPSHOT_VERSION) => {}
        Some(v) => return Err(PersistError::CorruptSnapshot(format!("unsupported version {v}"))),
        None => return Err(PersistError::CorruptSnapshot("missing version".into())),
    }
    serde_json::from_value(value).map_err(|e| PersistError::CorruptSnapshot(e.to_string()))
}

/// Builds process `index` according to `mode`. `snapshot` is ignored for
/// [`RestartMode::Discard`]; for the other modes a missing snapshot means a
/// first run.
pub fn restore_process(
    spec: &ExperimentSpec,
    index: usize,
    snapshot: Option<Snapshot>,
    mode: RestartMode,
) -> Result<ProcessSim, PersistError> {
    let fresh = ProcessSim::fresh(spec, index)?;
    let snap = match (mode, snapshot) {
        (RestartMode::Discard, _) | (_, None) => return Ok(fresh),
        (_, Some(s)) => s,
    };
    snap.check_compatible(spec)?;
    let corrupt = |e: crate::rng::TokenError| PersistError::CorruptSnapshot(e.to_string());
    match mode {
        RestartMode::Discard => unreachable!(),
        RestartMode::Continue => {
            let mut sim = fresh;
            for t in snap.tuners {
                if !t.state.is_consistent() || !spec.grid.contains(t.state.current) {
                    return Err(PersistError::CorruptSnapshot(format!("tuner state for {}", t.state.rts)));
                }
                let rts = t.state.rts.clone();
                let tuner = Tuner {
                    table: t.table,
                    state: t.state,
                    rng: decode_rng(&t.rng).map_err(corrupt)?,
                };
                sim.tuners.insert(rts, tuner);
            }
            let p = snap.process;
            if !spec.grid.contains(p.hardware) {
                return Err(PersistError::CorruptSnapshot("hardware state outside grid".into()));
            }
            sim.meter = Meter::with_rng(spec.meter, decode_rng(&p.meter_rng).map_err(corrupt)?);
            sim.tree = p.tree;
            sim.hardware = p.hardware;
            sim.clock_ms = p.clock_ms;
            sim.iterations_done = p.iterations_done;
            Ok(sim)
        }
        RestartMode::ResetIteration => {
            let mut sim = fresh;
            let start = spec.start_state().map_err(SimError::from)?;
            for t in snap.tuners {
                let rts = t.state.rts.clone();
                let seed = ProcessSim::tuner_seed(spec, index, &rts);
                let tuner = Tuner {
                    table: t.table,
                    state: TunerState::new(rts.clone(), start),
                    rng: rng_from_seed(seed),
                };
                sim.tuners.insert(rts, tuner);
            }
            Ok(sim)
        }
    }
}

/// Loads `path` (if present) and restores process `index` under `mode`.
pub fn load_snapshot(
    path: &Path,
    mode: RestartMode,
    spec: &ExperimentSpec,
    index: usize,
) -> Result<ProcessSim, PersistError> {
    let snapshot = match mode {
        RestartMode::Discard => None,
        _ if !path.exists() => None,
        _ => Some(read_snapshot(path)?),
    };
    restore_process(spec, index, snapshot, mode)
}
