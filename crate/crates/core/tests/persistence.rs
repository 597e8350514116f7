use std::path::PathBuf;

use proptest::prelude::*;

use freqtune::freqspace::{make_grid, ActionDelta};
use freqtune::persistence::{
    load_snapshot, read_snapshot, restore_process, save_snapshot, PersistError, RestartMode, Snapshot,
};
use freqtune::simulator::{run_processes, ExperimentSpec, ProcessSim};

fn spec() -> ExperimentSpec {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../specs/multi-region.json");
    ExperimentSpec::from_json(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn trained(spec: &ExperimentSpec, iterations: u64) -> ProcessSim {
    let mut s = spec.clone();
    s.iterations = iterations;
    let (_, mut sims) = run_processes(&s, vec![ProcessSim::fresh(&s, 0).unwrap()]).unwrap();
    sims.remove(0)
}

#[test]
fn save_then_load_is_structurally_equal() {
    let spec = spec();
    let sim = trained(&spec, 40);
    let snap = Snapshot::capture(&spec, &sim);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.json");
    save_snapshot(&snap, &path).unwrap();
    assert_eq!(read_snapshot(&path).unwrap(), snap);
    // no temp files left behind
    let names: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names, vec![std::ffi::OsString::from("s.json")]);
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.trim_start().starts_with("{\n  \"version\": 1"));
}

#[test]
fn overwrite_replaces_whole_file() {
    let spec = spec();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.json");
    let a = Snapshot::capture(&spec, &trained(&spec, 30));
    let b = Snapshot::capture(&spec, &trained(&spec, 5));
    save_snapshot(&a, &path).unwrap();
    save_snapshot(&b, &path).unwrap();
    assert_eq!(read_snapshot(&path).unwrap(), b);
}

#[test]
fn mismatched_grid_is_incompatible() {
    let spec = spec();
    let snap = Snapshot::capture(&spec, &trained(&spec, 20));
    let mut other = spec.clone();
    other.grid = make_grid(&[1.2, 1.9, 2.0], &[2.1]).unwrap();
    other.start.uncore_ghz = 2.1;
    other.default.uncore_ghz = 2.1;
    other.regions.truncate(1);
    other.regions[0].energy.surface = freqtune::energymodel::EnergySurface::Table {
        powers_w: vec![vec![10.0]; 3],
    };
    for mode in [RestartMode::Continue, RestartMode::ResetIteration] {
        assert!(matches!(
            restore_process(&other, 0, Some(snap.clone()), mode),
            Err(PersistError::IncompatibleSnapshot(_))
        ));
    }
    // discard never looks at the snapshot
    assert!(restore_process(&other, 0, Some(snap), RestartMode::Discard).is_ok());
}

#[test]
fn corrupt_snapshots_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.json");
    std::fs::write(&path, "not json").unwrap();
    assert!(matches!(read_snapshot(&path), Err(PersistError::CorruptSnapshot(_))));

    let spec = spec();
    let mut v = serde_json::to_value(Snapshot::capture(&spec, &trained(&spec, 10))).unwrap();
    v["version"] = 2.into();
    std::fs::write(&path, v.to_string()).unwrap();
    assert!(matches!(read_snapshot(&path), Err(PersistError::CorruptSnapshot(_))));

    v["version"] = 1.into();
    v["tuners"][0]["rng"] = "garbage".into();
    std::fs::write(&path, v.to_string()).unwrap();
    assert!(matches!(
        load_snapshot(&path, RestartMode::Continue, &spec, 0),
        Err(PersistError::CorruptSnapshot(_))
    ));

    assert!(matches!(
        read_snapshot(&dir.path().join("missing.json")),
        Err(PersistError::Io { .. })
    ));
}

#[test]
fn missing_snapshot_means_first_run() {
    let spec = spec();
    let dir = tempfile::tempdir().unwrap();
    let sim = load_snapshot(&dir.path().join("none.json"), RestartMode::Continue, &spec, 0).unwrap();
    assert!(sim.tuners.is_empty());
    assert_eq!(sim.iterations_done, 0);
}

#[test]
fn reset_iteration_reuses_learned_values() {
    let spec = spec();
    let sim = trained(&spec, 300);
    let snap = Snapshot::capture(&spec, &sim);
    let reset = restore_process(&spec, 0, Some(snap), RestartMode::ResetIteration).unwrap();
    let start = spec.start_state().unwrap();
    for (rts, t) in &reset.tuners {
        let learned = &sim.tuners[rts];
        assert_eq!(t.state.current, start);
        assert_eq!(t.state.step, 0);
        assert!(t.state.prev.is_none() && t.state.prev_energy.is_none());
        // greedy choices at explored states come from the stored table
        for s in learned.table.visited_states() {
            assert_eq!(t.table.greedy_action(s), learned.table.greedy_action(s));
            assert_eq!(t.table.last_energy(s), learned.table.last_energy(s));
        }
    }
    let ltimes = reset
        .tuners
        .keys()
        .find(|k| k.to_string().ends_with("ltimes"))
        .unwrap();
    // the learned table no longer prefers staying put at the start
    assert_ne!(reset.tuners[ltimes].table.greedy_action(start), ActionDelta::STAY);
    assert!(reset.tuners[ltimes].table.visited_states().count() > 3);
}

#[test]
fn discard_matches_never_saved_run() {
    let mut spec = spec();
    spec.iterations = 30;
    let snap = Snapshot::capture(&spec, &trained(&spec, 200));
    let discarded = restore_process(&spec, 0, Some(snap), RestartMode::Discard).unwrap();
    let (a, _) = run_processes(&spec, vec![discarded]).unwrap();
    let (b, _) = run_processes(&spec, vec![ProcessSim::fresh(&spec, 0).unwrap()]).unwrap();
    assert_eq!(a.processes[0].events, b.processes[0].events);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn snapshots_round_trip(seed in any::<u64>(), iterations in 0u64..60, process in 0usize..4) {
        let mut spec = spec();
        spec.seed = seed;
        spec.iterations = iterations;
        let (_, sims) = run_processes(&spec, vec![ProcessSim::fresh(&spec, process).unwrap()]).unwrap();
        let snap = Snapshot::capture(&spec, &sims[0]);
        let json = serde_json::to_string(&snap).unwrap();
        let back: Snapshot = serde_json::from_str(&json).unwrap();
        prop_assert_eq!(&back, &snap);
        let restored = restore_process(&spec, process, Some(back), RestartMode::Continue).unwrap();
        prop_assert_eq!(Snapshot::capture(&spec, &restored), snap);
    }
}
