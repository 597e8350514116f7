//! Acceptance suite. Each test prints one `[PASS]`/`[FAIL]` line; run with
//! `cargo test -p freqtune --test acceptance -- --nocapture` to see them.

use std::collections::BTreeSet;
use std::path::PathBuf;

use rand::Rng;

use freqtune::calltree::{CallTree, DEFAULT_THRESHOLD_MS};
use freqtune::energymodel::optimum_state;
use freqtune::freqspace::{ActionDelta, ConfigState, FrequencyGrid};
use freqtune::learner::{compute_reward, init_qtable, select_action, LearnerConfig};
use freqtune::persistence::{load_snapshot, process_path, save_snapshot, RestartMode, Snapshot};
use freqtune::report::trajectory_csv;
use freqtune::rng::rng_from_seed;
use freqtune::simulator::{
    first_hit, modal_state, run_experiment, run_processes, ExperimentResult, ExperimentSpec, ProcessSim,
};

const SEEDS: u64 = 100;

fn spec_file(name: &str) -> ExperimentSpec {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../specs").join(name);
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    ExperimentSpec::from_json(&text).unwrap()
}

fn report(id: u32, pass: bool, detail: String) {
    println!("criterion {id} [{}]: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {id} failed: {detail}");
}

#[test]
fn criterion_1_convergence_within_50_steps() {
    let base = spec_file("convergence.json");
    let grid = &base.grid;
    assert_eq!((grid.core_count(), grid.uncore_count()), (14, 19));
    assert_eq!(base.learner, LearnerConfig::default());
    assert_eq!(base.meter.noise_sigma_rel, 0.005);
    let (opt, _) = optimum_state(&base.regions[0].energy, grid, base.meter.static_offset_w);
    assert_eq!((grid.core_ghz(opt), grid.uncore_ghz(opt)), (1.2, 2.1));
    assert_eq!(base.start_state().unwrap(), grid.state_for(1.9, 2.1).unwrap());

    let rts = base.regions[0].rts();
    let mut ok = 0;
    for seed in 0..SEEDS {
        let mut spec = base.clone();
        spec.seed = seed;
        spec.iterations = 60;
        let res = run_experiment(&spec).unwrap();
        if first_hit(res.processes[0].records_for(&rts), opt, 1).is_some_and(|s| s <= 50) {
            ok += 1;
        }
    }
    report(1, ok >= 90, format!("{ok}/{SEEDS} seeds within one step of the optimum by step 50 (need 90)"));
}

#[test]
fn criterion_2_savings_including_exploration() {
    let base = spec_file("savings.json");
    let offset = base.meter.static_offset_w;
    let region = &base.regions[0].energy;
    let default_j = region.noiseless_joules(base.default_state().unwrap(), &base.grid, offset);
    let (_, opt_j) = optimum_state(region, &base.grid, offset);
    assert!(default_j >= 1.25 * opt_j, "surface gap {default_j} vs {opt_j}");
    assert_eq!(base.iterations, 500);
    assert_eq!(base.processes, 1);

    let mut ok = 0;
    let mut worst = f64::INFINITY;
    for seed in 0..SEEDS {
        let mut spec = base.clone();
        spec.seed = seed;
        let res = run_experiment(&spec).unwrap();
        worst = worst.min(res.savings_fraction);
        if res.savings_fraction >= 0.10 {
            ok += 1;
        }
    }
    report(
        2,
        ok >= 90,
        format!("{ok}/{SEEDS} seeds saved >= 10% (worst {:.2}%, need 90)", 100.0 * worst),
    );
}

#[test]
fn criterion_3_update_matches_direct_evaluation() {
    let grid = FrequencyGrid::default_grid();
    let mut rng = rng_from_seed(3);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let s = ConfigState::new(rng.gen_range(0..grid.core_count()), rng.gen_range(0..grid.uncore_count()));
        let valid = grid.valid_actions(s);
        let a = valid[rng.gen_range(0..valid.len())];
        let next = grid.apply_action(s, a).unwrap();
        let cfg = LearnerConfig {
            alpha: rng.gen_range(0.0..=1.0),
            gamma: rng.gen_range(0.0..1.0),
            ..LearnerConfig::default()
        };
        let mut table = init_qtable(&grid, s, &cfg);
        let q0: f64 = rng.gen_range(-2.0..2.0);
        table.set(s, a, q0).unwrap();
        for b in grid.valid_actions(next) {
            if (next, b) != (s, a) {
                table.set(next, b, rng.gen_range(-2.0..2.0)).unwrap();
            }
        }
        let r: f64 = rng.gen_range(-2.0..2.0);
        let max_next = grid
            .valid_actions(next)
            .into_iter()
            .map(|b| table.get(next, b).unwrap())
            .fold(f64::NEG_INFINITY, f64::max);
        let direct = q0 + cfg.alpha * (r + cfg.gamma * max_next - q0);
        let got = table.update(s, a, r, next, &cfg).unwrap();
        worst = worst.max((got - direct).abs());
    }
    report(3, worst <= 1e-12, format!("max |update - direct| = {worst:e} over 1000 tuples (tol 1e-12)"));
}

#[test]
fn criterion_4_reward_properties() {
    let mut rng = rng_from_seed(4);
    let mut ok = true;
    let mut worst_anti: f64 = 0.0;
    for _ in 0..1000 {
        let a: f64 = rng.gen_range(1e-3..1e4);
        let b: f64 = rng.gen_range(1e-3..1e4);
        let r = compute_reward(a, b).unwrap();
        worst_anti = worst_anti.max((r + compute_reward(b, a).unwrap()).abs());
        ok &= r > -2.0 && r < 2.0;
        ok &= compute_reward(a, a).unwrap().abs() <= 1e-12;
        ok &= (r.abs() <= 1e-12) == (a == b);
    }
    ok &= worst_anti <= 1e-12;
    report(
        4,
        ok,
        format!("antisymmetry err {worst_anti:e}, zero at equality, bounds (-2, 2) on 1000 pairs"),
    );
}

#[test]
fn criterion_5_initialization() {
    let grid = FrequencyGrid::default_grid();
    let start = grid.state_for(1.9, 2.1).unwrap();
    let cfg = LearnerConfig {
        epsilon: 0.0,
        ..LearnerConfig::default()
    };
    let table = init_qtable(&grid, start, &cfg);
    let mut ok = true;
    for s in grid.states() {
        for (a, q) in table.row(s) {
            let expected = if s == start && a.is_stay() { -0.1 } else { 0.0 };
            ok &= q == expected;
        }
    }
    let (first, _) = select_action(&table, start, &cfg, &mut rng_from_seed(0));
    ok &= first != ActionDelta::STAY;
    report(5, ok, format!("Q(start, stay) = -0.1, all else 0; first greedy action {first}"));
}

struct Fixture {
    name: &'static str,
    tree: CallTree,
    expected: &'static [&'static str],
}

fn region(t: &mut CallTree, name: &str, from: f64, to: f64) {
    t.enter_region(name, from).unwrap();
    t.exit_region(name, to).unwrap();
}

fn fixtures() -> Vec<Fixture> {
    let mut out = Vec::new();

    let mut t = CallTree::new();
    t.enter_region("main", 0.0).unwrap();
    region(&mut t, "a", 0.0, 150.0);
    t.exit_region("main", 150.0).unwrap();
    out.push(Fixture {
        name: "leaf above threshold",
        tree: t,
        expected: &["main/a"],
    });

    let mut t = CallTree::new();
    t.enter_region("main", 0.0).unwrap();
    region(&mut t, "a", 0.0, 50.0);
    t.exit_region("main", 50.0).unwrap();
    out.push(Fixture {
        name: "leaf below threshold",
        tree: t,
        expected: &[],
    });

    let mut t = CallTree::new();
    t.enter_region("main", 0.0).unwrap();
    region(&mut t, "a", 0.0, 100.0);
    t.exit_region("main", 100.0).unwrap();
    out.push(Fixture {
        name: "leaf exactly at threshold",
        tree: t,
        expected: &[],
    });

    let mut t = CallTree::new();
    t.enter_region("main", 0.0).unwrap();
    t.enter_region("solve", 0.0).unwrap();
    region(&mut t, "x", 0.0, 45.0);
    region(&mut t, "y", 45.0, 90.0);
    region(&mut t, "z", 90.0, 290.0);
    t.exit_region("solve", 500.0).unwrap();
    t.exit_region("main", 500.0).unwrap();
    out.push(Fixture {
        name: "internal, short 90 ms < long 200 ms",
        tree: t,
        expected: &["main/solve/z"],
    });

    let mut t = CallTree::new();
    t.enter_region("main", 0.0).unwrap();
    t.enter_region("solve", 0.0).unwrap();
    region(&mut t, "x", 0.0, 75.0);
    region(&mut t, "y", 75.0, 150.0);
    region(&mut t, "z", 150.0, 270.0);
    t.exit_region("solve", 500.0).unwrap();
    t.exit_region("main", 500.0).unwrap();
    out.push(Fixture {
        name: "internal, short 150 ms > long 120 ms",
        tree: t,
        expected: &["main/solve", "main/solve/z"],
    });

    let mut t = CallTree::new();
    t.enter_region("main", 0.0).unwrap();
    t.set_parameter("phase", "a").unwrap();
    region(&mut t, "kernel", 0.0, 150.0);
    t.set_parameter("phase", "b").unwrap();
    region(&mut t, "kernel", 150.0, 210.0);
    t.exit_region("main", 210.0).unwrap();
    out.push(Fixture {
        name: "parameter-split contexts",
        tree: t,
        expected: &["main/phase=a/kernel"],
    });

    let mut t = CallTree::new();
    t.enter_region("main", 0.0).unwrap();
    region(&mut t, "a", 0.0, 80.0);
    region(&mut t, "a", 80.0, 200.0);
    region(&mut t, "a", 200.0, 330.0);
    t.exit_region("main", 330.0).unwrap();
    out.push(Fixture {
        name: "mean over repeated calls (80, 120, 130 ms)",
        tree: t,
        expected: &["main/a"],
    });

    let mut t = CallTree::new();
    t.enter_region("main", 0.0).unwrap();
    let mut now = 0.0;
    for _ in 0..10 {
        region(&mut t, "a", now, now + 40.0);
        now += 40.0;
    }
    region(&mut t, "b", now, now + 150.0);
    t.exit_region("main", 1000.0).unwrap();
    out.push(Fixture {
        name: "root dominated by short children",
        tree: t,
        expected: &["main", "main/b"],
    });

    let mut t = CallTree::new();
    t.enter_region("main", 0.0).unwrap();
    t.enter_region("solve", 0.0).unwrap();
    t.set_parameter("iter", "1").unwrap();
    region(&mut t, "kernel", 0.0, 200.0);
    t.set_parameter("iter", "2").unwrap();
    region(&mut t, "kernel", 200.0, 400.0);
    t.exit_region("solve", 400.0).unwrap();
    t.exit_region("main", 400.0).unwrap();
    out.push(Fixture {
        name: "nested parameter values",
        tree: t,
        expected: &["main/solve/iter=1/kernel", "main/solve/iter=2/kernel"],
    });

    out
}

#[test]
fn criterion_6_rts_candidate_rules() {
    let mut failures = Vec::new();
    let all = fixtures();
    for f in &all {
        let got: BTreeSet<String> = f
            .tree
            .candidates(DEFAULT_THRESHOLD_MS)
            .iter()
            .map(ToString::to_string)
            .collect();
        let want: BTreeSet<String> = f.expected.iter().map(|s| s.to_string()).collect();
        if got != want {
            failures.push(format!("{}: got {got:?}, want {want:?}", f.name));
        }
    }
    report(
        6,
        all.len() >= 8 && failures.is_empty(),
        format!("{} fixtures, {} mismatches {failures:?}", all.len(), failures.len()),
    );
}

fn since(result: &ExperimentResult, from: u64) -> ExperimentResult {
    let mut out = result.clone();
    for p in &mut out.processes {
        p.events.retain(|e| e.iteration() >= from);
    }
    out
}

#[test]
fn criterion_7_restart_modes() {
    let dir = tempfile::tempdir().unwrap();
    let base_path = dir.path().join("snap.json");
    let mut spec = spec_file("multi-region.json");
    spec.processes = 2;
    spec.iterations = 400;
    let straight = run_experiment(&spec).unwrap();

    // Continue: split at 250
    let mut first = spec.clone();
    first.iterations = 250;
    let sims = (0..2).map(|p| ProcessSim::fresh(&first, p).unwrap()).collect();
    let (_, sims) = run_processes(&first, sims).unwrap();
    for sim in &sims {
        save_snapshot(&Snapshot::capture(&first, sim), &process_path(&base_path, sim.index)).unwrap();
    }
    let mut second = spec.clone();
    second.iterations = 150;
    let resumed: Vec<_> = (0..2)
        .map(|p| load_snapshot(&process_path(&base_path, p), RestartMode::Continue, &second, p).unwrap())
        .collect();
    let (tail, _) = run_processes(&second, resumed).unwrap();
    let continue_ok = trajectory_csv(&tail, &spec.grid) == trajectory_csv(&since(&straight, 250), &spec.grid);

    // ResetIteration: tables kept bit-for-bit, position and step reset
    let start = spec.start_state().unwrap();
    let reset: Vec<_> = (0..2)
        .map(|p| load_snapshot(&process_path(&base_path, p), RestartMode::ResetIteration, &spec, p).unwrap())
        .collect();
    let mut reset_ok = true;
    for (before, after) in sims.iter().zip(&reset) {
        reset_ok &= before.tuners.len() == after.tuners.len() && !after.tuners.is_empty();
        for (rts, t) in &before.tuners {
            let r = &after.tuners[rts];
            reset_ok &= serde_json::to_string(&r.table).unwrap() == serde_json::to_string(&t.table).unwrap();
            reset_ok &= r.table == t.table;
            reset_ok &= r.state.current == start && r.state.step == 0 && r.state.prev.is_none();
        }
        reset_ok &= after.iterations_done == 0;
    }

    // Discard: identical to a fresh run
    let discarded: Vec<_> = (0..2)
        .map(|p| load_snapshot(&process_path(&base_path, p), RestartMode::Discard, &first, p).unwrap())
        .collect();
    let (fresh_again, _) = run_processes(&first, discarded).unwrap();
    let fresh = run_experiment(&first).unwrap();
    let discard_ok = trajectory_csv(&fresh_again, &spec.grid) == trajectory_csv(&fresh, &spec.grid);

    report(
        7,
        continue_ok && reset_ok && discard_ok,
        format!("continue split==straight: {continue_ok}, reset keeps Q: {reset_ok}, discard==fresh: {discard_ok}"),
    );
}

#[test]
fn criterion_8_phase_adaptation() {
    let base = spec_file("phase-change.json");
    let pc = &base.phase_changes[0];
    let old_opt = optimum_state(&base.region_at(0, 0), &base.grid, base.meter.static_offset_w).0;
    let new_opt = optimum_state(&base.region_at(0, pc.iteration), &base.grid, base.meter.static_offset_w).0;
    assert!(old_opt.steps_to(new_opt) >= 3);
    let tail_from = base.iterations - base.iterations / 5;
    let rts = base.regions[0].rts();

    let mut ok = 0;
    for seed in 0..SEEDS {
        let mut spec = base.clone();
        spec.seed = seed;
        let res = run_experiment(&spec).unwrap();
        let tail: Vec<_> = res.processes[0]
            .events
            .iter()
            .filter(|e| e.iteration() >= tail_from && e.rts() == &rts)
            .filter_map(|e| e.record())
            .collect();
        if modal_state(tail, 1.0).is_some_and(|m| m.steps_to(new_opt) <= 1) {
            ok += 1;
        }
    }
    report(
        8,
        ok >= 80,
        format!(
            "{ok}/{SEEDS} seeds settle within one step of the new optimum (shift {} steps, need 80)",
            old_opt.steps_to(new_opt)
        ),
    );
}

#[test]
fn criterion_9_determinism_and_independence() {
    let mut spec = spec_file("multi-region.json");
    spec.iterations = 120;
    let a = run_experiment(&spec).unwrap();
    let b = run_experiment(&spec).unwrap();
    let identical = trajectory_csv(&a, &spec.grid) == trajectory_csv(&b, &spec.grid);

    let order = [3usize, 1, 0, 2];
    let sims = order.iter().map(|p| ProcessSim::fresh(&spec, *p).unwrap()).collect();
    let (permuted, _) = run_processes(&spec, sims).unwrap();
    let mut independent = permuted.processes.len() == order.len();
    for p in &permuted.processes {
        let orig = a.processes.iter().find(|q| q.process == p.process).unwrap();
        independent &= orig.events == p.events;
    }
    report(
        9,
        identical && independent,
        format!("byte-identical CSVs: {identical}, permutation-invariant processes: {independent}"),
    );
}
