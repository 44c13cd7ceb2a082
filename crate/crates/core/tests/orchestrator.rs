mod common;

use std::path::Path;

use catprune::eval::zero_mask;
use catprune::orchestrator::{
    resume, run, IterationConfig, IterationTrace, Recovery, RunOptions, StopReason, StopRules, TRACE_FILE,
};
use catprune::prune::PruningPlan;
use catprune::sensitivity::{default_exclusions, SelectionConfig};
use catprune::synth::{random_network, SynthOptions};
use catprune::{load_model, zoo, Error, NetworkIR};

fn quick_config() -> IterationConfig {
    IterationConfig {
        max_iterations: 4,
        selection: SelectionConfig {
            rate_grid: vec![0.25, 0.5],
            threshold: 1e-4,
            ..Default::default()
        },
        recovery: Recovery::None,
        ..Default::default()
    }
}

fn net() -> NetworkIR {
    random_network(
        21,
        &SynthOptions {
            max_channels: 12,
            ..Default::default()
        },
    )
}

/// Every file in a run directory, by name.
fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn threshold_above_every_v_stops_immediately() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = quick_config();
    config.selection.threshold = 10.0;
    let trace = run(&net(), &config, dir.path(), RunOptions::default()).unwrap();
    assert!(trace.iterations.is_empty());
    assert_eq!(trace.stop_reason, Some(StopReason::EmptySelection));
    assert_eq!(IterationTrace::load(dir.path()).unwrap(), trace);
    assert_eq!(trace.latest_model(), "base.json");
}

#[test]
fn max_iterations_caps_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let config = IterationConfig {
        max_iterations: 3,
        ..quick_config()
    };
    let trace = run(&net(), &config, dir.path(), RunOptions::default()).unwrap();
    assert_eq!(trace.iterations.len(), 3);
    assert_eq!(trace.stop_reason, Some(StopReason::MaxIterations));
}

#[test]
fn resumed_run_is_byte_identical() {
    let ir = net();
    let config = quick_config();
    let full = tempfile::tempdir().unwrap();
    let whole = run(&ir, &config, full.path(), RunOptions::default()).unwrap();
    assert!(whole.iterations.len() >= 3, "{} iterations", whole.iterations.len());

    let split = tempfile::tempdir().unwrap();
    let halted = run(&ir, &config, split.path(), RunOptions { halt_after: Some(2) }).unwrap();
    assert_eq!(halted.iterations.len(), 2);
    assert!(!halted.is_finished());
    let resumed = resume(split.path(), &config, RunOptions::default()).unwrap();
    assert_eq!(resumed, whole);
    assert_eq!(snapshot(split.path()), snapshot(full.path()));

    // A finished run resumes to itself without touching anything.
    let before = snapshot(split.path());
    assert_eq!(resume(split.path(), &config, RunOptions::default()).unwrap(), whole);
    assert_eq!(snapshot(split.path()), before);
}

#[test]
fn resume_rejects_a_different_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = quick_config();
    run(&net(), &config, dir.path(), RunOptions { halt_after: Some(1) }).unwrap();
    let other = IterationConfig {
        max_iterations: 5,
        ..config
    };
    assert!(matches!(resume(dir.path(), &other, RunOptions::default()), Err(Error::CorruptTrace(_))));
}

#[test]
fn resume_rejects_a_damaged_trace() {
    let dir = tempfile::tempdir().unwrap();
    let config = quick_config();
    run(&net(), &config, dir.path(), RunOptions { halt_after: Some(1) }).unwrap();
    std::fs::write(dir.path().join(TRACE_FILE), b"{\"format\": 3").unwrap();
    assert!(matches!(resume(dir.path(), &config, RunOptions::default()), Err(Error::CorruptTrace(_))));
}

#[test]
fn runs_are_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let config = quick_config();
    run(&net(), &config, a.path(), RunOptions::default()).unwrap();
    run(&net(), &config, b.path(), RunOptions::default()).unwrap();
    assert_eq!(snapshot(a.path()), snapshot(b.path()));
}

/// Sparsity never drops, each persisted model is its parent with the
/// iteration's filters zeroed, and head convs only ever lose input columns.
#[test]
fn persisted_iterations_are_consistent() {
    let ir = net();
    let dir = tempfile::tempdir().unwrap();
    let trace = run(&ir, &quick_config(), dir.path(), RunOptions::default()).unwrap();
    let heads = default_exclusions(&ir);
    let inputs = common::inputs(&ir, 3, 9);
    let mut parent = load_model(dir.path().join(&trace.base_model)).unwrap();
    assert_eq!(parent, ir);
    let (mut prev_p, mut prev_f) = (0.0, 0.0);
    for rec in &trace.iterations {
        assert!(rec.params_sparsity >= prev_p && rec.flops_sparsity >= prev_f);
        (prev_p, prev_f) = (rec.params_sparsity, rec.flops_sparsity);

        let model = load_model(dir.path().join(&rec.model)).unwrap();
        let plan = PruningPlan::load(dir.path().join(&rec.plan)).unwrap();
        assert_eq!(plan.removed_count(), rec.removed_filters);
        assert!(plan.removals.keys().all(|l| !heads.contains(l)));
        let masked = zero_mask(&parent, &plan.removals).unwrap();
        assert!(common::max_output_diff(&model, &masked, &inputs) <= 1e-5);

        for &h in &heads {
            let (old, new) = (ir.layer(h).unwrap(), model.layer(h).unwrap());
            assert_eq!(new.conv_attrs().unwrap().out_channels, old.conv_attrs().unwrap().out_channels);
            assert_eq!(new.weights.get("bias"), old.weights.get("bias"));
            assert!(columns_are_subsequence(&old.weights["weight"], &new.weights["weight"]));
        }
        parent = model;
    }
}

/// Whether `new`'s kernel columns are a subset of `old`'s, in order.
fn columns_are_subsequence(old: &catprune::TensorBuf, new: &catprune::TensorBuf) -> bool {
    let col = |t: &catprune::TensorBuf, c: usize| -> Vec<f32> {
        let [o, n, kh, kw] = t.shape().try_into().unwrap();
        let area = kh * kw;
        (0..o).flat_map(|f| t.data()[(f * n + c) * area..(f * n + c + 1) * area].to_vec()).collect()
    };
    let (n_old, n_new) = (old.shape()[1], new.shape()[1]);
    let mut j = 0;
    for i in 0..n_old {
        if j < n_new && col(old, i) == col(new, j) {
            j += 1;
        }
    }
    j == n_new
}

#[test]
fn stop_rules_end_the_run() {
    let ir = net();
    let dir = tempfile::tempdir().unwrap();
    let floor = IterationConfig {
        stop_rules: StopRules {
            min_score: 1.0,
            ..Default::default()
        },
        ..quick_config()
    };
    let trace = run(&ir, &floor, dir.path(), RunOptions::default()).unwrap();
    assert_eq!(trace.iterations.len(), 1);
    assert_eq!(trace.stop_reason, Some(StopReason::ScoreBelowFloor));

    let dir = tempfile::tempdir().unwrap();
    let plateau = IterationConfig {
        stop_rules: StopRules {
            min_new_sparsity: 0.99,
            ..Default::default()
        },
        ..quick_config()
    };
    let trace = run(&ir, &plateau, dir.path(), RunOptions::default()).unwrap();
    assert_eq!(trace.iterations.len(), 1);
    assert_eq!(trace.stop_reason, Some(StopReason::SparsityPlateau));
}

#[test]
fn recalibration_recovery_records_both_scores() {
    let ir = zoo::redundant_toy(0);
    let dir = tempfile::tempdir().unwrap();
    let config = IterationConfig {
        max_iterations: 1,
        recovery: Recovery::BnRecalibration,
        ..Default::default()
    };
    let trace = run(&ir, &config, dir.path(), RunOptions::default()).unwrap();
    let rec = &trace.iterations[0];
    // The toy has no batch norms, so recovery is a no-op.
    assert_eq!(rec.score, rec.score_before_recovery);
    assert_eq!(rec.suggested_finetune_epochs, Some(15));
    for f in [&rec.sensitivity_csv, &rec.cost_csv] {
        assert!(dir.path().join(f).exists());
    }
    assert_eq!(IterationConfig::load(dir.path().join("config.json")).unwrap(), config);
}
