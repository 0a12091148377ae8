mod common;

use common::*;
use macfi::{fixtures, plan_model, reference_forward, ArrayConfig, ModelGraph};

fn oracle_accuracy(g: &ModelGraph, ds: &macfi::Dataset) -> f64 {
    let correct = (0..ds.len())
        .filter(|&i| {
            let (_, logits) = reference_forward(g, &ds.sample(i)).unwrap();
            macfi::classify_argmax(&logits).unwrap() == ds.labels[i] as usize
        })
        .count();
    correct as f64 / ds.len() as f64
}

#[test]
fn infer_prints_one_line_per_sample() {
    let dir = tempfile::tempdir().unwrap();
    let f = Files::desk(dir.path(), 4);
    let out = run("infer", &f.args(), &[]);
    assert!(out.status.success(), "{}", stderr(&out));
    let (preds, acc, ips) = parse_infer(&stdout(&out));
    assert_eq!(preds.len(), 4);
    let want = oracle_accuracy(&fixtures::desk_model(), &fixtures::desk_dataset(4, fixtures::DESK_EVAL_SEED));
    assert_eq!(acc, want);
    assert!(ips > 0.0);
}

#[test]
fn infer_missing_weights_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let f = Files::desk(dir.path(), 4);
    let missing = dir.path().join("no_such_weights.bin");
    let out = macfi(&["infer", "--model", p(&f.model), "--weights", p(&missing), "--dataset", p(&f.dataset)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("no_such_weights.bin"), "{}", stderr(&out));
}

#[test]
fn infer_rejects_malformed_fault_spec_with_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let f = Files::desk(dir.path(), 4);
    let spec = dir.path().join("bad.fspec");
    std::fs::write(&spec, "0,0,zero\n1,2,const,999999\n").unwrap();
    let out = run("infer", &f.args(), &["--faults", p(&spec)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("line 2"), "{}", stderr(&out));
}

#[test]
fn all_zero_fault_spec_gives_bias_only_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let g = fixtures::desk_model();
    let ds = fixtures::desk_dataset(32, fixtures::DESK_EVAL_SEED);
    let f = Files::write(dir.path(), &g, &ds);
    let spec = dir.path().join("all_zero.fspec");
    std::fs::write(&spec, all_zero_spec()).unwrap();
    let out = run("infer", &f.args(), &["--faults", p(&spec)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let (_, acc, _) = parse_infer(&stdout(&out));
    assert_eq!(acc, oracle_accuracy(&fixtures::bias_only_graph(&g), &ds));
}

#[test]
fn heatmap_writes_three_grids_and_two_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let f = Files::desk(&dir.path().join("in"), 8);
    let out_dir = dir.path().join("out");
    let out = run("campaign", &f.args(), &["--mode", "heatmap", "--values", "0,1,-1", "--out", p(&out_dir)]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(files_in(&out_dir), ["heatmap_-1.svg", "heatmap_0.svg", "heatmap_1.svg", "results.csv", "summary.csv"]);
    for v in ["0", "1", "-1"] {
        let svg = std::fs::read_to_string(out_dir.join(format!("heatmap_{v}.svg"))).unwrap();
        let doc = roxmltree::Document::parse(&svg).unwrap();
        assert_eq!(doc.descendants().filter(|n| n.attribute("class") == Some("cell")).count(), 64);
    }
}

#[test]
fn sweep_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let f = Files::desk(&dir.path().join("in"), 8);
    let mut csvs = vec![];
    for run_no in 0..2 {
        let out_dir = dir.path().join(format!("out{run_no}"));
        let out = run(
            "campaign",
            &f.args(),
            &["--mode", "sweep", "--k", "1,2", "--values", "0", "--reps", "2", "--seed", "7", "--out", p(&out_dir)],
        );
        assert!(out.status.success(), "{}", stderr(&out));
        assert_eq!(files_in(&out_dir), ["boxplot.svg", "results.csv", "summary.csv"]);
        csvs.push(std::fs::read(out_dir.join("results.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
}

#[test]
fn too_many_faulty_lanes_is_a_spec_error_and_leaves_nothing_behind() {
    let dir = tempfile::tempdir().unwrap();
    let f = Files::desk(&dir.path().join("in"), 4);
    let out_dir = dir.path().join("out");
    let out = run("campaign", &f.args(), &["--k", "65", "--out", p(&out_dir)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("KTooLarge"), "{}", stderr(&out));
    assert!(!out_dir.exists());
}

#[test]
fn plan_stats_balance_units_when_cout_is_a_multiple_of_eight() {
    let dir = tempfile::tempdir().unwrap();
    let input = macfi::model::InputSpec { c: 8, h: 3, w: 3, scale: 1.0 };
    let weights = macfi::qtensor::Kernel::new(16, 8, 3, (0..16 * 8 * 9).map(|i| (i % 7) as i8 - 3).collect(), 1.0).unwrap();
    let mut b = macfi::model::ModelBuilder::new(input, 16);
    b.conv("conv1", "input", 1, 1, weights, vec![0; 16], 1.0).gavgpool("gap", "conv1");
    let g = b.build("gap").unwrap();
    let f = Files::write(dir.path(), &g, &fixtures::self_labelled_dataset(&g, 1, 0));
    let out = run("plan", &f.model_args(), &[]);
    assert!(out.status.success(), "{}", stderr(&out));
    let ops = parse_unit_ops(&stdout(&out));
    assert_eq!(ops.len(), 8);
    // 16 channels x 3x3 outputs x 9 taps x one channel group, over 8 units.
    assert!(ops.iter().all(|&n| n == 16 * 9 * 9 / 8), "{ops:?}");
}

#[test]
fn plan_stats_show_idle_upper_lanes_for_four_channel_model() {
    let dir = tempfile::tempdir().unwrap();
    let g = fixtures::half_width_model();
    let f = Files::write(dir.path(), &g, &fixtures::self_labelled_dataset(&g, 1, 0));
    let out = run("plan", &f.model_args(), &[]);
    assert!(out.status.success());
    let act = parse_lane_activity(&stdout(&out));
    assert_eq!(act.len(), 8);
    assert!(act[0][..4].iter().all(|&n| n > 0));
    let stats = macfi::planner::plan_stats(&plan_model(&g, &ArrayConfig::default()).unwrap());
    for (u, row) in act.iter().enumerate() {
        for (l, &n) in row.iter().enumerate() {
            assert_eq!(n, stats.activity(&ArrayConfig::default(), u, l));
            if l >= 4 {
                assert_eq!(n, 0, "unit {u} lane {l}");
            }
        }
    }
}

#[test]
fn plan_rejects_invalid_model() {
    let dir = tempfile::tempdir().unwrap();
    let f = Files::desk(dir.path(), 1);
    let json = std::fs::read_to_string(&f.model).unwrap().replacen("\"relu1\"", "\"ghost\"", 1);
    std::fs::write(&f.model, json).unwrap();
    let out = run("plan", &f.model_args(), &[]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn fixture_command_writes_loadable_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = macfi(&["fixture", "--kind", "half-width", "--samples", "5", "--out", p(dir.path())]);
    assert!(out.status.success());
    let g = macfi::load_model(&dir.path().join("model.json"), &dir.path().join("weights.bin")).unwrap();
    assert_eq!(g, fixtures::half_width_model());
    assert_eq!(macfi::Dataset::load(&dir.path().join("dataset.qds")).unwrap().len(), 5);
}
