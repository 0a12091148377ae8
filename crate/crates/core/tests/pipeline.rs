use macfi::campaign::{self, Slice, SweepSpec};
use macfi::faultctl::{self, FiRegisterFile};
use macfi::model::LayerOp;
use macfi::planner::ProgramBody;
use macfi::qtensor::{requantize, LayerOutputs};
use macfi::*;

/// Faulty conv computed directly from the lane mapping: channel `c` of
/// output `o` runs on unit `o % 8`, lane `c % 8`, and every kernel tap
/// (padding included) occupies its lane for one cycle.
fn faulty_conv_oracle(layer: &macfi::model::ConvLayer, input: &QTensor, stride: usize, faults: &FaultMap) -> Vec<i8> {
    let s = input.shape();
    let k = layer.weights.k;
    let pad = layer.pad;
    let ho = (s.h + 2 * pad - k) / stride + 1;
    let wo = (s.w + 2 * pad - k) / stride + 1;
    let mut out = vec![];
    for o in 0..layer.cout() {
        for y in 0..ho {
            for x in 0..wo {
                let mut acc = layer.bias[o] as i64;
                for c in 0..s.c {
                    for i in 0..k {
                        for j in 0..k {
                            let iy = (y * stride + i) as isize - pad as isize;
                            let ix = (x * stride + j) as isize - pad as isize;
                            let inside = iy >= 0 && ix >= 0 && (iy as usize) < s.h && (ix as usize) < s.w;
                            let a = if inside { input.at(c, iy as usize, ix as usize) as i64 } else { 0 };
                            let product = a * layer.weights.at(o, c, i, j) as i64;
                            acc += match faults.get(o % 8, c % 8) {
                                LaneFault::None => product,
                                LaneFault::StuckZero => 0,
                                LaneFault::Constant(v) => v as i64,
                                LaneFault::Pulse { .. } => unreachable!(),
                            };
                        }
                    }
                }
                let acc = acc.clamp(i32::MIN as i64, i32::MAX as i64) as i32;
                out.push(requantize(acc, layer.m).unwrap());
            }
        }
    }
    out
}

fn layer_inputs<'a>(outs: &'a LayerOutputs, input: &'a QTensor, ids: &[String]) -> Vec<&'a QTensor> {
    ids.iter().map(|id| if id == "input" { input } else { outs.get(id).unwrap() }).collect()
}

#[test]
fn static_faults_match_direct_oracle_on_every_mac_layer() {
    for (gi, g) in [fixtures::desk_model(), fixtures::random_model(3), fixtures::random_model(11)].into_iter().enumerate() {
        let plan = plan_model(&g, &ArrayConfig::default()).unwrap();
        let input = fixtures::random_input(&g.input, gi as u64);
        let (outs, _) = reference_forward(&g, &input).unwrap();
        for seed in 0..6u64 {
            let template = match seed % 3 {
                0 => LaneFault::StuckZero,
                1 => LaneFault::Constant(-1),
                _ => LaneFault::Constant(513),
            };
            let faults = faultctl::sample_random_fault_map(&plan.config, 1 + 7 * seed as usize, template, seed).unwrap();
            for p in &plan.programs {
                let ProgramBody::Mac(_) = &p.body else { continue };
                let spec = g.layer(&p.id).unwrap();
                let (layer, stride) = match &spec.op {
                    LayerOp::Conv(c) => (c, c.stride),
                    LayerOp::Fc(c) => (c, 1),
                    _ => unreachable!(),
                };
                let ins = layer_inputs(&outs, &input, &spec.inputs);
                let got = Emulator::new().run_program(p, &ins, &faults).unwrap();
                assert_eq!(got.data(), faulty_conv_oracle(layer, ins[0], stride, &faults).as_slice(), "layer {}", p.id);
            }
        }
    }
}

#[test]
fn saved_model_round_trips_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let g = fixtures::desk_model();
    let (m, w, d) = (dir.path().join("m.json"), dir.path().join("w.bin"), dir.path().join("d.qds"));
    save_model(&g, &m, &w).unwrap();
    let ds = fixtures::desk_dataset(8, 1);
    ds.save(&d).unwrap();
    let loaded = load_model(&m, &w).unwrap();
    assert_eq!(loaded, g);
    assert_eq!(Dataset::load(&d).unwrap(), ds);
    ds.check_against(&loaded).unwrap();

    let plan = plan_model(&loaded, &ArrayConfig::default()).unwrap();
    let none = FaultMap::new(&plan.config);
    for i in 0..ds.len() {
        let (_, want) = reference_forward(&g, &ds.sample(i)).unwrap();
        assert_eq!(Emulator::new().execute_plan(&plan, &ds.sample(i), &none).unwrap().logits, want);
    }
}

#[test]
fn load_errors_name_the_culprit() {
    let dir = tempfile::tempdir().unwrap();
    let g = fixtures::conv_relu_fc();
    let (m, w) = (dir.path().join("m.json"), dir.path().join("w.bin"));
    save_model(&g, &m, &w).unwrap();

    let missing = dir.path().join("absent.bin");
    let e = load_model(&m, &missing).unwrap_err();
    assert!(e.to_string().contains("absent.bin"), "{e}");

    let blob = std::fs::read(&w).unwrap();
    std::fs::write(&w, &blob[..4]).unwrap();
    assert_eq!(load_model(&m, &w).unwrap_err(), ModelError::MissingBlob("conv1".into()));
}

#[test]
fn register_programmed_faults_equal_spec_file_faults() {
    let cfg = ArrayConfig::default();
    let text = "# a mix of modes\n0,0,zero\n3,7,const,-1\n5,2,pulse,77,100,4000\n7,4,const,131071\n";
    let from_text = faultctl::parse_fault_spec(text, &cfg).unwrap();
    assert_eq!(faultctl::parse_fault_spec(&faultctl::format_fault_spec(&from_text), &cfg).unwrap(), from_text);

    let mut regs = FiRegisterFile::new();
    for (idx, (u, l, f)) in from_text.faulted().enumerate() {
        regs.program(idx, u, l, f).unwrap();
    }
    regs.write_register(faultctl::FI_GLOBAL_ENABLE, 1).unwrap();
    let from_regs = regs.materialize(&cfg);
    assert_eq!(from_regs, from_text);

    let g = fixtures::desk_model();
    let plan = plan_model(&g, &cfg).unwrap();
    let x = fixtures::desk_dataset(1, 9).sample(0);
    let a = Emulator::new().execute_plan(&plan, &x, &from_text).unwrap();
    let b = Emulator::new().execute_plan(&plan, &x, &from_regs).unwrap();
    assert_eq!(a.logits, b.logits);

    regs.write_register(faultctl::FI_GLOBAL_ENABLE, 0).unwrap();
    assert!(regs.materialize(&cfg).is_empty());
}

#[test]
fn sweep_csv_files_round_trip() {
    let g = fixtures::desk_model();
    let plan = plan_model(&g, &ArrayConfig::default()).unwrap();
    let ds = fixtures::desk_dataset(16, 2);
    let spec = SweepSpec { k_values: vec![2, 8], values: vec![0, 5], reps: 2, seed: 1, slice: Slice::default() };
    let res = campaign::run_fault_sweep(&spec, &plan, &ds, 3).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("results.csv");
    campaign::write_results_csv(&res.records, std::fs::File::create(&path).unwrap()).unwrap();
    let rows = campaign::read_results_csv(std::fs::File::open(&path).unwrap()).unwrap();
    assert_eq!(rows.len(), 1 + 2 * 2 * 2);
    for (row, rec) in rows.iter().zip(&res.records) {
        assert_eq!(row, &rec.row());
    }
    let regrouped = campaign::summarize_boxplot(&res.records).unwrap();
    assert_eq!(regrouped, res.groups);
}
