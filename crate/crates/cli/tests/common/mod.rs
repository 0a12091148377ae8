#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use macfi::{fixtures, save_model, Dataset, ModelGraph};

pub fn macfi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_macfi")).args(args).output().expect("spawn macfi")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub struct Files {
    pub model: PathBuf,
    pub weights: PathBuf,
    pub dataset: PathBuf,
}

impl Files {
    pub fn write(dir: &Path, g: &ModelGraph, ds: &Dataset) -> Files {
        std::fs::create_dir_all(dir).unwrap();
        let f = Files { model: dir.join("model.json"), weights: dir.join("weights.bin"), dataset: dir.join("dataset.qds") };
        save_model(g, &f.model, &f.weights).unwrap();
        ds.save(&f.dataset).unwrap();
        f
    }

    pub fn desk(dir: &Path, n: usize) -> Files {
        Files::write(dir, &fixtures::desk_model(), &fixtures::desk_dataset(n, fixtures::DESK_EVAL_SEED))
    }

    pub fn args(&self) -> Vec<String> {
        ["--model", p(&self.model), "--weights", p(&self.weights), "--dataset", p(&self.dataset)].map(String::from).to_vec()
    }

    pub fn model_args(&self) -> Vec<String> {
        ["--model", p(&self.model), "--weights", p(&self.weights)].map(String::from).to_vec()
    }
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

pub fn run(sub: &str, base: &[String], extra: &[&str]) -> Output {
    let mut args: Vec<&str> = vec![sub];
    args.extend(base.iter().map(String::as_str));
    args.extend_from_slice(extra);
    macfi(&args)
}

/// `(pred, label)` per sample line plus the summary `(accuracy, ips)`.
pub fn parse_infer(out: &str) -> (Vec<(usize, usize)>, f64, f64) {
    let mut preds = vec![];
    let mut summary = None;
    for line in out.lines() {
        let kv: Vec<(&str, &str)> = line.split(' ').filter_map(|t| t.split_once('=')).collect();
        match kv.as_slice() {
            [("sample", _), ("pred", p), ("label", l)] => preds.push((p.parse().unwrap(), l.parse().unwrap())),
            [("accuracy", a), ("throughput_ips", t)] => summary = Some((a.parse().unwrap(), t.parse().unwrap())),
            _ => panic!("unexpected line `{line}`"),
        }
    }
    let (acc, ips) = summary.expect("summary line");
    (preds, acc, ips)
}

/// Lane-activity table of `macfi plan`, indexed `[unit][lane]`.
pub fn parse_lane_activity(out: &str) -> Vec<Vec<u64>> {
    out.lines()
        .skip_while(|l| !l.starts_with("lane activity"))
        .skip(2)
        .take_while(|l| l.trim_start().starts_with("unit"))
        .map(|l| l.split_whitespace().skip(1).map(|v| v.parse().unwrap()).collect())
        .collect()
}

pub fn parse_unit_ops(out: &str) -> Vec<u64> {
    out.lines()
        .skip_while(|l| !l.starts_with("micro-ops per unit"))
        .skip(1)
        .take_while(|l| l.trim_start().starts_with("unit"))
        .map(|l| l.rsplit(' ').next().unwrap().parse().unwrap())
        .collect()
}

pub fn all_zero_spec() -> String {
    (0..8).flat_map(|u| (0..8).map(move |l| format!("{u},{l},zero\n"))).collect()
}

pub fn files_in(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    names
}
