//! Seeded fault-injection campaigns: the random multi-lane sweep and the
//! exhaustive single-lane heatmap.
//!
//! Jobs are independent `(plan, fault map, dataset slice)` tuples run on a
//! rayon pool. Every job's fault map is a pure function of the campaign
//! parameters (sweep seeds come from [`job_seed`]), and results are collected
//! in job order, so the output does not depend on the worker count.
//!
//! Box-plot quartiles use linear interpolation between order statistics
//! (see [`crate::num::quantile_sorted`]).

use std::collections::BTreeMap;
use std::fmt;
use std::io;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::faultctl::{sample_random_fault_map, FaultError, FaultMap, LaneFault};
use crate::macarray::{classify_argmax, EmuError, Emulator};
use crate::model::Dataset;
use crate::num::quantile_sorted;
use crate::planner::ExecutionPlan;
use crate::rng::derive_seed;

#[derive(Debug)]
pub enum CampaignError {
    EmptyDataset,
    InvalidSpec(String),
    Fault(FaultError),
    Emulator(EmuError),
    EmptyGroup { k: usize, value: i32 },
    OutOfRange(f64),
    Pool(String),
    Csv(String),
}

impl fmt::Display for CampaignError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CampaignError::EmptyDataset => write!(f, "dataset slice is empty"),
            CampaignError::InvalidSpec(msg) => write!(f, "invalid campaign spec: {msg}"),
            CampaignError::Fault(e) => e.fmt(f),
            CampaignError::Emulator(e) => e.fmt(f),
            CampaignError::EmptyGroup { k, value } => write!(f, "no records for k={k} value={value}"),
            CampaignError::OutOfRange(v) => write!(f, "accuracy {v} outside [0, 1]"),
            CampaignError::Pool(msg) => write!(f, "worker pool: {msg}"),
            CampaignError::Csv(msg) => write!(f, "csv: {msg}"),
        }
    }
}

impl std::error::Error for CampaignError {}

impl From<FaultError> for CampaignError {
    fn from(e: FaultError) -> Self {
        CampaignError::Fault(e)
    }
}

impl From<EmuError> for CampaignError {
    fn from(e: EmuError) -> Self {
        CampaignError::Emulator(e)
    }
}

impl From<csv::Error> for CampaignError {
    fn from(e: csv::Error) -> Self {
        CampaignError::Csv(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CampaignError>;

/// Contiguous range of dataset samples; `count: None` runs to the end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Slice {
    pub offset: usize,
    pub count: Option<usize>,
}

impl Slice {
    pub fn resolve(&self, ds: &Dataset) -> Result<std::ops::Range<usize>> {
        let end = match self.count {
            Some(n) => self
                .offset
                .checked_add(n)
                .filter(|&e| e <= ds.len())
                .ok_or_else(|| CampaignError::InvalidSpec(format!("slice {}+{n} exceeds dataset of {}", self.offset, ds.len())))?,
            None => ds.len(),
        };
        if self.offset >= end {
            return Err(CampaignError::EmptyDataset);
        }
        Ok(self.offset..end)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SweepSpec {
    pub k_values: Vec<usize>,
    /// Injected lane-output values (0 is realized as stuck-at-zero).
    pub values: Vec<i32>,
    pub reps: usize,
    pub seed: u64,
    pub slice: Slice,
}

/// Shipped default sweep: k in {1, 4, 16, 64}, errors 0, 1 and -1, ten
/// repetitions each (120 injections plus a baseline).
impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec { k_values: vec![1, 4, 16, 64], values: vec![0, 1, -1], reps: 10, seed: 2024, slice: Slice::default() }
    }
}

/// How the heatmap realizes an injected value of 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ZeroMode {
    #[default]
    StuckZero,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunKind {
    Baseline,
    Sweep,
    Heatmap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub kind: RunKind,
    pub k: usize,
    pub value: Option<i32>,
    pub unit: Option<usize>,
    pub lane: Option<usize>,
    pub rep: Option<usize>,
    pub seed: Option<u64>,
    pub digest: u64,
    pub accuracy: f64,
    pub drop: f64,
}

impl RunRecord {
    pub fn row(&self) -> ResultRow {
        ResultRow {
            kind: self.kind,
            k: self.k,
            value: self.value,
            unit: self.unit,
            lane: self.lane,
            rep: self.rep,
            seed: self.seed,
            accuracy: self.accuracy,
            drop: self.drop,
        }
    }
}

/// One line of `results.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub kind: RunKind,
    pub k: usize,
    pub value: Option<i32>,
    pub unit: Option<usize>,
    pub lane: Option<usize>,
    pub rep: Option<usize>,
    pub seed: Option<u64>,
    pub accuracy: f64,
    pub drop: f64,
}

/// Five-number summary of the drops for one `(k, value)` group; one line of
/// `summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxplotGroup {
    pub k: usize,
    pub value: i32,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Accuracy drop per lane for one injected value, indexed `unit * lanes + lane`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub value: i32,
    pub units: usize,
    pub lanes: usize,
    pub drops: Vec<f64>,
}

impl Heatmap {
    pub fn drop_at(&self, unit: usize, lane: usize) -> f64 {
        self.drops[unit * self.lanes + lane]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CampaignResult {
    pub baseline: f64,
    /// Baseline record first, then runs in job order.
    pub records: Vec<RunRecord>,
    pub groups: Vec<BoxplotGroup>,
    pub heatmaps: Vec<Heatmap>,
}

impl CampaignResult {
    pub fn fault_runs(&self) -> impl Iterator<Item = &RunRecord> {
        self.records.iter().filter(|r| r.kind != RunKind::Baseline)
    }
}

/// `baseline - faulty`; negative when a fault happens to help.
pub fn accuracy_drop(baseline: f64, faulty: f64) -> Result<f64> {
    for v in [baseline, faulty] {
        if !(0.0..=1.0).contains(&v) {
            return Err(CampaignError::OutOfRange(v));
        }
    }
    Ok(baseline - faulty)
}

/// Seed of sweep job `(k, value, rep)` under `master`.
pub fn job_seed(master: u64, k: usize, value: i32, rep: usize) -> u64 {
    derive_seed(master, &[k as u64, value as u32 as u64, rep as u64])
}

/// Fraction of samples in `range` whose argmax prediction equals the label.
pub fn evaluate_accuracy(plan: &ExecutionPlan, ds: &Dataset, range: std::ops::Range<usize>, faults: &FaultMap) -> Result<f64> {
    if range.is_empty() {
        return Err(CampaignError::EmptyDataset);
    }
    let n = range.len();
    let mut emu = Emulator::new();
    let mut correct = 0usize;
    for i in range {
        let out = emu.execute_plan(plan, &ds.sample(i), faults)?;
        if classify_argmax(&out.logits)? == ds.labels[i] as usize {
            correct += 1;
        }
    }
    Ok(correct as f64 / n as f64)
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    if workers == 0 {
        return Err(CampaignError::InvalidSpec("worker count must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new().num_threads(workers).build().map_err(|e| CampaignError::Pool(e.to_string()))
}

struct Job {
    kind: RunKind,
    k: usize,
    value: i32,
    unit: Option<usize>,
    lane: Option<usize>,
    rep: Option<usize>,
    seed: Option<u64>,
    faults: FaultMap,
}

fn run_jobs(
    jobs: Vec<Job>,
    plan: &ExecutionPlan,
    ds: &Dataset,
    range: std::ops::Range<usize>,
    workers: usize,
) -> Result<(f64, Vec<RunRecord>)> {
    let pool = pool(workers)?;
    let empty = FaultMap::new(&plan.config);
    let (baseline, accs) = pool.install(|| {
        let baseline = evaluate_accuracy(plan, ds, range.clone(), &empty);
        let accs: Vec<Result<f64>> = jobs.par_iter().map(|j| evaluate_accuracy(plan, ds, range.clone(), &j.faults)).collect();
        (baseline, accs)
    });
    let baseline = baseline?;
    let mut records = Vec::with_capacity(jobs.len() + 1);
    records.push(RunRecord {
        kind: RunKind::Baseline,
        k: 0,
        value: None,
        unit: None,
        lane: None,
        rep: None,
        seed: None,
        digest: empty.digest(),
        accuracy: baseline,
        drop: 0.0,
    });
    for (job, acc) in jobs.into_iter().zip(accs) {
        let accuracy = acc?;
        records.push(RunRecord {
            kind: job.kind,
            k: job.k,
            value: Some(job.value),
            unit: job.unit,
            lane: job.lane,
            rep: job.rep,
            seed: job.seed,
            digest: job.faults.digest(),
            accuracy,
            drop: accuracy_drop(baseline, accuracy)?,
        });
    }
    Ok((baseline, records))
}

fn check_values(values: &[i32]) -> Result<()> {
    if values.is_empty() {
        return Err(CampaignError::InvalidSpec("no error values given".into()));
    }
    for &v in values {
        LaneFault::for_error_value(v as i64)?;
    }
    Ok(())
}

/// Random multi-lane injections: for each `(k, value, rep)` a fresh map of
/// `k` faulty lanes drawn with [`job_seed`].
pub fn run_fault_sweep(spec: &SweepSpec, plan: &ExecutionPlan, ds: &Dataset, workers: usize) -> Result<CampaignResult> {
    let range = spec.slice.resolve(ds)?;
    if spec.k_values.is_empty() {
        return Err(CampaignError::InvalidSpec("no k values given".into()));
    }
    if spec.reps == 0 {
        return Err(CampaignError::InvalidSpec("repetitions must be at least 1".into()));
    }
    check_values(&spec.values)?;
    let mut jobs = vec![];
    for &k in &spec.k_values {
        for &value in &spec.values {
            let template = LaneFault::for_error_value(value as i64)?;
            for rep in 0..spec.reps {
                let seed = job_seed(spec.seed, k, value, rep);
                let faults = sample_random_fault_map(&plan.config, k, template, seed)?;
                jobs.push(Job { kind: RunKind::Sweep, k, value, unit: None, lane: None, rep: Some(rep), seed: Some(seed), faults });
            }
        }
    }
    let (baseline, records) = run_jobs(jobs, plan, ds, range, workers)?;
    let groups = summarize_boxplot(&records)?;
    Ok(CampaignResult { baseline, records, groups, heatmaps: vec![] })
}

/// Exhaustive single-lane injections: every `(unit, lane)` for every value.
pub fn run_heatmap(
    values: &[i32],
    plan: &ExecutionPlan,
    ds: &Dataset,
    slice: Slice,
    zero: ZeroMode,
    workers: usize,
) -> Result<CampaignResult> {
    let range = slice.resolve(ds)?;
    check_values(values)?;
    let cfg = plan.config;
    let mut jobs = vec![];
    for &value in values {
        let fault = match (value, zero) {
            (0, ZeroMode::StuckZero) => LaneFault::StuckZero,
            _ => LaneFault::constant(value as i64)?,
        };
        for unit in 0..cfg.units {
            for lane in 0..cfg.lanes {
                let mut faults = FaultMap::new(&cfg);
                faults.set(unit, lane, fault)?;
                jobs.push(Job { kind: RunKind::Heatmap, k: 1, value, unit: Some(unit), lane: Some(lane), rep: None, seed: None, faults });
            }
        }
    }
    let (baseline, records) = run_jobs(jobs, plan, ds, range, workers)?;
    let heatmaps = values
        .iter()
        .map(|&value| {
            let mut drops = vec![0.0; cfg.total_lanes()];
            for r in records.iter().filter(|r| r.kind == RunKind::Heatmap && r.value == Some(value)) {
                drops[r.unit.unwrap() * cfg.lanes + r.lane.unwrap()] = r.drop;
            }
            Heatmap { value, units: cfg.units, lanes: cfg.lanes, drops }
        })
        .collect();
    let groups = summarize_boxplot(&records)?;
    Ok(CampaignResult { baseline, records, groups, heatmaps })
}

/// Five-number summaries of the fault runs grouped by `(k, value)`, sorted
/// by k then value. Baseline records are ignored.
pub fn summarize_boxplot(records: &[RunRecord]) -> Result<Vec<BoxplotGroup>> {
    let mut groups: BTreeMap<(usize, i32), Vec<f64>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.kind != RunKind::Baseline) {
        let value = r.value.ok_or_else(|| CampaignError::InvalidSpec("fault run without a value".into()))?;
        groups.entry((r.k, value)).or_default().push(r.drop);
    }
    groups.into_iter().map(|((k, value), drops)| five_numbers(k, value, drops)).collect()
}

/// Five-number summary of one group of drops.
pub fn five_numbers(k: usize, value: i32, mut drops: Vec<f64>) -> Result<BoxplotGroup> {
    if drops.is_empty() {
        return Err(CampaignError::EmptyGroup { k, value });
    }
    drops.sort_by(f64::total_cmp);
    let q = |p: f64| quantile_sorted(&drops, p).expect("non-empty");
    Ok(BoxplotGroup { k, value, min: drops[0], q1: q(0.25), median: q(0.5), q3: q(0.75), max: drops[drops.len() - 1] })
}

// ---------------------------------------------------------------------------
// CSV

pub const RESULTS_HEADER: &str = "kind,k,value,unit,lane,rep,seed,accuracy,drop";
pub const SUMMARY_HEADER: &str = "k,value,min,q1,median,q3,max";

pub fn write_results_csv<W: io::Write>(records: &[RunRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r.row())?;
    }
    if records.is_empty() {
        w.write_record(RESULTS_HEADER.split(','))?;
    }
    w.flush().map_err(|e| CampaignError::Csv(e.to_string()))
}

pub fn read_results_csv<R: io::Read>(input: R) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_reader(input);
    check_header(r.headers()?, RESULTS_HEADER)?;
    r.deserialize().map(|row| row.map_err(CampaignError::from)).collect()
}

pub fn write_summary_csv<W: io::Write>(groups: &[BoxplotGroup], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for g in groups {
        w.serialize(g)?;
    }
    if groups.is_empty() {
        w.write_record(SUMMARY_HEADER.split(','))?;
    }
    w.flush().map_err(|e| CampaignError::Csv(e.to_string()))
}

pub fn read_summary_csv<R: io::Read>(input: R) -> Result<Vec<BoxplotGroup>> {
    let mut r = csv::Reader::from_reader(input);
    check_header(r.headers()?, SUMMARY_HEADER)?;
    r.deserialize().map(|row| row.map_err(CampaignError::from)).collect()
}

fn check_header(found: &csv::StringRecord, want: &str) -> Result<()> {
    let found: Vec<&str> = found.iter().collect();
    if found.join(",") == want {
        Ok(())
    } else {
        Err(CampaignError::Csv(format!("unexpected header `{}`", found.join(","))))
    }
}
