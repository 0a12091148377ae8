use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use macfi::campaign::{self, CampaignError, CampaignResult, Slice, SweepSpec, ZeroMode};
use macfi::faultctl::parse_fault_spec;
use macfi::macarray::EmuError;
use macfi::planner::{dump_plan, format_stats, plan_stats};
use macfi::report;
use macfi::{
    fixtures, load_model, plan_model, save_model, ArrayConfig, Dataset, Emulator, ExecutionPlan, FaultMap, ModelError, ModelGraph,
    PlanError,
};

use crate::{CampaignArgs, FixtureArgs, FixtureKind, InferArgs, Mode, PlanArgs, SliceArg};

#[derive(Debug)]
pub enum CliError {
    /// Bad input files, flags or specs.
    Input(String),
    /// Broken invariant inside the emulator.
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Internal(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Input(msg) => f.write_str(msg),
            CliError::Internal(msg) => write!(f, "internal error: {msg}"),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<PlanError> for CliError {
    fn from(e: PlanError) -> Self {
        match e {
            PlanError::NotMacLayer(_) => CliError::Internal(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<EmuError> for CliError {
    fn from(e: EmuError) -> Self {
        match e {
            EmuError::Shape(_) | EmuError::Fault(_) => CliError::Input(e.to_string()),
            _ => CliError::Internal(e.to_string()),
        }
    }
}

impl From<CampaignError> for CliError {
    fn from(e: CampaignError) -> Self {
        match e {
            CampaignError::Emulator(inner) => inner.into(),
            CampaignError::EmptyDataset | CampaignError::InvalidSpec(_) | CampaignError::Fault(_) => CliError::Input(e.to_string()),
            _ => CliError::Internal(e.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Input(format!("{}: {e}", path.display()))
}

fn load(args: &crate::ModelArgs, verbose: bool) -> Result<(ModelGraph, ExecutionPlan)> {
    let graph = load_model(&args.model, &args.weights)?;
    let plan = plan_model(&graph, &ArrayConfig::default())?;
    if verbose {
        eprintln!("loaded {} layers, {} cycles per inference", graph.layers.len(), plan.total_cycles());
    }
    Ok((graph, plan))
}

fn load_dataset(path: &Path, graph: &ModelGraph) -> Result<Dataset> {
    let ds = Dataset::load(path)?;
    ds.check_against(graph).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    Ok(ds)
}

fn resolve_slice(slice: Option<SliceArg>, ds: &Dataset) -> Result<std::ops::Range<usize>> {
    let slice = slice.map_or(Slice::default(), |s| Slice { offset: s.offset, count: Some(s.count) });
    Ok(slice.resolve(ds)?)
}

const TIMING_WINDOWS: usize = 7;
const WINDOW_MIN: Duration = Duration::from_millis(150);

/// Median inferences/second over several timing windows, after a warm-up
/// pass. Each window repeats the slice until `WINDOW_MIN` has elapsed.
fn measure_throughput(plan: &ExecutionPlan, ds: &Dataset, range: std::ops::Range<usize>, faults: &FaultMap) -> Result<f64> {
    let inputs: Vec<_> = range.map(|i| ds.sample(i)).collect();
    let mut emu = Emulator::new();
    for x in &inputs {
        emu.execute_plan(plan, x, faults)?;
    }
    let mut rates = Vec::with_capacity(TIMING_WINDOWS);
    for _ in 0..TIMING_WINDOWS {
        let start = Instant::now();
        let mut n = 0usize;
        while start.elapsed() < WINDOW_MIN {
            for x in &inputs {
                std::hint::black_box(emu.execute_plan(plan, x, faults)?);
            }
            n += inputs.len();
        }
        rates.push(n as f64 / start.elapsed().as_secs_f64());
    }
    rates.sort_by(f64::total_cmp);
    Ok(rates[TIMING_WINDOWS / 2])
}

pub fn infer(args: &InferArgs, verbose: bool) -> Result<()> {
    let (graph, plan) = load(&args.model, verbose)?;
    let ds = load_dataset(&args.dataset, &graph)?;
    let faults = match &args.faults {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            parse_fault_spec(&text, &plan.config).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?
        }
        None => FaultMap::new(&plan.config),
    };
    if verbose {
        eprintln!("{} faulty lanes", faults.faulted().count());
    }
    let range = resolve_slice(args.slice, &ds)?;
    let mut emu = Emulator::new();
    let mut correct = 0usize;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for i in range.clone() {
        let result = emu.execute_plan(&plan, &ds.sample(i), &faults)?;
        let pred = macfi::classify_argmax(&result.logits)?;
        let label = ds.labels[i];
        correct += usize::from(pred == label as usize);
        writeln!(out, "sample={i} pred={pred} label={label}").map_err(|e| CliError::Internal(e.to_string()))?;
    }
    if verbose && !faults.is_empty() {
        let mut traced = Emulator::with_trace();
        traced.execute_plan(&plan, &ds.sample(range.start), &faults)?;
        eprintln!("sample {}: {} lane overrides fired", range.start, traced.trace().len());
        for ev in traced.trace().iter().take(8) {
            eprintln!(
                "  cycle={} layer={} unit={} lane={} product={} output={}",
                ev.cycle, ev.layer, ev.lane.unit, ev.lane.lane, ev.product, ev.output
            );
        }
    }
    let accuracy = correct as f64 / range.len() as f64;
    let ips = measure_throughput(&plan, &ds, range, &faults)?;
    writeln!(out, "accuracy={accuracy:.6} throughput_ips={ips:.1}").map_err(|e| CliError::Internal(e.to_string()))?;
    Ok(())
}

/// Files written by a campaign; removed again unless `commit` is called.
struct OutputGuard {
    files: Vec<PathBuf>,
    created_dir: Option<PathBuf>,
    committed: bool,
}

impl OutputGuard {
    fn new(dir: &Path) -> Result<Self> {
        let created_dir = if dir.exists() { None } else { Some(dir.to_path_buf()) };
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        Ok(OutputGuard { files: vec![], created_dir, committed: false })
    }

    fn write(&mut self, path: PathBuf, bytes: &[u8]) -> Result<()> {
        self.files.push(path.clone());
        fs::write(&path, bytes).map_err(|e| io_err(&path, e))
    }

    fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for OutputGuard {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for f in &self.files {
            let _ = fs::remove_file(f);
        }
        if let Some(dir) = &self.created_dir {
            let _ = fs::remove_dir(dir);
        }
    }
}

fn write_outputs(guard: &mut OutputGuard, out: &Path, mode: Mode, res: &CampaignResult) -> Result<()> {
    let csv_err = |e: CampaignError| CliError::Internal(e.to_string());
    let mut buf = vec![];
    campaign::write_results_csv(&res.records, &mut buf).map_err(csv_err)?;
    guard.write(out.join("results.csv"), &buf)?;
    let mut buf = vec![];
    campaign::write_summary_csv(&res.groups, &mut buf).map_err(csv_err)?;
    guard.write(out.join("summary.csv"), &buf)?;
    match mode {
        Mode::Sweep => {
            let title = format!("Accuracy drop vs. faulty multipliers (baseline {:.4})", res.baseline);
            guard.write(out.join("boxplot.svg"), report::boxplot_svg(&res.groups, &title).as_bytes())?;
        }
        Mode::Heatmap => {
            for h in &res.heatmaps {
                let title = format!("Accuracy drop [%] per multiplier, error value {}", h.value);
                guard.write(out.join(format!("heatmap_{}.svg", h.value)), report::heatmap_svg(h, &title).as_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn campaign(args: &CampaignArgs, verbose: bool) -> Result<()> {
    let (graph, plan) = load(&args.model, verbose)?;
    let ds = load_dataset(&args.dataset, &graph)?;
    let workers = match args.workers {
        Some(0) => return Err(CliError::Input("--workers must be at least 1".into())),
        Some(n) => n,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let slice = args.slice.map_or(Slice::default(), |s| Slice { offset: s.offset, count: Some(s.count) });
    let mut guard = OutputGuard::new(&args.out)?;
    let start = Instant::now();
    let res = match args.mode {
        Mode::Sweep => {
            let spec = SweepSpec { k_values: args.k.clone(), values: args.values.clone(), reps: args.reps, seed: args.seed, slice };
            campaign::run_fault_sweep(&spec, &plan, &ds, workers)?
        }
        Mode::Heatmap => campaign::run_heatmap(&args.values, &plan, &ds, slice, ZeroMode::StuckZero, workers)?,
    };
    if verbose {
        eprintln!(
            "{} runs on {workers} workers in {:.2}s, baseline accuracy {:.4}",
            res.fault_runs().count(),
            start.elapsed().as_secs_f64(),
            res.baseline
        );
    }
    write_outputs(&mut guard, &args.out, args.mode, &res)?;
    guard.commit();
    Ok(())
}

pub fn plan(args: &PlanArgs, verbose: bool) -> Result<()> {
    let (_, plan) = load(&args.model, verbose)?;
    let mut text = dump_plan(&plan);
    text.push('\n');
    text.push_str(&format_stats(&plan, &plan_stats(&plan)));
    match &args.out {
        Some(path) => fs::write(path, text).map_err(|e| io_err(path, e)),
        None => std::io::stdout().write_all(text.as_bytes()).map_err(|e| CliError::Internal(e.to_string())),
    }
}

pub fn fixture(args: &FixtureArgs) -> Result<()> {
    let (graph, ds) = match args.kind {
        FixtureKind::Desk => (fixtures::desk_model(), fixtures::desk_dataset(args.samples, fixtures::DESK_EVAL_SEED)),
        FixtureKind::HalfWidth => {
            let g = fixtures::half_width_model();
            let ds = fixtures::self_labelled_dataset(&g, args.samples, fixtures::DESK_EVAL_SEED);
            (g, ds)
        }
    };
    fs::create_dir_all(&args.out).map_err(|e| io_err(&args.out, e))?;
    save_model(&graph, &args.out.join("model.json"), &args.out.join("weights.bin"))?;
    ds.save(&args.out.join("dataset.qds"))?;
    Ok(())
}
