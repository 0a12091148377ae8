//! Compilation of a [`ModelGraph`] into an [`ExecutionPlan`] for the MAC array.
//!
//! Direct convolution mapping: output channel `o` runs on MAC
//! unit `o % units`, and the lanes of one micro-op carry `lanes` consecutive
//! input channels at a single kernel tap. Micro-ops are emitted row-major
//! over `(o, y, x, channel group, i, j)`. One micro-op occupies one cycle;
//! cycles are numbered globally across the whole plan.
//!
//! Relu, pooling and add do not use the multipliers and are delegated to the
//! reference implementations.

use std::fmt::{self, Write as _};

use crate::model::{validate_graph, InputSpec, LayerKind, LayerOp, LayerSpec, ModelError, ModelGraph};
use crate::qtensor::{out_extent, Shape};
use crate::Scale;

#[derive(Debug, Clone, PartialEq)]
pub enum PlanError {
    Config(String),
    Invalid(Vec<ModelError>),
    NotMacLayer(String),
}

impl fmt::Display for PlanError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlanError::Config(msg) => write!(f, "invalid array config: {msg}"),
            PlanError::Invalid(errs) => {
                let msgs: Vec<String> = errs.iter().map(ToString::to_string).collect();
                write!(f, "{}", msgs.join("; "))
            }
            PlanError::NotMacLayer(id) => write!(f, "layer `{id}` does not run on the MAC array"),
        }
    }
}

impl std::error::Error for PlanError {}

/// Geometry of the multiplier grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArrayConfig {
    pub units: usize,
    pub lanes: usize,
    /// Width of each multiplier's output in bits.
    pub lane_bits: u32,
}

impl Default for ArrayConfig {
    fn default() -> Self {
        ArrayConfig { units: 8, lanes: 8, lane_bits: 18 }
    }
}

impl ArrayConfig {
    pub fn new(units: usize, lanes: usize, lane_bits: u32) -> Result<Self, PlanError> {
        if units == 0 || lanes == 0 {
            return Err(PlanError::Config(format!("{units} units x {lanes} lanes")));
        }
        if units > u16::MAX as usize || lanes > u16::MAX as usize {
            return Err(PlanError::Config("array dimensions above 65535".into()));
        }
        // an int8 x int8 product spans [-16256, 16384] and needs 17 bits
        if !(17..=32).contains(&lane_bits) {
            return Err(PlanError::Config(format!("lane width {lane_bits} bits outside 17..=32")));
        }
        Ok(ArrayConfig { units, lanes, lane_bits })
    }

    pub fn total_lanes(&self) -> usize {
        self.units * self.lanes
    }
}

/// Activation index meaning "zero padding".
pub const PAD: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LaneSlot {
    Idle,
    /// `act` indexes the layer input (or is [`PAD`]); `weight` indexes the
    /// layer kernel.
    Active {
        act: u32,
        weight: u32,
    },
}

/// Output element `(o, y, x)` of the layer a program belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Dest {
    pub o: u32,
    pub y: u32,
    pub x: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MacMicroOp {
    pub unit: u16,
    pub dest: Dest,
    /// Accumulate group; all micro-ops of a group share `dest` and the bias
    /// is added once per group.
    pub group: u32,
    pub lanes: Box<[LaneSlot]>,
}

impl MacMicroOp {
    pub fn active_lanes(&self) -> usize {
        self.lanes.iter().filter(|s| matches!(s, LaneSlot::Active { .. })).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MacProgram {
    pub in_shape: Shape,
    pub weights: Vec<i8>,
    pub bias: Vec<i32>,
    pub m: Scale,
    pub micro_ops: Vec<MacMicroOp>,
    pub groups: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProgramBody {
    Mac(MacProgram),
    /// Executed by the reference path.
    Delegated(LayerOp),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerProgram {
    pub id: String,
    pub kind: LayerKind,
    pub inputs: Vec<String>,
    pub out_shape: Shape,
    pub out_scale: Scale,
    /// Global cycle of this program's first micro-op.
    pub cycle_base: u64,
    pub body: ProgramBody,
}

impl LayerProgram {
    pub fn cycles(&self) -> u64 {
        match &self.body {
            ProgramBody::Mac(p) => p.micro_ops.len() as u64,
            ProgramBody::Delegated(_) => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionPlan {
    pub config: ArrayConfig,
    pub input: InputSpec,
    pub classes: usize,
    pub output: String,
    pub programs: Vec<LayerProgram>,
}

impl ExecutionPlan {
    pub fn total_cycles(&self) -> u64 {
        self.programs.last().map_or(0, |p| p.cycle_base + p.cycles())
    }

    pub fn program(&self, id: &str) -> Option<&LayerProgram> {
        self.programs.iter().find(|p| p.id == id)
    }
}

/// Micro-ops for one conv/fc layer applied to an input of shape `input`.
pub fn plan_layer(layer: &LayerSpec, input: Shape, cfg: &ArrayConfig) -> Result<Vec<MacMicroOp>, PlanError> {
    let conv = layer.op.conv().ok_or_else(|| PlanError::NotMacLayer(layer.id.clone()))?;
    let kern = &conv.weights;
    let shape_err = |msg: String| PlanError::Invalid(vec![ModelError::Shape { layer: layer.id.clone(), msg }]);
    if kern.cin != input.c {
        return Err(shape_err(format!("kernel Cin={} vs input C={}", kern.cin, input.c)));
    }
    let (ho, wo) = match (out_extent(input.h, conv.k, conv.stride, conv.pad), out_extent(input.w, conv.k, conv.stride, conv.pad)) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(shape_err(format!("kernel does not fit input {input}"))),
    };
    let groups_per_pos = kern.cin.div_ceil(cfg.lanes);
    let k = conv.k;
    let mut ops = Vec::with_capacity(kern.cout * ho * wo * k * k * groups_per_pos);
    let mut group = 0u32;
    for o in 0..kern.cout {
        let unit = (o % cfg.units) as u16;
        for y in 0..ho {
            for x in 0..wo {
                let dest = Dest { o: o as u32, y: y as u32, x: x as u32 };
                for g in 0..groups_per_pos {
                    for i in 0..k {
                        let iy = (y * conv.stride + i) as isize - conv.pad as isize;
                        for j in 0..k {
                            let ix = (x * conv.stride + j) as isize - conv.pad as isize;
                            let inside = iy >= 0 && iy < input.h as isize && ix >= 0 && ix < input.w as isize;
                            let lanes = (0..cfg.lanes)
                                .map(|l| {
                                    let c = g * cfg.lanes + l;
                                    if c >= kern.cin {
                                        return LaneSlot::Idle;
                                    }
                                    let act = if inside { input.index(c, iy as usize, ix as usize) as u32 } else { PAD };
                                    LaneSlot::Active { act, weight: kern.index(o, c, i, j) as u32 }
                                })
                                .collect();
                            ops.push(MacMicroOp { unit, dest, group, lanes });
                        }
                    }
                }
                group += 1;
            }
        }
    }
    Ok(ops)
}

/// Compile a validated graph, layer by layer in topological order.
pub fn plan_model(g: &ModelGraph, cfg: &ArrayConfig) -> Result<ExecutionPlan, PlanError> {
    validate_graph(g).map_err(PlanError::Invalid)?;
    let shapes = g.infer_shapes().map_err(|e| PlanError::Invalid(vec![e]))?;
    let order = g.topo_order().map_err(|e| PlanError::Invalid(vec![e]))?;
    let in_shape_of = |id: &str| if id == crate::model::INPUT_ID { g.input.shape() } else { shapes[id].0 };
    let mut programs = Vec::with_capacity(order.len());
    let mut cycle = 0u64;
    for layer in order {
        let (out_shape, out_scale) = shapes[&layer.id];
        let body = match &layer.op {
            LayerOp::Conv(conv) | LayerOp::Fc(conv) => {
                let in_shape = in_shape_of(&layer.inputs[0]);
                let micro_ops = plan_layer(layer, in_shape, cfg)?;
                ProgramBody::Mac(MacProgram {
                    in_shape,
                    weights: conv.weights.data.clone(),
                    bias: conv.bias.clone(),
                    m: conv.m,
                    micro_ops,
                    groups: out_shape.len(),
                })
            }
            other => ProgramBody::Delegated(other.clone()),
        };
        let program = LayerProgram {
            id: layer.id.clone(),
            kind: layer.op.kind(),
            inputs: layer.inputs.clone(),
            out_shape,
            out_scale,
            cycle_base: cycle,
            body,
        };
        cycle += program.cycles();
        programs.push(program);
    }
    Ok(ExecutionPlan { config: *cfg, input: g.input, classes: g.classes, output: g.output.clone(), programs })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanStats {
    pub micro_ops_per_unit: Vec<u64>,
    /// Operand-carrying multiplies per lane, indexed `unit * lanes + lane`.
    pub lane_activity: Vec<u64>,
    pub idle_lane_slots: u64,
}

impl PlanStats {
    pub fn activity(&self, cfg: &ArrayConfig, unit: usize, lane: usize) -> u64 {
        self.lane_activity[unit * cfg.lanes + lane]
    }

    pub fn total_active(&self) -> u64 {
        self.lane_activity.iter().sum()
    }
}

pub fn plan_stats(plan: &ExecutionPlan) -> PlanStats {
    let cfg = &plan.config;
    let mut stats = PlanStats { micro_ops_per_unit: vec![0; cfg.units], lane_activity: vec![0; cfg.total_lanes()], idle_lane_slots: 0 };
    for p in &plan.programs {
        if let ProgramBody::Mac(mac) = &p.body {
            for op in &mac.micro_ops {
                let u = op.unit as usize;
                stats.micro_ops_per_unit[u] += 1;
                for (l, slot) in op.lanes.iter().enumerate() {
                    match slot {
                        LaneSlot::Active { .. } => stats.lane_activity[u * cfg.lanes + l] += 1,
                        LaneSlot::Idle => stats.idle_lane_slots += 1,
                    }
                }
            }
        }
    }
    stats
}

/// Text dump: one header line per layer and one line per micro-op.
///
/// Lane slots print as `a<act>*w<weight>`, `pad*w<weight>` for zero padding,
/// or `-` when idle.
pub fn dump_plan(plan: &ExecutionPlan) -> String {
    let mut out = String::new();
    let cfg = &plan.config;
    let _ = writeln!(out, "# plan units={} lanes={} lane_bits={} cycles={}", cfg.units, cfg.lanes, cfg.lane_bits, plan.total_cycles());
    for p in &plan.programs {
        match &p.body {
            ProgramBody::Delegated(_) => {
                let _ = writeln!(out, "# layer {} kind={} out={} delegated", p.id, p.kind, p.out_shape);
            }
            ProgramBody::Mac(mac) => {
                let _ = writeln!(
                    out,
                    "# layer {} kind={} out={} micro_ops={} cycles={}..{}",
                    p.id,
                    p.kind,
                    p.out_shape,
                    mac.micro_ops.len(),
                    p.cycle_base,
                    p.cycle_base + p.cycles()
                );
                for op in &mac.micro_ops {
                    let _ =
                        write!(out, "unit={} dest={}:{},{},{} group={} lanes=[", op.unit, p.id, op.dest.o, op.dest.y, op.dest.x, op.group);
                    for (i, slot) in op.lanes.iter().enumerate() {
                        if i > 0 {
                            out.push(',');
                        }
                        let _ = match slot {
                            LaneSlot::Idle => write!(out, "-"),
                            LaneSlot::Active { act: PAD, weight } => write!(out, "pad*w{weight}"),
                            LaneSlot::Active { act, weight } => write!(out, "a{act}*w{weight}"),
                        };
                    }
                    out.push_str("]\n");
                }
            }
        }
    }
    out
}

/// Human-readable stats table.
pub fn format_stats(plan: &ExecutionPlan, stats: &PlanStats) -> String {
    let cfg = &plan.config;
    let mut out = String::new();
    let _ = writeln!(out, "micro-ops per unit:");
    for (u, n) in stats.micro_ops_per_unit.iter().enumerate() {
        let _ = writeln!(out, "  unit {u}: {n}");
    }
    let _ = writeln!(out, "lane activity (rows = unit, columns = lane):");
    let _ = write!(out, "{:>6}", "");
    for l in 0..cfg.lanes {
        let _ = write!(out, " {:>10}", format!("lane{l}"));
    }
    out.push('\n');
    for u in 0..cfg.units {
        let _ = write!(out, "{:>6}", format!("unit{u}"));
        for l in 0..cfg.lanes {
            let _ = write!(out, " {:>10}", stats.activity(cfg, u, l));
        }
        out.push('\n');
    }
    let _ = writeln!(out, "idle lane slots: {}", stats.idle_lane_slots);
    let _ = writeln!(out, "total cycles: {}", plan.total_cycles());
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::model::ModelBuilder;
    use crate::qtensor::Kernel;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn single_conv(cin: usize, cout: usize, k: usize, hw: usize, pad: usize, stride: usize) -> ModelGraph {
        let input = InputSpec { c: cin, h: hw, w: hw, scale: 0.1 };
        let mut b = ModelBuilder::new(input, cout);
        let kern = Kernel::new(cout, cin, k, (0..cout * cin * k * k).map(|i| (i % 7) as i8 - 3).collect(), 0.1).unwrap();
        b.conv("conv", "input", stride, pad, kern, vec![0; cout], 0.05).gavgpool("gap", "conv");
        b.build("gap").unwrap()
    }

    /// Counting oracle: (micro-ops, active lane multiplies).
    fn counts(cout: usize, ho: usize, wo: usize, k: usize, cin: usize, lanes: usize) -> (usize, usize) {
        (cout * ho * wo * k * k * cin.div_ceil(lanes), cout * ho * wo * k * k * cin)
    }

    #[test]
    fn conv_8x8_counts() {
        let g = single_conv(8, 8, 3, 6, 0, 1);
        let cfg = ArrayConfig::default();
        let ops = plan_layer(g.layer("conv").unwrap(), g.input.shape(), &cfg).unwrap();
        let (n_ops, active) = counts(8, 4, 4, 3, 8, 8);
        assert_eq!((n_ops, active), (1152, 9216));
        assert_eq!(ops.len(), n_ops);
        assert_eq!(ops.iter().map(MacMicroOp::active_lanes).sum::<usize>(), active);
        for o in 0..8u32 {
            assert_eq!(ops.iter().filter(|op| op.dest.o == o).count(), 144);
            assert!(ops.iter().filter(|op| op.dest.o == o).all(|op| op.unit as u32 == o));
        }
        let plan = plan_model(&g, &cfg).unwrap();
        let stats = plan_stats(&plan);
        assert!(stats.lane_activity.iter().all(|&a| a == 144));
        assert_eq!(stats.micro_ops_per_unit, vec![144; 8]);
        assert_eq!(stats.idle_lane_slots, 0);
    }

    #[test]
    fn conv_cin4_idles_upper_lanes() {
        let g = single_conv(4, 8, 3, 6, 0, 1);
        let cfg = ArrayConfig::default();
        let ops = plan_layer(g.layer("conv").unwrap(), g.input.shape(), &cfg).unwrap();
        assert_eq!(ops.len(), 1152);
        assert_eq!(ops.iter().map(MacMicroOp::active_lanes).sum::<usize>(), 4608);
        assert!(ops.iter().all(|op| op.lanes[4..].iter().all(|s| *s == LaneSlot::Idle)));
        let stats = plan_stats(&plan_model(&g, &cfg).unwrap());
        for u in 0..8 {
            for l in 0..8 {
                assert_eq!(stats.activity(&cfg, u, l), if l < 4 { 144 } else { 0 });
            }
        }
        assert_eq!(stats.idle_lane_slots, 1152 * 4);
    }

    #[test]
    fn fc_single_output() {
        let input = InputSpec { c: 8, h: 1, w: 1, scale: 0.1 };
        let mut b = ModelBuilder::new(input, 1);
        b.fc("fc", "input", Kernel::new(1, 8, 1, vec![1; 8], 0.1).unwrap(), vec![0], 0.1);
        let g = b.build("fc").unwrap();
        let ops = plan_layer(g.layer("fc").unwrap(), g.input.shape(), &ArrayConfig::default()).unwrap();
        assert_eq!(ops.len(), 1);
        assert_eq!(ops[0].unit, 0);
        assert_eq!(ops[0].active_lanes(), 8);
    }

    #[test]
    fn plan_model_structure() {
        let cfg = ArrayConfig::default();
        let plan = plan_model(&fixtures::conv_relu_fc(), &cfg).unwrap();
        assert_eq!(plan.programs.len(), 3);
        assert!(matches!(plan.programs[1].body, ProgramBody::Delegated(LayerOp::Relu)));
        assert!(matches!(plan.programs[0].body, ProgramBody::Mac(_)));

        let plan = plan_model(&fixtures::diamond_add(), &cfg).unwrap();
        let ids: Vec<&str> = plan.programs.iter().map(|p| p.id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c", "d"]);
        assert!(matches!(plan.programs[3].body, ProgramBody::Delegated(LayerOp::Add)));
    }

    #[test]
    fn plan_model_rejects_empty_graph() {
        let mut g = fixtures::conv_relu_fc();
        g.layers.clear();
        assert!(matches!(plan_model(&g, &ArrayConfig::default()), Err(PlanError::Invalid(_))));
    }

    #[test]
    fn plan_layer_rejects_non_mac_layers() {
        let g = fixtures::conv_relu_fc();
        let relu = g.layer("relu1").unwrap();
        assert_eq!(plan_layer(relu, g.input.shape(), &ArrayConfig::default()), Err(PlanError::NotMacLayer("relu1".into())));
    }

    #[test]
    fn empty_plan_stats_are_zero() {
        let plan = ExecutionPlan {
            config: ArrayConfig::default(),
            input: InputSpec { c: 1, h: 1, w: 1, scale: 1.0 },
            classes: 1,
            output: String::new(),
            programs: vec![],
        };
        let s = plan_stats(&plan);
        assert!(s.micro_ops_per_unit.iter().all(|&n| n == 0));
        assert!(s.lane_activity.iter().all(|&n| n == 0));
        assert_eq!(s.idle_lane_slots, 0);
        assert_eq!(plan.total_cycles(), 0);
    }

    #[test]
    fn config_validation() {
        assert!(ArrayConfig::new(0, 8, 18).is_err());
        assert!(ArrayConfig::new(8, 8, 16).is_err());
        assert_eq!(ArrayConfig::new(8, 8, 18).unwrap(), ArrayConfig::default());
    }

    #[test]
    fn dump_is_deterministic_and_parseable() {
        let g = fixtures::conv_relu_fc();
        let cfg = ArrayConfig::default();
        let a = dump_plan(&plan_model(&g, &cfg).unwrap());
        let b = dump_plan(&plan_model(&g, &cfg).unwrap());
        assert_eq!(a, b);
        let first = a.lines().find(|l| l.starts_with("unit=")).unwrap();
        assert!(first.starts_with("unit=0 dest=conv1:0,0,0 group=0 lanes=["), "{first}");
        let mac_lines = a.lines().filter(|l| l.starts_with("unit=")).count() as u64;
        assert_eq!(mac_lines, plan_model(&g, &cfg).unwrap().total_cycles());
    }

    proptest! {
        #[test]
        fn coverage_and_conservation(
            cin in 1usize..=12, cout in 1usize..=10, k in 1usize..=3, hw in 3usize..=7,
            pad in 0usize..=1, stride in 1usize..=2, units in 1usize..=8, lanes in 1usize..=8,
        ) {
            let g = single_conv(cin, cout, k, hw, pad, stride);
            let cfg = ArrayConfig::new(units, lanes, 18).unwrap();
            let ops = plan_layer(g.layer("conv").unwrap(), g.input.shape(), &cfg).unwrap();
            let ho = (hw + 2 * pad - k) / stride + 1;
            let (n_ops, active) = counts(cout, ho, ho, k, cin, lanes);
            prop_assert_eq!(ops.len(), n_ops);
            prop_assert_eq!(ops.iter().map(MacMicroOp::active_lanes).sum::<usize>(), active);
            // each output element owns exactly one accumulate group
            let mut dest_of_group: BTreeMap<u32, Dest> = BTreeMap::new();
            for op in &ops {
                prop_assert_eq!(op.unit as usize, op.dest.o as usize % units);
                let d = dest_of_group.entry(op.group).or_insert(op.dest);
                prop_assert_eq!(*d, op.dest);
            }
            let mut dests: Vec<Dest> = dest_of_group.into_values().collect();
            prop_assert_eq!(dests.len(), cout * ho * ho);
            dests.sort();
            dests.dedup();
            prop_assert_eq!(dests.len(), cout * ho * ho);
        }
    }
}
