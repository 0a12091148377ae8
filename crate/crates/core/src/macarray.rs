//! Functional emulation of the multiplier grid.
//!
//! Each micro-op drives one MAC unit for one cycle: every operand-carrying
//! lane multiplies its int8 pair, the lane's fault mux may override the
//! 18-bit product, and the unit sums the lane outputs into the destination
//! accumulator. Idle lanes are gated and never reach the fault mux.

use std::fmt;

use crate::faultctl::{FaultError, FaultMap, LaneFault};
use crate::planner::{ExecutionPlan, LaneSlot, LayerProgram, ProgramBody, PAD};
use crate::qtensor::{ref_execute_layer, requantize_unchecked, scales_match, LayerOutputs, QTensor, TensorError};

#[derive(Debug, Clone, PartialEq)]
pub enum EmuError {
    Shape(String),
    Fault(FaultError),
    Layer { layer: String, source: TensorError },
    EmptyLogits,
}

impl fmt::Display for EmuError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EmuError::Shape(msg) => write!(f, "shape error: {msg}"),
            EmuError::Fault(e) => e.fmt(f),
            EmuError::Layer { layer, source } => write!(f, "layer `{layer}`: {source}"),
            EmuError::EmptyLogits => write!(f, "cannot classify empty logits"),
        }
    }
}

impl std::error::Error for EmuError {}

impl From<FaultError> for EmuError {
    fn from(e: FaultError) -> Self {
        EmuError::Fault(e)
    }
}

/// Position of one multiplier in the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LaneId {
    pub unit: usize,
    pub lane: usize,
}

/// Signed 18-bit multiplier output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LaneOutput(i32);

impl LaneOutput {
    pub fn value(self) -> i32 {
        self.0
    }
}

/// One multiplier lane including its fault mux.
#[inline]
pub fn mult_lane(a: i8, b: i8, fault: &LaneFault, cycle: u64) -> LaneOutput {
    let product = a as i32 * b as i32;
    debug_assert!((-16256..=16384).contains(&product));
    LaneOutput(fault.apply(product, cycle))
}

/// Sum of lane outputs for one cycle of a MAC unit. `None` slots are idle:
/// they contribute nothing and their faults are not applied.
pub fn mac_dot(operands: &[Option<(i8, i8)>], faults: &[LaneFault], cycle: u64) -> i32 {
    operands.iter().zip(faults).fold(0i32, |acc, (op, fault)| match op {
        Some((a, b)) => acc.saturating_add(mult_lane(*a, *b, fault, cycle).value()),
        None => acc,
    })
}

/// Index of the first maximum.
pub fn classify_argmax(logits: &[i8]) -> Result<usize, EmuError> {
    let mut best: Option<(usize, i8)> = None;
    for (i, &v) in logits.iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i).ok_or(EmuError::EmptyLogits)
}

/// A lane override that was active for an operand-carrying lane.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEvent {
    pub cycle: u64,
    pub layer: String,
    pub lane: LaneId,
    pub product: i32,
    pub output: i32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub outputs: LayerOutputs,
    pub logits: Vec<i8>,
    pub cycles: u64,
}

/// Stateful executor for one inference at a time.
#[derive(Debug, Default)]
pub struct Emulator {
    cycle: u64,
    trace: Option<Vec<TraceEvent>>,
}

impl Emulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Record every fired lane override.
    pub fn with_trace() -> Self {
        Emulator { cycle: 0, trace: Some(vec![]) }
    }

    pub fn cycle(&self) -> u64 {
        self.cycle
    }

    pub fn trace(&self) -> &[TraceEvent] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn execute_plan(&mut self, plan: &ExecutionPlan, input: &QTensor, faults: &FaultMap) -> Result<Inference, EmuError> {
        faults.check_dims(&plan.config)?;
        if input.shape() != plan.input.shape() || !scales_match(input.scale(), plan.input.scale) {
            return Err(EmuError::Shape(format!(
                "input {} @ {} does not match model input {} @ {}",
                input.shape(),
                input.scale(),
                plan.input.shape(),
                plan.input.scale
            )));
        }
        self.cycle = 0;
        if let Some(t) = self.trace.as_mut() {
            t.clear();
        }
        let mut outputs: Vec<(String, QTensor)> = Vec::with_capacity(plan.programs.len());
        for program in &plan.programs {
            let ins = program
                .inputs
                .iter()
                .map(|id| {
                    if id == crate::model::INPUT_ID {
                        Ok(input)
                    } else {
                        outputs
                            .iter()
                            .find(|(l, _)| l == id)
                            .map(|(_, t)| t)
                            .ok_or_else(|| EmuError::Shape(format!("layer `{}` input `{id}` not computed", program.id)))
                    }
                })
                .collect::<Result<Vec<_>, _>>()?;
            let out = self.run_program(program, &ins, faults)?;
            outputs.push((program.id.clone(), out));
        }
        let logits = outputs
            .iter()
            .find(|(l, _)| *l == plan.output)
            .map(|(_, t)| t.data().to_vec())
            .ok_or_else(|| EmuError::Shape(format!("output layer `{}` not in plan", plan.output)))?;
        Ok(Inference { outputs: LayerOutputs { layers: outputs }, logits, cycles: self.cycle })
    }

    /// Run a single layer program on explicit inputs. MAC programs stamp
    /// their micro-ops with the program's global cycle numbers, so a layer
    /// sees the same pulse windows whether run alone or inside a full plan.
    pub fn run_program(&mut self, program: &LayerProgram, inputs: &[&QTensor], faults: &FaultMap) -> Result<QTensor, EmuError> {
        let mac = match &program.body {
            ProgramBody::Delegated(op) => {
                return ref_execute_layer(op, inputs).map_err(|source| EmuError::Layer { layer: program.id.clone(), source });
            }
            ProgramBody::Mac(mac) => mac,
        };
        let input = match inputs {
            [t] if t.shape() == mac.in_shape => *t,
            _ => return Err(EmuError::Shape(format!("layer `{}` expects one {} input", program.id, mac.in_shape))),
        };
        let act = input.data();
        let out = program.out_shape;
        let mut acc: Vec<i32> = (0..out.c).flat_map(|o| std::iter::repeat_n(mac.bias[o], out.h * out.w)).collect();
        let clean: Vec<bool> = (0..faults.units()).map(|u| faults.unit_row(u).iter().all(LaneFault::is_none)).collect();

        for (n, op) in mac.micro_ops.iter().enumerate() {
            let cycle = program.cycle_base + n as u64;
            let unit = op.unit as usize;
            let mut partial = 0i32;
            if clean[unit] {
                for slot in op.lanes.iter() {
                    if let LaneSlot::Active { act: a, weight } = *slot {
                        let x = if a == PAD { 0 } else { act[a as usize] };
                        partial += x as i32 * mac.weights[weight as usize] as i32;
                    }
                }
            } else {
                let row = faults.unit_row(unit);
                for (l, slot) in op.lanes.iter().enumerate() {
                    if let LaneSlot::Active { act: a, weight } = *slot {
                        let x = if a == PAD { 0 } else { act[a as usize] };
                        let w = mac.weights[weight as usize];
                        let lane_out = mult_lane(x, w, &row[l], cycle).value();
                        if let Some(trace) = self.trace.as_mut() {
                            if row[l].fires(cycle) {
                                let product = x as i32 * w as i32;
                                trace.push(TraceEvent {
                                    cycle,
                                    layer: program.id.clone(),
                                    lane: LaneId { unit, lane: l },
                                    product,
                                    output: lane_out,
                                });
                            }
                        }
                        partial = partial.saturating_add(lane_out);
                    }
                }
            }
            let idx = out.index(op.dest.o as usize, op.dest.y as usize, op.dest.x as usize);
            acc[idx] = acc[idx].saturating_add(partial);
        }
        self.cycle = program.cycle_base + mac.micro_ops.len() as u64;
        let data = acc.iter().map(|&a| requantize_unchecked(a, mac.m)).collect();
        QTensor::new(out, data, program.out_scale).map_err(|source| EmuError::Layer { layer: program.id.clone(), source })
    }
}
