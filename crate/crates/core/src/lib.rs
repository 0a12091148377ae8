//! Bit-exact emulator of an 8x8 int8 MAC array with per-multiplier fault
//! injection, plus a campaign engine that measures accuracy degradation
//! under injected lane faults.
//!
//! ```
//! use macfi::{fixtures, plan_model, ArrayConfig, Emulator, FaultMap, LaneFault};
//!
//! let graph = fixtures::conv_relu_fc();
//! let plan = plan_model(&graph, &ArrayConfig::default()).unwrap();
//! let input = fixtures::random_input(&graph.input, 7);
//!
//! let mut faults = FaultMap::new(&plan.config);
//! faults.set(0, 0, LaneFault::StuckZero).unwrap();
//! let out = Emulator::new().execute_plan(&plan, &input, &faults).unwrap();
//! assert_eq!(out.logits.len(), graph.classes);
//! ```

pub mod campaign;
pub mod faultctl;
pub mod fixtures;
pub mod macarray;
pub mod model;
pub mod num;
pub mod planner;
pub mod qtensor;
pub mod report;
pub mod rng;

/// Real-valued quantization scale.
pub type Scale = f64;

pub use campaign::{run_fault_sweep, run_heatmap, CampaignError, CampaignResult, Slice, SweepSpec, ZeroMode};
pub use faultctl::{FaultError, FaultMap, FiRegisterFile, LaneFault};
pub use macarray::{classify_argmax, EmuError, Emulator, Inference};
pub use model::{load_model, save_model, Dataset, ModelError, ModelGraph};
pub use planner::{plan_model, ArrayConfig, ExecutionPlan, PlanError};
pub use qtensor::{reference_forward, QTensor, Shape, TensorError};
