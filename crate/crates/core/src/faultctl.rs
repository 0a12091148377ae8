//! Fault descriptors, the memory-mapped FI control plane, and seeded random
//! fault-map construction.

use std::fmt;

use crate::planner::ArrayConfig;
use crate::rng;

/// Smallest and largest value a signed 18-bit lane output can carry.
pub const LANE_MIN: i32 = -(1 << 17);
pub const LANE_MAX: i32 = (1 << 17) - 1;
const LANE_MASK: u32 = (1 << 18) - 1;

/// Interpret the low 18 bits of `raw` as a two's-complement value.
pub fn sign_extend_18(raw: u32) -> i32 {
    (((raw & LANE_MASK) << 14) as i32) >> 14
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FaultError {
    ValueOutOfRange(i64),
    ZeroPulseLength,
    LaneOutOfRange { unit: usize, lane: usize },
    KTooLarge { k: usize, lanes: usize },
    UnmappedAddress(u32),
    DimensionMismatch { expected: (usize, usize), found: (usize, usize) },
    Parse { line: usize, msg: String },
}

impl fmt::Display for FaultError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FaultError::ValueOutOfRange(v) => {
                write!(f, "fault value {v} outside the 18-bit range [{LANE_MIN}, {LANE_MAX}]")
            }
            FaultError::ZeroPulseLength => write!(f, "pulse length must be at least 1 cycle"),
            FaultError::LaneOutOfRange { unit, lane } => write!(f, "lane ({unit},{lane}) outside the MAC array"),
            FaultError::KTooLarge { k, lanes } => {
                write!(f, "KTooLarge: cannot fault {k} lanes, the array has only {lanes}")
            }
            FaultError::UnmappedAddress(a) => write!(f, "unmapped FI register address {a:#04x}"),
            FaultError::DimensionMismatch { expected, found } => {
                write!(f, "fault map is {}x{} but the array is {}x{}", found.0, found.1, expected.0, expected.1)
            }
            FaultError::Parse { line, msg } => write!(f, "fault spec line {line}: {msg}"),
        }
    }
}

impl std::error::Error for FaultError {}

/// What a single multiplier lane does to its product.
///
/// New fault models go here: add a variant and its arm in [`LaneFault::apply`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum LaneFault {
    #[default]
    None,
    StuckZero,
    /// Output forced to a raw 18-bit value regardless of operands.
    Constant(i32),
    /// Output forced to `value` during cycles `start..start + len`.
    Pulse {
        value: i32,
        start: u64,
        len: u64,
    },
}

impl LaneFault {
    pub fn constant(value: i64) -> Result<Self, FaultError> {
        Ok(LaneFault::Constant(check_value(value)?))
    }

    pub fn pulse(value: i64, start: u64, len: u64) -> Result<Self, FaultError> {
        if len == 0 {
            return Err(FaultError::ZeroPulseLength);
        }
        Ok(LaneFault::Pulse { value: check_value(value)?, start, len })
    }

    /// Override used by the campaigns for an injected error value: 0 becomes
    /// a stuck-at-zero, anything else a constant.
    pub fn for_error_value(value: i64) -> Result<Self, FaultError> {
        if value == 0 {
            Ok(LaneFault::StuckZero)
        } else {
            LaneFault::constant(value)
        }
    }

    pub fn validate(&self) -> Result<(), FaultError> {
        match *self {
            LaneFault::None | LaneFault::StuckZero => Ok(()),
            LaneFault::Constant(v) => check_value(v as i64).map(|_| ()),
            LaneFault::Pulse { value, len, .. } => {
                check_value(value as i64)?;
                if len == 0 {
                    Err(FaultError::ZeroPulseLength)
                } else {
                    Ok(())
                }
            }
        }
    }

    pub fn is_none(&self) -> bool {
        matches!(self, LaneFault::None)
    }

    /// Whether the override is active at `cycle`.
    pub fn fires(&self, cycle: u64) -> bool {
        match *self {
            LaneFault::None => false,
            LaneFault::StuckZero | LaneFault::Constant(_) => true,
            LaneFault::Pulse { start, len, .. } => cycle >= start && cycle - start < len,
        }
    }

    /// Lane output for a genuine `product` at `cycle`.
    #[inline]
    pub fn apply(&self, product: i32, cycle: u64) -> i32 {
        match *self {
            LaneFault::None => product,
            LaneFault::StuckZero => 0,
            LaneFault::Constant(v) => v,
            LaneFault::Pulse { value, start, len } => {
                if cycle >= start && cycle - start < len {
                    value
                } else {
                    product
                }
            }
        }
    }

    fn code(&self) -> [u64; 4] {
        match *self {
            LaneFault::None => [0, 0, 0, 0],
            LaneFault::StuckZero => [1, 0, 0, 0],
            LaneFault::Constant(v) => [2, v as u32 as u64, 0, 0],
            LaneFault::Pulse { value, start, len } => [3, value as u32 as u64, start, len],
        }
    }
}

fn check_value(v: i64) -> Result<i32, FaultError> {
    if (LANE_MIN as i64..=LANE_MAX as i64).contains(&v) {
        Ok(v as i32)
    } else {
        Err(FaultError::ValueOutOfRange(v))
    }
}

/// Dense per-lane fault grid, indexed `[unit][lane]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FaultMap {
    units: usize,
    lanes: usize,
    cells: Vec<LaneFault>,
}

impl FaultMap {
    pub fn new(cfg: &ArrayConfig) -> Self {
        FaultMap { units: cfg.units, lanes: cfg.lanes, cells: vec![LaneFault::None; cfg.units * cfg.lanes] }
    }

    /// Every lane carries `fault`.
    pub fn uniform(cfg: &ArrayConfig, fault: LaneFault) -> Self {
        FaultMap { units: cfg.units, lanes: cfg.lanes, cells: vec![fault; cfg.units * cfg.lanes] }
    }

    pub fn units(&self) -> usize {
        self.units
    }

    pub fn lanes(&self) -> usize {
        self.lanes
    }

    pub fn get(&self, unit: usize, lane: usize) -> LaneFault {
        self.cells[unit * self.lanes + lane]
    }

    pub fn set(&mut self, unit: usize, lane: usize, fault: LaneFault) -> Result<(), FaultError> {
        if unit >= self.units || lane >= self.lanes {
            return Err(FaultError::LaneOutOfRange { unit, lane });
        }
        fault.validate()?;
        self.cells[unit * self.lanes + lane] = fault;
        Ok(())
    }

    /// Faults of one MAC unit, indexed by lane.
    pub fn unit_row(&self, unit: usize) -> &[LaneFault] {
        &self.cells[unit * self.lanes..(unit + 1) * self.lanes]
    }

    pub fn is_empty(&self) -> bool {
        self.cells.iter().all(LaneFault::is_none)
    }

    /// `(unit, lane, fault)` for every non-`None` cell, row-major.
    pub fn faulted(&self) -> impl Iterator<Item = (usize, usize, LaneFault)> + '_ {
        self.cells.iter().enumerate().filter(|(_, f)| !f.is_none()).map(|(i, f)| (i / self.lanes, i % self.lanes, *f))
    }

    pub fn check_dims(&self, cfg: &ArrayConfig) -> Result<(), FaultError> {
        if (self.units, self.lanes) == (cfg.units, cfg.lanes) {
            Ok(())
        } else {
            Err(FaultError::DimensionMismatch { expected: (cfg.units, cfg.lanes), found: (self.units, self.lanes) })
        }
    }

    /// Stable 64-bit fingerprint of the map contents.
    pub fn digest(&self) -> u64 {
        let mut words = vec![self.units as u64, self.lanes as u64];
        for (i, f) in self.cells.iter().enumerate().filter(|(_, f)| !f.is_none()) {
            words.push(i as u64);
            words.extend_from_slice(&f.code());
        }
        rng::derive_seed(0x4641_554C_544D_4150, &words)
    }
}

/// Choose `k` distinct lanes uniformly without replacement and give each a
/// copy of `template`. The draw is a partial Fisher-Yates shuffle over lane
/// indices `unit * lanes + lane` driven by SplitMix64 seeded with `seed`.
pub fn sample_random_fault_map(cfg: &ArrayConfig, k: usize, template: LaneFault, seed: u64) -> Result<FaultMap, FaultError> {
    let total = cfg.total_lanes();
    if k > total {
        return Err(FaultError::KTooLarge { k, lanes: total });
    }
    template.validate()?;
    let mut map = FaultMap::new(cfg);
    let mut r = rng::seeded(seed);
    for idx in rng::sample_indices(&mut r, total, k) {
        map.cells[idx] = template;
    }
    Ok(map)
}

// ---------------------------------------------------------------------------
// Fault-spec text format: `unit,lane,mode[,value[,start,len]]`

pub fn parse_fault_spec(text: &str, cfg: &ArrayConfig) -> Result<FaultMap, FaultError> {
    let mut map = FaultMap::new(cfg);
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let err = |msg: String| FaultError::Parse { line, msg };
        let fields: Vec<&str> = body.split(',').map(str::trim).collect();
        let int = |i: usize| -> Result<i64, FaultError> {
            let s = fields.get(i).ok_or_else(|| err(format!("missing field {}", i + 1)))?;
            s.parse::<i64>().map_err(|e| err(format!("`{s}`: {e}")))
        };
        let uint = |i: usize| -> Result<u64, FaultError> {
            let v = int(i)?;
            u64::try_from(v).map_err(|_| err(format!("`{v}` must be non-negative")))
        };
        if fields.len() < 3 {
            return Err(err("expected unit,lane,mode[,value[,start,len]]".into()));
        }
        let unit = uint(0)? as usize;
        let lane = uint(1)? as usize;
        let (fault, arity) = match fields[2] {
            "zero" => (LaneFault::StuckZero, 3),
            "const" => (LaneFault::constant(int(3)?).map_err(|e| err(e.to_string()))?, 4),
            "pulse" => (LaneFault::pulse(int(3)?, uint(4)?, uint(5)?).map_err(|e| err(e.to_string()))?, 6),
            other => return Err(err(format!("unknown mode `{other}` (expected zero, const or pulse)"))),
        };
        if fields.len() != arity {
            return Err(err(format!("mode `{}` takes {arity} fields, got {}", fields[2], fields.len())));
        }
        map.set(unit, lane, fault).map_err(|e| err(e.to_string()))?;
    }
    Ok(map)
}

pub fn format_fault_spec(map: &FaultMap) -> String {
    let mut out = String::new();
    for (u, l, f) in map.faulted() {
        let line = match f {
            LaneFault::StuckZero => format!("{u},{l},zero"),
            LaneFault::Constant(v) => format!("{u},{l},const,{v}"),
            LaneFault::Pulse { value, start, len } => format!("{u},{l},pulse,{value},{start},{len}"),
            LaneFault::None => continue,
        };
        out.push_str(&line);
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// Register control plane

pub const FI_GLOBAL_ENABLE: u32 = 0x00;
pub const FI_INDEX: u32 = 0x04;
pub const FI_CTRL: u32 = 0x08;
pub const FI_VALUE: u32 = 0x0C;
pub const FI_PULSE_START: u32 = 0x10;
pub const FI_PULSE_LEN: u32 = 0x14;

/// Number of independently programmable fault entries.
pub const FI_ENTRIES: usize = 64;

pub const CTRL_ENABLE: u32 = 1;
pub const CTRL_MODE_SHIFT: u32 = 1;
pub const CTRL_UNIT_SHIFT: u32 = 8;
pub const CTRL_LANE_SHIFT: u32 = 11;
const CTRL_MASK: u32 = CTRL_ENABLE | (0b11 << CTRL_MODE_SHIFT) | (0b111 << CTRL_UNIT_SHIFT) | (0b111 << CTRL_LANE_SHIFT);

pub const MODE_ZERO: u32 = 0;
pub const MODE_CONSTANT: u32 = 1;
pub const MODE_PULSE: u32 = 2;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct FiEntry {
    ctrl: u32,
    value: u32,
    pulse_start: u32,
    pulse_len: u32,
    /// Write clock at the entry's last update; orders entries that target
    /// the same lane.
    stamp: u64,
}

/// Register-level model of the FI control block.
///
/// `FI_INDEX` selects which of the [`FI_ENTRIES`] banked entries the
/// `FI_CTRL`, `FI_VALUE`, `FI_PULSE_START` and `FI_PULSE_LEN` windows address.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FiRegisterFile {
    global: u32,
    index: u32,
    entries: [FiEntry; FI_ENTRIES],
    clock: u64,
}

impl Default for FiRegisterFile {
    fn default() -> Self {
        FiRegisterFile { global: 0, index: 0, entries: [FiEntry::default(); FI_ENTRIES], clock: 0 }
    }
}

impl FiRegisterFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn write_register(&mut self, offset: u32, value: u32) -> Result<(), FaultError> {
        self.clock += 1;
        let clock = self.clock;
        let idx = self.index as usize;
        let e = &mut self.entries[idx];
        match offset {
            FI_GLOBAL_ENABLE => self.global = value & 1,
            FI_INDEX => self.index = value & (FI_ENTRIES as u32 - 1),
            FI_CTRL => e.ctrl = value & CTRL_MASK,
            FI_VALUE => e.value = value & LANE_MASK,
            FI_PULSE_START => e.pulse_start = value,
            FI_PULSE_LEN => e.pulse_len = value,
            other => return Err(FaultError::UnmappedAddress(other)),
        }
        if matches!(offset, FI_CTRL | FI_VALUE | FI_PULSE_START | FI_PULSE_LEN) {
            e.stamp = clock;
        }
        Ok(())
    }

    pub fn read_register(&self, offset: u32) -> Result<u32, FaultError> {
        let e = &self.entries[self.index as usize];
        Ok(match offset {
            FI_GLOBAL_ENABLE => self.global,
            FI_INDEX => self.index,
            FI_CTRL => e.ctrl,
            FI_VALUE => sign_extend_18(e.value) as u32,
            FI_PULSE_START => e.pulse_start,
            FI_PULSE_LEN => e.pulse_len,
            other => return Err(FaultError::UnmappedAddress(other)),
        })
    }

    /// Program entry `index` to describe `fault` at `(unit, lane)` through the
    /// register interface, as a driver would.
    pub fn program(&mut self, index: usize, unit: usize, lane: usize, fault: LaneFault) -> Result<(), FaultError> {
        if unit > 7 || lane > 7 {
            return Err(FaultError::LaneOutOfRange { unit, lane });
        }
        let (enable, mode, value, start, len) = match fault {
            LaneFault::None => (0, MODE_ZERO, 0, 0, 0),
            LaneFault::StuckZero => (1, MODE_ZERO, 0, 0, 0),
            LaneFault::Constant(v) => (1, MODE_CONSTANT, v, 0, 0),
            LaneFault::Pulse { value, start, len } => {
                let start = u32::try_from(start).map_err(|_| FaultError::ValueOutOfRange(start as i64))?;
                let len = u32::try_from(len).map_err(|_| FaultError::ValueOutOfRange(len as i64))?;
                (1, MODE_PULSE, value, start, len)
            }
        };
        let ctrl = enable | mode << CTRL_MODE_SHIFT | (unit as u32) << CTRL_UNIT_SHIFT | (lane as u32) << CTRL_LANE_SHIFT;
        self.write_register(FI_INDEX, index as u32)?;
        self.write_register(FI_VALUE, value as u32)?;
        self.write_register(FI_PULSE_START, start)?;
        self.write_register(FI_PULSE_LEN, len)?;
        self.write_register(FI_CTRL, ctrl)
    }

    /// Decode the enabled entries into a fault map for `cfg`. Entries are
    /// applied oldest first, so the most recently written entry wins when two
    /// target the same lane. Entries outside the array, with the reserved
    /// mode 3, or pulses of length 0 have no effect.
    pub fn materialize(&self, cfg: &ArrayConfig) -> FaultMap {
        let mut map = FaultMap::new(cfg);
        if self.global & 1 == 0 {
            return map;
        }
        let mut live: Vec<&FiEntry> = self.entries.iter().filter(|e| e.ctrl & CTRL_ENABLE != 0).collect();
        live.sort_by_key(|e| e.stamp);
        for e in live {
            let unit = ((e.ctrl >> CTRL_UNIT_SHIFT) & 0b111) as usize;
            let lane = ((e.ctrl >> CTRL_LANE_SHIFT) & 0b111) as usize;
            let value = sign_extend_18(e.value);
            let fault = match (e.ctrl >> CTRL_MODE_SHIFT) & 0b11 {
                MODE_ZERO => LaneFault::StuckZero,
                MODE_CONSTANT => LaneFault::Constant(value),
                MODE_PULSE if e.pulse_len > 0 => LaneFault::Pulse { value, start: e.pulse_start as u64, len: e.pulse_len as u64 },
                _ => continue,
            };
            let _ = map.set(unit, lane, fault);
        }
        map
    }
}
