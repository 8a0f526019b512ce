//! Deterministic reference executor for the IR.
//!
//! Byte-addressed memory on a bump allocator with per-allocation bounds
//! (no address reuse, so dangling access detection is exact), an external
//! `read` stream, and instruction-step accounting: every executed
//! instruction costs 1, calls are transparent. Float operations are plain
//! IEEE-754 double/single with no fused ops, so traces are bit-identical
//! across runs and platforms.

mod gradcheck;
mod machine;

pub use gradcheck::{
    count_profile, fit_slope, gradcheck, GradCheckConfig, GradCheckEntry,
    GradCheckReport, ProfileRow, ProfileTable,
};
pub use machine::run;

use crate::ir::IrType;
use std::collections::BTreeMap;
use thiserror::Error;

/// Host-provided argument for an entry function.
#[derive(Debug, Clone, PartialEq)]
pub enum ArgValue {
    F64(f64),
    F32(f32),
    I1(bool),
    I32(i32),
    I64(i64),
    /// Fresh buffer of doubles; the argument is a pointer to it.
    BufF64(Vec<f64>),
    /// Fresh buffer of singles.
    BufF32(Vec<f32>),
    /// Fresh buffer of 64-bit integers.
    BufI64(Vec<i64>),
    /// Function reference, as if the caller passed `@name`.
    FuncRef(String),
    Null,
}

impl ArgValue {
    pub fn ty(&self) -> IrType {
        match self {
            ArgValue::F64(_) => IrType::F64,
            ArgValue::F32(_) => IrType::F32,
            ArgValue::I1(_) => IrType::I1,
            ArgValue::I32(_) => IrType::I32,
            ArgValue::I64(_) => IrType::I64,
            _ => IrType::Ptr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TrapMode {
    /// Runtime errors halt execution.
    #[default]
    Strict,
    /// Errors are recorded and execution continues where meaningful
    /// (out-of-bounds reads yield zero, writes are dropped), so access
    /// counts are never under-reported.
    Counting,
}

#[derive(Debug, Clone)]
pub struct ExecConfig {
    pub entry: String,
    pub args: Vec<ArgValue>,
    pub read_stream: Vec<f64>,
    pub trap_mode: TrapMode,
    pub step_limit: u64,
    /// Track per-byte initialization and flag reads of uninitialized
    /// cache storage; record final bytes of every allocation.
    pub instrument: bool,
}

impl ExecConfig {
    pub fn new(entry: impl Into<String>) -> ExecConfig {
        ExecConfig {
            entry: entry.into(),
            args: Vec::new(),
            read_stream: Vec::new(),
            trap_mode: TrapMode::Strict,
            step_limit: 500_000_000,
            instrument: false,
        }
    }

    pub fn with_args(mut self, args: Vec<ArgValue>) -> ExecConfig {
        self.args = args;
        self
    }

    pub fn with_read_stream(mut self, stream: Vec<f64>) -> ExecConfig {
        self.read_stream = stream;
        self
    }

    pub fn instrumented(mut self) -> ExecConfig {
        self.instrument = true;
        self
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum RuntimeError {
    #[error("out-of-bounds {access} of {size} bytes at offset {offset} in allocation `{alloc}` of {alloc_size} bytes")]
    OutOfBounds {
        access: &'static str,
        alloc: String,
        offset: i64,
        size: u64,
        alloc_size: u64,
    },
    #[error("access to freed allocation `{0}`")]
    UseAfterFree(String),
    #[error("double free of allocation `{0}`")]
    DoubleFree(String),
    #[error("free of a non-base or foreign pointer")]
    BadFree,
    #[error("store to read-only allocation `{0}`")]
    ReadOnlyWrite(String),
    #[error("`read` executed with an exhausted input stream")]
    ReadExhausted,
    #[error("step limit of {0} exceeded")]
    StepLimit(u64),
    #[error("null pointer dereference")]
    NullDeref,
    #[error("loading bytes that do not hold a pointer as ptr")]
    LoadNonPointer,
    #[error("scalar load overlaps a stored pointer")]
    TypePun,
    #[error("indirect call through a non-function pointer")]
    BadIndirectCallee,
    #[error("call arity mismatch: passed {passed}, expected {expected} by @{callee}")]
    Arity {
        callee: String,
        passed: usize,
        expected: usize,
    },
    #[error("call to @{0} which has no body")]
    MissingBody(String),
    #[error("unknown entry function @{0}")]
    UnknownEntry(String),
    #[error("argument {0} has the wrong type for the entry function")]
    BadArgument(usize),
    #[error("{0}")]
    Other(String),
}

/// Runtime value. Pointers carry their allocation and byte offset, or a
/// function reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Value {
    F64(f64),
    F32(f32),
    I1(bool),
    I32(i32),
    I64(i64),
    Ptr(PtrVal),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PtrVal {
    Null,
    Mem { alloc: usize, offset: i64 },
    Func(usize),
}

impl Value {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::F64(v) => Some(*v),
            Value::F32(v) => Some(*v as f64),
            _ => None,
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        match self {
            Value::I64(v) => Some(*v),
            Value::I32(v) => Some(*v as i64),
            Value::I1(v) => Some(*v as i64),
            _ => None,
        }
    }
}

/// Post-mortem record of one allocation.
#[derive(Debug, Clone)]
pub struct AllocRecord {
    /// Result name of the alloc instruction, parameter name for host
    /// buffers, or global name.
    pub label: String,
    pub size: u64,
    pub shadow: bool,
    pub cache: bool,
    pub freed: bool,
    pub free_step: Option<u64>,
    pub last_access_step: Option<u64>,
    /// Final contents; only recorded under instrumentation.
    pub final_bytes: Option<Vec<u8>>,
}

#[derive(Debug, Clone, Default)]
pub struct ExecTrace {
    pub ret: Option<Value>,
    /// Final contents of host buffer arguments, index-aligned with
    /// `ExecConfig::args` (None for scalar args), widened to f64.
    pub buffers: Vec<Option<Vec<f64>>>,
    pub steps: u64,
    /// Executed-instruction counts keyed `mnemonic.type` (e.g. `fadd.f64`).
    pub op_counts: BTreeMap<String, u64>,
    pub read_count: u64,
    pub error: Option<RuntimeError>,
    pub allocations: Vec<AllocRecord>,
    /// Instrumented-mode findings (uninitialized cache reads, counting-mode
    /// memory violations).
    pub violations: Vec<String>,
}

impl ExecTrace {
    pub fn ret_f64(&self) -> Option<f64> {
        self.ret.as_ref().and_then(|v| v.as_f64())
    }

    pub fn count(&self, key: &str) -> u64 {
        self.op_counts.get(key).copied().unwrap_or(0)
    }

    /// Consistency check: steps equals the sum of per-opcode counts.
    pub fn counts_consistent(&self) -> bool {
        self.op_counts.values().sum::<u64>() == self.steps
    }
}
