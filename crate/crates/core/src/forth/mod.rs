//! Tokenizer, compiler and exact interpreter for the Forth subset.

mod compile;
mod discrete;
mod program;
mod token;

pub use compile::{compile, compile_source, CompileOptions};
pub use discrete::{
    apply_primitive, binary, run_discrete, run_discrete_with, step_discrete, DiscreteState, RunOutcome, SlotOracle,
};
pub use program::{IfRegion, LoweredProgram, Opcode, SlotSource, SourceInfo};
pub use token::{tokenize, Token, TokenKind};

use serde::{Deserialize, Serialize};

/// Machine dimensions: stack rows `l` and value width `v`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub stack_size: usize,
    pub value_size: usize,
}

impl Dims {
    pub fn new(stack_size: usize, value_size: usize) -> Dims {
        Dims { stack_size, value_size }
    }

    /// Usable depth of each stack. One of the `l` rows is the empty-stack
    /// position of the circular pointer.
    pub fn capacity(&self) -> usize {
        self.stack_size.saturating_sub(1)
    }
}

impl Default for Dims {
    fn default() -> Self {
        Dims { stack_size: 12, value_size: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum FaultKind {
    #[error("data stack underflow")]
    DataUnderflow,
    #[error("data stack overflow")]
    DataOverflow,
    #[error("return stack underflow")]
    ReturnUnderflow,
    #[error("return stack overflow")]
    ReturnOverflow,
    #[error("heap address {0} out of range")]
    HeapAddress(usize),
    #[error("return address {0} does not fit the value width")]
    AddressWidth(usize),
    #[error("return to invalid address {0}")]
    BadReturn(usize),
    #[error("program counter {0} out of range")]
    PcOutOfRange(usize),
    #[error("no behaviour bound for slot {0}")]
    NoSlotBehaviour(usize),
    #[error("instruction is not a primitive")]
    NotPrimitive,
    #[error("{0}")]
    Slot(String),
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum ForthError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: undefined word {word}")]
    UndefinedWord { line: usize, word: String },
    #[error("line {line}: unbalanced control structure: {message}")]
    Unbalanced { line: usize, message: String },
    #[error("line {line}: literal {literal} not below value size {value_size}")]
    LiteralRange { line: usize, literal: String, value_size: usize },
    #[error("line {line}: heap exhausted allocating {requested} cells (capacity {capacity})")]
    HeapExhausted { line: usize, requested: usize, capacity: usize },
    #[error("line {line}: {name} is already defined")]
    Redefinition { line: usize, name: String },
    #[error("line {line}: macro {name} expands into itself")]
    RecursiveMacro { line: usize, name: String },
    #[error("line {line}: DO..LOOP inside recursive word {name}")]
    RecursiveLoop { line: usize, name: String },
    #[error("fault at instruction {pc}: {kind}")]
    Fault { pc: usize, kind: FaultKind },
    #[error("step budget of {steps} exhausted before HALT")]
    Timeout { steps: usize },
}
