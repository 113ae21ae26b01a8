use super::program::{LoweredProgram, Opcode};
use super::{Dims, FaultKind, ForthError};

/// Exact machine state. Stacks are stored bottom first.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct DiscreteState {
    pub data: Vec<usize>,
    pub ret: Vec<usize>,
    pub heap: Vec<usize>,
    pub pc: usize,
}

impl DiscreteState {
    /// Empty return stack and zeroed heap, with `data` pushed bottom first.
    pub fn new(dims: Dims, data: &[usize], pc: usize) -> DiscreteState {
        DiscreteState { data: data.to_vec(), ret: Vec::new(), heap: vec![0; dims.value_size], pc }
    }

    /// Check value ranges and stack capacity.
    pub fn validate(&self, dims: Dims) -> Result<(), String> {
        let v = dims.value_size;
        if self.data.len() > dims.capacity() || self.ret.len() > dims.capacity() {
            return Err(format!("stack deeper than capacity {}", dims.capacity()));
        }
        if self.heap.len() != v {
            return Err(format!("heap has {} cells, expected {v}", self.heap.len()));
        }
        if let Some(x) = self.data.iter().chain(&self.ret).chain(&self.heap).find(|&&x| x >= v) {
            return Err(format!("value {x} outside [0, {v})"));
        }
        Ok(())
    }
}

/// Discrete behaviour for `SLOT` instructions, used when a sketch is run
/// with hand-written slot semantics.
pub trait SlotOracle {
    fn apply(&self, slot: usize, state: &mut DiscreteState, dims: Dims) -> Result<(), FaultKind>;
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunOutcome {
    pub state: DiscreteState,
    pub steps: usize,
    pub max_data_depth: usize,
    pub max_ret_depth: usize,
}

fn pop(stack: &mut Vec<usize>, which: FaultKind) -> Result<usize, FaultKind> {
    stack.pop().ok_or(which)
}

fn push(stack: &mut Vec<usize>, x: usize, cap: usize, which: FaultKind) -> Result<(), FaultKind> {
    if stack.len() >= cap {
        return Err(which);
    }
    stack.push(x);
    Ok(())
}

/// Apply a non-control primitive to the stacks and heap.
pub fn apply_primitive(op: Opcode, s: &mut DiscreteState, dims: Dims) -> Result<(), FaultKind> {
    use FaultKind::*;
    let v = dims.value_size;
    let cap = dims.capacity();
    let d = &mut s.data;
    match op {
        Opcode::Lit(k) => push(d, k % v, cap, DataOverflow)?,
        Opcode::Inc => {
            let x = pop(d, DataUnderflow)?;
            d.push((x + 1) % v);
        }
        Opcode::Dec => {
            let x = pop(d, DataUnderflow)?;
            d.push((x + v - 1) % v);
        }
        Opcode::Dup => {
            let x = *d.last().ok_or(DataUnderflow)?;
            push(d, x, cap, DataOverflow)?;
        }
        Opcode::Swap => {
            let n = d.len();
            if n < 2 {
                return Err(DataUnderflow);
            }
            d.swap(n - 1, n - 2);
        }
        Opcode::Over => {
            let n = d.len();
            if n < 2 {
                return Err(DataUnderflow);
            }
            push(d, d[n - 2], cap, DataOverflow)?;
        }
        Opcode::Drop => {
            pop(d, DataUnderflow)?;
        }
        Opcode::Add | Opcode::Sub | Opcode::Mul | Opcode::Div | Opcode::Gt | Opcode::Lt | Opcode::Eq => {
            if d.len() < 2 {
                return Err(DataUnderflow);
            }
            let b = d.pop().unwrap();
            let a = d.pop().unwrap();
            d.push(binary(op, a, b, v));
        }
        Opcode::Fetch => {
            let addr = pop(d, DataUnderflow)?;
            let x = *s.heap.get(addr).ok_or(HeapAddress(addr))?;
            s.data.push(x);
        }
        Opcode::Store => {
            if d.len() < 2 {
                return Err(DataUnderflow);
            }
            let addr = d.pop().unwrap();
            let x = d.pop().unwrap();
            *s.heap.get_mut(addr).ok_or(HeapAddress(addr))? = x;
        }
        Opcode::ToR => {
            let x = pop(d, DataUnderflow)?;
            push(&mut s.ret, x, cap, ReturnOverflow)?;
        }
        Opcode::FromR => {
            let x = pop(&mut s.ret, ReturnUnderflow)?;
            push(&mut s.data, x, cap, DataOverflow)?;
        }
        Opcode::RFetch => {
            let x = *s.ret.last().ok_or(ReturnUnderflow)?;
            push(d, x, cap, DataOverflow)?;
        }
        Opcode::Branch(_) | Opcode::Branch0(_) | Opcode::Call(_) | Opcode::Ret | Opcode::Halt | Opcode::Slot(_) => {
            return Err(NotPrimitive)
        }
    }
    Ok(())
}

/// `a op b` for the binary words, modulo `v`.
pub fn binary(op: Opcode, a: usize, b: usize, v: usize) -> usize {
    match op {
        Opcode::Add => (a + b) % v,
        Opcode::Sub => (a + v - b % v) % v,
        Opcode::Mul => (a * b) % v,
        Opcode::Div => {
            if b == 0 {
                0
            } else {
                (a / b) % v
            }
        }
        Opcode::Gt => (a > b) as usize,
        Opcode::Lt => (a < b) as usize,
        Opcode::Eq => (a == b) as usize,
        _ => panic!("{op} is not a binary word"),
    }
}

/// Advance one instruction.
pub fn step_discrete(
    state: &mut DiscreteState,
    program: &LoweredProgram,
    dims: Dims,
    oracle: Option<&dyn SlotOracle>,
) -> Result<(), ForthError> {
    let pc = state.pc;
    let fault = |kind| ForthError::Fault { pc, kind };
    let op = *program.instructions.get(pc).ok_or(fault(FaultKind::PcOutOfRange(pc)))?;
    match op {
        Opcode::Halt => {}
        Opcode::Branch(t) => state.pc = t,
        Opcode::Branch0(t) => {
            let x = state.data.pop().ok_or(fault(FaultKind::DataUnderflow))?;
            state.pc = if x == 0 { t } else { pc + 1 };
        }
        Opcode::Call(t) => {
            let ret = pc + 1;
            if ret >= dims.value_size {
                return Err(fault(FaultKind::AddressWidth(ret)));
            }
            push(&mut state.ret, ret, dims.capacity(), FaultKind::ReturnOverflow).map_err(fault)?;
            state.pc = t;
        }
        Opcode::Ret => {
            let a = state.ret.pop().ok_or(fault(FaultKind::ReturnUnderflow))?;
            if a >= program.len() {
                return Err(fault(FaultKind::BadReturn(a)));
            }
            state.pc = a;
        }
        Opcode::Slot(id) => {
            let oracle = oracle.ok_or(fault(FaultKind::NoSlotBehaviour(id)))?;
            oracle.apply(id, state, dims).map_err(fault)?;
            state.pc = pc + 1;
        }
        _ => {
            apply_primitive(op, state, dims).map_err(fault)?;
            state.pc = pc + 1;
        }
    }
    Ok(())
}

/// Step until HALT. Exceeding `max_steps` is a [`ForthError::Timeout`].
pub fn run_discrete(
    program: &LoweredProgram,
    initial: DiscreteState,
    dims: Dims,
    max_steps: usize,
    oracle: Option<&dyn SlotOracle>,
) -> Result<RunOutcome, ForthError> {
    run_discrete_with(program, initial, dims, max_steps, oracle, |_, _| {})
}

/// As [`run_discrete`], calling `observe(executed_pc, state_after)` after each step.
pub fn run_discrete_with(
    program: &LoweredProgram,
    initial: DiscreteState,
    dims: Dims,
    max_steps: usize,
    oracle: Option<&dyn SlotOracle>,
    mut observe: impl FnMut(usize, &DiscreteState),
) -> Result<RunOutcome, ForthError> {
    let mut state = initial;
    let mut max_data_depth = state.data.len();
    let mut max_ret_depth = state.ret.len();
    let mut steps = 0;
    while program.instructions.get(state.pc) != Some(&Opcode::Halt) {
        if steps == max_steps {
            return Err(ForthError::Timeout { steps });
        }
        let pc = state.pc;
        step_discrete(&mut state, program, dims, oracle)?;
        steps += 1;
        max_data_depth = max_data_depth.max(state.data.len());
        max_ret_depth = max_ret_depth.max(state.ret.len());
        observe(pc, &state);
    }
    Ok(RunOutcome { state, steps, max_data_depth, max_ret_depth })
}
