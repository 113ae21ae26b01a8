//! The execution RNN: each step mixes every transition of a plan by the
//! program-counter distribution.

mod plan;
mod symbolic;

use std::io::Write as _;
use std::path::Path;
use std::rc::Rc;

pub use plan::{entry_points, ExecutionPlan, PlanOptions, Transition};
pub use symbolic::{collapse, Block, Expr};

use crate::autodiff::{argmax, AutodiffError, Shape, Tape, Tensor, Var};
use crate::forth::{run_discrete_with, Dims, DiscreteState, ForthError, LoweredProgram, Opcode, SlotOracle};
use crate::machine::{read, ContinuousState, Control, Machine, MachineError, Memory};
use crate::sketch::{apply_slot, mix_memories, SketchError, SlotSpec};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ExecutorError {
    #[error(transparent)]
    Machine(#[from] MachineError),
    #[error(transparent)]
    Sketch(#[from] SketchError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Forth(#[from] ForthError),
    #[error("state became non-finite at step {step}")]
    NonFinite { step: usize },
    #[error("slot {0} has no specification")]
    MissingSlot(usize),
}

/// Fixed unroll length.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepBudget {
    pub max_steps: usize,
    /// Plan position of HALT.
    pub halt_index: usize,
}

/// Safety factor applied to the longest observed plan execution.
pub const BUDGET_FACTOR: f64 = 1.25;

/// Where the program counter goes after a transition.
enum NextPc {
    Fixed(usize),
    Soft(Var),
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Replace the state by its argmax after every step.
    pub discretize_each_step: bool,
    pub record_trace: bool,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub state: ContinuousState,
    /// Program-counter distribution before the first step and after each step.
    pub trace: Vec<Vec<f64>>,
}

/// A plan bound to a machine and its slot specifications.
pub struct Executor {
    pub plan: ExecutionPlan,
    pub machine: Machine,
    pub slots: Vec<SlotSpec>,
    /// Transitions with weight at or below this are skipped (treated as identity).
    pub floor: f64,
}

impl Executor {
    pub fn new(
        program: &LoweredProgram,
        slots: Vec<SlotSpec>,
        dims: Dims,
        opts: PlanOptions,
    ) -> Result<Executor, ExecutorError> {
        let machine = Machine::new(dims, program.len())?;
        for op in &program.instructions {
            if let Opcode::Slot(id) = op {
                if slots.get(*id).is_none() {
                    return Err(ExecutorError::MissingSlot(*id));
                }
            }
        }
        let plan = ExecutionPlan::build(program, opts, dims.stack_size);
        Ok(Executor { plan, machine, slots, floor: 0.0 })
    }

    pub fn dims(&self) -> Dims {
        self.machine.dims()
    }

    /// One-hot encoding with the counter over plan positions.
    pub fn encode(&self, state: &DiscreteState) -> ContinuousState {
        let pc = self.plan.orig_to_plan[state.pc];
        ContinuousState {
            mem: Memory::encode(self.dims(), state),
            pc: Var::constant(Tensor::one_hot(self.plan.len(), pc)),
        }
    }

    /// Argmax reading; the counter maps back to the first instruction of the
    /// most likely transition.
    pub fn decode(&self, state: &ContinuousState) -> DiscreteState {
        let k = state.pc.value().argmax();
        state.mem.decode(self.plan.transitions[k].span().start)
    }

    fn map(&self, index: usize) -> usize {
        self.plan.orig_to_plan[index]
    }

    fn next_pc(&self, control: &Control, index: usize) -> Result<NextPc, ExecutorError> {
        let map = |i: usize| self.map(i);
        Ok(match control {
            Control::Next => NextPc::Fixed(map(index + 1)),
            Control::Jump(t) => NextPc::Fixed(map(*t)),
            Control::Halt => NextPc::Fixed(map(index)),
            _ => NextPc::Soft(self.machine.next_pc(control, index, self.plan.len(), self.plan.halt, &map)?),
        })
    }

    fn run_ops(&self, ops: &[Opcode], mem: &Memory) -> Result<Memory, ExecutorError> {
        let mut m = mem.clone();
        for &op in ops {
            m = self.machine.apply_word(op, 0, &m)?.0;
        }
        Ok(m)
    }

    /// Successor memory and counter of transition `k` alone.
    fn transition(&self, k: usize, tape: &Tape, mem: &Memory) -> Result<(Memory, NextPc), ExecutorError> {
        Ok(match &self.plan.transitions[k] {
            Transition::Primitive { index, op } => {
                let (m, control) = self.machine.apply_word(*op, *index, mem)?;
                (m, self.next_pc(&control, *index)?)
            }
            Transition::Slot { index, slot } => {
                let spec = self.slots.get(*slot).ok_or(ExecutorError::MissingSlot(*slot))?;
                (apply_slot(spec, &self.machine, tape, mem)?, NextPc::Fixed(self.map(index + 1)))
            }
            Transition::Collapsed { span, block } => {
                (block.apply(&self.machine, mem)?, NextPc::Fixed(self.map(span.end)))
            }
            Transition::InterpolatedIf { region, then_ops, else_ops } => {
                let x = read(&mem.data, &mem.data_ptr)?;
                let popped = Memory { data_ptr: self.machine.dec_ptr(&mem.data_ptr)?, ..mem.clone() };
                let then_m = self.run_ops(then_ops, &popped)?;
                let else_m = self.run_ops(else_ops, &popped)?;
                // [P(nonzero), P(zero)] selects [then, else].
                let w = Var::two_point(&x.element(0)?, 1, 0, 2)?;
                (mix_memories(&w, &popped, &[then_m, else_m])?, NextPc::Fixed(self.map(region.end)))
            }
            Transition::Halt { .. } => (mem.clone(), NextPc::Fixed(k)),
        })
    }

    fn check(&self, s: ContinuousState, step: usize) -> Result<ContinuousState, ExecutorError> {
        if s.is_finite() {
            Ok(s)
        } else {
            Err(ExecutorError::NonFinite { step })
        }
    }

    /// `S' = Σ_i c_i w_i(S)` over plan transitions.
    pub fn rnn_step(&self, tape: &Tape, s: &ContinuousState, step: usize) -> Result<ContinuousState, ExecutorError> {
        let n = self.plan.len();
        let c = s.pc.data();
        if !s.pc.requires_grad() {
            if let Some(k) = one_hot_index(c) {
                let (mem, next) = self.transition(k, tape, &s.mem)?;
                let pc = match next {
                    NextPc::Fixed(t) => Var::constant(Tensor::one_hot(n, t)),
                    NextPc::Soft(p) => p,
                };
                return self.check(ContinuousState { mem, pc }, step);
            }
        }
        let mut items = Vec::with_capacity(n);
        let mut fixed = Vec::new();
        let mut soft = Vec::new();
        for (k, &ck) in c.iter().enumerate() {
            if ck <= self.floor {
                items.push(s.mem.clone());
                fixed.push((k, k));
                continue;
            }
            let (m, next) = self.transition(k, tape, &s.mem)?;
            items.push(m);
            match next {
                NextPc::Fixed(t) => fixed.push((k, t)),
                NextPc::Soft(p) => soft.push((k, p)),
            }
        }
        let mem = mix_memories(&s.pc, &s.mem, &items)?;
        let mut pc = s.pc.scatter(Rc::from(fixed), n)?;
        if !soft.is_empty() {
            pc = pc.add(&Var::mix(&s.pc, None, &soft)?)?;
        }
        self.check(ContinuousState { mem, pc }, step)
    }

    /// Apply `rnn_step` exactly `steps` times.
    pub fn run(
        &self,
        tape: &Tape,
        s0: &ContinuousState,
        steps: usize,
        opts: RunOptions,
    ) -> Result<RunResult, ExecutorError> {
        let mut s = s0.clone();
        let mut trace = Vec::new();
        if opts.record_trace {
            trace.push(s.pc.data().to_vec());
        }
        for t in 0..steps {
            s = self.rnn_step(tape, &s, t)?;
            if opts.discretize_each_step {
                s = discretize(&s);
            }
            if opts.record_trace {
                trace.push(s.pc.data().to_vec());
            }
        }
        Ok(RunResult { state: s, trace })
    }

    /// Number of plan transitions a discrete run from `initial` executes.
    pub fn plan_steps(
        &self,
        program: &LoweredProgram,
        initial: &DiscreteState,
        max_steps: usize,
        oracle: Option<&dyn SlotOracle>,
    ) -> Result<usize, ExecutorError> {
        let mut executed = Vec::new();
        run_discrete_with(program, initial.clone(), self.dims(), max_steps, oracle, |pc, _| executed.push(pc))?;
        Ok(self.plan.count_steps(&executed))
    }

    /// Budget of `ceil(1.25 × longest plan execution)` over `instances`.
    pub fn budget(
        &self,
        program: &LoweredProgram,
        instances: &[DiscreteState],
        max_steps: usize,
        oracle: Option<&dyn SlotOracle>,
    ) -> Result<StepBudget, ExecutorError> {
        let mut longest = 0;
        for s in instances {
            longest = longest.max(self.plan_steps(program, s, max_steps, oracle)?);
        }
        Ok(StepBudget { max_steps: (longest as f64 * BUDGET_FACTOR).ceil() as usize, halt_index: self.plan.halt })
    }
}

fn one_hot_index(c: &[f64]) -> Option<usize> {
    let k = argmax(c);
    (c[k] == 1.0 && c.iter().enumerate().all(|(i, &x)| i == k || x == 0.0)).then_some(k)
}

fn hard(t: &Tensor) -> Tensor {
    match t.shape() {
        Shape::Matrix(r, cols) => {
            let mut out = vec![0.0; r * cols];
            for i in 0..r {
                out[i * cols + argmax(t.row(i))] = 1.0;
            }
            Tensor::matrix(r, cols, out)
        }
        _ => Tensor::one_hot(t.len(), t.argmax()),
    }
}

/// Replace every distribution by the one-hot at its argmax (lowest index on ties).
pub fn discretize(s: &ContinuousState) -> ContinuousState {
    let h = |v: &Var| Var::constant(hard(v.value()));
    ContinuousState {
        mem: Memory {
            data: h(&s.mem.data),
            data_ptr: h(&s.mem.data_ptr),
            ret: h(&s.mem.ret),
            ret_ptr: h(&s.mem.ret_ptr),
            heap: h(&s.mem.heap),
        },
        pc: h(&s.pc),
    }
}

/// CSV with a header `step,c0,...` and one row per recorded step.
pub fn trace_csv(trace: &[Vec<f64>]) -> String {
    let width = trace.first().map_or(0, Vec::len);
    let mut s = String::from("step");
    for i in 0..width {
        s.push_str(&format!(",c{i}"));
    }
    s.push('\n');
    for (t, row) in trace.iter().enumerate() {
        s.push_str(&t.to_string());
        for x in row {
            s.push_str(&format!(",{x}"));
        }
        s.push('\n');
    }
    s
}

pub fn write_trace(path: &Path, trace: &[Vec<f64>]) -> std::io::Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(trace_csv(trace).as_bytes())
}
