//! Hand-written discrete behaviour for the slots of the bundled sketches.

use crate::forth::{Dims, DiscreteState, FaultKind, SlotOracle};

type SlotFn = fn(&mut DiscreteState, Dims) -> Result<(), FaultKind>;

/// The intended discrete semantics of every slot in one sketch.
#[derive(Clone)]
pub struct HandSlots {
    slots: Vec<SlotFn>,
}

fn top(s: &DiscreteState, depth: usize) -> Result<usize, FaultKind> {
    s.data.len().checked_sub(depth + 1).map(|i| s.data[i]).ok_or(FaultKind::DataUnderflow)
}

fn set_top(s: &mut DiscreteState, depth: usize, x: usize) -> Result<(), FaultKind> {
    let i = s.data.len().checked_sub(depth + 1).ok_or(FaultKind::DataUnderflow)?;
    s.data[i] = x;
    Ok(())
}

fn push(s: &mut DiscreteState, x: usize, dims: Dims) -> Result<(), FaultKind> {
    if s.data.len() >= dims.capacity() {
        return Err(FaultKind::DataOverflow);
    }
    s.data.push(x);
    Ok(())
}

/// `OVER OVER < IF SWAP THEN`
fn compare_swap(s: &mut DiscreteState, _: Dims) -> Result<(), FaultKind> {
    let (tos, nos) = (top(s, 0)?, top(s, 1)?);
    if nos < tos {
        set_top(s, 0, nos)?;
        set_top(s, 1, tos)?;
    }
    Ok(())
}

/// `OVER OVER < IF SWAP THEN R> SWAP >R`
fn permute_step(s: &mut DiscreteState, _: Dims) -> Result<(), FaultKind> {
    let (tos, nos) = (top(s, 0)?, top(s, 1)?);
    let r = *s.ret.last().ok_or(FaultKind::ReturnUnderflow)?;
    set_top(s, 1, tos.max(nos))?;
    set_top(s, 0, r)?;
    *s.ret.last_mut().unwrap() = tos.min(nos);
    Ok(())
}

fn digit_sum(s: &DiscreteState, from: usize) -> Result<usize, FaultKind> {
    Ok(top(s, from)? + top(s, from + 1)? + top(s, from + 2)?)
}

fn push_carry(s: &mut DiscreteState, dims: Dims) -> Result<(), FaultKind> {
    let sum = digit_sum(s, 0)?;
    push(s, sum / 10, dims)
}

fn push_digit(s: &mut DiscreteState, dims: Dims) -> Result<(), FaultKind> {
    let sum = digit_sum(s, 1)?;
    push(s, sum % 10, dims)
}

/// Writes the carry to `D-2` and the digit to `D-1`.
fn manipulate_digits(s: &mut DiscreteState, _: Dims) -> Result<(), FaultKind> {
    let sum = digit_sum(s, 0)?;
    set_top(s, 1, sum % 10)?;
    set_top(s, 2, sum / 10)
}

impl HandSlots {
    /// Slot behaviour for a bundled sketch name; `None` for unknown names.
    /// Slot-free sketches get an empty table.
    pub fn for_sketch(name: &str) -> Option<HandSlots> {
        let slots: Vec<SlotFn> = match name {
            "sort-compare" => vec![compare_swap],
            "sort-permute" => vec![permute_step],
            "add-choose" => vec![push_carry, push_digit],
            "add-manipulate" => vec![manipulate_digits],
            "bubble" | "sort-reference" | "add-reference" | "halt" => vec![],
            _ => return None,
        };
        Some(HandSlots { slots })
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

impl SlotOracle for HandSlots {
    fn apply(&self, slot: usize, state: &mut DiscreteState, dims: Dims) -> Result<(), FaultKind> {
        let f = self.slots.get(slot).ok_or(FaultKind::NoSlotBehaviour(slot))?;
        f(state, dims)
    }
}
