//! The differentiable Forth machine.
//!
//! Every primitive is a function from soft memory to soft memory built from
//! reads, erase-then-add writes, circular pointer shifts and bilinear
//! operation tables. Control words additionally return how the program
//! counter should move; combining that with the current position is left
//! to the executor.

mod state;

use std::rc::Rc;

pub use state::{ContinuousState, Memory};

use crate::autodiff::{AutodiffError, Tensor, Var};
use crate::forth::{binary, Dims, Opcode};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MachineError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("program of {program_len} instructions does not fit value width {value_size}")]
    AddressWidth { program_len: usize, value_size: usize },
    #[error("{0} has no continuous primitive semantics")]
    NotPrimitive(Opcode),
}

/// How the program counter moves after a word.
#[derive(Clone, Debug)]
pub enum Control {
    Next,
    Jump(usize),
    /// Go to `target` with probability `p_zero`, otherwise fall through.
    Branch0 {
        p_zero: Var,
        target: usize,
    },
    /// Distribution over return addresses (length `v`).
    Return(Var),
    Halt,
}

/// Constant tables shared by all words for fixed dimensions.
pub struct Machine {
    dims: Dims,
    program_len: usize,
    ptr_inc: Rc<[(usize, usize)]>,
    ptr_dec: Rc<[(usize, usize)]>,
    val_inc: Rc<[(usize, usize)]>,
    val_dec: Rc<[(usize, usize)]>,
    tables: [Rc<[usize]>; 4],
    index_weights: Rc<[f64]>,
    literals: Vec<Var>,
}

fn shift_pairs(n: usize, up: bool) -> Rc<[(usize, usize)]> {
    (0..n).map(|i| (i, if up { (i + 1) % n } else { (i + n - 1) % n })).collect()
}

/// Circular shift matrix: entry `(i, j)` is 1 iff `i ± 1 ≡ j (mod n)`.
pub fn shift_matrix(n: usize, up: bool) -> Tensor {
    let mut t = Tensor::zeros(crate::autodiff::Shape::Matrix(n, n));
    for (i, j) in shift_pairs(n, up).iter() {
        t.data_mut()[i * n + j] = 1.0;
    }
    t
}

/// Flattened operation tensor: `table[i*v + j] = k` with `i op j ≡ k (mod v)`.
pub fn op_table(op: Opcode, v: usize) -> Rc<[usize]> {
    (0..v * v).map(|ij| binary(op, ij / v, ij % v, v)).collect()
}

/// `min(max(0, x + 0.5), 1)`.
pub use crate::autodiff::phi_pwl;

impl Machine {
    /// `program_len` is the number of original instructions; return
    /// addresses up to it must be representable as values.
    pub fn new(dims: Dims, program_len: usize) -> Result<Machine, MachineError> {
        let v = dims.value_size;
        if program_len > v {
            return Err(MachineError::AddressWidth { program_len, value_size: v });
        }
        let l = dims.stack_size;
        Ok(Machine {
            dims,
            program_len,
            ptr_inc: shift_pairs(l, true),
            ptr_dec: shift_pairs(l, false),
            val_inc: shift_pairs(v, true),
            val_dec: shift_pairs(v, false),
            tables: [Opcode::Add, Opcode::Sub, Opcode::Mul, Opcode::Div].map(|op| op_table(op, v)),
            index_weights: (0..v).map(|i| i as f64).collect(),
            literals: (0..v).map(|k| Var::constant(Tensor::one_hot(v, k))).collect(),
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn program_len(&self) -> usize {
        self.program_len
    }

    pub fn literal(&self, k: usize) -> Var {
        self.literals[k].clone()
    }

    pub fn inc_ptr(&self, p: &Var) -> Result<Var, MachineError> {
        Ok(p.scatter(self.ptr_inc.clone(), self.dims.stack_size)?)
    }

    pub fn dec_ptr(&self, p: &Var) -> Result<Var, MachineError> {
        Ok(p.scatter(self.ptr_dec.clone(), self.dims.stack_size)?)
    }

    pub fn inc_val(&self, x: &Var) -> Result<Var, MachineError> {
        Ok(x.scatter(self.val_inc.clone(), self.dims.value_size)?)
    }

    pub fn dec_val(&self, x: &Var) -> Result<Var, MachineError> {
        Ok(x.scatter(self.val_dec.clone(), self.dims.value_size)?)
    }

    /// Expected index `Σ i·x_i` of a value distribution.
    pub fn expectation(&self, x: &Var) -> Result<Var, MachineError> {
        Ok(x.dot_const(self.index_weights.clone())?)
    }

    /// `{op}(a, b) = aᵀ R^{op} b`.
    pub fn arith(&self, op: Opcode, a: &Var, b: &Var) -> Result<Var, MachineError> {
        let k = match op {
            Opcode::Add => 0,
            Opcode::Sub => 1,
            Opcode::Mul => 2,
            Opcode::Div => 3,
            other => return Err(MachineError::NotPrimitive(other)),
        };
        Ok(Var::table_op(a, b, self.tables[k].clone(), self.dims.value_size)?)
    }

    /// Soft `NOS > TOS`: `φ(E[nos] - E[tos] - 0.5)`, scalar.
    pub fn greater(&self, nos: &Var, tos: &Var) -> Result<Var, MachineError> {
        let diff = self.expectation(nos)?.sub(&self.expectation(tos)?)?;
        Ok(diff.add_scalar(-0.5).pwl())
    }

    /// Encode a truth probability as the value distribution `p·1 + (1-p)·0`.
    pub fn truth(&self, p: &Var) -> Result<Var, MachineError> {
        Ok(Var::two_point(p, 1, 0, self.dims.value_size)?)
    }

    /// Apply a primitive or control word located at original index `index`.
    pub fn apply_word(&self, op: Opcode, index: usize, s: &Memory) -> Result<(Memory, Control), MachineError> {
        let mut m = s.clone();
        let d = &s.data_ptr;
        let control = match op {
            Opcode::Lit(k) => {
                push_data(self, &mut m, &self.literal(k % self.dims.value_size))?;
                Control::Next
            }
            Opcode::Inc | Opcode::Dec => {
                let x = read(&s.data, d)?;
                let y = if op == Opcode::Inc { self.inc_val(&x)? } else { self.dec_val(&x)? };
                m.data = write(&s.data, &y, d)?;
                Control::Next
            }
            Opcode::Dup => {
                let x = read(&s.data, d)?;
                push_data(self, &mut m, &x)?;
                Control::Next
            }
            Opcode::Swap => {
                m = self.swap(s)?;
                Control::Next
            }
            Opcode::Over => {
                let y = read(&s.data, &self.dec_ptr(d)?)?;
                push_data(self, &mut m, &y)?;
                Control::Next
            }
            Opcode::Drop => {
                m.data_ptr = self.dec_ptr(d)?;
                Control::Next
            }
            Opcode::Add | Opcode::Sub | Opcode::Mul | Opcode::Div => {
                let nd = self.dec_ptr(d)?;
                let r = self.arith(op, &read(&s.data, &nd)?, &read(&s.data, d)?)?;
                m.data = write(&s.data, &r, &nd)?;
                m.data_ptr = nd;
                Control::Next
            }
            Opcode::Gt => {
                m = self.compare(s, |a, b| self.greater(a, b))?;
                Control::Next
            }
            Opcode::Lt => {
                let swapped = self.swap(s)?;
                m = self.compare(&swapped, |a, b| self.greater(a, b))?;
                Control::Next
            }
            Opcode::Eq => {
                m = self.compare(s, |a, b| Ok(a.dot(b)?))?;
                Control::Next
            }
            Opcode::Fetch => {
                let addr = read(&s.data, d)?;
                let x = read(&s.heap, &addr)?;
                m.data = write(&s.data, &x, d)?;
                Control::Next
            }
            Opcode::Store => {
                let addr = read(&s.data, d)?;
                let nd = self.dec_ptr(d)?;
                let x = read(&s.data, &nd)?;
                m.heap = write(&s.heap, &x, &addr)?;
                m.data_ptr = self.dec_ptr(&nd)?;
                Control::Next
            }
            Opcode::ToR => {
                let x = read(&s.data, d)?;
                m.data_ptr = self.dec_ptr(d)?;
                push_ret(self, &mut m, &x)?;
                Control::Next
            }
            Opcode::FromR => {
                let x = read(&s.ret, &s.ret_ptr)?;
                m.ret_ptr = self.dec_ptr(&s.ret_ptr)?;
                push_data(self, &mut m, &x)?;
                Control::Next
            }
            Opcode::RFetch => {
                let x = read(&s.ret, &s.ret_ptr)?;
                push_data(self, &mut m, &x)?;
                Control::Next
            }
            Opcode::Branch(t) => Control::Jump(t),
            Opcode::Branch0(t) => {
                let x = read(&s.data, d)?;
                m.data_ptr = self.dec_ptr(d)?;
                Control::Branch0 { p_zero: x.element(0)?, target: t }
            }
            Opcode::Call(t) => {
                let ret = index + 1;
                if ret >= self.dims.value_size {
                    return Err(MachineError::AddressWidth { program_len: ret + 1, value_size: self.dims.value_size });
                }
                push_ret(self, &mut m, &self.literal(ret))?;
                Control::Jump(t)
            }
            Opcode::Ret => {
                let x = read(&s.ret, &s.ret_ptr)?;
                m.ret_ptr = self.dec_ptr(&s.ret_ptr)?;
                Control::Return(x)
            }
            Opcode::Halt => Control::Halt,
            Opcode::Slot(_) => return Err(MachineError::NotPrimitive(op)),
        };
        Ok((m, control))
    }

    fn swap(&self, s: &Memory) -> Result<Memory, MachineError> {
        let d = &s.data_ptr;
        let nd = self.dec_ptr(d)?;
        let x = read(&s.data, d)?;
        let y = read(&s.data, &nd)?;
        let mut m = s.clone();
        m.data = write(&write(&s.data, &y, d)?, &x, &nd)?;
        Ok(m)
    }

    fn compare(&self, s: &Memory, p: impl Fn(&Var, &Var) -> Result<Var, MachineError>) -> Result<Memory, MachineError> {
        let d = &s.data_ptr;
        let nd = self.dec_ptr(d)?;
        let tos = read(&s.data, d)?;
        let nos = read(&s.data, &nd)?;
        let r = self.truth(&p(&nos, &tos)?)?;
        let mut m = s.clone();
        m.data = write(&s.data, &r, &nd)?;
        m.data_ptr = nd;
        Ok(m)
    }

    /// Program-counter distribution after `control` at original index `index`.
    ///
    /// `map` translates original instruction indices to positions in a
    /// distribution of length `len`; return addresses at or beyond the
    /// original program length go to `halt`.
    pub fn next_pc(
        &self,
        control: &Control,
        index: usize,
        len: usize,
        halt: usize,
        map: &dyn Fn(usize) -> usize,
    ) -> Result<Var, MachineError> {
        Ok(match control {
            Control::Next => Var::constant(Tensor::one_hot(len, map(index + 1))),
            Control::Jump(t) => Var::constant(Tensor::one_hot(len, map(*t))),
            Control::Halt => Var::constant(Tensor::one_hot(len, map(index))),
            Control::Branch0 { p_zero, target } => Var::two_point(p_zero, map(*target), map(index + 1), len)?,
            Control::Return(x) => {
                let pairs: Rc<[(usize, usize)]> =
                    (0..self.dims.value_size).map(|a| (a, if a < self.program_len { map(a) } else { halt })).collect();
                x.scatter(pairs, len)?
            }
        })
    }

    /// One naive transition of the unoptimized program: memory effect plus
    /// program-counter update, for a state whose counter is one-hot at `index`.
    pub fn step_at(&self, op: Opcode, index: usize, s: &ContinuousState) -> Result<ContinuousState, MachineError> {
        let (mem, control) = self.apply_word(op, index, &s.mem)?;
        let halt = self.program_len - 1;
        let pc = self.next_pc(&control, index, self.program_len, halt, &|i| i)?;
        Ok(ContinuousState { mem, pc })
    }
}

/// `read_M(a) = aᵀ M`.
pub fn read(m: &Var, a: &Var) -> Result<Var, MachineError> {
    Ok(a.vecmat(m)?)
}

/// `M ← M − (a 1ᵀ) ⊙ M + a xᵀ`.
pub fn write(m: &Var, x: &Var, a: &Var) -> Result<Var, MachineError> {
    Ok(Var::write(m, x, a)?)
}

/// Increment the pointer, then write `x` at the new position.
pub fn push(machine: &Machine, m: &Var, p: &Var, x: &Var) -> Result<(Var, Var), MachineError> {
    let np = machine.inc_ptr(p)?;
    Ok((write(m, x, &np)?, np))
}

/// Read at the pointer, then decrement it.
pub fn pop(machine: &Machine, m: &Var, p: &Var) -> Result<(Var, Var), MachineError> {
    Ok((read(m, p)?, machine.dec_ptr(p)?))
}

fn push_data(machine: &Machine, m: &mut Memory, x: &Var) -> Result<(), MachineError> {
    let (data, ptr) = push(machine, &m.data, &m.data_ptr, x)?;
    m.data = data;
    m.data_ptr = ptr;
    Ok(())
}

fn push_ret(machine: &Machine, m: &mut Memory, x: &Var) -> Result<(), MachineError> {
    let (ret, ptr) = push(machine, &m.ret, &m.ret_ptr, x)?;
    m.ret = ret;
    m.ret_ptr = ptr;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forth::DiscreteState;

    const DIMS: Dims = Dims { stack_size: 6, value_size: 10 };

    fn mem(data: &[usize]) -> Memory {
        Memory::encode(DIMS, &DiscreteState::new(DIMS, data, 0))
    }

    fn run(op: Opcode, data: &[usize]) -> Vec<usize> {
        let m = Machine::new(DIMS, 10).unwrap();
        let (out, _) = m.apply_word(op, 0, &mem(data)).unwrap();
        out.decode(0).data
    }

    #[test]
    fn shift_matrices_are_inverse() {
        for n in [1, 2, 5] {
            let a = Var::constant(shift_matrix(n, true));
            let b = Var::constant(shift_matrix(n, false));
            assert_eq!(a.matmul(&b).unwrap().value(), &Tensor::identity(n));
        }
    }

    #[test]
    fn op_table_has_one_k_per_pair() {
        let t = op_table(Opcode::Add, 10);
        assert_eq!(t.len(), 100);
        assert_eq!(t[3 * 10 + 4], 7);
        assert_eq!(t[7 * 10 + 5], 2);
        let d = op_table(Opcode::Div, 10);
        assert_eq!(d[7 * 10], 0);
        assert_eq!(d[7 * 10 + 2], 3);
    }

    #[test]
    fn arithmetic_words() {
        assert_eq!(run(Opcode::Add, &[3, 4]), [7]);
        assert_eq!(run(Opcode::Add, &[7, 5]), [2]);
        assert_eq!(run(Opcode::Sub, &[3, 5]), [8]);
        assert_eq!(run(Opcode::Gt, &[7, 2]), [1]);
        assert_eq!(run(Opcode::Gt, &[2, 2]), [0]);
        assert_eq!(run(Opcode::Lt, &[2, 7]), [1]);
        assert_eq!(run(Opcode::Eq, &[4, 4]), [1]);
        assert_eq!(run(Opcode::Eq, &[4, 5]), [0]);
    }

    #[test]
    fn stack_words() {
        assert_eq!(run(Opcode::Dup, &[3]), [3, 3]);
        assert_eq!(run(Opcode::Over, &[1, 2]), [1, 2, 1]);
        assert_eq!(run(Opcode::Swap, &[1, 2]), [2, 1]);
        assert_eq!(run(Opcode::Drop, &[1, 2]), [1]);
        assert_eq!(run(Opcode::Lit(4), &[]), [4]);
    }

    #[test]
    fn read_and_write() {
        let m = Var::constant(Tensor::matrix(2, 3, vec![0., 0., 1., 0., 1., 0.]));
        let a = Var::constant(Tensor::vector(vec![0.5, 0.5]));
        assert_eq!(read(&m, &a).unwrap().data(), [0.0, 0.5, 0.5]);
        let x = Var::constant(Tensor::vector(vec![1.0, 0.0, 0.0]));
        let w = write(&m, &x, &a).unwrap();
        assert_eq!(w.data(), [0.5, 0.0, 0.5, 0.5, 0.5, 0.0]);
        let one = Var::constant(Tensor::one_hot(2, 1));
        let same = write(&m, &read(&m, &one).unwrap(), &one).unwrap();
        assert_eq!(same.value(), m.value());
    }

    #[test]
    fn push_wraps_and_pops_back() {
        let machine = Machine::new(DIMS, 10).unwrap();
        let m = mem(&[]);
        let last = Var::constant(Tensor::one_hot(6, 5));
        let x = machine.literal(7);
        let (d, p) = push(&machine, &m.data, &last, &x).unwrap();
        assert_eq!(p.value().argmax(), 0);
        let (y, p2) = pop(&machine, &d, &p).unwrap();
        assert_eq!(y.value(), x.value());
        assert_eq!(p2.value(), last.value());
    }

    #[test]
    fn pwl_values() {
        assert_eq!(phi_pwl(0.0), 0.5);
        assert_eq!(phi_pwl(0.5), 1.0);
        assert_eq!(phi_pwl(-0.5), 0.0);
        assert_eq!(phi_pwl(3.0), 1.0);
    }

    #[test]
    fn call_beyond_width_is_error() {
        assert!(Machine::new(DIMS, 11).is_err());
    }
}
