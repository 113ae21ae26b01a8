use crate::autodiff::{argmax, Shape, Tensor, Var};
use crate::forth::{Dims, DiscreteState};

/// Stacks and heap of the soft machine.
///
/// `data` and `ret` are `l×v`, `heap` is `v×v` (one row per address), the
/// pointers are distributions over the `l` rows. An empty stack has its
/// pointer on row `l-1`; the element at depth `k` (1 = bottom) sits on row `k-1`.
#[derive(Clone, Debug)]
pub struct Memory {
    pub data: Var,
    pub data_ptr: Var,
    pub ret: Var,
    pub ret_ptr: Var,
    pub heap: Var,
}

/// Full soft state including the program-counter distribution.
#[derive(Clone, Debug)]
pub struct ContinuousState {
    pub mem: Memory,
    pub pc: Var,
}

fn stack_tensor(dims: Dims, items: &[usize]) -> Tensor {
    let (l, v) = (dims.stack_size, dims.value_size);
    let mut data = vec![0.0; l * v];
    for row in 0..l {
        let x = items.get(row).copied().unwrap_or(0);
        data[row * v + x] = 1.0;
    }
    Tensor::matrix(l, v, data)
}

fn pointer_tensor(l: usize, depth: usize) -> Tensor {
    Tensor::one_hot(l, (depth + l - 1) % l)
}

fn rows_argmax(t: &Tensor) -> Vec<usize> {
    (0..t.rows()).map(|i| argmax(t.row(i))).collect()
}

impl Memory {
    /// One-hot encoding of a discrete state (stack items and heap cells).
    pub fn encode(dims: Dims, state: &DiscreteState) -> Memory {
        let v = dims.value_size;
        let l = dims.stack_size;
        assert!(state.data.len() < l && state.ret.len() < l, "stack deeper than l-1");
        let mut heap = vec![0.0; v * v];
        for a in 0..v {
            heap[a * v + state.heap.get(a).copied().unwrap_or(0)] = 1.0;
        }
        Memory {
            data: Var::constant(stack_tensor(dims, &state.data)),
            data_ptr: Var::constant(pointer_tensor(l, state.data.len())),
            ret: Var::constant(stack_tensor(dims, &state.ret)),
            ret_ptr: Var::constant(pointer_tensor(l, state.ret.len())),
            heap: Var::constant(Tensor::matrix(v, v, heap)),
        }
    }

    pub fn dims(&self) -> Dims {
        match self.data.shape() {
            Shape::Matrix(l, v) => Dims { stack_size: l, value_size: v },
            s => panic!("data memory has shape {s}"),
        }
    }

    pub fn components(&self) -> [&Var; 5] {
        [&self.data, &self.data_ptr, &self.ret, &self.ret_ptr, &self.heap]
    }

    pub fn is_finite(&self) -> bool {
        self.components().iter().all(|c| c.value().is_finite())
    }

    /// Data-stack depth implied by the argmax of the pointer.
    pub fn data_depth(&self) -> usize {
        let l = self.dims().stack_size;
        (self.data_ptr.value().argmax() + 1) % l
    }

    pub fn ret_depth(&self) -> usize {
        let l = self.dims().stack_size;
        (self.ret_ptr.value().argmax() + 1) % l
    }

    /// Argmax reading of the stacks and heap.
    pub fn decode(&self, pc: usize) -> DiscreteState {
        let d = rows_argmax(self.data.value());
        let r = rows_argmax(self.ret.value());
        DiscreteState {
            data: d[..self.data_depth()].to_vec(),
            ret: r[..self.ret_depth()].to_vec(),
            heap: rows_argmax(self.heap.value()),
            pc,
        }
    }

    pub fn max_abs_diff(&self, other: &Memory) -> f64 {
        self.components()
            .iter()
            .zip(other.components())
            .map(|(a, b)| a.value().max_abs_diff(b.value()))
            .fold(0.0, f64::max)
    }

    pub fn detach(&self) -> Memory {
        Memory {
            data: self.data.detach(),
            data_ptr: self.data_ptr.detach(),
            ret: self.ret.detach(),
            ret_ptr: self.ret_ptr.detach(),
            heap: self.heap.detach(),
        }
    }
}

impl ContinuousState {
    pub fn encode(dims: Dims, state: &DiscreteState, program_len: usize) -> ContinuousState {
        ContinuousState { mem: Memory::encode(dims, state), pc: Var::constant(Tensor::one_hot(program_len, state.pc)) }
    }

    pub fn decode(&self) -> DiscreteState {
        self.mem.decode(self.pc.value().argmax())
    }

    pub fn max_abs_diff(&self, other: &ContinuousState) -> f64 {
        self.mem.max_abs_diff(&other.mem).max(self.pc.value().max_abs_diff(other.pc.value()))
    }

    pub fn is_finite(&self) -> bool {
        self.mem.is_finite() && self.pc.value().is_finite()
    }

    pub fn detach(&self) -> ContinuousState {
        ContinuousState { mem: self.mem.detach(), pc: self.pc.detach() }
    }
}
