//! Symbolic execution of straight-line primitive runs.
//!
//! A run is executed once on a symbolic machine whose cells are expressions
//! over the initial state. The result is the set of rows that were written
//! (including rows left stale above the final pointer, as the word-by-word
//! machine leaves them) plus the pointer movement, which together form a
//! single transition.

use std::collections::BTreeMap;

use crate::autodiff::Var;
use crate::forth::Opcode;
use crate::machine::{read, write, Machine, MachineError, Memory};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Expr {
    /// Initial data-stack row at an offset from the initial pointer.
    DataCell(i64),
    RetCell(i64),
    Lit(usize),
    /// `1+` / `1-` applied to an expression.
    Unary(Opcode, usize),
    /// Arithmetic word applied to `(nos, tos)`.
    Binary(Opcode, usize, usize),
    /// `>` or `=` applied to `(nos, tos)`.
    Compare(Opcode, usize, usize),
    /// Heap row at address expression, after the first `version` stores.
    HeapRead(usize, usize),
}

/// Effect of a collapsed run.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub exprs: Vec<Expr>,
    /// Final data rows: offset from the initial pointer to expression.
    pub data: BTreeMap<i64, usize>,
    pub ret: BTreeMap<i64, usize>,
    /// `(address, value)` expressions in store order.
    pub heap_writes: Vec<(usize, usize)>,
    pub data_delta: i64,
    pub ret_delta: i64,
}

struct Sym {
    exprs: Vec<Expr>,
    data: BTreeMap<i64, usize>,
    ret: BTreeMap<i64, usize>,
    heap_writes: Vec<(usize, usize)>,
    d: i64,
    r: i64,
    lo: i64,
    hi: i64,
}

impl Sym {
    fn node(&mut self, e: Expr) -> usize {
        self.exprs.push(e);
        self.exprs.len() - 1
    }

    fn touch(&mut self, off: i64) {
        self.lo = self.lo.min(off);
        self.hi = self.hi.max(off);
    }

    fn get_d(&mut self, off: i64) -> usize {
        self.touch(off);
        match self.data.get(&off) {
            Some(&e) => e,
            None => self.node(Expr::DataCell(off)),
        }
    }

    fn get_r(&mut self, off: i64) -> usize {
        self.touch(off);
        match self.ret.get(&off) {
            Some(&e) => e,
            None => self.node(Expr::RetCell(off)),
        }
    }

    fn set_d(&mut self, off: i64, e: usize) {
        self.touch(off);
        self.data.insert(off, e);
    }

    fn set_r(&mut self, off: i64, e: usize) {
        self.touch(off);
        self.ret.insert(off, e);
    }

    fn push_d(&mut self, e: usize) {
        self.d += 1;
        self.set_d(self.d, e);
    }

    fn step(&mut self, op: Opcode) -> Option<()> {
        let d = self.d;
        match op {
            Opcode::Lit(k) => {
                let e = self.node(Expr::Lit(k));
                self.push_d(e);
            }
            Opcode::Inc | Opcode::Dec => {
                let x = self.get_d(d);
                let e = self.node(Expr::Unary(op, x));
                self.set_d(d, e);
            }
            Opcode::Dup => {
                let x = self.get_d(d);
                self.push_d(x);
            }
            Opcode::Over => {
                let x = self.get_d(d - 1);
                self.push_d(x);
            }
            Opcode::Swap => {
                let (x, y) = (self.get_d(d), self.get_d(d - 1));
                self.set_d(d, y);
                self.set_d(d - 1, x);
            }
            Opcode::Drop => self.d -= 1,
            Opcode::Add | Opcode::Sub | Opcode::Mul | Opcode::Div => {
                let (a, b) = (self.get_d(d - 1), self.get_d(d));
                let e = self.node(Expr::Binary(op, a, b));
                self.set_d(d - 1, e);
                self.d -= 1;
            }
            Opcode::Gt | Opcode::Eq => {
                let (a, b) = (self.get_d(d - 1), self.get_d(d));
                let e = self.node(Expr::Compare(op, a, b));
                self.set_d(d - 1, e);
                self.d -= 1;
            }
            Opcode::Lt => {
                self.step(Opcode::Swap)?;
                self.step(Opcode::Gt)?;
            }
            Opcode::Fetch => {
                let a = self.get_d(d);
                let e = self.node(Expr::HeapRead(a, self.heap_writes.len()));
                self.set_d(d, e);
            }
            Opcode::Store => {
                let (a, x) = (self.get_d(d), self.get_d(d - 1));
                self.heap_writes.push((a, x));
                self.d -= 2;
            }
            Opcode::ToR => {
                let x = self.get_d(d);
                self.d -= 1;
                self.r += 1;
                self.set_r(self.r, x);
            }
            Opcode::FromR => {
                let x = self.get_r(self.r);
                self.r -= 1;
                self.push_d(x);
            }
            Opcode::RFetch => {
                let x = self.get_r(self.r);
                self.push_d(x);
            }
            _ => return None,
        }
        self.touch(self.d);
        self.touch(self.r);
        Some(())
    }
}

/// Symbolically execute `ops`; `None` if a control word appears or the
/// touched offsets span `stack_size` rows or more.
pub fn collapse(ops: &[Opcode], stack_size: usize) -> Option<Block> {
    let mut s = Sym {
        exprs: Vec::new(),
        data: BTreeMap::new(),
        ret: BTreeMap::new(),
        heap_writes: Vec::new(),
        d: 0,
        r: 0,
        lo: 0,
        hi: 0,
    };
    for &op in ops {
        s.step(op)?;
    }
    if (s.hi - s.lo + 1) as usize >= stack_size {
        return None;
    }
    Some(Block {
        exprs: s.exprs,
        data: s.data,
        ret: s.ret,
        heap_writes: s.heap_writes,
        data_delta: s.d,
        ret_delta: s.r,
    })
}

fn shift(machine: &Machine, p: &Var, off: i64) -> Result<Var, MachineError> {
    let mut q = p.clone();
    for _ in 0..off.unsigned_abs() {
        q = if off > 0 { machine.inc_ptr(&q)? } else { machine.dec_ptr(&q)? };
    }
    Ok(q)
}

impl Block {
    /// Apply the collapsed effect to soft memory.
    pub fn apply(&self, machine: &Machine, mem: &Memory) -> Result<Memory, MachineError> {
        let mut heaps = vec![mem.heap.clone()];
        let mut vals: Vec<Option<Var>> = vec![None; self.exprs.len()];
        let mut dptr: BTreeMap<i64, Var> = BTreeMap::new();
        let mut rptr: BTreeMap<i64, Var> = BTreeMap::new();
        let ptr = |cache: &mut BTreeMap<i64, Var>, base: &Var, off: i64| -> Result<Var, MachineError> {
            if let Some(p) = cache.get(&off) {
                return Ok(p.clone());
            }
            let p = shift(machine, base, off)?;
            cache.insert(off, p.clone());
            Ok(p)
        };
        // Expressions only refer to earlier ones, and heap versions only grow
        // along the arena, so one forward sweep evaluates everything.
        let mut store_iter = self.heap_writes.iter().enumerate().peekable();
        for (i, e) in self.exprs.iter().enumerate() {
            let get = |k: usize| vals[k].clone().expect("operands precede their uses");
            let v = match *e {
                Expr::DataCell(off) => read(&mem.data, &ptr(&mut dptr, &mem.data_ptr, off)?)?,
                Expr::RetCell(off) => read(&mem.ret, &ptr(&mut rptr, &mem.ret_ptr, off)?)?,
                Expr::Lit(k) => machine.literal(k),
                Expr::Unary(Opcode::Inc, x) => machine.inc_val(&get(x))?,
                Expr::Unary(_, x) => machine.dec_val(&get(x))?,
                Expr::Binary(op, a, b) => machine.arith(op, &get(a), &get(b))?,
                Expr::Compare(Opcode::Eq, a, b) => machine.truth(&get(a).dot(&get(b))?)?,
                Expr::Compare(_, a, b) => machine.truth(&machine.greater(&get(a), &get(b))?)?,
                Expr::HeapRead(a, version) => {
                    while heaps.len() <= version {
                        let (_, &(addr, x)) = store_iter.next().expect("store precedes read");
                        let h = write(heaps.last().unwrap(), &get(x), &get(addr))?;
                        heaps.push(h);
                    }
                    read(&heaps[version], &get(a))?
                }
            };
            vals[i] = Some(v);
        }
        let get = |k: usize| vals[k].clone().expect("evaluated");
        for (_, &(addr, x)) in store_iter {
            let h = write(heaps.last().unwrap(), &get(x), &get(addr))?;
            heaps.push(h);
        }
        let mut out = mem.clone();
        out.heap = heaps.pop().unwrap();
        for (&off, &e) in &self.data {
            out.data = write(&out.data, &get(e), &ptr(&mut dptr, &mem.data_ptr, off)?)?;
        }
        for (&off, &e) in &self.ret {
            out.ret = write(&out.ret, &get(e), &ptr(&mut rptr, &mem.ret_ptr, off)?)?;
        }
        out.data_ptr = ptr(&mut dptr, &mem.data_ptr, self.data_delta)?;
        out.ret_ptr = ptr(&mut rptr, &mem.ret_ptr, self.ret_delta)?;
        Ok(out)
    }
}
