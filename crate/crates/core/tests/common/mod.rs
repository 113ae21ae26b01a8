//! Program generator and agreement checks shared by the simulation suites.
#![allow(dead_code)]

use d4_core::autodiff::{Tape, Tensor};
use d4_core::executor::{discretize, Executor, PlanOptions, RunOptions, BUDGET_FACTOR};
use d4_core::forth::{run_discrete, Dims, DiscreteState, LoweredProgram};
use d4_core::machine::Memory;
use d4_core::sketches;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const MAX_DEPTH: usize = 7;

/// Random structured source text that never under- or overflows.
pub struct Gen {
    pub rng: ChaCha8Rng,
    pub v: usize,
    /// Subroutines as (name, inputs consumed, net depth change).
    pub words: Vec<(String, usize, isize)>,
}

impl Gen {
    pub fn new(seed: u64, v: usize) -> Gen {
        Gen { rng: rand::SeedableRng::seed_from_u64(seed), v, words: Vec::new() }
    }

    fn pad(&mut self, out: &mut Vec<String>, from: usize, to: usize) {
        for _ in to..from {
            out.push("DROP".into());
        }
        for _ in from..to {
            out.push(self.rng.random_range(0..self.v).to_string());
        }
    }

    /// Emit a block starting at depth `d`; returns the final depth.
    fn block(&mut self, out: &mut Vec<String>, mut d: usize, len: usize, nest: usize) -> usize {
        for _ in 0..len {
            let pick = self.rng.random_range(0..100);
            match pick {
                0..=11 if d < MAX_DEPTH => {
                    out.push(self.rng.random_range(0..self.v).to_string());
                    d += 1;
                }
                12..=19 if d >= 1 => out.push(["1+", "1-"][self.rng.random_range(0..2)].into()),
                20..=27 if (1..MAX_DEPTH).contains(&d) => {
                    out.push("DUP".into());
                    d += 1;
                }
                28..=33 if d >= 2 => out.push("SWAP".into()),
                34..=38 if d >= 2 && d < MAX_DEPTH => {
                    out.push("OVER".into());
                    d += 1;
                }
                39..=43 if d >= 1 => {
                    out.push("DROP".into());
                    d -= 1;
                }
                44..=55 if d >= 2 => {
                    out.push(["+", "-", "*", "/", ">", "<", "="][self.rng.random_range(0..7)].into());
                    d -= 1;
                }
                // Loop counters live in the low heap cells, so stores stay above them.
                56..=59 if d < MAX_DEPTH => {
                    out.push(format!("{} @", self.rng.random_range(6..self.v)));
                    d += 1;
                }
                60..=63 if d >= 1 => {
                    out.push(format!("{} !", self.rng.random_range(6..self.v)));
                    d -= 1;
                }
                64..=69 if d >= 1 && nest < 2 => {
                    out.push(">R".into());
                    let e = self.block(out, d - 1, 3, nest + 1);
                    out.push("R@".into());
                    out.push("DROP".into());
                    out.push("R>".into());
                    d = e + 1;
                }
                70..=79 if d >= 1 && nest < 2 => {
                    out.push("IF".into());
                    let e = self.block(out, d - 1, 3, nest + 1);
                    if self.rng.random_bool(0.5) {
                        out.push("ELSE".into());
                        let f = self.block(out, d - 1, 3, nest + 1);
                        self.pad(out, f, e);
                        d = e;
                    } else {
                        self.pad(out, e, d - 1);
                        d -= 1;
                    }
                    out.push("THEN".into());
                }
                80..=87 if nest < 2 && d + 1 < MAX_DEPTH => {
                    out.push(format!("{} 0 DO", self.rng.random_range(1..4)));
                    let e = self.block(out, d, 3, nest + 1);
                    self.pad(out, e, d);
                    out.push("LOOP".into());
                }
                88..=99 if !self.words.is_empty() => {
                    let k = self.rng.random_range(0..self.words.len());
                    let (name, need, net) = self.words[k].clone();
                    let after = d as isize + net;
                    if d >= need && after >= 0 && after as usize <= MAX_DEPTH {
                        out.push(name);
                        d = after as usize;
                    }
                }
                _ => {}
            }
        }
        d
    }

    pub fn program(&mut self) -> (String, usize) {
        self.words.clear();
        let mut src = String::new();
        for w in 0..self.rng.random_range(0..3) {
            let need = self.rng.random_range(1..3);
            let mut body = Vec::new();
            let len = self.rng.random_range(2..6);
            let e = self.block(&mut body, need, len, 1);
            let name = format!("W{w}");
            src.push_str(&format!(": {name} {} ;\n", body.join(" ")));
            self.words.push((name, need, e as isize - need as isize));
        }
        let inputs = self.rng.random_range(0..4);
        let mut main = Vec::new();
        let len = self.rng.random_range(3..14);
        self.block(&mut main, inputs, len, 0);
        src.push_str(&main.join(" "));
        src.push('\n');
        (src, inputs)
    }
}

/// Largest deviation over the live stack rows, both pointers and the heap.
/// Cells above the stack tops hold stale values by design.
pub fn live_drift(got: &Memory, want: &Memory, d: &DiscreteState) -> f64 {
    let rows = |a: &Tensor, b: &Tensor, n: usize| {
        (0..n)
            .flat_map(|k| a.row(k).iter().zip(b.row(k)).map(|(x, y)| (x - y).abs()).collect::<Vec<_>>())
            .fold(0.0, f64::max)
    };
    [
        rows(got.data.value(), want.data.value(), d.data.len()),
        rows(got.ret.value(), want.ret.value(), d.ret.len()),
        got.data_ptr.value().max_abs_diff(want.data_ptr.value()),
        got.ret_ptr.value().max_abs_diff(want.ret_ptr.value()),
        got.heap.value().max_abs_diff(want.heap.value()),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

pub fn check_agreement(p: &LoweredProgram, dims: Dims, inputs: &[Vec<usize>], opts: PlanOptions) -> f64 {
    let ex = Executor::new(p, vec![], dims, opts).unwrap();
    let mut drift: f64 = 0.0;
    for input in inputs {
        let init = DiscreteState::new(dims, input, p.entry);
        let want = run_discrete(p, init.clone(), dims, 100_000, None)
            .unwrap_or_else(|e| panic!("{e} on {input:?}\n{}", p.dump()))
            .state;
        let steps = ex.plan_steps(p, &init, 100_000, None).unwrap();
        let budget = (steps as f64 * BUDGET_FACTOR).ceil() as usize + 1;
        let out = ex.run(&Tape::new(), &ex.encode(&init), budget, RunOptions::default()).unwrap().state;
        let got = ex.decode(&discretize(&out));
        assert_eq!(got.data, want.data, "input {input:?}\n{}", p.dump());
        assert_eq!(got.ret, want.ret);
        assert_eq!(got.heap, want.heap);
        assert_eq!(got.pc, p.halt_index());
        drift = drift.max(live_drift(&out.mem, &Memory::encode(dims, &want), &want));
        let halt = Tensor::one_hot(ex.plan.len(), ex.plan.orig_to_plan[p.halt_index()]);
        drift = drift.max(out.pc.value().max_abs_diff(&halt));
    }
    drift
}

/// Sketches with every slot written out as the equivalent Forth words.
pub fn handwritten(name: &str) -> String {
    let src = sketches::by_name(name).unwrap();
    let (start, end) = (src.find('{').unwrap(), src.find('}').unwrap());
    let body = match name {
        "sort-compare" => "OVER OVER < IF SWAP THEN",
        "sort-permute" => "OVER OVER < IF SWAP THEN R> SWAP >R",
        _ => unreachable!(),
    };
    format!("{}{}{}", &src[..start], body, &src[end + 1..])
}
