//! Sorting and addition datasets, each example checked against the
//! discrete interpreter running the hand-written reference program.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::forth::{compile_source, run_discrete, CompileOptions, Dims, DiscreteState, LoweredProgram};
use crate::sketches;

use super::TrainingError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Sort,
    Add,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Sort => "sort",
            Task::Add => "add",
        })
    }
}

impl Task {
    pub fn reference_source(self) -> &'static str {
        match self {
            Task::Sort => sketches::SORT_REFERENCE,
            Task::Add => sketches::ADD_REFERENCE,
        }
    }

    /// Default value width: large enough for the program addresses and the
    /// length literal of the longest tested input.
    pub fn default_value_size(self) -> usize {
        match self {
            Task::Sort => 68,
            Task::Add => 40,
        }
    }

    pub fn reference(self, value_size: usize) -> Result<LoweredProgram, TrainingError> {
        Ok(compile_source(self.reference_source(), CompileOptions { value_size })?)
    }

    /// Number of input digits for a nominal sequence length. For addition
    /// the length counts both operands, so `len` digits means `len / 2` pairs.
    pub fn units(self, len: usize) -> usize {
        match self {
            Task::Sort => len,
            Task::Add => (len / 2).max(1),
        }
    }
}

/// One input/output pair. Stacks are bottom first.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
    #[serde(default)]
    pub aux: serde_json::Value,
}

impl Example {
    pub fn initial(&self, dims: Dims, entry: usize) -> DiscreteState {
        DiscreteState::new(dims, &self.input, entry)
    }
}

/// Stack size for running the reference on `input`, with headroom.
pub fn stack_size_for(task: Task, input_len: usize) -> usize {
    match task {
        // Data: sequence, length and a copy; return: two cells per recursion level.
        Task::Sort => 2 * input_len + 6,
        // Return: result digit and return address per pair.
        Task::Add => input_len + 8,
    }
}

fn validate(task: Task, program: &LoweredProgram, v: usize, ex: &Example) -> Result<(), TrainingError> {
    let dims = Dims::new(stack_size_for(task, ex.input.len()), v);
    let out = run_discrete(program, ex.initial(dims, program.entry), dims, 1_000_000, None)?;
    if out.state.data != ex.target {
        return Err(TrainingError::Oracle(format!(
            "{task} example {:?}: reference gives {:?}, generator gave {:?}",
            ex.input, out.state.data, ex.target
        )));
    }
    Ok(())
}

/// Uniform random digit sequences of length `len`; input is the sequence
/// followed by its length, target the sorted stack (largest at the bottom).
pub fn gen_sort_dataset(len: usize, count: usize, seed: u64, value_size: usize) -> Result<Vec<Example>, TrainingError> {
    if len == 0 || len >= value_size {
        return Err(TrainingError::Config(format!("sort length {len} must be in 1..{value_size}")));
    }
    let program = Task::Sort.reference(value_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    draw_distinct(&mut rng, count, &vec![10; len])
        .into_iter()
        .map(|seq| {
            let mut target = seq.clone();
            target.sort_unstable_by(|a, b| b.cmp(a));
            let mut input = seq.clone();
            input.push(len);
            let ex = Example { input, target, aux: serde_json::json!({ "sequence": seq }) };
            validate(Task::Sort, &program, value_size, &ex)?;
            Ok(ex)
        })
        .collect()
}

/// `count` uniform draws from the mixed-radix space `radices` without
/// repeats until the space is exhausted, after which it is drawn through again.
fn draw_distinct(rng: &mut ChaCha8Rng, count: usize, radices: &[usize]) -> Vec<Vec<usize>> {
    let space: f64 = radices.iter().map(|&r| r as f64).product();
    if space > 4.0 * count as f64 {
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let x: Vec<usize> = radices.iter().map(|&r| rng.random_range(0..r)).collect();
            if seen.insert(x.clone()) {
                out.push(x);
            }
        }
        return out;
    }
    let space = space as usize;
    let mut all: Vec<usize> = (0..space).collect();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        all.shuffle(rng);
        for &code in all.iter().take(count - out.len()) {
            let mut c = code;
            let x = radices
                .iter()
                .map(|&r| {
                    let d = c % r;
                    c /= r;
                    d
                })
                .collect();
            out.push(x);
        }
    }
    out
}

/// Digits of `x`, most significant first, padded to `n`.
fn digits(mut x: u128, n: usize) -> Vec<usize> {
    let mut d = vec![0; n];
    for slot in d.iter_mut().rev() {
        *slot = (x % 10) as usize;
        x /= 10;
    }
    d
}

fn to_number(ds: &[usize]) -> u128 {
    ds.iter().fold(0, |acc, &d| acc * 10 + d as u128)
}

/// Addition of two `n`-digit numbers. Input is `a1 b1 .. an bn carry n`
/// with the most significant pair deepest; target is the final carry
/// followed by the `n` result digits, most significant first.
pub fn gen_add_dataset(n: usize, count: usize, seed: u64, value_size: usize) -> Result<Vec<Example>, TrainingError> {
    if n == 0 || n >= value_size || n > 36 {
        return Err(TrainingError::Config(format!("digit count {n} must be in 1..{}", value_size.min(37))));
    }
    let program = Task::Add.reference(value_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut radices = vec![10; 2 * n];
    radices.push(2);
    let mut draws = draw_distinct(&mut rng, count, &radices);
    cover_digit_triples(&mut rng, &mut draws, n);
    draws
        .into_iter()
        .map(|d| {
            let ex = add_example(&d[..n], &d[n..2 * n], d[2 * n]);
            validate(Task::Add, &program, value_size, &ex)?;
            Ok(ex)
        })
        .collect()
}

/// Each column of an addition sees one (a, b, carry-in) triple. Where the
/// draws miss a triple, rewrite the least significant column of an example
/// whose carry-out stays the same and whose old triple occurs elsewhere.
fn cover_digit_triples(rng: &mut ChaCha8Rng, draws: &mut [Vec<usize>], n: usize) {
    let columns = |d: &[usize]| {
        let mut c = d[2 * n];
        let mut out = Vec::with_capacity(n);
        for i in (0..n).rev() {
            let (a, b) = (d[i], d[n + i]);
            out.push((a, b, c));
            c = (a + b + c) / 10;
        }
        out
    };
    let mut counts: HashMap<(usize, usize, usize), usize> = HashMap::new();
    for d in draws.iter() {
        for t in columns(d) {
            *counts.entry(t).or_default() += 1;
        }
    }
    let mut present: HashSet<Vec<usize>> = draws.iter().cloned().collect();
    for a in 0..10 {
        for b in 0..10 {
            for c in 0..2 {
                if counts.contains_key(&(a, b, c)) {
                    continue;
                }
                let rewrite = |d: &[usize]| {
                    let mut e = d.to_vec();
                    e[n - 1] = a;
                    e[2 * n - 1] = b;
                    e[2 * n] = c;
                    e
                };
                let candidates: Vec<usize> = (0..draws.len())
                    .filter(|&k| {
                        let d = &draws[k];
                        let old = (d[n - 1], d[2 * n - 1], d[2 * n]);
                        counts[&old] > 1
                            && (old.0 + old.1 + old.2) / 10 == (a + b + c) / 10
                            && !present.contains(&rewrite(d))
                    })
                    .collect();
                let Some(&k) = candidates.get(rng.random_range(0..candidates.len().max(1))) else {
                    continue;
                };
                let d = &draws[k];
                *counts.get_mut(&(d[n - 1], d[2 * n - 1], d[2 * n])).expect("counted") -= 1;
                counts.insert((a, b, c), 1);
                present.remove(d);
                draws[k] = rewrite(d);
                present.insert(draws[k].clone());
            }
        }
    }
}

/// Build an addition example from most-significant-first digits.
pub fn add_example(a: &[usize], b: &[usize], carry: usize) -> Example {
    let n = a.len();
    let sum = to_number(a) + to_number(b) + carry as u128;
    let target = digits(sum, n + 1);
    let mut input: Vec<usize> = a.iter().zip(b).flat_map(|(&x, &y)| [x, y]).collect();
    input.push(carry);
    input.push(n);
    Example { input, target, aux: serde_json::json!({ "a": a, "b": b, "carry": carry }) }
}

pub fn generate(
    task: Task,
    len: usize,
    count: usize,
    seed: u64,
    value_size: usize,
) -> Result<Vec<Example>, TrainingError> {
    match task {
        Task::Sort => gen_sort_dataset(len, count, seed, value_size),
        Task::Add => gen_add_dataset(task.units(len), count, seed, value_size),
    }
}

pub fn write_jsonl(path: &Path, examples: &[Example]) -> Result<(), TrainingError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for ex in examples {
        serde_json::to_writer(&mut f, ex)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Example>, TrainingError> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
