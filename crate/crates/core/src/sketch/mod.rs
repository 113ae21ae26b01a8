//! Slots: `{ encoder -> decoder }` transitions with trainable parameters.
//!
//! An encoder starts from `observe` (concatenated value distributions) or
//! `static` (a trainable constant) and continues with `linear N`, `sigmoid`
//! and `tanh`. An activation written next to a `linear` stage becomes that
//! layer's nonlinearity, so `tanh -> linear 70` is the hidden layer
//! `tanh(W x + b)`. Activations with no adjacent linear stage are applied
//! elementwise where they stand. The decoder projects the latent vector to
//! its arity with its own weight and bias.

mod oracle;
mod spec;

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use oracle::HandSlots;
pub use spec::{parse_slot, permutations, Activation, ChoiceWord, Decoder, ElementRef, SlotSpec, Stage, PERMUTE_CAP};

use crate::autodiff::{AutodiffError, ParamStore, Shape, Tape, Tensor, Var};
use crate::forth::{compile_source, CompileOptions, Dims, ForthError, LoweredProgram};
use crate::machine::{read, write, Machine, MachineError, Memory};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SketchError {
    #[error("slot {slot}: {message}")]
    Parse { slot: usize, message: String },
    #[error("slot {slot}: {message}")]
    Invalid { slot: usize, message: String },
    #[error(transparent)]
    Forth(#[from] ForthError),
    #[error(transparent)]
    Machine(#[from] MachineError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// A compiled program together with its parsed slots.
#[derive(Clone, Debug)]
pub struct Sketch {
    pub program: LoweredProgram,
    pub slots: Vec<SlotSpec>,
}

impl Sketch {
    pub fn compile(source: &str, dims: Dims) -> Result<Sketch, SketchError> {
        let program = compile_source(source, CompileOptions { value_size: dims.value_size })?;
        let slots = program
            .slots
            .iter()
            .enumerate()
            .map(|(id, s)| {
                let spec = parse_slot(id, &s.body)?;
                spec.validate(dims)?;
                Ok(spec)
            })
            .collect::<Result<Vec<_>, SketchError>>()?;
        Ok(Sketch { program, slots })
    }

    pub fn init_params(&self, dims: Dims, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        for s in &self.slots {
            store.extend(init_params(s, dims, seed));
        }
        store
    }
}

#[derive(Clone, Debug)]
enum Layer {
    Linear { stage: usize, inputs: usize, outputs: usize, act: Option<Activation> },
    Act(Activation),
}

/// Encoder input width and layer list for a slot.
fn layers(spec: &SlotSpec, dims: Dims) -> (usize, Vec<Layer>) {
    let input = match &spec.stages[0] {
        Stage::Observe(refs) => refs.len() * dims.value_size,
        Stage::Static(w) => w.unwrap_or(dims.value_size),
        _ => unreachable!("validated at parse"),
    };
    let rest = &spec.stages[1..];
    let mut out = Vec::new();
    let mut width = input;
    let mut claimed = vec![false; rest.len()];
    for (k, st) in rest.iter().enumerate() {
        match st {
            Stage::Linear(n) => {
                let before = k.checked_sub(1).filter(|&j| !claimed[j] && matches!(rest[j], Stage::Act(_)));
                let after =
                    Some(k + 1).filter(|&j| before.is_none() && j < rest.len() && matches!(rest[j], Stage::Act(_)));
                let act = before.or(after).map(|j| {
                    claimed[j] = true;
                    match rest[j] {
                        Stage::Act(a) => a,
                        _ => unreachable!(),
                    }
                });
                if let Some(j) = before {
                    // Remove the standalone activation emitted for the preceding stage.
                    debug_assert_eq!(j + 1, k);
                    out.pop();
                }
                out.push(Layer::Linear { stage: k + 1, inputs: width, outputs: *n, act });
                width = *n;
            }
            Stage::Act(a) => {
                if !claimed[k] {
                    out.push(Layer::Act(*a));
                }
            }
            _ => unreachable!("validated at parse"),
        }
    }
    (input, out)
}

fn latent_width(spec: &SlotSpec, dims: Dims) -> usize {
    let (input, ls) = layers(spec, dims);
    ls.iter()
        .rev()
        .find_map(|l| match l {
            Layer::Linear { outputs, .. } => Some(*outputs),
            Layer::Act(_) => None,
        })
        .unwrap_or(input)
}

pub fn weight_name(slot: usize, stage: usize) -> String {
    format!("slot{slot}.stage{stage}.weight")
}

pub fn bias_name(slot: usize, stage: usize) -> String {
    format!("slot{slot}.stage{stage}.bias")
}

pub fn static_name(slot: usize) -> String {
    format!("slot{slot}.stage0.static")
}

pub fn decoder_weight_name(slot: usize) -> String {
    format!("slot{slot}.decoder.weight")
}

pub fn decoder_bias_name(slot: usize) -> String {
    format!("slot{slot}.decoder.bias")
}

fn glorot(rng: &mut ChaCha8Rng, inputs: usize, outputs: usize) -> Tensor {
    let s = (6.0 / (inputs + outputs) as f64).sqrt();
    Tensor::matrix(inputs, outputs, (0..inputs * outputs).map(|_| rng.random_range(-s..s)).collect())
}

/// Glorot-uniform weights (stored input×output), zero biases and statics.
/// The stream is derived from `seed` and the slot id.
pub fn init_params(spec: &SlotSpec, dims: Dims, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(spec.id as u64);
    let mut store = ParamStore::new();
    let (input, ls) = layers(spec, dims);
    if matches!(spec.stages[0], Stage::Static(_)) {
        store.insert(static_name(spec.id), Tensor::zeros(Shape::Vector(input)));
    }
    for l in &ls {
        if let Layer::Linear { stage, inputs, outputs, .. } = *l {
            store.insert(weight_name(spec.id, stage), glorot(&mut rng, inputs, outputs));
            store.insert(bias_name(spec.id, stage), Tensor::zeros(Shape::Vector(outputs)));
        }
    }
    let h = latent_width(spec, dims);
    let arity = spec.arity(dims);
    store.insert(decoder_weight_name(spec.id), glorot(&mut rng, h, arity));
    store.insert(decoder_bias_name(spec.id), Tensor::zeros(Shape::Vector(arity)));
    store
}

fn activate(x: &Var, a: Activation) -> Var {
    match a {
        Activation::Sigmoid => x.sigmoid(),
        Activation::Tanh => x.tanh(),
    }
}

/// Pointer distribution for `depth` elements below the top.
fn ptr_at(machine: &Machine, p: &Var, depth: usize) -> Result<Var, MachineError> {
    let mut q = p.clone();
    for _ in 0..depth {
        q = machine.dec_ptr(&q)?;
    }
    Ok(q)
}

/// Value distribution stored at a reference.
pub fn read_ref(machine: &Machine, mem: &Memory, r: ElementRef) -> Result<Var, MachineError> {
    match r {
        ElementRef::Data(k) => read(&mem.data, &ptr_at(machine, &mem.data_ptr, k)?),
        ElementRef::Ret(k) => read(&mem.ret, &ptr_at(machine, &mem.ret_ptr, k)?),
        ElementRef::Heap(a) => Ok(mem.heap.row(a)?),
    }
}

/// Overwrite the value at a reference, leaving pointers alone.
pub fn write_ref(machine: &Machine, mem: &mut Memory, r: ElementRef, x: &Var) -> Result<(), MachineError> {
    match r {
        ElementRef::Data(k) => mem.data = write(&mem.data, x, &ptr_at(machine, &mem.data_ptr, k)?)?,
        ElementRef::Ret(k) => mem.ret = write(&mem.ret, x, &ptr_at(machine, &mem.ret_ptr, k)?)?,
        ElementRef::Heap(a) => {
            let v = machine.dims().value_size;
            mem.heap = write(&mem.heap, x, &Var::constant(Tensor::one_hot(v, a)))?;
        }
    }
    Ok(())
}

/// Latent vector `h` for the current memory.
pub fn encode(spec: &SlotSpec, machine: &Machine, tape: &Tape, mem: &Memory) -> Result<Var, SketchError> {
    let dims = machine.dims();
    let mut h = match &spec.stages[0] {
        Stage::Observe(refs) => {
            let parts = refs.iter().map(|r| read_ref(machine, mem, *r)).collect::<Result<Vec<_>, _>>()?;
            Var::concat(&parts)?
        }
        Stage::Static(_) => tape.var(&static_name(spec.id))?,
        _ => unreachable!("validated at parse"),
    };
    for l in layers(spec, dims).1 {
        h = match l {
            Layer::Linear { stage, act, .. } => {
                let w = tape.var(&weight_name(spec.id, stage))?;
                let b = tape.var(&bias_name(spec.id, stage))?;
                let z = h.vecmat(&w)?.add(&b)?;
                match act {
                    Some(a) => activate(&z, a),
                    None => z,
                }
            }
            Layer::Act(a) => activate(&h, a),
        };
    }
    Ok(h)
}

/// Decoder weights `softmax(W h + b)` (per row for manipulate).
pub fn decoder_logits(spec: &SlotSpec, tape: &Tape, h: &Var) -> Result<Var, SketchError> {
    let w = tape.var(&decoder_weight_name(spec.id))?;
    let b = tape.var(&decoder_bias_name(spec.id))?;
    Ok(h.vecmat(&w)?.add(&b)?)
}

/// Mix memories component by component. Components identical to the base
/// (same node) are grouped so unchanged parts are not copied.
pub fn mix_memories(weights: &Var, base: &Memory, items: &[Memory]) -> Result<Memory, AutodiffError> {
    let pick = |get: fn(&Memory) -> &Var| -> Result<Var, AutodiffError> {
        let b = get(base);
        let mut base_idx = Vec::new();
        let mut others = Vec::new();
        for (i, m) in items.iter().enumerate() {
            let c = get(m);
            if Var::ptr_eq(c, b) {
                base_idx.push(i);
            } else {
                others.push((i, c.clone()));
            }
        }
        if others.is_empty() {
            return Ok(b.clone());
        }
        let base_part = if base_idx.is_empty() { None } else { Some((b, base_idx)) };
        Var::mix(weights, base_part, &others)
    };
    Ok(Memory {
        data: pick(|m| &m.data)?,
        data_ptr: pick(|m| &m.data_ptr)?,
        ret: pick(|m| &m.ret)?,
        ret_ptr: pick(|m| &m.ret_ptr)?,
        heap: pick(|m| &m.heap)?,
    })
}

/// `Σ a_i · word_i(S)` over the chosen words.
pub fn decode_choose(machine: &Machine, words: &[ChoiceWord], a: &Var, mem: &Memory) -> Result<Memory, SketchError> {
    let outs = words
        .iter()
        .map(|w| match w {
            ChoiceWord::Nop => Ok(mem.clone()),
            ChoiceWord::Op(op) => machine.apply_word(*op, 0, mem).map(|(m, _)| m),
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(mix_memories(a, mem, &outs)?)
}

/// Write row `j` of `rows` (already normalized) over `refs[j]`.
pub fn decode_manipulate(
    machine: &Machine,
    refs: &[ElementRef],
    rows: &[Var],
    mem: &Memory,
) -> Result<Memory, SketchError> {
    let mut out = mem.clone();
    for (r, x) in refs.iter().zip(rows) {
        write_ref(machine, &mut out, *r, x)?;
    }
    Ok(out)
}

/// Replace the referenced values by `Σ_π b_π · old[π(j)]`.
pub fn decode_permute(machine: &Machine, refs: &[ElementRef], b: &Var, mem: &Memory) -> Result<Memory, SketchError> {
    let m = refs.len();
    let v = machine.dims().value_size;
    let olds = refs.iter().map(|r| read_ref(machine, mem, *r)).collect::<Result<Vec<_>, _>>()?;
    let stacked = Var::concat(&olds)?.reshape(Shape::Matrix(m, v))?;
    let pairs: Rc<[(usize, usize)]> = permutations(m)
        .iter()
        .enumerate()
        .flat_map(|(k, perm)| perm.iter().enumerate().map(move |(j, &i)| (k, j * m + i)).collect::<Vec<_>>())
        .collect();
    let q = b.scatter(pairs, m * m)?.reshape(Shape::Matrix(m, m))?;
    let new = q.matmul(&stacked)?;
    let mut out = mem.clone();
    for (j, r) in refs.iter().enumerate() {
        write_ref(machine, &mut out, *r, &new.row(j)?)?;
    }
    Ok(out)
}

/// Run a slot as a state transition on memory.
pub fn apply_slot(spec: &SlotSpec, machine: &Machine, tape: &Tape, mem: &Memory) -> Result<Memory, SketchError> {
    let h = encode(spec, machine, tape, mem)?;
    let logits = decoder_logits(spec, tape, &h)?;
    match &spec.decoder {
        Decoder::Choose(words) => decode_choose(machine, words, &logits.softmax(), mem),
        Decoder::Permute(refs) => decode_permute(machine, refs, &logits.softmax(), mem),
        Decoder::Manipulate(refs) => {
            let v = machine.dims().value_size;
            let rows = (0..refs.len())
                .map(|j| Ok(logits.slice(j * v, v)?.softmax()))
                .collect::<Result<Vec<_>, AutodiffError>>()?;
            decode_manipulate(machine, refs, &rows, mem)
        }
    }
}
