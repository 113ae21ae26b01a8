use std::rc::Rc;

use d4_core::autodiff::{grad_check, AutodiffError, ParamStore, Shape, Tensor, Var};
use d4_core::executor::{Executor, PlanOptions, Transition};
use d4_core::forth::{Dims, DiscreteState, SlotOracle};
use d4_core::machine::{ContinuousState, Machine, Memory};
use d4_core::sketch::{
    apply_slot, decode_choose, decode_manipulate, decode_permute, init_params, mix_memories, parse_slot, ChoiceWord,
    ElementRef, HandSlots, Sketch, SlotSpec,
};
use d4_core::sketches;
use d4_core::training::{loss, Example, Model};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn project(v: &Var, seed: u64) -> Result<Var, AutodiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Rc<[f64]> = (0..v.value().len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    v.reshape(Shape::Vector(v.value().len()))?.dot_const(w)
}

fn memory_loss(m: &Memory) -> Result<Var, AutodiffError> {
    let mut total = Var::constant(Tensor::scalar(0.0));
    for (k, c) in m.components().into_iter().enumerate() {
        total = total.add(&project(c, k as u64)?)?;
    }
    Ok(total)
}

fn random_state(rng: &mut ChaCha8Rng, dims: Dims, depth: usize, pc: usize) -> DiscreteState {
    let data: Vec<usize> = (0..depth).map(|_| rng.random_range(0..dims.value_size)).collect();
    let mut s = DiscreteState::new(dims, &data, pc);
    s.ret = (0..2).map(|_| rng.random_range(0..dims.value_size)).collect();
    for h in s.heap.iter_mut() {
        *h = rng.random_range(0..dims.value_size);
    }
    s
}

/// Blend of two random discrete memories so no distribution is one-hot.
fn soft_memory(rng: &mut ChaCha8Rng, dims: Dims) -> Memory {
    let a = Memory::encode(dims, &random_state(rng, dims, 4, 0));
    let b = Memory::encode(dims, &random_state(rng, dims, 3, 0));
    let w = Var::constant(Tensor::vector(vec![0.65, 0.35]));
    mix_memories(&w, &a, &[a.clone(), b]).unwrap()
}

fn slot(body: &str, dims: Dims) -> SlotSpec {
    let s = parse_slot(0, body).unwrap();
    s.validate(dims).unwrap();
    s
}

#[test]
fn every_decoder_passes_gradient_check() {
    let dims = Dims::new(6, 5);
    let machine = Machine::new(dims, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mem = soft_memory(&mut rng, dims);
    for body in [
        "observe D0 D-1 -> choose NOP SWAP DROP 1+ 3",
        "observe D0 R0 -> tanh -> linear 6 -> choose DUP OVER +",
        "observe D0 D-1 D-2 -> tanh -> linear 7 -> manipulate D-1 D-2",
        "observe D0 -> linear 4 -> sigmoid -> manipulate R0 H2",
        "observe D0 D-1 -> permute D-1 D0 R0",
        "static 3 -> linear 4 -> tanh -> permute D0 D-1",
        "static -> choose NOP DROP",
    ] {
        let spec = slot(body, dims);
        let mut params = init_params(&spec, dims, 5);
        // Move statics and biases off zero so every path carries gradient.
        for t in params.values_mut() {
            for x in t.data_mut() {
                *x += rng.random_range(-0.3..0.3);
            }
        }
        let r = grad_check(&params, 1e-6, |t| {
            let out = apply_slot(&spec, &machine, t, &mem).map_err(|e| match e {
                d4_core::sketch::SketchError::Autodiff(a) => a,
                other => panic!("{other}"),
            })?;
            memory_loss(&out)
        })
        .unwrap();
        assert!(r.passed(TOL), "{body}: {} at {:?}", r.max_rel_error, r.worst);
    }
}

#[test]
fn one_hot_decoder_weights_reproduce_discrete_words() {
    let dims = Dims::new(6, 7);
    let machine = Machine::new(dims, 4).unwrap();
    let s = DiscreteState::new(dims, &[2, 5, 3], 0);
    let mem = Memory::encode(dims, &s);
    let words =
        [ChoiceWord::Nop, ChoiceWord::Op(d4_core::forth::Opcode::Swap), ChoiceWord::Op(d4_core::forth::Opcode::Lit(4))];
    let expect = [vec![2, 5, 3], vec![2, 3, 5], vec![2, 5, 3, 4]];
    for (k, want) in expect.iter().enumerate() {
        let a = Var::constant(Tensor::one_hot(3, k));
        let out = decode_choose(&machine, &words, &a, &mem).unwrap();
        assert_eq!(&out.decode(0).data, want);
    }
    // Permutation index 0 is the identity, the last one reverses.
    let refs = [ElementRef::Data(0), ElementRef::Data(1), ElementRef::Data(2)];
    let out = decode_permute(&machine, &refs, &Var::constant(Tensor::one_hot(6, 0)), &mem).unwrap();
    assert_eq!(out.decode(0).data, vec![2, 5, 3]);
    let out = decode_permute(&machine, &refs, &Var::constant(Tensor::one_hot(6, 5)), &mem).unwrap();
    assert_eq!(out.decode(0).data, vec![3, 5, 2]);
    let rows = [Var::constant(Tensor::one_hot(7, 6)), Var::constant(Tensor::one_hot(7, 1))];
    let out = decode_manipulate(&machine, &[ElementRef::Data(0), ElementRef::Heap(3)], &rows, &mem).unwrap();
    let d = out.decode(0);
    assert_eq!(d.data, vec![2, 5, 6]);
    assert_eq!(d.heap[3], 1);
    assert_eq!(out.data_ptr.value().max_abs_diff(mem.data_ptr.value()), 0.0);
}

#[test]
fn choose_output_is_convex_mixture() {
    let dims = Dims::new(6, 7);
    let machine = Machine::new(dims, 4).unwrap();
    let mem = Memory::encode(dims, &DiscreteState::new(dims, &[2, 5], 0));
    let words = [ChoiceWord::Nop, ChoiceWord::Op(d4_core::forth::Opcode::Swap)];
    let a = Var::constant(Tensor::vector(vec![0.25, 0.75]));
    let out = decode_choose(&machine, &words, &a, &mem).unwrap();
    let top = out.data.row(1).unwrap();
    assert!((top.data()[5] - 0.25).abs() < 1e-12 && (top.data()[2] - 0.75).abs() < 1e-12);
}

/// Index in the plan of the first slot transition.
fn slot_transition(ex: &Executor) -> (usize, usize) {
    ex.plan
        .transitions
        .iter()
        .enumerate()
        .find_map(|(k, t)| match t {
            Transition::Slot { index, .. } => Some((k, *index)),
            _ => None,
        })
        .expect("sketch has a slot")
}

#[test]
fn full_rnn_step_passes_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for name in ["sort-compare", "sort-permute", "add-choose", "add-manipulate"] {
        let model = Model::bundled(name, Some(40)).unwrap();
        let dims = Dims::new(8, 40);
        let ex = Executor::new(&model.sketch.program, model.sketch.slots.clone(), dims, PlanOptions::FULL).unwrap();
        let (k, index) = slot_transition(&ex);
        let mem = soft_memory(&mut rng, dims);
        // Split program-counter mass between the slot and the next two transitions.
        let n = ex.plan.len();
        let mut pc = vec![0.0; n];
        pc[k] = 0.6;
        pc[(k + 1) % n] += 0.3;
        pc[(k + 2) % n] += 0.1;
        let s = ContinuousState { mem, pc: Var::constant(Tensor::vector(pc)) };
        let mut params = model.init_params(3);
        for t in params.values_mut() {
            for x in t.data_mut() {
                *x += rng.random_range(-0.2..0.2);
            }
        }
        let r = grad_check(&params, 1e-6, |t| {
            let out = ex.rnn_step(t, &s, 0).unwrap();
            memory_loss(&out.mem)?.add(&project(&out.pc, 7)?)
        })
        .unwrap();
        assert!(r.passed(TOL), "{name} (slot at {index}): {} at {:?}", r.max_rel_error, r.worst);
    }
}

#[test]
fn unrolled_sort_run_passes_gradient_check() {
    let model = Model::bundled("sort-compare", Some(40)).unwrap();
    let ex = Example { input: vec![3, 8, 2], target: vec![8, 3], aux: serde_json::Value::Null };
    let steps = model.budget(std::slice::from_ref(&ex)).unwrap();
    let mut params: ParamStore = model.init_params(1);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for t in params.values_mut() {
        for x in t.data_mut() {
            *x += rng.random_range(-0.2..0.2);
        }
    }
    let r = grad_check(&params, 1e-6, |t| Ok(loss(&model.run(t, &ex, steps, false).unwrap(), &ex.target).unwrap()))
        .unwrap();
    assert!(r.passed(TOL), "{} at {:?}", r.max_rel_error, r.worst);
}

#[test]
fn hand_slots_cover_bundled_sketches() {
    for name in sketches::NAMES {
        let dims = Dims::new(12, 64);
        let Ok(sketch) = Sketch::compile(sketches::by_name(name).unwrap(), dims) else {
            continue;
        };
        match HandSlots::for_sketch(name) {
            Some(h) => assert_eq!(h.len(), sketch.slots.len(), "{name}"),
            None => assert!(sketch.slots.is_empty() || *name == "wap", "{name} lacks hand slots"),
        }
    }
}

#[test]
fn hand_compare_slot_swaps_out_of_order_pairs() {
    let dims = Dims::new(8, 10);
    let h = HandSlots::for_sketch("sort-compare").unwrap();
    let mut s = DiscreteState::new(dims, &[1, 7, 1, 3], 0);
    h.apply(0, &mut s, dims).unwrap();
    assert_eq!(s.data, vec![1, 7, 3, 1]);
    h.apply(0, &mut s, dims).unwrap();
    assert_eq!(s.data, vec![1, 7, 3, 1]);
}
