use d4_core::autodiff::{Tape, Tensor, Var};
use d4_core::executor::{
    collapse, discretize, trace_csv, ExecutionPlan, Executor, PlanOptions, RunOptions, Transition,
};
use d4_core::forth::{compile_source, run_discrete, CompileOptions, Dims, DiscreteState, LoweredProgram, Opcode};
use d4_core::machine::{Machine, Memory};
use d4_core::sketches;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DIMS: Dims = Dims { stack_size: 12, value_size: 64 };

fn compile(src: &str, dims: Dims) -> LoweredProgram {
    compile_source(src, CompileOptions { value_size: dims.value_size }).unwrap()
}

fn sort_input(seq: &[usize]) -> Vec<usize> {
    let mut v = seq.to_vec();
    v.push(seq.len());
    v
}

fn random_state(rng: &mut ChaCha8Rng, dims: Dims, depth: usize, rdepth: usize) -> DiscreteState {
    let v = dims.value_size;
    DiscreteState {
        data: (0..depth).map(|_| rng.random_range(0..v)).collect(),
        ret: (0..rdepth).map(|_| rng.random_range(0..v)).collect(),
        heap: (0..v).map(|_| rng.random_range(0..v)).collect(),
        pc: 0,
    }
}

#[test]
fn r_swap_r_collapses_to_one_transition() {
    let dims = Dims::new(8, 10);
    let machine = Machine::new(dims, 4).unwrap();
    let ops = [Opcode::FromR, Opcode::Swap, Opcode::ToR];
    let block = collapse(&ops, dims.stack_size).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let (d, r) = (rng.random_range(2..6), rng.random_range(1..6));
        let s = random_state(&mut rng, dims, d, r);
        let mem = Memory::encode(dims, &s);
        let mut naive = mem.clone();
        for op in ops {
            naive = machine.apply_word(op, 0, &naive).unwrap().0;
        }
        let fast = block.apply(&machine, &mem).unwrap();
        assert!(fast.max_abs_diff(&naive) < 1e-9);
    }
}

#[test]
fn single_instruction_runs_stay_primitive() {
    let p = compile("1+ DUP IF 1- THEN", DIMS);
    let plan = ExecutionPlan::build(&p, PlanOptions::COLLAPSED, DIMS.stack_size);
    let naive = ExecutionPlan::build(&p, PlanOptions::NAIVE, DIMS.stack_size);
    assert_eq!(plan.len(), naive.len() - 1);
    assert!(plan.transitions.iter().all(|t| !matches!(t, Transition::Collapsed { span, .. } if span.len() < 2)));
}

#[test]
fn uniform_attention_over_two_literals_mixes_tos() {
    let dims = Dims::new(6, 10);
    let p = compile("2 5", dims);
    let ex = Executor::new(&p, vec![], dims, PlanOptions::NAIVE).unwrap();
    let mut s = ex.encode(&DiscreteState::new(dims, &[1], 0));
    let mut c = vec![0.0; ex.plan.len()];
    c[0] = 0.5;
    c[1] = 0.5;
    s.pc = Var::constant(Tensor::vector(c));
    let out = ex.rnn_step(&Tape::new(), &s, 0).unwrap();
    let tos = d4_core::machine::read(&out.mem.data, &ex.machine.inc_ptr(&s.mem.data_ptr).unwrap()).unwrap();
    let expected: Vec<f64> = (0..10).map(|i| if i == 2 || i == 5 { 0.5 } else { 0.0 }).collect();
    for (a, b) in tos.data().iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!((out.pc.value().data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

fn run_plan(
    p: &LoweredProgram,
    opts: PlanOptions,
    dims: Dims,
    init: &DiscreteState,
) -> (DiscreteState, usize, d4_core::machine::ContinuousState) {
    let ex = Executor::new(p, vec![], dims, opts).unwrap();
    let steps = ex.plan_steps(p, init, 100_000, None).unwrap();
    let s0 = ex.encode(init);
    let out = ex.run(&Tape::new(), &s0, steps + 3, RunOptions::default()).unwrap();
    let mut d = ex.decode(&discretize(&out.state));
    d.pc = 0;
    (d, steps, out.state)
}

#[test]
fn optimized_plans_agree_with_naive_on_bubble_sort() {
    let p = compile(sketches::SORT_REFERENCE, DIMS);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for n in 2..=4 {
        let seq: Vec<usize> = (0..n).map(|_| rng.random_range(0..10)).collect();
        let init = DiscreteState::new(DIMS, &sort_input(&seq), p.entry);
        let mut expected = run_discrete(&p, init.clone(), DIMS, 100_000, None).unwrap().state;
        expected.pc = 0;
        let (naive, naive_steps, naive_state) = run_plan(&p, PlanOptions::NAIVE, DIMS, &init);
        let (col, col_steps, col_state) = run_plan(&p, PlanOptions::COLLAPSED, DIMS, &init);
        let (full, full_steps, full_state) = run_plan(&p, PlanOptions::FULL, DIMS, &init);
        assert_eq!(naive, expected);
        assert_eq!(col, expected);
        assert_eq!(full, expected);
        assert!(col_steps < naive_steps, "{col_steps} vs {naive_steps}");
        assert!(full_steps <= col_steps, "{full_steps} vs {col_steps}");
        assert!(naive_state.mem.max_abs_diff(&col_state.mem) < 1e-6);
        assert!(naive_state.mem.max_abs_diff(&full_state.mem) < 1e-6);
    }
}

#[test]
fn interpolated_compare_swap_matches_stepwise() {
    let dims = Dims::new(8, 10);
    let p = compile("OVER OVER < IF SWAP THEN", dims);
    let full = Executor::new(&p, vec![], dims, PlanOptions::FULL).unwrap();
    assert!(full.plan.transitions.iter().any(|t| matches!(t, Transition::InterpolatedIf { .. })));
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let mut s = random_state(&mut rng, dims, 3, 0);
        s.pc = p.entry;
        let (naive, ..) = run_plan(&p, PlanOptions::NAIVE, dims, &s);
        let (fast, ..) = run_plan(&p, PlanOptions::FULL, dims, &s);
        assert_eq!(naive, fast);
    }
}

#[test]
fn interpolation_blends_by_condition() {
    let dims = Dims::new(6, 10);
    let p = compile("IF 1 ELSE 2 THEN", dims);
    let ex = Executor::new(&p, vec![], dims, PlanOptions::FULL).unwrap();
    assert_eq!(ex.plan.len(), 2);
    let mut s = ex.encode(&DiscreteState::new(dims, &[0], 0));
    // Condition row half zero, half nonzero.
    let mut data = s.mem.data.value().clone();
    for j in 0..10 {
        data.data_mut()[j] = if j == 0 || j == 3 { 0.5 } else { 0.0 };
    }
    s.mem.data = Var::constant(data);
    let out = ex.rnn_step(&Tape::new(), &s, 0).unwrap();
    let row = out.mem.data.value().row(0).to_vec();
    assert!((row[1] - 0.5).abs() < 1e-12 && (row[2] - 0.5).abs() < 1e-12, "{row:?}");
}

#[test]
fn halt_self_loop_makes_extra_steps_harmless() {
    let p = compile(sketches::SORT_REFERENCE, DIMS);
    let init = DiscreteState::new(DIMS, &sort_input(&[3, 1, 2]), p.entry);
    let ex = Executor::new(&p, vec![], DIMS, PlanOptions::FULL).unwrap();
    let steps = ex.plan_steps(&p, &init, 10_000, None).unwrap();
    let a = ex.run(&Tape::new(), &ex.encode(&init), steps, RunOptions::default()).unwrap().state;
    let b = ex.run(&Tape::new(), &ex.encode(&init), steps + 20, RunOptions::default()).unwrap().state;
    assert_eq!(a.max_abs_diff(&b), 0.0);
    assert_eq!(a.pc.value().argmax(), ex.plan.halt);
}

#[test]
fn zero_steps_is_identity_and_trace_is_one_hot() {
    let p = compile(sketches::SORT_REFERENCE, DIMS);
    let init = DiscreteState::new(DIMS, &sort_input(&[5, 9]), p.entry);
    let ex = Executor::new(&p, vec![], DIMS, PlanOptions::NAIVE).unwrap();
    let s0 = ex.encode(&init);
    let r = ex.run(&Tape::new(), &s0, 0, RunOptions::default()).unwrap();
    assert_eq!(r.state.max_abs_diff(&s0), 0.0);
    let r = ex.run(&Tape::new(), &s0, 30, RunOptions { record_trace: true, ..Default::default() }).unwrap();
    assert_eq!(r.trace.len(), 31);
    for row in &r.trace {
        assert_eq!(row.iter().filter(|&&x| x == 1.0).count(), 1);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let csv = trace_csv(&r.trace);
    assert_eq!(csv.lines().count(), 32);
    assert!(csv.starts_with("step,c0,c1"));
}

#[test]
fn discretize_takes_lowest_argmax() {
    let dims = Dims::new(4, 3);
    let p = compile("", dims);
    let ex = Executor::new(&p, vec![], dims, PlanOptions::NAIVE).unwrap();
    let mut s = ex.encode(&DiscreteState::new(dims, &[1], 0));
    let d = discretize(&s);
    assert_eq!(d.max_abs_diff(&s), 0.0);
    s.mem.data_ptr = Var::constant(Tensor::vector(vec![0.4, 0.6, 0.0, 0.0]));
    s.mem.ret_ptr = Var::constant(Tensor::vector(vec![0.0, 0.5, 0.5, 0.0]));
    let d = discretize(&s);
    assert_eq!(d.mem.data_ptr.data(), &[0.0, 1.0, 0.0, 0.0]);
    assert_eq!(d.mem.ret_ptr.data(), &[0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn plan_dump_marks_optimized_regions() {
    let p = compile(sketches::SORT_REFERENCE, DIMS);
    let dump = ExecutionPlan::build(&p, PlanOptions::FULL, DIMS.stack_size).dump();
    assert!(dump.contains("collapsed["), "{dump}");
    assert!(dump.contains("interpIf["), "{dump}");
}
