use std::path::{Path, PathBuf};
use std::time::Instant;

use d4_core::autodiff::{ParamStore, Tape};
use d4_core::executor::{discretize, write_trace, ExecutionPlan, Executor, PlanOptions, RunOptions, BUDGET_FACTOR};
use d4_core::forth::{
    compile_source, run_discrete, CompileOptions, Dims, DiscreteState, LoweredProgram, Opcode, SlotOracle,
};
use d4_core::sketch::{HandSlots, Sketch};
use d4_core::training::{
    self, evaluate, generate, load_checkpoint, metrics_csv, read_jsonl, save_checkpoint, write_jsonl,
    CheckpointManifest, Model, TrainConfig,
};
use d4_core::{sketches, training::Example};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::{self, RunConfig};
use crate::{BenchArgs, EvalArgs, Failure, MachineArgs, RunArgs, TraceArgs, TrainArgs};

fn read_source(program: &str) -> Result<String, Failure> {
    match sketches::by_name(program) {
        Some(s) => Ok(s.to_string()),
        None => std::fs::read_to_string(program).map_err(|e| Failure::Usage(format!("cannot read {program}: {e}"))),
    }
}

/// A compiled program with the value size raised to fit its addresses and inputs.
struct Loaded {
    source: String,
    program: LoweredProgram,
    dims: Dims,
    oracle: Option<HandSlots>,
    /// Parameters from `--checkpoint`, which also fixes the value size.
    params: Option<ParamStore>,
}

fn load(m: &MachineArgs) -> Result<Loaded, Failure> {
    let source = read_source(&m.program)?;
    if m.stack_size < 2 || m.value_size == 0 {
        return Err(Failure::Usage("stack size must be at least 2 and value size positive".into()));
    }
    let probe = compile_source(&source, CompileOptions { value_size: usize::MAX >> 1 })?;
    let needed = (probe.len() + 1).max(m.input.iter().map(|x| x + 1).max().unwrap_or(0));
    let mut v = m.value_size.max(needed);
    let mut params = None;
    if let Some(prefix) = &m.checkpoint {
        let (p, manifest) = load_checkpoint(prefix)?;
        if manifest.sketch_sha256 != hex::encode(Sha256::digest(source.as_bytes())) {
            return Err(Failure::Usage(format!("checkpoint {} was trained on a different sketch", prefix.display())));
        }
        if manifest.value_size < needed {
            return Err(Failure::Usage(format!(
                "checkpoint value size {} is below the {needed} this program and input need",
                manifest.value_size
            )));
        }
        v = manifest.value_size;
        params = Some(p);
    } else if v > m.value_size {
        eprintln!("note: value size raised from {} to {v}", m.value_size);
    }
    let dims = Dims::new(m.stack_size, v);
    let program = compile_source(&source, CompileOptions { value_size: v })?;
    if m.input.len() > dims.capacity() {
        return Err(Failure::Usage(format!("{} inputs exceed stack capacity {}", m.input.len(), dims.capacity())));
    }
    let name = m.slots.as_deref().unwrap_or(&m.program);
    let oracle = HandSlots::for_sketch(name);
    if m.slots.is_some() && oracle.is_none() {
        return Err(Failure::Usage(format!("no hand-written slots for {name}")));
    }
    Ok(Loaded { source, program, dims, oracle, params })
}

fn has_slots(p: &LoweredProgram) -> bool {
    p.instructions.iter().any(|op| matches!(op, Opcode::Slot(_)))
}

fn print_stack(stack: &[usize]) {
    let s: Vec<String> = stack.iter().map(ToString::to_string).collect();
    println!("{}", s.join(" "));
}

fn params_for(l: &Loaded) -> Result<ParamStore, Failure> {
    match &l.params {
        Some(p) => Ok(p.clone()),
        None if has_slots(&l.program) => {
            Err(Failure::Usage("continuous execution of a sketch needs --checkpoint".into()))
        }
        None => Ok(ParamStore::new()),
    }
}

/// Continuous run shared by `run --continuous` and `trace`.
fn continuous(
    l: &Loaded,
    m: &MachineArgs,
    steps: Option<usize>,
    opts: RunOptions,
) -> Result<(Executor, d4_core::executor::RunResult), Failure> {
    let sketch = Sketch::compile(&l.source, l.dims)?;
    let params = params_for(l)?;
    let ex = Executor::new(&l.program, sketch.slots, l.dims, PlanOptions::FULL)?;
    let init = DiscreteState::new(l.dims, &m.input, l.program.entry);
    let steps = match steps {
        Some(t) => t,
        None => {
            if has_slots(&l.program) && l.oracle.is_none() {
                return Err(Failure::Usage("sketch without hand-written slots needs --steps".into()));
            }
            let oracle = l.oracle.as_ref().map(|o| o as &dyn SlotOracle);
            let n = ex.plan_steps(&l.program, &init, m.max_steps, oracle)?;
            (n as f64 * BUDGET_FACTOR).ceil() as usize
        }
    };
    let tape = Tape::from_store(&params);
    let result = ex.run(&tape, &ex.encode(&init), steps, opts)?;
    Ok((ex, result))
}

pub fn run(a: RunArgs) -> Result<(), Failure> {
    let l = load(&a.machine)?;
    if a.continuous {
        let opts = RunOptions { discretize_each_step: a.discretize, record_trace: false };
        let (ex, r) = continuous(&l, &a.machine, a.steps, opts)?;
        let state = ex.decode(&discretize(&r.state));
        print_stack(&state.data);
        return Ok(());
    }
    if has_slots(&l.program) && l.oracle.is_none() {
        return Err(Failure::Usage("program has slots; pass --slots <sketch> for hand-written behaviour".into()));
    }
    let init = DiscreteState::new(l.dims, &a.machine.input, l.program.entry);
    let oracle = l.oracle.as_ref().map(|o| o as &dyn SlotOracle);
    let out = run_discrete(&l.program, init, l.dims, a.machine.max_steps, oracle)?;
    print_stack(&out.state.data);
    Ok(())
}

/// Fresh timestamped directory under `root`.
fn run_dir(root: &Path, kind: &str) -> Result<PathBuf, Failure> {
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let mut dir = root.join(format!("{kind}-{stamp}"));
    let mut k = 1;
    while dir.exists() {
        dir = root.join(format!("{kind}-{stamp}-{k}"));
        k += 1;
    }
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

pub fn trace(a: TraceArgs) -> Result<(), Failure> {
    let l = load(&a.machine)?;
    let opts = RunOptions { discretize_each_step: false, record_trace: true };
    let (ex, r) = continuous(&l, &a.machine, a.steps, opts)?;
    let path = match a.out {
        Some(p) => p,
        None => {
            let dir = run_dir(Path::new("runs"), "trace")?;
            std::fs::write(dir.join("plan.txt"), ex.plan.dump())?;
            dir.join("trace.csv")
        }
    };
    write_trace(&path, &r.trace)?;
    println!("{}", path.display());
    Ok(())
}

fn sha256_file(path: &Path) -> Result<String, Failure> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

pub fn train(a: TrainArgs, seed: Option<u64>) -> Result<(), Failure> {
    let mut cfg = match &a.config {
        Some(p) => config::load(p).map_err(|e| Failure::Usage(e.join("\n       ")))?,
        None => RunConfig::default(),
    };
    if let Some(s) = a.sketch {
        if d4_core::sketches::by_name(&s).is_some() {
            cfg.task = if s.starts_with("add") { training::Task::Add } else { training::Task::Sort };
        }
        cfg.sketch = s;
    }
    if let Some(x) = a.train_len {
        cfg.train_len = x;
    }
    if let Some(x) = a.epochs {
        cfg.optimizer.epochs = x;
    }
    if let Some(x) = a.learning_rate {
        cfg.optimizer.learning_rate = x;
    }
    if let Some(x) = a.batch_size {
        cfg.optimizer.batch_size = x;
    }
    if let Some(x) = a.out {
        cfg.out_dir = x;
    }
    let seed = seed.or(cfg.seed).unwrap_or(0);
    cfg.seed = Some(seed);
    cfg.optimizer.seed = seed;
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(Failure::Usage(errs.join("\n       ")));
    }
    let source = cfg.sketch_source()?;
    let v = cfg.value_size.unwrap_or(cfg.task.default_value_size());
    let mut model = Model::new(cfg.task, &source, v, HandSlots::for_sketch(&cfg.sketch))?;
    model.steps_override = cfg.steps;

    let dir = run_dir(&cfg.out_dir, "train")?;
    let train_set = generate(cfg.task, cfg.train_len, cfg.train_size, seed.wrapping_add(1), v)?;
    let dev_set = generate(cfg.task, cfg.train_len, cfg.dev_size, seed.wrapping_add(2), v)?;
    write_jsonl(&dir.join("train.jsonl"), &train_set)?;
    write_jsonl(&dir.join("dev.jsonl"), &dev_set)?;
    std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
    std::fs::write(dir.join("plan.txt"), ExecutionPlan::build(&model.sketch.program, model.plan, 8).dump())?;

    let tc = TrainConfig {
        optimizer: cfg.optimizer.clone(),
        target_dev_accuracy: cfg.target_dev_accuracy,
        max_seconds: cfg.max_seconds,
    };
    eprintln!(
        "training {} on {} examples of length {} -> {}",
        cfg.sketch,
        train_set.len(),
        cfg.train_len,
        dir.display()
    );
    let out = training::train(&model, model.init_params(seed), &train_set, &dev_set, &tc, |m| {
        eprintln!(
            "epoch {:>4}  loss {:.5}  dev {:6.2}%  {:.1}s",
            m.epoch, m.train_loss, m.dev_accuracy, m.seconds_elapsed
        );
    })?;
    std::fs::write(dir.join("metrics.csv"), metrics_csv(&out.history))?;
    let manifest = CheckpointManifest {
        sketch_sha256: model.sketch_hash(),
        task: cfg.task,
        value_size: v,
        seed,
        config: serde_json::to_value(&cfg)?,
    };
    let prefix = dir.join("best");
    save_checkpoint(&prefix, &out.best, &manifest)?;

    let mut evals = Vec::new();
    for &len in &cfg.test_lengths {
        let test = generate(cfg.task, len, cfg.test_size, seed.wrapping_add(3 + len as u64), v)?;
        let r = evaluate(&model, &out.best, &test)?;
        println!(
            "test length {len:>3}: {:6.2}% hamming, {:6.2}% exact ({} examples, {} steps)",
            r.accuracy, r.exact, r.count, r.steps
        );
        evals.push(json!({ "length": len, "report": r }));
    }
    let run_manifest = json!({
        "kind": "train",
        "version": env!("CARGO_PKG_VERSION"),
        "created": chrono::Local::now().to_rfc3339(),
        "seed": seed,
        "sketch": cfg.sketch,
        "sketch_sha256": manifest.sketch_sha256,
        "checkpoint_sha256": sha256_file(&prefix.with_extension("bin"))?,
        "best_dev_accuracy": out.best_dev_accuracy,
        "epochs_run": out.history.len(),
        "diverged": out.diverged,
        "evaluations": evals,
    });
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&run_manifest)?)?;
    println!("best dev accuracy {:.2}%, artifacts in {}", out.best_dev_accuracy, dir.display());
    if let Some(d) = out.diverged {
        return Err(Failure::Runtime(format!("{d}; best checkpoint kept at {}", prefix.display())));
    }
    Ok(())
}

pub fn eval(a: EvalArgs, seed: u64) -> Result<(), Failure> {
    let (params, manifest) = load_checkpoint(&a.checkpoint)?;
    let source = read_source(&a.sketch)?;
    let model = Model::new(manifest.task, &source, manifest.value_size, HandSlots::for_sketch(&a.sketch))?;
    if model.sketch_hash() != manifest.sketch_sha256 {
        return Err(Failure::Usage(format!("sketch {} does not match the checkpoint (hash differs)", a.sketch)));
    }
    let expected = model.init_params(0);
    for (name, t) in &expected {
        match params.get(name) {
            Some(p) if p.shape() == t.shape() => {}
            Some(p) => {
                return Err(Failure::Runtime(format!(
                    "parameter {name} has shape {} but the sketch needs {}",
                    p.shape(),
                    t.shape()
                )))
            }
            None => return Err(Failure::Runtime(format!("checkpoint lacks parameter {name}"))),
        }
    }
    let sets: Vec<(String, Vec<Example>)> = match &a.test {
        Some(p) => vec![(p.display().to_string(), read_jsonl(p)?)],
        None => a
            .lengths
            .iter()
            .map(|&len| {
                Ok((
                    len.to_string(),
                    generate(manifest.task, len, a.count, seed.wrapping_add(3 + len as u64), manifest.value_size)?,
                ))
            })
            .collect::<Result<_, Failure>>()?,
    };
    println!("{:>10}  {:>9}  {:>9}  {:>6}", "test", "hamming", "exact", "count");
    for (label, set) in sets {
        if set.is_empty() {
            return Err(Failure::Usage(format!("test set {label} is empty")));
        }
        let r = evaluate(&model, &params, &set)?;
        println!("{label:>10}  {:>8.2}%  {:>8.2}%  {:>6}", r.accuracy, r.exact, r.count);
    }
    Ok(())
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

pub fn bench(a: BenchArgs, seed: u64) -> Result<(), Failure> {
    if a.repeats == 0 || a.lengths.is_empty() {
        return Err(Failure::Usage("need at least one length and one repeat".into()));
    }
    let source = read_source(&a.program)?;
    let program = compile_source(&source, CompileOptions { value_size: a.value_size })?;
    if has_slots(&program) {
        return Err(Failure::Usage("bench-opt runs slot-free programs".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let variants =
        [("naive", PlanOptions::NAIVE), ("collapsed", PlanOptions::COLLAPSED), ("collapsed+interp", PlanOptions::FULL)];
    println!("{:>6}  {:<17} {:>6} {:>12} {:>8}", "length", "plan", "steps", "median_ms", "speedup");
    for &n in &a.lengths {
        let mut input: Vec<usize> = (0..n).map(|_| rng.random_range(0..10)).collect();
        input.push(n);
        let dims = Dims::new(2 * input.len() + 6, a.value_size);
        let init = DiscreteState::new(dims, &input, program.entry);
        let mut reference: Option<(DiscreteState, d4_core::machine::ContinuousState)> = None;
        let mut naive_ms = 0.0;
        for (name, opts) in variants {
            let ex = Executor::new(&program, vec![], dims, opts)?;
            let steps = ex.plan_steps(&program, &init, 10_000_000, None)?;
            let tape = Tape::new();
            let s0 = ex.encode(&init);
            let mut times = Vec::with_capacity(a.repeats);
            let mut last = None;
            for _ in 0..a.repeats {
                let t = Instant::now();
                let r = ex.run(&tape, &s0, steps, RunOptions::default())?;
                times.push(t.elapsed().as_secs_f64() * 1e3);
                last = Some(r.state);
            }
            let state = last.expect("at least one repeat");
            let mut decoded = ex.decode(&discretize(&state));
            decoded.pc = 0;
            match &reference {
                None => reference = Some((decoded, state)),
                Some((d, s)) => {
                    let diff = s.mem.max_abs_diff(&state.mem);
                    if *d != decoded || diff >= 1e-6 {
                        return Err(Failure::Runtime(format!(
                            "{name} plan disagrees with naive at length {n} (diff {diff:e})"
                        )));
                    }
                }
            }
            let ms = median(&mut times);
            if name == "naive" {
                naive_ms = ms;
            }
            println!("{n:>6}  {name:<17} {steps:>6} {ms:>12.3} {:>7.2}x", naive_ms / ms);
        }
    }
    Ok(())
}
