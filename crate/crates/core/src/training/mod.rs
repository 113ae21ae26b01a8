//! Loss, optimizer, datasets and the training loop.

pub mod data;
mod optim;

use std::cell::RefCell;
use std::collections::HashMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use data::{
    add_example, gen_add_dataset, gen_sort_dataset, generate, read_jsonl, stack_size_for, write_jsonl, Example, Task,
};
pub use optim::{global_norm, Optimizer, OptimizerConfig, StepInfo, BETA1, BETA2, EPSILON};

use crate::autodiff::checkpoint::{self, CheckpointError};
use crate::autodiff::{argmax, AutodiffError, ParamStore, Tape, Var};
use crate::executor::{discretize, ExecutionPlan, Executor, ExecutorError, PlanOptions, RunOptions, BUDGET_FACTOR};
use crate::forth::{Dims, ForthError, SlotOracle};
use crate::machine::ContinuousState;
use crate::sketch::{HandSlots, Sketch, SketchError};

#[derive(Debug, thiserror::Error)]
pub enum TrainingError {
    #[error(transparent)]
    Forth(#[from] ForthError),
    #[error(transparent)]
    Sketch(#[from] SketchError),
    #[error(transparent)]
    Executor(#[from] ExecutorError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("oracle mismatch: {0}")]
    Oracle(String),
    #[error("config: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty dataset")]
    EmptyDataset,
}

/// A sketch bound to a task, value width and execution settings.
pub struct Model {
    pub task: Task,
    pub sketch: Sketch,
    pub source: String,
    pub value_size: usize,
    /// Hand-written slot semantics, used to size the step budget.
    pub oracle: Option<HandSlots>,
    pub plan: PlanOptions,
    /// Fixed unroll length instead of the oracle-derived budget.
    pub steps_override: Option<usize>,
    executors: RefCell<HashMap<usize, Rc<Executor>>>,
}

impl Model {
    pub fn new(task: Task, source: &str, value_size: usize, oracle: Option<HandSlots>) -> Result<Model, TrainingError> {
        let sketch = Sketch::compile(source, Dims::new(8, value_size))?;
        if sketch.program.len() > value_size {
            return Err(TrainingError::Config(format!(
                "program has {} instructions but value size is {value_size}",
                sketch.program.len()
            )));
        }
        Ok(Model {
            task,
            sketch,
            source: source.to_string(),
            value_size,
            oracle,
            plan: PlanOptions::FULL,
            steps_override: None,
            executors: RefCell::new(HashMap::new()),
        })
    }

    /// Model for a bundled sketch such as `sort-compare` or `add-choose`.
    pub fn bundled(name: &str, value_size: Option<usize>) -> Result<Model, TrainingError> {
        let source =
            crate::sketches::by_name(name).ok_or_else(|| TrainingError::Config(format!("unknown sketch {name}")))?;
        let task = if name.starts_with("add") { Task::Add } else { Task::Sort };
        Model::new(task, source, value_size.unwrap_or(task.default_value_size()), HandSlots::for_sketch(name))
    }

    pub fn sketch_hash(&self) -> String {
        hex::encode(Sha256::digest(self.source.as_bytes()))
    }

    pub fn dims_for(&self, ex: &Example) -> Dims {
        Dims::new(stack_size_for(self.task, ex.input.len()), self.value_size)
    }

    pub fn init_params(&self, seed: u64) -> ParamStore {
        self.sketch.init_params(Dims::new(8, self.value_size), seed)
    }

    pub fn executor(&self, dims: Dims) -> Result<Rc<Executor>, TrainingError> {
        if let Some(e) = self.executors.borrow().get(&dims.stack_size) {
            return Ok(e.clone());
        }
        let e = Rc::new(Executor::new(&self.sketch.program, self.sketch.slots.clone(), dims, self.plan)?);
        self.executors.borrow_mut().insert(dims.stack_size, e.clone());
        Ok(e)
    }

    /// Unroll length for a set of examples: the override, or 1.25 times the
    /// longest plan execution under the hand-written slots. Sketches without
    /// them fall back to the naive step count of the reference program.
    pub fn budget(&self, examples: &[Example]) -> Result<usize, TrainingError> {
        if let Some(t) = self.steps_override {
            return Ok(t);
        }
        let mut longest = 0;
        for ex in examples {
            let dims = self.dims_for(ex);
            let steps = match &self.oracle {
                Some(o) => {
                    let e = self.executor(dims)?;
                    e.plan_steps(
                        &self.sketch.program,
                        &ex.initial(dims, self.sketch.program.entry),
                        10_000_000,
                        Some(o as &dyn SlotOracle),
                    )?
                }
                None => {
                    let reference = self.task.reference(self.value_size)?;
                    let plan = ExecutionPlan::build(&reference, PlanOptions::NAIVE, dims.stack_size);
                    let mut executed = Vec::new();
                    crate::forth::run_discrete_with(
                        &reference,
                        ex.initial(dims, reference.entry),
                        dims,
                        10_000_000,
                        None,
                        |pc, _| executed.push(pc),
                    )?;
                    plan.count_steps(&executed)
                }
            };
            longest = longest.max(steps);
        }
        Ok((longest as f64 * BUDGET_FACTOR).ceil() as usize)
    }

    pub fn run(
        &self,
        tape: &Tape,
        ex: &Example,
        steps: usize,
        discretize_each_step: bool,
    ) -> Result<ContinuousState, TrainingError> {
        let dims = self.dims_for(ex);
        let e = self.executor(dims)?;
        let s0 = e.encode(&ex.initial(dims, self.sketch.program.entry));
        let opts = RunOptions { discretize_each_step, record_trace: false };
        Ok(e.run(tape, &s0, steps, opts)?.state)
    }

    /// Discretized prediction: argmax of the data rows covered by the target.
    pub fn predict(&self, tape: &Tape, ex: &Example, steps: usize) -> Result<Vec<usize>, TrainingError> {
        let s = discretize(&self.run(tape, ex, steps, true)?);
        let d = s.mem.data.value();
        Ok((0..ex.target.len().min(d.rows())).map(|k| argmax(d.row(k))).collect())
    }
}

/// Cross-entropy of the final data rows under the mask plus that of the
/// data pointer, with predictions renormalized before the log.
pub fn loss(state: &ContinuousState, target: &[usize]) -> Result<Var, TrainingError> {
    let dims = state.mem.dims();
    let l = dims.stack_size;
    if target.len() >= l {
        return Err(TrainingError::Shape(format!("target depth {} does not fit {l} rows", target.len())));
    }
    let mut terms = Vec::with_capacity(target.len() + 1);
    for (k, &y) in target.iter().enumerate() {
        if y >= dims.value_size {
            return Err(TrainingError::Shape(format!("target value {y} outside value size {}", dims.value_size)));
        }
        terms.push(state.mem.data.row(k)?.normalize().log().element(y)?);
    }
    let ptr_row = (target.len() + l - 1) % l;
    terms.push(state.mem.data_ptr.normalize().log().element(ptr_row)?);
    Ok(Var::concat(&terms)?.sum().scale(-1.0))
}

/// Percentage of masked cells whose prediction matches.
pub fn hamming_accuracy(predicted: &[usize], target: &[usize]) -> Result<f64, TrainingError> {
    if predicted.len() != target.len() {
        return Err(TrainingError::Shape(format!("{} predictions for {} targets", predicted.len(), target.len())));
    }
    if target.is_empty() {
        return Ok(100.0);
    }
    let hits = predicted.iter().zip(target).filter(|(a, b)| a == b).count();
    Ok(100.0 * hits as f64 / target.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Cell-level accuracy over the whole set, in percent.
    pub accuracy: f64,
    /// Percentage of examples predicted exactly.
    pub exact: f64,
    pub count: usize,
    pub steps: usize,
}

pub fn evaluate(model: &Model, params: &ParamStore, examples: &[Example]) -> Result<EvalReport, TrainingError> {
    if examples.is_empty() {
        return Err(TrainingError::EmptyDataset);
    }
    let steps = model.budget(examples)?;
    let tape = Tape::from_store(params);
    let (mut hits, mut cells, mut exact) = (0usize, 0usize, 0usize);
    for ex in examples {
        let pred = model.predict(&tape, ex, steps)?;
        let h = pred.iter().zip(&ex.target).filter(|(a, b)| a == b).count();
        hits += h;
        cells += ex.target.len();
        exact += usize::from(h == ex.target.len());
    }
    Ok(EvalReport {
        accuracy: 100.0 * hits as f64 / cells.max(1) as f64,
        exact: 100.0 * exact as f64 / examples.len() as f64,
        count: examples.len(),
        steps,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    /// Stop once dev accuracy reaches this percentage.
    pub target_dev_accuracy: Option<f64>,
    /// Wall-clock limit in seconds, checked between batches.
    pub max_seconds: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { optimizer: OptimizerConfig::default(), target_dev_accuracy: None, max_seconds: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_accuracy: f64,
    pub seconds_elapsed: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the best dev accuracy seen.
    pub best: ParamStore,
    pub best_dev_accuracy: f64,
    pub last: ParamStore,
    pub history: Vec<EpochMetrics>,
    /// Set when training stopped on a non-finite loss.
    pub diverged: Option<String>,
}

/// Mean loss and gradient over a batch.
pub fn batch_gradient(
    model: &Model,
    params: &ParamStore,
    batch: &[&Example],
    steps: usize,
) -> Result<(f64, std::collections::BTreeMap<String, crate::autodiff::Tensor>), TrainingError> {
    let mut tape = Tape::from_store(params);
    let mut total = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for ex in batch {
        let state = model.run(&tape, ex, steps, false)?;
        let l = loss(&state, &ex.target)?.scale(scale);
        if !l.item().is_finite() {
            return Err(TrainingError::NonFiniteLoss { epoch: 0, batch: 0 });
        }
        total += l.item();
        tape.backward(&l)?;
        tape.rearm();
    }
    Ok((total, tape.grads().clone()))
}

/// Epoch loop with shuffling, dev evaluation and best-dev tracking.
pub fn train(
    model: &Model,
    init: ParamStore,
    train_set: &[Example],
    dev_set: &[Example],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome, TrainingError> {
    if train_set.is_empty() || dev_set.is_empty() {
        return Err(TrainingError::EmptyDataset);
    }
    let errs = config.optimizer.validate();
    if !errs.is_empty() {
        return Err(TrainingError::Config(errs.join("; ")));
    }
    let start = Instant::now();
    let steps = model.budget(train_set)?;
    let mut params = init;
    let mut opt = Optimizer::new(config.optimizer.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(config.optimizer.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best = params.clone();
    let mut history = Vec::new();
    let mut diverged = None;
    let mut best_dev = match non_finite(evaluate(model, &params, dev_set))? {
        Some(r) => r.accuracy,
        None => {
            diverged = Some("initial parameters produce a non-finite state".to_string());
            0.0
        }
    };
    if diverged.is_some() {
        return Ok(TrainOutcome { best, best_dev_accuracy: best_dev, last: params, history, diverged });
    }
    let out_of_time = |start: &Instant| config.max_seconds.is_some_and(|m| start.elapsed().as_secs_f64() > m);
    'epochs: for epoch in 1..=config.optimizer.epochs {
        if config.target_dev_accuracy.is_some_and(|t| best_dev >= t) {
            break;
        }
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(config.optimizer.batch_size).enumerate() {
            if out_of_time(&start) {
                break 'epochs;
            }
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train_set[i]).collect();
            let Some((l, grads)) = non_finite(batch_gradient(model, &params, &batch, steps))? else {
                diverged = Some(TrainingError::NonFiniteLoss { epoch, batch: b }.to_string());
                break 'epochs;
            };
            epoch_loss += l * batch.len() as f64;
            opt.step(&mut params, grads);
        }
        let Some(dev) = non_finite(evaluate(model, &params, dev_set))? else {
            diverged = Some(format!("non-finite state evaluating the dev set after epoch {epoch}"));
            break;
        };
        let dev = dev.accuracy;
        if dev >= best_dev {
            best_dev = dev;
            best = params.clone();
        }
        let m = EpochMetrics {
            epoch,
            train_loss: epoch_loss / train_set.len() as f64,
            dev_accuracy: dev,
            seconds_elapsed: start.elapsed().as_secs_f64(),
        };
        on_epoch(&m);
        history.push(m);
    }
    Ok(TrainOutcome { best, best_dev_accuracy: best_dev, last: params, history, diverged })
}

/// Separate numerical blow-ups from other errors.
fn non_finite<T>(r: Result<T, TrainingError>) -> Result<Option<T>, TrainingError> {
    match r {
        Ok(x) => Ok(Some(x)),
        Err(TrainingError::NonFiniteLoss { .. }) | Err(TrainingError::Executor(ExecutorError::NonFinite { .. })) => {
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch,trainLoss,devAccuracy,secondsElapsed\n");
    for m in history {
        s.push_str(&format!("{},{},{},{:.3}\n", m.epoch, m.train_loss, m.dev_accuracy, m.seconds_elapsed));
    }
    s
}

/// Metadata stored next to a parameter checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub sketch_sha256: String,
    pub task: Task,
    pub value_size: usize,
    pub seed: u64,
    pub config: serde_json::Value,
}

pub fn save_checkpoint(prefix: &Path, params: &ParamStore, manifest: &CheckpointManifest) -> Result<(), TrainingError> {
    checkpoint::save(prefix, params)?;
    let mut f = std::fs::File::create(manifest_path(prefix))?;
    f.write_all(serde_json::to_string_pretty(manifest)?.as_bytes())?;
    Ok(())
}

pub fn load_checkpoint(prefix: &Path) -> Result<(ParamStore, CheckpointManifest), TrainingError> {
    let params = checkpoint::load(prefix)?;
    let manifest = serde_json::from_str(&std::fs::read_to_string(manifest_path(prefix))?)?;
    Ok((params, manifest))
}

pub fn manifest_path(prefix: &Path) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}
