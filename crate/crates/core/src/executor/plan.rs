use std::collections::BTreeSet;
use std::ops::Range;

use crate::forth::{IfRegion, LoweredProgram, Opcode};

use super::symbolic::{collapse, Block};

#[derive(Clone, Debug, PartialEq)]
pub enum Transition {
    Primitive { index: usize, op: Opcode },
    Slot { index: usize, slot: usize },
    Collapsed { span: Range<usize>, block: Block },
    InterpolatedIf { region: IfRegion, then_ops: Vec<Opcode>, else_ops: Vec<Opcode> },
    Halt { index: usize },
}

impl Transition {
    /// Original instructions covered.
    pub fn span(&self) -> Range<usize> {
        match self {
            Transition::Primitive { index, .. } | Transition::Slot { index, .. } | Transition::Halt { index } => {
                *index..index + 1
            }
            Transition::Collapsed { span, .. } => span.clone(),
            Transition::InterpolatedIf { region, .. } => region.branch0..region.end,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct PlanOptions {
    pub collapse: bool,
    pub interpolate: bool,
}

impl PlanOptions {
    pub const NAIVE: PlanOptions = PlanOptions { collapse: false, interpolate: false };
    pub const COLLAPSED: PlanOptions = PlanOptions { collapse: true, interpolate: false };
    pub const FULL: PlanOptions = PlanOptions { collapse: true, interpolate: true };
}

/// A program partitioned into transitions executed one per RNN step.
#[derive(Clone, Debug)]
pub struct ExecutionPlan {
    pub transitions: Vec<Transition>,
    /// Original index to the plan position of the transition containing it.
    pub orig_to_plan: Vec<usize>,
    pub program_len: usize,
    pub entry: usize,
    pub halt: usize,
}

/// Indices control can arrive at other than by falling through.
pub fn entry_points(p: &LoweredProgram) -> BTreeSet<usize> {
    let mut s = BTreeSet::new();
    s.insert(p.entry);
    for (i, op) in p.instructions.iter().enumerate() {
        if let Some(t) = op.target() {
            s.insert(t);
        }
        if let Opcode::Call(_) = op {
            s.insert(i + 1);
        }
    }
    s
}

fn straight(ops: &[Opcode]) -> bool {
    ops.iter().all(|op| !op.is_control())
}

fn interpolable(p: &LoweredProgram, r: &IfRegion) -> bool {
    let ops = &p.instructions;
    if !straight(&ops[r.then_body()]) || !straight(&ops[r.else_body()]) {
        return false;
    }
    // Nothing outside the construct may jump into it.
    let inside = r.branch0 + 1..r.end;
    let own = |i: usize| i == r.branch0 || Some(i) == r.skip_else;
    let external = ops.iter().enumerate().any(|(i, op)| {
        let into = op.target().is_some_and(|t| inside.contains(&t));
        let ret = matches!(op, Opcode::Call(_)) && inside.contains(&(i + 1));
        (into && !own(i)) || ret
    });
    !external && !inside.contains(&p.entry)
}

impl ExecutionPlan {
    pub fn build(p: &LoweredProgram, opts: PlanOptions, stack_size: usize) -> ExecutionPlan {
        let ops = &p.instructions;
        let n = ops.len();
        let entries = entry_points(p);
        let mut regions: Vec<IfRegion> = if opts.interpolate {
            p.if_regions.iter().copied().filter(|r| interpolable(p, r)).collect()
        } else {
            Vec::new()
        };
        regions.sort_by_key(|r| r.branch0);

        let mut transitions = Vec::new();
        let mut i = 0;
        let mut regions = regions.into_iter().peekable();
        while i < n {
            if let Some(r) = regions.peek().copied().filter(|r| r.branch0 == i) {
                regions.next();
                transitions.push(Transition::InterpolatedIf {
                    region: r,
                    then_ops: ops[r.then_body()].to_vec(),
                    else_ops: ops[r.else_body()].to_vec(),
                });
                i = r.end;
                continue;
            }
            let op = ops[i];
            match op {
                Opcode::Halt => {
                    transitions.push(Transition::Halt { index: i });
                    i += 1;
                    continue;
                }
                Opcode::Slot(slot) => {
                    transitions.push(Transition::Slot { index: i, slot });
                    i += 1;
                    continue;
                }
                _ if op.is_control() || !opts.collapse => {
                    transitions.push(Transition::Primitive { index: i, op });
                    i += 1;
                    continue;
                }
                _ => {}
            }
            let next_region = regions.peek().map(|r| r.branch0).unwrap_or(n);
            let mut j = i + 1;
            while j < n && j < next_region && !ops[j].is_control() && !entries.contains(&j) {
                j += 1;
            }
            let block = if j - i > 1 { collapse(&ops[i..j], stack_size) } else { None };
            match block {
                Some(block) => transitions.push(Transition::Collapsed { span: i..j, block }),
                None => {
                    for (k, &op) in ops.iter().enumerate().take(j).skip(i) {
                        transitions.push(Transition::Primitive { index: k, op });
                    }
                }
            }
            i = j;
        }

        let mut orig_to_plan = vec![0; n];
        for (t, tr) in transitions.iter().enumerate() {
            for k in tr.span() {
                orig_to_plan[k] = t;
            }
        }
        ExecutionPlan {
            entry: orig_to_plan[p.entry],
            halt: orig_to_plan[n - 1],
            transitions,
            orig_to_plan,
            program_len: n,
        }
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Whether an original index begins a transition.
    pub fn starts_at(&self, index: usize) -> bool {
        self.transitions[self.orig_to_plan[index]].span().start == index
    }

    /// Number of plan transitions a discrete execution would take, given
    /// the original instruction indices it executed.
    pub fn count_steps(&self, executed: &[usize]) -> usize {
        executed.iter().filter(|&&i| self.starts_at(i)).count()
    }

    /// Mirror of the program dump with `collapsed[i..j]` / `interpIf[i..j]` rows.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for (k, t) in self.transitions.iter().enumerate() {
            let line = match t {
                Transition::Primitive { op, .. } => {
                    format!("{}\t{}", op.mnemonic(), op.arg().map(|a| a.to_string()).unwrap_or_default())
                }
                Transition::Slot { slot, .. } => format!("SLOT\t{slot}"),
                Transition::Halt { .. } => "HALT\t".into(),
                Transition::Collapsed { span, .. } => format!("collapsed[{}..{}]\t", span.start, span.end),
                Transition::InterpolatedIf { region, .. } => {
                    format!("interpIf[{}..{}]\t", region.branch0, region.end)
                }
            };
            s.push_str(&format!("{k}\t{line}\n"));
        }
        s
    }
}
