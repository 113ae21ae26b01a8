use std::fmt;

use crate::forth::{Dims, Opcode};

use super::SketchError;

/// Stack-relative or heap reference: `D0` (TOS), `D-1` (NOS), `R0`, `H3`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ElementRef {
    Data(usize),
    Ret(usize),
    Heap(usize),
}

impl ElementRef {
    pub fn parse(s: &str) -> Result<ElementRef, String> {
        let upper = s.to_ascii_uppercase();
        let (kind, rest) = upper.split_at(1.min(upper.len()));
        let depth = |rest: &str| -> Result<usize, String> {
            if rest == "0" {
                return Ok(0);
            }
            match rest.strip_prefix('-').and_then(|n| n.parse::<usize>().ok()) {
                Some(n) if n > 0 => Ok(n),
                _ => Err(format!("bad reference {s}: expected 0 or a negative offset")),
            }
        };
        match kind {
            "D" => Ok(ElementRef::Data(depth(rest)?)),
            "R" => Ok(ElementRef::Ret(depth(rest)?)),
            "H" => rest.parse().map(ElementRef::Heap).map_err(|_| format!("bad heap reference {s}")),
            _ => Err(format!("bad reference {s}")),
        }
    }
}

impl fmt::Display for ElementRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            ElementRef::Data(0) => write!(f, "D0"),
            ElementRef::Data(k) => write!(f, "D-{k}"),
            ElementRef::Ret(0) => write!(f, "R0"),
            ElementRef::Ret(k) => write!(f, "R-{k}"),
            ElementRef::Heap(a) => write!(f, "H{a}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Trainable constant of the given width (value size when `None`).
    Static(Option<usize>),
    Observe(Vec<ElementRef>),
    Linear(usize),
    Act(Activation),
}

/// A word a `choose` decoder may select.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChoiceWord {
    Nop,
    Op(Opcode),
}

impl fmt::Display for ChoiceWord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChoiceWord::Nop => write!(f, "NOP"),
            ChoiceWord::Op(Opcode::Lit(k)) => write!(f, "{k}"),
            ChoiceWord::Op(op) => write!(f, "{}", op.mnemonic()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Decoder {
    Choose(Vec<ChoiceWord>),
    Manipulate(Vec<ElementRef>),
    Permute(Vec<ElementRef>),
}

/// Largest number of elements a `permute` decoder may reorder.
pub const PERMUTE_CAP: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SlotSpec {
    pub id: usize,
    pub stages: Vec<Stage>,
    pub decoder: Decoder,
}

fn parse_stage(text: &str) -> Result<Stage, String> {
    let mut parts = text.split_whitespace();
    let head = parts.next().ok_or("empty stage")?.to_ascii_lowercase();
    let rest: Vec<&str> = parts.collect();
    let no_args = |stage: Stage| if rest.is_empty() { Ok(stage) } else { Err(format!("{head} takes no arguments")) };
    match head.as_str() {
        "observe" => {
            if rest.is_empty() {
                return Err("observe needs at least one reference".into());
            }
            Ok(Stage::Observe(rest.iter().map(|r| ElementRef::parse(r)).collect::<Result<_, _>>()?))
        }
        "static" => match rest.as_slice() {
            [] => Ok(Stage::Static(None)),
            [n] => match n.parse() {
                Ok(w) if w > 0 => Ok(Stage::Static(Some(w))),
                _ => Err(format!("bad static width {n}")),
            },
            _ => Err("static takes at most one width".into()),
        },
        "linear" => match rest.as_slice() {
            [n] => match n.parse() {
                Ok(w) if w > 0 => Ok(Stage::Linear(w)),
                _ => Err(format!("bad linear width {n}")),
            },
            _ => Err("linear takes exactly one width".into()),
        },
        "sigmoid" => no_args(Stage::Act(Activation::Sigmoid)),
        "tanh" => no_args(Stage::Act(Activation::Tanh)),
        other => Err(format!("unknown stage {other}")),
    }
}

fn parse_choice(word: &str) -> Result<ChoiceWord, String> {
    let upper = word.to_ascii_uppercase();
    if upper == "NOP" {
        return Ok(ChoiceWord::Nop);
    }
    if let Ok(k) = upper.parse::<usize>() {
        return Ok(ChoiceWord::Op(Opcode::Lit(k)));
    }
    Opcode::from_word(&upper).map(ChoiceWord::Op).ok_or_else(|| format!("{word} cannot be chosen"))
}

fn parse_decoder(text: &str) -> Result<Decoder, String> {
    let mut parts = text.split_whitespace();
    let head = parts.next().ok_or("missing decoder")?.to_ascii_lowercase();
    let args: Vec<&str> = parts.collect();
    if args.is_empty() {
        return Err(format!("{head} needs arguments"));
    }
    match head.as_str() {
        "choose" => Ok(Decoder::Choose(args.iter().map(|w| parse_choice(w)).collect::<Result<_, _>>()?)),
        "manipulate" => Ok(Decoder::Manipulate(args.iter().map(|r| ElementRef::parse(r)).collect::<Result<_, _>>()?)),
        "permute" => {
            let refs: Vec<ElementRef> = args.iter().map(|r| ElementRef::parse(r)).collect::<Result<_, _>>()?;
            if refs.len() > PERMUTE_CAP {
                return Err(format!("permute over {} elements exceeds the cap of {PERMUTE_CAP}", refs.len()));
            }
            Ok(Decoder::Permute(refs))
        }
        other => Err(format!("unknown decoder {other}")),
    }
}

/// Parse the text between `{` and `}`.
pub fn parse_slot(id: usize, body: &str) -> Result<SlotSpec, SketchError> {
    let err = |message: String| SketchError::Parse { slot: id, message };
    let parts: Vec<&str> = body.split("->").map(str::trim).collect();
    if parts.len() < 2 {
        return Err(err("expected `encoder -> decoder`".into()));
    }
    let (dec, enc) = parts.split_last().unwrap();
    let decoder = parse_decoder(dec).map_err(err)?;
    let stages: Vec<Stage> = enc.iter().map(|s| parse_stage(s)).collect::<Result<_, _>>().map_err(err)?;
    match stages.first() {
        Some(Stage::Observe(_)) | Some(Stage::Static(_)) => {}
        _ => return Err(err("the first stage must be observe or static".into())),
    }
    if stages[1..].iter().any(|s| matches!(s, Stage::Observe(_) | Stage::Static(_))) {
        return Err(err("observe and static may only start the encoder".into()));
    }
    Ok(SlotSpec { id, stages, decoder })
}

impl SlotSpec {
    /// Check references and literals against machine dimensions.
    pub fn validate(&self, dims: Dims) -> Result<(), SketchError> {
        let err = |message: String| SketchError::Invalid { slot: self.id, message };
        let check = |r: &ElementRef| match *r {
            ElementRef::Data(k) | ElementRef::Ret(k) if k >= dims.capacity() => {
                Err(err(format!("{r} is deeper than the stack capacity {}", dims.capacity())))
            }
            ElementRef::Heap(a) if a >= dims.value_size => Err(err(format!("{r} is outside the heap"))),
            _ => Ok(()),
        };
        for s in &self.stages {
            if let Stage::Observe(refs) = s {
                refs.iter().try_for_each(check)?;
            }
        }
        match &self.decoder {
            Decoder::Choose(words) => {
                for w in words {
                    match w {
                        ChoiceWord::Op(Opcode::Lit(k)) if *k >= dims.value_size => {
                            return Err(err(format!("literal {k} is not below value size {}", dims.value_size)))
                        }
                        _ => {}
                    }
                }
            }
            Decoder::Manipulate(refs) | Decoder::Permute(refs) => refs.iter().try_for_each(check)?,
        }
        Ok(())
    }

    /// Output width of the decoder projection.
    pub fn arity(&self, dims: Dims) -> usize {
        match &self.decoder {
            Decoder::Choose(w) => w.len(),
            Decoder::Manipulate(r) => r.len() * dims.value_size,
            Decoder::Permute(r) => permutations(r.len()).len(),
        }
    }
}

/// All permutations of `0..m` in lexicographic order.
pub fn permutations(m: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut Vec<bool>, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                rec(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; m], &mut out);
    out
}
