use std::collections::BTreeMap;
use std::fmt;

/// Lowered instruction set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Opcode {
    Lit(usize),
    Inc,
    Dec,
    Dup,
    Swap,
    Over,
    Drop,
    Add,
    Sub,
    Mul,
    Div,
    Fetch,
    Store,
    Gt,
    Lt,
    Eq,
    ToR,
    FromR,
    RFetch,
    Branch(usize),
    Branch0(usize),
    Call(usize),
    Ret,
    Halt,
    Slot(usize),
}

impl Opcode {
    /// Primitive for a source word, excluding control words and literals.
    pub fn from_word(word: &str) -> Option<Opcode> {
        Some(match word {
            "1+" => Opcode::Inc,
            "1-" => Opcode::Dec,
            "DUP" => Opcode::Dup,
            "SWAP" => Opcode::Swap,
            "OVER" => Opcode::Over,
            "DROP" => Opcode::Drop,
            "+" => Opcode::Add,
            "-" => Opcode::Sub,
            "*" => Opcode::Mul,
            "/" => Opcode::Div,
            "@" => Opcode::Fetch,
            "!" => Opcode::Store,
            ">" => Opcode::Gt,
            "<" => Opcode::Lt,
            "=" => Opcode::Eq,
            ">R" => Opcode::ToR,
            "R>" => Opcode::FromR,
            "R@" | "@R" => Opcode::RFetch,
            _ => return None,
        })
    }

    pub fn mnemonic(&self) -> &'static str {
        match self {
            Opcode::Lit(_) => "LIT",
            Opcode::Inc => "1+",
            Opcode::Dec => "1-",
            Opcode::Dup => "DUP",
            Opcode::Swap => "SWAP",
            Opcode::Over => "OVER",
            Opcode::Drop => "DROP",
            Opcode::Add => "+",
            Opcode::Sub => "-",
            Opcode::Mul => "*",
            Opcode::Div => "/",
            Opcode::Fetch => "@",
            Opcode::Store => "!",
            Opcode::Gt => ">",
            Opcode::Lt => "<",
            Opcode::Eq => "=",
            Opcode::ToR => ">R",
            Opcode::FromR => "R>",
            Opcode::RFetch => "@R",
            Opcode::Branch(_) => "BRANCH",
            Opcode::Branch0(_) => "BRANCH0",
            Opcode::Call(_) => "CALL",
            Opcode::Ret => "RET",
            Opcode::Halt => "HALT",
            Opcode::Slot(_) => "SLOT",
        }
    }

    pub fn arg(&self) -> Option<usize> {
        match *self {
            Opcode::Lit(k) | Opcode::Branch(k) | Opcode::Branch0(k) | Opcode::Call(k) | Opcode::Slot(k) => Some(k),
            _ => None,
        }
    }

    /// Target of a jump or call, if any.
    pub fn target(&self) -> Option<usize> {
        match *self {
            Opcode::Branch(t) | Opcode::Branch0(t) | Opcode::Call(t) => Some(t),
            _ => None,
        }
    }

    pub fn is_control(&self) -> bool {
        matches!(
            self,
            Opcode::Branch(_) | Opcode::Branch0(_) | Opcode::Call(_) | Opcode::Ret | Opcode::Halt | Opcode::Slot(_)
        )
    }
}

impl fmt::Display for Opcode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.arg() {
            Some(a) => write!(f, "{} {}", self.mnemonic(), a),
            None => f.write_str(self.mnemonic()),
        }
    }
}

/// Slot body captured by the compiler; parsed by the sketch layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SlotSource {
    pub body: String,
    pub line: usize,
}

/// Where an instruction came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SourceInfo {
    /// Index of the originating token in the token stream.
    pub token: usize,
    pub text: String,
    pub line: usize,
}

/// A lowered `IF .. [ELSE ..] THEN`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IfRegion {
    /// Index of the `BRANCH0`.
    pub branch0: usize,
    /// Index of the `BRANCH` that skips the else part, when present.
    pub skip_else: Option<usize>,
    /// First index after the whole construct.
    pub end: usize,
}

impl IfRegion {
    pub fn then_body(&self) -> std::ops::Range<usize> {
        self.branch0 + 1..self.skip_else.unwrap_or(self.end)
    }

    pub fn else_body(&self) -> std::ops::Range<usize> {
        match self.skip_else {
            Some(b) => b + 1..self.end,
            None => self.end..self.end,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LoweredProgram {
    pub instructions: Vec<Opcode>,
    /// Subroutine name to entry index.
    pub labels: BTreeMap<String, usize>,
    /// First instruction of top-level code.
    pub entry: usize,
    pub slots: Vec<SlotSource>,
    pub source: Vec<SourceInfo>,
    /// Subroutine name to the line of its `:`.
    pub definition_lines: BTreeMap<String, usize>,
    pub if_regions: Vec<IfRegion>,
    /// Named heap allocations (`VARIABLE`, `CREATE`) and DO..LOOP counters.
    pub heap_symbols: BTreeMap<String, usize>,
    pub heap_used: usize,
}

impl LoweredProgram {
    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }

    pub fn halt_index(&self) -> usize {
        self.instructions.len() - 1
    }

    /// Name of the subroutine whose body contains `index`.
    pub fn subroutine_at(&self, index: usize) -> Option<&str> {
        self.labels
            .iter()
            .filter(|(_, &start)| start <= index && index < self.entry)
            .max_by_key(|(_, &start)| start)
            .map(|(name, _)| name.as_str())
    }

    /// One instruction per line: `idx\topcode\targ`.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for (i, op) in self.instructions.iter().enumerate() {
            let arg = op.arg().map(|a| a.to_string()).unwrap_or_default();
            s.push_str(&format!("{i}\t{}\t{arg}\n", op.mnemonic()));
        }
        s
    }
}
