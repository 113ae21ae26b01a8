use std::collections::{BTreeMap, BTreeSet, HashMap};

use super::program::{IfRegion, LoweredProgram, Opcode, SlotSource, SourceInfo};
use super::token::{Token, TokenKind};
use super::ForthError;

#[derive(Clone, Copy, Debug)]
pub struct CompileOptions {
    /// Value size v: literals must be below it and the heap has v cells.
    pub value_size: usize,
}

struct Definition {
    name: String,
    line: usize,
    body: Vec<usize>,
    end: usize,
}

enum Control {
    If { branch0: usize, skip_else: Option<usize>, line: usize },
    Begin { start: usize, line: usize },
    While { start: usize, branch0: usize, line: usize },
    Do { body: usize, skip: usize, index: usize, limit: usize, line: usize },
}

struct Emitter<'a> {
    tokens: &'a [Token],
    opts: CompileOptions,
    colon: HashMap<String, usize>,
    macros: HashMap<String, Vec<usize>>,
    heap: BTreeMap<String, usize>,
    heap_used: usize,
    code: Vec<Opcode>,
    source: Vec<SourceInfo>,
    calls: Vec<(usize, String, usize)>,
    slots: Vec<SlotSource>,
    if_regions: Vec<IfRegion>,
    has_do: BTreeSet<String>,
    callees: BTreeMap<String, BTreeSet<String>>,
}

fn upper(t: &Token) -> String {
    t.text.to_ascii_uppercase()
}

fn unbalanced(line: usize, what: &str) -> ForthError {
    ForthError::Unbalanced { line, message: what.to_string() }
}

impl<'a> Emitter<'a> {
    fn emit(&mut self, op: Opcode, tok: usize) -> usize {
        let t = &self.tokens[tok];
        self.code.push(op);
        self.source.push(SourceInfo { token: tok, text: t.text.clone(), line: t.line });
        self.code.len() - 1
    }

    fn alloc(&mut self, name: String, cells: usize, line: usize) -> Result<usize, ForthError> {
        let addr = self.heap_used;
        if addr + cells > self.opts.value_size {
            return Err(ForthError::HeapExhausted { line, requested: cells, capacity: self.opts.value_size });
        }
        self.heap_used += cells;
        self.heap.insert(name, addr);
        Ok(addr)
    }

    fn patch(&mut self, at: usize, target: usize) {
        self.code[at] = match self.code[at] {
            Opcode::Branch(_) => Opcode::Branch(target),
            Opcode::Branch0(_) => Opcode::Branch0(target),
            other => other,
        };
    }

    fn body(&mut self, body: &[usize], owner: Option<&str>, expanding: &mut Vec<String>) -> Result<(), ForthError> {
        let mut ctl: Vec<Control> = Vec::new();
        for &ti in body {
            let tok = &self.tokens[ti];
            let line = tok.line;
            match tok.kind {
                TokenKind::Number => {
                    let k: usize = tok.text.parse().map_err(|_| ForthError::LiteralRange {
                        line,
                        literal: tok.text.clone(),
                        value_size: self.opts.value_size,
                    })?;
                    if k >= self.opts.value_size {
                        return Err(ForthError::LiteralRange {
                            line,
                            literal: tok.text.clone(),
                            value_size: self.opts.value_size,
                        });
                    }
                    self.emit(Opcode::Lit(k), ti);
                    continue;
                }
                TokenKind::Slot => {
                    let id = self.slots.len();
                    self.slots.push(SlotSource { body: tok.text.clone(), line });
                    self.emit(Opcode::Slot(id), ti);
                    continue;
                }
                TokenKind::Word => {}
                _ => return Err(ForthError::Parse { line, message: format!("unexpected {:?} inside code", tok.text) }),
            }
            let word = upper(tok);
            match word.as_str() {
                "IF" => {
                    let b = self.emit(Opcode::Branch0(0), ti);
                    ctl.push(Control::If { branch0: b, skip_else: None, line });
                }
                "ELSE" => match ctl.pop() {
                    Some(Control::If { branch0, skip_else: None, line: l }) => {
                        let b = self.emit(Opcode::Branch(0), ti);
                        self.patch(branch0, b + 1);
                        ctl.push(Control::If { branch0, skip_else: Some(b), line: l });
                    }
                    _ => return Err(unbalanced(line, "ELSE without IF")),
                },
                "THEN" => match ctl.pop() {
                    Some(Control::If { branch0, skip_else, .. }) => {
                        let end = self.code.len();
                        match skip_else {
                            Some(b) => self.patch(b, end),
                            None => self.patch(branch0, end),
                        }
                        self.if_regions.push(IfRegion { branch0, skip_else, end });
                    }
                    _ => return Err(unbalanced(line, "THEN without IF")),
                },
                "BEGIN" => ctl.push(Control::Begin { start: self.code.len(), line }),
                "WHILE" => match ctl.pop() {
                    Some(Control::Begin { start, line: l }) => {
                        let b = self.emit(Opcode::Branch0(0), ti);
                        ctl.push(Control::While { start, branch0: b, line: l });
                    }
                    _ => return Err(unbalanced(line, "WHILE without BEGIN")),
                },
                "REPEAT" => match ctl.pop() {
                    Some(Control::While { start, branch0, .. }) => {
                        self.emit(Opcode::Branch(start), ti);
                        let end = self.code.len();
                        self.patch(branch0, end);
                    }
                    _ => return Err(unbalanced(line, "REPEAT without BEGIN..WHILE")),
                },
                "DO" => {
                    let n = self.heap.len();
                    let index = self.alloc(format!("do{n}@{line}.index"), 1, line)?;
                    let limit = self.alloc(format!("do{n}@{line}.limit"), 1, line)?;
                    self.emit(Opcode::Lit(index), ti);
                    self.emit(Opcode::Store, ti);
                    self.emit(Opcode::Lit(limit), ti);
                    self.emit(Opcode::Store, ti);
                    let skip = self.emit(Opcode::Branch(0), ti);
                    if let Some(o) = owner {
                        self.has_do.insert(o.to_string());
                    }
                    ctl.push(Control::Do { body: skip + 1, skip, index, limit, line });
                }
                "LOOP" => match ctl.pop() {
                    Some(Control::Do { body, skip, index, limit, .. }) => {
                        self.emit(Opcode::Lit(index), ti);
                        self.emit(Opcode::Fetch, ti);
                        self.emit(Opcode::Inc, ti);
                        self.emit(Opcode::Lit(index), ti);
                        self.emit(Opcode::Store, ti);
                        let test = self.code.len();
                        self.patch(skip, test);
                        self.emit(Opcode::Lit(index), ti);
                        self.emit(Opcode::Fetch, ti);
                        self.emit(Opcode::Lit(limit), ti);
                        self.emit(Opcode::Fetch, ti);
                        self.emit(Opcode::Eq, ti);
                        self.emit(Opcode::Branch0(body), ti);
                    }
                    _ => return Err(unbalanced(line, "LOOP without DO")),
                },
                _ => {
                    if let Some(op) = Opcode::from_word(&word) {
                        self.emit(op, ti);
                    } else if self.colon.contains_key(&word) {
                        let at = self.emit(Opcode::Call(0), ti);
                        self.calls.push((at, word.clone(), line));
                        if let Some(o) = owner {
                            self.callees.entry(o.to_string()).or_default().insert(word);
                        }
                    } else if let Some(mbody) = self.macros.get(&word).cloned() {
                        if expanding.contains(&word) {
                            return Err(ForthError::RecursiveMacro { line, name: word });
                        }
                        expanding.push(word);
                        self.body(&mbody, owner, expanding)?;
                        expanding.pop();
                    } else if let Some(&addr) = self.heap.get(&word) {
                        self.emit(Opcode::Lit(addr), ti);
                    } else {
                        return Err(ForthError::UndefinedWord { line, word: tok.text.clone() });
                    }
                }
            }
        }
        if let Some(open) = ctl.pop() {
            let (line, what) = match open {
                Control::If { line, .. } => (line, "IF without THEN"),
                Control::Begin { line, .. } => (line, "BEGIN without WHILE..REPEAT"),
                Control::While { line, .. } => (line, "WHILE without REPEAT"),
                Control::Do { line, .. } => (line, "DO without LOOP"),
            };
            return Err(unbalanced(line, what));
        }
        Ok(())
    }
}

/// Lower a token stream: subroutines first, then top-level code, then one HALT.
pub fn compile(tokens: &[Token], opts: CompileOptions) -> Result<LoweredProgram, ForthError> {
    let mut defs: Vec<Definition> = Vec::new();
    let mut macros: HashMap<String, Vec<usize>> = HashMap::new();
    let mut main: Vec<usize> = Vec::new();
    let mut heap_decls: Vec<(String, usize, usize)> = Vec::new();

    let mut i = 0;
    while i < tokens.len() {
        let tok = &tokens[i];
        match tok.kind {
            TokenKind::ColonDefStart | TokenKind::MacroDefStart => {
                let is_macro = tok.kind == TokenKind::MacroDefStart;
                let name_tok = tokens
                    .get(i + 1)
                    .filter(|t| t.kind == TokenKind::Word)
                    .ok_or_else(|| ForthError::Parse { line: tok.line, message: "definition without a name".into() })?;
                let name = upper(name_tok);
                let mut j = i + 2;
                let mut body = Vec::new();
                while j < tokens.len() && tokens[j].kind != TokenKind::ColonDefEnd {
                    if matches!(tokens[j].kind, TokenKind::ColonDefStart | TokenKind::MacroDefStart) {
                        return Err(unbalanced(tokens[j].line, "nested definition"));
                    }
                    body.push(j);
                    j += 1;
                }
                if j == tokens.len() {
                    return Err(unbalanced(tok.line, "definition without ;"));
                }
                let taken = defs.iter().any(|d| d.name == name) || macros.contains_key(&name);
                if taken || Opcode::from_word(&name).is_some() {
                    return Err(ForthError::Redefinition { line: tok.line, name });
                }
                if is_macro {
                    macros.insert(name, body);
                } else {
                    defs.push(Definition { name, line: tok.line, body, end: j });
                }
                i = j + 1;
            }
            TokenKind::ColonDefEnd => return Err(unbalanced(tok.line, "; outside a definition")),
            _ if tok.kind == TokenKind::Word && upper(tok) == "VARIABLE" => {
                let name = tokens
                    .get(i + 1)
                    .filter(|t| t.kind == TokenKind::Word)
                    .ok_or_else(|| ForthError::Parse { line: tok.line, message: "VARIABLE without a name".into() })?;
                heap_decls.push((upper(name), 1, tok.line));
                i += 2;
            }
            _ if tok.kind == TokenKind::Word && upper(tok) == "CREATE" => {
                let name = tokens.get(i + 1).filter(|t| t.kind == TokenKind::Word);
                let count = tokens.get(i + 2).filter(|t| t.kind == TokenKind::Number);
                let allot = tokens.get(i + 3).filter(|t| upper(t) == "ALLOT");
                match (name, count, allot) {
                    (Some(n), Some(c), Some(_)) => {
                        let cells = c.text.parse().unwrap_or(usize::MAX);
                        heap_decls.push((upper(n), cells, tok.line));
                        i += 4;
                    }
                    _ => {
                        return Err(ForthError::Parse {
                            line: tok.line,
                            message: "expected CREATE <name> <n> ALLOT".into(),
                        })
                    }
                }
            }
            _ => {
                main.push(i);
                i += 1;
            }
        }
    }

    let mut em = Emitter {
        tokens,
        opts,
        colon: defs.iter().enumerate().map(|(k, d)| (d.name.clone(), k)).collect(),
        macros,
        heap: BTreeMap::new(),
        heap_used: 0,
        code: Vec::new(),
        source: Vec::new(),
        calls: Vec::new(),
        slots: Vec::new(),
        if_regions: Vec::new(),
        has_do: BTreeSet::new(),
        callees: BTreeMap::new(),
    };
    for (name, cells, line) in heap_decls {
        if em.heap.contains_key(&name) {
            return Err(ForthError::Redefinition { line, name });
        }
        em.alloc(name, cells, line)?;
    }

    let mut labels = BTreeMap::new();
    let mut definition_lines = BTreeMap::new();
    for d in &defs {
        labels.insert(d.name.clone(), em.code.len());
        definition_lines.insert(d.name.clone(), d.line);
        em.body(&d.body, Some(&d.name), &mut Vec::new())?;
        em.emit(Opcode::Ret, d.end);
    }
    let entry = em.code.len();
    em.body(&main, None, &mut Vec::new())?;
    let halt_tok = tokens.len();
    em.code.push(Opcode::Halt);
    em.source.push(SourceInfo {
        token: halt_tok,
        text: "HALT".into(),
        line: tokens.last().map(|t| t.line).unwrap_or(1),
    });

    for (at, name, _) in std::mem::take(&mut em.calls) {
        em.code[at] = Opcode::Call(labels[&name]);
    }

    for name in &em.has_do {
        if reaches(&em.callees, name, name) {
            let line = definition_lines[name];
            return Err(ForthError::RecursiveLoop { line, name: name.clone() });
        }
    }

    Ok(LoweredProgram {
        instructions: em.code,
        labels,
        entry,
        slots: em.slots,
        source: em.source,
        definition_lines,
        if_regions: em.if_regions,
        heap_symbols: em.heap,
        heap_used: em.heap_used,
    })
}

fn reaches(graph: &BTreeMap<String, BTreeSet<String>>, from: &str, to: &str) -> bool {
    let mut seen = BTreeSet::new();
    let mut stack = vec![from.to_string()];
    while let Some(n) = stack.pop() {
        for next in graph.get(&n).into_iter().flatten() {
            if next == to {
                return true;
            }
            if seen.insert(next.clone()) {
                stack.push(next.clone());
            }
        }
    }
    false
}

/// Tokenize and compile in one go.
pub fn compile_source(source: &str, opts: CompileOptions) -> Result<LoweredProgram, ForthError> {
    compile(&super::tokenize(source)?, opts)
}
