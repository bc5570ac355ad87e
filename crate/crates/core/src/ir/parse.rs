//! Textual IR parser. Parsing is total: malformed input produces
//! diagnostics with line/column positions, never a panic.

use super::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum DiagKind {
    /// Tokenization / grammar error.
    Syntax,
    /// Unknown name, bad reference, malformed type use.
    Resolve,
    /// Single-assignment violation or use without a dominating def.
    Ssa,
    /// Block structure / terminator / reachability problem.
    Cfg,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct Diagnostic {
    pub line: usize,
    pub col: usize,
    pub kind: DiagKind,
    pub msg: String,
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}: {:?}: {}", self.line, self.col, self.kind, self.msg)
    }
}

fn diag(line: usize, col: usize, kind: DiagKind, msg: impl Into<String>) -> Diagnostic {
    Diagnostic { line, col, kind, msg: msg.into() }
}

// ---------------------------------------------------------------------------
// Raw (unresolved) AST
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub(crate) enum RawOperand {
    Local(String),
    Global(String), // resolves to a global variable or a function reference
}

#[derive(Debug, Clone)]
pub(crate) enum RawIndex {
    Const(u64),
    Var(String),
}

#[derive(Debug, Clone)]
pub(crate) enum RawSelector {
    Name(String),
    Var(String),
}

#[derive(Debug, Clone)]
pub(crate) enum RawInstr {
    Alloca { ty: String, bytes: u64 },
    Malloc { bytes: u64 },
    Copy { src: RawOperand },
    Cast { ty: String, stars: u8, src: RawOperand },
    Load { addr: RawOperand },
    Store { addr: RawOperand, value: RawOperand },
    Phi { arms: Vec<(RawOperand, String)> },
    Array { base: RawOperand, index: RawIndex },
    Field { base: RawOperand, selector: RawSelector },
    Constructor { ty: String, receiver: RawOperand },
    DynCast { ty: String, stars: u8, src: RawOperand },
    Call { callee: RawOperand, args: Vec<RawOperand> },
    Ret { value: Option<RawOperand> },
    Br { cond: RawOperand, then_dest: String, else_dest: String },
    Jmp { target: String },
}

#[derive(Debug, Clone)]
pub(crate) struct RawStmt {
    pub line: usize,
    pub result: Option<String>,
    pub instr: RawInstr,
}

#[derive(Debug, Clone)]
pub(crate) struct RawBlock {
    pub line: usize,
    pub name: String,
    pub stmts: Vec<RawStmt>,
}

#[derive(Debug, Clone)]
pub(crate) struct RawFn {
    pub line: usize,
    pub name: String,
    pub params: Vec<String>,
    pub blocks: Vec<RawBlock>,
}

#[derive(Debug, Clone)]
pub(crate) enum RawTypeKind {
    Struct { fields: Vec<(String, String)> },
    Class { bases: Vec<String>, declares_virtual: bool, fields: Vec<(String, String)> },
    Array { count: u64, elem: String },
}

#[derive(Debug, Clone)]
pub(crate) struct RawType {
    pub line: usize,
    pub name: String,
    pub kind: RawTypeKind,
}

#[derive(Debug, Clone)]
pub(crate) struct RawGlobal {
    pub line: usize,
    pub name: String,
    pub ty: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct RawProgram {
    pub types: Vec<RawType>,
    pub globals: Vec<RawGlobal>,
    pub funcs: Vec<RawFn>,
}

// ---------------------------------------------------------------------------
// Tokenizer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tok {
    Ident(String),
    Local(String),
    Global(String),
    Int(u64),
    Punct(char),
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Ident(s) => format!("`{s}`"),
            Tok::Local(s) => format!("`%{s}`"),
            Tok::Global(s) => format!("`@{s}`"),
            Tok::Int(n) => format!("`{n}`"),
            Tok::Punct(c) => format!("`{c}`"),
        }
    }
}

fn is_ident_start(c: char) -> bool {
    c.is_ascii_alphabetic() || c == '_'
}

fn is_ident_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_'
}

/// Tokenize one line, stripping `//` comments.
fn lex_line(line: &str, line_no: usize) -> Result<Vec<(usize, Tok)>, Diagnostic> {
    let body = match line.find("//") {
        Some(i) => &line[..i],
        None => line,
    };
    let mut toks = Vec::new();
    let chars: Vec<char> = body.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let col = i + 1;
        if c.is_whitespace() {
            i += 1;
        } else if c == '%' || c == '@' {
            let start = i + 1;
            let mut j = start;
            while j < chars.len() && is_ident_char(chars[j]) {
                j += 1;
            }
            if j == start {
                return Err(diag(line_no, col, DiagKind::Syntax, format!("`{c}` must be followed by a name")));
            }
            let name: String = chars[start..j].iter().collect();
            toks.push((col, if c == '%' { Tok::Local(name) } else { Tok::Global(name) }));
            i = j;
        } else if is_ident_start(c) {
            let mut j = i;
            while j < chars.len() && is_ident_char(chars[j]) {
                j += 1;
            }
            toks.push((col, Tok::Ident(chars[i..j].iter().collect())));
            i = j;
        } else if c.is_ascii_digit() {
            let mut j = i;
            while j < chars.len() && chars[j].is_ascii_digit() {
                j += 1;
            }
            let text: String = chars[i..j].iter().collect();
            let n = text
                .parse::<u64>()
                .map_err(|_| diag(line_no, col, DiagKind::Syntax, format!("integer `{text}` out of range")))?;
            toks.push((col, Tok::Int(n)));
            i = j;
        } else if "=,:{}()[]*".contains(c) {
            toks.push((col, Tok::Punct(c)));
            i += 1;
        } else {
            return Err(diag(line_no, col, DiagKind::Syntax, format!("unexpected character `{c}`")));
        }
    }
    Ok(toks)
}

// ---------------------------------------------------------------------------
// Line parser
// ---------------------------------------------------------------------------

struct LineParser<'a> {
    toks: &'a [(usize, Tok)],
    pos: usize,
    line: usize,
}

impl<'a> LineParser<'a> {
    fn new(toks: &'a [(usize, Tok)], line: usize) -> Self {
        LineParser { toks, pos: 0, line }
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(_, t)| t)
    }

    fn col(&self) -> usize {
        self.toks.get(self.pos).map(|(c, _)| *c).unwrap_or_else(|| {
            self.toks.last().map(|(c, _)| c + 1).unwrap_or(1)
        })
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).map(|(_, t)| t.clone());
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn err(&self, msg: impl Into<String>) -> Diagnostic {
        diag(self.line, self.col(), DiagKind::Syntax, msg)
    }

    fn eat_punct(&mut self, c: char) -> bool {
        if self.peek() == Some(&Tok::Punct(c)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect_punct(&mut self, c: char) -> Result<(), Diagnostic> {
        if self.eat_punct(c) {
            Ok(())
        } else {
            Err(self.err(format!("expected `{c}`{}", self.found_str())))
        }
    }

    fn found_str(&self) -> String {
        match self.peek() {
            Some(t) => format!(", found {}", t.describe()),
            None => ", found end of line".to_string(),
        }
    }

    fn expect_ident(&mut self, what: &str) -> Result<String, Diagnostic> {
        match self.peek() {
            Some(Tok::Ident(_)) => match self.next() {
                Some(Tok::Ident(s)) => Ok(s),
                _ => unreachable!(),
            },
            _ => Err(self.err(format!("expected {what}{}", self.found_str()))),
        }
    }

    fn expect_int(&mut self, what: &str) -> Result<u64, Diagnostic> {
        match self.peek() {
            Some(Tok::Int(_)) => match self.next() {
                Some(Tok::Int(n)) => Ok(n),
                _ => unreachable!(),
            },
            _ => Err(self.err(format!("expected {what}{}", self.found_str()))),
        }
    }

    fn expect_local(&mut self, what: &str) -> Result<String, Diagnostic> {
        match self.peek() {
            Some(Tok::Local(_)) => match self.next() {
                Some(Tok::Local(s)) => Ok(s),
                _ => unreachable!(),
            },
            _ => Err(self.err(format!("expected {what}{}", self.found_str()))),
        }
    }

    fn expect_operand(&mut self) -> Result<RawOperand, Diagnostic> {
        match self.peek() {
            Some(Tok::Local(_)) => match self.next() {
                Some(Tok::Local(s)) => Ok(RawOperand::Local(s)),
                _ => unreachable!(),
            },
            Some(Tok::Global(_)) => match self.next() {
                Some(Tok::Global(s)) => Ok(RawOperand::Global(s)),
                _ => unreachable!(),
            },
            _ => Err(self.err(format!("expected a `%var` or `@name` operand{}", self.found_str()))),
        }
    }

    fn expect_end(&self) -> Result<(), Diagnostic> {
        if self.pos == self.toks.len() {
            Ok(())
        } else {
            Err(self.err(format!("trailing tokens{}", self.found_str())))
        }
    }

    /// `TYPE` followed by `stars` asterisks (`T`, `T*`, `T**`, ...).
    fn parse_type_stars(&mut self) -> Result<(String, u8), Diagnostic> {
        let name = self.expect_ident("a type name")?;
        let mut stars = 0u8;
        while self.eat_punct('*') {
            stars = stars.saturating_add(1);
        }
        Ok((name, stars))
    }
}

// ---------------------------------------------------------------------------
// Program-level parsing (line oriented)
// ---------------------------------------------------------------------------

/// Parse the textual syntax into a raw AST, collecting syntax diagnostics.
pub(crate) fn parse_raw(src: &str) -> (RawProgram, Vec<Diagnostic>) {
    let mut prog = RawProgram::default();
    let mut diags = Vec::new();
    // (function, finished) — blocks are appended to the open function.
    let mut open_fn: Option<RawFn> = None;

    for (idx, raw_line) in src.lines().enumerate() {
        let line_no = idx + 1;
        let toks = match lex_line(raw_line, line_no) {
            Ok(t) => t,
            Err(d) => {
                diags.push(d);
                continue;
            }
        };
        if toks.is_empty() {
            continue;
        }
        let mut p = LineParser::new(&toks, line_no);

        // Function end.
        if p.eat_punct('}') {
            if let Err(d) = p.expect_end() {
                diags.push(d);
            }
            match open_fn.take() {
                Some(f) => prog.funcs.push(f),
                None => diags.push(diag(line_no, 1, DiagKind::Syntax, "`}` outside a function")),
            }
            continue;
        }

        // Block label: `name:`.
        if let (Some(Tok::Ident(_)), Some((_, Tok::Punct(':')))) = (p.peek(), toks.get(1)) {
            let name = match p.next() {
                Some(Tok::Ident(s)) => s,
                _ => unreachable!(),
            };
            p.pos += 1; // ':'
            if let Err(d) = p.expect_end() {
                diags.push(d);
                continue;
            }
            match open_fn.as_mut() {
                Some(f) => f.blocks.push(RawBlock { line: line_no, name, stmts: Vec::new() }),
                None => diags.push(diag(line_no, 1, DiagKind::Syntax, "block label outside a function")),
            }
            continue;
        }

        let first_ident = match p.peek() {
            Some(Tok::Ident(s)) => Some(s.clone()),
            _ => None,
        };

        match first_ident.as_deref() {
            Some("type") => {
                if open_fn.is_some() {
                    diags.push(diag(line_no, 1, DiagKind::Syntax, "type declaration inside a function"));
                    continue;
                }
                match parse_type_decl(&mut p) {
                    Ok(t) => prog.types.push(t),
                    Err(d) => diags.push(d),
                }
            }
            Some("func") => {
                if let Some(f) = open_fn.take() {
                    diags.push(diag(line_no, 1, DiagKind::Syntax, format!("`func` before closing `{}`", f.name)));
                    prog.funcs.push(f);
                }
                match parse_func_header(&mut p) {
                    Ok(f) => open_fn = Some(f),
                    Err(d) => {
                        diags.push(d);
                        // Open a placeholder so the body still parses.
                        open_fn = Some(RawFn {
                            line: line_no,
                            name: format!("<error@{line_no}>"),
                            params: Vec::new(),
                            blocks: Vec::new(),
                        });
                    }
                }
            }
            _ => {
                // Instruction or module-scope global.
                match parse_stmt(&mut p) {
                    Ok(stmt) => match open_fn.as_mut() {
                        Some(f) => match f.blocks.last_mut() {
                            Some(b) => b.stmts.push(stmt),
                            None => diags.push(diag(
                                line_no,
                                1,
                                DiagKind::Cfg,
                                "instruction before the first block label",
                            )),
                        },
                        None => match stmt {
                            RawStmt {
                                result: Some(name),
                                instr: RawInstr::Alloca { ty, bytes },
                                line,
                            } => prog.globals.push(RawGlobal { line, name, ty, bytes }),
                            _ => diags.push(diag(
                                line_no,
                                1,
                                DiagKind::Syntax,
                                "only `@g = alloca T, n` is allowed at module scope",
                            )),
                        },
                    },
                    Err(d) => diags.push(d),
                }
            }
        }
    }

    if let Some(f) = open_fn.take() {
        diags.push(diag(f.line, 1, DiagKind::Syntax, format!("function `{}` is never closed", f.name)));
        prog.funcs.push(f);
    }

    (prog, diags)
}

fn parse_type_decl(p: &mut LineParser) -> Result<RawType, Diagnostic> {
    let line = p.line;
    p.next(); // `type`
    let name = p.expect_ident("a type name")?;
    p.expect_punct('=')?;
    match p.peek() {
        Some(Tok::Ident(k)) if k == "struct" => {
            p.next();
            let fields = parse_field_list(p)?;
            p.expect_end()?;
            Ok(RawType { line, name, kind: RawTypeKind::Struct { fields } })
        }
        Some(Tok::Ident(k)) if k == "class" => {
            p.next();
            let mut bases = Vec::new();
            if p.eat_punct('(') {
                if !p.eat_punct(')') {
                    loop {
                        bases.push(p.expect_ident("a base class name")?);
                        if p.eat_punct(')') {
                            break;
                        }
                        p.expect_punct(',')?;
                    }
                }
            }
            let declares_virtual = match p.peek() {
                Some(Tok::Ident(k)) if k == "virtual" => {
                    p.next();
                    true
                }
                _ => false,
            };
            let fields = parse_field_list(p)?;
            p.expect_end()?;
            Ok(RawType { line, name, kind: RawTypeKind::Class { bases, declares_virtual, fields } })
        }
        Some(Tok::Punct('[')) => {
            p.next();
            let count = p.expect_int("an element count")?;
            let x = p.expect_ident("`x`")?;
            if x != "x" {
                return Err(p.err("expected `x` between count and element type"));
            }
            let elem = p.expect_ident("an element type")?;
            p.expect_punct(']')?;
            p.expect_end()?;
            Ok(RawType { line, name, kind: RawTypeKind::Array { count, elem } })
        }
        _ => Err(p.err("expected `struct`, `class` or `[count x T]`")),
    }
}

fn parse_field_list(p: &mut LineParser) -> Result<Vec<(String, String)>, Diagnostic> {
    p.expect_punct('{')?;
    let mut fields = Vec::new();
    if p.eat_punct('}') {
        return Ok(fields);
    }
    loop {
        let fname = p.expect_ident("a field name")?;
        p.expect_punct(':')?;
        let fty = p.expect_ident("a field type")?;
        fields.push((fname, fty));
        if p.eat_punct('}') {
            break;
        }
        p.expect_punct(',')?;
    }
    Ok(fields)
}

fn parse_func_header(p: &mut LineParser) -> Result<RawFn, Diagnostic> {
    let line = p.line;
    p.next(); // `func`
    let name = match p.next() {
        Some(Tok::Global(s)) => s,
        other => {
            return Err(diag(
                p.line,
                p.col(),
                DiagKind::Syntax,
                format!(
                    "expected `@name` after `func`{}",
                    other.map(|t| format!(", found {}", t.describe())).unwrap_or_default()
                ),
            ))
        }
    };
    p.expect_punct('(')?;
    let mut params = Vec::new();
    if !p.eat_punct(')') {
        loop {
            params.push(p.expect_local("a `%param`")?);
            if p.eat_punct(')') {
                break;
            }
            p.expect_punct(',')?;
        }
    }
    p.expect_punct('{')?;
    p.expect_end()?;
    Ok(RawFn { line, name, params, blocks: Vec::new() })
}

fn parse_stmt(p: &mut LineParser) -> Result<RawStmt, Diagnostic> {
    let line = p.line;
    // Optional `%result =` / `@result =` prefix.
    let mut result = None;
    if matches!(p.peek(), Some(Tok::Local(_)) | Some(Tok::Global(_)))
        && p.toks.get(p.pos + 1).map(|(_, t)| t) == Some(&Tok::Punct('='))
    {
        result = Some(match p.next() {
            Some(Tok::Local(s)) | Some(Tok::Global(s)) => s,
            _ => unreachable!(),
        });
        p.next(); // '='
    }

    let instr = match p.peek().cloned() {
        Some(Tok::Ident(kw)) => {
            p.next();
            parse_instr_kw(p, &kw, result.is_some())?
        }
        Some(Tok::Local(_)) | Some(Tok::Global(_)) => {
            // Bare copy: `%p = %q` / `%p = @f`.
            let src = p.expect_operand()?;
            if result.is_none() {
                return Err(p.err("operand without a result; did you mean `%p = ...`?"));
            }
            RawInstr::Copy { src }
        }
        _ => return Err(p.err("expected an instruction")),
    };
    p.expect_end()?;

    // Result requirements per instruction form.
    let needs_result = !matches!(
        instr,
        RawInstr::Store { .. }
            | RawInstr::Constructor { .. }
            | RawInstr::Ret { .. }
            | RawInstr::Br { .. }
            | RawInstr::Jmp { .. }
            | RawInstr::Call { .. }
    );
    if needs_result && result.is_none() {
        return Err(diag(line, 1, DiagKind::Syntax, "this instruction requires a `%result =`"));
    }
    if result.is_some()
        && matches!(
            instr,
            RawInstr::Store { .. }
                | RawInstr::Constructor { .. }
                | RawInstr::Ret { .. }
                | RawInstr::Br { .. }
                | RawInstr::Jmp { .. }
        )
    {
        return Err(diag(line, 1, DiagKind::Syntax, "this instruction cannot have a result"));
    }
    Ok(RawStmt { line, result, instr })
}

fn parse_instr_kw(p: &mut LineParser, kw: &str, _has_result: bool) -> Result<RawInstr, Diagnostic> {
    match kw {
        "alloca" => {
            let ty = p.expect_ident("a type name")?;
            p.expect_punct(',')?;
            let bytes = p.expect_int("a byte count")?;
            Ok(RawInstr::Alloca { ty, bytes })
        }
        "malloc" => {
            let bytes = p.expect_int("a byte count")?;
            Ok(RawInstr::Malloc { bytes })
        }
        "cast" => {
            let (ty, stars) = p.parse_type_stars()?;
            if stars == 0 {
                return Err(p.err("cast target must be a pointer type like `T*`"));
            }
            p.expect_punct(',')?;
            let src = p.expect_operand()?;
            Ok(RawInstr::Cast { ty, stars, src })
        }
        "load" => {
            let addr = p.expect_operand()?;
            Ok(RawInstr::Load { addr })
        }
        "store" => {
            let addr = p.expect_operand()?;
            p.expect_punct(',')?;
            let value = p.expect_operand()?;
            Ok(RawInstr::Store { addr, value })
        }
        "phi" => {
            let mut arms = Vec::new();
            loop {
                p.expect_punct('[')?;
                let op = p.expect_operand()?;
                p.expect_punct(',')?;
                let block = p.expect_ident("a block label")?;
                p.expect_punct(']')?;
                arms.push((op, block));
                if !p.eat_punct(',') {
                    break;
                }
            }
            Ok(RawInstr::Phi { arms })
        }
        "array" => {
            let base = p.expect_operand()?;
            p.expect_punct(',')?;
            let index = match p.peek() {
                Some(Tok::Int(_)) => match p.next() {
                    Some(Tok::Int(n)) => RawIndex::Const(n),
                    _ => unreachable!(),
                },
                Some(Tok::Local(_)) => RawIndex::Var(p.expect_local("an index variable")?),
                _ => return Err(p.err("expected a constant or `%var` index")),
            };
            Ok(RawInstr::Array { base, index })
        }
        "field" => {
            let base = p.expect_operand()?;
            p.expect_punct(',')?;
            let selector = match p.peek() {
                Some(Tok::Ident(_)) => RawSelector::Name(p.expect_ident("a field name")?),
                Some(Tok::Local(_)) => RawSelector::Var(p.expect_local("a selector variable")?),
                _ => return Err(p.err("expected a field name or `%var` selector")),
            };
            Ok(RawInstr::Field { base, selector })
        }
        "constructor" => {
            let ty = p.expect_ident("a class name")?;
            p.expect_punct(',')?;
            let receiver = p.expect_operand()?;
            Ok(RawInstr::Constructor { ty, receiver })
        }
        "dyncast" => {
            let (ty, stars) = p.parse_type_stars()?;
            if stars == 0 {
                return Err(p.err("dyncast target must be a pointer type like `T*`"));
            }
            p.expect_punct(',')?;
            let src = p.expect_operand()?;
            Ok(RawInstr::DynCast { ty, stars, src })
        }
        "call" => {
            let callee = p.expect_operand()?;
            p.expect_punct('(')?;
            let mut args = Vec::new();
            if !p.eat_punct(')') {
                loop {
                    args.push(p.expect_operand()?);
                    if p.eat_punct(')') {
                        break;
                    }
                    p.expect_punct(',')?;
                }
            }
            Ok(RawInstr::Call { callee, args })
        }
        "ret" => {
            let value = if p.peek().is_some() { Some(p.expect_operand()?) } else { None };
            Ok(RawInstr::Ret { value })
        }
        "br" => {
            let cond = p.expect_operand()?;
            p.expect_punct(',')?;
            let then_dest = p.expect_ident("a block label")?;
            p.expect_punct(',')?;
            let else_dest = p.expect_ident("a block label")?;
            Ok(RawInstr::Br { cond, then_dest, else_dest })
        }
        "jmp" => {
            let target = p.expect_ident("a block label")?;
            Ok(RawInstr::Jmp { target })
        }
        other => Err(p.err(format!("unknown instruction `{other}`"))),
    }
}

// ---------------------------------------------------------------------------
// Resolution: raw AST -> IRProgram
// ---------------------------------------------------------------------------

struct Resolver {
    diags: Vec<Diagnostic>,
    types: Vec<TypeDef>,
    type_ids: HashMap<String, TypeId>,
    fn_ids: HashMap<String, FnId>,
    global_vars: HashMap<String, VarId>,
    vars: Vec<VarInfo>,
    next_label: u32,
    instr_locs: Vec<InstrLoc>,
}

impl Resolver {
    fn resolve_type_ref(&mut self, name: &str, line: usize) -> Option<TypeRef> {
        if let Some(p) = Prim::from_name(name) {
            return Some(TypeRef::Prim(p));
        }
        match self.type_ids.get(name) {
            Some(id) => Some(TypeRef::Named(*id)),
            None => {
                self.diags.push(diag(line, 1, DiagKind::Resolve, format!("unknown type `{name}`")));
                None
            }
        }
    }

    fn resolve_class(&mut self, name: &str, line: usize, what: &str) -> Option<TypeId> {
        match self.type_ids.get(name) {
            Some(id) if self.types[id.0 as usize].is_class() => Some(*id),
            Some(_) => {
                self.diags
                    .push(diag(line, 1, DiagKind::Resolve, format!("{what} `{name}` is not a class")));
                None
            }
            None => {
                self.diags.push(diag(line, 1, DiagKind::Resolve, format!("unknown type `{name}`")));
                None
            }
        }
    }

    fn fresh_label(&mut self, loc: InstrLoc) -> Label {
        let l = Label(self.next_label);
        self.next_label += 1;
        self.instr_locs.push(loc);
        l
    }
}

/// Resolve and fully validate a raw program.
pub(crate) fn resolve(raw: &RawProgram) -> Result<IRProgram, Vec<Diagnostic>> {
    let mut r = Resolver {
        diags: Vec::new(),
        types: Vec::new(),
        type_ids: HashMap::new(),
        fn_ids: HashMap::new(),
        global_vars: HashMap::new(),
        vars: Vec::new(),
        next_label: 0,
        instr_locs: Vec::new(),
    };

    // Pass 1: type names.
    for t in &raw.types {
        if r.type_ids.contains_key(&t.name) {
            r.diags.push(diag(t.line, 1, DiagKind::Resolve, format!("duplicate type `{}`", t.name)));
            continue;
        }
        let id = TypeId(r.types.len() as u32);
        r.type_ids.insert(t.name.clone(), id);
        // Placeholder body, filled in pass 2.
        r.types.push(TypeDef { name: t.name.clone(), kind: TypeKind::Struct { fields: Vec::new() } });
    }

    // Pass 2: type bodies.
    for t in &raw.types {
        let Some(&id) = r.type_ids.get(&t.name) else { continue };
        if r.types[id.0 as usize].name != t.name {
            continue; // duplicate, already reported
        }
        let kind = match &t.kind {
            RawTypeKind::Struct { fields } => {
                let mut fs = Vec::new();
                for (fname, fty) in fields {
                    if let Some(tr) = r.resolve_type_ref(fty, t.line) {
                        fs.push((fname.clone(), tr));
                    }
                }
                TypeKind::Struct { fields: fs }
            }
            RawTypeKind::Class { bases, declares_virtual, fields } => {
                let mut bs = Vec::new();
                for b in bases {
                    if let Some(bid) = r.resolve_class(b, t.line, "base") {
                        if bs.contains(&bid) {
                            r.diags.push(diag(
                                t.line,
                                1,
                                DiagKind::Resolve,
                                format!("class `{}` repeats direct base `{b}`", t.name),
                            ));
                        } else {
                            bs.push(bid);
                        }
                    }
                }
                let mut fs = Vec::new();
                for (fname, fty) in fields {
                    if let Some(tr) = r.resolve_type_ref(fty, t.line) {
                        fs.push((fname.clone(), tr));
                    }
                }
                TypeKind::Class { bases: bs, declares_virtual: *declares_virtual, fields: fs }
            }
            RawTypeKind::Array { count, elem } => {
                if *count == 0 {
                    r.diags.push(diag(t.line, 1, DiagKind::Resolve, "array count must be at least 1"));
                }
                let elem = r.resolve_type_ref(elem, t.line).unwrap_or(TypeRef::Prim(Prim::I8));
                TypeKind::Array { count: (*count).max(1), elem }
            }
        };
        r.types[id.0 as usize].kind = kind;
    }

    // Duplicate field names within one declaration.
    for (t, raw_t) in r.types.iter().zip(raw.types.iter()) {
        let mut seen = std::collections::HashSet::new();
        for (fname, _) in t.fields() {
            if !seen.insert(fname.clone()) {
                r.diags.push(diag(
                    raw_t.line,
                    1,
                    DiagKind::Resolve,
                    format!("type `{}` declares field `{fname}` twice", t.name),
                ));
            }
        }
    }

    // Pass 3: function names and global variables (shared `@` namespace).
    for f in &raw.funcs {
        if r.fn_ids.contains_key(&f.name) {
            r.diags.push(diag(f.line, 1, DiagKind::Resolve, format!("duplicate function `@{}`", f.name)));
            continue;
        }
        r.fn_ids.insert(f.name.clone(), FnId(r.fn_ids.len() as u32));
    }
    let mut globals = Vec::new();
    for g in &raw.globals {
        if r.fn_ids.contains_key(&g.name) || r.global_vars.contains_key(&g.name) {
            r.diags.push(diag(g.line, 1, DiagKind::Ssa, format!("`@{}` is defined more than once", g.name)));
            continue;
        }
        let ty = r.resolve_type_ref(&g.ty, g.line).unwrap_or(TypeRef::Prim(Prim::I8));
        let label = r.fresh_label(InstrLoc { func: None, block: BlockId(0), index: globals.len() });
        let var = VarId(r.vars.len() as u32);
        r.vars.push(VarInfo { name: g.name.clone(), owner: None, def: DefSite::Instr(label) });
        r.global_vars.insert(g.name.clone(), var);
        globals.push(Instruction {
            label,
            result: Some(var),
            kind: InstrKind::Alloca { ty, bytes: g.bytes },
        });
    }

    // Pass 4: function bodies.
    let mut functions = Vec::new();
    for rf in &raw.funcs {
        let Some(&fid) = r.fn_ids.get(&rf.name) else { continue };
        if functions.len() != fid.0 as usize {
            continue; // duplicate name
        }
        functions.push(resolve_fn(&mut r, fid, rf, &mut |_| {}));
    }

    let prog = IRProgram::new(r.types, globals, functions, r.vars, r.instr_locs);
    let mut diags = r.diags;
    diags.extend(super::validate::validate(&prog));
    if diags.is_empty() {
        Ok(prog)
    } else {
        Err(diags)
    }
}

fn resolve_fn(
    r: &mut Resolver,
    fid: FnId,
    rf: &RawFn,
    _sink: &mut dyn FnMut(&Diagnostic),
) -> IRFunction {
    // Local defs first (uses may reference later defs; dominance is
    // checked separately).
    let mut local_vars: HashMap<String, VarId> = HashMap::new();
    let mut params = Vec::new();
    for (i, pname) in rf.params.iter().enumerate() {
        if local_vars.contains_key(pname) {
            r.diags.push(diag(rf.line, 1, DiagKind::Ssa, format!("duplicate parameter `%{pname}`")));
            continue;
        }
        let var = VarId(r.vars.len() as u32);
        r.vars.push(VarInfo { name: pname.clone(), owner: Some(fid), def: DefSite::Param(fid, i) });
        local_vars.insert(pname.clone(), var);
        params.push(var);
    }

    let mut block_ids: HashMap<String, BlockId> = HashMap::new();
    for (i, b) in rf.blocks.iter().enumerate() {
        if block_ids.contains_key(&b.name) {
            r.diags.push(diag(b.line, 1, DiagKind::Cfg, format!("duplicate block label `{}`", b.name)));
        } else {
            block_ids.insert(b.name.clone(), BlockId(i as u32));
        }
    }

    // Collect result defs.
    struct PendingDef {
        var: VarId,
    }
    let mut defs: Vec<Vec<Option<PendingDef>>> = Vec::new();
    for (bi, b) in rf.blocks.iter().enumerate() {
        let mut block_defs = Vec::new();
        for (ii, stmt) in b.stmts.iter().enumerate() {
            let d = match &stmt.result {
                Some(name) => {
                    if local_vars.contains_key(name) || r.global_vars.contains_key(name) {
                        r.diags.push(diag(
                            stmt.line,
                            1,
                            DiagKind::Ssa,
                            format!("`%{name}` is defined more than once"),
                        ));
                        None
                    } else {
                        let var = VarId(r.vars.len() as u32);
                        // Label assigned later in program order; patched below.
                        r.vars.push(VarInfo {
                            name: name.clone(),
                            owner: Some(fid),
                            def: DefSite::Param(fid, usize::MAX), // placeholder
                        });
                        local_vars.insert(name.clone(), var);
                        Some(PendingDef { var })
                    }
                }
                None => None,
            };
            let _ = (bi, ii);
            block_defs.push(d);
        }
        defs.push(block_defs);
    }

    // Resolve instructions.
    let mut blocks = Vec::new();
    for (bi, b) in rf.blocks.iter().enumerate() {
        let mut instrs = Vec::new();
        for (ii, stmt) in b.stmts.iter().enumerate() {
            let label = r.fresh_label(InstrLoc { func: Some(fid), block: BlockId(bi as u32), index: ii });
            let result = defs[bi][ii].as_ref().map(|d| d.var);
            if let Some(v) = result {
                r.vars[v.0 as usize].def = DefSite::Instr(label);
            }
            let kind = resolve_instr(r, &local_vars, &block_ids, stmt);
            instrs.push(Instruction { label, result, kind });
        }
        blocks.push(Block { name: b.name.clone(), instrs });
    }

    IRFunction { id: fid, name: rf.name.clone(), params, blocks }
}

fn resolve_operand(
    r: &mut Resolver,
    locals: &HashMap<String, VarId>,
    op: &RawOperand,
    line: usize,
) -> Option<Operand> {
    match op {
        RawOperand::Local(name) => match locals.get(name) {
            Some(v) => Some(Operand::Var(*v)),
            None => {
                r.diags.push(diag(line, 1, DiagKind::Resolve, format!("unknown variable `%{name}`")));
                None
            }
        },
        RawOperand::Global(name) => {
            if let Some(v) = r.global_vars.get(name) {
                Some(Operand::Var(*v))
            } else if let Some(f) = r.fn_ids.get(name) {
                Some(Operand::Func(*f))
            } else {
                r.diags.push(diag(line, 1, DiagKind::Resolve, format!("unknown global `@{name}`")));
                None
            }
        }
    }
}

fn resolve_var_operand(
    r: &mut Resolver,
    locals: &HashMap<String, VarId>,
    op: &RawOperand,
    line: usize,
    what: &str,
) -> Option<VarId> {
    match resolve_operand(r, locals, op, line)? {
        Operand::Var(v) => Some(v),
        Operand::Func(_) => {
            r.diags.push(diag(line, 1, DiagKind::Resolve, format!("{what} must be a variable")));
            None
        }
    }
}

fn resolve_block(
    r: &mut Resolver,
    blocks: &HashMap<String, BlockId>,
    name: &str,
    line: usize,
) -> Option<BlockId> {
    match blocks.get(name) {
        Some(b) => Some(*b),
        None => {
            r.diags.push(diag(line, 1, DiagKind::Resolve, format!("unknown block `{name}`")));
            None
        }
    }
}

fn resolve_instr(
    r: &mut Resolver,
    locals: &HashMap<String, VarId>,
    blocks: &HashMap<String, BlockId>,
    stmt: &RawStmt,
) -> InstrKind {
    let line = stmt.line;
    // On resolution failure we substitute a harmless `ret` so later passes
    // can keep reporting; the accumulated diagnostics still fail the parse.
    let poison = InstrKind::Ret { value: None };
    match &stmt.instr {
        RawInstr::Alloca { ty, bytes } => match r.resolve_type_ref(ty, line) {
            Some(ty) => InstrKind::Alloca { ty, bytes: *bytes },
            None => poison,
        },
        RawInstr::Malloc { bytes } => InstrKind::Malloc { bytes: *bytes },
        RawInstr::Copy { src } => match resolve_operand(r, locals, src, line) {
            Some(src) => InstrKind::Copy { src },
            None => poison,
        },
        RawInstr::Cast { ty, stars, src } => {
            let Some(ty) = r.resolve_type_ref(ty, line) else { return poison };
            let Some(src) = resolve_var_operand(r, locals, src, line, "cast source") else {
                return poison;
            };
            InstrKind::Cast { target: CastTarget { ty, stars: *stars }, src }
        }
        RawInstr::Load { addr } => match resolve_var_operand(r, locals, addr, line, "load address") {
            Some(addr) => InstrKind::Load { addr },
            None => poison,
        },
        RawInstr::Store { addr, value } => {
            let Some(addr) = resolve_var_operand(r, locals, addr, line, "store address") else {
                return poison;
            };
            let Some(value) = resolve_operand(r, locals, value, line) else { return poison };
            InstrKind::Store { addr, value }
        }
        RawInstr::Phi { arms } => {
            let mut out = Vec::new();
            for (op, block) in arms {
                let Some(op) = resolve_operand(r, locals, op, line) else { return poison };
                let Some(b) = resolve_block(r, blocks, block, line) else { return poison };
                out.push((op, b));
            }
            InstrKind::Phi { arms: out }
        }
        RawInstr::Array { base, index } => {
            let Some(base) = resolve_var_operand(r, locals, base, line, "array base") else {
                return poison;
            };
            let index = match index {
                RawIndex::Const(n) => Index::Const(*n),
                RawIndex::Var(name) => {
                    match resolve_var_operand(r, locals, &RawOperand::Local(name.clone()), line, "index")
                    {
                        Some(v) => Index::Var(v),
                        None => return poison,
                    }
                }
            };
            InstrKind::Array { base, index }
        }
        RawInstr::Field { base, selector } => {
            let Some(base) = resolve_var_operand(r, locals, base, line, "field base") else {
                return poison;
            };
            let selector = match selector {
                RawSelector::Name(n) => Selector::Name(n.clone()),
                RawSelector::Var(name) => {
                    match resolve_var_operand(r, locals, &RawOperand::Local(name.clone()), line, "selector")
                    {
                        Some(v) => Selector::Var(v),
                        None => return poison,
                    }
                }
            };
            InstrKind::Field { base, selector }
        }
        RawInstr::Constructor { ty, receiver } => {
            let Some(ty) = r.resolve_class(ty, line, "constructor type") else { return poison };
            let Some(receiver) = resolve_var_operand(r, locals, receiver, line, "receiver") else {
                return poison;
            };
            InstrKind::Constructor { ty, receiver }
        }
        RawInstr::DynCast { ty, stars, src } => {
            if *stars != 1 {
                r.diags.push(diag(line, 1, DiagKind::Resolve, "dyncast target must be `T*` with one `*`"));
                return poison;
            }
            let Some(ty) = r.resolve_class(ty, line, "dyncast target") else { return poison };
            let Some(src) = resolve_var_operand(r, locals, src, line, "dyncast source") else {
                return poison;
            };
            InstrKind::DynCast { ty, src }
        }
        RawInstr::Call { callee, args } => {
            let callee = match callee {
                RawOperand::Global(name) => {
                    if let Some(f) = r.fn_ids.get(name) {
                        Callee::Direct(*f)
                    } else if r.global_vars.contains_key(name) {
                        r.diags.push(diag(
                            line,
                            1,
                            DiagKind::Resolve,
                            format!("`@{name}` is a global variable, not a function"),
                        ));
                        return poison;
                    } else {
                        r.diags.push(diag(line, 1, DiagKind::Resolve, format!("unknown function `@{name}`")));
                        return poison;
                    }
                }
                RawOperand::Local(name) => {
                    match resolve_var_operand(r, locals, &RawOperand::Local(name.clone()), line, "callee") {
                        Some(v) => Callee::Indirect(v),
                        None => return poison,
                    }
                }
            };
            let mut out_args = Vec::new();
            for a in args {
                let Some(a) = resolve_operand(r, locals, a, line) else { return poison };
                out_args.push(a);
            }
            InstrKind::Call { callee, args: out_args }
        }
        RawInstr::Ret { value } => {
            let value = match value {
                Some(op) => match resolve_operand(r, locals, op, line) {
                    Some(op) => Some(op),
                    None => return poison,
                },
                None => None,
            };
            InstrKind::Ret { value }
        }
        RawInstr::Br { cond, then_dest, else_dest } => {
            let Some(cond) = resolve_var_operand(r, locals, cond, line, "branch condition") else {
                return poison;
            };
            let Some(t) = resolve_block(r, blocks, then_dest, line) else { return poison };
            let Some(e) = resolve_block(r, blocks, else_dest, line) else { return poison };
            InstrKind::Br { cond, then_dest: t, else_dest: e }
        }
        RawInstr::Jmp { target } => match resolve_block(r, blocks, target, line) {
            Some(t) => InstrKind::Jmp { target: t },
            None => poison,
        },
    }
}

/// Parse, resolve and validate a textual program.
pub fn parse_program(src: &str) -> Result<IRProgram, Vec<Diagnostic>> {
    let (raw, mut diags) = parse_raw(src);
    if !diags.is_empty() {
        // Still attempt resolution for richer reporting, but always fail.
        if let Err(more) = resolve(&raw) {
            diags.extend(more);
        }
        return Err(diags);
    }
    resolve(&raw)
}
