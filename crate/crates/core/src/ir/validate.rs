//! Semantic validation of a resolved program: type-table sanity, block
//! structure, PHI placement, and SSA dominance of definitions over uses.

use super::cfg::{build_cfg, dominator_tree};
use super::parse::{DiagKind, Diagnostic};
use super::*;

// Validation diagnostics are program-level; they carry no source position.
fn diag(_line: usize, kind: DiagKind, msg: impl Into<String>) -> Diagnostic {
    Diagnostic { line: 0, col: 0, kind, msg: msg.into() }
}

/// All variable uses of one instruction. PHI arm uses carry the
/// predecessor they flow from (dominance is checked at the pred's tail).
pub fn var_uses(kind: &InstrKind) -> Vec<(VarId, Option<BlockId>)> {
    let mut out = Vec::new();
    let op = |o: &Operand, pred: Option<BlockId>, out: &mut Vec<(VarId, Option<BlockId>)>| {
        if let Operand::Var(v) = o {
            out.push((*v, pred));
        }
    };
    match kind {
        InstrKind::Alloca { .. } | InstrKind::Malloc { .. } => {}
        InstrKind::Copy { src } => op(src, None, &mut out),
        InstrKind::Cast { src, .. } => out.push((*src, None)),
        InstrKind::Load { addr } => out.push((*addr, None)),
        InstrKind::Store { addr, value } => {
            out.push((*addr, None));
            op(value, None, &mut out);
        }
        InstrKind::Phi { arms } => {
            for (o, pred) in arms {
                op(o, Some(*pred), &mut out);
            }
        }
        InstrKind::Array { base, index } => {
            out.push((*base, None));
            if let Index::Var(v) = index {
                out.push((*v, None));
            }
        }
        InstrKind::Field { base, selector } => {
            out.push((*base, None));
            if let Selector::Var(v) = selector {
                out.push((*v, None));
            }
        }
        InstrKind::Constructor { receiver, .. } => out.push((*receiver, None)),
        InstrKind::DynCast { src, .. } => out.push((*src, None)),
        InstrKind::Call { callee, args } => {
            if let Callee::Indirect(v) = callee {
                out.push((*v, None));
            }
            for a in args {
                op(a, None, &mut out);
            }
        }
        InstrKind::Ret { value } => {
            if let Some(v) = value {
                op(v, None, &mut out);
            }
        }
        InstrKind::Br { cond, .. } => out.push((*cond, None)),
        InstrKind::Jmp { .. } => {}
    }
    out
}

/// Check every structural invariant of a resolved program. An empty
/// result means the program is analyzable.
pub fn validate(prog: &IRProgram) -> Vec<Diagnostic> {
    let mut diags = Vec::new();

    check_type_table(prog, &mut diags);

    if prog.fn_by_name("main").is_none() {
        diags.push(diag(0, DiagKind::Resolve, "program has no `@main` function"));
    }

    for f in &prog.functions {
        check_function(prog, f, &mut diags);
    }
    diags
}

fn check_type_table(prog: &IRProgram, diags: &mut Vec<Diagnostic>) {
    // By-value containment must be acyclic (bases count as containment).
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        White,
        Grey,
        Black,
    }
    fn visit(prog: &IRProgram, id: TypeId, marks: &mut [Mark], diags: &mut Vec<Diagnostic>) -> bool {
        match marks[id.0 as usize] {
            Mark::Black => return true,
            Mark::Grey => {
                diags.push(diag(
                    0,
                    DiagKind::Resolve,
                    format!("type `{}` contains itself by value", prog.type_def(id).name),
                ));
                return false;
            }
            Mark::White => {}
        }
        marks[id.0 as usize] = Mark::Grey;
        let def = prog.type_def(id);
        let mut nested: Vec<TypeId> = def.bases().to_vec();
        for (_, tr) in def.fields() {
            if let TypeRef::Named(n) = tr {
                nested.push(*n);
            }
        }
        if let TypeKind::Array { elem: TypeRef::Named(n), .. } = &def.kind {
            nested.push(*n);
        }
        let mut ok = true;
        for n in nested {
            ok &= visit(prog, n, marks, diags);
        }
        marks[id.0 as usize] = Mark::Black;
        ok
    }
    let mut marks = vec![Mark::White; prog.types.len()];
    for i in 0..prog.types.len() {
        visit(prog, TypeId(i as u32), &mut marks, diags);
    }
}

fn check_function(prog: &IRProgram, f: &IRFunction, diags: &mut Vec<Diagnostic>) {
    let fname = &f.name;
    if f.blocks.is_empty() {
        diags.push(diag(0, DiagKind::Cfg, format!("function `@{fname}` has no blocks")));
        return;
    }

    // Terminators: exactly one, at the end of each block.
    let mut structure_ok = true;
    for b in &f.blocks {
        match b.instrs.last() {
            Some(last) if last.kind.is_terminator() => {}
            _ => {
                diags.push(diag(
                    0,
                    DiagKind::Cfg,
                    format!("block `{}` of `@{fname}` does not end with a terminator", b.name),
                ));
                structure_ok = false;
            }
        }
        for i in b.instrs.iter().rev().skip(1) {
            if i.kind.is_terminator() {
                diags.push(diag(
                    0,
                    DiagKind::Cfg,
                    format!("terminator in the middle of block `{}` of `@{fname}`", b.name),
                ));
                structure_ok = false;
            }
        }
    }
    if !structure_ok {
        return; // CFG-derived checks need well-formed terminators
    }

    let cfg = build_cfg(f);
    if !cfg.preds[0].is_empty() {
        diags.push(diag(
            0,
            DiagKind::Cfg,
            format!("entry block of `@{fname}` has predecessors"),
        ));
    }
    for (bi, ok) in cfg.reachable().iter().enumerate() {
        if !ok {
            diags.push(diag(
                0,
                DiagKind::Cfg,
                format!("block `{}` of `@{fname}` is unreachable from the entry", f.blocks[bi].name),
            ));
        }
    }
    if diags.iter().any(|d| d.msg.contains("unreachable from the entry") && d.msg.contains(&format!("@{fname}"))) {
        return;
    }

    // PHI placement and arm consistency.
    for (bi, b) in f.blocks.iter().enumerate() {
        let mut past_phis = false;
        for instr in &b.instrs {
            match &instr.kind {
                InstrKind::Phi { arms } => {
                    if past_phis {
                        diags.push(diag(
                            0,
                            DiagKind::Cfg,
                            format!("PHI after a non-PHI instruction in block `{}` of `@{fname}`", b.name),
                        ));
                    }
                    if bi == 0 {
                        diags.push(diag(
                            0,
                            DiagKind::Cfg,
                            format!("PHI in the entry block of `@{fname}`"),
                        ));
                    }
                    let preds = &cfg.preds[bi];
                    let mut seen: Vec<BlockId> = Vec::new();
                    for (_, pred) in arms {
                        if !preds.contains(pred) {
                            diags.push(diag(
                                0,
                                DiagKind::Cfg,
                                format!(
                                    "PHI arm for `{}` which is not a predecessor of `{}` in `@{fname}`",
                                    f.blocks[pred.0 as usize].name, b.name
                                ),
                            ));
                        }
                        if seen.contains(pred) {
                            diags.push(diag(
                                0,
                                DiagKind::Cfg,
                                format!(
                                    "PHI has two arms for predecessor `{}` in `@{fname}`",
                                    f.blocks[pred.0 as usize].name
                                ),
                            ));
                        }
                        seen.push(*pred);
                    }
                    for p in preds {
                        if !seen.contains(p) {
                            diags.push(diag(
                                0,
                                DiagKind::Cfg,
                                format!(
                                    "PHI in `{}` of `@{fname}` is missing an arm for predecessor `{}`",
                                    b.name, f.blocks[p.0 as usize].name
                                ),
                            ));
                        }
                    }
                }
                _ => past_phis = true,
            }
        }
    }

    // Definitions must dominate uses.
    let dt = dominator_tree(&cfg);
    for (bi, b) in f.blocks.iter().enumerate() {
        for (ii, instr) in b.instrs.iter().enumerate() {
            for (used, phi_pred) in var_uses(&instr.kind) {
                let info = prog.var(used);
                match info.def {
                    DefSite::Param(..) => continue, // params dominate the body
                    DefSite::Instr(def_label) => {
                        let loc = prog.instr_loc(def_label);
                        if loc.func.is_none() {
                            continue; // globals dominate everything
                        }
                        let (def_block, def_idx) = (loc.block, loc.index);
                        let ok = match phi_pred {
                            // PHI arm: the def must reach the end of the
                            // chosen predecessor.
                            Some(pred) => {
                                def_block == pred || dt.dominates(def_block, pred)
                            }
                            None => {
                                if def_block.0 as usize == bi {
                                    def_idx < ii
                                } else {
                                    dt.dominates(def_block, BlockId(bi as u32))
                                }
                            }
                        };
                        if !ok {
                            diags.push(diag(
                                0,
                                DiagKind::Ssa,
                                format!(
                                    "use of `%{}` in `@{fname}` is not dominated by its definition",
                                    info.name
                                ),
                            ));
                        }
                    }
                }
            }
        }
    }
}
