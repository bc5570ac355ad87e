//! Canonical text form of a program. `parse(pretty(p))` produces a
//! structurally identical program (labels are reassigned in the same
//! order), which the round-trip tests rely on.

use super::*;
use std::fmt::Write;

pub fn type_ref_name(prog: &IRProgram, tr: TypeRef) -> String {
    match tr {
        TypeRef::Prim(p) => p.name().to_string(),
        TypeRef::Named(id) => prog.type_def(id).name.clone(),
    }
}

fn operand(prog: &IRProgram, op: &Operand) -> String {
    match op {
        Operand::Var(v) => {
            let info = prog.var(*v);
            match info.owner {
                None => format!("@{}", info.name),
                Some(_) => format!("%{}", info.name),
            }
        }
        Operand::Func(f) => format!("@{}", prog.function(*f).name),
    }
}

fn var(prog: &IRProgram, v: VarId) -> String {
    operand(prog, &Operand::Var(v))
}

pub fn instr_text(prog: &IRProgram, f: Option<&IRFunction>, instr: &Instruction) -> String {
    let blocks = f.map(|f| &f.blocks);
    let block_name = |b: BlockId| -> String {
        match blocks {
            Some(bs) => bs[b.0 as usize].name.clone(),
            None => format!("bb{}", b.0),
        }
    };
    let head = match instr.result {
        Some(v) => format!("{} = ", var(prog, v)),
        None => String::new(),
    };
    let body = match &instr.kind {
        InstrKind::Alloca { ty, bytes } => format!("alloca {}, {}", type_ref_name(prog, *ty), bytes),
        InstrKind::Malloc { bytes } => format!("malloc {bytes}"),
        InstrKind::Copy { src } => operand(prog, src),
        InstrKind::Cast { target, src } => format!(
            "cast {}{}, {}",
            type_ref_name(prog, target.ty),
            "*".repeat(target.stars as usize),
            var(prog, *src)
        ),
        InstrKind::Load { addr } => format!("load {}", var(prog, *addr)),
        InstrKind::Store { addr, value } => {
            format!("store {}, {}", var(prog, *addr), operand(prog, value))
        }
        InstrKind::Phi { arms } => {
            let parts: Vec<String> = arms
                .iter()
                .map(|(op, b)| format!("[{}, {}]", operand(prog, op), block_name(*b)))
                .collect();
            format!("phi {}", parts.join(", "))
        }
        InstrKind::Array { base, index } => {
            let idx = match index {
                Index::Const(n) => n.to_string(),
                Index::Var(v) => var(prog, *v),
            };
            format!("array {}, {}", var(prog, *base), idx)
        }
        InstrKind::Field { base, selector } => {
            let sel = match selector {
                Selector::Name(n) => n.clone(),
                Selector::Var(v) => var(prog, *v),
            };
            format!("field {}, {}", var(prog, *base), sel)
        }
        InstrKind::Constructor { ty, receiver } => {
            format!("constructor {}, {}", prog.type_def(*ty).name, var(prog, *receiver))
        }
        InstrKind::DynCast { ty, src } => {
            format!("dyncast {}*, {}", prog.type_def(*ty).name, var(prog, *src))
        }
        InstrKind::Call { callee, args } => {
            let callee = match callee {
                Callee::Direct(f) => format!("@{}", prog.function(*f).name),
                Callee::Indirect(v) => var(prog, *v),
            };
            let args: Vec<String> = args.iter().map(|a| operand(prog, a)).collect();
            format!("call {}({})", callee, args.join(", "))
        }
        InstrKind::Ret { value } => match value {
            Some(v) => format!("ret {}", operand(prog, v)),
            None => "ret".to_string(),
        },
        InstrKind::Br { cond, then_dest, else_dest } => format!(
            "br {}, {}, {}",
            var(prog, *cond),
            block_name(*then_dest),
            block_name(*else_dest)
        ),
        InstrKind::Jmp { target } => format!("jmp {}", block_name(*target)),
    };
    format!("{head}{body}")
}

/// Render the whole program in canonical textual form.
pub fn pretty(prog: &IRProgram) -> String {
    let mut out = String::new();
    for t in &prog.types {
        let body = match &t.kind {
            TypeKind::Struct { fields } => format!("struct {}", field_list(prog, fields)),
            TypeKind::Class { bases, declares_virtual, fields } => {
                let bases: Vec<String> =
                    bases.iter().map(|b| prog.type_def(*b).name.clone()).collect();
                format!(
                    "class({}){} {}",
                    bases.join(", "),
                    if *declares_virtual { " virtual" } else { "" },
                    field_list(prog, fields)
                )
            }
            TypeKind::Array { count, elem } => {
                format!("[{} x {}]", count, type_ref_name(prog, *elem))
            }
        };
        let _ = writeln!(out, "type {} = {}", t.name, body);
    }
    if !prog.types.is_empty() {
        out.push('\n');
    }
    for g in &prog.globals {
        let _ = writeln!(out, "{}", instr_text(prog, None, g));
    }
    if !prog.globals.is_empty() {
        out.push('\n');
    }
    for f in &prog.functions {
        let params: Vec<String> = f.params.iter().map(|p| var(prog, *p)).collect();
        let _ = writeln!(out, "func @{}({}) {{", f.name, params.join(", "));
        for b in &f.blocks {
            let _ = writeln!(out, "{}:", b.name);
            for i in &b.instrs {
                let _ = writeln!(out, "  {}", instr_text(prog, Some(f), i));
            }
        }
        let _ = writeln!(out, "}}");
        out.push('\n');
    }
    out
}

fn field_list(prog: &IRProgram, fields: &[(String, TypeRef)]) -> String {
    if fields.is_empty() {
        return "{ }".to_string();
    }
    let parts: Vec<String> =
        fields.iter().map(|(n, t)| format!("{}: {}", n, type_ref_name(prog, *t))).collect();
    format!("{{ {} }}", parts.join(", "))
}
