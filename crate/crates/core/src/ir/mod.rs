//! The mini-IR: a typed declaration table plus SSA-form functions of
//! labeled basic blocks. Programs are written in a small textual syntax
//! (see the grammar in the repository README), parsed into [`IRProgram`]
//! and validated before any analysis runs.

pub mod cfg;
pub mod parse;
pub mod pretty;
pub mod validate;

use std::collections::HashMap;

/// Index into [`IRProgram::types`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TypeId(pub u32);

/// Index into [`IRProgram::functions`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FnId(pub u32);

/// Program-wide interned top-level variable (locals are qualified by
/// their function, globals stand alone).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VarId(pub u32);

/// Program-wide instruction label, assigned in parse order. Labels are
/// stable across reparses of the same text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Label(pub u32);

/// Per-function basic-block index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BlockId(pub u32);

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "l{}", self.0)
    }
}

/// Primitive (leaf) types with fixed 64-bit C sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Prim {
    I8,
    I16,
    I32,
    I64,
    Ptr,
}

impl Prim {
    pub fn name(self) -> &'static str {
        match self {
            Prim::I8 => "i8",
            Prim::I16 => "i16",
            Prim::I32 => "i32",
            Prim::I64 => "i64",
            Prim::Ptr => "ptr",
        }
    }

    pub fn from_name(s: &str) -> Option<Prim> {
        Some(match s {
            "i8" => Prim::I8,
            "i16" => Prim::I16,
            "i32" => Prim::I32,
            "i64" => Prim::I64,
            "ptr" => Prim::Ptr,
            _ => return None,
        })
    }
}

/// Reference to a primitive or a declared type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TypeRef {
    Prim(Prim),
    Named(TypeId),
}

/// Body of a type declaration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TypeKind {
    Struct {
        fields: Vec<(String, TypeRef)>,
    },
    Class {
        bases: Vec<TypeId>,
        /// True when the declaration carries the `virtual` marker,
        /// i.e. the class itself declares virtual methods.
        declares_virtual: bool,
        fields: Vec<(String, TypeRef)>,
    },
    Array {
        count: u64,
        elem: TypeRef,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TypeDef {
    pub name: String,
    pub kind: TypeKind,
}

impl TypeDef {
    pub fn fields(&self) -> &[(String, TypeRef)] {
        match &self.kind {
            TypeKind::Struct { fields } | TypeKind::Class { fields, .. } => fields,
            TypeKind::Array { .. } => &[],
        }
    }

    pub fn bases(&self) -> &[TypeId] {
        match &self.kind {
            TypeKind::Class { bases, .. } => bases,
            _ => &[],
        }
    }

    pub fn is_class(&self) -> bool {
        matches!(self.kind, TypeKind::Class { .. })
    }
}

/// A value operand: a top-level variable or a function reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Operand {
    Var(VarId),
    Func(FnId),
}

/// Cast target `T*`, `T**`, ... — the number of `*` suffixes is kept so
/// that multi-level pointer casts degrade to plain copies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CastTarget {
    pub ty: TypeRef,
    pub stars: u8,
}

/// Array subscript: constant or variable index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Index {
    Const(u64),
    Var(VarId),
}

/// Field selector: a declared field name or a variable selector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Selector {
    Name(String),
    Var(VarId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Callee {
    Direct(FnId),
    Indirect(VarId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InstrKind {
    /// Stack or global allocation of `bytes` bytes viewed as `ty`.
    Alloca { ty: TypeRef, bytes: u64 },
    /// Untyped heap allocation.
    Malloc { bytes: u64 },
    Copy { src: Operand },
    Cast { target: CastTarget, src: VarId },
    Load { addr: VarId },
    /// `store p, q` writes the value of `q` through the pointer `p`.
    Store { addr: VarId, value: Operand },
    Phi { arms: Vec<(Operand, BlockId)> },
    Array { base: VarId, index: Index },
    Field { base: VarId, selector: Selector },
    /// Records the construction of the object the receiver points to.
    Constructor { ty: TypeId, receiver: VarId },
    DynCast { ty: TypeId, src: VarId },
    Call { callee: Callee, args: Vec<Operand> },
    Ret { value: Option<Operand> },
    Br { cond: VarId, then_dest: BlockId, else_dest: BlockId },
    Jmp { target: BlockId },
}

impl InstrKind {
    pub fn is_terminator(&self) -> bool {
        matches!(self, InstrKind::Ret { .. } | InstrKind::Br { .. } | InstrKind::Jmp { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instruction {
    pub label: Label,
    pub result: Option<VarId>,
    pub kind: InstrKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub name: String,
    pub instrs: Vec<Instruction>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IRFunction {
    pub id: FnId,
    pub name: String,
    pub params: Vec<VarId>,
    pub blocks: Vec<Block>,
}

impl IRFunction {
    pub fn entry(&self) -> BlockId {
        BlockId(0)
    }
}

/// Where a top-level variable gets its unique definition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DefSite {
    Instr(Label),
    Param(FnId, usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VarInfo {
    /// Unqualified source name (without the `%`/`@` sigil).
    pub name: String,
    /// Owning function for locals, `None` for globals.
    pub owner: Option<FnId>,
    pub def: DefSite,
}

/// Location of an instruction: `None` function means module scope.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstrLoc {
    pub func: Option<FnId>,
    pub block: BlockId,
    pub index: usize,
}

/// A parsed, resolved and validated program.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IRProgram {
    pub types: Vec<TypeDef>,
    /// Module-scope allocations, in declaration order.
    pub globals: Vec<Instruction>,
    pub functions: Vec<IRFunction>,
    pub vars: Vec<VarInfo>,
    /// Label -> location lookup, indexed by `Label.0`.
    pub instr_locs: Vec<InstrLoc>,
    type_index: HashMap<String, TypeId>,
    fn_index: HashMap<String, FnId>,
}

impl IRProgram {
    pub(crate) fn new(
        types: Vec<TypeDef>,
        globals: Vec<Instruction>,
        functions: Vec<IRFunction>,
        vars: Vec<VarInfo>,
        instr_locs: Vec<InstrLoc>,
    ) -> Self {
        let type_index = types
            .iter()
            .enumerate()
            .map(|(i, t)| (t.name.clone(), TypeId(i as u32)))
            .collect();
        let fn_index = functions
            .iter()
            .enumerate()
            .map(|(i, f)| (f.name.clone(), FnId(i as u32)))
            .collect();
        IRProgram { types, globals, functions, vars, instr_locs, type_index, fn_index }
    }

    pub fn type_def(&self, id: TypeId) -> &TypeDef {
        &self.types[id.0 as usize]
    }

    pub fn type_by_name(&self, name: &str) -> Option<TypeId> {
        self.type_index.get(name).copied()
    }

    pub fn function(&self, id: FnId) -> &IRFunction {
        &self.functions[id.0 as usize]
    }

    pub fn fn_by_name(&self, name: &str) -> Option<FnId> {
        self.fn_index.get(name).copied()
    }

    pub fn var(&self, id: VarId) -> &VarInfo {
        &self.vars[id.0 as usize]
    }

    /// Qualified display name for a variable: `@g` or `fn::%x`.
    pub fn var_name(&self, id: VarId) -> String {
        let v = self.var(id);
        match v.owner {
            None => format!("@{}", v.name),
            Some(f) => format!("{}::%{}", self.function(f).name, v.name),
        }
    }

    pub fn n_labels(&self) -> usize {
        self.instr_locs.len()
    }

    pub fn instr(&self, l: Label) -> &Instruction {
        let loc = self.instr_locs[l.0 as usize];
        match loc.func {
            None => &self.globals[loc.index],
            Some(f) => &self.function(f).blocks[loc.block.0 as usize].instrs[loc.index],
        }
    }

    pub fn instr_loc(&self, l: Label) -> InstrLoc {
        self.instr_locs[l.0 as usize]
    }

    /// Iterate all instructions (globals first, then function bodies in order).
    pub fn all_instrs(&self) -> impl Iterator<Item = (Option<FnId>, &Instruction)> {
        let globals = self.globals.iter().map(|i| (None, i));
        let fns = self.functions.iter().flat_map(|f| {
            f.blocks.iter().flat_map(move |b| b.instrs.iter().map(move |i| (Some(f.id), i)))
        });
        globals.chain(fns)
    }

    /// Effective polymorphism: the class declares virtual methods itself
    /// or inherits a virtual table from some base.
    pub fn is_polymorphic(&self, id: TypeId) -> bool {
        match &self.type_def(id).kind {
            TypeKind::Class { bases, declares_virtual, .. } => {
                *declares_virtual || bases.iter().any(|b| self.is_polymorphic(*b))
            }
            _ => false,
        }
    }
}
