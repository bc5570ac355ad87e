//! Abstract objects and their sub-objects.
//!
//! Base objects name allocation sites (one per `alloca`/`malloc` label)
//! and functions. Sub-objects are (base, byte offset) pairs minted on
//! demand while solving; offset 0 is identified with the base itself.
//! Each base also owns a single summary sub-object standing for "some
//! unknown offset into this base", used when an access offset cannot be
//! pinned down (variable indices without type information, summarized
//! array layouts).

use crate::ir::{FnId, IRProgram, Label};
use serde::Serialize;
use std::collections::BTreeSet;
use std::collections::HashMap;
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct ObjId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ObjData {
    /// Allocation site (stack, heap, or module scope).
    Base(Label),
    /// The function itself, as stored into function pointers.
    Func(FnId),
    /// Interior of `base` starting at byte `off` (> 0).
    Sub { base: ObjId, off: u64 },
    /// Unknown interior position of `base`.
    Summary(ObjId),
}

pub type ObjSet = BTreeSet<ObjId>;

#[derive(Debug, Clone, Default)]
pub struct ObjectStore {
    data: Vec<ObjData>,
    index: HashMap<ObjData, ObjId>,
    /// Declared allocation size per base object, in bytes.
    sizes: HashMap<ObjId, u64>,
}

impl ObjectStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Store pre-populated with one base object per allocation site (in
    /// label order) and one function object per function, so initial ids
    /// do not depend on analysis order.
    pub fn seeded(prog: &IRProgram) -> Self {
        use crate::ir::InstrKind;
        let mut s = Self::new();
        for (_, instr) in prog.all_instrs() {
            if let InstrKind::Alloca { bytes, .. } | InstrKind::Malloc { bytes } = instr.kind {
                let id = s.base(instr.label);
                s.sizes.insert(id, bytes);
            }
        }
        for f in &prog.functions {
            s.func(f.id);
        }
        s
    }

    fn intern(&mut self, d: ObjData) -> ObjId {
        if let Some(id) = self.index.get(&d) {
            return *id;
        }
        let id = ObjId(self.data.len() as u32);
        self.data.push(d);
        self.index.insert(d, id);
        id
    }

    pub fn base(&mut self, site: Label) -> ObjId {
        self.intern(ObjData::Base(site))
    }

    pub fn func(&mut self, f: FnId) -> ObjId {
        self.intern(ObjData::Func(f))
    }

    /// Sub-object of `o` at `off` bytes past its own start. Composes
    /// against the root: a sub-object of a sub-object is addressed from
    /// the shared base, and any offset into a summary stays the summary.
    pub fn sub(&mut self, o: ObjId, off: u64) -> ObjId {
        match self.data(o) {
            ObjData::Summary(_) => o,
            ObjData::Sub { base, off: k } => {
                let (base, total) = (base, k + off);
                if total == 0 { base } else { self.intern(ObjData::Sub { base, off: total }) }
            }
            _ => {
                if off == 0 { o } else { self.intern(ObjData::Sub { base: o, off }) }
            }
        }
    }

    /// The summary sub-object of `o`'s base.
    pub fn summary(&mut self, o: ObjId) -> ObjId {
        let root = self.root(o);
        self.intern(ObjData::Summary(root))
    }

    /// Allocation size in bytes of `o`'s base, when the site declared one.
    pub fn alloc_size(&self, o: ObjId) -> Option<u64> {
        self.sizes.get(&self.root(o)).copied()
    }

    /// Like `sub`, but refusing positions past the end of the allocation.
    /// An access outside the object's extent has no defined target, and
    /// dropping it also keeps the sub-object universe finite when offsets
    /// stack up through interprocedural cycles.
    pub fn sub_within(&mut self, o: ObjId, off: u64) -> Option<ObjId> {
        if matches!(self.data(o), ObjData::Summary(_)) {
            return Some(o);
        }
        let abs = self.offset(o).unwrap_or(0) + off;
        match self.alloc_size(o) {
            Some(sz) if abs >= sz => None,
            _ => Some(self.sub(o, off)),
        }
    }

    pub fn data(&self, o: ObjId) -> ObjData {
        self.data[o.0 as usize]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = ObjId> + '_ {
        (0..self.data.len() as u32).map(ObjId)
    }

    /// The base (allocation site or function) object underneath `o`.
    pub fn root(&self, o: ObjId) -> ObjId {
        match self.data(o) {
            ObjData::Base(_) | ObjData::Func(_) => o,
            ObjData::Sub { base, .. } => base,
            ObjData::Summary(base) => base,
        }
    }

    /// Byte offset from the root; `None` for summaries.
    pub fn offset(&self, o: ObjId) -> Option<u64> {
        match self.data(o) {
            ObjData::Base(_) | ObjData::Func(_) => Some(0),
            ObjData::Sub { off, .. } => Some(off),
            ObjData::Summary(_) => None,
        }
    }

    pub fn is_summary(&self, o: ObjId) -> bool {
        matches!(self.data(o), ObjData::Summary(_))
    }

    pub fn is_func(&self, o: ObjId) -> bool {
        matches!(self.data(o), ObjData::Func(_))
    }

    pub fn as_func(&self, o: ObjId) -> Option<FnId> {
        match self.data(o) {
            ObjData::Func(f) => Some(f),
            _ => None,
        }
    }

    /// Allocation site of `o`'s base, if it is one.
    pub fn site(&self, o: ObjId) -> Option<Label> {
        match self.data(self.root(o)) {
            ObjData::Base(l) => Some(l),
            _ => None,
        }
    }

    /// Stable, program-derived name: `o@l5`, `o@l5+8`, `o@l5[*]`, `@f`.
    /// Unlike `ObjId`s these do not depend on interning order.
    pub fn name(&self, prog: &IRProgram, o: ObjId) -> String {
        match self.data(o) {
            ObjData::Base(l) => format!("o@{l}"),
            ObjData::Func(f) => format!("@{}", prog.function(f).name),
            ObjData::Sub { base, off } => format!("{}+{off}", self.name(prog, base)),
            ObjData::Summary(base) => format!("{}[*]", self.name(prog, base)),
        }
    }

    pub fn set_names(&self, prog: &IRProgram, set: &ObjSet) -> Vec<String> {
        let mut v: Vec<String> = set.iter().map(|o| self.name(prog, *o)).collect();
        v.sort();
        v
    }
}

impl fmt::Display for ObjId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "obj{}", self.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offset_zero_is_the_base() {
        let mut s = ObjectStore::new();
        let b = s.base(Label(3));
        assert_eq!(s.sub(b, 0), b);
        let s8 = s.sub(b, 8);
        assert_ne!(s8, b);
        assert_eq!(s.root(s8), b);
        assert_eq!(s.offset(s8), Some(8));
    }

    #[test]
    fn nested_subs_compose_against_the_base() {
        let mut s = ObjectStore::new();
        let b = s.base(Label(1));
        let s8 = s.sub(b, 8);
        let s12 = s.sub(s8, 4);
        assert_eq!(s12, s.sub(b, 12));
        assert_eq!(s.root(s12), b);
        assert_eq!(s.offset(s12), Some(12));
    }

    #[test]
    fn summaries_absorb_offsets() {
        let mut s = ObjectStore::new();
        let b = s.base(Label(2));
        let sum = s.summary(b);
        assert_eq!(s.sub(sum, 16), sum);
        assert_eq!(s.summary(sum), sum);
        let s8 = s.sub(b, 8);
        assert_eq!(s.summary(s8), sum);
        assert!(s.is_summary(sum));
        assert_eq!(s.offset(sum), None);
    }

    #[test]
    fn interning_is_stable() {
        let mut s = ObjectStore::new();
        let b = s.base(Label(7));
        let x = s.sub(b, 24);
        let y = s.sub(b, 24);
        assert_eq!(x, y);
        assert_eq!(s.len(), 2);
    }
}
