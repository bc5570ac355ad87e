//! Byte-level layout of declared types under a 64-bit C model: natural
//! alignment, padding between members, aggregate alignment equal to the
//! largest member alignment, and sizes padded to the alignment.
//! Polymorphic classes carry virtual-table pointer slots; a class whose
//! direct bases are already polymorphic reuses their slots.
//!
//! Beyond size/align, each layout records the offsets of its primitive
//! leaves (`element_offsets`), its named fields, the placement of every
//! transitive base class, and which aggregates start at which offset.
//! Very large arrays are not enumerated leaf by leaf; they collapse to a
//! stride summary that answers membership queries arithmetically.

use crate::ir::{IRProgram, Prim, TypeId, TypeKind, TypeRef};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

/// Enumerating leaves stops once a single array would contribute more
/// than this many; the array is then recorded as a stride summary.
pub const MAX_ENUMERATED_LEAVES: u64 = 4096;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LayoutError {
    #[error("type `{0}` contains itself by value")]
    CyclicType(String),
    #[error("array type `{0}` has a zero-sized element")]
    ZeroSizedArrayElement(String),
}

/// A run of identically-typed elements whose leaves are not enumerated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SummaryRegion {
    pub start: u64,
    pub elem: TypeRef,
    pub count: u64,
    pub stride: u64,
}

/// Result of a base-class placement query.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaseOffset {
    At(u64),
    NotRelated,
    /// The base occurs at more than one offset (repeated inheritance).
    Ambiguous,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TypeLayout {
    pub size: u64,
    pub align: u64,
    /// Offsets of primitive leaves, excluding summarized array regions.
    pub leaf_offsets: BTreeSet<u64>,
    pub regions: Vec<SummaryRegion>,
    /// Declared field name -> byte offset (own fields only).
    pub field_offsets: BTreeMap<String, u64>,
    /// Transitive base class -> unique byte offset.
    pub base_offsets: BTreeMap<TypeId, u64>,
    /// Bases that occur at more than one offset.
    pub ambiguous_bases: BTreeSet<TypeId>,
    /// Aggregates embedded by value, keyed by their starting offset.
    /// Every aggregate includes itself at offset 0.
    pub aggregates_at: BTreeMap<u64, BTreeSet<TypeRef>>,
    /// Leading virtual-table pointer slot owned by this class itself.
    pub has_own_vtable_slot: bool,
    /// Offsets of all virtual-table pointer slots (own or via bases).
    pub vtable_slots: BTreeSet<u64>,
}

impl TypeLayout {
    pub fn is_summarized(&self) -> bool {
        !self.regions.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct LayoutTable {
    layouts: Vec<TypeLayout>,
}

pub fn prim_size(p: Prim) -> u64 {
    match p {
        Prim::I8 => 1,
        Prim::I16 => 2,
        Prim::I32 => 4,
        Prim::I64 => 8,
        Prim::Ptr => 8,
    }
}

/// Compute layouts for every declared type.
pub fn compute_layouts(prog: &IRProgram) -> Result<LayoutTable, LayoutError> {
    let mut memo: Vec<Option<TypeLayout>> = vec![None; prog.types.len()];
    let mut in_progress = vec![false; prog.types.len()];
    for i in 0..prog.types.len() {
        compute_one(prog, TypeId(i as u32), &mut memo, &mut in_progress)?;
    }
    Ok(LayoutTable { layouts: memo.into_iter().map(|l| l.unwrap()).collect() })
}

fn compute_one(
    prog: &IRProgram,
    id: TypeId,
    memo: &mut Vec<Option<TypeLayout>>,
    in_progress: &mut Vec<bool>,
) -> Result<(), LayoutError> {
    if memo[id.0 as usize].is_some() {
        return Ok(());
    }
    if in_progress[id.0 as usize] {
        return Err(LayoutError::CyclicType(prog.type_def(id).name.clone()));
    }
    in_progress[id.0 as usize] = true;

    // Make sure every by-value dependency is laid out first.
    let def = prog.type_def(id);
    let mut deps: Vec<TypeId> = def.bases().to_vec();
    for (_, tr) in def.fields() {
        if let TypeRef::Named(n) = tr {
            deps.push(*n);
        }
    }
    if let TypeKind::Array { elem: TypeRef::Named(n), .. } = &def.kind {
        deps.push(*n);
    }
    for d in deps {
        compute_one(prog, d, memo, in_progress)?;
    }

    let layout = build_layout(prog, id, memo)?;
    memo[id.0 as usize] = Some(layout);
    in_progress[id.0 as usize] = false;
    Ok(())
}

struct SizeAlign {
    size: u64,
    align: u64,
}

fn size_align(memo: &[Option<TypeLayout>], tr: TypeRef) -> SizeAlign {
    match tr {
        TypeRef::Prim(p) => SizeAlign { size: prim_size(p), align: prim_size(p) },
        TypeRef::Named(id) => {
            let l = memo[id.0 as usize].as_ref().expect("dependency laid out first");
            SizeAlign { size: l.size, align: l.align }
        }
    }
}

fn round_up(off: u64, align: u64) -> u64 {
    if align == 0 {
        return off;
    }
    off.div_ceil(align) * align
}

/// Merge the layout of `tr` into `out`, shifted to `at`.
fn embed(out: &mut TypeLayout, memo: &[Option<TypeLayout>], tr: TypeRef, at: u64) {
    match tr {
        TypeRef::Prim(_) => {
            out.leaf_offsets.insert(at);
        }
        TypeRef::Named(id) => {
            let inner = memo[id.0 as usize].as_ref().unwrap();
            out.aggregates_at.entry(at).or_default().insert(tr);
            for (ioff, aggs) in &inner.aggregates_at {
                out.aggregates_at.entry(at + ioff).or_default().extend(aggs.iter().copied());
            }
            for l in &inner.leaf_offsets {
                out.leaf_offsets.insert(at + l);
            }
            for r in &inner.regions {
                out.regions.push(SummaryRegion { start: at + r.start, ..r.clone() });
            }
            for s in &inner.vtable_slots {
                out.vtable_slots.insert(at + s);
            }
        }
    }
}

fn build_layout(
    prog: &IRProgram,
    id: TypeId,
    memo: &[Option<TypeLayout>],
) -> Result<TypeLayout, LayoutError> {
    let def = prog.type_def(id);
    let mut out = TypeLayout::default();
    out.align = 1;

    match &def.kind {
        TypeKind::Array { count, elem } => {
            let sa = size_align(memo, *elem);
            if sa.size == 0 {
                return Err(LayoutError::ZeroSizedArrayElement(def.name.clone()));
            }
            out.align = sa.align;
            out.size = sa.size * count;
            let elem_leaves: u64 = match elem {
                TypeRef::Prim(_) => 1,
                TypeRef::Named(n) => {
                    let l = memo[n.0 as usize].as_ref().unwrap();
                    if l.is_summarized() {
                        // Nested summarized arrays collapse outright.
                        u64::MAX
                    } else {
                        l.leaf_offsets.len() as u64
                    }
                }
            };
            let enumerable = elem_leaves != u64::MAX
                && count.checked_mul(elem_leaves).is_some_and(|t| t <= MAX_ENUMERATED_LEAVES);
            if enumerable {
                for i in 0..*count {
                    embed(&mut out, memo, *elem, i * sa.size);
                }
            } else {
                out.regions.push(SummaryRegion {
                    start: 0,
                    elem: *elem,
                    count: *count,
                    stride: sa.size,
                });
            }
        }
        TypeKind::Struct { fields } => {
            let mut cursor = 0u64;
            for (name, tr) in fields {
                let sa = size_align(memo, *tr);
                cursor = round_up(cursor, sa.align.max(1));
                out.field_offsets.insert(name.clone(), cursor);
                embed(&mut out, memo, *tr, cursor);
                out.align = out.align.max(sa.align);
                cursor += sa.size;
            }
            out.size = round_up(cursor, out.align);
        }
        TypeKind::Class { bases, fields, .. } => {
            let own_slot = prog.is_polymorphic(id)
                && !bases.iter().any(|b| prog.is_polymorphic(*b));
            let mut cursor = 0u64;
            if own_slot {
                out.has_own_vtable_slot = true;
                out.vtable_slots.insert(0);
                out.leaf_offsets.insert(0); // the slot is a ptr-sized leaf
                out.align = 8;
                cursor = 8;
            }
            for b in bases {
                let bl = memo[b.0 as usize].as_ref().unwrap();
                cursor = round_up(cursor, bl.align.max(1));
                // Record the direct base and everything it embeds.
                record_base(&mut out, *b, cursor);
                for (bb, boff) in &bl.base_offsets {
                    record_base(&mut out, *bb, cursor + boff);
                }
                for bb in &bl.ambiguous_bases {
                    out.base_offsets.remove(bb);
                    out.ambiguous_bases.insert(*bb);
                }
                embed(&mut out, memo, TypeRef::Named(*b), cursor);
                out.align = out.align.max(bl.align);
                cursor += bl.size;
            }
            for (name, tr) in fields {
                let sa = size_align(memo, *tr);
                cursor = round_up(cursor, sa.align.max(1));
                out.field_offsets.insert(name.clone(), cursor);
                embed(&mut out, memo, *tr, cursor);
                out.align = out.align.max(sa.align);
                cursor += sa.size;
            }
            out.size = round_up(cursor, out.align);
        }
    }

    // Every aggregate contains itself at offset 0.
    out.aggregates_at.entry(0).or_default().insert(TypeRef::Named(id));
    Ok(out)
}

fn record_base(out: &mut TypeLayout, base: TypeId, at: u64) {
    if out.ambiguous_bases.contains(&base) {
        return;
    }
    match out.base_offsets.get(&base) {
        None => {
            out.base_offsets.insert(base, at);
        }
        Some(prev) if *prev == at => {}
        Some(_) => {
            out.base_offsets.remove(&base);
            out.ambiguous_bases.insert(base);
        }
    }
}

impl LayoutTable {
    pub fn layout(&self, id: TypeId) -> &TypeLayout {
        &self.layouts[id.0 as usize]
    }

    pub fn size_of(&self, tr: TypeRef) -> u64 {
        match tr {
            TypeRef::Prim(p) => prim_size(p),
            TypeRef::Named(id) => self.layout(id).size,
        }
    }

    pub fn align_of(&self, tr: TypeRef) -> u64 {
        match tr {
            TypeRef::Prim(p) => prim_size(p),
            TypeRef::Named(id) => self.layout(id).align,
        }
    }

    /// Ordered leaf offsets plus a flag telling whether array regions
    /// were summarized (and the listing truncated to element starts).
    pub fn element_offsets(&self, tr: TypeRef) -> (Vec<u64>, bool) {
        match tr {
            TypeRef::Prim(_) => (vec![0], false),
            TypeRef::Named(id) => {
                let l = self.layout(id);
                let mut offs: BTreeSet<u64> = l.leaf_offsets.clone();
                for r in &l.regions {
                    let max = (MAX_ENUMERATED_LEAVES).min(r.count);
                    for i in 0..max {
                        offs.insert(r.start + i * r.stride);
                    }
                }
                (offs.into_iter().collect(), l.is_summarized())
            }
        }
    }

    /// Is `off` the offset of some primitive leaf of `tr`?
    pub fn contains_leaf_offset(&self, tr: TypeRef, off: u64) -> bool {
        match tr {
            TypeRef::Prim(_) => off == 0,
            TypeRef::Named(id) => {
                let l = self.layout(id);
                if l.leaf_offsets.contains(&off) {
                    return true;
                }
                l.regions.iter().any(|r| {
                    off >= r.start
                        && (off - r.start) / r.stride < r.count
                        && self.contains_leaf_offset(r.elem, (off - r.start) % r.stride)
                })
            }
        }
    }

    /// Byte offset of a declared field of `id` (own fields only).
    pub fn field_offset(&self, id: TypeId, field: &str) -> Option<u64> {
        self.layout(id).field_offsets.get(field).copied()
    }

    /// Placement of `base` inside `derived` (reflexive: a type is its own
    /// base at offset 0).
    pub fn base_class_offset(&self, derived: TypeId, base: TypeId) -> BaseOffset {
        if derived == base {
            return BaseOffset::At(0);
        }
        let l = self.layout(derived);
        if l.ambiguous_bases.contains(&base) {
            return BaseOffset::Ambiguous;
        }
        match l.base_offsets.get(&base) {
            Some(off) => BaseOffset::At(*off),
            None => BaseOffset::NotRelated,
        }
    }

    /// Aggregates embedded by value starting exactly at `off`.
    pub fn aggregates_at_offset(&self, tr: TypeRef, off: u64) -> BTreeSet<TypeRef> {
        let mut out = BTreeSet::new();
        let TypeRef::Named(id) = tr else { return out };
        let l = self.layout(id);
        if let Some(aggs) = l.aggregates_at.get(&off) {
            out.extend(aggs.iter().copied());
        }
        for r in &l.regions {
            if off >= r.start && (off - r.start) / r.stride < r.count {
                let rel = (off - r.start) % r.stride;
                if rel == 0 && matches!(r.elem, TypeRef::Named(_)) {
                    out.insert(r.elem);
                }
                out.extend(self.aggregates_at_offset(r.elem, rel));
            }
        }
        out
    }

    /// Stride used by constant/variable indexing through a pointer to
    /// `tr`: the element size for arrays, the full size otherwise (plain
    /// C pointer arithmetic).
    pub fn index_stride(&self, prog: &IRProgram, tr: TypeRef) -> u64 {
        match tr {
            TypeRef::Prim(p) => prim_size(p),
            TypeRef::Named(id) => match &prog.type_def(id).kind {
                TypeKind::Array { elem, .. } => self.size_of(*elem),
                _ => self.layout(id).size,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse::parse_program;

    fn prog(types: &str) -> IRProgram {
        let src = format!("{types}\nfunc @main() {{\nbb0:\n  ret\n}}\n");
        parse_program(&src).expect("fixture parses")
    }

    /// Independent depth-first leaf enumeration used as the oracle for
    /// `element_offsets`: recomputes member placement from sizes and
    /// alignments without consulting the table's offset sets.
    fn brute_leaves(p: &IRProgram, t: &LayoutTable, tr: TypeRef, at: u64, out: &mut BTreeSet<u64>) {
        match tr {
            TypeRef::Prim(_) => {
                out.insert(at);
            }
            TypeRef::Named(id) => match &p.type_def(id).kind {
                TypeKind::Array { count, elem } => {
                    let stride = t.size_of(*elem);
                    for i in 0..*count {
                        brute_leaves(p, t, *elem, at + i * stride, out);
                    }
                }
                TypeKind::Struct { fields } => {
                    let mut cursor = 0u64;
                    for (_, ftr) in fields {
                        cursor = round_up(cursor, t.align_of(*ftr).max(1));
                        brute_leaves(p, t, *ftr, at + cursor, out);
                        cursor += t.size_of(*ftr);
                    }
                }
                TypeKind::Class { bases, fields, .. } => {
                    let own_slot = p.is_polymorphic(id)
                        && !bases.iter().any(|b| p.is_polymorphic(*b));
                    let mut cursor = 0u64;
                    if own_slot {
                        out.insert(at);
                        cursor = 8;
                    }
                    for b in bases {
                        let btr = TypeRef::Named(*b);
                        cursor = round_up(cursor, t.align_of(btr).max(1));
                        brute_leaves(p, t, btr, at + cursor, out);
                        cursor += t.size_of(btr);
                    }
                    for (_, ftr) in fields {
                        cursor = round_up(cursor, t.align_of(*ftr).max(1));
                        brute_leaves(p, t, *ftr, at + cursor, out);
                        cursor += t.size_of(*ftr);
                    }
                }
            },
        }
    }

    fn assert_matches_brute(p: &IRProgram, t: &LayoutTable) {
        for (i, def) in p.types.iter().enumerate() {
            let tr = TypeRef::Named(TypeId(i as u32));
            let (offs, summarized) = t.element_offsets(tr);
            if summarized {
                continue;
            }
            let mut brute = BTreeSet::new();
            brute_leaves(p, t, tr, 0, &mut brute);
            assert_eq!(offs, brute.into_iter().collect::<Vec<_>>(), "type `{}`", def.name);
        }
    }

    #[test]
    fn nested_struct_offsets() {
        let p = prog("type A = struct { x: i32, v: i32 }\ntype B = struct { y: i64, a: A }");
        let t = compute_layouts(&p).unwrap();
        let b = p.type_by_name("B").unwrap();
        let a = p.type_by_name("A").unwrap();
        assert_eq!(t.element_offsets(TypeRef::Named(b)).0, vec![0, 8, 12]);
        assert_eq!(t.size_of(TypeRef::Named(b)), 16);
        assert_eq!(t.field_offset(b, "a"), Some(8));
        assert_eq!(t.field_offset(a, "x"), Some(0));
        assert_eq!(t.field_offset(a, "v"), Some(4));
        assert_eq!(
            t.aggregates_at_offset(TypeRef::Named(b), 8),
            BTreeSet::from([TypeRef::Named(a)])
        );
        assert_matches_brute(&p, &t);
    }

    #[test]
    fn padding_and_alignment() {
        let p = prog("type S = struct { c: i8, n: i32, d: i8 }");
        let t = compute_layouts(&p).unwrap();
        let s = p.type_by_name("S").unwrap();
        assert_eq!(t.element_offsets(TypeRef::Named(s)).0, vec![0, 4, 8]);
        assert_eq!(t.size_of(TypeRef::Named(s)), 12); // padded to align 4
        assert_matches_brute(&p, &t);
    }

    #[test]
    fn byte_structs_are_packed() {
        let p = prog(
            "type S4 = [4 x i8]\ntype T1 = struct { s1: i8, s2: S4 }\ntype S6 = [6 x i8]\ntype T2 = struct { st: S6 }",
        );
        let t = compute_layouts(&p).unwrap();
        let t1 = p.type_by_name("T1").unwrap();
        let t2 = p.type_by_name("T2").unwrap();
        assert_eq!(t.size_of(TypeRef::Named(t1)), 5);
        assert_eq!(t.element_offsets(TypeRef::Named(t1)).0, vec![0, 1, 2, 3, 4]);
        assert_eq!(t.size_of(TypeRef::Named(t2)), 6);
        assert_eq!(t.field_offset(t1, "s2"), Some(1));
        assert_matches_brute(&p, &t);
    }

    #[test]
    fn dual_vtable_class_layout() {
        let p = prog(
            "type B = class() virtual { }\ntype L = class(B) virtual { }\ntype R = class(B) virtual { }\ntype D = class(L, R) { }",
        );
        let t = compute_layouts(&p).unwrap();
        let (b, l, r, d) = (
            p.type_by_name("B").unwrap(),
            p.type_by_name("L").unwrap(),
            p.type_by_name("R").unwrap(),
            p.type_by_name("D").unwrap(),
        );
        assert_eq!(t.size_of(TypeRef::Named(b)), 8);
        assert_eq!(t.size_of(TypeRef::Named(l)), 8);
        assert_eq!(t.size_of(TypeRef::Named(d)), 16);
        assert!(t.layout(b).has_own_vtable_slot);
        assert!(!t.layout(l).has_own_vtable_slot); // reuses B's slot
        assert_eq!(t.layout(d).vtable_slots, BTreeSet::from([0, 8]));
        assert_eq!(t.base_class_offset(d, l), BaseOffset::At(0));
        assert_eq!(t.base_class_offset(d, r), BaseOffset::At(8));
        assert_eq!(t.base_class_offset(d, d), BaseOffset::At(0));
        // B occurs twice (via L and via R): ambiguous.
        assert_eq!(t.base_class_offset(d, b), BaseOffset::Ambiguous);
        assert_eq!(t.base_class_offset(l, b), BaseOffset::At(0));
        assert_eq!(t.base_class_offset(b, d), BaseOffset::NotRelated);
        // The R-part at offset 8 embeds both R and its B base.
        assert_eq!(
            t.aggregates_at_offset(TypeRef::Named(d), 8),
            BTreeSet::from([TypeRef::Named(r), TypeRef::Named(b)])
        );
        assert_matches_brute(&p, &t);
    }

    #[test]
    fn class_with_own_fields_after_base() {
        let p = prog("type B = class() virtual { n: i32 }\ntype D = class(B) virtual { m: i64 }");
        let t = compute_layouts(&p).unwrap();
        let b = p.type_by_name("B").unwrap();
        let d = p.type_by_name("D").unwrap();
        assert_eq!(t.field_offset(b, "n"), Some(8)); // after the vtable slot
        assert_eq!(t.size_of(TypeRef::Named(b)), 16);
        assert_eq!(t.field_offset(d, "m"), Some(16));
        assert_eq!(t.size_of(TypeRef::Named(d)), 24);
        assert_matches_brute(&p, &t);
    }

    #[test]
    fn big_arrays_summarize() {
        let p = prog("type Big = [100000 x i32]\ntype H = struct { hdr: i64, data: Big }");
        let t = compute_layouts(&p).unwrap();
        let big = TypeRef::Named(p.type_by_name("Big").unwrap());
        let h = TypeRef::Named(p.type_by_name("H").unwrap());
        assert!(t.element_offsets(big).1);
        assert!(t.contains_leaf_offset(big, 4 * 99999));
        assert!(!t.contains_leaf_offset(big, 4 * 100000));
        assert!(!t.contains_leaf_offset(big, 2));
        // Embedded region shifted by the header.
        assert!(t.contains_leaf_offset(h, 8 + 4 * 70000));
        assert!(!t.contains_leaf_offset(h, 9));
        assert!(t.contains_leaf_offset(h, 0));
        // Element-start arithmetic for aggregates inside regions.
        let p2 = prog("type A = struct { x: i32, v: i32 }\ntype Many = [3000 x A]");
        let t2 = compute_layouts(&p2).unwrap();
        let many = TypeRef::Named(p2.type_by_name("Many").unwrap());
        let a = TypeRef::Named(p2.type_by_name("A").unwrap());
        assert!(t2.element_offsets(many).1);
        assert_eq!(t2.aggregates_at_offset(many, 8 * 2999), BTreeSet::from([a]));
        assert!(t2.contains_leaf_offset(many, 8 * 2999 + 4));
    }

    #[test]
    fn small_array_enumerates() {
        let p = prog("type A = struct { x: i32, v: i32 }\ntype Arr = [3 x A]");
        let t = compute_layouts(&p).unwrap();
        let arr = TypeRef::Named(p.type_by_name("Arr").unwrap());
        let (offs, summarized) = t.element_offsets(arr);
        assert!(!summarized);
        assert_eq!(offs, vec![0, 4, 8, 12, 16, 20]);
        assert_eq!(t.index_stride(&p, arr), 8);
        assert_matches_brute(&p, &t);
    }

    #[test]
    fn containment_is_monotone() {
        // If T embeds U at offset k, then leaves(U)+k are leaves of T.
        let p = prog(
            "type A = struct { x: i32, v: i32 }\ntype B = struct { y: i64, a: A }\ntype C = struct { b: B, t: i16 }",
        );
        let t = compute_layouts(&p).unwrap();
        for (name, inner, off) in [("B", "A", 8u64), ("C", "B", 0u64)] {
            let outer = TypeRef::Named(p.type_by_name(name).unwrap());
            let inner = TypeRef::Named(p.type_by_name(inner).unwrap());
            for leaf in t.element_offsets(inner).0 {
                assert!(t.contains_leaf_offset(outer, off + leaf));
            }
        }
    }

    #[test]
    fn zero_element_count_rejected_at_parse() {
        let src = "type Z = [0 x i8]\nfunc @main() {\nbb0:\n  ret\n}\n";
        assert!(parse_program(src).is_err());
    }

    #[test]
    fn empty_struct_in_array_rejected() {
        let p = prog("type E = struct { }\ntype Z = [4 x E]");
        assert!(matches!(compute_layouts(&p), Err(LayoutError::ZeroSizedArrayElement(_))));
    }
}
