//! Per-node transfer functions. Each visit rebuilds the node's outputs from
//! scratch out of the current inputs and commits them only when they differ,
//! so a visit is idempotent and the fixed point does not depend on the order
//! in which the worklist drains.

use std::collections::{BTreeMap, BTreeSet};

use crate::ir::{
    BlockId, Callee, FnId, Index, InstrKind, Label, Operand, Selector, TypeId, TypeRef, VarId,
};
use crate::layout::BaseOffset;
use crate::memssa::{VNode, Ver};
use crate::objects::{ObjId, ObjSet};

use super::{CellMap, Engine, Mode, StepChange, TypeMap};

/// True when a store through `pt_p` may replace the target cell outright:
/// the pointer resolves to exactly one object and that object is a
/// strong-update-eligible singleton.
pub fn store_strong_ok(pt_p: &ObjSet, allows: impl Fn(ObjId) -> bool) -> bool {
    pt_p.len() == 1 && allows(*pt_p.iter().next().unwrap())
}

/// One store into the cells of a single base object. `targets` is `pt_p`
/// restricted to objects rooted in this base. The three update shapes:
/// an empty `pt_p` leaves memory untouched, a strong-eligible unique target
/// is replaced, anything else unions weakly.
pub fn apply_store(
    cells: &mut CellMap,
    pt_p: &ObjSet,
    targets: &[ObjId],
    value: &ObjSet,
    strong_ok: bool,
) {
    if pt_p.is_empty() {
        return;
    }
    if strong_ok {
        if let [o] = targets {
            if value.is_empty() {
                cells.remove(o);
            } else {
                cells.insert(*o, value.clone());
            }
        }
        return;
    }
    if value.is_empty() {
        return;
    }
    for &o in targets {
        cells.entry(o).or_default().extend(value.iter().copied());
    }
}

impl Engine<'_> {
    pub(crate) fn transfer_node(&mut self, id: usize) -> StepChange {
        match self.vfg.node(id) {
            VNode::Instr(l) => self.transfer_instr(id, l),
            VNode::Entry(f) => self.transfer_entry(id, f),
            VNode::MemPhi(f, bb, o) => self.transfer_memphi(id, f, bb, o),
        }
    }

    fn val_of(&mut self, op: Operand) -> ObjSet {
        match op {
            Operand::Var(v) => self.vals[v.0 as usize].clone(),
            Operand::Func(f) => [self.store.func(f)].into_iter().collect(),
        }
    }

    fn op_def(&self, op: Operand) -> Option<usize> {
        match op {
            Operand::Var(v) => Some(self.def_node[v.0 as usize]),
            Operand::Func(_) => None,
        }
    }

    /// Type set used to resolve offsets through `o`; always empty in
    /// sparse mode, which is what disables structure filtering there.
    fn filter_types(&self, node: usize, o: ObjId) -> BTreeSet<TypeRef> {
        if self.mode == Mode::Sparse {
            return BTreeSet::new();
        }
        self.tmap[node].get(&o).cloned().unwrap_or_default()
    }

    fn pull_types<I: IntoIterator<Item = ObjId>>(&self, new_t: &mut TypeMap, src: usize, objs: I) {
        if self.mode == Mode::Sparse {
            return;
        }
        for o in objs {
            if let Some(ts) = self.tmap[src].get(&o) {
                if !ts.is_empty() {
                    new_t.entry(o).or_default().extend(ts.iter().copied());
                }
            }
        }
    }

    /// Initial types of a freshly materialized sub-object: every aggregate
    /// the parent's type places at that offset.
    fn seed_sub(&mut self, new_t: &mut TypeMap, sub: ObjId, parent_ty: TypeRef, off: u64) {
        if self.mode == Mode::Sparse {
            return;
        }
        let aggs = self.layouts.aggregates_at_offset(parent_ty, off);
        if !aggs.is_empty() {
            new_t.entry(sub).or_default().extend(aggs);
        }
    }

    fn set_val(&mut self, v: VarId, new: ObjSet, ch: &mut StepChange) {
        let slot = &mut self.vals[v.0 as usize];
        if *slot != new {
            *slot = new;
            ch.outputs = true;
        }
    }

    fn commit_tmap(&mut self, id: usize, new_t: TypeMap, ch: &mut StepChange) {
        if self.tmap[id] != new_t {
            self.tmap[id] = new_t;
            ch.outputs = true;
        }
    }

    fn commit_mem(&mut self, id: usize, new_mem: BTreeMap<ObjId, CellMap>, ch: &mut StepChange) {
        if self.mem_out[id] != new_mem {
            self.mem_out[id] = new_mem;
            ch.outputs = true;
        }
    }

    fn transfer_instr(&mut self, id: usize, l: Label) -> StepChange {
        let mut ch = StepChange::default();
        let instr = self.prog.instr(l);
        let result = instr.result;
        let kind = instr.kind.clone();
        let owner = self.prog.instr_loc(l).func;
        let mut new_t = TypeMap::new();

        match kind {
            InstrKind::Alloca { ty, .. } => {
                let o = self.store.base(l);
                if self.mode == Mode::MtoSs {
                    if let TypeRef::Named(_) = ty {
                        new_t.entry(o).or_default().insert(ty);
                    }
                }
                self.set_val(result.unwrap(), [o].into_iter().collect(), &mut ch);
                self.commit_tmap(id, new_t, &mut ch);
            }
            InstrKind::Malloc { .. } => {
                let o = self.store.base(l);
                self.set_val(result.unwrap(), [o].into_iter().collect(), &mut ch);
                self.commit_tmap(id, new_t, &mut ch);
            }
            InstrKind::Copy { src } => {
                let val = self.val_of(src);
                if let Some(d) = self.op_def(src) {
                    self.pull_types(&mut new_t, d, val.iter().copied());
                }
                self.set_val(result.unwrap(), val, &mut ch);
                self.commit_tmap(id, new_t, &mut ch);
            }
            InstrKind::Cast { target, src } => {
                let val = self.vals[src.0 as usize].clone();
                let d = self.def_node[src.0 as usize];
                self.pull_types(&mut new_t, d, val.iter().copied());
                if self.mode == Mode::MtoSs && target.stars == 1 {
                    if let TypeRef::Named(_) = target.ty {
                        for &o in &val {
                            if !self.store.is_func(o) {
                                new_t.entry(o).or_default().insert(target.ty);
                            }
                        }
                    }
                }
                self.set_val(result.unwrap(), val, &mut ch);
                self.commit_tmap(id, new_t, &mut ch);
            }
            InstrKind::Phi { arms } => {
                let mut val = ObjSet::new();
                for (op, _) in &arms {
                    let a = self.val_of(*op);
                    if let Some(d) = self.op_def(*op) {
                        self.pull_types(&mut new_t, d, a.iter().copied());
                    }
                    val.extend(a);
                }
                self.set_val(result.unwrap(), val, &mut ch);
                self.commit_tmap(id, new_t, &mut ch);
            }
            InstrKind::Field { base, selector } => {
                let pt_q = self.vals[base.0 as usize].clone();
                let d = self.def_node[base.0 as usize];
                let out = match selector {
                    Selector::Name(fld) => self.resolve_field(&mut new_t, d, &pt_q, &fld),
                    Selector::Var(_) => self.resolve_enumerate(&mut new_t, d, &pt_q),
                };
                self.pull_types(&mut new_t, d, out.iter().copied());
                self.set_val(result.unwrap(), out, &mut ch);
                self.commit_tmap(id, new_t, &mut ch);
            }
            InstrKind::Array { base, index } => {
                let pt_q = self.vals[base.0 as usize].clone();
                let d = self.def_node[base.0 as usize];
                let out = match index {
                    Index::Const(c) => self.resolve_array_const(&mut new_t, d, &pt_q, c),
                    Index::Var(_) => self.resolve_enumerate(&mut new_t, d, &pt_q),
                };
                self.pull_types(&mut new_t, d, out.iter().copied());
                self.set_val(result.unwrap(), out, &mut ch);
                self.commit_tmap(id, new_t, &mut ch);
            }
            InstrKind::DynCast { ty, src } => {
                let pt_q = self.vals[src.0 as usize].clone();
                let d = self.def_node[src.0 as usize];
                let out = self.resolve_dyncast(&mut new_t, &pt_q, ty);
                self.pull_types(&mut new_t, d, out.iter().copied());
                self.set_val(result.unwrap(), out, &mut ch);
                self.commit_tmap(id, new_t, &mut ch);
            }
            InstrKind::Constructor { ty, receiver } => {
                let mut contrib: BTreeMap<ObjId, BTreeSet<TypeRef>> = BTreeMap::new();
                if self.prog.is_polymorphic(ty) {
                    let recv = self.vals[receiver.0 as usize].clone();
                    for o in recv {
                        if self.store.is_func(o) {
                            continue;
                        }
                        let b = self.store.root(o);
                        contrib.entry(b).or_default().insert(TypeRef::Named(ty));
                    }
                }
                let prev = self.init_contrib.get(&id);
                let same = match prev {
                    Some(m) => *m == contrib,
                    None => contrib.is_empty(),
                };
                if !same {
                    if contrib.is_empty() {
                        self.init_contrib.remove(&id);
                    } else {
                        self.init_contrib.insert(id, contrib);
                    }
                    let mut global: BTreeMap<ObjId, BTreeSet<TypeRef>> = BTreeMap::new();
                    for m in self.init_contrib.values() {
                        for (&b, ts) in m {
                            global.entry(b).or_default().extend(ts.iter().copied());
                        }
                    }
                    if global != self.init_t {
                        self.init_t = global;
                        ch.init_t = true;
                    }
                    ch.outputs = true;
                }
            }
            InstrKind::Load { addr } => {
                let Some(f) = owner else {
                    self.internal_error = Some(format!("load at {l} outside any function"));
                    return ch;
                };
                let pt_q = self.vals[addr.0 as usize].clone();
                let d = self.def_node[addr.0 as usize];
                let mus = self.annots.mu_of(l).cloned().unwrap_or_default();
                let mut res = ObjSet::new();
                for o in pt_q {
                    if self.store.is_func(o) {
                        continue;
                    }
                    let b = self.store.root(o);
                    let Some(&ver) = mus.get(&b) else {
                        self.internal_error = Some(format!(
                            "load at {l} reaches {} with no version annotation",
                            self.store.name(self.prog, b)
                        ));
                        return ch;
                    };
                    self.pull_types(&mut new_t, d, [o]);
                    let Some(dm) = self.mem_def(f, b, ver) else { continue };
                    let summary = self.store.summary(b);
                    let cells = self.mem_out[dm].get(&b).cloned().unwrap_or_default();
                    if self.store.is_summary(o) {
                        for content in cells.values() {
                            self.pull_types(&mut new_t, dm, content.iter().copied());
                            res.extend(content.iter().copied());
                        }
                    } else {
                        for key in [o, summary] {
                            if let Some(content) = cells.get(&key) {
                                self.pull_types(&mut new_t, dm, content.iter().copied());
                                res.extend(content.iter().copied());
                            }
                        }
                    }
                }
                self.set_val(result.unwrap(), res, &mut ch);
                self.commit_tmap(id, new_t, &mut ch);
            }
            InstrKind::Store { addr, value } => {
                let Some(f) = owner else {
                    self.internal_error = Some(format!("store at {l} outside any function"));
                    return ch;
                };
                let pt_p = self.vals[addr.0 as usize].clone();
                let val = self.val_of(value);
                let def_p = self.def_node[addr.0 as usize];
                self.pull_types(&mut new_t, def_p, pt_p.iter().copied());
                if let Some(dv) = self.op_def(value) {
                    self.pull_types(&mut new_t, dv, val.iter().copied());
                }
                let chis = self.annots.chi_of(l).cloned().unwrap_or_default();
                let mut new_mem: BTreeMap<ObjId, CellMap> = BTreeMap::new();
                for (b, (vin, _)) in chis {
                    let mut cells = match self.mem_def(f, b, vin) {
                        Some(dm) => {
                            let cells = self.cells_out(dm, b);
                            for content in cells.values() {
                                self.pull_types(&mut new_t, dm, content.iter().copied());
                            }
                            cells
                        }
                        None => CellMap::new(),
                    };
                    let targets: Vec<ObjId> = pt_p
                        .iter()
                        .copied()
                        .filter(|&o| !self.store.is_func(o) && self.store.root(o) == b)
                        .collect();
                    let strong = store_strong_ok(&pt_p, |o| {
                        self.sing.allows_strong_update(self.store, o)
                    });
                    apply_store(&mut cells, &pt_p, &targets, &val, strong);
                    if !cells.is_empty() {
                        new_mem.insert(b, cells);
                    }
                }
                self.commit_mem(id, new_mem, &mut ch);
                self.commit_tmap(id, new_t, &mut ch);
            }
            InstrKind::Call { callee, args } => {
                let Some(f) = owner else {
                    self.internal_error = Some(format!("call at {l} outside any function"));
                    return ch;
                };
                let cands = self.pre.targets(l).cloned().unwrap_or_default();
                let new_resolved: BTreeSet<FnId> = match callee {
                    Callee::Direct(g) => [g].into_iter().collect(),
                    Callee::Indirect(v) => self.vals[v.0 as usize]
                        .iter()
                        .filter_map(|&o| self.store.as_func(o))
                        .collect(),
                };
                if !new_resolved.is_subset(&cands) {
                    self.internal_error = Some(format!(
                        "call at {l} resolved outside its pre-analysis envelope"
                    ));
                    return ch;
                }
                let mus = self.annots.mu_of(l).cloned().unwrap_or_default();
                let mut new_premem: BTreeMap<ObjId, CellMap> = BTreeMap::new();
                for (b, ver) in mus {
                    if let Some(dm) = self.mem_def(f, b, ver) {
                        let cells = self.cells_out(dm, b);
                        if !cells.is_empty() {
                            for content in cells.values() {
                                self.pull_types(&mut new_t, dm, content.iter().copied());
                            }
                            new_premem.insert(b, cells);
                        }
                    }
                }
                let new_args: Vec<ObjSet> = args.iter().map(|&a| self.val_of(a)).collect();
                for (&a, av) in args.iter().zip(&new_args) {
                    if let Some(d) = self.op_def(a) {
                        self.pull_types(&mut new_t, d, av.iter().copied());
                    }
                }
                if let Callee::Indirect(v) = callee {
                    let d = self.def_node[v.0 as usize];
                    let cval = self.vals[v.0 as usize].clone();
                    self.pull_types(&mut new_t, d, cval.iter().copied());
                }
                let mut res = ObjSet::new();
                for &g in &new_resolved {
                    for &r in self.rets_of.get(&g).map(|v| v.as_slice()).unwrap_or(&[]) {
                        if let Some(rv) = self.ret_vals.get(&r).cloned() {
                            self.pull_types(&mut new_t, r, rv.iter().copied());
                            res.extend(rv);
                        }
                    }
                }
                let chis = self.annots.chi_of(l).cloned().unwrap_or_default();
                let mut new_mem: BTreeMap<ObjId, CellMap> = BTreeMap::new();
                for (b, _) in chis {
                    let mut cells = new_premem.get(&b).cloned().unwrap_or_default();
                    for &g in &new_resolved {
                        if !self.mr.defs_of(g).contains(&b) {
                            continue;
                        }
                        for &r in self.rets_of.get(&g).map(|v| v.as_slice()).unwrap_or(&[]) {
                            for (&cell, content) in
                                self.mem_out[r].get(&b).cloned().unwrap_or_default().iter()
                            {
                                self.pull_types(&mut new_t, r, content.iter().copied());
                                cells.entry(cell).or_default().extend(content.iter().copied());
                            }
                        }
                    }
                    if !cells.is_empty() {
                        new_mem.insert(b, cells);
                    }
                }
                if self.resolved.get(&id) != Some(&new_resolved) {
                    self.resolved.insert(id, new_resolved);
                    ch.outputs = true;
                }
                if self.call_args.get(&id) != Some(&new_args) {
                    self.call_args.insert(id, new_args);
                    ch.outputs = true;
                }
                if self.premem.get(&id).map(|m| m != &new_premem).unwrap_or(!new_premem.is_empty()) {
                    self.premem.insert(id, new_premem);
                    ch.outputs = true;
                }
                if let Some(r) = result {
                    self.set_val(r, res, &mut ch);
                }
                self.commit_mem(id, new_mem, &mut ch);
                self.commit_tmap(id, new_t, &mut ch);
            }
            InstrKind::Ret { value } => {
                let Some(g) = owner else {
                    self.internal_error = Some(format!("ret at {l} outside any function"));
                    return ch;
                };
                let mut new_ret = ObjSet::new();
                if let Some(op) = value {
                    new_ret = self.val_of(op);
                    if let Some(d) = self.op_def(op) {
                        self.pull_types(&mut new_t, d, new_ret.iter().copied());
                    }
                }
                let mus = self.annots.mu_of(l).cloned().unwrap_or_default();
                let mut new_mem: BTreeMap<ObjId, CellMap> = BTreeMap::new();
                for (b, ver) in mus {
                    if let Some(dm) = self.mem_def(g, b, ver) {
                        let cells = self.cells_out(dm, b);
                        if !cells.is_empty() {
                            for content in cells.values() {
                                self.pull_types(&mut new_t, dm, content.iter().copied());
                            }
                            new_mem.insert(b, cells);
                        }
                    }
                }
                if self.ret_vals.get(&id).map(|r| r != &new_ret).unwrap_or(!new_ret.is_empty()) {
                    self.ret_vals.insert(id, new_ret);
                    ch.outputs = true;
                }
                self.commit_mem(id, new_mem, &mut ch);
                self.commit_tmap(id, new_t, &mut ch);
            }
            InstrKind::Br { .. } | InstrKind::Jmp { .. } => {}
        }
        ch
    }

    fn transfer_entry(&mut self, id: usize, f: FnId) -> StepChange {
        let mut ch = StepChange::default();
        let mut new_t = TypeMap::new();
        let params = self.prog.function(f).params.clone();
        let callers: Vec<usize> = self
            .callers_of
            .get(&f)
            .map(|v| v.clone())
            .unwrap_or_default()
            .into_iter()
            .filter(|c| self.resolved.get(c).is_some_and(|r| r.contains(&f)))
            .collect();
        for (i, &pv) in params.iter().enumerate() {
            let mut set = ObjSet::new();
            for &c in &callers {
                if let Some(a) = self.call_args.get(&c).and_then(|args| args.get(i)) {
                    let a = a.clone();
                    self.pull_types(&mut new_t, c, a.iter().copied());
                    set.extend(a);
                }
            }
            self.set_val(pv, set, &mut ch);
        }
        let accessed = self.mr.accessed(f);
        let mut new_mem: BTreeMap<ObjId, CellMap> = BTreeMap::new();
        for b in accessed {
            let mut cells = CellMap::new();
            for &c in &callers {
                if let Some(m) = self.premem.get(&c).and_then(|m| m.get(&b)).cloned() {
                    for (cell, content) in m {
                        self.pull_types(&mut new_t, c, content.iter().copied());
                        cells.entry(cell).or_default().extend(content);
                    }
                }
            }
            if !cells.is_empty() {
                new_mem.insert(b, cells);
            }
        }
        self.commit_mem(id, new_mem, &mut ch);
        self.commit_tmap(id, new_t, &mut ch);
        ch
    }

    fn transfer_memphi(&mut self, id: usize, f: FnId, bb: BlockId, o: ObjId) -> StepChange {
        let mut ch = StepChange::default();
        let mut new_t = TypeMap::new();
        let arms: Vec<Ver> = self
            .annots
            .fn_mem(f)
            .phis
            .get(&(bb, o))
            .map(|p| p.arms.values().copied().collect())
            .unwrap_or_default();
        let mut cells = CellMap::new();
        for ver in arms {
            if let Some(dm) = self.mem_def(f, o, ver) {
                for (cell, content) in self.cells_out(dm, o) {
                    self.pull_types(&mut new_t, dm, content.iter().copied());
                    cells.entry(cell).or_default().extend(content);
                }
            }
        }
        let mut new_mem = BTreeMap::new();
        if !cells.is_empty() {
            new_mem.insert(o, cells);
        }
        self.commit_mem(id, new_mem, &mut ch);
        self.commit_tmap(id, new_t, &mut ch);
        ch
    }

    fn resolve_field(
        &mut self,
        new_t: &mut TypeMap,
        def_q: usize,
        pt_q: &ObjSet,
        fld: &str,
    ) -> ObjSet {
        let mut out = ObjSet::new();
        for &o in pt_q {
            if self.store.is_func(o) {
                continue;
            }
            let tset = self.filter_types(def_q, o);
            if tset.is_empty() {
                // No structural knowledge. Under filtering the access has
                // no legal derivation; the baseline tries every declared
                // type that knows the field.
                if self.mode == Mode::MtoSs {
                    continue;
                }
                for ti in 0..self.prog.types.len() {
                    let tid = TypeId(ti as u32);
                    if let Some(off) = self.layouts.field_offset(tid, fld) {
                        if let Some(s) = self.store.sub_within(o, off) {
                            out.insert(s);
                            if s != o {
                                self.seed_sub(new_t, s, TypeRef::Named(tid), off);
                            }
                        }
                    }
                }
            } else {
                for t in tset {
                    let TypeRef::Named(tid) = t else { continue };
                    let Some(off) = self.layouts.field_offset(tid, fld) else { continue };
                    if !self.layouts.contains_leaf_offset(t, off) {
                        continue;
                    }
                    let Some(s) = self.store.sub_within(o, off) else { continue };
                    out.insert(s);
                    if s != o {
                        self.seed_sub(new_t, s, t, off);
                    }
                }
            }
        }
        out
    }

    fn resolve_array_const(
        &mut self,
        new_t: &mut TypeMap,
        def_q: usize,
        pt_q: &ObjSet,
        c: u64,
    ) -> ObjSet {
        let mut out = ObjSet::new();
        for &o in pt_q {
            if self.store.is_func(o) {
                continue;
            }
            let tset = self.filter_types(def_q, o);
            if tset.is_empty() {
                if self.mode == Mode::MtoSs {
                    continue;
                }
                for ti in 0..self.prog.types.len() {
                    let t = TypeRef::Named(TypeId(ti as u32));
                    let off = c * self.layouts.index_stride(self.prog, t);
                    if let Some(s) = self.store.sub_within(o, off) {
                        out.insert(s);
                        if s != o {
                            self.seed_sub(new_t, s, t, off);
                        }
                    }
                }
            } else {
                for t in tset {
                    let off = c * self.layouts.index_stride(self.prog, t);
                    if !self.layouts.contains_leaf_offset(t, off) {
                        continue;
                    }
                    let Some(s) = self.store.sub_within(o, off) else { continue };
                    out.insert(s);
                    if s != o {
                        self.seed_sub(new_t, s, t, off);
                    }
                }
            }
        }
        out
    }

    /// Variable subscript or selector: the result may be any element, so
    /// enumerate each type's leaves, or fall back to the whole-object
    /// summary when the type set is empty or only partially enumerable.
    fn resolve_enumerate(&mut self, new_t: &mut TypeMap, def_q: usize, pt_q: &ObjSet) -> ObjSet {
        let mut out = ObjSet::new();
        for &o in pt_q {
            if self.store.is_func(o) {
                continue;
            }
            let tset = self.filter_types(def_q, o);
            if tset.is_empty() {
                out.insert(self.store.summary(o));
                continue;
            }
            for t in tset {
                let (offs, truncated) = self.layouts.element_offsets(t);
                for off in offs {
                    let Some(s) = self.store.sub_within(o, off) else { continue };
                    out.insert(s);
                    if s != o {
                        self.seed_sub(new_t, s, t, off);
                    }
                }
                if truncated {
                    out.insert(self.store.summary(o));
                }
            }
        }
        out
    }

    fn resolve_dyncast(
        &mut self,
        new_t: &mut TypeMap,
        pt_q: &ObjSet,
        target: TypeId,
    ) -> ObjSet {
        let mut out = ObjSet::new();
        for &o in pt_q {
            if self.store.is_func(o) {
                continue;
            }
            let b = self.store.root(o);
            let Some(inits) = self.init_t.get(&b).cloned() else { continue };
            for t in inits {
                let TypeRef::Named(tid) = t else { continue };
                let BaseOffset::At(off) = self.layouts.base_class_offset(tid, target) else {
                    continue;
                };
                let Some(s) = self.store.sub_within(b, off) else { continue };
                out.insert(s);
                // A checked cast reveals placement, never new types for the
                // objects it was given.
                if !pt_q.contains(&s) {
                    self.seed_sub(new_t, s, t, off);
                }
            }
        }
        out
    }
}
