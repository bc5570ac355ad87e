//! Dense flow-sensitive reference analyzer used as differential ground truth.
//!
//! Implements the same rule semantics as the sparse solver but shares none of
//! its transfer dispatch: memory states are full per-point maps iterated over
//! the CFG until stable, with no memory SSA versions and no value-flow graph.
//! Each base object carries the set of points that last wrote it, so type
//! lookups for loaded contents can consult the writing points directly — the
//! dense counterpart of following a µ edge to its defining node.

use std::collections::{BTreeMap, BTreeSet};

use crate::andersen::AndersenResult;
use crate::ir::{
    BlockId, Callee, DefSite, FnId, IRProgram, Index, InstrKind, Label, Operand, Selector,
    TypeId, TypeRef, VarId,
};
use crate::ir::cfg::{build_cfg, Cfg};
use crate::layout::{BaseOffset, LayoutTable};
use crate::memssa::Annots;
use crate::objects::{ObjId, ObjSet, ObjectStore};
use crate::singletons::Singletons;
use crate::solver::{CellMap, Solution, TypeMap};

/// A program point that can own a type set: an instruction or a function
/// entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum OPoint {
    Instr(Label),
    Entry(FnId),
}

/// Per-base dense memory state: the cells plus the type knowledge the
/// current version of this base carries for its contents. The map travels
/// with the memory so a control-flow join only merges types from paths
/// where the content actually survives — a strong kill on one side drops
/// its entry here along with the cell.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BaseState {
    pub cells: CellMap,
    pub vermap: TypeMap,
}

impl BaseState {
    /// Record the types the new version carries: the node's type map
    /// restricted to contents still present in the cells.
    fn reversion(&mut self, node_t: &TypeMap) {
        let mut vm = TypeMap::new();
        for content in self.cells.values() {
            for &x in content {
                if let Some(ts) = node_t.get(&x) {
                    if !ts.is_empty() {
                        vm.entry(x).or_default().extend(ts.iter().copied());
                    }
                }
            }
        }
        self.vermap = vm;
    }
}

pub type Mem = BTreeMap<ObjId, BaseState>;

fn join_mem(into: &mut Mem, other: &Mem) {
    for (b, st) in other {
        let slot = into.entry(*b).or_default();
        for (cell, content) in &st.cells {
            slot.cells.entry(*cell).or_default().extend(content.iter().copied());
        }
        for (x, ts) in &st.vermap {
            slot.vermap.entry(*x).or_default().extend(ts.iter().copied());
        }
    }
}

/// Add a base's carried content types into the map being built for a node.
fn pull_vermap(new_t: &mut TypeMap, st: &BaseState, objs: impl IntoIterator<Item = ObjId>) {
    for x in objs {
        if let Some(ts) = st.vermap.get(&x) {
            if !ts.is_empty() {
                new_t.entry(x).or_default().extend(ts.iter().copied());
            }
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum OracleError {
    #[error("oracle sweep budget exhausted after {sweeps} passes")]
    Budget { sweeps: u64 },
    #[error("oracle invariant violated: {0}")]
    Internal(String),
}

pub struct OracleState {
    pub vals: BTreeMap<VarId, ObjSet>,
    pub tmap: BTreeMap<OPoint, TypeMap>,
    /// Memory after each instruction.
    pub mem_at: BTreeMap<Label, Mem>,
    /// Memory flowing into each call, restricted to what its candidate
    /// callees may touch.
    pub premem_at: BTreeMap<Label, Mem>,
    pub init_t: BTreeMap<ObjId, BTreeSet<TypeRef>>,
    pub resolved: BTreeMap<Label, BTreeSet<FnId>>,
    pub sweeps: u64,
}

impl OracleState {
    pub fn pt(&self, v: VarId) -> ObjSet {
        self.vals.get(&v).cloned().unwrap_or_default()
    }

    pub fn types_at(&self, p: OPoint) -> TypeMap {
        self.tmap.get(&p).cloned().unwrap_or_default()
    }
}

/// Sparse-or-dense analysis mode is shared: the oracle accepts the same
/// flag so both engines can be compared in either flavor.
pub fn dense_solve(
    prog: &IRProgram,
    layouts: &LayoutTable,
    store: &mut ObjectStore,
    pre: &AndersenResult,
    sing: &Singletons,
    mode: crate::solver::Mode,
    max_sweeps: u64,
) -> Result<OracleState, OracleError> {
    Oracle::new(prog, layouts, store, pre, sing, mode).run(max_sweeps)
}

struct Oracle<'a> {
    prog: &'a IRProgram,
    layouts: &'a LayoutTable,
    store: &'a mut ObjectStore,
    pre: &'a AndersenResult,
    sing: &'a Singletons,
    mode: crate::solver::Mode,

    vals: BTreeMap<VarId, ObjSet>,
    tmap: BTreeMap<OPoint, TypeMap>,
    mem_at: BTreeMap<Label, Mem>,
    premem_at: BTreeMap<Label, Mem>,
    init_contrib: BTreeMap<Label, BTreeMap<ObjId, BTreeSet<TypeRef>>>,
    init_t: BTreeMap<ObjId, BTreeSet<TypeRef>>,
    resolved: BTreeMap<Label, BTreeSet<FnId>>,
    entry_mem: BTreeMap<FnId, Mem>,
    /// Out-state of every block, from the previous visit.
    block_out: BTreeMap<(FnId, BlockId), Mem>,
    /// Ret instructions per function.
    rets_of: BTreeMap<FnId, Vec<Label>>,
    /// Bases a function may read or write, derived from the pre-analysis
    /// (recomputed here rather than borrowed from the sparse pipeline).
    refs: BTreeMap<FnId, BTreeSet<ObjId>>,
    defs: BTreeMap<FnId, BTreeSet<ObjId>>,
    cfgs: BTreeMap<FnId, Cfg>,
    changed: bool,
    error: Option<OracleError>,
}

impl<'a> Oracle<'a> {
    fn new(
        prog: &'a IRProgram,
        layouts: &'a LayoutTable,
        store: &'a mut ObjectStore,
        pre: &'a AndersenResult,
        sing: &'a Singletons,
        mode: crate::solver::Mode,
    ) -> Self {
        let mut rets_of: BTreeMap<FnId, Vec<Label>> = BTreeMap::new();
        for (owner, instr) in prog.all_instrs() {
            if let (Some(f), InstrKind::Ret { .. }) = (owner, &instr.kind) {
                rets_of.entry(f).or_default().push(instr.label);
            }
        }
        let mut cfgs = BTreeMap::new();
        for func in &prog.functions {
            cfgs.insert(func.id, build_cfg(func));
        }
        let (refs, defs) = pre_mod_ref(prog, store, pre);
        Oracle {
            prog,
            layouts,
            store,
            pre,
            sing,
            mode,
            vals: BTreeMap::new(),
            tmap: BTreeMap::new(),
            mem_at: BTreeMap::new(),
            premem_at: BTreeMap::new(),
            init_contrib: BTreeMap::new(),
            init_t: BTreeMap::new(),
            resolved: BTreeMap::new(),
            entry_mem: BTreeMap::new(),
            block_out: BTreeMap::new(),
            rets_of,
            refs,
            defs,
            cfgs,
            changed: false,
            error: None,
        }
    }

    fn run(mut self, max_sweeps: u64) -> Result<OracleState, OracleError> {
        let mut sweeps = 0;
        loop {
            sweeps += 1;
            if sweeps > max_sweeps {
                return Err(OracleError::Budget { sweeps });
            }
            self.changed = false;
            self.sweep();
            if let Some(e) = self.error.take() {
                return Err(e);
            }
            if !self.changed {
                break;
            }
        }
        Ok(OracleState {
            vals: self.vals,
            tmap: self.tmap,
            mem_at: self.mem_at,
            premem_at: self.premem_at,
            init_t: self.init_t,
            resolved: self.resolved,
            sweeps,
        })
    }

    fn accessed(&self, f: FnId) -> BTreeSet<ObjId> {
        let mut s = self.refs.get(&f).cloned().unwrap_or_default();
        if let Some(d) = self.defs.get(&f) {
            s.extend(d.iter().copied());
        }
        s
    }

    fn sweep(&mut self) {
        // Module-scope allocations first.
        for gi in 0..self.prog.globals.len() {
            let l = self.prog.globals[gi].label;
            self.transfer(None, l);
        }
        for fi in 0..self.prog.functions.len() {
            let f = FnId(fi as u32);
            self.sweep_function(f);
        }
    }

    fn sweep_function(&mut self, f: FnId) {
        // Rebuild the entry state from the callers that currently resolve
        // to this function, restricted to the bases it may touch. The entry
        // type map is rebuilt from scratch on every visit, like every other
        // point's map.
        let mut entry = Mem::new();
        let mut entry_t = TypeMap::new();
        let acc = self.accessed(f);
        let callers: Vec<Label> = self
            .resolved
            .iter()
            .filter(|(_, gs)| gs.contains(&f))
            .map(|(&l, _)| l)
            .collect();
        for &c in &callers {
            let prem = self.premem_at.get(&c).cloned().unwrap_or_default();
            for (&b, st) in prem.iter().filter(|(b, _)| acc.contains(b)) {
                let slot = entry.entry(b).or_default();
                for (cell, content) in &st.cells {
                    self.pull(&mut entry_t, OPoint::Instr(c), content);
                    slot.cells.entry(*cell).or_default().extend(content.iter().copied());
                }
            }
        }
        // Parameter values come from the same resolved callers.
        let params = self.prog.function(f).params.clone();
        let mut param_sets: Vec<ObjSet> = vec![ObjSet::new(); params.len()];
        for &c in &callers {
            let InstrKind::Call { args, .. } = &self.prog.instr(c).kind else { continue };
            let args = args.clone();
            for (i, slot) in param_sets.iter_mut().enumerate() {
                if let Some(&a) = args.get(i) {
                    let av = match a {
                        Operand::Var(v) => self.vals.get(&v).cloned().unwrap_or_default(),
                        Operand::Func(g) => [self.store.func(g)].into_iter().collect(),
                    };
                    self.pull(&mut entry_t, OPoint::Instr(c), &av);
                    slot.extend(av);
                }
            }
        }
        for (pv, set) in params.iter().zip(param_sets) {
            self.set_val(*pv, set);
        }
        for st in entry.values_mut() {
            st.reversion(&entry_t);
        }
        self.commit_tmap(OPoint::Entry(f), entry_t);
        if self.entry_mem.get(&f) != Some(&entry) {
            self.entry_mem.insert(f, entry);
            self.changed = true;
        }

        let cfg = self.cfgs[&f].clone();
        let func = self.prog.function(f);
        let n_blocks = func.blocks.len();
        for bi in 0..n_blocks {
            let bb = BlockId(bi as u32);
            let mut mem = if bi == 0 {
                self.entry_mem[&f].clone()
            } else {
                let mut m = Mem::new();
                for &p in &cfg.preds[bi] {
                    if let Some(po) = self.block_out.get(&(f, p)).cloned() {
                        join_mem(&mut m, &po);
                    }
                }
                m
            };
            let labels: Vec<Label> =
                self.prog.function(f).blocks[bi].instrs.iter().map(|i| i.label).collect();
            for l in labels {
                mem = self.transfer_mem(f, l, mem);
                if self.error.is_some() {
                    return;
                }
                if self.mem_at.get(&l) != Some(&mem) {
                    self.mem_at.insert(l, mem.clone());
                    self.changed = true;
                }
            }
            if self.block_out.get(&(f, bb)) != Some(&mem) {
                self.block_out.insert((f, bb), mem);
                self.changed = true;
            }
        }
    }

    fn operand(&mut self, op: Operand) -> ObjSet {
        match op {
            Operand::Var(v) => self.vals.get(&v).cloned().unwrap_or_default(),
            Operand::Func(f) => [self.store.func(f)].into_iter().collect(),
        }
    }

    fn def_point(&self, v: VarId) -> OPoint {
        match self.prog.var(v).def {
            DefSite::Instr(l) => OPoint::Instr(l),
            DefSite::Param(f, _) => OPoint::Entry(f),
        }
    }

    fn op_point(&self, op: Operand) -> Option<OPoint> {
        match op {
            Operand::Var(v) => Some(self.def_point(v)),
            Operand::Func(_) => None,
        }
    }

    fn set_val(&mut self, v: VarId, set: ObjSet) {
        let prev = self.vals.get(&v);
        if prev != Some(&set) {
            if prev.is_none() && set.is_empty() {
                return;
            }
            self.vals.insert(v, set);
            self.changed = true;
        }
    }

    /// Accumulate types of `objs` as known at `src` into the running map
    /// for `at`. The oracle's `tmap` is committed per point at the end of
    /// each transfer; during one transfer this builds the fresh map.
    fn pull(&self, new_t: &mut TypeMap, src: OPoint, objs: &ObjSet) {
        if self.mode == crate::solver::Mode::Sparse {
            return;
        }
        let Some(m) = self.tmap.get(&src) else { return };
        for o in objs {
            if let Some(ts) = m.get(o) {
                if !ts.is_empty() {
                    new_t.entry(*o).or_default().extend(ts.iter().copied());
                }
            }
        }
    }

    fn commit_tmap(&mut self, at: OPoint, new_t: TypeMap) {
        let prev = self.tmap.get(&at);
        let same = match prev {
            Some(m) => *m == new_t,
            None => new_t.is_empty(),
        };
        if !same {
            if new_t.is_empty() {
                self.tmap.remove(&at);
            } else {
                self.tmap.insert(at, new_t);
            }
            self.changed = true;
        }
    }

    fn filter_types(&self, src: OPoint, o: ObjId) -> BTreeSet<TypeRef> {
        if self.mode == crate::solver::Mode::Sparse {
            return BTreeSet::new();
        }
        self.tmap.get(&src).and_then(|m| m.get(&o)).cloned().unwrap_or_default()
    }

    /// Value-producing instructions that do not touch memory.
    fn transfer(&mut self, _owner: Option<FnId>, l: Label) {
        let instr = self.prog.instr(l).clone();
        let mut new_t = TypeMap::new();
        match instr.kind {
            InstrKind::Alloca { ty, .. } => {
                let o = self.store.base(l);
                if self.mode == crate::solver::Mode::MtoSs {
                    if let TypeRef::Named(_) = ty {
                        new_t.entry(o).or_default().insert(ty);
                    }
                }
                self.set_val(instr.result.unwrap(), [o].into_iter().collect());
            }
            InstrKind::Malloc { .. } => {
                let o = self.store.base(l);
                self.set_val(instr.result.unwrap(), [o].into_iter().collect());
            }
            InstrKind::Copy { src } => {
                let v = self.operand(src);
                if let Some(p) = self.op_point(src) {
                    self.pull(&mut new_t, p, &v);
                }
                self.set_val(instr.result.unwrap(), v);
            }
            InstrKind::Cast { target, src } => {
                let v = self.vals.get(&src).cloned().unwrap_or_default();
                self.pull(&mut new_t, self.def_point(src), &v);
                if self.mode == crate::solver::Mode::MtoSs && target.stars == 1 {
                    if let TypeRef::Named(_) = target.ty {
                        for &o in &v {
                            if !self.store.is_func(o) {
                                new_t.entry(o).or_default().insert(target.ty);
                            }
                        }
                    }
                }
                self.set_val(instr.result.unwrap(), v);
            }
            InstrKind::Phi { arms } => {
                let mut v = ObjSet::new();
                for (op, _) in arms {
                    let a = self.operand(op);
                    if let Some(p) = self.op_point(op) {
                        self.pull(&mut new_t, p, &a);
                    }
                    v.extend(a);
                }
                self.set_val(instr.result.unwrap(), v);
            }
            InstrKind::Field { base, selector } => {
                let pt_q = self.vals.get(&base).cloned().unwrap_or_default();
                let p = self.def_point(base);
                let out = match selector {
                    Selector::Name(fld) => self.field_subs(&mut new_t, p, &pt_q, &fld),
                    Selector::Var(_) => self.enumerate_subs(&mut new_t, p, &pt_q),
                };
                self.pull(&mut new_t, p, &out);
                self.set_val(instr.result.unwrap(), out);
            }
            InstrKind::Array { base, index } => {
                let pt_q = self.vals.get(&base).cloned().unwrap_or_default();
                let p = self.def_point(base);
                let out = match index {
                    Index::Const(c) => self.array_subs(&mut new_t, p, &pt_q, c),
                    Index::Var(_) => self.enumerate_subs(&mut new_t, p, &pt_q),
                };
                self.pull(&mut new_t, p, &out);
                self.set_val(instr.result.unwrap(), out);
            }
            InstrKind::DynCast { ty, src } => {
                let pt_q = self.vals.get(&src).cloned().unwrap_or_default();
                let p = self.def_point(src);
                let out = self.dyncast_subs(&mut new_t, &pt_q, ty);
                self.pull(&mut new_t, p, &out);
                self.set_val(instr.result.unwrap(), out);
            }
            InstrKind::Constructor { ty, receiver } => {
                let mut contrib: BTreeMap<ObjId, BTreeSet<TypeRef>> = BTreeMap::new();
                if self.prog.is_polymorphic(ty) {
                    let recv = self.vals.get(&receiver).cloned().unwrap_or_default();
                    for o in recv {
                        if self.store.is_func(o) {
                            continue;
                        }
                        let b = self.store.root(o);
                        contrib.entry(b).or_default().insert(TypeRef::Named(ty));
                    }
                }
                if self.init_contrib.get(&l) != Some(&contrib) {
                    if contrib.is_empty() {
                        self.init_contrib.remove(&l);
                    } else {
                        self.init_contrib.insert(l, contrib);
                    }
                    let mut global: BTreeMap<ObjId, BTreeSet<TypeRef>> = BTreeMap::new();
                    for m in self.init_contrib.values() {
                        for (&b, ts) in m {
                            global.entry(b).or_default().extend(ts.iter().copied());
                        }
                    }
                    if global != self.init_t {
                        self.init_t = global;
                    }
                    self.changed = true;
                }
            }
            _ => unreachable!("memory instructions go through transfer_mem"),
        }
        self.commit_tmap(OPoint::Instr(l), new_t);
    }

    /// Memory-threading transfer: takes the in-state, returns the out-state.
    fn transfer_mem(&mut self, f: FnId, l: Label, mut mem: Mem) -> Mem {
        let instr = self.prog.instr(l).clone();
        match instr.kind {
            InstrKind::Load { addr } => {
                let mut new_t = TypeMap::new();
                let pt_q = self.vals.get(&addr).cloned().unwrap_or_default();
                let p = self.def_point(addr);
                let mut res = ObjSet::new();
                for o in pt_q {
                    if self.store.is_func(o) {
                        continue;
                    }
                    let b = self.store.root(o);
                    self.pull(&mut new_t, p, &[o].into_iter().collect());
                    let Some(st) = mem.get(&b).cloned() else { continue };
                    let summary = self.store.summary(b);
                    if self.store.is_summary(o) {
                        for content in st.cells.values() {
                            pull_vermap(&mut new_t, &st, content.iter().copied());
                            res.extend(content.iter().copied());
                        }
                    } else {
                        for key in [o, summary] {
                            if let Some(content) = st.cells.get(&key) {
                                pull_vermap(&mut new_t, &st, content.iter().copied());
                                res.extend(content.iter().copied());
                            }
                        }
                    }
                }
                self.set_val(instr.result.unwrap(), res);
                self.commit_tmap(OPoint::Instr(l), new_t);
            }
            InstrKind::Store { addr, value } => {
                let mut new_t = TypeMap::new();
                let pt_p = self.vals.get(&addr).cloned().unwrap_or_default();
                let val = self.operand(value);
                self.pull(&mut new_t, self.def_point(addr), &pt_p);
                if let Some(p) = self.op_point(value) {
                    self.pull(&mut new_t, p, &val);
                }
                // Carried contents of every base this store may version.
                let versioned: BTreeSet<ObjId> = self
                    .pre
                    .var(addr)
                    .map(|s| s.iter().map(|&o| self.store.root(o)).collect())
                    .unwrap_or_default();
                for b in &versioned {
                    if let Some(st) = mem.get(b) {
                        let contents: Vec<ObjId> =
                            st.cells.values().flatten().copied().collect();
                        pull_vermap(&mut new_t, st, contents);
                    }
                }
                let strong = crate::solver::store_strong_ok(&pt_p, |o| {
                    self.sing.allows_strong_update(self.store, o)
                });
                let by_base: Vec<(ObjId, Vec<ObjId>)> = {
                    let mut m: BTreeMap<ObjId, Vec<ObjId>> = BTreeMap::new();
                    for &o in &pt_p {
                        if !self.store.is_func(o) {
                            m.entry(self.store.root(o)).or_default().push(o);
                        }
                    }
                    m.into_iter().collect()
                };
                for (b, targets) in by_base {
                    let st = mem.entry(b).or_default();
                    crate::solver::apply_store(&mut st.cells, &pt_p, &targets, &val, strong);
                }
                for b in &versioned {
                    if let Some(st) = mem.get_mut(b) {
                        st.reversion(&new_t);
                    }
                }
                self.commit_tmap(OPoint::Instr(l), new_t);
            }
            InstrKind::Call { callee, args } => {
                let mut new_t = TypeMap::new();
                let cands = self.pre.targets(l).cloned().unwrap_or_default();
                let new_resolved: BTreeSet<FnId> = match callee {
                    Callee::Direct(g) => [g].into_iter().collect(),
                    Callee::Indirect(v) => self
                        .vals
                        .get(&v)
                        .cloned()
                        .unwrap_or_default()
                        .iter()
                        .filter_map(|&o| self.store.as_func(o))
                        .collect(),
                };
                if !new_resolved.is_subset(&cands) {
                    self.error = Some(OracleError::Internal(format!(
                        "call at {l} resolved outside the pre-analysis envelope"
                    )));
                    return mem;
                }
                // Snapshot what the candidates may touch, for entry states.
                let mut touched: BTreeSet<ObjId> = BTreeSet::new();
                let mut may_def: BTreeSet<ObjId> = BTreeSet::new();
                for &g in &cands {
                    touched.extend(self.accessed(g));
                    may_def.extend(self.defs.get(&g).cloned().unwrap_or_default());
                }
                let mut prem = Mem::new();
                for (&b, st) in mem.iter().filter(|(b, _)| touched.contains(b)) {
                    if st.cells.is_empty() {
                        continue;
                    }
                    let contents: Vec<ObjId> = st.cells.values().flatten().copied().collect();
                    pull_vermap(&mut new_t, st, contents);
                    prem.insert(b, st.clone());
                }
                if self.premem_at.get(&l) != Some(&prem) {
                    self.premem_at.insert(l, prem);
                    self.changed = true;
                }
                for &a in &args {
                    let av = self.operand(a);
                    if let Some(p) = self.op_point(a) {
                        self.pull(&mut new_t, p, &av);
                    }
                }
                if let Callee::Indirect(v) = callee {
                    let cv = self.vals.get(&v).cloned().unwrap_or_default();
                    self.pull(&mut new_t, self.def_point(v), &cv);
                }
                // Result values and memory written by resolved callees.
                let mut res = ObjSet::new();
                for &g in &new_resolved {
                    for &r in self.rets_of.get(&g).cloned().unwrap_or_default().iter() {
                        let InstrKind::Ret { value } = &self.prog.instr(r).kind else {
                            continue;
                        };
                        if let Some(op) = value {
                            let rv = self.operand(*op);
                            self.pull(&mut new_t, OPoint::Instr(r), &rv);
                            res.extend(rv);
                        }
                    }
                }
                for &b in &may_def {
                    let mut merged: CellMap =
                        mem.get(&b).map(|st| st.cells.clone()).unwrap_or_default();
                    let mut any = mem.contains_key(&b);
                    for &g in &new_resolved {
                        if !self.defs.get(&g).map(|d| d.contains(&b)).unwrap_or(false) {
                            continue;
                        }
                        for &r in self.rets_of.get(&g).cloned().unwrap_or_default().iter() {
                            let Some(rmem) = self.mem_at.get(&r) else { continue };
                            let Some(st) = rmem.get(&b).cloned() else { continue };
                            for (cell, content) in &st.cells {
                                self.pull(&mut new_t, OPoint::Instr(r), content);
                                merged.entry(*cell).or_default().extend(content.iter().copied());
                                any = true;
                            }
                        }
                    }
                    if any {
                        mem.entry(b).or_default().cells = merged;
                    }
                }
                for &b in &may_def {
                    if let Some(st) = mem.get_mut(&b) {
                        st.reversion(&new_t);
                    }
                }
                if self.resolved.get(&l) != Some(&new_resolved) {
                    self.resolved.insert(l, new_resolved);
                    self.changed = true;
                }
                if let Some(rv) = instr.result {
                    self.set_val(rv, res);
                }
                self.commit_tmap(OPoint::Instr(l), new_t);
            }
            InstrKind::Ret { value } => {
                let mut new_t = TypeMap::new();
                if let Some(op) = value {
                    let rv = self.operand(op);
                    if let Some(p) = self.op_point(op) {
                        self.pull(&mut new_t, p, &rv);
                    }
                }
                let own_defs = self.defs.get(&f).cloned().unwrap_or_default();
                for b in own_defs {
                    if let Some(st) = mem.get(&b) {
                        let contents: Vec<ObjId> =
                            st.cells.values().flatten().copied().collect();
                        pull_vermap(&mut new_t, st, contents);
                    }
                }
                self.commit_tmap(OPoint::Instr(l), new_t);
            }
            InstrKind::Br { .. } | InstrKind::Jmp { .. } => {}
            _ => {
                self.transfer(Some(f), l);
            }
        }
        mem
    }

    fn seed(&mut self, new_t: &mut TypeMap, sub: ObjId, parent_ty: TypeRef, off: u64) {
        if self.mode == crate::solver::Mode::Sparse {
            return;
        }
        let aggs = self.layouts.aggregates_at_offset(parent_ty, off);
        if !aggs.is_empty() {
            new_t.entry(sub).or_default().extend(aggs);
        }
    }

    fn field_subs(
        &mut self,
        new_t: &mut TypeMap,
        p: OPoint,
        pt_q: &ObjSet,
        fld: &str,
    ) -> ObjSet {
        let mut out = ObjSet::new();
        for &o in pt_q {
            if self.store.is_func(o) {
                continue;
            }
            let tset = self.filter_types(p, o);
            if tset.is_empty() {
                if self.mode == crate::solver::Mode::MtoSs {
                    continue;
                }
                for ti in 0..self.prog.types.len() {
                    let tid = TypeId(ti as u32);
                    if let Some(off) = self.layouts.field_offset(tid, fld) {
                        if let Some(s) = self.store.sub_within(o, off) {
                            out.insert(s);
                            if s != o {
                                self.seed(new_t, s, TypeRef::Named(tid), off);
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
                        self.seed(new_t, s, t, off);
                    }
                }
            }
        }
        out
    }

    fn array_subs(&mut self, new_t: &mut TypeMap, p: OPoint, pt_q: &ObjSet, c: u64) -> ObjSet {
        let mut out = ObjSet::new();
        for &o in pt_q {
            if self.store.is_func(o) {
                continue;
            }
            let tset = self.filter_types(p, o);
            if tset.is_empty() {
                if self.mode == crate::solver::Mode::MtoSs {
                    continue;
                }
                for ti in 0..self.prog.types.len() {
                    let t = TypeRef::Named(TypeId(ti as u32));
                    let off = c * self.layouts.index_stride(self.prog, t);
                    if let Some(s) = self.store.sub_within(o, off) {
                        out.insert(s);
                        if s != o {
                            self.seed(new_t, s, t, off);
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
                        self.seed(new_t, s, t, off);
                    }
                }
            }
        }
        out
    }

    fn enumerate_subs(&mut self, new_t: &mut TypeMap, p: OPoint, pt_q: &ObjSet) -> ObjSet {
        let mut out = ObjSet::new();
        for &o in pt_q {
            if self.store.is_func(o) {
                continue;
            }
            let tset = self.filter_types(p, o);
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
                        self.seed(new_t, s, t, off);
                    }
                }
                if truncated {
                    out.insert(self.store.summary(o));
                }
            }
        }
        out
    }

    fn dyncast_subs(&mut self, new_t: &mut TypeMap, pt_q: &ObjSet, target: TypeId) -> ObjSet {
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
                if !pt_q.contains(&s) {
                    self.seed(new_t, s, t, off);
                }
            }
        }
        out
    }
}

/// Transitive may-read/may-write base sets per function, computed from the
/// pre-analysis points-to sets and call graph.
fn pre_mod_ref(
    prog: &IRProgram,
    store: &ObjectStore,
    pre: &AndersenResult,
) -> (BTreeMap<FnId, BTreeSet<ObjId>>, BTreeMap<FnId, BTreeSet<ObjId>>) {
    let mut refs: BTreeMap<FnId, BTreeSet<ObjId>> = BTreeMap::new();
    let mut defs: BTreeMap<FnId, BTreeSet<ObjId>> = BTreeMap::new();
    let mut callees: BTreeMap<FnId, BTreeSet<FnId>> = BTreeMap::new();
    for func in &prog.functions {
        let f = func.id;
        for block in &func.blocks {
            for instr in &block.instrs {
                match &instr.kind {
                    InstrKind::Load { addr } => {
                        if let Some(s) = pre.var(*addr) {
                            refs.entry(f)
                                .or_default()
                                .extend(s.iter().map(|&o| store.root(o)));
                        }
                    }
                    InstrKind::Store { addr, .. } => {
                        if let Some(s) = pre.var(*addr) {
                            defs.entry(f)
                                .or_default()
                                .extend(s.iter().map(|&o| store.root(o)));
                        }
                    }
                    InstrKind::Call { .. } => {
                        if let Some(ts) = pre.targets(instr.label) {
                            callees.entry(f).or_default().extend(ts.iter().copied());
                        }
                    }
                    _ => {}
                }
            }
        }
    }
    loop {
        let mut touched = false;
        for func in &prog.functions {
            let f = func.id;
            for g in callees.get(&f).cloned().unwrap_or_default() {
                for (acc, from) in
                    [(&mut refs, g), (&mut defs, g)]
                {
                    let add = acc.get(&from).cloned().unwrap_or_default();
                    if add.is_empty() {
                        continue;
                    }
                    let slot = acc.entry(f).or_default();
                    let before = slot.len();
                    slot.extend(add);
                    touched |= slot.len() != before;
                }
            }
        }
        if !touched {
            break;
        }
    }
    (refs, defs)
}

/// Compare a sparse solve against the oracle on the same program. Returns a
/// description of the first divergence, or `None` when they agree. The
/// annotation table picks which labels carry memory state worth comparing.
///
/// Both engines must have been driven through the same `ObjectStore`:
/// object ids are store-local, so comparing sets from two stores is
/// meaningless. `Analysis::diff_against_oracle` arranges this.
pub fn first_divergence(
    prog: &IRProgram,
    store: &ObjectStore,
    annots: &Annots,
    vfg: &crate::memssa::Vfg,
    sol: &Solution,
    orc: &OracleState,
) -> Option<String> {
    for vi in 0..prog.vars.len() {
        let v = VarId(vi as u32);
        let s = sol.pt(v);
        let o = orc.pt(v);
        if *s != o {
            return Some(format!(
                "pt({}) differs: solver {:?}, oracle {:?}",
                prog.var_name(v),
                names(prog, store, s),
                names(prog, store, &o)
            ));
        }
    }
    if *sol.init_t() != orc.init_t {
        return Some("pt_initT differs".into());
    }
    for (owner, instr) in prog.all_instrs() {
        let l = instr.label;
        let node = l.0 as usize;
        // Type sets at every instruction.
        let st = sol.types_at_label(l);
        let ot = orc.types_at(OPoint::Instr(l));
        if *st != ot {
            return Some(format!("pt_t at {l} differs: solver {st:?}, oracle {ot:?}"));
        }
        if owner.is_none() {
            continue;
        }
        if let InstrKind::Call { .. } = instr.kind {
            let sr = sol.resolved_at(l).cloned().unwrap_or_default();
            let or = orc.resolved.get(&l).cloned().unwrap_or_default();
            if sr != or {
                return Some(format!("resolved targets at {l} differ"));
            }
            let sp = sol.premem_at(node).cloned().unwrap_or_default();
            let op = orc.premem_at.get(&l).cloned().unwrap_or_default();
            for (&b, cells) in &sp {
                let oc = op.get(&b).map(|st| st.cells.clone()).unwrap_or_default();
                if *cells != oc {
                    return Some(format!(
                        "memory into call {l} differs for {}",
                        store.name(prog, b)
                    ));
                }
            }
        }
        // Memory out-state wherever the solver versions cells.
        if let Some(chi) = annots.chi_of(l) {
            let smem = sol.mem_at(node);
            let omem = orc.mem_at.get(&l);
            for &b in chi.keys() {
                let sc = smem.get(&b).cloned().unwrap_or_default();
                let oc = omem
                    .and_then(|m| m.get(&b))
                    .map(|st| st.cells.clone())
                    .unwrap_or_default();
                if sc != oc {
                    return Some(format!(
                        "memory after {l} differs for {}: solver {:?}, oracle {:?}",
                        store.name(prog, b),
                        cell_names(prog, store, &sc),
                        cell_names(prog, store, &oc)
                    ));
                }
            }
        }
    }
    // Entry type sets.
    for func in &prog.functions {
        let id = vfg.get(crate::memssa::VNode::Entry(func.id));
        let st = id.map(|n| sol.types_at(n).clone()).unwrap_or_default();
        let ot = orc.types_at(OPoint::Entry(func.id));
        if st != ot {
            return Some(format!("pt_t at @{} entry differs", func.name));
        }
    }
    None
}

fn names(prog: &IRProgram, store: &ObjectStore, s: &ObjSet) -> Vec<String> {
    s.iter().map(|&o| store.name(prog, o)).collect()
}

fn cell_names(
    prog: &IRProgram,
    store: &ObjectStore,
    cells: &CellMap,
) -> BTreeMap<String, Vec<String>> {
    cells
        .iter()
        .map(|(&c, v)| (store.name(prog, c), names(prog, store, v)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse::parse_program;
    use crate::layout::compute_layouts;
    use crate::memssa;
    use crate::solver::{solve, Mode, SolveOptions};

    fn check_agreement(src: &str, mode: Mode) {
        let prog = parse_program(src).expect("fixture parses");
        let layouts = compute_layouts(&prog).expect("layouts");
        let mut store = ObjectStore::seeded(&prog);
        let pre = crate::andersen::analyze(&prog, &mut store);
        let mr = memssa::mod_ref(&prog, &store, &pre);
        let annots = memssa::place_versions(&prog, &store, &pre, &mr);
        let vfg = memssa::build_vfg(&prog, &pre, &annots);
        let sing = crate::singletons::classify(&prog, &store, &pre);
        let opts = SolveOptions { mode, ..SolveOptions::default() };
        let sol =
            solve(&prog, &layouts, &mut store, &pre, &mr, &annots, &vfg, &sing, &opts).unwrap();
        let orc = dense_solve(&prog, &layouts, &mut store, &pre, &sing, mode, 10_000).unwrap();
        if let Some(d) = first_divergence(&prog, &store, &annots, &vfg, &sol, &orc) {
            panic!("divergence: {d}");
        }
    }

    #[test]
    fn straight_line_allocation_and_copies_agree() {
        check_agreement(
            "func @main() {\nbb0:\n  %a = alloca i64, 8\n  %b = %a\n  %m = malloc 8\n  store %b, %m\n  %r = load %a\n  ret\n}\n",
            Mode::MtoSs,
        );
    }

    #[test]
    fn oracle_sees_strong_update_kill() {
        let src = "\
func @main() {
bb0:
  %a = alloca i64, 8
  %x = malloc 8
  %y = malloc 8
  store %a, %x
  store %a, %y
  %r = load %a
  ret
}
";
        check_agreement(src, Mode::MtoSs);
        let prog = parse_program(src).unwrap();
        let layouts = compute_layouts(&prog).unwrap();
        let mut store = ObjectStore::seeded(&prog);
        let pre = crate::andersen::analyze(&prog, &mut store);
        let sing = crate::singletons::classify(&prog, &store, &pre);
        let orc =
            dense_solve(&prog, &layouts, &mut store, &pre, &sing, Mode::MtoSs, 10_000).unwrap();
        let r = (0..prog.vars.len())
            .map(|i| VarId(i as u32))
            .find(|&v| prog.var_name(v) == "main::%r")
            .unwrap();
        let got: Vec<String> = orc.pt(r).iter().map(|&o| store.name(&prog, o)).collect();
        assert_eq!(got, ["o@l2"], "only the second store survives");
    }

    #[test]
    fn casts_fields_and_filtering_agree() {
        let src = "\
type S1 = [4 x i8]
type T1 = struct { s1: S1, x: i64 }
type T2 = struct { st: S1, b: i64 }
func @main() {
bb0:
  %m = malloc 16
  %p = cast T1*, %m
  %q = cast T2*, %p
  %f = field %q, b
  %s = field %p, s1
  ret
}
";
        check_agreement(src, Mode::MtoSs);
        check_agreement(src, Mode::Sparse);
    }

    #[test]
    fn interprocedural_stores_agree() {
        let src = "\
func @foo(%p2, %q2) {
bb0:
  %y = malloc 8
  store %q2, %y
  %t = load %q2
  store %p2, %t
  ret
}
func @main() {
bb0:
  %p = alloca i64, 8
  %q = alloca i64, 8
  call @foo(%p, %q)
  %r = load %p
  ret
}
";
        check_agreement(src, Mode::MtoSs);
    }

    #[test]
    fn branches_and_loops_agree() {
        let src = "\
func @main() {
bb0:
  %a = alloca i64, 8
  %x = malloc 8
  store %a, %x
  br %a, bb1, bb2
bb1:
  %y = malloc 8
  store %a, %y
  jmp bb2
bb2:
  %r = load %a
  br %r, bb1, bb3
bb3:
  ret
}
";
        check_agreement(src, Mode::MtoSs);
    }

    #[test]
    fn virtual_dispatch_and_dyncast_agree() {
        let src = "\
type B = class() virtual { }
type L = class(B) virtual { }
type R = class(B) virtual { }
type D = class(L, R) { }
func @lf(%self) {
bb0:
  ret
}
func @main() {
bb0:
  %m = malloc 16
  constructor D, %m
  store %m, @lf
  %fp = load %m
  call %fp(%m)
  %ri = dyncast R*, %m
  ret
}
";
        check_agreement(src, Mode::MtoSs);
    }

    fn check_generated(cfg: &crate::gen::GenConfig) {
        let src = crate::gen::generate_source(cfg);
        for mode in [Mode::MtoSs, Mode::Sparse] {
            let prog = parse_program(&src).unwrap();
            let layouts = compute_layouts(&prog).unwrap();
            let mut store = ObjectStore::seeded(&prog);
            let pre = crate::andersen::analyze(&prog, &mut store);
            let mr = memssa::mod_ref(&prog, &store, &pre);
            let annots = memssa::place_versions(&prog, &store, &pre, &mr);
            let vfg = memssa::build_vfg(&prog, &pre, &annots);
            let sing = crate::singletons::classify(&prog, &store, &pre);
            let opts = SolveOptions { mode, ..SolveOptions::default() };
            let sol =
                solve(&prog, &layouts, &mut store, &pre, &mr, &annots, &vfg, &sing, &opts)
                    .unwrap();
            let orc =
                dense_solve(&prog, &layouts, &mut store, &pre, &sing, mode, 10_000).unwrap();
            if let Some(d) = first_divergence(&prog, &store, &annots, &vfg, &sol, &orc) {
                panic!("seed {} mode {mode}: {d}\n{src}", cfg.seed);
            }
        }
    }

    #[test]
    fn generated_corpus_agrees_in_both_modes() {
        for seed in 0..40 {
            check_generated(&crate::gen::GenConfig { seed, ..crate::gen::GenConfig::default() });
        }
    }

    #[test]
    fn generated_corpus_with_loops_agrees() {
        for seed in 0..20 {
            check_generated(&crate::gen::GenConfig {
                seed,
                allow_loops: true,
                max_instructions: 50,
                p_store: 0.45,
                ..crate::gen::GenConfig::default()
            });
        }
    }

    #[test]
    fn summary_writes_agree() {
        let src = "\
func @main() {
bb0:
  %m = malloc 64
  %e = array %m, %m
  %x = malloc 8
  store %e, %x
  %r = load %m
  ret
}
";
        check_agreement(src, Mode::MtoSs);
        check_agreement(src, Mode::Sparse);
    }
}
