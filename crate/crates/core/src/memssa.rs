//! Memory versioning over base objects.
//!
//! Address-taken memory is not in SSA form, so the flow-sensitive solver
//! needs its own def-use structure for it. Using the pre-analysis
//! points-to sets, every load gets a read annotation (µ) and every store
//! a read/redefine annotation (χ) for each base object it may touch;
//! calls get µ/χ for everything their callees may transitively read or
//! write, callee entries receive versions from their callers, and
//! returns read back what the function may have written. Version-merge
//! points (memory φs) are placed at iterated dominance frontiers and
//! versions are assigned by a dominator-tree walk, one counter per
//! (function, base). Version 0 is always "nothing known yet"; a
//! function's entry receives version 1 of everything it may access.
//!
//! On top of the annotations sits the value-flow graph the solver
//! iterates: one node per instruction, per function entry and per
//! memory φ, with scheduling edges from definitions (of variables and of
//! memory versions) to their uses. Inter-procedural edges are gated by a
//! (call site, callee) pair and only conduct once the solver has
//! resolved that callee at that site.

use crate::andersen::AndersenResult;
use crate::ir::cfg::{build_cfg, dominance_frontiers, dominator_tree, Cfg, DomTree};
use crate::ir::validate::var_uses;
use crate::ir::{BlockId, DefSite, FnId, IRProgram, InstrKind, Label};
use crate::objects::{ObjId, ObjectStore};
use std::collections::{BTreeMap, BTreeSet, HashMap};

// ---------------------------------------------------------------------------
// Mod/ref summaries
// ---------------------------------------------------------------------------

/// Transitive read/write summaries per function, plus the pre-analysis
/// call-graph they were computed from.
#[derive(Debug, Clone, Default)]
pub struct ModRef {
    /// Bases any load in the function or its callees may read.
    pub refs: BTreeMap<FnId, BTreeSet<ObjId>>,
    /// Bases any store in the function or its callees may write.
    pub defs: BTreeMap<FnId, BTreeSet<ObjId>>,
    pub callees: BTreeMap<FnId, BTreeSet<FnId>>,
}

impl ModRef {
    pub fn refs_of(&self, f: FnId) -> &BTreeSet<ObjId> {
        static EMPTY: BTreeSet<ObjId> = BTreeSet::new();
        self.refs.get(&f).unwrap_or(&EMPTY)
    }

    pub fn defs_of(&self, f: FnId) -> &BTreeSet<ObjId> {
        static EMPTY: BTreeSet<ObjId> = BTreeSet::new();
        self.defs.get(&f).unwrap_or(&EMPTY)
    }

    /// Everything the function may touch: entry-received set.
    pub fn accessed(&self, f: FnId) -> BTreeSet<ObjId> {
        let mut s = self.refs_of(f).clone();
        s.extend(self.defs_of(f).iter().copied());
        s
    }
}

pub fn mod_ref(prog: &IRProgram, store: &ObjectStore, pre: &AndersenResult) -> ModRef {
    let mut mr = ModRef::default();
    for f in &prog.functions {
        let refs = mr.refs.entry(f.id).or_default();
        let defs = mr.defs.entry(f.id).or_default();
        let callees = mr.callees.entry(f.id).or_default();
        for b in &f.blocks {
            for instr in &b.instrs {
                match &instr.kind {
                    InstrKind::Load { addr } => {
                        if let Some(pts) = pre.var(*addr) {
                            refs.extend(pts.iter().map(|o| store.root(*o)));
                        }
                    }
                    InstrKind::Store { addr, .. } => {
                        if let Some(pts) = pre.var(*addr) {
                            defs.extend(pts.iter().map(|o| store.root(*o)));
                        }
                    }
                    InstrKind::Call { .. } => {
                        if let Some(ts) = pre.targets(instr.label) {
                            callees.extend(ts.iter().copied());
                        }
                    }
                    _ => {}
                }
            }
        }
    }
    // Close refs/defs over the call graph.
    loop {
        let mut changed = false;
        for f in &prog.functions {
            let callees = mr.callees[&f.id].clone();
            for g in callees {
                let gr = mr.refs[&g].clone();
                let gd = mr.defs[&g].clone();
                let refs = mr.refs.get_mut(&f.id).unwrap();
                let before = refs.len();
                refs.extend(gr);
                changed |= refs.len() != before;
                let defs = mr.defs.get_mut(&f.id).unwrap();
                let before = defs.len();
                defs.extend(gd);
                changed |= defs.len() != before;
            }
        }
        if !changed {
            break;
        }
    }
    mr
}

// ---------------------------------------------------------------------------
// µ/χ annotations and version renaming
// ---------------------------------------------------------------------------

pub type Ver = u32;

/// Where one memory version of one (function, base) pair is defined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerSite {
    /// Version 0: nothing has reached this function yet.
    Initial,
    /// Received from callers when the function is entered.
    EntryChi,
    /// Rewritten by the instruction (store or call).
    Chi(Label),
    /// Merged at the head of the block.
    Phi(BlockId),
}

#[derive(Debug, Clone, Default)]
pub struct MemPhi {
    pub out: Ver,
    pub arms: BTreeMap<BlockId, Ver>,
}

#[derive(Debug, Clone)]
pub struct FnMem {
    pub cfg: Cfg,
    pub dom: DomTree,
    /// Bases received at entry; versions are always (0, 1).
    pub entry_chi: BTreeMap<ObjId, (Ver, Ver)>,
    pub phis: BTreeMap<(BlockId, ObjId), MemPhi>,
    /// Version index -> defining site, per base.
    pub vers: BTreeMap<ObjId, Vec<VerSite>>,
}

#[derive(Debug, Clone, Default)]
pub struct Annots {
    pub fns: BTreeMap<FnId, FnMem>,
    /// Reads: version of each base consumed by the instruction.
    pub mu: BTreeMap<Label, BTreeMap<ObjId, Ver>>,
    /// Read/redefine: (incoming, outgoing) version per base.
    pub chi: BTreeMap<Label, BTreeMap<ObjId, (Ver, Ver)>>,
}

impl Annots {
    pub fn fn_mem(&self, f: FnId) -> &FnMem {
        &self.fns[&f]
    }

    pub fn mu_of(&self, l: Label) -> Option<&BTreeMap<ObjId, Ver>> {
        self.mu.get(&l)
    }

    pub fn chi_of(&self, l: Label) -> Option<&BTreeMap<ObjId, (Ver, Ver)>> {
        self.chi.get(&l)
    }
}

/// µ/χ base sets of one instruction, before versions are assigned.
fn access_sets(
    store: &ObjectStore,
    pre: &AndersenResult,
    mr: &ModRef,
    owner: FnId,
    kind: &InstrKind,
    label: Label,
) -> (BTreeSet<ObjId>, BTreeSet<ObjId>) {
    let mut mu = BTreeSet::new();
    let mut chi = BTreeSet::new();
    match kind {
        InstrKind::Load { addr } => {
            if let Some(pts) = pre.var(*addr) {
                mu.extend(pts.iter().map(|o| store.root(*o)));
            }
        }
        InstrKind::Store { addr, .. } => {
            if let Some(pts) = pre.var(*addr) {
                chi.extend(pts.iter().map(|o| store.root(*o)));
            }
        }
        InstrKind::Call { .. } => {
            if let Some(ts) = pre.targets(label) {
                for g in ts {
                    mu.extend(mr.accessed(*g));
                    chi.extend(mr.defs_of(*g).iter().copied());
                }
            }
        }
        InstrKind::Ret { .. } => {
            mu.extend(mr.defs_of(owner).iter().copied());
        }
        _ => {}
    }
    (mu, chi)
}

pub fn place_versions(
    prog: &IRProgram,
    store: &ObjectStore,
    pre: &AndersenResult,
    mr: &ModRef,
) -> Annots {
    let mut out = Annots::default();

    for f in &prog.functions {
        let cfg = build_cfg(f);
        let dom = dominator_tree(&cfg);
        let frontiers = dominance_frontiers(&cfg, &dom);
        let accessed = mr.accessed(f.id);

        // Raw µ/χ base sets per instruction.
        let mut mu_bases: BTreeMap<Label, BTreeSet<ObjId>> = BTreeMap::new();
        let mut chi_bases: BTreeMap<Label, BTreeSet<ObjId>> = BTreeMap::new();
        for b in &f.blocks {
            for instr in &b.instrs {
                let (mu, chi) =
                    access_sets(store, pre, mr, f.id, &instr.kind, instr.label);
                if !mu.is_empty() {
                    mu_bases.insert(instr.label, mu);
                }
                if !chi.is_empty() {
                    chi_bases.insert(instr.label, chi);
                }
            }
        }

        // Memory φs at iterated dominance frontiers of definition blocks.
        let mut phis: BTreeMap<(BlockId, ObjId), MemPhi> = BTreeMap::new();
        for &o in &accessed {
            let mut def_blocks: BTreeSet<BlockId> = BTreeSet::from([BlockId(0)]);
            for (l, bases) in &chi_bases {
                if bases.contains(&o) {
                    def_blocks.insert(prog.instr_loc(*l).block);
                }
            }
            let mut work: Vec<BlockId> = def_blocks.iter().copied().collect();
            let mut phi_blocks: BTreeSet<BlockId> = BTreeSet::new();
            while let Some(b) = work.pop() {
                for d in &frontiers[b.0 as usize] {
                    if phi_blocks.insert(*d) {
                        work.push(*d);
                    }
                }
            }
            for b in phi_blocks {
                phis.insert((b, o), MemPhi::default());
            }
        }

        // Rename: one version counter per base, dominator-tree preorder.
        let mut fm = FnMem {
            cfg,
            dom,
            entry_chi: BTreeMap::new(),
            phis,
            vers: accessed.iter().map(|o| (*o, vec![VerSite::Initial])).collect(),
        };
        let mut stacks: BTreeMap<ObjId, Vec<Ver>> = BTreeMap::new();
        for &o in &accessed {
            fm.entry_chi.insert(o, (0, 1));
            fm.vers.get_mut(&o).unwrap().push(VerSite::EntryChi);
            stacks.insert(o, vec![1]);
        }
        rename_block(
            BlockId(0),
            f.id,
            prog,
            &mut fm,
            &mu_bases,
            &chi_bases,
            &mut stacks,
            &mut out,
        );
        out.fns.insert(f.id, fm);
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn rename_block(
    b: BlockId,
    f: FnId,
    prog: &IRProgram,
    fm: &mut FnMem,
    mu_bases: &BTreeMap<Label, BTreeSet<ObjId>>,
    chi_bases: &BTreeMap<Label, BTreeSet<ObjId>>,
    stacks: &mut BTreeMap<ObjId, Vec<Ver>>,
    out: &mut Annots,
) {
    let mut pushed: Vec<ObjId> = Vec::new();
    let cur = |stacks: &BTreeMap<ObjId, Vec<Ver>>, o: ObjId| -> Ver {
        stacks.get(&o).and_then(|s| s.last().copied()).unwrap_or(0)
    };
    let phi_bases: Vec<ObjId> =
        fm.phis.range((b, ObjId(0))..).take_while(|((pb, _), _)| *pb == b).map(|((_, o), _)| *o).collect();
    for o in phi_bases {
        let vers = fm.vers.get_mut(&o).unwrap();
        let v = vers.len() as Ver;
        vers.push(VerSite::Phi(b));
        fm.phis.get_mut(&(b, o)).unwrap().out = v;
        stacks.entry(o).or_default().push(v);
        pushed.push(o);
    }
    for instr in &prog.function(f).blocks[b.0 as usize].instrs {
        if let Some(mus) = mu_bases.get(&instr.label) {
            let entry = out.mu.entry(instr.label).or_default();
            for &o in mus {
                entry.insert(o, cur(stacks, o));
            }
        }
        if let Some(chis) = chi_bases.get(&instr.label) {
            let entry = out.chi.entry(instr.label).or_default();
            for &o in chis {
                let inv = cur(stacks, o);
                let vers = fm.vers.get_mut(&o).unwrap();
                let v = vers.len() as Ver;
                vers.push(VerSite::Chi(instr.label));
                entry.insert(o, (inv, v));
                stacks.entry(o).or_default().push(v);
                pushed.push(o);
            }
        }
    }
    let succs = fm.cfg.succs[b.0 as usize].clone();
    for s in succs {
        let arm_bases: Vec<ObjId> =
            fm.phis.range((s, ObjId(0))..).take_while(|((pb, _), _)| *pb == s).map(|((_, o), _)| *o).collect();
        for o in arm_bases {
            let v = cur(stacks, o);
            fm.phis.get_mut(&(s, o)).unwrap().arms.insert(b, v);
        }
    }
    let children = fm.dom.children[b.0 as usize].clone();
    for c in children {
        rename_block(c, f, prog, fm, mu_bases, chi_bases, stacks, out);
    }
    for o in pushed {
        stacks.get_mut(&o).unwrap().pop();
    }
}

// ---------------------------------------------------------------------------
// Value-flow graph
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VNode {
    Instr(Label),
    Entry(FnId),
    MemPhi(FnId, BlockId, ObjId),
}

#[derive(Debug, Clone)]
pub struct Vfg {
    pub nodes: Vec<VNode>,
    ids: HashMap<VNode, usize>,
    /// Unconditional scheduling edges (definition -> use).
    succs: Vec<Vec<usize>>,
    /// Edges that conduct only once the solver resolves the callee at
    /// the call site, keyed off their source node.
    gated_succs: Vec<Vec<(usize, (Label, FnId))>>,
    /// Targets to reschedule when a gate first opens.
    by_gate: HashMap<(Label, FnId), Vec<usize>>,
}

impl Vfg {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn id(&self, n: VNode) -> usize {
        self.ids[&n]
    }

    pub fn get(&self, n: VNode) -> Option<usize> {
        self.ids.get(&n).copied()
    }

    pub fn node(&self, id: usize) -> VNode {
        self.nodes[id]
    }

    pub fn succs_of(&self, id: usize) -> &[usize] {
        &self.succs[id]
    }

    pub fn gated_succs_of(&self, id: usize) -> &[(usize, (Label, FnId))] {
        &self.gated_succs[id]
    }

    pub fn gate_targets(&self, gate: (Label, FnId)) -> &[usize] {
        static EMPTY: Vec<usize> = Vec::new();
        self.by_gate.get(&gate).map(|v| v.as_slice()).unwrap_or(&EMPTY)
    }

    fn add_edge(&mut self, from: VNode, to: VNode) {
        let (f, t) = (self.id(from), self.id(to));
        if !self.succs[f].contains(&t) {
            self.succs[f].push(t);
        }
    }

    fn add_gated(&mut self, from: VNode, to: VNode, gate: (Label, FnId)) {
        let (f, t) = (self.id(from), self.id(to));
        if !self.gated_succs[f].contains(&(t, gate)) {
            self.gated_succs[f].push((t, gate));
            self.by_gate.entry(gate).or_default().push(t);
        }
    }

    /// Node defining the given memory version, if any does.
    pub fn ver_def(&self, f: FnId, o: ObjId, site: VerSite) -> Option<VNode> {
        match site {
            VerSite::Initial => None,
            VerSite::EntryChi => Some(VNode::Entry(f)),
            VerSite::Chi(l) => Some(VNode::Instr(l)),
            VerSite::Phi(b) => Some(VNode::MemPhi(f, b, o)),
        }
    }
}

pub fn build_vfg(prog: &IRProgram, pre: &AndersenResult, annots: &Annots) -> Vfg {
    let n_instrs = prog.n_labels();
    let mut nodes: Vec<VNode> = (0..n_instrs).map(|i| VNode::Instr(Label(i as u32))).collect();
    for f in &prog.functions {
        nodes.push(VNode::Entry(f.id));
    }
    for (fid, fm) in &annots.fns {
        for (b, o) in fm.phis.keys() {
            nodes.push(VNode::MemPhi(*fid, *b, *o));
        }
    }
    let ids: HashMap<VNode, usize> = nodes.iter().enumerate().map(|(i, n)| (*n, i)).collect();
    let n = nodes.len();
    let mut vfg = Vfg {
        nodes,
        ids,
        succs: vec![Vec::new(); n],
        gated_succs: vec![Vec::new(); n],
        by_gate: HashMap::new(),
    };

    // Variable definition -> use.
    for (owner, instr) in prog.all_instrs() {
        for (v, _) in var_uses(&instr.kind) {
            let def = match prog.var(v).def {
                DefSite::Instr(l) => VNode::Instr(l),
                DefSite::Param(f, _) => VNode::Entry(f),
            };
            vfg.add_edge(def, VNode::Instr(instr.label));
        }
        let _ = owner;
    }

    // Memory version definition -> use (µ reads, χ incoming reads).
    let user_of = |vfg: &mut Vfg, f: FnId, o: ObjId, ver: Ver, user: VNode| {
        let site = annots.fns[&f].vers[&o][ver as usize];
        if let Some(def) = vfg.ver_def(f, o, site) {
            vfg.add_edge(def, user);
        }
    };
    for (l, mus) in &annots.mu {
        let f = prog.instr_loc(*l).func.expect("annotated instructions live in functions");
        for (o, ver) in mus {
            user_of(&mut vfg, f, *o, *ver, VNode::Instr(*l));
        }
    }
    for (l, chis) in &annots.chi {
        let f = prog.instr_loc(*l).func.expect("annotated instructions live in functions");
        for (o, (inv, _)) in chis {
            user_of(&mut vfg, f, *o, *inv, VNode::Instr(*l));
        }
    }
    for (f, fm) in &annots.fns {
        for ((b, o), phi) in &fm.phis {
            for ver in phi.arms.values() {
                user_of(&mut vfg, *f, *o, *ver, VNode::MemPhi(*f, *b, *o));
            }
        }
    }

    // Call-gated inter-procedural edges, bounded by the pre-analysis.
    for (owner, instr) in prog.all_instrs() {
        let InstrKind::Call { .. } = instr.kind else { continue };
        let Some(targets) = pre.targets(instr.label) else { continue };
        let _ = owner;
        for &g in targets {
            let gate = (instr.label, g);
            vfg.add_gated(VNode::Instr(instr.label), VNode::Entry(g), gate);
            for b in &prog.function(g).blocks {
                for gi in &b.instrs {
                    if matches!(gi.kind, InstrKind::Ret { .. }) {
                        vfg.add_gated(VNode::Instr(gi.label), VNode::Instr(instr.label), gate);
                    }
                }
            }
        }
    }
    vfg
}

/// Graphviz rendering of the value-flow graph.
pub fn vfg_dot(prog: &IRProgram, vfg: &Vfg, store: &ObjectStore) -> String {
    use std::fmt::Write;
    let mut s = String::from("digraph vfg {\n  node [shape=box, fontname=\"monospace\"];\n");
    let name = |n: VNode| -> String {
        match n {
            VNode::Instr(l) => {
                let i = prog.instr(l);
                let f = prog.instr_loc(l).func.map(|f| prog.function(f));
                format!("{l}: {}", crate::ir::pretty::instr_text(prog, f, i))
            }
            VNode::Entry(f) => format!("entry @{}", prog.function(f).name),
            VNode::MemPhi(f, b, o) => format!(
                "memphi {} {} {}",
                prog.function(f).name,
                prog.function(f).blocks[b.0 as usize].name,
                store.name(prog, o)
            ),
        }
    };
    for (i, n) in vfg.nodes.iter().enumerate() {
        let _ = writeln!(s, "  n{} [label=\"{}\"];", i, name(*n).replace('"', "'"));
    }
    for (i, succs) in vfg.succs.iter().enumerate() {
        for t in succs {
            let _ = writeln!(s, "  n{i} -> n{t};");
        }
    }
    for (i, gs) in vfg.gated_succs.iter().enumerate() {
        for (t, (l, f)) in gs {
            let _ = writeln!(
                s,
                "  n{i} -> n{t} [style=dashed, label=\"{l}->@{}\"];",
                prog.function(*f).name
            );
        }
    }
    s.push_str("}\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::andersen;
    use crate::ir::parse::parse_program;

    fn setup(src: &str) -> (IRProgram, ObjectStore, AndersenResult, ModRef, Annots) {
        let prog = parse_program(src).expect("fixture parses");
        let mut store = ObjectStore::seeded(&prog);
        let pre = andersen::analyze(&prog, &mut store);
        let mr = mod_ref(&prog, &store, &pre);
        let annots = place_versions(&prog, &store, &pre, &mr);
        (prog, store, pre, mr, annots)
    }

    fn label_of(prog: &IRProgram, pred: impl Fn(&InstrKind) -> bool) -> Label {
        prog.all_instrs().find(|(_, i)| pred(&i.kind)).map(|(_, i)| i.label).unwrap()
    }

    #[test]
    fn callee_store_versions_flow_through_the_call() {
        let src = "\
func @foo(%q) {
bb0:
  %h = malloc 8
  store %q, %h
  ret
}
func @main() {
bb0:
  %p = alloca ptr, 8
  call @foo(%p)
  %r = load %p
  ret
}
";
        let (prog, store, _pre, mr, annots) = setup(src);
        let foo = prog.fn_by_name("foo").unwrap();
        let main = prog.fn_by_name("main").unwrap();
        let o_p = {
            let alloca = label_of(&prog, |k| matches!(k, InstrKind::Alloca { .. }));
            let mut st = store.clone();
            st.base(alloca)
        };
        assert_eq!(mr.defs_of(foo), &BTreeSet::from([o_p]));
        assert_eq!(mr.defs_of(main), &BTreeSet::from([o_p]));
        assert!(mr.refs_of(main).contains(&o_p));

        // foo: entry (0,1), store χ (1,2), ret µ 2.
        assert_eq!(annots.fns[&foo].entry_chi[&o_p], (0, 1));
        let st_l = label_of(&prog, |k| matches!(k, InstrKind::Store { .. }));
        assert_eq!(annots.chi[&st_l][&o_p], (1, 2));
        let ret_foo = prog.function(foo).blocks[0].instrs.last().unwrap().label;
        assert_eq!(annots.mu[&ret_foo][&o_p], 2);

        // main: entry (0,1), call µ 1 and χ (1,2), load µ 2.
        assert_eq!(annots.fns[&main].entry_chi[&o_p], (0, 1));
        let call_l = label_of(&prog, |k| matches!(k, InstrKind::Call { .. }));
        assert_eq!(annots.mu[&call_l][&o_p], 1);
        assert_eq!(annots.chi[&call_l][&o_p], (1, 2));
        let load_l = label_of(&prog, |k| matches!(k, InstrKind::Load { .. }));
        assert_eq!(annots.mu[&load_l][&o_p], 2);
    }

    #[test]
    fn diamond_places_a_memory_phi_at_the_join() {
        let src = "\
func @main() {
bb0:
  %slot = alloca ptr, 8
  %a = alloca i64, 8
  %b = alloca i64, 8
  %c = alloca i8, 1
  br %c, bbl, bbr
bbl:
  store %slot, %a
  jmp bbj
bbr:
  store %slot, %b
  jmp bbj
bbj:
  %r = load %slot
  ret
}
";
        let (prog, store, _pre, _mr, annots) = setup(src);
        let main = prog.fn_by_name("main").unwrap();
        let slot_l = label_of(&prog, |k| matches!(k, InstrKind::Alloca { .. }));
        let o_slot = store.clone().base(slot_l);
        let fm = &annots.fns[&main];
        let join = BlockId(3);
        let phi = &fm.phis[&(join, o_slot)];
        // Versions: entry 1, then one χ per branch (walk order), φ = 4.
        assert_eq!(phi.out, 4);
        assert_eq!(
            phi.arms.keys().copied().collect::<Vec<_>>(),
            vec![BlockId(1), BlockId(2)]
        );
        let load_l = label_of(&prog, |k| matches!(k, InstrKind::Load { .. }));
        assert_eq!(annots.mu[&load_l][&o_slot], 4);
    }

    #[test]
    fn loop_header_gets_a_phi_for_loop_stores() {
        let src = "\
func @main() {
bb0:
  %slot = alloca ptr, 8
  %a = alloca i64, 8
  %c = alloca i8, 1
  jmp bbh
bbh:
  %r = load %slot
  br %c, bbb, bbx
bbb:
  store %slot, %a
  jmp bbh
bbx:
  ret
}
";
        let (prog, store, _pre, _mr, annots) = setup(src);
        let main = prog.fn_by_name("main").unwrap();
        let slot_l = label_of(&prog, |k| matches!(k, InstrKind::Alloca { .. }));
        let o_slot = store.clone().base(slot_l);
        let fm = &annots.fns[&main];
        assert!(fm.phis.contains_key(&(BlockId(1), o_slot)));
        let load_l = label_of(&prog, |k| matches!(k, InstrKind::Load { .. }));
        // The load reads the header φ, not the entry version.
        assert_eq!(annots.mu[&load_l][&o_slot], fm.phis[&(BlockId(1), o_slot)].out);
    }

    #[test]
    fn recursion_reaches_a_mod_ref_fixpoint() {
        let src = "\
func @even(%p, %n) {
bb0:
  %r = call @odd(%p, %n)
  ret %r
}
func @odd(%p, %n) {
bb0:
  store %p, %n
  %r = call @even(%p, %n)
  ret %r
}
func @main() {
bb0:
  %s = alloca ptr, 8
  %x = alloca i64, 8
  %r = call @even(%s, %x)
  ret
}
";
        let (prog, store, _pre, mr, _annots) = setup(src);
        let even = prog.fn_by_name("even").unwrap();
        let odd = prog.fn_by_name("odd").unwrap();
        let s_l = label_of(&prog, |k| matches!(k, InstrKind::Alloca { .. }));
        let o_s = store.clone().base(s_l);
        assert!(mr.defs_of(even).contains(&o_s));
        assert!(mr.defs_of(odd).contains(&o_s));
    }

    #[test]
    fn vfg_edges_connect_defs_to_uses() {
        let src = "\
func @main() {
bb0:
  %p = alloca ptr, 8
  %a = alloca i64, 8
  store %p, %a
  %r = load %p
  ret
}
";
        let (prog, store, pre, _mr, annots) = setup(src);
        let vfg = build_vfg(&prog, &pre, &annots);
        let st_l = label_of(&prog, |k| matches!(k, InstrKind::Store { .. }));
        let ld_l = label_of(&prog, |k| matches!(k, InstrKind::Load { .. }));
        // The store's χ version feeds the load's µ.
        let st_n = vfg.id(VNode::Instr(st_l));
        let ld_n = vfg.id(VNode::Instr(ld_l));
        assert!(vfg.succs_of(st_n).contains(&ld_n));
        let dot = vfg_dot(&prog, &vfg, &store);
        assert!(dot.contains("digraph"));
        assert!(dot.contains("load"));
    }

    #[test]
    fn call_edges_are_gated_by_resolution() {
        let src = "\
func @id(%x) {
bb0:
  ret %x
}
func @main() {
bb0:
  %a = alloca i64, 8
  %fp = @id
  %r = call %fp(%a)
  ret
}
";
        let (prog, _store, pre, _mr, annots) = setup(src);
        let vfg = build_vfg(&prog, &pre, &annots);
        let id_fn = prog.fn_by_name("id").unwrap();
        let call_l = label_of(&prog, |k| matches!(k, InstrKind::Call { .. }));
        let gate = (call_l, id_fn);
        let call_n = vfg.id(VNode::Instr(call_l));
        assert!(vfg
            .gated_succs_of(call_n)
            .iter()
            .any(|(t, g)| *g == gate && vfg.node(*t) == VNode::Entry(id_fn)));
        // Opening the gate reschedules both the callee entry and the call.
        let targets = vfg.gate_targets(gate);
        assert!(targets.iter().any(|t| vfg.node(*t) == VNode::Entry(id_fn)));
        assert!(targets.contains(&call_n));
    }
}
