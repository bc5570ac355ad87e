//! Inclusion-based, flow- and field-insensitive points-to pre-analysis.
//!
//! This is the fast envelope run before the flow-sensitive engines: it
//! collapses every interior offset to its base object and treats field,
//! index and checked-cast instructions as plain copies. Its results
//! drive memory-version placement, mod/ref summaries and the resolved
//! call-graph bound, and define the default alias-query scope.

use crate::ir::{Callee, FnId, IRProgram, InstrKind, Label, Operand, VarId};
use crate::objects::{ObjId, ObjSet, ObjectStore};
use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum PNode {
    Var(VarId),
    /// Field-insensitive contents of a base object.
    Obj(ObjId),
    /// Join of every `ret` operand of the function.
    FnRet(FnId),
    /// A literal function reference appearing as an operand.
    FnConst(FnId),
}

#[derive(Debug, Clone, Default)]
pub struct AndersenResult {
    pts_var: HashMap<VarId, ObjSet>,
    pts_obj: HashMap<ObjId, ObjSet>,
    /// Possible targets of every call instruction.
    pub call_targets: BTreeMap<Label, BTreeSet<FnId>>,
}

impl AndersenResult {
    pub fn var(&self, v: VarId) -> Option<&ObjSet> {
        self.pts_var.get(&v)
    }

    pub fn obj(&self, o: ObjId) -> Option<&ObjSet> {
        self.pts_obj.get(&o)
    }

    pub fn targets(&self, call: Label) -> Option<&BTreeSet<FnId>> {
        self.call_targets.get(&call)
    }

    /// Variables with a non-empty points-to set, in id order.
    pub fn pointer_vars(&self) -> Vec<VarId> {
        let mut v: Vec<VarId> =
            self.pts_var.iter().filter(|(_, s)| !s.is_empty()).map(|(v, _)| *v).collect();
        v.sort();
        v
    }
}

struct CallSite {
    label: Label,
    args: Vec<Operand>,
    result: Option<VarId>,
}

struct Solver<'a> {
    store: &'a mut ObjectStore,
    ids: HashMap<PNode, usize>,
    nodes: Vec<PNode>,
    pts: Vec<ObjSet>,
    succs: Vec<BTreeSet<usize>>,
    /// `r = load p` registered on p: propagate contents of pointees.
    load_sinks: Vec<Vec<usize>>,
    /// `store p, v` registered on p: propagate v into pointees.
    store_sources: Vec<Vec<usize>>,
    /// Indirect call sites watching this callee node.
    call_watch: Vec<Vec<usize>>,
    calls: Vec<CallSite>,
    linked: BTreeSet<(usize, FnId)>,
    call_targets: BTreeMap<Label, BTreeSet<FnId>>,
    worklist: VecDeque<usize>,
    queued: Vec<bool>,
}

impl<'a> Solver<'a> {
    fn node(&mut self, p: PNode) -> usize {
        if let Some(i) = self.ids.get(&p) {
            return *i;
        }
        let i = self.nodes.len();
        self.nodes.push(p);
        self.ids.insert(p, i);
        self.pts.push(ObjSet::new());
        self.succs.push(BTreeSet::new());
        self.load_sinks.push(Vec::new());
        self.store_sources.push(Vec::new());
        self.call_watch.push(Vec::new());
        self.queued.push(false);
        if let PNode::FnConst(f) = p {
            let o = self.store.func(f);
            self.pts[i].insert(o);
            self.push(i);
        }
        i
    }

    fn push(&mut self, n: usize) {
        if !self.queued[n] {
            self.queued[n] = true;
            self.worklist.push_back(n);
        }
    }

    fn seed(&mut self, n: usize, o: ObjId) {
        if self.pts[n].insert(o) {
            self.push(n);
        }
    }

    fn edge(&mut self, from: usize, to: usize) {
        if from != to && self.succs[from].insert(to) && !self.pts[from].is_empty() {
            self.push(from);
        }
    }

    fn operand_into(&mut self, op: Operand, to: usize) {
        match op {
            Operand::Var(v) => {
                let from = self.node(PNode::Var(v));
                self.edge(from, to);
            }
            Operand::Func(f) => {
                let from = self.node(PNode::FnConst(f));
                self.edge(from, to);
            }
        }
    }

    fn link_call(&mut self, call_idx: usize, f: FnId, prog: &IRProgram) {
        if !self.linked.insert((call_idx, f)) {
            return;
        }
        let (label, args, result) =
            (self.calls[call_idx].label, self.calls[call_idx].args.clone(), self.calls[call_idx].result);
        self.call_targets.entry(label).or_default().insert(f);
        let params = prog.function(f).params.clone();
        for (arg, param) in args.into_iter().zip(params) {
            let p = self.node(PNode::Var(param));
            self.operand_into(arg, p);
        }
        if let Some(r) = result {
            let ret = self.node(PNode::FnRet(f));
            let r = self.node(PNode::Var(r));
            self.edge(ret, r);
        }
    }

    fn run(&mut self, prog: &IRProgram) {
        while let Some(n) = self.worklist.pop_front() {
            self.queued[n] = false;
            let set = self.pts[n].clone();
            // Deref-based constraints materialize copy edges per pointee.
            for &o in &set {
                let on = self.node(PNode::Obj(o));
                for i in 0..self.load_sinks[n].len() {
                    let sink = self.load_sinks[n][i];
                    self.edge(on, sink);
                }
                for i in 0..self.store_sources[n].len() {
                    let src = self.store_sources[n][i];
                    self.edge(src, on);
                }
            }
            for i in 0..self.call_watch[n].len() {
                let call = self.call_watch[n][i];
                for &o in &set {
                    if let Some(f) = self.store.as_func(o) {
                        self.link_call(call, f, prog);
                    }
                }
            }
            let succs: Vec<usize> = self.succs[n].iter().copied().collect();
            for s in succs {
                let before = self.pts[s].len();
                let from = self.pts[n].clone();
                self.pts[s].extend(from);
                if self.pts[s].len() != before {
                    self.push(s);
                }
            }
        }
    }
}

/// Run the pre-analysis over the whole program.
pub fn analyze(prog: &IRProgram, store: &mut ObjectStore) -> AndersenResult {
    let mut s = Solver {
        store,
        ids: HashMap::new(),
        nodes: Vec::new(),
        pts: Vec::new(),
        succs: Vec::new(),
        load_sinks: Vec::new(),
        store_sources: Vec::new(),
        call_watch: Vec::new(),
        calls: Vec::new(),
        linked: BTreeSet::new(),
        call_targets: BTreeMap::new(),
        worklist: VecDeque::new(),
        queued: Vec::new(),
    };

    for (owner, instr) in prog.all_instrs() {
        let result = instr.result;
        match &instr.kind {
            InstrKind::Alloca { .. } | InstrKind::Malloc { .. } => {
                let o = s.store.base(instr.label);
                let r = s.node(PNode::Var(result.unwrap()));
                s.seed(r, o);
            }
            InstrKind::Copy { src } => {
                let r = s.node(PNode::Var(result.unwrap()));
                s.operand_into(*src, r);
            }
            InstrKind::Cast { src, .. }
            | InstrKind::DynCast { src, .. } => {
                let r = s.node(PNode::Var(result.unwrap()));
                let from = s.node(PNode::Var(*src));
                s.edge(from, r);
            }
            InstrKind::Array { base, .. } => {
                let r = s.node(PNode::Var(result.unwrap()));
                let from = s.node(PNode::Var(*base));
                s.edge(from, r);
            }
            InstrKind::Field { base, .. } => {
                let r = s.node(PNode::Var(result.unwrap()));
                let from = s.node(PNode::Var(*base));
                s.edge(from, r);
            }
            InstrKind::Load { addr } => {
                let r = s.node(PNode::Var(result.unwrap()));
                let p = s.node(PNode::Var(*addr));
                s.load_sinks[p].push(r);
                if !s.pts[p].is_empty() {
                    s.push(p);
                }
            }
            InstrKind::Store { addr, value } => {
                let p = s.node(PNode::Var(*addr));
                let src = match value {
                    Operand::Var(v) => s.node(PNode::Var(*v)),
                    Operand::Func(f) => s.node(PNode::FnConst(*f)),
                };
                s.store_sources[p].push(src);
                if !s.pts[p].is_empty() {
                    s.push(p);
                }
            }
            InstrKind::Phi { arms } => {
                let r = s.node(PNode::Var(result.unwrap()));
                for (op, _) in arms {
                    s.operand_into(*op, r);
                }
            }
            InstrKind::Call { callee, args } => {
                let idx = s.calls.len();
                s.calls.push(CallSite { label: instr.label, args: args.clone(), result });
                match callee {
                    Callee::Direct(f) => s.link_call(idx, *f, prog),
                    Callee::Indirect(v) => {
                        let n = s.node(PNode::Var(*v));
                        s.call_watch[n].push(idx);
                        if !s.pts[n].is_empty() {
                            s.push(n);
                        }
                    }
                }
            }
            InstrKind::Ret { value: Some(op) } => {
                let owner = owner.expect("ret only occurs inside a function");
                let ret = s.node(PNode::FnRet(owner));
                s.operand_into(*op, ret);
            }
            InstrKind::Constructor { .. }
            | InstrKind::Ret { value: None }
            | InstrKind::Br { .. }
            | InstrKind::Jmp { .. } => {}
        }
    }

    s.run(prog);

    let mut out = AndersenResult::default();
    for (i, p) in s.nodes.iter().enumerate() {
        match p {
            PNode::Var(v) => {
                out.pts_var.insert(*v, s.pts[i].clone());
            }
            PNode::Obj(o) => {
                out.pts_obj.insert(*o, s.pts[i].clone());
            }
            _ => {}
        }
    }
    out.call_targets = s.call_targets;
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse::parse_program;

    fn run(src: &str) -> (IRProgram, ObjectStore, AndersenResult) {
        let prog = parse_program(src).expect("fixture parses");
        let mut store = ObjectStore::seeded(&prog);
        let res = analyze(&prog, &mut store);
        (prog, store, res)
    }

    fn pts_names(
        prog: &IRProgram,
        store: &ObjectStore,
        res: &AndersenResult,
        func: &str,
        var: &str,
    ) -> Vec<String> {
        let v = prog
            .vars
            .iter()
            .enumerate()
            .find(|(_, info)| {
                info.name == var
                    && info.owner.map(|f| prog.function(f).name.as_str()) == Some(func)
            })
            .map(|(i, _)| VarId(i as u32))
            .expect("variable exists");
        res.var(v).map(|s| store.set_names(prog, s)).unwrap_or_default()
    }

    #[test]
    fn copies_and_loads_flow() {
        let (p, st, r) = run("func @main() {\nbb0:\n  %a = alloca i64, 8\n  %b = alloca ptr, 8\n  store %b, %a\n  %c = load %b\n  ret\n}\n");
        assert_eq!(pts_names(&p, &st, &r, "main", "c"), vec!["o@l0"]);
        assert_eq!(pts_names(&p, &st, &r, "main", "b"), vec!["o@l1"]);
    }

    #[test]
    fn field_and_index_collapse_to_base() {
        let (p, st, r) = run(
            "type A = struct { x: i32, v: i32 }\nfunc @main() {\nbb0:\n  %a = alloca A, 8\n  %f = field %a, v\n  %e = array %a, 1\n  ret\n}\n",
        );
        assert_eq!(pts_names(&p, &st, &r, "main", "f"), vec!["o@l0"]);
        assert_eq!(pts_names(&p, &st, &r, "main", "e"), vec!["o@l0"]);
    }

    #[test]
    fn indirect_calls_resolve_on_the_fly() {
        let src = "func @f(%x) {\nbb0:\n  ret %x\n}\nfunc @main() {\nbb0:\n  %a = alloca i64, 8\n  %fp = @f\n  %r = call %fp(%a)\n  ret\n}\n";
        let (p, st, r) = run(src);
        // `@f`'s body takes l0; the alloca in `@main` is l1.
        assert_eq!(pts_names(&p, &st, &r, "main", "r"), vec!["o@l1"]);
        assert_eq!(pts_names(&p, &st, &r, "f", "x"), vec!["o@l1"]);
        let call = p
            .all_instrs()
            .find(|(_, i)| matches!(i.kind, InstrKind::Call { .. }))
            .map(|(_, i)| i.label)
            .unwrap();
        let f = p.fn_by_name("f").unwrap();
        assert_eq!(r.targets(call), Some(&BTreeSet::from([f])));
    }

    #[test]
    fn function_pointers_through_memory() {
        let src = "func @g() {\nbb0:\n  ret\n}\nfunc @main() {\nbb0:\n  %slot = alloca ptr, 8\n  store %slot, @g\n  %fp = load %slot\n  call %fp()\n  ret\n}\n";
        let (p, st, r) = run(src);
        assert_eq!(pts_names(&p, &st, &r, "main", "fp"), vec!["@g"]);
        let call = p
            .all_instrs()
            .find(|(_, i)| matches!(i.kind, InstrKind::Call { callee: Callee::Indirect(_), .. }))
            .map(|(_, i)| i.label)
            .unwrap();
        assert_eq!(r.targets(call).map(|t| t.len()), Some(1));
    }

    #[test]
    fn flow_insensitive_joins_both_stores() {
        let src = "func @main() {\nbb0:\n  %a = alloca i64, 8\n  %b = alloca i64, 8\n  %p = alloca ptr, 8\n  store %p, %a\n  %one = load %p\n  store %p, %b\n  ret\n}\n";
        let (p, st, r) = run(src);
        // No flow sensitivity: the early load already sees the later store.
        assert_eq!(pts_names(&p, &st, &r, "main", "one"), vec!["o@l0", "o@l1"]);
    }
}
