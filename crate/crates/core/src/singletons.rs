//! Which allocation sites stand for exactly one runtime object?
//!
//! A store may replace (rather than extend) a cell's contents only when
//! its target is such a site. Module-scope allocations qualify outright.
//! A function-local `alloca`/`malloc` qualifies when its block is not in
//! a control-flow cycle and the enclosing function can execute at most
//! once per run: it is `main`, or it is non-recursive, has exactly one
//! call site in the whole program, that site is outside any loop, and
//! the caller itself executes at most once. Allocations of array types
//! are excluded (one site, many elements), as are summary sub-objects
//! and function objects.

use crate::andersen::AndersenResult;
use crate::ir::cfg::build_cfg;
use crate::ir::{FnId, IRProgram, InstrKind, Label, TypeKind, TypeRef};
use crate::objects::{ObjId, ObjectStore};
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone, Default)]
pub struct Singletons {
    bases: BTreeSet<ObjId>,
    /// Functions that run at most once per program execution.
    pub once_functions: BTreeSet<FnId>,
}

impl Singletons {
    pub fn is_singleton_base(&self, o: ObjId) -> bool {
        self.bases.contains(&o)
    }

    /// May a store whose only target is `o` replace its cell outright?
    pub fn allows_strong_update(&self, store: &ObjectStore, o: ObjId) -> bool {
        !store.is_summary(o) && self.bases.contains(&store.root(o))
    }
}

fn alloca_is_array(prog: &IRProgram, l: Label) -> bool {
    match &prog.instr(l).kind {
        InstrKind::Alloca { ty: TypeRef::Named(id), .. } => {
            matches!(prog.type_def(*id).kind, TypeKind::Array { .. })
        }
        _ => false,
    }
}

pub fn classify(prog: &IRProgram, store: &ObjectStore, pre: &AndersenResult) -> Singletons {
    // Call sites per callee, and the call-graph SCCs for recursion.
    let mut sites: BTreeMap<FnId, Vec<Label>> = BTreeMap::new();
    for (l, targets) in &pre.call_targets {
        for f in targets {
            sites.entry(*f).or_default().push(*l);
        }
    }
    let mut recursive: BTreeSet<FnId> = BTreeSet::new();
    {
        let mut g = petgraph::graph::DiGraph::<FnId, ()>::new();
        let idx: BTreeMap<FnId, _> =
            prog.functions.iter().map(|f| (f.id, g.add_node(f.id))).collect();
        for (l, targets) in &pre.call_targets {
            if let Some(caller) = prog.instr_loc(*l).func {
                for f in targets {
                    g.add_edge(idx[&caller], idx[f], ());
                }
            }
        }
        for scc in petgraph::algo::tarjan_scc(&g) {
            if scc.len() > 1 {
                recursive.extend(scc.iter().map(|n| g[*n]));
            } else {
                let n = scc[0];
                if g.find_edge(n, n).is_some() {
                    recursive.insert(g[n]);
                }
            }
        }
    }

    // Per-function loop information for the "site outside a loop" check.
    let in_cycle: BTreeMap<FnId, Vec<bool>> =
        prog.functions.iter().map(|f| (f.id, build_cfg(f).in_cycle())).collect();
    let label_in_loop = |l: Label| -> bool {
        let loc = prog.instr_loc(l);
        match loc.func {
            None => false,
            Some(f) => in_cycle[&f][loc.block.0 as usize],
        }
    };

    let main = prog.fn_by_name("main");
    let mut once: BTreeMap<FnId, bool> = BTreeMap::new();
    fn executes_once(
        f: FnId,
        main: Option<FnId>,
        sites: &BTreeMap<FnId, Vec<Label>>,
        recursive: &BTreeSet<FnId>,
        label_in_loop: &dyn Fn(Label) -> bool,
        prog: &IRProgram,
        memo: &mut BTreeMap<FnId, bool>,
        visiting: &mut BTreeSet<FnId>,
    ) -> bool {
        if let Some(v) = memo.get(&f) {
            return *v;
        }
        if !visiting.insert(f) {
            return false; // call cycle
        }
        let empty = Vec::new();
        let f_sites = sites.get(&f).unwrap_or(&empty);
        let v = if Some(f) == main {
            // The runtime invokes main once; any internal call adds more.
            f_sites.is_empty()
        } else if recursive.contains(&f) || f_sites.len() != 1 {
            false
        } else {
            let site = f_sites[0];
            !label_in_loop(site)
                && match prog.instr_loc(site).func {
                    None => false,
                    Some(caller) => executes_once(
                        caller,
                        main,
                        sites,
                        recursive,
                        label_in_loop,
                        prog,
                        memo,
                        visiting,
                    ),
                }
        };
        visiting.remove(&f);
        memo.insert(f, v);
        v
    }

    let mut out = Singletons::default();
    for f in &prog.functions {
        let mut visiting = BTreeSet::new();
        if executes_once(
            f.id,
            main,
            &sites,
            &recursive,
            &label_in_loop,
            prog,
            &mut once,
            &mut visiting,
        ) {
            out.once_functions.insert(f.id);
        }
    }

    for o in store.iter() {
        let Some(site) = store.site(o) else { continue };
        if store.root(o) != o {
            continue; // bases only
        }
        if alloca_is_array(prog, site) {
            continue;
        }
        let loc = prog.instr_loc(site);
        let singleton = match loc.func {
            None => true, // module scope: allocated exactly once
            Some(f) => !label_in_loop(site) && out.once_functions.contains(&f),
        };
        if singleton {
            out.bases.insert(o);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::andersen;
    use crate::ir::parse::parse_program;

    fn setup(src: &str) -> (IRProgram, ObjectStore, Singletons) {
        let prog = parse_program(src).expect("fixture parses");
        let mut store = ObjectStore::seeded(&prog);
        let pre = andersen::analyze(&prog, &mut store);
        let s = classify(&prog, &store, &pre);
        (prog, store, s)
    }

    fn base_of(prog: &IRProgram, store: &ObjectStore, nth_alloc: usize) -> ObjId {
        let l = prog
            .all_instrs()
            .filter(|(_, i)| matches!(i.kind, InstrKind::Alloca { .. } | InstrKind::Malloc { .. }))
            .nth(nth_alloc)
            .map(|(_, i)| i.label)
            .unwrap();
        store.clone().base(l)
    }

    #[test]
    fn main_allocations_are_singletons() {
        let (p, st, s) =
            setup("func @main() {\nbb0:\n  %a = alloca i64, 8\n  %h = malloc 16\n  ret\n}\n");
        assert!(s.is_singleton_base(base_of(&p, &st, 0)));
        assert!(s.is_singleton_base(base_of(&p, &st, 1)));
    }

    #[test]
    fn loop_allocations_are_not() {
        let src = "\
func @main() {
bb0:
  %c = alloca i8, 1
  jmp bbh
bbh:
  %h = malloc 8
  br %c, bbh, bbx
bbx:
  ret
}
";
        let (p, st, s) = setup(src);
        assert!(s.is_singleton_base(base_of(&p, &st, 0))); // %c, before the loop
        assert!(!s.is_singleton_base(base_of(&p, &st, 1))); // %h, inside it
    }

    #[test]
    fn single_call_site_chain_counts_as_once() {
        let src = "\
func @helper() {
bb0:
  %h = malloc 8
  ret
}
func @main() {
bb0:
  call @helper()
  ret
}
";
        let (p, st, s) = setup(src);
        let helper = p.fn_by_name("helper").unwrap();
        assert!(s.once_functions.contains(&helper));
        assert!(s.is_singleton_base(base_of(&p, &st, 0)));
    }

    #[test]
    fn two_call_sites_disqualify() {
        let src = "\
func @helper() {
bb0:
  %h = malloc 8
  ret
}
func @main() {
bb0:
  call @helper()
  call @helper()
  ret
}
";
        let (p, st, s) = setup(src);
        assert!(!s.is_singleton_base(base_of(&p, &st, 0)));
    }

    #[test]
    fn recursion_disqualifies() {
        let src = "\
func @spin() {
bb0:
  %h = malloc 8
  call @spin()
  ret
}
func @main() {
bb0:
  call @spin()
  ret
}
";
        let (p, st, s) = setup(src);
        let spin = p.fn_by_name("spin").unwrap();
        assert!(!s.once_functions.contains(&spin));
        assert!(!s.is_singleton_base(base_of(&p, &st, 0)));
    }

    #[test]
    fn call_site_inside_a_loop_disqualifies() {
        let src = "\
func @helper() {
bb0:
  %h = malloc 8
  ret
}
func @main() {
bb0:
  %c = alloca i8, 1
  jmp bbh
bbh:
  call @helper()
  br %c, bbh, bbx
bbx:
  ret
}
";
        let (p, st, s) = setup(src);
        assert!(!s.is_singleton_base(base_of(&p, &st, 0)));
    }

    #[test]
    fn array_allocas_and_globals() {
        let src = "\
type Arr = [4 x i64]
@g = alloca i64, 8
@garr = alloca Arr, 32
func @main() {
bb0:
  %a = alloca Arr, 32
  ret
}
";
        let (p, st, s) = setup(src);
        assert!(s.is_singleton_base(base_of(&p, &st, 0))); // @g
        assert!(!s.is_singleton_base(base_of(&p, &st, 1))); // @garr: array
        assert!(!s.is_singleton_base(base_of(&p, &st, 2))); // %a: array
    }

    #[test]
    fn summaries_never_strong_update() {
        let (p, st, s) =
            setup("func @main() {\nbb0:\n  %a = alloca i64, 8\n  ret\n}\n");
        let mut st2 = st.clone();
        let b = base_of(&p, &st, 0);
        let sum = st2.summary(b);
        let sub = st2.sub(b, 8);
        assert!(s.allows_strong_update(&st2, b));
        assert!(s.allows_strong_update(&st2, sub));
        assert!(!s.allows_strong_update(&st2, sum));
    }
}
