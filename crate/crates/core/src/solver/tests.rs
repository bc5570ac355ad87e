use std::collections::BTreeSet;

use super::*;
use crate::ir::parse::parse_program;
use crate::ir::TypeRef;
use crate::layout::compute_layouts;
use crate::memssa;
use crate::objects::ObjectStore;

struct Run {
    prog: IRProgram,
    store: ObjectStore,
    vfg: Vfg,
    sol: Solution,
}

fn run_opts(src: &str, opts: &SolveOptions) -> Result<Run, SolveError> {
    let prog = parse_program(src).expect("fixture parses");
    let layouts = compute_layouts(&prog).expect("layouts");
    let mut store = ObjectStore::seeded(&prog);
    let pre = crate::andersen::analyze(&prog, &mut store);
    let mr = memssa::mod_ref(&prog, &store, &pre);
    let annots = memssa::place_versions(&prog, &store, &pre, &mr);
    let vfg = memssa::build_vfg(&prog, &pre, &annots);
    let sing = crate::singletons::classify(&prog, &store, &pre);
    let sol = solve(&prog, &layouts, &mut store, &pre, &mr, &annots, &vfg, &sing, opts)?;
    Ok(Run { prog, store, vfg, sol })
}

fn run_mode(src: &str, mode: Mode) -> Run {
    run_opts(src, &SolveOptions { mode, ..SolveOptions::default() }).expect("solve converges")
}

fn run(src: &str) -> Run {
    run_mode(src, Mode::MtoSs)
}

impl Run {
    fn var(&self, f: &str, v: &str) -> VarId {
        let want = format!("{f}::%{v}");
        (0..self.prog.vars.len())
            .map(|i| VarId(i as u32))
            .find(|&id| self.prog.var_name(id) == want || self.prog.var_name(id) == format!("@{v}"))
            .unwrap_or_else(|| panic!("no var {want}"))
    }

    fn pt_names(&self, f: &str, v: &str) -> Vec<String> {
        self.sol
            .pt(self.var(f, v))
            .iter()
            .map(|&o| self.store.name(&self.prog, o))
            .collect()
    }

    fn types_at(&self, l: u32, obj: &str) -> Vec<String> {
        let m = self.sol.types_at_label(Label(l));
        m.iter()
            .find(|(&o, _)| self.store.name(&self.prog, o) == obj)
            .map(|(_, ts)| ts.iter().map(|&t| type_name(&self.prog, t)).collect())
            .unwrap_or_default()
    }
}

#[test]
fn strong_update_branches() {
    // Hand-built store shapes: unique singleton target replaces, unknown
    // target is a no-op, anything else unions weakly.
    let o = ObjId(0);
    let a = ObjId(1);
    let b = ObjId(2);
    let old: ObjSet = [a].into_iter().collect();
    let new: ObjSet = [b].into_iter().collect();

    let single: ObjSet = [o].into_iter().collect();
    let mut cells = CellMap::from([(o, old.clone())]);
    let strong = transfer::store_strong_ok(&single, |_| true);
    assert!(strong);
    apply_store(&mut cells, &single, &[o], &new, strong);
    assert_eq!(cells[&o], new, "singleton target is replaced outright");

    let empty = ObjSet::new();
    let mut cells = CellMap::from([(o, old.clone())]);
    apply_store(&mut cells, &empty, &[], &new, false);
    assert_eq!(cells[&o], old, "store through nothing changes nothing");

    let both: ObjSet = [o, a].into_iter().collect();
    assert!(!transfer::store_strong_ok(&both, |_| true));
    let mut cells = CellMap::from([(o, old.clone())]);
    apply_store(&mut cells, &both, &[o, a], &new, false);
    assert_eq!(cells[&o], [a, b].into_iter().collect::<ObjSet>(), "weak update unions");

    // A unique target that is not a singleton also unions.
    assert!(!transfer::store_strong_ok(&single, |_| false));
}

#[test]
fn empty_main_has_empty_state() {
    let r = run("func @main() {\nbb0:\n  ret\n}\n");
    assert!(r.sol.init_t().is_empty());
    assert!(r.sol.all_types().is_empty());
    assert_eq!(r.sol.mode, Mode::MtoSs);
}

#[test]
fn chained_casts_accumulate_both_types() {
    let src = "\
type S1 = [4 x i8]
type T1 = struct { s1: S1, x: i64 }
type S2 = [6 x i8]
type T2 = struct { st: S2 }
func @main() {
bb0:
  %m = malloc 16
  %p = cast T1*, %m
  %s = field %p, s1
  %q = cast T2*, %p
  %t = field %q, st
  ret
}
";
    let r = run(src);
    assert_eq!(r.pt_names("main", "p"), ["o@l0"]);
    assert_eq!(r.pt_names("main", "q"), ["o@l0"]);
    // Second cast sees the first cast's type and adds its own.
    assert_eq!(r.types_at(3, "o@l0"), ["T1", "T2"]);
    assert_eq!(r.types_at(1, "o@l0"), ["T1"]);
    // Both offset-0 field pointers collapse to the whole object.
    assert_eq!(r.pt_names("main", "s"), ["o@l0"]);
    assert_eq!(r.pt_names("main", "t"), ["o@l0"]);
}

#[test]
fn field_filter_blocks_types_the_object_never_had() {
    let src = "\
type T1 = struct { a: i64 }
type T2 = struct { x: i64, b: i64 }
func @main() {
bb0:
  %m = malloc 16
  %p = cast T1*, %m
  %f = field %p, b
  ret
}
";
    let mto = run(src);
    assert!(mto.pt_names("main", "f").is_empty(), "T2 never described this object");
    let sp = run_mode(src, Mode::Sparse);
    assert_eq!(sp.pt_names("main", "f"), ["o@l0+8"], "baseline cannot filter");
}

#[test]
fn untyped_heap_object_needs_a_cast_before_field_access() {
    // Until a cast gives the object a structure, a field access has no
    // legal offset and filtering drops it; the baseline guesses any
    // declared type instead.
    let src = "\
type T2 = struct { x: i64, b: i64 }
func @main() {
bb0:
  %m = malloc 16
  %f = field %m, b
  ret
}
";
    let r = run(src);
    assert!(r.pt_names("main", "f").is_empty());
    let sp = run_mode(src, Mode::Sparse);
    assert_eq!(sp.pt_names("main", "f"), ["o@l0+8"]);
}

#[test]
fn strong_update_kills_the_previous_pointee() {
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
    let r = run(src);
    assert_eq!(r.pt_names("main", "r"), ["o@l2"], "second store replaces the first");
}

#[test]
fn weak_update_keeps_both_pointees() {
    let src = "\
func @main() {
bb0:
  %a1 = alloca i64, 8
  %a2 = alloca i64, 8
  %y = malloc 8
  store %a1, %y
  br %a1, bb1, bb2
bb1:
  %p1 = %a1
  jmp bb3
bb2:
  %p2 = %a2
  jmp bb3
bb3:
  %p = phi [%p1, bb1], [%p2, bb2]
  %x = malloc 8
  store %p, %x
  %r1 = load %a1
  ret
}
";
    let r = run(src);
    assert_eq!(r.pt_names("main", "r1"), ["o@l2", "o@l10"]);
}

#[test]
fn stores_flow_through_calls() {
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
    let r = run(src);
    assert_eq!(r.pt_names("main", "r"), ["o@l0"], "foo's allocation escapes through p");
}

#[test]
fn return_values_carry_objects_and_types() {
    let src = "\
type T1 = struct { a: i64, b: i64 }
func @mk() {
bb0:
  %m = malloc 16
  %c = cast T1*, %m
  ret %c
}
func @main() {
bb0:
  %p = call @mk()
  %f = field %p, b
  ret
}
";
    let r = run(src);
    assert_eq!(r.pt_names("main", "p"), ["o@l0"]);
    // The type travelled with the returned pointer, so the field resolves.
    assert_eq!(r.pt_names("main", "f"), ["o@l0+8"]);
}

#[test]
fn dyncast_follows_recorded_construction() {
    let src = "\
type B = class() virtual { }
type L = class(B) virtual { }
type R = class(B) virtual { }
type D = class(L, R) { }
type U = class() virtual { }
func @main() {
bb0:
  %m = malloc 16
  constructor D, %m
  %r = dyncast R*, %m
  %u = dyncast U*, %m
  ret
}
";
    let r = run(src);
    assert_eq!(r.pt_names("main", "r"), ["o@l0+8"], "R lives at offset 8 inside D");
    assert!(r.pt_names("main", "u").is_empty(), "unrelated cast fails");
    let d = r.prog.type_by_name("D").unwrap();
    let inits: Vec<TypeRef> = r
        .sol
        .init_t()
        .values()
        .flat_map(|ts| ts.iter().copied())
        .collect();
    assert_eq!(inits, [TypeRef::Named(d)]);
    // The failed and successful casts add no types anywhere.
    let u = r.prog.type_by_name("U").unwrap();
    assert!(!r.sol.all_types().contains(&TypeRef::Named(u)));
}

#[test]
fn dyncast_to_ambiguous_base_contributes_nothing() {
    let src = "\
type B = class() virtual { }
type L = class(B) virtual { }
type R = class(B) virtual { }
type D = class(L, R) { }
func @main() {
bb0:
  %m = malloc 16
  constructor D, %m
  %b = dyncast B*, %m
  ret
}
";
    let r = run(src);
    assert!(r.pt_names("main", "b").is_empty(), "B appears twice in D");
}

#[test]
fn variable_index_reads_hit_the_summary_cell() {
    let src = "\
func @main() {
bb0:
  %m = malloc 64
  %i = malloc 8
  %e = array %m, %i
  %x = malloc 8
  store %e, %x
  %r0 = array %m, %i
  %r = load %r0
  ret
}
";
    let r = run(src);
    assert_eq!(r.pt_names("main", "e"), ["o@l0[*]"]);
    assert_eq!(r.pt_names("main", "r"), ["o@l3"], "summary write feeds summary read");
}

#[test]
fn const_index_respects_type_bounds() {
    let src = "\
type A = struct { x: i32, v: i32 }
type Arr = [3 x A]
func @main() {
bb0:
  %m = malloc 24
  %p = cast Arr*, %m
  %e1 = array %p, 2
  %e4 = array %p, 4
  ret
}
";
    let r = run(src);
    assert_eq!(r.pt_names("main", "e1"), ["o@l0+16"]);
    assert!(r.pt_names("main", "e4").is_empty(), "index past the end is filtered");
}

#[test]
fn sparse_mode_is_always_a_superset() {
    let src = "\
type T1 = struct { a: i64 }
type T2 = struct { x: i64, b: i64 }
func @mk() {
bb0:
  %m = malloc 16
  ret %m
}
func @main() {
bb0:
  %h = call @mk()
  %p = cast T1*, %h
  %f = field %p, b
  %a = alloca i64, 8
  store %a, %p
  %r = load %a
  ret
}
";
    let mto = run(src);
    let sp = run_mode(src, Mode::Sparse);
    for vi in 0..mto.prog.vars.len() {
        let v = VarId(vi as u32);
        let m: BTreeSet<String> =
            mto.sol.pt(v).iter().map(|&o| mto.store.name(&mto.prog, o)).collect();
        let s: BTreeSet<String> =
            sp.sol.pt(v).iter().map(|&o| sp.store.name(&sp.prog, o)).collect();
        assert!(m.is_subset(&s), "{}: {m:?} ⊄ {s:?}", mto.prog.var_name(v));
    }
    assert!(sp.sol.all_types().is_empty(), "baseline never tracks types");
}

#[test]
fn results_do_not_depend_on_worklist_order() {
    let src = "\
type T1 = struct { a: i64 }
type T2 = struct { x: i64, b: i64 }
func @mk(%seed) {
bb0:
  %m = malloc 16
  store %m, %seed
  ret %m
}
func @main() {
bb0:
  %a = alloca i64, 8
  %h = call @mk(%a)
  %p = cast T1*, %h
  %q = cast T2*, %p
  %f = field %q, b
  store %a, %f
  %r = load %a
  ret
}
";
    let base = run(src);
    let want = serde_json::to_string(&base.sol.dump(&base.prog, &base.store, &base.vfg)).unwrap();
    for seed in 0..8u64 {
        let opts =
            SolveOptions { shuffle_seed: Some(seed), ..SolveOptions::default() };
        let r = run_opts(src, &opts).unwrap();
        let got = serde_json::to_string(&r.sol.dump(&r.prog, &r.store, &r.vfg)).unwrap();
        assert_eq!(got, want, "seed {seed} drifted");
    }
}

#[test]
fn budget_is_enforced() {
    let src = "func @main() {\nbb0:\n  %a = alloca i64, 8\n  ret\n}\n";
    let err = run_opts(src, &SolveOptions { budget: 1, ..SolveOptions::default() });
    assert!(matches!(err, Err(SolveError::Budget { .. })));
}

#[test]
fn indirect_calls_resolve_on_the_fly() {
    let src = "\
func @target(%x) {
bb0:
  %m = malloc 8
  store %x, %m
  ret
}
func @main() {
bb0:
  %slot = alloca i64, 8
  store %slot, @target
  %fp = load %slot
  %a = alloca i64, 8
  call %fp(%a)
  %r = load %a
  ret
}
";
    let r = run(src);
    // @target is declared first, so its malloc owns l0.
    assert_eq!(r.pt_names("main", "r"), ["o@l0"]);
    let call_label = Label(7);
    let t = r.prog.fn_by_name("target").unwrap();
    assert_eq!(
        r.sol.resolved_at(call_label).cloned().unwrap_or_default(),
        [t].into_iter().collect::<BTreeSet<_>>()
    );
    assert!(r.sol.warnings.is_empty());
}

#[test]
fn unresolved_indirect_call_is_reported() {
    let src = "\
func @main() {
bb0:
  %slot = alloca i64, 8
  %fp = load %slot
  call %fp()
  ret
}
";
    let r = run(src);
    assert_eq!(r.sol.warnings.len(), 1);
    assert!(r.sol.warnings[0].contains("no targets"));
}
