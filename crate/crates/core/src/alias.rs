//! All-pairs alias queries over a solved program, and the no-alias
//! statistic used to compare analysis modes.
//!
//! Two pointers may alias when their final points-to sets contain
//! overlapping objects. Overlap respects the sub-object structure: a base
//! object overlaps every piece carved out of it, two constant-offset
//! pieces overlap only when they are the same piece, and a summary
//! sub-object overlaps everything under its base.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::andersen::AndersenResult;
use crate::ir::{IRProgram, VarId};
use crate::objects::{ObjId, ObjSet, ObjectStore};
use crate::solver::{Mode, Solution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Verdict {
    #[serde(rename = "may-alias")]
    MayAlias,
    #[serde(rename = "no-alias")]
    NoAlias,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Verdict::MayAlias => write!(f, "may-alias"),
            Verdict::NoAlias => write!(f, "no-alias"),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PairVerdict {
    pub a: String,
    pub b: String,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, Serialize)]
pub struct AliasReport {
    pub mode: Mode,
    pub total_pairs: u64,
    pub no_alias_pairs: u64,
    pub no_alias_pct: f64,
    pub pairs: Vec<PairVerdict>,
}

#[derive(Debug, thiserror::Error)]
pub enum AliasError {
    #[error("unknown variable {0}")]
    UnknownVariable(String),
}

/// Whether two abstract objects can denote overlapping storage.
pub fn objects_overlap(store: &ObjectStore, a: ObjId, b: ObjId) -> bool {
    if a == b {
        return true;
    }
    let ra = store.root(a);
    let rb = store.root(b);
    if ra != rb {
        return false;
    }
    // Same base: the whole object overlaps any piece of it, and the
    // summary piece overlaps every piece.
    a == ra || b == rb || store.is_summary(a) || store.is_summary(b)
}

pub fn sets_may_alias(store: &ObjectStore, s1: &ObjSet, s2: &ObjSet) -> bool {
    s1.iter().any(|&a| s2.iter().any(|&b| objects_overlap(store, a, b)))
}

pub fn alias_vars(store: &ObjectStore, sol: &Solution, v1: VarId, v2: VarId) -> Verdict {
    if sets_may_alias(store, sol.pt(v1), sol.pt(v2)) {
        Verdict::MayAlias
    } else {
        Verdict::NoAlias
    }
}

/// Query by rendered variable name (`func::%v` or `@g`).
pub fn alias(
    prog: &IRProgram,
    store: &ObjectStore,
    sol: &Solution,
    v1: &str,
    v2: &str,
) -> Result<Verdict, AliasError> {
    let lookup = |name: &str| -> Result<VarId, AliasError> {
        (0..prog.vars.len())
            .map(|i| VarId(i as u32))
            .find(|&v| prog.var_name(v) == name)
            .ok_or_else(|| AliasError::UnknownVariable(name.to_string()))
    };
    Ok(alias_vars(store, sol, lookup(v1)?, lookup(v2)?))
}

/// All-pairs sweep over pointer variables — those the pre-analysis gave a
/// non-empty points-to set, so the scope is identical for every mode.
pub fn report(
    prog: &IRProgram,
    store: &ObjectStore,
    pre: &AndersenResult,
    sol: &Solution,
) -> AliasReport {
    let scope = pre.pointer_vars();
    let mut pairs = Vec::new();
    let mut no_alias = 0u64;
    for (i, &v1) in scope.iter().enumerate() {
        for &v2 in &scope[i + 1..] {
            let verdict = alias_vars(store, sol, v1, v2);
            if verdict == Verdict::NoAlias {
                no_alias += 1;
            }
            pairs.push(PairVerdict {
                a: prog.var_name(v1),
                b: prog.var_name(v2),
                verdict,
            });
        }
    }
    let total = pairs.len() as u64;
    AliasReport {
        mode: sol.mode,
        total_pairs: total,
        no_alias_pairs: no_alias,
        no_alias_pct: pct(no_alias, total),
        pairs,
    }
}

pub fn pct(no_alias: u64, total: u64) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * no_alias as f64 / total as f64
    }
}

/// Sum per-program counts into one corpus-level figure.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct CorpusTally {
    pub total_pairs: u64,
    pub no_alias_pairs: u64,
}

impl CorpusTally {
    pub fn add(&mut self, r: &AliasReport) {
        self.total_pairs += r.total_pairs;
        self.no_alias_pairs += r.no_alias_pairs;
    }

    pub fn pct(&self) -> f64 {
        pct(self.no_alias_pairs, self.total_pairs)
    }
}

pub fn render_text(r: &AliasReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("mode:          {}\n", r.mode));
    out.push_str(&format!("total pairs:   {}\n", r.total_pairs));
    out.push_str(&format!(
        "no-alias:      {} ({:.2}%)\n",
        r.no_alias_pairs, r.no_alias_pct
    ));
    if r.pairs.is_empty() {
        return out;
    }
    let wa = r.pairs.iter().map(|p| p.a.len()).max().unwrap_or(0);
    let wb = r.pairs.iter().map(|p| p.b.len()).max().unwrap_or(0);
    for p in &r.pairs {
        out.push_str(&format!(
            "{:wa$}  {:wb$}  {}\n",
            p.a,
            p.b,
            p.verdict,
            wa = wa,
            wb = wb
        ));
    }
    out
}

/// Verdicts keyed by pair, for comparing two reports over the same scope.
pub fn verdict_map(r: &AliasReport) -> BTreeMap<(String, String), Verdict> {
    r.pairs.iter().map(|p| ((p.a.clone(), p.b.clone()), p.verdict)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse::parse_program;
    use crate::layout::compute_layouts;
    use crate::memssa;
    use crate::solver::{solve, SolveOptions};

    struct Solved {
        prog: IRProgram,
        store: ObjectStore,
        pre: AndersenResult,
        sol: Solution,
    }

    fn run(src: &str, mode: Mode) -> Solved {
        let prog = parse_program(src).expect("fixture parses");
        let layouts = compute_layouts(&prog).expect("layouts");
        let mut store = ObjectStore::seeded(&prog);
        let pre = crate::andersen::analyze(&prog, &mut store);
        let mr = memssa::mod_ref(&prog, &store, &pre);
        let annots = memssa::place_versions(&prog, &store, &pre, &mr);
        let vfg = memssa::build_vfg(&prog, &pre, &annots);
        let sing = crate::singletons::classify(&prog, &store, &pre);
        let opts = SolveOptions { mode, ..SolveOptions::default() };
        let sol = solve(&prog, &layouts, &mut store, &pre, &mr, &annots, &vfg, &sing, &opts)
            .expect("solve");
        Solved { prog, store, pre, sol }
    }

    #[test]
    fn two_independent_allocations_never_alias() {
        let s = run(
            "func @main() {\nbb0:\n  %a = alloca i64, 8\n  %b = alloca i64, 8\n  ret\n}\n",
            Mode::MtoSs,
        );
        let r = report(&s.prog, &s.store, &s.pre, &s.sol);
        assert_eq!(r.total_pairs, 1);
        assert_eq!(r.no_alias_pairs, 1);
        assert_eq!(r.no_alias_pct, 100.0);
    }

    #[test]
    fn a_pointer_aliases_itself() {
        let s = run(
            "func @main() {\nbb0:\n  %a = alloca i64, 8\n  ret\n}\n",
            Mode::MtoSs,
        );
        assert_eq!(
            alias(&s.prog, &s.store, &s.sol, "main::%a", "main::%a").unwrap(),
            Verdict::MayAlias
        );
    }

    #[test]
    fn unknown_variable_is_an_error() {
        let s = run(
            "func @main() {\nbb0:\n  %a = alloca i64, 8\n  ret\n}\n",
            Mode::MtoSs,
        );
        let e = alias(&s.prog, &s.store, &s.sol, "main::%a", "main::%zz").unwrap_err();
        assert!(e.to_string().contains("main::%zz"));
    }

    #[test]
    fn base_overlaps_its_pieces_but_distinct_pieces_do_not() {
        let src = "\
type P = struct { x: i64, y: i64, z: i64 }
func @main() {
bb0:
  %m = malloc 24
  %p = cast P*, %m
  %fx = field %p, x
  %fy = field %p, y
  %fz = field %p, z
  ret
}
";
        let s = run(src, Mode::MtoSs);
        let q = |a: &str, b: &str| alias(&s.prog, &s.store, &s.sol, a, b).unwrap();
        assert_eq!(q("main::%p", "main::%fy"), Verdict::MayAlias);
        // Two distinct non-zero pieces are disjoint.
        assert_eq!(q("main::%fy", "main::%fz"), Verdict::NoAlias);
        // Offset zero canonicalizes to the whole object, which overlaps
        // every piece — the price of first-field equivalence.
        assert_eq!(q("main::%fx", "main::%m"), Verdict::MayAlias);
        assert_eq!(q("main::%fx", "main::%fy"), Verdict::MayAlias);
    }

    #[test]
    fn summary_piece_overlaps_every_piece_of_its_base() {
        let src = "\
type P = struct { x: i64, y: i64 }
func @main() {
bb0:
  %m = malloc 16
  %p = cast P*, %m
  %fy = field %p, y
  %i = %m
  %e = array %m, %i
  ret
}
";
        let s = run(src, Mode::MtoSs);
        let q = |a: &str, b: &str| alias(&s.prog, &s.store, &s.sol, a, b).unwrap();
        assert_eq!(q("main::%e", "main::%fy"), Verdict::MayAlias);
    }

    #[test]
    fn mismatched_casts_still_alias_through_the_shared_object() {
        let src = "\
type S1 = [4 x i8]
type T1 = struct { s1: S1, x: i64 }
type T2 = struct { st: S1, b: i64 }
func @main() {
bb0:
  %m = malloc 16
  %p = cast T1*, %m
  %q = cast T2*, %p
  %s = field %p, s1
  %st = field %q, st
  ret
}
";
        let s = run(src, Mode::MtoSs);
        let q = |a: &str, b: &str| alias(&s.prog, &s.store, &s.sol, a, b).unwrap();
        assert_eq!(q("main::%p", "main::%q"), Verdict::MayAlias);
        assert_eq!(q("main::%s", "main::%st"), Verdict::MayAlias);
    }

    #[test]
    fn sparse_no_alias_answers_survive_in_the_precise_mode() {
        let src = "\
type S1 = [4 x i8]
type T1 = struct { s1: S1, x: i64 }
type T2 = struct { st: S1, b: i64 }
func @main() {
bb0:
  %m = malloc 16
  %p = cast T1*, %m
  %q = cast T2*, %p
  %s = field %p, s1
  %fx = field %p, x
  %fb = field %q, b
  ret
}
";
        let precise = run(src, Mode::MtoSs);
        let rp = report(&precise.prog, &precise.store, &precise.pre, &precise.sol);
        let sparse = run(src, Mode::Sparse);
        let rs = report(&sparse.prog, &sparse.store, &sparse.pre, &sparse.sol);
        assert_eq!(rp.total_pairs, rs.total_pairs);
        let mp = verdict_map(&rp);
        for (pair, v) in verdict_map(&rs) {
            if v == Verdict::NoAlias {
                assert_eq!(mp[&pair], Verdict::NoAlias, "pair {pair:?} regressed");
            }
        }
        assert!(rp.no_alias_pct >= rs.no_alias_pct);
    }
}
