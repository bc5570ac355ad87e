//! Seeded random program generator for differential and property testing.
//!
//! Programs are built as source text and re-parsed, so everything the
//! generator emits goes through the same front end as hand-written input.
//! The shape is deliberately biased toward the interesting cases: heap
//! objects cast to several structure types, field accesses that do and do
//! not match those types, stores through clean singleton slots, and a
//! small class hierarchy for constructor/dyncast traffic.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ir::parse::parse_program;
use crate::ir::validate::validate;
use crate::ir::IRProgram;

#[derive(Debug, Clone)]
pub struct GenConfig {
    pub seed: u64,
    pub max_instructions: usize,
    pub max_types: usize,
    pub max_fields_per_struct: usize,
    pub p_cast: f64,
    pub p_field: f64,
    pub p_store: f64,
    pub p_call: f64,
    pub allow_loops: bool,
    pub allow_classes: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 0,
            max_instructions: 40,
            max_types: 6,
            max_fields_per_struct: 4,
            p_cast: 0.4,
            p_field: 0.3,
            p_store: 0.3,
            p_call: 0.3,
            allow_loops: false,
            allow_classes: true,
        }
    }
}

/// One declared struct type the generator knows the shape of.
struct GenType {
    name: String,
    /// Field names in declaration order; every field is 8 bytes wide and
    /// the first one is the shared header aggregate for "castable" types.
    fields: Vec<String>,
    /// Castable types share a first field, mismatched ones do not.
    castable: bool,
}

struct Gen {
    rng: ChaCha8Rng,
    cfg: GenConfig,
    types: Vec<GenType>,
    classes: Vec<String>,
    lines: Vec<String>,
    emitted: usize,
    next_var: usize,
}

pub fn generate_source(cfg: &GenConfig) -> String {
    Gen::new(cfg.clone()).build()
}

/// Generate, parse and validate; the result is guaranteed well-formed.
pub fn generate(cfg: &GenConfig) -> IRProgram {
    let src = generate_source(cfg);
    let prog = match parse_program(&src) {
        Ok(p) => p,
        Err(diags) => panic!("generated program failed to parse: {diags:?}\n{src}"),
    };
    let diags = validate(&prog);
    if !diags.is_empty() {
        panic!("generated program failed validation: {diags:?}\n{src}");
    }
    prog
}

impl Gen {
    fn new(cfg: GenConfig) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Gen {
            rng,
            cfg,
            types: Vec::new(),
            classes: Vec::new(),
            lines: Vec::new(),
            emitted: 0,
            next_var: 0,
        }
    }

    fn fresh(&mut self) -> String {
        let v = format!("%v{}", self.next_var);
        self.next_var += 1;
        v
    }

    fn build(mut self) -> String {
        self.declare_types();
        let helpers = self.emit_helpers();
        self.emit_main(&helpers);
        self.lines.join("\n") + "\n"
    }

    fn declare_types(&mut self) {
        let n_structs = self.cfg.max_types.min(8);
        if n_structs == 0 {
            return;
        }
        self.lines.push("type H0 = [8 x i8]".into());
        for i in 0..n_structs {
            // Most types share the header and so overlap at offset zero;
            // every third one starts differently to give the cast filter
            // something to reject.
            let castable = i % 3 != 2;
            let n_fields = self
                .rng
                .gen_range(2..=self.cfg.max_fields_per_struct.max(2));
            let mut fields = Vec::new();
            let mut decl = Vec::new();
            for j in 0..n_fields {
                let fname = format!("t{i}_f{j}");
                let fty = if j == 0 && castable { "H0" } else { "i64" };
                decl.push(format!("{fname}: {fty}"));
                fields.push(fname);
            }
            self.lines
                .push(format!("type T{i} = struct {{ {} }}", decl.join(", ")));
            self.types.push(GenType { name: format!("T{i}"), fields, castable });
        }
        if self.cfg.allow_classes {
            self.lines.push("type CB = class() virtual { cb_x: i64 }".into());
            self.lines.push("type CL = class(CB) virtual { cl_x: i64 }".into());
            self.lines.push("type CR = class(CB) virtual { cr_x: i64 }".into());
            self.lines.push("type CD = class(CL, CR) { cd_x: i64 }".into());
            self.classes = ["CB", "CL", "CR", "CD"].map(String::from).to_vec();
        }
    }

    fn emit_helpers(&mut self) -> Vec<(String, usize, bool)> {
        if self.cfg.p_call <= 0.0 || self.cfg.max_instructions < 12 {
            return Vec::new();
        }
        let n = self.rng.gen_range(1..=2usize);
        let mut sigs = Vec::new();
        for h in 0..n {
            let name = format!("@h{h}");
            let n_params = self.rng.gen_range(1..=2usize);
            let params: Vec<String> =
                (0..n_params).map(|i| format!("%a{h}_{i}")).collect();
            self.lines.push(format!("func {name}({}) {{", params.join(", ")));
            self.lines.push("bb0:".into());
            let mut scope: Vec<(String, Option<usize>)> =
                params.iter().map(|p| (p.clone(), None)).collect();
            // Params are store targets too, so helpers mutate caller memory.
            let mut hslots: Vec<String> = params.clone();
            let body = self.rng.gen_range(2..=4usize);
            for _ in 0..body {
                self.emit_one(&mut scope, &mut hslots, &[], 1.0);
            }
            let returns_ptr = self.rng.gen_bool(0.6);
            if returns_ptr {
                let (v, _) = scope.choose(&mut self.rng).cloned().unwrap();
                self.lines.push(format!("  ret {v}"));
            } else {
                self.lines.push("  ret".into());
            }
            self.lines.push("}".into());
            sigs.push((name, n_params, returns_ptr));
        }
        sigs
    }

    fn emit_main(&mut self, helpers: &[(String, usize, bool)]) {
        self.lines.push("func @main() {".into());
        self.lines.push("bb0:".into());
        let mut base: Vec<(String, Option<usize>)> = Vec::new();
        let mut slots: Vec<String> = Vec::new();

        // The entry block gets the bulk of the budget.
        let diamond = self.cfg.max_instructions >= 20 && self.rng.gen_bool(0.5);
        let budget = self.cfg.max_instructions.saturating_sub(self.emitted);
        let entry_budget = if diamond { budget.saturating_sub(9).max(4) } else { budget };
        let limit = self.emitted + entry_budget;
        while self.emitted < limit || base.is_empty() {
            self.emit_one(&mut base, &mut slots, helpers, 1.0);
            if base.len() > 60 {
                break;
            }
        }

        if !diamond {
            self.lines.push("  ret".into());
            self.lines.push("}".into());
            return;
        }

        let cond = base.choose(&mut self.rng).cloned().unwrap().0;
        self.lines.push(format!("  br {cond}, bb1, bb2"));

        // Each arm defines one pointer for the join phi plus a little body.
        let mut arm_vals = Vec::new();
        for bb in ["bb1", "bb2"] {
            self.lines.push(format!("{bb}:"));
            let mut scope = base.clone();
            let before = scope.len();
            self.emit_one(&mut scope, &mut slots.clone(), helpers, 0.8);
            if scope.len() == before {
                // Make sure the arm defined something to merge.
                let v = self.fresh();
                self.lines.push(format!("  {v} = malloc 16"));
                self.emitted += 1;
                scope.push((v, None));
            }
            arm_vals.push(scope.last().cloned().unwrap().0);
            self.lines.push("  jmp bb3".into());
        }

        self.lines.push("bb3:".into());
        let phi = self.fresh();
        self.lines.push(format!(
            "  {phi} = phi [{}, bb1], [{}, bb2]",
            arm_vals[0], arm_vals[1]
        ));
        self.emitted += 1;
        let mut scope = base.clone();
        scope.push((phi, None));
        for _ in 0..2 {
            if self.emitted >= self.cfg.max_instructions {
                break;
            }
            self.emit_one(&mut scope, &mut slots, helpers, 0.8);
        }
        if self.cfg.allow_loops && self.rng.gen_bool(0.5) {
            let cond = scope.choose(&mut self.rng).cloned().unwrap().0;
            self.lines.push(format!("  br {cond}, bb1, bb4"));
            self.lines.push("bb4:".into());
            self.lines.push("  ret".into());
        } else {
            self.lines.push("  ret".into());
        }
        self.lines.push("}".into());
    }

    /// Emit one instruction into the current block. `scope` holds the
    /// variables legal to use here; `slots` the alloca'd store targets.
    fn emit_one(
        &mut self,
        scope: &mut Vec<(String, Option<usize>)>,
        slots: &mut Vec<String>,
        helpers: &[(String, usize, bool)],
        damp: f64,
    ) {
        self.emitted += 1;
        let roll: f64 = self.rng.gen();

        // Always start from an allocation.
        if scope.is_empty() || roll < 0.18 {
            if self.rng.gen_bool(0.5) {
                let v = self.fresh();
                self.lines.push(format!("  {v} = alloca i64, 8"));
                slots.push(v.clone());
                scope.push((v, None));
            } else {
                let v = self.fresh();
                self.lines.push(format!("  {v} = malloc 64"));
                scope.push((v.clone(), None));
                // Frequently chain casts right after the allocation: this
                // is what makes objects carry several structure types.
                if !self.types.is_empty() && self.rng.gen_bool(self.cfg.p_cast * damp) {
                    let ti = self.pick_castable();
                    let c1 = self.fresh();
                    let t1 = &self.types[ti].name;
                    self.lines.push(format!("  {c1} = cast {t1}*, {v}"));
                    self.emitted += 1;
                    scope.push((c1.clone(), Some(ti)));
                    if self.rng.gen_bool((self.cfg.p_cast * 1.6).min(0.95)) {
                        let tj = self.pick_castable();
                        let c2 = self.fresh();
                        let t2 = &self.types[tj].name;
                        self.lines.push(format!("  {c2} = cast {t2}*, {c1}"));
                        self.emitted += 1;
                        scope.push((c2, Some(tj)));
                    }
                }
            }
            return;
        }

        let p_cast = self.cfg.p_cast * damp;
        let p_field = self.cfg.p_field * damp;
        let p_store = self.cfg.p_store * damp;
        let p_call = self.cfg.p_call * damp;

        if !self.types.is_empty() && self.rng.gen_bool(p_cast) {
            let (src, _) = scope.choose(&mut self.rng).cloned().unwrap();
            // Deliberate mismatches are allowed; most casts stay inside
            // the overlapping family.
            let ti = if self.rng.gen_bool(0.75) {
                self.pick_castable()
            } else {
                self.rng.gen_range(0..self.types.len())
            };
            let v = self.fresh();
            let t = &self.types[ti].name;
            self.lines.push(format!("  {v} = cast {t}*, {src}"));
            scope.push((v, Some(ti)));
            return;
        }

        if !self.types.is_empty() && self.rng.gen_bool(p_field) {
            // Prefer a pointer we cast earlier; field of its own type most
            // of the time, another type's field for the filter-miss case.
            let cast_ptrs: Vec<(String, usize)> = scope
                .iter()
                .filter_map(|(v, t)| t.map(|ti| (v.clone(), ti)))
                .collect();
            let (src, ti) = match cast_ptrs.choose(&mut self.rng) {
                Some(p) => p.clone(),
                None => (
                    scope.choose(&mut self.rng).cloned().unwrap().0,
                    self.rng.gen_range(0..self.types.len()),
                ),
            };
            let fld_ty = if self.rng.gen_bool(0.6) {
                ti
            } else {
                self.rng.gen_range(0..self.types.len())
            };
            let tyrec = &self.types[fld_ty];
            let fld = tyrec.fields.choose(&mut self.rng).unwrap().clone();
            let v = self.fresh();
            self.lines.push(format!("  {v} = field {src}, {fld}"));
            scope.push((v, None));
            return;
        }

        if !slots.is_empty() && self.rng.gen_bool(p_store) {
            let slot = slots.choose(&mut self.rng).cloned().unwrap();
            let (val, _) = scope.choose(&mut self.rng).cloned().unwrap();
            self.lines.push(format!("  store {slot}, {val}"));
            // Half the time read it back immediately.
            if self.rng.gen_bool(0.5) && self.emitted < self.cfg.max_instructions {
                let v = self.fresh();
                self.lines.push(format!("  {v} = load {slot}"));
                self.emitted += 1;
                scope.push((v, None));
            }
            return;
        }

        if !helpers.is_empty() && self.rng.gen_bool(p_call) {
            let (name, n_params, returns_ptr) =
                helpers.choose(&mut self.rng).cloned().unwrap();
            if self.rng.gen_bool(0.15) {
                // Call it through memory: a function pointer round-trip.
                let slot = self.fresh();
                let fp = self.fresh();
                self.lines.push(format!("  {slot} = alloca i64, 8"));
                self.lines.push(format!("  store {slot}, {name}"));
                self.lines.push(format!("  {fp} = load {slot}"));
                self.emitted += 3;
                let args: Vec<String> = (0..n_params)
                    .map(|_| scope.choose(&mut self.rng).cloned().unwrap().0)
                    .collect();
                let v = self.fresh();
                self.lines.push(format!("  {v} = call {fp}({})", args.join(", ")));
                scope.push((v, None));
            } else {
                let args: Vec<String> = (0..n_params)
                    .map(|_| scope.choose(&mut self.rng).cloned().unwrap().0)
                    .collect();
                if returns_ptr {
                    let v = self.fresh();
                    self.lines.push(format!("  {v} = call {name}({})", args.join(", ")));
                    scope.push((v, None));
                } else {
                    self.lines.push(format!("  call {name}({})", args.join(", ")));
                }
            }
            return;
        }

        if !self.classes.is_empty() && self.rng.gen_bool(0.25) {
            let v = self.fresh();
            self.lines.push(format!("  {v} = malloc 64"));
            let cls = if self.rng.gen_bool(0.6) { "CD" } else { "CL" };
            self.lines.push(format!("  constructor {cls}, {v}"));
            self.emitted += 1;
            scope.push((v.clone(), None));
            if self.rng.gen_bool(0.7) && self.emitted < self.cfg.max_instructions {
                let target = ["CB", "CL", "CR"].choose(&mut self.rng).unwrap();
                let d = self.fresh();
                self.lines.push(format!("  {d} = dyncast {target}*, {v}"));
                self.emitted += 1;
                scope.push((d, None));
            }
            return;
        }

        // Fallback: array access or a plain copy.
        let (src, _) = scope.choose(&mut self.rng).cloned().unwrap();
        if self.rng.gen_bool(0.3) {
            let v = self.fresh();
            if self.rng.gen_bool(0.5) {
                let idx = self.rng.gen_range(0..4u64);
                self.lines.push(format!("  {v} = array {src}, {idx}"));
            } else {
                let (iv, _) = scope.choose(&mut self.rng).cloned().unwrap();
                self.lines.push(format!("  {v} = array {src}, {iv}"));
            }
            scope.push((v, None));
        } else {
            let v = self.fresh();
            self.lines.push(format!("  {v} = {src}"));
            scope.push((v, None));
        }
    }

    fn pick_castable(&mut self) -> usize {
        let castable: Vec<usize> = self
            .types
            .iter()
            .enumerate()
            .filter(|(_, t)| t.castable)
            .map(|(i, _)| i)
            .collect();
        if castable.is_empty() {
            self.rng.gen_range(0..self.types.len())
        } else {
            *castable.choose(&mut self.rng).unwrap()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::cfg::build_cfg;
    use crate::ir::InstrKind;

    #[test]
    fn same_seed_means_identical_source() {
        let cfg = GenConfig { seed: 42, ..GenConfig::default() };
        assert_eq!(generate_source(&cfg), generate_source(&cfg));
    }

    #[test]
    fn different_seeds_differ() {
        let a = generate_source(&GenConfig { seed: 1, ..GenConfig::default() });
        let b = generate_source(&GenConfig { seed: 2, ..GenConfig::default() });
        assert_ne!(a, b);
    }

    #[test]
    fn zero_cast_probability_means_no_casts() {
        for seed in 0..10 {
            let prog = generate(&GenConfig { seed, p_cast: 0.0, ..GenConfig::default() });
            for (_, instr) in prog.all_instrs() {
                assert!(!matches!(instr.kind, InstrKind::Cast { .. }));
            }
        }
    }

    #[test]
    fn every_seed_validates() {
        for seed in 0..100 {
            let _ = generate(&GenConfig { seed, ..GenConfig::default() });
        }
    }

    #[test]
    fn loop_free_configs_generate_acyclic_cfgs() {
        for seed in 0..50 {
            let prog =
                generate(&GenConfig { seed, allow_loops: false, ..GenConfig::default() });
            for f in &prog.functions {
                let cfg = build_cfg(f);
                // Forward-only edges: every successor has a higher index.
                for (bi, succs) in cfg.succs.iter().enumerate() {
                    for s in succs {
                        assert!(
                            (s.0 as usize) > bi,
                            "seed {seed}: back edge {} -> {} in @{}",
                            bi,
                            s.0,
                            f.name
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn loops_do_appear_when_allowed() {
        let mut saw_back_edge = false;
        for seed in 0..30 {
            let prog =
                generate(&GenConfig { seed, allow_loops: true, ..GenConfig::default() });
            for f in &prog.functions {
                let cfg = build_cfg(f);
                for (bi, succs) in cfg.succs.iter().enumerate() {
                    if succs.iter().any(|s| (s.0 as usize) <= bi) {
                        saw_back_edge = true;
                    }
                }
            }
        }
        assert!(saw_back_edge);
    }

    #[test]
    fn multi_structure_objects_are_common() {
        use crate::layout::compute_layouts;
        use crate::memssa;
        use crate::objects::ObjectStore;
        use crate::solver::{solve, Mode, SolveOptions};

        let mut hits = 0;
        for seed in 0..100 {
            let cfg = GenConfig { seed, ..GenConfig::default() };
            let prog = generate(&cfg);
            let layouts = compute_layouts(&prog).unwrap();
            let mut store = ObjectStore::seeded(&prog);
            let pre = crate::andersen::analyze(&prog, &mut store);
            let mr = memssa::mod_ref(&prog, &store, &pre);
            let annots = memssa::place_versions(&prog, &store, &pre, &mr);
            let vfg = memssa::build_vfg(&prog, &pre, &annots);
            let sing = crate::singletons::classify(&prog, &store, &pre);
            let opts = SolveOptions { mode: Mode::MtoSs, ..SolveOptions::default() };
            let sol =
                solve(&prog, &layouts, &mut store, &pre, &mr, &annots, &vfg, &sing, &opts)
                    .unwrap();
            let multi = (0..prog.n_labels())
                .any(|n| sol.types_at(n).values().any(|ts| ts.len() >= 2));
            if multi {
                hits += 1;
            }
        }
        assert!(hits >= 50, "only {hits}/100 corpora had a multi-structure object");
    }
}
