//! Structure-flow-sensitive worklist solver over the value-flow graph.
//!
//! Every node recomputes its outputs from its current inputs on each visit
//! (replace semantics, not accumulation): with an acyclic VFG this makes the
//! fixed point independent of worklist order even though strong updates are
//! not monotone step-by-step. Per-node outputs are the values of the variables
//! the node defines, the memory cells it versions, the type sets it carries,
//! and — for calls — the resolved target set.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use serde::Serialize;

use crate::andersen::AndersenResult;
use crate::ir::{FnId, IRProgram, Label, TypeRef, VarId};
use crate::layout::LayoutTable;
use crate::memssa::{Annots, ModRef, VNode, Ver, VerSite, Vfg};
use crate::objects::{ObjId, ObjSet, ObjectStore};
use crate::singletons::Singletons;

mod transfer;

pub use transfer::{apply_store, store_strong_ok};

/// Analysis flavor: the full structure-flow-sensitive engine, or the
/// baseline that never tracks type sets and so never filters sub-object
/// creation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Mode {
    #[serde(rename = "mto-ss")]
    MtoSs,
    #[serde(rename = "sparse")]
    Sparse,
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mto-ss" => Ok(Mode::MtoSs),
            "sparse" => Ok(Mode::Sparse),
            other => Err(format!("unknown mode `{other}` (expected mto-ss or sparse)")),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::MtoSs => "mto-ss",
            Mode::Sparse => "sparse",
        })
    }
}

#[derive(Debug, Clone)]
pub struct SolveOptions {
    pub mode: Mode,
    /// Node-visit cap; exceeding it aborts the solve.
    pub budget: u64,
    /// When set, the initial worklist order is shuffled with this seed.
    /// Results must not depend on it; tests exercise that.
    pub shuffle_seed: Option<u64>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions { mode: Mode::MtoSs, budget: 2_000_000, shuffle_seed: None }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SolveError {
    #[error("visit budget exhausted after {visits} node visits")]
    Budget { visits: u64 },
    #[error("internal invariant violated: {0}")]
    Internal(String),
}

/// Memory cells of one base object: cell object -> contents. Empty cells
/// are never stored, so equal states compare equal structurally.
pub type CellMap = BTreeMap<ObjId, ObjSet>;

/// Per-node type sets: object -> aggregate types it may carry at the node.
pub type TypeMap = BTreeMap<ObjId, BTreeSet<TypeRef>>;

/// Fixed point of one solve.
pub struct Solution {
    pub mode: Mode,
    pub visits: u64,
    /// Final value of every SSA variable (per-def, which is per-node).
    vals: Vec<ObjSet>,
    /// Per-node type sets.
    tmap: Vec<TypeMap>,
    /// Per-node memory out-state, keyed by base object.
    mem_out: Vec<BTreeMap<ObjId, CellMap>>,
    /// Call-node snapshot of memory flowing into the call, keyed by base.
    premem: HashMap<usize, BTreeMap<ObjId, CellMap>>,
    /// Resolved callees per call node.
    resolved: HashMap<usize, BTreeSet<FnId>>,
    /// Constructor-recorded initial types, per base object.
    init_t: BTreeMap<ObjId, BTreeSet<TypeRef>>,
    /// Indirect calls that resolved to no target.
    pub warnings: Vec<String>,
}

impl Solution {
    pub fn pt(&self, v: VarId) -> &ObjSet {
        &self.vals[v.0 as usize]
    }

    pub fn types_at(&self, node: usize) -> &TypeMap {
        &self.tmap[node]
    }

    pub fn types_at_label(&self, l: Label) -> &TypeMap {
        &self.tmap[l.0 as usize]
    }

    pub fn mem_at(&self, node: usize) -> &BTreeMap<ObjId, CellMap> {
        &self.mem_out[node]
    }

    pub fn premem_at(&self, node: usize) -> Option<&BTreeMap<ObjId, CellMap>> {
        self.premem.get(&node)
    }

    pub fn init_t(&self) -> &BTreeMap<ObjId, BTreeSet<TypeRef>> {
        &self.init_t
    }

    pub fn init_t_of(&self, base: ObjId) -> Option<&BTreeSet<TypeRef>> {
        self.init_t.get(&base)
    }

    pub fn resolved_at(&self, l: Label) -> Option<&BTreeSet<FnId>> {
        self.resolved.get(&(l.0 as usize))
    }

    /// All type sets anywhere in the final state, flattened.
    pub fn all_types(&self) -> BTreeSet<TypeRef> {
        let mut out = BTreeSet::new();
        for m in &self.tmap {
            for ts in m.values() {
                out.extend(ts.iter().copied());
            }
        }
        out
    }

    /// Name-keyed rendering of the final state. Object identities are
    /// rendered through their allocation sites, so two solves of the same
    /// program compare equal even if interning order differed.
    pub fn dump(&self, prog: &IRProgram, store: &ObjectStore, vfg: &Vfg) -> StateDump {
        let mut pt: BTreeMap<String, BTreeMap<String, Vec<String>>> = BTreeMap::new();
        for (vi, set) in self.vals.iter().enumerate() {
            let v = VarId(vi as u32);
            let node = match prog.var(v).def {
                crate::ir::DefSite::Instr(l) => format!("{l}"),
                crate::ir::DefSite::Param(f, _) => format!("@{}:entry", prog.function(f).name),
            };
            pt.entry(node)
                .or_default()
                .insert(prog.var_name(v), set.iter().map(|&o| store.name(prog, o)).collect());
        }
        let mut pt_t: BTreeMap<String, BTreeMap<String, Vec<String>>> = BTreeMap::new();
        for (id, m) in self.tmap.iter().enumerate() {
            if m.is_empty() {
                continue;
            }
            let key = node_name(prog, store, vfg.node(id));
            let entry = pt_t.entry(key).or_default();
            for (&o, ts) in m {
                entry.insert(
                    store.name(prog, o),
                    ts.iter().map(|t| type_name(prog, *t)).collect(),
                );
            }
        }
        let pt_init_t = self
            .init_t
            .iter()
            .map(|(&o, ts)| {
                (store.name(prog, o), ts.iter().map(|t| type_name(prog, *t)).collect())
            })
            .collect();
        StateDump { mode: self.mode, pt, pt_t, pt_init_t }
    }
}

/// Serializable final-state snapshot, keyed by node id renderings.
#[derive(Debug, PartialEq, Eq, Serialize)]
pub struct StateDump {
    pub mode: Mode,
    pub pt: BTreeMap<String, BTreeMap<String, Vec<String>>>,
    pub pt_t: BTreeMap<String, BTreeMap<String, Vec<String>>>,
    #[serde(rename = "pt_initT")]
    pub pt_init_t: BTreeMap<String, Vec<String>>,
}

pub fn node_name(prog: &IRProgram, store: &ObjectStore, n: VNode) -> String {
    match n {
        VNode::Instr(l) => format!("{l}"),
        VNode::Entry(f) => format!("@{}:entry", prog.function(f).name),
        VNode::MemPhi(f, bb, o) => format!(
            "@{}:{}:memphi({})",
            prog.function(f).name,
            prog.function(f).blocks[bb.0 as usize].name,
            store.name(prog, o)
        ),
    }
}

pub fn type_name(prog: &IRProgram, t: TypeRef) -> String {
    match t {
        TypeRef::Prim(p) => p.name().to_string(),
        TypeRef::Named(id) => prog.type_def(id).name.clone(),
    }
}

pub(crate) struct Engine<'a> {
    pub prog: &'a IRProgram,
    pub layouts: &'a LayoutTable,
    pub store: &'a mut ObjectStore,
    pub pre: &'a AndersenResult,
    pub mr: &'a ModRef,
    pub annots: &'a Annots,
    pub vfg: &'a Vfg,
    pub sing: &'a Singletons,
    pub mode: Mode,

    pub vals: Vec<ObjSet>,
    pub tmap: Vec<TypeMap>,
    pub mem_out: Vec<BTreeMap<ObjId, CellMap>>,
    pub premem: HashMap<usize, BTreeMap<ObjId, CellMap>>,
    pub resolved: HashMap<usize, BTreeSet<FnId>>,
    pub ret_vals: HashMap<usize, ObjSet>,
    pub call_args: HashMap<usize, Vec<ObjSet>>,
    pub init_contrib: HashMap<usize, BTreeMap<ObjId, BTreeSet<TypeRef>>>,
    pub init_t: BTreeMap<ObjId, BTreeSet<TypeRef>>,

    /// Defining node of each variable.
    pub def_node: Vec<usize>,
    /// Ret-instruction nodes per function.
    pub rets_of: HashMap<FnId, Vec<usize>>,
    /// Candidate call nodes per callee, from the pre-analysis call graph.
    pub callers_of: HashMap<FnId, Vec<usize>>,
    pub internal_error: Option<String>,
}

/// What a node visit changed, as seen from the scheduler.
#[derive(Default)]
pub(crate) struct StepChange {
    pub outputs: bool,
    pub init_t: bool,
}

pub fn solve(
    prog: &IRProgram,
    layouts: &LayoutTable,
    store: &mut ObjectStore,
    pre: &AndersenResult,
    mr: &ModRef,
    annots: &Annots,
    vfg: &Vfg,
    sing: &Singletons,
    opts: &SolveOptions,
) -> Result<Solution, SolveError> {
    let n = vfg.len();
    let n_vars = prog.vars.len();

    let mut def_node = vec![usize::MAX; n_vars];
    for (vi, info) in prog.vars.iter().enumerate() {
        def_node[vi] = match info.def {
            crate::ir::DefSite::Instr(l) => l.0 as usize,
            crate::ir::DefSite::Param(f, _) => vfg.id(VNode::Entry(f)),
        };
    }

    let mut rets_of: HashMap<FnId, Vec<usize>> = HashMap::new();
    let mut dyncast_nodes = Vec::new();
    for (owner, instr) in prog.all_instrs() {
        match instr.kind {
            crate::ir::InstrKind::Ret { .. } => {
                rets_of.entry(owner.expect("ret at module scope")).or_default().push(instr.label.0 as usize);
            }
            crate::ir::InstrKind::DynCast { .. } => dyncast_nodes.push(instr.label.0 as usize),
            _ => {}
        }
    }
    let mut callers_of: HashMap<FnId, Vec<usize>> = HashMap::new();
    for (&l, targets) in &pre.call_targets {
        for &g in targets {
            callers_of.entry(g).or_default().push(l.0 as usize);
        }
    }
    for v in callers_of.values_mut() {
        v.sort_unstable();
    }

    let mut eng = Engine {
        prog,
        layouts,
        store,
        pre,
        mr,
        annots,
        vfg,
        sing,
        mode: opts.mode,
        vals: vec![ObjSet::new(); n_vars],
        tmap: vec![TypeMap::new(); n],
        mem_out: vec![BTreeMap::new(); n],
        premem: HashMap::new(),
        resolved: HashMap::new(),
        ret_vals: HashMap::new(),
        call_args: HashMap::new(),
        init_contrib: HashMap::new(),
        init_t: BTreeMap::new(),
        def_node,
        rets_of,
        callers_of,
        internal_error: None,
    };

    let mut order: Vec<usize> = (0..n).collect();
    if let Some(seed) = opts.shuffle_seed {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
    }
    let mut queue: VecDeque<usize> = order.into();
    let mut queued = vec![true; n];
    let mut visits: u64 = 0;

    let trace = std::env::var("STRUCTFLOW_TRACE").is_ok();
    let mut per_node = vec![0u64; n];
    while let Some(id) = queue.pop_front() {
        queued[id] = false;
        visits += 1;
        per_node[id] += 1;
        if visits > opts.budget {
            if trace {
                let mut hot: Vec<(u64, usize)> =
                    per_node.iter().enumerate().map(|(i, &c)| (c, i)).collect();
                hot.sort_unstable_by(|a, b| b.cmp(a));
                for (c, i) in hot.into_iter().take(12) {
                    eprintln!("node {i} visited {c} times");
                }
            }
            return Err(SolveError::Budget { visits });
        }
        let change = eng.transfer_node(id);
        if trace && change.outputs && per_node[id] > 50 && per_node[id] % 97 == 0 {
            eprintln!(
                "node {id} changed on visit {} (tmap {} entries, val sizes near)",
                per_node[id],
                eng.tmap[id].len()
            );
        }
        if let Some(msg) = eng.internal_error.take() {
            return Err(SolveError::Internal(msg));
        }
        if change.outputs {
            let push = |t: usize, queue: &mut VecDeque<usize>, queued: &mut Vec<bool>| {
                if !queued[t] {
                    queued[t] = true;
                    queue.push_back(t);
                }
            };
            for &s in eng.vfg.succs_of(id) {
                push(s, &mut queue, &mut queued);
            }
            for &(s, (l, g)) in eng.vfg.gated_succs_of(id) {
                let open = eng
                    .resolved
                    .get(&(l.0 as usize))
                    .is_some_and(|r| r.contains(&g));
                if open {
                    push(s, &mut queue, &mut queued);
                }
            }
        }
        if change.init_t {
            for &d in &dyncast_nodes {
                if !queued[d] {
                    queued[d] = true;
                    queue.push_back(d);
                }
            }
        }
    }

    let mut warnings = Vec::new();
    for (_, instr) in prog.all_instrs() {
        if let crate::ir::InstrKind::Call { callee: crate::ir::Callee::Indirect(_), .. } =
            instr.kind
        {
            let id = instr.label.0 as usize;
            if eng.resolved.get(&id).map(|r| r.is_empty()).unwrap_or(true) {
                warnings.push(format!("call at {} resolved to no targets", instr.label));
            }
        }
    }
    Ok(Solution {
        mode: opts.mode,
        visits,
        vals: eng.vals,
        tmap: eng.tmap,
        mem_out: eng.mem_out,
        premem: eng.premem,
        resolved: eng.resolved,
        init_t: eng.init_t,
        warnings,
    })
}

impl Engine<'_> {
    /// Node that defines version `ver` of base `b` in `f`, if any.
    pub(crate) fn mem_def(&self, f: FnId, b: ObjId, ver: Ver) -> Option<usize> {
        let site = *self.annots.fn_mem(f).vers.get(&b)?.get(ver as usize)?;
        if site == VerSite::Initial {
            return None;
        }
        self.vfg.get(self.vfg.ver_def(f, b, site)?)
    }

    /// Cells of `b` flowing out of `node`, cloned.
    pub(crate) fn cells_out(&self, node: usize, b: ObjId) -> CellMap {
        self.mem_out[node].get(&b).cloned().unwrap_or_default()
    }

}

#[cfg(test)]
mod tests;
