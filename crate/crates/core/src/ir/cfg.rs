//! Per-function control-flow graph, dominator tree and dominance
//! frontiers. Block 0 is always the entry block.

use super::{BlockId, IRFunction, InstrKind};
use petgraph::algo::{dominators, tarjan_scc};
use petgraph::graph::{DiGraph, NodeIndex};

#[derive(Debug, Clone)]
pub struct Cfg {
    pub succs: Vec<Vec<BlockId>>,
    pub preds: Vec<Vec<BlockId>>,
}

/// Build the CFG from block terminators. Assumes each block ends with a
/// terminator (the validator reports violations before analyses run).
pub fn build_cfg(f: &IRFunction) -> Cfg {
    let n = f.blocks.len();
    let mut succs = vec![Vec::new(); n];
    let mut preds = vec![Vec::new(); n];
    for (bi, block) in f.blocks.iter().enumerate() {
        let Some(last) = block.instrs.last() else { continue };
        let targets: Vec<BlockId> = match &last.kind {
            InstrKind::Br { then_dest, else_dest, .. } => vec![*then_dest, *else_dest],
            InstrKind::Jmp { target } => vec![*target],
            _ => vec![],
        };
        for t in targets {
            succs[bi].push(t);
            preds[t.0 as usize].push(BlockId(bi as u32));
        }
    }
    Cfg { succs, preds }
}

impl Cfg {
    pub fn n_blocks(&self) -> usize {
        self.succs.len()
    }

    /// Blocks reachable from the entry.
    pub fn reachable(&self) -> Vec<bool> {
        let mut seen = vec![false; self.n_blocks()];
        if self.n_blocks() == 0 {
            return seen;
        }
        let mut stack = vec![BlockId(0)];
        seen[0] = true;
        while let Some(b) = stack.pop() {
            for s in &self.succs[b.0 as usize] {
                if !seen[s.0 as usize] {
                    seen[s.0 as usize] = true;
                    stack.push(*s);
                }
            }
        }
        seen
    }

    /// True for each block that lies on some CFG cycle.
    pub fn in_cycle(&self) -> Vec<bool> {
        let mut g: DiGraph<(), ()> = DiGraph::new();
        let nodes: Vec<NodeIndex> = (0..self.n_blocks()).map(|_| g.add_node(())).collect();
        for (bi, ss) in self.succs.iter().enumerate() {
            for s in ss {
                g.add_edge(nodes[bi], nodes[s.0 as usize], ());
            }
        }
        let mut out = vec![false; self.n_blocks()];
        for scc in tarjan_scc(&g) {
            if scc.len() > 1 {
                for n in scc {
                    out[n.index()] = true;
                }
            } else if let Some(&n) = scc.first() {
                if g.contains_edge(n, n) {
                    out[n.index()] = true;
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct DomTree {
    /// Immediate dominator per block (entry has none). `None` also for
    /// unreachable blocks.
    pub idom: Vec<Option<BlockId>>,
    pub children: Vec<Vec<BlockId>>,
}

pub fn dominator_tree(cfg: &Cfg) -> DomTree {
    let n = cfg.n_blocks();
    let mut g: DiGraph<(), ()> = DiGraph::new();
    let nodes: Vec<NodeIndex> = (0..n).map(|_| g.add_node(())).collect();
    for (bi, ss) in cfg.succs.iter().enumerate() {
        for s in ss {
            g.add_edge(nodes[bi], nodes[s.0 as usize], ());
        }
    }
    let mut idom = vec![None; n];
    let mut children = vec![Vec::new(); n];
    if n > 0 {
        let doms = dominators::simple_fast(&g, nodes[0]);
        for (bi, node) in nodes.iter().enumerate() {
            if bi == 0 {
                continue;
            }
            if let Some(d) = doms.immediate_dominator(*node) {
                let db = BlockId(d.index() as u32);
                idom[bi] = Some(db);
                children[d.index()].push(BlockId(bi as u32));
            }
        }
    }
    DomTree { idom, children }
}

impl DomTree {
    /// Does `a` dominate `b`? (Reflexive.)
    pub fn dominates(&self, a: BlockId, b: BlockId) -> bool {
        let mut cur = Some(b);
        while let Some(c) = cur {
            if c == a {
                return true;
            }
            cur = self.idom[c.0 as usize];
        }
        false
    }
}

/// Standard dominance-frontier computation from immediate dominators.
pub fn dominance_frontiers(cfg: &Cfg, dt: &DomTree) -> Vec<Vec<BlockId>> {
    let n = cfg.n_blocks();
    let mut df: Vec<std::collections::BTreeSet<BlockId>> = vec![Default::default(); n];
    for b in 0..n {
        if cfg.preds[b].len() < 2 {
            continue;
        }
        let Some(idom_b) = dt.idom[b] else { continue };
        for p in &cfg.preds[b] {
            let mut runner = *p;
            loop {
                if runner == idom_b {
                    break;
                }
                df[runner.0 as usize].insert(BlockId(b as u32));
                match dt.idom[runner.0 as usize] {
                    Some(next) => runner = next,
                    None => break, // unreachable pred
                }
            }
        }
    }
    df.into_iter().map(|s| s.into_iter().collect()).collect()
}
