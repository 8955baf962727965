//! Loop discovery on the CFG: dominator-based back edges and a nested
//! loop forest built from strongly connected components.
//!
//! A loop is a non-trivial SCC (more than one block, or one block with a
//! self edge). Nesting is found by deleting the member→header edges of a
//! detected loop and re-running the SCC search inside its member set; what
//! remains cyclic is a child loop. Headers, member sets and the recursion
//! are all computed on block ids, which are themselves ordered by start
//! address, so the whole forest is deterministic for a given CFG.

use std::collections::{BTreeMap, BTreeSet};

use serde_json::json;

use crate::cfg::{BlockId, Cfg};

/// Index of a loop within its [`LoopForest`]; ids rank loops by header
/// start address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LoopId(pub usize);

#[derive(Debug, Clone)]
pub struct LoopStructure {
    pub id: LoopId,
    /// The member that external edges enter through (see module docs for
    /// the irreducible-region tie-breaks).
    pub header: BlockId,
    /// Every block in the loop, children included.
    pub members: BTreeSet<BlockId>,
    pub children: Vec<LoopId>,
    pub parent: Option<LoopId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LoopDiag {
    /// The loop has several entry blocks; the lowest-address one was
    /// chosen as header.
    MultiEntryLoop(LoopId),
}

#[derive(Debug, Clone, Default)]
pub struct LoopForest {
    /// `loops[i].id == LoopId(i)`.
    pub loops: Vec<LoopStructure>,
    /// Top-level loops, ascending by header address.
    pub roots: Vec<LoopId>,
    pub diagnostics: Vec<LoopDiag>,
}

impl LoopForest {
    pub fn len(&self) -> usize {
        self.loops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.loops.is_empty()
    }

    pub fn get(&self, id: LoopId) -> &LoopStructure {
        &self.loops[id.0]
    }

    /// The innermost loop containing `b`, if any.
    pub fn innermost(&self, b: BlockId) -> Option<LoopId> {
        self.loops
            .iter()
            .filter(|l| l.members.contains(&b))
            .min_by_key(|l| l.members.len())
            .map(|l| l.id)
    }

    /// Loops containing `b`, outermost first.
    pub fn chain(&self, b: BlockId) -> Vec<LoopId> {
        let mut out = Vec::new();
        let mut cur = self.innermost(b);
        while let Some(id) = cur {
            out.push(id);
            cur = self.get(id).parent;
        }
        out.reverse();
        out
    }
}

/// Dominator sets over reachable blocks, as bit matrices.
/// `None` for unreachable blocks.
fn dominator_sets(g: &Cfg) -> Vec<Option<Vec<u64>>> {
    let n = g.blocks.len();
    let words = n.div_ceil(64);
    let reach = g.reachable();
    let full = {
        let mut v = vec![u64::MAX; words];
        if n % 64 != 0 {
            v[words - 1] = (1u64 << (n % 64)) - 1;
        }
        // Unreachable blocks never dominate anything.
        for (i, r) in reach.iter().enumerate() {
            if !r {
                v[i / 64] &= !(1u64 << (i % 64));
            }
        }
        v
    };
    let mut dom: Vec<Option<Vec<u64>>> = (0..n)
        .map(|i| {
            if !reach[i] {
                None
            } else if BlockId(i) == g.entry {
                let mut v = vec![0u64; words];
                v[i / 64] |= 1 << (i % 64);
                Some(v)
            } else {
                Some(full.clone())
            }
        })
        .collect();

    let preds: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            g.predecessors(BlockId(i))
                .into_iter()
                .map(|b| b.0)
                .filter(|&p| reach[p])
                .collect()
        })
        .collect();

    let mut changed = true;
    while changed {
        changed = false;
        for v in 0..n {
            if !reach[v] || BlockId(v) == g.entry {
                continue;
            }
            let mut next = full.clone();
            for &p in &preds[v] {
                let pd = dom[p].as_ref().unwrap();
                for (w, word) in next.iter_mut().enumerate() {
                    *word &= pd[w];
                }
            }
            next[v / 64] |= 1 << (v % 64);
            if dom[v].as_ref().unwrap() != &next {
                dom[v] = Some(next);
                changed = true;
            }
        }
    }
    dom
}

/// True when `a` dominates `b` (both must be reachable).
pub fn dominates(g: &Cfg, a: BlockId, b: BlockId) -> bool {
    let dom = dominator_sets(g);
    match &dom[b.0] {
        Some(set) => set[a.0 / 64] & (1 << (a.0 % 64)) != 0,
        None => false,
    }
}

/// All back edges: edges `u → v` between reachable blocks where `v`
/// dominates `u`. Sorted by (source, target).
pub fn back_edges(g: &Cfg) -> Vec<(BlockId, BlockId)> {
    let dom = dominator_sets(g);
    let mut out: BTreeSet<(BlockId, BlockId)> = BTreeSet::new();
    for e in &g.edges {
        if let Some(du) = &dom[e.from.0] {
            if dom[e.to.0].is_some() && du[e.to.0 / 64] & (1 << (e.to.0 % 64)) != 0 {
                out.insert((e.from, e.to));
            }
        }
    }
    out.into_iter().collect()
}

/// Successor sets of the whole CFG, deduplicated.
fn adjacency(g: &Cfg) -> Vec<BTreeSet<usize>> {
    let mut adj = vec![BTreeSet::new(); g.blocks.len()];
    for e in &g.edges {
        adj[e.from.0].insert(e.to.0);
    }
    adj
}

/// Tarjan's SCC algorithm, iterative, restricted to `nodes` and skipping
/// edges in `removed`. Components come back in a deterministic order.
fn sccs(
    nodes: &BTreeSet<usize>,
    adj: &[BTreeSet<usize>],
    removed: &BTreeSet<(usize, usize)>,
) -> Vec<Vec<usize>> {
    #[derive(Clone, Copy)]
    struct NodeState {
        index: u32,
        lowlink: u32,
        on_stack: bool,
        visited: bool,
    }
    let mut state: BTreeMap<usize, NodeState> = BTreeMap::new();
    let mut stack: Vec<usize> = Vec::new();
    let mut counter = 0u32;
    let mut comps: Vec<Vec<usize>> = Vec::new();

    for &start in nodes {
        if state.get(&start).is_some_and(|s| s.visited) {
            continue;
        }
        // Work stack of (node, successor iterator position).
        let mut work: Vec<(usize, Vec<usize>, usize)> = Vec::new();
        let succs = |v: usize| -> Vec<usize> {
            adj[v]
                .iter()
                .copied()
                .filter(|s| nodes.contains(s) && !removed.contains(&(v, *s)))
                .collect()
        };
        state.insert(
            start,
            NodeState { index: counter, lowlink: counter, on_stack: true, visited: true },
        );
        counter += 1;
        stack.push(start);
        work.push((start, succs(start), 0));

        while let Some((v, vsuccs, mut i)) = work.pop() {
            let mut descended = false;
            while i < vsuccs.len() {
                let w = vsuccs[i];
                i += 1;
                match state.get(&w) {
                    None => {
                        state.insert(
                            w,
                            NodeState {
                                index: counter,
                                lowlink: counter,
                                on_stack: true,
                                visited: true,
                            },
                        );
                        counter += 1;
                        stack.push(w);
                        work.push((v, vsuccs, i));
                        work.push((w, succs(w), 0));
                        descended = true;
                        break;
                    }
                    Some(ws) if ws.on_stack => {
                        let wi = ws.index;
                        let vs = state.get_mut(&v).unwrap();
                        vs.lowlink = vs.lowlink.min(wi);
                    }
                    Some(_) => {}
                }
            }
            if descended {
                continue;
            }
            let vs = *state.get(&v).unwrap();
            if vs.lowlink == vs.index {
                let mut comp = Vec::new();
                loop {
                    let w = stack.pop().unwrap();
                    state.get_mut(&w).unwrap().on_stack = false;
                    comp.push(w);
                    if w == v {
                        break;
                    }
                }
                comp.sort_unstable();
                comps.push(comp);
            }
            if let Some((p, _, _)) = work.last() {
                let p = *p;
                let vl = state.get(&v).unwrap().lowlink;
                let ps = state.get_mut(&p).unwrap();
                ps.lowlink = ps.lowlink.min(vl);
            }
        }
    }
    comps
}

struct ForestBuilder<'a> {
    g: &'a Cfg,
    adj: Vec<BTreeSet<usize>>,
    loops: Vec<LoopStructure>,
    diagnostics: Vec<LoopDiag>,
}

impl ForestBuilder<'_> {
    /// Pick the member external edges enter through, on the *original*
    /// graph. Several entries: lowest-address one, with a diagnostic.
    /// None (the region contains the function entry, or is sealed off):
    /// the function entry if it is a member, else the lowest member.
    fn choose_header(&mut self, members: &BTreeSet<usize>) -> (usize, bool) {
        let mut entries: BTreeSet<usize> = BTreeSet::new();
        for (u, succs) in self.adj.iter().enumerate() {
            if members.contains(&u) {
                continue;
            }
            for s in succs {
                if members.contains(s) {
                    entries.insert(*s);
                }
            }
        }
        match entries.len() {
            1 => (*entries.iter().next().unwrap(), false),
            0 => {
                if members.contains(&self.g.entry.0) {
                    (self.g.entry.0, false)
                } else {
                    (*members.iter().next().unwrap(), false)
                }
            }
            _ => (*entries.iter().next().unwrap(), true),
        }
    }

    fn recurse(
        &mut self,
        nodes: &BTreeSet<usize>,
        removed: &BTreeSet<(usize, usize)>,
        parent: Option<usize>,
    ) -> Vec<usize> {
        let mut found = Vec::new();
        for comp in sccs(nodes, &self.adj, removed) {
            let nontrivial = comp.len() > 1
                || (self.adj[comp[0]].contains(&comp[0])
                    && !removed.contains(&(comp[0], comp[0])));
            if !nontrivial {
                continue;
            }
            let members: BTreeSet<usize> = comp.into_iter().collect();
            let (header, multi) = self.choose_header(&members);
            let idx = self.loops.len();
            self.loops.push(LoopStructure {
                id: LoopId(idx),
                header: BlockId(header),
                members: members.iter().map(|&m| BlockId(m)).collect(),
                children: Vec::new(),
                parent: parent.map(LoopId),
            });
            if multi {
                self.diagnostics.push(LoopDiag::MultiEntryLoop(LoopId(idx)));
            }
            let mut inner_removed = removed.clone();
            for &m in &members {
                if self.adj[m].contains(&header) {
                    inner_removed.insert((m, header));
                }
            }
            let children = self.recurse(&members, &inner_removed, Some(idx));
            self.loops[idx].children = children.into_iter().map(LoopId).collect();
            found.push(idx);
        }
        found
    }
}

/// Detect every loop in the CFG and arrange them into a nesting forest.
pub fn detect_loops(g: &Cfg) -> LoopForest {
    let mut b = ForestBuilder {
        g,
        adj: adjacency(g),
        loops: Vec::new(),
        diagnostics: Vec::new(),
    };
    let all: BTreeSet<usize> = (0..g.blocks.len()).collect();
    let roots = b.recurse(&all, &BTreeSet::new(), None);

    // Renumber so ids rank headers by start address. Headers are unique
    // across the forest, so the rank is total.
    let mut order: Vec<usize> = (0..b.loops.len()).collect();
    order.sort_by_key(|&i| g.blocks[b.loops[i].header.0].start);
    let mut rank = vec![0usize; b.loops.len()];
    for (new, &old) in order.iter().enumerate() {
        rank[old] = new;
    }
    let remap = |id: LoopId| LoopId(rank[id.0]);

    let mut loops: Vec<Option<LoopStructure>> = vec![None; b.loops.len()];
    for (old, mut l) in b.loops.into_iter().enumerate() {
        l.id = remap(l.id);
        l.parent = l.parent.map(remap);
        l.children = l.children.into_iter().map(remap).collect();
        l.children.sort_unstable();
        loops[rank[old]] = Some(l);
    }
    let mut roots: Vec<LoopId> = roots.into_iter().map(|r| LoopId(rank[r])).collect();
    roots.sort_unstable();
    let diagnostics = b
        .diagnostics
        .into_iter()
        .map(|LoopDiag::MultiEntryLoop(id)| LoopDiag::MultiEntryLoop(remap(id)))
        .collect();

    LoopForest {
        loops: loops.into_iter().map(Option::unwrap).collect(),
        roots,
        diagnostics,
    }
}

/// JSON view of a forest (addresses instead of block ids, so it is
/// meaningful without the CFG).
pub fn forest_to_json(forest: &LoopForest, g: &Cfg) -> serde_json::Value {
    let loops: Vec<serde_json::Value> = forest
        .loops
        .iter()
        .map(|l| {
            json!({
                "id": l.id.0,
                "header": format!("{:#x}", g.blocks[l.header.0].start),
                "members": l.members.iter()
                    .map(|b| format!("{:#x}", g.blocks[b.0].start))
                    .collect::<Vec<_>>(),
                "children": l.children.iter().map(|c| c.0).collect::<Vec<_>>(),
                "parent": l.parent.map(|p| p.0),
            })
        })
        .collect();
    json!({
        "roots": forest.roots.iter().map(|r| r.0).collect::<Vec<_>>(),
        "loops": loops,
    })
}
