//! Source-level abstract logic trees: nested logic blocks mirroring the
//! loop structure of a function, with `<<LOOP_k>>` marker instructions
//! standing in for each loop at its position in the parent's instruction
//! stream.
//!
//! The root block is the function body. Every loop becomes a child block
//! named by its marker; instructions inside a block are ordered by
//! address, and a marker sits where its loop's entry address falls in
//! that order. Serialization is line-oriented and self-contained enough
//! to parse back (`parse_salt`), which the eval harness and tests use.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use thiserror::Error;

use crate::cfg::{BlockId, Cfg};
use crate::ingest::render_opcode_text;
use crate::loops::{LoopForest, LoopId};
use crate::normalize::{offset_label, NormalizedFunction};
use crate::prompts::{estimate_tokens, PromptRole, PromptSet};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LogicItem {
    /// One instruction: absolute address plus its rendered text
    /// (mnemonic, operands, annotation).
    Ins { address: u64, text: String },
    /// A `<<LOOP_k>>` stand-in for a child block.
    Marker(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogicBlock {
    /// `<<FUNC name>>` carries the function name for the root;
    /// `<<LOOP_k>>` for loop blocks.
    pub name: String,
    pub items: Vec<LogicItem>,
    /// Child blocks in marker-index order.
    pub children: Vec<LogicBlock>,
}

impl LogicBlock {
    fn new(name: String) -> Self {
        LogicBlock {
            name,
            items: Vec::new(),
            children: Vec::new(),
        }
    }

    /// Addresses of all Ins items in this block only.
    pub fn own_addresses(&self) -> Vec<u64> {
        self.items
            .iter()
            .filter_map(|i| match i {
                LogicItem::Ins { address, .. } => Some(*address),
                LogicItem::Marker(_) => None,
            })
            .collect()
    }

    /// Every Ins address in this block and its descendants.
    pub fn all_addresses(&self) -> Vec<u64> {
        let mut out = self.own_addresses();
        for c in &self.children {
            out.extend(c.all_addresses());
        }
        out
    }

    /// Count of this block plus all descendants.
    pub fn descendant_count(&self) -> usize {
        self.children
            .iter()
            .map(|c| 1 + c.descendant_count())
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SaltDiag {
    /// Blocks unreachable from the entry were traversed separately and
    /// merged into the root; their start addresses.
    UnreachableResidue(Vec<u64>),
}

/// A constructed logic tree plus what serialization needs: the entry
/// address and the set of addresses that carry `L_0x...` labels.
#[derive(Debug, Clone)]
pub struct Salt {
    pub root: LogicBlock,
    pub entry: u64,
    pub marker_count: usize,
    pub label_targets: BTreeSet<u64>,
    pub diagnostics: Vec<SaltDiag>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SaltError {
    /// The rendered prompt was estimated at this many tokens, over budget.
    #[error("prompt estimated at {0} tokens exceeds the budget")]
    PromptTooLong(usize),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SaltParseError {
    #[error("line 1: expected a <<FUNC name>>: header")]
    BadHeader,
    #[error("line {0}: unrecognised line")]
    BadLine(usize),
    #[error("marker {0:?} has no matching block")]
    UnknownBlock(String),
    #[error("block {0:?} is never referenced by a marker")]
    UnboundBlock(String),
    #[error("block {0:?} defined twice")]
    DuplicateBlock(String),
}

/// Default cap on rendered prompt size, in estimated tokens.
pub const DEFAULT_TOKEN_BUDGET: usize = 4096;

struct Builder<'a> {
    g: &'a Cfg,
    forest: &'a LoopForest,
    nf: &'a NormalizedFunction,
    /// Arena of logic blocks being built. Index 0 is the root.
    names: Vec<String>,
    owned: Vec<Vec<BlockId>>,
    /// (sort key, child arena index) per parent, in creation order.
    children: Vec<Vec<(u64, usize)>>,
    visited: Vec<bool>,
    processed: Vec<bool>,
}

impl Builder<'_> {
    fn members(&self, l: LoopId) -> &BTreeSet<BlockId> {
        &self.forest.get(l).members
    }

    /// The outermost unprocessed loop containing `b`, looking only below
    /// `ctx` when inside a loop.
    fn topmost_unprocessed(&self, b: BlockId, ctx: Option<LoopId>) -> Option<LoopId> {
        let chain = self.forest.chain(b);
        let skip = match ctx {
            Some(l) => chain.iter().position(|&c| c == l).map_or(0, |p| p + 1),
            None => 0,
        };
        chain[skip..]
            .iter()
            .copied()
            .find(|&l| !self.processed[l.0])
    }

    fn visit(&mut self, b: BlockId, pb: usize, ctx: Option<LoopId>) {
        if let Some(l) = ctx {
            if !self.members(l).contains(&b) {
                // Left the current loop; the loop's creator picks this
                // block up through the out-node sweep.
                return;
            }
        }
        if let Some(lid) = self.topmost_unprocessed(b, ctx) {
            self.processed[lid.0] = true;
            // Marker names carry the forest id, which ranks loops by
            // header address, so names are stable under traversal order.
            let name = format!("<<LOOP_{}>>", lid.0);
            let child = self.names.len();
            self.names.push(name);
            self.owned.push(Vec::new());
            self.children.push(Vec::new());
            self.children[pb].push((self.g.blocks[b.0].start, child));

            // Walk the loop body from its entry, bounded to its members.
            self.visit(b, child, Some(lid));
            // Sub-loops sealed off from the entry (their headers lost all
            // in-edges when this loop's back edges were cut) still get
            // their own blocks.
            let subloops = self.forest.get(lid).children.clone();
            for sl in subloops {
                if !self.processed[sl.0] {
                    let h = self.forest.get(sl).header;
                    self.visit(h, child, Some(lid));
                }
            }
            // Resume outside the loop, in the parent block.
            let mut outs: BTreeSet<BlockId> = BTreeSet::new();
            for &m in self.members(lid).iter() {
                for s in self.g.successors(m) {
                    if !self.members(lid).contains(&s) {
                        outs.insert(s);
                    }
                }
            }
            for on in outs {
                self.visit(on, pb, ctx);
            }
        } else {
            if self.visited[b.0] {
                return;
            }
            self.visited[b.0] = true;
            self.owned[pb].push(b);
            for s in self.g.successors(b) {
                if let Some(l) = ctx {
                    if !self.members(l).contains(&s) {
                        continue;
                    }
                }
                self.visit(s, pb, ctx);
            }
        }
    }

    fn materialize(&self, idx: usize) -> LogicBlock {
        let f = &self.nf.base;
        let mut block = LogicBlock::new(self.names[idx].clone());
        // Merge owned instructions and child markers by address key; keys
        // are unique within one block (a marker's key address is owned by
        // the child subtree, never by this block).
        enum Entry {
            Ins(u64, String),
            Marker(u64, usize),
        }
        let mut entries: Vec<Entry> = Vec::new();
        for &bb in &self.owned[idx] {
            let (lo, hi) = self.g.blocks[bb.0].range;
            for ins in &f.instructions[lo..hi] {
                entries.push(Entry::Ins(ins.address, render_opcode_text(ins)));
            }
        }
        for &(key, child) in &self.children[idx] {
            entries.push(Entry::Marker(key, child));
        }
        entries.sort_by_key(|e| match *e {
            Entry::Ins(a, _) => a,
            Entry::Marker(a, _) => a,
        });
        for e in entries {
            match e {
                Entry::Ins(address, text) => {
                    block.items.push(LogicItem::Ins { address, text })
                }
                Entry::Marker(_, child) => block
                    .items
                    .push(LogicItem::Marker(self.names[child].clone())),
            }
        }
        // Children in marker-key (address) order, matching the order
        // their markers appear in the item stream.
        let mut kids = self.children[idx].clone();
        kids.sort_by_key(|&(key, _)| key);
        for (_, child) in kids {
            block.children.push(self.materialize(child));
        }
        block
    }
}

/// Build the logic tree for one function from its CFG, loop forest and
/// normalized instructions.
pub fn construct_salt(g: &Cfg, forest: &LoopForest, nf: &NormalizedFunction) -> Salt {
    let mut b = Builder {
        g,
        forest,
        nf,
        names: vec![format!("<<FUNC {}>>", nf.base.name)],
        owned: vec![Vec::new()],
        children: vec![Vec::new()],
        visited: vec![false; g.blocks.len()],
        processed: vec![false; forest.len()],
    };
    b.visit(g.entry, 0, None);

    // Anything the entry never reaches (data-in-code, stray residue) is
    // traversed the same way so its instructions — and any loops hiding
    // in it — still land in the tree, merged into the root by address.
    let mut residue = Vec::new();
    for i in 0..g.blocks.len() {
        if !b.visited[i] {
            residue.push(g.blocks[i].start);
            b.visit(BlockId(i), 0, None);
        }
    }

    let root = b.materialize(0);
    let mut diagnostics = Vec::new();
    if !residue.is_empty() {
        diagnostics.push(SaltDiag::UnreachableResidue(residue));
    }
    let salt = Salt {
        marker_count: root.descendant_count(),
        root,
        entry: nf.base.entry,
        label_targets: nf.offset_map.keys().copied().collect(),
        diagnostics,
    };
    debug_assert_eq!(
        salt.root.all_addresses().len(),
        nf.base.instructions.len(),
        "logic tree must cover every instruction exactly once"
    );
    salt
}

/// Render the tree as text: the root section under a `<<FUNC name>>:`
/// header, then each descendant block in depth-first, marker-index order,
/// separated by blank lines. Labelled addresses get an `L_0x...:` line
/// before their instruction.
pub fn serialize_salt(s: &Salt) -> String {
    let mut out = String::new();
    let emit_items = |out: &mut String, b: &LogicBlock| {
        for item in &b.items {
            match item {
                LogicItem::Ins { address, text } => {
                    if s.label_targets.contains(address) {
                        let _ = writeln!(out, "{}:", offset_label(s.entry, *address));
                    }
                    let _ = writeln!(out, "{:x}: {}", address, text);
                }
                LogicItem::Marker(name) => {
                    let _ = writeln!(out, "{name}");
                }
            }
        }
    };
    let _ = writeln!(out, "{}:", s.root.name);
    emit_items(&mut out, &s.root);
    let mut stack: Vec<&LogicBlock> = s.root.children.iter().rev().collect();
    while let Some(b) = stack.pop() {
        out.push('\n');
        let _ = writeln!(out, "{}:", b.name);
        emit_items(&mut out, b);
        for c in b.children.iter().rev() {
            stack.push(c);
        }
    }
    out
}

/// Read a serialized tree back. The entry address is recovered from any
/// `L_0x...:` label line (label offset against the following
/// instruction), falling back to the lowest instruction address.
pub fn parse_salt(text: &str) -> Result<Salt, SaltParseError> {
    struct RawBlock {
        name: String,
        items: Vec<LogicItem>,
    }
    let mut blocks: Vec<RawBlock> = Vec::new();
    let mut label_offsets: Vec<(u64, u64)> = Vec::new(); // (offset, address)

    let mut lines = text.lines().enumerate().peekable();
    match lines.next() {
        Some((_, first)) if first.starts_with("<<FUNC ") && first.ends_with(">>:") => {
            blocks.push(RawBlock {
                name: first[..first.len() - 1].to_string(),
                items: Vec::new(),
            });
        }
        _ => return Err(SaltParseError::BadHeader),
    }

    let mut pending_label: Option<String> = None;
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        if line.starts_with("<<LOOP_") {
            if let Some(name) = line.strip_suffix(':') {
                if !name.ends_with(">>") {
                    return Err(SaltParseError::BadLine(lineno));
                }
                blocks.push(RawBlock {
                    name: name.to_string(),
                    items: Vec::new(),
                });
            } else if line.ends_with(">>") {
                blocks
                    .last_mut()
                    .unwrap()
                    .items
                    .push(LogicItem::Marker(line.to_string()));
            } else {
                return Err(SaltParseError::BadLine(lineno));
            }
            continue;
        }
        if let Some(label) = line.strip_suffix(':') {
            if label.starts_with("L_0x")
                && label[4..].chars().all(|c| c.is_ascii_hexdigit())
                && !label[4..].is_empty()
            {
                pending_label = Some(label.to_string());
                continue;
            }
        }
        let Some(ins) = crate::ingest::parse_instruction_line(line) else {
            return Err(SaltParseError::BadLine(lineno));
        };
        if let Some(label) = pending_label.take() {
            let off = u64::from_str_radix(&label[4..], 16).unwrap();
            label_offsets.push((off, ins.address));
        }
        blocks.last_mut().unwrap().items.push(LogicItem::Ins {
            address: ins.address,
            text: render_opcode_text(&ins),
        });
    }

    // Assemble the tree: each named block hangs off the unique marker
    // bearing its name.
    let mut by_name: std::collections::BTreeMap<String, usize> = Default::default();
    for (i, b) in blocks.iter().enumerate().skip(1) {
        if by_name.insert(b.name.clone(), i).is_some() {
            return Err(SaltParseError::DuplicateBlock(b.name.clone()));
        }
    }
    let mut used = vec![false; blocks.len()];
    fn assemble(
        idx: usize,
        blocks: &[RawBlock],
        by_name: &std::collections::BTreeMap<String, usize>,
        used: &mut [bool],
    ) -> Result<LogicBlock, SaltParseError> {
        let mut out = LogicBlock::new(blocks[idx].name.clone());
        out.items = blocks[idx].items.clone();
        for item in &blocks[idx].items {
            if let LogicItem::Marker(name) = item {
                let &child = by_name
                    .get(name)
                    .ok_or_else(|| SaltParseError::UnknownBlock(name.clone()))?;
                if used[child] {
                    return Err(SaltParseError::DuplicateBlock(name.clone()));
                }
                used[child] = true;
                out.children
                    .push(assemble(child, blocks, by_name, used)?);
            }
        }
        Ok(out)
    }
    used[0] = true;
    let root = assemble(0, &blocks, &by_name, &mut used)?;
    if let Some(i) = (0..blocks.len()).find(|&i| !used[i]) {
        return Err(SaltParseError::UnboundBlock(blocks[i].name.clone()));
    }

    let all_addrs = root.all_addresses();
    let entry = match label_offsets.first() {
        Some(&(off, addr)) => addr - off,
        None => all_addrs.iter().copied().min().unwrap_or(0),
    };
    Ok(Salt {
        marker_count: root.descendant_count(),
        root,
        entry,
        label_targets: label_offsets.iter().map(|&(_, a)| a).collect(),
        diagnostics: Vec::new(),
    })
}

/// Render the decompilation prompt for a tree, refusing anything over the
/// token budget (estimated at four bytes per token).
pub fn render_prompt(s: &Salt, budget: usize) -> Result<String, SaltError> {
    let body = serialize_salt(s);
    let prompt = PromptSet::embedded()
        .render(PromptRole::Decompile, &[("SALT", &body)])
        .expect("decompile template binds exactly {SALT}");
    let estimate = estimate_tokens(&prompt);
    if estimate > budget {
        return Err(SaltError::PromptTooLong(estimate));
    }
    Ok(prompt)
}

/// The whole pure pipeline for one function: normalize jumps and data
/// references, build the graph, detect loops, construct the tree, and
/// serialize it.
pub fn salt_text(
    f: &crate::ingest::Function,
    data: &crate::ingest::DataImage,
) -> Result<String, crate::cfg::CfgError> {
    let nf = crate::normalize::normalize(f.clone(), data);
    let g = crate::cfg::build_cfg(&nf.base)?;
    let forest = crate::loops::detect_loops(&g);
    Ok(serialize_salt(&construct_salt(&g, &forest, &nf)))
}
