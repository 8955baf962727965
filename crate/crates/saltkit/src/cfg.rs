//! Control-flow recovery: slice a function into basic blocks, classify
//! block terminators, and wire fallthrough / taken / call-return edges.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::ingest::{Function, Instruction};

/// Index of a basic block within its [`Cfg`], in ascending start-address
/// order (the entry block is always `BlockId(0)`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct BlockId(pub usize);

/// How a basic block transfers control.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Terminator {
    /// Execution continues at the next address; nothing transfers control.
    Fallthrough,
    /// Unconditional jump to a literal address.
    Jump(u64),
    /// Conditional jump: taken to the literal address, else fallthrough.
    Branch(u64),
    /// Call, with the callee address when it is a literal.
    Call(Option<u64>),
    /// Return from the function.
    Ret,
    /// Jump through a register or memory cell; targets unknown.
    Indirect,
}

impl Terminator {
    /// True for anything that ends a block other than plain fallthrough.
    pub fn is_control_transfer(&self) -> bool {
        !matches!(self, Terminator::Fallthrough)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum EdgeKind {
    Fallthrough,
    Taken,
    CallReturn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Edge {
    pub from: BlockId,
    pub to: BlockId,
    pub kind: EdgeKind,
}

/// A maximal straight-line run of instructions. `range` indexes into the
/// originating function's instruction vector; only the last instruction
/// may transfer control.
#[derive(Debug, Clone)]
pub struct BasicBlock {
    pub id: BlockId,
    /// Address of the first instruction.
    pub start: u64,
    /// Half-open index range into `Function::instructions`.
    pub range: (usize, usize),
    pub terminator: Terminator,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CfgDiag {
    /// Block is not reachable from the entry along recovered edges.
    Unreachable(BlockId),
    /// An indirect jump at this address ends its block with no out-edges.
    IndirectJump(u64),
}

#[derive(Debug, Clone)]
pub struct Cfg {
    pub blocks: Vec<BasicBlock>,
    pub edges: Vec<Edge>,
    pub entry: BlockId,
    pub diagnostics: Vec<CfgDiag>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CfgError {
    /// A literal in-function jump target that is not any instruction's
    /// address (it points into the middle of an encoded instruction).
    #[error("jump target {0:#x} is not an instruction boundary")]
    DanglingTarget(u64),
}

/// Conditional-jump mnemonics (jcc family plus the loop counters).
fn is_conditional(mnemonic: &str) -> bool {
    matches!(
        mnemonic,
        "ja" | "jae" | "jb" | "jbe" | "jc" | "je" | "jg" | "jge" | "jl" | "jle" | "jna"
            | "jnae" | "jnb" | "jnbe" | "jnc" | "jne" | "jng" | "jnge" | "jnl" | "jnle"
            | "jno" | "jnp" | "jns" | "jnz" | "jo" | "jp" | "jpe" | "jpo" | "js" | "jz"
            | "jcxz" | "jecxz" | "jrcxz" | "loop" | "loope" | "loopne" | "loopz" | "loopnz"
    )
}

fn is_jmp(mnemonic: &str) -> bool {
    matches!(mnemonic, "jmp" | "jmpq" | "jmpl" | "jmpw")
}

fn is_call(mnemonic: &str) -> bool {
    matches!(mnemonic, "call" | "callq" | "calll" | "callw")
}

fn is_ret(mnemonic: &str) -> bool {
    matches!(mnemonic, "ret" | "retq" | "retl" | "retw" | "retf" | "lret")
}

/// Extract a literal target from an operand like `100c <demo+0xc>` or
/// `0x1180`. Register, memory and star-prefixed operands yield `None`.
fn literal_target(op: &str) -> Option<u64> {
    if op.starts_with('*') || op.starts_with('%') || op.starts_with('$') || op.contains('(') {
        return None;
    }
    let tok = op.split_whitespace().next()?;
    let tok = tok.strip_prefix("0x").unwrap_or(tok);
    u64::from_str_radix(tok, 16).ok()
}

/// Offset-label operands produced by jump normalization (`L_0x2A`) also
/// carry a literal target once the owning function's entry is known.
fn label_target(op: &str, entry: u64) -> Option<u64> {
    let off = op.strip_prefix("L_0x")?;
    if off.is_empty() || !off.chars().all(|c| c.is_ascii_hexdigit()) {
        return None;
    }
    Some(entry + u64::from_str_radix(off, 16).ok()?)
}

/// Classify one instruction as a block terminator. `entry` resolves
/// normalized `L_0x...` operands back to absolute addresses.
pub fn classify_terminator(ins: &Instruction, entry: u64) -> Terminator {
    let m = ins.mnemonic.as_str();
    let target = || {
        ins.operands.first().and_then(|op| {
            literal_target(op).or_else(|| label_target(op, entry))
        })
    };
    if is_jmp(m) {
        return match target() {
            Some(t) => Terminator::Jump(t),
            None => Terminator::Indirect,
        };
    }
    if is_conditional(m) {
        return match target() {
            Some(t) => Terminator::Branch(t),
            // Conditional jumps always encode a literal displacement; a
            // non-literal operand means mangled input, treated as opaque.
            None => Terminator::Indirect,
        };
    }
    if is_call(m) {
        return Terminator::Call(target());
    }
    if is_ret(m) {
        return Terminator::Ret;
    }
    Terminator::Fallthrough
}

/// Build the control-flow graph of one function.
///
/// Block leaders are the entry, every literal in-function jump or branch
/// target, and the address following any control transfer (jump, branch,
/// call, ret, indirect) — calls end blocks so the call-return edge has a
/// distinct source. Targets outside `[entry, last]` produce no edge;
/// in-function targets that fall between instruction boundaries are
/// [`CfgError::DanglingTarget`].
pub fn build_cfg(f: &Function) -> Result<Cfg, CfgError> {
    debug_assert!(f.validate().is_ok());
    let terms: Vec<Terminator> = f
        .instructions
        .iter()
        .map(|i| classify_terminator(i, f.entry))
        .collect();
    let last = f.last_address();
    let in_function = |t: u64| t >= f.entry && t <= last;

    let mut leaders: BTreeSet<usize> = BTreeSet::new();
    leaders.insert(0);
    for (i, term) in terms.iter().enumerate() {
        match *term {
            Terminator::Jump(t) | Terminator::Branch(t) if in_function(t) => {
                let idx = f.index_of(t).ok_or(CfgError::DanglingTarget(t))?;
                leaders.insert(idx);
            }
            _ => {}
        }
        if term.is_control_transfer() && i + 1 < f.instructions.len() {
            leaders.insert(i + 1);
        }
    }

    let starts: Vec<usize> = leaders.into_iter().collect();
    let mut blocks = Vec::with_capacity(starts.len());
    for (bi, &lo) in starts.iter().enumerate() {
        let hi = starts.get(bi + 1).copied().unwrap_or(f.instructions.len());
        let terminator = match terms[hi - 1] {
            t if t.is_control_transfer() => t,
            _ => Terminator::Fallthrough,
        };
        blocks.push(BasicBlock {
            id: BlockId(bi),
            start: f.instructions[lo].address,
            range: (lo, hi),
            terminator,
        });
    }

    let block_at = |addr: u64| -> Option<BlockId> {
        blocks
            .binary_search_by_key(&addr, |b| b.start)
            .ok()
            .map(BlockId)
    };

    let mut edges = Vec::new();
    let mut diagnostics = Vec::new();
    for b in &blocks {
        let next = if b.id.0 + 1 < blocks.len() {
            Some(BlockId(b.id.0 + 1))
        } else {
            None
        };
        match b.terminator {
            Terminator::Fallthrough => {
                if let Some(n) = next {
                    edges.push(Edge { from: b.id, to: n, kind: EdgeKind::Fallthrough });
                }
            }
            Terminator::Jump(t) => {
                if in_function(t) {
                    // Leader collection above guarantees the lookup hits.
                    let to = block_at(t).expect("jump target is a leader");
                    edges.push(Edge { from: b.id, to, kind: EdgeKind::Taken });
                }
            }
            Terminator::Branch(t) => {
                if in_function(t) {
                    let to = block_at(t).expect("branch target is a leader");
                    edges.push(Edge { from: b.id, to, kind: EdgeKind::Taken });
                }
                if let Some(n) = next {
                    edges.push(Edge { from: b.id, to: n, kind: EdgeKind::Fallthrough });
                }
            }
            Terminator::Call(_) => {
                if let Some(n) = next {
                    edges.push(Edge { from: b.id, to: n, kind: EdgeKind::CallReturn });
                }
            }
            Terminator::Ret => {}
            Terminator::Indirect => {
                let last_ins = f.instructions[b.range.1 - 1].address;
                diagnostics.push(CfgDiag::IndirectJump(last_ins));
            }
        }
    }

    let entry = BlockId(0);
    let mut cfg = Cfg { blocks, edges, entry, diagnostics };
    for b in unreachable_blocks(&cfg) {
        cfg.diagnostics.push(CfgDiag::Unreachable(b));
    }
    Ok(cfg)
}

fn unreachable_blocks(cfg: &Cfg) -> Vec<BlockId> {
    let mut seen = vec![false; cfg.blocks.len()];
    let mut stack = vec![cfg.entry];
    seen[cfg.entry.0] = true;
    while let Some(b) = stack.pop() {
        for e in &cfg.edges {
            if e.from == b && !seen[e.to.0] {
                seen[e.to.0] = true;
                stack.push(e.to);
            }
        }
    }
    (0..cfg.blocks.len())
        .filter(|&i| !seen[i])
        .map(BlockId)
        .collect()
}

impl Cfg {
    /// The block whose first instruction sits at `addr`.
    pub fn block_at(&self, addr: u64) -> Option<BlockId> {
        self.blocks
            .binary_search_by_key(&addr, |b| b.start)
            .ok()
            .map(BlockId)
    }

    /// Distinct successors of `b`, ascending by block start address.
    pub fn successors(&self, b: BlockId) -> Vec<BlockId> {
        let mut out: BTreeSet<BlockId> = BTreeSet::new();
        for e in &self.edges {
            if e.from == b {
                out.insert(e.to);
            }
        }
        out.into_iter().collect()
    }

    /// Distinct predecessors of `b`, ascending.
    pub fn predecessors(&self, b: BlockId) -> Vec<BlockId> {
        let mut out: BTreeSet<BlockId> = BTreeSet::new();
        for e in &self.edges {
            if e.to == b {
                out.insert(e.from);
            }
        }
        out.into_iter().collect()
    }

    /// Blocks reachable from the entry.
    pub fn reachable(&self) -> Vec<bool> {
        let mut seen = vec![false; self.blocks.len()];
        let mut stack = vec![self.entry];
        seen[self.entry.0] = true;
        while let Some(b) = stack.pop() {
            for s in self.successors(b) {
                if !seen[s.0] {
                    seen[s.0] = true;
                    stack.push(s);
                }
            }
        }
        seen
    }

    /// Graphviz rendering with one record per block.
    pub fn to_dot(&self, f: &Function) -> String {
        let mut s = String::from("digraph cfg {\n  node [shape=box, fontname=\"monospace\"];\n");
        for b in &self.blocks {
            let mut label = String::new();
            for ins in &f.instructions[b.range.0..b.range.1] {
                let _ = write!(label, "{}\\l", crate::ingest::render_instruction(ins));
            }
            let _ = writeln!(s, "  b{} [label=\"{}\"];", b.id.0, label.replace('"', "\\\""));
        }
        for e in &self.edges {
            let style = match e.kind {
                EdgeKind::Fallthrough => "solid",
                EdgeKind::Taken => "bold",
                EdgeKind::CallReturn => "dashed",
            };
            let _ = writeln!(s, "  b{} -> b{} [style={}];", e.from.0, e.to.0, style);
        }
        s.push_str("}\n");
        s
    }
}
