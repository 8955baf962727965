//! Instruction normalization: replace literal jump targets with
//! entry-relative labels so functions become position independent, and
//! annotate instructions that reference data segments with the values
//! they point at.

use std::collections::BTreeMap;

use crate::cfg::{classify_terminator, Terminator};
use crate::ingest::{DataImage, Function};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NormalizeDiag {
    /// A %rip-relative operand could not be resolved because the
    /// instruction's encoded size is unknown.
    RipUnresolvable(u64),
}

/// A function after one or both normalization passes, with the mapping
/// from absolute jump-target addresses to their `L_0x...` labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NormalizedFunction {
    pub base: Function,
    pub offset_map: BTreeMap<u64, String>,
    pub diagnostics: Vec<NormalizeDiag>,
}

impl From<Function> for NormalizedFunction {
    fn from(base: Function) -> Self {
        NormalizedFunction {
            base,
            offset_map: BTreeMap::new(),
            diagnostics: Vec::new(),
        }
    }
}

/// The label for a jump target at `addr` inside a function entered at
/// `entry`: `L_0x<offset>` with an uppercase hex offset.
pub fn offset_label(entry: u64, addr: u64) -> String {
    format!("L_0x{:X}", addr - entry)
}

/// Rewrite every literal in-function jump/branch target into an
/// entry-relative label. Out-of-function targets stay verbatim. The pass
/// is a fixpoint: already-labelled operands are recognised and their
/// `offset_map` entries reconstructed.
pub fn normalize_jumps(nf: NormalizedFunction) -> NormalizedFunction {
    let NormalizedFunction {
        mut base,
        mut offset_map,
        diagnostics,
    } = nf;
    let entry = base.entry;
    let addresses: Vec<u64> = base.instructions.iter().map(|i| i.address).collect();
    let has_addr = |t: u64| addresses.binary_search(&t).is_ok();

    for i in 0..base.instructions.len() {
        let term = classify_terminator(&base.instructions[i], entry);
        let t = match term {
            Terminator::Jump(t) | Terminator::Branch(t) => t,
            _ => continue,
        };
        if t < entry || !has_addr(t) {
            continue;
        }
        let label = offset_label(entry, t);
        base.instructions[i].operands[0] = label.clone();
        offset_map.insert(t, label);
    }
    NormalizedFunction {
        base,
        offset_map,
        diagnostics,
    }
}

/// Annotate instructions whose operands reference the data image with the
/// values found there: a NUL-terminated run of two or more printable
/// bytes becomes a quoted string, anything else up to 16 raw bytes in
/// hex. Multiple referenced items are joined with ", ". Control-transfer
/// instructions are never annotated.
pub fn annotate_data_refs(nf: NormalizedFunction, data: &DataImage) -> NormalizedFunction {
    let NormalizedFunction {
        mut base,
        offset_map,
        mut diagnostics,
    } = nf;
    let entry = base.entry;

    for ins in &mut base.instructions {
        if classify_terminator(ins, entry).is_control_transfer() {
            continue;
        }
        let mut items: Vec<String> = Vec::new();
        for op in &ins.operands {
            let addr = match operand_data_address(op, ins.address, ins.size) {
                Resolved::Address(a) => a,
                Resolved::NeedsSize => {
                    diagnostics.push(NormalizeDiag::RipUnresolvable(ins.address));
                    continue;
                }
                Resolved::None => continue,
            };
            if let Some(bytes) = data.bytes_from(addr) {
                items.push(annotate_bytes(bytes));
            }
        }
        if !items.is_empty() {
            ins.annotation = Some(items.join(", "));
        }
    }
    NormalizedFunction {
        base,
        offset_map,
        diagnostics,
    }
}

/// Run both normalization passes (they commute; jump labels first here).
pub fn normalize(f: Function, data: &DataImage) -> NormalizedFunction {
    annotate_data_refs(normalize_jumps(f.into()), data)
}

enum Resolved {
    Address(u64),
    NeedsSize,
    None,
}

/// The data address an operand refers to, if any: `%rip`-relative
/// displacements resolve against the next instruction's address, a
/// displacement with only an index register is absolute, and a bare hex
/// token is an absolute memory operand. Immediates and register operands
/// carry no data address.
fn operand_data_address(op: &str, ins_addr: u64, ins_size: u32) -> Resolved {
    if op.starts_with('$') || op.starts_with('%') || op.starts_with('*') {
        return Resolved::None;
    }
    if let Some(open) = op.find('(') {
        let Some(close) = op.rfind(')') else {
            return Resolved::None;
        };
        let disp = &op[..open];
        let inside = &op[open + 1..close];
        if inside == "%rip" {
            let Some(d) = parse_disp(disp) else {
                return Resolved::None;
            };
            if ins_size == 0 {
                return Resolved::NeedsSize;
            }
            return Resolved::Address((ins_addr + u64::from(ins_size)).wrapping_add_signed(d));
        }
        if inside.starts_with(',') {
            // `disp(,%reg,scale)` — no base register, displacement is
            // absolute.
            if let Some(d) = parse_disp(disp) {
                if d >= 0 {
                    return Resolved::Address(d as u64);
                }
            }
            return Resolved::None;
        }
        return Resolved::None;
    }
    // A bare hex token is an absolute memory reference.
    let tok = op.split_whitespace().next().unwrap_or("");
    let stripped = tok.strip_prefix("0x").unwrap_or(tok);
    if !stripped.is_empty() && stripped.chars().all(|c| c.is_ascii_hexdigit()) {
        if let Ok(a) = u64::from_str_radix(stripped, 16) {
            return Resolved::Address(a);
        }
    }
    Resolved::None
}

fn parse_disp(s: &str) -> Option<i64> {
    let s = s.trim();
    if s.is_empty() {
        return None;
    }
    let (neg, rest) = match s.strip_prefix('-') {
        Some(r) => (true, r),
        None => (false, s),
    };
    let rest = rest.strip_prefix("0x").unwrap_or(rest);
    let v = i64::from_str_radix(rest, 16).ok()?;
    Some(if neg { -v } else { v })
}

fn is_printable(b: u8) -> bool {
    (0x20..=0x7e).contains(&b)
}

/// Render the data found at a reference: quoted string for printable
/// NUL-terminated runs of length >= 2, else up to 16 bytes of hex.
fn annotate_bytes(bytes: &[u8]) -> String {
    if let Some(n) = bytes.iter().position(|&b| b == 0) {
        if n >= 2 && bytes[..n].iter().all(|&b| is_printable(b)) {
            let mut s = String::with_capacity(n + 2);
            s.push('"');
            for &b in &bytes[..n] {
                match b {
                    b'"' => s.push_str("\\\""),
                    b'\\' => s.push_str("\\\\"),
                    _ => s.push(b as char),
                }
            }
            s.push('"');
            return s;
        }
    }
    let take = bytes.len().min(16);
    bytes[..take]
        .iter()
        .map(|b| format!("0x{b:02x}"))
        .collect::<Vec<_>>()
        .join(" ")
}
