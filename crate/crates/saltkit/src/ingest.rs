//! Disassembly ingestion: plain-text listings in, typed functions and
//! data-section images out, plus a canonical JSON interchange form.
//!
//! The listing grammar is modelled on `objdump -d` output in AT&T syntax:
//! a function header line, indented instruction lines with an optional raw
//! byte column, and optional `SECTION <name> @ <addr>:` blocks carrying hex
//! dumps of data segments. Banner noise that objdump interleaves
//! (`file format`, `Disassembly of section`, bare `...` ellipses) is
//! tolerated and skipped; any other unrecognised line is an error.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One disassembled instruction.
///
/// `size` is the encoded byte length when the listing carried a byte
/// column, and 0 when unknown. `annotation` is always `None` straight out
/// of the parser; the normalizer fills it in for data references.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub address: u64,
    pub mnemonic: String,
    pub operands: Vec<String>,
    #[serde(default)]
    pub size: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation: Option<String>,
}

/// A single disassembled function: name, entry address, and its
/// instructions in strictly ascending address order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Function {
    pub name: String,
    pub entry: u64,
    pub instructions: Vec<Instruction>,
}

/// A contiguous run of raw bytes from a data segment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Section {
    pub name: String,
    pub start: u64,
    pub bytes: Vec<u8>,
}

/// Read-only image of the data segments referenced by a listing.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DataImage {
    pub sections: Vec<Section>,
}

/// Everything one listing yields.
#[derive(Debug, Clone, Default)]
pub struct Listing {
    pub functions: Vec<Function>,
    pub data: DataImage,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IngestError {
    #[error("line {0}: malformed line")]
    MalformedLine(usize),
    #[error("duplicate instruction address {0:#x}")]
    DuplicateAddress(u64),
    #[error("function {0:?} has no instructions")]
    EmptyFunction(String),
    #[error("schema violation at {0}")]
    SchemaViolation(String),
    #[error("data sections overlap at {0:#x}")]
    OverlappingSections(u64),
}

impl Function {
    /// Check the structural invariants: at least one instruction, the
    /// first at `entry`, addresses strictly ascending.
    pub fn validate(&self) -> Result<(), IngestError> {
        if self.instructions.is_empty() {
            return Err(IngestError::EmptyFunction(self.name.clone()));
        }
        if self.instructions[0].address != self.entry {
            return Err(IngestError::SchemaViolation("entry".into()));
        }
        for (i, w) in self.instructions.windows(2).enumerate() {
            if w[1].address == w[0].address {
                return Err(IngestError::DuplicateAddress(w[1].address));
            }
            if w[1].address < w[0].address {
                return Err(IngestError::SchemaViolation(format!(
                    "instructions[{}].address",
                    i + 1
                )));
            }
        }
        Ok(())
    }

    /// Address of the last instruction.
    pub fn last_address(&self) -> u64 {
        self.instructions.last().map_or(self.entry, |i| i.address)
    }

    /// True when `addr` is the address of one of this function's
    /// instructions.
    pub fn has_address(&self, addr: u64) -> bool {
        self.instructions
            .binary_search_by_key(&addr, |i| i.address)
            .is_ok()
    }

    /// Index of the instruction at `addr`, if any.
    pub fn index_of(&self, addr: u64) -> Option<usize> {
        self.instructions
            .binary_search_by_key(&addr, |i| i.address)
            .ok()
    }
}

impl DataImage {
    /// Check that no two sections overlap.
    pub fn validate(&self) -> Result<(), IngestError> {
        let mut spans: Vec<(u64, u64)> = self
            .sections
            .iter()
            .map(|s| (s.start, s.start + s.bytes.len() as u64))
            .collect();
        spans.sort_unstable();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(IngestError::OverlappingSections(w[1].0));
            }
        }
        Ok(())
    }

    /// The section containing `addr`, if any.
    pub fn section_containing(&self, addr: u64) -> Option<&Section> {
        self.sections
            .iter()
            .find(|s| addr >= s.start && addr < s.start + s.bytes.len() as u64)
    }

    /// All bytes from `addr` to the end of its section.
    pub fn bytes_from(&self, addr: u64) -> Option<&[u8]> {
        let s = self.section_containing(addr)?;
        Some(&s.bytes[(addr - s.start) as usize..])
    }
}

/// Parse a whole listing: every function header/instruction group and
/// every `SECTION` hex-dump block it contains.
pub fn parse_listing(text: &str) -> Result<Listing, IngestError> {
    enum Mode {
        Idle,
        Func,
        Data,
    }
    let mut out = Listing::default();
    let mut mode = Mode::Idle;
    // Pending function state: header line number plus per-instruction line
    // numbers so violations point at the offending line.
    let mut header_line = 0usize;
    let mut cur_fn: Option<Function> = None;
    let mut ins_lines: Vec<usize> = Vec::new();

    fn finalize(
        f: Option<Function>,
        header_line: usize,
        ins_lines: &[usize],
        out: &mut Vec<Function>,
    ) -> Result<(), IngestError> {
        let Some(f) = f else { return Ok(()) };
        if f.instructions.is_empty() {
            return Err(IngestError::EmptyFunction(f.name));
        }
        if f.instructions[0].address != f.entry {
            return Err(IngestError::MalformedLine(header_line));
        }
        for (i, w) in f.instructions.windows(2).enumerate() {
            if w[1].address == w[0].address {
                return Err(IngestError::DuplicateAddress(w[1].address));
            }
            if w[1].address < w[0].address {
                return Err(IngestError::MalformedLine(ins_lines[i + 1]));
            }
        }
        out.push(f);
        Ok(())
    }

    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim_end_matches('\r');
        let trimmed = line.trim();
        if trimmed.is_empty()
            || trimmed == "..."
            || trimmed.starts_with("Disassembly of section")
            || line.contains("file format")
        {
            continue;
        }

        if let Some((entry, name)) = parse_header(line) {
            finalize(cur_fn.take(), header_line, &ins_lines, &mut out.functions)?;
            ins_lines.clear();
            header_line = lineno;
            cur_fn = Some(Function {
                name,
                entry,
                instructions: Vec::new(),
            });
            mode = Mode::Func;
            continue;
        }

        if let Some((name, start)) = parse_section_header(trimmed) {
            finalize(cur_fn.take(), header_line, &ins_lines, &mut out.functions)?;
            ins_lines.clear();
            out.data.sections.push(Section {
                name,
                start,
                bytes: Vec::new(),
            });
            mode = Mode::Data;
            continue;
        }

        match mode {
            Mode::Func => {
                if let Some(ins) = parse_listing_instruction(line) {
                    cur_fn.as_mut().unwrap().instructions.push(ins);
                    ins_lines.push(lineno);
                    continue;
                }
                // objdump wraps instructions wider than its byte column;
                // the spill-over line carries only an address and the
                // remaining bytes, which extend the previous instruction.
                let (addr, extra) = parse_continuation(line)
                    .ok_or(IngestError::MalformedLine(lineno))?;
                let prev = cur_fn
                    .as_mut()
                    .unwrap()
                    .instructions
                    .last_mut()
                    .ok_or(IngestError::MalformedLine(lineno))?;
                if addr != prev.address + u64::from(prev.size) {
                    return Err(IngestError::MalformedLine(lineno));
                }
                prev.size += extra;
            }
            Mode::Data => {
                let sec = out.data.sections.last_mut().unwrap();
                let mut bytes = Vec::new();
                for tok in trimmed.split_whitespace() {
                    if tok.len() == 2 {
                        if let Ok(b) = u8::from_str_radix(tok, 16) {
                            bytes.push(b);
                            continue;
                        }
                    }
                    return Err(IngestError::MalformedLine(lineno));
                }
                sec.bytes.extend_from_slice(&bytes);
            }
            Mode::Idle => return Err(IngestError::MalformedLine(lineno)),
        }
    }
    finalize(cur_fn.take(), header_line, &ins_lines, &mut out.functions)?;
    out.data.validate()?;
    Ok(out)
}

/// Render functions and data back into listing text. The byte column only
/// records lengths, so known sizes are emitted as placeholder `00` bytes;
/// annotations are not part of the listing grammar and are dropped.
pub fn listing_to_text(functions: &[Function], data: &DataImage) -> String {
    let mut out = String::new();
    for f in functions {
        out.push_str(&format!("{:016x} <{}>:\n", f.entry, f.name));
        for ins in &f.instructions {
            let text = render_opcode_text(ins);
            if ins.size > 0 {
                let bytes = vec!["00"; ins.size as usize].join(" ");
                out.push_str(&format!("    {:x}:\t{}\t{}\n", ins.address, bytes, text));
            } else {
                out.push_str(&format!("    {:x}:\t{}\n", ins.address, text));
            }
        }
        out.push('\n');
    }
    for s in &data.sections {
        out.push_str(&format!("SECTION {} @ 0x{:x}:\n", s.name, s.start));
        for chunk in s.bytes.chunks(16) {
            let row: Vec<String> = chunk.iter().map(|b| format!("{b:02x}")).collect();
            out.push_str("  ");
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

fn parse_header(line: &str) -> Option<(u64, String)> {
    // `0000000000001000 <name>:` — column 0, one space, angle-bracketed name.
    if line.starts_with(char::is_whitespace) {
        return None;
    }
    let (addr, rest) = line.split_once(' ')?;
    let addr = parse_hex(addr)?;
    let rest = rest.trim();
    let name = rest.strip_prefix('<')?.strip_suffix(">:")?;
    if name.is_empty() {
        return None;
    }
    Some((addr, name.to_string()))
}

fn parse_section_header(line: &str) -> Option<(String, u64)> {
    let rest = line.strip_prefix("SECTION ")?;
    let (name, addr) = rest.split_once(" @ ")?;
    let addr = addr.trim().strip_suffix(':')?;
    Some((name.trim().to_string(), parse_hex(addr.trim())?))
}

fn parse_hex(s: &str) -> Option<u64> {
    let s = s.strip_prefix("0x").unwrap_or(s);
    u64::from_str_radix(s, 16).ok()
}

/// Parse one indented listing line: `addr: [bytes] mnemonic [operands]`,
/// with any trailing `# ...` disassembler chatter stripped.
fn parse_listing_instruction(line: &str) -> Option<Instruction> {
    let t = line.trim_start();
    let (addr, rest) = t.split_once(':')?;
    let address = parse_hex(addr.trim())?;
    let rest = strip_comment(rest);

    // objdump separates address, byte column and text with tabs; fall back
    // to a token heuristic (a leading run of two-hex-digit tokens is the
    // byte column) when tabs are absent.
    let (size, text) = if rest.contains('\t') {
        let mut size = 0u32;
        let mut text = "";
        for field in rest.split('\t') {
            let field_t = field.trim();
            if field_t.is_empty() {
                continue;
            }
            if is_byte_column(field_t) {
                size = field_t.split_whitespace().count() as u32;
            } else {
                text = field_t;
            }
        }
        (size, text.to_string())
    } else {
        let toks: Vec<&str> = rest.split_whitespace().collect();
        let n_bytes = toks
            .iter()
            .take_while(|t| t.len() == 2 && t.chars().all(|c| c.is_ascii_hexdigit()))
            .count();
        if n_bytes == toks.len() {
            // Nothing left over for a mnemonic.
            return None;
        }
        (n_bytes as u32, toks[n_bytes..].join(" "))
    };

    let text = text.trim();
    if text.is_empty() {
        return None;
    }
    let (mnemonic, ops) = match text.split_once(char::is_whitespace) {
        Some((m, rest)) => (m.to_string(), split_operands(rest.trim())),
        None => (text.to_string(), Vec::new()),
    };
    Some(Instruction {
        address,
        mnemonic,
        operands: ops,
        size,
        annotation: None,
    })
}

/// A wrapped-instruction spill line: `addr:` followed by nothing but
/// byte-column tokens. Returns the address and how many bytes spilled.
fn parse_continuation(line: &str) -> Option<(u64, u32)> {
    let t = line.trim_start();
    let (addr, rest) = t.split_once(':')?;
    let address = parse_hex(addr.trim())?;
    let rest = strip_comment(rest);
    let rest = rest.trim();
    if !is_byte_column(rest) {
        return None;
    }
    Some((address, rest.split_whitespace().count() as u32))
}

fn is_byte_column(field: &str) -> bool {
    let mut any = false;
    for tok in field.split_whitespace() {
        if tok.len() != 2 || !tok.chars().all(|c| c.is_ascii_hexdigit()) {
            return false;
        }
        any = true;
    }
    any
}

fn strip_comment(s: &str) -> &str {
    // A `#` beginning disassembler chatter is always preceded by
    // whitespace; AT&T operand text never contains one.
    let bytes = s.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        if b == b'#' && i > 0 && (bytes[i - 1] == b' ' || bytes[i - 1] == b'\t') {
            return &s[..i];
        }
    }
    s
}

/// Split an AT&T operand string on top-level commas, leaving memory
/// operands like `0x8(%rax,%rbx,4)` intact.
pub fn split_operands(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut start = 0usize;
    for (i, c) in s.char_indices() {
        match c {
            '(' => depth += 1,
            ')' => depth -= 1,
            ',' if depth == 0 => {
                let piece = s[start..i].trim();
                if !piece.is_empty() {
                    out.push(piece.to_string());
                }
                start = i + 1;
            }
            _ => {}
        }
    }
    let piece = s[start..].trim();
    if !piece.is_empty() {
        out.push(piece.to_string());
    }
    out
}

/// Canonical one-line rendering: `addr: mnemonic op1,op2 # annotation`.
pub fn render_instruction(ins: &Instruction) -> String {
    format!("{:x}: {}", ins.address, render_opcode_text(ins))
}

/// The part after the address: mnemonic, comma-joined operands, and the
/// annotation when present.
pub fn render_opcode_text(ins: &Instruction) -> String {
    let mut s = ins.mnemonic.clone();
    if !ins.operands.is_empty() {
        s.push(' ');
        s.push_str(&ins.operands.join(","));
    }
    if let Some(a) = &ins.annotation {
        s.push_str(" # ");
        s.push_str(a);
    }
    s
}

/// Parse a line produced by [`render_instruction`]. Unlike the listing
/// parser, a trailing `# ...` here is the instruction's own annotation,
/// not disassembler chatter.
pub fn parse_instruction_line(line: &str) -> Option<Instruction> {
    let (addr, rest) = line.trim().split_once(':')?;
    let address = parse_hex(addr.trim())?;
    let (text, annotation) = match find_annotation(rest) {
        Some(i) => (
            rest[..i].trim(),
            Some(rest[i..].trim_start_matches(['#', ' ']).to_string()),
        ),
        None => (rest.trim(), None),
    };
    if text.is_empty() {
        return None;
    }
    let (mnemonic, ops) = match text.split_once(char::is_whitespace) {
        Some((m, r)) => (m.to_string(), split_operands(r.trim())),
        None => (text.to_string(), Vec::new()),
    };
    Some(Instruction {
        address,
        mnemonic,
        operands: ops,
        size: 0,
        annotation,
    })
}

fn find_annotation(s: &str) -> Option<usize> {
    let bytes = s.as_bytes();
    (1..bytes.len()).find(|&i| bytes[i] == b'#' && bytes[i - 1] == b' ')
}

/// Canonical JSON for one function: compact, fixed field order, lossless
/// against [`parse_function_json`].
pub fn function_to_json(f: &Function) -> String {
    serde_json::to_string(f).expect("function serialization cannot fail")
}

/// Strict reader for the canonical JSON form. Every violation names the
/// offending path, e.g. `instructions[3].mnemonic`.
pub fn parse_function_json(text: &str) -> Result<Function, IngestError> {
    use serde_json::Value;
    let bad = |path: &str| IngestError::SchemaViolation(path.to_string());
    let v: Value = serde_json::from_str(text)
        .map_err(|e| IngestError::SchemaViolation(format!("invalid json: {e}")))?;
    let obj = v.as_object().ok_or_else(|| bad("<root>"))?;
    for key in obj.keys() {
        if !matches!(key.as_str(), "name" | "entry" | "instructions") {
            return Err(bad(key));
        }
    }
    let name = obj
        .get("name")
        .and_then(Value::as_str)
        .filter(|s| !s.is_empty())
        .ok_or_else(|| bad("name"))?
        .to_string();
    let entry = obj
        .get("entry")
        .and_then(Value::as_u64)
        .ok_or_else(|| bad("entry"))?;
    let arr = obj
        .get("instructions")
        .and_then(Value::as_array)
        .filter(|a| !a.is_empty())
        .ok_or_else(|| bad("instructions"))?;

    let mut instructions = Vec::with_capacity(arr.len());
    for (i, item) in arr.iter().enumerate() {
        let p = |field: &str| format!("instructions[{i}].{field}");
        let o = item
            .as_object()
            .ok_or_else(|| bad(&format!("instructions[{i}]")))?;
        for key in o.keys() {
            if !matches!(
                key.as_str(),
                "address" | "mnemonic" | "operands" | "size" | "annotation"
            ) {
                return Err(bad(&p(key)));
            }
        }
        let address = o
            .get("address")
            .and_then(Value::as_u64)
            .ok_or_else(|| bad(&p("address")))?;
        let mnemonic = o
            .get("mnemonic")
            .and_then(Value::as_str)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| bad(&p("mnemonic")))?
            .to_string();
        let ops = o
            .get("operands")
            .and_then(Value::as_array)
            .ok_or_else(|| bad(&p("operands")))?;
        let mut operands = Vec::with_capacity(ops.len());
        for (j, op) in ops.iter().enumerate() {
            operands.push(
                op.as_str()
                    .ok_or_else(|| bad(&format!("instructions[{i}].operands[{j}]")))?
                    .to_string(),
            );
        }
        let size = match o.get("size") {
            None => 0,
            Some(s) => u32::try_from(s.as_u64().ok_or_else(|| bad(&p("size")))?)
                .map_err(|_| bad(&p("size")))?,
        };
        let annotation = match o.get("annotation") {
            None => None,
            Some(a) => Some(a.as_str().ok_or_else(|| bad(&p("annotation")))?.to_string()),
        };
        instructions.push(Instruction {
            address,
            mnemonic,
            operands,
            size,
            annotation,
        });
    }

    let f = Function {
        name,
        entry,
        instructions,
    };
    if f.instructions[0].address != f.entry {
        return Err(bad("entry"));
    }
    for (i, w) in f.instructions.windows(2).enumerate() {
        if w[1].address <= w[0].address {
            return Err(bad(&format!("instructions[{}].address", i + 1)));
        }
    }
    Ok(f)
}

/// Convert `objdump -s` (`Contents of section ...`) output into a
/// [`DataImage`], starting a fresh section run at every address gap.
pub fn parse_objdump_section_contents(text: &str) -> Result<DataImage, IngestError> {
    let mut img = DataImage::default();
    let mut cur_name: Option<String> = None;
    let mut expected_next: Option<u64> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        let trimmed = line.trim();
        if trimmed.is_empty() || line.contains("file format") {
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix("Contents of section ") {
            cur_name = Some(rest.trim_end_matches(':').to_string());
            expected_next = None;
            continue;
        }
        let Some(name) = &cur_name else {
            return Err(IngestError::MalformedLine(idx + 1));
        };
        // ` 2000 32333537 42440000 ...  ascii....` — address, up to 35
        // columns of hex groups, then the ASCII gloss.
        let body = line.trim_start();
        let (addr_tok, rest) = body
            .split_once(' ')
            .ok_or(IngestError::MalformedLine(idx + 1))?;
        let addr = parse_hex(addr_tok).ok_or(IngestError::MalformedLine(idx + 1))?;
        let hex_region: String = rest
            .chars()
            .take(35)
            .filter(|c| !c.is_whitespace())
            .collect();
        if hex_region.len() % 2 != 0 || !hex_region.chars().all(|c| c.is_ascii_hexdigit()) {
            return Err(IngestError::MalformedLine(idx + 1));
        }
        let bytes: Vec<u8> = (0..hex_region.len())
            .step_by(2)
            .map(|i| u8::from_str_radix(&hex_region[i..i + 2], 16).unwrap())
            .collect();
        if expected_next == Some(addr) {
            let sec = img.sections.last_mut().unwrap();
            sec.bytes.extend_from_slice(&bytes);
        } else {
            img.sections.push(Section {
                name: name.clone(),
                start: addr,
                bytes: bytes.clone(),
            });
        }
        expected_next = Some(addr + bytes.len() as u64);
    }
    img.validate()?;
    Ok(img)
}
