//! Shared test support: seeded generators for synthetic graphs and
//! functions, a cycle-union loop-forest oracle, and a brute-force
//! dominance oracle.
#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use saltkit::cfg::{BasicBlock, BlockId, Cfg, Edge, EdgeKind, Terminator};
use saltkit::ingest::{Function, Instruction};
use saltkit::loops::LoopForest;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A synthetic digraph with `n` nodes and an edge list, wrapped into a
/// control-flow graph whose node ids double as ascending block
/// addresses.
pub fn synthetic_cfg(n: usize, edges: &[(usize, usize)]) -> Cfg {
    let blocks = (0..n)
        .map(|i| BasicBlock {
            id: BlockId(i),
            start: 0x1000 + 0x10 * i as u64,
            range: (i, i + 1),
            terminator: Terminator::Fallthrough,
        })
        .collect();
    let edges = edges
        .iter()
        .map(|&(from, to)| Edge {
            from: BlockId(from),
            to: BlockId(to),
            kind: EdgeKind::Taken,
        })
        .collect();
    Cfg {
        blocks,
        edges,
        entry: BlockId(0),
        diagnostics: Vec::new(),
    }
}

/// Sparse random digraph: 2..=12 nodes, at most n+6 edges, self-loops
/// allowed, duplicates removed.
pub fn random_digraph(rng: &mut ChaCha8Rng) -> (usize, Vec<(usize, usize)>) {
    let n = rng.gen_range(2..=12);
    let m = rng.gen_range(1..=n + 6);
    let mut edges = BTreeSet::new();
    for _ in 0..m {
        edges.insert((rng.gen_range(0..n), rng.gen_range(0..n)));
    }
    (n, edges.into_iter().collect())
}

/// One loop as the oracle sees it.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct OracleLoop {
    pub members: Vec<usize>,
    pub header: usize,
    /// Parent identified by its member set (member sets are unique
    /// within a forest).
    pub parent_members: Option<Vec<usize>>,
}

/// Enumerate the node sets of all simple cycles, anchored at their
/// smallest node so each cycle is found once.
fn simple_cycle_sets(nodes: &BTreeSet<usize>, adj: &[Vec<usize>]) -> Vec<BTreeSet<usize>> {
    let mut out = Vec::new();
    for &s in nodes {
        let mut on_path: BTreeSet<usize> = BTreeSet::new();
        on_path.insert(s);
        dfs(s, s, nodes, adj, &mut on_path, &mut out);
    }
    return out;

    fn dfs(
        v: usize,
        s: usize,
        nodes: &BTreeSet<usize>,
        adj: &[Vec<usize>],
        on_path: &mut BTreeSet<usize>,
        out: &mut Vec<BTreeSet<usize>>,
    ) {
        for &w in &adj[v] {
            if !nodes.contains(&w) || w < s {
                continue;
            }
            if w == s {
                out.push(on_path.clone());
            } else if !on_path.contains(&w) {
                on_path.insert(w);
                dfs(w, s, nodes, adj, on_path, out);
                on_path.remove(&w);
            }
        }
    }
}

/// Union overlapping cycle node-sets to a fixpoint.
fn cycle_unions(cycles: Vec<BTreeSet<usize>>) -> Vec<BTreeSet<usize>> {
    let mut groups: Vec<BTreeSet<usize>> = Vec::new();
    for cycle in cycles {
        let mut merged = cycle;
        loop {
            let before = groups.len();
            let mut rest = Vec::with_capacity(groups.len());
            for g in groups {
                if g.is_disjoint(&merged) {
                    rest.push(g);
                } else {
                    merged.extend(g);
                }
            }
            groups = rest;
            if groups.len() == before {
                break;
            }
        }
        groups.push(merged);
    }
    groups.sort_by(|a, b| a.iter().next().cmp(&b.iter().next()));
    groups
}

/// Mirror of the header election: unique external entry on the ORIGINAL
/// graph wins; several entries pick the smallest; none picks the graph
/// entry when it is a member, else the smallest member.
fn oracle_header(members: &BTreeSet<usize>, all_edges: &[(usize, usize)], entry: usize) -> usize {
    let entries: BTreeSet<usize> = all_edges
        .iter()
        .filter(|(u, v)| !members.contains(u) && members.contains(v))
        .map(|&(_, v)| v)
        .collect();
    match entries.len() {
        0 => {
            if members.contains(&entry) {
                entry
            } else {
                *members.iter().next().unwrap()
            }
        }
        _ => *entries.iter().next().unwrap(),
    }
}

/// Brute-force loop forest: enumerate simple cycles, union overlapping
/// cycle sets into loops, then recurse into each loop with its header
/// removed.
pub fn oracle_forest(n: usize, edges: &[(usize, usize)]) -> Vec<OracleLoop> {
    let mut adj = vec![Vec::new(); n];
    for &(u, v) in edges {
        if !adj[u].contains(&v) {
            adj[u].push(v);
        }
    }
    for a in &mut adj {
        a.sort_unstable();
    }
    let mut out = Vec::new();
    let all: BTreeSet<usize> = (0..n).collect();
    recurse(&all, None, &adj, edges, &mut out);
    out.sort();
    return out;

    fn recurse(
        nodes: &BTreeSet<usize>,
        parent_members: Option<&Vec<usize>>,
        adj: &[Vec<usize>],
        all_edges: &[(usize, usize)],
        out: &mut Vec<OracleLoop>,
    ) {
        let groups = cycle_unions(simple_cycle_sets(nodes, adj));
        for members in groups {
            let header = oracle_header(&members, all_edges, 0);
            let members_vec: Vec<usize> = members.iter().copied().collect();
            out.push(OracleLoop {
                members: members_vec.clone(),
                header,
                parent_members: parent_members.cloned(),
            });
            let mut inner = members.clone();
            inner.remove(&header);
            recurse(&inner, Some(&members_vec), adj, all_edges, out);
        }
    }
}

/// Flatten a detected forest into the oracle's shape for comparison.
pub fn forest_as_oracle(forest: &LoopForest) -> Vec<OracleLoop> {
    let mut out: Vec<OracleLoop> = forest
        .loops
        .iter()
        .map(|l| OracleLoop {
            members: l.members.iter().map(|b| b.0).collect(),
            header: l.header.0,
            parent_members: l.parent.map(|p| {
                forest.loops[p.0]
                    .members
                    .iter()
                    .map(|b| b.0)
                    .collect::<Vec<usize>>()
            }),
        })
        .collect();
    out.sort();
    out
}

/// Brute-force dominance: `a` dominates `b` when removing `a` leaves `b`
/// unreachable from the entry (and every node dominates itself).
pub fn dominates_brute(g: &Cfg, a: usize, b: usize) -> bool {
    if a == b {
        return reachable_from_entry(g, b);
    }
    let n = g.blocks.len();
    let mut seen = vec![false; n];
    let mut stack = vec![g.entry.0];
    if g.entry.0 != a {
        seen[g.entry.0] = true;
    } else {
        return reachable_from_entry(g, b);
    }
    while let Some(v) = stack.pop() {
        for s in g.successors(BlockId(v)) {
            let s = s.0;
            if s != a && !seen[s] {
                seen[s] = true;
                stack.push(s);
            }
        }
    }
    reachable_from_entry(g, b) && !seen[b]
}

fn reachable_from_entry(g: &Cfg, b: usize) -> bool {
    let n = g.blocks.len();
    let mut seen = vec![false; n];
    seen[g.entry.0] = true;
    let mut stack = vec![g.entry.0];
    while let Some(v) = stack.pop() {
        for s in g.successors(BlockId(v)) {
            if !seen[s.0] {
                seen[s.0] = true;
                stack.push(s.0);
            }
        }
    }
    seen[b]
}

/// Random function whose jumps all land on instruction boundaries.
/// Instructions carry realistic mnemonics and sizes so the whole pure
/// pipeline can run on the result.
pub fn random_function(rng: &mut ChaCha8Rng) -> Function {
    let n = rng.gen_range(3..=40);
    let entry = 0x1000u64;
    let mut sizes = Vec::with_capacity(n);
    let mut addrs = Vec::with_capacity(n);
    let mut a = entry;
    for _ in 0..n {
        let size = rng.gen_range(1..=7u32);
        addrs.push(a);
        sizes.push(size);
        a += u64::from(size);
    }
    let mut instructions = Vec::with_capacity(n);
    for i in 0..n {
        let roll = rng.gen_range(0..100);
        let (mnemonic, operands): (&str, Vec<String>) = if roll < 40 {
            (
                ["mov", "add", "sub", "xor"][rng.gen_range(0..4)],
                vec![
                    format!("$0x{:x}", rng.gen_range(0..256)),
                    ["%eax", "%ecx", "%edx", "%esi"][rng.gen_range(0..4)].to_string(),
                ],
            )
        } else if roll < 55 {
            let target = addrs[rng.gen_range(0..n)];
            let mn = ["je", "jne", "jl", "jge", "jle"][rng.gen_range(0..5)];
            (mn, vec![format!("{target:x} <f+0x{:x}>", target - entry)])
        } else if roll < 65 {
            let target = addrs[rng.gen_range(0..n)];
            ("jmp", vec![format!("{target:x} <f+0x{:x}>", target - entry)])
        } else if roll < 72 {
            ("nop", vec![])
        } else if roll < 78 {
            ("ret", vec![])
        } else if roll < 84 {
            ("call", vec![format!("{:x} <g>", 0x9000 + rng.gen_range(0..16) * 8)])
        } else if roll < 90 {
            (
                "lea",
                vec![
                    format!("0x{:x}(%rip)", rng.gen_range(0..0x400)),
                    "%rdi".to_string(),
                ],
            )
        } else {
            (
                "mov",
                vec![
                    format!("0x{:x}", 0x2000 + rng.gen_range(0..0x40) * 4),
                    "%eax".to_string(),
                ],
            )
        };
        instructions.push(Instruction {
            address: addrs[i],
            mnemonic: mnemonic.to_string(),
            operands,
            size: sizes[i],
            annotation: None,
        });
    }
    let f = Function {
        name: "fuzz".into(),
        entry,
        instructions,
    };
    f.validate().expect("generator emits valid functions");
    f
}

/// Load the bundled (function, scaffold) evaluation fixtures, sorted by id.
pub fn load_evalset() -> Vec<(String, String, String)> {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/evalset");
    let mut ids: Vec<String> = std::fs::read_dir(&root)
        .expect("evalset fixture directory")
        .map(|e| e.expect("dirent").file_name().into_string().expect("utf8 name"))
        .filter(|n| n.ends_with(".c") && !n.ends_with(".scaffold.c"))
        .map(|n| n.trim_end_matches(".c").to_string())
        .collect();
    ids.sort();
    ids.into_iter()
        .map(|id| {
            let read = |name: String| {
                std::fs::read_to_string(root.join(name)).expect("fixture file")
            };
            let source = read(format!("{id}.c"));
            let scaffold = read(format!("{id}.scaffold.c"));
            (id, source, scaffold)
        })
        .collect()
}

/// Synthetic read-only data used by fuzz traces.
pub fn fuzz_data() -> saltkit::ingest::DataImage {
    saltkit::ingest::DataImage {
        sections: vec![saltkit::ingest::Section {
            name: ".rodata".into(),
            start: 0x2000,
            bytes: (0..0x100).map(|i| (i % 7) as u8).collect(),
        }],
    }
}

/// Concatenated serialization of every pure stage artifact for one
/// function: canonical JSON before and after normalization, graph DOT,
/// loop forest JSON, and the serialized tree.
pub fn stage_trace(f: &Function, data: &saltkit::ingest::DataImage) -> String {
    use saltkit::ingest::function_to_json;
    let mut out = String::new();
    out.push_str(&function_to_json(f));
    out.push('\n');
    let nf = saltkit::normalize::normalize(f.clone(), data);
    out.push_str(&function_to_json(&nf.base));
    out.push('\n');
    let g = saltkit::cfg::build_cfg(&nf.base).expect("fuzz functions build CFGs");
    out.push_str(&g.to_dot(&nf.base));
    out.push('\n');
    let forest = saltkit::loops::detect_loops(&g);
    out.push_str(&saltkit::loops::forest_to_json(&forest, &g).to_string());
    out.push('\n');
    let salt = saltkit::salt::construct_salt(&g, &forest, &nf);
    out.push_str(&saltkit::salt::serialize_salt(&salt));
    out
}

// ---------------------------------------------------------------------
// Hand-labeled filter fixture, shared by the metric tests and the
// acceptance gate.
// ---------------------------------------------------------------------

/// `int f(int a) {` header, `n` statement lines, closing brace.
/// By construction: total lines = n + 2, body lines = n, loops = 0.
pub fn plain(n: usize) -> String {
    let mut s = String::from("int f(int a) {\n");
    for i in 0..n {
        s.push_str(&format!("    a += {i};\n"));
    }
    s.push_str("}\n");
    s
}

/// Like [`plain`] with `blanks` empty lines appended before the brace.
/// By construction: total = stmts + blanks + 2, body = stmts, loops = 0.
pub fn plain_padded(stmts: usize, blanks: usize) -> String {
    let mut s = String::from("int f(int a) {\n");
    for i in 0..stmts {
        s.push_str(&format!("    a += {i};\n"));
    }
    for _ in 0..blanks {
        s.push('\n');
    }
    s.push_str("}\n");
    s
}

/// Header, `k` single-line `for` loops, `pad` statement lines, brace.
/// By construction: total = k + pad + 2, body = k + pad, loops = k.
pub fn loopy(k: usize, pad: usize) -> String {
    let mut s = String::from("int f(int a) {\n");
    for _ in 0..k {
        s.push_str("    for (int i = 0; i < 4; i++) a += i;\n");
    }
    for i in 0..pad {
        s.push_str(&format!("    a += {i};\n"));
    }
    s.push_str("}\n");
    s
}

/// Header, one do/while loop (counted as two loop words), `pad`
/// statements, brace. By construction: total = pad + 6, loops = 2.
pub fn do_while_padded(pad: usize) -> String {
    let mut s = String::from("int f(int a) {\n");
    s.push_str("    int i = 0;\n");
    s.push_str("    do {\n");
    s.push_str("        i++;\n");
    s.push_str("    } while (i < 3);\n");
    for i in 0..pad {
        s.push_str(&format!("    a += {i};\n"));
    }
    s.push_str("}\n");
    s
}

pub enum Expect {
    Keep(saltkit::dataset::FilterReason),
    Drop(saltkit::dataset::FilterReason),
    /// Reaches the seeded retention draw; either loop-free reason is
    /// legal, and `keep` must agree with it.
    Chance,
}

pub struct Row {
    pub name: &'static str,
    pub source: String,
    pub loops: usize,
    pub lines: usize,
    pub expect: Expect,
}

fn row(
    name: &'static str,
    source: impl Into<String>,
    loops: usize,
    lines: usize,
    expect: Expect,
) -> Row {
    Row {
        name,
        source: source.into(),
        loops,
        lines,
        expect,
    }
}

/// Fifty functions with hand-worked labels. Line and loop counts are
/// stated next to each source, not derived from the implementation.
pub fn hand_labeled_rows() -> Vec<Row> {
    use saltkit::dataset::FilterReason::{LoopRatio, MaxLines, MinLines};
    use Expect::{Chance, Drop, Keep};
    vec![
        // --- literal functions -------------------------------------
        row("empty body", "int f(void) {\n}\n", 0, 2, Drop(MinLines)),
        row(
            "four statements",
            "int f(int a) {\n    a += 1;\n    a += 2;\n    a += 3;\n    return a;\n}\n",
            0,
            6,
            Drop(MinLines),
        ),
        row(
            "five statements",
            "int f(int a) {\n    a += 1;\n    a += 2;\n    a += 3;\n    a += 4;\n    return a;\n}\n",
            0,
            7,
            Chance,
        ),
        row(
            "blank lines do not rescue the minimum",
            "int f(int a) {\n\n    a += 1;\n\n    a += 2;\n    a += 3;\n\n    return a;\n}\n",
            0,
            9,
            Drop(MinLines),
        ),
        row(
            "small while loop",
            "int f(int a) {\n    int i = 0;\n    while (i < 10) {\n        a += i;\n        i++;\n    }\n    return a;\n}\n",
            1,
            8,
            Keep(LoopRatio),
        ),
        row(
            "do-while counts both words",
            "int f(int a) {\n    int i = 0;\n    do {\n        a += i;\n        i++;\n    } while (i < 5);\n    return a;\n}\n",
            2,
            8,
            Keep(LoopRatio),
        ),
        row(
            "'for' inside a comment is not a loop",
            "int f(int a) {\n    /* for all inputs, twice */\n    a += 1;\n    a += 2;\n    a += 3;\n    a += 4;\n    return a;\n}\n",
            0,
            8,
            Chance,
        ),
        row(
            "loop words inside strings are not loops",
            "const char *f(void) {\n    const char *m = \"while you wait\";\n    const char *n = \"for later\";\n    const char *o = \"do nothing\";\n    int pad = 0;\n    return m;\n}\n",
            0,
            7,
            Chance,
        ),
        row(
            "identifiers containing 'for' are not loops",
            "int f(int fort) {\n    int formula = fort;\n    int inform = 2;\n    formula += inform;\n    formula += fort;\n    return formula;\n}\n",
            0,
            7,
            Chance,
        ),
        row(
            "minimum beats nested loops",
            "int f(int a) {\n    for (int i = 0; i < 4; i++) {\n        for (int j = 0; j < 4; j++) {\n            a += i * j;\n        }\n    }\n    return a;\n}\n",
            2,
            8,
            Drop(MinLines),
        ),
        row(
            "nested loops kept once big enough",
            "int f(int a) {\n    int s = 0;\n    for (int i = 0; i < 4; i++) {\n        for (int j = 0; j < 4; j++) {\n            s += i * j;\n        }\n    }\n    a += s;\n    return a;\n}\n",
            2,
            10,
            Keep(LoopRatio),
        ),
        row(
            "brace-with-semicolon lines are not body lines",
            "int f(void) {\n    int t[2][2] = {\n        {1, 2},\n        {3, 4},\n    };\n    int s = t[0][0] + t[1][1];\n    s += t[0][1];\n    s += t[1][0];\n    return s;\n}\n",
            0,
            10,
            Chance,
        ),
        row(
            "string loop word next to a real loop",
            "int f(int a) {\n    const char *m = \"while true\";\n    int k = 0;\n    while (a > 0) {\n        a -= 1;\n        k += 1;\n    }\n    return a + k;\n}\n",
            1,
            9,
            Keep(LoopRatio),
        ),
        row(
            "line comment with loop words",
            "int f(int a) {\n    // do the work for each item\n    a += 1;\n    a += 2;\n    a += 3;\n    a += 4;\n    return a;\n}\n",
            0,
            8,
            Chance,
        ),
        row(
            "block comment spanning lines",
            "int f(int a) {\n    /* while processing,\n       for each step,\n       do nothing */\n    a += 1;\n    a += 2;\n    a += 3;\n    a += 4;\n    return a;\n}\n",
            0,
            10,
            Chance,
        ),
        row(
            "goto is not a loop word",
            "int f(int a) {\n  top:\n    a -= 1;\n    a += 3;\n    a *= 2;\n    if (a < 100) goto top;\n    return a;\n}\n",
            0,
            8,
            Chance,
        ),
        row(
            "one-line definition has no body",
            "int f(int a) { return a + 1; }\n",
            0,
            1,
            Drop(MinLines),
        ),
        // --- constructed, labels from the constructor arithmetic ----
        row("plain 0", plain(0), 0, 2, Drop(MinLines)),
        row("plain 1", plain(1), 0, 3, Drop(MinLines)),
        row("plain 2", plain(2), 0, 4, Drop(MinLines)),
        row("plain 3", plain(3), 0, 5, Drop(MinLines)),
        row("plain 4", plain(4), 0, 6, Drop(MinLines)),
        row("plain 5", plain(5), 0, 7, Chance),
        row("plain 6", plain(6), 0, 8, Chance),
        row("plain 100", plain(100), 0, 102, Chance),
        row("plain 250", plain(250), 0, 252, Chance),
        row("plain 498 is exactly 500 lines", plain(498), 0, 500, Chance),
        row("plain 499 is 501 lines", plain(499), 0, 501, Drop(MaxLines)),
        row("plain 520", plain(520), 0, 522, Drop(MaxLines)),
        row(
            "blanks push total over the maximum",
            plain_padded(6, 495),
            0,
            503,
            Drop(MaxLines),
        ),
        row("blanks under the maximum", plain_padded(6, 300), 0, 308, Chance),
        row("five body lines padded", plain_padded(5, 10), 0, 17, Chance),
        row("four body lines padded", plain_padded(4, 10), 0, 16, Drop(MinLines)),
        row("one loop in 199 lines", loopy(1, 196), 1, 199, Keep(LoopRatio)),
        row("one loop in exactly 200 lines", loopy(1, 197), 1, 200, Chance),
        row("one loop in 201 lines", loopy(1, 198), 1, 201, Chance),
        row("one loop in 203 lines", loopy(1, 200), 1, 203, Chance),
        row("two loops in 399 lines", loopy(2, 395), 2, 399, Keep(LoopRatio)),
        row("two loops in exactly 400 lines", loopy(2, 396), 2, 400, Chance),
        row("maximum beats the loop rule", loopy(1, 498), 1, 501, Drop(MaxLines)),
        row("three loops at the line cap", loopy(3, 495), 3, 500, Keep(LoopRatio)),
        row("tiny loop function", loopy(1, 4), 1, 7, Keep(LoopRatio)),
        row("minimum beats the loop rule", loopy(1, 3), 1, 6, Drop(MinLines)),
        row("five loops in 97 lines", loopy(5, 90), 5, 97, Keep(LoopRatio)),
        row("ten loops in 312 lines", loopy(10, 300), 10, 312, Keep(LoopRatio)),
        row("four loops in 106 lines", loopy(4, 100), 4, 106, Keep(LoopRatio)),
        row("two loops in seven lines", loopy(2, 3), 2, 7, Keep(LoopRatio)),
        row("twenty loops in 52 lines", loopy(20, 30), 20, 52, Keep(LoopRatio)),
        row(
            "do-while double count decides keep",
            do_while_padded(344),
            2,
            350,
            Keep(LoopRatio),
        ),
        row(
            "do-while double count still too sparse",
            do_while_padded(395),
            2,
            401,
            Chance,
        ),
    ]
}

/// Check one labeled row against the filter, with a fresh seeded
/// generator so rows never depend on each other. Returns an error
/// message instead of panicking so callers can tally.
pub fn check_filter_row(r: &Row, policy: &saltkit::dataset::FilterPolicy) -> Result<(), String> {
    use saltkit::dataset::{count_loops, filter_function, FilterReason};
    let got_loops = count_loops(&r.source);
    if got_loops != r.loops {
        return Err(format!("{}: loop count {} != {}", r.name, got_loops, r.loops));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
    let d = filter_function(&r.source, policy, &mut rng);
    if d.loops != r.loops || d.lines != r.lines {
        return Err(format!(
            "{}: decision counts ({}, {}) != ({}, {})",
            r.name, d.loops, d.lines, r.loops, r.lines
        ));
    }
    let ok = match &r.expect {
        Expect::Keep(reason) => d.keep && d.reason == *reason,
        Expect::Drop(reason) => !d.keep && d.reason == *reason,
        Expect::Chance => match d.reason {
            FilterReason::RetainedLoopFree => d.keep,
            FilterReason::DroppedLoopFree => !d.keep,
            _ => false,
        },
    };
    if ok {
        Ok(())
    } else {
        Err(format!(
            "{}: got keep={} reason={:?}",
            r.name, d.keep, d.reason
        ))
    }
}
