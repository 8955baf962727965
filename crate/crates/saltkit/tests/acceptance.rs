//! Shipping gate: one check per release criterion, each reporting a
//! single `ACCEPTANCE <n> <name>: PASS|FAIL` line. Run with
//! `cargo test --test acceptance -- --nocapture` to see every line.

mod common;

use std::collections::BTreeSet;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use saltkit::cfg::build_cfg;
use saltkit::dataset::{filter_function, FilterPolicy, FilterReason};
use saltkit::eval::{aggregate, run_cases, CaseResult, EvalCase, OptLevel};
use saltkit::ingest::{parse_listing, DataImage, Function, Instruction, Section};
use saltkit::loops::{back_edges, detect_loops};
use saltkit::normalize::{annotate_data_refs, normalize, normalize_jumps, NormalizedFunction};
use saltkit::pipeline::{
    decompile, fix_boundaries, fix_compilation, CompilerCfg, ScriptedClient, Status,
};
use saltkit::prompts::{PromptRole, PromptSet};
use saltkit::salt::{construct_salt, parse_salt, serialize_salt, LogicBlock, LogicItem, Salt};

fn report(n: usize, name: &str, ok: bool) {
    println!("ACCEPTANCE {n} {name}: {}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "acceptance criterion {n} ({name}) failed");
}

// ---------------------------------------------------------------------
// 1. Loop detection agrees with the cycle-union oracle.
// ---------------------------------------------------------------------

#[test]
fn criterion_1_loop_forest_oracle_equivalence() {
    let started = Instant::now();
    let mut r = common::rng(0xACCE_0001);
    let cases = 10_000;
    let mut agree = true;
    for _ in 0..cases {
        let (n, edges) = common::random_digraph(&mut r);
        let g = common::synthetic_cfg(n, &edges);
        let got = common::forest_as_oracle(&detect_loops(&g));
        let want = common::oracle_forest(n, &edges);
        if got != want {
            eprintln!("forest mismatch: n={n} edges={edges:?}");
            agree = false;
            break;
        }
    }
    let elapsed = started.elapsed();
    let in_time = elapsed.as_secs() < 60;
    if !in_time {
        eprintln!("oracle sweep took {elapsed:?}");
    }
    report(1, "loop-forest-oracle-equivalence", agree && in_time);
}

// ---------------------------------------------------------------------
// 2. Tree construction conserves instructions and marks every loop.
// ---------------------------------------------------------------------

fn collect_addresses(b: &LogicBlock, out: &mut Vec<u64>) {
    for item in &b.items {
        if let LogicItem::Ins { address, .. } = item {
            out.push(*address);
        }
    }
    for c in &b.children {
        collect_addresses(c, out);
    }
}

fn count_markers(b: &LogicBlock) -> usize {
    b.items
        .iter()
        .filter(|i| matches!(i, LogicItem::Marker(_)))
        .count()
        + b.children.iter().map(count_markers).sum::<usize>()
}

#[test]
fn criterion_2_tree_conservation() {
    let mut r = common::rng(0xACCE_0002);
    let mut ok = true;
    for _ in 0..1_000 {
        let f = common::random_function(&mut r);
        let nf = normalize(f.clone(), &DataImage::default());
        let g = build_cfg(&nf.base).expect("fuzz functions build CFGs");
        let forest = detect_loops(&g);
        let salt = construct_salt(&g, &forest, &nf);

        let mut got = Vec::new();
        collect_addresses(&salt.root, &mut got);
        got.sort_unstable();
        let mut want: Vec<u64> = f.instructions.iter().map(|i| i.address).collect();
        want.sort_unstable();
        if got != want {
            eprintln!("address multiset drifted for {}", f.name);
            ok = false;
            break;
        }
        if salt.marker_count != forest.len() || count_markers(&salt.root) != forest.len() {
            eprintln!("marker/loop mismatch for {}", f.name);
            ok = false;
            break;
        }
    }
    report(2, "tree-conservation", ok);
}

// ---------------------------------------------------------------------
// 3. The nested-then-sibling fixture reproduces its reference tree.
// ---------------------------------------------------------------------

fn tree_shape(b: &LogicBlock) -> Vec<Vec<usize>> {
    b.children
        .iter()
        .map(|c| c.children.iter().map(|cc| cc.children.len()).collect())
        .collect()
}

#[test]
fn criterion_3_nested_then_sibling_fixture() {
    let listing = parse_listing(include_str!("fixtures/fig_nested.lst")).expect("fixture parses");
    let f = listing.functions.into_iter().next().expect("one function");
    let g = build_cfg(&f).expect("fixture builds a CFG");

    let edges: BTreeSet<(u64, u64)> = back_edges(&g)
        .iter()
        .map(|&(u, v)| (g.blocks[u.0].start, g.blocks[v.0].start))
        .collect();
    let expected: BTreeSet<(u64, u64)> =
        [(0x100f, 0x100f), (0x1018, 0x100a), (0x1024, 0x1024)]
            .into_iter()
            .collect();
    let edges_ok = edges == expected;

    let forest = detect_loops(&g);
    let headers: Vec<u64> = forest
        .loops
        .iter()
        .map(|l| g.blocks[l.header.0].start)
        .collect();
    let forest_ok = forest.len() == 3
        && headers == vec![0x100a, 0x100f, 0x1024]
        && forest.loops[0].parent.is_none()
        && forest.loops[1].parent == Some(forest.loops[0].id)
        && forest.loops[2].parent.is_none()
        && forest.roots.len() == 2;

    let nf = normalize(f, &DataImage::default());
    let g = build_cfg(&nf.base).expect("normalized fixture builds a CFG");
    let forest = detect_loops(&g);
    let salt = construct_salt(&g, &forest, &nf);
    let shape_ok = tree_shape(&salt.root) == vec![vec![0], vec![]];

    report(3, "nested-then-sibling-fixture", edges_ok && forest_ok && shape_ok);
}

// ---------------------------------------------------------------------
// 4. Normalization fixtures and idempotence.
// ---------------------------------------------------------------------

#[test]
fn criterion_4_normalization() {
    // A jump back to the entry renders the zero offset label.
    let f = Function {
        name: "f".into(),
        entry: 0x1000,
        instructions: vec![
            Instruction {
                address: 0x1000,
                mnemonic: "nop".into(),
                operands: vec![],
                size: 1,
                annotation: None,
            },
            Instruction {
                address: 0x1001,
                mnemonic: "jmp".into(),
                operands: vec!["1000 <f>".into()],
                size: 2,
                annotation: None,
            },
        ],
    };
    let nf = normalize_jumps(NormalizedFunction::from(f));
    let entry_ok = nf.base.instructions[1].operands[0] == "L_0x0";

    // The seven-byte constant annotates as the six visible characters.
    let img = DataImage {
        sections: vec![Section {
            name: ".rodata".into(),
            start: 0x2000,
            bytes: b"2357BD\0".to_vec(),
        }],
    };
    let f = Function {
        name: "f".into(),
        entry: 0x1000,
        instructions: vec![Instruction {
            address: 0x1000,
            mnemonic: "mov".into(),
            operands: vec!["0x2000".into(), "%edi".into()],
            size: 5,
            annotation: None,
        }],
    };
    let nf = annotate_data_refs(NormalizedFunction::from(f), &img);
    let annot_ok = nf.base.instructions[0].annotation.as_deref() == Some("\"2357BD\"");

    // Rewriting jumps twice changes nothing, across the fuzz corpus.
    let mut r = common::rng(0xACCE_0004);
    let mut idempotent = true;
    for _ in 0..1_000 {
        let f = common::random_function(&mut r);
        let once = normalize_jumps(NormalizedFunction::from(f));
        let twice = normalize_jumps(once.clone());
        if saltkit::ingest::function_to_json(&once.base)
            != saltkit::ingest::function_to_json(&twice.base)
        {
            idempotent = false;
            break;
        }
    }

    report(4, "normalization", entry_ok && annot_ok && idempotent);
}

// ---------------------------------------------------------------------
// 5. The compile-fix loop stops after three prompts and moves on.
// ---------------------------------------------------------------------

#[test]
fn criterion_5_fix_loop_cap() {
    const BROKEN: &str = "int twice(int x) { return x + ; }";
    let listing = "0000000000001000 <twice>:\n    1000:\t8d 04 3f\t lea (%rdi,%rdi,1),%eax\n    1003:\tc3\t ret\n";
    let f = parse_listing(listing)
        .expect("listing parses")
        .functions
        .into_iter()
        .next()
        .expect("one function");
    let nf = normalize(f, &DataImage::default());
    let g = build_cfg(&nf.base).expect("cfg");
    let forest = detect_loops(&g);
    let salt = construct_salt(&g, &forest, &nf);

    let client = ScriptedClient::repeating(BROKEN);
    let prompts = PromptSet::embedded();
    let compiler = CompilerCfg::default();

    let rec = decompile(&salt, "twice", &client, &prompts, 4096).expect("decompile");
    let rec = fix_compilation(rec, &client, &prompts, &compiler).expect("fix loop runs");
    let capped = rec.status == Status::CefFixed(3);

    let cef_prefix = prompts
        .template(PromptRole::Cef)
        .lines()
        .next()
        .expect("nonempty template");
    let cef_count = client
        .prompts()
        .iter()
        .filter(|p| p.starts_with(cef_prefix))
        .count();

    let rec = fix_boundaries(rec, &client, &prompts, &compiler).expect("boundary stage runs");
    let advanced = rec.status == Status::BefFixed;

    report(5, "fix-loop-cap", capped && cef_count == 3 && advanced);
}

// ---------------------------------------------------------------------
// 6. The metric harness scores known inputs exactly.
// ---------------------------------------------------------------------

#[test]
fn criterion_6_metric_self_test() {
    let cases: Vec<EvalCase> = common::load_evalset()
        .into_iter()
        .enumerate()
        .map(|(i, (id, source, scaffold))| EvalCase {
            id,
            level: OptLevel::ALL[i % OptLevel::ALL.len()],
            decompiled: source,
            scaffold,
            timeout_secs: 10,
        })
        .collect();
    let twenty = cases.len() == 20;
    let results: Vec<CaseResult> = run_cases(&cases, &CompilerCfg::default(), 8)
        .into_iter()
        .map(|r| r.expect("fixture case runs"))
        .collect();
    let checks_in_range = results.iter().all(|r| (4..=5).contains(&r.total));
    let report_all = aggregate(&results).expect("nonempty");
    let perfect = report_all.overall.rc == 1.0
        && report_all.overall.re == 1.0
        && report_all.overall.tcp == 1.0;

    // A candidate passing two of four checks scores exactly one half.
    let half = EvalCase {
        id: "half".into(),
        level: OptLevel::O0,
        decompiled: "int half(int x) { return x / 2; }\n".into(),
        scaffold: "#include <assert.h>\n\nint half(int x);\n\nint main(void)\n{\n    assert(half(4) == 2);\n    assert(half(7) == 4);\n    assert(half(10) == 5);\n    assert(half(9) == 5);\n    return 0;\n}\n".into(),
        timeout_secs: 10,
    };
    let half_result = run_cases(&[half], &CompilerCfg::default(), 1)
        .pop()
        .expect("one case")
        .expect("case runs");
    let half_exact = half_result.pass_fraction() == 0.5 && half_result.total == 4;

    // The aggregate equals a from-scratch recomputation.
    let mut mixed = results;
    mixed.push(half_result);
    let report_mixed = aggregate(&mixed).expect("nonempty");
    let n = mixed.len() as f64;
    let rc = mixed.iter().filter(|r| r.compiled).count() as f64 / n;
    let re = mixed.iter().filter(|r| r.all_passed).count() as f64 / n;
    let tcp = mixed.iter().map(|r| r.pass_fraction()).sum::<f64>() / n;
    let recomputed = (report_mixed.overall.rc - rc).abs() <= 1e-12
        && (report_mixed.overall.re - re).abs() <= 1e-12
        && (report_mixed.overall.tcp - tcp).abs() <= 1e-12;

    report(
        6,
        "metric-self-test",
        twenty && checks_in_range && perfect && half_exact && recomputed,
    );
}

// ---------------------------------------------------------------------
// 7. Dataset filters match the labeled fixture and the retention rate.
// ---------------------------------------------------------------------

#[test]
fn criterion_7_dataset_filters() {
    let policy = FilterPolicy::default();
    let rows = common::hand_labeled_rows();
    let mut labeled_ok = rows.len() == 50;
    for r in &rows {
        if let Err(msg) = common::check_filter_row(r, &policy) {
            eprintln!("{msg}");
            labeled_ok = false;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
    let draws = 10_000usize;
    let mut kept = 0usize;
    for i in 0..draws {
        let d = filter_function(&common::plain(5 + (i % 40)), &policy, &mut rng);
        if !matches!(
            d.reason,
            FilterReason::RetainedLoopFree | FilterReason::DroppedLoopFree
        ) {
            labeled_ok = false;
        }
        if d.keep {
            kept += 1;
        }
    }
    let rate = kept as f64 / draws as f64;
    let rate_ok = (0.19..=0.21).contains(&rate);
    if !rate_ok {
        eprintln!("retention rate {rate}");
    }

    report(7, "dataset-filters", labeled_ok && rate_ok);
}

// ---------------------------------------------------------------------
// 8. Prompt templates match their goldens byte for byte.
// ---------------------------------------------------------------------

#[test]
fn criterion_8_prompt_goldens() {
    let prompts = PromptSet::embedded();
    let roles = [
        PromptRole::Decompile,
        PromptRole::Cef,
        PromptRole::Bef,
        PromptRole::Rename,
        PromptRole::Comment,
    ];
    let mut ok = true;
    for role in roles {
        let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("tests/golden")
            .join(format!("{}.golden", role.stem()));
        let want = std::fs::read(&path).expect("golden file");
        if prompts.template(role).as_bytes() != want.as_slice() {
            eprintln!("{} template drifted from its golden", role.stem());
            ok = false;
        }
    }
    report(8, "prompt-goldens", ok);
}

// ---------------------------------------------------------------------
// 9. Pure stages are deterministic across runs and worker counts.
// ---------------------------------------------------------------------

#[test]
fn criterion_9_determinism() {
    use rayon::prelude::*;

    let data = common::fuzz_data();
    let corpus: Vec<Function> = {
        let mut r = common::rng(0xACCE_0009);
        (0..300).map(|_| common::random_function(&mut r)).collect()
    };

    let serial: Vec<Vec<String>> = (0..3)
        .map(|_| corpus.iter().map(|f| common::stage_trace(f, &data)).collect())
        .collect();
    let three_runs = serial[0] == serial[1] && serial[1] == serial[2];

    let on_pool = |jobs: usize| -> Vec<String> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .expect("worker pool");
        pool.install(|| {
            corpus
                .par_iter()
                .map(|f| common::stage_trace(f, &data))
                .collect()
        })
    };
    let jobs_agree = on_pool(1) == on_pool(8) && on_pool(1) == serial[0];

    // Serialized trees survive a parse round trip unchanged.
    let round_trip = corpus.iter().all(|f| {
        let nf = normalize(f.clone(), &data);
        let g = build_cfg(&nf.base).expect("cfg");
        let forest = detect_loops(&g);
        let salt = construct_salt(&g, &forest, &nf);
        let text = serialize_salt(&salt);
        let reparsed: Salt = parse_salt(&text).expect("own output parses");
        serialize_salt(&reparsed) == text
    });

    report(9, "determinism", three_runs && jobs_agree && round_trip);
}
