use std::path::{Path, PathBuf};
use std::process::Command;

use p2s_hls::error::RejectionReason;
use p2s_hls::interp::{check_vectors, interpret};
use p2s_hls::ir::IrStmt;
use p2s_hls::lower::has_only_static_loops;
use p2s_hls::vectors::{KernelOutput, TestVectors, Value};
use p2s_hls::{parse_compiled_source, sanitize, to_kernel, transpile, LowerOptions, TranspileError, TranspileOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures")
}

fn compiled(name: &str) -> String {
    std::fs::read_to_string(fixtures().join("compiled").join(format!("{name}.py"))).unwrap()
}

fn vectors(kernel: &str) -> TestVectors {
    TestVectors::load(&fixtures().join("vectors").join(format!("{kernel}.vectors.json"))).unwrap()
}

fn golden(kernel: &str) -> String {
    std::fs::read_to_string(fixtures().join("golden").join(format!("{kernel}.c"))).unwrap()
}

const GOLDEN: [(&str, &str); 3] = [
    ("Cube", "cube"),
    ("TriangleNumber", "triangle_number"),
    ("TriangularPrismVolume", "triangular_prism_volume"),
];

#[test]
fn benchmark_kernels_match_golden_c() {
    for (src, kernel) in GOLDEN {
        let v = vectors(kernel);
        let out = transpile(&compiled(src), &TranspileOptions::default(), Some(&v)).unwrap();
        assert_eq!(out.kernel.name, kernel);
        assert_eq!(out.c_source, golden(kernel), "{kernel}");
        let again = transpile(&compiled(src), &TranspileOptions::default(), Some(&v)).unwrap();
        assert_eq!(again, out);
    }
}

#[test]
fn cube_lowers_to_single_return() {
    let k = to_kernel(&compiled("Cube"), &LowerOptions::default()).unwrap();
    assert_eq!(k.body.len(), 1);
    assert!(matches!(k.body[0], IrStmt::Return { value: Some(_) }));
}

#[test]
fn triangle_number_pragma_sits_in_loop() {
    let out = transpile(&compiled("TriangleNumber"), &TranspileOptions::default(), None).unwrap();
    let lines: Vec<&str> = out.c_source.lines().collect();
    let header = lines.iter().position(|l| l.contains("L1: for")).unwrap();
    assert_eq!(lines[header + 1].trim(), "#pragma HLS PIPELINE II=1");
}

#[test]
fn committed_vectors_agree_with_interpreter() {
    for (src, kernel) in GOLDEN.iter().copied().chain([("MaxOfThree", "max_of_three")]) {
        let k = to_kernel(&compiled(src), &LowerOptions::default()).unwrap();
        let v = vectors(kernel).check_against(&k).unwrap();
        assert!(!v.cases.is_empty());
        assert_eq!(check_vectors(&k, &v), vec![], "{kernel}");
    }
}

fn int_out(k: &p2s_hls::KernelIR, xs: &[i32]) -> i32 {
    let inputs: Vec<Value> = xs.iter().map(|x| Value::Int(*x)).collect();
    match interpret(k, &inputs).unwrap() {
        KernelOutput::Return(Value::Int(v)) => v,
        other => panic!("{other:?}"),
    }
}

#[test]
fn interpreter_matches_closed_forms() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cube = to_kernel(&compiled("Cube"), &LowerOptions::default()).unwrap();
    let tri = to_kernel(&compiled("TriangleNumber"), &LowerOptions::default()).unwrap();
    let tpv = to_kernel(&compiled("TriangularPrismVolume"), &LowerOptions::default()).unwrap();
    for _ in 0..1000 {
        let n: i32 = rng.gen_range(-1290..=1290);
        assert_eq!(i64::from(int_out(&cube, &[n])), i64::from(n).pow(3));
        let n: i32 = rng.gen_range(0..=2000);
        assert_eq!(i64::from(int_out(&tri, &[n])), i64::from(n) * i64::from(n + 1) / 2);
        let (b, h, l) = (rng.gen_range(-1000..=1000), rng.gen_range(-1000..=1000), rng.gen_range(-1000..=1000));
        let p = i64::from(b) * i64::from(h) * i64::from(l);
        assert_eq!(i64::from(int_out(&tpv, &[b, h, l])), p.div_euclid(2));
    }
    assert_eq!(int_out(&cube, &[5]), 125);
    assert_eq!(int_out(&tri, &[10]), 55);
    assert_eq!(int_out(&tpv, &[6, 4, 10]), 120);
}

#[test]
fn rejection_suite() {
    for (src, reason) in [
        ("Factorial", RejectionReason::Recursion),
        ("SumDigits", RejectionReason::WhileLoop),
        ("Squares", RejectionReason::DynamicAlloc),
    ] {
        let err = transpile(&compiled(src), &TranspileOptions::default(), None).unwrap_err();
        assert_eq!(err.rejection(), Some(reason), "{src}: {err}");
    }
    let err = transpile(&compiled("SumBelow"), &TranspileOptions::default(), None).unwrap_err();
    assert!(matches!(err, TranspileError::UnsupportedConstruct { .. }), "{err}");
    assert!(matches!(parse_compiled_source(""), Err(TranspileError::Syntax { .. })));
}

#[test]
fn accepted_kernels_have_static_control() {
    for src in ["Cube", "TriangleNumber", "TriangularPrismVolume", "MaxOfThree"] {
        let k = to_kernel(&compiled(src), &LowerOptions::default()).unwrap();
        assert!(has_only_static_loops(&k), "{src}");
    }
}

#[test]
fn sanitize_is_idempotent_on_fixtures() {
    for src in ["Cube", "TriangleNumber", "TriangularPrismVolume", "MaxOfThree", "Factorial", "SumDigits", "Squares"] {
        let once = sanitize(&parse_compiled_source(&compiled(src)).unwrap()).unwrap();
        assert_eq!(sanitize(&once).unwrap(), once, "{src}");
    }
}

#[test]
fn one_pragma_per_directive() {
    for (src, _) in GOLDEN.iter().copied().chain([("MaxOfThree", "")]) {
        let out = transpile(&compiled(src), &TranspileOptions::default(), None).unwrap();
        let pragmas = out.c_source.lines().filter(|l| l.trim_start().starts_with("#pragma HLS")).count();
        assert_eq!(pragmas, out.kernel.directives.len(), "{src}");
    }
}

fn cc() -> Option<PathBuf> {
    ["cc", "gcc", "clang"].iter().find_map(|c| {
        Command::new(c)
            .arg("--version")
            .output()
            .ok()
            .filter(|o| o.status.success())
            .map(|_| PathBuf::from(c))
    })
}

#[test]
fn testbenches_compile_and_pass() {
    let Some(cc) = cc() else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    for (src, kernel) in GOLDEN.iter().copied().chain([("MaxOfThree", "max_of_three")]) {
        let out = transpile(&compiled(src), &TranspileOptions::default(), Some(&vectors(kernel))).unwrap();
        out.write_to(dir.path()).unwrap();
        let exe = dir.path().join(kernel);
        let status = Command::new(&cc)
            .args(["-std=c99", "-Wall", "-Werror", "-Wno-unknown-pragmas", "-Wno-unused-label", "-o"])
            .arg(&exe)
            .arg(dir.path().join(out.c_file_name()))
            .arg(dir.path().join(out.tb_file_name()))
            .status()
            .unwrap();
        assert!(status.success(), "{kernel} failed to compile");
        let run = Command::new(&exe).output().unwrap();
        assert!(run.status.success(), "{kernel}: {}", String::from_utf8_lossy(&run.stdout));
    }
    // a wrong expectation must make the testbench fail
    let mut bad = vectors("cube");
    bad.cases[1].out = KernelOutput::Return(Value::Int(2));
    let out = transpile(&compiled("Cube"), &TranspileOptions::default(), Some(&bad)).unwrap();
    let sub = dir.path().join("bad");
    out.write_to(&sub).unwrap();
    let exe = sub.join("cube");
    let status = Command::new(&cc)
        .args(["-std=c99", "-Wno-unknown-pragmas", "-o"])
        .arg(&exe)
        .arg(sub.join("cube.c"))
        .arg(sub.join("cube_tb.c"))
        .status()
        .unwrap();
    assert!(status.success());
    assert!(!Command::new(&exe).status().unwrap().success());
}
