use std::path::Path;

use p2s_core::verifier::{parse_diagnostics, parse_output, Category};

fn fixture(name: &str) -> String {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/verifier").join(name);
    std::fs::read_to_string(p).unwrap()
}

fn parsed(name: &str) -> (u32, Vec<Category>) {
    let (n, diags) = parse_diagnostics(&fixture(name));
    (n, diags.iter().map(|d| d.category).collect())
}

#[test]
fn clean_pass() {
    assert_eq!(parsed("clean_pass.txt"), (0, vec![]));
    assert!(parse_output(&fixture("clean_pass.txt")).recognized);
}

#[test]
fn single_postcondition_failure() {
    assert_eq!(parsed("postcondition_failure.txt"), (1, vec![Category::Postcondition]));
    let (_, d) = parse_diagnostics(&fixture("postcondition_failure.txt"));
    assert_eq!((d[0].line, d[0].column), (Some(4), None));
}

#[test]
fn multiple_errors() {
    assert_eq!(
        parsed("multi_error.txt"),
        (3, vec![Category::Invariant, Category::Assertion, Category::Termination])
    );
}

#[test]
fn garbage_is_one_other() {
    assert_eq!(parsed("garbage.txt"), (1, vec![Category::Other]));
    assert!(!parse_output(&fixture("garbage.txt")).recognized);
}
