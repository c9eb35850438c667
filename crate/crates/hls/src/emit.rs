//! C emission for an annotated kernel and its testbench.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::ir::{Directive, DirectiveKind, IrExpr, IrParam, IrStmt, IrType, KernelIR, LValue, ScalarType};
use crate::vectors::{KernelOutput, TestVectors, Value, FLOAT_TOLERANCE};

const INDENT: &str = "    ";

const C_KEYWORDS: [&str; 34] = [
    "auto", "break", "case", "char", "const", "continue", "default", "do", "double", "else", "enum", "extern", "float",
    "for", "goto", "if", "inline", "int", "long", "register", "restrict", "return", "short", "signed", "sizeof",
    "static", "struct", "switch", "typedef", "union", "unsigned", "void", "volatile", "while",
];

const TESTBENCH_NAMES: [&str; 5] = ["main", "failures", "got", "printf", "close_enough"];

/// Identifier as it appears in C; keywords and the testbench's reserved
/// names get a trailing underscore.
pub fn c_ident(name: &str) -> String {
    if C_KEYWORDS.contains(&name) || TESTBENCH_NAMES.contains(&name) {
        format!("{name}_")
    } else {
        name.to_string()
    }
}

fn int_literal(v: i32) -> String {
    if v == i32::MIN {
        "(-2147483647 - 1)".to_string()
    } else {
        v.to_string()
    }
}

fn float_literal(v: f32) -> String {
    let s = format!("{v:?}");
    if s.contains(['.', 'e', 'E']) {
        format!("{s}f")
    } else {
        format!("{s}.0f")
    }
}

const NEG_PRECEDENCE: u8 = 7;
const ATOM_PRECEDENCE: u8 = 8;

fn precedence(e: &IrExpr) -> u8 {
    match e {
        IrExpr::BinOp { op, .. } => op.precedence(),
        IrExpr::Neg { .. } => NEG_PRECEDENCE,
        IrExpr::IntLit { value } if *value < 0 => NEG_PRECEDENCE,
        IrExpr::FloatLit { value } if value.is_sign_negative() => NEG_PRECEDENCE,
        _ => ATOM_PRECEDENCE,
    }
}

/// Prints with the minimum parentheses for C precedence and left
/// associativity.
pub fn expr_c(e: &IrExpr) -> String {
    match e {
        IrExpr::IntLit { value } => int_literal(*value),
        IrExpr::FloatLit { value } => float_literal(*value),
        IrExpr::Var { name } => c_ident(name),
        IrExpr::Index { array, index } => format!("{}[{}]", c_ident(array), expr_c(index)),
        IrExpr::Neg { operand } => {
            let inner = expr_c(operand);
            if precedence(operand) < ATOM_PRECEDENCE {
                format!("-({inner})")
            } else {
                format!("-{inner}")
            }
        }
        IrExpr::BinOp { op, lhs, rhs } => {
            let p = op.precedence();
            let l = expr_c(lhs);
            let r = expr_c(rhs);
            let l = if precedence(lhs) < p { format!("({l})") } else { l };
            let r = if precedence(rhs) <= p { format!("({r})") } else { r };
            format!("{l} {} {r}", op.symbol())
        }
    }
}

fn pragma(d: &Directive) -> String {
    match d.kind {
        DirectiveKind::Pipeline { ii } => format!("#pragma HLS PIPELINE II={ii}"),
        DirectiveKind::Unroll { factor } => format!("#pragma HLS UNROLL factor={factor}"),
        DirectiveKind::ArrayPartition { dim, factor, style } => format!(
            "#pragma HLS ARRAY_PARTITION variable={} {style} factor={factor} dim={dim}",
            c_ident(&d.target)
        ),
    }
}

fn param_decl(p: &IrParam) -> String {
    match p.ty {
        IrType::Scalar { ty } => format!("{} {}", ty.c_name(), c_ident(&p.name)),
        IrType::Array { elem, len } => format!("{} {}[{len}]", elem.c_name(), c_ident(&p.name)),
    }
}

/// `int32_t cube(int32_t n)`.
pub fn signature(k: &KernelIR) -> String {
    let ret = k.return_type.map_or("void", ScalarType::c_name);
    let params: Vec<String> = k.params.iter().map(param_decl).collect();
    let params = if params.is_empty() { "void".to_string() } else { params.join(", ") };
    format!("{ret} {}({params})", c_ident(&k.name))
}

struct Emitter<'a> {
    k: &'a KernelIR,
    out: String,
    /// Locals declared at their first top-level assignment.
    inline_decl: BTreeSet<String>,
}

impl Emitter<'_> {
    fn line(&mut self, depth: usize, text: &str) {
        for _ in 0..depth {
            self.out.push_str(INDENT);
        }
        self.out.push_str(text);
        self.out.push('\n');
    }

    fn block(&mut self, body: &[IrStmt], depth: usize) {
        for s in body {
            self.stmt(s, depth);
        }
    }

    fn stmt(&mut self, s: &IrStmt, depth: usize) {
        match s {
            IrStmt::Assign { target, value } => {
                let lhs = match target {
                    LValue::Var { name } => {
                        if depth == 1 && self.inline_decl.remove(name) {
                            let ty = self.k.locals.iter().find(|l| &l.name == name).expect("local").ty;
                            format!("{} {}", ty.c_name(), c_ident(name))
                        } else {
                            c_ident(name)
                        }
                    }
                    LValue::Index { array, index } => format!("{}[{}]", c_ident(array), expr_c(index)),
                };
                self.line(depth, &format!("{lhs} = {};", expr_c(value)));
            }
            IrStmt::For { id, var, lo, hi, body } => {
                let v = c_ident(var);
                self.line(
                    depth,
                    &format!("{id}: for (int32_t {v} = {}; {v} < {}; {v}++) {{", expr_c(lo), expr_c(hi)),
                );
                let pragmas: Vec<String> = self.k.directives.iter().filter(|d| &d.target == id).map(pragma).collect();
                for p in pragmas {
                    self.line(depth + 1, &p);
                }
                self.block(body, depth + 1);
                self.line(depth, "}");
            }
            IrStmt::If {
                cond,
                then_body,
                else_body,
            } => {
                self.line(depth, &format!("if ({}) {{", expr_c(cond)));
                self.block(then_body, depth + 1);
                let mut else_body = else_body.as_slice();
                loop {
                    if else_body.is_empty() {
                        self.line(depth, "}");
                        break;
                    }
                    if let [IrStmt::If {
                        cond,
                        then_body,
                        else_body: nested,
                    }] = else_body
                    {
                        self.line(depth, &format!("}} else if ({}) {{", expr_c(cond)));
                        self.block(then_body, depth + 1);
                        else_body = nested;
                    } else {
                        self.line(depth, "} else {");
                        self.block(else_body, depth + 1);
                        self.line(depth, "}");
                        break;
                    }
                }
            }
            IrStmt::Return { value } => match value {
                Some(v) => self.line(depth, &format!("return {};", expr_c(v))),
                None => self.line(depth, "return;"),
            },
        }
    }
}

/// Locals whose first top-level use is a plain store: those can be declared
/// at that store.
fn inline_declarable(k: &KernelIR) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for l in &k.locals {
        let first = k.body.iter().find(|s| s.touches(&l.name));
        if let Some(IrStmt::Assign {
            target: LValue::Var { name },
            value,
        }) = first
        {
            if name == &l.name && !value.mentions(name) {
                out.insert(l.name.clone());
            }
        }
    }
    out
}

pub fn emit_kernel(k: &KernelIR) -> String {
    let inline_decl = inline_declarable(k);
    let mut e = Emitter {
        k,
        out: String::new(),
        inline_decl,
    };
    e.out.push_str("#include <stdint.h>\n\n");
    e.line(0, &format!("{} {{", signature(k)));
    let partitions: Vec<String> = k
        .directives
        .iter()
        .filter(|d| matches!(d.kind, DirectiveKind::ArrayPartition { .. }))
        .map(pragma)
        .collect();
    for p in partitions {
        e.line(1, &p);
    }
    for l in &k.locals {
        if !e.inline_decl.contains(&l.name) {
            let zero = match l.ty {
                ScalarType::Int32 => "0",
                ScalarType::Float32 => "0.0f",
            };
            e.line(1, &format!("{} {} = {zero};", l.ty.c_name(), c_ident(&l.name)));
        }
    }
    e.block(&k.body, 1);
    e.line(0, "}");
    e.out
}

fn value_c(v: &Value) -> String {
    match v {
        Value::Int(x) => int_literal(*x),
        Value::Float(x) => float_literal(*x),
        Value::IntArray(xs) => format!("{{{}}}", xs.iter().map(|x| int_literal(*x)).collect::<Vec<_>>().join(", ")),
        Value::FloatArray(xs) => {
            format!("{{{}}}", xs.iter().map(|x| float_literal(*x)).collect::<Vec<_>>().join(", "))
        }
    }
}

fn check_scalar(out: &mut String, case: usize, got: &str, exp: &str, ty: ScalarType) {
    match ty {
        ScalarType::Int32 => {
            let _ = writeln!(
                out,
                "        if ({got} != {exp}) {{ printf(\"case {case}: got %ld, expected %ld\\n\", (long){got}, (long){exp}); failures++; }}"
            );
        }
        ScalarType::Float32 => {
            let _ = writeln!(
                out,
                "        if (!close_enough({got}, {exp})) {{ printf(\"case {case}: got %g, expected %g\\n\", (double){got}, (double){exp}); failures++; }}"
            );
        }
    }
}

/// Testbench `main` that runs every vector and returns nonzero on any
/// mismatch. `vectors` must already be checked against the kernel.
pub fn emit_testbench(k: &KernelIR, vectors: &TestVectors) -> String {
    let mut out = String::new();
    out.push_str("#include <stdint.h>\n#include <stdio.h>\n\n");
    let _ = writeln!(out, "{};\n", signature(k));
    let uses_float = k.return_type == Some(ScalarType::Float32)
        || k.params.iter().any(|p| p.ty.scalar().is_none() && p.ty.elem() == ScalarType::Float32);
    if uses_float {
        let _ = writeln!(
            out,
            "static int close_enough(float got, float expected) {{\n    float diff = got > expected ? got - expected : expected - got;\n    float mag = expected < 0 ? -expected : expected;\n    return diff <= {} * (1.0f + mag);\n}}\n",
            float_literal(FLOAT_TOLERANCE)
        );
    }
    out.push_str("int main(void) {\n    int failures = 0;\n");
    for (i, case) in vectors.cases.iter().enumerate() {
        out.push_str("    {\n");
        let mut args = Vec::new();
        for (j, (p, v)) in k.params.iter().zip(&case.inputs).enumerate() {
            match p.ty {
                IrType::Array { elem, len } => {
                    let _ = writeln!(out, "        {} in{j}[{len}] = {};", elem.c_name(), value_c(v));
                    args.push(format!("in{j}"));
                }
                IrType::Scalar { .. } => args.push(value_c(v)),
            }
        }
        let call = format!("{}({})", c_ident(&k.name), args.join(", "));
        match (&case.out, k.return_type) {
            (KernelOutput::Return(expected), Some(ty)) => {
                let _ = writeln!(out, "        {} got = {call};", ty.c_name());
                check_scalar(&mut out, i, "got", &value_c(expected), ty);
            }
            (KernelOutput::Arrays(expected), _) => {
                let _ = writeln!(out, "        {call};");
                let arrays = k.params.iter().enumerate().filter(|(_, p)| p.ty.scalar().is_none());
                for ((j, p), exp) in arrays.zip(expected) {
                    let IrType::Array { elem, len } = p.ty else { unreachable!() };
                    let _ = writeln!(out, "        {} want{j}[{len}] = {};", elem.c_name(), value_c(exp));
                    let _ = writeln!(out, "        for (int k = 0; k < {len}; k++) {{");
                    check_scalar(&mut out, i, &format!("in{j}[k]"), &format!("want{j}[k]"), elem);
                    out.push_str("        }\n");
                }
            }
            (KernelOutput::Return(_), None) => unreachable!("vectors checked against kernel"),
        }
        out.push_str("    }\n");
    }
    let n = vectors.cases.len();
    let _ = writeln!(
        out,
        "    if (failures != 0) {{\n        printf(\"%d of {n} cases failed\\n\", failures);\n        return 1;\n    }}\n    printf(\"all {n} cases passed\\n\");\n    return 0;\n}}"
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::IrBinOp;

    fn b(op: IrBinOp, l: IrExpr, r: IrExpr) -> IrExpr {
        IrExpr::bin(op, l, r)
    }

    #[test]
    fn minimal_parentheses() {
        let (a, bb, c) = (IrExpr::var("a"), IrExpr::var("b"), IrExpr::var("c"));
        assert_eq!(expr_c(&b(IrBinOp::Sub, b(IrBinOp::Sub, a.clone(), bb.clone()), c.clone())), "a - b - c");
        assert_eq!(expr_c(&b(IrBinOp::Sub, a.clone(), b(IrBinOp::Sub, bb.clone(), c.clone()))), "a - (b - c)");
        assert_eq!(expr_c(&b(IrBinOp::Mul, b(IrBinOp::Add, a.clone(), bb.clone()), c.clone())), "(a + b) * c");
        assert_eq!(expr_c(&b(IrBinOp::Add, a.clone(), b(IrBinOp::Mul, bb.clone(), c.clone()))), "a + b * c");
        assert_eq!(
            expr_c(&b(IrBinOp::Sub, a.clone(), b(IrBinOp::Lt, bb.clone(), IrExpr::int(0)))),
            "a - (b < 0)"
        );
        let neg = IrExpr::Neg {
            operand: Box::new(b(IrBinOp::Add, a.clone(), bb.clone())),
        };
        assert_eq!(expr_c(&neg), "-(a + b)");
        assert_eq!(expr_c(&b(IrBinOp::Sub, a, IrExpr::int(-3))), "a - -3");
        assert_eq!(expr_c(&IrExpr::int(i32::MIN)), "(-2147483647 - 1)");
        assert_eq!(expr_c(&IrExpr::FloatLit { value: 2.0 }), "2.0f");
        assert_eq!(expr_c(&IrExpr::FloatLit { value: 0.5 }), "0.5f");
    }

    #[test]
    fn keywords_are_renamed() {
        assert_eq!(c_ident("int"), "int_");
        assert_eq!(c_ident("main"), "main_");
        assert_eq!(c_ident("d_0_i_"), "d_0_i_");
    }
}
