//! Removes Dafny-runtime artifacts: runtime imports, empty wrapper classes,
//! and runtime helper calls (rewritten into native operations).
//!
//! Rewrite table:
//!
//! | runtime form                          | rewritten to                                              |
//! |---------------------------------------|-----------------------------------------------------------|
//! | `_dafny.euclidian_division(a, b)`     | `a / b - (a % b < 0) * ((b > 0) - (b < 0))` (C division)  |
//! | `_dafny.euclidian_modulus(a, b)`      | `a % b + (a % b < 0) * (b * ((b > 0) - (b < 0)))`         |
//! | `_dafny.IntegerRange(lo, hi)`         | `range(lo, hi)`                                           |
//! | `_dafny.BigRational(x)`               | float literal `x`                                         |
//! | `_dafny.Array(..)`, `_dafny.newArray(..)` | `__dynamic_alloc__(..)` (rejected by lowering)        |
//! | `with _dafny.label(..): body`         | `body`                                                    |
//! | `default__.f(..)`, `module_.default__.f(..)` | `f(..)`                                            |
//!
//! For a positive literal divisor `b` the sign terms are folded away:
//! `a / b - (a % b < 0)` and `a % b + (a % b < 0) * b`.

use crate::error::TranspileError;
use crate::pyast::{BinOp, ClassAst, CmpOp, Expr, FunctionAst, ScriptAst, Stmt, StmtKind};

/// Modules emitted or imported by the Dafny Python backend.
pub const RUNTIME_MODULES: [&str; 7] = ["_dafny", "System_", "module_", "sys", "typing", "math", "itertools"];

pub const ALLOC_MARKER: &str = "__dynamic_alloc__";

const WRAPPER_CLASS: &str = "default__";

fn is_runtime_module(name: &str) -> bool {
    let root = name.split('.').next().unwrap_or(name);
    RUNTIME_MODULES.contains(&root) || root.starts_with("_dafny")
}

fn is_empty_init(f: &FunctionAst) -> bool {
    f.name == "__init__" && f.body.iter().all(|s| matches!(s.kind, StmtKind::Pass))
}

/// A class that holds nothing but static functions and a trivial `__init__`.
fn is_empty_wrapper(c: &ClassAst) -> bool {
    c.functions
        .iter()
        .all(|f| is_empty_init(f) || f.decorators.iter().any(|d| d == "staticmethod"))
}

pub fn sanitize(ast: &ScriptAst) -> Result<ScriptAst, TranspileError> {
    let imports = ast.imports.iter().filter(|m| !is_runtime_module(m)).cloned().collect();
    let mut functions: Vec<FunctionAst> = Vec::new();
    let mut classes = Vec::new();
    for f in &ast.functions {
        functions.push(clean_function(f)?);
    }
    for c in &ast.classes {
        if is_empty_wrapper(c) {
            for f in c.functions.iter().filter(|f| !is_empty_init(f)) {
                let mut f = clean_function(f)?;
                f.decorators.retain(|d| d != "staticmethod");
                functions.push(f);
            }
        } else {
            let mut kept = c.clone();
            kept.functions = c.functions.iter().map(clean_function).collect::<Result<_, _>>()?;
            classes.push(kept);
        }
    }
    Ok(ScriptAst {
        imports,
        classes,
        functions,
    })
}

fn clean_function(f: &FunctionAst) -> Result<FunctionAst, TranspileError> {
    Ok(FunctionAst {
        body: clean_block(&f.body)?,
        ..f.clone()
    })
}

fn clean_block(body: &[Stmt]) -> Result<Vec<Stmt>, TranspileError> {
    let mut out = Vec::with_capacity(body.len());
    for s in body {
        match &s.kind {
            StmtKind::With { context, body } if is_label(context) => {
                out.extend(clean_block(body)?);
            }
            _ => out.push(clean_stmt(s)?),
        }
    }
    Ok(out)
}

fn is_label(e: &Expr) -> bool {
    match e {
        Expr::Call { func, .. } => func.dotted().as_deref() == Some("_dafny.label"),
        _ => false,
    }
}

fn clean_stmt(s: &Stmt) -> Result<Stmt, TranspileError> {
    let kind = match &s.kind {
        StmtKind::Return(e) => StmtKind::Return(e.as_ref().map(rewrite).transpose()?),
        StmtKind::Assign { target, value } => StmtKind::Assign {
            target: rewrite(target)?,
            value: rewrite(value)?,
        },
        StmtKind::AnnAssign {
            target,
            annotation,
            value,
        } => StmtKind::AnnAssign {
            target: target.clone(),
            annotation: annotation.clone(),
            value: value.as_ref().map(rewrite).transpose()?,
        },
        StmtKind::AugAssign { target, op, value } => StmtKind::AugAssign {
            target: rewrite(target)?,
            op: *op,
            value: rewrite(value)?,
        },
        StmtKind::If { cond, body, orelse } => StmtKind::If {
            cond: rewrite(cond)?,
            body: clean_block(body)?,
            orelse: clean_block(orelse)?,
        },
        StmtKind::For { var, iter, body } => StmtKind::For {
            var: var.clone(),
            iter: rewrite(iter)?,
            body: clean_block(body)?,
        },
        StmtKind::While { cond, body } => StmtKind::While {
            cond: rewrite(cond)?,
            body: clean_block(body)?,
        },
        StmtKind::With { context, body } => StmtKind::With {
            context: rewrite(context)?,
            body: clean_block(body)?,
        },
        StmtKind::Expr(e) => StmtKind::Expr(rewrite(e)?),
        k @ (StmtKind::Pass | StmtKind::Break | StmtKind::Continue) => k.clone(),
    };
    Ok(Stmt { line: s.line, kind })
}

fn bin(op: BinOp, l: Expr, r: Expr) -> Expr {
    Expr::binary(op, l, r)
}

fn cmp(op: CmpOp, l: Expr, r: Expr) -> Expr {
    Expr::compare(op, l, r)
}

/// `(b > 0) - (b < 0)`
fn sign(b: &Expr) -> Expr {
    bin(
        BinOp::Sub,
        cmp(CmpOp::Gt, b.clone(), Expr::Int(0)),
        cmp(CmpOp::Lt, b.clone(), Expr::Int(0)),
    )
}

fn positive_literal(b: &Expr) -> bool {
    matches!(b, Expr::Int(v) if *v > 0)
}

/// `(a % b < 0)`
fn negative_remainder(a: &Expr, b: &Expr) -> Expr {
    cmp(CmpOp::Lt, bin(BinOp::Mod, a.clone(), b.clone()), Expr::Int(0))
}

pub(crate) fn euclidean_division(a: Expr, b: Expr) -> Expr {
    let q = bin(BinOp::Div, a.clone(), b.clone());
    let adjust = if positive_literal(&b) {
        negative_remainder(&a, &b)
    } else {
        bin(BinOp::Mul, negative_remainder(&a, &b), sign(&b))
    };
    bin(BinOp::Sub, q, adjust)
}

pub(crate) fn euclidean_modulus(a: Expr, b: Expr) -> Expr {
    let r = bin(BinOp::Mod, a.clone(), b.clone());
    let magnitude = if positive_literal(&b) {
        b.clone()
    } else {
        bin(BinOp::Mul, b.clone(), sign(&b))
    };
    bin(BinOp::Add, r, bin(BinOp::Mul, negative_remainder(&a, &b), magnitude))
}

fn two_args(name: &str, mut args: Vec<Expr>) -> Result<(Expr, Expr), TranspileError> {
    if args.len() != 2 {
        return Err(TranspileError::UnknownRuntimeCall(format!("{name}/{}", args.len())));
    }
    let b = args.pop().expect("len 2");
    let a = args.pop().expect("len 2");
    Ok((a, b))
}

fn rewrite(e: &Expr) -> Result<Expr, TranspileError> {
    Ok(match e {
        Expr::Call { func, args } => {
            let args: Vec<Expr> = args.iter().map(rewrite).collect::<Result<_, _>>()?;
            match func.dotted() {
                Some(path) if path.starts_with("_dafny.") => runtime_call(&path, args)?,
                Some(path) if path.starts_with(&format!("{WRAPPER_CLASS}.")) || path.starts_with("module_.") => {
                    let name = path.rsplit('.').next().expect("non-empty").to_string();
                    Expr::call(Expr::Name(name), args)
                }
                _ => Expr::call(rewrite(func)?, args),
            }
        }
        Expr::Attr(base, attr) => {
            if let Some(path) = e.dotted() {
                if path.starts_with("_dafny.") || path == "_dafny" {
                    return Err(TranspileError::UnknownRuntimeCall(path));
                }
            }
            Expr::Attr(Box::new(rewrite(base)?), attr.clone())
        }
        Expr::Name(n) if n == "_dafny" => return Err(TranspileError::UnknownRuntimeCall(n.clone())),
        Expr::Index(b, i) => Expr::Index(Box::new(rewrite(b)?), Box::new(rewrite(i)?)),
        Expr::Binary(op, l, r) => Expr::binary(*op, rewrite(l)?, rewrite(r)?),
        Expr::Unary(op, x) => Expr::Unary(*op, Box::new(rewrite(x)?)),
        Expr::Compare(op, l, r) => Expr::compare(*op, rewrite(l)?, rewrite(r)?),
        Expr::Bool2(op, l, r) => Expr::Bool2(*op, Box::new(rewrite(l)?), Box::new(rewrite(r)?)),
        Expr::Not(x) => Expr::Not(Box::new(rewrite(x)?)),
        Expr::Tuple(xs) => Expr::Tuple(xs.iter().map(rewrite).collect::<Result<_, _>>()?),
        Expr::List(xs) => Expr::List(xs.iter().map(rewrite).collect::<Result<_, _>>()?),
        other => other.clone(),
    })
}

fn runtime_call(path: &str, args: Vec<Expr>) -> Result<Expr, TranspileError> {
    let helper = &path["_dafny.".len()..];
    Ok(match helper {
        "euclidian_division" => {
            let (a, b) = two_args(path, args)?;
            euclidean_division(a, b)
        }
        "euclidian_modulus" => {
            let (a, b) = two_args(path, args)?;
            euclidean_modulus(a, b)
        }
        "IntegerRange" => Expr::call(Expr::name("range"), args),
        "BigRational" => match args.as_slice() {
            [Expr::Int(v)] => Expr::Float(*v as f64),
            [Expr::Float(v)] => Expr::Float(*v),
            [Expr::Str(s)] => Expr::Float(
                s.parse()
                    .map_err(|_| TranspileError::UnknownRuntimeCall(format!("{path}({s:?})")))?,
            ),
            _ => return Err(TranspileError::UnknownRuntimeCall(path.to_string())),
        },
        "Array" | "newArray" => Expr::call(Expr::name(ALLOC_MARKER), args),
        _ => return Err(TranspileError::UnknownRuntimeCall(path.to_string())),
    })
}

/// True when no expression or import in `ast` mentions a runtime module.
pub fn is_runtime_free(ast: &ScriptAst) -> bool {
    fn expr_clean(e: &Expr) -> bool {
        match e {
            Expr::Name(n) => !is_runtime_module(n) && n != WRAPPER_CLASS,
            Expr::Attr(b, _) => expr_clean(b),
            Expr::Call { func, args } => expr_clean(func) && args.iter().all(expr_clean),
            Expr::Index(a, b) | Expr::Binary(_, a, b) | Expr::Compare(_, a, b) | Expr::Bool2(_, a, b) => {
                expr_clean(a) && expr_clean(b)
            }
            Expr::Unary(_, x) | Expr::Not(x) => expr_clean(x),
            Expr::Tuple(xs) | Expr::List(xs) => xs.iter().all(expr_clean),
            _ => true,
        }
    }
    fn block_clean(b: &[Stmt]) -> bool {
        b.iter().all(|s| match &s.kind {
            StmtKind::Return(e) => e.as_ref().map_or(true, expr_clean),
            StmtKind::Assign { target, value } => expr_clean(target) && expr_clean(value),
            StmtKind::AnnAssign { value, .. } => value.as_ref().map_or(true, expr_clean),
            StmtKind::AugAssign { target, value, .. } => expr_clean(target) && expr_clean(value),
            StmtKind::If { cond, body, orelse } => expr_clean(cond) && block_clean(body) && block_clean(orelse),
            StmtKind::For { iter, body, .. } => expr_clean(iter) && block_clean(body),
            StmtKind::While { cond, body } => expr_clean(cond) && block_clean(body),
            StmtKind::With { context, body } => expr_clean(context) && block_clean(body),
            StmtKind::Expr(e) => expr_clean(e),
            _ => true,
        })
    }
    ast.imports.iter().all(|m| !is_runtime_module(m))
        && ast.functions.iter().all(|f| block_clean(&f.body))
        && ast
            .classes
            .iter()
            .all(|c| c.name != WRAPPER_CLASS && c.functions.iter().all(|f| block_clean(&f.body)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pyast::parse_compiled_source;

    const CUBE: &str = "import sys\nfrom typing import Callable, Any\nimport module_ as module_\nimport _dafny as _dafny\nimport System_ as System_\n\nclass default__:\n    def  __init__(self):\n        pass\n\n    @staticmethod\n    def Cube(n):\n        c: int = int(0)\n        c = ((n) * (n)) * (n)\n        return c\n";

    #[test]
    fn hoists_wrapper_and_drops_imports() {
        let ast = sanitize(&parse_compiled_source(CUBE).unwrap()).unwrap();
        assert!(ast.imports.is_empty());
        assert!(ast.classes.is_empty());
        assert_eq!(ast.functions.len(), 1);
        assert_eq!(ast.functions[0].name, "Cube");
        assert!(ast.functions[0].decorators.is_empty());
        assert!(is_runtime_free(&ast));
    }

    #[test]
    fn euclidean_division_rewrite() {
        let src = "def f(a, b):\n    return _dafny.euclidian_division(a, b)\n";
        let ast = sanitize(&parse_compiled_source(src).unwrap()).unwrap();
        let StmtKind::Return(Some(e)) = &ast.functions[0].body[0].kind else {
            panic!()
        };
        let expect = parse_compiled_source("def g(a, b):\n    return a / b - (a % b < 0) * ((b > 0) - (b < 0))\n").unwrap();
        let StmtKind::Return(Some(x)) = &expect.functions[0].body[0].kind else {
            panic!()
        };
        assert_eq!(e, x);
    }

    #[test]
    fn positive_literal_divisor_folds_sign() {
        let src = "def f(a):\n    return _dafny.euclidian_division(a, 2) + _dafny.euclidian_modulus(a, 3)\n";
        let ast = sanitize(&parse_compiled_source(src).unwrap()).unwrap();
        let expect = parse_compiled_source("def f(a):\n    return (a / 2 - (a % 2 < 0)) + (a % 3 + (a % 3 < 0) * 3)\n").unwrap();
        assert_eq!(ast.functions[0].body, expect.functions[0].body);
    }

    #[test]
    fn runtime_range_and_labels() {
        let src = "def f(n):\n    s = 0\n    with _dafny.label(\"L\"):\n        for i in _dafny.IntegerRange(0, n):\n            s = s + i\n    return s\n";
        let ast = sanitize(&parse_compiled_source(src).unwrap()).unwrap();
        let body = &ast.functions[0].body;
        assert_eq!(body.len(), 3);
        let StmtKind::For { iter, .. } = &body[1].kind else {
            panic!("{:?}", body[1])
        };
        assert_eq!(iter, &Expr::call(Expr::name("range"), vec![Expr::Int(0), Expr::name("n")]));
    }

    #[test]
    fn unknown_helper_is_reported() {
        let src = "def f(n):\n    return _dafny.Quantifier(n)\n";
        assert_eq!(
            sanitize(&parse_compiled_source(src).unwrap()),
            Err(TranspileError::UnknownRuntimeCall("_dafny.Quantifier".into()))
        );
    }

    #[test]
    fn idempotent() {
        for src in [
            CUBE,
            "def f(a, b):\n    return _dafny.euclidian_modulus(_dafny.euclidian_division(a, b), 7)\n",
            "class default__:\n    @staticmethod\n    def F(n):\n        return default__.F(n - 1)\n",
        ] {
            let once = sanitize(&parse_compiled_source(src).unwrap()).unwrap();
            assert_eq!(sanitize(&once).unwrap(), once);
        }
    }

    #[test]
    fn clean_input_unchanged() {
        let src = "def f(a):\n    b = a * 2\n    return b\n";
        let ast = parse_compiled_source(src).unwrap();
        assert_eq!(sanitize(&ast).unwrap(), ast);
    }

    #[test]
    fn internal_calls_are_unqualified() {
        let src = "class default__:\n    @staticmethod\n    def F(n):\n        return default__.F(n - 1)\n";
        let ast = sanitize(&parse_compiled_source(src).unwrap()).unwrap();
        let StmtKind::Return(Some(Expr::Call { func, .. })) = &ast.functions[0].body[0].kind else {
            panic!()
        };
        assert_eq!(**func, Expr::name("F"));
    }
}
