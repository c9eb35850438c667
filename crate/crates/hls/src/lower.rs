//! Lowers a sanitized program to [`KernelIR`], enforcing the hardware rules:
//! no recursion, no while-loops, no dynamic allocation, statically bounded
//! loops, int32/float32/static-array types and affine array indexing.
//!
//! A loop bound is static when, after substituting locals that are assigned
//! exactly once at the top level of the function, it is built from literals
//! and parameters that are never reassigned.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::error::{RejectionReason as R, TranspileError};
use crate::ir::{snake_case, IrBinOp, IrExpr, IrParam, IrStmt, IrType, KernelIR, LValue, Local, ScalarType};
use crate::pyast::{BinOp, BoolOp, CmpOp, Expr, FunctionAst, ScriptAst, Stmt, StmtKind, UnOp};
use crate::sanitize::ALLOC_MARKER;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LowerOptions {
    /// Function to lower; defaults to the first function no other calls.
    pub top: Option<String>,
    /// Parameter types by name; unannotated scalars default to int32.
    pub param_types: BTreeMap<String, IrType>,
}

pub fn lower(ast: &ScriptAst, opts: &LowerOptions) -> Result<KernelIR, TranspileError> {
    let funcs: BTreeMap<&str, &FunctionAst> = ast.functions.iter().map(|f| (f.name.as_str(), f)).collect();
    let top = select_top(ast, opts)?;
    check_recursion(top, &funcs)?;
    let mut reachable = BTreeSet::new();
    collect_reachable(top, &funcs, &mut reachable);
    for name in &reachable {
        let f = funcs[name.as_str()];
        scan_forbidden(&f.body)?;
    }
    let mut lowered: HashMap<String, KernelIR> = HashMap::new();
    lower_function(top, &funcs, &opts.param_types, &mut lowered)
}

fn select_top<'a>(ast: &'a ScriptAst, opts: &LowerOptions) -> Result<&'a FunctionAst, TranspileError> {
    if let Some(name) = &opts.top {
        return ast
            .functions
            .iter()
            .find(|f| &f.name == name)
            .ok_or_else(|| TranspileError::NoSuchFunction(name.clone()));
    }
    let mut called = BTreeSet::new();
    for f in &ast.functions {
        let mut calls = BTreeSet::new();
        block_calls(&f.body, &mut calls);
        calls.remove(&f.name);
        called.extend(calls);
    }
    ast.functions
        .iter()
        .find(|f| !called.contains(&f.name))
        .or_else(|| ast.functions.first())
        .ok_or(TranspileError::NoFunction)
}

fn expr_calls(e: &Expr, out: &mut BTreeSet<String>) {
    match e {
        Expr::Call { func, args } => {
            if let Expr::Name(n) = func.as_ref() {
                out.insert(n.clone());
            } else {
                expr_calls(func, out);
            }
            args.iter().for_each(|a| expr_calls(a, out));
        }
        Expr::Attr(b, _) | Expr::Unary(_, b) | Expr::Not(b) => expr_calls(b, out),
        Expr::Index(a, b) | Expr::Binary(_, a, b) | Expr::Compare(_, a, b) | Expr::Bool2(_, a, b) => {
            expr_calls(a, out);
            expr_calls(b, out);
        }
        Expr::Tuple(xs) | Expr::List(xs) => xs.iter().for_each(|x| expr_calls(x, out)),
        _ => {}
    }
}

fn stmt_exprs(s: &Stmt) -> Vec<&Expr> {
    match &s.kind {
        StmtKind::Return(Some(e)) | StmtKind::Expr(e) => vec![e],
        StmtKind::Assign { target, value } | StmtKind::AugAssign { target, value, .. } => vec![target, value],
        StmtKind::AnnAssign { value: Some(v), .. } => vec![v],
        StmtKind::If { cond, .. } | StmtKind::While { cond, .. } => vec![cond],
        StmtKind::For { iter, .. } => vec![iter],
        StmtKind::With { context, .. } => vec![context],
        _ => vec![],
    }
}

fn stmt_children(s: &Stmt) -> Vec<&[Stmt]> {
    match &s.kind {
        StmtKind::If { body, orelse, .. } => vec![body, orelse],
        StmtKind::For { body, .. } | StmtKind::While { body, .. } | StmtKind::With { body, .. } => vec![body],
        _ => vec![],
    }
}

fn block_calls(b: &[Stmt], out: &mut BTreeSet<String>) {
    for s in b {
        stmt_exprs(s).into_iter().for_each(|e| expr_calls(e, out));
        stmt_children(s).into_iter().for_each(|c| block_calls(c, out));
    }
}

fn callees(f: &FunctionAst, funcs: &BTreeMap<&str, &FunctionAst>) -> Vec<String> {
    let mut calls = BTreeSet::new();
    block_calls(&f.body, &mut calls);
    calls.into_iter().filter(|c| funcs.contains_key(c.as_str())).collect()
}

fn check_recursion(top: &FunctionAst, funcs: &BTreeMap<&str, &FunctionAst>) -> Result<(), TranspileError> {
    fn dfs(
        name: &str,
        funcs: &BTreeMap<&str, &FunctionAst>,
        stack: &mut Vec<String>,
        done: &mut BTreeSet<String>,
    ) -> Result<(), TranspileError> {
        if let Some(pos) = stack.iter().position(|s| s == name) {
            let mut cycle: Vec<&str> = stack[pos..].iter().map(String::as_str).collect();
            cycle.push(name);
            let detail = if cycle.len() == 2 {
                format!("`{name}` calls itself")
            } else {
                format!("call cycle {}", cycle.join(" -> "))
            };
            return Err(TranspileError::reject(R::Recursion, detail));
        }
        if done.contains(name) {
            return Ok(());
        }
        stack.push(name.to_string());
        for c in callees(funcs[name], funcs) {
            dfs(&c, funcs, stack, done)?;
        }
        stack.pop();
        done.insert(name.to_string());
        Ok(())
    }
    dfs(&top.name, funcs, &mut Vec::new(), &mut BTreeSet::new())
}

fn collect_reachable(f: &FunctionAst, funcs: &BTreeMap<&str, &FunctionAst>, out: &mut BTreeSet<String>) {
    if !out.insert(f.name.clone()) {
        return;
    }
    for c in callees(f, funcs) {
        collect_reachable(funcs[c.as_str()], funcs, out);
    }
}

fn expr_allocates(e: &Expr) -> bool {
    match e {
        Expr::List(_) => true,
        Expr::Call { func, args } => {
            matches!(func.as_ref(), Expr::Name(n) if n == ALLOC_MARKER || n == "list")
                || expr_allocates(func)
                || args.iter().any(expr_allocates)
        }
        Expr::Attr(b, _) | Expr::Unary(_, b) | Expr::Not(b) => expr_allocates(b),
        Expr::Index(a, b) | Expr::Binary(_, a, b) | Expr::Compare(_, a, b) | Expr::Bool2(_, a, b) => {
            expr_allocates(a) || expr_allocates(b)
        }
        Expr::Tuple(xs) => xs.iter().any(expr_allocates),
        _ => false,
    }
}

/// While-loops first, then allocation, in source order within each rule.
fn scan_forbidden(body: &[Stmt]) -> Result<(), TranspileError> {
    fn find_while(b: &[Stmt]) -> Option<usize> {
        b.iter().find_map(|s| {
            if matches!(s.kind, StmtKind::While { .. }) {
                Some(s.line)
            } else {
                stmt_children(s).into_iter().find_map(find_while)
            }
        })
    }
    fn find_alloc(b: &[Stmt]) -> Option<usize> {
        b.iter().find_map(|s| {
            if stmt_exprs(s).into_iter().any(expr_allocates) {
                Some(s.line)
            } else {
                stmt_children(s).into_iter().find_map(find_alloc)
            }
        })
    }
    if let Some(line) = find_while(body) {
        return Err(TranspileError::reject(R::WhileLoop, format!("while-loop at line {line}")));
    }
    if let Some(line) = find_alloc(body) {
        return Err(TranspileError::reject(
            R::DynamicAlloc,
            format!("dynamic allocation at line {line}"),
        ));
    }
    Ok(())
}

fn annotation_type(e: &Expr, line: usize) -> Result<IrType, TranspileError> {
    match e.dotted().as_deref() {
        Some("int") | Some("bool") => Ok(IrType::INT32),
        Some("float") => Ok(IrType::FLOAT32),
        _ => Err(TranspileError::reject(
            R::UnsupportedType,
            format!("type annotation at line {line} is not int, bool or float"),
        )),
    }
}

fn assigned_names(body: &[Stmt], out: &mut BTreeMap<String, usize>) {
    for s in body {
        match &s.kind {
            StmtKind::Assign { target: Expr::Name(n), .. }
            | StmtKind::AugAssign { target: Expr::Name(n), .. }
            | StmtKind::AnnAssign { target: n, value: Some(_), .. } => *out.entry(n.clone()).or_default() += 1,
            StmtKind::For { var, .. } => *out.entry(var.clone()).or_default() += 1,
            _ => {}
        }
        stmt_children(s).into_iter().for_each(|c| assigned_names(c, out));
    }
}

struct Ctx<'a> {
    funcs: &'a BTreeMap<&'a str, &'a FunctionAst>,
    hints: &'a BTreeMap<String, IrType>,
    lowered: &'a mut HashMap<String, KernelIR>,
    params: Vec<IrParam>,
    locals: Vec<Local>,
    /// Assignment count per name over the whole function.
    assign_counts: BTreeMap<String, usize>,
    /// Single-assignment top-level locals with static values.
    static_defs: HashMap<String, IrExpr>,
    loop_vars: Vec<String>,
}

impl Ctx<'_> {
    fn var_type(&self, name: &str) -> Option<IrType> {
        if self.loop_vars.iter().any(|v| v == name) {
            return Some(IrType::INT32);
        }
        if let Some(p) = self.params.iter().find(|p| p.name == name) {
            return Some(p.ty);
        }
        self.locals
            .iter()
            .find(|l| l.name == name)
            .map(|l| IrType::Scalar { ty: l.ty })
    }

    fn is_static_param(&self, name: &str) -> bool {
        self.params
            .iter()
            .any(|p| p.name == name && p.ty.scalar().is_some() && !self.assign_counts.contains_key(name))
    }

    fn declare(&mut self, name: &str, ty: ScalarType, line: usize) -> Result<(), TranspileError> {
        match self.var_type(name) {
            None => {
                self.locals.push(Local {
                    name: name.to_string(),
                    ty,
                });
                Ok(())
            }
            Some(IrType::Scalar { ty: existing }) if existing == ty => Ok(()),
            Some(IrType::Scalar { ty: ScalarType::Float32 }) if ty == ScalarType::Int32 => Ok(()),
            Some(_) => Err(TranspileError::reject(
                R::UnsupportedType,
                format!("`{name}` changes type at line {line}"),
            )),
        }
    }

    fn substitute_static(&self, e: &IrExpr) -> IrExpr {
        e.substitute(&|n| self.static_defs.get(n).cloned())
    }

    fn is_static(&self, e: &IrExpr) -> bool {
        match e {
            IrExpr::IntLit { .. } => true,
            IrExpr::Var { name } => self.is_static_param(name),
            IrExpr::BinOp { op, lhs, rhs } => !op.is_logical() && self.is_static(lhs) && self.is_static(rhs),
            IrExpr::Neg { operand } => self.is_static(operand),
            _ => false,
        }
    }

    fn is_affine(&self, e: &IrExpr) -> bool {
        match e {
            IrExpr::IntLit { .. } => true,
            IrExpr::Var { name } => self.loop_vars.contains(name) || self.is_static_param(name),
            IrExpr::Neg { operand } => self.is_affine(operand),
            IrExpr::BinOp { op, lhs, rhs } => match op {
                IrBinOp::Add | IrBinOp::Sub => self.is_affine(lhs) && self.is_affine(rhs),
                IrBinOp::Mul => {
                    (lhs.const_int().is_some() && self.is_affine(rhs))
                        || (rhs.const_int().is_some() && self.is_affine(lhs))
                }
                _ => false,
            },
            _ => false,
        }
    }

    fn expr(&mut self, e: &Expr, line: usize) -> Result<(IrExpr, ScalarType), TranspileError> {
        let int = ScalarType::Int32;
        Ok(match e {
            Expr::Int(v) => {
                let v = i32::try_from(*v).map_err(|_| {
                    TranspileError::reject(R::UnsupportedType, format!("literal {v} at line {line} exceeds int32"))
                })?;
                (IrExpr::int(v), int)
            }
            Expr::Float(v) => (IrExpr::FloatLit { value: *v as f32 }, ScalarType::Float32),
            Expr::Bool(b) => (IrExpr::int(i32::from(*b)), int),
            Expr::Str(_) => {
                return Err(TranspileError::reject(R::UnsupportedType, format!("string value at line {line}")))
            }
            Expr::NoneLit => {
                return Err(TranspileError::reject(R::UnsupportedType, format!("None value at line {line}")))
            }
            Expr::Tuple(_) => {
                return Err(TranspileError::reject(R::UnsupportedType, format!("tuple value at line {line}")))
            }
            Expr::List(_) => {
                return Err(TranspileError::reject(R::DynamicAlloc, format!("list display at line {line}")))
            }
            Expr::Name(n) => match self.var_type(n) {
                Some(IrType::Scalar { ty }) => (IrExpr::var(n), ty),
                Some(IrType::Array { .. }) => {
                    return Err(TranspileError::reject(
                        R::UnsupportedType,
                        format!("array `{n}` used as a value at line {line}"),
                    ))
                }
                None => return Err(TranspileError::unsupported(line, format!("undefined name `{n}`"))),
            },
            Expr::Index(base, idx) => {
                let Expr::Name(a) = base.as_ref() else {
                    return Err(TranspileError::unsupported(line, "subscript of a computed value"));
                };
                let elem = match self.var_type(a) {
                    Some(IrType::Array { elem, .. }) => elem,
                    _ => {
                        return Err(TranspileError::reject(
                            R::NonStaticBound,
                            format!("`{a}` is indexed but has no static array length (line {line})"),
                        ))
                    }
                };
                let i = self.index_expr(idx, line)?;
                (IrExpr::index(a, i), elem)
            }
            Expr::Binary(op, l, r) => {
                let (le, lt) = self.expr(l, line)?;
                let (re, rt) = self.expr(r, line)?;
                let ir_op = match op {
                    BinOp::Add => IrBinOp::Add,
                    BinOp::Sub => IrBinOp::Sub,
                    BinOp::Mul => IrBinOp::Mul,
                    BinOp::Div => IrBinOp::Div,
                    BinOp::Mod => IrBinOp::Mod,
                    other => {
                        return Err(TranspileError::unsupported(line, format!("operator {other:?}")));
                    }
                };
                let ty = if lt == ScalarType::Float32 || rt == ScalarType::Float32 {
                    ScalarType::Float32
                } else {
                    int
                };
                if ir_op == IrBinOp::Mod && ty == ScalarType::Float32 {
                    return Err(TranspileError::reject(
                        R::UnsupportedType,
                        format!("float remainder at line {line}"),
                    ));
                }
                (IrExpr::bin(ir_op, le, re), ty)
            }
            Expr::Compare(op, l, r) => {
                let (le, _) = self.expr(l, line)?;
                let (re, _) = self.expr(r, line)?;
                let ir_op = match op {
                    CmpOp::Lt => IrBinOp::Lt,
                    CmpOp::Le => IrBinOp::Le,
                    CmpOp::Gt => IrBinOp::Gt,
                    CmpOp::Ge => IrBinOp::Ge,
                    CmpOp::Eq => IrBinOp::Eq,
                    CmpOp::Ne => IrBinOp::Ne,
                };
                (IrExpr::bin(ir_op, le, re), int)
            }
            Expr::Bool2(op, l, r) => {
                let (le, _) = self.expr(l, line)?;
                let (re, _) = self.expr(r, line)?;
                let ir_op = match op {
                    BoolOp::And => IrBinOp::And,
                    BoolOp::Or => IrBinOp::Or,
                };
                (IrExpr::bin(ir_op, le, re), int)
            }
            Expr::Not(x) => {
                let (xe, _) = self.expr(x, line)?;
                (IrExpr::bin(IrBinOp::Eq, xe, IrExpr::int(0)), int)
            }
            Expr::Unary(UnOp::Neg, x) => {
                let (xe, t) = self.expr(x, line)?;
                match xe {
                    IrExpr::IntLit { value } if value != i32::MIN => (IrExpr::int(-value), t),
                    IrExpr::FloatLit { value } => (IrExpr::FloatLit { value: -value }, t),
                    other => (
                        IrExpr::Neg {
                            operand: Box::new(other),
                        },
                        t,
                    ),
                }
            }
            Expr::Unary(UnOp::Pos, x) => self.expr(x, line)?,
            Expr::Unary(UnOp::Invert, _) => return Err(TranspileError::unsupported(line, "bitwise not")),
            Expr::Call { func, args } => self.call(func, args, line)?,
            Expr::Attr(..) => return Err(TranspileError::unsupported(line, "attribute access")),
        })
    }

    fn index_expr(&mut self, idx: &Expr, line: usize) -> Result<IrExpr, TranspileError> {
        let (i, t) = self.expr(idx, line)?;
        if t != ScalarType::Int32 {
            return Err(TranspileError::reject(R::UnsupportedType, format!("float index at line {line}")));
        }
        let substituted = self.substitute_static(&i);
        if !self.is_affine(&substituted) {
            return Err(TranspileError::reject(
                R::NonAffineIndex,
                format!("index at line {line} is not affine in loop counters and constants"),
            ));
        }
        Ok(i)
    }

    fn call(&mut self, func: &Expr, args: &[Expr], line: usize) -> Result<(IrExpr, ScalarType), TranspileError> {
        let Expr::Name(name) = func else {
            return Err(TranspileError::unsupported(line, "call of a computed function"));
        };
        match (name.as_str(), args) {
            ("int", [x]) => {
                let (e, t) = self.expr(x, line)?;
                if t != ScalarType::Int32 {
                    return Err(TranspileError::reject(
                        R::UnsupportedType,
                        format!("float-to-int conversion at line {line}"),
                    ));
                }
                return Ok((e, t));
            }
            ("float", [x]) => {
                let (e, _) = self.expr(x, line)?;
                let e = match e {
                    IrExpr::IntLit { value } => IrExpr::FloatLit { value: value as f32 },
                    IrExpr::FloatLit { .. } => e,
                    _ => {
                        return Err(TranspileError::reject(
                            R::UnsupportedType,
                            format!("int-to-float conversion at line {line}"),
                        ))
                    }
                };
                return Ok((e, ScalarType::Float32));
            }
            ("len", [Expr::Name(a)]) => {
                if let Some(IrType::Array { len, .. }) = self.var_type(a) {
                    let len = i32::try_from(len)
                        .map_err(|_| TranspileError::reject(R::UnsupportedType, "array too long"))?;
                    return Ok((IrExpr::int(len), ScalarType::Int32));
                }
                return Err(TranspileError::reject(
                    R::NonStaticBound,
                    format!("len() of `{a}` without a static length (line {line})"),
                ));
            }
            ("range", _) => return Err(TranspileError::unsupported(line, "range() outside a for header")),
            _ => {}
        }
        let Some(helper) = self.funcs.get(name.as_str()).copied() else {
            return Err(TranspileError::unsupported(line, format!("call to `{name}`")));
        };
        if !self.lowered.contains_key(name) {
            let k = lower_function(helper, self.funcs, self.hints, self.lowered)?;
            self.lowered.insert(name.clone(), k);
        }
        let k = &self.lowered[name];
        let (Some(ret_ty), [IrStmt::Return { value: Some(body) }]) = (k.return_type, k.body.as_slice()) else {
            return Err(TranspileError::unsupported(
                line,
                format!("call to `{name}`, which is not a single-expression function"),
            ));
        };
        if args.len() != k.params.len() {
            return Err(TranspileError::unsupported(line, format!("arity mismatch calling `{name}`")));
        }
        let (body, params) = (body.clone(), k.params.clone());
        let mut actuals = HashMap::new();
        for (p, a) in params.iter().zip(args) {
            if p.ty.scalar().is_none() {
                return Err(TranspileError::unsupported(line, "array argument to an inlined call"));
            }
            actuals.insert(p.name.clone(), self.expr(a, line)?.0);
        }
        Ok((body.substitute(&|n| actuals.get(n).cloned()), ret_ty))
    }

    fn block(&mut self, body: &[Stmt], top_level: bool) -> Result<Vec<IrStmt>, TranspileError> {
        let mut out = Vec::new();
        for s in body {
            self.stmt(s, top_level, &mut out)?;
        }
        Ok(out)
    }

    fn assign(&mut self, target: &Expr, value: IrExpr, vty: ScalarType, line: usize, top_level: bool) -> Result<IrStmt, TranspileError> {
        match target {
            Expr::Name(n) => {
                if self.loop_vars.contains(n) {
                    return Err(TranspileError::reject(
                        R::NonStaticBound,
                        format!("loop counter `{n}` assigned at line {line}"),
                    ));
                }
                match self.var_type(n) {
                    Some(IrType::Array { .. }) => {
                        return Err(TranspileError::reject(
                            R::DynamicAlloc,
                            format!("array `{n}` rebound at line {line}"),
                        ))
                    }
                    Some(IrType::Scalar { ty: ScalarType::Int32 }) if vty == ScalarType::Float32 => {
                        return Err(TranspileError::reject(
                            R::UnsupportedType,
                            format!("float stored into int `{n}` at line {line}"),
                        ))
                    }
                    Some(_) => {}
                    None => self.declare(n, vty, line)?,
                }
                if top_level && self.assign_counts.get(n) == Some(&1) {
                    let sub = self.substitute_static(&value);
                    if self.is_static(&sub) {
                        self.static_defs.insert(n.clone(), sub);
                    }
                }
                Ok(IrStmt::Assign {
                    target: LValue::Var { name: n.clone() },
                    value,
                })
            }
            Expr::Index(base, idx) => {
                let Expr::Name(a) = base.as_ref() else {
                    return Err(TranspileError::unsupported(line, "subscript of a computed value"));
                };
                let elem = match self.var_type(a) {
                    Some(IrType::Array { elem, .. }) => elem,
                    _ => {
                        return Err(TranspileError::reject(
                            R::NonStaticBound,
                            format!("`{a}` is indexed but has no static array length (line {line})"),
                        ))
                    }
                };
                if elem == ScalarType::Int32 && vty == ScalarType::Float32 {
                    return Err(TranspileError::reject(
                        R::UnsupportedType,
                        format!("float stored into int array `{a}` at line {line}"),
                    ));
                }
                let index = self.index_expr(idx, line)?;
                Ok(IrStmt::Assign {
                    target: LValue::Index { array: a.clone(), index },
                    value,
                })
            }
            Expr::Tuple(_) => Err(TranspileError::reject(
                R::UnsupportedType,
                format!("tuple assignment at line {line}"),
            )),
            _ => Err(TranspileError::unsupported(line, "assignment target")),
        }
    }

    fn stmt(&mut self, s: &Stmt, top_level: bool, out: &mut Vec<IrStmt>) -> Result<(), TranspileError> {
        let line = s.line;
        match &s.kind {
            StmtKind::Pass => {}
            StmtKind::AnnAssign {
                target,
                annotation,
                value,
            } => {
                let ty = annotation_type(annotation, line)?;
                let sty = ty.scalar().expect("annotations are scalar");
                self.declare(target, sty, line)?;
                if let Some(v) = value {
                    let (e, vty) = self.expr(v, line)?;
                    out.push(self.assign(&Expr::Name(target.clone()), e, vty, line, top_level)?);
                }
            }
            StmtKind::Assign { target, value } => {
                let (e, vty) = self.expr(value, line)?;
                out.push(self.assign(target, e, vty, line, top_level)?);
            }
            StmtKind::AugAssign { target, op, value } => {
                let combined = Expr::binary(*op, target.clone(), value.clone());
                let (e, vty) = self.expr(&combined, line)?;
                out.push(self.assign(target, e, vty, line, false)?);
            }
            StmtKind::If { cond, body, orelse } => {
                let (c, _) = self.expr(cond, line)?;
                let then_body = self.block(body, false)?;
                let else_body = self.block(orelse, false)?;
                out.push(IrStmt::If {
                    cond: c,
                    then_body,
                    else_body,
                });
            }
            StmtKind::For { var, iter, body } => out.push(self.for_loop(var, iter, body, line)?),
            StmtKind::While { .. } => {
                return Err(TranspileError::reject(R::WhileLoop, format!("while-loop at line {line}")));
            }
            StmtKind::Break => {
                return Err(TranspileError::reject(
                    R::NonStaticBound,
                    format!("break at line {line} makes the trip count data-dependent"),
                ));
            }
            StmtKind::Continue => return Err(TranspileError::unsupported(line, "continue")),
            StmtKind::Return(v) => {
                let value = match v {
                    None => None,
                    Some(e) => Some(self.expr(e, line)?.0),
                };
                out.push(IrStmt::Return { value });
            }
            StmtKind::With { .. } => return Err(TranspileError::unsupported(line, "with block")),
            StmtKind::Expr(_) => return Err(TranspileError::unsupported(line, "expression statement")),
        }
        Ok(())
    }

    fn for_loop(&mut self, var: &str, iter: &Expr, body: &[Stmt], line: usize) -> Result<IrStmt, TranspileError> {
        let Expr::Call { func, args } = iter else {
            return Err(TranspileError::unsupported(line, "iteration over a non-range value"));
        };
        if func.dotted().as_deref() != Some("range") {
            return Err(TranspileError::unsupported(line, "iteration over a non-range value"));
        }
        let (lo, hi) = match args.as_slice() {
            [hi] => (IrExpr::int(0), self.expr(hi, line)?),
            [lo, hi] => (self.expr(lo, line)?.0, self.expr(hi, line)?),
            _ => return Err(TranspileError::unsupported(line, "range() with a step")),
        };
        let (hi, hi_ty) = hi;
        if hi_ty != ScalarType::Int32 {
            return Err(TranspileError::reject(R::UnsupportedType, format!("float loop bound at line {line}")));
        }
        let (lo, hi) = (self.substitute_static(&lo), self.substitute_static(&hi));
        for b in [&lo, &hi] {
            if !self.is_static(b) {
                return Err(TranspileError::reject(
                    R::NonStaticBound,
                    format!("loop bound at line {line} is not static"),
                ));
            }
        }
        if self.assign_counts.get(var).copied().unwrap_or(0) > 1 {
            return Err(TranspileError::reject(
                R::NonStaticBound,
                format!("loop counter `{var}` is reassigned"),
            ));
        }
        if self.var_type(var).is_some() {
            return Err(TranspileError::unsupported(line, format!("loop counter `{var}` shadows a variable")));
        }
        self.loop_vars.push(var.to_string());
        let lowered = self.block(body, false);
        self.loop_vars.pop();
        Ok(IrStmt::For {
            id: String::new(),
            var: var.to_string(),
            lo,
            hi,
            body: lowered?,
        })
    }
}

fn lower_function(
    f: &FunctionAst,
    funcs: &BTreeMap<&str, &FunctionAst>,
    hints: &BTreeMap<String, IrType>,
    lowered: &mut HashMap<String, KernelIR>,
) -> Result<KernelIR, TranspileError> {
    let mut params = Vec::new();
    for p in &f.params {
        let ty = match (hints.get(&p.name), &p.annotation) {
            (Some(t), _) => *t,
            (None, Some(a)) => annotation_type(a, f.line)?,
            (None, None) => IrType::INT32,
        };
        params.push(IrParam {
            name: p.name.clone(),
            ty,
        });
    }
    let mut assign_counts = BTreeMap::new();
    assigned_names(&f.body, &mut assign_counts);
    let mut ctx = Ctx {
        funcs,
        hints,
        lowered,
        params,
        locals: Vec::new(),
        assign_counts,
        static_defs: HashMap::new(),
        loop_vars: Vec::new(),
    };
    let mut body = ctx.block(&f.body, true)?;
    let return_type = infer_return_type(&ctx, &body, f.line)?;
    let params = ctx.params;
    let mut locals = ctx.locals;
    simplify(&mut body, &params, &mut locals);
    number_loops(&mut body, &mut 0);
    Ok(KernelIR {
        name: snake_case(&f.name),
        source_name: f.name.clone(),
        params,
        return_type,
        locals,
        body,
        directives: Vec::new(),
    })
}

fn infer_return_type(ctx: &Ctx<'_>, body: &[IrStmt], line: usize) -> Result<Option<ScalarType>, TranspileError> {
    fn collect<'b>(b: &'b [IrStmt], out: &mut Vec<&'b Option<IrExpr>>) {
        for s in b {
            match s {
                IrStmt::Return { value } => out.push(value),
                IrStmt::For { body, .. } => collect(body, out),
                IrStmt::If {
                    then_body, else_body, ..
                } => {
                    collect(then_body, out);
                    collect(else_body, out);
                }
                IrStmt::Assign { .. } => {}
            }
        }
    }
    let mut rets = Vec::new();
    collect(body, &mut rets);
    let mut ty: Option<ScalarType> = None;
    let mut saw_void = false;
    for r in rets {
        match r {
            None => saw_void = true,
            Some(e) => {
                let t = expr_type(ctx, e);
                ty = Some(match ty {
                    Some(ScalarType::Float32) => ScalarType::Float32,
                    _ => t,
                });
            }
        }
    }
    if saw_void && ty.is_some() {
        return Err(TranspileError::reject(
            R::UnsupportedType,
            format!("function at line {line} mixes value and bare returns"),
        ));
    }
    Ok(ty)
}

fn expr_type(ctx: &Ctx<'_>, e: &IrExpr) -> ScalarType {
    match e {
        IrExpr::IntLit { .. } => ScalarType::Int32,
        IrExpr::FloatLit { .. } => ScalarType::Float32,
        IrExpr::Var { name } => ctx.var_type(name).map_or(ScalarType::Int32, IrType::elem),
        IrExpr::Index { array, .. } => ctx.var_type(array).map_or(ScalarType::Int32, IrType::elem),
        IrExpr::BinOp { op, lhs, rhs } => {
            if op.is_comparison() || op.is_logical() {
                ScalarType::Int32
            } else if expr_type(ctx, lhs) == ScalarType::Float32 || expr_type(ctx, rhs) == ScalarType::Float32 {
                ScalarType::Float32
            } else {
                ScalarType::Int32
            }
        }
        IrExpr::Neg { operand } => expr_type(ctx, operand),
    }
}

fn number_loops(body: &mut [IrStmt], next: &mut usize) {
    for s in body {
        match s {
            IrStmt::For { id, body, .. } => {
                *next += 1;
                *id = format!("L{next}");
                number_loops(body, next);
            }
            IrStmt::If {
                then_body, else_body, ..
            } => {
                number_loops(then_body, next);
                number_loops(else_body, next);
            }
            _ => {}
        }
    }
}

// ---------------------------------------------------------------------------
// Simplification

fn block_reads(b: &[IrStmt]) -> BTreeSet<String> {
    let mut s = BTreeSet::new();
    b.iter().for_each(|x| x.reads(&mut s));
    s
}

fn is_local(locals: &[Local], name: &str) -> bool {
    locals.iter().any(|l| l.name == name)
}

/// Drops top-level stores that are overwritten before being read, folds a
/// trailing `x = e; return x`, and removes locals that are never read.
fn simplify(body: &mut Vec<IrStmt>, params: &[IrParam], locals: &mut Vec<Local>) {
    loop {
        let mut changed = false;

        // dead initial stores
        let mut i = 0;
        while i < body.len() {
            let dead = match &body[i] {
                IrStmt::Assign {
                    target: LValue::Var { name },
                    ..
                } => body[i + 1..]
                    .iter()
                    .find(|s| s.touches(name))
                    .is_some_and(|next| match next {
                        IrStmt::Assign {
                            target: LValue::Var { name: n2 },
                            value,
                        } => n2 == name && !value.mentions(name),
                        _ => false,
                    }),
                _ => false,
            };
            if dead {
                body.remove(i);
                changed = true;
            } else {
                i += 1;
            }
        }

        // trailing `x = e; return x`
        let n = body.len();
        if n >= 2 {
            if let (
                IrStmt::Assign {
                    target: LValue::Var { name },
                    value,
                },
                IrStmt::Return {
                    value: Some(IrExpr::Var { name: ret }),
                },
            ) = (&body[n - 2], &body[n - 1])
            {
                if name == ret && is_local(locals, name) {
                    let v = value.clone();
                    body.truncate(n - 2);
                    body.push(IrStmt::Return { value: Some(v) });
                    changed = true;
                }
            }
        }

        // stores to never-read scalars
        let reads = block_reads(body);
        let unused: BTreeSet<String> = locals
            .iter()
            .map(|l| l.name.clone())
            .chain(params.iter().filter(|p| p.ty.scalar().is_some()).map(|p| p.name.clone()))
            .filter(|n| !reads.contains(n))
            .collect();
        if remove_stores(body, &unused) {
            changed = true;
        }
        let all_reads = block_reads(body);
        let mut writes = BTreeSet::new();
        body.iter().for_each(|s| s.writes(&mut writes));
        let before = locals.len();
        locals.retain(|l| all_reads.contains(&l.name) || writes.contains(&l.name));
        changed |= locals.len() != before;

        if !changed {
            break;
        }
    }
}

fn remove_stores(body: &mut Vec<IrStmt>, names: &BTreeSet<String>) -> bool {
    let before = body.len();
    body.retain(|s| !matches!(s, IrStmt::Assign { target: LValue::Var { name }, .. } if names.contains(name)));
    let mut changed = body.len() != before;
    for s in body.iter_mut() {
        match s {
            IrStmt::For { body, .. } => changed |= remove_stores(body, names),
            IrStmt::If {
                then_body, else_body, ..
            } => {
                changed |= remove_stores(then_body, names);
                changed |= remove_stores(else_body, names);
            }
            _ => {}
        }
    }
    changed
}

/// Independent re-check used by tests: the IR has no calls by construction,
/// so only loops and bounds need inspecting.
pub fn has_only_static_loops(k: &KernelIR) -> bool {
    fn walk(b: &[IrStmt], k: &KernelIR) -> bool {
        b.iter().all(|s| match s {
            IrStmt::For { lo, hi, body, .. } => static_expr(lo, k) && static_expr(hi, k) && walk(body, k),
            IrStmt::If {
                then_body, else_body, ..
            } => walk(then_body, k) && walk(else_body, k),
            _ => true,
        })
    }
    fn static_expr(e: &IrExpr, k: &KernelIR) -> bool {
        match e {
            IrExpr::IntLit { .. } => true,
            IrExpr::Var { name } => k.param(name).is_some(),
            IrExpr::BinOp { lhs, rhs, .. } => static_expr(lhs, k) && static_expr(rhs, k),
            IrExpr::Neg { operand } => static_expr(operand, k),
            _ => false,
        }
    }
    walk(&k.body, k)
}
