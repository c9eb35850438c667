//! Parser for the subset of Python emitted by Dafny's Python backend:
//! module imports, wrapper classes of static functions, integer/float
//! arithmetic, counted loops, conditionals and returns.

use serde::{Deserialize, Serialize};

use crate::error::TranspileError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptAst {
    pub imports: Vec<String>,
    pub classes: Vec<ClassAst>,
    pub functions: Vec<FunctionAst>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAst {
    pub name: String,
    pub line: usize,
    pub functions: Vec<FunctionAst>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionAst {
    pub name: String,
    pub line: usize,
    pub decorators: Vec<String>,
    pub params: Vec<Param>,
    pub returns: Option<Expr>,
    pub body: Vec<Stmt>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub annotation: Option<Expr>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stmt {
    pub line: usize,
    pub kind: StmtKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum StmtKind {
    Pass,
    Break,
    Continue,
    Return(Option<Expr>),
    Assign { target: Expr, value: Expr },
    AnnAssign { target: String, annotation: Expr, value: Option<Expr> },
    AugAssign { target: Expr, op: BinOp, value: Expr },
    If { cond: Expr, body: Vec<Stmt>, orelse: Vec<Stmt> },
    For { var: String, iter: Expr, body: Vec<Stmt> },
    While { cond: Expr, body: Vec<Stmt> },
    With { context: Expr, body: Vec<Stmt> },
    Expr(Expr),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    FloorDiv,
    Mod,
    Pow,
    BitAnd,
    BitOr,
    BitXor,
    Shl,
    Shr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CmpOp {
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoolOp {
    And,
    Or,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UnOp {
    Neg,
    Pos,
    Invert,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Expr {
    Int(i64),
    Float(f64),
    Str(String),
    Bool(bool),
    NoneLit,
    Name(String),
    Attr(Box<Expr>, String),
    Call { func: Box<Expr>, args: Vec<Expr> },
    Index(Box<Expr>, Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    Unary(UnOp, Box<Expr>),
    Compare(CmpOp, Box<Expr>, Box<Expr>),
    Bool2(BoolOp, Box<Expr>, Box<Expr>),
    Not(Box<Expr>),
    Tuple(Vec<Expr>),
    List(Vec<Expr>),
}

impl Expr {
    pub fn name(s: &str) -> Self {
        Expr::Name(s.to_string())
    }

    pub fn call(func: Expr, args: Vec<Expr>) -> Self {
        Expr::Call {
            func: Box::new(func),
            args,
        }
    }

    pub fn binary(op: BinOp, l: Expr, r: Expr) -> Self {
        Expr::Binary(op, Box::new(l), Box::new(r))
    }

    pub fn compare(op: CmpOp, l: Expr, r: Expr) -> Self {
        Expr::Compare(op, Box::new(l), Box::new(r))
    }

    /// Dotted path (`a.b.c`) when the expression is a chain of names.
    pub fn dotted(&self) -> Option<String> {
        match self {
            Expr::Name(n) => Some(n.clone()),
            Expr::Attr(base, attr) => base.dotted().map(|b| format!("{b}.{attr}")),
            _ => None,
        }
    }
}

// ---------------------------------------------------------------------------
// Tokenizer

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Name(String),
    Int(i64),
    Float(f64),
    Str(String),
    Op(&'static str),
    Newline,
    Indent,
    Dedent,
    Eof,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    line: usize,
}

const OPS: [&str; 38] = [
    "**=", "//=", ">>=", "<<=", "->", "**", "//", "<<", ">>", "<=", ">=", "==", "!=", "+=", "-=", "*=", "/=", "%=",
    "&=", "|=", "^=", ":=", "(", ")", "[", "]", "{", "}", ",", ":", ".", "=", "+", "-", "*", "/", "%", "@",
];
const SINGLE_OPS: [&str; 6] = ["<", ">", "&", "|", "^", "~"];

fn syntax(line: usize, message: impl Into<String>) -> TranspileError {
    TranspileError::Syntax {
        line,
        message: message.into(),
    }
}

fn tokenize(src: &str) -> Result<Vec<Token>, TranspileError> {
    let mut out = Vec::new();
    let mut indents = vec![0usize];
    let mut depth = 0usize;
    let mut last_line = 1;
    for (idx, raw) in src.lines().enumerate() {
        let line = idx + 1;
        last_line = line;
        let chars: Vec<char> = raw.chars().collect();
        let mut i = 0;
        if depth == 0 {
            let mut width = 0;
            while i < chars.len() && (chars[i] == ' ' || chars[i] == '\t') {
                if chars[i] == '\t' {
                    return Err(TranspileError::unsupported(line, "tab indentation"));
                }
                width += 1;
                i += 1;
            }
            if i == chars.len() || chars[i] == '#' {
                continue;
            }
            let cur = *indents.last().expect("non-empty");
            if width > cur {
                indents.push(width);
                out.push(Token { tok: Tok::Indent, line });
            } else {
                while width < *indents.last().expect("non-empty") {
                    indents.pop();
                    out.push(Token { tok: Tok::Dedent, line });
                }
                if width != *indents.last().expect("non-empty") {
                    return Err(syntax(line, "inconsistent dedent"));
                }
            }
        }
        while i < chars.len() {
            let c = chars[i];
            if c == ' ' || c == '\t' {
                i += 1;
                continue;
            }
            if c == '#' {
                break;
            }
            if c == '\\' && i + 1 == chars.len() {
                return Err(TranspileError::unsupported(line, "explicit line continuation"));
            }
            if c.is_ascii_alphabetic() || c == '_' {
                let start = i;
                while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                let word: String = chars[start..i].iter().collect();
                if i < chars.len() && (chars[i] == '"' || chars[i] == '\'') {
                    return Err(TranspileError::unsupported(line, format!("{word}-prefixed string literal")));
                }
                out.push(Token { tok: Tok::Name(word), line });
                continue;
            }
            if c.is_ascii_digit() || (c == '.' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())) {
                let start = i;
                let mut is_float = false;
                while i < chars.len() {
                    let d = chars[i];
                    if d.is_ascii_digit() || d == '_' {
                        i += 1;
                    } else if d == '.' && !is_float {
                        is_float = true;
                        i += 1;
                    } else if (d == 'e' || d == 'E')
                        && chars
                            .get(i + 1)
                            .is_some_and(|n| n.is_ascii_digit() || *n == '-' || *n == '+')
                    {
                        is_float = true;
                        i += 2;
                    } else {
                        break;
                    }
                }
                let text: String = chars[start..i].iter().filter(|&&d| d != '_').collect();
                if i < chars.len() && (chars[i].is_ascii_alphabetic()) {
                    return Err(syntax(line, format!("malformed number `{text}{}`", chars[i])));
                }
                let tok = if is_float {
                    Tok::Float(text.parse().map_err(|_| syntax(line, format!("bad float `{text}`")))?)
                } else {
                    Tok::Int(
                        text.parse()
                            .map_err(|_| TranspileError::unsupported(line, format!("integer literal {text}")))?,
                    )
                };
                out.push(Token { tok, line });
                continue;
            }
            if c == '"' || c == '\'' {
                if chars.get(i + 1) == Some(&c) && chars.get(i + 2) == Some(&c) {
                    return Err(TranspileError::unsupported(line, "triple-quoted string"));
                }
                let mut s = String::new();
                i += 1;
                loop {
                    match chars.get(i) {
                        None => return Err(syntax(line, "unterminated string")),
                        Some(&q) if q == c => {
                            i += 1;
                            break;
                        }
                        Some('\\') => {
                            let e = chars.get(i + 1).ok_or_else(|| syntax(line, "unterminated string"))?;
                            s.push(match e {
                                'n' => '\n',
                                't' => '\t',
                                other => *other,
                            });
                            i += 2;
                        }
                        Some(&ch) => {
                            s.push(ch);
                            i += 1;
                        }
                    }
                }
                out.push(Token { tok: Tok::Str(s), line });
                continue;
            }
            let rest: String = chars[i..chars.len().min(i + 3)].iter().collect();
            let op = OPS
                .iter()
                .chain(SINGLE_OPS.iter())
                .find(|op| rest.starts_with(**op))
                .copied()
                .ok_or_else(|| syntax(line, format!("unexpected character `{c}`")))?;
            match op {
                "(" | "[" | "{" => depth += 1,
                ")" | "]" | "}" => depth = depth.checked_sub(1).ok_or_else(|| syntax(line, "unbalanced bracket"))?,
                _ => {}
            }
            out.push(Token { tok: Tok::Op(op), line });
            i += op.len();
        }
        if depth == 0 && out.last().is_some_and(|t| t.tok != Tok::Newline && t.tok != Tok::Indent && t.tok != Tok::Dedent) {
            out.push(Token { tok: Tok::Newline, line });
        }
    }
    if depth != 0 {
        return Err(syntax(last_line, "unbalanced bracket at end of input"));
    }
    while indents.len() > 1 {
        indents.pop();
        out.push(Token { tok: Tok::Dedent, line: last_line });
    }
    out.push(Token { tok: Tok::Eof, line: last_line });
    Ok(out)
}

// ---------------------------------------------------------------------------
// Parser

const UNSUPPORTED_KEYWORDS: [&str; 13] = [
    "lambda", "yield", "try", "raise", "global", "nonlocal", "del", "assert", "async", "await", "match", "except",
    "finally",
];

struct Parser {
    toks: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].tok
    }

    fn peek_at(&self, k: usize) -> &Tok {
        &self.toks[(self.pos + k).min(self.toks.len() - 1)].tok
    }

    fn line(&self) -> usize {
        self.toks[self.pos].line
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.pos].tok.clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn is_op(&self, op: &str) -> bool {
        matches!(self.peek(), Tok::Op(o) if *o == op)
    }

    fn is_kw(&self, kw: &str) -> bool {
        matches!(self.peek(), Tok::Name(n) if n == kw)
    }

    fn eat_op(&mut self, op: &str) -> bool {
        if self.is_op(op) {
            self.bump();
            true
        } else {
            false
        }
    }

    fn eat_kw(&mut self, kw: &str) -> bool {
        if self.is_kw(kw) {
            self.bump();
            true
        } else {
            false
        }
    }

    fn expect_op(&mut self, op: &str) -> Result<(), TranspileError> {
        if self.eat_op(op) {
            Ok(())
        } else {
            Err(syntax(self.line(), format!("expected `{op}`, found {}", describe(self.peek()))))
        }
    }

    fn expect_newline(&mut self) -> Result<(), TranspileError> {
        match self.peek() {
            Tok::Newline => {
                self.bump();
                Ok(())
            }
            Tok::Eof | Tok::Dedent => Ok(()),
            Tok::Op(";") => Err(TranspileError::unsupported(self.line(), "`;` statement separator")),
            other => Err(syntax(self.line(), format!("expected end of line, found {}", describe(other)))),
        }
    }

    fn ident(&mut self) -> Result<String, TranspileError> {
        match self.bump() {
            Tok::Name(n) => Ok(n),
            other => Err(syntax(self.line(), format!("expected identifier, found {}", describe(&other)))),
        }
    }

    fn dotted_name(&mut self) -> Result<String, TranspileError> {
        let mut name = self.ident()?;
        while self.eat_op(".") {
            name.push('.');
            name.push_str(&self.ident()?);
        }
        Ok(name)
    }

    fn module(&mut self) -> Result<ScriptAst, TranspileError> {
        let mut ast = ScriptAst {
            imports: Vec::new(),
            classes: Vec::new(),
            functions: Vec::new(),
        };
        loop {
            match self.peek() {
                Tok::Eof => break,
                Tok::Newline => {
                    self.bump();
                }
                Tok::Name(n) if n == "import" => {
                    self.bump();
                    loop {
                        ast.imports.push(self.dotted_name()?);
                        if self.eat_kw("as") {
                            self.ident()?;
                        }
                        if !self.eat_op(",") {
                            break;
                        }
                    }
                    self.expect_newline()?;
                }
                Tok::Name(n) if n == "from" => {
                    self.bump();
                    let m = self.dotted_name()?;
                    if !self.eat_kw("import") {
                        return Err(syntax(self.line(), "expected `import`"));
                    }
                    if !self.eat_op("*") {
                        let paren = self.eat_op("(");
                        loop {
                            self.ident()?;
                            if self.eat_kw("as") {
                                self.ident()?;
                            }
                            if !self.eat_op(",") {
                                break;
                            }
                        }
                        if paren {
                            self.expect_op(")")?;
                        }
                    }
                    ast.imports.push(m);
                    self.expect_newline()?;
                }
                Tok::Name(n) if n == "class" => ast.classes.push(self.class()?),
                Tok::Name(n) if n == "def" => ast.functions.push(self.function(Vec::new())?),
                Tok::Op("@") => {
                    let decorators = self.decorators()?;
                    if self.is_kw("class") {
                        return Err(TranspileError::unsupported(self.line(), "class decorator"));
                    }
                    ast.functions.push(self.function(decorators)?);
                }
                Tok::Name(n) if n == "pass" => {
                    self.bump();
                    self.expect_newline()?;
                }
                _ => {
                    return Err(TranspileError::unsupported(self.line(), "module-level statement"));
                }
            }
        }
        Ok(ast)
    }

    fn decorators(&mut self) -> Result<Vec<String>, TranspileError> {
        let mut out = Vec::new();
        while self.eat_op("@") {
            out.push(self.dotted_name()?);
            self.expect_newline()?;
        }
        Ok(out)
    }

    fn class(&mut self) -> Result<ClassAst, TranspileError> {
        let line = self.line();
        self.bump();
        let name = self.ident()?;
        if self.eat_op("(") {
            while !self.eat_op(")") {
                self.bump();
                if matches!(self.peek(), Tok::Eof) {
                    return Err(syntax(line, "unterminated base list"));
                }
            }
        }
        self.expect_op(":")?;
        self.expect_newline()?;
        if !matches!(self.bump(), Tok::Indent) {
            return Err(syntax(line, "expected an indented class body"));
        }
        let mut functions = Vec::new();
        loop {
            match self.peek() {
                Tok::Dedent => {
                    self.bump();
                    break;
                }
                Tok::Eof => break,
                Tok::Newline => {
                    self.bump();
                }
                Tok::Name(n) if n == "pass" => {
                    self.bump();
                    self.expect_newline()?;
                }
                Tok::Name(n) if n == "def" => functions.push(self.function(Vec::new())?),
                Tok::Op("@") => {
                    let d = self.decorators()?;
                    functions.push(self.function(d)?);
                }
                _ => return Err(TranspileError::unsupported(self.line(), "class attribute")),
            }
        }
        Ok(ClassAst { name, line, functions })
    }

    fn function(&mut self, decorators: Vec<String>) -> Result<FunctionAst, TranspileError> {
        let line = self.line();
        if !self.eat_kw("def") {
            return Err(syntax(line, "expected `def`"));
        }
        let name = self.ident()?;
        self.expect_op("(")?;
        let mut params = Vec::new();
        while !self.is_op(")") {
            if self.is_op("*") || self.is_op("**") {
                return Err(TranspileError::unsupported(self.line(), "variadic parameter"));
            }
            let pname = self.ident()?;
            let annotation = if self.eat_op(":") { Some(self.expr()?) } else { None };
            if self.is_op("=") {
                return Err(TranspileError::unsupported(self.line(), "default parameter value"));
            }
            params.push(Param { name: pname, annotation });
            if !self.eat_op(",") {
                break;
            }
        }
        self.expect_op(")")?;
        let returns = if self.eat_op("->") { Some(self.expr()?) } else { None };
        self.expect_op(":")?;
        let body = self.suite()?;
        Ok(FunctionAst {
            name,
            line,
            decorators,
            params,
            returns,
            body,
        })
    }

    fn suite(&mut self) -> Result<Vec<Stmt>, TranspileError> {
        let line = self.line();
        if !matches!(self.peek(), Tok::Newline) {
            // single-line suite: `if x: pass`
            let s = self.simple_stmt()?;
            return Ok(vec![s]);
        }
        self.bump();
        if !matches!(self.bump(), Tok::Indent) {
            return Err(syntax(line, "expected an indented block"));
        }
        let mut body = Vec::new();
        loop {
            match self.peek() {
                Tok::Dedent => {
                    self.bump();
                    break;
                }
                Tok::Eof => break,
                Tok::Newline => {
                    self.bump();
                }
                _ => body.push(self.stmt()?),
            }
        }
        Ok(body)
    }

    fn stmt(&mut self) -> Result<Stmt, TranspileError> {
        let line = self.line();
        let kw = match self.peek() {
            Tok::Name(n) => n.clone(),
            Tok::Op("@") => return Err(TranspileError::unsupported(line, "nested function")),
            _ => String::new(),
        };
        match kw.as_str() {
            "if" => {
                self.bump();
                self.if_rest(line)
            }
            "for" => {
                self.bump();
                let var = self.ident()?;
                if self.is_op(",") {
                    return Err(TranspileError::unsupported(line, "tuple loop target"));
                }
                if !self.eat_kw("in") {
                    return Err(syntax(line, "expected `in`"));
                }
                let iter = self.expr()?;
                self.expect_op(":")?;
                let body = self.suite()?;
                if self.is_kw("else") {
                    return Err(TranspileError::unsupported(self.line(), "for-else"));
                }
                Ok(Stmt {
                    line,
                    kind: StmtKind::For { var, iter, body },
                })
            }
            "while" => {
                self.bump();
                let cond = self.expr()?;
                self.expect_op(":")?;
                let body = self.suite()?;
                Ok(Stmt {
                    line,
                    kind: StmtKind::While { cond, body },
                })
            }
            "with" => {
                self.bump();
                let context = self.expr()?;
                if self.is_kw("as") {
                    return Err(TranspileError::unsupported(line, "with-as binding"));
                }
                self.expect_op(":")?;
                let body = self.suite()?;
                Ok(Stmt {
                    line,
                    kind: StmtKind::With { context, body },
                })
            }
            "def" | "class" => Err(TranspileError::unsupported(line, format!("nested {kw}"))),
            _ => self.simple_stmt(),
        }
    }

    fn if_rest(&mut self, line: usize) -> Result<Stmt, TranspileError> {
        let cond = self.expr()?;
        self.expect_op(":")?;
        let body = self.suite()?;
        let orelse = if self.is_kw("elif") {
            let l = self.line();
            self.bump();
            vec![self.if_rest(l)?]
        } else if self.eat_kw("else") {
            self.expect_op(":")?;
            self.suite()?
        } else {
            Vec::new()
        };
        Ok(Stmt {
            line,
            kind: StmtKind::If { cond, body, orelse },
        })
    }

    fn simple_stmt(&mut self) -> Result<Stmt, TranspileError> {
        let line = self.line();
        if let Tok::Name(n) = self.peek() {
            if UNSUPPORTED_KEYWORDS.contains(&n.as_str()) {
                return Err(TranspileError::unsupported(line, format!("`{n}` statement")));
            }
        }
        let kind = if self.eat_kw("pass") {
            StmtKind::Pass
        } else if self.eat_kw("break") {
            StmtKind::Break
        } else if self.eat_kw("continue") {
            StmtKind::Continue
        } else if self.eat_kw("return") {
            if matches!(self.peek(), Tok::Newline | Tok::Eof | Tok::Dedent) {
                StmtKind::Return(None)
            } else {
                StmtKind::Return(Some(self.expr_list()?))
            }
        } else if matches!(self.peek(), Tok::Name(_)) && matches!(self.peek_at(1), Tok::Op(":")) {
            let target = self.ident()?;
            self.bump();
            let annotation = self.expr()?;
            let value = if self.eat_op("=") { Some(self.expr_list()?) } else { None };
            StmtKind::AnnAssign {
                target,
                annotation,
                value,
            }
        } else {
            let lhs = self.expr_list()?;
            if self.eat_op("=") {
                let value = self.expr_list()?;
                if self.is_op("=") {
                    return Err(TranspileError::unsupported(line, "chained assignment"));
                }
                StmtKind::Assign { target: lhs, value }
            } else if let Some(op) = self.aug_op() {
                let value = self.expr_list()?;
                StmtKind::AugAssign { target: lhs, op, value }
            } else {
                StmtKind::Expr(lhs)
            }
        };
        self.expect_newline()?;
        Ok(Stmt { line, kind })
    }

    fn aug_op(&mut self) -> Option<BinOp> {
        let op = match self.peek() {
            Tok::Op("+=") => BinOp::Add,
            Tok::Op("-=") => BinOp::Sub,
            Tok::Op("*=") => BinOp::Mul,
            Tok::Op("/=") => BinOp::Div,
            Tok::Op("//=") => BinOp::FloorDiv,
            Tok::Op("%=") => BinOp::Mod,
            Tok::Op("**=") => BinOp::Pow,
            Tok::Op("&=") => BinOp::BitAnd,
            Tok::Op("|=") => BinOp::BitOr,
            Tok::Op("^=") => BinOp::BitXor,
            Tok::Op("<<=") => BinOp::Shl,
            Tok::Op(">>=") => BinOp::Shr,
            _ => return None,
        };
        self.bump();
        Some(op)
    }

    /// `a, b` → Tuple; a single expression otherwise.
    fn expr_list(&mut self) -> Result<Expr, TranspileError> {
        let first = self.expr()?;
        if !self.is_op(",") {
            return Ok(first);
        }
        let mut items = vec![first];
        while self.eat_op(",") {
            if matches!(self.peek(), Tok::Newline | Tok::Op("=") | Tok::Op(")")) {
                break;
            }
            items.push(self.expr()?);
        }
        Ok(Expr::Tuple(items))
    }

    fn expr(&mut self) -> Result<Expr, TranspileError> {
        let line = self.line();
        if self.is_kw("lambda") {
            return Err(TranspileError::unsupported(line, "lambda"));
        }
        if self.is_op(":=") {
            return Err(TranspileError::unsupported(line, "assignment expression"));
        }
        let e = self.or_expr()?;
        if self.is_kw("if") {
            return Err(TranspileError::unsupported(line, "conditional expression"));
        }
        if self.is_kw("for") {
            return Err(TranspileError::unsupported(line, "generator expression"));
        }
        if self.is_op(":=") {
            return Err(TranspileError::unsupported(line, "assignment expression"));
        }
        Ok(e)
    }

    fn or_expr(&mut self) -> Result<Expr, TranspileError> {
        let mut l = self.and_expr()?;
        while self.eat_kw("or") {
            let r = self.and_expr()?;
            l = Expr::Bool2(BoolOp::Or, Box::new(l), Box::new(r));
        }
        Ok(l)
    }

    fn and_expr(&mut self) -> Result<Expr, TranspileError> {
        let mut l = self.not_expr()?;
        while self.eat_kw("and") {
            let r = self.not_expr()?;
            l = Expr::Bool2(BoolOp::And, Box::new(l), Box::new(r));
        }
        Ok(l)
    }

    fn not_expr(&mut self) -> Result<Expr, TranspileError> {
        if self.eat_kw("not") {
            return Ok(Expr::Not(Box::new(self.not_expr()?)));
        }
        self.comparison()
    }

    fn cmp_op(&self) -> Option<CmpOp> {
        Some(match self.peek() {
            Tok::Op("<") => CmpOp::Lt,
            Tok::Op("<=") => CmpOp::Le,
            Tok::Op(">") => CmpOp::Gt,
            Tok::Op(">=") => CmpOp::Ge,
            Tok::Op("==") => CmpOp::Eq,
            Tok::Op("!=") => CmpOp::Ne,
            _ => return None,
        })
    }

    fn comparison(&mut self) -> Result<Expr, TranspileError> {
        let line = self.line();
        let l = self.bitor()?;
        if self.is_kw("in") || self.is_kw("is") || (self.is_kw("not") && matches!(self.peek_at(1), Tok::Name(n) if n == "in")) {
            return Err(TranspileError::unsupported(line, "membership/identity test"));
        }
        let Some(op) = self.cmp_op() else {
            return Ok(l);
        };
        self.bump();
        let r = self.bitor()?;
        if self.cmp_op().is_some() {
            return Err(TranspileError::unsupported(line, "chained comparison"));
        }
        Ok(Expr::compare(op, l, r))
    }

    fn binary_level(
        &mut self,
        ops: &[(&str, BinOp)],
        next: fn(&mut Self) -> Result<Expr, TranspileError>,
    ) -> Result<Expr, TranspileError> {
        let mut l = next(self)?;
        'outer: loop {
            for (sym, op) in ops {
                if self.eat_op(sym) {
                    let r = next(self)?;
                    l = Expr::binary(*op, l, r);
                    continue 'outer;
                }
            }
            return Ok(l);
        }
    }

    fn bitor(&mut self) -> Result<Expr, TranspileError> {
        self.binary_level(&[("|", BinOp::BitOr)], Self::bitxor)
    }

    fn bitxor(&mut self) -> Result<Expr, TranspileError> {
        self.binary_level(&[("^", BinOp::BitXor)], Self::bitand)
    }

    fn bitand(&mut self) -> Result<Expr, TranspileError> {
        self.binary_level(&[("&", BinOp::BitAnd)], Self::shift)
    }

    fn shift(&mut self) -> Result<Expr, TranspileError> {
        self.binary_level(&[("<<", BinOp::Shl), (">>", BinOp::Shr)], Self::arith)
    }

    fn arith(&mut self) -> Result<Expr, TranspileError> {
        self.binary_level(&[("+", BinOp::Add), ("-", BinOp::Sub)], Self::term)
    }

    fn term(&mut self) -> Result<Expr, TranspileError> {
        if self.is_op("@") {
            return Err(TranspileError::unsupported(self.line(), "matrix multiplication"));
        }
        self.binary_level(
            &[("*", BinOp::Mul), ("//", BinOp::FloorDiv), ("/", BinOp::Div), ("%", BinOp::Mod)],
            Self::factor,
        )
    }

    fn factor(&mut self) -> Result<Expr, TranspileError> {
        if self.eat_op("-") {
            return Ok(Expr::Unary(UnOp::Neg, Box::new(self.factor()?)));
        }
        if self.eat_op("+") {
            return Ok(Expr::Unary(UnOp::Pos, Box::new(self.factor()?)));
        }
        if self.eat_op("~") {
            return Ok(Expr::Unary(UnOp::Invert, Box::new(self.factor()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, TranspileError> {
        let base = self.postfix()?;
        if self.eat_op("**") {
            let exp = self.factor()?;
            return Ok(Expr::binary(BinOp::Pow, base, exp));
        }
        Ok(base)
    }

    fn postfix(&mut self) -> Result<Expr, TranspileError> {
        let mut e = self.atom()?;
        loop {
            let line = self.line();
            if self.eat_op(".") {
                e = Expr::Attr(Box::new(e), self.ident()?);
            } else if self.eat_op("(") {
                let mut args = Vec::new();
                while !self.is_op(")") {
                    if self.is_op("*") || self.is_op("**") {
                        return Err(TranspileError::unsupported(line, "argument unpacking"));
                    }
                    if matches!(self.peek(), Tok::Name(_)) && matches!(self.peek_at(1), Tok::Op("=")) {
                        return Err(TranspileError::unsupported(line, "keyword argument"));
                    }
                    args.push(self.expr()?);
                    if !self.eat_op(",") {
                        break;
                    }
                }
                self.expect_op(")")?;
                e = Expr::call(e, args);
            } else if self.eat_op("[") {
                let idx = self.expr()?;
                if self.is_op(":") {
                    return Err(TranspileError::unsupported(line, "slice"));
                }
                if self.is_op(",") {
                    return Err(TranspileError::unsupported(line, "multi-dimensional subscript"));
                }
                self.expect_op("]")?;
                e = Expr::Index(Box::new(e), Box::new(idx));
            } else {
                return Ok(e);
            }
        }
    }

    fn atom(&mut self) -> Result<Expr, TranspileError> {
        let line = self.line();
        match self.bump() {
            Tok::Int(v) => Ok(Expr::Int(v)),
            Tok::Float(v) => Ok(Expr::Float(v)),
            Tok::Str(s) => {
                let mut s = s;
                while let Tok::Str(more) = self.peek().clone() {
                    self.bump();
                    s.push_str(&more);
                }
                Ok(Expr::Str(s))
            }
            Tok::Name(n) => match n.as_str() {
                "True" => Ok(Expr::Bool(true)),
                "False" => Ok(Expr::Bool(false)),
                "None" => Ok(Expr::NoneLit),
                "lambda" => Err(TranspileError::unsupported(line, "lambda")),
                "yield" | "await" => Err(TranspileError::unsupported(line, format!("`{n}` expression"))),
                _ => Ok(Expr::Name(n)),
            },
            Tok::Op("(") => {
                if self.eat_op(")") {
                    return Ok(Expr::Tuple(Vec::new()));
                }
                let first = self.expr()?;
                if self.eat_op(")") {
                    return Ok(first);
                }
                let mut items = vec![first];
                while self.eat_op(",") {
                    if self.is_op(")") {
                        break;
                    }
                    items.push(self.expr()?);
                }
                self.expect_op(")")?;
                Ok(Expr::Tuple(items))
            }
            Tok::Op("[") => {
                let mut items = Vec::new();
                while !self.is_op("]") {
                    items.push(self.expr()?);
                    if !self.eat_op(",") {
                        break;
                    }
                }
                self.expect_op("]")?;
                Ok(Expr::List(items))
            }
            Tok::Op("{") => Err(TranspileError::unsupported(line, "dict/set display")),
            other => Err(syntax(line, format!("unexpected {}", describe(&other)))),
        }
    }
}

fn describe(t: &Tok) -> String {
    match t {
        Tok::Name(n) => format!("`{n}`"),
        Tok::Int(v) => format!("`{v}`"),
        Tok::Float(v) => format!("`{v}`"),
        Tok::Str(_) => "string literal".into(),
        Tok::Op(o) => format!("`{o}`"),
        Tok::Newline => "end of line".into(),
        Tok::Indent => "indent".into(),
        Tok::Dedent => "dedent".into(),
        Tok::Eof => "end of input".into(),
    }
}

/// Parses compiled-program text into a [`ScriptAst`].
pub fn parse_compiled_source(text: &str) -> Result<ScriptAst, TranspileError> {
    let toks = tokenize(text)?;
    if matches!(toks.first().map(|t| &t.tok), Some(Tok::Eof)) {
        return Err(syntax(1, "empty input"));
    }
    let mut p = Parser { toks, pos: 0 };
    p.module()
}
