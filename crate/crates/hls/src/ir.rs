//! Static-control kernel IR shared by lowering, annotation, emission and
//! the reference interpreter.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalarType {
    Int32,
    Float32,
}

impl ScalarType {
    pub fn c_name(self) -> &'static str {
        match self {
            ScalarType::Int32 => "int32_t",
            ScalarType::Float32 => "float",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum IrType {
    Scalar { ty: ScalarType },
    Array { elem: ScalarType, len: usize },
}

impl IrType {
    pub const INT32: IrType = IrType::Scalar { ty: ScalarType::Int32 };
    pub const FLOAT32: IrType = IrType::Scalar { ty: ScalarType::Float32 };

    pub fn scalar(self) -> Option<ScalarType> {
        match self {
            IrType::Scalar { ty } => Some(ty),
            IrType::Array { .. } => None,
        }
    }

    pub fn elem(self) -> ScalarType {
        match self {
            IrType::Scalar { ty } => ty,
            IrType::Array { elem, .. } => elem,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IrParam {
    pub name: String,
    pub ty: IrType,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Local {
    pub name: String,
    pub ty: ScalarType,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IrBinOp {
    Add,
    Sub,
    Mul,
    Div,
    Mod,
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
    And,
    Or,
}

impl IrBinOp {
    pub fn symbol(self) -> &'static str {
        match self {
            IrBinOp::Add => "+",
            IrBinOp::Sub => "-",
            IrBinOp::Mul => "*",
            IrBinOp::Div => "/",
            IrBinOp::Mod => "%",
            IrBinOp::Lt => "<",
            IrBinOp::Le => "<=",
            IrBinOp::Gt => ">",
            IrBinOp::Ge => ">=",
            IrBinOp::Eq => "==",
            IrBinOp::Ne => "!=",
            IrBinOp::And => "&&",
            IrBinOp::Or => "||",
        }
    }

    /// C precedence level; larger binds tighter.
    pub fn precedence(self) -> u8 {
        match self {
            IrBinOp::Or => 1,
            IrBinOp::And => 2,
            IrBinOp::Eq | IrBinOp::Ne => 3,
            IrBinOp::Lt | IrBinOp::Le | IrBinOp::Gt | IrBinOp::Ge => 4,
            IrBinOp::Add | IrBinOp::Sub => 5,
            IrBinOp::Mul | IrBinOp::Div | IrBinOp::Mod => 6,
        }
    }

    pub fn is_comparison(self) -> bool {
        matches!(
            self,
            IrBinOp::Lt | IrBinOp::Le | IrBinOp::Gt | IrBinOp::Ge | IrBinOp::Eq | IrBinOp::Ne
        )
    }

    pub fn is_logical(self) -> bool {
        matches!(self, IrBinOp::And | IrBinOp::Or)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "expr", rename_all = "snake_case")]
pub enum IrExpr {
    IntLit { value: i32 },
    FloatLit { value: f32 },
    Var { name: String },
    Index { array: String, index: Box<IrExpr> },
    BinOp { op: IrBinOp, lhs: Box<IrExpr>, rhs: Box<IrExpr> },
    Neg { operand: Box<IrExpr> },
}

impl IrExpr {
    pub fn int(v: i32) -> Self {
        IrExpr::IntLit { value: v }
    }

    pub fn var(n: &str) -> Self {
        IrExpr::Var { name: n.to_string() }
    }

    pub fn bin(op: IrBinOp, l: IrExpr, r: IrExpr) -> Self {
        IrExpr::BinOp {
            op,
            lhs: Box::new(l),
            rhs: Box::new(r),
        }
    }

    pub fn index(array: &str, i: IrExpr) -> Self {
        IrExpr::Index {
            array: array.to_string(),
            index: Box::new(i),
        }
    }

    /// Names of every variable and array the expression reads.
    pub fn reads(&self, out: &mut BTreeSet<String>) {
        match self {
            IrExpr::IntLit { .. } | IrExpr::FloatLit { .. } => {}
            IrExpr::Var { name } => {
                out.insert(name.clone());
            }
            IrExpr::Index { array, index } => {
                out.insert(array.clone());
                index.reads(out);
            }
            IrExpr::BinOp { lhs, rhs, .. } => {
                lhs.reads(out);
                rhs.reads(out);
            }
            IrExpr::Neg { operand } => operand.reads(out),
        }
    }

    pub fn mentions(&self, name: &str) -> bool {
        let mut s = BTreeSet::new();
        self.reads(&mut s);
        s.contains(name)
    }

    /// Value of an expression built only from integer literals.
    pub fn const_int(&self) -> Option<i64> {
        match self {
            IrExpr::IntLit { value } => Some(i64::from(*value)),
            IrExpr::Neg { operand } => operand.const_int().map(|v| -v),
            IrExpr::BinOp { op, lhs, rhs } => {
                let (a, b) = (lhs.const_int()?, rhs.const_int()?);
                match op {
                    IrBinOp::Add => a.checked_add(b),
                    IrBinOp::Sub => a.checked_sub(b),
                    IrBinOp::Mul => a.checked_mul(b),
                    IrBinOp::Div if b != 0 => a.checked_div(b),
                    IrBinOp::Mod if b != 0 => a.checked_rem(b),
                    _ => None,
                }
            }
            _ => None,
        }
    }

    /// Replaces variables by the expressions given in `f` (when it returns Some).
    pub fn substitute(&self, f: &dyn Fn(&str) -> Option<IrExpr>) -> IrExpr {
        match self {
            IrExpr::Var { name } => f(name).unwrap_or_else(|| self.clone()),
            IrExpr::Index { array, index } => IrExpr::Index {
                array: array.clone(),
                index: Box::new(index.substitute(f)),
            },
            IrExpr::BinOp { op, lhs, rhs } => IrExpr::bin(*op, lhs.substitute(f), rhs.substitute(f)),
            IrExpr::Neg { operand } => IrExpr::Neg {
                operand: Box::new(operand.substitute(f)),
            },
            lit => lit.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "lvalue", rename_all = "snake_case")]
pub enum LValue {
    Var { name: String },
    Index { array: String, index: IrExpr },
}

impl LValue {
    pub fn base(&self) -> &str {
        match self {
            LValue::Var { name } => name,
            LValue::Index { array, .. } => array,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "stmt", rename_all = "snake_case")]
pub enum IrStmt {
    Assign {
        target: LValue,
        value: IrExpr,
    },
    /// `for (var = lo; var < hi; var++)`, bounds evaluated once on entry.
    For {
        id: String,
        var: String,
        lo: IrExpr,
        hi: IrExpr,
        body: Vec<IrStmt>,
    },
    If {
        cond: IrExpr,
        then_body: Vec<IrStmt>,
        else_body: Vec<IrStmt>,
    },
    Return {
        value: Option<IrExpr>,
    },
}

impl IrStmt {
    /// Variables read anywhere inside the statement (including loop bounds
    /// and array-index targets).
    pub fn reads(&self, out: &mut BTreeSet<String>) {
        match self {
            IrStmt::Assign { target, value } => {
                value.reads(out);
                if let LValue::Index { index, .. } = target {
                    index.reads(out);
                }
            }
            IrStmt::For { lo, hi, body, .. } => {
                lo.reads(out);
                hi.reads(out);
                body.iter().for_each(|s| s.reads(out));
            }
            IrStmt::If {
                cond,
                then_body,
                else_body,
            } => {
                cond.reads(out);
                then_body.iter().chain(else_body).for_each(|s| s.reads(out));
            }
            IrStmt::Return { value } => {
                if let Some(v) = value {
                    v.reads(out);
                }
            }
        }
    }

    /// Variables (and arrays) written anywhere inside the statement.
    pub fn writes(&self, out: &mut BTreeSet<String>) {
        match self {
            IrStmt::Assign { target, .. } => {
                out.insert(target.base().to_string());
            }
            IrStmt::For { var, body, .. } => {
                out.insert(var.clone());
                body.iter().for_each(|s| s.writes(out));
            }
            IrStmt::If {
                then_body, else_body, ..
            } => then_body.iter().chain(else_body).for_each(|s| s.writes(out)),
            IrStmt::Return { .. } => {}
        }
    }

    pub fn touches(&self, name: &str) -> bool {
        let mut s = BTreeSet::new();
        self.reads(&mut s);
        self.writes(&mut s);
        s.contains(name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionStyle {
    Cyclic,
    Block,
    Complete,
}

impl fmt::Display for PartitionStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PartitionStyle::Cyclic => "cyclic",
            PartitionStyle::Block => "block",
            PartitionStyle::Complete => "complete",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DirectiveKind {
    Pipeline { ii: u32 },
    Unroll { factor: u32 },
    ArrayPartition { dim: u32, factor: u32, style: PartitionStyle },
}

impl DirectiveKind {
    pub fn label(&self) -> &'static str {
        match self {
            DirectiveKind::Pipeline { .. } => "PIPELINE",
            DirectiveKind::Unroll { .. } => "UNROLL",
            DirectiveKind::ArrayPartition { .. } => "ARRAY_PARTITION",
        }
    }
}

/// A synthesis directive on a loop (by id) or an array (by name).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Directive {
    pub target: String,
    #[serde(flatten)]
    pub kind: DirectiveKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelIR {
    /// C identifier of the kernel.
    pub name: String,
    /// Function name in the compiled program.
    pub source_name: String,
    pub params: Vec<IrParam>,
    /// `None` for kernels that only write output arrays.
    pub return_type: Option<ScalarType>,
    pub locals: Vec<Local>,
    pub body: Vec<IrStmt>,
    pub directives: Vec<Directive>,
}

impl KernelIR {
    pub fn param(&self, name: &str) -> Option<&IrParam> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Loop ids in preorder.
    pub fn loop_ids(&self) -> Vec<String> {
        fn walk(b: &[IrStmt], out: &mut Vec<String>) {
            for s in b {
                match s {
                    IrStmt::For { id, body, .. } => {
                        out.push(id.clone());
                        walk(body, out);
                    }
                    IrStmt::If {
                        then_body, else_body, ..
                    } => {
                        walk(then_body, out);
                        walk(else_body, out);
                    }
                    _ => {}
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.body, &mut out);
        out
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("IR is serializable");
        s.push('\n');
        s
    }
}

/// `TriangularPrismVolume` → `triangular_prism_volume`.
pub fn snake_case(name: &str) -> String {
    let chars: Vec<char> = name.chars().collect();
    let mut out = String::with_capacity(name.len() + 4);
    for (i, &c) in chars.iter().enumerate() {
        if c.is_ascii_uppercase() && i > 0 {
            let prev = chars[i - 1];
            let next_lower = chars.get(i + 1).is_some_and(|n| n.is_ascii_lowercase());
            if prev.is_ascii_lowercase() || prev.is_ascii_digit() || (prev.is_ascii_uppercase() && next_lower) {
                out.push('_');
            }
        }
        out.push(c.to_ascii_lowercase());
    }
    out
}
