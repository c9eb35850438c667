//! Reference interpreter with C semantics: wrapping int32 arithmetic,
//! division truncating toward zero, short-circuit `&&`/`||`, float32 math.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ir::{IrBinOp, IrExpr, IrStmt, KernelIR, LValue, ScalarType};
use crate::vectors::{outputs_match, KernelOutput, TestVectors, Value};

/// Statements executed before the interpreter gives up.
pub const DEFAULT_STEP_LIMIT: u64 = 50_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EvalErrorKind {
    DivByZero,
    OutOfBounds,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("division by zero")]
    DivByZero,
    #[error("index {index} out of bounds for `{array}` of length {len}")]
    OutOfBounds { array: String, index: i64, len: usize },
    #[error("step limit of {0} exceeded")]
    StepLimit(u64),
    #[error("kernel ended without returning a value")]
    MissingReturn,
    #[error("bad input: {0}")]
    BadInput(String),
}

impl EvalError {
    pub fn kind(&self) -> Option<EvalErrorKind> {
        match self {
            EvalError::DivByZero => Some(EvalErrorKind::DivByZero),
            EvalError::OutOfBounds { .. } => Some(EvalErrorKind::OutOfBounds),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Scalar {
    I(i32),
    F(f32),
}

impl Scalar {
    fn as_f32(self) -> f32 {
        match self {
            Scalar::I(v) => v as f32,
            Scalar::F(v) => v,
        }
    }

    fn truthy(self) -> bool {
        match self {
            Scalar::I(v) => v != 0,
            Scalar::F(v) => v != 0.0,
        }
    }

    fn convert(self, ty: ScalarType) -> Scalar {
        match (self, ty) {
            (Scalar::I(v), ScalarType::Float32) => Scalar::F(v as f32),
            // C float-to-int conversion; lowering never produces it
            (Scalar::F(v), ScalarType::Int32) => Scalar::I(v as i32),
            (s, _) => s,
        }
    }
}

enum Array {
    I(Vec<i32>),
    F(Vec<f32>),
}

impl Array {
    fn len(&self) -> usize {
        match self {
            Array::I(v) => v.len(),
            Array::F(v) => v.len(),
        }
    }
}

struct Machine {
    scalars: HashMap<String, (ScalarType, Scalar)>,
    arrays: HashMap<String, Array>,
    steps: u64,
    limit: u64,
}

enum Flow {
    Next,
    Return(Option<Scalar>),
}

fn int_op(op: IrBinOp, a: i32, b: i32) -> Result<i32, EvalError> {
    Ok(match op {
        IrBinOp::Add => a.wrapping_add(b),
        IrBinOp::Sub => a.wrapping_sub(b),
        IrBinOp::Mul => a.wrapping_mul(b),
        IrBinOp::Div => {
            if b == 0 {
                return Err(EvalError::DivByZero);
            }
            a.wrapping_div(b)
        }
        IrBinOp::Mod => {
            if b == 0 {
                return Err(EvalError::DivByZero);
            }
            a.wrapping_rem(b)
        }
        IrBinOp::Lt => i32::from(a < b),
        IrBinOp::Le => i32::from(a <= b),
        IrBinOp::Gt => i32::from(a > b),
        IrBinOp::Ge => i32::from(a >= b),
        IrBinOp::Eq => i32::from(a == b),
        IrBinOp::Ne => i32::from(a != b),
        IrBinOp::And | IrBinOp::Or => unreachable!("logical operators short-circuit"),
    })
}

fn float_op(op: IrBinOp, a: f32, b: f32) -> Scalar {
    match op {
        IrBinOp::Add => Scalar::F(a + b),
        IrBinOp::Sub => Scalar::F(a - b),
        IrBinOp::Mul => Scalar::F(a * b),
        IrBinOp::Div => Scalar::F(a / b),
        IrBinOp::Mod => Scalar::F(a % b),
        IrBinOp::Lt => Scalar::I(i32::from(a < b)),
        IrBinOp::Le => Scalar::I(i32::from(a <= b)),
        IrBinOp::Gt => Scalar::I(i32::from(a > b)),
        IrBinOp::Ge => Scalar::I(i32::from(a >= b)),
        IrBinOp::Eq => Scalar::I(i32::from(a == b)),
        IrBinOp::Ne => Scalar::I(i32::from(a != b)),
        IrBinOp::And | IrBinOp::Or => unreachable!("logical operators short-circuit"),
    }
}

impl Machine {
    fn slot(&self, array: &str, index: Scalar) -> Result<usize, EvalError> {
        let arr = &self.arrays[array];
        let i = match index {
            Scalar::I(v) => i64::from(v),
            Scalar::F(v) => v as i64,
        };
        if i < 0 || i as usize >= arr.len() {
            return Err(EvalError::OutOfBounds {
                array: array.to_string(),
                index: i,
                len: arr.len(),
            });
        }
        Ok(i as usize)
    }

    fn eval(&self, e: &IrExpr) -> Result<Scalar, EvalError> {
        Ok(match e {
            IrExpr::IntLit { value } => Scalar::I(*value),
            IrExpr::FloatLit { value } => Scalar::F(*value),
            IrExpr::Var { name } => self.scalars.get(name).map(|s| s.1).unwrap_or(Scalar::I(0)),
            IrExpr::Index { array, index } => {
                let i = self.slot(array, self.eval(index)?)?;
                match &self.arrays[array] {
                    Array::I(v) => Scalar::I(v[i]),
                    Array::F(v) => Scalar::F(v[i]),
                }
            }
            IrExpr::Neg { operand } => match self.eval(operand)? {
                Scalar::I(v) => Scalar::I(v.wrapping_neg()),
                Scalar::F(v) => Scalar::F(-v),
            },
            IrExpr::BinOp { op, lhs, rhs } => {
                let l = self.eval(lhs)?;
                match op {
                    IrBinOp::And => {
                        return Ok(Scalar::I(i32::from(l.truthy() && self.eval(rhs)?.truthy())));
                    }
                    IrBinOp::Or => {
                        return Ok(Scalar::I(i32::from(l.truthy() || self.eval(rhs)?.truthy())));
                    }
                    _ => {}
                }
                let r = self.eval(rhs)?;
                match (l, r) {
                    (Scalar::I(a), Scalar::I(b)) => Scalar::I(int_op(*op, a, b)?),
                    _ => float_op(*op, l.as_f32(), r.as_f32()),
                }
            }
        })
    }

    fn tick(&mut self) -> Result<(), EvalError> {
        self.steps += 1;
        if self.steps > self.limit {
            return Err(EvalError::StepLimit(self.limit));
        }
        Ok(())
    }

    fn store_scalar(&mut self, name: &str, v: Scalar) {
        let ty = self.scalars.get(name).map_or(ScalarType::Int32, |s| s.0);
        self.scalars.insert(name.to_string(), (ty, v.convert(ty)));
    }

    fn block(&mut self, body: &[IrStmt]) -> Result<Flow, EvalError> {
        for s in body {
            self.tick()?;
            match s {
                IrStmt::Assign { target, value } => {
                    let v = self.eval(value)?;
                    match target {
                        LValue::Var { name } => self.store_scalar(name, v),
                        LValue::Index { array, index } => {
                            let i = self.slot(array, self.eval(index)?)?;
                            match self.arrays.get_mut(array).expect("array exists") {
                                Array::I(a) => a[i] = v.convert(ScalarType::Int32).as_i32(),
                                Array::F(a) => a[i] = v.as_f32(),
                            }
                        }
                    }
                }
                IrStmt::For { var, lo, hi, body, .. } => {
                    let mut i = match self.eval(lo)? {
                        Scalar::I(v) => v,
                        Scalar::F(v) => v as i32,
                    };
                    self.scalars.insert(var.clone(), (ScalarType::Int32, Scalar::I(i)));
                    loop {
                        let bound = self.eval(hi)?;
                        if !float_or_int_lt(Scalar::I(i), bound) {
                            break;
                        }
                        if let Flow::Return(v) = self.block(body)? {
                            return Ok(Flow::Return(v));
                        }
                        i = match self.scalars[var].1 {
                            Scalar::I(v) => v.wrapping_add(1),
                            Scalar::F(v) => v as i32 + 1,
                        };
                        self.scalars.insert(var.clone(), (ScalarType::Int32, Scalar::I(i)));
                        self.tick()?;
                    }
                }
                IrStmt::If {
                    cond,
                    then_body,
                    else_body,
                } => {
                    let branch = if self.eval(cond)?.truthy() { then_body } else { else_body };
                    if let Flow::Return(v) = self.block(branch)? {
                        return Ok(Flow::Return(v));
                    }
                }
                IrStmt::Return { value } => {
                    let v = match value {
                        Some(e) => Some(self.eval(e)?),
                        None => None,
                    };
                    return Ok(Flow::Return(v));
                }
            }
        }
        Ok(Flow::Next)
    }
}

fn float_or_int_lt(a: Scalar, b: Scalar) -> bool {
    match (a, b) {
        (Scalar::I(x), Scalar::I(y)) => x < y,
        _ => a.as_f32() < b.as_f32(),
    }
}

impl Scalar {
    fn as_i32(self) -> i32 {
        match self {
            Scalar::I(v) => v,
            Scalar::F(v) => v as i32,
        }
    }
}

pub fn interpret(kernel: &KernelIR, inputs: &[Value]) -> Result<KernelOutput, EvalError> {
    interpret_with_limit(kernel, inputs, DEFAULT_STEP_LIMIT)
}

pub fn interpret_with_limit(kernel: &KernelIR, inputs: &[Value], limit: u64) -> Result<KernelOutput, EvalError> {
    if inputs.len() != kernel.params.len() {
        return Err(EvalError::BadInput(format!(
            "expected {} inputs, got {}",
            kernel.params.len(),
            inputs.len()
        )));
    }
    let mut m = Machine {
        scalars: HashMap::new(),
        arrays: HashMap::new(),
        steps: 0,
        limit,
    };
    for (p, v) in kernel.params.iter().zip(inputs) {
        let v = v
            .coerce(p.ty)
            .ok_or_else(|| EvalError::BadInput(format!("input `{}` does not match its type", p.name)))?;
        match v {
            Value::Int(x) => {
                m.scalars.insert(p.name.clone(), (ScalarType::Int32, Scalar::I(x)));
            }
            Value::Float(x) => {
                m.scalars.insert(p.name.clone(), (ScalarType::Float32, Scalar::F(x)));
            }
            Value::IntArray(a) => {
                m.arrays.insert(p.name.clone(), Array::I(a));
            }
            Value::FloatArray(a) => {
                m.arrays.insert(p.name.clone(), Array::F(a));
            }
        }
    }
    for l in &kernel.locals {
        let zero = match l.ty {
            ScalarType::Int32 => Scalar::I(0),
            ScalarType::Float32 => Scalar::F(0.0),
        };
        m.scalars.insert(l.name.clone(), (l.ty, zero));
    }
    let flow = m.block(&kernel.body)?;
    match kernel.return_type {
        Some(ty) => match flow {
            Flow::Return(Some(v)) => Ok(KernelOutput::Return(match v.convert(ty) {
                Scalar::I(x) => Value::Int(x),
                Scalar::F(x) => Value::Float(x),
            })),
            _ => Err(EvalError::MissingReturn),
        },
        None => {
            let mut out = Vec::new();
            for p in &kernel.params {
                if p.ty.scalar().is_none() {
                    out.push(match m.arrays.remove(&p.name).expect("array param bound") {
                        Array::I(a) => Value::IntArray(a),
                        Array::F(a) => Value::FloatArray(a),
                    });
                }
            }
            Ok(KernelOutput::Arrays(out))
        }
    }
}

/// A vector whose expected output disagrees with the interpreter.
#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub case: usize,
    pub expected: KernelOutput,
    pub got: Result<KernelOutput, EvalError>,
}

/// Runs every vector through the interpreter and reports disagreements.
pub fn check_vectors(kernel: &KernelIR, vectors: &TestVectors) -> Vec<Mismatch> {
    vectors
        .cases
        .iter()
        .enumerate()
        .filter_map(|(i, c)| {
            let got = interpret(kernel, &c.inputs);
            match &got {
                Ok(out) if outputs_match(out, &c.out) => None,
                _ => Some(Mismatch {
                    case: i,
                    expected: c.out.clone(),
                    got,
                }),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{IrParam, IrType};

    fn kernel(params: Vec<IrParam>, body: Vec<IrStmt>, ret: Option<ScalarType>) -> KernelIR {
        KernelIR {
            name: "k".into(),
            source_name: "K".into(),
            params,
            return_type: ret,
            locals: vec![],
            body,
            directives: vec![],
        }
    }

    fn int_param(n: &str) -> IrParam {
        IrParam {
            name: n.into(),
            ty: IrType::INT32,
        }
    }

    fn ret(e: IrExpr) -> Vec<IrStmt> {
        vec![IrStmt::Return { value: Some(e) }]
    }

    fn run(k: &KernelIR, xs: &[i32]) -> Result<KernelOutput, EvalError> {
        interpret(k, &xs.iter().map(|x| Value::Int(*x)).collect::<Vec<_>>())
    }

    #[test]
    fn c_division_and_wrapping() {
        let div = kernel(
            vec![int_param("a"), int_param("b")],
            ret(IrExpr::bin(IrBinOp::Div, IrExpr::var("a"), IrExpr::var("b"))),
            Some(ScalarType::Int32),
        );
        assert_eq!(run(&div, &[-7, 2]), Ok(KernelOutput::Return(Value::Int(-3))));
        assert_eq!(run(&div, &[i32::MIN, -1]), Ok(KernelOutput::Return(Value::Int(i32::MIN))));
        assert_eq!(run(&div, &[1, 0]).unwrap_err().kind(), Some(EvalErrorKind::DivByZero));
        let rem = kernel(
            vec![int_param("a"), int_param("b")],
            ret(IrExpr::bin(IrBinOp::Mod, IrExpr::var("a"), IrExpr::var("b"))),
            Some(ScalarType::Int32),
        );
        assert_eq!(run(&rem, &[-7, 2]), Ok(KernelOutput::Return(Value::Int(-1))));
        let mul = kernel(
            vec![int_param("a")],
            ret(IrExpr::bin(IrBinOp::Mul, IrExpr::var("a"), IrExpr::var("a"))),
            Some(ScalarType::Int32),
        );
        assert_eq!(run(&mul, &[65536]), Ok(KernelOutput::Return(Value::Int(0))));
    }

    #[test]
    fn logical_operators_short_circuit() {
        let guard = IrExpr::bin(IrBinOp::Ne, IrExpr::var("b"), IrExpr::int(0));
        let div = IrExpr::bin(IrBinOp::Div, IrExpr::var("a"), IrExpr::var("b"));
        let k = kernel(
            vec![int_param("a"), int_param("b")],
            ret(IrExpr::bin(IrBinOp::And, guard, IrExpr::bin(IrBinOp::Gt, div, IrExpr::int(1)))),
            Some(ScalarType::Int32),
        );
        assert_eq!(run(&k, &[5, 0]), Ok(KernelOutput::Return(Value::Int(0))));
        assert_eq!(run(&k, &[5, 2]), Ok(KernelOutput::Return(Value::Int(1))));
    }

    #[test]
    fn out_of_bounds_is_trapped() {
        let a = IrParam {
            name: "a".into(),
            ty: IrType::Array {
                elem: ScalarType::Int32,
                len: 2,
            },
        };
        let k = kernel(
            vec![a, int_param("i")],
            ret(IrExpr::index("a", IrExpr::var("i"))),
            Some(ScalarType::Int32),
        );
        let ok = interpret(&k, &[Value::IntArray(vec![4, 5]), Value::Int(1)]);
        assert_eq!(ok, Ok(KernelOutput::Return(Value::Int(5))));
        let err = interpret(&k, &[Value::IntArray(vec![4, 5]), Value::Int(2)]).unwrap_err();
        assert_eq!(err.kind(), Some(EvalErrorKind::OutOfBounds));
    }

    #[test]
    fn void_kernel_returns_final_arrays() {
        let a = IrParam {
            name: "a".into(),
            ty: IrType::Array {
                elem: ScalarType::Int32,
                len: 3,
            },
        };
        let body = vec![IrStmt::For {
            id: "L1".into(),
            var: "i".into(),
            lo: IrExpr::int(0),
            hi: IrExpr::int(3),
            body: vec![IrStmt::Assign {
                target: LValue::Index {
                    array: "a".into(),
                    index: IrExpr::var("i"),
                },
                value: IrExpr::bin(IrBinOp::Mul, IrExpr::index("a", IrExpr::var("i")), IrExpr::int(2)),
            }],
        }];
        let k = kernel(vec![a], body, None);
        assert_eq!(
            interpret(&k, &[Value::IntArray(vec![1, 2, 3])]),
            Ok(KernelOutput::Arrays(vec![Value::IntArray(vec![2, 4, 6])]))
        );
    }

    #[test]
    fn step_limit_stops_long_runs() {
        let body = vec![IrStmt::For {
            id: "L1".into(),
            var: "i".into(),
            lo: IrExpr::int(0),
            hi: IrExpr::var("n"),
            body: vec![],
        }];
        let k = kernel(vec![int_param("n")], body, None);
        assert_eq!(
            interpret_with_limit(&k, &[Value::Int(1000)], 100),
            Err(EvalError::StepLimit(100))
        );
    }

    #[test]
    fn missing_return_is_reported() {
        let k = kernel(vec![int_param("n")], vec![], Some(ScalarType::Int32));
        assert_eq!(run(&k, &[1]), Err(EvalError::MissingReturn));
    }
}
