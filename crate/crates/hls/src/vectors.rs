//! Kernel argument values and the committed test-vector file format
//! `{"cases": [{"in": [...], "out": ...}]}`. For kernels without a return
//! value, `out` lists the final contents of every array parameter in order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::TranspileError;
use crate::ir::{IrType, KernelIR, ScalarType};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Int(i32),
    Float(f32),
    IntArray(Vec<i32>),
    FloatArray(Vec<f32>),
}

impl Value {
    /// Converts a decoded value to the representation required by `ty`.
    pub fn coerce(&self, ty: IrType) -> Option<Value> {
        match (self, ty) {
            (Value::Int(v), IrType::Scalar { ty: ScalarType::Int32 }) => Some(Value::Int(*v)),
            (Value::Int(v), IrType::Scalar { ty: ScalarType::Float32 }) => Some(Value::Float(*v as f32)),
            (Value::Float(v), IrType::Scalar { ty: ScalarType::Float32 }) => Some(Value::Float(*v)),
            (Value::IntArray(v), IrType::Array { elem, len }) if v.len() == len => Some(match elem {
                ScalarType::Int32 => Value::IntArray(v.clone()),
                ScalarType::Float32 => Value::FloatArray(v.iter().map(|x| *x as f32).collect()),
            }),
            (Value::FloatArray(v), IrType::Array { elem: ScalarType::Float32, len }) if v.len() == len => {
                Some(Value::FloatArray(v.clone()))
            }
            _ => None,
        }
    }
}

/// Result of running a kernel once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KernelOutput {
    Return(Value),
    Arrays(Vec<Value>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestCase {
    #[serde(rename = "in")]
    pub inputs: Vec<Value>,
    pub out: KernelOutput,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TestVectors {
    pub cases: Vec<TestCase>,
}

/// Relative tolerance for float outputs; ints compare exactly.
pub const FLOAT_TOLERANCE: f32 = 1e-4;

pub fn floats_match(got: f32, expected: f32) -> bool {
    (got - expected).abs() <= FLOAT_TOLERANCE * (1.0 + expected.abs())
}

fn values_match(got: &Value, expected: &Value) -> bool {
    match (got, expected) {
        (Value::Int(a), Value::Int(b)) => a == b,
        (Value::Float(a), Value::Float(b)) => floats_match(*a, *b),
        (Value::Float(a), Value::Int(b)) => floats_match(*a, *b as f32),
        (Value::IntArray(a), Value::IntArray(b)) => a == b,
        (Value::FloatArray(a), Value::FloatArray(b)) => {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| floats_match(*x, *y))
        }
        (Value::FloatArray(a), Value::IntArray(b)) => {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| floats_match(*x, *y as f32))
        }
        _ => false,
    }
}

pub fn outputs_match(got: &KernelOutput, expected: &KernelOutput) -> bool {
    match (got, expected) {
        (KernelOutput::Return(a), KernelOutput::Return(b)) => values_match(a, b),
        (KernelOutput::Arrays(a), KernelOutput::Arrays(b)) => {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| values_match(x, y))
        }
        _ => false,
    }
}

impl TestVectors {
    pub fn load(path: &Path) -> Result<Self, TranspileError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TranspileError::Vectors(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| TranspileError::Vectors(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("vectors are serializable");
        s.push('\n');
        s
    }

    /// Coerces every case to the kernel's parameter types, checking arity and
    /// the output shape.
    pub fn check_against(&self, kernel: &KernelIR) -> Result<TestVectors, TranspileError> {
        let bad = |i: usize, what: &str| TranspileError::Vectors(format!("case {i}: {what} for kernel `{}`", kernel.name));
        let mut cases = Vec::with_capacity(self.cases.len());
        for (i, c) in self.cases.iter().enumerate() {
            if c.inputs.len() != kernel.params.len() {
                return Err(bad(i, "wrong number of inputs"));
            }
            let inputs = c
                .inputs
                .iter()
                .zip(&kernel.params)
                .map(|(v, p)| v.coerce(p.ty).ok_or_else(|| bad(i, &format!("input `{}` has the wrong type", p.name))))
                .collect::<Result<Vec<_>, _>>()?;
            let out = match (&c.out, kernel.return_type) {
                (KernelOutput::Return(v), Some(t)) => {
                    KernelOutput::Return(v.coerce(IrType::Scalar { ty: t }).ok_or_else(|| bad(i, "output has the wrong type"))?)
                }
                (out, None) => {
                    let arrays: Vec<IrType> = kernel.params.iter().map(|p| p.ty).filter(|t| t.scalar().is_none()).collect();
                    let values: Vec<Value> = match out {
                        KernelOutput::Arrays(v) => v.clone(),
                        KernelOutput::Return(v) => vec![v.clone()],
                    };
                    if values.len() != arrays.len() {
                        return Err(bad(i, "output must list every array parameter"));
                    }
                    KernelOutput::Arrays(
                        values
                            .iter()
                            .zip(arrays)
                            .map(|(v, t)| v.coerce(t).ok_or_else(|| bad(i, "output array has the wrong type")))
                            .collect::<Result<_, _>>()?,
                    )
                }
                (KernelOutput::Arrays(_), Some(_)) => return Err(bad(i, "expected a scalar output")),
            };
            cases.push(TestCase { inputs, out });
        }
        Ok(TestVectors { cases })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decodes_scalar_and_array_cases() {
        let v: TestVectors =
            serde_json::from_str(r#"{"cases":[{"in":[5],"out":125},{"in":[[1,2],1.5],"out":[[2,4]]}]}"#).unwrap();
        assert_eq!(v.cases[0].inputs, vec![Value::Int(5)]);
        assert_eq!(v.cases[0].out, KernelOutput::Return(Value::Int(125)));
        assert_eq!(v.cases[1].inputs, vec![Value::IntArray(vec![1, 2]), Value::Float(1.5)]);
        assert_eq!(v.cases[1].out, KernelOutput::Arrays(vec![Value::IntArray(vec![2, 4])]));
        let back: TestVectors = serde_json::from_str(&v.to_json()).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn coercion_follows_declared_types() {
        assert_eq!(Value::Int(2).coerce(IrType::FLOAT32), Some(Value::Float(2.0)));
        assert_eq!(Value::Float(2.5).coerce(IrType::INT32), None);
        let arr = IrType::Array { elem: ScalarType::Int32, len: 3 };
        assert_eq!(Value::IntArray(vec![1, 2]).coerce(arr), None);
    }

    #[test]
    fn float_tolerance_is_relative() {
        assert!(floats_match(1000.0, 1000.05));
        assert!(!floats_match(1.0, 1.01));
    }
}
