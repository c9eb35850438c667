//! Attaches synthesis directives to a kernel.
//!
//! Default rule: a loop whose trip count is a constant no larger than
//! `max_unroll_trip` is fully unrolled and not pipelined; any other loop that
//! contains no nested loop is pipelined; arrays indexed inside unrolled loops
//! are partitioned cyclically by the largest unroll factor touching them.
//! Overrides replace every default directive on their target.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::TranspileError;
use crate::ir::{Directive, DirectiveKind, IrExpr, IrStmt, KernelIR, LValue, PartitionStyle};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DirectivePolicy {
    pub pipeline_ii: u32,
    pub max_unroll_trip: u32,
    pub partition: bool,
    pub overrides: Vec<Directive>,
}

impl Default for DirectivePolicy {
    fn default() -> Self {
        DirectivePolicy {
            pipeline_ii: 1,
            max_unroll_trip: 8,
            partition: true,
            overrides: Vec::new(),
        }
    }
}

fn trip_count(lo: &IrExpr, hi: &IrExpr) -> Option<i64> {
    Some(hi.const_int()? - lo.const_int()?)
}

fn contains_loop(b: &[IrStmt]) -> bool {
    b.iter().any(|s| match s {
        IrStmt::For { .. } => true,
        IrStmt::If {
            then_body, else_body, ..
        } => contains_loop(then_body) || contains_loop(else_body),
        _ => false,
    })
}

fn indexed_arrays(b: &[IrStmt], out: &mut BTreeSet<String>) {
    fn expr(e: &IrExpr, out: &mut BTreeSet<String>) {
        match e {
            IrExpr::Index { array, index } => {
                out.insert(array.clone());
                expr(index, out);
            }
            IrExpr::BinOp { lhs, rhs, .. } => {
                expr(lhs, out);
                expr(rhs, out);
            }
            IrExpr::Neg { operand } => expr(operand, out),
            _ => {}
        }
    }
    for s in b {
        match s {
            IrStmt::Assign { target, value } => {
                if let LValue::Index { array, index } = target {
                    out.insert(array.clone());
                    expr(index, out);
                }
                expr(value, out);
            }
            IrStmt::For { lo, hi, body, .. } => {
                expr(lo, out);
                expr(hi, out);
                indexed_arrays(body, out);
            }
            IrStmt::If {
                cond,
                then_body,
                else_body,
            } => {
                expr(cond, out);
                indexed_arrays(then_body, out);
                indexed_arrays(else_body, out);
            }
            IrStmt::Return { value } => {
                if let Some(v) = value {
                    expr(v, out);
                }
            }
        }
    }
}

struct Walk<'a> {
    policy: &'a DirectivePolicy,
    loops: Vec<Directive>,
    partition_factor: BTreeMap<String, u32>,
}

impl Walk<'_> {
    fn block(&mut self, b: &[IrStmt]) {
        for s in b {
            match s {
                IrStmt::For { id, lo, hi, body, .. } => {
                    let trip = trip_count(lo, hi);
                    match trip {
                        Some(t) if t >= 1 && t <= i64::from(self.policy.max_unroll_trip) => {
                            let factor = t as u32;
                            self.loops.push(Directive {
                                target: id.clone(),
                                kind: DirectiveKind::Unroll { factor },
                            });
                            let mut arrays = BTreeSet::new();
                            indexed_arrays(body, &mut arrays);
                            for a in arrays {
                                let f = self.partition_factor.entry(a).or_insert(0);
                                *f = (*f).max(factor);
                            }
                        }
                        Some(t) if t < 1 => {}
                        _ => {
                            if !contains_loop(body) {
                                self.loops.push(Directive {
                                    target: id.clone(),
                                    kind: DirectiveKind::Pipeline {
                                        ii: self.policy.pipeline_ii,
                                    },
                                });
                            }
                        }
                    }
                    self.block(body);
                }
                IrStmt::If {
                    then_body, else_body, ..
                } => {
                    self.block(then_body);
                    self.block(else_body);
                }
                _ => {}
            }
        }
    }
}

fn validate(kernel: &KernelIR, directives: &[Directive]) -> Result<(), TranspileError> {
    let loops = kernel.loop_ids();
    let mut seen = BTreeSet::new();
    for d in directives {
        let ok = match d.kind {
            DirectiveKind::Pipeline { ii } => ii >= 1 && loops.contains(&d.target),
            DirectiveKind::Unroll { factor } => factor >= 1 && loops.contains(&d.target),
            DirectiveKind::ArrayPartition { dim, factor, .. } => {
                dim == 1 && factor >= 1 && kernel.param(&d.target).is_some_and(|p| p.ty.scalar().is_none())
            }
        };
        if !ok {
            return Err(TranspileError::InvalidDirectiveTarget(format!(
                "{} on `{}` in kernel `{}`",
                d.kind.label(),
                d.target,
                kernel.name
            )));
        }
        if !seen.insert((d.target.clone(), d.kind.label())) {
            return Err(TranspileError::InvalidDirectiveTarget(format!(
                "duplicate {} on `{}`",
                d.kind.label(),
                d.target
            )));
        }
    }
    Ok(())
}

/// Returns the kernel with its directive list replaced per `policy`.
pub fn annotate(kernel: &KernelIR, policy: &DirectivePolicy) -> Result<KernelIR, TranspileError> {
    let mut w = Walk {
        policy,
        loops: Vec::new(),
        partition_factor: BTreeMap::new(),
    };
    w.block(&kernel.body);
    let mut directives = w.loops;
    if policy.partition {
        for (array, factor) in w.partition_factor {
            directives.push(Directive {
                target: array,
                kind: DirectiveKind::ArrayPartition {
                    dim: 1,
                    factor,
                    style: PartitionStyle::Cyclic,
                },
            });
        }
    }
    let overridden: BTreeSet<&str> = policy.overrides.iter().map(|d| d.target.as_str()).collect();
    directives.retain(|d| !overridden.contains(d.target.as_str()));
    directives.extend(policy.overrides.iter().cloned());
    validate(kernel, &directives)?;
    Ok(KernelIR {
        directives,
        ..kernel.clone()
    })
}
