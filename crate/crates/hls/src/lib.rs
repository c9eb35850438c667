//! Translation of compiled, verified Python programs into synthesizable HLS C,
//! plus synthesis driving and report parsing.

pub mod annotate;
pub mod dafny_compile;
pub mod emit;
pub mod error;
pub mod interp;
pub mod ir;
pub mod lower;
pub mod pyast;
pub mod sanitize;
pub mod synth;
pub mod vectors;

use serde::{Deserialize, Serialize};

pub use annotate::{annotate, DirectivePolicy};
pub use emit::{emit_kernel, emit_testbench};
pub use error::{RejectionReason, TranspileError};
pub use interp::{interpret, EvalError};
pub use ir::KernelIR;
pub use lower::{lower, LowerOptions};
pub use pyast::parse_compiled_source;
pub use sanitize::sanitize;
pub use vectors::{KernelOutput, TestVectors, Value};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TranspileOptions {
    #[serde(skip)]
    pub lower: LowerOptions,
    pub directives: DirectivePolicy,
}

/// Emitted artifacts for one kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct TranspiledKernel {
    pub kernel: KernelIR,
    /// `<kernel>.c`
    pub c_source: String,
    /// `<kernel>_tb.c`
    pub testbench: String,
    /// `<kernel>.ir.json`
    pub ir_json: String,
}

impl TranspiledKernel {
    pub fn c_file_name(&self) -> String {
        format!("{}.c", self.kernel.name)
    }

    pub fn tb_file_name(&self) -> String {
        format!("{}_tb.c", self.kernel.name)
    }

    pub fn ir_file_name(&self) -> String {
        format!("{}.ir.json", self.kernel.name)
    }

    pub fn write_to(&self, dir: &std::path::Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(self.c_file_name()), &self.c_source)?;
        std::fs::write(dir.join(self.tb_file_name()), &self.testbench)?;
        std::fs::write(dir.join(self.ir_file_name()), &self.ir_json)
    }
}

/// Parse, sanitize and lower without annotating.
pub fn to_kernel(source: &str, opts: &LowerOptions) -> Result<KernelIR, TranspileError> {
    lower(&sanitize(&parse_compiled_source(source)?)?, opts)
}

/// Full translation of one compiled program. Vectors, when given, are
/// type-checked against the kernel and baked into the testbench.
pub fn transpile(
    source: &str,
    opts: &TranspileOptions,
    vectors: Option<&TestVectors>,
) -> Result<TranspiledKernel, TranspileError> {
    let kernel = annotate(&to_kernel(source, &opts.lower)?, &opts.directives)?;
    let vectors = match vectors {
        Some(v) => v.check_against(&kernel)?,
        None => TestVectors::default(),
    };
    Ok(TranspiledKernel {
        c_source: emit_kernel(&kernel),
        testbench: emit_testbench(&kernel, &vectors),
        ir_json: kernel.to_json(),
        kernel,
    })
}
