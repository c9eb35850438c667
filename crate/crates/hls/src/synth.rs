//! Synthesis driving: TCL rendering, tool invocation (or canned reports in
//! mock mode) and `csynth` report parsing.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use p2s_core::process::{find_tool, run_with_timeout};

/// Environment variable naming the HLS executable.
pub const HLS_BIN_ENV: &str = "P2S_HLS_BIN";
/// Executables searched on `PATH` when the override is unset.
pub const HLS_TOOL_NAMES: [&str; 2] = ["vitis_hls", "vivado_hls"];
pub const SCRIPT_FILE: &str = "run_hls.tcl";
pub const SOLUTION: &str = "solution1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToolMode {
    Real,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub part: String,
    pub clock_period_ns: f64,
    /// Top function; empty means the kernel's own name.
    pub top_function: String,
    pub tool_mode: ToolMode,
    pub tool_timeout_s: u64,
    /// `mock_reports.toml` used in mock mode.
    pub mock_table: Option<PathBuf>,
    /// Concurrent synthesis runs.
    pub workers: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            part: "xc7z020clg484-1".into(),
            clock_period_ns: 10.0,
            top_function: String::new(),
            tool_mode: ToolMode::Mock,
            tool_timeout_s: 3600,
            mock_table: None,
            workers: 2,
        }
    }
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthesis config: {0}")]
    Config(String),
    #[error("HLS tool not found (set {HLS_BIN_ENV} or put vitis_hls/vivado_hls on PATH)")]
    ToolNotFound,
    #[error("mock report table: {0}")]
    MockTable(String),
    #[error("no mock report registered for kernel hash {0}")]
    NoMockEntry(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if !(self.clock_period_ns.is_finite() && self.clock_period_ns > 0.0) {
            return Err(SynthError::Config("clock_period_ns must be positive".into()));
        }
        if self.part.trim().is_empty() {
            return Err(SynthError::Config("part must be non-empty".into()));
        }
        if self.tool_timeout_s == 0 {
            return Err(SynthError::Config("tool_timeout_s must be positive".into()));
        }
        if self.workers == 0 {
            return Err(SynthError::Config("workers must be positive".into()));
        }
        Ok(())
    }

    pub fn top_for(&self, kernel_name: &str) -> String {
        if self.top_function.is_empty() {
            kernel_name.to_string()
        } else {
            self.top_function.clone()
        }
    }
}

/// Formats a decimal without a trailing `.0` (`10`, `2.5`).
fn decimal(v: f64) -> String {
    let s = format!("{v}");
    s.strip_suffix(".0").map(str::to_string).unwrap_or(s)
}

pub fn project_name(top: &str) -> String {
    format!("{top}_prj")
}

fn tcl_path(p: &Path) -> String {
    format!("{{{}}}", p.display())
}

pub fn render_tcl(cfg: &SynthConfig, top: &str, kernel_file: &Path, tb_file: &Path) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "open_project -reset {}", project_name(top));
    let _ = writeln!(s, "set_top {top}");
    let _ = writeln!(s, "add_files {}", tcl_path(kernel_file));
    let _ = writeln!(s, "add_files -tb {}", tcl_path(tb_file));
    let _ = writeln!(s, "open_solution -reset {SOLUTION}");
    let _ = writeln!(s, "set_part {{{}}}", cfg.part);
    let _ = writeln!(s, "create_clock -period {} -name default", decimal(cfg.clock_period_ns));
    let _ = writeln!(s, "csynth_design");
    let _ = writeln!(s, "exit");
    s
}

/// Raw report files of one synthesis run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RawReportBundle {
    pub top: String,
    /// `<top>_csynth.xml`
    pub xml: Option<Vec<u8>>,
    /// `<top>_csynth.rpt`
    pub rpt: Option<Vec<u8>>,
}

impl RawReportBundle {
    pub fn xml_name(top: &str) -> String {
        format!("{top}_csynth.xml")
    }

    pub fn rpt_name(top: &str) -> String {
        format!("{top}_csynth.rpt")
    }

    /// Reads a bundle directory. The report file names inside it may use a
    /// different top name than `top`; the first `*_csynth.xml` is taken then.
    pub fn from_dir(dir: &Path, top: &str) -> std::io::Result<Self> {
        let read = |name: &str| std::fs::read(dir.join(name)).ok();
        let (mut xml, mut rpt) = (read(&Self::xml_name(top)), read(&Self::rpt_name(top)));
        if xml.is_none() {
            let mut names: Vec<String> = std::fs::read_dir(dir)?
                .filter_map(|e| e.ok().map(|e| e.file_name().to_string_lossy().into_owned()))
                .filter(|n| n.ends_with("_csynth.xml"))
                .collect();
            names.sort();
            if let Some(n) = names.first() {
                xml = read(n);
                rpt = read(&n.replace("_csynth.xml", "_csynth.rpt"));
            }
        }
        Ok(RawReportBundle {
            top: top.to_string(),
            xml,
            rpt,
        })
    }

    pub fn write_to(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        if let Some(x) = &self.xml {
            std::fs::write(dir.join(Self::xml_name(&self.top)), x)?;
        }
        if let Some(r) = &self.rpt {
            std::fs::write(dir.join(Self::rpt_name(&self.top)), r)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SynthStatus {
    Synthesized,
    ParseFail,
    SynthFail,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisReport {
    pub status: SynthStatus,
    pub latency_ns: Option<f64>,
    pub latency_cycles: Option<u64>,
    pub best_latency_cycles: Option<u64>,
    pub estimated_clock_ns: Option<f64>,
    pub initiation_interval: Option<u64>,
    pub luts: Option<u64>,
    pub dsps: Option<u64>,
    pub ffs: Option<u64>,
    pub elapsed_s: f64,
    pub peak_memory_mb: Option<f64>,
    pub failure_detail: Option<String>,
}

impl SynthesisReport {
    pub fn failed(status: SynthStatus, detail: impl Into<String>, elapsed_s: f64, peak_memory_mb: Option<f64>) -> Self {
        SynthesisReport {
            status,
            latency_ns: None,
            latency_cycles: None,
            best_latency_cycles: None,
            estimated_clock_ns: None,
            initiation_interval: None,
            luts: None,
            dsps: None,
            ffs: None,
            elapsed_s,
            peak_memory_mb,
            failure_detail: Some(detail.into()),
        }
    }
}

fn child_text<'a>(node: roxmltree::Node<'a, 'a>, path: &[&str]) -> Result<&'a str, String> {
    let mut cur = node;
    for name in path {
        cur = cur
            .children()
            .find(|c| c.has_tag_name(*name))
            .ok_or_else(|| format!("missing element <{name}> (path {})", path.join("/")))?;
    }
    Ok(cur.text().unwrap_or("").trim())
}

fn child_u64(node: roxmltree::Node<'_, '_>, path: &[&str]) -> Result<u64, String> {
    let t = child_text(node, path)?;
    t.parse::<u64>()
        .map_err(|_| format!("element <{}> is not a count: {t:?}", path.last().unwrap_or(&"")))
}

fn first_u64(node: roxmltree::Node<'_, '_>, paths: &[&[&str]]) -> Result<u64, String> {
    let mut first_err = None;
    for p in paths {
        match child_u64(node, p) {
            Ok(v) => return Ok(v),
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    Err(first_err.unwrap_or_default())
}

/// Elements a complete report must contain (alternatives per entry).
const REQUIRED_TAGS: [&[&str]; 4] = [&["Worst-caseLatency"], &["LUT"], &["DSP48E", "DSP"], &["FF"]];

/// Parses a report bundle. Never panics: malformed input yields PARSE_FAIL
/// with a detail naming what is missing.
pub fn parse_report(bundle: &RawReportBundle, cfg: &SynthConfig, elapsed_s: f64, peak_memory_mb: Option<f64>) -> SynthesisReport {
    let fail = |detail: String| SynthesisReport::failed(SynthStatus::ParseFail, detail, elapsed_s, peak_memory_mb);
    let Some(bytes) = &bundle.xml else {
        return fail(format!("missing {}", RawReportBundle::xml_name(&bundle.top)));
    };
    let Ok(text) = std::str::from_utf8(bytes) else {
        return fail("report XML is not UTF-8".into());
    };
    let doc = match roxmltree::Document::parse(text) {
        Ok(d) => d,
        Err(e) => {
            let missing = REQUIRED_TAGS
                .iter()
                .find(|alts| !alts.iter().any(|t| text.contains(&format!("<{t}>"))))
                .map(|alts| format!("; missing element <{}>", alts[0]))
                .unwrap_or_default();
            return fail(format!("malformed report XML ({e}){missing}"));
        }
    };
    let root = doc.root_element();
    let parsed = (|| -> Result<SynthesisReport, String> {
        let perf = ["PerformanceEstimates", "SummaryOfOverallLatency"];
        let worst = child_u64(root, &[perf[0], perf[1], "Worst-caseLatency"])?;
        let best = child_u64(root, &[perf[0], perf[1], "Best-caseLatency"]).ok();
        let ii = child_u64(root, &[perf[0], perf[1], "Interval-max"]).ok().filter(|v| *v > 0);
        let clock = child_text(root, &["PerformanceEstimates", "SummaryOfTimingAnalysis", "EstimatedClockPeriod"])
            .ok()
            .and_then(|t| t.parse::<f64>().ok());
        let res = ["AreaEstimates", "Resources"];
        let luts = child_u64(root, &[res[0], res[1], "LUT"])?;
        let dsps = first_u64(root, &[&[res[0], res[1], "DSP48E"], &[res[0], res[1], "DSP"]])?;
        let ffs = child_u64(root, &[res[0], res[1], "FF"])?;
        Ok(SynthesisReport {
            status: SynthStatus::Synthesized,
            latency_ns: Some(worst as f64 * cfg.clock_period_ns),
            latency_cycles: Some(worst),
            best_latency_cycles: best,
            estimated_clock_ns: clock,
            initiation_interval: ii,
            luts: Some(luts),
            dsps: Some(dsps),
            ffs: Some(ffs),
            elapsed_s,
            peak_memory_mb,
            failure_detail: None,
        })
    })();
    parsed.unwrap_or_else(fail)
}

/// Hex SHA-256 of the kernel source; the key of the mock table.
pub fn kernel_hash(kernel_c: &str) -> String {
    hex::encode(Sha256::digest(kernel_c.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockEntry {
    /// Informational label.
    #[serde(default)]
    pub name: String,
    pub sha256: String,
    /// Bundle directory, relative to the table file.
    #[serde(default)]
    pub bundle: Option<PathBuf>,
    /// Canned vendor error; the run fails with it.
    #[serde(default)]
    pub failure: Option<String>,
    #[serde(default)]
    pub timeout: bool,
    #[serde(default)]
    pub elapsed_s: f64,
    #[serde(default)]
    pub peak_memory_mb: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MockTable {
    pub base_dir: PathBuf,
    pub entries: BTreeMap<String, MockEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MockFile {
    #[serde(default)]
    kernel: Vec<MockEntry>,
}

impl MockTable {
    pub fn load(path: &Path) -> Result<Self, SynthError> {
        let text = std::fs::read_to_string(path).map_err(|e| SynthError::MockTable(format!("{}: {e}", path.display())))?;
        let file: MockFile = toml::from_str(&text).map_err(|e| SynthError::MockTable(format!("{}: {e}", path.display())))?;
        let mut entries = BTreeMap::new();
        for e in file.kernel {
            let kinds = usize::from(e.bundle.is_some()) + usize::from(e.failure.is_some()) + usize::from(e.timeout);
            if kinds != 1 {
                return Err(SynthError::MockTable(format!(
                    "entry {} must have exactly one of bundle, failure, timeout",
                    e.sha256
                )));
            }
            let key = e.sha256.to_ascii_lowercase();
            if entries.insert(key.clone(), e).is_some() {
                return Err(SynthError::MockTable(format!("duplicate hash {key}")));
            }
        }
        Ok(MockTable {
            base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            entries,
        })
    }
}

/// What a tool run produced before report parsing.
#[derive(Debug, Clone, PartialEq)]
pub enum RunOutcome {
    Bundle(RawReportBundle),
    Failed(String),
    TimedOut,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthRun {
    pub outcome: RunOutcome,
    pub elapsed_s: f64,
    pub peak_memory_mb: Option<f64>,
}

/// Canned result keyed by the kernel hash.
pub fn run_mock(table: &MockTable, kernel_c: &str, top: &str) -> Result<SynthRun, SynthError> {
    let hash = kernel_hash(kernel_c);
    let entry = table.entries.get(&hash).ok_or(SynthError::NoMockEntry(hash))?;
    let outcome = if entry.timeout {
        RunOutcome::TimedOut
    } else if let Some(f) = &entry.failure {
        RunOutcome::Failed(f.clone())
    } else {
        let dir = table.base_dir.join(entry.bundle.as_ref().expect("validated on load"));
        RunOutcome::Bundle(RawReportBundle::from_dir(&dir, top)?)
    };
    Ok(SynthRun {
        outcome,
        elapsed_s: entry.elapsed_s,
        peak_memory_mb: entry.peak_memory_mb,
    })
}

/// Runs the HLS tool on `script` inside `work_dir`.
pub fn run_real(script: &str, cfg: &SynthConfig, top: &str, work_dir: &Path) -> Result<SynthRun, SynthError> {
    let bin = find_tool(Some(HLS_BIN_ENV), &HLS_TOOL_NAMES).ok_or(SynthError::ToolNotFound)?;
    std::fs::create_dir_all(work_dir)?;
    std::fs::write(work_dir.join(SCRIPT_FILE), script)?;
    let out = run_with_timeout(
        &bin,
        &["-f".to_string(), SCRIPT_FILE.to_string()],
        Some(work_dir),
        Duration::from_secs(cfg.tool_timeout_s),
    )
    .map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => SynthError::ToolNotFound,
        _ => SynthError::Io(e),
    })?;
    let elapsed_s = out.elapsed.as_secs_f64();
    let peak_memory_mb = out.peak_rss_kb.map(|kb| kb as f64 / 1024.0);
    let outcome = if out.timed_out {
        RunOutcome::TimedOut
    } else if !out.success() {
        let text = out.combined();
        let detail = text
            .lines()
            .find(|l| l.trim_start().starts_with("ERROR"))
            .map(str::to_string)
            .unwrap_or_else(|| format!("tool exited with {:?}", out.exit_code));
        RunOutcome::Failed(detail)
    } else {
        let report_dir = work_dir.join(project_name(top)).join(SOLUTION).join("syn").join("report");
        RunOutcome::Bundle(RawReportBundle::from_dir(&report_dir, top).unwrap_or_else(|_| RawReportBundle {
            top: top.to_string(),
            ..RawReportBundle::default()
        }))
    };
    Ok(SynthRun {
        outcome,
        elapsed_s,
        peak_memory_mb,
    })
}

/// Converts a run into a report, parsing the bundle when there is one.
pub fn report_for(run: &SynthRun, cfg: &SynthConfig) -> (SynthesisReport, Option<RawReportBundle>) {
    match &run.outcome {
        RunOutcome::Bundle(b) => (parse_report(b, cfg, run.elapsed_s, run.peak_memory_mb), Some(b.clone())),
        RunOutcome::Failed(msg) => (
            SynthesisReport::failed(SynthStatus::SynthFail, msg.clone(), run.elapsed_s, run.peak_memory_mb),
            None,
        ),
        RunOutcome::TimedOut => (
            SynthesisReport::failed(
                SynthStatus::Timeout,
                format!("no result within {} s", cfg.tool_timeout_s),
                run.elapsed_s,
                run.peak_memory_mb,
            ),
            None,
        ),
    }
}

/// Synthesizes one kernel: writes sources and the script into `work_dir`,
/// then runs the tool (real mode) or looks up the canned result (mock mode).
pub fn synthesize(
    kernel_name: &str,
    kernel_c: &str,
    testbench_c: &str,
    cfg: &SynthConfig,
    mock: Option<&MockTable>,
    work_dir: &Path,
) -> Result<(SynthesisReport, Option<RawReportBundle>), SynthError> {
    cfg.validate()?;
    let top = cfg.top_for(kernel_name);
    std::fs::create_dir_all(work_dir)?;
    let kernel_file = PathBuf::from(format!("{kernel_name}.c"));
    let tb_file = PathBuf::from(format!("{kernel_name}_tb.c"));
    std::fs::write(work_dir.join(&kernel_file), kernel_c)?;
    std::fs::write(work_dir.join(&tb_file), testbench_c)?;
    let script = render_tcl(cfg, &top, &kernel_file, &tb_file);
    let run = match cfg.tool_mode {
        ToolMode::Real => run_real(&script, cfg, &top, work_dir)?,
        ToolMode::Mock => {
            std::fs::write(work_dir.join(SCRIPT_FILE), &script)?;
            let table = mock.ok_or_else(|| SynthError::MockTable("mock mode needs a mock table".into()))?;
            run_mock(table, kernel_c, &top)?
        }
    };
    Ok(report_for(&run, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const XML: &str = r#"<?xml version="1.0" encoding="UTF-8"?>
<profile>
  <PerformanceEstimates>
    <SummaryOfTimingAnalysis><unit>ns</unit><EstimatedClockPeriod>8.510</EstimatedClockPeriod></SummaryOfTimingAnalysis>
    <SummaryOfOverallLatency>
      <unit>clock cycles</unit>
      <Best-caseLatency>4</Best-caseLatency>
      <Worst-caseLatency>6</Worst-caseLatency>
      <Interval-min>5</Interval-min>
      <Interval-max>7</Interval-max>
    </SummaryOfOverallLatency>
  </PerformanceEstimates>
  <AreaEstimates><Resources><DSP48E>6</DSP48E><FF>789</FF><LUT>685</LUT></Resources></AreaEstimates>
</profile>
"#;

    fn bundle(xml: &str) -> RawReportBundle {
        RawReportBundle {
            top: "k".into(),
            xml: Some(xml.as_bytes().to_vec()),
            rpt: None,
        }
    }

    #[test]
    fn parses_latency_and_resources() {
        let r = parse_report(&bundle(XML), &SynthConfig::default(), 1.5, None);
        assert_eq!(r.status, SynthStatus::Synthesized);
        assert_eq!(r.latency_cycles, Some(6));
        assert_eq!(r.latency_ns, Some(60.0));
        assert_eq!(r.best_latency_cycles, Some(4));
        assert_eq!(r.initiation_interval, Some(7));
        assert_eq!(r.estimated_clock_ns, Some(8.51));
        assert_eq!((r.luts, r.dsps, r.ffs), (Some(685), Some(6), Some(789)));
        let fast = SynthConfig {
            clock_period_ns: 5.0,
            ..SynthConfig::default()
        };
        assert_eq!(parse_report(&bundle(XML), &fast, 0.0, None).latency_ns, Some(30.0));
    }

    #[test]
    fn vitis_dsp_tag_is_accepted() {
        let r = parse_report(&bundle(&XML.replace("DSP48E", "DSP")), &SynthConfig::default(), 0.0, None);
        assert_eq!(r.dsps, Some(6));
    }

    #[test]
    fn missing_element_is_named() {
        let r = parse_report(&bundle(&XML.replace("<LUT>685</LUT>", "")), &SynthConfig::default(), 0.0, None);
        assert_eq!(r.status, SynthStatus::ParseFail);
        assert!(r.failure_detail.unwrap().contains("<LUT>"));
        let cut = &XML[..XML.find("<AreaEstimates>").unwrap()];
        let r = parse_report(&bundle(cut), &SynthConfig::default(), 0.0, None);
        assert_eq!(r.status, SynthStatus::ParseFail);
        assert!(r.failure_detail.unwrap().contains("missing element <LUT>"));
        let r = parse_report(&RawReportBundle::default(), &SynthConfig::default(), 0.0, None);
        assert!(r.failure_detail.unwrap().contains("_csynth.xml"));
    }

    #[test]
    fn tcl_contains_part_and_clock() {
        let cfg = SynthConfig::default();
        let a = render_tcl(&cfg, "cube", Path::new("cube.c"), Path::new("cube_tb.c"));
        assert!(a.contains("create_clock -period 10 -name default"));
        assert!(a.contains("set_part {xc7z020clg484-1}"));
        assert!(a.contains("set_top cube"));
        assert_eq!(a, render_tcl(&cfg, "cube", Path::new("cube.c"), Path::new("cube_tb.c")));
        let five = SynthConfig {
            clock_period_ns: 5.0,
            ..cfg
        };
        let b = render_tcl(&five, "cube", Path::new("cube.c"), Path::new("cube_tb.c"));
        assert!(b.contains("-period 5 ") && !b.contains("10"));
    }

    #[test]
    fn config_validation() {
        assert!(SynthConfig::default().validate().is_ok());
        for bad in [
            SynthConfig {
                clock_period_ns: 0.0,
                ..SynthConfig::default()
            },
            SynthConfig {
                part: " ".into(),
                ..SynthConfig::default()
            },
        ] {
            assert!(matches!(bad.validate(), Err(SynthError::Config(_))));
        }
    }

    proptest! {
        #[test]
        fn parse_report_is_total(bytes in proptest::collection::vec(any::<u8>(), 0..512)) {
            let b = RawReportBundle { top: "k".into(), xml: Some(bytes), rpt: None };
            let r = parse_report(&b, &SynthConfig::default(), 0.0, None);
            prop_assert!(r.status == SynthStatus::ParseFail || r.latency_ns.is_some());
        }

        #[test]
        fn truncations_are_parse_failures(cut in 0usize..XML.find("</profile>").unwrap()) {
            let r = parse_report(&bundle(&XML[..cut]), &SynthConfig::default(), 0.0, None);
            prop_assert_eq!(r.status, SynthStatus::ParseFail);
        }
    }
}
