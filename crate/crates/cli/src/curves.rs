//! Training-curve plots from the per-episode CSV log.

use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use p2s_core::episode::CURVE_HEADER;

/// Trailing moving-average window.
pub const SMOOTH_WINDOW: usize = 50;
/// Scale applied to the value loss when scaling is requested.
pub const VALUE_LOSS_SCALE: f64 = 1000.0;
pub const SMOOTHED_FILE: &str = "curves_smoothed.csv";

#[derive(Debug, Error)]
pub enum CurveError {
    #[error("training log schema: {0}")]
    Schema(String),
    #[error("plot: {0}")]
    Plot(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveLogRow {
    pub episode: u64,
    pub reward: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub success: u8,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Series {
    pub episode: Vec<u64>,
    pub reward: Vec<f64>,
    pub policy_loss: Vec<f64>,
    pub value_loss: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePlots {
    pub files: Vec<PathBuf>,
    /// Raw series (value loss scaled if requested).
    pub raw: Series,
    pub smoothed: Series,
}

/// Parses a curve log; the header must match the trainer's schema and at
/// least one row must be present.
pub fn parse_log(csv_text: &str) -> Result<Vec<CurveLogRow>, CurveError> {
    let header = csv_text.lines().next().unwrap_or("").trim();
    if header != CURVE_HEADER {
        return Err(CurveError::Schema(format!("expected header `{CURVE_HEADER}`, found `{header}`")));
    }
    let mut reader = csv::Reader::from_reader(csv_text.as_bytes());
    let mut rows = Vec::new();
    for (i, r) in reader.deserialize::<CurveLogRow>().enumerate() {
        rows.push(r.map_err(|e| CurveError::Schema(format!("row {}: {e}", i + 1)))?);
    }
    if rows.is_empty() {
        return Err(CurveError::Schema("log has no rows".into()));
    }
    Ok(rows)
}

/// Trailing mean over at most `window` values; same length as the input.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (i, v) in values.iter().enumerate() {
        sum += v;
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

/// Writes `reward.svg`, `policy_loss.svg`, `value_loss.svg` and the
/// smoothed series into `out_dir`.
pub fn render_training_curves(csv_text: &str, out_dir: &Path, scale_value_loss: bool) -> Result<CurvePlots, CurveError> {
    let rows = parse_log(csv_text)?;
    let scale = if scale_value_loss { VALUE_LOSS_SCALE } else { 1.0 };
    let raw = Series {
        episode: rows.iter().map(|r| r.episode).collect(),
        reward: rows.iter().map(|r| r.reward).collect(),
        policy_loss: rows.iter().map(|r| r.policy_loss).collect(),
        value_loss: rows.iter().map(|r| r.value_loss * scale).collect(),
    };
    let smoothed = Series {
        episode: raw.episode.clone(),
        reward: smooth(&raw.reward, SMOOTH_WINDOW),
        policy_loss: smooth(&raw.policy_loss, SMOOTH_WINDOW),
        value_loss: smooth(&raw.value_loss, SMOOTH_WINDOW),
    };
    std::fs::create_dir_all(out_dir)?;
    let value_label = if scale_value_loss { "Value Loss x 1000" } else { "Value Loss" };
    let mut files = Vec::new();
    for (name, label, r, s) in [
        ("reward", "Reward", &raw.reward, &smoothed.reward),
        ("policy_loss", "Policy Loss", &raw.policy_loss, &smoothed.policy_loss),
        ("value_loss", value_label, &raw.value_loss, &smoothed.value_loss),
    ] {
        let path = out_dir.join(format!("{name}.svg"));
        plot(&path, label, &raw.episode, r, s)?;
        files.push(path);
    }
    let mut text = String::from("episode,reward,policy_loss,value_loss\n");
    for i in 0..smoothed.episode.len() {
        text.push_str(&format!(
            "{},{},{},{}\n",
            smoothed.episode[i], smoothed.reward[i], smoothed.policy_loss[i], smoothed.value_loss[i]
        ));
    }
    let smoothed_path = out_dir.join(SMOOTHED_FILE);
    std::fs::write(&smoothed_path, text)?;
    files.push(smoothed_path);
    Ok(CurvePlots { files, raw, smoothed })
}

fn plot(path: &Path, label: &str, x: &[u64], raw: &[f64], smoothed: &[f64]) -> Result<(), CurveError> {
    let err = |e: &dyn std::fmt::Display| CurveError::Plot(e.to_string());
    let x0 = *x.first().unwrap_or(&0) as f64;
    let x1 = (*x.last().unwrap_or(&1) as f64).max(x0 + 1.0);
    let finite = raw.iter().chain(smoothed).copied().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 1.0) };
    let pad = ((hi - lo) * 0.05).max(1e-9);
    let root = SVGBackend::new(path, (800, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(label, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, (lo - pad)..(hi + pad))
        .map_err(|e| err(&e))?;
    chart
        .configure_mesh()
        .x_desc("Episode")
        .y_desc(label)
        .draw()
        .map_err(|e| err(&e))?;
    let pts = |ys: &[f64]| -> Vec<(f64, f64)> { x.iter().zip(ys).map(|(a, b)| (*a as f64, *b)).collect() };
    chart
        .draw_series(LineSeries::new(pts(raw), RGBColor(170, 190, 230)))
        .map_err(|e| err(&e))?
        .label("raw");
    chart
        .draw_series(LineSeries::new(pts(smoothed), BLUE.stroke_width(2)))
        .map_err(|e| err(&e))?
        .label(format!("mean of {SMOOTH_WINDOW}"));
    root.present().map_err(|e| err(&e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log(n: usize) -> String {
        let mut s = format!("{CURVE_HEADER}\n");
        for i in 1..=n {
            s.push_str(&format!("{i},{},{},{},0.5,{}\n", i as f64 * 0.1, 1.0 / i as f64, 0.002, i % 2));
        }
        s
    }

    #[test]
    fn smoothing_keeps_length_and_window() {
        let v: Vec<f64> = (0..120).map(f64::from).collect();
        let s = smooth(&v, 50);
        assert_eq!(s.len(), v.len());
        assert_eq!(s[0], 0.0);
        assert_eq!(s[3], 1.5);
        assert_eq!(s[119], (70..120).map(f64::from).sum::<f64>() / 50.0);
    }

    #[test]
    fn renders_files_and_scales_value_loss() {
        let dir = tempfile::tempdir().unwrap();
        let out = render_training_curves(&log(80), dir.path(), true).unwrap();
        for f in &out.files {
            assert!(f.is_file(), "{}", f.display());
        }
        assert_eq!(out.smoothed.reward.len(), 80);
        assert!(out.raw.value_loss.iter().all(|v| (v - 2.0).abs() < 1e-12));
        let plain = render_training_curves(&log(80), dir.path(), false).unwrap();
        assert!(plain.raw.value_loss.iter().all(|v| (v - 0.002).abs() < 1e-15));
    }

    #[test]
    fn schema_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            render_training_curves(&format!("{CURVE_HEADER}\n"), dir.path(), false),
            Err(CurveError::Schema(_))
        ));
        assert!(matches!(render_training_curves("", dir.path(), false), Err(CurveError::Schema(_))));
        assert!(matches!(
            render_training_curves("a,b\n1,2\n", dir.path(), false),
            Err(CurveError::Schema(_))
        ));
        let bad = format!("{CURVE_HEADER}\n1,x,0,0,0,1\n");
        assert!(matches!(render_training_curves(&bad, dir.path(), false), Err(CurveError::Schema(_))));
    }
}
