//! Artifact emission for completed runs: manifest JSON, metric/curve/
//! histogram CSVs, and a self-contained SVG of the risk–coverage curve.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::metrics::{risk_coverage_curve, write_prediction_dump, EvalRecord, MetricReport};
use crate::train::RunManifest;

pub const METRICS_CSV_HEADER: &str = "run_id,accuracy,aurc_x1000,auroc,fpr95";
pub const HISTOGRAM_BINS: usize = 20;

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Fixed-point display cell, trailing zeros trimmed: 45.810000 → "45.81".
fn num_cell(v: f64) -> String {
    let s = format!("{v:.6}");
    let t = s.trim_end_matches('0').trim_end_matches('.');
    if t.is_empty() || t == "-" {
        "0".to_string()
    } else {
        t.to_string()
    }
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(num_cell).unwrap_or_default()
}

/// One `run_id,accuracy,aurc_x1000,auroc,fpr95` row per entry.
pub fn write_metrics_csv(rows: &[(String, MetricReport)], path: &Path) -> Result<()> {
    let mut out = String::from(METRICS_CSV_HEADER);
    out.push('\n');
    for (run_id, m) in rows {
        out.push_str(&format!(
            "{run_id},{},{},{},{}\n",
            num_cell(m.accuracy),
            num_cell(m.aurc_x1000()),
            opt_cell(m.auroc),
            opt_cell(m.fpr95),
        ));
    }
    write_text(path, &out)
}

/// Risk–coverage curve as CSV: one data row per test sample.
pub fn write_curve_csv(records: &[EvalRecord], path: &Path) -> Result<()> {
    let curve = risk_coverage_curve(records)?;
    let mut out = String::from("coverage,risk\n");
    for (cov, risk) in &curve.points {
        out.push_str(&format!("{cov},{risk}\n"));
    }
    write_text(path, &out)
}

/// Confidence histogram over 20 uniform bins of [0,1], split by correctness.
pub fn confidence_histogram(records: &[EvalRecord]) -> (Vec<u64>, Vec<u64>) {
    let mut correct = vec![0u64; HISTOGRAM_BINS];
    let mut incorrect = vec![0u64; HISTOGRAM_BINS];
    for r in records {
        let bin = ((r.confidence * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
        if r.correct {
            correct[bin] += 1;
        } else {
            incorrect[bin] += 1;
        }
    }
    (correct, incorrect)
}

pub fn write_histogram_csv(records: &[EvalRecord], path: &Path) -> Result<()> {
    let (correct, incorrect) = confidence_histogram(records);
    let mut out = String::from("bin_lo,bin_hi,correct,incorrect\n");
    for b in 0..HISTOGRAM_BINS {
        out.push_str(&format!(
            "{},{},{},{}\n",
            b as f64 / HISTOGRAM_BINS as f64,
            (b + 1) as f64 / HISTOGRAM_BINS as f64,
            correct[b],
            incorrect[b],
        ));
    }
    write_text(path, &out)
}

/// Minimal standalone SVG of the risk–coverage curve.
pub fn write_curve_svg(records: &[EvalRecord], path: &Path) -> Result<()> {
    let curve = risk_coverage_curve(records)?;
    let (w, h, ml, mb) = (640.0, 480.0, 60.0, 40.0);
    let plot_w = w - ml - 20.0;
    let plot_h = h - mb - 20.0;
    let y_max = curve
        .points
        .iter()
        .map(|&(_, r)| r)
        .fold(0.0f64, f64::max)
        .max(1e-6)
        * 1.05;
    let x_of = |cov: f64| ml + cov * plot_w;
    let y_of = |risk: f64| (h - mb) - (risk / y_max) * plot_h;
    let mut pts = String::new();
    for &(cov, risk) in &curve.points {
        pts.push_str(&format!("{:.2},{:.2} ", x_of(cov), y_of(risk)));
    }
    let svg = format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" ",
            "viewBox=\"0 0 {w} {h}\">\n",
            "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
            "<line x1=\"{ml}\" y1=\"{yb}\" x2=\"{xr}\" y2=\"{yb}\" stroke=\"black\"/>\n",
            "<line x1=\"{ml}\" y1=\"{yb}\" x2=\"{ml}\" y2=\"20\" stroke=\"black\"/>\n",
            "<text x=\"{xmid}\" y=\"{h_text}\" text-anchor=\"middle\" font-size=\"14\">coverage</text>\n",
            "<text x=\"18\" y=\"{ymid}\" text-anchor=\"middle\" font-size=\"14\" ",
            "transform=\"rotate(-90 18 {ymid})\">selective risk</text>\n",
            "<text x=\"{ml}\" y=\"{h_text}\" text-anchor=\"middle\" font-size=\"12\">0</text>\n",
            "<text x=\"{xr}\" y=\"{h_text}\" text-anchor=\"middle\" font-size=\"12\">1</text>\n",
            "<text x=\"{yl_x}\" y=\"{yb}\" text-anchor=\"end\" font-size=\"12\">0</text>\n",
            "<text x=\"{yl_x}\" y=\"26\" text-anchor=\"end\" font-size=\"12\">{ymax:.3}</text>\n",
            "<polyline fill=\"none\" stroke=\"#1f6fb2\" stroke-width=\"1.5\" points=\"{pts}\"/>\n",
            "</svg>\n"
        ),
        w = w,
        h = h,
        ml = ml,
        yb = h - mb,
        xr = w - 20.0,
        xmid = ml + plot_w / 2.0,
        ymid = 20.0 + plot_h / 2.0,
        h_text = h - mb + 24.0,
        yl_x = ml - 6.0,
        ymax = y_max,
        pts = pts.trim_end(),
    );
    write_text(path, &svg)
}

pub fn write_manifest_json(manifest: &RunManifest, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        reason: format!("manifest serialization failed: {e}"),
    })?;
    write_text(path, &json)
}

pub fn read_manifest_json(path: &Path) -> Result<RunManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        reason: format!("manifest deserialization failed: {e}"),
    })
}

/// Write every artifact of a completed run into `dir` and record the paths
/// in the manifest (which is itself written last, as `manifest.json`).
pub fn emit_report(
    manifest: &mut RunManifest,
    records: &[EvalRecord],
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut emit = |name: &str, f: &mut dyn FnMut(&Path) -> Result<()>| -> Result<PathBuf> {
        let path = dir.join(name);
        f(&path)?;
        written.push(path.clone());
        Ok(path)
    };

    let metric_rows: Vec<(String, MetricReport)> = manifest
        .reports
        .iter()
        .map(|(split, r)| (format!("{}/{split}", manifest.run_id), r.metrics))
        .collect();
    emit("metrics.csv", &mut |p| write_metrics_csv(&metric_rows, p))?;
    emit("predictions.csv", &mut |p| write_prediction_dump(records, p))?;
    emit("curve.csv", &mut |p| write_curve_csv(records, p))?;
    emit("confidence_histogram.csv", &mut |p| {
        write_histogram_csv(records, p)
    })?;
    emit("curve.svg", &mut |p| write_curve_svg(records, p))?;

    let manifest_path = dir.join("manifest.json");
    manifest.artifacts = written
        .iter()
        .chain(std::iter::once(&manifest_path))
        .map(|p| p.display().to_string())
        .collect();
    write_manifest_json(manifest, &manifest_path)?;
    written.push(manifest_path);
    Ok(written)
}

/// On divergence the run still leaves a machine-readable trace behind.
pub fn write_diagnostic_manifest(
    cfg_echo: Vec<(String, String)>,
    seed: Option<u64>,
    error: &Error,
    path: &Path,
) -> Result<()> {
    let body = serde_json::json!({
        "status": "failed",
        "error": error.to_string(),
        "exit_code": error.exit_code(),
        "seed": seed,
        "config": cfg_echo.into_iter().collect::<std::collections::BTreeMap<_, _>>(),
    });
    write_text(path, &serde_json::to_string_pretty(&body).unwrap())
}
