//! SVG line charts of training dynamics, raw and EMA-smoothed.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::grpo::StepMetrics;
use crate::{Error, Result};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 6] = ["#1f5fa8", "#c0392b", "#27864a", "#8e44ad", "#d68910", "#2c3e50"];

/// `ema[0] = x[0]`, `ema[t] = c * ema[t-1] + (1 - c) * x[t]`.
pub fn ema(series: &[f64], c: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(series.len());
    for &x in series {
        let next = match out.last() {
            Some(&prev) => c * prev + (1.0 - c) * x,
            None => x,
        };
        out.push(next);
    }
    out
}

/// Reads a `metrics.csv`, reporting the 1-based data row of any failure.
pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        row: 0,
        message: e.to_string(),
    })?;
    reader
        .deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                row: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// One labelled run.
pub struct Series<'a> {
    pub label: String,
    pub metrics: &'a [StepMetrics],
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// A line chart with one raw and one smoothed polyline per run.
pub fn line_chart(title: &str, y_label: &str, runs: &[(String, Vec<(f64, f64)>)], ema_c: f64) -> String {
    let points = runs.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let pad = 0.05 * (y1 - y0);
    let (y0, y1) = (y0 - pad, y1 + pad);
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);

    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    )
    .unwrap();
    writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#).unwrap();
    writeln!(
        svg,
        r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="16">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    )
    .unwrap();
    let (left, right, top, bottom) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    writeln!(
        svg,
        r#"<path d="M{left} {top} L{left} {bottom} L{right} {bottom}" fill="none" stroke="black"/>"#
    )
    .unwrap();
    for (v, y) in [(y0, bottom), (y1, top)] {
        writeln!(
            svg,
            r#"<text x="{}" y="{y}" text-anchor="end" font-family="sans-serif" font-size="11">{v:.3}</text>"#,
            left - 4.0
        )
        .unwrap();
    }
    for (v, x) in [(x0, left), (x1, right)] {
        writeln!(
            svg,
            r#"<text x="{x}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="11">{v}</text>"#,
            bottom + 16.0
        )
        .unwrap();
    }
    writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">step</text>"#,
        WIDTH / 2.0,
        HEIGHT - 12.0
    )
    .unwrap();
    writeln!(
        svg,
        r#"<text x="16" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12" transform="rotate(-90 16 {})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(y_label)
    )
    .unwrap();

    for (i, (label, pts)) in runs.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
        let smooth = ema(&ys, ema_c);
        let poly = |vals: &[f64]| {
            pts.iter()
                .zip(vals)
                .map(|(&(x, _), &y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                .collect::<Vec<_>>()
                .join(" ")
        };
        writeln!(
            svg,
            r#"<polyline class="raw" data-run="{}" points="{}" fill="none" stroke="{color}" stroke-opacity="0.3" stroke-width="1"/>"#,
            escape(label),
            poly(&ys)
        )
        .unwrap();
        writeln!(
            svg,
            r#"<polyline class="ema" data-run="{}" points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            escape(label),
            poly(&smooth)
        )
        .unwrap();
        let ly = MARGIN + 14.0 * i as f64;
        writeln!(
            svg,
            r#"<text x="{}" y="{ly}" font-family="sans-serif" font-size="11" fill="{color}">{}</text>"#,
            right - 150.0,
            escape(label)
        )
        .unwrap();
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes `entropy.svg` and `accuracy.svg` for the given runs into `out_dir`.
pub fn emit_charts(runs: &[Series<'_>], ema_c: f64, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let extract = |f: fn(&StepMetrics) -> f64| -> Vec<(String, Vec<(f64, f64)>)> {
        runs.iter()
            .map(|r| (r.label.clone(), r.metrics.iter().map(|m| (m.step as f64, f(m))).collect()))
            .collect()
    };
    let charts = [
        ("entropy.svg", "Policy entropy", "entropy", extract(|m| m.entropy_eq3)),
        ("accuracy.svg", "Training accuracy", "accuracy", extract(|m| m.train_accuracy)),
    ];
    let mut written = Vec::new();
    for (file, title, y_label, data) in charts {
        let path = out_dir.join(file);
        std::fs::write(&path, line_chart(title, y_label, &data, ema_c)).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

/// [`emit_charts`] over metrics CSV files, labelled by their parent directory.
pub fn emit_charts_from_csv(paths: &[PathBuf], ema_c: f64, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let loaded: Vec<(String, Vec<StepMetrics>)> = paths
        .iter()
        .map(|p| {
            let label = p
                .parent()
                .and_then(Path::file_name)
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| p.display().to_string());
            read_metrics(p).map(|m| (label, m))
        })
        .collect::<Result<_>>()?;
    let series: Vec<Series> = loaded
        .iter()
        .map(|(label, m)| Series {
            label: label.clone(),
            metrics: m,
        })
        .collect();
    emit_charts(&series, ema_c, out_dir)
}
