//! Metric CSVs, run metadata, and SVG curve plots.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use scenegraph_core::{Error, Result};

/// One CSV row; `k` and `value` are written as `NA` when absent.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub protocol: String,
    pub k: Option<usize>,
    pub value: Option<f64>,
}

impl MetricRow {
    pub fn new(metric: &str, protocol: &str, k: Option<usize>, value: Option<f64>) -> Self {
        Self {
            metric: metric.to_owned(),
            protocol: protocol.to_owned(),
            k,
            value,
        }
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Invalid(format!("csv: {e}"))
}

pub fn metrics_csv(rows: &[MetricRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["metric", "protocol", "K", "value"])
        .map_err(csv_error)?;
    for r in rows {
        let k = r.k.map_or_else(|| "NA".to_owned(), |k| k.to_string());
        let v = r.value.map_or_else(|| "NA".to_owned(), |v| format!("{v:.6}"));
        w.write_record([r.metric.as_str(), r.protocol.as_str(), &k, &v])
            .map_err(csv_error)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Invalid(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Invalid(e.to_string()))
}

pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[MetricRow]) -> Result<()> {
    std::fs::write(path, metrics_csv(rows)?)?;
    Ok(())
}

pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<MetricRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(csv_error)?;
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_error)?;
        let bad = |m: &str| Error::Parse {
            path: path.to_owned(),
            line: i + 2,
            message: m.to_owned(),
        };
        if rec.len() != 4 {
            return Err(bad("expected 4 fields"));
        }
        let opt = |s: &str| (s != "NA").then_some(s.to_owned());
        rows.push(MetricRow {
            metric: rec[0].to_owned(),
            protocol: rec[1].to_owned(),
            k: opt(&rec[2]).map(|s| s.parse()).transpose().map_err(|_| bad("bad K"))?,
            value: opt(&rec[3])
                .map(|s| s.parse())
                .transpose()
                .map_err(|_| bad("bad value"))?,
        });
    }
    Ok(rows)
}

/// `report.csv` → `report.csv.meta`.
pub fn sidecar_path(report: &Path) -> PathBuf {
    let mut s = report.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

/// `key = value` lines in the given order.
pub fn write_metadata(report: &Path, entries: &[(&str, String)]) -> Result<()> {
    let mut s = String::new();
    for (k, v) in entries {
        let _ = writeln!(s, "{k} = {v}");
    }
    std::fs::write(sidecar_path(report), s)?;
    Ok(())
}

/// A named polyline for [`line_chart_svg`].
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const COLOURS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

/// Static SVG line chart with axes, min/max tick labels, and a legend.
pub fn line_chart_svg(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h, left, right, top, bottom) = (640.0, 400.0, 70.0, 20.0, 40.0, 50.0);
    let pts = series
        .iter()
        .flat_map(|s| s.points.iter())
        .filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
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
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * (w - left - right);
    let sy = |y: f64| h - bottom - (y - y0) / (y1 - y0) * (h - top - bottom);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        w / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<path d="M{left} {top} V{} H{}" fill="none" stroke="black"/>"#,
        h - bottom,
        w - right
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (left + w - right) / 2.0,
        h - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        (top + h - bottom) / 2.0,
        (top + h - bottom) / 2.0,
        escape(y_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="{left}" y="{}" text-anchor="middle">{}</text>"#,
        h - bottom + 16.0,
        tick(x0)
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        w - right,
        h - bottom + 16.0,
        tick(x1)
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
        left - 6.0,
        h - bottom,
        tick(y0)
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
        left - 6.0,
        top + 4.0,
        tick(y1)
    );
    for (i, ser) in series.iter().enumerate() {
        let colour = COLOURS[i % COLOURS.len()];
        let path: Vec<String> = ser
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        if !path.is_empty() {
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="1.5"/>"#,
                path.join(" ")
            );
        }
        let ly = top + 14.0 * i as f64 + 8.0;
        let _ = writeln!(
            s,
            r#"<rect x="{}" y="{}" width="10" height="10" fill="{colour}"/>"#,
            w - right - 150.0,
            ly - 9.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{ly}">{}</text>"#,
            w - right - 135.0,
            escape(&ser.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    if v.abs() >= 1000.0 || v == v.trunc() {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
