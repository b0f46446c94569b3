//! Curve tables (per-seed rows plus seed aggregates) and their SVG plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

/// Test error and named metrics of one trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub mode: String,
    pub n: usize,
    pub seed: usize,
    pub test_error: f64,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveKind {
    /// On-manifold success rate against test error.
    OnManifold,
    /// Regular success rate against test error.
    Regular,
    /// Test error against training-set size, one series per mode.
    Boost,
}

impl CurveKind {
    pub fn file_stem(&self) -> &'static str {
        match self {
            CurveKind::OnManifold => "curve_on_manifold",
            CurveKind::Regular => "curve_regular",
            CurveKind::Boost => "curve_boost",
        }
    }
}

/// One CSV row; `seed == None` marks the aggregate over seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveRow {
    pub mode: String,
    pub n: usize,
    pub seed: Option<usize>,
    pub test_error: f64,
    pub metric_name: String,
    pub metric_value: f64,
    /// Sample standard deviations, aggregate rows with two or more seeds only.
    pub test_error_std: Option<f64>,
    pub metric_std: Option<f64>,
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation (denominator `n - 1`).
pub fn sample_std(v: &[f64]) -> Option<f64> {
    if v.len() < 2 {
        return None;
    }
    let m = mean(v);
    Some((v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt())
}

/// Per-seed rows followed by one aggregate row for every `(mode, N)`, modes in
/// order of first appearance and `N` ascending. Cells lacking `metric` are
/// skipped; `metric == "test_error"` uses the test error itself.
pub fn curve_rows(cells: &[CellMetrics], metric: &str) -> Vec<CurveRow> {
    let value = |c: &CellMetrics| if metric == "test_error" { Some(c.test_error) } else { c.metrics.get(metric).copied() };
    let mut modes: Vec<&str> = Vec::new();
    for c in cells {
        if !modes.contains(&c.mode.as_str()) {
            modes.push(&c.mode);
        }
    }
    let mut rows = Vec::new();
    for mode in modes {
        let mut by_n: BTreeMap<usize, Vec<&CellMetrics>> = BTreeMap::new();
        for c in cells.iter().filter(|c| c.mode == mode && value(c).is_some()) {
            by_n.entry(c.n).or_default().push(c);
        }
        for (n, mut group) in by_n {
            group.sort_by_key(|c| c.seed);
            for c in &group {
                rows.push(CurveRow {
                    mode: mode.to_string(),
                    n,
                    seed: Some(c.seed),
                    test_error: c.test_error,
                    metric_name: metric.to_string(),
                    metric_value: value(c).expect("filtered"),
                    test_error_std: None,
                    metric_std: None,
                });
            }
            let errs: Vec<f64> = group.iter().map(|c| c.test_error).collect();
            let vals: Vec<f64> = group.iter().map(|c| value(c).expect("filtered")).collect();
            rows.push(CurveRow {
                mode: mode.to_string(),
                n,
                seed: None,
                test_error: mean(&errs),
                metric_name: metric.to_string(),
                metric_value: mean(&vals),
                test_error_std: sample_std(&errs),
                metric_std: sample_std(&vals),
            });
        }
    }
    rows
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn write_curve_csv(rows: &[CurveRow], w: &mut impl Write) -> Result<()> {
    writeln!(w, "mode,N,seed,test_error,metric_name,metric_value,test_error_std,metric_std")?;
    for r in rows {
        let seed = r.seed.map(|s| s.to_string()).unwrap_or_else(|| "mean".to_string());
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.mode,
            r.n,
            seed,
            r.test_error,
            r.metric_name,
            r.metric_value,
            opt(r.test_error_std),
            opt(r.metric_std)
        )?;
    }
    Ok(())
}

const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Line plot of the aggregate rows: one series per mode, a vertical band of
/// one standard deviation around every mean. The x axis is the test error,
/// or `N` (log scale) for [`CurveKind::Boost`].
pub fn curve_svg(rows: &[CurveRow], kind: CurveKind, title: &str) -> String {
    let (w, h, left, right, top, bottom) = (640.0, 420.0, 60.0, 150.0, 40.0, 50.0);
    let agg: Vec<&CurveRow> = rows.iter().filter(|r| r.seed.is_none()).collect();
    let xval = |r: &CurveRow| if kind == CurveKind::Boost { (r.n as f64).ln() } else { r.test_error };
    let (mut x0, mut x1) = agg.iter().map(|r| xval(r)).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !x0.is_finite() {
        (x0, x1) = (0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        (x0, x1) = (x0 - 0.5, x1 + 0.5);
    }
    let (y0, y1) = (0.0, 1.0);
    let px = |x: f64| left + (x - x0) / (x1 - x0) * (w - left - right);
    let py = |y: f64| h - bottom - (y - y0) / (y1 - y0) * (h - top - bottom);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" font-family="sans-serif" font-size="15" text-anchor="middle">{}</text>"#, (w - right + left) / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<path d="M{l} {t} L{l} {b} L{r} {b}" stroke="black" fill="none"/>"#,
        l = left,
        t = top,
        b = h - bottom,
        r = w - right
    );
    for i in 0..=5 {
        let fy = i as f64 / 5.0;
        let y = py(y0 + fy * (y1 - y0));
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="end">{:.1}</text>"#, left - 6.0, y + 4.0, y0 + fy * (y1 - y0));
        let xv = x0 + fy * (x1 - x0);
        let label = if kind == CurveKind::Boost { format!("{:.0}", xv.exp()) } else { format!("{xv:.2}") };
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">{label}</text>"#, px(xv), h - bottom + 16.0);
    }
    let xlabel = if kind == CurveKind::Boost { "training examples N" } else { "test error" };
    let ylabel = agg.first().map(|r| r.metric_name.as_str()).unwrap_or("value");
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">{xlabel}</text>"#, (w - right + left) / 2.0, h - 12.0);
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        (h - bottom + top) / 2.0,
        (h - bottom + top) / 2.0,
        escape(ylabel)
    );
    let mut modes: Vec<&str> = Vec::new();
    for r in &agg {
        if !modes.contains(&r.mode.as_str()) {
            modes.push(&r.mode);
        }
    }
    for (i, mode) in modes.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let mut pts: Vec<&&CurveRow> = agg.iter().filter(|r| r.mode == *mode).collect();
        pts.sort_by(|a, b| xval(a).total_cmp(&xval(b)));
        for r in &pts {
            if let Some(sd) = r.metric_std {
                let (ya, yb) = (py((r.metric_value - sd).max(y0)), py((r.metric_value + sd).min(y1)));
                let _ = writeln!(s, r#"<rect x="{}" y="{yb}" width="6" height="{}" fill="{color}" fill-opacity="0.25"/>"#, px(xval(r)) - 3.0, (ya - yb).max(0.0));
            }
        }
        let path: Vec<String> = pts.iter().map(|r| format!("{:.2},{:.2}", px(xval(r)), py(r.metric_value))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" stroke="{color}" stroke-width="2" fill="none"/>"#, path.join(" "));
        for r in &pts {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, px(xval(r)), py(r.metric_value));
        }
        let ly = top + 16.0 * i as f64 + 10.0;
        let _ = writeln!(s, r#"<rect x="{}" y="{}" width="12" height="3" fill="{color}"/>"#, w - right + 12.0, ly - 4.0);
        let _ = writeln!(s, r#"<text x="{}" y="{ly}" font-family="sans-serif" font-size="11">{}</text>"#, w - right + 30.0, escape(mode));
    }
    s.push_str("</svg>\n");
    s
}

/// Write `<stem>.csv` (and `<stem>.svg`) for `kind` into `dir`.
pub fn emit_curves(cells: &[CellMetrics], metric: &str, kind: CurveKind, dir: &std::path::Path, svg: bool) -> Result<Vec<CurveRow>> {
    if cells.len() < 2 {
        bail!(InvalidArgument, "curves need at least two grid cells, got {}", cells.len());
    }
    let rows = curve_rows(cells, metric);
    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join(format!("{}.csv", kind.file_stem())))?);
    write_curve_csv(&rows, &mut f)?;
    f.flush()?;
    if svg {
        let title = match kind {
            CurveKind::OnManifold => "On-manifold success rate vs test error",
            CurveKind::Regular => "Regular success rate vs test error",
            CurveKind::Boost => "Test error vs training-set size",
        };
        std::fs::write(dir.join(format!("{}.svg", kind.file_stem())), curve_svg(&rows, kind, title))?;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(mode: &str, n: usize, seed: usize, err: f64, v: f64) -> CellMetrics {
        CellMetrics { mode: mode.into(), n, seed, test_error: err, metrics: BTreeMap::from([("m".to_string(), v)]) }
    }

    #[test]
    fn row_counts_and_aggregates() {
        let cells = vec![cell("a", 500, 0, 0.2, 0.5), cell("a", 250, 0, 0.4, 0.9), cell("a", 250, 1, 0.5, 0.7), cell("a", 500, 1, 0.1, 0.4)];
        let rows = curve_rows(&cells, "m");
        assert_eq!(rows.len(), 6);
        let agg: Vec<&CurveRow> = rows.iter().filter(|r| r.seed.is_none()).collect();
        assert_eq!(agg.len(), 2);
        assert_eq!(agg[0].n, 250);
        assert!((agg[0].metric_value - 0.8).abs() < 1e-15);
        assert!((agg[0].metric_std.unwrap() - 0.02f64.sqrt()).abs() < 1e-15);
        let boost = curve_rows(&cells, "test_error");
        assert_eq!(boost[2].metric_value, boost[2].test_error);
    }

    #[test]
    fn svg_is_well_formed() {
        let cells = vec![cell("a<&>", 250, 0, 0.4, 0.9), cell("a<&>", 500, 0, 0.2, 0.5), cell("b", 250, 0, 0.3, 0.2)];
        for kind in [CurveKind::OnManifold, CurveKind::Boost] {
            let svg = curve_svg(&curve_rows(&cells, "m"), kind, "t");
            roxmltree::Document::parse(&svg).unwrap();
        }
    }
}
