//! Rendering: metrics CSV, text tables and an accuracy-per-session SVG.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::metrics::{pct, RunReport, SessionMetrics};
use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "session_index,overall,base,novel";

pub fn metrics_csv(sessions: &[SessionMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for s in sessions {
        let novel = s.novel_acc.map(pct).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{}",
            s.session_index,
            pct(s.overall_acc),
            pct(s.base_acc),
            novel
        );
    }
    out
}

/// One parsed `metrics.csv` row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub session_index: usize,
    pub overall: f64,
    pub base: f64,
    pub novel: Option<f64>,
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::parse(path, e))?;
    let header = reader
        .headers()
        .map_err(|e| Error::parse(path, e))?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    if header != METRICS_HEADER {
        return Err(Error::parse(
            path,
            format!("expected header '{METRICS_HEADER}', found '{header}'"),
        ));
    }
    reader
        .records()
        .enumerate()
        .map(|(i, record)| {
            let record = record.map_err(|e| Error::parse(path, e))?;
            let bad = |what: &str| Error::parse(path, format!("row {}: {what}", i + 1));
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(&format!("'{s}' is not a number")));
            Ok(MetricsRow {
                session_index: record[0].parse().map_err(|_| bad("bad session index"))?,
                overall: num(&record[1])?,
                base: num(&record[2])?,
                novel: if record[3].is_empty() { None } else { Some(num(&record[3])?) },
            })
        })
        .collect()
}

/// Plain-text summary table with two-decimal percentages.
pub fn render_table(report: &RunReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:>7} {:>8} {:>8} {:>8}", "session", "overall", "base", "novel");
    for s in &report.sessions {
        let novel = s.novel_acc.map(pct).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            out,
            "{:>7} {:>8} {:>8} {:>8}",
            s.session_index,
            pct(s.overall_acc),
            pct(s.base_acc),
            novel
        );
    }
    let _ = writeln!(out, "PD {}  average {}", pct(report.pd), pct(report.average_acc));
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

type Series = fn(&SessionMetrics) -> Option<f64>;

/// Line chart of overall/base/novel accuracy per session.
pub fn accuracy_svg(title: &str, sessions: &[SessionMetrics]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const L: f64 = 60.0;
    const R: f64 = 130.0;
    const T: f64 = 40.0;
    const B: f64 = 50.0;
    let n = sessions.len().max(1);
    let x = |i: usize| {
        if n == 1 {
            L + (W - L - R) / 2.0
        } else {
            L + (W - L - R) * i as f64 / (n - 1) as f64
        }
    };
    let y = |v: f64| T + (H - T - B) * (1.0 - v.clamp(0.0, 100.0) / 100.0);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        (W - R + L) / 2.0,
        escape(title)
    );
    for tick in (0..=100).step_by(20) {
        let ty = y(tick as f64);
        let _ = writeln!(
            svg,
            r##"<line x1="{L}" y1="{ty:.1}" x2="{:.1}" y2="{ty:.1}" stroke="#ddd"/>"##,
            W - R
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{tick}</text>"#,
            L - 6.0,
            ty + 4.0
        );
    }
    for (i, s) in sessions.iter().enumerate() {
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            x(i),
            H - B + 18.0,
            s.session_index
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">session</text>"#,
        (W - R + L) / 2.0,
        H - 12.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{:.1}" transform="rotate(-90 16 {:.1})" text-anchor="middle">accuracy (%)</text>"#,
        H / 2.0,
        H / 2.0
    );

    let series: [(&str, &str, Series); 3] = [
        ("overall", "#1f77b4", |s| Some(s.overall_acc)),
        ("base", "#2ca02c", |s| Some(s.base_acc)),
        ("novel", "#d62728", |s| s.novel_acc),
    ];
    for (k, (name, color, get)) in series.iter().enumerate() {
        let pts: Vec<(f64, f64)> = sessions
            .iter()
            .enumerate()
            .filter_map(|(i, s)| get(s).map(|v| (x(i), y(v))))
            .collect();
        if pts.is_empty() {
            continue;
        }
        let path: Vec<String> = pts.iter().map(|(px, py)| format!("{px:.1},{py:.1}")).collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            path.join(" ")
        );
        for (px, py) in &pts {
            let _ = writeln!(svg, r#"<circle cx="{px:.1}" cy="{py:.1}" r="3" fill="{color}"/>"#);
        }
        let ly = T + 10.0 + 20.0 * k as f64;
        let _ = writeln!(
            svg,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/>"#,
            W - R + 15.0,
            W - R + 35.0
        );
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}">{name}</text>"#, W - R + 40.0, ly + 4.0);
    }
    svg.push_str("</svg>\n");
    svg
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
