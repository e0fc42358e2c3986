//! Static SVG rendering of an anomaly report: the normalized signal with
//! its threshold on top and a green/red strip of final flags underneath.

use std::fmt::Write;

use crate::amjpf::AnomalyReport;

const WIDTH: f64 = 900.0;
const PAD: f64 = 40.0;
const SIGNAL_HEIGHT: f64 = 220.0;
const STRIP_HEIGHT: f64 = 24.0;
const GAP: f64 = 16.0;

pub fn report_svg(report: &AnomalyReport, title: &str) -> String {
    let n = report.len();
    let height = 2.0 * PAD + SIGNAL_HEIGHT + GAP + STRIP_HEIGHT;
    let inner = WIDTH - 2.0 * PAD;
    let peak = report.y.iter().copied().fold(report.threshold, f64::max);
    let scale = if peak > 0.0 { 1.0 / peak } else { 1.0 };
    let x_at = |i: f64| PAD + inner * if n > 1 { i / (n - 1) as f64 } else { 0.5 };
    let y_at = |v: f64| PAD + SIGNAL_HEIGHT * (1.0 - v * scale);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}">"##
    );
    let _ = writeln!(s, r##"<rect width="100%" height="100%" fill="white"/>"##);
    let _ = writeln!(
        s,
        r##"<text x="{PAD}" y="{:.1}" font-family="sans-serif" font-size="14">{}</text>"##,
        PAD - 14.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r##"<rect x="{PAD}" y="{PAD}" width="{inner}" height="{SIGNAL_HEIGHT}" fill="none" stroke="#999"/>"##
    );

    let mut points = String::new();
    for (i, &v) in report.y.iter().enumerate() {
        if i > 0 {
            points.push(' ');
        }
        let _ = write!(points, "{:.2},{:.2}", x_at(i as f64), y_at(v));
    }
    let _ = writeln!(
        s,
        r##"<polyline class="signal" fill="none" stroke="#1f4e9c" stroke-width="1.2" points="{points}"/>"##
    );
    let ty = y_at(report.threshold);
    let _ = writeln!(
        s,
        r##"<line class="threshold" x1="{PAD}" y1="{ty:.2}" x2="{:.2}" y2="{ty:.2}" stroke="#c00" stroke-dasharray="6 4"/>"##,
        WIDTH - PAD
    );

    let strip_y = PAD + SIGNAL_HEIGHT + GAP;
    let cell = if n > 0 { inner / n as f64 } else { inner };
    let _ = writeln!(s, r##"<g class="flags">"##);
    for (i, &f) in report.flags.iter().enumerate() {
        let color = if f { "#d62728" } else { "#2ca02c" };
        let _ = writeln!(
            s,
            r##"<rect x="{:.2}" y="{strip_y:.2}" width="{:.2}" height="{STRIP_HEIGHT}" fill="{color}"/>"##,
            PAD + cell * i as f64,
            cell
        );
    }
    let _ = writeln!(s, "</g>");
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}
