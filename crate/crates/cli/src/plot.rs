//! Error-vs-D plot of a convergence report as a standalone SVG.

use std::fmt::Write;

use sparse_chaos::experiments::ConvergenceReport;

use crate::CliError;

const W: f64 = 640.0;
const H: f64 = 420.0;
const MARGIN: f64 = 60.0;

/// `|error|` against `D` on log-log axes with 2-SE whiskers. Identical
/// reports give identical bytes.
pub fn render(report: &ConvergenceReport) -> Result<String, CliError> {
    if report.rows.is_empty() {
        return Err(CliError::Validation("cannot plot an empty ladder".into()));
    }
    let pts: Vec<(f64, f64, f64, f64)> = report
        .rows
        .iter()
        .map(|r| {
            let e = r.error.mean.abs();
            let se = 2.0 * r.error.std_error;
            (r.d as f64, e, (e - se).max(0.0), e + se)
        })
        .collect();
    let floor = pts
        .iter()
        .flat_map(|p| [p.1, p.2, p.3])
        .filter(|&v| v > 0.0)
        .fold(f64::INFINITY, f64::min);
    let floor = if floor.is_finite() { floor / 2.0 } else { 1e-6 };
    let ly = |v: f64| v.max(floor).log10();
    let (x0, x1) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| {
        (a.min(p.0.log10()), b.max(p.0.log10()))
    });
    let (y0, y1) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| {
        (a.min(ly(p.2)), b.max(ly(p.3)))
    });
    let (x0, x1) = widen(x0, x1);
    let (y0, y1) = widen(y0, y1);
    let sx = |x: f64| MARGIN + (x.log10() - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
    let sy = |v: f64| H - MARGIN - (ly(v) - y0) / (y1 - y0) * (H - 2.0 * MARGIN);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{m} {t} L{m} {b} L{r} {b}" stroke="black" fill="none"/>"#,
        m = MARGIN,
        t = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" font-size="13" text-anchor="middle">D (log scale)</text>"#,
        W / 2.0,
        H - 15.0
    );
    let _ = writeln!(
        s,
        r#"<text x="15" y="{:.1}" font-size="13" text-anchor="middle" transform="rotate(-90 15 {:.1})">|error| (log scale)</text>"#,
        H / 2.0,
        H / 2.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="30" font-size="14" text-anchor="middle">{}</text>"#,
        W / 2.0,
        escape(&report.name)
    );
    let line: Vec<String> = pts.iter().map(|p| format!("{:.2},{:.2}", sx(p.0), sy(p.1))).collect();
    let _ = writeln!(s, r#"<polyline points="{}" stroke="steelblue" fill="none"/>"#, line.join(" "));
    for p in &pts {
        let x = sx(p.0);
        let _ = writeln!(
            s,
            r#"<g class="whisker"><line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="black"/><line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black"/><line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black"/><circle cx="{x:.2}" cy="{:.2}" r="3" fill="steelblue"/></g>"#,
            sy(p.2),
            sy(p.3),
            x - 4.0,
            sy(p.2),
            x + 4.0,
            sy(p.2),
            x - 4.0,
            sy(p.3),
            x + 4.0,
            sy(p.3),
            sy(p.1)
        );
        let _ = writeln!(
            s,
            r#"<text x="{x:.2}" y="{:.1}" font-size="11" text-anchor="middle">{}</text>"#,
            H - MARGIN + 16.0,
            p.0
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn widen(a: f64, b: f64) -> (f64, f64) {
    if b - a < 1e-9 {
        (a - 0.5, b + 0.5)
    } else {
        let pad = 0.05 * (b - a);
        (a - pad, b + pad)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
