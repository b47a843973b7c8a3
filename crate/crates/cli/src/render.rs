//! Human-readable tables and standalone SVG/CSV plots of reports.

use std::fmt::Write as _;

use berezin_core::hypgeom::HPoint;
use berezin_core::modforms::{delta_qexp, eval_form, ModError};

use crate::report::{Ladder, Report};

const COLUMNS: [(&str, usize); 6] =
    [("criterion", 9), ("check", 36), ("value", 12), ("rel", 3), ("tolerance", 12), ("status", 6)];

fn row(cells: [&str; 6]) -> String {
    let mut line = String::new();
    for (i, (cell, (_, width))) in cells.iter().zip(COLUMNS).enumerate() {
        if i > 0 {
            line.push_str(" | ");
        }
        let _ = write!(line, "{cell:<width$}");
    }
    line.trim_end().to_string()
}

fn num(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e6 {
        format!("{v:.0}")
    } else {
        format!("{v:.3e}")
    }
}

/// The check table, followed by ladder and criterion summaries when present.
/// A report without checks renders as the header alone.
pub fn table(report: &Report) -> String {
    let mut out = String::new();
    out.push_str(&row(COLUMNS.map(|c| c.0)));
    out.push('\n');
    let rule: Vec<String> = COLUMNS.iter().map(|(_, w)| "-".repeat(*w)).collect();
    out.push_str(&rule.join("-+-"));
    out.push('\n');
    for c in &report.checks {
        let status = if c.passed { "PASS" } else { "FAIL" };
        let id = c.criterion.to_string();
        out.push_str(&row([&id, &c.name, &num(c.value), c.relation.symbol(), &num(c.tolerance), status]));
        out.push('\n');
    }
    if !report.ladders.is_empty() {
        out.push_str("\nladders\n");
        for l in &report.ladders {
            let pts: Vec<String> = l.points.iter().map(|(x, y)| format!("{}={}: {y:.3e}", l.parameter, num(*x))).collect();
            let _ = writeln!(out, "  {} [{}] {}", l.name, l.monotonicity(), pts.join(", "));
        }
    }
    if !report.criteria.is_empty() {
        out.push_str("\ncriteria\n");
        for c in &report.criteria {
            let _ = writeln!(out, "  [{}] {:>2} {}", if c.passed { "PASS" } else { "FAIL" }, c.id, c.title);
        }
        let _ = writeln!(out, "\noverall: {}", if report.passed { "PASS" } else { "FAIL" });
    }
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn svg_open(out: &mut String, w: f64, h: f64, title: &str, config_hash: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" data-config-hash="{config_hash}">"#
    );
    let _ = writeln!(out, "<metadata>config_hash={config_hash}</metadata>");
    let _ = writeln!(out, "<title>{}</title>", escape(title));
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
}

/// Residual ladder on a log scale.
pub fn ladder_svg(ladder: &Ladder, config_hash: &str) -> String {
    let (w, h, pad) = (480.0, 320.0, 56.0);
    let pts: Vec<(f64, f64)> = ladder.points.iter().copied().filter(|p| p.1 > 0.0 && p.1.is_finite()).collect();
    let mut out = String::new();
    let title = format!("{} vs {} ({})", ladder.name, ladder.parameter, ladder.monotonicity());
    svg_open(&mut out, w, h, &title, config_hash);
    let _ = writeln!(out, r#"<text x="{}" y="20" font-size="13" text-anchor="middle">{}</text>"#, w / 2.0, escape(&title));
    let _ = writeln!(
        out,
        r#"<path d="M{pad} {pad} V{} H{}" stroke="black" fill="none"/>"#,
        h - pad,
        w - pad / 2.0
    );
    if !pts.is_empty() {
        let (x0, x1) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
        let (l0, l1) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| {
            (a.min(p.1.log10()), b.max(p.1.log10()))
        });
        let (l0, l1) = if l1 - l0 < 1e-9 { (l0 - 0.5, l1 + 0.5) } else { (l0, l1) };
        let sx = |x: f64| if x1 > x0 { pad + (x - x0) / (x1 - x0) * (w - 1.5 * pad) } else { w / 2.0 };
        let sy = |y: f64| h - pad - (y.log10() - l0) / (l1 - l0) * (h - 2.0 * pad);
        let path: Vec<String> = pts.iter().map(|p| format!("{:.2},{:.2}", sx(p.0), sy(p.1))).collect();
        let _ = writeln!(out, r#"<polyline points="{}" stroke="steelblue" fill="none" stroke-width="2"/>"#, path.join(" "));
        for p in &pts {
            let (px, py) = (sx(p.0), sy(p.1));
            let _ = writeln!(out, r#"<circle cx="{px:.2}" cy="{py:.2}" r="3" fill="steelblue"/>"#);
            let _ = writeln!(out, r#"<text x="{px:.2}" y="{:.2}" font-size="10" text-anchor="middle">{:.2e}</text>"#, py - 8.0, p.1);
            let _ = writeln!(out, r#"<text x="{px:.2}" y="{:.2}" font-size="10" text-anchor="middle">{}</text>"#, h - pad + 14.0, num(p.0));
        }
    }
    let _ = writeln!(out, r#"<text x="{}" y="{}" font-size="11" text-anchor="middle">{}</text>"#, w / 2.0, h - 12.0, escape(&ladder.parameter));
    out.push_str("</svg>\n");
    out
}

/// The ladder as CSV, with the config hash in a leading comment line.
pub fn ladder_csv(ladder: &Ladder, config_hash: &str) -> String {
    let mut out = format!("# {} config_hash={config_hash}\n{},residual\n", ladder.name, ladder.parameter);
    for (x, y) in &ladder.points {
        let _ = writeln!(out, "{x},{y:e}");
    }
    out
}

/// Samples of a scalar field on a rectangle; `None` marks points outside F.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    /// values[j][i] at (xs[i], ys[j]).
    pub values: Vec<Vec<Option<f64>>>,
}

/// |Δ(z)|² y¹² on an n×n grid of [−1/2, 1/2] × [√3/2, y_max], masked to F.
pub fn delta_field(depth: usize, n: usize, y_max: f64) -> Result<Field, ModError> {
    let delta = delta_qexp(depth);
    let n = n.max(2);
    let y0 = 3f64.sqrt() / 2.0;
    let xs: Vec<f64> = (0..n).map(|i| -0.5 + i as f64 / (n - 1) as f64).collect();
    let ys: Vec<f64> = (0..n).map(|j| y0 + (y_max - y0) * j as f64 / (n - 1) as f64).collect();
    let mut values = Vec::with_capacity(n);
    for &y in &ys {
        let mut line = Vec::with_capacity(n);
        for &x in &xs {
            line.push(if x * x + y * y >= 1.0 - 1e-12 {
                let v = eval_form::<f64>(&delta, &HPoint { x, y })?.value;
                Some(v.norm_sqr() * y.powi(12))
            } else {
                None
            });
        }
        values.push(line);
    }
    Ok(Field { xs, ys, values })
}

/// Heat map of a field, brighter for larger values, y increasing upward.
pub fn heatmap_svg(field: &Field, title: &str, config_hash: &str) -> String {
    let cell = 6.0;
    let (nx, ny) = (field.xs.len(), field.ys.len());
    let (w, h) = (nx as f64 * cell + 40.0, ny as f64 * cell + 60.0);
    let max = field.values.iter().flatten().flatten().fold(0.0f64, |a, &b| a.max(b));
    let mut out = String::new();
    svg_open(&mut out, w, h, title, config_hash);
    let _ = writeln!(out, r#"<text x="{}" y="20" font-size="13" text-anchor="middle">{}</text>"#, w / 2.0, escape(title));
    for (j, line) in field.values.iter().enumerate() {
        for (i, v) in line.iter().enumerate() {
            let Some(v) = v else { continue };
            let t = if max > 0.0 { v / max } else { 0.0 };
            let (r, g, b) = ((255.0 * t) as u8, (200.0 * t * t) as u8, (120.0 * (1.0 - t)) as u8);
            let (x, y) = (20.0 + i as f64 * cell, 40.0 + (ny - 1 - j) as f64 * cell);
            let _ = writeln!(out, r#"<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="rgb({r},{g},{b})"/>"#);
        }
    }
    let _ = writeln!(out, r#"<text x="{}" y="{}" font-size="10" text-anchor="middle">max {max:.4e}</text>"#, w / 2.0, h - 6.0);
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;
    use crate::report::{Check, Trend, Volatile, SCHEMA};

    fn report(checks: Vec<Check>, ladders: Vec<Ladder>) -> Report {
        Report {
            schema: SCHEMA.into(),
            library_version: "0".into(),
            command: "trace".into(),
            config: ExperimentConfig::default(),
            config_hash: "abc".into(),
            cache_keys: vec![],
            criteria: vec![],
            checks,
            ladders,
            passed: true,
            volatile: Volatile::default(),
        }
    }

    #[test]
    fn empty_report_renders_the_header_only() {
        let t = table(&report(vec![], vec![]));
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("criterion | check"));
    }

    #[test]
    fn columns_are_stable() {
        let t = table(&report(vec![Check::at_most(5, "trace.tau_identity", 3e-9, 1e-6)], vec![]));
        let lines: Vec<&str> = t.lines().collect();
        let bars = |s: &str| s.match_indices(" | ").map(|(i, _)| i).collect::<Vec<_>>();
        assert_eq!(bars(lines[0]), bars(lines[2]));
        assert!(lines[2].ends_with("PASS"));
    }

    #[test]
    fn three_point_ladder_is_annotated() {
        let mut l = Ladder::new(7, "cusp.intertwining_S", "N", Trend::Decreasing);
        for (n, r) in [(40.0, 1e-3), (60.0, 1e-5), (80.0, 1e-8)] {
            l.push(n, r);
        }
        let t = table(&report(vec![], vec![l.clone()]));
        assert!(t.contains("cusp.intertwining_S [decreasing] N=40: 1.000e-3"));
        let svg = ladder_svg(&l, "abc");
        assert!(svg.contains("(decreasing)") && svg.contains("config_hash=abc"));
        assert_eq!(ladder_csv(&l, "abc").lines().count(), 5);
    }

    #[test]
    fn delta_heat_map_is_masked_to_the_domain() {
        let f = delta_field(60, 12, 2.0).unwrap();
        assert!(f.values[0].iter().any(Option::is_none));
        assert!(f.values[11].iter().all(Option::is_some));
        let svg = heatmap_svg(&f, "|Δ|² y¹²", "abc");
        assert!(svg.matches("<rect").count() > 100);
    }
}
