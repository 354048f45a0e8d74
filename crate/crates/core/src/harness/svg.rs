//! Minimal line-plot SVG writer.

use std::fmt::Write;

const W: f64 = 480.0;
const H: f64 = 320.0;
const PAD: f64 = 56.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// One polyline through `points` with labelled axes and end ticks.
pub fn line_plot(title: &str, x_label: &str, y_label: &str, points: &[(f64, f64)]) -> String {
    let finite: Vec<(f64, f64)> = points.iter().copied().filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
    let span = |vals: &mut dyn Iterator<Item = f64>| {
        let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        if !lo.is_finite() {
            (0.0, 1.0)
        } else if hi - lo < 1e-12 {
            (lo - 0.5, hi + 0.5)
        } else {
            (lo, hi)
        }
    };
    let (x0, x1) = span(&mut finite.iter().map(|p| p.0));
    let (y0, y1) = span(&mut finite.iter().map(|p| p.1));
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
    let (left, right, top, bottom) = (PAD, W - PAD, PAD, H - PAD);
    let _ = writeln!(s, r#"<path d="M{left} {top} L{left} {bottom} L{right} {bottom}" stroke="black" fill="none"/>"#);
    for (v, x) in [(x0, left), (x1, right)] {
        let _ = writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle" font-size="11">{v:.3}</text>"#, bottom + 16.0);
    }
    for (v, y) in [(y0, bottom), (y1, top)] {
        let _ = writeln!(s, r#"<text x="{}" y="{y}" text-anchor="end" font-size="11">{v:.3}</text>"#, left - 6.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{}</text>"#, W / 2.0, H - 12.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 16 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
    let pts: Vec<String> = finite.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
    let _ = writeln!(s, r#"<polyline points="{}" stroke="steelblue" stroke-width="2" fill="none"/>"#, pts.join(" "));
    for &(x, y) in &finite {
        let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="steelblue"/>"#, sx(x), sy(y));
    }
    s.push_str("</svg>\n");
    s
}
