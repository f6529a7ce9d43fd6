//! Minimal SVG error-bar chart of depth error against pose noise.

use std::fmt::Write as _;

use gde_core::scene::SigmaSummary;

const WIDTH: f64 = 480.0;
const HEIGHT: f64 = 320.0;
const MARGIN: f64 = 48.0;

struct Series<'a> {
    label: &'a str,
    color: &'a str,
    points: Vec<(f64, f64, f64)>,
}

fn series(summary: &[SigmaSummary]) -> Vec<Series<'_>> {
    let mut out = vec![Series {
        label: "uncorrected",
        color: "#c0392b",
        points: summary.iter().map(|s| (s.sigma_deg, s.uncorrected_mae, s.uncorrected_sd)).collect(),
    }];
    let corrected: Vec<_> = summary
        .iter()
        .filter_map(|s| Some((s.sigma_deg, s.corrected_mae?, s.corrected_sd?)))
        .collect();
    if !corrected.is_empty() {
        out.push(Series { label: "pose corrected", color: "#2471a3", points: corrected });
    }
    out
}

/// Mean absolute error ± one standard deviation per σ, one line per series.
pub fn error_bar_svg(summary: &[SigmaSummary]) -> String {
    let all = series(summary);
    let xs: Vec<f64> = summary.iter().map(|s| s.sigma_deg).collect();
    let x_lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let x_hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let y_hi = all
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.1 + p.2))
        .fold(0.0, f64::max)
        .max(1e-9)
        * 1.1;
    let x_span = if x_hi > x_lo { x_hi - x_lo } else { 1.0 };
    let px = |x: f64| MARGIN + (x - x_lo) / x_span * (WIDTH - 2.0 * MARGIN);
    let py = |y: f64| HEIGHT - MARGIN - y.max(0.0) / y_hi * (HEIGHT - 2.0 * MARGIN);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let (x0, y0, x1, y1) = (MARGIN, HEIGHT - MARGIN, WIDTH - MARGIN, MARGIN);
    let _ = writeln!(s, r#"<path d="M{x0} {y1} L{x0} {y0} L{x1} {y0}" stroke="black" fill="none"/>"#);
    for &x in &xs {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{x}</text>"#, px(x), y0 + 16.0);
    }
    for i in 0..=4 {
        let y = y_hi * i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{y:.1}</text>"#, x0 - 6.0, py(y) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">pose noise σ (deg)</text>"#, WIDTH / 2.0, HEIGHT - 8.0);
    let _ = writeln!(
        s,
        r#"<text transform="translate(14 {:.1}) rotate(-90)" text-anchor="middle">mean abs depth error (m)</text>"#,
        HEIGHT / 2.0
    );
    for (k, ser) in all.iter().enumerate() {
        let path: Vec<String> = ser.points.iter().map(|&(x, y, _)| format!("{:.1},{:.1}", px(x), py(y))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" stroke="{}" fill="none"/>"#, path.join(" "), ser.color);
        for &(x, y, sd) in &ser.points {
            let (cx, lo, hi) = (px(x), py(y - sd), py(y + sd));
            let _ = writeln!(
                s,
                r#"<path d="M{cx:.1} {lo:.1} L{cx:.1} {hi:.1} M{:.1} {lo:.1} L{:.1} {lo:.1} M{:.1} {hi:.1} L{:.1} {hi:.1}" stroke="{}"/>"#,
                cx - 4.0,
                cx + 4.0,
                cx - 4.0,
                cx + 4.0,
                ser.color
            );
            let _ = writeln!(s, r#"<circle cx="{cx:.1}" cy="{:.1}" r="3" fill="{}"/>"#, py(y), ser.color);
        }
        let ly = y1 + 14.0 * k as f64;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{ly:.1}" fill="{}">{}</text>"#, x0 + 10.0, ser.color, ser.label);
    }
    s.push_str("</svg>\n");
    s
}
