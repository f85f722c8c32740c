//! Minimal SVG line chart of per-epoch objective losses.

use std::collections::BTreeMap;
use std::fmt::Write;

use jobgraph::train::EpochStats;

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

pub fn loss_svg(history: &[EpochStats]) -> String {
    let mut series: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for (i, s) in history.iter().enumerate() {
        for (k, o) in &s.objectives {
            if o.instances > 0 && o.mean_loss.is_finite() {
                series.entry(k.as_str()).or_default().push((i as f64, o.mean_loss));
            }
        }
    }
    let pts = series.values().flatten();
    let x_max = pts.clone().map(|p| p.0).fold(1.0, f64::max);
    let y_max = pts.clone().map(|p| p.1).fold(f64::MIN, f64::max).max(1e-9);
    let y_min = pts.map(|p| p.1).fold(y_max, f64::min).min(0.0);
    let sx = |x: f64| PAD + x / x_max * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y_min) / (y_max - y_min).max(1e-9) * (H - 2.0 * PAD);

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<path d="M{PAD} {PAD} V{} H{}" fill="none" stroke="black"/>"#,
        H - PAD,
        W - PAD
    );
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">epoch</text>"#, W / 2.0, H - 12.0);
    let _ = writeln!(out, r#"<text x="8" y="{}">{y_max:.2}</text>"#, PAD + 4.0);
    let _ = writeln!(out, r#"<text x="8" y="{}">{y_min:.2}</text>"#, H - PAD);
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let d: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            d.join(" ")
        );
        let y = PAD + 14.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{y}" fill="{color}">{name}</text>"#,
            W - PAD - 70.0
        );
    }
    out.push_str("</svg>\n");
    out
}
