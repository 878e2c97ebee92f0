//! Minimal SVG line chart of ᾱ against t, one polyline per position.

use std::fmt::Write;

use seqdiff::schedule::NoiseSchedule;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const MARGIN: f64 = 60.0;
const COLORS: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

pub fn schedule_chart(schedule: &NoiseSchedule, positions: &[usize]) -> String {
    let steps = schedule.steps() as f64;
    let x = |t: f64| MARGIN + t / steps * (WIDTH - 2.0 * MARGIN);
    let y = |a: f64| HEIGHT - MARGIN - a * (HEIGHT - 2.0 * MARGIN);
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let (x0, x1, y0, y1) = (x(0.0), x(steps), y(0.0), y(1.0));
    let _ = writeln!(out, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(out, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    for k in 0..=4 {
        let frac = k as f64 / 4.0;
        let (tx, ty) = (x(frac * steps), y(frac));
        let _ = writeln!(out, r#"<text x="{tx}" y="{}" text-anchor="middle">{}</text>"#, y0 + 16.0, (frac * steps).round());
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="end">{frac:.2}</text>"#, x0 - 6.0, ty + 4.0);
    }
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">diffusion step t</text>"#, WIDTH / 2.0, HEIGHT - 16.0);
    let _ = writeln!(
        out,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">alpha_bar</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0
    );
    for (k, &i) in positions.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let points: Vec<String> = (0..=schedule.steps())
            .map(|t| format!("{:.2},{:.2}", x(t as f64), y(schedule.alpha_bar(t, i))))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"><title>position {i}</title></polyline>"#,
            points.join(" ")
        );
        let ly = MARGIN + 14.0 * k as f64;
        let _ = writeln!(out, r#"<text x="{}" y="{ly}" fill="{color}">i = {i}</text>"#, WIDTH - MARGIN - 40.0);
    }
    out.push_str("</svg>\n");
    out
}
