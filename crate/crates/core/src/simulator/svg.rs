use std::fmt::Write as _;

use super::PowerTable;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 130.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

const SERIES: [(&str, &str); 4] = [
    ("Wald", "#1f77b4"),
    ("LM", "#2ca02c"),
    ("AR", "#7f7f7f"),
    ("Combined", "#d62728"),
];

/// Line chart of rejection rate against `β₀`, one polyline per test.
pub fn power_svg(table: &PowerTable, title: &str) -> String {
    let xs: Vec<f64> = table.rows.iter().map(|r| r.beta0).collect();
    let (mut x_lo, mut x_hi) = xs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    if !(x_hi > x_lo) {
        x_lo -= 0.5;
        x_hi += 0.5;
    }
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x_lo) / (x_hi - x_lo) * plot_w;
    let sy = |p: f64| TOP + (1.0 - p) * plot_h;

    let mut s = String::new();
    let w = &mut s;
    let _ = writeln!(
        w,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(w, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        w,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        LEFT + plot_w / 2.0,
        escape(title)
    );

    // Axes, ticks and the nominal level.
    let (x0, y0, x1, y1) = (LEFT, TOP + plot_h, LEFT + plot_w, TOP);
    let _ = writeln!(w, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(w, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    for k in 0..=5 {
        let p = k as f64 / 5.0;
        let y = sy(p);
        let _ = writeln!(w, r#"<line x1="{}" y1="{y:.2}" x2="{x0}" y2="{y:.2}" stroke="black"/>"#, x0 - 4.0);
        let _ = writeln!(
            w,
            r#"<text x="{}" y="{:.2}" text-anchor="end">{p:.1}</text>"#,
            x0 - 7.0,
            y + 4.0
        );
    }
    for &x in &xs {
        let px = sx(x);
        let _ = writeln!(w, r#"<line x1="{px:.2}" y1="{y0}" x2="{px:.2}" y2="{}" stroke="black"/>"#, y0 + 4.0);
        let _ = writeln!(
            w,
            r#"<text x="{px:.2}" y="{}" text-anchor="middle">{}</text>"#,
            y0 + 18.0,
            trim_number(x)
        );
    }
    let _ = writeln!(
        w,
        r#"<text x="{}" y="{}" text-anchor="middle">β₀</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 10.0
    );
    let _ = writeln!(
        w,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">rejection rate</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0
    );
    let ya = sy(table.alpha_level);
    let _ = writeln!(
        w,
        r##"<line x1="{x0}" y1="{ya:.2}" x2="{x1}" y2="{ya:.2}" stroke="#bbbbbb" stroke-dasharray="4 3"/>"##
    );

    for (k, (name, color)) in SERIES.iter().enumerate() {
        let points: Vec<String> = table
            .rows
            .iter()
            .filter(|r| r.rates()[k].is_finite())
            .map(|r| format!("{:.2},{:.2}", sx(r.beta0), sy(r.rates()[k])))
            .collect();
        let _ = writeln!(
            w,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            points.join(" ")
        );
        let ly = TOP + 10.0 + 20.0 * k as f64;
        let lx = WIDTH - RIGHT + 15.0;
        let _ = writeln!(
            w,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
            lx + 24.0
        );
        let _ = writeln!(w, r#"<text x="{}" y="{}">{name}</text>"#, lx + 30.0, ly + 4.0);
    }
    let _ = writeln!(w, "</svg>");
    s
}

fn trim_number(x: f64) -> String {
    let s = format!("{x:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.to_string() }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
