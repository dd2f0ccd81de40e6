//! Static SVG charts.

use std::fmt::Write;

use incdet::eval::GroupLabels;

use crate::report::Aggregate;

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;
const PALETTE: [&str; 5] = ["#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f"];

fn frame(title: &str, body: &str, legend: &[(String, &str)]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{title}</text>"#, W / 2.0);
    // y axis 0..100
    let (x0, y0, y1) = (PAD, H - PAD, PAD);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{}" y2="{y0}" stroke="black"/>"#, W - PAD);
    for k in 0..=4 {
        let v = 25.0 * k as f64;
        let y = y0 - (y0 - y1) * v / 100.0;
        let _ = writeln!(s, r##"<line x1="{x0}" y1="{y}" x2="{}" y2="{y}" stroke="#ddd"/>"##, W - PAD);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v}</text>"#, x0 - 4.0, y + 4.0);
    }
    s.push_str(body);
    for (i, (name, colour)) in legend.iter().enumerate() {
        let y = PAD + 14.0 * i as f64;
        let x = W - PAD - 90.0;
        let _ = writeln!(s, r#"<rect x="{x}" y="{}" width="10" height="10" fill="{colour}"/>"#, y - 9.0);
        let _ = writeln!(s, r#"<text x="{}" y="{y}">{name}</text>"#, x + 14.0);
    }
    s.push_str("</svg>\n");
    s
}

fn y_of(v: f64) -> f64 {
    (H - PAD) - (H - 2.0 * PAD) * v.clamp(0.0, 1.0)
}

/// Grouped bars: one group per class group, one bar per method.
pub fn group_bars(agg: &Aggregate, labels: &GroupLabels) -> String {
    let mut groups: Vec<(String, Box<dyn Fn(&crate::report::AggregateRow) -> Option<f64>>)> =
        vec![(labels.base.clone(), Box::new(|r| r.base))];
    if let Some(l) = &labels.intermediate {
        groups.push((l.clone(), Box::new(|r| r.intermediate)));
    }
    if let Some(l) = &labels.new {
        groups.push((l.clone(), Box::new(|r| r.new)));
    }
    groups.push((labels.all.clone(), Box::new(|r| r.all)));
    let span = (W - 2.0 * PAD - 100.0) / groups.len() as f64;
    let bar = span * 0.8 / agg.rows.len().max(1) as f64;
    let mut body = String::new();
    for (g, (label, get)) in groups.iter().enumerate() {
        let gx = PAD + span * g as f64 + span * 0.1;
        for (i, row) in agg.rows.iter().enumerate() {
            if let Some(v) = get(row) {
                let x = gx + bar * i as f64;
                let y = y_of(v);
                let _ = writeln!(
                    body,
                    r#"<rect x="{x:.1}" y="{y:.1}" width="{:.1}" height="{:.1}" fill="{}"/>"#,
                    bar * 0.9,
                    H - PAD - y,
                    PALETTE[i % PALETTE.len()]
                );
            }
        }
        let _ = writeln!(body, r#"<text x="{:.1}" y="{}" text-anchor="middle">{label}</text>"#, gx + span * 0.4, H - PAD + 16.0);
    }
    let legend: Vec<(String, &str)> = agg
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| (r.method.label().to_string(), PALETTE[i % PALETTE.len()]))
        .collect();
    frame(&format!("{} {} by class group", agg.scenario, agg.metric), &body, &legend)
}

/// Headline metric after each step, one line per incremental method.
pub fn forgetting_curves(agg: &Aggregate) -> String {
    let steps = agg.rows.iter().map(|r| r.per_step.len()).max().unwrap_or(1).max(2);
    let dx = (W - 2.0 * PAD - 100.0) / (steps - 1) as f64;
    let mut body = String::new();
    for t in 0..steps {
        let _ = writeln!(body, r#"<text x="{:.1}" y="{}" text-anchor="middle">step {t}</text>"#, PAD + dx * t as f64, H - PAD + 16.0);
    }
    let mut legend = Vec::new();
    for (i, row) in agg.rows.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        legend.push((row.method.label().to_string(), colour));
        // Joint training has a single point at the last step.
        let offset = steps - row.per_step.len();
        let pts: Vec<String> = row
            .per_step
            .iter()
            .enumerate()
            .map(|(t, &v)| format!("{:.1},{:.1}", PAD + dx * (t + offset) as f64, y_of(v)))
            .collect();
        if pts.len() > 1 {
            let _ = writeln!(body, r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="2"/>"#, pts.join(" "));
        }
        for p in &pts {
            let (x, y) = p.split_once(',').expect("point");
            let _ = writeln!(body, r#"<circle cx="{x}" cy="{y}" r="3" fill="{colour}"/>"#);
        }
    }
    frame(&format!("{} {} after each step", agg.scenario, agg.metric), &body, &legend)
}
