//! Flat SVG bar chart of a report: one group per condition, one bar per method.

use std::fmt::Write;

use charm_core::experiment::{axes, ExperimentReport};

const PALETTE: [&str; 6] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"];

pub fn bar_chart(report: &ExperimentReport) -> String {
    let (methods, conditions) = axes(report);
    let bar = 14.0;
    let gap = 18.0;
    let group = bar * methods.len() as f64 + gap;
    let (left, top, height) = (48.0, 24.0, 200.0);
    let width = left + group * conditions.len() as f64 + 160.0;
    let total = top + height + 40.0;

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{total}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<text x="{left}" y="14">{}</text>"#, escape(&report.id));
    for tick in 0..=4 {
        let v = tick as f64 / 4.0;
        let y = top + height * (1.0 - v);
        let _ = writeln!(s, r##"<line x1="{left}" y1="{y}" x2="{}" y2="{y}" stroke="#ddd"/>"##, width - 160.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v:.2}</text>"#, left - 4.0, y + 4.0);
    }
    for (c, cond) in conditions.iter().enumerate() {
        let x0 = left + gap / 2.0 + group * c as f64;
        for (m, method) in methods.iter().enumerate() {
            let Some(r) = report.rows.iter().find(|r| &r.method == method && &r.condition == cond) else { continue };
            let h = height * r.mean.clamp(0.0, 1.0);
            let x = x0 + bar * m as f64;
            let _ = writeln!(
                s,
                r#"<rect x="{x}" y="{}" width="{}" height="{h}" fill="{}"><title>{} {}: {:.3}</title></rect>"#,
                top + height - h,
                bar - 2.0,
                PALETTE[m % PALETTE.len()],
                escape(method),
                escape(cond),
                r.mean
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            x0 + bar * methods.len() as f64 / 2.0,
            top + height + 16.0,
            escape(cond)
        );
    }
    for (m, method) in methods.iter().enumerate() {
        let y = top + 14.0 * m as f64;
        let x = width - 150.0;
        let _ = writeln!(s, r#"<rect x="{x}" y="{y}" width="10" height="10" fill="{}"/>"#, PALETTE[m % PALETTE.len()]);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, x + 14.0, y + 9.0, escape(method));
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
