//! Static SVG charts: a word-count histogram, grouped label bars per split,
//! and a 2×2 confusion heatmap. Output depends only on the inputs, so
//! reruns write identical files.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 24.0;
const TOP: f64 = 48.0;
const BOTTOM: f64 = 64.0;
const SERIES_COLORS: [&str; 2] = ["#4c72b0", "#dd8452"];

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn open(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        out,
        r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
}

fn axes(out: &mut String, x_label: &str, y_label: &str, y_max: f64) {
    let (x0, y0, x1, y1) = (LEFT, HEIGHT - BOTTOM, WIDTH - RIGHT, TOP);
    let _ = writeln!(
        out,
        r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#
    );
    let _ = writeln!(
        out,
        r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#
    );
    for i in 0..=4 {
        let v = y_max * i as f64 / 4.0;
        let y = y0 - (y0 - y1) * i as f64 / 4.0;
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            x0 - 6.0,
            y + 4.0,
            format_tick(v)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        (x0 + x1) / 2.0,
        HEIGHT - 16.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(y_label)
    );
}

fn format_tick(v: f64) -> String {
    if (v - v.round()).abs() < 1e-9 {
        format!("{}", v.round() as i64)
    } else {
        format!("{v:.1}")
    }
}

/// One bar per integer word count from the smallest to the largest observed.
pub fn word_count_histogram(title: &str, counts: &[usize]) -> String {
    let mut out = String::new();
    open(&mut out, title);
    let (lo, hi) = match (counts.iter().min(), counts.iter().max()) {
        (Some(lo), Some(hi)) => (*lo, *hi),
        _ => (0, 0),
    };
    let mut freq = vec![0usize; hi - lo + 1];
    for c in counts {
        freq[c - lo] += 1;
    }
    let y_max = freq.iter().copied().max().unwrap_or(0).max(1) as f64;
    axes(&mut out, "words per post", "posts", y_max);
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let bar_w = plot_w / freq.len() as f64;
    let label_every = freq.len().div_ceil(20).max(1);
    for (i, f) in freq.iter().enumerate() {
        let h = plot_h * *f as f64 / y_max;
        let x = LEFT + bar_w * i as f64;
        let _ = writeln!(
            out,
            r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"><title>{} words: {}</title></rect>"#,
            x + bar_w * 0.05,
            HEIGHT - BOTTOM - h,
            bar_w * 0.9,
            h,
            SERIES_COLORS[0],
            lo + i,
            f
        );
        if i % label_every == 0 {
            let _ = writeln!(
                out,
                r#"<text x="{:.2}" y="{:.1}" text-anchor="middle">{}</text>"#,
                x + bar_w / 2.0,
                HEIGHT - BOTTOM + 16.0,
                lo + i
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Grouped bars: one group per category, one bar per series.
pub fn grouped_bars(
    title: &str,
    y_label: &str,
    series: [&str; 2],
    groups: &[(String, [usize; 2])],
) -> String {
    let mut out = String::new();
    open(&mut out, title);
    let y_max = groups
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .max()
        .unwrap_or(0)
        .max(1) as f64;
    axes(&mut out, "split", y_label, y_max);
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let group_w = plot_w / groups.len().max(1) as f64;
    let bar_w = group_w * 0.35;
    for (g, (name, values)) in groups.iter().enumerate() {
        let gx = LEFT + group_w * g as f64;
        for (s, v) in values.iter().enumerate() {
            let h = plot_h * *v as f64 / y_max;
            let x = gx + group_w * 0.15 + bar_w * s as f64;
            let _ = writeln!(
                out,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"><title>{} {}: {}</title></rect>"#,
                x,
                HEIGHT - BOTTOM - h,
                bar_w,
                h,
                SERIES_COLORS[s],
                escape(name),
                series[s],
                v
            );
            let _ = writeln!(
                out,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="10">{}</text>"#,
                x + bar_w / 2.0,
                HEIGHT - BOTTOM - h - 4.0,
                v
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.1}" text-anchor="middle">{}</text>"#,
            gx + group_w / 2.0,
            HEIGHT - BOTTOM + 16.0,
            escape(name)
        );
    }
    for (s, name) in series.iter().enumerate() {
        let y = TOP + 16.0 * s as f64;
        let _ = writeln!(
            out,
            r#"<rect x="{:.1}" y="{:.1}" width="10" height="10" fill="{}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            WIDTH - RIGHT - 80.0,
            y,
            SERIES_COLORS[s],
            WIDTH - RIGHT - 64.0,
            y + 9.0,
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// 2×2 heatmap indexed `[gold][predicted]`, cell shade proportional to count.
pub fn confusion_heatmap(title: &str, labels: [&str; 2], counts: [[u64; 2]; 2]) -> String {
    let mut out = String::new();
    open(&mut out, title);
    let max = counts.iter().flatten().copied().max().unwrap_or(0).max(1) as f64;
    let cell = 120.0;
    let x0 = (WIDTH - 2.0 * cell) / 2.0 + 20.0;
    let y0 = TOP + 30.0;
    for (g, row) in counts.iter().enumerate() {
        for (p, count) in row.iter().enumerate() {
            let shade = *count as f64 / max;
            // Blend white to a deep blue.
            let r = (255.0 - shade * (255.0 - 8.0)).round() as u8;
            let gr = (255.0 - shade * (255.0 - 48.0)).round() as u8;
            let b = (255.0 - shade * (255.0 - 107.0)).round() as u8;
            let x = x0 + cell * p as f64;
            let y = y0 + cell * g as f64;
            let text_color = if shade > 0.5 { "white" } else { "black" };
            let _ = writeln!(
                out,
                r##"<rect x="{x:.1}" y="{y:.1}" width="{cell}" height="{cell}" fill="#{r:02x}{gr:02x}{b:02x}" stroke="gray"/>"##
            );
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="20" fill="{text_color}">{count}</text>"#,
                x + cell / 2.0,
                y + cell / 2.0 + 7.0
            );
        }
    }
    for (i, label) in labels.iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            x0 + cell * i as f64 + cell / 2.0,
            y0 + 2.0 * cell + 20.0,
            escape(label)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            x0 - 8.0,
            y0 + cell * i as f64 + cell / 2.0 + 4.0,
            escape(label)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">predicted</text>"#,
        x0 + cell,
        y0 + 2.0 * cell + 40.0
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" transform="rotate(-90 {:.1} {:.1})">actual</text>"#,
        x0 - 60.0,
        y0 + cell,
        x0 - 60.0,
        y0 + cell
    );
    out.push_str("</svg>\n");
    out
}
