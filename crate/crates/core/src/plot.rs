//! SVG rendering of sweep results: a min–max band and a mean line per
//! variant. The CSV stays the source of truth; this is derived from it.

use std::fmt::Write;

use crate::experiment::{bands, Band, PromptAxis, SweepRow};
use crate::trainer::TuningStrategy;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 5] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];

fn label(v: TuningStrategy) -> &'static str {
    match v {
        TuningStrategy::Pt => "with global prompt",
        TuningStrategy::VisTab => "without global prompt",
        TuningStrategy::Vis => "visual prompts only",
        TuningStrategy::Tab => "tabular prompts only",
        TuningStrategy::Ft => "full fine-tuning",
    }
}

pub fn render_sweep_svg(rows: &[SweepRow], axis: PromptAxis) -> String {
    let mut variants: Vec<TuningStrategy> = rows.iter().map(|r| r.variant).collect();
    variants.sort_unstable();
    variants.dedup();
    let mut counts: Vec<usize> = rows.iter().map(|r| r.count).collect();
    counts.sort_unstable();
    counts.dedup();

    let (mut lo, mut hi) = rows
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r.auc), hi.max(r.auc)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    lo = (lo - 0.02).max(0.0);
    hi = (hi + 0.02).min(1.0);
    if hi - lo < 0.05 {
        hi = (lo + 0.05).min(1.0);
        lo = hi - 0.05;
    }

    let plot_w = WIDTH - 2.0 * MARGIN;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    // counts are placed evenly, in sorted order
    let x_of = |count: usize| {
        let i = counts.iter().position(|&c| c == count).unwrap_or(0) as f64;
        let n = counts.len().max(2) as f64 - 1.0;
        MARGIN + plot_w * if counts.len() > 1 { i / n } else { 0.5 }
    };
    let y_of = |auc: f64| MARGIN + plot_h * (1.0 - (auc - lo) / (hi - lo));

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#).unwrap();
    let (x0, y0, x1, y1) = (MARGIN, HEIGHT - MARGIN, WIDTH - MARGIN, MARGIN);
    writeln!(
        s,
        r#"<path class="axes" d="M{x0:.1},{y1:.1} L{x0:.1},{y0:.1} L{x1:.1},{y0:.1}" fill="none" stroke="black"/>"#
    )
    .unwrap();
    for &c in &counts {
        let x = x_of(c);
        writeln!(s, r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{c}</text>"#, y0 + 18.0).unwrap();
    }
    for i in 0..=4 {
        let v = lo + (hi - lo) * i as f64 / 4.0;
        let y = y_of(v);
        writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.3}</text>"#, x0 - 6.0, y + 4.0).unwrap();
        writeln!(s, r##"<line x1="{x0:.1}" y1="{y:.1}" x2="{x1:.1}" y2="{y:.1}" stroke="#ddd"/>"##).unwrap();
    }
    writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">number of {axis} prompts</text>"#,
        WIDTH / 2.0,
        HEIGHT - 12.0
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">test AUC</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0
    )
    .unwrap();

    for (i, &v) in variants.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let b: Vec<Band> = bands(rows, v);
        let upper = b.iter().map(|b| format!("{:.2},{:.2}", x_of(b.count), y_of(b.max)));
        let lower = b.iter().rev().map(|b| format!("{:.2},{:.2}", x_of(b.count), y_of(b.min)));
        let points: Vec<String> = upper.chain(lower).collect();
        writeln!(
            s,
            r#"<polygon class="band" data-variant="{v}" points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
            points.join(" ")
        )
        .unwrap();
        let mean: Vec<String> = b
            .iter()
            .map(|b| format!("{:.2},{:.2}", x_of(b.count), y_of(b.mean)))
            .collect();
        writeln!(
            s,
            r#"<polyline class="mean" data-variant="{v}" points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            mean.join(" ")
        )
        .unwrap();
        let ly = MARGIN + 16.0 * i as f64;
        writeln!(
            s,
            r#"<rect x="{:.1}" y="{:.1}" width="12" height="12" fill="{color}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            x1 - 170.0,
            ly - 10.0,
            x1 - 152.0,
            ly,
            label(v)
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_band_and_line_per_variant() {
        let mut rows = Vec::new();
        for variant in [TuningStrategy::Pt, TuningStrategy::VisTab] {
            for count in [2, 5, 10, 20] {
                for seed in 0..3 {
                    rows.push(SweepRow {
                        variant,
                        axis: PromptAxis::Tabular,
                        count,
                        seed,
                        auc: 0.7 + 0.01 * seed as f64 + 0.001 * count as f64,
                    });
                }
            }
        }
        let svg = render_sweep_svg(&rows, PromptAxis::Tabular);
        assert_eq!(svg.matches("<polygon class=\"band\"").count(), 2);
        assert_eq!(svg.matches("<polyline class=\"mean\"").count(), 2);
        assert!(svg.contains("data-variant=\"vistab\""));
        assert!(svg.trim_end().ends_with("</svg>"));
        // each band polygon has 2 points per count
        let band = svg.lines().find(|l| l.contains("class=\"band\"")).unwrap();
        let pts = band.split("points=\"").nth(1).unwrap().split('"').next().unwrap();
        assert_eq!(pts.split(' ').count(), 8);
    }

    #[test]
    fn empty_input_still_renders() {
        let svg = render_sweep_svg(&[], PromptAxis::Visual);
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<polygon").count(), 0);
    }
}
