//! SVG rendering of campaign results.

use std::fmt::Write;

use crate::campaign::{BoxplotGroup, Heatmap};

const CELL: f64 = 56.0;
const MARGIN: f64 = 60.0;

pub fn escape_xml(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            _ => out.push(c),
        }
    }
    out
}

/// Blue for negative drops, white at zero, red for positive drops.
fn color(drop: f64, max_abs: f64) -> String {
    let t = if max_abs > 0.0 { (drop / max_abs).clamp(-1.0, 1.0) } else { 0.0 };
    let fade = |t: f64| (255.0 * (1.0 - t.abs())).round() as u8;
    if t >= 0.0 {
        format!("rgb(255,{0},{0})", fade(t))
    } else {
        format!("rgb({0},{0},255)", fade(t))
    }
}

/// Units on the vertical axis, lanes on the horizontal one; each cell is a
/// `rect.cell` labelled with its drop in percentage points.
pub fn heatmap_svg(h: &Heatmap, title: &str) -> String {
    let width = MARGIN * 1.5 + CELL * h.lanes as f64;
    let height = MARGIN * 2.0 + CELL * h.units as f64;
    let max_abs = h.drops.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif">"#
    )
    .unwrap();
    writeln!(s, r#"<title>{}</title>"#, escape_xml(title)).unwrap();
    writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="16">{}</text>"#, width / 2.0, escape_xml(title)).unwrap();
    for unit in 0..h.units {
        let y = MARGIN + CELL * unit as f64;
        writeln!(s, r#"<text x="{}" y="{}" text-anchor="end" font-size="12">u{unit}</text>"#, MARGIN - 6.0, y + CELL / 2.0 + 4.0).unwrap();
        for lane in 0..h.lanes {
            let x = MARGIN + CELL * lane as f64;
            let d = h.drop_at(unit, lane);
            writeln!(
                s,
                r#"<rect class="cell" data-unit="{unit}" data-lane="{lane}" data-drop="{d}" x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="{}" stroke="gray"/>"#,
                color(d, max_abs)
            )
            .unwrap();
            writeln!(
                s,
                r#"<text class="label" x="{}" y="{}" text-anchor="middle" font-size="11">{:.1}</text>"#,
                x + CELL / 2.0,
                y + CELL / 2.0 + 4.0,
                d * 100.0
            )
            .unwrap();
        }
    }
    let axis_y = MARGIN + CELL * h.units as f64 + 18.0;
    for lane in 0..h.lanes {
        writeln!(s, r#"<text x="{}" y="{axis_y}" text-anchor="middle" font-size="12">l{lane}</text>"#, MARGIN + CELL * (lane as f64 + 0.5))
            .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// One box per `(k, value)` group, grouped by value left to right with k
/// increasing inside each group. Drops are plotted in percentage points.
pub fn boxplot_svg(groups: &[BoxplotGroup], title: &str) -> String {
    let mut values: Vec<i32> = groups.iter().map(|g| g.value).collect();
    values.sort();
    values.dedup();
    let mut ordered: Vec<&BoxplotGroup> = groups.iter().collect();
    ordered.sort_by_key(|g| (values.iter().position(|&v| v == g.value), g.k));

    let slot = 48.0;
    let gap = 24.0;
    let plot_h = 320.0;
    let width = MARGIN * 2.0 + slot * ordered.len() as f64 + gap * values.len().saturating_sub(1) as f64;
    let height = plot_h + MARGIN * 2.5;
    let lo = groups.iter().fold(0.0f64, |m, g| m.min(g.min));
    let hi = groups.iter().fold(0.0f64, |m, g| m.max(g.max));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let y = |v: f64| MARGIN + plot_h * (1.0 - (v - lo) / span);

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif">"#
    )
    .unwrap();
    writeln!(s, r#"<title>{}</title>"#, escape_xml(title)).unwrap();
    writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="16">{}</text>"#, width / 2.0, escape_xml(title)).unwrap();
    writeln!(s, r#"<line x1="{MARGIN}" y1="{0}" x2="{MARGIN}" y2="{1}" stroke="black"/>"#, y(hi), y(lo)).unwrap();
    for (v, label) in [(lo, lo), (0.0, 0.0), (hi, hi)] {
        writeln!(s, r#"<text x="{}" y="{}" text-anchor="end" font-size="11">{:.1}</text>"#, MARGIN - 4.0, y(v) + 4.0, label * 100.0)
            .unwrap();
    }
    writeln!(s, r#"<line x1="{MARGIN}" y1="{0}" x2="{1}" y2="{0}" stroke="silver" stroke-dasharray="4 3"/>"#, y(0.0), width - MARGIN)
        .unwrap();

    let mut x = MARGIN;
    let mut prev_value = None;
    for g in ordered {
        if prev_value.is_some_and(|p| p != g.value) {
            x += gap;
        }
        prev_value = Some(g.value);
        let cx = x + slot / 2.0;
        let half = slot * 0.3;
        writeln!(s, r#"<g class="box" data-k="{}" data-value="{}">"#, g.k, g.value).unwrap();
        writeln!(s, r#"<line x1="{cx}" y1="{}" x2="{cx}" y2="{}" stroke="black"/>"#, y(g.max), y(g.min)).unwrap();
        writeln!(
            s,
            r#"<rect x="{}" y="{}" width="{}" height="{}" fill="rgb(170,200,235)" stroke="black"/>"#,
            cx - half,
            y(g.q3),
            2.0 * half,
            (y(g.q1) - y(g.q3)).max(0.5)
        )
        .unwrap();
        writeln!(
            s,
            r#"<line class="median" x1="{}" y1="{2}" x2="{}" y2="{2}" stroke="black" stroke-width="2"/>"#,
            cx - half,
            cx + half,
            y(g.median)
        )
        .unwrap();
        writeln!(s, r#"<text x="{cx}" y="{}" text-anchor="middle" font-size="11">k={}</text>"#, MARGIN + plot_h + 16.0, g.k).unwrap();
        writeln!(s, r#"<text x="{cx}" y="{}" text-anchor="middle" font-size="11">e={}</text>"#, MARGIN + plot_h + 30.0, g.value).unwrap();
        s.push_str("</g>\n");
        x += slot;
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn heat() -> Heatmap {
        Heatmap { value: -1, units: 8, lanes: 8, drops: (0..64).map(|i| (i as f64 - 10.0) / 100.0).collect() }
    }

    #[test]
    fn heatmap_is_well_formed_with_one_cell_per_lane() {
        let svg = heatmap_svg(&heat(), "drop <e=-1> & more");
        let doc = roxmltree::Document::parse(&svg).unwrap();
        let cells: Vec<_> = doc.descendants().filter(|n| n.attribute("class") == Some("cell")).collect();
        assert_eq!(cells.len(), 64);
        let c = cells.iter().find(|n| n.attribute("data-unit") == Some("2") && n.attribute("data-lane") == Some("3")).unwrap();
        assert_eq!(c.attribute("data-drop").unwrap().parse::<f64>().unwrap(), 0.09);
        let labels = doc.descendants().filter(|n| n.attribute("class") == Some("label")).count();
        assert_eq!(labels, 64);
    }

    #[test]
    fn colors_follow_sign() {
        assert_eq!(color(0.0, 1.0), "rgb(255,255,255)");
        assert_eq!(color(1.0, 1.0), "rgb(255,0,0)");
        assert_eq!(color(-1.0, 1.0), "rgb(0,0,255)");
        assert_eq!(color(0.3, 0.0), "rgb(255,255,255)");
    }

    #[test]
    fn boxplot_is_well_formed() {
        let groups: Vec<BoxplotGroup> = [1, 4, 16, 64]
            .iter()
            .flat_map(|&k| {
                [0, 1, -1].map(|value| BoxplotGroup {
                    k,
                    value,
                    min: -0.01,
                    q1: 0.0,
                    median: 0.01 * k as f64,
                    q3: 0.02 * k as f64,
                    max: 0.03 * k as f64,
                })
            })
            .collect();
        let svg = boxplot_svg(&groups, "sweep");
        let doc = roxmltree::Document::parse(&svg).unwrap();
        assert_eq!(doc.descendants().filter(|n| n.attribute("class") == Some("box")).count(), 12);
        let doc_empty = boxplot_svg(&[], "empty");
        roxmltree::Document::parse(&doc_empty).unwrap();
    }

    #[test]
    fn escapes_markup() {
        assert_eq!(escape_xml(r#"<a & "b">"#), "&lt;a &amp; &quot;b&quot;&gt;");
    }
}
