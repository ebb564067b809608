//! Static SVG timelines: one ground-truth and one prediction track per
//! sequence, colored bars on a shared frame axis.

use std::collections::BTreeSet;
use std::fmt::Write;

use crate::evaluation::EventRecord;

/// Category palette; class `k` always gets entry `k mod len`.
const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22",
    "#17becf",
];

pub fn class_color(class: usize) -> &'static str {
    PALETTE[class % PALETTE.len()]
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimelineStyle {
    /// Width of the drawable time axis in pixels.
    pub axis_width: f64,
    pub label_width: f64,
    pub track_height: f64,
    pub track_gap: f64,
}

impl Default for TimelineStyle {
    fn default() -> Self {
        Self {
            axis_width: 960.0,
            label_width: 150.0,
            track_height: 18.0,
            track_gap: 6.0,
        }
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn class_name(names: &[String], k: usize) -> String {
    names.get(k).cloned().unwrap_or_else(|| format!("class {k}"))
}

/// Round tick spacing giving roughly ten ticks over `extent` frames.
fn tick_step(extent: usize) -> usize {
    let raw = (extent as f64 / 10.0).max(1.0);
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|&s| s >= raw)
        .unwrap_or(10.0 * mag);
    step as usize
}

/// Renders the timeline. Sequences appear in lexical order; a sequence that
/// only has detections still gets both tracks. Prediction bars are shaded
/// by confidence.
pub fn timeline_svg(
    gts: &[EventRecord],
    dets: &[EventRecord],
    class_names: &[String],
    style: &TimelineStyle,
) -> String {
    let seqs: BTreeSet<&str> = gts.iter().chain(dets).map(|e| e.seq.as_str()).collect();
    let extent = gts.iter().chain(dets).map(|e| e.end).max().unwrap_or(1).max(1);
    let px = style.axis_width / extent as f64;
    let x0 = style.label_width;
    let row = style.track_height + style.track_gap;
    let top = 30.0;
    let tracks_h = seqs.len() as f64 * (2.0 * row + style.track_gap);
    let classes: BTreeSet<usize> = gts.iter().chain(dets).map(|e| e.class).collect();
    let legend_y = top + tracks_h + 34.0;
    let height = legend_y + 20.0;
    let width = x0 + style.axis_width + 20.0;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{width}" height="{height}" fill="white"/>"#);

    let mut y = top;
    for seq in &seqs {
        let _ = writeln!(s, r#"<g class="sequence" data-seq="{}">"#, escape(seq));
        for (track, events) in [("GT", gts), ("Pred", dets)] {
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{} {track}</text>"#,
                x0 - 8.0,
                y + style.track_height * 0.75,
                escape(seq)
            );
            let _ = writeln!(
                s,
                r##"<rect class="track" x="{x0:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="#f2f2f2"/>"##,
                style.axis_width, style.track_height
            );
            for e in events.iter().filter(|e| e.seq == *seq) {
                let opacity = if track == "GT" { 1.0 } else { e.conf.clamp(0.15, 1.0) };
                let _ = writeln!(
                    s,
                    r#"<rect class="bar {}" data-class="{}" data-start="{}" data-end="{}" x="{:.3}" y="{y:.2}" width="{:.3}" height="{:.2}" fill="{}" fill-opacity="{opacity:.3}"><title>{}: {}–{}</title></rect>"#,
                    track.to_lowercase(),
                    e.class,
                    e.start,
                    e.end,
                    x0 + e.start as f64 * px,
                    (e.end - e.start) as f64 * px,
                    style.track_height,
                    class_color(e.class),
                    escape(&class_name(class_names, e.class)),
                    e.start,
                    e.end
                );
            }
            y += row;
        }
        let _ = writeln!(s, "</g>");
        y += style.track_gap;
    }

    let axis_y = top + tracks_h + 4.0;
    let _ = writeln!(
        s,
        r#"<line x1="{x0:.2}" y1="{axis_y:.2}" x2="{:.2}" y2="{axis_y:.2}" stroke="black"/>"#,
        x0 + style.axis_width
    );
    let step = tick_step(extent);
    for f in (0..=extent).step_by(step) {
        let x = x0 + f as f64 * px;
        let _ = writeln!(
            s,
            r#"<line x1="{x:.2}" y1="{axis_y:.2}" x2="{x:.2}" y2="{:.2}" stroke="black"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{f}</text>"#,
            axis_y + 4.0,
            axis_y + 16.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="end">frame</text>"#,
        x0 - 8.0,
        axis_y + 16.0
    );

    let mut lx = x0;
    for &k in &classes {
        let name = escape(&class_name(class_names, k));
        let _ = writeln!(
            s,
            r#"<rect class="legend" x="{lx:.2}" y="{:.2}" width="12" height="12" fill="{}"/><text x="{:.2}" y="{:.2}">{name}</text>"#,
            legend_y - 10.0,
            class_color(k),
            lx + 16.0,
            legend_y
        );
        lx += 30.0 + 7.0 * name.len() as f64;
    }
    s.push_str("</svg>\n");
    s
}
