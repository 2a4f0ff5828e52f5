//! SVG rendering of a scenario: lane corridors, road edges, agent boxes at
//! the current step and trajectories that fade toward the horizon.

use std::fmt::Write as _;

use crate::metrics::box_corners;
use crate::scene::{LaneType, Scenario};

const PALETTE: [&str; 8] = [
    "#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOptions {
    /// Pixels per metre.
    pub scale: f64,
    /// Margin around the drawn content, metres.
    pub margin: f64,
    /// Crop to the agents' extent instead of the whole map.
    pub crop_to_agents: bool,
    /// Free-form text placed in an XML comment at the top.
    pub comment: Option<String>,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            scale: 4.0,
            margin: 10.0,
            crop_to_agents: true,
            comment: None,
        }
    }
}

struct Frame {
    min: [f64; 2],
    max: [f64; 2],
    scale: f64,
}

impl Frame {
    fn map(&self, p: [f64; 2]) -> (f64, f64) {
        ((p[0] - self.min[0]) * self.scale, (self.max[1] - p[1]) * self.scale)
    }

    fn size(&self) -> (f64, f64) {
        (
            (self.max[0] - self.min[0]) * self.scale,
            (self.max[1] - self.min[1]) * self.scale,
        )
    }

    fn path(&self, pts: &[[f64; 2]]) -> String {
        let mut d = String::new();
        for (i, p) in pts.iter().enumerate() {
            let (x, y) = self.map(*p);
            let _ = write!(d, "{}{x:.2},{y:.2} ", if i == 0 { "M" } else { "L" });
        }
        d.trim_end().to_string()
    }
}

fn bounds<'a>(points: impl Iterator<Item = &'a [f64; 2]>) -> Option<([f64; 2], [f64; 2])> {
    let mut b: Option<([f64; 2], [f64; 2])> = None;
    for p in points {
        let (lo, hi) = b.get_or_insert((*p, *p));
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    b
}

fn escape(s: &str) -> String {
    let mut s = s.to_string();
    while s.contains("--") {
        s = s.replace("--", "- -");
    }
    s
}

pub fn render_svg(scenario: &Scenario, opts: &RenderOptions) -> String {
    let positions: Vec<[f64; 2]> = scenario
        .agents
        .iter()
        .flat_map(|a| a.states.iter().map(|s| s.position()))
        .collect();
    let map_points = scenario.polylines.iter().flat_map(|p| p.points.iter());
    let (lo, hi) = if opts.crop_to_agents {
        bounds(positions.iter())
    } else {
        bounds(map_points.chain(positions.iter()))
    }
    .unwrap_or(([0.0, 0.0], [1.0, 1.0]));
    let frame = Frame {
        min: [lo[0] - opts.margin, lo[1] - opts.margin],
        max: [hi[0] + opts.margin, hi[1] + opts.margin],
        scale: opts.scale,
    };
    let (w, h) = frame.size();
    let mut out = String::new();
    let _ = writeln!(out, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    if let Some(c) = &opts.comment {
        let _ = writeln!(out, "<!-- {} -->", escape(c));
    }
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.2} {h:.2}">"#
    );
    let _ = writeln!(out, r##"<rect width="100%" height="100%" fill="#fafafa"/>"##);
    let _ = writeln!(out, r#"<defs><clipPath id="view"><rect width="{w:.2}" height="{h:.2}"/></clipPath></defs>"#);
    let _ = writeln!(out, r#"<g clip-path="url(#view)">"#);

    let _ = writeln!(out, r#"<g id="lanes">"#);
    for p in &scenario.polylines {
        let d = frame.path(&p.points);
        match p.lane_type {
            LaneType::Driving | LaneType::Shoulder => {
                let fill = if p.lane_type == LaneType::Driving { "#d9d9d9" } else { "#ececec" };
                let _ = writeln!(
                    out,
                    r#"<path d="{d}" fill="none" stroke="{fill}" stroke-width="{:.2}" stroke-linejoin="round"/>"#,
                    p.width * opts.scale
                );
                let _ = writeln!(
                    out,
                    r##"<path d="{d}" fill="none" stroke="#ffffff" stroke-width="1" stroke-dasharray="6 6"/>"##
                );
            }
            LaneType::Edge => {
                let _ = writeln!(out, r##"<path d="{d}" fill="none" stroke="#333333" stroke-width="2"/>"##);
            }
        }
    }
    let _ = writeln!(out, "</g>");

    let t0 = scenario.t_now;
    let _ = writeln!(out, r#"<g id="agents">"#);
    for (i, a) in scenario.agents.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let hist: Vec<[f64; 2]> = a.states[..=t0].iter().map(|s| s.position()).collect();
        let _ = writeln!(
            out,
            r##"<path d="{}" fill="none" stroke="#7f7f7f" stroke-width="1.5" stroke-opacity="0.8"/>"##,
            frame.path(&hist)
        );
        let fut = &a.states[t0..];
        let n = fut.len().saturating_sub(1).max(1) as f64;
        for (k, pair) in fut.windows(2).enumerate() {
            let opacity = 1.0 - 0.85 * k as f64 / n;
            let (x1, y1) = frame.map(pair[0].position());
            let (x2, y2) = frame.map(pair[1].position());
            let _ = writeln!(
                out,
                r#"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" stroke="{color}" stroke-width="2" stroke-opacity="{opacity:.3}"/>"#
            );
        }
        let corners: Vec<String> = box_corners(&a.states[t0], a.extent)
            .iter()
            .map(|p| {
                let (x, y) = frame.map(*p);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(
            out,
            r##"<polygon points="{}" fill="{color}" fill-opacity="0.85" stroke="#000000" stroke-width="0.8"/>"##,
            corners.join(" ")
        );
        let (lx, ly) = frame.map(a.states[t0].position());
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" fill="{color}">a{i}</text>"#,
            lx + 6.0,
            ly - 6.0
        );
    }
    let _ = writeln!(out, "</g>\n</g>\n</svg>");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_fixture, FixtureKind};

    #[test]
    fn svg_has_one_box_per_agent() {
        let s = gen_fixture(FixtureKind::CutIn, 0).unwrap().scenario;
        let svg = render_svg(&s, &RenderOptions::default());
        assert!(svg.starts_with("<?xml"));
        assert_eq!(svg.matches("<polygon").count(), s.agents.len());
        assert!(svg.contains("stroke-opacity=\"1.000\""));
        assert!(svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn comments_cannot_close_early() {
        let s = gen_fixture(FixtureKind::Yield, 0).unwrap().scenario;
        let opts = RenderOptions {
            comment: Some("a --- b -->".into()),
            ..RenderOptions::default()
        };
        let svg = render_svg(&s, &opts);
        assert_eq!(svg.matches("--").count(), 2);
    }
}
