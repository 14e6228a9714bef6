//! SVG rendering of rectangle layouts.
//!
//! Layouts use a bottom-left origin on the unit square; SVG uses top-left,
//! so every rectangle's `y` is flipped. The viewBox is the unit square.

use std::fmt::Write;

use facaid_core::{RectLayout, TerminalLabel};
use serde::{Deserialize, Serialize};

/// Fill colour per terminal label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Palette {
    pub wall: String,
    pub window: String,
    pub door: String,
    pub balcony: String,
    pub shop: String,
}

impl Default for Palette {
    fn default() -> Self {
        Self {
            wall: "#d8d2c4".into(),
            window: "#3f6f9f".into(),
            door: "#7a4e2d".into(),
            balcony: "#5f8a3a".into(),
            shop: "#b5473f".into(),
        }
    }
}

impl Palette {
    pub fn color(&self, label: TerminalLabel) -> &str {
        match label {
            TerminalLabel::Wall => &self.wall,
            TerminalLabel::Window => &self.window,
            TerminalLabel::Door => &self.door,
            TerminalLabel::Balcony => &self.balcony,
            TerminalLabel::Shop => &self.shop,
        }
    }
}

fn escape_attr(s: &str) -> String {
    s.replace('&', "&amp;").replace('"', "&quot;").replace('<', "&lt;")
}

/// One `<rect>` per layout rectangle, in canonical order.
pub fn render_svg(layout: &RectLayout, palette: &Palette) -> String {
    let mut out = String::from(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 1 1\" width=\"512\" height=\"512\" \
         preserveAspectRatio=\"none\" shape-rendering=\"crispEdges\">\n",
    );
    for r in layout.canonical().rects {
        let _ = writeln!(
            out,
            "  <rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{}\" data-label=\"{}\"/>",
            r.x,
            1.0 - r.top(),
            r.w,
            r.h,
            escape_attr(palette.color(r.label)),
            r.label
        );
    }
    out.push_str("</svg>\n");
    out
}
