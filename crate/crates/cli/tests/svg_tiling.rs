//! Rendered SVGs parse back to layouts that tile the unit square.

use facaid_cli::svg::{render_svg, Palette};
use facaid_core::generator::record_at;
use facaid_core::{execute, Rect, RectLayout, TerminalLabel};

fn attr(tag: &str, name: &str) -> String {
    let key = format!(" {name}=\"");
    let start = tag.find(&key).unwrap_or_else(|| panic!("no {name} in {tag}")) + key.len();
    tag[start..].split('"').next().unwrap().to_string()
}

fn parse_back(svg: &str) -> RectLayout {
    let rects = svg
        .split("<rect")
        .skip(1)
        .map(|tag| {
            let f = |n| attr(tag, n).parse::<f64>().unwrap();
            let label = (0..5)
                .filter_map(TerminalLabel::from_index)
                .find(|l| l.to_string() == attr(tag, "data-label"))
                .expect("known label");
            let (w, h) = (f("width"), f("height"));
            Rect::new(label, f("x"), 1.0 - f("y") - h, w, h)
        })
        .collect();
    RectLayout::new(rects)
}

#[test]
fn generator_renders_tile_without_gaps_or_overlaps() {
    for i in 0..300 {
        let rec = record_at(77, i);
        let layout = execute(&rec.tree).unwrap();
        let svg = render_svg(&layout, &Palette::default());
        let back = parse_back(&svg);
        assert_eq!(back.len(), layout.len());

        let area: f64 = back.rects.iter().map(Rect::area).sum();
        assert!((area - 1.0).abs() < 1e-9, "record {i}: covered area {area}");
        for (a, r) in back.rects.iter().enumerate() {
            assert!(r.is_within_unit(), "record {i}: {r:?} leaves the square");
            for s in &back.rects[a + 1..] {
                assert!(r.intersection_area(s) < 1e-12, "record {i}: {r:?} overlaps {s:?}");
            }
        }
        // Same rectangles, same labels, same order.
        for (p, q) in back.rects.iter().zip(&layout.canonical().rects) {
            assert_eq!(p.label, q.label);
            assert!((p.x - q.x).abs() < 1e-12 && (p.y - q.y).abs() < 1e-12);
            assert!((p.w - q.w).abs() < 1e-12 && (p.h - q.h).abs() < 1e-12);
        }
    }
}

#[test]
fn palette_colours_each_label() {
    let rec = record_at(3, 9);
    let palette = Palette::default();
    let svg = render_svg(&rec.layout, &palette);
    for tag in svg.split("<rect").skip(1) {
        let label = attr(tag, "data-label");
        let expected = (0..5)
            .filter_map(TerminalLabel::from_index)
            .find(|l| l.to_string() == label)
            .map(|l| palette.color(l).to_string())
            .unwrap();
        assert_eq!(attr(tag, "fill"), expected);
    }
}
