//! Flat facade segmentations: labeled axis-aligned rectangles in the unit square.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Tolerance used for tiling and bounds checks.
pub const GEOM_EPS: f64 = 1e-9;

/// Terminal symbol carried by every final rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TerminalLabel {
    Wall,
    Window,
    Door,
    Balcony,
    Shop,
}

impl TerminalLabel {
    pub const ALL: [TerminalLabel; 5] = [
        TerminalLabel::Wall,
        TerminalLabel::Window,
        TerminalLabel::Door,
        TerminalLabel::Balcony,
        TerminalLabel::Shop,
    ];
    pub const COUNT: usize = 5;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            TerminalLabel::Wall => "Wall",
            TerminalLabel::Window => "Window",
            TerminalLabel::Door => "Door",
            TerminalLabel::Balcony => "Balcony",
            TerminalLabel::Shop => "Shop",
        }
    }
}

impl fmt::Display for TerminalLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TerminalLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|l| l.name() == s)
            .ok_or_else(|| format!("unknown terminal label `{s}`"))
    }
}

/// Axis-aligned region, bottom-left origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extent {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl Extent {
    pub const UNIT: Extent = Extent { x: 0.0, y: 0.0, w: 1.0, h: 1.0 };

    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub label: TerminalLabel,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl Rect {
    pub fn new(label: TerminalLabel, x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { label, x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn top(&self) -> f64 {
        self.y + self.h
    }

    /// Area of the intersection with `other` (zero when disjoint or touching).
    pub fn intersection_area(&self, other: &Rect) -> f64 {
        let w = self.right().min(other.right()) - self.x.max(other.x);
        let h = self.top().min(other.top()) - self.y.max(other.y);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Checks the unit-square bounds and positive extent.
    pub fn is_within_unit(&self) -> bool {
        self.x >= -GEOM_EPS
            && self.y >= -GEOM_EPS
            && self.w > 0.0
            && self.h > 0.0
            && self.right() <= 1.0 + GEOM_EPS
            && self.top() <= 1.0 + GEOM_EPS
    }

    /// Canonical ordering: bottom-left corner Y, then X, then label, width, height.
    pub fn canonical_cmp(&self, other: &Rect) -> Ordering {
        self.y
            .total_cmp(&other.y)
            .then(self.x.total_cmp(&other.x))
            .then(self.label.cmp(&other.label))
            .then(self.w.total_cmp(&other.w))
            .then(self.h.total_cmp(&other.h))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RectLayout {
    pub rects: Vec<Rect>,
}

impl RectLayout {
    pub fn new(rects: Vec<Rect>) -> Self {
        Self { rects }
    }

    pub fn len(&self) -> usize {
        self.rects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rects.is_empty()
    }

    pub fn area_sum(&self) -> f64 {
        self.rects.iter().map(Rect::area).sum()
    }

    /// Pairs `(i, j)` whose intersection area exceeds `eps`.
    pub fn overlapping_pairs(&self, eps: f64) -> Vec<(usize, usize)> {
        let mut sorted: Vec<usize> = (0..self.rects.len()).collect();
        sorted.sort_by(|&a, &b| self.rects[a].x.total_cmp(&self.rects[b].x));
        let mut out = Vec::new();
        for (si, &i) in sorted.iter().enumerate() {
            let ri = &self.rects[i];
            for &j in &sorted[si + 1..] {
                let rj = &self.rects[j];
                if rj.x >= ri.right() {
                    break;
                }
                if ri.intersection_area(rj) > eps {
                    out.push((i.min(j), i.max(j)));
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// True when the rectangles are interior-disjoint and cover the unit square.
    pub fn is_tiling(&self) -> bool {
        (self.area_sum() - 1.0).abs() <= GEOM_EPS
            && self.rects.iter().all(Rect::is_within_unit)
            && self.overlapping_pairs(GEOM_EPS).is_empty()
    }

    pub fn sort_canonical(&mut self) {
        self.rects.sort_by(Rect::canonical_cmp);
    }

    pub fn canonical(&self) -> RectLayout {
        let mut out = self.clone();
        out.sort_canonical();
        out
    }
}

/// One label per pixel, row 0 at the bottom of the facade.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelGrid {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<TerminalLabel>,
}

impl LabelGrid {
    pub fn get(&self, col: usize, row: usize) -> TerminalLabel {
        self.labels[row * self.width + col]
    }

    /// Fraction of pixels whose labels differ. Panics on mismatched sizes.
    pub fn mismatch_fraction(&self, other: &LabelGrid) -> f64 {
        assert_eq!((self.width, self.height), (other.width, other.height));
        let diff = self
            .labels
            .iter()
            .zip(&other.labels)
            .filter(|(a, b)| a != b)
            .count();
        diff as f64 / self.labels.len() as f64
    }
}

/// Pixel index range `[lo, hi)` whose centers fall inside `[a, b)` on an axis of `n` pixels.
pub(crate) fn covered_pixels(a: f64, b: f64, n: usize) -> (usize, usize) {
    let nf = n as f64;
    let lo = (a * nf - 0.5).ceil().clamp(0.0, nf) as usize;
    let hi = (b * nf - 0.5).ceil().clamp(0.0, nf) as usize;
    (lo, hi.max(lo))
}

/// Hard rasterization by pixel-center sampling. Uncovered pixels read as `Wall`;
/// where rectangles overlap the later one in list order wins.
pub fn rasterize_labels(layout: &RectLayout, width: usize, height: usize) -> LabelGrid {
    let mut labels = vec![TerminalLabel::Wall; width * height];
    for r in &layout.rects {
        let (c0, c1) = covered_pixels(r.x, r.right(), width);
        let (r0, r1) = covered_pixels(r.y, r.top(), height);
        for row in r0..r1 {
            labels[row * width + c0..row * width + c1].fill(r.label);
        }
    }
    LabelGrid { width, height, labels }
}
