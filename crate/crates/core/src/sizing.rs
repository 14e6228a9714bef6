//! Sizing-parameter fitting through a differentiable rasterizer.
//!
//! A structural tree is executed with split fractions `softmax(theta)` per
//! node, every leaf rectangle is rendered with sigmoid edges into its label
//! channel, and the mean squared error against a one-hot target raster is
//! minimized with Adam. Gradients are accumulated in reverse through the
//! rasterizer, the split boundaries and the per-node softmax.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grammar::{Axis, DerivationTree, Grammar, GrammarError, Node, ProductionBody};
use crate::layout::{rasterize_labels, LabelGrid, Rect, RectLayout, TerminalLabel};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum OptimizeError {
    #[error(transparent)]
    InvalidTree(#[from] GrammarError),
    #[error("raster is {got_w}x{got_h}, expected {want_w}x{want_h}")]
    DimensionMismatch { want_w: usize, want_h: usize, got_w: usize, got_h: usize },
    #[error("sizing vector has {got} entries, tree needs {want}")]
    SizingLength { want: usize, got: usize },
    #[error("loss became non-finite at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
    #[error("invalid optimizer config: {0}")]
    Config(String),
}

/// Per-label channel image, `data[(label * height + row) * width + col]`,
/// row 0 at the bottom.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassRaster {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl ClassRaster {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; TerminalLabel::COUNT * width * height] }
    }

    /// One-hot raster of a label grid.
    pub fn from_labels(grid: &LabelGrid) -> Self {
        let mut out = Self::zeros(grid.width, grid.height);
        let plane = grid.width * grid.height;
        for (p, l) in grid.labels.iter().enumerate() {
            out.data[l.index() * plane + p] = 1.0;
        }
        out
    }

    /// Hard (one-hot) raster of a layout by pixel-center sampling.
    pub fn from_layout(layout: &RectLayout, width: usize, height: usize) -> Self {
        Self::from_labels(&rasterize_labels(layout, width, height))
    }

    pub fn get(&self, label: TerminalLabel, col: usize, row: usize) -> f64 {
        self.data[(label.index() * self.height + row) * self.width + col]
    }

    pub fn channel(&self, label: TerminalLabel) -> &[f64] {
        let plane = self.width * self.height;
        &self.data[label.index() * plane..(label.index() + 1) * plane]
    }

    /// Per-pixel argmax label (ties go to the lower label index).
    pub fn to_labels(&self) -> LabelGrid {
        let plane = self.width * self.height;
        let labels = (0..plane)
            .map(|p| {
                let mut best = 0;
                for l in 1..TerminalLabel::COUNT {
                    if self.data[l * plane + p] > self.data[best * plane + p] {
                        best = l;
                    }
                }
                TerminalLabel::from_index(best).expect("label index")
            })
            .collect();
        LabelGrid { width: self.width, height: self.height, labels }
    }
}

/// Where one node's parameters live inside a [`SizingVector`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizingSlot {
    pub offset: usize,
    pub arity: usize,
}

/// Log-space sizing parameters of all nodes, in preorder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizingVector {
    pub values: Vec<f64>,
    pub slots: Vec<SizingSlot>,
}

impl SizingVector {
    /// All-zero parameters (uniform fractions) for the tree's structure.
    pub fn zeros(tree: &DerivationTree) -> Result<Self, OptimizeError> {
        let plan = Plan::build(Grammar::standard().as_ref(), tree)?;
        Ok(plan.zero_vector())
    }

    /// Logarithms of the tree's current sizing weights.
    pub fn from_tree(tree: &DerivationTree) -> Result<Self, OptimizeError> {
        let g = Grammar::standard();
        let report = g.validate_tree(tree);
        if !report.is_empty() {
            return Err(GrammarError::InvalidTree(report).into());
        }
        let mut out = SizingVector::zeros(tree)?;
        let mut values = Vec::with_capacity(out.values.len());
        tree.root.visit(&mut |n| values.extend(n.sizing.iter().map(|w| w.ln())));
        out.values = values;
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Normalized split fractions, `softmax` per node.
    pub fn fractions(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.values.len()];
        for s in &self.slots {
            softmax_into(&self.values[s.offset..s.offset + s.arity], &mut out[s.offset..s.offset + s.arity]);
        }
        out
    }

    /// Copy of `tree` whose sizing weights are these fractions.
    pub fn apply(&self, tree: &DerivationTree) -> Result<DerivationTree, OptimizeError> {
        let want = SizingVector::zeros(tree)?;
        if want.slots != self.slots {
            return Err(OptimizeError::SizingLength { want: want.len(), got: self.len() });
        }
        let fracs = self.fractions();
        let mut out = tree.clone();
        let mut slots = self.slots.iter();
        out.root.visit_mut(&mut |n: &mut Node| {
            let s = slots.next().expect("one slot per node");
            n.sizing = fracs[s.offset..s.offset + s.arity].to_vec();
        });
        Ok(out)
    }
}

fn softmax_into(theta: &[f64], out: &mut [f64]) {
    let max = theta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &t) in out.iter_mut().zip(theta) {
        *o = (t - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizeConfig {
    pub width: usize,
    pub height: usize,
    /// Edge softness in unit-square coordinates; `None` means half a pixel.
    pub tau: Option<f64>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_iters: usize,
    /// Convergence is judged over this many iterations.
    pub window: usize,
    pub tolerance: f64,
    /// Also stop once the hard render equals the target pixel for pixel.
    pub stop_on_exact_match: bool,
    /// Number of blurred warm-up stages, each with twice the previous `tau`.
    pub coarse_stages: usize,
    /// Convergence tolerance of the warm-up stages.
    pub coarse_tolerance: f64,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            tau: None,
            lr: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_iters: 2000,
            window: 50,
            tolerance: 1e-6,
            stop_on_exact_match: true,
            coarse_stages: 3,
            coarse_tolerance: 1e-3,
        }
    }
}

impl OptimizeConfig {
    pub fn tau(&self) -> f64 {
        self.tau.unwrap_or_else(|| 1.0 / (2.0 * self.width.max(self.height) as f64))
    }

    pub fn validate(&self) -> Result<(), OptimizeError> {
        let bad = |m: &str| Err(OptimizeError::Config(m.to_string()));
        if self.width == 0 || self.height == 0 {
            return bad("raster must be at least 1x1");
        }
        if !(self.tau() > 0.0 && self.tau().is_finite()) {
            return bad("tau must be positive");
        }
        if self.max_iters == 0 {
            return bad("max_iters must be at least 1");
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam step and moment decay rates out of range");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    ExactMatch,
    MaxIterations,
}

/// Loss before every Adam step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub losses: Vec<f64>,
    pub stop: StopReason,
}

impl LossTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            out.push_str(&format!("{i},{l}\n"));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Span {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Span {
    const UNIT: Span = Span { x0: 0.0, x1: 1.0, y0: 0.0, y1: 1.0 };

    fn along(&self, axis: Axis) -> (f64, f64) {
        match axis {
            Axis::X => (self.x0, self.x1),
            Axis::Y => (self.y0, self.y1),
        }
    }

    fn with(&self, axis: Axis, lo: f64, hi: f64) -> Span {
        match axis {
            Axis::X => Span { x0: lo, x1: hi, ..*self },
            Axis::Y => Span { y0: lo, y1: hi, ..*self },
        }
    }

    fn add(&mut self, o: &Span) {
        self.x0 += o.x0;
        self.x1 += o.x1;
        self.y0 += o.y0;
        self.y1 += o.y1;
    }
}

#[derive(Debug, Clone)]
struct PlanNode {
    axis: Option<Axis>,
    label: Option<TerminalLabel>,
    slot: SizingSlot,
    children: Vec<usize>,
}

/// Flattened preorder view of a tree's structure.
#[derive(Debug, Clone)]
struct Plan {
    nodes: Vec<PlanNode>,
    params: usize,
}

impl Plan {
    fn build(grammar: &Grammar, tree: &DerivationTree) -> Result<Plan, OptimizeError> {
        let report = grammar.validate_structure(tree);
        if !report.is_empty() {
            return Err(GrammarError::InvalidTree(report).into());
        }
        let mut plan = Plan { nodes: Vec::with_capacity(tree.size()), params: 0 };
        plan.push(grammar, &tree.root);
        Ok(plan)
    }

    fn push(&mut self, grammar: &Grammar, node: &Node) -> usize {
        let spec = &grammar.productions[node.prod.index()];
        let label = match &spec.body {
            ProductionBody::Assign { label } => Some(*label),
            _ => None,
        };
        let arity = spec.sizing_arity(&node.structural);
        let idx = self.nodes.len();
        self.nodes.push(PlanNode {
            axis: spec.axis(),
            label,
            slot: SizingSlot { offset: self.params, arity },
            children: Vec::new(),
        });
        self.params += arity;
        let children: Vec<usize> = node.children.iter().map(|c| self.push(grammar, c)).collect();
        self.nodes[idx].children = children;
        idx
    }

    fn zero_vector(&self) -> SizingVector {
        SizingVector { values: vec![0.0; self.params], slots: self.nodes.iter().map(|n| n.slot).collect() }
    }

    fn fractions(&self, theta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; theta.len()];
        for n in &self.nodes {
            let s = n.slot;
            softmax_into(&theta[s.offset..s.offset + s.arity], &mut out[s.offset..s.offset + s.arity]);
        }
        out
    }

    fn spans(&self, fracs: &[f64]) -> Vec<Span> {
        let mut spans = vec![Span::default(); self.nodes.len()];
        spans[0] = Span::UNIT;
        for (i, node) in self.nodes.iter().enumerate() {
            let Some(axis) = node.axis else { continue };
            let parent = spans[i];
            let (a, b) = parent.along(axis);
            let len = b - a;
            let n = node.children.len();
            let mut acc = 0.0;
            let mut lo = a;
            for (k, &c) in node.children.iter().enumerate() {
                acc += fracs[node.slot.offset + k];
                let hi = if k + 1 == n { b } else { a + len * acc };
                spans[c] = parent.with(axis, lo, hi);
                lo = hi;
            }
        }
        spans
    }

    /// Reverse accumulation from leaf-span gradients to `d loss / d theta`.
    fn backward(&self, fracs: &[f64], spans: &[Span], mut grads: Vec<Span>) -> Vec<f64> {
        let mut out = vec![0.0; self.params];
        let mut gf = Vec::new();
        for (i, node) in self.nodes.iter().enumerate().rev() {
            let Some(axis) = node.axis else { continue };
            let n = node.children.len();
            let (a, b) = spans[i].along(axis);
            let len = b - a;
            let mut g = Span::default();
            // Boundary gradients: G[k] for the boundary before child k.
            let mut bound = vec![0.0; n + 1];
            for (k, &c) in node.children.iter().enumerate() {
                let gc = grads[c];
                let (glo, ghi) = gc.along(axis);
                bound[k] += glo;
                bound[k + 1] += ghi;
                match axis {
                    Axis::X => {
                        g.y0 += gc.y0;
                        g.y1 += gc.y1;
                    }
                    Axis::Y => {
                        g.x0 += gc.x0;
                        g.x1 += gc.x1;
                    }
                }
            }
            let (mut ga, mut gb) = (bound[0], bound[n]);
            let f = &fracs[node.slot.offset..node.slot.offset + n];
            let mut acc = 0.0;
            for k in 1..n {
                acc += f[k - 1];
                ga += bound[k] * (1.0 - acc);
                gb += bound[k] * acc;
            }
            // d c_k / d f_j = len for j < k < n.
            gf.clear();
            gf.resize(n, 0.0);
            let mut suffix = 0.0;
            for j in (0..n).rev() {
                gf[j] = len * suffix;
                if j > 0 {
                    suffix += bound[j];
                }
            }
            let dot: f64 = f.iter().zip(&gf).map(|(a, b)| a * b).sum();
            for j in 0..n {
                out[node.slot.offset + j] = f[j] * (gf[j] - dot);
            }
            match axis {
                Axis::X => {
                    g.x0 += ga;
                    g.x1 += gb;
                }
                Axis::Y => {
                    g.y0 += ga;
                    g.y1 += gb;
                }
            }
            grads[i].add(&g);
        }
        out
    }

    fn leaves<'a>(&'a self, spans: &'a [Span]) -> impl Iterator<Item = (usize, TerminalLabel, Span)> + 'a {
        self.nodes.iter().enumerate().filter_map(|(i, n)| n.label.map(|l| (i, l, spans[i])))
    }

    fn layout(&self, spans: &[Span]) -> RectLayout {
        RectLayout::new(
            self.leaves(spans)
                .map(|(_, l, s)| Rect::new(l, s.x0, s.y0, s.x1 - s.x0, s.y1 - s.y0))
                .collect(),
        )
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Soft box profile along one axis: values and derivatives w.r.t. both edges
/// for pixels `first..first + len`.
struct Profile {
    first: usize,
    value: Vec<f64>,
    d_lo: Vec<f64>,
    d_hi: Vec<f64>,
}

/// Beyond this many `tau` from an edge the sigmoid is below f64 resolution.
const WINDOW_TAUS: f64 = 40.0;

/// How a rectangle's edges are smoothed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Edges {
    /// `σ((u-lo)/τ)·σ((hi-u)/τ)`: the render the loss is defined on.
    Product,
    /// `σ((u-lo)/τ) - σ((u-hi)/τ)`: the box convolved with a logistic
    /// density, consistent with a blurred target even for boxes thinner than τ.
    Difference,
}

fn profile(lo: f64, hi: f64, n: usize, tau: f64, edges: Edges) -> Profile {
    let nf = n as f64;
    let m = WINDOW_TAUS * tau;
    let first = ((lo - m) * nf - 0.5).floor().max(0.0) as usize;
    let last = (((hi + m) * nf - 0.5).ceil().max(0.0) as usize + 1).min(n);
    let first = first.min(last);
    let len = last - first;
    let mut p = Profile { first, value: Vec::with_capacity(len), d_lo: Vec::with_capacity(len), d_hi: Vec::with_capacity(len) };
    for i in first..last {
        let u = (i as f64 + 0.5) / nf;
        let sa = sigmoid((u - lo) / tau);
        match edges {
            Edges::Product => {
                let sb = sigmoid((hi - u) / tau);
                p.value.push(sa * sb);
                p.d_lo.push(-sa * (1.0 - sa) * sb / tau);
                p.d_hi.push(sa * sb * (1.0 - sb) / tau);
            }
            Edges::Difference => {
                let sb = sigmoid((u - hi) / tau);
                p.value.push(sa - sb);
                p.d_lo.push(-sa * (1.0 - sa) / tau);
                p.d_hi.push(sb * (1.0 - sb) / tau);
            }
        }
    }
    p
}

struct Evaluation {
    loss: f64,
    grad: Vec<f64>,
    spans: Vec<Span>,
}

type LeafProfiles = Vec<(usize, TerminalLabel, Profile, Profile)>;

fn render(plan: &Plan, spans: &[Span], width: usize, height: usize, tau: f64, edges: Edges) -> (ClassRaster, LeafProfiles) {
    let mut raster = ClassRaster::zeros(width, height);
    let mut profiles = Vec::new();
    for (i, label, s) in plan.leaves(spans) {
        let px = profile(s.x0, s.x1, width, tau, edges);
        let py = profile(s.y0, s.y1, height, tau, edges);
        let base = label.index() * height * width;
        for (r, &vy) in py.value.iter().enumerate() {
            let row = base + (py.first + r) * width + px.first;
            for (dst, &vx) in raster.data[row..row + px.value.len()].iter_mut().zip(&px.value) {
                *dst += vy * vx;
            }
        }
        profiles.push((i, label, px, py));
    }
    (raster, profiles)
}

fn evaluate(plan: &Plan, theta: &[f64], target: &ClassRaster, tau: f64, edges: Edges, with_grad: bool) -> Evaluation {
    let (width, height) = (target.width, target.height);
    let fracs = plan.fractions(theta);
    let spans = plan.spans(&fracs);
    let (raster, profiles) = render(plan, &spans, width, height, tau, edges);
    let count = raster.data.len() as f64;
    let mut loss = 0.0;
    let mut resid = raster.data;
    for (r, t) in resid.iter_mut().zip(&target.data) {
        *r -= t;
        loss += *r * *r;
    }
    loss /= count;
    if !with_grad {
        return Evaluation { loss, grad: Vec::new(), spans };
    }
    // d loss / d raster = 2 (render - target) / count
    let scale = 2.0 / count;
    let mut leaf_grads = vec![Span::default(); plan.nodes.len()];
    let mut col_acc = Vec::new();
    for (i, label, px, py) in &profiles {
        let base = label.index() * height * width;
        col_acc.clear();
        col_acc.resize(px.value.len(), 0.0);
        let mut g = Span::default();
        for (r, &vy) in py.value.iter().enumerate() {
            let row = base + (py.first + r) * width + px.first;
            let mut row_dot = 0.0;
            for ((acc, &e), &vx) in col_acc.iter_mut().zip(&resid[row..row + px.value.len()]).zip(&px.value) {
                *acc += e * vy;
                row_dot += e * vx;
            }
            g.y0 += row_dot * py.d_lo[r];
            g.y1 += row_dot * py.d_hi[r];
        }
        for (c, &acc) in col_acc.iter().enumerate() {
            g.x0 += acc * px.d_lo[c];
            g.x1 += acc * px.d_hi[c];
        }
        leaf_grads[*i] = Span { x0: g.x0 * scale, x1: g.x1 * scale, y0: g.y0 * scale, y1: g.y1 * scale };
    }
    let grad = plan.backward(&fracs, &spans, leaf_grads);
    Evaluation { loss, grad, spans }
}

/// Separable convolution with the pixel-integrated logistic density of scale
/// `tau`, zero outside the raster. A hard box blurred this way is close to the
/// soft render of the same box, so warm-up stages keep the true sizing as
/// their minimizer.
fn blur(raster: &ClassRaster, tau: f64) -> ClassRaster {
    let (w, h) = (raster.width, raster.height);
    let kernel = |n: usize| -> Vec<f64> {
        let tp = tau * n as f64;
        let radius = (WINDOW_TAUS * tp).ceil() as i64;
        (-radius..=radius).map(|d| sigmoid((d as f64 + 0.5) / tp) - sigmoid((d as f64 - 0.5) / tp)).collect()
    };
    let (kx, ky) = (kernel(w), kernel(h));
    let (rx, ry) = ((kx.len() / 2) as i64, (ky.len() / 2) as i64);
    let mut tmp = vec![0.0; raster.data.len()];
    for (src, dst) in raster.data.chunks(w).zip(tmp.chunks_mut(w)) {
        for (c, out) in dst.iter_mut().enumerate() {
            let lo = (c as i64 - rx).max(0) as usize;
            let hi = ((c as i64 + rx) as usize).min(w - 1);
            *out = (lo..=hi).map(|j| src[j] * kx[(j as i64 - c as i64 + rx) as usize]).sum();
        }
    }
    let mut out = ClassRaster::zeros(w, h);
    let plane = w * h;
    for l in 0..TerminalLabel::COUNT {
        let (src, dst) = (&tmp[l * plane..(l + 1) * plane], &mut out.data[l * plane..(l + 1) * plane]);
        for r in 0..h {
            let lo = (r as i64 - ry).max(0) as usize;
            let hi = ((r as i64 + ry) as usize).min(h - 1);
            for c in 0..w {
                dst[r * w + c] = (lo..=hi).map(|j| src[j * w + c] * ky[(j as i64 - r as i64 + ry) as usize]).sum();
            }
        }
    }
    out
}

fn check_dims(target: &ClassRaster, cfg: &OptimizeConfig) -> Result<(), OptimizeError> {
    if target.width != cfg.width || target.height != cfg.height || target.data.len() != TerminalLabel::COUNT * cfg.width * cfg.height {
        return Err(OptimizeError::DimensionMismatch {
            want_w: cfg.width,
            want_h: cfg.height,
            got_w: target.width,
            got_h: target.height,
        });
    }
    Ok(())
}

fn plan_for(tree: &DerivationTree, sizing: &SizingVector) -> Result<Plan, OptimizeError> {
    let plan = Plan::build(Grammar::standard().as_ref(), tree)?;
    if sizing.values.len() != plan.params {
        return Err(OptimizeError::SizingLength { want: plan.params, got: sizing.values.len() });
    }
    Ok(plan)
}

/// Soft render of the tree executed with `sizing`.
pub fn soft_rasterize(tree: &DerivationTree, sizing: &SizingVector, cfg: &OptimizeConfig) -> Result<ClassRaster, OptimizeError> {
    cfg.validate()?;
    let plan = plan_for(tree, sizing)?;
    let spans = plan.spans(&plan.fractions(&sizing.values));
    Ok(render(&plan, &spans, cfg.width, cfg.height, cfg.tau(), Edges::Product).0)
}

/// Mean squared error against `target` and its exact gradient in log space.
pub fn loss_and_grad(
    tree: &DerivationTree,
    sizing: &SizingVector,
    target: &ClassRaster,
    cfg: &OptimizeConfig,
) -> Result<(f64, SizingVector), OptimizeError> {
    cfg.validate()?;
    check_dims(target, cfg)?;
    let plan = plan_for(tree, sizing)?;
    let e = evaluate(&plan, &sizing.values, target, cfg.tau(), Edges::Product, true);
    Ok((e.loss, SizingVector { values: e.grad, slots: sizing.slots.clone() }))
}

/// Fits sizing with Adam starting from uniform fractions. Returns the tree
/// carrying the lowest-loss fractions of the final stage and the loss trace.
///
/// With `coarse_stages > 0` the edge softness starts at `tau * 2^stages` and
/// halves after each converged stage, warm-starting the parameters; the blurred
/// early stages let misplaced edges feel targets several pixels away.
pub fn optimize_sizing(
    tree: &DerivationTree,
    target_layout: &RectLayout,
    cfg: &OptimizeConfig,
) -> Result<(DerivationTree, LossTrace), OptimizeError> {
    cfg.validate()?;
    let plan = Plan::build(Grammar::standard().as_ref(), tree)?;
    let target_labels = rasterize_labels(target_layout, cfg.width, cfg.height);
    let target = ClassRaster::from_labels(&target_labels);
    let mut sizing = plan.zero_vector();
    let n = sizing.len();
    let mut losses = Vec::new();
    let mut stop = StopReason::MaxIterations;
    let mut best = (f64::INFINITY, sizing.values.clone());
    'stages: for stage in (0..=cfg.coarse_stages).rev() {
        let tau = cfg.tau() * f64::powi(2.0, stage as i32);
        let last = stage == 0;
        let blurred;
        let target = if last {
            &target
        } else {
            blurred = blur(&target, tau);
            &blurred
        };
        let (mut m, mut v) = (vec![0.0; n], vec![0.0; n]);
        let start = losses.len();
        best = (f64::INFINITY, sizing.values.clone());
        for step in 0.. {
            let iter = losses.len();
            if iter >= cfg.max_iters {
                stop = StopReason::MaxIterations;
                break 'stages;
            }
            let edges = if last { Edges::Product } else { Edges::Difference };
            let e = evaluate(&plan, &sizing.values, target, tau, edges, true);
            if !e.loss.is_finite() {
                return Err(OptimizeError::NonFiniteLoss { iteration: iter });
            }
            losses.push(e.loss);
            if e.loss < best.0 {
                best = (e.loss, sizing.values.clone());
            }
            if cfg.stop_on_exact_match && rasterize_labels(&plan.layout(&e.spans), cfg.width, cfg.height) == target_labels {
                best = (e.loss, sizing.values.clone());
                stop = StopReason::ExactMatch;
                break 'stages;
            }
            if step >= cfg.window {
                let old = losses[start + step - cfg.window];
                let tol = if last { cfg.tolerance } else { cfg.coarse_tolerance };
                if old <= 0.0 || (old - e.loss) / old < tol {
                    stop = StopReason::Converged;
                    if last {
                        break 'stages;
                    }
                    break;
                }
            }
            let t = (step + 1) as i32;
            let (c1, c2) = (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t));
            for j in 0..n {
                let g = e.grad[j];
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
                sizing.values[j] -= cfg.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.eps);
            }
        }
        sizing.values = best.1.clone();
    }
    sizing.values = best.1;
    Ok((sizing.apply(tree)?, LossTrace { losses, stop }))
}
