//! The facade split grammar: productions, derivation trees and their execution.
//!
//! A derivation tree is an ordered tree of production applications. Every node
//! carries its structural arguments (repeat counts, per-child kinds) and its
//! sizing weights. Sizing weights are unnormalized positive numbers; a split
//! divides its region proportionally to `weight / sum(weights)`.
//!
//! Terminal children of a production are themselves nodes: the only production
//! for a terminal symbol is its `Assign`, so every leaf of a valid tree is an
//! `Assign` node and emits exactly one rectangle.

use std::collections::VecDeque;
use std::fmt;
use std::sync::{Arc, OnceLock};

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::layout::{Extent, Rect, RectLayout, TerminalLabel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NonTerminal {
    Facade,
    GroundFloor,
    UpperBody,
    Attic,
    Floor,
    Tile,
    Cell,
    ShopCell,
    DoorCell,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Symbol {
    NonTerminal(NonTerminal),
    Terminal(TerminalLabel),
}

impl Symbol {
    pub const AXIOM: Symbol = Symbol::NonTerminal(NonTerminal::Facade);

    pub fn name(&self) -> String {
        match self {
            Symbol::NonTerminal(n) => format!("{n:?}"),
            Symbol::Terminal(t) => t.name().to_string(),
        }
    }
}

impl fmt::Display for Symbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl Serialize for Symbol {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.name())
    }
}

use NonTerminal as N;
const fn nt(n: NonTerminal) -> Symbol {
    Symbol::NonTerminal(n)
}
const fn t(l: TerminalLabel) -> Symbol {
    Symbol::Terminal(l)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProductionKind {
    SplitX,
    SplitY,
    RepeatX,
    RepeatY,
    Assign,
}

/// A named child choice of a kind-split production.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChildKind {
    pub name: &'static str,
    pub symbol: Symbol,
}

/// Domain of one structural argument.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ArgDomain {
    /// Inclusive integer range.
    Int { min: u32, max: u32 },
    /// Index into a list of named choices.
    Category { names: Vec<&'static str> },
    /// Real range discretized into `steps` bins; the tree stores the bin index.
    Float { min: f64, max: f64, steps: u32 },
}

impl ArgDomain {
    pub fn contains(&self, v: u32) -> bool {
        match self {
            ArgDomain::Int { min, max } => (*min..=*max).contains(&v),
            ArgDomain::Category { names } => (v as usize) < names.len(),
            ArgDomain::Float { steps, .. } => v < *steps,
        }
    }

    /// All admissible raw values in increasing order.
    pub fn values(&self) -> std::ops::RangeInclusive<u32> {
        match self {
            ArgDomain::Int { min, max } => *min..=*max,
            ArgDomain::Category { names } => 0..=(names.len() as u32 - 1),
            ArgDomain::Float { steps, .. } => 0..=(steps - 1),
        }
    }

    pub fn max_raw(&self) -> u32 {
        *self.values().end()
    }

    /// Snaps a real value to the nearest bin of a `Float` domain.
    pub fn quantize(&self, value: f64) -> Option<u32> {
        match self {
            ArgDomain::Float { min, max, steps } => {
                let span = (*steps - 1).max(1) as f64;
                let f = ((value - min) / (max - min)).clamp(0.0, 1.0);
                Some((f * span).round() as u32)
            }
            _ => None,
        }
    }

    pub fn dequantize(&self, raw: u32) -> Option<f64> {
        match self {
            ArgDomain::Float { min, max, steps } => {
                let span = (*steps - 1).max(1) as f64;
                Some(min + (max - min) * raw as f64 / span)
            }
            _ => None,
        }
    }
}

/// What a production does with its region.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "body", rename_all = "snake_case")]
pub enum ProductionBody {
    /// Fixed ordered children, one sizing weight each.
    Split { axis: Axis, children: Vec<Symbol> },
    /// `count` copies of one child; structural argument: the count.
    Repeat { axis: Axis, child: Symbol, min: u32, max: u32 },
    /// `count` children whose symbols are chosen per child;
    /// structural arguments: the count, then one kind index per child.
    KindSplit { axis: Axis, min: u32, max: u32, kinds: Vec<ChildKind> },
    /// Emits one rectangle.
    Assign { label: TerminalLabel },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ProductionId(pub u16);

impl ProductionId {
    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn name(self) -> String {
        format!("P{}", self.0 + 1)
    }
}

impl fmt::Display for ProductionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "P{}", self.0 + 1)
    }
}

impl std::str::FromStr for ProductionId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.strip_prefix('P')
            .and_then(|n| n.parse::<u16>().ok())
            .filter(|&n| n >= 1)
            .map(|n| ProductionId(n - 1))
            .ok_or_else(|| format!("bad production id `{s}`"))
    }
}

impl Serialize for ProductionId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.name())
    }
}

impl<'de> Deserialize<'de> for ProductionId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(D::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProductionSpec {
    pub id: ProductionId,
    pub name: &'static str,
    pub lhs: Symbol,
    pub kind: ProductionKind,
    #[serde(flatten)]
    pub body: ProductionBody,
}

impl ProductionSpec {
    /// Domains of the structural arguments given the ones already chosen.
    /// Returns `None` once the argument list is complete.
    pub fn next_arg_domain(&self, chosen: &[u32]) -> Option<ArgDomain> {
        match &self.body {
            ProductionBody::Split { .. } | ProductionBody::Assign { .. } => None,
            ProductionBody::Repeat { min, max, .. } => {
                chosen.is_empty().then_some(ArgDomain::Int { min: *min, max: *max })
            }
            ProductionBody::KindSplit { min, max, kinds, .. } => match chosen.first() {
                None => Some(ArgDomain::Int { min: *min, max: *max }),
                Some(&count) if chosen.len() <= count as usize => Some(ArgDomain::Category {
                    names: kinds.iter().map(|k| k.name).collect(),
                }),
                Some(_) => None,
            },
        }
    }

    /// Number of structural arguments implied by a complete argument list prefix.
    pub fn arg_count(&self, structural: &[u32]) -> usize {
        match &self.body {
            ProductionBody::Split { .. } | ProductionBody::Assign { .. } => 0,
            ProductionBody::Repeat { .. } => 1,
            ProductionBody::KindSplit { .. } => {
                1 + structural.first().copied().unwrap_or(0) as usize
            }
        }
    }

    /// Checks structural arguments and returns the ordered child symbols.
    pub fn child_symbols(&self, structural: &[u32]) -> Result<Vec<Symbol>, String> {
        let expect = |n: usize| {
            if structural.len() == n {
                Ok(())
            } else {
                Err(format!(
                    "{} expects {n} structural arguments, got {}",
                    self.id,
                    structural.len()
                ))
            }
        };
        match &self.body {
            ProductionBody::Assign { .. } => expect(0).map(|_| Vec::new()),
            ProductionBody::Split { children, .. } => expect(0).map(|_| children.clone()),
            ProductionBody::Repeat { child, min, max, .. } => {
                expect(1)?;
                let n = structural[0];
                if !(*min..=*max).contains(&n) {
                    return Err(format!("count outside [{min},{max}]: {n}"));
                }
                Ok(vec![*child; n as usize])
            }
            ProductionBody::KindSplit { min, max, kinds, .. } => {
                let n = *structural
                    .first()
                    .ok_or_else(|| format!("{} is missing its count argument", self.id))?;
                if !(*min..=*max).contains(&n) {
                    return Err(format!("count outside [{min},{max}]: {n}"));
                }
                expect(1 + n as usize)?;
                structural[1..]
                    .iter()
                    .map(|&k| {
                        kinds
                            .get(k as usize)
                            .map(|c| c.symbol)
                            .ok_or_else(|| format!("kind index {k} outside [0,{}]", kinds.len() - 1))
                    })
                    .collect()
            }
        }
    }

    pub fn is_assign(&self) -> bool {
        matches!(self.body, ProductionBody::Assign { .. })
    }

    pub fn axis(&self) -> Option<Axis> {
        match &self.body {
            ProductionBody::Split { axis, .. }
            | ProductionBody::Repeat { axis, .. }
            | ProductionBody::KindSplit { axis, .. } => Some(*axis),
            ProductionBody::Assign { .. } => None,
        }
    }

    /// Sizing weights per node equals the number of children.
    pub fn sizing_arity(&self, structural: &[u32]) -> usize {
        match &self.body {
            ProductionBody::Assign { .. } => 0,
            ProductionBody::Split { children, .. } => children.len(),
            ProductionBody::Repeat { .. } => structural.first().copied().unwrap_or(0) as usize,
            ProductionBody::KindSplit { .. } => structural.first().copied().unwrap_or(0) as usize,
        }
    }
}

/// A complete rule set together with its axiom.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Grammar {
    pub axiom: Symbol,
    pub productions: Vec<ProductionSpec>,
}

impl Grammar {
    /// The built-in facade grammar.
    pub fn standard() -> Arc<Grammar> {
        static STANDARD: OnceLock<Arc<Grammar>> = OnceLock::new();
        STANDARD.get_or_init(|| Arc::new(build_standard())).clone()
    }

    pub fn get(&self, id: ProductionId) -> Option<&ProductionSpec> {
        self.productions.get(id.index())
    }

    pub fn len(&self) -> usize {
        self.productions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.productions.is_empty()
    }

    /// Productions applicable to `symbol`, in id order.
    pub fn productions_for(&self, symbol: Symbol) -> impl Iterator<Item = &ProductionSpec> + '_ {
        self.productions.iter().filter(move |p| p.lhs == symbol)
    }

    /// Every symbol that occurs in the grammar.
    pub fn symbols(&self) -> Vec<Symbol> {
        let mut out: Vec<Symbol> = self.productions.iter().map(|p| p.lhs).collect();
        out.sort();
        out.dedup();
        out
    }

    /// Largest raw structural argument value of any production.
    pub fn max_arg_value(&self) -> u32 {
        let mut best = 0;
        for p in &self.productions {
            match &p.body {
                ProductionBody::Repeat { max, .. } => best = best.max(*max),
                ProductionBody::KindSplit { max, kinds, .. } => {
                    best = best.max(*max).max(kinds.len() as u32 - 1)
                }
                _ => {}
            }
        }
        best
    }

    /// Longest structural argument list of any production.
    pub fn max_arg_len(&self) -> usize {
        self.productions
            .iter()
            .map(|p| match &p.body {
                ProductionBody::Repeat { .. } => 1,
                ProductionBody::KindSplit { max, .. } => 1 + *max as usize,
                _ => 0,
            })
            .max()
            .unwrap_or(0)
    }

    /// SHA-256 over the canonical JSON of the production table.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("grammar serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn validate_tree(&self, tree: &DerivationTree) -> ValidityReport {
        let mut report = ValidityReport::default();
        self.check_node(&tree.root, self.axiom, &mut Vec::new(), true, &mut report);
        report
    }

    /// Like [`Grammar::validate_tree`] but ignores sizing entirely.
    pub fn validate_structure(&self, tree: &DerivationTree) -> ValidityReport {
        let mut report = ValidityReport::default();
        self.check_node(&tree.root, self.axiom, &mut Vec::new(), false, &mut report);
        report
    }

    fn check_node(
        &self,
        node: &Node,
        expected: Symbol,
        path: &mut Vec<usize>,
        sizing: bool,
        report: &mut ValidityReport,
    ) {
        let mut push = |kind: ViolationKind, message: String| {
            report.violations.push(Violation { path: path.clone(), kind, message })
        };
        let Some(spec) = self.get(node.prod) else {
            push(ViolationKind::UnknownProduction, format!("unknown production {}", node.prod));
            return;
        };
        if spec.lhs != expected {
            push(
                ViolationKind::SymbolMismatch,
                format!("{} rewrites {} but the slot expects {}", node.prod, spec.lhs, expected),
            );
        }
        if node.children.is_empty() && !spec.is_assign() {
            push(ViolationKind::LeafNotAssign, format!("leaf uses non-assign production {}", node.prod));
        }
        let symbols = match spec.child_symbols(&node.structural) {
            Ok(s) => s,
            Err(msg) => {
                push(ViolationKind::StructuralArgument, msg);
                return;
            }
        };
        if symbols.len() != node.children.len() {
            push(
                ViolationKind::ChildArity,
                format!("{} needs {} children, has {}", node.prod, symbols.len(), node.children.len()),
            );
        }
        if sizing {
            let arity = spec.sizing_arity(&node.structural);
            if node.sizing.len() != arity {
                push(
                    ViolationKind::SizingArity,
                    format!("{} needs {arity} sizing parameters, has {}", node.prod, node.sizing.len()),
                );
            }
            if node.sizing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
                push(ViolationKind::NonPositiveSizing, format!("{} has a non-positive sizing weight", node.prod));
            }
        }
        for (i, (child, sym)) in node.children.iter().zip(symbols).enumerate() {
            path.push(i);
            self.check_node(child, sym, path, sizing, report);
            path.pop();
        }
    }

    /// Executes a tree over `region`, returning leaf rectangles in depth-first order.
    pub fn execute(&self, tree: &DerivationTree, region: Extent) -> Result<RectLayout, GrammarError> {
        if !(region.w > 0.0 && region.h > 0.0) {
            return Err(GrammarError::EmptyRegion);
        }
        let report = self.validate_tree(tree);
        if !report.is_empty() {
            return Err(if report.violations.iter().all(|v| v.kind == ViolationKind::NonPositiveSizing) {
                GrammarError::NonPositiveSizing
            } else {
                GrammarError::InvalidTree(report)
            });
        }
        let mut rects = Vec::new();
        self.execute_node(&tree.root, region, &mut rects);
        Ok(RectLayout::new(rects))
    }

    fn execute_node(&self, node: &Node, region: Extent, out: &mut Vec<Rect>) {
        let spec = &self.productions[node.prod.index()];
        match (&spec.body, spec.axis()) {
            (ProductionBody::Assign { label }, _) => {
                out.push(Rect::new(*label, region.x, region.y, region.w, region.h))
            }
            (_, Some(axis)) => {
                for (child, sub) in node.children.iter().zip(split_region(region, axis, &node.sizing)) {
                    self.execute_node(child, sub, out);
                }
            }
            _ => unreachable!("non-assign productions have an axis"),
        }
    }

    /// Replaces every sizing vector with uniform weights of 1.
    pub fn default_sizing(&self, tree: &DerivationTree) -> Result<DerivationTree, GrammarError> {
        let report = self.validate_structure(tree);
        if !report.is_empty() {
            return Err(GrammarError::InvalidTree(report));
        }
        let mut out = tree.clone();
        out.root.visit_mut(&mut |n| {
            let arity = self.productions[n.prod.index()].sizing_arity(&n.structural);
            n.sizing = vec![1.0; arity];
        });
        Ok(out)
    }

    /// Machine-readable production table.
    pub fn table_json(&self) -> serde_json::Value {
        serde_json::json!({
            "axiom": self.axiom,
            "hash": self.hash(),
            "productions": self.productions,
        })
    }
}

/// Divides `region` along `axis` proportionally to `weights`. The last child
/// ends exactly at the region boundary.
pub fn split_region(region: Extent, axis: Axis, weights: &[f64]) -> Vec<Extent> {
    let total: f64 = weights.iter().sum();
    let (start, len) = match axis {
        Axis::X => (region.x, region.w),
        Axis::Y => (region.y, region.h),
    };
    let mut acc = 0.0;
    let mut lo = start;
    let n = weights.len();
    weights
        .iter()
        .enumerate()
        .map(|(i, w)| {
            acc += w;
            let hi = if i + 1 == n { start + len } else { start + len * (acc / total) };
            let e = match axis {
                Axis::X => Extent::new(lo, region.y, hi - lo, region.h),
                Axis::Y => Extent::new(region.x, lo, region.w, hi - lo),
            };
            lo = hi;
            e
        })
        .collect()
}

/// One production application.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub prod: ProductionId,
    #[serde(default)]
    pub structural: Vec<u32>,
    #[serde(default)]
    pub sizing: Vec<f64>,
    #[serde(default)]
    pub children: Vec<Node>,
}

impl Node {
    pub fn new(prod: ProductionId, structural: Vec<u32>, sizing: Vec<f64>, children: Vec<Node>) -> Self {
        Self { prod, structural, sizing, children }
    }

    pub fn leaf(prod: ProductionId) -> Self {
        Self::new(prod, Vec::new(), Vec::new(), Vec::new())
    }

    pub fn size(&self) -> usize {
        1 + self.children.iter().map(Node::size).sum::<usize>()
    }

    pub fn depth(&self) -> usize {
        1 + self.children.iter().map(Node::depth).max().unwrap_or(0)
    }

    pub fn visit<'a>(&'a self, f: &mut impl FnMut(&'a Node)) {
        f(self);
        for c in &self.children {
            c.visit(f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut Node)) {
        f(self);
        for c in &mut self.children {
            c.visit_mut(f);
        }
    }

    /// Copy without any sizing information.
    pub fn structure_only(&self) -> Node {
        Node {
            prod: self.prod,
            structural: self.structural.clone(),
            sizing: Vec::new(),
            children: self.children.iter().map(Node::structure_only).collect(),
        }
    }
}

/// The procedure: an ordered tree rooted at the axiom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivationTree {
    pub root: Node,
}

impl DerivationTree {
    pub fn new(root: Node) -> Self {
        Self { root }
    }

    pub fn size(&self) -> usize {
        self.root.size()
    }

    pub fn depth(&self) -> usize {
        self.root.depth()
    }

    /// Nodes in breadth-first order.
    pub fn bfs(&self) -> Vec<&Node> {
        let mut out = Vec::new();
        let mut queue = VecDeque::from([&self.root]);
        while let Some(n) = queue.pop_front() {
            out.push(n);
            queue.extend(n.children.iter());
        }
        out
    }

    pub fn structure_only(&self) -> DerivationTree {
        DerivationTree::new(self.root.structure_only())
    }

    /// True when both trees agree on productions and structural arguments.
    pub fn same_structure(&self, other: &DerivationTree) -> bool {
        self.structure_only() == other.structure_only()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    UnknownProduction,
    SymbolMismatch,
    StructuralArgument,
    ChildArity,
    SizingArity,
    NonPositiveSizing,
    LeafNotAssign,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    /// Child indices from the root.
    pub path: Vec<usize>,
    pub kind: ViolationKind,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidityReport {
    pub violations: Vec<Violation>,
}

impl ValidityReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "at {:?}: {}", v.path, v.message)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GrammarError {
    #[error("invalid derivation tree: {0}")]
    InvalidTree(ValidityReport),
    #[error("sizing parameters must be positive and finite")]
    NonPositiveSizing,
    #[error("execution region must have positive extent")]
    EmptyRegion,
}

/// Executes with the standard grammar over the unit square.
pub fn execute(tree: &DerivationTree) -> Result<RectLayout, GrammarError> {
    Grammar::standard().execute(tree, Extent::UNIT)
}

pub fn validate_tree(tree: &DerivationTree) -> ValidityReport {
    Grammar::standard().validate_tree(tree)
}

pub fn default_sizing(tree: &DerivationTree) -> Result<DerivationTree, GrammarError> {
    Grammar::standard().default_sizing(tree)
}

/// Well-known production ids of the standard grammar.
pub mod prod {
    use super::ProductionId;

    pub const FACADE: ProductionId = ProductionId(0);
    pub const FACADE_ATTIC: ProductionId = ProductionId(1);
    pub const UPPER_FLOORS: ProductionId = ProductionId(2);
    pub const FLOOR_REPEAT: ProductionId = ProductionId(3);
    pub const FLOOR_SPLIT: ProductionId = ProductionId(4);
    pub const GROUND_FLOOR: ProductionId = ProductionId(5);
    pub const TILE: ProductionId = ProductionId(6);
    pub const CELL_WINDOW: ProductionId = ProductionId(7);
    pub const CELL_BALCONY: ProductionId = ProductionId(8);
    pub const TILE_BLANK: ProductionId = ProductionId(9);
    pub const SHOP_CELL: ProductionId = ProductionId(10);
    pub const DOOR_CELL: ProductionId = ProductionId(11);
    pub const ATTIC: ProductionId = ProductionId(12);
    pub const WALL: ProductionId = ProductionId(13);
    pub const WINDOW: ProductionId = ProductionId(14);
    pub const DOOR: ProductionId = ProductionId(15);
    pub const BALCONY: ProductionId = ProductionId(16);
    pub const SHOP: ProductionId = ProductionId(17);

    /// Kind indices of the floor split.
    pub const FLOOR_KIND_TILE: u32 = 0;
    pub const FLOOR_KIND_PIER: u32 = 1;
    /// Kind indices of the ground-floor split.
    pub const GROUND_KIND_SHOP: u32 = 0;
    pub const GROUND_KIND_DOOR: u32 = 1;
    pub const GROUND_KIND_WALL: u32 = 2;
}

fn build_standard() -> Grammar {
    use ProductionBody::*;
    use TerminalLabel::*;
    let specs: Vec<(&'static str, Symbol, ProductionBody)> = vec![
        (
            "Facade -> SplitY(GroundFloor, UpperBody)",
            nt(N::Facade),
            Split { axis: Axis::Y, children: vec![nt(N::GroundFloor), nt(N::UpperBody)] },
        ),
        (
            "Facade -> SplitY(GroundFloor, UpperBody, Attic)",
            nt(N::Facade),
            Split { axis: Axis::Y, children: vec![nt(N::GroundFloor), nt(N::UpperBody), nt(N::Attic)] },
        ),
        (
            "UpperBody -> RepeatY(Floor, n)",
            nt(N::UpperBody),
            Repeat { axis: Axis::Y, child: nt(N::Floor), min: 1, max: 6 },
        ),
        (
            "Floor -> RepeatX(Tile, m)",
            nt(N::Floor),
            Repeat { axis: Axis::X, child: nt(N::Tile), min: 1, max: 8 },
        ),
        (
            "Floor -> SplitX(Tile | Wall, ...)",
            nt(N::Floor),
            KindSplit {
                axis: Axis::X,
                min: 2,
                max: 8,
                kinds: vec![
                    ChildKind { name: "Tile", symbol: nt(N::Tile) },
                    ChildKind { name: "Pier", symbol: t(Wall) },
                ],
            },
        ),
        (
            "GroundFloor -> SplitX(GTile, ...)",
            nt(N::GroundFloor),
            KindSplit {
                axis: Axis::X,
                min: 2,
                max: 8,
                kinds: vec![
                    ChildKind { name: "ShopCell", symbol: nt(N::ShopCell) },
                    ChildKind { name: "DoorCell", symbol: nt(N::DoorCell) },
                    ChildKind { name: "WallCell", symbol: t(Wall) },
                ],
            },
        ),
        (
            "Tile -> SplitX(Wall, Cell, Wall)",
            nt(N::Tile),
            Split { axis: Axis::X, children: vec![t(Wall), nt(N::Cell), t(Wall)] },
        ),
        (
            "Cell -> SplitY(Wall, Window, Wall)",
            nt(N::Cell),
            Split { axis: Axis::Y, children: vec![t(Wall), t(Window), t(Wall)] },
        ),
        (
            "Cell -> SplitY(Balcony, Window, Wall)",
            nt(N::Cell),
            Split { axis: Axis::Y, children: vec![t(Balcony), t(Window), t(Wall)] },
        ),
        ("Tile -> Assign(Wall)", nt(N::Tile), Assign { label: Wall }),
        (
            "ShopCell -> SplitY(Wall, Shop, Wall)",
            nt(N::ShopCell),
            Split { axis: Axis::Y, children: vec![t(Wall), t(Shop), t(Wall)] },
        ),
        (
            "DoorCell -> SplitY(Door, Wall)",
            nt(N::DoorCell),
            Split { axis: Axis::Y, children: vec![t(Door), t(Wall)] },
        ),
        (
            "Attic -> RepeatX(Cell, m)",
            nt(N::Attic),
            Repeat { axis: Axis::X, child: nt(N::Cell), min: 1, max: 8 },
        ),
        ("Wall -> Assign(Wall)", t(Wall), Assign { label: Wall }),
        ("Window -> Assign(Window)", t(Window), Assign { label: Window }),
        ("Door -> Assign(Door)", t(Door), Assign { label: Door }),
        ("Balcony -> Assign(Balcony)", t(Balcony), Assign { label: Balcony }),
        ("Shop -> Assign(Shop)", t(Shop), Assign { label: Shop }),
    ];
    let productions = specs
        .into_iter()
        .enumerate()
        .map(|(i, (name, lhs, body))| {
            let kind = match &body {
                Split { axis: Axis::X, .. } | KindSplit { axis: Axis::X, .. } => ProductionKind::SplitX,
                Split { axis: Axis::Y, .. } | KindSplit { axis: Axis::Y, .. } => ProductionKind::SplitY,
                Repeat { axis: Axis::X, .. } => ProductionKind::RepeatX,
                Repeat { axis: Axis::Y, .. } => ProductionKind::RepeatY,
                Assign { .. } => ProductionKind::Assign,
            };
            ProductionSpec { id: ProductionId(i as u16), name, lhs, kind, body }
        })
        .collect();
    Grammar { axiom: Symbol::AXIOM, productions }
}
