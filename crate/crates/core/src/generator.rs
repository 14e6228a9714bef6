//! Heuristic facade generator: samples a style, then derives a coherent facade.
//!
//! Production choice follows per-non-terminal categorical weights derived from
//! the style; arguments are sampled uniformly within the style ranges. Both are
//! driven by a single seeded stream so a `(style, seed)` pair is reproducible.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grammar::prod::*;
use crate::grammar::{DerivationTree, Grammar, Node};
use crate::layout::RectLayout;
use crate::tokenizer::{MAX_INPUT_LEN, MAX_OUTPUT_LEN};

pub const SCHEMA_VERSION: u32 = 1;
pub const STYLE_POLICY: &str = "default";

/// Rectangle budget implied by the encoder input length.
pub const MAX_RECTS: usize = MAX_INPUT_LEN / 5;

/// Style-specific architectural parameters guiding one facade.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleParams {
    pub floor_count_range: [u32; 2],
    pub tiles_per_floor_range: [u32; 2],
    pub ground_floor_height_range: [f64; 2],
    pub balcony_probability: f64,
    pub attic_probability: f64,
    pub shop_probability: f64,
    pub window_margin_range: [f64; 2],
    pub column_symmetry: bool,
}

impl Default for StyleParams {
    fn default() -> Self {
        Self {
            floor_count_range: [2, 4],
            tiles_per_floor_range: [3, 5],
            ground_floor_height_range: [0.2, 0.3],
            balcony_probability: 0.3,
            attic_probability: 0.2,
            shop_probability: 0.5,
            window_margin_range: [0.15, 0.3],
            column_symmetry: true,
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
#[error("invalid style: {0}")]
pub struct StyleError(pub String);

impl StyleParams {
    pub fn validate(&self) -> Result<(), StyleError> {
        let [f0, f1] = self.floor_count_range;
        let [t0, t1] = self.tiles_per_floor_range;
        let [g0, g1] = self.ground_floor_height_range;
        let [m0, m1] = self.window_margin_range;
        let err = |m: &str| Err(StyleError(m.to_string()));
        if !(1 <= f0 && f0 <= f1 && f1 <= 6) {
            return err("floor_count_range must lie in [1,6]");
        }
        if !(1 <= t0 && t0 <= t1 && t1 <= 8) {
            return err("tiles_per_floor_range must lie in [1,8]");
        }
        if !(0.05 <= g0 && g0 <= g1 && g1 <= 0.6) {
            return err("ground_floor_height_range must lie in [0.05,0.6]");
        }
        if !(0.02 <= m0 && m0 <= m1 && m1 <= 0.4) {
            return err("window_margin_range must lie in [0.02,0.4]");
        }
        for p in [self.balcony_probability, self.attic_probability, self.shop_probability] {
            if !(0.0..=1.0).contains(&p) {
                return err("probabilities must lie in [0,1]");
            }
        }
        Ok(())
    }
}

fn uniform_u32(rng: &mut ChaCha8Rng, [lo, hi]: [u32; 2]) -> u32 {
    rng.random_range(lo..=hi)
}

fn uniform_f64(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Samples a style deterministically from `seed`.
pub fn sample_style(seed: u64) -> StyleParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5354_594c_4531);
    let f0 = rng.random_range(1..=5);
    let f1 = (f0 + rng.random_range(0..=2)).min(6);
    let t0 = rng.random_range(1..=7);
    let t1 = (t0 + rng.random_range(0..=2)).min(8);
    let g0 = rng.random_range(0.15..0.35);
    let m0 = rng.random_range(0.1..0.25);
    StyleParams {
        floor_count_range: [f0, f1],
        tiles_per_floor_range: [t0, t1],
        ground_floor_height_range: [g0, g0 + rng.random_range(0.0..0.1)],
        balcony_probability: rng.random_range(0.0..=1.0),
        attic_probability: rng.random_range(0.0..0.5),
        shop_probability: rng.random_range(0.0..=1.0),
        window_margin_range: [m0, m0 + rng.random_range(0.0..0.1)],
        column_symmetry: rng.random_bool(0.7),
    }
}

/// One generated (procedure, segmentation) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: u64,
    pub seed: u64,
    pub style: StyleParams,
    pub tree: DerivationTree,
    pub layout: RectLayout,
}

/// Layout of a floor shared by all floors when columns are symmetric.
#[derive(Debug, Clone)]
struct FloorPlan {
    /// `None` for a plain repeat of tiles, otherwise per-child kinds.
    kinds: Option<Vec<u32>>,
    tiles: u32,
    blank_columns: Vec<bool>,
}

fn plan_floor(rng: &mut ChaCha8Rng, tiles: u32, blank_rate: f64) -> FloorPlan {
    if tiles >= 2 && rng.random_bool(0.35) {
        let kinds: Vec<u32> = match rng.random_range(0..3) {
            // End piers.
            0 if tiles >= 3 => (0..tiles)
                .map(|i| if i == 0 || i + 1 == tiles { FLOOR_KIND_PIER } else { FLOOR_KIND_TILE })
                .collect(),
            // Alternating tiles and piers, starting with a tile.
            1 => (0..tiles).map(|i| if i % 2 == 1 { FLOOR_KIND_PIER } else { FLOOR_KIND_TILE }).collect(),
            // Central pier.
            _ => (0..tiles)
                .map(|i| if tiles >= 3 && i == tiles / 2 { FLOOR_KIND_PIER } else { FLOOR_KIND_TILE })
                .collect(),
        };
        FloorPlan { kinds: Some(kinds), tiles, blank_columns: vec![false; tiles as usize] }
    } else {
        let blank_columns = (0..tiles).map(|_| tiles > 1 && rng.random_bool(blank_rate)).collect();
        FloorPlan { kinds: None, tiles, blank_columns }
    }
}

struct FloorStyle {
    margin: f64,
    sill: f64,
    lintel: f64,
    balcony: bool,
    balcony_height: f64,
}

fn leaf(p: crate::grammar::ProductionId) -> Node {
    Node::leaf(p)
}

fn cell(fs: &FloorStyle) -> Node {
    if fs.balcony {
        Node::new(
            CELL_BALCONY,
            vec![],
            vec![fs.balcony_height, 1.0 - fs.balcony_height - fs.lintel, fs.lintel],
            vec![leaf(BALCONY), leaf(WINDOW), leaf(WALL)],
        )
    } else {
        Node::new(
            CELL_WINDOW,
            vec![],
            vec![fs.sill, 1.0 - fs.sill - fs.lintel, fs.lintel],
            vec![leaf(WALL), leaf(WINDOW), leaf(WALL)],
        )
    }
}

fn window_tile(fs: &FloorStyle) -> Node {
    Node::new(
        TILE,
        vec![],
        vec![fs.margin, 1.0 - 2.0 * fs.margin, fs.margin],
        vec![leaf(WALL), cell(fs), leaf(WALL)],
    )
}

fn jitter(rng: &mut ChaCha8Rng, spread: f64) -> f64 {
    1.0 + rng.random_range(-spread..=spread)
}

fn build_floor(rng: &mut ChaCha8Rng, plan: &FloorPlan, fs: &FloorStyle) -> Node {
    match &plan.kinds {
        Some(kinds) => {
            let mut structural = vec![plan.tiles];
            structural.extend(kinds);
            let sizing = kinds
                .iter()
                .map(|&k| if k == FLOOR_KIND_PIER { rng.random_range(0.3..0.7) } else { jitter(rng, 0.05) })
                .collect();
            let children = kinds
                .iter()
                .map(|&k| if k == FLOOR_KIND_PIER { leaf(WALL) } else { window_tile(fs) })
                .collect();
            Node::new(FLOOR_SPLIT, structural, sizing, children)
        }
        None => {
            let sizing = (0..plan.tiles).map(|_| jitter(rng, 0.05)).collect();
            let children = plan
                .blank_columns
                .iter()
                .map(|&blank| if blank { leaf(TILE_BLANK) } else { window_tile(fs) })
                .collect();
            Node::new(FLOOR_REPEAT, vec![plan.tiles], sizing, children)
        }
    }
}

fn build_ground(rng: &mut ChaCha8Rng, style: &StyleParams, cells: u32) -> Node {
    let cells = cells.clamp(2, 8);
    let door = rng.random_range(0..cells);
    let kinds: Vec<u32> = (0..cells)
        .map(|i| {
            if i == door {
                GROUND_KIND_DOOR
            } else if rng.random_bool(style.shop_probability) {
                GROUND_KIND_SHOP
            } else {
                GROUND_KIND_WALL
            }
        })
        .collect();
    let shop_base = rng.random_range(0.08..0.2);
    let shop_top = rng.random_range(0.12..0.25);
    let door_height = rng.random_range(0.55..0.8);
    let mut sizing = Vec::with_capacity(cells as usize);
    let mut children = Vec::with_capacity(cells as usize);
    for &k in &kinds {
        match k {
            GROUND_KIND_DOOR => {
                sizing.push(rng.random_range(0.6..1.0));
                children.push(Node::new(DOOR_CELL, vec![], vec![door_height, 1.0 - door_height], vec![leaf(DOOR), leaf(WALL)]));
            }
            GROUND_KIND_SHOP => {
                sizing.push(rng.random_range(0.8..1.2));
                children.push(Node::new(
                    SHOP_CELL,
                    vec![],
                    vec![shop_base, 1.0 - shop_base - shop_top, shop_top],
                    vec![leaf(WALL), leaf(SHOP), leaf(WALL)],
                ));
            }
            _ => {
                sizing.push(rng.random_range(0.4..1.0));
                children.push(leaf(WALL));
            }
        }
    }
    let mut structural = vec![cells];
    structural.extend(kinds);
    Node::new(GROUND_FLOOR, structural, sizing, children)
}

fn floor_style(rng: &mut ChaCha8Rng, style: &StyleParams, allow_balcony: bool) -> FloorStyle {
    FloorStyle {
        margin: uniform_f64(rng, style.window_margin_range),
        sill: rng.random_range(0.15..0.3),
        lintel: rng.random_range(0.15..0.3),
        balcony: allow_balcony && rng.random_bool(style.balcony_probability),
        balcony_height: rng.random_range(0.2..0.35),
    }
}

fn derive(rng: &mut ChaCha8Rng, style: &StyleParams) -> DerivationTree {
    let has_attic = rng.random_bool(style.attic_probability);
    let floors = uniform_u32(rng, style.floor_count_range);
    let shared_tiles = uniform_u32(rng, style.tiles_per_floor_range);
    let blank_rate = if rng.random_bool(0.2) { 0.3 } else { 0.0 };
    let shared_plan = plan_floor(rng, shared_tiles, blank_rate);

    let ground_cells = if style.column_symmetry { shared_tiles } else { uniform_u32(rng, style.tiles_per_floor_range) };
    let ground = build_ground(rng, style, ground_cells);

    let mut floor_nodes = Vec::with_capacity(floors as usize);
    for _ in 0..floors {
        let plan = if style.column_symmetry {
            shared_plan.clone()
        } else {
            let tiles = uniform_u32(rng, style.tiles_per_floor_range);
            plan_floor(rng, tiles, blank_rate)
        };
        let fs = floor_style(rng, style, true);
        floor_nodes.push(build_floor(rng, &plan, &fs));
    }
    let floor_sizing = (0..floors).map(|_| jitter(rng, 0.1)).collect();
    let upper = Node::new(UPPER_FLOORS, vec![floors], floor_sizing, floor_nodes);
    let ground_h = uniform_f64(rng, style.ground_floor_height_range);

    let root = if has_attic {
        let cells = shared_tiles.clamp(1, 8);
        let fs = floor_style(rng, style, false);
        let attic = Node::new(
            ATTIC,
            vec![cells],
            (0..cells).map(|_| jitter(rng, 0.05)).collect(),
            (0..cells).map(|_| cell(&fs)).collect(),
        );
        let attic_h = rng.random_range(0.08..0.14);
        Node::new(FACADE_ATTIC, vec![], vec![ground_h, 1.0 - ground_h - attic_h, attic_h], vec![ground, upper, attic])
    } else {
        Node::new(FACADE, vec![], vec![ground_h, 1.0 - ground_h], vec![ground, upper])
    };
    DerivationTree::new(root)
}

/// Number of rectangles a tree executes to.
fn leaf_count(node: &Node) -> usize {
    if node.children.is_empty() {
        1
    } else {
        node.children.iter().map(leaf_count).sum()
    }
}

/// Output sequence length: BOS, one group per node (production, arguments, SEP), EOS.
fn output_len(tree: &DerivationTree) -> usize {
    let mut n = 2;
    tree.root.visit(&mut |node| n += 2 + node.structural.len());
    n
}

fn fits_budget(tree: &DerivationTree) -> bool {
    leaf_count(&tree.root) <= MAX_RECTS && output_len(tree) <= MAX_OUTPUT_LEN
}

/// Shrinks the style one step toward a smaller facade: tiles first, then floors.
fn shrink(style: &mut StyleParams) -> bool {
    let [t0, t1] = &mut style.tiles_per_floor_range;
    if *t1 > 1 {
        *t1 -= 1;
        *t0 = (*t0).min(*t1);
        return true;
    }
    let [f0, f1] = &mut style.floor_count_range;
    if *f1 > 1 {
        *f1 -= 1;
        *f0 = (*f0).min(*f1);
        return true;
    }
    false
}

/// Derives one facade. Facades that would exceed the sequence budgets are
/// re-derived with progressively fewer tiles (then floors) from the same stream.
pub fn generate_facade(style: &StyleParams, seed: u64) -> Result<DatasetRecord, StyleError> {
    style.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut effective = style.clone();
    let tree = loop {
        let tree = derive(&mut rng, &effective);
        if fits_budget(&tree) || !shrink(&mut effective) {
            break tree;
        }
    };
    let layout = crate::grammar::execute(&tree).expect("generator emits valid trees");
    Ok(DatasetRecord { id: 0, seed, style: style.clone(), tree, layout })
}

/// SplitMix64 finalizer, used to derive per-record seeds.
pub fn mix_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Record `index` of the dataset generated from `master_seed`.
pub fn record_at(master_seed: u64, index: u64) -> DatasetRecord {
    let seed = mix_seed(master_seed, index);
    let style = sample_style(seed);
    let mut rec = generate_facade(&style, seed).expect("sampled styles are valid");
    rec.id = index;
    rec
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub count: u64,
    /// Total applications of each production.
    pub production_counts: BTreeMap<String, u64>,
    /// Number of records using each production at least once.
    pub production_samples: BTreeMap<String, u64>,
    pub rect_count_histogram: BTreeMap<usize, u64>,
    pub node_count_histogram: BTreeMap<usize, u64>,
}

impl DatasetStats {
    pub fn add(&mut self, rec: &DatasetRecord) {
        self.count += 1;
        let mut used = BTreeMap::new();
        rec.tree.root.visit(&mut |n| *used.entry(n.prod.name()).or_insert(0u64) += 1);
        for (name, c) in used {
            *self.production_counts.entry(name.clone()).or_default() += c;
            *self.production_samples.entry(name).or_default() += 1;
        }
        *self.rect_count_histogram.entry(rec.layout.len()).or_default() += 1;
        *self.node_count_histogram.entry(rec.tree.size()).or_default() += 1;
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset count must be at least 1")]
    EmptyDataset,
    #[error("record sink failed: {0}")]
    SinkFailure(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed dataset line {line}: {detail}")]
    Malformed { line: usize, detail: String },
    #[error("dataset was generated with grammar {found}, expected {expected}")]
    GrammarMismatch { expected: String, found: String },
}

/// Generates `count` records and hands them to `sink` in index order. Work is
/// split across `workers` threads; records depend only on `(master_seed, index)`.
pub fn generate_dataset<E: std::fmt::Display>(
    count: u64,
    master_seed: u64,
    workers: usize,
    mut sink: impl FnMut(DatasetRecord) -> Result<(), E>,
) -> Result<DatasetStats, DatasetError> {
    if count == 0 {
        return Err(DatasetError::EmptyDataset);
    }
    let workers = workers.max(1);
    let chunk = 256u64.max(workers as u64);
    let mut stats = DatasetStats::default();
    let mut start = 0u64;
    while start < count {
        let end = (start + chunk * workers as u64).min(count);
        let per = (end - start).div_ceil(workers as u64);
        let batches: Vec<Vec<DatasetRecord>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers as u64)
                .map(|w| {
                    let lo = (start + w * per).min(end);
                    let hi = (lo + per).min(end);
                    s.spawn(move || (lo..hi).map(|i| record_at(master_seed, i)).collect::<Vec<_>>())
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("generator worker panicked")).collect()
        });
        for rec in batches.into_iter().flatten() {
            stats.add(&rec);
            sink(rec).map_err(|e| DatasetError::SinkFailure(e.to_string()))?;
        }
        start = end;
    }
    Ok(stats)
}

/// First line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub schema_version: u32,
    pub grammar_hash: String,
    pub style_policy: String,
    pub count: u64,
    pub master_seed: u64,
}

impl DatasetHeader {
    pub fn new(count: u64, master_seed: u64) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            grammar_hash: Grammar::standard().hash(),
            style_policy: STYLE_POLICY.to_string(),
            count,
            master_seed,
        }
    }
}

/// Writes a JSONL dataset (header line, then one record per line).
pub fn write_dataset(
    out: &mut impl Write,
    count: u64,
    master_seed: u64,
    workers: usize,
) -> Result<DatasetStats, DatasetError> {
    serde_json::to_writer(&mut *out, &DatasetHeader::new(count, master_seed))
        .map_err(|e| DatasetError::SinkFailure(e.to_string()))?;
    out.write_all(b"\n")?;
    generate_dataset(count, master_seed, workers, |rec| -> Result<(), String> {
        serde_json::to_writer(&mut *out, &rec).map_err(|e| e.to_string())?;
        out.write_all(b"\n").map_err(|e| e.to_string())
    })
}

/// Reads a JSONL dataset written by [`write_dataset`].
pub fn read_dataset(input: impl BufRead) -> Result<(DatasetHeader, Vec<DatasetRecord>), DatasetError> {
    let mut lines = input.lines().enumerate();
    let (_, first) = lines.next().ok_or(DatasetError::Malformed { line: 1, detail: "empty file".into() })?;
    let header: DatasetHeader =
        serde_json::from_str(&first?).map_err(|e| DatasetError::Malformed { line: 1, detail: e.to_string() })?;
    let expected = Grammar::standard().hash();
    if header.grammar_hash != expected {
        return Err(DatasetError::GrammarMismatch { expected, found: header.grammar_hash });
    }
    let mut records = Vec::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str(&line).map_err(|e| DatasetError::Malformed { line: i + 1, detail: e.to_string() })?,
        );
    }
    Ok((header, records))
}
