//! Quantitative measures: tree edit distance, production usage frequency,
//! pixel classification error and robustness to input noise.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoder::{infer_procedure, Automaton, DecodeConfig, DecodeError, StepModel};
use crate::generator::{mix_seed, DatasetRecord};
use crate::grammar::{DerivationTree, Grammar, Node, ProductionId};
use crate::layout::{rasterize_labels, RectLayout};
use crate::noise::{inject_noise, NoiseError};
use crate::sizing::{optimize_sizing, OptimizeConfig};

/// Ordered labeled tree used by the edit-distance routine.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabeledTree<L> {
    pub label: L,
    pub children: Vec<LabeledTree<L>>,
}

impl<L> LabeledTree<L> {
    pub fn leaf(label: L) -> Self {
        Self { label, children: Vec::new() }
    }

    pub fn new(label: L, children: Vec<LabeledTree<L>>) -> Self {
        Self { label, children }
    }

    pub fn size(&self) -> usize {
        1 + self.children.iter().map(LabeledTree::size).sum::<usize>()
    }
}

/// Node label for edit distance: production plus its structural arguments, so
/// changing a repeat count or a kind choice costs one relabel.
pub type NodeLabel = (ProductionId, Vec<u32>);

fn labeled(node: &Node) -> LabeledTree<NodeLabel> {
    LabeledTree::new((node.prod, node.structural.clone()), node.children.iter().map(labeled).collect())
}

impl From<&DerivationTree> for LabeledTree<NodeLabel> {
    fn from(t: &DerivationTree) -> Self {
        labeled(&t.root)
    }
}

struct Postorder<'a, L> {
    labels: Vec<&'a L>,
    /// Postorder index of each node's leftmost leaf descendant.
    leftmost: Vec<usize>,
    keyroots: Vec<usize>,
}

impl<'a, L> Postorder<'a, L> {
    fn new(tree: &'a LabeledTree<L>) -> Self {
        let mut p = Postorder { labels: Vec::new(), leftmost: Vec::new(), keyroots: Vec::new() };
        p.visit(tree);
        let mut seen = vec![false; p.labels.len()];
        for i in (0..p.labels.len()).rev() {
            if !seen[p.leftmost[i]] {
                seen[p.leftmost[i]] = true;
                p.keyroots.push(i);
            }
        }
        p.keyroots.reverse();
        p
    }

    fn visit(&mut self, node: &'a LabeledTree<L>) -> usize {
        let mut first = None;
        for c in &node.children {
            let idx = self.visit(c);
            first.get_or_insert(self.leftmost[idx]);
        }
        let me = self.labels.len();
        self.labels.push(&node.label);
        self.leftmost.push(first.unwrap_or(me));
        me
    }
}

/// Unit-cost ordered tree edit distance (insert, delete, relabel), computed
/// with the Zhang–Shasha keyroot dynamic program.
pub fn ordered_edit_distance<L: PartialEq>(a: &LabeledTree<L>, b: &LabeledTree<L>) -> usize {
    let (pa, pb) = (Postorder::new(a), Postorder::new(b));
    let (na, nb) = (pa.labels.len(), pb.labels.len());
    let mut td = vec![0usize; na * nb];
    let mut fd = vec![0usize; (na + 1) * (nb + 1)];
    for &i in &pa.keyroots {
        for &j in &pb.keyroots {
            let (li, lj) = (pa.leftmost[i], pb.leftmost[j]);
            let (rows, cols) = (i - li + 2, j - lj + 2);
            let at = |x: usize, y: usize| x * cols + y;
            for x in 0..rows {
                fd[at(x, 0)] = x;
            }
            for y in 0..cols {
                fd[at(0, y)] = y;
            }
            for x in 1..rows {
                let i1 = li + x - 1;
                for y in 1..cols {
                    let j1 = lj + y - 1;
                    let del = fd[at(x - 1, y)] + 1;
                    let ins = fd[at(x, y - 1)] + 1;
                    if pa.leftmost[i1] == li && pb.leftmost[j1] == lj {
                        let rel = fd[at(x - 1, y - 1)] + usize::from(pa.labels[i1] != pb.labels[j1]);
                        let d = del.min(ins).min(rel);
                        fd[at(x, y)] = d;
                        td[i1 * nb + j1] = d;
                    } else {
                        let (p, q) = (pa.leftmost[i1] - li, pb.leftmost[j1] - lj);
                        fd[at(x, y)] = del.min(ins).min(fd[at(p, q)] + td[i1 * nb + j1]);
                    }
                }
            }
        }
    }
    td[na * nb - 1]
}

/// Edit distance between procedures with structural arguments folded into
/// node labels.
pub fn tree_edit_distance(a: &DerivationTree, b: &DerivationTree) -> usize {
    ordered_edit_distance(&LabeledTree::from(a), &LabeledTree::from(b))
}

/// Distance divided by the ground-truth tree's node count.
pub fn normalized_edit_distance(reconstructed: &DerivationTree, ground_truth: &DerivationTree) -> f64 {
    tree_edit_distance(reconstructed, ground_truth) as f64 / ground_truth.size() as f64
}

/// Per-production usage counts, indexed by production.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencyTable {
    pub counts: Vec<u64>,
}

impl FrequencyTable {
    pub fn get(&self, p: ProductionId) -> u64 {
        self.counts.get(p.index()).copied().unwrap_or(0)
    }
}

pub fn production_frequency<'a>(trees: impl IntoIterator<Item = &'a DerivationTree>) -> FrequencyTable {
    let mut counts = vec![0u64; Grammar::standard().len()];
    for t in trees {
        t.root.visit(&mut |n| {
            let i = n.prod.index();
            if i >= counts.len() {
                counts.resize(i + 1, 0);
            }
            counts[i] += 1;
        });
    }
    FrequencyTable { counts }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyRow {
    pub production: ProductionId,
    pub ground_truth: u64,
    pub reconstructed: u64,
    /// `(reconstructed - ground_truth) / inferences`.
    pub normalized_difference: f64,
}

/// Ground-truth vs reconstruction usage, one row per production.
pub fn paired_frequency(ground_truth: &[DerivationTree], reconstructed: &[DerivationTree]) -> Vec<FrequencyRow> {
    let gt = production_frequency(ground_truth);
    let rc = production_frequency(reconstructed);
    let n = gt.counts.len().max(rc.counts.len());
    let inferences = reconstructed.len().max(1) as f64;
    (0..n)
        .map(|i| {
            let p = ProductionId(i as u16);
            let (g, r) = (gt.get(p), rc.get(p));
            FrequencyRow {
                production: p,
                ground_truth: g,
                reconstructed: r,
                normalized_difference: (r as f64 - g as f64) / inferences,
            }
        })
        .collect()
}

/// Fraction of pixels whose labels differ when both layouts are hard
/// rasterized at `res`×`res`.
///
/// # Panics
/// If `res < 16`.
pub fn pixel_classification_error(a: &RectLayout, b: &RectLayout, res: usize) -> f64 {
    assert!(res >= 16, "classification error needs res >= 16, got {res}");
    rasterize_labels(a, res, res).mismatch_fraction(&rasterize_labels(b, res, res))
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Median; the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

pub fn histogram(values: impl IntoIterator<Item = usize>) -> BTreeMap<usize, usize> {
    let mut h = BTreeMap::new();
    for v in values {
        *h.entry(v).or_insert(0) += 1;
    }
    h
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum EvalError {
    #[error("noise levels must be ascending and start at 0")]
    BadLevels,
    #[error("instance {index}: {source}")]
    Decode { index: usize, source: DecodeError },
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error("sizing fit failed: {0}")]
    Optimize(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseCurvePoint {
    pub level: f64,
    pub mean_ted: f64,
    pub samples: usize,
    /// Mean measured pixel difference of the corrupted inputs.
    pub mean_achieved: f64,
    /// Inputs whose level was not reached within tolerance (closest used).
    pub unreachable: usize,
}

/// Infers every test layout and returns the tree edit distances to the
/// ground truth, in order.
pub fn inference_distances<M: StepModel>(
    model: &M,
    automaton: &Automaton,
    testset: &[DatasetRecord],
    decode: &DecodeConfig,
) -> Result<Vec<usize>, EvalError> {
    testset
        .iter()
        .enumerate()
        .map(|(index, rec)| {
            let out = infer_procedure(model, automaton, &rec.layout, decode)
                .map_err(|source| EvalError::Decode { index, source })?;
            Ok(tree_edit_distance(&out.tree, &rec.tree))
        })
        .collect()
}

/// Mean TED per noise level. Each instance uses the same jitter directions at
/// every level, so level 0 reproduces clean inference exactly.
pub fn noise_robustness_curve<M: StepModel>(
    model: &M,
    automaton: &Automaton,
    testset: &[DatasetRecord],
    levels: &[f64],
    seed: u64,
    eval_res: usize,
    decode: &DecodeConfig,
) -> Result<Vec<NoiseCurvePoint>, EvalError> {
    if levels.first() != Some(&0.0) || levels.windows(2).any(|w| w[1] <= w[0]) {
        return Err(EvalError::BadLevels);
    }
    let mut out = Vec::with_capacity(levels.len());
    for &level in levels {
        let mut teds = Vec::with_capacity(testset.len());
        let mut achieved = Vec::with_capacity(testset.len());
        let mut unreachable = 0;
        for (index, rec) in testset.iter().enumerate() {
            let noisy = match inject_noise(&rec.layout, level, mix_seed(seed, index as u64), eval_res) {
                Ok(n) => n,
                Err(e) => {
                    unreachable += 1;
                    e.closest().ok_or(e)?
                }
            };
            let inferred = infer_procedure(model, automaton, &noisy.layout, decode)
                .map_err(|source| EvalError::Decode { index, source })?;
            teds.push(tree_edit_distance(&inferred.tree, &rec.tree) as f64);
            achieved.push(noisy.achieved);
        }
        out.push(NoiseCurvePoint {
            level,
            mean_ted: mean(&teds),
            samples: testset.len(),
            mean_achieved: mean(&achieved),
            unreachable,
        });
    }
    Ok(out)
}

/// Settings for a full test-set evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub decode: DecodeConfig,
    /// Fit sizing to the target before measuring pixel error.
    pub optimize: Option<OptimizeConfig>,
    /// Raster side for the pixel classification error.
    pub error_resolution: usize,
    /// Empty skips the noise curve.
    pub noise_levels: Vec<f64>,
    pub noise_seed: u64,
    pub noise_resolution: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            decode: DecodeConfig::default(),
            optimize: Some(OptimizeConfig::default()),
            error_resolution: 256,
            noise_levels: vec![0.0, 0.05, 0.1, 0.15, 0.2],
            noise_seed: 0,
            noise_resolution: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub ted: Vec<usize>,
    pub mean_ted: f64,
    pub median_ted: f64,
    pub ted_histogram: BTreeMap<usize, usize>,
    /// TED divided by ground-truth node count.
    pub normalized_ted: Vec<f64>,
    /// Normalized TED bucketed in steps of 0.05 (key = bucket index).
    pub normalized_ted_histogram: BTreeMap<usize, usize>,
    pub frequency: Vec<FrequencyRow>,
    pub pixel_error: Vec<f64>,
    /// Pixel error bucketed by whole percent.
    pub pixel_error_histogram: BTreeMap<usize, usize>,
    pub noise_curve: Vec<NoiseCurvePoint>,
}

/// Infers every test instance and gathers all four measures.
pub fn evaluate<M: StepModel>(
    model: &M,
    automaton: &Automaton,
    testset: &[DatasetRecord],
    opts: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    let mut ted = Vec::with_capacity(testset.len());
    let mut normalized_ted = Vec::with_capacity(testset.len());
    let mut recon = Vec::with_capacity(testset.len());
    let mut pixel_error = Vec::with_capacity(testset.len());
    for (index, rec) in testset.iter().enumerate() {
        let out = infer_procedure(model, automaton, &rec.layout, &opts.decode)
            .map_err(|source| EvalError::Decode { index, source })?;
        ted.push(tree_edit_distance(&out.tree, &rec.tree));
        normalized_ted.push(normalized_edit_distance(&out.tree, &rec.tree));
        let fitted = match &opts.optimize {
            Some(cfg) => optimize_sizing(&out.tree, &rec.layout, cfg).map_err(|e| EvalError::Optimize(e.to_string()))?.0,
            None => out.tree.clone(),
        };
        let layout = crate::grammar::execute(&fitted).map_err(|e| EvalError::Optimize(e.to_string()))?;
        pixel_error.push(pixel_classification_error(&layout, &rec.layout, opts.error_resolution));
        recon.push(out.tree);
    }
    let gt: Vec<DerivationTree> = testset.iter().map(|r| r.tree.clone()).collect();
    let teds: Vec<f64> = ted.iter().map(|&d| d as f64).collect();
    let noise_curve = if opts.noise_levels.is_empty() {
        Vec::new()
    } else {
        noise_robustness_curve(
            model,
            automaton,
            testset,
            &opts.noise_levels,
            opts.noise_seed,
            opts.noise_resolution,
            &opts.decode,
        )?
    };
    Ok(EvalReport {
        samples: testset.len(),
        mean_ted: mean(&teds),
        median_ted: median(&teds),
        ted_histogram: histogram(ted.iter().copied()),
        normalized_ted_histogram: histogram(normalized_ted.iter().map(|&v| (v / 0.05).floor() as usize)),
        pixel_error_histogram: histogram(pixel_error.iter().map(|&v| (v * 100.0).floor() as usize)),
        frequency: paired_frequency(&gt, &recon),
        ted,
        normalized_ted,
        pixel_error,
        noise_curve,
    })
}
