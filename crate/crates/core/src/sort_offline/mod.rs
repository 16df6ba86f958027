//! Supervised decision-tree sorter and the L1 template baseline.
//!
//! A channel model is one segmentation pattern plus three signed 8-bit
//! boundaries (`4 + 3·8 = 28` bits). Classifying a spike compares its two
//! features against the three boundaries and looks up the 3-bit result in
//! the pattern's leaf map.
//!
//! Training sweeps every pattern in both orientations over a candidate set
//! per axis (1-D KDE valleys and a uniform 8-LSB grid) and keeps the choice
//! with the highest training accuracy. The search is exact: each subtree of
//! a split is optimized independently inside its region, using per-label
//! prefix sums over the candidate cells.

pub mod kde;
pub mod patterns;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::{extract_features, FeatureSpec, SpikeWindow, WINDOW_LEN};
use crate::sort_online::interior_valleys;

pub use kde::{default_bandwidth, fit_kde, marginal_kde, KdeGrid};
pub use patterns::{enumerate_patterns, Child, SegmentationPattern, SplitNode, SplitTree};

pub const MAX_CLUSTERS: usize = 4;
pub const MIN_SAMPLES_PER_LABEL: usize = 10;
pub const GRID_STEP: i16 = 8;
/// Pattern id (4 bits) and three 8-bit boundaries.
pub const TREE_MODEL_BITS: u32 = 4 + 3 * 8;

#[derive(Debug, Error)]
pub enum SortError {
    #[error("no training points")]
    EmptyInput,
    #[error("{0} distinct labels; at most {MAX_CLUSTERS} clusters per channel are supported")]
    TooManyLabels(usize),
    #[error("label {label} has {count} samples, need at least {MIN_SAMPLES_PER_LABEL}")]
    TooFewSamples { label: u8, count: usize },
    #[error("feature pair sweep needs at least two labels")]
    SingleLabel,
    #[error("invalid KDE bandwidth {0}")]
    Bandwidth(f64),
    #[error("windows and labels differ in length ({windows} vs {labels})")]
    LengthMismatch { windows: usize, labels: usize },
    #[error("invalid packed model {0:?}")]
    Packed(String),
    #[error("L1 model needs at least one template")]
    NoTemplates,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledPoint {
    pub f1: i8,
    pub f2: i8,
    pub label: u8,
}

/// Instrumented operation counts of the classifiers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SortOps {
    pub comparisons: u64,
    pub add_sub: u64,
    pub lookups: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSorterModel {
    pub feature_spec: FeatureSpec,
    pub pattern_id: u8,
    /// Comparisons use the pattern's transpose (features exchanged).
    pub axis_swap: bool,
    /// Boundaries in the representative tree's preorder.
    pub boundaries: [i8; 3],
    /// Bit `l` set: leaf `l` received training data.
    pub valid_mask: u8,
    /// Neuron id reported for each leaf.
    pub leaf_labels: [u8; 4],
}

impl ChannelSorterModel {
    pub fn pattern(&self) -> &'static SegmentationPattern {
        &enumerate_patterns()[self.pattern_id as usize]
    }

    /// Pattern id in the top 4 bits, then the boundaries in order.
    pub fn pack(&self) -> u32 {
        let b = self.boundaries.map(|v| v as u8 as u32);
        (self.pattern_id as u32) << 24 | b[0] << 16 | b[1] << 8 | b[2]
    }

    pub fn packed_hex(&self) -> String {
        format!("{:07x}", self.pack())
    }

    pub fn unpack_hex(hex: &str) -> Result<(u8, [i8; 3]), SortError> {
        let bad = || SortError::Packed(hex.to_string());
        if hex.len() != 7 {
            return Err(bad());
        }
        let v = u32::from_str_radix(hex, 16).map_err(|_| bad())?;
        let pattern_id = (v >> 24) as u8;
        if pattern_id as usize >= enumerate_patterns().len() {
            return Err(bad());
        }
        Ok((pattern_id, [(v >> 16) as u8 as i8, (v >> 8) as u8 as i8, v as u8 as i8]))
    }

    /// Leaf reached by the features, counting the comparisons and lookup.
    pub fn leaf(&self, f1: i8, f2: i8, ops: &mut SortOps) -> u8 {
        let p = self.pattern();
        let f = [f1, f2];
        let swap = self.axis_swap as u8;
        let mut code = 0u8;
        for (k, node) in p.tree.nodes.iter().enumerate() {
            ops.comparisons += 1;
            if f[(node.axis ^ swap) as usize] >= self.boundaries[k] {
                code |= 1 << k;
            }
        }
        ops.lookups += 1;
        p.leaf_map[code as usize]
    }

    pub fn footprint_bits(&self) -> u32 {
        TREE_MODEL_BITS
    }
}

/// Neuron id for one spike, or `None` for a leaf that saw no training data.
pub fn classify_spike(model: &ChannelSorterModel, f1: i8, f2: i8, ops: &mut SortOps) -> Option<u8> {
    let leaf = model.leaf(f1, f2, ops);
    (model.valid_mask >> leaf & 1 == 1).then(|| model.leaf_labels[leaf as usize])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct L1TemplateModel {
    pub feature_spec: FeatureSpec,
    pub templates: Vec<(i8, i8)>,
    pub labels: Vec<u8>,
}

impl L1TemplateModel {
    pub fn footprint_bits(&self) -> u32 {
        16 * self.templates.len() as u32
    }
}

/// Per-label mean feature pair, rounded to the nearest LSB.
pub fn train_l1(points: &[LabeledPoint], spec: FeatureSpec) -> Result<L1TemplateModel, SortError> {
    let labels = check_labels(points)?;
    let templates = labels
        .iter()
        .map(|&l| {
            let (mut s1, mut s2, mut n) = (0i64, 0i64, 0i64);
            for p in points.iter().filter(|p| p.label == l) {
                s1 += p.f1 as i64;
                s2 += p.f2 as i64;
                n += 1;
            }
            let mean = |s: i64| (s as f64 / n as f64).round() as i8;
            (mean(s1), mean(s2))
        })
        .collect();
    Ok(L1TemplateModel {
        feature_spec: spec,
        templates,
        labels,
    })
}

/// Label of the template nearest in L1 distance; ties go to the lower
/// template index. Each template costs two subtractions and one addition,
/// each running-minimum update one comparison.
pub fn l1_classify(model: &L1TemplateModel, f1: i8, f2: i8, ops: &mut SortOps) -> u8 {
    let mut best = (0usize, u16::MAX);
    for (i, &(t1, t2)) in model.templates.iter().enumerate() {
        ops.add_sub += 3;
        let d = (f1 as i16 - t1 as i16).unsigned_abs() + (f2 as i16 - t2 as i16).unsigned_abs();
        if i > 0 {
            ops.comparisons += 1;
            if d < best.1 {
                best = (i, d);
            }
        } else {
            best = (0, d);
        }
    }
    model.labels[best.0]
}

/// Either sorter model, as stored on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SorterModel {
    Tree(ChannelSorterModel),
    L1(L1TemplateModel),
}

impl SorterModel {
    pub fn feature_spec(&self) -> FeatureSpec {
        match self {
            SorterModel::Tree(m) => m.feature_spec,
            SorterModel::L1(m) => m.feature_spec,
        }
    }

    pub fn classify(&self, f1: i8, f2: i8, ops: &mut SortOps) -> Option<u8> {
        match self {
            SorterModel::Tree(m) => classify_spike(m, f1, f2, ops),
            SorterModel::L1(m) => Some(l1_classify(m, f1, f2, ops)),
        }
    }
}

pub fn model_footprint(model: &SorterModel) -> u32 {
    match model {
        SorterModel::Tree(m) => m.footprint_bits(),
        SorterModel::L1(m) => m.footprint_bits(),
    }
}

fn check_labels(points: &[LabeledPoint]) -> Result<Vec<u8>, SortError> {
    if points.is_empty() {
        return Err(SortError::EmptyInput);
    }
    let mut counts = [0usize; 256];
    for p in points {
        counts[p.label as usize] += 1;
    }
    let labels: Vec<u8> = (0..=255u8).filter(|&l| counts[l as usize] > 0).collect();
    if labels.len() > MAX_CLUSTERS {
        return Err(SortError::TooManyLabels(labels.len()));
    }
    if let Some(&l) = labels.iter().find(|&&l| counts[l as usize] < MIN_SAMPLES_PER_LABEL) {
        return Err(SortError::TooFewSamples {
            label: l,
            count: counts[l as usize],
        });
    }
    Ok(labels)
}

/// Candidate boundary values for one axis: the uniform grid from -128 in
/// steps of 8, plus the interior valleys of the axis' marginal KDE.
pub fn boundary_candidates(values: &[i8]) -> Vec<i8> {
    let mut c: Vec<i8> = (-128i16..=127).step_by(GRID_STEP as usize).map(|v| v as i8).collect();
    if let Ok(d) = marginal_kde(values, default_bandwidth(values)) {
        for v in interior_valleys(&d) {
            c.push((v.center.ceil() as i16 - 128) as i8);
        }
    }
    c.sort_unstable();
    c.dedup();
    c
}

/// Drops candidates that split the observed values the same way as a
/// smaller candidate: accuracy depends only on that split.
fn reduce_candidates(cands: &[i8], values: &[i8]) -> Vec<i8> {
    let mut sorted = values.to_vec();
    sorted.sort_unstable();
    let mut out: Vec<i8> = Vec::new();
    let mut last_below = usize::MAX;
    for &c in cands {
        let below = sorted.partition_point(|&v| v < c);
        if below != last_below {
            out.push(c);
            last_below = below;
        }
    }
    out
}

type CellRect = [(usize, usize); 2];

/// Per-label counts over the candidate cells of both axes.
struct CellCounts {
    n_labels: usize,
    /// Cells per axis: one more than the candidate count.
    dims: [usize; 2],
    /// Inclusive 2-D prefix sums, `(dims[0] + 1) × (dims[1] + 1)` per label.
    prefix: Vec<u32>,
}

impl CellCounts {
    fn new(cells: &[(usize, usize, usize)], n_labels: usize, dims: [usize; 2]) -> Self {
        let stride = dims[1] + 1;
        let plane = (dims[0] + 1) * stride;
        let mut prefix = vec![0u32; n_labels * plane];
        for &(x, y, l) in cells {
            prefix[l * plane + (x + 1) * stride + y + 1] += 1;
        }
        for l in 0..n_labels {
            let p = &mut prefix[l * plane..(l + 1) * plane];
            for x in 1..=dims[0] {
                for y in 1..=dims[1] {
                    p[x * stride + y] += p[(x - 1) * stride + y] + p[x * stride + y - 1]
                        - p[(x - 1) * stride + y - 1];
                }
            }
        }
        Self {
            n_labels,
            dims,
            prefix,
        }
    }

    /// Points of the majority label inside `r`.
    fn leaf_score(&self, r: CellRect) -> u32 {
        let [(x0, x1), (y0, y1)] = r;
        if x0 >= x1 || y0 >= y1 {
            return 0;
        }
        let stride = self.dims[1] + 1;
        let plane = (self.dims[0] + 1) * stride;
        (0..self.n_labels)
            .map(|l| {
                let p = &self.prefix[l * plane..];
                p[x1 * stride + y1] + p[x0 * stride + y0] - p[x0 * stride + y1] - p[x1 * stride + y0]
            })
            .max()
            .unwrap_or(0)
    }
}

struct Search<'a> {
    tree: SplitTree,
    /// Candidate values per tree axis (after any orientation swap).
    cands: [&'a [i8]; 2],
    counts: &'a CellCounts,
}

impl Search<'_> {
    /// Best score of the subtree at `child` within `region`, and its
    /// candidate index per node. Among tied candidates for a node the lower
    /// median wins, which centers the cut in the widest tied span.
    fn solve(&self, child: Child, region: CellRect) -> (u32, [usize; 3]) {
        let i = match child {
            Child::Leaf(_) => return (self.counts.leaf_score(region), [0; 3]),
            Child::Node(i) => i as usize,
        };
        let node = self.tree.nodes[i];
        let a = node.axis as usize;
        let (lo, hi) = region[a];
        let mut best = 0;
        let mut tied: Vec<[usize; 3]> = Vec::new();
        for k in 0..self.cands[a].len() {
            let cut = (k + 1).clamp(lo, hi);
            let mut lower = region;
            lower[a] = (lo, cut);
            let mut upper = region;
            upper[a] = (cut, hi);
            let (sl, cl) = self.solve(node.lower, lower);
            let (su, cu) = self.solve(node.upper, upper);
            let total = sl + su;
            if total < best {
                continue;
            }
            if total > best || tied.is_empty() {
                best = total;
                tied.clear();
            }
            let mut ch = [0; 3];
            for n in 0..3 {
                ch[n] = cl[n] | cu[n];
            }
            ch[i] = k;
            tied.push(ch);
        }
        (best, tied[(tied.len() - 1) / 2])
    }
}

/// Trained model with the number of training points it classifies correctly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainedTree {
    pub model: ChannelSorterModel,
    pub correct: usize,
    pub total: usize,
}

impl TrainedTree {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

/// Exact maximum-accuracy (pattern, orientation, boundaries) choice.
pub fn fit_tree(points: &[LabeledPoint], spec: FeatureSpec) -> Result<TrainedTree, SortError> {
    let labels = check_labels(points)?;
    let label_idx = |l: u8| labels.iter().position(|&x| x == l).unwrap();
    let values: [Vec<i8>; 2] = [
        points.iter().map(|p| p.f1).collect(),
        points.iter().map(|p| p.f2).collect(),
    ];
    let cands: [Vec<i8>; 2] = [0, 1].map(|a| reduce_candidates(&boundary_candidates(&values[a]), &values[a]));
    let cell = |a: usize, v: i8| cands[a].partition_point(|&c| c <= v);
    let cells: Vec<(usize, usize, usize)> = points
        .iter()
        .map(|p| (cell(0, p.f1), cell(1, p.f2), label_idx(p.label)))
        .collect();
    let dims = [cands[0].len() + 1, cands[1].len() + 1];
    let counts = CellCounts::new(&cells, labels.len(), dims);
    let full: CellRect = [(0, dims[0]), (0, dims[1])];

    let mut best: Option<(u32, u8, bool, [i8; 3])> = None;
    for p in enumerate_patterns() {
        for swap in [false, true] {
            let tree = if swap { p.tree.swapped() } else { p.tree };
            let search = Search {
                tree,
                cands: [&cands[0], &cands[1]],
                counts: &counts,
            };
            let (score, choice) = search.solve(Child::Node(0), full);
            if best.is_none_or(|b| score > b.0) {
                let b = std::array::from_fn(|k| cands[tree.nodes[k].axis as usize][choice[k]]);
                best = Some((score, p.pattern_id, swap, b));
            }
        }
    }
    let (_, pattern_id, axis_swap, boundaries) = best.expect("patterns exist");
    let mut model = ChannelSorterModel {
        feature_spec: spec,
        pattern_id,
        axis_swap,
        boundaries,
        valid_mask: 0,
        leaf_labels: [0; 4],
    };
    let mut leaf_counts = [[0usize; MAX_CLUSTERS]; 4];
    let mut ops = SortOps::default();
    for p in points {
        let leaf = model.leaf(p.f1, p.f2, &mut ops) as usize;
        leaf_counts[leaf][label_idx(p.label)] += 1;
    }
    let mut correct = 0;
    for (leaf, c) in leaf_counts.iter().enumerate() {
        let (li, &n) = c
            .iter()
            .enumerate()
            .rev()
            .max_by_key(|(_, &n)| n)
            .expect("four label slots");
        if n > 0 {
            model.valid_mask |= 1 << leaf;
            model.leaf_labels[leaf] = labels[li];
            correct += n;
        }
    }
    Ok(TrainedTree {
        model,
        correct,
        total: points.len(),
    })
}

pub fn train_channel_model(points: &[LabeledPoint], spec: FeatureSpec) -> Result<ChannelSorterModel, SortError> {
    fit_tree(points, spec).map(|t| t.model)
}

/// Fraction of `points` whose predicted neuron id equals the label.
pub fn accuracy(model: &SorterModel, points: &[LabeledPoint]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let mut ops = SortOps::default();
    let hits = points
        .iter()
        .filter(|p| model.classify(p.f1, p.f2, &mut ops) == Some(p.label))
        .count();
    hits as f64 / points.len() as f64
}

pub fn labeled_points(windows: &[SpikeWindow], labels: &[u8], spec: FeatureSpec) -> Vec<LabeledPoint> {
    windows
        .iter()
        .zip(labels)
        .map(|(w, &label)| {
            let (f1, f2) = extract_features(w, spec);
            LabeledPoint { f1, f2, label }
        })
        .collect()
}

/// Sweeps every pair of window offsets and returns the one whose trained
/// tree has the highest training accuracy, with that accuracy. Ties go to
/// the lexicographically smallest pair.
pub fn select_feature_pair(windows: &[SpikeWindow], labels: &[u8]) -> Result<(FeatureSpec, f64), SortError> {
    if windows.len() != labels.len() {
        return Err(SortError::LengthMismatch {
            windows: windows.len(),
            labels: labels.len(),
        });
    }
    let distinct = {
        let mut l = labels.to_vec();
        l.sort_unstable();
        l.dedup();
        l.len()
    };
    if distinct < 2 {
        return Err(SortError::SingleLabel);
    }
    let pairs: Vec<(u8, u8)> = (0..WINDOW_LEN as u8)
        .flat_map(|a| (a + 1..WINDOW_LEN as u8).map(move |b| (a, b)))
        .collect();
    let scored: Vec<((u8, u8), usize)> = pairs
        .par_iter()
        .map(|&(a, b)| {
            let spec = FeatureSpec::Indexed { idx_a: a, idx_b: b };
            fit_tree(&labeled_points(windows, labels, spec), spec).map(|t| ((a, b), t.correct))
        })
        .collect::<Result<_, _>>()?;
    let &((a, b), correct) = scored
        .iter()
        .rev()
        .max_by_key(|(_, c)| *c)
        .expect("496 pairs");
    Ok((FeatureSpec::Indexed { idx_a: a, idx_b: b }, correct as f64 / windows.len() as f64))
}
