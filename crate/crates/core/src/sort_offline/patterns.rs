//! Segmentation patterns: the distinct ways three axis-aligned splits can
//! carve the two-feature plane into four rectangles.
//!
//! Every binary tree with three split nodes and an axis per node is
//! enumerated. A tree's *family* is the set of region layouts it can produce
//! over all boundary orderings, each layout reduced to rank coordinates.
//! Trees with equal families are interchangeable and form one pattern, and a
//! family and its transpose (features swapped) are the same pattern. Patterns
//! that are mirror images of each other along either axis share a group.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

pub const N_SPLITS: usize = 3;
pub const N_LEAVES: usize = 4;

/// Child pointer of a split node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Child {
    Node(u8),
    Leaf(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SplitNode {
    /// 0 compares the first feature, 1 the second.
    pub axis: u8,
    pub lower: Child,
    pub upper: Child,
}

/// Tree topology; nodes are in preorder, leaves numbered left to right.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SplitTree {
    pub nodes: [SplitNode; N_SPLITS],
}

impl SplitTree {
    /// Leaf reached for a per-node comparison outcome (bit k set: feature is
    /// at or above boundary k).
    pub fn leaf_for_code(&self, code: u8) -> u8 {
        let mut node = 0usize;
        loop {
            let n = &self.nodes[node];
            let next = if code >> node & 1 == 1 { n.upper } else { n.lower };
            match next {
                Child::Node(i) => node = i as usize,
                Child::Leaf(l) => return l,
            }
        }
    }

    pub fn leaf_map(&self) -> [u8; 1 << N_SPLITS] {
        std::array::from_fn(|code| self.leaf_for_code(code as u8))
    }

    pub fn swapped(&self) -> SplitTree {
        let mut t = *self;
        for n in &mut t.nodes {
            n.axis ^= 1;
        }
        t
    }

    pub fn axes(&self) -> [u8; N_SPLITS] {
        self.nodes.map(|n| n.axis)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentationPattern {
    pub pattern_id: u8,
    pub group_id: u8,
    /// Representative tree in the pattern's canonical orientation.
    pub tree: SplitTree,
    pub leaf_map: [u8; 1 << N_SPLITS],
    /// Number of (topology, axes) trees that realize this pattern in either
    /// orientation.
    pub n_trees: usize,
}

/// Topology skeleton without axes.
#[derive(Debug, Clone)]
enum Shape {
    Leaf,
    Split(Box<Shape>, Box<Shape>),
}

fn shapes(n_splits: usize) -> Vec<Shape> {
    if n_splits == 0 {
        return vec![Shape::Leaf];
    }
    let mut out = Vec::new();
    for left in 0..n_splits {
        for l in shapes(left) {
            for r in shapes(n_splits - 1 - left) {
                out.push(Shape::Split(Box::new(l.clone()), Box::new(r)));
            }
        }
    }
    out
}

fn flatten(shape: &Shape, axes: [u8; N_SPLITS]) -> SplitTree {
    fn walk(s: &Shape, axes: &[u8; N_SPLITS], nodes: &mut Vec<SplitNode>, leaves: &mut u8) -> Child {
        match s {
            Shape::Leaf => {
                *leaves += 1;
                Child::Leaf(*leaves - 1)
            }
            Shape::Split(l, r) => {
                let idx = nodes.len();
                nodes.push(SplitNode {
                    axis: axes[idx],
                    lower: Child::Leaf(0),
                    upper: Child::Leaf(0),
                });
                let lower = walk(l, axes, nodes, leaves);
                let upper = walk(r, axes, nodes, leaves);
                nodes[idx].lower = lower;
                nodes[idx].upper = upper;
                Child::Node(idx as u8)
            }
        }
    }
    let mut nodes = Vec::with_capacity(N_SPLITS);
    let mut leaves = 0;
    walk(shape, &axes, &mut nodes, &mut leaves);
    SplitTree {
        nodes: nodes.try_into().expect("three split nodes"),
    }
}

/// All (topology, axes) trees in a fixed order.
pub fn all_trees() -> Vec<SplitTree> {
    let mut out = Vec::new();
    for s in shapes(N_SPLITS) {
        for a in 0..1u8 << N_SPLITS {
            out.push(flatten(&s, [a >> 2 & 1, a >> 1 & 1, a & 1]));
        }
    }
    out
}

type Interval = (u32, u32);
type Rect = [Interval; 2];
/// A layout: leaf rectangles in rank coordinates, as an unordered set.
type Layout = BTreeSet<Rect>;
type Family = BTreeSet<Layout>;

const OUTER: u32 = u32::MAX;

/// Leaf rectangles for concrete positions, or `None` if some split falls
/// outside the region it must cut.
fn regions(tree: &SplitTree, pos: [u32; N_SPLITS]) -> Option<Vec<Rect>> {
    fn go(tree: &SplitTree, node: usize, pos: &[u32; N_SPLITS], rect: Rect, out: &mut Vec<Rect>) -> bool {
        let n = tree.nodes[node];
        let a = n.axis as usize;
        let p = pos[node];
        let (lo, hi) = rect[a];
        if !(lo < p && p < hi) {
            return false;
        }
        let mut lower = rect;
        lower[a] = (lo, p);
        let mut upper = rect;
        upper[a] = (p, hi);
        [(n.lower, lower), (n.upper, upper)].into_iter().all(|(c, r)| match c {
            Child::Leaf(_) => {
                out.push(r);
                true
            }
            Child::Node(i) => go(tree, i as usize, pos, r, out),
        })
    }
    let mut out = Vec::new();
    go(tree, 0, &pos, [(0, OUTER), (0, OUTER)], &mut out).then_some(out)
}

fn canonical(rects: &[Rect]) -> Layout {
    let coords: [Vec<u32>; 2] = [0, 1].map(|a| {
        let mut v: Vec<u32> = rects.iter().flat_map(|r| [r[a].0, r[a].1]).collect();
        v.sort_unstable();
        v.dedup();
        v
    });
    let rank = |a: usize, v: u32| coords[a].binary_search(&v).unwrap() as u32;
    rects
        .iter()
        .map(|r| [0, 1].map(|a| (rank(a, r[a].0), rank(a, r[a].1))))
        .collect()
}

fn transpose(l: &Layout) -> Layout {
    l.iter().map(|r| [r[1], r[0]]).collect()
}

fn mirror(l: &Layout, axis: usize) -> Layout {
    let top = l.iter().map(|r| r[axis].1).max().unwrap_or(0);
    l.iter()
        .map(|r| {
            let mut m = *r;
            m[axis] = (top - r[axis].1, top - r[axis].0);
            m
        })
        .collect()
}

fn map_family(f: &Family, g: impl Fn(&Layout) -> Layout) -> Family {
    f.iter().map(g).collect()
}

/// Family over positions 1..=6 with distinct positions per axis; three
/// splits never need more than three distinct ranks per axis.
fn family(tree: &SplitTree) -> Family {
    let mut fam = Family::new();
    let axes = tree.axes();
    for p0 in 1..=6 {
        for p1 in 1..=6 {
            for p2 in 1..=6 {
                let pos = [p0, p1, p2];
                let clash = (0..N_SPLITS)
                    .any(|i| (i + 1..N_SPLITS).any(|j| axes[i] == axes[j] && pos[i] == pos[j]));
                if clash {
                    continue;
                }
                if let Some(r) = regions(tree, pos) {
                    fam.insert(canonical(&r));
                }
            }
        }
    }
    fam
}

fn build() -> Vec<SegmentationPattern> {
    let trees = all_trees();
    // Distinct families in first-seen order, each with its member trees.
    let mut families: Vec<(Family, Vec<usize>)> = Vec::new();
    for (ti, t) in trees.iter().enumerate() {
        let f = family(t);
        if f.is_empty() {
            continue;
        }
        match families.iter_mut().find(|(g, _)| *g == f) {
            Some((_, members)) => members.push(ti),
            None => families.push((f, vec![ti])),
        }
    }
    // Quotient by transpose: a family joins the class of its transpose.
    let mut classes: Vec<(Family, Vec<usize>)> = Vec::new();
    for (f, members) in families {
        let ft = map_family(&f, transpose);
        match classes.iter_mut().find(|(g, _)| *g == f || *g == ft) {
            Some((_, m)) => m.extend(members),
            None => classes.push((f, members)),
        }
    }
    // Groups: orbits under both mirrors (and transpose).
    let orbit = |f: &Family| -> BTreeSet<Family> {
        let mut o = BTreeSet::new();
        for mx in [false, true] {
            for my in [false, true] {
                for tr in [false, true] {
                    o.insert(map_family(f, |l| {
                        let mut l = l.clone();
                        if mx {
                            l = mirror(&l, 0);
                        }
                        if my {
                            l = mirror(&l, 1);
                        }
                        if tr {
                            l = transpose(&l);
                        }
                        l
                    }));
                }
            }
        }
        o
    };
    let mut group_of: BTreeMap<BTreeSet<Family>, u8> = BTreeMap::new();
    classes
        .iter()
        .enumerate()
        .map(|(pid, (f, members))| {
            let next = group_of.len() as u8;
            let group_id = *group_of.entry(orbit(f)).or_insert(next);
            let tree = trees[members[0]];
            SegmentationPattern {
                pattern_id: pid as u8,
                group_id,
                tree,
                leaf_map: tree.leaf_map(),
                n_trees: members.len(),
            }
        })
        .collect()
}

/// The canonical segmentation patterns, computed once.
pub fn enumerate_patterns() -> &'static [SegmentationPattern] {
    static PATTERNS: OnceLock<Vec<SegmentationPattern>> = OnceLock::new();
    PATTERNS.get_or_init(build)
}

pub fn n_groups() -> usize {
    enumerate_patterns()
        .iter()
        .map(|p| p.group_id)
        .collect::<BTreeSet<_>>()
        .len()
}