//! Independent enumeration of segmentation patterns by rasterization.
//!
//! Trees are rebuilt here from scratch, evaluated cell by cell on a 7×7
//! grid (split positions 1..=6, cell centers at half-integers), and each
//! layout is canonicalized by collapsing identical adjacent rows and columns
//! and relabeling regions in first-seen order.

use std::collections::{BTreeMap, BTreeSet};

use nsp_core::sort_offline::{Child, SplitTree};

#[derive(Clone, Debug)]
pub enum T {
    Leaf,
    Split(Box<T>, Box<T>),
}

fn topologies(n: usize) -> Vec<T> {
    if n == 0 {
        return vec![T::Leaf];
    }
    (0..n)
        .flat_map(|k| {
            let rs = topologies(n - 1 - k);
            topologies(k)
                .into_iter()
                .flat_map(move |l| rs.clone().into_iter().map(move |r| T::Split(Box::new(l.clone()), Box::new(r))))
        })
        .collect()
}

const CELLS: usize = 7;
pub type Grid = Vec<Vec<u8>>;

/// Leaf label of the cell with center (x, y); splits consume (axis, pos) in
/// preorder.
fn eval(t: &T, splits: &[(u8, u32)], next: &mut usize, x: f64, y: f64, leaf: &mut u8) -> u8 {
    match t {
        T::Leaf => {
            *leaf += 1;
            *leaf - 1
        }
        T::Split(l, r) => {
            let (axis, pos) = splits[*next];
            *next += 1;
            let v = if axis == 0 { x } else { y };
            // Evaluate both children to keep leaf and split numbering fixed.
            let mut skip_leaf = *leaf;
            let mut skip_next = *next;
            let a = eval(l, splits, &mut skip_next, x, y, &mut skip_leaf);
            let b = eval(r, splits, &mut skip_next, x, y, &mut skip_leaf);
            *next = skip_next;
            *leaf = skip_leaf;
            if v > pos as f64 {
                b
            } else {
                a
            }
        }
    }
}

fn raster(t: &T, splits: &[(u8, u32)]) -> Grid {
    (0..CELLS)
        .map(|cx| {
            (0..CELLS)
                .map(|cy| eval(t, splits, &mut 0, cx as f64 + 0.5, cy as f64 + 0.5, &mut 0))
                .collect()
        })
        .collect()
}

fn transpose(g: &Grid) -> Grid {
    (0..g[0].len()).map(|j| g.iter().map(|row| row[j]).collect()).collect()
}

fn dedup_rows(g: &Grid) -> Grid {
    let mut out: Grid = Vec::new();
    for row in g {
        if out.last() != Some(row) {
            out.push(row.clone());
        }
    }
    out
}

fn relabel(g: &Grid) -> Grid {
    let mut map = BTreeMap::new();
    g.iter()
        .map(|row| {
            row.iter()
                .map(|v| {
                    let n = map.len() as u8;
                    *map.entry(*v).or_insert(n)
                })
                .collect()
        })
        .collect()
}

fn canon(g: &Grid) -> Grid {
    relabel(&transpose(&dedup_rows(&transpose(&dedup_rows(g)))))
}

fn flip_rows(g: &Grid) -> Grid {
    g.iter().rev().cloned().collect()
}

pub type Family = BTreeSet<Grid>;

/// Family of one (topology, axes) tree, or empty if it never yields four
/// non-empty leaves.
pub fn family(t: &T, axes: [u8; 3]) -> Family {
    let mut fam = Family::new();
    for p in 0..216u32 {
        let pos = [p / 36 + 1, p / 6 % 6 + 1, p % 6 + 1];
        let distinct = (0..3).all(|i| (i + 1..3).all(|j| axes[i] != axes[j] || pos[i] != pos[j]));
        if !distinct {
            continue;
        }
        let splits: Vec<(u8, u32)> = (0..3).map(|i| (axes[i], pos[i])).collect();
        let g = raster(t, &splits);
        let used: BTreeSet<u8> = g.iter().flatten().copied().collect();
        if used.len() == 4 {
            fam.insert(canon(&g));
        }
    }
    fam
}

fn map_family(f: &Family, op: impl Fn(&Grid) -> Grid) -> Family {
    f.iter().map(|g| canon(&op(g))).collect()
}

pub fn to_oracle(tree: &SplitTree) -> (T, [u8; 3]) {
    fn build(tree: &SplitTree, c: Child) -> T {
        match c {
            Child::Leaf(_) => T::Leaf,
            Child::Node(i) => {
                let n = tree.nodes[i as usize];
                T::Split(Box::new(build(tree, n.lower)), Box::new(build(tree, n.upper)))
            }
        }
    }
    (build(tree, Child::Node(0)), tree.axes())
}

pub struct Oracle {
    /// Transpose classes, each the pair {family, transposed family}.
    pub classes: Vec<BTreeSet<Family>>,
    /// Orbit (under mirrors and transpose) of each class.
    pub orbits: Vec<BTreeSet<Family>>,
}

pub fn oracle() -> Oracle {
    let mut families = BTreeSet::new();
    let mut trees = 0;
    for t in topologies(3) {
        for a in 0..8u8 {
            trees += 1;
            let f = family(&t, [a >> 2 & 1, a >> 1 & 1, a & 1]);
            if !f.is_empty() {
                families.insert(f);
            }
        }
    }
    assert_eq!(trees, 40, "5 topologies × 8 axis assignments");
    let classes: BTreeSet<BTreeSet<Family>> = families
        .iter()
        .map(|f| [f.clone(), map_family(f, transpose)].into_iter().collect())
        .collect();
    let orbit = |f: &Family| -> BTreeSet<Family> {
        let mut o = BTreeSet::new();
        for k in 0..8 {
            let g = map_family(f, |g| {
                let mut g = g.clone();
                if k & 1 == 1 {
                    g = flip_rows(&g);
                }
                if k & 2 == 2 {
                    g = transpose(&flip_rows(&transpose(&g)));
                }
                if k & 4 == 4 {
                    g = transpose(&g);
                }
                g
            });
            o.insert(g);
        }
        o
    };
    let classes: Vec<_> = classes.into_iter().collect();
    let orbits = classes.iter().map(|c| orbit(c.iter().next().unwrap())).collect();
    Oracle { classes, orbits }
}
