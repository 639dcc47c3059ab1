//! Spatial k-means partitioning and the binary split forest.
//!
//! The top level is a plain k-means partition of the normalized spatial
//! coordinates. Each top-level cluster is the root of a binary tree; splitting
//! a leaf runs 2-means on its points and attaches two children. Points are
//! routed by descending the tree (nearest root centroid, then the nearer of
//! each pair of child centroids), so routing reproduces the training-time
//! membership exactly.

use std::collections::HashSet;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type Point3 = [f32; 3];

/// Identifies a node of the split forest: the top-level cluster index and the
/// node's heap index inside that cluster's tree (root = 1, children of `n` are
/// `2n` and `2n + 1`). Ordering is by `(root, node)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LeafId {
    pub root: u32,
    pub node: u32,
}

impl LeafId {
    pub fn root(root: u32) -> Self {
        Self { root, node: 1 }
    }

    pub fn depth(self) -> usize {
        (31 - self.node.leading_zeros()) as usize
    }

    pub fn children(self) -> [LeafId; 2] {
        [
            LeafId {
                root: self.root,
                node: self.node * 2,
            },
            LeafId {
                root: self.root,
                node: self.node * 2 + 1,
            },
        ]
    }

    /// Child directions from the root, `false` = first child.
    fn path(self) -> impl Iterator<Item = bool> {
        let depth = self.depth();
        let node = self.node;
        (0..depth).rev().map(move |shift| (node >> shift) & 1 == 1)
    }
}

impl fmt::Display for LeafId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.root)?;
        for bit in self.path() {
            write!(f, ".{}", bit as u8)?;
        }
        Ok(())
    }
}

/// Hard limit on split depth so heap indices fit in a `u32`.
pub const MAX_SPLIT_DEPTH_LIMIT: usize = 24;

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterNode {
    pub centroid: Point3,
    pub children: Option<Box<[ClusterNode; 2]>>,
}

impl ClusterNode {
    pub fn leaf(centroid: Point3) -> Self {
        Self {
            centroid,
            children: None,
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_none()
    }

    fn find(&self, id: LeafId) -> Option<&ClusterNode> {
        let mut node = self;
        for bit in id.path() {
            node = &node.children.as_ref()?[bit as usize];
        }
        Some(node)
    }

    fn find_mut(&mut self, id: LeafId) -> Option<&mut ClusterNode> {
        let mut node = self;
        for bit in id.path() {
            node = &mut node.children.as_mut()?[bit as usize];
        }
        Some(node)
    }

    /// Pre-order walk yielding `(id, node)`.
    fn walk<'a>(&'a self, id: LeafId, out: &mut Vec<(LeafId, &'a ClusterNode)>) {
        out.push((id, self));
        if let Some(children) = &self.children {
            let [l, r] = id.children();
            children[0].walk(l, out);
            children[1].walk(r, out);
        }
    }

    fn max_depth(&self) -> usize {
        match &self.children {
            None => 0,
            Some(c) => 1 + c[0].max_depth().max(c[1].max_depth()),
        }
    }

    /// Descends from this node (whose id is `id`) to a leaf.
    pub fn route(&self, id: LeafId, point: &Point3) -> LeafId {
        let mut node = self;
        let mut id = id;
        while let Some(children) = &node.children {
            let left = sq_dist(point, &children[0].centroid);
            let right = sq_dist(point, &children[1].centroid);
            let pick = usize::from(right < left);
            id = id.children()[pick];
            node = &children[pick];
        }
        id
    }
}

/// Why a leaf could not be split. Not an error for training: the leaf simply
/// becomes terminal.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitRefusal {
    UnknownLeaf,
    NotALeaf,
    DepthCap,
    TooFewDistinctPoints,
    EmptyChild,
}

impl fmt::Display for SplitRefusal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SplitRefusal::UnknownLeaf => "unknown leaf",
            SplitRefusal::NotALeaf => "node already split",
            SplitRefusal::DepthCap => "depth cap reached",
            SplitRefusal::TooFewDistinctPoints => "fewer than two distinct points",
            SplitRefusal::EmptyChild => "2-means produced an empty child",
        };
        f.write_str(s)
    }
}

/// Result of a successful split: the new leaves and which of the supplied
/// points went to each (indices into the slice passed to the split).
#[derive(Clone, Debug, PartialEq)]
pub struct SplitOutcome {
    pub children: [LeafId; 2],
    pub members: [Vec<usize>; 2],
}

/// Top-level centroids plus a binary split tree under each of them.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterPartition {
    pub roots: Vec<ClusterNode>,
    pub max_split_depth: usize,
}

impl ClusterPartition {
    pub fn from_centroids(centroids: &[Point3], max_split_depth: usize) -> Self {
        Self {
            roots: centroids.iter().map(|&c| ClusterNode::leaf(c)).collect(),
            max_split_depth: max_split_depth.min(MAX_SPLIT_DEPTH_LIMIT),
        }
    }

    pub fn top_centroids(&self) -> Vec<Point3> {
        self.roots.iter().map(|n| n.centroid).collect()
    }

    pub fn node(&self, id: LeafId) -> Option<&ClusterNode> {
        self.roots.get(id.root as usize)?.find(id)
    }

    /// All nodes in pre-order, tree by tree.
    pub fn nodes(&self) -> Vec<(LeafId, &ClusterNode)> {
        let mut out = Vec::new();
        for (i, root) in self.roots.iter().enumerate() {
            root.walk(LeafId::root(i as u32), &mut out);
        }
        out
    }

    /// Terminal leaves in pre-order.
    pub fn leaves(&self) -> Vec<LeafId> {
        self.nodes()
            .into_iter()
            .filter(|(_, n)| n.is_leaf())
            .map(|(id, _)| id)
            .collect()
    }

    pub fn depth(&self) -> usize {
        self.roots.iter().map(ClusterNode::max_depth).max().unwrap_or(0)
    }

    pub fn tree_depths(&self) -> Vec<usize> {
        self.roots.iter().map(ClusterNode::max_depth).collect()
    }

    /// Splits `leaf` in two with 2-means over `points` (the leaf's members).
    pub fn split_cluster(
        &mut self,
        leaf: LeafId,
        points: &[Point3],
        seed: u64,
    ) -> std::result::Result<SplitOutcome, SplitRefusal> {
        let cap = self.max_split_depth;
        let root = self
            .roots
            .get_mut(leaf.root as usize)
            .ok_or(SplitRefusal::UnknownLeaf)?;
        split_node(root, leaf, points, seed, cap)
    }

    /// Replaces one top-level tree, used when merging worker results.
    pub fn replace_tree(&mut self, root: usize, tree: ClusterNode) {
        self.roots[root] = tree;
    }
}

/// Splits the leaf `leaf` of the tree rooted at `root`.
pub fn split_node(
    root: &mut ClusterNode,
    leaf: LeafId,
    points: &[Point3],
    seed: u64,
    max_split_depth: usize,
) -> std::result::Result<SplitOutcome, SplitRefusal> {
    let node = root.find_mut(leaf).ok_or(SplitRefusal::UnknownLeaf)?;
    if !node.is_leaf() {
        return Err(SplitRefusal::NotALeaf);
    }
    if leaf.depth() >= max_split_depth.min(MAX_SPLIT_DEPTH_LIMIT) {
        return Err(SplitRefusal::DepthCap);
    }
    if distinct_count(points) < 2 {
        return Err(SplitRefusal::TooFewDistinctPoints);
    }
    let fit = lloyd(points, 2, 100, seed).map_err(|_| SplitRefusal::TooFewDistinctPoints)?;
    let candidate = ClusterNode {
        centroid: node.centroid,
        children: Some(Box::new([
            ClusterNode::leaf(fit.centroids[0]),
            ClusterNode::leaf(fit.centroids[1]),
        ])),
    };
    let children = leaf.children();
    let mut members = [Vec::new(), Vec::new()];
    for (i, p) in points.iter().enumerate() {
        let routed = candidate.route(leaf, p);
        members[usize::from(routed == children[1])].push(i);
    }
    if members.iter().any(Vec::is_empty) {
        return Err(SplitRefusal::EmptyChild);
    }
    *node = candidate;
    Ok(SplitOutcome { children, members })
}

/// Routes a normalized spatial point to its leaf: nearest top-level centroid,
/// then the nearer child at each split. Ties go to the lower id.
pub fn assign(partition: &ClusterPartition, point: &Point3) -> LeafId {
    let mut root = 0;
    let mut best = f64::INFINITY;
    for (i, node) in partition.roots.iter().enumerate() {
        let d = sq_dist(point, &node.centroid);
        if d < best {
            best = d;
            root = i;
        }
    }
    partition.roots[root].route(LeafId::root(root as u32), point)
}

#[inline]
pub(crate) fn sq_dist(a: &Point3, b: &Point3) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

fn sq_dist64(a: &Point3, b: &[f64; 3]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y;
            d * d
        })
        .sum()
}

/// Index of the nearest centroid; ties resolve to the lower index.
pub fn nearest(centroids: &[Point3], point: &Point3) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

fn nearest64(centroids: &[[f64; 3]], point: &Point3) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist64(point, c);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    (best, best_d)
}

pub fn distinct_count(points: &[Point3]) -> usize {
    points
        .iter()
        .map(|p| p.map(|v| if v == 0.0 { 0 } else { v.to_bits() }))
        .collect::<HashSet<_>>()
        .len()
}

/// Output of Lloyd's algorithm.
#[derive(Clone, Debug, PartialEq)]
pub struct KMeansFit {
    pub centroids: Vec<Point3>,
    /// Nearest-centroid labels under the final (`f32`) centroids.
    pub labels: Vec<usize>,
    /// Partition objective after each assignment step.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// Stops at an assignment fixed point or after `max_iters` assignment steps.
/// A cluster that goes empty is reseeded with the point farthest from its own
/// centroid.
pub fn lloyd(points: &[Point3], k: usize, max_iters: usize, seed: u64) -> Result<KMeansFit> {
    if k == 0 {
        return Err(Error::Config("k-means needs k >= 1".into()));
    }
    let distinct = distinct_count(points);
    if k > distinct {
        return Err(Error::Config(format!(
            "k-means asked for {k} clusters but only {distinct} distinct points exist"
        )));
    }
    let max_iters = max_iters.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_plus_plus(points, k, &mut rng);

    let n = points.len();
    let mut labels = vec![usize::MAX; n];
    let mut trace = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iters {
        iterations += 1;
        let mut changed = false;
        let mut objective = 0.0;
        for (p, label) in points.iter().zip(labels.iter_mut()) {
            let (c, d) = nearest64(&centroids, p);
            if *label != c {
                *label = c;
                changed = true;
            }
            objective += d;
        }
        trace.push(objective);
        if !changed {
            break;
        }
        repair_empty(points, &mut labels, &centroids, k);
        centroids = means(points, &labels, k);
    }

    let centroids: Vec<Point3> = centroids
        .iter()
        .map(|c| [c[0] as f32, c[1] as f32, c[2] as f32])
        .collect();
    let labels = points.iter().map(|p| nearest(&centroids, p)).collect();
    Ok(KMeansFit {
        centroids,
        labels,
        objective_trace: trace,
        iterations,
    })
}

fn seed_plus_plus(points: &[Point3], k: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let to64 = |p: &Point3| [p[0] as f64, p[1] as f64, p[2] as f64];
    let mut centroids = vec![to64(&points[rng.gen_range(0..points.len())])];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist64(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if target < w {
                        break;
                    }
                    target -= w;
                }
            }
            pick.expect("positive total weight")
        } else {
            // unreachable while distinct >= k, kept total for safety
            rng.gen_range(0..points.len())
        };
        let c = to64(&points[pick]);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist64(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn means(points: &[Point3], labels: &[usize], k: usize) -> Vec<[f64; 3]> {
    let mut sums = vec![[0.0f64; 3]; k];
    let mut counts = vec![0usize; k];
    for (p, &l) in points.iter().zip(labels) {
        for a in 0..3 {
            sums[l][a] += p[a] as f64;
        }
        counts[l] += 1;
    }
    sums.iter()
        .zip(&counts)
        .map(|(s, &c)| {
            let c = c.max(1) as f64;
            [s[0] / c, s[1] / c, s[2] / c]
        })
        .collect()
}

fn repair_empty(points: &[Point3], labels: &mut [usize], centroids: &[[f64; 3]], k: usize) {
    loop {
        let mut counts = vec![0usize; k];
        for &l in labels.iter() {
            counts[l] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let donor = points
            .iter()
            .enumerate()
            .filter(|&(i, _)| counts[labels[i]] > 1)
            .map(|(i, p)| (i, sq_dist64(p, &centroids[labels[i]])))
            .fold(None, |best: Option<(usize, f64)>, (i, d)| match best {
                Some((_, bd)) if bd >= d => best,
                _ => Some((i, d)),
            });
        match donor {
            Some((i, _)) => labels[i] = empty,
            None => return,
        }
    }
}

/// Partition objective `sum ||x - mu_label||^2`.
pub fn objective(points: &[Point3], centroids: &[Point3], labels: &[usize]) -> f64 {
    points
        .iter()
        .zip(labels)
        .map(|(p, &l)| sq_dist(p, &centroids[l]))
        .sum()
}

/// Top-level k-means partition with the default split depth cap of 3.
pub fn kmeans(points: &[Point3], k: usize, max_iters: usize, seed: u64) -> Result<ClusterPartition> {
    let fit = lloyd(points, k, max_iters, seed)?;
    Ok(ClusterPartition::from_centroids(&fit.centroids, 3))
}

/// Residual summary for one leaf, in normalized value space.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterStats {
    pub leaf_id: LeafId,
    pub point_count: u64,
    pub per_variable_mse: Vec<f64>,
    pub aggregate_mse: f64,
}
