//! Skeleton graphs, partitioned adjacency matrices and padded neighbor tables.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// On-disk skeleton definition: `{"V": int, "edges": [[i, j], ...], "center": int}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkeletonDef {
    #[serde(rename = "V")]
    pub joints: usize,
    pub edges: Vec<[usize; 2]>,
    pub center: usize,
}

impl SkeletonDef {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn build(&self) -> Result<SkeletonGraph> {
        let edges: Vec<(usize, usize)> = self.edges.iter().map(|e| (e[0], e[1])).collect();
        SkeletonGraph::new(self.joints, &edges, self.center)
    }

    /// Kinect v2 layout used by the NTU RGB+D datasets (25 joints, 24 bones).
    pub fn ntu25() -> Self {
        const BONES: [(usize, usize); 24] = [
            (1, 2), (2, 21), (3, 21), (4, 3), (5, 21), (6, 5), (7, 6), (8, 7),
            (9, 21), (10, 9), (11, 10), (12, 11), (13, 1), (14, 13), (15, 14), (16, 15),
            (17, 1), (18, 17), (19, 18), (20, 19), (22, 23), (23, 8), (24, 25), (25, 12),
        ];
        Self {
            joints: 25,
            edges: BONES.iter().map(|&(a, b)| [a - 1, b - 1]).collect(),
            center: 1,
        }
    }

    /// Heap-ordered binary tree rooted at joint 0; a stand-in skeleton for
    /// arbitrary joint counts.
    pub fn binary_tree(joints: usize) -> Self {
        Self {
            joints,
            edges: (1..joints).map(|v| [(v - 1) / 2, v]).collect(),
            center: 0,
        }
    }

    /// NTU layout for 25 joints, otherwise [`SkeletonDef::binary_tree`].
    pub fn default_for(joints: usize) -> Self {
        if joints == 25 {
            Self::ntu25()
        } else {
            Self::binary_tree(joints)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkeletonGraph {
    joints: usize,
    edges: Vec<(usize, usize)>,
    center: usize,
    adjacency: Vec<Vec<usize>>,
}

impl SkeletonGraph {
    pub fn new(joints: usize, edges: &[(usize, usize)], center: usize) -> Result<Self> {
        if joints == 0 {
            return Err(Error::Graph("skeleton needs at least one joint".into()));
        }
        if center >= joints {
            return Err(Error::Graph(format!("center joint {center} out of range for {joints} joints")));
        }
        let mut adjacency = vec![Vec::new(); joints];
        for &(a, b) in edges {
            if a >= joints || b >= joints {
                return Err(Error::Graph(format!("edge ({a}, {b}) out of range for {joints} joints")));
            }
            if a == b {
                return Err(Error::Graph(format!("self-loop on joint {a}")));
            }
            if adjacency[a].contains(&b) {
                return Err(Error::Graph(format!("duplicate edge ({a}, {b})")));
            }
            adjacency[a].push(b);
            adjacency[b].push(a);
        }
        adjacency.iter_mut().for_each(|n| n.sort_unstable());
        let graph = Self {
            joints,
            edges: edges.to_vec(),
            center,
            adjacency,
        };
        if let Some(v) = graph.hop_distances().iter().position(|d| d.is_none()) {
            return Err(Error::Graph(format!("disconnected: joint {v} unreachable from joint {center}")));
        }
        Ok(graph)
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn center(&self) -> usize {
        self.center
    }

    /// Sorted bone-adjacent joints of `v`.
    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.adjacency[v]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.adjacency[v].len()
    }

    fn hop_distances(&self) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.joints];
        dist[self.center] = Some(0);
        let mut queue = VecDeque::from([self.center]);
        while let Some(v) = queue.pop_front() {
            let d = dist[v].unwrap();
            for &n in &self.adjacency[v] {
                if dist[n].is_none() {
                    dist[n] = Some(d + 1);
                    queue.push_back(n);
                }
            }
        }
        dist
    }

    /// Hop count from the center joint to every joint.
    pub fn distances(&self) -> Vec<usize> {
        self.hop_distances().into_iter().map(|d| d.expect("graph is connected")).collect()
    }

    /// Breadth-first parent of every joint; `None` for the center joint.
    /// Ties go to the lowest-numbered neighbor.
    pub fn parents(&self) -> Vec<Option<usize>> {
        let dist = self.distances();
        (0..self.joints)
            .map(|v| self.adjacency[v].iter().copied().find(|&n| dist[n] + 1 == dist[v]))
            .collect()
    }

    /// Dense `V×V` adjacency without self-loops.
    pub fn adjacency_matrix(&self) -> Tensor {
        let v = self.joints;
        let mut a = Tensor::zeros(&[v, v]);
        for (i, ns) in self.adjacency.iter().enumerate() {
            for &j in ns {
                a.data_mut()[i * v + j] = 1.0;
            }
        }
        a
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionStrategy {
    /// One matrix: adjacency plus identity.
    Uniform,
    /// Self, centripetal and centrifugal subsets by hop distance to the center.
    #[default]
    SpatialConfig,
}

/// Partitioned adjacency. Row `i` of each matrix lists the joints that send
/// features to joint `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencySet {
    pub binary: Vec<Tensor>,
    pub normalized: Vec<Tensor>,
}

impl AdjacencySet {
    pub fn partitions(&self) -> usize {
        self.binary.len()
    }

    pub fn joints(&self) -> usize {
        self.binary[0].shape()[0]
    }
}

/// Binary partition matrices of `g`.
///
/// Spatial-config puts `(i, j)` in the centripetal subset when `j` is closer
/// to the center than `i`, in the centrifugal subset when farther, and in the
/// self subset otherwise (the diagonal, plus equal-distance neighbors on
/// cyclic graphs).
pub fn partition_adjacency(g: &SkeletonGraph, strategy: PartitionStrategy) -> Vec<Tensor> {
    let v = g.joints();
    match strategy {
        PartitionStrategy::Uniform => {
            let mut a = g.adjacency_matrix();
            for i in 0..v {
                a.data_mut()[i * v + i] = 1.0;
            }
            vec![a]
        }
        PartitionStrategy::SpatialConfig => {
            let dist = g.distances();
            let mut root = Tensor::eye(v);
            let mut closer = Tensor::zeros(&[v, v]);
            let mut farther = Tensor::zeros(&[v, v]);
            for i in 0..v {
                for &j in g.neighbors(i) {
                    let target = match dist[j].cmp(&dist[i]) {
                        std::cmp::Ordering::Less => &mut closer,
                        std::cmp::Ordering::Greater => &mut farther,
                        std::cmp::Ordering::Equal => &mut root,
                    };
                    target.data_mut()[i * v + j] = 1.0;
                }
            }
            vec![root, closer, farther]
        }
    }
}

fn check_square_binary(a: &Tensor) -> Result<usize> {
    let s = a.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::invalid("normalize_adjacency", format!("expected a square matrix, got {s:?}")));
    }
    if a.data().iter().any(|&x| x != 0.0 && x != 1.0) {
        return Err(Error::invalid("normalize_adjacency", "matrix is not binary"));
    }
    Ok(s[0])
}

fn degrees(pattern: &Tensor) -> Result<Vec<f64>> {
    let v = pattern.shape()[0];
    pattern
        .data()
        .chunks(v)
        .enumerate()
        .map(|(i, row)| {
            let d: f64 = row.iter().sum();
            if d <= 0.0 {
                Err(Error::invalid("normalize_adjacency", format!("joint {i} has zero degree")))
            } else {
                Ok(d)
            }
        })
        .collect()
}

/// Scales entry `(i, j)` by `1 / sqrt(d_i d_j)`; one rounding per entry.
fn scale_symmetric(a: &Tensor, deg: &[f64]) -> Tensor {
    let v = deg.len();
    let mut out = a.clone();
    for i in 0..v {
        for j in 0..v {
            out.data_mut()[i * v + j] /= (deg[i] * deg[j]).sqrt();
        }
    }
    out
}

/// `D^{-1/2} (A + I) D^{-1/2}` with `D` the degree matrix of `A + I`.
pub fn normalize_adjacency(a: &Tensor) -> Result<Tensor> {
    let v = check_square_binary(a)?;
    let mut with_self = a.clone();
    for i in 0..v {
        if with_self.data()[i * v + i] != 0.0 {
            return Err(Error::invalid("normalize_adjacency", format!("self-loop at joint {i}")));
        }
        with_self.data_mut()[i * v + i] = 1.0;
    }
    let deg = degrees(&with_self)?;
    Ok(scale_symmetric(&with_self, &deg))
}

/// Normalizes partition matrices that already contain their self slot. The
/// degree comes from the summed pattern, so the normalized partitions sum to
/// [`normalize_adjacency`] of the full graph.
pub fn normalize_partitions(parts: &[Tensor]) -> Result<Vec<Tensor>> {
    let first = parts.first().ok_or_else(|| Error::invalid("normalize_adjacency", "no partitions"))?;
    let v = check_square_binary(first)?;
    let mut total = Tensor::zeros(&[v, v]);
    for p in parts {
        if check_square_binary(p)? != v {
            return Err(Error::shape("normalize_adjacency", first.shape(), p.shape()));
        }
        total.data_mut().iter_mut().zip(p.data()).for_each(|(t, x)| *t += x);
    }
    let deg = degrees(&total)?;
    Ok(parts.iter().map(|p| scale_symmetric(p, &deg)).collect())
}

pub fn adjacency_set(g: &SkeletonGraph, strategy: PartitionStrategy) -> Result<AdjacencySet> {
    let binary = partition_adjacency(g, strategy);
    let normalized = normalize_partitions(&binary)?;
    Ok(AdjacencySet { binary, normalized })
}

/// Per-node neighbor lists padded to a common width.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborTable {
    width: usize,
    /// `nodes × width`, padded with `-1`.
    index: Vec<i64>,
}

impl NeighborTable {
    pub const PAD: i64 = -1;

    /// Builds a table of the given width from per-node lists. Lists must not
    /// contain duplicates.
    pub fn from_rows(rows: &[Vec<usize>], width: usize) -> Result<Self> {
        let mut index = Vec::with_capacity(rows.len() * width);
        for (n, row) in rows.iter().enumerate() {
            if row.len() > width {
                return Err(Error::invalid("neighbor_table", format!("row {n} has {} entries, width {width}", row.len())));
            }
            index.extend(row.iter().map(|&j| j as i64));
            index.extend(std::iter::repeat_n(Self::PAD, width - row.len()));
        }
        Ok(Self { width, index })
    }

    pub fn nodes(&self) -> usize {
        self.index.len() / self.width.max(1)
    }

    /// Maximum neighbor count (`A_max`).
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn raw_row(&self, n: usize) -> &[i64] {
        &self.index[n * self.width..(n + 1) * self.width]
    }

    pub fn mask_row(&self, n: usize) -> Vec<bool> {
        self.raw_row(n).iter().map(|&i| i != Self::PAD).collect()
    }

    /// Real neighbors of `n`, in table order.
    pub fn neighbors(&self, n: usize) -> Vec<usize> {
        self.raw_row(n).iter().filter(|&&i| i != Self::PAD).map(|&i| i as usize).collect()
    }

    /// Slot `j` of row `n`, `None` when padded.
    pub fn slot(&self, n: usize, j: usize) -> Option<usize> {
        let i = self.index[n * self.width + j];
        (i != Self::PAD).then_some(i as usize)
    }

    /// Same table with each node prepended to its own row.
    pub fn with_self(&self) -> Self {
        let rows: Vec<Vec<usize>> = (0..self.nodes())
            .map(|n| std::iter::once(n).chain(self.neighbors(n).into_iter().filter(|&j| j != n)).collect())
            .collect();
        let width = rows.iter().map(Vec::len).max().unwrap_or(0).max(self.width + 1);
        Self::from_rows(&rows, width).expect("width covers every row")
    }
}

/// Bone neighbors of every joint, optionally with the joint itself first.
pub fn neighbor_table_spatial(g: &SkeletonGraph, include_self: bool) -> NeighborTable {
    let rows: Vec<Vec<usize>> = (0..g.joints())
        .map(|v| {
            let mut r = Vec::with_capacity(g.degree(v) + 1);
            if include_self {
                r.push(v);
            }
            r.extend_from_slice(g.neighbors(v));
            r
        })
        .collect();
    let width = rows.iter().map(Vec::len).max().unwrap_or(0).max(1);
    NeighborTable::from_rows(&rows, width).expect("width covers every row")
}

/// Ring over `frames` nodes: row `t` is `[(t-1) mod T, (t+1) mod T]`, with
/// the duplicate dropped when `T = 2`.
pub fn temporal_ring_table(frames: usize) -> Result<NeighborTable> {
    if frames < 2 {
        return Err(Error::invalid("temporal_ring_table", format!("need at least 2 frames, got {frames}")));
    }
    let rows: Vec<Vec<usize>> = (0..frames)
        .map(|t| {
            let prev = (t + frames - 1) % frames;
            let next = (t + 1) % frames;
            if prev == next {
                vec![prev]
            } else {
                vec![prev, next]
            }
        })
        .collect();
    NeighborTable::from_rows(&rows, 2)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain3() -> SkeletonGraph {
        SkeletonGraph::new(3, &[(0, 1), (1, 2)], 0).unwrap()
    }

    #[test]
    fn ntu_skeleton_is_valid() {
        let def = SkeletonDef::ntu25();
        let g = def.build().unwrap();
        assert_eq!(g.joints(), 25);
        assert_eq!(g.edges().len(), 24);
        assert_eq!(g.center(), 1);
    }

    #[test]
    fn smallest_skeleton() {
        assert!(SkeletonGraph::new(2, &[(0, 1)], 0).is_ok());
    }

    #[test]
    fn graph_validation_errors() {
        let e = SkeletonGraph::new(3, &[(0, 1)], 0).unwrap_err().to_string();
        assert!(e.contains("disconnected"), "{e}");
        assert!(SkeletonGraph::new(3, &[(0, 3), (1, 2)], 0).is_err());
        let e = SkeletonGraph::new(3, &[(0, 1), (1, 0), (1, 2)], 0).unwrap_err().to_string();
        assert!(e.contains("duplicate"), "{e}");
        assert!(SkeletonGraph::new(2, &[(0, 0), (0, 1)], 0).is_err());
        assert!(SkeletonGraph::new(2, &[(0, 1)], 5).is_err());
    }

    #[test]
    fn uniform_partition_of_single_bone() {
        let g = SkeletonGraph::new(2, &[(0, 1)], 0).unwrap();
        let parts = partition_adjacency(&g, PartitionStrategy::Uniform);
        assert_eq!(parts, vec![Tensor::matrix(&[&[1.0, 1.0], &[1.0, 1.0]])]);
    }

    #[test]
    fn spatial_partition_of_chain() {
        let parts = partition_adjacency(&chain3(), PartitionStrategy::SpatialConfig);
        assert_eq!(parts[0], Tensor::eye(3));
        let at = |t: &Tensor, i: usize, j: usize| t.data()[i * 3 + j];
        // Centripetal: 2 receives from 1, 1 receives from 0.
        let ones: Vec<_> = (0..9).filter(|&k| parts[1].data()[k] == 1.0).collect();
        assert_eq!(ones, vec![3, 7]);
        assert_eq!(at(&parts[1], 2, 1), 1.0);
        assert_eq!(at(&parts[1], 1, 0), 1.0);
        let ones: Vec<_> = (0..9).filter(|&k| parts[2].data()[k] == 1.0).collect();
        assert_eq!(ones, vec![1, 5]);
        assert_eq!(at(&parts[2], 0, 1), 1.0);
        assert_eq!(at(&parts[2], 1, 2), 1.0);
    }

    #[test]
    fn normalize_two_node_graph() {
        let a = Tensor::matrix(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let n = normalize_adjacency(&a).unwrap();
        assert!(n.max_abs_diff(&Tensor::matrix(&[&[0.5, 0.5], &[0.5, 0.5]])) < 1e-15);
    }

    #[test]
    fn normalize_empty_graph_is_identity() {
        let n = normalize_adjacency(&Tensor::zeros(&[4, 4])).unwrap();
        assert_eq!(n, Tensor::eye(4));
    }

    #[test]
    fn normalize_rejects_non_binary() {
        assert!(normalize_adjacency(&Tensor::matrix(&[&[0.0, 0.5], &[0.5, 0.0]])).is_err());
    }

    #[test]
    fn normalized_partitions_sum_to_normalized_graph() {
        let g = SkeletonDef::ntu25().build().unwrap();
        let set = adjacency_set(&g, PartitionStrategy::SpatialConfig).unwrap();
        let mut total = Tensor::zeros(&[25, 25]);
        for p in &set.normalized {
            assert!(p.data().iter().all(|x| x.is_finite() && *x >= 0.0));
            total.data_mut().iter_mut().zip(p.data()).for_each(|(t, x)| *t += x);
        }
        let whole = normalize_adjacency(&g.adjacency_matrix()).unwrap();
        assert!(total.max_abs_diff(&whole) < 1e-15);
    }

    #[test]
    fn spatial_table_of_chain() {
        let t = neighbor_table_spatial(&chain3(), false);
        assert_eq!(t.width(), 2);
        assert_eq!(t.raw_row(1), &[0, 2]);
        assert_eq!(t.raw_row(0), &[1, NeighborTable::PAD]);
        assert_eq!(t.raw_row(2), &[1, NeighborTable::PAD]);
        assert_eq!(t.mask_row(0), vec![true, false]);
    }

    #[test]
    fn spatial_table_of_single_bone() {
        let g = SkeletonGraph::new(2, &[(0, 1)], 0).unwrap();
        let t = neighbor_table_spatial(&g, false);
        assert_eq!(t.width(), 1);
        assert_eq!(t.neighbors(0), vec![1]);
        assert_eq!(t.neighbors(1), vec![0]);
    }

    #[test]
    fn mask_counts_match_degree() {
        let g = SkeletonDef::ntu25().build().unwrap();
        for include_self in [false, true] {
            let t = neighbor_table_spatial(&g, include_self);
            for v in 0..25 {
                let count = t.mask_row(v).iter().filter(|&&m| m).count();
                assert_eq!(count, g.degree(v) + usize::from(include_self));
            }
        }
    }

    #[test]
    fn ring_rows() {
        let t = temporal_ring_table(4).unwrap();
        assert_eq!(t.raw_row(0), &[3, 1]);
        assert_eq!(t.raw_row(3), &[2, 0]);
        let t = temporal_ring_table(2).unwrap();
        assert_eq!(t.raw_row(0), &[1, NeighborTable::PAD]);
        assert_eq!(t.mask_row(0), vec![true, false]);
        assert!(temporal_ring_table(1).is_err());
    }

    #[test]
    fn ring_degree_two() {
        for frames in 3..9 {
            let t = temporal_ring_table(frames).unwrap();
            let mut seen = vec![0; frames];
            for n in 0..frames {
                t.neighbors(n).into_iter().for_each(|j| seen[j] += 1);
            }
            assert!(seen.iter().all(|&c| c == 2));
        }
    }

    #[test]
    fn with_self_prepends_node() {
        let t = temporal_ring_table(5).unwrap().with_self();
        assert_eq!(t.neighbors(0), vec![0, 4, 1]);
        let t = temporal_ring_table(2).unwrap().with_self();
        assert_eq!(t.width(), 3);
        assert_eq!(t.neighbors(1), vec![1, 0]);
        assert_eq!(t.mask_row(1), vec![true, true, false]);
    }

    #[test]
    fn skeleton_def_json_round_trip() {
        let json = r#"{"V": 3, "edges": [[0, 1], [1, 2]], "center": 1}"#;
        let def: SkeletonDef = serde_json::from_str(json).unwrap();
        assert_eq!(def.joints, 3);
        assert_eq!(def.build().unwrap().distances(), vec![1, 0, 1]);
    }

    #[test]
    fn bfs_parents() {
        let g = SkeletonDef::binary_tree(5).build().unwrap();
        assert_eq!(g.parents(), vec![None, Some(0), Some(0), Some(1), Some(1)]);
    }
}
