//! Skeleton topology, the three-subset spatial partition and the normalized
//! partitioned adjacency used by the matrix-form operators.

use std::collections::{BTreeSet, VecDeque};
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Hop distance recorded for vertex pairs with no connecting path.
pub const UNREACHABLE: usize = usize::MAX;

/// NTU RGB+D 25-joint bones, 1-based, in the order used by ST-GCN.
///
/// Joints: 1 spine base, 2 spine mid, 3 neck, 4 head, 5-8 left shoulder,
/// elbow, wrist, hand, 9-12 right shoulder, elbow, wrist, hand, 13-16 left
/// hip, knee, ankle, foot, 17-20 right hip, knee, ankle, foot, 21 spine
/// shoulder, 22 left hand tip, 23 left thumb, 24 right hand tip, 25 right thumb.
pub const NTU_EDGES_1BASED: [(usize, usize); 24] = [
    (1, 2),
    (2, 21),
    (3, 21),
    (4, 3),
    (5, 21),
    (6, 5),
    (7, 6),
    (8, 7),
    (9, 21),
    (10, 9),
    (11, 10),
    (12, 11),
    (13, 1),
    (14, 13),
    (15, 14),
    (16, 15),
    (17, 1),
    (18, 17),
    (19, 18),
    (20, 19),
    (22, 23),
    (23, 8),
    (24, 25),
    (25, 12),
];

pub const NTU_NUM_JOINTS: usize = 25;
/// Spine mid (joint 2), 0-based.
pub const NTU_CENTER: usize = 1;
/// Left hand (joint 8), 0-based.
pub const NTU_LEFT_HAND: usize = 7;
/// Right foot (joint 20), 0-based.
pub const NTU_RIGHT_FOOT: usize = 19;

#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonGraph {
    num_vertices: usize,
    edges: Vec<(usize, usize)>,
    center: usize,
    hop: Vec<usize>,
}

impl SkeletonGraph {
    /// Builds a graph, deduplicating edges (stored as `(min, max)`, sorted)
    /// and computing all-pairs hop distances by BFS.
    pub fn new(num_vertices: usize, edges: &[(usize, usize)], center: usize) -> Result<Self> {
        if num_vertices == 0 {
            return Err(Error::arg("graph needs at least one vertex"));
        }
        if center >= num_vertices {
            return Err(Error::arg(format!(
                "center {center} out of range for {num_vertices} vertices"
            )));
        }
        let mut set = BTreeSet::new();
        for &(i, j) in edges {
            if i >= num_vertices || j >= num_vertices {
                return Err(Error::arg(format!(
                    "edge ({i}, {j}) out of range for {num_vertices} vertices"
                )));
            }
            if i == j {
                return Err(Error::arg(format!("self-loop edge ({i}, {i})")));
            }
            set.insert((i.min(j), i.max(j)));
        }
        let edges: Vec<_> = set.into_iter().collect();
        let hop = hop_matrix(num_vertices, &edges);
        Ok(Self {
            num_vertices,
            edges,
            center,
            hop,
        })
    }

    /// The built-in NTU RGB+D 25-joint skeleton centered on the spine mid joint.
    pub fn ntu() -> Self {
        let edges: Vec<_> = NTU_EDGES_1BASED.iter().map(|&(a, b)| (a - 1, b - 1)).collect();
        Self::new(NTU_NUM_JOINTS, &edges, NTU_CENTER).expect("embedded NTU topology is valid")
    }

    pub fn num_vertices(&self) -> usize {
        self.num_vertices
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn center(&self) -> usize {
        self.center
    }

    pub fn hop_distance(&self, i: usize, j: usize) -> usize {
        self.hop[i * self.num_vertices + j]
    }

    pub fn is_adjacent(&self, i: usize, j: usize) -> bool {
        i != j && self.hop_distance(i, j) == 1
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.num_vertices).filter(move |&j| self.is_adjacent(i, j))
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors(i).count()
    }

    /// Hop count from every vertex to the center; errors on unreachable vertices.
    pub fn center_hops(&self) -> Result<Vec<usize>> {
        let hops: Vec<_> = (0..self.num_vertices)
            .map(|v| self.hop_distance(v, self.center))
            .collect();
        let unreachable: Vec<_> = (0..self.num_vertices)
            .filter(|&v| hops[v] == UNREACHABLE)
            .collect();
        if !unreachable.is_empty() {
            return Err(Error::Disconnected(unreachable));
        }
        Ok(hops)
    }

    /// Relabels vertices: vertex `v` becomes `perm[v]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.num_vertices {
            return Err(Error::arg("permutation length differs from vertex count"));
        }
        let edges: Vec<_> = self.edges.iter().map(|&(a, b)| (perm[a], perm[b])).collect();
        Self::new(self.num_vertices, &edges, perm[self.center])
    }

    /// Parses the line-oriented graph description:
    ///
    /// ```text
    /// V <count> center <index>
    /// E <i> <j>
    /// ...
    /// ```
    ///
    /// Tokens are separated by ASCII whitespace; blank lines are skipped; any
    /// other content, including extra tokens on a line, is an error.
    pub fn parse(text: &str) -> Result<Self> {
        let mut header = None;
        let mut edges = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let lineno = idx + 1;
            let tokens: Vec<_> = line.split_ascii_whitespace().collect();
            if tokens.is_empty() {
                continue;
            }
            let parse_usize = |s: &str| {
                s.parse::<usize>().map_err(|_| Error::Parse {
                    line: lineno,
                    msg: format!("expected a non-negative integer, got `{s}`"),
                })
            };
            match (header, tokens.as_slice()) {
                (None, ["V", count, "center", center]) => {
                    header = Some((parse_usize(count)?, parse_usize(center)?));
                }
                (None, _) => {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: "expected header `V <count> center <index>`".into(),
                    })
                }
                (Some(_), ["E", i, j]) => edges.push((parse_usize(i)?, parse_usize(j)?)),
                (Some(_), _) => {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: format!("expected `E <i> <j>`, got `{}`", line.trim()),
                    })
                }
            }
        }
        let (count, center) = header.ok_or(Error::Parse {
            line: 1,
            msg: "missing header `V <count> center <index>`".into(),
        })?;
        Self::new(count, &edges, center)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("V {} center {}\n", self.num_vertices, self.center);
        for &(i, j) in &self.edges {
            let _ = writeln!(s, "E {i} {j}");
        }
        s
    }
}

fn hop_matrix(n: usize, edges: &[(usize, usize)]) -> Vec<usize> {
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut hop = vec![UNREACHABLE; n * n];
    let mut queue = VecDeque::new();
    for src in 0..n {
        let row = &mut hop[src * n..(src + 1) * n];
        row[src] = 0;
        queue.push_back(src);
        while let Some(u) = queue.pop_front() {
            for &w in &adj[u] {
                if row[w] == UNREACHABLE {
                    row[w] = row[u] + 1;
                    queue.push_back(w);
                }
            }
        }
    }
    hop
}

/// Neighbor subset of the spatial partition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Subset {
    /// The root vertex itself.
    SelfLoop,
    /// Neighbors closer to the gravity center (ties land here too).
    Centripetal,
    /// Neighbors farther from the gravity center.
    Centrifugal,
}

impl Subset {
    pub const ALL: [Subset; 3] = [Subset::SelfLoop, Subset::Centripetal, Subset::Centrifugal];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Partition rule for a root `i` and a neighbor `j` given their hop
    /// counts to the center. Equidistant neighbors are centripetal.
    pub fn classify(i: usize, j: usize, hop_i: usize, hop_j: usize) -> Subset {
        if i == j {
            Subset::SelfLoop
        } else if hop_j <= hop_i {
            Subset::Centripetal
        } else {
            Subset::Centrifugal
        }
    }
}

/// Subset label for every ordered pair `(i, j)` with hop distance at most one.
#[derive(Clone, Debug, PartialEq)]
pub struct Labeling {
    num_vertices: usize,
    labels: Vec<Option<Subset>>,
}

impl Labeling {
    pub fn num_vertices(&self) -> usize {
        self.num_vertices
    }

    pub fn get(&self, i: usize, j: usize) -> Option<Subset> {
        self.labels[i * self.num_vertices + j]
    }

    /// Labeled neighbors of `i` (including `i` itself) with their subsets.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, Subset)> + '_ {
        (0..self.num_vertices).filter_map(move |j| self.get(i, j).map(|s| (j, s)))
    }

    /// Number of members of subset `k` in the neighborhood of `i`.
    pub fn count(&self, i: usize, k: Subset) -> usize {
        self.row(i).filter(|&(_, s)| s == k).count()
    }
}

/// Labels every 1-hop pair of a connected graph.
pub fn partition(graph: &SkeletonGraph) -> Result<Labeling> {
    let hops = graph.center_hops()?;
    let n = graph.num_vertices();
    let mut labels = vec![None; n * n];
    for i in 0..n {
        for j in 0..n {
            if i == j || graph.is_adjacent(i, j) {
                labels[i * n + j] = Some(Subset::classify(i, j, hops[i], hops[j]));
            }
        }
    }
    Ok(Labeling {
        num_vertices: n,
        labels,
    })
}

/// Per-subset row-normalized adjacency plus its row sums.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionedAdjacency {
    subsets: Vec<Matrix>,
    rowsums: Vec<Vec<f64>>,
    center_hops: Vec<usize>,
    links: BTreeSet<(usize, usize)>,
}

impl PartitionedAdjacency {
    pub fn num_vertices(&self) -> usize {
        self.center_hops.len()
    }

    pub fn num_subsets(&self) -> usize {
        self.subsets.len()
    }

    pub fn subsets(&self) -> &[Matrix] {
        &self.subsets
    }

    pub fn subset(&self, k: usize) -> &Matrix {
        &self.subsets[k]
    }

    /// Row sums of subset `k` (the `N x 1` vector that is broadcast over channels).
    pub fn rowsum(&self, k: usize) -> &[f64] {
        &self.rowsums[k]
    }

    pub fn rowsum_matrix(&self, k: usize) -> Matrix {
        Matrix::column(&self.rowsums[k])
    }

    /// Undirected links (bones plus any extra links) the partition was built from.
    pub fn links(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.links.iter().copied()
    }

    /// Labeling the adjacency was normalized from.
    pub fn labeling(&self) -> Labeling {
        labeling_from_links(&self.center_hops, &self.links)
    }

    /// Returns the adjacency with extra undirected links added, partitioned by
    /// the same center distances and renormalized. Links already present are
    /// ignored, so adding nothing new returns an identical value.
    pub fn with_extra_links(&self, extra: &[(usize, usize)]) -> Result<Self> {
        let n = self.num_vertices();
        let mut links = self.links.clone();
        for &(i, j) in extra {
            if i >= n || j >= n {
                return Err(Error::arg(format!("extra link ({i}, {j}) out of range for {n} vertices")));
            }
            if i != j {
                links.insert((i.min(j), i.max(j)));
            }
        }
        if links == self.links {
            return Ok(self.clone());
        }
        Ok(build_adjacency(self.center_hops.clone(), links))
    }
}

fn labeling_from_links(hops: &[usize], links: &BTreeSet<(usize, usize)>) -> Labeling {
    let n = hops.len();
    let mut labels = vec![None; n * n];
    for i in 0..n {
        labels[i * n + i] = Some(Subset::SelfLoop);
    }
    for &(a, b) in links {
        labels[a * n + b] = Some(Subset::classify(a, b, hops[a], hops[b]));
        labels[b * n + a] = Some(Subset::classify(b, a, hops[b], hops[a]));
    }
    Labeling {
        num_vertices: n,
        labels,
    }
}

fn build_adjacency(center_hops: Vec<usize>, links: BTreeSet<(usize, usize)>) -> PartitionedAdjacency {
    let labeling = labeling_from_links(&center_hops, &links);
    let n = center_hops.len();
    let mut subsets = vec![Matrix::zeros(n, n); Subset::ALL.len()];
    for i in 0..n {
        for k in Subset::ALL {
            let z = labeling.count(i, k);
            if z == 0 {
                continue;
            }
            let w = 1.0 / z as f64;
            for (j, s) in labeling.row(i) {
                if s == k {
                    subsets[k.index()].set(i, j, w);
                }
            }
        }
    }
    let rowsums = subsets
        .iter()
        .map(|a| (0..n).map(|i| a.row(i).iter().sum()).collect())
        .collect();
    PartitionedAdjacency {
        subsets,
        rowsums,
        center_hops,
        links,
    }
}

/// Row-normalizes each subset of a labeling: `A_k[i][j] = 1 / |S_k(i)|`.
pub fn normalized_adjacency(graph: &SkeletonGraph, labeling: &Labeling) -> Result<PartitionedAdjacency> {
    if labeling.num_vertices() != graph.num_vertices() {
        return Err(Error::dim(
            "normalized_adjacency",
            graph.num_vertices(),
            labeling.num_vertices(),
        ));
    }
    let hops = graph.center_hops()?;
    let expected = labeling_from_links(&hops, &graph.edges.iter().copied().collect());
    if &expected != labeling {
        return Err(Error::arg("labeling does not match the graph's partition"));
    }
    Ok(build_adjacency(hops, graph.edges.iter().copied().collect()))
}

/// Convenience: partition and normalize in one step.
pub fn adjacency(graph: &SkeletonGraph) -> Result<PartitionedAdjacency> {
    let labeling = partition(graph)?;
    normalized_adjacency(graph, &labeling)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path3() -> SkeletonGraph {
        SkeletonGraph::new(3, &[(0, 1), (1, 2)], 0).unwrap()
    }

    #[test]
    fn path_hops() {
        let g = path3();
        assert_eq!(g.hop_distance(0, 2), 2);
        assert_eq!(g.hop_distance(2, 0), 2);
        assert_eq!(g.hop_distance(1, 1), 0);
    }

    #[test]
    fn single_vertex() {
        let g = SkeletonGraph::new(1, &[], 0).unwrap();
        assert_eq!(g.hop_distance(0, 0), 0);
        let adj = adjacency(&g).unwrap();
        assert_eq!(adj.subset(0), &Matrix::identity(1));
        assert_eq!(adj.subset(1), &Matrix::zeros(1, 1));
    }

    #[test]
    fn build_errors_and_dedup() {
        assert!(SkeletonGraph::new(3, &[(0, 3)], 0).is_err());
        assert!(SkeletonGraph::new(3, &[(0, 1)], 3).is_err());
        assert!(SkeletonGraph::new(3, &[(1, 1)], 0).is_err());
        let g = SkeletonGraph::new(3, &[(0, 1), (1, 0), (0, 1)], 0).unwrap();
        assert_eq!(g.edges(), &[(0, 1)]);
    }

    #[test]
    fn unreachable_sentinel_and_disconnected_partition() {
        let g = SkeletonGraph::new(4, &[(0, 1)], 0).unwrap();
        assert_eq!(g.hop_distance(0, 2), UNREACHABLE);
        match partition(&g) {
            Err(Error::Disconnected(v)) => assert_eq!(v, vec![2, 3]),
            other => panic!("expected disconnected error, got {other:?}"),
        }
    }

    #[test]
    fn ntu_within_eight_hops_of_center() {
        let g = SkeletonGraph::ntu();
        assert_eq!(g.num_vertices(), 25);
        assert_eq!(g.edges().len(), 24);
        let hops = g.center_hops().unwrap();
        assert!(hops.iter().all(|&h| h <= 8));
    }

    #[test]
    fn path_partition_labels() {
        let lab = partition(&path3()).unwrap();
        assert_eq!(lab.get(1, 0), Some(Subset::Centripetal));
        assert_eq!(lab.get(1, 1), Some(Subset::SelfLoop));
        assert_eq!(lab.get(1, 2), Some(Subset::Centrifugal));
        assert_eq!(lab.get(0, 0), Some(Subset::SelfLoop));
        assert_eq!(lab.get(0, 2), None);
    }

    #[test]
    fn equidistant_neighbors_are_centripetal() {
        // triangle 1-2 both one hop from center 0
        let g = SkeletonGraph::new(3, &[(0, 1), (0, 2), (1, 2)], 0).unwrap();
        let lab = partition(&g).unwrap();
        assert_eq!(lab.get(1, 2), Some(Subset::Centripetal));
        assert_eq!(lab.get(2, 1), Some(Subset::Centripetal));
    }

    #[test]
    fn path_normalized_adjacency() {
        let adj = adjacency(&path3()).unwrap();
        assert_eq!(adj.num_subsets(), 3);
        assert_eq!(adj.subset(0), &Matrix::identity(3));
        assert_eq!(adj.rowsum(0), &[1.0, 1.0, 1.0]);
        let s3 = adj.subset(Subset::Centrifugal.index());
        assert_eq!(s3.row(0), &[0.0, 1.0, 0.0]);
        assert_eq!(s3.row(2), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn rowsum_total_matches_loop_oracle() {
        let g = SkeletonGraph::ntu();
        let adj = adjacency(&g).unwrap();
        let lab = partition(&g).unwrap();
        for i in 0..g.num_vertices() {
            let total: f64 = (0..3).map(|k| adj.rowsum(k)[i]).sum();
            // each nonempty subset row contributes exactly one
            let nonempty = Subset::ALL.iter().filter(|&&k| lab.count(i, k) > 0).count();
            assert!((total - nonempty as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn extra_link_hand_foot() {
        let g = SkeletonGraph::ntu();
        let adj = adjacency(&g).unwrap();
        let hand = NTU_LEFT_HAND;
        let foot = NTU_RIGHT_FOOT;
        let total_before: f64 = (0..3).map(|k| adj.subset(k).get(foot, hand)).sum();
        assert_eq!(total_before, 0.0);
        let linked = adj.with_extra_links(&[(hand, foot)]).unwrap();
        let total_after: f64 = (0..3).map(|k| linked.subset(k).get(foot, hand)).sum();
        assert!(total_after > 0.0);
        assert!(linked.labeling().get(foot, hand).is_some());
    }

    #[test]
    fn extra_links_identity_cases() {
        let g = SkeletonGraph::ntu();
        let adj = adjacency(&g).unwrap();
        assert_eq!(adj.with_extra_links(&[]).unwrap(), adj);
        let (a, b) = g.edges()[3];
        assert_eq!(adj.with_extra_links(&[(b, a)]).unwrap(), adj);
        assert!(adj.with_extra_links(&[(0, 25)]).is_err());
    }

    #[test]
    fn graph_file_round_trip_and_errors() {
        let g = SkeletonGraph::ntu();
        assert_eq!(SkeletonGraph::parse(&g.to_text()).unwrap(), g);
        let text = "V 3 center 0\n\nE 0 1\nE 1 2\n";
        assert_eq!(SkeletonGraph::parse(text).unwrap(), path3());
        assert!(matches!(
            SkeletonGraph::parse("V 3 center 0\nE 0 1 junk\n"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(SkeletonGraph::parse("E 0 1\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(SkeletonGraph::parse("V 3 center 0 x\n"), Err(Error::Parse { .. })));
        assert!(matches!(SkeletonGraph::parse("V 3 center 0\nE 0 -1\n"), Err(Error::Parse { .. })));
        assert!(matches!(SkeletonGraph::parse(""), Err(Error::Parse { .. })));
        assert!(matches!(SkeletonGraph::parse("V 2 center 0\nE 0 5\n"), Err(Error::Argument(_))));
    }
}
