//! Graph comparison metrics: APLS (path-length similarity between sampled
//! vertex pairs) and TOPO (precision and recall of densified points).

use alloc::collections::{BTreeMap, BTreeSet, BinaryHeap};
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::math;
use crate::model::{Point, RoadGraph};
use crate::nms::SpatialGrid;
use crate::raster::point_segment_distance;

/// Metric parameters. They are part of every reported number: scores are
/// comparable only when computed with the same values.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct MetricConfig {
    /// Max distance from a control point to the graph it is snapped onto.
    pub snap_radius: f64,
    /// Control pairs per APLS direction; all pairs are used if there are fewer.
    pub n_pairs: usize,
    /// TOPO matching distance.
    pub match_radius: f64,
    /// TOPO densification spacing.
    pub interval: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            snap_radius: 4.0,
            n_pairs: 500,
            match_radius: 8.0,
            interval: 5.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TopoResult {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub matched: usize,
    pub gt_points: usize,
    pub prop_points: usize,
}

impl TopoResult {
    fn from_counts(matched: usize, gt_points: usize, prop_points: usize) -> Self {
        if gt_points == 0 && prop_points == 0 {
            return Self {
                precision: 1.0,
                recall: 1.0,
                f1: 1.0,
                matched,
                gt_points,
                prop_points,
            };
        }
        let ratio = |n: usize| if n == 0 { 0.0 } else { matched as f64 / n as f64 };
        let precision = ratio(prop_points);
        let recall = ratio(gt_points);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f1,
            matched,
            gt_points,
            prop_points,
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
struct HeapEntry(f64, usize);

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then(other.1.cmp(&self.1))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Dijkstra from a set of seeded start distances.
fn dijkstra(graph: &RoadGraph, adj: &[Vec<(usize, f64)>], seeds: &[(usize, f64)]) -> Vec<f64> {
    let mut dist = vec![f64::INFINITY; graph.vertices.len()];
    let mut heap = BinaryHeap::new();
    for &(v, d) in seeds {
        if d < dist[v] {
            dist[v] = d;
            heap.push(HeapEntry(d, v));
        }
    }
    while let Some(HeapEntry(d, u)) = heap.pop() {
        if d > dist[u] {
            continue;
        }
        for &(v, w) in &adj[u] {
            let nd = d + w;
            if nd < dist[v] {
                dist[v] = nd;
                heap.push(HeapEntry(nd, v));
            }
        }
    }
    dist
}

fn weighted_adjacency(graph: &RoadGraph) -> Vec<Vec<(usize, f64)>> {
    let mut adj = vec![Vec::new(); graph.vertices.len()];
    for (e, &(i, j)) in graph.edges.iter().enumerate() {
        let w = graph.edge_length(e);
        adj[i].push((j, w));
        adj[j].push((i, w));
    }
    adj
}

/// Length of the shortest path between two vertices along Euclidean edge
/// weights; `None` when they are disconnected.
pub fn shortest_path_length(graph: &RoadGraph, a: usize, b: usize) -> Result<Option<f64>> {
    let n = graph.vertices.len();
    if a >= n || b >= n {
        return Err(Error::arg(format!("vertex id out of range for {n} vertices")));
    }
    let dist = dijkstra(graph, &weighted_adjacency(graph), &[(a, 0.0)]);
    Ok(dist[b].is_finite().then_some(dist[b]))
}

/// A point on an edge, `offset` pixels from the edge's first endpoint.
#[derive(Debug, Clone, Copy)]
struct Snap {
    edge: usize,
    offset: f64,
}

fn snap(graph: &RoadGraph, p: Point, radius: f64) -> Option<Snap> {
    let mut best: Option<(f64, Snap)> = None;
    for (e, &(i, j)) in graph.edges.iter().enumerate() {
        let (a, b) = (graph.point(i), graph.point(j));
        let d = point_segment_distance(p, a, b);
        if d > radius || best.is_some_and(|(bd, _)| bd <= d) {
            continue;
        }
        let len2 = a.dist2(b);
        let t = if len2 == 0.0 {
            0.0
        } else {
            (((p.x - a.x) * (b.x - a.x) + (p.y - a.y) * (b.y - a.y)) / len2).clamp(0.0, 1.0)
        };
        best = Some((
            d,
            Snap {
                edge: e,
                offset: t * math::sqrt(len2),
            },
        ));
    }
    best.map(|(_, s)| s)
}

fn component_ids(graph: &RoadGraph) -> Vec<usize> {
    let adj = graph.adjacency();
    let mut comp = vec![usize::MAX; adj.len()];
    let mut next = 0;
    for s in 0..adj.len() {
        if comp[s] != usize::MAX {
            continue;
        }
        comp[s] = next;
        let mut stack = vec![s];
        while let Some(u) = stack.pop() {
            for &v in &adj[u] {
                if comp[v] == usize::MAX {
                    comp[v] = next;
                    stack.push(v);
                }
            }
        }
        next += 1;
    }
    comp
}

/// Control pairs `(a, b)`, `a < b`, between connected vertices of degree at
/// least one. All of them when there are at most `n_pairs`, otherwise a
/// seeded sample of `n_pairs` distinct pairs.
pub fn control_pairs(graph: &RoadGraph, n_pairs: usize, seed: u64) -> Vec<(usize, usize)> {
    let deg = graph.degrees();
    let comp = component_ids(graph);
    let control: Vec<usize> = (0..deg.len()).filter(|&v| deg[v] > 0).collect();
    let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
    for &v in &control {
        *sizes.entry(comp[v]).or_default() += 1;
    }
    let total: usize = sizes.values().map(|&s| s * (s - 1) / 2).sum();
    if total <= n_pairs {
        let mut out = Vec::with_capacity(total);
        for (k, &a) in control.iter().enumerate() {
            for &b in &control[k + 1..] {
                if comp[a] == comp[b] {
                    out.push((a, b));
                }
            }
        }
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = BTreeSet::new();
    let mut out = Vec::with_capacity(n_pairs);
    while out.len() < n_pairs {
        let a = control[rng.random_range(0..control.len())];
        let b = control[rng.random_range(0..control.len())];
        let key = (a.min(b), a.max(b));
        if a != b && comp[a] == comp[b] && chosen.insert(key) {
            out.push(key);
        }
    }
    out
}

/// One-way APLS: control pairs are taken on `reference` and their path
/// lengths compared against `candidate`. Returns `None` when `reference`
/// has no connected pair to sample.
pub fn apls_one_way(
    reference: &RoadGraph,
    candidate: &RoadGraph,
    config: &MetricConfig,
    seed: u64,
) -> Option<f64> {
    let pairs = control_pairs(reference, config.n_pairs, seed);
    if pairs.is_empty() {
        return None;
    }
    let ref_adj = weighted_adjacency(reference);
    let cand_adj = weighted_adjacency(candidate);
    let mut ref_dist: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut snaps: BTreeMap<usize, Option<Snap>> = BTreeMap::new();
    let mut cand_dist: BTreeMap<usize, Vec<f64>> = BTreeMap::new();

    let mut penalty = 0.0;
    for &(a, b) in &pairs {
        let l_ref = ref_dist
            .entry(a)
            .or_insert_with(|| dijkstra(reference, &ref_adj, &[(a, 0.0)]))[b];
        let sa = *snaps
            .entry(a)
            .or_insert_with(|| snap(candidate, reference.point(a), config.snap_radius));
        let sb = *snaps
            .entry(b)
            .or_insert_with(|| snap(candidate, reference.point(b), config.snap_radius));
        let (Some(sa), Some(sb)) = (sa, sb) else {
            penalty += 1.0;
            continue;
        };
        let dist = cand_dist.entry(a).or_insert_with(|| {
            let (i, j) = candidate.edges[sa.edge];
            let len = candidate.edge_length(sa.edge);
            dijkstra(candidate, &cand_adj, &[(i, sa.offset), (j, len - sa.offset)])
        });
        let (i, j) = candidate.edges[sb.edge];
        let len = candidate.edge_length(sb.edge);
        let mut l_cand = (dist[i] + sb.offset).min(dist[j] + len - sb.offset);
        if sa.edge == sb.edge {
            l_cand = l_cand.min((sa.offset - sb.offset).abs());
        }
        penalty += if !l_cand.is_finite() {
            1.0
        } else if l_ref > 0.0 {
            ((l_ref - l_cand).abs() / l_ref).min(1.0)
        } else {
            // Coincident reference vertices.
            f64::from(l_cand > 0.0)
        };
    }
    Some(1.0 - penalty / pairs.len() as f64)
}

/// Symmetric APLS: the mean of both one-way scores. A direction whose source
/// graph has no connected pair contributes 0.
pub fn apls(gt: &RoadGraph, prop: &RoadGraph, config: &MetricConfig, seed: u64) -> Result<f64> {
    if gt.edges.is_empty() {
        return Err(Error::EmptyReference);
    }
    let forward = apls_one_way(gt, prop, config, seed).unwrap_or(0.0);
    let backward = apls_one_way(prop, gt, config, seed).unwrap_or(0.0);
    Ok(0.5 * (forward + backward))
}

/// Points spaced about `interval` apart along every edge chain. Chains run
/// between vertices of degree other than two; each such vertex contributes
/// one point, and each chain is split into `round(length / interval)` equal
/// steps (at least one). Isolated vertices contribute nothing.
pub fn densify(graph: &RoadGraph, interval: f64) -> Vec<Point> {
    let adj = graph.adjacency();
    let deg: Vec<usize> = adj.iter().map(Vec::len).collect();
    let mut out = Vec::new();
    let mut used = vec![false; graph.edges.len()];
    let edge_index: BTreeMap<(usize, usize), usize> = graph
        .edges
        .iter()
        .enumerate()
        .map(|(e, &(i, j))| ((i.min(j), i.max(j)), e))
        .collect();
    let edge_id = |a: usize, b: usize| edge_index[&(a.min(b), a.max(b))];

    let walk = |start: usize, first: usize, used: &mut [bool], out: &mut Vec<Point>| {
        let mut chain = vec![graph.point(start)];
        let (mut prev, mut cur) = (start, first);
        used[edge_id(start, first)] = true;
        loop {
            chain.push(graph.point(cur));
            if deg[cur] != 2 || cur == start {
                break;
            }
            let next = if adj[cur][0] == prev { adj[cur][1] } else { adj[cur][0] };
            let e = edge_id(cur, next);
            if used[e] {
                break;
            }
            used[e] = true;
            prev = cur;
            cur = next;
        }
        sample_chain(&chain, interval, out);
    };

    for v in 0..adj.len() {
        if deg[v] != 0 && deg[v] != 2 {
            out.push(graph.point(v));
            for &n in &adj[v] {
                if !used[edge_id(v, n)] {
                    walk(v, n, &mut used, &mut out);
                }
            }
        }
    }
    // Remaining edges form cycles of degree-two vertices.
    for v in 0..adj.len() {
        if deg[v] == 2 && adj[v].iter().any(|&n| !used[edge_id(v, n)]) {
            out.push(graph.point(v));
            let n = adj[v][0];
            walk(v, n, &mut used, &mut out);
        }
    }
    out
}

/// Interior points of a polyline at equal arc-length steps.
fn sample_chain(chain: &[Point], interval: f64, out: &mut Vec<Point>) {
    let seg: Vec<f64> = chain.windows(2).map(|w| w[0].dist(w[1])).collect();
    let total: f64 = seg.iter().sum();
    let steps = (math::round(total / interval) as usize).max(1);
    let step = total / steps as f64;
    let mut k = 0;
    let mut acc = 0.0;
    for s in 1..steps {
        let target = s as f64 * step;
        while k + 1 < seg.len() && acc + seg[k] < target {
            acc += seg[k];
            k += 1;
        }
        let t = if seg[k] > 0.0 { ((target - acc) / seg[k]).clamp(0.0, 1.0) } else { 0.0 };
        out.push(chain[k].lerp(chain[k + 1], t));
    }
}

/// One-to-one greedy matching: candidate pairs within `radius`, closest first.
pub fn greedy_match(a: &[Point], b: &[Point], radius: f64) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let grid = SpatialGrid::build(b, radius);
    let r2 = radius * radius;
    let mut pairs = Vec::new();
    for (i, &p) in a.iter().enumerate() {
        grid.for_each_near(p, radius, |j| {
            let d2 = p.dist2(b[j]);
            if d2 <= r2 {
                pairs.push((d2, i, j));
            }
        });
    }
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut used_a = vec![false; a.len()];
    let mut used_b = vec![false; b.len()];
    let mut matched = 0;
    for (_, i, j) in pairs {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            matched += 1;
        }
    }
    matched
}

/// TOPO precision, recall and F1 over densified points.
pub fn topo(gt: &RoadGraph, prop: &RoadGraph, match_radius: f64, interval: f64) -> Result<TopoResult> {
    if !(match_radius > 0.0) || !(interval > 0.0) {
        return Err(Error::arg("match radius and interval must be positive"));
    }
    let g = densify(gt, interval);
    let p = densify(prop, interval);
    let matched = greedy_match(&g, &p, match_radius);
    Ok(TopoResult::from_counts(matched, g.len(), p.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn g(points: &[(f64, f64)], edges: &[(usize, usize)]) -> RoadGraph {
        RoadGraph::from_points(points, edges).unwrap()
    }

    fn grid_graph(nx: usize, ny: usize, spacing: f64) -> RoadGraph {
        let mut pts = Vec::new();
        let mut edges = Vec::new();
        for y in 0..ny {
            for x in 0..nx {
                pts.push((x as f64 * spacing, y as f64 * spacing));
                let v = y * nx + x;
                if x + 1 < nx {
                    edges.push((v, v + 1));
                }
                if y + 1 < ny {
                    edges.push((v, v + nx));
                }
            }
        }
        g(&pts, &edges)
    }

    #[test]
    fn shortest_paths() {
        let gr = g(&[(0.0, 0.0), (3.0, 0.0), (3.0, 4.0), (9.0, 9.0)], &[(0, 1), (1, 2)]);
        assert_eq!(shortest_path_length(&gr, 0, 0).unwrap(), Some(0.0));
        assert_eq!(shortest_path_length(&gr, 0, 2).unwrap(), Some(7.0));
        assert_eq!(shortest_path_length(&gr, 0, 3).unwrap(), None);
        assert!(shortest_path_length(&gr, 0, 4).is_err());
    }

    #[test]
    fn apls_identity_and_empty() {
        let gt = grid_graph(4, 3, 30.0);
        let cfg = MetricConfig::default();
        assert_eq!(apls(&gt, &gt, &cfg, 1).unwrap(), 1.0);
        let empty = RoadGraph::default();
        assert_eq!(apls(&gt, &empty, &cfg, 1).unwrap(), 0.0);
        assert!(matches!(apls(&empty, &gt, &cfg, 1), Err(Error::EmptyReference)));
    }

    #[test]
    fn apls_detour() {
        let gt = g(&[(0.0, 0.0), (100.0, 0.0)], &[(0, 1)]);
        let h = math::sqrt(60.0 * 60.0 - 50.0 * 50.0);
        let prop = g(&[(0.0, 0.0), (100.0, 0.0), (50.0, h)], &[(0, 2), (2, 1)]);
        let s = apls_one_way(&gt, &prop, &MetricConfig::default(), 0).unwrap();
        assert!((s - 0.8).abs() < 1e-12, "{s}");
    }

    #[test]
    fn apls_snaps_onto_edge_interiors() {
        // Reference vertices sit mid-edge on a straight candidate.
        let gt = g(&[(10.0, 0.0), (60.0, 0.0)], &[(0, 1)]);
        let prop = g(&[(0.0, 1.0), (100.0, 1.0)], &[(0, 1)]);
        let s = apls_one_way(&gt, &prop, &MetricConfig::default(), 0).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn control_pairs_enumerate_or_sample() {
        let gr = grid_graph(3, 3, 10.0);
        assert_eq!(control_pairs(&gr, 500, 0).len(), 36);
        let big = grid_graph(10, 10, 10.0);
        let a = control_pairs(&big, 100, 3);
        assert_eq!(a.len(), 100);
        assert_eq!(a, control_pairs(&big, 100, 3));
        let distinct: BTreeSet<_> = a.iter().collect();
        assert_eq!(distinct.len(), 100);
    }

    #[test]
    fn densify_spacing() {
        let line = g(&[(0.0, 0.0), (100.0, 0.0)], &[(0, 1)]);
        let pts = densify(&line, 5.0);
        assert_eq!(pts.len(), 21);
        // Splitting the line at an extra degree-two vertex changes nothing.
        let split = g(&[(0.0, 0.0), (100.0, 0.0), (37.0, 0.0)], &[(0, 2), (2, 1)]);
        let mut a: Vec<_> = pts.iter().map(|p| (p.x * 1e6).round() as i64).collect();
        let mut b: Vec<_> = densify(&split, 5.0).iter().map(|p| (p.x * 1e6).round() as i64).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
        // A square loop: 4 sides of 20 px, every vertex of degree two.
        let sq = g(
            &[(0.0, 0.0), (20.0, 0.0), (20.0, 20.0), (0.0, 20.0)],
            &[(0, 1), (1, 2), (2, 3), (3, 0)],
        );
        assert_eq!(densify(&sq, 5.0).len(), 16);
    }

    #[test]
    fn topo_examples() {
        let gt = grid_graph(3, 3, 40.0);
        let same = topo(&gt, &gt, 8.0, 5.0).unwrap();
        assert_eq!((same.precision, same.recall, same.f1), (1.0, 1.0, 1.0));
        let far = gt.translated(1000.0, 1000.0);
        let mut verts = gt.vertices.clone();
        verts.extend(far.vertices.iter().cloned());
        let n = gt.vertices.len();
        let mut edges = gt.edges.clone();
        edges.extend(far.edges.iter().map(|&(i, j)| (i + n, j + n)));
        let doubled = RoadGraph::new(verts, edges).unwrap();
        let r = topo(&gt, &doubled, 8.0, 5.0).unwrap();
        assert_eq!(r.recall, 1.0);
        assert_eq!(r.precision, 0.5);
        let empty = RoadGraph::default();
        let e = topo(&empty, &empty, 8.0, 5.0).unwrap();
        assert_eq!((e.precision, e.recall, e.f1), (1.0, 1.0, 1.0));
        let z = topo(&gt, &empty, 8.0, 5.0).unwrap();
        assert_eq!((z.precision, z.recall, z.f1), (0.0, 0.0, 0.0));
        assert!(topo(&gt, &gt, 0.0, 5.0).is_err());
    }

    #[test]
    fn greedy_prefers_closest() {
        let a = [Point::new(0.0, 0.0), Point::new(3.0, 0.0)];
        let b = [Point::new(2.0, 0.0)];
        assert_eq!(greedy_match(&a, &b, 8.0), 1);
        let b2 = [Point::new(2.0, 0.0), Point::new(-5.0, 0.0)];
        assert_eq!(greedy_match(&a, &b2, 8.0), 2);
    }

    fn arb_subgraph() -> impl Strategy<Value = (RoadGraph, Vec<bool>, Vec<bool>)> {
        (2usize..5, 2usize..5).prop_flat_map(|(nx, ny)| {
            let gr = grid_graph(nx, ny, 25.0);
            let m = gr.edges.len();
            (
                Just(gr),
                proptest::collection::vec(any::<bool>(), m),
                proptest::collection::vec(any::<bool>(), m),
            )
        })
    }

    fn keep(gr: &RoadGraph, mask: &[bool]) -> RoadGraph {
        let edges = gr
            .edges
            .iter()
            .zip(mask)
            .filter(|(_, &k)| k)
            .map(|(&e, _)| e)
            .collect();
        RoadGraph::new(gr.vertices.clone(), edges).unwrap()
    }

    proptest! {
        #[test]
        fn self_comparison_is_perfect((gr, _, _) in arb_subgraph()) {
            let cfg = MetricConfig::default();
            prop_assert_eq!(apls(&gr, &gr, &cfg, 5).unwrap(), 1.0);
            let t = topo(&gr, &gr, 8.0, 5.0).unwrap();
            prop_assert_eq!(t.f1, 1.0);
        }

        #[test]
        fn removing_edges_never_helps((gr, m1, m2) in arb_subgraph()) {
            let cfg = MetricConfig::default();
            let larger = keep(&gr, &m1);
            let both: Vec<bool> = m1.iter().zip(&m2).map(|(a, b)| *a && *b).collect();
            let smaller = keep(&gr, &both);
            let big = apls_one_way(&gr, &larger, &cfg, 2).unwrap();
            let small = apls_one_way(&gr, &smaller, &cfg, 2).unwrap();
            prop_assert!(small <= big + 1e-12);
            prop_assert!((0.0..=1.0).contains(&small));
            let t = topo(&gr, &smaller, 8.0, 5.0).unwrap();
            if t.prop_points > 0 {
                prop_assert_eq!(t.precision, 1.0);
            }
        }
    }
}
