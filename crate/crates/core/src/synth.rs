//! Synthetic road scenes: planar graphs, their probability rasters with noise
//! and occlusion gaps, and labelled edge datasets for training the head.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::assembly::{detect_vertices, MaskProvider, PatchMasks};
use crate::error::{Error, Result};
use crate::features::{edge_features, pair_candidates, vertex_points};
use crate::head::{directed_tokens, train, HeadShape, HeadWeights, Matrix, TrainBatch, TrainConfig, TrainOutcome};
use crate::math;
use crate::model::{ExtractionConfig, Point, Raster, RoadGraph, Vertex};
use crate::raster::{point_segment_distance, rasterize_graph, Pyramid, DEFAULT_THICKNESS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum GraphFamily {
    /// Jittered lattice.
    Grid,
    /// Randomly grown tree with bounded branching.
    Tree,
    /// Relative neighbourhood graph of well-spaced random points.
    RandomPlanar,
}

/// Occluded stretch of road, in image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Gap {
    pub a: Point,
    pub b: Point,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct SceneSpec {
    pub seed: u64,
    pub family: GraphFamily,
    /// Square image side in pixels.
    pub size: usize,
    pub noise_sigma: f64,
    /// Random gaps placed on the interior of distinct long edges.
    pub random_gaps: usize,
    pub gap_length: f64,
    /// Extra gaps at fixed positions.
    pub gaps: Vec<Gap>,
    pub thickness: f64,
    /// Minimum distance between graph vertices.
    pub min_spacing: f64,
    /// Keep vertices this far from the image border.
    pub margin: f64,
    pub keypoint_sigma: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            family: GraphFamily::RandomPlanar,
            size: 256,
            noise_sigma: 0.05,
            random_gaps: 0,
            gap_length: 14.0,
            gaps: Vec::new(),
            thickness: DEFAULT_THICKNESS,
            min_spacing: 48.0,
            margin: 16.0,
            keypoint_sigma: 2.0,
        }
    }
}

impl SceneSpec {
    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub gt: RoadGraph,
    pub road: Raster,
    pub keypoint: Raster,
    /// All occluded stretches, explicit ones first.
    pub gaps: Vec<Gap>,
    /// For each gap, the ground-truth edge it lies on, if any.
    pub gap_edges: Vec<Option<usize>>,
}

fn random_point(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Point {
    Point::new(
        math::round(rng.random_range(lo..hi)),
        math::round(rng.random_range(lo..hi)),
    )
}

fn grid_graph(rng: &mut ChaCha8Rng, spec: &SceneSpec) -> RoadGraph {
    let span = spec.size as f64 - 2.0 * spec.margin;
    let n = ((span / spec.min_spacing.max(1.0)) as usize).clamp(1, 6) + 1;
    let step = span / (n - 1) as f64;
    let jitter = step * 0.12;
    let mut pts = Vec::new();
    for y in 0..n {
        for x in 0..n {
            let px = spec.margin + x as f64 * step + rng.random_range(-jitter..=jitter);
            let py = spec.margin + y as f64 * step + rng.random_range(-jitter..=jitter);
            let (lo, hi) = (spec.margin, spec.size as f64 - spec.margin);
            pts.push((math::round(px.clamp(lo, hi)), math::round(py.clamp(lo, hi))));
        }
    }
    let mut edges = Vec::new();
    for y in 0..n {
        for x in 0..n {
            let v = y * n + x;
            if x + 1 < n && rng.random_bool(0.85) {
                edges.push((v, v + 1));
            }
            if y + 1 < n && rng.random_bool(0.85) {
                edges.push((v, v + n));
            }
        }
    }
    drop_isolated(&pts, &edges)
}

fn drop_isolated(pts: &[(f64, f64)], edges: &[(usize, usize)]) -> RoadGraph {
    let mut deg = vec![0; pts.len()];
    for &(a, b) in edges {
        deg[a] += 1;
        deg[b] += 1;
    }
    let mut map = vec![usize::MAX; pts.len()];
    let mut kept = Vec::new();
    for (i, &p) in pts.iter().enumerate() {
        if deg[i] > 0 {
            map[i] = kept.len();
            kept.push(p);
        }
    }
    let edges: Vec<_> = edges.iter().map(|&(a, b)| (map[a], map[b])).collect();
    RoadGraph::from_points(&kept, &edges).expect("generated graph is valid")
}

fn segments_clear(a: Point, b: Point, graph_pts: &[Point], edges: &[(usize, usize)], skip: usize, clearance: f64) -> bool {
    for &(i, j) in edges {
        if i == skip || j == skip {
            continue;
        }
        let (c, d) = (graph_pts[i], graph_pts[j]);
        if segment_distance(a, b, c, d) < clearance {
            return false;
        }
    }
    true
}

fn segment_distance(a: Point, b: Point, c: Point, d: Point) -> f64 {
    let cross = |o: Point, p: Point, q: Point| (p.x - o.x) * (q.y - o.y) - (p.y - o.y) * (q.x - o.x);
    let (d1, d2) = (cross(a, b, c), cross(a, b, d));
    let (d3, d4) = (cross(c, d, a), cross(c, d, b));
    if d1 * d2 < 0.0 && d3 * d4 < 0.0 {
        return 0.0;
    }
    point_segment_distance(a, c, d)
        .min(point_segment_distance(b, c, d))
        .min(point_segment_distance(c, a, b))
        .min(point_segment_distance(d, a, b))
}

fn angle_between(u: Point, v: Point) -> f64 {
    let dot = u.x * v.x + u.y * v.y;
    let n = math::hypot(u.x, u.y) * math::hypot(v.x, v.y);
    libm::acos((dot / n).clamp(-1.0, 1.0))
}

fn tree_graph(rng: &mut ChaCha8Rng, spec: &SceneSpec) -> RoadGraph {
    let lo = spec.margin;
    let hi = spec.size as f64 - spec.margin;
    let target = ((hi - lo) * (hi - lo) / (spec.min_spacing * spec.min_spacing * 1.6)) as usize;
    let target = target.clamp(3, 40);
    let mut pts = vec![random_point(rng, lo, hi)];
    let mut edges: Vec<(usize, usize)> = Vec::new();
    let mut deg = vec![0usize];
    let min_angle = 55f64.to_radians();
    for _ in 0..target * 60 {
        if pts.len() >= target {
            break;
        }
        let parent = rng.random_range(0..pts.len());
        if deg[parent] >= 3 {
            continue;
        }
        let theta = rng.random_range(0.0..core::f64::consts::TAU);
        let len = rng.random_range(spec.min_spacing..spec.min_spacing * 1.8);
        let p = pts[parent];
        let q = Point::new(
            math::round(p.x + len * math::cos(theta)),
            math::round(p.y + len * math::sin(theta)),
        );
        if !(lo..=hi).contains(&q.x) || !(lo..=hi).contains(&q.y) {
            continue;
        }
        if pts.iter().any(|&o| o.dist(q) < spec.min_spacing) {
            continue;
        }
        let dir = Point::new(q.x - p.x, q.y - p.y);
        let sharp = edges.iter().any(|&(i, j)| {
            let other = if i == parent { j } else if j == parent { i } else { return false };
            let o = pts[other];
            angle_between(dir, Point::new(o.x - p.x, o.y - p.y)) < min_angle
        });
        if sharp || !segments_clear(p, q, &pts, &edges, parent, spec.min_spacing * 0.5) {
            continue;
        }
        pts.push(q);
        deg.push(1);
        deg[parent] += 1;
        edges.push((parent, pts.len() - 1));
    }
    let raw: Vec<(f64, f64)> = pts.iter().map(|p| (p.x, p.y)).collect();
    RoadGraph::from_points(&raw, &edges).expect("generated tree is valid")
}

fn planar_graph(rng: &mut ChaCha8Rng, spec: &SceneSpec) -> RoadGraph {
    let lo = spec.margin;
    let hi = spec.size as f64 - spec.margin;
    let mut pts: Vec<Point> = Vec::new();
    for _ in 0..2000 {
        let q = random_point(rng, lo, hi);
        if pts.iter().all(|&o| o.dist(q) >= spec.min_spacing) {
            pts.push(q);
        }
    }
    // Relative neighbourhood graph: connected, planar, no angle below 60°.
    let mut edges: Vec<(usize, usize)> = Vec::new();
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            let d = pts[i].dist(pts[j]);
            let blocked = (0..pts.len()).any(|k| {
                k != i && k != j && pts[k].dist(pts[i]).max(pts[k].dist(pts[j])) < d
            });
            if !blocked {
                edges.push((i, j));
            }
        }
    }
    soften_bends(&pts, &mut edges, spec.min_spacing * 0.5);
    let raw: Vec<(f64, f64)> = pts.iter().map(|p| (p.x, p.y)).collect();
    drop_isolated(&raw, &edges)
}

/// Sharpest allowed turn at a degree-two vertex; interior angle in radians.
const MIN_BEND_ANGLE: f64 = 150.0 * core::f64::consts::PI / 180.0;

/// Removes sharp bends at degree-two vertices. The bend is replaced by a
/// straight edge when that edge keeps its clearance, otherwise the vertex is
/// dropped with both of its edges.
fn soften_bends(pts: &[Point], edges: &mut Vec<(usize, usize)>, clearance: f64) {
    loop {
        let mut adj = vec![Vec::new(); pts.len()];
        for &(a, b) in edges.iter() {
            adj[a].push(b);
            adj[b].push(a);
        }
        let bend = (0..pts.len()).find(|&v| {
            if adj[v].len() != 2 {
                return false;
            }
            let p = pts[v];
            let (u, w) = (pts[adj[v][0]], pts[adj[v][1]]);
            angle_between(Point::new(u.x - p.x, u.y - p.y), Point::new(w.x - p.x, w.y - p.y)) < MIN_BEND_ANGLE
        });
        let Some(v) = bend else { return };
        let (u, w) = (adj[v][0], adj[v][1]);
        edges.retain(|&(a, b)| a != v && b != v);
        let direct = !edges.contains(&(u.min(w), u.max(w)))
            && edges.iter().all(|&(a, b)| {
                a == u || a == w || b == u || b == w || segment_distance(pts[u], pts[w], pts[a], pts[b]) >= clearance
            })
            && edges
                .iter()
                .flat_map(|&(a, b)| [a, b])
                .all(|k| k == u || k == w || point_segment_distance(pts[k], pts[u], pts[w]) >= clearance);
        if direct {
            edges.push((u.min(w), u.max(w)));
        }
    }
}

/// Ground-truth graph of a scene.
pub fn make_graph(spec: &SceneSpec) -> RoadGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    match spec.family {
        GraphFamily::Grid => grid_graph(&mut rng, spec),
        GraphFamily::Tree => tree_graph(&mut rng, spec),
        GraphFamily::RandomPlanar => planar_graph(&mut rng, spec),
    }
}

/// Zeroes pixels whose projection falls inside the gap and whose
/// perpendicular distance to it is at most `half_width`.
fn apply_gap(road: &mut Raster, gap: &Gap, half_width: f64) {
    let (dx, dy) = (gap.b.x - gap.a.x, gap.b.y - gap.a.y);
    let len2 = dx * dx + dy * dy;
    if len2 == 0.0 {
        return;
    }
    let pad = half_width + 1.0;
    let x0 = math::floor(gap.a.x.min(gap.b.x) - pad).max(0.0) as usize;
    let y0 = math::floor(gap.a.y.min(gap.b.y) - pad).max(0.0) as usize;
    let x1 = (math::ceil(gap.a.x.max(gap.b.x) + pad) as usize).min(road.width().saturating_sub(1));
    let y1 = (math::ceil(gap.a.y.max(gap.b.y) + pad) as usize).min(road.height().saturating_sub(1));
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (px, py) = (x as f64 - gap.a.x, y as f64 - gap.a.y);
            let t = (px * dx + py * dy) / len2;
            if !(0.0..=1.0).contains(&t) {
                continue;
            }
            let perp = (px * dy - py * dx).abs() / math::sqrt(len2);
            if perp <= half_width {
                road.set(x, y, 0.0);
            }
        }
    }
}

/// Keypoint map: unit-peak Gaussian bumps at every vertex of degree other
/// than two, combined by maximum.
pub fn keypoint_raster(graph: &RoadGraph, height: usize, width: usize, sigma: f64) -> Raster {
    let mut out = Raster::zeros(height, width);
    let reach = 4.0 * sigma;
    let deg = graph.degrees();
    for (v, &d) in deg.iter().enumerate() {
        if d == 2 {
            continue;
        }
        let c = graph.point(v);
        let x0 = math::floor(c.x - reach).max(0.0) as usize;
        let y0 = math::floor(c.y - reach).max(0.0) as usize;
        let x1 = (math::ceil(c.x + reach).max(0.0) as usize).min(width.saturating_sub(1));
        let y1 = (math::ceil(c.y + reach).max(0.0) as usize).min(height.saturating_sub(1));
        if width == 0 || height == 0 || c.x + reach < 0.0 || c.y + reach < 0.0 {
            continue;
        }
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d2 = c.dist2(Point::new(x as f64, y as f64));
                let val = math::exp(-d2 / (2.0 * sigma * sigma)) as f32;
                if val > out.get(x, y) {
                    out.set(x, y, val);
                }
            }
        }
    }
    out
}

fn random_gaps(rng: &mut ChaCha8Rng, gt: &RoadGraph, spec: &SceneSpec) -> Vec<(Gap, usize)> {
    // Gaps stay clear of both endpoints by at least this much.
    let clearance = spec.gap_length.max(12.0);
    let eligible: Vec<usize> = (0..gt.edges.len())
        .filter(|&e| gt.edge_length(e) >= spec.gap_length + 2.0 * clearance)
        .collect();
    let count = spec.random_gaps.min(eligible.len());
    index::sample(rng, eligible.len(), count)
        .into_iter()
        .map(|k| {
            let e = eligible[k];
            let len = gt.edge_length(e);
            let (a, b) = gt.edges[e];
            let (pa, pb) = (gt.point(a), gt.point(b));
            let start = rng.random_range(clearance..=len - clearance - spec.gap_length);
            let gap = Gap {
                a: pa.lerp(pb, start / len),
                b: pa.lerp(pb, (start + spec.gap_length) / len),
            };
            (gap, e)
        })
        .collect()
}

fn edge_under(gt: &RoadGraph, gap: &Gap) -> Option<usize> {
    let mid = gap.a.lerp(gap.b, 0.5);
    (0..gt.edges.len())
        .map(|e| {
            let (i, j) = gt.edges[e];
            (point_segment_distance(mid, gt.point(i), gt.point(j)), e)
        })
        .filter(|&(d, _)| d <= 1.0)
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, e)| e)
}

/// Ground truth plus the road and keypoint rasters. The road raster is the
/// rasterized graph with additive Gaussian noise, clamped to `[0, 1]`, and
/// zeroed along every gap.
pub fn make_scene(spec: &SceneSpec) -> Result<Scene> {
    render_scene(make_graph(spec), spec.size, spec.size, spec)
}

/// Renders a given ground truth with the noise, gap and keypoint settings of
/// `spec` (its family and size are ignored).
pub fn render_scene(gt: RoadGraph, width: usize, height: usize, spec: &SceneSpec) -> Result<Scene> {
    if width == 0 || height == 0 || !(spec.noise_sigma >= 0.0) || !(spec.thickness > 0.0) {
        return Err(Error::arg("invalid scene specification"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut road = rasterize_graph(&gt, height, width, spec.thickness);
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).map_err(|_| Error::arg("invalid noise"))?;
        for v in road.data_mut() {
            *v = (*v as f64 + normal.sample(&mut rng)).clamp(0.0, 1.0) as f32;
        }
    }
    let mut gaps: Vec<Gap> = spec.gaps.clone();
    let mut gap_edges: Vec<Option<usize>> = gaps.iter().map(|g| edge_under(&gt, g)).collect();
    for (g, e) in random_gaps(&mut rng, &gt, spec) {
        gaps.push(g);
        gap_edges.push(Some(e));
    }
    for g in &gaps {
        apply_gap(&mut road, g, spec.thickness / 2.0 + 1.0);
    }
    let keypoint = keypoint_raster(&gt, height, width, spec.keypoint_sigma);
    Ok(Scene {
        gt,
        road,
        keypoint,
        gaps,
        gap_edges,
    })
}

/// Position of a point along the ground truth: which chain, how far along.
#[derive(Debug, Clone, Copy)]
struct ChainPos {
    chain: usize,
    arc: f64,
}

/// Maximal paths between vertices of degree other than two (cycles of
/// degree-two vertices form one chain). Each chain is a vertex list.
pub fn graph_chains(graph: &RoadGraph) -> Vec<Vec<usize>> {
    let adj = graph.adjacency();
    let deg: Vec<usize> = adj.iter().map(Vec::len).collect();
    let mut used: BTreeMap<(usize, usize), bool> = BTreeMap::new();
    let key = |a: usize, b: usize| (a.min(b), a.max(b));
    let mut chains = Vec::new();
    let walk = |start: usize, first: usize, used: &mut BTreeMap<(usize, usize), bool>| {
        let mut chain = vec![start];
        let (mut prev, mut cur) = (start, first);
        used.insert(key(start, first), true);
        loop {
            chain.push(cur);
            if deg[cur] != 2 || cur == start {
                break;
            }
            let next = if adj[cur][0] == prev { adj[cur][1] } else { adj[cur][0] };
            if used.contains_key(&key(cur, next)) {
                break;
            }
            used.insert(key(cur, next), true);
            prev = cur;
            cur = next;
        }
        chain
    };
    for v in 0..adj.len() {
        if deg[v] != 2 {
            for &n in &adj[v] {
                if !used.contains_key(&key(v, n)) {
                    chains.push(walk(v, n, &mut used));
                }
            }
        }
    }
    for v in 0..adj.len() {
        if deg[v] == 2 && adj[v].iter().any(|&n| !used.contains_key(&key(v, n))) {
            let n = adj[v][0];
            chains.push(walk(v, n, &mut used));
        }
    }
    chains
}

/// Connectivity the extractor should produce on a given vertex set.
///
/// Vertices within `tolerance` of a ground-truth junction or endpoint stand
/// for it (the nearest one wins). Every other vertex is placed on its nearest
/// ground-truth chain by arc length, provided it lies within `tolerance`.
/// Consecutive vertices along a chain, including the stand-ins of the
/// chain's ends, are linked.
pub fn reference_graph(gt: &RoadGraph, vertices: &[Vertex], tolerance: f64) -> Result<RoadGraph> {
    let points = vertex_points(vertices);
    let deg = gt.degrees();
    let mut node_vertex: BTreeMap<usize, usize> = BTreeMap::new();
    let mut is_node = vec![false; points.len()];
    for (n, &d) in deg.iter().enumerate() {
        if d == 2 || d == 0 {
            continue;
        }
        let c = gt.point(n);
        let best = (0..points.len())
            .filter(|&k| !is_node[k] && points[k].dist(c) <= tolerance)
            .min_by(|&a, &b| points[a].dist(c).total_cmp(&points[b].dist(c)));
        if let Some(k) = best {
            node_vertex.insert(n, k);
            is_node[k] = true;
        }
    }

    let chains = graph_chains(gt);
    let mut members: Vec<Vec<(f64, usize)>> = vec![Vec::new(); chains.len()];
    for (k, &p) in points.iter().enumerate() {
        if is_node[k] {
            continue;
        }
        let mut best: Option<(f64, ChainPos)> = None;
        for (c, chain) in chains.iter().enumerate() {
            let mut arc = 0.0;
            for w in chain.windows(2) {
                let (a, b) = (gt.point(w[0]), gt.point(w[1]));
                let d = point_segment_distance(p, a, b);
                let len = a.dist(b);
                if d <= tolerance && best.is_none_or(|(bd, _)| d < bd) {
                    let t = if len > 0.0 {
                        (((p.x - a.x) * (b.x - a.x) + (p.y - a.y) * (b.y - a.y)) / (len * len)).clamp(0.0, 1.0)
                    } else {
                        0.0
                    };
                    best = Some((d, ChainPos { chain: c, arc: arc + t * len }));
                }
                arc += len;
            }
        }
        if let Some((_, pos)) = best {
            members[pos.chain].push((pos.arc, k));
        }
    }

    let mut edges = Vec::new();
    for (c, chain) in chains.iter().enumerate() {
        let list = &mut members[c];
        list.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let first = chain[0];
        let last = *chain.last().expect("chains have two or more vertices");
        let mut seq: Vec<usize> = Vec::with_capacity(list.len() + 2);
        if let Some(&v) = node_vertex.get(&first) {
            seq.push(v);
        }
        seq.extend(list.iter().map(|&(_, k)| k));
        if let Some(&v) = node_vertex.get(&last) {
            seq.push(v);
        }
        let closed = first == last;
        for w in seq.windows(2) {
            if w[0] != w[1] {
                edges.push((w[0].min(w[1]), w[0].max(w[1])));
            }
        }
        if closed && !node_vertex.contains_key(&first) && seq.len() >= 3 {
            let (a, b) = (seq[0], *seq.last().expect("non-empty"));
            edges.push((a.min(b), a.max(b)));
        }
    }
    edges.sort_unstable();
    edges.dedup();
    RoadGraph::new(vertices.to_vec(), edges)
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct EdgeDatasetConfig {
    pub extraction: ExtractionConfig,
    /// Source vertices kept per scene, each with its whole candidate group.
    /// `None` keeps all.
    pub sources_per_scene: Option<usize>,
    /// Keep every positive and this many negatives per positive.
    pub neg_per_pos: Option<f64>,
    /// Max distance from a detected vertex to the ground truth it stands for.
    pub snap_tolerance: f64,
}

impl Default for EdgeDatasetConfig {
    fn default() -> Self {
        Self {
            extraction: ExtractionConfig::wild(),
            sources_per_scene: None,
            neg_per_pos: None,
            snap_tolerance: 8.0,
        }
    }
}

/// A scene's detected vertices, candidate pairs and their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledScene {
    pub vertices: Vec<Vertex>,
    pub pairs: Vec<(usize, usize)>,
    pub labels: Vec<bool>,
    pub reference: RoadGraph,
}

/// Runs vertex detection on the scene rasters and labels candidate pairs
/// against the reference connectivity.
pub fn label_scene(scene: &Scene, cfg: &EdgeDatasetConfig) -> Result<LabeledScene> {
    let ex = &cfg.extraction;
    let vertices = detect_vertices(&scene.road, &scene.keypoint, ex)?;
    let reference = reference_graph(&scene.gt, &vertices, cfg.snap_tolerance)?;
    let pairs = pair_candidates(&vertex_points(&vertices), ex.pair_radius, ex.k_max);
    let labels = pairs.iter().map(|p| reference.edges.binary_search(p).is_ok()).collect();
    Ok(LabeledScene {
        vertices,
        pairs,
        labels,
        reference,
    })
}

/// One training batch for a scene: directed tokens grouped by source.
pub fn scene_batch(scene: &Scene, cfg: &EdgeDatasetConfig, seed: u64) -> Result<Option<TrainBatch>> {
    let ex = &cfg.extraction;
    let labeled = label_scene(scene, cfg)?;
    if labeled.pairs.is_empty() {
        return Ok(None);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = vertex_points(&labeled.vertices);
    let pyramid = Pyramid::build(&scene.road, &ex.pool_kernels)?;
    let edges = edge_features(&pyramid, &points, &labeled.pairs, ex)?;

    let mut sources: Vec<usize> = {
        let mut present = vec![false; points.len()];
        for &(i, j) in &labeled.pairs {
            present[i] = true;
            present[j] = true;
        }
        (0..points.len()).filter(|&v| present[v]).collect()
    };
    if let Some(k) = cfg.sources_per_scene {
        if k < sources.len() {
            let mut pick: Vec<usize> = index::sample(&mut rng, sources.len(), k)
                .into_iter()
                .map(|i| sources[i])
                .collect();
            pick.sort_unstable();
            sources = pick;
        }
    }
    let tokens = directed_tokens(&points, &edges, ex.pair_radius, Some(&sources))?;
    let labels: Vec<f64> = tokens
        .edge_of
        .iter()
        .map(|&k| f64::from(labeled.labels[k]))
        .collect();

    let Some(ratio) = cfg.neg_per_pos else {
        return Ok(Some(TrainBatch {
            features: tokens.features,
            groups: tokens.groups,
            labels,
        }));
    };
    // Subsample negatives; group ranges are rebuilt over the surviving rows.
    let pos: Vec<usize> = (0..labels.len()).filter(|&r| labels[r] == 1.0).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&r| labels[r] == 0.0).collect();
    let want = (math::round(ratio * pos.len() as f64) as usize).min(neg.len());
    let mut keep = vec![false; labels.len()];
    for &r in &pos {
        keep[r] = true;
    }
    for i in index::sample(&mut rng, neg.len(), want) {
        keep[neg[i]] = true;
    }
    let width = tokens.features.cols;
    let mut data = Vec::new();
    let mut out_labels = Vec::new();
    let mut groups = Vec::new();
    for g in &tokens.groups {
        let start = out_labels.len();
        for r in g.clone() {
            if keep[r] {
                data.extend_from_slice(tokens.features.row(r));
                out_labels.push(labels[r]);
            }
        }
        if out_labels.len() > start {
            groups.push(start..out_labels.len());
        }
    }
    if out_labels.is_empty() {
        return Ok(None);
    }
    Ok(Some(TrainBatch {
        features: Matrix::from_vec(out_labels.len(), width, data),
        groups,
        labels: out_labels,
    }))
}

/// `n_scenes` scenes seeded `template.seed, template.seed + 1, ...`, one
/// batch per scene that has at least one candidate pair.
pub fn make_edge_dataset(n_scenes: usize, template: &SceneSpec, cfg: &EdgeDatasetConfig) -> Result<Vec<TrainBatch>> {
    if n_scenes == 0 {
        return Err(Error::arg("at least one scene is required"));
    }
    let mut out = Vec::with_capacity(n_scenes);
    for k in 0..n_scenes as u64 {
        let spec = template.with_seed(template.seed.wrapping_add(k));
        let scene = make_scene(&spec)?;
        if let Some(b) = scene_batch(&scene, cfg, spec.seed)? {
            out.push(b);
        }
    }
    Ok(out)
}

/// Complete recipe for training a head on synthetic scenes.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct SyntheticTraining {
    pub scenes: usize,
    pub template: SceneSpec,
    pub dataset: EdgeDatasetConfig,
    pub shape: HeadShape,
    pub init_seed: u64,
    pub train: TrainConfig,
}

impl Default for SyntheticTraining {
    fn default() -> Self {
        Self {
            scenes: 200,
            template: SceneSpec {
                random_gaps: 2,
                ..SceneSpec::default()
            },
            dataset: EdgeDatasetConfig {
                extraction: synthetic_extraction(),
                sources_per_scene: Some(12),
                ..EdgeDatasetConfig::default()
            },
            shape: HeadShape::default(),
            init_seed: 7,
            train: TrainConfig::default(),
        }
    }
}

impl SyntheticTraining {
    pub fn run(&self) -> Result<TrainOutcome> {
        let data = make_edge_dataset(self.scenes, &self.template, &self.dataset)?;
        let init = HeadWeights::init(self.shape, self.init_seed)?;
        train(&init, &data, &self.train)
    }
}

/// Extraction settings matched to the default synthetic scenes.
pub fn synthetic_extraction() -> ExtractionConfig {
    ExtractionConfig {
        nms_radius: 10.0,
        pair_radius: 64.0,
        ..ExtractionConfig::wild()
    }
}

/// Serves windows of a synthetic scene's rasters; outside the image reads 0.
#[derive(Debug, Clone)]
pub struct SyntheticProvider {
    pub road: Raster,
    pub keypoint: Raster,
}

impl SyntheticProvider {
    pub fn new(scene: &Scene) -> Self {
        Self {
            road: scene.road.clone(),
            keypoint: scene.keypoint.clone(),
        }
    }
}

impl MaskProvider for SyntheticProvider {
    fn masks(&self, origin: (usize, usize), patch: usize) -> Result<PatchMasks> {
        Ok(PatchMasks {
            road: self.road.window(origin.0, origin.1, patch, patch),
            keypoint: self.keypoint.window(origin.0, origin.1, patch, patch),
        })
    }
}
