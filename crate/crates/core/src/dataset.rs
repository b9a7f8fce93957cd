//! Dataset curation: graph cropping, density and structural-diversity based
//! patch selection, and prompt simulation for interactive training.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::math;
use crate::model::{Point, PromptPoint, Rect, RoadGraph, Vertex};
use crate::raster::{dilate, rasterize_graph, DEFAULT_THICKNESS};

#[derive(Clone, Copy, PartialEq, Eq)]
enum Side {
    Left,
    Right,
    Top,
    Bottom,
}

/// Clips `a -> b` to `rect` (Liang-Barsky). Returns the clipped endpoints
/// and, for each, whether it was moved onto the border. Border coordinates
/// are written exactly so a clipped point always passes [`Rect::contains`].
fn clip_segment(a: Point, b: Point, r: &Rect) -> Option<((Point, bool), (Point, bool))> {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    let (mut s0, mut s1) = (None, None);
    for (p, q, side) in [
        (-dx, a.x - r.x0, Side::Left),
        (dx, r.x1 - a.x, Side::Right),
        (-dy, a.y - r.y0, Side::Top),
        (dy, r.y1 - a.y, Side::Bottom),
    ] {
        if p == 0.0 {
            if q < 0.0 {
                return None;
            }
            continue;
        }
        let t = q / p;
        if p < 0.0 {
            if t > t1 {
                return None;
            }
            if t > t0 {
                t0 = t;
                s0 = Some(side);
            }
        } else {
            if t < t0 {
                return None;
            }
            if t < t1 {
                t1 = t;
                s1 = Some(side);
            }
        }
    }
    if t0 >= t1 {
        return None;
    }
    let place = |t: f64, side: Option<Side>, orig: Point| -> (Point, bool) {
        let Some(side) = side else {
            return (orig, false);
        };
        let mut p = a.lerp(b, t);
        match side {
            Side::Left => p.x = r.x0,
            Side::Right => p.x = r.x1,
            Side::Top => p.y = r.y0,
            Side::Bottom => p.y = r.y1,
        }
        p.x = p.x.clamp(r.x0, r.x1);
        p.y = p.y.clamp(r.y0, r.y1);
        (p, true)
    };
    let start = place(t0, s0, a);
    let end = place(t1, s1, b);
    if start.0 == end.0 {
        return None;
    }
    Some((start, end))
}

/// Restricts a graph to a rectangle (closed on all sides), in the input's
/// coordinates. Inside vertices keep their order; edges crossing the border
/// end at a new boundary vertex placed on the exact intersection. Edges that
/// only touch the rectangle in a single point are dropped. Boundary vertices
/// are not keypoints and are appended after the kept vertices.
pub fn crop_graph(graph: &RoadGraph, rect: &Rect) -> Result<RoadGraph> {
    if !(rect.x1 > rect.x0 && rect.y1 > rect.y0) {
        return Err(Error::arg("crop rectangle has zero area"));
    }
    let mut map = vec![usize::MAX; graph.vertices.len()];
    let mut vertices = Vec::new();
    for (i, v) in graph.vertices.iter().enumerate() {
        if rect.contains(v.pos()) {
            map[i] = vertices.len();
            vertices.push(*v);
        }
    }
    let mut boundary: BTreeMap<(u64, u64), usize> = BTreeMap::new();
    let mut boundary_vertex = |p: Point, vertices: &mut Vec<Vertex>| -> usize {
        *boundary.entry((p.x.to_bits(), p.y.to_bits())).or_insert_with(|| {
            vertices.push(Vertex {
                x: p.x,
                y: p.y,
                score: 0.0,
                is_keypoint: false,
            });
            vertices.len() - 1
        })
    };
    let mut edges = Vec::new();
    for &(i, j) in &graph.edges {
        let Some(((pa, moved_a), (pb, moved_b))) = clip_segment(graph.point(i), graph.point(j), rect)
        else {
            continue;
        };
        let a = if moved_a { boundary_vertex(pa, &mut vertices) } else { map[i] };
        let b = if moved_b { boundary_vertex(pb, &mut vertices) } else { map[j] };
        if a != b {
            edges.push((a, b));
        }
    }
    RoadGraph::new(vertices, edges)
}

/// [`crop_graph`] to a square patch, translated to patch-local coordinates.
pub fn crop_to_patch(graph: &RoadGraph, origin: (usize, usize), patch: usize) -> Result<RoadGraph> {
    let (ox, oy) = (origin.0 as f64, origin.1 as f64);
    let rect = Rect::square(ox, oy, patch as f64);
    Ok(crop_graph(graph, &rect)?.translated(-ox, -oy))
}

/// Total edge length per unit area.
pub fn density(graph: &RoadGraph, area: f64) -> Result<f64> {
    if !(area > 0.0) {
        return Err(Error::arg("area must be positive"));
    }
    Ok(graph.total_length() / area)
}

/// Weisfeiler-Lehman label histograms keyed by `(iteration, label)`. Labels
/// are compressed through a dictionary shared by all graphs fed to the same
/// [`WlDictionary`], so histograms from one dictionary are comparable.
#[derive(Debug, Default, Clone)]
pub struct WlDictionary {
    table: BTreeMap<(usize, usize, Vec<usize>), usize>,
}

/// Sparse histogram of WL labels over all iterations.
pub type WlSignature = BTreeMap<(usize, usize), usize>;

impl WlDictionary {
    pub fn new() -> Self {
        Self::default()
    }

    /// Labels start as vertex degrees; iteration `k` relabels each vertex by
    /// its label and the sorted labels of its neighbours. Iterations
    /// `0..=h` are recorded.
    pub fn signature(&mut self, graph: &RoadGraph, h: usize) -> WlSignature {
        let adj = graph.adjacency();
        let mut labels: Vec<usize> = adj.iter().map(Vec::len).collect();
        let mut hist = WlSignature::new();
        for &l in &labels {
            *hist.entry((0, l)).or_default() += 1;
        }
        for it in 1..=h {
            let next: Vec<usize> = (0..labels.len())
                .map(|v| {
                    let mut key: Vec<usize> = adj[v].iter().map(|&u| labels[u]).collect();
                    key.sort_unstable();
                    let fresh = self.table.len();
                    *self.table.entry((it, labels[v], key)).or_insert(fresh)
                })
                .collect();
            labels = next;
            for &l in &labels {
                *hist.entry((it, l)).or_default() += 1;
            }
        }
        hist
    }
}

/// Cosine similarity of two sparse histograms. Two empty histograms are
/// identical (1); one empty histogram is orthogonal to everything (0).
pub fn cosine(a: &WlSignature, b: &WlSignature) -> f64 {
    match (a.is_empty(), b.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let dot: f64 = a
        .iter()
        .filter_map(|(k, &x)| b.get(k).map(|&y| x as f64 * y as f64))
        .sum();
    let norm = |h: &WlSignature| math::sqrt(h.values().map(|&x| (x * x) as f64).sum::<f64>());
    (dot / (norm(a) * norm(b))).min(1.0)
}

/// WL subtree similarity with `h` refinement iterations.
pub fn wl_similarity(g1: &RoadGraph, g2: &RoadGraph, h: usize) -> f64 {
    let mut dict = WlDictionary::new();
    let a = dict.signature(g1, h);
    let b = dict.signature(g2, h);
    cosine(&a, &b)
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct PartitionConfig {
    pub patch: usize,
    /// Stride of the non-overlapping base grid.
    pub stride_base: usize,
    /// Stride of the dense, overlapping candidate grid.
    pub stride_dense: usize,
    pub tau_density: f64,
    pub tau_sim: f64,
    pub wl_iterations: usize,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            patch: 1024,
            stride_base: 1024,
            stride_dense: 256,
            tau_density: 1e-4,
            tau_sim: 0.95,
            wl_iterations: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum CandidateSet {
    Base,
    Dense,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "status", rename_all = "snake_case"))]
pub enum Decision {
    Admitted,
    LowDensity,
    TooSimilar { to: (usize, usize), similarity: f64 },
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PatchRecord {
    pub origin: (usize, usize),
    pub set: CandidateSet,
    pub density: f64,
    pub decision: Decision,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PatchSample {
    pub origin: (usize, usize),
    /// Cropped graph in patch-local coordinates.
    pub graph: RoadGraph,
    pub density: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Partition {
    /// Admitted patches: base grid first, then dense candidates in admission order.
    pub samples: Vec<PatchSample>,
    /// Every candidate with its outcome, in evaluation order.
    pub records: Vec<PatchRecord>,
}

fn full_patch_origins(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    if len < patch {
        return Vec::new();
    }
    (0..=(len - patch) / stride).map(|k| k * stride).collect()
}

/// Two-grid patch selection. Base-grid patches are kept when dense enough.
/// Dense-grid candidates (except those coinciding with base patches) are
/// visited by decreasing density and admitted only when their WL similarity
/// to every already selected overlapping patch is below `tau_sim`. Only
/// patches fully inside the image are considered.
pub fn partition(graph: &RoadGraph, image_w: usize, image_h: usize, cfg: &PartitionConfig) -> Result<Partition> {
    if cfg.patch == 0 || cfg.stride_base == 0 || cfg.stride_dense == 0 {
        return Err(Error::arg("patch size and strides must be positive"));
    }
    if !(cfg.tau_density >= 0.0 && cfg.tau_sim >= 0.0) {
        return Err(Error::arg("thresholds must be non-negative"));
    }
    let area = (cfg.patch * cfg.patch) as f64;
    let candidate = |origin: (usize, usize)| -> Result<PatchSample> {
        let local = crop_to_patch(graph, origin, cfg.patch)?;
        let d = density(&local, area)?;
        Ok(PatchSample {
            origin,
            graph: local,
            density: d,
        })
    };
    let dense_enough = |s: &PatchSample| s.density > 0.0 && s.density >= cfg.tau_density;

    let mut out = Partition::default();
    let mut base_origins = Vec::new();
    for y in full_patch_origins(image_h, cfg.patch, cfg.stride_base) {
        for x in full_patch_origins(image_w, cfg.patch, cfg.stride_base) {
            base_origins.push((x, y));
        }
    }
    for &origin in &base_origins {
        let s = candidate(origin)?;
        let keep = dense_enough(&s);
        out.records.push(PatchRecord {
            origin,
            set: CandidateSet::Base,
            density: s.density,
            decision: if keep { Decision::Admitted } else { Decision::LowDensity },
        });
        if keep {
            out.samples.push(s);
        }
    }

    let mut dense = Vec::new();
    for y in full_patch_origins(image_h, cfg.patch, cfg.stride_dense) {
        for x in full_patch_origins(image_w, cfg.patch, cfg.stride_dense) {
            if !base_origins.contains(&(x, y)) {
                dense.push(candidate((x, y))?);
            }
        }
    }
    let (mut dense, sparse): (Vec<_>, Vec<_>) = dense.into_iter().partition(dense_enough);
    for s in sparse {
        out.records.push(PatchRecord {
            origin: s.origin,
            set: CandidateSet::Dense,
            density: s.density,
            decision: Decision::LowDensity,
        });
    }
    dense.sort_by(|a, b| {
        b.density
            .total_cmp(&a.density)
            .then((a.origin.1, a.origin.0).cmp(&(b.origin.1, b.origin.0)))
    });

    let rect_of = |o: (usize, usize)| Rect::square(o.0 as f64, o.1 as f64, cfg.patch as f64);
    let mut dict = WlDictionary::new();
    let mut signatures: Vec<WlSignature> = out
        .samples
        .iter()
        .map(|s| dict.signature(&s.graph, cfg.wl_iterations))
        .collect();
    for s in dense {
        let sig = dict.signature(&s.graph, cfg.wl_iterations);
        let rect = rect_of(s.origin);
        let mut worst: Option<((usize, usize), f64)> = None;
        for (other, other_sig) in out.samples.iter().zip(&signatures) {
            if !rect.overlaps(&rect_of(other.origin)) {
                continue;
            }
            let sim = cosine(&sig, other_sig);
            if worst.is_none_or(|(_, w)| sim > w) {
                worst = Some((other.origin, sim));
            }
        }
        let decision = match worst {
            Some((to, similarity)) if similarity >= cfg.tau_sim => Decision::TooSimilar { to, similarity },
            _ => Decision::Admitted,
        };
        out.records.push(PatchRecord {
            origin: s.origin,
            set: CandidateSet::Dense,
            density: s.density,
            decision: decision.clone(),
        });
        if decision == Decision::Admitted {
            out.samples.push(s);
            signatures.push(sig);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct PromptConfig {
    pub n_pos: usize,
    /// Negatives per positive.
    pub ratio: f64,
    /// Negatives are drawn farther than this from any road pixel.
    pub dist_min: f64,
    pub jitter_sigma: f64,
    /// Road width used to rasterize the graph before dilation.
    pub thickness: f64,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            n_pos: 10,
            ratio: 1.0,
            dist_min: 50.0,
            jitter_sigma: 3.0,
            thickness: DEFAULT_THICKNESS,
        }
    }
}

/// Vertices a positive prompt may be placed on: endpoints and junctions.
pub fn keypoint_pool(graph: &RoadGraph) -> Vec<usize> {
    graph
        .degrees()
        .iter()
        .enumerate()
        .filter(|&(_, &d)| d != 0 && d != 2)
        .map(|(v, _)| v)
        .collect()
}

/// Simulated clicks on a `width x height` image: up to `n_pos` positives on
/// distinct keypoints, then `round(ratio * positives)` negatives on
/// background pixels. Every point gets Gaussian jitter truncated to a disk of
/// radius `3 sigma` and is clamped into the image.
pub fn simulate_prompts(
    graph: &RoadGraph,
    width: usize,
    height: usize,
    cfg: &PromptConfig,
    seed: u64,
) -> Result<Vec<PromptPoint>> {
    if width == 0 || height == 0 {
        return Err(Error::arg("image must not be empty"));
    }
    if !(cfg.ratio >= 0.0 && cfg.dist_min >= 0.0 && cfg.jitter_sigma >= 0.0) {
        return Err(Error::arg("prompt parameters must be non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool = keypoint_pool(graph);
    let n_pos = cfg.n_pos.min(pool.len());
    let mut anchors: Vec<PromptPoint> = index::sample(&mut rng, pool.len(), n_pos)
        .into_iter()
        .map(|k| {
            let p = graph.point(pool[k]);
            PromptPoint::positive(p.x, p.y)
        })
        .collect();

    let n_neg = math::round(cfg.ratio * n_pos as f64) as usize;
    if n_neg > 0 {
        let road = rasterize_graph(graph, height, width, cfg.thickness);
        let near = dilate(&road, cfg.dist_min)?;
        let background: Vec<usize> = near
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 0.0)
            .map(|(i, _)| i)
            .collect();
        if background.is_empty() {
            return Err(Error::NoNegativeRegion);
        }
        let picks: Vec<usize> = if n_neg <= background.len() {
            index::sample(&mut rng, background.len(), n_neg).into_vec()
        } else {
            (0..n_neg).map(|_| rng.random_range(0..background.len())).collect()
        };
        for k in picks {
            let idx = background[k];
            anchors.push(PromptPoint::negative((idx % width) as f64, (idx / width) as f64));
        }
    }

    if cfg.jitter_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.jitter_sigma).map_err(|_| Error::arg("invalid jitter"))?;
        let limit2 = 9.0 * cfg.jitter_sigma * cfg.jitter_sigma;
        for p in &mut anchors {
            let (dx, dy) = loop {
                let dx: f64 = normal.sample(&mut rng);
                let dy: f64 = normal.sample(&mut rng);
                if dx * dx + dy * dy <= limit2 {
                    break (dx, dy);
                }
            };
            p.x = (p.x + dx).clamp(0.0, (width - 1) as f64);
            p.y = (p.y + dy).clamp(0.0, (height - 1) as f64);
        }
    }
    Ok(anchors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Polarity;
    use crate::raster::squared_edt;
    use crate::Raster;
    use proptest::prelude::*;

    fn g(points: &[(f64, f64)], edges: &[(usize, usize)]) -> RoadGraph {
        RoadGraph::from_points(points, edges).unwrap()
    }

    #[test]
    fn crop_splits_at_border() {
        let gr = g(&[(-5.0, 10.0), (5.0, 10.0)], &[(0, 1)]);
        let c = crop_graph(&gr, &Rect::new(0.0, 0.0, 1024.0, 1024.0)).unwrap();
        assert_eq!(c.vertices.len(), 2);
        assert_eq!(c.point(0), Point::new(5.0, 10.0));
        assert_eq!(c.point(1), Point::new(0.0, 10.0));
        assert!(!c.vertices[1].is_keypoint);
        assert_eq!(c.edges, vec![(0, 1)]);
    }

    #[test]
    fn crop_inside_is_identity() {
        let gr = g(&[(1.0, 1.0), (5.0, 9.0), (20.0, 3.0)], &[(0, 1), (1, 2)]);
        let c = crop_graph(&gr, &Rect::new(0.0, 0.0, 32.0, 32.0)).unwrap();
        assert_eq!(c, gr);
    }

    #[test]
    fn crop_through_corner_region() {
        // Enters through the left side, leaves through the top.
        let gr = g(&[(-10.0, 15.0), (15.0, -10.0)], &[(0, 1)]);
        let c = crop_graph(&gr, &Rect::new(0.0, 0.0, 100.0, 100.0)).unwrap();
        assert_eq!(c.vertices.len(), 2);
        assert_eq!(c.edges.len(), 1);
        let mut pts: Vec<_> = c.vertices.iter().map(|v| (v.x, v.y)).collect();
        pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(pts, vec![(0.0, 5.0), (5.0, 0.0)]);
        // Exactly through the corner: touches in one point, dropped.
        let touch = g(&[(-5.0, 5.0), (5.0, -5.0)], &[(0, 1)]);
        let c = crop_graph(&touch, &Rect::new(0.0, 0.0, 100.0, 100.0)).unwrap();
        assert!(c.edges.is_empty());
    }

    #[test]
    fn crop_rejects_degenerate_rect() {
        let gr = g(&[(1.0, 1.0)], &[]);
        assert!(crop_graph(&gr, &Rect::new(0.0, 0.0, 0.0, 10.0)).is_err());
    }

    #[test]
    fn density_examples() {
        assert_eq!(density(&RoadGraph::default(), 10.0).unwrap(), 0.0);
        let e = g(&[(0.0, 0.0), (100.0, 0.0)], &[(0, 1)]);
        assert_eq!(density(&e, 1024.0 * 1024.0).unwrap(), 100.0 / (1024.0 * 1024.0));
        let big = g(&[(0.0, 0.0), (200.0, 0.0)], &[(0, 1)]);
        let d1 = density(&e, 100.0).unwrap();
        let d2 = density(&big, 400.0).unwrap();
        assert!((d2 - d1 / 2.0).abs() < 1e-15);
    }

    #[test]
    fn wl_examples() {
        let p4 = g(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0), (3.0, 0.0)], &[(0, 1), (1, 2), (2, 3)]);
        let p4b = g(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0), (3.0, 0.0)], &[(2, 0), (0, 3), (3, 1)]);
        assert!((wl_similarity(&p4, &p4b, 3) - 1.0).abs() < 1e-12);
        let p3 = g(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)], &[(0, 1), (1, 2)]);
        let c3 = g(&[(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)], &[(0, 1), (1, 2), (0, 2)]);
        let s = wl_similarity(&p3, &c3, 3);
        assert!((s - 3.0 / math::sqrt(720.0)).abs() < 1e-12, "{s}");
        assert_eq!(wl_similarity(&RoadGraph::default(), &p3, 3), 0.0);
        assert_eq!(wl_similarity(&RoadGraph::default(), &RoadGraph::default(), 3), 1.0);
    }

    #[test]
    fn wl_signature_counts() {
        let p4 = g(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0), (3.0, 0.0)], &[(0, 1), (1, 2), (2, 3)]);
        let sig = WlDictionary::new().signature(&p4, 3);
        assert_eq!(sig.values().sum::<usize>(), 4 * 4);
    }

    #[test]
    fn partition_empty_image() {
        let p = partition(&RoadGraph::default(), 2048, 2048, &PartitionConfig::default()).unwrap();
        assert!(p.samples.is_empty());
        assert!(p.records.iter().all(|r| r.decision == Decision::LowDensity));
    }

    #[test]
    fn partition_rejects_shifted_copies() {
        // One straight road spanning the whole image: every crop is a single edge.
        let road = g(&[(-10.0, 100.0), (3000.0, 100.0)], &[(0, 1)]);
        let cfg = PartitionConfig {
            patch: 512,
            stride_base: 512,
            stride_dense: 128,
            tau_sim: 0.99,
            ..PartitionConfig::default()
        };
        // 640 wide: base grid has one patch, dense candidates at x = 128.
        let p = partition(&road, 640, 512, &cfg).unwrap();
        assert_eq!(p.samples.len(), 1);
        let dense: Vec<_> = p.records.iter().filter(|r| r.set == CandidateSet::Dense).collect();
        assert_eq!(dense.len(), 1);
        assert!(matches!(dense[0].decision, Decision::TooSimilar { to: (0, 0), .. }));
        let open = PartitionConfig { tau_sim: 1.0 + 1e-9, ..cfg };
        assert_eq!(partition(&road, 640, 512, &open).unwrap().samples.len(), 2);
    }

    #[test]
    fn keypoint_pool_skips_interior() {
        let path = g(&[(0.0, 0.0), (10.0, 0.0), (20.0, 0.0)], &[(0, 1), (1, 2)]);
        assert_eq!(keypoint_pool(&path), vec![0, 2]);
    }

    #[test]
    fn prompts_examples() {
        let path = g(&[(10.0, 10.0), (60.0, 10.0), (110.0, 10.0)], &[(0, 1), (1, 2)]);
        let cfg = PromptConfig {
            n_pos: 0,
            ..PromptConfig::default()
        };
        assert!(simulate_prompts(&path, 256, 256, &cfg, 1).unwrap().is_empty());

        let p = simulate_prompts(&path, 256, 256, &PromptConfig::default(), 1).unwrap();
        assert_eq!(p, simulate_prompts(&path, 256, 256, &PromptConfig::default(), 1).unwrap());
        let pos: Vec<_> = p.iter().filter(|q| q.polarity == Polarity::Positive).collect();
        assert_eq!(pos.len(), 2);
        assert_eq!(p.len(), 4);
        for q in &pos {
            let near = [Point::new(10.0, 10.0), Point::new(110.0, 10.0)]
                .iter()
                .any(|a| a.dist(Point::new(q.x, q.y)) <= 9.0 + 1e-9);
            assert!(near);
        }
        let road = rasterize_graph(&path, 256, 256, DEFAULT_THICKNESS);
        let d2 = squared_edt(&road);
        let lim = 50.0 - 9.0;
        for q in p.iter().filter(|q| q.polarity == Polarity::Negative) {
            // Distance from the prompt to the nearest road pixel center.
            let mut best = f64::INFINITY;
            for y in 0..256 {
                for x in 0..256 {
                    if d2[y * 256 + x] == 0.0 {
                        best = best.min(Point::new(x as f64, y as f64).dist(Point::new(q.x, q.y)));
                    }
                }
            }
            assert!(best >= lim, "{best}");
        }
    }

    #[test]
    fn prompts_fail_without_background() {
        let path = g(&[(0.0, 5.0), (20.0, 5.0)], &[(0, 1)]);
        assert_eq!(
            simulate_prompts(&path, 20, 10, &PromptConfig::default(), 0),
            Err(Error::NoNegativeRegion)
        );
        let _ = Raster::zeros(1, 1);
    }

    /// Cohen-Sutherland clipping, used as an independent oracle.
    fn cohen_sutherland(mut a: Point, mut b: Point, r: &Rect) -> Option<(Point, Point)> {
        let code = |p: Point| {
            let mut c = 0u8;
            if p.x < r.x0 {
                c |= 1;
            } else if p.x > r.x1 {
                c |= 2;
            }
            if p.y < r.y0 {
                c |= 4;
            } else if p.y > r.y1 {
                c |= 8;
            }
            c
        };
        let (mut ca, mut cb) = (code(a), code(b));
        loop {
            if ca | cb == 0 {
                return Some((a, b));
            }
            if ca & cb != 0 {
                return None;
            }
            let out = if ca != 0 { ca } else { cb };
            let p = if out & 8 != 0 {
                Point::new(a.x + (b.x - a.x) * (r.y1 - a.y) / (b.y - a.y), r.y1)
            } else if out & 4 != 0 {
                Point::new(a.x + (b.x - a.x) * (r.y0 - a.y) / (b.y - a.y), r.y0)
            } else if out & 2 != 0 {
                Point::new(r.x1, a.y + (b.y - a.y) * (r.x1 - a.x) / (b.x - a.x))
            } else {
                Point::new(r.x0, a.y + (b.y - a.y) * (r.x0 - a.x) / (b.x - a.x))
            };
            if out == ca {
                a = p;
                ca = code(a);
            } else {
                b = p;
                cb = code(b);
            }
        }
    }

    fn coord() -> impl Strategy<Value = f64> {
        -60.0f64..160.0
    }

    proptest! {
        #[test]
        fn clip_matches_oracle(ax in coord(), ay in coord(), bx in coord(), by in coord()) {
            let r = Rect::new(0.0, 0.0, 100.0, 100.0);
            let (a, b) = (Point::new(ax, ay), Point::new(bx, by));
            prop_assume!(a.dist(b) > 1e-6);
            let ours = clip_segment(a, b, &r);
            let oracle = cohen_sutherland(a, b, &r).filter(|(p, q)| p.dist(*q) > 1e-9);
            match (ours, oracle) {
                (None, None) => {}
                (Some(((p, _), (q, _))), Some((op, oq))) => {
                    prop_assert!(p.dist(op) < 1e-6 && q.dist(oq) < 1e-6, "{:?} {:?} vs {:?} {:?}", p, q, op, oq);
                }
                (x, y) => {
                    // Only grazing contacts may disagree.
                    let len = x.map(|((p, _), (q, _))| p.dist(q)).or(y.map(|(p, q)| p.dist(q))).unwrap();
                    prop_assert!(len < 1e-6, "{:?} vs {:?}", x, y);
                }
            }
        }

        #[test]
        fn crop_is_idempotent_and_bounded(
            pts in proptest::collection::vec((coord(), coord()), 2..12),
            raw in proptest::collection::vec((0usize..12, 0usize..12), 0..20),
        ) {
            let n = pts.len();
            let mut edges: Vec<(usize, usize)> = raw.into_iter().map(|(a, b)| (a % n, b % n)).filter(|(a, b)| a != b).map(|(a, b)| (a.min(b), a.max(b))).collect();
            edges.sort_unstable();
            edges.dedup();
            let gr = g(&pts, &edges);
            let r = Rect::new(0.0, 0.0, 100.0, 100.0);
            let once = crop_graph(&gr, &r).unwrap();
            for v in &once.vertices {
                prop_assert!(r.contains(v.pos()));
            }
            let twice = crop_graph(&once, &r).unwrap();
            prop_assert_eq!(twice, once);
        }

        #[test]
        fn wl_is_symmetric_and_relabel_invariant(
            n in 1usize..8,
            raw in proptest::collection::vec((0usize..8, 0usize..8), 0..14),
            perm_seed in any::<u64>(),
            raw2 in proptest::collection::vec((0usize..8, 0usize..8), 0..14),
        ) {
            let mk = |raw: &[(usize, usize)]| {
                let mut e: Vec<_> = raw.iter().map(|&(a, b)| (a % n, b % n)).filter(|(a, b)| a != b).map(|(a, b)| (a.min(b), a.max(b))).collect();
                e.sort_unstable();
                e.dedup();
                e
            };
            let pts: Vec<(f64, f64)> = (0..n).map(|i| (i as f64, 0.0)).collect();
            let a = g(&pts, &mk(&raw));
            let b = g(&pts, &mk(&raw2));
            let mut perm: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
            rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
            let relabeled = g(&pts, &a.edges.iter().map(|&(i, j)| (perm[i], perm[j])).collect::<Vec<_>>());
            prop_assert!((wl_similarity(&a, &relabeled, 3) - 1.0).abs() < 1e-12);
            prop_assert_eq!(wl_similarity(&a, &b, 3), wl_similarity(&b, &a, 3));
        }
    }
}
