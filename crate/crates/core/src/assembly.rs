//! From probability rasters to a road graph: vertex detection, edge scoring,
//! and the tiled large-image pipeline with cross-patch score averaging.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::features::{pair_candidates, vertex_points};
use crate::head::{score_edges_pyramid, HeadWeights};
use crate::metrics::topo;
use crate::model::{ExtractionConfig, PatchLayout, Point, PromptPoint, Raster, RoadGraph, Vertex};
use crate::nms::{mask_to_candidates_with_boost, unified_nms, Source};
use crate::raster::{blend_region, Pyramid};

/// Score observations per undirected vertex pair.
///
/// Observations are kept individually and summed in sorted order, so the
/// mean does not depend on insertion or merge order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EdgeScoreTable {
    entries: BTreeMap<(usize, usize), Vec<f64>>,
}

impl EdgeScoreTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn observe(&mut self, i: usize, j: usize, score: f64) {
        self.entries.entry((i.min(j), i.max(j))).or_default().push(score);
    }

    pub fn merge(&mut self, other: EdgeScoreTable) {
        for (k, mut v) in other.entries {
            self.entries.entry(k).or_default().append(&mut v);
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `(sum, count)` for a pair.
    pub fn get(&self, i: usize, j: usize) -> Option<(f64, usize)> {
        self.entries
            .get(&(i.min(j), i.max(j)))
            .map(|v| (ordered_sum(v), v.len()))
    }

    /// Mean score of every observed pair, in canonical order.
    pub fn means(&self) -> impl Iterator<Item = ((usize, usize), f64)> + '_ {
        self.entries
            .iter()
            .map(|(&k, v)| (k, ordered_sum(v) / v.len() as f64))
    }

    /// Pairs whose mean score reaches `threshold`.
    pub fn edges_above(&self, threshold: f64) -> Vec<((usize, usize), f64)> {
        self.means().filter(|&(_, m)| m >= threshold).collect()
    }
}

fn ordered_sum(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s.iter().sum()
}

/// Averages repeated observations of the same pair and keeps pairs whose
/// mean reaches `threshold`. Output is canonical (`i < j`, sorted).
pub fn aggregate_edges(per_patch: &[Vec<(usize, usize, f64)>], threshold: f64) -> Vec<(usize, usize)> {
    let mut table = EdgeScoreTable::new();
    for list in per_patch {
        for &(i, j, s) in list {
            table.observe(i, j, s);
        }
    }
    table
        .edges_above(threshold)
        .into_iter()
        .map(|(k, _)| k)
        .collect()
}

/// Thresholds both masks and runs unified suppression on the union.
pub fn detect_vertices(road: &Raster, kp: &Raster, config: &ExtractionConfig) -> Result<Vec<Vertex>> {
    if road.height() != kp.height() || road.width() != kp.width() {
        return Err(Error::arg(format!(
            "road raster is {}x{} but keypoint raster is {}x{}",
            road.height(),
            road.width(),
            kp.height(),
            kp.width()
        )));
    }
    let t = config.mask_threshold;
    let mut candidates = mask_to_candidates_with_boost(kp, t, Source::Keypoint, config.keypoint_boost)?;
    candidates.extend(mask_to_candidates_with_boost(road, t, Source::Road, config.keypoint_boost)?);
    Ok(unified_nms(&candidates, config.nms_radius))
}

/// Every candidate pair among `vertices` with its head score.
pub fn score_vertices(
    weights: &HeadWeights,
    road: &Raster,
    vertices: &[Vertex],
    config: &ExtractionConfig,
) -> Result<Vec<(usize, usize, f64)>> {
    let points = vertex_points(vertices);
    let pairs = pair_candidates(&points, config.pair_radius, config.k_max);
    if pairs.is_empty() {
        return Ok(Vec::new());
    }
    let pyramid = Pyramid::build(road, &config.pool_kernels)?;
    Ok(score_edges_pyramid(weights, &pyramid, &points, &pairs, config)?
        .into_iter()
        .map(|e| (e.src, e.dst, e.score))
        .collect())
}

/// Graph plus the mean score of each of its edges.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredGraph {
    pub graph: RoadGraph,
    pub scores: Vec<f64>,
}

fn threshold_graph(vertices: Vec<Vertex>, table: &EdgeScoreTable, threshold: f64) -> Result<ScoredGraph> {
    let kept = table.edges_above(threshold);
    let (edges, scores) = kept.into_iter().unzip();
    // Table keys are canonical already, so edge order matches score order.
    Ok(ScoredGraph {
        graph: RoadGraph::new(vertices, edges)?,
        scores,
    })
}

/// Single-raster extraction: detection, pairing, scoring, thresholding.
pub fn extract_graph_scored(
    road: &Raster,
    kp: &Raster,
    weights: &HeadWeights,
    config: &ExtractionConfig,
) -> Result<ScoredGraph> {
    config.validate()?;
    let vertices = detect_vertices(road, kp, config)?;
    let mut table = EdgeScoreTable::new();
    for (i, j, s) in score_vertices(weights, road, &vertices, config)? {
        table.observe(i, j, s);
    }
    threshold_graph(vertices, &table, config.edge_threshold)
}

pub fn extract_graph(
    road: &Raster,
    kp: &Raster,
    weights: &HeadWeights,
    config: &ExtractionConfig,
) -> Result<RoadGraph> {
    Ok(extract_graph_scored(road, kp, weights, config)?.graph)
}

/// Road and keypoint probabilities for one patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchMasks {
    pub road: Raster,
    pub keypoint: Raster,
}

/// Source of per-patch probability maps.
pub trait MaskProvider {
    /// Masks of the `patch x patch` window whose top-left corner is `origin`.
    fn masks(&self, origin: (usize, usize), patch: usize) -> Result<PatchMasks>;
}

/// Which patches of a layout take part in tiled extraction.
#[derive(Debug, Clone, Copy)]
pub enum Coverage<'a> {
    /// Patches containing at least one prompt.
    Prompts(&'a [PromptPoint]),
    /// Every patch of the layout.
    Full,
}

/// Every layout patch that contains at least one prompt, in layout order.
pub fn active_patches(layout: &PatchLayout, prompts: &[PromptPoint]) -> Result<Vec<(usize, usize)>> {
    if let Some(p) = prompts
        .iter()
        .find(|p| !p.in_bounds(layout.image_w, layout.image_h))
    {
        return Err(Error::arg(format!(
            "prompt ({}, {}) lies outside the {}x{} image",
            p.x, p.y, layout.image_w, layout.image_h
        )));
    }
    Ok(layout
        .origins()
        .into_iter()
        .filter(|&o| {
            prompts
                .iter()
                .any(|p| layout.patch_contains(o, Point::new(p.x, p.y)))
        })
        .collect())
}

pub fn coverage_origins(layout: &PatchLayout, coverage: Coverage<'_>) -> Result<Vec<(usize, usize)>> {
    match coverage {
        Coverage::Prompts(p) => active_patches(layout, p),
        Coverage::Full => Ok(layout.origins()),
    }
}

/// Calls the provider for one patch, attaching the origin to failures and
/// checking the returned sizes.
pub fn fetch_patch(provider: &dyn MaskProvider, origin: (usize, usize), patch: usize) -> Result<PatchMasks> {
    let masks = provider.masks(origin, patch).map_err(|e| match e {
        Error::Provider { .. } => e,
        other => Error::Provider {
            origin,
            message: other.to_string(),
        },
    })?;
    for r in [&masks.road, &masks.keypoint] {
        if r.height() != patch || r.width() != patch {
            return Err(Error::Provider {
                origin,
                message: format!("returned {}x{}, expected {patch}x{patch}", r.height(), r.width()),
            });
        }
    }
    Ok(masks)
}

/// Blended masks over the bounding box of a set of patches.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedRegion {
    /// Global pixel of the region's top-left corner.
    pub origin: (usize, usize),
    pub road: Raster,
    pub keypoint: Raster,
}

/// Blends overlapping patch masks over the bounding box of the patches,
/// clipped to the image.
pub fn fuse_patches(patches: &[((usize, usize), PatchMasks)], layout: &PatchLayout) -> Result<FusedRegion> {
    if patches.is_empty() {
        return Ok(FusedRegion {
            origin: (0, 0),
            road: Raster::zeros(0, 0),
            keypoint: Raster::zeros(0, 0),
        });
    }
    let x0 = patches.iter().map(|(o, _)| o.0).min().unwrap_or(0);
    let y0 = patches.iter().map(|(o, _)| o.1).min().unwrap_or(0);
    let x1 = patches
        .iter()
        .map(|(o, _)| o.0 + layout.patch)
        .max()
        .unwrap_or(0)
        .min(layout.image_w);
    let y1 = patches
        .iter()
        .map(|(o, _)| o.1 + layout.patch)
        .max()
        .unwrap_or(0)
        .min(layout.image_h);
    let (w, h) = (x1.saturating_sub(x0), y1.saturating_sub(y0));
    let road: Vec<_> = patches.iter().map(|(o, m)| (*o, m.road.clone())).collect();
    let kp: Vec<_> = patches.iter().map(|(o, m)| (*o, m.keypoint.clone())).collect();
    Ok(FusedRegion {
        origin: (x0, y0),
        road: blend_region(&road, layout, (x0, y0), w, h)?,
        keypoint: blend_region(&kp, layout, (x0, y0), w, h)?,
    })
}

/// Global-frame vertices from suppression on the fused masks.
pub fn global_vertices(region: &FusedRegion, config: &ExtractionConfig) -> Result<Vec<Vertex>> {
    let mut v = detect_vertices(&region.road, &region.keypoint, config)?;
    let (ox, oy) = (region.origin.0 as f64, region.origin.1 as f64);
    for p in &mut v {
        p.x += ox;
        p.y += oy;
    }
    Ok(v)
}

/// Groups patches whose rectangles come within `reach` pixels of each
/// other, transitively. Groups and their members are in input order.
pub fn patch_clusters(origins: &[(usize, usize)], patch: usize, reach: f64) -> Vec<Vec<usize>> {
    let n = origins.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn root(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    let gap = |a: usize, b: usize| {
        let d = |p: usize, q: usize| (p.max(q) - p.min(q)).saturating_sub(patch) as f64;
        let (dx, dy) = (d(origins[a].0, origins[b].0), d(origins[a].1, origins[b].1));
        math::hypot(dx, dy)
    };
    for a in 0..n {
        for b in a + 1..n {
            if gap(a, b) <= reach {
                let (ra, rb) = (root(&mut parent, a), root(&mut parent, b));
                parent[ra.max(rb)] = ra.min(rb);
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut slot = vec![usize::MAX; n];
    for i in 0..n {
        let r = root(&mut parent, i);
        if slot[r] == usize::MAX {
            slot[r] = groups.len();
            groups.push(Vec::new());
        }
        groups[slot[r]].push(i);
    }
    groups
}

/// Global vertices over a set of patches. Each cluster of nearby patches is
/// blended and suppressed as one region; clusters lie more than the NMS
/// radius apart, so this equals a single pass over the covered area.
pub fn cluster_vertices(
    patches: &[((usize, usize), PatchMasks)],
    layout: &PatchLayout,
    config: &ExtractionConfig,
) -> Result<Vec<Vertex>> {
    let origins: Vec<_> = patches.iter().map(|(o, _)| *o).collect();
    let mut out = Vec::new();
    for group in patch_clusters(&origins, layout.patch, config.nms_radius) {
        let members: Vec<_> = group.iter().map(|&i| patches[i].clone()).collect();
        out.extend(global_vertices(&fuse_patches(&members, layout)?, config)?);
    }
    Ok(out)
}

/// Scores pairs among the global vertices inside one patch, using that
/// patch's own road map. Returned ids are global.
pub fn score_patch(
    weights: &HeadWeights,
    origin: (usize, usize),
    masks: &PatchMasks,
    vertices: &[Vertex],
    layout: &PatchLayout,
    config: &ExtractionConfig,
) -> Result<Vec<(usize, usize, f64)>> {
    let (ox, oy) = (origin.0 as f64, origin.1 as f64);
    let mut ids = Vec::new();
    let mut local = Vec::new();
    for (k, v) in vertices.iter().enumerate() {
        if layout.patch_contains(origin, v.pos()) {
            ids.push(k);
            let mut lv = *v;
            lv.x -= ox;
            lv.y -= oy;
            local.push(lv);
        }
    }
    Ok(score_vertices(weights, &masks.road, &local, config)?
        .into_iter()
        .map(|(i, j, s)| (ids[i], ids[j], s))
        .collect())
}

/// Merges per-patch observations, thresholds, and builds the final graph.
pub fn assemble(vertices: Vec<Vertex>, per_patch: Vec<Vec<(usize, usize, f64)>>, threshold: f64) -> Result<ScoredGraph> {
    let mut table = EdgeScoreTable::new();
    for list in per_patch {
        for (i, j, s) in list {
            table.observe(i, j, s);
        }
    }
    threshold_graph(vertices, &table, threshold)
}

/// Large-image extraction over the active patches of a layout: masks are
/// fetched per patch and blended, vertices come from one global
/// suppression pass, each patch scores the pairs among its own vertices,
/// and repeated observations of an edge are averaged before thresholding.
pub fn extract_graph_tiled(
    provider: &dyn MaskProvider,
    layout: &PatchLayout,
    coverage: Coverage<'_>,
    weights: &HeadWeights,
    config: &ExtractionConfig,
) -> Result<ScoredGraph> {
    config.validate()?;
    let origins = coverage_origins(layout, coverage)?;
    let patches = origins
        .iter()
        .map(|&o| Ok((o, fetch_patch(provider, o, layout.patch)?)))
        .collect::<Result<Vec<_>>>()?;
    let vertices = cluster_vertices(&patches, layout, config)?;
    let per_patch = patches
        .iter()
        .map(|(o, m)| score_patch(weights, *o, m, &vertices, layout, config))
        .collect::<Result<Vec<_>>>()?;
    assemble(vertices, per_patch, config.edge_threshold)
}

/// A validation scene for threshold tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationScene {
    pub road: Raster,
    pub keypoint: Raster,
    pub gt: RoadGraph,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ThresholdGrid {
    pub mask: Vec<f64>,
    pub edge: Vec<f64>,
}

impl Default for ThresholdGrid {
    fn default() -> Self {
        let steps: Vec<f64> = (1..10).map(|k| k as f64 / 10.0).collect();
        Self {
            mask: steps.clone(),
            edge: steps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TunedThresholds {
    pub mask_threshold: f64,
    pub edge_threshold: f64,
    pub mean_f1: f64,
    pub mean_precision: f64,
}

/// Grid search for the mask and edge thresholds maximizing mean TOPO F1.
/// Ties go to higher mean precision, then to higher thresholds.
pub fn tune_thresholds(
    val: &[ValidationScene],
    weights: &HeadWeights,
    grid: &ThresholdGrid,
    config: &ExtractionConfig,
    match_radius: f64,
    interval: f64,
) -> Result<TunedThresholds> {
    if grid.mask.is_empty() || grid.edge.is_empty() {
        return Err(Error::arg("threshold grid is empty"));
    }
    if val.is_empty() {
        return Err(Error::arg("validation set is empty"));
    }
    let mut best: Option<TunedThresholds> = None;
    for &mt in &grid.mask {
        let cfg = ExtractionConfig {
            mask_threshold: mt,
            ..config.clone()
        };
        let mut scored = Vec::with_capacity(val.len());
        for s in val {
            let vertices = detect_vertices(&s.road, &s.keypoint, &cfg)?;
            let mut table = EdgeScoreTable::new();
            for (i, j, sc) in score_vertices(weights, &s.road, &vertices, &cfg)? {
                table.observe(i, j, sc);
            }
            scored.push((vertices, table));
        }
        for &et in &grid.edge {
            let (mut f1, mut precision) = (0.0, 0.0);
            for ((vertices, table), s) in scored.iter().zip(val) {
                let g = threshold_graph(vertices.clone(), table, et)?.graph;
                let r = topo(&s.gt, &g, match_radius, interval)?;
                f1 += r.f1;
                precision += r.precision;
            }
            let cand = TunedThresholds {
                mask_threshold: mt,
                edge_threshold: et,
                mean_f1: f1 / val.len() as f64,
                mean_precision: precision / val.len() as f64,
            };
            let better = match &best {
                None => true,
                Some(b) => (cand.mean_f1, cand.mean_precision, cand.mask_threshold, cand.edge_threshold)
                    .partial_cmp(&(b.mean_f1, b.mean_precision, b.mask_threshold, b.edge_threshold))
                    == Some(core::cmp::Ordering::Greater),
            };
            if better {
                best = Some(cand);
            }
        }
    }
    best.ok_or_else(|| Error::arg("threshold grid is empty"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::HeadShape;
    use alloc::vec;

    fn tiny_head() -> HeadWeights {
        HeadWeights::init(
            HeadShape {
                input: 20,
                hidden: 8,
                heads: 2,
                mlp_hidden: 4,
            },
            5,
        )
        .unwrap()
    }

    #[test]
    fn aggregate_examples() {
        let kept = aggregate_edges(&[vec![(1, 2, 0.9)], vec![(2, 1, 0.7)]], 0.75);
        assert_eq!(kept, vec![(1, 2)]);
        assert!(aggregate_edges(&[vec![(1, 2, 0.6)]], 0.75).is_empty());
        let mut t = EdgeScoreTable::new();
        t.observe(4, 3, 0.5);
        t.observe(3, 4, 0.25);
        assert_eq!(t.len(), 1);
        assert_eq!(t.get(3, 4), Some((0.75, 2)));
    }

    #[test]
    fn aggregate_is_order_independent() {
        let a = vec![(0, 1, 0.1), (1, 2, 0.7), (0, 1, 0.3)];
        let b = vec![(2, 1, 0.2), (0, 1, 0.9)];
        let fwd = aggregate_edges(&[a.clone(), b.clone()], 0.4);
        let rev = aggregate_edges(&[b, a], 0.4);
        assert_eq!(fwd, rev);
    }

    #[test]
    fn zero_masks_give_empty_graph() {
        let z = Raster::zeros(32, 32);
        let g = extract_graph(&z, &z, &tiny_head(), &ExtractionConfig::wild()).unwrap();
        assert!(g.is_empty());
    }

    #[test]
    fn size_mismatch_rejected() {
        let a = Raster::zeros(32, 32);
        let b = Raster::zeros(16, 32);
        assert!(extract_graph(&a, &b, &tiny_head(), &ExtractionConfig::wild()).is_err());
    }

    #[test]
    fn active_patch_selection() {
        let layout = PatchLayout::with_defaults(2048, 2048);
        assert!(active_patches(&layout, &[]).unwrap().is_empty());
        let centre = active_patches(&layout, &[PromptPoint::positive(1024.0, 1024.0)]).unwrap();
        assert!(!centre.is_empty());
        for o in &centre {
            assert!(layout.patch_contains(*o, Point::new(1024.0, 1024.0)));
        }
        assert!(active_patches(&layout, &[PromptPoint::positive(-1.0, 3.0)]).is_err());
    }

    struct Failing;

    impl MaskProvider for Failing {
        fn masks(&self, _: (usize, usize), _: usize) -> Result<PatchMasks> {
            Err(Error::arg("boom"))
        }
    }

    #[test]
    fn clusters_join_touching_patches_only() {
        let origins = [(0, 0), (100, 0), (400, 0), (210, 0)];
        assert_eq!(patch_clusters(&origins, 100, 10.0), vec![vec![0, 1, 3], vec![2]]);
        assert_eq!(patch_clusters(&origins, 100, 9.0), vec![vec![0, 1], vec![2], vec![3]]);
    }

    #[test]
    fn provider_errors_carry_origin() {
        let layout = PatchLayout::new(64, 64, 32, 24).unwrap();
        let err = extract_graph_tiled(&Failing, &layout, Coverage::Full, &tiny_head(), &ExtractionConfig::wild())
            .unwrap_err();
        assert!(matches!(err, Error::Provider { origin: (0, 0), .. }), "{err}");
    }

    #[test]
    fn tuning_needs_a_grid() {
        let grid = ThresholdGrid {
            mask: vec![],
            edge: vec![0.5],
        };
        let scene = ValidationScene {
            road: Raster::zeros(8, 8),
            keypoint: Raster::zeros(8, 8),
            gt: RoadGraph::default(),
        };
        assert!(tune_thresholds(std::slice::from_ref(&scene), &tiny_head(), &grid, &ExtractionConfig::wild(), 8.0, 5.0).is_err());
        let grid = ThresholdGrid {
            mask: vec![0.5, 0.7],
            edge: vec![0.3, 0.9],
        };
        let t = tune_thresholds(&[scene], &tiny_head(), &grid, &ExtractionConfig::wild(), 8.0, 5.0).unwrap();
        assert_eq!((t.mask_threshold, t.edge_threshold), (0.7, 0.9));
        assert_eq!(t.mean_f1, 1.0);
    }
}
