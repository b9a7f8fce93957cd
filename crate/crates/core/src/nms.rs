//! Vertex extraction: mask thresholding, a uniform-grid spatial index, and
//! non-maximum suppression.
//!
//! [`unified_nms`] merges keypoint and road candidates into one list, lifts
//! keypoint scores by a fixed boost so they always win ordering, sorts once
//! and suppresses every lower-ranked neighbour of each kept candidate in a
//! single forward sweep. [`legacy_three_pass_nms`] keeps the older
//! per-mask-then-merge scheme around for benchmarking.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::model::{Point, Raster, Vertex};

/// Score lift applied to keypoint-mask candidates.
pub const KEYPOINT_BOOST: f64 = 0.9;

/// Below this many candidates a quadratic scan beats building a grid.
const EXHAUSTIVE_LIMIT: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Source {
    Keypoint,
    Road,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredCandidate {
    pub x: f64,
    pub y: f64,
    pub base_score: f64,
    pub boosted_score: f64,
    pub source: Source,
}

impl ScoredCandidate {
    pub fn new(x: f64, y: f64, base_score: f64, source: Source) -> Self {
        Self::with_boost(x, y, base_score, source, KEYPOINT_BOOST)
    }

    pub fn with_boost(x: f64, y: f64, base_score: f64, source: Source, boost: f64) -> Self {
        let boosted_score = match source {
            Source::Keypoint => base_score + boost,
            Source::Road => base_score,
        };
        Self {
            x,
            y,
            base_score,
            boosted_score,
            source,
        }
    }

    pub fn pos(&self) -> Point {
        Point::new(self.x, self.y)
    }

    fn to_vertex(self) -> Vertex {
        Vertex {
            x: self.x,
            y: self.y,
            score: self.boosted_score,
            is_keypoint: self.source == Source::Keypoint,
        }
    }
}

/// One candidate per pixel whose value reaches `threshold`, in row-major order.
pub fn mask_to_candidates(
    mask: &Raster,
    threshold: f64,
    source: Source,
) -> Result<Vec<ScoredCandidate>> {
    mask_to_candidates_with_boost(mask, threshold, source, KEYPOINT_BOOST)
}

pub fn mask_to_candidates_with_boost(
    mask: &Raster,
    threshold: f64,
    source: Source,
    boost: f64,
) -> Result<Vec<ScoredCandidate>> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::arg("mask threshold must lie in [0, 1]"));
    }
    let mut out = Vec::new();
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            let v = mask.get(x, y) as f64;
            if v >= threshold {
                out.push(ScoredCandidate::with_boost(
                    x as f64, y as f64, v, source, boost,
                ));
            }
        }
    }
    Ok(out)
}

/// Uniform bucket grid over a point set (compressed-row layout).
///
/// With `cell >= radius`, a radius query touches at most 9 cells.
#[derive(Debug, Clone)]
pub struct SpatialGrid {
    cell: f64,
    min_x: f64,
    min_y: f64,
    cols: usize,
    rows: usize,
    starts: Vec<u32>,
    items: Vec<u32>,
}

impl SpatialGrid {
    /// Cap on cells per point, so sparse or far-flung inputs grow the cell
    /// instead of allocating a huge empty grid.
    const MAX_CELLS_PER_POINT: usize = 4;

    pub fn build(points: &[Point], cell: f64) -> Self {
        assert!(cell > 0.0 && cell.is_finite(), "grid cell must be positive");
        let (mut min_x, mut min_y) = (f64::INFINITY, f64::INFINITY);
        let (mut max_x, mut max_y) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in points {
            min_x = min_x.min(p.x);
            min_y = min_y.min(p.y);
            max_x = max_x.max(p.x);
            max_y = max_y.max(p.y);
        }
        if points.is_empty() {
            (min_x, min_y, max_x, max_y) = (0.0, 0.0, 0.0, 0.0);
        }
        let budget = points.len().max(16) * Self::MAX_CELLS_PER_POINT;
        let mut cell = cell;
        let dims = |c: f64| {
            (
                math::floor((max_x - min_x) / c) as usize + 1,
                math::floor((max_y - min_y) / c) as usize + 1,
            )
        };
        let (mut cols, mut rows) = dims(cell);
        while cols.saturating_mul(rows) > budget {
            cell *= 2.0;
            (cols, rows) = dims(cell);
        }
        let mut grid = Self {
            cell,
            min_x,
            min_y,
            cols,
            rows,
            starts: vec![0; cols * rows + 1],
            items: vec![0; points.len()],
        };
        let keys: Vec<usize> = points.iter().map(|&p| grid.key(p)).collect();
        for &k in &keys {
            grid.starts[k + 1] += 1;
        }
        for i in 0..cols * rows {
            grid.starts[i + 1] += grid.starts[i];
        }
        let mut fill = grid.starts.clone();
        for (i, &k) in keys.iter().enumerate() {
            grid.items[fill[k] as usize] = i as u32;
            fill[k] += 1;
        }
        grid
    }

    pub fn cell_size(&self) -> f64 {
        self.cell
    }

    fn coords(&self, p: Point) -> (isize, isize) {
        (
            math::floor((p.x - self.min_x) / self.cell) as isize,
            math::floor((p.y - self.min_y) / self.cell) as isize,
        )
    }

    fn key(&self, p: Point) -> usize {
        let (cx, cy) = self.coords(p);
        let cx = cx.clamp(0, self.cols as isize - 1) as usize;
        let cy = cy.clamp(0, self.rows as isize - 1) as usize;
        cy * self.cols + cx
    }

    pub fn bucket_of(&self, p: Point) -> &[u32] {
        let k = self.key(p);
        &self.items[self.starts[k] as usize..self.starts[k + 1] as usize]
    }

    /// Calls `f(index)` for every indexed point in the cells overlapping the
    /// disk of `radius` around `p`. Callers filter by exact distance.
    pub fn for_each_near(&self, p: Point, radius: f64, mut f: impl FnMut(usize)) {
        let reach = math::ceil(radius / self.cell) as isize;
        let (cx, cy) = self.coords(p);
        let y_lo = (cy - reach).max(0);
        let y_hi = (cy + reach).min(self.rows as isize - 1);
        let x_lo = (cx - reach).max(0);
        let x_hi = (cx + reach).min(self.cols as isize - 1);
        for gy in y_lo..=y_hi {
            for gx in x_lo..=x_hi {
                let k = gy as usize * self.cols + gx as usize;
                for &i in &self.items[self.starts[k] as usize..self.starts[k + 1] as usize] {
                    f(i as usize);
                }
            }
        }
    }
}

/// Descending boosted score, ties broken by ascending input index.
fn ranking(candidates: &[ScoredCandidate], score: impl Fn(&ScoredCandidate) -> f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        score(&candidates[b])
            .total_cmp(&score(&candidates[a]))
            .then(a.cmp(&b))
    });
    order
}

/// Single-pass suppression over the merged candidate list.
///
/// Each kept candidate suppresses every not-yet-kept candidate closer than
/// `radius`, so kept vertices are pairwise at least `radius` apart.
pub fn unified_nms(candidates: &[ScoredCandidate], radius: f64) -> Vec<Vertex> {
    forward_suppression(candidates, radius, |c| c.boosted_score)
        .into_iter()
        .map(|i| candidates[i].to_vertex())
        .collect()
}

/// Indices kept by [`unified_nms`], in ranking order.
pub fn unified_nms_indices(candidates: &[ScoredCandidate], radius: f64) -> Vec<usize> {
    forward_suppression(candidates, radius, |c| c.boosted_score)
}

fn forward_suppression(
    candidates: &[ScoredCandidate],
    radius: f64,
    score: impl Fn(&ScoredCandidate) -> f64,
) -> Vec<usize> {
    let n = candidates.len();
    let order = ranking(candidates, score);
    let r2 = radius * radius;
    let mut suppressed = vec![false; n];
    let mut kept = Vec::new();
    if n < EXHAUSTIVE_LIMIT {
        for (rank, &i) in order.iter().enumerate() {
            if suppressed[i] {
                continue;
            }
            kept.push(i);
            let p = candidates[i].pos();
            for &j in &order[rank + 1..] {
                if !suppressed[j] && p.dist2(candidates[j].pos()) < r2 {
                    suppressed[j] = true;
                }
            }
        }
        return kept;
    }
    let points: Vec<Point> = candidates.iter().map(|c| c.pos()).collect();
    let grid = SpatialGrid::build(&points, radius);
    for &i in &order {
        if suppressed[i] {
            continue;
        }
        kept.push(i);
        // Mark self too so later neighbour sweeps skip it cheaply.
        suppressed[i] = true;
        let p = points[i];
        grid.for_each_near(p, radius, |j| {
            if !suppressed[j] && p.dist2(points[j]) < r2 {
                suppressed[j] = true;
            }
        });
    }
    kept
}

/// Conditional suppression: every candidate, in ranking order, queries its
/// neighbourhood and survives only if no already-kept neighbour is within
/// `radius`. Same survivors as the forward sweep, more queries.
fn conditional_suppression(candidates: &[ScoredCandidate], radius: f64) -> Vec<usize> {
    let n = candidates.len();
    let order = ranking(candidates, |c| c.boosted_score);
    let r2 = radius * radius;
    let points: Vec<Point> = candidates.iter().map(|c| c.pos()).collect();
    let grid = SpatialGrid::build(&points, radius);
    let mut kept_flag = vec![false; n];
    let mut kept = Vec::new();
    for &i in &order {
        let p = points[i];
        let mut blocked = false;
        grid.for_each_near(p, radius, |j| {
            if kept_flag[j] && p.dist2(points[j]) < r2 {
                blocked = true;
            }
        });
        if !blocked {
            kept_flag[i] = true;
            kept.push(i);
        }
    }
    kept
}

/// The older scheme: suppress keypoints and road candidates separately, merge
/// the survivors, then suppress the merged set once more.
pub fn legacy_three_pass_nms(
    keypoints: &[ScoredCandidate],
    road: &[ScoredCandidate],
    radius: f64,
) -> Vec<Vertex> {
    let kp_kept: Vec<ScoredCandidate> = conditional_suppression(keypoints, radius)
        .into_iter()
        .map(|i| keypoints[i])
        .collect();
    let road_kept: Vec<ScoredCandidate> = conditional_suppression(road, radius)
        .into_iter()
        .map(|i| road[i])
        .collect();
    let merged: Vec<ScoredCandidate> = kp_kept.into_iter().chain(road_kept).collect();
    conditional_suppression(&merged, radius)
        .into_iter()
        .map(|i| merged[i].to_vertex())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_greedy(c: &[ScoredCandidate], radius: f64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..c.len()).collect();
        order.sort_by(|&a, &b| {
            c[b].boosted_score
                .partial_cmp(&c[a].boosted_score)
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut kept: Vec<usize> = Vec::new();
        for i in order {
            let clear = kept.iter().all(|&k| {
                let dx = c[k].x - c[i].x;
                let dy = c[k].y - c[i].y;
                dx * dx + dy * dy >= radius * radius
            });
            if clear {
                kept.push(i);
            }
        }
        kept
    }

    #[test]
    fn candidates_from_masks() {
        assert!(mask_to_candidates(&Raster::zeros(4, 4), 0.5, Source::Road)
            .unwrap()
            .is_empty());
        let mut m = Raster::zeros(10, 10);
        m.set(3, 7, 0.9);
        let c = mask_to_candidates(&m, 0.5, Source::Road).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!((c[0].x, c[0].y, c[0].base_score as f32), (3.0, 7.0, 0.9));
        assert_eq!(
            mask_to_candidates(&Raster::zeros(2, 2), 0.0, Source::Road)
                .unwrap()
                .len(),
            4
        );
        assert!(mask_to_candidates(&m, 1.5, Source::Road).is_err());
        let kp = mask_to_candidates(&m, 0.5, Source::Keypoint).unwrap();
        assert_eq!(kp[0].boosted_score, kp[0].base_score + 0.9);
    }

    #[test]
    fn three_candidate_example() {
        let c = [
            ScoredCandidate::new(0.0, 0.0, 0.9, Source::Road),
            ScoredCandidate::new(1.0, 0.0, 0.8, Source::Road),
            ScoredCandidate::new(10.0, 10.0, 0.7, Source::Road),
        ];
        let kept: Vec<(f64, f64)> = unified_nms(&c, 2.0).iter().map(|v| (v.x, v.y)).collect();
        assert_eq!(kept, vec![(0.0, 0.0), (10.0, 10.0)]);
        assert_eq!(unified_nms_indices(&c, 2.0), brute_greedy(&c, 2.0));

        let legacy: Vec<(f64, f64)> = legacy_three_pass_nms(&[], &c, 2.0)
            .iter()
            .map(|v| (v.x, v.y))
            .collect();
        assert_eq!(legacy, kept);
    }

    #[test]
    fn keypoint_outranks_stronger_road_candidate() {
        let c = [
            ScoredCandidate::new(0.0, 0.0, 0.9, Source::Road),
            ScoredCandidate::new(1.0, 0.0, 0.5, Source::Keypoint),
        ];
        let kept = unified_nms(&c, 3.0);
        assert_eq!(kept.len(), 1);
        assert!(kept[0].is_keypoint);
        assert!((kept[0].score - 1.4).abs() < 1e-12);
    }

    #[test]
    fn far_apart_candidates_all_survive() {
        let c: Vec<_> = (0..100)
            .map(|i| ScoredCandidate::new((i % 10) as f64 * 5.0, (i / 10) as f64 * 5.0, 0.5, Source::Road))
            .collect();
        assert_eq!(unified_nms(&c, 4.0).len(), 100);
    }

    #[test]
    fn legacy_edge_cases() {
        assert!(legacy_three_pass_nms(&[], &[], 3.0).is_empty());
        let kp = [ScoredCandidate::new(0.0, 0.0, 0.6, Source::Keypoint)];
        let road = [ScoredCandidate::new(100.0, 0.0, 0.6, Source::Road)];
        assert_eq!(legacy_three_pass_nms(&kp, &road, 3.0).len(), 2);
    }

    #[test]
    fn grid_buckets_every_point_once() {
        let pts: Vec<Point> = (0..500)
            .map(|i| Point::new((i * 37 % 101) as f64, (i * 53 % 97) as f64))
            .collect();
        let grid = SpatialGrid::build(&pts, 8.0);
        let mut seen = vec![0; pts.len()];
        for p in &pts {
            for &i in grid.bucket_of(*p) {
                if pts[i as usize] == *p {
                    seen[i as usize] += 1;
                }
            }
        }
        // Duplicated coordinates share buckets; every index appears at least once.
        assert!(seen.iter().all(|&s| s >= 1));
        assert_eq!(grid.items.len(), pts.len());
        let mut hits = 0;
        grid.for_each_near(Point::new(50.0, 50.0), 8.0, |_| hits += 1);
        assert!(hits <= pts.len());
    }

    fn arb_candidates(max: usize) -> impl Strategy<Value = Vec<ScoredCandidate>> {
        proptest::collection::vec(
            (0.0f64..60.0, 0.0f64..60.0, 0.0f64..1.0, any::<bool>()),
            0..max,
        )
        .prop_map(|v| {
            v.into_iter()
                .map(|(x, y, s, kp)| {
                    let src = if kp { Source::Keypoint } else { Source::Road };
                    ScoredCandidate::new(x, y, s, src)
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn unified_matches_brute_force(c in arb_candidates(200), radius in 0.5f64..10.0) {
            prop_assert_eq!(unified_nms_indices(&c, radius), brute_greedy(&c, radius));
        }

        #[test]
        fn kept_vertices_are_separated(c in arb_candidates(200), radius in 0.5f64..10.0) {
            let kept = unified_nms(&c, radius);
            for i in 0..kept.len() {
                for j in i + 1..kept.len() {
                    prop_assert!(kept[i].pos().dist2(kept[j].pos()) >= radius * radius);
                }
            }
        }

        #[test]
        fn road_never_suppresses_keypoint(c in arb_candidates(200), radius in 0.5f64..10.0) {
            // Keypoint candidates come out of a mask threshold of at least 0.1,
            // which is what makes the boost dominate any road score.
            let c: Vec<ScoredCandidate> = c
                .into_iter()
                .map(|k| match k.source {
                    Source::Keypoint => ScoredCandidate::new(k.x, k.y, 0.1 + 0.9 * k.base_score, Source::Keypoint),
                    Source::Road => k,
                })
                .collect();
            let kept_idx = unified_nms_indices(&c, radius);
            let mut kept_flag = vec![false; c.len()];
            for &i in &kept_idx { kept_flag[i] = true; }
            for (i, ci) in c.iter().enumerate() {
                if ci.source != Source::Keypoint || kept_flag[i] { continue; }
                // A suppressed keypoint must have a kept keypoint within radius.
                let by_keypoint = kept_idx.iter().any(|&k| {
                    c[k].source == Source::Keypoint && c[k].pos().dist2(ci.pos()) < radius * radius
                });
                prop_assert!(by_keypoint);
            }
        }

        #[test]
        fn conditional_matches_forward(c in arb_candidates(150), radius in 0.5f64..10.0) {
            prop_assert_eq!(conditional_suppression(&c, radius), unified_nms_indices(&c, radius));
        }
    }
}
