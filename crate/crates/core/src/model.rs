//! Domain types shared by every stage.
//!
//! Coordinates follow the image convention: `x` grows to the right, `y` grows
//! downwards, and pixel centers sit on integer coordinates. Vertices may carry
//! sub-pixel positions.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, GraphIssue, Result};
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(self, other: Point) -> f64 {
        math::hypot(other.x - self.x, other.y - self.y)
    }

    pub fn dist2(self, other: Point) -> f64 {
        let dx = other.x - self.x;
        let dy = other.y - self.y;
        dx * dx + dy * dy
    }

    pub fn lerp(self, other: Point, t: f64) -> Point {
        Point::new(
            self.x + (other.x - self.x) * t,
            self.y + (other.y - self.y) * t,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Vertex {
    pub x: f64,
    pub y: f64,
    /// Ordering score after the keypoint boost, in `[0, 1.9]`.
    pub score: f64,
    pub is_keypoint: bool,
}

impl Vertex {
    pub const fn at(x: f64, y: f64) -> Self {
        Self {
            x,
            y,
            score: 0.0,
            is_keypoint: false,
        }
    }

    pub fn pos(&self) -> Point {
        Point::new(self.x, self.y)
    }
}

/// Undirected road graph. Edges are stored as `(i, j)` with `i < j` once
/// canonicalized.
#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RoadGraph {
    pub vertices: Vec<Vertex>,
    pub edges: Vec<(usize, usize)>,
}

impl RoadGraph {
    /// Builds a validated, canonical graph.
    pub fn new(vertices: Vec<Vertex>, edges: Vec<(usize, usize)>) -> Result<Self> {
        let g = RoadGraph { vertices, edges };
        g.validate()?;
        Ok(g.canonicalize())
    }

    pub fn from_points(points: &[(f64, f64)], edges: &[(usize, usize)]) -> Result<Self> {
        let vertices = points.iter().map(|&(x, y)| Vertex::at(x, y)).collect();
        Self::new(vertices, edges.to_vec())
    }

    /// Collects every offending edge instead of stopping at the first.
    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        let mut issues = Vec::new();
        for (vi, v) in self.vertices.iter().enumerate() {
            if !(v.x.is_finite() && v.y.is_finite() && v.score.is_finite()) {
                issues.push(GraphIssue::NonFiniteVertex { vertex: vi });
            }
        }
        let mut seen: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for (ei, &(a, b)) in self.edges.iter().enumerate() {
            if a >= n || b >= n {
                let index = if a >= n { a } else { b };
                issues.push(GraphIssue::IndexOutOfRange {
                    edge: ei,
                    index,
                    len: n,
                });
                continue;
            }
            if a == b {
                issues.push(GraphIssue::SelfLoop {
                    edge: ei,
                    vertex: a,
                });
                continue;
            }
            let key = (a.min(b), a.max(b));
            if let Some(&first) = seen.get(&key) {
                issues.push(GraphIssue::DuplicateEdge { edge: ei, first });
            } else {
                seen.insert(key, ei);
            }
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidGraph(issues))
        }
    }

    /// Orients every edge as `i < j`, sorts and deduplicates. Idempotent.
    pub fn canonicalize(mut self) -> Self {
        for e in &mut self.edges {
            if e.0 > e.1 {
                *e = (e.1, e.0);
            }
        }
        self.edges.sort_unstable();
        self.edges.dedup();
        self
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.vertices.len()];
        for &(a, b) in &self.edges {
            deg[a] += 1;
            deg[b] += 1;
        }
        deg
    }

    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.vertices.len()];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }

    pub fn point(&self, i: usize) -> Point {
        self.vertices[i].pos()
    }

    pub fn edge_length(&self, e: usize) -> f64 {
        let (a, b) = self.edges[e];
        self.point(a).dist(self.point(b))
    }

    pub fn total_length(&self) -> f64 {
        (0..self.edges.len()).map(|e| self.edge_length(e)).sum()
    }

    pub fn translated(&self, dx: f64, dy: f64) -> RoadGraph {
        let mut g = self.clone();
        for v in &mut g.vertices {
            v.x += dx;
            v.y += dy;
        }
        g
    }
}

/// Row-major `f32` grid. Probability rasters hold values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Raster {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        let expected = height
            .checked_mul(width)
            .ok_or_else(|| Error::arg("raster dimensions overflow"))?;
        if data.len() != expected {
            return Err(Error::arg(alloc::format!(
                "raster payload has {} values, expected {height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    /// Clamps every value into `[0, 1]`; NaN becomes 0.
    pub fn clamp_unit(mut self) -> Self {
        for v in &mut self.data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        self
    }

    /// Copies the `w x h` window starting at `(x0, y0)`; pixels outside the
    /// source read as zero.
    pub fn window(&self, x0: usize, y0: usize, w: usize, h: usize) -> Raster {
        Raster::from_fn(h, w, |x, y| {
            let (gx, gy) = (x0 + x, y0 + y);
            if gx < self.width && gy < self.height {
                self.get(gx, gy)
            } else {
                0.0
            }
        })
    }
}

/// Axis-aligned rectangle `[x0, x1] x [y0, y1]` in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub const fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn square(x: f64, y: f64, size: f64) -> Self {
        Self::new(x, y, x + size, y + size)
    }

    pub fn contains(&self, p: Point) -> bool {
        p.x >= self.x0 && p.x <= self.x1 && p.y >= self.y0 && p.y <= self.y1
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    /// True when the two rectangles share a region of positive area.
    pub fn overlaps(&self, other: &Rect) -> bool {
        self.x0 < other.x1 && other.x0 < self.x1 && self.y0 < other.y1 && other.y0 < self.y1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Polarity {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PromptPoint {
    pub x: f64,
    pub y: f64,
    pub polarity: Polarity,
}

impl PromptPoint {
    pub const fn positive(x: f64, y: f64) -> Self {
        Self {
            x,
            y,
            polarity: Polarity::Positive,
        }
    }

    pub const fn negative(x: f64, y: f64) -> Self {
        Self {
            x,
            y,
            polarity: Polarity::Negative,
        }
    }

    pub fn in_bounds(&self, width: usize, height: usize) -> bool {
        self.x.is_finite()
            && self.y.is_finite()
            && self.x >= 0.0
            && self.y >= 0.0
            && self.x <= (width as f64 - 1.0).max(0.0)
            && self.y <= (height as f64 - 1.0).max(0.0)
            && width > 0
            && height > 0
    }
}

/// Tiling of a large image into overlapping square patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PatchLayout {
    pub image_w: usize,
    pub image_h: usize,
    pub patch: usize,
    pub stride: usize,
}

impl PatchLayout {
    pub const DEFAULT_PATCH: usize = 1024;
    pub const DEFAULT_STRIDE: usize = 768;

    pub fn new(image_w: usize, image_h: usize, patch: usize, stride: usize) -> Result<Self> {
        if patch == 0 || stride == 0 {
            return Err(Error::arg("patch and stride must be positive"));
        }
        if stride > patch {
            return Err(Error::arg("stride must not exceed the patch size"));
        }
        Ok(Self {
            image_w,
            image_h,
            patch,
            stride,
        })
    }

    pub fn with_defaults(image_w: usize, image_h: usize) -> Self {
        Self {
            image_w,
            image_h,
            patch: Self::DEFAULT_PATCH,
            stride: Self::DEFAULT_STRIDE,
        }
    }

    pub fn overlap(&self) -> usize {
        self.patch - self.stride
    }

    /// Patch starts along one axis: multiples of the stride, with the last
    /// patch pulled back so it ends flush with the image.
    pub fn axis_origins(&self, len: usize) -> Vec<usize> {
        if len <= self.patch {
            return vec![0];
        }
        let mut out = Vec::new();
        let mut o = 0;
        while o + self.patch < len {
            out.push(o);
            o += self.stride;
        }
        let last = len - self.patch;
        if out.last() != Some(&last) {
            out.push(last);
        }
        out
    }

    /// All patch origins `(x, y)`, row-major (sorted by `y`, then `x`).
    pub fn origins(&self) -> Vec<(usize, usize)> {
        let xs = self.axis_origins(self.image_w);
        let ys = self.axis_origins(self.image_h);
        let mut out = Vec::with_capacity(xs.len() * ys.len());
        for &y in &ys {
            for &x in &xs {
                out.push((x, y));
            }
        }
        out
    }

    pub fn patch_contains(&self, origin: (usize, usize), p: Point) -> bool {
        let (ox, oy) = (origin.0 as f64, origin.1 as f64);
        let size = self.patch as f64;
        p.x >= ox && p.x < ox + size && p.y >= oy && p.y < oy + size
    }
}

/// Tunables for the extraction pipeline.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct ExtractionConfig {
    pub nms_radius: f64,
    pub pair_radius: f64,
    pub k_max: usize,
    pub pool_kernels: Vec<usize>,
    pub samples: usize,
    pub tau: f64,
    pub keypoint_boost: f64,
    pub mask_threshold: f64,
    pub edge_threshold: f64,
}

impl ExtractionConfig {
    /// Off-road settings: wide pairing radius and coarse pooling.
    pub fn wild() -> Self {
        Self {
            nms_radius: 8.0,
            pair_radius: 200.0,
            k_max: 16,
            pool_kernels: vec![3, 9, 15],
            samples: 32,
            tau: 5.0,
            keypoint_boost: 0.9,
            mask_threshold: 0.5,
            edge_threshold: 0.5,
        }
    }

    /// Urban settings.
    pub fn urban() -> Self {
        Self {
            pair_radius: 64.0,
            pool_kernels: vec![1, 5, 9],
            ..Self::wild()
        }
    }

    /// Width of the per-edge feature vector (11 geometric + 3 per scale).
    pub fn feature_width(&self) -> usize {
        crate::features::GEO_FEATURES + 3 * self.pool_kernels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("nms_radius", self.nms_radius),
            ("pair_radius", self.pair_radius),
            ("tau", self.tau),
            ("keypoint_boost", self.keypoint_boost),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::arg(alloc::format!("{name} must be positive")));
            }
        }
        for (name, v) in [
            ("mask_threshold", self.mask_threshold),
            ("edge_threshold", self.edge_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::arg(alloc::format!("{name} must lie in [0, 1]")));
            }
        }
        if self.k_max == 0 {
            return Err(Error::arg("k_max must be at least 1"));
        }
        if self.samples < 2 {
            return Err(Error::arg("at least two path samples are required"));
        }
        if self.pool_kernels.is_empty() {
            return Err(Error::arg("pool_kernels must not be empty"));
        }
        if self.pool_kernels.iter().any(|k| k % 2 == 0) {
            return Err(Error::arg("pool kernels must be odd"));
        }
        if self.pool_kernels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::arg("pool kernels must be strictly ascending"));
        }
        Ok(())
    }
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self::wild()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn self_loop_is_reported() {
        let err = RoadGraph::from_points(&[(0.0, 0.0), (1.0, 1.0)], &[(0, 0)]).unwrap_err();
        assert!(alloc::format!("{err}").contains("self-loop"));
    }

    #[test]
    fn out_of_range_is_reported() {
        let err = RoadGraph::from_points(&[(0.0, 0.0), (1.0, 1.0)], &[(0, 5)]).unwrap_err();
        match err {
            Error::InvalidGraph(issues) => assert_eq!(
                issues,
                vec![GraphIssue::IndexOutOfRange {
                    edge: 0,
                    index: 5,
                    len: 2
                }]
            ),
            other => panic!("unexpected {other:?}"),
        }
        let err = RoadGraph::from_points(&[(0.0, 0.0), (1.0, 1.0)], &[(0, 5)]).unwrap_err();
        assert!(alloc::format!("{err}").contains("index out of range"));
    }

    #[test]
    fn reversed_duplicate_is_rejected() {
        let err = RoadGraph::from_points(&[(0.0, 0.0), (1.0, 1.0)], &[(0, 1), (1, 0)]);
        assert!(matches!(err, Err(Error::InvalidGraph(_))));
    }

    #[test]
    fn canonicalize_is_idempotent() {
        let g = RoadGraph {
            vertices: vec![Vertex::at(0.0, 0.0), Vertex::at(1.0, 0.0), Vertex::at(2.0, 0.0)],
            edges: vec![(2, 1), (1, 0), (0, 2)],
        };
        let once = g.canonicalize();
        assert_eq!(once.edges, vec![(0, 1), (0, 2), (1, 2)]);
        assert_eq!(once.clone().canonicalize(), once);
    }

    #[test]
    fn layout_covers_image_with_flush_last_patch() {
        let layout = PatchLayout::new(2500, 1024, 1024, 768).unwrap();
        assert_eq!(layout.axis_origins(2500), vec![0, 768, 1476]);
        assert_eq!(layout.axis_origins(1024), vec![0]);
        assert_eq!(layout.origins().len(), 3);
        for x in 0..2500 {
            assert!(layout
                .axis_origins(2500)
                .iter()
                .any(|&o| x >= o && x < o + 1024));
        }
    }

    #[test]
    fn layout_rejects_stride_above_patch() {
        assert!(PatchLayout::new(100, 100, 10, 11).is_err());
    }

    #[test]
    fn config_presets_validate() {
        ExtractionConfig::wild().validate().unwrap();
        ExtractionConfig::urban().validate().unwrap();
        let mut bad = ExtractionConfig::wild();
        bad.pool_kernels = vec![3, 8];
        assert!(bad.validate().is_err());
        assert_eq!(ExtractionConfig::wild().feature_width(), 20);
    }
}
