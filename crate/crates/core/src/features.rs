//! Candidate edges and their two feature families.
//!
//! * Geometric features (11 values): normalized offsets, normalized length
//!   and a four-harmonic Fourier encoding of the bearing.
//! * Path features (3 per pyramid scale): mean, population standard
//!   deviation and temperature-scaled softmin of `1 - P` over `N_s` points
//!   sampled uniformly along the straight segment, endpoints included.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::model::{ExtractionConfig, Point, Raster, Vertex};
use crate::nms::SpatialGrid;
use crate::raster::{sample_clamped, Pyramid};

pub const GEO_FEATURES: usize = 11;
pub const FOURIER_HARMONICS: usize = 4;

/// Candidate edge with its features and, once scored, a probability.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CandidateEdge {
    pub src: usize,
    pub dst: usize,
    pub f_geo: [f64; GEO_FEATURES],
    pub f_path: Vec<f64>,
    pub score: f64,
}

impl CandidateEdge {
    /// `f_geo` followed by `f_path`: the head's input token.
    pub fn token(&self) -> Vec<f64> {
        let mut t = Vec::with_capacity(GEO_FEATURES + self.f_path.len());
        t.extend_from_slice(&self.f_geo);
        t.extend_from_slice(&self.f_path);
        t
    }
}

/// Statistics of sampled road probabilities at one scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathStats {
    pub mean: f64,
    pub std: f64,
    pub softmin: f64,
}

impl PathStats {
    /// `softmin = -(1/tau) ln sum_i exp(-tau (1 - P_i))`, evaluated around the
    /// minimum of `1 - P_i` so it never overflows.
    pub fn from_samples(samples: &[f64], tau: f64) -> Self {
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / n;
        let floor = samples
            .iter()
            .map(|p| 1.0 - p)
            .fold(f64::INFINITY, f64::min);
        let sum: f64 = samples
            .iter()
            .map(|p| math::exp(-tau * ((1.0 - p) - floor)))
            .sum();
        Self {
            mean,
            std: math::sqrt(var),
            softmin: floor - math::ln(sum) / tau,
        }
    }
}

/// Unordered vertex pairs: each vertex links to up to `k_max` nearest
/// neighbours within `radius` (ties by index). Output is `(i, j)` with
/// `i < j`, sorted and deduplicated.
pub fn pair_candidates(vertices: &[Point], radius: f64, k_max: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    if vertices.len() < 2 || k_max == 0 || !(radius > 0.0) {
        return pairs;
    }
    let grid = SpatialGrid::build(vertices, radius);
    let r2 = radius * radius;
    let mut near: Vec<(f64, usize)> = Vec::new();
    for (i, &p) in vertices.iter().enumerate() {
        near.clear();
        grid.for_each_near(p, radius, |j| {
            if j != i {
                let d2 = p.dist2(vertices[j]);
                if d2 <= r2 {
                    near.push((d2, j));
                }
            }
        });
        near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, j) in near.iter().take(k_max) {
            pairs.push((i.min(j), i.max(j)));
        }
    }
    pairs.sort_unstable();
    pairs.dedup();
    pairs
}

pub fn vertex_points(vertices: &[Vertex]) -> Vec<Point> {
    vertices.iter().map(Vertex::pos).collect()
}

/// `N_s` points from one endpoint to the other, inclusive. Endpoints are
/// ordered lexicographically first so both directions sample identically.
pub fn sample_segment(s: Point, t: Point, samples: usize) -> Vec<Point> {
    let (a, b) = if (t.x, t.y) < (s.x, s.y) { (t, s) } else { (s, t) };
    let last = (samples - 1) as f64;
    (0..samples).map(|i| a.lerp(b, i as f64 / last)).collect()
}

/// Path features over a prebuilt pyramid, scale-major `(mean, std, softmin)`.
pub fn path_features_pyramid(
    pyramid: &Pyramid,
    s: Point,
    t: Point,
    samples: usize,
    tau: f64,
) -> Result<Vec<f64>> {
    Ok(path_stats(pyramid, s, t, samples, tau)?
        .into_iter()
        .flat_map(|st| [st.mean, st.std, st.softmin])
        .collect())
}

pub fn path_stats(
    pyramid: &Pyramid,
    s: Point,
    t: Point,
    samples: usize,
    tau: f64,
) -> Result<Vec<PathStats>> {
    if s == t {
        return Err(Error::arg("zero-length edge"));
    }
    if samples < 2 {
        return Err(Error::arg("at least two path samples are required"));
    }
    if !(tau > 0.0) {
        return Err(Error::arg("softmin temperature must be positive"));
    }
    let points = sample_segment(s, t, samples);
    let mut values = Vec::with_capacity(samples);
    let mut out = Vec::with_capacity(pyramid.levels.len());
    for level in &pyramid.levels {
        if level.raster.is_empty() {
            return Err(Error::arg("cannot sample an empty road mask"));
        }
        values.clear();
        values.extend(points.iter().map(|p| sample_clamped(&level.raster, p.x, p.y)));
        out.push(PathStats::from_samples(&values, tau));
    }
    Ok(out)
}

/// Builds the pyramid for `road` and computes path features for one edge.
pub fn path_features(
    road: &Raster,
    kernels: &[usize],
    s: Point,
    t: Point,
    samples: usize,
    tau: f64,
) -> Result<Vec<f64>> {
    let pyramid = Pyramid::build(road, kernels)?;
    path_features_pyramid(&pyramid, s, t, samples, tau)
}

/// `[dx/r, dy/r, d/r, sin θ, cos θ, sin 2θ, cos 2θ, …, sin 4θ, cos 4θ]`.
pub fn geometric_features(s: Point, t: Point, radius: f64) -> Result<[f64; GEO_FEATURES]> {
    if s == t {
        return Err(Error::arg("zero-length edge"));
    }
    if !(radius > 0.0) {
        return Err(Error::arg("normalization radius must be positive"));
    }
    let dx = t.x - s.x;
    let dy = t.y - s.y;
    let d = math::hypot(dx, dy);
    let theta = math::atan2(dy, dx);
    let mut f = [0.0; GEO_FEATURES];
    f[0] = (dx / radius).clamp(-1.0, 1.0);
    f[1] = (dy / radius).clamp(-1.0, 1.0);
    f[2] = (d / radius).clamp(0.0, 1.0);
    for m in 1..=FOURIER_HARMONICS {
        let a = m as f64 * theta;
        f[3 + 2 * (m - 1)] = math::sin(a);
        f[4 + 2 * (m - 1)] = math::cos(a);
    }
    Ok(f)
}

/// Features for every pair, `src < dst`, score left at 0.
pub fn edge_features(
    pyramid: &Pyramid,
    vertices: &[Point],
    pairs: &[(usize, usize)],
    config: &ExtractionConfig,
) -> Result<Vec<CandidateEdge>> {
    pairs
        .iter()
        .map(|&(i, j)| {
            let (s, t) = (vertices[i], vertices[j]);
            Ok(CandidateEdge {
                src: i,
                dst: j,
                f_geo: geometric_features(s, t, config.pair_radius)?,
                f_path: path_features_pyramid(pyramid, s, t, config.samples, config.tau)?,
                score: 0.0,
            })
        })
        .collect()
}

/// Candidate edges seen from one source vertex: the unit of attention.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceGroup {
    pub source: usize,
    /// `(pair index, target vertex)` in pair order.
    pub members: Vec<(usize, usize)>,
}

/// Each unordered pair contributes one directed token to the group of each
/// endpoint. Groups are ordered by source vertex.
pub fn group_by_source(pairs: &[(usize, usize)], n_vertices: usize) -> Vec<SourceGroup> {
    let mut members: Vec<Vec<(usize, usize)>> = alloc::vec![Vec::new(); n_vertices];
    for (k, &(i, j)) in pairs.iter().enumerate() {
        members[i].push((k, j));
        members[j].push((k, i));
    }
    members
        .into_iter()
        .enumerate()
        .filter(|(_, m)| !m.is_empty())
        .map(|(source, members)| SourceGroup { source, members })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::box_filter;
    use alloc::vec;
    use proptest::prelude::*;

    fn pts(v: &[(f64, f64)]) -> Vec<Point> {
        v.iter().map(|&(x, y)| Point::new(x, y)).collect()
    }

    #[test]
    fn pairing_examples() {
        assert_eq!(pair_candidates(&pts(&[(0.0, 0.0), (10.0, 0.0)]), 64.0, 16), vec![(0, 1)]);
        assert!(pair_candidates(&pts(&[(0.0, 0.0), (300.0, 0.0)]), 200.0, 16).is_empty());
        let line = pts(&[(0.0, 0.0), (50.0, 0.0), (100.0, 0.0)]);
        assert_eq!(pair_candidates(&line, 200.0, 16), vec![(0, 1), (0, 2), (1, 2)]);
        // k_max = 1: each vertex keeps only its nearest; ties go to the lower index.
        assert_eq!(pair_candidates(&line, 200.0, 1), vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn constant_map_closed_form() {
        let road = Raster::filled(64, 64, 0.8);
        let f = path_features(&road, &[3, 9, 15], Point::new(3.0, 4.0), Point::new(50.0, 40.0), 32, 5.0)
            .unwrap();
        assert_eq!(f.len(), 9);
        let ln32 = math::ln(32.0);
        for scale in f.chunks(3) {
            assert!((scale[0] - 0.8).abs() < 1e-6);
            assert!(scale[1].abs() < 1e-6);
            let closed = (1.0 - 0.8f32 as f64) - ln32 / 5.0;
            assert!((scale[2] - closed).abs() < 1e-9, "{} vs {closed}", scale[2]);
            assert!((scale[2] - (-0.49315)).abs() < 1e-4);
        }
        let zero = path_features(&Raster::zeros(16, 16), &[3], Point::new(1.0, 1.0), Point::new(9.0, 3.0), 32, 5.0)
            .unwrap();
        assert_eq!(zero[0], 0.0);
        assert_eq!(zero[1], 0.0);
        assert!((zero[2] - (1.0 - ln32 / 5.0)).abs() < 1e-12);
    }

    #[test]
    fn zero_length_edge_is_rejected() {
        let road = Raster::filled(8, 8, 0.5);
        let p = Point::new(2.0, 2.0);
        assert!(path_features(&road, &[3], p, p, 32, 5.0).is_err());
        assert!(geometric_features(p, p, 10.0).is_err());
    }

    #[test]
    fn gap_is_reflected_in_softmin() {
        // Road along y = 10 with a one-pixel-wide hole at x = 20.
        let mut road = Raster::from_fn(21, 41, |_, y| if (9..=11).contains(&y) { 1.0 } else { 0.0 });
        for y in 0..21 {
            road.set(20, y, 0.0);
        }
        let (s, t) = (Point::new(2.0, 10.0), Point::new(38.0, 10.0));
        let f = path_features(&road, &[3], s, t, 32, 5.0).unwrap();
        // Independent evaluation: explicit 3x3 mean, bilinear blend, direct sum.
        let blurred = box_filter(&road, 3).unwrap();
        let mut probs = Vec::new();
        for i in 0..32 {
            let u = i as f64 / 31.0;
            let x = s.x + (t.x - s.x) * u;
            let x0 = x.floor() as usize;
            let fx = x - x0 as f64;
            let a = blurred.get(x0, 10) as f64;
            let b = blurred.get((x0 + 1).min(40), 10) as f64;
            probs.push(a * (1.0 - fx) + b * fx);
        }
        let direct: f64 = -(probs.iter().map(|p| (-5.0 * (1.0 - p)).exp()).sum::<f64>()).ln() / 5.0;
        assert!((f[2] - direct).abs() < 1e-9);
        let raw_min = probs.iter().map(|p| 1.0 - p).fold(f64::INFINITY, f64::min);
        assert!(f[2] > raw_min - math::ln(32.0) / 5.0);
        let clean = path_features(&Raster::from_fn(21, 41, |_, y| if (9..=11).contains(&y) { 1.0 } else { 0.0 }), &[3], s, t, 32, 5.0).unwrap();
        assert!(f[2] > clean[2]);
        assert!(f[0] < clean[0]);
    }

    #[test]
    fn geometric_examples() {
        let f = geometric_features(Point::new(0.0, 0.0), Point::new(3.0, 4.0), 200.0).unwrap();
        assert!((f[0] - 0.015).abs() < 1e-15);
        assert!((f[1] - 0.02).abs() < 1e-15);
        assert!((f[2] - 0.025).abs() < 1e-15);
        assert!((f[3] - 0.8).abs() < 1e-15);
        assert!((f[4] - 0.6).abs() < 1e-15);

        let x = geometric_features(Point::new(1.0, 1.0), Point::new(9.0, 1.0), 200.0).unwrap();
        for m in 0..4 {
            assert_eq!(x[3 + 2 * m], 0.0);
            assert_eq!(x[4 + 2 * m], 1.0);
        }
    }

    #[test]
    fn swapped_endpoints_flip_odd_harmonics() {
        let (s, t) = (Point::new(12.0, 7.0), Point::new(-20.0, 31.0));
        let f = geometric_features(s, t, 64.0).unwrap();
        let g = geometric_features(t, s, 64.0).unwrap();
        assert_eq!(g[0], -f[0]);
        assert_eq!(g[1], -f[1]);
        assert_eq!(g[2], f[2]);
        for m in 1..=4 {
            let sign = if m % 2 == 1 { -1.0 } else { 1.0 };
            assert!((g[1 + 2 * m] - sign * f[1 + 2 * m]).abs() < 1e-12);
            assert!((g[2 + 2 * m] - sign * f[2 + 2 * m]).abs() < 1e-12);
        }
    }

    #[test]
    fn groups_hold_both_directions() {
        let groups = group_by_source(&[(0, 1), (0, 2), (1, 2)], 4);
        assert_eq!(groups.len(), 3);
        assert_eq!(groups[0].members, vec![(0, 1), (1, 2)]);
        assert_eq!(groups[1].members, vec![(0, 0), (2, 2)]);
    }

    fn random_raster(seed: u64, h: usize, w: usize) -> Raster {
        let mut s = seed | 1;
        Raster::from_fn(h, w, |_, _| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s % 1000) as f32 / 999.0
        })
    }

    proptest! {
        #[test]
        fn softmin_bounds_and_symmetry(
            seed in any::<u64>(),
            sx in 0.0f64..31.0, sy in 0.0f64..31.0, tx in 0.0f64..31.0, ty in 0.0f64..31.0
        ) {
            prop_assume!((sx, sy) != (tx, ty));
            let road = random_raster(seed, 32, 32);
            let pyr = Pyramid::build(&road, &[1, 3, 9]).unwrap();
            let (s, t) = (Point::new(sx, sy), Point::new(tx, ty));
            let fwd = path_features_pyramid(&pyr, s, t, 32, 5.0).unwrap();
            let bwd = path_features_pyramid(&pyr, t, s, 32, 5.0).unwrap();
            prop_assert_eq!(&fwd, &bwd);
            let stats = path_stats(&pyr, s, t, 32, 5.0).unwrap();
            for (level, st) in pyr.levels.iter().zip(&stats) {
                let floor = sample_segment(s, t, 32)
                    .iter()
                    .map(|p| 1.0 - sample_clamped(&level.raster, p.x, p.y))
                    .fold(f64::INFINITY, f64::min);
                prop_assert!(st.softmin <= floor);
                prop_assert!(st.softmin >= floor - math::ln(32.0) / 5.0);
                prop_assert!((0.0..=1.0).contains(&st.mean));
                prop_assert!((0.0..=0.5).contains(&st.std));
            }
        }

        #[test]
        fn raising_probabilities_is_monotone(values in proptest::collection::vec(0.0f64..1.0, 32), idx in 0usize..32, bump in 0.0f64..1.0) {
            let before = PathStats::from_samples(&values, 5.0);
            let mut raised = values.clone();
            raised[idx] = (raised[idx] + bump).min(1.0);
            let after = PathStats::from_samples(&raised, 5.0);
            prop_assert!(after.softmin <= before.softmin + 1e-12);
            prop_assert!(after.mean >= before.mean - 1e-12);
        }

        #[test]
        fn geometric_features_are_finite_and_unit(
            sx in -500.0f64..500.0, sy in -500.0f64..500.0, tx in -500.0f64..500.0, ty in -500.0f64..500.0
        ) {
            prop_assume!((sx, sy) != (tx, ty));
            let f = geometric_features(Point::new(sx, sy), Point::new(tx, ty), 200.0).unwrap();
            prop_assert!(f.iter().all(|v| v.is_finite()));
            for m in 0..4 {
                let (s, c) = (f[3 + 2 * m], f[4 + 2 * m]);
                prop_assert!((s * s + c * c - 1.0).abs() < 1e-12);
            }
        }
    }
}
