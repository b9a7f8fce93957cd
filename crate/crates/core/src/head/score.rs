use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use super::attention::forward;
use super::linalg::Matrix;
use super::weights::HeadWeights;
use crate::error::{Error, Result};
use crate::features::{edge_features, geometric_features, group_by_source, CandidateEdge};
use crate::math;
use crate::model::{ExtractionConfig, Point, Raster};
use crate::raster::Pyramid;

/// Directed tokens laid out group by group, ready for [`forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct DirectedTokens {
    pub features: Matrix,
    pub groups: Vec<Range<usize>>,
    /// Source vertex of each group.
    pub sources: Vec<usize>,
    /// Index into the candidate list for each token row.
    pub edge_of: Vec<usize>,
    /// Target vertex of each token row.
    pub target_of: Vec<usize>,
}

/// Expands undirected candidates into one token per direction, grouped by
/// source vertex. The reverse direction reuses the path features and
/// recomputes the geometric ones. `only_sources` restricts the output to the
/// listed sources, each with its complete group.
pub fn directed_tokens(
    vertices: &[Point],
    edges: &[CandidateEdge],
    radius: f64,
    only_sources: Option<&[usize]>,
) -> Result<DirectedTokens> {
    let pairs: Vec<(usize, usize)> = edges.iter().map(|e| (e.src, e.dst)).collect();
    if let Some(&(i, j)) = pairs
        .iter()
        .find(|&&(i, j)| i >= vertices.len() || j >= vertices.len())
    {
        return Err(Error::arg(format!("pair ({i}, {j}) references a missing vertex")));
    }
    let width = edges
        .first()
        .map_or(0, |e| e.f_geo.len() + e.f_path.len());
    let mut out = DirectedTokens {
        features: Matrix::zeros(0, width),
        groups: Vec::new(),
        sources: Vec::new(),
        edge_of: Vec::new(),
        target_of: Vec::new(),
    };
    for group in group_by_source(&pairs, vertices.len()) {
        if only_sources.is_some_and(|s| !s.contains(&group.source)) {
            continue;
        }
        let start = out.edge_of.len();
        for &(k, target) in &group.members {
            let e = &edges[k];
            if e.f_geo.len() + e.f_path.len() != width {
                return Err(Error::arg("candidate feature widths differ"));
            }
            if e.src == group.source {
                out.features.data.extend_from_slice(&e.f_geo);
            } else {
                let geo = geometric_features(vertices[group.source], vertices[target], radius)?;
                out.features.data.extend_from_slice(&geo);
            }
            out.features.data.extend_from_slice(&e.f_path);
            out.edge_of.push(k);
            out.target_of.push(target);
        }
        out.groups.push(start..out.edge_of.len());
        out.sources.push(group.source);
    }
    out.features.rows = out.edge_of.len();
    Ok(out)
}

/// Scores precomputed candidates. Each candidate's probability is the mean
/// of the sigmoid outputs of its two directed tokens.
pub fn score_candidates(
    w: &HeadWeights,
    vertices: &[Point],
    mut edges: Vec<CandidateEdge>,
    radius: f64,
) -> Result<Vec<CandidateEdge>> {
    if edges.is_empty() {
        return Ok(edges);
    }
    let tokens = directed_tokens(vertices, &edges, radius, None)?;
    let logits = forward(w, &tokens.features, &tokens.groups)?;
    let mut sum = vec![0.0; edges.len()];
    for (&k, z) in tokens.edge_of.iter().zip(logits) {
        sum[k] += math::sigmoid(z);
    }
    for (e, s) in edges.iter_mut().zip(sum) {
        e.score = s / 2.0;
    }
    Ok(edges)
}

/// Features plus scoring over a prebuilt pyramid.
pub fn score_edges_pyramid(
    w: &HeadWeights,
    pyramid: &Pyramid,
    vertices: &[Point],
    pairs: &[(usize, usize)],
    config: &ExtractionConfig,
) -> Result<Vec<CandidateEdge>> {
    if config.feature_width() != w.shape.input {
        return Err(Error::arg(format!(
            "configuration yields {} features but the head expects {}",
            config.feature_width(),
            w.shape.input
        )));
    }
    let edges = edge_features(pyramid, vertices, pairs, config)?;
    score_candidates(w, vertices, edges, config.pair_radius)
}

/// Builds the road pyramid, computes edge features and scores every pair.
pub fn score_edges(
    w: &HeadWeights,
    road: &Raster,
    vertices: &[Point],
    pairs: &[(usize, usize)],
    config: &ExtractionConfig,
) -> Result<Vec<CandidateEdge>> {
    if pairs.is_empty() {
        return Ok(Vec::new());
    }
    let pyramid = Pyramid::build(road, &config.pool_kernels)?;
    score_edges_pyramid(w, &pyramid, vertices, pairs, config)
}

#[cfg(test)]
mod tests {
    use super::super::weights::HeadShape;
    use super::*;
    use crate::features::pair_candidates;

    fn small() -> HeadWeights {
        HeadWeights::init(
            HeadShape {
                input: 20,
                hidden: 8,
                heads: 2,
                mlp_hidden: 4,
            },
            11,
        )
        .unwrap()
    }

    fn scene() -> (Raster, Vec<Point>) {
        let road = Raster::from_fn(40, 40, |x, y| if y == 20 || x == 10 { 1.0 } else { 0.1 });
        let v = vec![
            Point::new(2.0, 20.0),
            Point::new(10.0, 20.0),
            Point::new(30.0, 20.0),
            Point::new(10.0, 5.0),
        ];
        (road, v)
    }

    #[test]
    fn empty_pairs_give_empty_list() {
        let (road, v) = scene();
        let out = score_edges(&small(), &road, &v, &[], &ExtractionConfig::wild()).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn scores_are_probabilities_and_deterministic() {
        let (road, v) = scene();
        let cfg = ExtractionConfig::wild();
        let pairs = pair_candidates(&v, cfg.pair_radius, cfg.k_max);
        let a = score_edges(&small(), &road, &v, &pairs, &cfg).unwrap();
        let b = score_edges(&small(), &road, &v, &pairs, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), pairs.len());
        assert!(a.iter().all(|e| (0.0..=1.0).contains(&e.score)));
    }

    #[test]
    fn each_pair_yields_two_tokens() {
        let (road, v) = scene();
        let cfg = ExtractionConfig::wild();
        let pairs = pair_candidates(&v, cfg.pair_radius, cfg.k_max);
        let pyr = Pyramid::build(&road, &cfg.pool_kernels).unwrap();
        let edges = edge_features(&pyr, &v, &pairs, &cfg).unwrap();
        let t = directed_tokens(&v, &edges, cfg.pair_radius, None).unwrap();
        assert_eq!(t.features.rows, 2 * pairs.len());
        assert_eq!(t.groups.len(), v.len());
        // Reverse direction flips the offsets and shares the path part.
        let rows: Vec<usize> = (0..t.edge_of.len()).filter(|&r| t.edge_of[r] == 0).collect();
        let (a, b) = (t.features.row(rows[0]), t.features.row(rows[1]));
        assert_eq!(a[0], -b[0]);
        assert_eq!(a[11..], b[11..]);
        let only = directed_tokens(&v, &edges, cfg.pair_radius, Some(&[1])).unwrap();
        assert_eq!(only.sources, vec![1]);
        assert_eq!(only.features.rows, 3);
    }

    #[test]
    fn width_mismatch_is_reported() {
        let (road, v) = scene();
        let cfg = ExtractionConfig {
            pool_kernels: vec![3, 9],
            ..ExtractionConfig::wild()
        };
        assert!(score_edges(&small(), &road, &v, &[(0, 1)], &cfg).is_err());
    }
}
