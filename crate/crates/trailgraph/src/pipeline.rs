//! Multi-threaded tiled extraction, the NMS benchmark, and run reports.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use trailgraph_core::assembly::{
    assemble, cluster_vertices, coverage_origins, fetch_patch, score_patch, Coverage, MaskProvider, ScoredGraph,
};
use trailgraph_core::head::HeadWeights;
use trailgraph_core::nms::{legacy_three_pass_nms, unified_nms, ScoredCandidate, Source};
use trailgraph_core::{ExtractionConfig, PatchLayout};

use crate::error::{Error, Result};

/// Tiled extraction with patch fetching and per-patch scoring spread over
/// the rayon pool. The result is bit-identical to the sequential
/// [`trailgraph_core::assembly::extract_graph_tiled`].
pub fn extract_tiled_parallel(
    provider: &(dyn MaskProvider + Sync),
    layout: &PatchLayout,
    coverage: Coverage<'_>,
    weights: &HeadWeights,
    config: &ExtractionConfig,
    timings: &mut Timings,
) -> Result<ScoredGraph> {
    config.validate()?;
    let origins = coverage_origins(layout, coverage)?;
    let t = Instant::now();
    let patches = origins
        .par_iter()
        .map(|&o| Ok((o, fetch_patch(provider, o, layout.patch)?)))
        .collect::<trailgraph_core::Result<Vec<_>>>()?;
    timings.push("fetch", t);
    let t = Instant::now();
    let vertices = cluster_vertices(&patches, layout, config)?;
    timings.push("fuse_nms", t);
    let t = Instant::now();
    let per_patch = patches
        .par_iter()
        .map(|(o, m)| score_patch(weights, *o, m, &vertices, layout, config))
        .collect::<trailgraph_core::Result<Vec<_>>>()?;
    timings.push("score", t);
    let t = Instant::now();
    let out = assemble(vertices, per_patch, config.edge_threshold)?;
    timings.push("aggregate", t);
    Ok(out)
}

/// Runs `f` on a pool of `threads` workers, or on the global pool.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::Usage(e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Timings(pub Vec<StageTiming>);

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageTiming {
    pub stage: String,
    pub ms: f64,
}

impl Timings {
    pub fn push(&mut self, stage: &str, since: Instant) {
        self.0.push(StageTiming {
            stage: stage.to_string(),
            ms: since.elapsed().as_secs_f64() * 1e3,
        });
    }

    pub fn total_ms(&self) -> f64 {
        self.0.iter().map(|s| s.ms).sum()
    }
}

/// Machine-readable summary of one CLI invocation.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub subcommand: String,
    pub config: serde_json::Value,
    pub timings: Timings,
    pub outputs: Vec<String>,
    #[serde(skip_serializing_if = "serde_json::Value::is_null")]
    pub result: serde_json::Value,
}

impl RunReport {
    pub fn new(subcommand: &str, config: serde_json::Value) -> Self {
        Self {
            subcommand: subcommand.to_string(),
            config,
            timings: Timings::default(),
            outputs: Vec::new(),
            result: serde_json::Value::Null,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NmsBench {
    pub n: usize,
    pub radius: f64,
    pub unified_ms: f64,
    pub legacy_ms: f64,
    pub unified_kept: usize,
    pub legacy_kept: usize,
}

/// Random candidates at about one per 256 px², a fifth of them keypoints.
/// At this density the two schemes keep counts within a few percent; much
/// denser fields make the merged legacy pass drift further from unified.
pub fn bench_candidates(n: usize, seed: u64) -> (Vec<ScoredCandidate>, Vec<ScoredCandidate>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = ((n as f64) * 256.0).sqrt().max(1.0);
    let (mut kp, mut road) = (Vec::new(), Vec::new());
    for _ in 0..n {
        let (x, y) = (rng.random_range(0.0..side), rng.random_range(0.0..side));
        let s = rng.random_range(0.0..1.0);
        if rng.random_bool(0.2) {
            kp.push(ScoredCandidate::new(x, y, s, Source::Keypoint));
        } else {
            road.push(ScoredCandidate::new(x, y, s, Source::Road));
        }
    }
    (kp, road)
}

/// Times unified against legacy suppression on identical random input.
pub fn bench_nms(n: usize, seed: u64, radius: f64) -> Result<NmsBench> {
    if n == 0 {
        return Err(Error::Usage("bench-nms needs n >= 1".into()));
    }
    let (kp, road) = bench_candidates(n, seed);
    let t = Instant::now();
    let all: Vec<ScoredCandidate> = kp.iter().chain(&road).copied().collect();
    let unified = unified_nms(&all, radius);
    let unified_ms = t.elapsed().as_secs_f64() * 1e3;
    let t = Instant::now();
    let legacy = legacy_three_pass_nms(&kp, &road, radius);
    let legacy_ms = t.elapsed().as_secs_f64() * 1e3;
    let (a, b) = (unified.len() as f64, legacy.len() as f64);
    if (a - b).abs() > 0.05 * a.max(b) {
        return Err(Error::Usage(format!(
            "unified kept {a} vertices but legacy kept {b}, more than 5% apart"
        )));
    }
    Ok(NmsBench {
        n,
        radius,
        unified_ms,
        legacy_ms,
        unified_kept: unified.len(),
        legacy_kept: legacy.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use trailgraph_core::assembly::extract_graph_tiled;
    use trailgraph_core::head::HeadShape;
    use trailgraph_core::synth::{make_scene, synthetic_extraction, SceneSpec, SyntheticProvider};

    #[test]
    fn bench_single_candidate() {
        let b = bench_nms(1, 3, 8.0).unwrap();
        assert_eq!((b.unified_kept, b.legacy_kept), (1, 1));
    }

    #[test]
    fn bench_is_deterministic() {
        assert_eq!(bench_candidates(500, 9), bench_candidates(500, 9));
        let a = bench_nms(2000, 4, 8.0).unwrap();
        let b = bench_nms(2000, 4, 8.0).unwrap();
        assert_eq!((a.unified_kept, a.legacy_kept), (b.unified_kept, b.legacy_kept));
    }

    #[test]
    fn parallel_matches_sequential() {
        let scene = make_scene(&SceneSpec {
            size: 320,
            ..SceneSpec::default()
        })
        .unwrap();
        let provider = SyntheticProvider::new(&scene);
        let layout = PatchLayout::new(320, 320, 128, 96).unwrap();
        let w = HeadWeights::init(
            HeadShape {
                hidden: 16,
                heads: 2,
                mlp_hidden: 8,
                ..HeadShape::default()
            },
            2,
        )
        .unwrap();
        let cfg = synthetic_extraction();
        let seq = extract_graph_tiled(&provider, &layout, Coverage::Full, &w, &cfg).unwrap();
        let mut t = Timings::default();
        let par = with_threads(Some(3), || {
            extract_tiled_parallel(&provider, &layout, Coverage::Full, &w, &cfg, &mut t)
        })
        .unwrap()
        .unwrap();
        assert_eq!(seq, par);
        assert_eq!(t.0.len(), 4);
        assert!(t.total_ms() >= 0.0);
    }
}
