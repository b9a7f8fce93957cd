//! Mask providers: a directory of RPM1 tiles, a rendered synthetic scene, a
//! remote model server, and an LRU cache that can front any of them.

use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use lru::LruCache;
use serde::{Deserialize, Serialize};
use trailgraph_core::assembly::{MaskProvider, PatchMasks};
use trailgraph_core::synth::{render_scene, Gap, SceneSpec, SyntheticProvider};
use trailgraph_core::RoadGraph;

use crate::error::{Error, Result};
use crate::formats::{decode_raster, encode_raster, read_raster, GraphDoc};

/// Provider failures carry the patch origin.
fn provider_error(origin: (usize, usize), message: impl Into<String>) -> trailgraph_core::Error {
    trailgraph_core::Error::Provider {
        origin,
        message: message.into(),
    }
}

/// Reads `road_X_Y.rpm` and `kp_X_Y.rpm` from a directory, where `X, Y` is
/// the patch origin in pixels.
#[derive(Debug, Clone)]
pub struct TilesProvider {
    pub dir: PathBuf,
}

impl TilesProvider {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn road_path(&self, origin: (usize, usize)) -> PathBuf {
        self.dir.join(format!("road_{}_{}.rpm", origin.0, origin.1))
    }

    pub fn keypoint_path(&self, origin: (usize, usize)) -> PathBuf {
        self.dir.join(format!("kp_{}_{}.rpm", origin.0, origin.1))
    }
}

impl MaskProvider for TilesProvider {
    fn masks(&self, origin: (usize, usize), _patch: usize) -> trailgraph_core::Result<PatchMasks> {
        let read = |p: &Path| read_raster(p).map_err(|e| provider_error(origin, e.to_string()));
        Ok(PatchMasks {
            road: read(&self.road_path(origin))?,
            keypoint: read(&self.keypoint_path(origin))?,
        })
    }
}

/// Writes a tile directory that [`TilesProvider`] can read back.
pub fn write_tiles(
    dir: &Path,
    source: &dyn MaskProvider,
    origins: &[(usize, usize)],
    patch: usize,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tiles = TilesProvider::new(dir);
    for &o in origins {
        let m = source.masks(o, patch)?;
        crate::formats::write_raster(&m.road, &tiles.road_path(o))?;
        crate::formats::write_raster(&m.keypoint, &tiles.keypoint_path(o))?;
    }
    Ok(())
}

/// Provider description as accepted by the service and the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProviderConfig {
    Tiles {
        dir: PathBuf,
    },
    /// A ground-truth graph rendered with noise, gaps and keypoint blobs.
    Synthetic {
        graph: GraphDoc,
        #[serde(default = "default_noise")]
        noise_sigma: f64,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        gaps: Vec<Gap>,
    },
    Remote {
        url: String,
    },
}

fn default_noise() -> f64 {
    0.05
}

impl ProviderConfig {
    /// Instantiates the provider for an image of the given size.
    pub fn build(&self, width: usize, height: usize) -> Result<Arc<dyn MaskProvider + Send + Sync>> {
        match self {
            ProviderConfig::Tiles { dir } => {
                if !dir.is_dir() {
                    return Err(Error::io(
                        dir,
                        std::io::Error::new(std::io::ErrorKind::NotFound, "tile directory not found"),
                    ));
                }
                Ok(Arc::new(TilesProvider::new(dir)))
            }
            ProviderConfig::Synthetic {
                graph,
                noise_sigma,
                seed,
                gaps,
            } => {
                let gt: RoadGraph = graph.clone().into_graph()?;
                let spec = SceneSpec {
                    seed: *seed,
                    noise_sigma: *noise_sigma,
                    gaps: gaps.clone(),
                    ..SceneSpec::default()
                };
                let scene = render_scene(gt, width, height, &spec)?;
                Ok(Arc::new(SyntheticProvider::new(&scene)))
            }
            ProviderConfig::Remote { url } => {
                if !(url.starts_with("http://") || url.starts_with("https://")) {
                    return Err(Error::Usage(format!("remote provider url must be http(s): {url}")));
                }
                Ok(Arc::new(RemoteProvider::new(url.clone())))
            }
        }
    }
}

/// Body of a remote mask request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchRequest {
    pub x: usize,
    pub y: usize,
    pub patch: usize,
}

/// Client for a model server. Each patch is one `POST` of a
/// [`PatchRequest`]; the reply is `multipart/mixed` with parts named `road`
/// and `keypoint`, each an RPM1 raster.
#[derive(Debug, Clone)]
pub struct RemoteProvider {
    pub url: String,
    agent: ureq::Agent,
}

impl RemoteProvider {
    pub fn new(url: impl Into<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .build()
            .new_agent();
        Self { url: url.into(), agent }
    }

    fn fetch(&self, origin: (usize, usize), patch: usize) -> Result<PatchMasks> {
        let req = PatchRequest {
            x: origin.0,
            y: origin.1,
            patch,
        };
        let mut resp = self
            .agent
            .post(&self.url)
            .header("content-type", "application/json")
            .send(serde_json::to_vec(&req).expect("request serializes"))
            .map_err(|e| Error::Remote(e.to_string()))?;
        let status = resp.status();
        let ctype = resp
            .headers()
            .get("content-type")
            .and_then(|v| v.to_str().ok())
            .unwrap_or_default()
            .to_string();
        let body = resp
            .body_mut()
            .with_config()
            .limit(1 << 32)
            .read_to_vec()
            .map_err(|e| Error::Remote(e.to_string()))?;
        if !status.is_success() {
            return Err(Error::Remote(format!(
                "status {status}: {}",
                String::from_utf8_lossy(&body[..body.len().min(200)])
            )));
        }
        let parts = decode_multipart(&ctype, &body)?;
        let find = |name: &str| {
            parts
                .iter()
                .find(|(n, _)| n.as_deref() == Some(name))
                .map(|(_, b)| b.as_slice())
                .ok_or_else(|| Error::Remote(format!("reply has no '{name}' part")))
        };
        Ok(PatchMasks {
            road: decode_raster(find("road")?)?,
            keypoint: decode_raster(find("keypoint")?)?,
        })
    }
}

impl MaskProvider for RemoteProvider {
    fn masks(&self, origin: (usize, usize), patch: usize) -> trailgraph_core::Result<PatchMasks> {
        self.fetch(origin, patch)
            .map_err(|e| provider_error(origin, e.to_string()))
    }
}

pub const MULTIPART_BOUNDARY: &str = "trailgraph-rpm-boundary";

/// `multipart/mixed` body holding the two masks of a patch.
pub fn encode_masks_multipart(masks: &PatchMasks) -> (String, Vec<u8>) {
    let mut body = Vec::new();
    for (name, r) in [("road", &masks.road), ("keypoint", &masks.keypoint)] {
        body.extend_from_slice(format!("--{MULTIPART_BOUNDARY}\r\n").as_bytes());
        body.extend_from_slice(format!("Content-Disposition: form-data; name=\"{name}\"\r\n").as_bytes());
        body.extend_from_slice(b"Content-Type: application/octet-stream\r\n\r\n");
        body.extend_from_slice(&encode_raster(r));
        body.extend_from_slice(b"\r\n");
    }
    body.extend_from_slice(format!("--{MULTIPART_BOUNDARY}--\r\n").as_bytes());
    (format!("multipart/mixed; boundary={MULTIPART_BOUNDARY}"), body)
}

fn find_bytes(hay: &[u8], needle: &[u8], from: usize) -> Option<usize> {
    if needle.is_empty() || from > hay.len() {
        return None;
    }
    hay[from..].windows(needle.len()).position(|w| w == needle).map(|p| p + from)
}

/// Splits a multipart body into `(name, payload)` parts. RPM1 payloads are
/// sized from their own header, so raster bytes that happen to contain the
/// boundary are still read correctly.
pub fn decode_multipart(content_type: &str, body: &[u8]) -> Result<Vec<(Option<String>, Vec<u8>)>> {
    let boundary = content_type
        .split(';')
        .map(str::trim)
        .find_map(|p| p.strip_prefix("boundary="))
        .map(|b| b.trim_matches('"'))
        .ok_or_else(|| Error::Remote(format!("no multipart boundary in content type '{content_type}'")))?;
    let delim = format!("--{boundary}");
    let bad = |what: &str| Error::Remote(format!("malformed multipart body: {what}"));
    let mut at = find_bytes(body, delim.as_bytes(), 0).ok_or_else(|| bad("no opening boundary"))?;
    let mut parts = Vec::new();
    loop {
        at += delim.len();
        if body[at..].starts_with(b"--") {
            return Ok(parts);
        }
        if body[at..].starts_with(b"\r\n") {
            at += 2;
        }
        let head_end = find_bytes(body, b"\r\n\r\n", at).ok_or_else(|| bad("unterminated part headers"))?;
        let headers = String::from_utf8_lossy(&body[at..head_end]).to_string();
        let name = headers.lines().find_map(|l| {
            let lower = l.to_ascii_lowercase();
            if !lower.starts_with("content-disposition") {
                return None;
            }
            let i = lower.find("name=\"")? + 6;
            let j = l[i..].find('"')?;
            Some(l[i..i + j].to_string())
        });
        let start = head_end + 4;
        let end = if body[start..].starts_with(crate::formats::RPM_MAGIC) && body.len() >= start + 12 {
            let h = u32::from_le_bytes(body[start + 4..start + 8].try_into().expect("4 bytes")) as usize;
            let w = u32::from_le_bytes(body[start + 8..start + 12].try_into().expect("4 bytes")) as usize;
            let len = h
                .checked_mul(w)
                .and_then(|n| n.checked_mul(4))
                .and_then(|n| n.checked_add(12))
                .ok_or_else(|| bad("raster part overflows"))?;
            start.checked_add(len).filter(|&e| e <= body.len()).ok_or_else(|| bad("raster part truncated"))?
        } else {
            let next = find_bytes(body, format!("\r\n{delim}").as_bytes(), start).ok_or_else(|| bad("part never closed"))?;
            next
        };
        parts.push((name, body[start..end].to_vec()));
        at = find_bytes(body, delim.as_bytes(), end).ok_or_else(|| bad("missing closing boundary"))?;
    }
}

/// Patch masks shared by every session of a service, keyed by an owner id
/// (the session) and the patch origin.
pub type MaskCache = Arc<Mutex<LruCache<(u64, (usize, usize)), Arc<PatchMasks>>>>;

pub fn new_mask_cache(capacity: usize) -> MaskCache {
    Arc::new(Mutex::new(LruCache::new(
        NonZeroUsize::new(capacity.max(1)).expect("capacity is non-zero"),
    )))
}

/// Fronts a provider with a shared LRU cache.
pub struct CachedProvider {
    pub inner: Arc<dyn MaskProvider + Send + Sync>,
    pub owner: u64,
    pub cache: MaskCache,
}

impl MaskProvider for CachedProvider {
    fn masks(&self, origin: (usize, usize), patch: usize) -> trailgraph_core::Result<PatchMasks> {
        let key = (self.owner, origin);
        if let Some(hit) = self.cache.lock().expect("cache lock").get(&key).cloned() {
            if hit.road.width() == patch {
                return Ok((*hit).clone());
            }
        }
        let masks = self.inner.masks(origin, patch)?;
        self.cache
            .lock()
            .expect("cache lock")
            .put(key, Arc::new(masks.clone()));
        Ok(masks)
    }
}
