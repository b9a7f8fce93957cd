//! On-disk formats.
//!
//! * RPM1 rasters: `b"RPM1"`, `u32` LE height, `u32` LE width, then
//!   `height * width` little-endian `f32` values in row-major order.
//! * Graph JSON: `{"vertices": [[x, y], ...], "edges": [[i, j], ...]}` with an
//!   optional per-edge `"scores"` array.
//! * Weights: a `u32` LE header length, a JSON header
//!   `{"tensors": [{"name", "shape"}, ...]}`, then every tensor's `f32` LE
//!   payload in header order.

use std::fs;
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use trailgraph_core::head::{HeadWeights, NamedTensor};
use trailgraph_core::{PromptPoint, Raster, RoadGraph, Vertex};

use crate::error::{Error, Result};

pub const RPM_MAGIC: &[u8; 4] = b"RPM1";

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_raster(raster: &Raster) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + raster.data().len() * 4);
    out.extend_from_slice(RPM_MAGIC);
    out.extend_from_slice(&(raster.height() as u32).to_le_bytes());
    out.extend_from_slice(&(raster.width() as u32).to_le_bytes());
    for v in raster.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_raster(bytes: &[u8]) -> Result<Raster> {
    if bytes.len() < 12 {
        return Err(Error::format("raster header truncated"));
    }
    if &bytes[..4] != RPM_MAGIC {
        return Err(Error::format(format!("bad raster magic {:?}", String::from_utf8_lossy(&bytes[..4]))));
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let need = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::format(format!("raster dimensions {h}x{w} overflow")))?;
    let payload = &bytes[12..];
    if payload.len() != need {
        return Err(Error::format(format!(
            "raster payload is {} bytes, {h}x{w} needs {need}",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(Raster::new(h, w, data)?)
}

pub fn read_raster(path: &Path) -> Result<Raster> {
    decode_raster(&read_bytes(path)?).map_err(|e| e.at(path))
}

pub fn write_raster(raster: &Raster, path: &Path) -> Result<()> {
    write_bytes(path, &encode_raster(raster))
}

/// Wire form of a graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphDoc {
    pub vertices: Vec<[f64; 2]>,
    pub edges: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
}

impl GraphDoc {
    pub fn from_graph(graph: &RoadGraph) -> Self {
        Self {
            vertices: graph.vertices.iter().map(|v| [v.x, v.y]).collect(),
            edges: graph.edges.iter().map(|&(i, j)| [i, j]).collect(),
            scores: None,
        }
    }

    pub fn with_scores(graph: &RoadGraph, scores: Vec<f64>) -> Self {
        Self {
            scores: Some(scores),
            ..Self::from_graph(graph)
        }
    }

    /// Validates and canonicalizes. Edge scores, when present, follow their
    /// edges through canonical sorting.
    pub fn into_graph(self) -> Result<RoadGraph> {
        if let Some(s) = &self.scores {
            if s.len() != self.edges.len() {
                return Err(Error::format(format!(
                    "{} scores for {} edges",
                    s.len(),
                    self.edges.len()
                )));
            }
        }
        let vertices = self.vertices.iter().map(|&[x, y]| Vertex::at(x, y)).collect();
        let edges = self.edges.iter().map(|&[i, j]| (i, j)).collect();
        Ok(RoadGraph::new(vertices, edges)?)
    }
}

pub fn encode_graph(graph: &RoadGraph) -> String {
    to_json(&GraphDoc::from_graph(graph))
}

pub fn decode_graph(text: &str) -> Result<RoadGraph> {
    from_json::<GraphDoc>(text)?.into_graph()
}

pub fn read_graph(path: &Path) -> Result<RoadGraph> {
    decode_graph(&read_text(path)?).map_err(|e| e.at(path))
}

pub fn write_graph(graph: &RoadGraph, path: &Path) -> Result<()> {
    write_bytes(path, encode_graph(graph).as_bytes())
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightsHeader {
    tensors: Vec<TensorEntry>,
}

pub fn encode_tensors(tensors: &[NamedTensor]) -> Vec<u8> {
    let header = WeightsHeader {
        tensors: tensors
            .iter()
            .map(|t| TensorEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for t in tensors {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    if bytes.len() < 4 {
        return Err(Error::format("weights header length missing"));
    }
    let hlen = u32::from_le_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
    let header_end = 4usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::format("weights header truncated"))?;
    let header: WeightsHeader = serde_json::from_slice(&bytes[4..header_end])
        .map_err(|e| Error::format(format!("weights header: {e}")))?;
    let mut at = header_end;
    let mut out = Vec::with_capacity(header.tensors.len());
    for t in header.tensors {
        let n = t
            .shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::format(format!("tensor '{}' shape overflows", t.name)))?;
        let end = at
            .checked_add(n)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::format(format!("payload of tensor '{}' truncated", t.name)))?;
        let data = bytes[at..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        at = end;
        out.push(NamedTensor {
            name: t.name,
            shape: t.shape,
            data,
        });
    }
    if at != bytes.len() {
        return Err(Error::format(format!("{} trailing bytes after tensors", bytes.len() - at)));
    }
    Ok(out)
}

pub fn encode_weights(weights: &HeadWeights) -> Vec<u8> {
    encode_tensors(&weights.to_named_tensors())
}

pub fn decode_weights(bytes: &[u8]) -> Result<HeadWeights> {
    Ok(HeadWeights::from_named_tensors(&decode_tensors(bytes)?)?)
}

pub fn read_weights(path: &Path) -> Result<HeadWeights> {
    decode_weights(&read_bytes(path)?).map_err(|e| e.at(path))
}

pub fn write_weights(weights: &HeadWeights, path: &Path) -> Result<()> {
    write_bytes(path, &encode_weights(weights))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("value serializes")
}

pub fn from_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::format(e.to_string()))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    from_json(&read_text(path)?).map_err(|e| e.at(path))
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

/// Vertex list as written by `nms` and read by `features` and `score`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VertexDoc {
    pub x: f64,
    pub y: f64,
    #[serde(default)]
    pub score: f64,
    #[serde(default)]
    pub is_keypoint: bool,
}

impl From<&Vertex> for VertexDoc {
    fn from(v: &Vertex) -> Self {
        Self {
            x: v.x,
            y: v.y,
            score: v.score,
            is_keypoint: v.is_keypoint,
        }
    }
}

impl From<&VertexDoc> for Vertex {
    fn from(v: &VertexDoc) -> Self {
        Vertex {
            x: v.x,
            y: v.y,
            score: v.score,
            is_keypoint: v.is_keypoint,
        }
    }
}

/// Accepts either `[{"x", "y", ...}]` or `[[x, y], ...]`.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum VertexInput {
    Full(VertexDoc),
    Pair([f64; 2]),
}

pub fn read_vertices(path: &Path) -> Result<Vec<Vertex>> {
    let raw: Vec<VertexInput> = read_json(path)?;
    Ok(raw
        .iter()
        .map(|v| match v {
            VertexInput::Full(d) => d.into(),
            VertexInput::Pair([x, y]) => Vertex::at(*x, *y),
        })
        .collect())
}

pub fn write_vertices(vertices: &[Vertex], path: &Path) -> Result<()> {
    let docs: Vec<VertexDoc> = vertices.iter().map(VertexDoc::from).collect();
    write_json(&docs, path)
}

pub fn read_prompts(path: &Path) -> Result<Vec<PromptPoint>> {
    read_json(path)
}
