//! Checkpoint file: a magic line, one JSON header line, a blob marker line,
//! then every real array as little-endian `f32` in declaration order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::graph::ModelGraph;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "intq-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
const BLOB_MARKER: &str = "%%BLOB%%";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    seed: u64,
    /// Blob array lengths per node, for validation on load.
    shapes: Vec<Vec<usize>>,
    graph: ModelGraph,
    config: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub graph: ModelGraph,
    pub seed: u64,
    /// Resolved configuration that produced the graph.
    pub config: serde_json::Value,
}

fn blob_bytes(g: &ModelGraph) -> Vec<u8> {
    let mut out = Vec::new();
    for node in &g.nodes {
        for arr in node.layer.blob_arrays() {
            for v in arr {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
    }
    out
}

/// Hex SHA-256 of the architecture and parameters, independent of seed and config.
pub fn content_hash(g: &ModelGraph) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(g).expect("graph serializes"));
    h.update(blob_bytes(g));
    hex::encode(h.finalize())
}

impl Checkpoint {
    pub fn new(graph: ModelGraph, seed: u64, config: serde_json::Value) -> Self {
        Self {
            graph,
            seed,
            config,
        }
    }

    pub fn hash(&self) -> String {
        content_hash(&self.graph)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            format_version: CHECKPOINT_VERSION,
            seed: self.seed,
            shapes: self.graph.nodes.iter().map(|n| n.layer.blob_lens()).collect(),
            graph: self.graph.clone(),
            config: self.config.clone(),
        };
        let mut out = format!(
            "{CHECKPOINT_MAGIC}\n{}\n{BLOB_MARKER}\n",
            serde_json::to_string(&header).expect("header serializes")
        )
        .into_bytes();
        out.extend(blob_bytes(&self.graph));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let what = "checkpoint";
        let mut lines = Vec::with_capacity(3);
        let mut rest = bytes;
        for _ in 0..3 {
            let nl = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::format(what, "truncated header"))?;
            lines.push(
                std::str::from_utf8(&rest[..nl]).map_err(|_| Error::format(what, "header is not UTF-8"))?,
            );
            rest = &rest[nl + 1..];
        }
        if lines[0] != CHECKPOINT_MAGIC {
            return Err(Error::format(what, "bad magic line"));
        }
        if lines[2] != BLOB_MARKER {
            return Err(Error::format(what, "missing blob marker"));
        }
        let raw: serde_json::Value =
            serde_json::from_str(lines[1]).map_err(|e| Error::format(what, e.to_string()))?;
        let found = raw
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::format(what, "no format_version"))? as u32;
        if found != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                what: what.into(),
                found,
                expected: CHECKPOINT_VERSION,
            });
        }
        let header: Header = serde_json::from_value(raw).map_err(|e| Error::format(what, e.to_string()))?;
        let mut graph = header.graph;
        let lens: Vec<Vec<usize>> = graph.nodes.iter().map(|n| n.layer.blob_lens()).collect();
        if lens != header.shapes {
            return Err(Error::format(what, "declared shapes disagree with the architecture"));
        }
        let total: usize = lens.iter().flatten().sum();
        if rest.len() != 4 * total {
            return Err(Error::format(
                what,
                format!("blob has {} bytes, expected {}", rest.len(), 4 * total),
            ));
        }
        let mut vals = rest
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
        for (i, node) in graph.nodes.iter_mut().enumerate() {
            for (arr, &len) in node.layer.blob_arrays_mut().into_iter().zip(&lens[i]) {
                *arr = vals.by_ref().take(len).collect();
                if let Some(k) = arr.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        index: k,
                        value: arr[k],
                    });
                }
            }
        }
        graph.validate()?;
        Ok(Self {
            graph,
            seed: header.seed,
            config: header.config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
