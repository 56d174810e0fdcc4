//! Binary graph cache: `b"FSBG"`, u32 version, u64 user/item/edge counts,
//! then one `(u64 user, u64 item)` pair per edge, all little-endian.

use std::fs;
use std::path::Path;

use super::bipartite::BipartiteGraph;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"FSBG";
const VERSION: u32 = 1;

pub fn encode(graph: &BipartiteGraph) -> Vec<u8> {
    let edges = graph.edges();
    let mut out = Vec::with_capacity(32 + 16 * edges.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for n in [graph.num_users(), graph.num_items(), edges.len()] {
        out.extend_from_slice(&(n as u64).to_le_bytes());
    }
    for (u, i) in edges {
        out.extend_from_slice(&(u as u64).to_le_bytes());
        out.extend_from_slice(&(i as u64).to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<BipartiteGraph> {
    let bad = |m: &str| Error::InvalidArgument(format!("graph dump: {m}"));
    if bytes.len() < 32 || &bytes[..4] != MAGIC {
        return Err(bad("bad header"));
    }
    let word = |off: usize| u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let (users, items, n_edges) = (word(8), word(16), word(24) as usize);
    if bytes.len() != 32 + 16 * n_edges {
        return Err(bad("truncated edge list"));
    }
    let edges = (0..n_edges).map(|k| {
        let off = 32 + 16 * k;
        (word(off) as usize, word(off + 8) as usize)
    });
    let graph = BipartiteGraph::build(edges)?;
    if graph.num_users() as u64 != users || graph.num_items() as u64 != items {
        return Err(bad("node counts disagree with edge list"));
    }
    Ok(graph)
}

pub fn write(graph: &BipartiteGraph, path: &Path) -> Result<()> {
    fs::write(path, encode(graph)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<BipartiteGraph> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
