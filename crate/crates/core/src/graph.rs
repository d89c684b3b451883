//! Fully connected channel graphs and block-diagonal mini-batches.
//!
//! Each segment becomes one graph with a node per channel. Every ordered pair
//! of nodes is joined, self-loops included, so a graph on `C` channels has
//! `C²` directed edges stored as `(source, destination)` pairs.

use crate::dsp::Segment;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct EEGGraph {
    /// `C × W` node signals.
    pub node_features: Vec<Vec<f64>>,
    pub edges: Vec<(usize, usize)>,
    pub label: usize,
    pub trial_id: u64,
    pub subject_id: u64,
}

impl EEGGraph {
    pub fn n_nodes(&self) -> usize {
        self.node_features.len()
    }

    pub fn feature_len(&self) -> usize {
        self.node_features.first().map_or(0, Vec::len)
    }
}

/// Complete directed edge set with self-loops, grouped by destination.
pub fn full_edges(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|dst| (0..n).map(move |src| (src, dst))).collect()
}

pub fn build_graph(s: &Segment) -> EEGGraph {
    EEGGraph {
        node_features: s.samples.clone(),
        edges: full_edges(s.n_channels()),
        label: s.label,
        trial_id: s.trial_id,
        subject_id: s.subject_id,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphBatch {
    /// Row-major `[N, W]` node signals, graphs stacked in order.
    pub features: Vec<f64>,
    pub feature_len: usize,
    /// Edges in batch-global node indices.
    pub edges: Vec<(usize, usize)>,
    /// First node of each graph.
    pub offsets: Vec<usize>,
    /// Graph index of each node.
    pub membership: Vec<usize>,
    /// Number of edges contributed by each graph.
    pub edge_counts: Vec<usize>,
    pub labels: Vec<usize>,
    pub trial_ids: Vec<u64>,
    pub subject_ids: Vec<u64>,
}

impl GraphBatch {
    pub fn n_graphs(&self) -> usize {
        self.offsets.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.membership.len()
    }

    pub fn nodes_per_graph(&self) -> usize {
        self.n_nodes() / self.n_graphs().max(1)
    }
}

/// Stacks graphs of equal channel count and feature length.
pub fn batch_graphs(gs: &[EEGGraph]) -> Result<GraphBatch> {
    let first = gs
        .first()
        .ok_or_else(|| Error::Contract("cannot batch an empty list of graphs".into()))?;
    let (c, w) = (first.n_nodes(), first.feature_len());
    let mut b = GraphBatch {
        features: Vec::with_capacity(gs.len() * c * w),
        feature_len: w,
        edges: Vec::new(),
        offsets: Vec::with_capacity(gs.len()),
        membership: Vec::with_capacity(gs.len() * c),
        edge_counts: Vec::with_capacity(gs.len()),
        labels: Vec::with_capacity(gs.len()),
        trial_ids: Vec::with_capacity(gs.len()),
        subject_ids: Vec::with_capacity(gs.len()),
    };
    for (g, graph) in gs.iter().enumerate() {
        if graph.n_nodes() != c {
            return Err(Error::Shape(format!(
                "graph {g} has {} nodes, graph 0 has {c}",
                graph.n_nodes()
            )));
        }
        if let Some(row) = graph.node_features.iter().find(|r| r.len() != w) {
            return Err(Error::Shape(format!(
                "graph {g} has a node with {} features, expected {w}",
                row.len()
            )));
        }
        if let Some(&(s, d)) = graph.edges.iter().find(|(s, d)| *s >= c || *d >= c) {
            return Err(Error::Index(format!("graph {g} has edge ({s}, {d}) outside 0..{c}")));
        }
        let off = g * c;
        b.offsets.push(off);
        b.features.extend(graph.node_features.iter().flatten());
        b.membership.extend(std::iter::repeat_n(g, c));
        b.edges.extend(graph.edges.iter().map(|&(s, d)| (s + off, d + off)));
        b.edge_counts.push(graph.edges.len());
        b.labels.push(graph.label);
        b.trial_ids.push(graph.trial_id);
        b.subject_ids.push(graph.subject_id);
    }
    Ok(b)
}

/// Inverse of [`batch_graphs`].
pub fn unbatch(b: &GraphBatch) -> Vec<EEGGraph> {
    let c = b.nodes_per_graph();
    let w = b.feature_len;
    let mut edge_start = 0;
    (0..b.n_graphs())
        .map(|g| {
            let off = b.offsets[g];
            let edges = b.edges[edge_start..edge_start + b.edge_counts[g]]
                .iter()
                .map(|&(s, d)| (s - off, d - off))
                .collect();
            edge_start += b.edge_counts[g];
            EEGGraph {
                node_features: (0..c)
                    .map(|i| b.features[(off + i) * w..(off + i + 1) * w].to_vec())
                    .collect(),
                edges,
                label: b.labels[g],
                trial_id: b.trial_ids[g],
                subject_id: b.subject_ids[g],
            }
        })
        .collect()
}
