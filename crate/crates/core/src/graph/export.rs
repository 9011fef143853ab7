use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::{DynamicGraph, Edge};

/// JSON form of a [`DynamicGraph`] (edge lists only, no features).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicGraphJson {
    pub w: usize,
    pub n: usize,
    pub d: usize,
    pub spatial_edges: Vec<Edge>,
    pub temporal_edges: Vec<Edge>,
}

impl From<&DynamicGraph> for DynamicGraphJson {
    fn from(g: &DynamicGraph) -> Self {
        Self {
            w: g.window,
            n: g.patches,
            d: g.dim(),
            spatial_edges: g.spatial_edges.clone(),
            temporal_edges: g.temporal_edges.clone(),
        }
    }
}

const PALETTE: [&str; 12] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
    "#aec7e8", "#ffbb78",
];

/// Graphviz rendering, one subgraph per frame. Temporal edges are dashed. When
/// `clusters` is given, nodes are filled by cluster index.
pub fn dynamic_graph_dot(g: &DynamicGraph, clusters: Option<&[usize]>) -> String {
    let mut out = String::from("graph dynamic {\n  node [shape=circle, style=filled, fillcolor=white];\n");
    for t in 0..g.window {
        let _ = writeln!(out, "  subgraph cluster_frame{t} {{\n    label=\"frame {t}\";");
        for p in 0..g.patches {
            let node = g.node_index(t, p);
            let color = clusters.map_or("white", |c| PALETTE[c[node] % PALETTE.len()]);
            let _ = writeln!(out, "    n{node} [label=\"{t}:{p}\", fillcolor=\"{color}\"];");
        }
        out.push_str("  }\n");
    }
    for e in &g.spatial_edges {
        let _ = writeln!(out, "  n{} -- n{} [weight={:.4}];", e.u, e.v, e.weight);
    }
    for e in &g.temporal_edges {
        let _ = writeln!(out, "  n{} -- n{} [style=dashed, weight={:.4}];", e.u, e.v, e.weight);
    }
    out.push_str("}\n");
    out
}
