//! Patch graphs: per-frame similarity graphs and windowed dynamic graphs with sparse
//! temporal links.

mod encoding;
mod export;

pub use encoding::{add_positional_encodings, sinusoid, EncodingConfig};
pub use export::{dynamic_graph_dot, DynamicGraphJson};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcher::MatchList;
use crate::sparse::CsrMatrix;
use crate::tensor::{dot, normalize_rows, Tensor2};

/// Patch layout of a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
}

impl Grid {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub fn patches(&self) -> usize {
        self.rows * self.cols
    }

    pub fn position(&self, patch: usize) -> (usize, usize) {
        (patch / self.cols, patch % self.cols)
    }
}

/// A window of per-frame patch features, stored frame-major as a `(w·n) × d` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureClip {
    pub window: usize,
    pub grid: Grid,
    pub features: Tensor2,
    pub frame_ids: Vec<i64>,
    /// Phase of the window's last frame, when known.
    pub phase_label: Option<usize>,
}

impl FeatureClip {
    pub fn new(window: usize, grid: Grid, features: Tensor2, frame_ids: Vec<i64>, phase_label: Option<usize>) -> Result<Self> {
        if window == 0 {
            return Err(Error::Invalid("window must contain at least one frame".into()));
        }
        if grid.patches() == 0 {
            return Err(Error::Invalid("patch grid is empty".into()));
        }
        if features.rows() != window * grid.patches() {
            return Err(Error::shape(
                "feature_clip",
                format!("{} feature rows for {} frames of {} patches", features.rows(), window, grid.patches()),
            ));
        }
        if frame_ids.len() != window {
            return Err(Error::shape("feature_clip", format!("{} frame ids for {} frames", frame_ids.len(), window)));
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("feature_clip"));
        }
        Ok(Self { window, grid, features, frame_ids, phase_label })
    }

    pub fn patches(&self) -> usize {
        self.grid.patches()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn nodes(&self) -> usize {
        self.features.rows()
    }

    /// The `n × d` features of frame `t`.
    pub fn frame(&self, t: usize) -> Tensor2 {
        let n = self.patches();
        self.features.select_rows(&(t * n..(t + 1) * n).collect::<Vec<_>>())
    }

    /// The sub-window made of the last `frames` frames; the label stays with the last frame.
    pub fn last_frames(&self, frames: usize) -> Result<FeatureClip> {
        if frames == 0 || frames > self.window {
            return Err(Error::Config(format!("window size {frames} does not fit a clip of {} frames", self.window)));
        }
        let n = self.patches();
        let start = self.window - frames;
        let features = self.features.select_rows(&(start * n..self.window * n).collect::<Vec<_>>());
        FeatureClip::new(frames, self.grid, features, self.frame_ids[start..].to_vec(), self.phase_label)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "(usize, usize, f64)", into = "(usize, usize, f64)")]
pub struct Edge {
    pub u: usize,
    pub v: usize,
    pub weight: f64,
}

impl From<(usize, usize, f64)> for Edge {
    fn from((u, v, weight): (usize, usize, f64)) -> Self {
        Self { u, v, weight }
    }
}

impl From<Edge> for (usize, usize, f64) {
    fn from(e: Edge) -> Self {
        (e.u, e.v, e.weight)
    }
}

/// Similarity graph of a single frame. Edges are stored once with `u < v`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameGraph {
    pub patches: usize,
    pub edges: Vec<Edge>,
    pub node_features: Tensor2,
}

impl FrameGraph {
    pub fn to_csr(&self) -> CsrMatrix {
        let mut trip = Vec::with_capacity(self.edges.len() * 2);
        for e in &self.edges {
            trip.push((e.u, e.v, e.weight));
            trip.push((e.v, e.u, e.weight));
        }
        CsrMatrix::from_triplets(self.patches, &trip).expect("edge endpoints within frame")
    }

    pub fn to_dense(&self) -> Tensor2 {
        self.to_csr().to_dense()
    }
}

/// Positive patchwise dot products, diagonal excluded. With `normalize` the features are
/// L2-normalized first, so weights are cosine similarities.
pub fn build_adjacency(features: &Tensor2, normalize: bool) -> FrameGraph {
    let f = if normalize { normalize_rows(features) } else { features.clone() };
    let n = f.rows();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let s = dot(f.row(i), f.row(j));
            if s > 0.0 {
                edges.push(Edge { u: i, v: j, weight: s });
            }
        }
    }
    FrameGraph { patches: n, edges, node_features: features.clone() }
}

/// Keeps edges whose weight is strictly above `tau`.
pub fn threshold_graph(g: &FrameGraph, tau: f64) -> FrameGraph {
    FrameGraph {
        patches: g.patches,
        edges: g.edges.iter().copied().filter(|e| e.weight > tau).collect(),
        node_features: g.node_features.clone(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphConfig {
    /// Similarity threshold for spatial edges.
    pub tau: f64,
    /// L2-normalize patch features before similarity and use normalized features as node features.
    pub normalize: bool,
    pub encodings: EncodingConfig,
    /// Multiplier applied to node features (after encodings) before they enter the heads.
    pub feature_scale: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self { tau: 0.9, normalize: true, encodings: EncodingConfig::default(), feature_scale: 1.0 }
    }
}

/// Sparse spatiotemporal graph over the `w·n` patch nodes of a window.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicGraph {
    pub window: usize,
    pub patches: usize,
    pub node_features: Tensor2,
    /// Within-frame edges, `u < v`, both endpoints in the same frame.
    pub spatial_edges: Vec<Edge>,
    /// Edges from frame `t` (at `u`) to frame `t + 1` (at `v`).
    pub temporal_edges: Vec<Edge>,
}

impl DynamicGraph {
    pub fn nodes(&self) -> usize {
        self.window * self.patches
    }

    pub fn dim(&self) -> usize {
        self.node_features.cols()
    }

    pub fn node_index(&self, frame: usize, patch: usize) -> usize {
        frame * self.patches + patch
    }

    pub fn node_position(&self, node: usize) -> (usize, usize) {
        (node / self.patches, node % self.patches)
    }

    /// Symmetric weighted adjacency merging both edge types.
    pub fn combined_adjacency(&self, spatial_weight: f64, temporal_weight: f64) -> CsrMatrix {
        let mut trip = Vec::with_capacity(2 * (self.spatial_edges.len() + self.temporal_edges.len()));
        for (edges, scale) in [(&self.spatial_edges, spatial_weight), (&self.temporal_edges, temporal_weight)] {
            if scale == 0.0 {
                continue;
            }
            for e in edges {
                trip.push((e.u, e.v, e.weight * scale));
                trip.push((e.v, e.u, e.weight * scale));
            }
        }
        CsrMatrix::from_triplets(self.nodes(), &trip).expect("edge endpoints within graph")
    }

    pub fn edge_count(&self) -> usize {
        self.spatial_edges.len() + self.temporal_edges.len()
    }
}

/// Assembles the windowed graph: thresholded similarity edges inside every frame and
/// matcher correspondences between consecutive frames, weighted by match confidence.
/// Patch features before positional encodings: L2-normalized per patch when configured.
pub fn base_features(features: &Tensor2, config: &GraphConfig) -> Tensor2 {
    if config.normalize { normalize_rows(features) } else { features.clone() }
}

pub fn build_dynamic_graph(clip: &FeatureClip, config: &GraphConfig, matches: &[MatchList]) -> Result<DynamicGraph> {
    let (w, n) = (clip.window, clip.patches());
    if matches.len() != w - 1 {
        return Err(Error::MatchIndex(format!("{} match lists for {} frame pairs", matches.len(), w - 1)));
    }
    let base = base_features(&clip.features, config);

    let mut spatial_edges = Vec::new();
    for t in 0..w {
        let rows: Vec<usize> = (t * n..(t + 1) * n).collect();
        let frame = build_adjacency(&base.select_rows(&rows), false);
        let kept = threshold_graph(&frame, config.tau);
        spatial_edges.extend(kept.edges.iter().map(|e| Edge { u: t * n + e.u, v: t * n + e.v, weight: e.weight }));
    }

    let mut temporal_edges = Vec::new();
    for (t, list) in matches.iter().enumerate() {
        list.validate(n)
            .map_err(|e| Error::MatchIndex(format!("frame pair {t}: {e}")))?;
        for m in &list.pairs {
            temporal_edges.push(Edge { u: t * n + m.src, v: (t + 1) * n + m.dst, weight: m.confidence });
        }
    }

    let mut node_features = add_positional_encodings(&base, w, clip.grid, &config.encodings)?;
    if config.feature_scale != 1.0 {
        node_features = node_features.scale(config.feature_scale);
    }
    Ok(DynamicGraph { window: w, patches: n, node_features, spatial_edges, temporal_edges })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcher::Match;
    use proptest::prelude::*;

    fn unit(d: usize, k: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[k] = 1.0;
        v
    }

    #[test]
    fn orthogonal_features_have_no_edges() {
        let f = Tensor2::from_rows(&[&unit(3, 0), &unit(3, 1), &unit(3, 2)]);
        assert!(build_adjacency(&f, false).edges.is_empty());
    }

    #[test]
    fn identical_unit_features_have_unit_weight() {
        let f = Tensor2::from_rows(&[&unit(2, 0), &unit(2, 0)]);
        let g = build_adjacency(&f, false);
        assert_eq!(g.edges, vec![Edge { u: 0, v: 1, weight: 1.0 }]);
        assert_eq!(g.to_dense()[(0, 0)], 0.0);
    }

    #[test]
    fn negative_similarity_is_dropped() {
        let f = Tensor2::from_rows(&[&[1.0, 0.0], &[-0.3, 0.5]]);
        let g = build_adjacency(&f, false);
        assert!(g.edges.is_empty());
    }

    #[test]
    fn threshold_keeps_only_strong_edges() {
        let g = FrameGraph {
            patches: 3,
            edges: vec![Edge { u: 0, v: 1, weight: 0.95 }, Edge { u: 1, v: 2, weight: 0.5 }],
            node_features: Tensor2::zeros(3, 1),
        };
        assert_eq!(threshold_graph(&g, 0.9).edges, vec![Edge { u: 0, v: 1, weight: 0.95 }]);
        assert_eq!(threshold_graph(&g, -1.0), g);
        assert_eq!(GraphConfig::default().tau, 0.9);
    }

    fn clip(w: usize, grid: Grid, d: usize, f: impl Fn(usize, usize) -> f64) -> FeatureClip {
        let feats = Tensor2::from_fn(w * grid.patches(), d, f);
        FeatureClip::new(w, grid, feats, (0..w as i64).collect(), None).unwrap()
    }

    #[test]
    fn single_frame_window_has_no_temporal_edges() {
        let c = clip(1, Grid::new(2, 2), 8, |i, j| ((i * 3 + j) % 5) as f64 + 1.0);
        let cfg = GraphConfig::default();
        let g = build_dynamic_graph(&c, &cfg, &[]).unwrap();
        assert!(g.temporal_edges.is_empty());
        let frame = threshold_graph(&build_adjacency(&normalize_rows(&c.features), false), cfg.tau);
        assert_eq!(g.spatial_edges, frame.edges);
    }

    #[test]
    fn one_match_gives_one_temporal_edge() {
        let c = clip(2, Grid::new(2, 2), 8, |i, j| (i + j) as f64);
        let n = c.patches();
        let m = MatchList { pairs: vec![Match { src: 0, dst: 0, confidence: 1.0 }] };
        let g = build_dynamic_graph(&c, &GraphConfig::default(), &[m]).unwrap();
        assert_eq!(g.temporal_edges, vec![Edge { u: 0, v: n, weight: 1.0 }]);
    }

    #[test]
    fn out_of_range_match_is_rejected() {
        let c = clip(2, Grid::new(1, 2), 8, |i, j| (i + j) as f64);
        let m = MatchList { pairs: vec![Match { src: 0, dst: 5, confidence: 1.0 }] };
        assert!(matches!(build_dynamic_graph(&c, &GraphConfig::default(), &[m]), Err(Error::MatchIndex(_))));
        assert!(matches!(build_dynamic_graph(&c, &GraphConfig::default(), &[]), Err(Error::MatchIndex(_))));
    }

    #[test]
    fn spatial_edges_stay_inside_frames() {
        let c = clip(3, Grid::new(2, 3), 8, |i, j| ((i % 6) * 2 + j % 3) as f64 + 0.5);
        let g = build_dynamic_graph(&c, &GraphConfig { tau: 0.0, ..Default::default() }, &[MatchList::default(), MatchList::default()]).unwrap();
        assert!(!g.spatial_edges.is_empty());
        for e in &g.spatial_edges {
            assert_eq!(g.node_position(e.u).0, g.node_position(e.v).0);
        }
    }

    proptest! {
        #[test]
        fn adjacency_symmetric_nonnegative(values in prop::collection::vec(-2.0f64..2.0, 6 * 4)) {
            let f = Tensor2::from_vec(6, 4, values).unwrap();
            let a = build_adjacency(&f, true).to_dense();
            for i in 0..6 {
                prop_assert_eq!(a[(i, i)], 0.0);
                for j in 0..6 {
                    prop_assert!(a[(i, j)] >= 0.0);
                    prop_assert!((a[(i, j)] - a[(j, i)]).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn node_index_round_trips(w in 1usize..6, rows in 1usize..5, cols in 1usize..5) {
            let g = DynamicGraph {
                window: w,
                patches: rows * cols,
                node_features: Tensor2::zeros(w * rows * cols, 1),
                spatial_edges: vec![],
                temporal_edges: vec![],
            };
            for node in 0..g.nodes() {
                let (t, p) = g.node_position(node);
                prop_assert_eq!(g.node_index(t, p), node);
            }
        }
    }
}
