use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Grid;
use crate::tensor::{l2_norm, Tensor2};

/// Fixed sinusoidal encodings added to node features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncodingConfig {
    /// Encode the frame index within the window.
    pub temporal: bool,
    /// Encode the patch (row, col); the first half of the feature dims carry the row.
    pub spatial: bool,
    /// L2 norm of each added encoding vector.
    pub scale: f64,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self { temporal: false, spatial: false, scale: 0.5 }
    }
}

/// Transformer-style sinusoid of length `dims` at position `pos`.
pub fn sinusoid(pos: f64, dims: usize) -> Vec<f64> {
    (0..dims)
        .map(|i| {
            let pair = (i / 2) as f64;
            let freq = 1.0 / 10000f64.powf(2.0 * pair / dims as f64);
            if i % 2 == 0 { (pos * freq).sin() } else { (pos * freq).cos() }
        })
        .collect()
}

fn rescaled(mut v: Vec<f64>, norm: f64) -> Vec<f64> {
    let n = l2_norm(&v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x *= norm / n);
    }
    v
}

/// Adds temporal and/or spatial encodings to frame-major `(window·n) × d` features.
pub fn add_positional_encodings(features: &Tensor2, window: usize, grid: Grid, config: &EncodingConfig) -> Result<Tensor2> {
    let mut out = features.clone();
    if !config.temporal && !config.spatial {
        return Ok(out);
    }
    let d = features.cols();
    if d < 8 {
        return Err(Error::Invalid(format!("positional encodings need at least 8 feature dims, got {d}")));
    }
    let n = grid.patches();
    if features.rows() != window * n {
        return Err(Error::shape("positional_encoding", format!("{} rows for {window}x{n} nodes", features.rows())));
    }
    let temporal: Vec<Vec<f64>> = (0..window).map(|t| rescaled(sinusoid(t as f64, d), config.scale)).collect();
    let spatial: Vec<Vec<f64>> = (0..n)
        .map(|p| {
            let (r, c) = grid.position(p);
            let mut v = sinusoid(r as f64, d / 2);
            v.extend(sinusoid(c as f64, d - d / 2));
            rescaled(v, config.scale)
        })
        .collect();
    for t in 0..window {
        for p in 0..n {
            let row = out.row_mut(t * n + p);
            if config.temporal {
                row.iter_mut().zip(&temporal[t]).for_each(|(x, e)| *x += e);
            }
            if config.spatial {
                row.iter_mut().zip(&spatial[p]).for_each(|(x, e)| *x += e);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::dot;

    fn features(w: usize, n: usize, d: usize) -> Tensor2 {
        Tensor2::from_fn(w * n, d, |i, j| ((i % n) * 7 + j * 3) as f64 % 5.0 - 2.0)
    }

    #[test]
    fn disabled_is_identity() {
        let f = features(3, 4, 8);
        let out = add_positional_encodings(&f, 3, Grid::new(2, 2), &EncodingConfig::default()).unwrap();
        assert_eq!(out, f);
    }

    #[test]
    fn single_frame_temporal_shift_is_constant() {
        let f = features(1, 4, 8);
        let cfg = EncodingConfig { temporal: true, ..Default::default() };
        let out = add_positional_encodings(&f, 1, Grid::new(2, 2), &cfg).unwrap();
        let shift = out.sub(&f).unwrap();
        for i in 1..4 {
            assert_eq!(shift.row(i), shift.row(0));
        }
        // Pairwise differences are unchanged by a common shift.
        let before: Vec<f64> = f.row(1).iter().zip(f.row(2)).map(|(a, b)| a - b).collect();
        let after: Vec<f64> = out.row(1).iter().zip(out.row(2)).map(|(a, b)| a - b).collect();
        for (a, b) in before.iter().zip(&after) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn frames_with_identical_features_become_distinct() {
        let n = 4;
        let base = Tensor2::from_fn(n, 8, |i, j| (i + j) as f64 * 0.1);
        let mut both = base.clone().into_data();
        both.extend(base.into_data());
        let f = Tensor2::from_vec(2 * n, 8, both).unwrap();
        let cfg = EncodingConfig { temporal: true, ..Default::default() };
        let out = add_positional_encodings(&f, 2, Grid::new(2, 2), &cfg).unwrap();
        for p in 0..n {
            assert_ne!(out.row(p), out.row(n + p));
        }
    }

    #[test]
    fn encoding_norm_matches_scale() {
        let f = Tensor2::zeros(4, 16);
        let cfg = EncodingConfig { spatial: true, temporal: false, scale: 0.7 };
        let out = add_positional_encodings(&f, 1, Grid::new(2, 2), &cfg).unwrap();
        for i in 0..4 {
            assert!((dot(out.row(i), out.row(i)).sqrt() - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn too_few_dims_rejected() {
        let f = Tensor2::zeros(2, 4);
        let cfg = EncodingConfig { temporal: true, ..Default::default() };
        assert!(add_positional_encodings(&f, 2, Grid::new(1, 1), &cfg).is_err());
    }
}
