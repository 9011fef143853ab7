//! Sparse correspondences between consecutive frames.
//!
//! The built-in matcher is mutual nearest neighbour over cosine similarity. Externally
//! computed correspondences can be loaded from a JSON-lines file with one record per
//! frame pair: `{"t": 0, "pairs": [[i, j, conf], ...]}`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{argmax, normalize_rows, Tensor2};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "(usize, usize, f64)", into = "(usize, usize, f64)")]
pub struct Match {
    /// Patch index in frame `t`.
    pub src: usize,
    /// Patch index in frame `t + 1`.
    pub dst: usize,
    pub confidence: f64,
}

impl From<(usize, usize, f64)> for Match {
    fn from((src, dst, confidence): (usize, usize, f64)) -> Self {
        Self { src, dst, confidence }
    }
}

impl From<Match> for (usize, usize, f64) {
    fn from(m: Match) -> Self {
        (m.src, m.dst, m.confidence)
    }
}

/// A partial matching between two frames.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchList {
    pub pairs: Vec<Match>,
}

impl MatchList {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Checks the partial-matching invariant, index bounds against `patches`, and
    /// confidences in `[0, 1]`.
    pub fn validate(&self, patches: usize) -> Result<()> {
        let mut seen_src = vec![false; patches];
        let mut seen_dst = vec![false; patches];
        for m in &self.pairs {
            if m.src >= patches || m.dst >= patches {
                return Err(Error::MatchIndex(format!("pair ({}, {}) with {patches} patches", m.src, m.dst)));
            }
            if !(0.0..=1.0).contains(&m.confidence) {
                return Err(Error::InvalidMatches(format!(
                    "pair ({}, {}) has confidence {} outside [0, 1]",
                    m.src, m.dst, m.confidence
                )));
            }
            if std::mem::replace(&mut seen_src[m.src], true) {
                return Err(Error::InvalidMatches(format!("duplicate left index {} in pair ({}, {})", m.src, m.src, m.dst)));
            }
            if std::mem::replace(&mut seen_dst[m.dst], true) {
                return Err(Error::InvalidMatches(format!("duplicate right index {} in pair ({}, {})", m.dst, m.src, m.dst)));
            }
        }
        Ok(())
    }

    /// Swaps the roles of the two frames.
    pub fn transposed(&self) -> Self {
        let mut pairs: Vec<Match> =
            self.pairs.iter().map(|m| Match { src: m.dst, dst: m.src, confidence: m.confidence }).collect();
        pairs.sort_by_key(|m| m.src);
        Self { pairs }
    }
}

/// Anything that can produce correspondences between two frames' patch features.
pub trait Matcher {
    fn match_frames(&self, a: &Tensor2, b: &Tensor2) -> Result<MatchList>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MutualNearestNeighbor {
    pub min_confidence: f64,
}

impl Default for MutualNearestNeighbor {
    fn default() -> Self {
        Self { min_confidence: 0.7 }
    }
}

impl Matcher for MutualNearestNeighbor {
    fn match_frames(&self, a: &Tensor2, b: &Tensor2) -> Result<MatchList> {
        mutual_nn_match(a, b, self.min_confidence)
    }
}

/// Pairs `(i, j)` where each is the other's most cosine-similar patch (lowest index on
/// ties) and the similarity is at least `min_conf`. Output is sorted by `src`.
pub fn mutual_nn_match(a: &Tensor2, b: &Tensor2, min_conf: f64) -> Result<MatchList> {
    if a.cols() != b.cols() {
        return Err(Error::shape("mutual_nn_match", format!("feature dims {} vs {}", a.cols(), b.cols())));
    }
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::NonFinite("mutual_nn_match"));
    }
    if a.rows() == 0 || b.rows() == 0 {
        return Ok(MatchList::default());
    }
    let sim = normalize_rows(a).matmul_nt(&normalize_rows(b))?;
    let best_for_a: Vec<usize> = (0..sim.rows()).map(|i| sim.argmax_row(i)).collect();
    let sim_t = sim.transpose();
    let best_for_b: Vec<usize> = (0..sim_t.rows()).map(|j| argmax(sim_t.row(j))).collect();
    let pairs = best_for_a
        .iter()
        .enumerate()
        .filter(|&(i, &j)| best_for_b[j] == i && sim[(i, j)] >= min_conf)
        .map(|(i, &j)| Match { src: i, dst: j, confidence: sim[(i, j)].clamp(0.0, 1.0) })
        .collect();
    Ok(MatchList { pairs })
}

#[derive(Serialize, Deserialize)]
struct MatchRecord {
    t: usize,
    pairs: Vec<Match>,
}

/// Match lists keyed by the index `t` of the first frame in each pair.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameMatches {
    pub by_pair: BTreeMap<usize, MatchList>,
}

impl FrameMatches {
    /// Lists for pairs `0..window-1`; pairs absent from the file are empty.
    pub fn for_window(&self, window: usize) -> Vec<MatchList> {
        (0..window.saturating_sub(1)).map(|t| self.by_pair.get(&t).cloned().unwrap_or_default()).collect()
    }

    /// Lists for the last `frames` frames of a `window`-frame clip, re-indexed from 0.
    pub fn for_last_frames(&self, window: usize, frames: usize) -> Vec<MatchList> {
        let start = window.saturating_sub(frames);
        (start..window.saturating_sub(1)).map(|t| self.by_pair.get(&t).cloned().unwrap_or_default()).collect()
    }

    pub fn from_lists(lists: &[MatchList]) -> Self {
        Self { by_pair: lists.iter().cloned().enumerate().collect() }
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut by_pair = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: MatchRecord = serde_json::from_str(line)
                .map_err(|e| Error::format(path, format!("line {}: {e}", lineno + 1)))?;
            let list = MatchList { pairs: rec.pairs };
            let max_index = list.pairs.iter().map(|m| m.src.max(m.dst) + 1).max().unwrap_or(0);
            list.validate(max_index)
                .map_err(|e| Error::format(path, format!("line {} (t = {}): {e}", lineno + 1, rec.t)))?;
            if by_pair.insert(rec.t, list).is_some() {
                return Err(Error::format(path, format!("line {}: frame pair {} listed twice", lineno + 1, rec.t)));
            }
        }
        Ok(Self { by_pair })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (&t, list) in &self.by_pair {
            let rec = MatchRecord { t, pairs: list.pairs.clone() };
            out.push_str(&serde_json::to_string(&rec).expect("match records serialize"));
            out.push('\n');
        }
        out
    }
}

pub fn load_matches(path: &Path) -> Result<FrameMatches> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    FrameMatches::parse(&text, path)
}

pub fn save_matches(path: &Path, matches: &FrameMatches) -> Result<()> {
    fs::write(path, matches.to_jsonl()).map_err(|e| Error::io(path, e))
}
