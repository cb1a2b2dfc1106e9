//! Stroke segmentations proposed by random walks on a skeleton graph.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::skeleton::{SkeletonEdge, SkeletonGraph};
use super::InferenceError;
use crate::geometry::Point;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WalkConfig {
    pub n_walks: usize,
    /// Turning angle, in degrees, that costs one nat.
    pub angle_scale_deg: f64,
    /// Pixels along an edge used to estimate its direction at a node.
    pub direction_span: usize,
}

impl Default for WalkConfig {
    fn default() -> Self {
        Self { n_walks: 100, angle_scale_deg: 45.0, direction_span: 5 }
    }
}

impl WalkConfig {
    pub fn validate(&self) -> Result<(), InferenceError> {
        if self.n_walks == 0 {
            return Err(InferenceError::Config("n_walks must be positive".into()));
        }
        if !(self.angle_scale_deg > 0.0 && self.angle_scale_deg.is_finite()) {
            return Err(InferenceError::Config(format!("angle_scale_deg {} must be positive", self.angle_scale_deg)));
        }
        if self.direction_span == 0 {
            return Err(InferenceError::Config("direction_span must be positive".into()));
        }
        Ok(())
    }
}

/// One segmentation: strokes as oriented edge sequences and their pixel
/// paths. `walk` is the index of the first walk that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateParse {
    pub edges: Vec<Vec<(usize, bool)>>,
    pub paths: Vec<Vec<Point>>,
    pub walk: usize,
}

impl CandidateParse {
    /// Order- and direction-free identity of the segmentation.
    pub fn key(&self) -> Vec<Vec<(usize, bool)>> {
        let mut strokes: Vec<Vec<(usize, bool)>> = self
            .edges
            .iter()
            .map(|s| {
                let back: Vec<(usize, bool)> = s.iter().rev().map(|&(e, r)| (e, !r)).collect();
                if back < *s {
                    back
                } else {
                    s.clone()
                }
            })
            .collect();
        strokes.sort();
        strokes
    }
}

fn oriented(e: &SkeletonEdge, reversed: bool) -> Vec<Point> {
    let mut p = e.points();
    if reversed {
        p.reverse();
    }
    p
}

/// Unit direction leaving the start of `path`.
fn leaving(path: &[Point], span: usize) -> Point {
    let k = span.min(path.len() - 1);
    let d = path[k] - path[0];
    let n = d.norm();
    if n > 0.0 {
        d * (1.0 / n)
    } else {
        d
    }
}

/// Unit direction arriving at the end of `path`.
fn arriving(path: &[Point], span: usize) -> Point {
    let last = path.len() - 1;
    let d = path[last] - path[last - span.min(last)];
    let n = d.norm();
    if n > 0.0 {
        d * (1.0 / n)
    } else {
        d
    }
}

fn turn_degrees(a: Point, b: Point) -> f64 {
    if a.norm() == 0.0 || b.norm() == 0.0 {
        return 90.0;
    }
    a.dot(b).clamp(-1.0, 1.0).acos().to_degrees()
}

fn pick(weights: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

fn walk(g: &SkeletonGraph, cfg: &WalkConfig, rng: &mut impl Rng) -> Vec<Vec<(usize, bool)>> {
    let mut used = vec![false; g.edges.len()];
    let mut strokes = Vec::new();
    while used.iter().any(|u| !u) {
        let open = |n: usize, used: &[bool]| -> usize {
            g.edges.iter().enumerate().filter(|(i, _)| !used[*i]).map(|(_, e)| (e.a == n) as usize + (e.b == n) as usize).sum()
        };
        let live: Vec<usize> = (0..g.nodes.len()).filter(|&n| open(n, &used) > 0).collect();
        let odd: Vec<usize> = live.iter().copied().filter(|&n| open(n, &used) % 2 == 1).collect();
        let pool = if odd.is_empty() { &live } else { &odd };
        let mut node = pool[rng.gen_range(0..pool.len())];
        let mut stroke = Vec::new();
        let mut heading: Option<Point> = None;
        loop {
            let mut options: Vec<(usize, bool)> = Vec::new();
            for (i, e) in g.edges.iter().enumerate() {
                if used[i] {
                    continue;
                }
                if e.a == node {
                    options.push((i, false));
                }
                if e.b == node {
                    options.push((i, true));
                }
            }
            if options.is_empty() {
                break;
            }
            let choice = match heading {
                None => rng.gen_range(0..options.len()),
                Some(h) => {
                    let w: Vec<f64> = options
                        .iter()
                        .map(|&(i, r)| {
                            let out = leaving(&oriented(&g.edges[i], r), cfg.direction_span);
                            (-turn_degrees(h, out) / cfg.angle_scale_deg).exp()
                        })
                        .collect();
                    pick(&w, rng)
                }
            };
            let (i, r) = options[choice];
            used[i] = true;
            stroke.push((i, r));
            let path = oriented(&g.edges[i], r);
            heading = Some(arriving(&path, cfg.direction_span));
            node = if r { g.edges[i].a } else { g.edges[i].b };
        }
        strokes.push(stroke);
    }
    strokes
}

fn stroke_path(g: &SkeletonGraph, stroke: &[(usize, bool)]) -> Vec<Point> {
    let mut path: Vec<Point> = Vec::new();
    for &(i, r) in stroke {
        for p in oriented(&g.edges[i], r) {
            if path.last() != Some(&p) {
                path.push(p);
            }
        }
    }
    path
}

/// Runs `n_walks` walks, each covering every edge exactly once, and keeps
/// the distinct segmentations in order of first appearance.
pub fn propose_parses(g: &SkeletonGraph, cfg: &WalkConfig, rng: &mut impl Rng) -> Result<Vec<CandidateParse>, InferenceError> {
    cfg.validate()?;
    if g.edges.is_empty() {
        return Err(InferenceError::EmptyImage);
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for w in 0..cfg.n_walks {
        let edges = walk(g, cfg, rng);
        let cand = CandidateParse { paths: edges.iter().map(|s| stroke_path(g, s)).collect(), edges, walk: w };
        if seen.insert(cand.key()) {
            out.push(cand);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::skeleton::{extract_skeleton, tests::plus, SkeletonConfig};
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn plus_sign_yields_two_crossing_bars() {
        let g = extract_skeleton(&plus(), &SkeletonConfig::default()).unwrap();
        let cands = propose_parses(&g, &WalkConfig { n_walks: 200, ..Default::default() }, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let bars = cands.iter().find(|c| {
            c.paths.len() == 2
                && c.paths.iter().all(|p| {
                    let (a, b) = (p[0], *p.last().unwrap());
                    (a.x - b.x).abs() < 1.0 || (a.y - b.y).abs() < 1.0
                })
        });
        assert!(bars.is_some(), "{} candidates, none with two straight bars", cands.len());
    }

    #[test]
    fn every_candidate_covers_each_edge_once() {
        let g = extract_skeleton(&plus(), &SkeletonConfig::default()).unwrap();
        let cands = propose_parses(&g, &WalkConfig::default(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let keys: BTreeSet<_> = cands.iter().map(|c| c.key()).collect();
        assert_eq!(keys.len(), cands.len());
        for c in &cands {
            let mut edges: Vec<usize> = c.edges.iter().flatten().map(|e| e.0).collect();
            edges.sort();
            assert_eq!(edges, (0..g.edges.len()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn walks_are_seeded() {
        let g = extract_skeleton(&plus(), &SkeletonConfig::default()).unwrap();
        let run = |s| propose_parses(&g, &WalkConfig::default(), &mut ChaCha8Rng::seed_from_u64(s)).unwrap();
        assert_eq!(run(5), run(5));
    }
}
