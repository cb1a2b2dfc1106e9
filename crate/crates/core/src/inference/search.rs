//! Stroke order and direction search under the type prior.

use std::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::Rng;

use super::InferenceError;
use crate::geometry::{encode_stroke, Point, Spline};
use crate::type_prior::{CharacterType, TypePrior};

/// Configurations are `(stroke index, reversed)` in drawing order.
pub type Configuration = Vec<(usize, bool)>;

#[derive(Clone, Debug, PartialEq)]
pub struct SearchResult {
    pub configuration: Configuration,
    pub ty: CharacterType,
    pub log_p: f64,
    pub evaluated: usize,
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out.sort();
    out
}

/// Every ordering of `kappa` strokes with every direction assignment.
pub fn all_configurations(kappa: usize) -> Vec<Configuration> {
    let mut out = Vec::new();
    for p in permutations(kappa) {
        for mask in 0..1u32 << kappa {
            out.push(p.iter().enumerate().map(|(pos, &i)| (i, mask >> pos & 1 == 1)).collect());
        }
    }
    out
}

fn count(kappa: usize) -> Option<usize> {
    let mut n: usize = 1usize.checked_shl(kappa as u32)?;
    for k in 2..=kappa {
        n = n.checked_mul(k)?;
    }
    Some(n)
}

fn starts(strokes: &[Spline], cfg: &Configuration) -> Vec<Point> {
    cfg.iter()
        .map(|&(i, r)| {
            let c = strokes[i].control_points();
            if r {
                c[c.len() - 1]
            } else {
                c[0]
            }
        })
        .collect()
}

/// Leftmost, then topmost, comparing stroke starts in drawing order.
fn canonical_cmp(a: &[Point], b: &[Point]) -> Ordering {
    for (p, q) in a.iter().zip(b) {
        let o = p.x.total_cmp(&q.x).then(p.y.total_cmp(&q.y));
        if o != Ordering::Equal {
            return o;
        }
    }
    Ordering::Equal
}

/// Scores within this relative distance of the best are ties.
pub const TIE_TOLERANCE: f64 = 1e-9;

/// Highest-scoring configuration; ties go to the canonical drawing.
pub(crate) fn best_of(strokes: &[Spline], configs: &[Configuration], scores: &[f64]) -> Option<usize> {
    let max = scores.iter().copied().filter(|s| s.is_finite()).fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return None;
    }
    let tol = TIE_TOLERANCE * (1.0 + max.abs());
    (0..configs.len())
        .filter(|&i| scores[i] >= max - tol)
        .min_by(|&i, &j| canonical_cmp(&starts(strokes, &configs[i]), &starts(strokes, &configs[j])).then(i.cmp(&j)))
}

/// Scores every configuration when there are at most `exhaustive_cap`,
/// otherwise `exhaustive_cap` random ones including the given order.
pub fn search_order_directions(
    strokes: &[Spline],
    prior: &TypePrior,
    exhaustive_cap: usize,
    rng: &mut impl Rng,
) -> Result<SearchResult, InferenceError> {
    let kappa = strokes.len();
    if kappa == 0 {
        return Err(InferenceError::NoParse("no strokes".into()));
    }
    let configs = match count(kappa) {
        Some(n) if n <= exhaustive_cap.max(1) => all_configurations(kappa),
        _ => {
            let mut out: Vec<Configuration> = vec![(0..kappa).map(|i| (i, false)).collect()];
            let mut order: Vec<usize> = (0..kappa).collect();
            while out.len() < exhaustive_cap.max(1) {
                order.shuffle(rng);
                let c: Configuration = order.iter().map(|&i| (i, rng.gen::<bool>())).collect();
                if !out.contains(&c) {
                    out.push(c);
                }
            }
            out
        }
    };
    let scores = prior.score_configurations(strokes, &configs)?;
    let best = best_of(strokes, &configs, &scores).ok_or_else(|| InferenceError::NoParse("every configuration scored non-finite".into()))?;
    let configuration = configs[best].clone();
    let ty = CharacterType::new(
        configuration
            .iter()
            .map(|&(i, r)| encode_stroke(&if r { strokes[i].reversed() } else { strokes[i].clone() }))
            .collect(),
    )?;
    Ok(SearchResult { configuration, ty, log_p: scores[best], evaluated: configs.len() })
}
