//! Classification, parsing, exemplar and concept generation, and marginal
//! likelihood bounds built on image posteriors.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::log_sum_exp;
use crate::inference::{build_posterior, joint_log_density, refit_token, InferenceConfig, InferenceError, LatentSplit, Posterior};
use crate::render::{BinaryImage, CanvasSize, RenderParams};
use crate::token::{sample_token, CharacterToken, TokenNoiseParams};
use crate::type_prior::{CharacterType, TypeError, TypePrior};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TaskError {
    #[error("invalid episode: {0}")]
    Episode(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("missing posterior: {0}")]
    Missing(String),
    #[error("no parse survived the marginal estimate")]
    NoTerms,
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Type(#[from] TypeError),
}

type R<T> = Result<T, TaskError>;

/// One training image per class and labelled test images.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassificationEpisode {
    pub train: Vec<BinaryImage>,
    pub test: Vec<BinaryImage>,
    pub test_labels: Vec<usize>,
}

impl ClassificationEpisode {
    pub fn validate(&self) -> R<()> {
        if self.train.len() < 2 {
            return Err(TaskError::Episode(format!("{} classes, need at least 2", self.train.len())));
        }
        if self.test.is_empty() {
            return Err(TaskError::Episode("no test images".into()));
        }
        if !self.test_labels.is_empty() && self.test_labels.len() != self.test.len() {
            return Err(TaskError::Episode(format!("{} labels for {} test images", self.test_labels.len(), self.test.len())));
        }
        if let Some(&l) = self.test_labels.iter().find(|&&l| l >= self.train.len()) {
            return Err(TaskError::Episode(format!("label {l} out of range for {} classes", self.train.len())));
        }
        let size = self.train[0].size();
        if self.train.iter().chain(&self.test).any(|i| i.size() != size) {
            return Err(TaskError::Episode("images differ in size".into()));
        }
        Ok(())
    }
}

/// Scores indexed `[test][class]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    /// log P(test | train).
    pub forward: Vec<Vec<f64>>,
    /// log P(train | test).
    pub reverse: Vec<Vec<f64>>,
    /// log P(train) per class, from its own parse weights.
    pub train_evidence: Vec<f64>,
    pub two_way: Vec<Vec<f64>>,
    pub predictions: Vec<usize>,
    pub accuracy: Option<f64>,
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Combines forward, reverse and evidence terms into predictions.
pub fn two_way_scores(forward: &[Vec<f64>], reverse: &[Vec<f64>], train_evidence: &[f64]) -> (Vec<Vec<f64>>, Vec<usize>) {
    let two_way: Vec<Vec<f64>> = forward
        .iter()
        .zip(reverse)
        .map(|(f, r)| f.iter().zip(r).zip(train_evidence).map(|((a, b), e)| a + b - e).collect())
        .collect();
    let predictions = two_way.iter().map(|row| argmax_first(row)).collect();
    (two_way, predictions)
}

fn image_key(image: &BinaryImage) -> u64 {
    let mut h = crc32fast::Hasher::new();
    h.update(image.bits());
    let s = image.size();
    ((s.width as u64) << 48) ^ ((s.height as u64) << 32) ^ h.finalize() as u64
}

/// Posteriors and refit scores memoized by image content, so images shared
/// between episodes are parsed and refit once. Each image's posterior is
/// seeded from `seed` and its own content, independent of call order.
pub struct Scorer<'a> {
    pub prior: &'a TypePrior,
    pub noise: &'a TokenNoiseParams,
    pub config: InferenceConfig,
    pub seed: u64,
    posteriors: HashMap<BinaryImage, Posterior>,
    refits: HashMap<(BinaryImage, BinaryImage), f64>,
}

impl<'a> Scorer<'a> {
    pub fn new(prior: &'a TypePrior, noise: &'a TokenNoiseParams, config: InferenceConfig, seed: u64) -> Self {
        Self { prior, noise, config, seed, posteriors: HashMap::new(), refits: HashMap::new() }
    }

    pub fn posterior(&mut self, image: &BinaryImage) -> R<&Posterior> {
        if !self.posteriors.contains_key(image) {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ image_key(image));
            let post = build_posterior(image, self.prior, self.noise, &self.config, &mut rng)?;
            self.posteriors.insert(image.clone(), post);
        }
        Ok(&self.posteriors[image])
    }

    /// Inserts a precomputed posterior.
    pub fn insert_posterior(&mut self, image: BinaryImage, post: Posterior) {
        self.posteriors.insert(image, post);
    }

    pub fn posteriors(&self) -> impl Iterator<Item = (&BinaryImage, &Posterior)> {
        self.posteriors.iter()
    }

    /// log sum_k pi_k max_theta P(target | theta) P(theta | psi_k), with
    /// the parses of `source`.
    pub fn conditional(&mut self, target: &BinaryImage, source: &BinaryImage) -> R<f64> {
        let key = (source.clone(), target.clone());
        if let Some(&v) = self.refits.get(&key) {
            return Ok(v);
        }
        self.posterior(source)?;
        let post = &self.posteriors[source];
        let terms: Vec<f64> = post
            .parses
            .iter()
            .map(|p| Ok(p.weight.ln() + refit_token(p, self.prior, self.noise, target, &self.config)?.score))
            .collect::<R<_>>()?;
        let v = log_sum_exp(&terms);
        self.refits.insert(key, v);
        Ok(v)
    }

    pub fn classify(&mut self, episode: &ClassificationEpisode) -> R<Classification> {
        episode.validate()?;
        let mut forward = Vec::new();
        let mut reverse = Vec::new();
        for t in &episode.test {
            let mut f = Vec::new();
            let mut r = Vec::new();
            for c in &episode.train {
                f.push(self.conditional(t, c)?);
                r.push(self.conditional(c, t)?);
            }
            forward.push(f);
            reverse.push(r);
        }
        let train_evidence: Vec<f64> = episode.train.iter().map(|c| Ok(self.posterior(c)?.log_evidence())).collect::<R<_>>()?;
        let (two_way, predictions) = two_way_scores(&forward, &reverse, &train_evidence);
        let accuracy = (!episode.test_labels.is_empty()).then(|| {
            predictions.iter().zip(&episode.test_labels).filter(|(p, l)| p == l).count() as f64 / predictions.len() as f64
        });
        Ok(Classification { forward, reverse, train_evidence, two_way, predictions, accuracy })
    }
}

/// Two-way classification of every test image in an episode.
pub fn classify_episode(
    episode: &ClassificationEpisode,
    prior: &TypePrior,
    noise: &TokenNoiseParams,
    config: &InferenceConfig,
    seed: u64,
) -> R<Classification> {
    Scorer::new(prior, noise, config.clone(), seed).classify(episode)
}

/// Type of the highest-weight parse; ties go to the lowest index.
pub fn parse_map(post: &Posterior) -> R<&CharacterType> {
    if post.parses.is_empty() {
        return Err(TaskError::Missing("posterior has no parses".into()));
    }
    let w: Vec<f64> = post.parses.iter().map(|p| p.log_weight).collect();
    Ok(&post.parses[argmax_first(&w)].ty)
}

/// Normalized weights proportional to exp(log_weight / temperature).
pub fn tempered_weights(log_weights: &[f64], temperature: f64) -> R<Vec<f64>> {
    if !(temperature > 0.0) || temperature.is_nan() {
        return Err(TaskError::Invalid(format!("temperature {temperature} must be positive")));
    }
    if log_weights.is_empty() {
        return Err(TaskError::Invalid("no weights".into()));
    }
    let scaled: Vec<f64> = log_weights.iter().map(|w| w / temperature).collect();
    let z = log_sum_exp(&scaled);
    Ok(scaled.iter().map(|s| (s - z).exp()).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Exemplar {
    pub parse: usize,
    pub token: CharacterToken,
    pub image: BinaryImage,
}

/// New images of the concept in `post`: a parse drawn from the tempered
/// weights, a token from its type, and pixels from the rendered map.
pub fn generate_exemplars(post: &Posterior, n: usize, temperature: f64, noise: &TokenNoiseParams, rng: &mut impl Rng) -> R<Vec<Exemplar>> {
    let w = tempered_weights(&post.parses.iter().map(|p| p.log_weight).collect::<Vec<_>>(), temperature)?;
    let pick = WeightedIndex::new(&w).map_err(|e| TaskError::Invalid(e.to_string()))?;
    let size = post.size;
    (0..n)
        .map(|_| {
            let k = pick.sample(rng);
            let p = &post.parses[k];
            let token = sample_token(&p.ty, noise, rng);
            let image = token.render(p.render, size).sample(rng);
            Ok(Exemplar { parse: k, token, image })
        })
        .collect()
}

/// Rendering used for generated concepts: mid-box blur, small noise.
pub fn concept_render_params() -> RenderParams {
    RenderParams { sigma: RenderParams::mid_box().sigma, epsilon: 1e-3 }
}

/// Unconditional samples from the type prior, drawn as noiseless tokens.
pub fn generate_concepts(prior: &TypePrior, n: usize, temperature: f64, rng: &mut impl Rng) -> R<Vec<(CharacterType, BinaryImage)>> {
    let size = prior.arch().canvas;
    (0..n)
        .map(|_| {
            let ty = prior.generate(temperature, rng)?;
            let image = CharacterToken::mode(&ty).render(concept_render_params(), size).threshold(0.5);
            Ok((ty, image))
        })
        .collect()
}

/// Laplace approximation of the log integral of `exp(f)` at a maximum with
/// value `f_max` and Hessian `hessian`. Returns the term and the jitter
/// added to make `-H` positive definite (zero when none was needed).
pub fn laplace_log_integral(f_max: f64, hessian: &DMatrix<f64>) -> R<(f64, f64)> {
    let d = hessian.nrows();
    if hessian.ncols() != d {
        return Err(TaskError::Invalid("Hessian is not square".into()));
    }
    if hessian.iter().any(|v| !v.is_finite()) || !f_max.is_finite() {
        return Err(TaskError::Invalid("non-finite Hessian or value".into()));
    }
    let neg = -(hessian + hessian.transpose()) * 0.5;
    let mut jitter = 0.0;
    let mut lambda = 1e-6;
    loop {
        let m = &neg + DMatrix::<f64>::identity(d, d) * jitter;
        if let Some(ch) = m.clone().cholesky() {
            let log_det = 2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            let term = f_max + 0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln() - 0.5 * log_det;
            return Ok((term, jitter));
        }
        jitter = lambda;
        lambda *= 2.0;
        if !jitter.is_finite() || jitter > 1e300 {
            return Err(TaskError::Invalid("no jitter makes the Hessian negative definite".into()));
        }
    }
}

/// Central differences of an analytic gradient, symmetrized.
pub fn hessian_from_gradient(x: &[f64], rel_step: f64, mut grad: impl FnMut(&[f64]) -> R<Vec<f64>>) -> R<DMatrix<f64>> {
    let d = x.len();
    let mut h = DMatrix::zeros(d, d);
    let mut xp = x.to_vec();
    for j in 0..d {
        let step = rel_step * x[j].abs().max(1.0);
        xp[j] = x[j] + step;
        let gp = grad(&xp)?;
        xp[j] = x[j] - step;
        let gm = grad(&xp)?;
        xp[j] = x[j];
        for i in 0..d {
            h[(i, j)] = (gp[i] - gm[i]) / (2.0 * step);
        }
    }
    Ok((&h + h.transpose()) * 0.5)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaplaceTerm {
    /// Index of the parse in its posterior.
    pub parse: usize,
    pub log_joint: f64,
    pub dim: usize,
    pub term: f64,
    pub jitter: f64,
    /// Largest eigenvalue of the symmetrized Hessian; positive when the
    /// parse is not at a strict local maximum.
    pub max_eigenvalue: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginalEstimate {
    pub log_lower_bound: f64,
    pub terms: Vec<LaplaceTerm>,
    /// Parses dropped as duplicates of a better mode with the same
    /// discrete structure, or for non-finite curvature.
    pub dropped: Vec<(usize, String)>,
    pub ll_per_dim: f64,
}

pub fn ll_per_dim(log_lik: f64, size: CanvasSize) -> f64 {
    log_lik / size.pixels() as f64
}

pub const HESSIAN_REL_STEP: f64 = 1e-4;

/// Sum of Laplace approximations at the posterior's parses, one per
/// distinct discrete structure (stroke count and control counts).
pub fn marginal_log_lik(post: &Posterior, prior: &TypePrior, noise: &TokenNoiseParams, image: &BinaryImage) -> R<MarginalEstimate> {
    let mut best: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
    let mut dropped = Vec::new();
    for (i, p) in post.parses.iter().enumerate() {
        let key: Vec<usize> = p.ty.strokes.iter().map(|s| s.relative.len()).collect();
        match best.get(&key) {
            Some(&j) if post.parses[j].log_weight >= p.log_weight => dropped.push((i, "duplicate discrete structure".into())),
            Some(&j) => {
                dropped.push((j, "duplicate discrete structure".into()));
                best.insert(key, i);
            }
            None => {
                best.insert(key, i);
            }
        }
    }
    let mut terms = Vec::new();
    let mut keep: Vec<usize> = best.into_values().collect();
    keep.sort();
    for i in keep {
        let p = &post.parses[i];
        let z = LatentSplit::flatten(&p.ty, &p.token, p.render)?;
        let (parts, _) = joint_log_density(prior, noise, image, &z)?;
        let h = hessian_from_gradient(&z.values, HESSIAN_REL_STEP, |x| {
            let zz = LatentSplit { lens: z.lens.clone(), values: x.to_vec() };
            Ok(joint_log_density(prior, noise, image, &zz)?.1)
        });
        let h = match h {
            Ok(h) if h.iter().all(|v| v.is_finite()) => h,
            _ => {
                dropped.push((i, "non-finite Hessian".into()));
                continue;
            }
        };
        let max_eigenvalue = SymmetricEigen::new(h.clone()).eigenvalues.max();
        let (term, jitter) = laplace_log_integral(parts.total(), &h)?;
        terms.push(LaplaceTerm { parse: i, log_joint: parts.total(), dim: z.dim(), term, jitter, max_eigenvalue });
    }
    if terms.is_empty() {
        return Err(TaskError::NoTerms);
    }
    let log_lower_bound = log_sum_exp(&terms.iter().map(|t| t.term).collect::<Vec<_>>());
    dropped.sort();
    Ok(MarginalEstimate { log_lower_bound, terms, dropped, ll_per_dim: ll_per_dim(log_lower_bound, image.size()) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_dimensional_gaussian_mode_is_exact() {
        let (c, s) = (-3.7, 2.5);
        let h = DMatrix::from_element(1, 1, -1.0 / (s * s));
        let (term, jitter) = laplace_log_integral(c, &h).unwrap();
        let exact = c + 0.5 * (2.0 * std::f64::consts::PI).ln() + s.ln();
        assert!((term - exact).abs() < 1e-12);
        assert_eq!(jitter, 0.0);
    }

    #[test]
    fn two_dimensional_gaussian_matches_closed_form() {
        // f(x) = c - x' P x / 2 with P = [[2, 0.6], [0.6, 0.5]].
        let c = 1.25;
        let grad = |x: &[f64]| -> R<Vec<f64>> { Ok(vec![-(2.0 * x[0] + 0.6 * x[1]), -(0.6 * x[0] + 0.5 * x[1])]) };
        let h = hessian_from_gradient(&[0.0, 0.0], HESSIAN_REL_STEP, grad).unwrap();
        let (term, _) = laplace_log_integral(c, &h).unwrap();
        let det: f64 = 2.0 * 0.5 - 0.36;
        let exact = c + (2.0 * std::f64::consts::PI).ln() - 0.5 * det.ln();
        assert!((term - exact).abs() < 1e-3, "{term} vs {exact}");
    }

    #[test]
    fn indefinite_hessians_get_jitter() {
        let h = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, 0.0]);
        let (term, jitter) = laplace_log_integral(0.0, &h).unwrap();
        assert!(jitter >= 1e-6 && term.is_finite());
    }

    #[test]
    fn log_likelihood_per_dimension() {
        let v = ll_per_dim(-383.2, CanvasSize::new(105, 105));
        assert!((v - -0.034757).abs() < 1e-6);
        assert_eq!(format!("{:.4}", v), "-0.0348");
    }

    #[test]
    fn tempering_flattens_weights() {
        let lw = [-10.0, -12.0, -20.0];
        let entropy = |w: &[f64]| -w.iter().map(|p| p * p.ln()).sum::<f64>();
        let w1 = tempered_weights(&lw, 1.0).unwrap();
        let w8 = tempered_weights(&lw, 8.0).unwrap();
        assert!(entropy(&w8) >= entropy(&w1));
        let inf = tempered_weights(&lw, 1e300).unwrap();
        assert!(inf.iter().all(|w| (w - 1.0 / 3.0).abs() < 1e-9));
        let shifted: Vec<f64> = lw.iter().map(|w| w + 1000.0).collect();
        let ws = tempered_weights(&shifted, 1.0).unwrap();
        assert!(ws.iter().zip(&w1).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn two_way_prefers_lower_index_on_ties() {
        let f = vec![vec![-5.0, -5.0, -9.0]];
        let r = vec![vec![-1.0, -1.0, -1.0]];
        let (tw, pred) = two_way_scores(&f, &r, &[-2.0, -2.0, -2.0]);
        assert_eq!(pred, vec![0]);
        assert_eq!(tw[0], vec![-4.0, -4.0, -8.0]);
    }

    #[test]
    fn episodes_are_validated() {
        let img = BinaryImage::blank(CanvasSize::default());
        let e = ClassificationEpisode { train: vec![img.clone()], test: vec![img.clone()], test_labels: vec![0] };
        assert!(matches!(e.validate(), Err(TaskError::Episode(_))));
        let e = ClassificationEpisode { train: vec![img.clone(), img.clone()], test: vec![img], test_labels: vec![2] };
        assert!(matches!(e.validate(), Err(TaskError::Episode(_))));
    }
}
