//! Continuous refinement of parses and the K-parse posterior.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::proposals::{propose_parses, CandidateParse, WalkConfig};
use super::search::{search_order_directions, Configuration};
use super::skeleton::{extract_skeleton, SkeletonConfig};
use super::InferenceError;
use crate::autodiff::{log_sum_exp, Tape, Tensor, Var};
use crate::geometry::{fit_minimal_spline, Point, RawStroke, Spline, StrokeEncoding};
use crate::optim::{cosine_lr, Adam};
use crate::render::{image_log_lik_var, BinaryImage, CanvasSize, RenderParams, EPSILON_MAX, EPSILON_MIN, SIGMA_MAX, SIGMA_MIN};
use crate::token::{log_p_token_var, warp_var, CharacterToken, TokenNoiseParams};
use crate::type_prior::{CharacterType, TypePrior};

type R<T> = Result<T, InferenceError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub skeleton: SkeletonConfig,
    pub walks: WalkConfig,
    /// Candidates whose strokes cover less of the skeleton are dropped.
    pub cover_frac: f64,
    pub residual_threshold: f64,
    pub max_control: usize,
    pub exhaustive_cap: usize,
    pub top_k: usize,
    pub steps: usize,
    pub refit_steps: usize,
    pub learning_rate: f64,
    /// Step multiplier for the two warp scale coordinates.
    pub scale_lr_factor: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            skeleton: SkeletonConfig::default(),
            walks: WalkConfig::default(),
            cover_frac: 0.95,
            residual_threshold: 2.0,
            max_control: 30,
            exhaustive_cap: 64,
            top_k: 5,
            steps: 200,
            refit_steps: 200,
            learning_rate: 0.1,
            scale_lr_factor: 0.1,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> R<()> {
        self.walks.validate()?;
        let bad = |k: &str, why: &str| Err(InferenceError::Config(format!("{k}: {why}")));
        if !(0.0..=1.0).contains(&self.cover_frac) {
            return bad("cover_frac", "must lie in [0, 1]");
        }
        if !(self.residual_threshold > 0.0 && self.residual_threshold.is_finite()) {
            return bad("residual_threshold", "must be positive");
        }
        if self.max_control < 2 {
            return bad("max_control", "must be at least 2");
        }
        if self.exhaustive_cap == 0 {
            return bad("exhaustive_cap", "must be positive");
        }
        if self.top_k == 0 {
            return bad("top_k", "must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be positive");
        }
        if !(self.scale_lr_factor > 0.0 && self.scale_lr_factor.is_finite()) {
            return bad("scale_lr_factor", "must be positive");
        }
        Ok(())
    }
}

/// Terms of the joint log density.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct JointParts {
    pub type_lp: f64,
    pub token_lp: f64,
    pub image_lp: f64,
    /// Uniform densities of blur and pixel noise over their boxes.
    pub render_lp: f64,
}

impl JointParts {
    pub fn total(&self) -> f64 {
        self.type_lp + self.token_lp + self.image_lp + self.render_lp
    }
}

pub fn render_log_prior() -> f64 {
    -(SIGMA_MAX - SIGMA_MIN).ln() - (EPSILON_MAX - EPSILON_MIN).ln()
}

/// Discrete structure (relative-point counts per stroke, in drawing order)
/// plus the flat continuous vector: type starts, type relative points after
/// the fixed origin, token starts, token relative points, warp, blur, noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentSplit {
    pub lens: Vec<usize>,
    pub values: Vec<f64>,
}

struct Layout {
    type_starts: usize,
    type_rels: Vec<usize>,
    token_starts: usize,
    token_rels: Vec<usize>,
    affine: usize,
    sigma: usize,
    epsilon: usize,
    dim: usize,
}

impl LatentSplit {
    pub fn flatten(ty: &CharacterType, token: &CharacterToken, rp: RenderParams) -> R<Self> {
        token.validate_against(ty)?;
        let mut v = Vec::new();
        let push = |v: &mut Vec<f64>, p: &Point| v.extend([p.x, p.y]);
        ty.strokes.iter().for_each(|s| push(&mut v, &s.start));
        ty.strokes.iter().for_each(|s| s.relative[1..].iter().for_each(|p| push(&mut v, p)));
        token.starts.iter().for_each(|p| push(&mut v, p));
        token.trajectories.iter().flatten().for_each(|p| push(&mut v, p));
        v.extend(token.affine);
        v.extend([rp.sigma, rp.epsilon]);
        Ok(Self { lens: ty.strokes.iter().map(|s| s.relative.len()).collect(), values: v })
    }

    fn layout(&self) -> Layout {
        let k = self.lens.len();
        let mut at = 2 * k;
        let type_rels = self
            .lens
            .iter()
            .map(|&n| {
                let o = at;
                at += 2 * (n - 1);
                o
            })
            .collect();
        let token_starts = at;
        at += 2 * k;
        let token_rels = self
            .lens
            .iter()
            .map(|&n| {
                let o = at;
                at += 2 * n;
                o
            })
            .collect();
        Layout { type_starts: 0, type_rels, token_starts, token_rels, affine: at, sigma: at + 4, epsilon: at + 5, dim: at + 6 }
    }

    /// Length of the continuous vector.
    pub fn dim(&self) -> usize {
        let d: usize = self.lens.iter().sum();
        2 * self.lens.len() + 2 * (d - self.lens.len()) + 2 * self.lens.len() + 2 * d + 6
    }

    /// Index range of the type-level coordinates.
    pub fn type_dim(&self) -> usize {
        self.layout().token_starts
    }

    pub fn unflatten(&self) -> R<(CharacterType, CharacterToken, RenderParams)> {
        if self.lens.is_empty() || self.lens.iter().any(|&n| n < 2) || self.values.len() != self.dim() {
            return Err(InferenceError::Config(format!("latent vector of {} for lengths {:?}", self.values.len(), self.lens)));
        }
        let l = self.layout();
        let v = &self.values;
        let pt = |i: usize| Point::new(v[i], v[i + 1]);
        let mut strokes = Vec::new();
        for (i, &n) in self.lens.iter().enumerate() {
            let mut rel = vec![Point::ZERO];
            rel.extend((0..n - 1).map(|j| pt(l.type_rels[i] + 2 * j)));
            strokes.push(StrokeEncoding::from_relative(pt(l.type_starts + 2 * i), rel)?);
        }
        let ty = CharacterType::new(strokes)?;
        let token = CharacterToken {
            starts: (0..self.lens.len()).map(|i| pt(l.token_starts + 2 * i)).collect(),
            trajectories: self.lens.iter().enumerate().map(|(i, &n)| (0..n).map(|j| pt(l.token_rels[i] + 2 * j)).collect()).collect(),
            affine: [v[l.affine], v[l.affine + 1], v[l.affine + 2], v[l.affine + 3]],
        };
        token.validate_against(&ty)?;
        let rp = RenderParams::new(v[l.sigma], v[l.epsilon])?;
        Ok((ty, token, rp))
    }
}

/// Which coordinates move. `TokenOnly` holds the type fixed and drops its
/// prior term from the objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizeMode {
    Joint,
    TokenOnly,
}

fn points<'t>(tape: &'t Tape, v: &[f64], rows: usize, trainable: bool) -> Var<'t> {
    let t = Tensor::new(vec![rows, 2], v.to_vec()).expect("point block");
    if trainable {
        tape.param(t)
    } else {
        tape.constant(t)
    }
}

struct Evaluation {
    value: f64,
    grad: Vec<f64>,
    parts: JointParts,
}

fn evaluate(
    prior: &TypePrior,
    np: &TokenNoiseParams,
    image: &BinaryImage,
    z: &LatentSplit,
    mode: OptimizeMode,
    type_lp_fixed: f64,
) -> R<Evaluation> {
    let l = z.layout();
    let v = &z.values;
    let tape = Tape::new();
    let joint = mode == OptimizeMode::Joint;
    let k = z.lens.len();
    let type_starts: Vec<Var> = (0..k).map(|i| points(&tape, &v[2 * i..2 * i + 2], 1, joint)).collect();
    let type_tails: Vec<Var> =
        z.lens.iter().enumerate().map(|(i, &n)| points(&tape, &v[l.type_rels[i]..l.type_rels[i] + 2 * (n - 1)], n - 1, joint)).collect();
    let origin = tape.constant(Tensor::zeros(&[1, 2]));
    let type_rels: Vec<Var> = type_tails.iter().map(|t| tape.concat(&[origin, *t], 0)).collect::<Result<_, _>>()?;
    let token_starts: Vec<Var> = (0..k).map(|i| points(&tape, &v[l.token_starts + 2 * i..l.token_starts + 2 * i + 2], 1, true)).collect();
    let token_rels: Vec<Var> =
        z.lens.iter().enumerate().map(|(i, &n)| points(&tape, &v[l.token_rels[i]..l.token_rels[i] + 2 * n], n, true)).collect();
    let affine = tape.param(Tensor::vector(v[l.affine..l.affine + 4].to_vec()));
    let sigma = tape.param(Tensor::scalar(v[l.sigma]));
    let epsilon = tape.param(Tensor::scalar(v[l.epsilon]));

    let bound = prior.weights.bind(&tape, false);
    let type_lp = if joint { Some(prior.log_p_var(&bound, &type_starts, &type_rels)?) } else { None };
    let token_lp = log_p_token_var(&tape, &type_starts, &type_rels, &token_starts, &token_rels, affine, np)?;
    let abs: Vec<Var> = token_rels.iter().zip(&token_starts).map(|(r, s)| r.add(*s)).collect::<Result<_, _>>()?;
    let warped = warp_var(&tape, &abs, affine)?;
    let image_lp = image_log_lik_var(&tape, &warped, sigma, epsilon, image);
    let mut total = token_lp.add(image_lp)?;
    if let Some(t) = type_lp {
        total = total.add(t)?;
    }
    let parts = JointParts {
        type_lp: type_lp.map_or(type_lp_fixed, |t| t.item()),
        token_lp: token_lp.item(),
        image_lp: image_lp.item(),
        render_lp: render_log_prior(),
    };
    let value = match mode {
        OptimizeMode::Joint => parts.total(),
        OptimizeMode::TokenOnly => parts.token_lp + parts.image_lp,
    };
    if !value.is_finite() {
        return Ok(Evaluation { value, grad: vec![], parts });
    }
    let grads = tape.backward(total)?;
    let mut g = vec![0.0; l.dim];
    let mut put = |at: usize, var: Var| g[at..at + var.len()].copy_from_slice(grads.wrt(var).data());
    if joint {
        for i in 0..k {
            put(2 * i, type_starts[i]);
            put(l.type_rels[i], type_tails[i]);
        }
    }
    for i in 0..k {
        put(l.token_starts + 2 * i, token_starts[i]);
        put(l.token_rels[i], token_rels[i]);
    }
    put(l.affine, affine);
    put(l.sigma, sigma);
    put(l.epsilon, epsilon);
    Ok(Evaluation { value, grad: g, parts })
}

/// Joint log density, its terms and its gradient at a latent vector. Blur
/// and noise are not checked against their boxes, so difference stencils
/// may step just outside them.
pub fn joint_log_density(prior: &TypePrior, np: &TokenNoiseParams, image: &BinaryImage, z: &LatentSplit) -> R<(JointParts, Vec<f64>)> {
    if z.lens.is_empty() || z.lens.iter().any(|&n| n < 2) || z.values.len() != z.dim() {
        return Err(InferenceError::Config(format!("latent vector of {} for lengths {:?}", z.values.len(), z.lens)));
    }
    let l = z.layout();
    if !(z.values[l.sigma] > 0.0 && z.values[l.epsilon] > 0.0 && z.values[l.epsilon] < 1.0) {
        return Err(InferenceError::Config("blur and noise must be positive".into()));
    }
    let e = evaluate(prior, np, image, z, OptimizeMode::Joint, 0.0)?;
    Ok((e.parts, e.grad))
}

struct Ascent {
    z: LatentSplit,
    parts: JointParts,
    initial: f64,
    best: f64,
    non_finite: bool,
}

fn ascend(
    prior: &TypePrior,
    np: &TokenNoiseParams,
    image: &BinaryImage,
    start: LatentSplit,
    mode: OptimizeMode,
    steps: usize,
    cfg: &InferenceConfig,
    type_lp_fixed: f64,
) -> R<Ascent> {
    let l = start.layout();
    let first = evaluate(prior, np, image, &start, mode, type_lp_fixed)?;
    if !first.value.is_finite() {
        return Err(InferenceError::NoParse("objective is not finite at the initial parse".into()));
    }
    let (lo_s, hi_s) = (SIGMA_MIN.ln(), SIGMA_MAX.ln());
    let (lo_e, hi_e) = (EPSILON_MIN.ln(), EPSILON_MAX.ln());
    // Optimization coordinates: positions, warp scales, warp shifts, and
    // log blur / log noise.
    let mut u = start.values.clone();
    u[l.sigma] = u[l.sigma].ln();
    u[l.epsilon] = u[l.epsilon].ln();
    let mut opt = Adam::new(&[l.affine, 2, 2, 2]);
    let lr_scale = [1.0, cfg.scale_lr_factor, 1.0, 1.0];
    let mut best = (first.value, start.values.clone(), first.parts);
    let initial = first.value;
    let mut grad = first.grad;
    let mut non_finite = false;
    let mut z = start;
    for t in 0..steps {
        let mut g: Vec<f64> = grad.iter().map(|x| -x).collect();
        g[l.sigma] *= z.values[l.sigma];
        g[l.epsilon] *= z.values[l.epsilon];
        {
            let (pos, rest) = u.split_at_mut(l.affine);
            let (sc, rest) = rest.split_at_mut(2);
            let (sh, se) = rest.split_at_mut(2);
            let (gp, gr) = g.split_at(l.affine);
            opt.update(&mut [pos, sc, sh, se], &[gp, &gr[0..2], &gr[2..4], &gr[4..6]], cosine_lr(cfg.learning_rate, t, steps), &lr_scale);
        }
        u[l.sigma] = u[l.sigma].clamp(lo_s, hi_s);
        u[l.epsilon] = u[l.epsilon].clamp(lo_e, hi_e);
        let mut values = u.clone();
        values[l.sigma] = u[l.sigma].exp().clamp(SIGMA_MIN, SIGMA_MAX);
        values[l.epsilon] = u[l.epsilon].exp().clamp(EPSILON_MIN, EPSILON_MAX);
        z = LatentSplit { lens: z.lens, values };
        let e = match evaluate(prior, np, image, &z, mode, type_lp_fixed) {
            Ok(e) if e.value.is_finite() && e.grad.iter().all(|x| x.is_finite()) => e,
            _ => {
                non_finite = true;
                break;
            }
        };
        if e.value > best.0 {
            best = (e.value, z.values.clone(), e.parts);
        }
        grad = e.grad;
    }
    Ok(Ascent { z: LatentSplit { lens: z.lens, values: best.1 }, parts: best.2, initial, best: best.0, non_finite })
}

/// One posterior mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Parse {
    pub ty: CharacterType,
    pub token: CharacterToken,
    pub render: RenderParams,
    pub parts: JointParts,
    /// Unnormalized log weight: the joint log density.
    pub log_weight: f64,
    /// Normalized weight within its posterior.
    pub weight: f64,
    /// Joint log density before optimization.
    pub initial_log_weight: f64,
    /// Set when optimization stopped at a non-finite objective.
    pub non_finite: bool,
    /// Walk that first proposed the segmentation.
    pub walk: usize,
    pub configuration: Configuration,
}

/// Gradient ascent on the joint density from the noiseless token of `ty`
/// with mid-box rendering parameters.
pub fn optimize_parse(
    prior: &TypePrior,
    np: &TokenNoiseParams,
    image: &BinaryImage,
    ty: &CharacterType,
    cfg: &InferenceConfig,
) -> R<Parse> {
    let z = LatentSplit::flatten(ty, &CharacterToken::mode(ty), RenderParams::mid_box())?;
    let a = ascend(prior, np, image, z, OptimizeMode::Joint, cfg.steps, cfg, 0.0)?;
    let (ty, token, render) = a.z.unflatten()?;
    Ok(Parse {
        ty,
        token,
        render,
        parts: a.parts,
        log_weight: a.best,
        weight: 1.0,
        initial_log_weight: a.initial,
        non_finite: a.non_finite,
        walk: 0,
        configuration: vec![],
    })
}

/// A parse's token refit to another image with its type held fixed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Refit {
    pub token: CharacterToken,
    pub render: RenderParams,
    /// Token log density plus image log-likelihood.
    pub score: f64,
    pub parts: JointParts,
    pub non_finite: bool,
}

fn ink_centroid(image: &BinaryImage) -> Option<Point> {
    let s = image.size();
    let (mut x, mut y, mut n) = (0.0, 0.0, 0.0);
    for r in 0..s.height {
        for c in 0..s.width {
            if image.get(r, c) {
                x += c as f64;
                y += r as f64;
                n += 1.0;
            }
        }
    }
    (n > 0.0).then(|| Point::new(x / n, y / n))
}

/// Maximizes token density plus image likelihood over the token, warp,
/// blur and noise. The warp shift also starts from the offset between ink
/// centroids, and whichever start scores higher is ascended.
pub fn refit_token(
    parse: &Parse,
    prior: &TypePrior,
    np: &TokenNoiseParams,
    image: &BinaryImage,
    cfg: &InferenceConfig,
) -> R<Refit> {
    let z = LatentSplit::flatten(&parse.ty, &parse.token, parse.render)?;
    let l = z.layout();
    let mut start = z.clone();
    let mut start_value = evaluate(prior, np, image, &z, OptimizeMode::TokenOnly, parse.parts.type_lp)?.value;
    let source = parse.token.render(parse.render, image.size()).threshold(0.5);
    if let (Some(a), Some(b)) = (ink_centroid(image), ink_centroid(&source)) {
        let mut shifted = z.clone();
        shifted.values[l.affine + 2] += a.x - b.x;
        shifted.values[l.affine + 3] += a.y - b.y;
        let v = evaluate(prior, np, image, &shifted, OptimizeMode::TokenOnly, parse.parts.type_lp)?.value;
        if v > start_value || !start_value.is_finite() {
            start = shifted;
            start_value = v;
        }
    }
    let _ = start_value;
    let a = ascend(prior, np, image, start, OptimizeMode::TokenOnly, cfg.refit_steps, cfg, parse.parts.type_lp)?;
    let (_, token, render) = a.z.unflatten()?;
    Ok(Refit { token, render, score: a.best, parts: a.parts, non_finite: a.non_finite })
}

/// Indices of the `k` highest finite scores, ties broken by provenance.
pub fn select_top_k(scores: &[f64], provenance: &[usize], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).filter(|&i| scores[i].is_finite()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(provenance[a].cmp(&provenance[b])));
    idx.truncate(k);
    idx
}

/// A parsed candidate before continuous optimization.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredCandidate {
    pub candidate: CandidateParse,
    pub ty: CharacterType,
    pub configuration: Configuration,
    pub type_lp: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Posterior {
    pub size: CanvasSize,
    pub parses: Vec<Parse>,
    /// Distinct segmentations proposed by the walks.
    pub proposals: usize,
}

impl Posterior {
    /// Highest-weight parse.
    pub fn map(&self) -> &Parse {
        &self.parses[0]
    }

    /// Log of the summed unnormalized weights.
    pub fn log_evidence(&self) -> f64 {
        log_sum_exp(&self.parses.iter().map(|p| p.log_weight).collect::<Vec<_>>())
    }
}

/// Normalizes log weights in place; order is by weight, then provenance.
pub fn normalize(parses: &mut Vec<Parse>) {
    let z = log_sum_exp(&parses.iter().map(|p| p.log_weight).collect::<Vec<_>>());
    for p in parses.iter_mut() {
        p.weight = (p.log_weight - z).exp();
    }
    parses.sort_by(|a, b| b.log_weight.total_cmp(&a.log_weight).then(a.walk.cmp(&b.walk)));
}

/// Skeleton, random-walk proposals, spline fits and order/direction search.
/// Candidates whose fitted type is invalid for the prior are dropped.
pub fn parse_candidates(
    image: &BinaryImage,
    prior: &TypePrior,
    cfg: &InferenceConfig,
    rng: &mut impl Rng,
) -> R<(Vec<ScoredCandidate>, usize)> {
    cfg.validate()?;
    let g = extract_skeleton(image, &cfg.skeleton)?;
    let total = g.pixels().len() as f64;
    let cands = propose_parses(&g, &cfg.walks, rng)?;
    let proposals = cands.len();
    let mut fits: HashMap<Vec<(usize, bool)>, Option<Spline>> = HashMap::new();
    let mut out = Vec::new();
    for c in cands {
        let mut covered: std::collections::BTreeSet<(usize, usize)> =
            c.paths.iter().flatten().map(|p| (p.y.round() as usize, p.x.round() as usize)).collect();
        for &(e, _) in c.edges.iter().flatten() {
            let edge = &g.edges[e];
            covered.extend(g.nodes[edge.a].pixels.iter().chain(&g.nodes[edge.b].pixels).copied());
        }
        if (covered.len() as f64) < cfg.cover_frac * total || c.paths.len() > prior.config.max_strokes {
            continue;
        }
        let mut splines = Vec::new();
        for (edges, path) in c.edges.iter().zip(&c.paths) {
            let fit = fits.entry(edges.clone()).or_insert_with(|| {
                fit_minimal_spline(&RawStroke(path.clone()), cfg.residual_threshold, cfg.max_control)
                    .ok()
                    .filter(|s| s.len() <= prior.config.max_steps + 1)
            });
            match fit {
                Some(s) => splines.push(s.clone()),
                None => break,
            }
        }
        if splines.len() != c.paths.len() {
            continue;
        }
        let found = search_order_directions(&splines, prior, cfg.exhaustive_cap, rng)?;
        out.push(ScoredCandidate { candidate: c, ty: found.ty, configuration: found.configuration, type_lp: found.log_p });
    }
    if out.is_empty() {
        return Err(InferenceError::NoParse("no candidate produced a valid type".into()));
    }
    Ok((out, proposals))
}

/// The K-parse approximate posterior of an image.
pub fn build_posterior(
    image: &BinaryImage,
    prior: &TypePrior,
    np: &TokenNoiseParams,
    cfg: &InferenceConfig,
    rng: &mut impl Rng,
) -> R<Posterior> {
    let (cands, proposals) = parse_candidates(image, prior, cfg, rng)?;
    let scores: Vec<f64> = cands.iter().map(|c| c.type_lp).collect();
    let walks: Vec<usize> = cands.iter().map(|c| c.candidate.walk).collect();
    let mut parses = Vec::new();
    for i in select_top_k(&scores, &walks, cfg.top_k) {
        let mut p = optimize_parse(prior, np, image, &cands[i].ty, cfg)?;
        p.walk = cands[i].candidate.walk;
        p.configuration = cands[i].configuration.clone();
        parses.push(p);
    }
    if parses.is_empty() {
        return Err(InferenceError::NoParse("every candidate scored non-finite".into()));
    }
    normalize(&mut parses);
    Ok(Posterior { size: image.size(), parses, proposals })
}
