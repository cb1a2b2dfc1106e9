//! Token model: motor noise on a type's starts and control points plus a
//! global affine warp about the token's center of mass.

use nalgebra::{Matrix4, Vector4};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdError, Tape, Tensor, Var};
use crate::geometry::{Point, Spline};
use crate::render::{render_splines, CanvasSize, PixelMap, RenderParams};
use crate::type_prior::CharacterType;

const LOG_2PI: f64 = 1.837_877_066_409_345_5;
/// Warp scales are clamped from below before use.
pub const MIN_SCALE: f64 = 0.1;
/// Mean of the affine prior: unit scales, no shift.
pub const AFFINE_MEAN: [f64; 4] = [1.0, 1.0, 0.0, 0.0];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TokenError {
    #[error("token does not match its type: {0}")]
    Incongruent(String),
    #[error("invalid noise parameters: {0}")]
    InvalidNoise(String),
    #[error("not enough data to fit noise parameters")]
    NoData,
    #[error(transparent)]
    Autodiff(#[from] AdError),
}

type R<T> = Result<T, TokenError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenNoiseParams {
    pub sigma_loc: f64,
    pub sigma_traj: f64,
    pub sigma_affine: [[f64; 4]; 4],
}

impl Default for TokenNoiseParams {
    fn default() -> Self {
        Self { sigma_loc: 1.5, sigma_traj: 1.0, sigma_affine: default_affine_cov() }
    }
}

pub fn default_affine_cov() -> [[f64; 4]; 4] {
    let mut m = [[0.0; 4]; 4];
    for (i, v) in [0.04, 0.04, 4.0, 4.0].into_iter().enumerate() {
        m[i][i] = v;
    }
    m
}

impl TokenNoiseParams {
    pub fn new(sigma_loc: f64, sigma_traj: f64, sigma_affine: [[f64; 4]; 4]) -> R<Self> {
        let p = Self { sigma_loc, sigma_traj, sigma_affine };
        p.validate()?;
        Ok(p)
    }

    fn cov(&self) -> Matrix4<f64> {
        Matrix4::from_fn(|i, j| self.sigma_affine[i][j])
    }

    pub fn validate(&self) -> R<()> {
        for (name, v) in [("sigma_loc", self.sigma_loc), ("sigma_traj", self.sigma_traj)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(TokenError::InvalidNoise(format!("{name} = {v} must be positive")));
            }
        }
        let c = self.cov();
        if (c - c.transpose()).abs().max() > 1e-12 * c.abs().max() {
            return Err(TokenError::InvalidNoise("affine covariance is not symmetric".into()));
        }
        if !c.iter().all(|v| v.is_finite()) || c.cholesky().is_none() {
            return Err(TokenError::InvalidNoise("affine covariance is not positive definite".into()));
        }
        Ok(())
    }

    /// Inverse covariance and log-normalizer `-0.5 log((2 pi)^4 |S|)`.
    fn affine_terms(&self) -> (Matrix4<f64>, f64) {
        let chol = self.cov().cholesky().expect("validated covariance");
        let log_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        (chol.inverse(), -0.5 * (4.0 * LOG_2PI + log_det))
    }
}

/// Log density of an isotropic 2D Gaussian at offset `d` from its mean.
pub fn isotropic_log_pdf(d: Point, sigma: f64) -> f64 {
    -LOG_2PI - 2.0 * sigma.ln() - d.dot(d) / (2.0 * sigma * sigma)
}

pub fn affine_log_pdf(a: [f64; 4], np: &TokenNoiseParams) -> f64 {
    let (inv, norm) = np.affine_terms();
    let d = Vector4::from_fn(|i, _| a[i] - AFFINE_MEAN[i]);
    norm - 0.5 * (d.transpose() * inv * d)[(0, 0)]
}

/// A type's starts and relative points after motor noise, plus the warp
/// `[scale_x, scale_y, shift_x, shift_y]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CharacterToken {
    pub starts: Vec<Point>,
    pub trajectories: Vec<Vec<Point>>,
    pub affine: [f64; 4],
}

impl CharacterToken {
    /// The noiseless token with the identity warp.
    pub fn mode(ty: &CharacterType) -> Self {
        Self {
            starts: ty.strokes.iter().map(|s| s.start).collect(),
            trajectories: ty.strokes.iter().map(|s| s.relative.clone()).collect(),
            affine: AFFINE_MEAN,
        }
    }

    pub fn validate_against(&self, ty: &CharacterType) -> R<()> {
        if self.starts.len() != ty.kappa() || self.trajectories.len() != ty.kappa() {
            return Err(TokenError::Incongruent(format!(
                "{} starts and {} trajectories for {} strokes",
                self.starts.len(),
                self.trajectories.len(),
                ty.kappa()
            )));
        }
        for (i, (x, s)) in self.trajectories.iter().zip(&ty.strokes).enumerate() {
            if x.len() != s.relative.len() {
                return Err(TokenError::Incongruent(format!("stroke {i}: {} points, type has {}", x.len(), s.relative.len())));
            }
        }
        let finite = self.starts.iter().chain(self.trajectories.iter().flatten()).all(|p| p.is_finite())
            && self.affine.iter().all(|v| v.is_finite());
        if !finite {
            return Err(TokenError::Incongruent("non-finite token coordinates".into()));
        }
        Ok(())
    }

    pub fn kappa(&self) -> usize {
        self.starts.len()
    }

    /// Absolute control points before the warp.
    pub fn control_points(&self) -> Vec<Vec<Point>> {
        self.starts.iter().zip(&self.trajectories).map(|(&y, x)| x.iter().map(|&p| y + p).collect()).collect()
    }

    /// Absolute control points after the warp.
    pub fn warped(&self) -> Vec<Vec<Point>> {
        apply_affine(&self.control_points(), self.affine)
    }

    pub fn splines(&self) -> Vec<Spline> {
        self.warped().into_iter().map(|c| Spline::new(c).expect("finite token")).collect()
    }

    pub fn render(&self, rp: RenderParams, size: CanvasSize) -> PixelMap {
        render_splines(&self.splines(), rp, size)
    }
}

fn center_of_mass(strokes: &[Vec<Point>]) -> Point {
    let n = strokes.iter().map(|s| s.len()).sum::<usize>();
    let sum = strokes.iter().flatten().fold(Point::ZERO, |a, &p| a + p);
    sum * (1.0 / n as f64)
}

/// `p + (s - 1) (p - c) + t` per axis, with `c` the pre-warp center of mass
/// and `s` clamped at [`MIN_SCALE`]. Unit scales leave `p + t` exactly.
pub fn apply_affine(strokes: &[Vec<Point>], a: [f64; 4]) -> Vec<Vec<Point>> {
    if strokes.iter().all(|s| s.is_empty()) {
        return strokes.to_vec();
    }
    let c = center_of_mass(strokes);
    let (sx, sy) = (a[0].max(MIN_SCALE) - 1.0, a[1].max(MIN_SCALE) - 1.0);
    strokes
        .iter()
        .map(|s| s.iter().map(|&p| Point::new(p.x + sx * (p.x - c.x) + a[2], p.y + sy * (p.y - c.y) + a[3])).collect())
        .collect()
}

/// Log density of the token given its type, all normalizers included.
pub fn log_p_token(token: &CharacterToken, ty: &CharacterType, np: &TokenNoiseParams) -> R<f64> {
    token.validate_against(ty)?;
    let mut lp = affine_log_pdf(token.affine, np);
    for ((y, x), s) in token.starts.iter().zip(&token.trajectories).zip(&ty.strokes) {
        lp += isotropic_log_pdf(*y - s.start, np.sigma_loc);
        for (p, q) in x.iter().zip(&s.relative) {
            lp += isotropic_log_pdf(*p - *q, np.sigma_traj);
        }
    }
    Ok(lp)
}

pub fn sample_token(ty: &CharacterType, np: &TokenNoiseParams, rng: &mut impl Rng) -> CharacterToken {
    let mut normal = || -> f64 { StandardNormal.sample(rng) };
    let mut jitter = |p: Point, s: f64| Point::new(p.x + s * normal(), p.y + s * normal());
    let mut starts = Vec::with_capacity(ty.kappa());
    let mut trajectories = Vec::with_capacity(ty.kappa());
    for s in &ty.strokes {
        starts.push(jitter(s.start, np.sigma_loc));
        trajectories.push(s.relative.iter().map(|&p| jitter(p, np.sigma_traj)).collect());
    }
    let l = np.cov().cholesky().expect("validated covariance").l();
    let z = Vector4::from_fn(|_, _| normal());
    let a = l * z;
    let affine = [AFFINE_MEAN[0] + a[0], AFFINE_MEAN[1] + a[1], AFFINE_MEAN[2] + a[2], AFFINE_MEAN[3] + a[3]];
    CharacterToken { starts, trajectories, affine }
}

/// Fits the two motor-noise scales by maximum likelihood from tokens with
/// known parent types. The affine covariance is passed through.
pub fn fit_noise(pairs: &[(&CharacterType, &CharacterToken)], sigma_affine: [[f64; 4]; 4]) -> R<TokenNoiseParams> {
    let (mut loc, mut nloc, mut traj, mut ntraj) = (0.0, 0usize, 0.0, 0usize);
    for (ty, tok) in pairs {
        tok.validate_against(ty)?;
        for ((y, x), s) in tok.starts.iter().zip(&tok.trajectories).zip(&ty.strokes) {
            let d = *y - s.start;
            loc += d.dot(d);
            nloc += 1;
            for (p, q) in x.iter().zip(&s.relative) {
                let d = *p - *q;
                traj += d.dot(d);
                ntraj += 1;
            }
        }
    }
    if nloc == 0 || loc == 0.0 || traj == 0.0 {
        return Err(TokenError::NoData);
    }
    TokenNoiseParams::new((loc / (2 * nloc) as f64).sqrt(), (traj / (2 * ntraj) as f64).sqrt(), sigma_affine)
}

/// `[n, 2]` absolute points of every stroke, warped by `affine` `[4]`.
pub fn warp_var<'t>(tape: &'t Tape, strokes: &[Var<'t>], affine: Var<'t>) -> R<Vec<Var<'t>>> {
    let all = tape.concat(strokes, 0)?;
    let n = all.shape()[0];
    let c = all.sum_axis(0)?.scale(1.0 / n as f64).reshape(&[1, 2])?;
    let s = affine.slice(0, 0, 2)?.clamp_min(MIN_SCALE).add_scalar(-1.0).reshape(&[1, 2])?;
    let t = affine.slice(0, 2, 4)?.reshape(&[1, 2])?;
    strokes.iter().map(|p| Ok(p.add(s.mul(p.sub(c)?)?)?.add(t)?)).collect()
}

fn isotropic_var<'t>(d: Var<'t>, sigma: f64) -> Var<'t> {
    let rows = d.len() as f64 / 2.0;
    d.square().sum().scale(-1.0 / (2.0 * sigma * sigma)).add_scalar(-rows * (LOG_2PI + 2.0 * sigma.ln()))
}

/// Differentiable log density. Type and token strokes are given as starts
/// `[1, 2]` and relative points `[d + 1, 2]`; `affine` is `[4]`.
pub fn log_p_token_var<'t>(
    tape: &'t Tape,
    type_starts: &[Var<'t>],
    type_rels: &[Var<'t>],
    token_starts: &[Var<'t>],
    token_rels: &[Var<'t>],
    affine: Var<'t>,
    np: &TokenNoiseParams,
) -> R<Var<'t>> {
    let k = type_starts.len();
    if [type_rels.len(), token_starts.len(), token_rels.len()].iter().any(|&n| n != k) {
        return Err(TokenError::Incongruent("stroke counts differ".into()));
    }
    let (inv, norm) = np.affine_terms();
    let mean = tape.constant(Tensor::vector(AFFINE_MEAN.to_vec()));
    let d = affine.sub(mean)?.reshape(&[1, 4])?;
    let inv = tape.constant(Tensor::matrix(4, 4, (0..16).map(|i| inv[(i / 4, i % 4)]).collect())?);
    let mut lp = d.matmul(inv)?.mul(d)?.sum().scale(-0.5).add_scalar(norm);
    for i in 0..k {
        if type_rels[i].shape() != token_rels[i].shape() {
            return Err(TokenError::Incongruent(format!("stroke {i} shapes differ")));
        }
        lp = lp.add(isotropic_var(token_starts[i].sub(type_starts[i])?, np.sigma_loc))?;
        lp = lp.add(isotropic_var(token_rels[i].sub(type_rels[i])?, np.sigma_traj))?;
    }
    Ok(lp)
}
