//! Pen trajectories, minimal B-spline strokes and the start/offset encoding.

use std::ops::{Add, Mul, Sub};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A 2D coordinate in image units: origin top-left, x right, y down.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const ZERO: Point = Point { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dot(self, o: Point) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn dist(self, o: Point) -> f64 {
        (self - o).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl From<[f64; 2]> for Point {
    fn from(a: [f64; 2]) -> Self {
        Self::new(a[0], a[1])
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

impl Add for Point {
    type Output = Point;
    fn add(self, o: Point) -> Point {
        Point::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Point {
    type Output = Point;
    fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Point {
    type Output = Point;
    fn mul(self, s: f64) -> Point {
        Point::new(self.x * s, self.y * s)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate stroke: {0} distinct point(s), need at least 2")]
    DegenerateStroke(usize),
    #[error("every stroke was shorter than the minimum stroke length")]
    AllStrokesFiltered,
    #[error("non-finite coordinate in stroke")]
    NonFinite,
    #[error("invalid stroke encoding: {0}")]
    InvalidEncoding(String),
    #[error("a spline needs at least 2 control points, got {0}")]
    TooFewControlPoints(usize),
}

/// A recorded pen trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RawStroke(pub Vec<Point>);

impl RawStroke {
    /// Polyline arc length.
    pub fn length(&self) -> f64 {
        self.0.windows(2).map(|w| w[0].dist(w[1])).sum()
    }
}

/// Clamped uniform-knot B-spline; cubic from four control points up,
/// quadratic with three and linear with two.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Spline {
    control: Vec<Point>,
}

impl Spline {
    pub fn new(control: Vec<Point>) -> Result<Self, GeometryError> {
        if control.len() < 2 {
            return Err(GeometryError::TooFewControlPoints(control.len()));
        }
        if control.iter().any(|p| !p.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        Ok(Self { control })
    }

    pub fn control_points(&self) -> &[Point] {
        &self.control
    }

    pub fn len(&self) -> usize {
        self.control.len()
    }

    pub fn is_empty(&self) -> bool {
        self.control.is_empty()
    }

    /// The same curve traversed in the opposite direction.
    pub fn reversed(&self) -> Spline {
        let mut c = self.control.clone();
        c.reverse();
        Spline { control: c }
    }

    pub fn translated(&self, v: Point) -> Spline {
        Spline { control: self.control.iter().map(|&p| p + v).collect() }
    }

    /// Length of the control polygon, an upper bound on the curve length.
    pub fn polygon_length(&self) -> f64 {
        self.control.windows(2).map(|w| w[0].dist(w[1])).sum()
    }

    pub fn point_at(&self, s: f64) -> Point {
        let basis = basis_row(self.control.len(), s);
        combine(&basis, &self.control)
    }

    /// `numSamples` points at equally spaced parameters over `[0, 1]`.
    pub fn sample(&self, num_samples: usize) -> RawStroke {
        assert!(num_samples >= 2, "need at least 2 samples");
        let basis = basis_matrix(self.control.len(), num_samples);
        RawStroke(basis.iter().map(|row| combine(row, &self.control)).collect())
    }
}

fn combine(basis: &[f64], control: &[Point]) -> Point {
    basis.iter().zip(control).fold(Point::ZERO, |acc, (&b, &p)| acc + p * b)
}

/// Degree used for `n` control points.
pub fn spline_degree(n: usize) -> usize {
    3.min(n - 1)
}

fn knots(n: usize) -> Vec<f64> {
    let p = spline_degree(n);
    let interior = n - p - 1;
    let mut k = vec![0.0; p + 1];
    k.extend((1..=interior).map(|i| i as f64 / (interior + 1) as f64));
    k.extend(std::iter::repeat(1.0).take(p + 1));
    k
}

/// Basis values and first derivatives of all `n` functions at `s`.
fn basis_with_derivative(n: usize, s: f64) -> (Vec<f64>, Vec<f64>) {
    let p = spline_degree(n);
    let u = knots(n);
    let s = s.clamp(0.0, 1.0);
    let m = u.len() - 1;
    // Degree-0 functions; the last non-empty span is closed on the right.
    let mut span = p;
    while span < n - 1 && s >= u[span + 1] {
        span += 1;
    }
    let mut basis = vec![0.0; m];
    basis[span] = 1.0;
    let mut prev = basis.clone();
    for d in 1..=p {
        prev.clone_from(&basis);
        let mut next = vec![0.0; m - d];
        for i in 0..m - d {
            let mut v = 0.0;
            let den1 = u[i + d] - u[i];
            if den1 > 0.0 {
                v += (s - u[i]) / den1 * basis[i];
            }
            let den2 = u[i + d + 1] - u[i + 1];
            if den2 > 0.0 {
                v += (u[i + d + 1] - s) / den2 * basis[i + 1];
            }
            next[i] = v;
        }
        basis = next;
    }
    // `prev` now holds degree p-1 functions.
    let mut deriv = vec![0.0; n];
    if p >= 1 {
        for (i, dv) in deriv.iter_mut().enumerate() {
            let mut v = 0.0;
            let den1 = u[i + p] - u[i];
            if den1 > 0.0 {
                v += p as f64 / den1 * prev[i];
            }
            let den2 = u[i + p + 1] - u[i + 1];
            if den2 > 0.0 && i + 1 < prev.len() {
                v -= p as f64 / den2 * prev[i + 1];
            }
            *dv = v;
        }
    }
    basis.truncate(n);
    (basis, deriv)
}

/// Values of all `n` basis functions at parameter `s`.
pub fn basis_row(n: usize, s: f64) -> Vec<f64> {
    basis_with_derivative(n, s).0
}

/// Basis rows at `samples` equally spaced parameters.
pub fn basis_matrix(n: usize, samples: usize) -> Vec<Vec<f64>> {
    (0..samples).map(|j| basis_row(n, j as f64 / (samples - 1) as f64)).collect()
}

/// Result of a least-squares fit at a fixed control-point count.
#[derive(Clone, Debug)]
pub struct SplineFit {
    pub spline: Spline,
    /// Mean Euclidean distance between each data point and its curve point.
    pub mean_residual: f64,
    /// Root-mean-square of the same distances, the quantity least squares minimizes.
    pub rms_residual: f64,
}

const REPARAM_ITERS: usize = 60;

fn dedup(points: &[Point]) -> Vec<Point> {
    let mut out: Vec<Point> = Vec::with_capacity(points.len());
    for &p in points {
        if out.last() != Some(&p) {
            out.push(p);
        }
    }
    out
}

fn chord_params(points: &[Point]) -> Vec<f64> {
    let mut acc = vec![0.0];
    for w in points.windows(2) {
        acc.push(acc.last().unwrap() + w[0].dist(w[1]));
    }
    let total = *acc.last().unwrap();
    acc.iter().map(|a| a / total).collect()
}

fn solve_least_squares(points: &[Point], params: &[f64], n: usize) -> Option<Vec<Point>> {
    let t = points.len();
    let rows: Vec<Vec<f64>> = params.iter().map(|&s| basis_row(n, s)).collect();
    let b = DMatrix::from_fn(t, n, |r, c| rows[r][c]);
    let btb = b.transpose() * &b;
    let chol = btb.cholesky()?;
    let zx = DVector::from_iterator(t, points.iter().map(|p| p.x));
    let zy = DVector::from_iterator(t, points.iter().map(|p| p.y));
    let cx = chol.solve(&(b.transpose() * zx));
    let cy = chol.solve(&(b.transpose() * zy));
    let out: Vec<Point> = (0..n).map(|i| Point::new(cx[i], cy[i])).collect();
    // Normal equations that are technically positive definite can still be
    // too ill-conditioned to trust.
    let diag_min = (0..n).map(|i| chol.l()[(i, i)].abs()).fold(f64::INFINITY, f64::min);
    if !out.iter().all(|p| p.is_finite()) || diag_min < 1e-9 {
        return None;
    }
    Some(out)
}

fn mean_residual(points: &[Point], params: &[f64], control: &[Point]) -> f64 {
    let n = control.len();
    points
        .iter()
        .zip(params)
        .map(|(&z, &s)| combine(&basis_row(n, s), control).dist(z))
        .sum::<f64>()
        / points.len() as f64
}

fn sum_sq_residual(points: &[Point], params: &[f64], control: &[Point]) -> f64 {
    let n = control.len();
    points
        .iter()
        .zip(params)
        .map(|(&z, &s)| {
            let d = combine(&basis_row(n, s), control) - z;
            d.dot(d)
        })
        .sum()
}

fn refine(pts: &[Point], mut params: Vec<f64>, n: usize) -> Option<(Vec<f64>, Vec<Point>)> {
    let mut control = solve_least_squares(pts, &params, n)?;
    let mut err = sum_sq_residual(pts, &params, &control);
    for _ in 0..REPARAM_ITERS {
        if err < 1e-24 {
            break;
        }
        let mut moved = params.clone();
        let last = moved.len() - 1;
        for (j, s) in moved.iter_mut().enumerate().take(last).skip(1) {
            let (b, db) = basis_with_derivative(n, *s);
            let c = combine(&b, &control);
            let dc = combine(&db, &control);
            let denom = dc.dot(dc);
            if denom > 1e-12 {
                *s = (*s + (pts[j] - c).dot(dc) / denom).clamp(0.0, 1.0);
            }
        }
        let Some(next) = solve_least_squares(pts, &moved, n) else { break };
        let next_err = sum_sq_residual(pts, &moved, &next);
        if next_err >= err {
            break;
        }
        let gain = (err - next_err) / err;
        params = moved;
        control = next;
        err = next_err;
        if gain < 1e-10 {
            break;
        }
    }
    Some((params, control))
}

/// Least-squares fit with `n` control points. Chord-length and uniform
/// parameterizations are both tried, each refined by Gauss-Newton projection
/// of the data onto the current curve; the lower-error fit wins. Returns
/// `None` when the normal equations are singular.
pub fn fit_spline(points: &[Point], n: usize) -> Option<SplineFit> {
    let pts = dedup(points);
    fit_from(&pts, n, None).map(|(fit, _)| fit)
}

fn fit_from(pts: &[Point], n: usize, warm: Option<&[f64]>) -> Option<(SplineFit, Vec<f64>)> {
    if pts.len() < 2 || n < 2 || n > pts.len() {
        return None;
    }
    let t = pts.len();
    let uniform: Vec<f64> = (0..t).map(|j| j as f64 / (t - 1) as f64).collect();
    let mut inits = vec![chord_params(pts), uniform];
    if let Some(w) = warm {
        inits.push(w.to_vec());
    }
    let mut best: Option<(f64, Vec<f64>, Vec<Point>)> = None;
    for init in inits {
        let Some((params, control)) = refine(pts, init, n) else { continue };
        let err = sum_sq_residual(pts, &params, &control);
        if best.as_ref().map_or(true, |b| err < b.0) {
            best = Some((err, params, control));
        }
    }
    let (err, params, control) = best?;
    let mean_residual = mean_residual(pts, &params, &control);
    let rms_residual = (err / pts.len() as f64).sqrt();
    Some((SplineFit { spline: Spline { control }, mean_residual, rms_residual }, params))
}

/// Least-squares fits at every count from 2 up to `max_control`, each
/// warm-started from the previous count's refined parameters.
pub fn fit_sequence(points: &[Point], max_control: usize) -> Vec<Option<SplineFit>> {
    let pts = dedup(points);
    let mut warm: Option<Vec<f64>> = None;
    let mut out = Vec::new();
    for n in 2..=max_control.min(pts.len()) {
        match fit_from(&pts, n, warm.as_deref()) {
            Some((fit, params)) => {
                warm = Some(params);
                out.push(Some(fit));
            }
            None => out.push(None),
        }
    }
    out
}

/// Fewest control points, searched upward from 2, whose fit has mean
/// residual at most `residual_threshold` pixels. When no count up to the cap
/// qualifies, the fit at the largest solvable count is returned.
pub fn fit_minimal_spline(
    stroke: &RawStroke,
    residual_threshold: f64,
    max_control: usize,
) -> Result<Spline, GeometryError> {
    if stroke.0.iter().any(|p| !p.is_finite()) {
        return Err(GeometryError::NonFinite);
    }
    let pts = dedup(&stroke.0);
    if pts.len() < 2 {
        return Err(GeometryError::DegenerateStroke(pts.len()));
    }
    let cap = pts.len().min(max_control.max(2));
    let mut warm: Option<Vec<f64>> = None;
    let mut best: Option<SplineFit> = None;
    for n in 2..=cap {
        let Some((fit, params)) = fit_from(&pts, n, warm.as_deref()) else { continue };
        if fit.mean_residual <= residual_threshold {
            return Ok(fit.spline);
        }
        warm = Some(params);
        best = Some(fit);
    }
    best.map(|f| f.spline).ok_or(GeometryError::DegenerateStroke(pts.len()))
}

/// A stroke as start location plus offsets between successive control
/// points, with the equivalent relative-point form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrokeEncoding {
    pub start: Point,
    pub offsets: Vec<Point>,
    /// Control points relative to `start`; the first is always the origin.
    pub relative: Vec<Point>,
}

impl StrokeEncoding {
    /// Builds an encoding from relative points, checking its invariants.
    pub fn from_relative(start: Point, relative: Vec<Point>) -> Result<Self, GeometryError> {
        if relative.len() < 2 {
            return Err(GeometryError::InvalidEncoding(format!("{} relative points", relative.len())));
        }
        if relative[0] != Point::ZERO {
            return Err(GeometryError::InvalidEncoding(format!(
                "first relative point is ({}, {}), expected the origin",
                relative[0].x, relative[0].y
            )));
        }
        let offsets = relative.windows(2).map(|w| w[1] - w[0]).collect();
        Ok(Self { start, offsets, relative })
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.relative.first() != Some(&Point::ZERO) {
            return Err(GeometryError::InvalidEncoding("first relative point must be the origin".into()));
        }
        if self.offsets.len() + 1 != self.relative.len() {
            return Err(GeometryError::InvalidEncoding("offset/relative length mismatch".into()));
        }
        for (t, d) in self.offsets.iter().enumerate() {
            let gap = (self.relative[t] + *d - self.relative[t + 1]).norm();
            if gap > 1e-9 * (1.0 + self.relative[t + 1].norm()) {
                return Err(GeometryError::InvalidEncoding(format!("relative point {} != previous + offset", t + 1)));
            }
        }
        Ok(())
    }

    pub fn absolute(&self) -> Vec<Point> {
        self.relative.iter().map(|&r| self.start + r).collect()
    }
}

/// A difference `r` with `start + r == p` in floating point, when one
/// exists; otherwise the rounded difference.
fn exact_difference(p: f64, start: f64) -> f64 {
    let r = p - start;
    if start + r == p {
        return r;
    }
    let (mut lo, mut hi) = (r, r);
    for _ in 0..4 {
        lo = lo.next_down();
        hi = hi.next_up();
        if start + lo == p {
            return lo;
        }
        if start + hi == p {
            return hi;
        }
    }
    r
}

/// Decoding adds `start` back to each relative point; the relative points are
/// chosen so that sum is bit-exact whenever a representable choice exists.
pub fn encode_stroke(spline: &Spline) -> StrokeEncoding {
    let start = spline.control[0];
    let relative: Vec<Point> = spline
        .control
        .iter()
        .map(|&p| Point::new(exact_difference(p.x, start.x), exact_difference(p.y, start.y)))
        .collect();
    let offsets = relative.windows(2).map(|w| w[1] - w[0]).collect();
    StrokeEncoding { start, offsets, relative }
}

pub fn decode_stroke(enc: &StrokeEncoding) -> Result<Spline, GeometryError> {
    if enc.relative.first() != Some(&Point::ZERO) {
        return Err(GeometryError::InvalidEncoding("first relative point must be the origin".into()));
    }
    Spline::new(enc.absolute())
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct PreprocessConfig {
    pub residual_threshold: f64,
    pub min_stroke_length: f64,
    pub max_control: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { residual_threshold: 2.0, min_stroke_length: 9.0, max_control: 30 }
    }
}

/// Drops short strokes and fits the survivors, preserving stroke order.
pub fn preprocess_drawing(strokes: &[RawStroke], cfg: &PreprocessConfig) -> Result<Vec<Spline>, GeometryError> {
    let mut out = Vec::new();
    for s in strokes {
        if s.length() < cfg.min_stroke_length {
            continue;
        }
        out.push(fit_minimal_spline(s, cfg.residual_threshold, cfg.max_control)?);
    }
    if out.is_empty() {
        return Err(GeometryError::AllStrokesFiltered);
    }
    Ok(out)
}
