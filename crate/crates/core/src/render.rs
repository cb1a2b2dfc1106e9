//! Differentiable stroke rasterizer and Bernoulli image likelihood.
//!
//! Each stroke is sampled along its spline and every sample deposits a
//! Gaussian blob, weighted by the arc length it stands for, onto an ink
//! accumulator. The accumulator is squashed with `1 - exp(-acc)` and mixed
//! with pixel noise: `p = eps + (1 - 2 eps) * ink`. The blob kernel is
//! separable and truncated at 4 sigma, with a correction term that brings
//! both its value and slope to zero at the cutoff, so the map is
//! continuously differentiable in every parameter.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{CustomOp, Tape, Tensor, Var};
use crate::geometry::{basis_matrix, Point, Spline, StrokeEncoding};

/// Peak accumulator value along the center of a long stroke.
pub const INK_DENSITY: f64 = 3.0;
/// Blur of the grayscale canvas memory fed to the networks.
pub const CANVAS_SIGMA: f64 = 0.5;
pub const SIGMA_MIN: f64 = 0.5;
pub const SIGMA_MAX: f64 = 5.0;
pub const EPSILON_MIN: f64 = 1e-4;
pub const EPSILON_MAX: f64 = 0.5;
pub const P_CLAMP: f64 = 1e-6;
const MIN_SAMPLES: usize = 16;
/// Cap on samples per stroke, reached only by strokes far longer than any canvas.
const MAX_SAMPLES: usize = 8192;
const KERNEL_RADIUS: f64 = 4.0;
const SEG_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RenderError {
    #[error("dimension mismatch: expected {expected:?}, got {got:?}")]
    DimensionMismatch { expected: (usize, usize), got: (usize, usize) },
    #[error("invalid render parameters: {0}")]
    InvalidParams(String),
    #[error("invalid pixel data: {0}")]
    InvalidPixels(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CanvasSize {
    pub width: usize,
    pub height: usize,
}

impl CanvasSize {
    pub const fn new(width: usize, height: usize) -> Self {
        Self { width, height }
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn center(&self) -> Point {
        Point::new((self.width as f64 - 1.0) / 2.0, (self.height as f64 - 1.0) / 2.0)
    }
}

impl Default for CanvasSize {
    fn default() -> Self {
        Self::new(105, 105)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderParams {
    pub sigma: f64,
    pub epsilon: f64,
}

impl RenderParams {
    pub fn new(sigma: f64, epsilon: f64) -> Result<Self, RenderError> {
        let rp = Self { sigma, epsilon };
        rp.validate()?;
        Ok(rp)
    }

    /// Geometric midpoint of the admissible box, which is the arithmetic
    /// midpoint in the log coordinates the optimizer works in.
    pub fn mid_box() -> Self {
        Self { sigma: (SIGMA_MIN * SIGMA_MAX).sqrt(), epsilon: (EPSILON_MIN * EPSILON_MAX).sqrt() }
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        if !(SIGMA_MIN..=SIGMA_MAX).contains(&self.sigma) {
            return Err(RenderError::InvalidParams(format!(
                "sigma {} outside [{SIGMA_MIN}, {SIGMA_MAX}]",
                self.sigma
            )));
        }
        if !(EPSILON_MIN..=EPSILON_MAX).contains(&self.epsilon) {
            return Err(RenderError::InvalidParams(format!(
                "epsilon {} outside [{EPSILON_MIN}, {EPSILON_MAX}]",
                self.epsilon
            )));
        }
        Ok(())
    }

    pub fn clamped(self) -> Self {
        Self {
            sigma: self.sigma.clamp(SIGMA_MIN, SIGMA_MAX),
            epsilon: self.epsilon.clamp(EPSILON_MIN, EPSILON_MAX),
        }
    }

    pub fn sample_uniform(rng: &mut impl Rng) -> Self {
        Self { sigma: rng.gen_range(SIGMA_MIN..=SIGMA_MAX), epsilon: rng.gen_range(EPSILON_MIN..=EPSILON_MAX) }
    }
}

/// Per-pixel ink probabilities, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelMap {
    size: CanvasSize,
    p: Vec<f64>,
}

impl PixelMap {
    pub fn new(size: CanvasSize, p: Vec<f64>) -> Result<Self, RenderError> {
        if p.len() != size.pixels() {
            return Err(RenderError::InvalidPixels(format!("{} values for {}x{}", p.len(), size.width, size.height)));
        }
        if let Some(v) = p.iter().find(|&&v| !(P_CLAMP..=1.0 - P_CLAMP).contains(&v)) {
            return Err(RenderError::InvalidPixels(format!("probability {v} outside the clamp range")));
        }
        Ok(Self { size, p })
    }

    pub fn blank(size: CanvasSize, epsilon: f64) -> Self {
        Self { size, p: vec![clamp_p(epsilon); size.pixels()] }
    }

    pub fn size(&self) -> CanvasSize {
        self.size
    }

    pub fn values(&self) -> &[f64] {
        &self.p
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.p[row * self.size.width + col]
    }

    pub fn threshold(&self, level: f64) -> BinaryImage {
        BinaryImage { size: self.size, bits: self.p.iter().map(|&v| u8::from(v > level)).collect() }
    }

    /// Independent Bernoulli draw per pixel.
    pub fn sample(&self, rng: &mut impl Rng) -> BinaryImage {
        BinaryImage { size: self.size, bits: self.p.iter().map(|&v| u8::from(rng.gen::<f64>() < v)).collect() }
    }
}

/// Binary image, row-major, 1 = ink.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryImage {
    size: CanvasSize,
    bits: Vec<u8>,
}

impl BinaryImage {
    pub fn new(size: CanvasSize, bits: Vec<u8>) -> Result<Self, RenderError> {
        if bits.len() != size.pixels() {
            return Err(RenderError::InvalidPixels(format!("{} bits for {}x{}", bits.len(), size.width, size.height)));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(RenderError::InvalidPixels("bits must be 0 or 1".into()));
        }
        Ok(Self { size, bits })
    }

    pub fn blank(size: CanvasSize) -> Self {
        Self { size, bits: vec![0; size.pixels()] }
    }

    pub fn size(&self) -> CanvasSize {
        self.size
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.size.width + col] == 1
    }

    pub fn set(&mut self, row: usize, col: usize, ink: bool) {
        self.bits[row * self.size.width + col] = u8::from(ink);
    }

    pub fn ink_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    pub fn ink_fraction(&self) -> f64 {
        self.ink_count() as f64 / self.bits.len() as f64
    }

    /// The image as a probability map at the clamp limits, the Bernoulli
    /// likelihood optimum for this image.
    pub fn as_pixel_map(&self) -> PixelMap {
        PixelMap {
            size: self.size,
            p: self.bits.iter().map(|&b| if b == 1 { 1.0 - P_CLAMP } else { P_CLAMP }).collect(),
        }
    }
}

/// Grayscale canvas memory with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Canvas {
    size: CanvasSize,
    values: Vec<f64>,
}

impl Canvas {
    pub fn blank(size: CanvasSize) -> Self {
        Self { size, values: vec![0.0; size.pixels()] }
    }

    pub fn size(&self) -> CanvasSize {
        self.size
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn ink_mass(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.size.height, self.size.width], self.values.clone()).expect("canvas shape")
    }
}

fn clamp_p(p: f64) -> f64 {
    p.clamp(P_CLAMP, 1.0 - P_CLAMP)
}

/// Samples, arc-length weights and the basis that produced them.
struct StrokeSamples {
    basis: Vec<Vec<f64>>,
    q: Vec<Point>,
    seg: Vec<f64>,
    w: Vec<f64>,
}

fn sample_count(ctrl: &[Point]) -> usize {
    let len: f64 = ctrl.windows(2).map(|w| w[0].dist(w[1])).sum();
    MIN_SAMPLES.max(len.ceil().min(MAX_SAMPLES as f64) as usize)
}

fn prepare(ctrl: &[Point]) -> StrokeSamples {
    let n = sample_count(ctrl);
    let basis = basis_matrix(ctrl.len(), n);
    let q: Vec<Point> = basis
        .iter()
        .map(|row| row.iter().zip(ctrl).fold(Point::ZERO, |acc, (&b, &p)| acc + p * b))
        .collect();
    let seg: Vec<f64> = q
        .windows(2)
        .map(|w| {
            let d = w[1] - w[0];
            (d.dot(d) + SEG_EPS).sqrt()
        })
        .collect();
    let mut w = vec![0.0; n];
    for (j, s) in seg.iter().enumerate() {
        w[j] += 0.5 * s;
        w[j + 1] += 0.5 * s;
    }
    StrokeSamples { basis, q, seg, w }
}

/// Truncated 1D kernel around `center`. Returns the first covered index and
/// fills `vals` with `e - F (9 - d^2 / 2 s^2)` and `raw` with `e - F`, where
/// `e = exp(-d^2 / 2 s^2)` and `F = exp(-8)`. Derivatives of `vals` in the
/// center and in sigma are the plain Gaussian ones scaled by `raw / e`.
fn kernel(center: f64, sigma: f64, len: usize, vals: &mut Vec<f64>, raw: &mut Vec<f64>) -> usize {
    vals.clear();
    raw.clear();
    let r = KERNEL_RADIUS * sigma;
    let lo = (center - r).ceil().max(0.0);
    let hi = (center + r).floor().min(len as f64 - 1.0);
    if !(lo <= hi) {
        return 0;
    }
    let floor = (-0.5 * KERNEL_RADIUS * KERNEL_RADIUS).exp();
    let inv = 1.0 / (2.0 * sigma * sigma);
    let lo = lo as usize;
    for i in lo..=hi as usize {
        let d = i as f64 - center;
        let u = d * d * inv;
        let e = (-u).exp();
        raw.push(e - floor);
        vals.push((e - floor * (1.0 + 0.5 * KERNEL_RADIUS * KERNEL_RADIUS - u)).max(0.0));
    }
    lo
}

fn amplitude(sigma: f64) -> f64 {
    INK_DENSITY / ((2.0 * std::f64::consts::PI).sqrt() * sigma)
}

fn accumulate(size: CanvasSize, strokes: &[StrokeSamples], sigma: f64) -> Vec<f64> {
    let mut acc = vec![0.0; size.pixels()];
    let a = amplitude(sigma);
    let (mut kx, mut rx, mut ky, mut ry) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for s in strokes {
        for (q, &w) in s.q.iter().zip(&s.w) {
            let x0 = kernel(q.x, sigma, size.width, &mut kx, &mut rx);
            let y0 = kernel(q.y, sigma, size.height, &mut ky, &mut ry);
            let amp = a * w;
            for (iy, &vy) in ky.iter().enumerate() {
                let row = &mut acc[(y0 + iy) * size.width + x0..][..kx.len()];
                let f = amp * vy;
                for (cell, &vx) in row.iter_mut().zip(&kx) {
                    *cell += f * vx;
                }
            }
        }
    }
    acc
}

/// Backpropagates an accumulator gradient to control points and sigma.
fn accumulate_backward(
    size: CanvasSize,
    strokes: &[StrokeSamples],
    sigma: f64,
    g_acc: &[f64],
) -> (Vec<Vec<Point>>, f64) {
    let a = amplitude(sigma);
    let s2 = sigma * sigma;
    let s3 = s2 * sigma;
    let mut g_sigma = 0.0;
    let (mut kx, mut rx, mut ky, mut ry) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut dkx = Vec::new();
    let mut skx = Vec::new();
    let mut out = Vec::with_capacity(strokes.len());
    for s in strokes {
        let n = s.q.len();
        let mut gq = vec![Point::ZERO; n];
        let mut gw = vec![0.0; n];
        for j in 0..n {
            let q = s.q[j];
            let x0 = kernel(q.x, sigma, size.width, &mut kx, &mut rx);
            let y0 = kernel(q.y, sigma, size.height, &mut ky, &mut ry);
            if kx.is_empty() || ky.is_empty() {
                continue;
            }
            dkx.clear();
            skx.clear();
            for (i, &e) in rx.iter().enumerate() {
                let d = (x0 + i) as f64 - q.x;
                dkx.push(e * d / s2);
                skx.push(e * d * d / s3);
            }
            let (mut sum_k, mut sum_dx, mut sum_dy, mut sum_s) = (0.0, 0.0, 0.0, 0.0);
            for (iy, (&vy, &ey)) in ky.iter().zip(&ry).enumerate() {
                let row = &g_acc[(y0 + iy) * size.width + x0..][..kx.len()];
                let (mut rk, mut rd, mut rs) = (0.0, 0.0, 0.0);
                for (((&g, &vx), &dx), &sx) in row.iter().zip(&kx).zip(&dkx).zip(&skx) {
                    rk += g * vx;
                    rd += g * dx;
                    rs += g * sx;
                }
                let dy = (y0 + iy) as f64 - q.y;
                sum_k += vy * rk;
                sum_dx += vy * rd;
                sum_dy += ey * dy / s2 * rk;
                sum_s += vy * rs + ey * dy * dy / s3 * rk;
            }
            let amp = a * s.w[j];
            gw[j] = a * sum_k;
            gq[j] = gq[j] + Point::new(amp * sum_dx, amp * sum_dy);
            g_sigma += amp * sum_s - amp / sigma * sum_k;
        }
        for (j, &sg) in s.seg.iter().enumerate() {
            let g_seg = 0.5 * (gw[j] + gw[j + 1]);
            let d = (s.q[j + 1] - s.q[j]) * (g_seg / sg);
            gq[j + 1] = gq[j + 1] + d;
            gq[j] = gq[j] - d;
        }
        let nc = s.basis[0].len();
        let mut gc = vec![Point::ZERO; nc];
        for (row, g) in s.basis.iter().zip(&gq) {
            for (c, &b) in gc.iter_mut().zip(row) {
                *c = *c + *g * b;
            }
        }
        out.push(gc);
    }
    (out, g_sigma)
}

/// Ink map in `[0, 1)` for strokes given as absolute control points.
pub fn ink_map(strokes: &[&[Point]], sigma: f64, size: CanvasSize) -> Vec<f64> {
    let prepared: Vec<StrokeSamples> = strokes.iter().map(|c| prepare(c)).collect();
    accumulate(size, &prepared, sigma).into_iter().map(|a| 1.0 - (-a).exp()).collect()
}

fn probabilities(ink: &[f64], epsilon: f64) -> Vec<f64> {
    ink.iter().map(|&k| clamp_p(epsilon + (1.0 - 2.0 * epsilon) * k)).collect()
}

/// Renders already-warped splines to a probability map.
pub fn render_splines(strokes: &[Spline], rp: RenderParams, size: CanvasSize) -> PixelMap {
    let ctrl: Vec<&[Point]> = strokes.iter().map(|s| s.control_points()).collect();
    let ink = ink_map(&ctrl, rp.sigma, size);
    PixelMap { size, p: probabilities(&ink, rp.epsilon) }
}

/// Bernoulli log-likelihood of `image` under `map`.
pub fn image_log_lik(image: &BinaryImage, map: &PixelMap) -> Result<f64, RenderError> {
    if image.size != map.size {
        return Err(RenderError::DimensionMismatch {
            expected: (image.size.width, image.size.height),
            got: (map.size.width, map.size.height),
        });
    }
    Ok(image.bits.iter().zip(&map.p).map(|(&b, &p)| if b == 1 { p.ln() } else { (1.0 - p).ln() }).sum())
}

/// Gradient of the image log-likelihood alongside its value.
#[derive(Clone, Debug)]
pub struct ImageLogLikGrad {
    pub value: f64,
    pub control: Vec<Vec<Point>>,
    pub sigma: f64,
    pub epsilon: f64,
}

/// Image log-likelihood of absolute control points with its analytic gradient.
pub fn image_log_lik_grad(strokes: &[&[Point]], rp: RenderParams, image: &BinaryImage) -> ImageLogLikGrad {
    let prepared: Vec<StrokeSamples> = strokes.iter().map(|c| prepare(c)).collect();
    let eval = LikelihoodEval::new(image.size, &prepared, rp.sigma, rp.epsilon, image);
    let (control, sigma, epsilon) = eval.backward(&prepared, 1.0);
    ImageLogLikGrad { value: eval.value, control, sigma, epsilon }
}

struct LikelihoodEval {
    size: CanvasSize,
    sigma: f64,
    epsilon: f64,
    ink: Vec<f64>,
    /// dLL/dp per pixel, zero where the clamp is active.
    g_p: Vec<f64>,
    value: f64,
}

impl LikelihoodEval {
    fn new(size: CanvasSize, strokes: &[StrokeSamples], sigma: f64, epsilon: f64, image: &BinaryImage) -> Self {
        let ink: Vec<f64> = accumulate(size, strokes, sigma).into_iter().map(|a| 1.0 - (-a).exp()).collect();
        let mut value = 0.0;
        let mut g_p = Vec::with_capacity(ink.len());
        for (&k, &b) in ink.iter().zip(&image.bits) {
            let raw = epsilon + (1.0 - 2.0 * epsilon) * k;
            let p = clamp_p(raw);
            let active = raw == p;
            if b == 1 {
                value += p.ln();
                g_p.push(if active { 1.0 / p } else { 0.0 });
            } else {
                value += (1.0 - p).ln();
                g_p.push(if active { -1.0 / (1.0 - p) } else { 0.0 });
            }
        }
        Self { size, sigma, epsilon, ink, g_p, value }
    }

    fn backward(&self, strokes: &[StrokeSamples], upstream: f64) -> (Vec<Vec<Point>>, f64, f64) {
        let mut g_eps = 0.0;
        let scale = 1.0 - 2.0 * self.epsilon;
        let g_acc: Vec<f64> = self
            .g_p
            .iter()
            .zip(&self.ink)
            .map(|(&g, &k)| {
                g_eps += upstream * g * (1.0 - 2.0 * k);
                upstream * g * scale * (1.0 - k)
            })
            .collect();
        let (gc, gs) = accumulate_backward(self.size, strokes, self.sigma, &g_acc);
        (gc, gs, g_eps)
    }
}

/// Canvas update: elementwise max of the old canvas and the stroke's ink at
/// the canvas blur.
pub fn f_render(enc: &StrokeEncoding, canvas: &Canvas) -> Canvas {
    f_render_points(&enc.absolute(), canvas)
}

pub fn f_render_points(ctrl: &[Point], canvas: &Canvas) -> Canvas {
    let (ctrl, _) = canonical_orientation(ctrl);
    let ink = ink_map(&[&ctrl], CANVAS_SIGMA, canvas.size);
    Canvas { size: canvas.size, values: canvas.values.iter().zip(&ink).map(|(&a, &b)| a.max(b)).collect() }
}

/// Canvas ink is drawn from the lexicographically smaller of the two
/// traversal directions, which makes canvases exactly independent of stroke
/// direction. Combined with the max composite they depend only on the set of
/// strokes drawn so far.
fn canonical_orientation(ctrl: &[Point]) -> (Vec<Point>, bool) {
    let rev = ctrl
        .iter()
        .rev()
        .zip(ctrl)
        .map(|(a, b)| (a.x, a.y).partial_cmp(&(b.x, b.y)))
        .find(|o| *o != Some(std::cmp::Ordering::Equal))
        == Some(Some(std::cmp::Ordering::Less));
    if rev {
        (ctrl.iter().rev().copied().collect(), true)
    } else {
        (ctrl.to_vec(), false)
    }
}

fn points_of(t: &Tensor) -> Vec<Point> {
    t.data().chunks_exact(2).map(|c| Point::new(c[0], c[1])).collect()
}

fn points_tensor(pts: &[Point]) -> Tensor {
    Tensor::new(vec![pts.len(), 2], pts.iter().flat_map(|p| [p.x, p.y]).collect()).expect("point tensor")
}

fn check_strokes(strokes: &[Var<'_>]) {
    for s in strokes {
        let shape = s.shape();
        assert!(shape.len() == 2 && shape[1] == 2 && shape[0] >= 2, "stroke control points must be [n>=2, 2], got {shape:?}");
    }
}

struct ImageLogLikOp {
    size: CanvasSize,
    image: BinaryImage,
    eval: LikelihoodEval,
}

impl CustomOp for ImageLogLikOp {
    fn name(&self) -> &'static str {
        "image_log_lik"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let k = inputs.len() - 2;
        let prepared: Vec<StrokeSamples> = inputs[..k].iter().map(|t| prepare(&points_of(t))).collect();
        debug_assert_eq!(self.image.size, self.size);
        let (gc, gs, ge) = self.eval.backward(&prepared, grad.item());
        let mut out: Vec<Option<Tensor>> = gc.iter().map(|g| Some(points_tensor(g))).collect();
        out.push(Some(Tensor::scalar(gs)));
        out.push(Some(Tensor::scalar(ge)));
        out
    }
}

/// Image log-likelihood as a tape node; `strokes` are `[n, 2]` absolute
/// control points, `sigma` and `epsilon` scalars.
pub fn image_log_lik_var<'t>(
    tape: &'t Tape,
    strokes: &[Var<'t>],
    sigma: Var<'t>,
    epsilon: Var<'t>,
    image: &BinaryImage,
) -> Var<'t> {
    check_strokes(strokes);
    let size = image.size;
    let prepared: Vec<StrokeSamples> = strokes.iter().map(|s| prepare(&points_of(&s.value()))).collect();
    let eval = LikelihoodEval::new(size, &prepared, sigma.item(), epsilon.item(), image);
    let value = eval.value;
    let mut inputs = strokes.to_vec();
    inputs.push(sigma);
    inputs.push(epsilon);
    tape.custom(&inputs, Tensor::scalar(value), Box::new(ImageLogLikOp { size, image: image.clone(), eval }))
}

struct RenderOp {
    size: CanvasSize,
    ink: Vec<f64>,
    sigma: f64,
    epsilon: f64,
}

impl CustomOp for RenderOp {
    fn name(&self) -> &'static str {
        "render"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let k = inputs.len() - 2;
        let prepared: Vec<StrokeSamples> = inputs[..k].iter().map(|t| prepare(&points_of(t))).collect();
        let scale = 1.0 - 2.0 * self.epsilon;
        let mut g_eps = 0.0;
        let g_acc: Vec<f64> = grad
            .data()
            .iter()
            .zip(&self.ink)
            .zip(output.data())
            .map(|((&g, &k), &p)| {
                let raw = self.epsilon + scale * k;
                if raw != p {
                    return 0.0;
                }
                g_eps += g * (1.0 - 2.0 * k);
                g * scale * (1.0 - k)
            })
            .collect();
        let (gc, gs) = accumulate_backward(self.size, &prepared, self.sigma, &g_acc);
        let mut out: Vec<Option<Tensor>> = gc.iter().map(|g| Some(points_tensor(g))).collect();
        out.push(Some(Tensor::scalar(gs)));
        out.push(Some(Tensor::scalar(g_eps)));
        out
    }
}

/// Probability map `[height, width]` as a tape node.
pub fn render_var<'t>(
    tape: &'t Tape,
    strokes: &[Var<'t>],
    sigma: Var<'t>,
    epsilon: Var<'t>,
    size: CanvasSize,
) -> Var<'t> {
    check_strokes(strokes);
    let prepared: Vec<StrokeSamples> = strokes.iter().map(|s| prepare(&points_of(&s.value()))).collect();
    let (sg, ep) = (sigma.item(), epsilon.item());
    let ink: Vec<f64> = accumulate(size, &prepared, sg).into_iter().map(|a| 1.0 - (-a).exp()).collect();
    let p = Tensor::new(vec![size.height, size.width], probabilities(&ink, ep)).expect("map shape");
    let mut inputs = strokes.to_vec();
    inputs.push(sigma);
    inputs.push(epsilon);
    tape.custom(&inputs, p, Box::new(RenderOp { size, ink, sigma: sg, epsilon: ep }))
}

struct FRenderOp {
    size: CanvasSize,
    ink: Vec<f64>,
    reversed: bool,
}

impl CustomOp for FRenderOp {
    fn name(&self) -> &'static str {
        "f_render"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let old = inputs[0].data();
        let mut g_old = vec![0.0; old.len()];
        let mut g_acc = vec![0.0; old.len()];
        for i in 0..old.len() {
            let g = grad.data()[i];
            if old[i] >= self.ink[i] {
                g_old[i] = g;
            } else {
                g_acc[i] = g * (1.0 - self.ink[i]);
            }
        }
        let mut pts = points_of(inputs[1]);
        if self.reversed {
            pts.reverse();
        }
        let (mut gc, _) = accumulate_backward(self.size, &[prepare(&pts)], CANVAS_SIGMA, &g_acc);
        if self.reversed {
            gc[0].reverse();
        }
        vec![
            Some(Tensor::new(inputs[0].shape().to_vec(), g_old).expect("canvas grad")),
            Some(points_tensor(&gc[0])),
        ]
    }
}

/// Differentiable canvas update; `canvas` is `[1, height, width]`, `stroke`
/// is `[n, 2]` absolute control points.
pub fn f_render_var<'t>(tape: &'t Tape, canvas: Var<'t>, stroke: Var<'t>, size: CanvasSize) -> Var<'t> {
    check_strokes(&[stroke]);
    assert_eq!(canvas.len(), size.pixels(), "canvas does not match size");
    let (pts, reversed) = canonical_orientation(&points_of(&stroke.value()));
    let ink = ink_map(&[&pts], CANVAS_SIGMA, size);
    let old = canvas.value();
    let values: Vec<f64> = old.data().iter().zip(&ink).map(|(&a, &b)| a.max(b)).collect();
    let out = Tensor::new(old.shape().to_vec(), values).expect("canvas shape");
    tape.custom(&[canvas, stroke], out, Box::new(FRenderOp { size, ink, reversed }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_difference, relative_error};
    use crate::geometry::encode_stroke;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spline(v: &[(f64, f64)]) -> Spline {
        Spline::new(v.iter().map(|&(x, y)| Point::new(x, y)).collect()).unwrap()
    }

    fn size() -> CanvasSize {
        CanvasSize::default()
    }

    #[test]
    fn empty_token_is_pure_noise() {
        let map = render_splines(&[], RenderParams::new(1.0, 0.05).unwrap(), size());
        assert!(map.values().iter().all(|&p| p == 0.05));
    }

    #[test]
    fn off_canvas_token_is_blank() {
        let s = spline(&[(-100.0, -100.0), (-50.0, -60.0)]);
        let map = render_splines(&[s], RenderParams::new(2.0, 0.05).unwrap(), size());
        assert!(map.values().iter().all(|&p| p == 0.05));
    }

    #[test]
    fn horizontal_stroke_profile() {
        let s = spline(&[(10.0, 52.0), (94.0, 52.0)]);
        let rp = RenderParams::new(0.5, 0.01).unwrap();
        let map = render_splines(&[s], rp, size());
        for c in 15..90 {
            assert!(map.get(52, c) > 0.5, "col {c}: {}", map.get(52, c));
        }
        for r in 0..105 {
            if (r as f64 - 52.0).abs() >= 5.0 * rp.sigma {
                for c in 0..105 {
                    assert!((map.get(r, c) - rp.epsilon).abs() < 1e-3);
                }
            }
        }
    }

    #[test]
    fn blob_sum_matches_direct_formula() {
        // Independent evaluation of the truncated separable kernel sum.
        let ctrl = [Point::new(30.0, 40.0), Point::new(55.5, 61.2), Point::new(70.0, 35.0)];
        let sigma = 1.7;
        let ink = ink_map(&[&ctrl], sigma, size());
        let n = sample_count(&ctrl);
        let sp = Spline::new(ctrl.to_vec()).unwrap();
        let q = sp.sample(n).0;
        let mut w = vec![0.0; n];
        for j in 0..n - 1 {
            let d = q[j + 1] - q[j];
            let l = (d.dot(d) + 1e-12).sqrt();
            w[j] += l / 2.0;
            w[j + 1] += l / 2.0;
        }
        let k = |d: f64| {
            if d.abs() > 4.0 * sigma {
                0.0
            } else {
                let u = d * d / (2.0 * sigma * sigma);
                ((-u).exp() - (-8.0f64).exp() * (9.0 - u)).max(0.0)
            }
        };
        for &(r, c) in &[(40usize, 30usize), (50, 45), (61, 55), (45, 66), (10, 10), (52, 52)] {
            let acc: f64 = q
                .iter()
                .zip(&w)
                .map(|(p, &wj)| wj * 3.0 / ((2.0 * std::f64::consts::PI).sqrt() * sigma) * k(c as f64 - p.x) * k(r as f64 - p.y))
                .sum();
            assert!((ink[r * 105 + c] - (1.0 - (-acc).exp())).abs() < 1e-12);
        }
    }

    #[test]
    fn blank_image_log_lik_closed_form() {
        let map = PixelMap::blank(size(), 0.01);
        let ll = image_log_lik(&BinaryImage::blank(size()), &map).unwrap();
        assert!((ll - 11025.0 * 0.99f64.ln()).abs() < 1e-9);
        assert!((ll - (-110.80)).abs() < 0.01);
    }

    #[test]
    fn log_lik_rejects_mismatched_dimensions() {
        let map = PixelMap::blank(CanvasSize::new(10, 10), 0.1);
        assert!(matches!(
            image_log_lik(&BinaryImage::blank(size()), &map),
            Err(RenderError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn thresholded_map_is_pixelwise_optimal() {
        let s = spline(&[(20.0, 20.0), (50.0, 80.0), (85.0, 30.0)]);
        let map = render_splines(&[s], RenderParams::new(1.5, 0.1).unwrap(), size());
        let best = map.threshold(0.5);
        let ll = image_log_lik(&best, &map).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let mut other = best.clone();
            let (r, c) = (rng.gen_range(0..105), rng.gen_range(0..105));
            other.set(r, c, !other.get(r, c));
            assert!(image_log_lik(&other, &map).unwrap() <= ll);
        }
    }

    #[test]
    fn flipping_pixels_lowers_log_lik() {
        let s = spline(&[(20.0, 20.0), (50.0, 80.0), (85.0, 30.0)]);
        let map = render_splines(&[s], RenderParams::new(1.0, 0.05).unwrap(), size());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let mut img = map.threshold(0.5);
            let mut prev = image_log_lik(&img, &map).unwrap();
            let mut order: Vec<usize> = (0..11025).collect();
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
            for &i in order.iter().take(20) {
                img.set(i / 105, i % 105, !img.get(i / 105, i % 105));
                let ll = image_log_lik(&img, &map).unwrap();
                assert!(ll < prev);
                prev = ll;
            }
        }
    }

    #[test]
    fn integer_shift_is_equivariant() {
        let a = spline(&[(30.3, 40.1), (50.7, 60.2), (60.0, 35.5)]);
        let v = Point::new(7.0, -4.0);
        let rp = RenderParams::new(1.3, 0.02).unwrap();
        let m1 = render_splines(&[a.clone()], rp, size());
        let m2 = render_splines(&[a.translated(v)], rp, size());
        for r in 20..80 {
            for c in 20..80 {
                assert!((m1.get(r, c) - m2.get((r as i64 - 4) as usize, c + 7)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn f_render_is_idempotent_and_commutes() {
        let a = encode_stroke(&spline(&[(20.0, 20.0), (40.0, 25.0), (60.0, 20.0)]));
        let b = encode_stroke(&spline(&[(20.0, 80.0), (80.0, 85.0)]));
        let blank = Canvas::blank(size());
        let once = f_render(&a, &blank);
        assert_eq!(f_render(&a, &once), once);
        assert_eq!(f_render(&b, &f_render(&a, &blank)), f_render(&a, &f_render(&b, &blank)));
        let both = f_render(&b, &once);
        assert!(both.ink_mass() > once.ink_mass());
        assert!(both.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    fn flat(strokes: &[Vec<Point>]) -> Vec<f64> {
        strokes.iter().flatten().flat_map(|p| [p.x, p.y]).collect()
    }

    fn unflat(x: &[f64], lens: &[usize]) -> Vec<Vec<Point>> {
        let mut out = Vec::new();
        let mut i = 0;
        for &n in lens {
            out.push((0..n).map(|k| Point::new(x[i + 2 * k], x[i + 2 * k + 1])).collect());
            i += 2 * n;
        }
        out
    }

    #[test]
    fn sum_of_map_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let lens = [rng.gen_range(2..6usize), rng.gen_range(2..5usize)];
            let strokes: Vec<Vec<Point>> = lens
                .iter()
                .map(|&n| (0..n).map(|_| Point::new(rng.gen_range(15.0..90.0), rng.gen_range(15.0..90.0))).collect())
                .collect();
            let rp = RenderParams::new(rng.gen_range(0.8..3.0), rng.gen_range(0.01..0.2)).unwrap();
            let tape = Tape::new();
            let vars: Vec<Var> = strokes.iter().map(|s| tape.param(points_tensor(s))).collect();
            let sg = tape.param(Tensor::scalar(rp.sigma));
            let ep = tape.param(Tensor::scalar(rp.epsilon));
            let total = render_var(&tape, &vars, sg, ep, size()).sum();
            let grads = tape.backward(total).unwrap();
            let mut analytic: Vec<f64> = vars.iter().flat_map(|v| grads.wrt(*v).into_data()).collect();
            analytic.push(grads.wrt(sg).item());
            analytic.push(grads.wrt(ep).item());
            let mut x = flat(&strokes);
            x.push(rp.sigma);
            x.push(rp.epsilon);
            let f = |x: &[f64]| {
                let k = x.len() - 2;
                let st = unflat(&x[..k], &lens);
                let refs: Vec<&[Point]> = st.iter().map(|s| s.as_slice()).collect();
                let ink = ink_map(&refs, x[k], size());
                probabilities(&ink, x[k + 1]).iter().sum::<f64>()
            };
            let numeric = finite_difference(f, &x, 1e-5);
            let err = relative_error(&analytic, &numeric);
            assert!(err < 1e-3, "relative error {err}");
        }
    }

    #[test]
    fn image_log_lik_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let target = render_splines(&[spline(&[(25.0, 30.0), (50.0, 70.0), (80.0, 40.0)])], RenderParams::new(1.0, 0.01).unwrap(), size())
            .threshold(0.5);
        for _ in 0..20 {
            let lens = [rng.gen_range(2..5usize)];
            let strokes: Vec<Vec<Point>> = lens
                .iter()
                .map(|&n| (0..n).map(|_| Point::new(rng.gen_range(20.0..85.0), rng.gen_range(20.0..85.0))).collect())
                .collect();
            let rp = RenderParams::new(rng.gen_range(0.6..4.0), rng.gen_range(0.001..0.3)).unwrap();
            let refs: Vec<&[Point]> = strokes.iter().map(|s| s.as_slice()).collect();
            let g = image_log_lik_grad(&refs, rp, &target);
            let mut analytic: Vec<f64> = g.control.iter().flatten().flat_map(|p| [p.x, p.y]).collect();
            analytic.push(g.sigma);
            analytic.push(g.epsilon);
            let mut x = flat(&strokes);
            x.push(rp.sigma);
            x.push(rp.epsilon);
            let f = |x: &[f64]| {
                let k = x.len() - 2;
                let st = unflat(&x[..k], &lens);
                let sp: Vec<Spline> = st.into_iter().map(|s| Spline::new(s).unwrap()).collect();
                image_log_lik(&target, &render_splines(&sp, RenderParams { sigma: x[k], epsilon: x[k + 1] }, size())).unwrap()
            };
            let numeric = finite_difference(f, &x, 1e-5);
            assert!((g.value - f(&x)).abs() < 1e-9);
            let err = relative_error(&analytic, &numeric);
            assert!(err < 1e-3, "relative error {err}");

            // The tape node agrees with the direct gradient.
            let tape = Tape::new();
            let vars: Vec<Var> = strokes.iter().map(|s| tape.param(points_tensor(s))).collect();
            let sg = tape.param(Tensor::scalar(rp.sigma));
            let ep = tape.param(Tensor::scalar(rp.epsilon));
            let ll = image_log_lik_var(&tape, &vars, sg, ep, &target);
            let grads = tape.backward(ll).unwrap();
            let mut taped: Vec<f64> = vars.iter().flat_map(|v| grads.wrt(*v).into_data()).collect();
            taped.push(grads.wrt(sg).item());
            taped.push(grads.wrt(ep).item());
            assert!(relative_error(&taped, &analytic) < 1e-12);
        }
    }

    #[test]
    fn f_render_gradient_matches_finite_differences() {
        let first = [Point::new(20.0, 50.0), Point::new(60.0, 50.0)];
        let base = f_render_points(&first, &Canvas::blank(size()));
        // Kept clear of the first stroke: max is not differentiable where the two tie.
        let stroke = vec![Point::new(70.0, 20.0), Point::new(75.5, 55.0), Point::new(82.0, 90.0)];
        let weights: Vec<f64> = (0..11025).map(|i| ((i * 7919) % 13) as f64 / 13.0).collect();
        let tape = Tape::new();
        let c = tape.constant(base.to_tensor());
        let s = tape.param(points_tensor(&stroke));
        let w = tape.constant(Tensor::new(vec![1, 105, 105], weights.clone()).unwrap());
        let out = f_render_var(&tape, c, s, size()).mul(w).unwrap().sum();
        let analytic = tape.gradient(out, &[s]).unwrap()[0].clone().into_data();
        let f = |x: &[f64]| {
            let pts: Vec<Point> = x.chunks(2).map(|c| Point::new(c[0], c[1])).collect();
            f_render_points(&pts, &base).values().iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>()
        };
        let numeric = finite_difference(f, &flat(&[stroke]), 1e-5);
        assert!(relative_error(&analytic, &numeric) < 1e-4);
    }

    #[test]
    fn canvases_ignore_stroke_direction() {
        let a = spline(&[(80.0, 30.0), (50.0, 44.5), (20.0, 31.0), (15.0, 70.0)]);
        let blank = Canvas::blank(size());
        let fwd = f_render(&encode_stroke(&a), &blank);
        assert_eq!(fwd, f_render(&encode_stroke(&a.reversed()), &blank));

        let tape = Tape::new();
        let c = tape.constant(blank.to_tensor());
        let w: Vec<f64> = (0..11025).map(|i| ((i * 31) % 17) as f64 / 17.0).collect();
        let wv = tape.constant(Tensor::new(vec![1, 105, 105], w.clone()).unwrap());
        let s = tape.param(points_tensor(a.control_points()));
        let rendered = f_render_var(&tape, c, s, size());
        assert_eq!(rendered.value().data(), fwd.values());
        let analytic = tape.gradient(rendered.mul(wv).unwrap().sum(), &[s]).unwrap()[0].clone().into_data();
        let f = |x: &[f64]| {
            let pts: Vec<Point> = x.chunks(2).map(|c| Point::new(c[0], c[1])).collect();
            f_render_points(&pts, &blank).values().iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
        };
        let numeric = finite_difference(f, &flat(&[a.control_points().to_vec()]), 1e-5);
        assert!(relative_error(&analytic, &numeric) < 1e-4);
    }

    #[test]
    fn f_render_routes_gradient_through_the_max() {
        let base = f_render_points(&[Point::new(20.0, 50.0), Point::new(60.0, 50.0)], &Canvas::blank(size()));
        let stroke = [Point::new(40.0, 20.0), Point::new(40.0, 90.0)];
        let ink = ink_map(&[&stroke], CANVAS_SIGMA, size());
        let tape = Tape::new();
        let c = tape.param(base.to_tensor());
        let s = tape.param(points_tensor(&stroke));
        let out = f_render_var(&tape, c, s, size()).sum();
        let g = tape.gradient(out, &[c]).unwrap();
        for (i, &gc) in g[0].data().iter().enumerate() {
            assert_eq!(gc, if base.values()[i] >= ink[i] { 1.0 } else { 0.0 });
        }
    }
}
