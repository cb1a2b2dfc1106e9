use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::MdnError;
use crate::autodiff::{log_sum_exp, sigmoid, softplus, CustomOp, Tape, Tensor, Var};

/// Floor added to softplus scale outputs.
pub const SCALE_FLOOR: f64 = 1e-3;
/// Correlation outputs are `RHO_LIMIT * tanh(raw)`.
pub const RHO_LIMIT: f64 = 0.999;
const LOG_2PI: f64 = 1.837_877_066_409_345_5;

/// Number of raw head outputs for `k` components:
/// `[logits | mu_x | mu_y | raw_sx | raw_sy | raw_rho]`, each block `k` long.
pub fn raw_len(k: usize) -> usize {
    6 * k
}

/// Bivariate Gaussian mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmParams {
    pub weights: Vec<f64>,
    pub means: Vec<[f64; 2]>,
    pub scales: Vec<[f64; 2]>,
    pub rho: Vec<f64>,
}

impl GmmParams {
    pub fn new(weights: Vec<f64>, means: Vec<[f64; 2]>, scales: Vec<[f64; 2]>, rho: Vec<f64>) -> Result<Self, MdnError> {
        let g = Self { weights, means, scales, rho };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), MdnError> {
        let k = self.weights.len();
        if k == 0 || self.means.len() != k || self.scales.len() != k || self.rho.len() != k {
            return Err(MdnError::InvalidGmm("component arrays differ in length or are empty".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 || self.weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(MdnError::InvalidGmm(format!("weights sum to {total}")));
        }
        if self.scales.iter().flatten().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(MdnError::InvalidGmm("scales must be positive".into()));
        }
        if self.rho.iter().any(|&r| !(r.abs() < 1.0)) {
            return Err(MdnError::InvalidGmm("correlations must lie in (-1, 1)".into()));
        }
        if self.means.iter().flatten().any(|m| !m.is_finite()) {
            return Err(MdnError::InvalidGmm("non-finite mean".into()));
        }
        Ok(())
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    /// Maps raw head outputs through softmax, softplus-plus-floor and scaled tanh.
    pub fn from_raw(raw: &[f64]) -> Self {
        assert!(raw.len() % 6 == 0 && !raw.is_empty(), "raw GMM output length {} is not 6k", raw.len());
        let k = raw.len() / 6;
        let lse = log_sum_exp(&raw[..k]);
        Self {
            weights: raw[..k].iter().map(|&l| (l - lse).exp()).collect(),
            means: (0..k).map(|j| [raw[k + j], raw[2 * k + j]]).collect(),
            scales: (0..k).map(|j| [softplus(raw[3 * k + j]) + SCALE_FLOOR, softplus(raw[4 * k + j]) + SCALE_FLOOR]).collect(),
            rho: (0..k).map(|j| RHO_LIMIT * raw[5 * k + j].tanh()).collect(),
        }
    }

    fn component_log_pdf(&self, j: usize, p: [f64; 2]) -> f64 {
        let [sx, sy] = self.scales[j];
        let r = self.rho[j];
        let zx = (p[0] - self.means[j][0]) / sx;
        let zy = (p[1] - self.means[j][1]) / sy;
        let om = 1.0 - r * r;
        let q = (zx * zx + zy * zy - 2.0 * r * zx * zy) / om;
        -LOG_2PI - sx.ln() - sy.ln() - 0.5 * om.ln() - 0.5 * q
    }

    /// Log density at `p`, by log-sum-exp over components.
    pub fn log_pdf(&self, p: [f64; 2]) -> f64 {
        let terms: Vec<f64> = (0..self.components())
            .map(|j| self.weights[j].ln() + self.component_log_pdf(j, p))
            .collect();
        log_sum_exp(&terms)
    }

    /// Draws with temperature `t`: the component from `softmax(log w / t)`
    /// and the offset with scales multiplied by `sqrt(t)`.
    pub fn sample(&self, t: f64, rng: &mut impl Rng) -> [f64; 2] {
        assert!(t > 0.0, "temperature must be positive");
        let j = self.sample_component(t, rng);
        let [mx, my] = self.means[j];
        let [sx, sy] = self.scales[j];
        let r = self.rho[j];
        let (n1, n2): (f64, f64) = (StandardNormal.sample(rng), StandardNormal.sample(rng));
        let st = t.sqrt();
        let x = mx + st * sx * n1;
        let y = my + st * sy * (r * n1 + (1.0 - r * r).sqrt() * n2);
        [x, y]
    }

    /// Tempered component distribution `softmax(log w / t)`.
    pub fn tempered_weights(&self, t: f64) -> Vec<f64> {
        let logits: Vec<f64> = self.weights.iter().map(|&w| w.ln() / t).collect();
        let lse = log_sum_exp(&logits);
        logits.iter().map(|&l| (l - lse).exp()).collect()
    }

    pub fn sample_component(&self, t: f64, rng: &mut impl Rng) -> usize {
        let w = self.tempered_weights(t);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (j, &p) in w.iter().enumerate() {
            acc += p;
            if u < acc {
                return j;
            }
        }
        // Round-off leaves `acc` a hair below 1; take the last live component.
        w.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }
}

/// Per-row log densities of a batch of raw GMM outputs `[b, 6k]` at points
/// `[b, 2]`, with gradients to both.
struct GmmLogPdfOp {
    k: usize,
}

struct RowTerms {
    value: f64,
    /// d value / d raw, length 6k.
    d_raw: Vec<f64>,
    d_point: [f64; 2],
}

fn row_terms(raw: &[f64], p: [f64; 2], k: usize, want_grad: bool) -> RowTerms {
    let logits = &raw[..k];
    let lse_logit = log_sum_exp(logits);
    let mut comp = vec![0.0; k];
    let mut cache = Vec::with_capacity(if want_grad { k } else { 0 });
    for j in 0..k {
        let (a, b, c) = (raw[3 * k + j], raw[4 * k + j], raw[5 * k + j]);
        let sx = softplus(a) + SCALE_FLOOR;
        let sy = softplus(b) + SCALE_FLOOR;
        let th = c.tanh();
        let r = RHO_LIMIT * th;
        let zx = (p[0] - raw[k + j]) / sx;
        let zy = (p[1] - raw[2 * k + j]) / sy;
        let om = 1.0 - r * r;
        let q = (zx * zx + zy * zy - 2.0 * r * zx * zy) / om;
        comp[j] = logits[j] - lse_logit - LOG_2PI - sx.ln() - sy.ln() - 0.5 * om.ln() - 0.5 * q;
        if want_grad {
            cache.push((sx, sy, th, r, zx, zy, om, q, a, b));
        }
    }
    let value = log_sum_exp(&comp);
    if !want_grad {
        return RowTerms { value, d_raw: Vec::new(), d_point: [0.0; 2] };
    }
    let mut d_raw = vec![0.0; 6 * k];
    let mut d_point = [0.0; 2];
    for j in 0..k {
        let resp = (comp[j] - value).exp();
        let prior = (logits[j] - lse_logit).exp();
        d_raw[j] = resp - prior;
        let (sx, sy, th, r, zx, zy, om, q, a, b) = cache[j];
        let gx = (zx - r * zy) / om;
        let gy = (zy - r * zx) / om;
        d_raw[k + j] = resp * gx / sx;
        d_raw[2 * k + j] = resp * gy / sy;
        d_point[0] -= resp * gx / sx;
        d_point[1] -= resp * gy / sy;
        d_raw[3 * k + j] = resp * (-1.0 + zx * gx) / sx * sigmoid(a);
        d_raw[4 * k + j] = resp * (-1.0 + zy * gy) / sy * sigmoid(b);
        let d_rho = (r + zx * zy - r * q) / om;
        d_raw[5 * k + j] = resp * d_rho * RHO_LIMIT * (1.0 - th * th);
    }
    RowTerms { value, d_raw, d_point }
}

impl CustomOp for GmmLogPdfOp {
    fn name(&self) -> &'static str {
        "gmm_log_pdf"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (raw, pts) = (inputs[0], inputs[1]);
        let w = 6 * self.k;
        let rows = pts.len() / 2;
        let mut g_raw = vec![0.0; raw.len()];
        let mut g_pts = vec![0.0; pts.len()];
        for b in 0..rows {
            let g = grad.data()[b];
            if g == 0.0 {
                continue;
            }
            let p = [pts.data()[2 * b], pts.data()[2 * b + 1]];
            let t = row_terms(&raw.data()[b * w..(b + 1) * w], p, self.k, true);
            for (dst, d) in g_raw[b * w..(b + 1) * w].iter_mut().zip(&t.d_raw) {
                *dst = g * d;
            }
            g_pts[2 * b] = g * t.d_point[0];
            g_pts[2 * b + 1] = g * t.d_point[1];
        }
        vec![
            Some(Tensor::new(raw.shape().to_vec(), g_raw).expect("raw grad")),
            Some(Tensor::new(pts.shape().to_vec(), g_pts).expect("point grad")),
        ]
    }
}

/// Log densities `[b]` of raw mixture outputs `[b, 6k]` at points `[b, 2]`.
pub fn gmm_log_pdf_var<'t>(tape: &'t Tape, raw: Var<'t>, points: Var<'t>) -> Result<Var<'t>, MdnError> {
    let (rs, ps) = (raw.shape(), points.shape());
    if rs.len() != 2 || ps.len() != 2 || ps[1] != 2 || rs[0] != ps[0] || rs[1] % 6 != 0 || rs[1] == 0 {
        return Err(MdnError::Shape(format!("gmm_log_pdf: raw {rs:?} and points {ps:?}")));
    }
    let k = rs[1] / 6;
    let (rv, pv) = (raw.value(), points.value());
    let values: Vec<f64> = (0..rs[0])
        .map(|b| row_terms(&rv.data()[b * 6 * k..(b + 1) * 6 * k], [pv.data()[2 * b], pv.data()[2 * b + 1]], k, false).value)
        .collect();
    Ok(tape.custom(&[raw, points], Tensor::vector(values), Box::new(GmmLogPdfOp { k })))
}
