//! Autoregressive prior over character types.
//!
//! A type is drawn one stroke at a time: a start location from the
//! location model given the canvas, a trajectory of offsets from the stroke
//! model, then the canvas is updated with [`f_render`] and the termination
//! model decides whether to continue. Scoring replays the same loop with
//! the type's own strokes (teacher forcing), so densities are exact.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{sigmoid, AdError, Tape, Tensor, Var};
use crate::geometry::{decode_stroke, encode_stroke, GeometryError, Point, Spline, StrokeEncoding};
use crate::mdn::{canvas_batch, gmm_log_pdf_var, ArchConfig, Bound, GmmParams, MdnError, NetworkWeights};
use crate::optim::{clip_global_norm, Adam};
use crate::render::{f_render, f_render_var, Canvas};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TypeError {
    #[error("invalid character type: {0}")]
    Invalid(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite loss or gradient in epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Mdn(#[from] MdnError),
    #[error(transparent)]
    Autodiff(#[from] AdError),
}

type R<T> = Result<T, TypeError>;

/// Safety caps on the generative loop.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorConfig {
    pub max_strokes: usize,
    pub max_steps: usize,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self { max_strokes: 10, max_steps: 50 }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> R<()> {
        if self.max_strokes == 0 || self.max_steps == 0 {
            return Err(TypeError::Config("max_strokes and max_steps must be positive".into()));
        }
        Ok(())
    }
}

/// `kappa` strokes, each a start location and relative control points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CharacterType {
    pub strokes: Vec<StrokeEncoding>,
}

impl CharacterType {
    pub fn new(strokes: Vec<StrokeEncoding>) -> R<Self> {
        let t = Self { strokes };
        t.validate()?;
        Ok(t)
    }

    pub fn from_splines(splines: &[Spline]) -> R<Self> {
        Self::new(splines.iter().map(encode_stroke).collect())
    }

    pub fn validate(&self) -> R<()> {
        if self.strokes.is_empty() {
            return Err(TypeError::Invalid("a type needs at least one stroke".into()));
        }
        for (i, s) in self.strokes.iter().enumerate() {
            s.validate()?;
            if s.relative.len() < 2 {
                return Err(TypeError::Invalid(format!("stroke {i} has no offsets")));
            }
            if !s.start.is_finite() || s.relative.iter().any(|p| !p.is_finite()) {
                return Err(TypeError::Invalid(format!("stroke {i} has non-finite coordinates")));
            }
        }
        Ok(())
    }

    /// Validity plus the generative caps.
    pub fn validate_for(&self, cfg: &PriorConfig) -> R<()> {
        self.validate()?;
        if self.kappa() > cfg.max_strokes {
            return Err(TypeError::Invalid(format!("{} strokes exceeds the cap of {}", self.kappa(), cfg.max_strokes)));
        }
        if let Some(i) = self.strokes.iter().position(|s| s.offsets.len() > cfg.max_steps) {
            return Err(TypeError::Invalid(format!("stroke {i} has more than {} offsets", cfg.max_steps)));
        }
        Ok(())
    }

    pub fn kappa(&self) -> usize {
        self.strokes.len()
    }

    pub fn splines(&self) -> Vec<Spline> {
        self.strokes.iter().map(|s| decode_stroke(s).expect("validated encoding")).collect()
    }

    pub fn control_points(&self) -> Vec<Vec<Point>> {
        self.strokes.iter().map(|s| s.absolute()).collect()
    }

    /// Canvases `C_0..C_kappa` built from the type's own strokes.
    pub fn canvases(&self, size: crate::render::CanvasSize) -> Vec<Canvas> {
        let mut out = vec![Canvas::blank(size)];
        for s in &self.strokes {
            let next = f_render(s, out.last().expect("nonempty"));
            out.push(next);
        }
        out
    }
}

/// Log density split by factor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TypeScore {
    pub location: f64,
    pub trajectory: f64,
    pub stop: f64,
    pub termination: f64,
}

impl TypeScore {
    pub fn total(&self) -> f64 {
        self.location + self.trajectory + self.stop + self.termination
    }
}

/// One stroke to score: start `[1, 2]` and relative points `[d + 1, 2]` in
/// pixels, the encoded canvas it was drawn onto and the type it belongs to.
struct StrokeRow<'t> {
    start: Var<'t>,
    rel: Var<'t>,
    canvas: usize,
    ty: usize,
}

/// A termination factor read from canvas `canvas` (forced stops are omitted).
struct TermRow {
    canvas: usize,
    stop: bool,
    ty: usize,
}

/// Per-type factor sums, each `[n_types]`.
struct Scored<'t> {
    location: Var<'t>,
    trajectory: Var<'t>,
    stop: Var<'t>,
    termination: Var<'t>,
}

impl<'t> Scored<'t> {
    fn total(&self) -> R<Var<'t>> {
        Ok(self.location.add(self.trajectory)?.add(self.stop)?.add(self.termination)?)
    }

    fn scores(&self) -> Vec<TypeScore> {
        let (l, t, s, e) = (self.location.value(), self.trajectory.value(), self.stop.value(), self.termination.value());
        (0..l.len())
            .map(|i| TypeScore { location: l.data()[i], trajectory: t.data()[i], stop: s.data()[i], termination: e.data()[i] })
            .collect()
    }
}

/// Sums per-row values `[rows]` into per-type buckets `[n_types]`.
fn per_type<'t>(tape: &'t Tape, values: Var<'t>, owner: &[usize], n_types: usize) -> R<Var<'t>> {
    let mut m = vec![0.0; n_types * owner.len()];
    for (r, &t) in owner.iter().enumerate() {
        m[t * owner.len() + r] = 1.0;
    }
    let m = tape.constant(Tensor::matrix(n_types, owner.len(), m)?);
    Ok(m.matmul(values.reshape(&[owner.len(), 1])?)?.reshape(&[n_types])?)
}

/// `log sigmoid(-sign * logit)`: sign +1 scores "continue", -1 scores "stop".
fn bernoulli_log_p<'t>(tape: &'t Tape, logits: Var<'t>, signs: Vec<f64>) -> R<Var<'t>> {
    let s = tape.constant(Tensor::vector(signs));
    Ok(logits.mul(s)?.softplus().neg())
}

fn evaluate<'t>(
    b: &Bound<'t>,
    cfg: &PriorConfig,
    enc: Var<'t>,
    rows: &[StrokeRow<'t>],
    terms: &[TermRow],
    n_types: usize,
) -> R<Scored<'t>> {
    let tape = b.tape();
    let arch = b.arch();
    let scale = arch.coord_scale();
    let center = arch.canvas.center();
    let jac = arch.log_jacobian();
    let nb = rows.len();
    let owner: Vec<usize> = rows.iter().map(|r| r.ty).collect();
    let canvas_idx: Vec<usize> = rows.iter().map(|r| r.canvas).collect();

    let starts_px = tape.concat(&rows.iter().map(|r| r.start).collect::<Vec<_>>(), 0)?;
    let center_t = tape.constant(Tensor::matrix(1, 2, vec![center.x, center.y])?);
    let starts = starts_px.sub(center_t)?.scale(1.0 / scale);
    let loc_raw = b.location_raw(enc)?.gather(&canvas_idx)?;
    let location = gmm_log_pdf_var(tape, loc_raw, starts)?.add_scalar(jac);

    let lens: Vec<usize> = rows.iter().map(|r| r.rel.shape()[0] - 1).collect();
    let deltas = rows
        .iter()
        .zip(&lens)
        .map(|(r, &d)| Ok(r.rel.slice(0, 1, d + 1)?.sub(r.rel.slice(0, 0, d)?)?.scale(1.0 / scale)))
        .collect::<R<Vec<_>>>()?;
    let steps = lens.iter().copied().max().unwrap_or(0);
    let zero_row = tape.constant(Tensor::zeros(&[1, 2]));
    let mut state = b.stroke_start(b.grid(enc)?.gather(&canvas_idx)?, starts)?;
    let mut prev = tape.constant(Tensor::zeros(&[nb, 2]));
    let mut trajectory: Option<Var<'t>> = None;
    let mut stop: Option<Var<'t>> = None;
    for t in 0..steps {
        let (next, raw, stop_logit) = b.stroke_step(&state, starts, prev)?;
        let target_rows = deltas
            .iter()
            .zip(&lens)
            .map(|(d, &n)| if t < n { d.slice(0, t, t + 1) } else { Ok(zero_row) })
            .collect::<Result<Vec<_>, _>>()?;
        let target = tape.concat(&target_rows, 0)?;
        let mask = tape.constant(Tensor::vector(lens.iter().map(|&n| if t < n { 1.0 } else { 0.0 }).collect()));
        let lp = gmm_log_pdf_var(tape, raw, target)?.add_scalar(jac).mul(mask)?;
        // Continue while more offsets follow; stop at the last one unless the cap forces it.
        let signs: Vec<f64> = lens
            .iter()
            .map(|&n| if t + 1 < n { 1.0 } else if t + 1 == n && n < cfg.max_steps { -1.0 } else { 0.0 })
            .collect();
        let active = tape.constant(Tensor::vector(signs.iter().map(|s| s.abs()).collect()));
        let sp = bernoulli_log_p(tape, stop_logit.reshape(&[nb])?, signs)?.mul(active)?;
        trajectory = Some(match trajectory {
            Some(acc) => acc.add(lp)?,
            None => lp,
        });
        stop = Some(match stop {
            Some(acc) => acc.add(sp)?,
            None => sp,
        });
        state = next;
        prev = target;
    }
    let zeros_rows = || tape.constant(Tensor::zeros(&[nb]));
    let trajectory = trajectory.unwrap_or_else(zeros_rows);
    let stop = stop.unwrap_or_else(zeros_rows);

    let termination = if terms.is_empty() {
        tape.constant(Tensor::zeros(&[n_types]))
    } else {
        let idx: Vec<usize> = terms.iter().map(|t| t.canvas).collect();
        let logits = b.termination_logit(enc)?.gather(&idx)?.reshape(&[terms.len()])?;
        let lp = bernoulli_log_p(tape, logits, terms.iter().map(|t| if t.stop { -1.0 } else { 1.0 }).collect())?;
        per_type(tape, lp, &terms.iter().map(|t| t.ty).collect::<Vec<_>>(), n_types)?
    };
    Ok(Scored {
        location: per_type(tape, location, &owner, n_types)?,
        trajectory: per_type(tape, trajectory, &owner, n_types)?,
        stop: per_type(tape, stop, &owner, n_types)?,
        termination,
    })
}

fn point_row(tape: &Tape, p: Point) -> Var<'_> {
    tape.constant(Tensor::matrix(1, 2, vec![p.x, p.y]).expect("1x2"))
}

fn points_const<'t>(tape: &'t Tape, pts: &[Point]) -> Var<'t> {
    tape.constant(Tensor::matrix(pts.len(), 2, pts.iter().flat_map(|p| [p.x, p.y]).collect()).expect("nx2"))
}

/// Location, stroke and termination models with their generative caps.
#[derive(Clone, Debug, PartialEq)]
pub struct TypePrior {
    pub weights: NetworkWeights,
    pub config: PriorConfig,
}

impl TypePrior {
    pub fn new(weights: NetworkWeights, config: PriorConfig) -> R<Self> {
        config.validate()?;
        Ok(Self { weights, config })
    }

    pub fn init(arch: &ArchConfig, config: PriorConfig, rng: &mut impl Rng) -> R<Self> {
        Self::new(NetworkWeights::init(arch, rng)?, config)
    }

    pub fn arch(&self) -> &ArchConfig {
        self.weights.arch()
    }

    /// Teacher-forced rows for a batch of types on a shared canvas tensor.
    /// Canvas row 0 is the blank canvas.
    fn layout<'t>(&self, tape: &'t Tape, types: &[&CharacterType]) -> R<(Tensor, Vec<StrokeRow<'t>>, Vec<TermRow>)> {
        let size = self.arch().canvas;
        let blank = Canvas::blank(size);
        let mut canvases: Vec<Canvas> = vec![blank];
        let mut rows = Vec::new();
        let mut terms = Vec::new();
        for (ty, t) in types.iter().enumerate() {
            t.validate_for(&self.config)?;
            let mut cur = 0;
            for (i, s) in t.strokes.iter().enumerate() {
                rows.push(StrokeRow { start: point_row(tape, s.start), rel: points_const(tape, &s.relative), canvas: cur, ty });
                let next = f_render(s, &canvases[cur]);
                canvases.push(next);
                cur = canvases.len() - 1;
                let last = i + 1 == t.kappa();
                if !(last && t.kappa() == self.config.max_strokes) {
                    terms.push(TermRow { canvas: cur, stop: last, ty });
                }
            }
        }
        let refs: Vec<&Canvas> = canvases.iter().collect();
        Ok((canvas_batch(&refs), rows, terms))
    }

    fn scored_batch<'t>(&self, b: &Bound<'t>, types: &[&CharacterType]) -> R<Scored<'t>> {
        let tape = b.tape();
        let (canvases, rows, terms) = self.layout(tape, types)?;
        let enc = b.encode(tape.constant(canvases))?;
        evaluate(b, &self.config, enc, &rows, &terms, types.len())
    }

    /// Exact log density of `ty`, split by factor.
    pub fn score(&self, ty: &CharacterType) -> R<TypeScore> {
        Ok(self.score_batch(&[ty])?[0])
    }

    pub fn log_p(&self, ty: &CharacterType) -> R<f64> {
        Ok(self.score(ty)?.total())
    }

    /// Scores several types in one batched pass.
    pub fn score_batch(&self, types: &[&CharacterType]) -> R<Vec<TypeScore>> {
        if types.is_empty() {
            return Ok(Vec::new());
        }
        let tape = Tape::new();
        let b = self.weights.bind(&tape, false);
        Ok(self.scored_batch(&b, types)?.scores())
    }

    /// Differentiable log density. `starts[i]` is `[1, 2]` and `rels[i]` is
    /// `[d_i + 1, 2]` in pixels; canvases are rebuilt on the tape, so the
    /// result depends on every coordinate through every model input.
    pub fn log_p_var<'t>(&self, b: &Bound<'t>, starts: &[Var<'t>], rels: &[Var<'t>]) -> R<Var<'t>> {
        let tape = b.tape();
        let kappa = starts.len();
        if kappa == 0 || kappa != rels.len() {
            return Err(TypeError::Invalid(format!("{} starts for {} trajectories", kappa, rels.len())));
        }
        if kappa > self.config.max_strokes {
            return Err(TypeError::Invalid(format!("{kappa} strokes exceeds the cap of {}", self.config.max_strokes)));
        }
        let size = self.arch().canvas;
        let mut canvases = vec![tape.constant(Canvas::blank(size).to_tensor())];
        let mut rows = Vec::with_capacity(kappa);
        let mut terms = Vec::with_capacity(kappa);
        for i in 0..kappa {
            let d = rels[i].shape()[0];
            if d < 2 || d - 1 > self.config.max_steps {
                return Err(TypeError::Invalid(format!("stroke {i} has {} relative points", d)));
            }
            rows.push(StrokeRow { start: starts[i], rel: rels[i], canvas: i, ty: 0 });
            let abs = rels[i].add(starts[i])?;
            canvases.push(f_render_var(tape, canvases[i], abs, size));
            let last = i + 1 == kappa;
            if !(last && kappa == self.config.max_strokes) {
                terms.push(TermRow { canvas: i + 1, stop: last, ty: 0 });
            }
        }
        let stacked = tape.concat(&canvases, 0)?.reshape(&[kappa + 1, 1, size.height, size.width])?;
        let enc = b.encode(stacked)?;
        Ok(evaluate(b, &self.config, enc, &rows, &terms, 1)?.total()?.reshape(&[])?)
    }

    /// Scores many orderings and directions of one stroke set in a single
    /// batch. Each configuration lists `(stroke index, reversed)` in drawing
    /// order. Canvases depend only on which strokes have been drawn, so they
    /// are rendered and encoded once per stroke subset.
    pub fn score_configurations(&self, strokes: &[Spline], configs: &[Vec<(usize, bool)>]) -> R<Vec<f64>> {
        if configs.is_empty() {
            return Ok(Vec::new());
        }
        if strokes.len() > 63 {
            return Err(TypeError::Invalid(format!("{} strokes is too many to enumerate", strokes.len())));
        }
        let size = self.arch().canvas;
        let encodings: Vec<[StrokeEncoding; 2]> =
            strokes.iter().map(|s| [encode_stroke(s), encode_stroke(&s.reversed())]).collect();
        let tape = Tape::new();
        let b = self.weights.bind(&tape, false);
        let mut canvas_of: HashMap<u64, usize> = HashMap::from([(0, 0)]);
        let mut canvases = vec![Canvas::blank(size)];
        let mut rows = Vec::new();
        let mut terms = Vec::new();
        for (ty, cfg) in configs.iter().enumerate() {
            let t = CharacterType::new(cfg.iter().map(|&(i, rev)| encodings[i][rev as usize].clone()).collect())?;
            t.validate_for(&self.config)?;
            let mut mask = 0u64;
            for (pos, (&(i, _), s)) in cfg.iter().zip(&t.strokes).enumerate() {
                let from = canvas_of[&mask];
                rows.push(StrokeRow { start: point_row(&tape, s.start), rel: points_const(&tape, &s.relative), canvas: from, ty });
                if mask & (1 << i) != 0 {
                    return Err(TypeError::Invalid(format!("stroke {i} repeated in a configuration")));
                }
                mask |= 1 << i;
                let to = match canvas_of.get(&mask) {
                    Some(&c) => c,
                    None => {
                        let next = f_render(s, &canvases[from]);
                        canvases.push(next);
                        canvas_of.insert(mask, canvases.len() - 1);
                        canvases.len() - 1
                    }
                };
                let last = pos + 1 == cfg.len();
                if !(last && cfg.len() == self.config.max_strokes) {
                    terms.push(TermRow { canvas: to, stop: last, ty });
                }
            }
        }
        let refs: Vec<&Canvas> = canvases.iter().collect();
        let enc = b.encode(tape.constant(canvas_batch(&refs)))?;
        Ok(evaluate(&b, &self.config, enc, &rows, &terms, configs.len())?.scores().iter().map(|s| s.total()).collect())
    }

    /// Samples a type, tempering the location and offset mixtures by
    /// `temperature`. Stop and termination events are drawn untempered.
    pub fn generate(&self, temperature: f64, rng: &mut impl Rng) -> R<CharacterType> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(TypeError::Config(format!("temperature {temperature} must be positive")));
        }
        let arch = self.arch().clone();
        let scale = arch.coord_scale();
        let mut canvas = Canvas::blank(arch.canvas);
        let mut strokes = Vec::new();
        loop {
            let tape = Tape::new();
            let b = self.weights.bind(&tape, false);
            let enc = b.encode(tape.constant(canvas_batch(&[&canvas])))?;
            let loc = GmmParams::from_raw(b.location_raw(enc)?.value().data());
            let yn = loc.sample(temperature, rng);
            let start = tape.constant(Tensor::matrix(1, 2, yn.to_vec())?);
            let mut state = b.stroke_start(b.grid(enc)?, start)?;
            let mut prev = [0.0, 0.0];
            let mut rel = vec![Point::ZERO];
            for t in 1..=self.config.max_steps {
                let pv = tape.constant(Tensor::matrix(1, 2, prev.to_vec())?);
                let (next, raw, stop) = b.stroke_step(&state, start, pv)?;
                let dn = GmmParams::from_raw(raw.value().data()).sample(temperature, rng);
                let last = *rel.last().expect("nonempty");
                rel.push(last + Point::new(dn[0] * scale, dn[1] * scale));
                prev = dn;
                state = next;
                if t == self.config.max_steps || rng.gen::<f64>() < sigmoid(stop.item()) {
                    break;
                }
            }
            let stroke = StrokeEncoding::from_relative(arch.denormalize(yn), rel)?;
            canvas = f_render(&stroke, &canvas);
            strokes.push(stroke);
            if strokes.len() == self.config.max_strokes {
                break;
            }
            let tape = Tape::new();
            let b = self.weights.bind(&tape, false);
            let enc = b.encode(tape.constant(canvas_batch(&[&canvas])))?;
            if rng.gen::<f64>() < sigmoid(b.termination_logit(enc)?.item()) {
                break;
            }
        }
        CharacterType::new(strokes)
    }

    /// Mean negative log density over `types`, in batches.
    pub fn mean_nll(&self, types: &[CharacterType], batch_size: usize) -> R<f64> {
        if types.is_empty() {
            return Err(TypeError::EmptyCorpus);
        }
        let mut total = 0.0;
        for chunk in types.chunks(batch_size.max(1)) {
            let refs: Vec<&CharacterType> = chunk.iter().collect();
            total -= self.score_batch(&refs)?.iter().map(|s| s.total()).sum::<f64>();
        }
        Ok(total / types.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 32, learning_rate: 1e-3, clip_norm: 5.0, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> R<()> {
        if self.batch_size == 0 {
            return Err(TypeError::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TypeError::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(TypeError::Config(format!("clip_norm {} must be positive", self.clip_norm)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_nll: f64,
    pub heldout_nll: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_train_nll: f64,
    pub initial_heldout_nll: Option<f64>,
    pub epochs: Vec<EpochStats>,
}

/// Sorts by serialized content so training does not depend on input order.
fn canonical_order(types: &[CharacterType]) -> Vec<CharacterType> {
    let mut keyed: Vec<(String, &CharacterType)> =
        types.iter().map(|t| (serde_json::to_string(t).expect("serializable type"), t)).collect();
    keyed.sort_by(|a, b| a.0.cmp(&b.0));
    keyed.into_iter().map(|(_, t)| t.clone()).collect()
}

/// Maximum-likelihood training with Adam on the mean negative log density.
/// `on_epoch` sees each epoch's statistics as they are produced.
pub fn train_mle(
    prior: &mut TypePrior,
    train: &[CharacterType],
    heldout: &[CharacterType],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> R<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TypeError::EmptyCorpus);
    }
    for t in train.iter().chain(heldout) {
        t.validate_for(&prior.config)?;
    }
    let mut order = canonical_order(train);
    let names: Vec<String> = prior.weights.iter().map(|(k, _)| k.to_string()).collect();
    let shapes: Vec<Vec<usize>> = prior.weights.iter().map(|(_, v)| v.shape().to_vec()).collect();
    let mut master: Vec<Vec<f64>> = prior.weights.iter().map(|(_, v)| v.data().to_vec()).collect();
    let mut adam = Adam::new(&master.iter().map(|m| m.len()).collect::<Vec<_>>());
    let heldout_nll = |p: &TypePrior| if heldout.is_empty() { Ok(None) } else { p.mean_nll(heldout, 64).map(Some) };
    let report_init_train = prior.mean_nll(&order, 64)?;
    let mut report = TrainReport { initial_train_nll: report_init_train, initial_heldout_nll: heldout_nll(prior)?, epochs: Vec::new() };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let tape = Tape::new();
            let b = prior.weights.bind(&tape, true);
            let refs: Vec<&CharacterType> = chunk.iter().collect();
            let loss = prior.scored_batch(&b, &refs)?.total()?.sum().scale(-1.0 / chunk.len() as f64);
            let value = loss.item();
            if !value.is_finite() {
                return Err(TypeError::NonFinite { epoch, batch: bi });
            }
            let vars: Vec<Var<'_>> = names.iter().map(|n| b.var(n)).collect();
            let mut grads: Vec<Vec<f64>> =
                tape.gradient(loss, &vars)?.into_iter().map(|g| g.into_data()).collect();
            if grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(TypeError::NonFinite { epoch, batch: bi });
            }
            clip_global_norm(&mut grads, cfg.clip_norm);
            let mut params: Vec<&mut [f64]> = master.iter_mut().map(|m| m.as_mut_slice()).collect();
            let grefs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
            adam.update(&mut params, &grefs, cfg.learning_rate, &[]);
            for ((name, shape), m) in names.iter().zip(&shapes).zip(&master) {
                prior.weights.set(name, Tensor::new(shape.clone(), m.clone())?)?;
            }
            sum += value * chunk.len() as f64;
        }
        let stats = EpochStats { epoch, train_nll: sum / order.len() as f64, heldout_nll: heldout_nll(prior)? };
        on_epoch(&stats);
        report.epochs.push(stats);
    }
    Ok(report)
}
