use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::gmm::raw_len;
use super::MdnError;
use crate::autodiff::{Tape, Tensor, Var};
use crate::geometry::Point;
use crate::render::{Canvas, CanvasSize};

/// Layer sizes shared by all heads.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub canvas: CanvasSize,
    pub channels: [usize; 3],
    pub location_hidden: usize,
    pub termination_hidden: usize,
    pub lstm_hidden: usize,
    pub attention_dim: usize,
    pub components: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            canvas: CanvasSize::default(),
            channels: [16, 32, 64],
            location_hidden: 128,
            termination_hidden: 64,
            lstm_hidden: 256,
            attention_dim: 64,
            components: 20,
        }
    }
}

const KERNEL: usize = 3;
const STRIDE: usize = 2;
const PAD: usize = 1;

fn conv_out(n: usize) -> usize {
    (n + 2 * PAD - KERNEL) / STRIDE + 1
}

impl ArchConfig {
    /// Half-width encoder and recurrent cell for the toy corpus, where the
    /// default sizes make per-image inference the bottleneck.
    pub fn toy() -> Self {
        Self { channels: [8, 16, 32], lstm_hidden: 128, attention_dim: 32, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), MdnError> {
        let c = self.canvas;
        if c.width != c.height || c.width < 8 {
            return Err(MdnError::Config(format!("canvas must be square and at least 8 px, got {}x{}", c.width, c.height)));
        }
        let sizes = [
            ("channels", self.channels.iter().copied().min().unwrap_or(0)),
            ("location_hidden", self.location_hidden),
            ("termination_hidden", self.termination_hidden),
            ("lstm_hidden", self.lstm_hidden),
            ("attention_dim", self.attention_dim),
            ("components", self.components),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(MdnError::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Spatial size of the encoder output.
    pub fn grid(&self) -> (usize, usize) {
        let (mut h, mut w) = (self.canvas.height, self.canvas.width);
        for _ in 0..3 {
            h = conv_out(h);
            w = conv_out(w);
        }
        (h, w)
    }

    pub fn grid_cells(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn feature_len(&self) -> usize {
        self.channels[2] * self.grid_cells()
    }

    /// Pixels per normalized unit; network coordinates are `(p - center) / scale`.
    pub fn coord_scale(&self) -> f64 {
        (self.canvas.width as f64 - 1.0) / 2.0
    }

    pub fn normalize(&self, p: Point) -> [f64; 2] {
        let c = self.canvas.center();
        let s = self.coord_scale();
        [(p.x - c.x) / s, (p.y - c.y) / s]
    }

    pub fn denormalize(&self, u: [f64; 2]) -> Point {
        let c = self.canvas.center();
        let s = self.coord_scale();
        Point::new(c.x + s * u[0], c.y + s * u[1])
    }

    /// Added to a normalized 2D log density to express it per square pixel.
    pub fn log_jacobian(&self) -> f64 {
        -2.0 * self.coord_scale().ln()
    }

    /// Every weight tensor with its shape, in a fixed order.
    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        let [c1, c2, c3] = self.channels;
        let f = self.feature_len();
        let k6 = raw_len(self.components);
        let (lh, th, h, a) = (self.location_hidden, self.termination_hidden, self.lstm_hidden, self.attention_dim);
        let v = |s: &str, d: &[usize]| (s.to_string(), d.to_vec());
        vec![
            v("enc.conv1.w", &[c1, 1, KERNEL, KERNEL]),
            v("enc.conv1.b", &[c1]),
            v("enc.conv2.w", &[c2, c1, KERNEL, KERNEL]),
            v("enc.conv2.b", &[c2]),
            v("enc.conv3.w", &[c3, c2, KERNEL, KERNEL]),
            v("enc.conv3.b", &[c3]),
            v("loc.fc1.w", &[f, lh]),
            v("loc.fc1.b", &[lh]),
            v("loc.fc2.w", &[lh, k6]),
            v("loc.fc2.b", &[k6]),
            v("term.fc1.w", &[f, th]),
            v("term.fc1.b", &[th]),
            v("term.fc2.w", &[th, 1]),
            v("term.fc2.b", &[1]),
            v("stroke.init.w", &[c3 + 2, h]),
            v("stroke.init.b", &[h]),
            v("stroke.attn.wf", &[c3, a]),
            v("stroke.attn.wh", &[h, a]),
            v("stroke.attn.b", &[a]),
            v("stroke.attn.v", &[a, 1]),
            v("stroke.lstm.w", &[c3 + 4 + h, 4 * h]),
            v("stroke.lstm.b", &[4 * h]),
            v("stroke.out.w", &[h, k6 + 1]),
            v("stroke.out.b", &[k6 + 1]),
        ]
    }
}

/// Named weight tensors for the location, stroke and termination models.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkWeights {
    arch: ArchConfig,
    tensors: BTreeMap<String, Arc<Tensor>>,
}

fn to_f32_grid(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = *v as f32 as f64;
    }
}

impl NetworkWeights {
    /// Glorot-uniform weights, zero biases, forget-gate bias 1 and output
    /// layers scaled down so initial mixtures are broad and centered.
    pub fn init(arch: &ArchConfig, rng: &mut impl Rng) -> Result<Self, MdnError> {
        arch.validate()?;
        let h = arch.lstm_hidden;
        let mut tensors = BTreeMap::new();
        for (name, shape) in arch.shapes() {
            let n: usize = shape.iter().product();
            let mut data = vec![0.0; n];
            if name.ends_with(".w") || name.ends_with(".wf") || name.ends_with(".wh") || name.ends_with(".v") {
                let (fan_in, fan_out) = if shape.len() == 4 {
                    let rf = shape[2] * shape[3];
                    (shape[1] * rf, shape[0] * rf)
                } else {
                    (shape[0], shape[1])
                };
                let mut bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                if name == "loc.fc2.w" || name == "stroke.out.w" {
                    bound *= 0.1;
                }
                for v in data.iter_mut() {
                    *v = rng.gen_range(-bound..bound);
                }
            }
            if name == "stroke.lstm.b" {
                data[h..2 * h].fill(1.0);
            }
            let mut t = Tensor::new(shape, data).expect("init shape");
            to_f32_grid(&mut t);
            tensors.insert(name, Arc::new(t));
        }
        Ok(Self { arch: arch.clone(), tensors })
    }

    /// Assembles weights from named tensors, checking names, shapes and finiteness.
    pub fn from_tensors(arch: &ArchConfig, mut named: BTreeMap<String, Tensor>) -> Result<Self, MdnError> {
        arch.validate()?;
        let mut tensors = BTreeMap::new();
        for (name, shape) in arch.shapes() {
            let t = named.remove(&name).ok_or_else(|| MdnError::Weights(format!("missing tensor {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(MdnError::Weights(format!("tensor {name} has shape {:?}, expected {shape:?}", t.shape())));
            }
            if !t.all_finite() {
                return Err(MdnError::Weights(format!("tensor {name} has non-finite values")));
            }
            tensors.insert(name, Arc::new(t));
        }
        if let Some(extra) = named.keys().next() {
            return Err(MdnError::Weights(format!("unexpected tensor {extra}")));
        }
        Ok(Self { arch: arch.clone(), tensors })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn get(&self, name: &str) -> Option<&Arc<Tensor>> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arc<Tensor>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Replaces one tensor, rounding it to single precision.
    pub fn set(&mut self, name: &str, mut value: Tensor) -> Result<(), MdnError> {
        let cur = self.tensors.get(name).ok_or_else(|| MdnError::Weights(format!("unknown tensor {name}")))?;
        if cur.shape() != value.shape() {
            return Err(MdnError::Weights(format!("tensor {name}: shape {:?} != {:?}", value.shape(), cur.shape())));
        }
        to_f32_grid(&mut value);
        if !value.all_finite() {
            return Err(MdnError::Weights(format!("tensor {name} has values outside single precision")));
        }
        self.tensors.insert(name.to_string(), Arc::new(value));
        Ok(())
    }

    /// Puts every tensor on a tape, as parameters when `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let var = if trainable { tape.param_shared(v.clone()) } else { tape.constant_shared(v.clone()) };
                (k.clone(), var)
            })
            .collect();
        Bound { tape, arch: self.arch.clone(), vars }
    }
}

/// Weights placed on a tape.
pub struct Bound<'t> {
    tape: &'t Tape,
    arch: ArchConfig,
    vars: BTreeMap<String, Var<'t>>,
}

/// Recurrent state of a batch of strokes.
pub struct StrokeState<'t> {
    pub h: Var<'t>,
    pub c: Var<'t>,
    grid: Var<'t>,
    proj: Var<'t>,
}

type R<T> = Result<T, MdnError>;

impl<'t> Bound<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn var(&self, name: &str) -> Var<'t> {
        self.vars[name]
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, Var<'t>)> + '_ {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    fn linear(&self, x: Var<'t>, name: &str) -> R<Var<'t>> {
        Ok(x.matmul(self.var(&format!("{name}.w")))?.add(self.var(&format!("{name}.b")))?)
    }

    /// Canvases `[n, 1, h, w]` to feature maps `[n, c3, gh, gw]`.
    pub fn encode(&self, canvases: Var<'t>) -> R<Var<'t>> {
        let mut x = canvases;
        for l in 1..=3 {
            x = x
                .conv2d(self.var(&format!("enc.conv{l}.w")), Some(self.var(&format!("enc.conv{l}.b"))), STRIDE, PAD)?
                .tanh();
        }
        Ok(x)
    }

    fn flat(&self, enc: Var<'t>) -> R<Var<'t>> {
        let n = enc.shape()[0];
        Ok(enc.reshape(&[n, self.arch.feature_len()])?)
    }

    /// Feature maps to per-cell feature rows `[n, cells, c3]`.
    pub fn grid(&self, enc: Var<'t>) -> R<Var<'t>> {
        let n = enc.shape()[0];
        Ok(enc.reshape(&[n, self.arch.channels[2], self.arch.grid_cells()])?.transpose()?)
    }

    /// Raw location mixtures `[n, 6k]` in normalized coordinates.
    pub fn location_raw(&self, enc: Var<'t>) -> R<Var<'t>> {
        let h = self.linear(self.flat(enc)?, "loc.fc1")?.tanh();
        self.linear(h, "loc.fc2")
    }

    /// Termination logits `[n, 1]`; the sigmoid is the probability of stopping.
    pub fn termination_logit(&self, enc: Var<'t>) -> R<Var<'t>> {
        let h = self.linear(self.flat(enc)?, "term.fc1")?.tanh();
        self.linear(h, "term.fc2")
    }

    /// Initial recurrent state from per-stroke grids `[b, cells, c3]` and
    /// normalized starts `[b, 2]`.
    pub fn stroke_start(&self, grid: Var<'t>, start: Var<'t>) -> R<StrokeState<'t>> {
        let gs = grid.shape();
        let (b, cells, c3) = (gs[0], gs[1], gs[2]);
        let mean = grid.sum_axis(1)?.scale(1.0 / cells as f64);
        let h = self.linear(self.tape.concat(&[mean, start], 1)?, "stroke.init")?.tanh();
        let c = self.tape.constant(Tensor::zeros(&[b, self.arch.lstm_hidden]));
        let a = self.arch.attention_dim;
        let proj = grid
            .reshape(&[b * cells, c3])?
            .matmul(self.var("stroke.attn.wf"))?
            .reshape(&[b, cells, a])?
            .add(self.var("stroke.attn.b"))?;
        Ok(StrokeState { h, c, grid, proj })
    }

    /// One recurrent step. Returns the new state, raw offset mixtures
    /// `[b, 6k]` and stop logits `[b, 1]`.
    pub fn stroke_step(&self, st: &StrokeState<'t>, start: Var<'t>, prev: Var<'t>) -> R<(StrokeState<'t>, Var<'t>, Var<'t>)> {
        let gs = st.grid.shape();
        let (b, cells) = (gs[0], gs[1]);
        let (a, hd) = (self.arch.attention_dim, self.arch.lstm_hidden);
        let q = st.h.matmul(self.var("stroke.attn.wh"))?.reshape(&[b, 1, a])?;
        let e = st.proj.add(q)?.tanh();
        let scores = e.reshape(&[b * cells, a])?.matmul(self.var("stroke.attn.v"))?.reshape(&[b, cells])?;
        let alpha = scores.softmax().reshape(&[b, cells, 1])?;
        let read = alpha.mul(st.grid)?.sum_axis(1)?;
        let x = self.tape.concat(&[read, start, prev, st.h], 1)?;
        let z = self.linear(x, "stroke.lstm")?;
        let i = z.slice(1, 0, hd)?.sigmoid();
        let f = z.slice(1, hd, 2 * hd)?.sigmoid();
        let g = z.slice(1, 2 * hd, 3 * hd)?.tanh();
        let o = z.slice(1, 3 * hd, 4 * hd)?.sigmoid();
        let c = f.mul(st.c)?.add(i.mul(g)?)?;
        let h = o.mul(c.tanh())?;
        let out = self.linear(h, "stroke.out")?;
        let k6 = raw_len(self.arch.components);
        let raw = out.slice(1, 0, k6)?;
        let stop = out.slice(1, k6, k6 + 1)?;
        Ok((StrokeState { h, c, grid: st.grid, proj: st.proj }, raw, stop))
    }
}

/// Stacks canvases into a `[n, 1, h, w]` tensor.
pub fn canvas_batch(canvases: &[&Canvas]) -> Tensor {
    let size = canvases.first().map(|c| c.size()).unwrap_or_default();
    let mut data = Vec::with_capacity(canvases.len() * size.pixels());
    for c in canvases {
        assert_eq!(c.size(), size, "canvases differ in size");
        data.extend_from_slice(c.values());
    }
    Tensor::new(vec![canvases.len(), 1, size.height, size.width], data).expect("canvas batch")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_difference, relative_error};
    use crate::mdn::GmmParams;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> ArchConfig {
        ArchConfig {
            canvas: CanvasSize::new(21, 21),
            channels: [2, 3, 4],
            location_hidden: 5,
            termination_hidden: 3,
            lstm_hidden: 6,
            attention_dim: 4,
            components: 2,
        }
    }

    fn canvas(rng: &mut impl Rng, size: CanvasSize) -> Tensor {
        Tensor::new(vec![1, 1, size.height, size.width], (0..size.pixels()).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn default_grid_is_fourteen() {
        let a = ArchConfig::default();
        assert_eq!(a.grid(), (14, 14));
        assert_eq!(a.feature_len(), 64 * 196);
        assert!((a.log_jacobian() + 2.0 * 52f64.ln()).abs() < 1e-15);
        let p = Point::new(10.0, 90.0);
        assert_eq!(a.denormalize(a.normalize(p)), p);
    }

    #[test]
    fn heads_are_deterministic_and_well_formed() {
        let arch = small();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = NetworkWeights::init(&arch, &mut rng).unwrap();
        let c = canvas(&mut rng, arch.canvas);
        let run = |c: &Tensor| {
            let tape = Tape::new();
            let b = w.bind(&tape, false);
            let enc = b.encode(tape.constant(c.clone())).unwrap();
            let loc = b.location_raw(enc).unwrap().value().data().to_vec();
            let term = b.termination_logit(enc).unwrap().item();
            let st = b.stroke_start(b.grid(enc).unwrap(), tape.constant(Tensor::new(vec![1, 2], vec![0.1, -0.2]).unwrap())).unwrap();
            let prev = tape.constant(Tensor::zeros(&[1, 2]));
            let start = tape.constant(Tensor::new(vec![1, 2], vec![0.1, -0.2]).unwrap());
            let (_, raw, stop) = b.stroke_step(&st, start, prev).unwrap();
            (loc, term, raw.value().data().to_vec(), stop.item())
        };
        let a1 = run(&c);
        assert_eq!(a1, run(&c));
        let g = GmmParams::from_raw(&a1.0);
        assert!((g.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(a1.0.iter().chain(&a1.2).all(|v| v.is_finite()) && a1.1.is_finite() && a1.3.is_finite());
        let mut c2 = c.clone();
        c2.data_mut()[10 * 21 + 10] += 0.5;
        let a2 = run(&c2);
        assert!(a1.0.iter().zip(&a2.0).any(|(x, y)| (x - y).abs() > 1e-12));
    }

    #[test]
    fn stroke_model_gradient_matches_finite_differences() {
        let arch = small();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = NetworkWeights::init(&arch, &mut rng).unwrap();
        let c = canvas(&mut rng, arch.canvas);
        let inputs: Vec<f64> = (0..6).map(|_| rng.gen_range(-0.5..0.5)).collect();
        fn eval<'t>(w: &NetworkWeights, tape: &'t Tape, x: &[Var<'t>]) -> Var<'t> {
            let b = w.bind(tape, false);
            let enc = b.encode(x[0]).unwrap();
            let st = b.stroke_start(b.grid(enc).unwrap(), x[1]).unwrap();
            let (st, _, _) = b.stroke_step(&st, x[1], x[2]).unwrap();
            let (_, raw, stop) = b.stroke_step(&st, x[1], x[3]).unwrap();
            let lp = crate::mdn::gmm_log_pdf_var(tape, raw, x[3]).unwrap();
            lp.sum().add(stop.sum()).unwrap().add(b.location_raw(enc).unwrap().tanh().sum()).unwrap()
        }
        let tape = Tape::new();
        let vars = [
            tape.param(c.clone()),
            tape.param(Tensor::new(vec![1, 2], inputs[0..2].to_vec()).unwrap()),
            tape.param(Tensor::new(vec![1, 2], inputs[2..4].to_vec()).unwrap()),
            tape.param(Tensor::new(vec![1, 2], inputs[4..6].to_vec()).unwrap()),
        ];
        let out = eval(&w, &tape, &vars);
        let grads = tape.gradient(out, &vars).unwrap();
        let analytic: Vec<f64> = grads.into_iter().flat_map(|g| g.into_data()).collect();
        let mut x = c.data().to_vec();
        x.extend(&inputs);
        let f = |x: &[f64]| {
            let tape = Tape::new();
            let n = arch.canvas.pixels();
            let vars = [
                tape.constant(Tensor::new(vec![1, 1, 21, 21], x[..n].to_vec()).unwrap()),
                tape.constant(Tensor::new(vec![1, 2], x[n..n + 2].to_vec()).unwrap()),
                tape.constant(Tensor::new(vec![1, 2], x[n + 2..n + 4].to_vec()).unwrap()),
                tape.constant(Tensor::new(vec![1, 2], x[n + 4..n + 6].to_vec()).unwrap()),
            ];
            eval(&w, &tape, &vars).item()
        };
        let numeric = finite_difference(f, &x, 1e-5);
        assert!(relative_error(&analytic, &numeric) < 1e-4);
    }

    #[test]
    fn weights_reject_bad_tensors() {
        let arch = small();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut w = NetworkWeights::init(&arch, &mut rng).unwrap();
        assert!(w.set("loc.fc1.b", Tensor::zeros(&[4])).is_err());
        assert!(w.set("loc.fc1.b", Tensor::full(&[5], f64::NAN)).is_err());
        assert!(w.set("nope", Tensor::zeros(&[5])).is_err());
        w.set("loc.fc1.b", Tensor::full(&[5], 0.1)).unwrap();
        assert_eq!(w.get("loc.fc1.b").unwrap().data()[0], 0.1f32 as f64);
        let mut named: BTreeMap<String, Tensor> = w.iter().map(|(k, v)| (k.to_string(), (**v).clone())).collect();
        assert_eq!(NetworkWeights::from_tensors(&arch, named.clone()).unwrap(), w);
        named.remove("term.fc2.b");
        assert!(NetworkWeights::from_tensors(&arch, named).is_err());
    }
}
