//! Procedural glyph corpus: a small stand-in for a real background set.
//!
//! Each class is a stroke template (bars, L/T/+/Z shapes, arcs, composites)
//! placed with its own rotation, scale, offset and control-point jitter.
//! Drawings are tokens sampled from the class program under mild motor noise.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{stream, DrawingRecord, HarnessError};
use crate::geometry::{Point, Spline};
use crate::render::{BinaryImage, CanvasSize, RenderParams};
use crate::token::{sample_token, CharacterToken, TokenNoiseParams};
use crate::type_prior::CharacterType;

/// Stroke width and floor used for corpus images, thresholded at one half.
pub const TOY_RENDER: (f64, f64) = (1.0, 1e-3);

pub const MAX_TOY_CLASSES: usize = 40;

const TEMPLATES: &[&[&[(f64, f64)]]] = &[
    &[&[(-1.0, 0.0), (1.0, 0.0)]],
    &[&[(-0.6, -1.0), (-0.6, 1.0)], &[(-0.6, 1.0), (0.8, 1.0)]],
    &[&[(-1.0, -0.9), (1.0, -0.9)], &[(0.0, -0.9), (0.0, 1.0)]],
    &[&[(-1.0, 0.0), (1.0, 0.0)], &[(0.0, -1.0), (0.0, 1.0)]],
    &[&[(-0.9, -0.9), (0.9, -0.9)], &[(0.9, -0.9), (-0.9, 0.9)], &[(-0.9, 0.9), (0.9, 0.9)]],
    &[&[(0.8, -0.8), (-0.2, -1.1), (-1.0, 0.0), (-0.2, 1.1), (0.8, 0.8)]],
    &[&[(-0.9, -1.0), (0.0, 1.0)], &[(0.0, 1.0), (0.9, -1.0)]],
    &[&[(-0.9, -0.9), (0.9, 0.9)], &[(0.9, -0.9), (-0.9, 0.9)]],
    &[&[(-0.6, -1.0), (-0.6, 1.0)], &[(-0.6, -1.0), (0.6, -0.9), (1.0, 0.0), (0.6, 0.9), (-0.6, 1.0)]],
    &[&[(-1.0, -0.9), (1.0, -0.9)], &[(-0.6, -0.9), (-0.6, 1.0)], &[(0.6, -0.9), (0.6, 1.0)]],
    &[&[(0.0, -1.0), (0.0, 1.0)]],
    &[&[(0.8, -0.9), (-0.6, -0.9), (-0.7, -0.1), (0.7, 0.1), (0.6, 0.9), (-0.8, 0.9)]],
    &[&[(0.0, -1.0), (-0.9, 1.0)], &[(0.0, -1.0), (0.9, 1.0)], &[(-0.5, 0.2), (0.5, 0.2)]],
    &[&[(-0.8, -1.0), (-0.8, 0.6), (0.0, 1.2), (0.8, 0.6), (0.8, -1.0)]],
];

/// One synthesized drawing with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDrawing {
    pub record: DrawingRecord,
    pub image: BinaryImage,
    /// The true segmentation: one spline per pen stroke, in drawing order.
    pub splines: Vec<Spline>,
    pub token: CharacterToken,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyCorpus {
    pub size: CanvasSize,
    pub drawings: Vec<ToyDrawing>,
    /// The generating program of each class.
    pub programs: Vec<CharacterType>,
}

impl ToyCorpus {
    pub fn class(&self, class: usize) -> impl Iterator<Item = &ToyDrawing> {
        self.drawings.iter().filter(move |d| d.record.class == class)
    }

    pub fn records(&self) -> Vec<DrawingRecord> {
        self.drawings.iter().map(|d| d.record.clone()).collect()
    }
}

fn class_program(c: usize, size: CanvasSize, rng: &mut ChaCha8Rng) -> CharacterType {
    let template = TEMPLATES[c % TEMPLATES.len()];
    let theta: f64 = rng.gen_range(-0.3..0.3);
    let (sx, sy) = (rng.gen_range(24.0..34.0), rng.gen_range(24.0..34.0));
    let mid = size.center();
    let center = Point::new(mid.x + rng.gen_range(-8.0..8.0), mid.y + rng.gen_range(-8.0..8.0));
    let (sin, cos) = theta.sin_cos();
    let place = |(u, v): (f64, f64)| {
        let (x, y) = (u * sx, v * sy);
        Point::new(center.x + cos * x - sin * y, center.y + sin * x + cos * y)
    };
    let splines: Vec<Spline> = template
        .iter()
        .map(|stroke| {
            let ctrl = stroke
                .iter()
                .map(|&p| place(p) + Point::new(rng.gen_range(-2.5..2.5), rng.gen_range(-2.5..2.5)))
                .collect();
            Spline::new(ctrl).expect("template strokes are finite")
        })
        .collect();
    CharacterType::from_splines(&splines).expect("template strokes encode")
}

fn drawing_noise() -> TokenNoiseParams {
    let mut affine = [[0.0; 4]; 4];
    for (i, v) in [0.01, 0.01, 4.0, 4.0].into_iter().enumerate() {
        affine[i][i] = v;
    }
    TokenNoiseParams::new(1.0, 0.8, affine).expect("fixed noise is valid")
}

fn clamp_into(p: Point, size: CanvasSize) -> Point {
    Point::new(p.x.clamp(0.0, size.width as f64), p.y.clamp(0.0, size.height as f64))
}

/// `n_classes × n_per_class` drawings on the default canvas. Class
/// programs and drawings use separate named streams of `seed`.
pub fn synthesize_toy_corpus(n_classes: usize, n_per_class: usize, seed: u64) -> Result<ToyCorpus, HarnessError> {
    if n_classes == 0 || n_classes > MAX_TOY_CLASSES {
        return Err(HarnessError::Data(format!("{n_classes} classes requested, supported range is 1..={MAX_TOY_CLASSES}")));
    }
    let size = CanvasSize::default();
    let mut class_rng = stream(seed, "toy/classes");
    let programs: Vec<CharacterType> = (0..n_classes).map(|c| class_program(c, size, &mut class_rng)).collect();
    let noise = drawing_noise();
    let rp = RenderParams::new(TOY_RENDER.0, TOY_RENDER.1).expect("fixed render params");
    let mut rng = stream(seed, "toy/drawings");
    let mut drawings = Vec::with_capacity(n_classes * n_per_class);
    for (c, ty) in programs.iter().enumerate() {
        for i in 0..n_per_class {
            let token = sample_token(ty, &noise, &mut rng);
            let splines: Vec<Spline> = token
                .splines()
                .iter()
                .map(|s| Spline::new(s.control_points().iter().map(|&p| clamp_into(p, size)).collect()).expect("finite"))
                .collect();
            let raw: Vec<_> = splines
                .iter()
                .map(|s| s.sample((s.polygon_length().ceil() as usize).clamp(8, 200)))
                .collect();
            let image = crate::render::render_splines(&splines, rp, size).threshold(0.5);
            let record = DrawingRecord::from_strokes(format!("toy-{c:02}-{i:02}"), c, &raw);
            drawings.push(ToyDrawing { record, image, splines, token });
        }
    }
    Ok(ToyCorpus { size, drawings, programs })
}
