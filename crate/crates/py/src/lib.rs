//! Python bindings. Images cross the boundary as lists of rows of 0/1 ints.

use gns::harness::{load_checkpoint, save_checkpoint, stream, synthesize_toy_corpus, Model as CoreModel, RunConfig};
use gns::inference::{build_posterior, InferenceConfig};
use gns::mdn::ArchConfig;
use gns::render::{BinaryImage, CanvasSize};
use gns::tasks::{classify_episode, generate_concepts, marginal_log_lik, ClassificationEpisode};
use gns::token::TokenNoiseParams;
use gns::type_prior::{PriorConfig, TypePrior};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

type Rows = Vec<Vec<u8>>;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_image(rows: Rows, size: CanvasSize) -> PyResult<BinaryImage> {
    if rows.len() != size.height || rows.iter().any(|r| r.len() != size.width) {
        return Err(PyValueError::new_err(format!("image must be {} rows of {} pixels", size.height, size.width)));
    }
    BinaryImage::new(size, rows.into_iter().flatten().map(|v| (v != 0) as u8).collect()).map_err(value_err)
}

fn to_rows(img: &BinaryImage) -> Rows {
    img.bits().chunks(img.size().width).map(<[u8]>::to_vec).collect()
}

fn inference_config(config: Option<&str>) -> PyResult<InferenceConfig> {
    match config {
        None => Ok(InferenceConfig::default()),
        Some(text) => {
            let cfg = RunConfig::from_json(text).map_err(value_err)?;
            cfg.validate().map_err(value_err)?;
            Ok(cfg.inference)
        }
    }
}

/// Toy glyph corpus as a list of dicts with `class`, `id` and `image`.
#[pyfunction]
#[pyo3(signature = (n_classes, n_per_class, seed=0))]
fn synthesize_toy(py: Python<'_>, n_classes: usize, n_per_class: usize, seed: u64) -> PyResult<Vec<PyObject>> {
    let corpus = synthesize_toy_corpus(n_classes, n_per_class, seed).map_err(value_err)?;
    corpus
        .drawings
        .iter()
        .map(|d| {
            let dict = PyDict::new_bound(py);
            dict.set_item("class", d.record.class)?;
            dict.set_item("id", &d.record.id)?;
            dict.set_item("image", to_rows(&d.image))?;
            Ok(dict.into_any().unbind())
        })
        .collect()
}

/// A type prior together with its token noise parameters.
#[pyclass]
struct Model {
    inner: CoreModel,
}

#[pymethods]
impl Model {
    /// Untrained model with the toy architecture.
    #[staticmethod]
    #[pyo3(signature = (seed=0))]
    fn init(seed: u64) -> PyResult<Self> {
        let prior = TypePrior::init(&ArchConfig::toy(), PriorConfig::default(), &mut stream(seed, "train/init")).map_err(value_err)?;
        Ok(Self { inner: CoreModel { prior, noise: TokenNoiseParams::default() } })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let inner = load_checkpoint(path.as_ref(), None).map_err(|e| PyIOError::new_err(e.to_string()))?;
        Ok(Self { inner })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_checkpoint(&self.inner, path.as_ref()).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    #[getter]
    fn canvas(&self) -> (usize, usize) {
        let c = self.inner.prior.arch().canvas;
        (c.height, c.width)
    }

    /// Rendered new concepts from the prior.
    #[pyo3(signature = (n, temperature=0.5, seed=0))]
    fn sample_concepts(&self, py: Python<'_>, n: usize, temperature: f64, seed: u64) -> PyResult<Vec<Rows>> {
        let concepts = py
            .allow_threads(|| generate_concepts(&self.inner.prior, n, temperature, &mut stream(seed, "sample")))
            .map_err(value_err)?;
        Ok(concepts.iter().map(|(_, img)| to_rows(img)).collect())
    }

    /// Posterior summary: parse weights, log evidence and MAP strokes as control points.
    #[pyo3(signature = (image, seed=0, config=None))]
    fn parse(&self, py: Python<'_>, image: Rows, seed: u64, config: Option<&str>) -> PyResult<PyObject> {
        let img = to_image(image, self.inner.prior.arch().canvas)?;
        let cfg = inference_config(config)?;
        let m = &self.inner;
        let post = py
            .allow_threads(|| build_posterior(&img, &m.prior, &m.noise, &cfg, &mut stream(seed, "parse")))
            .map_err(value_err)?;
        let strokes: Vec<Vec<(f64, f64)>> = post
            .map()
            .token
            .splines()
            .iter()
            .map(|s| s.control_points().iter().map(|p| (p.x, p.y)).collect())
            .collect();
        let dict = PyDict::new_bound(py);
        dict.set_item("log_evidence", post.log_evidence())?;
        dict.set_item("weights", post.parses.iter().map(|p| p.weight).collect::<Vec<_>>())?;
        dict.set_item("map_strokes", strokes)?;
        Ok(dict.into_any().unbind())
    }

    /// Lower bound on log P(image) and the same value per pixel.
    #[pyo3(signature = (image, seed=0, config=None))]
    fn log_likelihood(&self, py: Python<'_>, image: Rows, seed: u64, config: Option<&str>) -> PyResult<(f64, f64)> {
        let img = to_image(image, self.inner.prior.arch().canvas)?;
        let cfg = inference_config(config)?;
        let m = &self.inner;
        let est = py
            .allow_threads(|| {
                let post = build_posterior(&img, &m.prior, &m.noise, &cfg, &mut stream(seed, "loglik"))?;
                marginal_log_lik(&post, &m.prior, &m.noise, &img)
            })
            .map_err(value_err)?;
        Ok((est.log_lower_bound, est.ll_per_dim))
    }

    /// One-shot classification: the predicted training index for each test image.
    #[pyo3(signature = (train, test, seed=0, config=None))]
    fn classify(&self, py: Python<'_>, train: Vec<Rows>, test: Vec<Rows>, seed: u64, config: Option<&str>) -> PyResult<Vec<usize>> {
        let size = self.inner.prior.arch().canvas;
        let episode = ClassificationEpisode {
            train: train.into_iter().map(|r| to_image(r, size)).collect::<PyResult<_>>()?,
            test: test.into_iter().map(|r| to_image(r, size)).collect::<PyResult<_>>()?,
            test_labels: Vec::new(),
        };
        let cfg = inference_config(config)?;
        let m = &self.inner;
        let result = py
            .allow_threads(|| classify_episode(&episode, &m.prior, &m.noise, &cfg, seed))
            .map_err(value_err)?;
        Ok(result.predictions)
    }
}

#[pymodule]
fn pygns(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(synthesize_toy, m)?)?;
    m.add_class::<Model>()?;
    Ok(())
}
