//! Python bindings. Tensors cross the boundary as nested lists of floats.

use std::path::PathBuf;

use ezvsl::config::Config as CoreConfig;
use ezvsl::localize::{self, LocalizationMap, MapSource};
use ezvsl::metrics::{self, ConsensusMask, Mask};
use ezvsl::micl::{self, Batch, MatchStrategy};
use ezvsl::pipeline::{self, Workdir as CoreWorkdir};
use ezvsl::synth::{self, BBox};
use ezvsl::{audio, Error, Tensor};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::InvalidArgument(_) | Error::Config(_) | Error::Shape { .. } | Error::Empty(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

type Grid = Vec<Vec<f64>>;

fn grid_tensor(grid: &Grid) -> PyResult<Tensor> {
    let h = grid.len();
    let w = grid.first().map_or(0, |r| r.len());
    if h == 0 || w == 0 || grid.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("expected a non-empty rectangular 2-d list"));
    }
    Tensor::new(vec![h, w], grid.concat()).map_err(py_err)
}

fn tensor_grid(t: &Tensor) -> Grid {
    let w = t.shape()[t.ndim() - 1];
    t.data().chunks(w).map(|r| r.to_vec()).collect()
}

fn strategy(name: &str) -> PyResult<MatchStrategy> {
    name.parse().map_err(py_err)
}

/// Run configuration.
#[pyclass(name = "Config", module = "ezvsl_py")]
struct Config {
    inner: CoreConfig,
}

#[pymethods]
impl Config {
    /// Defaults, optionally overridden by `key = value` text.
    #[new]
    #[pyo3(signature = (text = None))]
    fn new(text: Option<&str>) -> PyResult<Self> {
        let inner = match text {
            Some(t) => CoreConfig::parse(t).map_err(py_err)?,
            None => CoreConfig::default(),
        };
        Ok(Self { inner })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(py_err)?;
        self.inner.validate().map_err(py_err)
    }

    fn get(&self, key: &str) -> PyResult<String> {
        self.inner
            .entries()
            .into_iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| v)
            .ok_or_else(|| PyValueError::new_err(format!("unknown key `{key}`")))
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn hash_hex(&self) -> String {
        self.inner.hash_hex()
    }

    fn __repr__(&self) -> String {
        format!("Config(hash={})", self.inner.hash_hex())
    }
}

/// One generated scene with its clip.
#[pyclass(name = "Sample", module = "ezvsl_py", frozen)]
struct Sample {
    inner: synth::Sample,
}

#[pymethods]
impl Sample {
    #[getter]
    fn id(&self) -> usize {
        self.inner.id
    }

    #[getter]
    fn sounding_class(&self) -> usize {
        self.inner.sounding_class
    }

    /// `(x, y, w, h)` in pixels.
    #[getter]
    fn gt_box(&self) -> (usize, usize, usize, usize) {
        let b = self.inner.gt_box;
        (b.x, b.y, b.w, b.h)
    }

    #[getter]
    fn distractor_classes(&self) -> Vec<usize> {
        self.inner.distractor_classes.clone()
    }

    /// `[3][H][W]` in `[0, 1]`.
    fn image(&self) -> Vec<Grid> {
        let n = self.inner.img_size();
        self.inner
            .image
            .data()
            .chunks(n * n)
            .map(|c| c.chunks(n).map(|r| r.to_vec()).collect())
            .collect()
    }

    fn audio(&self) -> Vec<f64> {
        self.inner.audio.samples().to_vec()
    }

    #[getter]
    fn sample_rate(&self) -> u32 {
        self.inner.audio.sample_rate()
    }

    fn __repr__(&self) -> String {
        format!("Sample(id={}, class={}, box={:?})", self.inner.id, self.inner.sounding_class, self.gt_box())
    }
}

/// All splits of `config` in memory: `{name: [Sample, ...]}`.
#[pyfunction]
fn generate_dataset<'py>(py: Python<'py>, config: &Config) -> PyResult<Bound<'py, PyDict>> {
    let out = PyDict::new(py);
    for split in pipeline::build_dataset(&config.inner).map_err(py_err)? {
        let samples: Vec<Sample> = split.samples.into_iter().map(|inner| Sample { inner }).collect();
        out.set_item(split.name, samples)?;
    }
    Ok(out)
}

/// Log-magnitude spectrogram `[F][T]` of a mono clip.
#[pyfunction]
#[pyo3(signature = (samples, sample_rate, n_fft = 128, hop = 64))]
fn stft_log_magnitude(samples: Vec<f64>, sample_rate: u32, n_fft: usize, hop: usize) -> PyResult<Grid> {
    let w = audio::Waveform::new(samples, sample_rate);
    let s = audio::stft_log_magnitude(&w, n_fft, hop).map_err(py_err)?;
    Ok(tensor_grid(&s.bins))
}

/// Score of a clip embedding `[d]` against a bag `[d][H][W]`.
#[pyfunction]
#[pyo3(signature = (audio, bag, strategy = "max_of_sim"))]
fn match_score(audio: Vec<f64>, bag: Vec<Grid>, strategy: &str) -> PyResult<f64> {
    let d = bag.len();
    let first = bag.first().ok_or_else(|| PyValueError::new_err("empty bag"))?;
    let (h, w) = (first.len(), first.first().map_or(0, |r| r.len()));
    let data: Vec<f64> = bag.iter().flat_map(|c| c.concat()).collect();
    if data.len() != d * h * w {
        return Err(PyValueError::new_err("bag is not rectangular"));
    }
    let bag = Tensor::new(vec![d, h, w], data).map_err(py_err)?;
    micl::match_score(&Tensor::from_vec(audio), &bag, self::strategy(strategy)?).map_err(py_err)
}

/// `(a2v, v2a, total)` for bags `[B][d][H][W]` and clips `[B][d]`.
#[pyfunction]
#[pyo3(signature = (bags, audio, tau = 0.07, strategy = "max_of_sim"))]
fn micl_loss(bags: Vec<Vec<Grid>>, audio: Vec<Vec<f64>>, tau: f64, strategy: &str) -> PyResult<(f64, f64, f64)> {
    let b = bags.len();
    let d = bags.first().map_or(0, |x| x.len());
    let h = bags.first().and_then(|x| x.first()).map_or(0, |x| x.len());
    let w = bags.first().and_then(|x| x.first()).and_then(|x| x.first()).map_or(0, |x| x.len());
    let data: Vec<f64> = bags.iter().flat_map(|bag| bag.iter().flat_map(|c| c.concat())).collect();
    if data.len() != b * d * h * w || audio.iter().any(|a| a.len() != d) {
        return Err(PyValueError::new_err("bags and audio must be rectangular with matching d"));
    }
    let batch = Batch::new(
        Tensor::new(vec![b, d, h, w], data).map_err(py_err)?,
        Tensor::new(vec![audio.len(), d], audio.concat()).map_err(py_err)?,
    )
    .map_err(py_err)?;
    let e = micl::micl_loss_with_grads(&batch, tau, self::strategy(strategy)?).map_err(py_err)?;
    Ok((e.a2v, e.v2a, e.total))
}

fn raw_map(grid: &Grid) -> PyResult<LocalizationMap> {
    LocalizationMap::new(grid_tensor(grid)?, MapSource::Avl).map_err(py_err)
}

/// Min-max normalized grid and whether the input was constant.
#[pyfunction]
fn normalize_map(grid: Grid) -> PyResult<(Grid, bool)> {
    let m = localize::normalize_map(&raw_map(&grid)?);
    Ok((tensor_grid(&m.grid), m.degenerate))
}

/// `alpha · avl + (1 − alpha) · obj` after normalizing both inputs.
#[pyfunction]
#[pyo3(signature = (avl, obj, alpha = localize::DEFAULT_ALPHA))]
fn fuse(avl: Grid, obj: Grid, alpha: f64) -> PyResult<Grid> {
    let a = localize::normalize_map(&raw_map(&avl)?);
    let o = localize::normalize_map(&raw_map(&obj)?);
    Ok(tensor_grid(&localize::fuse(&a, &o, alpha).map_err(py_err)?.grid))
}

/// Bilinear resize to `height × width`.
#[pyfunction]
fn upsample(grid: Grid, height: usize, width: usize) -> PyResult<Grid> {
    let m = localize::upsample_map(&raw_map(&grid)?, height, width).map_err(py_err)?;
    Ok(tensor_grid(&m.grid))
}

/// IoU of a boolean prediction against the majority-vote mask of `boxes`.
#[pyfunction]
fn iou(pred: Vec<Vec<bool>>, boxes: Vec<(usize, usize, usize, usize)>) -> PyResult<f64> {
    let h = pred.len();
    let w = pred.first().map_or(0, |r| r.len());
    let boxes: Vec<BBox> = boxes.into_iter().map(|(x, y, w, h)| BBox { x, y, w, h }).collect();
    let gt: ConsensusMask = metrics::build_consensus(&boxes, h, w).map_err(py_err)?;
    let mask = Mask::new(h, w, pred.concat()).map_err(py_err)?;
    metrics::iou(&mask, &gt).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (ious, delta = 0.5))]
fn ciou_at(ious: Vec<f64>, delta: f64) -> PyResult<f64> {
    metrics::ciou_at(&ious, delta).map_err(py_err)
}

#[pyfunction]
fn auc(ious: Vec<f64>) -> PyResult<f64> {
    metrics::auc(&ious).map_err(py_err)
}

/// A work directory driven like the command-line tool.
#[pyclass(name = "Workdir", module = "ezvsl_py")]
struct Workdir {
    inner: CoreWorkdir,
}

#[pymethods]
impl Workdir {
    #[new]
    fn new(path: PathBuf) -> Self {
        Self {
            inner: CoreWorkdir::new(path),
        }
    }

    /// Write every split; returns `{split: n_samples}`.
    #[pyo3(signature = (config, force = false))]
    fn generate<'py>(&self, py: Python<'py>, config: &Config, force: bool) -> PyResult<Bound<'py, PyDict>> {
        let out = PyDict::new(py);
        for s in pipeline::cmd_generate(&self.inner, &config.inner, force).map_err(py_err)? {
            out.set_item(s.name, s.samples.len())?;
        }
        Ok(out)
    }

    /// Pretrain objectness; returns held-out accuracy.
    fn pretrain(&self, config: &Config) -> PyResult<f64> {
        Ok(pipeline::cmd_pretrain(&self.inner, &config.inner).map_err(py_err)?.held_out_accuracy)
    }

    /// Contrastive training; returns per-epoch `(a2v, v2a, total)`.
    fn train(&self, config: &Config) -> PyResult<Vec<(f64, f64, f64)>> {
        let out = pipeline::cmd_train(&self.inner, &config.inner).map_err(py_err)?;
        Ok(out.curve.iter().map(|e| (e.a2v, e.v2a, e.total)).collect())
    }

    /// Metrics of the trained model on `split`.
    #[pyo3(signature = (config, split = "test_heard"))]
    fn evaluate<'py>(&self, py: Python<'py>, config: &Config, split: &str) -> PyResult<Bound<'py, PyDict>> {
        let r = pipeline::cmd_evaluate(&self.inner, &config.inner, split).map_err(py_err)?;
        let out = PyDict::new(py);
        out.set_item("ciou", r.ciou)?;
        out.set_item("auc", r.auc)?;
        out.set_item("n", r.n())?;
        out.set_item("skipped", r.skipped.len())?;
        out.set_item("ious", r.ious())?;
        Ok(out)
    }

    /// Dump the maps of one sample; returns the tensor-file path.
    #[pyo3(signature = (config, index, split = "test_heard", out = None))]
    fn localize(&self, config: &Config, index: usize, split: &str, out: Option<PathBuf>) -> PyResult<PathBuf> {
        let out = out.unwrap_or_else(|| PathBuf::from("maps/sample"));
        pipeline::cmd_localize(&self.inner, &config.inner, split, index, &out).map_err(py_err)
    }
}

#[pymodule]
fn ezvsl_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Config>()?;
    m.add_class::<Sample>()?;
    m.add_class::<Workdir>()?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(stft_log_magnitude, m)?)?;
    m.add_function(wrap_pyfunction!(match_score, m)?)?;
    m.add_function(wrap_pyfunction!(micl_loss, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_map, m)?)?;
    m.add_function(wrap_pyfunction!(fuse, m)?)?;
    m.add_function(wrap_pyfunction!(upsample, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(ciou_at, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add("STRATEGIES", MatchStrategy::ALL.map(|s| s.as_str()).to_vec())?;
    Ok(())
}
