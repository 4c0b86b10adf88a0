//! Python bindings: the command line entry point, caption embedding and a
//! checkpoint-backed generator.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use tacgan::cli::{self, EncoderChoice};
use tacgan::error::Error;
use tacgan::network::Model;
use tacgan::text_encoder::EncoderBackend;
use tacgan::training::{load_checkpoint, noise_vector};

fn to_py(err: Error) -> PyErr {
    match err {
        Error::NonFinite { .. } => PyArithmeticError::new_err(err.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Runs the command line tool with `args` (without the program name) and
/// returns its exit code.
#[pyfunction]
fn run(args: Vec<String>) -> i32 {
    let argv = std::iter::once("tacgan".to_string()).chain(args);
    cli::run(argv, std::env::vars())
}

/// Embeds a caption with the hashing encoder.
#[pyfunction]
#[pyo3(signature = (caption, seed = 0, dim = 64))]
fn embed(caption: &str, seed: u64, dim: usize) -> PyResult<Vec<f64>> {
    let emb = EncoderBackend::hashing(seed, dim).embed(caption).map_err(to_py)?;
    Ok(emb.vector().to_vec())
}

/// A trained generator loaded from a checkpoint, with the encoder recorded
/// in the checkpoint.
#[pyclass]
struct Generator {
    model: Model,
    encoder: EncoderBackend,
}

#[pymethods]
impl Generator {
    #[new]
    fn new(checkpoint: PathBuf) -> PyResult<Self> {
        let ck = load_checkpoint(&checkpoint).map_err(to_py)?;
        let choice = EncoderChoice::from_values(|k| ck.meta.get(k).cloned()).map_err(to_py)?;
        let model = ck.state.model;
        let encoder = choice.build(model.config.text_dim).map_err(to_py)?;
        Ok(Self { model, encoder })
    }

    #[getter]
    fn resolution(&self) -> usize {
        self.model.config.resolution
    }

    /// Generates one image as row-major RGB bytes (resolution x resolution x 3),
    /// using the same noise as column `index` of `tacgan sample --seed seed`.
    #[pyo3(signature = (caption, seed, index = 0))]
    fn sample<'py>(&self, py: Python<'py>, caption: &str, seed: u64, index: u64) -> PyResult<Bound<'py, PyBytes>> {
        let emb = self.encoder.embed(caption).map_err(to_py)?;
        let z = noise_vector(seed, index, self.model.config.noise_dim);
        let image = self.model.generate(&emb, &z).map_err(to_py)?;
        Ok(PyBytes::new(py, &image.to_bytes()))
    }
}

#[pymodule]
#[pyo3(name = "tacgan")]
fn tacgan_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(embed, m)?)?;
    m.add_class::<Generator>()?;
    Ok(())
}
