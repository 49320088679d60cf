//! Python bindings: parsing round trip, the three transforms, BLEU-4 and
//! prompt rendering.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use curricode_core::llmeval::{self, Protocol};
use curricode_core::{metrics, obfuscate, srcmodel};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse(code: &str) -> PyResult<(srcmodel::FunctionModel, srcmodel::ScopeTable)> {
    srcmodel::parse_function(code).map_err(value_err)
}

/// Parse a function and render it back; equals the input for supported code.
#[pyfunction]
fn roundtrip(code: &str) -> PyResult<String> {
    let (model, _) = parse(code)?;
    srcmodel::render(&model).map_err(value_err)
}

/// Function-name erosion.
#[pyfunction]
fn fne(code: &str) -> PyResult<String> {
    let (model, _) = parse(code)?;
    Ok(obfuscate::fne(&model).map_err(value_err)?.source().to_string())
}

/// Identifier renaming; returns the code and (original, replacement) pairs.
#[pyfunction]
fn irn(code: &str) -> PyResult<(String, Vec<(String, String)>)> {
    let (model, scope) = parse(code)?;
    let (out, map) = obfuscate::irn(&model, &scope).map_err(value_err)?;
    Ok((out.source().to_string(), map.entries.into_iter().map(|e| (e.original, e.replacement)).collect()))
}

/// Dead-code injection of `n_lines` lines.
#[pyfunction]
fn dci(code: &str, n_lines: usize, seed: u64) -> PyResult<String> {
    let (model, _) = parse(code)?;
    Ok(obfuscate::dci(&model, n_lines, seed).map_err(value_err)?.0.source().to_string())
}

/// Smoothed sentence BLEU-4 on a 0..100 scale.
#[pyfunction]
fn bleu4(candidate: &str, reference: &str) -> f64 {
    metrics::bleu4(candidate, reference)
}

/// Messages of a prompt protocol as (role, content) pairs.
#[pyfunction]
#[pyo3(signature = (protocol, code, fewshots=None))]
fn render_prompt(protocol: &str, code: &str, fewshots: Option<Vec<(String, String)>>) -> PyResult<Vec<(String, String)>> {
    let protocol: Protocol = protocol.parse().map_err(PyValueError::new_err)?;
    let msgs = llmeval::render_prompt(protocol, code, &fewshots.unwrap_or_default()).map_err(value_err)?;
    Ok(msgs.into_iter().map(|m| (m.role.as_str().to_string(), m.content)).collect())
}

/// First triple-quoted span of a reply and whether the reply was unfenced.
#[pyfunction]
fn extract_docstring(response: &str) -> PyResult<(String, bool)> {
    let e = llmeval::extract_docstring(response).map_err(value_err)?;
    Ok((e.summary, e.unfenced))
}

#[pymodule]
fn curricode(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(roundtrip, m)?)?;
    m.add_function(wrap_pyfunction!(fne, m)?)?;
    m.add_function(wrap_pyfunction!(irn, m)?)?;
    m.add_function(wrap_pyfunction!(dci, m)?)?;
    m.add_function(wrap_pyfunction!(bleu4, m)?)?;
    m.add_function(wrap_pyfunction!(render_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(extract_docstring, m)?)?;
    Ok(())
}
