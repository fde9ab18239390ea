//! wasm-bindgen bindings behind `www/index.html`.
//!
//! Each export has a plain Rust twin returning `Result<_, String>` so the
//! logic can be tested natively.

use btcnn::topo::{make_circle_filters, make_col_mask};
use btcnn::uncertainty::{decompose_uncertainty, PredictionEnsemble};
use wasm_bindgen::prelude::*;

/// Flattened `[n, k, k]` circle filter weights followed by the `n` angles.
pub fn circle_filters(n: usize, k: usize) -> Result<Vec<f64>, String> {
    let bank = make_circle_filters(n, k).map_err(|e| e.to_string())?;
    let mut out = bank.weights().data().to_vec();
    out.extend_from_slice(bank.angles());
    Ok(out)
}

/// Row-major `[out, in]` keep mask, 1 for kept connections.
pub fn col_mask(out_channels: usize, in_channels: usize, threshold: f64) -> Result<Vec<u8>, String> {
    let mask = make_col_mask(out_channels, in_channels, threshold).map_err(|e| e.to_string())?;
    Ok(mask.entries().iter().map(|&k| k as u8).collect())
}

/// `[total, aleatoric, epistemic]` in bits for one input scored by
/// `members` predictive distributions over `classes` labels.
pub fn decompose(probs: Vec<f64>, members: usize, classes: usize) -> Result<Vec<f64>, String> {
    // tolerate hand-typed rows by normalising each one
    let mut probs = probs;
    for row in probs.chunks_mut(classes.max(1)) {
        let s: f64 = row.iter().sum();
        if s > 0.0 && s.is_finite() {
            row.iter_mut().for_each(|p| *p /= s);
        }
    }
    let ens = PredictionEnsemble::new(probs, members, 1, classes).map_err(|e| e.to_string())?;
    let r = decompose_uncertainty(&ens);
    let mut out = vec![r.total[0], r.aleatoric[0], r.epistemic[0]];
    out.extend_from_slice(ens.mean_row(0));
    Ok(out)
}

#[wasm_bindgen(js_name = circleFilters)]
pub fn circle_filters_js(n: usize, k: usize) -> Result<Vec<f64>, JsError> {
    circle_filters(n, k).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = colMask)]
pub fn col_mask_js(out_channels: usize, in_channels: usize, threshold: f64) -> Result<Vec<u8>, JsError> {
    col_mask(out_channels, in_channels, threshold).map_err(|e| JsError::new(&e))
}

/// Returns `[total, aleatoric, epistemic, mean_0, ..., mean_{C-1}]`.
#[wasm_bindgen(js_name = decompose)]
pub fn decompose_js(probs: Vec<f64>, members: usize, classes: usize) -> Result<Vec<f64>, JsError> {
    decompose(probs, members, classes).map_err(|e| JsError::new(&e))
}
