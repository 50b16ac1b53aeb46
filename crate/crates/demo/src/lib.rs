//! Browser demo. Each exported function takes and returns a JSON document;
//! the same operations are available natively in [`ops`] for testing.

use wasm_bindgen::prelude::*;

pub mod ops;

fn wrap(result: Result<String, String>) -> Result<String, JsError> {
    result.map_err(|e| JsError::new(&e))
}

/// Simulates a cohort, digitizes its Kaplan-Meier curve and rebuilds it.
#[wasm_bindgen]
pub fn km_roundtrip(input: &str) -> Result<String, JsError> {
    wrap(ops::km_roundtrip(input))
}

/// Generates confounded records and emulates one matched trial.
#[wasm_bindgen]
pub fn emulation_balance(input: &str) -> Result<String, JsError> {
    wrap(ops::emulation_balance(input))
}

/// Fits the aggregate-data model to the breast-cancer rows.
#[wasm_bindgen]
pub fn fit_breast_model1(input: &str) -> Result<String, JsError> {
    wrap(ops::fit_breast_model1(input))
}
