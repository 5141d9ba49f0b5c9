//! WebAssembly bindings behind `www/index.html`. Every export takes and returns
//! JSON strings; the logic lives in [`ops`] so it also runs natively.

use wasm_bindgen::prelude::*;

pub mod ops;

fn js(r: Result<String, String>) -> Result<String, JsError> {
    r.map_err(|e| JsError::new(&e))
}

/// `[{start, end, class_id, score}]` in, kept detections out.
#[wasm_bindgen]
pub fn run_nms(detections: &str, thresh: f64, class_aware: bool) -> Result<String, JsError> {
    js(ops::run_nms(detections, thresh, class_aware))
}

/// `[{start, end, class_id}]` on a length-`t` grid in, positives per level out.
#[wasm_bindgen]
pub fn assign_levels(annotations: &str, t: usize, levels: usize, center_ratio: f64) -> Result<String, JsError> {
    js(ops::assign_levels(annotations, t, levels, center_ratio))
}

/// Detections and ground truth for one class in, AP and TP flags out.
#[wasm_bindgen]
pub fn score_ap(detections: &str, ground_truth: &str, thresh: f64) -> Result<String, JsError> {
    js(ops::score_ap(detections, ground_truth, thresh))
}

#[wasm_bindgen]
pub fn prompt(class_name: &str) -> Result<String, JsError> {
    js(ovformer::textbank::render_prompt(class_name).map_err(|e| e.to_string()))
}
