//! Browser bindings: render synthetic scenes and their condition maps, and
//! estimate zero-shot task weights from an instruction.

use unicontrol::config::Config;
use unicontrol::datagen::generate_sample;
use unicontrol::grad::Tensor;
use unicontrol::tasks::{self, WeightMode};
use wasm_bindgen::prelude::*;

fn rgba(t: &Tensor) -> Vec<u8> {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let d = t.data();
    let mut out = Vec::with_capacity(4 * h * w);
    for i in 0..h * w {
        for c in 0..3 {
            out.push((((d[c * h * w + i].clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8);
        }
        out.push(255);
    }
    out
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// A scene with one condition map, as RGBA pixel buffers.
#[wasm_bindgen]
pub struct Rendered {
    image: Vec<u8>,
    condition: Vec<u8>,
    prompt: String,
}

#[wasm_bindgen]
impl Rendered {
    #[wasm_bindgen(getter)]
    pub fn image(&self) -> Vec<u8> {
        self.image.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn condition(&self) -> Vec<u8> {
        self.condition.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn prompt(&self) -> String {
        self.prompt.clone()
    }
}

/// Scene `seed` at `size` pixels with the condition map of `task`.
#[wasm_bindgen(js_name = render)]
pub fn render_js(seed: u64, size: usize, task: &str) -> Result<Rendered, JsError> {
    render(seed, size, task).map_err(|e| JsError::new(&e))
}

pub fn render(seed: u64, size: usize, task: &str) -> Result<Rendered, String> {
    if !(8..=256).contains(&size) {
        return Err(format!("size {size} outside 8..=256"));
    }
    let spec = *tasks::task(task).map_err(err)?;
    let s = generate_sample(seed, size, &[spec], &Config::default().conditions()).map_err(err)?;
    Ok(Rendered {
        image: rgba(&s.image),
        condition: rgba(&s.conditions[spec.key]),
        prompt: s.prompt,
    })
}

/// Task keys in adapter order.
#[wasm_bindgen]
pub fn task_keys() -> Vec<String> {
    tasks::registry().iter().map(|t| t.key.to_string()).collect()
}

/// Zero-shot weights of the nine trained tasks for `instruction`, as
/// `key=weight` lines sorted by weight.
#[wasm_bindgen(js_name = task_weights)]
pub fn task_weights_js(instruction: &str) -> Result<String, JsError> {
    task_weights(instruction).map_err(|e| JsError::new(&e))
}

pub fn task_weights(instruction: &str) -> Result<String, String> {
    let reg = tasks::registry();
    let w = tasks::estimate_task_weights(instruction, &WeightMode::Similarity, reg).map_err(err)?;
    let mut rows: Vec<(&str, f64)> = reg.iter().map(|t| t.key).zip(w).collect();
    rows.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(rows.iter().map(|(k, v)| format!("{k}={v:.3}\n")).collect())
}
