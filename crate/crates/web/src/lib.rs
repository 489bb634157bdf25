//! Browser bindings for the data-side steps of the pipeline: seeded
//! augmentation, bilinear resizing and class capping with balanced weights.
//!
//! Pixel buffers cross the boundary as RGBA bytes, the layout of a canvas
//! `ImageData`; alpha is dropped on the way in and set opaque on the way out.

use wasm_bindgen::prelude::*;

pub mod ops;

#[wasm_bindgen]
pub struct Augmented {
    rgba: Vec<u8>,
    params: dermclass::augment::TransformParams,
}

#[wasm_bindgen]
impl Augmented {
    #[wasm_bindgen(getter)]
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn rotation_deg(&self) -> f64 {
        self.params.rotation_deg
    }

    #[wasm_bindgen(getter)]
    pub fn shear_deg(&self) -> f64 {
        self.params.shear_deg
    }

    #[wasm_bindgen(getter)]
    pub fn tx(&self) -> f64 {
        self.params.tx
    }

    #[wasm_bindgen(getter)]
    pub fn ty(&self) -> f64 {
        self.params.ty
    }

    #[wasm_bindgen(getter)]
    pub fn hflip(&self) -> bool {
        self.params.hflip
    }

    #[wasm_bindgen(getter)]
    pub fn vflip(&self) -> bool {
        self.params.vflip
    }
}

/// Draws the `index`-th augmentation of an image under the given ranges.
#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn augment(
    rgba: &[u8],
    width: usize,
    height: usize,
    max_rotation_deg: f64,
    max_shear_deg: f64,
    max_translate_frac: f64,
    hflip_prob: f64,
    vflip_prob: f64,
    seed: u32,
    index: usize,
) -> Result<Augmented, JsError> {
    let cfg = dermclass::augment::AugmentConfig {
        max_rotation_deg,
        max_shear_deg,
        max_translate_frac,
        hflip_prob,
        vflip_prob,
        seed: seed as u64,
        ..Default::default()
    };
    let (rgba, params) = ops::augment(rgba, width, height, &cfg, index).map_err(|e| JsError::new(&e))?;
    Ok(Augmented { rgba, params })
}

#[wasm_bindgen]
pub fn resize(rgba: &[u8], width: usize, height: usize, out_width: usize, out_height: usize) -> Result<Vec<u8>, JsError> {
    ops::resize(rgba, width, height, out_width, out_height).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn capped_counts(counts: &[u32], cap: u32) -> Vec<u32> {
    ops::capped_counts(counts, cap)
}

#[wasm_bindgen]
pub fn balanced_weights(counts: &[u32]) -> Result<Vec<f64>, JsError> {
    ops::balanced_weights(counts).map_err(|e| JsError::new(&e))
}

/// A synthetic lesion image to experiment on.
#[wasm_bindgen]
pub fn sample_lesion(class_code: u8, width: usize, height: usize, seed: u32) -> Result<Vec<u8>, JsError> {
    ops::sample_lesion(class_code, width, height, seed as u64).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn class_names() -> Vec<String> {
    dermclass::CLASS_NAMES.iter().map(|s| s.to_string()).collect()
}
