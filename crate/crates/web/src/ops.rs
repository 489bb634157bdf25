//! The demo operations on plain buffers, independent of the JS boundary.

use dermclass::augment::{augment_sample, class_weights, AugmentConfig, TransformParams};
use dermclass::classes::LesionClass;
use dermclass::image::{self, ImageTensor};
use dermclass::seed::rng_from_seed;
use dermclass::synthetic::render;

fn from_rgba(rgba: &[u8], width: usize, height: usize) -> Result<ImageTensor, String> {
    if rgba.len() != width * height * 4 {
        return Err(format!("{} bytes for a {width}x{height} RGBA image", rgba.len()));
    }
    let rgb = rgba.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect();
    ImageTensor::from_u8(height, width, rgb).map_err(|e| e.to_string())
}

fn to_rgba(img: &ImageTensor) -> Vec<u8> {
    let img = img.to_integer();
    img.as_u8()
        .expect("integer form")
        .chunks_exact(3)
        .flat_map(|p| [p[0], p[1], p[2], 255])
        .collect()
}

pub fn augment(
    rgba: &[u8],
    width: usize,
    height: usize,
    cfg: &AugmentConfig,
    index: usize,
) -> Result<(Vec<u8>, TransformParams), String> {
    cfg.validate().map_err(|e| e.to_string())?;
    let img = from_rgba(rgba, width, height)?;
    let (out, params) = augment_sample(&img, cfg, 0, index).map_err(|e| e.to_string())?;
    Ok((to_rgba(&out), params))
}

pub fn resize(rgba: &[u8], width: usize, height: usize, out_width: usize, out_height: usize) -> Result<Vec<u8>, String> {
    let img = from_rgba(rgba, width, height)?;
    let out = image::resize(&img, out_height, out_width).map_err(|e| e.to_string())?;
    Ok(to_rgba(&out))
}

pub fn capped_counts(counts: &[u32], cap: u32) -> Vec<u32> {
    counts.iter().map(|&c| c.min(cap)).collect()
}

pub fn balanced_weights(counts: &[u32]) -> Result<Vec<f64>, String> {
    let counts: Vec<usize> = counts.iter().map(|&c| c as usize).collect();
    class_weights(&counts).map(|w| w.weights).map_err(|e| e.to_string())
}

pub fn sample_lesion(class_code: u8, width: usize, height: usize, seed: u64) -> Result<Vec<u8>, String> {
    let class = LesionClass::from_code(class_code).ok_or_else(|| format!("no class with code {class_code}"))?;
    Ok(to_rgba(&render(class, height, width, &mut rng_from_seed(seed))))
}
