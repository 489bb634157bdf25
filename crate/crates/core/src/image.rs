//! RGB rasters and the per-image preprocessing steps.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("image file not found: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("failed to decode {}: {reason}", .path.display())]
    DecodeError { path: PathBuf, reason: String },
    #[error("failed to encode {}: {reason}", .path.display())]
    EncodeError { path: PathBuf, reason: String },
    #[error("image has no pixels")]
    EmptyImage,
    #[error("image is already normalized")]
    AlreadyNormalized,
    #[error("pixel buffer of length {len} does not match {height}x{width}x3")]
    BadLength {
        height: usize,
        width: usize,
        len: usize,
    },
    #[error("normalized value {0} outside [0, 1]")]
    OutOfRange(f32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PixelForm {
    Integer,
    Normalized,
}

/// Row-major interleaved RGB samples.
#[derive(Debug, Clone, PartialEq)]
pub enum PixelData {
    Integer(Vec<u8>),
    Normalized(Vec<f32>),
}

impl PixelData {
    pub fn len(&self) -> usize {
        match self {
            PixelData::Integer(v) => v.len(),
            PixelData::Normalized(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// An `height x width x 3` raster in RGB order.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: PixelData,
}

pub const CHANNELS: usize = 3;

impl ImageTensor {
    pub fn from_u8(height: usize, width: usize, data: Vec<u8>) -> Result<Self, ImageError> {
        Self::new(height, width, PixelData::Integer(data))
    }

    pub fn from_f32(height: usize, width: usize, data: Vec<f32>) -> Result<Self, ImageError> {
        if let Some(&v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(ImageError::OutOfRange(v));
        }
        Self::new(height, width, PixelData::Normalized(data))
    }

    fn new(height: usize, width: usize, data: PixelData) -> Result<Self, ImageError> {
        if data.len() != height * width * CHANNELS {
            return Err(ImageError::BadLength {
                height,
                width,
                len: data.len(),
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Builds an image from a per-pixel function returning RGB bytes.
    pub fn from_fn_u8(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> [u8; 3],
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        Self {
            height,
            width,
            data: PixelData::Integer(data),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn form(&self) -> PixelForm {
        match self.data {
            PixelData::Integer(_) => PixelForm::Integer,
            PixelData::Normalized(_) => PixelForm::Normalized,
        }
    }

    pub fn data(&self) -> &PixelData {
        &self.data
    }

    pub fn as_u8(&self) -> Option<&[u8]> {
        match &self.data {
            PixelData::Integer(v) => Some(v),
            PixelData::Normalized(_) => None,
        }
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            PixelData::Normalized(v) => Some(v),
            PixelData::Integer(_) => None,
        }
    }

    /// Sample value as a real number in the image's own scale.
    #[inline]
    pub(crate) fn value(&self, y: usize, x: usize, c: usize) -> f64 {
        let i = (y * self.width + x) * CHANNELS + c;
        match &self.data {
            PixelData::Integer(v) => v[i] as f64,
            PixelData::Normalized(v) => v[i] as f64,
        }
    }

    /// Rebuilds an image of the same form from real-valued samples, rounding
    /// half away from zero and clamping for the integer form.
    pub(crate) fn with_values(
        form: PixelForm,
        height: usize,
        width: usize,
        values: impl Iterator<Item = f64>,
    ) -> Self {
        let data = match form {
            PixelForm::Integer => {
                PixelData::Integer(values.map(|v| v.round().clamp(0.0, 255.0) as u8).collect())
            }
            PixelForm::Normalized => {
                PixelData::Normalized(values.map(|v| v.clamp(0.0, 1.0) as f32).collect())
            }
        };
        Self {
            height,
            width,
            data,
        }
    }

    /// Reverses column order.
    pub fn hflip(&self) -> Self {
        self.remap(|y, x| (y, self.width - 1 - x))
    }

    /// Reverses row order.
    pub fn vflip(&self) -> Self {
        self.remap(|y, x| (self.height - 1 - y, x))
    }

    fn remap(&self, src: impl Fn(usize, usize) -> (usize, usize)) -> Self {
        fn gather<T: Copy>(
            v: &[T],
            h: usize,
            w: usize,
            src: &impl Fn(usize, usize) -> (usize, usize),
        ) -> Vec<T> {
            let mut out = Vec::with_capacity(v.len());
            for y in 0..h {
                for x in 0..w {
                    let (sy, sx) = src(y, x);
                    let i = (sy * w + sx) * CHANNELS;
                    out.extend_from_slice(&v[i..i + CHANNELS]);
                }
            }
            out
        }
        let data = match &self.data {
            PixelData::Integer(v) => PixelData::Integer(gather(v, self.height, self.width, &src)),
            PixelData::Normalized(v) => {
                PixelData::Normalized(gather(v, self.height, self.width, &src))
            }
        };
        Self {
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Converts a normalized image back to bytes (`round(v * 255)`).
    pub fn to_integer(&self) -> Self {
        match &self.data {
            PixelData::Integer(_) => self.clone(),
            PixelData::Normalized(v) => Self {
                height: self.height,
                width: self.width,
                data: PixelData::Integer(
                    v.iter()
                        .map(|&x| (x as f64 * 255.0).round().clamp(0.0, 255.0) as u8)
                        .collect(),
                ),
            },
        }
    }

    /// Writes the image as an 8-bit RGB PNG.
    pub fn save_png(&self, path: &Path) -> Result<(), ImageError> {
        let bytes = self.to_integer();
        let buf = bytes.as_u8().expect("integer form").to_vec();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, buf)
            .expect("buffer length checked at construction")
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| ImageError::EncodeError {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })
    }
}

/// Decodes a JPEG or PNG file into an integer-form RGB tensor.
pub fn load_image(path: &Path) -> Result<ImageTensor, ImageError> {
    if !path.exists() {
        return Err(ImageError::MissingFile(path.to_path_buf()));
    }
    let decoded = image::ImageReader::open(path)
        .and_then(|r| r.with_guessed_format())
        .map_err(|e| ImageError::DecodeError {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .decode()
        .map_err(|e| ImageError::DecodeError {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    let rgb = decoded.to_rgb8();
    let (w, h) = rgb.dimensions();
    ImageTensor::from_u8(h as usize, w as usize, rgb.into_raw())
}

/// Source coordinate for output index `i` under pixel-center alignment.
#[inline]
pub(crate) fn center_aligned(i: usize, scale: f64, max: usize) -> f64 {
    ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, max as f64)
}

/// `a + (b - a) * t`, exact whenever `a == b`.
#[inline]
pub(crate) fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// Bilinear sample at real coordinates already clamped into the raster.
#[inline]
pub(crate) fn sample_bilinear(img: &ImageTensor, sy: f64, sx: f64, c: usize) -> f64 {
    let y0 = sy.floor() as usize;
    let x0 = sx.floor() as usize;
    let y1 = (y0 + 1).min(img.height - 1);
    let x1 = (x0 + 1).min(img.width - 1);
    let ty = sy - y0 as f64;
    let tx = sx - x0 as f64;
    let top = lerp(img.value(y0, x0, c), img.value(y0, x1, c), tx);
    let bottom = lerp(img.value(y1, x0, c), img.value(y1, x1, c), tx);
    lerp(top, bottom, ty)
}

/// Bilinear resize with pixel-center alignment. Output keeps the input form.
pub fn resize(image: &ImageTensor, out_h: usize, out_w: usize) -> Result<ImageTensor, ImageError> {
    if image.height == 0 || image.width == 0 || out_h == 0 || out_w == 0 {
        return Err(ImageError::EmptyImage);
    }
    if out_h == image.height && out_w == image.width {
        return Ok(image.clone());
    }
    let sy = image.height as f64 / out_h as f64;
    let sx = image.width as f64 / out_w as f64;
    let xs: Vec<f64> = (0..out_w)
        .map(|x| center_aligned(x, sx, image.width - 1))
        .collect();
    let mut values = Vec::with_capacity(out_h * out_w * CHANNELS);
    for y in 0..out_h {
        let src_y = center_aligned(y, sy, image.height - 1);
        for &src_x in &xs {
            for c in 0..CHANNELS {
                values.push(sample_bilinear(image, src_y, src_x, c));
            }
        }
    }
    Ok(ImageTensor::with_values(
        image.form(),
        out_h,
        out_w,
        values.into_iter(),
    ))
}

/// Divides every byte by 255.
pub fn normalize(image: &ImageTensor) -> Result<ImageTensor, ImageError> {
    match &image.data {
        PixelData::Normalized(_) => Err(ImageError::AlreadyNormalized),
        PixelData::Integer(v) => Ok(ImageTensor {
            height: image.height,
            width: image.width,
            data: PixelData::Normalized(v.iter().map(|&b| b as f32 / 255.0).collect()),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rgb_gray(h: usize, w: usize, vals: &[u8]) -> ImageTensor {
        ImageTensor::from_u8(h, w, vals.iter().flat_map(|&v| [v, v, v]).collect()).unwrap()
    }

    #[test]
    fn png_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("px.png");
        let pixels: Vec<u8> = vec![255, 0, 0, 0, 255, 0, 0, 0, 255, 10, 20, 30];
        let img = ImageTensor::from_u8(2, 2, pixels.clone()).unwrap();
        img.save_png(&path).unwrap();
        let loaded = load_image(&path).unwrap();
        assert_eq!(loaded.height(), 2);
        assert_eq!(loaded.width(), 2);
        assert_eq!(loaded.as_u8().unwrap(), &pixels[..]);
    }

    #[test]
    fn missing_and_truncated_files() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.png");
        assert!(matches!(load_image(&missing), Err(ImageError::MissingFile(_))));

        let path = dir.path().join("t.png");
        ImageTensor::from_fn_u8(16, 16, |y, x| [y as u8, x as u8, 7])
            .save_png(&path)
            .unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_image(&path), Err(ImageError::DecodeError { .. })));
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = ImageTensor::from_fn_u8(5, 7, |y, x| [(y * 7 + x) as u8, 3, 200]);
        assert_eq!(resize(&img, 5, 7).unwrap(), img);

        let constant = rgb_gray(2, 2, &[93, 93, 93, 93]);
        for (h, w) in [(1, 1), (3, 5), (7, 2)] {
            let r = resize(&constant, h, w).unwrap();
            assert!(r.as_u8().unwrap().iter().all(|&v| v == 93));
        }
    }

    #[test]
    fn resize_one_by_two_to_one_by_three() {
        // scale 2/3: x=1 maps to (1.5 * 2/3) - 0.5 = 0.5, halfway between 0 and 255.
        // 127.5 rounds half away from zero to 128; the outer pixels clamp.
        let img = rgb_gray(1, 2, &[0, 255]);
        let r = resize(&img, 1, 3).unwrap();
        assert_eq!(r.as_u8().unwrap(), &[0, 0, 0, 128, 128, 128, 255, 255, 255]);
    }

    #[test]
    fn resize_rejects_empty() {
        let img = rgb_gray(1, 1, &[4]);
        assert!(matches!(resize(&img, 0, 3), Err(ImageError::EmptyImage)));
    }

    #[test]
    fn normalize_values() {
        let img = rgb_gray(1, 3, &[0, 51, 255]);
        let n = normalize(&img).unwrap();
        let v = n.as_f32().unwrap();
        assert_eq!(v[0], 0.0);
        assert!((v[3] - 0.2).abs() < 1e-7);
        assert_eq!(v[6], 1.0);
        assert_eq!(n.form(), PixelForm::Normalized);
        assert!(matches!(normalize(&n), Err(ImageError::AlreadyNormalized)));

        let zeros = rgb_gray(2, 2, &[0; 4]);
        assert!(normalize(&zeros).unwrap().as_f32().unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn flips() {
        let img = rgb_gray(2, 2, &[1, 2, 3, 4]);
        assert_eq!(img.hflip(), rgb_gray(2, 2, &[2, 1, 4, 3]));
        assert_eq!(img.vflip(), rgb_gray(2, 2, &[3, 4, 1, 2]));
    }

    proptest! {
        #[test]
        fn resize_shape_and_constancy(h in 1usize..9, w in 1usize..9, oh in 1usize..12, ow in 1usize..12, c in 0u8..=255) {
            let img = ImageTensor::from_u8(h, w, vec![c; h * w * 3]).unwrap();
            let r = resize(&img, oh, ow).unwrap();
            prop_assert_eq!((r.height(), r.width()), (oh, ow));
            prop_assert!(r.as_u8().unwrap().iter().all(|&v| v == c));

            let n = normalize(&img).unwrap();
            let rn = resize(&n, oh, ow).unwrap();
            let expected = c as f32 / 255.0;
            prop_assert!(rn.as_f32().unwrap().iter().all(|&v| v == expected));
        }

        #[test]
        fn normalize_then_denormalize_is_identity(bytes in proptest::collection::vec(any::<u8>(), 12)) {
            let img = ImageTensor::from_u8(2, 2, bytes).unwrap();
            let n = normalize(&img).unwrap();
            prop_assert_eq!(normalize(&n.to_integer()).unwrap(), n.clone());
            prop_assert_eq!(n.to_integer(), img);
        }
    }
}
