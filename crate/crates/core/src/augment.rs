//! Training-set rebalancing and seeded affine augmentation.

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::classes::NUM_CLASSES;
use crate::dataset::SampleRecord;
use crate::image::{sample_bilinear, ImageTensor, CHANNELS};
use crate::seed::{derive_seed, rng_from_seed, Rng};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AugmentError {
    #[error("class {0} has no samples")]
    EmptyClass(usize),
    #[error("transform is singular (determinant {0})")]
    SingularTransform(f64),
    #[error("invalid augmentation config: {0}")]
    InvalidConfig(String),
    #[error("{records} records but {images} images")]
    LengthMismatch { records: usize, images: usize },
}

/// Keeps at most `cap` records per class.
///
/// Over-represented classes are subsampled uniformly without replacement from
/// a per-class stream derived from `seed`. Surviving records keep their input
/// order.
pub fn cap_classes(records: &[SampleRecord], cap: usize, seed: u64) -> Vec<SampleRecord> {
    let mut keep = vec![true; records.len()];
    for code in 0..NUM_CLASSES {
        let members: Vec<usize> = records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.dx.code() as usize == code)
            .map(|(i, _)| i)
            .collect();
        if members.len() <= cap {
            continue;
        }
        let mut rng = rng_from_seed(derive_seed(&[seed, code as u64]));
        let chosen = index::sample(&mut rng, members.len(), cap);
        let mut selected = vec![false; members.len()];
        for i in chosen {
            selected[i] = true;
        }
        for (pos, &i) in members.iter().enumerate() {
            keep[i] = selected[pos];
        }
    }
    records
        .iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(r, _)| r.clone())
        .collect()
}

/// Per-class loss multipliers indexed by label code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub weights: Vec<f64>,
}

impl ClassWeights {
    pub fn uniform(k: usize) -> Self {
        Self {
            weights: vec![1.0; k],
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn get(&self, class: usize) -> f64 {
        self.weights[class]
    }
}

/// Balanced weights `N / (K * n_c)`.
pub fn class_weights(counts: &[usize]) -> Result<ClassWeights, AugmentError> {
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(AugmentError::EmptyClass(c));
    }
    let total: usize = counts.iter().sum();
    let k = counts.len() as f64;
    Ok(ClassWeights {
        weights: counts
            .iter()
            .map(|&n| total as f64 / (k * n as f64))
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FillPolicy {
    /// Out-of-bounds samples take the value of the closest edge pixel.
    #[default]
    NearestEdge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    pub max_rotation_deg: f64,
    pub max_shear_deg: f64,
    pub max_translate_frac: f64,
    pub fill_policy: FillPolicy,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            hflip_prob: 0.5,
            vflip_prob: 0.5,
            max_rotation_deg: 20.0,
            max_shear_deg: 10.0,
            max_translate_frac: 0.1,
            fill_policy: FillPolicy::NearestEdge,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// A config that leaves every image untouched.
    pub fn disabled(seed: u64) -> Self {
        Self {
            hflip_prob: 0.0,
            vflip_prob: 0.0,
            max_rotation_deg: 0.0,
            max_shear_deg: 0.0,
            max_translate_frac: 0.0,
            fill_policy: FillPolicy::NearestEdge,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        let bad = |what: &str| Err(AugmentError::InvalidConfig(what.to_string()));
        if !(0.0..=1.0).contains(&self.hflip_prob) || !(0.0..=1.0).contains(&self.vflip_prob) {
            return bad("flip probabilities must lie in [0, 1]");
        }
        if !(self.max_rotation_deg >= 0.0 && self.max_rotation_deg.is_finite()) {
            return bad("max_rotation_deg must be a non-negative number");
        }
        // tan(90°) is unbounded; shear must stay strictly below it.
        if !(0.0..90.0).contains(&self.max_shear_deg) {
            return bad("max_shear_deg must lie in [0, 90)");
        }
        if !(0.0..1.0).contains(&self.max_translate_frac) {
            return bad("max_translate_frac must lie in [0, 1)");
        }
        Ok(())
    }
}

/// 2x3 matrix mapping centered output coordinates `(x, y, 1)` to centered
/// source coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub m: [[f64; 3]; 2],
}

/// Snaps trig values within 1e-12 of -1, 0 or 1 onto them, so that quarter
/// turns come out exact.
fn snap(v: f64) -> f64 {
    for target in [-1.0, 0.0, 1.0] {
        if (v - target).abs() < 1e-12 {
            return target;
        }
    }
    v
}

impl AffineTransform {
    pub const IDENTITY: AffineTransform = AffineTransform {
        m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
    };

    /// `translate ∘ rotate ∘ shear` about the image center. Shear is along
    /// the x axis; translations are in pixels.
    pub fn compose(rotation_deg: f64, shear_deg: f64, tx: f64, ty: f64) -> Self {
        let theta = rotation_deg.to_radians();
        let (s, c) = (snap(theta.sin()), snap(theta.cos()));
        let k = snap(shear_deg.to_radians().tan());
        Self {
            m: [[c, c * k - s, tx], [s, s * k + c, ty]],
        }
    }

    pub fn determinant(&self) -> f64 {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    pub fn inverse(&self) -> Result<Self, AugmentError> {
        let det = self.determinant();
        if det.abs() < 1e-12 || !det.is_finite() {
            return Err(AugmentError::SingularTransform(det));
        }
        let [[a, b, tx], [c, d, ty]] = self.m;
        let (ia, ib, ic, id) = (d / det, -b / det, -c / det, a / det);
        Ok(Self {
            m: [
                [ia, ib, -(ia * tx + ib * ty)],
                [ic, id, -(ic * tx + id * ty)],
            ],
        })
    }

    #[inline]
    fn map(&self, u: f64, v: f64) -> (f64, f64) {
        let [[a, b, tx], [c, d, ty]] = self.m;
        (a * u + b * v + tx, c * u + d * v + ty)
    }
}

/// The parameters drawn for one augmented sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformParams {
    pub rotation_deg: f64,
    pub shear_deg: f64,
    pub tx: f64,
    pub ty: f64,
    pub hflip: bool,
    pub vflip: bool,
}

impl TransformParams {
    pub fn transform(&self) -> AffineTransform {
        AffineTransform::compose(self.rotation_deg, self.shear_deg, self.tx, self.ty)
    }
}

fn symmetric(rng: &mut Rng, bound: f64) -> f64 {
    rng.random_range(-bound..=bound)
}

/// Draws one transform for an image of `width x height` pixels.
///
/// Exactly six values are drawn, in this order: rotation, shear, x and y
/// translation, horizontal flip, vertical flip. Flips compare a uniform
/// `[0, 1)` draw against their probability.
pub fn sample_transform(
    cfg: &AugmentConfig,
    width: usize,
    height: usize,
    rng: &mut Rng,
) -> TransformParams {
    let rotation_deg = symmetric(rng, cfg.max_rotation_deg);
    let shear_deg = symmetric(rng, cfg.max_shear_deg);
    let tx = symmetric(rng, cfg.max_translate_frac) * width as f64;
    let ty = symmetric(rng, cfg.max_translate_frac) * height as f64;
    let hflip = rng.random::<f64>() < cfg.hflip_prob;
    let vflip = rng.random::<f64>() < cfg.vflip_prob;
    TransformParams {
        rotation_deg,
        shear_deg,
        tx,
        ty,
        hflip,
        vflip,
    }
}

/// Flips, then inverse-warps with bilinear sampling and nearest-edge fill.
pub fn apply_transform(
    image: &ImageTensor,
    t: &AffineTransform,
    hflip: bool,
    vflip: bool,
) -> Result<ImageTensor, AugmentError> {
    let det = t.determinant();
    if det.abs() < 1e-12 || !det.is_finite() {
        return Err(AugmentError::SingularTransform(det));
    }
    let mut img = image.clone();
    if hflip {
        img = img.hflip();
    }
    if vflip {
        img = img.vflip();
    }
    if t.is_identity() {
        return Ok(img);
    }
    let (h, w) = (img.height(), img.width());
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let mut values = Vec::with_capacity(h * w * CHANNELS);
    for y in 0..h {
        for x in 0..w {
            let (su, sv) = t.map(x as f64 - cx, y as f64 - cy);
            let sx = (su + cx).clamp(0.0, (w - 1) as f64);
            let sy = (sv + cy).clamp(0.0, (h - 1) as f64);
            for c in 0..CHANNELS {
                values.push(sample_bilinear(&img, sy, sx, c));
            }
        }
    }
    Ok(ImageTensor::with_values(img.form(), h, w, values.into_iter()))
}

/// Seed of the transform applied to training record `index` during `epoch`.
pub fn sample_seed(cfg: &AugmentConfig, epoch: u64, index: usize) -> u64 {
    derive_seed(&[cfg.seed, epoch, index as u64])
}

/// Augments a single training image. Depends only on `(cfg, epoch, index)`
/// and the image, so any worker can produce any sample.
pub fn augment_sample(
    image: &ImageTensor,
    cfg: &AugmentConfig,
    epoch: u64,
    index: usize,
) -> Result<(ImageTensor, TransformParams), AugmentError> {
    let mut rng = rng_from_seed(sample_seed(cfg, epoch, index));
    let p = sample_transform(cfg, image.width(), image.height(), &mut rng);
    let out = apply_transform(image, &p.transform(), p.hflip, p.vflip)?;
    Ok((out, p))
}

/// One augmented `(image, label_code)` pair per training record for `epoch`.
pub fn augmented_stream<'a>(
    records: &'a [SampleRecord],
    images: &'a [ImageTensor],
    cfg: &'a AugmentConfig,
    epoch: u64,
) -> Result<impl Iterator<Item = Result<(ImageTensor, u8), AugmentError>> + 'a, AugmentError> {
    cfg.validate()?;
    if records.len() != images.len() {
        return Err(AugmentError::LengthMismatch {
            records: records.len(),
            images: images.len(),
        });
    }
    Ok(records
        .iter()
        .zip(images)
        .enumerate()
        .map(move |(i, (r, img))| {
            augment_sample(img, cfg, epoch, i).map(|(out, _)| (out, r.dx.code()))
        }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classes::LesionClass;
    use crate::dataset::class_counts;
    use crate::image::normalize;
    use proptest::prelude::*;

    fn record(i: usize, dx: LesionClass) -> SampleRecord {
        SampleRecord {
            lesion_id: format!("L{i}"),
            image_id: format!("I{i}"),
            dx,
            dx_type: "histo".into(),
            age: Some(40.0),
            sex: "male".into(),
            localization: "back".into(),
            label_code: Some(dx.code()),
        }
    }

    fn gray(h: usize, w: usize, vals: &[u8]) -> ImageTensor {
        ImageTensor::from_u8(h, w, vals.iter().flat_map(|&v| [v, v, v]).collect()).unwrap()
    }

    fn channel0(img: &ImageTensor) -> Vec<u8> {
        img.as_u8().unwrap().iter().step_by(3).copied().collect()
    }

    #[test]
    fn capping_scaled_paper_counts() {
        let mut recs: Vec<_> = (0..5364).map(|i| record(i, LesionClass::Nv)).collect();
        recs.extend((0..92).map(|i| record(10_000 + i, LesionClass::Df)));
        let capped = cap_classes(&recs, 450, 9);
        let counts = class_counts(&capped);
        assert_eq!(counts[LesionClass::Nv.code() as usize], 450);
        assert_eq!(counts[LesionClass::Df.code() as usize], 92);
        assert_eq!(capped, cap_classes(&recs, 450, 9));
        assert_ne!(capped, cap_classes(&recs, 450, 10));
        assert_eq!(cap_classes(&recs, 6000, 9), recs);
    }

    #[test]
    fn weights_closed_form() {
        let w = class_weights(&[10; 7]).unwrap();
        assert!(w.weights.iter().all(|&x| x == 1.0));

        let paper = [327, 514, 1099, 115, 1113, 6705, 142];
        let w = class_weights(&paper).unwrap();
        assert!((w.get(5) - 10015.0 / (7.0 * 6705.0)).abs() < 1e-12);
        assert!((w.get(5) - 0.21336).abs() < 5e-5);
        assert!((w.get(3) - 12.4410).abs() < 5e-5);
        assert_eq!(class_weights(&[3, 0, 2]), Err(AugmentError::EmptyClass(1)));
    }

    #[test]
    fn degenerate_config_gives_identity() {
        let cfg = AugmentConfig::disabled(5);
        let mut rng = rng_from_seed(1);
        let p = sample_transform(&cfg, 10, 10, &mut rng);
        assert!(p.transform().is_identity());
        assert!(!p.hflip && !p.vflip);
    }

    #[test]
    fn quarter_turn_matrix_is_exact() {
        let t = AffineTransform::compose(90.0, 0.0, 0.0, 0.0);
        assert_eq!(t.m, [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0]]);
    }

    #[test]
    fn quarter_turn_of_three_by_three() {
        // Output (x, y) samples centered source (-v, u): out[y][x] = in[x][2 - y].
        let img = gray(3, 3, &[1, 2, 3, 4, 5, 6, 7, 8, 9]);
        let t = AffineTransform::compose(90.0, 0.0, 0.0, 0.0);
        let out = apply_transform(&img, &t, false, false).unwrap();
        assert_eq!(channel0(&out), [3, 6, 9, 2, 5, 8, 1, 4, 7]);
    }

    #[test]
    fn flips_precede_warp() {
        let img = gray(2, 2, &[1, 2, 3, 4]);
        let out = apply_transform(&img, &AffineTransform::IDENTITY, true, false).unwrap();
        assert_eq!(channel0(&out), [2, 1, 4, 3]);
    }

    #[test]
    fn singular_transform_rejected() {
        let t = AffineTransform {
            m: [[1.0, 2.0, 0.0], [2.0, 4.0, 0.0]],
        };
        let img = gray(2, 2, &[1, 2, 3, 4]);
        assert!(matches!(
            apply_transform(&img, &t, false, false),
            Err(AugmentError::SingularTransform(_))
        ));
        assert!(t.inverse().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(AugmentConfig::default().validate().is_ok());
        let cfg = AugmentConfig {
            max_shear_deg: 90.0,
            ..AugmentConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = AugmentConfig {
            hflip_prob: 1.5,
            ..AugmentConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = AugmentConfig {
            max_translate_frac: 1.0,
            ..AugmentConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn warp_round_trip_on_gradient() {
        let n = 48;
        let img = ImageTensor::from_fn_u8(n, n, |y, x| {
            [(2 * x + y) as u8, (3 * y) as u8, (x + y) as u8]
        });
        let t = AffineTransform::compose(8.0, 4.0, 1.5, -2.0);
        let there = apply_transform(&img, &t, false, false).unwrap();
        let back = apply_transform(&there, &t.inverse().unwrap(), false, false).unwrap();
        // Compare the central region, where both warps sample in bounds.
        let (mut err, mut count) = (0.0, 0usize);
        let (a, b) = (img.as_u8().unwrap(), back.as_u8().unwrap());
        for y in 12..n - 12 {
            for x in 12..n - 12 {
                for c in 0..3 {
                    let i = (y * n + x) * 3 + c;
                    err += (a[i] as f64 - b[i] as f64).abs();
                    count += 1;
                }
            }
        }
        assert!(err / count as f64 <= 2.0, "mean abs error {}", err / count as f64);
    }

    #[test]
    fn stream_with_disabled_config_is_plain() {
        let recs: Vec<_> = (0..3).map(|i| record(i, LesionClass::ALL[i])).collect();
        let images: Vec<_> = (0..3)
            .map(|i| normalize(&ImageTensor::from_fn_u8(4, 5, |y, x| [(i * 9 + y * 5 + x) as u8, 1, 2])).unwrap())
            .collect();
        let cfg = AugmentConfig::disabled(1);
        let out: Vec<_> = augmented_stream(&recs, &images, &cfg, 1)
            .unwrap()
            .collect::<Result<_, _>>()
            .unwrap();
        for (i, (img, label)) in out.iter().enumerate() {
            assert_eq!(img, &images[i]);
            assert_eq!(*label, recs[i].dx.code());
        }
    }

    #[test]
    fn stream_determinism_and_epoch_variation() {
        let recs: Vec<_> = (0..4).map(|i| record(i, LesionClass::Nv)).collect();
        let images: Vec<_> = (0..4)
            .map(|_| normalize(&ImageTensor::from_fn_u8(9, 9, |y, x| [(y * 20) as u8, (x * 20) as u8, 0])).unwrap())
            .collect();
        let cfg = AugmentConfig::default();
        let run = |epoch| -> Vec<ImageTensor> {
            augmented_stream(&recs, &images, &cfg, epoch)
                .unwrap()
                .map(|r| r.unwrap().0)
                .collect()
        };
        assert_eq!(run(1), run(1));
        assert_ne!(sample_seed(&cfg, 1, 0), sample_seed(&cfg, 2, 0));
        let p1 = augment_sample(&images[0], &cfg, 1, 0).unwrap().1;
        let p2 = augment_sample(&images[0], &cfg, 2, 0).unwrap().1;
        assert_ne!(p1, p2);
        assert_ne!(run(1), run(2));
    }

    proptest! {
        #[test]
        fn flip_group_laws(h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
            let mut rng = rng_from_seed(seed);
            let data: Vec<u8> = (0..h * w * 3).map(|_| rng.random()).collect();
            let img = ImageTensor::from_u8(h, w, data).unwrap();
            prop_assert_eq!(img.hflip().hflip(), img.clone());
            prop_assert_eq!(img.vflip().vflip(), img.clone());
            prop_assert_eq!(img.hflip().vflip(), img.vflip().hflip());
            let id = apply_transform(&img, &AffineTransform::IDENTITY, false, false).unwrap();
            prop_assert_eq!(id, img);
        }

        #[test]
        fn constant_image_is_fixed_point(v in 0u8..=255, seed in any::<u64>()) {
            let img = ImageTensor::from_u8(7, 6, vec![v; 7 * 6 * 3]).unwrap();
            let norm = normalize(&img).unwrap();
            let mut rng = rng_from_seed(seed);
            let p = sample_transform(&AugmentConfig::default(), 6, 7, &mut rng);
            let t = p.transform();
            prop_assert_eq!(apply_transform(&img, &t, p.hflip, p.vflip).unwrap(), img);
            prop_assert_eq!(apply_transform(&norm, &t, p.hflip, p.vflip).unwrap(), norm);
        }

        #[test]
        fn cap_counts_and_subset(counts in proptest::collection::vec(0usize..40, 7), cap in 1usize..30, seed in any::<u64>()) {
            let mut recs = Vec::new();
            for (c, &n) in counts.iter().enumerate() {
                for _ in 0..n {
                    recs.push(record(recs.len(), LesionClass::ALL[c]));
                }
            }
            let capped = cap_classes(&recs, cap, seed);
            let out = class_counts(&capped);
            for c in 0..7 {
                prop_assert_eq!(out[c], counts[c].min(cap));
            }
            prop_assert!(capped.iter().all(|r| recs.contains(r)));
        }

        #[test]
        fn weights_balance_total(counts in proptest::collection::vec(1usize..10_000, 2..9)) {
            let w = class_weights(&counts).unwrap();
            let n: usize = counts.iter().sum();
            let weighted: f64 = w.weights.iter().zip(&counts).map(|(w, &c)| w * c as f64).sum();
            prop_assert!((weighted - n as f64).abs() <= 1e-9 * n as f64);
            prop_assert!(w.weights.iter().all(|x| *x > 0.0 && x.is_finite()));
            let argmax_w = (0..counts.len()).fold(0, |b, i| if w.weights[i] > w.weights[b] { i } else { b });
            let argmin_n = (0..counts.len()).fold(0, |b, i| if counts[i] < counts[b] { i } else { b });
            prop_assert_eq!(counts[argmax_w], counts[argmin_n]);
        }
    }
}
