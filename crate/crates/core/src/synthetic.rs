//! Imbalanced synthetic lesion datasets: one colored shape per class on a
//! noisy skin-toned background, written as PNGs plus a metadata manifest.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::classes::{LesionClass, NUM_CLASSES};
use crate::image::{ImageError, ImageTensor};
use crate::seed::{derive_seed, rng_from_seed, Rng as SeededRng};

#[derive(Debug, thiserror::Error)]
pub enum SyntheticError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    /// Images per class, indexed by label code.
    pub counts: [usize; NUM_CLASSES],
    pub height: usize,
    pub width: usize,
    pub missing_age_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        // akiec, bcc, bkl, df, mel, nv, vasc
        Self {
            counts: [100, 150, 300, 40, 450, 1200, 60],
            height: 90,
            width: 120,
            missing_age_rate: 0.05,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), SyntheticError> {
        if self.height < 16 || self.width < 16 {
            return Err(SyntheticError::InvalidConfig("images must be at least 16x16".into()));
        }
        if !(0.0..=1.0).contains(&self.missing_age_rate) {
            return Err(SyntheticError::InvalidConfig("missing_age_rate must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

const BACKGROUND: [f64; 3] = [226.0, 192.0, 164.0];

fn class_color(class: LesionClass) -> [f64; 3] {
    match class {
        LesionClass::Akiec => [200.0, 40.0, 40.0],
        LesionClass::Bcc => [235.0, 110.0, 190.0],
        LesionClass::Bkl => [150.0, 95.0, 40.0],
        LesionClass::Df => [225.0, 210.0, 50.0],
        LesionClass::Mel => [35.0, 30.0, 75.0],
        LesionClass::Nv => [80.0, 160.0, 70.0],
        LesionClass::Vasc => [135.0, 40.0, 205.0],
    }
}

/// Whether the point `(dy, dx)`, measured from the shape center in units of
/// its radius, lies inside the class shape.
fn inside(class: LesionClass, dy: f64, dx: f64) -> bool {
    let r = (dy * dy + dx * dx).sqrt();
    match class {
        LesionClass::Akiec => dy.abs() <= 0.8 && dx.abs() <= 0.8,
        LesionClass::Bcc => (0.55..=1.0).contains(&r),
        LesionClass::Bkl => (dx / 1.0).powi(2) + (dy / 0.45).powi(2) <= 1.0,
        LesionClass::Df => r <= 0.5,
        LesionClass::Mel => {
            let theta = dy.atan2(dx);
            r <= 0.65 + 0.3 * (5.0 * theta).cos()
        }
        LesionClass::Nv => r <= 0.85,
        LesionClass::Vasc => (dy.abs() <= 0.25 && dx.abs() <= 1.0) || (dx.abs() <= 0.25 && dy.abs() <= 1.0),
    }
}

/// Renders one image of `class`.
pub fn render(class: LesionClass, height: usize, width: usize, rng: &mut SeededRng) -> ImageTensor {
    let min_side = height.min(width) as f64;
    let radius = min_side * rng.random_range(0.25..0.38);
    let cy = height as f64 / 2.0 + rng.random_range(-0.1..0.1) * height as f64;
    let cx = width as f64 / 2.0 + rng.random_range(-0.1..0.1) * width as f64;
    let jitter: [f64; 3] = std::array::from_fn(|_| rng.random_range(-15.0..15.0));
    let color = class_color(class);
    let background: [f64; 3] = std::array::from_fn(|c| BACKGROUND[c] + rng.random_range(-10.0..10.0));
    ImageTensor::from_fn_u8(height, width, |y, x| {
        let dy = (y as f64 + 0.5 - cy) / radius;
        let dx = (x as f64 + 0.5 - cx) / radius;
        let base = if inside(class, dy, dx) {
            std::array::from_fn(|c| color[c] + jitter[c])
        } else {
            background
        };
        let noise = rng.random_range(-12.0..12.0);
        base.map(|v: f64| (v + noise).round().clamp(0.0, 255.0) as u8)
    })
}

const SEXES: [&str; 2] = ["male", "female"];
const SITES: [&str; 6] = ["back", "face", "trunk", "upper extremity", "lower extremity", "abdomen"];
const DX_TYPES: [&str; 3] = ["histo", "follow_up", "consensus"];

/// What [`write_dataset`] produced.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub manifest: PathBuf,
    pub image_dir: PathBuf,
    pub rows: usize,
    pub missing_ages: usize,
}

/// Writes the manifest to `manifest` and one `<image_id>.png` per row into
/// `image_dir`. Rows are in shuffled class order; the same config always
/// yields the same bytes.
pub fn write_dataset(cfg: &SyntheticConfig, manifest: &Path, image_dir: &Path) -> Result<SyntheticDataset, SyntheticError> {
    cfg.validate()?;
    fs::create_dir_all(image_dir)?;
    if let Some(parent) = manifest.parent() {
        fs::create_dir_all(parent)?;
    }

    let mut classes: Vec<LesionClass> = LesionClass::ALL
        .iter()
        .flat_map(|&c| std::iter::repeat_n(c, cfg.counts[c.code() as usize]))
        .collect();
    let mut rng = rng_from_seed(cfg.seed);
    classes.shuffle(&mut rng);

    let mut csv = String::from("lesion_id,image_id,dx,dx_type,age,sex,localization\n");
    let mut missing_ages = 0;
    for (i, &class) in classes.iter().enumerate() {
        let image_id = format!("ISIC_{:07}", i);
        let lesion_id = format!("HAM_{:07}", i);
        let age = if rng.random::<f64>() < cfg.missing_age_rate {
            missing_ages += 1;
            String::new()
        } else {
            format!("{}", 5 * rng.random_range(4..17))
        };
        let sex = SEXES[rng.random_range(0..SEXES.len())];
        let site = SITES[rng.random_range(0..SITES.len())];
        let dx_type = DX_TYPES[rng.random_range(0..DX_TYPES.len())];
        csv.push_str(&format!(
            "{lesion_id},{image_id},{},{dx_type},{age},{sex},{site}\n",
            class.short_name()
        ));

        let mut img_rng = rng_from_seed(derive_seed(&[cfg.seed, i as u64]));
        render(class, cfg.height, cfg.width, &mut img_rng).save_png(&image_dir.join(format!("{image_id}.png")))?;
    }
    fs::write(manifest, csv)?;
    Ok(SyntheticDataset {
        manifest: manifest.to_path_buf(),
        image_dir: image_dir.to_path_buf(),
        rows: classes.len(),
        missing_ages,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{class_counts, parse_manifest};
    use crate::image::load_image;

    fn write_into(cfg: &SyntheticConfig, dir: &Path) -> SyntheticDataset {
        write_dataset(cfg, &dir.join("metadata.csv"), &dir.join("images")).unwrap()
    }

    #[test]
    fn small_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SyntheticConfig {
            counts: [2, 1, 3, 1, 0, 4, 1],
            missing_age_rate: 0.5,
            seed: 9,
            ..SyntheticConfig::default()
        };
        let out = write_into(&cfg, dir.path());
        assert_eq!(out.rows, 12);
        let records = parse_manifest(&fs::read(&out.manifest).unwrap()).unwrap();
        assert_eq!(class_counts(&records), cfg.counts);
        let missing = records.iter().filter(|r| r.age.is_none()).count();
        assert_eq!(missing, out.missing_ages);
        let img = load_image(&out.image_dir.join(format!("{}.png", records[0].image_id))).unwrap();
        assert_eq!((img.height(), img.width()), (90, 120));
    }

    #[test]
    fn deterministic_bytes() {
        let cfg = SyntheticConfig {
            counts: [1; NUM_CLASSES],
            ..SyntheticConfig::default()
        };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        write_into(&cfg, a.path());
        write_into(&cfg, b.path());
        assert_eq!(
            fs::read(a.path().join("metadata.csv")).unwrap(),
            fs::read(b.path().join("metadata.csv")).unwrap()
        );
        assert_eq!(
            fs::read(a.path().join("images/ISIC_0000003.png")).unwrap(),
            fs::read(b.path().join("images/ISIC_0000003.png")).unwrap()
        );
    }

    #[test]
    fn shape_covers_center() {
        for &c in &LesionClass::ALL {
            let img = render(c, 64, 64, &mut rng_from_seed(1));
            let px = img.as_u8().unwrap();
            let center = &px[(32 * 64 + 32) * 3..][..3];
            if matches!(c, LesionClass::Bcc) {
                continue;
            }
            let col = class_color(c);
            assert!((center[0] as f64 - col[0]).abs() < 40.0, "{c:?} {center:?}");
        }
    }
}
