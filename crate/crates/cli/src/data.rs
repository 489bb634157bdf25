//! Split listings, image lookup and the resized-image cache.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;

use dermclass::image::{load_image, resize, ImageTensor, CHANNELS};
use dermclass::training::LabeledImages;

pub const LISTING_HEADER: &str = "image_id,label_code";

/// One `(image_id, label_code)` row of a split listing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ListingRow {
    pub image_id: String,
    pub label: usize,
}

pub fn listing_csv(rows: &[ListingRow]) -> String {
    let mut out = format!("{LISTING_HEADER}\n");
    for r in rows {
        out.push_str(&format!("{},{}\n", r.image_id, r.label));
    }
    out
}

pub fn read_listing(path: &Path) -> Result<Vec<ListingRow>> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("opening listing {}", path.display()))?;
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != LISTING_HEADER.split(',').collect::<Vec<_>>() {
        bail!("{}: expected header {LISTING_HEADER}", path.display());
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.with_context(|| format!("{}:{}", path.display(), i + 2))?;
        let label = rec[1]
            .trim()
            .parse()
            .with_context(|| format!("{}:{}: bad label code {:?}", path.display(), i + 2, &rec[1]))?;
        rows.push(ListingRow {
            image_id: rec[0].trim().to_string(),
            label,
        });
    }
    Ok(rows)
}

const EXTENSIONS: [&str; 4] = ["jpg", "jpeg", "png", "JPG"];

/// Finds `<image_dir>/<image_id>.<ext>` for the supported extensions.
pub fn find_image(image_dir: &Path, image_id: &str) -> Result<PathBuf> {
    EXTENSIONS
        .iter()
        .map(|ext| image_dir.join(format!("{image_id}.{ext}")))
        .find(|p| p.is_file())
        .with_context(|| format!("no image for {image_id} in {}", image_dir.display()))
}

pub fn load_resized(image_dir: &Path, image_id: &str, size: usize) -> Result<ImageTensor> {
    let path = find_image(image_dir, image_id)?;
    let img = load_image(&path)?;
    Ok(resize(&img, size, size)?)
}

const CACHE_MAGIC: &[u8; 8] = b"DCCACHE1";

/// Resized integer-form images keyed by image id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImageCache {
    pub size: usize,
    pub images: HashMap<String, ImageTensor>,
}

impl ImageCache {
    /// Loads and resizes `ids` from `image_dir`.
    pub fn build(image_dir: &Path, ids: &[String], size: usize) -> Result<Self> {
        let loaded: Vec<ImageTensor> = ids
            .par_iter()
            .map(|id| load_resized(image_dir, id, size))
            .collect::<Result<_>>()?;
        Ok(Self {
            size,
            images: ids.iter().cloned().zip(loaded).collect(),
        })
    }

    /// Serializes entries in `order`: magic, `u32` size, `u64` count, then
    /// per image a `u16` id length, the id and `size*size*3` bytes.
    pub fn to_bytes(&self, order: &[String]) -> Vec<u8> {
        let px = self.size * self.size * CHANNELS;
        let mut out = Vec::with_capacity(20 + order.len() * (px + 16));
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&(self.size as u32).to_le_bytes());
        out.extend_from_slice(&(order.len() as u64).to_le_bytes());
        for id in order {
            let img = &self.images[id];
            out.extend_from_slice(&(id.len() as u16).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            out.extend_from_slice(img.as_u8().expect("cache holds integer images"));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
            if bytes.len() < n {
                bail!("truncated image cache");
            }
            let (head, rest) = bytes.split_at(n);
            *bytes = rest;
            Ok(head)
        }
        let mut cur = bytes;
        if take(&mut cur, 8)? != CACHE_MAGIC {
            bail!("not an image cache");
        }
        let size = u32::from_le_bytes(take(&mut cur, 4)?.try_into()?) as usize;
        let count = u64::from_le_bytes(take(&mut cur, 8)?.try_into()?) as usize;
        let px = size * size * CHANNELS;
        let mut images = HashMap::with_capacity(count);
        for _ in 0..count {
            let n = u16::from_le_bytes(take(&mut cur, 2)?.try_into()?) as usize;
            let id = std::str::from_utf8(take(&mut cur, n)?)?.to_string();
            let img = ImageTensor::from_u8(size, size, take(&mut cur, px)?.to_vec())?;
            images.insert(id, img);
        }
        if !cur.is_empty() {
            bail!("trailing bytes in image cache");
        }
        Ok(Self { size, images })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_bytes(&bytes).with_context(|| format!("decoding {}", path.display()))
    }
}

/// Pairs listing rows with their images, taking them from `cache` when it
/// holds them at the right size and loading them otherwise.
pub fn labeled_images(
    rows: &[ListingRow],
    image_dir: &Path,
    size: usize,
    cache: Option<&ImageCache>,
) -> Result<LabeledImages> {
    let cache = cache.filter(|c| c.size == size);
    let images = rows
        .par_iter()
        .map(|r| match cache.and_then(|c| c.images.get(&r.image_id)) {
            Some(img) => Ok(img.clone()),
            None => load_resized(image_dir, &r.image_id, size),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LabeledImages {
        images,
        labels: rows.iter().map(|r| r.label).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn listing_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            ListingRow {
                image_id: "ISIC_1".into(),
                label: 5,
            },
            ListingRow {
                image_id: "ISIC_2".into(),
                label: 0,
            },
        ];
        let path = dir.path().join("l.csv");
        fs::write(&path, listing_csv(&rows)).unwrap();
        assert_eq!(read_listing(&path).unwrap(), rows);
        fs::write(&path, "id,label\nA,1\n").unwrap();
        assert!(read_listing(&path).is_err());
    }

    #[test]
    fn cache_round_trip() {
        let mut cache = ImageCache {
            size: 4,
            images: HashMap::new(),
        };
        for (i, id) in ["a", "bb"].iter().enumerate() {
            cache
                .images
                .insert(id.to_string(), ImageTensor::from_fn_u8(4, 4, |y, x| [(y * 4 + x) as u8, i as u8, 7]));
        }
        let order = vec!["bb".to_string(), "a".to_string()];
        let bytes = cache.to_bytes(&order);
        assert_eq!(ImageCache::from_bytes(&bytes).unwrap(), cache);
        assert!(ImageCache::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
