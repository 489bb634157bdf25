use dermclass::augment::AugmentConfig;
use dermclass_web::ops;

fn checker(w: usize, h: usize) -> Vec<u8> {
    (0..w * h)
        .flat_map(|i| {
            let v = if (i % w + i / w).is_multiple_of(2) { 30 } else { 220 };
            [v, v / 2, 255 - v, 128]
        })
        .collect()
}

#[test]
fn disabled_augmentation_is_identity() {
    let img = checker(9, 7);
    let (out, p) = ops::augment(&img, 9, 7, &AugmentConfig::disabled(3), 5).unwrap();
    assert!(!p.hflip && !p.vflip && p.rotation_deg == 0.0);
    let opaque: Vec<u8> = img.chunks(4).flat_map(|c| [c[0], c[1], c[2], 255]).collect();
    assert_eq!(out, opaque);
}

#[test]
fn augmentation_is_seeded() {
    let img = checker(16, 16);
    let cfg = AugmentConfig {
        seed: 11,
        ..AugmentConfig::default()
    };
    let a = ops::augment(&img, 16, 16, &cfg, 2).unwrap();
    let b = ops::augment(&img, 16, 16, &cfg, 2).unwrap();
    assert_eq!(a, b);
    assert!(a.1.rotation_deg.abs() <= 20.0);
    assert!(ops::augment(&img[..10], 16, 16, &cfg, 2).is_err());
}

#[test]
fn resize_and_weights() {
    let out = ops::resize(&checker(4, 4), 4, 4, 8, 6).unwrap();
    assert_eq!(out.len(), 8 * 6 * 4);
    assert_eq!(ops::capped_counts(&[5364, 92, 450], 450), [450, 92, 450]);
    let w = ops::balanced_weights(&[10, 10, 20]).unwrap();
    assert!((w[0] - 4.0 / 3.0).abs() < 1e-12 && (w[2] - 2.0 / 3.0).abs() < 1e-12);
    assert!(ops::balanced_weights(&[3, 0]).is_err());
}

#[test]
fn sample_lesions() {
    let img = ops::sample_lesion(4, 40, 30, 1).unwrap();
    assert_eq!(img.len(), 40 * 30 * 4);
    assert!(ops::sample_lesion(7, 40, 30, 1).is_err());
}
