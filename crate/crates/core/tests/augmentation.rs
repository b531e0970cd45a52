use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use nanonet::augment::{apply, augment_dataset, flip_horizontal, flip_vertical, rotate, AugmentOp};
use nanonet::data::manifest::{scan_manifest, Split};
use nanonet::data::synthetic::sample_rng;
use nanonet::Tensor;
use proptest::prelude::*;

fn fixture(root: &Path, n: u32, size: u32) {
    std::fs::create_dir_all(root.join("images")).unwrap();
    std::fs::create_dir_all(root.join("masks")).unwrap();
    for i in 0..n {
        RgbImage::from_fn(size, size, |x, y| Rgb([(x * 9 + i) as u8, (y * 4) as u8, 80]))
            .save(root.join(format!("images/p{i:02}.png")))
            .unwrap();
        let c = size as i64 / 2;
        GrayImage::from_fn(size, size, |x, y| {
            let (dx, dy) = (x as i64 - c, y as i64 - c + (i % 3) as i64);
            Luma([if dx * dx + dy * dy < (size as i64 / 4).pow(2) { 255 } else { 0 }])
        })
        .save(root.join(format!("masks/p{i:02}.png")))
        .unwrap();
    }
}

fn all_train(root: &Path) -> nanonet::data::manifest::Manifest {
    let mut m = scan_manifest(root, 0).unwrap();
    m.records.iter_mut().for_each(|r| r.split = Split::Train);
    m
}

fn threshold(t: &Tensor) -> Tensor {
    t.map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
}

#[test]
fn multiplier_five_on_fifty_five_images() {
    let src = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    fixture(src.path(), 55, 16);
    let s = augment_dataset(&all_train(src.path()), &AugmentOp::defaults(), 5, out.path(), 1).unwrap();
    assert!(s.failures.is_empty(), "{:?}", s.failures);
    assert_eq!(s.manifest.records.len(), 330);
    let listed = std::fs::read_dir(out.path().join("images")).unwrap().count();
    assert_eq!(listed, 330);
    // the written manifest reads back
    let back = scan_manifest(&out.path().join("manifest.csv"), 0).unwrap();
    assert_eq!(back.records.len(), 330);
}

#[test]
fn no_ops_copies_the_input() {
    let src = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    fixture(src.path(), 4, 12);
    let m = all_train(src.path());
    let s = augment_dataset(&m, &[], 1, out.path(), 3).unwrap();
    assert_eq!(s.manifest.records, m.records);
    for r in &m.records {
        assert_eq!(std::fs::read(src.path().join(&r.image)).unwrap(), std::fs::read(out.path().join(&r.image)).unwrap());
        assert_eq!(std::fs::read(src.path().join(&r.mask)).unwrap(), std::fs::read(out.path().join(&r.mask)).unwrap());
    }
    assert!(augment_dataset(&m, &[], 0, out.path(), 3).is_err());
}

#[test]
fn same_seed_gives_identical_files_and_held_out_splits_pass_through() {
    let src = tempfile::tempdir().unwrap();
    fixture(src.path(), 12, 16);
    let mut m = scan_manifest(src.path(), 0).unwrap();
    for (i, r) in m.records.iter_mut().enumerate() {
        r.split = [Split::Train, Split::Val, Split::Test][i % 3];
    }
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let sa = augment_dataset(&m, &AugmentOp::defaults(), 3, a.path(), 9).unwrap();
    let sb = augment_dataset(&m, &AugmentOp::defaults(), 3, b.path(), 9).unwrap();
    assert_eq!(sa.manifest.records, sb.manifest.records);
    assert_eq!(sa.manifest.records.len(), 12 + 4 * 3);
    for r in &sa.manifest.records {
        assert_eq!(std::fs::read(a.path().join(&r.image)).unwrap(), std::fs::read(b.path().join(&r.image)).unwrap());
        assert_eq!(std::fs::read(a.path().join(&r.mask)).unwrap(), std::fs::read(b.path().join(&r.mask)).unwrap());
        if r.image.to_string_lossy().contains("_aug") {
            assert_eq!(r.split, Split::Train);
        }
    }
    let held_out = sa.manifest.records.iter().filter(|r| r.split != Split::Train).count();
    assert_eq!(held_out, 8);
}

#[test]
fn mask_and_image_stay_aligned_under_flips() {
    // a mask that is exactly the thresholded red channel must stay so
    let img = Tensor::from_fn((1, 3, 9, 7), |_, c, y, x| if c == 0 && x > y { 1.0 } else { 0.3 });
    let mask = Tensor::from_fn((1, 1, 9, 7), |_, _, y, x| if x > y { 1.0 } else { 0.0 });
    let mut rng = sample_rng(0, 0);
    for op in [AugmentOp::HorizontalFlip, AugmentOp::VerticalFlip] {
        let (i2, m2) = apply(&op, &img, &mask, &mut rng).unwrap();
        for y in 0..9 {
            for x in 0..7 {
                assert_eq!(m2.at(0, 0, y, x), if i2.at(0, 0, y, x) > 0.5 { 1.0 } else { 0.0 });
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn augmented_masks_stay_binary(seed in any::<u64>(), k in 0usize..5, h in 8usize..20, w in 8usize..20) {
        let img = Tensor::from_fn((1, 3, h, w), |_, c, y, x| ((c + y * x) % 7) as f32 / 7.0);
        let mask = Tensor::from_fn((1, 1, h, w), |_, _, y, x| if (y / 3 + x / 2) % 2 == 0 { 1.0 } else { 0.0 });
        let op = &AugmentOp::defaults()[k];
        let (i2, m2) = apply(op, &img, &mask, &mut sample_rng(seed, 0)).unwrap();
        prop_assert_eq!(i2.shape(), img.shape());
        prop_assert_eq!(m2.shape(), mask.shape());
        prop_assert!(m2.data().iter().all(|&v| v == 0.0 || v == 1.0));
        prop_assert!(i2.data().iter().all(|&v| v.is_finite() && (-1e-6..=1.0 + 1e-6).contains(&v)));
    }

    #[test]
    fn flips_preserve_foreground_count(bits in proptest::collection::vec(any::<bool>(), 30)) {
        let mask = Tensor::new((1, 1, 5, 6), bits.iter().map(|&b| b as u8 as f32).collect()).unwrap();
        let fg = |t: &Tensor| t.data().iter().filter(|&&v| v == 1.0).count();
        prop_assert_eq!(fg(&flip_horizontal(&mask)), fg(&mask));
        prop_assert_eq!(fg(&flip_vertical(&mask)), fg(&mask));
    }

    // thresholding commutes with nearest-neighbour geometry
    #[test]
    fn threshold_commutes_with_mask_transforms(vals in proptest::collection::vec(0.0f32..1.0, 36), quarter in 0usize..4) {
        let soft = Tensor::new((1, 1, 6, 6), vals).unwrap();
        let img = Tensor::zeros((1, 3, 6, 6));
        for f in [flip_horizontal as fn(&Tensor) -> Tensor, flip_vertical] {
            prop_assert_eq!(threshold(&f(&soft)), f(&threshold(&soft)));
        }
        let deg = 90.0 * quarter as f64;
        let (_, a) = rotate(&img, &soft, deg);
        let (_, b) = rotate(&img, &threshold(&soft), deg);
        prop_assert_eq!(threshold(&a), b);
    }
}
