use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use nanonet::data::image_io::{load_image, load_mask, load_pair};
use nanonet::data::manifest::{load_split, scan_manifest, Split};
use nanonet::data::weight_file::{decode, encode, load_weights, save_weights, HEADER_LEN};
use nanonet::model::{build_nanonet, ModelConfig, Variant};
use nanonet::weights::WeightStore;
use nanonet::Error;
use proptest::prelude::*;

/// Bit-by-bit reflected CRC-32 (polynomial 0xEDB88320).
fn crc32_oracle(bytes: &[u8]) -> u32 {
    let mut crc = 0xffff_ffffu32;
    for &b in bytes {
        crc ^= b as u32;
        for _ in 0..8 {
            crc = if crc & 1 == 1 { (crc >> 1) ^ 0xedb8_8320 } else { crc >> 1 };
        }
    }
    !crc
}

fn write_pair(root: &Path, stem: &str, size: u32, seed: u32) {
    let img = RgbImage::from_fn(size, size, |x, y| Rgb([(x * 7 + seed) as u8, (y * 5) as u8, ((x + y) * 3) as u8]));
    img.save(root.join("images").join(format!("{stem}.png"))).unwrap();
    let m = GrayImage::from_fn(size, size, |x, y| Luma([if (x + y + seed) % 5 < 2 { 255 } else { 0 }]));
    m.save(root.join("masks").join(format!("{stem}.png"))).unwrap();
}

fn layout(dir: &Path) {
    std::fs::create_dir_all(dir.join("images")).unwrap();
    std::fs::create_dir_all(dir.join("masks")).unwrap();
}

#[test]
fn weight_file_header_checksum_matches_oracle() {
    let g = build_nanonet(&ModelConfig::new(Variant::C).with_input_size(32, 32)).unwrap();
    let bytes = encode(&WeightStore::initialize(&g, 3)).unwrap();
    let (h, store) = decode(&bytes).unwrap();
    let payload = &bytes[bytes.len() - h.payload_len as usize..];
    assert_eq!(h.payload_crc, crc32_oracle(payload));
    assert_eq!(u32::from_le_bytes(bytes[52..56].try_into().unwrap()), crc32_oracle(payload));
    assert_eq!(&bytes[..4], b"NNWT");
    assert_eq!(h.fingerprint, g.fingerprint());
    assert_eq!(store.num_values() * 4, h.payload_len as usize);
    assert!(bytes.len() > HEADER_LEN);
}

#[test]
fn weights_save_load_save_is_byte_identical_and_checked_against_graph() {
    let dir = tempfile::tempdir().unwrap();
    let a = build_nanonet(&ModelConfig::new(Variant::A).with_input_size(32, 32)).unwrap();
    let b = build_nanonet(&ModelConfig::new(Variant::B).with_input_size(32, 32)).unwrap();
    let (p1, p2) = (dir.path().join("a.nnwt"), dir.path().join("b.nnwt"));
    save_weights(&WeightStore::initialize(&a, 8), &p1).unwrap();
    let back = load_weights(&p1, &a).unwrap();
    save_weights(&back, &p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

    match load_weights(&p1, &b) {
        Err(Error::Compat(msg)) => assert_eq!(msg.matches('#').count(), 3, "{msg}"),
        other => panic!("expected a compatibility error, got {:?}", other.map(|s| s.len())),
    }
    // input size does not change the parameter registry
    let a64 = build_nanonet(&ModelConfig::new(Variant::A).with_input_size(64, 64)).unwrap();
    assert!(load_weights(&p1, &a64).is_ok());
}

#[test]
fn truncated_weight_file_reports_offset() {
    let dir = tempfile::tempdir().unwrap();
    let g = build_nanonet(&ModelConfig::new(Variant::C).with_input_size(32, 32)).unwrap();
    let p = dir.path().join("w.nnwt");
    save_weights(&WeightStore::initialize(&g, 0), &p).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    std::fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load_weights(&p, &g), Err(Error::Format { .. })));
}

#[test]
fn image_at_target_size_is_raw_over_255() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, mp) = (dir.path().join("i.png"), dir.path().join("m.png"));
    let img = RgbImage::from_fn(256, 256, |x, y| Rgb([x as u8, y as u8, (x ^ y) as u8]));
    img.save(&ip).unwrap();
    GrayImage::from_pixel(256, 256, Luma([255])).save(&mp).unwrap();
    let (im, m) = load_pair(&ip, &mp, (256, 256)).unwrap();
    for (y, x) in [(0, 0), (17, 200), (255, 255)] {
        for c in 0..3 {
            assert_eq!(im.at(0, c, y, x), img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0);
        }
    }
    assert!(m.data().iter().all(|&v| v == 1.0));
    // idempotent
    let again = load_pair(&ip, &mp, (256, 256)).unwrap();
    assert_eq!((im, m), again);
}

#[test]
fn nearest_downsizing_matches_index_mapping() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, mp) = (dir.path().join("i.png"), dir.path().join("m.pgm"));
    RgbImage::new(512, 512).save(&ip).unwrap();
    // 3-pixel checkerboard so the picked source index matters
    let board = |x: u32, y: u32| (x / 3 + y / 3) % 2 == 1;
    GrayImage::from_fn(512, 512, |x, y| Luma([if board(x, y) { 255 } else { 0 }])).save(&mp).unwrap();
    let (_, m) = load_pair(&ip, &mp, (256, 256)).unwrap();
    for y in 0..256u32 {
        for x in 0..256u32 {
            let (sy, sx) = ((2 * y + 1).min(511), (2 * x + 1).min(511));
            let want = if board(sx, sy) { 1.0 } else { 0.0 };
            assert_eq!(m.at(0, 0, y as usize, x as usize), want, "({y}, {x})");
        }
    }
}

#[test]
fn grey_mask_is_thresholded_at_128() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.png");
    GrayImage::from_fn(4, 1, |x, _| Luma([[0, 127, 128, 200][x as usize]])).save(&p).unwrap();
    let m = load_mask(&p).unwrap();
    assert!(!m.was_binary);
    assert_eq!(m.mask.data(), &[0.0, 0.0, 1.0, 1.0]);
    assert!(load_image(&dir.path().join("missing.png")).is_err());
}

#[test]
fn scan_pairs_orphans_and_splits() {
    let dir = tempfile::tempdir().unwrap();
    layout(dir.path());
    for i in 0..10 {
        write_pair(dir.path(), &format!("f{i:02}"), 16, i);
    }
    std::fs::remove_file(dir.path().join("masks/f04.png")).unwrap();
    let m = scan_manifest(dir.path(), 1).unwrap();
    assert_eq!(m.records.len(), 9);
    assert_eq!(m.orphans, vec![Path::new("images/f04.png").to_path_buf()]);
    let names: Vec<_> = m.records.iter().map(|r| r.image.to_string_lossy().into_owned()).collect();
    let mut sorted = names.clone();
    sorted.sort();
    assert_eq!(names, sorted);
    assert_eq!(m.records[0].original_size, Some((16, 16)));

    // a written manifest reads back to the same records
    let csv = dir.path().join("manifest.csv");
    m.write_csv(&csv).unwrap();
    let back = scan_manifest(&csv, 99).unwrap();
    assert_eq!(back.records, m.records);

    let (ds, skipped) = load_split(&m, Split::Train, (8, 8));
    assert!(skipped.is_empty());
    assert_eq!(ds.len(), m.split(Split::Train).len());
    assert_eq!(ds.images[0].shape().h, 8);
}

#[test]
fn fifty_five_pairs_give_fifty_five_records() {
    let dir = tempfile::tempdir().unwrap();
    layout(dir.path());
    for i in 0..55 {
        write_pair(dir.path(), &format!("frame_{i:03}"), 8, i);
    }
    let m = scan_manifest(dir.path(), 7).unwrap();
    assert_eq!(m.records.len(), 55);
    let count = |s| m.split(s).len();
    assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (43, 6, 6));
}

#[test]
fn unreadable_pairs_are_skipped_with_reason() {
    let dir = tempfile::tempdir().unwrap();
    layout(dir.path());
    write_pair(dir.path(), "good", 8, 0);
    std::fs::write(dir.path().join("images/bad.png"), b"not a png").unwrap();
    std::fs::copy(dir.path().join("masks/good.png"), dir.path().join("masks/bad.png")).unwrap();
    let mut m = scan_manifest(dir.path(), 0).unwrap();
    m.records.iter_mut().for_each(|r| r.split = Split::Test);
    let (ds, skipped) = load_split(&m, Split::Test, (8, 8));
    assert_eq!(ds.ids, vec!["images/good.png".to_string()]);
    assert_eq!(skipped.len(), 1);
    assert!(skipped[0].0.contains("bad"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn weight_roundtrip_is_bit_exact(entries in proptest::collection::vec(
        ("[a-z]{1,8}(/[a-z_]{1,10})?", proptest::collection::vec(1usize..4, 1..4), any::<u64>()), 1..6)) {
        let mut store = WeightStore::new();
        let mut seen = std::collections::HashSet::new();
        for (name, dims, seed) in entries {
            if !seen.insert(name.clone()) {
                continue;
            }
            let n: usize = dims.iter().product();
            let vals: Vec<f32> = (0..n).map(|i| f32::from_bits((seed as u32).wrapping_add(i as u32).wrapping_mul(2_654_435_761) & 0x7f7f_ffff)).collect();
            store.insert(name, dims, vals).unwrap();
        }
        let bytes = encode(&store).unwrap();
        let (_, back) = decode(&bytes).unwrap();
        for (a, b) in store.entries().iter().zip(back.entries()) {
            prop_assert_eq!(&a.name, &b.name);
            prop_assert_eq!(&a.dims, &b.dims);
            let bits = |t: &nanonet::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&a.tensor), bits(&b.tensor));
        }
        prop_assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn any_single_byte_corruption_is_detected(pos in 0usize..10_000, flip in 1u8..=255) {
        let mut store = WeightStore::new();
        store.insert("w/kernel", vec![4, 3, 3, 3], (0..108).map(|i| i as f32 * 0.01).collect()).unwrap();
        let mut bytes = encode(&store).unwrap();
        let pos = pos % bytes.len();
        bytes[pos] ^= flip;
        // either the parse fails or the header fingerprint no longer matches
        // the decoded names and dims, so loading against any graph fails
        if let Ok((h, s)) = decode(&bytes) {
            prop_assert!(h.fingerprint != nanonet::data::weight_file::store_fingerprint(&s), "corruption at {} undetected", pos);
        }
    }
}
