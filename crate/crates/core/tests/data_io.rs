use std::fs;
use std::path::Path;

use esdmr::data::{
    corner_patch_samples, hold_out_validation, load_image, load_sample, make_split, render_overlay, synthetic_disks,
    write_dataset, DatasetManifest, Split, SplitConvention, FN_COLOR, FP_COLOR, TN_COLOR, TP_COLOR,
};
use esdmr::{Error, Tensor};
use image::{GrayImage, ImageBuffer, Luma, Rgba, RgbaImage};

fn data_path(e: &Error) -> &Path {
    match e {
        Error::Data { path, .. } => path,
        other => panic!("expected a data error, got {other}"),
    }
}

#[test]
fn written_dataset_reads_back() {
    let tmp = tempfile::tempdir().unwrap();
    let mut samples = synthetic_disks(3, 24, 1).unwrap();
    samples[0].split = Some(Split::Test);
    samples[1].split = None;
    let path = write_dataset(tmp.path(), &samples).unwrap();
    let m = DatasetManifest::load(&path).unwrap();
    assert_eq!(m.name, "manifest");
    assert_eq!(m.entries.len(), 3);
    assert_eq!(m.entries[0].split, Some(Split::Test));
    assert_eq!(m.entries[1].split, None);
    for (i, s) in samples.iter().enumerate() {
        let back = m.load_entry(i).unwrap();
        assert_eq!(back.mask, s.mask);
        assert_eq!(back.image.shape(), s.image.shape());
        // 8-bit quantisation is the only loss.
        let worst = back.image.data().iter().zip(s.image.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(worst <= 0.5 / 255.0 + 1e-6, "{worst}");
    }
}

#[test]
fn missing_file_names_its_path() {
    let tmp = tempfile::tempdir().unwrap();
    let path = write_dataset(tmp.path(), &synthetic_disks(2, 16, 2).unwrap()).unwrap();
    let gone = tmp.path().join("img_001.png");
    fs::remove_file(&gone).unwrap();
    let err = DatasetManifest::load(&path).unwrap_err();
    assert_eq!(data_path(&err), gone);
    assert!(err.to_string().contains("img_001.png"));
}

#[test]
fn size_mismatch_names_both_files() {
    let tmp = tempfile::tempdir().unwrap();
    let img = tmp.path().join("a.png");
    let msk = tmp.path().join("a_mask.png");
    GrayImage::new(10, 8).save(&img).unwrap();
    GrayImage::new(10, 9).save(&msk).unwrap();
    let err = load_sample(&img, &msk, None).unwrap_err();
    let text = err.to_string();
    assert!(text.contains("a.png") && text.contains("a_mask.png"), "{text}");
}

#[test]
fn unreadable_image_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("junk.png");
    fs::write(&p, b"not an image").unwrap();
    assert_eq!(data_path(&load_image(&p).unwrap_err()), p);
}

#[test]
fn sixteen_bit_gray_is_scaled_to_unit_range() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("g16.png");
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(4, 2, |x, _| Luma([if x < 2 { 65535 } else { 0 }]));
    img.save(&p).unwrap();
    let t = load_image(&p).unwrap();
    assert_eq!(t.shape(), &[1, 2, 4]);
    assert_eq!(t.data(), &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
}

#[test]
fn alpha_is_dropped() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("rgba.png");
    RgbaImage::from_fn(2, 1, |x, _| if x == 0 { Rgba([255, 0, 0, 0]) } else { Rgba([0, 0, 255, 128]) })
        .save(&p)
        .unwrap();
    let t = load_image(&p).unwrap();
    assert_eq!(t.shape(), &[3, 1, 2]);
    assert_eq!(t.data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
}

#[test]
fn masks_stored_as_zero_one_are_binarised() {
    let tmp = tempfile::tempdir().unwrap();
    let img = tmp.path().join("x.png");
    let msk = tmp.path().join("x_mask.png");
    GrayImage::from_pixel(4, 4, Luma([90])).save(&img).unwrap();
    GrayImage::from_fn(4, 4, |x, _| Luma([u8::from(x >= 2)])).save(&msk).unwrap();
    let s = load_sample(&img, &msk, None).unwrap();
    assert_eq!(s.mask.data().iter().sum::<f32>(), 8.0);
    assert!(s.mask.data().iter().all(|v| *v == 0.0 || *v == 1.0));
    // Resizing keeps the mask binary and the image in range.
    let r = load_sample(&img, &msk, Some((8, 6))).unwrap();
    assert_eq!(r.image.shape(), &[1, 8, 6]);
    assert_eq!(r.mask.shape(), &[1, 8, 6]);
    assert!(r.mask.data().iter().all(|v| *v == 0.0 || *v == 1.0));
    assert!(r.image.data().iter().all(|v| (v - 90.0 / 255.0).abs() < 1e-5));
}

#[test]
fn manifest_parsing_rules() {
    let base = Path::new("/data");
    let text = "# comment\n\na.png\tam.png\ttrain\nb.png\tbm.png\t-\r\nc.png\tcm.png\n";
    let m = DatasetManifest::parse(text, base, "x").unwrap();
    assert_eq!(m.entries.len(), 3);
    assert_eq!(m.entries[0].image, base.join("a.png"));
    assert_eq!(m.entries[0].split, Some(Split::Train));
    assert_eq!((m.entries[1].split, m.entries[2].split), (None, None));
    assert!(DatasetManifest::parse("only_one_column\n", base, "x").is_err());
    assert!(DatasetManifest::parse("a\tb\tholdout\n", base, "x").is_err());
    // The split column is required when the manifest itself defines splits.
    assert!(make_split(&m, SplitConvention::Manifest, 0).is_err());
}

#[test]
fn named_conventions_produce_their_published_sizes() {
    let manifest = |n: usize| {
        let text: String = (0..n).map(|i| format!("{i:04}.png\tm{i:04}.png\n")).collect();
        DatasetManifest::parse(&text, Path::new("."), "n").unwrap()
    };
    let cases = [
        (SplitConvention::Drive, 40, (20, 0, 20)),
        (SplitConvention::Chase, 28, (20, 0, 8)),
        (SplitConvention::Isic2016, 1279, (900, 0, 379)),
        (SplitConvention::Isic2017, 2750, (2000, 150, 600)),
        (SplitConvention::CvcClinicDb, 612, (490, 61, 61)),
        (SplitConvention::Mc, 138, (100, 0, 38)),
        (SplitConvention::MoNuSeg, 44, (30, 0, 14)),
    ];
    for (conv, n, sizes) in cases {
        let m = manifest(n);
        let s = make_split(&m, conv, 3).unwrap();
        assert_eq!(s.sizes(), sizes, "{conv:?}");
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..n).collect::<Vec<_>>(), "{conv:?} is a partition");
    }
    // Seeded shuffles repeat.
    let m = manifest(612);
    assert_eq!(make_split(&m, SplitConvention::CvcClinicDb, 5).unwrap(), make_split(&m, SplitConvention::CvcClinicDb, 5).unwrap());
    assert_ne!(make_split(&m, SplitConvention::CvcClinicDb, 5).unwrap(), make_split(&m, SplitConvention::CvcClinicDb, 6).unwrap());
    // Held-out validation comes from the end of the sorted training list.
    let m = manifest(40);
    let held = hold_out_validation(&m, &make_split(&m, SplitConvention::Drive, 0).unwrap(), 0.1);
    assert_eq!(held.sizes(), (18, 2, 20));
    assert_eq!(held.val, vec![18, 19]);
}

#[test]
fn corner_patches_tile_the_corners() {
    let s = &synthetic_disks(1, 20, 4).unwrap()[0];
    let patches = corner_patch_samples(s, 12).unwrap();
    assert_eq!(patches.len(), 4);
    let at = |t: &Tensor<f32>, c: usize, r: usize, col: usize, w: usize, h: usize| t.data()[(c * h + r) * w + col];
    // Bottom-right patch starts at (8, 8).
    for r in 0..12 {
        for c in 0..12 {
            assert_eq!(at(&patches[3].image, 2, r, c, 12, 12), at(&s.image, 2, r + 8, c + 8, 20, 20));
            assert_eq!(at(&patches[3].mask, 0, r, c, 12, 12), at(&s.mask, 0, r + 8, c + 8, 20, 20));
        }
    }
    assert!(patches[1].source_path.to_string_lossy().ends_with("#1"));
    assert!(corner_patch_samples(s, 21).is_err());
}

#[test]
fn overlay_colours_follow_the_confusion() {
    let pred = Tensor::new(vec![1, 1, 4], vec![1.0f32, 1.0, 0.0, 0.0]).unwrap();
    let reference = Tensor::new(vec![1, 1, 4], vec![1.0f32, 0.0, 1.0, 0.0]).unwrap();
    let img = render_overlay(&pred, &reference).unwrap();
    let px: Vec<[u8; 3]> = img.pixels().map(|p| p.0).collect();
    assert_eq!(px, vec![TP_COLOR, FP_COLOR, FN_COLOR, TN_COLOR]);
}
