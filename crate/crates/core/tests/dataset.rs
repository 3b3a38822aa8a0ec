use std::fs;

use cyclegan_ad::dataset::{
    augment, load_dataset, make_split, preprocess, save_image, synthesize_toy_dataset, AugmentPolicy,
    ExclusionManifest, Flip, Image, Label, LabeledImage, LabeledImageSet, Rotation, SplitRecord, SyntheticSpec,
};
use proptest::prelude::*;

fn gradient(c: usize, h: usize, w: usize, k: f32) -> Image {
    Image::from_fn(c, h, w, |ch, y, x| ((ch as f32 + 1.0) * (y * w + x) as f32 * k).fract()).unwrap()
}

#[test]
fn loads_tree_merges_subclasses_and_reports_skips() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("parts");
    for i in 0..3 {
        save_image(&gradient(3, 12, 10, 0.013 * (i + 1) as f32), &root.join(format!("normal/n{i}.png"))).unwrap();
    }
    save_image(&gradient(3, 12, 10, 0.05), &root.join("abnormal/crack/a0.png")).unwrap();
    save_image(&gradient(3, 12, 10, 0.07), &root.join("abnormal/hole/a1.png")).unwrap();
    save_image(&gradient(3, 12, 10, 0.09), &root.join("abnormal/hole/a2.png")).unwrap();
    fs::write(root.join("normal/broken.png"), b"not a png").unwrap();

    let excl = ExclusionManifest::parse("# annotated\nabnormal/hole/a2.png\n");
    let (set, report) = load_dataset(&root, false, Some(&excl)).unwrap();
    assert_eq!(set.name(), "parts");
    assert_eq!((set.n_normal(), set.n_abnormal()), (3, 2));
    assert_eq!(report.excluded, 1);
    assert_eq!(report.skipped.len(), 1);
    assert!(report.skipped[0].path.ends_with("broken.png"));
    let subclasses: Vec<_> =
        set.iter_label(Label::Abnormal).map(|i| i.meta.subclass.clone().unwrap_or_default()).collect();
    assert_eq!(subclasses, vec!["crack".to_string(), "hole".to_string()]);

    // PNG quantization is the only loss on the way back in.
    let back = &set.images()[0].image;
    let orig = gradient(3, 12, 10, 0.013);
    for (a, b) in back.data().iter().zip(orig.data()) {
        assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
    }

    let (gray, _) = load_dataset(&root, true, None).unwrap();
    assert_eq!(gray.images()[0].image.channels(), 1);
    assert_eq!(gray.n_abnormal(), 3);
}

#[test]
fn missing_class_directory_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    save_image(&gradient(1, 4, 4, 0.1), &dir.path().join("normal/a.png")).unwrap();
    let err = load_dataset(dir.path(), true, None).unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
}

#[test]
fn synthetic_masks_mark_exactly_the_abnormal_images() {
    let spec = SyntheticSpec::blobs(32, 20, 10, 3);
    let set = synthesize_toy_dataset(&spec).unwrap();
    assert_eq!((set.n_normal(), set.n_abnormal()), (20, 10));
    for img in set.images() {
        match img.label {
            Label::Normal => assert!(img.meta.defect_mask.is_none(), "{}", img.source_id),
            Label::Abnormal => {
                let m = img.meta.defect_mask.as_ref().expect("abnormal image without mask");
                assert!(m.area() > 0 && m.coverage() < 0.5, "{}: coverage {}", img.source_id, m.coverage());
            }
        }
    }
    assert_eq!(synthesize_toy_dataset(&spec).unwrap(), set);
    let other = synthesize_toy_dataset(&SyntheticSpec { seed: 4, ..spec }).unwrap();
    assert_ne!(other.images()[0].image, set.images()[0].image);
}

#[test]
fn split_record_replays_the_split() {
    let set = synthesize_toy_dataset(&SyntheticSpec::blobs(16, 12, 7, 0)).unwrap();
    let split = make_split(&set, 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("split.json");
    SplitRecord::of(&split, set.name()).save(&p).unwrap();
    let replay = SplitRecord::load(&p).unwrap().apply(&set).unwrap();
    assert_eq!(replay, split);
}

#[test]
fn resampling_at_matching_resolution_is_identity() {
    let img = LabeledImage::new(gradient(3, 16, 16, 0.031), Label::Abnormal, "x");
    let out = preprocess(&img, 16).unwrap();
    assert_eq!(out.label, Label::Abnormal);
    let delta = out.image.data().iter().zip(img.image.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
    assert!(delta <= 1e-6, "max delta {delta}");
    let down = preprocess(&img, 8).unwrap();
    assert_eq!((down.image.height(), down.image.width()), (8, 8));
}

#[test]
fn dihedral_transforms_permute_pixels_exactly() {
    let img = gradient(3, 5, 7, 0.017);
    let set = LabeledImageSet::new("one", vec![LabeledImage::new(img.clone(), Label::Normal, "p")]);
    let out = augment(&set, &AugmentPolicy::full()).unwrap();
    assert_eq!(out.len(), 9);
    let mut sorted_in: Vec<u32> = img.data().iter().map(|v| v.to_bits()).collect();
    sorted_in.sort_unstable();
    for t in out.images() {
        let mut v: Vec<u32> = t.image.data().iter().map(|v| v.to_bits()).collect();
        v.sort_unstable();
        assert_eq!(v, sorted_in, "{} is not a permutation", t.source_id);
    }
    // Four quarter turns return the original.
    let quarter = AugmentPolicy::from_sets(&[Rotation::R90], &[Flip::None]).unwrap();
    let mut cur = set.clone();
    for _ in 0..4 {
        cur = augment(&cur, &quarter).unwrap();
    }
    assert_eq!(cur.images()[0].image, img);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn split_is_balanced_disjoint_and_complete(n_normal in 2usize..120, n_abnormal in 2usize..120, seed: u64) {
        let px = Image::filled(1, 1, 1, 0.5).unwrap();
        let mut v = Vec::new();
        for i in 0..n_normal {
            v.push(LabeledImage::new(px.clone(), Label::Normal, format!("n{i}")));
        }
        for i in 0..n_abnormal {
            v.push(LabeledImage::new(px.clone(), Label::Abnormal, format!("a{i}")));
        }
        let set = LabeledImageSet::new("mock", v);
        let s = make_split(&set, seed).unwrap();
        let m = n_normal.min(n_abnormal) / 2;
        prop_assert_eq!(s.test.n_normal(), m);
        prop_assert_eq!(s.test.n_abnormal(), m);
        let train: std::collections::HashSet<_> = s.train.images().iter().map(|i| &i.source_id).collect();
        prop_assert!(s.test.images().iter().all(|i| !train.contains(&i.source_id)));
        prop_assert_eq!(s.train.len() + s.test.len(), set.len());
    }
}
