use std::collections::{BTreeMap, HashSet};
use std::path::PathBuf;

use cropgan::dataset::split::train_count;
use cropgan::dataset::synth::{write_corpus, SynthSpec};
use cropgan::dataset::{
    augment, export_coco, import_coco, import_vgg_annotations, load_manifest, load_sample, pair_images, preprocess,
    rasterize, split_dataset, AugmentOp, CocoDataset, DatasetManifest, Geometry, Label, Layout, MaskAnnotation,
    PreprocessConfig, Provenance, SampleRecord, Split,
};
use cropgan::mask::Mask;
use proptest::prelude::*;
use serde_json::json;

fn rec(id: String, label: Label) -> SampleRecord {
    SampleRecord {
        id: id.clone(),
        label,
        split: Split::Unassigned,
        provenance: Provenance::Raw,
        source_id: None,
        path: PathBuf::from(format!("/nowhere/{id}")),
        width: 16,
        height: 16,
    }
}

fn manifest(counts: [usize; 3]) -> DatasetManifest {
    let mut v = Vec::new();
    for (label, n) in Label::ALL.into_iter().zip(counts) {
        for i in 0..n {
            v.push(rec(format!("{label}/{i}.png"), label));
        }
    }
    DatasetManifest::new(v).unwrap()
}

proptest! {
    #[test]
    fn pairing_emits_k_distinct_partners(nh in 1usize..30, nd in 0usize..20, k in 1usize..6, seed in any::<u64>()) {
        let m = manifest([nh, nd, 0]);
        let healthy: Vec<_> = m.by_label(Label::Healthy).cloned().collect();
        let diseased: Vec<_> = m.by_label(Label::BlackScurf).cloned().collect();
        let res = pair_images(&healthy, &diseased, k, seed);
        if k > nh {
            prop_assert!(res.is_err());
            return Ok(());
        }
        let pairs = res.unwrap();
        prop_assert_eq!(pairs.len(), nd * k);
        for d in &diseased {
            let partners: HashSet<_> = pairs.iter().filter(|p| p.target == d.id).map(|p| p.input.clone()).collect();
            prop_assert_eq!(partners.len(), k);
        }
        prop_assert_eq!(pair_images(&healthy, &diseased, k, seed).unwrap(), pairs);
    }

    #[test]
    fn split_is_stratified(h in 2usize..40, b in 2usize..40, c in 2usize..40, ratio in 0.05f64..0.95, seed in any::<u64>()) {
        let m = manifest([h, b, c]);
        let s = split_dataset(&m, ratio, seed).unwrap();
        for (label, n) in Label::ALL.into_iter().zip([h, b, c]) {
            let train = s.by_label(label).filter(|r| r.split == Split::Train).count();
            let test = s.by_label(label).filter(|r| r.split == Split::Test).count();
            prop_assert_eq!(train + test, n);
            prop_assert!((train as f64 - ratio * n as f64).abs() <= 1.0);
            prop_assert_eq!(train, train_count(n, ratio));
        }
        prop_assert_eq!(split_dataset(&m, ratio, seed).unwrap(), s);
    }
}

#[test]
fn split_examples_and_lineage() {
    let m = manifest([100, 10, 3]);
    let s = split_dataset(&m, 0.8, 1).unwrap();
    let train: BTreeMap<Label, usize> = Label::ALL
        .into_iter()
        .map(|l| (l, s.by_label(l).filter(|r| r.split == Split::Train).count()))
        .collect();
    assert_eq!(train[&Label::Healthy], 80);
    assert_eq!(train[&Label::BlackScurf], 8);
    assert!(split_dataset(&manifest([1, 0, 0]), 0.8, 1).is_err());
    assert!(split_dataset(&m, 1.0, 1).is_err());

    let mut with_aug = m.samples.clone();
    for r in m.samples.iter().take(30) {
        let mut a = rec(format!("{}#hflip", r.id), r.label);
        a.provenance = Provenance::Augmented;
        a.source_id = Some(r.id.clone());
        with_aug.push(a);
    }
    let s = split_dataset(&DatasetManifest::new(with_aug).unwrap(), 0.8, 1).unwrap();
    for a in s.samples.iter().filter(|r| r.provenance == Provenance::Augmented) {
        assert_eq!(a.split, s.get(a.source_id.as_deref().unwrap()).unwrap().split);
    }
}

#[test]
fn vgg_three_region_fixture_has_hand_counted_areas() {
    let doc = json!({
        "_via_settings": { "ui": {} },
        "_via_img_metadata": {
            "a.png123": {
                "filename": "a.png", "size": 123, "file_attributes": {},
                "regions": [
                    { "shape_attributes": { "name": "polygon", "all_points_x": [2, 6, 6, 2], "all_points_y": [3, 3, 8, 8] },
                      "region_attributes": { "class": "black_scurf" } },
                    { "shape_attributes": { "name": "polygon", "all_points_x": [0, 4, 4, 2, 2, 0], "all_points_y": [0, 0, 2, 2, 4, 4] },
                      "region_attributes": { "class": { "common_scab": true } } }
                ]
            },
            "b.png77": {
                "filename": "b.png", "size": 77, "file_attributes": {},
                "regions": { "0": { "shape_attributes": { "name": "polygon", "all_points_x": [10, 13, 13, 10], "all_points_y": [10, 10, 12, 12] },
                                    "region_attributes": { "label": "Black Scurf" } } }
            }
        }
    });
    let imp = import_vgg_annotations(&doc).unwrap();
    assert!(imp.errors.is_empty() && imp.warnings.is_empty(), "{imp:?}");
    assert_eq!(imp.annotations.len(), 3);
    let areas: Vec<usize> = imp.annotations.iter().map(|a| rasterize(a, (16, 16)).unwrap().count()).collect();
    // 4x5 rectangle, a 2-wide L of arm length 4, and a 3x2 rectangle.
    assert_eq!(areas, vec![20, 12, 6]);
    assert_eq!(imp.annotations[1].label, Label::CommonScab);
    assert_eq!(imp.annotations[2].label, Label::BlackScurf);

    let bad = json!({ "x": { "filename": "c.png", "regions": [
        { "shape_attributes": { "name": "rect", "x": 1, "y": 1, "width": 2, "height": 2 }, "region_attributes": { "class": "healthy" } },
        { "shape_attributes": { "name": "polygon", "all_points_x": [1, 2], "all_points_y": [1, 2] }, "region_attributes": { "class": "healthy" } },
        { "shape_attributes": { "name": "polygon", "all_points_x": [1, 2, 3], "all_points_y": [1, 2, 1] }, "region_attributes": { "class": "rust" } }
    ] } });
    let imp = import_vgg_annotations(&bad).unwrap();
    assert_eq!((imp.annotations.len(), imp.warnings.len(), imp.errors.len()), (0, 1, 2));
}

#[test]
fn corpus_coco_round_trip_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec { healthy: 3, black_scurf: 3, common_scab: 3, size: 48, seed: 9 };
    let summary = write_corpus(dir.path(), &spec).unwrap();
    assert_eq!(summary.images, 9);
    let m = load_manifest(dir.path(), Layout::LabelDirectories).unwrap();
    assert_eq!(m.class_counts.values().sum::<usize>(), 9);
    let vgg: serde_json::Value = serde_json::from_slice(&std::fs::read(&summary.annotation_path).unwrap()).unwrap();
    let mut anns = import_vgg_annotations(&vgg).unwrap().annotations;
    assert_eq!(anns.len(), summary.regions);
    anns.push(MaskAnnotation {
        image_id: "black_scurf/black_scurf_000.png".into(),
        label: Label::BlackScurf,
        geometry: Geometry::Bitmask(Mask::from_fn(48, 48, |y, x| (y * 7 + x * 3) % 11 < 4)),
    });

    let doc = export_coco(&m, &anns).unwrap();
    let text = serde_json::to_string(&doc).unwrap();
    let back: CocoDataset = serde_json::from_str(&text).unwrap();
    assert_eq!(back, doc);
    let again = import_coco(&back).unwrap();
    assert_eq!(again.len(), anns.len());
    for (a, b) in anns.iter().zip(&again) {
        assert_eq!(a.label, b.label);
        assert_eq!(a.geometry, b.geometry);
        let rec = cropgan::dataset::coco::resolve_image(&m, &a.image_id).unwrap();
        assert_eq!(b.image_id, rec.id);
    }
    assert_eq!(export_coco(&m, &again).unwrap(), doc);
}

#[test]
fn preprocessing_and_augmentation_contracts() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), &SynthSpec { healthy: 2, black_scurf: 2, common_scab: 2, size: 40, seed: 2 }).unwrap();
    let m = load_manifest(dir.path(), Layout::LabelDirectories).unwrap();
    let s = load_sample(&m.samples[0]).unwrap();
    let cfg = PreprocessConfig::default();
    let p = preprocess(&s, &cfg).unwrap();
    assert_eq!((p.width(), p.height()), (224, 224));
    assert_eq!(p.provenance, Provenance::Preprocessed);
    assert_eq!(preprocess(&s, &cfg).unwrap(), p);
    let bad = PreprocessConfig { contrast_stretch: (50.0, 10.0), ..PreprocessConfig::default() };
    assert!(preprocess(&s, &bad).is_err());

    let ops = AugmentOp::default_set();
    let out = augment(&s, &ops, 5);
    assert_eq!(out.len(), ops.len());
    assert!(out.iter().all(|o| o.provenance == Provenance::Augmented && o.source_id.as_deref() == Some(s.id.as_str())));
    assert_eq!(augment(&s, &[AugmentOp::RandomBrightness { max: 0.2 }], 5), augment(&s, &[AugmentOp::RandomBrightness { max: 0.2 }], 5));
    let ids: HashSet<_> = out.iter().map(|o| o.id.clone()).collect();
    assert_eq!(ids.len(), out.len());
}
