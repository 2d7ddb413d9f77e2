mod common;

use std::path::Path;

use common::fabricate_utiris;
use iriscale::datagen::{
    detector_split, import_utiris, load_image, load_manifest, mask_bbox, render_eye, synth_dataset, DatasetManifest,
    LabelLevel, Pose, Spectrum, SynthSpec,
};
use iriscale::preprocess::{crop_box, resize_to_width, zero_pad_square};
use iriscale::Error;

fn small_spec(seed: u64) -> SynthSpec {
    SynthSpec { num_identities: 4, images_per_identity: 5, image_size: 32, seed, ..SynthSpec::default() }
}

fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn default_spec_gives_800_samples_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth_dataset(&SynthSpec::default(), dir.path()).unwrap();
    assert_eq!(m.len(), 800);
    for i in 0..m.len() {
        assert!(m.image_path(i).is_file());
        assert!(m.mask_path(i).unwrap().is_file());
    }
    let (train, test) = detector_split(&m, 0.2, 7).unwrap();
    assert_eq!((train.len(), test.len()), (160, 640));
    let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..800).collect::<Vec<_>>());
    assert_eq!(detector_split(&m, 0.2, 7).unwrap(), (train, test));
}

#[test]
fn regeneration_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    synth_dataset(&small_spec(3), a.path()).unwrap();
    synth_dataset(&small_spec(3), b.path()).unwrap();
    assert_eq!(tree_bytes(a.path()), tree_bytes(b.path()));
    let c = tempfile::tempdir().unwrap();
    synth_dataset(&small_spec(4), c.path()).unwrap();
    assert_ne!(tree_bytes(a.path()), tree_bytes(c.path()));
}

#[test]
fn stored_masks_match_stored_boxes() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec { partial_capture: true, ..small_spec(5) };
    let m = synth_dataset(&spec, dir.path()).unwrap();
    for i in 0..m.len() {
        let mask = iriscale::datagen::load_mask(&m.mask_path(i).unwrap()).unwrap();
        assert_eq!(mask_bbox(&mask).unwrap().to_array(), m.samples[i].bbox.unwrap());
    }
}

#[test]
fn manifest_round_trip_and_missing_file() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth_dataset(&small_spec(1), dir.path()).unwrap();
    let loaded = load_manifest(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(loaded, m);

    let gone = m.image_path(3);
    std::fs::remove_file(&gone).unwrap();
    match load_manifest(&dir.path().join("manifest.json")) {
        Err(Error::MissingFile(p)) => assert_eq!(p, gone),
        other => panic!("{other:?}"),
    }
}

#[test]
fn schema_violation_names_the_record() {
    let dir = tempfile::tempdir().unwrap();
    synth_dataset(&small_spec(1), dir.path()).unwrap();
    let path = dir.path().join("manifest.json");
    let mut m: DatasetManifest = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    m.samples[6].bbox = Some([5.0, 5.0, 2.0, 9.0]);
    std::fs::write(&path, serde_json::to_string(&m).unwrap()).unwrap();
    let err = load_manifest(&path).unwrap_err();
    assert!(matches!(err, Error::Manifest { index: 6, .. }), "{err}");
}

#[test]
fn utiris_layout_imports_79_people_158_eyes_1540_images() {
    let dir = tempfile::tempdir().unwrap();
    fabricate_utiris(dir.path());
    let m = import_utiris(dir.path()).unwrap();
    let r = m.class_report();
    assert_eq!((r.identities, r.eye_classes, r.samples), (79, 158, 1540));
    assert_eq!(m.labels(LabelLevel::Eye).1, 158);
    assert_eq!(m.spectra(), [Spectrum::Vw, Spectrum::Nir]);
    assert!(r.vw > 0 && r.nir > 0);
    let nir = m.samples.iter().position(|s| s.spectrum == Spectrum::Nir).unwrap();
    assert_eq!(load_image(&m.image_path(nir)).unwrap().shape()[0], 1);
}

#[test]
fn different_identities_differ_inside_the_iris() {
    let spec = SynthSpec::default();
    let mut worst = f64::INFINITY;
    for pair in 0..100 {
        let (a, b) = (2 * pair, 2 * pair + 1);
        let pose = Pose::sample(&spec, a, 0);
        let (x, y) = (render_eye(a, &pose, &spec).unwrap(), render_eye(b, &pose, &spec).unwrap());
        let (mut sum, mut n) = (0.0f64, 0usize);
        let s = spec.image_size;
        for i in 0..s * s {
            if x.mask.data()[i] > 0.5 {
                for k in 0..3 {
                    sum += ((x.image.data()[k * s * s + i] - y.image.data()[k * s * s + i]) as f64).abs() / 255.0;
                    n += 1;
                }
            }
        }
        worst = worst.min(sum / n as f64);
    }
    assert!(worst > 0.05, "smallest mean absolute difference {worst}");
}

fn crop_vector(identity: usize, index: usize, spec: &SynthSpec) -> Vec<f32> {
    let eye = render_eye(identity, &Pose::sample(spec, identity, index), spec).unwrap();
    let crop = crop_box(&eye.image, &eye.bbox).unwrap();
    zero_pad_square(&resize_to_width(&crop, 8).unwrap(), 8).unwrap().into_data()
}

#[test]
fn nearest_centroid_beats_chance_fivefold() {
    let spec = SynthSpec { num_identities: 10, ..SynthSpec::default() };
    let centroids: Vec<Vec<f32>> = (0..10)
        .map(|id| {
            let mut c = vec![0.0; 3 * 64];
            for idx in 0..10 {
                for (a, v) in c.iter_mut().zip(crop_vector(id, idx, &spec)) {
                    *a += v / 10.0;
                }
            }
            c
        })
        .collect();
    let mut correct = 0;
    let mut total = 0;
    for id in 0..10 {
        for idx in 10..30 {
            let v = crop_vector(id, idx, &spec);
            let dist = |c: &Vec<f32>| c.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum::<f32>();
            let best = (0..10).min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b]))).unwrap();
            correct += usize::from(best == id);
            total += 1;
        }
    }
    let acc = correct as f64 / total as f64;
    assert!(acc >= 0.5, "nearest-centroid accuracy {acc} vs chance 0.1");
}

#[test]
fn render_determinism_in_memory() {
    let spec = SynthSpec::default();
    let p = Pose::sample(&spec, 3, 9);
    let (a, b) = (render_eye(3, &p, &spec).unwrap(), render_eye(3, &p, &spec).unwrap());
    assert_eq!(a.image, b.image);
    assert_eq!(a.mask, b.mask);
    assert_eq!(a.bbox, b.bbox);
}
