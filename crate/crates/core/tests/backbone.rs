use keyvol::backbone::{
    dataset_hash, generate_dataset, load_dataset, read_bundle, synth_generate, synth_generate_with_diagnostics,
    write_bundle, RigParams, SceneSpec,
};
use keyvol::geometry::{make_orbit_rig, pixel_to_array, CameraRig};
use keyvol::Error;
use std::fs;

fn rig() -> CameraRig {
    make_orbit_rig(4, 10.0, 3.5, (64, 64)).unwrap()
}

#[test]
fn generation_is_deterministic() {
    let spec = SceneSpec::figure(11);
    let a = synth_generate(&spec, &rig(), 5).unwrap();
    let b = synth_generate(&spec, &rig(), 5).unwrap();
    assert_eq!(a, b);
    let c = synth_generate(&spec, &rig(), 6).unwrap();
    assert_ne!(a.ground_truth_joints, c.ground_truth_joints);
}

#[test]
fn empty_scene_renders_nothing() {
    let s = synth_generate(&SceneSpec::single_joint(0), &rig(), 1).unwrap();
    assert!(s.masks.data().iter().all(|&m| m == 0.0));
    assert!(s.images.data().iter().all(|&v| v == 0.0));
    for f in s.layer_features.as_ref().unwrap() {
        assert!(f.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn background_pixels_are_exactly_black() {
    let s = synth_generate(&SceneSpec::figure(0), &rig(), 9).unwrap();
    let (k, h, w) = (4, 64, 64);
    let mut fg = 0;
    for v in 0..k {
        for p in 0..h * w {
            let m = s.masks.data()[v * h * w + p];
            let rgb: Vec<f64> = (0..3).map(|c| s.images.data()[(v * 3 + c) * h * w + p]).collect();
            if m == 0.0 {
                assert_eq!(rgb, vec![0.0; 3]);
            } else {
                fg += 1;
                assert!(rgb.iter().any(|&x| x > 0.0));
            }
        }
    }
    assert!(fg > 200, "figure covers only {fg} pixels");
}

fn dilated(mask: &[f64], h: usize, w: usize, r: isize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for row in 0..h as isize {
        for col in 0..w as isize {
            if mask[(row as usize) * w + col as usize] == 0.0 {
                continue;
            }
            for dr in -r..=r {
                for dc in -r..=r {
                    let (rr, cc) = (row + dr, col + dc);
                    if rr >= 0 && cc >= 0 && rr < h as isize && cc < w as isize {
                        out[rr as usize * w + cc as usize] = true;
                    }
                }
            }
        }
    }
    out
}

#[test]
fn projected_joints_land_in_dilated_masks() {
    let spec = SceneSpec::figure(0);
    let rig = rig();
    let (h, w) = (64, 64);
    let (mut inside, mut visible) = (0, 0);
    for seed in 0..20 {
        let s = synth_generate(&spec, &rig, seed).unwrap();
        let joints = s.ground_truth_joints.as_ref().unwrap();
        for (v, cam) in rig.cameras().iter().enumerate() {
            let support = dilated(&s.masks.data()[v * h * w..(v + 1) * h * w], h, w, 3);
            for j in 0..joints.dim(0) {
                let p = nalgebra::Vector3::from_row_slice(&joints.data()[j * 3..j * 3 + 3]);
                let proj = cam.project_point(&p);
                let a = pixel_to_array(proj.pixel, (h, w));
                let (col, row) = (a.x.round(), a.y.round());
                if !proj.valid || col < 0.0 || row < 0.0 || col >= w as f64 || row >= h as f64 {
                    continue;
                }
                visible += 1;
                if support[row as usize * w + col as usize] {
                    inside += 1;
                }
            }
        }
    }
    let frac = inside as f64 / visible as f64;
    assert!(frac >= 0.95, "{inside}/{visible} joints inside dilated masks");
}

#[test]
fn feature_argmax_identifies_unoccluded_limbs() {
    let spec = SceneSpec::figure(0);
    let rig = rig();
    let (k, h, w) = (4, 64, 64);
    let limbs = spec.limbs().len();
    let (mut hits, mut total) = (0, 0);
    for seed in 0..20 {
        let (s, diag) = synth_generate_with_diagnostics(&spec, &rig, seed).unwrap();
        let f0 = &s.layer_features.as_ref().unwrap()[0];
        for (v, cam) in rig.cameras().iter().enumerate() {
            for (l, &(p, c)) in spec.limbs().iter().enumerate() {
                if !diag.midpoint_unoccluded[v][l] {
                    continue;
                }
                total += 1;
                let mid = (diag.joints[p] + diag.joints[c]) / 2.0;
                let a = pixel_to_array(cam.project_point(&mid).pixel, (h, w));
                let (col, row) = (a.x.round() as usize, a.y.round() as usize);
                let channel = |i: usize| f0.data()[((i * k + v) * h + row) * w + col];
                let best = (0..limbs).max_by(|&a, &b| channel(a).total_cmp(&channel(b))).unwrap();
                if best == l {
                    hits += 1;
                }
            }
        }
    }
    assert!(total > 100);
    assert!(hits as f64 >= 0.9 * total as f64, "{hits}/{total}");
}

#[test]
fn bundle_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let s = synth_generate(&SceneSpec::figure(0), &rig(), 3).unwrap();
    write_bundle(&s, dir.path()).unwrap();
    let back = read_bundle(dir.path()).unwrap();
    assert_eq!(back.masks, s.masks);
    assert_eq!(back.rig, s.rig);
    assert_eq!(back.ground_truth_joints, s.ground_truth_joints);
    for (a, b) in back.images.data().iter().zip(s.images.data()) {
        assert_eq!(*a, *b as f32 as f64);
    }
    let (fa, fb) = (back.layer_features.unwrap(), s.layer_features.unwrap());
    assert_eq!(fa.len(), fb.len());
    for (a, b) in fa.iter().zip(&fb) {
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(*x, *y as f32 as f64);
        }
    }
}

#[test]
fn bundle_view_count_mismatch_is_a_shape_error() {
    let dir = tempfile::tempdir().unwrap();
    let rig3 = make_orbit_rig(3, 10.0, 3.5, (16, 16)).unwrap();
    let s = synth_generate(&SceneSpec::figure(0), &rig3, 3).unwrap();
    write_bundle(&s, dir.path()).unwrap();
    let path = dir.path().join("manifest.json");
    let mut manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    manifest["metadata"]["views"] = 4.into();
    fs::write(&path, manifest.to_string()).unwrap();
    match read_bundle(dir.path()) {
        Err(Error::ShapeMismatch { entry, expected, found }) => {
            assert_eq!(entry, "images");
            assert_eq!(expected, vec![4, 3, 16, 16]);
            assert_eq!(found, vec![3, 3, 16, 16]);
        }
        other => panic!("expected a shape mismatch, got {other:?}"),
    }
}

#[test]
fn bundle_unknown_version_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let s = synth_generate(&SceneSpec::figure(0), &make_orbit_rig(1, 10.0, 3.5, (8, 8)).unwrap(), 3).unwrap();
    write_bundle(&s, dir.path()).unwrap();
    let path = dir.path().join("manifest.json");
    let text = fs::read_to_string(&path).unwrap().replace("\"format_version\": 1", "\"format_version\": 7");
    fs::write(&path, text).unwrap();
    assert!(matches!(read_bundle(dir.path()), Err(Error::UnsupportedVersion { found: 7, .. })));
}

#[test]
fn bundle_without_features_loads_but_cannot_be_lifted() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = synth_generate(&SceneSpec::figure(0), &make_orbit_rig(2, 10.0, 3.5, (8, 8)).unwrap(), 3).unwrap();
    s.layer_features = None;
    write_bundle(&s, dir.path()).unwrap();
    let back = read_bundle(dir.path()).unwrap();
    assert!(back.layer_features.is_none());
    assert!(back.features().is_err());
}

#[test]
fn dataset_hash_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let params = RigParams {
        image_size: [16, 16],
        ..RigParams::default()
    };
    let spec = SceneSpec::figure(0);
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    generate_dataset(&a, 3, &spec, &params, 42).unwrap();
    generate_dataset(&b, 3, &spec, &params, 42).unwrap();
    generate_dataset(&c, 3, &spec, &params, 43).unwrap();
    assert_eq!(dataset_hash(&a, &[]).unwrap(), dataset_hash(&b, &[]).unwrap());
    assert_ne!(dataset_hash(&a, &[]).unwrap(), dataset_hash(&c, &[]).unwrap());
    let (index, samples) = load_dataset(&a).unwrap();
    assert_eq!(index.samples.len(), 3);
    assert_eq!(samples.len(), 3);
    assert!(generate_dataset(&a, 1, &spec, &params, 1).is_err(), "non-empty output must be refused");
}

#[test]
fn empty_dataset_is_fine() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("empty");
    let index = generate_dataset(&out, 0, &SceneSpec::figure(0), &RigParams::default(), 1).unwrap();
    assert!(index.samples.is_empty());
    assert!(load_dataset(&out).unwrap().1.is_empty());
}

#[test]
fn truncating_views_keeps_the_input_view() {
    let s = synth_generate(&SceneSpec::figure(0), &make_orbit_rig(4, 10.0, 3.5, (16, 16)).unwrap(), 3).unwrap();
    let t = s.truncated(1).unwrap();
    assert_eq!(t.views(), 1);
    assert_eq!(t.images.data(), &s.images.data()[..3 * 256]);
    t.validate().unwrap();
    let f = &t.layer_features.as_ref().unwrap()[1];
    assert_eq!(f.shape(), &[5, 1, 8, 8]);
}
