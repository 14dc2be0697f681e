mod common;

use fisheye_ba::camera::CameraModel;
use fisheye_ba::error::Error;
use fisheye_ba::image::DepthMap;
use fisheye_ba::io::*;
use fisheye_ba::synth::synthetic_priors;

fn small_dataset() -> Dataset {
    let (scene, images, depth) = common::ring_scene(CameraModel::Fisheye, [0.08, 0.0, 0.0], 24, 1);
    Dataset {
        images,
        cameras: scene.cameras,
        priors: Some(synthetic_priors(&depth, 0.5, 0.0, 3)),
        depth: Some(depth),
    }
}

fn f32_exact(d: &DepthMap) -> DepthMap {
    DepthMap {
        values: d.values.iter().map(|&v| if v.is_finite() { v as f32 as f64 } else { v }).collect(),
        ..d.clone()
    }
}

#[test]
fn save_then_load_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset();
    save_dataset(&data, dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.len(), data.len());
    for (a, b) in back.images.iter().zip(&data.images) {
        assert_eq!(*a, b.quantized());
    }
    for (a, b) in back.cameras.iter().zip(&data.cameras) {
        let (ra, rb) = (a.to_record(), b.to_record());
        assert_eq!(ra.model, rb.model);
        let (pa, pb) = (a.pose(), b.pose());
        assert!((pa.phi - pb.phi).norm() < 1e-12 && (pa.t - pb.t).norm() < 1e-12);
        assert!((ra.fx - rb.fx).abs() < 1e-12 && (ra.k1 - rb.k1).abs() < 1e-12);
    }
    for (a, b) in back.depth.as_ref().unwrap().iter().zip(data.depth.as_ref().unwrap()) {
        assert_eq!(*a, f32_exact(b));
    }
    assert_eq!(back.priors.as_ref().unwrap().len(), data.len());

    // A loaded dataset is a fixed point of save/load, byte for byte.
    let dir2 = tempfile::tempdir().unwrap();
    save_dataset(&back, dir2.path()).unwrap();
    assert_eq!(load_dataset(dir2.path()).unwrap(), back);
    for sub in ["images/frame_0003.png", "depth/frame_0003.f32", "cameras.json"] {
        assert_eq!(
            std::fs::read(dir.path().join(sub)).unwrap(),
            std::fs::read(dir2.path().join(sub)).unwrap(),
            "{sub}"
        );
    }
}

#[test]
fn missing_camera_record_names_the_frame() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset();
    save_dataset(&data, dir.path()).unwrap();
    write_cameras(&dir.path().join("cameras.json"), &data.cameras[..data.len() - 1]).unwrap();
    match load_dataset(dir.path()) {
        Err(Error::MissingCameraRecord(name)) => assert_eq!(name, format!("{}.png", frame_name(data.len() - 1))),
        other => panic!("expected MissingCameraRecord, got {other:?}"),
    }
}

#[test]
fn depth_dims_must_match_images() {
    let dir = tempfile::tempdir().unwrap();
    let mut data = small_dataset();
    data.depth.as_mut().unwrap()[2] = DepthMap::filled(10, 12, 1.0);
    save_dataset(&data, dir.path()).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::DimensionMismatch(_))));
}

#[test]
fn truncated_depth_file_is_corrupt() {
    let dir = tempfile::tempdir().unwrap();
    write_depth(dir.path(), "d", &DepthMap::filled(4, 3, 1.5)).unwrap();
    let raw = dir.path().join("d.f32");
    let bytes = std::fs::read(&raw).unwrap();
    std::fs::write(&raw, &bytes[..bytes.len() - 4]).unwrap();
    assert!(matches!(read_depth(dir.path(), "d"), Err(Error::CorruptDepthFile { .. })));
    std::fs::write(dir.path().join("d.meta"), "4\n").unwrap();
    assert!(matches!(read_depth(dir.path(), "d"), Err(Error::CorruptDepthFile { .. })));
}

#[test]
fn depth_file_layout_is_raw_little_endian() {
    let dir = tempfile::tempdir().unwrap();
    let mut d = DepthMap::filled(3, 2, 2.5);
    d.set(1, 0, f64::INFINITY);
    write_depth(dir.path(), "d", &d).unwrap();
    let raw = std::fs::read(dir.path().join("d.f32")).unwrap();
    assert_eq!(raw.len(), 24);
    assert_eq!(&raw[0..4], &2.5f32.to_le_bytes());
    assert_eq!(&raw[4..8], &0f32.to_le_bytes());
    assert_eq!(std::fs::read_to_string(dir.path().join("d.meta")).unwrap(), "3 2\n");
    let back = read_depth(dir.path(), "d").unwrap();
    assert_eq!(back, d);
}

#[test]
fn init_depth_sources() {
    let dir = tempfile::tempdir().unwrap();
    let mut data = small_dataset();
    let truth = data.depth.clone().unwrap();

    let gt = init_depth(&data, &DepthInitConfig { source: DepthInitSource::GroundTruth, ..Default::default() }, dir.path()).unwrap();
    for (g, t) in gt.iter().zip(&truth) {
        assert_eq!(g.abs_rel_error(t), Some(0.0));
    }

    let c = init_depth(&data, &DepthInitConfig { source: DepthInitSource::Constant, constant: 2.0, ..Default::default() }, dir.path()).unwrap();
    assert!(c.iter().all(|d| d.values.iter().all(|&v| v == 2.0)));

    // Priors at half the true depth come back at true scale after alignment.
    let p = init_depth(&data, &DepthInitConfig::default(), dir.path()).unwrap();
    for (g, t) in p.iter().zip(&truth) {
        assert!(g.abs_rel_error(t).unwrap() < 0.05);
    }

    data.priors = None;
    assert!(matches!(init_depth(&data, &DepthInitConfig::default(), dir.path()), Err(Error::MissingPriors(_))));
}

#[test]
fn run_config_rejects_unknown_keys_and_fills_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, "seed = 4\n[optimizer]\nlambda = 0.25\n").unwrap();
    let cfg = RunConfig::load(&path).unwrap();
    assert_eq!(cfg.seed, 4);
    assert_eq!(cfg.optimizer.lambda, 0.25);
    assert_eq!(cfg.optimizer.window, RunConfig::default().optimizer.window);
    std::fs::write(&path, "[optimizer]\nlamda = 0.25\n").unwrap();
    assert!(matches!(RunConfig::load(&path), Err(Error::Config(_))));
}

#[test]
fn shipped_configs_parse() {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    assert_eq!(RunConfig::load(&root.join("run.toml")).unwrap(), RunConfig::default());
}
