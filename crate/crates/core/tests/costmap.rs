mod common;

use common::textured_scene;
use fisheye_ba::camera::{Camera, CameraModel, FisheyeCamera, PinholeCamera};
use fisheye_ba::costmap::{
    cost_gradient_check, fisheye_cost, fisheye_sweep_depth, pinhole_cost, CostOptions,
    DepthHypotheses,
};
use fisheye_ba::features::{extract_features, FeatureConfig, FeaturePyramid};
use fisheye_ba::geometry::PoseSE3;
use fisheye_ba::image::DepthMap;
use fisheye_ba::synth::{
    generate_scene, render_ground_truth, Layout, Primitive, RigSpec, SceneSpec, TextureSpec,
};
use nalgebra::{Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pinhole(c: &Camera) -> PinholeCamera {
    *c.intrinsics()
}

fn fisheye(c: &Camera) -> FisheyeCamera {
    match c {
        Camera::Fisheye(f) => *f,
        _ => panic!("expected fisheye"),
    }
}

/// Fronto-parallel plane at z = 2.25 seen by cameras shifted by exactly four
/// pixels, with a texture whose period equals the image footprint. The depth
/// sits off the checker lattice so rounding cannot flip a checker cell.
fn periodic_plane_scene() -> (Vec<Camera>, Vec<FeaturePyramid>, DepthMap) {
    let tex = TextureSpec {
        period: Some(4.0),
        scale: 0.5,
        checker_size: 0.5,
        ..Default::default()
    };
    let spec = SceneSpec {
        seed: 1,
        background: [0.0; 3],
        supersample: 3,
        primitives: vec![Primitive::Plane {
            point: [0.0, 0.0, 2.25],
            normal: [0.0, 0.0, -1.0],
            texture: tex,
        }],
        cameras: RigSpec {
            model: CameraModel::Pinhole,
            count: 2,
            width: 64,
            height: 64,
            fx: 36.0,
            fy: 36.0,
            cx: None,
            cy: None,
            k: [0.0; 3],
            layout: Layout::Line {
                start: [0.0; 3],
                step: [0.25, 0.0, 0.0],
            },
            min_coverage: 0.5,
        },
    };
    let scene = generate_scene(&spec).unwrap();
    let cfg = FeatureConfig::default();
    let mut pyrs = Vec::new();
    let mut depth0 = None;
    for cam in &scene.cameras {
        let (img, depth) = render_ground_truth(&scene, cam);
        pyrs.push(extract_features(&img, &cfg).unwrap());
        depth0.get_or_insert(depth);
    }
    (scene.cameras, pyrs, depth0.unwrap())
}

fn relative(cams: &[Camera], target: usize, i: usize) -> PoseSE3 {
    cams[i].pose().inverse().compose(&cams[target].pose())
}

#[test]
fn self_warp_is_zero() {
    let (cams, pyrs, depths) = textured_scene(CameraModel::Pinhole, [0.0; 3]);
    let c = pinhole(&cams[0]);
    for d in [1.0, 2.5] {
        let depth = DepthMap::filled(64, 48, d);
        let e = pinhole_cost(
            &pyrs[0],
            &c,
            &[(&pyrs[0], c)],
            &[PoseSE3::identity()],
            &depth,
            &CostOptions::default(),
            None,
        )
        .unwrap();
        assert!(e.value.abs() < 1e-15);
    }
    let _ = depths;
    let (cams, pyrs, depths) = textured_scene(CameraModel::Fisheye, [0.08, 0.0, 0.0]);
    let f = fisheye(&cams[0]);
    let e = fisheye_cost(
        &pyrs[0],
        &f,
        &[(&pyrs[0], f)],
        &depths[0],
        &CostOptions::default(),
        None,
    )
    .unwrap();
    assert!(e.value.abs() < 1e-9, "{}", e.value);
}

#[test]
fn ground_truth_plane_has_zero_cost() {
    let (cams, pyrs, depth) = periodic_plane_scene();
    let rel = relative(&cams, 0, 1);
    let c = pinhole(&cams[0]);
    let e = pinhole_cost(
        &pyrs[0],
        &c,
        &[(&pyrs[1], c)],
        &[rel],
        &depth,
        &CostOptions::default(),
        None,
    )
    .unwrap();
    assert!(e.value < 1e-6, "{}", e.value);
    assert!(e.valid_count > 1000);
    for l in 1..3 {
        let opts = CostOptions {
            level: l,
            ..Default::default()
        };
        let e = pinhole_cost(&pyrs[0], &c, &[(&pyrs[1], c)], &[rel], &depth, &opts, None).unwrap();
        assert!(e.value.is_finite());
    }
}

#[test]
fn rotating_true_pose_increases_cost() {
    let (cams, pyrs, depths) = textured_scene(CameraModel::Pinhole, [0.0; 3]);
    let c = pinhole(&cams[0]);
    let rel = relative(&cams, 0, 1);
    let opts = CostOptions::default();
    let base = pinhole_cost(
        &pyrs[0],
        &c,
        &[(&pyrs[1], c)],
        &[rel],
        &depths[0],
        &opts,
        None,
    )
    .unwrap()
    .value;
    for axis in [Vector3::x(), Vector3::y(), Vector3::z()] {
        let w = axis * 1f64.to_radians();
        let p = rel.retract(&Vector6::new(w.x, w.y, w.z, 0.0, 0.0, 0.0));
        let v = pinhole_cost(
            &pyrs[0],
            &c,
            &[(&pyrs[1], c)],
            &[p],
            &depths[0],
            &opts,
            None,
        )
        .unwrap()
        .value;
        assert!(v > base, "{v} <= {base}");
    }
}

#[test]
fn zeroing_distortion_increases_cost() {
    let (cams, pyrs, depths) = textured_scene(CameraModel::Fisheye, [0.1, 0.0, 0.0]);
    let opts = CostOptions::default();
    let cost = |k: [f64; 3]| {
        let cs: Vec<FisheyeCamera> = cams
            .iter()
            .map(|c| fisheye(c).with_distortion(k).unwrap())
            .collect();
        let nb = vec![(&pyrs[1], cs[1]), (&pyrs[2], cs[2])];
        fisheye_cost(&pyrs[0], &cs[0], &nb, &depths[0], &opts, None)
            .unwrap()
            .value
    };
    let truth = cost([0.1, 0.0, 0.0]);
    assert!(cost([0.0; 3]) > truth);
}

#[test]
fn cost_is_invariant_to_global_rigid_motion() {
    let (cams, pyrs, depths) = textured_scene(CameraModel::Fisheye, [0.05, 0.0, 0.0]);
    let g = PoseSE3::new(Vector3::new(0.3, -0.2, 0.5), Vector3::new(1.0, 2.0, -3.0));
    let opts = CostOptions::default();
    let eval = |cs: &[FisheyeCamera]| {
        let nb = vec![(&pyrs[1], cs[1]), (&pyrs[2], cs[2])];
        fisheye_cost(&pyrs[0], &cs[0], &nb, &depths[0], &opts, None)
            .unwrap()
            .value
    };
    let a: Vec<FisheyeCamera> = cams.iter().map(fisheye).collect();
    let b: Vec<FisheyeCamera> = a.iter().map(|c| c.with_pose(g.compose(&c.pose))).collect();
    assert!((eval(&a) - eval(&b)).abs() < 1e-9);
}

fn perturbed(p: &PoseSE3, rng: &mut ChaCha8Rng, rot: f64, trans: f64) -> PoseSE3 {
    let d = Vector6::from_fn(|i, _| rng.random_range(-1.0..1.0) * if i < 3 { rot } else { trans });
    p.retract(&d)
}

#[test]
fn pinhole_pose_and_depth_gradients_match_finite_differences() {
    let (cams, pyrs, depths) = textured_scene(CameraModel::Pinhole, [0.0; 3]);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let c = pinhole(&cams[0]);
    let poses = vec![
        perturbed(&relative(&cams, 0, 1), &mut rng, 0.01, 0.01),
        perturbed(&relative(&cams, 0, 2), &mut rng, 0.01, 0.01),
    ];
    let depth = DepthMap {
        values: depths[0]
            .values
            .iter()
            .map(|d| d * rng.random_range(0.95..1.05))
            .collect(),
        ..depths[0].clone()
    };
    let nb = vec![(&pyrs[1], c), (&pyrs[2], c)];
    let opts = CostOptions::default();
    let base = pinhole_cost(&pyrs[0], &c, &nb, &poses, &depth, &opts, None).unwrap();
    let lock = base.lock.clone();

    for i in 0..2 {
        let f = |d: &[f64]| {
            let mut ps = poses.clone();
            ps[i] = poses[i].retract(&Vector6::from_column_slice(d));
            pinhole_cost(&pyrs[0], &c, &nb, &ps, &depth, &opts, Some(&lock))
                .unwrap()
                .value
        };
        let err = cost_gradient_check(f, &[0.0; 6], base.grad_pose[i].as_slice(), 1e-5);
        assert!(err < 1e-4, "pose {i}: {err}");
    }

    let valid: Vec<usize> = (0..depth.values.len())
        .filter(|&i| base.valid_mask[i])
        .collect();
    let picks: Vec<usize> = rand::seq::index::sample(&mut rng, valid.len(), 64)
        .iter()
        .map(|k| valid[k])
        .collect();
    let x0: Vec<f64> = picks.iter().map(|&i| depth.values[i]).collect();
    let g: Vec<f64> = picks.iter().map(|&i| base.grad_depth[i]).collect();
    let f = |x: &[f64]| {
        let mut d = depth.clone();
        for (k, &i) in picks.iter().enumerate() {
            d.values[i] = x[k];
        }
        pinhole_cost(&pyrs[0], &c, &nb, &poses, &d, &opts, Some(&lock))
            .unwrap()
            .value
    };
    let err = cost_gradient_check(f, &x0, &g, 1e-5);
    assert!(err < 1e-4, "depth: {err}");
}

#[test]
fn fisheye_pose_and_distortion_gradients_match_finite_differences() {
    let (cams, pyrs, depths) = textured_scene(CameraModel::Fisheye, [0.08, 0.01, 0.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cs: Vec<FisheyeCamera> = cams
        .iter()
        .map(|c| fisheye(c).with_pose(perturbed(&c.pose(), &mut rng, 0.01, 0.01)))
        .collect();
    let opts = CostOptions::default();
    let eval = |cs: &[FisheyeCamera], lock| {
        let nb = vec![(&pyrs[1], cs[1]), (&pyrs[2], cs[2])];
        fisheye_cost(&pyrs[0], &cs[0], &nb, &depths[0], &opts, lock).unwrap()
    };
    let base = eval(&cs, None);
    let lock = base.lock.clone();
    let grads = [
        base.grad_target_pose.unwrap(),
        base.grad_pose[0],
        base.grad_pose[1],
    ];
    for (j, g) in grads.iter().enumerate() {
        let f = |d: &[f64]| {
            let mut c2 = cs.clone();
            c2[j] = cs[j].with_pose(cs[j].pose.retract(&Vector6::from_column_slice(d)));
            eval(&c2, Some(&lock)).value
        };
        let err = cost_gradient_check(f, &[0.0; 6], g.as_slice(), 1e-5);
        assert!(err < 1e-4, "camera {j}: {err}");
    }
    let f = |k: &[f64]| {
        let c2: Vec<FisheyeCamera> = cs
            .iter()
            .map(|c| c.with_distortion([k[0], k[1], k[2]]).unwrap())
            .collect();
        eval(&c2, Some(&lock)).value
    };
    let err = cost_gradient_check(f, &cs[0].k, base.grad_distortion.unwrap().as_slice(), 1e-5);
    assert!(err < 1e-4, "distortion: {err}");
}

#[test]
fn sweep_recovers_ground_truth_range() {
    let (cams, pyrs, depths) = textured_scene(CameraModel::Fisheye, [0.08, 0.0, 0.0]);
    let cs: Vec<FisheyeCamera> = cams.iter().map(fisheye).collect();
    let nb = vec![(&pyrs[1], cs[1]), (&pyrs[2], cs[2])];
    let opts = CostOptions {
        stride: 2,
        ..Default::default()
    };
    let hyp = DepthHypotheses {
        count: 48,
        near: 1.0,
        far: 6.0,
    };
    let d = fisheye_sweep_depth(&pyrs[0], &cs[0], &nb, &hyp, &opts);
    let err = d.abs_rel_error(&depths[0]).unwrap();
    assert!(err < 0.1, "{err}");
    let e = fisheye_cost(&pyrs[0], &cs[0], &nb, &d, &opts, None).unwrap();
    assert!(e.value.is_finite());
}
