#![allow(dead_code)]

use fisheye_ba::camera::{Camera, CameraModel};
use fisheye_ba::features::{extract_features, FeatureConfig, FeaturePyramid};
use fisheye_ba::geometry::PoseSE3;
use fisheye_ba::image::{DepthMap, Image};
use fisheye_ba::synth::{
    generate_scene, render_ground_truth, Layout, Primitive, RigSpec, SceneSpec, SyntheticScene,
    TextureSpec,
};
use nalgebra::Vector3;

pub fn texture(seed: u64) -> TextureSpec {
    TextureSpec {
        seed,
        scale: 0.35,
        octaves: 3,
        checker_weight: 0.2,
        checker_size: 0.6,
        ..Default::default()
    }
}

/// Eight cameras on a ring around a sphere and two boxes standing on a floor,
/// all inside a textured dome.
pub fn ring_spec(model: CameraModel, k: [f64; 3], size: usize, seed: u64) -> SceneSpec {
    let f = match model {
        CameraModel::Pinhole => size as f64 * 0.8,
        CameraModel::Fisheye => size as f64 * 0.55,
    };
    SceneSpec {
        seed,
        background: [0.0; 3],
        supersample: 3,
        primitives: vec![
            Primitive::Sphere {
                center: [0.0, 0.0, 0.0],
                radius: 0.6,
                texture: texture(seed * 10 + 1),
            },
            Primitive::Box {
                min: [0.7, -0.2, -0.9],
                max: [1.2, 0.8, -0.4],
                texture: texture(seed * 10 + 2),
            },
            Primitive::Box {
                min: [-1.1, 0.1, 0.3],
                max: [-0.6, 0.8, 0.9],
                texture: texture(seed * 10 + 3),
            },
            Primitive::Plane {
                point: [0.0, 0.8, 0.0],
                normal: [0.0, -1.0, 0.0],
                texture: texture(seed * 10 + 4),
            },
            Primitive::Sphere {
                center: [0.0, 0.0, 0.0],
                radius: 7.0,
                texture: texture(seed * 10 + 5),
            },
        ],
        cameras: RigSpec {
            model,
            count: 8,
            width: size,
            height: size,
            fx: f,
            fy: f,
            cx: None,
            cy: None,
            k,
            layout: Layout::Ring {
                radius: 2.5,
                height: 0.6,
                look_at: [0.0, 0.0, 0.0],
                start_deg: 0.0,
                arc_deg: 360.0,
            },
            min_coverage: 0.5,
        },
    }
}

pub fn render_all(scene: &SyntheticScene) -> (Vec<Image>, Vec<DepthMap>) {
    scene
        .cameras
        .iter()
        .map(|c| render_ground_truth(scene, c))
        .unzip()
}

pub fn ring_scene(
    model: CameraModel,
    k: [f64; 3],
    size: usize,
    seed: u64,
) -> (SyntheticScene, Vec<Image>, Vec<DepthMap>) {
    let scene = generate_scene(&ring_spec(model, k, size, seed)).unwrap();
    let (images, depth) = render_all(&scene);
    (scene, images, depth)
}

/// Eight pinhole cameras on a line, facing a sphere and two boxes in front
/// of a textured wall.
pub fn forward_scene(size: usize, seed: u64) -> (SyntheticScene, Vec<Image>, Vec<DepthMap>) {
    let b = 0.3;
    let spec = SceneSpec {
        seed,
        background: [0.0; 3],
        supersample: 3,
        primitives: vec![
            Primitive::Sphere {
                center: [0.0, 0.0, 0.0],
                radius: 0.6,
                texture: texture(seed * 10 + 1),
            },
            Primitive::Box {
                min: [0.5, -0.9, -0.4],
                max: [1.1, -0.3, 0.2],
                texture: texture(seed * 10 + 2),
            },
            Primitive::Box {
                min: [-1.2, 0.1, 0.3],
                max: [-0.6, 0.8, 0.9],
                texture: texture(seed * 10 + 3),
            },
            Primitive::Plane {
                point: [0.0, 0.0, 1.5],
                normal: [0.0, 0.0, -1.0],
                texture: texture(seed * 10 + 4),
            },
        ],
        cameras: RigSpec {
            model: CameraModel::Pinhole,
            count: 8,
            width: size,
            height: size,
            fx: 0.8 * size as f64,
            fy: 0.8 * size as f64,
            cx: None,
            cy: None,
            k: [0.0; 3],
            layout: Layout::Line {
                start: [-3.5 * b, 0.0, -3.0],
                step: [b, 0.0, 0.0],
            },
            min_coverage: 0.5,
        },
    };
    let scene = generate_scene(&spec).unwrap();
    let (images, depth) = render_all(&scene);
    (scene, images, depth)
}

/// Ten cameras on a line 2 units in front of a textured slab.
pub fn textured_plane_spec(model: CameraModel, size: usize) -> SceneSpec {
    let f = match model {
        CameraModel::Pinhole => size as f64 * 0.8,
        CameraModel::Fisheye => size as f64 * 0.55,
    };
    let b = 0.1;
    SceneSpec {
        seed: 1,
        background: [0.0; 3],
        supersample: 3,
        primitives: vec![Primitive::Box {
            min: [-1.5, -1.5, 2.0],
            max: [1.5, 1.5, 2.1],
            texture: texture(7),
        }],
        cameras: RigSpec {
            model,
            count: 10,
            width: size,
            height: size,
            fx: f,
            fy: f,
            cx: None,
            cy: None,
            k: [0.05, 0.0, 0.0],
            layout: Layout::Line {
                start: [-4.5 * b, 0.0, 0.0],
                step: [b, 0.0, 0.0],
            },
            min_coverage: 0.1,
        },
    }
}

/// Three cameras with small baselines facing a plane, a sphere and a box,
/// returned with their feature pyramids and true depth.
pub fn textured_scene(model: CameraModel, k: [f64; 3]) -> (Vec<Camera>, Vec<FeaturePyramid>, Vec<DepthMap>) {
    let tex = |seed| TextureSpec {
        seed,
        scale: 0.3,
        checker_size: 0.4,
        ..Default::default()
    };
    let spec = SceneSpec {
        seed: 3,
        background: [0.0; 3],
        supersample: 3,
        primitives: vec![
            Primitive::Plane {
                point: [0.0, 0.0, 3.0],
                normal: [0.0, 0.0, -1.0],
                texture: tex(1),
            },
            Primitive::Sphere {
                center: [0.3, 0.1, 2.0],
                radius: 0.5,
                texture: tex(2),
            },
            Primitive::Box {
                min: [-1.2, -0.6, 2.0],
                max: [-0.6, 0.2, 2.6],
                texture: tex(3),
            },
        ],
        cameras: RigSpec {
            model,
            count: 3,
            width: 64,
            height: 48,
            fx: 40.0,
            fy: 38.0,
            cx: None,
            cy: None,
            k,
            layout: Layout::Explicit {
                poses: vec![
                    PoseSE3::identity(),
                    PoseSE3::new(Vector3::new(0.0, -0.05, 0.01), Vector3::new(0.2, 0.0, 0.0)),
                    PoseSE3::new(Vector3::new(0.02, 0.06, 0.0), Vector3::new(-0.2, 0.05, 0.05)),
                ],
            },
            min_coverage: 0.5,
        },
    };
    let scene = generate_scene(&spec).unwrap();
    let cfg = FeatureConfig::default();
    let mut pyrs = Vec::new();
    let mut depths = Vec::new();
    for cam in &scene.cameras {
        let (img, depth) = render_ground_truth(&scene, cam);
        pyrs.push(extract_features(&img, &cfg).unwrap());
        depths.push(depth);
    }
    (scene.cameras, pyrs, depths)
}
