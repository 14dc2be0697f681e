//! Coarse-to-fine refinement loops.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector6;
use serde::{Deserialize, Serialize};

use super::{
    arg_step, context_vector, smoothness_regularizer, OptimizerConfig, OptimizerState, StepConfig,
};
use crate::camera::{Camera, CameraModel, FisheyeCamera, PinholeCamera};
use crate::costmap::{
    adjoint, fisheye_cost, fisheye_sweep_depth, pinhole_cost, warp_image, CostOptions,
    DepthSourceKind,
};
use crate::error::{Error, Result};
use crate::features::{extract_all, neighbor_select, FeatureConfig, FeaturePyramid};
use crate::geometry::PoseSE3;
use crate::image::{DepthMap, Image};
use crate::losses::{
    depth_smoothness, depth_smoothness_grad, photometric_loss, scheduled_loss, LossBreakdown,
    LossComponents, LossConfig,
};

/// How each view picks the views it is compared against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborStrategy {
    /// Closest global descriptors.
    Descriptor,
    /// Closest initial camera centers.
    Nearest,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RefineSettings {
    pub optimizer: OptimizerConfig,
    pub loss: LossConfig,
    pub features: FeatureConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub level: usize,
    pub cost: f64,
    pub r_s: f64,
    pub grad_norm: f64,
    pub step_norm: f64,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub records: Vec<IterationRecord>,
}

impl History {
    pub const HEADER: &'static str =
        "iteration,level,cost,r_s,grad_norm,step_norm,depth,photo,rgb,fba,total,blend_weight";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for r in &self.records {
            let l = &r.loss;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.iteration,
                r.level,
                r.cost,
                r.r_s,
                r.grad_norm,
                r.step_norm,
                l.depth,
                l.photo,
                l.rgb,
                l.fba,
                l.total,
                l.blend_weight
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Pose step norms, one per iteration.
    pub fn step_norms(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.step_norm).collect()
    }
}

/// State handed to an observer after every iteration.
pub struct Snapshot<'a> {
    pub iteration: usize,
    pub level: usize,
    pub cost: f64,
    pub poses: &'a [PoseSE3],
    pub depth: &'a [DepthMap],
    pub distortion: [f64; 3],
}

pub type Observer<'a> = Option<&'a mut dyn FnMut(&Snapshot)>;

#[derive(Clone, Debug, PartialEq)]
pub struct RefineResult {
    pub poses: Vec<PoseSE3>,
    pub distortion: [f64; 3],
    pub depth: Vec<DepthMap>,
    pub history: History,
    /// Iteration whose parameters were returned; 0 is the initial state.
    pub best_iteration: usize,
    pub initial_objective: f64,
    pub final_objective: f64,
}

fn schedule(cfg: &OptimizerConfig, levels: usize) -> Result<Vec<(usize, usize)>> {
    let n = cfg.iterations.len();
    if n == 0 || n > levels {
        return Err(Error::Config(format!(
            "optimizer.iterations needs between 1 and {levels} entries, got {n}"
        )));
    }
    Ok(cfg
        .iterations
        .iter()
        .enumerate()
        .map(|(i, &it)| (n - 1 - i, it))
        .collect())
}

fn select_neighbors(
    pyrs: &[FeaturePyramid],
    poses: &[PoseSE3],
    cfg: &OptimizerConfig,
) -> Result<Vec<Vec<usize>>> {
    let n = pyrs.len();
    if cfg.neighbors == 0 || cfg.neighbors >= n {
        return Err(Error::NotEnoughViews {
            requested: cfg.neighbors,
            available: n - 1,
        });
    }
    match cfg.neighbor_strategy {
        NeighborStrategy::Descriptor => {
            let desc: Vec<Vec<f64>> = pyrs.iter().map(|p| p.global_descriptor()).collect();
            (0..n)
                .map(|o| neighbor_select(&desc, o, cfg.neighbors))
                .collect()
        }
        NeighborStrategy::Nearest => Ok((0..n)
            .map(|o| {
                let mut r: Vec<(f64, usize)> = (0..n)
                    .filter(|&i| i != o)
                    .map(|i| ((poses[i].t - poses[o].t).norm(), i))
                    .collect();
                r.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                r.into_iter().take(cfg.neighbors).map(|(_, i)| i).collect()
            })
            .collect()),
    }
}

fn mean_summary(pyrs: &[FeaturePyramid]) -> Vec<f64> {
    let mut acc = vec![0.0; 0];
    for p in pyrs {
        let s = p.context_summary();
        if acc.is_empty() {
            acc = vec![0.0; s.len()];
        }
        acc.iter_mut()
            .zip(s)
            .for_each(|(a, b)| *a += b / pyrs.len() as f64);
    }
    acc
}

fn flat(g: &[Vector6<f64>]) -> Vec<f64> {
    g.iter()
        .flat_map(|v| v.iter().copied().collect::<Vec<_>>())
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Tracks the lowest objective seen on the finest level and the run of
/// consecutive increases.
struct Progress<P> {
    best: (f64, usize, P),
    last: Option<(usize, f64)>,
    rising: usize,
    patience: usize,
}

impl<P: Clone> Progress<P> {
    fn new(initial: f64, params: P, patience: usize) -> Self {
        Self {
            best: (initial, 0, params),
            last: None,
            rising: 0,
            patience,
        }
    }

    fn observe(
        &mut self,
        iteration: usize,
        level: usize,
        objective: f64,
        params: &P,
    ) -> Result<()> {
        if !objective.is_finite() {
            return Err(Error::Diverged(format!(
                "objective became {objective} at iteration {iteration}"
            )));
        }
        match self.last {
            Some((l, prev)) if l == level && objective > prev => self.rising += 1,
            _ => self.rising = 0,
        }
        self.last = Some((level, objective));
        if self.rising >= self.patience {
            return Err(Error::Diverged(format!(
                "objective rose for {} consecutive iterations (now {objective})",
                self.rising
            )));
        }
        if level == 0 && objective < self.best.0 {
            self.best = (objective, iteration, params.clone());
        }
        Ok(())
    }
}

/// Learning-rate multiplier for iteration `it` of a level with `iters` iterations.
fn decay(cfg: &OptimizerConfig, it: usize, iters: usize) -> f64 {
    if iters <= 1 {
        return 1.0;
    }
    cfg.lr_floor
        .clamp(1e-6, 1.0)
        .powf(it as f64 / (iters - 1) as f64)
}

fn cost_options(cfg: &OptimizerConfig, level: usize, gradients: bool) -> CostOptions {
    CostOptions {
        level,
        stride: cfg.stride,
        margin: cfg.margin,
        gradients,
    }
}

/// Finest-level evaluation used for the initial, best and final objectives.
fn report_options(cfg: &OptimizerConfig) -> CostOptions {
    cost_options(cfg, 0, false)
}

fn photo_term(
    images: &[Image],
    cams: &[Camera],
    depth: &[DepthMap],
    nbrs: &[Vec<usize>],
    alpha: f64,
) -> f64 {
    let n = images.len() as f64;
    (0..images.len())
        .map(|o| {
            let warped: Vec<Image> = nbrs[o]
                .iter()
                .map(|&i| warp_image(&cams[o], &images[o], &cams[i], &images[i], &depth[o]))
                .collect();
            photometric_loss(&warped, &images[o], alpha) / n
        })
        .sum()
}

fn pinhole_intrinsics(cams: &[Camera]) -> Result<Vec<PinholeCamera>> {
    cams.iter()
        .map(|c| match c {
            Camera::Pinhole { intrinsics, .. } => Ok(*intrinsics),
            Camera::Fisheye(_) => Err(Error::InvalidCamera(
                "pinhole refinement got a fisheye camera".into(),
            )),
        })
        .collect()
}

struct PinholeEval {
    cost: f64,
    grad_pose: Vec<Vector6<f64>>,
    grad_depth: Vec<Vec<f64>>,
}

fn eval_pinhole(
    pyrs: &[FeaturePyramid],
    intr: &[PinholeCamera],
    poses: &[PoseSE3],
    depth: &[DepthMap],
    nbrs: &[Vec<usize>],
    opts: &CostOptions,
) -> Result<PinholeEval> {
    let n = pyrs.len();
    let inv_n = 1.0 / n as f64;
    let mut out = PinholeEval {
        cost: 0.0,
        grad_pose: vec![Vector6::zeros(); n],
        grad_depth: Vec::with_capacity(n),
    };
    for o in 0..n {
        let neigh: Vec<(&FeaturePyramid, PinholeCamera)> =
            nbrs[o].iter().map(|&i| (&pyrs[i], intr[i])).collect();
        let rel: Vec<PoseSE3> = nbrs[o]
            .iter()
            .map(|&i| poses[i].inverse().compose(&poses[o]))
            .collect();
        let ev = pinhole_cost(&pyrs[o], &intr[o], &neigh, &rel, &depth[o], opts, None)?;
        out.cost += ev.value * inv_n;
        if opts.gradients {
            for (&i, g) in nbrs[o].iter().zip(&ev.grad_pose) {
                let m = adjoint(&poses[i].inverse()).transpose() * g * inv_n;
                out.grad_pose[o] += m;
                out.grad_pose[i] -= m;
            }
            out.grad_depth
                .push(ev.grad_depth.iter().map(|g| g * inv_n).collect());
        }
    }
    Ok(out)
}

/// Weighted depth smoothness averaged over views, as added to the pinhole objective.
fn smoothness_term(depth: &[DepthMap], images: &[Image], cfg: &OptimizerConfig) -> f64 {
    if cfg.depth_smoothness == 0.0 {
        return 0.0;
    }
    let sum: f64 = depth
        .iter()
        .zip(images)
        .map(|(d, im)| depth_smoothness_grad(d, im, cfg.stride).0)
        .sum();
    cfg.depth_smoothness * sum / depth.len() as f64
}

/// Spreads per-grid-pixel increments to the pixels each grid sample stands for.
fn spread(delta: &mut [f64], width: usize, height: usize, stride: usize) {
    if stride <= 1 {
        return;
    }
    for y in 0..height {
        for x in 0..width {
            let src = (y - y % stride) * width + (x - x % stride);
            delta[y * width + x] = delta[src];
        }
    }
}

fn apply_poses(poses: &mut [PoseSE3], delta: &[f64], fix_first: bool) {
    for (i, (p, d)) in poses.iter_mut().zip(delta.chunks(6)).enumerate() {
        if fix_first && i == 0 {
            continue;
        }
        *p = p.retract(&Vector6::from_column_slice(d));
    }
}

/// Alternating depth and pose refinement on pinhole views. Every view is a
/// target with its own log-depth map and compares against its selected
/// neighbors.
pub fn refine_pinhole(
    images: &[Image],
    cameras: &[Camera],
    init_depth: &[DepthMap],
    settings: &RefineSettings,
    mut observer: Observer,
) -> Result<RefineResult> {
    let cfg = &settings.optimizer;
    let n = images.len();
    if n < 2 || cameras.len() != n || init_depth.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "need ≥ 2 views with one camera and depth each, got {n} images, {} cameras, {} depth maps",
            cameras.len(),
            init_depth.len()
        )));
    }
    for d in init_depth {
        if let Some(bad) = d.values.iter().find(|v| !(**v > 0.0)) {
            return Err(Error::NonPositiveDepth(*bad));
        }
    }
    let intr = pinhole_intrinsics(cameras)?;
    let pyrs = extract_all(images, &settings.features)?;
    let sched = schedule(cfg, settings.features.levels)?;
    let mut poses: Vec<PoseSE3> = cameras.iter().map(|c| c.pose()).collect();
    let nbrs = select_neighbors(&pyrs, &poses, cfg)?;
    let summary = mean_summary(&pyrs);
    let mut depth: Vec<DepthMap> = init_depth.to_vec();
    let beta = settings.loss.beta_for(CameraModel::Pinhole);

    let initial = eval_pinhole(&pyrs, &intr, &poses, &depth, &nbrs, &report_options(cfg))?.cost
        + smoothness_term(&depth, images, cfg);
    let mut progress = Progress::new(initial, (poses.clone(), depth.clone()), cfg.patience);
    let pose_cfg = StepConfig::from_config(cfg, cfg.lr_pose, 6);
    let depth_cfg = StepConfig::from_config(cfg, cfg.lr_depth, 1);
    let mut pose_state = OptimizerState::new(6 * n);
    let mut depth_states: Vec<OptimizerState> = depth
        .iter()
        .map(|d| OptimizerState::new(d.values.len()))
        .collect();
    let mut history = History::default();
    let mut iteration = 0;
    let mut last_cost = initial;

    for &(level, iters) in &sched {
        pose_state.reset();
        depth_states.iter_mut().for_each(OptimizerState::reset);
        let opts = cost_options(cfg, level, true);
        for it in 0..iters {
            iteration += 1;
            let scale = decay(cfg, it, iters);
            let pose_cfg = StepConfig {
                lr: pose_cfg.lr * scale,
                ..pose_cfg.clone()
            };
            let depth_cfg = StepConfig {
                lr: depth_cfg.lr * scale,
                ..depth_cfg.clone()
            };
            let mut ev = eval_pinhole(&pyrs, &intr, &poses, &depth, &nbrs, &opts)?;
            let cost = ev.cost;
            let objective = cost + smoothness_term(&depth, images, cfg);
            progress.observe(iteration, level, objective, &(poses.clone(), depth.clone()))?;
            let ctx = context_vector(last_cost, &summary);
            if cfg.optimize_depth {
                for sub in 0..cfg.depth_steps.max(1) {
                    if sub > 0 {
                        ev = eval_pinhole(&pyrs, &intr, &poses, &depth, &nbrs, &opts)?;
                    }
                    for (o, d) in depth.iter_mut().enumerate() {
                        let mut g = ev.grad_depth[o].clone();
                        if cfg.depth_smoothness != 0.0 {
                            let (_, gs) = depth_smoothness_grad(d, &images[o], cfg.stride);
                            g.iter_mut()
                                .zip(&gs)
                                .for_each(|(a, b)| *a += cfg.depth_smoothness * b / n as f64);
                        }
                        g.iter_mut().zip(&d.values).for_each(|(g, d)| *g *= d);
                        let mut delta = arg_step(&mut depth_states[o], &g, &ctx, &depth_cfg)?;
                        spread(&mut delta, d.width, d.height, cfg.stride);
                        for (v, dl) in d.values.iter_mut().zip(&delta) {
                            if v.is_finite() {
                                *v *= dl.exp();
                            }
                        }
                    }
                }
                if cfg.optimize_poses {
                    ev = eval_pinhole(&pyrs, &intr, &poses, &depth, &nbrs, &opts)?;
                }
            }
            let mut step_norm = 0.0;
            let mut grad = flat(&ev.grad_pose);
            if cfg.fix_first_pose {
                grad[..6].iter_mut().for_each(|g| *g = 0.0);
            }
            if cfg.optimize_poses {
                let delta = arg_step(&mut pose_state, &grad, &ctx, &pose_cfg)?;
                step_norm = norm(&delta);
                apply_poses(&mut poses, &delta, cfg.fix_first_pose);
            }
            pose_state.m = super::Wrapped {
                params: poses.iter().flat_map(|p| p.to_array()).collect(),
                cost,
                context_summary: summary.clone(),
                context: ctx,
            };
            last_cost = cost;
            let cams: Vec<Camera> = cameras
                .iter()
                .zip(&poses)
                .map(|(c, p)| c.with_pose(*p))
                .collect();
            let comps = LossComponents {
                depth: depth
                    .iter()
                    .zip(images)
                    .map(|(d, im)| depth_smoothness(d, im))
                    .sum::<f64>()
                    / n as f64,
                photo: photo_term(images, &cams, &depth, &nbrs, settings.loss.alpha),
                rgb: 0.0,
                fba: 0.0,
            };
            history.records.push(IterationRecord {
                iteration,
                level,
                cost,
                r_s: 0.0,
                grad_norm: norm(&grad),
                step_norm,
                loss: scheduled_loss(&comps, iteration as f64, beta, CameraModel::Pinhole),
            });
            if let Some(obs) = observer.as_mut() {
                obs(&Snapshot {
                    iteration,
                    level,
                    cost,
                    poses: &poses,
                    depth: &depth,
                    distortion: [0.0; 3],
                });
            }
        }
    }
    let final_cost = eval_pinhole(&pyrs, &intr, &poses, &depth, &nbrs, &report_options(cfg))?.cost
        + smoothness_term(&depth, images, cfg);
    progress
        .observe(
            iteration + 1,
            0,
            final_cost,
            &(poses.clone(), depth.clone()),
        )
        .ok();
    let (objective, best_iteration, (poses, depth)) = progress.best;
    Ok(RefineResult {
        poses,
        distortion: [0.0; 3],
        depth,
        history,
        best_iteration,
        initial_objective: initial,
        final_objective: objective,
    })
}

fn fisheye_cameras(cameras: &[Camera]) -> Result<Vec<FisheyeCamera>> {
    cameras
        .iter()
        .map(|c| match c {
            Camera::Fisheye(f) => Ok(*f),
            Camera::Pinhole { .. } => Err(Error::InvalidCamera(
                "fisheye refinement got a pinhole camera".into(),
            )),
        })
        .collect()
}

struct FisheyeEval {
    cost: f64,
    grad_pose: Vec<Vector6<f64>>,
    grad_k: nalgebra::Vector3<f64>,
}

fn eval_fisheye(
    pyrs: &[FeaturePyramid],
    cams: &[FisheyeCamera],
    depth: &[DepthMap],
    nbrs: &[Vec<usize>],
    opts: &CostOptions,
) -> Result<FisheyeEval> {
    let n = pyrs.len();
    let inv_n = 1.0 / n as f64;
    let mut out = FisheyeEval {
        cost: 0.0,
        grad_pose: vec![Vector6::zeros(); n],
        grad_k: Default::default(),
    };
    for o in 0..n {
        let neigh: Vec<(&FeaturePyramid, FisheyeCamera)> =
            nbrs[o].iter().map(|&i| (&pyrs[i], cams[i])).collect();
        let ev = fisheye_cost(&pyrs[o], &cams[o], &neigh, &depth[o], opts, None)?;
        out.cost += ev.value * inv_n;
        if opts.gradients {
            for (&i, g) in nbrs[o].iter().zip(&ev.grad_pose) {
                out.grad_pose[i] += g * inv_n;
            }
            out.grad_pose[o] += ev.grad_target_pose.unwrap_or_default() * inv_n;
            out.grad_k += ev.grad_distortion.unwrap_or_default() * inv_n;
        }
    }
    Ok(out)
}

fn sweep_all(
    pyrs: &[FeaturePyramid],
    cams: &[FisheyeCamera],
    nbrs: &[Vec<usize>],
    cfg: &OptimizerConfig,
    opts: &CostOptions,
) -> Vec<DepthMap> {
    (0..pyrs.len())
        .map(|o| {
            let neigh: Vec<(&FeaturePyramid, FisheyeCamera)> =
                nbrs[o].iter().map(|&i| (&pyrs[i], cams[i])).collect();
            fisheye_sweep_depth(&pyrs[o], &cams[o], &neigh, &cfg.hypotheses, opts)
        })
        .collect()
}

fn rebuild(base: &[FisheyeCamera], poses: &[PoseSE3], k: [f64; 3]) -> Result<Vec<FisheyeCamera>> {
    base.iter()
        .zip(poses)
        .map(|(c, p)| c.with_pose(*p).with_distortion(k))
        .collect()
}

/// Flexible bundle adjustment over fisheye poses and, optionally, the shared
/// distortion coefficients: minimizes `C + λ·R_S` where `R_S` runs over the
/// last `window` pose snapshots.
///
/// `depth` is required for the `ground_truth` and `estimate` depth sources
/// (range along each pixel ray); the `hypotheses` source re-sweeps depth from
/// the current parameters at every level and every `depth_refresh`
/// iterations.
pub fn refine_fisheye(
    images: &[Image],
    cameras: &[Camera],
    depth: Option<&[DepthMap]>,
    settings: &RefineSettings,
    mut observer: Observer,
) -> Result<RefineResult> {
    let cfg = &settings.optimizer;
    let n = images.len();
    if n < 2 || cameras.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "need ≥ 2 views with one camera each, got {n} images, {} cameras",
            cameras.len()
        )));
    }
    let base = fisheye_cameras(cameras)?;
    let given: Option<Vec<DepthMap>> = match (cfg.depth_source, depth) {
        (DepthSourceKind::Hypotheses, _) => None,
        (_, Some(d)) if d.len() == n => Some(d.to_vec()),
        (kind, _) => {
            return Err(Error::Config(format!(
                "depth source {kind:?} needs one depth map per view"
            )));
        }
    };
    let pyrs = extract_all(images, &settings.features)?;
    let sched = schedule(cfg, settings.features.levels)?;
    let mut poses: Vec<PoseSE3> = base.iter().map(|c| c.pose).collect();
    let mut k = base[0].k;
    let nbrs = select_neighbors(&pyrs, &poses, cfg)?;
    let summary = mean_summary(&pyrs);
    let beta = settings.loss.beta_for(CameraModel::Fisheye);
    let lambda = cfg.lambda;

    let mut cams = rebuild(&base, &poses, k)?;
    let report = report_options(cfg);
    let mut depth_maps = match &given {
        Some(d) => d.clone(),
        None => sweep_all(&pyrs, &cams, &nbrs, cfg, &report),
    };
    let initial = eval_fisheye(&pyrs, &cams, &depth_maps, &nbrs, &report)?.cost;
    let mut progress = Progress::new(
        initial,
        (poses.clone(), k, depth_maps.clone()),
        cfg.patience,
    );
    let pose_cfg = StepConfig::from_config(cfg, cfg.lr_pose, 6);
    let k_cfg = StepConfig::from_config(cfg, cfg.lr_distortion, 3);
    let mut pose_state = OptimizerState::new(6 * n);
    let mut k_state = OptimizerState::new(3);
    let mut window: VecDeque<Vec<PoseSE3>> = VecDeque::new();
    let mut history = History::default();
    let mut iteration = 0;
    let mut last_cost = initial;

    for &(level, iters) in &sched {
        pose_state.reset();
        k_state.reset();
        let opts = cost_options(cfg, level, true);
        for it in 0..iters {
            iteration += 1;
            let scale = decay(cfg, it, iters);
            let pose_cfg = StepConfig {
                lr: pose_cfg.lr * scale,
                ..pose_cfg.clone()
            };
            let k_cfg = StepConfig {
                lr: k_cfg.lr * scale,
                ..k_cfg.clone()
            };
            if given.is_none() && it % cfg.depth_refresh.max(1) == 0 {
                depth_maps = sweep_all(
                    &pyrs,
                    &cams,
                    &nbrs,
                    cfg,
                    &CostOptions {
                        gradients: false,
                        ..opts.clone()
                    },
                );
            }
            window.push_back(poses.clone());
            while window.len() > cfg.window.max(2) {
                window.pop_front();
            }
            let ev = eval_fisheye(&pyrs, &cams, &depth_maps, &nbrs, &opts)?;
            let mut grad_pose = ev.grad_pose.clone();
            let mut r_s = 0.0;
            if window.len() >= 2 && lambda != 0.0 {
                let w: Vec<Vec<PoseSE3>> = window.iter().cloned().collect();
                let reg = smoothness_regularizer(&w)?;
                r_s = reg.value;
                for ((g, rg), p) in grad_pose
                    .iter_mut()
                    .zip(reg.gradients.last().unwrap())
                    .zip(&poses)
                {
                    *g += p.coordinate_jacobian().transpose() * rg * lambda;
                }
            }
            let objective = ev.cost + lambda * r_s;
            progress.observe(
                iteration,
                level,
                objective,
                &(poses.clone(), k, depth_maps.clone()),
            )?;
            let ctx = context_vector(last_cost, &summary);
            let mut grad = flat(&grad_pose);
            if cfg.fix_first_pose {
                grad[..6].iter_mut().for_each(|g| *g = 0.0);
            }
            let mut step_norm = 0.0;
            if cfg.optimize_poses {
                let delta = arg_step(&mut pose_state, &grad, &ctx, &pose_cfg)?;
                step_norm = norm(&delta);
                apply_poses(&mut poses, &delta, cfg.fix_first_pose);
            }
            if cfg.optimize_distortion {
                let gk = [ev.grad_k.x, ev.grad_k.y, ev.grad_k.z];
                let delta = arg_step(&mut k_state, &gk, &ctx, &k_cfg)?;
                // Halve the increment until the angle polynomial stays monotone.
                let mut s = 1.0;
                for _ in 0..20 {
                    let trial = [
                        k[0] + s * delta[0],
                        k[1] + s * delta[1],
                        k[2] + s * delta[2],
                    ];
                    if base[0].with_distortion(trial).is_ok() {
                        k = trial;
                        break;
                    }
                    s *= 0.5;
                }
            }
            cams = rebuild(&base, &poses, k)?;
            pose_state.m = super::Wrapped {
                params: poses.iter().flat_map(|p| p.to_array()).chain(k).collect(),
                cost: ev.cost,
                context_summary: summary.clone(),
                context: ctx,
            };
            last_cost = ev.cost;
            let gen: Vec<Camera> = cams.iter().map(|c| Camera::Fisheye(*c)).collect();
            let comps = LossComponents {
                depth: 0.0,
                photo: photo_term(images, &gen, &depth_maps, &nbrs, settings.loss.alpha),
                rgb: 0.0,
                fba: objective,
            };
            history.records.push(IterationRecord {
                iteration,
                level,
                cost: ev.cost,
                r_s,
                grad_norm: norm(&grad),
                step_norm,
                loss: scheduled_loss(&comps, iteration as f64, beta, CameraModel::Fisheye),
            });
            if let Some(obs) = observer.as_mut() {
                obs(&Snapshot {
                    iteration,
                    level,
                    cost: ev.cost,
                    poses: &poses,
                    depth: &depth_maps,
                    distortion: k,
                });
            }
        }
    }
    let final_depth = match &given {
        Some(d) => d.clone(),
        None => sweep_all(&pyrs, &cams, &nbrs, cfg, &report),
    };
    let final_cost = eval_fisheye(&pyrs, &cams, &final_depth, &nbrs, &report)?.cost;
    progress
        .observe(
            iteration + 1,
            0,
            final_cost,
            &(poses.clone(), k, final_depth),
        )
        .ok();
    let (objective, best_iteration, (poses, distortion, depth)) = progress.best;
    Ok(RefineResult {
        poses,
        distortion,
        depth,
        history,
        best_iteration,
        initial_objective: initial,
        final_objective: objective,
    })
}
