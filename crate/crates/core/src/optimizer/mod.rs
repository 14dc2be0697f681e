//! Recurrent moment-state updates for poses, depth and distortion.
//!
//! Each parameter group keeps a running first moment `h`, second moment `v`
//! and step counter. A step is the bias-corrected adaptive-moment direction
//! scaled by a gate `max(g_min, σ(⟨c, w⟩))` computed from a context vector
//! `c`, then clipped block-wise to a trust radius.

mod refine;
mod regularizer;

pub use refine::{
    refine_fisheye, refine_pinhole, History, IterationRecord, NeighborStrategy, RefineResult,
    RefineSettings, Snapshot,
};
pub use regularizer::{smoothness_regularizer, RegularizerValue};

use serde::{Deserialize, Serialize};

use crate::costmap::{DepthHypotheses, DepthSourceKind};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr_pose: f64,
    /// Step size on log-depth.
    pub lr_depth: f64,
    pub lr_distortion: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Trust radius per pose (6 values), per pixel and for the distortion triple.
    pub trust_radius: f64,
    pub gate_min: f64,
    /// Gate weights over the context vector; empty means all zero.
    pub gate_weights: Vec<f64>,
    /// Snapshots kept for the pose-smoothness term.
    pub window: usize,
    /// Weight of the pose-smoothness term.
    pub lambda: f64,
    /// Consecutive cost increases tolerated before giving up.
    pub patience: usize,
    /// Iterations per pyramid level, coarsest first; the last entry runs on level 0.
    pub iterations: Vec<usize>,
    /// Learning rates decay exponentially within each level down to this fraction.
    pub lr_floor: f64,
    pub stride: usize,
    pub margin: f64,
    pub neighbors: usize,
    pub neighbor_strategy: NeighborStrategy,
    /// Depth substeps per pose step (pinhole).
    pub depth_steps: usize,
    /// Weight of the edge-aware depth smoothness added to the pinhole depth objective.
    pub depth_smoothness: f64,
    pub optimize_poses: bool,
    pub optimize_depth: bool,
    pub optimize_distortion: bool,
    pub fix_first_pose: bool,
    pub depth_source: DepthSourceKind,
    pub hypotheses: DepthHypotheses,
    /// Iterations between fisheye depth re-estimates.
    pub depth_refresh: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr_pose: 1e-2,
            lr_depth: 1e-3,
            lr_distortion: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            trust_radius: 0.05,
            gate_min: 0.1,
            gate_weights: Vec::new(),
            window: 8,
            lambda: crate::losses::FBA_LAMBDA,
            patience: 20,
            iterations: vec![30, 30, 40],
            lr_floor: 1.0,
            stride: 2,
            margin: 2.0,
            neighbors: 2,
            neighbor_strategy: NeighborStrategy::Descriptor,
            depth_steps: 1,
            depth_smoothness: 1.0,
            optimize_poses: true,
            optimize_depth: true,
            optimize_distortion: false,
            fix_first_pose: false,
            depth_source: DepthSourceKind::Hypotheses,
            hypotheses: DepthHypotheses::default(),
            depth_refresh: 10,
        }
    }
}

/// Hyperparameters of one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct StepConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub trust_radius: f64,
    pub gate_min: f64,
    pub gate_weights: Vec<f64>,
    /// Parameters per trust-region block.
    pub block: usize,
}

impl StepConfig {
    pub fn from_config(cfg: &OptimizerConfig, lr: f64, block: usize) -> Self {
        Self {
            lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            trust_radius: cfg.trust_radius,
            gate_min: cfg.gate_min,
            gate_weights: cfg.gate_weights.clone(),
            block,
        }
    }
}

/// Quantities the gate and the caller carry between iterations.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Wrapped {
    pub params: Vec<f64>,
    pub cost: f64,
    pub context_summary: Vec<f64>,
    pub context: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub h: Vec<f64>,
    pub v: Vec<f64>,
    pub m: Wrapped,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(dim: usize) -> Self {
        Self {
            h: vec![0.0; dim],
            v: vec![0.0; dim],
            m: Wrapped::default(),
            step: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.h.len()
    }

    pub fn reset(&mut self) {
        self.h.iter_mut().for_each(|x| *x = 0.0);
        self.v.iter_mut().for_each(|x| *x = 0.0);
        self.step = 0;
    }
}

/// Context vector `[1, last cost, pooled contextual statistics…]`.
pub fn context_vector(cost: f64, summary: &[f64]) -> Vec<f64> {
    let mut c = Vec::with_capacity(2 + summary.len());
    c.push(1.0);
    c.push(cost);
    c.extend_from_slice(summary);
    c
}

pub fn gate(context: &[f64], cfg: &StepConfig) -> f64 {
    let z: f64 = context
        .iter()
        .zip(&cfg.gate_weights)
        .map(|(a, b)| a * b)
        .sum();
    (1.0 / (1.0 + (-z).exp())).max(cfg.gate_min)
}

/// One gated adaptive-moment step. Updates the moments in place and returns
/// the parameter increment.
pub fn arg_step(
    state: &mut OptimizerState,
    grad: &[f64],
    context: &[f64],
    cfg: &StepConfig,
) -> Result<Vec<f64>> {
    if grad.len() != state.dim() {
        return Err(Error::DimensionMismatch(format!(
            "gradient has {} entries, state has {}",
            grad.len(),
            state.dim()
        )));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient);
    }
    state.step += 1;
    let t = state.step as i32;
    let (c1, c2) = (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t));
    let g_c = gate(context, cfg);
    let mut delta = vec![0.0; grad.len()];
    for (i, g) in grad.iter().enumerate() {
        state.h[i] = cfg.beta1 * state.h[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        delta[i] = -cfg.lr * g_c * (state.h[i] / c1) / ((state.v[i] / c2).sqrt() + cfg.eps);
    }
    for block in delta.chunks_mut(cfg.block.max(1)) {
        let norm = block.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > cfg.trust_radius {
            let s = cfg.trust_radius / norm;
            block.iter_mut().for_each(|x| *x *= s);
        }
    }
    state.m.context = context.to_vec();
    Ok(delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn cfg(lr: f64, rho: f64) -> StepConfig {
        StepConfig::from_config(
            &OptimizerConfig {
                trust_radius: rho,
                ..Default::default()
            },
            lr,
            1,
        )
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut s = OptimizerState::new(4);
        let d = arg_step(&mut s, &[0.0; 4], &[1.0], &cfg(0.01, 0.05)).unwrap();
        assert_eq!(d, vec![0.0; 4]);
        assert_eq!(
            (s.h.clone(), s.v.clone(), s.step),
            (vec![0.0; 4], vec![0.0; 4], 1)
        );
    }

    #[test]
    fn constant_gradient_reaches_gated_rate() {
        let c = cfg(0.01, 1.0);
        let g_c = gate(&[1.0], &c);
        assert_eq!(g_c, 0.5);
        let mut s = OptimizerState::new(2);
        let mut d = vec![];
        for _ in 0..2000 {
            d = arg_step(&mut s, &[3.0, -0.2], &[1.0], &c).unwrap();
        }
        assert_relative_eq!(d[0], -0.01 * g_c, epsilon = 1e-9);
        assert_relative_eq!(d[1], 0.01 * g_c, epsilon = 1e-8);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let target = [0.7, -0.4, 0.25];
        let c = StepConfig {
            lr: 0.05,
            ..cfg(0.05, 1.0)
        };
        let mut s = OptimizerState::new(3);
        let mut x = [0.0; 3];
        let mut reached = None;
        for it in 1..=500 {
            let g: Vec<f64> = x.iter().zip(&target).map(|(a, b)| 2.0 * (a - b)).collect();
            let d = arg_step(&mut s, &g, &[1.0], &c).unwrap();
            x.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
            let err = x
                .iter()
                .zip(&target)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if err < 1e-6 && reached.is_none() {
                reached = Some(it);
            }
        }
        assert!(reached.is_some(), "final {x:?}");
        let err = x
            .iter()
            .zip(&target)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-6);
    }

    #[test]
    fn gate_weights_scale_the_step() {
        let mut c = cfg(0.01, 1.0);
        c.gate_weights = vec![-100.0];
        let mut s = OptimizerState::new(1);
        let d = arg_step(&mut s, &[1.0], &[1.0], &c).unwrap();
        assert_relative_eq!(d[0], -0.01 * c.gate_min, epsilon = 1e-9);
    }

    #[test]
    fn rejects_bad_gradients() {
        let mut s = OptimizerState::new(2);
        assert!(matches!(
            arg_step(&mut s, &[f64::NAN, 0.0], &[], &cfg(0.01, 1.0)),
            Err(Error::NonFiniteGradient)
        ));
        assert!(matches!(
            arg_step(&mut s, &[0.0], &[], &cfg(0.01, 1.0)),
            Err(Error::DimensionMismatch(_))
        ));
        s.h[0] = 1.0;
        s.reset();
        assert_eq!((s.h[0], s.step), (0.0, 0));
    }

    proptest! {
        #[test]
        fn step_respects_trust_radius_and_moments(
            grads in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 12), 1..20),
            rho in 1e-4f64..0.1,
            lr in 1e-4f64..1.0,
        ) {
            let c = StepConfig { block: 6, ..cfg(lr, rho) };
            let mut s = OptimizerState::new(12);
            let mut s2 = OptimizerState::new(12);
            for g in &grads {
                let d = arg_step(&mut s, g, &[1.0, 0.5], &c).unwrap();
                let d2 = arg_step(&mut s2, g, &[1.0, 0.5], &c).unwrap();
                prop_assert_eq!(&d, &d2);
                for b in d.chunks(6) {
                    prop_assert!(b.iter().map(|x| x * x).sum::<f64>().sqrt() <= rho * (1.0 + 1e-12));
                }
                prop_assert!(s.v.iter().all(|v| *v >= 0.0));
            }
        }
    }
}
