use nalgebra::Vector6;

use crate::error::{Error, Result};
use crate::geometry::PoseSE3;

#[derive(Clone, Debug, PartialEq)]
pub struct RegularizerValue {
    pub value: f64,
    /// `[snapshot][camera]` gradient in `(Φ, t)` coordinates.
    pub gradients: Vec<Vec<Vector6<f64>>>,
}

/// Pose-smoothness over a window of snapshots:
/// `(1/N) Σ_i Σ_j ‖Φ_i^{j+1} − Φ_i^j‖² + ‖t_i^{j+1} − t_i^j‖²`.
pub fn smoothness_regularizer(window: &[Vec<PoseSE3>]) -> Result<RegularizerValue> {
    if window.len() < 2 {
        return Err(Error::WindowTooShort(window.len()));
    }
    let n = window[0].len();
    if n == 0 || window.iter().any(|s| s.len() != n) {
        return Err(Error::DimensionMismatch(
            "snapshots differ in camera count".into(),
        ));
    }
    let inv_n = 1.0 / n as f64;
    let mut value = 0.0;
    let mut gradients = vec![vec![Vector6::zeros(); n]; window.len()];
    for j in 0..window.len() - 1 {
        for i in 0..n {
            let (a, b) = (&window[j][i], &window[j + 1][i]);
            let dphi = b.phi - a.phi;
            let dt = b.t - a.t;
            value += (dphi.norm_squared() + dt.norm_squared()) * inv_n;
            let g = Vector6::new(dphi.x, dphi.y, dphi.z, dt.x, dt.y, dt.z) * (2.0 * inv_n);
            gradients[j + 1][i] += g;
            gradients[j][i] -= g;
        }
    }
    Ok(RegularizerValue { value, gradients })
}
