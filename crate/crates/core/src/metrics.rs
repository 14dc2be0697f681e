//! Image-quality and pose-error metrics.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::geometry::{rotation_distance_deg, PoseSE3};
use crate::image::Image;
use crate::losses::mse;
use crate::synth::scene_diameter;

/// `10·log10(peak²/MSE)`; `+∞` for identical images.
pub fn psnr(a: &Image, b: &Image, peak: f64) -> f64 {
    let m = mse(a, b);
    if m == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / m).log10()
    }
}

fn finite_or_inf<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(x) if x.is_infinite() => s.serialize_str(if *x > 0.0 { "inf" } else { "-inf" }),
        Some(x) => s.serialize_f64(*x),
        None => s.serialize_none(),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Written as the string `"inf"` for identical images.
    #[serde(serialize_with = "finite_or_inf", deserialize_with = "de_inf", default)]
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub rot_err_deg: Vec<f64>,
    /// Fraction of the true scene diameter.
    pub trans_err: Vec<f64>,
    pub mean_rot_err_deg: Option<f64>,
    pub mean_trans_err: Option<f64>,
    pub depth_abs_rel: Option<f64>,
    /// Reserved for additional metrics.
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

fn de_inf<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Option<f64>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Num {
        F(f64),
        S(String),
    }
    Ok(match Option::<Num>::deserialize(d)? {
        None => None,
        Some(Num::F(x)) => Some(x),
        Some(Num::S(s)) => match s.as_str() {
            "inf" => Some(f64::INFINITY),
            "-inf" => Some(f64::NEG_INFINITY),
            _ => return Err(serde::de::Error::custom(format!("bad number {s:?}"))),
        },
    })
}

impl EvalReport {
    pub fn with_poses(mut self, rot: Vec<f64>, trans: Vec<f64>) -> Self {
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        self.mean_rot_err_deg = mean(&rot);
        self.mean_trans_err = mean(&trans);
        self.rot_err_deg = rot;
        self.trans_err = trans;
        self
    }

    pub fn table(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.6}"));
        let mut out = String::new();
        out += &format!("psnr_db          {}\n", opt(self.psnr));
        out += &format!("ssim             {}\n", opt(self.ssim));
        out += &format!("depth_abs_rel    {}\n", opt(self.depth_abs_rel));
        out += &format!("mean_rot_err_deg {}\n", opt(self.mean_rot_err_deg));
        out += &format!("mean_trans_err   {}\n", opt(self.mean_trans_err));
        if !self.rot_err_deg.is_empty() {
            out += "camera  rot_err_deg  trans_err\n";
            for (i, (r, t)) in self.rot_err_deg.iter().zip(&self.trans_err).enumerate() {
                out += &format!("{i:>6}  {r:>11.6}  {t:>9.6}\n");
            }
        }
        out
    }
}

/// Similarity `x ↦ s·R·x + t` taking estimated centers onto true ones.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

fn project_to_so3(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * vt
}

/// Least-squares similarity over camera centers. When the centers are
/// collinear the rotation about the line is fixed by averaging the
/// per-camera orientation offsets instead.
pub fn align_similarity(estimated: &[PoseSE3], truth: &[PoseSE3]) -> Result<Similarity> {
    if estimated.len() != truth.len() || estimated.len() < 2 {
        return Err(Error::DimensionMismatch(format!(
            "need matching pose lists of length ≥ 2, got {} and {}",
            estimated.len(),
            truth.len()
        )));
    }
    let n = estimated.len() as f64;
    let ce: Vec<Vector3<f64>> = estimated.iter().map(|p| p.center()).collect();
    let ct: Vec<Vector3<f64>> = truth.iter().map(|p| p.center()).collect();
    let me = ce.iter().sum::<Vector3<f64>>() / n;
    let mt = ct.iter().sum::<Vector3<f64>>() / n;
    let var_e = ce.iter().map(|c| (c - me).norm_squared()).sum::<f64>() / n;
    let var_t = ct.iter().map(|c| (c - mt).norm_squared()).sum::<f64>() / n;
    if var_e < 1e-24 || var_t < 1e-24 {
        return Err(Error::DegenerateAlignment("camera centers coincide".into()));
    }
    let cov = ce
        .iter()
        .zip(&ct)
        .map(|(e, t)| (t - mt) * (e - me).transpose())
        .sum::<Matrix3<f64>>()
        / n;
    let svd = cov.svd(true, true);
    let sv = svd.singular_values;
    let rotation = if sv[1] > 1e-9 * sv[0] {
        project_to_so3(&cov)
    } else {
        let m: Matrix3<f64> = estimated
            .iter()
            .zip(truth)
            .map(|(e, t)| t.rotation() * e.rotation().transpose())
            .sum();
        project_to_so3(&m)
    };
    let scale = ce
        .iter()
        .zip(&ct)
        .map(|(e, t)| (t - mt).dot(&(rotation * (e - me))))
        .sum::<f64>()
        / (n * var_e);
    Ok(Similarity {
        scale,
        rotation,
        translation: mt - scale * rotation * me,
    })
}

/// Per-camera geodesic rotation error (degrees) and center distance as a
/// fraction of the true scene diameter, after similarity alignment.
pub fn relative_pose_error(
    estimated: &[PoseSE3],
    truth: &[PoseSE3],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let s = align_similarity(estimated, truth)?;
    let diameter = scene_diameter(truth);
    let mut rot = Vec::with_capacity(truth.len());
    let mut trans = Vec::with_capacity(truth.len());
    for (e, t) in estimated.iter().zip(truth) {
        rot.push(rotation_distance_deg(
            &(s.rotation * e.rotation()),
            &t.rotation(),
        ));
        let c = s.scale * s.rotation * e.center() + s.translation;
        trans.push((c - t.center()).norm() / diameter);
    }
    Ok((rot, trans))
}
