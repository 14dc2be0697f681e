//! Python bindings: camera projection, image metrics, field rendering and
//! the command-line entry point.

use std::path::PathBuf;

use fisheye_ba::camera::{Camera, FisheyeCamera, PinholeCamera};
use fisheye_ba::field::{render_image, RenderOptions, VoxelField};
use fisheye_ba::geometry::PoseSE3;
use fisheye_ba::image::Image;
use nalgebra::{Vector2, Vector3};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn err(e: fisheye_ba::error::Error) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn image(data: Vec<f64>, width: usize, height: usize) -> PyResult<Image> {
    let n = width * height;
    if n == 0 || data.len() % n != 0 {
        return Err(PyValueError::new_err(format!("{} values do not fill a {width}x{height} image", data.len())));
    }
    Ok(Image { width, height, channels: data.len() / n, data })
}

/// Equidistant-polynomial fisheye camera with a camera-to-world pose.
#[pyclass(name = "FisheyeCamera", frozen)]
struct PyFisheyeCamera {
    inner: FisheyeCamera,
}

#[pymethods]
impl PyFisheyeCamera {
    #[new]
    #[pyo3(signature = (fx, fy, cx, cy, width, height, k = [0.0, 0.0, 0.0], phi = [0.0, 0.0, 0.0], t = [0.0, 0.0, 0.0]))]
    #[allow(clippy::too_many_arguments)]
    fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize, k: [f64; 3], phi: [f64; 3], t: [f64; 3]) -> PyResult<Self> {
        let intr = PinholeCamera::new(fx, fy, cx, cy, width, height).map_err(err)?;
        let pose = PoseSE3::new(Vector3::from(phi), Vector3::from(t));
        Ok(PyFisheyeCamera { inner: FisheyeCamera::new(intr, pose, k).map_err(err)? })
    }

    /// Pixel coordinates of a world point.
    fn project(&self, p: [f64; 3]) -> PyResult<(f64, f64)> {
        let x = self.inner.project(&Vector3::from(p)).map_err(err)?;
        Ok((x.x, x.y))
    }

    /// World point at range `depth` along the ray through pixel (u, v).
    fn unproject(&self, u: f64, v: f64, depth: f64) -> [f64; 3] {
        self.inner.pixel_to_ray(u, v).at(depth).into()
    }

    /// Incidence angle of a pixel at distorted radius `r`.
    fn undistort_angle(&self, r: f64) -> f64 {
        self.inner.undistort_angle(r)
    }

    /// Distorted angle of an incidence angle.
    fn distort_angle(&self, theta: f64) -> PyResult<f64> {
        self.inner.distort_angle(theta).map_err(err)
    }

    #[getter]
    fn k(&self) -> [f64; 3] {
        self.inner.k
    }
}

/// Pinhole projection of a camera-frame point.
#[pyfunction]
#[allow(clippy::too_many_arguments)]
fn pinhole_project(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize, p: [f64; 3]) -> PyResult<(f64, f64)> {
    let cam = PinholeCamera::new(fx, fy, cx, cy, width, height).map_err(err)?;
    let x = cam.project(&Vector3::from(p)).map_err(err)?;
    Ok((x.x, x.y))
}

/// Camera-frame point at z-depth `depth` through pixel (u, v).
#[pyfunction]
#[allow(clippy::too_many_arguments)]
fn pinhole_unproject(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize, u: f64, v: f64, depth: f64) -> PyResult<[f64; 3]> {
    let cam = PinholeCamera::new(fx, fy, cx, cy, width, height).map_err(err)?;
    Ok(cam.unproject(&Vector2::new(u, v), depth).map_err(err)?.into())
}

/// PSNR of two interleaved images with values in [0, peak].
#[pyfunction]
#[pyo3(signature = (a, b, width, height, peak = 1.0))]
fn psnr(a: Vec<f64>, b: Vec<f64>, width: usize, height: usize, peak: f64) -> PyResult<f64> {
    Ok(fisheye_ba::metrics::psnr(&image(a, width, height)?, &image(b, width, height)?, peak))
}

/// Mean SSIM of two interleaved images.
#[pyfunction]
fn ssim(a: Vec<f64>, b: Vec<f64>, width: usize, height: usize) -> PyResult<f64> {
    Ok(fisheye_ba::losses::ssim(&image(a, width, height)?, &image(b, width, height)?))
}

/// Render camera `index` of a dataset's cameras.json from a field checkpoint.
/// Returns (width, height, interleaved RGB).
#[pyfunction]
#[pyo3(signature = (field, cameras, index, n_samples = 128, background = [1.0, 1.0, 1.0]))]
fn render(field: PathBuf, cameras: PathBuf, index: usize, n_samples: usize, background: [f64; 3]) -> PyResult<(usize, usize, Vec<f64>)> {
    let field = VoxelField::load(&field).map_err(err)?;
    let cams: Vec<Camera> = fisheye_ba::io::read_cameras(&cameras).map_err(err)?;
    let cam = cams.get(index).ok_or_else(|| PyValueError::new_err(format!("no camera {index}")))?;
    let (img, _) = render_image(&field, cam, &RenderOptions { n_samples, background });
    Ok((img.width, img.height, img.data))
}

/// Run the command-line tool with `args` (without the program name).
#[pyfunction]
fn cli(py: Python<'_>, args: Vec<String>) -> i32 {
    py.detach(|| fisheye_ba::cli::run(std::iter::once("fisheye-ba".to_string()).chain(args)))
}

#[pymodule]
fn fisheye_ba_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyFisheyeCamera>()?;
    m.add_function(wrap_pyfunction!(pinhole_project, m)?)?;
    m.add_function(wrap_pyfunction!(pinhole_unproject, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(render, m)?)?;
    m.add_function(wrap_pyfunction!(cli, m)?)?;
    Ok(())
}
