//! Dataset directories, depth files and run configuration.
//!
//! Layout of a dataset root:
//!
//! ```text
//! images/frame_0000.png      8-bit RGB
//! cameras.json               array of camera records, one per frame, in order
//! depth/frame_0000.f32       little-endian f32, row-major; 0 where invalid
//! depth/frame_0000.meta      "<width> <height>\n"
//! depth/frame_0000_mask.png  8-bit gray, 255 valid, 0 invalid
//! priors/                    same layout as depth/
//! ```

use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use serde::{Deserialize, Serialize};

use crate::camera::{Camera, CameraModel, CameraRecord};
use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::field::FitConfig;
use crate::image::{DepthMap, Image};
use crate::losses::LossConfig;
use crate::optimizer::OptimizerConfig;

pub fn frame_name(i: usize) -> String {
    format!("frame_{i:04}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub cameras: Vec<Camera>,
    pub depth: Option<Vec<DepthMap>>,
    pub priors: Option<Vec<DepthMap>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn model(&self) -> Option<CameraModel> {
        self.cameras.first().map(Camera::model)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_cameras(path: &Path, cameras: &[Camera]) -> Result<()> {
    let records: Vec<CameraRecord> = cameras.iter().map(Camera::to_record).collect();
    let text = serde_json::to_string_pretty(&records)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Reads `cameras.json`: an array of records, or a single record.
pub fn read_cameras(path: &Path) -> Result<Vec<Camera>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let records: Vec<CameraRecord> = match value {
        serde_json::Value::Array(_) => serde_json::from_value(value)?,
        _ => vec![serde_json::from_value(value)?],
    };
    records.iter().map(Camera::from_record).collect()
}

/// Writes one depth map as raw f32 plus `.meta` and mask; non-finite or
/// non-positive values are stored as 0 and marked invalid.
pub fn write_depth(dir: &Path, name: &str, depth: &DepthMap) -> Result<()> {
    let mut raw = Vec::with_capacity(depth.values.len() * 4);
    let mut mask = GrayImage::new(depth.width as u32, depth.height as u32);
    for (i, &v) in depth.values.iter().enumerate() {
        let valid = v.is_finite() && v > 0.0;
        raw.extend_from_slice(&(if valid { v as f32 } else { 0.0f32 }).to_le_bytes());
        mask.put_pixel((i % depth.width) as u32, (i / depth.width) as u32, Luma([if valid { 255 } else { 0 }]));
    }
    let raw_path = dir.join(format!("{name}.f32"));
    std::fs::write(&raw_path, raw).map_err(|e| Error::io(&raw_path, e))?;
    let meta_path = dir.join(format!("{name}.meta"));
    std::fs::write(&meta_path, format!("{} {}\n", depth.width, depth.height)).map_err(|e| Error::io(&meta_path, e))?;
    mask.save(dir.join(format!("{name}_mask.png")))?;
    Ok(())
}

/// Reads one depth map; invalid pixels come back as `+∞`.
pub fn read_depth(dir: &Path, name: &str) -> Result<DepthMap> {
    let raw_path = dir.join(format!("{name}.f32"));
    let meta_path = dir.join(format!("{name}.meta"));
    let corrupt = |path: &Path, reason: String| Error::CorruptDepthFile { path: path.to_path_buf(), reason };
    let meta = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let dims: Vec<usize> = meta.split_whitespace().map(|s| s.parse::<usize>()).collect::<std::result::Result<_, _>>().map_err(|_| corrupt(&meta_path, format!("bad dims {meta:?}")))?;
    let [width, height] = dims[..] else {
        return Err(corrupt(&meta_path, format!("expected two dims, got {meta:?}")));
    };
    let raw = std::fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    if raw.len() != width * height * 4 {
        return Err(corrupt(&raw_path, format!("{} bytes for {width}x{height}", raw.len())));
    }
    let mask_path = dir.join(format!("{name}_mask.png"));
    let mask = if mask_path.exists() { Some(image::open(&mask_path)?.to_luma8()) } else { None };
    if let Some(m) = &mask {
        if m.dimensions() != (width as u32, height as u32) {
            return Err(corrupt(&mask_path, format!("mask is {:?}, depth is {width}x{height}", m.dimensions())));
        }
    }
    let mut out = DepthMap::filled(width, height, f64::INFINITY);
    for (i, chunk) in raw.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        let valid = match &mask {
            Some(m) => m.get_pixel((i % width) as u32, (i / width) as u32)[0] > 0,
            None => v > 0.0,
        };
        if valid {
            if !(v.is_finite() && v > 0.0) {
                return Err(corrupt(&raw_path, format!("pixel {i} is marked valid but holds {v}")));
            }
            out.values[i] = v;
        }
    }
    Ok(out)
}

fn write_depth_dir(dir: &Path, maps: &[DepthMap]) -> Result<()> {
    create_dir(dir)?;
    for (i, d) in maps.iter().enumerate() {
        write_depth(dir, &frame_name(i), d)?;
    }
    Ok(())
}

fn read_depth_dir(dir: &Path, images: &[Image]) -> Result<Option<Vec<DepthMap>>> {
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut maps = Vec::with_capacity(images.len());
    for (i, im) in images.iter().enumerate() {
        let d = read_depth(dir, &frame_name(i))?;
        if (d.width, d.height) != (im.width, im.height) {
            return Err(Error::DimensionMismatch(format!(
                "{}/{} is {}x{} but the image is {}x{}",
                dir.display(),
                frame_name(i),
                d.width,
                d.height,
                im.width,
                im.height
            )));
        }
        maps.push(d);
    }
    Ok(Some(maps))
}

pub fn save_dataset(data: &Dataset, root: &Path) -> Result<()> {
    if data.images.len() != data.cameras.len() {
        return Err(Error::DimensionMismatch(format!("{} images but {} cameras", data.images.len(), data.cameras.len())));
    }
    let images = root.join("images");
    create_dir(&images)?;
    for (i, im) in data.images.iter().enumerate() {
        im.save_png(&images.join(format!("{}.png", frame_name(i))))?;
    }
    write_cameras(&root.join("cameras.json"), &data.cameras)?;
    if let Some(d) = &data.depth {
        write_depth_dir(&root.join("depth"), d)?;
    }
    if let Some(p) = &data.priors {
        write_depth_dir(&root.join("priors"), p)?;
    }
    Ok(())
}

fn image_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for i in 0.. {
        let p = dir.join(format!("{}.png", frame_name(i)));
        if !p.exists() {
            break;
        }
        paths.push(p);
    }
    if paths.is_empty() {
        return Err(Error::io(dir.join(format!("{}.png", frame_name(0))), std::io::ErrorKind::NotFound.into()));
    }
    Ok(paths)
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let images: Vec<Image> = image_paths(&root.join("images"))?.iter().map(|p| Image::load_png(p)).collect::<Result<_>>()?;
    let cameras = read_cameras(&root.join("cameras.json"))?;
    if cameras.len() < images.len() {
        return Err(Error::MissingCameraRecord(format!("{}.png", frame_name(cameras.len()))));
    }
    if cameras.len() > images.len() {
        return Err(Error::DimensionMismatch(format!("{} camera records but {} images", cameras.len(), images.len())));
    }
    for (i, (im, cam)) in images.iter().zip(&cameras).enumerate() {
        if (im.width, im.height) != (cam.width(), cam.height()) {
            return Err(Error::DimensionMismatch(format!(
                "{}.png is {}x{} but its camera is {}x{}",
                frame_name(i),
                im.width,
                im.height,
                cam.width(),
                cam.height()
            )));
        }
    }
    let depth = read_depth_dir(&root.join("depth"), &images)?;
    let priors = read_depth_dir(&root.join("priors"), &images)?;
    Ok(Dataset { images, cameras, depth, priors })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum DepthInitSource {
    Priors,
    Constant,
    GroundTruth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DepthInitConfig {
    pub source: DepthInitSource,
    /// Value used by the constant source.
    pub constant: f64,
    /// Rescale each prior map so its median matches the target median.
    pub align_priors: bool,
    /// Target median depth; when absent the median of `depth/` is used.
    pub median: Option<f64>,
}

impl Default for DepthInitConfig {
    fn default() -> Self {
        Self { source: DepthInitSource::Priors, constant: 2.0, align_priors: true, median: None }
    }
}

/// Initial depth maps for refinement.
pub fn init_depth(data: &Dataset, cfg: &DepthInitConfig, root: &Path) -> Result<Vec<DepthMap>> {
    match cfg.source {
        DepthInitSource::Constant => {
            if !(cfg.constant > 0.0) {
                return Err(Error::NonPositiveDepth(cfg.constant));
            }
            Ok(data.images.iter().map(|im| DepthMap::filled(im.width, im.height, cfg.constant)).collect())
        }
        DepthInitSource::GroundTruth => data
            .depth
            .clone()
            .ok_or_else(|| Error::Config(format!("{} has no depth/ directory", root.display()))),
        DepthInitSource::Priors => {
            let priors = data.priors.clone().ok_or_else(|| Error::MissingPriors(root.to_path_buf()))?;
            if !cfg.align_priors {
                return Ok(priors);
            }
            priors
                .into_iter()
                .enumerate()
                .map(|(i, p)| {
                    let target = match (cfg.median, &data.depth) {
                        (Some(m), _) => m,
                        (None, Some(d)) => d[i].median().ok_or(Error::NoValidPixels)?,
                        (None, None) => {
                            return Err(Error::Config("aligning priors needs depth_init.median or a depth/ directory".into()))
                        }
                    };
                    let current = p.median().ok_or(Error::NoValidPixels)?;
                    Ok(p.scaled(target / current))
                })
                .collect()
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Pinhole,
    #[default]
    Fisheye,
}

/// Options the `synth` command applies on top of a scene spec.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthOptions {
    /// Rotation noise applied to the written initial poses, degrees.
    pub perturb_rot_deg: f64,
    /// Translation noise as a fraction of the rig diameter.
    pub perturb_trans_frac: f64,
    /// Distortion written into the initial fisheye cameras; truth when absent.
    pub init_distortion: Option<[f64; 3]>,
    /// Write `priors/` as this multiple of the true depth.
    pub prior_scale: Option<f64>,
    /// Relative amplitude of the smooth multiplicative prior noise.
    pub prior_noise: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self { perturb_rot_deg: 0.0, perturb_trans_frac: 0.0, init_distortion: None, prior_scale: None, prior_noise: 0.0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    pub feature: FeatureConfig,
    pub optimizer: OptimizerConfig,
    pub loss: LossConfig,
    pub field: FitConfig,
    pub synth: SynthOptions,
    pub depth_init: DepthInitConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}
