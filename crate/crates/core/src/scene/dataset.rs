use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::camera::Camera;
use super::image::Image;
use crate::error::{Error, Result};

pub const DEFAULT_NEAR: f64 = 0.5;
pub const DEFAULT_FAR: f64 = 6.0;

/// Camera manifest in the `transforms_*.json` layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub camera_angle_x: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub near: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub far: Option<f64>,
    /// Image size, for manifests whose frames have no image on disk.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<usize>,
    pub frames: Vec<Frame>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub file_path: String,
    pub transform_matrix: [[f64; 4]; 4],
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn near_far(&self) -> (f64, f64) {
        (self.near.unwrap_or(DEFAULT_NEAR), self.far.unwrap_or(DEFAULT_FAR))
    }

    pub fn focal(&self, width: usize) -> f64 {
        0.5 * width as f64 / (0.5 * self.camera_angle_x).tan()
    }

    pub fn camera(&self, frame: &Frame, width: usize, height: usize) -> Result<Camera> {
        let (near, far) = self.near_far();
        Camera::new(width, height, self.focal(width), frame.transform_matrix, near, far)
            .map_err(|e| Error::Frame { frame: frame.file_path.clone(), reason: e.to_string() })
    }

    /// Cameras for every frame, sized by `w`/`h` when present and by the
    /// frame's image otherwise. `base` is the manifest's directory.
    pub fn cameras(&self, base: &Path) -> Result<Vec<Camera>> {
        self.frames
            .iter()
            .map(|frame| {
                let (w, h) = match (self.w, self.h) {
                    (Some(w), Some(h)) => (w, h),
                    _ => {
                        let path = Self::image_path(base, frame);
                        let (w, h) = image::image_dimensions(&path)
                            .map_err(|e| Error::Frame { frame: frame.file_path.clone(), reason: e.to_string() })?;
                        (w as usize, h as usize)
                    }
                };
                self.camera(frame, w, h)
            })
            .collect()
    }

    /// Image path of a frame; `.png` is appended when the entry has no
    /// extension.
    pub fn image_path(base: &Path, frame: &Frame) -> PathBuf {
        let mut p = base.join(&frame.file_path);
        if p.extension().is_none() {
            p.set_extension("png");
        }
        p
    }
}

/// One posed training or evaluation view.
#[derive(Clone, Debug)]
pub struct ViewImage {
    pub camera: Camera,
    pub name: String,
    pub pixels_full: Image,
    /// Box-filtered `pixels_full`, reduced by the dataset's upscale factor.
    pub pixels_low: Image,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub views: Vec<ViewImage>,
    pub scale: usize,
}

impl Dataset {
    /// Loads a manifest file, or `transforms_train.json` when `path` is a
    /// directory.
    pub fn load(path: &Path, scale: usize) -> Result<Self> {
        if path.is_dir() {
            Self::load_split(path, "train", scale)
        } else {
            Self::load_manifest(path, scale)
        }
    }

    pub fn load_split(dir: &Path, split: &str, scale: usize) -> Result<Self> {
        Self::load_manifest(&dir.join(format!("transforms_{split}.json")), scale)
    }

    pub fn load_manifest(manifest_path: &Path, scale: usize) -> Result<Self> {
        if scale == 0 {
            return Err(Error::InvalidArgument("upscale factor must be positive".into()));
        }
        let manifest = Manifest::read(manifest_path)?;
        if manifest.frames.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let frame_err = |frame: &Frame, reason: String| Error::Frame { frame: frame.file_path.clone(), reason };
        let views = manifest
            .frames
            .par_iter()
            .map(|frame| -> Result<ViewImage> {
                let path = Manifest::image_path(base, frame);
                let full = Image::load_png(&path).map_err(|e| frame_err(frame, e.to_string()))?;
                let (w, h) = (full.width(), full.height());
                if w % scale != 0 || h % scale != 0 {
                    return Err(frame_err(frame, format!("{w}x{h} image is not divisible by upscale factor {scale}")));
                }
                let camera = manifest.camera(frame, w, h)?;
                let low = full.downscale_box(scale)?;
                Ok(ViewImage { camera, name: frame.file_path.clone(), pixels_full: full, pixels_low: low })
            })
            .collect::<Result<Vec<_>>>()?;
        let (w0, h0) = (views[0].camera.width, views[0].camera.height);
        if let Some(bad) = views.iter().find(|v| v.camera.width != w0 || v.camera.height != h0) {
            return Err(Error::Frame {
                frame: bad.name.clone(),
                reason: format!("size {}x{} differs from {w0}x{h0}", bad.camera.width, bad.camera.height),
            });
        }
        Ok(Self { views, scale })
    }

    pub fn low_res_size(&self) -> (usize, usize) {
        let c = &self.views[0].camera;
        (c.width / self.scale, c.height / self.scale)
    }
}
