//! Analytic emission-absorption scene used as ground truth.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::camera::{dot, sub, Camera, Vec3};
use super::dataset::{Dataset, Frame, Manifest, ViewImage};
use super::image::Image;
use crate::error::{Error, Result};

pub const TOY_NEAR: f64 = 2.0;
pub const TOY_FAR: f64 = 6.0;
pub const TOY_CAMERA_ANGLE_X: f64 = 0.6;
pub const TOY_CAMERA_RADIUS: f64 = 4.0;
/// Ground truth is integrated with this many samples per ray.
pub const TOY_GT_SAMPLES: usize = 512;
pub const TOY_SWEEP_FRAMES: usize = 24;

/// Soft sphere: constant `density` inside `radius`, Gaussian falloff of
/// width `falloff` outside. Color is `color` darkened by smooth stripes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sphere {
    pub center: Vec3,
    pub radius: f64,
    pub density: f64,
    pub falloff: f64,
    pub color: [f64; 3],
    pub stripe_axis: Vec3,
    pub stripe_freq: f64,
    pub stripe_contrast: f64,
}

impl Sphere {
    pub fn density_at(&self, x: Vec3) -> f64 {
        let d = sub(x, self.center);
        let outside = (dot(d, d).sqrt() - self.radius).max(0.0);
        if outside == 0.0 {
            return self.density;
        }
        let z = outside / self.falloff;
        if z > 8.0 {
            0.0
        } else {
            self.density * (-z * z).exp()
        }
    }

    pub fn color_at(&self, x: Vec3) -> [f64; 3] {
        let phase = self.stripe_freq * dot(sub(x, self.center), self.stripe_axis);
        let stripe = 0.5 + 0.5 * (4.0 * phase.sin()).tanh();
        let k = 1.0 - self.stripe_contrast * stripe;
        [self.color[0] * k, self.color[1] * k, self.color[2] * k]
    }
}

/// Scene field: density is the sum over spheres, color the density-weighted
/// mean of sphere colors. The background is white.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ToyField {
    pub spheres: Vec<Sphere>,
}

impl ToyField {
    pub fn random(seed: u64) -> Self {
        let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
        let palette = [[0.9, 0.2, 0.15], [0.15, 0.7, 0.25], [0.2, 0.3, 0.9]];
        let spheres = palette
            .iter()
            .map(|&color| {
                let center = [rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), rng.random_range(-0.3..0.3)];
                let axis = super::camera::normalize([
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0f64),
                ]);
                Sphere {
                    center,
                    radius: rng.random_range(0.3..0.45),
                    density: 50.0,
                    falloff: 0.02,
                    color,
                    stripe_axis: axis,
                    stripe_freq: rng.random_range(14.0..22.0),
                    stripe_contrast: 0.7,
                }
            })
            .collect();
        Self { spheres }
    }

    pub fn density(&self, x: Vec3) -> f64 {
        self.spheres.iter().map(|s| s.density_at(x)).sum()
    }

    pub fn color(&self, x: Vec3) -> [f64; 3] {
        let mut acc = [0.0; 3];
        let mut total = 0.0;
        for s in &self.spheres {
            let w = s.density_at(x);
            if w > 0.0 {
                let c = s.color_at(x);
                for k in 0..3 {
                    acc[k] += w * c[k];
                }
                total += w;
            }
        }
        if total > 0.0 {
            acc.map(|a| a / total)
        } else {
            acc
        }
    }

    /// Color and expected depth along one ray, integrated with `n` uniformly
    /// spaced samples in `[near, far]` and composited over white.
    pub fn integrate(&self, origin: Vec3, dir: Vec3, near: f64, far: f64, n: usize) -> ([f64; 3], f64) {
        let step = (far - near) / (n - 1) as f64;
        let mut trans = 1.0;
        let mut rgb = [0.0; 3];
        let mut depth = 0.0;
        for i in 0..n {
            let t = near + step * i as f64;
            let x = [origin[0] + t * dir[0], origin[1] + t * dir[1], origin[2] + t * dir[2]];
            let sigma = self.density(x);
            if sigma == 0.0 {
                continue;
            }
            let alpha = -(-sigma * step).exp_m1();
            let w = trans * alpha;
            let c = self.color(x);
            for k in 0..3 {
                rgb[k] += w * c[k];
            }
            depth += w * t;
            trans *= 1.0 - alpha;
        }
        (rgb.map(|v| v + trans), depth)
    }

    /// Ground-truth image and expected-depth map for a camera.
    pub fn render(&self, cam: &Camera, n_samples: usize) -> (Image, Vec<f64>) {
        let o = cam.origin();
        let rows: Vec<Vec<([f64; 3], f64)>> = (0..cam.height)
            .into_par_iter()
            .map(|y| {
                (0..cam.width)
                    .map(|x| self.integrate(o, cam.direction(x as f64 + 0.5, y as f64 + 0.5), cam.near, cam.far, n_samples))
                    .collect()
            })
            .collect();
        let flat: Vec<_> = rows.into_iter().flatten().collect();
        let img = Image::from_fn(cam.width, cam.height, |x, y| flat[y * cam.width + x].0.map(|v| v as f32));
        (img, flat.into_iter().map(|p| p.1).collect())
    }
}

/// Camera on a sphere of radius [`TOY_CAMERA_RADIUS`] looking at the origin.
pub fn orbit_camera(azimuth: f64, elevation: f64, res: usize) -> Result<Camera> {
    let r = TOY_CAMERA_RADIUS;
    let eye = [r * elevation.cos() * azimuth.cos(), r * elevation.cos() * azimuth.sin(), r * elevation.sin()];
    let focal = 0.5 * res as f64 / (0.5 * TOY_CAMERA_ANGLE_X).tan();
    Camera::look_at(eye, [0.0; 3], [0.0, 0.0, 1.0], res, res, focal, TOY_NEAR, TOY_FAR)
}

/// Golden-angle spiral over elevations 10..60 degrees; `offset` shifts the
/// spiral so held-out views interleave with training views.
fn spiral_cameras(n: usize, offset: f64, res: usize) -> Result<Vec<Camera>> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let u = (i as f64 + 0.5 + offset) / n as f64;
            let elevation = (10.0 + 50.0 * u.fract()).to_radians();
            orbit_camera(golden * (i as f64 + offset), elevation, res)
        })
        .collect()
}

/// Number of held-out views written next to `n_views` training views.
pub fn test_view_count(n_views: usize) -> usize {
    (n_views / 4).max(2)
}

pub struct ToyScene {
    pub field: ToyField,
    pub train: Vec<Camera>,
    pub test: Vec<Camera>,
    pub sweep: Vec<Camera>,
}

impl ToyScene {
    pub fn new(n_views: usize, res: usize, seed: u64) -> Result<Self> {
        if n_views < 2 {
            return Err(Error::InvalidArgument(format!("toy scene needs at least 2 views, got {n_views}")));
        }
        if res == 0 {
            return Err(Error::InvalidArgument("resolution must be positive".into()));
        }
        let sweep = (0..TOY_SWEEP_FRAMES)
            .map(|i| orbit_camera((i as f64 * 1.5).to_radians(), 30f64.to_radians(), res))
            .collect::<Result<_>>()?;
        Ok(Self {
            field: ToyField::random(seed),
            train: spiral_cameras(n_views, 0.0, res)?,
            test: spiral_cameras(test_view_count(n_views), 0.37, res)?,
            sweep,
        })
    }

    /// Renders the train or test split in memory, without 8-bit quantization.
    pub fn dataset(&self, split: &str, scale: usize) -> Result<Dataset> {
        let cams = match split {
            "train" => &self.train,
            "test" => &self.test,
            _ => return Err(Error::InvalidArgument(format!("unknown split `{split}`"))),
        };
        let views = cams
            .par_iter()
            .enumerate()
            .map(|(i, cam)| {
                let (full, _) = self.field.render(cam, TOY_GT_SAMPLES);
                let low = full.downscale_box(scale)?;
                Ok(ViewImage { camera: cam.clone(), name: format!("{split}/r_{i}"), pixels_full: full, pixels_low: low })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { views, scale })
    }

    /// Writes `transforms_{train,test,sweep}.json`, the train and test PNGs,
    /// and the field parameters as `scene.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_split(dir, "train", &self.field, &self.train, true)?;
        write_split(dir, "test", &self.field, &self.test, true)?;
        write_split(dir, "sweep", &self.field, &self.sweep, false)?;
        let p = dir.join("scene.json");
        fs::write(&p, serde_json::to_string_pretty(&self.field)?).map_err(|e| Error::io(&p, e))
    }
}

fn write_split(dir: &Path, split: &str, field: &ToyField, cams: &[Camera], images: bool) -> Result<()> {
    let sub_dir = dir.join(split);
    if images {
        fs::create_dir_all(&sub_dir).map_err(|e| Error::io(&sub_dir, e))?;
    }
    let mut frames = Vec::with_capacity(cams.len());
    for (i, cam) in cams.iter().enumerate() {
        let file_path = format!("{split}/r_{i}");
        if images {
            let (img, _) = field.render(cam, TOY_GT_SAMPLES);
            img.save_png(&sub_dir.join(format!("r_{i}.png")))?;
        }
        frames.push(Frame { file_path, transform_matrix: cam.pose });
    }
    let manifest = Manifest {
        camera_angle_x: TOY_CAMERA_ANGLE_X,
        near: Some(TOY_NEAR),
        far: Some(TOY_FAR),
        w: Some(cams[0].width),
        h: Some(cams[0].height),
        frames,
    };
    manifest.write(&dir.join(format!("transforms_{split}.json")))
}

/// Generates and writes the seeded toy scene.
pub fn generate_toy_scene(out: &Path, n_views: usize, res: usize, seed: u64) -> Result<ToyScene> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let scene = ToyScene::new(n_views, res, seed)?;
    scene.write(out)?;
    Ok(scene)
}
