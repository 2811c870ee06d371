//! Cameras, images, datasets, the analytic toy scene and patch tiling.

pub mod camera;
pub mod dataset;
pub mod image;
pub mod patches;
pub mod toy;

pub use camera::{Camera, Vec3};
pub use dataset::{Dataset, Frame, Manifest, ViewImage};
pub use image::Image;
pub use patches::{build_patch_set, PatchSpec};
pub use toy::{generate_toy_scene, Sphere, ToyField, ToyScene};
