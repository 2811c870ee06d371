use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Square training patch. `side` is the full-resolution side `N_p`; rays are
/// cast for the `side / scale` low-resolution pixels inside it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub view: usize,
    pub x_low: usize,
    pub y_low: usize,
    pub side_low: usize,
    pub scale: usize,
}

impl PatchSpec {
    pub fn side(&self) -> usize {
        self.side_low * self.scale
    }

    pub fn x_full(&self) -> usize {
        self.x_low * self.scale
    }

    pub fn y_full(&self) -> usize {
        self.y_low * self.scale
    }
}

/// Tile origins along one axis: stride `patch`, with the last tile shifted
/// back to end at the edge.
fn origins(extent: usize, patch: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..extent).step_by(patch).map(|o| o.min(extent - patch)).collect();
    out.dedup();
    out
}

/// Tiles every `width x height` view with `n_p x n_p` full-resolution patches.
pub fn build_patch_set(n_views: usize, width: usize, height: usize, n_p: usize, scale: usize) -> Result<Vec<PatchSpec>> {
    if scale == 0 || n_p % scale != 0 || n_p / scale < 4 {
        return Err(Error::InvalidArgument(format!(
            "patch size {n_p} must be divisible by upscale factor {scale} with at least 4 low-res pixels per side"
        )));
    }
    if n_p > width || n_p > height {
        return Err(Error::InvalidArgument(format!("patch size {n_p} exceeds {width}x{height} image")));
    }
    if width % scale != 0 || height % scale != 0 {
        return Err(Error::InvalidArgument(format!("{width}x{height} image is not divisible by {scale}")));
    }
    // Work in low-res units so full-res origins are multiples of `scale`.
    let (wl, hl, pl) = (width / scale, height / scale, n_p / scale);
    let xs = origins(wl, pl);
    let ys = origins(hl, pl);
    let mut out = Vec::with_capacity(n_views * xs.len() * ys.len());
    for view in 0..n_views {
        for &y_low in &ys {
            for &x_low in &xs {
                out.push(PatchSpec { view, x_low, y_low, side_low: pl, scale });
            }
        }
    }
    Ok(out)
}
