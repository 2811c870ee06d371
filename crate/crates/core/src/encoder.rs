//! Voxel-grid radiance field rendered along rays at low resolution.
//!
//! Produces per-ray features (the composited reduction-layer outputs), an
//! expected depth and an auxiliary RGB prediction through a linear head.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{self, Bound, ParamSet};
use crate::scene::{Camera, PatchSpec, Vec3};
use crate::tensor::{Scalar, Tensor};

pub const DENSITY_GRID: &str = "density_grid";
pub const COLOR_GRID: &str = "color_grid";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub grid_dims: [usize; 3],
    pub bbox_min: [f64; 3],
    pub bbox_max: [f64; 3],
    /// Channels of the color-feature grid.
    pub grid_channels: usize,
    /// Ray-feature width `C'` handed to the decoder.
    pub feature_dim: usize,
    pub hidden: usize,
    pub pe_x: usize,
    pub pe_d: usize,
    pub n_samples: usize,
    /// Initial raw density; `softplus(-5)` is nearly transparent.
    pub density_init: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            grid_dims: [96, 96, 96],
            bbox_min: [-1.0; 3],
            bbox_max: [1.0; 3],
            grid_channels: 12,
            feature_dim: 6,
            hidden: 64,
            pe_x: 4,
            pe_d: 2,
            n_samples: 128,
            density_init: -5.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_dims.iter().any(|n| *n < 2) {
            return Err(Error::InvalidArgument(format!("grid dims must be >= 2, got {:?}", self.grid_dims)));
        }
        if (0..3).any(|a| !(self.bbox_max[a] > self.bbox_min[a])) {
            return Err(Error::InvalidArgument("bounding box needs positive extent on every axis".into()));
        }
        if self.n_samples < 2 {
            return Err(Error::InvalidArgument("n_samples must be >= 2".into()));
        }
        if self.grid_channels == 0 || self.feature_dim == 0 || self.hidden == 0 {
            return Err(Error::InvalidArgument("encoder widths must be positive".into()));
        }
        Ok(())
    }

    pub fn mlp_inputs(&self) -> usize {
        self.grid_channels + pe_width(self.pe_x) + pe_width(self.pe_d)
    }

    /// World point to grid index coordinates, `None` outside the box.
    pub fn to_grid(&self, x: Vec3) -> Option<[f64; 3]> {
        let mut g = [0.0; 3];
        for a in 0..3 {
            let u = (x[a] - self.bbox_min[a]) / (self.bbox_max[a] - self.bbox_min[a]);
            if !(0.0..=1.0).contains(&u) {
                return None;
            }
            g[a] = u * (self.grid_dims[a] - 1) as f64;
        }
        Some(g)
    }

    /// World point mapped to `[-1, 1]` per axis.
    fn normalized(&self, x: Vec3) -> Vec3 {
        let mut n = [0.0; 3];
        for a in 0..3 {
            n[a] = 2.0 * (x[a] - self.bbox_min[a]) / (self.bbox_max[a] - self.bbox_min[a]) - 1.0;
        }
        n
    }
}

pub fn pe_width(freqs: usize) -> usize {
    3 + 6 * freqs
}

/// `[v, sin(2^k pi v), cos(2^k pi v)]` for `k < freqs`.
pub fn positional_encoding(v: Vec3, freqs: usize, out: &mut Vec<f64>) {
    out.extend_from_slice(&v);
    // Double-angle recurrence from the base frequency.
    let mut sc = v.map(|x| (std::f64::consts::PI * x).sin_cos());
    for _ in 0..freqs {
        out.extend(sc.iter().map(|p| p.0));
        out.extend(sc.iter().map(|p| p.1));
        sc = sc.map(|(s, c)| (2.0 * s * c, (c - s) * (c + s)));
    }
}

/// Sample positions along one ray.
#[derive(Clone, Debug, PartialEq)]
pub struct RaySamples {
    pub origin: Vec3,
    pub dir: Vec3,
    pub t: Vec<f64>,
    /// `t[i+1] - t[i]`, one fewer than `t`.
    pub deltas: Vec<f64>,
}

impl RaySamples {
    pub fn point(&self, i: usize) -> Vec3 {
        let t = self.t[i];
        [self.origin[0] + t * self.dir[0], self.origin[1] + t * self.dir[1], self.origin[2] + t * self.dir[2]]
    }

    /// Spacings used for compositing: the interval lengths, with the nominal
    /// step for the last sample.
    pub fn composite_deltas(&self) -> impl Iterator<Item = f64> + '_ {
        let nominal = (self.t[self.t.len() - 1] - self.t[0]) / (self.t.len() - 1) as f64;
        self.deltas.iter().copied().chain(std::iter::once(nominal))
    }
}

/// Ray through the center of low-resolution pixel `(px, py)`, i.e. full-res
/// coordinates `((px + 0.5) s, (py + 0.5) s)`. Samples are uniform in
/// `[near, far]`; with `jitter`, every sample but the last moves uniformly
/// within its interval.
pub fn sample_ray<R: Rng>(
    cam: &Camera,
    px: usize,
    py: usize,
    scale: usize,
    n_samples: usize,
    jitter: Option<&mut R>,
) -> RaySamples {
    let s = scale as f64;
    let dir = cam.direction((px as f64 + 0.5) * s, (py as f64 + 0.5) * s);
    let step = (cam.far - cam.near) / (n_samples - 1) as f64;
    let mut t: Vec<f64> = (0..n_samples).map(|i| cam.near + step * i as f64).collect();
    if let Some(rng) = jitter {
        for ti in &mut t[..n_samples - 1] {
            *ti += step * rng.random::<f64>();
        }
    }
    t[n_samples - 1] = cam.far;
    let deltas = t.windows(2).map(|w| w[1] - w[0]).collect();
    RaySamples { origin: cam.origin(), dir, t, deltas }
}

/// Per-ray encoder outputs, row `r` for ray `r`.
#[derive(Clone, Copy, Debug)]
pub struct RayOutputs {
    /// `[R, C']`
    pub features: Var,
    /// `[R, 1]`
    pub depth: Var,
    /// `[R, 3]`, composited over white.
    pub rgb: Var,
    /// `[R, 1]` accumulated opacity `1 - T_{N+1}`.
    pub acc: Var,
}

/// Encoder outputs arranged as maps over a `h x w` pixel block.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    /// `[C', h, w]`
    pub feature_map: Var,
    /// `[h, w]`
    pub depth_map: Var,
    /// `[3, h, w]`
    pub rgb_low: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    pub config: EncoderConfig,
    pub params: ParamSet<T>,
}

impl<T: Scalar> Encoder<T> {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
        let [nx, ny, nz] = config.grid_dims;
        let mut p = ParamSet::new();
        p.insert(DENSITY_GRID, Tensor::full([nx, ny, nz, 1], T::c(config.density_init)));
        p.insert(COLOR_GRID, Tensor::zeros([nx, ny, nz, config.grid_channels]));
        let g = nn::leaky_gain();
        nn::insert_linear(&mut p, &mut rng, "mlp.0", config.mlp_inputs(), config.hidden, g);
        nn::insert_linear(&mut p, &mut rng, "mlp.1", config.hidden, config.hidden, g);
        nn::insert_linear(&mut p, &mut rng, "mlp.2", config.hidden, config.feature_dim, 1.0);
        nn::insert_linear(&mut p, &mut rng, "rgb_head", config.feature_dim, 3, 1.0);
        Ok(Self { config, params: p })
    }

    pub fn from_params(config: EncoderConfig, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let fresh = Self::new(config.clone(), 0)?;
        if fresh.params.names() != params.names()
            || fresh.params.tensors().iter().zip(params.tensors()).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::InvalidArgument("encoder parameters do not match the configuration".into()));
        }
        Ok(Self { config, params })
    }

    pub fn cast<U: Scalar>(&self) -> Encoder<U> {
        Encoder { config: self.config.clone(), params: self.params.cast() }
    }

    /// `sigma = softplus(interp(x, V_d))` for world points `[P, 3]`; exactly
    /// zero outside the bounding box.
    pub fn query_density(&self, tape: &mut Tape<'_, T>, b: &Bound<'_>, points: &[Vec3]) -> Result<Var> {
        let (rows, coords) = self.in_box(points);
        if rows.is_empty() {
            return Ok(tape.constant(Tensor::zeros([points.len(), 1])));
        }
        let raw = tape.trilinear_sample(b.var(DENSITY_GRID), &coords)?;
        let sigma = tape.softplus(raw)?;
        tape.scatter_rows(sigma, rows, points.len())
    }

    /// Reduction-layer features `g` (`[P, C']`) at world points with unit
    /// view directions.
    pub fn query_color_features(
        &self,
        tape: &mut Tape<'_, T>,
        b: &Bound<'_>,
        points: &[Vec3],
        dirs: &[Vec3],
    ) -> Result<Var> {
        if points.len() != dirs.len() {
            return Err(Error::shape("query_color_features", format!("{} points, {} dirs", points.len(), dirs.len())));
        }
        let coords: Vec<T> = points
            .iter()
            .flat_map(|x| {
                let g = self.config.to_grid(*x).unwrap_or([-1.0; 3]);
                g.map(T::c)
            })
            .collect();
        self.color_mlp(tape, b, points, dirs, &coords)
    }

    fn color_mlp(&self, tape: &mut Tape<'_, T>, b: &Bound<'_>, points: &[Vec3], dirs: &[Vec3], coords: &[T]) -> Result<Var> {
        let c = &self.config;
        let feat = tape.trilinear_sample(b.var(COLOR_GRID), coords)?;
        let mut enc = Vec::with_capacity(points.len() * (pe_width(c.pe_x) + pe_width(c.pe_d)));
        let wd = pe_width(c.pe_d);
        let mut dir_enc: Vec<f64> = Vec::with_capacity(wd);
        let mut last_dir = None;
        for (x, d) in points.iter().zip(dirs) {
            positional_encoding(c.normalized(*x), c.pe_x, &mut enc);
            // Consecutive samples of one ray share a direction.
            if last_dir != Some(*d) {
                dir_enc.clear();
                positional_encoding(*d, c.pe_d, &mut dir_enc);
                last_dir = Some(*d);
            }
            enc.extend_from_slice(&dir_enc);
        }
        let enc = Tensor::new([points.len(), pe_width(c.pe_x) + pe_width(c.pe_d)], enc.into_iter().map(T::c).collect())?;
        let enc = tape.constant(enc);
        let x = tape.concat(&[feat, enc], 1)?;
        let h = nn::linear(tape, b, "mlp.0", x)?;
        let h = nn::leaky(tape, h)?;
        let h = nn::linear(tape, b, "mlp.1", h)?;
        let h = nn::leaky(tape, h)?;
        nn::linear(tape, b, "mlp.2", h)
    }

    fn in_box(&self, points: &[Vec3]) -> (Vec<usize>, Vec<T>) {
        let mut rows = Vec::new();
        let mut coords = Vec::new();
        for (i, x) in points.iter().enumerate() {
            if let Some(g) = self.config.to_grid(*x) {
                rows.push(i);
                coords.extend(g.map(T::c));
            }
        }
        (rows, coords)
    }

    /// Renders a set of rays. The MLP and density lookup run only for
    /// samples inside the bounding box; outside samples have zero density.
    pub fn render_rays(&self, tape: &mut Tape<'_, T>, b: &Bound<'_>, rays: &[RaySamples]) -> Result<RayOutputs> {
        let n = self.config.n_samples;
        let r = rays.len();
        if r == 0 || rays.iter().any(|ray| ray.t.len() != n) {
            return Err(Error::shape("render_rays", format!("need >= 1 ray of {n} samples")));
        }
        let cf = self.config.feature_dim;
        let mut rows = Vec::new();
        let mut coords = Vec::new();
        let mut points = Vec::new();
        let mut dirs = Vec::new();
        let mut deltas = Vec::with_capacity(r * n);
        let mut depths = Vec::with_capacity(r * n);
        for (ri, ray) in rays.iter().enumerate() {
            for i in 0..n {
                let x = ray.point(i);
                if let Some(g) = self.config.to_grid(x) {
                    rows.push(ri * n + i);
                    coords.extend(g.map(T::c));
                    points.push(x);
                    dirs.push(ray.dir);
                }
            }
            deltas.extend(ray.composite_deltas().map(T::c));
            depths.extend(ray.t.iter().map(|t| T::c(*t)));
        }
        let (sigma, g) = if rows.is_empty() {
            (tape.constant(Tensor::zeros([r, n])), tape.constant(Tensor::zeros([r, n, cf])))
        } else {
            let raw = tape.trilinear_sample(b.var(DENSITY_GRID), &coords)?;
            let sigma = tape.softplus(raw)?;
            let sigma = tape.scatter_rows(sigma, rows.clone(), r * n)?;
            let sigma = tape.reshape(sigma, &[r, n])?;
            let g = self.color_mlp(tape, b, &points, &dirs, &coords)?;
            let g = tape.scatter_rows(g, rows, r * n)?;
            (sigma, tape.reshape(g, &[r, n, cf])?)
        };
        let t = tape.constant(Tensor::new([r, n, 1], depths)?);
        let values = tape.concat(&[g, t], 2)?;
        let comp = tape.composite(sigma, values, deltas)?;
        let features = tape.narrow(comp, 1, 0, cf)?;
        let depth = tape.narrow(comp, 1, cf, 1)?;
        let residual = tape.narrow(comp, 1, cf + 1, 1)?;
        let acc = tape.neg(residual)?;
        let acc = tape.add_scalar(acc, T::one())?;
        let rgb = self.rgb_head(tape, b, features, acc)?;
        Ok(RayOutputs { features, depth, rgb, acc })
    }

    /// `acc * sigmoid(W f + b acc) + (1 - acc)`. Scaling the head bias by the
    /// accumulated opacity keeps the head linear in the composited features,
    /// so it commutes with compositing.
    pub fn rgb_head(&self, tape: &mut Tape<'_, T>, b: &Bound<'_>, features: Var, acc: Var) -> Result<Var> {
        let z = tape.matmul(features, b.var("rgb_head.w"))?;
        let bias = tape.mul(acc, b.var("rgb_head.b"))?;
        let z = tape.add(z, bias)?;
        let c = tape.sigmoid(z)?;
        let c = tape.mul(c, acc)?;
        let background = tape.neg(acc)?;
        let background = tape.add_scalar(background, T::one())?;
        tape.add(c, background)
    }

    /// Rays for the low-resolution pixels of a patch, row-major.
    pub fn patch_rays<R: Rng>(&self, cam: &Camera, patch: &PatchSpec, mut jitter: Option<&mut R>) -> Vec<RaySamples> {
        let mut rays = Vec::with_capacity(patch.side_low * patch.side_low);
        for y in patch.y_low..patch.y_low + patch.side_low {
            for x in patch.x_low..patch.x_low + patch.side_low {
                rays.push(sample_ray(cam, x, y, patch.scale, self.config.n_samples, jitter.as_deref_mut()));
            }
        }
        rays
    }

    /// Feature, depth and RGB maps over one patch.
    pub fn render_patch_lowres<R: Rng>(
        &self,
        tape: &mut Tape<'_, T>,
        b: &Bound<'_>,
        cam: &Camera,
        patch: &PatchSpec,
        jitter: Option<&mut R>,
    ) -> Result<EncoderOutput> {
        let rays = self.patch_rays(cam, patch, jitter);
        let out = self.render_rays(tape, b, &rays)?;
        to_maps(tape, out, patch.side_low, patch.side_low)
    }
}

/// Rearranges per-ray rows into `[C, h, w]` maps.
pub fn to_maps<T: Scalar>(tape: &mut Tape<'_, T>, out: RayOutputs, h: usize, w: usize) -> Result<EncoderOutput> {
    let cf = tape.shape(out.features)[1];
    let f = tape.transpose(out.features)?;
    let feature_map = tape.reshape(f, &[cf, h, w])?;
    let depth_map = tape.reshape(out.depth, &[h, w])?;
    let c = tape.transpose(out.rgb)?;
    let rgb_low = tape.reshape(c, &[3, h, w])?;
    Ok(EncoderOutput { feature_map, depth_map, rgb_low })
}
