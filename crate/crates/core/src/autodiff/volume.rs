//! Volume-rendering primitives: trilinear grid lookup and fused
//! emission-absorption compositing.

use super::{GradStore, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Lower corner index and fractional offset of one trilinear lookup.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap<T> {
    /// Flat index of the lower corner's first channel; `None` outside the grid.
    base: Option<usize>,
    frac: [T; 3],
}

fn grid_dims(shape: &[usize]) -> Result<[usize; 4]> {
    let &[nx, ny, nz, c] = shape else {
        return Err(Error::shape("trilinear_sample", format!("grid must be [Nx,Ny,Nz,C], got {shape:?}")));
    };
    if nx < 2 || ny < 2 || nz < 2 {
        return Err(Error::InvalidArgument(format!(
            "trilinear_sample needs every grid dimension >= 2, got {nx}x{ny}x{nz}"
        )));
    }
    Ok([nx, ny, nz, c])
}

/// Corner offsets and weights, in the order (x, y, z) bits 000..111.
fn corners<T: Scalar>(dims: [usize; 4], frac: [T; 3]) -> [(usize, T); 8] {
    let [_, ny, nz, c] = dims;
    let strides = [ny * nz * c, nz * c, c];
    let mut out = [(0, T::zero()); 8];
    for (bits, slot) in out.iter_mut().enumerate() {
        let mut off = 0;
        let mut w = T::one();
        for axis in 0..3 {
            if bits >> (2 - axis) & 1 == 1 {
                off += strides[axis];
                w *= frac[axis];
            } else {
                w *= T::one() - frac[axis];
            }
        }
        *slot = (off, w);
    }
    out
}

impl<T: Scalar> Tape<'_, T> {
    /// Trilinear interpolation of a channel-last grid `[Nx, Ny, Nz, C]` at
    /// `points` (`[P, 3]`, flattened) given in grid index coordinates.
    ///
    /// Points outside `[0, N-1]` on any axis produce zeros and contribute no
    /// gradient. Query points are treated as constants.
    pub fn trilinear_sample(&mut self, grid: Var, points: &[T]) -> Result<Var> {
        let dims = grid_dims(self.shape(grid))?;
        if points.len() % 3 != 0 {
            return Err(Error::shape("trilinear_sample", "points must be [P, 3]"));
        }
        let [nx, ny, nz, c] = dims;
        let n = [nx, ny, nz];
        let taps: Vec<Tap<T>> = points
            .chunks_exact(3)
            .map(|p| {
                let mut idx = [0usize; 3];
                let mut frac = [T::zero(); 3];
                for a in 0..3 {
                    let hi = T::c((n[a] - 1) as f64);
                    if !(p[a] >= T::zero() && p[a] <= hi) {
                        return Tap { base: None, frac };
                    }
                    let i = p[a].floor().to_usize().unwrap_or(0).min(n[a] - 2);
                    idx[a] = i;
                    frac[a] = p[a] - T::c(i as f64);
                }
                Tap { base: Some(((idx[0] * ny + idx[1]) * nz + idx[2]) * c), frac }
            })
            .collect();
        let g = self.value(grid);
        let mut out = vec![T::zero(); taps.len() * c];
        for (row, tap) in out.chunks_exact_mut(c).zip(&taps) {
            let Some(base) = tap.base else { continue };
            for (off, w) in corners(dims, tap.frac) {
                for (o, v) in row.iter_mut().zip(&g[base + off..base + off + c]) {
                    *o += w * *v;
                }
            }
        }
        self.push("trilinear_sample", out, vec![taps.len(), c], &[grid], Op::Trilinear { grid, taps })
    }

    pub(super) fn trilinear_backward(&self, grid: Var, taps: &[Tap<T>], gout: &[T], store: &mut GradStore<T>) {
        let dims = grid_dims(self.shape(grid)).expect("validated in forward");
        let c = dims[3];
        let Some(gg) = store.slot(grid) else { return };
        for (row, tap) in gout.chunks_exact(c).zip(taps) {
            let Some(base) = tap.base else { continue };
            for (off, w) in corners(dims, tap.frac) {
                for (d, go) in gg[base + off..base + off + c].iter_mut().zip(row) {
                    *d += w * *go;
                }
            }
        }
    }

    /// Emission-absorption compositing along `R` rays of `N` samples.
    ///
    /// `sigma: [R, N]` densities, `values: [R, N, C]` per-sample quantities,
    /// `deltas` (`R * N`) sample spacings. With `alpha_i = 1 - exp(-sigma_i
    /// delta_i)` and `T_i = prod_{j<i} (1 - alpha_j)` the output row is
    /// `[sum_i T_i alpha_i v_i, T_{N+1}]`, shape `[R, C + 1]`.
    pub fn composite(&mut self, sigma: Var, values: Var, deltas: Vec<T>) -> Result<Var> {
        let &[r, n] = self.shape(sigma) else {
            return Err(Error::shape("composite", format!("sigma must be [R, N], got {:?}", self.shape(sigma))));
        };
        let &[r2, n2, c] = self.shape(values) else {
            return Err(Error::shape("composite", format!("values must be [R, N, C], got {:?}", self.shape(values))));
        };
        if r != r2 || n != n2 || deltas.len() != r * n {
            return Err(Error::shape(
                "composite",
                format!("sigma [{r}, {n}], values [{r2}, {n2}, {c}], {} deltas", deltas.len()),
            ));
        }
        let sv = self.value(sigma);
        if sv.iter().any(|s| !(*s >= T::zero())) {
            return Err(Error::InvalidArgument("composite: densities must be non-negative".into()));
        }
        if deltas.iter().any(|d| !(*d > T::zero())) {
            return Err(Error::InvalidArgument("composite: sample spacings must be positive".into()));
        }
        let vv = self.value(values);
        let mut out = vec![T::zero(); r * (c + 1)];
        for ray in 0..r {
            let row = &mut out[ray * (c + 1)..(ray + 1) * (c + 1)];
            let mut trans = T::one();
            for i in 0..n {
                let tau = sv[ray * n + i] * deltas[ray * n + i];
                let alpha = -(-tau).exp_m1();
                let w = trans * alpha;
                for (o, v) in row[..c].iter_mut().zip(&vv[(ray * n + i) * c..][..c]) {
                    *o += w * *v;
                }
                trans *= (-tau).exp();
            }
            row[c] = trans;
        }
        self.push("composite", out, vec![r, c + 1], &[sigma, values], Op::Composite { sigma, values, deltas })
    }

    pub(super) fn composite_backward(
        &self,
        sigma: Var,
        values: Var,
        deltas: &[T],
        gout: &[T],
        store: &mut GradStore<T>,
    ) {
        let (r, n) = (self.shape(sigma)[0], self.shape(sigma)[1]);
        let c = self.shape(values)[2];
        let sv = self.value(sigma);
        let vv = self.value(values);
        let mut trans = vec![T::zero(); n + 1];
        let mut weights = vec![T::zero(); n];
        let mut proj = vec![T::zero(); n];
        let mut dsigma = vec![T::zero(); if self.requires_grad(sigma) { r * n } else { 0 }];
        let mut dvalues = vec![T::zero(); if self.requires_grad(values) { r * n * c } else { 0 }];
        for ray in 0..r {
            let g = &gout[ray * (c + 1)..(ray + 1) * (c + 1)];
            trans[0] = T::one();
            for i in 0..n {
                let tau = sv[ray * n + i] * deltas[ray * n + i];
                weights[i] = trans[i] * -(-tau).exp_m1();
                trans[i + 1] = trans[i] * (-tau).exp();
                let v = &vv[(ray * n + i) * c..][..c];
                proj[i] = v.iter().zip(&g[..c]).map(|(a, b)| *a * *b).sum();
            }
            if !dvalues.is_empty() {
                for i in 0..n {
                    let dst = &mut dvalues[(ray * n + i) * c..][..c];
                    for (d, gc) in dst.iter_mut().zip(&g[..c]) {
                        *d = weights[i] * *gc;
                    }
                }
            }
            if !dsigma.is_empty() {
                let g_res = g[c];
                let mut suffix = T::zero();
                for j in (0..n).rev() {
                    let delta = deltas[ray * n + j];
                    dsigma[ray * n + j] =
                        delta * (trans[j + 1] * proj[j] - suffix - g_res * trans[n]);
                    suffix += weights[j] * proj[j];
                }
            }
        }
        if let Some(gs) = store.slot(sigma) {
            for (a, b) in gs.iter_mut().zip(&dsigma) {
                *a += *b;
            }
        }
        if let Some(gv) = store.slot(values) {
            for (a, b) in gv.iter_mut().zip(&dvalues) {
                *a += *b;
            }
        }
    }
}

/// Result of compositing one ray from explicit per-sample opacities.
#[derive(Clone, Debug, PartialEq)]
pub struct CompositeResult<T> {
    pub output: Vec<T>,
    pub weights: Vec<T>,
    pub residual: T,
}

/// Composites a single ray given opacities `alphas` (N) and `values`
/// (`N * channels`, sample-major).
pub fn composite_alphas<T: Scalar>(alphas: &[T], values: &[T], channels: usize) -> Result<CompositeResult<T>> {
    if values.len() != alphas.len() * channels {
        return Err(Error::shape("composite_alphas", format!("{} alphas, {} values", alphas.len(), values.len())));
    }
    if alphas.iter().any(|a| !(*a >= T::zero() && *a <= T::one())) {
        return Err(Error::InvalidArgument("opacities must lie in [0, 1]".into()));
    }
    let mut output = vec![T::zero(); channels];
    let mut weights = Vec::with_capacity(alphas.len());
    let mut trans = T::one();
    for (i, a) in alphas.iter().enumerate() {
        let w = trans * *a;
        for (o, v) in output.iter_mut().zip(&values[i * channels..(i + 1) * channels]) {
            *o += w * *v;
        }
        weights.push(w);
        trans *= T::one() - *a;
    }
    Ok(CompositeResult { output, weights, residual: trans })
}
