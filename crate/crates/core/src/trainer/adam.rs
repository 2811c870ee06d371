use crate::checkpoint::{Container, SectionData};
use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::{Scalar, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Adam over a subset of a [`ParamSet`]'s tensors.
///
/// Tensors flagged `sparse` are only updated where the gradient is nonzero,
/// so voxels no ray touched this step keep their value and moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub lr: f64,
    indices: Vec<usize>,
    sparse: Vec<bool>,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Scalar> Adam<T> {
    /// Manages the parameters at `indices`; `sparse(name)` selects the
    /// masked update.
    pub fn new(params: &ParamSet<T>, indices: Vec<usize>, lr: f64, sparse: impl Fn(&str) -> bool) -> Self {
        let shapes: Vec<_> = indices.iter().map(|i| params.tensors()[*i].shape().to_vec()).collect();
        Self {
            lr,
            sparse: indices.iter().map(|i| sparse(&params.names()[*i])).collect(),
            indices,
            m: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            step: 0,
        }
    }

    pub fn for_all(params: &ParamSet<T>, lr: f64, sparse: impl Fn(&str) -> bool) -> Self {
        Self::new(params, (0..params.len()).collect(), lr, sparse)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update from per-parameter gradients (aligned with the whole set).
    /// Parameters whose gradient is `None` are left untouched; if none has a
    /// gradient the step counter does not advance.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Option<Vec<T>>]) {
        if self.indices.iter().all(|i| grads[*i].is_none()) {
            return;
        }
        self.step += 1;
        let (b1, b2) = (T::c(BETA1), T::c(BETA2));
        let bc1 = T::c(1.0 - BETA1.powi(self.step as i32));
        let bc2 = T::c(1.0 - BETA2.powi(self.step as i32));
        let (lr, eps) = (T::c(self.lr), T::c(EPS));
        let one = T::one();
        for (k, &pi) in self.indices.iter().enumerate() {
            let Some(g) = &grads[pi] else { continue };
            let p = params.tensors_mut()[pi].data_mut();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            let sparse = self.sparse[k];
            for j in 0..p.len() {
                let gj = g[j];
                if sparse && gj == T::zero() {
                    continue;
                }
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

impl Adam<f32> {
    pub fn save(&self, c: &mut Container, group: &str, params: &ParamSet<f32>) {
        for (k, &pi) in self.indices.iter().enumerate() {
            let name = &params.names()[pi];
            c.put_tensor(format!("adam.{group}.{name}.m"), &self.m[k]);
            c.put_tensor(format!("adam.{group}.{name}.v"), &self.v[k]);
        }
        c.put(format!("adam.{group}.step"), vec![1], SectionData::U64(vec![self.step]));
    }

    pub fn load(&mut self, c: &Container, group: &str, params: &ParamSet<f32>) -> Result<()> {
        for (k, &pi) in self.indices.iter().enumerate() {
            let name = &params.names()[pi];
            let m = c.tensor(&format!("adam.{group}.{name}.m"))?;
            let v = c.tensor(&format!("adam.{group}.{name}.v"))?;
            if m.shape() != self.m[k].shape() || v.shape() != self.v[k].shape() {
                return Err(Error::shape("adam state", format!("moments of {name} have the wrong shape")));
            }
            self.m[k] = m;
            self.v[k] = v;
        }
        match &c.require(&format!("adam.{group}.step"))?.data {
            SectionData::U64(s) if s.len() == 1 => self.step = s[0],
            _ => return Err(Error::InvalidArgument(format!("adam.{group}.step must hold one u64"))),
        }
        Ok(())
    }
}

/// Global L2 norm of a gradient list.
pub fn grad_norm<T: Scalar>(grads: &[Option<Vec<T>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|x| {
            let x = x.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Scales gradients so their joint norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm<T: Scalar>(groups: &mut [&mut Vec<Option<Vec<T>>>], max_norm: f64) -> f64 {
    let norm = groups.iter().map(|g| grad_norm(g).powi(2)).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::c(max_norm / norm);
        for g in groups.iter_mut() {
            for v in g.iter_mut().flatten() {
                v.iter_mut().for_each(|x| *x *= s);
            }
        }
    }
    norm
}
