//! Training objectives: L1, low-resolution MSE, patch adversarial loss,
//! feature-space perceptual loss and their weighted total.

use std::path::Path;

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::nn::{self, Bound, ParamSet};
use crate::tensor::{Scalar, Tensor};

fn same_shape<T: Scalar>(tape: &Tape<'_, T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape(op, format!("{:?} vs {:?}", tape.shape(a), tape.shape(b))));
    }
    Ok(())
}

/// Mean absolute error over every value.
pub fn l1_loss<T: Scalar>(tape: &mut Tape<'_, T>, pred: Var, gt: Var) -> Result<Var> {
    same_shape(tape, "l1_loss", pred, gt)?;
    let d = tape.sub(pred, gt)?;
    let a = tape.abs(d)?;
    tape.mean(a)
}

/// Mean squared error over every value.
pub fn mse_loss<T: Scalar>(tape: &mut Tape<'_, T>, pred: Var, gt: Var) -> Result<Var> {
    same_shape(tape, "mse_loss", pred, gt)?;
    let d = tape.sub(pred, gt)?;
    let s = tape.square(d)?;
    tape.mean(s)
}

/// Weights of the total objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Full-resolution L1.
    pub l1: f64,
    /// Generator adversarial term.
    pub adv: f64,
    pub perceptual: f64,
    /// Low-resolution MSE on the encoder's RGB head.
    pub mse_low: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { l1: 1.0, adv: 0.02, perceptual: 0.5, mse_low: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("l1", self.l1), ("adv", self.adv), ("perceptual", self.perceptual), ("mse_low", self.mse_low)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::InvalidArgument(format!("loss weight {name} must be non-negative, got {w}")));
            }
        }
        Ok(())
    }

    /// True when any decoder-side term is active.
    pub fn uses_decoder(&self) -> bool {
        self.l1 > 0.0 || self.adv > 0.0 || self.perceptual > 0.0
    }

    pub fn combine(&self, parts: [f64; 4]) -> f64 {
        self.l1 * parts[0] + self.adv * parts[1] + self.perceptual * parts[2] + self.mse_low * parts[3]
    }
}

/// Loss terms on one patch; a term is only needed when its weight is positive.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossParts {
    pub l1: Option<Var>,
    pub adv: Option<Var>,
    pub perceptual: Option<Var>,
    pub mse_low: Option<Var>,
}

/// Weighted sum; zero-weight terms are skipped.
pub fn total_loss<T: Scalar>(tape: &mut Tape<'_, T>, w: &LossWeights, parts: &LossParts) -> Result<Var> {
    w.validate()?;
    let mut total: Option<Var> = None;
    for (name, weight, part) in [
        ("l1", w.l1, parts.l1),
        ("adv", w.adv, parts.adv),
        ("perceptual", w.perceptual, parts.perceptual),
        ("mse_low", w.mse_low, parts.mse_low),
    ] {
        if weight == 0.0 {
            continue;
        }
        let v = part.ok_or_else(|| Error::InvalidArgument(format!("loss term {name} has weight {weight} but was not computed")))?;
        let term = if weight == 1.0 { v } else { tape.mul_scalar(v, T::c(weight))? };
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => Ok(tape.constant(Tensor::scalar(T::zero()))),
    }
}

pub const DISC_CHANNELS: [usize; 4] = [32, 64, 128, 256];

/// Patch discriminator: four stride-2 3x3 convolutions with leaky ReLU and a
/// 1x1 convolution to a single logit map.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator<T> {
    pub patch: usize,
    pub params: ParamSet<T>,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(patch: usize, seed: u64) -> Self {
        let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let mut cin = 3;
        for (i, c) in DISC_CHANNELS.iter().enumerate() {
            nn::insert_conv(&mut p, &mut rng, &format!("discriminator.conv{i}"), cin, *c, 3, nn::leaky_gain());
            cin = *c;
        }
        nn::insert_conv(&mut p, &mut rng, "discriminator.out", cin, 1, 1, 1.0);
        Self { patch, params: p }
    }

    pub fn from_params(patch: usize, params: ParamSet<T>) -> Result<Self> {
        let fresh = Self::new(patch, 0);
        if fresh.params.names() != params.names()
            || fresh.params.tensors().iter().zip(params.tensors()).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::InvalidArgument("discriminator parameters do not match".into()));
        }
        Ok(Self { patch, params })
    }

    pub fn cast<U: Scalar>(&self) -> Discriminator<U> {
        Discriminator { patch: self.patch, params: self.params.cast() }
    }

    /// Logit map for a `[3, N_p, N_p]` patch.
    pub fn forward(&self, tape: &mut Tape<'_, T>, b: &Bound<'_>, x: Var) -> Result<Var> {
        if tape.shape(x) != [3, self.patch, self.patch] {
            return Err(Error::shape(
                "discriminator",
                format!("expected [3, {p}, {p}], got {:?}", tape.shape(x), p = self.patch),
            ));
        }
        let mut h = x;
        for i in 0..DISC_CHANNELS.len() {
            h = nn::conv(tape, b, &format!("discriminator.conv{i}"), h, 2)?;
            h = nn::leaky(tape, h)?;
        }
        nn::conv(tape, b, "discriminator.out", h, 1)
    }
}

/// Mean binary cross-entropy of `logits` against a constant label.
fn bce_with_logits<T: Scalar>(tape: &mut Tape<'_, T>, logits: Var, label: bool) -> Result<Var> {
    // -log sigmoid(l) = softplus(-l); -log(1 - sigmoid(l)) = softplus(l).
    let x = if label { tape.neg(logits)? } else { logits };
    let s = tape.softplus(x)?;
    tape.mean(s)
}

/// `BCE(D(real), 1) + BCE(D(fake), 0)` with `fake` detached.
pub fn discriminator_loss<T: Scalar>(
    tape: &mut Tape<'_, T>,
    d: &Discriminator<T>,
    b: &Bound<'_>,
    real: Var,
    fake: Var,
) -> Result<Var> {
    let fake = tape.detach(fake);
    let lr = d.forward(tape, b, real)?;
    let lf = d.forward(tape, b, fake)?;
    let a = bce_with_logits(tape, lr, true)?;
    let c = bce_with_logits(tape, lf, false)?;
    tape.add(a, c)
}

/// Non-saturating generator loss `BCE(D(fake), 1)`.
pub fn generator_loss<T: Scalar>(tape: &mut Tape<'_, T>, d: &Discriminator<T>, b: &Bound<'_>, fake: Var) -> Result<Var> {
    let l = d.forward(tape, b, fake)?;
    bce_with_logits(tape, l, true)
}

/// `(loss_D, loss_G)`.
pub fn adversarial_losses<T: Scalar>(
    tape: &mut Tape<'_, T>,
    d: &Discriminator<T>,
    b: &Bound<'_>,
    real: Var,
    fake: Var,
) -> Result<(Var, Var)> {
    Ok((discriminator_loss(tape, d, b, real, fake)?, generator_loss(tape, d, b, fake)?))
}

/// Fixed mapping from an RGB patch `[3, H, W]` to a list of feature maps.
pub trait FeatureExtractor<T: Scalar>: Send + Sync {
    fn extract<'a>(&'a self, tape: &mut Tape<'a, T>, x: Var) -> Result<Vec<Var>>;
}

/// `sum_levels mean((phi(pred) - phi(gt))^2)`; no gradient flows into `gt`.
pub fn perceptual_loss<'a, T: Scalar>(
    tape: &mut Tape<'a, T>,
    phi: &'a dyn FeatureExtractor<T>,
    pred: Var,
    gt: Var,
) -> Result<Var> {
    same_shape(tape, "perceptual_loss", pred, gt)?;
    let gt = tape.detach(gt);
    let fp = phi.extract(tape, pred)?;
    let fg = phi.extract(tape, gt)?;
    let mut total: Option<Var> = None;
    for (a, b) in fp.into_iter().zip(fg) {
        let m = mse_loss(tape, a, b)?;
        total = Some(match total {
            None => m,
            Some(t) => tape.add(t, m)?,
        });
    }
    total.ok_or_else(|| Error::InvalidArgument("feature extractor produced no features".into()))
}

pub const FILTER_SIZE: usize = 5;
pub const FILTERS_PER_CHANNEL: usize = 8;

/// The eight zero-sum 5x5 filters: four Sobel orientations and four
/// differences of Gaussians.
pub fn filter_bank() -> Vec<[[f64; FILTER_SIZE]; FILTER_SIZE]> {
    let sobel: [[[f64; 3]; 3]; 4] = [
        [[-1., 0., 1.], [-2., 0., 2.], [-1., 0., 1.]],
        [[-1., -2., -1.], [0., 0., 0.], [1., 2., 1.]],
        [[0., 1., 2.], [-1., 0., 1.], [-2., -1., 0.]],
        [[-2., -1., 0.], [-1., 0., 1.], [0., 1., 2.]],
    ];
    let mut out = Vec::with_capacity(FILTERS_PER_CHANNEL);
    for k in sobel {
        let mut f = [[0.0; FILTER_SIZE]; FILTER_SIZE];
        for y in 0..3 {
            for x in 0..3 {
                f[y + 1][x + 1] = k[y][x] / 8.0;
            }
        }
        out.push(f);
    }
    let gaussian = |sigma: f64| {
        let mut g = [[0.0; FILTER_SIZE]; FILTER_SIZE];
        let c = (FILTER_SIZE / 2) as f64;
        let mut total = 0.0;
        for (y, row) in g.iter_mut().enumerate() {
            for (x, v) in row.iter_mut().enumerate() {
                let r2 = (x as f64 - c).powi(2) + (y as f64 - c).powi(2);
                *v = (-r2 / (2.0 * sigma * sigma)).exp();
                total += *v;
            }
        }
        g.map(|row| row.map(|v| v / total))
    };
    for (s1, s2) in [(0.5, 1.0), (0.8, 1.6), (1.0, 2.0), (0.6, 2.5)] {
        let (a, b) = (gaussian(s1), gaussian(s2));
        let mut f = [[0.0; FILTER_SIZE]; FILTER_SIZE];
        for y in 0..FILTER_SIZE {
            for x in 0..FILTER_SIZE {
                f[y][x] = a[y][x] - b[y][x];
            }
        }
        out.push(f);
    }
    out
}

/// Default extractor: the [`filter_bank`] applied to each color channel on a
/// two-level average-pooled pyramid.
#[derive(Clone, Debug)]
pub struct FilterBankExtractor<T> {
    kernel: Tensor<T>,
    levels: usize,
}

impl<T: Scalar> Default for FilterBankExtractor<T> {
    fn default() -> Self {
        Self::new(2)
    }
}

impl<T: Scalar> FilterBankExtractor<T> {
    pub fn new(levels: usize) -> Self {
        let bank = filter_bank();
        let (nf, k) = (FILTERS_PER_CHANNEL, FILTER_SIZE);
        // Block-diagonal [3 * nf, 3, k, k]: output channel c * nf + f reads
        // input channel c only.
        let mut kernel = Tensor::zeros([3 * nf, 3, k, k]);
        let data = kernel.data_mut();
        for c in 0..3 {
            for (f, filt) in bank.iter().enumerate() {
                let o = c * nf + f;
                for y in 0..k {
                    for x in 0..k {
                        data[((o * 3 + c) * k + y) * k + x] = T::c(filt[y][x]);
                    }
                }
            }
        }
        Self { kernel, levels }
    }

    pub fn kernel(&self) -> &Tensor<T> {
        &self.kernel
    }
}

impl<T: Scalar> FeatureExtractor<T> for FilterBankExtractor<T> {
    fn extract<'a>(&'a self, tape: &mut Tape<'a, T>, x: Var) -> Result<Vec<Var>> {
        let kernel = tape.constant_ref(&self.kernel);
        let mut level = x;
        let mut out = Vec::with_capacity(self.levels);
        for i in 0..self.levels {
            if i > 0 {
                level = tape.avg_pool2x(level)?;
            }
            out.push(tape.conv2d(level, kernel, None, 1)?);
        }
        Ok(out)
    }
}

/// Convolution stack loaded from a weights container: layers
/// `features.{i}.w` (`[Cout, Cin, k, k]`) and `features.{i}.b`, with leaky
/// ReLU between layers. Every layer's output is one feature level.
#[derive(Clone, Debug)]
pub struct ConvStackExtractor<T> {
    layers: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> ConvStackExtractor<T> {
    pub fn new(layers: Vec<(Tensor<T>, Tensor<T>)>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("feature extractor needs at least one layer".into()));
        }
        let mut cin = 3;
        for (i, (w, b)) in layers.iter().enumerate() {
            let &[cout, ci, k, k2] = w.shape() else {
                return Err(Error::shape("feature extractor", format!("layer {i} weight must be rank 4")));
            };
            if ci != cin || k != k2 || k % 2 == 0 || b.shape() != [cout] {
                return Err(Error::shape("feature extractor", format!("layer {i}: weight {:?}, bias {:?}", w.shape(), b.shape())));
            }
            cin = cout;
        }
        Ok(Self { layers })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::load(path)?;
        let mut layers = Vec::new();
        while c.get(&format!("features.{}.w", layers.len())).is_some() {
            let i = layers.len();
            let w = c.tensor(&format!("features.{i}.w"))?.cast();
            let b = c.tensor(&format!("features.{i}.b"))?.cast();
            layers.push((w, b));
        }
        Self::new(layers)
    }
}

impl<T: Scalar> FeatureExtractor<T> for ConvStackExtractor<T> {
    fn extract<'a>(&'a self, tape: &mut Tape<'a, T>, x: Var) -> Result<Vec<Var>> {
        let mut h = x;
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, (w, b)) in self.layers.iter().enumerate() {
            if i > 0 {
                h = nn::leaky(tape, h)?;
            }
            let (wv, bv) = (tape.constant_ref(w), tape.constant_ref(b));
            h = tape.conv2d(h, wv, Some(bv), 1)?;
            out.push(h);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use rand::Rng;

    fn rand_t(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
        let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
    }

    fn pair(tape: &mut Tape<'_, f64>, a: &Tensor<f64>, b: &Tensor<f64>) -> (Var, Var) {
        (tape.constant(a.clone()), tape.constant(b.clone()))
    }

    #[test]
    fn pixel_losses_closed_forms_and_loops() {
        let gt = rand_t(&[3, 4, 5], 1, 0.0, 1.0);
        let off = Tensor::from_fn([3, 4, 5], |i| gt.data()[i] + 0.5);
        let off_small = Tensor::from_fn([3, 4, 5], |i| gt.data()[i] + 0.1);
        let other = rand_t(&[3, 4, 5], 2, 0.0, 1.0);
        let mut tape = Tape::new();
        let (p, g) = pair(&mut tape, &gt, &gt);
        let z1 = l1_loss(&mut tape, p, g).unwrap();
        let z2 = mse_loss(&mut tape, p, g).unwrap();
        assert_eq!((tape.item(z1), tape.item(z2)), (0.0, 0.0));
        let (p, g) = pair(&mut tape, &off, &gt);
        let l = l1_loss(&mut tape, p, g).unwrap();
        assert!((tape.item(l) - 0.5).abs() < 1e-12);
        let (p, g) = pair(&mut tape, &off_small, &gt);
        let l = mse_loss(&mut tape, p, g).unwrap();
        assert!((tape.item(l) - 0.01).abs() < 1e-12);
        let (p, g) = pair(&mut tape, &other, &gt);
        let l1 = l1_loss(&mut tape, p, g).unwrap();
        let l2 = mse_loss(&mut tape, p, g).unwrap();
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        for i in 0..60 {
            let d = other.data()[i] - gt.data()[i];
            s1 += d.abs();
            s2 += d * d;
        }
        assert!((tape.item(l1) - s1 / 60.0).abs() < 1e-7);
        assert!((tape.item(l2) - s2 / 60.0).abs() < 1e-7);
        let wrong = tape.constant(Tensor::zeros([3, 4, 4]));
        assert!(l1_loss(&mut tape, wrong, g).is_err());
    }

    #[test]
    fn total_loss_masking_and_defaults() {
        let mut tape = Tape::<f64>::new();
        let parts: Vec<Var> = [0.3, 0.7, 1.1, 0.2].iter().map(|v| tape.constant(Tensor::scalar(*v))).collect();
        let all = LossParts { l1: Some(parts[0]), adv: Some(parts[1]), perceptual: Some(parts[2]), mse_low: Some(parts[3]) };
        let only_l1 = LossWeights { l1: 1.0, adv: 0.0, perceptual: 0.0, mse_low: 0.0 };
        let t = total_loss(&mut tape, &only_l1, &LossParts { l1: Some(parts[0]), ..Default::default() }).unwrap();
        assert_eq!(tape.item(t), 0.3);
        let t = total_loss(&mut tape, &LossWeights::default(), &all).unwrap();
        let want = 1.0 * 0.3 + 0.02 * 0.7 + 0.5 * 1.1 + 1.0 * 0.2;
        assert!((tape.item(t) - want).abs() < 1e-15);
        assert!((LossWeights::default().combine([0.3, 0.7, 1.1, 0.2]) - want).abs() < 1e-15);
        let zero = LossWeights { l1: 0.0, adv: 0.0, perceptual: 0.0, mse_low: 0.0 };
        let t = total_loss(&mut tape, &zero, &LossParts::default()).unwrap();
        assert_eq!(tape.item(t), 0.0);
        let neg = LossWeights { l1: -1.0, ..zero };
        assert!(total_loss(&mut tape, &neg, &all).is_err());
    }

    #[test]
    fn default_weights() {
        let w = LossWeights::default();
        assert_eq!((w.l1, w.adv, w.perceptual, w.mse_low), (1.0, 0.02, 0.5, 1.0));
    }

    #[test]
    fn zero_logits_give_ln2() {
        let mut d = Discriminator::<f64>::new(16, 0);
        for t in d.params.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let b = d.params.bind(&mut tape);
        let real = tape.constant(rand_t(&[3, 16, 16], 1, 0.0, 1.0));
        let fake = tape.variable(rand_t(&[3, 16, 16], 2, 0.0, 1.0));
        let (ld, lg) = adversarial_losses(&mut tape, &d, &b, real, fake).unwrap();
        assert!((tape.item(ld) - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((tape.item(lg) - 2f64.ln()).abs() < 1e-12);
        let logits = d.forward(&mut tape, &b, real).unwrap();
        assert_eq!(tape.shape(logits), &[1, 1, 1]);
        // The fake branch of loss_D is detached.
        let g = tape.backward(ld).unwrap();
        assert!(g.get(fake).is_none());
        let wrong = tape.constant(Tensor::zeros([3, 8, 8]));
        assert!(d.forward(&mut tape, &b, wrong).is_err());
    }

    #[test]
    fn filter_bank_is_zero_sum() {
        for f in filter_bank() {
            let s: f64 = f.iter().flatten().sum();
            assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn perceptual_zero_on_equal_and_matches_direct_oracle() {
        let phi = FilterBankExtractor::<f64>::default();
        let c = Tensor::full([3, 8, 8], 0.4);
        let mut tape = Tape::new();
        let (p, g) = pair(&mut tape, &c, &c);
        let l = perceptual_loss(&mut tape, &phi, p, g).unwrap();
        assert_eq!(tape.item(l), 0.0);

        let a = rand_t(&[3, 8, 8], 3, 0.0, 1.0);
        let b = rand_t(&[3, 8, 8], 4, 0.0, 1.0);
        let (p, g) = pair(&mut tape, &a, &b);
        let l = perceptual_loss(&mut tape, &phi, p, g).unwrap();
        // Direct oracle: filter each channel with zero padding, then MSE.
        let bank = filter_bank();
        let filt = |img: &[f64], n: usize| -> Vec<f64> {
            let mut out = Vec::new();
            for c in 0..3 {
                for f in &bank {
                    for y in 0..n as isize {
                        for x in 0..n as isize {
                            let mut s = 0.0;
                            for dy in -2..=2isize {
                                for dx in -2..=2isize {
                                    let (yy, xx) = (y + dy, x + dx);
                                    if yy >= 0 && xx >= 0 && yy < n as isize && xx < n as isize {
                                        s += f[(dy + 2) as usize][(dx + 2) as usize] * img[c * n * n + (yy as usize) * n + xx as usize];
                                    }
                                }
                            }
                            out.push(s);
                        }
                    }
                }
            }
            out
        };
        let pool = |img: &[f64], n: usize| -> Vec<f64> {
            let h = n / 2;
            let mut out = vec![0.0; 3 * h * h];
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..h {
                        out[c * h * h + y * h + x] = (0..4)
                            .map(|k| img[c * n * n + (2 * y + k / 2) * n + 2 * x + k % 2])
                            .sum::<f64>()
                            / 4.0;
                    }
                }
            }
            out
        };
        let mse = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / u.len() as f64;
        let want = mse(&filt(a.data(), 8), &filt(b.data(), 8)) + mse(&filt(&pool(a.data(), 8), 4), &filt(&pool(b.data(), 8), 4));
        assert!((tape.item(l) - want).abs() < 1e-6);
    }

    #[test]
    fn conv_stack_loads_from_container() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("phi.bin");
        let mut c = Container::new();
        c.put_tensor("features.0.w", &Tensor::from_fn([4, 3, 3, 3], |i| (i as f32 * 0.37).sin()));
        c.put_tensor("features.0.b", &Tensor::zeros([4]));
        c.put_tensor("features.1.w", &Tensor::from_fn([2, 4, 1, 1], |i| i as f32 - 1.0));
        c.put_tensor("features.1.b", &Tensor::full([2], 0.5));
        c.save(&path).unwrap();
        let phi = ConvStackExtractor::<f64>::load(&path).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(rand_t(&[3, 6, 6], 5, 0.0, 1.0));
        let feats = phi.extract(&mut tape, x).unwrap();
        assert_eq!(feats.len(), 2);
        assert_eq!(tape.shape(feats[1]), &[2, 6, 6]);
    }

    #[test]
    fn losses_compose_with_gradcheck() {
        let d = Discriminator::<f64>::new(16, 3);
        let phi = FilterBankExtractor::<f64>::default();
        let gt = rand_t(&[3, 16, 16], 6, 0.0, 1.0);
        let err = grad_check(
            |tape, v| {
                let b = d.params.bind_frozen(tape);
                let g = tape.constant(gt.clone());
                let l1 = l1_loss(tape, v[0], g)?;
                let adv = generator_loss(tape, &d, &b, v[0])?;
                let perc = perceptual_loss(tape, &phi, v[0], g)?;
                let w = LossWeights { mse_low: 0.0, ..Default::default() };
                total_loss(tape, &w, &LossParts { l1: Some(l1), adv: Some(adv), perceptual: Some(perc), mse_low: None })
            },
            &[rand_t(&[3, 16, 16], 7, 0.0, 1.0)],
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
