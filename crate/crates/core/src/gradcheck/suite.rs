//! Randomized finite-difference suite over every differentiable op and the
//! two end-to-end training paths.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

use super::{grad_check, grad_check_sampled};
use crate::autodiff::{Tape, Var};
use crate::decoder::{Decoder, DecoderConfig};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::losses::{self, Discriminator, FilterBankExtractor, LossParts, LossWeights};
use crate::nn::{Bound, ParamSet};
use crate::scene::{Camera, PatchSpec};
use crate::tensor::Tensor;

type Rng64 = Xoshiro256StarStar;

/// Module names accepted by [`run_suite`]'s filter.
pub const SUITE_MODULES: &[&str] = &["ops", "volume", "encoder", "decoder", "losses", "pipeline"];

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub module: &'static str,
    pub name: &'static str,
    pub instances: usize,
    pub max_error: f64,
    pub seconds: f64,
}

type Case = fn(&mut Rng64) -> Result<f64>;

const CASES: &[(&str, &str, Case)] = &[
    ("ops", "add", |r| binary(r, |t, a, b| t.add(a, b))),
    ("ops", "sub", |r| binary(r, |t, a, b| t.sub(a, b))),
    ("ops", "mul", |r| binary(r, |t, a, b| t.mul(a, b))),
    ("ops", "div", div),
    ("ops", "add_scalar", |r| unary(r, -2.0, 2.0, |t, x| t.add_scalar(x, 0.7))),
    ("ops", "mul_scalar", |r| unary(r, -2.0, 2.0, |t, x| t.mul_scalar(x, -1.3))),
    ("ops", "neg", |r| unary(r, -2.0, 2.0, |t, x| t.neg(x))),
    ("ops", "leaky_relu", |r| kinked(r, &[0.0], |t, x| t.leaky_relu(x, 0.2))),
    ("ops", "sigmoid", |r| unary(r, -4.0, 4.0, |t, x| t.sigmoid(x))),
    ("ops", "exp", |r| unary(r, -2.0, 2.0, |t, x| t.exp(x))),
    ("ops", "log", |r| unary(r, 0.2, 3.0, |t, x| t.log(x))),
    ("ops", "softplus", |r| unary(r, -6.0, 6.0, |t, x| t.softplus(x))),
    ("ops", "abs", |r| kinked(r, &[0.0], |t, x| t.abs(x))),
    ("ops", "square", |r| unary(r, -2.0, 2.0, |t, x| t.square(x))),
    ("ops", "clamp", |r| kinked(r, &[-1.0, 1.0], |t, x| t.clamp(x, -1.0, 1.0))),
    ("ops", "sum", |r| unary(r, -2.0, 2.0, |t, x| t.sum(x))),
    ("ops", "mean", |r| unary(r, -2.0, 2.0, |t, x| t.mean(x))),
    ("ops", "reshape", reshape),
    ("ops", "transpose", transpose),
    ("ops", "concat", concat),
    ("ops", "narrow", narrow),
    ("ops", "scatter_rows", scatter_rows),
    ("ops", "matmul", matmul),
    ("ops", "linear", linear),
    ("ops", "conv2d", |r| conv(r, 1)),
    ("ops", "conv2d_stride2", |r| conv(r, 2)),
    ("ops", "upsample_bilinear2x", |r| spatial(r, |t, x| t.upsample_bilinear2x(x))),
    ("ops", "avg_pool2x", |r| spatial(r, |t, x| t.avg_pool2x(x))),
    ("volume", "trilinear_sample", trilinear),
    ("volume", "composite", composite),
    ("encoder", "render_rays", encoder_rays),
    ("decoder", "decode", |r| decoder(r, true)),
    ("decoder", "decode_no_depth", |r| decoder(r, false)),
    ("losses", "l1", |r| pixel_loss(r, losses::l1_loss)),
    ("losses", "mse", |r| pixel_loss(r, losses::mse_loss)),
    ("losses", "discriminator", discriminator),
    ("losses", "generator", generator),
    ("losses", "perceptual", perceptual),
    ("pipeline", "encoder_mse", pipeline_pretrain),
    ("pipeline", "encoder_decoder_total", pipeline_joint),
];

/// Runs `instances` random instances of every case whose module matches
/// `module` (all when `None`). Instance `i` of case `k` is seeded from `(k, i)`.
pub fn run_suite(module: Option<&str>, instances: usize) -> Result<Vec<CheckResult>> {
    if let Some(m) = module {
        if !SUITE_MODULES.contains(&m) {
            return Err(Error::InvalidArgument(format!("unknown module `{m}`; expected one of {}", SUITE_MODULES.join(", "))));
        }
    }
    let mut out = Vec::new();
    for (k, (m, name, case)) in CASES.iter().enumerate() {
        if module.is_some_and(|f| f != *m) {
            continue;
        }
        let start = Instant::now();
        let mut worst = 0.0f64;
        for i in 0..instances {
            let mut rng = Rng64::seed_from_u64(((k as u64) << 32) | i as u64);
            let e = case(&mut rng).map_err(|e| Error::InvalidArgument(format!("{m}/{name} instance {i}: {e}")))?;
            worst = worst.max(e);
        }
        out.push(CheckResult { module: m, name, instances, max_error: worst, seconds: start.elapsed().as_secs_f64() });
    }
    Ok(out)
}

fn rand_tensor(rng: &mut Rng64, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

fn rand_shape(rng: &mut Rng64) -> Vec<usize> {
    let rank = rng.random_range(1..=3);
    (0..rank).map(|_| rng.random_range(1..=4)).collect()
}

/// Reduces `y` to a scalar with fixed, uneven weights so that no gradient
/// coordinate cancels by symmetry.
fn project(tape: &mut Tape<'_, f64>, y: Var) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(Tensor::from_fn(shape, |i| ((i as f64 * 0.618_034 + 0.3).fract() - 0.4) * 1.7));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn unary(rng: &mut Rng64, lo: f64, hi: f64, op: fn(&mut Tape<'_, f64>, Var) -> Result<Var>) -> Result<f64> {
    let shape = rand_shape(rng);
    let x = rand_tensor(rng, &shape, lo, hi);
    grad_check(|t, v| {
        let y = op(t, v[0])?;
        project(t, y)
    }, &[x])
}

/// Inputs kept at least 0.01 away from every kink.
fn kinked(rng: &mut Rng64, kinks: &[f64], op: fn(&mut Tape<'_, f64>, Var) -> Result<Var>) -> Result<f64> {
    let shape = rand_shape(rng);
    let x = Tensor::from_fn(shape, |_| loop {
        let v: f64 = rng.random_range(-2.0..2.0);
        if kinks.iter().all(|k| (v - k).abs() > 0.01) {
            break v;
        }
    });
    grad_check(|t, v| {
        let y = op(t, v[0])?;
        project(t, y)
    }, &[x])
}

/// Random shapes, with a trailing-axis broadcast half of the time.
fn broadcast_pair(rng: &mut Rng64) -> (Vec<usize>, Vec<usize>) {
    let a = rand_shape(rng);
    let b = if rng.random_bool(0.5) {
        let keep = rng.random_range(1..=a.len());
        let mut b = a[a.len() - keep..].to_vec();
        let i = rng.random_range(0..b.len());
        b[i] = 1;
        b
    } else {
        a.clone()
    };
    if rng.random_bool(0.5) { (a, b) } else { (b, a) }
}

fn binary(rng: &mut Rng64, op: fn(&mut Tape<'_, f64>, Var, Var) -> Result<Var>) -> Result<f64> {
    let (sa, sb) = broadcast_pair(rng);
    let a = rand_tensor(rng, &sa, -2.0, 2.0);
    let b = rand_tensor(rng, &sb, -2.0, 2.0);
    grad_check(|t, v| {
        let y = op(t, v[0], v[1])?;
        project(t, y)
    }, &[a, b])
}

fn div(rng: &mut Rng64) -> Result<f64> {
    let (sa, sb) = broadcast_pair(rng);
    let a = rand_tensor(rng, &sa, -2.0, 2.0);
    let b = Tensor::from_fn(sb, |_| {
        let m: f64 = rng.random_range(0.5..2.0);
        if rng.random_bool(0.5) { m } else { -m }
    });
    grad_check(|t, v| {
        let y = t.div(v[0], v[1])?;
        project(t, y)
    }, &[a, b])
}

fn reshape(rng: &mut Rng64) -> Result<f64> {
    let (a, b) = (rng.random_range(1..=4), rng.random_range(1..=4));
    let x = rand_tensor(rng, &[a, b, 2], -1.0, 1.0);
    grad_check(|t, v| {
        let y = t.reshape(v[0], &[2 * b, a])?;
        project(t, y)
    }, &[x])
}

fn transpose(rng: &mut Rng64) -> Result<f64> {
    let shape = [rng.random_range(1..=5), rng.random_range(1..=5)];
    let x = rand_tensor(rng, &shape, -1.0, 1.0);
    grad_check(|t, v| {
        let y = t.transpose(v[0])?;
        project(t, y)
    }, &[x])
}

fn concat(rng: &mut Rng64) -> Result<f64> {
    let rank = rng.random_range(1..=3);
    let base: Vec<usize> = (0..rank).map(|_| rng.random_range(1..=3)).collect();
    let axis = rng.random_range(0..rank);
    let parts: Vec<Tensor<f64>> = (0..rng.random_range(2..=3))
        .map(|_| {
            let mut s = base.clone();
            s[axis] = rng.random_range(1..=3);
            rand_tensor(rng, &s, -1.0, 1.0)
        })
        .collect();
    grad_check(|t, v| {
        let y = t.concat(v, axis)?;
        project(t, y)
    }, &parts)
}

fn narrow(rng: &mut Rng64) -> Result<f64> {
    let rank = rng.random_range(1..=3);
    let shape: Vec<usize> = (0..rank).map(|_| rng.random_range(2..=5)).collect();
    let axis = rng.random_range(0..rank);
    let start = rng.random_range(0..shape[axis]);
    let len = rng.random_range(1..=shape[axis] - start);
    let x = rand_tensor(rng, &shape, -1.0, 1.0);
    grad_check(|t, v| {
        let y = t.narrow(v[0], axis, start, len)?;
        project(t, y)
    }, &[x])
}

fn scatter_rows(rng: &mut Rng64) -> Result<f64> {
    let total = rng.random_range(2..=8);
    let mut rows: Vec<usize> = (0..total).filter(|_| rng.random_bool(0.6)).collect();
    if rows.is_empty() {
        rows.push(total - 1);
    }
    // Any order of distinct targets is allowed.
    if rng.random_bool(0.5) {
        rows.reverse();
    }
    let shape = [rows.len(), rng.random_range(1..=3)];
    let x = rand_tensor(rng, &shape, -1.0, 1.0);
    grad_check(|t, v| {
        let y = t.scatter_rows(v[0], rows.clone(), total)?;
        project(t, y)
    }, &[x])
}

fn matmul(rng: &mut Rng64) -> Result<f64> {
    let (m, k, n) = (rng.random_range(1..=5), rng.random_range(1..=5), rng.random_range(1..=5));
    let a = rand_tensor(rng, &[m, k], -1.0, 1.0);
    let b = rand_tensor(rng, &[k, n], -1.0, 1.0);
    grad_check(|t, v| {
        let y = t.matmul(v[0], v[1])?;
        project(t, y)
    }, &[a, b])
}

fn linear(rng: &mut Rng64) -> Result<f64> {
    let (m, k, n) = (rng.random_range(1..=5), rng.random_range(1..=5), rng.random_range(1..=5));
    let x = rand_tensor(rng, &[m, k], -1.0, 1.0);
    let w = rand_tensor(rng, &[k, n], -1.0, 1.0);
    let b = rand_tensor(rng, &[n], -1.0, 1.0);
    grad_check(|t, v| {
        let y = t.linear(v[0], v[1], v[2])?;
        project(t, y)
    }, &[x, w, b])
}

fn conv(rng: &mut Rng64, stride: usize) -> Result<f64> {
    let (ci, co) = (rng.random_range(1..=3), rng.random_range(1..=3));
    let k = [1, 3, 5][rng.random_range(0..3)];
    let (h, w) = (rng.random_range(k.max(2)..=7), rng.random_range(k.max(2)..=7));
    let x = rand_tensor(rng, &[ci, h, w], -1.0, 1.0);
    let kern = rand_tensor(rng, &[co, ci, k, k], -1.0, 1.0);
    let b = rand_tensor(rng, &[co], -1.0, 1.0);
    if rng.random_bool(0.5) {
        grad_check(|t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), stride)?;
            project(t, y)
        }, &[x, kern, b])
    } else {
        grad_check(|t, v| {
            let y = t.conv2d(v[0], v[1], None, stride)?;
            project(t, y)
        }, &[x, kern])
    }
}

fn spatial(rng: &mut Rng64, op: fn(&mut Tape<'_, f64>, Var) -> Result<Var>) -> Result<f64> {
    let c = rng.random_range(1..=3);
    let (h, w) = (2 * rng.random_range(1..=4), 2 * rng.random_range(1..=4));
    let x = rand_tensor(rng, &[c, h, w], -1.0, 1.0);
    grad_check(|t, v| {
        let y = op(t, v[0])?;
        project(t, y)
    }, &[x])
}

fn trilinear(rng: &mut Rng64) -> Result<f64> {
    let dims = [rng.random_range(2..=4), rng.random_range(2..=4), rng.random_range(2..=4), rng.random_range(1..=3)];
    let grid = rand_tensor(rng, &dims, -1.0, 1.0);
    let p = rng.random_range(1..=12);
    // Some points fall outside the grid and must get zero gradient.
    let points: Vec<f64> = (0..p * 3).map(|i| rng.random_range(-0.3..dims[i % 3] as f64 - 0.7)).collect();
    grad_check(|t, v| {
        let y = t.trilinear_sample(v[0], &points)?;
        project(t, y)
    }, &[grid])
}

fn composite(rng: &mut Rng64) -> Result<f64> {
    let (r, n, c) = (rng.random_range(1..=4), rng.random_range(1..=8), rng.random_range(1..=3));
    let sigma = rand_tensor(rng, &[r, n], 0.0, 5.0);
    let values = rand_tensor(rng, &[r, n, c], -1.0, 1.0);
    let deltas: Vec<f64> = (0..r * n).map(|_| rng.random_range(0.01..0.5)).collect();
    grad_check(|t, v| {
        let y = t.composite(v[0], v[1], deltas.clone())?;
        project(t, y)
    }, &[sigma, values])
}

fn tiny_encoder(rng: &mut Rng64) -> Result<Encoder<f64>> {
    let config = EncoderConfig {
        grid_dims: [4, 5, 4],
        grid_channels: 3,
        feature_dim: 4,
        hidden: 8,
        n_samples: 8,
        ..Default::default()
    };
    let mut enc = Encoder::<f64>::new(config, rng.random())?;
    // Spread densities so some samples are opaque and some empty.
    for name in ["density_grid", "color_grid", "rgb_head.b"] {
        let t = enc.params.get_mut(name).expect("encoder parameter");
        t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-2.0..2.0));
    }
    Ok(enc)
}

fn looking_at_box(rng: &mut Rng64, size: usize) -> Result<Camera> {
    let az: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let el: f64 = rng.random_range(-0.5..0.8);
    let eye = [2.5 * el.cos() * az.cos(), 2.5 * el.cos() * az.sin(), 2.5 * el.sin()];
    Camera::look_at(eye, [0.0; 3], [0.0, 0.0, 1.0], size, size, size as f64 * 0.9, 1.0, 4.0)
}

fn params_check<'p, F>(names: &[String], f: F, params: &'p [Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<'p, f64>, &Bound<'_>) -> Result<Var>,
{
    grad_check_sampled(|t, v| f(t, &Bound::from_vars(names, v.to_vec())), params, PARAM_COORDS, names.len() as u64)
}

/// Coordinates checked per parameter tensor in the model-level cases; the
/// discriminator alone has ~400k weights.
const PARAM_COORDS: usize = 32;

fn encoder_rays(rng: &mut Rng64) -> Result<f64> {
    let enc = tiny_encoder(rng)?;
    let cam = looking_at_box(rng, 4)?;
    let patch = PatchSpec { view: 0, x_low: 0, y_low: 0, side_low: 2, scale: 2 };
    let names = enc.params.names().to_vec();
    params_check(&names, |t, b| {
        let rays = enc.patch_rays::<Rng64>(&cam, &patch, None);
        let out = enc.render_rays(t, b, &rays)?;
        let all = t.concat(&[out.features, out.depth, out.rgb, out.acc], 1)?;
        project(t, all)
    }, enc.params.tensors())
}

fn tiny_decoder(rng: &mut Rng64, depth_modulation: bool, scale: usize) -> Result<Decoder<f64>> {
    let config = DecoderConfig { n_blocks: 2, channels: 4, scale, depth_modulation };
    let mut dec = Decoder::<f64>::new(config, 4, rng.random())?;
    // Move the modulators off their identity initialisation.
    for (name, t) in dec.params.names().to_vec().into_iter().zip(dec.params.tensors_mut()) {
        if name.starts_with("modulators") {
            t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.5..0.5));
        }
    }
    Ok(dec)
}

fn decoder(rng: &mut Rng64, depth_modulation: bool) -> Result<f64> {
    let dec = tiny_decoder(rng, depth_modulation, 2)?;
    let (h, w) = (rng.random_range(2..=4), rng.random_range(2..=4));
    let features = rand_tensor(rng, &[4, h, w], -1.0, 1.0);
    let depth = rand_tensor(rng, &[h, w], 1.2, 3.8);
    let mut inputs = vec![features, depth];
    inputs.extend(dec.params.tensors().iter().cloned());
    let names = dec.params.names().to_vec();
    grad_check(|t, v| {
        let b = Bound::from_vars(&names, v[2..].to_vec());
        let y = dec.decode(t, &b, v[0], v[1], 1.0, 4.0)?;
        project(t, y)
    }, &inputs)
}

fn pixel_loss(rng: &mut Rng64, f: fn(&mut Tape<'_, f64>, Var, Var) -> Result<Var>) -> Result<f64> {
    let shape = [3, rng.random_range(1..=5), rng.random_range(1..=5)];
    let gt = rand_tensor(rng, &shape, 0.0, 1.0);
    // Keep |pred - gt| away from the L1 kink.
    let pred = Tensor::from_fn(shape.to_vec(), |i| {
        let d: f64 = rng.random_range(0.02..0.5);
        gt.data()[i] + if rng.random_bool(0.5) { d } else { -d }
    });
    grad_check(|t, v| f(t, v[0], v[1]), &[pred, gt])
}

fn discriminator(rng: &mut Rng64) -> Result<f64> {
    let d = Discriminator::<f64>::new(16, rng.random());
    let real = rand_tensor(rng, &[3, 16, 16], 0.0, 1.0);
    let fake = rand_tensor(rng, &[3, 16, 16], 0.0, 1.0);
    let names = d.params.names().to_vec();
    let params: Vec<Tensor<f64>> = d.params.tensors().to_vec();
    params_check(&names, |t, b| {
        let (r, f) = (t.constant(real.clone()), t.constant(fake.clone()));
        losses::discriminator_loss(t, &d, b, r, f)
    }, &params)
}

fn generator(rng: &mut Rng64) -> Result<f64> {
    let d = Discriminator::<f64>::new(16, rng.random());
    let fake = rand_tensor(rng, &[3, 16, 16], 0.0, 1.0);
    grad_check_sampled(|t, v| {
        let b = d.params.bind_frozen(t);
        losses::generator_loss(t, &d, &b, v[0])
    }, &[fake], 256, 1)
}

fn perceptual(rng: &mut Rng64) -> Result<f64> {
    let phi = FilterBankExtractor::<f64>::default();
    let side = 4 * rng.random_range(2..=4);
    let pred = rand_tensor(rng, &[3, side, side], 0.0, 1.0);
    let gt = rand_tensor(rng, &[3, side, side], 0.0, 1.0);
    // The target is detached inside the loss, so only `pred` is checked.
    grad_check(|t, v| {
        let g = t.constant(gt.clone());
        losses::perceptual_loss(t, &phi, v[0], g)
    }, &[pred])
}

fn pipeline_pretrain(rng: &mut Rng64) -> Result<f64> {
    let enc = tiny_encoder(rng)?;
    let cam = looking_at_box(rng, 8)?;
    let patch = PatchSpec { view: 0, x_low: 1, y_low: 1, side_low: 2, scale: 2 };
    let target = rand_tensor(rng, &[3, 2, 2], 0.0, 1.0);
    let names = enc.params.names().to_vec();
    params_check(&names, |t, b| {
        let out = enc.render_patch_lowres::<Rng64>(t, b, &cam, &patch, None)?;
        let gt = t.constant(target.clone());
        losses::mse_loss(t, out.rgb_low, gt)
    }, enc.params.tensors())
}

/// Encoder, decoder and every loss term with positive weight; the
/// discriminator is frozen as in the generator update.
fn pipeline_joint(rng: &mut Rng64) -> Result<f64> {
    let enc = tiny_encoder(rng)?;
    let dec = tiny_decoder(rng, true, 4)?;
    let disc = Discriminator::<f64>::new(16, rng.random());
    let phi = FilterBankExtractor::<f64>::default();
    let cam = looking_at_box(rng, 16)?;
    let patch = PatchSpec { view: 0, x_low: 0, y_low: 0, side_low: 4, scale: 4 };
    let gt_full = rand_tensor(rng, &[3, 16, 16], 0.0, 1.0);
    let gt_low = rand_tensor(rng, &[3, 4, 4], 0.0, 1.0);
    let weights = LossWeights { l1: 1.0, adv: 0.3, perceptual: 0.5, mse_low: 1.0 };
    let mut all = ParamSet::new();
    for (n, t) in enc.params.iter().chain(dec.params.iter()) {
        all.insert(n, t.clone());
    }
    let names = all.names().to_vec();
    params_check(&names, |t, b| {
        let out = enc.render_patch_lowres::<Rng64>(t, b, &cam, &patch, None)?;
        let pred = dec.decode(t, b, out.feature_map, out.depth_map, cam.near, cam.far)?;
        let full = t.constant(gt_full.clone());
        let low = t.constant(gt_low.clone());
        let bd = disc.params.bind_frozen(t);
        let parts = LossParts {
            l1: Some(losses::l1_loss(t, pred, full)?),
            adv: Some(losses::generator_loss(t, &disc, &bd, pred)?),
            perceptual: Some(losses::perceptual_loss(t, &phi, pred, full)?),
            mse_low: Some(losses::mse_loss(t, out.rgb_low, low)?),
        };
        losses::total_loss(t, &weights, &parts)
    }, all.tensors())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_passes_a_few_instances() {
        for r in run_suite(None, 2).unwrap() {
            assert!(r.max_error < 1e-4, "{}/{}: {}", r.module, r.name, r.max_error);
        }
    }

    #[test]
    fn filter_selects_module_and_rejects_unknown() {
        let r = run_suite(Some("volume"), 1).unwrap();
        assert_eq!(r.iter().map(|c| c.name).collect::<Vec<_>>(), ["trilinear_sample", "composite"]);
        assert!(run_suite(Some("nope"), 1).is_err());
    }
}
