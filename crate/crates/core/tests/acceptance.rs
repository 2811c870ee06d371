//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria 4 and 5 share one training run on the desk toy scene, so a full
//! pass takes on the order of half an hour on one core. Pass a substring of a
//! criterion name to run only the matching ones.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;
use voxray::checkpoint::Container;
use voxray::gradcheck::run_suite;
use voxray::losses::{discriminator_loss, generator_loss, Discriminator};
use voxray::metrics::{evaluate, psnr, psnr_from_mse, ssim};
use voxray::render::Model;
use voxray::scene::image::Image;
use voxray::scene::toy::generate_toy_scene;
use voxray::scene::Dataset;
use voxray::trainer::{Adam, Phase, TrainConfig, Trainer};
use voxray::{Tape, Tensor};

const GRAD_TOL: f64 = 1e-4;
const GRAD_INSTANCES: usize = 20;
const GRAD_SECONDS: f64 = 120.0;
const CONSERVATION_TOL: f64 = 1e-6;
const CONSERVATION_RAYS: usize = 1000;
const ORACLE_TOL: f64 = 1e-6;
const ORACLE_INSTANCES: usize = 100;
const PRETRAIN_PSNR: f64 = 25.0;
const PRETRAIN_SECONDS: f64 = 600.0;
const UPLIFT_DB: f64 = 1.0;
const JOINT_SECONDS: f64 = 1800.0;
const GAN_ACCURACY: f64 = 0.95;
const GAN_STEPS: usize = 500;
const GAN_AVG_WINDOW: usize = 50;
const DETERMINISM_ITERS: usize = 100;

type Outcome = Result<String, String>;

fn main() {
    let criteria: Vec<(&str, fn() -> Outcome)> = vec![
        ("1 gradient suite", gradient_suite),
        ("2 compositing conservation", conservation),
        ("3 oracle equivalences", oracles),
        ("4 toy-scene encoder recovery", pretraining),
        ("5 joint-training uplift", joint_uplift),
        ("6 ablation hooks and strip tool", ablations),
        ("7 GAN smoke test", gan_smoke),
        ("8 determinism and resume", determinism),
        ("9 metric sanity", metric_sanity),
    ];
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failed = 0;
    for (name, f) in criteria {
        if filter.as_ref().is_some_and(|p| !name.contains(p.as_str())) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = t0.elapsed().as_secs_f64();
        let (tag, msg) = match outcome {
            Ok(m) => ("PASS", m),
            Err(m) => {
                failed += 1;
                ("FAIL", m)
            }
        };
        println!("{tag} [{name}] {msg} ({secs:.1}s)");
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

fn ensure(cond: bool, msg: String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg)
    }
}

fn rng(seed: u64) -> Xoshiro256StarStar {
    Xoshiro256StarStar::seed_from_u64(seed)
}

fn rand_tensor(r: &mut Xoshiro256StarStar, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| r.random_range(lo..hi))
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------- 1

fn gradient_suite() -> Outcome {
    let t0 = Instant::now();
    let results = run_suite(None, GRAD_INSTANCES).map_err(|e| e.to_string())?;
    let secs = t0.elapsed().as_secs_f64();
    let worst = results.iter().max_by(|a, b| a.max_error.total_cmp(&b.max_error)).unwrap();
    let bad: Vec<String> = results
        .iter()
        .filter(|r| !(r.max_error < GRAD_TOL) || r.instances < GRAD_INSTANCES)
        .map(|r| format!("{}/{} err {:.2e} over {}", r.module, r.name, r.max_error, r.instances))
        .collect();
    ensure(bad.is_empty(), format!("over tolerance {GRAD_TOL:e}: {}", bad.join(", ")))?;
    ensure(secs < GRAD_SECONDS, format!("suite took {secs:.1}s, limit {GRAD_SECONDS}s"))?;
    Ok(format!(
        "{} checks x {GRAD_INSTANCES} instances, worst {:.2e} ({}/{}) < {GRAD_TOL:e}, {secs:.1}s < {GRAD_SECONDS}s",
        results.len(),
        worst.max_error,
        worst.module,
        worst.name
    ))
}

// ---------------------------------------------------------------- 2

fn conservation() -> Outcome {
    let mut r = rng(2);
    let mut worst = 0.0f64;
    for ray in 0..CONSERVATION_RAYS {
        let n = r.random_range(1..160);
        // Mix empty space, moderate and near-opaque densities.
        let scale = [0.0, 0.1, 5.0, 1e3][ray % 4];
        let sigma: Vec<f64> = (0..n).map(|_| if r.random_bool(0.3) { 0.0 } else { r.random_range(0.0..1.0) * scale }).collect();
        let deltas: Vec<f64> = (0..n).map(|_| r.random_range(1e-3..0.2)).collect();
        let mut tape = Tape::<f64>::new();
        let s = tape.constant(Tensor::new([1, n], sigma).unwrap());
        let v = tape.constant(Tensor::full([1, n, 1], 1.0));
        let out = tape.composite(s, v, deltas).unwrap();
        let o = tape.value(out);
        worst = worst.max((o[0] + o[1] - 1.0).abs());
    }
    ensure(worst <= CONSERVATION_TOL, format!("max |sum w + T - 1| = {worst:.2e} > {CONSERVATION_TOL:e}"))?;
    Ok(format!("{CONSERVATION_RAYS} rays, max |sum w + T - 1| = {worst:.2e} <= {CONSERVATION_TOL:e}"))
}

// ---------------------------------------------------------------- 3

fn oracles() -> Outcome {
    let checks: [(&str, fn(u64) -> f64); 5] = [
        ("conv2d", conv_instance),
        ("trilinear_sample", trilinear_instance),
        ("upsample_bilinear2x", upsample_instance),
        ("ssim", ssim_instance),
        ("composite", composite_instance),
    ];
    let mut lines = Vec::new();
    for (name, f) in checks {
        let worst = (0..ORACLE_INSTANCES as u64).map(f).fold(0.0, f64::max);
        ensure(worst <= ORACLE_TOL, format!("{name}: max deviation {worst:.2e} > {ORACLE_TOL:e}"))?;
        lines.push(format!("{name} {worst:.1e}"));
    }
    Ok(format!("{ORACLE_INSTANCES} instances each within {ORACLE_TOL:e}: {}", lines.join(", ")))
}

/// Value of `sum(out * g)` gradients from the tape, for comparison with a
/// hand-written adjoint.
fn tape_grads(
    inputs: &[Tensor<f64>],
    f: impl for<'t> Fn(&mut Tape<'t, f64>, &[voxray::Var]) -> voxray::Var,
    g: &[f64],
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut tape = Tape::strict();
    let vars: Vec<_> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = f(&mut tape, &vars);
    let value = tape.value(out).to_vec();
    let gc = tape.constant(Tensor::new(tape.shape(out).to_vec(), g.to_vec()).unwrap());
    let p = tape.mul(out, gc).unwrap();
    let s = tape.sum(p).unwrap();
    let grads = tape.backward(s).unwrap();
    let gs = vars.iter().zip(inputs).map(|(v, t)| grads.get(*v).map_or(vec![0.0; t.numel()], <[f64]>::to_vec)).collect();
    (value, gs)
}

fn conv_instance(seed: u64) -> f64 {
    let mut r = rng(300 + seed);
    let ci = r.random_range(1..4);
    let co = r.random_range(1..4);
    let k = [1, 3, 5][r.random_range(0..3)];
    let stride = r.random_range(1..3);
    let h = r.random_range(k.max(2)..9);
    let w = r.random_range(k.max(2)..9);
    let x = rand_tensor(&mut r, &[ci, h, w], -1.0, 1.0);
    let kern = rand_tensor(&mut r, &[co, ci, k, k], -1.0, 1.0);
    let bias = rand_tensor(&mut r, &[co], -1.0, 1.0);
    let pad = k / 2;
    let (ho, wo) = (h.div_ceil(stride), w.div_ceil(stride));
    let g: Vec<f64> = (0..co * ho * wo).map(|_| r.random_range(-1.0..1.0)).collect();

    let (xv, kv, bv) = (x.data(), kern.data(), bias.data());
    let mut out = vec![0.0; co * ho * wo];
    let mut gx = vec![0.0; xv.len()];
    let mut gk = vec![0.0; kv.len()];
    let mut gb = vec![0.0; co];
    for o in 0..co {
        for oy in 0..ho {
            for ox in 0..wo {
                let oi = (o * ho + oy) * wo + ox;
                let mut acc = bv[o];
                gb[o] += g[oi];
                for c in 0..ci {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let xi = (c * h + iy as usize) * w + ix as usize;
                            let ki = ((o * ci + c) * k + ky) * k + kx;
                            acc += xv[xi] * kv[ki];
                            gx[xi] += g[oi] * kv[ki];
                            gk[ki] += g[oi] * xv[xi];
                        }
                    }
                }
                out[oi] = acc;
            }
        }
    }
    let (value, grads) = tape_grads(
        &[x.clone(), kern.clone(), bias.clone()],
        |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride).unwrap(),
        &g,
    );
    [max_diff(&value, &out), max_diff(&grads[0], &gx), max_diff(&grads[1], &gk), max_diff(&grads[2], &gb)]
        .into_iter()
        .fold(0.0, f64::max)
}

fn trilinear_instance(seed: u64) -> f64 {
    let mut r = rng(400 + seed);
    let c = r.random_range(1..4);
    let grid = rand_tensor(&mut r, &[4, 4, 4, c], -1.0, 1.0);
    let p = r.random_range(1..12);
    // Some queries fall outside [0, 3] and must read zero.
    let pts: Vec<f64> = (0..3 * p).map(|_| r.random_range(-0.3..3.3)).collect();
    let g: Vec<f64> = (0..p * c).map(|_| r.random_range(-1.0..1.0)).collect();

    let gv = grid.data();
    let mut out = vec![0.0; p * c];
    let mut gg = vec![0.0; gv.len()];
    for q in 0..p {
        let x = &pts[3 * q..3 * q + 3];
        if x.iter().any(|v| !(0.0..=3.0).contains(v)) {
            continue;
        }
        for i in 0..4 {
            for j in 0..4 {
                for l in 0..4 {
                    let w = (1.0 - (x[0] - i as f64).abs()).max(0.0)
                        * (1.0 - (x[1] - j as f64).abs()).max(0.0)
                        * (1.0 - (x[2] - l as f64).abs()).max(0.0);
                    for ch in 0..c {
                        let gi = ((i * 4 + j) * 4 + l) * c + ch;
                        out[q * c + ch] += w * gv[gi];
                        gg[gi] += w * g[q * c + ch];
                    }
                }
            }
        }
    }
    let (value, grads) = tape_grads(&[grid.clone()], |t, v| t.trilinear_sample(v[0], &pts).unwrap(), &g);
    max_diff(&value, &out).max(max_diff(&grads[0], &gg))
}

fn upsample_instance(seed: u64) -> f64 {
    let mut r = rng(500 + seed);
    let c = r.random_range(1..4);
    let h = r.random_range(1..7);
    let w = r.random_range(1..7);
    let x = rand_tensor(&mut r, &[c, h, w], -1.0, 1.0);
    let g: Vec<f64> = (0..c * 4 * h * w).map(|_| r.random_range(-1.0..1.0)).collect();
    // Half-pixel source coordinate, clamped to the image.
    let src = |o: usize, n: usize| ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n - 1) as f64);
    let xv = x.data();
    let mut out = vec![0.0; c * 4 * h * w];
    let mut gx = vec![0.0; xv.len()];
    for ch in 0..c {
        for oy in 0..2 * h {
            for ox in 0..2 * w {
                let (sy, sx) = (src(oy, h), src(ox, w));
                let oi = (ch * 2 * h + oy) * 2 * w + ox;
                for iy in 0..h {
                    for ix in 0..w {
                        let wt = (1.0 - (sy - iy as f64).abs()).max(0.0) * (1.0 - (sx - ix as f64).abs()).max(0.0);
                        let xi = (ch * h + iy) * w + ix;
                        out[oi] += wt * xv[xi];
                        gx[xi] += wt * g[oi];
                    }
                }
            }
        }
    }
    let (value, grads) = tape_grads(&[x.clone()], |t, v| t.upsample_bilinear2x(v[0]).unwrap(), &g);
    max_diff(&value, &out).max(max_diff(&grads[0], &gx))
}

fn random_image(r: &mut Xoshiro256StarStar, w: usize, h: usize) -> Image {
    Image::from_fn(w, h, |_, _| [r.random::<f32>(), r.random::<f32>(), r.random::<f32>()])
}

fn ssim_instance(seed: u64) -> f64 {
    let mut r = rng(600 + seed);
    let (w, h) = (r.random_range(11..24), r.random_range(11..24));
    let a = random_image(&mut r, w, h);
    // Correlated partner: a blend of `a` and noise.
    let t: f32 = r.random();
    let noise = random_image(&mut r, w, h);
    let b = Image::from_fn(w, h, |x, y| {
        let (p, q) = (a.pixel(x, y), noise.pixel(x, y));
        [0, 1, 2].map(|i| t * p[i] + (1.0 - t) * q[i])
    });
    let luma = |img: &Image, x: usize, y: usize| {
        let p = img.pixel(x, y);
        0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64
    };
    let mut kernel = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (i, row) in kernel.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(dx * dx + dy * dy) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut sum = 0.0;
    let mut count = 0;
    for y0 in 0..=h - 11 {
        for x0 in 0..=w - 11 {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let k = kernel[i][j] / total;
                    let (va, vb) = (luma(&a, x0 + j, y0 + i), luma(&b, x0 + j, y0 + i));
                    ma += k * va;
                    mb += k * vb;
                    saa += k * va * va;
                    sbb += k * vb * vb;
                    sab += k * va * vb;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            sum += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    (ssim(&a, &b).unwrap() - sum / count as f64).abs()
}

/// The fused op against the same rendering built from exp, products and
/// sums on the tape, forward and backward.
fn composite_instance(seed: u64) -> f64 {
    let mut r = rng(700 + seed);
    let rays = r.random_range(1..4);
    let n = r.random_range(1..9);
    let c = r.random_range(1..4);
    let sigma = Tensor::from_fn([rays, n], |_| if r.random_bool(0.2) { 0.0 } else { r.random_range(0.0..4.0) });
    let values = rand_tensor(&mut r, &[rays, n, c], -1.0, 1.0);
    let deltas: Vec<f64> = (0..rays * n).map(|_| r.random_range(0.05..0.5)).collect();
    let g: Vec<f64> = (0..rays * (c + 1)).map(|_| r.random_range(-1.0..1.0)).collect();
    let d2 = deltas.clone();
    let fused = tape_grads(&[sigma.clone(), values.clone()], move |t, v| t.composite(v[0], v[1], d2.clone()).unwrap(), &g);
    let composed = tape_grads(
        &[sigma, values],
        |t, v| {
            let mut rows = Vec::new();
            for ray in 0..rays {
                let s = t.narrow(v[0], 0, ray, 1).unwrap();
                let vals = t.narrow(v[1], 0, ray, 1).unwrap();
                let mut trans = t.constant(Tensor::full([1], 1.0));
                let mut acc = t.constant(Tensor::zeros([1, c]));
                for i in 0..n {
                    let si = t.narrow(s, 1, i, 1).unwrap();
                    let si = t.reshape(si, &[1]).unwrap();
                    let od = t.mul_scalar(si, -deltas[ray * n + i]).unwrap();
                    let keep = t.exp(od).unwrap();
                    let alpha = t.neg(keep).unwrap();
                    let alpha = t.add_scalar(alpha, 1.0).unwrap();
                    let wgt = t.mul(trans, alpha).unwrap();
                    let vi = t.narrow(vals, 1, i, 1).unwrap();
                    let vi = t.reshape(vi, &[1, c]).unwrap();
                    let contrib = t.mul(vi, wgt).unwrap();
                    acc = t.add(acc, contrib).unwrap();
                    trans = t.mul(trans, keep).unwrap();
                }
                let tr = t.reshape(trans, &[1, 1]).unwrap();
                rows.push(t.concat(&[acc, tr], 1).unwrap());
            }
            t.concat(&rows, 0).unwrap()
        },
        &g,
    );
    let mut worst = max_diff(&fused.0, &composed.0);
    for (a, b) in fused.1.iter().zip(&composed.1) {
        worst = worst.max(max_diff(a, b));
    }
    worst
}

// ---------------------------------------------------------------- 4, 5

struct TrainingRun {
    pretrain_iters: usize,
    pretrain_secs: f64,
    psnr_low: f64,
    joint_iters: usize,
    joint_secs: f64,
    psnr: f64,
    psnr_bicubic: f64,
}

/// Desk profile with lambda = (1, 0, 0, 1), pretraining then joint training,
/// evaluated on the held-out views after each phase. Shared by 4 and 5.
fn training_run() -> Result<&'static TrainingRun, String> {
    static RUN: OnceLock<Result<TrainingRun, String>> = OnceLock::new();
    RUN.get_or_init(|| {
        let err = |e: voxray::Error| e.to_string();
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        generate_toy_scene(dir.path(), 20, 128, 0).map_err(err)?;
        let mut config = TrainConfig::desk();
        config.weights.l1 = 1.0;
        config.weights.adv = 0.0;
        config.weights.perceptual = 0.0;
        config.weights.mse_low = 1.0;
        config.log_interval = 0;
        let train = Dataset::load(dir.path(), config.scale).map_err(err)?;
        let test = Dataset::load_split(dir.path(), "test", config.scale).map_err(err)?;
        let mut trainer = Trainer::new(config.clone(), &train).map_err(err)?;

        let t0 = Instant::now();
        trainer.run(&train, None, Some(config.pretrain_iters)).map_err(err)?;
        let pretrain_secs = t0.elapsed().as_secs_f64();
        let model = Model::from_container(&trainer.to_container().map_err(err)?).map_err(err)?;
        let pre = evaluate(&model, &test, 4096).map_err(err)?;

        let t1 = Instant::now();
        trainer.run(&train, None, None).map_err(err)?;
        let joint_secs = t1.elapsed().as_secs_f64();
        let model = Model::from_container(&trainer.to_container().map_err(err)?).map_err(err)?;
        let joint = evaluate(&model, &test, 4096).map_err(err)?;
        Ok(TrainingRun {
            pretrain_iters: config.pretrain_iters,
            pretrain_secs,
            psnr_low: pre.mean_psnr_low,
            joint_iters: config.joint_iters,
            joint_secs,
            psnr: joint.mean_psnr,
            psnr_bicubic: joint.mean_psnr_bicubic,
        })
    })
    .as_ref()
    .map_err(Clone::clone)
}

fn pretraining() -> Outcome {
    let r = training_run()?;
    let msg = format!(
        "{} iters: held-out low-res PSNR {:.2} dB (>= {PRETRAIN_PSNR}), {:.0}s (< {PRETRAIN_SECONDS}s)",
        r.pretrain_iters, r.psnr_low, r.pretrain_secs
    );
    ensure(r.psnr_low >= PRETRAIN_PSNR && r.pretrain_secs < PRETRAIN_SECONDS, msg.clone())?;
    Ok(msg)
}

fn joint_uplift() -> Outcome {
    let r = training_run()?;
    let uplift = r.psnr - r.psnr_bicubic;
    let msg = format!(
        "{} iters: held-out full-res PSNR {:.2} dB vs bicubic {:.2} dB, uplift {uplift:.2} dB (>= {UPLIFT_DB}), {:.0}s (< {JOINT_SECONDS}s)",
        r.joint_iters, r.psnr, r.psnr_bicubic, r.joint_secs
    );
    ensure(uplift >= UPLIFT_DB && r.joint_secs < JOINT_SECONDS, msg.clone())?;
    Ok(msg)
}

// ---------------------------------------------------------------- 6

fn voxray(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_voxray")).args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("voxray {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)))
    }
}

const SMALL_CONFIG: &str = r#""encoder": {"grid_dims": [16, 16, 16], "n_samples": 24, "hidden": 16},
    "decoder": {"n_blocks": 1, "channels": 8}, "patch_size": 16, "pretrain_iters": 20, "joint_iters": 20,
    "pretrain_batch": 1, "log_interval": 0, "weights": {"l1": 1, "adv": 0.02, "perceptual": 0.5, "mse_low": 1}"#;

fn ablations() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let s = |p: &str| d.join(p).to_string_lossy().into_owned();
    voxray(&["gen-scene", "--out", &s("scene"), "--views", "6", "--res", "32", "--seed", "3"])?;
    let variants = [
        ("full", ""),
        ("no_joint", r#", "joint_flow": false"#),
        ("no_depth", r#", "decoder": {"n_blocks": 1, "channels": 8, "depth_modulation": false}"#),
    ];
    let mut ckpts = Vec::new();
    for (name, extra) in variants {
        fs::write(d.join(format!("{name}.json")), format!("{{{SMALL_CONFIG}{extra}}}")).map_err(|e| e.to_string())?;
        voxray(&["train", "--config", &s(&format!("{name}.json")), "--data", &s("scene"), "--out", &s(&format!("{name}.ckpt"))])?;
        let bytes = fs::read(d.join(format!("{name}.ckpt"))).map_err(|e| e.to_string())?;
        let c = Container::from_bytes(&bytes).map_err(|e| e.to_string())?;
        let t = Trainer::from_container(&c).map_err(|e| e.to_string())?;
        ensure(t.progress.phase == Phase::Done, format!("{name} did not finish"))?;
        ckpts.push((name, bytes, t));
    }
    let (full, full_t) = (&ckpts[0].1, &ckpts[0].2);
    ensure(full_t.config.joint_flow && full_t.config.decoder.depth_modulation, "full config flags".into())?;
    ensure(ckpts[1].2.config.joint_flow == false, "joint_flow flag not stored".into())?;
    ensure(!ckpts[2].2.config.decoder.depth_modulation, "depth_modulation flag not stored".into())?;
    for (name, bytes, t) in &ckpts[1..] {
        ensure(bytes != full, format!("{name} checkpoint identical to full"))?;
        ensure(t.encoder.params != full_t.encoder.params || t.decoder.params != full_t.decoder.params, format!("{name} weights identical to full"))?;
    }

    // Pose sweep rendered through the CLI, then stacked into a strip.
    voxray(&["render", "--ckpt", &s("full.ckpt"), "--manifest", &s("scene/transforms_sweep.json"), "--out", &s("sweep")])?;
    let frames = fs::read_dir(d.join("sweep")).map_err(|e| e.to_string())?.count();
    voxray(&["strip", "--frames", &s("sweep"), "--column", "16", "--out", &s("strip.png")])?;
    let strip = Image::load_png(&d.join("strip.png")).map_err(|e| e.to_string())?;
    ensure(frames >= 2 && strip.width() == frames && strip.height() == 32, format!("strip {}x{} from {frames} frames", strip.width(), strip.height()))?;
    Ok(format!(
        "joint_flow=false and depth_modulation=false checkpoints differ from full; strip {}x{} from {frames} sweep frames",
        strip.width(),
        strip.height()
    ))
}

// ---------------------------------------------------------------- 7

/// A free per-pixel generator `sigmoid(theta)` starting near white against
/// dark real patches.
fn gan_smoke() -> Outcome {
    const P: usize = 16;
    let mut r = rng(7);
    let mut disc = Discriminator::<f32>::new(P, 7);
    let mut d_opt = Adam::for_all(&disc.params, 2e-4, |_| false);
    let mut gen = voxray::nn::ParamSet::<f32>::new();
    gen.insert("theta", Tensor::from_fn([3, P, P], |_| 2.0 + r.random_range(-0.1f32..0.1)));
    let mut g_opt = Adam::for_all(&gen, 2e-2, |_| false);
    let mut best_acc = 0.0f64;
    let mut first_hit = None;
    let mut g_losses = Vec::with_capacity(GAN_STEPS);
    for step in 0..GAN_STEPS {
        let real = Tensor::from_fn([3, P, P], |_| r.random_range(0.0f32..0.2));
        // Discriminator step.
        let (acc, dg) = {
            let mut tape = Tape::new();
            let bd = disc.params.bind(&mut tape);
            let bg = gen.bind_frozen(&mut tape);
            let fake = tape.sigmoid(bg.var("theta")).unwrap();
            let real_v = tape.constant(real.clone());
            let lr = disc.forward(&mut tape, &bd, real_v).unwrap();
            let lf = disc.forward(&mut tape, &bd, fake).unwrap();
            let (vr, vf) = (tape.value(lr), tape.value(lf));
            let correct = vr.iter().filter(|v| **v > 0.0).count() + vf.iter().filter(|v| **v < 0.0).count();
            let acc = correct as f64 / (vr.len() + vf.len()) as f64;
            let loss = discriminator_loss(&mut tape, &disc, &bd, real_v, fake).unwrap();
            let mut g = tape.backward(loss).unwrap();
            (acc, bd.grads(&mut g))
        };
        d_opt.step(&mut disc.params, &dg);
        if acc >= GAN_ACCURACY && first_hit.is_none() {
            first_hit = Some(step);
        }
        best_acc = best_acc.max(acc);
        // Generator step against the updated, frozen discriminator.
        let (gl, gg) = {
            let mut tape = Tape::new();
            let bd = disc.params.bind_frozen(&mut tape);
            let bg = gen.bind(&mut tape);
            let fake = tape.sigmoid(bg.var("theta")).unwrap();
            let loss = generator_loss(&mut tape, &disc, &bd, fake).unwrap();
            let mut g = tape.backward(loss).unwrap();
            (tape.item(loss) as f64, bg.grads(&mut g))
        };
        g_opt.step(&mut gen, &gg);
        g_losses.push(gl);
    }
    let avg = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let peak = g_losses.windows(GAN_AVG_WINDOW).map(avg).fold(f64::MIN, f64::max);
    let last = avg(&g_losses[GAN_STEPS - GAN_AVG_WINDOW..]);
    let msg = format!(
        "D accuracy {:.3} first >= {GAN_ACCURACY} at step {}; G loss moving average (window {GAN_AVG_WINDOW}) peak {peak:.3} -> final {last:.3}",
        best_acc,
        first_hit.map_or("never".into(), |s| s.to_string())
    );
    ensure(first_hit.is_some() && last < peak, msg.clone())?;
    Ok(msg)
}

// ---------------------------------------------------------------- 8

fn small_trainer_config() -> TrainConfig {
    let mut c = TrainConfig::from_json(&format!("{{{SMALL_CONFIG}}}")).unwrap();
    c.pretrain_iters = DETERMINISM_ITERS / 2;
    c.joint_iters = DETERMINISM_ITERS / 2;
    c
}

fn determinism() -> Outcome {
    let ds = voxray::scene::toy::ToyScene::new(4, 32, 11).unwrap().dataset("train", 2).unwrap();
    let run = || {
        let mut t = Trainer::new(small_trainer_config(), &ds).unwrap();
        t.run(&ds, None, None).unwrap();
        (t.loss_trace.clone(), t.to_container().unwrap().to_bytes())
    };
    let (trace_a, bytes_a) = run();
    let (trace_b, bytes_b) = run();
    ensure(trace_a.len() == DETERMINISM_ITERS, format!("ran {} iterations", trace_a.len()))?;
    let bits = |t: &[f64]| t.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    ensure(bits(&trace_a) == bits(&trace_b), "same-seed loss traces differ".into())?;
    ensure(bytes_a == bytes_b, "same-seed checkpoints differ".into())?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("mid.ckpt");
    let mut resumed_trace = Vec::new();
    for cut in [30, 70] {
        let mut t = match resumed_trace.is_empty() {
            true => Trainer::new(small_trainer_config(), &ds).unwrap(),
            false => Trainer::load(&path).unwrap(),
        };
        let steps = cut - t.global_step();
        t.run(&ds, Some(&path), Some(steps)).unwrap();
        resumed_trace.extend(t.loss_trace);
    }
    let mut t = Trainer::load(&path).unwrap();
    t.run(&ds, None, None).unwrap();
    resumed_trace.extend(t.loss_trace.iter().copied());
    ensure(bits(&resumed_trace) == bits(&trace_a), "resumed loss trace differs from the uninterrupted run".into())?;
    ensure(t.to_container().unwrap().to_bytes() == bytes_a, "resumed final state differs".into())?;
    Ok(format!("{DETERMINISM_ITERS} iterations bit-identical across runs; resume at 30 and 70 reproduces the trace and final state"))
}

// ---------------------------------------------------------------- 9

fn metric_sanity() -> Outcome {
    ensure(psnr_from_mse(0.01) == 20.0, format!("psnr_from_mse(0.01) = {}", psnr_from_mse(0.01)))?;
    let a = Image::filled(16, 16, [0.25, 0.5, 0.75]);
    let b = Image::filled(16, 16, [0.35, 0.6, 0.85]);
    let p = psnr(&a, &b).unwrap();
    ensure((p - 20.0).abs() < 1e-5, format!("psnr at mse 0.01 on f32 images = {p}"))?;
    ensure(ssim(&a, &a).unwrap() == 1.0, "ssim(a, a) != 1 on a constant image".into())?;

    let mut runner = TestRunner::new(PropConfig { cases: 256, failure_persistence: None, ..PropConfig::default() });
    runner
        .run(&(1e-8f64..1.0), |mse| {
            let expected = -10.0 * mse.log10();
            prop_assert!((psnr_from_mse(mse) - expected).abs() < 1e-9);
            prop_assert!(psnr_from_mse(mse / 10.0) > psnr_from_mse(mse));
            Ok(())
        })
        .map_err(|e| format!("psnr property: {e}"))?;
    let mut runner = TestRunner::new(PropConfig { cases: 64, failure_persistence: None, ..PropConfig::default() });
    runner
        .run(&(11usize..24, 11usize..24, any::<u64>()), |(w, h, seed)| {
            let img = random_image(&mut rng(seed), w, h);
            prop_assert!((ssim(&img, &img).unwrap() - 1.0).abs() < 1e-12);
            prop_assert!(psnr(&img, &img).unwrap() == 99.0);
            Ok(())
        })
        .map_err(|e| format!("ssim property: {e}"))?;
    Ok("psnr(mse 0.01) = 20 exactly; ssim(a, a) = 1 and psnr(a, a) capped, property-tested".into())
}
