//! Encoder pretraining followed by joint encoder/decoder training on
//! sampled patches.

mod adam;
mod config;

use std::path::Path;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};

pub use adam::{clip_grad_norm, grad_norm, Adam, BETA1, BETA2, EPS};
pub use config::{Profile, TrainConfig};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::Container;
use crate::decoder::Decoder;
use crate::encoder::{Encoder, COLOR_GRID, DENSITY_GRID};
use crate::error::{Error, Result};
use crate::losses::{
    self, ConvStackExtractor, Discriminator, FeatureExtractor, FilterBankExtractor, LossParts,
};
use crate::scene::{build_patch_set, Dataset, PatchSpec};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Joint,
    Done,
}

/// Where training stands; stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub phase: Phase,
    /// Iterations completed within `phase`.
    pub iteration: usize,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
    /// First joint-phase loss, the reference for the divergence warning.
    pub initial_loss: Option<f64>,
    /// Consecutive joint iterations with loss above ten times the initial one.
    pub above: usize,
    /// Whether the decoder's input conv has been rescaled to the encoder's
    /// feature range (done once, before the first joint step).
    #[serde(default)]
    pub input_scaled: bool,
}

/// Losses of one iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub total: f64,
    pub discriminator: Option<f64>,
}

fn sub_seed(seed: u64, k: u64) -> u64 {
    seed ^ k.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

const DIVERGENCE_FACTOR: f64 = 10.0;
const DIVERGENCE_WINDOW: usize = 500;
const CALIBRATION_PATCHES: usize = 16;

pub struct Trainer {
    pub config: TrainConfig,
    pub encoder: Encoder<f32>,
    pub decoder: Decoder<f32>,
    pub discriminator: Option<Discriminator<f32>>,
    pub progress: Progress,
    pub rng: Xoshiro256StarStar,
    /// Total loss of every iteration run by this instance.
    pub loss_trace: Vec<f64>,
    pre_grid: Option<Adam<f32>>,
    pre_mlp: Option<Adam<f32>>,
    enc_opt: Option<Adam<f32>>,
    dec_opt: Option<Adam<f32>>,
    disc_opt: Option<Adam<f32>>,
    extractor: Option<Box<dyn FeatureExtractor<f32>>>,
}

fn is_grid(name: &str) -> bool {
    name == DENSITY_GRID || name == COLOR_GRID
}

impl Trainer {
    pub fn new(config: TrainConfig, ds: &Dataset) -> Result<Self> {
        config.validate()?;
        keep_heap_resident();
        if ds.scale != config.scale {
            return Err(Error::InvalidArgument(format!(
                "dataset was loaded with upscale factor {}, config uses {}",
                ds.scale, config.scale
            )));
        }
        let cam = &ds.views[0].camera;
        let progress = Progress {
            phase: Phase::Pretrain,
            iteration: 0,
            width: cam.width,
            height: cam.height,
            near: cam.near,
            far: cam.far,
            initial_loss: None,
            above: 0,
            input_scaled: false,
        };
        Self::fresh(config, progress)
    }

    fn fresh(config: TrainConfig, progress: Progress) -> Result<Self> {
        let seed = config.seed;
        let encoder = Encoder::new(config.encoder.clone(), sub_seed(seed, 1))?;
        let decoder = Decoder::new(config.decoder.clone(), config.encoder.feature_dim, sub_seed(seed, 2))?;
        let discriminator =
            (config.weights.adv > 0.0).then(|| Discriminator::new(config.patch_size, sub_seed(seed, 3)));
        let mut t = Self {
            rng: Xoshiro256StarStar::seed_from_u64(sub_seed(seed, 4)),
            config,
            encoder,
            decoder,
            discriminator,
            progress,
            loss_trace: Vec::new(),
            pre_grid: None,
            pre_mlp: None,
            enc_opt: None,
            dec_opt: None,
            disc_opt: None,
            extractor: None,
        };
        t.enter_phase()?;
        Ok(t)
    }

    /// Builds the optimizers (and extractor) the current phase needs and
    /// drops the others.
    fn enter_phase(&mut self) -> Result<()> {
        let p = &self.encoder.params;
        match self.progress.phase {
            Phase::Pretrain => {
                let (grids, mlp): (Vec<usize>, Vec<usize>) = (0..p.len()).partition(|i| is_grid(&p.names()[*i]));
                self.pre_grid.get_or_insert_with(|| Adam::new(p, grids, self.config.pretrain_lr_grid, is_grid));
                self.pre_mlp.get_or_insert_with(|| Adam::new(p, mlp, self.config.pretrain_lr_mlp, is_grid));
            }
            Phase::Joint => {
                self.pre_grid = None;
                self.pre_mlp = None;
                self.enc_opt.get_or_insert_with(|| Adam::for_all(p, self.config.lr_encoder, is_grid));
                self.dec_opt
                    .get_or_insert_with(|| Adam::for_all(&self.decoder.params, self.config.lr_decoder, |_| false));
                if let Some(d) = &self.discriminator {
                    self.disc_opt.get_or_insert_with(|| Adam::for_all(&d.params, self.config.lr_decoder, |_| false));
                }
                if self.config.weights.perceptual > 0.0 && self.extractor.is_none() {
                    self.extractor = Some(match &self.config.feature_extractor {
                        Some(path) => Box::new(ConvStackExtractor::<f32>::load(Path::new(path))?),
                        None => Box::new(FilterBankExtractor::<f32>::default()),
                    });
                }
            }
            // A finished run keeps the weights only, so resuming it is a no-op.
            Phase::Done => {
                self.pre_grid = None;
                self.pre_mlp = None;
                self.enc_opt = None;
                self.dec_opt = None;
                self.disc_opt = None;
            }
        }
        Ok(())
    }

    /// True once the discriminator or feature extractor has been built.
    pub fn has_adversary(&self) -> bool {
        self.discriminator.is_some()
    }

    pub fn has_extractor(&self) -> bool {
        self.extractor.is_some()
    }

    /// Iterations completed over both phases.
    pub fn global_step(&self) -> usize {
        match self.progress.phase {
            Phase::Pretrain => self.progress.iteration,
            Phase::Joint => self.config.pretrain_iters + self.progress.iteration,
            Phase::Done => self.config.pretrain_iters + self.config.joint_iters,
        }
    }

    fn advance_phase(&mut self) -> Result<bool> {
        let before = self.progress.phase;
        loop {
            let next = match self.progress.phase {
                Phase::Pretrain if self.progress.iteration >= self.config.pretrain_iters => Phase::Joint,
                Phase::Joint if self.progress.iteration >= self.config.joint_iters => Phase::Done,
                _ => break,
            };
            self.progress.phase = next;
            self.progress.iteration = 0;
        }
        if self.progress.phase != before {
            self.enter_phase()?;
        }
        Ok(self.progress.phase != Phase::Done)
    }

    /// Runs up to `max_steps` iterations (all remaining when `None`),
    /// saving to `checkpoint` at the configured interval and at the end.
    pub fn run(&mut self, ds: &Dataset, checkpoint: Option<&Path>, max_steps: Option<usize>) -> Result<()> {
        let patches = self.patch_set(ds)?;
        let mut done = 0;
        while self.advance_phase()? && max_steps.is_none_or(|m| done < m) {
            let loss = match self.progress.phase {
                Phase::Pretrain => self.pretrain_step(ds, &patches)?,
                Phase::Joint => {
                    if !self.progress.input_scaled {
                        self.scale_decoder_input(ds, &patches)?;
                    }
                    self.joint_step(ds, &patches)?
                }
                Phase::Done => unreachable!(),
            };
            self.progress.iteration += 1;
            self.loss_trace.push(loss.total);
            done += 1;
            let step = self.global_step();
            if self.config.log_interval > 0 && self.progress.iteration % self.config.log_interval == 0 {
                match (self.progress.phase, loss.discriminator) {
                    (Phase::Pretrain, _) => info!(
                        "pretrain iter {} loss {:.6} psnr {:.2}",
                        self.progress.iteration,
                        loss.total,
                        -10.0 * loss.total.log10()
                    ),
                    (_, Some(d)) => info!("joint iter {} loss {:.6} loss_d {:.6}", self.progress.iteration, loss.total, d),
                    _ => info!("joint iter {} loss {:.6}", self.progress.iteration, loss.total),
                }
            }
            if let Some(path) = checkpoint {
                if self.config.checkpoint_interval > 0 && step % self.config.checkpoint_interval == 0 {
                    self.save(path)?;
                    info!("checkpoint at iteration {step} written to {}", path.display());
                }
            }
        }
        self.advance_phase()?;
        if let Some(path) = checkpoint {
            self.save(path)?;
            info!("checkpoint at iteration {} written to {}", self.global_step(), path.display());
        }
        Ok(())
    }

    pub fn patch_set(&self, ds: &Dataset) -> Result<Vec<PatchSpec>> {
        let (w, h) = (ds.views[0].camera.width, ds.views[0].camera.height);
        if ds.scale != self.config.scale {
            return Err(Error::InvalidArgument(format!(
                "dataset upscale factor {} differs from the checkpoint's {}",
                ds.scale, self.config.scale
            )));
        }
        build_patch_set(ds.views.len(), w, h, self.config.patch_size, self.config.scale)
    }

    /// Divides the decoder's input conv weights by the largest feature
    /// magnitude over a fixed spread of training patches (never scaling up).
    /// A pretrained encoder emits features in the tens; fed straight in,
    /// most output pixels start in the flat tails of the sigmoid and the
    /// decoder settles on a constant white image.
    pub fn scale_decoder_input(&mut self, ds: &Dataset, patches: &[PatchSpec]) -> Result<f32> {
        let n = patches.len().min(CALIBRATION_PATCHES);
        let mut peak = 0f32;
        for k in 0..n {
            let patch = patches[k * patches.len() / n];
            let mut tape = Tape::new();
            let b = self.encoder.params.bind(&mut tape);
            let out = self
                .encoder
                .render_patch_lowres::<Xoshiro256StarStar>(&mut tape, &b, &ds.views[patch.view].camera, &patch, None)?;
            peak = tape.value(out.feature_map).iter().fold(peak, |m, v| m.max(v.abs()));
        }
        let s = if peak > 1.0 { peak.recip() } else { 1.0 };
        if let Some(w) = self.decoder.params.get_mut("decoder.conv_in.w") {
            w.data_mut().iter_mut().for_each(|v| *v *= s);
        }
        self.progress.input_scaled = true;
        info!("decoder input scaled by {s:.4} (peak feature {peak:.2})");
        Ok(s)
    }

    fn diverged(&self, loss: f64, lr: f64, grad_norm: f64) -> Error {
        Error::Diverged { iteration: self.global_step(), loss, lr, grad_norm }
    }

    /// One encoder-only step: MSE of the RGB head on random low-res patches.
    pub fn pretrain_step(&mut self, ds: &Dataset, patches: &[PatchSpec]) -> Result<StepLoss> {
        let mut rays = Vec::new();
        let mut target = Vec::new();
        for _ in 0..self.config.pretrain_batch {
            let patch = patches[self.rng.random_range(0..patches.len())];
            let view = &ds.views[patch.view];
            rays.extend(self.encoder.patch_rays(&view.camera, &patch, Some(&mut self.rng)));
            let low = &view.pixels_low;
            for y in patch.y_low..patch.y_low + patch.side_low {
                for x in patch.x_low..patch.x_low + patch.side_low {
                    target.extend_from_slice(&low.pixel(x, y));
                }
            }
        }
        let n = rays.len();
        let (loss, mut grads) = {
            let mut tape = Tape::new();
            let b = self.encoder.params.bind(&mut tape);
            let out = self.encoder.render_rays(&mut tape, &b, &rays)?;
            let t = tape.constant(Tensor::new([n, 3], target)?);
            let loss = losses::mse_loss(&mut tape, out.rgb, t)?;
            let mut g = tape.backward(loss)?;
            (tape.item(loss) as f64, b.grads(&mut g))
        };
        let norm = clip_grad_norm(&mut [&mut grads], self.config.grad_clip);
        if !loss.is_finite() || !norm.is_finite() {
            return Err(self.diverged(loss, self.config.pretrain_lr_grid, norm));
        }
        let params = &mut self.encoder.params;
        self.pre_grid.as_mut().expect("pretrain optimizer").step(params, &grads);
        self.pre_mlp.as_mut().expect("pretrain optimizer").step(params, &grads);
        Ok(StepLoss { total: loss, discriminator: None })
    }

    /// One joint step on `joint_batch` patches, followed by a discriminator
    /// step when the adversarial weight is positive.
    pub fn joint_step(&mut self, ds: &Dataset, patches: &[PatchSpec]) -> Result<StepLoss> {
        let w = self.config.weights;
        let use_decoder = w.uses_decoder();
        let mut reals = Vec::new();
        let mut fakes = Vec::new();
        let (loss, mut ge, gd) = {
            let mut tape = Tape::new();
            let be = self.encoder.params.bind(&mut tape);
            let bd = use_decoder.then(|| self.decoder.params.bind(&mut tape));
            let bdisc = self.discriminator.as_ref().map(|d| d.params.bind_frozen(&mut tape));
            let mut total: Option<Var> = None;
            for _ in 0..self.config.joint_batch {
                let patch = patches[self.rng.random_range(0..patches.len())];
                let view = &ds.views[patch.view];
                let out = self.encoder.render_patch_lowres(&mut tape, &be, &view.camera, &patch, Some(&mut self.rng))?;
                let mut parts = LossParts::default();
                if w.mse_low > 0.0 {
                    let gt = view.pixels_low.crop(patch.x_low, patch.y_low, patch.side_low, patch.side_low)?;
                    let gt = tape.constant(gt.to_tensor());
                    parts.mse_low = Some(losses::mse_loss(&mut tape, out.rgb_low, gt)?);
                }
                if let Some(bd) = &bd {
                    let (f, m) = if self.config.joint_flow {
                        (out.feature_map, out.depth_map)
                    } else {
                        (tape.detach(out.feature_map), tape.detach(out.depth_map))
                    };
                    let (near, far) = (self.progress.near, self.progress.far);
                    let pred = self.decoder.decode(&mut tape, bd, f, m, near, far)?;
                    let gt_img = view.pixels_full.crop(patch.x_full(), patch.y_full(), patch.side(), patch.side())?;
                    let gt = tape.constant(gt_img.to_tensor());
                    if w.l1 > 0.0 {
                        parts.l1 = Some(losses::l1_loss(&mut tape, pred, gt)?);
                    }
                    if w.perceptual > 0.0 {
                        let phi = self.extractor.as_deref().expect("extractor built for perceptual loss");
                        parts.perceptual = Some(losses::perceptual_loss(&mut tape, phi, pred, gt)?);
                    }
                    if let (Some(d), Some(bdisc)) = (&self.discriminator, &bdisc) {
                        parts.adv = Some(losses::generator_loss(&mut tape, d, bdisc, pred)?);
                        reals.push(gt_img.to_tensor::<f32>());
                        fakes.push(tape.tensor(pred));
                    }
                }
                let l = losses::total_loss(&mut tape, &w, &parts)?;
                total = Some(match total {
                    None => l,
                    Some(t) => tape.add(t, l)?,
                });
            }
            let total = total.expect("joint_batch >= 1");
            let total = tape.mul_scalar(total, 1.0 / self.config.joint_batch as f32)?;
            let mut g = tape.backward(total)?;
            let ge = be.grads(&mut g);
            let gd = bd.map(|bd| bd.grads(&mut g));
            (tape.item(total) as f64, ge, gd)
        };
        let mut gd = gd.unwrap_or_else(|| vec![None; self.decoder.params.len()]);
        let norm = clip_grad_norm(&mut [&mut ge, &mut gd], self.config.grad_clip);
        if !loss.is_finite() || !norm.is_finite() {
            return Err(self.diverged(loss, self.config.lr_encoder, norm));
        }
        self.enc_opt.as_mut().expect("joint optimizer").step(&mut self.encoder.params, &ge);
        self.dec_opt.as_mut().expect("joint optimizer").step(&mut self.decoder.params, &gd);
        let loss_d = match &mut self.discriminator {
            Some(d) if !fakes.is_empty() => {
                let (ld, mut g) = {
                    let mut tape = Tape::new();
                    let b = d.params.bind(&mut tape);
                    let mut total: Option<Var> = None;
                    for (real, fake) in reals.into_iter().zip(fakes) {
                        let r = tape.constant(real);
                        let f = tape.constant(fake);
                        let l = losses::discriminator_loss(&mut tape, d, &b, r, f)?;
                        total = Some(match total {
                            None => l,
                            Some(t) => tape.add(t, l)?,
                        });
                    }
                    let total = total.expect("non-empty batch");
                    let total = tape.mul_scalar(total, 1.0 / self.config.joint_batch as f32)?;
                    let mut grads = tape.backward(total)?;
                    (tape.item(total) as f64, b.grads(&mut grads))
                };
                let norm = clip_grad_norm(&mut [&mut g], self.config.grad_clip);
                if !ld.is_finite() || !norm.is_finite() {
                    return Err(self.diverged(ld, self.config.lr_decoder, norm));
                }
                let d = self.discriminator.as_mut().expect("discriminator");
                self.disc_opt.as_mut().expect("discriminator optimizer").step(&mut d.params, &g);
                Some(ld)
            }
            _ => None,
        };
        self.track_divergence(loss);
        Ok(StepLoss { total: loss, discriminator: loss_d })
    }

    fn track_divergence(&mut self, loss: f64) {
        let p = &mut self.progress;
        let initial = *p.initial_loss.get_or_insert(loss);
        if loss > DIVERGENCE_FACTOR * initial {
            p.above += 1;
            if p.above == DIVERGENCE_WINDOW {
                warn!(
                    "loss {loss:.4} has exceeded {DIVERGENCE_FACTOR}x the initial loss {initial:.4} for {DIVERGENCE_WINDOW} iterations"
                );
            }
        } else {
            p.above = 0;
        }
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        c.put_bytes("config", self.config.to_json()?.into_bytes());
        c.put_bytes("progress", serde_json::to_vec(&self.progress)?);
        c.put_bytes("prng_state", serde_json::to_vec(&self.rng)?);
        c.put_params(&self.encoder.params);
        c.put_params(&self.decoder.params);
        if let Some(d) = &self.discriminator {
            c.put_params(&d.params);
        }
        let groups = [
            ("pretrain_grid", &self.pre_grid, &self.encoder.params),
            ("pretrain_mlp", &self.pre_mlp, &self.encoder.params),
            ("encoder", &self.enc_opt, &self.encoder.params),
            ("decoder", &self.dec_opt, &self.decoder.params),
        ];
        for (name, opt, params) in groups {
            if let Some(o) = opt {
                o.save(&mut c, name, params);
            }
        }
        if let (Some(o), Some(d)) = (&self.disc_opt, &self.discriminator) {
            o.save(&mut c, "discriminator", &d.params);
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let config: TrainConfig = serde_json::from_slice(c.bytes("config")?)?;
        config.validate()?;
        let progress: Progress = serde_json::from_slice(c.bytes("progress")?)?;
        let mut t = Self::fresh(config, progress)?;
        t.rng = serde_json::from_slice(c.bytes("prng_state")?)?;
        let enc = c.params_like(&t.encoder.params)?;
        t.encoder.params.assign(&enc)?;
        let dec = c.params_like(&t.decoder.params)?;
        t.decoder.params.assign(&dec)?;
        if let Some(d) = &mut t.discriminator {
            let p = c.params_like(&d.params)?;
            d.params.assign(&p)?;
        }
        if let Some(o) = &mut t.pre_grid {
            o.load(c, "pretrain_grid", &t.encoder.params)?;
        }
        if let Some(o) = &mut t.pre_mlp {
            o.load(c, "pretrain_mlp", &t.encoder.params)?;
        }
        if let Some(o) = &mut t.enc_opt {
            o.load(c, "encoder", &t.encoder.params)?;
        }
        if let Some(o) = &mut t.dec_opt {
            o.load(c, "decoder", &t.decoder.params)?;
        }
        if let (Some(o), Some(d)) = (&mut t.disc_opt, &t.discriminator) {
            o.load(c, "discriminator", &d.params)?;
        }
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }

    /// Replaces the encoder (e.g. with a separately pretrained one) and
    /// moves straight to joint training.
    pub fn start_joint_from(&mut self, encoder: Encoder<f32>) -> Result<()> {
        if encoder.config != self.config.encoder {
            return Err(Error::InvalidArgument("encoder configuration differs from the training config".into()));
        }
        self.encoder = encoder;
        self.progress.phase = Phase::Joint;
        self.progress.iteration = 0;
        self.enter_phase()
    }
}

/// Pretrains the encoder alone for `config.pretrain_iters` iterations.
pub fn pretrain_encoder(ds: &Dataset, config: &TrainConfig) -> Result<Encoder<f32>> {
    let cfg = TrainConfig { joint_iters: 0, ..config.clone() };
    let mut t = Trainer::new(cfg, ds)?;
    t.run(ds, None, None)?;
    Ok(t.encoder)
}

/// Joint training for `config.joint_iters` iterations, starting from `init`
/// or a fresh encoder.
pub fn train_joint(ds: &Dataset, config: &TrainConfig, init: Option<Encoder<f32>>) -> Result<Trainer> {
    let mut t = Trainer::new(config.clone(), ds)?;
    match init {
        Some(e) => t.start_joint_from(e)?,
        None => {
            t.progress.phase = Phase::Joint;
            t.enter_phase()?;
        }
    }
    t.run(ds, None, None)?;
    Ok(t)
}

/// Every step allocates and frees gradient buffers the size of the voxel
/// grids. glibc serves those with fresh mmaps by default, and the page faults
/// cost more than the arithmetic; keep them on the heap instead.
fn keep_heap_resident() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    {
        static ONCE: std::sync::Once = std::sync::Once::new();
        ONCE.call_once(|| unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, i32::MAX);
            libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
        });
    }
}
