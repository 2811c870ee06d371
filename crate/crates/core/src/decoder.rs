//! Convolutional decoder mapping low-resolution ray features and depth to a
//! full-resolution RGB patch.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{self, Bound, ParamSet};
use crate::tensor::{Scalar, Tensor};

pub const RESIDUAL_SCALE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub n_blocks: usize,
    pub channels: usize,
    /// Upscale factor `s`, a power of two.
    pub scale: usize,
    /// When false the modulators are bypassed and depth is ignored.
    #[serde(default = "default_true")]
    pub depth_modulation: bool,
}

fn default_true() -> bool {
    true
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { n_blocks: 5, channels: 64, scale: 4, depth_modulation: true }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.scale.is_power_of_two() {
            return Err(Error::InvalidArgument(format!("upscale factor must be a power of two, got {}", self.scale)));
        }
        if self.n_blocks == 0 || self.channels == 0 {
            return Err(Error::InvalidArgument("decoder needs at least one block and channel".into()));
        }
        Ok(())
    }

    pub fn head_stages(&self) -> usize {
        self.scale.trailing_zeros() as usize
    }
}

/// Activations around one block's modulation, recorded by
/// [`Decoder::decode_traced`].
#[derive(Clone, Copy, Debug)]
pub struct BlockTrace {
    pub before: Var,
    pub after: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder<T> {
    pub config: DecoderConfig,
    pub in_channels: usize,
    pub params: ParamSet<T>,
}

impl<T: Scalar> Decoder<T> {
    pub fn new(config: DecoderConfig, in_channels: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
        let c = config.channels;
        let g = nn::leaky_gain();
        let mut p = ParamSet::new();
        nn::insert_conv(&mut p, &mut rng, "decoder.conv_in", in_channels, c, 3, 1.0);
        for k in 0..config.n_blocks {
            nn::insert_conv(&mut p, &mut rng, &format!("decoder.block{k}.conv1"), c, c, 3, g);
            nn::insert_conv(&mut p, &mut rng, &format!("decoder.block{k}.conv2"), c, c, 3, 1.0);
            // Identity at init: scale weights 0 and bias 1, shift all zero.
            p.insert(format!("modulators.{k}.w"), Tensor::zeros([2 * c, 1, 1, 1]));
            p.insert(format!("modulators.{k}.b"), Tensor::from_fn([2 * c], |i| if i < c { T::one() } else { T::zero() }));
        }
        for j in 0..config.head_stages() {
            nn::insert_conv(&mut p, &mut rng, &format!("decoder.head{j}"), c, c, 3, g);
        }
        nn::insert_conv(&mut p, &mut rng, "decoder.conv_out", c, 3, 3, 1.0);
        Ok(Self { config, in_channels, params: p })
    }

    pub fn from_params(config: DecoderConfig, in_channels: usize, params: ParamSet<T>) -> Result<Self> {
        let fresh = Self::new(config.clone(), in_channels, 0)?;
        if fresh.params.names() != params.names()
            || fresh.params.tensors().iter().zip(params.tensors()).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::InvalidArgument("decoder parameters do not match the configuration".into()));
        }
        Ok(Self { config, in_channels, params })
    }

    pub fn cast<U: Scalar>(&self) -> Decoder<U> {
        Decoder { config: self.config.clone(), in_channels: self.in_channels, params: self.params.cast() }
    }

    /// `features: [C', h, w]`, `depth: [h, w]` -> `[3, s h, s w]` in `(0, 1)`.
    pub fn decode(
        &self,
        tape: &mut Tape<'_, T>,
        b: &Bound<'_>,
        features: Var,
        depth: Var,
        near: f64,
        far: f64,
    ) -> Result<Var> {
        self.decode_traced(tape, b, features, depth, near, far, None)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn decode_traced(
        &self,
        tape: &mut Tape<'_, T>,
        b: &Bound<'_>,
        features: Var,
        depth: Var,
        near: f64,
        far: f64,
        mut trace: Option<&mut Vec<BlockTrace>>,
    ) -> Result<Var> {
        let &[cf, h, w] = tape.shape(features) else {
            return Err(Error::shape("decode", format!("features must be [C, h, w], got {:?}", tape.shape(features))));
        };
        if cf != self.in_channels || tape.shape(depth) != [h, w] {
            return Err(Error::shape(
                "decode",
                format!("features {:?} with {} channels expected, depth {:?}", tape.shape(features), self.in_channels, tape.shape(depth)),
            ));
        }
        let c = self.config.channels;
        let cond = if self.config.depth_modulation {
            let m = normalize_depth(tape, depth, near, far)?;
            Some(tape.reshape(m, &[1, h, w])?)
        } else {
            None
        };
        let mut x = nn::conv(tape, b, "decoder.conv_in", features, 1)?;
        for k in 0..self.config.n_blocks {
            let y = nn::conv(tape, b, &format!("decoder.block{k}.conv1"), x, 1)?;
            let y = nn::leaky(tape, y)?;
            let y = nn::conv(tape, b, &format!("decoder.block{k}.conv2"), y, 1)?;
            let y = tape.mul_scalar(y, T::c(RESIDUAL_SCALE))?;
            x = tape.add(x, y)?;
            if let Some(m) = cond {
                let gb = nn::conv(tape, b, &format!("modulators.{k}"), m, 1)?;
                let gamma = tape.narrow(gb, 0, 0, c)?;
                let beta = tape.narrow(gb, 0, c, c)?;
                let scaled = tape.mul(gamma, x)?;
                let after = tape.add(scaled, beta)?;
                if let Some(t) = trace.as_deref_mut() {
                    t.push(BlockTrace { before: x, after });
                }
                x = after;
            }
        }
        for j in 0..self.config.head_stages() {
            x = tape.upsample_bilinear2x(x)?;
            x = nn::conv(tape, b, &format!("decoder.head{j}"), x, 1)?;
            x = nn::leaky(tape, x)?;
        }
        let out = nn::conv(tape, b, "decoder.conv_out", x, 1)?;
        tape.sigmoid(out)
    }
}

/// `clamp((M - near) / (far - near), 0, 1)`.
pub fn normalize_depth<T: Scalar>(tape: &mut Tape<'_, T>, depth: Var, near: f64, far: f64) -> Result<Var> {
    if !(far > near) {
        return Err(Error::InvalidArgument(format!("need far > near, got near={near} far={far}")));
    }
    let m = tape.add_scalar(depth, T::c(-near))?;
    let m = tape.mul_scalar(m, T::c(1.0 / (far - near)))?;
    tape.clamp(m, T::zero(), T::one())
}
