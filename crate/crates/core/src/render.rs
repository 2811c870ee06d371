//! Inference: chunked low-res ray casting, then one decoder pass.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use rand_xoshiro::Xoshiro256StarStar;

use crate::autodiff::Tape;
use crate::checkpoint::Container;
use crate::decoder::Decoder;
use crate::encoder::{sample_ray, Encoder};
use crate::error::{Error, Result};
use crate::scene::{Camera, Image};
use crate::tensor::Tensor;
use crate::trainer::{Progress, TrainConfig};

/// Trained encoder and decoder plus the depth range the decoder was
/// trained with.
pub struct Model {
    pub encoder: Encoder<f32>,
    pub decoder: Decoder<f32>,
    pub near: f64,
    pub far: f64,
}

impl Model {
    pub fn from_container(c: &Container) -> Result<Self> {
        let config: TrainConfig = serde_json::from_slice(c.bytes("config")?)?;
        config.validate()?;
        let progress: Progress = serde_json::from_slice(c.bytes("progress")?)?;
        let mut encoder = Encoder::new(config.encoder.clone(), 0)?;
        let p = c.params_like(&encoder.params)?;
        encoder.params.assign(&p)?;
        let mut decoder = Decoder::new(config.decoder.clone(), config.encoder.feature_dim, 0)?;
        let p = c.params_like(&decoder.params)?;
        decoder.params.assign(&p)?;
        Ok(Self { encoder, decoder, near: progress.near, far: progress.far })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }

    pub fn scale(&self) -> usize {
        self.decoder.config.scale
    }
}

/// Encoder outputs over a whole low-res image.
#[derive(Clone, Debug)]
pub struct LowRes {
    /// `[C', h, w]`
    pub features: Tensor<f32>,
    /// `[h, w]`
    pub depth: Tensor<f32>,
    pub rgb: Image,
}

fn check_dims(cam: &Camera, scale: usize) -> Result<(usize, usize)> {
    if scale == 0 || cam.width % scale != 0 || cam.height % scale != 0 {
        return Err(Error::InvalidArgument(format!(
            "camera size {}x{} is not divisible by upscale factor {scale}",
            cam.width, cam.height
        )));
    }
    Ok((cam.width / scale, cam.height / scale))
}

/// Casts one ray per low-res pixel, `chunk` rays per tape. Chunks run in
/// parallel; the result does not depend on `chunk`.
pub fn render_lowres(encoder: &Encoder<f32>, cam: &Camera, scale: usize, chunk: usize) -> Result<LowRes> {
    let (w, h) = check_dims(cam, scale)?;
    if chunk == 0 {
        return Err(Error::InvalidArgument("chunk size must be positive".into()));
    }
    let n = encoder.config.n_samples;
    let cf = encoder.config.feature_dim;
    let total = w * h;
    let starts: Vec<usize> = (0..total).step_by(chunk).collect();
    let parts = starts
        .par_iter()
        .map(|&start| -> Result<(Vec<f32>, Vec<f32>, Vec<f32>)> {
            let end = (start + chunk).min(total);
            let rays: Vec<_> = (start..end)
                .map(|i| sample_ray(cam, i % w, i / w, scale, n, None::<&mut Xoshiro256StarStar>))
                .collect();
            let mut tape = Tape::new();
            let b = encoder.params.bind_frozen(&mut tape);
            let out = encoder.render_rays(&mut tape, &b, &rays)?;
            Ok((
                tape.value(out.features).to_vec(),
                tape.value(out.depth).to_vec(),
                tape.value(out.rgb).to_vec(),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut features = vec![0f32; cf * total];
    let mut depth = Vec::with_capacity(total);
    let mut rgb = Vec::with_capacity(total * 3);
    for (&start, (f, d, c)) in starts.iter().zip(parts) {
        for (k, row) in f.chunks_exact(cf).enumerate() {
            for (ch, v) in row.iter().enumerate() {
                features[ch * total + start + k] = *v;
            }
        }
        depth.extend(d);
        rgb.extend(c);
    }
    Ok(LowRes {
        features: Tensor::new([cf, h, w], features)?,
        depth: Tensor::new([h, w], depth)?,
        rgb: Image::new(w, h, rgb)?,
    })
}

/// Decodes a whole low-res render to the full-resolution image.
pub fn decode_full(decoder: &Decoder<f32>, low: &LowRes, near: f64, far: f64) -> Result<Image> {
    let mut tape = Tape::new();
    let b = decoder.params.bind_frozen(&mut tape);
    let f = tape.constant(low.features.clone());
    let m = tape.constant(low.depth.clone());
    let out = decoder.decode(&mut tape, &b, f, m, near, far)?;
    Image::from_tensor(&tape.tensor(out))
}

#[derive(Clone, Debug)]
pub struct Rendered {
    pub image: Image,
    pub low: LowRes,
    /// Wall-clock rendering time.
    pub seconds: f64,
}

/// Full-resolution render of `cam` (whose size is the output size).
pub fn render_view(model: &Model, cam: &Camera, chunk: usize) -> Result<Rendered> {
    let start = Instant::now();
    let low = render_lowres(&model.encoder, cam, model.scale(), chunk)?;
    let image = decode_full(&model.decoder, &low, model.near, model.far)?;
    Ok(Rendered { image, low, seconds: start.elapsed().as_secs_f64() })
}

/// Catmull-Rom bicubic upsampling by an integer factor.
pub fn bicubic_upscale(img: &Image, factor: usize) -> Result<Image> {
    if factor == 0 {
        return Err(Error::InvalidArgument("upscale factor must be positive".into()));
    }
    let (w, h) = (img.width(), img.height());
    let buf = image::Rgb32FImage::from_raw(w as u32, h as u32, img.data().to_vec())
        .ok_or_else(|| Error::shape("bicubic_upscale", "buffer size mismatch"))?;
    let up = image::imageops::resize(&buf, (w * factor) as u32, (h * factor) as u32, image::imageops::FilterType::CatmullRom);
    let data = up.into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Image::new(w * factor, h * factor, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::DecoderConfig;
    use crate::encoder::{EncoderConfig, DENSITY_GRID};
    use crate::scene::toy::orbit_camera;

    fn small_model(seed: u64) -> Model {
        let ec = EncoderConfig { grid_dims: [10, 10, 10], hidden: 16, n_samples: 24, ..Default::default() };
        let mut encoder = Encoder::new(ec, seed).unwrap();
        let i = encoder.params.position(DENSITY_GRID).unwrap();
        encoder.params.tensors_mut()[i].data_mut().iter_mut().enumerate().for_each(|(k, v)| *v = (k % 7) as f32 - 3.0);
        let decoder = Decoder::new(DecoderConfig { n_blocks: 1, channels: 8, scale: 2, depth_modulation: true }, 6, seed).unwrap();
        Model { encoder, decoder, near: 2.0, far: 6.0 }
    }

    #[test]
    fn chunking_does_not_change_the_image() {
        let m = small_model(3);
        let cam = orbit_camera(0.3, 0.4, 16).unwrap();
        let a = render_view(&m, &cam, 1).unwrap();
        let b = render_view(&m, &cam, 4096).unwrap();
        let c = render_view(&m, &cam, 7).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.image, c.image);
        assert_eq!(a.low.features, c.low.features);
        assert_eq!((a.image.width(), a.low.rgb.width()), (16, 8));
    }

    #[test]
    fn empty_scene_low_res_is_white() {
        let mut m = small_model(1);
        let i = m.encoder.params.position(DENSITY_GRID).unwrap();
        m.encoder.params.tensors_mut()[i].data_mut().fill(-80.0);
        let cam = orbit_camera(1.0, 0.2, 8).unwrap();
        let r = render_view(&m, &cam, 16).unwrap();
        assert!(r.low.rgb.data().iter().all(|v| (v - 1.0).abs() < 1e-6));
        assert!(r.low.features.data().iter().all(|v| v.abs() < 1e-6));
        // Constant input: the decoded image is uniform away from the zero-padded border.
        let inner = r.image.crop(3, 3, 2, 2).unwrap();
        let p = inner.pixel(0, 0);
        assert!(inner.data().chunks(3).all(|q| q == p));
    }

    #[test]
    fn indivisible_camera_is_rejected() {
        let m = small_model(0);
        let cam = orbit_camera(0.0, 0.3, 9).unwrap();
        assert!(render_view(&m, &cam, 64).is_err());
    }

    #[test]
    fn bicubic_keeps_constants_and_interpolates_ramps() {
        let flat = Image::filled(5, 4, [0.25, 0.5, 0.75]);
        let up = bicubic_upscale(&flat, 2).unwrap();
        assert_eq!((up.width(), up.height()), (10, 8));
        assert!(up.data().chunks(3).all(|p| (p[0] - 0.25).abs() < 1e-5 && (p[2] - 0.75).abs() < 1e-5));
        let ramp = Image::from_fn(8, 8, |x, _| [x as f32 / 8.0; 3]);
        let up = bicubic_upscale(&ramp, 2).unwrap();
        for x in 4..12 {
            let a = up.pixel(x, 5)[0];
            let b = up.pixel(x + 1, 5)[0];
            assert!(b > a, "not increasing at {x}");
        }
    }
}
