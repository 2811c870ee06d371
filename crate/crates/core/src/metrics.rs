//! Distortion metrics, evaluation reports and the view-consistency strip.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::render::{bicubic_upscale, render_view, Model};
use crate::scene::{Dataset, Image};

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn same_size(op: &'static str, a: &Image, b: &Image) -> Result<()> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::shape(
            op,
            format!("{}x{} vs {}x{}", a.width(), a.height(), b.width(), b.height()),
        ));
    }
    Ok(())
}

/// `-10 log10(MSE)` over all channels, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    same_size("psnr", a, b)?;
    let n = a.data().len() as f64;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>() / n;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (-10.0 * mse.log10()).min(PSNR_CAP)
    }
}

pub fn luma(img: &Image) -> Vec<f64> {
    img.data().chunks_exact(3).map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64).collect()
}

/// Normalized 1-D Gaussian; the 2-D window is its outer product.
pub fn gaussian_1d(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filter of a `w x h` plane.
fn filter_valid(x: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w - n + 1, h - n + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for ox in 0..ow {
            rows[y * ow + ox] = (0..n).map(|i| k[i] * x[y * w + ox + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = (0..n).map(|i| k[i] * rows[(oy + i) * ow + ox]).sum();
        }
    }
    out
}

/// Mean SSIM of the luma channels over every valid 11x11 window position.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_size("ssim", a, b)?;
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {w}x{h}")));
    }
    let (x, y) = (luma(a), luma(b));
    let k = gaussian_1d(SSIM_WINDOW, SSIM_SIGMA);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mx = filter_valid(&x, w, h, &k);
    let my = filter_valid(&y, w, h, &k);
    let sxx = filter_valid(&prod(&x, &x), w, h, &k);
    let syy = filter_valid(&prod(&y, &y), w, h, &k);
    let sxy = filter_valid(&prod(&x, &y), w, h, &k);
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2)) / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2))
        })
        .sum();
    Ok(total / mx.len() as f64)
}

/// Stacks the pixels `column`, rows `[top, top + strip_height)` of every
/// frame side by side, with `top` centering the segment. Texture that
/// jitters across views shows up as broken horizontal streaks.
pub fn consistency_strip(frames: &[Image], column: usize, strip_height: usize) -> Result<Image> {
    if frames.len() < 2 {
        return Err(Error::InvalidArgument(format!("strip needs at least 2 frames, got {}", frames.len())));
    }
    let (w, h) = (frames[0].width(), frames[0].height());
    if let Some(i) = frames.iter().position(|f| f.width() != w || f.height() != h) {
        return Err(Error::shape("consistency_strip", format!("frame {i} is not {w}x{h}")));
    }
    if column >= w {
        return Err(Error::InvalidArgument(format!("column {column} out of bounds for width {w}")));
    }
    if strip_height == 0 || strip_height > h {
        return Err(Error::InvalidArgument(format!("strip height {strip_height} must be in 1..={h}")));
    }
    let top = (h - strip_height) / 2;
    Ok(Image::from_fn(frames.len(), strip_height, |x, y| frames[x].pixel(column, top + y)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
    /// Catmull-Rom upsampling of the encoder's own low-res render.
    pub psnr_bicubic: f64,
    pub ssim_bicubic: f64,
    /// Encoder RGB against the box-downscaled ground truth.
    pub psnr_low: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub views: Vec<ViewMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_psnr_bicubic: f64,
    pub mean_ssim_bicubic: f64,
    pub mean_psnr_low: f64,
}

impl MetricReport {
    pub fn from_views(views: Vec<ViewMetrics>) -> Result<Self> {
        if views.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mean = |f: fn(&ViewMetrics) -> f64| views.iter().map(f).sum::<f64>() / views.len() as f64;
        Ok(Self {
            mean_psnr: mean(|v| v.psnr),
            mean_ssim: mean(|v| v.ssim),
            mean_psnr_bicubic: mean(|v| v.psnr_bicubic),
            mean_ssim_bicubic: mean(|v| v.ssim_bicubic),
            mean_psnr_low: mean(|v| v.psnr_low),
            views,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

/// Renders every view of `ds` and scores it against the ground truth.
pub fn evaluate(model: &Model, ds: &Dataset, chunk: usize) -> Result<MetricReport> {
    if ds.scale != model.scale() {
        return Err(Error::InvalidArgument(format!(
            "dataset upscale factor {} differs from the model's {}",
            ds.scale,
            model.scale()
        )));
    }
    let mut views = Vec::with_capacity(ds.views.len());
    for v in &ds.views {
        let r = render_view(model, &v.camera, chunk)?;
        let bicubic = bicubic_upscale(&r.low.rgb, ds.scale)?;
        let m = ViewMetrics {
            name: v.name.clone(),
            psnr: psnr(&r.image, &v.pixels_full)?,
            ssim: ssim(&r.image, &v.pixels_full)?,
            psnr_bicubic: psnr(&bicubic, &v.pixels_full)?,
            ssim_bicubic: ssim(&bicubic, &v.pixels_full)?,
            psnr_low: psnr(&r.low.rgb, &v.pixels_low)?,
        };
        log::info!("{}: psnr {:.2} ssim {:.4} bicubic {:.2} low {:.2} ({:.2}s)", m.name, m.psnr, m.ssim, m.psnr_bicubic, m.psnr_low, r.seconds);
        views.push(m);
    }
    MetricReport::from_views(views)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256StarStar;

    fn random_image(rng: &mut impl Rng, w: usize, h: usize) -> Image {
        Image::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()])
    }

    /// Window-by-window SSIM with the 2-D Gaussian built directly.
    fn ssim_oracle(a: &Image, b: &Image) -> f64 {
        let (w, h) = (a.width(), a.height());
        let n = SSIM_WINDOW;
        let c = (n as f64 - 1.0) / 2.0;
        let mut win = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                win[i * n + j] = (-((i as f64 - c).powi(2) + (j as f64 - c).powi(2)) / (2.0 * 1.5 * 1.5)).exp();
            }
        }
        let s: f64 = win.iter().sum();
        win.iter_mut().for_each(|v| *v /= s);
        let l = |img: &Image, x: usize, y: usize| {
            let p = img.pixel(x, y);
            0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64
        };
        let mut total = 0.0;
        let mut count = 0;
        for y0 in 0..=h - n {
            for x0 in 0..=w - n {
                let (mut ux, mut uy) = (0.0, 0.0);
                for i in 0..n {
                    for j in 0..n {
                        ux += win[i * n + j] * l(a, x0 + j, y0 + i);
                        uy += win[i * n + j] * l(b, x0 + j, y0 + i);
                    }
                }
                let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                for i in 0..n {
                    for j in 0..n {
                        let dx = l(a, x0 + j, y0 + i) - ux;
                        let dy = l(b, x0 + j, y0 + i) - uy;
                        vx += win[i * n + j] * dx * dx;
                        vy += win[i * n + j] * dy * dy;
                        cxy += win[i * n + j] * dx * dy;
                    }
                }
                let (c1, c2) = (0.0001, 0.0009);
                total += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn psnr_closed_forms() {
        let a = Image::filled(4, 4, [0.5; 3]);
        let b = Image::filled(4, 4, [0.6; 3]);
        // f32 storage makes the difference 0.1 only approximately.
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
        assert_eq!(psnr_from_mse(0.01), 20.0);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let black = Image::filled(3, 2, [0.0; 3]);
        let white = Image::filled(3, 2, [1.0; 3]);
        assert_eq!(psnr(&black, &white).unwrap(), 0.0);
        assert!(psnr(&black, &Image::filled(2, 3, [0.0; 3])).is_err());
    }

    #[test]
    fn ssim_matches_sliding_window_oracle() {
        let mut rng = Xoshiro256StarStar::seed_from_u64(11);
        for _ in 0..10 {
            let w = rng.random_range(11..20);
            let h = rng.random_range(11..20);
            let a = random_image(&mut rng, w, h);
            let b = random_image(&mut rng, w, h);
            assert!((ssim(&a, &b).unwrap() - ssim_oracle(&a, &b)).abs() < 1e-6);
        }
    }

    #[test]
    fn ssim_of_negated_checkerboard_is_negative() {
        let a = Image::from_fn(16, 16, |x, y| [((x + y) % 2) as f32 * 0.5 + 0.25; 3]);
        let b = Image::from_fn(16, 16, |x, y| [1.0 - (((x + y) % 2) as f32 * 0.5 + 0.25); 3]);
        let s = ssim(&a, &b).unwrap();
        assert!(s < 0.0, "{s}");
        assert!((s - ssim_oracle(&a, &b)).abs() < 1e-9);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = Image::filled(10, 30, [0.0; 3]);
        assert!(ssim(&a, &a).is_err());
    }

    proptest! {
        #[test]
        fn self_comparisons(seed in 0u64..1000, w in 11usize..18, h in 11usize..18) {
            let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
            let a = random_image(&mut rng, w, h);
            prop_assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
            prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn symmetric_and_in_range(seed in 0u64..1000) {
            let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
            let a = random_image(&mut rng, 12, 13);
            let b = random_image(&mut rng, 12, 13);
            let p = psnr(&a, &b).unwrap();
            prop_assert_eq!(p, psnr(&b, &a).unwrap());
            prop_assert!(p > 0.0 && p <= PSNR_CAP);
            let s = ssim(&a, &b).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
            prop_assert!((s - ssim(&b, &a).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn strip_shapes_and_constant_rows() {
        let f = Image::from_fn(6, 5, |x, y| [x as f32 / 6.0, y as f32 / 5.0, 0.5]);
        let frames = vec![f; 10];
        let s = consistency_strip(&frames, 2, 5).unwrap();
        assert_eq!((s.width(), s.height()), (10, 5));
        for y in 0..5 {
            assert!((0..10).all(|x| s.pixel(x, y) == s.pixel(0, y)));
        }
        assert!(consistency_strip(&frames, 6, 5).is_err());
        assert!(consistency_strip(&frames, 0, 6).is_err());
        assert!(consistency_strip(&frames[..1], 0, 1).is_err());
    }

    #[test]
    fn moving_edge_becomes_a_diagonal() {
        // Frame k: the row boundary of a horizontal edge moves down one pixel per frame.
        let frames: Vec<Image> = (0..8).map(|k| Image::from_fn(4, 12, |_, y| [if y < k + 2 { 1.0 } else { 0.0 }; 3])).collect();
        let s = consistency_strip(&frames, 1, 12).unwrap();
        for x in 0..8 {
            let edge = (0..12).position(|y| s.pixel(x, y)[0] == 0.0).unwrap();
            assert_eq!(edge, x + 2);
        }
    }

    #[test]
    fn report_means() {
        let v = |p: f64| ViewMetrics { name: "v".into(), psnr: p, ssim: 0.5, psnr_bicubic: 1.0, ssim_bicubic: 0.1, psnr_low: 3.0 };
        let r = MetricReport::from_views(vec![v(10.0), v(20.0)]).unwrap();
        assert_eq!(r.mean_psnr, 15.0);
        let back: MetricReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        assert!(MetricReport::from_views(vec![]).is_err());
    }
}
