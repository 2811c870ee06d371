use super::{GradStore, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_len(&self) -> usize {
        self.h_out * self.w_out
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1
    }

    /// Visits `(col_row, out_pixel, input_offset)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (k, s, p) = (self.k, self.stride, self.pad);
        for ci in 0..self.c_in {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    for oy in 0..self.h_out {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        let base = (ci * self.h + iy as usize) * self.w;
                        for ox in 0..self.w_out {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix < 0 || ix as usize >= self.w {
                                continue;
                            }
                            f(row, oy * self.w_out + ox, base + ix as usize);
                        }
                    }
                }
            }
        }
    }
}

/// Bilinear source taps for one axis of a 2x upsample (half-pixel centers).
fn upsample_taps<T: Scalar>(n: usize) -> Vec<(usize, usize, T)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, T::c(src - i0 as f64))
        })
        .collect()
}

impl<T: Scalar> Tape<'_, T> {
    fn conv_geom(&self, input: Var, kernel: Var, bias: Option<Var>, stride: usize) -> Result<ConvGeom> {
        let (&[c_in, h, w], &[c_out, kc, k, k2]) = (self.shape(input), self.shape(kernel)) else {
            return Err(Error::shape(
                "conv2d",
                format!("input [C,H,W] and kernel [O,C,k,k] expected, got {:?} and {:?}", self.shape(input), self.shape(kernel)),
            ));
        };
        if kc != c_in || k != k2 {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?} incompatible with kernel {:?}", self.shape(input), self.shape(kernel)),
            ));
        }
        if k % 2 == 0 {
            return Err(Error::InvalidArgument(format!("conv2d kernel size must be odd, got {k}")));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(Error::shape("conv2d", format!("bias {:?} for {c_out} outputs", self.shape(b))));
            }
        }
        let pad = k / 2;
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::shape("conv2d", format!("input {h}x{w} smaller than kernel {k}")));
        }
        let h_out = (h + 2 * pad - k) / stride + 1;
        let w_out = (w + 2 * pad - k) / stride + 1;
        Ok(ConvGeom { c_in, h, w, c_out, k, stride, pad, h_out, w_out })
    }

    /// 2D cross-correlation with zero padding `k / 2`.
    ///
    /// `input: [C_in, H, W]`, `kernel: [C_out, C_in, k, k]` with odd `k`,
    /// `bias: [C_out]`. Output spatial size is `ceil(H / stride)`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        let g = self.conv_geom(input, kernel, bias, stride)?;
        let x = self.value(input);
        let cols = if g.is_pointwise() {
            Vec::new()
        } else {
            let mut cols = vec![T::zero(); g.patch_len() * g.out_len()];
            let n = g.out_len();
            g.for_each_tap(|row, pix, off| cols[row * n + pix] = x[off]);
            cols
        };
        let src: &[T] = if g.is_pointwise() { x } else { &cols };
        let n = g.out_len();
        let mut out = vec![T::zero(); g.c_out * n];
        if let Some(b) = bias {
            for (o, bv) in self.value(b).iter().enumerate() {
                out[o * n..(o + 1) * n].fill(*bv);
            }
        }
        let pl = g.patch_len();
        T::gemm(
            g.c_out,
            pl,
            n,
            T::one(),
            self.value(kernel),
            (pl as isize, 1),
            src,
            (n as isize, 1),
            T::one(),
            &mut out,
            (n as isize, 1),
        );
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        self.push(
            "conv2d",
            out,
            vec![g.c_out, g.h_out, g.w_out],
            &inputs,
            Op::Conv2d { input, kernel, bias, stride, cols },
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub(super) fn conv2d_backward(
        &self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        cols: &[T],
        _out: Var,
        gout: &[T],
        store: &mut GradStore<T>,
    ) {
        let g = self.conv_geom(input, kernel, bias, stride).expect("validated in forward");
        let (n, pl) = (g.out_len(), g.patch_len());
        let src: &[T] = if g.is_pointwise() { self.value(input) } else { cols };
        if let Some(gk) = store.slot(kernel) {
            T::gemm(g.c_out, n, pl, T::one(), gout, (n as isize, 1), src, (1, n as isize), T::one(), gk, (pl as isize, 1));
        }
        if let Some(b) = bias {
            if let Some(gb) = store.slot(b) {
                for (o, gbv) in gb.iter_mut().enumerate() {
                    *gbv += gout[o * n..(o + 1) * n].iter().copied().sum::<T>();
                }
            }
        }
        if let Some(gi) = store.slot(input) {
            let kv = self.value(kernel);
            if g.is_pointwise() {
                T::gemm(pl, g.c_out, n, T::one(), kv, (1, pl as isize), gout, (n as isize, 1), T::one(), gi, (n as isize, 1));
            } else {
                let mut dcols = vec![T::zero(); pl * n];
                T::gemm(pl, g.c_out, n, T::one(), kv, (1, pl as isize), gout, (n as isize, 1), T::zero(), &mut dcols, (n as isize, 1));
                g.for_each_tap(|row, pix, off| gi[off] += dcols[row * n + pix]);
            }
        }
    }

    /// 2x bilinear upsampling of `[C, H, W]` with half-pixel centers
    /// (align-corners off, edge clamped).
    pub fn upsample_bilinear2x(&mut self, x: Var) -> Result<Var> {
        let &[c, h, w] = self.shape(x) else {
            return Err(Error::shape("upsample_bilinear2x", format!("[C,H,W] expected, got {:?}", self.shape(x))));
        };
        if h == 0 || w == 0 {
            return Err(Error::shape("upsample_bilinear2x", "empty spatial extent"));
        }
        let (ty, tx) = (upsample_taps::<T>(h), upsample_taps::<T>(w));
        let v = self.value(x);
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); c * h2 * w2];
        for ch in 0..c {
            let plane = &v[ch * h * w..(ch + 1) * h * w];
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let top = plane[y0 * w + x0] * (T::one() - lx) + plane[y0 * w + x1] * lx;
                    let bot = plane[y1 * w + x0] * (T::one() - lx) + plane[y1 * w + x1] * lx;
                    out[(ch * h2 + oy) * w2 + ox] = top * (T::one() - ly) + bot * ly;
                }
            }
        }
        self.push("upsample_bilinear2x", out, vec![c, h2, w2], &[x], Op::Upsample2x(x))
    }

    pub(super) fn upsample_backward(&self, x: Var, gout: &[T], store: &mut GradStore<T>) {
        let (c, h, w) = (self.shape(x)[0], self.shape(x)[1], self.shape(x)[2]);
        let (ty, tx) = (upsample_taps::<T>(h), upsample_taps::<T>(w));
        let (h2, w2) = (2 * h, 2 * w);
        let Some(g) = store.slot(x) else { return };
        for ch in 0..c {
            let plane = &mut g[ch * h * w..(ch + 1) * h * w];
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let go = gout[(ch * h2 + oy) * w2 + ox];
                    let (top, bot) = (go * (T::one() - ly), go * ly);
                    plane[y0 * w + x0] += top * (T::one() - lx);
                    plane[y0 * w + x1] += top * lx;
                    plane[y1 * w + x0] += bot * (T::one() - lx);
                    plane[y1 * w + x1] += bot * lx;
                }
            }
        }
    }

    /// 2x2 mean pooling of `[C, H, W]` with even `H` and `W`.
    pub fn avg_pool2x(&mut self, x: Var) -> Result<Var> {
        let &[c, h, w] = self.shape(x) else {
            return Err(Error::shape("avg_pool2x", format!("[C,H,W] expected, got {:?}", self.shape(x))));
        };
        if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
            return Err(Error::shape("avg_pool2x", format!("even spatial size required, got {h}x{w}")));
        }
        let (h2, w2) = (h / 2, w / 2);
        let v = self.value(x);
        let quarter = T::c(0.25);
        let mut out = vec![T::zero(); c * h2 * w2];
        for ch in 0..c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    let i = (ch * h + 2 * y) * w + 2 * xx;
                    out[(ch * h2 + y) * w2 + xx] = (v[i] + v[i + 1] + v[i + w] + v[i + w + 1]) * quarter;
                }
            }
        }
        self.push("avg_pool2x", out, vec![c, h2, w2], &[x], Op::AvgPool2x(x))
    }

    pub(super) fn avg_pool_backward(&self, x: Var, gout: &[T], store: &mut GradStore<T>) {
        let (c, h, w) = (self.shape(x)[0], self.shape(x)[1], self.shape(x)[2]);
        let (h2, w2) = (h / 2, w / 2);
        let quarter = T::c(0.25);
        let Some(g) = store.slot(x) else { return };
        for ch in 0..c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    let go = gout[(ch * h2 + y) * w2 + xx] * quarter;
                    let i = (ch * h + 2 * y) * w + 2 * xx;
                    g[i] += go;
                    g[i + 1] += go;
                    g[i + w] += go;
                    g[i + w + 1] += go;
                }
            }
        }
    }
}
