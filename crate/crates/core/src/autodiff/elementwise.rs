use super::{BinaryKind, GradStore, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Pointwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary<T> {
    LeakyRelu(T),
    Sigmoid,
    Exp,
    Log,
    Softplus,
    Abs,
    Square,
    Clamp(T, T),
}

pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    // ln(1 + e^x) = max(x, 0) + ln(1 + e^-|x|)
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Numpy-style broadcast of two shapes, aligned at the trailing axis.
struct Broadcast {
    out_shape: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
}

impl Broadcast {
    fn new(a: &[usize], b: &[usize]) -> Option<Self> {
        let rank = a.len().max(b.len());
        let pad = |s: &[usize]| {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (a, b) = (pad(a), pad(b));
        let mut out_shape = Vec::with_capacity(rank);
        for (&x, &y) in a.iter().zip(&b) {
            if x != y && x != 1 && y != 1 {
                return None;
            }
            out_shape.push(x.max(y));
        }
        let strides = |s: &[usize]| {
            let mut st = vec![0; rank];
            let mut acc = 1;
            for i in (0..rank).rev() {
                st[i] = if s[i] == 1 { 0 } else { acc };
                acc *= s[i];
            }
            st
        };
        Some(Self { a_strides: strides(&a), b_strides: strides(&b), out_shape })
    }

    /// Calls `f(out_index, a_index, b_index)` for every output element in
    /// row-major order. The innermost axis runs as a tight loop.
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let n: usize = self.out_shape.iter().product();
        if n == 0 {
            return;
        }
        let rank = self.out_shape.len();
        let last = self.out_shape[rank - 1];
        let (sa, sb) = (self.a_strides[rank - 1], self.b_strides[rank - 1]);
        let outer = rank - 1;
        let mut counter = vec![0usize; outer];
        let (mut ia, mut ib) = (0usize, 0usize);
        for row in 0..n / last {
            let o = row * last;
            for k in 0..last {
                f(o + k, ia + k * sa, ib + k * sb);
            }
            for d in (0..outer).rev() {
                counter[d] += 1;
                ia += self.a_strides[d];
                ib += self.b_strides[d];
                if counter[d] < self.out_shape[d] {
                    break;
                }
                ia -= self.a_strides[d] * counter[d];
                ib -= self.b_strides[d] * counter[d];
                counter[d] = 0;
            }
        }
    }
}

impl<T: Scalar> Tape<'_, T> {
    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let plan = Broadcast::new(&sa, &sb).ok_or_else(|| {
            Error::shape("elementwise", format!("cannot broadcast {sa:?} with {sb:?}"))
        })?;
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = vec![T::zero(); plan.out_shape.iter().product()];
        macro_rules! apply {
            ($op:tt) => {
                if sa == sb {
                    for ((o, x), y) in out.iter_mut().zip(va).zip(vb) {
                        *o = *x $op *y;
                    }
                } else {
                    plan.for_each(|o, ia, ib| out[o] = va[ia] $op vb[ib]);
                }
            };
        }
        match kind {
            BinaryKind::Add => apply!(+),
            BinaryKind::Sub => apply!(-),
            BinaryKind::Mul => apply!(*),
            BinaryKind::Div => apply!(/),
        }
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        };
        self.push(name, out, plan.out_shape, &[a, b], Op::Binary { kind, a, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub(super) fn binary_backward(
        &self,
        kind: BinaryKind,
        a: Var,
        b: Var,
        gout: &[T],
        store: &mut GradStore<T>,
    ) {
        let plan = Broadcast::new(self.shape(a), self.shape(b)).expect("validated in forward");
        let (va, vb) = (self.value(a), self.value(b));
        if let Some(ga) = store.slot(a) {
            match kind {
                BinaryKind::Add | BinaryKind::Sub => plan.for_each(|o, ia, _| ga[ia] += gout[o]),
                BinaryKind::Mul => plan.for_each(|o, ia, ib| ga[ia] += gout[o] * vb[ib]),
                BinaryKind::Div => plan.for_each(|o, ia, ib| ga[ia] += gout[o] / vb[ib]),
            }
        }
        if let Some(gb) = store.slot(b) {
            match kind {
                BinaryKind::Add => plan.for_each(|o, _, ib| gb[ib] += gout[o]),
                BinaryKind::Sub => plan.for_each(|o, _, ib| gb[ib] -= gout[o]),
                BinaryKind::Mul => plan.for_each(|o, ia, ib| gb[ib] += gout[o] * va[ia]),
                BinaryKind::Div => plan.for_each(|o, ia, ib| gb[ib] -= gout[o] * va[ia] / (vb[ib] * vb[ib])),
            }
        }
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.value(x).iter().map(|v| *v + c).collect();
        self.push("add_scalar", out, self.shape(x).to_vec(), &[x], Op::AddScalar(x))
    }

    pub fn mul_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.value(x).iter().map(|v| *v * c).collect();
        self.push("mul_scalar", out, self.shape(x).to_vec(), &[x], Op::MulScalar(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.mul_scalar(x, -T::one())
    }

    pub fn unary(&mut self, kind: Unary<T>, x: Var) -> Result<Var> {
        let f = |v: T| match kind {
            Unary::LeakyRelu(slope) => {
                if v > T::zero() {
                    v
                } else {
                    v * slope
                }
            }
            Unary::Sigmoid => sigmoid(v),
            Unary::Exp => v.exp(),
            Unary::Log => v.ln(),
            Unary::Softplus => softplus(v),
            Unary::Abs => v.abs(),
            Unary::Square => v * v,
            Unary::Clamp(lo, hi) => v.max(lo).min(hi),
        };
        let out = self.value(x).iter().map(|v| f(*v)).collect();
        let name = match kind {
            Unary::LeakyRelu(_) => "leaky_relu",
            Unary::Sigmoid => "sigmoid",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Softplus => "softplus",
            Unary::Abs => "abs",
            Unary::Square => "square",
            Unary::Clamp(..) => "clamp",
        };
        self.push(name, out, self.shape(x).to_vec(), &[x], Op::Unary(kind, x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Result<Var> {
        self.unary(Unary::LeakyRelu(slope), x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Log, x)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Softplus, x)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Abs, x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Square, x)
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        self.unary(Unary::Clamp(lo, hi), x)
    }

    pub(super) fn unary_backward(
        &self,
        kind: Unary<T>,
        x: Var,
        out: Var,
        gout: &[T],
        store: &mut GradStore<T>,
    ) {
        let xv = self.value(x);
        let yv = self.value(out);
        let Some(g) = store.slot(x) else { return };
        for i in 0..g.len() {
            let (v, y) = (xv[i], yv[i]);
            let d = match kind {
                Unary::LeakyRelu(slope) => {
                    if v > T::zero() {
                        T::one()
                    } else {
                        slope
                    }
                }
                Unary::Sigmoid => y * (T::one() - y),
                Unary::Exp => y,
                Unary::Log => T::one() / v,
                Unary::Softplus => sigmoid(v),
                Unary::Abs => {
                    if v > T::zero() {
                        T::one()
                    } else if v < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    }
                }
                Unary::Square => v + v,
                Unary::Clamp(lo, hi) => {
                    if v > lo && v < hi {
                        T::one()
                    } else {
                        T::zero()
                    }
                }
            };
            g[i] += gout[i] * d;
        }
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().copied().sum();
        self.push("sum", vec![s], vec![1], &[x], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s = v.iter().copied().sum::<T>() / T::c(v.len() as f64);
        self.push("mean", vec![s], vec![1], &[x], Op::Mean(x))
    }
}
