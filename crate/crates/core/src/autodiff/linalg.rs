use super::{GradStore, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

impl<T: Scalar> Tape<'_, T> {
    /// `[m, k] @ [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (&[m, k], &[k2, n]) = (self.shape(a), self.shape(b)) else {
            return Err(Error::shape(
                "matmul",
                format!("rank-2 operands expected, got {:?} and {:?}", self.shape(a), self.shape(b)),
            ));
        };
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}, {k}] @ [{k2}, {n}]")));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a),
            (k as isize, 1),
            self.value(b),
            (n as isize, 1),
            T::zero(),
            &mut out,
            (n as isize, 1),
        );
        self.push("matmul", out, vec![m, n], &[a, b], Op::Matmul(a, b))
    }

    pub(super) fn matmul_backward(&self, a: Var, b: Var, gout: &[T], store: &mut GradStore<T>) {
        let (m, k, n) = (self.shape(a)[0], self.shape(a)[1], self.shape(b)[1]);
        let (va, vb) = (self.value(a), self.value(b));
        if let Some(ga) = store.slot(a) {
            // dA = dC @ B^T
            T::gemm(m, n, k, T::one(), gout, (n as isize, 1), vb, (1, n as isize), T::one(), ga, (k as isize, 1));
        }
        if let Some(gb) = store.slot(b) {
            // dB = A^T @ dC
            T::gemm(k, m, n, T::one(), va, (1, k as isize), gout, (n as isize, 1), T::one(), gb, (n as isize, 1));
        }
    }

    /// Affine map `x @ weight + bias` for `x: [m, k]`, `weight: [k, n]`, `bias: [n]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        self.add(y, bias)
    }
}

#[cfg(test)]
mod tests {
    use crate::autodiff::Tape;
    use crate::tensor::Tensor;

    #[test]
    fn matmul_matches_loops() {
        let a = Tensor::from_fn([3, 4], |i| (i as f64 * 0.37).sin());
        let b = Tensor::from_fn([4, 2], |i| (i as f64 * 0.91).cos());
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let c = tape.matmul(va, vb).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let want: f64 = (0..4).map(|p| a.data()[i * 4 + p] * b.data()[p * 2 + j]).sum();
                assert!((tape.value(c)[i * 2 + j] - want).abs() < 1e-12);
            }
        }
        assert!(tape.matmul(va, va).is_err());
    }
}
