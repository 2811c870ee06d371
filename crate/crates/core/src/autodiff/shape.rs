use super::{GradStore, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Tape<'_, T> {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape(x), shape),
            ));
        }
        let data = self.value(x).to_vec();
        self.push("reshape", data, shape.to_vec(), &[x], Op::Reshape(x))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let &[r, c] = self.shape(x) else {
            return Err(Error::shape("transpose", format!("rank-2 input expected, got {:?}", self.shape(x))));
        };
        let v = self.value(x);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        self.push("transpose", out, vec![c, r], &[x], Op::Transpose(x))
    }

    pub(super) fn transpose_backward(&self, x: Var, gout: &[T], store: &mut GradStore<T>) {
        let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
        if let Some(g) = store.slot(x) {
            for i in 0..r {
                for j in 0..c {
                    g[i * c + j] += gout[j * r + i];
                }
            }
        }
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{base:?} vs {s:?} along axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_at_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let block = self.shape(*v)[axis] * inner;
                out.extend_from_slice(&self.value(*v)[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push("concat", out, shape, inputs, Op::Concat { inputs: inputs.to_vec(), axis })
    }

    pub(super) fn concat_backward(
        &self,
        inputs: &[Var],
        axis: usize,
        out: Var,
        gout: &[T],
        store: &mut GradStore<T>,
    ) {
        let (outer, total, inner) = split_at_axis(self.shape(out), axis);
        let mut offset = 0;
        for v in inputs {
            let block = self.shape(*v)[axis] * inner;
            if let Some(g) = store.slot(*v) {
                for o in 0..outer {
                    let src = &gout[o * total * inner + offset..][..block];
                    for (gi, s) in g[o * block..(o + 1) * block].iter_mut().zip(src) {
                        *gi += *s;
                    }
                }
            }
            offset += block;
        }
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!("[{start}, {}) along axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, dim, inner) = split_at_axis(&shape, axis);
        let v = self.value(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&v[(o * dim + start) * inner..][..len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        self.push("narrow", out, new_shape, &[x], Op::Narrow { x, axis, start })
    }

    pub(super) fn narrow_backward(
        &self,
        x: Var,
        axis: usize,
        start: usize,
        out: Var,
        gout: &[T],
        store: &mut GradStore<T>,
    ) {
        let (outer, dim, inner) = split_at_axis(self.shape(x), axis);
        let len = self.shape(out)[axis];
        if let Some(g) = store.slot(x) {
            for o in 0..outer {
                let dst = &mut g[(o * dim + start) * inner..][..len * inner];
                for (d, s) in dst.iter_mut().zip(&gout[o * len * inner..][..len * inner]) {
                    *d += *s;
                }
            }
        }
    }

    /// Places row `i` of `x` at row `rows[i]` of a zero tensor with
    /// `total_rows` rows. Target rows must be distinct.
    pub fn scatter_rows(&mut self, x: Var, rows: Vec<usize>, total_rows: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || shape[0] != rows.len() {
            return Err(Error::shape(
                "scatter_rows",
                format!("{} row indices for input {shape:?}", rows.len()),
            ));
        }
        let width: usize = shape[1..].iter().product();
        let mut out = vec![T::zero(); total_rows * width];
        let v = self.value(x);
        let mut seen = vec![false; total_rows];
        for (i, &r) in rows.iter().enumerate() {
            if r >= total_rows || std::mem::replace(&mut seen[r], true) {
                return Err(Error::shape("scatter_rows", format!("row {r} out of range or repeated")));
            }
            out[r * width..(r + 1) * width].copy_from_slice(&v[i * width..(i + 1) * width]);
        }
        let mut out_shape = shape;
        out_shape[0] = total_rows;
        self.push("scatter_rows", out, out_shape, &[x], Op::ScatterRows { x, rows })
    }

    pub(super) fn scatter_rows_backward(
        &self,
        x: Var,
        rows: &[usize],
        gout: &[T],
        store: &mut GradStore<T>,
    ) {
        let width: usize = self.shape(x)[1..].iter().product();
        if let Some(g) = store.slot(x) {
            for (i, &r) in rows.iter().enumerate() {
                for (d, s) in g[i * width..(i + 1) * width].iter_mut().zip(&gout[r * width..]) {
                    *d += *s;
                }
            }
        }
    }
}
