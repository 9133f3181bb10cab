use crate::error::shape_err;
use crate::{Real, Result, Tensor, Var};

fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'t> Var<'t> {
    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let value = (*self.value()).clone().reshape(shape)?;
        Ok(self.tape.op(&[self], value, |args| {
            let g = args.grad.clone().reshape(args.inputs[0].shape().to_vec());
            vec![Some(g.expect("same numel"))]
        }))
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let Some(first) = parts.first() else {
            return shape_err("concat of zero tensors");
        };
        let values: Vec<_> = parts.iter().map(|v| v.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return shape_err(format!("concat axis {axis} out of range for {base:?}"));
        }
        let mut lens = Vec::with_capacity(parts.len());
        for v in &values {
            let s = v.shape();
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return shape_err(format!("concat of {base:?} with {s:?} along {axis}"));
            }
            lens.push(s[axis]);
        }
        let total: usize = lens.iter().sum();
        let (outer, _, inner) = split_at_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &len) in values.iter().zip(&lens) {
                data.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        Ok(first.tape.op(parts, value, move |args| {
            let g = args.grad.data();
            let mut out: Vec<Vec<Real>> = lens.iter().map(|l| Vec::with_capacity(outer * l * inner)).collect();
            for o in 0..outer {
                let mut off = o * total * inner;
                for (buf, &len) in out.iter_mut().zip(&lens) {
                    buf.extend_from_slice(&g[off..off + len * inner]);
                    off += len * inner;
                }
            }
            out.into_iter()
                .zip(args.inputs)
                .zip(args.needs)
                .map(|((d, x), &need)| need.then(|| Tensor::new(x.shape().to_vec(), d).expect("shape")))
                .collect()
        }))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return shape_err(format!("narrow({axis}, {start}, {len}) of {shape:?}"));
        }
        let (outer, dim, inner) = split_at_axis(&shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, data)?;
        Ok(self.tape.op(&[self], value, move |args| {
            let g = args.grad.data();
            let mut gx = vec![0.0; outer * dim * inner];
            for o in 0..outer {
                let base = (o * dim + start) * inner;
                gx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(Tensor::new(shape.clone(), gx).expect("shape"))]
        }))
    }

    /// Rows of a 2-d tensor picked by index; repeated indices are allowed.
    pub fn gather_rows(self, rows: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let &[n, c] = x.shape() else {
            return shape_err(format!("gather_rows needs a 2-d tensor, got {:?}", x.shape()));
        };
        if let Some(bad) = rows.iter().find(|&&r| r >= n) {
            return shape_err(format!("row {bad} out of range for {n} rows"));
        }
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            data.extend_from_slice(&x.data()[r * c..(r + 1) * c]);
        }
        let value = Tensor::new([rows.len(), c], data)?;
        let rows = rows.to_vec();
        Ok(self.tape.op(&[self], value, move |args| {
            let g = args.grad.data();
            let mut gx = vec![0.0; n * c];
            for (i, &r) in rows.iter().enumerate() {
                for j in 0..c {
                    gx[r * c + j] += g[i * c + j];
                }
            }
            vec![Some(Tensor::new([n, c], gx).expect("shape"))]
        }))
    }

    /// Row `i` of the result is row `i` of `self` where `keep[i]`, and the
    /// vector `fill` (shape `[c]`) elsewhere.
    pub fn select_rows(self, keep: &[bool], fill: Var<'t>) -> Result<Var<'t>> {
        let (x, f) = (self.value(), fill.value());
        let c = x.last_dim();
        let n = x.numel() / c.max(1);
        if keep.len() != n || f.numel() != c {
            return shape_err(format!(
                "select_rows: {:?} with mask of {} and fill {:?}",
                x.shape(),
                keep.len(),
                f.shape()
            ));
        }
        let mut data = x.data().to_vec();
        for (i, _) in keep.iter().enumerate().filter(|(_, k)| !**k) {
            data[i * c..(i + 1) * c].copy_from_slice(f.data());
        }
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let keep = keep.to_vec();
        Ok(self.tape.op(&[self, fill], value, move |args| {
            let g = args.grad.data();
            let mut gx = g.to_vec();
            let mut gf = vec![0.0; c];
            for (i, _) in keep.iter().enumerate().filter(|(_, k)| !**k) {
                for j in 0..c {
                    gf[j] += g[i * c + j];
                    gx[i * c + j] = 0.0;
                }
            }
            vec![
                args.needs[0].then(|| Tensor::new(args.inputs[0].shape().to_vec(), gx)).map(|t| t.expect("shape")),
                args.needs[1].then(|| Tensor::new(args.inputs[1].shape().to_vec(), gf)).map(|t| t.expect("shape")),
            ]
        }))
    }
}
