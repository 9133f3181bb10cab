use crate::error::shape_err;
use crate::{Real, Result, Tensor, TensorError, Var};

impl<'t> Var<'t> {
    /// Sum of all elements as a scalar.
    pub fn sum(self) -> Var<'t> {
        let value = Tensor::scalar(self.value().sum());
        self.tape.op(&[self], value, |args| {
            let g = args.grad.item();
            vec![Some(Tensor::full(args.inputs[0].shape().to_vec(), g))]
        })
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.numel().max(1) as Real;
        self.sum().scale(1.0 / n)
    }

    /// Inner product of two equally shaped tensors, as a scalar.
    pub fn dot(self, other: Var<'t>) -> Result<Var<'t>> {
        if self.shape() != other.shape() {
            return shape_err(format!(
                "dot of {:?} and {:?}",
                self.shape(),
                other.shape()
            ));
        }
        Ok(self.mul(other)?.sum())
    }

    /// Softmax along `axis`; the maximum is subtracted before exponentiation.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() {
            return shape_err(format!("softmax axis {axis} out of range for {shape:?}"));
        }
        if x.data().iter().any(|v| v.is_nan()) {
            return Err(TensorError::Domain("softmax of NaN".into()));
        }
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let xd = x.data();
        let mut y = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| xd[idx(j)]).fold(Real::NEG_INFINITY, Real::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (xd[idx(j)] - max).exp();
                    y[idx(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    y[idx(j)] /= total;
                }
            }
        }
        let value = Tensor::new(shape, y)?;
        Ok(self.tape.op(&[self], value, move |args| {
            let (y, g) = (args.output.data(), args.grad.data());
            let mut gx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * len + j) * inner + i;
                    let dot: Real = (0..len).map(|j| y[idx(j)] * g[idx(j)]).sum();
                    for j in 0..len {
                        gx[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                    }
                }
            }
            vec![Some(Tensor::new(args.output.shape().to_vec(), gx).expect("shape"))]
        }))
    }
}
