use crate::error::shape_err;
use crate::gemm::{gemm, gemm_tn, Layout};
use crate::{Result, Tensor, Var};

impl<'t> Var<'t> {
    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
            return shape_err(format!(
                "matmul needs 2-d operands, got {:?} and {:?}",
                a.shape(),
                b.shape()
            ));
        };
        if k != k2 {
            return shape_err(format!(
                "matmul inner dimensions differ: {:?} · {:?}",
                a.shape(),
                b.shape()
            ));
        }
        let mut c = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            a.data(),
            Layout::row_major(k),
            b.data(),
            Layout::row_major(n),
            &mut c,
            false,
        );
        let value = Tensor::new([m, n], c)?;
        Ok(self.tape.op(&[self, other], value, move |args| {
            let (a, b, g) = (&args.inputs[0], &args.inputs[1], args.grad.data());
            // dA = dC · Bᵀ
            let ga = args.needs[0].then(|| {
                let mut ga = vec![0.0; m * k];
                gemm(
                    m,
                    n,
                    k,
                    g,
                    Layout::row_major(n),
                    b.data(),
                    Layout::transposed(n),
                    &mut ga,
                    false,
                );
                Tensor::new([m, k], ga).expect("shape")
            });
            // dB = Aᵀ · dC
            let gb = args.needs[1].then(|| {
                let mut gb = vec![0.0; k * n];
                gemm_tn(m, k, n, a.data(), g, &mut gb, false);
                Tensor::new([k, n], gb).expect("shape")
            });
            vec![ga, gb]
        }))
    }

    /// `x · w + b` for `x: [m, k]`, `w: [k, n]`, `b: [n]`.
    pub fn linear(self, w: Var<'t>, b: Option<Var<'t>>) -> Result<Var<'t>> {
        let y = self.matmul(w)?;
        match b {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }
}

#[cfg(test)]
mod tests {
    use crate::{Tape, Tensor, TensorError};

    #[test]
    fn identity_product() {
        let tape = Tape::new();
        let i = tape.constant(Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let m = tape.constant(Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        assert_eq!(i.matmul(m).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn zero_row_times_anything() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::zeros([1, 3]));
        let m = tape.constant(Tensor::from_fn([3, 4], |i| i as f64 as crate::Real - 5.0));
        let y = z.matmul(m).unwrap();
        assert_eq!(y.shape(), vec![1, 4]);
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn inner_dimension_mismatch() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([2, 3]));
        assert!(matches!(a.matmul(b), Err(TensorError::Shape(_))));
    }

    #[test]
    fn gradients_against_manual_formula() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::new([1, 2], vec![1.0, 2.0]).unwrap(), true);
        let b = tape.leaf(Tensor::new([2, 1], vec![3.0, 4.0]).unwrap(), true);
        let y = a.matmul(b).unwrap().sum();
        assert_eq!(y.value().item(), 11.0);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[3.0, 4.0]);
        assert_eq!(g.get(b).unwrap().data(), &[1.0, 2.0]);
    }
}
