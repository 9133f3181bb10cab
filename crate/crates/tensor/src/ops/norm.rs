use crate::error::shape_err;
use crate::{Real, Result, Tensor, Var};

impl<'t> Var<'t> {
    /// Per-channel normalization over the spatial axes of `[H, W, C]`
    /// (biased variance, no affine terms).
    pub fn instance_norm(self, eps: Real) -> Result<Var<'t>> {
        let x = self.value();
        let &[h, w, c] = x.shape() else {
            return shape_err(format!("instance_norm input must be [H, W, C], got {:?}", x.shape()));
        };
        let n = h * w;
        let xd = x.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for p in 0..n {
            for ch in 0..c {
                mean[ch] += xd[p * c + ch];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as Real);
        // one correction pass, so constant channels center to exactly zero
        let mut corr = vec![0.0; c];
        for p in 0..n {
            for ch in 0..c {
                corr[ch] += xd[p * c + ch] - mean[ch];
            }
        }
        for (m, d) in mean.iter_mut().zip(&corr) {
            *m += d / n as Real;
        }
        for p in 0..n {
            for ch in 0..c {
                let d = xd[p * c + ch] - mean[ch];
                var[ch] += d * d;
            }
        }
        let inv_std: Vec<Real> = var.iter().map(|v| 1.0 / (v / n as Real + eps).sqrt()).collect();
        let mut out = vec![0.0; n * c];
        for p in 0..n {
            for ch in 0..c {
                out[p * c + ch] = (xd[p * c + ch] - mean[ch]) * inv_std[ch];
            }
        }
        let value = Tensor::new([h, w, c], out)?;
        Ok(self.tape.op(&[self], value, move |args| {
            let (xh, g) = (args.output.data(), args.grad.data());
            let mut sum_g = vec![0.0; c];
            let mut sum_gx = vec![0.0; c];
            for p in 0..n {
                for ch in 0..c {
                    sum_g[ch] += g[p * c + ch];
                    sum_gx[ch] += g[p * c + ch] * xh[p * c + ch];
                }
            }
            let nf = n as Real;
            let mut gx = vec![0.0; n * c];
            for p in 0..n {
                for ch in 0..c {
                    let i = p * c + ch;
                    gx[i] = inv_std[ch] * (g[i] - sum_g[ch] / nf - xh[i] * sum_gx[ch] / nf);
                }
            }
            vec![Some(Tensor::new([h, w, c], gx).expect("shape"))]
        }))
    }
}

#[cfg(test)]
mod tests {
    use crate::{Tape, Tensor};

    #[test]
    fn channels_are_standardized() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn([3, 4, 2], |i| (i as crate::Real).powi(2) * 0.1));
        let y = x.instance_norm(1e-12).unwrap().value();
        for ch in 0..2 {
            let vals: Vec<_> = (0..12).map(|p| y.data()[p * 2 + ch]).collect();
            let m: crate::Real = vals.iter().sum::<crate::Real>() / 12.0;
            let v: crate::Real = vals.iter().map(|x| (x - m).powi(2)).sum::<crate::Real>() / 12.0;
            assert!(m.abs() < 1e-9);
            assert!((v - 1.0).abs() < 1e-9);
        }
    }
}
