//! Spectral normalization of a `[K, Cout]` weight matrix.
//!
//! The matrix is treated as the linear map `Cin·k·k → Cout`, i.e. the
//! transpose of its storage layout. `u` lives in the output space (`Cout`)
//! and `v` in the input space (`K`).

use crate::error::shape_err;
use crate::{Real, Result, Tensor, Var};

// Below this estimate the weight is passed through unnormalized (an
// all-zero weight has no direction to normalize).
const SIGMA_FLOOR: Real = 1e-8;

fn normalize(v: &mut [Real]) {
    let n = v.iter().map(|x| x * x).sum::<Real>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Runs `iters` power iterations in place and returns the singular value
/// estimate `uᵀ W v`.
pub fn power_iteration(w: &Tensor, u: &mut [Real], v: &mut [Real], iters: usize) -> Real {
    let &[k, cout] = w.shape() else {
        panic!("power_iteration needs a 2-d weight, got {:?}", w.shape());
    };
    assert_eq!(u.len(), cout);
    assert_eq!(v.len(), k);
    let wd = w.data();
    for _ in 0..iters {
        for (r, vr) in v.iter_mut().enumerate() {
            *vr = (0..cout).map(|o| wd[r * cout + o] * u[o]).sum();
        }
        normalize(v);
        for (o, uo) in u.iter_mut().enumerate() {
            *uo = (0..k).map(|r| wd[r * cout + o] * v[r]).sum();
        }
        normalize(u);
    }
    sigma(wd, cout, u, v)
}

fn sigma(wd: &[Real], cout: usize, u: &[Real], v: &[Real]) -> Real {
    v.iter()
        .enumerate()
        .map(|(r, vr)| vr * (0..cout).map(|o| wd[r * cout + o] * u[o]).sum::<Real>())
        .sum()
}

impl<'t> Var<'t> {
    /// `W / σ` with `σ = uᵀ W v` for fixed power-iteration vectors.
    pub fn spectral_normalize(self, u: &[Real], v: &[Real]) -> Result<Var<'t>> {
        let w = self.value();
        let &[k, cout] = w.shape() else {
            return shape_err(format!("spectral_normalize needs a 2-d weight, got {:?}", w.shape()));
        };
        if u.len() != cout || v.len() != k {
            return shape_err(format!(
                "power-iteration vectors of length {}/{} for weight {:?}",
                u.len(),
                v.len(),
                w.shape()
            ));
        }
        let s = sigma(w.data(), cout, u, v);
        if s.abs() < SIGMA_FLOOR {
            return Ok(self);
        }
        let value = w.map(|x| x / s);
        let (u, v) = (u.to_vec(), v.to_vec());
        Ok(self.tape.op(&[self], value, move |args| {
            let (w, g) = (args.inputs[0].data(), args.grad.data());
            let inner: Real = w.iter().zip(g).map(|(a, b)| a * b).sum();
            let coef = inner / (s * s);
            let gw = (0..w.len())
                .map(|i| g[i] / s - coef * v[i / cout] * u[i % cout])
                .collect();
            vec![Some(Tensor::new([k, cout], gw).expect("shape"))]
        }))
    }
}
