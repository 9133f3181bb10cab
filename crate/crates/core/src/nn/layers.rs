use fwd_tensor::{power_iteration, ParamId, ParamStore, Real, Tape, Tensor, Var};
use rand::Rng;

use crate::error::Result;

pub const NORM_EPS: Real = 1e-5;

/// `max(1, round(c · w))`.
pub fn scale_channels(c: usize, width: Real) -> usize {
    ((c as Real * width).round() as usize).max(1)
}

/// Uniform He initialization, bound `√(6 / fan_in)`.
pub fn he_uniform<R: Rng + ?Sized>(shape: [usize; 2], fan_in: usize, rng: &mut R) -> Tensor {
    let b = (6.0 / fan_in as Real).sqrt();
    Tensor::uniform(shape, -b, b, rng)
}

/// How a layer's weights start out.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    He,
    /// He scaled by a factor.
    Scaled(Real),
    Zero,
}

impl Init {
    fn make<R: Rng + ?Sized>(self, shape: [usize; 2], fan_in: usize, rng: &mut R) -> Tensor {
        match self {
            Init::He => he_uniform(shape, fan_in, rng),
            Init::Scaled(s) => he_uniform(shape, fan_in, rng).map(|v| v * s),
            Init::Zero => Tensor::zeros(shape),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, init: Init, rng: &mut R) -> Self {
        let weight = store.add(format!("{name}.w"), init.make([fan_in, fan_out], fan_in, rng));
        let bias = store.add(format!("{name}.b"), Tensor::zeros([fan_out]));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    /// `[N, in] → [N, out]`.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x.linear(tape.param(store, self.weight), Some(tape.param(store, self.bias)))?)
    }
}

/// Power-iteration vectors kept as non-trainable buffers.
#[derive(Clone, Debug)]
pub struct SpectralBuffers {
    pub u: ParamId,
    pub v: ParamId,
}

/// Stride-1, zero-padded convolution over `[H, W, C]` maps.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub k: usize,
    pub cin: usize,
    pub cout: usize,
    pub spectral: Option<SpectralBuffers>,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        init: Init,
        spectral: bool,
        rng: &mut R,
    ) -> Self {
        let mut conv = Self::projection(store, name, cin, cout, k, init, spectral, rng);
        conv.bias = Some(store.add(format!("{name}.b"), Tensor::zeros([cout])));
        conv
    }

    /// A convolution without bias.
    #[allow(clippy::too_many_arguments)]
    pub fn projection<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        init: Init,
        spectral: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = k * k * cin;
        let w = init.make([fan_in, cout], fan_in, rng);
        let spectral = spectral.then(|| {
            // random unit starting vectors, refined by a few iterations
            let mut u: Vec<Real> = (0..cout).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut v = vec![0.0; fan_in];
            power_iteration(&w, &mut u, &mut v, 3);
            SpectralBuffers {
                u: store.add_buffer(format!("{name}.sn_u"), Tensor::new([cout], u).expect("shape")),
                v: store.add_buffer(format!("{name}.sn_v"), Tensor::new([fan_in], v).expect("shape")),
            }
        });
        let weight = store.add(format!("{name}.w"), w);
        Self {
            weight,
            bias: None,
            k,
            cin,
            cout,
            spectral,
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let mut w = tape.param(store, self.weight);
        if let Some(sn) = &self.spectral {
            w = w.spectral_normalize(store.value(sn.u).data(), store.value(sn.v).data())?;
        }
        Ok(x.conv2d(w, self.bias.map(|b| tape.param(store, b)), self.k)?)
    }

    /// Updates the stored power-iteration vectors; returns the singular
    /// value estimate, or `None` without spectral norm.
    pub fn power_iterate(&self, store: &mut ParamStore, iters: usize) -> Option<Real> {
        let sn = self.spectral.as_ref()?;
        let w = store.value(self.weight).clone();
        let mut u = store.value(sn.u).data().to_vec();
        let mut v = store.value(sn.v).data().to_vec();
        let s = power_iteration(&w, &mut u, &mut v, iters);
        store.value_mut(sn.u).data_mut().copy_from_slice(&u);
        store.value_mut(sn.v).data_mut().copy_from_slice(&v);
        Some(s)
    }
}
