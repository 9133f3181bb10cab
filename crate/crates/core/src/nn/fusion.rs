use std::cmp::Ordering;

use fwd_tensor::{ParamId, ParamStore, Real, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{scale_channels, Init, Linear};
use crate::error::{FwdError, Result};

pub const DEFAULT_HEADS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub n_heads: usize,
    /// Per-head key width.
    pub key_dim: usize,
    pub feature_dim: usize,
}

impl FusionConfig {
    pub fn scaled(width: Real, feature_dim: usize) -> Self {
        Self {
            n_heads: DEFAULT_HEADS,
            key_dim: scale_channels(16, width),
            feature_dim,
        }
    }

    pub fn value_dim(&self) -> usize {
        self.feature_dim / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.key_dim == 0 || !self.feature_dim.is_multiple_of(self.n_heads) {
            return Err(FwdError::shape(format!(
                "fusion: feature_dim {} must split evenly over {} heads",
                self.feature_dim, self.n_heads
            )));
        }
        Ok(())
    }
}

pub struct FusionOutput<'t> {
    /// `[P, C]`.
    pub fused: Var<'t>,
    /// `[P, heads, N]` attention weights.
    pub weights: Tensor,
}

/// Set attention over per-view feature vectors, queried by a learned token.
///
/// Per pixel, the views are summed in a canonical order (by score, then by
/// value bits), so the result does not depend on the order of `views` down
/// to the last bit.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub config: FusionConfig,
    pub token: ParamId,
    pub empty: ParamId,
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
}

impl Fusion {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: FusionConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config.feature_dim;
        let hk = config.n_heads * config.key_dim;
        let token = store.add("fusion.token", Tensor::zeros([1, c]));
        let empty = store.add("fusion.empty", Tensor::randn([c], 0.1, rng));
        Ok(Self {
            query: Linear::new(store, "fusion.q", c, hk, Init::He, rng),
            key: Linear::new(store, "fusion.k", c, hk, Init::He, rng),
            value: Linear::new(store, "fusion.v", c, c, Init::He, rng),
            out: Linear::new(store, "fusion.o", c, c, Init::He, rng),
            config,
            token,
            empty,
        })
    }

    /// `views`: N tensors of `[P, C]`. `coverage`, when given, holds one
    /// mask of length P per view; uncovered entries are replaced by the
    /// learned empty embedding before attention.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        views: &[Var<'t>],
        coverage: Option<&[Vec<bool>]>,
    ) -> Result<FusionOutput<'t>> {
        let Some(first) = views.first() else {
            return Err(FwdError::EmptyInput("fusion needs at least one view".into()));
        };
        let c = self.config.feature_dim;
        let p = first.shape()[0];
        for v in views {
            if v.shape() != [p, c] {
                return Err(FwdError::shape(format!("fusion view {:?}, expected [{p}, {c}]", v.shape())));
            }
        }
        let n = views.len();
        let rows: Vec<Var<'t>> = match coverage {
            Some(cov) => {
                if cov.len() != n || cov.iter().any(|m| m.len() != p) {
                    return Err(FwdError::shape("fusion coverage masks do not match views".to_string()));
                }
                let empty = tape.param(store, self.empty);
                views
                    .iter()
                    .zip(cov)
                    .map(|(v, m)| v.select_rows(m, empty))
                    .collect::<std::result::Result<_, _>>()?
            }
            None => views.to_vec(),
        };
        // row p·N + n holds view n at pixel p
        let x = Var::concat(&rows, 1)?.reshape([p * n, c])?;
        let k = self.key.forward(tape, store, x)?;
        let v = self.value.forward(tape, store, x)?;
        let q = self.query.forward(tape, store, tape.param(store, self.token))?;
        let (pooled, weights) = attention_pool(q, k, v, n, self.config.n_heads, self.config.key_dim)?;
        Ok(FusionOutput {
            fused: self.out.forward(tape, store, pooled)?,
            weights,
        })
    }
}

fn total_cmp_slices(a: &[Real], b: &[Real]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Softmax attention of one query per head over groups of `n` rows.
///
/// `q: [1, H·dk]`, `k: [P·n, H·dk]`, `v: [P·n, H·dv]` → `[P, H·dv]`, plus
/// the weights `[P, H, n]`.
pub fn attention_pool<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>, n: usize, heads: usize, dk: usize) -> Result<(Var<'t>, Tensor)> {
    let (qv, kv, vv) = (q.value(), k.value(), v.value());
    let hk = heads * dk;
    let rows = kv.shape()[0];
    let cv = vv.last_dim();
    if n == 0 || qv.numel() != hk || kv.shape() != [rows, hk] || vv.shape() != [rows, cv] || rows % n != 0 || cv % heads != 0 {
        return Err(FwdError::shape(format!(
            "attention_pool: q {:?}, k {:?}, v {:?}, n {n}, heads {heads}",
            qv.shape(),
            kv.shape(),
            vv.shape()
        )));
    }
    let p = rows / n;
    let dv = cv / heads;
    let scale = 1.0 / (dk as Real).sqrt();
    let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
    let mut out = vec![0.0; p * cv];
    let mut weights = vec![0.0; p * heads * n];
    let mut scores = vec![0.0; n];
    let mut order: Vec<usize> = (0..n).collect();
    for px in 0..p {
        for h in 0..heads {
            let qh = &qd[h * dk..(h + 1) * dk];
            for (j, s) in scores.iter_mut().enumerate() {
                let kr = &kd[(px * n + j) * hk + h * dk..][..dk];
                *s = qh.iter().zip(kr).map(|(a, b)| a * b).sum::<Real>() * scale;
            }
            let vrow = |j: usize| &vd[(px * n + j) * cv + h * dv..][..dv];
            order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then_with(|| total_cmp_slices(vrow(a), vrow(b))));
            let m = scores[order[n - 1]];
            let e: Vec<Real> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: Real = order.iter().map(|&j| e[j]).sum();
            let w = &mut weights[(px * heads + h) * n..][..n];
            for j in 0..n {
                w[j] = e[j] / z;
            }
            let o = &mut out[px * cv + h * dv..][..dv];
            for &j in &order {
                for (oi, vi) in o.iter_mut().zip(vrow(j)) {
                    *oi += w[j] * vi;
                }
            }
        }
    }
    let weights = Tensor::new([p, heads, n], weights)?;
    let value = Tensor::new([p, cv], out)?;
    let saved = weights.clone();
    let var = q.tape().op(&[q, k, v], value, move |args| {
        let g = args.grad.data();
        let (qd, kd, vd) = (args.inputs[0].data(), args.inputs[1].data(), args.inputs[2].data());
        let wd = saved.data();
        let mut gq = vec![0.0; hk];
        let mut gk = vec![0.0; rows * hk];
        let mut gv = vec![0.0; rows * cv];
        let mut da = vec![0.0; n];
        for px in 0..p {
            for h in 0..heads {
                let w = &wd[(px * heads + h) * n..][..n];
                let go = &g[px * cv + h * dv..][..dv];
                for j in 0..n {
                    let r = px * n + j;
                    da[j] = go.iter().zip(&vd[r * cv + h * dv..][..dv]).map(|(a, b)| a * b).sum();
                    for (gvi, goi) in gv[r * cv + h * dv..][..dv].iter_mut().zip(go) {
                        *gvi += w[j] * goi;
                    }
                }
                let mean: Real = (0..n).map(|j| w[j] * da[j]).sum();
                for j in 0..n {
                    let ds = w[j] * (da[j] - mean) * scale;
                    let r = px * n + j;
                    for t in 0..dk {
                        gq[h * dk + t] += ds * kd[r * hk + h * dk + t];
                        gk[r * hk + h * dk + t] += ds * qd[h * dk + t];
                    }
                }
            }
        }
        vec![
            args.needs[0].then(|| Tensor::new(args.inputs[0].shape().to_vec(), gq).expect("shape")),
            args.needs[1].then(|| Tensor::new([rows, hk], gk).expect("shape")),
            args.needs[2].then(|| Tensor::new([rows, cv], gv).expect("shape")),
        ]
    });
    Ok((var, weights))
}
