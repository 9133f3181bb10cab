use fwd_tensor::{Real, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{FwdError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContentLoss {
    #[default]
    Off,
    /// Mean absolute difference of horizontal and vertical image gradients,
    /// standing in for a perceptual loss.
    GradientDiffSurrogate,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_l2: Real,
    pub lambda_c: Real,
    pub lambda_s: Real,
    pub content_loss: ContentLoss,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_l2: 5.0,
            lambda_c: 1.0,
            lambda_s: 5.0,
            content_loss: ContentLoss::Off,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.lambda_l2, self.lambda_c, self.lambda_s].iter().any(|l| !(*l >= 0.0)) {
            return Err(FwdError::Domain(format!("loss weights must be ≥ 0, got {self:?}")));
        }
        Ok(())
    }
}

/// Loss value on the tape plus its unweighted parts.
pub struct LossOutput<'t> {
    pub total: Var<'t>,
    pub parts: LossParts,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub l2: Real,
    pub content: Real,
    pub depth: Real,
    pub total: Real,
}

/// A depth map to supervise: prediction, sensor depth and its mask.
pub struct DepthTarget<'t, 'a> {
    pub pred: Var<'t>,
    pub sensor: &'a Tensor,
    pub mask: &'a [bool],
}

fn image_gradients<'t>(x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let s = x.shape();
    let (h, w) = (s[0], s[1]);
    let dx = x.narrow(1, 1, w - 1)?.sub(x.narrow(1, 0, w - 1)?)?;
    let dy = x.narrow(0, 1, h - 1)?.sub(x.narrow(0, 0, h - 1)?)?;
    Ok((dx, dy))
}

/// `ℒ = λ_l2·ℒ_l2 + λ_c·ℒ_c + λ_s·ℒ_s`.
///
/// `ℒ_l2` is the mean squared pixel error, `ℒ_c` the gradient-difference
/// surrogate (0 when off) and `ℒ_s` the mean over `depths` of the masked
/// mean absolute depth error (0 for an empty mask).
pub fn loss_var<'t>(
    tape: &'t Tape,
    pred: Var<'t>,
    gt: &Tensor,
    depths: &[DepthTarget<'t, '_>],
    cfg: &LossConfig,
) -> Result<LossOutput<'t>> {
    if pred.shape() != gt.shape() || pred.shape().len() != 3 {
        return Err(FwdError::shape(format!("loss: prediction {:?}, target {:?}", pred.shape(), gt.shape())));
    }
    let gt_v = tape.constant(gt.clone());
    let l2 = pred.sub(gt_v)?.square().mean();
    let mut total = l2.scale(cfg.lambda_l2);
    let mut parts = LossParts {
        l2: l2.value().item(),
        ..Default::default()
    };
    if cfg.content_loss == ContentLoss::GradientDiffSurrogate {
        let s = pred.shape();
        if s[0] < 2 || s[1] < 2 {
            return Err(FwdError::shape(format!("content loss needs at least 2×2, got {s:?}")));
        }
        let (px, py) = image_gradients(pred)?;
        let (gx, gy) = image_gradients(gt_v)?;
        let ex = px.sub(gx)?.abs().reshape([px.numel()])?;
        let ey = py.sub(gy)?.abs().reshape([py.numel()])?;
        let c = Var::concat(&[ex, ey], 0)?.mean();
        parts.content = c.value().item();
        total = total.add(c.scale(cfg.lambda_c))?;
    }
    if !depths.is_empty() {
        let mut terms = Vec::with_capacity(depths.len());
        for d in depths {
            if d.pred.shape() != d.sensor.shape() || d.mask.len() != d.sensor.numel() {
                return Err(FwdError::shape(format!(
                    "depth loss: prediction {:?}, sensor {:?}, mask {}",
                    d.pred.shape(),
                    d.sensor.shape(),
                    d.mask.len()
                )));
            }
            let count = d.mask.iter().filter(|m| **m).count();
            let m = Tensor::new(d.sensor.shape().to_vec(), d.mask.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect())?;
            let err = d.pred.sub(tape.constant(d.sensor.clone()))?.mul(tape.constant(m))?.abs().sum();
            terms.push(err.scale(if count > 0 { 1.0 / count as Real } else { 0.0 }));
        }
        let mut s = terms[0];
        for t in &terms[1..] {
            s = s.add(*t)?;
        }
        let s = s.scale(1.0 / terms.len() as Real);
        parts.depth = s.value().item();
        total = total.add(s.scale(cfg.lambda_s))?;
    }
    parts.total = total.value().item();
    Ok(LossOutput { total, parts })
}

/// [`loss_var`] on plain tensors for a single depth map.
pub fn loss(
    pred: &Tensor,
    gt: &Tensor,
    depth: Option<(&Tensor, &Tensor, &[bool])>,
    cfg: &LossConfig,
) -> Result<LossParts> {
    let tape = Tape::inference();
    let p = tape.constant(pred.clone());
    let targets: Vec<DepthTarget<'_, '_>> = depth
        .map(|(d, s, m)| DepthTarget {
            pred: tape.constant(d.clone()),
            sensor: s,
            mask: m,
        })
        .into_iter()
        .collect();
    Ok(loss_var(&tape, p, gt, &targets, cfg)?.parts)
}
