use std::fmt::Write as _;

use fwd_tensor::{Real, Tensor};

use crate::error::{FwdError, Result};

pub const PSNR_CAP_DB: Real = 99.0;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: Real = 1.5;

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(FwdError::shape(format!("metric inputs {:?} and {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `10·log10(peak² / MSE)`, capped at 99 dB when MSE < 1e-10.
pub fn psnr(a: &Tensor, b: &Tensor, peak: Real) -> Result<Real> {
    same_shape(a, b)?;
    let n = a.numel().max(1) as Real;
    let mse: Real = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<Real>() / n;
    if mse < 1e-10 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> [Real; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as Real;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as Real - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: Real = g.iter().sum();
    g.map(|v| v / s)
}

/// Separable Gaussian filter over valid window positions only.
fn filter_valid(img: &[Real], h: usize, w: usize, g: &[Real; SSIM_WINDOW]) -> Vec<Real> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|k| g[k] * img[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|k| g[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Structural similarity with an 11×11 Gaussian window (σ = 1.5), averaged
/// over valid window centers and then over channels. Inputs are
/// `[H, W, C]` or `[H, W]`.
pub fn ssim(a: &Tensor, b: &Tensor, peak: Real) -> Result<Real> {
    same_shape(a, b)?;
    let s = a.shape();
    let (h, w, c) = match *s {
        [h, w] => (h, w, 1),
        [h, w, c] => (h, w, c),
        _ => return Err(FwdError::shape(format!("ssim expects an image, got {s:?}"))),
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(FwdError::shape(format!("ssim needs at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {h}×{w}")));
    }
    let g = gaussian_window();
    let (c1, c2) = ((0.01 * peak).powi(2), (0.03 * peak).powi(2));
    let mut total = 0.0;
    for ch in 0..c {
        let plane = |t: &Tensor| -> Vec<Real> { (0..h * w).map(|i| t.data()[i * c + ch]).collect() };
        let (x, y) = (plane(a), plane(b));
        let xx: Vec<Real> = x.iter().map(|v| v * v).collect();
        let yy: Vec<Real> = y.iter().map(|v| v * v).collect();
        let xy: Vec<Real> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, my) = (filter_valid(&x, h, w, &g), filter_valid(&y, h, w, &g));
        let (sxx, syy, sxy) = (filter_valid(&xx, h, w, &g), filter_valid(&yy, h, w, &g), filter_valid(&xy, h, w, &g));
        let mut sum = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            sum += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += sum / mx.len() as Real;
    }
    Ok(total / c as Real)
}

/// One row of the metrics table.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub scene: String,
    pub view: usize,
    pub psnr_db: Real,
    pub ssim: Real,
    pub ms_per_frame: Real,
}

pub const METRICS_HEADER: &str = "scene,view,psnr_db,ssim,ms_per_frame";

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{},{},{:.4},{:.6},{:.3}", r.scene, r.view, r.psnr_db, r.ssim, r.ms_per_frame);
    }
    out
}
