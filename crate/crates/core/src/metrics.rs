//! Restoration quality metrics over [0,1]-valued images.

use crate::error::{FlowError, Result};
use crate::tensor::{Scalar, Tensor};

/// 10·log₁₀(1/MSE) for dynamic range 1; +∞ when the images match exactly.
pub fn psnr<T: Scalar>(x: &Tensor<T>, x_hat: &Tensor<T>) -> Result<f64> {
    if x.shape() != x_hat.shape() {
        return Err(FlowError::shape(format!(
            "psnr: {:?} vs {:?}",
            x.shape(),
            x_hat.shape()
        )));
    }
    let n = x.numel() as f64;
    let mse: f64 = x
        .data()
        .iter()
        .zip(x_hat.data().iter())
        .map(|(&a, &b)| {
            let d = a.to_f64() - b.to_f64();
            d * d
        })
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let center = (SSIM_WINDOW / 2) as f64;
    let mut total = 0.0;
    for i in 0..SSIM_WINDOW {
        for j in 0..SSIM_WINDOW {
            let dy = i as f64 - center;
            let dx = j as f64 - center;
            let v = (-(dy * dy + dx * dx) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[i * SSIM_WINDOW + j] = v;
            total += v;
        }
    }
    for v in w.iter_mut() {
        *v /= total;
    }
    w
}

/// Mean local SSIM with an 11×11 Gaussian window (σ = 1.5), valid-mode
/// windows, computed per channel and averaged.
pub fn ssim<T: Scalar>(x: &Tensor<T>, x_hat: &Tensor<T>) -> Result<f64> {
    if x.shape() != x_hat.shape() {
        return Err(FlowError::shape(format!(
            "ssim: {:?} vs {:?}",
            x.shape(),
            x_hat.shape()
        )));
    }
    let (c, h, w) = x.dims3()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(FlowError::shape(format!(
            "ssim: image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let win = gaussian_window();
    let plane = h * w;
    let mut channel_means = 0.0;
    for ch in 0..c {
        let xa = &x.data()[ch * plane..(ch + 1) * plane];
        let xb = &x_hat.data()[ch * plane..(ch + 1) * plane];
        let mut acc = 0.0;
        let mut count = 0usize;
        for oy in 0..=(h - SSIM_WINDOW) {
            for ox in 0..=(w - SSIM_WINDOW) {
                let mut mu_a = 0.0;
                let mut mu_b = 0.0;
                let mut aa = 0.0;
                let mut bb = 0.0;
                let mut ab = 0.0;
                for i in 0..SSIM_WINDOW {
                    for j in 0..SSIM_WINDOW {
                        let wv = win[i * SSIM_WINDOW + j];
                        let a = xa[(oy + i) * w + ox + j].to_f64();
                        let b = xb[(oy + i) * w + ox + j].to_f64();
                        mu_a += wv * a;
                        mu_b += wv * b;
                        aa += wv * a * a;
                        bb += wv * b * b;
                        ab += wv * a * b;
                    }
                }
                let var_a = aa - mu_a * mu_a;
                let var_b = bb - mu_b * mu_b;
                let cov = ab - mu_a * mu_b;
                let l = (2.0 * mu_a * mu_b + SSIM_C1) / (mu_a * mu_a + mu_b * mu_b + SSIM_C1);
                let cs = (2.0 * cov + SSIM_C2) / (var_a + var_b + SSIM_C2);
                acc += l * cs;
                count += 1;
            }
        }
        channel_means += acc / count as f64;
    }
    Ok(channel_means / c as f64)
}
