use serde::Serialize;

use crate::error::{Error, Result};

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Reported PSNR for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ImageMetrics {
    pub mae: f64,
    pub ssim: f64,
    pub psnr: f64,
}

fn check(reference: &[f64], candidate: &[f64], width: usize) -> Result<usize> {
    if reference.len() != candidate.len() || width == 0 || !reference.len().is_multiple_of(width) {
        return Err(Error::invalid(format!(
            "image sizes differ: {} vs {} (width {width})",
            reference.len(),
            candidate.len()
        )));
    }
    Ok(reference.len() / width)
}

/// Mean absolute error over pixels with `mask > 0.5`.
pub fn masked_mae(reference: &[f64], candidate: &[f64], mask: &[f64]) -> Result<f64> {
    if reference.len() != candidate.len() || mask.len() != reference.len() {
        return Err(Error::invalid("reference, candidate and mask sizes differ"));
    }
    let (sum, count) = reference
        .iter()
        .zip(candidate)
        .zip(mask)
        .filter(|(_, &m)| m > 0.5)
        .fold((0.0, 0usize), |(s, c), ((a, b), _)| (s + (a - b).abs(), c + 1));
    if count == 0 {
        return Err(Error::invalid("mask selects no pixels"));
    }
    Ok(sum / count as f64)
}

/// Peak signal-to-noise ratio for peak 1, capped at [`PSNR_CAP_DB`].
pub fn psnr(reference: &[f64], candidate: &[f64]) -> Result<f64> {
    if reference.len() != candidate.len() || reference.is_empty() {
        return Err(Error::invalid("image sizes differ"));
    }
    let mse = reference
        .iter()
        .zip(candidate)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / reference.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Mean SSIM with a uniform 7x7 window, data range 1 and sample covariances,
/// averaged over windows that fit entirely inside the image.
pub fn ssim(reference: &[f64], candidate: &[f64], width: usize) -> Result<f64> {
    let height = check(reference, candidate, width)?;
    if height < SSIM_WINDOW || width < SSIM_WINDOW {
        return Err(Error::invalid(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels")));
    }
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let np = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let cov_norm = np / (np - 1.0);
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=height - SSIM_WINDOW {
        for x0 in 0..=width - SSIM_WINDOW {
            let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in y0..y0 + SSIM_WINDOW {
                for x in x0..x0 + SSIM_WINDOW {
                    let a = reference[y * width + x];
                    let b = candidate[y * width + x];
                    sx += a;
                    sy += b;
                    sxx += a * a;
                    syy += b * b;
                    sxy += a * b;
                }
            }
            let (ux, uy) = (sx / np, sy / np);
            let vx = cov_norm * (sxx / np - ux * ux);
            let vy = cov_norm * (syy / np - uy * uy);
            let vxy = cov_norm * (sxy / np - ux * uy);
            let num = (2.0 * ux * uy + c1) * (2.0 * vxy + c2);
            let den = (ux * ux + uy * uy + c1) * (vx + vy + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

pub fn image_metrics(reference: &[f64], candidate: &[f64], mask: &[f64], width: usize) -> Result<ImageMetrics> {
    Ok(ImageMetrics {
        mae: masked_mae(reference, candidate, mask)?,
        ssim: ssim(reference, candidate, width)?,
        psnr: psnr(reference, candidate)?,
    })
}
